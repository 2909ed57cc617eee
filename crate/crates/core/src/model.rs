//! Parameter containers and the end-to-end forward pass for one frame pair.
//!
//! Every container is generic over its leaf type: `Array2<f64>` for stored
//! weights and [`Var`] once bound to a [`Tape`]. `map` converts between the
//! two and `visit` walks leaves in a fixed, named order that checkpoints,
//! optimizers and gradient checks all share.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Frame;
use crate::error::{Error, Result};
use crate::featurizer;
use crate::icg::{self, IcgConfig, IcgParams};
use crate::ompm::{self, MlpConfig, MlpParams};
use crate::rng::substream;
use crate::tape::{Gradients, Tape, Var};

/// `y = x·W + b` with `W` of shape `in x out` and `b` of shape `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = Array2<f64>> {
    pub weight: T,
    pub bias: T,
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn visit<'a>(&'a self, name: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{name}.weight"), &self.weight);
        f(format!("{name}.bias"), &self.bias);
    }

    pub fn visit_mut<'a>(&'a mut self, name: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{name}.weight"), &mut self.weight);
        f(format!("{name}.bias"), &mut self.bias);
    }
}

impl Linear {
    /// Gaussian weights with variance `gain² / fan_in`, zero bias.
    pub fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        Linear {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| {
                std * rng.sample::<f64, _>(StandardNormal)
            }),
            bias: Array2::zeros((1, fan_out)),
        }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let y = tape.matmul(x, self.weight);
        tape.add_row(y, self.bias)
    }
}

/// Affine part of a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T = Array2<f64>> {
    pub gain: T,
    pub bias: T,
}

impl<T> Norm<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Norm<U> {
        Norm {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    pub fn visit<'a>(&'a self, name: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{name}.gain"), &self.gain);
        f(format!("{name}.bias"), &self.bias);
    }

    pub fn visit_mut<'a>(&'a mut self, name: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{name}.gain"), &mut self.gain);
        f(format!("{name}.bias"), &mut self.bias);
    }
}

impl Norm {
    pub fn identity(dim: usize) -> Self {
        Norm {
            gain: Array2::ones((1, dim)),
            bias: Array2::zeros((1, dim)),
        }
    }
}

impl Norm<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var, eps: f64) -> Var {
        let z = tape.layer_norm(x, eps);
        let z = tape.mul_row(z, self.gain);
        tape.add_row(z, self.bias)
    }
}

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// The token projection, playing the role of the feature backbone.
    Backbone,
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("featurizer.") {
            ParamGroup::Backbone
        } else {
            ParamGroup::Head
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_pe: usize,
    pub d_model: usize,
    pub icg: IcgConfig,
    pub mlp: MlpConfig,
    /// Run the attention encoder and context concatenation.
    pub icg_on: bool,
    /// Score pairs with the MLP; otherwise `max(cos, 0)` of the tokens.
    pub ompm_on: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_pe: 16,
            d_model: 32,
            icg: IcgConfig::default(),
            mlp: MlpConfig::default(),
            icg_on: true,
            ompm_on: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_model == 0 {
            return Err(Error::Config("d_in and d_model must be positive".into()));
        }
        featurizer::check_pe_dim(self.d_pe)?;
        if self.icg.heads == 0 || self.d_model % self.icg.heads != 0 {
            return Err(Error::Config(format!(
                "d_model = {} is not divisible by icg.heads = {}",
                self.d_model, self.icg.heads
            )));
        }
        if self.icg.layers == 0 {
            return Err(Error::Config("icg.layers must be at least 1".into()));
        }
        if self.mlp.depth == 0 {
            return Err(Error::Config("mlp.depth must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Array2<f64>> {
    pub featurizer: Linear<T>,
    pub icg: IcgParams<T>,
    pub mlp: MlpParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            featurizer: self.featurizer.map(f),
            icg: self.icg.map(f),
            mlp: self.mlp.map(f),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        self.featurizer.visit("featurizer.proj", f);
        self.icg.visit("icg", f);
        self.mlp.visit("mlp", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut T)) {
        self.featurizer.visit_mut("featurizer.proj", f);
        self.icg.visit_mut("icg", f);
        self.mlp.visit_mut("mlp", f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, "model.init");
        Ok(ModelParams {
            featurizer: Linear::init(&mut rng, cfg.d_in + cfg.d_pe, cfg.d_model, 1.0),
            icg: IcgParams::init(&mut rng, cfg.d_model, &cfg.icg),
            mlp: MlpParams::init(&mut rng, cfg.d_model, &cfg.mlp),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |a| tape.leaf(a.clone()))
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, a| n += a.len());
        n
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |a| Array2::zeros(a.dim()))
    }

    /// Flat read-only view in visit order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, a| out.push((n, a)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |n, a| out.push((n, a)));
        out
    }

    /// Elementwise `self += k * other`.
    pub fn axpy(&mut self, k: f64, other: &ModelParams) {
        let src = other.tensors();
        for ((_, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.scaled_add(k, s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, a| s += a.iter().map(|v| v * v).sum::<f64>());
        s
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, a| ok &= a.iter().all(|v| v.is_finite()));
        ok
    }
}

impl ModelParams<Var> {
    /// Gradient of every bound leaf, in the shape of `like`.
    pub fn gradients(&self, grads: &mut Gradients, like: &ModelParams) -> ModelParams {
        let shapes: Vec<(usize, usize)> = like.tensors().iter().map(|(_, a)| a.dim()).collect();
        let mut k = 0;
        self.map(&mut |v| {
            let g = grads.take_or_zeros(*v, shapes[k]);
            k += 1;
            g
        })
    }
}

/// Tape nodes produced by [`forward_pair`].
pub struct PairForward {
    pub m: usize,
    pub n: usize,
    /// Projected tokens `F_{t-1}` and `F_t`.
    pub prev_tokens: Var,
    pub curr_tokens: Var,
    /// Tokens handed to the matcher, `F'_{t-1}` and `F'_t`.
    pub prev_context: Var,
    pub curr_context: Var,
    /// Match probabilities, `m x n`.
    pub probs: Var,
    /// Per layer, per head, full `(m+n) x (m+n)` attention.
    pub attention: Vec<Vec<Var>>,
    /// Head-averaged match block `n x m`.
    pub abar: Option<Var>,
}

/// Raw featurizer inputs for a frame pair.
#[derive(Debug, Clone)]
pub struct PairInputs {
    pub prev: Array2<f64>,
    pub curr: Array2<f64>,
}

impl PairInputs {
    pub fn from_frames(prev: &Frame, curr: &Frame, cfg: &ModelConfig) -> Result<Self> {
        Ok(PairInputs {
            prev: featurizer::frame_inputs(prev, cfg.d_in, cfg.d_pe)?,
            curr: featurizer::frame_inputs(curr, cfg.d_in, cfg.d_pe)?,
        })
    }
}

/// Runs featurizer, encoder, context concatenation and matcher on the tape.
pub fn forward_pair(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    inputs: &PairInputs,
) -> Result<PairForward> {
    let m = inputs.prev.nrows();
    let n = inputs.curr.nrows();
    let prev_in = tape.leaf(inputs.prev.clone());
    let curr_in = tape.leaf(inputs.curr.clone());
    let prev_tokens = params.featurizer.forward(tape, prev_in);
    let curr_tokens = params.featurizer.forward(tape, curr_in);

    let (prev_context, curr_context, attention, abar) = if cfg.icg_on {
        let out = icg::forward(tape, &params.icg, &cfg.icg, prev_tokens, curr_tokens)?;
        (out.prev, out.curr, out.attention, Some(out.abar))
    } else {
        (prev_tokens, curr_tokens, Vec::new(), None)
    };

    let probs = if cfg.ompm_on {
        ompm::pairwise_scores_on_tape(tape, &params.mlp, prev_context, curr_context)
    } else {
        ompm::cosine_scores_on_tape(tape, prev_context, curr_context)
    };

    Ok(PairForward {
        m,
        n,
        prev_tokens,
        curr_tokens,
        prev_context,
        curr_context,
        probs,
        attention,
        abar,
    })
}

/// Match probabilities (`m x n`) for a frame pair.
pub fn predict_pair(params: &ModelParams, cfg: &ModelConfig, prev: &Frame, curr: &Frame) -> Result<Array2<f64>> {
    let inputs = PairInputs::from_frames(prev, curr, cfg)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fwd = forward_pair(&mut tape, &bound, cfg, &inputs)?;
    Ok(tape.value(fwd.probs).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_in: 4,
            d_pe: 4,
            d_model: 8,
            icg: IcgConfig {
                heads: 2,
                layers: 1,
                n_max: 6,
                ffn_hidden: 8,
                ..IcgConfig::default()
            },
            mlp: MlpConfig { depth: 2, hidden: 6 },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn names_are_unique_and_grouped() {
        let p = ModelParams::init(&small(), 0).unwrap();
        let names = p.names();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert_eq!(ParamGroup::of(&names[0]), ParamGroup::Backbone);
        assert!(names.iter().any(|n| n.starts_with("icg.")));
        assert!(names.iter().any(|n| n.starts_with("mlp.")));
    }

    #[test]
    fn invalid_head_split_rejected() {
        let mut cfg = small();
        cfg.icg.heads = 3;
        assert!(matches!(ModelParams::init(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn axpy_and_norm() {
        let p = ModelParams::init(&small(), 1).unwrap();
        let mut q = p.zeros_like();
        q.axpy(2.0, &p);
        assert!((q.sq_norm() - 4.0 * p.sq_norm()).abs() < 1e-9);
    }
}
