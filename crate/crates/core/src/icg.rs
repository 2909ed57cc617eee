//! Implicit context generator.
//!
//! The tokens of both frames are stacked (previous frame first) and passed
//! through pre-norm transformer encoder layers. Each head's attention map is
//! partitioned into four blocks over the `m` previous and `n` current
//! tokens:
//!
//! ```text
//!              keys: prev (m)   keys: curr (n)
//! queries prev    A_prev           A_cls
//! queries curr    A_match          A_curr
//! ```
//!
//! The `A_match` blocks are averaged over heads into `Ā_match` (`n x m`).
//! Current token `j` is then augmented with row `j` of `Ā_match`, previous
//! token `i` with column `i`, both zero-padded to `n_max`, and each augmented
//! vector is projected back to `d` by a role-specific linear map.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::TokenFeatures;
use crate::model::{Linear, Norm};
use crate::tape::{Tape, Var};

/// Which layers contribute heads to `Ā_match`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AvgScope {
    Final,
    All,
}

/// Which tokens receive the `Ā_match` context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextTargets {
    Curr,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcgConfig {
    pub heads: usize,
    pub layers: usize,
    /// Fixed context width; frames may hold at most this many pedestrians.
    pub n_max: usize,
    pub ffn_hidden: usize,
    pub avg_layers: AvgScope,
    pub context_targets: ContextTargets,
    pub layer_norm_eps: f64,
}

impl Default for IcgConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            layers: 2,
            n_max: 64,
            ffn_hidden: 64,
            avg_layers: AvgScope::Final,
            context_targets: ContextTargets::Both,
            layer_norm_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T = Array2<f64>> {
    pub norm1: Norm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub norm2: Norm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

impl<T> EncoderLayer<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderLayer<U> {
        EncoderLayer {
            norm1: self.norm1.map(f),
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            output: self.output.map(f),
            norm2: self.norm2.map(f),
            ffn_in: self.ffn_in.map(f),
            ffn_out: self.ffn_out.map(f),
        }
    }

    pub fn visit<'a>(&'a self, name: &str, f: &mut impl FnMut(String, &'a T)) {
        self.norm1.visit(&format!("{name}.norm1"), f);
        self.query.visit(&format!("{name}.query"), f);
        self.key.visit(&format!("{name}.key"), f);
        self.value.visit(&format!("{name}.value"), f);
        self.output.visit(&format!("{name}.output"), f);
        self.norm2.visit(&format!("{name}.norm2"), f);
        self.ffn_in.visit(&format!("{name}.ffn_in"), f);
        self.ffn_out.visit(&format!("{name}.ffn_out"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, name: &str, f: &mut impl FnMut(String, &'a mut T)) {
        self.norm1.visit_mut(&format!("{name}.norm1"), f);
        self.query.visit_mut(&format!("{name}.query"), f);
        self.key.visit_mut(&format!("{name}.key"), f);
        self.value.visit_mut(&format!("{name}.value"), f);
        self.output.visit_mut(&format!("{name}.output"), f);
        self.norm2.visit_mut(&format!("{name}.norm2"), f);
        self.ffn_in.visit_mut(&format!("{name}.ffn_in"), f);
        self.ffn_out.visit_mut(&format!("{name}.ffn_out"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcgParams<T = Array2<f64>> {
    pub layers: Vec<EncoderLayer<T>>,
    /// `(d + n_max) x d` projections for previous- and current-frame tokens.
    pub context_prev: Linear<T>,
    pub context_curr: Linear<T>,
}

impl<T> IcgParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> IcgParams<U> {
        IcgParams {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            context_prev: self.context_prev.map(f),
            context_curr: self.context_curr.map(f),
        }
    }

    pub fn visit<'a>(&'a self, name: &str, f: &mut impl FnMut(String, &'a T)) {
        for (k, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{name}.layer{k}"), f);
        }
        self.context_prev.visit(&format!("{name}.context_prev"), f);
        self.context_curr.visit(&format!("{name}.context_curr"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, name: &str, f: &mut impl FnMut(String, &'a mut T)) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{name}.layer{k}"), f);
        }
        self.context_prev.visit_mut(&format!("{name}.context_prev"), f);
        self.context_curr.visit_mut(&format!("{name}.context_curr"), f);
    }
}

fn context_projection(rng: &mut ChaCha8Rng, d: usize, n_max: usize) -> Linear {
    let mut weight = Array2::zeros((d + n_max, d));
    let noise = 0.1 / (d as f64).sqrt();
    for r in 0..d {
        for c in 0..d {
            weight[[r, c]] = if r == c { 1.0 } else { 0.0 } + noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    for r in d..d + n_max {
        for c in 0..d {
            weight[[r, c]] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    Linear {
        weight,
        bias: Array2::zeros((1, d)),
    }
}

impl IcgParams {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, cfg: &IcgConfig) -> Self {
        let layers = (0..cfg.layers)
            .map(|_| EncoderLayer {
                norm1: Norm::identity(d),
                query: Linear::init(rng, d, d, 1.0),
                key: Linear::init(rng, d, d, 1.0),
                value: Linear::init(rng, d, d, 1.0),
                output: Linear::init(rng, d, d, 0.5),
                norm2: Norm::identity(d),
                ffn_in: Linear::init(rng, d, cfg.ffn_hidden, 1.0),
                ffn_out: Linear::init(rng, cfg.ffn_hidden, d, 0.5),
            })
            .collect();
        IcgParams {
            layers,
            context_prev: context_projection(rng, d, cfg.n_max),
            context_curr: context_projection(rng, d, cfg.n_max),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> IcgParams<Var> {
        self.map(&mut |a| tape.leaf(a.clone()))
    }
}

/// One encoder layer on the tape. Returns the updated tokens and the
/// attention map of every head.
pub fn encoder_layer(
    tape: &mut Tape,
    layer: &EncoderLayer<Var>,
    x: Var,
    heads: usize,
    eps: f64,
) -> (Var, Vec<Var>) {
    let d = tape.shape(x).1;
    let dh = d / heads;
    let h = layer.norm1.forward(tape, x, eps);
    let q = layer.query.forward(tape, h);
    let k = layer.key.forward(tape, h);
    let v = layer.value.forward(tape, h);
    let mut maps = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (a, b) = (head * dh, (head + 1) * dh);
        let qh = tape.cols(q, a, b);
        let kh = tape.cols(k, a, b);
        let vh = tape.cols(v, a, b);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        outs.push(tape.matmul(attn, vh));
        maps.push(attn);
    }
    let o = tape.hconcat(&outs);
    let o = layer.output.forward(tape, o);
    let x1 = tape.add(x, o);
    let h2 = layer.norm2.forward(tape, x1, eps);
    let f = layer.ffn_in.forward(tape, h2);
    let f = tape.silu(f);
    let f = layer.ffn_out.forward(tape, f);
    (tape.add(x1, f), maps)
}

/// Mean of the `A_match` blocks (`n x m`) over the given attention maps.
pub fn average_match(tape: &mut Tape, maps: &[Var], m: usize, n: usize) -> Var {
    let blocks: Vec<Var> = maps
        .iter()
        .map(|&a| tape.slice(a, (m, m + n), (0, m)))
        .collect();
    let mut acc = blocks[0];
    for &b in &blocks[1..] {
        acc = tape.add(acc, b);
    }
    tape.scale(acc, 1.0 / blocks.len() as f64)
}

fn check_capacity(m: usize, n: usize, cfg: &IcgConfig) -> Result<()> {
    for (what, value) in [("previous-frame pedestrians", m), ("current-frame pedestrians", n)] {
        if value > cfg.n_max {
            return Err(Error::Capacity {
                what,
                value,
                knob: "icg.n_max",
                limit: cfg.n_max,
            });
        }
    }
    Ok(())
}

/// Appends `Ā_match` context to the encoder output and projects back to `d`.
/// `attn_out` holds the `m` previous tokens followed by the `n` current ones.
pub fn context_inform_on_tape(
    tape: &mut Tape,
    params: &IcgParams<Var>,
    cfg: &IcgConfig,
    attn_out: Var,
    abar: Var,
) -> Result<(Var, Var)> {
    let (n, m) = tape.shape(abar);
    let (rows, d) = tape.shape(attn_out);
    if rows != m + n {
        return Err(Error::Shape(format!(
            "attn_out has {rows} rows but Ā_match is {n} x {m}"
        )));
    }
    check_capacity(m, n, cfg)?;
    let prev_out = tape.rows(attn_out, 0, m);
    let curr_out = tape.rows(attn_out, m, m + n);

    // [x ‖ ctx ‖ 0]·W equals x·W[..d] + ctx·W[d..d+len(ctx)]: the padded
    // rows of W never meet a non-zero input.
    let project = |tape: &mut Tape, lin: &Linear<Var>, x: Var, ctx: Option<Var>, width: usize| {
        let w_tok = tape.rows(lin.weight, 0, d);
        let mut y = tape.matmul(x, w_tok);
        if let Some(ctx) = ctx {
            let w_ctx = tape.rows(lin.weight, d, d + width);
            let c = tape.matmul(ctx, w_ctx);
            y = tape.add(y, c);
        }
        tape.add_row(y, lin.bias)
    };

    let curr = project(tape, &params.context_curr, curr_out, Some(abar), m);
    let prev_ctx = match cfg.context_targets {
        ContextTargets::Both => Some(tape.transpose(abar)),
        ContextTargets::Curr => None,
    };
    let prev = project(tape, &params.context_prev, prev_out, prev_ctx, n);
    Ok((prev, curr))
}

/// Tape nodes of a full ICG pass.
pub struct IcgForward {
    /// `F'_{t-1}`, `m x d`.
    pub prev: Var,
    /// `F'_t`, `n x d`.
    pub curr: Var,
    /// Per layer, per head attention maps.
    pub attention: Vec<Vec<Var>>,
    pub abar: Var,
    /// Encoder output before context concatenation.
    pub attn_out: Var,
}

pub fn forward(
    tape: &mut Tape,
    params: &IcgParams<Var>,
    cfg: &IcgConfig,
    prev_tokens: Var,
    curr_tokens: Var,
) -> Result<IcgForward> {
    let (m, d) = tape.shape(prev_tokens);
    let (n, d2) = tape.shape(curr_tokens);
    if d != d2 {
        return Err(Error::Shape(format!("token widths differ: {d} vs {d2}")));
    }
    check_capacity(m, n, cfg)?;
    let mut x = tape.vconcat(&[prev_tokens, curr_tokens]);
    let mut attention = Vec::with_capacity(params.layers.len());
    if m + n > 0 {
        for layer in &params.layers {
            let (y, maps) = encoder_layer(tape, layer, x, cfg.heads, cfg.layer_norm_eps);
            x = y;
            attention.push(maps);
        }
    }
    let abar = if attention.is_empty() {
        tape.zeros(n, m)
    } else {
        let maps: Vec<Var> = match cfg.avg_layers {
            AvgScope::Final => attention.last().cloned().unwrap_or_default(),
            AvgScope::All => attention.iter().flatten().copied().collect(),
        };
        average_match(tape, &maps, m, n)
    };
    let (prev, curr) = context_inform_on_tape(tape, params, cfg, x, abar)?;
    Ok(IcgForward {
        prev,
        curr,
        attention,
        abar,
        attn_out: x,
    })
}

/// Stacks previous-frame rows above current-frame rows.
pub fn concat_frames(prev: &TokenFeatures, curr: &TokenFeatures) -> Result<Array2<f64>> {
    let (dp, dc) = (prev.features.ncols(), curr.features.ncols());
    if dp != dc {
        return Err(Error::Shape(format!("token widths differ: {dp} vs {dc}")));
    }
    concatenate(Axis(0), &[prev.features.view(), curr.features.view()])
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Inverse of [`concat_frames`].
pub fn split_joint(joint: &Array2<f64>, m: usize) -> (Array2<f64>, Array2<f64>) {
    (
        joint.slice(s![..m, ..]).to_owned(),
        joint.slice(s![m.., ..]).to_owned(),
    )
}

/// The four sub-attention maps of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlocks {
    /// `m x m`, previous queries over previous keys.
    pub prev: Array2<f64>,
    /// `m x n`, previous queries over current keys.
    pub cls: Array2<f64>,
    /// `n x m`, current queries over previous keys.
    pub matched: Array2<f64>,
    /// `n x n`, current queries over current keys.
    pub curr: Array2<f64>,
}

impl AttentionBlocks {
    pub fn reassemble(&self) -> Array2<f64> {
        let top = concatenate(Axis(1), &[self.prev.view(), self.cls.view()]).expect("row counts");
        let bottom =
            concatenate(Axis(1), &[self.matched.view(), self.curr.view()]).expect("row counts");
        concatenate(Axis(0), &[top.view(), bottom.view()]).expect("column counts")
    }
}

pub fn split_attention(a: &Array2<f64>, m: usize, n: usize) -> Result<AttentionBlocks> {
    if a.dim() != (m + n, m + n) {
        return Err(Error::Shape(format!(
            "attention map is {:?}, expected {} x {}",
            a.dim(),
            m + n,
            m + n
        )));
    }
    Ok(AttentionBlocks {
        prev: a.slice(s![..m, ..m]).to_owned(),
        cls: a.slice(s![..m, m..]).to_owned(),
        matched: a.slice(s![m.., ..m]).to_owned(),
        curr: a.slice(s![m.., m..]).to_owned(),
    })
}

/// Per-head attention of one layer for a pair with `m` previous tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub heads: Vec<Array2<f64>>,
    pub m: usize,
    pub n: usize,
}

impl AttentionMaps {
    pub fn blocks(&self, head: usize) -> AttentionBlocks {
        split_attention(&self.heads[head], self.m, self.n).expect("maps are square by construction")
    }

    /// `Ā_match`: the head mean of the `n x m` match blocks.
    pub fn mean_match(&self) -> Array2<f64> {
        let mut acc = Array2::zeros((self.n, self.m));
        for h in &self.heads {
            acc += &h.slice(s![self.m.., ..self.m]);
        }
        acc / self.heads.len().max(1) as f64
    }
}

/// Applies encoder layer `layer` to joint tokens whose first `m` rows are
/// from the previous frame.
pub fn self_attention_forward(
    tokens: &Array2<f64>,
    m: usize,
    params: &IcgParams,
    cfg: &IcgConfig,
    layer: usize,
) -> Result<(Array2<f64>, AttentionMaps)> {
    let lp = params.layers.get(layer).ok_or_else(|| {
        Error::Config(format!("layer {layer} requested but the encoder has {}", params.layers.len()))
    })?;
    if m > tokens.nrows() {
        return Err(Error::Shape(format!("m = {m} exceeds {} tokens", tokens.nrows())));
    }
    if tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite token".into()));
    }
    let mut tape = Tape::new();
    let bound = lp.map(&mut |a| tape.leaf(a.clone()));
    let x = tape.leaf(tokens.clone());
    let (y, maps) = encoder_layer(&mut tape, &bound, x, cfg.heads, cfg.layer_norm_eps);
    Ok((
        tape.value(y).clone(),
        AttentionMaps {
            heads: maps.iter().map(|&v| tape.value(v).clone()).collect(),
            m,
            n: tokens.nrows() - m,
        },
    ))
}

/// Context augmentation and projection for already computed encoder
/// output and `Ā_match`.
pub fn context_inform(
    attn_out: &Array2<f64>,
    abar: &Array2<f64>,
    params: &IcgParams,
    cfg: &IcgConfig,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(attn_out.clone());
    let a = tape.leaf(abar.clone());
    let (prev, curr) = context_inform_on_tape(&mut tape, &bound, cfg, x, a)?;
    concatenate(Axis(0), &[tape.value(prev).view(), tape.value(curr).view()])
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Output of a full encoder pass outside the tape.
#[derive(Debug, Clone)]
pub struct IcgOutput {
    pub prev: Array2<f64>,
    pub curr: Array2<f64>,
    pub attn_out: Array2<f64>,
    pub maps: Vec<AttentionMaps>,
    pub abar: Array2<f64>,
}

pub fn run(prev: &TokenFeatures, curr: &TokenFeatures, params: &IcgParams, cfg: &IcgConfig) -> Result<IcgOutput> {
    let (m, n) = (prev.len(), curr.len());
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let p = tape.leaf(prev.features.clone());
    let c = tape.leaf(curr.features.clone());
    let out = forward(&mut tape, &bound, cfg, p, c)?;
    Ok(IcgOutput {
        prev: tape.value(out.prev).clone(),
        curr: tape.value(out.curr).clone(),
        attn_out: tape.value(out.attn_out).clone(),
        maps: out
            .attention
            .iter()
            .map(|heads| AttentionMaps {
                heads: heads.iter().map(|&v| tape.value(v).clone()).collect(),
                m,
                n,
            })
            .collect(),
        abar: tape.value(out.abar).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn setup(d: usize, n_max: usize) -> (IcgParams, IcgConfig) {
        let cfg = IcgConfig {
            heads: 2,
            layers: 2,
            n_max,
            ffn_hidden: 2 * d,
            ..IcgConfig::default()
        };
        let mut rng = substream(11, "icg.test");
        (IcgParams::init(&mut rng, d, &cfg), cfg)
    }

    fn tokens(rows: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = substream(seed, "icg.tokens");
        Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.0..1.0))
    }

    fn tf(features: Array2<f64>) -> TokenFeatures {
        TokenFeatures {
            frame_index: 0,
            features,
        }
    }

    #[test]
    fn concat_and_split_roundtrip() {
        let a = tokens(2, 4, 1);
        let b = tokens(3, 4, 2);
        let j = concat_frames(&tf(a.clone()), &tf(b.clone())).unwrap();
        assert_eq!(j.dim(), (5, 4));
        assert_eq!(j.row(0), a.row(0));
        let (a2, b2) = split_joint(&j, 2);
        assert_eq!((a2, b2), (a.clone(), b));
        let j0 = concat_frames(&tf(a.clone()), &tf(Array2::zeros((0, 4)))).unwrap();
        assert_eq!(j0, a);
        assert!(concat_frames(&tf(a), &tf(Array2::zeros((1, 3)))).is_err());
    }

    #[test]
    fn block_shapes_and_tiling() {
        let a = tokens(5, 5, 3);
        let b = split_attention(&a, 2, 3).unwrap();
        assert_eq!(b.prev.dim(), (2, 2));
        assert_eq!(b.cls.dim(), (2, 3));
        assert_eq!(b.matched.dim(), (3, 2));
        assert_eq!(b.curr.dim(), (3, 3));
        assert_eq!(b.reassemble(), a);
        let b0 = split_attention(&a, 0, 5).unwrap();
        assert_eq!(b0.matched.dim(), (5, 0));
        assert_eq!(b0.curr, a);
        assert!(split_attention(&a, 2, 2).is_err());
    }

    #[test]
    fn singleton_attention_is_value_path() {
        let (params, cfg) = setup(4, 8);
        let x = tokens(1, 4, 5);
        let (y, maps) = self_attention_forward(&x, 1, &params, &cfg, 0).unwrap();
        for h in &maps.heads {
            assert_eq!(h.dim(), (1, 1));
            assert!((h[[0, 0]] - 1.0).abs() < 1e-15);
        }
        // with attention [[1]] every head outputs its own value slice
        let l = &params.layers[0];
        let ln = |v: &Array2<f64>, n: &Norm| {
            let mean = v.mean().unwrap();
            let var = v.mapv(|a| (a - mean).powi(2)).mean().unwrap();
            (v - mean) / (var + cfg.layer_norm_eps).sqrt() * &n.gain + &n.bias
        };
        let h = ln(&x, &l.norm1);
        let x1 = &x + &l.output.apply(&l.value.apply(&h));
        let f = l.ffn_in.apply(&ln(&x1, &l.norm2)).mapv(|v| v / (1.0 + (-v).exp()));
        let expected = &x1 + &l.ffn_out.apply(&f);
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_tokens_attend_uniformly() {
        let (params, cfg) = setup(4, 8);
        let row = tokens(1, 4, 6);
        let x = Array2::from_shape_fn((5, 4), |(_, c)| row[[0, c]]);
        let (_, maps) = self_attention_forward(&x, 2, &params, &cfg, 0).unwrap();
        for h in &maps.heads {
            for v in h.iter() {
                assert!((v - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_are_stochastic_and_mean_is_exact() {
        let (params, cfg) = setup(6, 8);
        let out = run(&tf(tokens(2, 6, 7)), &tf(tokens(3, 6, 8)), &params, &cfg).unwrap();
        for maps in &out.maps {
            for h in &maps.heads {
                for r in h.rows() {
                    assert!((r.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
        let last = out.maps.last().unwrap();
        let manual = (last.blocks(0).matched + last.blocks(1).matched) / 2.0;
        for (a, b) in out.abar.iter().zip(manual.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.prev.dim(), (2, 6));
        assert_eq!(out.curr.dim(), (3, 6));
    }

    #[test]
    fn all_layer_averaging() {
        let (params, mut cfg) = setup(6, 8);
        cfg.avg_layers = AvgScope::All;
        let out = run(&tf(tokens(2, 6, 7)), &tf(tokens(3, 6, 8)), &params, &cfg).unwrap();
        let mut manual = Array2::<f64>::zeros((3, 2));
        for maps in &out.maps {
            manual += &(maps.mean_match() / out.maps.len() as f64);
        }
        for (a, b) in out.abar.iter().zip(manual.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_context_is_linear_in_attn_out() {
        let (mut params, cfg) = setup(4, 6);
        let x = tokens(5, 4, 9);
        let abar = Array2::zeros((3, 2));
        let y = context_inform(&x, &abar, &params, &cfg).unwrap();
        let w = params.context_prev.weight.slice(s![..4, ..]).to_owned();
        let expected_prev = x.slice(s![..2, ..]).dot(&w);
        assert!((y.slice(s![..2, ..]).to_owned() - expected_prev).iter().all(|v| v.abs() < 1e-12));
        // zeroing the context rows makes the abar content irrelevant
        params.context_curr.weight.slice_mut(s![4.., ..]).fill(0.0);
        params.context_prev.weight.slice_mut(s![4.., ..]).fill(0.0);
        let y2 = context_inform(&x, &tokens(3, 2, 10), &params, &cfg).unwrap();
        let y3 = context_inform(&x, &abar, &params, &cfg).unwrap();
        assert_eq!(y2, y3);
    }

    #[test]
    fn smallest_case_uses_first_context_row() {
        let (params, cfg) = setup(4, 6);
        let x = tokens(2, 4, 12);
        let abar = Array2::from_elem((1, 1), 1.0);
        let y = context_inform(&x, &abar, &params, &cfg).unwrap();
        let aug = |row: usize, lin: &Linear| {
            let mut v = Array2::zeros((1, 4 + 6));
            v.slice_mut(s![0, ..4]).assign(&x.row(row));
            v[[0, 4]] = 1.0;
            lin.apply(&v)
        };
        let prev = aug(0, &params.context_prev);
        let curr = aug(1, &params.context_curr);
        for c in 0..4 {
            assert!((y[[0, c]] - prev[[0, c]]).abs() < 1e-12);
            assert!((y[[1, c]] - curr[[0, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn capacity_error_names_the_knob() {
        let (params, cfg) = setup(4, 2);
        let err = run(&tf(tokens(3, 4, 1)), &tf(tokens(1, 4, 2)), &params, &cfg).unwrap_err();
        assert!(err.to_string().contains("icg.n_max"));
    }

    #[test]
    fn current_permutation_permutes_current_outputs() {
        let (params, cfg) = setup(4, 8);
        for seed in 0..5 {
            let prev = tokens(2, 4, 100 + seed);
            let curr = tokens(2, 4, 200 + seed);
            let swapped = Array2::from_shape_fn((2, 4), |(r, c)| curr[[1 - r, c]]);
            let a = run(&tf(prev.clone()), &tf(curr), &params, &cfg).unwrap();
            let b = run(&tf(prev), &tf(swapped), &params, &cfg).unwrap();
            for r in 0..2 {
                for c in 0..4 {
                    assert!((a.curr[[r, c]] - b.curr[[1 - r, c]]).abs() < 1e-10);
                    assert!((a.attn_out[[2 + r, c]] - b.attn_out[[2 + 1 - r, c]]).abs() < 1e-10);
                }
                for c in 0..2 {
                    assert!((a.abar[[r, c]] - b.abar[[1 - r, c]]).abs() < 1e-12);
                }
            }
        }
    }
}
