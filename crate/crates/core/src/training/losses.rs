//! Pairwise cross-entropy, histogram KL and transport losses, each with a
//! plain evaluator and a tape op.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::sinkhorn::TransportLoss;
use crate::error::{Error, Result};
use crate::ompm;
use crate::tape::{CustomBackward, Tape, Var};

pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy over all pairs.
pub fn loss_cls(p: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if p.dim() != y.dim() {
        return Err(Error::Shape(format!("P is {:?} but Y is {:?}", p.dim(), y.dim())));
    }
    let mut tape = Tape::new();
    let pv = tape.leaf(p.clone());
    let l = tape.bce(pv, y.clone(), BCE_CLAMP);
    Ok(tape.scalar(l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binning {
    /// Each value counts fully in the bin containing it. Not differentiable.
    Hard,
    /// Each value spreads over bins with Gaussian weights around the bin
    /// centres, normalized per value.
    #[default]
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KlConfig {
    pub num_bins: usize,
    pub epsilon: f64,
    pub binning: Binning,
    /// Kernel width of soft binning, in bins.
    pub bandwidth: f64,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self {
            num_bins: 20,
            epsilon: 1e-8,
            binning: Binning::Soft,
            bandwidth: 5.0,
        }
    }
}

impl KlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bins < 2 {
            return Err(Error::Config(format!("kl.num_bins must be at least 2, got {}", self.num_bins)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("kl.epsilon must be positive".into()));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Config(format!("kl.bandwidth must be positive, got {}", self.bandwidth)));
        }
        Ok(())
    }
}

fn hard_bin(v: f64, k: usize) -> usize {
    ((v * k as f64).floor().max(0.0) as usize).min(k - 1)
}

/// Soft bin weights of one value and their derivatives.
fn soft_weights(v: f64, k: usize, bandwidth: f64) -> (Vec<f64>, Vec<f64>) {
    let width = 1.0 / k as f64;
    let s = bandwidth * width;
    let raw: Vec<f64> = (0..k)
        .map(|b| {
            let c = (b as f64 + 0.5) * width;
            (-(v - c).powi(2) / (2.0 * s * s)).exp()
        })
        .collect();
    let z: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|r| r / z).collect();
    // d w_b / dv = w_b (g_b - Σ w g) with g_b = -(v - c_b) / s²
    let g: Vec<f64> = (0..k)
        .map(|b| -(v - (b as f64 + 0.5) * width) / (s * s))
        .collect();
    let mean_g: f64 = w.iter().zip(&g).map(|(a, b)| a * b).sum();
    let dw = w.iter().zip(&g).map(|(wb, gb)| wb * (gb - mean_g)).collect();
    (w, dw)
}

/// Normalized histogram over `k` equal bins of `[0, 1]`.
pub fn histogram(values: &[f64], cfg: &KlConfig) -> Vec<f64> {
    let k = cfg.num_bins;
    let mut h = vec![0.0; k];
    if values.is_empty() {
        return h;
    }
    for &v in values {
        match cfg.binning {
            Binning::Hard => h[hard_bin(v, k)] += 1.0,
            Binning::Soft => {
                for (hb, w) in h.iter_mut().zip(soft_weights(v, k, cfg.bandwidth).0) {
                    *hb += w;
                }
            }
        }
    }
    let n = values.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// `Σ_k P(k) log(P(k) / (Q(k) + ε))` with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, qk)| pk * (pk / (qk + eps)).ln())
        .sum()
}

/// Divergence between the histogram of predictions and that of the labels.
pub struct KlLoss {
    cfg: KlConfig,
    /// `d loss / d P(k)`.
    dh: Vec<f64>,
    pub value: f64,
}

impl KlLoss {
    pub fn new(p: &Array2<f64>, y: &Array2<f64>, cfg: &KlConfig) -> Self {
        let pv: Vec<f64> = p.iter().copied().collect();
        let yv: Vec<f64> = y.iter().copied().collect();
        let hp = histogram(&pv, cfg);
        let hq = histogram(&yv, cfg);
        let value = if pv.is_empty() { 0.0 } else { kl_divergence(&hp, &hq, cfg.epsilon) };
        let dh = hp
            .iter()
            .zip(&hq)
            .map(|(pk, qk)| if *pk > 0.0 { (pk / (qk + cfg.epsilon)).ln() + 1.0 } else { 0.0 })
            .collect();
        KlLoss {
            cfg: cfg.clone(),
            dh,
            value,
        }
    }
}

impl CustomBackward for KlLoss {
    fn backward(&self, input: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
        let n = input.len().max(1) as f64;
        let g0 = grad_out[[0, 0]];
        match self.cfg.binning {
            Binning::Hard => Array2::zeros(input.dim()),
            Binning::Soft => input.mapv(|v| {
                let (_, dw) = soft_weights(v, self.cfg.num_bins, self.cfg.bandwidth);
                g0 * dw.iter().zip(&self.dh).map(|(a, b)| a * b).sum::<f64>() / n
            }),
        }
    }
}

pub fn loss_kl(p: &Array2<f64>, y: &Array2<f64>, cfg: &KlConfig) -> Result<f64> {
    cfg.validate()?;
    if p.dim() != y.dim() {
        return Err(Error::Shape(format!("P is {:?} but Y is {:?}", p.dim(), y.dim())));
    }
    Ok(KlLoss::new(p, y, cfg).value)
}

pub fn kl_on_tape(tape: &mut Tape, p: Var, y: &Array2<f64>, cfg: &KlConfig) -> Var {
    let op = KlLoss::new(tape.value(p), y, cfg);
    let value = Array2::from_elem((1, 1), op.value);
    tape.custom(p, value, Box::new(op))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OtConfig {
    pub eps: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Weight of transported mass landing on negative pairs.
    pub neg_weight: f64,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            eps: 0.1,
            max_iter: 100,
            tol: 1e-6,
            neg_weight: 1.0,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || self.max_iter == 0 || self.tol < 0.0 || self.neg_weight < 0.0 {
            return Err(Error::Config(
                "ot needs eps > 0, max_iter ≥ 1, tol ≥ 0 and neg_weight ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OtDiagnostics {
    /// No positive labels; the loss is 0.
    pub degenerate: bool,
    pub converged: bool,
    pub iterations: usize,
}

/// Transport loss on the tape; `prev` and `curr` are token matrices.
pub fn ot_on_tape(tape: &mut Tape, prev: Var, curr: Var, y: &Array2<f64>, cfg: &OtConfig) -> (Var, OtDiagnostics) {
    let rows: Vec<usize> = (0..y.nrows()).filter(|&i| y.row(i).iter().any(|&v| v > 0.5)).collect();
    let cols: Vec<usize> = (0..y.ncols()).filter(|&j| y.column(j).iter().any(|&v| v > 0.5)).collect();
    if rows.is_empty() {
        let zero = tape.zeros(1, 1);
        return (
            zero,
            OtDiagnostics {
                degenerate: true,
                converged: true,
                iterations: 0,
            },
        );
    }
    let cos = ompm::cosine_on_tape(tape, prev, curr);
    let neg = tape.scale(cos, -1.0);
    let cost = tape.add_const(neg, 1.0);
    let penalty = y.mapv(|v| if v > 0.5 { 0.0 } else { 1.0 });
    let op = TransportLoss::new(
        tape.value(cost),
        &penalty,
        rows,
        cols,
        cfg.eps,
        cfg.neg_weight,
        cfg.max_iter,
        cfg.tol,
    );
    let diag = OtDiagnostics {
        degenerate: false,
        converged: op.converged,
        iterations: op.iterations,
    };
    let value = Array2::from_elem((1, 1), op.value);
    (tape.custom(cost, value, Box::new(op)), diag)
}

pub fn loss_ot(
    prev: &Array2<f64>,
    curr: &Array2<f64>,
    y: &Array2<f64>,
    cfg: &OtConfig,
) -> Result<(f64, OtDiagnostics)> {
    cfg.validate()?;
    if y.dim() != (prev.nrows(), curr.nrows()) || prev.ncols() != curr.ncols() {
        return Err(Error::Shape(format!(
            "tokens {:?} and {:?} do not fit labels {:?}",
            prev.dim(),
            curr.dim(),
            y.dim()
        )));
    }
    let mut tape = Tape::new();
    let p = tape.leaf(prev.clone());
    let c = tape.leaf(curr.clone());
    let (l, diag) = ot_on_tape(&mut tape, p, c, y, cfg);
    Ok((tape.scalar(l), diag))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub l_ot: f64,
    pub l_cls: f64,
    pub l_kl: f64,
    pub l_total: f64,
    pub ot_converged: bool,
    pub ot_degenerate: bool,
}

impl LossBreakdown {
    pub fn new(l_ot: f64, l_cls: f64, l_kl: f64) -> Result<Self> {
        let mut b = LossBreakdown {
            l_ot,
            l_cls,
            l_kl,
            l_total: 0.0,
            ot_converged: true,
            ot_degenerate: false,
        };
        b.l_total = total_loss(&b)?;
        Ok(b)
    }
}

/// Unweighted sum of the three parts.
pub fn total_loss(parts: &LossBreakdown) -> Result<f64> {
    for (module, v) in [("loss_ot", parts.l_ot), ("loss_cls", parts.l_cls), ("loss_kl", parts.l_kl)] {
        if !v.is_finite() {
            return Err(Error::Divergence {
                module,
                message: format!("loss value is {v}"),
            });
        }
    }
    Ok(parts.l_ot + parts.l_cls + parts.l_kl)
}
