//! Supervision and optimization of the full matcher.

pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod optim;
pub mod sinkhorn;

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gradcheck::{grad_check, GradCheckReport};
pub use labels::{build_group_labels, GroupAnchor, GroupLabelMatrix};
pub use losses::{loss_cls, loss_kl, loss_ot, total_loss, Binning, KlConfig, LossBreakdown, OtConfig};
pub use optim::{Optimizer, OptimizerKind};
pub use sinkhorn::{sinkhorn, SinkhornPlan};

use crate::dataset::{derive_flow_labels, sample_pairs, VideoSequence};
use crate::error::{Error, Result};
use crate::model::{forward_pair, ModelConfig, ModelParams, PairInputs};
use crate::rng::substream;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub optimizer: OptimizerKind,
    /// Momentum for SGD, first-moment decay for Adam.
    pub momentum: f64,
    pub epochs: usize,
    /// Frame pairs per parameter update.
    pub batch_pairs: usize,
    pub seed: u64,
    pub kl_on: bool,
    pub kl: KlConfig,
    pub ot: OtConfig,
    pub group_radius: f64,
    pub group_anchor: GroupAnchor,
    /// Sampling interval in seconds.
    pub sigma: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr_backbone: 1e-3,
            lr_head: 1e-3,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            epochs: 20,
            batch_pairs: 4,
            seed: 0,
            kl_on: true,
            kl: KlConfig::default(),
            ot: OtConfig::default(),
            group_radius: 0.2,
            group_anchor: GroupAnchor::Curr,
            sigma: 3.0,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.kl.validate()?;
        self.ot.validate()?;
        if !(self.lr_backbone > 0.0 && self.lr_head > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_pairs == 0 {
            return Err(Error::Config("batch_pairs must be at least 1".into()));
        }
        if !(self.group_radius > 0.0) || !(self.sigma > 0.0) || self.clip_norm < 0.0 {
            return Err(Error::Config("group_radius and sigma must be positive, clip_norm non-negative".into()));
        }
        Ok(())
    }
}

/// One supervised frame pair.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub video: String,
    pub prev_index: usize,
    pub curr_index: usize,
    pub inputs: PairInputs,
    pub labels: Array2<f64>,
}

/// Sampled pairs of every sequence with their group labels. Pairs with an
/// empty frame carry no signal and are skipped.
pub fn build_examples(dataset: &[VideoSequence], cfg: &TrainConfig) -> Result<Vec<TrainExample>> {
    let mut out = Vec::new();
    for seq in dataset {
        if !seq.is_labeled() {
            return Err(Error::Labeling(format!("sequence {} has unlabeled pedestrians", seq.id)));
        }
        seq.validate(Some(cfg.model.d_in))?;
        for (prev, curr) in sample_pairs(seq, cfg.sigma)? {
            if prev.is_empty() || curr.is_empty() {
                continue;
            }
            let gt = derive_flow_labels(prev, curr)?;
            let labels = build_group_labels(prev, curr, &gt, cfg.group_radius, cfg.group_anchor)?;
            out.push(TrainExample {
                video: seq.id.clone(),
                prev_index: prev.index,
                curr_index: curr.index,
                inputs: PairInputs::from_frames(prev, curr, &cfg.model)?,
                labels: labels.y,
            });
        }
    }
    Ok(out)
}

fn run_pair(params: &ModelParams, cfg: &TrainConfig, ex: &TrainExample, want_grad: bool) -> Result<(LossBreakdown, Option<ModelParams>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fwd = forward_pair(&mut tape, &bound, &cfg.model, &ex.inputs)?;
    let cls = tape.bce(fwd.probs, ex.labels.clone(), losses::BCE_CLAMP);
    let kl = if cfg.kl_on {
        losses::kl_on_tape(&mut tape, fwd.probs, &ex.labels, &cfg.kl)
    } else {
        tape.zeros(1, 1)
    };
    let (ot, diag) = losses::ot_on_tape(&mut tape, fwd.prev_context, fwd.curr_context, &ex.labels, &cfg.ot);
    let mut parts = LossBreakdown::new(tape.scalar(ot), tape.scalar(cls), tape.scalar(kl))?;
    parts.ot_converged = diag.converged;
    parts.ot_degenerate = diag.degenerate;
    if !want_grad {
        return Ok((parts, None));
    }
    let a = tape.add(ot, cls);
    let total = tape.add(a, kl);
    let mut grads = tape.backward(total);
    let g = bound.gradients(&mut grads, params);
    if !g.all_finite() {
        return Err(Error::Divergence {
            module: "backward",
            message: format!("non-finite gradient on pair {}:{}->{}", ex.video, ex.prev_index, ex.curr_index),
        });
    }
    Ok((parts, Some(g)))
}

/// Losses of one pair.
pub fn pair_loss(params: &ModelParams, cfg: &TrainConfig, ex: &TrainExample) -> Result<LossBreakdown> {
    Ok(run_pair(params, cfg, ex, false)?.0)
}

/// Losses of one pair and the gradient of their sum.
pub fn pair_loss_and_grad(params: &ModelParams, cfg: &TrainConfig, ex: &TrainExample) -> Result<(LossBreakdown, ModelParams)> {
    let (parts, g) = run_pair(params, cfg, ex, true)?;
    Ok((parts, g.expect("gradient requested")))
}

/// Mean total loss over a batch and its gradient. Pairs are evaluated in
/// parallel and reduced in batch order.
pub fn batch_loss_and_grad(params: &ModelParams, cfg: &TrainConfig, batch: &[&TrainExample]) -> Result<(Vec<LossBreakdown>, ModelParams)> {
    let results: Vec<Result<(LossBreakdown, ModelParams)>> =
        batch.par_iter().map(|ex| pair_loss_and_grad(params, cfg, ex)).collect();
    let mut grad = params.zeros_like();
    let mut parts = Vec::with_capacity(batch.len());
    for r in results {
        let (p, g) = r?;
        grad.axpy(1.0 / batch.len() as f64, &g);
        parts.push(p);
    }
    Ok((parts, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_ot: f64,
    pub l_cls: f64,
    pub l_kl: f64,
    pub l_total: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub curve: Vec<EpochLoss>,
    pub steps: usize,
    /// Set when training stopped on a non-finite loss; `params` then hold the
    /// last finite state.
    pub diverged: Option<Error>,
}

pub fn train(dataset: &[VideoSequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let examples = build_examples(dataset, cfg)?;
    train_on_examples(&examples, cfg, None)
}

/// Trains from `init` (or a fresh initialization) on prepared examples.
pub fn train_on_examples(examples: &[TrainExample], cfg: &TrainConfig, init: Option<ModelParams>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Validation("no training pairs: every sampled pair has an empty frame".into()));
    }
    let mut params = match init {
        Some(p) => p,
        None => ModelParams::init(&cfg.model, cfg.seed)?,
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.momentum, &params);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = substream(cfg.seed, &format!("train.shuffle.{epoch}"));
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for chunk in order.chunks(cfg.batch_pairs) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (parts, mut grad) = match batch_loss_and_grad(&params, cfg, &batch) {
                Ok(v) => v,
                Err(e @ Error::Divergence { .. }) => {
                    log::error!("stopping at epoch {epoch}: {e}");
                    return Ok(TrainOutcome {
                        params,
                        curve,
                        steps,
                        diverged: Some(e),
                    });
                }
                Err(e) => return Err(e),
            };
            for p in &parts {
                sums[0] += p.l_ot;
                sums[1] += p.l_cls;
                sums[2] += p.l_kl;
                sums[3] += p.l_total;
            }
            if cfg.clip_norm > 0.0 {
                let norm = grad.sq_norm().sqrt();
                if norm > cfg.clip_norm {
                    let scale = cfg.clip_norm / norm;
                    grad.tensors_mut().into_iter().for_each(|(_, g)| *g *= scale);
                }
            }
            let last_good = params.clone();
            opt.step(&mut params, &grad, cfg.lr_backbone, cfg.lr_head);
            steps += 1;
            if !params.all_finite() {
                return Ok(TrainOutcome {
                    params: last_good,
                    curve,
                    steps,
                    diverged: Some(Error::Divergence {
                        module: "optimizer",
                        message: format!("non-finite parameters after step {steps}"),
                    }),
                });
            }
        }
        let n = examples.len() as f64;
        let row = EpochLoss {
            epoch,
            l_ot: sums[0] / n,
            l_cls: sums[1] / n,
            l_kl: sums[2] / n,
            l_total: sums[3] / n,
        };
        log::info!(
            "epoch {epoch}: total {:.4} (ot {:.4}, cls {:.4}, kl {:.4})",
            row.l_total,
            row.l_ot,
            row.l_cls,
            row.l_kl
        );
        curve.push(row);
    }
    Ok(TrainOutcome {
        params,
        curve,
        steps,
        diverged: None,
    })
}

/// CSV with header `epoch,l_ot,l_cls,l_kl,l_total`.
pub fn write_loss_curve(curve: &[EpochLoss], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,l_ot,l_cls,l_kl,l_total\n");
    for r in curve {
        text.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.l_ot, r.l_cls, r.l_kl, r.l_total));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
