//! Benchmark preset, video-level prediction and the comparison harnesses
//! built on top of them.

use serde::{Deserialize, Serialize};

use crate::baselines::o2o_match;
use crate::dataset::{ground_truth_total, sample_indices, VideoSequence};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, MseConvention, VideoResult};
use crate::model::{predict_pair, ModelConfig, ModelParams};
use crate::ompm::{count_flows, decode_matches, CountMode, MatchProbabilities, PairRecord};
use crate::rng::substream;
use crate::simulator::{generate, SimConfig};
use crate::training::{train, TrainConfig, TrainOutcome};

use rand::Rng;

/// Inference options shared by the model and the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub sigma: f64,
    pub tau: f64,
    pub k: usize,
    pub count_mode: CountMode,
    pub mse_convention: MseConvention,
    /// Report ground truth as the prediction.
    pub oracle: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            tau: 0.5,
            k: 5,
            count_mode: CountMode::Dedup,
            mse_convention: MseConvention::Root,
            oracle: false,
        }
    }
}

/// Scene generator for the evaluation and training sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub sim: SimConfig,
    pub videos: usize,
    /// Group arrival rates are spread evenly over this range.
    pub group_rate_range: [f64; 2],
    pub train_videos: usize,
    pub train_frames: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig {
                num_frames: 90,
                group_size_range: [2, 6],
                occlusion_dropout: 0.2,
                group_feature_corr: 0.8,
                ..SimConfig::default()
            },
            videos: 20,
            group_rate_range: [0.04, 0.6],
            train_videos: 24,
            train_frames: 60,
        }
    }
}

fn spread(range: [f64; 2], k: usize, count: usize) -> f64 {
    if count <= 1 {
        return range[0];
    }
    range[0] + (range[1] - range[0]) * k as f64 / (count - 1) as f64
}

impl BenchmarkConfig {
    /// Simulator configs of the evaluation videos for `seed`.
    pub fn eval_configs(&self, seed: u64) -> Vec<SimConfig> {
        let mut rng = substream(seed, "benchmark.eval");
        (0..self.videos)
            .map(|k| SimConfig {
                group_rate: spread(self.group_rate_range, k, self.videos),
                seed: rng.random(),
                ..self.sim.clone()
            })
            .collect()
    }

    /// Simulator configs of the training videos for `seed`; disjoint seeds
    /// from the evaluation set.
    pub fn train_configs(&self, seed: u64) -> Vec<SimConfig> {
        let mut rng = substream(seed, "benchmark.train");
        (0..self.train_videos)
            .map(|k| SimConfig {
                group_rate: spread(self.group_rate_range, k, self.train_videos),
                num_frames: self.train_frames,
                seed: rng.random(),
                ..self.sim.clone()
            })
            .collect()
    }

    pub fn eval_set(&self, seed: u64) -> Result<Vec<VideoSequence>> {
        self.eval_configs(seed)
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let mut seq = generate(c)?;
                seq.id = format!("bench-{seed}-{k:02}");
                Ok(seq)
            })
            .collect()
    }

    pub fn train_set(&self, seed: u64) -> Result<Vec<VideoSequence>> {
        self.train_configs(seed)
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let mut seq = generate(c)?;
                seq.id = format!("train-{seed}-{k:02}");
                Ok(seq)
            })
            .collect()
    }
}

/// Training settings used on the benchmark preset.
pub fn benchmark_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoPrediction {
    pub result: VideoResult,
    pub first_frame: usize,
    pub pairs: Vec<PairRecord>,
}

fn video_ground_truth(seq: &VideoSequence, sigma: f64) -> Result<(usize, usize)> {
    let gt = ground_truth_total(seq, sigma)?;
    Ok((gt.unique, gt.sampled_frames))
}

/// Counts a video as `N̂_0 + Σ inflow` over σ-sampled pairs.
pub fn predict_video(params: &ModelParams, model: &ModelConfig, seq: &VideoSequence, eval: &EvalConfig) -> Result<VideoPrediction> {
    let idx = sample_indices(seq, eval.sigma)?;
    let Some(&first) = idx.first() else {
        return Err(Error::Validation(format!("sequence {} has no frames", seq.id)));
    };
    let first_frame = seq.frames[first].len();
    let mut total = first_frame;
    let mut pairs = Vec::with_capacity(idx.len().saturating_sub(1));
    for w in idx.windows(2) {
        let (prev, curr) = (&seq.frames[w[0]], &seq.frames[w[1]]);
        let p = if prev.is_empty() || curr.is_empty() {
            ndarray::Array2::zeros((prev.len(), curr.len()))
        } else {
            predict_pair(params, model, prev, curr)?
        };
        let p = MatchProbabilities::new(p)?;
        let flows = count_flows(&p, eval.count_mode, eval.tau);
        let decoded = decode_matches(&p, eval.tau, eval.k);
        debug_assert_eq!(decoded.k, eval.k);
        total += flows.inflow;
        pairs.push(PairRecord {
            pair: [prev.timestamp, curr.timestamp],
            inflow: flows.inflow,
            outflow: flows.outflow,
            shared: flows.shared,
            p_shape: [p.m(), p.n()],
        });
    }
    let (ground_truth, length) = if seq.is_labeled() {
        video_ground_truth(seq, eval.sigma)?
    } else {
        (0, idx.len())
    };
    let predicted = if eval.oracle { ground_truth } else { total };
    Ok(VideoPrediction {
        result: VideoResult {
            id: seq.id.clone(),
            predicted,
            ground_truth,
            length,
        },
        first_frame,
        pairs,
    })
}

pub fn evaluate(
    params: &ModelParams,
    model: &ModelConfig,
    seqs: &[VideoSequence],
    eval: &EvalConfig,
) -> Result<(MetricsReport, Vec<VideoPrediction>)> {
    for s in seqs {
        if !s.is_labeled() {
            return Err(Error::Labeling(format!("sequence {} is unlabeled; evaluation needs identities", s.id)));
        }
    }
    let preds: Vec<VideoPrediction> = seqs
        .iter()
        .map(|s| predict_video(params, model, s, eval))
        .collect::<Result<_>>()?;
    let report = MetricsReport::new(preds.iter().map(|p| p.result.clone()).collect(), eval.mse_convention)?;
    Ok((report, preds))
}

/// One-to-one baseline count on raw appearance descriptors.
pub fn o2o_video(seq: &VideoSequence, threshold: f64, sigma: f64) -> Result<VideoResult> {
    let idx = sample_indices(seq, sigma)?;
    let Some(&first) = idx.first() else {
        return Err(Error::Validation(format!("sequence {} has no frames", seq.id)));
    };
    let descriptors = |k: usize| -> Result<ndarray::Array2<f64>> {
        let f = &seq.frames[k];
        let d = seq.descriptor_dim().ok_or_else(|| {
            Error::Validation(format!("sequence {} has no descriptors", seq.id))
        })?;
        let mut out = ndarray::Array2::zeros((f.len(), d));
        for (i, o) in f.observations.iter().enumerate() {
            let v = o.descriptor.as_ref().ok_or_else(|| {
                Error::Validation(format!("frame {} lacks a descriptor", f.index))
            })?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(v.as_slice()));
        }
        Ok(out)
    };
    let mut total = seq.frames[first].len();
    for w in idx.windows(2) {
        let (_, flows) = o2o_match(&descriptors(w[0])?, &descriptors(w[1])?, threshold)?;
        total += flows.inflow;
    }
    let (ground_truth, length) = video_ground_truth(seq, sigma)?;
    Ok(VideoResult {
        id: seq.id.clone(),
        predicted: total,
        ground_truth,
        length,
    })
}

pub fn evaluate_o2o(seqs: &[VideoSequence], threshold: f64, eval: &EvalConfig) -> Result<MetricsReport> {
    let results = seqs
        .iter()
        .map(|s| o2o_video(s, threshold, eval.sigma))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::new(results, eval.mse_convention)
}

pub const O2O_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TunedBaseline {
    pub threshold: f64,
    pub report: MetricsReport,
    /// `(threshold, WRAE)` for every candidate.
    pub sweep: Vec<(f64, f64)>,
}

/// Baseline with the threshold giving the lowest WRAE.
pub fn tuned_o2o(seqs: &[VideoSequence], thresholds: &[f64], eval: &EvalConfig) -> Result<TunedBaseline> {
    let mut best: Option<(f64, MetricsReport)> = None;
    let mut sweep = Vec::new();
    for &t in thresholds {
        let r = evaluate_o2o(seqs, t, eval)?;
        sweep.push((t, r.wrae));
        if best.as_ref().is_none_or(|(_, b)| r.wrae < b.wrae) {
            best = Some((t, r));
        }
    }
    let (threshold, report) = best.ok_or_else(|| Error::Config("no baseline thresholds given".into()))?;
    Ok(TunedBaseline {
        threshold,
        report,
        sweep,
    })
}

/// Module toggles of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub icg: bool,
    pub ompm: bool,
    pub kl: bool,
}

impl Variant {
    pub const FULL: Variant = Variant {
        icg: true,
        ompm: true,
        kl: true,
    };

    /// Rows of the module ablation, from bare to full.
    pub const GRID: [Variant; 5] = [
        Variant {
            icg: false,
            ompm: false,
            kl: false,
        },
        Variant {
            icg: true,
            ompm: false,
            kl: false,
        },
        Variant {
            icg: false,
            ompm: true,
            kl: false,
        },
        Variant {
            icg: true,
            ompm: true,
            kl: false,
        },
        Variant::FULL,
    ];

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.icg {
            parts.push("icg");
        }
        if self.ompm {
            parts.push("ompm");
        }
        if self.kl {
            parts.push("kl");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        c.model.icg_on = self.icg;
        c.model.ompm_on = self.ompm;
        c.kl_on = self.kl;
        c
    }
}

/// Trains on `train` and evaluates on `test`.
pub fn train_and_evaluate(
    cfg: &TrainConfig,
    train_set: &[VideoSequence],
    test_set: &[VideoSequence],
    eval: &EvalConfig,
) -> Result<(TrainOutcome, MetricsReport)> {
    let outcome = train(train_set, cfg)?;
    if let Some(e) = &outcome.diverged {
        return Err(Error::Divergence {
            module: "train",
            message: e.to_string(),
        });
    }
    let (report, _) = evaluate(&outcome.params, &cfg.model, test_set, eval)?;
    Ok((outcome, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub name: String,
    pub mae: f64,
    pub mse: f64,
    pub wrae: f64,
}

pub fn ablation_grid(
    cfg: &TrainConfig,
    train_set: &[VideoSequence],
    test_set: &[VideoSequence],
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    Variant::GRID
        .iter()
        .map(|v| {
            let (_, r) = train_and_evaluate(&v.apply(cfg), train_set, test_set, eval)?;
            Ok(AblationRow {
                variant: *v,
                name: v.name(),
                mae: r.mae,
                mse: r.mse,
                wrae: r.wrae,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthRow {
    pub depth: usize,
    pub mae: f64,
    pub mse: f64,
    pub wrae: f64,
}

pub fn depth_sweep(
    cfg: &TrainConfig,
    depths: &[usize],
    train_set: &[VideoSequence],
    test_set: &[VideoSequence],
    eval: &EvalConfig,
) -> Result<Vec<DepthRow>> {
    depths
        .iter()
        .map(|&depth| {
            let mut c = cfg.clone();
            c.model.mlp.depth = depth;
            let (_, r) = train_and_evaluate(&c, train_set, test_set, eval)?;
            Ok(DepthRow {
                depth,
                mae: r.mae,
                mse: r.mse,
                wrae: r.wrae,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{bucket_of, DENSITY_BOUNDARIES};

    #[test]
    fn preset_spans_every_bucket() {
        let bench = BenchmarkConfig::default();
        let seqs = bench.eval_set(0).unwrap();
        assert_eq!(seqs.len(), 20);
        let mut seen = [false; 5];
        for s in &seqs {
            let gt = ground_truth_total(s, 3.0).unwrap().unique;
            seen[bucket_of(gt as f64, &DENSITY_BOUNDARIES)] = true;
            let peak = s.frames.iter().map(|f| f.len()).max().unwrap();
            assert!(peak <= 64, "{} peaks at {peak}", s.id);
        }
        assert!(seen.iter().all(|&b| b), "{seen:?}");
    }

    #[test]
    fn oracle_mode_scores_zero() {
        let bench = BenchmarkConfig {
            videos: 3,
            ..BenchmarkConfig::default()
        };
        let seqs = bench.eval_set(1).unwrap();
        let cfg = benchmark_train_config(0);
        let params = ModelParams::init(&cfg.model, 0).unwrap();
        let eval = EvalConfig {
            oracle: true,
            ..EvalConfig::default()
        };
        let (report, _) = evaluate(&params, &cfg.model, &seqs, &eval).unwrap();
        assert_eq!((report.mae, report.wrae), (0.0, 0.0));
    }

    #[test]
    fn perfect_features_make_o2o_exact_without_occlusion() {
        let mut bench = BenchmarkConfig {
            videos: 2,
            ..BenchmarkConfig::default()
        };
        bench.sim.occlusion_dropout = 0.0;
        bench.sim.group_feature_corr = 0.0;
        bench.sim.appearance_noise = 0.0;
        bench.sim.descriptor_dim = 64;
        for s in bench.eval_set(2).unwrap() {
            let r = o2o_video(&s, 0.9, 3.0).unwrap();
            assert_eq!(r.predicted, r.ground_truth, "{}", s.id);
        }
    }

    #[test]
    fn grid_rows() {
        let names: Vec<String> = Variant::GRID.iter().map(Variant::name).collect();
        assert_eq!(names, ["none", "icg", "ompm", "icg+ompm", "icg+ompm+kl"]);
    }
}
