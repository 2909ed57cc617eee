//! Central finite-difference verification of back-propagated gradients.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{batch_loss_and_grad, pair_loss, TrainConfig, TrainExample};
use crate::error::Result;
use crate::model::ModelParams;
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Worst relative error per parameter tensor.
    pub per_tensor: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

const REL_FLOOR: f64 = 1e-6;

/// Picks at least one coordinate in every tensor, then fills up to `min_coords`
/// uniformly over all coordinates. Returns `(tensor, flat offset)` pairs.
pub fn sample_coordinates(params: &ModelParams, min_coords: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = substream(seed, "gradcheck.coords");
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, a)| a.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut picked: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(t, &s)| (t, rng.random_range(0..s))).collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &s| {
            let start = *acc;
            *acc += s;
            Some(start)
        })
        .collect();
    let mut flat: Vec<usize> = picked.iter().map(|&(t, o)| offsets[t] + o).collect();
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    for idx in order {
        if flat.len() >= min_coords.min(total) {
            break;
        }
        if !flat.contains(&idx) {
            flat.push(idx);
        }
    }
    picked = flat
        .into_iter()
        .map(|f| {
            let t = offsets.partition_point(|&o| o <= f) - 1;
            (t, f - offsets[t])
        })
        .collect();
    picked
}

/// Compares `analytic` with central differences of `loss` at the sampled
/// coordinates.
pub fn compare_with_finite_differences(
    params: &ModelParams,
    analytic: &ModelParams,
    loss: impl Fn(&ModelParams) -> Result<f64>,
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport> {
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let grads = analytic.tensors();
    let mut per_tensor = BTreeMap::new();
    let mut worst: f64 = 0.0;
    let mut work = params.clone();
    for &(t, off) in coords {
        let base = params.tensors()[t].1.as_slice().expect("standard layout")[off];
        let set = |v: f64, work: &mut ModelParams| {
            work.tensors_mut()[t].1.as_slice_mut().expect("standard layout")[off] = v;
        };
        set(base + h, &mut work);
        let up = loss(&work)?;
        set(base - h, &mut work);
        let down = loss(&work)?;
        set(base, &mut work);
        let numeric = (up - down) / (2.0 * h);
        let a = grads[t].1.as_slice().expect("standard layout")[off];
        let err = relative_error(a, numeric, REL_FLOOR);
        worst = worst.max(err);
        let slot = per_tensor.entry(names[t].clone()).or_insert(0.0f64);
        *slot = slot.max(err);
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked: coords.len(),
        per_tensor,
    })
}

/// Mean total loss of `batch`, evaluated with a fixed Sinkhorn iteration
/// count so that the map being differenced is smooth.
pub fn grad_check(
    params: &ModelParams,
    cfg: &TrainConfig,
    batch: &[TrainExample],
    h: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut cfg = cfg.clone();
    cfg.ot.tol = 0.0;
    let refs: Vec<&TrainExample> = batch.iter().collect();
    let (_, analytic) = batch_loss_and_grad(params, &cfg, &refs)?;
    let loss = |p: &ModelParams| -> Result<f64> {
        let mut s = 0.0;
        for ex in batch {
            s += pair_loss(p, &cfg, ex)?.l_total;
        }
        Ok(s / batch.len() as f64)
    };
    let coords = sample_coordinates(params, min_coords, seed);
    compare_with_finite_differences(params, &analytic, loss, h, &coords)
}
