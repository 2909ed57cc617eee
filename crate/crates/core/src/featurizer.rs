//! Token features: a fixed sinusoidal 2-D position embedding concatenated
//! with each appearance descriptor, then one linear projection to the model
//! dimension.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2};

use crate::dataset::Frame;
use crate::error::{Error, Result};
use crate::model::Linear;

/// Highest embedding frequency, in cycles per unit length.
pub const MAX_FREQUENCY: f64 = 100.0;

/// Projected token features of one frame, `N_t x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub frame_index: usize,
    pub features: Array2<f64>,
}

impl TokenFeatures {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// Projection weights plus the embedding width they expect.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizerParams {
    pub projection: Linear,
    pub d_pe: usize,
}

impl FeaturizerParams {
    pub fn d_in(&self) -> usize {
        self.projection.weight.nrows() - self.d_pe
    }

    pub fn d_model(&self) -> usize {
        self.projection.weight.ncols()
    }
}

pub(crate) fn check_pe_dim(d_pe: usize) -> Result<()> {
    if d_pe == 0 || d_pe % 4 != 0 {
        return Err(Error::Config(format!(
            "position embedding width d_pe = {d_pe} must be a positive multiple of 4"
        )));
    }
    Ok(())
}

/// Band frequencies: `d_pe / 4` values spaced geometrically from 1 to 100.
pub fn frequencies(d_pe: usize) -> Vec<f64> {
    let bands = d_pe / 4;
    if bands <= 1 {
        return vec![1.0; bands];
    }
    (0..bands)
        .map(|k| MAX_FREQUENCY.powf(k as f64 / (bands - 1) as f64))
        .collect()
}

/// Layout per axis `[sin(2πf₀x), cos(2πf₀x), sin(2πf₁x), …]`, x first then y.
/// The norm is exactly `√(d_pe/2)`.
pub fn position_embedding(position: [f64; 2], d_pe: usize) -> Result<Array1<f64>> {
    check_pe_dim(d_pe)?;
    let freqs = frequencies(d_pe);
    let mut out = Array1::zeros(d_pe);
    let mut k = 0;
    for coord in position {
        for f in &freqs {
            let phase = 2.0 * PI * f * coord;
            out[k] = phase.sin();
            out[k + 1] = phase.cos();
            k += 2;
        }
    }
    Ok(out)
}

/// Rows `[descriptor_i ‖ pe_i]`, shape `N_t x (d_in + d_pe)`.
pub fn frame_inputs(frame: &Frame, d_in: usize, d_pe: usize) -> Result<Array2<f64>> {
    check_pe_dim(d_pe)?;
    let mut out = Array2::zeros((frame.len(), d_in + d_pe));
    for (i, obs) in frame.observations.iter().enumerate() {
        let desc = obs.descriptor.as_ref().ok_or_else(|| {
            Error::Validation(format!(
                "frame {} has no appearance descriptors; generate data with the simulator or supply `f` arrays in the JSONL",
                frame.index
            ))
        })?;
        if desc.len() != d_in {
            return Err(Error::Validation(format!(
                "frame {}: descriptor length {} but the model expects d_in = {d_in}",
                frame.index,
                desc.len()
            )));
        }
        out.slice_mut(s![i, ..d_in]).assign(&Array1::from(desc.clone()));
        out.slice_mut(s![i, d_in..])
            .assign(&position_embedding(obs.position, d_pe)?);
    }
    Ok(out)
}

/// `F_t`: row `i` is `W·[descriptor_i ‖ pe_i] + b`.
pub fn embed_frame(frame: &Frame, params: &FeaturizerParams) -> Result<TokenFeatures> {
    let inputs = frame_inputs(frame, params.d_in(), params.d_pe)?;
    Ok(TokenFeatures {
        frame_index: frame.index,
        features: params.projection.apply(&inputs),
    })
}
