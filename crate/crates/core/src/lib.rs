//! Video individual counting by one-to-many cross-frame pedestrian matching.
//!
//! The pipeline takes per-frame pedestrian locations and appearance
//! descriptors, embeds them as tokens, runs a self-attention encoder over
//! the tokens of two sampled frames, appends the averaged cross-frame
//! attention block as group context, and scores every cross-frame pair with
//! an MLP over the Hadamard product of the two token features. Counting a
//! video is then the first-frame population plus the per-pair inflows.
//!
//! Modules follow the pipeline order:
//!
//! - [`dataset`]: JSONL sequences, σ-sampling, ground-truth flow labels
//! - [`simulator`]: synthetic grouped pedestrian flows
//! - [`featurizer`]: position embedding and token projection
//! - [`icg`]: the attention encoder and its decomposed attention maps
//! - [`ompm`]: pairwise scoring, one-to-many decoding, flow counting
//! - [`training`]: group labels, losses, Sinkhorn, optimization, gradient checks
//! - [`baselines`]: Hungarian one-to-one matching
//! - [`metrics`]: MAE, RMSE, WRAE and density breakdowns
//! - [`experiment`] and [`cli`]: the reproducible harness behind the `vic` binary

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod featurizer;
pub mod icg;
pub mod metrics;
pub mod model;
pub mod ompm;
pub mod rng;
pub mod simulator;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
