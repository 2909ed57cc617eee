//! Group labels: a previous pedestrian is a positive for every current
//! pedestrian standing near where it reappears.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{Frame, FramePairGT};
use crate::error::{Error, Result};

/// Which frame the neighbourhood ball is drawn in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupAnchor {
    /// Around the shared identity's position in the current frame.
    #[default]
    Curr,
    /// Around the shared identity's position in the previous frame: `(i, j)`
    /// is positive when `i` stands near `j`'s earlier self.
    Prev,
    /// Union of both.
    Both,
}

/// Binary `m x n` label matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLabelMatrix {
    pub y: Array2<f64>,
    pub radius: f64,
}

impl GroupLabelMatrix {
    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&v| v > 0.5).count()
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn build_group_labels(
    prev: &Frame,
    curr: &Frame,
    gt: &FramePairGT,
    radius: f64,
    anchor: GroupAnchor,
) -> Result<GroupLabelMatrix> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("group radius must be positive, got {radius}")));
    }
    if !prev.is_labeled() || !curr.is_labeled() {
        return Err(Error::Labeling(format!(
            "frames {} and {} need identity labels to build group labels",
            prev.index, curr.index
        )));
    }
    let (m, n) = (prev.len(), curr.len());
    let mut y = Array2::zeros((m, n));
    for &(i, jstar) in &gt.shared_pairs {
        if matches!(anchor, GroupAnchor::Curr | GroupAnchor::Both) {
            let centre = curr.observations[jstar].position;
            for j in 0..n {
                if dist(curr.observations[j].position, centre) <= radius {
                    y[[i, j]] = 1.0;
                }
            }
        }
        if matches!(anchor, GroupAnchor::Prev | GroupAnchor::Both) {
            let centre = prev.observations[i].position;
            for i2 in 0..m {
                if dist(prev.observations[i2].position, centre) <= radius {
                    y[[i2, jstar]] = 1.0;
                }
            }
        }
    }
    Ok(GroupLabelMatrix { y, radius })
}
