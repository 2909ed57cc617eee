//! Annotated pedestrian sequences, σ-interval frame sampling and the
//! ground-truth inflow/outflow labels derived from identities.
//!
//! On disk a sequence is JSONL, one frame per line:
//!
//! ```text
//! {"frame": 0, "t": 0.0, "peds": [{"id": 3, "x": 0.41, "y": 0.72, "f": [0.1, ...]}]}
//! ```
//!
//! `id` and `f` may be `null`. Descriptors must be present for every
//! observation in a file or for none. Group membership, when known, lives in
//! a sidecar `<stem>.groups.json` holding `{"groups": {"<id>": group}}`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PedestrianObservation {
    pub identity: Option<u64>,
    /// Normalized `(x, y)` in `[0, 1]²`.
    pub position: [f64; 2],
    pub descriptor: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub observations: Vec<PedestrianObservation>,
}

impl Frame {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.observations.iter().all(|o| o.identity.is_some())
    }

    fn identities(&self) -> Result<Vec<u64>> {
        self.observations
            .iter()
            .map(|o| {
                o.identity.ok_or_else(|| {
                    Error::Labeling(format!(
                        "frame {} has an observation without identity",
                        self.index
                    ))
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub id: String,
    pub frames: Vec<Frame>,
    /// Nominal frame rate, when known.
    pub fps: Option<f64>,
    /// Identity to group id, when known (simulated data).
    pub groups: Option<BTreeMap<u64, u64>>,
}

impl VideoSequence {
    /// Descriptor dimension, `None` when the sequence carries no descriptors.
    pub fn descriptor_dim(&self) -> Option<usize> {
        self.frames
            .iter()
            .flat_map(|f| f.observations.iter())
            .find_map(|o| o.descriptor.as_ref().map(Vec::len))
    }

    pub fn is_labeled(&self) -> bool {
        self.frames.iter().all(Frame::is_labeled)
    }

    /// Checks every sequence invariant. `d_in`, when given, is the required
    /// descriptor length.
    pub fn validate(&self, d_in: Option<usize>) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Validation(format!("sequence {} has no frames", self.id)));
        }
        let mut has_desc: Option<bool> = None;
        let mut dim: Option<usize> = d_in;
        for (k, frame) in self.frames.iter().enumerate() {
            if k > 0 {
                let prev = &self.frames[k - 1];
                if frame.index <= prev.index {
                    return Err(Error::Validation(format!(
                        "sequence {}: duplicate or unsorted frame index {}",
                        self.id, frame.index
                    )));
                }
                if frame.timestamp <= prev.timestamp {
                    return Err(Error::Validation(format!(
                        "sequence {}: timestamps not strictly increasing at frame {} ({} <= {})",
                        self.id, frame.index, frame.timestamp, prev.timestamp
                    )));
                }
            }
            if !frame.timestamp.is_finite() {
                return Err(Error::Validation(format!(
                    "sequence {}: non-finite timestamp at frame {}",
                    self.id, frame.index
                )));
            }
            let mut seen = HashSet::new();
            for obs in &frame.observations {
                let [x, y] = obs.position;
                if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                    return Err(Error::Validation(format!(
                        "sequence {}: frame {} has position ({x}, {y}) outside [0,1]²",
                        self.id, frame.index
                    )));
                }
                if let Some(id) = obs.identity {
                    if !seen.insert(id) {
                        return Err(Error::Validation(format!(
                            "sequence {}: identity {id} appears twice in frame {}",
                            self.id, frame.index
                        )));
                    }
                }
                let present = obs.descriptor.is_some();
                match has_desc {
                    None => has_desc = Some(present),
                    Some(p) if p != present => {
                        return Err(Error::Validation(format!(
                            "sequence {}: descriptors must be present for all observations or none",
                            self.id
                        )))
                    }
                    _ => {}
                }
                if let Some(desc) = &obs.descriptor {
                    match dim {
                        None => dim = Some(desc.len()),
                        Some(d) if d != desc.len() => {
                            return Err(Error::Validation(format!(
                                "sequence {}: descriptor length {} in frame {} (expected {d})",
                                self.id,
                                desc.len(),
                                frame.index
                            )))
                        }
                        _ => {}
                    }
                    if desc.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Validation(format!(
                            "sequence {}: non-finite descriptor in frame {}",
                            self.id, frame.index
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Ground truth for one sampled frame pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FramePairGT {
    pub prev_index: usize,
    pub curr_index: usize,
    /// `(i, j)` observation indices into prev/curr with equal identity.
    pub shared_pairs: Vec<(usize, usize)>,
    pub inflow_count: usize,
    pub outflow_count: usize,
}

#[derive(Serialize, Deserialize)]
struct PedRecord {
    id: Option<i64>,
    x: f64,
    y: f64,
    f: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    frame: i64,
    t: f64,
    peds: Vec<PedRecord>,
}

#[derive(Serialize, Deserialize)]
struct GroupsSidecar {
    groups: BTreeMap<u64, u64>,
}

/// Path of the group sidecar belonging to a sequence file.
pub fn groups_sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.groups.json"))
}

/// Reads a JSONL sequence. `d_in`, when given, is the required descriptor length.
pub fn load_sequence(path: &Path, d_in: Option<usize>) -> Result<VideoSequence> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut frames = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.frame < 0 {
            return Err(parse_err(format!("negative frame index {}", rec.frame)));
        }
        let mut observations = Vec::with_capacity(rec.peds.len());
        for p in rec.peds {
            let identity = match p.id {
                Some(id) if id < 0 => return Err(parse_err(format!("negative identity {id}"))),
                Some(id) => Some(id as u64),
                None => None,
            };
            observations.push(PedestrianObservation {
                identity,
                position: [p.x, p.y],
                descriptor: p.f,
            });
        }
        frames.push(Frame {
            index: rec.frame as usize,
            timestamp: rec.t,
            observations,
        });
    }
    frames.sort_by_key(|f| f.index);
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let sidecar = groups_sidecar_path(path);
    let groups = if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let parsed: GroupsSidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: sidecar.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Some(parsed.groups)
    } else {
        None
    };
    let fps = estimate_fps(&frames);
    let seq = VideoSequence {
        id,
        frames,
        fps,
        groups,
    };
    seq.validate(d_in)?;
    Ok(seq)
}

fn estimate_fps(frames: &[Frame]) -> Option<f64> {
    if frames.len() < 2 {
        return None;
    }
    let span = frames[frames.len() - 1].timestamp - frames[0].timestamp;
    (span > 0.0).then(|| (frames.len() - 1) as f64 / span)
}

/// Writes `seq` as JSONL, plus the group sidecar when group metadata is present.
pub fn write_sequence(seq: &VideoSequence, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for frame in &seq.frames {
        let rec = FrameRecord {
            frame: frame.index as i64,
            t: frame.timestamp,
            peds: frame
                .observations
                .iter()
                .map(|o| PedRecord {
                    id: o.identity.map(|v| v as i64),
                    x: o.position[0],
                    y: o.position[1],
                    f: o.descriptor.clone(),
                })
                .collect(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    if let Some(groups) = &seq.groups {
        let sidecar = groups_sidecar_path(path);
        let text = serde_json::to_string(&GroupsSidecar {
            groups: groups.clone(),
        })
        .map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
    }
    Ok(())
}

/// Indices of the frames selected at every multiple of `sigma` seconds after
/// the first frame. Each target picks the frame with the nearest timestamp,
/// ties going to the earlier frame; repeated selections collapse.
pub fn sample_indices(seq: &VideoSequence, sigma: f64) -> Result<Vec<usize>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let Some(first) = seq.frames.first() else {
        return Ok(Vec::new());
    };
    let t0 = first.timestamp;
    let t_last = seq.frames[seq.frames.len() - 1].timestamp;
    let slack = 1e-9 * t_last.abs().max(1.0);
    let times: Vec<f64> = seq.frames.iter().map(|f| f.timestamp).collect();
    let mut picked: Vec<usize> = Vec::new();
    let mut k = 0u64;
    loop {
        let target = t0 + k as f64 * sigma;
        if target > t_last + slack {
            break;
        }
        let upper = times.partition_point(|&t| t < target);
        let best = if upper == 0 {
            0
        } else if upper == times.len() {
            times.len() - 1
        } else if (target - times[upper - 1]) <= (times[upper] - target) {
            upper - 1
        } else {
            upper
        };
        if picked.last() != Some(&best) {
            picked.push(best);
        }
        k += 1;
    }
    Ok(picked)
}

/// Consecutive pairs `(I_{(k-1)σ}, I_{kσ})` of σ-sampled frames.
pub fn sample_pairs(seq: &VideoSequence, sigma: f64) -> Result<Vec<(&Frame, &Frame)>> {
    let idx = sample_indices(seq, sigma)?;
    Ok(idx
        .windows(2)
        .map(|w| (&seq.frames[w[0]], &seq.frames[w[1]]))
        .collect())
}

/// Identity-derived shared pairs and pairwise inflow/outflow counts.
pub fn derive_flow_labels(prev: &Frame, curr: &Frame) -> Result<FramePairGT> {
    let prev_ids = prev.identities()?;
    let curr_ids = curr.identities()?;
    let mut shared_pairs = Vec::new();
    for (i, a) in prev_ids.iter().enumerate() {
        for (j, b) in curr_ids.iter().enumerate() {
            if a == b {
                shared_pairs.push((i, j));
            }
        }
    }
    let matched_prev: BTreeSet<usize> = shared_pairs.iter().map(|p| p.0).collect();
    let matched_curr: BTreeSet<usize> = shared_pairs.iter().map(|p| p.1).collect();
    Ok(FramePairGT {
        prev_index: prev.index,
        curr_index: curr.index,
        inflow_count: curr.len() - matched_curr.len(),
        outflow_count: prev.len() - matched_prev.len(),
        shared_pairs,
    })
}

/// Ground-truth video count computed two ways.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GroundTruthTotal {
    /// Distinct identities over all σ-sampled frames.
    pub unique: usize,
    /// `N_0` plus the sum of pairwise inflows.
    pub pairwise: usize,
    pub first_frame: usize,
    pub sampled_frames: usize,
}

impl GroundTruthTotal {
    /// Whether both routes agree; they differ only when a pedestrian leaves
    /// the sampled view and later reappears.
    pub fn consistent(&self) -> bool {
        self.unique == self.pairwise
    }
}

pub fn ground_truth_total(seq: &VideoSequence, sigma: f64) -> Result<GroundTruthTotal> {
    let idx = sample_indices(seq, sigma)?;
    let Some(&first) = idx.first() else {
        return Err(Error::Validation(format!("sequence {} has no frames", seq.id)));
    };
    let mut unique = BTreeSet::new();
    for &k in &idx {
        unique.extend(seq.frames[k].identities()?);
    }
    let n0 = seq.frames[first].len();
    let mut pairwise = n0;
    for w in idx.windows(2) {
        pairwise += derive_flow_labels(&seq.frames[w[0]], &seq.frames[w[1]])?.inflow_count;
    }
    Ok(GroundTruthTotal {
        unique: unique.len(),
        pairwise,
        first_frame: n0,
        sampled_frames: idx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(id: u64, x: f64) -> PedestrianObservation {
        PedestrianObservation {
            identity: Some(id),
            position: [x, 0.5],
            descriptor: None,
        }
    }

    fn frame(index: usize, t: f64, ids: &[u64]) -> Frame {
        Frame {
            index,
            timestamp: t,
            observations: ids.iter().map(|&i| obs(i, 0.1 * (i % 10) as f64)).collect(),
        }
    }

    fn seq_of(frames: Vec<Frame>) -> VideoSequence {
        VideoSequence {
            id: "s".into(),
            frames,
            fps: None,
            groups: None,
        }
    }

    #[test]
    fn sampling_at_three_seconds() {
        let seq = seq_of((0..10).map(|k| frame(k, k as f64, &[1])).collect());
        let pairs = sample_pairs(&seq, 3.0).unwrap();
        let idx: Vec<_> = pairs.iter().map(|(a, b)| (a.index, b.index)).collect();
        assert_eq!(idx, vec![(0, 3), (3, 6), (6, 9)]);
    }

    #[test]
    fn sampling_ties_go_to_earlier_frame() {
        // frames at 0, 1, 2, 4: target 3 is equidistant from 2 and 4
        let seq = seq_of(vec![
            frame(0, 0.0, &[1]),
            frame(1, 1.0, &[1]),
            frame(2, 2.0, &[1]),
            frame(3, 4.0, &[1]),
        ]);
        assert_eq!(sample_indices(&seq, 3.0).unwrap(), vec![0, 2]);
    }

    #[test]
    fn sampling_degenerate_inputs() {
        let seq = seq_of(vec![frame(0, 0.0, &[1])]);
        assert!(sample_pairs(&seq, 3.0).unwrap().is_empty());
        assert!(matches!(sample_pairs(&seq, 0.0), Err(Error::Config(_))));
        // σ below the frame spacing: every frame once
        let seq = seq_of((0..4).map(|k| frame(k, k as f64, &[1])).collect());
        assert_eq!(sample_indices(&seq, 0.4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn flow_labels_examples() {
        let gt = derive_flow_labels(&frame(0, 0.0, &[1, 2, 3]), &frame(1, 1.0, &[2, 3, 4])).unwrap();
        assert_eq!(gt.shared_pairs, vec![(1, 0), (2, 1)]);
        assert_eq!((gt.inflow_count, gt.outflow_count), (1, 1));

        let same = derive_flow_labels(&frame(0, 0.0, &[5, 6]), &frame(1, 1.0, &[6, 5])).unwrap();
        assert_eq!((same.inflow_count, same.outflow_count), (0, 0));

        let disjoint = derive_flow_labels(&frame(0, 0.0, &[1, 2, 3]), &frame(1, 1.0, &[7, 8])).unwrap();
        assert_eq!((disjoint.inflow_count, disjoint.outflow_count), (2, 3));
    }

    #[test]
    fn flow_labels_need_identities() {
        let mut f = frame(1, 1.0, &[1]);
        f.observations[0].identity = None;
        assert!(matches!(
            derive_flow_labels(&frame(0, 0.0, &[1]), &f),
            Err(Error::Labeling(_))
        ));
    }

    #[test]
    fn ground_truth_single_frame_and_sum() {
        let seq = seq_of(vec![frame(0, 0.0, &[1, 2, 3, 4, 5])]);
        assert_eq!(ground_truth_total(&seq, 3.0).unwrap().unique, 5);

        // N_0 = 5, inflows [2, 0, 3]
        let seq = seq_of(vec![
            frame(0, 0.0, &[1, 2, 3, 4, 5]),
            frame(1, 3.0, &[1, 2, 3, 4, 5, 6, 7]),
            frame(2, 6.0, &[3, 4, 5, 6, 7]),
            frame(3, 9.0, &[3, 8, 9, 10]),
        ]);
        let gt = ground_truth_total(&seq, 3.0).unwrap();
        assert_eq!(gt.pairwise, 10);
        assert_eq!(gt.unique, 10);
        assert!(gt.consistent());
    }

    #[test]
    fn reentry_makes_routes_differ() {
        let seq = seq_of(vec![
            frame(0, 0.0, &[1, 2]),
            frame(1, 3.0, &[2]),
            frame(2, 6.0, &[1, 2]),
        ]);
        let gt = ground_truth_total(&seq, 3.0).unwrap();
        assert_eq!(gt.unique, 2);
        assert_eq!(gt.pairwise, 3);
        assert!(!gt.consistent());
    }

    #[test]
    fn validation_rules() {
        assert!(matches!(seq_of(vec![]).validate(None), Err(Error::Validation(_))));
        let seq = seq_of(vec![frame(0, 1.0, &[1]), frame(1, 1.0, &[1])]);
        assert!(matches!(seq.validate(None), Err(Error::Validation(_))));
        let mut f = frame(0, 0.0, &[1]);
        f.observations[0].position = [1.2, 0.5];
        assert!(seq_of(vec![f]).validate(None).is_err());
        let mut f = frame(0, 0.0, &[1, 2]);
        f.observations[0].descriptor = Some(vec![1.0; 4]);
        assert!(seq_of(vec![f]).validate(None).is_err(), "mixed descriptor presence");
    }
}
