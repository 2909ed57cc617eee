//! One-to-many pairwise matcher.
//!
//! Every cross-frame pair is scored as `sigmoid(MLP(f_prev_i ⊙ f_curr_j))`.
//! Decoding lets a current pedestrian match up to `k` previous ones, and
//! counting turns the scores into inflow/outflow numbers for the pair.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Linear;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    /// Number of linear layers.
    pub depth: usize,
    pub hidden: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { depth: 3, hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T = Array2<f64>> {
    pub layers: Vec<Linear<T>>,
}

impl<T> MlpParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MlpParams<U> {
        MlpParams {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, name: &str, f: &mut impl FnMut(String, &'a T)) {
        for (k, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{name}.layer{k}"), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, name: &str, f: &mut impl FnMut(String, &'a mut T)) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{name}.layer{k}"), f);
        }
    }
}

impl MlpParams {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, cfg: &MlpConfig) -> Self {
        let depth = cfg.depth.max(1);
        let mut widths = vec![d];
        widths.extend(std::iter::repeat_n(cfg.hidden, depth - 1));
        widths.push(1);
        MlpParams {
            layers: widths
                .windows(2)
                .map(|w| Linear::init(rng, w[0], w[1], 1.0))
                .collect(),
        }
    }
}

impl MlpParams<Var> {
    /// Logits, one per input row; SiLU between layers.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h);
            if k + 1 < self.layers.len() {
                h = tape.silu(h);
            }
        }
        h
    }
}

/// `m x n` matrix of `sigmoid(MLP(prev_i ⊙ curr_j))`.
pub fn pairwise_scores_on_tape(tape: &mut Tape, mlp: &MlpParams<Var>, prev: Var, curr: Var) -> Var {
    let m = tape.shape(prev).0;
    let n = tape.shape(curr).0;
    if m == 0 || n == 0 {
        return tape.zeros(m, n);
    }
    let pairs = tape.pairwise_product(prev, curr);
    let logits = mlp.forward(tape, pairs);
    let p = tape.sigmoid(logits);
    tape.reshape(p, m, n)
}

/// `m x n` matrix of `max(cos(prev_i, curr_j), 0)`, the matcher used when
/// the MLP is ablated.
pub fn cosine_scores_on_tape(tape: &mut Tape, prev: Var, curr: Var) -> Var {
    let m = tape.shape(prev).0;
    let n = tape.shape(curr).0;
    if m == 0 || n == 0 {
        return tape.zeros(m, n);
    }
    let cos = cosine_on_tape(tape, prev, curr);
    tape.relu(cos)
}

/// Row-wise cosine similarity matrix between two token sets.
pub fn cosine_on_tape(tape: &mut Tape, a: Var, b: Var) -> Var {
    let an = tape.row_normalize(a, 1e-12);
    let bn = tape.row_normalize(b, 1e-12);
    let bt = tape.transpose(bn);
    tape.matmul(an, bt)
}

/// Pairwise match probabilities, `m x n` (rows previous, columns current).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchProbabilities(pub Array2<f64>);

impl MatchProbabilities {
    pub fn new(p: Array2<f64>) -> Result<Self> {
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("match probabilities must lie in [0, 1]".into()));
        }
        Ok(Self(p))
    }

    pub fn m(&self) -> usize {
        self.0.nrows()
    }

    pub fn n(&self) -> usize {
        self.0.ncols()
    }
}

pub fn pairwise_scores(prev: &Array2<f64>, curr: &Array2<f64>, mlp: &MlpParams) -> Result<MatchProbabilities> {
    if prev.ncols() != curr.ncols() {
        return Err(Error::Shape(format!(
            "token widths differ: {} vs {}",
            prev.ncols(),
            curr.ncols()
        )));
    }
    let mut tape = Tape::new();
    let bound = mlp.map(&mut |a| tape.leaf(a.clone()));
    let p = tape.leaf(prev.clone());
    let c = tape.leaf(curr.clone());
    let out = pairwise_scores_on_tape(&mut tape, &bound, p, c);
    Ok(MatchProbabilities(tape.value(out).clone()))
}

/// Binary matching matrix `M`, `n x m` (rows current, columns previous).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchMatrix {
    pub entries: Array2<u8>,
    pub k: usize,
}

impl MatchMatrix {
    pub fn row_sums(&self) -> Vec<usize> {
        self.entries.rows().into_iter().map(|r| r.iter().map(|&v| v as usize).sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<usize> {
        self.entries
            .columns()
            .into_iter()
            .map(|c| c.iter().map(|&v| v as usize).sum())
            .collect()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.entries
            .indexed_iter()
            .filter(|(_, &v)| v == 1)
            .map(|((j, i), _)| (i, j))
            .collect()
    }
}

/// Keeps `p ≥ tau`, at most the `k` largest per current pedestrian, ties to
/// the lower previous index.
pub fn decode_matches(p: &MatchProbabilities, tau: f64, k: usize) -> MatchMatrix {
    let (m, n) = p.0.dim();
    let mut entries = Array2::zeros((n, m));
    for j in 0..n {
        let mut cand: Vec<usize> = (0..m).filter(|&i| p.0[[i, j]] >= tau).collect();
        cand.sort_by(|&a, &b| p.0[[b, j]].total_cmp(&p.0[[a, j]]).then(a.cmp(&b)));
        for &i in cand.iter().take(k) {
            entries[[j, i]] = 1;
        }
    }
    MatchMatrix { entries, k }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    O2O,
    O2M,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConstraintReport {
    pub satisfied: bool,
    /// `(current index, row sum)` for every violated row bound.
    pub row_violations: Vec<(usize, usize)>,
    /// `(previous index, column sum)` for every violated column bound.
    pub col_violations: Vec<(usize, usize)>,
}

/// O2O: `M·1 ≤ 1` and `Mᵀ·1 ≤ 1`. O2M: `M·1 ≤ k`.
pub fn check_constraints(mm: &MatchMatrix, mode: MatchMode, k: usize) -> ConstraintReport {
    let row_bound = match mode {
        MatchMode::O2O => 1,
        MatchMode::O2M => k,
    };
    let row_violations: Vec<_> = mm
        .row_sums()
        .into_iter()
        .enumerate()
        .filter(|&(_, s)| s > row_bound)
        .collect();
    let col_violations: Vec<_> = match mode {
        MatchMode::O2O => mm
            .col_sums()
            .into_iter()
            .enumerate()
            .filter(|&(_, s)| s > 1)
            .collect(),
        MatchMode::O2M => Vec::new(),
    };
    ConstraintReport {
        satisfied: row_violations.is_empty() && col_violations.is_empty(),
        row_violations,
        col_violations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    /// `N − Σ round(p)` over all pairs, clamped at zero.
    Literal,
    /// Counts distinct matched pedestrians on each side.
    Dedup,
}

impl std::str::FromStr for CountMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(CountMode::Literal),
            "dedup" => Ok(CountMode::Dedup),
            other => Err(Error::Config(format!("unknown count mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlowCounts {
    pub inflow: usize,
    pub outflow: usize,
    /// Matched current pedestrians (dedup) or the rounded pair sum (literal).
    pub shared: usize,
    /// Matched previous pedestrians (dedup) or the rounded pair sum (literal).
    pub shared_prev: usize,
    pub mode: CountMode,
}

/// Round half up: `p ≥ 0.5` counts as one.
pub fn round_half_up(p: f64) -> usize {
    (p + 0.5).floor().max(0.0) as usize
}

pub fn count_flows(p: &MatchProbabilities, mode: CountMode, tau: f64) -> FlowCounts {
    let (m, n) = p.0.dim();
    match mode {
        CountMode::Literal => {
            let shared: usize = p.0.iter().map(|&v| round_half_up(v)).sum();
            FlowCounts {
                inflow: n.saturating_sub(shared),
                outflow: m.saturating_sub(shared),
                shared,
                shared_prev: shared,
                mode,
            }
        }
        CountMode::Dedup => {
            let shared = (0..n)
                .filter(|&j| (0..m).any(|i| p.0[[i, j]] >= tau))
                .count();
            let shared_prev = (0..m)
                .filter(|&i| (0..n).any(|j| p.0[[i, j]] >= tau))
                .count();
            FlowCounts {
                inflow: n - shared,
                outflow: m - shared_prev,
                shared,
                shared_prev,
                mode,
            }
        }
    }
}

/// `N_total = N_0 + Σ inflows`.
pub fn aggregate_video(n0: usize, inflows: &[usize]) -> usize {
    n0 + inflows.iter().sum::<usize>()
}

/// Per-pair record as exported to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair: [f64; 2],
    pub inflow: usize,
    pub outflow: usize,
    pub shared: usize,
    #[serde(rename = "P_shape")]
    pub p_shape: [usize; 2],
}
