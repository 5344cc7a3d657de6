use rand::Rng;

use super::DatagenError;

/// Label-noise transition matrix: `get(v, u)` is the probability that a
/// ground-truth label `u` is recorded as `v`. Stored row-major by `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    num_classes: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    /// Build from rows `rows[v][u]`. Entries must lie in `[0, 1]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DatagenError> {
        let c = rows.len();
        if c == 0 || rows.iter().any(|r| r.len() != c) {
            return Err(DatagenError::Param("transition matrix must be square".into()));
        }
        let entries: Vec<f64> = rows.iter().flatten().copied().collect();
        if entries.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DatagenError::Param("transition entries must lie in [0, 1]".into()));
        }
        Ok(Self { num_classes: c, entries })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, v: usize, u: usize) -> f64 {
        self.entries[v * self.num_classes + u]
    }

    pub fn column_sum(&self, u: usize) -> f64 {
        (0..self.num_classes).map(|v| self.get(v, u)).sum()
    }

    pub fn row_sum(&self, v: usize) -> f64 {
        (0..self.num_classes).map(|u| self.get(v, u)).sum()
    }
}

/// Keep the label with probability `1 − mu`, otherwise move it uniformly to
/// one of the other `C − 1` classes.
pub fn uniform_transition(num_classes: usize, mu: f64) -> Result<TransitionMatrix, DatagenError> {
    if num_classes < 2 {
        return Err(DatagenError::Param("need at least two classes".into()));
    }
    if !(0.0..1.0).contains(&mu) {
        return Err(DatagenError::Param(format!("mu = {mu} outside [0, 1)")));
    }
    let off = mu / (num_classes - 1) as f64;
    let rows: Vec<Vec<f64>> =
        (0..num_classes).map(|v| (0..num_classes).map(|u| if u == v { 1.0 - mu } else { off }).collect()).collect();
    TransitionMatrix::from_rows(&rows)
}

/// Circulant matrix whose row `r` is `q` cyclically shifted right by `r`,
/// so `q[0]` sits on the diagonal and `q = (1−μ, μ/(C−1), …)` reproduces
/// [`uniform_transition`].
pub fn circulant_transition(q: &[f64]) -> Result<TransitionMatrix, DatagenError> {
    let c = q.len();
    if c == 0 || q.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(DatagenError::Param("q must be a non-negative vector".into()));
    }
    if (q.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatagenError::Param("q must sum to 1".into()));
    }
    let rows: Vec<Vec<f64>> = (0..c).map(|r| (0..c).map(|u| q[(u + c - r) % c]).collect()).collect();
    TransitionMatrix::from_rows(&rows)
}

/// Draw a recorded label for ground truth `y` from column `y` of `t`.
pub fn corrupt_label<R: Rng + ?Sized>(y: usize, t: &TransitionMatrix, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let c = t.num_classes();
    for v in 0..c {
        acc += t.get(v, y);
        if u < acc {
            return v;
        }
    }
    // Rounding left a sliver above the cumulative sum; take the last
    // class with non-zero mass.
    (0..c).rev().find(|&v| t.get(v, y) > 0.0).unwrap_or(y)
}
