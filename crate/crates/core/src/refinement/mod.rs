//! Progressive label refinement: KNN soft labels, candidate-set correction
//! and consistency-based disambiguation.

mod candidate;

pub use candidate::{CandidateSet, MAX_CLASSES};

use std::cmp::Ordering;
use std::io::Write;

use crate::losses::LabelDistribution;
use crate::numerics::{dot, Tensor, EPS_NORM};
use crate::par::{map_range, Exec};

/// Latest clean-view embedding of every training instance.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    pub embeddings: Tensor,
    pub epoch: usize,
}

impl EmbeddingBank {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Soft pseudo-label `π` (a simplex vector).
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel(pub Vec<f64>);

/// Indices of the `k` rows with the largest inner product with row `i`
/// (row `i` excluded), best first; ties go to the lower index.
pub fn nearest_neighbors(bank: &EmbeddingBank, i: usize, k: usize) -> Vec<(usize, f64)> {
    let q = bank.embeddings.row(i);
    let mut sims: Vec<(usize, f64)> =
        (0..bank.len()).filter(|&j| j != i).map(|j| (j, dot(q, bank.embeddings.row(j)))).collect();
    let order =
        |a: &(usize, f64), b: &(usize, f64)| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0));
    let k = k.min(sims.len());
    if k == 0 {
        return Vec::new();
    }
    if k < sims.len() {
        sims.select_nth_unstable_by(k - 1, order);
        sims.truncate(k);
    }
    sims.sort_by(order);
    sims
}

/// `π_i = ½·probs_i + ½·Σ_j w_ij·l_j` over the `k` nearest neighbours, with
/// `w_ij` a softmax of the neighbour inner products divided by `tau`.
pub fn knn_soft_label(
    i: usize,
    bank: &EmbeddingBank,
    labels: &[LabelDistribution],
    probs_i: &[f64],
    k: usize,
    tau: f64,
) -> SoftLabel {
    let available = bank.len().saturating_sub(1);
    let k = if k > available {
        log::warn!("K = {k} exceeds n − 1 = {available}; clamping");
        available
    } else {
        k
    };
    let neighbors = nearest_neighbors(bank, i, k);
    let mut pi: Vec<f64> = probs_i.iter().map(|p| 0.5 * p).collect();
    if neighbors.is_empty() {
        // No neighbour vote: the classifier term carries all the mass.
        pi.iter_mut().for_each(|v| *v *= 2.0);
        return SoftLabel(pi);
    }
    let max = neighbors[0].1 / tau;
    let raw: Vec<f64> = neighbors.iter().map(|&(_, s)| (s / tau - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    for (&(j, _), r) in neighbors.iter().zip(&raw) {
        let w = 0.5 * r / total;
        for (p, l) in pi.iter_mut().zip(&labels[j].0) {
            *p += w * l;
        }
    }
    SoftLabel(pi)
}

/// [`knn_soft_label`] for every bank row. `probs` is `n × C`.
pub fn knn_soft_labels(
    exec: Exec,
    bank: &EmbeddingBank,
    labels: &[LabelDistribution],
    probs: &Tensor,
    k: usize,
    tau: f64,
) -> Vec<SoftLabel> {
    let available = bank.len().saturating_sub(1);
    if k > available {
        log::warn!("K = {k} exceeds n − 1 = {available}; clamping");
    }
    let k = k.min(available);
    map_range(exec, bank.len(), |i| knn_soft_label(i, bank, labels, probs.row(i), k, tau))
}

/// Add `argmax π` to `S` when it is missing and its mass exceeds `phi`.
pub fn correct_candidate_set(pi: &SoftLabel, set: CandidateSet, phi: f64) -> CandidateSet {
    let c = crate::model::argmax(&pi.0);
    if !set.contains(c) && pi.0[c] > phi {
        set.with(c)
    } else {
        set
    }
}

/// `l_c ∝ √(p_w,c · p_s,c)` on `S`, zero elsewhere. Falls back to uniform
/// over `S` when the normaliser vanishes.
pub fn disambiguate(p_weak: &[f64], p_strong: &[f64], set: CandidateSet) -> LabelDistribution {
    let c = p_weak.len();
    let mut l = vec![0.0; c];
    let mut total = 0.0;
    for j in set.iter().filter(|&j| j < c) {
        let v = (p_weak[j] * p_strong[j]).sqrt();
        l[j] = v;
        total += v;
    }
    if !total.is_finite() || total <= EPS_NORM {
        return LabelDistribution::uniform_over(set, c);
    }
    l.iter_mut().for_each(|v| *v /= total);
    LabelDistribution(l)
}

/// Uniform distribution over each candidate set.
pub fn init_label_distributions(sets: &[CandidateSet], num_classes: usize) -> Vec<LabelDistribution> {
    sets.iter().map(|&s| LabelDistribution::uniform_over(s, num_classes)).collect()
}

/// One row per instance: `instance_id,set_size,true_label_in_set,entropy`.
pub fn write_refinement_csv<W: Write>(
    mut w: W,
    instance_ids: &[usize],
    sets: &[CandidateSet],
    true_labels: &[usize],
    labels: &[LabelDistribution],
) -> std::io::Result<()> {
    writeln!(w, "instance_id,set_size,true_label_in_set,entropy")?;
    for (k, &id) in instance_ids.iter().enumerate() {
        writeln!(w, "{id},{},{},{}", sets[k].len(), u8::from(sets[k].contains(true_labels[k])), labels[k].entropy())?;
    }
    Ok(())
}
