use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::transition::{corrupt_label, uniform_transition};
use super::DatagenError;
use crate::refinement::{CandidateSet, MAX_CLASSES};
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Isotropic Gaussian blobs around simplex-placed means.
    Blobs,
    /// Concentric shells: class `c` lives near radius `(c + 1)·separation`.
    Annuli,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub n: usize,
    pub blob_separation: f64,
    pub blob_std: f64,
    /// Partial rate: probability that each negative label joins the set.
    pub eta: f64,
    /// Unreliable rate: probability that the recorded label is corrupted.
    pub mu: f64,
    pub seed: u64,
    pub mode: FeatureMode,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            dim: 20,
            n: 3000,
            blob_separation: 3.0,
            blob_std: 1.0,
            eta: 0.3,
            mu: 0.3,
            seed: 0,
            mode: FeatureMode::Blobs,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::Param(m));
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return bad(format!("num_classes = {} outside [2, 64]", self.num_classes));
        }
        if self.n < 6 {
            return bad(format!("n = {} too small for a 4:1:1 split", self.n));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.eta) {
            return bad(format!("eta = {} outside [0, 1)", self.eta));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return bad(format!("mu = {} outside [0, 1)", self.mu));
        }
        if !self.blob_separation.is_finite()
            || self.blob_separation <= 0.0
            || !self.blob_std.is_finite()
            || self.blob_std < 0.0
        {
            return bad("blob_separation must be > 0 and blob_std ≥ 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Features (stored at `f32` precision), candidate sets and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub features: Vec<f64>,
    pub candidate_sets: Vec<CandidateSet>,
    pub true_labels: Vec<usize>,
    pub corrupted_labels: Vec<usize>,
    pub split_tags: Vec<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Fraction of instances whose true label is in the candidate set.
    pub coverage: f64,
    pub mean_set_size: f64,
    /// Fraction of instances whose recorded label differs from the truth.
    pub corruption_rate: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split_tags[i] == split).collect()
    }

    pub fn check_invariants(&self) -> Result<(), DatagenError> {
        let n = self.len();
        if self.features.len() != n * self.dim
            || self.candidate_sets.len() != n
            || self.corrupted_labels.len() != n
            || self.split_tags.len() != n
        {
            return Err(DatagenError::Format("inconsistent dataset lengths".into()));
        }
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return Err(DatagenError::Format(format!("class count {} outside [2, 64]", self.num_classes)));
        }
        let outside = CandidateSet::full(self.num_classes);
        for i in 0..n {
            let s = self.candidate_sets[i];
            if s.is_empty() || !s.is_subset_of(outside) {
                return Err(DatagenError::Format(format!("bad candidate set at {i}")));
            }
            if !s.contains(self.corrupted_labels[i]) {
                return Err(DatagenError::Format(format!("candidate set at {i} misses its recorded label")));
            }
            if self.true_labels[i] >= self.num_classes {
                return Err(DatagenError::Format(format!("label out of range at {i}")));
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> DatasetStats {
        let n = self.len();
        let covered = (0..n).filter(|&i| self.candidate_sets[i].contains(self.true_labels[i])).count();
        let sizes: usize = self.candidate_sets.iter().map(|s| s.len()).sum();
        let corrupted = (0..n).filter(|&i| self.corrupted_labels[i] != self.true_labels[i]).count();
        let count = |s| self.split_tags.iter().filter(|&&t| t == s).count();
        DatasetStats {
            n,
            train: count(Split::Train),
            val: count(Split::Val),
            test: count(Split::Test),
            coverage: covered as f64 / n as f64,
            mean_set_size: sizes as f64 / n as f64,
            corruption_rate: corrupted as f64 / n as f64,
        }
    }
}

/// The recorded label plus each other class independently with probability `eta`.
pub fn generate_candidate_set<R: Rng + ?Sized>(
    y_hat: usize,
    eta: f64,
    num_classes: usize,
    rng: &mut R,
) -> CandidateSet {
    let mut s = CandidateSet::singleton(y_hat);
    for c in 0..num_classes {
        if c != y_hat && rng.random::<f64>() < eta {
            s.insert(c);
        }
    }
    s
}

/// `(train, val, test)` sizes for a 4:1:1 split.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let sixth = (n as f64 / 6.0).round() as usize;
    (n - 2 * sixth, sixth, sixth)
}

/// Regular simplex vertices with pairwise distance `separation`, embedded in
/// the first `C − 1` coordinates.
fn simplex_means(c: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    // Centered basis vectors e_k − 1/C share pairwise distance √2.
    let centered: Vec<Vec<f64>> =
        (0..c).map(|k| (0..c).map(|j| if j == k { 1.0 } else { 0.0 } - 1.0 / c as f64).collect()).collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in centered.iter().take(c - 1) {
        let mut w = v.clone();
        for b in &basis {
            let p: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
            w.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w.iter_mut().for_each(|x| *x /= n);
        basis.push(w);
    }
    let scale = separation / 2f64.sqrt();
    centered
        .iter()
        .map(|v| {
            let mut m = vec![0.0; dim];
            for (k, b) in basis.iter().enumerate() {
                m[k] = scale * v.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            }
            m
        })
        .collect()
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn class_means<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Vec<Vec<f64>> {
    if cfg.num_classes <= cfg.dim + 1 {
        simplex_means(cfg.num_classes, cfg.dim, cfg.blob_separation)
    } else {
        let scale = cfg.blob_separation / 2f64.sqrt();
        (0..cfg.num_classes).map(|_| random_unit(cfg.dim, rng).into_iter().map(|x| x * scale).collect()).collect()
    }
}

/// Generate a labelled dataset, corrupt it and assign a shuffled 4:1:1 split.
pub fn make_dataset(cfg: &SynthConfig) -> Result<Dataset, DatagenError> {
    cfg.validate()?;
    let (c, d, n) = (cfg.num_classes, cfg.dim, cfg.n);
    let mut gen = stream(cfg.seed, Stream::Generation);
    let transition = uniform_transition(c, cfg.mu)?;

    let means = match cfg.mode {
        FeatureMode::Blobs => class_means(cfg, &mut gen),
        FeatureMode::Annuli => Vec::new(),
    };

    let mut features = Vec::with_capacity(n * d);
    let mut true_labels = Vec::with_capacity(n);
    let mut corrupted_labels = Vec::with_capacity(n);
    let mut candidate_sets = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % c;
        match cfg.mode {
            FeatureMode::Blobs => {
                for &m in &means[y] {
                    let z: f64 = StandardNormal.sample(&mut gen);
                    features.push((m + cfg.blob_std * z) as f32 as f64);
                }
            }
            FeatureMode::Annuli => {
                let dir = random_unit(d, &mut gen);
                let z: f64 = StandardNormal.sample(&mut gen);
                let r = (y + 1) as f64 * cfg.blob_separation + cfg.blob_std * z;
                features.extend(dir.into_iter().map(|u| (u * r) as f32 as f64));
            }
        }
        let y_hat = corrupt_label(y, &transition, &mut gen);
        candidate_sets.push(generate_candidate_set(y_hat, cfg.eta, c, &mut gen));
        true_labels.push(y);
        corrupted_labels.push(y_hat);
    }

    let (n_train, n_val, _) = split_sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(cfg.seed, Stream::Shuffle));
    let mut split_tags = vec![Split::Test; n];
    for (pos, &i) in order.iter().enumerate() {
        split_tags[i] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    Ok(Dataset { dim: d, num_classes: c, features, candidate_sets, true_labels, corrupted_labels, split_tags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_flip_gives_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for y in 0..6 {
            assert_eq!(generate_candidate_set(y, 0.0, 6, &mut rng), CandidateSet::singleton(y));
        }
    }

    #[test]
    fn mean_set_size_matches_partial_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, eta, n) = (10usize, 0.3, 100_000usize);
        let sizes: Vec<usize> = (0..n).map(|_| generate_candidate_set(3, eta, c, &mut rng).len()).collect();
        let mean = sizes.iter().sum::<usize>() as f64 / n as f64;
        let var = (c - 1) as f64 * eta * (1.0 - eta);
        assert!((mean - 3.7).abs() < 3.0 * (var / n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn clean_config_gives_true_singletons() {
        let cfg = SynthConfig { eta: 0.0, mu: 0.0, n: 300, ..SynthConfig::default() };
        let ds = make_dataset(&cfg).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.candidate_sets[i], CandidateSet::singleton(ds.true_labels[i]));
        }
        assert_eq!(ds.stats().coverage, 1.0);
    }

    #[test]
    fn deterministic_and_split_sizes() {
        let cfg = SynthConfig { num_classes: 5, n: 3000, ..SynthConfig::default() };
        let a = make_dataset(&cfg).unwrap();
        let b = make_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let s = a.stats();
        assert_eq!((s.train, s.val, s.test), (2000, 500, 500));
        a.check_invariants().unwrap();
    }

    #[test]
    fn split_rounding_within_one() {
        for n in 6..200 {
            let (tr, va, te) = split_sizes(n);
            assert_eq!(tr + va + te, n);
            let exact = n as f64 / 6.0;
            assert!((va as f64 - exact).abs() <= 1.0);
            assert!((tr as f64 - 4.0 * exact).abs() <= 1.0);
        }
    }

    #[test]
    fn simplex_means_are_equidistant() {
        for c in 2..=6 {
            let means = simplex_means(c, c - 1, 3.0);
            for a in 0..c {
                for b in a + 1..c {
                    let dist: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                    assert!((dist - 3.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = SynthConfig::default();
        for cfg in [
            SynthConfig { num_classes: 1, ..base.clone() },
            SynthConfig { num_classes: 65, ..base.clone() },
            SynthConfig { n: 5, ..base.clone() },
            SynthConfig { eta: 1.0, ..base.clone() },
            SynthConfig { mu: -0.5, ..base.clone() },
        ] {
            assert!(matches!(make_dataset(&cfg), Err(DatagenError::Param(_))));
        }
    }

    #[test]
    fn annuli_mode_radii() {
        let cfg = SynthConfig {
            mode: FeatureMode::Annuli,
            blob_std: 0.0,
            n: 60,
            num_classes: 3,
            dim: 4,
            ..SynthConfig::default()
        };
        let ds = make_dataset(&cfg).unwrap();
        for i in 0..ds.len() {
            let r = ds.feature(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let want = (ds.true_labels[i] + 1) as f64 * cfg.blob_separation;
            assert!((r - want).abs() < 1e-5);
        }
    }
}
