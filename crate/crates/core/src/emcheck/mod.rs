//! Numeric checks of the EM reading of the method: the restricted E-step,
//! the Jensen lower bound on the likelihood, transition-matrix column sums,
//! the vMF alignment identity and the cosine/distance identity.

mod vmf;

pub use vmf::{
    ln_bessel_i_half, ln_gamma_half, vmf_log_density, vmf_log_normalizer, vmf_sphere_integral_d3, VmfParams,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::datagen::{circulant_transition, uniform_transition, TransitionMatrix};
use crate::numerics::{dot, Tensor};
use crate::par::{map_range, Exec};
use crate::refinement::CandidateSet;

#[derive(Debug, Error, PartialEq)]
pub enum EmCheckError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

const UNIT_TOL: f64 = 1e-9;

fn require_unit(v: &[f64], what: &str) -> Result<(), EmCheckError> {
    let n = dot(v, v).sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(EmCheckError::Precondition(format!("{what} has norm {n}")));
    }
    Ok(())
}

/// One-hot at the most probable class inside `set`; lowest index on ties.
pub fn estep_assign(probs: &[f64], set: CandidateSet) -> Vec<f64> {
    let mut best: Option<usize> = None;
    for c in set.iter().filter(|&c| c < probs.len()) {
        if best.is_none_or(|b| probs[c] > probs[b]) {
            best = Some(c);
        }
    }
    let mut out = vec![0.0; probs.len()];
    out[best.expect("candidate set must be non-empty")] = 1.0;
    out
}

/// Common column sum `ψ` of `t`, or `None` when columns disagree by more
/// than 1e-10.
pub fn check_column_sum_psi(t: &TransitionMatrix) -> Option<f64> {
    let c = t.num_classes();
    let psi = t.column_sum(0);
    (0..c).all(|u| (t.column_sum(u) - psi).abs() <= 1e-10).then_some(psi)
}

/// Hard cluster assignment with its per-cluster means.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub assignment: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    pub counts: Vec<usize>,
    /// Unnormalised mean embedding `δ_c` per cluster (zero when empty).
    pub centers: Tensor,
}

impl ClusterAssignment {
    pub fn new(embeddings: &Tensor, assignment: Vec<usize>, num_clusters: usize) -> Result<Self, EmCheckError> {
        if assignment.len() != embeddings.rows() {
            return Err(EmCheckError::Param("one assignment per embedding row".into()));
        }
        let e = embeddings.cols();
        let mut members = vec![Vec::new(); num_clusters];
        for (i, &c) in assignment.iter().enumerate() {
            if c >= num_clusters {
                return Err(EmCheckError::Param(format!("cluster {c} out of range")));
            }
            members[c].push(i);
        }
        let counts: Vec<usize> = members.iter().map(Vec::len).collect();
        let mut centers = Tensor::zeros(&[num_clusters, e]);
        for (c, m) in members.iter().enumerate() {
            if m.is_empty() {
                continue;
            }
            let row = centers.row_mut(c);
            for &i in m {
                for (r, v) in row.iter_mut().zip(embeddings.row(i)) {
                    *r += v;
                }
            }
            row.iter_mut().for_each(|r| *r /= m.len() as f64);
        }
        Ok(Self { assignment, members, counts, centers })
    }

    /// Clusters from the E-step on `probs` restricted to each candidate set.
    pub fn from_estep(embeddings: &Tensor, probs: &Tensor, sets: &[CandidateSet]) -> Result<Self, EmCheckError> {
        let assignment = (0..probs.rows())
            .map(|i| {
                let one_hot = estep_assign(probs.row(i), sets[i]);
                one_hot.iter().position(|&v| v == 1.0).unwrap()
            })
            .collect();
        Self::new(embeddings, assignment, probs.cols())
    }

    pub fn one_hot(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.counts.len()];
        v[self.assignment[i]] = 1.0;
        v
    }
}

/// Largest violation of
/// `Σ_c Σ_{x∈H(c)} ‖g(x) − δ_c‖² = Σ_c (n_c − n_c‖δ_c‖²)` and of
/// `Σ_c (n_c/n)‖δ_c‖ ≥ Σ_c (n_c/n)‖δ_c‖²`.
pub fn check_alignment_identity(embeddings: &Tensor, a: &ClusterAssignment) -> Result<f64, EmCheckError> {
    for i in 0..embeddings.rows() {
        require_unit(embeddings.row(i), &format!("embedding {i}"))?;
    }
    let n = embeddings.rows() as f64;
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    let mut norm_mean = 0.0;
    let mut sq_mean = 0.0;
    for (c, m) in a.members.iter().enumerate() {
        let delta = a.centers.row(c);
        for &i in m {
            lhs += embeddings.row(i).iter().zip(delta).map(|(g, d)| (g - d).powi(2)).sum::<f64>();
        }
        let nc = a.counts[c] as f64;
        let sq = dot(delta, delta);
        rhs += nc - nc * sq;
        norm_mean += nc / n * sq.sqrt();
        sq_mean += nc / n * sq;
    }
    Ok((lhs - rhs).abs().max(sq_mean - norm_mean).max(0.0))
}

/// `|−q·p/τ − (‖q − p‖² − 2)/(2τ)|` for unit `q`, `p`.
pub fn check_cosine_identity(q: &[f64], p: &[f64], tau: f64) -> Result<f64, EmCheckError> {
    require_unit(q, "q")?;
    require_unit(p, "p")?;
    if q.len() != p.len() {
        return Err(EmCheckError::Param("q and p differ in length".into()));
    }
    let lhs = -dot(q, p) / tau;
    let dist: f64 = q.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((lhs - (dist - 2.0) / (2.0 * tau)).abs())
}

/// Tabular joint `p(x, y) ∝ exp(θ_{x,y})` over `num_x × C` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub num_x: usize,
    pub num_classes: usize,
    pub joint: Vec<f64>,
}

impl ToyModel {
    pub fn from_logits(num_x: usize, num_classes: usize, logits: &[f64]) -> Result<Self, EmCheckError> {
        if num_x == 0 || num_x > 20 || num_classes == 0 || num_classes > 5 {
            return Err(EmCheckError::Param("toy model needs ≤ 20 states and ≤ 5 classes".into()));
        }
        if logits.len() != num_x * num_classes {
            return Err(EmCheckError::Param("one logit per (x, y) cell".into()));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut joint: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = joint.iter().sum();
        joint.iter_mut().for_each(|p| *p /= z);
        Ok(Self { num_x, num_classes, joint })
    }

    pub fn p(&self, x: usize, y: usize) -> f64 {
        self.joint[x * self.num_classes + y]
    }

    pub fn posterior(&self, x: usize) -> Vec<f64> {
        let row = &self.joint[x * self.num_classes..(x + 1) * self.num_classes];
        let z: f64 = row.iter().sum();
        row.iter().map(|p| p / z).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// Both sides of the Jensen step by exact enumeration, summed over the
/// observed states `xs` with per-instance distributions `q`:
/// `Σ_i log Σ_y a_i(y) ≥ Σ_i Σ_y q_i(y) log(a_i(y)/q_i(y))`, where
/// `a_i(y) = (Σ_u T[y][u])·p(x_i, y)`.
pub fn check_likelihood_bound(
    toy: &ToyModel,
    t: &TransitionMatrix,
    xs: &[usize],
    q: &[Vec<f64>],
) -> Result<BoundCheck, EmCheckError> {
    if t.num_classes() != toy.num_classes || xs.len() != q.len() {
        return Err(EmCheckError::Param("toy model, matrix and q disagree in shape".into()));
    }
    let c = toy.num_classes;
    let psi: Vec<f64> = (0..c).map(|y| t.row_sum(y)).collect();
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for (&x, qi) in xs.iter().zip(q) {
        if x >= toy.num_x || qi.len() != c {
            return Err(EmCheckError::Param("state or q length out of range".into()));
        }
        let a: Vec<f64> = (0..c).map(|y| psi[y] * toy.p(x, y)).collect();
        lhs += a.iter().sum::<f64>().ln();
        rhs += (0..c).filter(|&y| qi[y] > 0.0).map(|y| qi[y] * (a[y] / qi[y]).ln()).sum::<f64>();
    }
    Ok(BoundCheck { lhs, rhs, gap: lhs - rhs })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

pub fn random_unit<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R, c: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..c).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn cfg_rng(seed: u64, tag: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag.wrapping_mul(1 << 32) ^ k as u64);
    rng
}

fn max_of(xs: Vec<Result<f64, EmCheckError>>) -> Result<f64, EmCheckError> {
    xs.into_iter().try_fold(0.0f64, |m, v| Ok(m.max(v?)))
}

/// Run every check on `configs` random configurations and collect
/// pass/fail with the worst observed discrepancy.
pub fn run_em_checks(exec: Exec, seed: u64, configs: usize) -> Result<EmReport, EmCheckError> {
    let mut checks = Vec::new();
    let mut push = |name: &str, value: f64, tolerance: f64, passed: bool| {
        checks.push(CheckResult { name: name.into(), value, tolerance, passed });
    };

    let estep_fail = map_range(exec, configs, |k| {
        let mut rng = cfg_rng(seed, 1, k);
        let c = rng.random_range(2..=10);
        let probs = random_simplex(&mut rng, c);
        let mut set = CandidateSet::singleton(rng.random_range(0..c));
        for j in 0..c {
            if rng.random::<f64>() < 0.4 {
                set.insert(j);
            }
        }
        let hot = estep_assign(&probs, set);
        let pick = hot.iter().position(|&v| v == 1.0).unwrap();
        let best = set.iter().map(|j| probs[j]).fold(f64::NEG_INFINITY, f64::max);
        let cubed: Vec<f64> = probs.iter().map(|p| p.powi(3)).collect();
        let ok = set.contains(pick) && probs[pick] == best && estep_assign(&cubed, set) == hot;
        u8::from(!ok)
    });
    let fails = estep_fail.iter().map(|&f| f as f64).sum::<f64>();
    push("estep_restricted_argmax", fails, 0.0, fails == 0.0);

    let cos = max_of(map_range(exec, configs, |k| {
        let mut rng = cfg_rng(seed, 2, k);
        let d = rng.random_range(2..=64);
        check_cosine_identity(&random_unit(&mut rng, d), &random_unit(&mut rng, d), 0.3)
    }))?;
    push("cosine_identity", cos, 1e-10, cos < 1e-10);

    let align = max_of(map_range(exec, configs, |k| {
        let mut rng = cfg_rng(seed, 3, k);
        let d = rng.random_range(2..=32);
        let n = rng.random_range(1..=200);
        let clusters = rng.random_range(1..=8);
        let data: Vec<f64> = (0..n).flat_map(|_| random_unit(&mut rng, d)).collect();
        let emb = Tensor::matrix(n, d, data);
        let assignment = (0..n).map(|_| rng.random_range(0..clusters)).collect();
        check_alignment_identity(&emb, &ClusterAssignment::new(&emb, assignment, clusters)?)
    }))?;
    push("alignment_identity", align, 1e-10, align < 1e-10);

    let draws = map_range(exec, configs.clamp(1, 100), |k| -> Result<(f64, f64), EmCheckError> {
        let mut rng = cfg_rng(seed, 4, k);
        let (toy, t, xs) = random_toy(&mut rng)?;
        let q: Vec<Vec<f64>> = xs.iter().map(|_| random_simplex(&mut rng, toy.num_classes)).collect();
        let post: Vec<Vec<f64>> = xs.iter().map(|&x| toy.posterior(x)).collect();
        let random_gap = check_likelihood_bound(&toy, &t, &xs, &q)?.gap;
        let exact_gap = check_likelihood_bound(&toy, &t, &xs, &post)?.gap;
        Ok((random_gap, exact_gap.abs()))
    });
    let (mut min_gap, mut max_exact) = (f64::INFINITY, 0.0f64);
    for d in draws {
        let (g, e) = d?;
        min_gap = min_gap.min(g);
        max_exact = max_exact.max(e);
    }
    push("jensen_gap_nonnegative", min_gap, -1e-12, min_gap >= -1e-12);
    push("jensen_gap_at_posterior", max_exact, 1e-10, max_exact < 1e-10);

    let mut rng = cfg_rng(seed, 5, 0);
    let uni = uniform_transition(5, 0.4).map_err(|e| EmCheckError::Param(e.to_string()))?;
    let circ = circulant_transition(&random_simplex(&mut rng, 5)).map_err(|e| EmCheckError::Param(e.to_string()))?;
    let psi_u = check_column_sum_psi(&uni);
    let psi_c = check_column_sum_psi(&circ);
    push("psi_uniform", psi_u.unwrap_or(f64::NAN), 1e-10, psi_u.is_some_and(|p| (p - 1.0).abs() < 1e-10));
    push("psi_circulant", psi_c.unwrap_or(f64::NAN), 1e-10, psi_c.is_some_and(|p| (p - 1.0).abs() < 1e-10));

    let mean = {
        let v = [0.3, -0.5, 0.8];
        let n = dot(&v, &v).sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let integral = vmf_sphere_integral_d3(&VmfParams::new(mean, 2.0)?, 2000, 256)?;
    push("vmf_d3_normalization", (integral - 1.0).abs(), 1e-6, (integral - 1.0).abs() < 1e-6);

    let passed = checks.iter().all(|c| c.passed);
    Ok(EmReport { seed, passed, checks })
}

/// Random tabular model, transition matrix with constant sums, and states.
pub fn random_toy<R: Rng + ?Sized>(rng: &mut R) -> Result<(ToyModel, TransitionMatrix, Vec<usize>), EmCheckError> {
    let num_x = rng.random_range(2..=20);
    let c = rng.random_range(2..=5);
    let logits: Vec<f64> = (0..num_x * c)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            2.0 * z
        })
        .collect();
    let toy = ToyModel::from_logits(num_x, c, &logits)?;
    let t = if rng.random::<bool>() {
        uniform_transition(c, rng.random_range(0.0..0.9))
    } else {
        circulant_transition(&random_simplex(rng, c))
    }
    .map_err(|e| EmCheckError::Param(e.to_string()))?;
    let xs = (0..rng.random_range(1..=30)).map(|_| rng.random_range(0..num_x)).collect();
    Ok((toy, t, xs))
}
