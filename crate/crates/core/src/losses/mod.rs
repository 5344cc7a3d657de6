//! Training objective: the complementary-label supervised term, class
//! prototypes weighted by the dynamic label distribution, the prototypical
//! contrastive loss and its mixup variant, and the consistency term.
//!
//! Every term has a batched tape form (one loss per row) used for training
//! and a single-instance convenience wrapper used in tests and checks.

use crate::model::{classify_tape, encode_tape, ParamVars};
use crate::numerics::{NumericsError, Tape, Tensor, Var, EPS_LOG, EPS_NORM};
use crate::refinement::CandidateSet;

/// Per-instance simplex over the classes, supported on the candidate set.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDistribution(pub Vec<f64>);

impl LabelDistribution {
    pub fn uniform_over(set: CandidateSet, num_classes: usize) -> Self {
        let k = set.len() as f64;
        Self((0..num_classes).map(|c| if set.contains(c) { 1.0 / k } else { 0.0 }).collect())
    }

    pub fn one_hot(c: usize, num_classes: usize) -> Self {
        let mut v = vec![0.0; num_classes];
        v[c] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Support as a candidate set (entries > 0).
    pub fn support(&self) -> CandidateSet {
        CandidateSet::from_classes(
            &self.0.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(c, _)| c).collect::<Vec<_>>(),
        )
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        let s: f64 = self.0.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
        0.0 - s
    }
}

/// Stack label distributions into a `rows × C` matrix.
pub fn label_matrix<'a>(labels: impl IntoIterator<Item = &'a LabelDistribution>, num_classes: usize) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    for l in labels {
        data.extend_from_slice(&l.0);
        rows += 1;
    }
    Tensor::matrix(rows, num_classes, data)
}

/// Unit-norm class prototypes. Rows of classes whose weighted mean
/// vanishes are zero and flagged invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub z: Tensor,
    pub valid: Vec<bool>,
}

impl PrototypeBank {
    pub fn num_classes(&self) -> usize {
        self.valid.len()
    }

    pub fn any_valid(&self) -> bool {
        self.valid.iter().any(|&v| v)
    }

    /// `p = Σ_c z_c · l^c`.
    pub fn weighted(&self, l: &[f64]) -> Vec<f64> {
        let e = self.z.cols();
        let mut p = vec![0.0; e];
        for (c, &w) in l.iter().enumerate() {
            if w != 0.0 {
                for (pv, zv) in p.iter_mut().zip(self.z.row(c)) {
                    *pv += w * zv;
                }
            }
        }
        p
    }
}

/// `z_c = normalize((1/n) Σ_i q_i · l_i^c)` for `n × embed` embeddings.
pub fn compute_prototypes(embeddings: &Tensor, labels: &[LabelDistribution]) -> PrototypeBank {
    let (n, e) = (embeddings.rows(), embeddings.cols());
    let c = labels.first().map_or(0, LabelDistribution::num_classes);
    debug_assert_eq!(labels.len(), n);
    let mut z = Tensor::zeros(&[c, e]);
    for (i, l) in labels.iter().enumerate() {
        let q = embeddings.row(i);
        for (k, &w) in l.0.iter().enumerate() {
            if w != 0.0 {
                for (zv, qv) in z.row_mut(k).iter_mut().zip(q) {
                    *zv += qv * w;
                }
            }
        }
    }
    let inv_n = 1.0 / n.max(1) as f64;
    let mut valid = vec![false; c];
    for (k, ok) in valid.iter_mut().enumerate() {
        let row = z.row_mut(k);
        row.iter_mut().for_each(|v| *v *= inv_n);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < EPS_NORM {
            row.fill(0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
            *ok = true;
        }
    }
    PrototypeBank { z, valid }
}

/// `−Σ_{j∉S} log(1 − p_j)` per row of a `B × C` probability matrix.
pub fn sup_loss_rows(tape: &mut Tape, probs: Var, sets: &[CandidateSet]) -> Result<Var, NumericsError> {
    let c = tape.value(probs).cols();
    let mask: Vec<f64> = sets.iter().flat_map(|s| (0..c).map(move |j| if s.contains(j) { 0.0 } else { 1.0 })).collect();
    let neg = tape.scale(probs, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let logs = tape.log(one_minus);
    let masked = tape.mul_const(logs, Tensor::matrix(sets.len(), c, mask))?;
    let rows = tape.sum_rows(masked);
    Ok(tape.scale(rows, -1.0))
}

/// Prototypical contrastive loss per row: `logsumexp_valid(q·z/τ) − q·p/τ`
/// with `p` the label-weighted prototype. The bank is a constant.
pub fn proto_contrastive_rows(
    tape: &mut Tape,
    q: Var,
    targets: &Tensor,
    bank: &PrototypeBank,
    tau: f64,
) -> Result<Var, NumericsError> {
    let rows = tape.value(q).rows();
    if !bank.any_valid() {
        log::warn!("no valid class prototype; prototypical loss contributes 0");
        let zero = tape.scale(q, 0.0);
        let s = tape.sum_rows(zero);
        return Ok(s);
    }
    if targets.rows() != rows || targets.cols() != bank.num_classes() {
        return Err(NumericsError::Shape(format!(
            "targets {:?} for {rows} rows and {} classes",
            targets.shape(),
            bank.num_classes()
        )));
    }
    let zt = tape.constant(bank.z.transpose());
    let sims = tape.matmul(q, zt)?;
    let logits = tape.scale(sims, 1.0 / tau);
    let lse = tape.logsumexp_rows(logits, Some(bank.valid.clone()))?;
    let weighted = tape.mul_const(logits, targets.clone())?;
    let pos = tape.sum_rows(weighted);
    tape.sub(lse, pos)
}

/// `λ·L_pc(q̃, l_i) + (1 − λ)·L_pc(q̃, l_j)` per row, `q̃` being the
/// embedding of the mixed input.
pub fn mixup_proto_rows(
    tape: &mut Tape,
    q_mixed: Var,
    own: &Tensor,
    partner: &Tensor,
    lambdas: &[f64],
    bank: &PrototypeBank,
    tau: f64,
) -> Result<Var, NumericsError> {
    let a = proto_contrastive_rows(tape, q_mixed, own, bank, tau)?;
    let b = proto_contrastive_rows(tape, q_mixed, partner, bank, tau)?;
    let wa = tape.mul_const(a, Tensor::vector(lambdas.to_vec()))?;
    let wb = tape.mul_const(b, Tensor::vector(lambdas.iter().map(|l| 1.0 - l).collect()))?;
    tape.add(wa, wb)
}

/// `KL(l‖p_w) + KL(l‖p_s)` per row; `l` is a constant target.
pub fn consistency_rows(tape: &mut Tape, targets: &Tensor, p_weak: Var, p_strong: Var) -> Result<Var, NumericsError> {
    let neg_entropy: Vec<f64> = (0..targets.rows())
        .map(|i| targets.row(i).iter().filter(|&&v| v > 0.0).map(|&v| v * v.max(EPS_LOG).ln()).sum::<f64>())
        .collect();
    let cross = |tape: &mut Tape, p: Var| -> Result<Var, NumericsError> {
        let lp = tape.log(p);
        let m = tape.mul_const(lp, targets.clone())?;
        Ok(tape.sum_rows(m))
    };
    let cw = cross(tape, p_weak)?;
    let cs = cross(tape, p_strong)?;
    let both = tape.add(cw, cs)?;
    let neg = tape.scale(both, -1.0);
    let h = tape.constant(Tensor::vector(neg_entropy.iter().map(|v| 2.0 * v).collect()));
    tape.add(neg, h)
}

fn scalar_eval(build: impl FnOnce(&mut Tape) -> Result<Var, NumericsError>) -> Result<f64, NumericsError> {
    let mut tape = Tape::new();
    let v = build(&mut tape)?;
    Ok(tape.value(v).item())
}

pub fn sup_loss(probs: &[f64], set: CandidateSet) -> f64 {
    scalar_eval(|t| {
        let p = t.constant(Tensor::matrix(1, probs.len(), probs.to_vec()));
        sup_loss_rows(t, p, &[set])
    })
    .expect("shapes are consistent")
}

pub fn proto_contrastive_loss(
    q: &[f64],
    l: &LabelDistribution,
    bank: &PrototypeBank,
    tau: f64,
) -> Result<f64, NumericsError> {
    scalar_eval(|t| {
        let qv = t.constant(Tensor::matrix(1, q.len(), q.to_vec()));
        proto_contrastive_rows(t, qv, &label_matrix([l], l.num_classes()), bank, tau)
    })
}

pub fn mixup_proto_loss(
    q_mixed: &[f64],
    l_i: &LabelDistribution,
    l_j: &LabelDistribution,
    lambda: f64,
    bank: &PrototypeBank,
    tau: f64,
) -> Result<f64, NumericsError> {
    let c = l_i.num_classes();
    scalar_eval(|t| {
        let qv = t.constant(Tensor::matrix(1, q_mixed.len(), q_mixed.to_vec()));
        mixup_proto_rows(t, qv, &label_matrix([l_i], c), &label_matrix([l_j], c), &[lambda], bank, tau)
    })
}

pub fn consistency_loss(l: &LabelDistribution, p_weak: &[f64], p_strong: &[f64]) -> Result<f64, NumericsError> {
    let c = l.num_classes();
    scalar_eval(|t| {
        let pw = t.constant(Tensor::matrix(1, c, p_weak.to_vec()));
        let ps = t.constant(Tensor::matrix(1, c, p_strong.to_vec()));
        consistency_rows(t, &label_matrix([l], c), pw, ps)
    })
}

/// Weights, temperature and term toggles for the full objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub w_m: f64,
    pub w_cr: f64,
    pub tau: f64,
    pub enable_mixup_proto: bool,
    pub enable_cr: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { w_m: 5.0, w_cr: 1.0, tau: 0.3, enable_mixup_proto: true, enable_cr: true }
    }
}

/// One mini-batch, already augmented. Rows align across fields.
#[derive(Clone, Debug)]
pub struct LossBatch {
    pub weak: Tensor,
    pub strong: Tensor,
    pub mixed: Tensor,
    pub sets: Vec<CandidateSet>,
    pub labels: Tensor,
    pub partner_labels: Tensor,
    pub lambdas: Vec<f64>,
}

impl LossBatch {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Handles to the scalar terms of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub sup: Var,
    pub mix: Option<Var>,
    pub cr: Option<Var>,
}

fn stack(views: &[&Tensor]) -> Tensor {
    let cols = views[0].cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for v in views {
        data.extend_from_slice(v.data());
        rows += v.rows();
    }
    Tensor::matrix(rows, cols, data)
}

/// Batch mean of `L_Sup + w_m·L_m + w_CR·L_CR`. The supervised term uses the
/// weak view, the mixup term the mixed weak views, the consistency term the
/// weak and strong views.
pub fn total_loss(
    tape: &mut Tape,
    vars: &ParamVars,
    batch: &LossBatch,
    bank: &PrototypeBank,
    cfg: &LossConfig,
) -> Result<LossTerms, NumericsError> {
    let b = batch.len();
    let use_mix = cfg.enable_mixup_proto && cfg.w_m != 0.0;
    let use_cr = cfg.enable_cr && cfg.w_cr != 0.0;

    let mut views = vec![&batch.weak];
    if use_cr {
        views.push(&batch.strong);
    }
    if use_mix {
        views.push(&batch.mixed);
    }
    let x = tape.constant(stack(&views));
    let q_all = encode_tape(tape, vars, x)?;
    let rows = |k: usize| (k * b..(k + 1) * b).collect::<Vec<_>>();

    let (probs, q_mixed) = if use_mix {
        let n_cls = views.len() - 1;
        let q_cls = tape.gather_rows(q_all, &(0..n_cls * b).collect::<Vec<_>>())?;
        let qm = tape.gather_rows(q_all, &rows(n_cls))?;
        (classify_tape(tape, vars, q_cls)?, Some(qm))
    } else {
        (classify_tape(tape, vars, q_all)?, None)
    };

    let p_weak = if use_cr { tape.gather_rows(probs, &rows(0))? } else { probs };
    let sup_rows = sup_loss_rows(tape, p_weak, &batch.sets)?;
    let sup = tape.mean(sup_rows);
    let mut total = sup;

    let mix = match q_mixed {
        Some(qm) => {
            let r = mixup_proto_rows(tape, qm, &batch.labels, &batch.partner_labels, &batch.lambdas, bank, cfg.tau)?;
            let m = tape.mean(r);
            let wm = tape.scale(m, cfg.w_m);
            total = tape.add(total, wm)?;
            Some(m)
        }
        None => None,
    };

    let cr = if use_cr {
        let p_strong = tape.gather_rows(probs, &rows(1))?;
        let r = consistency_rows(tape, &batch.labels, p_weak, p_strong)?;
        let m = tape.mean(r);
        let wc = tape.scale(m, cfg.w_cr);
        total = tape.add(total, wc)?;
        Some(m)
    } else {
        None
    };

    Ok(LossTerms { total, sup, mix, cr })
}
