//! Training loop: epoch-start bank refresh, candidate correction, mini-batch
//! SGD on the full objective, per-batch label disambiguation and
//! validation-based early stopping.

mod sweep;

pub use sweep::{run_ablation, run_grid, run_phi_sweep, AblationVariant, Aggregate, RunRecord, SweepTable};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{mix, sample_beta, strong_augment, weak_augment, Dataset, Split};
use crate::losses::{compute_prototypes, label_matrix, total_loss, LabelDistribution, LossBatch, LossConfig};
use crate::model::{classify_batch, encode_batch, init_params, ModelDims, ModelError, ModelParams};
use crate::numerics::{NumericsError, Tape, Tensor};
use crate::par::{map_chunks, Exec};
use crate::refinement::{
    correct_candidate_set, disambiguate, init_label_distributions, knn_soft_labels, CandidateSet, EmbeddingBank,
};
use crate::rng::{substream, Stream};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid hyperparameter: {0}")]
    Param(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}\n{dump}")]
    NonFiniteLoss { epoch: usize, batch: usize, dump: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub w_m: f64,
    pub w_cr: f64,
    pub tau: f64,
    pub k: usize,
    pub phi: f64,
    pub alpha_mixup: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub warmup_epochs: usize,
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub p_drop: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub enable_mixup_proto: bool,
    pub enable_cr: bool,
    pub enable_correction: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr: 5e-2,
            momentum: 0.9,
            weight_decay: 1e-3,
            w_m: 5.0,
            w_cr: 1.0,
            tau: 0.3,
            k: 200,
            phi: 0.7,
            alpha_mixup: 4.0,
            batch_size: 64,
            max_epochs: 500,
            patience: 25,
            warmup_epochs: 5,
            sigma_weak: 0.1,
            sigma_strong: 0.5,
            p_drop: 0.2,
            hidden: vec![128, 128],
            embed_dim: 32,
            enable_mixup_proto: true,
            enable_cr: true,
            enable_correction: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [("lr", self.lr), ("tau", self.tau), ("phi", self.phi), ("alpha_mixup", self.alpha_mixup)];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(TrainError::Param(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("w_m", self.w_m),
            ("w_cr", self.w_cr),
            ("sigma_weak", self.sigma_weak),
            ("sigma_strong", self.sigma_strong),
        ];
        for (name, v) in non_negative {
            if !v.is_finite() || v < 0.0 {
                return Err(TrainError::Param(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(TrainError::Param(format!("p_drop must lie in [0, 1), got {}", self.p_drop)));
        }
        if self.k == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.embed_dim == 0 {
            return Err(TrainError::Param("k, batch_size, max_epochs and embed_dim must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(TrainError::Param("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            w_m: self.w_m,
            w_cr: self.w_cr,
            tau: self.tau,
            enable_mixup_proto: self.enable_mixup_proto,
            enable_cr: self.enable_cr,
        }
    }

    pub fn model_dims(&self, input: usize, classes: usize) -> ModelDims {
        ModelDims::new(input, self.hidden.clone(), self.embed_dim, classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub loss_sup: f64,
    pub loss_mix: Option<f64>,
    pub loss_cr: Option<f64>,
    pub val_acc: f64,
    pub test_acc: f64,
    pub mean_set_size: f64,
    pub coverage: f64,
    pub mean_entropy: f64,
    pub lr: f64,
}

/// Everything a finished run hands back.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub params: ModelParams,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_acc: f64,
    /// Dataset indices of the training split, in bank order.
    pub train_indices: Vec<usize>,
    pub initial_sets: Vec<CandidateSet>,
    pub final_sets: Vec<CandidateSet>,
    pub final_labels: Vec<LabelDistribution>,
}

/// Mutable state of a run.
pub struct TrainState {
    pub params: ModelParams,
    pub velocity: Vec<Tensor>,
    pub bank: EmbeddingBank,
    pub labels: Vec<LabelDistribution>,
    pub sets: Vec<CandidateSet>,
    pub epoch: usize,
    pub step: usize,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub best_params: ModelParams,
    pub patience_left: usize,
}

pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `v ← m·v + g + wd·θ; θ ← θ − lr·v`, applied element-wise.
pub fn sgd_momentum_step(
    theta: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g + weight_decay * *t;
        *t -= lr * *v;
    }
}

fn gather(ds: &Dataset, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * ds.dim);
    for &i in idx {
        data.extend_from_slice(ds.feature(i));
    }
    Tensor::matrix(idx.len(), ds.dim, data)
}

/// Clean-input embeddings and class probabilities for every row of `x`.
pub fn forward_all(exec: Exec, params: &ModelParams, x: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
    let n = x.rows();
    let d = x.cols();
    let parts = map_chunks(exec, n, EVAL_CHUNK, |r| -> Result<(Tensor, Tensor), ModelError> {
        let slice = Tensor::matrix(r.len(), d, x.data()[r.start * d..r.end * d].to_vec());
        let q = encode_batch(params, &slice)?;
        let p = classify_batch(params, &q)?;
        Ok((q, p))
    });
    let (e, c) = (params.dims().embed, params.dims().classes);
    let mut emb = Vec::with_capacity(n * e);
    let mut probs = Vec::with_capacity(n * c);
    for part in parts {
        let (q, p) = part?;
        emb.extend_from_slice(q.data());
        probs.extend_from_slice(p.data());
    }
    Ok((Tensor::matrix(n, e, emb), Tensor::matrix(n, c, probs)))
}

/// Argmax accuracy against the true labels of `split`, on clean inputs.
pub fn evaluate(params: &ModelParams, ds: &Dataset, split: Split) -> Result<f64, ModelError> {
    evaluate_with(Exec::default(), params, ds, split)
}

pub fn evaluate_with(exec: Exec, params: &ModelParams, ds: &Dataset, split: Split) -> Result<f64, ModelError> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(ModelError::Shape(format!("{split:?} split is empty")));
    }
    let (_, probs) = forward_all(exec, params, &gather(ds, &idx))?;
    let correct =
        idx.iter().enumerate().filter(|&(r, &i)| crate::model::argmax(probs.row(r)) == ds.true_labels[i]).count();
    Ok(correct as f64 / idx.len() as f64)
}

pub fn train(ds: &Dataset, hyper: &Hyperparams, seed: u64) -> Result<TrainOutcome, TrainError> {
    train_with(Exec::default(), ds, hyper, seed, |_| {})
}

/// [`train`] with an explicit executor and a per-epoch callback.
pub fn train_with<F: FnMut(&EpochMetrics)>(
    exec: Exec,
    ds: &Dataset,
    hyper: &Hyperparams,
    seed: u64,
    mut on_epoch: F,
) -> Result<TrainOutcome, TrainError> {
    hyper.validate()?;
    let train_idx = ds.indices(Split::Train);
    if train_idx.is_empty() || ds.indices(Split::Val).is_empty() {
        return Err(TrainError::Param("dataset needs non-empty train and val splits".into()));
    }
    let c = ds.num_classes;
    let n = train_idx.len();
    let x_train = gather(ds, &train_idx);
    let truth: Vec<usize> = train_idx.iter().map(|&i| ds.true_labels[i]).collect();
    let initial_sets: Vec<CandidateSet> = train_idx.iter().map(|&i| ds.candidate_sets[i]).collect();
    let loss_cfg = hyper.loss_config();

    let params = init_params(seed, &hyper.model_dims(ds.dim, c));
    let velocity = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
    let mut st = TrainState {
        best_params: params.clone(),
        params,
        velocity,
        bank: EmbeddingBank { embeddings: Tensor::zeros(&[0, hyper.embed_dim]), epoch: 0 },
        labels: init_label_distributions(&initial_sets, c),
        sets: initial_sets.clone(),
        epoch: 0,
        step: 0,
        best_val_acc: f64::NEG_INFINITY,
        best_epoch: 0,
        patience_left: hyper.patience,
    };
    let iters = n.div_ceil(hyper.batch_size);
    let total_steps = hyper.max_epochs * iters;
    let mut history = Vec::new();
    let mut best_test = 0.0;

    for epoch in 0..hyper.max_epochs {
        st.epoch = epoch;
        let (emb, probs) = forward_all(exec, &st.params, &x_train)?;
        st.bank = EmbeddingBank { embeddings: emb, epoch };
        let protos = compute_prototypes(&st.bank.embeddings, &st.labels);

        if hyper.enable_correction && epoch >= hyper.warmup_epochs {
            let pis = knn_soft_labels(exec, &st.bank, &st.labels, &probs, hyper.k, hyper.tau);
            for (s, pi) in st.sets.iter_mut().zip(&pis) {
                *s = correct_candidate_set(pi, *s, hyper.phi);
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(seed, Stream::Shuffle, epoch as u64, 0));
        let lr_epoch = cosine_lr(st.step, total_steps, hyper.lr);
        let mut sums = [0.0f64; 4];

        for (b, members) in order.chunks(hyper.batch_size).enumerate() {
            let batch = build_batch(ds, &train_idx, members, &st, hyper, seed, epoch, b);
            let mut tape = Tape::new();
            let vars = st.params.register(&mut tape);
            let terms = total_loss(&mut tape, &vars, &batch, &protos, &loss_cfg)?;
            let value = |v| tape.value(v).item();
            let total = value(terms.total);
            if !total.is_finite() {
                let dump = batch_dump(
                    &batch,
                    members,
                    &train_idx,
                    value(terms.sup),
                    terms.mix.map(value),
                    terms.cr.map(value),
                );
                log::error!("non-finite loss at epoch {epoch}, batch {b}");
                return Err(TrainError::NonFiniteLoss { epoch, batch: b, dump });
            }
            let w = members.len() as f64;
            sums[0] += w * total;
            sums[1] += w * value(terms.sup);
            sums[2] += w * terms.mix.map_or(0.0, value);
            sums[3] += w * terms.cr.map_or(0.0, value);

            let grads = tape.backward(terms.total)?;
            let lr = cosine_lr(st.step, total_steps, hyper.lr);
            let param_vars = vars.all();
            for ((theta, vel), &var) in st.params.tensors_mut().zip(st.velocity.iter_mut()).zip(&param_vars) {
                let g = grads.get(var, &tape);
                sgd_momentum_step(theta.data_mut(), vel.data_mut(), g.data(), lr, hyper.momentum, hyper.weight_decay);
            }
            st.step += 1;
            if !st.params.is_finite() {
                let dump = batch_dump(
                    &batch,
                    members,
                    &train_idx,
                    value(terms.sup),
                    terms.mix.map(value),
                    terms.cr.map(value),
                );
                return Err(TrainError::NonFiniteLoss { epoch, batch: b, dump });
            }

            // Disambiguate with the updated parameters on the same views.
            let both = stack_rows(&batch.weak, &batch.strong);
            let p = classify_batch(&st.params, &encode_batch(&st.params, &both)?)?;
            let m = members.len();
            for (r, &i) in members.iter().enumerate() {
                st.labels[i] = disambiguate(p.row(r), p.row(m + r), st.sets[i]);
            }
        }

        let val_acc = evaluate_with(exec, &st.params, ds, Split::Val)?;
        let test_acc = evaluate_with(exec, &st.params, ds, Split::Test)?;
        let nf = n as f64;
        let metrics = EpochMetrics {
            epoch,
            loss: sums[0] / nf,
            loss_sup: sums[1] / nf,
            loss_mix: loss_cfg.enable_mixup_proto.then_some(sums[2] / nf),
            loss_cr: loss_cfg.enable_cr.then_some(sums[3] / nf),
            val_acc,
            test_acc,
            mean_set_size: st.sets.iter().map(|s| s.len() as f64).sum::<f64>() / nf,
            coverage: st.sets.iter().zip(&truth).filter(|(s, &y)| s.contains(y)).count() as f64 / nf,
            mean_entropy: st.labels.iter().map(LabelDistribution::entropy).sum::<f64>() / nf,
            lr: lr_epoch,
        };
        log::debug!("epoch {epoch}: loss {:.4} val {:.4} test {:.4}", metrics.loss, val_acc, test_acc);
        on_epoch(&metrics);
        history.push(metrics);

        if val_acc > st.best_val_acc {
            st.best_val_acc = val_acc;
            st.best_epoch = epoch;
            st.best_params = st.params.clone();
            st.patience_left = hyper.patience;
            best_test = test_acc;
        } else {
            st.patience_left = st.patience_left.saturating_sub(1);
            if st.patience_left == 0 {
                log::info!("early stop at epoch {epoch}; best epoch {}", st.best_epoch);
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: st.best_params,
        history,
        best_epoch: st.best_epoch,
        best_val_acc: st.best_val_acc,
        test_acc: best_test,
        train_indices: train_idx,
        initial_sets,
        final_sets: st.sets,
        final_labels: st.labels,
    })
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::matrix(a.rows() + b.rows(), a.cols(), data)
}

/// Weak, strong and mixed views plus targets for the bank rows in `members`.
#[allow(clippy::too_many_arguments)]
fn build_batch(
    ds: &Dataset,
    train_idx: &[usize],
    members: &[usize],
    st: &TrainState,
    hyper: &Hyperparams,
    seed: u64,
    epoch: usize,
    batch_no: usize,
) -> LossBatch {
    let m = members.len();
    let d = ds.dim;
    let mut weak = Vec::with_capacity(m * d);
    let mut strong = Vec::with_capacity(m * d);
    for &i in members {
        let mut rng = substream(seed, Stream::Augmentation, epoch as u64, i as u64);
        let x = ds.feature(train_idx[i]);
        weak.extend(weak_augment(x, hyper.sigma_weak, &mut rng));
        strong.extend(strong_augment(x, hyper.sigma_strong, hyper.p_drop, &mut rng));
    }
    let mut rng = substream(seed, Stream::Mixup, epoch as u64, batch_no as u64);
    let mut mixed = Vec::with_capacity(m * d);
    let mut lambdas = Vec::with_capacity(m);
    let mut partners = Vec::with_capacity(m);
    for r in 0..m {
        let j = rng.random_range(0..m);
        let lambda = sample_beta(hyper.alpha_mixup, &mut rng);
        mixed.extend(mix(&weak[r * d..(r + 1) * d], &weak[j * d..(j + 1) * d], lambda));
        lambdas.push(lambda);
        partners.push(members[j]);
    }
    let c = ds.num_classes;
    LossBatch {
        weak: Tensor::matrix(m, d, weak),
        strong: Tensor::matrix(m, d, strong),
        mixed: Tensor::matrix(m, d, mixed),
        sets: members.iter().map(|&i| st.sets[i]).collect(),
        labels: label_matrix(members.iter().map(|&i| &st.labels[i]), c),
        partner_labels: label_matrix(partners.iter().map(|&i| &st.labels[i]), c),
        lambdas,
    }
}

fn batch_dump(
    batch: &LossBatch,
    members: &[usize],
    train_idx: &[usize],
    sup: f64,
    mix: Option<f64>,
    cr: Option<f64>,
) -> String {
    let mut out = format!("terms: sup={sup} mix={mix:?} cr={cr:?}\n");
    for (r, &i) in members.iter().enumerate() {
        out.push_str(&format!(
            "instance {} set={:?} lambda={:.4} weak_finite={} label={:?}\n",
            train_idx[i],
            batch.sets[r],
            batch.lambdas[r],
            batch.weak.row(r).iter().all(|v| v.is_finite()),
            batch.labels.row(r),
        ));
    }
    out
}
