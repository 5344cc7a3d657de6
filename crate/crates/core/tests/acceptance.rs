//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

#![allow(clippy::needless_range_loop)]

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use urrl::datagen::{make_dataset, write_dataset, Dataset, SynthConfig};
use urrl::emcheck::run_em_checks;
use urrl::losses::{
    compute_prototypes, label_matrix, total_loss, LabelDistribution, LossBatch, LossConfig, PrototypeBank,
};
use urrl::model::{init_params, ModelDims, ParamVars};
use urrl::numerics::{grad_check, grad_check_many, NumericsError, Tape, Tensor, Var};
use urrl::par::Exec;
use urrl::refinement::{disambiguate, knn_soft_labels, CandidateSet, EmbeddingBank};
use urrl::trainer::{train_with, AblationVariant, Hyperparams, TrainOutcome};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Entries bounded away from zero so kinks and clamps stay out of reach of
/// the finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn positive(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.2..2.0)).collect()
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, e: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v = uniform(rng, e);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn simplex(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

type Reduce = fn(&mut Tape, Var, &Tensor) -> Result<Var, NumericsError>;

/// Contract a tensor to a scalar with fixed random weights.
fn weighted_sum(tape: &mut Tape, v: Var, w: &Tensor) -> Result<Var, NumericsError> {
    let m = tape.mul_const(v, w.clone())?;
    Ok(tape.sum(m))
}

fn criterion_gradients() -> Verdict {
    let (r, c) = (3usize, 4usize);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let step = 1e-5;
    let reduce: Reduce = weighted_sum;

    type Unary = fn(&mut Tape, Var) -> Result<Var, NumericsError>;
    type Draw = fn(&mut ChaCha8Rng, usize) -> Vec<f64>;
    let unary: Vec<(&str, Unary, Draw, usize)> = vec![
        ("relu", |t, x| Ok(t.relu(x)), away_from_zero, r * c),
        ("log", |t, x| Ok(t.log(x)), positive, r * c),
        ("exp", |t, x| Ok(t.exp(x)), uniform, r * c),
        ("scale", |t, x| Ok(t.scale(x, -1.7)), uniform, r * c),
        ("add_scalar", |t, x| Ok(t.add_scalar(x, 0.3)), uniform, r * c),
        ("softmax_rows", |t, x| Ok(t.softmax_rows(x)), uniform, r * c),
        ("l2_normalize_rows", |t, x| t.l2_normalize_rows(x), away_from_zero, r * c),
        ("gather_rows", |t, x| t.gather_rows(x, &[2, 0, 2, 1]), uniform, 4 * c),
        ("sum_rows", |t, x| Ok(t.sum_rows(x)), uniform, r),
        ("logsumexp_rows", |t, x| t.logsumexp_rows(x, None), uniform, r),
        ("logsumexp_rows_masked", |t, x| t.logsumexp_rows(x, Some(vec![true, false, true, true])), uniform, r),
    ];
    for (name, op, draw, out_len) in &unary {
        let mut w_max = 0.0f64;
        for _ in 0..20 {
            let x = Tensor::matrix(r, c, draw(&mut rng, r * c));
            let w = Tensor::vector(uniform(&mut rng, *out_len));
            let err = grad_check(
                |t, v| {
                    let y = op(t, v)?;
                    reduce(t, y, &w)
                },
                &x,
                step,
            );
            w_max = w_max.max(err.unwrap_or(f64::INFINITY));
        }
        worst.push((name, w_max));
    }

    for name in ["sum", "mean"] {
        let mut w_max = 0.0f64;
        for _ in 0..20 {
            let x = Tensor::matrix(r, c, uniform(&mut rng, r * c));
            let err = grad_check(|t, v| Ok(if name == "sum" { t.sum(v) } else { t.mean(v) }), &x, step);
            w_max = w_max.max(err.unwrap_or(f64::INFINITY));
        }
        worst.push((name, w_max));
    }

    type Binary = fn(&mut Tape, Var, Var) -> Result<Var, NumericsError>;
    let binary: Vec<(&str, Binary, [usize; 4], usize)> = vec![
        ("matmul", |t, a, b| t.matmul(a, b), [r, c, c, 2], r * 2),
        ("add", |t, a, b| t.add(a, b), [r, c, r, c], r * c),
        ("sub", |t, a, b| t.sub(a, b), [r, c, r, c], r * c),
        ("mul", |t, a, b| t.mul(a, b), [r, c, r, c], r * c),
        ("add_bias", |t, a, b| t.add_bias(a, b), [r, c, 1, c], r * c),
        ("row_dot", |t, a, b| t.row_dot(a, b), [r, c, r, c], r),
        ("dot", |t, a, b| t.dot(a, b), [r, c, r, c], 1),
    ];
    for (name, op, [ra, ca, rb, cb], out_len) in &binary {
        let mut w_max = 0.0f64;
        for _ in 0..20 {
            let a = Tensor::matrix(*ra, *ca, uniform(&mut rng, ra * ca));
            let b = if *rb == 1 {
                Tensor::vector(uniform(&mut rng, *cb))
            } else {
                Tensor::matrix(*rb, *cb, uniform(&mut rng, rb * cb))
            };
            let w = Tensor::vector(uniform(&mut rng, *out_len));
            let err = grad_check_many(
                |t, vs| {
                    let y = op(t, vs[0], vs[1])?;
                    reduce(t, y, &w)
                },
                &[a, b],
                step,
            );
            w_max = w_max.max(err.unwrap_or(f64::INFINITY));
        }
        worst.push((name, w_max));
    }
    {
        let mut w_max = 0.0f64;
        for _ in 0..20 {
            let x = Tensor::matrix(r, c, uniform(&mut rng, r * c));
            let w = Tensor::vector(uniform(&mut rng, r * c));
            let err = grad_check(
                |t, v| {
                    let m = t.mul_const(v, w.clone())?;
                    Ok(t.sum(m))
                },
                &x,
                step,
            );
            w_max = w_max.max(err.unwrap_or(f64::INFINITY));
        }
        worst.push(("mul_const", w_max));
    }

    let (op_name, op_err) = worst.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let composite = composite_loss_error();
    let passed = worst.iter().all(|&(_, e)| e < 1e-6) && composite < 1e-4;
    verdict(
        passed,
        format!(
            "{} primitives x 20 inputs, worst {op_name} {op_err:.2e} (< 1e-6); composite objective {composite:.2e} (< 1e-4)",
            worst.len()
        ),
    )
}

fn composite_loss_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (b, d, c, e) = (4, 3, 3, 4);
    let params = init_params(1, &ModelDims::new(d, vec![8, 8], e, c));
    let m = |rng: &mut ChaCha8Rng| Tensor::matrix(b, d, uniform(rng, b * d));
    let sets: Vec<CandidateSet> = (0..b).map(|i| CandidateSet::from_classes(&[i % c, (i + 1) % c])).collect();
    let labels: Vec<LabelDistribution> = sets
        .iter()
        .map(|&s| {
            let w = simplex(&mut rng, s.len());
            let mut v = vec![0.0; c];
            for (k, cls) in s.iter().enumerate() {
                v[cls] = w[k];
            }
            LabelDistribution(v)
        })
        .collect();
    let partners = [1usize, 3, 0, 2];
    let batch = LossBatch {
        weak: m(&mut rng),
        strong: m(&mut rng),
        mixed: m(&mut rng),
        sets,
        labels: label_matrix(&labels, c),
        partner_labels: label_matrix(partners.iter().map(|&j| &labels[j]), c),
        lambdas: (0..b).map(|_| rng.random_range(0.0..1.0)).collect(),
    };
    let bank = PrototypeBank { z: Tensor::from_rows(&unit_rows(&mut rng, c, e)).unwrap(), valid: vec![true; c] };
    let cfg = LossConfig::default();
    let tensors: Vec<Tensor> = params.tensors().cloned().collect();
    grad_check_many(
        |t, vs| {
            let vars = ParamVars { layers: vs.chunks(2).map(|p| (p[0], p[1])).collect() };
            Ok(total_loss(t, &vars, &batch, &bank, &cfg)?.total)
        },
        &tensors,
        1e-5,
    )
    .unwrap_or(f64::INFINITY)
}

fn criterion_em_identities() -> Verdict {
    let report = match run_em_checks(Exec::default(), 7, 1000) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("error: {e}")),
    };
    let parts: Vec<String> = report
        .checks
        .iter()
        .map(|c| format!("{} {:.1e}{}", c.name, c.value, if c.passed { "" } else { " FAILED" }))
        .collect();
    verdict(report.passed && report.checks.len() >= 8, parts.join("; "))
}

fn criterion_synthesis() -> Verdict {
    let cfg = SynthConfig { num_classes: 10, n: 100_000, eta: 0.3, mu: 0.3, seed: 2024, ..SynthConfig::default() };
    let bytes = |cfg: &SynthConfig| {
        let ds = make_dataset(cfg).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        (ds, buf)
    };
    let (ds, first) = bytes(&cfg);
    let (_, second) = bytes(&cfg);
    let n = ds.len() as f64;
    let stats = ds.stats();
    let miss = 1.0 - stats.coverage;
    let p = 0.3 * 0.7;
    let sigma_miss = (p * (1.0 - p) / n).sqrt();
    let sigma_size = (9.0 * 0.3 * 0.7 / n).sqrt();
    let z_miss = (miss - p) / sigma_miss;
    let z_size = (stats.mean_set_size - 3.7) / sigma_size;
    let identical = first == second;
    verdict(
        z_miss.abs() <= 3.0 && z_size.abs() <= 3.0 && identical,
        format!(
            "P(y not in S) = {miss:.4} (z = {z_miss:+.2}), mean |S| = {:.4} (z = {z_size:+.2}), regeneration identical: {identical}",
            stats.mean_set_size
        ),
    )
}

fn criterion_refinement_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (n, e, c, k, tau) = (20usize, 5usize, 4usize, 6usize, 0.3);
    let emb = unit_rows(&mut rng, n, e);
    let labels: Vec<Vec<f64>> = (0..n).map(|_| simplex(&mut rng, c)).collect();
    let probs: Vec<Vec<f64>> = (0..n).map(|_| simplex(&mut rng, c)).collect();

    let bank = EmbeddingBank { embeddings: Tensor::from_rows(&emb).unwrap(), epoch: 0 };
    let dists: Vec<LabelDistribution> = labels.iter().cloned().map(LabelDistribution).collect();
    let got = knn_soft_labels(Exec::default(), &bank, &dists, &Tensor::from_rows(&probs).unwrap(), k, tau);
    let mut knn_err = 0.0f64;
    for i in 0..n {
        let mut sims: Vec<(usize, f64)> =
            (0..n).filter(|&j| j != i).map(|j| (j, (0..e).map(|t| emb[i][t] * emb[j][t]).sum())).collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let top = &sims[..k];
        let z: f64 = top.iter().map(|&(_, s)| (s / tau).exp()).sum();
        for cls in 0..c {
            let vote: f64 = top.iter().map(|&(j, s)| (s / tau).exp() / z * labels[j][cls]).sum();
            let want = 0.5 * probs[i][cls] + 0.5 * vote;
            knn_err = knn_err.max((got[i].0[cls] - want).abs());
        }
    }

    let bank = compute_prototypes(&Tensor::from_rows(&emb).unwrap(), &dists);
    let mut proto_err = 0.0f64;
    for cls in 0..c {
        let mut acc = vec![0.0; e];
        for i in 0..n {
            for t in 0..e {
                acc[t] += labels[i][cls] * emb[i][t];
            }
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        for t in 0..e {
            proto_err = proto_err.max((bank.z.get(cls, t) - acc[t] / norm).abs());
        }
    }

    let l = disambiguate(&[0.5, 0.3, 0.2], &[0.4, 0.4, 0.2], CandidateSet::from_classes(&[0, 2]));
    let root5 = 5.0f64.sqrt();
    let want = [(5.0 - root5) / 4.0, 0.0, (root5 - 1.0) / 4.0];
    let dis_err = (0..3).map(|j| (l.0[j] - want[j]).abs()).fold(0.0, f64::max);

    verdict(
        knn_err < 1e-12 && proto_err < 1e-12 && dis_err < 1e-12,
        format!(
            "kNN soft labels {knn_err:.1e}, prototypes {proto_err:.1e}, disambiguation {dis_err:.1e} (all < 1e-12)"
        ),
    )
}

/// Blob task shared by the ablation, recovery and threshold criteria.
fn blob_task() -> (Dataset, Hyperparams) {
    let ds = make_dataset(&SynthConfig {
        num_classes: 5,
        dim: 20,
        n: 3000,
        blob_separation: 4.5,
        blob_std: 1.0,
        eta: 0.3,
        mu: 0.3,
        seed: 0,
        ..SynthConfig::default()
    })
    .unwrap();
    let hyper = Hyperparams { hidden: vec![64, 64], max_epochs: 100, sigma_weak: 0.5, ..Hyperparams::default() };
    (ds, hyper)
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

struct BlobRuns {
    ablation: Vec<(AblationVariant, Vec<TrainOutcome>)>,
    phi: Vec<(f64, Vec<f64>)>,
    ds: Dataset,
    elapsed: Duration,
}

fn blob_runs() -> BlobRuns {
    let start = Instant::now();
    let (ds, hyper) = blob_task();
    let run = |h: &Hyperparams| -> Vec<TrainOutcome> {
        SEEDS.iter().map(|&s| train_with(Exec::default(), &ds, h, s, |_| {}).unwrap()).collect()
    };
    let ablation: Vec<(AblationVariant, Vec<TrainOutcome>)> =
        AblationVariant::ALL.iter().map(|&v| (v, run(&v.apply(&hyper)))).collect();
    let mut phi = Vec::new();
    for p in [0.5, 0.6, 0.7, 0.8, 0.9, 0.999] {
        let accs: Vec<f64> = if p == hyper.phi {
            ablation[0].1.iter().map(|o| o.test_acc).collect()
        } else {
            run(&Hyperparams { phi: p, ..hyper.clone() }).iter().map(|o| o.test_acc).collect()
        };
        phi.push((p, accs));
    }
    BlobRuns { ablation, phi, ds, elapsed: start.elapsed() }
}

fn criterion_ablation(runs: &BlobRuns) -> Verdict {
    let means: Vec<f64> =
        runs.ablation.iter().map(|(_, outs)| mean(&outs.iter().map(|o| o.test_acc).collect::<Vec<_>>())).collect();
    let ordered = means.windows(2).all(|w| w[0] >= w[1]);
    let gap = means[0] - means[3];
    let table: Vec<String> =
        runs.ablation.iter().zip(&means).map(|((v, _), m)| format!("{} {:.2}%", v.label(), 100.0 * m)).collect();
    verdict(
        ordered && gap >= 0.03 && means[0] >= 0.85 && runs.elapsed < Duration::from_secs(30 * 60),
        format!(
            "{}; gap {:.2} points; ordered: {ordered}; {:.0}s for all blob runs",
            table.join(", "),
            100.0 * gap,
            runs.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_recovery(runs: &BlobRuns) -> Verdict {
    let full = &runs.ablation[0].1;
    let mut fractions = Vec::new();
    let mut monotone = true;
    for out in full {
        let truth: Vec<usize> = out.train_indices.iter().map(|&i| runs.ds.true_labels[i]).collect();
        let missing: Vec<usize> = (0..truth.len()).filter(|&k| !out.initial_sets[k].contains(truth[k])).collect();
        let recovered = missing.iter().filter(|&&k| out.final_sets[k].contains(truth[k])).count();
        fractions.push(recovered as f64 / missing.len() as f64);
        monotone &= out.history.windows(2).all(|w| w[1].coverage >= w[0].coverage);
    }
    let worst = fractions.iter().cloned().fold(1.0, f64::min);
    let shown: Vec<String> = fractions.iter().map(|f| format!("{:.1}%", 100.0 * f)).collect();
    verdict(
        worst >= 0.5 && monotone,
        format!("recovered per seed: {} (each >= 50%); coverage monotone: {monotone}", shown.join(", ")),
    )
}

fn criterion_phi(runs: &BlobRuns) -> Verdict {
    let means: Vec<(f64, f64)> = runs.phi.iter().map(|(p, a)| (*p, mean(a))).collect();
    let no_corr = mean(&runs.ablation[1].1.iter().map(|o| o.test_acc).collect::<Vec<_>>());
    let (lo, hi) = (means[0].1, means[means.len() - 1].1);
    let inert = (hi - no_corr).abs() <= 0.01;
    let mid_wins = means[1..means.len() - 1].iter().any(|&(_, m)| m > lo && m > hi);
    let table: Vec<String> = means.iter().map(|(p, m)| format!("{p}: {:.2}%", 100.0 * m)).collect();
    verdict(
        inert && mid_wins,
        format!(
            "{}; no correction {:.2}%; inert at 0.999: {inert}; mid-range above both ends: {mid_wins}",
            table.join(", "),
            100.0 * no_corr
        ),
    )
}

fn criterion_determinism() -> Verdict {
    let bin = env!("CARGO_BIN_EXE_urrl");
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("run.conf");
    fs::write(&config, "n = 600\nblob_separation = 4\nhidden = 32,32\nmax_epochs = 6\nk = 50\n").unwrap();
    let status = |args: &[&str]| Command::new(bin).args(args).output().map(|o| o.status.success()).unwrap_or(false);
    let data = root.join("data");
    let mut ok =
        status(&["synth", "--config", config.to_str().unwrap(), "--out", data.to_str().unwrap(), "--seed", "3"]);
    let dataset = data.join("dataset.upll");
    for name in ["a", "b"] {
        let out = root.join(name);
        ok &= status(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--data",
            dataset.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "11",
        ]);
    }
    if !ok {
        return verdict(false, "a CLI invocation failed".into());
    }
    let same = |f: &str| fs::read(root.join("a").join(f)).ok() == fs::read(root.join("b").join(f)).ok();
    let files = ["metrics.jsonl", "report.json", "checkpoint.bin", "refinement.csv"];
    let differing: Vec<&str> = files.iter().copied().filter(|f| !same(f)).collect();
    let epochs = fs::read_to_string(root.join("a/metrics.jsonl")).map(|s| s.lines().count()).unwrap_or(0);
    verdict(
        differing.is_empty() && epochs > 0,
        format!("two train runs, {epochs} metric lines each; differing files: {differing:?}"),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, f: &dyn Fn() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("{tag} [{id}] {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), v.detail);
        if !v.passed {
            failed += 1;
        }
    };
    report(1, "gradient suite", &criterion_gradients);
    report(2, "EM identity suite", &criterion_em_identities);
    report(3, "synthesis statistics", &criterion_synthesis);
    let runs = blob_runs();
    report(4, "ablation ordering", &|| criterion_ablation(&runs));
    report(5, "candidate-set recovery", &|| criterion_recovery(&runs));
    report(6, "threshold sweep", &|| criterion_phi(&runs));
    report(7, "refinement oracles", &criterion_refinement_oracles);
    report(8, "determinism", &criterion_determinism);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
