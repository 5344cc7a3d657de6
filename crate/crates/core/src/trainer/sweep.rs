//! Multi-seed experiment grids: the four-row ablation and the φ sweep.

use serde::{Deserialize, Serialize};

use super::{train_with, Hyperparams, TrainError};
use crate::datagen::Dataset;
use crate::par::{map_range, Exec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    Full,
    NoCorrection,
    NoCorrectionNoCr,
    SupOnly,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoCorrection,
        AblationVariant::NoCorrectionNoCr,
        AblationVariant::SupOnly,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoCorrection => "no_scorr",
            AblationVariant::NoCorrectionNoCr => "no_scorr_cr",
            AblationVariant::SupOnly => "sup_only",
        }
    }

    pub fn apply(self, base: &Hyperparams) -> Hyperparams {
        let mut h = base.clone();
        let (corr, cr, mix) = match self {
            AblationVariant::Full => (true, true, true),
            AblationVariant::NoCorrection => (false, true, true),
            AblationVariant::NoCorrectionNoCr => (false, false, true),
            AblationVariant::SupOnly => (false, false, false),
        };
        h.enable_correction = corr;
        h.enable_cr = cr;
        h.enable_mixup_proto = mix;
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: String,
    pub seed: u64,
    pub test_acc: f64,
    pub val_acc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub final_coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub config: String,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub raw: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
}

impl SweepTable {
    pub fn aggregate(&self, config: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.config == config)
    }

    /// `config,seed,test_acc,val_acc,best_epoch,epochs_run,final_coverage`.
    pub fn raw_csv(&self) -> String {
        let mut out = String::from("config,seed,test_acc,val_acc,best_epoch,epochs_run,final_coverage\n");
        for r in &self.raw {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.config, r.seed, r.test_acc, r.val_acc, r.best_epoch, r.epochs_run, r.final_coverage
            ));
        }
        out
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("config,runs,mean,std\n");
        for a in &self.aggregates {
            out.push_str(&format!("{},{},{},{}\n", a.config, a.runs, a.mean, a.std));
        }
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train every (config, seed) pair. Raw rows come back config-major in the
/// given order regardless of how runs were scheduled.
pub fn run_grid(
    exec: Exec,
    ds: &Dataset,
    configs: &[(String, Hyperparams)],
    seeds: &[u64],
) -> Result<SweepTable, TrainError> {
    if seeds.is_empty() || configs.is_empty() {
        return Err(TrainError::Param("grid needs at least one config and one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results = map_range(exec, jobs.len(), |k| {
        let (c, seed) = jobs[k];
        let out = train_with(exec, ds, &configs[c].1, seed, |_| {})?;
        let last = out.history.last().map_or(0.0, |m| m.coverage);
        Ok::<_, TrainError>(RunRecord {
            config: configs[c].0.clone(),
            seed,
            test_acc: out.test_acc,
            val_acc: out.best_val_acc,
            best_epoch: out.best_epoch,
            epochs_run: out.history.len(),
            final_coverage: last,
        })
    });
    let raw = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let aggregates = configs
        .iter()
        .map(|(name, _)| {
            let accs: Vec<f64> = raw.iter().filter(|r| &r.config == name).map(|r| r.test_acc).collect();
            let (mean, std) = mean_std(&accs);
            Aggregate { config: name.clone(), runs: accs.len(), mean, std }
        })
        .collect();
    Ok(SweepTable { raw, aggregates })
}

/// Four ablation rows, mean ± std of the best-validation test accuracy.
pub fn run_ablation(exec: Exec, ds: &Dataset, hyper: &Hyperparams, seeds: &[u64]) -> Result<SweepTable, TrainError> {
    if seeds.len() < 2 {
        return Err(TrainError::Param("ablation needs at least two seeds".into()));
    }
    let configs: Vec<(String, Hyperparams)> =
        AblationVariant::ALL.iter().map(|v| (v.label().to_string(), v.apply(hyper))).collect();
    run_grid(exec, ds, &configs, seeds)
}

pub fn run_phi_sweep(
    exec: Exec,
    ds: &Dataset,
    hyper: &Hyperparams,
    phis: &[f64],
    seeds: &[u64],
) -> Result<SweepTable, TrainError> {
    if phis.len() < 2 {
        return Err(TrainError::Param("phi sweep needs at least two values".into()));
    }
    let configs: Vec<(String, Hyperparams)> = phis
        .iter()
        .map(|&phi| {
            let mut h = hyper.clone();
            h.phi = phi;
            (format!("phi={phi}"), h)
        })
        .collect();
    run_grid(exec, ds, &configs, seeds)
}
