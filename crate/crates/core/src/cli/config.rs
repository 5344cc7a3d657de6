//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::datagen::{FeatureMode, SynthConfig};
use crate::trainer::Hyperparams;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub hyper: Hyperparams,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct ConfigError {
    pub line: usize,
    pub msg: String,
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}` for `{key}`"))
}

fn boolean(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{key}` expects true or false, got `{value}`")),
    }
}

fn widths(key: &str, value: &str) -> Result<Vec<usize>, String> {
    value.split(',').map(|w| num::<usize>(key, w.trim())).collect()
}

/// Keys of the training hyperparameters, in document order.
pub const HYPER_KEYS: &[&str] = &[
    "lr",
    "momentum",
    "weight_decay",
    "w_m",
    "w_cr",
    "tau",
    "k",
    "phi",
    "alpha_mixup",
    "batch_size",
    "max_epochs",
    "patience",
    "warmup_epochs",
    "sigma_weak",
    "sigma_strong",
    "p_drop",
    "hidden",
    "embed_dim",
    "enable_mixup_proto",
    "enable_cr",
    "enable_correction",
];

/// Set one hyperparameter from its textual value.
pub fn set_hyper(h: &mut Hyperparams, key: &str, value: &str) -> Result<(), String> {
    match key {
        "lr" => h.lr = num(key, value)?,
        "momentum" => h.momentum = num(key, value)?,
        "weight_decay" => h.weight_decay = num(key, value)?,
        "w_m" => h.w_m = num(key, value)?,
        "w_cr" => h.w_cr = num(key, value)?,
        "tau" => h.tau = num(key, value)?,
        "k" => h.k = num(key, value)?,
        "phi" => h.phi = num(key, value)?,
        "alpha_mixup" => h.alpha_mixup = num(key, value)?,
        "batch_size" => h.batch_size = num(key, value)?,
        "max_epochs" => h.max_epochs = num(key, value)?,
        "patience" => h.patience = num(key, value)?,
        "warmup_epochs" => h.warmup_epochs = num(key, value)?,
        "sigma_weak" => h.sigma_weak = num(key, value)?,
        "sigma_strong" => h.sigma_strong = num(key, value)?,
        "p_drop" => h.p_drop = num(key, value)?,
        "hidden" => h.hidden = widths(key, value)?,
        "embed_dim" => h.embed_dim = num(key, value)?,
        "enable_mixup_proto" => h.enable_mixup_proto = boolean(key, value)?,
        "enable_cr" => h.enable_cr = boolean(key, value)?,
        "enable_correction" => h.enable_correction = boolean(key, value)?,
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

fn set_synth(s: &mut SynthConfig, key: &str, value: &str) -> Option<Result<(), String>> {
    let r = match key {
        "num_classes" => num(key, value).map(|v| s.num_classes = v),
        "dim" => num(key, value).map(|v| s.dim = v),
        "n" => num(key, value).map(|v| s.n = v),
        "blob_separation" => num(key, value).map(|v| s.blob_separation = v),
        "blob_std" => num(key, value).map(|v| s.blob_std = v),
        "eta" => num(key, value).map(|v| s.eta = v),
        "mu" => num(key, value).map(|v| s.mu = v),
        "mode" => match value {
            "blobs" => {
                s.mode = FeatureMode::Blobs;
                Ok(())
            }
            "annuli" => {
                s.mode = FeatureMode::Annuli;
                Ok(())
            }
            _ => Err(format!("`mode` expects blobs or annuli, got `{value}`")),
        },
        _ => return None,
    };
    Some(r)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "seed" => {
                self.seed = Some(num(key, value)?);
                Ok(())
            }
            "out" => {
                self.out = Some(PathBuf::from(value));
                Ok(())
            }
            _ => match set_synth(&mut self.synth, key, value) {
                Some(r) => r,
                None => set_hyper(&mut self.hyper, key, value),
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError { line, msg };
            let (key, value) =
                body.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{body}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        Ok(cfg)
    }

    /// Render every defaulted key; `parse` of the result gives back `self`
    /// minus seed and output directory.
    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let h = &self.hyper;
        let mut out = String::new();
        let mode = match s.mode {
            FeatureMode::Blobs => "blobs",
            FeatureMode::Annuli => "annuli",
        };
        let hidden: Vec<String> = h.hidden.iter().map(|w| w.to_string()).collect();
        let rows: Vec<(&str, String)> = vec![
            ("num_classes", s.num_classes.to_string()),
            ("dim", s.dim.to_string()),
            ("n", s.n.to_string()),
            ("blob_separation", s.blob_separation.to_string()),
            ("blob_std", s.blob_std.to_string()),
            ("eta", s.eta.to_string()),
            ("mu", s.mu.to_string()),
            ("mode", mode.to_string()),
            ("lr", h.lr.to_string()),
            ("momentum", h.momentum.to_string()),
            ("weight_decay", h.weight_decay.to_string()),
            ("w_m", h.w_m.to_string()),
            ("w_cr", h.w_cr.to_string()),
            ("tau", h.tau.to_string()),
            ("k", h.k.to_string()),
            ("phi", h.phi.to_string()),
            ("alpha_mixup", h.alpha_mixup.to_string()),
            ("batch_size", h.batch_size.to_string()),
            ("max_epochs", h.max_epochs.to_string()),
            ("patience", h.patience.to_string()),
            ("warmup_epochs", h.warmup_epochs.to_string()),
            ("sigma_weak", h.sigma_weak.to_string()),
            ("sigma_strong", h.sigma_strong.to_string()),
            ("p_drop", h.p_drop.to_string()),
            ("hidden", hidden.join(",")),
            ("embed_dim", h.embed_dim.to_string()),
            ("enable_mixup_proto", h.enable_mixup_proto.to_string()),
            ("enable_cr", h.enable_cr.to_string()),
            ("enable_correction", h.enable_correction.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// `KEY=V1,V2,...` for a hyperparameter sweep. `hidden` cannot be swept
/// since its values contain commas.
pub fn parse_grid(spec: &str) -> Result<(String, Vec<String>), String> {
    let (key, values) =
        spec.split_once('=').ok_or_else(|| format!("grid must look like KEY=V1,V2,..., got `{spec}`"))?;
    let key = key.trim();
    if !HYPER_KEYS.contains(&key) || key == "hidden" {
        return Err(format!("cannot sweep over `{key}`"));
    }
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.len() < 2 || values.iter().any(|v| v.is_empty()) {
        return Err("grid needs at least two non-empty values".into());
    }
    let mut probe = Hyperparams::default();
    for v in &values {
        set_hyper(&mut probe, key, v)?;
    }
    Ok((key.to_string(), values))
}

pub fn parse_seeds(spec: &str) -> Result<Vec<u64>, String> {
    spec.split(',').map(|s| s.trim().parse().map_err(|_| format!("bad seed `{s}`"))).collect()
}
