//! Experiment configuration: a flat TOML file overlaid by command-line flags.
//!
//! [`Settings`] carries every key as optional (it is both the file schema and
//! the flag set); [`ExperimentConfig::resolve`] fills defaults and validates.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::divergence::{BalancednessConfig, TemperatureBracket};
use crate::error::{Error, Result};
use crate::federation::FedConfig;

/// Every configurable key. Used both as the file schema and as flags.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Number of clients K.
    #[arg(long)]
    pub clients: Option<usize>,
    /// Phase-1 communication rounds T.
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Fraction of clients selected per round.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_phase1: Option<f64>,
    #[arg(long)]
    pub lr_phase2: Option<f64>,
    /// Phase-2 local passes T_p.
    #[arg(long)]
    pub personal_rounds: Option<usize>,
    /// Weight of the personal-branch loss in Phase 2.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, action = clap::ArgAction::Set, value_name = "BOOL")]
    pub purify: Option<bool>,
    #[arg(long, action = clap::ArgAction::Set, value_name = "BOOL")]
    pub residual: Option<bool>,

    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Samples in the largest class.
    #[arg(long)]
    pub n1: Option<usize>,
    /// Imbalance factor n1 / nC.
    #[arg(long = "if", value_name = "IF")]
    #[serde(rename = "if")]
    pub imbalance: Option<f64>,
    #[arg(long)]
    pub class_sep: Option<f64>,
    /// Zero-shot prototype noise.
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub alpha_dir: Option<f64>,
    #[arg(long)]
    pub logit_scale: Option<f64>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub local_test_size: Option<usize>,
    #[arg(long)]
    pub eval_subset: Option<usize>,

    /// Balancedness kernel width.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub tau_min: Option<f64>,
    #[arg(long)]
    pub tau_max: Option<f64>,

    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub partition_seed: Option<u64>,
    #[arg(long)]
    pub selection_seed: Option<u64>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,

    /// Named toggle combination: fedpurel, fedavg-baseline, purify-only, residual-only.
    #[arg(long)]
    pub arm: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Client worker threads (0 = one per core). Does not affect results.
    #[arg(long)]
    pub workers: Option<usize>,

    #[arg(long)]
    pub ingest_embeddings: Option<PathBuf>,
    #[arg(long)]
    pub ingest_test_embeddings: Option<PathBuf>,
    #[arg(long)]
    pub ingest_prototypes: Option<PathBuf>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl Settings {
    /// Values set in `other` win.
    pub fn overlay(&mut self, other: &Settings) {
        overlay!(self, other;
            clients, rounds, fraction, local_epochs, batch_size, lr_phase1, lr_phase2,
            personal_rounds, lambda, purify, residual, classes, dim, n1, imbalance,
            class_sep, nu, alpha_dir, logit_scale, test_per_class, local_test_size,
            eval_subset, sigma, tau_min, tau_max, seed, data_seed, partition_seed,
            selection_seed, shuffle_seed, arm, out, workers, ingest_embeddings,
            ingest_test_embeddings, ingest_prototypes,
        );
    }

    pub fn from_toml_str(text: &str) -> Result<Settings> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(&error_key(&e), e.message().to_string()))?;
        let known = serde_json::to_value(Settings::default()).expect("serializable");
        let known = known.as_object().expect("struct");
        if let Some(k) = table.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::config(k, "unknown key"));
        }
        for (k, v) in &table {
            if v.is_table() || v.is_array() {
                return Err(Error::config(k, "config is flat: expected a scalar value"));
            }
        }
        // deserialize key by key so a type error names its key
        for (k, v) in &table {
            let mut one = toml::Table::new();
            one.insert(k.clone(), v.clone());
            one.try_into::<Settings>()
                .map_err(|e| Error::config(k, e.message().to_string()))?;
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(&error_key(&e), e.message().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Settings::from_toml_str(&text)
    }
}

fn error_key(e: &toml::de::Error) -> String {
    e.message()
        .split('`')
        .nth(1)
        .unwrap_or("<file>")
        .to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    FedPurel,
    Baseline,
    PurifyOnly,
    ResidualOnly,
}

impl Arm {
    pub fn parse(name: &str) -> Result<Arm> {
        match name {
            "fedpurel" | "full" => Ok(Arm::FedPurel),
            "fedavg-baseline" | "baseline" => Ok(Arm::Baseline),
            "purify-only" => Ok(Arm::PurifyOnly),
            "residual-only" => Ok(Arm::ResidualOnly),
            other => Err(Error::config("arm", format!("unknown arm `{other}`"))),
        }
    }

    pub fn from_toggles(purify: bool, residual: bool) -> Arm {
        match (purify, residual) {
            (true, true) => Arm::FedPurel,
            (false, false) => Arm::Baseline,
            (true, false) => Arm::PurifyOnly,
            (false, true) => Arm::ResidualOnly,
        }
    }

    pub fn toggles(self) -> (bool, bool) {
        match self {
            Arm::FedPurel => (true, true),
            Arm::Baseline => (false, false),
            Arm::PurifyOnly => (true, false),
            Arm::ResidualOnly => (false, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::FedPurel => "fedpurel",
            Arm::Baseline => "fedavg-baseline",
            Arm::PurifyOnly => "purify-only",
            Arm::ResidualOnly => "residual-only",
        }
    }
}

/// Fully resolved configuration. Serializes with the same keys as [`Settings`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub clients: usize,
    pub rounds: usize,
    pub fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub personal_rounds: usize,
    pub lambda: f64,
    pub purify: bool,
    pub residual: bool,
    pub classes: usize,
    pub dim: usize,
    pub n1: usize,
    #[serde(rename = "if")]
    pub imbalance: f64,
    pub class_sep: f64,
    pub nu: f64,
    pub alpha_dir: f64,
    pub logit_scale: f64,
    pub test_per_class: usize,
    pub local_test_size: usize,
    pub eval_subset: usize,
    pub sigma: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub seed: u64,
    pub data_seed: u64,
    pub partition_seed: u64,
    pub selection_seed: u64,
    pub shuffle_seed: u64,
    pub arm: String,
    pub out: PathBuf,
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ingest_embeddings: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ingest_test_embeddings: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ingest_prototypes: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::resolve(&Settings::default()).expect("defaults are valid")
    }
}

fn check(ok: bool, key: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, msg))
    }
}

impl ExperimentConfig {
    /// Fills defaults and validates every range.
    ///
    /// `arm` picks the toggle pair; explicit `purify` / `residual` keys
    /// then override it and the arm name is re-derived from the result.
    pub fn resolve(s: &Settings) -> Result<Self> {
        let fed = FedConfig::default();
        let seed = s.seed.unwrap_or(0);
        let (mut purify, mut residual) = match &s.arm {
            Some(a) => Arm::parse(a)?.toggles(),
            None => (fed.purify, fed.residual),
        };
        if let Some(p) = s.purify {
            purify = p;
        }
        if let Some(r) = s.residual {
            residual = r;
        }
        let cfg = ExperimentConfig {
            clients: s.clients.unwrap_or(fed.num_clients),
            rounds: s.rounds.unwrap_or(fed.rounds),
            fraction: s.fraction.unwrap_or(fed.fraction),
            local_epochs: s.local_epochs.unwrap_or(fed.local_epochs),
            batch_size: s.batch_size.unwrap_or(fed.batch_size),
            lr_phase1: s.lr_phase1.unwrap_or(fed.lr_phase1),
            lr_phase2: s.lr_phase2.unwrap_or(fed.lr_phase2),
            personal_rounds: s.personal_rounds.unwrap_or(fed.personal_rounds),
            lambda: s.lambda.unwrap_or(fed.lambda),
            purify,
            residual,
            classes: s.classes.unwrap_or(20),
            dim: s.dim.unwrap_or(32),
            n1: s.n1.unwrap_or(200),
            imbalance: s.imbalance.unwrap_or(100.0),
            class_sep: s.class_sep.unwrap_or(DEFAULT_CLASS_SEP),
            nu: s.nu.unwrap_or(DEFAULT_NU),
            alpha_dir: s.alpha_dir.unwrap_or(1.0),
            logit_scale: s.logit_scale.unwrap_or(10.0),
            test_per_class: s.test_per_class.unwrap_or(100),
            local_test_size: s.local_test_size.unwrap_or(200),
            eval_subset: s.eval_subset.unwrap_or(512),
            sigma: s.sigma.unwrap_or(BalancednessConfig::default().sigma),
            tau_min: s.tau_min.unwrap_or(fed.bracket.tau_min),
            tau_max: s.tau_max.unwrap_or(fed.bracket.tau_max),
            seed,
            data_seed: s.data_seed.unwrap_or(seed),
            partition_seed: s.partition_seed.unwrap_or(seed),
            selection_seed: s.selection_seed.unwrap_or(seed),
            shuffle_seed: s.shuffle_seed.unwrap_or(seed),
            arm: Arm::from_toggles(purify, residual).name().to_string(),
            out: s.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            workers: s.workers.unwrap_or(0),
            ingest_embeddings: s.ingest_embeddings.clone(),
            ingest_test_embeddings: s.ingest_test_embeddings.clone(),
            ingest_prototypes: s.ingest_prototypes.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check(self.clients >= 1, "clients", "must be at least 1")?;
        check(self.fraction > 0.0 && self.fraction <= 1.0, "fraction", "must lie in (0, 1]")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(self.lr_phase1 > 0.0 && self.lr_phase1.is_finite(), "lr_phase1", "must be positive")?;
        check(self.lr_phase2 > 0.0 && self.lr_phase2.is_finite(), "lr_phase2", "must be positive")?;
        check((0.0..=1.0).contains(&self.lambda), "lambda", "must lie in [0, 1]")?;
        check(self.classes >= 2, "classes", "must be at least 2")?;
        check(self.dim >= 2, "dim", "must be at least 2")?;
        check(self.n1 >= 1, "n1", "must be at least 1")?;
        check(self.imbalance >= 1.0 && self.imbalance.is_finite(), "if", "must be >= 1")?;
        check(self.class_sep >= 0.0 && self.class_sep.is_finite(), "class_sep", "must be >= 0")?;
        check(self.nu >= 0.0 && self.nu.is_finite(), "nu", "must be >= 0")?;
        check(self.alpha_dir > 0.0 && self.alpha_dir.is_finite(), "alpha_dir", "must be positive")?;
        check(self.logit_scale > 0.0 && self.logit_scale.is_finite(), "logit_scale", "must be positive")?;
        check(self.test_per_class >= 1, "test_per_class", "must be at least 1")?;
        check(self.local_test_size >= 1, "local_test_size", "must be at least 1")?;
        check(self.eval_subset >= 1, "eval_subset", "must be at least 1")?;
        check(self.sigma > 0.0 && self.sigma.is_finite(), "sigma", "must be positive")?;
        check(self.tau_min > 0.0, "tau_min", "must be positive")?;
        check(self.tau_max > self.tau_min && self.tau_max.is_finite(), "tau_max", "must exceed tau_min")?;
        if self.ingest_embeddings.is_some() || self.ingest_prototypes.is_some() {
            for (key, v) in [
                ("ingest_embeddings", &self.ingest_embeddings),
                ("ingest_test_embeddings", &self.ingest_test_embeddings),
                ("ingest_prototypes", &self.ingest_prototypes),
            ] {
                check(v.is_some(), key, "required when ingesting external embeddings")?;
            }
        }
        Ok(())
    }

    pub fn fed(&self) -> FedConfig {
        FedConfig {
            num_clients: self.clients,
            rounds: self.rounds,
            fraction: self.fraction,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr_phase1: self.lr_phase1,
            lr_phase2: self.lr_phase2,
            personal_rounds: self.personal_rounds,
            lambda: self.lambda,
            purify: self.purify,
            residual: self.residual,
            selection_seed: self.selection_seed,
            shuffle_seed: self.shuffle_seed,
            bracket: self.bracket(),
        }
    }

    pub fn bracket(&self) -> TemperatureBracket {
        TemperatureBracket {
            tau_min: self.tau_min,
            tau_max: self.tau_max,
            ..TemperatureBracket::default()
        }
    }

    pub fn balancedness(&self) -> BalancednessConfig {
        BalancednessConfig { sigma: self.sigma }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Reads `file` (if any), overlays `flags`, resolves.
pub fn parse_config(file: Option<&Path>, flags: &Settings) -> Result<ExperimentConfig> {
    let mut s = match file {
        Some(p) => Settings::from_file(p)?,
        None => Settings::default(),
    };
    s.overlay(flags);
    ExperimentConfig::resolve(&s)
}

/// Class-mean separation of the synthetic benchmark.
pub const DEFAULT_CLASS_SEP: f64 = 3.2;
/// Prototype noise giving roughly 70% zero-shot accuracy at the default separation.
pub const DEFAULT_NU: f64 = 0.4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let s = Settings::from_toml_str("").unwrap();
        let c = ExperimentConfig::resolve(&s).unwrap();
        assert_eq!(c.clients, 20);
        assert_eq!(c.fraction, 0.4);
        assert_eq!(c.rounds, 100);
        assert_eq!(c.alpha_dir, 1.0);
        assert_eq!(c.imbalance, 100.0);
        assert_eq!(c.lambda, 0.9);
        assert_eq!(c.personal_rounds, 20);
        assert_eq!(c.sigma, 0.1);
        assert_eq!((c.lr_phase1, c.lr_phase2, c.batch_size, c.local_epochs), (0.01, 0.01, 32, 1));
        assert_eq!(c.arm, "fedpurel");
    }

    #[test]
    fn flags_override_file() {
        let mut s = Settings::from_toml_str("if=100\nrounds = 5").unwrap();
        s.overlay(&Settings {
            imbalance: Some(50.0),
            ..Settings::default()
        });
        let c = ExperimentConfig::resolve(&s).unwrap();
        assert_eq!(c.imbalance, 50.0);
        assert_eq!(c.rounds, 5);
    }

    #[test]
    fn errors_name_the_key() {
        let bad = |text: &str| match Settings::from_toml_str(text)
            .and_then(|s| ExperimentConfig::resolve(&s))
        {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(bad("lambda=1.5"), "lambda");
        assert_eq!(bad("bogus = 3"), "bogus");
        assert_eq!(bad("rounds = \"many\""), "rounds");
        assert_eq!(bad("fraction = 0"), "fraction");
        assert_eq!(bad("arm = \"nope\""), "arm");
        assert_eq!(bad("ingest_embeddings = \"a.csv\""), "ingest_test_embeddings");
    }

    #[test]
    fn arms_and_toggles() {
        let c = ExperimentConfig::resolve(&Settings {
            arm: Some("baseline".into()),
            ..Settings::default()
        })
        .unwrap();
        assert_eq!((c.purify, c.residual, c.arm.as_str()), (false, false, "fedavg-baseline"));
        let c = ExperimentConfig::resolve(&Settings {
            residual: Some(false),
            ..Settings::default()
        })
        .unwrap();
        assert_eq!(c.arm, "purify-only");
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ExperimentConfig::resolve(&Settings {
            seed: Some(7),
            shuffle_seed: Some(99),
            imbalance: Some(10.0),
            ..Settings::default()
        })
        .unwrap();
        let text = c.to_toml();
        let again = ExperimentConfig::resolve(&Settings::from_toml_str(&text).unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.data_seed, 7);
        assert_eq!(again.shuffle_seed, 99);
    }
}
