//! Experiment configuration: a single JSON document with every knob of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::LocalHyper;
use crate::data::SyntheticSpec;
use crate::error::{FedError, Result};
use crate::nn::Architecture;
use crate::noise::{NoiseSpec, PartitionMode, PartitionSpec};
use crate::server::{FederationConfig, Method};

/// Where training and test data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// IDX files in `dir`. `train_samples` draws a seeded subset of the
    /// training split; `test_samples` keeps the first rows of the test split.
    Mnist {
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_samples: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_samples: Option<usize>,
    },
    Synthetic(SyntheticSpec),
}

impl DatasetSpec {
    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::Mnist { .. } => 10,
            DatasetSpec::Synthetic(s) => s.classes,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Mnist { .. } => 784,
            DatasetSpec::Synthetic(s) => s.dim,
        }
    }
}

fn one_trial() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: Architecture,
    pub partition: PartitionSpec,
    pub noise: NoiseSpec,
    pub federation: FederationConfig,
    pub local: LocalHyper,
    #[serde(default = "one_trial")]
    pub trials: usize,
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            FedError::config(if path.is_empty() { ".".into() } else { path }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FedError::config(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        if let DatasetSpec::Mnist { train_samples: Some(0), .. } = self.dataset {
            return Err(FedError::config("dataset.train_samples", "must be positive"));
        }
        if let DatasetSpec::Mnist { test_samples: Some(0), .. } = self.dataset {
            return Err(FedError::config("dataset.test_samples", "must be positive"));
        }
        self.model.validate()?;
        if self.model.input_dim != self.dataset.dim() {
            return Err(FedError::config(
                "model.input_dim",
                format!("is {} but the dataset has {} features", self.model.input_dim, self.dataset.dim()),
            ));
        }
        if self.model.classes != self.dataset.classes() {
            return Err(FedError::config(
                "model.classes",
                format!("is {} but the dataset has {} classes", self.model.classes, self.dataset.classes()),
            ));
        }
        if self.partition.clients == 0 {
            return Err(FedError::config("partition.clients", "must be positive"));
        }
        if !(self.partition.class_prob > 0.0 && self.partition.class_prob <= 1.0) {
            return Err(FedError::config("partition.class_prob", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.noise.rho) {
            return Err(FedError::config("noise.rho", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.noise.tau) {
            return Err(FedError::config("noise.tau", "must lie in [0, 1]"));
        }
        self.federation.validate()?;
        self.local.validate()?;
        if self.trials == 0 {
            return Err(FedError::config("trials", "must be positive"));
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form. The
    /// output directory does not enter the hash.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// Local settings shared by the presets. `eta` is not pinned by the method
/// description; `zeta` is `eta / 2` on MNIST and `eta` elsewhere.
fn preset_local(eta: f64, zeta: f64) -> LocalHyper {
    LocalHyper {
        epochs: 5,
        batch_size: 32,
        lambda: 15.0,
        eta,
        zeta,
        beta: 2.0,
        warmup_rounds: 10,
        use_cr: true,
        use_dr: true,
        use_au: true,
        use_pm: true,
        persist_theta: false,
        cr_floor: 1e-8,
        cr_start: 0,
        cr_ramp: 0,
    }
}

fn desk_mnist(method: Method) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Mnist {
            dir: PathBuf::from("data/mnist"),
            train_samples: Some(10_000),
            test_samples: None,
        },
        model: Architecture::mlp(784, vec![64], 10),
        partition: PartitionSpec {
            mode: PartitionMode::Iid,
            clients: 20,
            class_prob: 1.0,
        },
        noise: NoiseSpec { rho: 1.0, tau: 0.5 },
        federation: FederationConfig {
            fraction: 0.1,
            rounds: 100,
            gamma: 1.0,
            method,
            eval_every: 10,
        },
        local: preset_local(0.03, 0.015),
        trials: 3,
        seed: 0,
        out_dir: default_out(),
    }
}

fn synthetic(method: Method, class_prob: f64) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Synthetic(SyntheticSpec {
            classes: 3,
            dim: 16,
            separation: 4.0,
            scale: 1.0,
            train_samples: 6000,
            test_samples: 3000,
            seed: 0,
        }),
        model: Architecture::mlp(16, vec![32], 3),
        partition: PartitionSpec {
            mode: PartitionMode::NonIid,
            clients: 20,
            class_prob,
        },
        noise: NoiseSpec { rho: 1.0, tau: 0.0 },
        federation: FederationConfig {
            fraction: 0.1,
            rounds: 100,
            gamma: 1.0,
            method,
            eval_every: 10,
        },
        local: preset_local(0.1, 0.1),
        trials: 3,
        seed: 0,
        out_dir: default_out(),
    }
}

/// Named ready-made configurations.
pub const PRESETS: [&str; 5] = [
    "mnist_iid_rho1_tau05_fedfixer",
    "mnist_iid_rho1_tau05_fedavg",
    "mnist_full_lenet_fedfixer",
    "synthetic_noniid_p05_fedfixer",
    "synthetic_noniid_p05_fedavg",
];

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    Some(match name {
        "mnist_iid_rho1_tau05_fedfixer" => desk_mnist(Method::FedFixer),
        "mnist_iid_rho1_tau05_fedavg" => desk_mnist(Method::FedAvg),
        "mnist_full_lenet_fedfixer" => {
            let mut c = desk_mnist(Method::FedFixer);
            c.dataset = DatasetSpec::Mnist {
                dir: PathBuf::from("data/mnist"),
                train_samples: None,
                test_samples: None,
            };
            c.model = Architecture::lenet5(10);
            c.partition.clients = 100;
            c.federation.rounds = 300;
            c.trials = 5;
            c
        }
        "synthetic_noniid_p05_fedfixer" => synthetic(Method::FedFixer, 0.5),
        "synthetic_noniid_p05_fedavg" => synthetic(Method::FedAvg, 0.5),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_and_validate() {
        for name in PRESETS {
            let c = preset(name).unwrap();
            c.validate().unwrap();
            let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
            assert_eq!(back, c, "{name}");
            assert_eq!(back.hash(), c.hash());
        }
        assert!(preset("cifar").is_none());
    }

    #[test]
    fn mnist_preset_hyperparameters() {
        let c = preset("mnist_iid_rho1_tau05_fedfixer").unwrap();
        let l = &c.local;
        assert_eq!((l.epochs, l.batch_size, l.warmup_rounds), (5, 32, 10));
        assert_eq!((l.lambda, l.beta), (15.0, 2.0));
        assert_eq!(l.zeta, l.eta / 2.0);
        assert_eq!(c.federation.gamma, 1.0);
        assert_eq!(c.federation.fraction, 0.1);
    }

    #[test]
    fn unknown_key_reports_path() {
        let mut v: serde_json::Value = serde_json::from_str(&preset("mnist_iid_rho1_tau05_fedavg").unwrap().to_json()).unwrap();
        v["local"]["lamda"] = serde_json::json!(3.0);
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        match err {
            FedError::Config { path, .. } => assert!(path.starts_with("local"), "{path}"),
            other => panic!("{other}"),
        }
        assert_eq!(ExperimentConfig::from_json(&v.to_string()).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let mut c = preset("synthetic_noniid_p05_fedfixer").unwrap();
        c.model.input_dim = 5;
        let FedError::Config { path, .. } = c.validate().unwrap_err() else { panic!() };
        assert_eq!(path, "model.input_dim");
        let mut c = preset("synthetic_noniid_p05_fedfixer").unwrap();
        c.federation.fraction = 0.0;
        let FedError::Config { path, .. } = c.validate().unwrap_err() else { panic!() };
        assert_eq!(path, "federation.fraction");
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = preset("mnist_iid_rho1_tau05_fedfixer").unwrap();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
    }
}
