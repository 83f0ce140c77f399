//! Pipeline configuration: one TOML document with flat sections.
//!
//! Values resolve as defaults, then the config file, then `--set
//! section.key=value` flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use soup_core::corpus::SplitFractions;
use soup_core::evalkit::{Averaging, SelectionParams};
use soup_core::model::ModelConfig;
use soup_core::selector::GmmOptions;
use soup_core::tensor::AdamConfig;
use soup_core::trainer::{Schedule, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub workspace: WorkspaceSection,
    pub data: DataSection,
    pub model: ModelSection,
    /// Pretraining of the base model on the union of training domains.
    pub base: TrainSection,
    /// Per-domain adapter training.
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub selection: SelectionSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkspaceSection {
    pub path: PathBuf,
    /// Thread count for training and evaluation jobs.
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    Synthetic,
    Ingest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub mode: DataMode,
    pub seed: u64,
    pub n_training: usize,
    pub n_novel: usize,
    pub train_tokens: usize,
    pub heldout_tokens: usize,
    pub test_tokens: usize,
    pub vocab: usize,
    /// Sample documents per domain used to fit the tokenizer.
    pub tokenizer_docs: usize,
    /// Ingest mode: one subdirectory of text files per domain.
    pub raw_dir: PathBuf,
    pub training_domains: Vec<String>,
    pub novel_domains: Vec<String>,
    pub train_fraction: f64,
    pub heldout_fraction: f64,
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub context: usize,
    pub bottleneck: usize,
    pub base_seed: u64,
    pub adapter_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub data_seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub grad_accum: usize,
    /// 0 leaves the step count to `epochs`.
    pub max_steps: u64,
    pub seq_len: usize,
    pub schedule: Schedule,
    pub check_finite: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Empty means the first training domain.
    pub domain: String,
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Out-of-domain corpora; empty means every novel domain.
    pub ood: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    pub threshold: f64,
    pub mass_threshold: f64,
    pub max_adapters: usize,
    pub n_sequences: usize,
    pub seq_len: usize,
    /// 0 means one component per training domain.
    pub clusters: usize,
    pub seed: u64,
    /// 0 disables PCA.
    pub pca_dims: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
    pub lloyd_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub averaging: Averaging,
    /// Cross-domain rows, by method name.
    pub methods: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let base = TrainSection {
            lr: 3e-3,
            data_seed: 0,
            epochs: 1000,
            batch_size: 8,
            grad_accum: 1,
            max_steps: 300,
            seq_len: 32,
            schedule: Schedule::Constant,
            check_finite: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let gmm = GmmOptions::default();
        Self {
            workspace: WorkspaceSection {
                path: PathBuf::from("workspace"),
                workers: 1,
            },
            data: DataSection {
                mode: DataMode::Synthetic,
                seed: 0,
                n_training: 8,
                n_novel: 3,
                train_tokens: 12_000,
                heldout_tokens: 7_000,
                test_tokens: 1_500,
                vocab: 512,
                tokenizer_docs: 30,
                raw_dir: PathBuf::from("raw"),
                training_domains: vec![],
                novel_domains: vec![],
                train_fraction: 0.8,
                heldout_fraction: 0.1,
                test_fraction: 0.1,
            },
            model: ModelSection {
                layers: 2,
                d_model: 32,
                heads: 2,
                context: 32,
                bottleneck: 16,
                base_seed: 0,
                adapter_seed: 0,
            },
            train: TrainSection {
                max_steps: 100,
                ..base.clone()
            },
            base,
            sweep: SweepSection {
                domain: String::new(),
                lrs: vec![5e-2, 1e-2, 1e-3],
                seeds: vec![1, 2, 3],
                ood: vec![],
            },
            selection: SelectionSection {
                threshold: 0.15,
                mass_threshold: 0.10,
                max_adapters: 5,
                n_sequences: 100,
                seq_len: 32,
                clusters: 0,
                seed: 0,
                pca_dims: gmm.pca_dims.unwrap_or(0),
                max_iter: gmm.max_iter,
                tol: gmm.tol,
                restarts: gmm.restarts,
                lloyd_iters: gmm.lloyd_iters,
            },
            eval: EvalSection {
                averaging: Averaging::Logits,
                methods: soup_core::evalkit::CrossMethod::ALL.iter().map(|m| m.name().to_string()).collect(),
            },
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            data_seed: self.data_seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
            seq_len: self.seq_len,
            schedule: self.schedule,
            check_finite: self.check_finite,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            context: self.context,
            vocab,
            bottleneck: self.bottleneck,
            base_seed: self.base_seed,
            adapter_seed: self.adapter_seed,
        }
    }
}

impl SelectionSection {
    pub fn to_params(&self) -> SelectionParams {
        SelectionParams {
            threshold: self.threshold,
            mass_threshold: self.mass_threshold,
            max_adapters: self.max_adapters,
            n_sequences: self.n_sequences,
            seq_len: self.seq_len,
            clusters: (self.clusters > 0).then_some(self.clusters),
            seed: self.seed,
            gmm: GmmOptions {
                pca_dims: (self.pca_dims > 0).then_some(self.pca_dims),
                max_iter: self.max_iter,
                tol: self.tol,
                restarts: self.restarts,
                lloyd_iters: self.lloyd_iters,
            },
        }
    }
}

impl DataSection {
    pub fn fractions(&self) -> SplitFractions {
        SplitFractions {
            train: self.train_fraction,
            heldout: self.heldout_fraction,
            test: self.test_fraction,
        }
    }
}

fn merge(into: &mut toml::Value, from: toml::Value) {
    match (into, from) {
        (toml::Value::Table(a), toml::Value::Table(b)) => {
            for (k, v) in b {
                match a.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        a.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `section.key=value`; the value is read as TOML, falling back to a
/// bare string.
fn parse_override(spec: &str) -> Result<toml::Value, CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects section.key=value, got {spec:?}")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Usage(format!("bad key path {path:?}")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok(keys.iter().rev().fold(value, |acc, k| {
        let mut t = toml::Table::new();
        t.insert(k.to_string(), acc);
        toml::Value::Table(t)
    }))
}

impl PipelineConfig {
    /// Defaults, overlaid with `file` and then with `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = toml::Value::try_from(Self::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| soup_core::Error::io(path, e))?;
            let parsed: toml::Table =
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            merge(&mut value, toml::Value::Table(parsed));
        }
        for o in overrides {
            merge(&mut value, parse_override(o)?);
        }
        let cfg: Self = value.try_into().map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.workspace.workers == 0 {
            return bad("workspace.workers must be at least 1".into());
        }
        if self.data.mode == DataMode::Synthetic && 2 * self.data.n_novel > self.data.n_training {
            return bad(format!(
                "{} novel mixtures need at least {} training domains",
                self.data.n_novel,
                2 * self.data.n_novel
            ));
        }
        if self.sweep.lrs.is_empty() || self.sweep.seeds.is_empty() {
            return bad("sweep.lrs and sweep.seeds must be non-empty".into());
        }
        for m in &self.eval.methods {
            m.parse::<soup_core::evalkit::CrossMethod>()
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        let model = self.model.to_model_config(self.data.vocab);
        model.validate()?;
        self.base.to_train_config().validate(&model)?;
        self.train.to_train_config().validate(&model)?;
        self.data.fractions().validate()?;
        Ok(())
    }

    /// Same settings with every data, initialization and sampling seed set
    /// to `seed`. Adapter initialization stays shared so soups remain valid.
    pub fn reseeded(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.model.base_seed = seed;
        self.base.data_seed = seed;
        self.train.data_seed = seed;
        self.selection.seed = seed;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
