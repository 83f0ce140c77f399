//! Adapter fine-tuning with the base frozen, base pre-training, learning
//! rate sweeps and per-domain parallel jobs.

mod registry;

pub use registry::{read_index, write_index, IndexRecord, JobFailure, Registry};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DomainCorpus, Purpose, Split};
use crate::error::{config, Error, Result};
use crate::model::{
    attach_adapters, forward_batch, register_parts, AdapterWeights, BaseModel, BaseWeights, ModelConfig, ParamVars,
    Trainable,
};
use crate::scalar::Scalar;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear decay to zero at the final step.
    LinearDecay,
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub data_seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub grad_accum: usize,
    /// Caps the optimizer steps implied by `epochs`.
    pub max_steps: Option<u64>,
    pub seq_len: usize,
    pub schedule: Schedule,
    pub check_finite: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            data_seed: 1,
            epochs: 20,
            batch_size: 64,
            grad_accum: 5,
            max_steps: Some(2000),
            seq_len: 128,
            schedule: Schedule::Constant,
            check_finite: true,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(config("epochs, batch size and gradient accumulation must be at least 1"));
        }
        if self.max_steps == Some(0) {
            return Err(config("max_steps must be at least 1"));
        }
        if self.seq_len == 0 || self.seq_len > model.context {
            return Err(config(format!(
                "sequence length {} outside 1..={}",
                self.seq_len, model.context
            )));
        }
        Ok(())
    }

    pub fn with_lr(&self, lr: f64) -> Self {
        Self { lr, ..self.clone() }
    }

    pub fn with_data_seed(&self, data_seed: u64) -> Self {
        Self {
            data_seed,
            ..self.clone()
        }
    }
}

/// Windows of `seq_len + 1` tokens at stride `seq_len`, drawn from several
/// streams, reshuffled every epoch.
struct WindowStream<'a> {
    streams: Vec<&'a [u32]>,
    windows: Vec<(usize, usize)>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
    len: usize,
}

impl<'a> WindowStream<'a> {
    fn new(streams: Vec<&'a [u32]>, seq_len: usize, seed: u64) -> Result<Self> {
        let mut windows = Vec::new();
        for (s, toks) in streams.iter().enumerate() {
            let mut start = 0;
            while start + seq_len < toks.len() {
                windows.push((s, start));
                start += seq_len;
            }
        }
        if windows.is_empty() {
            return Err(Error::Data(format!("training data shorter than one window of {} tokens", seq_len + 1)));
        }
        let mut me = Self {
            streams,
            order: Vec::new(),
            windows,
            cursor: 0,
            epoch: 0,
            seed,
            len: seq_len,
        };
        me.reshuffle();
        Ok(me)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.windows.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x2545_F491_4F6C_DD1D));
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// Inputs and next-token targets for `n` windows.
    fn next_batch(&mut self, n: usize) -> (Vec<u32>, Vec<u32>) {
        let mut inputs = Vec::with_capacity(n * self.len);
        let mut targets = Vec::with_capacity(n * self.len);
        for _ in 0..n {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            let (s, start) = self.windows[self.order[self.cursor]];
            self.cursor += 1;
            let w = &self.streams[s][start..start + self.len + 1];
            inputs.extend_from_slice(&w[..self.len]);
            targets.extend_from_slice(&w[1..]);
        }
        (inputs, targets)
    }
}

fn total_steps(cfg: &TrainConfig, windows: usize) -> u64 {
    let per_step = cfg.batch_size * cfg.grad_accum;
    let per_epoch = windows.div_ceil(per_step).max(1) as u64;
    let steps = per_epoch * cfg.epochs as u64;
    cfg.max_steps.map_or(steps, |m| steps.min(m))
}

/// Shared optimization loop. Returns the mean loss of the final step.
fn optimize<S: Scalar>(
    model: &ModelConfig,
    base: &mut BaseWeights<S>,
    adapters: Option<&mut AdapterWeights<S>>,
    streams: Vec<&[u32]>,
    cfg: &TrainConfig,
) -> Result<f64> {
    cfg.validate(model)?;
    let mut data = WindowStream::new(streams, cfg.seq_len, cfg.data_seed)?;
    let steps = total_steps(cfg, data.windows.len());
    let train = if adapters.is_some() {
        Trainable::Adapters
    } else {
        Trainable::Base
    };
    let mut adapters = adapters;
    let mut state = match (&adapters, train) {
        (Some(a), _) => AdamState::new(a.tensors(), cfg.adam),
        _ => AdamState::new(base.named().into_iter().map(|(_, t)| t), cfg.adam),
    };
    let inv_accum = S::of(1.0 / cfg.grad_accum as f64);
    let mut last = f64::NAN;
    for step in 1..=steps {
        let mut step_loss = 0.0;
        for _ in 0..cfg.grad_accum {
            let (inputs, targets) = data.next_batch(cfg.batch_size);
            let mut tape = Tape::<S>::with_checks(cfg.check_finite);
            let vars: ParamVars = register_parts(&mut tape, base, adapters.as_deref(), train);
            let fail = |e: Error| Error::Training {
                step,
                reason: e.to_string(),
            };
            let out = forward_batch(&mut tape, model, &vars, &inputs, cfg.batch_size, cfg.seq_len, true).map_err(fail)?;
            let loss = tape.cross_entropy_mean(out.logits.expect("logits"), &targets).map_err(fail)?;
            let value = tape.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("loss is {value}"),
                });
            }
            step_loss += value / cfg.grad_accum as f64;
            let grads = tape.backward(loss);
            let (targets_t, vs): (Vec<&mut Tensor<S>>, &[crate::tensor::Var]) = match adapters.as_deref_mut() {
                Some(a) => (a.tensors_mut(), &vars.adapters),
                None => (base.tensors_mut(), &vars.base),
            };
            for (t, v) in targets_t.into_iter().zip(vs) {
                if let Some(g) = grads.get(*v) {
                    let scaled: Vec<S> = g.iter().map(|&x| x * inv_accum).collect();
                    t.accumulate_grad(&scaled)?;
                }
            }
        }
        let lr = match cfg.schedule {
            Schedule::Constant => cfg.lr,
            Schedule::LinearDecay => cfg.lr * (1.0 - (step - 1) as f64 / steps as f64),
        };
        let mut params: Vec<&mut Tensor<S>> = match adapters.as_deref_mut() {
            Some(a) => a.tensors_mut(),
            None => base.tensors_mut(),
        };
        adam_step(&mut params, &mut state, lr)?;
        if cfg.check_finite {
            for p in &params {
                p.check_finite("parameters").map_err(|e| Error::Training {
                    step,
                    reason: e.to_string(),
                })?;
            }
        }
        last = step_loss;
    }
    Ok(last)
}

/// Trains every base parameter on the union of the given corpora's train
/// splits. Stands in for language-model pretraining.
pub fn train_base<S: Scalar>(base: &BaseModel<S>, corpora: &[DomainCorpus], cfg: &TrainConfig) -> Result<(BaseModel<S>, f64)> {
    if corpora.is_empty() {
        return Err(config("base training needs at least one corpus"));
    }
    let streams = corpora
        .iter()
        .map(|c| c.read(Split::Train, Purpose::Training))
        .collect::<Result<Vec<_>>>()?;
    let mut weights = base.weights().clone();
    let loss = optimize(base.config(), &mut weights, None, streams, cfg)?;
    let trained = BaseModel::new(base.config().clone(), weights, base.tokenizer_fingerprint().to_string())?;
    Ok((trained, loss))
}

/// Fine-tunes freshly attached adapters on `corpus`; the base is untouched.
pub fn train_adapter<S: Scalar>(
    base: &BaseModel<S>,
    corpus: &DomainCorpus,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<AdapterWeights<S>> {
    let tokens = corpus.read(Split::Train, Purpose::Training)?;
    if tokens.is_empty() {
        return Err(Error::Data(format!("{} has an empty train split", corpus.name)));
    }
    let mut adapters = attach_adapters(base, init_seed, &corpus.name);
    let mut frozen = base.weights().clone();
    let loss = optimize(base.config(), &mut frozen, Some(&mut adapters), vec![tokens], cfg)?;
    debug_assert!(&frozen == base.weights());
    adapters.meta.train = Some(cfg.clone());
    adapters.meta.final_loss = Some(loss);
    Ok(adapters)
}

/// One finished or failed sweep job.
#[derive(Debug)]
pub struct SweepRun<S> {
    pub lr: f64,
    pub data_seed: u64,
    pub result: Result<AdapterWeights<S>>,
}

/// Trains one adapter per (lr, data seed), lr-major. All runs share
/// `init_seed`; failures are reported in place.
pub fn run_sweep<S: Scalar>(
    base: &BaseModel<S>,
    corpus: &DomainCorpus,
    template: &TrainConfig,
    lr_grid: &[f64],
    data_seeds: &[u64],
    init_seed: u64,
) -> Result<Vec<SweepRun<S>>> {
    if lr_grid.is_empty() || data_seeds.is_empty() {
        return Err(config("sweep needs at least one learning rate and one data seed"));
    }
    let jobs: Vec<(f64, u64)> = lr_grid
        .iter()
        .flat_map(|&lr| data_seeds.iter().map(move |&s| (lr, s)))
        .collect();
    Ok(jobs
        .into_par_iter()
        .map(|(lr, data_seed)| {
            let cfg = template.with_lr(lr).with_data_seed(data_seed);
            SweepRun {
                lr,
                data_seed,
                result: train_adapter(base, corpus, &cfg, init_seed),
            }
        })
        .collect())
}

/// The learning rates and data seeds of the reference sweep.
pub const REFERENCE_LRS: [f64; 5] = [7e-3, 4e-3, 1e-3, 5e-4, 1e-4];
pub const REFERENCE_SEEDS: [u64; 3] = [1, 2, 3];

/// Trains one adapter per named domain on a pool of `workers` threads.
/// Results do not depend on the worker count.
pub fn train_all_domains<S, F>(
    base: &BaseModel<S>,
    domains: &[String],
    load: F,
    cfg: &TrainConfig,
    init_seed: u64,
    workers: usize,
) -> Result<Registry<S>>
where
    S: Scalar,
    F: Fn(&str) -> Result<DomainCorpus> + Sync,
{
    if domains.is_empty() {
        return Err(config("no domains to train"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| config(format!("thread pool: {e}")))?;
    let results: Vec<(String, Result<AdapterWeights<S>>)> = pool.install(|| {
        domains
            .par_iter()
            .map(|d| {
                let r = load(d).and_then(|c| train_adapter(base, &c, cfg, init_seed));
                (d.clone(), r)
            })
            .collect()
    });
    let mut reg = Registry::new();
    for (domain, r) in results {
        match r {
            Ok(a) => {
                reg.insert(a);
            }
            Err(e) => reg.record_failure(JobFailure {
                domain,
                lr: Some(cfg.lr),
                data_seed: Some(cfg.data_seed),
                error: e.to_string(),
            }),
        }
    }
    Ok(reg)
}
