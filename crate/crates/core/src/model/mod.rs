//! Decoder-only transformer with a bottleneck adapter after every
//! feed-forward sublayer, and the checkpoint format for both.

pub mod checkpoint;
mod forward;

pub use forward::{forward_batch, forward_logits, hidden_states, register, Forward, ParamVars, Trainable};
pub(crate) use forward::register_parts;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, Error, Result};
use crate::scalar::Scalar;
use crate::soup::SoupProvenance;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;
use checkpoint::{take, BASE_MAGIC};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub context: usize,
    pub vocab: usize,
    /// Adapter bottleneck width.
    pub bottleneck: usize,
    pub base_seed: u64,
    /// Default seed for freshly attached adapters.
    pub adapter_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 256,
            heads: 4,
            context: 128,
            vocab: 2048,
            bottleneck: 64,
            base_seed: 0,
            adapter_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("context", self.context),
            ("vocab", self.vocab),
            ("bottleneck", self.bottleneck),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config(format!("model {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn base_param_count(&self) -> usize {
        let (d, v, c) = (self.d_model, self.vocab, self.context);
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
        v * d + c * d + self.layers * block + 2 * d + d * v
    }

    /// `L·(2·D·d + d + D + 2·D)`.
    pub fn adapter_param_count(&self) -> usize {
        let (d, b) = (self.d_model, self.bottleneck);
        self.layers * (2 * d * b + b + d + 2 * d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<S> {
    pub ln1_g: Tensor<S>,
    pub ln1_b: Tensor<S>,
    pub w_qkv: Tensor<S>,
    pub b_qkv: Tensor<S>,
    pub w_o: Tensor<S>,
    pub b_o: Tensor<S>,
    pub ln2_g: Tensor<S>,
    pub ln2_b: Tensor<S>,
    pub w_1: Tensor<S>,
    pub b_1: Tensor<S>,
    pub w_2: Tensor<S>,
    pub b_2: Tensor<S>,
}

const BLOCK_NAMES: [&str; 12] = [
    "ln1.g", "ln1.b", "attn.qkv.w", "attn.qkv.b", "attn.out.w", "attn.out.b", "ln2.g", "ln2.b", "ffn.up.w",
    "ffn.up.b", "ffn.down.w", "ffn.down.b",
];

impl<S: Scalar> BlockWeights<S> {
    fn refs(&self) -> [&Tensor<S>; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.w_qkv, &self.b_qkv, &self.w_o, &self.b_o, &self.ln2_g, &self.ln2_b,
            &self.w_1, &self.b_1, &self.w_2, &self.b_2,
        ]
    }

    fn refs_mut(&mut self) -> [&mut Tensor<S>; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
        ]
    }
}

/// All transformer parameters. The output head is untied from `wte`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseWeights<S> {
    pub wte: Tensor<S>,
    pub wpe: Tensor<S>,
    pub blocks: Vec<BlockWeights<S>>,
    pub lnf_g: Tensor<S>,
    pub lnf_b: Tensor<S>,
    pub head: Tensor<S>,
}

impl<S: Scalar> BaseWeights<S> {
    /// Tensors in canonical order with their checkpoint names.
    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![("wte".to_string(), &self.wte), ("wpe".to_string(), &self.wpe)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in BLOCK_NAMES.iter().zip(b.refs()) {
                out.push((format!("h.{i}.{n}"), t));
            }
        }
        out.push(("lnf.g".into(), &self.lnf_g));
        out.push(("lnf.b".into(), &self.lnf_b));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.wte, &mut self.wpe];
        for b in &mut self.blocks {
            out.extend(b.refs_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.head);
        out
    }

    pub fn cast<T: Scalar>(&self) -> BaseWeights<T> {
        BaseWeights {
            wte: self.wte.cast(),
            wpe: self.wpe.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    ln1_g: b.ln1_g.cast(),
                    ln1_b: b.ln1_b.cast(),
                    w_qkv: b.w_qkv.cast(),
                    b_qkv: b.b_qkv.cast(),
                    w_o: b.w_o.cast(),
                    b_o: b.b_o.cast(),
                    ln2_g: b.ln2_g.cast(),
                    ln2_b: b.ln2_b.cast(),
                    w_1: b.w_1.cast(),
                    b_1: b.b_1.cast(),
                    w_2: b.w_2.cast(),
                    b_2: b.b_2.cast(),
                })
                .collect(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
            head: self.head.cast(),
        }
    }

    fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let (d, v) = (cfg.d_model, cfg.vocab);
        let mut want: Vec<Vec<usize>> = vec![vec![v, d], vec![cfg.context, d]];
        for _ in 0..cfg.layers {
            want.extend([
                vec![d],
                vec![d],
                vec![d, 3 * d],
                vec![3 * d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, 4 * d],
                vec![4 * d],
                vec![4 * d, d],
                vec![d],
            ]);
        }
        want.extend([vec![d], vec![d], vec![d, v]]);
        let named = self.named();
        if named.len() != want.len() {
            return Err(Error::Compatibility(format!(
                "{} base tensors for a {}-layer config",
                named.len(),
                cfg.layers
            )));
        }
        for ((name, t), w) in named.iter().zip(&want) {
            if t.shape() != w.as_slice() {
                return Err(Error::Compatibility(format!("{name} has shape {:?}, config needs {w:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Frozen language model: configuration, weights, tokenizer binding and a
/// content hash over all three.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel<S> {
    config: ModelConfig,
    weights: BaseWeights<S>,
    tokenizer_fingerprint: String,
    hash: String,
}

fn hash_tensors<'a, S: Scalar>(h: &mut Sha256, named: impl IntoIterator<Item = (String, &'a Tensor<S>)>) {
    for (name, t) in named {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.as_f32().to_le_bytes());
        }
    }
}

impl<S: Scalar> BaseModel<S> {
    pub fn new(config: ModelConfig, weights: BaseWeights<S>, tokenizer_fingerprint: String) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&config).expect("config serializes"));
        h.update(tokenizer_fingerprint.as_bytes());
        hash_tensors(&mut h, weights.named());
        let hash = hex::encode(h.finalize());
        Ok(Self {
            config,
            weights,
            tokenizer_fingerprint,
            hash,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &BaseWeights<S> {
        &self.weights
    }

    pub fn tokenizer_fingerprint(&self) -> &str {
        &self.tokenizer_fingerprint
    }

    /// Hex SHA-256 over config, tokenizer fingerprint and weights (as f32).
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn into_weights(self) -> BaseWeights<S> {
        self.weights
    }

    pub fn cast<T: Scalar>(&self) -> BaseModel<T> {
        BaseModel::new(self.config.clone(), self.weights.cast(), self.tokenizer_fingerprint.clone())
            .expect("cast preserves shapes")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = BaseMeta {
            tokenizer_fingerprint: self.tokenizer_fingerprint.clone(),
            hash: self.hash.clone(),
        };
        checkpoint::encode(
            BASE_MAGIC,
            "base",
            serde_json::to_value(&self.config).expect("config serializes"),
            serde_json::to_value(meta).expect("meta serializes"),
            &self.weights.named(),
        )
    }

    /// Parses a base checkpoint and verifies its recorded hash.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut ts) = checkpoint::decode::<f32>(BASE_MAGIC, bytes)?;
        if header.kind != "base" {
            return Err(Error::Format(format!("expected a base checkpoint, found {}", header.kind)));
        }
        let cfg: ModelConfig =
            serde_json::from_value(header.config).map_err(|e| Error::Format(format!("config: {e}")))?;
        let meta: BaseMeta =
            serde_json::from_value(header.metadata).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let mut get = |n: &str| take(&mut ts, &format!("h.{i}.{n}")).map(|t| t.cast::<S>());
            blocks.push(BlockWeights {
                ln1_g: get("ln1.g")?,
                ln1_b: get("ln1.b")?,
                w_qkv: get("attn.qkv.w")?,
                b_qkv: get("attn.qkv.b")?,
                w_o: get("attn.out.w")?,
                b_o: get("attn.out.b")?,
                ln2_g: get("ln2.g")?,
                ln2_b: get("ln2.b")?,
                w_1: get("ffn.up.w")?,
                b_1: get("ffn.up.b")?,
                w_2: get("ffn.down.w")?,
                b_2: get("ffn.down.b")?,
            });
        }
        let weights = BaseWeights {
            wte: take(&mut ts, "wte")?.cast(),
            wpe: take(&mut ts, "wpe")?.cast(),
            blocks,
            lnf_g: take(&mut ts, "lnf.g")?.cast(),
            lnf_b: take(&mut ts, "lnf.b")?.cast(),
            head: take(&mut ts, "head")?.cast(),
        };
        if let Some((n, _)) = ts.first() {
            return Err(Error::Format(format!("unexpected tensor {n}")));
        }
        let model = Self::new(cfg, weights, meta.tokenizer_fingerprint).map_err(|e| Error::Format(e.to_string()))?;
        if model.hash != meta.hash {
            return Err(Error::Format(format!(
                "content hash {} does not match recorded {}",
                model.hash, meta.hash
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?).map_err(|e| annotate(e, path))
    }
}

fn annotate(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

#[derive(Serialize, Deserialize)]
struct BaseMeta {
    tokenizer_fingerprint: String,
    hash: String,
}

/// Deterministic scaled-normal initialization; residual output projections
/// are additionally scaled by `1/sqrt(2L)`.
pub fn init_base<S: Scalar>(cfg: &ModelConfig, tokenizer_fingerprint: &str) -> Result<BaseModel<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed);
    let (d, v) = (cfg.d_model, cfg.vocab);
    let std = 0.02;
    let resid = std / ((2 * cfg.layers) as f64).sqrt();
    let wte = Tensor::randn(&[v, d], std, &mut rng);
    let wpe = Tensor::randn(&[cfg.context, d], std, &mut rng);
    let blocks = (0..cfg.layers)
        .map(|_| BlockWeights {
            ln1_g: Tensor::ones(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            w_qkv: Tensor::randn(&[d, 3 * d], std, &mut rng),
            b_qkv: Tensor::zeros(&[3 * d]),
            w_o: Tensor::randn(&[d, d], resid, &mut rng),
            b_o: Tensor::zeros(&[d]),
            ln2_g: Tensor::ones(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w_1: Tensor::randn(&[d, 4 * d], std, &mut rng),
            b_1: Tensor::zeros(&[4 * d]),
            w_2: Tensor::randn(&[4 * d, d], resid, &mut rng),
            b_2: Tensor::zeros(&[d]),
        })
        .collect();
    let weights = BaseWeights {
        wte,
        wpe,
        blocks,
        lnf_g: Tensor::ones(&[d]),
        lnf_b: Tensor::zeros(&[d]),
        head: Tensor::randn(&[d, v], std, &mut rng),
    };
    BaseModel::new(cfg.clone(), weights, tokenizer_fingerprint.to_string())
}

/// One adapter: `x + Up(ReLU(Down(LN(x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer<S> {
    pub ln_g: Tensor<S>,
    pub ln_b: Tensor<S>,
    pub down: Tensor<S>,
    pub down_b: Tensor<S>,
    pub up: Tensor<S>,
    pub up_b: Tensor<S>,
}

const ADAPTER_NAMES: [&str; 6] = ["ln.g", "ln.b", "down.w", "down.b", "up.w", "up.b"];

impl<S: Scalar> AdapterLayer<S> {
    pub fn refs(&self) -> [&Tensor<S>; 6] {
        [&self.ln_g, &self.ln_b, &self.down, &self.down_b, &self.up, &self.up_b]
    }

    pub fn refs_mut(&mut self) -> [&mut Tensor<S>; 6] {
        [
            &mut self.ln_g,
            &mut self.ln_b,
            &mut self.down,
            &mut self.down_b,
            &mut self.up,
            &mut self.up_b,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub domain: String,
    pub init_seed: u64,
    pub base_hash: String,
    pub layers: usize,
    pub d_model: usize,
    pub bottleneck: usize,
    /// Hyperparameters of the run that produced these weights.
    pub train: Option<TrainConfig>,
    pub final_loss: Option<f64>,
    pub soup: Option<SoupProvenance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights<S> {
    pub layers: Vec<AdapterLayer<S>>,
    pub meta: AdapterMeta,
}

impl<S: Scalar> AdapterWeights<S> {
    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::with_capacity(6 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in ADAPTER_NAMES.iter().zip(l.refs()) {
                out.push((format!("adapter.{i}.{n}"), t));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        self.layers.iter().flat_map(|l| l.refs()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers.iter_mut().flat_map(|l| l.refs_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> AdapterWeights<T> {
        AdapterWeights {
            layers: self
                .layers
                .iter()
                .map(|l| AdapterLayer {
                    ln_g: l.ln_g.cast(),
                    ln_b: l.ln_b.cast(),
                    down: l.down.cast(),
                    down_b: l.down_b.cast(),
                    up: l.up.cast(),
                    up_b: l.up_b.cast(),
                })
                .collect(),
            meta: self.meta.clone(),
        }
    }

    /// Errors unless these adapters fit `base` by hash and shape.
    pub fn check_compatible(&self, base: &BaseModel<S>) -> Result<()> {
        let cfg = base.config();
        if self.meta.base_hash != base.hash() {
            return Err(Error::Compatibility(format!(
                "adapter for {} was trained on base {}, bound to {}",
                self.meta.domain,
                short(&self.meta.base_hash),
                short(base.hash())
            )));
        }
        if self.layers.len() != cfg.layers {
            return Err(Error::Compatibility(format!(
                "{} adapter layers for a {}-layer base",
                self.layers.len(),
                cfg.layers
            )));
        }
        let (d, b) = (cfg.d_model, self.meta.bottleneck);
        let want: [&[usize]; 6] = [&[d], &[d], &[d, b], &[b], &[b, d], &[d]];
        for (i, l) in self.layers.iter().enumerate() {
            for ((n, t), w) in ADAPTER_NAMES.iter().zip(l.refs()).zip(want) {
                if t.shape() != w {
                    return Err(Error::Compatibility(format!(
                        "adapter.{i}.{n} has shape {:?}, base needs {w:?}",
                        t.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(
            BASE_MAGIC,
            "adapter",
            serde_json::json!({
                "layers": self.meta.layers,
                "d_model": self.meta.d_model,
                "bottleneck": self.meta.bottleneck,
            }),
            serde_json::to_value(&self.meta).map_err(|e| Error::Format(e.to_string()))?,
            &self.named(),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut ts) = checkpoint::decode::<f32>(BASE_MAGIC, bytes)?;
        if header.kind != "adapter" {
            return Err(Error::Format(format!("expected an adapter checkpoint, found {}", header.kind)));
        }
        let meta: AdapterMeta =
            serde_json::from_value(header.metadata).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let mut layers = Vec::with_capacity(meta.layers);
        for i in 0..meta.layers {
            let mut get = |n: &str| take(&mut ts, &format!("adapter.{i}.{n}")).map(|t| t.cast::<S>());
            layers.push(AdapterLayer {
                ln_g: get("ln.g")?,
                ln_b: get("ln.b")?,
                down: get("down.w")?,
                down_b: get("down.b")?,
                up: get("up.w")?,
                up_b: get("up.b")?,
            });
        }
        if let Some((n, _)) = ts.first() {
            return Err(Error::Format(format!("unexpected tensor {n}")));
        }
        Ok(Self { layers, meta })
    }

    /// Hex SHA-256 of the serialized checkpoint; used as the adapter id.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes().expect("adapter serializes")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?).map_err(|e| annotate(e, path))
    }

    /// Loads and checks compatibility with `base`.
    pub fn load_for(path: &Path, base: &BaseModel<S>) -> Result<Self> {
        let a = Self::load(path)?;
        a.check_compatible(base)?;
        Ok(a)
    }
}

pub(crate) fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Fresh adapters for `base`: seeded-normal down-projection, zero
/// up-projection, so the adapted model starts as the base model.
pub fn attach_adapters<S: Scalar>(base: &BaseModel<S>, init_seed: u64, domain: &str) -> AdapterWeights<S> {
    let cfg = base.config();
    let (d, b) = (cfg.d_model, cfg.bottleneck);
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let std = 1.0 / (d as f64).sqrt();
    let layers = (0..cfg.layers)
        .map(|_| AdapterLayer {
            ln_g: Tensor::ones(&[d]),
            ln_b: Tensor::zeros(&[d]),
            down: Tensor::randn(&[d, b], std, &mut rng),
            down_b: Tensor::zeros(&[b]),
            up: Tensor::zeros(&[b, d]),
            up_b: Tensor::zeros(&[d]),
        })
        .collect();
    AdapterWeights {
        layers,
        meta: AdapterMeta {
            domain: domain.to_string(),
            init_seed,
            base_hash: base.hash().to_string(),
            layers: cfg.layers,
            d_model: d,
            bottleneck: b,
            train: None,
            final_loss: None,
            soup: None,
        },
    }
}
