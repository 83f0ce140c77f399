use super::{AdapterWeights, BaseModel, BaseWeights, ModelConfig};
use crate::error::{dim, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Which parameter group gets gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapters,
}

/// Tape handles for every parameter, in the canonical tensor order of
/// [`super::BaseWeights::named`] and [`AdapterWeights::tensors`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub base: Vec<Var>,
    pub adapters: Vec<Var>,
}

pub struct Forward {
    /// Final hidden states after the output LayerNorm, `B·T × D`.
    pub hidden: Var,
    /// `B·T × V`, absent when only hidden states were requested.
    pub logits: Option<Var>,
}

/// Places parameters on the tape. Adapters must match the base.
pub fn register<S: Scalar>(
    tape: &mut Tape<S>,
    base: &BaseModel<S>,
    adapters: Option<&AdapterWeights<S>>,
    train: Trainable,
) -> Result<ParamVars> {
    if let Some(a) = adapters {
        a.check_compatible(base)?;
    }
    Ok(register_parts(tape, base.weights(), adapters, train))
}

/// [`register`] without the compatibility check, for weights that are
/// still being trained.
pub(crate) fn register_parts<S: Scalar>(
    tape: &mut Tape<S>,
    base: &BaseWeights<S>,
    adapters: Option<&AdapterWeights<S>>,
    train: Trainable,
) -> ParamVars {
    let base_vars = base
        .named()
        .into_iter()
        .map(|(_, t)| tape.leaf(t, train == Trainable::Base))
        .collect();
    let adapter_vars = adapters
        .map(|a| {
            a.tensors()
                .into_iter()
                .map(|t| tape.leaf(t, train == Trainable::Adapters))
                .collect()
        })
        .unwrap_or_default();
    ParamVars {
        base: base_vars,
        adapters: adapter_vars,
    }
}

fn affine<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Causal forward pass over `batch` sequences of `seq` tokens laid out
/// back to back in `tokens`.
pub fn forward_batch<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &ParamVars,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    with_logits: bool,
) -> Result<Forward> {
    if seq == 0 || seq > cfg.context {
        return Err(dim(format!("sequence length {seq} outside 1..={}", cfg.context)));
    }
    if tokens.len() != batch * seq {
        return Err(dim(format!("{} tokens for {batch} sequences of {seq}", tokens.len())));
    }
    let p = &vars.base;
    let positions: Vec<u32> = (0..batch).flat_map(|_| 0..seq as u32).collect();
    let tok = tape.gather(p[0], tokens)?;
    let pos = tape.gather(p[1], &positions)?;
    let mut x = tape.add(tok, pos)?;
    for l in 0..cfg.layers {
        let b = &p[2 + 12 * l..2 + 12 * (l + 1)];
        let h = tape.layer_norm(x, b[0], b[1])?;
        let qkv = affine(tape, h, b[2], b[3])?;
        let att = tape.causal_attention(qkv, batch, seq, cfg.heads)?;
        let att = affine(tape, att, b[4], b[5])?;
        x = tape.add(x, att)?;

        let h = tape.layer_norm(x, b[6], b[7])?;
        let f = affine(tape, h, b[8], b[9])?;
        let f = tape.gelu(f)?;
        let f = affine(tape, f, b[10], b[11])?;
        x = tape.add(x, f)?;

        if !vars.adapters.is_empty() {
            let a = &vars.adapters[6 * l..6 * (l + 1)];
            let h = tape.layer_norm(x, a[0], a[1])?;
            let h = affine(tape, h, a[2], a[3])?;
            let h = tape.relu(h)?;
            let h = affine(tape, h, a[4], a[5])?;
            x = tape.add(x, h)?;
        }
    }
    let n = p.len();
    let hidden = tape.layer_norm(x, p[n - 3], p[n - 2])?;
    let logits = if with_logits {
        Some(tape.matmul(hidden, p[n - 1])?)
    } else {
        None
    };
    Ok(Forward { hidden, logits })
}

/// Logits `T × V` for one token sequence.
pub fn forward_logits<S: Scalar>(
    base: &BaseModel<S>,
    adapters: Option<&AdapterWeights<S>>,
    tokens: &[u32],
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, base, adapters, Trainable::Nothing)?;
    let out = forward_batch(&mut tape, base.config(), &vars, tokens, 1, tokens.len(), true)?;
    Ok(tape.value(out.logits.expect("requested logits")))
}

/// Final hidden states `B·T × D` of the base model.
pub fn hidden_states<S: Scalar>(base: &BaseModel<S>, tokens: &[u32], batch: usize, seq: usize) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let vars = register(&mut tape, base, None, Trainable::Nothing)?;
    let out = forward_batch(&mut tape, base.config(), &vars, tokens, batch, seq, false)?;
    Ok(tape.value(out.hidden))
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::super::*;
    use super::*;
    use crate::tensor::{finite_diff_check, GradCheck};
    use rand::{Rng, SeedableRng};

    fn random_tokens(n: usize, v: usize, seed: u64) -> Vec<u32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0..v as u32)).collect()
    }

    fn perturb(a: &mut AdapterWeights<f32>, seed: u64) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for t in a.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn fresh_base_is_near_uniform() {
        let cfg = tiny();
        let base = init_base::<f32>(&cfg, "").unwrap();
        let toks = random_tokens(cfg.context, cfg.vocab, 1);
        let logits = forward_logits(&base, None, &toks).unwrap();
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(&logits);
        let ce = tape.cross_entropy_mean(l, &toks[..]).unwrap();
        let ppl = (tape.scalar(ce) as f64).exp();
        let v = cfg.vocab as f64;
        assert!(ppl > v / 2.0 && ppl < v * 2.0, "ppl {ppl}");
    }

    #[test]
    fn zero_adapters_are_identity() {
        let base = init_base::<f32>(&tiny(), "").unwrap();
        let ad = attach_adapters(&base, 4, "d");
        for s in 0..10 {
            let toks = random_tokens(12, 40, s);
            let a = forward_logits(&base, None, &toks).unwrap();
            let b = forward_logits(&base, Some(&ad), &toks).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-6);
        }
    }

    #[test]
    fn causal_masking() {
        let base = init_base::<f32>(&tiny(), "").unwrap();
        let mut ad = attach_adapters(&base, 4, "d");
        perturb(&mut ad, 1);
        let toks = random_tokens(10, 40, 2);
        let before = forward_logits(&base, Some(&ad), &toks).unwrap();
        for t in 0..9 {
            let mut changed = toks.clone();
            changed[t + 1] = (changed[t + 1] + 1) % 40;
            let after = forward_logits(&base, Some(&ad), &changed).unwrap();
            for r in 0..=t {
                assert_eq!(before.row(r), after.row(r), "position {r} saw token {}", t + 1);
            }
            assert_ne!(before.row(t + 1), after.row(t + 1));
        }
    }

    #[test]
    fn too_long_and_incompatible_inputs() {
        let base = init_base::<f32>(&tiny(), "").unwrap();
        assert!(forward_logits(&base, None, &[1; 13]).is_err());
        let mut ad = attach_adapters(&base, 1, "d");
        ad.meta.base_hash = "0".repeat(64);
        assert!(matches!(
            forward_logits(&base, Some(&ad), &[1, 2]),
            Err(crate::Error::Compatibility(_))
        ));
    }

    /// Scalar-by-scalar reference for a 1-layer, 1-head model, written
    /// without the tape.
    fn reference_logits(base: &BaseModel<f64>, ad: &AdapterWeights<f64>, toks: &[u32]) -> Vec<Vec<f64>> {
        let w = base.weights();
        let b = &w.blocks[0];
        let a = &ad.layers[0];
        let d = base.config().d_model;
        let t_n = toks.len();
        let ln = |x: &[f64], g: &Tensor<f64>, bb: &Tensor<f64>| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / d as f64;
            let v = x.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / d as f64;
            (0..d).map(|j| (x[j] - m) / (v + 1e-5).sqrt() * g.data()[j] + bb.data()[j]).collect()
        };
        let mat = |x: &[f64], m: &Tensor<f64>, bias: Option<&Tensor<f64>>| -> Vec<f64> {
            let (r, c) = (m.shape()[0], m.shape()[1]);
            (0..c)
                .map(|j| (0..r).map(|i| x[i] * m.data()[i * c + j]).sum::<f64>() + bias.map_or(0.0, |bb| bb.data()[j]))
                .collect()
        };
        let mut xs: Vec<Vec<f64>> = (0..t_n)
            .map(|t| (0..d).map(|j| w.wte.data()[toks[t] as usize * d + j] + w.wpe.data()[t * d + j]).collect())
            .collect();
        let qkv: Vec<Vec<f64>> = xs.iter().map(|x| mat(&ln(x, &b.ln1_g, &b.ln1_b), &b.w_qkv, Some(&b.b_qkv))).collect();
        for t in 0..t_n {
            let q = &qkv[t][..d];
            let scores: Vec<f64> = (0..=t)
                .map(|s| (0..d).map(|j| q[j] * qkv[s][d + j]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            let mut att = vec![0.0; d];
            for s in 0..=t {
                let p = (scores[s] - mx).exp() / z;
                for j in 0..d {
                    att[j] += p * qkv[s][2 * d + j];
                }
            }
            let o = mat(&att, &b.w_o, Some(&b.b_o));
            for j in 0..d {
                xs[t][j] += o[j];
            }
        }
        let gelu = |u: f64| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh());
        xs.iter()
            .map(|x0| {
                let mut x = x0.clone();
                let f: Vec<f64> = mat(&ln(&x, &b.ln2_g, &b.ln2_b), &b.w_1, Some(&b.b_1)).into_iter().map(gelu).collect();
                let f = mat(&f, &b.w_2, Some(&b.b_2));
                for j in 0..d {
                    x[j] += f[j];
                }
                let h: Vec<f64> = mat(&ln(&x, &a.ln_g, &a.ln_b), &a.down, Some(&a.down_b)).into_iter().map(|v| v.max(0.0)).collect();
                let u = mat(&h, &a.up, Some(&a.up_b));
                for j in 0..d {
                    x[j] += u[j];
                }
                mat(&ln(&x, &w.lnf_g, &w.lnf_b), &w.head, None)
            })
            .collect()
    }

    #[test]
    fn matches_scalar_reference() {
        let cfg = ModelConfig {
            layers: 1,
            d_model: 2,
            heads: 1,
            context: 4,
            vocab: 5,
            bottleneck: 2,
            base_seed: 8,
            adapter_seed: 0,
        };
        let base32 = init_base::<f32>(&cfg, "").unwrap();
        // scale weights up so every path contributes visibly
        let mut w = base32.weights().clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for t in w.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-1.0..1.0);
            }
        }
        let base32 = BaseModel::new(cfg.clone(), w, String::new()).unwrap();
        let mut ad = attach_adapters(&base32, 1, "d");
        perturb(&mut ad, 2);
        let toks = [3u32, 1];
        let got = forward_logits(&base32, Some(&ad), &toks).unwrap();
        let want = reference_logits(&base32.cast(), &ad.cast(), &toks);
        for t in 0..2 {
            for j in 0..5 {
                assert!((got.row(t)[j] as f64 - want[t][j]).abs() < 1e-5, "{t},{j}");
            }
        }
    }

    #[test]
    fn lm_loss_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            context: 8,
            vocab: 11,
            bottleneck: 3,
            base_seed: 1,
            adapter_seed: 1,
        };
        let base64 = init_base::<f64>(&cfg, "").unwrap();
        let mut ad = attach_adapters(&base64.cast::<f32>(), 2, "d");
        perturb(&mut ad, 5);
        let ad64 = ad.cast::<f64>();
        let toks = random_tokens(9, 11, 4);
        let objective = |base: &BaseModel<f64>| {
            let cfg = cfg.clone();
            let toks = toks.clone();
            let base = base.clone();
            move |tape: &mut Tape<f64>, v: &[Var]| {
                let base_vars = register(tape, &base, None, Trainable::Nothing)?.base;
                let vars = ParamVars {
                    base: base_vars,
                    adapters: v.to_vec(),
                };
                let out = forward_batch(tape, &cfg, &vars, &toks[..8], 1, 8, true)?;
                tape.cross_entropy_mean(out.logits.unwrap(), &toks[1..])
            }
        };
        let params: Vec<Tensor<f64>> = ad64.tensors().into_iter().cloned().collect();
        let r = finite_diff_check(objective(&base64), &params, &GradCheck::f64_default()).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");

        let base32 = base64.cast::<f32>();
        let obj32 = {
            let cfg = cfg.clone();
            let toks = toks.clone();
            move |tape: &mut Tape<f32>, v: &[Var]| {
                let base_vars = register(tape, &base32, None, Trainable::Nothing)?.base;
                let vars = ParamVars {
                    base: base_vars,
                    adapters: v.to_vec(),
                };
                let out = forward_batch(tape, &cfg, &vars, &toks[..8], 1, 8, true)?;
                tape.cross_entropy_mean(out.logits.unwrap(), &toks[1..])
            }
        };
        let p32: Vec<Tensor<f32>> = ad.tensors().into_iter().cloned().collect();
        let r = finite_diff_check(obj32, &p32, &GradCheck::f32_default().with_probes(40, 1)).unwrap();
        assert!(r.max_rel_error < 1e-2, "{r:?}");
    }
}
