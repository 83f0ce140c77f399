//! Perplexity scoring, logit ensembles, the cost model, reports and the two
//! experiment pipelines.

mod cost;
mod experiments;
mod report;

pub use cost::{cost_estimate, CostEstimate};
pub use experiments::{
    run_cross_domain_experiment, run_single_domain_experiment, CrossDomainOutcome, CrossMethod, LrGroup, RecipeScore,
    SelectionParams, SingleDomainOutcome,
};
pub use report::{emit_report, read_matrix_csv, Cell, EvalReport, Matrix, ReportFiles, ReportFormat, ReportRow};

use serde::{Deserialize, Serialize};

use crate::corpus::{DomainCorpus, Purpose, Split};
use crate::error::{config, Error, Result};
use crate::model::{forward_batch, register, AdapterWeights, BaseModel, Trainable};
use crate::scalar::Scalar;
use crate::tensor::Tape;

const EVAL_BATCH: usize = 16;

/// How ensemble members are combined per position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean of raw logits, then softmax.
    #[default]
    Logits,
    /// Mean of per-member softmax distributions.
    Probabilities,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub ppl: f64,
    /// Mean cross-entropy per predicted token.
    pub nats: f64,
    pub tokens: usize,
    /// Forward FLOPs spent, summed over ensemble members.
    pub flops: u64,
}

/// Non-overlapping windows of up to `ctx + 1` tokens at stride `ctx`, so
/// every token after the first is predicted exactly once.
fn windows(tokens: &[u32], ctx: usize) -> Vec<&[u32]> {
    let mut out = Vec::new();
    let mut s = 0;
    while s + 1 < tokens.len() {
        out.push(&tokens[s..(s + ctx + 1).min(tokens.len())]);
        s += ctx;
    }
    out
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Scores `tokens` with the base alone (no members), one adapter, or an
/// ensemble of adapters.
fn score<S: Scalar>(
    base: &BaseModel<S>,
    members: &[&AdapterWeights<S>],
    averaging: Averaging,
    tokens: &[u32],
) -> Result<Perplexity> {
    if tokens.len() < 2 {
        return Err(Error::Data(format!("{} tokens is too few to score", tokens.len())));
    }
    let cfg = base.config();
    let v = cfg.vocab;
    let all = windows(tokens, cfg.context);
    let mut groups: Vec<Vec<&[u32]>> = Vec::new();
    for w in all {
        match groups.last_mut() {
            Some(g) if g.len() < EVAL_BATCH && g[0].len() == w.len() => g.push(w),
            _ => groups.push(vec![w]),
        }
    }
    let member_opts: Vec<Option<&AdapterWeights<S>>> = if members.is_empty() {
        vec![None]
    } else {
        members.iter().map(|&a| Some(a)).collect()
    };
    let l = member_opts.len() as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut flops = 0u64;
    for g in groups {
        let seq = g[0].len() - 1;
        let inputs: Vec<u32> = g.iter().flat_map(|w| w[..seq].iter().copied()).collect();
        let targets: Vec<u32> = g.iter().flat_map(|w| w[1..].iter().copied()).collect();
        let mut logits: Vec<Vec<S>> = Vec::with_capacity(member_opts.len());
        for m in &member_opts {
            let mut tape = Tape::<S>::new();
            let vars = register(&mut tape, base, *m, Trainable::Nothing)?;
            let out = forward_batch(&mut tape, cfg, &vars, &inputs, g.len(), seq, true)?;
            logits.push(tape.values(out.logits.expect("requested logits")).to_vec());
            flops += tape.flops();
        }
        let mut row = vec![0.0f64; v];
        for (r, &t) in targets.iter().enumerate() {
            let span = r * v..(r + 1) * v;
            let nll = match averaging {
                Averaging::Logits => {
                    row.iter_mut().for_each(|x| *x = 0.0);
                    for z in &logits {
                        for (a, b) in row.iter_mut().zip(&z[span.clone()]) {
                            *a += b.as_f64() / l;
                        }
                    }
                    log_sum_exp(&row) - row[t as usize]
                }
                Averaging::Probabilities => {
                    let per: Vec<f64> = logits
                        .iter()
                        .map(|z| {
                            let zs: Vec<f64> = z[span.clone()].iter().map(|x| x.as_f64()).collect();
                            zs[t as usize] - log_sum_exp(&zs)
                        })
                        .collect();
                    l.ln() - log_sum_exp(&per)
                }
            };
            total += nll;
        }
        count += targets.len();
    }
    let nats = total / count as f64;
    if !nats.is_finite() {
        return Err(Error::Numeric(format!("mean cross-entropy is {nats}")));
    }
    Ok(Perplexity {
        ppl: nats.exp(),
        nats,
        tokens: count,
        flops,
    })
}

/// Perplexity of a raw token stream.
pub fn perplexity_of_tokens<S: Scalar>(
    base: &BaseModel<S>,
    adapters: Option<&AdapterWeights<S>>,
    tokens: &[u32],
) -> Result<Perplexity> {
    let members: Vec<&AdapterWeights<S>> = adapters.into_iter().collect();
    score(base, &members, Averaging::Logits, tokens)
}

/// Perplexity over a corpus' test split.
pub fn perplexity<S: Scalar>(
    base: &BaseModel<S>,
    adapters: Option<&AdapterWeights<S>>,
    corpus: &DomainCorpus,
) -> Result<Perplexity> {
    let tokens = corpus.read(Split::Test, Purpose::Evaluation)?;
    if tokens.is_empty() {
        return Err(Error::Data(format!("{} has an empty test split", corpus.name)));
    }
    perplexity_of_tokens(base, adapters, tokens)
}

/// Runs every member separately and combines their outputs per position.
pub fn logit_ensemble_perplexity<S: Scalar>(
    base: &BaseModel<S>,
    adapters: &[&AdapterWeights<S>],
    corpus: &DomainCorpus,
    averaging: Averaging,
) -> Result<Perplexity> {
    if adapters.len() < 2 {
        return Err(config("an ensemble needs at least two adapters"));
    }
    for a in adapters {
        a.check_compatible(base)?;
    }
    let tokens = corpus.read(Split::Test, Purpose::Evaluation)?;
    if tokens.is_empty() {
        return Err(Error::Data(format!("{} has an empty test split", corpus.name)));
    }
    score(base, adapters, averaging, tokens)
}
