//! Choosing adapters for a novel domain: embedding similarity, mixture
//! clustering, and exhaustive fixed-size combinations.

mod gmm;

pub use gmm::{adjusted_rand_index, fit_points, GmmModel, GmmOptions, Pca, VARIANCE_FLOOR};

use std::collections::BTreeMap;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::corpus::{DomainCorpus, Purpose, Split};
use crate::error::{config, Result};
use crate::model::{hidden_states, BaseModel};
use crate::scalar::Scalar;
use crate::soup::{RecipeProvenance, SoupRecipe};

/// Unit-norm sequence embeddings of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub domain: String,
    pub rows: Vec<Vec<f64>>,
    pub pooling: String,
    pub split: Split,
}

impl EmbeddingSet {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for r in &self.rows {
            for (a, v) in m.iter_mut().zip(r) {
                *a += v;
            }
        }
        let n = self.rows.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }
}

const EMBED_BATCH: usize = 16;

/// Mean-pooled final hidden states of the base model, L2-normalized.
pub fn embed_sequences<S: Scalar>(
    base: &BaseModel<S>,
    sequences: &[Vec<u32>],
    domain: &str,
    split: Split,
) -> Result<EmbeddingSet> {
    if sequences.is_empty() {
        return Err(config("no sequences to embed"));
    }
    let seq = sequences[0].len();
    if seq == 0 || sequences.iter().any(|s| s.len() != seq) {
        return Err(config("sequences must be non-empty and of equal length"));
    }
    let d = base.config().d_model;
    let mut rows = Vec::with_capacity(sequences.len());
    for chunk in sequences.chunks(EMBED_BATCH) {
        let tokens: Vec<u32> = chunk.iter().flatten().copied().collect();
        let h = hidden_states(base, &tokens, chunk.len(), seq)?;
        for b in 0..chunk.len() {
            let mut pooled = vec![0.0f64; d];
            for t in 0..seq {
                for (p, v) in pooled.iter_mut().zip(h.row(b * seq + t)) {
                    *p += v.as_f64();
                }
            }
            let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                pooled.iter_mut().for_each(|v| *v /= norm);
            }
            rows.push(pooled);
        }
    }
    Ok(EmbeddingSet {
        domain: domain.to_string(),
        rows,
        pooling: "mean_final_hidden_l2".into(),
        split,
    })
}

/// Samples `n` windows of `len` tokens from `split` and embeds them.
pub fn embed_domain<S: Scalar>(
    base: &BaseModel<S>,
    corpus: &DomainCorpus,
    split: Split,
    n: usize,
    len: usize,
    seed: u64,
) -> Result<EmbeddingSet> {
    let seqs = corpus.sample_sequences(split, Purpose::Selection, n, len, seed)?;
    embed_sequences(base, &seqs, &corpus.name, split)
}

/// Which split feeds selection for a domain: train for training domains,
/// held-out for novel ones.
pub fn selection_split(corpus: &DomainCorpus) -> Split {
    match corpus.role {
        crate::corpus::DomainRole::Training => Split::Train,
        crate::corpus::DomainRole::Novel => Split::HeldOut,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: String,
    /// Candidate domains by descending score, ties by name.
    pub ranked: Vec<(String, f64)>,
    pub chosen: Vec<String>,
    pub threshold: f64,
    pub max_adapters: usize,
    /// No candidate met the threshold; the top one was taken anyway.
    pub fallback: bool,
    /// Novel mass landing in clusters no training domain maps to.
    pub unattributed: Option<f64>,
}

impl SelectionResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("selection serializes")
    }

    pub fn provenance(&self) -> RecipeProvenance {
        RecipeProvenance {
            method: self.method.clone(),
            scores: self.ranked.clone(),
            fallback: self.fallback,
        }
    }
}

fn rank_and_choose(
    method: &str,
    mut scores: Vec<(String, f64)>,
    passes: impl Fn(f64) -> bool,
    threshold: f64,
    max: usize,
) -> Result<SelectionResult> {
    if max == 0 {
        return Err(config("max_adapters must be at least 1"));
    }
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let chosen: Vec<String> = scores
        .iter()
        .take_while(|(_, s)| passes(*s))
        .take(max)
        .map(|(d, _)| d.clone())
        .collect();
    let fallback = chosen.is_empty();
    let chosen = if fallback {
        vec![scores[0].0.clone()]
    } else {
        chosen
    };
    Ok(SelectionResult {
        method: method.to_string(),
        ranked: scores,
        chosen,
        threshold,
        max_adapters: max,
        fallback,
        unattributed: None,
    })
}

/// Mean cosine over all (novel row, training row) pairs. Rows are unit
/// vectors, so this is the dot product of the two set means.
pub fn mean_pairwise_cosine(a: &EmbeddingSet, b: &EmbeddingSet) -> f64 {
    a.mean().iter().zip(b.mean()).map(|(x, y)| x * y).sum()
}

/// Ranks training domains by mean cosine to the novel set and keeps those
/// strictly above `threshold`, at most `max`.
pub fn cosine_select(novel: &EmbeddingSet, training: &[EmbeddingSet], threshold: f64, max: usize) -> Result<SelectionResult> {
    if training.is_empty() {
        return Err(config("cosine selection needs at least one training domain"));
    }
    if novel.is_empty() || training.iter().any(|t| t.is_empty()) {
        return Err(config("embedding sets must be non-empty"));
    }
    if let Some(t) = training.iter().find(|t| t.dim() != novel.dim()) {
        return Err(config(format!(
            "{} embeddings have dimension {}, novel set has {}",
            t.domain,
            t.dim(),
            novel.dim()
        )));
    }
    let scores = training
        .iter()
        .map(|t| (t.domain.clone(), mean_pairwise_cosine(novel, t)))
        .collect();
    rank_and_choose("cosine", scores, |s| s > threshold, threshold, max)
}

/// Fits a GMM on the pooled training embeddings.
pub fn fit_gmm(training: &[EmbeddingSet], k: usize, seed: u64, opts: &GmmOptions) -> Result<GmmModel> {
    let points: Vec<Vec<f64>> = training.iter().flat_map(|t| t.rows.iter().cloned()).collect();
    fit_points(&points, k, seed, opts)
}

/// Majority cluster of each training domain; equal counts go to the lower
/// cluster index.
pub fn domain_cluster_map(gmm: &GmmModel, training: &[EmbeddingSet]) -> BTreeMap<String, usize> {
    training
        .iter()
        .map(|t| {
            let mut counts = vec![0usize; gmm.k()];
            for r in &t.rows {
                counts[gmm.predict(r)] += 1;
            }
            let best = (0..gmm.k()).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
            (t.domain.clone(), best)
        })
        .collect()
}

/// Scores each training domain by the fraction of novel sequences assigned
/// to its cluster and keeps those at or above `mass_threshold`.
pub fn cluster_select(
    gmm: &GmmModel,
    map: &BTreeMap<String, usize>,
    novel: &EmbeddingSet,
    mass_threshold: f64,
    max: usize,
) -> Result<SelectionResult> {
    if map.is_empty() {
        return Err(config("cluster selection needs a domain-to-cluster map"));
    }
    if novel.is_empty() {
        return Err(config("novel embedding set is empty"));
    }
    let mut counts = vec![0usize; gmm.k()];
    for r in &novel.rows {
        counts[gmm.predict(r)] += 1;
    }
    let mass: Vec<f64> = counts.iter().map(|&c| c as f64 / novel.len() as f64).collect();
    let mapped: std::collections::BTreeSet<usize> = map.values().copied().collect();
    let unattributed: f64 = (0..gmm.k()).filter(|c| !mapped.contains(c)).map(|c| mass[c]).sum();
    if unattributed > 0.0 {
        log::info!("{}: {:.3} of novel mass fell in unmapped clusters", novel.domain, unattributed);
    }
    let scores = map.iter().map(|(d, &c)| (d.clone(), mass[c])).collect();
    let mut r = rank_and_choose("cluster", scores, |s| s >= mass_threshold, mass_threshold, max)?;
    r.unattributed = Some(unattributed);
    Ok(r)
}

/// Every `size`-subset of `ids` (sorted first) as a uniform recipe, in
/// lexicographic order.
pub fn exhaustive_combos(ids: &[String], size: usize) -> Result<impl Iterator<Item = SoupRecipe>> {
    if size == 0 || size > ids.len() {
        return Err(config(format!("cannot choose {size} of {} adapters", ids.len())));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    Ok(sorted.into_iter().combinations(size).map(|members| {
        SoupRecipe::uniform(members, "exhaustive", None).expect("non-empty combination")
    }))
}
