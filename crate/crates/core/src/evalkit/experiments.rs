use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::report::{Cell, EvalReport};
use super::{logit_ensemble_perplexity, perplexity, Averaging, Perplexity};
use crate::corpus::{DomainCorpus, Purpose, Split};
use crate::error::{config, Error, Result};
use crate::model::{AdapterWeights, BaseModel};
use crate::scalar::Scalar;
use crate::selector::{
    cluster_select, cosine_select, domain_cluster_map, embed_domain, exhaustive_combos, fit_gmm, selection_split,
    GmmModel, GmmOptions, SelectionResult,
};
use crate::soup::{average_adapters, SoupRecipe};
use crate::trainer::Registry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub threshold: f64,
    pub mass_threshold: f64,
    pub max_adapters: usize,
    pub n_sequences: usize,
    pub seq_len: usize,
    /// GMM components; defaults to the number of training domains.
    pub clusters: Option<usize>,
    pub seed: u64,
    pub gmm: GmmOptions,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            threshold: 0.15,
            mass_threshold: 0.10,
            max_adapters: 5,
            n_sequences: 100,
            seq_len: 64,
            clusters: None,
            seed: 0,
            gmm: GmmOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CrossMethod {
    ZeroShot,
    SingleCosine,
    SingleCluster,
    UniformSoup,
    CosineSoup,
    ClusterSoup,
    OracleBestSingle,
    OracleClusterPlusTwo,
}

impl CrossMethod {
    pub const ALL: [CrossMethod; 8] = [
        CrossMethod::ZeroShot,
        CrossMethod::SingleCosine,
        CrossMethod::SingleCluster,
        CrossMethod::UniformSoup,
        CrossMethod::CosineSoup,
        CrossMethod::ClusterSoup,
        CrossMethod::OracleBestSingle,
        CrossMethod::OracleClusterPlusTwo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CrossMethod::ZeroShot => "zero-shot",
            CrossMethod::SingleCosine => "single-cosine",
            CrossMethod::SingleCluster => "single-cluster",
            CrossMethod::UniformSoup => "soup-uniform",
            CrossMethod::CosineSoup => "soup-cosine",
            CrossMethod::ClusterSoup => "soup-cluster",
            CrossMethod::OracleBestSingle => "oracle-best-single",
            CrossMethod::OracleClusterPlusTwo => "oracle-cluster+2",
        }
    }
}

impl fmt::Display for CrossMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CrossMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| config(format!("unknown method {s:?}")))
    }
}

pub struct CrossDomainOutcome {
    pub report: EvalReport,
    /// Per novel domain, in report order.
    pub cosine: Vec<SelectionResult>,
    pub cluster: Vec<SelectionResult>,
    pub gmm: GmmModel,
    pub cluster_map: BTreeMap<String, usize>,
}

fn cell(p: Perplexity, members: Vec<String>, corpus: &DomainCorpus) -> Cell {
    Cell {
        ppl: p.ppl,
        nats: p.nats,
        tokens: p.tokens,
        flops: p.flops,
        members,
        split: Split::Test.file_stem().to_string(),
        corpus_hash: corpus.content_hash(),
    }
}

/// Scores the uniform soup of `ids`; a single id is scored as is.
fn eval_soup<S: Scalar>(
    base: &BaseModel<S>,
    registry: &Registry<S>,
    ids: &[String],
    corpus: &DomainCorpus,
) -> Result<Cell> {
    let p = match ids {
        [] => perplexity(base, None, corpus)?,
        [id] => perplexity(base, registry.get(id), corpus)?,
        _ => {
            let recipe = SoupRecipe::uniform(ids.to_vec(), "eval", Some(corpus.name.clone()))?;
            let soup = average_adapters(&recipe, registry, false)?;
            perplexity(base, Some(&soup), corpus)?
        }
    };
    Ok(cell(p, ids.to_vec(), corpus))
}

/// Confirms selection never touched test data and scoring touched nothing else.
fn audit(corpora: &[DomainCorpus]) -> Result<serde_json::Value> {
    let mut seen = BTreeSet::new();
    for c in corpora {
        for r in c.access_log() {
            let ok = match r.purpose {
                Purpose::Evaluation => r.split == Split::Test,
                Purpose::Selection => r.split != Split::Test,
                _ => true,
            };
            if !ok {
                return Err(Error::SplitAccess(format!(
                    "{} read {:?} for {:?}",
                    r.domain, r.split, r.purpose
                )));
            }
            seen.insert((r.domain, r.split.file_stem(), format!("{:?}", r.purpose).to_lowercase()));
        }
    }
    Ok(json!(seen.into_iter().collect::<Vec<_>>()))
}

/// Zero-shot, single-adapter, soup and oracle rows for every novel domain.
/// Selection reads held-out data only; scoring reads test data only.
pub fn run_cross_domain_experiment<S: Scalar>(
    base: &BaseModel<S>,
    registry: &Registry<S>,
    training: &[DomainCorpus],
    novel: &[DomainCorpus],
    methods: &[CrossMethod],
    params: &SelectionParams,
) -> Result<CrossDomainOutcome> {
    if training.is_empty() || novel.is_empty() {
        return Err(config("cross-domain run needs training and novel domains"));
    }
    let adapter_of: BTreeMap<String, String> = training
        .iter()
        .filter_map(|c| {
            let mut ids = registry.ids_for_domain(&c.name);
            ids.sort();
            ids.into_iter().next().map(|id| (c.name.clone(), id))
        })
        .collect();
    let missing: Vec<String> = training
        .iter()
        .filter(|c| !adapter_of.contains_key(&c.name))
        .map(|c| c.name.clone())
        .collect();
    if !missing.is_empty() {
        log::warn!("no adapter for {}", missing.join(", "));
    }

    let train_embs = training
        .par_iter()
        .map(|c| embed_domain(base, c, selection_split(c), params.n_sequences, params.seq_len, params.seed))
        .collect::<Result<Vec<_>>>()?;
    let k = params.clusters.unwrap_or(training.len());
    let gmm = fit_gmm(&train_embs, k, params.seed, &params.gmm)?;
    let cluster_map = domain_cluster_map(&gmm, &train_embs);
    let all_domains: Vec<String> = training.iter().map(|c| c.name.clone()).sorted().collect();

    let mut report = EvalReport::new("cross-domain perplexity", novel.iter().map(|c| c.name.clone()).collect());
    let mut rows: BTreeMap<CrossMethod, Vec<Option<Cell>>> = BTreeMap::new();
    let mut notes: BTreeMap<CrossMethod, Vec<String>> = BTreeMap::new();
    let mut cos_results = Vec::new();
    let mut clu_results = Vec::new();

    for nc in novel {
        let emb = embed_domain(base, nc, selection_split(nc), params.n_sequences, params.seq_len, params.seed)?;
        let cos = cosine_select(&emb, &train_embs, params.threshold, params.max_adapters)?;
        let clu = cluster_select(&gmm, &cluster_map, &emb, params.mass_threshold, params.max_adapters)?;

        let others: Vec<String> = all_domains.iter().filter(|d| !clu.chosen.contains(d)).cloned().collect();
        let plus_two: Vec<Vec<String>> = if others.len() >= 2 {
            others
                .iter()
                .tuple_combinations()
                .map(|(a, b)| clu.chosen.iter().chain([a, b]).cloned().collect())
                .collect()
        } else {
            vec![clu.chosen.iter().chain(&others).cloned().collect()]
        };
        let wanted = |m: CrossMethod| -> Vec<Vec<String>> {
            match m {
                CrossMethod::ZeroShot => vec![vec![]],
                CrossMethod::SingleCosine => vec![vec![cos.ranked[0].0.clone()]],
                CrossMethod::SingleCluster => vec![vec![clu.ranked[0].0.clone()]],
                CrossMethod::UniformSoup => vec![all_domains.clone()],
                CrossMethod::CosineSoup => vec![cos.chosen.clone()],
                CrossMethod::ClusterSoup => vec![clu.chosen.clone()],
                CrossMethod::OracleBestSingle => all_domains.iter().map(|d| vec![d.clone()]).collect(),
                CrossMethod::OracleClusterPlusTwo => plus_two.clone(),
            }
        };
        let mut sets: BTreeSet<Vec<String>> = BTreeSet::new();
        for &m in methods {
            for mut s in wanted(m) {
                s.sort();
                sets.insert(s);
            }
        }
        let evaluated: BTreeMap<Vec<String>, Option<Cell>> = sets
            .into_par_iter()
            .map(|domains| {
                let ids: Option<Vec<String>> = domains.iter().map(|d| adapter_of.get(d).cloned()).collect();
                let c = match ids {
                    Some(mut ids) => {
                        ids.sort();
                        Some(eval_soup(base, registry, &ids, nc)?)
                    }
                    None => None,
                };
                Ok((domains, c))
            })
            .collect::<Result<_>>()?;
        let lookup = |s: &[String]| {
            let mut s = s.to_vec();
            s.sort();
            evaluated[&s].clone()
        };

        for &m in methods {
            let candidates = wanted(m);
            let c = if matches!(m, CrossMethod::OracleBestSingle | CrossMethod::OracleClusterPlusTwo) {
                let scored: Vec<(Vec<String>, Cell)> = candidates
                    .iter()
                    .filter_map(|s| lookup(s).map(|c| (s.clone(), c)))
                    .collect();
                let best = scored.into_iter().min_by(|a, b| a.1.nats.total_cmp(&b.1.nats));
                if let Some((s, _)) = &best {
                    notes.entry(m).or_default().push(format!("{}: {}", nc.name, s.join("+")));
                }
                best.map(|b| b.1)
            } else {
                let c = lookup(&candidates[0]);
                if c.is_none() {
                    notes.entry(m).or_default().push(format!("{}: adapter missing", nc.name));
                }
                c
            };
            rows.entry(m).or_default().push(c);
        }
        cos_results.push(cos);
        clu_results.push(clu);
    }

    for &m in methods {
        let note = notes.get(&m).map(|n| n.join("; "));
        report.push_row(m.name(), rows.remove(&m).unwrap_or_default(), note)?;
    }
    let audit = audit(novel)?;
    report.set_meta("base_hash", json!(base.hash()));
    report.set_meta("registry_checksum", json!(registry.checksum()));
    report.set_meta("selection", serde_json::to_value(params).expect("params serialize"));
    report.set_meta("adapters", json!(adapter_of));
    report.set_meta("missing_adapters", json!(missing));
    report.set_meta("cluster_map", json!(cluster_map));
    report.set_meta(
        "corpus_hashes",
        json!(training
            .iter()
            .chain(novel)
            .map(|c| (c.name.clone(), c.content_hash()))
            .collect::<BTreeMap<_, _>>()),
    );
    report.set_meta(
        "selections",
        json!(novel
            .iter()
            .zip(cos_results.iter().zip(&clu_results))
            .map(|(n, (c, k))| (n.name.clone(), json!({"cosine": c, "cluster": k})))
            .collect::<BTreeMap<_, _>>()),
    );
    report.set_meta("access_audit", audit);
    Ok(CrossDomainOutcome {
        report,
        cosine: cos_results,
        cluster: clu_results,
        gmm,
        cluster_map,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeScore {
    pub members: Vec<String>,
    pub lrs: Vec<f64>,
    pub in_domain: Cell,
    pub ood: Vec<Cell>,
    /// Mean nats over the out-of-domain corpora; NaN when there are none.
    pub ood_nats: f64,
}

/// Soups whose members all share one learning rate. Perplexities are
/// `exp` of the mean nats over the group's recipes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrGroup {
    pub lr: f64,
    pub recipes: usize,
    pub in_domain_ppl: Option<f64>,
    pub ood_ppl: Option<f64>,
}

pub struct SingleDomainOutcome {
    pub report: EvalReport,
    pub recipes: Vec<RecipeScore>,
    /// Highest learning rate first.
    pub lr_groups: Vec<LrGroup>,
}

fn mean_cell(cells: &[&Cell]) -> Cell {
    let nats = cells.iter().map(|c| c.nats).sum::<f64>() / cells.len() as f64;
    Cell {
        ppl: nats.exp(),
        nats,
        tokens: cells[0].tokens,
        flops: cells[0].flops,
        members: cells.iter().flat_map(|c| c.members.iter().cloned()).unique().collect(),
        split: cells[0].split.clone(),
        corpus_hash: cells[0].corpus_hash.clone(),
    }
}

/// Evaluates every 3-adapter uniform soup from one domain's sweep in-domain
/// and out-of-domain.
pub fn run_single_domain_experiment<S: Scalar>(
    base: &BaseModel<S>,
    registry: &Registry<S>,
    ids: &[String],
    in_domain: &DomainCorpus,
    ood: &[DomainCorpus],
    averaging: Averaging,
) -> Result<SingleDomainOutcome> {
    if ids.len() < 3 {
        return Err(config(format!("single-domain soups need at least 3 checkpoints, got {}", ids.len())));
    }
    let mut lr_of = BTreeMap::new();
    let mut seeds = BTreeSet::new();
    for id in ids {
        let a = registry.get(id).ok_or_else(|| config(format!("unknown adapter {id}")))?;
        let lr = a
            .meta
            .train
            .as_ref()
            .map(|t| t.lr)
            .ok_or_else(|| config(format!("adapter {id} has no training record")))?;
        lr_of.insert(id.clone(), lr);
        seeds.insert(a.meta.init_seed);
    }
    if seeds.len() > 1 {
        return Err(Error::Compatibility(format!("sweep mixes init seeds {seeds:?}")));
    }
    let corpora: Vec<&DomainCorpus> = std::iter::once(in_domain).chain(ood).collect();
    let score_all = |members: &[String]| -> Result<Vec<Cell>> {
        corpora.iter().map(|c| eval_soup(base, registry, members, c)).collect()
    };
    let score_of = |members: Vec<String>| -> Result<RecipeScore> {
        let cells = score_all(&members)?;
        let ood_nats = if ood.is_empty() {
            f64::NAN
        } else {
            cells[1..].iter().map(|c| c.nats).sum::<f64>() / ood.len() as f64
        };
        Ok(RecipeScore {
            lrs: members.iter().map(|m| lr_of[m]).collect(),
            members,
            in_domain: cells[0].clone(),
            ood: cells[1..].to_vec(),
            ood_nats,
        })
    };
    let mut sorted = ids.to_vec();
    sorted.sort();
    let recipes: Vec<RecipeScore> = exhaustive_combos(&sorted, 3)?
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|r| score_of(r.members))
        .collect::<Result<_>>()?;
    let singles: Vec<RecipeScore> = sorted
        .par_iter()
        .map(|id| score_of(vec![id.clone()]))
        .collect::<Result<_>>()?;
    let zero = score_all(&[])?;
    let uniform = score_of(sorted.clone())?;

    let by_id = |a: &RecipeScore, b: &RecipeScore| a.in_domain.nats.total_cmp(&b.in_domain.nats);
    let best_single = singles.iter().min_by(|a, b| by_id(a, b)).expect("non-empty");
    let best_id = recipes.iter().min_by(|a, b| by_id(a, b)).expect("non-empty");
    let best_ood = recipes
        .iter()
        .filter(|r| r.ood_nats.is_finite())
        .min_by(|a, b| a.ood_nats.total_cmp(&b.ood_nats));

    let mut lrs: Vec<f64> = lr_of.values().copied().collect();
    lrs.sort_by(|a, b| b.total_cmp(a));
    lrs.dedup();

    let mut domains = vec![in_domain.name.clone()];
    domains.extend(ood.iter().map(|c| c.name.clone()));
    let mut report = EvalReport::new("single-domain soups", domains);
    let full = |r: &RecipeScore| -> Vec<Option<Cell>> {
        std::iter::once(&r.in_domain).chain(&r.ood).cloned().map(Some).collect()
    };
    report.push_row("zero-shot", zero.into_iter().map(Some).collect(), None)?;
    report.push_row("best-single", full(best_single), Some(best_single.members.join("+")))?;
    let mut lr_groups = Vec::new();
    for &lr in &lrs {
        let group: Vec<&RecipeScore> = recipes.iter().filter(|r| r.lrs.iter().all(|&x| x == lr)).collect();
        let cells: Vec<Option<Cell>> = (0..corpora.len())
            .map(|j| {
                let cs: Vec<&Cell> = group
                    .iter()
                    .map(|r| if j == 0 { &r.in_domain } else { &r.ood[j - 1] })
                    .collect();
                (!cs.is_empty()).then(|| mean_cell(&cs))
            })
            .collect();
        let ood_ppl = if ood.is_empty() || group.is_empty() {
            None
        } else {
            Some((group.iter().map(|r| r.ood_nats).sum::<f64>() / group.len() as f64).exp())
        };
        lr_groups.push(LrGroup {
            lr,
            recipes: group.len(),
            in_domain_ppl: cells[0].as_ref().map(|c| c.ppl),
            ood_ppl,
        });
        report.push_row(&format!("soup lr={lr:e}"), cells, Some(format!("{} recipes", group.len())))?;
    }
    report.push_row("best-soup-in-domain", full(best_id), Some(best_id.members.join("+")))?;
    match best_ood {
        Some(r) => report.push_row("best-soup-ood", full(r), Some(r.members.join("+")))?,
        None => report.push_row("best-soup-ood", vec![None; corpora.len()], Some("no out-of-domain corpora".into()))?,
    }
    report.push_row("soup-all", full(&uniform), None)?;

    let members: Vec<&AdapterWeights<S>> = best_id.members.iter().map(|id| registry.get(id).expect("known")).collect();
    let ens: Vec<Option<Cell>> = corpora
        .iter()
        .map(|c| {
            logit_ensemble_perplexity(base, &members, c, averaging).map(|p| Some(cell(p, best_id.members.clone(), c)))
        })
        .collect::<Result<_>>()?;
    report.push_row("logit-ensemble", ens, Some(format!("{averaging:?} averaging of best-soup-in-domain members")))?;

    report.set_meta("base_hash", json!(base.hash()));
    report.set_meta("checkpoints", json!(lr_of));
    report.set_meta("recipes_evaluated", json!(recipes.len()));
    report.set_meta("lr_groups", serde_json::to_value(&lr_groups).expect("groups serialize"));
    report.set_meta(
        "corpus_hashes",
        json!(corpora.iter().map(|c| (c.name.clone(), c.content_hash())).collect::<BTreeMap<_, _>>()),
    );
    report.set_meta("access_audit", audit(&corpora.iter().map(|&c| c.clone()).collect::<Vec<_>>())?);
    Ok(SingleDomainOutcome {
        report,
        recipes,
        lr_groups,
    })
}
