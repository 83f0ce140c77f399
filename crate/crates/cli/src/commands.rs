//! One function per subcommand. Progress and results go to stdout.

use std::collections::BTreeMap;
use std::sync::Mutex;

use clap::ValueEnum;
use rayon::prelude::*;
use serde_json::json;
use soup_core::corpus::cache::save_corpus;
use soup_core::corpus::synthetic::{desk_preset, train_tokenizer_for};
use soup_core::corpus::{
    generate_synthetic_domain, ingest_domain, read_text_dir, DomainCorpus, DomainRole, Lexicon, Split, Tokenizer,
};
use soup_core::evalkit::{
    cost_estimate, emit_report, perplexity, run_cross_domain_experiment, run_single_domain_experiment, CrossMethod,
    EvalReport, ReportFormat,
};
use soup_core::model::{init_base, BaseModel};
use soup_core::selector::{
    cluster_select, cosine_select, domain_cluster_map, embed_domain, exhaustive_combos, fit_gmm, selection_split,
    SelectionResult,
};
use soup_core::soup::{average_adapters, uniform_soup, SoupRecipe};
use soup_core::trainer::{train_adapter, train_base, write_index, IndexRecord, Registry, TrainConfig, REFERENCE_LRS, REFERENCE_SEEDS};
use soup_core::Error;

use crate::config::{DataMode, PipelineConfig};
use crate::error::{CliError, CliResult};
use crate::workspace::{sha256_hex, BasePointer, Manifest, ManifestDomain, Prepared, Workspace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// Five learning rates by three data seeds.
    Reference,
    /// `sweep.lrs` by `sweep.seeds`.
    Config,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SoupMethod {
    Uniform,
    Cosine,
    Cluster,
    Manual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SelectMethod {
    Cosine,
    Cluster,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    #[value(alias = "cross_domain")]
    CrossDomain,
    #[value(alias = "single_domain")]
    SingleDomain,
    Cell,
}

impl Suite {
    pub fn stem(self) -> &'static str {
        match self {
            Suite::CrossDomain => "cross_domain",
            Suite::SingleDomain => "single_domain",
            Suite::Cell => "cell",
        }
    }
}

fn pool(cfg: &PipelineConfig) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workspace.workers)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn json_bytes<T: serde::Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s.into_bytes()
}

fn corpora_current(ws: &Workspace, key: &str) -> CliResult<Option<Manifest>> {
    let Some(m) = ws.manifest()? else { return Ok(None) };
    if m.key != key || !ws.tokenizer_path().exists() {
        return Ok(None);
    }
    for d in &m.domains {
        match ws.corpus(&d.name, d.role) {
            Ok(c) if c.content_hash() == d.hash => {}
            _ => return Ok(None),
        }
    }
    Ok(Some(m))
}

fn build_synthetic(cfg: &PipelineConfig) -> CliResult<(Tokenizer, Vec<DomainCorpus>)> {
    let d = &cfg.data;
    let lexicon = Lexicon::new(d.n_training, d.seed)?;
    let specs = desk_preset(d.n_training, d.n_novel, d.seed, [d.train_tokens, d.heldout_tokens, d.test_tokens])?;
    let tok = train_tokenizer_for(&specs, &lexicon, d.tokenizer_docs, d.vocab)?;
    let corpora = specs
        .iter()
        .map(|s| generate_synthetic_domain(s, &lexicon, &tok))
        .collect::<soup_core::Result<_>>()?;
    Ok((tok, corpora))
}

fn build_ingested(cfg: &PipelineConfig) -> CliResult<(Tokenizer, Vec<DomainCorpus>)> {
    let d = &cfg.data;
    let raw = &d.raw_dir;
    if !raw.is_dir() {
        return Err(Error::io(raw, std::io::Error::new(std::io::ErrorKind::NotFound, "raw data directory not found")).into());
    }
    let training = if d.training_domains.is_empty() {
        let mut names = Vec::new();
        for e in std::fs::read_dir(raw).map_err(|e| Error::io(raw, e))? {
            let e = e.map_err(|e| Error::io(raw, e))?;
            let name = e.file_name().to_string_lossy().to_string();
            if e.path().is_dir() && !d.novel_domains.contains(&name) {
                names.push(name);
            }
        }
        names.sort();
        names
    } else {
        d.training_domains.clone()
    };
    let mut texts = Vec::new();
    for name in &training {
        texts.extend(read_text_dir(&raw.join(name))?.into_iter().map(|(_, t)| t));
    }
    let tok = Tokenizer::train(&texts, d.vocab)?;
    let roles = training
        .iter()
        .map(|n| (n, DomainRole::Training))
        .chain(d.novel_domains.iter().map(|n| (n, DomainRole::Novel)));
    let corpora = roles
        .map(|(n, role)| ingest_domain(&raw.join(n), n, role, d.fractions(), &tok))
        .collect::<soup_core::Result<_>>()?;
    Ok((tok, corpora))
}

pub fn prepare(cfg: &PipelineConfig, ws: &Workspace) -> CliResult<Manifest> {
    ws.snapshot("prepare", cfg)?;
    let key = sha256_hex(serde_json::to_string(&cfg.data).expect("serializes").as_bytes());
    if let Some(m) = corpora_current(ws, &key)? {
        println!("corpora up to date: {} domains", m.domains.len());
        return Ok(m);
    }
    let (tok, corpora) = match cfg.data.mode {
        DataMode::Synthetic => build_synthetic(cfg)?,
        DataMode::Ingest => build_ingested(cfg)?,
    };
    ws.write("tokenizer.bin", &tok.to_bytes())?;
    for c in &corpora {
        save_corpus(c, &ws.corpus_dir(&c.name))?;
        println!(
            "{:<12} {:<8} train {:>7}  heldout {:>7}  test {:>7}",
            c.name,
            format!("{:?}", c.role).to_lowercase(),
            c.token_count(Split::Train),
            c.token_count(Split::HeldOut),
            c.token_count(Split::Test)
        );
    }
    let manifest = Manifest {
        key,
        tokenizer: tok.fingerprint(),
        domains: corpora
            .iter()
            .map(|c| ManifestDomain {
                name: c.name.clone(),
                role: c.role,
                hash: c.content_hash(),
            })
            .collect(),
    };
    ws.write("corpora/manifest.json", &json_bytes(&manifest))?;
    println!("tokenizer: {} pieces", tok.vocab_size());
    Ok(manifest)
}

fn base_key(cfg: &PipelineConfig, prep: &Prepared) -> String {
    let v = json!({
        "model": cfg.model,
        "base": cfg.base,
        "corpora": prep.manifest.key,
        "tokenizer": prep.manifest.tokenizer,
    });
    sha256_hex(v.to_string().as_bytes())
}

/// The base model for the current config, if it has been trained.
pub fn load_base(cfg: &PipelineConfig, ws: &Workspace, prep: &Prepared) -> CliResult<Option<BaseModel<f32>>> {
    match ws.base_pointer()? {
        Some(p) if p.key == base_key(cfg, prep) => Ok(Some(ws.base(&p)?)),
        _ => Ok(None),
    }
}

fn require_base(cfg: &PipelineConfig, ws: &Workspace, prep: &Prepared) -> CliResult<BaseModel<f32>> {
    load_base(cfg, ws, prep)?.ok_or_else(|| CliError::Missing(vec!["base model for this config (run `train`)".into()]))
}

pub fn ensure_base(cfg: &PipelineConfig, ws: &Workspace, prep: &Prepared) -> CliResult<BaseModel<f32>> {
    if let Some(b) = load_base(cfg, ws, prep)? {
        println!("base {} (cached)", &b.hash()[..12]);
        return Ok(b);
    }
    let model = cfg.model.to_model_config(prep.tokenizer.vocab_size());
    let init = init_base::<f32>(&model, &prep.tokenizer.fingerprint())?;
    let (base, loss) = train_base(&init, &prep.training, &cfg.base.to_train_config())?;
    ws.write(format!("base/{}.ckpt", base.hash()), &base.to_bytes()?)?;
    ws.link("base.ckpt", format!("base/{}.ckpt", base.hash()))?;
    let pointer = BasePointer {
        key: base_key(cfg, prep),
        hash: base.hash().to_string(),
        final_loss: loss,
    };
    ws.write("base/current.json", &json_bytes(&pointer))?;
    println!("base {} trained, final loss {loss:.4}", &base.hash()[..12]);
    Ok(base)
}

#[derive(Clone, Debug, PartialEq)]
struct Job {
    domain: String,
    train: TrainConfig,
}

fn sweep_domain(cfg: &PipelineConfig, prep: &Prepared) -> CliResult<String> {
    if cfg.sweep.domain.is_empty() {
        prep.training
            .first()
            .map(|c| c.name.clone())
            .ok_or_else(|| CliError::Usage("no training domains".into()))
    } else if prep.training.iter().any(|c| c.name == cfg.sweep.domain) {
        Ok(cfg.sweep.domain.clone())
    } else {
        Err(CliError::Usage(format!("sweep domain {:?} is not a training domain", cfg.sweep.domain)))
    }
}

fn grid(cfg: &PipelineConfig, g: Grid) -> (Vec<f64>, Vec<u64>) {
    match g {
        Grid::Reference => (REFERENCE_LRS.to_vec(), REFERENCE_SEEDS.to_vec()),
        Grid::Config => (cfg.sweep.lrs.clone(), cfg.sweep.seeds.clone()),
    }
}

fn sweep_jobs(cfg: &PipelineConfig, domain: &str, g: Grid) -> Vec<Job> {
    let (lrs, seeds) = grid(cfg, g);
    let t = cfg.train.to_train_config();
    lrs.iter()
        .flat_map(|&lr| {
            let t = &t;
            seeds.iter().map(move |&s| Job {
                domain: domain.to_string(),
                train: t.with_lr(lr).with_data_seed(s),
            })
        })
        .collect()
}

fn job_done(records: &[IndexRecord], job: &Job, init_seed: u64, base: &BaseModel<f32>) -> Option<String> {
    records
        .iter()
        .find(|r| {
            r.domain == job.domain
                && r.train.as_ref() == Some(&job.train)
                && r.init_seed == init_seed
                && r.base_hash == base.hash()
        })
        .map(|r| r.id.clone())
}

/// Trains the base if needed, then every requested adapter that is not
/// already in the registry.
pub fn train(
    cfg: &PipelineConfig,
    ws: &Workspace,
    domains: &[String],
    sweep: Option<Grid>,
    base_only: bool,
) -> CliResult<Vec<String>> {
    ws.snapshot("train", cfg)?;
    let prep = Prepared::load(ws)?;
    let base = ensure_base(cfg, ws, &prep)?;
    if base_only {
        return Ok(vec![]);
    }
    let mut jobs = Vec::new();
    let all = domains.is_empty() || domains.iter().any(|d| d == "all");
    if sweep.is_none() || !domains.is_empty() {
        let names: Vec<String> = if all {
            prep.training.iter().map(|c| c.name.clone()).collect()
        } else {
            domains.to_vec()
        };
        for n in names {
            if !prep.training.iter().any(|c| c.name == n) {
                return Err(CliError::Usage(format!("{n:?} is not a training domain")));
            }
            jobs.push(Job {
                domain: n,
                train: cfg.train.to_train_config(),
            });
        }
    }
    if let Some(g) = sweep {
        for j in sweep_jobs(cfg, &sweep_domain(cfg, &prep)?, g) {
            if !jobs.contains(&j) {
                jobs.push(j);
            }
        }
    }

    let init_seed = cfg.model.adapter_seed;
    let existing = ws.index()?;
    let (cached, pending): (Vec<&Job>, Vec<&Job>) = jobs.iter().partition(|j| job_done(&existing, j, init_seed, &base).is_some());
    for j in &cached {
        println!("cached   {:<10} lr {:e} seed {}", j.domain, j.train.lr, j.train.data_seed);
    }
    let records = Mutex::new(existing);
    let run = |job: &Job| -> CliResult<String> {
        let corpus = prep.training.iter().find(|c| c.name == job.domain).expect("checked above");
        let a = train_adapter(&base, corpus, &job.train, init_seed)?;
        let bytes = a.to_bytes()?;
        let id = sha256_hex(&bytes);
        ws.write(Workspace::adapter_rel(&id), &bytes)?;
        ws.link(
            format!("adapters/by-name/{}_lr{:e}_seed{}.ckpt", job.domain, job.train.lr, job.train.data_seed),
            format!("../{id}.ckpt"),
        )?;
        let mut recs = records.lock().expect("index lock");
        recs.push(IndexRecord {
            id: id.clone(),
            path: Workspace::adapter_rel(&id),
            domain: job.domain.clone(),
            train: Some(job.train.clone()),
            init_seed,
            base_hash: base.hash().to_string(),
            final_loss: a.meta.final_loss,
        });
        recs.sort_by(|a, b| a.id.cmp(&b.id));
        recs.dedup_by(|a, b| a.id == b.id);
        write_index(&ws.index_path(), &recs)?;
        Ok(id)
    };
    let results: Vec<CliResult<String>> = pool(cfg)?.install(|| pending.par_iter().map(|j| run(j)).collect());
    let mut failures = Vec::new();
    for (j, r) in pending.iter().zip(results) {
        match r {
            Ok(id) => println!("trained  {:<10} lr {:e} seed {} -> {}", j.domain, j.train.lr, j.train.data_seed, &id[..12]),
            Err(e) => {
                println!("FAILED   {:<10} lr {:e} seed {}: {e}", j.domain, j.train.lr, j.train.data_seed);
                failures.push(e);
            }
        }
    }
    let recs = records.into_inner().expect("index lock");
    let ids: Vec<String> = jobs.iter().filter_map(|j| job_done(&recs, j, init_seed, &base)).collect();
    let reg_ids: Vec<String> = {
        let mut v: Vec<String> = recs.iter().filter(|r| r.base_hash == base.hash()).map(|r| r.id.clone()).collect();
        v.sort();
        v
    };
    println!("registry: {} adapters, checksum {}", reg_ids.len(), checksum(&reg_ids));
    match failures.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(ids),
    }
}

fn checksum(sorted_ids: &[String]) -> String {
    let mut s = String::new();
    for id in sorted_ids {
        s.push_str(id);
        s.push('\n');
    }
    sha256_hex(s.as_bytes())
}

/// Adapters trained with the `[train]` settings, one per domain.
fn domain_registry(cfg: &PipelineConfig, ws: &Workspace, base: &BaseModel<f32>) -> CliResult<Registry<f32>> {
    let t = cfg.train.to_train_config();
    let seed = cfg.model.adapter_seed;
    Ok(ws.registry(base, |r| r.train.as_ref() == Some(&t) && r.init_seed == seed)?)
}

fn adapter_by_domain(reg: &Registry<f32>) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    for (id, a) in reg.iter() {
        m.entry(a.meta.domain.clone()).or_insert_with(|| id.clone());
    }
    m
}

fn run_selection(
    cfg: &PipelineConfig,
    base: &BaseModel<f32>,
    prep: &Prepared,
    novel: &DomainCorpus,
    want_cosine: bool,
    want_cluster: bool,
) -> CliResult<(Option<SelectionResult>, Option<SelectionResult>)> {
    let p = cfg.selection.to_params();
    let train_embs = prep
        .training
        .par_iter()
        .map(|c| embed_domain(base, c, selection_split(c), p.n_sequences, p.seq_len, p.seed))
        .collect::<soup_core::Result<Vec<_>>>()?;
    let emb = embed_domain(base, novel, selection_split(novel), p.n_sequences, p.seq_len, p.seed)?;
    let cos = if want_cosine {
        Some(cosine_select(&emb, &train_embs, p.threshold, p.max_adapters)?)
    } else {
        None
    };
    let clu = if want_cluster {
        let k = p.clusters.unwrap_or(train_embs.len());
        let gmm = fit_gmm(&train_embs, k, p.seed, &p.gmm)?;
        let map = domain_cluster_map(&gmm, &train_embs);
        Some(cluster_select(&gmm, &map, &emb, p.mass_threshold, p.max_adapters)?)
    } else {
        None
    };
    Ok((cos, clu))
}

fn print_selection(s: &SelectionResult) {
    println!("{} selection{}", s.method, if s.fallback { " (fallback to top-1)" } else { "" });
    for (d, score) in &s.ranked {
        let mark = if s.chosen.contains(d) { "*" } else { " " };
        println!("  {mark} {d:<12} {score:.4}");
    }
    if let Some(u) = s.unattributed {
        if u > 0.0 {
            println!("  unattributed mass {u:.4}");
        }
    }
}

pub fn select(cfg: &PipelineConfig, ws: &Workspace, novel: &str, method: SelectMethod) -> CliResult<()> {
    ws.snapshot("select", cfg)?;
    let prep = Prepared::load(ws)?;
    let base = require_base(cfg, ws, &prep)?;
    let target = prep.find(ws, novel)?;
    let (cos, clu) = run_selection(
        cfg,
        &base,
        &prep,
        &target,
        method != SelectMethod::Cluster,
        method != SelectMethod::Cosine,
    )?;
    for s in cos.iter().chain(&clu) {
        print_selection(s);
    }
    ws.write(format!("selections/{novel}.json"), &json_bytes(&json!({"cosine": cos, "cluster": clu})))?;
    Ok(())
}

fn resolve_id(reg: &Registry<f32>, prefix: &str) -> CliResult<String> {
    let hits: Vec<String> = reg.ids().into_iter().filter(|id| id.starts_with(prefix)).collect();
    match hits.as_slice() {
        [one] => Ok(one.clone()),
        [] => Err(CliError::Usage(format!("unknown adapter id {prefix:?}"))),
        _ => Err(CliError::Usage(format!("adapter id prefix {prefix:?} is ambiguous"))),
    }
}

/// Builds, writes and reports a soup for `novel`.
pub fn soup(
    cfg: &PipelineConfig,
    ws: &Workspace,
    novel: &str,
    method: SoupMethod,
    ids: &[String],
    allow_unsafe: bool,
) -> CliResult<SoupRecipe> {
    ws.snapshot("soup", cfg)?;
    let prep = Prepared::load(ws)?;
    let base = require_base(cfg, ws, &prep)?;
    let target = prep.find(ws, novel)?;
    let (reg, mut recipe, selection) = match method {
        SoupMethod::Manual => {
            if ids.is_empty() {
                return Err(CliError::Usage("--method manual needs --ids".into()));
            }
            let reg = ws.registry(&base, |_| true)?;
            let full = ids.iter().map(|p| resolve_id(&reg, p)).collect::<CliResult<Vec<_>>>()?;
            let recipe = SoupRecipe::uniform(full, "manual", None)?;
            (reg, recipe, None)
        }
        SoupMethod::Uniform => {
            let reg = domain_registry(cfg, ws, &base)?;
            let recipe = uniform_soup(&reg, None)?;
            (reg, recipe, None)
        }
        SoupMethod::Cosine | SoupMethod::Cluster => {
            let reg = domain_registry(cfg, ws, &base)?;
            let by_domain = adapter_by_domain(&reg);
            let (cos, clu) =
                run_selection(cfg, &base, &prep, &target, method == SoupMethod::Cosine, method == SoupMethod::Cluster)?;
            let sel = cos.or(clu).expect("one selection requested");
            let missing: Vec<String> = sel.chosen.iter().filter(|d| !by_domain.contains_key(*d)).cloned().collect();
            if !missing.is_empty() {
                return Err(CliError::Missing(missing.iter().map(|d| format!("adapter for {d}")).collect()));
            }
            let mut recipe = SoupRecipe::uniform(sel.chosen.iter().map(|d| by_domain[d].clone()).collect(), &sel.method, None)?;
            recipe.provenance = sel.provenance();
            (reg, recipe, Some(sel))
        }
    };
    recipe.target = Some(target.name.clone());
    let soup = average_adapters(&recipe, &reg, allow_unsafe)?;
    let dir = format!("soups/{novel}/{}", format!("{method:?}").to_lowercase());
    ws.write(format!("{dir}/recipe.json"), recipe.to_json().as_bytes())?;
    ws.write(format!("{dir}/soup.ckpt"), &soup.to_bytes()?)?;
    if let Some(s) = &selection {
        ws.write(format!("{dir}/selection.json"), &json_bytes(s))?;
        print_selection(s);
    }
    println!("soup for {novel}: {} adapters", recipe.len());
    for id in &recipe.members {
        println!("  {} {}", &id[..12], reg.get(id).map(|a| a.meta.domain.as_str()).unwrap_or("?"));
    }
    Ok(recipe)
}

fn stamp(report: &mut EvalReport, cfg: &PipelineConfig) {
    let mut c = serde_json::to_value(cfg).expect("serializes");
    if let serde_json::Value::Object(m) = &mut c {
        m.remove("workspace");
    }
    report.set_meta("config", c);
}

fn finish(ws: &Workspace, report: &EvalReport, stem: &str) -> CliResult<()> {
    emit_report(report, &ws.reports_dir(), stem, &ReportFormat::ALL)?;
    println!("{}", report.render());
    if report.any_absent() {
        let n: usize = report.rows.iter().map(|r| r.cells.iter().filter(|c| c.is_none()).count()).sum();
        return Err(Error::Data(format!("{n} report cells could not be computed")).into());
    }
    Ok(())
}

pub fn eval_cross_domain(cfg: &PipelineConfig, ws: &Workspace) -> CliResult<EvalReport> {
    ws.snapshot("eval", cfg)?;
    let prep = Prepared::load(ws)?;
    let base = require_base(cfg, ws, &prep)?;
    let reg = domain_registry(cfg, ws, &base)?;
    if reg.is_empty() {
        return Err(CliError::Missing(
            prep.training.iter().map(|c| format!("adapter for {} (run `train`)", c.name)).collect(),
        ));
    }
    let by_domain = adapter_by_domain(&reg);
    for c in &prep.training {
        if !by_domain.contains_key(&c.name) {
            println!("warning: no adapter for {}", c.name);
        }
    }
    let methods = cfg
        .eval
        .methods
        .iter()
        .map(|m| m.parse::<CrossMethod>())
        .collect::<soup_core::Result<Vec<_>>>()?;
    let params = cfg.selection.to_params();
    let mut out = pool(cfg)?
        .install(|| run_cross_domain_experiment(&base, &reg, &prep.training, &prep.novel, &methods, &params))?;
    stamp(&mut out.report, cfg);
    finish(ws, &out.report, Suite::CrossDomain.stem())?;
    Ok(out.report)
}

/// Counts the size-3 recipes a sweep over `g` would evaluate, without
/// touching the workspace.
pub fn sweep_dry_run(cfg: &PipelineConfig, g: Grid) -> CliResult<usize> {
    let (lrs, seeds) = grid(cfg, g);
    let labels: Vec<String> = lrs
        .iter()
        .flat_map(|lr| seeds.iter().map(move |s| format!("lr{lr:e}-seed{s}")))
        .collect();
    let n = exhaustive_combos(&labels, 3)?.count();
    println!("{} checkpoints -> {n} recipes of size 3", labels.len());
    Ok(n)
}

pub fn eval_single_domain(cfg: &PipelineConfig, ws: &Workspace, g: Grid) -> CliResult<EvalReport> {
    ws.snapshot("eval", cfg)?;
    let prep = Prepared::load(ws)?;
    let base = require_base(cfg, ws, &prep)?;
    let domain = sweep_domain(cfg, &prep)?;
    let index = ws.index()?;
    let init_seed = cfg.model.adapter_seed;
    let mut ids = Vec::new();
    let mut missing = Vec::new();
    for j in sweep_jobs(cfg, &domain, g) {
        match job_done(&index, &j, init_seed, &base) {
            Some(id) => ids.push(id),
            None => missing.push(format!("{domain} adapter at lr {:e}, seed {}", j.train.lr, j.train.data_seed)),
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Missing(missing));
    }
    let reg = ws.registry(&base, |r| ids.contains(&r.id))?;
    let in_domain = prep.find(ws, &domain)?;
    let ood: Vec<DomainCorpus> = if cfg.sweep.ood.is_empty() {
        prep.novel.clone()
    } else {
        cfg.sweep.ood.iter().map(|n| prep.find(ws, n)).collect::<CliResult<_>>()?
    };
    let mut out = pool(cfg)?
        .install(|| run_single_domain_experiment(&base, &reg, &ids, &in_domain, &ood, cfg.eval.averaging))?;
    stamp(&mut out.report, cfg);
    finish(ws, &out.report, Suite::SingleDomain.stem())?;
    println!("{} recipes evaluated", out.recipes.len());
    for g in &out.lr_groups {
        println!(
            "  lr {:e}: {} recipes, in-domain {}, out-of-domain {}",
            g.lr,
            g.recipes,
            g.in_domain_ppl.map_or("-".into(), |v| format!("{v:.3}")),
            g.ood_ppl.map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
    Ok(out.report)
}

pub fn eval_cell(cfg: &PipelineConfig, ws: &Workspace, method: &str, domain: &str) -> CliResult<f64> {
    let m: CrossMethod = method.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let prep = Prepared::load(ws)?;
    let base = require_base(cfg, ws, &prep)?;
    let target = prep.find(ws, domain)?;
    let ppl = if m == CrossMethod::ZeroShot {
        perplexity(&base, None, &target)?.ppl
    } else {
        let reg = domain_registry(cfg, ws, &base)?;
        let out = run_cross_domain_experiment(
            &base,
            &reg,
            &prep.training,
            std::slice::from_ref(&target),
            &[m],
            &cfg.selection.to_params(),
        )?;
        out.report.rows[0].cells[0]
            .as_ref()
            .map(|c| c.ppl)
            .ok_or_else(|| Error::Data(format!("{method} on {domain} could not be computed")))?
    };
    println!("{ppl:.4}");
    Ok(ppl)
}

/// Re-emits CSV views of stored JSON reports and prints them.
pub fn report(ws: &Workspace, suite: Option<Suite>) -> CliResult<()> {
    let suites = match suite {
        Some(s) => vec![s],
        None => vec![Suite::CrossDomain, Suite::SingleDomain],
    };
    let mut found = 0;
    let mut missing = Vec::new();
    for s in suites {
        let p = ws.reports_dir().join(format!("{}.json", s.stem()));
        if !p.exists() {
            missing.push(format!("{} (run `eval --suite {}`)", p.display(), s.stem().replace('_', "-")));
            continue;
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let r: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        emit_report(&r, &ws.reports_dir(), s.stem(), &[ReportFormat::Csv, ReportFormat::LongCsv])?;
        println!("{}", r.render());
        found += 1;
    }
    if found == 0 {
        return Err(CliError::Missing(missing));
    }
    Ok(())
}

pub fn cost(layers: u64, d_model: u64, bottleneck: u64, t: u64, as_json: bool) -> CliResult<()> {
    let c = cost_estimate(layers, d_model, bottleneck, t)?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&c).expect("serializes"));
    } else {
        println!("extra FLOPs per token (L={layers}, d_model={d_model}, d={bottleneck}, T={t})");
        println!("  adapter / soup      train {:>14}  inference {:>14}", c.adapter_train, c.adapter_inference);
        println!("  hierarchy adapter   train {:>14}  inference {:>14}", c.hierarchy_train, c.hierarchy_inference);
        println!("  ratio               train {:>14}  inference {:>14}", c.train_ratio, c.inference_ratio);
    }
    Ok(())
}
