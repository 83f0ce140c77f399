//! Weight-space averaging of adapters and recipe validation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::model::checkpoint::write_atomic;
use crate::model::{short, AdapterLayer, AdapterMeta, AdapterWeights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::Registry;

/// How a recipe's members were chosen.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecipeProvenance {
    pub method: String,
    /// Candidate scores, highest first.
    pub scores: Vec<(String, f64)>,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoupRecipe {
    /// Adapter ids (content hashes).
    pub members: Vec<String>,
    pub coefficients: Vec<f64>,
    pub provenance: RecipeProvenance,
    pub target: Option<String>,
}

impl SoupRecipe {
    pub fn uniform(members: Vec<String>, method: &str, target: Option<String>) -> Result<Self> {
        if members.is_empty() {
            return Err(config("a soup needs at least one adapter"));
        }
        let l = members.len();
        Ok(Self {
            members,
            coefficients: vec![1.0 / l as f64; l],
            provenance: RecipeProvenance {
                method: method.to_string(),
                ..Default::default()
            },
            target,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("recipe serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("recipe: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Recorded in the metadata of a souped adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoupProvenance {
    pub method: String,
    pub members: Vec<String>,
    pub member_domains: Vec<String>,
    pub coefficients: Vec<f64>,
    pub target: Option<String>,
    pub fallback: bool,
    /// Set when compatibility checks were overridden.
    pub unsafe_override: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Empty,
    CoefficientCount { members: usize, coefficients: usize },
    NonPositiveCoefficient { id: String, value: f64 },
    Normalization { sum: f64 },
    UnknownAdapter(String),
    Duplicate(String),
    BaseHash { offenders: Vec<String> },
    Shape { offenders: Vec<String> },
    InitSeed { offenders: Vec<String> },
}

impl Violation {
    /// Violations that concern compatibility rather than recipe structure.
    pub fn is_compatibility(&self) -> bool {
        matches!(self, Violation::BaseHash { .. } | Violation::Shape { .. } | Violation::InitSeed { .. })
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids = |v: &[String]| v.iter().map(|s| short(s).to_string()).collect::<Vec<_>>().join(", ");
        match self {
            Violation::Empty => write!(f, "recipe has no members"),
            Violation::CoefficientCount { members, coefficients } => {
                write!(f, "{members} members but {coefficients} coefficients")
            }
            Violation::NonPositiveCoefficient { id, value } => {
                write!(f, "coefficient {value} for {} is not positive", short(id))
            }
            Violation::Normalization { sum } => write!(f, "coefficients sum to {sum}, not 1"),
            Violation::UnknownAdapter(id) => write!(f, "adapter {} is not in the registry", short(id)),
            Violation::Duplicate(id) => write!(f, "adapter {} appears twice", short(id)),
            Violation::BaseHash { offenders } => write!(f, "base hash differs for {}", ids(offenders)),
            Violation::Shape { offenders } => write!(f, "adapter shape differs for {}", ids(offenders)),
            Violation::InitSeed { offenders } => write!(f, "adapter init seed differs for {}", ids(offenders)),
        }
    }
}

/// Members whose `key` differs from the first member's.
fn offenders<S, K: PartialEq>(members: &[(&String, &AdapterWeights<S>)], key: impl Fn(&AdapterWeights<S>) -> K) -> Vec<String> {
    let Some((_, first)) = members.first() else {
        return Vec::new();
    };
    let want = key(first);
    members
        .iter()
        .filter(|(_, a)| key(a) != want)
        .map(|(id, _)| (*id).clone())
        .collect()
}

fn compat_violations<S>(members: &[(&String, &AdapterWeights<S>)]) -> Vec<Violation> {
    let mut out = Vec::new();
    let base = offenders(members, |a| a.meta.base_hash.clone());
    if !base.is_empty() {
        out.push(Violation::BaseHash { offenders: base });
    }
    let shape = offenders(members, |a| (a.meta.layers, a.meta.d_model, a.meta.bottleneck, a.layers.len()));
    if !shape.is_empty() {
        out.push(Violation::Shape { offenders: shape });
    }
    let seed = offenders(members, |a| a.meta.init_seed);
    if !seed.is_empty() {
        out.push(Violation::InitSeed { offenders: seed });
    }
    out
}

/// Every constraint the recipe violates; empty iff it is sound.
pub fn validate_recipe<S: Scalar>(recipe: &SoupRecipe, registry: &Registry<S>) -> Vec<Violation> {
    let mut out = Vec::new();
    if recipe.members.is_empty() {
        out.push(Violation::Empty);
    }
    if recipe.coefficients.len() != recipe.members.len() {
        out.push(Violation::CoefficientCount {
            members: recipe.members.len(),
            coefficients: recipe.coefficients.len(),
        });
    }
    for (id, &c) in recipe.members.iter().zip(&recipe.coefficients) {
        if !(c.is_finite() && c > 0.0) {
            out.push(Violation::NonPositiveCoefficient { id: id.clone(), value: c });
        }
    }
    let sum: f64 = recipe.coefficients.iter().sum();
    if !recipe.coefficients.is_empty() && (sum - 1.0).abs() > 1e-9 {
        out.push(Violation::Normalization { sum });
    }
    let mut seen = BTreeSet::new();
    let mut members = Vec::new();
    for id in &recipe.members {
        if !seen.insert(id) {
            out.push(Violation::Duplicate(id.clone()));
        }
        match registry.get(id) {
            Some(a) => members.push((id, a)),
            None => out.push(Violation::UnknownAdapter(id.clone())),
        }
    }
    out.extend(compat_violations(&members));
    out
}

/// Uniform recipe over every adapter, or those of the listed domains.
pub fn uniform_soup<S: Scalar>(registry: &Registry<S>, domains: Option<&[String]>) -> Result<SoupRecipe> {
    let ids: Vec<String> = registry
        .iter()
        .filter(|(_, a)| domains.is_none_or(|ds| ds.contains(&a.meta.domain)))
        .map(|(id, _)| id.clone())
        .collect();
    if ids.is_empty() {
        return Err(config("uniform soup over an empty registry"));
    }
    let members: Vec<(&String, &AdapterWeights<S>)> = ids.iter().map(|id| (id, registry.get(id).unwrap())).collect();
    let bad = compat_violations(&members);
    if !bad.is_empty() {
        return Err(Error::Compatibility(
            bad.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
        ));
    }
    SoupRecipe::uniform(ids, "uniform", None)
}

/// Coefficient-weighted elementwise average of every adapter tensor,
/// accumulated in f64 in ascending id order. Uniform recipes sum first and
/// divide once, so averaging identical adapters is exact.
pub fn average_adapters<S: Scalar>(recipe: &SoupRecipe, registry: &Registry<S>, allow_unsafe: bool) -> Result<AdapterWeights<S>> {
    let violations = validate_recipe(recipe, registry);
    let (compat, structural): (Vec<_>, Vec<_>) = violations.into_iter().partition(Violation::is_compatibility);
    let join = |v: &[Violation]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
    if !structural.is_empty() {
        return Err(config(format!("invalid recipe: {}", join(&structural))));
    }
    let shape_bad = compat.iter().any(|v| matches!(v, Violation::Shape { .. }));
    if !compat.is_empty() && (!allow_unsafe || shape_bad) {
        return Err(Error::Compatibility(join(&compat)));
    }

    let mut order: Vec<(&String, f64)> = recipe.members.iter().zip(recipe.coefficients.iter().copied()).collect();
    order.sort_by(|a, b| a.0.cmp(b.0));
    let members: Vec<(&AdapterWeights<S>, f64)> = order.iter().map(|(id, c)| (registry.get(id).unwrap(), *c)).collect();
    let uniform = recipe.coefficients.windows(2).all(|w| w[0] == w[1]);
    let l = members.len() as f64;

    let first = members[0].0;
    let n_tensors = first.tensors().len();
    let mut averaged: Vec<Tensor<S>> = Vec::with_capacity(n_tensors);
    for t in 0..n_tensors {
        let shape = first.tensors()[t].shape().to_vec();
        let mut acc = vec![0.0f64; first.tensors()[t].len()];
        for (a, c) in &members {
            let src = a.tensors()[t].data();
            for (x, &v) in acc.iter_mut().zip(src) {
                *x += if uniform { v.as_f64() } else { c * v.as_f64() };
            }
        }
        let data = acc.into_iter().map(|x| S::of(if uniform { x / l } else { x })).collect();
        averaged.push(Tensor::new(shape, data)?);
    }
    let mut it = averaged.into_iter();
    let layers = (0..first.layers.len())
        .map(|_| AdapterLayer {
            ln_g: it.next().unwrap(),
            ln_b: it.next().unwrap(),
            down: it.next().unwrap(),
            down_b: it.next().unwrap(),
            up: it.next().unwrap(),
            up_b: it.next().unwrap(),
        })
        .collect();
    let provenance = SoupProvenance {
        method: recipe.provenance.method.clone(),
        members: order.iter().map(|(id, _)| (*id).clone()).collect(),
        member_domains: members.iter().map(|(a, _)| a.meta.domain.clone()).collect(),
        coefficients: order.iter().map(|(_, c)| *c).collect(),
        target: recipe.target.clone(),
        fallback: recipe.provenance.fallback,
        unsafe_override: !compat.is_empty(),
    };
    Ok(AdapterWeights {
        layers,
        meta: AdapterMeta {
            domain: recipe.target.clone().unwrap_or_else(|| "soup".to_string()),
            init_seed: first.meta.init_seed,
            base_hash: first.meta.base_hash.clone(),
            layers: first.meta.layers,
            d_model: first.meta.d_model,
            bottleneck: first.meta.bottleneck,
            train: None,
            final_loss: None,
            soup: Some(provenance),
        },
    })
}
