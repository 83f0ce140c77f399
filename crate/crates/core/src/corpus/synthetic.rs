//! Topic-biased synthetic text. Every topic owns a disjoint pool of
//! syllables from which its nouns, verbs and adjectives are built; function
//! words are shared. A domain is a weighting over topics plus a grammar.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::domain::{DomainCorpus, DomainRole};
use super::tokenizer::{Tokenizer, EOS_ID};
use crate::error::{config, Result};

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";
const CODAS: &[&str] = &["", "n", "r", "s"];
const FUNCTION_WORDS: &[&str] = &["the", "a", "of", "and", "to", "in", "with", "on", "this", "that", "is", "it"];
const SYLLABLES_PER_TOPIC: usize = 14;
const NOUNS: usize = 40;
const VERBS: usize = 16;
const ADJECTIVES: usize = 16;

#[derive(Clone, Debug)]
struct TopicWords {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
    noun_weights: WeightedIndex<f64>,
}

/// Word inventory shared by every domain of an experiment.
#[derive(Clone, Debug)]
pub struct Lexicon {
    topics: Vec<TopicWords>,
    seed: u64,
}

fn make_words(pool: &[String], count: usize, rng: &mut ChaCha8Rng, taken: &mut std::collections::HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.gen_range(2..=3);
        let w: String = (0..n).map(|_| pool.choose(rng).unwrap().as_str()).collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl Lexicon {
    pub fn new(n_topics: usize, seed: u64) -> Result<Self> {
        let mut syllables: Vec<String> = Vec::new();
        for &c in CONSONANTS {
            for &v in VOWELS {
                for coda in CODAS {
                    syllables.push(format!("{}{}{coda}", c as char, v as char));
                }
            }
        }
        let max = syllables.len() / SYLLABLES_PER_TOPIC;
        if n_topics == 0 || n_topics > max {
            return Err(config(format!("topic count must be in 1..={max}, got {n_topics}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        syllables.shuffle(&mut rng);
        let zipf: Vec<f64> = (0..NOUNS).map(|r| 1.0 / (r as f64 + 1.0)).collect();
        let mut taken = std::collections::HashSet::new();
        let topics = syllables
            .chunks(SYLLABLES_PER_TOPIC)
            .take(n_topics)
            .map(|pool| TopicWords {
                nouns: make_words(pool, NOUNS, &mut rng, &mut taken),
                verbs: make_words(pool, VERBS, &mut rng, &mut taken),
                adjectives: make_words(pool, ADJECTIVES, &mut rng, &mut taken),
                noun_weights: WeightedIndex::new(&zipf).unwrap(),
            })
            .collect();
        Ok(Self { topics, seed })
    }

    pub fn n_topics(&self) -> usize {
        self.topics.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Content words (nouns, verbs, adjectives) of one topic.
    pub fn topic_words(&self, topic: usize) -> Vec<&str> {
        let t = &self.topics[topic];
        t.nouns.iter().chain(&t.verbs).chain(&t.adjectives).map(String::as_str).collect()
    }
}

/// Sentence shapes: `N` noun, `V` verb, `A` adjective, anything else literal.
const GRAMMARS: &[&[&str]] = &[
    &["the A N V the N", "a N V with the A N", "the N of the N V", "the A N V"],
    &["N and N V in the A N", "this A N is A", "the N V to the N", "N V"],
    &["it is the A N that V", "on the N the A N V", "a N V a N", "the N is A and A"],
];

pub fn grammar_count() -> usize {
    GRAMMARS.len()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub role: DomainRole,
    pub seed: u64,
    /// Weight of each topic; documents pick their topic from this profile.
    pub profile: Vec<f64>,
    pub grammar: usize,
    /// Token targets for train, held-out and test.
    pub budget: [usize; 3],
}

impl SyntheticDomainSpec {
    pub fn validate(&self, lexicon: &Lexicon) -> Result<()> {
        if self.budget.contains(&0) {
            return Err(config(format!("{}: token budgets must be positive, got {:?}", self.name, self.budget)));
        }
        if self.profile.is_empty() || self.profile.len() > lexicon.n_topics() {
            return Err(config(format!(
                "{}: profile covers {} topics, lexicon has {}",
                self.name,
                self.profile.len(),
                lexicon.n_topics()
            )));
        }
        if self.profile.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.profile.iter().sum::<f64>() <= 0.0 {
            return Err(config(format!("{}: profile weights must be non-negative with positive sum", self.name)));
        }
        if self.grammar >= GRAMMARS.len() {
            return Err(config(format!("{}: unknown grammar {}", self.name, self.grammar)));
        }
        Ok(())
    }
}

struct Generator<'a> {
    lexicon: &'a Lexicon,
    grammar: &'static [&'static str],
    topics: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl<'a> Generator<'a> {
    fn new(spec: &SyntheticDomainSpec, lexicon: &'a Lexicon, stream: u64) -> Self {
        let seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03);
        Self {
            lexicon,
            grammar: GRAMMARS[spec.grammar],
            topics: WeightedIndex::new(&spec.profile).expect("validated profile"),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn sentence(&mut self, topic: usize, out: &mut String) {
        let words = &self.lexicon.topics[topic];
        let template = *self.grammar.choose(&mut self.rng).unwrap();
        let mut last_noun: Option<usize> = None;
        let mut last_adj: Option<usize> = None;
        for slot in template.split(' ') {
            let word: &str = match slot {
                "N" => {
                    let i = match last_adj.take() {
                        // adjectives prefer a fixed partner noun
                        Some(a) if self.rng.gen_bool(0.5) => (a * 3) % NOUNS,
                        _ => words.noun_weights.sample(&mut self.rng),
                    };
                    last_noun = Some(i);
                    &words.nouns[i]
                }
                "V" => {
                    let i = match last_noun {
                        Some(n) if self.rng.gen_bool(0.6) => (n * 7) % VERBS,
                        _ => self.rng.gen_range(0..VERBS),
                    };
                    &words.verbs[i]
                }
                "A" => {
                    let i = self.rng.gen_range(0..ADJECTIVES);
                    last_adj = Some(i);
                    &words.adjectives[i]
                }
                lit => {
                    debug_assert!(FUNCTION_WORDS.contains(&lit));
                    lit
                }
            };
            if !out.is_empty() && !out.ends_with('\n') {
                out.push(' ');
            }
            out.push_str(word);
        }
        out.push('.');
    }

    fn document(&mut self) -> String {
        let topic = self.topics.sample(&mut self.rng);
        let n = self.rng.gen_range(5..=10);
        let mut doc = String::new();
        for _ in 0..n {
            self.sentence(topic, &mut doc);
        }
        doc
    }
}

/// `n_docs` documents from a stream independent of the corpus splits, for
/// tokenizer training.
pub fn sample_documents(spec: &SyntheticDomainSpec, lexicon: &Lexicon, n_docs: usize) -> Result<Vec<String>> {
    spec.validate(lexicon)?;
    let mut g = Generator::new(spec, lexicon, 99);
    Ok((0..n_docs).map(|_| g.document()).collect())
}

/// Builds the three splits from separate random streams, each document
/// followed by EOS, truncated to the budget.
pub fn generate_synthetic_domain(spec: &SyntheticDomainSpec, lexicon: &Lexicon, tokenizer: &Tokenizer) -> Result<DomainCorpus> {
    spec.validate(lexicon)?;
    let mut splits: [Vec<u32>; 3] = Default::default();
    for (s, tokens) in splits.iter_mut().enumerate() {
        let budget = spec.budget[s];
        let mut g = Generator::new(spec, lexicon, s as u64);
        while tokens.len() < budget {
            tokens.extend(tokenizer.encode(&g.document()));
            tokens.push(EOS_ID);
        }
        tokens.truncate(budget);
    }
    let [train, heldout, test] = splits;
    DomainCorpus::new(spec.name.clone(), spec.role, tokenizer.vocab_size() as u32, train, heldout, test)
}

/// Training domains each own one topic; novel domain `j` mixes topics
/// `2j` and `2j + 1` evenly.
pub fn desk_preset(n_training: usize, n_novel: usize, seed: u64, budget: [usize; 3]) -> Result<Vec<SyntheticDomainSpec>> {
    if 2 * n_novel > n_training {
        return Err(config(format!("{n_novel} novel mixtures need at least {} training topics", 2 * n_novel)));
    }
    let mut specs = Vec::with_capacity(n_training + n_novel);
    for i in 0..n_training {
        let mut profile = vec![0.0; n_training];
        profile[i] = 1.0;
        specs.push(SyntheticDomainSpec {
            name: format!("domain{i}"),
            role: DomainRole::Training,
            seed: seed.wrapping_mul(1000).wrapping_add(i as u64),
            profile,
            grammar: i % GRAMMARS.len(),
            budget,
        });
    }
    for j in 0..n_novel {
        let mut profile = vec![0.0; n_training];
        profile[2 * j] = 0.5;
        profile[2 * j + 1] = 0.5;
        specs.push(SyntheticDomainSpec {
            name: format!("novel{j}"),
            role: DomainRole::Novel,
            seed: seed.wrapping_mul(1000).wrapping_add(500 + j as u64),
            profile,
            grammar: j % GRAMMARS.len(),
            budget,
        });
    }
    Ok(specs)
}

/// Trains a tokenizer on sample documents from every spec.
pub fn train_tokenizer_for(specs: &[SyntheticDomainSpec], lexicon: &Lexicon, docs_per_domain: usize, vocab_size: usize) -> Result<Tokenizer> {
    let mut texts = Vec::new();
    for s in specs {
        texts.extend(sample_documents(s, lexicon, docs_per_domain)?);
    }
    Tokenizer::train(&texts, vocab_size)
}

/// Unigram distribution of `tokens` over `vocab` ids.
pub fn unigram(tokens: &[u32], vocab: usize) -> Vec<f64> {
    let mut counts = vec![0.0; vocab];
    for &t in tokens {
        counts[t as usize] += 1.0;
    }
    let n = tokens.len().max(1) as f64;
    counts.iter_mut().for_each(|c| *c /= n);
    counts
}

/// Jensen–Shannon divergence in bits, bounded by 1.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: f64, m: f64| if a > 0.0 { a * (a / m).log2() } else { 0.0 };
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        total += 0.5 * kl(a, m) + 0.5 * kl(b, m);
    }
    total
}
