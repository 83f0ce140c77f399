use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenizer::{Tokenizer, EOS_ID};
use crate::error::{config, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::HeldOut, Split::Test];

    pub fn file_stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::HeldOut => "heldout",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Training,
    Novel,
}

/// Why a split is being read. Each purpose may only touch certain splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Training,
    Selection,
    Evaluation,
    /// Statistics and caching; may read anything.
    Inspection,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub domain: String,
    pub split: Split,
    pub purpose: Purpose,
}

/// Tokenized domain with three disjoint splits and an access log shared by
/// all clones of the handle.
#[derive(Clone, Debug)]
pub struct DomainCorpus {
    pub name: String,
    pub role: DomainRole,
    vocab_size: u32,
    splits: [Arc<Vec<u32>>; 3],
    log: Arc<Mutex<Vec<AccessRecord>>>,
}

fn idx(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::HeldOut => 1,
        Split::Test => 2,
    }
}

impl DomainCorpus {
    pub fn new(
        name: impl Into<String>,
        role: DomainRole,
        vocab_size: u32,
        train: Vec<u32>,
        heldout: Vec<u32>,
        test: Vec<u32>,
    ) -> Result<Self> {
        let name = name.into();
        for (split, toks) in Split::ALL.iter().zip([&train, &heldout, &test]) {
            if let Some(&bad) = toks.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::Data(format!(
                    "{name}/{split}: token {bad} outside vocabulary of {vocab_size}"
                )));
            }
        }
        if role == DomainRole::Novel && heldout.is_empty() {
            return Err(Error::Data(format!("novel domain {name} has no held-out split")));
        }
        Ok(Self {
            name,
            role,
            vocab_size,
            splits: [Arc::new(train), Arc::new(heldout), Arc::new(test)],
            log: Arc::default(),
        })
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn token_count(&self, split: Split) -> usize {
        self.splits[idx(split)].len()
    }

    fn allowed(&self, split: Split, purpose: Purpose) -> bool {
        match purpose {
            Purpose::Inspection => true,
            Purpose::Training => split == Split::Train,
            Purpose::Evaluation => split == Split::Test,
            Purpose::Selection => match split {
                Split::HeldOut => true,
                Split::Train => self.role == DomainRole::Training,
                Split::Test => false,
            },
        }
    }

    /// Reads a split, enforcing and logging the split-hygiene policy:
    /// training reads train, evaluation reads test, selection reads held-out
    /// (or train for training domains) and never test.
    pub fn read(&self, split: Split, purpose: Purpose) -> Result<&[u32]> {
        if !self.allowed(split, purpose) {
            return Err(Error::SplitAccess(format!(
                "{:?} may not read {}/{split}",
                purpose, self.name
            )));
        }
        self.log.lock().expect("access log").push(AccessRecord {
            domain: self.name.clone(),
            split,
            purpose,
        });
        Ok(&self.splits[idx(split)])
    }

    pub fn access_log(&self) -> Vec<AccessRecord> {
        self.log.lock().expect("access log").clone()
    }

    pub fn clear_access_log(&self) {
        self.log.lock().expect("access log").clear();
    }

    /// Hex SHA-256 over name, vocabulary and all three splits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update(self.vocab_size.to_le_bytes());
        for s in &self.splits {
            h.update((s.len() as u64).to_le_bytes());
            for t in s.iter() {
                h.update(t.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// `n` non-overlapping windows of `len` tokens from `split`, chosen with
    /// `seed`.
    pub fn sample_sequences(
        &self,
        split: Split,
        purpose: Purpose,
        n: usize,
        len: usize,
        seed: u64,
    ) -> Result<Vec<Vec<u32>>> {
        let tokens = self.read(split, purpose)?;
        sample_windows(tokens, n, len, seed)
            .map_err(|e| Error::Data(format!("{}/{split}: {e}", self.name)))
    }
}

/// Picks `n` distinct aligned slots of width `len`, so windows never overlap.
pub fn sample_windows(tokens: &[u32], n: usize, len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if n == 0 || len == 0 {
        return Err(config("sample count and length must be positive"));
    }
    if n.saturating_mul(len) > tokens.len() {
        return Err(Error::Data(format!(
            "{n} sequences of {len} tokens need {} tokens, split has {}",
            n * len,
            tokens.len()
        )));
    }
    let slots = tokens.len() / len;
    let mut order: Vec<usize> = (0..slots).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (chosen, _) = order.partial_shuffle(&mut rng, n);
    Ok(chosen.iter().map(|&s| tokens[s * len..(s + 1) * len].to_vec()).collect())
}

/// Fractions of files assigned to train / held-out / test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub heldout: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            heldout: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.heldout, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(config(format!("split fractions {parts:?} must lie in [0, 1]")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` items.
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let fr = [self.train, self.heldout, self.test];
        let exact: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
        let mut counts: [usize; 3] = [0; 3];
        for i in 0..3 {
            counts[i] = (exact[i] + 1e-9).floor() as usize;
        }
        let mut rest = n - counts.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = exact[a] - counts[a] as f64;
            let rb = exact[b] - counts[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            counts[i] += 1;
            rest -= 1;
        }
        counts
    }
}

/// Reads every `.txt` file in `dir`, sorted by file name.
pub fn read_text_dir(dir: &Path) -> Result<Vec<(String, String)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        files.push((name, text));
    }
    files.sort();
    Ok(files)
}

/// Ingests a directory of UTF-8 text files. Files are ordered by the hash of
/// their contents and apportioned to splits, so re-ingesting the same
/// directory reproduces the same splits. Each file ends with an EOS token.
pub fn ingest_domain(
    dir: &Path,
    name: &str,
    role: DomainRole,
    fractions: SplitFractions,
    tokenizer: &Tokenizer,
) -> Result<DomainCorpus> {
    fractions.validate()?;
    let files = read_text_dir(dir)?;
    if files.is_empty() {
        return Err(Error::Ingestion(format!("{} contains no .txt files", dir.display())));
    }
    let mut keyed: Vec<(String, String, String)> = files
        .into_iter()
        .map(|(fname, text)| (hex::encode(Sha256::digest(text.as_bytes())), fname, text))
        .collect();
    keyed.sort();
    let counts = fractions.apportion(keyed.len());
    let mut splits: [Vec<u32>; 3] = Default::default();
    let mut it = keyed.into_iter();
    for (s, &c) in counts.iter().enumerate() {
        for (_, _, text) in it.by_ref().take(c) {
            splits[s].extend(tokenizer.encode(&text));
            splits[s].push(EOS_ID);
        }
    }
    let [train, heldout, test] = splits;
    DomainCorpus::new(name, role, tokenizer.vocab_size() as u32, train, heldout, test)
}
