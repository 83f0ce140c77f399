//! Byte-level BPE. Ids `0..256` are raw bytes, merges follow in creation
//! order, so every string encodes without out-of-vocabulary tokens.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{config, Error, Result};

const MAGIC: &[u8; 8] = b"SOUPTOK1";

/// Control bytes reused as special tokens; they never occur in ordinary text.
pub const PAD_ID: u32 = 0x00;
pub const BOS_ID: u32 = 0x02;
pub const EOS_ID: u32 = 0x03;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    pieces: Vec<Vec<u8>>,
}

/// Splits text into chunks of leading whitespace plus a non-whitespace run,
/// so `"aaab aaab"` becomes `["aaab", " aaab"]`. Merges never cross chunks.
fn pretokenize(text: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..text.len() {
        if text[i].is_ascii_whitespace() && !text[i - 1].is_ascii_whitespace() {
            out.push(&text[start..i]);
            start = i;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn apply_merge(word: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    let mut w = 0;
    let mut r = 0;
    while r < word.len() {
        if r + 1 < word.len() && word[r] == pair.0 && word[r + 1] == pair.1 {
            word[w] = id;
            r += 2;
        } else {
            word[w] = word[r];
            r += 1;
        }
        w += 1;
    }
    word.truncate(w);
}

impl Tokenizer {
    /// Pure byte tokenizer (`V = 256`).
    pub fn bytes() -> Self {
        Self::from_merges(Vec::new()).expect("no merges")
    }

    /// Learns merges until the vocabulary reaches `vocab_size` or no pair
    /// occurs twice. Ties between equally frequent pairs go to the smaller
    /// `(left, right)` id pair.
    pub fn train<S: AsRef<str>>(texts: &[S], vocab_size: usize) -> Result<Self> {
        if vocab_size < 256 {
            return Err(config(format!("vocabulary size {vocab_size} is below the 256 byte tokens")));
        }
        if texts.iter().all(|t| t.as_ref().is_empty()) {
            return Err(config("cannot train a tokenizer on an empty corpus"));
        }
        let mut counts: HashMap<&[u8], u64> = HashMap::new();
        for t in texts {
            for chunk in pretokenize(t.as_ref().as_bytes()) {
                *counts.entry(chunk).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, u64)> = counts
            .into_iter()
            .map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c))
            .collect();
        words.sort();

        let mut merges = Vec::new();
        while 256 + merges.len() < vocab_size {
            let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pairs.entry((p[0], p[1])).or_default() += c;
                }
            }
            let best = pairs
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some((pair, _)) = best else { break };
            let id = 256 + merges.len() as u32;
            merges.push(pair);
            for (w, _) in &mut words {
                apply_merge(w, pair, id);
            }
        }
        Self::from_merges(merges)
    }

    fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let next = pieces.len() as u32;
            if a >= next || b >= next {
                return Err(Error::Format(format!("merge {rank} refers to unknown token")));
            }
            let mut piece = pieces[a as usize].clone();
            piece.extend_from_slice(&pieces[b as usize]);
            pieces.push(piece);
            ranks.insert((a, b), rank as u32);
        }
        Ok(Self { merges, ranks, pieces })
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Bytes spelled by token `id`.
    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut word: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        loop {
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            apply_merge(&mut word, pair, 256 + rank);
        }
        out.extend_from_slice(&word);
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2);
        let mut cache: HashMap<&[u8], Vec<u32>> = HashMap::new();
        for chunk in pretokenize(text.as_bytes()) {
            let ids = cache.entry(chunk).or_insert_with(|| {
                let mut v = Vec::new();
                self.encode_chunk(chunk, &mut v);
                v
            });
            out.extend_from_slice(ids);
        }
        out
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let piece = self
                .piece(id)
                .ok_or_else(|| Error::Index(format!("token {id} outside vocabulary of {}", self.vocab_size())))?;
            out.extend_from_slice(piece);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        String::from_utf8(self.decode_bytes(ids)?).map_err(|e| Error::Data(format!("decoded bytes are not UTF-8: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.merges.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.vocab_size() as u32).to_le_bytes());
        out.extend_from_slice(&(self.merges.len() as u32).to_le_bytes());
        for &(a, b) in &self.merges {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a tokenizer file (bad magic)".into()));
        }
        let vocab = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() != 16 + 8 * n || vocab != 256 + n {
            return Err(Error::Format("tokenizer file truncated or inconsistent".into()));
        }
        let merges = bytes[16..]
            .chunks_exact(8)
            .map(|c| {
                (
                    u32::from_le_bytes(c[..4].try_into().unwrap()),
                    u32::from_le_bytes(c[4..].try_into().unwrap()),
                )
            })
            .collect();
        Self::from_merges(merges)
    }

    /// Hex SHA-256 of the serialized tokenizer.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
