//! Split cache files: `SOUPCRP1`, u32 vocab size, u64 token count, then
//! little-endian u32 ids.

use std::path::Path;

use super::domain::{DomainCorpus, DomainRole, Split};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SOUPCRP1";
const HEADER: usize = 8 + 4 + 8;

pub fn encode_split(vocab_size: u32, tokens: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * tokens.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&vocab_size.to_le_bytes());
    out.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for t in tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

pub fn decode_split(bytes: &[u8]) -> Result<(u32, Vec<u32>)> {
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a corpus cache file (bad magic)".into()));
    }
    let vocab = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let body = &bytes[HEADER..];
    if body.len() as u64 != count.saturating_mul(4) {
        return Err(Error::Format(format!(
            "corpus cache declares {count} tokens but holds {} bytes",
            body.len()
        )));
    }
    let tokens: Vec<u32> = body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Format(format!("token {bad} outside declared vocabulary {vocab}")));
    }
    Ok((vocab, tokens))
}

pub fn write_split(path: &Path, vocab_size: u32, tokens: &[u32]) -> Result<()> {
    std::fs::write(path, encode_split(vocab_size, tokens)).map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<(u32, Vec<u32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_split(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes `<dir>/{train,heldout,test}.bin`.
pub fn save_corpus(corpus: &DomainCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        let path = dir.join(format!("{}.bin", split.file_stem()));
        let tokens = corpus.read(split, super::Purpose::Inspection)?;
        write_split(&path, corpus.vocab_size(), tokens)?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path, name: &str, role: DomainRole) -> Result<DomainCorpus> {
    let mut vocab = None;
    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        let path = dir.join(format!("{}.bin", split.file_stem()));
        let (v, tokens) = read_split(&path)?;
        if *vocab.get_or_insert(v) != v {
            return Err(Error::Format(format!("{}: vocabulary {v} differs from sibling splits", path.display())));
        }
        splits.push(tokens);
    }
    let test = splits.pop().unwrap();
    let heldout = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    DomainCorpus::new(name, role, vocab.unwrap(), train, heldout, test)
}
