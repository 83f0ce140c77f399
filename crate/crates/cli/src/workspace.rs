//! On-disk layout of a pipeline workspace.
//!
//! ```text
//! tokenizer.bin
//! corpora/manifest.json
//! corpora/<domain>/{train,heldout,test}.bin
//! base/<hash>.ckpt, base/current.json, base.ckpt -> base/<hash>.ckpt
//! adapters/<id>.ckpt, adapters/by-name/<alias>.ckpt -> ../<id>.ckpt
//! registry.jsonl
//! selections/<novel>.json
//! soups/<novel>/<method>/{selection,recipe}.json, soup.ckpt
//! reports/<suite>.{csv,json}, reports/<suite>_long.csv
//! runs/<command>.toml
//! ```

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use soup_core::corpus::cache::load_corpus;
use soup_core::corpus::{DomainCorpus, DomainRole, Tokenizer};
use soup_core::model::checkpoint::write_atomic;
use soup_core::model::{AdapterWeights, BaseModel};
use soup_core::trainer::{read_index, IndexRecord, Registry};
use soup_core::{Error, Result};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestDomain {
    pub name: String,
    pub role: DomainRole,
    pub hash: String,
}

/// What `prepare` produced and from which data settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub key: String,
    pub tokenizer: String,
    pub domains: Vec<ManifestDomain>,
}

impl Manifest {
    pub fn names(&self, role: DomainRole) -> Vec<String> {
        self.domains.iter().filter(|d| d.role == role).map(|d| d.name.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasePointer {
    pub key: String,
    pub hash: String,
    pub final_loss: f64,
}

/// An open workspace. Holds an exclusive lock until dropped.
pub struct Workspace {
    root: PathBuf,
    _lock: File,
}

impl Workspace {
    /// Creates the root if needed and waits for the workspace lock.
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let lock_path = root.join(".lock");
        let lock = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| Error::io(&lock_path, e))?;
        lock.lock().map_err(|e| Error::io(&lock_path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn tokenizer_path(&self) -> PathBuf {
        self.path("tokenizer.bin")
    }

    pub fn corpus_dir(&self, domain: &str) -> PathBuf {
        self.path("corpora").join(domain)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.path("corpora/manifest.json")
    }

    pub fn base_pointer_path(&self) -> PathBuf {
        self.path("base/current.json")
    }

    pub fn adapter_rel(id: &str) -> String {
        format!("adapters/{id}.ckpt")
    }

    pub fn index_path(&self) -> PathBuf {
        self.path("registry.jsonl")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.path("reports")
    }

    pub fn write(&self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(&p, bytes)?;
        Ok(p)
    }

    /// Points `alias` (relative to the root) at `target` (relative to the
    /// alias' directory), replacing any previous link.
    pub fn link(&self, alias: impl AsRef<Path>, target: impl AsRef<Path>) -> Result<()> {
        let a = self.path(alias);
        if let Some(dir) = a.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        if a.symlink_metadata().is_ok() {
            std::fs::remove_file(&a).map_err(|e| Error::io(&a, e))?;
        }
        #[cfg(unix)]
        std::os::unix::fs::symlink(target.as_ref(), &a).map_err(|e| Error::io(&a, e))?;
        #[cfg(not(unix))]
        {
            let src = a.parent().unwrap().join(target.as_ref());
            std::fs::copy(&src, &a).map_err(|e| Error::io(&a, e))?;
        }
        Ok(())
    }

    /// Writes the resolved configuration of a command run.
    pub fn snapshot(&self, command: &str, cfg: &PipelineConfig) -> Result<()> {
        self.write(format!("runs/{command}.toml"), cfg.to_toml().as_bytes())?;
        Ok(())
    }

    pub fn manifest(&self) -> Result<Option<Manifest>> {
        let p = self.manifest_path();
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        let p = self.tokenizer_path();
        Tokenizer::from_bytes(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)
    }

    pub fn corpus(&self, name: &str, role: DomainRole) -> Result<DomainCorpus> {
        load_corpus(&self.corpus_dir(name), name, role)
    }

    pub fn base_pointer(&self) -> Result<Option<BasePointer>> {
        let p = self.base_pointer_path();
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
    }

    pub fn base(&self, pointer: &BasePointer) -> Result<BaseModel<f32>> {
        BaseModel::load(&self.path(format!("base/{}.ckpt", pointer.hash)))
    }

    pub fn index(&self) -> Result<Vec<IndexRecord>> {
        read_index(&self.index_path())
    }

    /// Loads every indexed adapter built on `base`, checking that each file
    /// still hashes to its id.
    pub fn registry(&self, base: &BaseModel<f32>, keep: impl Fn(&IndexRecord) -> bool) -> Result<Registry<f32>> {
        let mut reg = Registry::new();
        for r in self.index()? {
            if r.base_hash != base.hash() || !keep(&r) {
                continue;
            }
            let p = self.path(&r.path);
            let a = AdapterWeights::<f32>::load_for(&p, base)?;
            if a.content_hash() != r.id {
                return Err(Error::Format(format!("{} does not hash to its id {}", p.display(), r.id)));
            }
            reg.insert_with_id(r.id.clone(), a);
        }
        Ok(reg)
    }
}

/// Manifest, tokenizer and training/novel corpora of a prepared workspace.
pub struct Prepared {
    pub manifest: Manifest,
    pub tokenizer: Tokenizer,
    pub training: Vec<DomainCorpus>,
    pub novel: Vec<DomainCorpus>,
}

impl Prepared {
    pub fn load(ws: &Workspace) -> CliResult<Self> {
        let manifest = ws
            .manifest()?
            .ok_or_else(|| CliError::Missing(vec![format!("{} (run `prepare`)", ws.manifest_path().display())]))?;
        let tokenizer = ws.tokenizer()?;
        let load = |role| -> Result<Vec<DomainCorpus>> {
            manifest.names(role).iter().map(|n| ws.corpus(n, role)).collect()
        };
        Ok(Self {
            training: load(DomainRole::Training)?,
            novel: load(DomainRole::Novel)?,
            tokenizer,
            manifest,
        })
    }

    /// A listed domain, or any corpus directory in the workspace (treated
    /// as novel).
    pub fn find(&self, ws: &Workspace, name: &str) -> CliResult<DomainCorpus> {
        if let Some(c) = self.training.iter().chain(&self.novel).find(|c| c.name == name) {
            return Ok(c.clone());
        }
        if ws.corpus_dir(name).is_dir() {
            return Ok(ws.corpus(name, DomainRole::Novel)?);
        }
        Err(CliError::Usage(format!("unknown domain {name:?}")))
    }
}
