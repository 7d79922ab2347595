//! Stage checkpoints on disk.
//!
//! A checkpoint is a directory holding `weights.bin`, `config.json`,
//! `meta.json` and `metrics.csv`. `weights.bin` is a sequence of records
//! (all little-endian):
//!
//! ```text
//! u64 count | count x ( u64 name_len | name bytes (UTF-8) | tensor )
//! ```
//!
//! where `tensor` is the shape-prefixed layout of [`crate::tensor`].

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{read_tensor, write_tensor};

const MAX_NAME: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Data,
    Aligner,
    Vae,
    Gan,
    Diffusion,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Data, Stage::Aligner, Stage::Vae, Stage::Gan, Stage::Diffusion];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Aligner => "aligner",
            Stage::Vae => "vae",
            Stage::Gan => "gan",
            Stage::Diffusion => "diffusion",
        }
    }

    /// Checkpoints that must exist before this stage can run.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Data => &[],
            Stage::Aligner => &[Stage::Data],
            Stage::Vae => &[Stage::Data, Stage::Aligner],
            Stage::Gan => &[Stage::Data, Stage::Aligner, Stage::Vae],
            Stage::Diffusion => &[Stage::Data, Stage::Aligner, Stage::Vae],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub corpus_fingerprint: String,
    /// Hash of `config.json`.
    pub config_hash: String,
    pub seed: u64,
    /// Hash of `weights.bin`; empty for the data stage.
    pub weights_sha256: String,
    /// `weights_sha256` of each upstream checkpoint this one was built on.
    pub upstream: BTreeMap<Stage, String>,
    pub created_unix_ms: u128,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn weights_path(&self) -> PathBuf {
        self.dir.join("weights.bin")
    }

    pub fn config_path(&self) -> PathBuf {
        self.dir.join("config.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    /// Reads `meta.json` and checks that it belongs to `stage`.
    pub fn open(dir: &Path, stage: Stage) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(Error::MissingPrerequisite(stage.name().into()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&meta_path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path.display())))?;
        if meta.stage != stage {
            return Err(Error::Checkpoint(format!(
                "{} holds stage {}, expected {stage}",
                dir.display(),
                meta.stage
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
        })
    }

    /// Deserializes `config.json` and checks it against the recorded hash.
    pub fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        let bytes = fs::read(self.config_path())?;
        let got = hex::encode(Sha256::digest(&bytes));
        if got != self.meta.config_hash {
            return Err(Error::Checkpoint(format!(
                "{}: config hash {got} does not match recorded {}",
                self.config_path().display(),
                self.meta.config_hash
            )));
        }
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", self.config_path().display())))
    }

    /// Reads the weight records after checking the recorded file hash.
    pub fn weights(&self) -> Result<BTreeMap<String, Tensor>> {
        let bytes = fs::read(self.weights_path())?;
        let got = hex::encode(Sha256::digest(&bytes));
        if got != self.meta.weights_sha256 {
            return Err(Error::Checkpoint(format!(
                "{}: content hash {got} does not match recorded {}",
                self.weights_path().display(),
                self.meta.weights_sha256
            )));
        }
        read_records(&mut bytes.as_slice())
    }

    /// Fails unless the checkpoint was built from `fingerprint`.
    pub fn require_corpus(&self, fingerprint: &str) -> Result<()> {
        if self.meta.corpus_fingerprint != fingerprint {
            return Err(Error::Checkpoint(format!(
                "stage {} was trained on corpus {} but the current corpus is {fingerprint}",
                self.meta.stage, self.meta.corpus_fingerprint
            )));
        }
        Ok(())
    }

    /// Fails if `upstream` changed since this checkpoint was written.
    pub fn require_upstream(&self, upstream: &Checkpoint) -> Result<()> {
        let stage = upstream.meta.stage;
        match self.meta.upstream.get(&stage) {
            Some(h) if *h == upstream.meta.weights_sha256 => Ok(()),
            Some(_) => Err(Error::Checkpoint(format!(
                "stage {} is stale: {stage} was retrained after it",
                self.meta.stage
            ))),
            None => Err(Error::Checkpoint(format!(
                "stage {} does not record a {stage} dependency",
                self.meta.stage
            ))),
        }
    }
}

pub fn now_unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Writes named parameter stores as one record file. Names are
/// `"{store}/{param}"`.
pub fn write_records<W: Write>(w: &mut W, stores: &[(&str, &ParamStore)]) -> Result<()> {
    let count: usize = stores.iter().map(|(_, s)| s.len()).sum();
    w.write_all(&(count as u64).to_le_bytes())?;
    for (prefix, store) in stores {
        for (name, var) in store.iter() {
            let full = format!("{prefix}/{name}");
            w.write_all(&(full.len() as u64).to_le_bytes())?;
            w.write_all(full.as_bytes())?;
            let t = var.as_tensor();
            write_tensor(w, t.dims(), &t.flatten_all()?.to_vec1::<f64>()?)?;
        }
    }
    Ok(())
}

pub fn read_records<R: Read>(r: &mut R) -> Result<BTreeMap<String, Tensor>> {
    let mut b = [0u8; 8];
    let mut next = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut b)
            .map_err(|e| Error::CorruptTensor(format!("truncated record header: {e}")))?;
        Ok(u64::from_le_bytes(b))
    };
    let count = next(r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = next(r)?;
        if len > MAX_NAME {
            return Err(Error::CorruptTensor(format!("record name of {len} bytes")));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)
            .map_err(|e| Error::CorruptTensor(format!("truncated record name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::CorruptTensor("record name is not UTF-8".into()))?;
        let (dims, data) = read_tensor(r)?;
        let t = Tensor::from_vec(data, dims, &Device::Cpu)?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::CorruptTensor(format!("duplicate record {name}")));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::CorruptTensor("trailing bytes after records".into()));
    }
    Ok(out)
}

/// Copies records `"{prefix}/..."` into `store`. The store's parameter set
/// and every shape must match exactly.
pub fn restore_store(records: &BTreeMap<String, Tensor>, prefix: &str, store: &ParamStore) -> Result<()> {
    let head = format!("{prefix}/");
    let mine: BTreeMap<&str, &Tensor> = records
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&head).map(|k| (k, v)))
        .collect();
    if mine.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{prefix}: checkpoint has {} parameters, model has {}",
            mine.len(),
            store.len()
        )));
    }
    for (name, value) in mine {
        store.set(name, value)?;
    }
    Ok(())
}

/// Writes a complete checkpoint directory. `weights` are written first and
/// `meta.json` last, so a directory with `meta.json` is always complete.
pub fn write_checkpoint<C: Serialize>(
    dir: &Path,
    stage: Stage,
    config: &C,
    stores: &[(&str, &ParamStore)],
    metrics_csv: &str,
    corpus_fingerprint: &str,
    seed: u64,
    upstream: BTreeMap<Stage, String>,
) -> Result<Checkpoint> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    let mut weights = Vec::new();
    write_records(&mut weights, stores)?;
    fs::write(dir.join("weights.bin"), &weights)?;
    let config_bytes = serde_json::to_vec_pretty(config)?;
    fs::write(dir.join("config.json"), &config_bytes)?;
    fs::write(dir.join("metrics.csv"), metrics_csv)?;
    let meta = CheckpointMeta {
        stage,
        corpus_fingerprint: corpus_fingerprint.to_string(),
        config_hash: hex::encode(Sha256::digest(&config_bytes)),
        seed,
        weights_sha256: hex::encode(Sha256::digest(&weights)),
        upstream,
        created_unix_ms: now_unix_ms(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(Checkpoint {
        dir: dir.to_path_buf(),
        meta,
    })
}

/// Exclusive writer lock on a checkpoint root, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        let path = root.join("LOCK");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Checkpoint(format!(
                "{} is locked by another writer (remove {} if that process is gone)",
                root.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Appends one JSON object per line to `path`.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    serde_json::to_writer(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<serde_json::Value>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in std::io::BufRead::lines(f) {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn store(seed: u64, width: usize) -> ParamStore {
        let mut ps = ParamStore::new(seed);
        let mut root = ps.root();
        root.pp("a").get("w", (2, width), Init::Normal(1.0)).unwrap();
        root.get("b", width, Init::Normal(1.0)).unwrap();
        ps
    }

    #[test]
    fn records_round_trip_exactly() {
        let ps = store(1, 3);
        let mut buf = Vec::new();
        write_records(&mut buf, &[("m", &ps)]).unwrap();
        let recs = read_records(&mut buf.as_slice()).unwrap();
        let other = store(2, 3);
        restore_store(&recs, "m", &other).unwrap();
        assert_eq!(ps.fingerprint("").unwrap(), other.fingerprint("").unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[("m", &store(1, 3))]).unwrap();
        let recs = read_records(&mut buf.as_slice()).unwrap();
        let err = restore_store(&recs, "m", &store(1, 4)).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn truncated_records_are_corrupt() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[("m", &store(1, 3))]).unwrap();
        for cut in [3, 12, buf.len() - 1] {
            let err = read_records(&mut &buf[..cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptTensor(_)), "{err}");
        }
        buf.push(0);
        assert!(read_records(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn checkpoint_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let ps = store(1, 3);
        let ck = write_checkpoint(
            &dir.path().join("vae"),
            Stage::Vae,
            &serde_json::json!({"k": 1}),
            &[("vae", &ps)],
            "step,loss\n",
            "abc",
            9,
            BTreeMap::new(),
        )
        .unwrap();
        let reopened = Checkpoint::open(&ck.dir, Stage::Vae).unwrap();
        assert_eq!(reopened.meta, ck.meta);
        assert!(reopened.weights().is_ok());
        assert!(reopened.require_corpus("abc").is_ok());
        assert!(reopened.require_corpus("xyz").is_err());
        assert!(Checkpoint::open(&ck.dir, Stage::Gan).is_err());
        let mut bytes = fs::read(ck.weights_path()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(ck.weights_path(), bytes).unwrap();
        assert!(reopened.weights().is_err());
    }

    #[test]
    fn missing_checkpoint_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let err = Checkpoint::open(&dir.path().join("vae"), Stage::Vae).unwrap_err();
        assert_eq!(err.to_string(), "requires stage: vae");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()).unwrap(), s);
            assert_eq!(serde_json::to_value(s).unwrap(), serde_json::json!(s.name()));
        }
        assert!(Stage::parse("vocoder").is_err());
    }
}
