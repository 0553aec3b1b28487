//! Checkpoint directory: `manifest.json`, one little-endian f64 blob, the
//! raw generator state, the effective config and the vocabulary.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::{Vocabulary, VOCAB_FILE};
use crate::encoder::DualModel;
use crate::tensor::optim::AdamState;
use crate::tensor::{ParamStore, Tensor};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
pub const RNG_FILE: &str = "rng.bin";
pub const CONFIG_FILE: &str = "config.toml";
const FORMAT: &str = "cocolm-checkpoint-1";
const RNG_BYTES: usize = 32 + 8 + 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: TensorGroup,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub step: u64,
    pub config_hash: String,
    pub dtype: String,
    pub byte_order: String,
    pub blob: String,
    pub vocab_size: usize,
    pub adam_step_count: u64,
    pub sampler_epoch: u64,
    pub sampler_cursor: usize,
    pub tensors: Vec<TensorEntry>,
}

/// Complete training state at the end of `step` updates.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub config: Config,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub sampler_epoch: u64,
    pub sampler_cursor: usize,
}

pub fn checkpoint_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step:06}"))
}

/// Checkpoint directories under `run_dir`, ordered by step.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let root = run_dir.join("checkpoints");
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let entries = fs::read_dir(&root).map_err(|e| Error::io(format!("listing {}", root.display()), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", root.display()), e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(step) = name.strip_prefix("step_").and_then(|s| s.parse::<u64>().ok()) {
            if entry.path().join(MANIFEST_FILE).exists() {
                out.push((step, entry.path()));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn rng_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(RNG_BYTES);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn rng_from_bytes(bytes: &[u8]) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    if bytes.len() != RNG_BYTES {
        return Err(Error::Checkpoint(format!(
            "rng state has {} bytes, expected {RNG_BYTES}",
            bytes.len()
        )));
    }
    let seed: [u8; 32] = bytes[..32].try_into().expect("length checked");
    let stream = u64::from_le_bytes(bytes[32..40].try_into().expect("length checked"));
    let pos = u128::from_le_bytes(bytes[40..56].try_into().expect("length checked"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

impl Checkpoint {
    /// Write into `dir` (replacing it) via a sibling temporary directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(format!("removing {}", tmp.display()), e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;

        let mut blob: Vec<u8> = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: &str, group: TensorGroup, t: &Tensor| {
            let offset = blob.len() as u64;
            for x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.to_string(),
                group,
                shape: t.shape().to_vec(),
                offset,
                nbytes: blob.len() as u64 - offset,
            });
        };
        for e in self.store.entries() {
            push(&e.name, TensorGroup::Param, &e.value);
        }
        for (e, m) in self.store.entries().iter().zip(&self.adam.m) {
            push(&e.name, TensorGroup::AdamM, m);
        }
        for (e, v) in self.store.entries().iter().zip(&self.adam.v) {
            push(&e.name, TensorGroup::AdamV, v);
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            step: self.step,
            config_hash: self.config.hash(),
            dtype: "float64".into(),
            byte_order: "little".into(),
            blob: BLOB_FILE.into(),
            vocab_size: self.vocab.len(),
            adam_step_count: self.adam.step_count,
            sampler_epoch: self.sampler_epoch,
            sampler_cursor: self.sampler_cursor,
            tensors,
        };
        write(&tmp.join(BLOB_FILE), &blob)?;
        write(
            &tmp.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        write(&tmp.join(RNG_FILE), &rng_bytes(&self.rng))?;
        write(&tmp.join(CONFIG_FILE), self.config.to_toml_string().as_bytes())?;
        self.vocab.save(&tmp.join(VOCAB_FILE))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(format!("removing {}", dir.display()), e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(format!("renaming {}", tmp.display()), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&read(&dir.join(MANIFEST_FILE))?)?;
        if manifest.format != FORMAT || manifest.dtype != "float64" || manifest.byte_order != "little" {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {} ({}, {})",
                manifest.format, manifest.dtype, manifest.byte_order
            )));
        }
        let config = Config::load(&dir.join(CONFIG_FILE))?;
        if config.hash() != manifest.config_hash {
            return Err(Error::Checkpoint(
                "stored config does not match the manifest hash".into(),
            ));
        }
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        if vocab.len() != manifest.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} tokens, manifest says {}",
                vocab.len(),
                manifest.vocab_size
            )));
        }
        let blob = read(&dir.join(&manifest.blob))?;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &manifest.tensors {
            let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
            let numel: usize = e.shape.iter().product();
            if end > blob.len() || e.nbytes as usize != numel * 8 {
                return Err(Error::Checkpoint(format!("tensor {} out of bounds", e.name)));
            }
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            match e.group {
                TensorGroup::Param => params.push((e.name.clone(), t)),
                TensorGroup::AdamM => m.push(t),
                TensorGroup::AdamV => v.push(t),
            }
        }
        let (_, mut store) = build_model(&config, vocab.len())?;
        if m.len() != store.len() || v.len() != store.len() {
            return Err(Error::Checkpoint(
                "optimizer moments do not match the parameters".into(),
            ));
        }
        DualModel::load_values(&mut store, params)?;
        let mut adam = AdamState::new(&store, config.trainer.adam);
        adam.step_count = manifest.adam_step_count;
        for (i, (mi, vi)) in m.into_iter().zip(v).enumerate() {
            if mi.shape() != adam.m[i].shape() || vi.shape() != adam.v[i].shape() {
                return Err(Error::Checkpoint("optimizer moment shape mismatch".into()));
            }
            adam.m[i] = mi;
            adam.v[i] = vi;
        }
        Ok(Self {
            step: manifest.step,
            rng: rng_from_bytes(&read(&dir.join(RNG_FILE))?)?,
            config,
            vocab,
            store,
            adam,
            sampler_epoch: manifest.sampler_epoch,
            sampler_cursor: manifest.sampler_cursor,
        })
    }

    /// Model structure for this checkpoint's config and vocabulary.
    pub fn model(&self) -> Result<DualModel> {
        Ok(build_model(&self.config, self.vocab.len())?.0)
    }
}

/// Model structure plus freshly initialized parameters from a throwaway
/// generator; used where the values are overwritten.
pub(crate) fn build_model(config: &Config, vocab_size: usize) -> Result<(DualModel, ParamStore)> {
    use rand::SeedableRng;
    DualModel::new(&config.model, vocab_size, &mut ChaCha8Rng::seed_from_u64(0))
}
