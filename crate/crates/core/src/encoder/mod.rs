//! Transformer encoders, output heads and the auxiliary/main pair.

mod heads;
mod relpos;
mod transformer;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use heads::{ClmHead, MlmHead, RtdHead};
pub use relpos::{relpos_bucket, relpos_table, validate_relpos, write_relpos_table};
pub use transformer::{sequence_embedding, EncodeTrace, Encoder, Hidden};

use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub relpos_num_buckets: usize,
    pub relpos_max_distance: usize,
    pub max_seq_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_seq_len < 3 {
            return Err(Error::Config("max_seq_len must be at least 3".into()));
        }
        validate_relpos(self.relpos_num_buckets, self.relpos_max_distance)
    }
}

/// Main encoder shape plus the auxiliary depth ratio. The auxiliary model
/// keeps the main model's width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub relpos_num_buckets: usize,
    pub relpos_max_distance: usize,
    pub max_seq_len: usize,
    pub aux_layer_ratio: f64,
}

impl ModelConfig {
    pub fn main(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            relpos_num_buckets: self.relpos_num_buckets,
            relpos_max_distance: self.relpos_max_distance,
            max_seq_len: self.max_seq_len,
        }
    }

    pub fn aux_num_layers(&self) -> usize {
        ((self.num_layers as f64 * self.aux_layer_ratio) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn aux(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.aux_num_layers(),
            ..self.main()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.aux_layer_ratio > 0.0 && self.aux_layer_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "aux_layer_ratio {} outside (0, 1]",
                self.aux_layer_ratio
            )));
        }
        self.main().validate()
    }
}

/// Parameter layout of the auxiliary and main Transformers. Values live in
/// a separate [`ParamStore`]; the token embedding matrix is one parameter
/// used by both input layers and both output layers.
#[derive(Clone, Debug)]
pub struct DualModel {
    config: ModelConfig,
    vocab_size: usize,
    pub embeddings: ParamId,
    pub aux: Encoder,
    pub main: Encoder,
    pub mlm_head: MlmHead,
    pub clm_head: ClmHead,
    pub rtd_head: RtdHead,
}

impl DualModel {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, vocab_size: usize, rng: &mut R) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if vocab_size <= crate::corpus::NUM_SPECIAL {
            return Err(Error::Config(format!(
                "vocabulary of {vocab_size} has no ordinary tokens"
            )));
        }
        let d = config.hidden_dim;
        let mut store = ParamStore::new();
        let embeddings = store.add("embeddings", transformer::normal_matrix(rng, &[vocab_size, d]), true)?;
        let aux = Encoder::new("aux", &config.aux(), &mut store, rng)?;
        let mlm_head = MlmHead::new(&mut store, "aux.mlm", d, vocab_size, rng)?;
        let main = Encoder::new("main", &config.main(), &mut store, rng)?;
        let clm_head = ClmHead::new(&mut store, "main.clm", d, rng)?;
        let rtd_head = RtdHead::new(&mut store, "main.rtd", d, rng)?;
        Ok((
            Self {
                config: config.clone(),
                vocab_size,
                embeddings,
                aux,
                main,
                mlm_head,
                clm_head,
                rtd_head,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Copy named values into `store`, checking that names and shapes match.
    pub fn load_values(store: &mut ParamStore, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                store.len(),
                values.len()
            )));
        }
        for (name, t) in values {
            let id = store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t;
        }
        Ok(())
    }
}
