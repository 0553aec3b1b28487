use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::relpos::relpos_bucket;
use super::EncoderConfig;
use crate::corpus::PaddedBatch;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

const INIT_STD: f64 = 0.02;

pub(crate) fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0), false)?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d]), false)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain)?;
        let bias = g.param(store, self.bias)?;
        Ok(g.layer_norm(x, gain, bias)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{prefix}.w"), normal_matrix(rng, &[d_in, d_out]), true)?,
            b: Some(store.add(format!("{prefix}.b"), Tensor::zeros(&[d_out]), false)?),
        })
    }

    /// Without a bias. A bias on attention keys shifts every logit of a
    /// query by the same amount and has no effect after the softmax.
    pub fn new_unbiased<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{prefix}.w"), normal_matrix(rng, &[d_in, d_out]), true)?,
            b: None,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let y = g.matmul(x, w, false)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b)?;
                Ok(g.add_broadcast(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNormParams,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNormParams,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// Contextual states `[batch * seq_len, hidden]`, row `b * seq_len + t`.
#[derive(Clone, Copy, Debug)]
pub struct Hidden {
    pub var: Var,
    pub batch: usize,
    pub seq_len: usize,
}

impl Hidden {
    pub fn row(&self, b: usize, t: usize) -> usize {
        b * self.seq_len + t
    }
}

/// Hidden states plus the per-layer attention probabilities `[B, H, T, T]`.
#[derive(Clone, Debug)]
pub struct EncodeTrace {
    pub hidden: Hidden,
    pub attention: Vec<Var>,
}

/// Pre-LayerNorm bidirectional Transformer with a relative position bias
/// table shared by all of its layers. Token embeddings live outside.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    relpos: ParamId,
    emb_ln: LayerNormParams,
    blocks: Vec<Block>,
    final_ln: LayerNormParams,
}

fn maybe_dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, p: f64, rng: &mut Option<&mut R>) -> Result<Var> {
    match rng.as_deref_mut() {
        Some(r) if p > 0.0 => Ok(g.dropout(x, p, r)?),
        _ => Ok(x),
    }
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        config: &EncoderConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let relpos = store.add(
            format!("{prefix}.relpos"),
            normal_matrix(rng, &[config.relpos_num_buckets, config.num_heads]),
            false,
        )?;
        let emb_ln = LayerNormParams::new(store, &format!("{prefix}.emb_ln"), d)?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("{prefix}.layer{l}");
            blocks.push(Block {
                ln1: LayerNormParams::new(store, &format!("{p}.ln1"), d)?,
                q: Linear::new(store, &format!("{p}.q"), d, d, rng)?,
                k: Linear::new_unbiased(store, &format!("{p}.k"), d, d, rng)?,
                v: Linear::new(store, &format!("{p}.v"), d, d, rng)?,
                o: Linear::new(store, &format!("{p}.o"), d, d, rng)?,
                ln2: LayerNormParams::new(store, &format!("{p}.ln2"), d)?,
                ffn_in: Linear::new(store, &format!("{p}.ffn_in"), d, config.ffn_dim, rng)?,
                ffn_out: Linear::new(store, &format!("{p}.ffn_out"), config.ffn_dim, d, rng)?,
            });
        }
        let final_ln = LayerNormParams::new(store, &format!("{prefix}.final_ln"), d)?;
        Ok(Self {
            config: config.clone(),
            relpos,
            emb_ln,
            blocks,
            final_ln,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn relpos_param(&self) -> ParamId {
        self.relpos
    }

    /// Bias `[H, T, T]` gathered from the bucket table.
    fn position_bias(&self, g: &mut Graph, store: &ParamStore, seq_len: usize) -> Result<Var> {
        let heads = self.config.num_heads;
        let table = g.param(store, self.relpos)?;
        let mut idx = Vec::with_capacity(heads * seq_len * seq_len);
        for h in 0..heads {
            for q in 0..seq_len {
                for k in 0..seq_len {
                    let b = relpos_bucket(
                        k as i64 - q as i64,
                        self.config.relpos_num_buckets,
                        self.config.relpos_max_distance,
                    );
                    idx.push(b * heads + h);
                }
            }
        }
        Ok(g.gather(table, idx, vec![heads, seq_len, seq_len])?)
    }

    pub fn encode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embeddings: Var,
        batch: &PaddedBatch,
        dropout_rng: Option<&mut R>,
    ) -> Result<Hidden> {
        Ok(self.encode_traced(g, store, embeddings, batch, dropout_rng)?.hidden)
    }

    /// Forward pass. Dropout is active iff `dropout_rng` is given.
    pub fn encode_traced<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embeddings: Var,
        batch: &PaddedBatch,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<EncodeTrace> {
        let (b, t) = (batch.batch, batch.seq_len);
        if t > self.config.max_seq_len {
            return Err(Error::Data(format!(
                "sequence length {t} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let (d, heads) = (self.config.hidden_dim, self.config.num_heads);
        let dh = d / heads;
        let p = self.config.dropout;

        let x = g.gather_rows(embeddings, &batch.ids)?;
        let x = self.emb_ln.apply(g, store, x)?;
        let mut x = maybe_dropout(g, x, p, &mut dropout_rng)?;
        let bias = self.position_bias(g, store, t)?;
        let mut attention = Vec::with_capacity(self.blocks.len());

        let split = |g: &mut Graph, y: Var| -> Result<Var> {
            let y = g.reshape(y, vec![b, t, heads, dh])?;
            let y = g.swap_axes12(y)?;
            Ok(g.reshape(y, vec![b * heads, t, dh])?)
        };

        for block in &self.blocks {
            let h = block.ln1.apply(g, store, x)?;
            let q = block.q.apply(g, store, h)?;
            let q = g.scale(q, 1.0 / (dh as f64).sqrt())?;
            let k = block.k.apply(g, store, h)?;
            let v = block.v.apply(g, store, h)?;
            let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
            let scores = g.batch_matmul(q, k, true)?;
            let scores = g.reshape(scores, vec![b, heads, t, t])?;
            let scores = g.add_broadcast(scores, bias)?;
            let probs = g.masked_softmax(scores, &batch.mask)?;
            attention.push(probs);
            let probs = g.reshape(probs, vec![b * heads, t, t])?;
            let ctx = g.batch_matmul(probs, v, false)?;
            let ctx = g.reshape(ctx, vec![b, heads, t, dh])?;
            let ctx = g.swap_axes12(ctx)?;
            let ctx = g.reshape(ctx, vec![b * t, d])?;
            let out = block.o.apply(g, store, ctx)?;
            let out = maybe_dropout(g, out, p, &mut dropout_rng)?;
            x = g.add(x, out)?;

            let h = block.ln2.apply(g, store, x)?;
            let h = block.ffn_in.apply(g, store, h)?;
            let h = g.gelu(h)?;
            let h = block.ffn_out.apply(g, store, h)?;
            let h = maybe_dropout(g, h, p, &mut dropout_rng)?;
            x = g.add(x, h)?;
        }
        let x = self.final_ln.apply(g, store, x)?;
        Ok(EncodeTrace {
            hidden: Hidden {
                var: x,
                batch: b,
                seq_len: t,
            },
            attention,
        })
    }
}

/// `h_[CLS]` of every sequence: rows at position 0, `[batch, hidden]`.
pub fn sequence_embedding(g: &mut Graph, hidden: Hidden) -> Result<Var> {
    let rows: Vec<usize> = (0..hidden.batch).map(|b| hidden.row(b, 0)).collect();
    Ok(g.gather_rows(hidden.var, &rows)?)
}
