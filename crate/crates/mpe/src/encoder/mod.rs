//! Contextual sentence encoding.
//!
//! Two providers sit behind the same contract — a matrix of `n + 2` rows
//! (sentence-start, one per subtoken, sentence-end) by `width` columns:
//!
//! * a small trainable multi-head attention encoder (token + position
//!   embeddings, residual attention blocks, relu feed-forward), and
//! * fixed matrices loaded from a precomputed-embedding file, for
//!   embeddings produced by some external encoder.

mod precomputed;
mod tokenizer;

pub use precomputed::{
    instance_key, parse_embeddings, read_embeddings, write_embeddings, EmbeddingStore,
    EMBEDDING_MAGIC,
};
pub use tokenizer::{Vocab, CLS_TOKEN, SEP_TOKEN, UNK_TOKEN};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::NumericError;
use crate::numerics::{ParamSet, Tape, Tensor, VarId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            width: 32,
            heads: 4,
            layers: 2,
            dropout: 0.2,
            max_len: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), NumericError> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(NumericError::InvalidTensor(format!(
                "width {} must be a positive multiple of {} heads",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NumericError::InvalidTensor(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.vocab_size == 0 {
            return Err(NumericError::InvalidTensor("empty vocabulary".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Whether dropout masks are sampled (training) or disabled (evaluation).
pub enum EncodeMode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng },
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).expect("init shape")
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).expect("init shape")
}

/// Register all trainable encoder parameters under the `enc.` prefix.
pub fn init_params(
    cfg: &EncoderConfig,
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
) -> Result<(), NumericError> {
    cfg.validate()?;
    params.add(
        "enc.tok_emb",
        uniform(rng, cfg.vocab_size, cfg.width, 0.5),
        true,
    )?;
    params.add(
        "enc.pos_emb",
        uniform(rng, cfg.max_len, cfg.width, 0.5),
        true,
    )?;
    let dh = cfg.head_dim();
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            params.add(format!("enc.l{l}.h{h}.wq"), xavier(rng, cfg.width, dh), true)?;
            params.add(format!("enc.l{l}.h{h}.wk"), xavier(rng, cfg.width, dh), true)?;
            params.add(format!("enc.l{l}.h{h}.wv"), xavier(rng, cfg.width, dh), true)?;
            params.add(format!("enc.l{l}.h{h}.wo"), xavier(rng, dh, cfg.width), true)?;
        }
        params.add(
            format!("enc.l{l}.ffn_w1"),
            xavier(rng, cfg.width, 2 * cfg.width),
            true,
        )?;
        params.add(
            format!("enc.l{l}.ffn_w2"),
            xavier(rng, 2 * cfg.width, cfg.width),
            true,
        )?;
    }
    Ok(())
}

fn dropout_mask(
    tape: &mut Tape,
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<VarId, NumericError> {
    let keep = 1.0 - rate;
    let data = (0..rows * cols)
        .map(|_| {
            if rng.random_bool(rate) {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect();
    tape.constant(Tensor::new(vec![rows, cols], data)?)
}

/// Encode a subtoken id sequence into an `(n + 2) x width` matrix whose
/// row 0 is the sentence-start representation and row `n + 1` the
/// sentence-end representation. Differentiable with respect to every
/// `enc.*` parameter.
pub fn encode(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &EncoderConfig,
    cls_id: u32,
    sep_id: u32,
    ids: &[u32],
    mode: &mut EncodeMode<'_>,
) -> Result<VarId, NumericError> {
    for &id in ids.iter().chain([cls_id, sep_id].iter()) {
        if id as usize >= cfg.vocab_size {
            return Err(NumericError::InvalidTensor(format!(
                "token id {id} outside the vocabulary of {}",
                cfg.vocab_size
            )));
        }
    }
    let n_rows = ids.len() + 2;
    if n_rows > cfg.max_len {
        return Err(NumericError::InvalidTensor(format!(
            "sentence of {n_rows} positions exceeds max_len {}",
            cfg.max_len
        )));
    }

    let mut row_ids: Vec<usize> = Vec::with_capacity(n_rows);
    row_ids.push(cls_id as usize);
    row_ids.extend(ids.iter().map(|&i| i as usize));
    row_ids.push(sep_id as usize);

    let tok_emb = tape.param(params, "enc.tok_emb")?;
    let pos_emb = tape.param(params, "enc.pos_emb")?;
    let tok = tape.gather_rows(tok_emb, &row_ids)?;
    let positions: Vec<usize> = (0..n_rows).collect();
    let pos = tape.gather_rows(pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.layers {
        // attention: out = sum over heads of softmax(Q K^T / sqrt(dh)) V Wo_h
        let mut attn_out: Option<VarId> = None;
        for h in 0..cfg.heads {
            let wq = tape.param(params, &format!("enc.l{l}.h{h}.wq"))?;
            let wk = tape.param(params, &format!("enc.l{l}.h{h}.wk"))?;
            let wv = tape.param(params, &format!("enc.l{l}.h{h}.wv"))?;
            let wo = tape.param(params, &format!("enc.l{l}.h{h}.wo"))?;
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.scale(scores, scale)?;
            let weights = tape.softmax_rows(scaled)?;
            let mixed = tape.matmul(weights, v)?;
            let projected = tape.matmul(mixed, wo)?;
            attn_out = Some(match attn_out {
                Some(acc) => tape.add(acc, projected)?,
                None => projected,
            });
        }
        let mut attn_out = attn_out.expect("at least one head");
        if let EncodeMode::Train { rng } = mode {
            if cfg.dropout > 0.0 {
                let mask = dropout_mask(tape, n_rows, cfg.width, cfg.dropout, rng)?;
                attn_out = tape.mul(attn_out, mask)?;
            }
        }
        x = tape.add(x, attn_out)?;

        let w1 = tape.param(params, &format!("enc.l{l}.ffn_w1"))?;
        let w2 = tape.param(params, &format!("enc.l{l}.ffn_w2"))?;
        let hidden = tape.matmul(x, w1)?;
        let activated = tape.relu(hidden)?;
        let mut ffn = tape.matmul(activated, w2)?;
        if let EncodeMode::Train { rng } = mode {
            if cfg.dropout > 0.0 {
                let mask = dropout_mask(tape, n_rows, cfg.width, cfg.dropout, rng)?;
                ffn = tape.mul(ffn, mask)?;
            }
        }
        x = tape.add(x, ffn)?;
    }
    Ok(x)
}
