//! Multi-head attention and pre-norm transformer blocks over time tokens.
//!
//! A token is one time step. Sequences are `[m, d]` tensors; the encoder
//! stack reads the older window, the decoder stack reads the window shifted
//! by one step, attends causally to itself and fully to the encoder output.

use crate::nn::{Linear, Mlp};
use crate::tensor::{ParamId, ParamStore, Real, Result, Tape, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Adds sinusoidal positional encodings to both sequences.
    pub positional: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            d_ff: 256,
            encoder_blocks: 2,
            decoder_blocks: 2,
            positional: true,
        }
    }
}

fn check_2d<T: Real>(op: &'static str, v: Var<'_, T>) -> Result<(usize, usize)> {
    match v.shape()[..] {
        [m, d] => Ok((m, d)),
        ref s => Err(TensorError::Invalid {
            op,
            msg: format!("expected a 2-D sequence, got {s:?}"),
        }),
    }
}

/// `softmax(q kᵀ / √d)` with an optional keep-mask of shape `[n_q, n_k]`.
pub fn attention_weights<'t, T: Real>(q: Var<'t, T>, k: Var<'t, T>, mask: Option<Arc<Vec<bool>>>) -> Result<Var<'t, T>> {
    let (_, dq) = check_2d("attention", q)?;
    let (_, dk) = check_2d("attention", k)?;
    if dq != dk {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    q.matmul_nt(k)?.scale(T::of(1.0 / (dq as f64).sqrt()))?.softmax_rows(mask)
}

/// `softmax(q kᵀ / √d) v`.
pub fn scaled_dot_attention<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    mask: Option<Arc<Vec<bool>>>,
) -> Result<Var<'t, T>> {
    let (nk, _) = check_2d("attention", k)?;
    let (nv, _) = check_2d("attention", v)?;
    if nk != nv {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: k.shape(),
            rhs: v.shape(),
        });
    }
    attention_weights(q, k, mask)?.matmul(v)
}

/// Keep-mask letting query `i` see keys `0..=i`.
pub fn causal_mask(m: usize) -> Arc<Vec<bool>> {
    Arc::new((0..m * m).map(|p| p % m <= p / m).collect())
}

/// `pe[t, 2i] = sin(t / 10000^(2i/d))`, `pe[t, 2i+1] = cos(…)`, for
/// positions `start..start + m`.
pub fn sinusoidal_encoding<T: Real>(start: usize, m: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[m, d], |p| {
        let (t, j) = ((start + p / d) as f64, p % d);
        let freq = 10000f64.powf(-((j - j % 2) as f64) / d as f64);
        T::of(if j % 2 == 0 { (t * freq).sin() } else { (t * freq).cos() })
    })
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::ones(&[d])),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<'t, T: Real>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(tape.param(store, self.gamma), tape.param(store, self.beta), LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "model width {d} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, rng),
            heads,
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        source: Var<'t, T>,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Var<'t, T>> {
        let (_, d) = check_2d("attention", x)?;
        let (_, ds) = check_2d("attention", source)?;
        if d != self.query.d_in || ds != self.key.d_in {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: x.shape(),
                rhs: source.shape(),
            });
        }
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, source)?;
        let v = self.value.forward(tape, store, source)?;
        let dh = d / self.heads;
        let heads = (0..self.heads)
            .map(|h| {
                scaled_dot_attention(q.narrow(1, h * dh, dh)?, k.narrow(1, h * dh, dh)?, v.narrow(1, h * dh, dh)?, mask.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let joined = if heads.len() == 1 { heads[0] } else { Var::concat(&heads, 1)? };
        self.output.forward(tape, store, joined)
    }

    pub fn zero_output<T: Real>(&self, store: &mut ParamStore<T>) {
        self.output.zero(store);
    }
}

/// Self-attention then feed-forward, each as `x + f(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: Mlp,
}

impl EncoderBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ff: Mlp::new(store, &format!("{name}.ff"), d, cfg.d_ff, d, rng),
        }
    }

    pub fn forward<'t, T: Real>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.norm1.forward(tape, store, x)?;
        let x = x.add(self.attn.forward(tape, store, h, h, None)?)?;
        let h = self.norm2.forward(tape, store, x)?;
        x.add(self.ff.forward(tape, store, h)?)
    }

    /// Zeroes the attention and feed-forward output maps so the block is the identity.
    pub fn zero_outputs<T: Real>(&self, store: &mut ParamStore<T>) {
        self.attn.zero_output(store);
        self.ff.out.zero(store);
    }
}

/// Causal self-attention, cross-attention on the encoder output, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ff: Mlp,
}

impl DecoderBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, cfg.heads, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
            ff: Mlp::new(store, &format!("{name}.ff"), d, cfg.d_ff, d, rng),
        }
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        enc_out: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (m, d) = check_2d("decoder block", x)?;
        let (_, de) = check_2d("decoder block", enc_out)?;
        if d != de {
            return Err(TensorError::ShapeMismatch {
                op: "decoder block",
                lhs: x.shape(),
                rhs: enc_out.shape(),
            });
        }
        let h = self.norm1.forward(tape, store, x)?;
        let x = x.add(self.self_attn.forward(tape, store, h, h, Some(causal_mask(m)))?)?;
        let h = self.norm2.forward(tape, store, x)?;
        let x = x.add(self.cross_attn.forward(tape, store, h, enc_out, None)?)?;
        let h = self.norm3.forward(tape, store, x)?;
        x.add(self.ff.forward(tape, store, h)?)
    }

    pub fn zero_outputs<T: Real>(&self, store: &mut ParamStore<T>) {
        self.self_attn.zero_output(store);
        self.cross_attn.zero_output(store);
        self.ff.out.zero(store);
    }
}

/// Encoder and decoder stacks, each closed by a LayerNorm.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub encoder: Vec<EncoderBlock>,
    pub encoder_norm: LayerNorm,
    pub decoder: Vec<DecoderBlock>,
    pub decoder_norm: LayerNorm,
}

impl Transformer {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        let encoder = (0..cfg.encoder_blocks)
            .map(|i| EncoderBlock::new(store, &format!("{name}.encoder.{i}"), cfg, rng))
            .collect();
        let encoder_norm = LayerNorm::new(store, &format!("{name}.encoder.norm"), cfg.d_model);
        let decoder = (0..cfg.decoder_blocks)
            .map(|i| DecoderBlock::new(store, &format!("{name}.decoder.{i}"), cfg, rng))
            .collect();
        let decoder_norm = LayerNorm::new(store, &format!("{name}.decoder.norm"), cfg.d_model);
        Self {
            config: cfg.clone(),
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
        }
    }

    pub fn encode<'t, T: Real>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, src: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut x = self.with_positions(tape, src, 0)?;
        for block in &self.encoder {
            x = block.forward(tape, store, x)?;
        }
        self.encoder_norm.forward(tape, store, x)
    }

    /// Decoder positions start at 1: the decoder sequence is the encoder
    /// sequence advanced by one step.
    pub fn decode<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        tgt: Var<'t, T>,
        memory: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let mut x = self.with_positions(tape, tgt, 1)?;
        for block in &self.decoder {
            x = block.forward(tape, store, x, memory)?;
        }
        self.decoder_norm.forward(tape, store, x)
    }

    /// Full pass returning every decoder output token, `[m, d]`.
    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        src: Var<'t, T>,
        tgt: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (ms, _) = check_2d("transformer", src)?;
        let (mt, _) = check_2d("transformer", tgt)?;
        if ms != mt {
            return Err(TensorError::Invalid {
                op: "transformer",
                msg: format!("encoder sequence has {ms} tokens, decoder sequence {mt}"),
            });
        }
        let memory = self.encode(tape, store, src)?;
        self.decode(tape, store, tgt, memory)
    }

    fn with_positions<'t, T: Real>(&self, tape: &'t Tape<T>, x: Var<'t, T>, start: usize) -> Result<Var<'t, T>> {
        let (m, d) = check_2d("transformer", x)?;
        if d != self.config.d_model {
            return Err(TensorError::ShapeMismatch {
                op: "transformer",
                lhs: x.shape(),
                rhs: vec![m, self.config.d_model],
            });
        }
        if !self.config.positional {
            return Ok(x);
        }
        x.add(tape.constant(sinusoidal_encoding(start, m, d)))
    }
}
