//! Latent dynamics operator on the regular grid.
//!
//! Each latent field `[S, c]` is lifted pointwise by `P` (with its grid
//! coordinates appended) to width `w`. The integral layer runs two
//! transformers over time tokens: one on the wavelet coefficients of the
//! lifted fields, one on the lifted fields themselves. The last decoder
//! token of each is mapped back to a field, the wavelet branch through the
//! inverse transform, and `σ(T_W + T_R)` is projected by `Q` to `c`
//! channels.
//!
//! An optional reduction block squeezes a 3-D latent into a 2-D one with two
//! strided convolutions before the dynamics, and an expansion block of
//! transposed convolutions restores it afterwards.

use crate::attention::{Transformer, TransformerConfig};
use crate::nn::{Linear, Mlp};
use crate::tensor::{self, ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};
use crate::wavelet::{parse_family, Boundary, GridWavelet, WaveletError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WaveformerError {
    #[error(transparent)]
    Wavelet(#[from] WaveletError),
    #[error("invalid waveformer configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionConfig {
    pub kernels: [usize; 2],
    pub strides: [usize; 2],
    pub channels: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveformerConfig {
    /// Width of the lifted fields.
    pub width: usize,
    /// Hidden width of `P` and `Q`.
    pub lift_hidden: usize,
    pub wavelet: String,
    pub levels: usize,
    pub boundary: Boundary,
    pub transformer: TransformerConfig,
    pub reduction: Option<ReductionConfig>,
}

impl Default for WaveformerConfig {
    fn default() -> Self {
        Self {
            width: 32,
            lift_hidden: 64,
            wavelet: "db4".into(),
            levels: 1,
            boundary: Boundary::Periodic,
            transformer: TransformerConfig::default(),
            reduction: None,
        }
    }
}

/// Largest `a ≤ √n` dividing `n`, with `b = n / a`.
pub fn nearest_square_factors(n: usize) -> (usize, usize) {
    let mut a = (n as f64).sqrt() as usize;
    while a > 1 && !n.is_multiple_of(a) {
        a -= 1;
    }
    let a = a.max(1);
    (a, n / a)
}

fn invalid(msg: String) -> TensorError {
    TensorError::Invalid { op: "waveformer", msg }
}

/// Per-field token pair, `[1, d]` each.
#[derive(Clone, Copy, Debug)]
pub struct Tokens<'t, T> {
    pub wave: Var<'t, T>,
    pub phys: Var<'t, T>,
}

struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

impl Conv {
    /// `shape` is the weight shape; `bias_len` the output channel count.
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: [usize; 5],
        bias_len: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = shape[1] * shape[2] * shape[3] * shape[4];
        Self {
            weight: store.insert_uniform(format!("{name}.weight"), &shape, fan_in, rng),
            bias: store.insert_uniform(format!("{name}.bias"), &[bias_len], fan_in, rng),
            stride,
        }
    }
}

/// Strided 3-D convolutions to a 2-D latent and transposed convolutions back.
pub struct Reduction {
    down: [Conv; 2],
    up: [Conv; 2],
    grid: [usize; 3],
    inner: [usize; 3],
    channels: [usize; 2],
    plane: (usize, usize),
}

impl std::fmt::Debug for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Reduction")
            .field("grid", &self.grid)
            .field("inner", &self.inner)
            .field("channels", &self.channels)
            .field("plane", &self.plane)
            .finish()
    }
}

impl Reduction {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        grid: [usize; 3],
        c: usize,
        cfg: &ReductionConfig,
        rng: &mut R,
    ) -> Result<Self, WaveformerError> {
        let step = |n: [usize; 3], k: usize, s: usize| -> Result<[usize; 3], WaveformerError> {
            if s == 0 || k == 0 {
                return Err(WaveformerError::Config("zero kernel or stride".into()));
            }
            let mut out = [0; 3];
            for i in 0..3 {
                if n[i] < k || !(n[i] - k).is_multiple_of(s) {
                    return Err(WaveformerError::Config(format!(
                        "extent {} with kernel {k} and stride {s} cannot be inverted exactly",
                        n[i]
                    )));
                }
                out[i] = (n[i] - k) / s + 1;
            }
            Ok(out)
        };
        let [k1, k2] = cfg.kernels;
        let [s1, s2] = cfg.strides;
        let [c1, c2] = cfg.channels;
        let mid = step(grid, k1, s1)?;
        let inner = step(mid, k2, s2)?;
        let plane = nearest_square_factors(inner.iter().product());
        Ok(Self {
            down: [
                Conv::new(store, "waveformer.reduce.0", [c1, c, k1, k1, k1], c1, s1, rng),
                Conv::new(store, "waveformer.reduce.1", [c2, c1, k2, k2, k2], c2, s2, rng),
            ],
            up: [
                Conv::new(store, "waveformer.expand.0", [c2, c1, k2, k2, k2], c1, s2, rng),
                Conv::new(store, "waveformer.expand.1", [c1, c, k1, k1, k1], c, s1, rng),
            ],
            grid,
            inner,
            channels: cfg.channels,
            plane,
        })
    }

    /// Spatial shape of the 2-D latent.
    pub fn plane(&self) -> [usize; 2] {
        [self.plane.0, self.plane.1]
    }

    pub fn channels(&self) -> usize {
        self.channels[1]
    }

    /// `[S₁S₂S₃, c]` to `[a·b, c′]`.
    pub fn reduce<'t, T: Real>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> tensor::Result<Var<'t, T>> {
        let c = x.shape()[1];
        let [d, h, w] = self.grid;
        let mut v = x.transpose()?.reshape(&[c, d, h, w])?;
        for conv in &self.down {
            v = v.conv3d(tape.param(store, conv.weight), tape.param(store, conv.bias), conv.stride)?;
        }
        let n: usize = self.inner.iter().product();
        v.reshape(&[self.channels[1], n])?.transpose()
    }

    /// Inverse-shaped map `[a·b, c′]` to `[S₁S₂S₃, c]`.
    pub fn expand<'t, T: Real>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, y: Var<'t, T>) -> tensor::Result<Var<'t, T>> {
        let n: usize = self.inner.iter().product();
        if y.shape() != [n, self.channels[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "expand_latent",
                lhs: y.shape(),
                rhs: vec![n, self.channels[1]],
            });
        }
        let [d, h, w] = self.inner;
        let mut v = y.transpose()?.reshape(&[self.channels[1], d, h, w])?;
        for conv in &self.up {
            v = v.conv3d_transpose(tape.param(store, conv.weight), tape.param(store, conv.bias), conv.stride)?;
        }
        let c = v.shape()[0];
        let total: usize = self.grid.iter().product();
        v.reshape(&[c, total])?.transpose()
    }
}

/// Lifts, dual-branch integral layer and projection for one latent grid.
pub struct Waveformer<T> {
    pub config: WaveformerConfig,
    pub shape: Vec<usize>,
    pub channels: usize,
    pub p: Mlp,
    pub q: Mlp,
    pub wave_in: Linear,
    pub wave_out: Linear,
    pub wave: Transformer,
    pub phys_in: Linear,
    pub phys_out: Linear,
    pub phys: Transformer,
    pub reduction: Option<Reduction>,
    transform: GridWavelet<T>,
    coords: Arc<Tensor<T>>,
}

impl<T: Real> std::fmt::Debug for Waveformer<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Waveformer")
            .field("shape", &self.shape)
            .field("channels", &self.channels)
            .field("config", &self.config)
            .finish()
    }
}

/// Grid coordinates scaled to `[0, 1]` per axis, row-major, last axis fastest.
pub fn unit_coords<T: Real>(shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let d = shape.len();
    Tensor::from_fn(&[n, d], |p| {
        let (mut node, axis) = (p / d, p % d);
        for a in (axis + 1..d).rev() {
            node /= shape[a];
        }
        let i = node % shape[axis];
        T::of(i as f64 / (shape[axis] - 1).max(1) as f64)
    })
}

impl<T: Real> Waveformer<T> {
    /// `grid` is the 3-D latent shape and `channels` its width.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        grid: [usize; 3],
        channels: usize,
        cfg: &WaveformerConfig,
        rng: &mut R,
    ) -> Result<Self, WaveformerError> {
        let (reduction, shape, c) = match &cfg.reduction {
            Some(r) => {
                let red = Reduction::new(store, grid, channels, r, rng)?;
                let shape = red.plane().to_vec();
                let c = red.channels();
                (Some(red), shape, c)
            }
            None => (None, grid.to_vec(), channels),
        };
        let filter = parse_family(&cfg.wavelet)?;
        let transform = GridWavelet::new(&shape, &filter, cfg.levels, cfg.boundary)?;
        let tc = &cfg.transformer;
        if tc.heads == 0 || !tc.d_model.is_multiple_of(tc.heads) {
            return Err(WaveformerError::Config(format!("d_model {} not divisible by {} heads", tc.d_model, tc.heads)));
        }
        let n: usize = shape.iter().product();
        let nc = transform.n_coeffs();
        let w = cfg.width;
        let d = tc.d_model;
        Ok(Self {
            p: Mlp::new(store, "waveformer.p", c + shape.len(), cfg.lift_hidden, w, rng),
            q: Mlp::new(store, "waveformer.q", w, cfg.lift_hidden, c, rng),
            wave_in: Linear::new(store, "waveformer.wave.in", nc * w, d, rng),
            wave_out: Linear::new(store, "waveformer.wave.out", d, nc * w, rng),
            wave: Transformer::new(store, "waveformer.wave", tc, rng),
            phys_in: Linear::new(store, "waveformer.phys.in", n * w, d, rng),
            phys_out: Linear::new(store, "waveformer.phys.out", d, n * w, rng),
            phys: Transformer::new(store, "waveformer.phys", tc, rng),
            coords: Arc::new(unit_coords(&shape)),
            config: cfg.clone(),
            shape,
            channels: c,
            reduction,
            transform,
        })
    }

    pub fn transform(&self) -> &GridWavelet<T> {
        &self.transform
    }

    fn nodes(&self) -> usize {
        self.shape.iter().product()
    }

    /// `P` applied pointwise to `[field, x]`, giving `[S, w]`.
    pub fn lift<'t>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, field: Var<'t, T>) -> tensor::Result<Var<'t, T>> {
        let x = tape.constant_shared(self.coords.clone());
        self.p.forward(tape, store, Var::concat(&[field, x], 1)?)
    }

    /// Wavelet-domain and physical-space tokens of a lifted field.
    pub fn tokens<'t>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, lifted: Var<'t, T>) -> tensor::Result<Tokens<'t, T>> {
        let w = self.config.width;
        let mut grid_shape = self.shape.clone();
        grid_shape.push(w);
        let coeffs = self.transform.forward(lifted.reshape(&grid_shape)?)?;
        Ok(Tokens {
            wave: self.wave_in.forward(tape, store, coeffs.reshape(&[1, self.transform.n_coeffs() * w])?)?,
            phys: self.phys_in.forward(tape, store, lifted.reshape(&[1, self.nodes() * w])?)?,
        })
    }

    /// Reduced (or plain) latent to tokens: `reduce`, `P`, token maps.
    pub fn embed<'t>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, latent: Var<'t, T>) -> tensor::Result<Tokens<'t, T>> {
        let v = match &self.reduction {
            Some(r) => r.reduce(tape, store, latent)?,
            None => latent,
        };
        let lifted = self.lift(tape, store, v)?;
        self.tokens(tape, store, lifted)
    }

    /// `σ(W⁻¹(T_W(enc, dec)) + T_R(enc, dec))` read from the last decoder token, `[S, w]`.
    pub fn integrate<'t>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        enc: &[Tokens<'t, T>],
        dec: &[Tokens<'t, T>],
    ) -> tensor::Result<Var<'t, T>> {
        if enc.len() != dec.len() || enc.is_empty() {
            return Err(invalid(format!(
                "encoder sequence has {} tokens, decoder sequence {}",
                enc.len(),
                dec.len()
            )));
        }
        let stack = |f: fn(&Tokens<'t, T>) -> Var<'t, T>, s: &[Tokens<'t, T>]| -> tensor::Result<Var<'t, T>> {
            let parts: Vec<_> = s.iter().map(f).collect();
            if parts.len() == 1 {
                Ok(parts[0])
            } else {
                Var::concat(&parts, 0)
            }
        };
        let m = dec.len();
        let w = self.config.width;

        let wave_dec = self
            .wave
            .forward(tape, store, stack(|t| t.wave, enc)?, stack(|t| t.wave, dec)?)?;
        let coeffs = self
            .wave_out
            .forward(tape, store, wave_dec.narrow(0, m - 1, 1)?)?
            .reshape(&[self.transform.n_coeffs(), w])?;
        let wave = self.transform.inverse(coeffs)?.reshape(&[self.nodes(), w])?;

        let phys_dec = self
            .phys
            .forward(tape, store, stack(|t| t.phys, enc)?, stack(|t| t.phys, dec)?)?;
        let phys = self
            .phys_out
            .forward(tape, store, phys_dec.narrow(0, m - 1, 1)?)?
            .reshape(&[self.nodes(), w])?;

        wave.add(phys)?.gelu()
    }

    /// Integral layer on lifted `[S, w]` sequences.
    pub fn integral_layer<'t>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        enc: &[Var<'t, T>],
        dec: &[Var<'t, T>],
    ) -> tensor::Result<Var<'t, T>> {
        let tok = |s: &[Var<'t, T>]| s.iter().map(|&v| self.tokens(tape, store, v)).collect::<tensor::Result<Vec<_>>>();
        self.integrate(tape, store, &tok(enc)?, &tok(dec)?)
    }

    /// Next latent field from the tokens of a window of `k ≥ 2` fields.
    pub fn step<'t>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, window: &[Tokens<'t, T>]) -> tensor::Result<Var<'t, T>> {
        let k = window.len();
        if k < 2 {
            return Err(invalid(format!("window length {k} is below 2")));
        }
        let out = self.integrate(tape, store, &window[..k - 1], &window[1..])?;
        let v = self.q.forward(tape, store, out)?;
        match &self.reduction {
            Some(r) => r.expand(tape, store, v),
            None => Ok(v),
        }
    }

    /// `u_{k+1}` from latent fields `u_0 … u_{k-1}`, each `[S₁S₂S₃, c]`.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, window: &[Var<'t, T>]) -> tensor::Result<Var<'t, T>> {
        if window.len() < 2 {
            return Err(invalid(format!("window length {} is below 2", window.len())));
        }
        let tokens = window
            .iter()
            .map(|&v| self.embed(tape, store, v))
            .collect::<tensor::Result<Vec<_>>>()?;
        self.step(tape, store, &tokens)
    }
}
