//! The full surrogate: graph encoder, waveformer, graph decoder.

use crate::attention::TransformerConfig;
use crate::geometry::PointCloud;
use crate::graph_op::{cached_kernels, CachedKernels, GraphConfig, GraphDecoder, GraphDomain, GraphEncoder, GraphError, GraphWidths};
use crate::rollout::StepModel;
use crate::tensor::{self, ParamStore, Real, Tape, Tensor, TensorError, Var};
use crate::waveformer::{Tokens, Waveformer, WaveformerConfig, WaveformerError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Waveformer(#[from] WaveformerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Field channels `d₀`.
    pub channels: usize,
    /// Window length `k`.
    pub window: usize,
    pub graph: GraphConfig,
    pub encoder_hidden: usize,
    pub latent: usize,
    pub kernel_hidden: usize,
    pub waveformer: WaveformerConfig,
    /// Predict `u_{k+1} − u_k` instead of `u_{k+1}`.
    pub residual: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size architecture: encoder/decoder hidden widths 64
    /// and 32, token width 128, two encoder and two decoder blocks.
    pub fn full(channels: usize, window: usize) -> Self {
        Self {
            channels,
            window,
            graph: GraphConfig {
                resolution: [16, 16, 16],
                ..GraphConfig::default()
            },
            encoder_hidden: 64,
            latent: 32,
            kernel_hidden: 64,
            waveformer: WaveformerConfig::default(),
            residual: false,
            seed: 0,
        }
    }

    /// Reduced widths that train in minutes on one CPU core.
    pub fn desk(channels: usize, window: usize) -> Self {
        Self {
            channels,
            window,
            graph: GraphConfig::default(),
            encoder_hidden: 16,
            latent: 8,
            kernel_hidden: 16,
            waveformer: WaveformerConfig {
                width: 8,
                lift_hidden: 16,
                wavelet: "db4".into(),
                levels: 1,
                boundary: crate::wavelet::Boundary::Periodic,
                transformer: TransformerConfig {
                    d_model: 64,
                    heads: 4,
                    d_ff: 128,
                    encoder_blocks: 2,
                    decoder_blocks: 2,
                    positional: true,
                },
                reduction: None,
            },
            residual: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.window < 2 {
            return Err(ModelError::Config(format!("window length {} is below 2", self.window)));
        }
        if self.channels == 0 {
            return Err(ModelError::Config("no field channels".into()));
        }
        Ok(())
    }
}

/// Architecture and geometry; parameters live in a separate [`ParamStore`].
pub struct Model<T> {
    pub config: ModelConfig,
    pub domain: GraphDomain,
    pub encoder: GraphEncoder,
    pub decoder: GraphDecoder,
    pub waveformer: Waveformer<T>,
}

impl<T: Real> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("points", &self.domain.n_points())
            .finish()
    }
}

impl<T: Real> Model<T> {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(cloud: PointCloud, config: ModelConfig) -> Result<(Self, ParamStore<T>), ModelError> {
        config.validate()?;
        let domain = GraphDomain::new(cloud, &config.graph)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let widths = GraphWidths {
            d_in: config.channels,
            d_out: config.channels,
            hidden: config.encoder_hidden,
            latent: config.latent,
            kernel_hidden: config.kernel_hidden,
        };
        let encoder = GraphEncoder::new(&mut store, &widths, &mut rng);
        let decoder = GraphDecoder::new(&mut store, &widths, &mut rng);
        let waveformer = Waveformer::new(&mut store, config.graph.resolution, config.latent, &config.waveformer, &mut rng)?;
        Ok((
            Self {
                config,
                domain,
                encoder,
                decoder,
                waveformer,
            },
            store,
        ))
    }

    /// Rebuilds the architecture for stored parameters, checking names and shapes.
    pub fn with_params(cloud: PointCloud, config: ModelConfig, params: &ParamStore<T>) -> Result<Self, ModelError> {
        let (model, fresh) = Self::new(cloud, config)?;
        if fresh.len() != params.len() {
            return Err(ModelError::Config(format!(
                "checkpoint has {} tensors, architecture {}",
                params.len(),
                fresh.len()
            )));
        }
        for (_, p) in fresh.iter() {
            let stored = params
                .id(&p.name)
                .ok_or_else(|| ModelError::Config(format!("checkpoint lacks {}", p.name)))?;
            if params.value(stored).shape() != p.value.shape() {
                return Err(ModelError::Config(format!(
                    "{}: checkpoint shape {:?}, architecture {:?}",
                    p.name,
                    params.value(stored).shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn window(&self) -> usize {
        self.config.window
    }

    pub fn n_points(&self) -> usize {
        self.domain.n_points()
    }

    pub fn kernels<'t>(&self, tape: &'t Tape<T>, store: &ParamStore<T>) -> tensor::Result<CachedKernels<'t, T>> {
        cached_kernels(tape, store, &self.domain, &self.encoder, &self.decoder)
    }

    /// Encoder then waveformer embedding of one cloud field `[N, d₀]`.
    pub fn embed<'t>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        kernels: &CachedKernels<'t, T>,
        field: Var<'t, T>,
    ) -> tensor::Result<Tokens<'t, T>> {
        let latent = self.encoder.encode(tape, store, &self.domain, kernels, field)?;
        self.waveformer.embed(tape, store, latent)
    }

    /// Next cloud field from the embeddings of a window; `last` is the
    /// newest field of the window.
    pub fn advance<'t>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        kernels: &CachedKernels<'t, T>,
        window: &[Tokens<'t, T>],
        last: Var<'t, T>,
    ) -> tensor::Result<Var<'t, T>> {
        let latent = self.waveformer.step(tape, store, window)?;
        let out = self.decoder.decode(tape, store, &self.domain, kernels, latent)?;
        if self.config.residual {
            last.add(out)
        } else {
            Ok(out)
        }
    }

    /// One prediction from `k` fields, on a tape.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, window: &[Var<'t, T>]) -> tensor::Result<Var<'t, T>> {
        let kernels = self.kernels(tape, store)?;
        let tokens = window
            .iter()
            .map(|&f| self.embed(tape, store, &kernels, f))
            .collect::<tensor::Result<Vec<_>>>()?;
        self.advance(tape, store, &kernels, &tokens, *window.last().ok_or_else(empty_window)?)
    }

    /// Autoregressive roll-out of `n` steps from `init` (the first `k`
    /// fields), recorded on `tape`. With `teacher`, the window is refilled
    /// with those fields instead of the predictions.
    pub fn rollout<'t>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        init: &[Tensor<T>],
        n: usize,
        teacher: Option<&[Tensor<T>]>,
    ) -> tensor::Result<Vec<Var<'t, T>>> {
        let k = self.window();
        if init.len() != k {
            return Err(TensorError::Invalid {
                op: "rollout",
                msg: format!("expected {k} initial fields, got {}", init.len()),
            });
        }
        if let Some(t) = teacher {
            if t.len() < n {
                return Err(TensorError::Invalid {
                    op: "rollout",
                    msg: format!("{} teacher fields for horizon {n}", t.len()),
                });
            }
        }
        let kernels = self.kernels(tape, store)?;
        let mut fields: Vec<Var<'t, T>> = init.iter().map(|f| tape.constant(f.clone())).collect();
        let mut tokens = fields
            .iter()
            .map(|&f| self.embed(tape, store, &kernels, f))
            .collect::<tensor::Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let pred = self.advance(tape, store, &kernels, &tokens[i..i + k], fields[i + k - 1])?;
            out.push(pred);
            if i + 1 < n {
                let next = match teacher {
                    Some(t) => tape.constant(t[i].clone()),
                    None => pred,
                };
                tokens.push(self.embed(tape, store, &kernels, next)?);
                fields.push(next);
            }
        }
        Ok(out)
    }
}

fn empty_window() -> TensorError {
    TensorError::Invalid {
        op: "model",
        msg: "empty window".into(),
    }
}

/// Geometry-only kernels and parameters evaluated once for inference.
pub struct Frozen<'m, T> {
    pub model: &'m Model<T>,
    pub store: &'m ParamStore<T>,
    kernels: [Arc<Tensor<T>>; 3],
}

/// Cached per-field state: its token pair and the field itself.
#[derive(Clone, Debug)]
pub struct Embedded<T> {
    wave: Arc<Tensor<T>>,
    phys: Arc<Tensor<T>>,
    field: Arc<Tensor<T>>,
}

impl<'m, T: Real> Frozen<'m, T> {
    pub fn new(model: &'m Model<T>, store: &'m ParamStore<T>) -> tensor::Result<Self> {
        let tape = Tape::no_grad();
        let k = model.kernels(&tape, store)?;
        Ok(Self {
            model,
            store,
            kernels: [k.enc_mix, k.dec_mix, k.dec_project].map(|v| Arc::new(v.value())),
        })
    }

    fn bind<'t>(&self, tape: &'t Tape<T>) -> CachedKernels<'t, T> {
        CachedKernels {
            enc_mix: tape.constant_shared(self.kernels[0].clone()),
            dec_mix: tape.constant_shared(self.kernels[1].clone()),
            dec_project: tape.constant_shared(self.kernels[2].clone()),
        }
    }
}

impl<T: Real> StepModel for Frozen<'_, T> {
    type State = Embedded<T>;

    fn window(&self) -> usize {
        self.model.window()
    }

    fn embed(&self, field: &Tensor<f64>) -> tensor::Result<Embedded<T>> {
        let tape = Tape::no_grad();
        let kernels = self.bind(&tape);
        let f: Tensor<T> = field.cast();
        let tokens = self.model.embed(&tape, self.store, &kernels, tape.constant(f.clone()))?;
        Ok(Embedded {
            wave: Arc::new(tokens.wave.value()),
            phys: Arc::new(tokens.phys.value()),
            field: Arc::new(f),
        })
    }

    fn advance(&self, window: &[Embedded<T>]) -> tensor::Result<Tensor<f64>> {
        let tape = Tape::no_grad();
        let kernels = self.bind(&tape);
        let tokens: Vec<_> = window
            .iter()
            .map(|e| Tokens {
                wave: tape.constant_shared(e.wave.clone()),
                phys: tape.constant_shared(e.phys.clone()),
            })
            .collect();
        let last = tape.constant_shared(window.last().ok_or_else(empty_window)?.field.clone());
        Ok(self.model.advance(&tape, self.store, &kernels, &tokens, last)?.value().cast())
    }
}
