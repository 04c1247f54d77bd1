//! Geometry-adaptive waveformer.
//!
//! Fields sampled on irregular 3-D point clouds are lifted onto a regular
//! latent grid by a learnable graph-kernel encoder, advanced in time by a
//! dual-branch transformer (one branch acting on Daubechies wavelet
//! coefficients, one in physical space), and mapped back to the cloud by a
//! graph-kernel decoder. Training, autoregressive roll-out and Monte Carlo
//! uncertainty propagation are built on top.

pub mod attention;
pub mod data;
pub mod geometry;
pub mod graph_op;
pub mod model;
pub mod nn;
pub mod rollout;
pub mod surrogate;
pub mod tensor;
pub mod train;
pub mod uq;
pub mod wavelet;
pub mod waveformer;
