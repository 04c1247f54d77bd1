//! Graph-kernel integration between the point cloud and the latent grid.
//!
//! A kernel layer evaluates `out(x) = Σ_{y ∈ N(x)} κ(e(x, y)) v(y) μ(y)` with
//! a learned matrix-valued kernel κ. Edge features are
//! `[x̂(3), ŷ(3), T̂(x), T̂(y), a(y)…]`: coordinates mapped to the unit grid box,
//! distance features divided by the grid box diagonal, and optionally the
//! input field values at the target.

use crate::geometry::{
    ball_neighbors, build_latent_grid, distance_features, grid_weights, riemann_weights, GeometryError, LatentGrid,
    Point, PointCloud,
};
use crate::nn::{Linear, Mlp};
use crate::tensor::{self, EdgeList, ParamStore, Real, Tape, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

/// Geometric edge features per edge.
pub const GEO_FEATURES: usize = 8;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("no query has a neighbor within radius {0}")]
    NoEdges(f64),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Positions with their distance features.
#[derive(Clone, Debug)]
pub struct NodeSet {
    pub coords: Vec<Point>,
    pub dist: Vec<f64>,
}

impl NodeSet {
    pub fn of_cloud(cloud: &PointCloud) -> Self {
        Self {
            coords: cloud.coords().to_vec(),
            dist: distance_features(cloud.coords(), cloud),
        }
    }

    pub fn of_grid(grid: &LatentGrid, cloud: &PointCloud) -> Self {
        let coords = grid.nodes();
        let dist = distance_features(&coords, cloud);
        Self { coords, dist }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Quadrature weight rule for an edge set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `μ(y)` from the target's local density.
    Riemann,
    /// `μ(y) / Σ_{N(x)} μ`, a weighted mean per query.
    NormalizedRiemann,
    /// `1 / M_x`.
    InverseCount,
}

/// Neighborhoods, weights and geometric edge features for one query/target pair.
#[derive(Clone, Debug)]
pub struct EdgeGeometry {
    pub edges: Arc<EdgeList>,
    pub targets: Arc<Vec<usize>>,
    /// `[E, GEO_FEATURES]`.
    pub features: Tensor<f64>,
    /// Queries without neighbors; their outputs are zero.
    pub empty: Vec<usize>,
    pub radius: f64,
}

impl EdgeGeometry {
    /// `mu` holds per-target density weights and is required by the Riemann modes.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        queries: &NodeSet,
        targets: &NodeSet,
        frame: &LatentGrid,
        radius: f64,
        cap: usize,
        seed: u64,
        mode: WeightMode,
        mu: Option<&[f64]>,
    ) -> Result<Self> {
        let nb = ball_neighbors(&queries.coords, &targets.coords, radius, cap, seed)?;
        if nb.n_edges() == 0 {
            return Err(GraphError::NoEdges(radius));
        }
        let need_mu = || {
            mu.filter(|m| m.len() == targets.len()).ok_or_else(|| {
                GraphError::Tensor(TensorError::Invalid {
                    op: "edge_geometry",
                    msg: "density weights missing or misaligned with targets".into(),
                })
            })
        };
        let weights = match mode {
            WeightMode::InverseCount => grid_weights(&nb),
            WeightMode::Riemann => {
                let mu = need_mu()?;
                nb.targets.iter().map(|&t| mu[t]).collect()
            }
            WeightMode::NormalizedRiemann => {
                let mu = need_mu()?;
                let mut w = Vec::with_capacity(nb.n_edges());
                for q in 0..nb.n_queries() {
                    let row = nb.of(q);
                    let total: f64 = row.iter().map(|&t| mu[t]).sum();
                    w.extend(row.iter().map(|&t| mu[t] / total));
                }
                w
            }
        };
        let diag = frame.diagonal();
        let mut feats = Vec::with_capacity(nb.n_edges() * GEO_FEATURES);
        for (e, q) in nb.edge_queries().into_iter().enumerate() {
            let t = nb.targets[e];
            feats.extend(frame.to_unit(&queries.coords[q]));
            feats.extend(frame.to_unit(&targets.coords[t]));
            feats.push(queries.dist[q] / diag);
            feats.push(targets.dist[t] / diag);
        }
        let features = Tensor::new(&[nb.n_edges(), GEO_FEATURES], feats)?;
        Ok(Self {
            edges: Arc::new(EdgeList {
                offsets: nb.offsets,
                targets: nb.targets.clone(),
                weights,
                n_targets: nb.n_targets,
            }),
            targets: Arc::new(nb.targets),
            features,
            empty: nb.empty,
            radius,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.edges.n_edges()
    }

    pub fn n_queries(&self) -> usize {
        self.edges.n_queries()
    }
}

#[derive(Clone, Debug)]
pub enum Kernel {
    /// Edge features → `c_out · c_in` kernel entries.
    Learned(Mlp),
    /// κ ≡ I, turning the layer into a weighted neighbor sum.
    Identity,
}

/// One kernel-integration layer mapping `c_in` to `c_out` channels.
#[derive(Clone, Debug)]
pub struct KernelLayer {
    pub kernel: Kernel,
    pub c_in: usize,
    pub c_out: usize,
    /// Number of target field values appended to the edge features
    /// (`0` or `c_in`).
    pub value_features: usize,
}

impl KernelLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        hidden: usize,
        values_as_features: bool,
        rng: &mut R,
    ) -> Self {
        let value_features = if values_as_features { c_in } else { 0 };
        let net = Mlp::new(store, name, GEO_FEATURES + value_features, hidden, c_out * c_in, rng);
        Self {
            kernel: Kernel::Learned(net),
            c_in,
            c_out,
            value_features,
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            kernel: Kernel::Identity,
            c_in: channels,
            c_out: channels,
            value_features: 0,
        }
    }

    /// Kernel matrices `[E, c_out, c_in]` (or `[1, c, c]` for the identity).
    /// `values` are the target field values when the layer uses them as features.
    pub fn kernels<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        geom: &EdgeGeometry,
        values: Option<Var<'t, T>>,
    ) -> tensor::Result<Var<'t, T>> {
        let net = match &self.kernel {
            Kernel::Identity => {
                let c = self.c_in;
                return Ok(tape.constant(Tensor::eye(c).reshape(&[1, c, c])?));
            }
            Kernel::Learned(net) => net,
        };
        let geo = tape.constant(geom.features.cast());
        let feats = match (self.value_features, values) {
            (0, _) => geo,
            (_, Some(v)) => {
                let at_targets = v.gather_rows(geom.targets.clone())?;
                Var::concat(&[geo, at_targets], 1)?
            }
            (_, None) => {
                return Err(TensorError::Invalid {
                    op: "kernel_layer",
                    msg: "layer expects field values as edge features".into(),
                })
            }
        };
        net.forward(tape, store, feats)?
            .reshape(&[geom.n_edges(), self.c_out, self.c_in])
    }

    /// `Σ κ v μ` per query: `[N_targets, c_in]` to `[N_queries, c_out]`.
    pub fn integrate<'t, T: Real>(&self, kernels: Var<'t, T>, values: Var<'t, T>, geom: &EdgeGeometry) -> tensor::Result<Var<'t, T>> {
        kernels.edge_contract(values, geom.edges.clone())
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        geom: &EdgeGeometry,
        values: Var<'t, T>,
    ) -> tensor::Result<Var<'t, T>> {
        let k = self.kernels(tape, store, geom, Some(values))?;
        self.integrate(k, values, geom)
    }
}

/// Radii and caps of the encoder/decoder graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub resolution: [usize; 3],
    pub pad_fraction: f64,
    /// Cloud ball radius as a multiple of the mean nearest-neighbor spacing.
    pub radius_factor: f64,
    /// Lower bound on the cloud→grid radius, in grid cell diagonals.
    pub encoder_cell_radius: f64,
    /// Grid→grid radius in grid spacings.
    pub grid_radius: f64,
    /// Grid→cloud radius in grid cell diagonals.
    pub decoder_cell_radius: f64,
    pub cap: usize,
    pub k_density: usize,
    pub seed: u64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            resolution: [8, 8, 8],
            pad_fraction: 0.05,
            radius_factor: 2.5,
            encoder_cell_radius: 0.75,
            grid_radius: 1.0,
            decoder_cell_radius: 1.0,
            cap: 32,
            k_density: 4,
            seed: 0,
        }
    }
}

/// Everything the encoder and decoder need to know about one geometry.
#[derive(Clone, Debug)]
pub struct GraphDomain {
    pub cloud: PointCloud,
    pub grid: LatentGrid,
    pub cloud_nodes: NodeSet,
    pub grid_nodes: NodeSet,
    pub to_grid: EdgeGeometry,
    pub grid_mix: EdgeGeometry,
    pub to_cloud: EdgeGeometry,
    /// Grid nodes mapped to `[0, 1]³`, `[S³, 3]`.
    pub grid_unit: Tensor<f64>,
}

impl GraphDomain {
    pub fn new(cloud: PointCloud, cfg: &GraphConfig) -> Result<Self> {
        let grid = build_latent_grid(&cloud, cfg.resolution, cfg.pad_fraction)?;
        let cloud_nodes = NodeSet::of_cloud(&cloud);
        let grid_nodes = NodeSet::of_grid(&grid, &cloud);
        let mu = riemann_weights(&cloud, cfg.k_density.min(cloud.len() - 1))?;
        let r_cloud = cfg.radius_factor * cloud.mean_spacing();
        let r_enc = r_cloud.max(cfg.encoder_cell_radius * grid.cell_diagonal());
        let to_grid = EdgeGeometry::build(
            &grid_nodes,
            &cloud_nodes,
            &grid,
            r_enc,
            cfg.cap,
            cfg.seed,
            WeightMode::Riemann,
            Some(&mu),
        )?;
        let grid_mix = EdgeGeometry::build(
            &grid_nodes,
            &grid_nodes,
            &grid,
            cfg.grid_radius * grid.max_spacing(),
            cfg.cap,
            cfg.seed,
            WeightMode::InverseCount,
            None,
        )?;
        let to_cloud = EdgeGeometry::build(
            &cloud_nodes,
            &grid_nodes,
            &grid,
            cfg.decoder_cell_radius * grid.cell_diagonal(),
            cfg.cap,
            cfg.seed,
            WeightMode::InverseCount,
            None,
        )?;
        if !to_cloud.empty.is_empty() {
            log::warn!("{} cloud points have no grid node within the decoder radius", to_cloud.empty.len());
        }
        let unit: Vec<f64> = grid_nodes.coords.iter().flat_map(|p| grid.to_unit(p)).collect();
        let grid_unit = Tensor::new(&[grid.n_nodes(), 3], unit)?;
        Ok(Self {
            cloud,
            grid,
            cloud_nodes,
            grid_nodes,
            to_grid,
            grid_mix,
            to_cloud,
            grid_unit,
        })
    }

    pub fn n_points(&self) -> usize {
        self.cloud.len()
    }

    pub fn n_grid(&self) -> usize {
        self.grid.n_nodes()
    }
}

/// Layer widths of the encoder and decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphWidths {
    /// Field channels at the cloud, `d₀` (plus a boundary channel when present).
    pub d_in: usize,
    pub d_out: usize,
    pub hidden: usize,
    /// Latent channels `c`.
    pub latent: usize,
    pub kernel_hidden: usize,
}

/// `M̂_E`: cloud field `[N, d_in]` to latent grid field `[S³, c]`.
#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub lift: KernelLayer,
    pub mix: KernelLayer,
}

/// `M̂_D`: latent grid field `[S³, c]` to cloud field `[N, d_out]`.
#[derive(Clone, Debug)]
pub struct GraphDecoder {
    pub mix: KernelLayer,
    pub project: KernelLayer,
    pub head: Linear,
}

/// Geometry-only kernels, evaluated once per tape and shared by every
/// field encoded or decoded on it.
#[derive(Clone, Copy, Debug)]
pub struct CachedKernels<'t, T> {
    pub enc_mix: Var<'t, T>,
    pub dec_mix: Var<'t, T>,
    pub dec_project: Var<'t, T>,
}

impl GraphEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, w: &GraphWidths, rng: &mut R) -> Self {
        Self {
            lift: KernelLayer::new(store, "encoder.lift", w.d_in, w.hidden, w.kernel_hidden, true, rng),
            mix: KernelLayer::new(store, "encoder.mix", w.hidden, w.latent, w.kernel_hidden, false, rng),
        }
    }

    pub fn encode<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        domain: &GraphDomain,
        kernels: &CachedKernels<'t, T>,
        field: Var<'t, T>,
    ) -> tensor::Result<Var<'t, T>> {
        let h = self.lift.forward(tape, store, &domain.to_grid, field)?.gelu()?;
        self.mix.integrate(kernels.enc_mix, h, &domain.grid_mix)
    }
}

impl GraphDecoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, w: &GraphWidths, rng: &mut R) -> Self {
        Self {
            mix: KernelLayer::new(store, "decoder.mix", w.latent, w.hidden, w.kernel_hidden, false, rng),
            project: KernelLayer::new(store, "decoder.project", w.hidden, w.latent, w.kernel_hidden, false, rng),
            head: Linear::new(store, "decoder.head", w.latent, w.d_out, rng),
        }
    }

    pub fn decode<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        domain: &GraphDomain,
        kernels: &CachedKernels<'t, T>,
        latent: Var<'t, T>,
    ) -> tensor::Result<Var<'t, T>> {
        let h = self.mix.integrate(kernels.dec_mix, latent, &domain.grid_mix)?.gelu()?;
        let h = self.project.integrate(kernels.dec_project, h, &domain.to_cloud)?.gelu()?;
        self.head.forward(tape, store, h)
    }
}

/// Evaluates the geometry-only kernels of an encoder/decoder pair.
pub fn cached_kernels<'t, T: Real>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    domain: &GraphDomain,
    encoder: &GraphEncoder,
    decoder: &GraphDecoder,
) -> tensor::Result<CachedKernels<'t, T>> {
    Ok(CachedKernels {
        enc_mix: encoder.mix.kernels(tape, store, &domain.grid_mix, None)?,
        dec_mix: decoder.mix.kernels(tape, store, &domain.grid_mix, None)?,
        dec_project: decoder.project.kernels(tape, store, &domain.to_cloud, None)?,
    })
}
