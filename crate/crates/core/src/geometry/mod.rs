//! Point clouds, the latent grid, and the neighborhoods and quadrature
//! weights used by kernel integration between them.

mod spatial;

#[cfg(test)]
pub(crate) use spatial::dist2;
pub(crate) use spatial::SpatialHash;

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub type Point = [f64; 3];

/// Volume of the unit ball in three dimensions.
pub const UNIT_BALL_VOLUME: f64 = 4.0 * std::f64::consts::PI / 3.0;

const DUPLICATE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point cloud needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("point {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("points {0} and {1} coincide")]
    Duplicate(usize, usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Positions in cm, with an optional arc-length coordinate per point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<Point>,
    arc: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point>, arc: Option<Vec<f64>>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(GeometryError::TooFewPoints(coords.len()));
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(GeometryError::NonFinite(i));
        }
        if let Some(a) = &arc {
            if a.len() != coords.len() {
                return Err(GeometryError::Invalid(format!(
                    "{} arc-length values for {} points",
                    a.len(),
                    coords.len()
                )));
            }
        }
        let hash = SpatialHash::auto(&coords);
        for (i, p) in coords.iter().enumerate() {
            if let Some(&(d, j)) = hash.knn(p, 1, Some(i)).first() {
                if d <= DUPLICATE_TOL * DUPLICATE_TOL {
                    return Err(GeometryError::Duplicate(i.min(j), i.max(j)));
                }
            }
        }
        Ok(Self { coords, arc })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn arc_length(&self) -> Option<&[f64]> {
        self.arc.as_deref()
    }

    pub fn bbox(&self) -> (Point, Point) {
        bbox(&self.coords)
    }

    /// Mean distance from each point to its nearest neighbor.
    pub fn mean_spacing(&self) -> f64 {
        let hash = SpatialHash::auto(&self.coords);
        let total: f64 = self
            .coords
            .iter()
            .enumerate()
            .map(|(i, p)| hash.knn(p, 1, Some(i))[0].0.sqrt())
            .sum();
        total / self.len() as f64
    }

    /// Reads `x,y,z[,s]` CSV with a header row.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers()?.clone();
        let names: Vec<&str> = headers.iter().collect();
        if names.len() < 3 || names[..3] != ["x", "y", "z"] {
            return Err(GeometryError::Invalid(format!(
                "expected header x,y,z[,s], got {}",
                names.join(",")
            )));
        }
        let has_arc = names.get(3) == Some(&"s");
        let mut coords = Vec::new();
        let mut arc = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| GeometryError::Invalid(format!("row {}: bad column {}", line + 2, k + 1)))
            };
            coords.push([num(0)?, num(1)?, num(2)?]);
            if has_arc {
                arc.push(num(3)?);
            }
        }
        Self::new(coords, has_arc.then_some(arc))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        match &self.arc {
            Some(_) => wtr.write_record(["x", "y", "z", "s"])?,
            None => wtr.write_record(["x", "y", "z"])?,
        }
        for (i, p) in self.coords.iter().enumerate() {
            let mut row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            if let Some(a) = &self.arc {
                row.push(a[i].to_string());
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn bbox(points: &[Point]) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

/// Regular axis-aligned grid; node `(i, j, k)` sits at `origin + (i, j, k) ⊙ spacing`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    pub origin: Point,
    pub spacing: Point,
    pub resolution: [usize; 3],
}

impl LatentGrid {
    pub fn n_nodes(&self) -> usize {
        self.resolution.iter().product()
    }

    /// Row-major node position, last axis fastest.
    pub fn node(&self, idx: usize) -> Point {
        let [_, s1, s2] = self.resolution;
        let ijk = [idx / (s1 * s2), (idx / s2) % s1, idx % s2];
        std::array::from_fn(|a| self.origin[a] + ijk[a] as f64 * self.spacing[a])
    }

    pub fn nodes(&self) -> Vec<Point> {
        (0..self.n_nodes()).map(|i| self.node(i)).collect()
    }

    pub fn extent(&self) -> Point {
        std::array::from_fn(|a| self.spacing[a] * (self.resolution[a] - 1) as f64)
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(0.0, f64::max)
    }

    /// Length of one cell diagonal.
    pub fn cell_diagonal(&self) -> f64 {
        self.spacing.iter().map(|h| h * h).sum::<f64>().sqrt()
    }

    pub fn contains(&self, p: &Point) -> bool {
        let e = self.extent();
        (0..3).all(|a| p[a] >= self.origin[a] - 1e-9 && p[a] <= self.origin[a] + e[a] + 1e-9)
    }

    /// Affine map of the grid box onto `[0, 1]³`.
    pub fn to_unit(&self, p: &Point) -> Point {
        let e = self.extent();
        std::array::from_fn(|a| (p[a] - self.origin[a]) / e[a])
    }

    /// Length of the grid box diagonal.
    pub fn diagonal(&self) -> f64 {
        self.extent().iter().map(|e| e * e).sum::<f64>().sqrt()
    }
}

/// Grid over the cloud's bounding box, grown by `pad_fraction` of each axis
/// extent on both sides. An axis with (near) zero extent is widened to the
/// largest other extent, centered on the cloud.
pub fn build_latent_grid(cloud: &PointCloud, resolution: [usize; 3], pad_fraction: f64) -> Result<LatentGrid> {
    if resolution.iter().any(|&s| s < 2) {
        return Err(GeometryError::Invalid(format!(
            "grid resolution {resolution:?} must be at least 2 per axis"
        )));
    }
    if !(pad_fraction >= 0.0 && pad_fraction.is_finite()) {
        return Err(GeometryError::Invalid(format!("pad fraction {pad_fraction} must be >= 0")));
    }
    let (mut lo, mut hi) = cloud.bbox();
    let widest = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    for a in 0..3 {
        if hi[a] - lo[a] <= 1e-9 * widest {
            let mid = 0.5 * (lo[a] + hi[a]);
            log::warn!("cloud has zero extent along axis {a}; widening it to {widest}");
            lo[a] = mid - 0.5 * widest;
            hi[a] = mid + 0.5 * widest;
        }
    }
    let mut origin = [0.0; 3];
    let mut spacing = [0.0; 3];
    for a in 0..3 {
        let pad = pad_fraction * (hi[a] - lo[a]);
        origin[a] = lo[a] - pad;
        spacing[a] = (hi[a] - lo[a] + 2.0 * pad) / (resolution[a] - 1) as f64;
    }
    Ok(LatentGrid {
        origin,
        spacing,
        resolution,
    })
}

/// Distance from each query to the nearest cloud point (cm).
pub fn distance_features(queries: &[Point], cloud: &PointCloud) -> Vec<f64> {
    let hash = SpatialHash::auto(cloud.coords());
    queries.iter().map(|q| hash.knn(q, 1, None)[0].0.sqrt()).collect()
}

/// Per-query neighbor lists in CSR layout.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
    /// Target minus query position, per edge.
    pub displacements: Vec<Point>,
    /// Queries with no neighbor inside the ball.
    pub empty: Vec<usize>,
    pub n_targets: usize,
}

impl NeighborSet {
    pub fn n_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn of(&self, q: usize) -> &[usize] {
        &self.targets[self.offsets[q]..self.offsets[q + 1]]
    }

    pub fn count(&self, q: usize) -> usize {
        self.offsets[q + 1] - self.offsets[q]
    }

    /// Query index of every edge.
    pub fn edge_queries(&self) -> Vec<usize> {
        (0..self.n_queries())
            .flat_map(|q| std::iter::repeat_n(q, self.count(q)))
            .collect()
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn point_key(seed: u64, p: &Point) -> u64 {
    p.iter().fold(mix(seed), |h, v| mix(h ^ v.to_bits()))
}

/// All targets in the closed ball of radius `r` around each query. When more
/// than `cap` fall inside, a subsample of `cap` is kept, chosen by hashing the
/// seed with the query and target positions so that the choice depends on
/// geometry, not on point order.
pub fn ball_neighbors(queries: &[Point], targets: &[Point], r: f64, cap: usize, seed: u64) -> Result<NeighborSet> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(GeometryError::Invalid(format!("radius {r} must be positive")));
    }
    if cap == 0 {
        return Err(GeometryError::Invalid("neighbor cap must be at least 1".into()));
    }
    let r_eff = r * (1.0 + 1e-12);
    let hash = SpatialHash::new(targets, r_eff);
    let mut offsets = vec![0];
    let mut out_targets = Vec::new();
    let mut displacements = Vec::new();
    let mut empty = Vec::new();
    let mut found = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        hash.within(q, r_eff, &mut found);
        if found.len() > cap {
            let qk = point_key(seed, q);
            let mut keyed: Vec<(u64, usize)> = found.iter().map(|&t| (point_key(qk, &targets[t]), t)).collect();
            keyed.sort_unstable();
            found = keyed[..cap].iter().map(|&(_, t)| t).collect();
        }
        found.sort_unstable_by(|&a, &b| targets[a].partial_cmp(&targets[b]).unwrap());
        if found.is_empty() {
            empty.push(qi);
        }
        for &t in &found {
            out_targets.push(t);
            displacements.push(std::array::from_fn(|a| targets[t][a] - q[a]));
        }
        offsets.push(out_targets.len());
    }
    Ok(NeighborSet {
        offsets,
        targets: out_targets,
        displacements,
        empty,
        n_targets: targets.len(),
    })
}

/// Inverse local density `μ = V₃ d_k³ / k`, with `d_k` the distance to the
/// `k`-th nearest other point.
pub fn riemann_weights(cloud: &PointCloud, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k >= cloud.len() {
        return Err(GeometryError::Invalid(format!(
            "density neighbor count {k} must be in 1..{}",
            cloud.len()
        )));
    }
    let pts = cloud.coords();
    let hash = SpatialHash::auto(pts);
    pts.iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = hash.knn(p, k, Some(i));
            let (d2, j) = nn[k - 1];
            if d2 <= DUPLICATE_TOL * DUPLICATE_TOL {
                return Err(GeometryError::Duplicate(i.min(j), i.max(j)));
            }
            Ok(UNIT_BALL_VOLUME * d2.sqrt().powi(3) / k as f64)
        })
        .collect()
}

/// Per-edge weights `1 / M_q`, where `M_q` is the neighbor count of the
/// edge's query. Empty queries contribute no edges.
pub fn grid_weights(neighbors: &NeighborSet) -> Vec<f64> {
    let mut w = Vec::with_capacity(neighbors.n_edges());
    for q in 0..neighbors.n_queries() {
        let m = neighbors.count(q);
        w.extend(std::iter::repeat_n(1.0 / m as f64, m));
    }
    w
}
