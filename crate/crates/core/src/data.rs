//! Datasets of field trajectories on a fixed point cloud.
//!
//! On disk a dataset is a directory holding `manifest.json`,
//! `geometry.csv` (`x,y,z[,s]`) and one `traj_{i}/step_{t}.csv` per
//! snapshot with header `point_id,<channel>…`.
//!
//! The synthetic generator places points along a vessel centerline and
//! evolves a pressure-like and a flow-like signal by explicit upwind
//! advection with central diffusion along arc length, driven by a pulsatile
//! inflow whose amplitude and phase vary per trajectory.

use crate::geometry::{GeometryError, Point, PointCloud};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("{path}: {got} rows, manifest declares {want}")]
    RowCount { path: PathBuf, got: usize, want: usize },
    #[error("{path}: {source}")]
    Geometry { path: PathBuf, source: GeometryError },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("time step {dt} violates the stability limit (Courant {courant:.3}, diffusion number {diffusion:.3})")]
    Unstable { dt: f64, courant: f64, diffusion: f64 },
    #[error("channel {0} has zero standard deviation")]
    ZeroStd(usize),
    #[error("normalization statistics come from trajectories {stats:?}, not the training split {train:?}")]
    Leakage { stats: Vec<usize>, train: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Ordered snapshots `[N, C]` with a constant time increment.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub fields: Vec<Tensor<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// The last `test` trajectories are held out.
    pub fn tail(n: usize, test: usize) -> Self {
        let cut = n.saturating_sub(test);
        Self {
            train: (0..cut).collect(),
            test: (cut..n).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub points: usize,
    pub steps: usize,
    pub dt: f64,
    pub channels: Vec<String>,
    pub trajectories: usize,
    pub splits: Splits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub geometry: PointCloud,
    pub channels: Vec<String>,
    pub dt: f64,
    pub trajectories: Vec<Trajectory>,
    pub splits: Splits,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn step_path(dir: &Path, traj: usize, step: usize) -> PathBuf {
    dir.join(format!("traj_{traj}")).join(format!("step_{step}.csv"))
}

/// Writes one field as `point_id,<channel>…` rows.
pub fn write_field(path: &Path, channels: &[String], field: &Tensor<f64>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io(path))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let csv_err = |e: csv::Error| parse_err(path, e.to_string());
    let mut header = vec!["point_id".to_string()];
    header.extend(channels.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    let c = channels.len();
    for (i, row) in field.data().chunks(c).enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io(path))
}

fn read_field(path: &Path, channels: &[String], points: usize) -> Result<Tensor<f64>> {
    let file = std::fs::File::open(path).map_err(io(path))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    let header = r.headers().map_err(|e| parse_err(path, e.to_string()))?.clone();
    let want: Vec<&str> = std::iter::once("point_id").chain(channels.iter().map(String::as_str)).collect();
    if header.iter().collect::<Vec<_>>() != want {
        return Err(parse_err(path, format!("header {:?}, expected {want:?}", header.iter().collect::<Vec<_>>())));
    }
    let c = channels.len();
    let mut data = Vec::with_capacity(points * c);
    let mut rows = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e.to_string()))?;
        let id: usize = rec[0]
            .parse()
            .map_err(|_| parse_err(path, format!("row {}: bad point id {:?}", line + 1, &rec[0])))?;
        if id != rows {
            return Err(parse_err(path, format!("row {}: point id {id} out of order", line + 1)));
        }
        for v in rec.iter().skip(1) {
            data.push(
                v.parse::<f64>()
                    .map_err(|_| parse_err(path, format!("row {}: bad value {v:?}", line + 1)))?,
            );
        }
        rows += 1;
    }
    if rows != points {
        return Err(DataError::RowCount {
            path: path.to_path_buf(),
            got: rows,
            want: points,
        });
    }
    Tensor::new(&[points, c], data).map_err(|e| parse_err(path, e.to_string()))
}

impl Dataset {
    pub fn n_points(&self) -> usize {
        self.geometry.len()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_steps(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::len)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            points: self.n_points(),
            steps: self.n_steps(),
            dt: self.dt,
            channels: self.channels.clone(),
            trajectories: self.trajectories.len(),
            splits: self.splits.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(DataError::Invalid("no channels".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DataError::Invalid(format!("time step {}", self.dt)));
        }
        let steps = self.n_steps();
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.len() != steps {
                return Err(DataError::Invalid(format!("trajectory {i} has {} steps, expected {steps}", t.len())));
            }
            for f in &t.fields {
                if f.shape() != [self.n_points(), self.n_channels()] {
                    return Err(DataError::Invalid(format!("trajectory {i}: field shape {:?}", f.shape())));
                }
            }
        }
        let n = self.trajectories.len();
        if self.splits.train.iter().chain(&self.splits.test).any(|&i| i >= n) {
            return Err(DataError::Invalid("split references a missing trajectory".into()));
        }
        Ok(())
    }

    pub fn train(&self) -> impl Iterator<Item = &Trajectory> {
        self.splits.train.iter().map(|&i| &self.trajectories[i])
    }

    pub fn test(&self) -> impl Iterator<Item = &Trajectory> {
        self.splits.test.iter().map(|&i| &self.trajectories[i])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let manifest = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest()).map_err(|e| parse_err(&manifest, e.to_string()))?;
        std::fs::write(&manifest, json).map_err(io(&manifest))?;
        let geo = dir.join("geometry.csv");
        self.geometry.save(&geo).map_err(|source| DataError::Geometry { path: geo.clone(), source })?;
        self.trajectories.par_iter().enumerate().try_for_each(|(i, t)| {
            let tdir = dir.join(format!("traj_{i}"));
            std::fs::create_dir_all(&tdir).map_err(io(&tdir))?;
            t.fields
                .iter()
                .enumerate()
                .try_for_each(|(s, f)| write_field(&step_path(dir, i, s), &self.channels, f))
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = std::fs::read_to_string(&mpath).map_err(io(&mpath))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| parse_err(&mpath, e.to_string()))?;
        let gpath = dir.join("geometry.csv");
        let geometry = PointCloud::load(&gpath).map_err(|source| DataError::Geometry { path: gpath.clone(), source })?;
        if geometry.len() != m.points {
            return Err(DataError::RowCount {
                path: gpath,
                got: geometry.len(),
                want: m.points,
            });
        }
        let trajectories = (0..m.trajectories)
            .into_par_iter()
            .map(|i| {
                let fields = (0..m.steps)
                    .map(|s| read_field(&step_path(dir, i, s), &m.channels, m.points))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Trajectory { fields })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Self {
            geometry,
            channels: m.channels,
            dt: m.dt,
            trajectories,
            splits: m.splits,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Per-channel mean and standard deviation, with the trajectories they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub source: Vec<usize>,
}

impl NormStats {
    /// Statistics over every point and step of the given trajectories.
    pub fn from_trajectories(ds: &Dataset, ids: &[usize]) -> Result<Self> {
        let c = ds.n_channels();
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for &i in ids {
            for f in &ds.trajectories[i].fields {
                for row in f.data().chunks(c) {
                    for (s, v) in sum.iter_mut().zip(row) {
                        *s += v;
                    }
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(DataError::Invalid("no samples for normalization".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; c];
        for &i in ids {
            for f in &ds.trajectories[i].fields {
                for row in f.data().chunks(c) {
                    for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        if let Some(ch) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(DataError::ZeroStd(ch));
        }
        Ok(Self {
            mean,
            std,
            source: ids.to_vec(),
        })
    }

    pub fn from_train(ds: &Dataset) -> Result<Self> {
        Self::from_trajectories(ds, &ds.splits.train)
    }

    pub fn normalize_field(&self, f: &Tensor<f64>) -> Tensor<f64> {
        let c = self.mean.len();
        Tensor::from_fn(f.shape(), |p| (f.data()[p] - self.mean[p % c]) / self.std[p % c])
    }

    pub fn denormalize_field(&self, f: &Tensor<f64>) -> Tensor<f64> {
        let c = self.mean.len();
        Tensor::from_fn(f.shape(), |p| f.data()[p] * self.std[p % c] + self.mean[p % c])
    }

    /// Rejects statistics that were not computed on exactly the training split.
    pub fn check_provenance(&self, ds: &Dataset) -> Result<()> {
        if self.source != ds.splits.train {
            return Err(DataError::Leakage {
                stats: self.source.clone(),
                train: ds.splits.train.clone(),
            });
        }
        Ok(())
    }
}

/// Copy of `ds` in normalized units.
pub fn normalize(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    stats.check_provenance(ds)?;
    if stats.mean.len() != ds.n_channels() {
        return Err(DataError::Invalid("statistics and dataset channel counts differ".into()));
    }
    if let Some(ch) = stats.std.iter().position(|&s| !(s > 0.0)) {
        return Err(DataError::ZeroStd(ch));
    }
    Ok(map_fields(ds, |f| stats.normalize_field(f)))
}

pub fn denormalize(ds: &Dataset, stats: &NormStats) -> Dataset {
    map_fields(ds, |f| stats.denormalize_field(f))
}

fn map_fields(ds: &Dataset, f: impl Fn(&Tensor<f64>) -> Tensor<f64>) -> Dataset {
    Dataset {
        trajectories: ds
            .trajectories
            .iter()
            .map(|t| Trajectory {
                fields: t.fields.iter().map(&f).collect(),
            })
            .collect(),
        ..ds.clone()
    }
}

/// One channel of 1-D advection–diffusion on a network of segments.
///
/// Node `i` takes its upwind value from `upstream[i]` (`None` for the inlet,
/// which reads the inflow value); outlets use a zero-gradient condition.
#[derive(Clone, Debug)]
pub struct Stepper {
    pub ds: f64,
    pub speed: f64,
    pub diffusion: f64,
    pub upstream: Vec<Option<usize>>,
    pub downstream: Vec<Vec<usize>>,
}

impl Stepper {
    /// Straight chain `0 → 1 → … → n−1`; `periodic` closes it into a ring.
    pub fn chain(n: usize, ds: f64, speed: f64, diffusion: f64, periodic: bool) -> Self {
        let upstream = (0..n)
            .map(|i| match (i, periodic) {
                (0, true) => Some(n - 1),
                (0, false) => None,
                _ => Some(i - 1),
            })
            .collect();
        let downstream = (0..n)
            .map(|i| match (i + 1 == n, periodic) {
                (true, true) => vec![0],
                (true, false) => vec![],
                _ => vec![i + 1],
            })
            .collect();
        Self {
            ds,
            speed,
            diffusion,
            upstream,
            downstream,
        }
    }

    fn numbers(&self, dt: f64) -> (f64, f64) {
        (self.speed * dt / self.ds, self.diffusion * dt / (self.ds * self.ds))
    }

    /// Smallest number of equal substeps keeping `dt` stable.
    pub fn substeps(&self, dt: f64) -> usize {
        let (c, d) = self.numbers(dt);
        ((c + 2.0 * d) / 0.9).ceil().max(1.0) as usize
    }

    /// One explicit step of length `dt`; errors when unstable.
    pub fn step(&self, u: &[f64], inflow: f64, dt: f64) -> Result<Vec<f64>> {
        let (c, d) = self.numbers(dt);
        if c + 2.0 * d > 1.0 {
            return Err(DataError::Unstable {
                dt,
                courant: c,
                diffusion: d,
            });
        }
        Ok((0..u.len())
            .map(|i| {
                let up = self.upstream[i].map_or(inflow, |j| u[j]);
                let down = &self.downstream[i];
                let dn = if down.is_empty() {
                    u[i]
                } else {
                    down.iter().map(|&j| u[j]).sum::<f64>() / down.len() as f64
                };
                u[i] - c * (u[i] - up) + d * (dn - 2.0 * u[i] + up)
            })
            .collect())
    }

    /// Advances by `dt` using [`Stepper::substeps`] equal substeps, with the
    /// inflow evaluated at each substep start.
    pub fn advance(&self, u: &[f64], t: f64, dt: f64, inflow: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
        let m = self.substeps(dt);
        let h = dt / m as f64;
        let mut cur = u.to_vec();
        for j in 0..m {
            cur = self.step(&cur, inflow(t + j as f64 * h), h)?;
        }
        Ok(cur)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VesselKind {
    /// Helical tube.
    Tube,
    /// Y-junction: a trunk splitting into two branches.
    Bifurcation,
}

impl std::str::FromStr for VesselKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tube" => Ok(Self::Tube),
            "bifurcation" => Ok(Self::Bifurcation),
            other => Err(format!("unknown vessel kind {other:?} (expected tube or bifurcation)")),
        }
    }
}

/// Physical constants of the synthetic vessel (cm, s, mmHg, cm³/s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Physics {
    pub length: f64,
    pub dt: f64,
    pub period: f64,
    pub speed: f64,
    pub diffusion: f64,
    pub pressure_mean: f64,
    pub pressure_amplitude: f64,
    /// Static pressure drop per cm of arc length.
    pub pressure_gradient: f64,
    pub flow_mean: f64,
    /// Relative flow pulsation.
    pub flow_amplitude: f64,
    /// Per-trajectory amplitude scale is drawn from `[1 − a, 1 + a]`.
    pub amplitude_spread: f64,
    /// Auto-substep instead of failing when `dt` is unstable.
    pub substep: bool,
}

impl Default for Physics {
    fn default() -> Self {
        Self {
            length: 12.0,
            dt: 0.05,
            period: 0.8,
            speed: 15.0,
            diffusion: 0.5,
            pressure_mean: 80.0,
            pressure_amplitude: 12.0,
            pressure_gradient: 0.5,
            flow_mean: 5.0,
            flow_amplitude: 0.6,
            amplitude_spread: 0.4,
            substep: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: VesselKind,
    pub points: usize,
    pub steps: usize,
    pub trajectories: usize,
    pub seed: u64,
    /// Held-out trajectories, taken from the end.
    pub test: usize,
    pub physics: Physics,
}

impl SynthSpec {
    pub fn new(kind: VesselKind, points: usize, steps: usize, trajectories: usize, seed: u64) -> Self {
        Self {
            kind,
            points,
            steps,
            trajectories,
            seed,
            test: 5,
            physics: Physics::default(),
        }
    }
}

/// Centerline points, arc length and the transport network of a vessel.
pub fn vessel(kind: VesselKind, n: usize, length: f64) -> Result<(PointCloud, Vec<Option<usize>>, Vec<Vec<usize>>, f64)> {
    if n < 16 {
        return Err(DataError::Invalid(format!("{n} points; at least 16 are needed")));
    }
    let geo = |e: GeometryError| DataError::Invalid(e.to_string());
    match kind {
        VesselKind::Tube => {
            let ds = length / (n - 1) as f64;
            let (radius, pitch) = (1.5f64, 0.6f64);
            let per_rad = (radius * radius + pitch * pitch).sqrt();
            let arc: Vec<f64> = (0..n).map(|i| i as f64 * ds).collect();
            let coords: Vec<Point> = arc
                .iter()
                .map(|s| {
                    let th = s / per_rad;
                    [radius * th.cos(), radius * th.sin(), pitch * th]
                })
                .collect();
            let mut up: Vec<Option<usize>> = (0..n).map(|i| i.checked_sub(1)).collect();
            up[0] = None;
            let down = (0..n).map(|i| if i + 1 < n { vec![i + 1] } else { vec![] }).collect();
            Ok((PointCloud::new(coords, Some(arc)).map_err(geo)?, up, down, ds))
        }
        VesselKind::Bifurcation => {
            let trunk = n / 2;
            let branch_a = (n - trunk) / 2;
            let branch_b = n - trunk - branch_a;
            let ds = length / (trunk + branch_a.max(branch_b) - 1) as f64;
            let mut coords = Vec::with_capacity(n);
            let mut arc = Vec::with_capacity(n);
            let mut up = Vec::with_capacity(n);
            let mut down: Vec<Vec<usize>> = vec![Vec::new(); n];
            for i in 0..trunk {
                coords.push([0.0, 0.0, i as f64 * ds]);
                arc.push(i as f64 * ds);
                up.push(i.checked_sub(1));
                if i + 1 < trunk {
                    down[i].push(i + 1);
                }
            }
            let joint = trunk - 1;
            let tip = coords[joint];
            let half = 30f64.to_radians();
            for (start, count, sign) in [(trunk, branch_a, 1.0), (trunk + branch_a, branch_b, -1.0)] {
                let dir = [sign * half.sin(), sign * 0.25, half.cos()];
                let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
                for j in 0..count {
                    let t = (j + 1) as f64 * ds;
                    coords.push([tip[0] + t * dir[0] / norm, tip[1] + t * dir[1] / norm, tip[2] + t * dir[2] / norm]);
                    arc.push(arc[joint] + t);
                    let idx = start + j;
                    let prev = if j == 0 { joint } else { idx - 1 };
                    up.push(Some(prev));
                    down[prev].push(idx);
                }
            }
            Ok((PointCloud::new(coords, Some(arc)).map_err(geo)?, up, down, ds))
        }
    }
}

/// Synthetic pressure/flow trajectories; the finite-difference stepper is
/// the ground truth.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    let ph = &spec.physics;
    if spec.steps < 2 || spec.trajectories == 0 {
        return Err(DataError::Invalid("need at least 2 steps and 1 trajectory".into()));
    }
    if spec.test >= spec.trajectories && spec.trajectories > 1 {
        return Err(DataError::Invalid(format!(
            "{} held-out trajectories leave none for training",
            spec.test
        )));
    }
    let (geometry, upstream, downstream, ds) = vessel(spec.kind, spec.points, ph.length)?;
    let stepper = Stepper {
        ds,
        speed: ph.speed,
        diffusion: ph.diffusion,
        upstream,
        downstream,
    };
    if !ph.substep {
        let (c, d) = stepper.numbers(ph.dt);
        if c + 2.0 * d > 1.0 {
            return Err(DataError::Unstable {
                dt: ph.dt,
                courant: c,
                diffusion: d,
            });
        }
    }
    let arc = geometry.arc_length().expect("generated vessels carry arc length").to_vec();
    let total = arc.iter().copied().fold(0.0, f64::max);
    let n = spec.points;
    // Flow divides at the junction of a bifurcation.
    let split: Vec<f64> = (0..n)
        .map(|i| match spec.kind {
            VesselKind::Bifurcation if i >= n / 2 => 0.5,
            _ => 1.0,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let params: Vec<(f64, f64)> = (0..spec.trajectories)
        .map(|_| {
            let amp = 1.0 + ph.amplitude_spread * rng.gen_range(-1.0..1.0);
            (amp, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let omega = 2.0 * PI / ph.period;
    let warmup = if ph.speed > 0.0 { (2.0 * total / ph.speed / ph.dt).ceil() as usize } else { 0 };
    let trajectories = params
        .par_iter()
        .map(|&(amp, phase)| {
            let p_in = |t: f64| {
                ph.pressure_mean
                    + amp * ph.pressure_amplitude * ((omega * t + phase).sin() + 0.35 * (2.0 * omega * t + 2.0 * phase + 0.6).sin())
            };
            let q_in = |t: f64| ph.flow_mean * (1.0 + amp * ph.flow_amplitude * (omega * t + phase - 0.4).sin());
            let t0 = -(warmup as f64) * ph.dt;
            let mut p = vec![p_in(t0); n];
            let mut q = vec![q_in(t0); n];
            let mut fields = Vec::with_capacity(spec.steps);
            for step in 0..warmup + spec.steps {
                let t = t0 + step as f64 * ph.dt;
                if step >= warmup {
                    let data: Vec<f64> = (0..n)
                        .flat_map(|i| [p[i] - ph.pressure_gradient * arc[i], q[i] * split[i]])
                        .collect();
                    fields.push(Tensor::new(&[n, 2], data).expect("field shape"));
                }
                p = stepper.advance(&p, t, ph.dt, p_in)?;
                q = stepper.advance(&q, t, ph.dt, q_in)?;
            }
            Ok(Trajectory { fields })
        })
        .collect::<Result<Vec<_>>>()?;
    let test = if spec.trajectories > 1 { spec.test } else { 0 };
    Ok(Dataset {
        geometry,
        channels: vec!["pressure_mmhg".into(), "flow_cm3s".into()],
        dt: ph.dt,
        trajectories,
        splits: Splits::tail(spec.trajectories, test),
    })
}

#[cfg(test)]
mod tests;
