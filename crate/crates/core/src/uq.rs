//! Monte Carlo propagation of initial-condition noise through a frozen model.

use crate::rollout::{progressive_predict, RolloutError, StepModel};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UqError {
    #[error("invalid ensemble: {0}")]
    Invalid(String),
    #[error("all {0} ensemble members diverged")]
    AllDiverged(usize),
    #[error("probe {0:?} is outside the prediction")]
    Probe(Probe),
    #[error("bad probe `{0}`; expected <point>@t<step>, e.g. 12@t20")]
    ProbeSyntax(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, UqError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub size: usize,
    /// Noise std as a fraction of the per-channel std of `u₀`.
    pub alpha: f64,
    pub seed: u64,
    pub bins: usize,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            size: 100,
            alpha: 0.01,
            seed: 0,
            bins: 30,
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !(self.alpha >= 0.0) || self.bins == 0 {
            return Err(UqError::Invalid(format!("{self:?}")));
        }
        Ok(())
    }
}

/// A point index and a prediction step (1 is the first predicted field).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Probe {
    pub point: usize,
    pub step: usize,
}

impl FromStr for Probe {
    type Err = UqError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || UqError::ProbeSyntax(s.to_string());
        let (p, t) = s.trim().split_once("@t").ok_or_else(bad)?;
        let point = p.parse().map_err(|_| bad())?;
        let step: usize = t.parse().map_err(|_| bad())?;
        if step == 0 {
            return Err(bad());
        }
        Ok(Self { point, step })
    }
}

pub fn parse_probes(s: &str) -> Result<Vec<Probe>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

/// Per-channel population std over points of a field `[N, C]`.
pub fn channel_std(u: &Tensor<f64>) -> Vec<f64> {
    let (n, c) = (u.shape()[0], u.shape()[1]);
    (0..c)
        .map(|j| {
            let col = || (0..n).map(move |i| u.data()[i * c + j]);
            let mean = col().sum::<f64>() / n as f64;
            (col().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt()
        })
        .collect()
}

/// `u₀ + η` with `η ~ N(0, (α·std_c)²)` per point and channel.
pub fn perturb_initial<R: Rng + ?Sized>(u0: &Tensor<f64>, alpha: f64, rng: &mut R) -> Tensor<f64> {
    let c = u0.shape()[1];
    let scale: Vec<f64> = channel_std(u0)
        .into_iter()
        .enumerate()
        .map(|(j, s)| {
            if s == 0.0 && alpha > 0.0 {
                log::warn!("channel {j} of the initial field is constant; it is not perturbed");
            }
            alpha * s
        })
        .collect();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = u0.clone();
    if scale.iter().all(|&s| s == 0.0) {
        return out;
    }
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        let s = scale[i % c];
        let z: f64 = unit.sample(rng);
        if s > 0.0 {
            *x += s * z;
        }
    }
    out
}

/// Probability density over equal-width bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    /// Spans the sample range; a degenerate range is widened to unit width.
    pub fn new(samples: &[f64], bins: usize) -> Self {
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|b| lo + b as f64 * width).collect();
        let mut counts = vec![0usize; bins];
        for &x in samples {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let total = samples.len() as f64;
        let density = counts
            .iter()
            .enumerate()
            .map(|(b, &k)| k as f64 / (total * (edges[b + 1] - edges[b])))
            .collect();
        Self { edges, density }
    }

    pub fn mass(&self) -> f64 {
        self.density
            .iter()
            .enumerate()
            .map(|(b, d)| d * (self.edges[b + 1] - self.edges[b]))
            .sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["bin_left", "bin_right", "density"])?;
        for (b, d) in self.density.iter().enumerate() {
            wtr.write_record([self.edges[b].to_string(), self.edges[b + 1].to_string(), d.to_string()])?;
        }
        wtr.flush()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbePdf {
    pub probe: Probe,
    pub channel: usize,
    pub histogram: Histogram,
}

/// Pointwise ensemble statistics for predicted steps `1..=n`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldStats {
    pub mean: Vec<Tensor<f64>>,
    pub std: Vec<Tensor<f64>>,
    pub members: usize,
    pub diverged: usize,
    pub probes: Vec<ProbePdf>,
}

impl FieldStats {
    /// Mean, population std and probe histograms of member roll-outs.
    pub fn from_members(members: &[Vec<Tensor<f64>>], probes: &[Probe], bins: usize) -> Result<Self> {
        let first = members.first().ok_or(UqError::AllDiverged(0))?;
        let (steps, shape) = (first.len(), first[0].shape().to_vec());
        let e = members.len() as f64;
        let mut mean = Vec::with_capacity(steps);
        let mut std = Vec::with_capacity(steps);
        for t in 0..steps {
            let base = &first[t];
            let mut shift = Tensor::<f64>::zeros(&shape);
            for run in members {
                for ((acc, x), b) in shift.data_mut().iter_mut().zip(run[t].data()).zip(base.data()) {
                    *acc += x - b;
                }
            }
            let m = Tensor::from_fn(&shape, |i| base.data()[i] + shift.data()[i] / e);
            let mut v = Tensor::<f64>::zeros(&shape);
            for run in members {
                for ((acc, x), mu) in v.data_mut().iter_mut().zip(run[t].data()).zip(m.data()) {
                    *acc += (x - mu) * (x - mu);
                }
            }
            std.push(Tensor::from_fn(&shape, |i| (v.data()[i] / e).sqrt()));
            mean.push(m);
        }
        let (n, c) = (shape[0], shape[1]);
        let mut pdfs = Vec::new();
        for &probe in probes {
            if probe.point >= n || probe.step == 0 || probe.step > steps {
                return Err(UqError::Probe(probe));
            }
            for channel in 0..c {
                let samples: Vec<f64> = members
                    .iter()
                    .map(|run| run[probe.step - 1].data()[probe.point * c + channel])
                    .collect();
                pdfs.push(ProbePdf {
                    probe,
                    channel,
                    histogram: Histogram::new(&samples, bins),
                });
            }
        }
        Ok(Self {
            mean,
            std,
            members: members.len(),
            diverged: 0,
            probes: pdfs,
        })
    }

    /// `stats_<channel>_t<step>.csv` with `point_id,mean,std`, and
    /// `pdf_p<point>_t<step>_<channel>.csv` per probe.
    pub fn write_dir(&self, dir: &Path, channels: &[String]) -> Result<()> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| UqError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        for (t, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            let c = m.shape()[1];
            for (j, name) in channels.iter().enumerate().take(c) {
                let path = dir.join(format!("stats_{name}_t{}.csv", t + 1));
                let mut text = String::from("point_id,mean,std\n");
                for i in 0..m.shape()[0] {
                    text.push_str(&format!("{i},{},{}\n", m.data()[i * c + j], s.data()[i * c + j]));
                }
                std::fs::write(&path, text).map_err(io(&path))?;
            }
        }
        for pdf in &self.probes {
            let name = channels.get(pdf.channel).cloned().unwrap_or_else(|| pdf.channel.to_string());
            let path = dir.join(format!("pdf_p{}_t{}_{name}.csv", pdf.probe.point, pdf.probe.step));
            let file = std::fs::File::create(&path).map_err(io(&path))?;
            pdf.histogram.write_csv(file).map_err(io(&path))?;
        }
        Ok(())
    }
}

/// `spec.size` progressive roll-outs of `n` steps from perturbed copies of
/// `u₀`, run in parallel. Member `i` draws from stream `i` of the seed, so
/// results do not depend on scheduling. Diverged members are dropped and
/// counted.
pub fn ensemble_run<M>(model: &M, u0: &Tensor<f64>, spec: &EnsembleSpec, n: usize, probes: &[Probe]) -> Result<FieldStats>
where
    M: StepModel + Sync,
{
    spec.validate()?;
    if n == 0 {
        return Err(UqError::Rollout(RolloutError::EmptyHorizon));
    }
    if spec.size == 1 {
        log::warn!("an ensemble of one member has zero spread");
    }
    let runs: Vec<Option<Vec<Tensor<f64>>>> = (0..spec.size)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let start = perturb_initial(u0, spec.alpha, &mut rng);
            match progressive_predict(model, &start, n) {
                Ok(out) => Ok(Some(out)),
                Err(RolloutError::NonFinite { .. }) => Ok(None),
                Err(e) => Err(UqError::from(e)),
            }
        })
        .collect::<Result<_>>()?;
    let members: Vec<_> = runs.into_iter().flatten().collect();
    let diverged = spec.size - members.len();
    if members.is_empty() {
        return Err(UqError::AllDiverged(spec.size));
    }
    if diverged > 0 {
        log::warn!("{diverged} of {} ensemble members diverged and were excluded", spec.size);
    }
    let mut stats = FieldStats::from_members(&members, probes, spec.bins)?;
    stats.diverged = diverged;
    Ok(stats)
}
