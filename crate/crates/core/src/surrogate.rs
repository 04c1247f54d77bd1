//! Trained models bundled with their normalization, in physical units.
//!
//! A surrogate holds one model per field channel, or a single joint model.
//! It is stored as `model.json` plus one binary checkpoint per part.

use crate::data::{normalize, DataError, Dataset, NormStats, Trajectory};
use crate::geometry::PointCloud;
use crate::model::{Embedded, Frozen, Model, ModelConfig, ModelError};
use crate::rollout::{predict_steps, RolloutError, StepModel};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore, Tensor, TensorError};
use crate::train::{fit, relative_mse, EpochRecord, History, TrainConfig, TrainError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
    #[error("{0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, SurrogateError>;

const FORMAT: u32 = 1;

/// Columns `idx` of a field `[N, C]`.
pub fn select_channels(f: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let (c, m) = (f.shape()[1], idx.len());
    Tensor::from_fn(&[f.shape()[0], m], |i| f.data()[(i / m) * c + idx[i % m]])
}

/// The dataset restricted to channels `idx`.
pub fn subset(ds: &Dataset, idx: &[usize]) -> Dataset {
    Dataset {
        geometry: ds.geometry.clone(),
        channels: idx.iter().map(|&i| ds.channels[i].clone()).collect(),
        dt: ds.dt,
        trajectories: ds
            .trajectories
            .iter()
            .map(|t| Trajectory {
                fields: t.fields.iter().map(|f| select_channels(f, idx)).collect(),
            })
            .collect(),
        splits: ds.splits.clone(),
    }
}

pub struct Part {
    /// Dataset channels this part predicts.
    pub channels: Vec<usize>,
    pub stats: NormStats,
    pub model: Model<f32>,
    pub store: ParamStore<f32>,
}

pub struct Surrogate {
    pub channels: Vec<String>,
    pub train: TrainConfig,
    pub parts: Vec<Part>,
}

#[derive(Serialize, Deserialize)]
struct PartFile {
    channels: Vec<usize>,
    config: ModelConfig,
    stats: NormStats,
    params: String,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: u32,
    channels: Vec<String>,
    train: TrainConfig,
    parts: Vec<PartFile>,
}

fn file_err(path: &Path, msg: impl ToString) -> SurrogateError {
    SurrogateError::File {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

/// Channel groups: one per channel, or all together.
pub fn channel_groups(n: usize, joint: bool) -> Vec<Vec<usize>> {
    if joint {
        vec![(0..n).collect()]
    } else {
        (0..n).map(|c| vec![c]).collect()
    }
}

impl Surrogate {
    /// Fits one model per channel group on the training split of `ds`
    /// (physical units). `template` supplies the architecture; its channel
    /// count and window are set from the data and `tc`.
    pub fn fit(
        ds: &Dataset,
        template: &ModelConfig,
        tc: &TrainConfig,
        joint: bool,
        mut on_epoch: impl FnMut(&[String], &EpochRecord),
    ) -> Result<(Self, Vec<History>)> {
        ds.validate()?;
        let mut parts = Vec::new();
        let mut histories = Vec::new();
        for group in channel_groups(ds.n_channels(), joint) {
            let sub = subset(ds, &group);
            let stats = NormStats::from_train(&sub)?;
            let norm = normalize(&sub, &stats)?;
            let config = ModelConfig {
                channels: group.len(),
                window: tc.window,
                ..template.clone()
            };
            let (model, mut store) = Model::<f32>::new(ds.geometry.clone(), config)?;
            let train: Vec<_> = norm.train().collect();
            let test: Vec<_> = norm.test().collect();
            let names = sub.channels.clone();
            let history = fit(&model, &mut store, &train, &test, tc, |r| on_epoch(&names, r))?;
            histories.push(history);
            parts.push(Part {
                channels: group,
                stats,
                model,
                store,
            });
        }
        Ok((
            Self {
                channels: ds.channels.clone(),
                train: tc.clone(),
                parts,
            },
            histories,
        ))
    }

    /// Untrained parts with statistics from `ds`, as a baseline.
    pub fn untrained(ds: &Dataset, template: &ModelConfig, tc: &TrainConfig, joint: bool) -> Result<Self> {
        let mut parts = Vec::new();
        for group in channel_groups(ds.n_channels(), joint) {
            let stats = NormStats::from_train(&subset(ds, &group))?;
            let config = ModelConfig {
                channels: group.len(),
                window: tc.window,
                ..template.clone()
            };
            let (model, store) = Model::<f32>::new(ds.geometry.clone(), config)?;
            parts.push(Part {
                channels: group,
                stats,
                model,
                store,
            });
        }
        Ok(Self {
            channels: ds.channels.clone(),
            train: tc.clone(),
            parts,
        })
    }

    pub fn window(&self) -> usize {
        self.train.window
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
        let mut files = Vec::new();
        for (i, part) in self.parts.iter().enumerate() {
            let name = format!("part_{i}.bin");
            let path = dir.join(&name);
            let file = std::fs::File::create(&path).map_err(|e| file_err(&path, e))?;
            write_checkpoint(&part.store, std::io::BufWriter::new(file))?;
            files.push(PartFile {
                channels: part.channels.clone(),
                config: part.model.config.clone(),
                stats: part.stats.clone(),
                params: name,
            });
        }
        let manifest = ModelFile {
            format: FORMAT,
            channels: self.channels.clone(),
            train: self.train.clone(),
            parts: files,
        };
        let path = dir.join("model.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| file_err(&path, e))?;
        std::fs::write(&path, text).map_err(|e| file_err(&path, e))
    }

    /// Loads a saved surrogate and builds its graphs on `cloud`.
    pub fn load(dir: &Path, cloud: &PointCloud) -> Result<Self> {
        let path = dir.join("model.json");
        let text = std::fs::read_to_string(&path).map_err(|e| file_err(&path, e))?;
        let manifest: ModelFile = serde_json::from_str(&text).map_err(|e| file_err(&path, e))?;
        if manifest.format != FORMAT {
            return Err(file_err(&path, format!("unsupported format {}", manifest.format)));
        }
        let mut parts = Vec::new();
        for p in manifest.parts {
            let ppath = dir.join(&p.params);
            let file = std::fs::File::open(&ppath).map_err(|e| file_err(&ppath, e))?;
            let store = read_checkpoint::<f32, _>(std::io::BufReader::new(file))?;
            let model = Model::with_params(cloud.clone(), p.config, &store)?;
            parts.push(Part {
                channels: p.channels,
                stats: p.stats,
                model,
                store,
            });
        }
        Ok(Self {
            channels: manifest.channels,
            train: manifest.train,
            parts,
        })
    }

    /// Checks that `ds` carries the channels this surrogate was trained on.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.channels != self.channels {
            return Err(SurrogateError::Mismatch(format!(
                "dataset channels {:?}, model channels {:?}",
                ds.channels, self.channels
            )));
        }
        Ok(())
    }

    pub fn frozen(&self) -> Result<Physical<'_>> {
        let parts = self
            .parts
            .iter()
            .map(|p| Ok((p, Frozen::new(&p.model, &p.store)?)))
            .collect::<std::result::Result<Vec<_>, TensorError>>()?;
        Ok(Physical {
            parts,
            n_channels: self.channels.len(),
            window: self.window(),
        })
    }

    /// Sliding-window relative MSE (percent) of each channel and of all
    /// channels together, averaged over `trajs`.
    pub fn evaluate(&self, trajs: &[&Trajectory], n: usize) -> Result<ChannelErrors> {
        let k = self.window();
        let model = self.frozen()?;
        let c = self.channels.len();
        let per_traj = trajs
            .par_iter()
            .map(|t| {
                if t.len() < k + n {
                    return Err(SurrogateError::Mismatch(format!(
                        "trajectory has {} steps; window {k} plus horizon {n} needs {}",
                        t.len(),
                        k + n
                    )));
                }
                let pred = predict_steps(&model, &t.fields[..k], n)?;
                let truth = &t.fields[k..k + n];
                let mut errs = Vec::with_capacity(c + 1);
                for ch in 0..c {
                    let p: Vec<_> = pred.iter().map(|f| select_channels(f, &[ch])).collect();
                    let q: Vec<_> = truth.iter().map(|f| select_channels(f, &[ch])).collect();
                    errs.push(relative_mse(&p, &q)?);
                }
                errs.push(relative_mse(&pred, truth)?);
                Ok(errs)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mean = vec![0.0; c + 1];
        for errs in &per_traj {
            for (m, e) in mean.iter_mut().zip(errs) {
                *m += e / per_traj.len() as f64;
            }
        }
        let all = mean.pop().unwrap_or(f64::NAN);
        Ok(ChannelErrors { per_channel: mean, all })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelErrors {
    pub per_channel: Vec<f64>,
    pub all: f64,
}

/// One row of the error table: a dataset channel (or `all`) with its
/// train and optional test error in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub label: String,
    pub train: f64,
    pub test: Option<f64>,
}

/// Per-channel train/test errors of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub const HEADER: [&'static str; 3] = ["dataset", "train error", "test error"];
    pub const CSV_HEADER: &'static str = "dataset,train_error_pct,test_error_pct";

    /// Rows `<name>:<channel>` for each channel, then `<name>:all`.
    pub fn new(name: &str, channels: &[String], train: &ChannelErrors, test: Option<&ChannelErrors>) -> Self {
        let mut rows: Vec<EvalRow> = channels
            .iter()
            .enumerate()
            .map(|(c, ch)| EvalRow {
                label: format!("{name}:{ch}"),
                train: train.per_channel[c],
                test: test.map(|e| e.per_channel[c]),
            })
            .collect();
        rows.push(EvalRow {
            label: format!("{name}:all"),
            train: train.all,
            test: test.map(|e| e.all),
        });
        Self { rows }
    }

    /// Aligned text table; a missing test error prints as `-`.
    pub fn render(&self) -> String {
        let [h0, h1, h2] = Self::HEADER;
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(h0.len());
        let mut out = format!("{h0:<width$}  {h1:>12}  {h2:>12}\n");
        for r in &self.rows {
            let te = r.test.map_or("-".to_string(), |v| format!("{v:.3}%"));
            out.push_str(&format!("{:<width$}  {:>12}  {te:>12}\n", r.label, format!("{:.3}%", r.train)));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let te = r.test.map_or(String::new(), |v| v.to_string());
            out.push_str(&format!("{},{},{te}\n", r.label, r.train));
        }
        out
    }
}

/// A frozen surrogate acting on physical fields `[N, C]`.
pub struct Physical<'s> {
    parts: Vec<(&'s Part, Frozen<'s, f32>)>,
    n_channels: usize,
    window: usize,
}

impl StepModel for Physical<'_> {
    type State = Vec<Embedded<f32>>;

    fn window(&self) -> usize {
        self.window
    }

    fn embed(&self, field: &Tensor<f64>) -> std::result::Result<Self::State, TensorError> {
        self.parts
            .iter()
            .map(|(part, frozen)| frozen.embed(&part.stats.normalize_field(&select_channels(field, &part.channels))))
            .collect()
    }

    fn advance(&self, window: &[Self::State]) -> std::result::Result<Tensor<f64>, TensorError> {
        let n = self.parts[0].1.model.n_points();
        let c = self.n_channels;
        let mut out = Tensor::zeros(&[n, c]);
        for (j, (part, frozen)) in self.parts.iter().enumerate() {
            let states: Vec<_> = window.iter().map(|s| s[j].clone()).collect();
            let pred = part.stats.denormalize_field(&frozen.advance(&states)?);
            let m = part.channels.len();
            for i in 0..n {
                for (a, &ch) in part.channels.iter().enumerate() {
                    out.data_mut()[i * c + ch] = pred.data()[i * m + a];
                }
            }
        }
        Ok(out)
    }
}
