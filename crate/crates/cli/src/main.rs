//! `gwf`: synthetic data, training, prediction, uncertainty propagation and
//! evaluation for the geometry-adaptive waveformer.

mod error;

use clap::{Args, Parser, Subcommand, ValueEnum};
use error::Failure;
use gwf::data::{gen_synthetic, write_field, Dataset, SynthSpec, VesselKind};
use gwf::model::ModelConfig;
use gwf::rollout::{predict_steps, progressive_predict};
use gwf::surrogate::{EvalTable, Surrogate};
use gwf::train::{relative_mse, TrainConfig};
use gwf::uq::{ensemble_run, parse_probes, EnsembleSpec};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "gwf", version, about = "Geometry-adaptive waveformer for fields on vessel centerlines")]
#[command(after_help = "Exit codes: 0 success, 2 usage or configuration error, 3 data error, 4 numeric divergence.\n\
GWF_SEED overrides the default seed of every command.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pressure/flow dataset on a tube or bifurcation.
    GenData(GenData),
    /// Train a surrogate with full-horizon roll-out loss and Adam.
    Train(Train),
    /// Roll a trained surrogate forward and score it per step.
    Predict(Predict),
    /// Propagate initial-condition noise through a trained surrogate.
    Uq(Uq),
    /// Tabulate train and test relative MSE.
    Eval(Eval),
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_enum, default_value_t = Kind::Tube)]
    kind: Kind,
    #[arg(long, default_value_t = 64)]
    points: usize,
    #[arg(long, default_value_t = 40)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    trajs: usize,
    /// Trajectories held out for testing (27 train / 5 test at 32).
    #[arg(long, default_value_t = 5)]
    test: usize,
    #[arg(long, default_value_t = 0, env = "GWF_SEED")]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Tube,
    Bifurcation,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Reduced widths for a single CPU.
    Desk,
    /// Full widths (64/32 graph widths, 128 token width).
    Full,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Initial Adam learning rate, decayed by 0.6 every 5 epochs.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Latent grid nodes per axis.
    #[arg(long)]
    grid: Option<usize>,
    /// Window length k.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Roll-out horizon n.
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Daubechies family, db1 to db10.
    #[arg(long, default_value = "db4")]
    wavelet: String,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// One model for all channels instead of one per channel.
    #[arg(long)]
    joint: bool,
    /// Feed ground truth back into the window during training.
    #[arg(long)]
    teacher_forcing: bool,
    #[arg(long, default_value_t = 0, env = "GWF_SEED")]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    /// Sliding window from the first k fields.
    Window,
    /// From the initial field alone.
    Progressive,
}

#[derive(Args)]
struct Predict {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Window)]
    mode: Mode,
    /// Steps to predict; defaults to the training horizon n.
    #[arg(long)]
    horizon: Option<usize>,
    /// Trajectory indices, comma separated; defaults to the test split.
    #[arg(long, value_delimiter = ',')]
    traj: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Uq {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Noise std as a fraction of the initial field's per-channel std.
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// Ensemble size.
    #[arg(long, default_value_t = 100)]
    ensemble: usize,
    /// Probe points as <point>@t<step>, comma separated, e.g. 12@t20.
    #[arg(long, default_value = "")]
    probes: String,
    /// Steps to propagate; defaults to the training horizon n.
    #[arg(long)]
    horizon: Option<usize>,
    /// Trajectory supplying the initial field; defaults to the first test trajectory.
    #[arg(long)]
    traj: Option<usize>,
    #[arg(long, default_value_t = 30)]
    bins: usize,
    #[arg(long, default_value_t = 0, env = "GWF_SEED")]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Horizon; defaults to the training horizon n.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Uq(a) => uq(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn gen_data(a: GenData) -> Result<(), Failure> {
    let kind = match a.kind {
        Kind::Tube => VesselKind::Tube,
        Kind::Bifurcation => VesselKind::Bifurcation,
    };
    let spec = SynthSpec {
        test: a.test,
        ..SynthSpec::new(kind, a.points, a.steps, a.trajs, a.seed)
    };
    let ds = gen_synthetic(&spec)?;
    ds.save(&a.out)?;
    println!(
        "wrote {} trajectories ({} train, {} test) of {} steps on {} points to {}",
        ds.trajectories.len(),
        ds.splits.train.len(),
        ds.splits.test.len(),
        ds.n_steps(),
        ds.n_points(),
        a.out.display()
    );
    Ok(())
}

fn load(dir: &Path) -> Result<Dataset, Failure> {
    Ok(Dataset::load(dir)?)
}

fn load_model(dir: &Path, ds: &Dataset) -> Result<Surrogate, Failure> {
    let s = Surrogate::load(dir, &ds.geometry)?;
    s.check_dataset(ds)?;
    Ok(s)
}

fn train(a: Train) -> Result<(), Failure> {
    let ds = load(&a.data)?;
    if ds.n_steps() < a.k + a.n {
        return Err(Failure::data(format!(
            "trajectories have {} steps; window {} plus horizon {} needs {}",
            ds.n_steps(),
            a.k,
            a.n,
            a.k + a.n
        )));
    }
    let mut template = match a.preset {
        Preset::Desk => ModelConfig::desk(ds.n_channels(), a.k),
        Preset::Full => ModelConfig::full(ds.n_channels(), a.k),
    };
    if let Some(g) = a.grid {
        template.graph.resolution = [g; 3];
    }
    template.waveformer.wavelet = a.wavelet.clone();
    template.seed = a.seed;
    let tc = TrainConfig {
        lr: a.lr,
        epochs: a.epochs,
        window: a.k,
        horizon: a.n,
        seed: a.seed,
        teacher_forcing: a.teacher_forcing,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (surrogate, histories) = Surrogate::fit(&ds, &template, &tc, a.joint, |names, r| {
        log::info!(
            "[{}] epoch {} train {:.4}% val {:.4}% lr {:.2e}",
            names.join("+"),
            r.epoch,
            r.train_rel_mse_pct,
            r.val_rel_mse_pct,
            r.lr
        );
    })?;
    surrogate.save(&a.out)?;
    for (part, h) in surrogate.parts.iter().zip(&histories) {
        let label: Vec<_> = part.channels.iter().map(|&c| ds.channels[c].as_str()).collect();
        let path = a.out.join(format!("loss_{}.csv", label.join("+")));
        let file = std::fs::File::create(&path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        h.write_csv(file)?;
    }
    let train: Vec<_> = ds.train().collect();
    let test: Vec<_> = ds.test().collect();
    let tr = surrogate.evaluate(&train, a.n)?;
    println!("trained in {:.1} s", start.elapsed().as_secs_f64());
    println!("train relative MSE {:.4}%", tr.all);
    if !test.is_empty() {
        println!("test relative MSE {:.4}%", surrogate.evaluate(&test, a.n)?.all);
    }
    Ok(())
}

fn chosen(ds: &Dataset, picked: &[usize]) -> Result<Vec<usize>, Failure> {
    let ids = if picked.is_empty() {
        if ds.splits.test.is_empty() {
            ds.splits.train.clone()
        } else {
            ds.splits.test.clone()
        }
    } else {
        picked.to_vec()
    };
    if let Some(&bad) = ids.iter().find(|&&i| i >= ds.trajectories.len()) {
        return Err(Failure::usage(format!("trajectory {bad} does not exist")));
    }
    Ok(ids)
}

fn predict(a: Predict) -> Result<(), Failure> {
    let ds = load(&a.data)?;
    let s = load_model(&a.model, &ds)?;
    let m = a.horizon.unwrap_or(s.train.horizon);
    let k = s.window();
    let model = s.frozen()?;
    for i in chosen(&ds, &a.traj)? {
        let t = &ds.trajectories[i];
        let (pred, first) = match a.mode {
            Mode::Window => {
                if t.len() < k {
                    return Err(Failure::data(format!("trajectory {i} is shorter than the window {k}")));
                }
                (predict_steps(&model, &t.fields[..k], m)?, k)
            }
            Mode::Progressive => (progressive_predict(&model, &t.fields[0], m)?, 1),
        };
        let dir = a.out.join(format!("traj_{i}"));
        std::fs::create_dir_all(&dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
        let mut errors = String::from("step,rel_mse_pct\n");
        for (j, f) in pred.iter().enumerate() {
            let step = first + j;
            write_field(&dir.join(format!("step_{step}.csv")), &ds.channels, f)?;
            let err = match t.fields.get(step) {
                Some(truth) => relative_mse(std::slice::from_ref(f), std::slice::from_ref(truth))?.to_string(),
                None => String::new(),
            };
            errors.push_str(&format!("{step},{err}\n"));
        }
        let path = dir.join("errors.csv");
        std::fs::write(&path, errors).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    }
    println!("wrote predictions to {}", a.out.display());
    Ok(())
}

fn uq(a: Uq) -> Result<(), Failure> {
    let ds = load(&a.data)?;
    let s = load_model(&a.model, &ds)?;
    let n = a.horizon.unwrap_or(s.train.horizon);
    let probes = parse_probes(&a.probes)?;
    let i = match a.traj {
        Some(i) => i,
        None => chosen(&ds, &[])?[0],
    };
    let u0 = &ds
        .trajectories
        .get(i)
        .ok_or_else(|| Failure::usage(format!("trajectory {i} does not exist")))?
        .fields[0];
    let spec = EnsembleSpec {
        size: a.ensemble,
        alpha: a.alpha,
        seed: a.seed,
        bins: a.bins,
    };
    let stats = ensemble_run(&s.frozen()?, u0, &spec, n, &probes)?;
    stats.write_dir(&a.out, &ds.channels)?;
    println!(
        "{} members ({} diverged), {} steps, {} probe histograms written to {}",
        stats.members,
        stats.diverged,
        n,
        stats.probes.len(),
        a.out.display()
    );
    Ok(())
}

fn eval(a: Eval) -> Result<(), Failure> {
    let ds = load(&a.data)?;
    let s = load_model(&a.model, &ds)?;
    let n = a.n.unwrap_or(s.train.horizon);
    let train: Vec<_> = ds.train().collect();
    let test: Vec<_> = ds.test().collect();
    let tr = s.evaluate(&train, n)?;
    let te = if test.is_empty() { None } else { Some(s.evaluate(&test, n)?) };
    let name = a
        .data
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    let table = EvalTable::new(&name, &ds.channels, &tr, te.as_ref());
    print!("{}", table.render());
    let csv = table.to_csv();
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::data(format!("{}: {e}", a.out.display())))?;
    let path = a.out.join("eval.csv");
    std::fs::write(&path, csv).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    Ok(())
}
