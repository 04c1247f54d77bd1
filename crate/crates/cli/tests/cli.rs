use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

fn gwf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gwf"))
        .args(args)
        .env_remove("GWF_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gwf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _root: tempfile::TempDir,
    data: PathBuf,
    model: PathBuf,
    train_secs: f64,
    train_stdout: String,
}

/// A tiny dataset and a two-epoch model shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("tube");
        let model = root.path().join("model");
        ok(&["gen-data", "--points", "24", "--steps", "8", "--trajs", "3", "--test", "1", "--seed", "3", "--out", s(&data)]);
        let start = Instant::now();
        let train_stdout = ok(&["train", "--data", s(&data), "--out", s(&model), "--epochs", "2", "--k", "3", "--n", "2", "--grid", "8"]);
        Fixture {
            train_secs: start.elapsed().as_secs_f64(),
            _root: root,
            data,
            model,
            train_stdout,
        }
    })
}

#[test]
fn gen_data_writes_a_loadable_dataset_with_default_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let msg = ok(&["gen-data", "--kind", "tube", "--points", "20", "--steps", "3", "--trajs", "32", "--seed", "7", "--out", s(&out)]);
    assert!(msg.contains("27 train, 5 test"), "{msg}");
    let ds = gwf::data::Dataset::load(&out).unwrap();
    assert_eq!(ds.splits.train.len(), 27);
    assert_eq!(ds.n_points(), 20);
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--points", "16", "--steps", "2", "--trajs", "2", "--test", "1", "--seed", "5", "--out", s(&a)]);
    let out = Command::new(env!("CARGO_BIN_EXE_gwf"))
        .args(["gen-data", "--points", "16", "--steps", "2", "--trajs", "2", "--test", "1", "--out", s(&b)])
        .env("GWF_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success());
    let read = |d: &Path| std::fs::read_to_string(d.join("traj_0").join("step_1.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gwf(&["gen-data", "--kind", "artery", "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(gwf(&["train", "--out", s(dir.path())]).status.code(), Some(2));
    let f = fixture();
    let out = gwf(&["uq", "--model", s(&f.model), "--data", s(&f.data), "--probes", "nope", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_three() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = gwf(&["train", "--data", s(&f.data), "--out", s(dir.path()), "--k", "5", "--n", "4"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("needs 9"));
    let missing = gwf(&["eval", "--model", s(&f.model), "--data", s(&dir.path().join("none")), "--out", s(dir.path())]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn training_smoke_run_is_quick_and_complete() {
    let f = fixture();
    assert!(f.train_secs < 60.0, "{}", f.train_secs);
    assert!(f.train_stdout.contains("train relative MSE"));
    assert!(f.train_stdout.contains("test relative MSE"));
    assert!(f.model.join("model.json").exists());
    for ch in ["pressure_mmhg", "flow_cm3s"] {
        let loss = std::fs::read_to_string(f.model.join(format!("loss_{ch}.csv"))).unwrap();
        assert_eq!(loss.lines().next(), Some("epoch,train_rel_mse_pct,val_rel_mse_pct,lr"));
        assert_eq!(loss.lines().count(), 3);
    }
}

#[test]
fn predict_writes_horizon_steps_in_both_modes() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w");
    ok(&["predict", "--model", s(&f.model), "--data", s(&f.data), "--mode", "window", "--horizon", "4", "--out", s(&w)]);
    let errors = std::fs::read_to_string(w.join("traj_2").join("errors.csv")).unwrap();
    assert_eq!(errors.lines().count(), 5);
    for step in 3..7 {
        assert!(w.join("traj_2").join(format!("step_{step}.csv")).exists());
    }
    let p = dir.path().join("p");
    ok(&["predict", "--model", s(&f.model), "--data", s(&f.data), "--mode", "progressive", "--horizon", "3", "--traj", "0", "--out", s(&p)]);
    let errors = std::fs::read_to_string(p.join("traj_0").join("errors.csv")).unwrap();
    assert_eq!(errors.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect::<Vec<_>>(), ["1", "2", "3"]);
}

#[test]
fn uq_with_zero_alpha_has_zero_std_and_probe_files() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("uq");
    ok(&["uq", "--model", s(&f.model), "--data", s(&f.data), "--alpha", "0", "--ensemble", "4", "--probes", "12@t2,3@t1", "--out", s(&out)]);
    let mut stats = 0;
    for entry in std::fs::read_dir(&out).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if name.starts_with("stats_") {
            stats += 1;
            let text = std::fs::read_to_string(&path).unwrap();
            for line in text.lines().skip(1) {
                assert_eq!(line.rsplit(',').next().unwrap().parse::<f64>().unwrap(), 0.0, "{name}");
            }
        }
    }
    assert_eq!(stats, 2 * 2);
    for ch in ["pressure_mmhg", "flow_cm3s"] {
        assert!(out.join(format!("pdf_p12_t2_{ch}.csv")).exists());
        assert!(out.join(format!("pdf_p3_t1_{ch}.csv")).exists());
    }
}

#[test]
fn help_documents_defaults() {
    let help = ok(&["uq", "--help"]);
    assert!(help.contains("[default: 100]"), "{help}");
    assert!(help.contains("[default: 0.01]"));
    let help = ok(&["train", "--help"]);
    for d in ["[default: 0.001]", "[default: 100]", "[default: 10]", "[default: 20]", "GWF_SEED"] {
        assert!(help.contains(d), "{d}");
    }
}

#[test]
fn eval_prints_the_table_and_is_deterministic() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let a = ok(&["eval", "--model", s(&f.model), "--data", s(&f.data), "--out", s(dir.path())]);
    let csv_a = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let b = ok(&["eval", "--model", s(&f.model), "--data", s(&f.data), "--out", s(dir.path())]);
    let csv_b = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(csv_a, csv_b);
    let header: Vec<_> = a.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["dataset", "train", "error", "test", "error"]);
    assert_eq!(csv_a.lines().next(), Some("dataset,train_error_pct,test_error_pct"));
    assert!(a.contains("tube:pressure_mmhg") && a.contains("tube:all"));
}
