use super::*;
use proptest::prelude::*;

fn small(kind: VesselKind, seed: u64) -> SynthSpec {
    SynthSpec {
        test: 2,
        ..SynthSpec::new(kind, 32, 12, 6, seed)
    }
}

#[test]
fn still_dynamics_are_constant_in_time() {
    let mut spec = small(VesselKind::Tube, 1);
    spec.physics.speed = 0.0;
    spec.physics.diffusion = 0.0;
    let ds = gen_synthetic(&spec).unwrap();
    for t in &ds.trajectories {
        for f in &t.fields[1..] {
            assert_eq!(f.data(), t.fields[0].data());
        }
    }
}

#[test]
fn advected_bump_travels_at_the_set_speed() {
    let n = 400;
    let ds = 0.05;
    let speed = 2.0;
    let stepper = Stepper::chain(n, ds, speed, 0.0, false);
    let s0 = 4.0;
    let mut u: Vec<f64> = (0..n).map(|i| (-((i as f64 * ds - s0) / 0.5).powi(2)).exp()).collect();
    let total = 5.0;
    let steps = 200;
    let dt = total / steps as f64;
    for j in 0..steps {
        u = stepper.advance(&u, j as f64 * dt, dt, |_| 0.0).unwrap();
    }
    let peak = u.iter().enumerate().fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0;
    let want = s0 + speed * total;
    assert!((peak as f64 * ds - want).abs() <= 2.0 * ds, "peak at {}, expected {want}", peak as f64 * ds);
}

#[test]
fn periodic_advection_conserves_the_integral() {
    let n = 64;
    let stepper = Stepper::chain(n, 0.1, 1.0, 0.0, true);
    let mut u: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.3).sin()).collect();
    let before: f64 = u.iter().sum::<f64>() * 0.1;
    for _ in 0..100 {
        u = stepper.step(&u, 0.0, 0.05).unwrap();
    }
    let after: f64 = u.iter().sum::<f64>() * 0.1;
    assert!((after - before).abs() < 1e-6);
}

#[test]
fn unstable_step_is_rejected_or_substepped() {
    let stepper = Stepper::chain(16, 0.1, 10.0, 0.0, false);
    let u = vec![0.0; 16];
    assert!(matches!(stepper.step(&u, 1.0, 0.05), Err(DataError::Unstable { .. })));
    assert!(stepper.substeps(0.05) >= 6);
    assert!(stepper.advance(&u, 0.0, 0.05, |_| 1.0).is_ok());

    let mut spec = small(VesselKind::Tube, 0);
    spec.physics.substep = false;
    assert!(matches!(gen_synthetic(&spec), Err(DataError::Unstable { .. })));
}

#[test]
fn seeds_change_inflow_but_not_geometry() {
    let a = gen_synthetic(&small(VesselKind::Tube, 1)).unwrap();
    let b = gen_synthetic(&small(VesselKind::Tube, 2)).unwrap();
    assert_eq!(a.geometry, b.geometry);
    assert_ne!(a.trajectories[0].fields[0].data(), b.trajectories[0].fields[0].data());
    let c = gen_synthetic(&small(VesselKind::Tube, 1)).unwrap();
    assert_eq!(a, c);
}

#[test]
fn bifurcation_has_three_segments() {
    let (cloud, up, down, _) = vessel(VesselKind::Bifurcation, 40, 12.0).unwrap();
    assert_eq!(cloud.len(), 40);
    assert_eq!(up.iter().filter(|u| u.is_none()).count(), 1);
    assert_eq!(down.iter().filter(|d| d.is_empty()).count(), 2);
    assert_eq!(down[19], vec![20, 30]);
    let ds = gen_synthetic(&small(VesselKind::Bifurcation, 3)).unwrap();
    ds.validate().unwrap();
    assert!(ds.trajectories[0].fields.iter().all(|f| f.is_finite()));
}

#[test]
fn too_few_points_is_an_error() {
    assert!(vessel(VesselKind::Tube, 15, 1.0).is_err());
    assert!("artery".parse::<VesselKind>().is_err());
    assert_eq!("tube".parse::<VesselKind>().unwrap(), VesselKind::Tube);
}

#[test]
fn default_split_holds_out_five() {
    let spec = SynthSpec::new(VesselKind::Tube, 16, 3, 32, 0);
    let ds = gen_synthetic(&spec).unwrap();
    assert_eq!(ds.splits.train, (0..27).collect::<Vec<_>>());
    assert_eq!(ds.splits.test, (27..32).collect::<Vec<_>>());
}

#[test]
fn save_load_round_trip_is_exact() {
    let ds = gen_synthetic(&small(VesselKind::Bifurcation, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds, back);
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m, ds.manifest());
}

#[test]
fn truncated_field_reports_row_count() {
    let ds = gen_synthetic(&small(VesselKind::Tube, 5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let path = dir.path().join("traj_1").join("step_3.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().take(10).collect();
    std::fs::write(&path, kept.join("\n") + "\n").unwrap();
    match Dataset::load(dir.path()) {
        Err(DataError::RowCount { path: p, got, want }) => {
            assert_eq!(p, path);
            assert_eq!((got, want), (9, 32));
        }
        other => panic!("unexpected {other:?}"),
    }
    std::fs::remove_file(&path).unwrap();
    let err = Dataset::load(dir.path()).unwrap_err();
    assert!(err.to_string().contains("step_3.csv"), "{err}");
}

#[test]
fn full_size_manifest_loads() {
    let n = 18890;
    let coords: Vec<Point> = (0..n)
        .map(|i| {
            let t = i as f64 * 1e-3;
            [t.cos(), t.sin(), 0.1 * t]
        })
        .collect();
    let geometry = PointCloud::new(coords, None).unwrap();
    let ds = Dataset {
        geometry,
        channels: vec!["pressure_mmhg".into()],
        dt: 0.01,
        trajectories: vec![Trajectory {
            fields: vec![Tensor::zeros(&[n, 1])],
        }],
        splits: Splits::tail(1, 0),
    };
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.n_points(), 18890);
    assert_eq!(back.trajectories[0].fields[0].shape(), &[18890, 1]);
}

#[test]
fn normalized_train_split_is_standardized() {
    let ds = gen_synthetic(&small(VesselKind::Tube, 6)).unwrap();
    let stats = NormStats::from_train(&ds).unwrap();
    let norm = normalize(&ds, &stats).unwrap();
    let again = NormStats::from_trajectories(&norm, &norm.splits.train).unwrap();
    for c in 0..2 {
        assert!(again.mean[c].abs() < 1e-6);
        assert!((again.std[c] - 1.0).abs() < 1e-6);
    }
    let back = denormalize(&norm, &stats);
    for (a, b) in back.trajectories.iter().zip(&ds.trajectories) {
        for (x, y) in a.fields.iter().zip(&b.fields) {
            assert!(x.max_abs_diff(y) < 1e-12);
        }
    }
}

#[test]
fn held_out_split_uses_training_statistics() {
    let ds = gen_synthetic(&small(VesselKind::Tube, 7)).unwrap();
    let stats = NormStats::from_train(&ds).unwrap();
    let norm = normalize(&ds, &stats).unwrap();
    let i = ds.splits.test[0];
    let c = 2;
    for (f, g) in ds.trajectories[i].fields.iter().zip(&norm.trajectories[i].fields) {
        for (p, (x, y)) in f.data().iter().zip(g.data()).enumerate() {
            let want = (x - stats.mean[p % c]) / stats.std[p % c];
            assert!((y - want).abs() < 1e-12);
        }
    }
    let leaky = NormStats::from_trajectories(&ds, &[0, 1, 2, 3, 4, 5]).unwrap();
    assert!(matches!(normalize(&ds, &leaky), Err(DataError::Leakage { .. })));
}

#[test]
fn constant_channel_cannot_be_normalized() {
    let mut spec = small(VesselKind::Tube, 8);
    spec.physics.speed = 0.0;
    spec.physics.diffusion = 0.0;
    spec.physics.pressure_gradient = 0.0;
    spec.physics.amplitude_spread = 0.0;
    let ds = gen_synthetic(&spec).unwrap();
    let mut same = ds.clone();
    for t in &mut same.trajectories {
        for f in &mut t.fields {
            *f = Tensor::full(f.shape(), 1.0);
        }
    }
    assert!(matches!(NormStats::from_train(&same), Err(DataError::ZeroStd(0))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn manifest_counts_match_files(points in 16usize..40, steps in 2usize..6, trajs in 1usize..4, seed in 0u64..50) {
        let spec = SynthSpec { test: 0, ..SynthSpec::new(VesselKind::Tube, points, steps, trajs, seed) };
        let ds = gen_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let m = ds.manifest();
        for i in 0..m.trajectories {
            let files = std::fs::read_dir(dir.path().join(format!("traj_{i}"))).unwrap().count();
            prop_assert_eq!(files, m.steps);
            let rows = std::fs::read_to_string(step_path(dir.path(), i, 0)).unwrap().lines().count();
            prop_assert_eq!(rows, m.points + 1);
        }
    }
}
