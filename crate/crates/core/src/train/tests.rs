use super::*;
use crate::data::{gen_synthetic, normalize, Dataset, SynthSpec, VesselKind};
use crate::model::ModelConfig;
use crate::tensor::ParamId;

fn scalar_store(x: f64) -> (ParamStore<f64>, ParamId) {
    let mut store = ParamStore::new();
    let id = store.insert("theta", Tensor::scalar(x));
    (store, id)
}

#[test]
fn relative_mse_matches_the_definition() {
    let t = vec![Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap()];
    let p = vec![Tensor::from_f64(&[2, 1], &[3.0, 3.0]).unwrap()];
    assert!((relative_mse(&p, &t).unwrap() - 4.0).abs() < 1e-12);
    assert_eq!(relative_mse(&t, &t).unwrap(), 0.0);
    let zero = vec![Tensor::zeros(&[2, 1])];
    assert!(matches!(relative_mse(&p, &zero), Err(TrainError::ZeroTruth)));
    assert!(matches!(relative_mse(&p, &[]), Err(TrainError::Shape(_))));
}

#[test]
fn relative_mse_fixtures() {
    let t = vec![Tensor::from_f64(&[3, 1], &[1.0, -2.0, 4.0]).unwrap(), Tensor::from_f64(&[3, 1], &[0.5, 0.0, 3.0]).unwrap()];
    let zero: Vec<_> = t.iter().map(|f| Tensor::zeros(f.shape())).collect();
    let scaled: Vec<_> = t.iter().map(|f| f.scale(1.1)).collect();
    assert_eq!(relative_mse(&t, &t).unwrap(), 0.0);
    assert_eq!(relative_mse(&zero, &t).unwrap(), 100.0);
    assert!((relative_mse(&scaled, &t).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn tape_loss_agrees_with_relative_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::uniform(&[5, 2], 1.0, &mut rng)).collect();
    let pred: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::uniform(&[5, 2], 1.0, &mut rng)).collect();
    let tape = Tape::new();
    let vars: Vec<_> = pred.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = relative_mse_loss(&tape, &vars, &truth).unwrap().item();
    assert!((100.0 * loss - relative_mse(&pred, &truth).unwrap()).abs() < 1e-10);
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let (mut store, id) = scalar_store(1.0);
    let mut adam = Adam::new(&store);
    store.accumulate_grad(id, &Tensor::scalar(1.0));
    adam.update(&mut store, 0.1).unwrap();
    assert!((store.value(id).item() - 0.9).abs() < 1e-6);
}

#[test]
fn adam_matches_a_hand_loop() {
    let grads = [0.5, -1.5, 2.0, 0.25, -0.75];
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
    let (mut theta, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
    let (mut store, id) = scalar_store(0.3);
    let mut adam = Adam::new(&store);
    for (t, &g) in grads.iter().enumerate() {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32 + 1));
        let vh = v / (1.0 - b2.powi(t as i32 + 1));
        theta -= lr * mh / (vh.sqrt() + eps);

        store.zero_grad();
        store.accumulate_grad(id, &Tensor::scalar(g));
        adam.update(&mut store, lr).unwrap();
        assert!((store.value(id).item() - theta).abs() < 1e-12, "step {t}");
    }
}

#[test]
fn adam_rejects_non_finite_gradients_by_name() {
    let (mut store, id) = scalar_store(1.0);
    let mut adam = Adam::new(&store);
    store.accumulate_grad(id, &Tensor::scalar(f64::NAN));
    match adam.update(&mut store, 0.1) {
        Err(TrainError::NonFiniteGrad(name)) => assert_eq!(name, "theta"),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(store.value(id).item(), 1.0);
}

#[test]
fn adam_without_gradients_leaves_parameters() {
    let (mut store, id) = scalar_store(2.0);
    let mut adam = Adam::new(&store);
    adam.update(&mut store, 0.1).unwrap();
    store.accumulate_grad(id, &Tensor::scalar(0.0));
    adam.update(&mut store, 0.1).unwrap();
    assert_eq!(store.value(id).item(), 2.0);
    assert_eq!(adam.step, 2);
}

#[test]
fn two_steps_on_half_square_decrease_it() {
    let (mut store, id) = scalar_store(0.7);
    let mut adam = Adam::new(&store);
    let mut f = 0.5 * 0.7f64 * 0.7;
    for _ in 0..2 {
        let x = store.value(id).item();
        store.zero_grad();
        store.accumulate_grad(id, &Tensor::scalar(x));
        adam.update(&mut store, 0.1).unwrap();
        let y = store.value(id).item();
        assert!(0.5 * y * y < f);
        f = 0.5 * y * y;
    }
}

#[test]
fn adam_descends_a_quadratic() {
    let (mut store, id) = scalar_store(3.0);
    let mut adam = Adam::new(&store);
    for i in 0..600 {
        let x = store.value(id).item();
        store.zero_grad();
        store.accumulate_grad(id, &Tensor::scalar(2.0 * (x - 1.0)));
        adam.update(&mut store, 0.1 * 0.99f64.powi(i)).unwrap();
    }
    let x = store.value(id).item();
    assert!((x - 1.0).powi(2) < 1e-4, "{x}");
}

#[test]
fn learning_rate_decays_stepwise() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 1e-3);
    assert_eq!(lr_at(4, &cfg), 1e-3);
    assert!((lr_at(5, &cfg) - 6e-4).abs() < 1e-15);
    assert!((lr_at(10, &cfg) - 3.6e-4).abs() < 1e-15);
    assert!((lr_at(99, &cfg) - 1e-3 * 0.6f64.powi(19)).abs() < 1e-18);
}

fn tiny() -> (Dataset, ModelConfig, TrainConfig) {
    let spec = SynthSpec {
        test: 1,
        ..SynthSpec::new(VesselKind::Tube, 24, 6, 3, 9)
    };
    let raw = gen_synthetic(&spec).unwrap();
    let stats = NormStats::from_train(&raw).unwrap();
    let ds = normalize(&raw, &stats).unwrap();
    let mut mc = ModelConfig::desk(2, 3);
    mc.waveformer.transformer.d_model = 16;
    mc.waveformer.transformer.d_ff = 16;
    mc.waveformer.transformer.encoder_blocks = 1;
    mc.waveformer.transformer.decoder_blocks = 1;
    let tc = TrainConfig {
        epochs: 2,
        horizon: 2,
        window: 3,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    (ds, mc, tc)
}

#[test]
fn one_step_updates_every_parameter_group() {
    let (ds, mc, tc) = tiny();
    let (model, mut store) = Model::<f64>::new(ds.geometry.clone(), mc).unwrap();
    let before = store.clone();
    let mut adam = Adam::new(&store);
    store.zero_grad();
    trajectory_step(&model, &mut store, &ds.trajectories[0], &tc).unwrap();
    adam.update(&mut store, 1e-3).unwrap();
    for ((_, a), (_, b)) in before.iter().zip(store.iter()) {
        assert!(a.value.max_abs_diff(&b.value) > 0.0, "{} did not move", a.name);
    }
}

#[test]
fn training_is_deterministic_and_logs_each_epoch() {
    let (ds, mc, tc) = tiny();
    let run = || {
        let (model, mut store) = Model::<f64>::new(ds.geometry.clone(), mc.clone()).unwrap();
        let mut seen = 0;
        let h = fit(&model, &mut store, &ds.train().collect::<Vec<_>>(), &ds.test().collect::<Vec<_>>(), &tc, |_| seen += 1).unwrap();
        assert_eq!(seen, tc.epochs);
        (h, store)
    };
    let (h1, s1) = run();
    let (h2, s2) = run();
    assert_eq!(h1, h2);
    for ((_, a), (_, b)) in s1.iter().zip(s2.iter()) {
        assert_eq!(a.value.data(), b.value.data());
    }
    assert!(h1.epochs.iter().all(|r| r.train_rel_mse_pct.is_finite() && r.val_rel_mse_pct.is_finite()));

    let mut buf = Vec::new();
    h1.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,train_rel_mse_pct,val_rel_mse_pct,lr"));
    assert_eq!(lines.count(), tc.epochs);
}

#[test]
fn short_trajectories_and_bad_configs_are_rejected() {
    let (ds, mc, mut tc) = tiny();
    let (model, mut store) = Model::<f64>::new(ds.geometry.clone(), mc).unwrap();
    let train: Vec<_> = ds.train().collect();
    tc.horizon = 4;
    assert!(matches!(fit(&model, &mut store, &train, &[], &tc, |_| {}), Err(TrainError::TooShort { .. })));
    tc.horizon = 2;
    tc.window = 4;
    assert!(matches!(fit(&model, &mut store, &train, &[], &tc, |_| {}), Err(TrainError::Config(_))));
    tc.window = 3;
    tc.lr = 0.0;
    assert!(matches!(fit(&model, &mut store, &train, &[], &tc, |_| {}), Err(TrainError::Config(_))));
}

#[test]
fn diverging_loss_names_epoch_and_trajectory() {
    let (mut ds, mc, tc) = tiny();
    ds.trajectories[1].fields[4] = Tensor::full(&[24, 2], f64::NAN);
    let (model, mut store) = Model::<f64>::new(ds.geometry.clone(), mc).unwrap();
    let train: Vec<_> = ds.train().collect();
    match fit(&model, &mut store, &train, &[], &tc, |_| {}) {
        Err(TrainError::Divergence { epoch: 0, trajectory: 1 }) => {}
        other => panic!("unexpected {other:?}"),
    }
}
