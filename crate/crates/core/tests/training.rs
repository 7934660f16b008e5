use mixlink::blocks::{build_network, NetworkSpec, Position};
use mixlink::gradcheck::randn;
use mixlink::train::{make_toy_dataset, run_toy, sgd_nesterov_step, SgdConfig, ToyDatasetConfig, ToyNetworkConfig, TrainConfig};
use mixlink::{Error, Mode, ParamStore, Session, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_data() -> ToyDatasetConfig {
    ToyDatasetConfig {
        train_per_class: 16,
        test_per_class: 8,
        ..ToyDatasetConfig::default()
    }
}

#[test]
fn one_small_step_lowers_the_loss() {
    let plain = SgdConfig { momentum: 0.0, weight_decay: 0.0, nesterov: false };
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let position = if seed % 2 == 0 { Position::Fixed } else { Position::Unfixed };
        let spec = NetworkSpec::toy(8, 1, 2, 2, position, 3).unwrap();
        let mut store = ParamStore::new();
        let net = build_network(&spec, &mut store, &mut rng).unwrap();
        let x = randn(&mut rng, Shape::new(4, 3, 8, 8));
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();

        let before = {
            let mut s = Session::new(&mut store, Mode::Eval);
            let (loss, _) = net.loss(&mut s, x.clone(), &labels).unwrap();
            s.backward(loss).unwrap();
            s.value(loss).item()
        };
        sgd_nesterov_step(&mut store, 1e-4, &plain).unwrap();
        let after = {
            let mut s = Session::new(&mut store, Mode::Eval);
            let (loss, _) = net.loss(&mut s, x, &labels).unwrap();
            s.value(loss).item()
        };
        assert!(after < before, "seed {seed}: {before} → {after}");
    }
}

#[test]
fn smoothed_loss_is_nonincreasing_before_the_first_decay() {
    let cfg = TrainConfig { epochs: 16, ..TrainConfig::default() };
    let first_phase = cfg.milestone_epochs(cfg.epochs)[0];
    assert_eq!(first_phase, 8);
    let r = run_toy(&small_data(), &ToyNetworkConfig::default(), &cfg).unwrap();
    let mut phase = r.history.clone();
    phase.records.truncate(first_phase);
    let smooth = phase.smoothed_loss(5);
    assert_eq!(smooth.len(), first_phase - 4);
    for pair in smooth.windows(2) {
        assert!(pair[1] <= pair[0], "{smooth:?}");
    }
    assert!(r.history.best_train_acc() >= 0.95);
}

#[test]
fn zero_learning_rate_keeps_metrics_constant() {
    let cfg = TrainConfig { epochs: 3, lr: 0.0, ..TrainConfig::default() };
    let r = run_toy(&small_data(), &ToyNetworkConfig::default(), &cfg).unwrap();
    let first = &r.history.records[0];
    for rec in &r.history.records {
        assert_eq!(rec.loss.to_bits(), first.loss.to_bits());
        assert_eq!(rec.train_acc, first.train_acc);
        assert_eq!(rec.test_acc, first.test_acc);
    }
}

#[test]
fn seeds_change_the_run_and_reruns_do_not() {
    let cfg = |seed| TrainConfig { epochs: 2, seed, dropout: 0.2, ..TrainConfig::default() };
    let a = run_toy(&small_data(), &ToyNetworkConfig::default(), &cfg(1)).unwrap();
    let b = run_toy(&small_data(), &ToyNetworkConfig::default(), &cfg(1)).unwrap();
    let c = run_toy(&small_data(), &ToyNetworkConfig::default(), &cfg(2)).unwrap();
    assert_eq!(a.history.to_csv(), b.history.to_csv());
    assert_ne!(a.history.to_csv(), c.history.to_csv());
}

#[test]
fn divergence_reports_partial_history() {
    let cfg = TrainConfig { epochs: 3, lr: 1e300, ..TrainConfig::default() };
    match run_toy(&small_data(), &ToyNetworkConfig::default(), &cfg) {
        Err(Error::Diverged { history, .. }) => assert!(history.records.len() < 3),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn weight_decay_alone_shrinks_every_parameter() {
    let spec = NetworkSpec::toy(8, 1, 2, 2, Position::Unfixed, 3).unwrap();
    let mut store = ParamStore::new();
    build_network(&spec, &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let norms = |s: &ParamStore| s.iter().map(|p| p.value.sq_norm()).collect::<Vec<_>>();
    let before = norms(&store);
    let cfg = SgdConfig { momentum: 0.9, weight_decay: 1e-2, nesterov: true };
    let mut prev = before;
    for _ in 0..3 {
        sgd_nesterov_step(&mut store, 0.1, &cfg).unwrap();
        let now = norms(&store);
        for (b, a) in prev.iter().zip(&now) {
            // Zero-initialized shifts stay at zero.
            assert!(a < b || *b == 0.0);
        }
        prev = now;
    }
}

#[test]
fn position_ablation_has_matched_capacity() {
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let fixed = ToyNetworkConfig { position: Position::Fixed, ..ToyNetworkConfig::default() };
    let a = run_toy(&small_data(), &fixed, &cfg).unwrap();
    let b = run_toy(&small_data(), &ToyNetworkConfig::default(), &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.history.to_csv(), b.history.to_csv());
}

#[test]
fn dataset_is_balanced_and_oracle_is_imperfect() {
    let data = make_toy_dataset(&ToyDatasetConfig::default()).unwrap();
    for c in 0..data.classes {
        assert_eq!(data.train_labels.iter().filter(|&&l| l == c).count(), 64);
        assert_eq!(data.test_labels.iter().filter(|&&l| l == c).count(), 32);
    }
    assert_eq!(data.train_images.shape(), Shape::new(256, 3, 16, 16));
    let oracle = mixlink::train::nearest_pattern_accuracy(&data.patterns, &data.test_images, &data.test_labels);
    assert!(oracle > 0.25 && oracle < 0.9, "{oracle}");
}
