use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stgat_core::data::{
    chrono_split, make_windows, synthesize, window_count, RawSeries, ScalerParams, SynthConfig, WindowedDataset,
    DEFAULT_SPLIT,
};
use stgat_core::model::{LinearRegression, ModelConfig, ModelKind, Network, MLR_RIDGE};
use stgat_core::pipeline::{prepare, DataConfig};
use stgat_core::train::{evaluate_mse, train, AdamState, StopReason, TrainConfig};
use stgat_core::Tensor;

fn corpus(len: usize, seed: u64) -> RawSeries {
    synthesize(&SynthConfig {
        len,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn split_and_window_sizes_on_1000_steps() {
    let data = prepare(&corpus(1000, 1), &DataConfig::default()).unwrap();
    assert_eq!(data.split_lens, [800, 100, 100]);
    assert_eq!([data.train.len(), data.val.len(), data.test.len()], [797, 97, 97]);
    for v in data.train.windows.data().iter().chain(data.train.targets.data()) {
        assert!((0.0..=1.0).contains(v), "{v}");
    }
}

#[test]
fn windows_never_cross_split_boundaries() {
    let data = prepare(&corpus(500, 2), &DataConfig::default()).unwrap();
    let w = 4;
    assert!(data.train.provenance.iter().all(|&s| s + w <= 400));
    assert!(data.val.provenance.iter().all(|&s| (400..=450 - w).contains(&s)));
    assert!(data.test.provenance.iter().all(|&s| (450..=500 - w).contains(&s)));
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn mox_channels_correlate_with_the_reference_imperfectly() {
    for seed in [1, 7] {
        let s = corpus(2000, seed);
        for c in 0..4 {
            let ch: Vec<f64> = s.channel(c).collect();
            let r = pearson(&ch, s.target());
            assert!(r > 0.2 && r < 0.99, "seed {seed} channel {c}: r = {r}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_count_formula(len in 4usize..200, window in 1usize..8, stride in 1usize..5) {
        let n = window_count(len, window, stride);
        let brute = (0..len).step_by(stride).filter(|s| s + window <= len).count();
        prop_assert_eq!(n, brute);
        if len >= window {
            let series = RawSeries::new(
                (0..len as i64).collect(),
                vec!["a".into()],
                (0..len).map(|v| v as f64).collect(),
                (0..len).map(|v| v as f64).collect(),
            ).unwrap();
            prop_assert_eq!(make_windows(&series, window, stride).unwrap().len(), n);
        }
    }

    #[test]
    fn scaler_round_trip(seed in 0u64..500, len in 30usize..120) {
        let s = corpus(len, seed);
        let scaler = ScalerParams::fit(&s).unwrap();
        let back = scaler.invert(&scaler.apply(&s).unwrap()).unwrap();
        for (a, b) in back.channels().iter().zip(s.channels()).chain(back.target().iter().zip(s.target())) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn split_partitions_the_series(len in 40usize..400) {
        let s = corpus(len, 3);
        let (a, b, c) = chrono_split(&s, DEFAULT_SPLIT, 4).unwrap();
        prop_assert_eq!(a.len() + b.len() + c.len(), len);
        prop_assert_eq!(a.len(), (0.8 * len as f64 + 1e-9).floor() as usize);
        prop_assert_eq!(b.origin(), a.len());
        prop_assert_eq!(c.origin(), a.len() + b.len());
    }
}

#[test]
fn mlr_matches_an_independent_normal_equation_solve() {
    let data = prepare(&corpus(600, 4), &DataConfig::default()).unwrap();
    let x = &data.train.windows;
    let (n, p) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let fit = LinearRegression::fit(x, &data.train.targets).unwrap();

    let design = DMatrix::from_fn(n, p + 1, |i, j| if j < p { x.data()[i * p + j] } else { 1.0 });
    let y = DVector::from_column_slice(data.train.targets.data());
    let mut gram = design.transpose() * &design;
    for i in 0..p {
        gram[(i, i)] += MLR_RIDGE;
    }
    let beta = gram.lu().solve(&(design.transpose() * y)).unwrap();
    for j in 0..p {
        assert!((fit.coefficients[j] - beta[j]).abs() < 1e-6, "coef {j}");
    }
    assert!((fit.intercept - beta[p]).abs() < 1e-6);
}

#[test]
fn adam_matches_a_hand_rolled_update() {
    let cfg = TrainConfig::default();
    let mut params = vec![Tensor::from_vec(vec![0.0, 1.0, -2.0]).unwrap()];
    let mut adam = AdamState::new(&params);
    let grads_seq = [[0.5, -0.25, 3.0], [0.1, 0.2, -1.0], [-0.4, 0.0, 2.0]];
    let (mut m, mut v, mut theta) = ([0.0; 3], [0.0; 3], [0.0, 1.0, -2.0]);
    for (t, g) in grads_seq.iter().enumerate() {
        let grads = vec![Tensor::from_vec(g.to_vec()).unwrap()];
        adam.step(&mut params, &grads, &cfg).unwrap();
        let t = (t + 1) as i32;
        for i in 0..3 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            theta[i] -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        }
        for i in 0..3 {
            assert!((params[0].data()[i] - theta[i]).abs() < 1e-15, "step {t} coord {i}");
        }
    }
    // First step from 0 with g = 0.5 moves by almost exactly the learning rate.
    let mut p = vec![Tensor::from_vec(vec![0.0]).unwrap()];
    AdamState::new(&p).step(&mut p, &[Tensor::from_vec(vec![0.5]).unwrap()], &cfg).unwrap();
    assert!((p[0].data()[0] + 0.001).abs() < 1e-6);
}

fn small_model(seed: u64) -> ModelConfig {
    ModelConfig {
        conv_out_channels: 4,
        gat_out_dim: 4,
        lstm_hidden: 6,
        fc_hidden_dims: vec![4, 1],
        seed,
        ..ModelConfig::default()
    }
}

/// Validation windows of zeros with target zero, training targets drawn at
/// random: validation error has nothing to follow.
fn non_improving_fixture() -> (WindowedDataset, WindowedDataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 40;
    let train = WindowedDataset {
        windows: Tensor::new(vec![n, 4, 7], (0..n * 28).map(|_| rng.random::<f64>()).collect()).unwrap(),
        targets: Tensor::new(vec![n], (0..n).map(|_| rng.random::<f64>()).collect()).unwrap(),
        provenance: (0..n).collect(),
    };
    let val = WindowedDataset {
        windows: Tensor::zeros(&[8, 4, 7]),
        targets: Tensor::zeros(&[8]),
        provenance: (0..8).collect(),
    };
    (train, val)
}

#[test]
fn early_stopping_halts_patience_epochs_after_the_best() {
    let (train_set, val_set) = non_improving_fixture();
    for (patience, min_delta) in [(3, 0.0), (5, 0.0), (4, 10.0)] {
        let cfg = TrainConfig {
            patience,
            min_delta,
            max_epochs: 200,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut net = Network::build(ModelKind::StgatFuser, &small_model(2)).unwrap();
        let h = train(&mut net, &train_set, &val_set, &cfg).unwrap();
        assert_eq!(h.stop_reason, StopReason::EarlyStopped);
        assert_eq!(h.epochs.len(), h.best_epoch + patience, "patience {patience}");
        if min_delta >= 10.0 {
            // No later epoch can beat the first by ten units of MSE.
            assert_eq!(h.best_epoch, 1);
        }
        let min = h.epochs.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(h.best_val_mse, h.epochs[h.best_epoch - 1].val_mse);
        if min_delta == 0.0 {
            assert_eq!(h.best_val_mse, min);
        }
        // The restored parameters are the best checkpoint.
        assert_eq!(evaluate_mse(&net, &val_set).unwrap(), h.best_val_mse);
    }
}

#[test]
fn max_epochs_is_respected() {
    let (train_set, val_set) = non_improving_fixture();
    let cfg = TrainConfig {
        patience: 50,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let mut net = Network::build(ModelKind::Lstm, &small_model(1)).unwrap();
    let h = train(&mut net, &train_set, &val_set, &cfg).unwrap();
    assert_eq!((h.epochs.len(), h.stop_reason), (3, StopReason::MaxEpochs));
    assert_eq!(h.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), [1, 2, 3]);
}

#[test]
fn training_is_seed_deterministic() {
    let data = prepare(&corpus(300, 6), &DataConfig::default()).unwrap();
    let cfg = TrainConfig {
        max_epochs: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let mut net = Network::build(ModelKind::StgatFuser, &small_model(4)).unwrap();
        let h = train(&mut net, &data.train, &data.val, &cfg).unwrap();
        (net, h)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(a, b);
}

#[test]
fn default_model_overfits_64_windows() {
    let data = prepare(&corpus(2000, 1), &DataConfig::default()).unwrap();
    let subset = data.train.subset(&(0..64).collect::<Vec<_>>()).unwrap();
    let cfg = TrainConfig {
        max_epochs: 500,
        patience: 500,
        ..TrainConfig::default()
    };
    let mut net = Network::build(ModelKind::StgatFuser, &ModelConfig::default()).unwrap();
    train(&mut net, &subset, &subset, &cfg).unwrap();
    let mse = evaluate_mse(&net, &subset).unwrap();
    assert!(mse < 1e-3, "training MSE {mse}");
}
