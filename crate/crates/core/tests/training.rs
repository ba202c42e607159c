use liverseg_core::arch::ArchSpec;
use liverseg_core::network::{batch_tensor, Network};
use liverseg_core::phantom::{generate_phantom, stream_rng, PhantomConfig};
use liverseg_core::preprocess::{extract_slices, WindowSpec};
use liverseg_core::train::{label_tensor, learning_rate, train, train_epoch, train_step, TrainConfig, TrainSample};
use liverseg_core::verify::overfit_single_batch;
use liverseg_tensor::{Sgd, Tensor};
use ndarray::Array2;
use rand::Rng;

fn phantom_samples(seed: u64, count: usize) -> Vec<TrainSample> {
    let (v, l) = generate_phantom(&PhantomConfig::with_seed(seed)).unwrap();
    let slices = extract_slices(0, &v, &l, &WindowSpec::default()).unwrap();
    slices.iter().skip(4).take(count).map(|s| TrainSample { inputs: vec![s.image.clone()], target: s.liver.clone() }).collect()
}

fn small_config() -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 3, base_lr: 0.02, decay_lr: 0.01, seed: 5, ..TrainConfig::default() }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let samples = phantom_samples(1, 6);
    let mut net = Network::build(&ArchSpec::desk(), 0).unwrap();
    let before = net.params().clone();
    let cfg = TrainConfig { base_lr: 0.0, decay_lr: 0.0, ..small_config() };
    let mut opt = Sgd::new(0.0, cfg.momentum).unwrap();
    let stats = train_epoch(&mut net, &samples, &mut opt, 0, &cfg).unwrap();
    assert!(stats.mean_loss.is_finite());
    assert_eq!(stats.batches, 2);
    for (a, b) in before.params().iter().zip(net.params().params()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn initial_loss_on_balanced_random_labels_is_near_ln2() {
    let mut total = 0.0;
    for seed in 0..4 {
        let mut net = Network::build(&ArchSpec::desk(), seed).unwrap();
        let mut rng = stream_rng(seed, 77);
        let x = Tensor::randn(&[4, 1, 64, 64], 1.0, &mut rng);
        let targets: Vec<Array2<bool>> = (0..4).map(|_| Array2::from_shape_fn((64, 64), |_| rng.random_bool(0.5))).collect();
        let y = label_tensor(&targets.iter().collect::<Vec<_>>()).unwrap();
        let mut opt = Sgd::new(0.0, 0.9).unwrap();
        total += train_step(&mut net, &mut opt, &x, &y, 0.0).unwrap();
    }
    let mean = total / 4.0;
    assert!((mean - std::f64::consts::LN_2).abs() <= 0.2, "{mean}");
}

#[test]
fn single_batch_is_memorized_within_500_steps() {
    let run = overfit_single_batch(0, 500, 0.05).unwrap();
    assert!(run.reached(0.05), "{run:?}");
    assert!(run.initial_loss > 0.3, "{run:?}");
}

#[test]
fn desk_schedule_scales_the_phase_boundary() {
    let cfg = TrainConfig { epochs: 15, base_lr: 0.02, decay_lr: 0.01, ..TrainConfig::default() };
    let rates: Vec<f64> = (0..15).map(|e| learning_rate(e, &cfg).unwrap()).collect();
    assert!(rates[..9].iter().all(|&r| r == 0.02));
    assert_eq!(rates[9], 0.01);
    assert!(rates[9..].windows(2).all(|w| w[1] < w[0]));
    assert!(rates[14] > 0.0);
}

#[test]
fn training_is_deterministic() {
    let samples = phantom_samples(2, 6);
    let run = || {
        let mut net = Network::build(&ArchSpec::desk(), 3).unwrap();
        let history = train(&mut net, &samples, &small_config()).unwrap();
        (net, history)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(a, b);
    let other = train(&mut Network::build(&ArchSpec::desk(), 3).unwrap(), &samples, &TrainConfig { seed: 6, ..small_config() }).unwrap();
    assert_ne!(other, ha);
}

#[test]
fn batches_need_matching_extents() {
    let a = [Array2::<f64>::zeros((16, 16))];
    let b = [Array2::<f64>::zeros((24, 16))];
    assert!(batch_tensor(&[&a[..], &b[..]]).is_err());
    let ta = Array2::from_elem((16, 16), false);
    let tb = Array2::from_elem((24, 16), false);
    assert!(label_tensor(&[&ta, &tb]).is_err());
}
