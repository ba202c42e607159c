use liverseg_core::arch::ArchSpec;
use liverseg_core::cascade::{stack_cascade_input, stack_cascade_tensor, train_cascade, CascadeConfig, CascadeModel, SlicePrediction, Stage};
use liverseg_core::config::{DatasetConfig, RunConfig};
use liverseg_core::multiscale::{fuse, fuse_maps, multiscale_predict, ScaleSet, SlicePredictor, StagePredictor};
use liverseg_core::network::{Class, ProbabilityMap};
use liverseg_core::phantom::stream_rng;
use liverseg_core::pipeline::{generate_dataset, training_slices};
use liverseg_core::Result;
use liverseg_tensor::Tensor;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn random_plane(h: usize, w: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream_rng(seed, 0);
    Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))
}

fn map(values: Array2<f64>, class: Class) -> ProbabilityMap {
    ProbabilityMap::new(values, class).unwrap()
}

#[test]
fn cascade_channels_are_image_lesion_liver() {
    let image = random_plane(16, 16, 1);
    let lesion = map(random_plane(16, 16, 2), Class::Lesion);
    let liver = map(random_plane(16, 16, 3), Class::Liver);
    let t = Tensor::new(&[1, 1, 16, 16], image.iter().copied().collect()).unwrap();
    let stacked = stack_cascade_tensor(&t, &lesion, &liver).unwrap();
    assert_eq!(stacked.shape(), [1, 3, 16, 16]);
    assert_eq!(stacked.channel_slice(0, 1).unwrap().data(), t.data());
    assert_eq!(stacked.plane(0, 1), lesion.values.as_slice().unwrap());
    assert_eq!(stacked.plane(0, 2), liver.values.as_slice().unwrap());

    let zero = |c| map(Array2::zeros((16, 16)), c);
    let planes = stack_cascade_input(&image, &zero(Class::Lesion), &zero(Class::Liver)).unwrap();
    assert_eq!(planes[0], image);
    assert!(planes[1..].iter().all(|p| p.iter().all(|&v| v == 0.0)));
}

#[test]
fn cascade_stack_rejects_mismatched_extents() {
    let image = random_plane(16, 16, 1);
    let small = map(Array2::zeros((8, 8)), Class::Lesion);
    let liver = map(Array2::zeros((16, 16)), Class::Liver);
    assert!(stack_cascade_input(&image, &small, &liver).is_err());
}

/// A quick cascade run on two phantoms.
fn small_run(stage1_epochs: usize, stage2_epochs: usize) -> (CascadeModel, CascadeModel) {
    let mut cfg = RunConfig {
        dataset: DatasetConfig { train_cases: 2, val_cases: 0, training_slices: 6, ..DatasetConfig::default() },
        ..RunConfig::default()
    };
    cfg.training.stage1.epochs = stage1_epochs;
    cfg.training.stage2.epochs = stage2_epochs;
    let data = generate_dataset(&cfg).unwrap();
    let slices = training_slices(&cfg, &data.train).unwrap();
    let initial = CascadeModel::build(&ArchSpec::desk(), 8).unwrap();
    let mut model = initial.clone();
    train_cascade(&mut model, &slices, &CascadeConfig { ..cfg.training }).unwrap();
    (initial, model)
}

#[test]
fn stage_two_untouched_without_epochs_and_stage_one_frozen() {
    let (initial, a) = small_run(1, 0);
    for class in Class::ALL {
        assert_eq!(a.network(Stage::Two, class), initial.network(Stage::Two, class));
        assert_ne!(a.network(Stage::One, class), initial.network(Stage::One, class));
    }
    let (_, b) = small_run(1, 1);
    for class in Class::ALL {
        // Phase B leaves the stage-1 networks exactly as phase A left them.
        assert_eq!(b.network(Stage::One, class), a.network(Stage::One, class));
        assert_ne!(b.network(Stage::Two, class), initial.network(Stage::Two, class));
    }
    assert_eq!(b.network(Stage::Two, Class::Liver).input_channels(), 3);
}

#[test]
fn cascade_prediction_is_repeatable_and_bounded() {
    let model = CascadeModel::build(&ArchSpec::desk(), 2).unwrap();
    let images: Vec<Array2<f64>> = (0..3).map(|i| random_plane(24, 24, i)).collect();
    let a = model.predict_cascade(&images).unwrap();
    assert_eq!(a, model.predict_cascade(&images).unwrap());
    for p in &a {
        assert_eq!(p.liver.dim(), (24, 24));
        assert!(p.liver.values.iter().chain(p.lesion.values.iter()).all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn full_scale_set_is_512_to_640() {
    assert_eq!(ScaleSet::full().scales, [512, 544, 576, 608, 640]);
    assert_eq!(ScaleSet::desk().scales, [64, 72, 80, 88, 96]);
    assert!(ScaleSet::new(64, vec![64, 68]).is_err());
    assert!(ScaleSet::new(64, vec![72, 64]).is_err());
    assert!(ScaleSet::new(64, vec![]).is_err());
}

#[test]
fn single_scale_fusion_is_direct_prediction() {
    let model = CascadeModel::build(&ArchSpec::desk(), 3).unwrap();
    let images: Vec<Array2<f64>> = (0..2).map(|i| random_plane(32, 32, 10 + i)).collect();
    let fused = multiscale_predict(&StagePredictor { model: &model, stage: Stage::Two }, &images, &ScaleSet::single(32)).unwrap();
    assert_eq!(fused, model.predict_cascade(&images).unwrap());
}

/// Returns a constant map whose value depends on the input extent.
struct ConstantStub(fn(usize) -> f64);

impl SlicePredictor for ConstantStub {
    fn predict_slices(&self, images: &[Array2<f64>]) -> Result<Vec<SlicePrediction>> {
        images
            .iter()
            .map(|i| {
                let v = (self.0)(i.dim().0);
                Ok(SlicePrediction {
                    liver: ProbabilityMap::new(Array2::from_elem(i.dim(), v), Class::Liver)?,
                    lesion: ProbabilityMap::new(Array2::from_elem(i.dim(), 1.0 - v), Class::Lesion)?,
                })
            })
            .collect()
    }
}

#[test]
fn constant_stubs_fuse_to_their_mean() {
    let stub = ConstantStub(|s| if s <= 72 { 0.2 } else { 0.6 });
    let images = vec![random_plane(64, 64, 0)];
    let scales = ScaleSet::new(64, vec![64, 72, 80, 88]).unwrap();
    let out = multiscale_predict(&stub, &images, &scales).unwrap();
    assert!(out[0].liver.values.iter().all(|v| (v - 0.4).abs() <= 1e-12));
    assert!(out[0].lesion.values.iter().all(|v| (v - 0.6).abs() <= 1e-12));

    // A resolution-invariant predictor gives the same answer at every scale.
    let flat = ConstantStub(|_| 0.3);
    let multi = multiscale_predict(&flat, &images, &ScaleSet::desk()).unwrap();
    assert_eq!(multi, multiscale_predict(&flat, &images, &ScaleSet::single(64)).unwrap());
}

#[test]
fn fuse_basics() {
    let m = random_plane(5, 7, 1);
    assert_eq!(fuse(&[&m]).unwrap(), m);
    let zeros = Array2::zeros((3, 3));
    let ones = Array2::ones((3, 3));
    assert!(fuse(&[&zeros, &ones]).unwrap().iter().all(|&v| v == 0.5));
    assert!(fuse(&[]).is_err());
    assert!(fuse(&[&zeros, &Array2::zeros((3, 4))]).is_err());
    let lesion = map(zeros.clone(), Class::Lesion);
    let liver = map(zeros, Class::Liver);
    assert!(fuse_maps(&[lesion, liver]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fuse_is_order_free_and_bounded(seeds in prop::collection::vec(any::<u64>(), 1..7), rot in 0usize..7) {
        let maps: Vec<Array2<f64>> = seeds.iter().map(|&s| random_plane(4, 5, s)).collect();
        let refs: Vec<&Array2<f64>> = maps.iter().collect();
        let mut rotated = refs.clone();
        rotated.rotate_left(rot % refs.len());
        rotated.reverse();
        let a = fuse(&refs).unwrap();
        prop_assert_eq!(&a, &fuse(&rotated).unwrap());
        for (idx, &v) in a.indexed_iter() {
            let lo = maps.iter().map(|m| m[idx]).fold(f64::INFINITY, f64::min);
            let hi = maps.iter().map(|m| m[idx]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= v && v <= hi);
        }
    }
}
