use liverseg_core::arch::ArchSpec;
use liverseg_core::cascade::{CascadeModel, Stage};
use liverseg_core::checkpoint::{load, load_model, model_file, save, save_model};
use liverseg_core::network::{Class, Network};

#[test]
fn cascade_model_round_trips_through_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = CascadeModel::build(&ArchSpec::desk(), 11).unwrap();
    model.network_mut(Stage::Two, Class::Lesion).stats_mut()[0].mean[0] = -0.75;
    save_model(&model, dir.path()).unwrap();
    for (stage, class) in CascadeModel::slots() {
        assert!(dir.path().join(model_file(stage, class)).is_file());
    }
    assert_eq!(load_model(dir.path()).unwrap(), model);
}

#[test]
fn saved_bytes_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::build(&ArchSpec::desk(), 2).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save(&net, &a).unwrap();
    save(&Network::build(&ArchSpec::desk(), 2).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(load(&a).unwrap(), net);
}

#[test]
fn missing_or_mismatched_networks_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = CascadeModel::build(&ArchSpec::desk(), 1).unwrap();
    save_model(&model, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join(model_file(Stage::Two, Class::Liver))).unwrap();
    assert!(load_model(dir.path()).is_err());

    save_model(&model, dir.path()).unwrap();
    let wider = Network::build(&ArchSpec::desk().with_width_multiplier(0.125), 1).unwrap();
    save(&wider, dir.path().join(model_file(Stage::One, Class::Lesion))).unwrap();
    let err = load_model(dir.path()).unwrap_err();
    assert!(err.to_string().contains("architecture"), "{err}");
}
