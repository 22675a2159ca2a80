use hyperflux::data::{generate_dataset, Dataset, DatasetKind, DatasetSpec};
use hyperflux::trainer::{pretrain, TrainConfig};
use hyperflux::MaskedNet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fit_accuracy(data: &Dataset, sizes: &[usize], epochs: usize) -> f64 {
    let cfg = TrainConfig {
        seed: 1,
        ..TrainConfig::default()
    };
    let net = MaskedNet::init(sizes, &mut ChaCha8Rng::seed_from_u64(1));
    let (_, records) = pretrain(net, data, &cfg, epochs).unwrap();
    records.last().unwrap().val_accuracy
}

#[test]
fn noiseless_blobs_are_linearly_separable() {
    let data = DatasetSpec {
        kind: DatasetKind::Blobs,
        n: 400,
        classes: 3,
        noise: 0.0,
        seed: 1,
        validation_fraction: 0.2,
    }
    .generate()
    .unwrap();
    assert_eq!(fit_accuracy(&data, &[2, 3], 20), 1.0);
}

#[test]
fn spirals_need_a_hidden_layer() {
    let data = DatasetSpec::default().generate().unwrap();
    let linear = fit_accuracy(&data, &[2, 2], 30);
    let hidden = fit_accuracy(&data, &[2, 64, 2], 150);
    assert!(linear < 0.7, "linear {linear}");
    assert!(hidden > 0.95, "one hidden layer {hidden}");
}

#[test]
fn reference_problem_trains_densely() {
    let data = DatasetSpec::default().generate().unwrap();
    let acc = fit_accuracy(&data, &[2, 64, 64, 2], 20);
    assert!(acc >= 0.95, "dense accuracy {acc}");
}

#[test]
fn generation_is_deterministic_and_shaped() {
    for kind in [
        DatasetKind::Blobs,
        DatasetKind::Spirals,
        DatasetKind::XorGrid,
    ] {
        let a = generate_dataset(kind, 120, 2, 0.1, 5).unwrap();
        let b = generate_dataset(kind, 120, 2, 0.1, 5).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.train.len(), 120);
        assert_eq!(a.features(), 2);
        assert!(a.train.labels.iter().all(|&l| l < 2));
        let split = a.split_validation(0.25);
        assert_eq!(split.train.len() + split.validation.len(), 120);
        assert_eq!(split.validation.len(), 30);
    }
}

#[test]
fn kinds_parse_from_names() {
    for kind in [
        DatasetKind::Blobs,
        DatasetKind::Spirals,
        DatasetKind::XorGrid,
    ] {
        assert_eq!(kind.to_string().parse::<DatasetKind>().unwrap(), kind);
    }
    assert!("moons".parse::<DatasetKind>().is_err());
}
