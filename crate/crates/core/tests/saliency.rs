use hyperflux::data::{Dataset, DatasetKind, DatasetSpec};
use hyperflux::net::MaskedLayer;
use hyperflux::saliency::{
    imp_step, iterative_prune, magnitude_saliency, prune_count, sweep_to_series, taylor_saliency,
    ConvergenceCriterion, IterativeConfig, Method, SaliencySeries, Scored, SeriesPoint,
    PRUNED_PRESENCE,
};
use hyperflux::trainer::{pretrain, EpochRecord, Phase, TrainConfig};
use hyperflux::{MaskedNet, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn blobs() -> Dataset {
    DatasetSpec {
        kind: DatasetKind::Blobs,
        n: 300,
        classes: 3,
        noise: 0.4,
        seed: 2,
        validation_fraction: 0.2,
    }
    .generate()
    .unwrap()
}

fn column_net(weights: Vec<f64>) -> MaskedNet {
    let n = weights.len();
    MaskedNet::new(vec![MaskedLayer::dense(
        Tensor::matrix(n, 1, weights).unwrap(),
        Tensor::zeros(vec![1, 1]),
    )])
    .unwrap()
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn taylor_scores_rank_like_leave_one_out() {
    let data = blobs();
    let cfg = TrainConfig {
        seed: 1,
        ..TrainConfig::default()
    };
    let net = MaskedNet::init(&[2, 6, 3], &mut ChaCha8Rng::seed_from_u64(1));
    let (net, _) = pretrain(net, &data, &cfg, 3).unwrap();
    let (x, y) = (&data.train.inputs, &data.train.labels);
    let base = net.loss(x, y).unwrap();
    let taylor: Vec<f64> = taylor_saliency(&net, x, y)
        .unwrap()
        .iter()
        .map(|s| s.score)
        .collect();
    let mut removal = Vec::new();
    for flat in 0..net.num_weights() {
        let mut probe = net.clone();
        let (layer, idx) = probe.locate(flat).unwrap();
        probe.layers_mut()[layer].presence.data_mut()[idx] = PRUNED_PRESENCE;
        removal.push((probe.loss(x, y).unwrap() - base).abs());
    }
    let rho = spearman(&taylor, &removal);
    assert!(rho > 0.7, "spearman {rho}");
}

#[test]
fn magnitude_scores_skip_pruned_weights() {
    let mut net = column_net(vec![0.5, -2.0, 0.1]);
    net.layers_mut()[0].presence.data_mut()[1] = PRUNED_PRESENCE;
    let s = magnitude_saliency(&net);
    assert_eq!(
        s,
        vec![
            Scored {
                index: 0,
                score: 0.5
            },
            Scored {
                index: 2,
                score: 0.1
            }
        ]
    );
}

#[test]
fn pruned_weights_never_return() {
    let data = blobs();
    let cfg = TrainConfig {
        seed: 3,
        ..TrainConfig::default()
    };
    let net = MaskedNet::init(&[2, 8, 3], &mut ChaCha8Rng::seed_from_u64(3));
    let mut trainer = hyperflux::trainer::Trainer::new(net, cfg).unwrap();
    let mut gone: Vec<usize> = Vec::new();
    for _ in 0..5 {
        let scores = magnitude_saliency(&trainer.net);
        imp_step(&mut trainer.net, 0.2, &scores).unwrap();
        trainer.run_frozen(&data, 2, 0.05, Phase::Retrain).unwrap();
        let presence = trainer.net.presence_flat();
        for &i in &gone {
            assert_eq!(presence[i], PRUNED_PRESENCE);
        }
        gone = (0..presence.len())
            .filter(|&i| presence[i] <= 0.0)
            .collect();
    }
    assert!(!gone.is_empty());
}

#[test]
fn twenty_step_traces_strictly_shrink() {
    let data = blobs();
    let cfg = TrainConfig {
        seed: 4,
        ..TrainConfig::default()
    };
    let icfg = IterativeConfig {
        steps: 20,
        retrain_epochs: 1,
        ..IterativeConfig::default()
    };
    for method in [Method::Magnitude, Method::Taylor] {
        let net = MaskedNet::init(&[2, 16, 3], &mut ChaCha8Rng::seed_from_u64(4));
        let (_, trace) = iterative_prune(net, &data, method, &icfg, &cfg).unwrap();
        assert_eq!(trace.len(), 20);
        assert!(
            trace.windows(2).all(|w| w[1].density < w[0].density),
            "{method}"
        );
        assert!(trace.iter().all(|s| s.threshold >= 0.0));
        let series = hyperflux::saliency::trace_to_series(method, &trace);
        assert!(series.densities_strictly_decreasing());
        assert!(series.thresholds_non_negative());
    }
}

#[test]
fn hyperflux_is_not_an_iterative_method() {
    let data = blobs();
    let net = MaskedNet::init(&[2, 4, 3], &mut ChaCha8Rng::seed_from_u64(0));
    let r = iterative_prune(
        net,
        &data,
        Method::Hyperflux,
        &IterativeConfig::default(),
        &TrainConfig::default(),
    );
    assert!(r.is_err());
}

fn record(epoch: usize, density: f64) -> EpochRecord {
    EpochRecord {
        epoch,
        phase: Phase::Constant,
        density,
        task_loss: 0.1,
        pressure_loss: 0.0,
        gamma: 0.0,
        flips: 0,
        train_accuracy: 1.0,
        val_accuracy: 0.99,
        active_per_layer: vec![],
        eta_t: 0.0,
        eta_w: 0.0,
    }
}

#[test]
fn sweeps_become_sorted_series() {
    let gammas = [4.0, 0.5, 16.0, 1.0, 8.0, 2.0];
    let runs: Vec<(f64, Vec<EpochRecord>)> = gammas
        .iter()
        .map(|&g| (g, (1..=10).map(|e| record(e, 0.1 / g)).collect()))
        .collect();
    let series = sweep_to_series(&runs, &ConvergenceCriterion::default());
    assert_eq!(series.points.len(), 6);
    assert!(series.flagged.is_empty());
    let thresholds: Vec<f64> = series.points.iter().map(|p| p.threshold).collect();
    assert_eq!(thresholds, vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0]);
    assert!(series.densities_strictly_decreasing());
}

#[test]
fn unconverged_sweep_runs_are_flagged() {
    let mut runs: Vec<(f64, Vec<EpochRecord>)> = [0.5, 1.0, 2.0, 4.0, 8.0]
        .iter()
        .map(|&g| (g, (1..=10).map(|e| record(e, 0.1 / g)).collect()))
        .collect();
    runs.push((
        0.1,
        (1..=10).map(|e| record(e, 1.0 - 0.05 * e as f64)).collect(),
    ));
    let series = sweep_to_series(&runs, &ConvergenceCriterion::default());
    assert_eq!(series.points.len(), 5);
    assert_eq!(series.flagged.len(), 1);
    assert_eq!(series.flagged[0].threshold, 0.1);
}

#[test]
fn series_csv_round_trip() {
    let series = SaliencySeries::new(
        Method::Taylor,
        vec![
            SeriesPoint {
                threshold: 0.01,
                density: 0.9,
                accuracy: 0.99,
                epoch: 10,
            },
            SeriesPoint {
                threshold: 0.02,
                density: 0.81,
                accuracy: 0.98,
                epoch: 20,
            },
        ],
    );
    let mut buf = Vec::new();
    series.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with("method,threshold,density,accuracy,epoch\n"));
    assert_eq!(SaliencySeries::read_csv(buf.as_slice()).unwrap(), series);
}

proptest! {
    #[test]
    fn magnitude_order_survives_positive_scaling(
        weights in proptest::collection::vec(-5.0f64..5.0, 2..30),
        k in 0.01f64..100.0,
    ) {
        let order = |ws: Vec<f64>| {
            let mut s = magnitude_saliency(&column_net(ws));
            s.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.index.cmp(&b.index)));
            s.into_iter().map(|s| s.index).collect::<Vec<_>>()
        };
        let scaled: Vec<f64> = weights.iter().map(|w| w * k).collect();
        let (a, b) = (order(weights.clone()), order(scaled));
        // Scaling can only merge or split exact ties through rounding.
        let distinct = {
            let mut m: Vec<f64> = weights.iter().map(|w| w.abs()).collect();
            m.sort_by(f64::total_cmp);
            m.windows(2).all(|w| w[1] > w[0] * (1.0 + 1e-12))
        };
        if distinct {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn active_counts_follow_the_prune_recurrence(
        n in 20usize..400,
        q in 0.01f64..0.5,
        steps in 1usize..12,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = column_net((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut expected = n;
        for _ in 0..steps {
            if expected == 0 {
                break;
            }
            let scores = magnitude_saliency(&net);
            let (count, threshold) = imp_step(&mut net, q, &scores).unwrap();
            prop_assert_eq!(count, prune_count(expected, q));
            expected -= ((q * expected as f64).ceil() as usize).clamp(1, expected);
            prop_assert_eq!(net.active_weights(), expected);
            let survivors = magnitude_saliency(&net);
            prop_assert!(survivors.iter().all(|s| s.score >= threshold));
        }
    }
}
