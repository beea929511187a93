mod common;

use clickseg::autograd::Mat;
use clickseg::clickquery::Click;
use clickseg::params::AdamWConfig;
use clickseg::scene::VoxelGrid;
use clickseg::simulator::center_clicks;
use clickseg::training::{
    point_weights, sampler_registry, segmentation_loss, train, IterTrainConfig, LossConfig, TrainConfig, TrainScene,
};
use clickseg::Error;
use common::{rng, scene, small_model};
use proptest::prelude::*;

fn loss_instance() -> impl Strategy<Value = (Mat, Vec<usize>, Vec<f64>)> {
    (1usize..7, 2usize..4).prop_flat_map(|(n, r)| {
        (
            prop::collection::vec(-3.0f64..3.0, n * r),
            prop::collection::vec(0..r, n),
            prop::collection::vec(1.0f64..2.0, n),
            Just((n, r)),
        )
            .prop_map(|(v, l, w, (n, r))| (Mat::from_shape_vec((n, r), v).unwrap(), l, w))
    })
}

proptest! {
    #[test]
    fn loss_gradient_matches_finite_differences((logits, labels, weights) in loss_instance()) {
        let config = LossConfig::default();
        let l = segmentation_loss(&logits, &labels, &weights, &config).unwrap();
        prop_assert!((l.loss - (config.ce_weight * l.ce + config.dice_weight * l.dice)).abs() < 1e-12);
        let h = 1e-6;
        for i in 0..logits.nrows() {
            for j in 0..logits.ncols() {
                let mut p = logits.clone();
                p[[i, j]] += h;
                let mut m = logits.clone();
                m[[i, j]] -= h;
                let num = (segmentation_loss(&p, &labels, &weights, &config).unwrap().loss
                    - segmentation_loss(&m, &labels, &weights, &config).unwrap().loss)
                    / (2.0 * h);
                prop_assert!((num - l.grad[[i, j]]).abs() < 1e-7 * (1.0 + num.abs()));
            }
        }
    }

    #[test]
    fn confident_correct_logits_have_small_loss((_, labels, weights) in loss_instance()) {
        let r = labels.iter().copied().max().unwrap() + 1;
        let good = Mat::from_shape_fn((labels.len(), r.max(2)), |(i, j)| if labels[i] == j { 30.0 } else { -30.0 });
        let bad = good.mapv(|v| -v);
        let config = LossConfig::default();
        let lg = segmentation_loss(&good, &labels, &weights, &config).unwrap();
        let lb = segmentation_loss(&bad, &labels, &weights, &config).unwrap();
        prop_assert!(lg.ce < 1e-9);
        prop_assert!(lg.loss < lb.loss);
    }
}

#[test]
fn loss_rejects_bad_labels() {
    let logits = Mat::zeros((2, 2));
    let config = LossConfig::default();
    assert!(matches!(
        segmentation_loss(&logits, &[0, 2], &[1.0, 1.0], &config),
        Err(Error::InvalidLabel { label: 2, .. })
    ));
    assert!(segmentation_loss(&logits, &[0], &[1.0, 1.0], &config).is_err());
}

#[test]
fn point_weights_follow_the_distance_formula() {
    let keys = vec![[0, 0, 0], [1, 0, 0], [5, 0, 0]];
    let grid = VoxelGrid::from_keys(keys, Mat::zeros((3, 3)), 0.1).unwrap();
    let config = LossConfig::default();
    assert_eq!(point_weights(&[], &grid, &config), vec![1.0; 3]);
    let w = point_weights(&[Click::new(grid.center(0), 1, 1)], &grid, &config);
    assert!((w[0] - config.max_weight).abs() < 1e-12);
    let expect = |d: f64| 1.0 + (config.max_weight - 1.0) * (-(d * d) / (config.sigma * config.sigma)).exp();
    assert!((w[1] - expect(0.1)).abs() < 1e-12);
    assert!((w[2] - expect(0.5)).abs() < 1e-12);
    assert!(w[0] > w[1] && w[1] > w[2]);
}

#[test]
fn samplers_produce_valid_click_sequences() {
    let model = small_model(0);
    let ts = TrainScene::new(scene(1, 3), &model).unwrap();
    let config = IterTrainConfig::default();
    for name in ["iterative", "random"] {
        let sampler = sampler_registry().get(name).unwrap();
        for iterations in 1..=4 {
            let clicks = sampler.sample(&model, &ts, iterations, &config, &mut rng(iterations as u64)).unwrap();
            assert!(clicks.len() >= 3);
            assert!(clicks.len() <= 3 + (1..iterations).map(|i| config.clicks_for_iteration(i)).sum::<usize>());
            for (i, c) in clicks.iter().enumerate() {
                assert_eq!(c.timestamp, i + 1);
                assert!(c.region <= 3);
            }
            let regions: Vec<usize> = clicks[..3].iter().map(|c| c.region).collect();
            assert_eq!(regions, vec![1, 2, 3]);
            if name == "random" {
                let expected = 3 + (1..iterations).map(|i| config.clicks_for_iteration(i)).sum::<usize>();
                assert_eq!(clicks.len(), expected);
            }
        }
    }
    let iterative = sampler_registry().get("iterative").unwrap();
    let clicks = iterative.sample(&model, &ts, 1, &config, &mut rng(0)).unwrap();
    assert_eq!(clicks, center_clicks(&ts.scene));
}

fn quick_config(lr: f64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        seed: 3,
        optimizer: AdamWConfig {
            lr,
            ..AdamWConfig::default()
        },
        eval_every: 1,
        eval_clicks_per_object: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_logs_every_step() {
    let data: Vec<_> = (0..3).map(|s| scene(20 + s, 2)).collect();
    let held_out = vec![scene(40, 2)];
    let run = || {
        let mut model = small_model(5);
        let mut log = Vec::new();
        let report = train(&mut model, &data, &held_out, &quick_config(1e-3), &mut log).unwrap();
        (model.store.to_records(), report, String::from_utf8(log).unwrap())
    };
    let (a, ra, la) = run();
    let (b, rb, lb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.steps, 6);
    assert_eq!(la.lines().filter(|l| l.contains("\"kind\":\"step\"")).count(), 6);
    assert_eq!(la.lines().filter(|l| l.contains("\"kind\":\"eval\"")).count(), 2);
    let strip = |s: &str| s.lines().map(|l| l.to_string()).collect::<Vec<_>>();
    assert_eq!(strip(&la), strip(&lb));
    assert!(ra.best_iou_at_5.is_some());
    assert_ne!(a, small_model(5).store.to_records());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = vec![scene(50, 2)];
    let mut model = small_model(6);
    let before = model.store.to_records();
    let mut config = quick_config(0.0);
    config.eval_every = 0;
    train(&mut model, &data, &[], &config, &mut std::io::sink()).unwrap();
    assert_eq!(model.store.to_records(), before);
}

#[test]
fn learning_rate_schedule_decays_at_listed_epochs() {
    let config = TrainConfig {
        optimizer: AdamWConfig {
            lr: 1.0,
            ..AdamWConfig::default()
        },
        lr_decay_epochs: vec![2, 4],
        lr_decay: 0.5,
        ..TrainConfig::default()
    };
    let lrs: Vec<f64> = (0..6).map(|e| config.lr_at(e)).collect();
    assert_eq!(lrs, vec![1.0, 1.0, 0.5, 0.5, 0.25, 0.25]);
}

#[test]
fn bad_training_inputs_are_errors() {
    let mut model = small_model(7);
    let mut config = quick_config(1e-3);
    assert!(train(&mut model, &[], &[], &config, &mut std::io::sink()).is_err());
    config.sampler = "psychic".into();
    assert!(matches!(
        train(&mut model, &[scene(1, 2)], &[], &config, &mut std::io::sink()),
        Err(Error::UnknownStrategy { .. })
    ));
}
