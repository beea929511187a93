mod common;

use std::sync::Arc;

use clickseg::clickquery::Click;
use clickseg::model::{Model, ModelConfig};
use clickseg::scene::voxelize;
use clickseg::simulator::{center_clicks, LabeledScene};
use clickseg::Error;
use common::{scene, small_config, small_model};

fn prepared(model: &Model, seed: u64) -> (LabeledScene, clickseg::model::PreparedScene) {
    let s = LabeledScene::new(scene(seed, 3), model.config.voxel_size).unwrap();
    let p = model.prepare(s.grid.clone()).unwrap();
    (s, p)
}

#[test]
fn no_clicks_means_all_background() {
    let model = small_model(0);
    let (s, p) = prepared(&model, 1);
    let pred = model.decode(&p, &[], 3).unwrap();
    assert_eq!(pred.labels, vec![0; s.grid.len()]);
    assert_eq!(pred.regions, vec![0]);
}

#[test]
fn labels_come_from_clicked_regions_only() {
    let model = small_model(1);
    let (s, p) = prepared(&model, 2);
    let clicks = center_clicks(&s);
    let only_two = vec![Click { timestamp: 1, ..clicks[1] }];
    let pred = model.decode(&p, &only_two, 3).unwrap();
    assert_eq!(pred.regions, vec![0, 2]);
    assert!(pred.labels.iter().all(|&l| l == 0 || l == 2));
    let all = model.decode(&p, &clicks, 3).unwrap();
    assert_eq!(all.regions, vec![0, 1, 2, 3]);
    assert_eq!(all.mask.probabilities.ncols(), 4);
    assert_eq!(all.per_click.ncols(), clicks.len() + model.config.background_queries);
    assert_eq!(&all.query_regions[..3], &[1, 2, 3]);
}

#[test]
fn decoding_reuses_features_and_is_deterministic() {
    let model = small_model(2);
    let (s, p) = prepared(&model, 3);
    assert_eq!(model.backbone_calls(), 1);
    let clicks = center_clicks(&s);
    let a = model.decode(&p, &clicks, 3).unwrap();
    let b = model.decode(&p, &clicks, 3).unwrap();
    assert_eq!(model.backbone_calls(), 1);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.mask.logits, b.mask.logits);
}

#[test]
fn invalid_clicks_are_rejected() {
    let model = small_model(3);
    let (s, p) = prepared(&model, 4);
    let clicks = center_clicks(&s);
    assert!(matches!(model.decode(&p, &clicks, 2), Err(Error::InvalidRegion { .. })));
    let mut out_of_order = clicks.clone();
    out_of_order.swap(0, 1);
    assert!(matches!(model.decode(&p, &out_of_order, 3), Err(Error::InvalidClick(_))));
}

#[test]
fn channel_mismatch_and_bad_configs_are_errors() {
    let model = small_model(4);
    let mut sample = scene(5, 2);
    sample.cloud.colors = None;
    let grid = Arc::new(voxelize(&sample.cloud, 0.1).unwrap());
    assert!(matches!(model.prepare(grid), Err(Error::InvalidInput(_))));

    let mut c = small_config();
    c.decoder.heads = 5;
    assert!(Model::new(c, 0).is_err());
    let mut c = small_config();
    c.in_channels = 4;
    assert!(Model::new(c, 0).is_err());
    let mut c = small_config();
    c.background_queries = 0;
    assert!(Model::new(c, 0).is_err());
    let mut c = small_config();
    c.fusion = "sideways".into();
    assert!(matches!(Model::new(c, 0), Err(Error::UnknownStrategy { .. })));
}

#[test]
fn every_fusion_strategy_decodes() {
    for name in ["late-max", "late-mean", "early-max", "early-mean"] {
        let mut c = small_config();
        c.fusion = name.into();
        let model = Model::new(c, 0).unwrap();
        let (s, p) = prepared(&model, 6);
        let mut clicks = center_clicks(&s);
        clicks.push(Click::new(clicks[0].position(), 1, 4));
        let pred = model.decode(&p, &clicks, 3).unwrap();
        assert_eq!(pred.labels.len(), s.grid.len());
        let users = if name.starts_with("early") { 3 } else { 4 };
        assert_eq!(pred.per_click.ncols(), users + model.config.background_queries);
    }
}

#[test]
fn same_seed_gives_same_parameters() {
    let a = Model::new(ModelConfig::tiny(), 9).unwrap();
    let b = Model::new(ModelConfig::tiny(), 9).unwrap();
    let c = Model::new(ModelConfig::tiny(), 10).unwrap();
    assert_eq!(a.store.to_records(), b.store.to_records());
    assert_ne!(a.store.to_records(), c.store.to_records());
}
