#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use clickseg::checkpoint::{hash_bytes, Checkpoint};
use clickseg::model::{Model, ModelConfig};
use clickseg::scene::{generate_synthetic_scene, GeneratorSpec, SceneSample};
use clickseg_server::{LoadedModel, ServiceConfig, SessionManager};

pub fn model() -> Arc<Model> {
    Arc::new(Model::new(ModelConfig::tiny(), 7).unwrap())
}

pub fn loaded(model: Arc<Model>) -> LoadedModel {
    let ckpt = Checkpoint::from_model(&model, BTreeMap::new());
    let hash = hash_bytes(&ckpt.to_bytes().unwrap());
    LoadedModel {
        identity: ckpt.identity(hash),
        model,
    }
}

pub fn manager() -> SessionManager {
    let config = ServiceConfig {
        deterministic: true,
        ..Default::default()
    };
    SessionManager::new(Some(loaded(model())), config)
}

pub fn scene(seed: u64) -> SceneSample {
    let spec = GeneratorSpec {
        seed,
        object_count: 3,
        room_size: [2.0, 2.0],
        ..Default::default()
    };
    generate_synthetic_scene(&spec).unwrap()
}
