//! Annotation sessions: one scene, its cached backbone features and the
//! click sequence placed so far.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use clickseg::checkpoint::ModelIdentity;
use clickseg::clickquery::Click;
use clickseg::metrics::iou;
use clickseg::model::{Model, PreparedScene};
use clickseg::scene::{
    devoxelize_labels, encode_scene, generate_synthetic_scene, load_scene, parse_scene, voxelize, GeneratorSpec,
    PointCloud, SceneFormat, SceneSample,
};
use clickseg::simulator::{RoundRecord, Trajectory};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub max_points: usize,
    /// Largest region index a click may carry.
    pub max_region: usize,
    /// Sequential session ids instead of random ones.
    pub deterministic: bool,
    /// Directory searched for `{scene_id}.ply` and `{scene_id}.json`.
    pub scene_dir: Option<PathBuf>,
    /// Allowed browser origin; any origin when unset.
    pub cors_origin: Option<String>,
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_points: 2_000_000,
            max_region: 255,
            deterministic: false,
            scene_dir: None,
            cors_origin: None,
            max_body_bytes: 256 << 20,
        }
    }
}

/// A click as sent by a client; the server assigns timestamps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickInput {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub region: i64,
}

/// Where a new session's scene comes from.
#[derive(Clone, Debug)]
pub enum SceneSource {
    /// A stored scene, or `synthetic-<seed>` for a generated one.
    Id(String),
    Cloud(PointCloud),
    Bytes { bytes: Vec<u8>, format: SceneFormat },
}

#[derive(Clone, Debug)]
pub struct CreateRequest {
    pub source: SceneSource,
    /// Object ids of the scene's labels that regions `1..` correspond to;
    /// enables per-object IoU in responses.
    pub targets: Option<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub session_id: String,
    pub scene_id: String,
    pub points: usize,
    pub voxels: usize,
    pub channels: usize,
    pub backbone_ms: f64,
    pub model_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub backbone_ms: f64,
    /// One entry per decoder pass.
    pub decode_ms: Vec<f64>,
    pub backbone_runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskResponse {
    pub session_id: String,
    /// Region per point, aligned with the uploaded point order.
    pub labels: Vec<usize>,
    pub m: usize,
    pub clicks: Vec<Click>,
    pub rounds: usize,
    /// Time of the decoder pass that produced this mask; 0 when no pass ran.
    pub decode_ms: f64,
    pub timings: Timings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_object_iou: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Ply,
    Json,
    Jsonl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonExport {
    pub session_id: String,
    pub scene_id: String,
    pub model_hash: String,
    pub m: usize,
    pub labels: Vec<usize>,
    pub clicks: Vec<Click>,
    /// Same records as the simulator's trajectory files.
    pub trajectory: Vec<RoundRecord>,
}

#[derive(Clone, Debug)]
pub struct ExportFile {
    pub content_type: &'static str,
    pub file_name: String,
    pub bytes: Vec<u8>,
}

pub struct Session {
    pub id: String,
    pub scene_id: String,
    model: Arc<Model>,
    model_hash: String,
    cloud: PointCloud,
    prepared: PreparedScene,
    gt: Option<Vec<usize>>,
    targets: usize,
    clicks: Vec<Click>,
    rounds: Vec<RoundRecord>,
    m: usize,
    labels: Vec<usize>,
    last_decode_ms: f64,
    timings: Timings,
}

impl Session {
    fn new(
        id: String,
        scene_id: String,
        cloud: PointCloud,
        targets: Option<Vec<u32>>,
        model: Arc<Model>,
        model_hash: String,
    ) -> Result<Self, ServiceError> {
        let (gt, n_targets) = match targets {
            Some(t) => {
                let sample = SceneSample::new(scene_id.clone(), cloud.clone(), t)?;
                (Some(sample.region_labels()), sample.m())
            }
            None => (None, 0),
        };
        let grid = Arc::new(voxelize(&cloud, model.config.voxel_size)?);
        let t = Instant::now();
        let prepared = model.prepare(grid)?;
        let backbone_ms = t.elapsed().as_secs_f64() * 1e3;
        let labels = vec![0; cloud.len()];
        Ok(Session {
            id,
            scene_id,
            model,
            model_hash,
            cloud,
            prepared,
            gt,
            targets: n_targets,
            clicks: Vec::new(),
            rounds: Vec::new(),
            m: 0,
            labels,
            last_decode_ms: 0.0,
            timings: Timings {
                backbone_ms,
                decode_ms: Vec::new(),
                backbone_runs: 1,
            },
        })
    }

    pub fn stats(&self) -> SessionStats {
        SessionStats {
            session_id: self.id.clone(),
            scene_id: self.scene_id.clone(),
            points: self.cloud.len(),
            voxels: self.prepared.context.grid.len(),
            channels: self.cloud.channels(),
            backbone_ms: self.timings.backbone_ms,
            model_hash: self.model_hash.clone(),
        }
    }

    pub fn clicks(&self) -> &[Click] {
        &self.clicks
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            scene_id: self.scene_id.clone(),
            m: self.m,
            rounds: self.rounds.clone(),
            final_labels: self.labels.clone(),
        }
    }

    fn object_ious(&self) -> Option<Vec<f64>> {
        self.gt
            .as_ref()
            .map(|gt| (1..=self.targets).map(|r| iou(&self.labels, gt, r)).collect())
    }

    /// Decodes the current click sequence. Without clicks every point is
    /// background and no decoder pass is needed.
    fn recompute(&mut self) -> Result<(), ServiceError> {
        self.m = self.clicks.iter().map(|c| c.region).max().unwrap_or(0);
        if self.clicks.is_empty() {
            self.labels = vec![0; self.cloud.len()];
            self.last_decode_ms = 0.0;
            return Ok(());
        }
        let t = Instant::now();
        let pred = self.model.decode(&self.prepared, &self.clicks, self.m)?;
        self.labels = devoxelize_labels(&self.prepared.context.grid, &pred.labels)?;
        self.last_decode_ms = t.elapsed().as_secs_f64() * 1e3;
        self.timings.decode_ms.push(self.last_decode_ms);
        Ok(())
    }

    fn response(&self) -> MaskResponse {
        MaskResponse {
            session_id: self.id.clone(),
            labels: self.labels.clone(),
            m: self.m,
            clicks: self.clicks.clone(),
            rounds: self.rounds.len(),
            decode_ms: self.last_decode_ms,
            timings: self.timings.clone(),
            per_object_iou: self.object_ious(),
        }
    }

    fn validate(&self, clicks: &[ClickInput], max_region: usize) -> Result<(), ServiceError> {
        for (i, c) in clicks.iter().enumerate() {
            if ![c.x, c.y, c.z].iter().all(|v| v.is_finite()) {
                return Err(clickseg::Error::InvalidClick(format!("click {i} has a non-finite position")).into());
            }
            if c.region < 0 {
                return Err(clickseg::Error::InvalidClick(format!("click {i} has negative region {}", c.region)).into());
            }
            if c.region as u64 > max_region as u64 {
                return Err(clickseg::Error::InvalidRegion {
                    region: c.region as usize,
                    max: max_region,
                }
                .into());
            }
        }
        Ok(())
    }

    /// Appends a batch of clicks as one round and decodes. An empty batch
    /// recomputes the current mask. On error the sequence is unchanged.
    pub fn add_clicks(&mut self, clicks: &[ClickInput], max_region: usize) -> Result<MaskResponse, ServiceError> {
        self.validate(clicks, max_region)?;
        let before = self.clicks.len();
        let added: Vec<Click> = clicks
            .iter()
            .enumerate()
            .map(|(i, c)| Click::new([c.x, c.y, c.z], c.region as usize, before + i + 1))
            .collect();
        self.clicks.extend_from_slice(&added);
        if let Err(e) = self.recompute() {
            self.clicks.truncate(before);
            self.recompute()?;
            return Err(e);
        }
        if !added.is_empty() {
            let per_object_iou = self.object_ious().unwrap_or_default();
            let mean_iou = if per_object_iou.is_empty() {
                0.0
            } else {
                per_object_iou.iter().sum::<f64>() / per_object_iou.len() as f64
            };
            self.rounds.push(RoundRecord {
                round: self.rounds.len(),
                clicks: added,
                total_clicks: self.clicks.len(),
                per_object_iou,
                mean_iou,
                decode_ms: self.last_decode_ms,
            });
        }
        Ok(self.response())
    }

    /// Removes the most recent click and decodes the remaining sequence.
    pub fn undo(&mut self) -> Result<MaskResponse, ServiceError> {
        if self.clicks.pop().is_none() {
            return Err(clickseg::Error::NothingToUndo.into());
        }
        if let Some(last) = self.rounds.last_mut() {
            last.clicks.pop();
            last.total_clicks = self.clicks.len();
            if last.clicks.is_empty() {
                self.rounds.pop();
            }
        }
        self.recompute()?;
        Ok(self.response())
    }

    pub fn mask(&self) -> MaskResponse {
        self.response()
    }

    pub fn export(&self, format: ExportFormat) -> Result<ExportFile, ServiceError> {
        Ok(match format {
            ExportFormat::Ply => {
                let cloud = PointCloud {
                    labels: Some(self.labels.iter().map(|&l| l as u32).collect()),
                    ..self.cloud.clone()
                };
                ExportFile {
                    content_type: "application/octet-stream",
                    file_name: format!("{}.ply", self.id),
                    bytes: encode_scene(&cloud, SceneFormat::Ply)?,
                }
            }
            ExportFormat::Json => {
                let doc = JsonExport {
                    session_id: self.id.clone(),
                    scene_id: self.scene_id.clone(),
                    model_hash: self.model_hash.clone(),
                    m: self.m,
                    labels: self.labels.clone(),
                    clicks: self.clicks.clone(),
                    trajectory: self.rounds.clone(),
                };
                ExportFile {
                    content_type: "application/json",
                    file_name: format!("{}.json", self.id),
                    bytes: serde_json::to_vec(&doc).map_err(clickseg::Error::from)?,
                }
            }
            ExportFormat::Jsonl => ExportFile {
                content_type: "application/x-ndjson",
                file_name: format!("{}.jsonl", self.id),
                bytes: self.trajectory().to_jsonl()?.into_bytes(),
            },
        })
    }
}

/// The loaded model and its identity.
#[derive(Clone)]
pub struct LoadedModel {
    pub model: Arc<Model>,
    pub identity: ModelIdentity,
}

/// All live sessions. Each session sits behind its own mutex so requests to
/// one session run one at a time while different sessions proceed in
/// parallel.
pub struct SessionManager {
    pub config: ServiceConfig,
    model: Option<LoadedModel>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    counter: AtomicU64,
}

impl SessionManager {
    pub fn new(model: Option<LoadedModel>, config: ServiceConfig) -> Self {
        SessionManager {
            config,
            model,
            sessions: RwLock::new(HashMap::new()),
            counter: AtomicU64::new(0),
        }
    }

    pub fn model(&self) -> Option<&LoadedModel> {
        self.model.as_ref()
    }

    fn next_id(&self) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed) + 1;
        if self.config.deterministic {
            format!("s{n}")
        } else {
            uuid::Uuid::new_v4().to_string()
        }
    }

    fn resolve(&self, source: SceneSource) -> Result<(String, PointCloud), ServiceError> {
        match source {
            SceneSource::Cloud(cloud) => {
                cloud.validate()?;
                Ok(("upload".to_string(), cloud))
            }
            SceneSource::Bytes { bytes, format } => Ok(("upload".to_string(), parse_scene(&bytes, format)?)),
            SceneSource::Id(id) => {
                if let Some(seed) = id.strip_prefix("synthetic-").and_then(|s| s.parse::<u64>().ok()) {
                    let spec = GeneratorSpec {
                        seed,
                        ..Default::default()
                    };
                    return Ok((id, generate_synthetic_scene(&spec)?.cloud));
                }
                let valid = !id.is_empty()
                    && id
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
                    && !id.starts_with('.');
                if !valid {
                    return Err(ServiceError::BadRequest(format!("invalid scene id {id:?}")));
                }
                let dir = self
                    .config
                    .scene_dir
                    .as_ref()
                    .ok_or_else(|| ServiceError::SceneNotFound(id.clone()))?;
                for (ext, format) in [("ply", SceneFormat::Ply), ("json", SceneFormat::Json)] {
                    let path = dir.join(format!("{id}.{ext}"));
                    if path.is_file() {
                        return Ok((id, load_scene(&path, format)?));
                    }
                }
                Err(ServiceError::SceneNotFound(id))
            }
        }
    }

    /// Loads the scene, runs the backbone once and registers the session.
    pub fn create(&self, request: CreateRequest) -> Result<SessionStats, ServiceError> {
        let loaded = self.model.as_ref().ok_or(ServiceError::NotReady)?;
        let (scene_id, cloud) = self.resolve(request.source)?;
        if cloud.len() > self.config.max_points {
            return Err(ServiceError::TooLarge {
                points: cloud.len(),
                max: self.config.max_points,
            });
        }
        if cloud.channels() != loaded.model.config.in_channels {
            return Err(ServiceError::BadRequest(format!(
                "scene has {} channels, model expects {}",
                cloud.channels(),
                loaded.model.config.in_channels
            )));
        }
        let id = self.next_id();
        let session = Session::new(
            id.clone(),
            scene_id,
            cloud,
            request.targets,
            loaded.model.clone(),
            loaded.identity.hash.clone(),
        )?;
        let stats = session.stats();
        tracing::info!(session = %id, points = stats.points, voxels = stats.voxels, backbone_ms = stats.backbone_ms, "session created");
        self.sessions
            .write()
            .expect("session table poisoned")
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(stats)
    }

    pub fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| clickseg::Error::NotFound(id.to_string()).into())
    }

    fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> Result<T, ServiceError>) -> Result<T, ServiceError> {
        let session = self.get(id)?;
        let mut guard = session.lock().map_err(|_| ServiceError::Internal("session lock poisoned".into()))?;
        f(&mut guard)
    }

    pub fn add_clicks(&self, id: &str, clicks: &[ClickInput]) -> Result<MaskResponse, ServiceError> {
        let max = self.config.max_region;
        self.with_session(id, |s| s.add_clicks(clicks, max))
    }

    pub fn undo(&self, id: &str) -> Result<MaskResponse, ServiceError> {
        self.with_session(id, |s| s.undo())
    }

    pub fn mask(&self, id: &str) -> Result<MaskResponse, ServiceError> {
        self.with_session(id, |s| Ok(s.mask()))
    }

    pub fn export(&self, id: &str, format: ExportFormat) -> Result<ExportFile, ServiceError> {
        self.with_session(id, |s| s.export(format))
    }

    pub fn delete(&self, id: &str) -> Result<(), ServiceError> {
        self.sessions
            .write()
            .expect("session table poisoned")
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| clickseg::Error::NotFound(id.to_string()).into())
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("session table poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
