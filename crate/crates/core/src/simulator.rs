//! Simulated user: initial center clicks, error clusters against ground
//! truth, and the next click at the center of the largest error.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::kernel_offsets;
use crate::clickquery::Click;
use crate::metrics::{iou, multi_object_curves, CurvePoint, MetricTable};
use crate::model::{Model, PreparedScene};
use crate::registry::Registry;
use crate::scene::{devoxelize_labels, majority_labels, voxelize, SceneSample, VoxelGrid};
use crate::{Error, Result};

/// A sample together with its voxelization and ground-truth labels in
/// region ids (0 background, `j + 1` for target `j`).
#[derive(Clone, Debug)]
pub struct LabeledScene {
    pub sample: SceneSample,
    pub grid: Arc<VoxelGrid>,
    pub point_gt: Vec<usize>,
    pub voxel_gt: Vec<usize>,
}

impl LabeledScene {
    pub fn new(sample: SceneSample, voxel_size: f64) -> Result<Self> {
        let grid = voxelize(&sample.cloud, voxel_size)?;
        let point_gt = sample.region_labels();
        let voxel_gt = majority_labels(&grid, &point_gt)?;
        Ok(LabeledScene {
            sample,
            grid: Arc::new(grid),
            point_gt,
            voxel_gt,
        })
    }

    pub fn m(&self) -> usize {
        self.sample.m()
    }

    /// IoU of every target region, measured on points.
    pub fn object_ious(&self, voxel_pred: &[usize]) -> Result<Vec<f64>> {
        let points = devoxelize_labels(&self.grid, voxel_pred)?;
        Ok((1..=self.m()).map(|r| iou(&points, &self.point_gt, r)).collect())
    }
}

/// One click per target at the object point nearest the object's
/// centroid, with timestamps `1..=M`.
pub fn center_clicks(scene: &LabeledScene) -> Vec<Click> {
    let pts = &scene.sample.cloud.points;
    (1..=scene.m())
        .filter_map(|r| {
            let members: Vec<usize> = (0..pts.len()).filter(|&i| scene.point_gt[i] == r).collect();
            if members.is_empty() {
                return None;
            }
            let n = members.len() as f64;
            let c: [f64; 3] = std::array::from_fn(|a| members.iter().map(|&i| pts[i][a]).sum::<f64>() / n);
            let best = nearest(members.iter().map(|&i| (i, pts[i])), c);
            Some((r, pts[best]))
        })
        .enumerate()
        .map(|(k, (r, p))| Click::new(p, r, k + 1))
        .collect()
}

fn nearest(candidates: impl Iterator<Item = (usize, [f64; 3])>, c: [f64; 3]) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for (i, p) in candidates {
        let d = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>();
        if d < best.0 || (d == best.0 && i < best.1) {
            best = (d, i);
        }
    }
    best.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCluster {
    /// Member voxels in ascending order.
    pub voxels: Vec<usize>,
    pub true_region: usize,
    pub predicted_region: usize,
    pub size: usize,
    /// Member voxel nearest the cluster centroid.
    pub center: usize,
}

/// 26-connected components of mislabeled voxels, split by
/// `(true, predicted)` pair, largest first (ties: smaller first voxel).
pub fn error_clusters(pred: &[usize], gt: &[usize], grid: &VoxelGrid) -> Vec<ErrorCluster> {
    assert_eq!(pred.len(), grid.len(), "prediction must align with the grid");
    assert_eq!(gt.len(), grid.len(), "ground truth must align with the grid");
    let offsets: Vec<[i32; 3]> = kernel_offsets().into_iter().filter(|o| *o != [0, 0, 0]).collect();
    let mut visited = vec![false; grid.len()];
    let mut clusters = Vec::new();
    for start in 0..grid.len() {
        if visited[start] || pred[start] == gt[start] {
            continue;
        }
        let pair = (gt[start], pred[start]);
        visited[start] = true;
        let mut members = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            let k = grid.keys[v];
            for o in &offsets {
                let Some(u) = grid.lookup([k[0] + o[0], k[1] + o[1], k[2] + o[2]]) else {
                    continue;
                };
                if !visited[u] && (gt[u], pred[u]) == pair {
                    visited[u] = true;
                    members.push(u);
                    queue.push_back(u);
                }
            }
        }
        members.sort_unstable();
        let n = members.len() as f64;
        let c: [f64; 3] =
            std::array::from_fn(|a| members.iter().map(|&v| grid.center(v)[a]).sum::<f64>() / n);
        let center = nearest(members.iter().map(|&v| (v, grid.center(v))), c);
        clusters.push(ErrorCluster {
            size: members.len(),
            voxels: members,
            true_region: pair.0,
            predicted_region: pair.1,
            center,
        });
    }
    clusters.sort_by(|a, b| b.size.cmp(&a.size).then(a.voxels[0].cmp(&b.voxels[0])));
    clusters
}

/// Click at the largest cluster's center labeled with its true region;
/// `None` when there is nothing left to correct.
pub fn next_click(clusters: &[ErrorCluster], grid: &VoxelGrid, timestamp: usize) -> Option<Click> {
    clusters
        .first()
        .map(|c| Click::new(grid.center(c.center), c.true_region, timestamp))
}

/// Hop distance of every member to the cluster's boundary (members with an
/// occupied neighbor outside the cluster).
fn boundary_depth(cluster: &ErrorCluster, grid: &VoxelGrid) -> Vec<usize> {
    let offsets: Vec<[i32; 3]> = kernel_offsets().into_iter().filter(|o| *o != [0, 0, 0]).collect();
    let pos = |v: usize| cluster.voxels.binary_search(&v).ok();
    let neighbors = |v: usize| {
        let k = grid.keys[v];
        offsets
            .iter()
            .filter_map(move |o| grid.lookup([k[0] + o[0], k[1] + o[1], k[2] + o[2]]))
    };
    let mut depth = vec![usize::MAX; cluster.size];
    let mut queue = VecDeque::new();
    for (i, &v) in cluster.voxels.iter().enumerate() {
        if neighbors(v).any(|u| pos(u).is_none()) {
            depth[i] = 0;
            queue.push_back(i);
        }
    }
    if queue.is_empty() {
        return vec![0; cluster.size];
    }
    while let Some(i) = queue.pop_front() {
        for u in neighbors(cluster.voxels[i]) {
            if let Some(j) = pos(u) {
                if depth[j] == usize::MAX {
                    depth[j] = depth[i] + 1;
                    queue.push_back(j);
                }
            }
        }
    }
    depth
}

/// One click from each of the top `n` clusters, timestamps starting at
/// `first_timestamp`. With `rng` the click lands on a random member of
/// the cluster's deepest decile instead of its center.
pub fn sample_training_clicks(
    clusters: &[ErrorCluster],
    grid: &VoxelGrid,
    n: usize,
    first_timestamp: usize,
    mut rng: Option<&mut dyn RngCore>,
) -> Vec<Click> {
    clusters
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, c)| {
            let v = match rng.as_deref_mut() {
                None => c.center,
                Some(rng) => {
                    let depth = boundary_depth(c, grid);
                    let mut order: Vec<usize> = (0..c.size).collect();
                    order.sort_by(|&a, &b| depth[b].cmp(&depth[a]).then(a.cmp(&b)));
                    let keep = c.size.div_ceil(10);
                    c.voxels[order[rng.random_range(0..keep)]]
                }
            };
            Click::new(grid.center(v), c.true_region, first_timestamp + i)
        })
        .collect()
}

/// Something that labels voxels given clicks, used by the simulator.
pub trait Predictor: Send + Sync {
    fn name(&self) -> &'static str;

    /// Per-scene setup (the model computes backbone features here).
    fn start<'a>(&'a self, scene: &'a LabeledScene) -> Result<Box<dyn PredictorSession + 'a>>;
}

pub trait PredictorSession {
    /// Per-voxel region labels for the full click sequence.
    fn predict(&mut self, clicks: &[Click]) -> Result<Vec<usize>>;
}

pub struct ModelPredictor(pub Arc<Model>);

struct ModelSession<'a> {
    model: &'a Model,
    prepared: PreparedScene,
    m: usize,
}

impl Predictor for ModelPredictor {
    fn name(&self) -> &'static str {
        "model"
    }

    fn start<'a>(&'a self, scene: &'a LabeledScene) -> Result<Box<dyn PredictorSession + 'a>> {
        Ok(Box::new(ModelSession {
            model: &self.0,
            prepared: self.0.prepare(scene.grid.clone())?,
            m: scene.m(),
        }))
    }
}

impl PredictorSession for ModelSession<'_> {
    fn predict(&mut self, clicks: &[Click]) -> Result<Vec<usize>> {
        Ok(self.model.decode(&self.prepared, clicks, self.m)?.labels)
    }
}

/// Returns the ground truth regardless of clicks.
pub struct OraclePredictor;

struct OracleSession<'a>(&'a [usize]);

impl Predictor for OraclePredictor {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn start<'a>(&'a self, scene: &'a LabeledScene) -> Result<Box<dyn PredictorSession + 'a>> {
        Ok(Box::new(OracleSession(&scene.voxel_gt)))
    }
}

impl PredictorSession for OracleSession<'_> {
    fn predict(&mut self, _clicks: &[Click]) -> Result<Vec<usize>> {
        Ok(self.0.to_vec())
    }
}

/// Registered predictors; `model` is present only when a model is given.
pub fn predictor_registry(model: Option<Arc<Model>>) -> Registry<dyn Predictor> {
    let mut r: Registry<dyn Predictor> = Registry::new();
    r.register("oracle", Arc::new(OraclePredictor));
    if let Some(m) = model {
        r.register("model", Arc::new(ModelPredictor(m)));
    }
    r
}

/// One trajectory record. `clicks` holds the clicks added this round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clicks: Vec<Click>,
    pub total_clicks: usize,
    pub per_object_iou: Vec<f64>,
    pub mean_iou: f64,
    pub decode_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scene_id: String,
    pub m: usize,
    pub rounds: Vec<RoundRecord>,
    pub final_labels: Vec<usize>,
}

impl Trajectory {
    pub fn all_clicks(&self) -> Vec<Click> {
        self.rounds.iter().flat_map(|r| r.clicks.iter().copied()).collect()
    }

    /// Mean IoU over total clicks.
    pub fn curve(&self) -> Vec<CurvePoint> {
        self.rounds
            .iter()
            .map(|r| CurvePoint {
                clicks: r.total_clicks,
                iou: r.mean_iou,
            })
            .collect()
    }

    /// IoU of one object over total clicks.
    pub fn object_curve(&self, object: usize) -> Vec<CurvePoint> {
        self.rounds
            .iter()
            .map(|r| CurvePoint {
                clicks: r.total_clicks,
                iou: r.per_object_iou[object],
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rounds {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn rounds_from_jsonl(text: &str) -> Result<Vec<RoundRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        1.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs the simulated user: center clicks first, then one click per round
/// at the largest error until the budget is spent, no errors remain, or
/// every object reaches `stop_iou`.
pub fn simulate_session(
    predictor: &dyn Predictor,
    scene: &LabeledScene,
    budget: usize,
    stop_iou: f64,
) -> Result<Trajectory> {
    let m = scene.m();
    if budget < m {
        return Err(Error::invalid(format!("budget {budget} is below the object count {m}")));
    }
    let mut session = predictor.start(scene)?;
    let mut clicks = center_clicks(scene);
    let mut rounds = Vec::new();
    let mut new_clicks = clicks.clone();
    loop {
        let t = Instant::now();
        let labels = session.predict(&clicks)?;
        let decode_ms = t.elapsed().as_secs_f64() * 1e3;
        let per_object_iou = scene.object_ious(&labels)?;
        let mean_iou = mean(&per_object_iou);
        rounds.push(RoundRecord {
            round: rounds.len(),
            clicks: std::mem::take(&mut new_clicks),
            total_clicks: clicks.len(),
            per_object_iou: per_object_iou.clone(),
            mean_iou,
            decode_ms,
        });
        let done = per_object_iou.iter().all(|&v| v >= stop_iou) || clicks.len() >= budget;
        let next = if done {
            None
        } else {
            let clusters = error_clusters(&labels, &scene.voxel_gt, &scene.grid);
            next_click(&clusters, &scene.grid, clicks.len() + 1)
        };
        match next {
            Some(c) => {
                clicks.push(c);
                new_clicks.push(c);
            }
            None => {
                return Ok(Trajectory {
                    scene_id: scene.sample.id.clone(),
                    m,
                    rounds,
                    final_labels: labels,
                })
            }
        }
    }
}

/// Decodes the click sequence recorded in `rounds` and returns the final
/// voxel labels.
pub fn replay(predictor: &dyn Predictor, scene: &LabeledScene, rounds: &[RoundRecord]) -> Result<Vec<usize>> {
    let clicks: Vec<Click> = rounds.iter().flat_map(|r| r.clicks.iter().copied()).collect();
    predictor.start(scene)?.predict(&clicks)
}

/// Simulates every scene with a budget of `clicks_per_object * M` and
/// averages the multi-object metrics.
pub fn evaluate(
    predictor: &dyn Predictor,
    scenes: &[LabeledScene],
    clicks_per_object: usize,
    stop_iou: f64,
    ks: &[usize],
    qs: &[u32],
) -> Result<(MetricTable, Vec<Trajectory>)> {
    let trajectories = scenes
        .par_iter()
        .map(|s| simulate_session(predictor, s, clicks_per_object * s.m(), stop_iou))
        .collect::<Result<Vec<_>>>()?;
    let curves: Vec<(Vec<CurvePoint>, usize)> = trajectories.iter().map(|t| (t.curve(), t.m)).collect();
    Ok((multi_object_curves(&curves, ks, qs), trajectories))
}
