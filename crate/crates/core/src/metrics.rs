//! Interactive segmentation metrics and benchmark sample construction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scene::SceneSample;
use crate::Result;

pub const NOC_CAP: f64 = 20.0;
pub const IOU_CHECKPOINTS: [usize; 6] = [1, 2, 3, 5, 10, 15];
pub const NOC_TARGETS: [u32; 3] = [80, 85, 90];

/// IoU of the binary masks `label == object`; an empty union counts as 1.
pub fn iou(pred: &[usize], gt: &[usize], object: usize) -> f64 {
    assert_eq!(pred.len(), gt.len(), "label arrays must align");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p == object, g == object);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// One evaluation round: total clicks so far and the IoU reached.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub clicks: usize,
    pub iou: f64,
}

/// Smallest click count whose IoU reaches `q` percent, else `cap`.
pub fn noc_from_trajectory(curve: &[CurvePoint], q: u32, cap: f64) -> f64 {
    let target = q as f64 / 100.0;
    curve
        .iter()
        .find(|p| p.iou >= target)
        .map(|p| (p.clicks as f64).min(cap))
        .unwrap_or(cap)
}

/// IoU after `clicks` total clicks: the round with exactly that many, else
/// the last round with fewer. Zero when no round qualifies.
pub fn iou_at(curve: &[CurvePoint], clicks: usize) -> f64 {
    curve
        .iter()
        .take_while(|p| p.clicks <= clicks)
        .last()
        .map(|p| p.iou)
        .unwrap_or(0.0)
}

/// Multi-object IoU@k̄: reads the curve of mean IoU at `k * m` total clicks.
pub fn multi_iou_at(curve: &[CurvePoint], k: usize, m: usize) -> f64 {
    iou_at(curve, k * m)
}

/// Multi-object NoC@q̄: first total reaching mean IoU `q`, divided by `m`,
/// capped at 20.
pub fn multi_noc(curve: &[CurvePoint], q: u32, m: usize) -> f64 {
    let target = q as f64 / 100.0;
    curve
        .iter()
        .find(|p| p.iou >= target)
        .map(|p| (p.clicks as f64 / m as f64).min(NOC_CAP))
        .unwrap_or(NOC_CAP)
}

/// Averaged metric tables over a set of scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub scenes: usize,
    /// `(k, mean IoU@k̄)` for each checkpoint.
    pub iou_at: Vec<(usize, f64)>,
    /// `(q, mean NoC@q̄)` for each target.
    pub noc_at: Vec<(u32, f64)>,
}

impl MetricTable {
    pub fn iou(&self, k: usize) -> Option<f64> {
        self.iou_at.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    pub fn noc(&self, q: u32) -> Option<f64> {
        self.noc_at.iter().find(|(qq, _)| *qq == q).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut header: Vec<String> = self.iou_at.iter().map(|(k, _)| format!("IoU@{k}")).collect();
        header.extend(self.noc_at.iter().map(|(q, _)| format!("NoC@{q}")));
        let mut values: Vec<String> = self.iou_at.iter().map(|(_, v)| format!("{v:.4}")).collect();
        values.extend(self.noc_at.iter().map(|(_, v)| format!("{v:.4}")));
        format!("{}\n{}\n", header.join(","), values.join(","))
    }
}

/// Averages per-scene multi-object metrics. Each entry is a scene's curve
/// of mean IoU over total clicks together with its object count.
pub fn multi_object_curves(curves: &[(Vec<CurvePoint>, usize)], ks: &[usize], qs: &[u32]) -> MetricTable {
    let n = curves.len().max(1) as f64;
    let iou_at = ks
        .iter()
        .map(|&k| (k, curves.iter().map(|(c, m)| multi_iou_at(c, k, *m)).sum::<f64>() / n))
        .collect();
    let noc_at = qs
        .iter()
        .map(|&q| (q, curves.iter().map(|(c, m)| multi_noc(c, q, *m)).sum::<f64>() / n))
        .collect();
    MetricTable {
        scenes: curves.len(),
        iou_at,
        noc_at,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub object_ids: Vec<u32>,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// Objects whose centroid lies within this distance of the seed object
    /// count as nearby.
    pub radius: f64,
    pub max_objects: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            radius: 3.0,
            max_objects: 10,
        }
    }
}

/// Picks `M` nearby target objects per labeled scene. Scenes without
/// objects are skipped with a warning.
pub fn build_benchmark(
    dataset: &[SceneSample],
    seed: u64,
    config: &BenchmarkConfig,
) -> Result<(Vec<SceneSample>, Vec<ManifestEntry>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut manifest = Vec::new();
    for scene in dataset {
        let cloud = &scene.cloud;
        let ids: Vec<u32> = (1..=cloud.max_label())
            .filter(|&id| cloud.label_centroid(id).is_some())
            .collect();
        if ids.is_empty() {
            tracing::warn!(scene = %scene.id, "scene has no labeled objects, skipped");
            continue;
        }
        let anchor = ids[rng.random_range(0..ids.len())];
        let c0 = cloud.label_centroid(anchor).expect("anchor present");
        let mut nearby: Vec<u32> = ids
            .iter()
            .copied()
            .filter(|&id| {
                id != anchor && {
                    let c = cloud.label_centroid(id).expect("present");
                    (0..3).map(|a| (c[a] - c0[a]).powi(2)).sum::<f64>().sqrt() <= config.radius
                }
            })
            .collect();
        let m = rng.random_range(1..=(nearby.len() + 1).min(config.max_objects.max(1)));
        nearby.shuffle(&mut rng);
        let mut object_ids = vec![anchor];
        object_ids.extend_from_slice(&nearby[..m - 1]);
        samples.push(SceneSample::new(scene.id.clone(), cloud.clone(), object_ids.clone())?);
        manifest.push(ManifestEntry {
            scene_id: scene.id.clone(),
            object_ids,
            m,
            seed,
        });
    }
    Ok((samples, manifest))
}
