//! Point clouds, voxel grids, scene files and synthetic scenes.

mod ply;
mod synth;
mod voxel;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use ply::{read_ply, write_ply, PlyEncoding};
pub use synth::{generate_synthetic_scene, GeneratorSpec};
pub use voxel::{devoxelize_labels, majority_labels, voxelize, VoxelGrid, DEFAULT_VOXEL_SIZE};

/// A scanned scene. Coordinates are meters; colors are in `[0, 1]`;
/// label `0` is background and `m >= 1` is object `m`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colors: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud {
            points,
            colors: None,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Feature width: xyz, plus rgb when colors are present.
    pub fn channels(&self) -> usize {
        if self.colors.is_some() {
            6
        } else {
            3
        }
    }

    /// Per-point feature row `[x, y, z, (r, g, b)]`.
    pub fn feature(&self, i: usize) -> Vec<f64> {
        let mut f = self.points[i].to_vec();
        if let Some(c) = &self.colors {
            f.extend_from_slice(&c[i]);
        }
        f
    }

    /// Largest ground-truth id, `0` when unlabeled.
    pub fn max_label(&self) -> u32 {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().copied().max())
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyScene);
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(c) = &self.colors {
            if c.len() != self.points.len() {
                return Err(Error::invalid("colors length differs from points"));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(Error::invalid("labels length differs from points"));
            }
            let max = labels.iter().copied().max().unwrap_or(0) as usize;
            let mut seen = vec![false; max + 1];
            for &l in labels {
                seen[l as usize] = true;
            }
            if let Some(missing) = (1..=max).find(|&m| !seen[m]) {
                return Err(Error::invalid(format!(
                    "label ids are not contiguous: {missing} missing below {max}"
                )));
            }
        }
        Ok(())
    }

    /// Centroid of the points carrying `label`.
    pub fn label_centroid(&self, label: u32) -> Option<[f64; 3]> {
        let labels = self.labels.as_ref()?;
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for (p, &l) in self.points.iter().zip(labels) {
            if l == label {
                for a in 0..3 {
                    sum[a] += p[a];
                }
                n += 1;
            }
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }
}

/// A scene plus the ground-truth objects a user wants to segment.
/// Region `m` (1-based) in a session corresponds to `target_object_ids[m - 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub id: String,
    pub cloud: PointCloud,
    pub target_object_ids: Vec<u32>,
}

impl SceneSample {
    pub fn new(id: impl Into<String>, cloud: PointCloud, target_object_ids: Vec<u32>) -> Result<Self> {
        let sample = SceneSample {
            id: id.into(),
            cloud,
            target_object_ids,
        };
        sample.validate()?;
        Ok(sample)
    }

    /// Number of target objects `M`.
    pub fn m(&self) -> usize {
        self.target_object_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.cloud.validate()?;
        let labels = self
            .cloud
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("scene sample requires labels"))?;
        if self.target_object_ids.is_empty() {
            return Err(Error::invalid("scene sample needs at least one target"));
        }
        for &id in &self.target_object_ids {
            if id == 0 || !labels.contains(&id) {
                return Err(Error::invalid(format!("target id {id} absent from labels")));
            }
        }
        Ok(())
    }

    /// Per-point region index in `0..=M`: targets map to their 1-based
    /// position, everything else to background.
    pub fn region_labels(&self) -> Vec<usize> {
        let max = self.cloud.max_label() as usize;
        let mut lut = vec![0usize; max + 1];
        for (m, &id) in self.target_object_ids.iter().enumerate() {
            lut[id as usize] = m + 1;
        }
        self.cloud
            .labels
            .as_ref()
            .map(|l| l.iter().map(|&x| lut[x as usize]).collect())
            .unwrap_or_else(|| vec![0; self.cloud.len()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneFormat {
    Ply,
    PlyBinary,
    Json,
}

impl SceneFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("ply") => Ok(SceneFormat::Ply),
            Some("json") => Ok(SceneFormat::Json),
            other => Err(Error::invalid(format!("unknown scene extension {other:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SceneJson {
    points: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    colors: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<u32>>,
}

pub fn parse_scene(bytes: &[u8], format: SceneFormat) -> Result<PointCloud> {
    let cloud = match format {
        SceneFormat::Ply | SceneFormat::PlyBinary => read_ply(bytes)?,
        SceneFormat::Json => {
            let raw: SceneJson = serde_json::from_slice(bytes).map_err(|e| {
                Error::parse(byte_offset(bytes, e.line(), e.column()), e.to_string())
            })?;
            PointCloud {
                points: raw.points,
                colors: raw.colors,
                labels: raw.labels,
            }
        }
    };
    cloud.validate()?;
    Ok(cloud)
}

pub fn load_scene(path: impl AsRef<Path>, format: SceneFormat) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    parse_scene(&bytes, format)
}

pub fn encode_scene(cloud: &PointCloud, format: SceneFormat) -> Result<Vec<u8>> {
    Ok(match format {
        SceneFormat::Ply => write_ply(cloud, PlyEncoding::Ascii),
        SceneFormat::PlyBinary => write_ply(cloud, PlyEncoding::BinaryLittleEndian),
        SceneFormat::Json => serde_json::to_vec(&SceneJson {
            points: cloud.points.clone(),
            colors: cloud.colors.clone(),
            labels: cloud.labels.clone(),
        })?,
    })
}

pub fn save_scene(cloud: &PointCloud, path: impl AsRef<Path>, format: SceneFormat) -> Result<()> {
    std::fs::write(path, encode_scene(cloud, format)?)?;
    Ok(())
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in bytes.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    bytes.len()
}
