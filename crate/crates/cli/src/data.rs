//! Dataset loading shared by the subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clickseg::scene::{generate_synthetic_scene, load_scene, GeneratorSpec, PointCloud, SceneFormat, SceneSample};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSet {
    pub count: usize,
    /// Scene `i` uses generator seed `seed + i`.
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub room_size: [f64; 2],
}

impl Default for SyntheticSet {
    fn default() -> Self {
        SyntheticSet {
            count: 10,
            seed: 0,
            min_objects: 2,
            max_objects: 5,
            room_size: [2.5, 2.5],
        }
    }
}

impl SyntheticSet {
    pub fn generate(&self) -> Result<Vec<SceneSample>> {
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            bail!(UsageError(format!(
                "object range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        let span = (self.max_objects - self.min_objects + 1) as u64;
        (0..self.count)
            .map(|i| {
                let seed = self.seed + i as u64;
                let spec = GeneratorSpec {
                    seed,
                    object_count: self.min_objects + (seed % span) as usize,
                    room_size: self.room_size,
                    ..Default::default()
                };
                Ok(generate_synthetic_scene(&spec)?)
            })
            .collect()
    }
}

/// Where scenes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataSpec {
    Synthetic(SyntheticSet),
    /// Every `.ply` / `.json` file in a directory; all labeled objects are
    /// targets.
    Dir { path: PathBuf },
}

impl DataSpec {
    pub fn load(&self) -> Result<Vec<SceneSample>> {
        match self {
            DataSpec::Synthetic(s) => s.generate(),
            DataSpec::Dir { path } => load_dir(path),
        }
    }
}

/// Marks errors in how a command was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let format = SceneFormat::from_path(path)?;
    load_scene(path, format).with_context(|| format!("reading {}", path.display()))
}

/// Object ids present in the labels, ascending.
pub fn object_ids(cloud: &PointCloud) -> Vec<u32> {
    let mut ids: Vec<u32> = cloud.labels.iter().flatten().copied().filter(|&l| l > 0).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

pub fn sample_from_file(path: &Path, targets: Option<Vec<u32>>) -> Result<SceneSample> {
    let cloud = load_cloud(path)?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("scene")
        .to_string();
    let targets = targets.unwrap_or_else(|| object_ids(&cloud));
    Ok(SceneSample::new(id, cloud, targets)?)
}

pub fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let stem_ok = p.file_stem().and_then(|s| s.to_str()) != Some("manifest");
            let ext = p.extension().and_then(|e| e.to_str());
            stem_ok && matches!(ext, Some("ply") | Some("json"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_dir(dir: &Path) -> Result<Vec<SceneSample>> {
    let files = scene_files(dir)?;
    if files.is_empty() {
        bail!(clickseg::Error::InvalidInput(format!("no scenes in {}", dir.display())));
    }
    files.iter().map(|p| sample_from_file(p, None)).collect()
}

/// Finds `{id}.ply` or `{id}.json` in `dir`.
pub fn find_scene(dir: &Path, id: &str) -> Result<PathBuf> {
    for ext in ["ply", "json"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    bail!(clickseg::Error::NotFound(format!("scene {id} in {}", dir.display())))
}

pub fn parse_targets(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| UsageError(format!("invalid object id {t:?}")).into())
        })
        .collect()
}
