//! Turning user clicks into decoder queries.
//!
//! Each click contributes a content vector (the backbone feature of its
//! nearest voxel) and a positional vector built from a Fourier encoding of
//! its location and a sinusoidal encoding of its timestamp.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::scene::VoxelGrid;
use crate::{Error, Result};

pub const NUM_BACKGROUND_QUERIES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Click {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// 0 is background, `m >= 1` is object `m`.
    pub region: usize,
    /// 1-based position in the click sequence.
    pub timestamp: usize,
}

impl Click {
    pub fn new(position: [f64; 3], region: usize, timestamp: usize) -> Self {
        Click {
            x: position[0],
            y: position[1],
            z: position[2],
            region,
            timestamp,
        }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Checks positions, region bounds and timestamp ordering.
pub fn validate_clicks(clicks: &[Click], max_region: usize) -> Result<()> {
    let mut last = 0;
    for (i, c) in clicks.iter().enumerate() {
        if c.position().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidClick(format!("click {i} has a non-finite position")));
        }
        if c.region > max_region {
            return Err(Error::InvalidRegion {
                region: c.region,
                max: max_region,
            });
        }
        if c.timestamp == 0 || c.timestamp <= last {
            return Err(Error::InvalidClick(format!(
                "click {i} timestamp {} is not after {last}",
                c.timestamp
            )));
        }
        last = c.timestamp;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuerySource {
    UserClick,
    LearnableBackground,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClickQuery {
    pub content: Vec<f64>,
    pub spatial: Vec<f64>,
    pub temporal: Vec<f64>,
    pub positional: Vec<f64>,
    pub region: usize,
    pub source: QuerySource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryConfig {
    pub spatial_weight: f64,
    pub temporal_weight: f64,
    /// Lowest Fourier frequency in cycles per meter.
    pub min_frequency: f64,
    /// Highest Fourier frequency in cycles per meter.
    pub max_frequency: f64,
    /// Apply a learned `D x D` map after the Fourier layout.
    pub projection: bool,
}

impl Default for QueryConfig {
    fn default() -> Self {
        QueryConfig {
            spatial_weight: 1.0,
            temporal_weight: 1.0,
            min_frequency: 1.0 / 8.0,
            max_frequency: 1.0 / 0.05,
            projection: false,
        }
    }
}

/// Fourier features of 3D positions: for each axis and band, the pair
/// `[sin(2π f x), cos(2π f x)]`, zero-padded to `dim`.
#[derive(Clone, Debug)]
pub struct FourierEncoder {
    pub dim: usize,
    pub frequencies: Vec<f64>,
}

impl FourierEncoder {
    pub fn new(dim: usize, min_frequency: f64, max_frequency: f64) -> Self {
        let bands = dim / 6;
        let frequencies = match bands {
            0 => Vec::new(),
            1 => vec![min_frequency],
            _ => {
                let ratio = (max_frequency / min_frequency).powf(1.0 / (bands - 1) as f64);
                (0..bands).map(|b| min_frequency * ratio.powi(b as i32)).collect()
            }
        };
        FourierEncoder { dim, frequencies }
    }

    pub fn from_config(dim: usize, config: &QueryConfig) -> Self {
        Self::new(dim, config.min_frequency, config.max_frequency)
    }

    pub fn bands(&self) -> usize {
        self.frequencies.len()
    }

    /// Index of the sin component for `axis` and `band`; cos follows it.
    pub fn slot(&self, axis: usize, band: usize) -> usize {
        (axis * self.bands() + band) * 2
    }

    pub fn encode(&self, p: [f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.encode_into(p, &mut out);
        out
    }

    fn encode_into(&self, p: [f64; 3], out: &mut [f64]) {
        for (a, &x) in p.iter().enumerate() {
            for (b, &f) in self.frequencies.iter().enumerate() {
                let (s, c) = (2.0 * PI * f * x).sin_cos();
                let i = self.slot(a, b);
                out[i] = s;
                out[i + 1] = c;
            }
        }
    }

    /// One encoded row per position.
    pub fn encode_rows(&self, positions: &[[f64; 3]]) -> Mat {
        let mut m = Mat::zeros((positions.len(), self.dim));
        for (mut row, p) in m.rows_mut().into_iter().zip(positions) {
            self.encode_into(*p, row.as_slice_mut().expect("standard layout"));
        }
        m
    }

    /// Upper bound on `|enc(p) - enc(q)| / |p - q|`.
    pub fn lipschitz_bound(&self) -> f64 {
        2.0 * PI * self.frequencies.iter().map(|f| f * f).sum::<f64>().sqrt()
    }
}

/// Sinusoidal timestamp encoding: `t[2i] = sin(k / 10000^(2i/D))`,
/// `t[2i+1] = cos(..)`.
pub fn temporal_encoding(k: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim.div_ceil(2) {
        let angle = k as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = angle.sin();
        if 2 * i + 1 < dim {
            out[2 * i + 1] = angle.cos();
        }
    }
    out
}

/// Feature row of the voxel nearest the click (ties: lowest index).
pub fn content_init(click: &Click, grid: &VoxelGrid, features: &Mat) -> Vec<f64> {
    let v = grid.nearest_voxel(click.position());
    features.row(v).to_vec()
}

/// Spatial, temporal and combined positional rows for user clicks, in click
/// order. The spatial rows are the raw Fourier layout; when the projection
/// flag is set the caller maps them through the learned matrix.
pub struct ClickEncodings {
    pub spatial: Mat,
    pub temporal: Mat,
}

pub fn encode_clicks(clicks: &[Click], grid: &VoxelGrid, encoder: &FourierEncoder) -> ClickEncodings {
    let local: Vec<[f64; 3]> = clicks.iter().map(|c| grid.to_local(c.position())).collect();
    let spatial = encoder.encode_rows(&local);
    let mut temporal = Mat::zeros((clicks.len(), encoder.dim));
    for (mut row, c) in temporal.rows_mut().into_iter().zip(clicks) {
        row.assign(&ndarray::Array1::from(temporal_encoding(c.timestamp, encoder.dim)));
    }
    ClickEncodings { spatial, temporal }
}

/// Builds user queries followed by the learnable background queries.
///
/// `background` holds the learned background contents (one row each) and
/// `projection` the optional learned Fourier projection.
pub fn build_queries(
    clicks: &[Click],
    max_region: usize,
    grid: &VoxelGrid,
    features: &Mat,
    config: &QueryConfig,
    background: &Mat,
    projection: Option<&Mat>,
) -> Result<Vec<ClickQuery>> {
    validate_clicks(clicks, max_region)?;
    let dim = features.ncols();
    let encoder = FourierEncoder::from_config(dim, config);
    let enc = encode_clicks(clicks, grid, &encoder);
    let spatial = match projection {
        Some(w) => enc.spatial.dot(w),
        None => enc.spatial,
    };
    let mut queries = Vec::with_capacity(clicks.len() + background.nrows());
    for (i, c) in clicks.iter().enumerate() {
        let s = spatial.row(i).to_vec();
        let t = enc.temporal.row(i).to_vec();
        let positional = s
            .iter()
            .zip(&t)
            .map(|(s, t)| config.spatial_weight * s + config.temporal_weight * t)
            .collect();
        queries.push(ClickQuery {
            content: content_init(c, grid, features),
            spatial: s,
            temporal: t,
            positional,
            region: c.region,
            source: QuerySource::UserClick,
        });
    }
    for row in background.rows() {
        queries.push(ClickQuery {
            content: row.to_vec(),
            spatial: vec![0.0; dim],
            temporal: vec![0.0; dim],
            positional: vec![0.0; dim],
            region: 0,
            source: QuerySource::LearnableBackground,
        });
    }
    Ok(queries)
}
