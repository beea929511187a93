use std::collections::HashMap;

use super::PointCloud;
use crate::autograd::Mat;
use crate::{Error, Result};

pub const DEFAULT_VOXEL_SIZE: f64 = 0.05;

// Absorbs roundoff when a coordinate sits exactly on a cell boundary.
const KEY_EPS: f64 = 1e-9;

/// Sparse voxelization of a point cloud.
///
/// Keys are `floor(p / size)` shifted by the lattice cell of the scene's
/// minimum corner, so they are non-negative and the partition matches the
/// global lattice. Voxels are ordered by key.
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    /// World position of key `(0, 0, 0)`'s lower corner.
    pub origin: [f64; 3],
    pub keys: Vec<[i32; 3]>,
    /// `N' x C`, mean of member point features.
    pub features: Mat,
    pub point_to_voxel: Vec<usize>,
    pub counts: Vec<usize>,
    index: HashMap<[i32; 3], usize>,
}

impl VoxelGrid {
    /// Builds a grid directly from keys and per-voxel features. Used for
    /// synthetic backbone inputs; `point_to_voxel` is the identity.
    pub fn from_keys(keys: Vec<[i32; 3]>, features: Mat, voxel_size: f64) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::EmptyScene);
        }
        if features.nrows() != keys.len() {
            return Err(Error::invalid("feature rows differ from key count"));
        }
        let index: HashMap<_, _> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        if index.len() != keys.len() {
            return Err(Error::invalid("duplicate voxel keys"));
        }
        let n = keys.len();
        Ok(VoxelGrid {
            voxel_size,
            origin: [0.0; 3],
            keys,
            features,
            point_to_voxel: (0..n).collect(),
            counts: vec![1; n],
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    pub fn lookup(&self, key: [i32; 3]) -> Option<usize> {
        self.index.get(&key).copied()
    }

    /// World coordinates of a voxel center.
    pub fn center(&self, v: usize) -> [f64; 3] {
        let k = self.keys[v];
        std::array::from_fn(|a| self.origin[a] + (k[a] as f64 + 0.5) * self.voxel_size)
    }

    pub fn centers(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|v| self.center(v)).collect()
    }

    /// Voxel center relative to the grid origin.
    pub fn local_center(&self, v: usize) -> [f64; 3] {
        let k = self.keys[v];
        k.map(|c| (c as f64 + 0.5) * self.voxel_size)
    }

    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| p[a] - self.origin[a])
    }

    /// Backbone input: voxel features with the xyz channels expressed
    /// relative to the grid origin.
    pub fn network_input(&self) -> Mat {
        let mut x = self.features.clone();
        if x.ncols() >= 3 {
            for mut row in x.rows_mut() {
                for a in 0..3 {
                    row[a] -= self.origin[a];
                }
            }
        }
        x
    }

    /// Index of the voxel whose center is nearest `p` (ties: lowest index).
    pub fn nearest_voxel(&self, p: [f64; 3]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for v in 0..self.len() {
            let c = self.center(v);
            let d = (0..3).map(|a| (c[a] - p[a]).powi(2)).sum::<f64>();
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        best
    }
}

pub fn voxelize(cloud: &PointCloud, voxel_size: f64) -> Result<VoxelGrid> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::invalid(format!("voxel size {voxel_size} must be positive")));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyScene);
    }
    if let Some(i) = cloud.points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
    }
    let lattice = |v: f64| (v / voxel_size + KEY_EPS).floor() as i64;
    let mut min_cell = [i64::MAX; 3];
    for p in &cloud.points {
        for a in 0..3 {
            min_cell[a] = min_cell[a].min(lattice(p[a]));
        }
    }
    let origin = min_cell.map(|c| c as f64 * voxel_size);

    let raw_keys: Vec<[i32; 3]> = cloud
        .points
        .iter()
        .map(|p| std::array::from_fn(|a| (lattice(p[a]) - min_cell[a]) as i32))
        .collect();
    let mut keys = raw_keys.clone();
    keys.sort_unstable();
    keys.dedup();
    let index: HashMap<[i32; 3], usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();

    let channels = cloud.channels();
    let mut features = Mat::zeros((keys.len(), channels));
    let mut counts = vec![0usize; keys.len()];
    let point_to_voxel: Vec<usize> = raw_keys.iter().map(|k| index[k]).collect();
    for (i, &v) in point_to_voxel.iter().enumerate() {
        let f = cloud.feature(i);
        for (c, x) in f.into_iter().enumerate() {
            features[[v, c]] += x;
        }
        counts[v] += 1;
    }
    for (mut row, &n) in features.rows_mut().into_iter().zip(&counts) {
        row /= n as f64;
    }

    Ok(VoxelGrid {
        voxel_size,
        origin,
        keys,
        features,
        point_to_voxel,
        counts,
        index,
    })
}

pub fn devoxelize_labels(grid: &VoxelGrid, voxel_labels: &[usize]) -> Result<Vec<usize>> {
    if voxel_labels.len() != grid.len() {
        return Err(Error::invalid(format!(
            "{} voxel labels for {} voxels",
            voxel_labels.len(),
            grid.len()
        )));
    }
    Ok(grid.point_to_voxel.iter().map(|&v| voxel_labels[v]).collect())
}

/// Per-voxel majority of per-point labels; ties go to the smaller label.
pub fn majority_labels(grid: &VoxelGrid, point_labels: &[usize]) -> Result<Vec<usize>> {
    if point_labels.len() != grid.point_to_voxel.len() {
        return Err(Error::invalid("label count differs from point count"));
    }
    let n_labels = point_labels.iter().copied().max().unwrap_or(0) + 1;
    let mut votes = vec![0u32; grid.len() * n_labels];
    for (&v, &l) in grid.point_to_voxel.iter().zip(point_labels) {
        votes[v * n_labels + l] += 1;
    }
    Ok(votes
        .chunks(n_labels)
        .map(|row| {
            let mut best = 0;
            for (l, &c) in row.iter().enumerate() {
                if c > row[best] {
                    best = l;
                }
            }
            best
        })
        .collect())
}
