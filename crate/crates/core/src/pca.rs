//! Principal component projection of per-voxel features to RGB.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autograd::Mat;

/// Leading principal axes of a feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit axes, one per row, by decreasing variance. The largest-magnitude
    /// entry of each axis is positive.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl Pca {
    /// Fits `k` components (fewer when the width is smaller).
    pub fn fit(x: &Mat, k: usize) -> Self {
        let (n, d) = x.dim();
        let mean: Vec<f64> = (0..d)
            .map(|j| if n == 0 { 0.0 } else { x.column(j).sum() / n as f64 })
            .collect();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for row in x.rows() {
            for a in 0..d {
                let da = row[a] - mean[a];
                for b in a..d {
                    cov[(a, b)] += da * (row[b] - mean[b]);
                }
            }
        }
        let denom = n.max(1) as f64;
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / denom;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let mut components = Vec::new();
        let mut variances = Vec::new();
        for &i in order.iter().take(k) {
            let mut axis: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if lead < 0.0 {
                axis.iter_mut().for_each(|v| *v = -*v);
            }
            components.push(axis);
            variances.push(eig.eigenvalues[i].max(0.0));
        }
        Pca {
            mean,
            components,
            variances,
        }
    }

    /// Coordinates of every row on the fitted axes, `N x k`.
    pub fn project(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros((x.nrows(), self.components.len()));
        for (i, row) in x.rows().into_iter().enumerate() {
            for (c, axis) in self.components.iter().enumerate() {
                out[[i, c]] = row.iter().zip(&self.mean).zip(axis).map(|((v, m), a)| (v - m) * a).sum();
            }
        }
        out
    }
}

/// Maps the first three principal coordinates to RGB in `[0, 1]`, each
/// channel min-max scaled. A channel without spread is mid-gray, so
/// constant features give a single color.
pub fn pca_colors(x: &Mat) -> Vec<[f64; 3]> {
    const FLAT: f64 = 1e-9;
    let pca = Pca::fit(x, 3);
    let proj = pca.project(x);
    let mut colors = vec![[0.5; 3]; x.nrows()];
    for c in 0..proj.ncols() {
        let col = proj.column(c);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= FLAT {
            continue;
        }
        for (i, &v) in col.iter().enumerate() {
            colors[i][c] = (v - lo) / (hi - lo);
        }
    }
    colors
}
