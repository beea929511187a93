//! Query fusion: per-click mask logits, per-region aggregation and the
//! holistic softmax labeling in which regions compete for every voxel.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows_inplace, Graph, Mat, NodeId, Reduce};
use crate::params::{ParamId, ParamStore};
use crate::registry::Registry;
use crate::{Error, Result};

/// Shared mask MLP `D -> D -> D -> D` with ReLU between layers.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl MaskHead {
    pub fn new(dim: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let layers = (0..3)
            .map(|i| {
                let w = if i < 2 {
                    store.kaiming(&format!("mask_head.l{i}.w"), (dim, dim), rng)
                } else {
                    store.xavier(&format!("mask_head.l{i}.w"), (dim, dim), rng)
                };
                (w, store.zeros(&format!("mask_head.l{i}.b"), (1, dim)))
            })
            .collect();
        MaskHead { layers }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: NodeId) -> NodeId {
        let mut x = q;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let w = g.param(store, w);
            let b = g.param(store, b);
            x = g.linear(x, w, b);
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        x
    }
}

/// `C = F_c · f_mask(Q_c)ᵀ`, shape `N' x K`.
pub fn per_click_logits_node(
    g: &mut Graph,
    store: &ParamStore,
    head: &MaskHead,
    f_content: NodeId,
    q_content: NodeId,
) -> NodeId {
    let m = head.forward(g, store, q_content);
    g.matmul_t(f_content, m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerClickLogits {
    /// `N' x K`
    pub logits: Mat,
    /// Region of each query column.
    pub regions: Vec<usize>,
}

pub fn per_click_logits(
    f_content: &Mat,
    q_content: &Mat,
    regions: &[usize],
    head: &MaskHead,
    store: &ParamStore,
) -> PerClickLogits {
    assert_eq!(q_content.nrows(), regions.len(), "one region per query");
    let mut g = Graph::inference();
    let f = g.input(f_content.clone());
    let q = g.input(q_content.clone());
    let c = per_click_logits_node(&mut g, store, head, f, q);
    PerClickLogits {
        logits: g.value(c).clone(),
        regions: regions.to_vec(),
    }
}

fn check_regions(regions: &[usize], n_regions: usize) -> Result<()> {
    let mut seen = vec![false; n_regions];
    for &r in regions {
        if r >= n_regions {
            return Err(Error::InvalidRegion {
                region: r,
                max: n_regions.saturating_sub(1),
            });
        }
        seen[r] = true;
    }
    match seen.iter().position(|s| !s) {
        Some(r) => Err(Error::MissingRegion(r)),
        None => Ok(()),
    }
}

/// Per-region reduction of per-click logits on the tape.
pub fn fuse_regions_node(
    g: &mut Graph,
    logits: NodeId,
    regions: &[usize],
    n_regions: usize,
    mode: Reduce,
) -> Result<NodeId> {
    check_regions(regions, n_regions)?;
    Ok(g.group_cols(logits, Arc::new(regions.to_vec()), n_regions, mode))
}

/// `R[v][r]` = max or mean over the queries of region `r` of `C[v][q]`.
pub fn fuse_regions(logits: &PerClickLogits, n_regions: usize, mode: Reduce) -> Result<Mat> {
    let mut g = Graph::inference();
    let c = g.input(logits.logits.clone());
    let r = fuse_regions_node(&mut g, c, &logits.regions, n_regions, mode)?;
    Ok(g.value(r).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HolisticMask {
    /// `N' x (M + 1)` region logits.
    pub logits: Mat,
    pub probabilities: Mat,
    /// Per-voxel region, ties resolved toward the smaller id.
    pub labels: Vec<usize>,
}

pub fn argmax_rows(m: &Mat) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn holistic_mask(region_logits: Mat) -> HolisticMask {
    let mut probabilities = region_logits.clone();
    softmax_rows_inplace(&mut probabilities);
    let labels = argmax_rows(&region_logits);
    HolisticMask {
        logits: region_logits,
        probabilities,
        labels,
    }
}

/// Reduces rows sharing a region into one row per region, ordered by
/// ascending region id. Returns the new rows' regions.
pub fn fuse_rows_node(g: &mut Graph, x: NodeId, regions: &[usize], mode: Reduce) -> (NodeId, Vec<usize>) {
    let mut present: Vec<usize> = regions.to_vec();
    present.sort_unstable();
    present.dedup();
    let groups: Vec<usize> = regions
        .iter()
        .map(|r| present.binary_search(r).expect("present region"))
        .collect();
    let t = g.transpose(x);
    let f = g.group_cols(t, Arc::new(groups), present.len(), mode);
    (g.transpose(f), present)
}

/// Merges query contents and positionals that share a region into one
/// query per region (ascending region id).
pub fn early_fuse_queries(content: &Mat, positional: &Mat, regions: &[usize], mode: Reduce) -> (Mat, Mat, Vec<usize>) {
    let mut g = Graph::inference();
    let c = g.input(content.clone());
    let p = g.input(positional.clone());
    let (fc, present) = fuse_rows_node(&mut g, c, regions, mode);
    let (fp, _) = fuse_rows_node(&mut g, p, regions, mode);
    (g.value(fc).clone(), g.value(fp).clone(), present)
}

/// Query streams of one decoding call, before the decoder runs.
#[derive(Clone, Debug)]
pub struct QueryNodes {
    pub content: NodeId,
    pub positional: NodeId,
    pub regions: Vec<usize>,
}

/// How click queries are combined into region predictions.
pub trait FusionStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Rewrites user-click queries before decoding.
    fn prepare_queries(&self, g: &mut Graph, queries: QueryNodes) -> QueryNodes;

    /// Per-region logits from per-click logits.
    fn fuse(&self, g: &mut Graph, per_click: NodeId, regions: &[usize], n_regions: usize) -> Result<NodeId>;
}

pub struct LateFusion(pub Reduce);

pub struct EarlyFusion(pub Reduce);

impl FusionStrategy for LateFusion {
    fn name(&self) -> &'static str {
        match self.0 {
            Reduce::Max => "late-max",
            Reduce::Mean => "late-mean",
        }
    }

    fn prepare_queries(&self, _g: &mut Graph, queries: QueryNodes) -> QueryNodes {
        queries
    }

    fn fuse(&self, g: &mut Graph, per_click: NodeId, regions: &[usize], n_regions: usize) -> Result<NodeId> {
        fuse_regions_node(g, per_click, regions, n_regions, self.0)
    }
}

impl FusionStrategy for EarlyFusion {
    fn name(&self) -> &'static str {
        match self.0 {
            Reduce::Max => "early-max",
            Reduce::Mean => "early-mean",
        }
    }

    fn prepare_queries(&self, g: &mut Graph, queries: QueryNodes) -> QueryNodes {
        if queries.regions.is_empty() {
            return queries;
        }
        let (content, regions) = fuse_rows_node(g, queries.content, &queries.regions, self.0);
        let (positional, _) = fuse_rows_node(g, queries.positional, &queries.regions, self.0);
        QueryNodes {
            content,
            positional,
            regions,
        }
    }

    // The user background query still competes with the learnable ones.
    fn fuse(&self, g: &mut Graph, per_click: NodeId, regions: &[usize], n_regions: usize) -> Result<NodeId> {
        fuse_regions_node(g, per_click, regions, n_regions, self.0)
    }
}

pub const DEFAULT_FUSION: &str = "late-max";

pub fn fusion_registry() -> Registry<dyn FusionStrategy> {
    let mut r: Registry<dyn FusionStrategy> = Registry::new();
    for s in [
        Arc::new(LateFusion(Reduce::Max)) as Arc<dyn FusionStrategy>,
        Arc::new(LateFusion(Reduce::Mean)),
        Arc::new(EarlyFusion(Reduce::Max)),
        Arc::new(EarlyFusion(Reduce::Mean)),
    ] {
        r.register(s.name(), s);
    }
    r
}

/// Fusion configuration as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub strategy: String,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            strategy: DEFAULT_FUSION.to_string(),
        }
    }
}
