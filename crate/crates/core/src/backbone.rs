//! Sparse voxel U-Net.
//!
//! Each level runs submanifold 3x3x3 convolutions over occupied voxels
//! only. Downsampling halves keys (`floor(key / 2)`) and averages children
//! into the coarse cell before a 1x1 kernel; upsampling copies the coarse
//! feature to every child and concatenates the skip features before a
//! 3x3x3 kernel. A 1x1 head maps to `feat_dim` and a 1x1 projection maps
//! to the decoder width.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, NodeId, NormAxis, Rulebook};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scene::VoxelGrid;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Channel width per resolution level, finest first.
    pub widths: Vec<usize>,
    pub feat_dim: usize,
    /// Per-channel normalization over occupied voxels after each conv.
    pub norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: vec![32, 64, 128, 256],
            feat_dim: 96,
            norm: true,
        }
    }
}

/// Offsets of the 27-tap kernel in tap order.
pub fn kernel_offsets() -> Vec<[i32; 3]> {
    let mut out = Vec::with_capacity(27);
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

pub const CENTER_TAP: usize = 13;

/// Submanifold rulebook: output sites equal input sites.
pub fn submanifold_rules(keys: &[[i32; 3]], offsets: &[[i32; 3]]) -> Rulebook {
    let index: HashMap<[i32; 3], u32> = keys.iter().enumerate().map(|(i, k)| (*k, i as u32)).collect();
    let taps = offsets.len();
    let mut neighbors = vec![Rulebook::ABSENT; keys.len() * taps];
    for (v, k) in keys.iter().enumerate() {
        for (t, o) in offsets.iter().enumerate() {
            let nk = [k[0] + o[0], k[1] + o[1], k[2] + o[2]];
            if let Some(&i) = index.get(&nk) {
                neighbors[v * taps + t] = i;
            }
        }
    }
    Rulebook {
        n_out: keys.len(),
        n_in: keys.len(),
        taps,
        neighbors,
    }
}

/// Neighborhood tables for every resolution level of one scene.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    pub levels: Vec<Level>,
}

#[derive(Clone, Debug)]
pub struct Level {
    pub keys: Vec<[i32; 3]>,
    pub conv: Arc<Rulebook>,
    /// Index into the next coarser level for every site (absent at the
    /// coarsest level).
    pub parent: Option<Arc<Vec<usize>>>,
}

impl Hierarchy {
    pub fn build(keys: &[[i32; 3]], depth: usize) -> Self {
        let offsets = kernel_offsets();
        let mut levels = Vec::with_capacity(depth);
        let mut current = keys.to_vec();
        for l in 0..depth {
            let conv = Arc::new(submanifold_rules(&current, &offsets));
            let (parent, next) = if l + 1 < depth {
                let halved: Vec<[i32; 3]> = current.iter().map(|k| k.map(|c| c.div_euclid(2))).collect();
                let mut coarse = halved.clone();
                coarse.sort_unstable();
                coarse.dedup();
                let idx: HashMap<[i32; 3], usize> =
                    coarse.iter().enumerate().map(|(i, k)| (*k, i)).collect();
                let parent: Vec<usize> = halved.iter().map(|k| idx[k]).collect();
                (Some(Arc::new(parent)), coarse)
            } else {
                (None, Vec::new())
            };
            levels.push(Level {
                keys: current,
                conv,
                parent,
            });
            current = next;
        }
        Hierarchy { levels }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.keys.len()).collect()
    }
}

#[derive(Clone, Debug)]
struct NormParams {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct ConvUnit {
    weight: ParamId,
    bias: ParamId,
    norm: NormParams,
}

#[derive(Clone, Debug)]
struct LevelParams {
    /// Stem conv at level 0, 1x1 after pooling otherwise.
    entry: ConvUnit,
    res_a: ConvUnit,
    res_b: ConvUnit,
    /// Present for every level except the coarsest.
    up: Option<ConvUnit>,
}

/// Parameter handles of the U-Net inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub in_channels: usize,
    pub out_dim: usize,
    levels: Vec<LevelParams>,
    head_w: ParamId,
    head_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

fn conv_unit(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    out: usize,
    rng: &mut impl Rng,
) -> ConvUnit {
    ConvUnit {
        weight: store.kaiming(&format!("{name}.w"), (fan_in, out), rng),
        bias: store.zeros(&format!("{name}.b"), (1, out)),
        norm: NormParams {
            gamma: store.ones(&format!("{name}.norm.gamma"), (1, out)),
            beta: store.zeros(&format!("{name}.norm.beta"), (1, out)),
        },
    }
}

impl Backbone {
    pub fn new(
        config: BackboneConfig,
        in_channels: usize,
        out_dim: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let w = &config.widths;
        assert!(!w.is_empty(), "backbone needs at least one level");
        let mut levels = Vec::with_capacity(w.len());
        for (l, &width) in w.iter().enumerate() {
            let entry = if l == 0 {
                conv_unit(store, "backbone.stem", 27 * in_channels, width, rng)
            } else {
                conv_unit(store, &format!("backbone.down{l}"), w[l - 1], width, rng)
            };
            let res_a = conv_unit(store, &format!("backbone.level{l}.res_a"), 27 * width, width, rng);
            let res_b = conv_unit(store, &format!("backbone.level{l}.res_b"), 27 * width, width, rng);
            let up = (l + 1 < w.len())
                .then(|| conv_unit(store, &format!("backbone.up{l}"), 27 * (w[l + 1] + width), width, rng));
            levels.push(LevelParams {
                entry,
                res_a,
                res_b,
                up,
            });
        }
        let head_w = store.kaiming("backbone.head.w", (w[0], config.feat_dim), rng);
        let head_b = store.zeros("backbone.head.b", (1, config.feat_dim));
        let proj_w = store.xavier("backbone.proj.w", (config.feat_dim, out_dim), rng);
        let proj_b = store.zeros("backbone.proj.b", (1, out_dim));
        Backbone {
            config,
            in_channels,
            out_dim,
            levels,
            head_w,
            head_b,
            proj_w,
            proj_b,
        }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    fn apply_unit(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        unit: &ConvUnit,
        rules: Option<&Arc<Rulebook>>,
        relu: bool,
    ) -> NodeId {
        let w = g.param(store, unit.weight);
        let b = g.param(store, unit.bias);
        let mut y = match rules {
            Some(r) => g.sparse_conv(x, w, Some(b), r.clone()),
            None => g.linear(x, w, b),
        };
        if self.config.norm {
            let gamma = g.param(store, unit.norm.gamma);
            let beta = g.param(store, unit.norm.beta);
            y = g.norm(y, gamma, beta, NormAxis::Column);
        }
        if relu {
            y = g.relu(y);
        }
        y
    }

    /// Records the U-Net on `g`. Returns `(F_bb, F)`: the `feat_dim`-wide
    /// head output and its projection to the decoder width.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: NodeId,
        hierarchy: &Hierarchy,
    ) -> (NodeId, NodeId) {
        assert_eq!(hierarchy.levels.len(), self.depth(), "hierarchy depth mismatch");
        let mut skips = Vec::with_capacity(self.depth());
        let mut x = input;
        for (l, (params, level)) in self.levels.iter().zip(&hierarchy.levels).enumerate() {
            x = if l == 0 {
                self.apply_unit(g, store, x, &params.entry, Some(&level.conv), true)
            } else {
                let parent = hierarchy.levels[l - 1].parent.clone().expect("parent map");
                let pooled = g.segment_mean(x, parent, level.keys.len());
                self.apply_unit(g, store, pooled, &params.entry, None, true)
            };
            let h = self.apply_unit(g, store, x, &params.res_a, Some(&level.conv), true);
            let h = self.apply_unit(g, store, h, &params.res_b, Some(&level.conv), false);
            let sum = g.add(h, x);
            x = g.relu(sum);
            skips.push(x);
        }
        for l in (0..self.depth() - 1).rev() {
            let level = &hierarchy.levels[l];
            let parent = level.parent.clone().expect("parent map");
            let up = g.gather(x, parent);
            let cat = g.concat_cols(up, skips[l]);
            let unit = self.levels[l].up.as_ref().expect("up conv");
            x = self.apply_unit(g, store, cat, unit, Some(&level.conv), true);
        }
        let hw = g.param(store, self.head_w);
        let hb = g.param(store, self.head_b);
        let head = g.linear(x, hw, hb);
        let head = g.relu(head);
        let pw = g.param(store, self.proj_w);
        let pb = g.param(store, self.proj_b);
        let proj = g.linear(head, pw, pb);
        (head, proj)
    }

    /// Parameter ids touched by the backbone.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let mut unit = |u: &ConvUnit| ids.extend([u.weight, u.bias, u.norm.gamma, u.norm.beta]);
        for l in &self.levels {
            unit(&l.entry);
            unit(&l.res_a);
            unit(&l.res_b);
            if let Some(u) = &l.up {
                unit(u);
            }
        }
        ids.extend([self.head_w, self.head_b, self.proj_w, self.proj_b]);
        ids
    }
}

/// Per-voxel features at decoder width, row-aligned with the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Mat,
}

impl FeatureMap {
    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Recorded forward pass, consumed by [`backbone_backward`].
pub struct BackboneTape {
    graph: Graph,
    input: NodeId,
    output: NodeId,
    version: u64,
}

pub fn backbone_forward(
    grid: &VoxelGrid,
    backbone: &Backbone,
    store: &ParamStore,
) -> Result<(FeatureMap, BackboneTape)> {
    if grid.is_empty() {
        return Err(Error::EmptyScene);
    }
    if grid.channels() != backbone.in_channels {
        return Err(Error::invalid(format!(
            "grid has {} channels, backbone expects {}",
            grid.channels(),
            backbone.in_channels
        )));
    }
    let hierarchy = Hierarchy::build(&grid.keys, backbone.depth());
    let mut g = Graph::new();
    let input = g.input_with_grad(grid.network_input());
    let (_, output) = backbone.forward(&mut g, store, input, &hierarchy);
    let features = FeatureMap {
        data: g.value(output).clone(),
    };
    Ok((
        features,
        BackboneTape {
            graph: g,
            input,
            output,
            version: store.version(),
        },
    ))
}

/// Gradients of `Σ grad_out ⊙ F` with respect to every parameter and to
/// the input voxel features.
pub fn backbone_backward(
    tape: &BackboneTape,
    grad_out: &Mat,
    store: &ParamStore,
) -> Result<(ParamGrads, Mat)> {
    if tape.version != store.version() {
        return Err(Error::InvalidState(
            "parameters changed since the forward pass".into(),
        ));
    }
    if grad_out.dim() != tape.graph.shape(tape.output) {
        return Err(Error::invalid("grad_out shape differs from backbone output"));
    }
    let grads = tape.graph.backward_seeded(&[(tape.output, grad_out.clone())]);
    let input_grad = grads
        .wrt(tape.input)
        .cloned()
        .unwrap_or_else(|| Mat::zeros(tape.graph.shape(tape.input)));
    Ok((grads.params(&tape.graph, store), input_grad))
}
