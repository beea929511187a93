//! The full segmentation model: backbone features computed once per scene,
//! then a decoder pass per click round.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, NodeId};
use crate::backbone::{Backbone, BackboneConfig, FeatureMap, Hierarchy};
use crate::clickquery::{encode_clicks, validate_clicks, Click, FourierEncoder, QueryConfig, NUM_BACKGROUND_QUERIES};
use crate::decoder::{Decoder, DecoderConfig, LayerPrediction, Streams};
use crate::fusion::{
    argmax_rows, fusion_registry, holistic_mask, per_click_logits_node, FusionStrategy, HolisticMask, MaskHead,
    QueryNodes, DEFAULT_FUSION,
};
use crate::params::{ParamId, ParamStore};
use crate::scene::{VoxelGrid, DEFAULT_VOXEL_SIZE};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub voxel_size: f64,
    /// Input channels per voxel: 3 (xyz) or 6 (xyz + rgb).
    pub in_channels: usize,
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub query: QueryConfig,
    pub fusion: String,
    pub background_queries: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            voxel_size: DEFAULT_VOXEL_SIZE,
            in_channels: 6,
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            query: QueryConfig::default(),
            fusion: DEFAULT_FUSION.to_string(),
            background_queries: NUM_BACKGROUND_QUERIES,
        }
    }
}

impl ModelConfig {
    /// Desk-scale model for synthetic scenes, on an 8 cm grid.
    pub fn tiny() -> Self {
        ModelConfig {
            voxel_size: 0.08,
            backbone: BackboneConfig {
                widths: vec![16, 32, 64],
                feat_dim: 32,
                norm: true,
            },
            decoder: DecoderConfig {
                dim: 36,
                heads: 4,
                ffn_dim: 128,
                layers: 3,
                ..DecoderConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.decoder.dim
    }
}

/// Click-independent per-scene data.
#[derive(Clone, Debug)]
pub struct SceneContext {
    pub grid: Arc<VoxelGrid>,
    pub hierarchy: Arc<Hierarchy>,
    pub input: Arc<Mat>,
    /// Raw Fourier encoding of voxel centers, `N' x D`.
    pub positional: Arc<Mat>,
}

/// A scene with its backbone features.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub context: SceneContext,
    pub features: FeatureMap,
}

/// Nodes recorded by one decoding pass.
#[derive(Clone, Debug)]
pub struct DecodeNodes {
    /// Region logits after every decoder layer (`N' x R`).
    pub region_logits: Vec<NodeId>,
    pub per_click: Vec<NodeId>,
    /// Region id of each logit column.
    pub regions: Vec<usize>,
    /// Compact region index of each decoder query.
    pub query_regions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// Per-voxel region ids.
    pub labels: Vec<usize>,
    /// Softmax over the regions in `regions`.
    pub mask: HolisticMask,
    pub regions: Vec<usize>,
    /// Final per-click logits and their query regions (region ids).
    pub per_click: Mat,
    pub query_regions: Vec<usize>,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub decoder: Decoder,
    pub mask_head: MaskHead,
    pub background: ParamId,
    pub projection: Option<ParamId>,
    pub encoder: FourierEncoder,
    fusion: Arc<dyn FusionStrategy>,
    backbone_calls: AtomicUsize,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.store.scalar_count())
            .finish()
    }
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            store: self.store.clone(),
            backbone: self.backbone.clone(),
            decoder: self.decoder.clone(),
            mask_head: self.mask_head.clone(),
            background: self.background,
            projection: self.projection,
            encoder: self.encoder.clone(),
            fusion: self.fusion.clone(),
            backbone_calls: AtomicUsize::new(0),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.in_channels != 3 && config.in_channels != 6 {
            return Err(Error::invalid("in_channels must be 3 or 6"));
        }
        let dc = &config.decoder;
        if dc.heads == 0 || dc.dim % dc.heads != 0 {
            return Err(Error::invalid(format!("{} heads do not divide width {}", dc.heads, dc.dim)));
        }
        if dc.dim < 6 {
            return Err(Error::invalid("decoder width must be at least 6"));
        }
        if config.backbone.widths.is_empty() {
            return Err(Error::invalid("backbone needs at least one level"));
        }
        if config.background_queries == 0 {
            return Err(Error::invalid("at least one background query is required"));
        }
        let fusion = fusion_registry().get(&config.fusion)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim();
        let backbone = Backbone::new(config.backbone.clone(), config.in_channels, d, &mut store, &mut rng);
        let decoder = Decoder::new(config.decoder.clone(), &mut store, &mut rng);
        let mask_head = MaskHead::new(d, &mut store, &mut rng);
        let background = store.normal(
            "queries.background",
            (config.background_queries, d),
            1.0 / (d as f64).sqrt(),
            &mut rng,
        );
        let projection = config
            .query
            .projection
            .then(|| store.xavier("queries.fourier_projection", (d, d), &mut rng));
        let encoder = FourierEncoder::from_config(d, &config.query);
        Ok(Model {
            config,
            store,
            backbone,
            decoder,
            mask_head,
            background,
            projection,
            encoder,
            fusion,
            backbone_calls: AtomicUsize::new(0),
        })
    }

    pub fn fusion(&self) -> &dyn FusionStrategy {
        self.fusion.as_ref()
    }

    /// Number of backbone evaluations since construction.
    pub fn backbone_calls(&self) -> usize {
        self.backbone_calls.load(Ordering::Relaxed)
    }

    pub fn context(&self, grid: Arc<VoxelGrid>) -> Result<SceneContext> {
        if grid.is_empty() {
            return Err(Error::EmptyScene);
        }
        if grid.channels() != self.config.in_channels {
            return Err(Error::invalid(format!(
                "scene has {} channels, model expects {}",
                grid.channels(),
                self.config.in_channels
            )));
        }
        let hierarchy = Hierarchy::build(&grid.keys, self.backbone.depth());
        let local: Vec<[f64; 3]> = (0..grid.len()).map(|v| grid.local_center(v)).collect();
        let positional = self.encoder.encode_rows(&local);
        Ok(SceneContext {
            input: Arc::new(grid.network_input()),
            grid,
            hierarchy: Arc::new(hierarchy),
            positional: Arc::new(positional),
        })
    }

    /// Runs the backbone once for the scene.
    pub fn prepare(&self, grid: Arc<VoxelGrid>) -> Result<PreparedScene> {
        let context = self.context(grid)?;
        let features = self.features(&context);
        Ok(PreparedScene { context, features })
    }

    pub fn features(&self, ctx: &SceneContext) -> FeatureMap {
        self.backbone_calls.fetch_add(1, Ordering::Relaxed);
        let mut g = Graph::inference();
        let x = g.input((*ctx.input).clone());
        let (_, f) = self.backbone.forward(&mut g, &self.store, x, &ctx.hierarchy);
        FeatureMap {
            data: g.value(f).clone(),
        }
    }

    /// Records backbone plus decoder on `g` for training.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        ctx: &SceneContext,
        clicks: &[Click],
        max_region: usize,
    ) -> Result<DecodeNodes> {
        let x = g.input((*ctx.input).clone());
        let (_, f) = self.backbone.forward(g, &self.store, x, &ctx.hierarchy);
        self.decode_nodes(g, ctx, f, clicks, max_region)
    }

    /// Records the decoder for the click sequence on top of feature node `f`.
    pub fn decode_nodes(
        &self,
        g: &mut Graph,
        ctx: &SceneContext,
        f: NodeId,
        clicks: &[Click],
        max_region: usize,
    ) -> Result<DecodeNodes> {
        validate_clicks(clicks, max_region)?;
        let grid = &ctx.grid;
        let d = self.config.dim();
        let qc = &self.config.query;

        let mut regions: Vec<usize> = clicks.iter().map(|c| c.region).collect();
        regions.push(0);
        regions.sort_unstable();
        regions.dedup();
        let compact = |r: usize| regions.binary_search(&r).expect("region present");

        let bg = g.param(&self.store, self.background);
        let n_bg = self.config.background_queries;
        let spatial_proj = self.projection.map(|p| g.param(&self.store, p));

        let raw_fp = g.input((*ctx.positional).clone());
        let f_pos = match spatial_proj {
            Some(w) => g.matmul(raw_fp, w),
            None => raw_fp,
        };

        let (q_content, q_pos, query_regions) = if clicks.is_empty() {
            (bg, g.input(Mat::zeros((n_bg, d))), vec![0; n_bg])
        } else {
            let voxels: Vec<usize> = clicks.iter().map(|c| grid.nearest_voxel(c.position())).collect();
            let content = g.gather(f, Arc::new(voxels));
            let enc = encode_clicks(clicks, grid, &self.encoder);
            let s = g.input(enc.spatial);
            let s = match spatial_proj {
                Some(w) => g.matmul(s, w),
                None => s,
            };
            let s = g.scale(s, qc.spatial_weight);
            let t = g.input(enc.temporal);
            let t = g.scale(t, qc.temporal_weight);
            let positional = g.add(s, t);
            let user = self.fusion.prepare_queries(
                g,
                QueryNodes {
                    content,
                    positional,
                    regions: clicks.iter().map(|c| compact(c.region)).collect(),
                },
            );
            let content = g.concat_rows(user.content, bg);
            let zeros = g.input(Mat::zeros((n_bg, d)));
            let positional = g.concat_rows(user.positional, zeros);
            let mut qr = user.regions;
            qr.extend(std::iter::repeat_n(0, n_bg));
            (content, positional, qr)
        };
        let n_user = query_regions.len() - n_bg;
        let exempt: Vec<bool> = (0..query_regions.len()).map(|i| i >= n_user).collect();

        let streams = Streams {
            q_content,
            q_pos,
            f_content: f,
            f_pos,
        };
        let head = &self.mask_head;
        let store = &self.store;
        let fusion = &self.fusion;
        let n_regions = regions.len();
        let mut predict = |g: &mut Graph, s: &Streams| {
            let per_click = per_click_logits_node(g, store, head, s.f_content, s.q_content);
            let regions = fusion.fuse(g, per_click, &query_regions, n_regions)?;
            Ok(LayerPrediction { per_click, regions })
        };
        let (_, mut predictions) = self.decoder.forward(g, store, streams, &query_regions, &exempt, &mut predict)?;
        if predictions.is_empty() {
            predictions.push(predict(g, &streams)?);
        }
        let per_click = predictions.iter().map(|p| p.per_click).collect();
        let region_logits = predictions.iter().map(|p| p.regions).collect();
        Ok(DecodeNodes {
            region_logits,
            per_click,
            regions,
            query_regions,
        })
    }

    /// One click round against cached features.
    pub fn decode(&self, scene: &PreparedScene, clicks: &[Click], max_region: usize) -> Result<Prediction> {
        let mut g = Graph::inference();
        let f = g.input(scene.features.data.clone());
        let nodes = self.decode_nodes(&mut g, &scene.context, f, clicks, max_region)?;
        let last = *nodes.region_logits.last().expect("at least one prediction");
        let mask = holistic_mask(g.value(last).clone());
        let labels = argmax_rows(&mask.logits)
            .into_iter()
            .map(|c| nodes.regions[c])
            .collect();
        let per_click = g.value(*nodes.per_click.last().expect("logits")).clone();
        let query_regions = nodes.query_regions.iter().map(|&c| nodes.regions[c]).collect();
        Ok(Prediction {
            labels,
            mask,
            regions: nodes.regions,
            per_click,
            query_regions,
        })
    }
}
