//! Click attention decoder.
//!
//! Every layer runs click-to-scene attention (masked by each query's
//! previous prediction), click-to-click self-attention, a feed-forward
//! block on the queries, and scene-to-click attention that makes the voxel
//! features click-aware. All sub-blocks are post-norm residual maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, NodeId, NormAxis};
use crate::fusion::argmax_rows;
use crate::Result;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    /// Click-to-scene attention enabled.
    pub c2s: bool,
    /// Click-to-click attention enabled.
    pub c2c: bool,
    /// Scene-to-click attention enabled.
    pub s2c: bool,
    /// Restrict click-to-scene attention to each query's previous mask.
    pub masked: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            dim: 128,
            heads: 8,
            ffn_dim: 1024,
            layers: 3,
            c2s: true,
            c2c: true,
            s2c: true,
            masked: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl AttentionParams {
    fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let mut w = |s: &str, rng: &mut _| store.xavier(&format!("{name}.{s}"), (dim, dim), rng);
        let (wq, wk, wv, wo) = (w("wq", rng), w("wk", rng), w("wv", rng), w("wo", rng));
        AttentionParams {
            wq,
            wk,
            wv,
            wo,
            bq: store.zeros(&format!("{name}.bq"), (1, dim)),
            bk: store.zeros(&format!("{name}.bk"), (1, dim)),
            bv: store.zeros(&format!("{name}.bv"), (1, dim)),
            bo: store.zeros(&format!("{name}.bo"), (1, dim)),
            gamma: store.ones(&format!("{name}.norm.gamma"), (1, dim)),
            beta: store.zeros(&format!("{name}.norm.beta"), (1, dim)),
        }
    }

    fn ids(&self) -> [ParamId; 10] {
        [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.gamma, self.beta,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub c2s: AttentionParams,
    pub c2c: AttentionParams,
    pub ffn: FfnParams,
    pub s2c: AttentionParams,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub layers: Vec<DecoderLayer>,
}

/// Values of one decoder step, used by the standalone sub-block functions.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub q_content: Mat,
    pub f_content: Mat,
    pub q_pos: Mat,
    pub f_pos: Mat,
    /// `K x N'` additive mask; `None` means fully attendable.
    pub mask: Option<Mat>,
}

/// Node handles of the decoder streams on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Streams {
    pub q_content: NodeId,
    pub q_pos: NodeId,
    pub f_content: NodeId,
    pub f_pos: NodeId,
}

fn linear(g: &mut Graph, store: &ParamStore, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
    let w = g.param(store, w);
    let b = g.param(store, b);
    g.linear(x, w, b)
}

/// `LN(x + W_o · Attn(W_Q (x + x_pos), W_K (kv + kv_pos), W_V kv))`.
#[allow(clippy::too_many_arguments)]
pub fn attention_block(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    heads: usize,
    x: NodeId,
    x_pos: NodeId,
    kv: NodeId,
    kv_pos: NodeId,
    mask: Option<&Mat>,
) -> NodeId {
    let q_in = g.add(x, x_pos);
    let k_in = g.add(kv, kv_pos);
    let q = linear(g, store, q_in, p.wq, p.bq);
    let k = linear(g, store, k_in, p.wk, p.bk);
    let v = linear(g, store, kv, p.wv, p.bv);
    let a = g.attention(q, k, v, heads, mask);
    let o = linear(g, store, a, p.wo, p.bo);
    let r = g.add(x, o);
    let gamma = g.param(store, p.gamma);
    let beta = g.param(store, p.beta);
    g.norm(r, gamma, beta, NormAxis::Row)
}

/// `LN(x + W_2 relu(W_1 x + b_1) + b_2)`.
pub fn ffn_block(g: &mut Graph, store: &ParamStore, p: &FfnParams, x: NodeId) -> NodeId {
    let h = linear(g, store, x, p.w1, p.b1);
    let h = g.relu(h);
    let o = linear(g, store, h, p.w2, p.b2);
    let r = g.add(x, o);
    let gamma = g.param(store, p.gamma);
    let beta = g.param(store, p.beta);
    g.norm(r, gamma, beta, NormAxis::Row)
}

/// Attention mask from an intermediate region prediction (`N' x R`
/// logits): a query may attend to the voxels whose argmax region is its own
/// region. Exempt queries and queries whose region holds no voxel attend
/// everywhere.
pub fn attention_mask(region_logits: &Mat, query_regions: &[usize], exempt: &[bool]) -> Mat {
    assert_eq!(exempt.len(), query_regions.len(), "one exemption flag per query");
    let labels = argmax_rows(region_logits);
    let mut h = Mat::zeros((query_regions.len(), labels.len()));
    for (q, &r) in query_regions.iter().enumerate() {
        if exempt[q] || !labels.contains(&r) {
            continue;
        }
        for (v, &l) in labels.iter().enumerate() {
            if l != r {
                h[[q, v]] = f64::NEG_INFINITY;
            }
        }
    }
    h
}

/// Predictions recorded after one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerPrediction {
    /// Per-click logits, `N' x K`.
    pub per_click: NodeId,
    /// Fused region logits, `N' x R`.
    pub regions: NodeId,
}

impl Decoder {
    pub fn new(config: DecoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        assert!(
            config.heads > 0 && config.dim % config.heads == 0,
            "heads must divide the decoder width"
        );
        let d = config.dim;
        let layers = (0..config.layers)
            .map(|l| {
                let name = format!("decoder.layer{l}");
                DecoderLayer {
                    c2s: AttentionParams::new(store, &format!("{name}.c2s"), d, rng),
                    c2c: AttentionParams::new(store, &format!("{name}.c2c"), d, rng),
                    ffn: FfnParams {
                        w1: store.kaiming(&format!("{name}.ffn.w1"), (d, config.ffn_dim), rng),
                        b1: store.zeros(&format!("{name}.ffn.b1"), (1, config.ffn_dim)),
                        w2: store.xavier(&format!("{name}.ffn.w2"), (config.ffn_dim, d), rng),
                        b2: store.zeros(&format!("{name}.ffn.b2"), (1, d)),
                        gamma: store.ones(&format!("{name}.ffn.norm.gamma"), (1, d)),
                        beta: store.zeros(&format!("{name}.ffn.norm.beta"), (1, d)),
                    },
                    s2c: AttentionParams::new(store, &format!("{name}.s2c"), d, rng),
                }
            })
            .collect();
        Decoder { config, layers }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.extend(l.c2s.ids());
            ids.extend(l.c2c.ids());
            let f = &l.ffn;
            ids.extend([f.w1, f.b1, f.w2, f.b2, f.gamma, f.beta]);
            ids.extend(l.s2c.ids());
        }
        ids
    }

    /// One layer on `g`. `mask` restricts click-to-scene attention.
    pub fn layer_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        s: Streams,
        mask: Option<&Mat>,
    ) -> Streams {
        let p = &self.layers[layer];
        let heads = self.config.heads;
        let mut qc = s.q_content;
        let mut fc = s.f_content;
        if self.config.c2s {
            qc = attention_block(g, store, &p.c2s, heads, qc, s.q_pos, fc, s.f_pos, mask);
        }
        if self.config.c2c {
            qc = attention_block(g, store, &p.c2c, heads, qc, s.q_pos, qc, s.q_pos, None);
        }
        qc = ffn_block(g, store, &p.ffn, qc);
        if self.config.s2c {
            fc = attention_block(g, store, &p.s2c, heads, fc, s.f_pos, qc, s.q_pos, None);
        }
        Streams {
            q_content: qc,
            f_content: fc,
            ..s
        }
    }

    /// Runs all layers. After each layer `per_click` records that layer's
    /// per-click logits (`N' x K`) and returns their node; the logits
    /// define the next layer's attention mask. Returns the final streams
    /// and the per-layer logit nodes.
    /// Runs every layer. After each one `predict` maps the streams to a
    /// prediction, whose fused regions set the next layer's attention mask.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        streams: Streams,
        query_regions: &[usize],
        exempt: &[bool],
        predict: &mut dyn FnMut(&mut Graph, &Streams) -> Result<LayerPrediction>,
    ) -> Result<(Streams, Vec<LayerPrediction>)> {
        let mut s = streams;
        let mut mask: Option<Mat> = None;
        let mut predictions = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            s = self.layer_forward(g, store, l, s, mask.as_ref());
            let p = predict(g, &s)?;
            if self.config.masked {
                mask = Some(attention_mask(g.value(p.regions), query_regions, exempt));
            }
            predictions.push(p);
        }
        Ok((s, predictions))
    }
}

fn with_state<F>(state: &DecoderState, f: F) -> Mat
where
    F: FnOnce(&mut Graph, Streams) -> NodeId,
{
    let mut g = Graph::inference();
    let s = Streams {
        q_content: g.input(state.q_content.clone()),
        q_pos: g.input(state.q_pos.clone()),
        f_content: g.input(state.f_content.clone()),
        f_pos: g.input(state.f_pos.clone()),
    };
    let out = f(&mut g, s);
    g.value(out).clone()
}

/// Updated query contents after click-to-scene attention.
pub fn c2s_attention(state: &DecoderState, p: &AttentionParams, heads: usize, store: &ParamStore) -> Mat {
    with_state(state, |g, s| {
        attention_block(g, store, p, heads, s.q_content, s.q_pos, s.f_content, s.f_pos, state.mask.as_ref())
    })
}

/// Updated query contents after click-to-click attention.
pub fn c2c_attention(state: &DecoderState, p: &AttentionParams, heads: usize, store: &ParamStore) -> Mat {
    with_state(state, |g, s| {
        attention_block(g, store, p, heads, s.q_content, s.q_pos, s.q_content, s.q_pos, None)
    })
}

/// Updated voxel contents after scene-to-click attention.
pub fn s2c_attention(state: &DecoderState, p: &AttentionParams, heads: usize, store: &ParamStore) -> Mat {
    with_state(state, |g, s| {
        attention_block(g, store, p, heads, s.f_content, s.f_pos, s.q_content, s.q_pos, None)
    })
}
