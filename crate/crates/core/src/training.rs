//! Loss, click sampling for training, and the iterative training loop.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Graph, Mat};
use crate::clickquery::Click;
use crate::model::{Model, PreparedScene, SceneContext};
use crate::params::{AdamW, AdamWConfig, ParamGrads, TensorRecord};
use crate::registry::Registry;
use crate::scene::{SceneSample, VoxelGrid};
use crate::simulator::{center_clicks, error_clusters, evaluate, sample_training_clicks, LabeledScene, ModelPredictor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub dice_weight: f64,
    /// Width of the click-distance weighting, meters.
    pub sigma: f64,
    /// Weight at a click location.
    pub max_weight: f64,
    pub dice_eps: f64,
    /// Supervise every decoder layer rather than only the last.
    pub deep_supervision: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ce_weight: 1.0,
            dice_weight: 2.0,
            sigma: 0.3,
            max_weight: 2.0,
            dice_eps: 1.0,
            deep_supervision: true,
        }
    }
}

/// `w = 1 + (w_max - 1) exp(-d² / σ²)` with `d` the distance from each voxel
/// center to the nearest click; all ones without clicks.
pub fn point_weights(clicks: &[Click], grid: &VoxelGrid, config: &LossConfig) -> Vec<f64> {
    (0..grid.len())
        .map(|v| {
            let c = grid.center(v);
            let d2 = clicks
                .iter()
                .map(|k| (0..3).map(|a| (c[a] - k.position()[a]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            if d2.is_finite() {
                1.0 + (config.max_weight - 1.0) * (-d2 / (config.sigma * config.sigma)).exp()
            } else {
                1.0
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    /// Gradient of `loss` with respect to the logits.
    pub grad: Mat,
}

/// Weighted cross-entropy plus `dice_weight` times the weighted soft Dice
/// loss averaged over regions, on region logits `N x R` with labels given
/// as column indices.
pub fn segmentation_loss(logits: &Mat, labels: &[usize], weights: &[f64], config: &LossConfig) -> Result<LossValue> {
    let (n, r) = logits.dim();
    if labels.len() != n || weights.len() != n {
        return Err(Error::invalid("labels and weights must have one entry per row"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= r) {
        return Err(Error::InvalidLabel {
            label: bad,
            max: r.saturating_sub(1),
        });
    }
    let mut p = logits.clone();
    let mut ce = 0.0;
    for (v, mut row) in p.rows_mut().into_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        ce += weights[v] * (lse - row[labels[v]]);
        row.mapv_inplace(|z| (z - lse).exp());
    }
    let nf = n as f64;
    ce /= nf;

    let eps = config.dice_eps;
    let mut inter = vec![0.0; r];
    let mut denom = vec![eps; r];
    for v in 0..n {
        let w = weights[v];
        for j in 0..r {
            denom[j] += w * p[[v, j]];
        }
        inter[labels[v]] += w * p[[v, labels[v]]];
        denom[labels[v]] += w;
    }
    let dice = (0..r)
        .map(|j| 1.0 - (2.0 * inter[j] + eps) / denom[j])
        .sum::<f64>()
        / r as f64;

    let mut grad = Mat::zeros((n, r));
    let dice_scale = config.dice_weight / r as f64;
    for v in 0..n {
        let w = weights[v];
        let mut gp = vec![0.0; r];
        for (j, g) in gp.iter_mut().enumerate() {
            let y = (labels[v] == j) as u8 as f64;
            let num = 2.0 * w * y * denom[j] - (2.0 * inter[j] + eps) * w;
            *g = -dice_scale * num / (denom[j] * denom[j]);
        }
        let dot: f64 = (0..r).map(|j| p[[v, j]] * gp[j]).sum();
        for j in 0..r {
            let y = (labels[v] == j) as u8 as f64;
            grad[[v, j]] = config.ce_weight * w * (p[[v, j]] - y) / nf + p[[v, j]] * (gp[j] - dot);
        }
    }
    Ok(LossValue {
        loss: config.ce_weight * ce + config.dice_weight * dice,
        ce,
        dice,
        grad,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
}

/// A labeled scene with the model's click-independent scene data.
#[derive(Clone, Debug)]
pub struct TrainScene {
    pub scene: LabeledScene,
    pub context: SceneContext,
}

impl TrainScene {
    pub fn new(sample: SceneSample, model: &Model) -> Result<Self> {
        let scene = LabeledScene::new(sample, model.config.voxel_size)?;
        let context = model.context(scene.grid.clone())?;
        Ok(TrainScene { scene, context })
    }
}

fn record_loss(model: &Model, scene: &TrainScene, clicks: &[Click], config: &LossConfig, with_grad: bool) -> Result<(LossBreakdown, Option<ParamGrads>)> {
    let mut g = if with_grad { Graph::new() } else { Graph::inference() };
    let nodes = model.forward_train(&mut g, &scene.context, clicks, scene.scene.m())?;
    let labels: Vec<usize> = scene
        .scene
        .voxel_gt
        .iter()
        .map(|&r| {
            nodes.regions.binary_search(&r).map_err(|_| Error::InvalidLabel {
                label: r,
                max: *nodes.regions.last().expect("background present"),
            })
        })
        .collect::<Result<_>>()?;
    let weights = point_weights(clicks, &scene.scene.grid, config);
    let supervised = if config.deep_supervision {
        nodes.region_logits.clone()
    } else {
        nodes.region_logits[nodes.region_logits.len() - 1..].to_vec()
    };
    let mut total = LossBreakdown::default();
    let mut seeds = Vec::with_capacity(supervised.len());
    for node in supervised {
        let l = segmentation_loss(g.value(node), &labels, &weights, config)?;
        total.loss += l.loss;
        total.ce += l.ce;
        total.dice += l.dice;
        seeds.push((node, l.grad));
    }
    let grads = with_grad.then(|| g.backward_seeded(&seeds).params(&g, &model.store));
    Ok((total, grads))
}

/// Training loss of the model for a click sequence.
pub fn loss_value(model: &Model, scene: &TrainScene, clicks: &[Click], config: &LossConfig) -> Result<LossBreakdown> {
    Ok(record_loss(model, scene, clicks, config, false)?.0)
}

/// Training loss and its gradient with respect to every parameter.
pub fn loss_and_gradients(
    model: &Model,
    scene: &TrainScene,
    clicks: &[Click],
    config: &LossConfig,
) -> Result<(LossBreakdown, ParamGrads)> {
    let (l, g) = record_loss(model, scene, clicks, config, true)?;
    Ok((l, g.expect("gradients requested")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterTrainConfig {
    /// Iteration count is drawn uniformly from `1..=max_iterations`.
    pub max_iterations: usize,
    /// Iteration `i` adds `min(i, max_clicks_per_iteration)` clicks.
    pub max_clicks_per_iteration: usize,
    /// Perturb simulated clicks away from cluster centers.
    pub stochastic: bool,
}

impl Default for IterTrainConfig {
    fn default() -> Self {
        IterTrainConfig {
            max_iterations: 4,
            max_clicks_per_iteration: 5,
            stochastic: true,
        }
    }
}

impl IterTrainConfig {
    pub fn clicks_for_iteration(&self, i: usize) -> usize {
        i.min(self.max_clicks_per_iteration)
    }
}

/// Chooses the click sequence a training step learns from.
pub trait ClickSampler: Send + Sync {
    fn name(&self) -> &'static str;

    /// Clicks after `iterations` rounds of the schedule.
    fn sample(
        &self,
        model: &Model,
        scene: &TrainScene,
        iterations: usize,
        config: &IterTrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Click>>;
}

/// Center clicks, then clicks at the model's own largest errors with the
/// parameters frozen.
pub struct IterativeSampler;

impl ClickSampler for IterativeSampler {
    fn name(&self) -> &'static str {
        "iterative"
    }

    fn sample(
        &self,
        model: &Model,
        scene: &TrainScene,
        iterations: usize,
        config: &IterTrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Click>> {
        let s = &scene.scene;
        let mut clicks = center_clicks(s);
        if iterations <= 1 {
            return Ok(clicks);
        }
        let prepared = PreparedScene {
            context: scene.context.clone(),
            features: model.features(&scene.context),
        };
        for i in 1..iterations {
            let pred = model.decode(&prepared, &clicks, s.m())?;
            let clusters = error_clusters(&pred.labels, &s.voxel_gt, &s.grid);
            let rng: Option<&mut dyn RngCore> = if config.stochastic { Some(&mut *rng) } else { None };
            let new = sample_training_clicks(
                &clusters,
                &s.grid,
                config.clicks_for_iteration(i),
                clicks.len() + 1,
                rng,
            );
            if new.is_empty() {
                break;
            }
            clicks.extend(new);
        }
        Ok(clicks)
    }
}

/// Uniformly random clicks: one per target, then a random region and a
/// random voxel inside it for each further click.
pub struct RandomSampler;

impl ClickSampler for RandomSampler {
    fn name(&self) -> &'static str {
        "random"
    }

    fn sample(
        &self,
        _model: &Model,
        scene: &TrainScene,
        iterations: usize,
        config: &IterTrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Click>> {
        let s = &scene.scene;
        let m = s.m();
        let mut by_region: Vec<Vec<usize>> = vec![Vec::new(); m + 1];
        for (v, &r) in s.voxel_gt.iter().enumerate() {
            by_region[r].push(v);
        }
        let mut clicks = Vec::new();
        let centers = center_clicks(s);
        for r in 1..=m {
            let ts = clicks.len() + 1;
            match by_region[r].as_slice() {
                [] => {
                    if let Some(c) = centers.iter().find(|c| c.region == r) {
                        clicks.push(Click { timestamp: ts, ..*c });
                    }
                }
                vs => clicks.push(Click::new(s.grid.center(vs[rng.random_range(0..vs.len())]), r, ts)),
            }
        }
        let extra: usize = (1..iterations).map(|i| config.clicks_for_iteration(i)).sum();
        let regions: Vec<usize> = (0..=m).filter(|&r| !by_region[r].is_empty()).collect();
        for _ in 0..extra {
            let r = regions[rng.random_range(0..regions.len())];
            let vs = &by_region[r];
            let v = vs[rng.random_range(0..vs.len())];
            clicks.push(Click::new(s.grid.center(v), r, clicks.len() + 1));
        }
        Ok(clicks)
    }
}

pub const DEFAULT_SAMPLER: &str = "iterative";

pub fn sampler_registry() -> Registry<dyn ClickSampler> {
    let mut r: Registry<dyn ClickSampler> = Registry::new();
    r.register("iterative", Arc::new(IterativeSampler));
    r.register("random", Arc::new(RandomSampler));
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay: f64,
    pub loss: LossConfig,
    pub iterative: IterTrainConfig,
    pub sampler: String,
    /// Evaluate on the held-out set every this many epochs (0 disables).
    pub eval_every: usize,
    /// Click budget per object for held-out evaluation.
    pub eval_clicks_per_object: usize,
    /// Keep the parameters of the best evaluation at the end.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            seed: 0,
            optimizer: AdamWConfig::default(),
            lr_decay_epochs: Vec::new(),
            lr_decay: 0.1,
            loss: LossConfig::default(),
            iterative: IterTrainConfig::default(),
            sampler: DEFAULT_SAMPLER.to_string(),
            eval_every: 1,
            eval_clicks_per_object: 5,
            restore_best: true,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.optimizer.lr * self.lr_decay.powi(decays as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iterations: usize,
    pub clicks: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Samples clicks, then takes one optimizer step on the final click set.
pub fn iterative_training_step(
    model: &mut Model,
    optimizer: &mut AdamW,
    scene: &TrainScene,
    sampler: &dyn ClickSampler,
    config: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepLog> {
    let it = &config.iterative;
    if it.max_iterations == 0 {
        return Err(Error::invalid("max_iterations must be at least 1"));
    }
    let iterations = rng.random_range(1..=it.max_iterations);
    let clicks = sampler.sample(model, scene, iterations, it, rng)?;
    let (loss, grads) = loss_and_gradients(model, scene, &clicks, &config.loss)?;
    if !loss.loss.is_finite() || !grads.all_finite() {
        return Err(Error::Divergence(format!(
            "scene {} with {} clicks: loss {} (ce {}, dice {})",
            scene.scene.sample.id,
            clicks.len(),
            loss.loss,
            loss.ce,
            loss.dice
        )));
    }
    let grad_norm = grads.norm();
    optimizer.step(&mut model.store, &grads, lr);
    if !model.store.all_finite() {
        return Err(Error::Divergence(format!(
            "parameters became non-finite after a step on scene {}",
            scene.scene.sample.id
        )));
    }
    Ok(StepLog {
        iterations,
        clicks: clicks.len(),
        loss,
        grad_norm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub eval_iou_at_5: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub sampler: String,
    pub epochs: Vec<EpochSummary>,
    pub best_iou_at_5: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Trains `model` in place. One JSON record per step and per evaluation is
/// written to `log`.
pub fn train(
    model: &mut Model,
    train_set: &[SceneSample],
    held_out: &[SceneSample],
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let sampler = sampler_registry().get(&config.sampler)?;
    let scenes = train_set
        .iter()
        .map(|s| TrainScene::new(s.clone(), model))
        .collect::<Result<Vec<_>>>()?;
    let eval_scenes = held_out
        .iter()
        .map(|s| LabeledScene::new(s.clone(), model.config.voxel_size))
        .collect::<Result<Vec<_>>>()?;
    let mut optimizer = AdamW::new(config.optimizer.clone(), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut report = TrainReport {
        steps: 0,
        sampler: sampler.name().to_string(),
        epochs: Vec::new(),
        best_iou_at_5: None,
        best_epoch: None,
    };
    let mut best: Option<Vec<TensorRecord>> = None;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let step = iterative_training_step(model, &mut optimizer, &scenes[i], sampler.as_ref(), config, lr, &mut rng)?;
            total += step.loss.loss;
            report.steps += 1;
            let rec = json!({
                "kind": "step",
                "epoch": epoch,
                "step": report.steps,
                "scene": scenes[i].scene.sample.id,
                "sampler": sampler.name(),
                "iterations": step.iterations,
                "clicks": step.clicks,
                "loss": step.loss.loss,
                "ce": step.loss.ce,
                "dice": step.loss.dice,
                "grad_norm": step.grad_norm,
                "lr": lr,
            });
            writeln!(log, "{rec}")?;
        }
        let mean_loss = total / scenes.len() as f64;
        let due = config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs);
        let eval_iou_at_5 = if due && !eval_scenes.is_empty() {
            let predictor = ModelPredictor(Arc::new(model.clone()));
            let (table, _) = evaluate(&predictor, &eval_scenes, config.eval_clicks_per_object, 1.0, &[5], &[])?;
            let iou5 = table.iou(5).unwrap_or(0.0);
            writeln!(log, "{}", json!({"kind": "eval", "epoch": epoch, "iou_at_5": iou5}))?;
            if report.best_iou_at_5.is_none_or(|b| iou5 > b) {
                report.best_iou_at_5 = Some(iou5);
                report.best_epoch = Some(epoch);
                best = Some(model.store.to_records());
            }
            Some(iou5)
        } else {
            None
        };
        tracing::info!(epoch, mean_loss, lr, ?eval_iou_at_5, "epoch finished");
        report.epochs.push(EpochSummary {
            epoch,
            mean_loss,
            lr,
            eval_iou_at_5,
        });
    }
    if config.restore_best {
        if let Some(records) = best {
            model.store.load_records(&records)?;
        }
    }
    Ok(report)
}
