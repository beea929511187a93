use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context as _, Result};
use clickseg::checkpoint::Checkpoint;
use clickseg::metrics::{build_benchmark, BenchmarkConfig, ManifestEntry, NOC_TARGETS};
use clickseg::model::{Model, ModelConfig};
use clickseg::pca::pca_colors;
use clickseg::scene::{encode_scene, voxelize, PointCloud, SceneFormat, SceneSample};
use clickseg::simulator::{evaluate, predictor_registry, simulate_session, LabeledScene, Trajectory};
use clickseg::training::{train as run_training, TrainConfig};
use clickseg_server::{LoadedModel, ServiceConfig, SessionManager};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{find_scene, load_cloud, load_dir, object_ids, parse_targets, sample_from_file, DataSpec, SyntheticSet, UsageError};
use crate::{BenchArgs, EvalArgs, GenerateArgs, PcaArgs, ServeArgs, SimulateArgs, TrainArgs};

pub struct Context {
    pub seed: u64,
    pub deterministic: bool,
}

/// IoU checkpoints reported by `eval`, in clicks per object.
const EVAL_KS: [usize; 3] = [5, 10, 15];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    #[default]
    Tiny,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct TrainData {
    train: DataSpec,
    validation: Option<DataSpec>,
}

impl Default for TrainData {
    fn default() -> Self {
        TrainData {
            train: DataSpec::Synthetic(SyntheticSet::default()),
            validation: None,
        }
    }
}

/// Contents of a training config file. `model` holds overrides on top of
/// the preset.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    preset: Preset,
    model: Value,
    train: TrainConfig,
    data: TrainData,
    ablations: Vec<String>,
}

fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) if !o.is_null() => *b = o.clone(),
        _ => {}
    }
}

fn apply_ablation(name: &str, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
    match name {
        "no-c2s" => model.decoder.c2s = false,
        "no-c2c" => model.decoder.c2c = false,
        "no-s2c" => model.decoder.s2c = false,
        "no-attention-mask" => model.decoder.masked = false,
        "no-iterative" => train.sampler = "random".into(),
        "early-fusion" => model.fusion = "early-max".into(),
        "mean-fusion" => model.fusion = "late-mean".into(),
        other => bail!(UsageError(format!("unknown ablation {other:?}"))),
    }
    Ok(())
}

fn write_manifest(out: &Path, command: &str, ctx: &Context, config: Value, checkpoint_hash: Option<&str>, outputs: &[&str]) -> Result<()> {
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": ctx.seed,
        "deterministic": ctx.deterministic,
        "checkpoint_hash": checkpoint_hash,
        "config": config,
        "outputs": outputs,
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&doc)?)?;
    Ok(())
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn load_model(path: &Path) -> Result<(Model, Checkpoint, String)> {
    let (ckpt, hash) = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = ckpt.to_model()?;
    Ok((model, ckpt, hash))
}

fn zero_timings(trajectory: &mut Trajectory) {
    for r in &mut trajectory.rounds {
        r.decode_ms = 0.0;
    }
}

pub fn train(ctx: &Context, args: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", args.config.display())))?;
    let file: TrainFile = serde_json::from_str(&text).map_err(|e| UsageError(format!("invalid config: {e}")))?;
    let preset = match file.preset {
        Preset::Tiny => ModelConfig::tiny(),
        Preset::Full => ModelConfig::default(),
    };
    let mut model_value = serde_json::to_value(&preset)?;
    merge(&mut model_value, &file.model);
    let mut model_config: ModelConfig =
        serde_json::from_value(model_value).map_err(|e| UsageError(format!("invalid model config: {e}")))?;
    let mut train_config = file.train.clone();
    train_config.seed = ctx.seed;
    if let Some(e) = args.epochs {
        train_config.epochs = e;
    }
    if let Some(lr) = args.lr {
        train_config.optimizer.lr = lr;
    }
    if let Some(s) = args.sampler {
        train_config.sampler = s;
    }
    let mut ablations = file.ablations.clone();
    ablations.extend(args.ablations);
    for a in &ablations {
        apply_ablation(a, &mut model_config, &mut train_config)?;
    }

    let train_set = file.data.train.load()?;
    let validation = match &file.data.validation {
        Some(spec) => spec.load()?,
        None => Vec::new(),
    };
    create_dir(&args.out)?;
    let mut model = Model::new(model_config.clone(), ctx.seed)?;
    tracing::info!(
        scenes = train_set.len(),
        validation = validation.len(),
        params = model.store.scalar_count(),
        sampler = %train_config.sampler,
        "training"
    );
    let mut log = BufWriter::new(File::create(args.out.join("train_log.jsonl"))?);
    let report = run_training(&mut model, &train_set, &validation, &train_config, &mut log)?;
    log.flush()?;

    let mut metadata = BTreeMap::new();
    metadata.insert("ablations".to_string(), json!(ablations));
    metadata.insert("sampler".to_string(), json!(train_config.sampler));
    metadata.insert("seed".to_string(), json!(ctx.seed));
    metadata.insert("train".to_string(), serde_json::to_value(&train_config)?);
    metadata.insert("report".to_string(), serde_json::to_value(&report)?);
    let ckpt = Checkpoint::from_model(&model, metadata);
    let hash = ckpt.save(args.out.join("checkpoint.json"))?;
    std::fs::write(args.out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    let config = json!({
        "model": model_config,
        "train": train_config,
        "data": file.data,
        "ablations": ablations,
    });
    write_manifest(&args.out, "train", ctx, config, Some(&hash), &["checkpoint.json", "train_log.jsonl", "report.json"])?;
    println!("checkpoint {} sha256 {hash}", args.out.join("checkpoint.json").display());
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn eval(ctx: &Context, args: EvalArgs) -> Result<()> {
    let single = match args.protocol.as_str() {
        "multi" => false,
        "single" => true,
        other => bail!(UsageError(format!("unknown protocol {other:?}"))),
    };
    let (model, hash) = match (&args.checkpoint, args.predictor.as_str()) {
        (Some(p), _) => {
            let (m, _, h) = load_model(p)?;
            (Some(Arc::new(m)), Some(h))
        }
        (None, "model") => bail!(UsageError("--checkpoint is required for the model predictor".into())),
        (None, _) => (None, None),
    };
    let voxel_size = model.as_ref().map_or(clickseg::scene::DEFAULT_VOXEL_SIZE, |m| m.config.voxel_size);
    let predictor = predictor_registry(model).get(&args.predictor).map_err(|e| UsageError(e.to_string()))?;

    let entries = read_manifest(&args.manifest)?;
    let mut samples = Vec::new();
    for e in &entries {
        let path = find_scene(&args.scene_dir, &e.scene_id)?;
        let cloud = load_cloud(&path)?;
        if single {
            for &id in &e.object_ids {
                samples.push(SceneSample::new(format!("{}:{id}", e.scene_id), cloud.clone(), vec![id])?);
            }
        } else {
            samples.push(SceneSample::new(e.scene_id.clone(), cloud, e.object_ids.clone())?);
        }
    }
    let scenes = samples
        .into_iter()
        .map(|s| LabeledScene::new(s, voxel_size))
        .collect::<clickseg::Result<Vec<_>>>()?;
    let (table, mut trajectories) = evaluate(
        predictor.as_ref(),
        &scenes,
        args.clicks_per_object,
        args.stop_iou,
        &EVAL_KS,
        &NOC_TARGETS,
    )?;
    create_dir(&args.out)?;
    let csv = table.to_csv();
    std::fs::write(args.out.join("metrics.csv"), &csv)?;
    std::fs::write(args.out.join("metrics.json"), serde_json::to_vec_pretty(&table)?)?;
    let mut traj = BufWriter::new(File::create(args.out.join("trajectories.jsonl"))?);
    for t in &mut trajectories {
        if ctx.deterministic {
            zero_timings(t);
        }
        writeln!(traj, "{}", serde_json::to_string(t)?)?;
    }
    traj.flush()?;
    let config = json!({
        "protocol": args.protocol,
        "predictor": args.predictor,
        "clicks_per_object": args.clicks_per_object,
        "stop_iou": args.stop_iou,
        "manifest": args.manifest,
        "scenes": scenes.len(),
    });
    write_manifest(&args.out, "eval", ctx, config, hash.as_deref(), &["metrics.csv", "metrics.json", "trajectories.jsonl"])?;
    print!("{csv}");
    Ok(())
}

pub fn simulate(ctx: &Context, args: SimulateArgs) -> Result<()> {
    let (model, _, hash) = load_model(&args.checkpoint)?;
    let targets = args.targets.as_deref().map(parse_targets).transpose()?;
    let sample = sample_from_file(&args.scene, targets)?;
    let scene = LabeledScene::new(sample, model.config.voxel_size)?;
    let budget = args.budget.unwrap_or(20 * scene.m());
    if budget < scene.m() {
        bail!(UsageError(format!("budget {budget} is below the object count {}", scene.m())));
    }
    let predictor = predictor_registry(Some(Arc::new(model))).get("model")?;
    let mut trajectory = simulate_session(predictor.as_ref(), &scene, budget, args.stop_iou)?;
    if ctx.deterministic {
        zero_timings(&mut trajectory);
    }
    create_dir(&args.out)?;
    std::fs::write(args.out.join("trajectory.jsonl"), trajectory.to_jsonl()?)?;
    let mut outputs = vec!["trajectory.jsonl"];
    if args.mask_ply {
        let labels = clickseg::scene::devoxelize_labels(&scene.grid, &trajectory.final_labels)?;
        let cloud = PointCloud {
            labels: Some(labels.iter().map(|&l| l as u32).collect()),
            ..scene.sample.cloud.clone()
        };
        std::fs::write(args.out.join("mask.ply"), encode_scene(&cloud, SceneFormat::Ply)?)?;
        outputs.push("mask.ply");
    }
    let last = trajectory.rounds.last().expect("at least one round");
    println!(
        "{} rounds, {} clicks, mean IoU {:.4}",
        trajectory.rounds.len(),
        last.total_clicks,
        last.mean_iou
    );
    let config = json!({
        "scene": args.scene,
        "targets": scene.sample.target_object_ids,
        "budget": budget,
        "stop_iou": args.stop_iou,
    });
    write_manifest(&args.out, "simulate", ctx, config, Some(&hash), &outputs)?;
    Ok(())
}

pub fn serve(ctx: &Context, args: ServeArgs) -> Result<()> {
    let model = match &args.checkpoint {
        Some(p) => {
            let (m, ckpt, hash) = load_model(p)?;
            Some(LoadedModel {
                model: Arc::new(m),
                identity: ckpt.identity(hash),
            })
        }
        None => {
            tracing::warn!("no checkpoint given; sessions cannot be created");
            None
        }
    };
    let config = ServiceConfig {
        max_points: args.max_points,
        deterministic: ctx.deterministic,
        scene_dir: args.scene_dir,
        cors_origin: args.cors_origin,
        ..Default::default()
    };
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| UsageError(format!("invalid address: {e}")))?;
    let state = Arc::new(SessionManager::new(model, config));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(clickseg_server::serve(addr, state))?;
    Ok(())
}

fn parse_room(s: &str) -> Result<[f64; 2]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| UsageError(format!("invalid room size {s:?}")))?;
    match parts.as_slice() {
        [x, y] if *x > 0.0 && *y > 0.0 => Ok([*x, *y]),
        _ => bail!(UsageError(format!("room size needs two positive values, got {s:?}"))),
    }
}

pub fn generate(ctx: &Context, args: GenerateArgs) -> Result<()> {
    let (format, ext) = match args.format.as_str() {
        "ply" => (SceneFormat::Ply, "ply"),
        "ply-binary" => (SceneFormat::PlyBinary, "ply"),
        "json" => (SceneFormat::Json, "json"),
        other => bail!(UsageError(format!("unknown format {other:?}"))),
    };
    let set = SyntheticSet {
        count: args.count,
        seed: ctx.seed,
        min_objects: args.min_objects,
        max_objects: args.max_objects,
        room_size: parse_room(&args.room_size)?,
    };
    let scenes = set.generate()?;
    create_dir(&args.out)?;
    for s in &scenes {
        std::fs::write(args.out.join(format!("{}.{ext}", s.id)), encode_scene(&s.cloud, format)?)?;
    }
    let ids: Vec<&str> = scenes.iter().map(|s| s.id.as_str()).collect();
    write_manifest(&args.out, "generate", ctx, json!({"synthetic": set, "format": args.format, "scenes": ids}), None, &[])?;
    println!("wrote {} scenes to {}", scenes.len(), args.out.display());
    Ok(())
}

pub fn bench_manifest(ctx: &Context, args: BenchArgs) -> Result<()> {
    let dataset = load_dir(&args.scene_dir)?;
    let config = BenchmarkConfig {
        radius: args.radius,
        max_objects: args.max_objects,
    };
    let (_, manifest) = build_benchmark(&dataset, ctx.seed, &config)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(&args.out, serde_json::to_vec_pretty(&manifest)?)?;
    println!("{} scenes, {} targets", manifest.len(), manifest.iter().map(|e| e.m).sum::<usize>());
    Ok(())
}

pub fn features_pca(_ctx: &Context, args: PcaArgs) -> Result<()> {
    let (model, _, _) = load_model(&args.checkpoint)?;
    let cloud = load_cloud(&args.scene)?;
    let grid = Arc::new(voxelize(&cloud, model.config.voxel_size)?);
    let prepared = model.prepare(grid.clone())?;
    let voxel_colors = pca_colors(&prepared.features.data);
    let colors = grid.point_to_voxel.iter().map(|&v| voxel_colors[v]).collect();
    let out = PointCloud {
        points: cloud.points.clone(),
        colors: Some(colors),
        labels: cloud.labels.clone(),
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(&args.out, encode_scene(&out, SceneFormat::Ply)?)?;
    println!(
        "{} points, {} voxels, {} objects",
        out.points.len(),
        grid.len(),
        object_ids(&cloud).len()
    );
    Ok(())
}
