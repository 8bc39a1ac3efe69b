//! One function per pipeline stage. Each reads its inputs, writes its outputs
//! and returns the manifest it recorded.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;
use steer_core::dataset::{sha256_hex, Channel, DemoDataset, LabeledDataset};
use steer_core::imitation::{evaluate_policy, train_policy as fit_policy, GreedyDriver, PolicyDriver};
use steer_core::nets::{PolicyNet, QNet, ScalarNet};
use steer_core::reward::{subsample, train_reward as fit_reward, ScalarInit};
use steer_core::rl::{rl_train as run_rl, EpochMetrics, RLConfig, RlObserver, RlSetup, TickEvents, IL_INIT_RANGE};
use steer_core::render::Observation;
use steer_core::safety::{train_safety as fit_safety, Control, SafetyConfig, SafetyModule};
use steer_core::teacher::{record_demonstrations_with, record_labels};
use steer_core::track::Track;
use steer_core::train::{split_dataset, TrainConfig, TrainingCurve};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::manifest::{
    load_model, read_json, write_json, write_model, LoadedModel, ManifestBuilder, RunManifest, Staging, CURVE_FILE,
    MANIFEST_FILE, RUN_MANIFEST_FILE,
};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ABORT_FILE: &str = "ABORTED";

/// A loaded configuration with its hash and resolved track.
pub struct Context {
    pub config: PipelineConfig,
    pub hash: String,
    pub track: Arc<Track>,
}

impl Context {
    pub fn new(config: PipelineConfig) -> Result<Self, CliError> {
        let track = Arc::new(Track::resolve(&config.track)?);
        Ok(Context {
            hash: config.hash(),
            config,
            track,
        })
    }

    fn track_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self.track.spec()).expect("track spec serializes"))
    }

    fn obs_shape(&self) -> [usize; 3] {
        self.config.env.obs_shape()
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::MissingInput(format!("{what} {}", path.display())))
    }
}

fn require_model(path: &Path, what: &str) -> Result<LoadedModel, CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput(format!("{what} {}", path.display())));
    }
    load_model(path)
}

fn check_shape(ctx: &Context, shape: [usize; 3], what: &str) -> Result<(), CliError> {
    if shape != ctx.obs_shape() {
        return Err(CliError::Usage(format!(
            "{what} expects observations {:?} but the configuration renders {:?}",
            shape,
            ctx.obs_shape()
        )));
    }
    Ok(())
}

fn write_dataset_manifest<T: steer_core::dataset::Target>(
    dir: &Path,
    mut builder: ManifestBuilder,
    dataset: &steer_core::dataset::Dataset<T>,
    details: serde_json::Value,
) -> Result<RunManifest, CliError> {
    let dm = dataset.write(dir)?;
    builder
        .output("frames.bin", dm.frames_sha256.clone())
        .output("labels.txt", dm.labels_sha256.clone())
        .output("dataset", dm.dataset_sha256.clone())
        .details(details);
    let manifest = builder.finish();
    write_json(&dir.join(RUN_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn demo_record(ctx: &Context, seed: u64, out: &Path) -> Result<RunManifest, CliError> {
    let stage = &ctx.config.demo;
    let staging = Staging::new(out)?;
    let mut data = record_demonstrations_with(
        ctx.track.clone(),
        &ctx.config.env,
        stage.ticks,
        stage.noise_rate,
        stage.starts,
        seed,
    )?;
    data.meta.config_hash = ctx.hash.clone();
    let mut builder = ManifestBuilder::new("demo-record", &ctx.hash, seed);
    builder.input("track", ctx.track_hash());
    let details = json!({
        "count": data.len(),
        "noise_rate": stage.noise_rate,
        "starts": stage.starts,
    });
    let manifest = write_dataset_manifest(staging.path(), builder, &data, details)?;
    staging.commit()?;
    Ok(manifest)
}

pub fn label_record(ctx: &Context, channel: Channel, seed: u64, out: &Path) -> Result<RunManifest, CliError> {
    let stage = match channel {
        Channel::Reward => &ctx.config.reward_labels,
        Channel::Safety => &ctx.config.safety_labels,
    };
    let staging = Staging::new(out)?;
    let mut driver = stage.driver.build(seed);
    let rec = record_labels(
        ctx.track.clone(),
        &ctx.config.env,
        driver.as_mut(),
        stage.ticks,
        channel,
        stage.excursions,
        seed,
    )?;
    let mut data = rec.dataset;
    data.meta.config_hash = ctx.hash.clone();
    let mut builder = ManifestBuilder::new("label-record", &ctx.hash, seed);
    builder.input("track", ctx.track_hash());
    let details = json!({
        "channel": channel,
        "count": data.len(),
        "positive_fraction": data.positive_fraction(),
        "driver": stage.driver,
        "excursions": stage.excursions,
    });
    let manifest = write_dataset_manifest(staging.path(), builder, &data, details)?;
    staging.commit()?;
    Ok(manifest)
}

/// Writes checkpoint, curve and manifest of a supervised stage into `dir`.
fn finish_model(
    dir: &Path,
    mut builder: ManifestBuilder,
    net: &steer_nn::Network<f32>,
    curve: &TrainingCurve,
    mut details: serde_json::Value,
) -> Result<RunManifest, CliError> {
    let model_hash = write_model(dir, net)?;
    let curve_path = dir.join(CURVE_FILE);
    write_json(&curve_path, curve)?;
    let extra = details.as_object_mut().expect("details are an object");
    extra.insert("input_shape".into(), json!(net.input_shape()));
    extra.insert("best_accuracy".into(), json!(curve.best_accuracy));
    extra.insert("best_iteration".into(), json!(curve.best_iteration));
    extra.insert("iterations".into(), json!(curve.train_loss.len()));
    builder
        .output("model.ckpt", model_hash)
        .output("curve.json", crate::manifest::file_hash(&curve_path)?)
        .details(details);
    let manifest = builder.finish();
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn seeded(config: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..config.clone() }
}

pub fn train_policy(ctx: &Context, demos: &Path, seed: u64, out: &Path) -> Result<RunManifest, CliError> {
    require_dir(demos, "demonstration dataset")?;
    let data = DemoDataset::read(demos)?;
    let dataset_hash = data.manifest().dataset_sha256;
    let (train, val) = split_dataset(&data, seed)?;
    let staging = Staging::new(out)?;
    let cfg = seeded(&ctx.config.imitation, seed);
    let (policy, curve) = fit_policy(&train, &val, &cfg)?;
    let mut builder = ManifestBuilder::new("train-policy", &ctx.hash, seed);
    builder.input("demos", dataset_hash.clone());
    let details = json!({
        "kind": "policy",
        "dataset_sha256": dataset_hash,
        "train": cfg,
    });
    let manifest = finish_model(staging.path(), builder, policy.network(), &curve, details)?;
    staging.commit()?;
    Ok(manifest)
}

fn load_policy(path: &Path, what: &str) -> Result<(PolicyNet, String), CliError> {
    let m = require_model(path, what)?;
    Ok((PolicyNet::from_network(m.net)?, m.hash))
}

/// Optional flags of the reward and safety stages.
#[derive(Clone, Debug, Default)]
pub struct ScalarOptions<'a> {
    /// Imitation policy: trunk source, and the fallback for the safety gate.
    pub policy: Option<&'a Path>,
    /// Fraction of the training split kept (reward ablation).
    pub fraction: Option<f64>,
}

fn train_scalar_stage(
    ctx: &Context,
    channel: Channel,
    labels: &Path,
    opts: &ScalarOptions<'_>,
    seed: u64,
    out: &Path,
) -> Result<RunManifest, CliError> {
    let (stage_name, train_cfg, init) = match channel {
        Channel::Reward => ("train-reward", &ctx.config.reward.train, ctx.config.reward.init),
        Channel::Safety => ("train-safety", &ctx.config.safety.train, ctx.config.safety.init),
    };
    require_dir(labels, "label dataset")?;
    let policy = match opts.policy {
        Some(p) => Some(load_policy(p, "policy checkpoint")?),
        None if channel == Channel::Safety => {
            return Err(CliError::Usage("train-safety needs --policy for the safe fallback".into()))
        }
        None if init == ScalarInit::TrunkFromPolicy => {
            return Err(CliError::Usage(format!("{stage_name} with trunk_from_policy init needs --policy")))
        }
        None => None,
    };
    let data = LabeledDataset::read(labels)?;
    if data.meta.channel.is_some_and(|c| c != channel) {
        return Err(CliError::Usage(format!(
            "{} holds {:?} labels, not {channel:?}",
            labels.display(),
            data.meta.channel
        )));
    }
    let dataset_hash = data.manifest().dataset_sha256;
    let (mut train, val) = split_dataset(&data, seed)?;
    if let Some(f) = opts.fraction {
        train = subsample(&train, f, seed)?;
    }
    let trunk = match init {
        ScalarInit::TrunkFromPolicy => policy.as_ref().map(|(p, _)| p),
        ScalarInit::Fresh => None,
    };
    let staging = Staging::new(out)?;
    let cfg = seeded(train_cfg, seed);
    let (net, curve) = match channel {
        Channel::Reward => fit_reward(&train, &val, &cfg, trunk)?,
        Channel::Safety => fit_safety(&train, &val, &cfg, trunk)?,
    };
    let mut builder = ManifestBuilder::new(stage_name, &ctx.hash, seed);
    builder.input("labels", dataset_hash.clone());
    if let Some((_, hash)) = &policy {
        builder.input("policy", hash.clone());
    }
    let mut details = json!({
        "kind": match channel { Channel::Reward => "reward", Channel::Safety => "safety" },
        "channel": channel,
        "dataset_sha256": dataset_hash,
        "init": init,
        "train": cfg,
        "train_records": train.len(),
        "validation_records": val.len(),
        "subsample": train.meta.subsample,
    });
    if channel == Channel::Safety {
        let gate = &ctx.config.safety.gate;
        SafetyModule::new(net.clone(), policy.as_ref().expect("checked above").0.clone(), gate.clone())?;
        let extra = details.as_object_mut().expect("object");
        extra.insert("gate".into(), json!(gate));
        extra.insert("safe_policy_sha256".into(), json!(policy.as_ref().map(|(_, h)| h)));
    }
    let manifest = finish_model(staging.path(), builder, net.network(), &curve, details)?;
    staging.commit()?;
    Ok(manifest)
}

pub fn train_reward(
    ctx: &Context,
    labels: &Path,
    opts: &ScalarOptions<'_>,
    seed: u64,
    out: &Path,
) -> Result<RunManifest, CliError> {
    train_scalar_stage(ctx, Channel::Reward, labels, opts, seed, out)
}

pub fn train_safety(ctx: &Context, labels: &Path, policy: &Path, seed: u64, out: &Path) -> Result<RunManifest, CliError> {
    let opts = ScalarOptions {
        policy: Some(policy),
        fraction: None,
    };
    train_scalar_stage(ctx, Channel::Safety, labels, &opts, seed, out)
}

/// Hash and manifest of a loaded checkpoint.
struct Provenance {
    hash: String,
    manifest: Option<RunManifest>,
}

fn load_scalar(path: &Path, what: &str) -> Result<(ScalarNet, Provenance), CliError> {
    let LoadedModel { net, hash, manifest } = require_model(path, what)?;
    Ok((ScalarNet::from_network(net)?, Provenance { hash, manifest }))
}

/// Checkpoints consumed by `rl-train`.
#[derive(Clone, Debug, Default)]
pub struct RlInputs<'a> {
    pub reward: Option<&'a Path>,
    /// Reward net used only to score `avg_reward`.
    pub metric_reward: Option<&'a Path>,
    pub safety: Option<&'a Path>,
    pub policy: Option<&'a Path>,
}

#[derive(Clone, Debug)]
pub struct RlRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub metrics: Vec<EpochMetrics>,
    pub aborted: Option<String>,
}

/// Appends each epoch to the metrics file as it completes, then forwards it.
struct MetricsWriter<'a> {
    file: File,
    error: Option<std::io::Error>,
    forward: &'a mut dyn RlObserver,
}

impl RlObserver for MetricsWriter<'_> {
    fn on_tick(&mut self, tick: u64, obs: &Observation, control: Control, events: &TickEvents) {
        self.forward.on_tick(tick, obs, control, events);
    }

    fn on_takeover(&mut self, tick: u64, on: bool) {
        self.forward.on_takeover(tick, on);
    }

    fn on_epoch(&mut self, m: &EpochMetrics) {
        if self.error.is_none() {
            let mut line = serde_json::to_vec(m).expect("metrics serialize");
            line.push(b'\n');
            if let Err(e) = self.file.write_all(&line).and_then(|_| self.file.sync_data()) {
                self.error = Some(e);
            }
        }
        self.forward.on_epoch(m);
    }
}

/// Directory of one seed's run under `out`.
pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

pub fn rl_train(
    ctx: &Context,
    inputs: &RlInputs<'_>,
    seed: u64,
    out: &Path,
    observer: &mut dyn RlObserver,
) -> Result<RlRun, CliError> {
    let rl = RLConfig {
        seed,
        ..ctx.config.rl.clone()
    };
    rl.validate()?;
    let reward_path = inputs
        .reward
        .ok_or_else(|| CliError::Usage("rl-train needs --reward".into()))?;
    let (reward_net, reward) = load_scalar(reward_path, "reward checkpoint")?;
    check_shape(ctx, reward_net.obs_shape(), "reward net")?;
    let metric = match inputs.metric_reward {
        Some(p) => Some(load_scalar(p, "metric reward checkpoint")?),
        None => None,
    };
    let policy = match inputs.policy {
        Some(p) => Some(load_policy(p, "policy checkpoint")?),
        None if rl.init_mode != steer_core::rl::InitMode::Random => {
            return Err(CliError::Usage(format!("init mode {:?} needs --policy", rl.init_mode)))
        }
        None => None,
    };
    let safety = match (rl.safety_enabled, inputs.safety) {
        (false, _) => None,
        (true, None) => return Err(CliError::Usage("safety_enabled needs --safety".into())),
        (true, Some(p)) => {
            let (net, loaded) = load_scalar(p, "safety checkpoint")?;
            let (safe_policy, policy_hash) = policy
                .clone()
                .ok_or_else(|| CliError::Usage("the safety gate needs --policy as its fallback".into()))?;
            let details = loaded.manifest.as_ref().map(|m| &m.details);
            let gate: SafetyConfig = details
                .and_then(|d| d.get("gate"))
                .map(|g| serde_json::from_value(g.clone()))
                .transpose()?
                .unwrap_or_default();
            if let Some(recorded) = details.and_then(|d| d.get("safe_policy_sha256")).and_then(|v| v.as_str()) {
                if recorded != policy_hash {
                    return Err(CliError::Usage(
                        "--policy differs from the safe policy recorded with the safety net".into(),
                    ));
                }
            }
            Some((SafetyModule::new(net, safe_policy, gate)?, loaded.hash))
        }
    };

    let dir = seed_dir(out, seed);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    let _ = fs::remove_file(dir.join(ABORT_FILE));
    let metrics_path = dir.join(METRICS_FILE);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&metrics_path)
        .map_err(|e| CliError::io(format!("opening {}", metrics_path.display()), e))?;
    let mut writer = MetricsWriter {
        file,
        error: None,
        forward: observer,
    };

    let mut builder = ManifestBuilder::new("rl-train", &ctx.hash, seed);
    builder.input("reward", reward.hash.clone());
    if let Some((_, m)) = &metric {
        builder.input("metric_reward", m.hash.clone());
    }
    if let Some((_, h)) = &policy {
        builder.input("policy", h.clone());
    }
    if let Some((_, h)) = &safety {
        builder.input("safety", h.clone());
    }

    let setup = RlSetup {
        config: &rl,
        track: ctx.track.clone(),
        env_config: &ctx.config.env,
        reward_net: &reward_net,
        metric_net: metric.as_ref().map(|(n, _)| n),
        safety: safety.as_ref().map(|(m, _)| m),
        policy: policy.as_ref().map(|(p, _)| p),
    };
    let outcome = run_rl(&setup, &mut writer)?;
    if let Some(e) = writer.error.take() {
        return Err(CliError::io(format!("appending to {}", metrics_path.display()), e));
    }
    drop(writer);

    let model_hash = write_model(&dir, outcome.q.network())?;
    if let Some(reason) = &outcome.aborted {
        fs::write(dir.join(ABORT_FILE), format!("{reason}\n"))
            .map_err(|e| CliError::io("writing abort marker", e))?;
    }
    builder
        .output("model.ckpt", model_hash)
        .output(METRICS_FILE, crate::manifest::file_hash(&metrics_path)?)
        .details(json!({
            "kind": "q",
            "input_shape": ctx.obs_shape(),
            "rl": rl,
            "il_init_range": [-IL_INIT_RANGE, IL_INIT_RANGE],
            "push_takeover_transitions": rl.push_takeover_transitions,
            "epochs": outcome.metrics.len(),
            "aborted": outcome.aborted,
        }));
    let manifest = builder.finish();
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(RlRun {
        dir,
        manifest,
        metrics: outcome.metrics,
        aborted: outcome.aborted,
    })
}

/// Which kind of network an evaluated checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluated {
    Policy,
    Q,
}

#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    pub kind: Evaluated,
    pub ticks: usize,
    pub average_reward: f64,
    pub model_sha256: String,
    pub reward_sha256: String,
}

pub fn evaluate(
    ctx: &Context,
    model: &Path,
    reward: &Path,
    ticks: usize,
    out: Option<&Path>,
) -> Result<Evaluation, CliError> {
    if ticks == 0 {
        return Err(CliError::Usage("evaluation needs at least one tick".into()));
    }
    let (reward_net, reward_loaded) = load_scalar(reward, "reward checkpoint")?;
    check_shape(ctx, reward_net.obs_shape(), "reward net")?;
    let loaded = require_model(model, "model checkpoint")?;
    let model_hash = loaded.hash.clone();
    let (kind, average_reward) = match PolicyNet::from_network(loaded.net.clone()) {
        Ok(policy) => {
            check_shape(ctx, policy.obs_shape(), "policy")?;
            let score = evaluate_policy(&mut PolicyDriver(&policy), ctx.track.clone(), &ctx.config.env, &reward_net, ticks)?;
            (Evaluated::Policy, score)
        }
        Err(_) => {
            let q = QNet::from_network(loaded.net).map_err(|_| {
                CliError::Usage(format!("{} holds neither a policy nor a Q network", model.display()))
            })?;
            check_shape(ctx, q.obs_shape(), "Q network")?;
            let score = evaluate_policy(&mut GreedyDriver(&q), ctx.track.clone(), &ctx.config.env, &reward_net, ticks)?;
            (Evaluated::Q, score)
        }
    };
    let evaluation = Evaluation {
        kind,
        ticks,
        average_reward,
        model_sha256: model_hash,
        reward_sha256: reward_loaded.hash,
    };
    if let Some(out) = out {
        let staging = Staging::new(out)?;
        let mut builder = ManifestBuilder::new("evaluate", &ctx.hash, 0);
        builder
            .input("model", evaluation.model_sha256.clone())
            .input("reward", evaluation.reward_sha256.clone())
            .details(serde_json::to_value(&evaluation)?);
        write_json(&staging.path().join(MANIFEST_FILE), &builder.finish())?;
        staging.commit()?;
    }
    Ok(evaluation)
}

/// Reads the run manifest stored next to a stage's outputs.
pub fn read_manifest(dir: &Path) -> Result<RunManifest, CliError> {
    let run = dir.join(RUN_MANIFEST_FILE);
    if run.is_file() {
        read_json(&run)
    } else {
        read_json(&dir.join(MANIFEST_FILE))
    }
}
