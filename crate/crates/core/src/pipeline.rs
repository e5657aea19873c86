//! End-to-end workflow: dataset generation, the three training stages,
//! evaluation and plotting, driven by one TOML file.
//!
//! ```text
//! <out>/run_manifest.jsonl
//! <out>/data/                      dataset (see `scenegen::dataset`)
//! <out>/vaed/{vaed.ckpt,log.csv,metrics.json}
//! <out>/trajvae/{trajectories.traj,trajvae.ckpt,log.csv,metrics.json}
//! <out>/policy/{policy.ckpt,log.csv,validation.json}
//! <out>/eval/{report.json,report.csv,plot.csv,error_ellipse.png,clutter_error.png,overlays/}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{hex_digest, Checkpoint};
use crate::imageio::write_rgb_png;
use crate::kinematics::KinematicChain;
use crate::plot;
use crate::policy::{
    check_compatible, evaluate, policy_inputs, train_policy, EvalConfig, EvalReport,
    LearnedController, Policy, PolicyConfig, PolicyData, PolicyTrainConfig, POLICY_LOG_HEADER,
};
use crate::scenegen::{
    generate_dataset, load_dataset, render_sample, sample_scene_with, sample_seed, DatasetManifest,
    LabelMasks, RandomizationConfig, SceneOverrides, SceneSpec,
};
use crate::trajvae::{
    generate_training_trajectories, reconstruction_rmse, train_trajectory_vae,
    trajectories_for_targets, BetaSchedule, TrajGenConfig, TrajVae, TrajVaeConfig, Workspace,
    DESK_START, TRAJ_LOG_HEADER,
};
use crate::vaed::{pixel_counts, train_vaed, ImageSet, TrainConfig, Vaed, VaedConfig, LOG_HEADER};
use crate::{Error, Result};

/// Environment variable that overrides the output root from the config file.
pub const OUT_ENV: &str = "VISUOMOTOR_OUT";
pub const MANIFEST_FILE: &str = "run_manifest.jsonl";

const SEED_VAED: u64 = 1;
const SEED_TRAJVAE: u64 = 2;
const SEED_POLICY: u64 = 3;
const SEED_POLICY_SCENES: u64 = 4;
const SEED_POLICY_VAL: u64 = 5;
const SEED_EVAL: u64 = 6;
const SEED_HELDOUT: u64 = 7;
const SEED_OVERLAY: u64 = 8;

/// Scenes encoded per work item; fixed so results do not depend on the worker count.
const ENCODE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenegenSection {
    /// Samples written by `gen-data`.
    pub n: u64,
    pub randomization: RandomizationConfig,
}

impl Default for ScenegenSection {
    fn default() -> Self {
        Self {
            n: 5000,
            randomization: RandomizationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaedSection {
    pub model: VaedConfig,
    /// `train.seed` is replaced by a seed derived from `master_seed`.
    pub train: TrainConfig,
    /// Trailing fraction of the dataset held out for validation.
    pub val_fraction: f64,
    pub threshold: f64,
}

impl Default for VaedSection {
    fn default() -> Self {
        let stage = |channels| crate::vaed::ConvStage {
            channels,
            kernel: 4,
            stride: 2,
        };
        Self {
            model: VaedConfig {
                conv_spec: vec![stage(16), stage(32), stage(64), stage(128)],
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 40,
                augment: true,
                ..Default::default()
            },
            val_fraction: 0.1,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajVaeSection {
    pub model: TrajVaeConfig,
    pub schedule: BetaSchedule,
    /// `train.seed` is replaced by a seed derived from `master_seed`.
    pub train: TrainConfig,
    pub generation: TrajGenConfig,
    /// Training targets form an `nx × ny` grid over the scene workspace.
    pub grid: [usize; 2],
    /// Random held-out targets used for the reported reconstruction error.
    pub n_heldout: usize,
}

impl Default for TrajVaeSection {
    fn default() -> Self {
        Self {
            model: TrajVaeConfig::default(),
            schedule: BetaSchedule::default(),
            train: TrainConfig {
                epochs: 1200,
                batch_size: 32,
                learning_rate: 1e-3,
                ..Default::default()
            },
            generation: TrajGenConfig::default(),
            grid: [40, 25],
            n_heldout: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub model: PolicyConfig,
    /// `train.train.seed` is replaced by a seed derived from `master_seed`.
    pub train: PolicyTrainConfig,
    /// Training scenes rendered in memory.
    pub n_scenes: usize,
    pub n_val: usize,
    /// Clutter objects per training scene.
    pub clutter: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            model: PolicyConfig::default(),
            train: PolicyTrainConfig::default(),
            n_scenes: 20_000,
            n_val: 1_000,
            clutter: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KinematicsSection {
    /// JSON chain description. Without it the planar desk arm is used with its
    /// base at the hover height.
    pub chain_file: Option<PathBuf>,
    /// Start configuration; defaults to the desk arm's rest pose.
    pub start: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// `seed` and `workers` are replaced from the run settings.
    pub protocol: EvalConfig,
    /// Scenes rendered for the affordance overlay images.
    pub n_overlays: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            protocol: EvalConfig::default(),
            n_overlays: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub master_seed: u64,
    pub out: PathBuf,
    pub workers: usize,
    pub scenegen: ScenegenSection,
    pub vaed: VaedSection,
    pub trajvae: TrajVaeSection,
    pub policy: PolicySection,
    pub kinematics: KinematicsSection,
    pub evaluation: EvaluationSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            out: PathBuf::from("runs/default"),
            workers: 1,
            scenegen: ScenegenSection::default(),
            vaed: VaedSection::default(),
            trajvae: TrajVaeSection::default(),
            policy: PolicySection::default(),
            kinematics: KinematicsSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

/// Values given on the command line; each one beats the file and the environment.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub n: Option<u64>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads the file (or defaults when `path` is `None`) and applies
    /// `flag > VISUOMOTOR_OUT > file > default`.
    pub fn resolve(
        path: Option<&Path>,
        env_out: Option<PathBuf>,
        overrides: &Overrides,
    ) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        if let Some(out) = env_out {
            cfg.out = out;
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = overrides.seed {
            cfg.master_seed = seed;
        }
        if let Some(w) = overrides.workers {
            cfg.workers = w;
        }
        if let Some(n) = overrides.n {
            cfg.scenegen.n = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Section-local checks plus cross-section dimension agreement.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.scenegen.randomization.validate()?;
        self.vaed.model.geometries()?;
        self.trajvae.model.validate()?;
        self.trajvae.schedule.validate()?;
        self.policy.model.validate()?;
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.scenegen.n == 0 {
            return bad("scenegen.n must be positive".into());
        }
        if self.vaed.model.image_size != self.scenegen.randomization.image_size {
            return bad(format!(
                "vaed.model.image_size {:?} != scenegen image_size {:?}",
                self.vaed.model.image_size, self.scenegen.randomization.image_size
            ));
        }
        if self.vaed.model.n_affordances != LabelMasks::CHANNELS {
            return bad(format!(
                "vaed.model.n_affordances must be {}",
                LabelMasks::CHANNELS
            ));
        }
        if !(0.0..1.0).contains(&self.vaed.val_fraction) {
            return bad("vaed.val_fraction must lie in [0, 1)".into());
        }
        let pm = &self.policy.model;
        if self.vaed.model.latent_dim != pm.latent_dim {
            return bad(format!(
                "vaed latent_dim {} + cam_dim {} != policy input_dim {}",
                self.vaed.model.latent_dim,
                pm.cam_dim,
                pm.input_dim()
            ));
        }
        if pm.cam_dim != crate::policy::CAMERA_FEATURES {
            return bad(format!(
                "policy.model.cam_dim must be {}",
                crate::policy::CAMERA_FEATURES
            ));
        }
        if self.trajvae.model.action_dim != pm.action_dim {
            return bad(format!(
                "trajvae action_dim {} != policy output_dim {}",
                self.trajvae.model.action_dim, pm.action_dim
            ));
        }
        if self.trajvae.model.horizon != self.trajvae.generation.horizon {
            return bad("trajvae.model.horizon must equal trajvae.generation.horizon".into());
        }
        if self.trajvae.grid[0] == 0 || self.trajvae.grid[1] == 0 {
            return bad("trajvae.grid must be positive".into());
        }
        if self.policy.n_scenes == 0 {
            return bad("policy.n_scenes must be positive".into());
        }
        if let Some(p) = &self.kinematics.chain_file {
            if !p.exists() {
                return bad(format!(
                    "kinematics.chain_file {} does not exist",
                    p.display()
                ));
            }
        }
        if let Some(start) = &self.kinematics.start {
            if start.len() != self.trajvae.model.joints {
                return bad("kinematics.start length must equal trajvae.model.joints".into());
            }
        }
        let ev = &self.evaluation.protocol;
        if ev.clutter_levels.is_empty() || ev.cup_shapes.is_empty() {
            return bad("evaluation needs clutter_levels and cup_shapes".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn stage_seed(&self, stage: u64) -> u64 {
        sample_seed(self.master_seed, stage)
    }

    pub fn chain(&self) -> Result<KinematicChain> {
        let chain = match &self.kinematics.chain_file {
            Some(p) => KinematicChain::load(p)?,
            None => KinematicChain::desk_arm(self.trajvae.generation.hover_height),
        };
        if chain.dof() != self.trajvae.model.joints {
            return Err(Error::Config(format!(
                "chain has {} joints, trajvae.model.joints is {}",
                chain.dof(),
                self.trajvae.model.joints
            )));
        }
        Ok(chain)
    }

    pub fn start(&self) -> Vec<f64> {
        self.kinematics
            .start
            .clone()
            .unwrap_or_else(|| DESK_START.to_vec())
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            x: self.scenegen.randomization.workspace_x,
            y: self.scenegen.randomization.workspace_y,
        }
    }

    pub fn paths(&self) -> Paths {
        Paths::new(&self.out)
    }
}

/// Artifact locations under the output root.
#[derive(Clone, Debug)]
pub struct Paths {
    pub root: PathBuf,
    pub data: PathBuf,
    pub vaed_ckpt: PathBuf,
    pub vaed_log: PathBuf,
    pub vaed_metrics: PathBuf,
    pub trajectories: PathBuf,
    pub trajvae_ckpt: PathBuf,
    pub trajvae_log: PathBuf,
    pub trajvae_metrics: PathBuf,
    pub policy_ckpt: PathBuf,
    pub policy_log: PathBuf,
    pub policy_validation: PathBuf,
    pub eval_dir: PathBuf,
    pub report_json: PathBuf,
    pub report_csv: PathBuf,
    pub plot_csv: PathBuf,
    pub ellipse_png: PathBuf,
    pub clutter_png: PathBuf,
    pub overlays: PathBuf,
}

impl Paths {
    pub fn new(root: &Path) -> Self {
        let j = |a: &str, b: &str| root.join(a).join(b);
        Self {
            root: root.to_path_buf(),
            data: root.join("data"),
            vaed_ckpt: j("vaed", "vaed.ckpt"),
            vaed_log: j("vaed", "log.csv"),
            vaed_metrics: j("vaed", "metrics.json"),
            trajectories: j("trajvae", "trajectories.traj"),
            trajvae_ckpt: j("trajvae", "trajvae.ckpt"),
            trajvae_log: j("trajvae", "log.csv"),
            trajvae_metrics: j("trajvae", "metrics.json"),
            policy_ckpt: j("policy", "policy.ckpt"),
            policy_log: j("policy", "log.csv"),
            policy_validation: j("policy", "validation.json"),
            eval_dir: root.join("eval"),
            report_json: j("eval", "report.json"),
            report_csv: j("eval", "report.csv"),
            plot_csv: j("eval", "plot.csv"),
            ellipse_png: j("eval", "error_ellipse.png"),
            clutter_png: j("eval", "clutter_error.png"),
            overlays: j("eval", "overlays"),
        }
    }
}

/// One line of `run_manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub config_hash: String,
    /// Input path → SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub seed: u64,
}

pub fn read_manifest(root: &Path) -> Result<Vec<RunRecord>> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn append_manifest(root: &Path, record: &RunRecord) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex_digest(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// SHA-256 over the manifest and every sample file in manifest order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mpath = dir.join("manifest.json");
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    let mut acc = hex_digest(&bytes);
    for s in &manifest.samples {
        for rel in [&s.rgb, &s.label, &s.meta] {
            acc.push_str(&file_hash(&dir.join(rel))?);
        }
    }
    Ok(hex_digest(acc.as_bytes()))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingDependency {
            artifact: path.to_path_buf(),
            hint: hint.into(),
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &serde_json::to_vec_pretty(value)?)
}

fn csv(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Runtime(format!("thread pool: {e}")))
}

struct Stage<'a> {
    cfg: &'a PipelineConfig,
    name: &'static str,
    seed: u64,
    inputs: BTreeMap<String, String>,
    started: Instant,
}

impl<'a> Stage<'a> {
    fn begin(cfg: &'a PipelineConfig, name: &'static str, seed: u64) -> Result<Self> {
        fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
        log::info!("stage {name} (seed {seed})");
        Ok(Self {
            cfg,
            name,
            seed,
            inputs: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    fn input(&mut self, path: &Path, hash: String) {
        self.inputs.insert(path.display().to_string(), hash);
    }

    fn finish(self, outputs: &[&Path]) -> Result<RunRecord> {
        let mut out = BTreeMap::new();
        for p in outputs {
            let h = if p.is_dir() {
                dataset_hash(p)?
            } else {
                file_hash(p)?
            };
            out.insert(p.display().to_string(), h);
        }
        let record = RunRecord {
            stage: self.name.into(),
            config_hash: self.cfg.hash(),
            inputs: self.inputs,
            outputs: out,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            seed: self.seed,
        };
        append_manifest(&self.cfg.out, &record)?;
        Ok(record)
    }
}

/// Renders `scenegen.n` samples into `<out>/data`.
pub fn cmd_gen_data(cfg: &PipelineConfig) -> Result<RunRecord> {
    let stage = Stage::begin(cfg, "gen-data", cfg.master_seed)?;
    let p = cfg.paths();
    generate_dataset(
        cfg.scenegen.n,
        &cfg.scenegen.randomization,
        &p.data,
        cfg.workers,
        cfg.master_seed,
    )?;
    stage.finish(&[&p.data])
}

/// Pixel F1 of the held-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaedMetrics {
    pub n_train: usize,
    pub n_val: usize,
    pub threshold: f64,
    pub val_pixel_f1: Vec<f64>,
    pub val_mean_f1: f64,
}

pub fn cmd_train_vaed(cfg: &PipelineConfig) -> Result<RunRecord> {
    let seed = cfg.stage_seed(SEED_VAED);
    let mut stage = Stage::begin(cfg, "train-vaed", seed)?;
    let p = cfg.paths();
    require(&p.data.join("manifest.json"), "run `gen-data` first")?;
    stage.input(&p.data, dataset_hash(&p.data)?);
    let data = load_dataset(&p.data, 0.01)?;
    let all = ImageSet::from_dataset(&data)?;
    let n_val = ((all.len() as f64) * cfg.vaed.val_fraction).round() as usize;
    let n_train = all.len() - n_val;
    if n_train == 0 {
        return Err(Error::Input(
            "no VAED training samples after the validation split".into(),
        ));
    }
    let train = all.select(&(0..n_train).collect::<Vec<_>>());
    let val = all.select(&(n_train..all.len()).collect::<Vec<_>>());
    let opt = TrainConfig {
        seed,
        ..cfg.vaed.train.clone()
    };
    let trained = train_vaed(
        &train,
        (n_val > 0).then_some(&val),
        &cfg.vaed.model,
        &opt,
        |_| {},
    )?;
    trained.model.to_checkpoint().write(&p.vaed_ckpt)?;
    write_file(
        &p.vaed_log,
        csv(LOG_HEADER, trained.log.iter().map(|e| e.csv_row())).as_bytes(),
    )?;
    let f1: Vec<f64> = if n_val > 0 {
        pixel_counts(&trained.model, &val, cfg.vaed.threshold as f32, 64)?
            .iter()
            .map(|c| c.f1())
            .collect()
    } else {
        Vec::new()
    };
    let metrics = VaedMetrics {
        n_train,
        n_val,
        threshold: cfg.vaed.threshold,
        val_mean_f1: if f1.is_empty() {
            f64::NAN
        } else {
            f1.iter().sum::<f64>() / f1.len() as f64
        },
        val_pixel_f1: f1,
    };
    log::info!("vaed held-out pixel F1 {:?}", metrics.val_pixel_f1);
    write_json(&p.vaed_metrics, &metrics)?;
    stage.finish(&[&p.vaed_ckpt, &p.vaed_log, &p.vaed_metrics])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajVaeMetrics {
    pub n_train: usize,
    pub unreachable: usize,
    pub train_rmse_per_joint: Vec<f64>,
    pub n_heldout: usize,
    pub heldout_rmse_per_joint: Vec<f64>,
}

/// Uniform random reach targets at the hover height.
pub fn random_targets(ws: &Workspace, hover: f64, n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            [
                rng.random_range(ws.x[0]..=ws.x[1]),
                rng.random_range(ws.y[0]..=ws.y[1]),
                hover,
            ]
        })
        .collect()
}

pub fn cmd_train_trajvae(cfg: &PipelineConfig) -> Result<RunRecord> {
    let seed = cfg.stage_seed(SEED_TRAJVAE);
    let stage = Stage::begin(cfg, "train-trajvae", seed)?;
    let p = cfg.paths();
    let chain = cfg.chain()?;
    let start = cfg.start();
    let gen = &cfg.trajvae.generation;
    let ws = cfg.workspace();
    let [nx, ny] = cfg.trajvae.grid;
    let set = thread_pool(cfg.workers)?
        .install(|| generate_training_trajectories(&chain, &ws, (nx, ny), &start, gen))?;
    set.write(&p.trajectories)?;
    let opt = TrainConfig {
        seed,
        ..cfg.trajvae.train.clone()
    };
    let trained = train_trajectory_vae(
        &set,
        &cfg.trajvae.model,
        &cfg.trajvae.schedule,
        &opt,
        |_| {},
    )?;
    trained.model.to_checkpoint().write(&p.trajvae_ckpt)?;
    write_file(
        &p.trajvae_log,
        csv(TRAJ_LOG_HEADER, trained.log.iter().map(|e| e.csv_row())).as_bytes(),
    )?;
    let targets = random_targets(
        &ws,
        gen.hover_height,
        cfg.trajvae.n_heldout,
        cfg.stage_seed(SEED_HELDOUT),
    );
    let heldout = thread_pool(cfg.workers)?
        .install(|| trajectories_for_targets(&chain, &targets, &start, gen))?;
    let metrics = TrajVaeMetrics {
        n_train: set.len(),
        unreachable: set.unreachable.len(),
        train_rmse_per_joint: reconstruction_rmse(&trained.model, &set)?,
        n_heldout: heldout.len(),
        heldout_rmse_per_joint: if heldout.is_empty() {
            Vec::new()
        } else {
            reconstruction_rmse(&trained.model, &heldout)?
        },
    };
    log::info!("trajvae held-out RMSE {:?}", metrics.heldout_rmse_per_joint);
    write_json(&p.trajvae_metrics, &metrics)?;
    stage.finish(&[
        &p.trajectories,
        &p.trajvae_ckpt,
        &p.trajvae_log,
        &p.trajvae_metrics,
    ])
}

/// Renders `n` scenes from `seed` and encodes them with the VAED mean.
/// Targets are the cup positions lifted to `hover`.
pub fn encode_scenes(
    vaed: &Vaed<f32>,
    scene_cfg: &RandomizationConfig,
    overrides: &SceneOverrides,
    n: usize,
    seed: u64,
    hover: f64,
    workers: usize,
) -> Result<PolicyData> {
    let chunks: Vec<usize> = (0..n).step_by(ENCODE_CHUNK).collect();
    let parts: Vec<Result<EncodedChunk>> = thread_pool(workers)?.install(|| {
        chunks
            .par_iter()
            .map(|&lo| {
                let hi = (lo + ENCODE_CHUNK).min(n);
                let mut images = Vec::with_capacity(hi - lo);
                let mut cameras = Vec::with_capacity(hi - lo);
                let mut targets = Vec::with_capacity(hi - lo);
                for i in lo..hi {
                    let scene = scene_at(scene_cfg, overrides, seed, i as u64)?;
                    let [x, y, _] = scene
                        .cup_position()
                        .ok_or_else(|| Error::Input("scene has no cup".into()))?;
                    images.push(render_sample(&scene).0);
                    cameras.push(scene.camera);
                    targets.push([x, y, hover]);
                }
                Ok((policy_inputs(vaed, &images, &cameras)?, targets))
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(parts.len());
    let mut targets = Vec::with_capacity(n);
    for part in parts {
        let (x, t) = part?;
        rows.push(x);
        targets.extend(t);
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let inputs = if views.is_empty() {
        Array2::zeros((0, vaed.latent_dim() + crate::policy::CAMERA_FEATURES))
    } else {
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Runtime(e.to_string()))?
    };
    Ok(PolicyData { inputs, targets })
}

fn scene_at(
    cfg: &RandomizationConfig,
    overrides: &SceneOverrides,
    seed: u64,
    i: u64,
) -> Result<SceneSpec> {
    let s = sample_seed(seed, i);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let mut scene = sample_scene_with(&mut rng, cfg, overrides)?;
    scene.seed = s;
    Ok(scene)
}

/// Loaded frozen models with the file hashes they were read from.
pub struct FrozenStack {
    pub vaed: Vaed<f32>,
    pub traj: TrajVae<f32>,
    pub vaed_hash: String,
    pub traj_hash: String,
}

/// Latent inputs and reach targets of one chunk of scenes.
type EncodedChunk = (Array2<f64>, Vec<[f64; 3]>);

pub fn load_frozen(p: &Paths) -> Result<FrozenStack> {
    require(&p.vaed_ckpt, "run `train vaed` first")?;
    require(&p.trajvae_ckpt, "run `train trajvae` first")?;
    Ok(FrozenStack {
        vaed: Vaed::from_checkpoint(&Checkpoint::read(&p.vaed_ckpt)?)?,
        traj: TrajVae::from_checkpoint(&Checkpoint::read(&p.trajvae_ckpt)?)?,
        vaed_hash: file_hash(&p.vaed_ckpt)?,
        traj_hash: file_hash(&p.trajvae_ckpt)?,
    })
}

pub fn cmd_train_policy(cfg: &PipelineConfig) -> Result<RunRecord> {
    let seed = cfg.stage_seed(SEED_POLICY);
    let mut stage = Stage::begin(cfg, "train-policy", seed)?;
    let p = cfg.paths();
    let frozen = load_frozen(&p)?;
    stage.input(&p.vaed_ckpt, frozen.vaed_hash.clone());
    stage.input(&p.trajvae_ckpt, frozen.traj_hash.clone());
    let chain = cfg.chain()?;
    let probe = Policy::<f32>::new(cfg.policy.model.clone(), seed)?;
    check_compatible(&frozen.vaed, &probe, &frozen.traj, &chain)?;
    let overrides = SceneOverrides {
        cup_profile: None,
        clutter_count: Some(cfg.policy.clutter),
    };
    let hover = cfg.trajvae.generation.hover_height;
    let sc = &cfg.scenegen.randomization;
    let started = Instant::now();
    let train = encode_scenes(
        &frozen.vaed,
        sc,
        &overrides,
        cfg.policy.n_scenes,
        cfg.stage_seed(SEED_POLICY_SCENES),
        hover,
        cfg.workers,
    )?;
    let val = encode_scenes(
        &frozen.vaed,
        sc,
        &overrides,
        cfg.policy.n_val,
        cfg.stage_seed(SEED_POLICY_VAL),
        hover,
        cfg.workers,
    )?;
    log::info!(
        "encoded {} + {} scenes in {:?}",
        train.len(),
        val.len(),
        started.elapsed()
    );
    let mut opt = cfg.policy.train.clone();
    opt.train.seed = seed;
    let trained = train_policy(
        &train,
        &val,
        &frozen.traj,
        &chain,
        &cfg.policy.model,
        &opt,
        |_| {},
    )?;
    trained.policy.to_checkpoint().write(&p.policy_ckpt)?;
    write_file(
        &p.policy_log,
        csv(POLICY_LOG_HEADER, trained.log.iter().map(|e| e.csv_row())).as_bytes(),
    )?;
    write_json(&p.policy_validation, &trained.report)?;
    if file_hash(&p.vaed_ckpt)? != frozen.vaed_hash
        || file_hash(&p.trajvae_ckpt)? != frozen.traj_hash
    {
        return Err(Error::Runtime(
            "frozen checkpoints changed during policy training".into(),
        ));
    }
    stage.finish(&[&p.policy_ckpt, &p.policy_log, &p.policy_validation])
}

pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<RunRecord> {
    let seed = cfg.stage_seed(SEED_EVAL);
    let mut stage = Stage::begin(cfg, "evaluate", seed)?;
    let p = cfg.paths();
    let frozen = load_frozen(&p)?;
    require(&p.policy_ckpt, "run `train policy` first")?;
    let policy = Policy::<f32>::from_checkpoint(&Checkpoint::read(&p.policy_ckpt)?)?;
    stage.input(&p.vaed_ckpt, frozen.vaed_hash.clone());
    stage.input(&p.trajvae_ckpt, frozen.traj_hash.clone());
    stage.input(&p.policy_ckpt, file_hash(&p.policy_ckpt)?);
    let chain = cfg.chain()?;
    check_compatible(&frozen.vaed, &policy, &frozen.traj, &chain)?;
    let controller = LearnedController {
        vaed: &frozen.vaed,
        policy: &policy,
        traj: &frozen.traj,
        chain: &chain,
    };
    let ec = EvalConfig {
        seed,
        workers: cfg.workers,
        ..cfg.evaluation.protocol.clone()
    };
    let report = evaluate(&controller, &cfg.scenegen.randomization, &ec)?;
    write_json(&p.report_json, &report)?;
    write_file(&p.report_csv, report.rows_csv().as_bytes())?;
    write_file(&p.plot_csv, report.plot_csv().as_bytes())?;
    let mut outputs = vec![
        p.report_json.clone(),
        p.report_csv.clone(),
        p.plot_csv.clone(),
    ];
    outputs.extend(write_plots(cfg, &report, &frozen.vaed)?);
    let refs: Vec<&Path> = outputs.iter().map(|x| x.as_path()).collect();
    stage.finish(&refs)
}

/// Re-renders the plot images from an existing evaluation report.
pub fn cmd_plot(cfg: &PipelineConfig) -> Result<RunRecord> {
    let mut stage = Stage::begin(cfg, "plot", cfg.stage_seed(SEED_OVERLAY))?;
    let p = cfg.paths();
    require(&p.report_json, "run `evaluate` first")?;
    require(&p.vaed_ckpt, "run `train vaed` first")?;
    let bytes = fs::read(&p.report_json).map_err(|e| Error::io(&p.report_json, e))?;
    let report: EvalReport = serde_json::from_slice(&bytes)?;
    stage.input(&p.report_json, hex_digest(&bytes));
    stage.input(&p.vaed_ckpt, file_hash(&p.vaed_ckpt)?);
    let vaed = Vaed::from_checkpoint(&Checkpoint::read(&p.vaed_ckpt)?)?;
    let outputs = write_plots(cfg, &report, &vaed)?;
    let refs: Vec<&Path> = outputs.iter().map(|x| x.as_path()).collect();
    stage.finish(&refs)
}

/// Predicted affordance masks: VAED decode of the latent mean, thresholded.
pub fn predict_masks(
    vaed: &Vaed<f32>,
    image: &crate::scenegen::RgbImage,
    threshold: f64,
) -> Result<LabelMasks> {
    let mu = vaed.encode(image)?.mu;
    let probs = vaed.decode(&mu)?;
    let (c, h, w) = probs.dim();
    if c != LabelMasks::CHANNELS {
        return Err(Error::Config(format!("vaed predicts {c} channels")));
    }
    Ok(LabelMasks {
        height: h,
        width: w,
        data: probs.iter().map(|&v| u8::from(v >= threshold)).collect(),
    })
}

fn write_plots(
    cfg: &PipelineConfig,
    report: &EvalReport,
    vaed: &Vaed<f32>,
) -> Result<Vec<PathBuf>> {
    let p = cfg.paths();
    let mut written = Vec::new();
    let ellipse = plot::error_ellipse_plot(report, 480)?;
    write_rgb_png(&mk_parent(&p.ellipse_png)?, &ellipse)?;
    written.push(p.ellipse_png.clone());
    let curve = plot::clutter_curve_plot(report, 480, 320)?;
    write_rgb_png(&p.clutter_png, &curve)?;
    written.push(p.clutter_png.clone());
    fs::create_dir_all(&p.overlays).map_err(|e| Error::io(&p.overlays, e))?;
    let clutter = cfg
        .evaluation
        .protocol
        .clutter_levels
        .iter()
        .copied()
        .max()
        .unwrap_or(0);
    let overrides = SceneOverrides {
        cup_profile: None,
        clutter_count: Some(clutter),
    };
    let seed = cfg.stage_seed(SEED_OVERLAY);
    for i in 0..cfg.evaluation.n_overlays {
        let scene = scene_at(&cfg.scenegen.randomization, &overrides, seed, i as u64)?;
        let (rgb, truth) = render_sample(&scene);
        let pred = predict_masks(vaed, &rgb, cfg.vaed.threshold)?;
        let panel = plot::hstack(&[
            plot::upscale(&rgb, 4),
            plot::upscale(&plot::affordance_overlay(&rgb, &pred, 0.6)?, 4),
            plot::upscale(&plot::affordance_overlay(&rgb, &truth, 0.6)?, 4),
        ])?;
        let path = p.overlays.join(format!("overlay_{i:03}.png"));
        write_rgb_png(&path, &panel)?;
        written.push(path);
    }
    Ok(written)
}

fn mk_parent(path: &Path) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(path.to_path_buf())
}

/// Human-readable checkpoint listing. Undecodable files give a parse error.
pub fn cmd_inspect(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    Ok(format!(
        "file:           {}\nsha256:         {}\n{}",
        path.display(),
        hex_digest(&bytes),
        ck.summary()
    ))
}

/// Runs every stage in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<RunRecord>> {
    Ok(vec![
        cmd_gen_data(cfg)?,
        cmd_train_vaed(cfg)?,
        cmd_train_trajvae(cfg)?,
        cmd_train_policy(cfg)?,
        cmd_evaluate(cfg)?,
    ])
}
