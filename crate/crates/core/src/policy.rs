//! Policy head mapping a latent affordance state and camera features to a
//! latent action, trained through the frozen trajectory decoder and forward
//! kinematics, plus the simulated placement evaluation.

use nalgebra::Vector3;
use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::kinematics::{fk_position, position_vjp, KinematicChain};
use crate::metrics::{position_error, PositionError};
use crate::nn::{Adam, Mlp, Module, Scalar};
use crate::scenegen::{
    render_sample, sample_scene_with, sample_seed, CameraPose, CupProfile, RandomizationConfig,
    RgbImage, SceneOverrides, SceneSpec,
};
use crate::trajvae::{plan_reach, TrajGenConfig, TrajVae};
use crate::vaed::{images_to_tensor, TrainConfig, Vaed};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "policy";
pub const CAMERA_FEATURES: usize = 7;
pub const BALL_RADIUS: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub latent_dim: usize,
    pub cam_dim: usize,
    pub hidden: Vec<usize>,
    pub action_dim: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            latent_dim: 10,
            cam_dim: CAMERA_FEATURES,
            hidden: vec![128, 64, 32],
            action_dim: 5,
        }
    }
}

impl PolicyConfig {
    pub fn input_dim(&self) -> usize {
        self.latent_dim + self.cam_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.len() != 3 || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "policy: expected exactly 3 non-zero hidden widths, got {:?}",
                self.hidden
            )));
        }
        if self.input_dim() == 0 || self.action_dim == 0 {
            return Err(Error::Config(
                "policy: input and action dims must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyInput {
    pub s: Vec<f64>,
    pub cam: Vec<f64>,
}

impl PolicyInput {
    pub fn concat(&self) -> Vec<f64> {
        self.s.iter().chain(&self.cam).copied().collect()
    }
}

/// Three hidden fully connected layers with fixed input standardisation.
#[derive(Clone, Debug)]
pub struct Policy<T> {
    pub config: PolicyConfig,
    mlp: Mlp<T>,
    offset: Array1<T>,
    scale: Array1<T>,
}

impl<T: Scalar> Policy<T> {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = &config.hidden;
        let n = config.input_dim();
        let mut mlp = Mlp::new(&[n, h[0], h[1], h[2], config.action_dim], &mut rng);
        let last = mlp.layers.len() - 1;
        mlp.layers[last].weight.mapv_inplace(|v| v * T::of(0.1));
        Ok(Self {
            mlp,
            offset: Array1::zeros(n),
            scale: Array1::ones(n),
            config,
        })
    }

    pub fn fit_normalization(&mut self, inputs: &Array2<f64>) {
        let n = inputs.nrows().max(1) as f64;
        let mean = inputs.sum_axis(Axis(0)) / n;
        let var = inputs
            .axis_iter(Axis(0))
            .fold(Array1::<f64>::zeros(mean.len()), |acc, r| {
                acc + (&r - &mean).mapv(|d| d * d)
            })
            / n;
        self.offset = mean.mapv(T::of);
        self.scale = var.mapv(|v| T::of(v.sqrt().max(1e-6)));
    }

    fn check(&self, x: &Array2<T>) -> Result<()> {
        if x.ncols() != self.config.input_dim() {
            return Err(Error::Input(format!(
                "policy input has {} dims, model expects {}",
                x.ncols(),
                self.config.input_dim()
            )));
        }
        Ok(())
    }

    /// `(B, latent + cam)` to `(B, action_dim)`.
    pub fn forward_batch(&self, x: &Array2<T>) -> Result<Array2<T>> {
        self.check(x)?;
        Ok(self.mlp.forward(&((x - &self.offset) / &self.scale)))
    }

    pub fn forward(&self, input: &PolicyInput) -> Result<Vec<f64>> {
        if input.s.len() != self.config.latent_dim || input.cam.len() != self.config.cam_dim {
            return Err(Error::Input(format!(
                "policy input dims ({}, {}) do not match config ({}, {})",
                input.s.len(),
                input.cam.len(),
                self.config.latent_dim,
                self.config.cam_dim
            )));
        }
        let x = row(&input.concat());
        Ok(self
            .forward_batch(&x)?
            .row(0)
            .iter()
            .map(|v| v.as_f64())
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_module(
            CHECKPOINT_KIND,
            serde_json::to_value(&self.config).expect("config serializes"),
            self,
        );
        let n = self.offset.len();
        ck.push(
            "norm.offset",
            vec![n],
            self.offset.iter().map(|v| v.as_f64() as f32).collect(),
        );
        ck.push(
            "norm.scale",
            vec![n],
            self.scale.iter().map(|v| v.as_f64() as f32).collect(),
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Config(format!(
                "expected a `{CHECKPOINT_KIND}` checkpoint, found `{}`",
                ck.kind
            )));
        }
        let config: PolicyConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Config(format!("policy checkpoint config: {e}")))?;
        let mut model = Self::new(config, 0)?;
        ck.load_into(&mut model)?;
        let n = model.config.input_dim();
        for (name, dst) in [
            ("norm.offset", &mut model.offset),
            ("norm.scale", &mut model.scale),
        ] {
            let t = ck
                .tensor(name)
                .filter(|t| t.shape == [n])
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{name}` of length {n}")))?;
            *dst = t.data.iter().map(|&v| T::of(v as f64)).collect();
        }
        Ok(model)
    }
}

impl<T: Scalar> Module<T> for Policy<T> {
    fn named_params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        self.mlp.params("fc")
    }

    fn named_params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        self.mlp.params_mut("fc")
    }
}

fn row<T: Scalar>(v: &[f64]) -> Array2<T> {
    Array2::from_shape_vec((1, v.len()), v.iter().map(|&x| T::of(x)).collect()).expect("row vector")
}

/// Checks that the three models agree on the latent, camera and action sizes.
pub fn check_compatible<T: Scalar>(
    vaed: &Vaed<T>,
    policy: &Policy<T>,
    traj: &TrajVae<T>,
    chain: &KinematicChain,
) -> Result<()> {
    let pc = &policy.config;
    if vaed.latent_dim() != pc.latent_dim {
        return Err(Error::Config(format!(
            "vaed latent_dim {} != policy latent_dim {}",
            vaed.latent_dim(),
            pc.latent_dim
        )));
    }
    if pc.cam_dim != CAMERA_FEATURES {
        return Err(Error::Config(format!(
            "policy cam_dim must be {CAMERA_FEATURES}"
        )));
    }
    if traj.action_dim() != pc.action_dim {
        return Err(Error::Config(format!(
            "trajvae action_dim {} != policy action_dim {}",
            traj.action_dim(),
            pc.action_dim
        )));
    }
    if traj.config.joints != chain.dof() {
        return Err(Error::Config(format!(
            "trajvae has {} joints, chain has {}",
            traj.config.joints,
            chain.dof()
        )));
    }
    Ok(())
}

/// One supervised sample: an observation and the cup position it shows.
#[derive(Clone, Debug)]
pub struct EndToEndSample {
    pub image: RgbImage,
    pub camera: CameraPose,
    pub target: [f64; 3],
}

/// Final end-effector position reached by the decoded trajectory of each
/// action row.
pub fn final_positions<T: Scalar>(
    traj: &TrajVae<T>,
    chain: &KinematicChain,
    actions: &Array2<T>,
) -> Result<Vec<Vector3<f64>>> {
    let u = traj.decode_batch(actions)?;
    let j = traj.config.joints;
    let start = (traj.config.horizon - 1) * j;
    u.axis_iter(Axis(0))
        .map(|r| {
            let q: Vec<f64> = r.slice(s![start..]).iter().map(|v| v.as_f64()).collect();
            fk_position(chain, &q)
        })
        .collect()
}

/// Mean over the batch of `‖FK(u_T) − target‖²` for raw policy inputs, and
/// its gradient with respect to the policy parameters only.
pub fn latent_loss_and_grad<T: Scalar>(
    policy: &Policy<T>,
    traj: &TrajVae<T>,
    chain: &KinematicChain,
    inputs: &Array2<T>,
    targets: &[[f64; 3]],
) -> Result<(f64, Policy<T>)> {
    policy.check(inputs)?;
    if inputs.nrows() != targets.len() {
        return Err(Error::Input("inputs and targets differ in length".into()));
    }
    let batch = targets.len().max(1) as f64;
    let xn = (inputs - &policy.offset) / &policy.scale;
    let (actions, cache) = policy.mlp.forward_cached(&xn);
    let j = traj.config.joints;
    let start = (traj.config.horizon - 1) * j;
    let mut loss = 0.0;
    let mut fault = None;
    let (_, grad_a) = traj.decode_with_vjp(&actions, |u| {
        let mut g = Array2::<T>::zeros(u.raw_dim());
        for (b, target) in targets.iter().enumerate() {
            let q: Vec<f64> = u.slice(s![b, start..]).iter().map(|v| v.as_f64()).collect();
            let step = fk_position(chain, &q).and_then(|p| {
                let d = p - Vector3::from(*target);
                loss += d.norm_squared();
                position_vjp(chain, &q, &(d * (2.0 / batch)))
            });
            match step {
                Ok(gq) => {
                    for (k, v) in gq.iter().enumerate() {
                        g[[b, start + k]] = T::of(*v);
                    }
                }
                Err(e) => fault = Some(e),
            }
        }
        g
    })?;
    if let Some(e) = fault {
        return Err(e);
    }
    let mut grads = policy.clone();
    grads.fill_zero();
    policy.mlp.backward(&cache, &grad_a, &mut grads.mlp);
    Ok((loss / batch, grads))
}

/// Loss of one sample through the whole frozen stack: the posterior mean of
/// the image, concatenated with the camera features, through the policy, the
/// trajectory decoder and forward kinematics.
pub fn end_to_end_loss<T: Scalar>(
    sample: &EndToEndSample,
    vaed: &Vaed<T>,
    policy: &Policy<T>,
    traj: &TrajVae<T>,
    chain: &KinematicChain,
) -> Result<f64> {
    end_to_end_loss_and_grad(sample, vaed, policy, traj, chain).map(|(l, _)| l)
}

pub fn end_to_end_loss_and_grad<T: Scalar>(
    sample: &EndToEndSample,
    vaed: &Vaed<T>,
    policy: &Policy<T>,
    traj: &TrajVae<T>,
    chain: &KinematicChain,
) -> Result<(f64, Policy<T>)> {
    check_compatible(vaed, policy, traj, chain)?;
    let x = policy_inputs(
        vaed,
        std::slice::from_ref(&sample.image),
        std::slice::from_ref(&sample.camera),
    )?;
    latent_loss_and_grad(policy, traj, chain, &x.mapv(T::of), &[sample.target])
}

/// Raw policy inputs `[μ(image) ⧺ camera features]` for a list of observations.
pub fn policy_inputs<T: Scalar>(
    vaed: &Vaed<T>,
    images: &[RgbImage],
    cameras: &[CameraPose],
) -> Result<Array2<f64>> {
    if images.len() != cameras.len() {
        return Err(Error::Input("images and cameras differ in length".into()));
    }
    let l = vaed.latent_dim();
    let mut out = Array2::zeros((images.len(), l + CAMERA_FEATURES));
    for (start, chunk) in (0..images.len())
        .step_by(64)
        .map(|s| (s, &images[s..(s + 64).min(images.len())]))
    {
        let (mu, _) = vaed.encode_batch(&images_to_tensor::<T>(chunk))?;
        for r in 0..chunk.len() {
            for d in 0..l {
                out[[start + r, d]] = mu[[r, d]].as_f64();
            }
            for (d, v) in cameras[start + r].features().iter().enumerate() {
                out[[start + r, l + d]] = *v;
            }
        }
    }
    Ok(out)
}

/// Pre-encoded policy data: raw inputs and target positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyData {
    pub inputs: Array2<f64>,
    pub targets: Vec<[f64; 3]>,
}

impl PolicyData {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub n: usize,
    pub mean_m: f64,
    pub median_m: f64,
    pub p90_m: f64,
    pub p95_m: f64,
    pub max_m: f64,
    pub success_rate: f64,
}

impl ErrorSummary {
    /// `errors` are planar distances; success is `error ≤ tolerance`.
    pub fn from_errors(errors: &[f64], tolerance: f64) -> Self {
        if errors.is_empty() {
            return Self {
                n: 0,
                mean_m: 0.0,
                median_m: 0.0,
                p90_m: 0.0,
                p95_m: 0.0,
                max_m: 0.0,
                success_rate: 0.0,
            };
        }
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let pct = |p: f64| {
            sorted[((p * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)]
        };
        Self {
            n: errors.len(),
            mean_m: errors.iter().sum::<f64>() / errors.len() as f64,
            median_m: pct(0.5),
            p90_m: pct(0.9),
            p95_m: pct(0.95),
            max_m: *sorted.last().expect("non-empty"),
            success_rate: errors.iter().filter(|&&e| e <= tolerance).count() as f64
                / errors.len() as f64,
        }
    }
}

/// Planar errors of the policy on a data set.
pub fn planar_errors<T: Scalar>(
    policy: &Policy<T>,
    traj: &TrajVae<T>,
    chain: &KinematicChain,
    data: &PolicyData,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let x = data.inputs.select(Axis(0), chunk).mapv(T::of);
        let a = policy.forward_batch(&x)?;
        for (p, &i) in final_positions(traj, chain, &a)?.iter().zip(chunk) {
            out.push(position_error(&[p.x, p.y, p.z], &data.targets[i]).err);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_err: f64,
}

pub const POLICY_LOG_HEADER: &str = "epoch,train_loss,val_mean_err";

impl PolicyEpochLog {
    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.epoch, self.train_loss, self.val_mean_err)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub planar: ErrorSummary,
    pub inner_radius: f64,
    pub ball_radius: f64,
}

pub struct TrainedPolicy {
    pub policy: Policy<f32>,
    pub log: Vec<PolicyEpochLog>,
    pub report: ValidationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyTrainConfig {
    pub train: TrainConfig,
    /// Multiplies the learning rate by `lr_decay` at every epoch.
    pub lr_decay: f64,
    pub inner_radius: f64,
    pub ball_radius: f64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 60,
                batch_size: 64,
                learning_rate: 1e-3,
                seed: 0,
                augment: false,
            },
            lr_decay: 0.97,
            inner_radius: 0.04,
            ball_radius: BALL_RADIUS,
        }
    }
}

/// Supervised training of the policy through the frozen decoder. The frozen
/// models are borrowed immutably, so only the policy can change.
pub fn train_policy(
    train: &PolicyData,
    val: &PolicyData,
    traj: &TrajVae<f32>,
    chain: &KinematicChain,
    config: &PolicyConfig,
    opt: &PolicyTrainConfig,
    mut on_epoch: impl FnMut(&PolicyEpochLog),
) -> Result<TrainedPolicy> {
    if train.is_empty() {
        return Err(Error::Input("policy training set is empty".into()));
    }
    if opt.inner_radius <= opt.ball_radius {
        return Err(Error::Config("inner_radius must exceed ball_radius".into()));
    }
    let mut policy = Policy::<f32>::new(config.clone(), opt.train.seed)?;
    if train.inputs.ncols() != config.input_dim() {
        return Err(Error::Config(format!(
            "policy data has {} input dims, config expects {}",
            train.inputs.ncols(),
            config.input_dim()
        )));
    }
    if traj.action_dim() != config.action_dim || traj.config.joints != chain.dof() {
        return Err(Error::Config(
            "trajectory decoder does not match policy or chain".into(),
        ));
    }
    policy.fit_normalization(&train.inputs);
    let mut adam = Adam::new(opt.train.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(opt.train.seed ^ 0x9011_C7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let bs = opt.train.batch_size.max(1);
    let mut log = Vec::with_capacity(opt.train.epochs);
    for epoch in 0..opt.train.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(bs) {
            let x = train.inputs.select(Axis(0), chunk).mapv(|v| v as f32);
            let targets: Vec<[f64; 3]> = chunk.iter().map(|&i| train.targets[i]).collect();
            let (loss, grads) = latent_loss_and_grad(&policy, traj, chain, &x, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Runtime(format!(
                    "policy loss diverged at epoch {epoch}"
                )));
            }
            adam.step(&mut policy, &grads);
            sum += loss * chunk.len() as f64;
        }
        adam.lr *= opt.lr_decay;
        let val_mean_err = if val.is_empty() {
            f64::NAN
        } else {
            let e = planar_errors(&policy, traj, chain, val)?;
            e.iter().sum::<f64>() / e.len() as f64
        };
        let entry = PolicyEpochLog {
            epoch,
            train_loss: sum / train.len() as f64,
            val_mean_err,
        };
        log::info!(
            "policy epoch {epoch}: loss {:.3e} val err {:.4} m",
            entry.train_loss,
            entry.val_mean_err
        );
        on_epoch(&entry);
        log.push(entry);
    }
    let errors = planar_errors(&policy, traj, chain, val)?;
    let report = ValidationReport {
        planar: ErrorSummary::from_errors(&errors, opt.inner_radius - opt.ball_radius),
        inner_radius: opt.inner_radius,
        ball_radius: opt.ball_radius,
    };
    Ok(TrainedPolicy {
        policy,
        log,
        report,
    })
}

/// The ball lands inside the cup iff the planar offset leaves room for it.
pub fn success_predicate(
    final_pos: &[f64; 3],
    cup_pos: &[f64; 3],
    inner_radius: f64,
    ball_radius: f64,
) -> Result<bool> {
    if !(inner_radius > ball_radius) {
        return Err(Error::Config(format!(
            "inner radius {inner_radius} must exceed ball radius {ball_radius}"
        )));
    }
    let d = (final_pos[0] - cup_pos[0]).hypot(final_pos[1] - cup_pos[1]);
    Ok(d <= inner_radius - ball_radius)
}

/// What a controller sees in one trial. `scene` is ground truth and only
/// oracle controllers may look at it.
pub struct Observation<'a> {
    pub image: &'a RgbImage,
    pub camera: &'a CameraPose,
    pub scene: &'a SceneSpec,
}

/// Anything that picks a final end-effector position from an observation.
pub trait Controller: Sync {
    fn final_position(&self, obs: &Observation<'_>) -> Result<[f64; 3]>;
}

/// The trained stack: VAED mean, policy, trajectory decoder, forward kinematics.
pub struct LearnedController<'a> {
    pub vaed: &'a Vaed<f32>,
    pub policy: &'a Policy<f32>,
    pub traj: &'a TrajVae<f32>,
    pub chain: &'a KinematicChain,
}

impl Controller for LearnedController<'_> {
    fn final_position(&self, obs: &Observation<'_>) -> Result<[f64; 3]> {
        let x = policy_inputs(
            self.vaed,
            std::slice::from_ref(obs.image),
            std::slice::from_ref(obs.camera),
        )?;
        let a = self.policy.forward_batch(&x.mapv(|v| v as f32))?;
        let p = final_positions(self.traj, self.chain, &a)?[0];
        Ok([p.x, p.y, p.z])
    }
}

/// Plans straight to the true cup position with IK.
pub struct OracleController<'a> {
    pub chain: &'a KinematicChain,
    pub start: Vec<f64>,
    pub gen: TrajGenConfig,
}

impl Controller for OracleController<'_> {
    fn final_position(&self, obs: &Observation<'_>) -> Result<[f64; 3]> {
        let [x, y, _] = obs
            .scene
            .cup_position()
            .ok_or_else(|| Error::Input("scene has no cup".into()))?;
        let target = Vector3::new(x, y, self.gen.hover_height);
        let traj = plan_reach(self.chain, &self.start, &target, &self.gen)?;
        let p = fk_position(self.chain, traj.last())?;
        Ok([p.x, p.y, p.z])
    }
}

/// Named cup silhouettes used as evaluation conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CupShape {
    /// A fresh random profile per trial.
    Random,
    Cylinder,
    /// Narrow base widening towards the rim.
    Flared,
    /// Widest at mid height.
    Barrel,
}

impl CupShape {
    pub fn name(self) -> &'static str {
        match self {
            CupShape::Random => "random",
            CupShape::Cylinder => "cylinder",
            CupShape::Flared => "flared",
            CupShape::Barrel => "barrel",
        }
    }

    /// Fixed profile for this shape within the configured ranges.
    pub fn profile(self, cfg: &RandomizationConfig) -> Option<CupProfile> {
        let [r0, r1] = cfg.cup_radius;
        let h = 0.5 * (cfg.cup_height[0] + cfg.cup_height[1]);
        let n = cfg.cup_samples.max(4);
        let lo = r0.max(r1 / cfg.cup_max_ratio);
        let mid = 0.5 * (lo + r1);
        let radius_at = |f: f64| -> f64 {
            match self {
                CupShape::Cylinder => mid,
                CupShape::Flared => lo + (r1 - lo) * f,
                CupShape::Barrel => lo + (r1 - lo) * (1.0 - (2.0 * f - 1.0).powi(2)),
                CupShape::Random => unreachable!(),
            }
        };
        if self == CupShape::Random {
            return None;
        }
        let mut p = CupProfile::cylinder(mid, h, n, cfg.cup_split_height);
        for (i, r) in p.radii.iter_mut().enumerate() {
            *r = radius_at(i as f64 / (n - 1) as f64).clamp(r0, r1);
        }
        Some(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_trials: usize,
    pub clutter_levels: Vec<usize>,
    pub cup_shapes: Vec<CupShape>,
    pub inner_radius: f64,
    pub ball_radius: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_trials: 300,
            clutter_levels: vec![0, 5, 10],
            cup_shapes: vec![CupShape::Random],
            inner_radius: 0.04,
            ball_radius: BALL_RADIUS,
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: String,
    pub clutter: usize,
    pub cup_shape: CupShape,
    pub n: usize,
    pub mean_err_m: f64,
    pub x_err_m: f64,
    pub y_err_m: f64,
    pub success_rate: f64,
}

/// One evaluated trial, also the plot data row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub condition: String,
    /// True cup position.
    pub x: f64,
    pub y: f64,
    /// Signed planar offset of the final position from the cup.
    pub err_x: f64,
    pub err_y: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_trials: usize,
    pub inner_radius: f64,
    pub ball_radius: f64,
    pub rows: Vec<ConditionRow>,
    pub trials: Vec<TrialRecord>,
}

pub const REPORT_CSV_HEADER: &str = "condition,n,mean_err_m,x_err_m,y_err_m,success_rate";
pub const PLOT_CSV_HEADER: &str = "x,y,err_x,err_y";

impl EvalReport {
    pub fn rows_csv(&self) -> String {
        let mut s = format!("{REPORT_CSV_HEADER}\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{},{}\n",
                r.condition, r.n, r.mean_err_m, r.x_err_m, r.y_err_m, r.success_rate
            );
        }
        s
    }

    pub fn plot_csv(&self) -> String {
        let mut s = format!("{PLOT_CSV_HEADER}\n");
        for t in &self.trials {
            s += &format!("{},{},{},{}\n", t.x, t.y, t.err_x, t.err_y);
        }
        s
    }
}

/// Runs `n_trials` placement trials spread round-robin over every
/// (clutter level, cup shape) condition. Trial `i` uses the scene seeded by
/// `sample_seed(seed, i)`, so results do not depend on `workers`.
pub fn evaluate(
    controller: &dyn Controller,
    scene_cfg: &RandomizationConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.clutter_levels.is_empty() || cfg.cup_shapes.is_empty() {
        return Err(Error::Config(
            "evaluation needs at least one clutter level and cup shape".into(),
        ));
    }
    if !(cfg.inner_radius > cfg.ball_radius) {
        return Err(Error::Config("inner_radius must exceed ball_radius".into()));
    }
    let conditions: Vec<(usize, CupShape)> = cfg
        .clutter_levels
        .iter()
        .flat_map(|&c| cfg.cup_shapes.iter().map(move |&s| (c, s)))
        .collect();
    let name = |(c, s): (usize, CupShape)| format!("clutter{c}_{}", s.name());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Runtime(format!("thread pool: {e}")))?;
    let trials: Vec<Result<(usize, PositionError, TrialRecord)>> = pool.install(|| {
        (0..cfg.n_trials)
            .into_par_iter()
            .map(|i| {
                let ci = i % conditions.len();
                let (clutter, shape) = conditions[ci];
                let seed = sample_seed(cfg.seed, i as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let overrides = SceneOverrides {
                    cup_profile: shape.profile(scene_cfg),
                    clutter_count: Some(clutter),
                };
                let mut scene = sample_scene_with(&mut rng, scene_cfg, &overrides)?;
                scene.seed = seed;
                let (image, _) = render_sample(&scene);
                let obs = Observation {
                    image: &image,
                    camera: &scene.camera,
                    scene: &scene,
                };
                let fin = controller.final_position(&obs)?;
                let cup = scene
                    .cup_position()
                    .ok_or_else(|| Error::Input("scene has no cup".into()))?;
                let err = position_error(&fin, &cup);
                let success = success_predicate(&fin, &cup, cfg.inner_radius, cfg.ball_radius)?;
                Ok((
                    ci,
                    err,
                    TrialRecord {
                        trial: i,
                        condition: name(conditions[ci]),
                        x: cup[0],
                        y: cup[1],
                        err_x: fin[0] - cup[0],
                        err_y: fin[1] - cup[1],
                        success,
                    },
                ))
            })
            .collect()
    });
    let mut sums = vec![(0usize, 0.0, 0.0, 0.0, 0usize); conditions.len()];
    let mut records = Vec::with_capacity(cfg.n_trials);
    for t in trials {
        let (ci, e, rec) = t?;
        let s = &mut sums[ci];
        s.0 += 1;
        s.1 += e.err;
        s.2 += e.x_err;
        s.3 += e.y_err;
        s.4 += usize::from(rec.success);
        records.push(rec);
    }
    let rows = conditions
        .iter()
        .zip(&sums)
        .map(|(&(clutter, shape), &(n, err, xe, ye, ok))| {
            let d = n.max(1) as f64;
            ConditionRow {
                condition: name((clutter, shape)),
                clutter,
                cup_shape: shape,
                n,
                mean_err_m: err / d,
                x_err_m: xe / d,
                y_err_m: ye / d,
                success_rate: ok as f64 / d,
            }
        })
        .collect();
    Ok(EvalReport {
        n_trials: cfg.n_trials,
        inner_radius: cfg.inner_radius,
        ball_radius: cfg.ball_radius,
        rows,
        trials: records,
    })
}
