//! Variational autoencoder over fixed-length joint-space trajectories.
//!
//! The decoder turns a low-dimensional action into a `T × J` trajectory and is
//! differentiable with respect to the action, which the policy stage relies on.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::kinematics::{fk_position, inverse_kinematics, IkOptions, KinematicChain};
use crate::nn::{Adam, Mlp, MlpCache, Module, Scalar};
use crate::vaed::{LatentDistribution, TrainConfig, LOGVAR_MAX, LOGVAR_MIN};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "trajvae";
const TRAJ_MAGIC: &[u8; 8] = b"VMTRAJ\0\0";
const TRAJ_FORMAT_VERSION: u32 = 1;

/// Row-major `steps × joints` joint positions in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: usize,
    pub joints: usize,
    pub data: Vec<f64>,
}

impl Trajectory {
    pub fn new(steps: usize, joints: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != steps * joints {
            return Err(Error::Input(format!(
                "trajectory data has {} entries, expected {steps}x{joints}",
                data.len()
            )));
        }
        Ok(Self {
            steps,
            joints,
            data,
        })
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.data[t * self.joints..(t + 1) * self.joints]
    }

    pub fn last(&self) -> &[f64] {
        self.step(self.steps - 1)
    }

    /// Root-mean-square difference per joint.
    pub fn rmse_per_joint(&self, other: &Trajectory) -> Vec<f64> {
        let mut acc = vec![0.0; self.joints];
        for (i, (a, b)) in self.data.iter().zip(&other.data).enumerate() {
            acc[i % self.joints] += (a - b) * (a - b);
        }
        acc.iter().map(|s| (s / self.steps as f64).sqrt()).collect()
    }
}

/// Geometric ladder `β = min(start · 10^⌊epoch / interval⌋, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub interval: usize,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            beta_start: 1e-8,
            beta_end: 1e-5,
            interval: 400,
        }
    }
}

impl BetaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end) || self.interval == 0 {
            return Err(Error::Config(format!(
                "beta schedule needs 0 < start <= end and interval >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn beta_at(schedule: &BetaSchedule, epoch: usize) -> f64 {
    let rung = (epoch / schedule.interval.max(1)).min(400) as i32;
    (schedule.beta_start * 10f64.powi(rung)).min(schedule.beta_end)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajVaeConfig {
    pub horizon: usize,
    pub joints: usize,
    pub action_dim: usize,
    /// Encoder widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
}

impl Default for TrajVaeConfig {
    fn default() -> Self {
        Self {
            horizon: 24,
            joints: 3,
            action_dim: 5,
            hidden: vec![256, 128, 64],
        }
    }
}

impl TrajVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 || self.joints == 0 || self.action_dim == 0 {
            return Err(Error::Config(
                "trajvae: horizon must be >= 2, joints and action_dim >= 1".into(),
            ));
        }
        if self.hidden.len() != 3 || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "trajvae: expected 3 non-zero hidden widths, got {:?}",
                self.hidden
            )));
        }
        Ok(())
    }

    pub fn flat_len(&self) -> usize {
        self.horizon * self.joints
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajLossParts {
    pub total: f64,
    /// Mean squared error over every trajectory entry.
    pub mse: f64,
    /// KL summed over latent dimensions, averaged over the batch.
    pub kl: f64,
}

/// Trajectory VAE. Trajectories are standardised with fixed per-entry
/// `offset` and `scale` buffers before entering the encoder, and the decoder
/// output is mapped back through them.
#[derive(Clone, Debug)]
pub struct TrajVae<T> {
    pub config: TrajVaeConfig,
    encoder: Mlp<T>,
    decoder: Mlp<T>,
    offset: Array1<T>,
    scale: Array1<T>,
}

impl<T: Scalar> TrajVae<T> {
    pub fn new(config: TrajVaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.flat_len();
        let h = &config.hidden;
        let encoder = Mlp::new(&[n, h[0], h[1], h[2], 2 * config.action_dim], &mut rng);
        let decoder = Mlp::new(&[config.action_dim, h[2], h[1], h[0], n], &mut rng);
        Ok(Self {
            encoder,
            decoder,
            offset: Array1::zeros(n),
            scale: Array1::ones(n),
            config,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.config.action_dim
    }

    /// Sets the standardisation buffers from a set of trajectories.
    pub fn fit_normalization(&mut self, data: &Array2<f64>) {
        let n = data.nrows().max(1) as f64;
        let mean = data.sum_axis(Axis(0)) / n;
        let var = data
            .axis_iter(Axis(0))
            .fold(Array1::<f64>::zeros(mean.len()), |acc, row| {
                acc + (&row - &mean).mapv(|d| d * d)
            })
            / n;
        self.offset = mean.mapv(T::of);
        self.scale = var.mapv(|v| T::of(v.sqrt().max(1e-2)));
    }

    pub fn normalization(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.offset.iter().map(|v| v.as_f64()).collect(),
            self.scale.iter().map(|v| v.as_f64()).collect(),
        )
    }

    fn check_flat(&self, u: &Array2<T>) -> Result<()> {
        if u.ncols() != self.config.flat_len() {
            return Err(Error::Input(format!(
                "trajectory batch has {} columns, model expects {} ({}x{})",
                u.ncols(),
                self.config.flat_len(),
                self.config.horizon,
                self.config.joints
            )));
        }
        Ok(())
    }

    fn check_actions(&self, a: &Array2<T>) -> Result<()> {
        if a.ncols() != self.config.action_dim {
            return Err(Error::Input(format!(
                "action has {} dims, model expects {}",
                a.ncols(),
                self.config.action_dim
            )));
        }
        Ok(())
    }

    fn standardize(&self, u: &Array2<T>) -> Array2<T> {
        (u - &self.offset) / &self.scale
    }

    fn split_heads(&self, out: &Array2<T>) -> (Array2<T>, Array2<T>) {
        let a = self.config.action_dim;
        let mu = out.slice(s![.., ..a]).to_owned();
        let (lo, hi) = (T::of(LOGVAR_MIN), T::of(LOGVAR_MAX));
        let logvar = out.slice(s![.., a..]).mapv(|v| v.max(lo).min(hi));
        (mu, logvar)
    }

    /// `(B, T·J)` trajectories to `(μ, logvar)`, each `(B, action_dim)`.
    pub fn encode_batch(&self, u: &Array2<T>) -> Result<(Array2<T>, Array2<T>)> {
        self.check_flat(u)?;
        Ok(self.split_heads(&self.encoder.forward(&self.standardize(u))))
    }

    /// `(B, action_dim)` actions to `(B, T·J)` trajectories.
    pub fn decode_batch(&self, a: &Array2<T>) -> Result<Array2<T>> {
        self.check_actions(a)?;
        Ok(self.decode_raw(a).0)
    }

    fn decode_raw(&self, a: &Array2<T>) -> (Array2<T>, MlpCache<T>) {
        let (y, cache) = self.decoder.forward_cached(a);
        (&y * &self.scale + &self.offset, cache)
    }

    /// Decodes `a` and pulls `grad_u = ∂L/∂u` back to `∂L/∂a`. Decoder
    /// parameters are not touched.
    pub fn decode_with_vjp(
        &self,
        a: &Array2<T>,
        grad_u: impl FnOnce(&Array2<T>) -> Array2<T>,
    ) -> Result<(Array2<T>, Array2<T>)> {
        self.check_actions(a)?;
        let (u, cache) = self.decode_raw(a);
        let gu = grad_u(&u);
        let mut scratch = self.decoder.clone();
        let ga = self
            .decoder
            .backward(&cache, &(&gu * &self.scale), &mut scratch);
        Ok((u, ga))
    }

    pub fn encode_traj(&self, u: &Trajectory) -> Result<LatentDistribution> {
        if (u.steps, u.joints) != (self.config.horizon, self.config.joints) {
            return Err(Error::Input(format!(
                "trajectory is {}x{}, model expects {}x{}",
                u.steps, u.joints, self.config.horizon, self.config.joints
            )));
        }
        let x = Array2::from_shape_vec(
            (1, u.data.len()),
            u.data.iter().map(|&v| T::of(v)).collect(),
        )
        .expect("row vector");
        let (mu, logvar) = self.encode_batch(&x)?;
        Ok(LatentDistribution {
            mu: mu.row(0).iter().map(|v| v.as_f64()).collect(),
            logvar: logvar.row(0).iter().map(|v| v.as_f64()).collect(),
        })
    }

    pub fn decode_action(&self, a: &[f64]) -> Result<Trajectory> {
        let x = Array2::from_shape_vec((1, a.len()), a.iter().map(|&v| T::of(v)).collect())
            .expect("row vector");
        let u = self.decode_batch(&x)?;
        Trajectory::new(
            self.config.horizon,
            self.config.joints,
            u.row(0).iter().map(|v| v.as_f64()).collect(),
        )
    }

    /// Analytic Jacobian `∂u/∂a`, `(T·J) × action_dim`.
    pub fn decoder_jacobian(&self, a: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.config.flat_len();
        let row: Vec<T> = a.iter().map(|&v| T::of(v)).collect();
        let batch = Array2::from_shape_fn((n, a.len()), |(_, j)| row[j]);
        let (_, ga) = self.decode_with_vjp(&batch, |u| Array2::eye(u.ncols()))?;
        Ok(DMatrix::from_fn(n, a.len(), |i, j| ga[[i, j]].as_f64()))
    }

    /// `MSE(u, û) + β·KL` on a batch and the gradient for every parameter.
    pub fn loss_and_grad(
        &self,
        u: &Array2<T>,
        noise: &Array2<T>,
        beta: f64,
    ) -> Result<(TrajLossParts, TrajVae<T>)> {
        self.check_flat(u)?;
        let batch = u.nrows();
        let ad = self.config.action_dim;
        if noise.dim() != (batch, ad) {
            return Err(Error::Input(
                "noise shape does not match (batch, action_dim)".into(),
            ));
        }
        let (enc_out, enc_cache) = self.encoder.forward_cached(&self.standardize(u));
        let (mu, logvar) = self.split_heads(&enc_out);
        let sigma = logvar.mapv(|v| (v * T::of(0.5)).exp());
        let z = &mu + &(&sigma * noise);
        let (recon, dec_cache) = self.decode_raw(&z);

        let count = (batch * self.config.flat_len()) as f64;
        let diff = &recon - u;
        let mse = diff.iter().map(|d| d.as_f64() * d.as_f64()).sum::<f64>() / count;
        let one = T::one();
        let kl = 0.5
            * ndarray::Zip::from(&mu)
                .and(&logvar)
                .fold(0.0, |acc, &m, &lv| {
                    acc + (m * m + lv.exp() - one - lv).as_f64()
                })
            / batch as f64;

        let mut grads = self.clone();
        grads.fill_zero();
        let g_recon = diff.mapv(|d| d * T::of(2.0 / count));
        let dz = self
            .decoder
            .backward(&dec_cache, &(&g_recon * &self.scale), &mut grads.decoder);

        let kb = T::of(beta / batch as f64);
        let half = T::of(0.5);
        let (lo, hi) = (T::of(LOGVAR_MIN), T::of(LOGVAR_MAX));
        let mut g_out = Array2::<T>::zeros(enc_out.raw_dim());
        for b in 0..batch {
            for k in 0..ad {
                g_out[[b, k]] = dz[[b, k]] + kb * mu[[b, k]];
                let raw = enc_out[[b, ad + k]];
                g_out[[b, ad + k]] = if raw < lo || raw > hi {
                    T::zero()
                } else {
                    dz[[b, k]] * half * sigma[[b, k]] * noise[[b, k]]
                        + kb * half * (logvar[[b, k]].exp() - one)
                };
            }
        }
        self.encoder
            .backward(&enc_cache, &g_out, &mut grads.encoder);
        Ok((
            TrajLossParts {
                total: mse + beta * kl,
                mse,
                kl,
            },
            grads,
        ))
    }

    pub fn loss(&self, u: &Array2<T>, noise: &Array2<T>, beta: f64) -> Result<TrajLossParts> {
        self.loss_and_grad(u, noise, beta).map(|(l, _)| l)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_module(
            CHECKPOINT_KIND,
            serde_json::to_value(&self.config).expect("config serializes"),
            self,
        );
        let (offset, scale) = self.normalization();
        let n = offset.len();
        ck.push(
            "norm.offset",
            vec![n],
            offset.iter().map(|&v| v as f32).collect(),
        );
        ck.push(
            "norm.scale",
            vec![n],
            scale.iter().map(|&v| v as f32).collect(),
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
        let config: TrajVaeConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Config(format!("trajvae checkpoint config: {e}")))?;
        let mut model = Self::new(config, 0)?;
        ck.load_into(&mut model)?;
        let n = model.config.flat_len();
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

impl<T: Scalar> Module<T> for TrajVae<T> {
    fn named_params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = self.encoder.params("enc");
        out.extend(self.decoder.params("dec"));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = self.encoder.params_mut("enc");
        out.extend(self.decoder.params_mut("dec"));
        out
    }
}

/// Axis-aligned rectangle on the table, meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            x: [0.30, 0.60],
            y: [-0.15, 0.15],
        }
    }
}

impl Workspace {
    pub fn diagonal(&self) -> f64 {
        (self.x[1] - self.x[0]).hypot(self.y[1] - self.y[0])
    }

    /// Cell-centre targets of an `nx × ny` grid, row-major in y then x.
    pub fn grid(&self, nx: usize, ny: usize) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let fx = (i as f64 + 0.5) / nx as f64;
                let fy = (j as f64 + 0.5) / ny as f64;
                out.push([
                    self.x[0] + fx * (self.x[1] - self.x[0]),
                    self.y[0] + fy * (self.y[1] - self.y[0]),
                ]);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajGenConfig {
    pub horizon: usize,
    /// End-effector height above the table at the final step.
    pub hover_height: f64,
    /// Extra height of the via point over the start-target midpoint.
    pub via_lift: f64,
    /// Step index of the via point as a fraction of the horizon.
    pub via_fraction: f64,
    /// Final-position tolerance, meters.
    pub tolerance: f64,
    pub ik: IkSettings,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkSettings {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IkSettings {
    fn default() -> Self {
        let o = IkOptions::default();
        Self {
            damping: o.damping,
            tol: o.tol,
            max_iter: o.max_iter,
        }
    }
}

impl From<IkSettings> for IkOptions {
    fn from(s: IkSettings) -> Self {
        IkOptions {
            damping: s.damping,
            tol: s.tol,
            max_iter: s.max_iter,
        }
    }
}

impl Default for TrajGenConfig {
    fn default() -> Self {
        Self {
            horizon: 24,
            hover_height: 0.10,
            via_lift: 0.05,
            via_fraction: 0.5,
            tolerance: 1e-3,
            ik: IkSettings::default(),
        }
    }
}

/// Default start configuration for the desk arm.
pub const DESK_START: [f64; 3] = [0.0, 1.5, 1.2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub workspace: Workspace,
    pub nx: usize,
    pub ny: usize,
}

/// Generated trajectories plus the targets they reach.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    pub horizon: usize,
    pub joints: usize,
    pub limits: Vec<[f64; 2]>,
    pub grid: Option<GridSpec>,
    pub start: Vec<f64>,
    pub targets: Vec<[f64; 3]>,
    pub trajectories: Vec<Trajectory>,
    pub unreachable: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct TrajFileHeader {
    format_version: u32,
    joints: usize,
    horizon: usize,
    count: usize,
    limits: Vec<[f64; 2]>,
    grid: Option<GridSpec>,
    start: Vec<f64>,
    targets: Vec<[f64; 3]>,
    unreachable: Vec<[f64; 3]>,
}

impl TrajectorySet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// `(N, T·J)` matrix of all trajectories.
    pub fn matrix<T: Scalar>(&self, idx: &[usize]) -> Array2<T> {
        let n = self.horizon * self.joints;
        Array2::from_shape_fn((idx.len(), n), |(r, c)| {
            T::of(self.trajectories[idx[r]].data[c])
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = TrajFileHeader {
            format_version: TRAJ_FORMAT_VERSION,
            joints: self.joints,
            horizon: self.horizon,
            count: self.trajectories.len(),
            limits: self.limits.clone(),
            grid: self.grid.clone(),
            start: self.start.clone(),
            targets: self.targets.clone(),
            unreachable: self.unreachable.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out =
            Vec::with_capacity(16 + json.len() + 4 * self.len() * self.horizon * self.joints);
        out.extend_from_slice(TRAJ_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.trajectories {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, message: &str| Error::Parse {
            offset: offset as u64,
            message: message.into(),
        };
        if bytes.len() < 16 {
            return Err(parse(bytes.len(), "file shorter than the preamble"));
        }
        if &bytes[..8] != TRAJ_MAGIC {
            return Err(parse(0, "bad magic, not a trajectory set"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| parse(bytes.len(), "header extends past end of file"))?;
        let header: TrajFileHeader = serde_json::from_slice(&bytes[16..body])
            .map_err(|e| parse(16 + e.column().saturating_sub(1), &e.to_string()))?;
        if header.format_version != TRAJ_FORMAT_VERSION {
            return Err(parse(
                16,
                &format!("unsupported version {}", header.format_version),
            ));
        }
        let per = header.horizon * header.joints;
        let need = body + 4 * per * header.count;
        if bytes.len() != need {
            return Err(parse(
                bytes.len().min(need),
                &format!(
                    "data block is {} bytes, expected {}",
                    bytes.len() - body,
                    need - body
                ),
            ));
        }
        let values: Vec<f64> = bytes[body..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let trajectories = values
            .chunks_exact(per.max(1))
            .take(header.count)
            .map(|c| Trajectory::new(header.horizon, header.joints, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            horizon: header.horizon,
            joints: header.joints,
            limits: header.limits,
            grid: header.grid,
            start: header.start,
            targets: header.targets,
            trajectories,
            unreachable: header.unreachable,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn interpolate(a: &[f64], b: &[f64], f: f64, out: &mut Vec<f64>) {
    out.extend(a.iter().zip(b).map(|(x, y)| x + f * (y - x)));
}

/// One reach trajectory from `start` to `target` through a raised via point.
/// The via point is solved best-effort; the final configuration must place
/// the end effector within `cfg.tolerance` of the target.
pub fn plan_reach(
    chain: &KinematicChain,
    start: &[f64],
    target: &Vector3<f64>,
    cfg: &TrajGenConfig,
) -> Result<Trajectory> {
    if cfg.horizon < 2 {
        return Err(Error::Config("trajectory horizon must be >= 2".into()));
    }
    if !chain.within_limits(start) {
        return Err(Error::Config(
            "start configuration violates joint limits".into(),
        ));
    }
    let opts: IkOptions = cfg.ik.into();
    let p0 = fk_position(chain, start)?;
    let via_target = (p0 + target) * 0.5 + Vector3::new(0.0, 0.0, cfg.via_lift);
    let via = match inverse_kinematics(chain, &via_target, start, &opts) {
        Ok(q) => q,
        Err(Error::Unreachable { best, .. }) => best,
        Err(e) => return Err(e),
    };
    let last = inverse_kinematics(chain, target, &via, &opts)?;
    let reached = fk_position(chain, &last)?;
    let residual = (reached - target).norm();
    if residual > cfg.tolerance {
        return Err(Error::Unreachable {
            residual,
            best: last,
        });
    }
    let t_end = cfg.horizon - 1;
    let k = ((cfg.via_fraction.clamp(0.0, 1.0) * t_end as f64).round() as usize).clamp(1, t_end);
    let mut data = Vec::with_capacity(cfg.horizon * chain.dof());
    for t in 0..cfg.horizon {
        if t <= k {
            interpolate(start, &via, t as f64 / k as f64, &mut data);
        } else {
            interpolate(&via, &last, (t - k) as f64 / (t_end - k) as f64, &mut data);
        }
    }
    // Exact endpoints, free of interpolation rounding.
    let j = chain.dof();
    data[..j].copy_from_slice(start);
    data[t_end * j..].copy_from_slice(&last);
    Trajectory::new(cfg.horizon, j, data)
}

/// Plans one trajectory per target in parallel. Unreachable targets are
/// logged, excluded and returned in `unreachable`.
pub fn trajectories_for_targets(
    chain: &KinematicChain,
    targets: &[[f64; 3]],
    start: &[f64],
    cfg: &TrajGenConfig,
) -> Result<TrajectorySet> {
    let planned: Vec<Result<Trajectory>> = targets
        .par_iter()
        .map(|t| plan_reach(chain, start, &Vector3::from(*t), cfg))
        .collect();
    let mut set = TrajectorySet {
        horizon: cfg.horizon,
        joints: chain.dof(),
        limits: chain
            .joints
            .iter()
            .map(|j| [j.limits.0, j.limits.1])
            .collect(),
        grid: None,
        start: start.to_vec(),
        targets: Vec::new(),
        trajectories: Vec::new(),
        unreachable: Vec::new(),
    };
    for (t, r) in targets.iter().zip(planned) {
        match r {
            Ok(traj) => {
                set.targets.push(*t);
                set.trajectories.push(traj);
            }
            Err(Error::Unreachable { residual, .. }) => {
                log::warn!("target {t:?} unreachable (residual {residual:.2e} m)");
                set.unreachable.push(*t);
            }
            Err(e) => return Err(e),
        }
    }
    if !set.unreachable.is_empty() {
        log::warn!(
            "{} of {} targets unreachable and excluded",
            set.unreachable.len(),
            targets.len()
        );
    }
    Ok(set)
}

/// One trajectory per cell of an `nx × ny` grid over the workspace, ending
/// `hover_height` above the table.
pub fn generate_training_trajectories(
    chain: &KinematicChain,
    workspace: &Workspace,
    grid: (usize, usize),
    start: &[f64],
    cfg: &TrajGenConfig,
) -> Result<TrajectorySet> {
    let targets: Vec<[f64; 3]> = workspace
        .grid(grid.0, grid.1)
        .into_iter()
        .map(|[x, y]| [x, y, cfg.hover_height])
        .collect();
    let mut set = trajectories_for_targets(chain, &targets, start, cfg)?;
    set.grid = Some(GridSpec {
        workspace: *workspace,
        nx: grid.0,
        ny: grid.1,
    });
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajEpochLog {
    pub epoch: usize,
    pub mse: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
}

pub const TRAJ_LOG_HEADER: &str = "epoch,mse,kl,beta,total";

impl TrajEpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.mse, self.kl, self.beta, self.total
        )
    }

    pub fn rmse(&self) -> f64 {
        self.mse.sqrt()
    }
}

pub struct TrainedTrajVae {
    pub model: TrajVae<f32>,
    pub log: Vec<TrajEpochLog>,
}

/// Trains with Adam, annealing β along `schedule`. Seeded like `train_vaed`.
pub fn train_trajectory_vae(
    set: &TrajectorySet,
    config: &TrajVaeConfig,
    schedule: &BetaSchedule,
    opt: &TrainConfig,
    mut on_epoch: impl FnMut(&TrajEpochLog),
) -> Result<TrainedTrajVae> {
    schedule.validate()?;
    if set.len() < 2 {
        return Err(Error::Input(format!(
            "need at least 2 trajectories, got {}",
            set.len()
        )));
    }
    if (set.horizon, set.joints) != (config.horizon, config.joints) {
        return Err(Error::Config(format!(
            "trajectory set is {}x{}, config expects {}x{}",
            set.horizon, set.joints, config.horizon, config.joints
        )));
    }
    let mut model = TrajVae::<f32>::new(config.clone(), opt.seed)?;
    let all: Vec<usize> = (0..set.len()).collect();
    model.fit_normalization(&set.matrix::<f64>(&all));
    let mut adam = Adam::new(opt.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed ^ 0x7BA1_EC70);
    let mut order = all;
    let bs = opt.batch_size.max(1);
    let mut log = Vec::with_capacity(opt.epochs);
    for epoch in 0..opt.epochs {
        let beta = beta_at(schedule, epoch);
        order.shuffle(&mut rng);
        let mut sums = TrajLossParts::default();
        for chunk in order.chunks(bs) {
            let u = set.matrix::<f32>(chunk);
            let noise = Array2::from_shape_fn((chunk.len(), config.action_dim), |_| {
                StandardNormal.sample(&mut rng)
            });
            let (parts, grads) = model.loss_and_grad(&u, &noise, beta)?;
            if !parts.total.is_finite() {
                return Err(Error::Runtime(format!(
                    "trajvae loss diverged at epoch {epoch}"
                )));
            }
            adam.step(&mut model, &grads);
            let n = chunk.len() as f64;
            sums.mse += parts.mse * n;
            sums.kl += parts.kl * n;
            sums.total += parts.total * n;
        }
        let n = set.len() as f64;
        let entry = TrajEpochLog {
            epoch,
            mse: sums.mse / n,
            kl: sums.kl / n,
            beta,
            total: sums.total / n,
        };
        if epoch % 100 == 0 || epoch + 1 == opt.epochs {
            log::info!(
                "trajvae epoch {epoch}: mse {:.3e} kl {:.3} beta {:.1e}",
                entry.mse,
                entry.kl,
                beta
            );
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainedTrajVae { model, log })
}

/// Per-joint RMSE of `decode(μ(encode(u)))` against `u` over a set.
pub fn reconstruction_rmse(model: &TrajVae<f32>, set: &TrajectorySet) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; set.joints];
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(256) {
        let u = set.matrix::<f32>(chunk);
        let (mu, _) = model.encode_batch(&u)?;
        let rec = model.decode_batch(&mu)?;
        for (i, (a, b)) in rec.iter().zip(u.iter()).enumerate() {
            let d = (*a - *b) as f64;
            acc[i % set.joints] += d * d;
        }
    }
    let n = (set.len() * set.horizon).max(1) as f64;
    Ok(acc.iter().map(|s| (s / n).sqrt()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrajVaeConfig {
        TrajVaeConfig {
            horizon: 4,
            joints: 2,
            action_dim: 2,
            hidden: vec![6, 5, 4],
        }
    }

    #[test]
    fn ladder_values() {
        let s = BetaSchedule::default();
        assert_eq!(beta_at(&s, 0), 1e-8);
        assert_eq!(beta_at(&s, 399), 1e-8);
        assert!((beta_at(&s, 400) / 1e-7 - 1.0).abs() < 1e-12);
        assert!((beta_at(&s, 800) / 1e-6 - 1.0).abs() < 1e-12);
        assert_eq!(beta_at(&s, 1200), 1e-5);
        assert_eq!(beta_at(&s, 1_000_000), 1e-5);
        assert_eq!(beta_at(&s, usize::MAX), 1e-5);
    }

    #[test]
    fn bad_schedules_rejected() {
        for s in [
            BetaSchedule {
                beta_start: 0.0,
                ..Default::default()
            },
            BetaSchedule {
                beta_start: 1e-4,
                beta_end: 1e-5,
                interval: 1,
            },
            BetaSchedule {
                interval: 0,
                ..Default::default()
            },
        ] {
            assert!(s.validate().is_err());
        }
    }

    #[test]
    fn shapes_and_errors() {
        let m = TrajVae::<f64>::new(TrajVaeConfig::default(), 1).unwrap();
        let u = Trajectory::new(24, 3, vec![0.1; 72]).unwrap();
        assert_eq!(m.encode_traj(&u).unwrap().mu.len(), 5);
        let out = m.decode_action(&[0.0; 5]).unwrap();
        assert_eq!((out.steps, out.joints), (24, 3));
        assert!(m.decode_action(&[0.0; 4]).is_err());
        assert!(m
            .encode_traj(&Trajectory::new(23, 3, vec![0.0; 69]).unwrap())
            .is_err());
    }

    #[test]
    fn shifted_reconstruction_mse() {
        // A decoder with zero weights outputs its bias; set it to u + 0.1.
        let mut m = TrajVae::<f64>::new(tiny(), 3).unwrap();
        let u: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let last = m.decoder.layers.len() - 1;
        m.decoder.layers[last].weight.fill(0.0);
        for (b, v) in m.decoder.layers[last].bias.iter_mut().zip(&u) {
            *b = v + 0.1;
        }
        let x = Array2::from_shape_vec((1, 8), u.clone()).unwrap();
        let parts = m.loss(&x, &Array2::zeros((1, 2)), 0.0).unwrap();
        assert!((parts.mse - 0.01).abs() < 1e-12);
        assert_eq!(parts.total, parts.mse);

        for (b, v) in m.decoder.layers[last].bias.iter_mut().zip(&u) {
            *b = *v;
        }
        assert_eq!(m.loss(&x, &Array2::zeros((1, 2)), 0.0).unwrap().total, 0.0);
    }

    #[test]
    fn checkpoint_round_trip_keeps_normalization() {
        let mut m = TrajVae::<f32>::new(tiny(), 4).unwrap();
        let data = Array2::from_shape_fn((5, 8), |(r, c)| (r * c) as f64 * 0.1);
        m.fit_normalization(&data);
        let back = TrajVae::<f32>::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back.normalization(), m.normalization());
        assert_eq!(back.flat_params(), m.flat_params());
        let a = [0.3, -0.2];
        assert_eq!(
            back.decode_action(&a).unwrap(),
            m.decode_action(&a).unwrap()
        );
    }

    #[test]
    fn trajectory_file_round_trip_and_truncation() {
        let set = TrajectorySet {
            horizon: 2,
            joints: 2,
            limits: vec![[-1.0, 1.0]; 2],
            grid: None,
            start: vec![0.0, 0.5],
            targets: vec![[0.1, 0.2, 0.3]],
            trajectories: vec![Trajectory::new(2, 2, vec![0.0, 0.5, 0.25, -0.75]).unwrap()],
            unreachable: vec![[9.0, 9.0, 0.1]],
        };
        let bytes = set.to_bytes();
        assert_eq!(TrajectorySet::from_bytes(&bytes).unwrap(), set);
        assert!(matches!(
            TrajectorySet::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn grid_cells_are_centred() {
        let w = Workspace::default();
        let g = w.grid(2, 1);
        assert_eq!(g.len(), 2);
        assert!((g[0][0] - 0.375).abs() < 1e-12 && g[0][1].abs() < 1e-12);
        assert!((w.diagonal() - 0.3f64.hypot(0.3)).abs() < 1e-12);
    }
}
