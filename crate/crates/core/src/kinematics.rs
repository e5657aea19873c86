//! Serial-arm forward kinematics, its derivatives, and a damped least-squares
//! inverse solver.
//!
//! A chain is a base pose followed by revolute joints. Each joint first applies
//! its fixed offset transform, then rotates about its local axis. An optional
//! tool transform closes the chain. Two derivative routes are provided:
//! [`position_jacobian`] differentiates the transform product directly (this is
//! what training backpropagates through) and [`fk_jacobian`] builds the
//! geometric Jacobian from joint axes, which serves as an independent check.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// 4x4 homogeneous rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose(pub Matrix4<f64>);

impl Pose {
    pub fn identity() -> Self {
        Pose(Matrix4::identity())
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Pose(Matrix4::new_translation(&Vector3::new(x, y, z)))
    }

    pub fn rotation(axis: &Vector3<f64>, angle: f64) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Pose(r.to_homogeneous())
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 16 {
            return Err(Error::Config(format!(
                "pose needs 16 numbers, got {}",
                v.len()
            )));
        }
        Ok(Pose(Matrix4::from_row_slice(v)))
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(16);
        for r in 0..4 {
            for c in 0..4 {
                out.push(self.0[(r, c)]);
            }
        }
        out
    }

    pub fn rotation_part(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn position(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Orthonormal rotation, unit determinant and a `(0, 0, 0, 1)` bottom row.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = self.rotation_part();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max() <= tol;
        let det = (r.determinant() - 1.0).abs() <= tol;
        let m = &self.0;
        let bottom = m[(3, 0)] == 0.0 && m[(3, 1)] == 0.0 && m[(3, 2)] == 0.0 && m[(3, 3)] == 1.0;
        ortho && det && bottom
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose(self.0 * other.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub axis: Vector3<f64>,
    pub offset: Pose,
    pub limits: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicChain {
    pub base: Pose,
    pub joints: Vec<Joint>,
    pub tool: Pose,
}

#[derive(Serialize, Deserialize)]
struct JointFile {
    axis: [f64; 3],
    offset: Vec<f64>,
    limits: [f64; 2],
    #[serde(default = "revolute", rename = "type")]
    kind: String,
}

fn revolute() -> String {
    "revolute".into()
}

#[derive(Serialize, Deserialize)]
struct ChainFile {
    base: Vec<f64>,
    joints: Vec<JointFile>,
    #[serde(default)]
    tool: Option<Vec<f64>>,
}

impl KinematicChain {
    pub fn new(base: Pose, joints: Vec<Joint>, tool: Pose) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::Config("chain needs at least one joint".into()));
        }
        for (i, j) in joints.iter().enumerate() {
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("joint {i} axis is not unit length")));
            }
            if !(j.limits.0 < j.limits.1) {
                return Err(Error::Config(format!("joint {i} limits are empty")));
            }
            if !j.offset.is_valid(1e-9) {
                return Err(Error::Config(format!(
                    "joint {i} offset is not a rigid transform"
                )));
            }
        }
        if !base.is_valid(1e-9) || !tool.is_valid(1e-9) {
            return Err(Error::Config(
                "base or tool is not a rigid transform".into(),
            ));
        }
        Ok(Self { base, joints, tool })
    }

    /// Planar arm in the base xy-plane: every joint turns about z and link `i`
    /// has length `links[i]` along the local x axis.
    pub fn planar(links: &[f64], limits: (f64, f64)) -> Self {
        let mut joints = Vec::with_capacity(links.len());
        for i in 0..links.len() {
            let offset = if i == 0 {
                Pose::identity()
            } else {
                Pose::translation(links[i - 1], 0.0, 0.0)
            };
            joints.push(Joint {
                axis: Vector3::z(),
                offset,
                limits,
            });
        }
        let tool = Pose::translation(*links.last().unwrap_or(&0.0), 0.0, 0.0);
        Self::new(Pose::identity(), joints, tool).expect("planar chain is valid")
    }

    /// Three-link planar arm whose end effector moves in the horizontal plane
    /// `z = height`, used by the desk-scale pipeline.
    pub fn desk_arm(height: f64) -> Self {
        let mut chain = Self::planar(&[0.30, 0.25, 0.15], (-2.8, 2.8));
        chain.base = Pose::translation(0.0, 0.0, height);
        chain
    }

    /// Franka Panda parameters from public documentation.
    pub fn panda() -> Self {
        Self::from_json(include_str!("../data/panda.json")).expect("bundled chain parses")
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ChainFile = serde_json::from_str(text)?;
        let mut joints = Vec::with_capacity(file.joints.len());
        for (i, j) in file.joints.iter().enumerate() {
            if j.kind != "revolute" {
                return Err(Error::Config(format!(
                    "joint {i}: unsupported type {}",
                    j.kind
                )));
            }
            joints.push(Joint {
                axis: Vector3::from_row_slice(&j.axis),
                offset: Pose::from_row_major(&j.offset)?,
                limits: (j.limits[0], j.limits[1]),
            });
        }
        let tool = match &file.tool {
            Some(t) => Pose::from_row_major(t)?,
            None => Pose::identity(),
        };
        Self::new(Pose::from_row_major(&file.base)?, joints, tool)
    }

    pub fn to_json(&self) -> String {
        let file = ChainFile {
            base: self.base.to_row_major(),
            joints: self
                .joints
                .iter()
                .map(|j| JointFile {
                    axis: [j.axis.x, j.axis.y, j.axis.z],
                    offset: j.offset.to_row_major(),
                    limits: [j.limits.0, j.limits.1],
                    kind: revolute(),
                })
                .collect(),
            tool: Some(self.tool.to_row_major()),
        };
        serde_json::to_string_pretty(&file).expect("chain serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn clamp(&self, q: &mut [f64]) {
        for (v, j) in q.iter_mut().zip(&self.joints) {
            *v = v.clamp(j.limits.0, j.limits.1);
        }
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.iter()
            .zip(&self.joints)
            .all(|(v, j)| *v >= j.limits.0 && *v <= j.limits.1)
    }

    fn check_len(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::Input(format!(
                "joint vector has {} entries, chain has {} joints",
                q.len(),
                self.dof()
            )));
        }
        Ok(())
    }

    fn joint_rotation(&self, j: usize, angle: f64) -> Matrix4<f64> {
        Rotation3::from_axis_angle(&Unit::new_unchecked(self.joints[j].axis), angle)
            .to_homogeneous()
    }

    /// World frame of each joint just before its rotation, plus the end pose.
    fn frames(&self, q: &[f64]) -> (Vec<Matrix4<f64>>, Matrix4<f64>) {
        let mut t = self.base.0;
        let mut frames = Vec::with_capacity(self.dof());
        for (j, joint) in self.joints.iter().enumerate() {
            t *= joint.offset.0;
            frames.push(t);
            t *= self.joint_rotation(j, q[j]);
        }
        t *= self.tool.0;
        (frames, t)
    }
}

/// End-effector pose and position.
pub fn forward_kinematics(chain: &KinematicChain, q: &[f64]) -> Result<(Pose, Vector3<f64>)> {
    chain.check_len(q)?;
    if !chain.within_limits(q) {
        log::warn!("joint configuration outside limits: {q:?}");
    }
    let (_, end) = chain.frames(q);
    let pose = Pose(end);
    Ok((pose, pose.position()))
}

pub fn fk_position(chain: &KinematicChain, q: &[f64]) -> Result<Vector3<f64>> {
    chain.check_len(q)?;
    Ok(Pose(chain.frames(q).1).position())
}

/// Geometric position Jacobian: column `j` is `axis_j x (p_ee - p_j)` in world
/// coordinates.
pub fn fk_jacobian(chain: &KinematicChain, q: &[f64]) -> Result<DMatrix<f64>> {
    chain.check_len(q)?;
    let (frames, end) = chain.frames(q);
    let p_ee = Pose(end).position();
    let mut jac = DMatrix::zeros(3, chain.dof());
    for (j, f) in frames.iter().enumerate() {
        let frame = Pose(*f);
        let axis = frame.rotation_part() * chain.joints[j].axis;
        let col = axis.cross(&(p_ee - frame.position()));
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// Position Jacobian by the product rule on the transform chain:
/// `dT/dq_j = F_j * [axis_j]x * R_j * S_j`, where `F_j` is the prefix up to
/// joint `j` and `S_j` the suffix after it.
pub fn position_jacobian(chain: &KinematicChain, q: &[f64]) -> Result<DMatrix<f64>> {
    chain.check_len(q)?;
    let n = chain.dof();
    let (frames, _) = chain.frames(q);
    // suffix[j] = R_j * offset_{j+1} * R_{j+1} * ... * tool
    let mut suffix = vec![Matrix4::identity(); n];
    let mut acc = chain.tool.0;
    for j in (0..n).rev() {
        acc = chain.joint_rotation(j, q[j]) * acc;
        suffix[j] = acc;
        acc = chain.joints[j].offset.0 * acc;
    }
    let mut jac = DMatrix::zeros(3, n);
    for j in 0..n {
        let a = chain.joints[j].axis;
        let mut skew = Matrix4::zeros();
        skew[(0, 1)] = -a.z;
        skew[(0, 2)] = a.y;
        skew[(1, 0)] = a.z;
        skew[(1, 2)] = -a.x;
        skew[(2, 0)] = -a.y;
        skew[(2, 1)] = a.x;
        let d = frames[j] * skew * suffix[j];
        jac.set_column(j, &Vector3::new(d[(0, 3)], d[(1, 3)], d[(2, 3)]));
    }
    Ok(jac)
}

/// Vector-Jacobian product `J^T g` used when backpropagating a position loss
/// into joint angles.
pub fn position_vjp(
    chain: &KinematicChain,
    q: &[f64],
    grad_pos: &Vector3<f64>,
) -> Result<Vec<f64>> {
    let jac = position_jacobian(chain, q)?;
    Ok((jac.transpose() * grad_pos).iter().copied().collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IkOptions {
    /// Initial damping; adapted Levenberg-Marquardt style while iterating.
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            damping: 0.1,
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

/// Damped least-squares position IK starting from `q0`, clipping to joint
/// limits after every step.
pub fn inverse_kinematics(
    chain: &KinematicChain,
    target: &Vector3<f64>,
    q0: &[f64],
    opts: &IkOptions,
) -> Result<Vec<f64>> {
    chain.check_len(q0)?;
    if !target.iter().all(|v| v.is_finite()) {
        return Err(Error::Input("IK target is not finite".into()));
    }
    let mut q = q0.to_vec();
    let mut err = target - fk_position(chain, &q)?;
    let mut residual = err.norm();
    if residual <= opts.tol {
        return Ok(q);
    }
    let mut lambda = opts.damping;
    for _ in 0..opts.max_iter {
        let jac = fk_jacobian(chain, &q)?;
        let jjt = &jac * jac.transpose() + DMatrix::identity(3, 3) * (lambda * lambda);
        let rhs = DVector::from_column_slice(err.as_slice());
        let Some(x) = jjt.lu().solve(&rhs) else {
            lambda *= 4.0;
            continue;
        };
        let dq = jac.transpose() * x;
        let mut candidate: Vec<f64> = q.iter().zip(dq.iter()).map(|(a, b)| a + b).collect();
        chain.clamp(&mut candidate);
        let cand_err = target - fk_position(chain, &candidate)?;
        let cand_res = cand_err.norm();
        if cand_res < residual {
            q = candidate;
            err = cand_err;
            residual = cand_res;
            lambda = (lambda * 0.5).max(1e-9);
            if residual <= opts.tol {
                return Ok(q);
            }
        } else {
            lambda = (lambda * 4.0).min(1e6);
        }
    }
    Err(Error::Unreachable { residual, best: q })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn two_link() -> KinematicChain {
        KinematicChain::planar(&[1.0, 1.0], (-std::f64::consts::PI, std::f64::consts::PI))
    }

    #[test]
    fn straight_arm_reaches_two() {
        let p = fk_position(&two_link(), &[0.0, 0.0]).unwrap();
        assert!((p - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn quarter_turn() {
        let p = fk_position(&two_link(), &[FRAC_PI_2, 0.0]).unwrap();
        assert!((p - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-12);
        let p = fk_position(&two_link(), &[FRAC_PI_2, -FRAC_PI_2]).unwrap();
        assert!((p - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn jacobian_at_zero() {
        let j = fk_jacobian(&two_link(), &[0.0, 0.0]).unwrap();
        assert!((j.column(0) - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-12);
        assert!((j.column(1) - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn single_joint_tangent() {
        let chain = KinematicChain::planar(&[1.0], (-3.0, 3.0));
        let j = fk_jacobian(&chain, &[0.0]).unwrap();
        assert!((j.column(0) - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn wrong_length_is_input_error() {
        assert!(matches!(
            fk_position(&two_link(), &[0.0]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            fk_jacobian(&two_link(), &[0.0; 3]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn ik_fixed_point_returns_seed() {
        let chain = two_link();
        let q0 = [0.3, -0.7];
        let target = fk_position(&chain, &q0).unwrap();
        let q = inverse_kinematics(&chain, &target, &q0, &IkOptions::default()).unwrap();
        assert_eq!(q, q0.to_vec());
    }

    #[test]
    fn ik_reaches_full_extension() {
        let chain = two_link();
        let target = Vector3::new(2.0, 0.0, 0.0);
        let opts = IkOptions::default();
        let q = inverse_kinematics(&chain, &target, &[0.4, -0.3], &opts).unwrap();
        assert!((fk_position(&chain, &q).unwrap() - target).norm() <= opts.tol);
        assert!(q[0].abs() < 1e-2 && q[1].abs() < 1e-2, "{q:?}");
    }

    #[test]
    fn ik_outside_reach_is_unreachable() {
        let err = inverse_kinematics(
            &two_link(),
            &Vector3::new(3.0, 0.0, 0.0),
            &[0.2, 0.2],
            &IkOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::Unreachable { residual, best } => {
                assert!((residual - 1.0).abs() < 1e-3);
                assert_eq!(best.len(), 2);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn chain_json_round_trip() {
        let chain = KinematicChain::desk_arm(0.1);
        let back = KinematicChain::from_json(&chain.to_json()).unwrap();
        assert_eq!(chain, back);
    }

    #[test]
    fn bundled_panda_loads() {
        let panda = KinematicChain::panda();
        assert_eq!(panda.dof(), 7);
        let (pose, _) = forward_kinematics(&panda, &[0.0, -0.3, 0.0, -2.2, 0.0, 2.0, 0.8]).unwrap();
        assert!(pose.is_valid(1e-9));
    }

    #[test]
    fn invalid_chains_are_rejected() {
        let bad_axis = Joint {
            axis: Vector3::new(0.0, 0.0, 2.0),
            offset: Pose::identity(),
            limits: (-1.0, 1.0),
        };
        assert!(KinematicChain::new(Pose::identity(), vec![bad_axis], Pose::identity()).is_err());
        assert!(KinematicChain::new(Pose::identity(), vec![], Pose::identity()).is_err());
        let bad_limits = Joint {
            axis: Vector3::z(),
            offset: Pose::identity(),
            limits: (1.0, 1.0),
        };
        assert!(KinematicChain::new(Pose::identity(), vec![bad_limits], Pose::identity()).is_err());
    }
}
