//! Coupling between the visual frame `V` (arbitrary scale and orientation)
//! and the metric, gravity-aligned inertial frame `I`.
//!
//! A point maps as `x_I = s R_VIᵀ x_V`. Keyframe poses are optimized in `V`
//! as world-to-camera transforms `P^V`; the IMU residual needs the IMU body
//! pose in `I`:
//!
//! ```text
//! R_I = R_VIᵀ R_wc R_ci
//! t_I = R_VIᵀ (s t_wc + R_wc t_ci)
//! ```
//!
//! where `(R_wc, t_wc) = (P^V)⁻¹` and `(R_ci, t_ci)` maps IMU coordinates to
//! metric camera coordinates. The result is a rigid transform even though the
//! intermediate steps are similarities.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x2, Vector3};
use std::sync::Arc;

use crate::error::Result;
use crate::graph::{Factor, FactorEvaluation, GraphValues, Loss, VariableKey, Weight};
use crate::imu::{bias_random_walk_information, ImuBias, ImuState, PreintegratedImu};
use crate::lie::{skew, GravityRotation, RigidTransform, Rotation3};

/// IMU body pose in `I` with Jacobians.
///
/// Rotation Jacobians are for the right perturbation `R_I Exp(φ)`,
/// translation Jacobians for additive perturbations.
#[derive(Clone, Debug, PartialEq)]
pub struct InertialPose {
    pub pose: RigidTransform,
    /// `∂φ/∂ξ` and `∂t/∂ξ` for the left perturbation of `P^V`.
    pub d_rot_pose: nalgebra::Matrix3x6<f64>,
    pub d_trans_pose: nalgebra::Matrix3x6<f64>,
    /// `∂t/∂ln s` (rotation does not depend on scale).
    pub d_trans_scale: Vector3<f64>,
    /// Derivatives with respect to the two gravity tangent directions.
    pub d_rot_gravity: Matrix3x2<f64>,
    pub d_trans_gravity: Matrix3x2<f64>,
}

/// Converts a visual-frame keyframe pose into the IMU pose in `I`.
pub fn omega_transform(
    pose_v: &RigidTransform,
    scale: f64,
    gravity: &GravityRotation,
    t_cam_imu: &RigidTransform,
) -> InertialPose {
    let r_vi = gravity.rotation().matrix();
    let wc = pose_v.inverse();
    let r_wc = wc.rotation.matrix();
    let r_ci = t_cam_imu.rotation.matrix();
    let t_ci = t_cam_imu.translation;
    let r_o = r_vi.transpose() * r_wc * r_ci;
    let t_o = r_vi.transpose() * (scale * wc.translation + r_wc * t_ci);

    let mut d_rot_pose = nalgebra::Matrix3x6::zeros();
    d_rot_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r_ci.transpose()));
    let mut d_trans_pose = nalgebra::Matrix3x6::zeros();
    d_trans_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r_vi.transpose() * r_wc * skew(&t_ci)));
    d_trans_pose.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-scale * r_vi.transpose() * r_wc));
    let a = gravity.right_tangent_jacobian();
    InertialPose {
        pose: RigidTransform::new(Rotation3::from_matrix(&r_o), t_o),
        d_rot_pose,
        d_trans_pose,
        d_trans_scale: r_vi.transpose() * wc.translation * scale,
        d_rot_gravity: -r_o.transpose() * a,
        d_trans_gravity: skew(&t_o) * a,
    }
}

/// Inverse of [`omega_transform`]: the visual-frame pose of an IMU pose.
pub fn visual_pose_from_inertial(
    imu_pose: &RigidTransform,
    scale: f64,
    gravity: &GravityRotation,
    t_cam_imu: &RigidTransform,
) -> RigidTransform {
    let r_vi = gravity.rotation().matrix();
    let r_ci = t_cam_imu.rotation.matrix();
    let r_wc = r_vi * imu_pose.rotation.matrix() * r_ci.transpose();
    let t_wc = (r_vi * imu_pose.translation - r_wc * t_cam_imu.translation) / scale;
    RigidTransform::new(Rotation3::from_matrix(&r_wc), t_wc).inverse()
}

/// IMU factor between successive keyframes `i` and `j`, expressed on
/// visual-frame poses, inertial velocities and biases, scale and gravity.
///
/// Keys: `[pose(i), velocity(i), bias_i, pose(j), velocity(j), scale, gravity]`.
#[derive(Clone, Debug)]
pub struct ImuFactor {
    keys: [VariableKey; 7],
    pair: (u32, u32),
    preintegration: Arc<PreintegratedImu>,
    information: DMatrix<f64>,
    t_cam_imu: RigidTransform,
}

impl ImuFactor {
    pub fn new(i: u32, j: u32, preintegration: Arc<PreintegratedImu>, t_cam_imu: RigidTransform) -> Result<Self> {
        Self::with_bias_key(i, j, VariableKey::bias(i), preintegration, t_cam_imu)
    }

    /// As [`new`](Self::new) with an explicit bias variable, e.g. a bias
    /// shared by all segments.
    pub fn with_bias_key(
        i: u32,
        j: u32,
        bias_key: VariableKey,
        preintegration: Arc<PreintegratedImu>,
        t_cam_imu: RigidTransform,
    ) -> Result<Self> {
        let info = preintegration.information()?;
        Ok(Self {
            keys: [
                VariableKey::pose(i),
                VariableKey::velocity(i),
                bias_key,
                VariableKey::pose(j),
                VariableKey::velocity(j),
                VariableKey::scale(),
                VariableKey::gravity(),
            ],
            pair: (i, j),
            preintegration,
            information: DMatrix::from_column_slice(9, 9, info.as_slice()),
            t_cam_imu,
        })
    }

    pub fn preintegration(&self) -> &PreintegratedImu {
        &self.preintegration
    }

    /// IMU states of both keyframes under `values`.
    pub fn states(&self, values: &GraphValues) -> Result<(InertialPose, ImuState, InertialPose, ImuState)> {
        let s = values.scale(&self.keys[5])?;
        let g = values.gravity(&self.keys[6])?;
        let pi = omega_transform(values.pose(&self.keys[0])?, s, g, &self.t_cam_imu);
        let pj = omega_transform(values.pose(&self.keys[3])?, s, g, &self.t_cam_imu);
        let bias = ImuBias::from_slice(values.vector(&self.keys[2])?.as_slice());
        let si = ImuState {
            rotation: pi.pose.rotation,
            position: pi.pose.translation,
            velocity: Vector3::from_column_slice(values.vector(&self.keys[1])?.as_slice()),
            bias,
        };
        let sj = ImuState {
            rotation: pj.pose.rotation,
            position: pj.pose.translation,
            velocity: Vector3::from_column_slice(values.vector(&self.keys[4])?.as_slice()),
            bias,
        };
        Ok((pi, si, pj, sj))
    }
}

fn to_dyn<const C: usize>(m: &nalgebra::SMatrix<f64, 9, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(9, C, m.as_slice())
}

impl Factor for ImuFactor {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn residual_dim(&self) -> usize {
        9
    }

    fn imu_pair(&self) -> Option<(u32, u32)> {
        Some(self.pair)
    }

    fn evaluate(&self, values: &GraphValues) -> Result<FactorEvaluation> {
        let (pi, si, pj, sj) = self.states(values)?;
        let gravity = self.preintegration.noise.gravity();
        let r = self.preintegration.residual(&si, &sj, &gravity);

        let j_pose_i = r.d_phi_i * pi.d_rot_pose + r.d_p_i * pi.d_trans_pose;
        let j_pose_j = r.d_phi_j * pj.d_rot_pose + r.d_p_j * pj.d_trans_pose;
        let j_scale = r.d_p_i * pi.d_trans_scale + r.d_p_j * pj.d_trans_scale;
        let j_gravity = r.d_phi_i * pi.d_rot_gravity
            + r.d_p_i * pi.d_trans_gravity
            + r.d_phi_j * pj.d_rot_gravity
            + r.d_p_j * pj.d_trans_gravity;
        let mut j_bias = nalgebra::SMatrix::<f64, 9, 6>::zeros();
        j_bias.fixed_view_mut::<9, 3>(0, 0).copy_from(&r.d_bg_i);
        j_bias.fixed_view_mut::<9, 3>(0, 3).copy_from(&r.d_ba_i);

        Ok(FactorEvaluation {
            residual: DVector::from_column_slice(r.residual.as_slice()),
            jacobians: vec![
                to_dyn(&j_pose_i),
                to_dyn::<3>(&r.d_v_i),
                to_dyn(&j_bias),
                to_dyn(&j_pose_j),
                to_dyn::<3>(&r.d_v_j),
                to_dyn::<1>(&j_scale),
                to_dyn::<2>(&j_gravity),
            ],
            weight: Weight::Information(self.information.clone()),
            loss: Loss::Squared,
        })
    }
}

/// Bias random walk between keyframes: `r = b_j − b_i`.
#[derive(Clone, Debug)]
pub struct BiasRandomWalkFactor {
    keys: [VariableKey; 2],
    information: DVector<f64>,
}

impl BiasRandomWalkFactor {
    pub fn new(i: u32, j: u32, noise: &crate::imu::ImuNoiseParams, dt: f64) -> Self {
        Self {
            keys: [VariableKey::bias(i), VariableKey::bias(j)],
            information: DVector::from_column_slice(&bias_random_walk_information(noise, dt)),
        }
    }
}

impl Factor for BiasRandomWalkFactor {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn residual_dim(&self) -> usize {
        6
    }

    fn evaluate(&self, values: &GraphValues) -> Result<FactorEvaluation> {
        let r = values.vector(&self.keys[1])? - values.vector(&self.keys[0])?;
        Ok(FactorEvaluation {
            residual: r,
            jacobians: vec![-DMatrix::identity(6, 6), DMatrix::identity(6, 6)],
            weight: Weight::Diagonal(self.information.clone()),
            loss: Loss::Squared,
        })
    }
}

/// Fixes the scale of the visual frame: `r = ln(‖c_j − c_i‖ / d₀)` on the
/// camera centers of two keyframes.
#[derive(Clone, Debug)]
pub struct ScaleGaugeFactor {
    keys: [VariableKey; 2],
    distance: f64,
    weight: f64,
}

impl ScaleGaugeFactor {
    pub fn new(i: u32, j: u32, distance: f64, weight: f64) -> Self {
        Self { keys: [VariableKey::pose(i), VariableKey::pose(j)], distance, weight }
    }
}

impl Factor for ScaleGaugeFactor {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn residual_dim(&self) -> usize {
        1
    }

    fn evaluate(&self, values: &GraphValues) -> Result<FactorEvaluation> {
        let pi = values.pose(&self.keys[0])?;
        let pj = values.pose(&self.keys[1])?;
        let ci = pi.inverse().translation;
        let cj = pj.inverse().translation;
        let delta = cj - ci;
        let n = delta.norm().max(1e-12);
        let u = delta / n;
        // the center moves by −Rᵀν under a left perturbation of the pose
        let row = |r: &Matrix3<f64>, sign: f64| {
            let g = -(r * u) * (sign / n);
            DMatrix::from_row_slice(1, 6, &[0.0, 0.0, 0.0, g.x, g.y, g.z])
        };
        Ok(FactorEvaluation {
            residual: DVector::from_element(1, (n / self.distance).ln()),
            jacobians: vec![row(&pi.rotation.matrix(), -1.0), row(&pj.rotation.matrix(), 1.0)],
            weight: Weight::Diagonal(DVector::from_element(1, self.weight)),
            loss: Loss::Squared,
        })
    }
}
