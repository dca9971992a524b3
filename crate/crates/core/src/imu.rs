//! IMU preintegration between keyframes, the inertial residual and the bias
//! random walk.
//!
//! Samples are integrated with the midpoint rule. The preintegrated deltas are
//! expressed in the body frame of the first keyframe and carry first-order
//! Jacobians with respect to the bias they were integrated with, so small bias
//! updates do not require re-integration.
//!
//! Residual, for states `i` and `j` in the gravity-aligned inertial frame:
//!
//! ```text
//! r_R = Log(ΔR̃ᵀ R_iᵀ R_j)
//! r_v = R_iᵀ (v_j − v_i − g Δt) − Δṽ
//! r_p = R_iᵀ (p_j − p_i − v_i Δt − ½ g Δt²) − Δp̃
//! ```
//!
//! where `~` marks bias-corrected deltas. The energy is `rᵀ Σ̂⁻¹ r`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{right_jacobian, right_jacobian_inverse, skew, Rotation3};

pub type Vector9 = SVector<f64, 9>;
pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix93 = SMatrix<f64, 9, 3>;

pub const DEFAULT_GRAVITY: f64 = 9.81;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuMeasurement {
    /// Seconds.
    pub timestamp: f64,
    /// rad/s.
    pub gyro: Vector3<f64>,
    /// m/s², specific force in the body frame.
    pub accel: Vector3<f64>,
}

impl ImuMeasurement {
    pub fn new(timestamp: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { timestamp, gyro, accel }
    }

    fn lerp(&self, other: &ImuMeasurement, t: f64) -> ImuMeasurement {
        let span = other.timestamp - self.timestamp;
        let a = if span > 0.0 { (t - self.timestamp) / span } else { 0.0 };
        ImuMeasurement {
            timestamp: t,
            gyro: self.gyro * (1.0 - a) + other.gyro * a,
            accel: self.accel * (1.0 - a) + other.accel * a,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImuBias {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuBias {
    pub fn new(gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { gyro, accel }
    }

    /// `(gyro, accel)` stacked.
    pub fn to_array(&self) -> [f64; 6] {
        [self.gyro.x, self.gyro.y, self.gyro.z, self.accel.x, self.accel.y, self.accel.z]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { gyro: Vector3::new(v[0], v[1], v[2]), accel: Vector3::new(v[3], v[4], v[5]) }
    }
}

/// Continuous-time noise densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuNoiseParams {
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s²/√Hz
    pub gyro_random_walk: f64,
    /// m/s³/√Hz
    pub accel_random_walk: f64,
    pub gravity_magnitude: f64,
}

impl Default for ImuNoiseParams {
    /// Values of the ADIS16448 sensor used in EuRoC.
    fn default() -> Self {
        Self {
            gyro_noise_density: 1.6968e-4,
            accel_noise_density: 2.0e-3,
            gyro_random_walk: 1.9393e-5,
            accel_random_walk: 3.0e-3,
            gravity_magnitude: DEFAULT_GRAVITY,
        }
    }
}

impl ImuNoiseParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_random_walk,
            self.accel_random_walk,
            self.gravity_magnitude,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("IMU noise parameters must be positive: {self:?}")))
        }
    }

    /// Gravity in the inertial frame, whose z axis points up.
    pub fn gravity(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.gravity_magnitude)
    }
}

/// Rotation, position and velocity of the IMU body in the inertial frame,
/// plus its bias.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuState {
    pub rotation: Rotation3,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub bias: ImuBias,
}

/// Relative motion between two keyframes compounded from IMU samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreintegratedImu {
    pub dt: f64,
    pub delta_r: Rotation3,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    /// Covariance of `(δφ, δv, δp)`.
    pub covariance: Matrix9,
    pub bias: ImuBias,
    pub j_r_bg: Matrix3<f64>,
    pub j_v_bg: Matrix3<f64>,
    pub j_v_ba: Matrix3<f64>,
    pub j_p_bg: Matrix3<f64>,
    pub j_p_ba: Matrix3<f64>,
    pub noise: ImuNoiseParams,
    last: Option<ImuMeasurement>,
}

impl PreintegratedImu {
    pub fn new(bias: ImuBias, noise: ImuNoiseParams) -> Self {
        Self {
            dt: 0.0,
            delta_r: Rotation3::identity(),
            delta_v: Vector3::zeros(),
            delta_p: Vector3::zeros(),
            covariance: Matrix9::zeros(),
            bias,
            j_r_bg: Matrix3::zeros(),
            j_v_bg: Matrix3::zeros(),
            j_v_ba: Matrix3::zeros(),
            j_p_bg: Matrix3::zeros(),
            j_p_ba: Matrix3::zeros(),
            noise,
            last: None,
        }
    }

    /// Integrates the interval of length `dt` ending at `measurement`.
    ///
    /// The rates over the interval are the midpoint of the previous sample
    /// and `measurement`; the first call holds `measurement` constant.
    pub fn integrate(&mut self, measurement: &ImuMeasurement, dt: f64) -> Result<()> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Data(format!("IMU integration step must be positive, got {dt}")));
        }
        let start = self.last.unwrap_or(*measurement);
        self.step(&start, measurement, dt);
        self.last = Some(*measurement);
        Ok(())
    }

    fn step(&mut self, m0: &ImuMeasurement, m1: &ImuMeasurement, dt: f64) {
        let w = 0.5 * (m0.gyro + m1.gyro) - self.bias.gyro;
        let a0 = m0.accel - self.bias.accel;
        let a1 = m1.accel - self.bias.accel;

        let theta = w * dt;
        let e = Rotation3::exp(&theta);
        let em = e.matrix();
        let jr = right_jacobian(&theta);
        let rk = self.delta_r.matrix();
        let rk1 = rk * em;
        let acc = 0.5 * (rk * a0 + rk1 * a1);

        // error-state propagation (δφ, δv, δp)
        let m = -0.5 * (rk * skew(&a0) + rk1 * skew(&a1) * em.transpose());
        let g = 0.5 * rk1 * skew(&a1) * jr * dt;
        let ra = -0.5 * (rk + rk1);
        let mut a = Matrix9::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&em.transpose());
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(m * dt));
        a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(m * (0.5 * dt * dt)));
        a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt));
        let mut b = SMatrix::<f64, 9, 6>::zeros();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jr * dt));
        b.fixed_view_mut::<3, 3>(3, 0).copy_from(&(g * dt));
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&(ra * dt));
        b.fixed_view_mut::<3, 3>(6, 0).copy_from(&(g * (0.5 * dt * dt)));
        b.fixed_view_mut::<3, 3>(6, 3).copy_from(&(ra * (0.5 * dt * dt)));
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        let qg = self.noise.gyro_noise_density.powi(2) / dt;
        let qa = self.noise.accel_noise_density.powi(2) / dt;
        for i in 0..3 {
            q[(i, i)] = qg;
            q[(i + 3, i + 3)] = qa;
        }
        self.covariance = a * self.covariance * a.transpose() + b * q * b.transpose();
        self.covariance = 0.5 * (self.covariance + self.covariance.transpose());

        // bias Jacobians
        let j_r_next = em.transpose() * self.j_r_bg - jr * dt;
        let d_acc_bg = -0.5 * (rk * skew(&a0) * self.j_r_bg + rk1 * skew(&a1) * j_r_next);
        let d_acc_ba = ra;
        self.j_p_bg += self.j_v_bg * dt + d_acc_bg * (0.5 * dt * dt);
        self.j_p_ba += self.j_v_ba * dt + d_acc_ba * (0.5 * dt * dt);
        self.j_v_bg += d_acc_bg * dt;
        self.j_v_ba += d_acc_ba * dt;
        self.j_r_bg = j_r_next;

        self.delta_p += self.delta_v * dt + acc * (0.5 * dt * dt);
        self.delta_v += acc * dt;
        self.delta_r = self.delta_r * e;
        self.dt += dt;
    }

    /// Preintegrates the samples covering `[t0, t1]`, interpolating linearly
    /// at the ends.
    pub fn from_measurements(
        samples: &[ImuMeasurement],
        t0: f64,
        t1: f64,
        bias: ImuBias,
        noise: ImuNoiseParams,
    ) -> Result<Self> {
        const EPS: f64 = 1e-9;
        if !(t1 > t0) {
            return Err(Error::Data(format!("empty preintegration interval [{t0}, {t1}]")));
        }
        if samples.windows(2).any(|w| !(w[1].timestamp > w[0].timestamp)) {
            return Err(Error::Data("IMU timestamps must be strictly increasing".into()));
        }
        let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
            return Err(Error::Data("no IMU samples".into()));
        };
        if first.timestamp > t0 + EPS || last.timestamp < t1 - EPS {
            return Err(Error::Data(format!(
                "IMU samples cover [{}, {}], need [{t0}, {t1}]",
                first.timestamp, last.timestamp
            )));
        }
        let start = samples.partition_point(|m| m.timestamp <= t0 + EPS);
        let before = &samples[start.saturating_sub(1)];
        let mut points = vec![if (before.timestamp - t0).abs() <= EPS {
            *before
        } else {
            before.lerp(&samples[start], t0)
        }];
        for m in &samples[start..] {
            if m.timestamp >= t1 - EPS {
                let end = if (m.timestamp - t1).abs() <= EPS {
                    *m
                } else {
                    points.last().unwrap().lerp(m, t1)
                };
                points.push(end);
                break;
            }
            points.push(*m);
        }
        let mut pre = Self::new(bias, noise);
        pre.last = Some(points[0]);
        for w in points.windows(2) {
            let dt = w[1].timestamp - w[0].timestamp;
            if dt > 0.0 {
                pre.integrate(&w[1], dt)?;
            }
        }
        if pre.dt <= 0.0 {
            return Err(Error::Data(format!("no IMU data inside [{t0}, {t1}]")));
        }
        Ok(pre)
    }

    /// Deltas corrected to first order for a new bias.
    pub fn corrected_deltas(&self, bias: &ImuBias) -> (Rotation3, Vector3<f64>, Vector3<f64>) {
        let dbg = bias.gyro - self.bias.gyro;
        let dba = bias.accel - self.bias.accel;
        let r = self.delta_r * Rotation3::exp(&(self.j_r_bg * dbg));
        let v = self.delta_v + self.j_v_bg * dbg + self.j_v_ba * dba;
        let p = self.delta_p + self.j_p_bg * dbg + self.j_p_ba * dba;
        (r, v, p)
    }

    /// Predicted state at the end of the segment, and the covariance of the
    /// prediction error in the body frame of `state_i`.
    pub fn predict(&self, state_i: &ImuState, gravity: &Vector3<f64>) -> (ImuState, Matrix9) {
        let (dr, dv, dp) = self.corrected_deltas(&state_i.bias);
        let ri = state_i.rotation.matrix();
        let t = self.dt;
        let state = ImuState {
            rotation: state_i.rotation * dr,
            velocity: state_i.velocity + gravity * t + ri * dv,
            position: state_i.position + state_i.velocity * t + 0.5 * gravity * t * t + ri * dp,
            bias: state_i.bias,
        };
        (state, self.covariance)
    }

    /// `Σ̂⁻¹`. Fails if the covariance is not positive definite.
    pub fn information(&self) -> Result<Matrix9> {
        let chol = self
            .covariance
            .cholesky()
            .ok_or_else(|| Error::DegenerateCovariance(format!("IMU covariance over {} s is singular", self.dt)))?;
        let inv = chol.inverse();
        Ok(0.5 * (inv + inv.transpose()))
    }

    /// Residual and Jacobians for states `i` and `j`.
    pub fn residual(&self, si: &ImuState, sj: &ImuState, gravity: &Vector3<f64>) -> ImuResidual {
        let (dr, dv, dp) = self.corrected_deltas(&si.bias);
        let t = self.dt;
        let ri = si.rotation.matrix();
        let rj = sj.rotation.matrix();
        let rit = ri.transpose();
        let r_rot = (dr.inverse() * si.rotation.inverse() * sj.rotation).log();
        let u = sj.velocity - si.velocity - gravity * t;
        let w = sj.position - si.position - si.velocity * t - 0.5 * gravity * t * t;
        let r_v = rit * u - dv;
        let r_p = rit * w - dp;

        let jr_inv = right_jacobian_inverse(&r_rot);
        let dbg = si.bias.gyro - self.bias.gyro;
        let d_rot_bg = -jr_inv * Rotation3::exp(&r_rot).matrix().transpose() * right_jacobian(&(self.j_r_bg * dbg)) * self.j_r_bg;

        let mut out = ImuResidual::default();
        out.residual.fixed_rows_mut::<3>(0).copy_from(&r_rot);
        out.residual.fixed_rows_mut::<3>(3).copy_from(&r_v);
        out.residual.fixed_rows_mut::<3>(6).copy_from(&r_p);

        out.d_phi_i.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jr_inv * rj.transpose() * ri));
        out.d_phi_i.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&(rit * u)));
        out.d_phi_i.fixed_view_mut::<3, 3>(6, 0).copy_from(&skew(&(rit * w)));
        out.d_phi_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);

        out.d_v_i.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-rit));
        out.d_v_i.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-rit * t));
        out.d_v_j.fixed_view_mut::<3, 3>(3, 0).copy_from(&rit);
        out.d_p_i.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-rit));
        out.d_p_j.fixed_view_mut::<3, 3>(6, 0).copy_from(&rit);

        out.d_bg_i.fixed_view_mut::<3, 3>(0, 0).copy_from(&d_rot_bg);
        out.d_bg_i.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-self.j_v_bg));
        out.d_bg_i.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-self.j_p_bg));
        out.d_ba_i.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-self.j_v_ba));
        out.d_ba_i.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-self.j_p_ba));
        out
    }

    /// `rᵀ Σ̂⁻¹ r`.
    pub fn energy(&self, si: &ImuState, sj: &ImuState, gravity: &Vector3<f64>) -> Result<f64> {
        let r = self.residual(si, sj, gravity).residual;
        Ok((r.transpose() * self.information()? * r)[(0, 0)])
    }

    /// Composes `self` (earlier) with `next` (later). Both must share the
    /// bias linearization point.
    pub fn concatenate(&self, next: &PreintegratedImu) -> Result<PreintegratedImu> {
        if self.bias != next.bias {
            return Err(Error::Structural("cannot concatenate preintegrations with different biases".into()));
        }
        let ra = self.delta_r.matrix();
        let rb = next.delta_r.matrix();
        let tb = next.dt;
        let mut out = self.clone();
        out.dt = self.dt + next.dt;
        out.delta_r = self.delta_r * next.delta_r;
        out.delta_v = self.delta_v + ra * next.delta_v;
        out.delta_p = self.delta_p + self.delta_v * tb + ra * next.delta_p;

        out.j_r_bg = rb.transpose() * self.j_r_bg + next.j_r_bg;
        out.j_v_bg = self.j_v_bg - ra * skew(&next.delta_v) * self.j_r_bg + ra * next.j_v_bg;
        out.j_v_ba = self.j_v_ba + ra * next.j_v_ba;
        out.j_p_bg = self.j_p_bg + self.j_v_bg * tb - ra * skew(&next.delta_p) * self.j_r_bg + ra * next.j_p_bg;
        out.j_p_ba = self.j_p_ba + self.j_v_ba * tb + ra * next.j_p_ba;

        let mut a = Matrix9::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&rb.transpose());
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ra * skew(&next.delta_v)));
        a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-ra * skew(&next.delta_p)));
        a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * tb));
        let mut b = Matrix9::zeros();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&ra);
        b.fixed_view_mut::<3, 3>(6, 6).copy_from(&ra);
        out.covariance = a * self.covariance * a.transpose() + b * next.covariance * b.transpose();
        out.last = next.last;
        Ok(out)
    }
}

/// IMU residual with Jacobians. Rotations are perturbed on the right
/// (`R Exp(φ)`), positions, velocities and biases additively.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImuResidual {
    pub residual: Vector9,
    pub d_phi_i: Matrix93,
    pub d_p_i: Matrix93,
    pub d_v_i: Matrix93,
    pub d_bg_i: Matrix93,
    pub d_ba_i: Matrix93,
    pub d_phi_j: Matrix93,
    pub d_p_j: Matrix93,
    pub d_v_j: Matrix93,
}

/// Information of the bias random walk over `dt`: `diag(1/(σ²_bg Δt), 1/(σ²_ba Δt))`.
pub fn bias_random_walk_information(noise: &ImuNoiseParams, dt: f64) -> [f64; 6] {
    let g = 1.0 / (noise.gyro_random_walk.powi(2) * dt);
    let a = 1.0 / (noise.accel_random_walk.powi(2) * dt);
    [g, g, g, a, a, a]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant_samples(gyro: Vector3<f64>, accel: Vector3<f64>, rate: f64, duration: f64) -> Vec<ImuMeasurement> {
        let n = (rate * duration).round() as usize;
        (0..=n).map(|k| ImuMeasurement::new(k as f64 / rate, gyro, accel)).collect()
    }

    fn quiet() -> ImuNoiseParams {
        ImuNoiseParams::default()
    }

    #[test]
    fn statics_give_identity() {
        let s = constant_samples(Vector3::zeros(), Vector3::zeros(), 100.0, 1.0);
        let p = PreintegratedImu::from_measurements(&s, 0.0, 1.0, ImuBias::default(), quiet()).unwrap();
        assert!((p.dt - 1.0).abs() < 1e-12);
        assert!(p.delta_r.angle() < 1e-15);
        assert_eq!(p.delta_v, Vector3::zeros());
        assert_eq!(p.delta_p, Vector3::zeros());
    }

    #[test]
    fn constant_acceleration_closed_form() {
        let s = constant_samples(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), 1000.0, 1.0);
        let p = PreintegratedImu::from_measurements(&s, 0.0, 1.0, ImuBias::default(), quiet()).unwrap();
        assert!((p.delta_v - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-3);
        assert!((p.delta_p - Vector3::new(0.5, 0.0, 0.0)).norm() < 0.5e-3);
    }

    #[test]
    fn constant_rate_closed_form() {
        let s = constant_samples(Vector3::new(0.0, 0.0, 1.0), Vector3::zeros(), 1000.0, 1.0);
        let p = PreintegratedImu::from_measurements(&s, 0.0, 1.0, ImuBias::default(), quiet()).unwrap();
        assert!(p.delta_r.angle_to(&Rotation3::exp(&Vector3::new(0.0, 0.0, 1.0))) < 1e-10);
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let mut p = PreintegratedImu::new(ImuBias::default(), quiet());
        let m = ImuMeasurement::new(0.0, Vector3::zeros(), Vector3::zeros());
        assert!(matches!(p.integrate(&m, 0.0), Err(Error::Data(_))));
        assert!(matches!(p.integrate(&m, -1.0), Err(Error::Data(_))));
    }

    #[test]
    fn identity_preintegration_predicts_free_fall() {
        let p = PreintegratedImu::new(ImuBias::default(), quiet());
        let mut p = p;
        p.dt = 2.0;
        let g = quiet().gravity();
        let si = ImuState {
            rotation: Rotation3::exp(&Vector3::new(0.1, 0.2, 0.3)),
            position: Vector3::new(1.0, 2.0, 3.0),
            velocity: Vector3::new(0.5, 0.0, 1.0),
            bias: ImuBias::default(),
        };
        let (sj, _) = p.predict(&si, &g);
        assert!((sj.position - (si.position + si.velocity * 2.0 + 0.5 * g * 4.0)).norm() < 1e-12);
        assert!((sj.velocity - (si.velocity + g * 2.0)).norm() < 1e-12);
        assert!(sj.rotation.angle_to(&si.rotation) < 1e-12);
    }

    #[test]
    fn scalar_energy_example() {
        // residual 2 with variance 4 along one axis
        let mut p = PreintegratedImu::new(ImuBias::default(), quiet());
        p.dt = 1.0;
        p.covariance = Matrix9::identity() * 4.0;
        let g = Vector3::zeros();
        let si = ImuState { rotation: Rotation3::identity(), position: Vector3::zeros(), velocity: Vector3::zeros(), bias: ImuBias::default() };
        let mut sj = si;
        sj.position = Vector3::new(2.0, 0.0, 0.0);
        assert!((p.energy(&si, &sj, &g).unwrap() - 1.0).abs() < 1e-12);
        sj.position = Vector3::zeros();
        assert_eq!(p.energy(&si, &sj, &g).unwrap(), 0.0);
    }

    #[test]
    fn singular_covariance_is_reported() {
        let p = PreintegratedImu::new(ImuBias::default(), quiet());
        assert!(matches!(p.information(), Err(Error::DegenerateCovariance(_))));
    }

    fn wobble(t: f64) -> ImuMeasurement {
        ImuMeasurement::new(
            t,
            Vector3::new(0.3 * (2.0 * t).sin(), 0.2 * (1.3 * t).cos(), 0.5 + 0.1 * t),
            Vector3::new(1.0 + (3.0 * t).sin(), 0.5 * t.cos(), 9.81 + 0.2 * (5.0 * t).sin()),
        )
    }

    fn wobble_samples(rate: f64, duration: f64) -> Vec<ImuMeasurement> {
        let n = (rate * duration).round() as usize;
        (0..=n).map(|k| wobble(k as f64 / rate)).collect()
    }

    #[test]
    fn covariance_stays_psd_and_grows() {
        let s = wobble_samples(200.0, 1.0);
        let mut p = PreintegratedImu::new(ImuBias::default(), quiet());
        p.last = Some(s[0]);
        let mut trace = 0.0;
        for w in s.windows(2) {
            p.integrate(&w[1], w[1].timestamp - w[0].timestamp).unwrap();
            let eig = nalgebra::SymmetricEigen::new(p.covariance).eigenvalues;
            assert!(eig.min() > -1e-18);
            assert!(p.covariance.trace() >= trace);
            trace = p.covariance.trace();
        }
    }

    #[test]
    fn concatenation_matches_single_pass() {
        let s = wobble_samples(200.0, 1.0);
        let noise = quiet();
        let bias = ImuBias::new(Vector3::new(0.01, -0.02, 0.005), Vector3::new(0.1, 0.0, -0.05));
        let whole = PreintegratedImu::from_measurements(&s, 0.0, 1.0, bias, noise).unwrap();
        let a = PreintegratedImu::from_measurements(&s, 0.0, 0.4, bias, noise).unwrap();
        let b = PreintegratedImu::from_measurements(&s, 0.4, 1.0, bias, noise).unwrap();
        let ab = a.concatenate(&b).unwrap();
        assert!((ab.dt - whole.dt).abs() < 1e-12);
        assert!(ab.delta_r.angle_to(&whole.delta_r) < 1e-8);
        assert!((ab.delta_v - whole.delta_v).norm() < 1e-8);
        assert!((ab.delta_p - whole.delta_p).norm() < 1e-8);
        for (x, y) in [
            (ab.j_r_bg, whole.j_r_bg),
            (ab.j_v_bg, whole.j_v_bg),
            (ab.j_v_ba, whole.j_v_ba),
            (ab.j_p_bg, whole.j_p_bg),
            (ab.j_p_ba, whole.j_p_ba),
        ] {
            assert!((x - y).norm() < 1e-8);
        }
        assert!((ab.covariance - whole.covariance).norm() < 1e-8 * whole.covariance.norm());
    }

    #[test]
    fn bias_correction_is_first_order() {
        let s = wobble_samples(200.0, 0.5);
        let noise = quiet();
        let b0 = ImuBias::default();
        let base = PreintegratedImu::from_measurements(&s, 0.0, 0.5, b0, noise).unwrap();
        let dir = ImuBias::new(Vector3::new(0.02, -0.01, 0.03), Vector3::new(0.05, 0.1, -0.08));
        let err = |scale: f64| {
            let b = ImuBias::new(dir.gyro * scale, dir.accel * scale);
            let exact = PreintegratedImu::from_measurements(&s, 0.0, 0.5, b, noise).unwrap();
            let (r, v, p) = base.corrected_deltas(&b);
            r.angle_to(&exact.delta_r) + (v - exact.delta_v).norm() + (p - exact.delta_p).norm()
        };
        let e1 = err(1.0);
        let e2 = err(0.5);
        // second-order error: halving the perturbation quarters the error
        assert!(e2 < 0.3 * e1, "{e1} {e2}");
        assert!(e1 < 1e-3);
    }

    fn random_state(seed: &[f64]) -> ImuState {
        ImuState {
            rotation: Rotation3::exp(&Vector3::new(seed[0], seed[1], seed[2])),
            position: Vector3::new(seed[3], seed[4], seed[5]) * 3.0,
            velocity: Vector3::new(seed[6], seed[7], seed[8]),
            bias: ImuBias::new(Vector3::new(seed[9], seed[10], seed[11]) * 0.01, Vector3::new(seed[0], seed[4], seed[8]) * 0.1),
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let s = wobble_samples(200.0, 0.5);
        let pre = PreintegratedImu::from_measurements(&s, 0.0, 0.5, ImuBias::default(), quiet()).unwrap();
        let g = quiet().gravity();
        let si = random_state(&[0.1, -0.3, 0.2, 0.5, 0.1, -0.4, 0.3, 0.2, -0.1, 0.4, -0.2, 0.3]);
        let (mut sj, _) = pre.predict(&si, &g);
        sj.rotation = sj.rotation.boxplus(&Vector3::new(0.05, -0.02, 0.03));
        sj.position += Vector3::new(0.1, -0.1, 0.2);
        sj.velocity += Vector3::new(-0.2, 0.1, 0.05);
        let analytic = pre.residual(&si, &sj, &g);
        let h = 1e-6;
        type Perturb = fn(&mut ImuState, &mut ImuState, usize, f64);
        let cases: [(Perturb, Matrix93); 8] = [
            (|a, _, k, e| a.rotation = a.rotation * Rotation3::exp(&Vector3::ith(k, e)), analytic.d_phi_i),
            (|a, _, k, e| a.position[k] += e, analytic.d_p_i),
            (|a, _, k, e| a.velocity[k] += e, analytic.d_v_i),
            (|a, _, k, e| a.bias.gyro[k] += e, analytic.d_bg_i),
            (|a, _, k, e| a.bias.accel[k] += e, analytic.d_ba_i),
            (|_, b, k, e| b.rotation = b.rotation * Rotation3::exp(&Vector3::ith(k, e)), analytic.d_phi_j),
            (|_, b, k, e| b.position[k] += e, analytic.d_p_j),
            (|_, b, k, e| b.velocity[k] += e, analytic.d_v_j),
        ];
        for (perturb, jac) in cases {
            let mut numeric = Matrix93::zeros();
            for k in 0..3 {
                let (mut a, mut b) = (si, sj);
                perturb(&mut a, &mut b, k, h);
                let plus = pre.residual(&a, &b, &g).residual;
                let (mut a, mut b) = (si, sj);
                perturb(&mut a, &mut b, k, -h);
                let minus = pre.residual(&a, &b, &g).residual;
                numeric.set_column(k, &((plus - minus) / (2.0 * h)));
            }
            assert!((numeric - jac).norm() <= 1e-5 * jac.norm().max(1.0), "{numeric} vs {jac}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prediction_commutes_with_yaw(yaw in -3.0f64..3.0, seed in proptest::collection::vec(-1.0f64..1.0, 12)) {
            let s = wobble_samples(100.0, 0.3);
            let pre = PreintegratedImu::from_measurements(&s, 0.0, 0.3, ImuBias::default(), quiet()).unwrap();
            let g = quiet().gravity();
            let si = random_state(&seed);
            let rz = Rotation3::exp(&Vector3::new(0.0, 0.0, yaw));
            let si_rot = ImuState {
                rotation: rz * si.rotation,
                position: rz.rotate(&si.position),
                velocity: rz.rotate(&si.velocity),
                bias: si.bias,
            };
            let (a, _) = pre.predict(&si, &g);
            let (b, _) = pre.predict(&si_rot, &g);
            prop_assert!((rz.rotate(&a.position) - b.position).norm() < 1e-9);
            prop_assert!((rz.rotate(&a.velocity) - b.velocity).norm() < 1e-9);
            prop_assert!((rz * a.rotation).angle_to(&b.rotation) < 1e-9);
        }
    }
}
