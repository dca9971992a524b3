//! Synthetic direct front-end: landmarks carrying smooth intensity patches,
//! photometric residuals over an 8-pixel pattern, the dynamic photometric
//! weight and keyframe marginalization selection.
//!
//! Every landmark is hosted by a keyframe and lies, locally, on a
//! fronto-parallel plane of the host camera. Its appearance is a quadratic
//! polynomial `R(o)` of the pixel offset `o` from the host pixel. A frame
//! observes `t e^a R(o) + b` plus noise, where `t` is the exposure time and
//! `(a, b)` the affine brightness parameters of that frame. The residual of a
//! pattern pixel in target frame `j` is
//!
//! ```text
//! r = (I_j[p'] − b_j) − (t_j e^{a_j}) / (t_i e^{a_i}) · (I_i[p] − b_i)
//! ```
//!
//! weighted by `ω_p = c² / (c² + ‖∇I_i(p)‖²)` and robustified with a Huber norm.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3, Matrix3x6, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::Result;
use crate::graph::{Factor, FactorEvaluation, GraphValues, Loss, VariableKey, Weight};
use crate::lie::{skew, RigidTransform};

/// Pattern offsets in pixels.
pub const PATTERN: [[f64; 2]; 8] = [[0.0, -2.0], [-1.0, -1.0], [1.0, -1.0], [-2.0, 0.0], [0.0, 0.0], [2.0, 0.0], [-1.0, 1.0], [0.0, 2.0]];

/// Huber knee in intensity units.
pub const HUBER_THRESHOLD: f64 = 9.0;

/// Constant `c` of the gradient weight.
pub const GRADIENT_WEIGHT_CONSTANT: f64 = 50.0;

/// Pixels a projected pattern center must stay away from the image border.
pub const BORDER: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self { fx: 460.0, fy: 460.0, cx: 376.0, cy: 240.0, width: 752.0, height: 480.0 }
    }
}

impl CameraModel {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Normalized ray `(x, y, 1)` through pixel `p`.
    pub fn ray(&self, p: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    /// Pinhole projection; `None` behind the camera.
    pub fn project(&self, x: &Vector3<f64>) -> Option<Vector2<f64>> {
        (x.z > 1e-9).then(|| Vector2::new(self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy))
    }

    pub fn project_jacobian(&self, x: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / x.z;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * x.y * iz * iz,
        )
    }

    pub fn in_bounds(&self, p: &Vector2<f64>, border: f64) -> bool {
        p.x >= border && p.y >= border && p.x <= self.width - 1.0 - border && p.y <= self.height - 1.0 - border
    }
}

/// Warp of one host pixel into a target frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    /// In front of the target camera and inside the image.
    pub visible: bool,
    /// `∂p'/∂ξ_host` (2×6, left perturbation of the host world-to-camera pose).
    pub d_host: Matrix2x6<f64>,
    pub d_target: Matrix2x6<f64>,
    pub d_idepth: Vector2<f64>,
}

/// Projects host pixel `p` with inverse depth `idepth` into the target frame.
/// Poses are world-to-camera transforms.
pub fn project(
    host_pixel: &Vector2<f64>,
    idepth: f64,
    host_pose: &RigidTransform,
    target_pose: &RigidTransform,
    camera: &CameraModel,
) -> Projection {
    let rel = *target_pose * host_pose.inverse();
    project_relative(host_pixel, idepth, &rel, camera)
}

/// [`project`] with the precomputed relative pose `T_target · T_host⁻¹`.
pub fn project_relative(host_pixel: &Vector2<f64>, idepth: f64, rel: &RigidTransform, camera: &CameraModel) -> Projection {
    let ray = camera.ray(host_pixel);
    let x_h = ray / idepth;
    let x_t = rel.transform_point(&x_h);
    let r_th = rel.rotation.matrix();
    let Some(pixel) = camera.project(&x_t) else {
        return Projection {
            pixel: Vector2::new(f64::NAN, f64::NAN),
            visible: false,
            d_host: Matrix2x6::zeros(),
            d_target: Matrix2x6::zeros(),
            d_idepth: Vector2::zeros(),
        };
    };
    let jp = camera.project_jacobian(&x_t);
    let mut dx_t = Matrix3x6::zeros();
    dx_t.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&x_t)));
    dx_t.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    let mut dx_h = Matrix3x6::zeros();
    dx_h.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r_th * skew(&x_h)));
    dx_h.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r_th));
    Projection {
        pixel,
        visible: camera.in_bounds(&pixel, BORDER),
        d_host: jp * dx_h,
        d_target: jp * dx_t,
        d_idepth: jp * (r_th * (-ray / (idepth * idepth))),
    }
}

/// Target pixel of a host pixel, or `None` if it is not visible.
fn warp_pixel(host_pixel: &Vector2<f64>, idepth: f64, rel: &RigidTransform, camera: &CameraModel) -> Option<Vector2<f64>> {
    let x_t = rel.transform_point(&(camera.ray(host_pixel) / idepth));
    camera.project(&x_t).filter(|p| camera.in_bounds(p, BORDER))
}

/// Quadratic intensity patch `c0 + c1 x + c2 y + c3 x² + c4 xy + c5 y²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture(pub [f64; 6]);

impl Texture {
    pub fn value(&self, o: &Vector2<f64>) -> f64 {
        let c = &self.0;
        c[0] + c[1] * o.x + c[2] * o.y + c[3] * o.x * o.x + c[4] * o.x * o.y + c[5] * o.y * o.y
    }

    pub fn gradient(&self, o: &Vector2<f64>) -> Vector2<f64> {
        let c = &self.0;
        Vector2::new(c[1] + 2.0 * c[3] * o.x + c[4] * o.y, c[2] + c[4] * o.x + 2.0 * c[5] * o.y)
    }
}

/// Photometric parameters of one keyframe image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exposure {
    /// Exposure time in seconds.
    pub time: f64,
    pub a: f64,
    pub b: f64,
}

impl Exposure {
    /// `t e^a`.
    pub fn gain(&self) -> f64 {
        self.time * self.a.exp()
    }
}

/// A point hosted by a keyframe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u32,
    pub host: u32,
    pub pixel: Vector2<f64>,
    /// Initial inverse depth (from the front-end's depth estimate).
    pub idepth: f64,
    pub texture: Texture,
    /// Observed host intensities at the pattern pixels.
    pub host_intensities: [f64; 8],
    /// Gradient weights `ω_p` at the pattern pixels.
    pub weights: [f64; 8],
}

impl Landmark {
    /// Host intensities and weights for a landmark whose host frame has
    /// `exposure`, with per-pixel `noise` added.
    pub fn observe_host(texture: &Texture, exposure: &Exposure, noise: &[f64; 8]) -> ([f64; 8], [f64; 8]) {
        let mut intensities = [0.0; 8];
        let mut weights = [0.0; 8];
        let c2 = GRADIENT_WEIGHT_CONSTANT * GRADIENT_WEIGHT_CONSTANT;
        for (k, o) in PATTERN.iter().enumerate() {
            let o = Vector2::new(o[0], o[1]);
            intensities[k] = exposure.gain() * texture.value(&o) + exposure.b + noise[k];
            let g = texture.gradient(&o) * exposure.gain();
            weights[k] = c2 / (c2 + g.norm_squared());
        }
        (intensities, weights)
    }
}

/// Intensity function of a target frame around one landmark.
///
/// `I(q) = t e^a R(π(H⁻¹ q̃) − p) + b + n_k`, where `H` maps host pixels on the
/// landmark plane to target pixels under the true geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetImage {
    pub target: u32,
    pub exposure: Exposure,
    pub host_pixel: Vector2<f64>,
    pub texture: Texture,
    /// Target-to-host pixel homography.
    pub h_inv: Matrix3<f64>,
    pub noise: [f64; 8],
}

impl TargetImage {
    /// Builds the lookup from true host and target poses and the true
    /// inverse depth of the landmark plane.
    pub fn from_geometry(
        target: u32,
        exposure: Exposure,
        host_pixel: Vector2<f64>,
        texture: Texture,
        true_idepth: f64,
        host_pose: &RigidTransform,
        target_pose: &RigidTransform,
        camera: &CameraModel,
        noise: [f64; 8],
    ) -> Option<Self> {
        let rel = *target_pose * host_pose.inverse();
        let n = Vector3::new(0.0, 0.0, 1.0);
        let k = camera.matrix();
        let k_inv = k.try_inverse()?;
        let h = k * (rel.rotation.matrix() + rel.translation * n.transpose() * true_idepth) * k_inv;
        Some(Self { target, exposure, host_pixel, texture, h_inv: h.try_inverse()?, noise })
    }

    /// Intensity and gradient at target pixel `q` for pattern index `k`.
    /// Intensity at target pixel `q` for pattern index `k`.
    pub fn value(&self, q: &Vector2<f64>, k: usize) -> f64 {
        let hq = self.h_inv * Vector3::new(q.x, q.y, 1.0);
        let o = Vector2::new(hq.x / hq.z, hq.y / hq.z) - self.host_pixel;
        self.exposure.gain() * self.texture.value(&o) + self.exposure.b + self.noise[k]
    }

    pub fn sample(&self, q: &Vector2<f64>, k: usize) -> (f64, Vector2<f64>) {
        let hq = self.h_inv * Vector3::new(q.x, q.y, 1.0);
        let host = Vector2::new(hq.x / hq.z, hq.y / hq.z);
        let o = host - self.host_pixel;
        let gain = self.exposure.gain();
        let value = gain * self.texture.value(&o) + self.exposure.b + self.noise[k];
        // d(host)/dq through the projective division
        let iz = 1.0 / hq.z;
        let mut dh = nalgebra::Matrix2::zeros();
        for c in 0..2 {
            dh[(0, c)] = (self.h_inv[(0, c)] - host.x * self.h_inv[(2, c)]) * iz;
            dh[(1, c)] = (self.h_inv[(1, c)] - host.y * self.h_inv[(2, c)]) * iz;
        }
        let grad = dh.transpose() * self.texture.gradient(&o) * gain;
        (value, grad)
    }
}

/// Residuals of one landmark observed in one target frame.
///
/// Keys: host pose, host affine `(a, b)`, target pose, target affine, inverse
/// depth. Pattern pixels projecting outside the target image contribute
/// nothing.
#[derive(Clone, Debug)]
pub struct PhotometricFactor {
    keys: [VariableKey; 5],
    landmark: Arc<Landmark>,
    image: Arc<TargetImage>,
    host_exposure_time: f64,
    camera: CameraModel,
    /// Multiplier on all weights (the dynamic photometric weight).
    pub weight_scale: f64,
}

impl PhotometricFactor {
    pub fn new(
        landmark: Arc<Landmark>,
        image: Arc<TargetImage>,
        host_exposure_time: f64,
        camera: CameraModel,
        weight_scale: f64,
    ) -> Self {
        let keys = [
            VariableKey::pose(landmark.host),
            VariableKey::affine(landmark.host),
            VariableKey::pose(image.target),
            VariableKey::affine(image.target),
            VariableKey::inverse_depth(landmark.id),
        ];
        Self { keys, landmark, image, host_exposure_time, camera, weight_scale }
    }

    pub fn landmark(&self) -> &Landmark {
        &self.landmark
    }

    pub fn target(&self) -> u32 {
        self.image.target
    }

    /// Whether the landmark center projects inside the target image.
    pub fn is_visible(&self, values: &GraphValues) -> Result<bool> {
        let host = values.pose(&self.keys[0])?;
        let target = values.pose(&self.keys[2])?;
        let idepth = values.vector(&self.keys[4])?[0];
        Ok(idepth > 0.0 && project(&self.landmark.pixel, idepth, host, target, &self.camera).visible)
    }
}

impl Factor for PhotometricFactor {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn residual_dim(&self) -> usize {
        PATTERN.len()
    }

    fn evaluate(&self, values: &GraphValues) -> Result<FactorEvaluation> {
        let host = values.pose(&self.keys[0])?;
        let aff_h = values.vector(&self.keys[1])?;
        let target = values.pose(&self.keys[2])?;
        let aff_t = values.vector(&self.keys[3])?;
        let idepth = values.vector(&self.keys[4])?[0];
        let n = PATTERN.len();

        let mut residual = DVector::zeros(n);
        let mut j_host = DMatrix::zeros(n, 6);
        let mut j_aff_h = DMatrix::zeros(n, 2);
        let mut j_target = DMatrix::zeros(n, 6);
        let mut j_aff_t = DMatrix::zeros(n, 2);
        let mut j_idepth = DMatrix::zeros(n, 1);
        let mut weights = DVector::zeros(n);

        let ratio = (self.image.exposure.time / self.host_exposure_time) * (aff_t[0] - aff_h[0]).exp();
        let rel = *target * host.inverse();
        for (k, o) in PATTERN.iter().enumerate() {
            if idepth <= 0.0 {
                break;
            }
            let p = self.landmark.pixel + Vector2::new(o[0], o[1]);
            let proj = project_relative(&p, idepth, &rel, &self.camera);
            if !proj.visible {
                continue;
            }
            let (value, grad) = self.image.sample(&proj.pixel, k);
            let host_term = self.landmark.host_intensities[k] - aff_h[1];
            residual[k] = (value - aff_t[1]) - ratio * host_term;
            weights[k] = self.landmark.weights[k] * self.weight_scale;
            let g = grad.transpose();
            j_host.row_mut(k).copy_from(&(g * proj.d_host));
            j_target.row_mut(k).copy_from(&(g * proj.d_target));
            j_idepth[(k, 0)] = grad.dot(&proj.d_idepth);
            j_aff_h[(k, 0)] = ratio * host_term;
            j_aff_h[(k, 1)] = ratio;
            j_aff_t[(k, 0)] = -ratio * host_term;
            j_aff_t[(k, 1)] = -1.0;
        }
        Ok(FactorEvaluation {
            residual,
            jacobians: vec![j_host, j_aff_h, j_target, j_aff_t, j_idepth],
            weight: Weight::Diagonal(weights),
            loss: Loss::Huber(HUBER_THRESHOLD),
        })
    }

    fn energy(&self, values: &GraphValues) -> Result<f64> {
        Ok(self.energy_and_count(values)?.0)
    }
}

impl PhotometricFactor {
    /// Weighted robust energy and number of visible pattern pixels, without
    /// Jacobians.
    pub fn energy_and_count(&self, values: &GraphValues) -> Result<(f64, usize)> {
        let host = values.pose(&self.keys[0])?;
        let aff_h = values.vector(&self.keys[1])?;
        let target = values.pose(&self.keys[2])?;
        let aff_t = values.vector(&self.keys[3])?;
        let idepth = values.vector(&self.keys[4])?[0];
        if idepth <= 0.0 {
            return Ok((0.0, 0));
        }
        let ratio = (self.image.exposure.time / self.host_exposure_time) * (aff_t[0] - aff_h[0]).exp();
        let rel = *target * host.inverse();
        let loss = Loss::Huber(HUBER_THRESHOLD);
        let (mut energy, mut count) = (0.0, 0);
        for (k, o) in PATTERN.iter().enumerate() {
            let p = self.landmark.pixel + Vector2::new(o[0], o[1]);
            let Some(q) = warp_pixel(&p, idepth, &rel, &self.camera) else { continue };
            let value = self.image.value(&q, k);
            let r = (value - aff_t[1]) - ratio * (self.landmark.host_intensities[k] - aff_h[1]);
            let w = self.landmark.weights[k] * self.weight_scale;
            if w > 0.0 {
                count += 1;
            }
            energy += w * loss.rho(r);
        }
        Ok((energy, count))
    }
}

/// Total energy and residual count of a set of photometric factors.
pub fn photometric_energy(factors: &[PhotometricFactor], values: &GraphValues) -> Result<(f64, usize)> {
    let mut energy = 0.0;
    let mut count = 0;
    for f in factors {
        let (e, n) = f.energy_and_count(values)?;
        energy += e;
        count += n;
    }
    Ok((energy, count))
}

/// `W(e) = λ (θ/e)²` for `e ≥ θ`, else `λ`.
pub fn dynamic_weight(e_photo: f64, lambda: f64, theta: f64) -> f64 {
    if e_photo >= theta {
        lambda * (theta / e_photo).powi(2)
    } else {
        lambda
    }
}

/// Per-keyframe statistics used to choose which keyframe to marginalize.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowFrame {
    pub id: u32,
    /// Camera center.
    pub position: Vector3<f64>,
    /// Active points hosted by this frame.
    pub hosted_points: usize,
    /// How many of them are visible in the newest keyframe.
    pub visible_in_newest: usize,
}

/// Minimum fraction of a frame's points visible in the newest keyframe.
pub const MIN_VISIBLE_FRACTION: f64 = 0.05;

/// Chooses the keyframe to marginalize from a window ordered oldest first.
///
/// Nothing is marginalized while the window holds at most `max_frames − 1`
/// frames. The two newest frames are always kept. A frame with fewer than 5%
/// of its points visible in the newest frame is chosen first (oldest such
/// frame); otherwise the frame maximizing
/// `√d(i, newest) · Σ_{j ≠ i, newest} 1 / (1e-5 + d(i, j))` is chosen.
pub fn select_marginalization_victim(window: &[WindowFrame], max_frames: usize) -> Option<u32> {
    if window.len() + 1 <= max_frames || window.len() < 3 {
        return None;
    }
    let candidates = &window[..window.len() - 2];
    let newest = window.last()?;
    if let Some(f) = candidates
        .iter()
        .find(|f| f.hosted_points > 0 && (f.visible_in_newest as f64) < MIN_VISIBLE_FRACTION * f.hosted_points as f64)
    {
        return Some(f.id);
    }
    let dist = |a: &WindowFrame, b: &WindowFrame| (a.position - b.position).norm();
    let mut best: Option<(f64, u32)> = None;
    for f in candidates {
        let sum: f64 = window
            .iter()
            .filter(|o| o.id != f.id && o.id != newest.id)
            .map(|o| 1.0 / (1e-5 + dist(f, o)))
            .sum();
        let score = dist(f, newest).sqrt() * sum;
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, f.id));
        }
    }
    best.map(|(_, id)| id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::numeric_jacobians;
    use crate::lie::{Rotation3, StateBlock};
    use proptest::prelude::*;

    fn camera() -> CameraModel {
        CameraModel::default()
    }

    #[test]
    fn identity_warp_keeps_pixel() {
        let p = Vector2::new(100.0, 200.0);
        let pose = RigidTransform::new(Rotation3::exp(&Vector3::new(0.1, 0.2, 0.3)), Vector3::new(1.0, 2.0, 3.0));
        let proj = project(&p, 0.5, &pose, &pose, &camera());
        assert!((proj.pixel - p).norm() < 1e-9);
        assert!(proj.visible);
    }

    #[test]
    fn halving_depth_doubles_center_offset() {
        let cam = camera();
        let p = Vector2::new(cam.cx + 40.0, cam.cy - 10.0);
        // depth 4 in the host; target moved 2 m forward
        let host = RigidTransform::identity();
        let target = RigidTransform::from_translation(Vector3::new(0.0, 0.0, -2.0));
        let proj = project(&p, 0.25, &host, &target, &cam);
        let off = proj.pixel - Vector2::new(cam.cx, cam.cy);
        assert!((off - Vector2::new(80.0, -20.0)).norm() < 1e-9);
    }

    #[test]
    fn behind_camera_is_invisible() {
        let host = RigidTransform::identity();
        let target = RigidTransform::new(Rotation3::exp(&Vector3::new(0.0, std::f64::consts::PI, 0.0)), Vector3::zeros());
        assert!(!project(&Vector2::new(300.0, 200.0), 1.0, &host, &target, &camera()).visible);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn projection_matches_homogeneous_oracle(
            w in proptest::collection::vec(-0.3f64..0.3, 6),
            t in proptest::collection::vec(-0.5f64..0.5, 6),
            u in 50.0f64..700.0, v in 50.0f64..430.0, d in 0.1f64..2.0,
        ) {
            let cam = camera();
            let host = RigidTransform::new(Rotation3::exp(&Vector3::new(w[0], w[1], w[2])), Vector3::new(t[0], t[1], t[2]));
            let target = RigidTransform::new(Rotation3::exp(&Vector3::new(w[3], w[4], w[5])), Vector3::new(t[3], t[4], t[5]));
            let proj = project(&Vector2::new(u, v), d, &host, &target, &cam);
            // oracle: 4x4 homogeneous matrices, K applied last
            let x_h = nalgebra::Vector4::new((u - cam.cx) / cam.fx / d, (v - cam.cy) / cam.fy / d, 1.0 / d, 1.0);
            let x_t = target.matrix() * host.matrix().try_inverse().unwrap() * x_h;
            let q = cam.matrix() * Vector3::new(x_t.x, x_t.y, x_t.z);
            if x_t.z > 1e-6 {
                prop_assert!((proj.pixel - Vector2::new(q.x / q.z, q.y / q.z)).norm() < 1e-9 * (1.0 + q.norm()));
            }
        }
    }

    struct Scene {
        values: GraphValues,
        factor: PhotometricFactor,
    }

    fn scene(noise: f64, perturb: bool) -> Scene {
        let cam = camera();
        let host_pose = RigidTransform::new(Rotation3::exp(&Vector3::new(0.02, -0.05, 0.01)), Vector3::new(0.1, 0.0, 0.2));
        let target_pose = RigidTransform::new(Rotation3::exp(&Vector3::new(-0.03, 0.04, 0.02)), Vector3::new(-0.3, 0.1, 0.1));
        let texture = Texture([120.0, 15.0, -10.0, 0.4, -0.3, 0.2]);
        let host_exp = Exposure { time: 0.01, a: 0.1, b: 5.0 };
        let target_exp = Exposure { time: 0.015, a: -0.05, b: -3.0 };
        let idepth = 0.4;
        let pixel = Vector2::new(320.0, 250.0);
        let (host_intensities, weights) = Landmark::observe_host(&texture, &host_exp, &[noise; 8]);
        let lm = Arc::new(Landmark { id: 0, host: 0, pixel, idepth, texture, host_intensities, weights });
        let image = Arc::new(
            TargetImage::from_geometry(1, target_exp, pixel, texture, idepth, &host_pose, &target_pose, &cam, [-noise; 8]).unwrap(),
        );
        let factor = PhotometricFactor::new(lm, image, host_exp.time, cam, 1.0);
        let mut values = GraphValues::new();
        let bump = if perturb { 1.0 } else { 0.0 };
        values.insert(VariableKey::pose(0), StateBlock::Pose(host_pose.boxplus(&(nalgebra::Vector6::new(0.01, 0.0, -0.01, 0.02, 0.01, 0.0) * bump))));
        values.insert(VariableKey::affine(0), StateBlock::vector(&[host_exp.a + 0.05 * bump, host_exp.b]));
        values.insert(VariableKey::pose(1), StateBlock::Pose(target_pose.boxplus(&(nalgebra::Vector6::new(0.0, 0.01, 0.01, -0.01, 0.02, 0.01) * bump))));
        values.insert(VariableKey::affine(1), StateBlock::vector(&[target_exp.a, target_exp.b + 2.0 * bump]));
        values.insert(VariableKey::inverse_depth(0), StateBlock::vector(&[idepth * (1.0 + 0.1 * bump)]));
        Scene { values, factor }
    }

    #[test]
    fn true_brightness_transfer_gives_zero_energy() {
        let s = scene(0.0, false);
        let e = s.factor.evaluate(&s.values).unwrap();
        assert!(e.residual.amax() < 1e-9, "{}", e.residual);
        assert!(e.energy() < 1e-16);
    }

    #[test]
    fn single_pixel_energy_example() {
        let eval = FactorEvaluation {
            residual: DVector::from_element(1, 10.0 - 8.0),
            jacobians: vec![],
            weight: Weight::Diagonal(DVector::from_element(1, 1.0)),
            loss: Loss::Huber(HUBER_THRESHOLD),
        };
        assert_eq!(eval.energy(), 4.0);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let s = scene(0.0, true);
        let analytic = s.factor.evaluate(&s.values).unwrap().jacobians;
        let numeric = numeric_jacobians(&s.factor, &s.values, 1e-6).unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).norm() <= 1e-4 * a.norm().max(1.0), "{a} vs {n}");
        }
    }

    /// Straightforward re-implementation: explicit 4×4 matrices and direct
    /// homography evaluation of the target intensity.
    fn reference_energy(s: &Scene) -> f64 {
        let cam = camera();
        let lm = s.factor.landmark();
        let img = &s.factor.image;
        let host = s.values.pose(&VariableKey::pose(0)).unwrap().matrix();
        let target = s.values.pose(&VariableKey::pose(1)).unwrap().matrix();
        let ah = s.values.vector(&VariableKey::affine(0)).unwrap();
        let at = s.values.vector(&VariableKey::affine(1)).unwrap();
        let d = s.values.vector(&VariableKey::inverse_depth(0)).unwrap()[0];
        let mut e = 0.0;
        for k in 0..8 {
            let u = lm.pixel.x + PATTERN[k][0];
            let v = lm.pixel.y + PATTERN[k][1];
            let xh = nalgebra::Vector4::new((u - cam.cx) / cam.fx / d, (v - cam.cy) / cam.fy / d, 1.0 / d, 1.0);
            let xt = target * host.try_inverse().unwrap() * xh;
            let q = Vector3::new(cam.fx * xt.x / xt.z + cam.cx, cam.fy * xt.y / xt.z + cam.cy, 1.0);
            let back = img.h_inv * q;
            let o = Vector2::new(back.x / back.z - lm.pixel.x, back.y / back.z - lm.pixel.y);
            let c = img.texture.0;
            let tex = c[0] + c[1] * o.x + c[2] * o.y + c[3] * o.x * o.x + c[4] * o.x * o.y + c[5] * o.y * o.y;
            let it = img.exposure.time * img.exposure.a.exp() * tex + img.exposure.b + img.noise[k];
            let r = (it - at[1]) - (img.exposure.time * at[0].exp()) / (0.01 * ah[0].exp()) * (lm.host_intensities[k] - ah[1]);
            let hub = if r.abs() <= 9.0 { r * r } else { 18.0 * r.abs() - 81.0 };
            e += lm.weights[k] * hub;
        }
        e
    }

    #[test]
    fn energy_matches_reference_implementation() {
        for (noise, perturb) in [(0.0, true), (3.0, false), (7.0, true)] {
            let s = scene(noise, perturb);
            let (e, n) = photometric_energy(std::slice::from_ref(&s.factor), &s.values).unwrap();
            let r = reference_energy(&s);
            assert_eq!(n, 8);
            assert!((e - r).abs() <= 1e-10 * r.abs().max(1e-12), "{e} vs {r}");
            let full = s.factor.evaluate(&s.values).unwrap().energy();
            assert!((full - r).abs() <= 1e-10 * r.abs().max(1e-12), "{full} vs {r}");
        }
    }

    #[test]
    fn dynamic_weight_examples() {
        assert_eq!(dynamic_weight(8.0, 1.0, 8.0), 1.0);
        assert_eq!(dynamic_weight(16.0, 1.0, 8.0), 0.25);
        assert_eq!(dynamic_weight(0.0, 1.0, 8.0), 1.0);
        assert!((dynamic_weight(8.0 + 1e-13, 1.0, 8.0) - 1.0).abs() < 1e-12);
    }

    fn frame(id: u32, x: f64, hosted: usize, visible: usize) -> WindowFrame {
        WindowFrame { id, position: Vector3::new(x, 0.0, 0.0), hosted_points: hosted, visible_in_newest: visible }
    }

    #[test]
    fn under_capacity_selects_nothing() {
        let w: Vec<_> = (0..7).map(|i| frame(i, i as f64, 20, 20)).collect();
        assert_eq!(select_marginalization_victim(&w, 8), None);
    }

    #[test]
    fn poorly_visible_frame_is_selected() {
        let mut w: Vec<_> = (0..8).map(|i| frame(i, i as f64 * 0.1, 20, 20)).collect();
        w[3].visible_in_newest = 0;
        assert_eq!(select_marginalization_victim(&w, 8), Some(3));
    }

    #[test]
    fn distance_score_selects_maximizer() {
        let xs = [0.0, 0.1, 0.15, 0.9, 1.0, 1.4, 1.5, 2.0];
        let w: Vec<_> = xs.iter().enumerate().map(|(i, x)| frame(i as u32, *x, 20, 20)).collect();
        let newest = w.last().unwrap();
        let mut best = (f64::MIN, 0);
        for f in &w[..6] {
            let s: f64 = w
                .iter()
                .filter(|o| o.id != f.id && o.id != newest.id)
                .map(|o| 1.0 / (1e-5 + (o.position - f.position).norm()))
                .sum::<f64>()
                * (newest.position - f.position).norm().sqrt();
            if s > best.0 {
                best = (s, f.id);
            }
        }
        assert_eq!(select_marginalization_victim(&w, 8), Some(best.1));
        assert_ne!(select_marginalization_victim(&w, 8), Some(7));
    }
}
