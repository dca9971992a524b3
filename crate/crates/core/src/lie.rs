//! Lie groups used by the estimator and the boxplus/boxminus calculus over
//! state blocks.
//!
//! Conventions, used everywhere in the crate:
//!
//! * Rotations and rigid transforms are perturbed on the **left**:
//!   `x ⊞ δ = Exp(δ) · x` and `a ⊟ b = Log(a · b⁻¹)`.
//! * Pose tangents are ordered rotation first, then translation:
//!   `ξ = (ω, ν)`.
//! * Vector blocks use ordinary addition and subtraction.
//! * The scale block lives on the positive reals with a logarithmic
//!   tangent, so `s ⊞ δ = s · e^δ` and any step keeps `s > 0`.
//! * The gravity rotation carries three chart coordinates about a fixed base
//!   rotation and exposes only the first two as tangent directions; the third
//!   (yaw about the gravity axis) can never be changed by an update.

use nalgebra::{DVector, Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::Mul;

use crate::error::{Error, Result};

/// Tangent-space vector of a state block (or of a stack of blocks).
pub type TangentVector = DVector<f64>;

const SMALL_ANGLE: f64 = 1e-8;

/// Cross-product matrix `[v]×`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of SO(3): `Exp(ω + δ) ≈ Exp(ω) Exp(J_r(ω) δ)`.
pub fn right_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let (a, b) = jacobian_coefficients(theta2);
    let w = skew(omega);
    Matrix3::identity() - a * w + b * w * w
}

/// Left Jacobian of SO(3): `Exp(ω + δ) ≈ Exp(J_l(ω) δ) Exp(ω)`.
pub fn left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    right_jacobian(&-omega)
}

pub fn right_jacobian_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    let c = if theta2 < 1e-10 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + 0.5 * w + c * w * w
}

pub fn left_jacobian_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    right_jacobian_inverse(&-omega)
}

/// `((1 - cos θ)/θ², (θ - sin θ)/θ³)` with series expansions near zero.
fn jacobian_coefficients(theta2: f64) -> (f64, f64) {
    if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    }
}

/// Element of SO(3), stored as a unit quaternion.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation3(UnitQuaternion<f64>);

impl fmt::Debug for Rotation3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.log();
        write!(f, "Rotation3(log = [{:.6}, {:.6}, {:.6}])", w.x, w.y, w.z)
    }
}

impl Default for Rotation3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation3 {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self(q)
    }

    /// Projects an (approximately) orthonormal matrix onto SO(3).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        Self(UnitQuaternion::new_normalize(*q.quaternion()))
    }

    /// `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self(UnitQuaternion::from_euler_angles(roll, pitch, yaw))
    }

    /// Smallest rotation taking direction `from` onto direction `to`.
    pub fn between(from: &Vector3<f64>, to: &Vector3<f64>) -> Self {
        match UnitQuaternion::rotation_between(from, to) {
            Some(q) => Self(q),
            // antiparallel: rotate by π about any axis orthogonal to `from`
            None => {
                let axis = from.cross(&Vector3::x());
                let axis = if axis.norm() < 1e-6 { from.cross(&Vector3::y()) } else { axis };
                Self::exp(&(axis.normalize() * std::f64::consts::PI))
            }
        }
    }

    /// Exponential map from an axis-angle vector.
    pub fn exp(omega: &Vector3<f64>) -> Self {
        let theta2 = omega.norm_squared();
        let q = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
            let imag = omega * (0.5 - theta2 / 48.0);
            Quaternion::new(1.0 - theta2 / 8.0, imag.x, imag.y, imag.z)
        } else {
            let theta = theta2.sqrt();
            let half = 0.5 * theta;
            let imag = omega * (half.sin() / theta);
            Quaternion::new(half.cos(), imag.x, imag.y, imag.z)
        };
        Self(UnitQuaternion::new_normalize(q))
    }

    /// Logarithm map; the result has norm in `[0, π]`.
    pub fn log(&self) -> Vector3<f64> {
        let q = self.0.quaternion();
        let (w, v) = if q.w < 0.0 {
            (-q.w, -q.imag())
        } else {
            (q.w, q.imag())
        };
        let n = v.norm();
        if n < 1e-12 {
            v * (2.0 / w)
        } else {
            let theta = 2.0 * n.atan2(w);
            v * (theta / n)
        }
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        *self.0.to_rotation_matrix().matrix()
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    /// Left perturbation `Exp(δ) · R`, renormalized.
    pub fn boxplus(&self, delta: &Vector3<f64>) -> Self {
        let mut q = Self::exp(delta).0 * self.0;
        q.renormalize();
        Self(q)
    }

    /// `Log(self · other⁻¹)`.
    pub fn boxminus(&self, other: &Rotation3) -> Vector3<f64> {
        if self == other {
            return Vector3::zeros();
        }
        (*self * other.inverse()).log()
    }

    pub fn angle_to(&self, other: &Rotation3) -> f64 {
        self.boxminus(other).norm()
    }
}

impl Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        Rotation3(self.0 * rhs.0)
    }
}

/// Element of SE(3): `x ↦ R x + t`.
#[derive(Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Rotation3,
    pub translation: Vector3<f64>,
}

impl fmt::Debug for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.translation;
        write!(f, "RigidTransform({:?}, t = [{:.6}, {:.6}, {:.6}])", self.rotation, t.x, t.y, t.z)
    }
}

impl RigidTransform {
    pub fn new(rotation: Rotation3, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Rotation3::identity(), translation)
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self::new(r_inv, -r_inv.rotate(&self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// SE(3) exponential of `ξ = (ω, ν)`.
    pub fn exp(xi: &Vector6<f64>) -> Self {
        let omega = xi.fixed_rows::<3>(0).into_owned();
        let nu = xi.fixed_rows::<3>(3).into_owned();
        Self::new(Rotation3::exp(&omega), left_jacobian(&omega) * nu)
    }

    /// SE(3) logarithm, returned as `(ω, ν)`.
    pub fn log(&self) -> Vector6<f64> {
        let omega = self.rotation.log();
        let nu = left_jacobian_inverse(&omega) * self.translation;
        let mut xi = Vector6::zeros();
        xi.fixed_rows_mut::<3>(0).copy_from(&omega);
        xi.fixed_rows_mut::<3>(3).copy_from(&nu);
        xi
    }

    pub fn boxplus(&self, xi: &Vector6<f64>) -> Self {
        let mut out = Self::exp(xi) * *self;
        out.rotation = Rotation3(UnitQuaternion::new_normalize(*out.rotation.0.quaternion()));
        out
    }

    pub fn boxminus(&self, other: &RigidTransform) -> Vector6<f64> {
        if self == other {
            return Vector6::zeros();
        }
        (*self * other.inverse()).log()
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * rhs.rotation,
            self.rotation.rotate(&rhs.translation) + self.translation,
        )
    }
}

/// Element of Sim(3), acting as `x ↦ s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub rotation: Rotation3,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl SimilarityTransform {
    pub fn new(rotation: Rotation3, translation: Vector3<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Structural(format!("similarity scale must be positive, got {scale}")));
        }
        Ok(Self { rotation, translation, scale })
    }

    /// Pure scaling: identity rotation and zero translation.
    pub fn from_scale(scale: f64) -> Result<Self> {
        Self::new(Rotation3::identity(), Vector3::zeros(), scale)
    }

    pub fn from_rigid(t: &RigidTransform) -> Self {
        Self { rotation: t.rotation, translation: t.translation, scale: 1.0 }
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self {
            rotation: r_inv,
            translation: -r_inv.rotate(&self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) * self.scale + self.translation
    }

    /// Drops the scale; meaningful when the scale is (numerically) one.
    pub fn to_rigid(&self) -> RigidTransform {
        RigidTransform::new(self.rotation, self.translation)
    }
}

impl Mul for SimilarityTransform {
    type Output = SimilarityTransform;
    fn mul(self, rhs: SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation.rotate(&rhs.translation) * self.scale + self.translation,
            scale: self.scale * rhs.scale,
        }
    }
}

/// Rotation `R_V_I` between the gravity-aligned inertial frame and the visual
/// frame, parameterized as `base · Exp(coords)`.
///
/// Only `coords[0]` and `coords[1]` are tangent directions. `coords[2]` is the
/// unobservable yaw coordinate and keeps its initial value bit for bit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GravityRotation {
    pub base: Rotation3,
    pub coords: Vector3<f64>,
}

impl GravityRotation {
    pub fn new(base: Rotation3) -> Self {
        Self { base, coords: Vector3::zeros() }
    }

    pub fn rotation(&self) -> Rotation3 {
        self.base * Rotation3::exp(&self.coords)
    }

    /// The fixed yaw coordinate.
    pub fn yaw_coordinate(&self) -> f64 {
        self.coords.z
    }

    pub fn boxplus(&self, delta: &[f64]) -> Self {
        let mut out = *self;
        out.coords.x += delta[0];
        out.coords.y += delta[1];
        out
    }

    pub fn boxminus(&self, other: &GravityRotation) -> [f64; 2] {
        let mine = if self.base == other.base {
            self.coords
        } else {
            (other.base.inverse() * self.rotation()).log()
        };
        [mine.x - other.coords.x, mine.y - other.coords.y]
    }

    /// Derivative of the rotation with respect to the two tangent directions,
    /// as a right perturbation: `R(δ) ≈ R · Exp(J δ)`.
    pub fn right_tangent_jacobian(&self) -> nalgebra::Matrix3x2<f64> {
        right_jacobian(&self.coords).fixed_columns::<2>(0).into_owned()
    }
}

/// A single variable's value: one block of the optimized state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum StateBlock {
    Pose(RigidTransform),
    Rotation(Rotation3),
    Vector(DVector<f64>),
    /// Positive scalar with logarithmic tangent.
    Scale(f64),
    Gravity(GravityRotation),
}

impl StateBlock {
    pub fn vector(values: &[f64]) -> Self {
        StateBlock::Vector(DVector::from_column_slice(values))
    }

    pub fn tangent_dim(&self) -> usize {
        match self {
            StateBlock::Pose(_) => 6,
            StateBlock::Rotation(_) => 3,
            StateBlock::Vector(v) => v.len(),
            StateBlock::Scale(_) => 1,
            StateBlock::Gravity(_) => 2,
        }
    }

    pub fn boxplus(&self, delta: &[f64]) -> Result<StateBlock> {
        if delta.len() != self.tangent_dim() {
            return Err(Error::Structural(format!(
                "tangent of length {} applied to block of dimension {}",
                delta.len(),
                self.tangent_dim()
            )));
        }
        Ok(match self {
            StateBlock::Pose(t) => StateBlock::Pose(t.boxplus(&Vector6::from_column_slice(delta))),
            StateBlock::Rotation(r) => StateBlock::Rotation(r.boxplus(&Vector3::from_column_slice(delta))),
            StateBlock::Vector(v) => StateBlock::Vector(v + DVector::from_column_slice(delta)),
            StateBlock::Scale(s) => StateBlock::Scale(s * delta[0].exp()),
            StateBlock::Gravity(g) => StateBlock::Gravity(g.boxplus(delta)),
        })
    }

    /// `self ⊟ other`: log of the relative element for group blocks, plain
    /// subtraction for vectors.
    pub fn boxminus(&self, other: &StateBlock) -> Result<TangentVector> {
        Ok(match (self, other) {
            (StateBlock::Pose(a), StateBlock::Pose(b)) => DVector::from_column_slice(a.boxminus(b).as_slice()),
            (StateBlock::Rotation(a), StateBlock::Rotation(b)) => {
                DVector::from_column_slice(a.boxminus(b).as_slice())
            }
            (StateBlock::Vector(a), StateBlock::Vector(b)) if a.len() == b.len() => a - b,
            (StateBlock::Scale(a), StateBlock::Scale(b)) => DVector::from_element(1, (a / b).ln()),
            (StateBlock::Gravity(a), StateBlock::Gravity(b)) => DVector::from_column_slice(&a.boxminus(b)),
            _ => {
                return Err(Error::Structural(format!(
                    "boxminus between mismatched blocks {} and {}",
                    self.kind_name(),
                    other.kind_name()
                )))
            }
        })
    }

    fn kind_name(&self) -> String {
        match self {
            StateBlock::Pose(_) => "pose".into(),
            StateBlock::Rotation(_) => "rotation".into(),
            StateBlock::Vector(v) => format!("vector[{}]", v.len()),
            StateBlock::Scale(_) => "scale".into(),
            StateBlock::Gravity(_) => "gravity".into(),
        }
    }

    pub fn as_pose(&self) -> Option<&RigidTransform> {
        match self {
            StateBlock::Pose(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_vector(&self) -> Option<&DVector<f64>> {
        match self {
            StateBlock::Vector(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_scale(&self) -> Option<f64> {
        match self {
            StateBlock::Scale(s) => Some(*s),
            _ => None,
        }
    }

    pub fn as_gravity(&self) -> Option<&GravityRotation> {
        match self {
            StateBlock::Gravity(g) => Some(g),
            _ => None,
        }
    }
}

/// `a ⊟ b` over stacked blocks with identical layout.
pub fn boxminus(a: &[StateBlock], b: &[StateBlock]) -> Result<TangentVector> {
    if a.len() != b.len() {
        return Err(Error::Structural(format!("state layouts differ: {} vs {} blocks", a.len(), b.len())));
    }
    let parts = a.iter().zip(b).map(|(x, y)| x.boxminus(y)).collect::<Result<Vec<_>>>()?;
    let total = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(total);
    let mut offset = 0;
    for p in parts {
        out.rows_mut(offset, p.len()).copy_from(&p);
        offset += p.len();
    }
    Ok(out)
}

/// `x ⊞ δ` over stacked blocks.
pub fn boxplus(x: &[StateBlock], delta: &TangentVector) -> Result<Vec<StateBlock>> {
    let total: usize = x.iter().map(StateBlock::tangent_dim).sum();
    if total != delta.len() {
        return Err(Error::Structural(format!("tangent length {} does not match layout {}", delta.len(), total)));
    }
    let mut offset = 0;
    x.iter()
        .map(|blk| {
            let d = blk.tangent_dim();
            let out = blk.boxplus(&delta.as_slice()[offset..offset + d]);
            offset += d;
            out
        })
        .collect()
}
