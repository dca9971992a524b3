//! Nonlinear least-squares factor graph: variables, factors, Gauss-Newton
//! linearization, Levenberg-Marquardt and marginal covariances.
//!
//! The objective minimized by [`solve_lm`] is
//!
//! ```text
//! F(x) = ½ Σ_f E_f(x) + Σ_q (½ δ_qᵀ Ĥ_q δ_q − b̂_qᵀ δ_q),   δ_q = x ⊟ x_q
//! ```
//!
//! where `E_f` is a factor's energy (`rᵀWr`, or a robust sum) and `q` runs
//! over the marginalization priors held by the graph. The linear system of a
//! graph is the Gauss-Newton model of `F`: `H = Σ JᵀWJ + Σ Ĥ` and
//! `b = −Σ JᵀWr + Σ (b̂ − Ĥδ)`, so a step solves `H Δ = b`.

mod factor;
mod lm;

pub use factor::{numeric_jacobians, Factor, FactorEvaluation, Loss, PriorFactor, Weight};
pub use lm::{solve_lm, LmConfig, LmReport, LmSolution};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lie::{GravityRotation, RigidTransform, StateBlock, TangentVector};
use crate::marginalization::MarginalizationPrior;

/// Kind tag of a variable. The declaration order is the order of blocks in a
/// linear system; inverse depths come last so they can be eliminated cheaply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariableKind {
    Scale,
    GravityRotation,
    Pose,
    Affine,
    Velocity,
    Bias,
    InverseDepth,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariableKey {
    pub kind: VariableKind,
    pub index: u32,
}

impl VariableKey {
    pub const fn new(kind: VariableKind, index: u32) -> Self {
        Self { kind, index }
    }
    pub const fn pose(frame: u32) -> Self {
        Self::new(VariableKind::Pose, frame)
    }
    pub const fn affine(frame: u32) -> Self {
        Self::new(VariableKind::Affine, frame)
    }
    pub const fn velocity(frame: u32) -> Self {
        Self::new(VariableKind::Velocity, frame)
    }
    pub const fn bias(frame: u32) -> Self {
        Self::new(VariableKind::Bias, frame)
    }
    pub const fn inverse_depth(point: u32) -> Self {
        Self::new(VariableKind::InverseDepth, point)
    }
    pub const fn scale() -> Self {
        Self::new(VariableKind::Scale, 0)
    }
    pub const fn gravity() -> Self {
        Self::new(VariableKind::GravityRotation, 0)
    }

    /// Whether this key belongs to the state of keyframe `frame`.
    pub fn is_frame_state(&self, frame: u32) -> bool {
        self.index == frame
            && matches!(
                self.kind,
                VariableKind::Pose | VariableKind::Affine | VariableKind::Velocity | VariableKind::Bias
            )
    }
}

impl fmt::Debug for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.kind {
            VariableKind::Scale => return write!(f, "scale"),
            VariableKind::GravityRotation => return write!(f, "gravity"),
            VariableKind::Pose => "pose",
            VariableKind::Affine => "affine",
            VariableKind::Velocity => "velocity",
            VariableKind::Bias => "bias",
            VariableKind::InverseDepth => "idepth",
        };
        write!(f, "{name}({})", self.index)
    }
}

/// Map from variable key to the current value of its block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<(VariableKey, StateBlock)>", into = "Vec<(VariableKey, StateBlock)>")]
pub struct GraphValues(BTreeMap<VariableKey, StateBlock>);

impl From<Vec<(VariableKey, StateBlock)>> for GraphValues {
    fn from(entries: Vec<(VariableKey, StateBlock)>) -> Self {
        Self(entries.into_iter().collect())
    }
}

impl From<GraphValues> for Vec<(VariableKey, StateBlock)> {
    fn from(values: GraphValues) -> Self {
        values.0.into_iter().collect()
    }
}

impl GraphValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: VariableKey, value: StateBlock) -> Option<StateBlock> {
        self.0.insert(key, value)
    }

    pub fn remove(&mut self, key: &VariableKey) -> Option<StateBlock> {
        self.0.remove(key)
    }

    pub fn get(&self, key: &VariableKey) -> Result<&StateBlock> {
        self.0.get(key).ok_or(Error::MissingKey(*key))
    }

    pub fn try_get(&self, key: &VariableKey) -> Option<&StateBlock> {
        self.0.get(key)
    }

    pub fn contains(&self, key: &VariableKey) -> bool {
        self.0.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &VariableKey> {
        self.0.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VariableKey, &StateBlock)> {
        self.0.iter()
    }

    pub fn retain(&mut self, keep: impl FnMut(&VariableKey, &mut StateBlock) -> bool) {
        self.0.retain(keep)
    }

    pub fn pose(&self, key: &VariableKey) -> Result<&RigidTransform> {
        self.get(key)?.as_pose().ok_or_else(|| Error::Structural(format!("{key} is not a pose")))
    }

    pub fn vector(&self, key: &VariableKey) -> Result<&DVector<f64>> {
        self.get(key)?.as_vector().ok_or_else(|| Error::Structural(format!("{key} is not a vector")))
    }

    pub fn scale(&self, key: &VariableKey) -> Result<f64> {
        self.get(key)?.as_scale().ok_or_else(|| Error::Structural(format!("{key} is not a scale")))
    }

    pub fn gravity(&self, key: &VariableKey) -> Result<&GravityRotation> {
        self.get(key)?.as_gravity().ok_or_else(|| Error::Structural(format!("{key} is not a gravity rotation")))
    }

    /// Copies the given keys into a new map.
    pub fn subset<'a>(&self, keys: impl IntoIterator<Item = &'a VariableKey>) -> Result<GraphValues> {
        let mut out = GraphValues::new();
        for k in keys {
            out.insert(*k, self.get(k)?.clone());
        }
        Ok(out)
    }

    /// Overwrites entries with those of `other`.
    pub fn extend_from(&mut self, other: &GraphValues) {
        for (k, v) in other.iter() {
            self.0.insert(*k, v.clone());
        }
    }

    /// Applies a tangent step laid out as in `system`.
    pub fn retract(&self, system: &LinearSystem, delta: &DVector<f64>) -> Result<GraphValues> {
        let mut out = self.clone();
        for (i, key) in system.keys.iter().enumerate() {
            let d = &delta.as_slice()[system.offsets[i]..system.offsets[i] + system.dims[i]];
            let updated = self.get(key)?.boxplus(d)?;
            out.insert(*key, updated);
        }
        Ok(out)
    }

    /// `self ⊟ other` over `keys`, stacked in order.
    pub fn boxminus(&self, other: &GraphValues, keys: &[VariableKey]) -> Result<TangentVector> {
        let mut parts = Vec::with_capacity(keys.len());
        for k in keys {
            parts.push(self.get(k)?.boxminus(other.get(k)?)?);
        }
        let total = parts.iter().map(|p| p.len()).sum();
        let mut out = DVector::zeros(total);
        let mut offset = 0;
        for p in parts {
            out.rows_mut(offset, p.len()).copy_from(&p);
            offset += p.len();
        }
        Ok(out)
    }
}

/// Dense Gauss-Newton system `H Δ = b` over an ordered list of keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    pub keys: Vec<VariableKey>,
    pub dims: Vec<usize>,
    pub offsets: Vec<usize>,
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Value of the quadratic model at `Δ = 0`.
    pub constant: f64,
}

impl LinearSystem {
    pub fn zeros(keys: Vec<VariableKey>, dims: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut total = 0;
        for d in &dims {
            offsets.push(total);
            total += d;
        }
        Self { keys, dims, offsets, h: DMatrix::zeros(total, total), b: DVector::zeros(total), constant: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn index_of(&self, key: &VariableKey) -> Option<usize> {
        self.keys.iter().position(|k| k == key)
    }

    /// `(offset, dim)` of a key's block.
    pub fn block_range(&self, key: &VariableKey) -> Option<(usize, usize)> {
        self.index_of(key).map(|i| (self.offsets[i], self.dims[i]))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (&self.h - self.h.transpose()).amax() <= tol
    }

    pub fn symmetrize(&mut self) {
        let t = self.h.transpose();
        self.h = (&self.h + t) * 0.5;
    }

    /// Adds `other` (whose keys must be a subset of ours) in place.
    pub fn add_assign(&mut self, other: &LinearSystem) -> Result<()> {
        let map = other
            .keys
            .iter()
            .map(|k| self.block_range(k).ok_or_else(|| Error::Structural(format!("{k} not in target system"))))
            .collect::<Result<Vec<_>>>()?;
        for (i, &(oi, di)) in map.iter().enumerate() {
            let si = other.offsets[i];
            for (j, &(oj, dj)) in map.iter().enumerate() {
                let sj = other.offsets[j];
                let mut dst = self.h.view_mut((oi, oj), (di, dj));
                dst += other.h.view((si, sj), (di, dj));
            }
            let mut dst = self.b.rows_mut(oi, di);
            dst += other.b.rows(si, di);
        }
        self.constant += other.constant;
        Ok(())
    }
}

/// Nonlinear factors plus quadratic marginalization priors.
#[derive(Clone, Debug, Default)]
pub struct FactorGraph {
    pub factors: Vec<Arc<dyn Factor>>,
    pub priors: Vec<MarginalizationPrior>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<F: Factor + 'static>(&mut self, factor: F) {
        self.factors.push(Arc::new(factor));
    }

    pub fn add_shared(&mut self, factor: Arc<dyn Factor>) {
        self.factors.push(factor);
    }

    pub fn add_prior(&mut self, prior: MarginalizationPrior) {
        self.priors.push(prior);
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty() && self.priors.is_empty()
    }

    /// All keys referenced by factors and priors.
    pub fn keys(&self) -> BTreeSet<VariableKey> {
        let mut keys = BTreeSet::new();
        for f in &self.factors {
            keys.extend(f.keys().iter().copied());
        }
        for p in &self.priors {
            keys.extend(p.keys.iter().copied());
        }
        keys
    }

    /// Linearization point of `key` in any prior containing it.
    pub fn fej_point(&self, key: &VariableKey) -> Option<&StateBlock> {
        self.priors.iter().find_map(|p| p.fej_values.try_get(key))
    }

    /// Union of the linearization points of all priors.
    pub fn fej_values(&self) -> GraphValues {
        let mut out = GraphValues::new();
        for p in &self.priors {
            out.extend_from(&p.fej_values);
        }
        out
    }

    /// `½ Σ E_f + Σ prior energies`, including the constants the priors
    /// absorbed from eliminated factors.
    pub fn cost(&self, values: &GraphValues) -> Result<f64> {
        let mut total = 0.0;
        for f in &self.factors {
            total += 0.5 * f.energy(values)?;
        }
        for p in &self.priors {
            total += p.energy(values)? + p.constant;
        }
        Ok(total)
    }

    /// Gauss-Newton system over every key of the graph.
    pub fn linearize(&self, values: &GraphValues) -> Result<LinearSystem> {
        self.linearize_with(values, &BTreeSet::new())
    }

    /// Gauss-Newton system with `fixed` keys held constant (excluded).
    pub fn linearize_with(&self, values: &GraphValues, fixed: &BTreeSet<VariableKey>) -> Result<LinearSystem> {
        let keys: Vec<VariableKey> = self.keys().into_iter().filter(|k| !fixed.contains(k)).collect();
        let dims = keys.iter().map(|k| values.get(k).map(StateBlock::tangent_dim)).collect::<Result<Vec<_>>>()?;
        let mut system = LinearSystem::zeros(keys, dims);
        let index: BTreeMap<VariableKey, usize> = system.keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();

        for f in &self.factors {
            let eval = f.evaluate(values)?;
            accumulate(&mut system, &index, f.keys(), &eval);
        }
        for p in &self.priors {
            p.accumulate(values, &mut system, &index)?;
        }
        Ok(system)
    }
}

/// Adds one factor evaluation's `JᵀWJ`, `−JᵀWr` and `½·energy` to `system`.
pub(crate) fn accumulate(
    system: &mut LinearSystem,
    index: &BTreeMap<VariableKey, usize>,
    keys: &[VariableKey],
    eval: &FactorEvaluation,
) {
    system.constant += 0.5 * eval.energy();
    // (slot in system, column offset in the stacked Jacobian)
    let mut blocks = Vec::with_capacity(keys.len());
    let mut cols = 0;
    for (a, k) in keys.iter().enumerate() {
        if let Some(&slot) = index.get(k) {
            blocks.push((a, slot, cols));
            cols += system.dims[slot];
        }
    }
    if blocks.is_empty() {
        return;
    }
    let m = eval.residual.len();
    let mut j = DMatrix::zeros(m, cols);
    for &(a, slot, c) in &blocks {
        j.view_mut((0, c), (m, system.dims[slot])).copy_from(&eval.jacobians[a]);
    }
    let wj = match &eval.weight {
        Weight::Diagonal(w) => {
            let mut wj = j.clone();
            for (row, (r, w)) in eval.residual.iter().zip(w.iter()).enumerate() {
                wj.row_mut(row).scale_mut(w * eval.loss.irls_weight(*r));
            }
            wj
        }
        Weight::Information(info) => info * &j,
    };
    let h_local = j.tr_mul(&wj);
    let g_local = wj.tr_mul(&eval.residual);
    for &(_, sa, ca) in &blocks {
        let (oa, da) = (system.offsets[sa], system.dims[sa]);
        let mut ba = system.b.rows_mut(oa, da);
        ba -= g_local.rows(ca, da);
        for &(_, sc, cc) in &blocks {
            let (oc, dc) = (system.offsets[sc], system.dims[sc]);
            let mut hac = system.h.view_mut((oa, oc), (da, dc));
            hac += h_local.view((ca, cc), (da, dc));
        }
    }
}

/// Marginal covariance of one variable: its diagonal block of `H⁻¹`.
///
/// A singular information matrix is reported as [`Error::Unobservable`].
pub fn marginal_covariance(
    graph: &FactorGraph,
    values: &GraphValues,
    key: VariableKey,
    fixed: &BTreeSet<VariableKey>,
) -> Result<DMatrix<f64>> {
    let system = graph.linearize_with(values, fixed)?;
    covariance_block(&system, key)
}

/// Diagonal block of `H⁻¹` for `key` in an existing system.
pub fn covariance_block(system: &LinearSystem, key: VariableKey) -> Result<DMatrix<f64>> {
    let (offset, dim) = system
        .block_range(&key)
        .ok_or_else(|| Error::Structural(format!("{key} is not part of the system")))?;
    let mut h = system.h.clone();
    let t = h.transpose();
    h = (h + t) * 0.5;
    let chol = h.cholesky().ok_or(Error::Unobservable(key))?;
    let n = system.dim();
    let mut rhs = DMatrix::zeros(n, dim);
    for k in 0..dim {
        rhs[(offset + k, k)] = 1.0;
    }
    let sol = chol.solve(&rhs);
    let block = sol.rows(offset, dim).into_owned();
    if block.iter().any(|v| !v.is_finite()) || (0..dim).any(|k| block[(k, k)] <= 0.0) {
        return Err(Error::Unobservable(key));
    }
    Ok((&block + block.transpose()) * 0.5)
}
