//! Schur-complement marginalization and the quadratic priors it produces.
//!
//! A prior over keys `α` stores `(Ĥ, b̂)` together with the values of `α` at
//! which it was built (the first estimates). Its energy is
//!
//! ```text
//! E(x) = ½ δᵀ Ĥ δ − b̂ᵀ δ,   δ = x ⊟ x_fej
//! ```
//!
//! and its Jacobian with respect to `x` is taken to be the identity, so the
//! Hessian contribution is `Ĥ` wherever it is evaluated.
//!
//! All priors in one graph that share a key also share its linearization
//! point. [`marginalize_keys`] keeps this invariant by linearizing the factors
//! it eliminates at the existing first estimates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graph::{FactorGraph, GraphValues, LinearSystem, VariableKey, VariableKind};

/// Regularization added to `H_ββ` when it is not numerically positive definite.
pub const SCHUR_EPSILON: f64 = 1e-10;

/// Quadratic energy over a set of kept variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalizationPrior {
    pub keys: Vec<VariableKey>,
    pub dims: Vec<usize>,
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Energy absorbed from eliminated factors at the linearization point.
    pub constant: f64,
    pub fej_values: GraphValues,
    /// Keyframe pairs whose IMU factors were folded into this prior.
    pub imu_pairs: BTreeSet<(u32, u32)>,
}

impl MarginalizationPrior {
    /// Wraps a linear system whose `Δ = 0` corresponds to `fej_values`.
    pub fn from_system(system: LinearSystem, fej_values: &GraphValues) -> Result<Self> {
        let fej = fej_values.subset(&system.keys)?;
        let mut h = system.h;
        let t = h.transpose();
        h = (h + t) * 0.5;
        Ok(Self {
            keys: system.keys,
            dims: system.dims,
            h,
            b: system.b,
            constant: system.constant,
            fej_values: fej,
            imu_pairs: BTreeSet::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dims.len());
        let mut total = 0;
        for d in &self.dims {
            out.push(total);
            total += d;
        }
        out
    }

    pub fn contains(&self, key: &VariableKey) -> bool {
        self.keys.contains(key)
    }

    /// `values ⊟ fej_values`, stacked in key order.
    pub fn delta(&self, values: &GraphValues) -> Result<DVector<f64>> {
        values.boxminus(&self.fej_values, &self.keys)
    }

    /// `½ δᵀĤδ − b̂ᵀδ`. The constant is not included.
    pub fn energy(&self, values: &GraphValues) -> Result<f64> {
        let d = self.delta(values)?;
        Ok(0.5 * d.dot(&(&self.h * &d)) - self.b.dot(&d))
    }

    /// Gradient of [`energy`](Self::energy) with respect to `δ`: `Ĥδ − b̂`.
    pub fn gradient(&self, values: &GraphValues) -> Result<DVector<f64>> {
        let d = self.delta(values)?;
        Ok(&self.h * d - &self.b)
    }

    /// Adds `Ĥ`, the negative gradient and the energy to `system`. Keys
    /// missing from `index` (held fixed) are skipped.
    pub fn accumulate(
        &self,
        values: &GraphValues,
        system: &mut LinearSystem,
        index: &BTreeMap<VariableKey, usize>,
    ) -> Result<()> {
        let d = self.delta(values)?;
        let neg_grad = &self.b - &self.h * &d;
        let offsets = self.offsets();
        for (a, ka) in self.keys.iter().enumerate() {
            let Some(&ia) = index.get(ka) else { continue };
            let (sa, da) = (system.offsets[ia], system.dims[ia]);
            let mut dst = system.b.rows_mut(sa, da);
            dst += neg_grad.rows(offsets[a], da);
            for (c, kc) in self.keys.iter().enumerate() {
                let Some(&ic) = index.get(kc) else { continue };
                let (sc, dc) = (system.offsets[ic], system.dims[ic]);
                let mut dst = system.h.view_mut((sa, sc), (da, dc));
                dst += self.h.view((offsets[a], offsets[c]), (da, dc));
            }
        }
        system.constant += 0.5 * d.dot(&(&self.h * &d)) - self.b.dot(&d) + self.constant;
        Ok(())
    }

    /// Re-expresses the prior about a new linearization point.
    ///
    /// With `c = new ⊟ old` the energy in the new chart is
    /// `½δ'ᵀĤδ' − (b̂ − Ĥc)ᵀδ' + const + ½cᵀĤc − b̂ᵀc`, which is exact for
    /// vector-valued blocks and first-order accurate for group blocks.
    pub fn relinearize_to(&self, new_fej: &GraphValues) -> Result<Self> {
        let mut fej = GraphValues::new();
        for k in &self.keys {
            fej.insert(*k, new_fej.try_get(k).unwrap_or(self.fej_values.get(k)?).clone());
        }
        let c = fej.boxminus(&self.fej_values, &self.keys)?;
        let hc = &self.h * &c;
        Ok(Self {
            keys: self.keys.clone(),
            dims: self.dims.clone(),
            h: self.h.clone(),
            b: &self.b - &hc,
            constant: self.constant + 0.5 * c.dot(&hc) - self.b.dot(&c),
            fej_values: fej,
            imu_pairs: self.imu_pairs.clone(),
        })
    }

    /// As a linear system whose `Δ = 0` is the linearization point.
    pub fn to_system(&self) -> LinearSystem {
        let mut sys = LinearSystem::zeros(self.keys.clone(), self.dims.clone());
        sys.h.copy_from(&self.h);
        sys.b.copy_from(&self.b);
        sys.constant = self.constant;
        sys
    }

    /// Sum of several priors. Shared keys must have identical linearization
    /// points.
    pub fn combine(priors: &[MarginalizationPrior]) -> Result<Self> {
        let mut fej = GraphValues::new();
        let mut dims = BTreeMap::new();
        for p in priors {
            for (k, d) in p.keys.iter().zip(&p.dims) {
                let v = p.fej_values.get(k)?;
                if let Some(existing) = fej.try_get(k) {
                    if existing != v {
                        return Err(Error::Structural(format!("priors disagree on the linearization point of {k}")));
                    }
                }
                fej.insert(*k, v.clone());
                dims.insert(*k, *d);
            }
        }
        let (keys, dims): (Vec<_>, Vec<_>) = dims.into_iter().unzip();
        let mut sys = LinearSystem::zeros(keys, dims);
        let mut pairs = BTreeSet::new();
        for p in priors {
            sys.add_assign(&p.to_system())?;
            pairs.extend(p.imu_pairs.iter().copied());
        }
        let mut out = Self::from_system(sys, &fej)?;
        out.imu_pairs = pairs;
        Ok(out)
    }
}

/// Eliminates the variables `beta` from `system`:
/// `Ĥ = H_αα − H_αβ H_ββ⁻¹ H_βα`, `b̂ = b_α − H_αβ H_ββ⁻¹ b_β`.
///
/// Scalar inverse-depth blocks without any information are dropped with a
/// warning. Other singular `H_ββ` are retried with `εI` added and otherwise
/// reported as [`Error::DegenerateMarginalization`].
pub fn schur_complement(system: &LinearSystem, beta: &BTreeSet<VariableKey>) -> Result<LinearSystem> {
    for k in beta {
        if system.index_of(k).is_none() {
            return Err(Error::Structural(format!("cannot marginalize {k}: not in the system")));
        }
    }
    if beta.is_empty() {
        return Ok(system.clone());
    }
    let mut beta_rows = Vec::new();
    let mut alpha_keys = Vec::new();
    let mut alpha_dims = Vec::new();
    let mut alpha_rows = Vec::new();
    for (i, k) in system.keys.iter().enumerate() {
        let rows = system.offsets[i]..system.offsets[i] + system.dims[i];
        if beta.contains(k) {
            if k.kind == VariableKind::InverseDepth && system.dims[i] == 1 {
                let r = system.offsets[i];
                if system.h.row(r).amax() <= 1e-12 {
                    log::warn!("dropping {k}: no depth information");
                    continue;
                }
            }
            beta_rows.extend(rows);
        } else {
            alpha_keys.push(*k);
            alpha_dims.push(system.dims[i]);
            alpha_rows.extend(rows);
        }
    }
    let hbb = system.h.select_rows(&beta_rows).select_columns(&beta_rows);
    let hab = system.h.select_rows(&alpha_rows).select_columns(&beta_rows);
    let haa = system.h.select_rows(&alpha_rows).select_columns(&alpha_rows);
    let bb = system.b.select_rows(&beta_rows);
    let ba = system.b.select_rows(&alpha_rows);

    let mut out = LinearSystem::zeros(alpha_keys, alpha_dims);
    if beta_rows.is_empty() {
        out.h = haa;
        out.b = ba;
        out.constant = system.constant;
        return Ok(out);
    }
    let hbb_sym = (&hbb + hbb.transpose()) * 0.5;
    let chol = match hbb_sym.clone().cholesky() {
        Some(c) => c,
        None => {
            let n = hbb_sym.nrows();
            (hbb_sym + DMatrix::identity(n, n) * SCHUR_EPSILON)
                .cholesky()
                .ok_or(Error::DegenerateMarginalization)?
        }
    };
    // X = H_ββ⁻¹ H_βα, y = H_ββ⁻¹ b_β
    let x = chol.solve(&hab.transpose());
    let y = chol.solve(&bb);
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateMarginalization);
    }
    let mut h = haa - &hab * &x;
    let t = h.transpose();
    h = (h + t) * 0.5;
    out.h = h;
    out.b = ba - &hab * &y;
    out.constant = system.constant - 0.5 * bb.dot(&y);
    Ok(out)
}

/// Removes everything touching `beta` from `graph` and replaces it with one
/// prior over the remaining connected variables (the Markov blanket).
///
/// The eliminated factors are linearized at the existing first estimates of
/// the blanket where those exist and at `values` otherwise. Returns the new
/// prior (also added to the graph), or `None` if nothing touched `beta`.
pub fn marginalize_keys(
    graph: &mut FactorGraph,
    values: &GraphValues,
    beta: &BTreeSet<VariableKey>,
) -> Result<Option<MarginalizationPrior>> {
    let (touching, kept): (Vec<_>, Vec<_>) =
        graph.factors.drain(..).partition(|f| f.keys().iter().any(|k| beta.contains(k)));
    graph.factors = kept;
    let (touching_priors, kept_priors): (Vec<_>, Vec<_>) =
        graph.priors.drain(..).partition(|p| p.keys.iter().any(|k| beta.contains(k)));
    graph.priors = kept_priors;
    if touching.is_empty() && touching_priors.is_empty() {
        return Ok(None);
    }

    let mut local = FactorGraph::new();
    local.factors = touching;
    local.priors = touching_priors;

    let mut lin = GraphValues::new();
    for k in local.keys() {
        let v = if beta.contains(&k) {
            values.get(&k)?
        } else {
            match graph.fej_point(&k).or_else(|| local.fej_point(&k)) {
                Some(v) => v,
                None => values.get(&k)?,
            }
        };
        lin.insert(k, v.clone());
    }
    let mut pairs = BTreeSet::new();
    for f in &local.factors {
        pairs.extend(f.imu_pair());
    }
    for p in &local.priors {
        pairs.extend(p.imu_pairs.iter().copied());
    }
    let system = local.linearize(&lin)?;
    let present: BTreeSet<VariableKey> = beta.iter().filter(|k| system.index_of(k).is_some()).copied().collect();
    let reduced = schur_complement(&system, &present)?;
    if reduced.keys.is_empty() {
        return Ok(None);
    }
    let mut prior = MarginalizationPrior::from_system(reduced, &lin)?;
    prior.imu_pairs = pairs;
    graph.add_prior(prior.clone());
    Ok(Some(prior))
}

/// Linearizes and removes the factors selected by `pick` without eliminating
/// anything. Returns the resulting prior (also added to the graph).
pub fn linearize_factors(
    graph: &mut FactorGraph,
    values: &GraphValues,
    pick: impl Fn(&dyn crate::graph::Factor) -> bool,
) -> Result<Option<MarginalizationPrior>> {
    let (picked, kept): (Vec<_>, Vec<_>) = graph.factors.drain(..).partition(|f| pick(f.as_ref()));
    graph.factors = kept;
    if picked.is_empty() {
        return Ok(None);
    }
    let mut local = FactorGraph::new();
    local.factors = picked;
    let mut lin = GraphValues::new();
    for k in local.keys() {
        let v = graph.fej_point(&k).map(Ok).unwrap_or_else(|| values.get(&k))?;
        lin.insert(k, v.clone());
    }
    let mut pairs = BTreeSet::new();
    for f in &local.factors {
        pairs.extend(f.imu_pair());
    }
    let mut prior = MarginalizationPrior::from_system(local.linearize(&lin)?, &lin)?;
    prior.imu_pairs = pairs;
    graph.add_prior(prior.clone());
    Ok(Some(prior))
}

/// Result of eliminating one keyframe.
#[derive(Clone, Debug)]
pub struct FrameMarginalization {
    /// Linearized factors that only involve poses and affine parameters
    /// (first-pose, gauge and affine priors) and touch the frame.
    pub frame_prior: Option<MarginalizationPrior>,
    /// Prior produced by eliminating the frame's points (a linearized
    /// photometric factor over the frames observing them).
    pub point_prior: Option<MarginalizationPrior>,
    /// Keys of the prior left after eliminating the frame state.
    pub blanket: Vec<VariableKey>,
}

impl FrameMarginalization {
    /// The purely visual priors created before the frame itself was
    /// eliminated, in creation order.
    pub fn visual_priors(&self) -> Vec<MarginalizationPrior> {
        self.frame_prior.iter().chain(self.point_prior.iter()).cloned().collect()
    }
}

/// Eliminates keyframe `frame` and the points it hosts.
///
/// Residuals that connect the frame to points hosted by other frames are
/// dropped first. Factors over poses and affine parameters only that touch
/// the frame are linearized, then the hosted points are marginalized, then
/// the frame's pose, affine, velocity and bias blocks.
pub fn marginalize_frame(
    graph: &mut FactorGraph,
    values: &GraphValues,
    frame: u32,
    hosted_points: &[VariableKey],
) -> Result<FrameMarginalization> {
    let frame_keys: BTreeSet<VariableKey> = graph.keys().into_iter().filter(|k| k.is_frame_state(frame)).collect();
    if !frame_keys.contains(&VariableKey::pose(frame)) {
        return Err(Error::Structural(format!("keyframe {frame} is not in the graph")));
    }
    let hosted: BTreeSet<VariableKey> = hosted_points.iter().copied().collect();
    graph.factors.retain(|f| {
        let keys = f.keys();
        let touches_frame = keys.iter().any(|k| frame_keys.contains(k));
        let foreign_point = keys.iter().any(|k| k.kind == VariableKind::InverseDepth && !hosted.contains(k));
        !(touches_frame && foreign_point)
    });
    let frame_prior = linearize_factors(graph, values, |f| {
        let keys = f.keys();
        keys.iter().any(|k| frame_keys.contains(k))
            && keys.iter().all(|k| matches!(k.kind, VariableKind::Pose | VariableKind::Affine))
    })?;
    let present_points: BTreeSet<VariableKey> = {
        let keys = graph.keys();
        hosted.into_iter().filter(|k| keys.contains(k)).collect()
    };
    let point_prior = if present_points.is_empty() {
        None
    } else {
        marginalize_keys(graph, values, &present_points)?
    };
    let blanket = marginalize_keys(graph, values, &frame_keys)?.map(|p| p.keys).unwrap_or_default();
    Ok(FrameMarginalization { frame_prior, point_prior, blanket })
}
