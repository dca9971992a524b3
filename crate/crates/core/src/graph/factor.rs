use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use std::fmt;

use super::{GraphValues, VariableKey};
use crate::error::{Error, Result};
use crate::lie::{left_jacobian_inverse, skew, StateBlock};

/// Robust loss applied per residual component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Loss {
    Squared,
    /// `ρ(r) = r²` for `|r| ≤ γ`, `2γ|r| − γ²` beyond.
    Huber(f64),
}

impl Loss {
    pub fn rho(&self, r: f64) -> f64 {
        match *self {
            Loss::Squared => r * r,
            Loss::Huber(k) => {
                let a = r.abs();
                if a <= k {
                    r * r
                } else {
                    2.0 * k * a - k * k
                }
            }
        }
    }

    /// IRLS weight `ρ'(r) / 2r`.
    pub fn irls_weight(&self, r: f64) -> f64 {
        match *self {
            Loss::Squared => 1.0,
            Loss::Huber(k) => {
                let a = r.abs();
                if a <= k {
                    1.0
                } else {
                    k / a
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum Weight {
    /// Per-component weights, each combined with the loss.
    Diagonal(DVector<f64>),
    /// Full information matrix; the loss is not applied.
    Information(DMatrix<f64>),
}

/// Residual, Jacobians (one per connected key, with respect to that key's
/// tangent) and weighting of a factor at one set of values.
#[derive(Clone, Debug)]
pub struct FactorEvaluation {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
    pub weight: Weight,
    pub loss: Loss,
}

impl FactorEvaluation {
    /// `Σ w_k ρ(r_k)` or `rᵀ W r`.
    pub fn energy(&self) -> f64 {
        match &self.weight {
            Weight::Diagonal(w) => self
                .residual
                .iter()
                .zip(w.iter())
                .map(|(r, w)| w * self.loss.rho(*r))
                .sum(),
            Weight::Information(info) => (self.residual.transpose() * info * &self.residual)[(0, 0)],
        }
    }

    /// Effective (IRLS-reweighted) information matrix.
    pub fn effective_information(&self) -> DMatrix<f64> {
        match &self.weight {
            Weight::Diagonal(w) => DMatrix::from_diagonal(&DVector::from_iterator(
                w.len(),
                self.residual.iter().zip(w.iter()).map(|(r, w)| w * self.loss.irls_weight(*r)),
            )),
            Weight::Information(info) => info.clone(),
        }
    }
}

/// One summand of the energy.
pub trait Factor: Send + Sync + fmt::Debug {
    fn keys(&self) -> &[VariableKey];

    fn residual_dim(&self) -> usize;

    /// Residual and analytic Jacobians at `values`.
    fn evaluate(&self, values: &GraphValues) -> Result<FactorEvaluation>;

    /// Consecutive keyframe pair constrained by this factor, if it is an IMU factor.
    fn imu_pair(&self) -> Option<(u32, u32)> {
        None
    }

    /// `E_f` at `values` (twice this factor's contribution to the objective).
    fn energy(&self, values: &GraphValues) -> Result<f64> {
        Ok(self.evaluate(values)?.energy())
    }

    /// Residual only. Used by finite-difference checks.
    fn residual(&self, values: &GraphValues) -> Result<DVector<f64>> {
        Ok(self.evaluate(values)?.residual)
    }
}

/// Unary prior pulling one variable towards a target value.
///
/// Residuals: vectors `x − x₀`, scale `ln(s/s₀)`, rotations `Log(R R₀ᵀ)`,
/// gravity chart coordinates difference, poses `(Log(R R₀ᵀ), t − t₀)`.
#[derive(Clone, Debug)]
pub struct PriorFactor {
    keys: [VariableKey; 1],
    target: StateBlock,
    information: DMatrix<f64>,
}

impl PriorFactor {
    pub fn new(key: VariableKey, target: StateBlock, information: DMatrix<f64>) -> Result<Self> {
        let dim = target.tangent_dim();
        if information.nrows() != dim || information.ncols() != dim {
            return Err(Error::Structural(format!(
                "prior information is {}x{}, block has dimension {dim}",
                information.nrows(),
                information.ncols()
            )));
        }
        Ok(Self { keys: [key], target, information })
    }

    pub fn isotropic(key: VariableKey, target: StateBlock, weight: f64) -> Self {
        let dim = target.tangent_dim();
        Self { keys: [key], target, information: DMatrix::identity(dim, dim) * weight }
    }

    pub fn target(&self) -> &StateBlock {
        &self.target
    }
}

impl Factor for PriorFactor {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn residual_dim(&self) -> usize {
        self.target.tangent_dim()
    }

    fn evaluate(&self, values: &GraphValues) -> Result<FactorEvaluation> {
        let x = values.get(&self.keys[0])?;
        let (residual, jacobian) = match (x, &self.target) {
            (StateBlock::Pose(p), StateBlock::Pose(p0)) => {
                let rot = p.rotation.boxminus(&p0.rotation);
                let mut r = DVector::zeros(6);
                r.rows_mut(0, 3).copy_from(&rot);
                r.rows_mut(3, 3).copy_from(&(p.translation - p0.translation));
                let mut j = DMatrix::zeros(6, 6);
                j.view_mut((0, 0), (3, 3)).copy_from(&left_jacobian_inverse(&rot));
                j.view_mut((3, 0), (3, 3)).copy_from(&(-skew(&p.translation)));
                j.view_mut((3, 3), (3, 3)).copy_from(&Matrix3::identity());
                (r, j)
            }
            (StateBlock::Rotation(r), StateBlock::Rotation(r0)) => {
                let rot: Vector3<f64> = r.boxminus(r0);
                let j = left_jacobian_inverse(&rot);
                (DVector::from_column_slice(rot.as_slice()), DMatrix::from_column_slice(3, 3, j.as_slice()))
            }
            (StateBlock::Gravity(g), StateBlock::Gravity(g0)) => {
                (DVector::from_column_slice(&g.boxminus(g0)), DMatrix::identity(2, 2))
            }
            _ => {
                let r = x.boxminus(&self.target)?;
                let d = r.len();
                (r, DMatrix::identity(d, d))
            }
        };
        Ok(FactorEvaluation {
            residual,
            jacobians: vec![jacobian],
            weight: Weight::Information(self.information.clone()),
            loss: Loss::Squared,
        })
    }
}

/// Central-difference Jacobians of `factor` at `values`, one block per key.
///
/// Used by tests as an oracle for the analytic Jacobians.
pub fn numeric_jacobians(factor: &dyn Factor, values: &GraphValues, step: f64) -> Result<Vec<DMatrix<f64>>> {
    let mut out = Vec::with_capacity(factor.keys().len());
    for key in factor.keys() {
        let block = values.get(key)?.clone();
        let dim = block.tangent_dim();
        let mut jac = DMatrix::zeros(factor.residual_dim(), dim);
        for k in 0..dim {
            let mut delta = vec![0.0; dim];
            delta[k] = step;
            let mut plus = values.clone();
            plus.insert(*key, block.boxplus(&delta)?);
            delta[k] = -step;
            let mut minus = values.clone();
            minus.insert(*key, block.boxplus(&delta)?);
            let col = (factor.residual(&plus)? - factor.residual(&minus)?) / (2.0 * step);
            jac.set_column(k, &col);
        }
        out.push(jac);
    }
    Ok(out)
}
