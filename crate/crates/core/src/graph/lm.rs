use nalgebra::{DMatrix, DVector};
use std::collections::BTreeSet;

use super::{FactorGraph, GraphValues, LinearSystem, VariableKey, VariableKind};
use crate::error::{Error, Result};

/// Levenberg-Marquardt settings.
///
/// Damping adds `λ · clamp(diag H, 1e-6, 1e32)` to the diagonal. `λ` starts at
/// `initial_lambda`, is halved after an accepted step and doubled after a
/// rejected one.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub max_lambda: f64,
    pub relative_decrease_tol: f64,
    pub step_tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            initial_lambda: 1e-4,
            max_lambda: 1e16,
            relative_decrease_tol: 1e-6,
            step_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LmReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
    pub converged: bool,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct LmSolution {
    pub values: GraphValues,
    pub report: LmReport,
}

/// Minimizes the graph objective starting from `initial`.
///
/// Keys in `fixed` are held constant. Fails with [`Error::Diverged`] when no
/// damped system can be factorized even at the maximum damping.
pub fn solve_lm(
    graph: &FactorGraph,
    initial: &GraphValues,
    config: &LmConfig,
    fixed: &BTreeSet<VariableKey>,
) -> Result<LmSolution> {
    let mut values = initial.clone();
    let mut cost = graph.cost(&values)?;
    let mut lambda = config.initial_lambda;
    let mut report = LmReport { initial_cost: cost, accepted_costs: vec![cost], ..Default::default() };
    let mut any_factorization = false;

    'outer: for iteration in 0..config.max_iterations {
        report.iterations = iteration + 1;
        let system = graph.linearize_with(&values, fixed)?;
        if system.dim() == 0 {
            report.converged = true;
            break;
        }
        loop {
            let Some(step) = damped_step(&system, lambda) else {
                lambda *= 2.0;
                if lambda > config.max_lambda {
                    if any_factorization {
                        break 'outer;
                    }
                    return Err(Error::Diverged { iterations: iteration + 1, lambda });
                }
                continue;
            };
            any_factorization = true;
            if step.norm() < config.step_tol {
                report.converged = true;
                break 'outer;
            }
            let candidate = values.retract(&system, &step)?;
            let new_cost = graph.cost(&candidate)?;
            if new_cost.is_finite() && new_cost < cost {
                let decrease = (cost - new_cost) / cost.abs().max(1e-300);
                values = candidate;
                cost = new_cost;
                report.accepted_costs.push(cost);
                lambda = (lambda * 0.5).max(1e-12);
                if decrease < config.relative_decrease_tol {
                    report.converged = true;
                    break 'outer;
                }
                break;
            }
            lambda *= 2.0;
            if lambda > config.max_lambda {
                // no descent direction left: a (local) minimum up to damping
                report.converged = true;
                break 'outer;
            }
        }
    }
    report.final_cost = cost;
    report.lambda = lambda;
    Ok(LmSolution { values, report })
}

/// Solves `(H + λD) Δ = b`, eliminating inverse-depth blocks first when they
/// only couple to other variables.
pub(crate) fn damped_step(system: &LinearSystem, lambda: f64) -> Option<DVector<f64>> {
    let n = system.dim();
    let mut h = system.h.clone();
    for i in 0..n {
        h[(i, i)] += lambda * system.h[(i, i)].clamp(1e-6, 1e32);
    }
    let first_point = system.keys.iter().position(|k| k.kind == VariableKind::InverseDepth);
    let split = first_point.map(|i| system.offsets[i]).unwrap_or(n);
    if split < n && split > 0 && point_block_is_diagonal(&h, split) {
        solve_with_point_schur(&h, &system.b, split)
    } else {
        let x = h.cholesky()?.solve(&system.b);
        x.iter().all(|v| v.is_finite()).then_some(x)
    }
}

fn point_block_is_diagonal(h: &DMatrix<f64>, split: usize) -> bool {
    let n = h.nrows();
    (split..n).all(|i| (split..n).all(|j| i == j || h[(i, j)] == 0.0))
}

fn solve_with_point_schur(h: &DMatrix<f64>, b: &DVector<f64>, split: usize) -> Option<DVector<f64>> {
    let n = h.nrows();
    let np = n - split;
    let d: Vec<f64> = (split..n).map(|i| h[(i, i)]).collect();
    if d.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    let h_fp = h.view((0, split), (split, np));
    let mut scaled = h_fp.into_owned();
    for (j, dj) in d.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / dj);
    }
    let reduced = h.view((0, 0), (split, split)) - &scaled * h_fp.transpose();
    let rhs = b.rows(0, split) - &scaled * b.rows(split, np);
    let x_f = reduced.cholesky()?.solve(&rhs);
    let back = b.rows(split, np) - h_fp.transpose() * &x_f;
    let mut x = DVector::zeros(n);
    x.rows_mut(0, split).copy_from(&x_f);
    for j in 0..np {
        x[split + j] = back[j] / d[j];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
