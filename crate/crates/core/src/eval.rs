//! Trajectory evaluation: timestamp association, Umeyama alignment,
//! absolute trajectory error, drift and cumulative error curves.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{RigidTransform, Rotation3, SimilarityTransform};

/// Default association tolerance in seconds.
pub const MATCH_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedPose {
    pub timestamp: f64,
    /// Body-to-world pose.
    pub pose: RigidTransform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Rotation and translation; metric evaluation.
    Se3,
    /// Rotation, translation and scale; for trajectories with unknown scale.
    Sim3,
}

/// Pairs of (estimated, ground-truth) positions whose timestamps differ by at
/// most `tolerance`. Ground truth must be sorted by time.
pub fn associate(est: &[TimedPose], gt: &[TimedPose], tolerance: f64) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut out = Vec::new();
    for e in est {
        let i = gt.partition_point(|g| g.timestamp < e.timestamp);
        let best = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter(|&j| j < gt.len())
            .min_by(|&a, &b| {
                let da = (gt[a].timestamp - e.timestamp).abs();
                let db = (gt[b].timestamp - e.timestamp).abs();
                da.total_cmp(&db)
            });
        if let Some(j) = best {
            if (gt[j].timestamp - e.timestamp).abs() <= tolerance {
                out.push((e.pose.translation, gt[j].pose.translation));
            }
        }
    }
    out
}

/// Least-squares transform mapping `src` onto `dst` (Umeyama).
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<SimilarityTransform> {
    if src.len() != dst.len() {
        return Err(Error::Data(format!("{} source points but {} targets", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(Error::InsufficientData { needed: 3, got: src.len() });
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
        var_s += (s - mu_s).norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        signs.z = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = if with_scale {
        if var_s <= 0.0 {
            return Err(Error::Data("source points coincide; scale is undefined".into()));
        }
        svd.singular_values.component_mul(&signs).sum() / var_s
    } else {
        1.0
    };
    let t = mu_d - scale * r * mu_s;
    SimilarityTransform::new(Rotation3::from_matrix(&r), t, scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedError {
    pub rmse: f64,
    pub matched: usize,
    pub transform: SimilarityTransform,
}

/// RMSE of translations after aligning the estimate to the ground truth.
pub fn absolute_trajectory_error(est: &[TimedPose], gt: &[TimedPose], alignment: Alignment) -> Result<AlignedError> {
    let pairs = associate(est, gt, MATCH_TOLERANCE);
    let src: Vec<_> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.1).collect();
    let transform = umeyama(&src, &dst, alignment == Alignment::Sim3)?;
    let sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (transform.transform_point(s) - d).norm_squared())
        .sum();
    Ok(AlignedError { rmse: (sq / src.len() as f64).sqrt(), matched: src.len(), transform })
}

/// Path length of a trajectory.
pub fn trajectory_length(traj: &[TimedPose]) -> f64 {
    traj.windows(2).map(|w| (w[1].pose.translation - w[0].pose.translation).norm()).sum()
}

/// Drift in percent: `rmse · 100 / length`.
pub fn drift_percent(rmse: f64, length: f64) -> f64 {
    rmse * 100.0 / length
}

/// Scale error in percent: `|ŝ/s − 1| · 100`.
pub fn scale_error_percent(estimate: f64, truth: f64) -> f64 {
    (estimate / truth - 1.0).abs() * 100.0
}

/// Angle in degrees between two directions.
pub fn angle_between_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = a.normalize().dot(&b.normalize()).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub seed: Option<u64>,
    /// Metres; infinite for failed runs.
    pub rmse_ate: f64,
    pub scale_error: Option<f64>,
    pub drift: f64,
    pub length: f64,
    pub matched: usize,
    pub failed: bool,
}

impl EvaluationResult {
    /// A run that lost tracking.
    pub fn failure(seed: Option<u64>) -> Self {
        Self {
            seed,
            rmse_ate: f64::INFINITY,
            scale_error: None,
            drift: f64::INFINITY,
            length: 0.0,
            matched: 0,
            failed: true,
        }
    }
}

pub fn evaluate(est: &[TimedPose], gt: &[TimedPose], alignment: Alignment) -> Result<EvaluationResult> {
    let ate = absolute_trajectory_error(est, gt, alignment)?;
    let length = trajectory_length(gt);
    Ok(EvaluationResult {
        seed: None,
        rmse_ate: ate.rmse,
        scale_error: None,
        drift: drift_percent(ate.rmse, length),
        length,
        matched: ate.matched,
        failed: false,
    })
}

/// Median, with infinite values sorting last.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Number of runs with error at most each threshold.
pub fn cumulative_counts(errors: &[f64], thresholds: &[f64]) -> Vec<(f64, usize)> {
    thresholds
        .iter()
        .map(|&t| (t, errors.iter().filter(|e| **e <= t).count()))
        .collect()
}
