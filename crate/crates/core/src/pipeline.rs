//! The visual-inertial estimator.
//!
//! Each keyframe runs one photometric bundle adjustment over the active
//! window (with IMU factors once initialized), then the IMU initializer,
//! then marginalization. The initializer goes through
//!
//! ```text
//! NoImu ─coarse init passes─▶ CoarseReady ─PGBA─▶ Initialized ─PGBA─▶ Reinitialized
//! ```
//!
//! and afterwards replaces the marginalization prior whenever the scale
//! moves too far from the value the prior was linearized at.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use crate::delayed::{DelayedGraph, PgbaGraph, DEFAULT_DELAY};
use crate::error::{Error, Result};
use crate::eval::TimedPose;
use crate::frontend::{
    dynamic_weight, photometric_energy, project, select_marginalization_victim, CameraModel, Landmark,
    PhotometricFactor, TargetImage, WindowFrame,
};
use crate::graph::{
    covariance_block, solve_lm, Factor, FactorGraph, GraphValues, LmConfig, PriorFactor, VariableKey, VariableKind,
};
use crate::imu::{ImuBias, ImuMeasurement, ImuNoiseParams, ImuState, PreintegratedImu};
use crate::inertial::{omega_transform, BiasRandomWalkFactor, ImuFactor, ScaleGaugeFactor};
use crate::lie::{GravityRotation, RigidTransform, Rotation3, StateBlock};
use crate::marginalization::{marginalize_frame, MarginalizationPrior};

/// Bias variable shared by all segments during the coarse initialization.
pub const SHARED_BIAS: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Maximum number of keyframes in the active window.
    pub max_frames: usize,
    /// Number of marginalizations the delayed graph lags behind.
    pub delay: usize,
    pub use_imu: bool,
    /// Marginal variance of `ln s` below which the coarse initialization is
    /// accepted. Log-scale variance does not depend on the units of the
    /// visual map.
    pub theta_init: f64,
    /// Marginal variance of `ln s` below which a PGBA counts as final.
    pub theta_reinit: f64,
    /// Scale ratio to the prior's linearization point that triggers a
    /// marginalization replacement.
    pub theta_scale: f64,
    /// Largest fraction of IMU factors a replacement may lose.
    pub theta_lost: f64,
    pub max_reinit_attempts: usize,
    pub photometric_lambda: f64,
    pub photometric_theta: f64,
    /// LM iterations per bundle adjustment.
    pub ba_iterations: usize,
    /// Solver settings for the coarse initialization and PGBA.
    pub init_lm: LmConfig,
    pub imu_noise: ImuNoiseParams,
    pub first_pose_weight: f64,
    pub scale_gauge_weight: f64,
    pub gravity_prior_weight: f64,
    pub coarse_bias_prior_weight: f64,
    /// Prior information on the affine brightness parameters `(a, b)`.
    pub affine_prior_weights: [f64; 2],
    pub min_coarse_keyframes: usize,
    /// Base seed for repeated runs over a simulated dataset: run `k` uses
    /// simulation seed `seed + k`. `None` starts from the dataset's own seed.
    pub seed: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_frames: 8,
            delay: DEFAULT_DELAY,
            use_imu: true,
            theta_init: 0.5 * 0.5,
            theta_reinit: 0.02 * 0.02,
            theta_scale: 1.02,
            theta_lost: 0.5,
            max_reinit_attempts: 20,
            photometric_lambda: 1.0,
            photometric_theta: 8.0,
            ba_iterations: 6,
            init_lm: LmConfig::default(),
            imu_noise: ImuNoiseParams::default(),
            first_pose_weight: 1e8,
            scale_gauge_weight: 1e8,
            gravity_prior_weight: 1.0,
            coarse_bias_prior_weight: 1e2,
            affine_prior_weights: [400.0, 0.25],
            min_coarse_keyframes: 3,
            seed: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_frames < 3 {
            return Err(Error::Config("max_frames must be at least 3".into()));
        }
        if !(self.theta_scale >= 1.0) {
            return Err(Error::Config("theta_scale must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.theta_lost) {
            return Err(Error::Config("theta_lost must lie in [0, 1]".into()));
        }
        if !(self.theta_init > 0.0 && self.theta_reinit > 0.0) {
            return Err(Error::Config("variance thresholds must be positive".into()));
        }
        if self.ba_iterations == 0 {
            return Err(Error::Config("ba_iterations must be positive".into()));
        }
        self.imu_noise.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    NoImu,
    CoarseReady,
    Initialized,
    Reinitialized,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::NoImu => "no_imu",
            Phase::CoarseReady => "coarse_ready",
            Phase::Initialized => "initialized",
            Phase::Reinitialized => "reinitialized",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitializerState {
    pub phase: Phase,
    /// Scale at which the current marginalization prior was linearized.
    pub s_fej: Option<f64>,
    /// Latest marginal variance of `ln s` from the coarse init or PGBA.
    pub scale_variance: Option<f64>,
    pub reinit_attempts: usize,
}

impl Default for InitializerState {
    fn default() -> Self {
        Self { phase: Phase::NoImu, s_fej: None, scale_variance: None, reinit_attempts: 0 }
    }
}

/// One keyframe as delivered by the front-end.
#[derive(Clone, Debug)]
pub struct KeyframeInput {
    pub id: u32,
    pub timestamp: f64,
    pub exposure_time: f64,
    /// Tracker estimate of `T_k · T_{k-1}⁻¹` in the visual frame.
    pub tracker_relative: RigidTransform,
    /// Landmarks hosted by this keyframe.
    pub landmarks: Vec<Landmark>,
}

/// Provides the observation of a landmark in a keyframe.
pub trait ObservationSource {
    fn observation(&self, landmark: u32, target: u32) -> Option<TargetImage>;
}

impl ObservationSource for crate::sim::Scene {
    fn observation(&self, landmark: u32, target: u32) -> Option<TargetImage> {
        self.target_image(landmark, target)
    }
}

impl KeyframeInput {
    pub fn from_scene(scene: &crate::sim::Scene, id: u32) -> Result<Self> {
        let kf = scene.keyframe(id).ok_or_else(|| Error::Data(format!("scene has no keyframe {id}")))?;
        Ok(Self {
            id,
            timestamp: kf.timestamp,
            exposure_time: kf.exposure.time,
            tracker_relative: kf.tracker_relative,
            landmarks: scene.landmarks_hosted_by(id).map(|l| l.to_landmark()).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub keyframe: u32,
    pub timestamp: f64,
    pub phase: String,
    pub scale: Option<f64>,
    pub scale_variance: Option<f64>,
    pub e_photo: f64,
    pub photometric_weight: f64,
    pub window: usize,
    pub pending: usize,
    pub event: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub coarse_attempts: usize,
    pub pgba_runs: usize,
    pub replacements: usize,
    pub replacements_disabled: usize,
    pub initialized_at: Option<u32>,
    /// Seconds spent in each main-graph marginalization.
    pub main_marginalization_seconds: Vec<f64>,
    /// Seconds spent updating the delayed graph after each marginalization.
    pub delayed_bookkeeping_seconds: Vec<f64>,
    /// Markov blanket size of each main-graph marginalization.
    pub main_blanket_sizes: Vec<usize>,
    pub bundle_adjustment_seconds: f64,
    pub initializer_seconds: f64,
}

/// Result of the coarse IMU initialization.
#[derive(Clone, Debug)]
pub struct CoarseInit {
    pub frames: Vec<u32>,
    pub scale: f64,
    /// Marginal variance of `ln s`.
    pub scale_variance: f64,
    pub gravity: GravityRotation,
    pub bias: ImuBias,
    pub velocities: BTreeMap<u32, Vector3<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReplacementOutcome {
    NotNeeded { ratio: f64 },
    Disabled { ratio: f64, lost: usize, total: usize },
    Replaced { ratio: f64 },
}

/// Whether a rebuilt prior keeps enough of the IMU factors in the old one.
pub fn replacement_allowed(old: &BTreeSet<(u32, u32)>, new: &BTreeSet<(u32, u32)>, theta_lost: f64) -> bool {
    if old.is_empty() {
        return true;
    }
    let lost = old.difference(new).count();
    lost as f64 <= theta_lost * old.len() as f64
}

/// Keyframe state snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameState {
    pub id: u32,
    pub timestamp: f64,
    pub pose: RigidTransform,
    pub affine: [f64; 2],
    pub velocity: Option<Vector3<f64>>,
    pub bias: Option<ImuBias>,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub scale: Option<f64>,
    pub gravity: Option<GravityRotation>,
    pub frames: Vec<FrameState>,
    pub inverse_depths: BTreeMap<u32, f64>,
}

#[derive(Clone, Debug)]
struct FrameRecord {
    timestamp: f64,
    exposure_time: f64,
    pose: RigidTransform,
    affine: [f64; 2],
    active: bool,
}

#[derive(Clone, Debug)]
struct ActiveLandmark {
    landmark: Arc<Landmark>,
    observations: BTreeMap<u32, Arc<TargetImage>>,
}

pub struct Pipeline {
    config: PipelineConfig,
    camera: CameraModel,
    t_cam_imu: RigidTransform,
    imu: Vec<ImuMeasurement>,
    graph: FactorGraph,
    values: GraphValues,
    window: Vec<u32>,
    frames: BTreeMap<u32, FrameRecord>,
    landmarks: BTreeMap<u32, ActiveLandmark>,
    delayed: DelayedGraph,
    segments: BTreeMap<u32, Arc<PreintegratedImu>>,
    inertial_estimates: GraphValues,
    imu_pairs: BTreeSet<(u32, u32)>,
    gravity_prior: Option<Arc<dyn Factor>>,
    state: InitializerState,
    photometric_weight: f64,
    e_photo: f64,
    timeline: Vec<TimelineRow>,
    stats: PipelineStats,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        camera: CameraModel,
        t_cam_imu: RigidTransform,
        imu: Vec<ImuMeasurement>,
    ) -> Result<Self> {
        config.validate()?;
        if imu.windows(2).any(|w| !(w[1].timestamp > w[0].timestamp)) {
            return Err(Error::Data("IMU timestamps must be strictly increasing".into()));
        }
        let delayed = DelayedGraph::new(config.delay);
        Ok(Self {
            photometric_weight: config.photometric_lambda,
            config,
            camera,
            t_cam_imu,
            imu,
            graph: FactorGraph::new(),
            values: GraphValues::new(),
            window: Vec::new(),
            frames: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            delayed,
            segments: BTreeMap::new(),
            inertial_estimates: GraphValues::new(),
            imu_pairs: BTreeSet::new(),
            gravity_prior: None,
            state: InitializerState::default(),
            e_photo: 0.0,
            timeline: Vec::new(),
            stats: PipelineStats::default(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn initializer(&self) -> &InitializerState {
        &self.state
    }

    pub fn stats(&self) -> &PipelineStats {
        &self.stats
    }

    pub fn timeline(&self) -> &[TimelineRow] {
        &self.timeline
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn values(&self) -> &GraphValues {
        &self.values
    }

    pub fn delayed(&self) -> &DelayedGraph {
        &self.delayed
    }

    pub fn window(&self) -> &[u32] {
        &self.window
    }

    pub fn segments(&self) -> &BTreeMap<u32, Arc<PreintegratedImu>> {
        &self.segments
    }

    pub fn scale(&self) -> Option<f64> {
        self.values.scale(&VariableKey::scale()).ok()
    }

    pub fn gravity(&self) -> Option<GravityRotation> {
        self.values.gravity(&VariableKey::gravity()).ok().copied()
    }

    /// Gravity direction in the visual frame.
    pub fn gravity_direction(&self) -> Option<Vector3<f64>> {
        self.gravity().map(|g| g.rotation().rotate(&Vector3::new(0.0, 0.0, -1.0)))
    }

    /// Root mean squared photometric error before the last bundle adjustment.
    pub fn e_photo(&self) -> f64 {
        self.e_photo
    }

    pub fn photometric_weight(&self) -> f64 {
        self.photometric_weight
    }

    /// Multiplies the current scale estimate, e.g. to test the replacement.
    pub fn perturb_scale(&mut self, factor: f64) -> Result<()> {
        let s = self.values.scale(&VariableKey::scale())?;
        self.values.insert(VariableKey::scale(), StateBlock::Scale(s * factor));
        Ok(())
    }

    /// Current energy of the main graph including active photometric
    /// factors at the current dynamic weight.
    pub fn total_energy(&self) -> Result<f64> {
        let mut g = self.graph.clone();
        for f in self.photometric_factors(self.photometric_weight) {
            g.add(f);
        }
        g.cost(&self.values)
    }

    fn frame_pose(&self, id: u32) -> Result<RigidTransform> {
        match self.values.pose(&VariableKey::pose(id)) {
            Ok(p) => Ok(*p),
            Err(_) => self
                .frames
                .get(&id)
                .map(|r| r.pose)
                .ok_or_else(|| Error::Structural(format!("unknown keyframe {id}"))),
        }
    }

    fn imu_slice(&self, t0: f64, t1: f64) -> &[ImuMeasurement] {
        let lo = self.imu.partition_point(|m| m.timestamp < t0).saturating_sub(1);
        let hi = (self.imu.partition_point(|m| m.timestamp <= t1) + 1).min(self.imu.len());
        &self.imu[lo..hi.max(lo)]
    }

    fn preintegrate(&self, i: u32, j: u32, bias: ImuBias) -> Result<PreintegratedImu> {
        let (t0, t1) = (self.frames[&i].timestamp, self.frames[&j].timestamp);
        PreintegratedImu::from_measurements(self.imu_slice(t0, t1), t0, t1, bias, self.config.imu_noise)
            .map_err(|e| match e {
                Error::Data(msg) => {
                    log::warn!("IMU segment {i}->{j}: {msg}");
                    Error::DataGap { from: i, to: j }
                }
                other => other,
            })
    }

    fn bias_of(&self, frame: u32) -> Option<ImuBias> {
        self.values.vector(&VariableKey::bias(frame)).ok().map(|v| ImuBias::from_slice(v.as_slice()))
    }

    fn has_imu(&self) -> bool {
        self.config.use_imu && !self.imu.is_empty()
    }

    /// Adds a keyframe, optimizes, runs the initializer and marginalizes.
    pub fn process_keyframe(&mut self, input: KeyframeInput, source: &dyn ObservationSource) -> Result<()> {
        let id = input.id;
        let prev = self.frames.keys().next_back().copied();
        if let Some(p) = prev {
            if id != p + 1 {
                return Err(Error::Structural(format!("keyframe {id} does not follow keyframe {p}")));
            }
        }
        if !(input.exposure_time > 0.0) {
            return Err(Error::Data(format!("keyframe {id}: exposure time must be positive")));
        }
        let pose = match prev {
            None => RigidTransform::identity(),
            Some(p) => input.tracker_relative * self.frame_pose(p)?,
        };
        self.values.insert(VariableKey::pose(id), StateBlock::Pose(pose));
        self.values.insert(VariableKey::affine(id), StateBlock::vector(&[0.0, 0.0]));
        let w = self.config.affine_prior_weights;
        self.graph.add(PriorFactor::new(
            VariableKey::affine(id),
            StateBlock::vector(&[0.0, 0.0]),
            DMatrix::from_diagonal(&DVector::from_column_slice(&w)),
        )?);
        match (prev, self.frames.len()) {
            (None, _) => self.graph.add(PriorFactor::isotropic(
                VariableKey::pose(id),
                StateBlock::Pose(pose),
                self.config.first_pose_weight,
            )),
            (Some(p), 1) => {
                let c0 = self.frame_pose(p)?.inverse().translation;
                let baseline = (pose.inverse().translation - c0).norm();
                if baseline > 1e-9 {
                    self.graph.add(ScaleGaugeFactor::new(p, id, baseline, self.config.scale_gauge_weight));
                } else {
                    log::warn!("no baseline between the first two keyframes; the visual scale is not fixed");
                }
            }
            _ => {}
        }
        self.delayed.add_frame(id)?;
        self.frames.insert(
            id,
            FrameRecord { timestamp: input.timestamp, exposure_time: input.exposure_time, pose, affine: [0.0; 2], active: true },
        );

        if let (Some(p), true) = (prev, self.has_imu()) {
            let bias = self.bias_of(p).unwrap_or_default();
            let pre = Arc::new(self.preintegrate(p, id, bias)?);
            self.segments.insert(p, pre);
            if self.state.phase >= Phase::Initialized && self.bias_of(p).is_some() {
                self.attach_inertial_frame(p, id)?;
            }
        }

        for lm in input.landmarks {
            if lm.host != id || !(lm.idepth > 0.0) {
                return Err(Error::Data(format!("landmark {} is not a valid landmark of keyframe {id}", lm.id)));
            }
            self.values.insert(VariableKey::inverse_depth(lm.id), StateBlock::vector(&[lm.idepth]));
            let mut observations = BTreeMap::new();
            for &f in &self.window {
                if let Some(img) = source.observation(lm.id, f) {
                    observations.insert(f, Arc::new(img));
                }
            }
            self.landmarks.insert(lm.id, ActiveLandmark { landmark: Arc::new(lm), observations });
        }
        for (lid, lm) in self.landmarks.iter_mut() {
            if lm.landmark.host != id {
                if let Some(img) = source.observation(*lid, id) {
                    lm.observations.insert(id, Arc::new(img));
                }
            }
        }
        self.window.push(id);

        let start = Instant::now();
        self.bundle_adjust()?;
        self.stats.bundle_adjustment_seconds += start.elapsed().as_secs_f64();
        let mut event = String::new();
        if self.has_imu() {
            let start = Instant::now();
            event = self.initializer_step()?;
            self.stats.initializer_seconds += start.elapsed().as_secs_f64();
        }
        self.marginalize_as_needed()?;

        self.timeline.push(TimelineRow {
            keyframe: id,
            timestamp: input.timestamp,
            phase: self.state.phase.to_string(),
            scale: self.scale(),
            scale_variance: self.state.scale_variance,
            e_photo: self.e_photo,
            photometric_weight: self.photometric_weight,
            window: self.window.len(),
            pending: self.delayed.pending().len(),
            event,
        });
        Ok(())
    }

    /// Adds velocity and bias of `j` (predicted from `i`) and the IMU and
    /// bias random walk factors between them.
    fn attach_inertial_frame(&mut self, i: u32, j: u32) -> Result<()> {
        let pre = self.segments.get(&i).cloned().ok_or(Error::DataGap { from: i, to: j })?;
        let s = self.values.scale(&VariableKey::scale())?;
        let g = *self.values.gravity(&VariableKey::gravity())?;
        let pi = omega_transform(self.values.pose(&VariableKey::pose(i))?, s, &g, &self.t_cam_imu);
        let bias = self.bias_of(i).unwrap_or_default();
        let vi = Vector3::from_column_slice(self.values.vector(&VariableKey::velocity(i))?.as_slice());
        let state = ImuState { rotation: pi.pose.rotation, position: pi.pose.translation, velocity: vi, bias };
        let (pred, _) = pre.predict(&state, &self.config.imu_noise.gravity());
        if !self.values.contains(&VariableKey::velocity(j)) {
            self.values.insert(VariableKey::velocity(j), StateBlock::vector(pred.velocity.as_slice()));
        }
        if !self.values.contains(&VariableKey::bias(j)) {
            self.values.insert(VariableKey::bias(j), StateBlock::vector(&bias.to_array()));
        }
        self.add_imu_pair(i, j, pre)
    }

    fn add_imu_pair(&mut self, i: u32, j: u32, pre: Arc<PreintegratedImu>) -> Result<()> {
        if self.imu_pairs.insert((i, j)) {
            self.graph.add(BiasRandomWalkFactor::new(i, j, &pre.noise, pre.dt));
            self.graph.add(ImuFactor::new(i, j, pre, self.t_cam_imu)?);
        }
        Ok(())
    }

    fn photometric_factors(&self, weight: f64) -> Vec<PhotometricFactor> {
        let mut out = Vec::new();
        for lm in self.landmarks.values() {
            let host_exposure = self.frames[&lm.landmark.host].exposure_time;
            for (target, img) in &lm.observations {
                if self.frames.get(target).is_some_and(|f| f.active) {
                    out.push(PhotometricFactor::new(lm.landmark.clone(), img.clone(), host_exposure, self.camera, weight));
                }
            }
        }
        out
    }

    /// One LM bundle adjustment over the window. The dynamic photometric
    /// weight is computed from the error before the step and held fixed.
    pub fn bundle_adjust(&mut self) -> Result<()> {
        let mut factors = self.photometric_factors(1.0);
        let (energy, n) = photometric_energy(&factors, &self.values)?;
        self.e_photo = if n > 0 { (energy / n as f64).sqrt() } else { 0.0 };
        let w = dynamic_weight(self.e_photo, self.config.photometric_lambda, self.config.photometric_theta);
        self.photometric_weight = w;
        let mut g = self.graph.clone();
        for f in factors.iter_mut() {
            f.weight_scale = w;
        }
        for f in factors {
            g.add(f);
        }
        let lm = LmConfig { max_iterations: self.config.ba_iterations, ..self.config.init_lm.clone() };
        let sol = solve_lm(&g, &self.values, &lm, &BTreeSet::new()).map_err(|e| match e {
            Error::Diverged { .. } => Error::TrackingLost(format!("bundle adjustment diverged: {e}")),
            other => other,
        })?;
        if !sol.report.final_cost.is_finite() {
            return Err(Error::TrackingLost("non-finite bundle adjustment cost".into()));
        }
        self.values = sol.values;
        for id in &self.window {
            if let (Some(rec), Ok(p)) = (self.frames.get_mut(id), self.values.pose(&VariableKey::pose(*id))) {
                rec.pose = *p;
            }
        }
        Ok(())
    }

    fn initializer_step(&mut self) -> Result<String> {
        match self.state.phase {
            Phase::NoImu | Phase::CoarseReady => {
                if self.frames.len() < self.config.min_coarse_keyframes.max(2) {
                    return Ok(String::new());
                }
                self.stats.coarse_attempts += 1;
                let coarse = match self.coarse_imu_init() {
                    Ok(c) => c,
                    Err(e @ (Error::Unobservable(_) | Error::Diverged { .. } | Error::DegenerateCovariance(_))) => {
                        log::debug!("coarse initialization failed: {e}");
                        return Ok("coarse_failed".into());
                    }
                    Err(e) => return Err(e),
                };
                self.state.scale_variance = Some(coarse.scale_variance);
                log::debug!(
                    "coarse init over {} keyframes: scale {:.4}, variance {:.3e}",
                    coarse.frames.len(),
                    coarse.scale,
                    coarse.scale_variance
                );
                if coarse.scale_variance >= self.config.theta_init {
                    return Ok(String::new());
                }
                self.state.phase = Phase::CoarseReady;
                let mut estimates = GraphValues::new();
                estimates.insert(VariableKey::scale(), StateBlock::Scale(coarse.scale));
                estimates.insert(VariableKey::gravity(), StateBlock::Gravity(coarse.gravity));
                for (f, v) in &coarse.velocities {
                    estimates.insert(VariableKey::velocity(*f), StateBlock::vector(v.as_slice()));
                    estimates.insert(VariableKey::bias(*f), StateBlock::vector(&coarse.bias.to_array()));
                }
                self.inertial_estimates.extend_from(&estimates);
                if self.gravity_prior.is_none() {
                    self.gravity_prior = Some(Arc::new(PriorFactor::isotropic(
                        VariableKey::gravity(),
                        StateBlock::Gravity(coarse.gravity),
                        self.config.gravity_prior_weight,
                    )));
                }
                Ok(if self.run_pgba()? { "pgba".into() } else { "pgba_failed".into() })
            }
            Phase::Initialized if self.state.reinit_attempts < self.config.max_reinit_attempts => {
                self.state.reinit_attempts += 1;
                Ok(if self.run_pgba()? { "pgba".into() } else { "pgba_failed".into() })
            }
            _ => Ok(match self.maybe_replace_marginalization()? {
                ReplacementOutcome::NotNeeded { .. } => String::new(),
                ReplacementOutcome::Disabled { .. } => "replacement_disabled".into(),
                ReplacementOutcome::Replaced { .. } => "replacement".into(),
            }),
        }
    }

    /// Coarse IMU initialization over the most recent keyframes with fixed
    /// poses, one shared bias, velocities, scale and gravity direction.
    pub fn coarse_imu_init(&self) -> Result<CoarseInit> {
        let all: Vec<u32> = self.frames.keys().copied().collect();
        let n = all.len().min(self.config.delay.max(2));
        if n < 2 {
            return Err(Error::InsufficientData { needed: 2, got: n });
        }
        let ids = &all[all.len() - n..];
        let (scale0, gravity, velocities0) = self.linear_inertial_guess(ids)?;

        let mut graph = FactorGraph::new();
        let mut values = GraphValues::new();
        let mut fixed = BTreeSet::new();
        let shared = VariableKey::bias(SHARED_BIAS);
        for w in ids.windows(2) {
            let pre = self.segments.get(&w[0]).cloned().ok_or(Error::DataGap { from: w[0], to: w[1] })?;
            graph.add(ImuFactor::with_bias_key(w[0], w[1], shared, pre, self.t_cam_imu)?);
        }
        graph.add(PriorFactor::isotropic(shared, StateBlock::vector(&[0.0; 6]), self.config.coarse_bias_prior_weight));
        for (&f, v) in ids.iter().zip(&velocities0) {
            values.insert(VariableKey::pose(f), StateBlock::Pose(self.frame_pose(f)?));
            values.insert(VariableKey::velocity(f), StateBlock::vector(v.as_slice()));
            fixed.insert(VariableKey::pose(f));
        }
        values.insert(shared, StateBlock::vector(&[0.0; 6]));
        values.insert(VariableKey::scale(), StateBlock::Scale(scale0));
        values.insert(VariableKey::gravity(), StateBlock::Gravity(gravity));

        let sol = solve_lm(&graph, &values, &self.config.init_lm, &fixed)?;
        log::trace!(
            "coarse LM: {} iterations, cost {:.3e} -> {:.3e}, converged {}",
            sol.report.iterations,
            sol.report.initial_cost,
            sol.report.final_cost,
            sol.report.converged
        );
        let system = graph.linearize_with(&sol.values, &fixed)?;
        let var_log = covariance_block(&system, VariableKey::scale())?[(0, 0)];
        let scale = sol.values.scale(&VariableKey::scale())?;
        let velocities = ids
            .iter()
            .map(|f| {
                let v = sol.values.vector(&VariableKey::velocity(*f))?;
                Ok((*f, Vector3::from_column_slice(v.as_slice())))
            })
            .collect::<Result<_>>()?;
        Ok(CoarseInit {
            frames: ids.to_vec(),
            scale,
            scale_variance: var_log,
            gravity: *sol.values.gravity(&VariableKey::gravity())?,
            bias: ImuBias::from_slice(sol.values.vector(&shared)?.as_slice()),
            velocities,
        })
    }

    /// Closed-form guess of scale, gravity and velocities (inertial frame)
    /// from the fixed visual poses, ignoring the bias. The position and
    /// velocity deltas of every segment are linear in
    /// `[s, g_V, v_0 … v_n]` when expressed in the visual frame.
    fn linear_inertial_guess(&self, ids: &[u32]) -> Result<(f64, GravityRotation, Vec<Vector3<f64>>)> {
        let n = ids.len();
        let cols = 4 + 3 * n;
        let mut a = DMatrix::zeros(6 * (n - 1), cols);
        let mut b = DVector::zeros(6 * (n - 1));
        let mut rot = Vec::with_capacity(n);
        let mut centers = Vec::with_capacity(n);
        let mut levers = Vec::with_capacity(n);
        for &f in ids {
            let wc = self.frame_pose(f)?.inverse();
            rot.push((wc.rotation * self.t_cam_imu.rotation).matrix());
            centers.push(wc.translation);
            levers.push(wc.rotation.rotate(&self.t_cam_imu.translation));
        }
        for k in 0..n - 1 {
            let pre = self.segments.get(&ids[k]).ok_or(Error::DataGap { from: ids[k], to: ids[k + 1] })?;
            let (_, dv, dp) = pre.corrected_deltas(&ImuBias::default());
            let dt = pre.dt;
            let (r0, r1) = (6 * k, 6 * k + 3);
            let w = 1.0 / dt;
            let vi = 4 + 3 * k;
            let vj = vi + 3;
            for d in 0..3 {
                a[(r0 + d, 0)] = w * (centers[k + 1][d] - centers[k][d]);
                a[(r0 + d, 1 + d)] = -w * 0.5 * dt * dt;
                a[(r0 + d, vi + d)] = -w * dt;
                a[(r1 + d, 1 + d)] = -dt;
                a[(r1 + d, vi + d)] = -1.0;
                a[(r1 + d, vj + d)] = 1.0;
            }
            let pos = rot[k] * dp - (levers[k + 1] - levers[k]);
            let vel = rot[k] * dv;
            b.rows_mut(r0, 3).copy_from(&(pos * w));
            b.rows_mut(r1, 3).copy_from(&vel);
        }
        let x = a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|_| Error::Unobservable(VariableKey::scale()))?;
        let g_v = Vector3::new(x[1], x[2], x[3]);
        if !(x[0] > 0.0) || !(g_v.norm() > 0.0) {
            return Err(Error::Unobservable(VariableKey::scale()));
        }
        let gravity = GravityRotation::new(Rotation3::between(&Vector3::new(0.0, 0.0, -1.0), &g_v.normalize()));
        let to_inertial = gravity.rotation().inverse();
        let velocities =
            (0..n).map(|k| to_inertial.rotate(&Vector3::new(x[4 + 3 * k], x[5 + 3 * k], x[6 + 3 * k]))).collect();
        Ok((x[0], gravity, velocities))
    }

    /// Current values merged over older inertial estimates.
    pub fn estimates(&self) -> GraphValues {
        let mut e = self.inertial_estimates.clone();
        e.extend_from(&self.values);
        e
    }

    /// Builds the PGBA graph from the delayed graph at the current
    /// estimates, including the pose/affine-only factors of active frames
    /// (gauge fixes) and the gravity prior. With `with_visual` the active
    /// photometric factors and their inverse depths are added too.
    pub fn build_pgba(&self, with_visual: bool) -> Result<PgbaGraph> {
        let mut estimates = self.estimates();
        let plan = self.delayed.pgba_plan().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
        for &f in &plan.frames {
            for (key, zero) in [(VariableKey::velocity(f), 3), (VariableKey::bias(f), 6)] {
                if !estimates.contains(&key) {
                    log::warn!("no estimate for {key}; starting from zero");
                    estimates.insert(key, StateBlock::vector(&vec![0.0; zero]));
                }
            }
        }
        let mut pgba = self.delayed.populate_with_imu(&self.segments, &self.t_cam_imu, &estimates)?;
        for f in &self.graph.factors {
            if f.keys().iter().all(|k| matches!(k.kind, VariableKind::Pose | VariableKind::Affine)) {
                pgba.graph.add_shared(f.clone());
            }
        }
        if let Some(g) = &self.gravity_prior {
            pgba.graph.add_shared(g.clone());
        }
        if with_visual {
            for f in self.photometric_factors(self.photometric_weight) {
                pgba.graph.add(f);
            }
        }
        for k in pgba.graph.keys() {
            if !pgba.values.contains(&k) {
                pgba.values.insert(k, estimates.get(&k)?.clone());
            }
        }
        Ok(pgba)
    }

    /// Optimizes the PGBA graph, readvances it and installs the result.
    /// Returns `false` if the optimization failed (nothing changes).
    pub fn run_pgba(&mut self) -> Result<bool> {
        if self.delayed.priors().is_empty() {
            return Ok(false);
        }
        let pgba = self.build_pgba(true)?;
        let sol = match solve_lm(&pgba.graph, &pgba.values, &self.config.init_lm, &BTreeSet::new()) {
            Ok(s) => s,
            Err(e @ Error::Diverged { .. }) => {
                log::warn!("PGBA failed: {e}");
                return Ok(false);
            }
            Err(e) => return Err(e),
        };
        let system = pgba.graph.linearize(&sol.values)?;
        let var_log = match covariance_block(&system, VariableKey::scale()) {
            Ok(c) => c[(0, 0)],
            Err(e @ Error::Unobservable(_)) => {
                log::warn!("PGBA scale covariance: {e}");
                return Ok(false);
            }
            Err(e) => return Err(e),
        };
        let readvanced = self.delayed.readvance(&pgba.graph, &sol.values)?;
        self.install(readvanced.prior, &sol.values, &pgba.plan.frames)?;
        let s = sol.values.scale(&VariableKey::scale())?;
        let variance = var_log;
        self.state.scale_variance = Some(variance);
        self.state.s_fej = Some(s);
        self.stats.pgba_runs += 1;
        if self.stats.initialized_at.is_none() {
            self.stats.initialized_at = self.window.last().copied();
        }
        self.state.phase = if variance < self.config.theta_reinit { Phase::Reinitialized } else { Phase::Initialized };
        log::info!("PGBA: scale {s:.4}, variance {variance:.3e}, phase {}", self.state.phase);
        Ok(true)
    }

    fn install(&mut self, prior: MarginalizationPrior, solution: &GraphValues, connected: &[u32]) -> Result<()> {
        self.graph.priors = vec![prior];
        let active: BTreeSet<u32> = self.window.iter().copied().collect();
        for (k, v) in solution.iter() {
            let keep = match k.kind {
                VariableKind::Scale | VariableKind::GravityRotation => true,
                VariableKind::InverseDepth => self.landmarks.contains_key(&k.index),
                _ => active.contains(&k.index),
            };
            if keep {
                self.values.insert(*k, v.clone());
            }
        }
        for w in connected.windows(2) {
            if active.contains(&w[0]) && active.contains(&w[1]) {
                let pre = self.segments.get(&w[0]).cloned().ok_or(Error::DataGap { from: w[0], to: w[1] })?;
                self.add_imu_pair(w[0], w[1], pre)?;
            }
        }
        if let Some(g) = &self.gravity_prior {
            if !self.graph.factors.iter().any(|f| Arc::ptr_eq(f, g)) {
                self.graph.add_shared(g.clone());
            }
        }
        let mut inertial = solution.clone();
        inertial.retain(|k, _| k.kind != VariableKind::InverseDepth);
        self.inertial_estimates.extend_from(&inertial);
        self.delayed.relinearize_priors(solution)?;
        self.delayed.update_snapshots(solution);
        Ok(())
    }

    /// Ratio `max(s, s_fej) / min(s, s_fej)` between the current scale and
    /// the scale the marginalization prior was linearized at.
    pub fn scale_ratio(&self) -> Option<f64> {
        let (s_fej, s) = (self.state.s_fej?, self.scale()?);
        Some(s.max(s_fej) / s.min(s_fej))
    }

    /// IMU pairs in the current prior and those a rebuilt prior would hold
    /// (plan pairs touching a pending keyframe).
    pub fn retention(&self) -> Result<(BTreeSet<(u32, u32)>, BTreeSet<(u32, u32)>)> {
        let plan = self.delayed.pgba_plan().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
        let old = self.graph.priors.iter().flat_map(|p| p.imu_pairs.iter().copied()).collect();
        let pending: BTreeSet<u32> = self.delayed.pending().iter().copied().collect();
        let new = plan
            .imu_pairs
            .iter()
            .filter(|(i, j)| pending.contains(i) || pending.contains(j))
            .copied()
            .collect();
        Ok((old, new))
    }

    /// Rebuilds the prior from the delayed graph when the scale moved more
    /// than `theta_scale` from the prior's linearization point, unless too
    /// many IMU factors would be lost.
    pub fn maybe_replace_marginalization(&mut self) -> Result<ReplacementOutcome> {
        let Some(ratio) = self.scale_ratio() else {
            return Ok(ReplacementOutcome::NotNeeded { ratio: 1.0 });
        };
        if ratio <= self.config.theta_scale {
            return Ok(ReplacementOutcome::NotNeeded { ratio });
        }
        let (old, new) = self.retention()?;
        if !replacement_allowed(&old, &new, self.config.theta_lost) {
            let lost = old.difference(&new).count();
            log::info!("marginalization replacement disabled: {lost} of {} IMU factors would be lost", old.len());
            self.stats.replacements_disabled += 1;
            return Ok(ReplacementOutcome::Disabled { ratio, lost, total: old.len() });
        }
        self.replace_marginalization()?;
        log::info!("marginalization replaced at scale ratio {ratio:.4}");
        Ok(ReplacementOutcome::Replaced { ratio })
    }

    /// Replaces the main prior by the readvanced delayed graph with IMU
    /// factors, linearized at the current estimates.
    pub fn replace_marginalization(&mut self) -> Result<()> {
        if self.state.phase < Phase::Initialized {
            return Err(Error::Structural("no inertial estimates to build a replacement from".into()));
        }
        let pgba = self.build_pgba(false)?;
        let readvanced = self.delayed.readvance(&pgba.graph, &pgba.values)?;
        self.install(readvanced.prior, &pgba.values, &pgba.plan.frames)?;
        self.state.s_fej = self.scale();
        self.stats.replacements += 1;
        Ok(())
    }

    fn window_stats(&self) -> Result<Vec<WindowFrame>> {
        let newest = *self.window.last().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
        let newest_pose = *self.values.pose(&VariableKey::pose(newest))?;
        let mut out = Vec::with_capacity(self.window.len());
        for &f in &self.window {
            let pose = *self.values.pose(&VariableKey::pose(f))?;
            let mut hosted = 0;
            let mut visible = 0;
            for lm in self.landmarks.values().filter(|l| l.landmark.host == f) {
                hosted += 1;
                if f == newest || !lm.observations.contains_key(&newest) {
                    continue;
                }
                let idepth = self.values.vector(&VariableKey::inverse_depth(lm.landmark.id))?[0];
                let p = project(&lm.landmark.pixel, idepth, &pose, &newest_pose, &self.camera);
                if idepth > 0.0 && p.visible {
                    visible += 1;
                }
            }
            out.push(WindowFrame {
                id: f,
                position: pose.inverse().translation,
                hosted_points: hosted,
                visible_in_newest: visible,
            });
        }
        Ok(out)
    }

    fn marginalize_as_needed(&mut self) -> Result<()> {
        while let Some(victim) = select_marginalization_victim(&self.window_stats()?, self.config.max_frames) {
            self.marginalize(victim)?;
        }
        Ok(())
    }

    /// Marginalizes keyframe `frame` from the main graph and mirrors the
    /// visual part into the delayed graph.
    pub fn marginalize(&mut self, frame: u32) -> Result<()> {
        if !self.window.contains(&frame) {
            return Err(Error::Structural(format!("keyframe {frame} is not active")));
        }
        let start = Instant::now();
        let hosted: Vec<VariableKey> = self
            .landmarks
            .values()
            .filter(|l| l.landmark.host == frame)
            .map(|l| VariableKey::inverse_depth(l.landmark.id))
            .collect();
        let mut g = self.graph.clone();
        for f in self.photometric_factors(self.photometric_weight) {
            g.add(f);
        }
        let result = marginalize_frame(&mut g, &self.values, frame, &hosted)?;
        g.factors.retain(|f| !f.keys().iter().any(|k| k.kind == VariableKind::InverseDepth));
        self.graph = g;
        self.stats.main_marginalization_seconds.push(start.elapsed().as_secs_f64());
        self.stats.main_blanket_sizes.push(result.blanket.len());

        let start = Instant::now();
        let mut frame_values = GraphValues::new();
        for (k, v) in self.values.iter() {
            if k.is_frame_state(frame) {
                frame_values.insert(*k, v.clone());
            }
        }
        for p in result.visual_priors() {
            self.delayed.add_prior(p)?;
        }
        self.delayed.record_marginalization(frame, &frame_values)?;
        self.stats.delayed_bookkeeping_seconds.push(start.elapsed().as_secs_f64());

        self.inertial_estimates.extend_from(&frame_values);
        if let Some(rec) = self.frames.get_mut(&frame) {
            rec.pose = *frame_values.pose(&VariableKey::pose(frame))?;
            if let Ok(a) = frame_values.vector(&VariableKey::affine(frame)) {
                rec.affine = [a[0], a[1]];
            }
            rec.active = false;
        }
        for k in frame_values.keys() {
            self.values.remove(k);
        }
        for k in &hosted {
            self.values.remove(k);
            self.landmarks.remove(&k.index);
        }
        for lm in self.landmarks.values_mut() {
            lm.observations.remove(&frame);
        }
        self.imu_pairs.retain(|(i, j)| *i != frame && *j != frame);
        self.window.retain(|f| *f != frame);
        Ok(())
    }

    /// Keyframe trajectory: IMU poses in the inertial frame once initialized,
    /// otherwise in the visual frame with the lever arm taken at unit scale.
    pub fn trajectory(&self) -> Result<Vec<TimedPose>> {
        let inertial = self.state.phase >= Phase::Initialized;
        let (s, g) = match (inertial, self.scale(), self.gravity()) {
            (true, Some(s), Some(g)) => (s, g),
            _ => (1.0, GravityRotation::new(Rotation3::identity())),
        };
        self.frames
            .iter()
            .map(|(id, rec)| {
                let pose = self.frame_pose(*id)?;
                Ok(TimedPose { timestamp: rec.timestamp, pose: omega_transform(&pose, s, &g, &self.t_cam_imu).pose })
            })
            .collect()
    }

    pub fn full_state(&self) -> Result<FullState> {
        let mut frames = Vec::with_capacity(self.frames.len());
        for (id, rec) in &self.frames {
            let active = rec.active;
            let affine = match self.values.vector(&VariableKey::affine(*id)) {
                Ok(a) if active => [a[0], a[1]],
                _ => rec.affine,
            };
            let est = self.estimates();
            frames.push(FrameState {
                id: *id,
                timestamp: rec.timestamp,
                pose: self.frame_pose(*id)?,
                affine,
                velocity: est.vector(&VariableKey::velocity(*id)).ok().map(|v| Vector3::from_column_slice(v.as_slice())),
                bias: est.vector(&VariableKey::bias(*id)).ok().map(|v| ImuBias::from_slice(v.as_slice())),
                active,
            });
        }
        let inverse_depths = self
            .landmarks
            .keys()
            .filter_map(|l| self.values.vector(&VariableKey::inverse_depth(*l)).ok().map(|v| (*l, v[0])))
            .collect();
        Ok(FullState { scale: self.scale(), gravity: self.gravity(), frames, inverse_depths })
    }
}

/// Outcome of running the estimator over a simulated scene.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trajectory: Vec<TimedPose>,
    pub phase: Phase,
    pub scale: Option<f64>,
    pub gravity_direction: Option<Vector3<f64>>,
    pub timeline: Vec<TimelineRow>,
    pub stats: PipelineStats,
}

/// Runs the estimator over every keyframe of a scene.
pub fn run_scene(
    config: &PipelineConfig,
    scene: &crate::sim::Scene,
    imu: &[ImuMeasurement],
) -> Result<RunOutput> {
    let mut pipeline = Pipeline::new(config.clone(), scene.camera, scene.t_cam_imu, imu.to_vec())?;
    for kf in &scene.keyframes {
        pipeline.process_keyframe(KeyframeInput::from_scene(scene, kf.id)?, scene)?;
    }
    Ok(RunOutput {
        trajectory: pipeline.trajectory()?,
        phase: pipeline.phase(),
        scale: pipeline.scale(),
        gravity_direction: pipeline.gravity_direction(),
        timeline: pipeline.timeline().to_vec(),
        stats: pipeline.stats().clone(),
    })
}
