//! Synthetic visual-inertial datasets.
//!
//! Motion is an analytic function of time (sums of constant, linear and
//! sinusoidal terms per position and Euler-angle channel), so IMU samples
//! are exact derivatives plus bias random walk and white noise. The visual
//! side is a set of landmarks hosted by keyframes, each with a smooth
//! intensity patch; target observations are generated from the true
//! geometry on demand with deterministic per-observation noise.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{project, CameraModel, Exposure, Landmark, TargetImage, Texture, BORDER, PATTERN};
use crate::imu::{ImuBias, ImuMeasurement, ImuNoiseParams};
use crate::lie::{RigidTransform, Rotation3};

/// One additive term of a scalar motion channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Term {
    Constant { value: f64 },
    Linear { rate: f64 },
    /// `amplitude · sin(2π·frequency·t + phase)`
    Sine { amplitude: f64, frequency: f64, phase: f64 },
}

impl Term {
    /// Value and first two time derivatives.
    pub fn eval(&self, t: f64) -> [f64; 3] {
        match *self {
            Term::Constant { value } => [value, 0.0, 0.0],
            Term::Linear { rate } => [rate * t, rate, 0.0],
            Term::Sine { amplitude, frequency, phase } => {
                let w = 2.0 * std::f64::consts::PI * frequency;
                let (s, c) = (w * t + phase).sin_cos();
                [amplitude * s, amplitude * w * c, -amplitude * w * w * s]
            }
        }
    }
}

fn channel(terms: &[Term], t: f64) -> [f64; 3] {
    terms.iter().fold([0.0; 3], |acc, term| {
        let v = term.eval(t);
        [acc[0] + v[0], acc[1] + v[1], acc[2] + v[2]]
    })
}

/// Motion over a time interval. Terms are evaluated at absolute time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// End time in seconds; `None` for an open-ended last segment.
    pub until: Option<f64>,
    /// IMU position in the gravity-aligned frame, x/y/z.
    pub position: [Vec<Term>; 3],
    /// Body orientation as yaw/pitch/roll (Z-Y-X).
    pub attitude: [Vec<Term>; 3],
}

/// Kinematic state of the IMU body at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionSample {
    /// Body-to-world rotation.
    pub rotation: Rotation3,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    /// Angular velocity in the body frame.
    pub angular_velocity: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub segments: Vec<Segment>,
}

impl Trajectory {
    /// Checks that consecutive segments join with continuous value, first
    /// and second derivative in every channel.
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Config("trajectory has no segments".into()));
        }
        for (i, pair) in self.segments.windows(2).enumerate() {
            let t = pair[0]
                .until
                .ok_or_else(|| Error::Config(format!("segment {i} is open-ended but not last")))?;
            if let Some(next_end) = pair[1].until {
                if next_end <= t {
                    return Err(Error::Config(format!("segment {} ends before it starts", i + 1)));
                }
            }
            let a = pair[0].position.iter().chain(&pair[0].attitude);
            let b = pair[1].position.iter().chain(&pair[1].attitude);
            for (ca, cb) in a.zip(b) {
                let (va, vb) = (channel(ca, t), channel(cb, t));
                for k in 0..3 {
                    if (va[k] - vb[k]).abs() > 1e-9 * va[k].abs().max(1.0) {
                        return Err(Error::Config(format!(
                            "segments {i} and {} do not join twice-differentiably at t = {t}",
                            i + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn segment_at(&self, t: f64) -> &Segment {
        self.segments
            .iter()
            .find(|s| s.until.is_none_or(|end| t < end))
            .unwrap_or_else(|| self.segments.last().expect("validated trajectory"))
    }

    pub fn sample(&self, t: f64) -> MotionSample {
        let seg = self.segment_at(t);
        let p: Vec<[f64; 3]> = seg.position.iter().map(|c| channel(c, t)).collect();
        let [yaw, pitch, roll] = [0, 1, 2].map(|k| channel(&seg.attitude[k], t));
        let (sr, cr) = roll[0].sin_cos();
        let (sp, cp) = pitch[0].sin_cos();
        let angular_velocity = Vector3::new(
            roll[1] - yaw[1] * sp,
            pitch[1] * cr + yaw[1] * sr * cp,
            -pitch[1] * sr + yaw[1] * cr * cp,
        );
        MotionSample {
            rotation: Rotation3::from_euler_zyx(yaw[0], pitch[0], roll[0]),
            position: Vector3::new(p[0][0], p[1][0], p[2][0]),
            velocity: Vector3::new(p[0][1], p[1][1], p[2][1]),
            acceleration: Vector3::new(p[0][2], p[1][2], p[2][2]),
            angular_velocity,
        }
    }

    pub fn stationary() -> Self {
        Self { segments: vec![Segment::default()] }
    }

    /// Straight motion at constant velocity along the body x axis.
    pub fn constant_velocity(speed: f64) -> Self {
        let mut seg = Segment::default();
        seg.position[0].push(Term::Linear { rate: speed });
        Self { segments: vec![seg] }
    }

    /// Circle of radius `radius` at angular rate `rate` (rad/s), facing
    /// along the direction of travel.
    pub fn circle(radius: f64, rate: f64) -> Self {
        let f = rate / (2.0 * std::f64::consts::PI);
        let mut seg = Segment::default();
        seg.position[0].push(Term::Sine { amplitude: radius, frequency: f, phase: 0.0 });
        seg.position[1].push(Term::Sine { amplitude: -radius, frequency: f, phase: std::f64::consts::FRAC_PI_2 });
        seg.attitude[0].push(Term::Linear { rate });
        Self { segments: vec![seg] }
    }

    /// Hand-held style motion with sinusoidal excitation on every axis.
    pub fn excited() -> Self {
        let sine = |amplitude, frequency, phase| Term::Sine { amplitude, frequency, phase };
        let seg = Segment {
            until: None,
            position: [
                vec![sine(0.8, 0.21, 0.0), sine(0.15, 0.73, 0.4)],
                vec![sine(0.7, 0.13, 1.0), sine(0.1, 0.61, 2.0)],
                vec![sine(0.3, 0.17, 0.3), sine(0.05, 0.9, 1.1)],
            ],
            attitude: [
                vec![sine(0.35, 0.07, 0.0), sine(0.05, 0.5, 0.7)],
                vec![sine(0.12, 0.11, 0.5)],
                vec![sine(0.12, 0.09, 1.5)],
            ],
        };
        Self { segments: vec![seg] }
    }
}

impl Default for Trajectory {
    fn default() -> Self {
        Self::excited()
    }
}

/// Camera-from-IMU extrinsics with the camera looking along body x.
pub fn default_t_cam_imu() -> RigidTransform {
    let r_imu_cam = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let t_imu_cam = Vector3::new(0.05, 0.0, 0.02);
    let r_ci = r_imu_cam.transpose();
    RigidTransform::new(Rotation3::from_matrix(&r_ci), -(r_ci * t_imu_cam))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    /// Seconds.
    pub duration: f64,
    pub imu_rate: f64,
    pub keyframe_rate: f64,
    pub trajectory: Trajectory,
    /// Ratio between metric and visual-frame lengths.
    pub true_scale: f64,
    pub camera: CameraModel,
    pub t_cam_imu: RigidTransform,
    pub imu_noise: ImuNoiseParams,
    /// Adds white noise and bias random walk to the IMU samples.
    pub imu_noise_enabled: bool,
    pub initial_bias: ImuBias,
    /// Intensity noise standard deviation.
    pub pixel_noise: f64,
    pub points_per_keyframe: usize,
    /// Metric depth range of new landmarks.
    pub depth_range: [f64; 2],
    /// Relative standard deviation of initial inverse depths.
    pub depth_init_noise: f64,
    /// Tracker noise on relative keyframe motion: radians and metres.
    pub tracker_rotation_noise: f64,
    pub tracker_translation_noise: f64,
    pub exposure_range: [f64; 2],
    pub affine_a_sigma: f64,
    pub affine_b_sigma: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration: 60.0,
            imu_rate: 200.0,
            keyframe_rate: 2.0,
            trajectory: Trajectory::default(),
            true_scale: 2.0,
            camera: CameraModel::default(),
            t_cam_imu: default_t_cam_imu(),
            imu_noise: ImuNoiseParams::default(),
            imu_noise_enabled: true,
            initial_bias: ImuBias { gyro: Vector3::new(0.002, -0.001, 0.003), accel: Vector3::new(0.05, -0.03, 0.04) },
            pixel_noise: 1.0,
            points_per_keyframe: 12,
            depth_range: [2.0, 8.0],
            depth_init_noise: 0.05,
            tracker_rotation_noise: 0.002,
            tracker_translation_noise: 0.005,
            exposure_range: [0.005, 0.02],
            affine_a_sigma: 0.05,
            affine_b_sigma: 2.0,
        }
    }
}

impl SimConfig {
    /// Same scene and motion without any noise.
    pub fn noiseless(mut self) -> Self {
        self.imu_noise_enabled = false;
        self.initial_bias = ImuBias::default();
        self.pixel_noise = 0.0;
        self.depth_init_noise = 0.0;
        self.tracker_rotation_noise = 0.0;
        self.tracker_translation_noise = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        self.imu_noise.validate()?;
        let positive = [
            ("duration", self.duration),
            ("imu_rate", self.imu_rate),
            ("keyframe_rate", self.keyframe_rate),
            ("true_scale", self.true_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.depth_range[0] > 0.0 && self.depth_range[1] > self.depth_range[0]) {
            return Err(Error::Config("depth_range must be increasing and positive".into()));
        }
        if !(self.exposure_range[0] > 0.0 && self.exposure_range[1] >= self.exposure_range[0]) {
            return Err(Error::Config("exposure_range must be positive".into()));
        }
        Ok(())
    }
}

/// One keyframe of the simulated camera stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimKeyframe {
    pub id: u32,
    pub timestamp: f64,
    /// Exposure time is known to the estimator; `a` and `b` are the true
    /// affine brightness parameters.
    pub exposure: Exposure,
    /// True world-to-camera pose in the visual frame.
    pub pose: RigidTransform,
    /// Tracker estimate of the motion from the previous keyframe,
    /// `T_k · T_{k-1}⁻¹`.
    pub tracker_relative: RigidTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimLandmark {
    pub id: u32,
    pub host: u32,
    pub pixel: Vector2<f64>,
    /// True inverse depth in the visual frame.
    pub idepth: f64,
    pub initial_idepth: f64,
    pub texture: Texture,
    pub host_intensities: [f64; 8],
    pub weights: [f64; 8],
}

impl SimLandmark {
    /// The estimator's view: noisy host intensities and initial depth.
    pub fn to_landmark(&self) -> Landmark {
        Landmark {
            id: self.id,
            host: self.host,
            pixel: self.pixel,
            idepth: self.initial_idepth,
            texture: self.texture,
            host_intensities: self.host_intensities,
            weights: self.weights,
        }
    }
}

/// Visual scene plus the calibration the estimator may use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub pixel_noise: f64,
    pub camera: CameraModel,
    pub t_cam_imu: RigidTransform,
    pub true_scale: f64,
    /// True rotation of the visual frame relative to the inertial frame.
    pub true_r_vi: Rotation3,
    pub keyframes: Vec<SimKeyframe>,
    pub landmarks: Vec<SimLandmark>,
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pattern_noise(seed: u64, landmark: u32, frame: u32, sigma: f64) -> [f64; 8] {
    if sigma == 0.0 {
        return [0.0; 8];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, landmark as u64 + 1, frame as u64 + 1));
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    std::array::from_fn(|_| n.sample(&mut rng))
}

impl Scene {
    pub fn keyframe(&self, id: u32) -> Option<&SimKeyframe> {
        self.keyframes.get(id as usize).filter(|k| k.id == id)
    }

    pub fn landmarks_hosted_by(&self, host: u32) -> impl Iterator<Item = &SimLandmark> {
        self.landmarks.iter().filter(move |l| l.host == host)
    }

    /// Observation of `landmark` in keyframe `target`, if the whole pattern
    /// is truly visible there.
    pub fn target_image(&self, landmark: u32, target: u32) -> Option<TargetImage> {
        let lm = self.landmarks.get(landmark as usize).filter(|l| l.id == landmark)?;
        if lm.host == target {
            return None;
        }
        let host = self.keyframe(lm.host)?;
        let tgt = self.keyframe(target)?;
        for o in PATTERN {
            let p = lm.pixel + Vector2::new(o[0], o[1]);
            let proj = project(&p, lm.idepth, &host.pose, &tgt.pose, &self.camera);
            if !proj.visible || !self.camera.in_bounds(&proj.pixel, BORDER) {
                return None;
            }
        }
        TargetImage::from_geometry(
            target,
            tgt.exposure,
            lm.pixel,
            lm.texture,
            lm.idepth,
            &host.pose,
            &tgt.pose,
            &self.camera,
            pattern_noise(self.seed, landmark, target, self.pixel_noise),
        )
    }

    /// Direction of gravity expressed in the visual frame.
    pub fn true_gravity_direction(&self) -> Vector3<f64> {
        self.true_r_vi.rotate(&Vector3::new(0.0, 0.0, -1.0))
    }
}

/// Ground-truth IMU state in the inertial frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthState {
    pub timestamp: f64,
    /// IMU-to-world pose.
    pub pose: RigidTransform,
    pub velocity: Vector3<f64>,
    pub bias: ImuBias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub config: SimConfig,
    pub imu: Vec<ImuMeasurement>,
    pub scene: Scene,
    /// One state per IMU sample.
    pub ground_truth: Vec<GroundTruthState>,
}

/// Ideal IMU reading for a motion sample.
pub fn ideal_imu(sample: &MotionSample, gravity: f64) -> (Vector3<f64>, Vector3<f64>) {
    let specific = sample.acceleration + Vector3::new(0.0, 0.0, gravity);
    (sample.angular_velocity, sample.rotation.inverse().rotate(&specific))
}

pub fn simulate(config: &SimConfig) -> Result<Simulation> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let traj = &config.trajectory;
    let t_ci = config.t_cam_imu;
    let t_ic = t_ci.inverse();
    let g = config.imu_noise.gravity_magnitude;

    // the visual frame is the first camera frame, scaled by 1/s
    let m0 = traj.sample(0.0);
    let origin = m0.position + m0.rotation.rotate(&t_ic.translation);
    let r_wc0 = m0.rotation * t_ic.rotation;
    let r_vi = r_wc0.inverse();

    let dt = 1.0 / config.imu_rate;
    let n_imu = (config.duration * config.imu_rate).floor() as usize + 1;
    let mut imu = Vec::with_capacity(n_imu);
    let mut ground_truth = Vec::with_capacity(n_imu);
    let mut bias = config.initial_bias;
    let noise = &config.imu_noise;
    for k in 0..n_imu {
        let t = k as f64 * dt;
        let m = traj.sample(t);
        let (w, a) = ideal_imu(&m, g);
        let (mut w_meas, mut a_meas) = (w + bias.gyro, a + bias.accel);
        if config.imu_noise_enabled {
            let sg = noise.gyro_noise_density / dt.sqrt();
            let sa = noise.accel_noise_density / dt.sqrt();
            w_meas += Vector3::from_fn(|_, _| sg * std_normal.sample(&mut rng));
            a_meas += Vector3::from_fn(|_, _| sa * std_normal.sample(&mut rng));
        }
        imu.push(ImuMeasurement::new(t, w_meas, a_meas));
        ground_truth.push(GroundTruthState {
            timestamp: t,
            pose: RigidTransform::new(m.rotation, m.position - origin),
            velocity: m.velocity,
            bias,
        });
        if config.imu_noise_enabled {
            let swg = noise.gyro_random_walk * dt.sqrt();
            let swa = noise.accel_random_walk * dt.sqrt();
            bias.gyro += Vector3::from_fn(|_, _| swg * std_normal.sample(&mut rng));
            bias.accel += Vector3::from_fn(|_, _| swa * std_normal.sample(&mut rng));
        }
    }

    let s = config.true_scale;
    let visual_pose = |t: f64| {
        let m = traj.sample(t);
        let r_wc = r_vi * m.rotation * t_ic.rotation;
        let center = r_vi.rotate(&(m.position + m.rotation.rotate(&t_ic.translation) - origin)) / s;
        RigidTransform::new(r_wc, center).inverse()
    };

    let n_kf = (config.duration * config.keyframe_rate).floor() as u32 + 1;
    let mut keyframes: Vec<SimKeyframe> = Vec::with_capacity(n_kf as usize);
    let rot_noise = Normal::new(0.0, config.tracker_rotation_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let trans_noise =
        Normal::new(0.0, config.tracker_translation_noise.max(0.0) / s).map_err(|e| Error::Config(e.to_string()))?;
    let a_noise = Normal::new(0.0, config.affine_a_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let b_noise = Normal::new(0.0, config.affine_b_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    for id in 0..n_kf {
        let t = id as f64 / config.keyframe_rate;
        let pose = visual_pose(t);
        let tracker_relative = match keyframes.last() {
            None => RigidTransform::identity(),
            Some(prev) => {
                let truth = pose * prev.pose.inverse();
                let w = Vector3::from_fn(|_, _| rot_noise.sample(&mut rng));
                let v = Vector3::from_fn(|_, _| trans_noise.sample(&mut rng));
                let mut rel = RigidTransform::new(Rotation3::exp(&w), v) * truth;
                if id == 1 && rel.translation.norm() > 0.0 {
                    // the first baseline defines the visual scale
                    rel.translation *= truth.translation.norm() / rel.translation.norm();
                }
                rel
            }
        };
        let exposure = Exposure {
            time: rng.random_range(config.exposure_range[0]..=config.exposure_range[1]),
            a: if id == 0 { 0.0 } else { a_noise.sample(&mut rng) },
            b: if id == 0 { 0.0 } else { b_noise.sample(&mut rng) },
        };
        keyframes.push(SimKeyframe { id, timestamp: t, exposure, pose, tracker_relative });
    }

    // textures are scaled so that a mid-range exposure gives intensities
    // around 100 and gradients of 4 to 15 per pixel
    let reference = 0.5 * (config.exposure_range[0] + config.exposure_range[1]);
    let mut landmarks = Vec::new();
    let margin = 20.0;
    let depth_noise = Normal::new(0.0, config.depth_init_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    for kf in &keyframes {
        for _ in 0..config.points_per_keyframe {
            let id = landmarks.len() as u32;
            let pixel = Vector2::new(
                rng.random_range(margin..config.camera.width - margin),
                rng.random_range(margin..config.camera.height - margin),
            );
            let depth = rng.random_range(config.depth_range[0]..config.depth_range[1]);
            let idepth = s / depth;
            let signed = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
                let v: f64 = rng.random_range(lo..hi);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            };
            let c = [
                rng.random_range(60.0..180.0),
                signed(&mut rng, 4.0, 15.0),
                signed(&mut rng, 4.0, 15.0),
                signed(&mut rng, 0.2, 1.0),
                signed(&mut rng, 0.2, 1.0),
                signed(&mut rng, 0.2, 1.0),
            ];
            let texture = Texture(c.map(|v| v / reference));
            let noise = pattern_noise(config.seed, id, kf.id, config.pixel_noise);
            let (host_intensities, weights) = Landmark::observe_host(&texture, &kf.exposure, &noise);
            let initial_idepth = (idepth * (1.0 + depth_noise.sample(&mut rng))).max(0.2 * idepth);
            landmarks.push(SimLandmark {
                id,
                host: kf.id,
                pixel,
                idepth,
                initial_idepth,
                texture,
                host_intensities,
                weights,
            });
        }
    }

    Ok(Simulation {
        config: config.clone(),
        imu,
        scene: Scene {
            seed: config.seed,
            pixel_noise: config.pixel_noise,
            camera: config.camera,
            t_cam_imu: t_ci,
            true_scale: s,
            true_r_vi: r_vi,
            keyframes,
            landmarks,
        },
        ground_truth,
    })
}
