use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use delayed_vio::error::{Error, Result};
use delayed_vio::eval::{
    absolute_trajectory_error, angle_between_deg, cumulative_counts, drift_percent, evaluate, median,
    scale_error_percent, trajectory_length, Alignment, TimedPose,
};
use delayed_vio::imu::ImuMeasurement;
use delayed_vio::io::{
    read_imu_csv_file, read_json_file, read_tum_file, write_csv_file, write_imu_csv_file, write_json_file,
    write_tum_file,
};
use delayed_vio::pipeline::{run_scene, Phase, PipelineConfig};
use delayed_vio::sim::{simulate, Scene, SimConfig};

const SIMULATION_FILE: &str = "simulation.json";
const SCENE_FILE: &str = "scene.json";
const IMU_FILE: &str = "imu.csv";
const GROUND_TRUTH_FILE: &str = "groundtruth.txt";

#[derive(Parser)]
#[command(name = "vio-harness", version, about = "Simulate, run and evaluate the visual-inertial estimator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (IMU CSV, scene, ground truth).
    Simulate {
        /// Simulation config (JSON); missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the estimator on a dataset directory, possibly several times.
    Run {
        #[arg(long)]
        input: PathBuf,
        /// Pipeline config (JSON); missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a TUM trajectory with ground truth.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = AlignArg::Se3)]
        alignment: AlignArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    Se3,
    Sim3,
}

/// One row of `metrics.json`. Errors of failed runs are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunMetrics {
    run: usize,
    seed: Option<u64>,
    failed: bool,
    failure: Option<String>,
    phase: Option<String>,
    alignment: Option<Alignment>,
    rmse_ate: Option<f64>,
    scale_error: Option<f64>,
    drift: Option<f64>,
    gravity_error_deg: Option<f64>,
    length: f64,
    matched: usize,
    initialized_at: Option<u32>,
    pgba_runs: usize,
    replacements: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MedianMetrics {
    runs: usize,
    failures: usize,
    rmse_ate: Option<f64>,
    scale_error: Option<f64>,
    drift: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Metrics {
    runs: Vec<RunMetrics>,
    median: MedianMetrics,
}

#[derive(Serialize)]
struct CumulativeRow {
    threshold_m: f64,
    runs: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out } => cmd_simulate(config.as_deref(), &out).map(|_| ExitCode::SUCCESS),
        Command::Run { input, config, runs, out } => cmd_run(&input, config.as_deref(), runs, &out),
        Command::Evaluate { est, gt, alignment } => cmd_evaluate(&est, &gt, alignment).map(|_| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::FAILURE
    })
}

fn load_or_default<T: Default + serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<T> {
    path.map(read_json_file).unwrap_or_else(|| Ok(T::default()))
}

fn ground_truth(sim: &delayed_vio::sim::Simulation) -> Vec<TimedPose> {
    sim.ground_truth.iter().map(|g| TimedPose { timestamp: g.timestamp, pose: g.pose }).collect()
}

fn cmd_simulate(config: Option<&Path>, out: &Path) -> Result<()> {
    let config: SimConfig = load_or_default(config)?;
    let sim = simulate(&config)?;
    std::fs::create_dir_all(out)?;
    write_json_file(&out.join(SIMULATION_FILE), &sim.config)?;
    write_json_file(&out.join(SCENE_FILE), &sim.scene)?;
    write_imu_csv_file(&out.join(IMU_FILE), &sim.imu)?;
    write_tum_file(&out.join(GROUND_TRUTH_FILE), &ground_truth(&sim))?;
    log::info!(
        "simulated {:.1} s: {} IMU samples, {} keyframes, {} landmarks -> {}",
        config.duration,
        sim.imu.len(),
        sim.scene.keyframes.len(),
        sim.scene.landmarks.len(),
        out.display()
    );
    Ok(())
}

struct Dataset {
    scene: Scene,
    imu: Vec<ImuMeasurement>,
    ground_truth: Vec<TimedPose>,
}

fn load_dataset(input: &Path) -> Result<Dataset> {
    Ok(Dataset {
        scene: read_json_file(&input.join(SCENE_FILE))?,
        imu: read_imu_csv_file(&input.join(IMU_FILE))?,
        ground_truth: read_tum_file(&input.join(GROUND_TRUTH_FILE))?,
    })
}

/// Dataset for run `k`: the recorded files when the seed matches them,
/// otherwise a fresh simulation with that seed.
fn dataset_for_run(recorded: &Dataset, sim_config: Option<&SimConfig>, seed: Option<u64>) -> Result<Dataset> {
    match (sim_config, seed) {
        (Some(cfg), Some(seed)) if seed != recorded.scene.seed => {
            let sim = simulate(&SimConfig { seed, ..cfg.clone() })?;
            Ok(Dataset { ground_truth: ground_truth(&sim), scene: sim.scene, imu: sim.imu })
        }
        _ => Ok(Dataset {
            scene: recorded.scene.clone(),
            imu: recorded.imu.clone(),
            ground_truth: recorded.ground_truth.clone(),
        }),
    }
}

fn execute_run(run: usize, seed: Option<u64>, data: &Dataset, config: &PipelineConfig, out: &Path) -> Result<RunMetrics> {
    let mut metrics = RunMetrics {
        run,
        seed,
        failed: false,
        failure: None,
        phase: None,
        alignment: None,
        rmse_ate: None,
        scale_error: None,
        drift: None,
        gravity_error_deg: None,
        length: trajectory_length(&data.ground_truth),
        matched: 0,
        initialized_at: None,
        pgba_runs: 0,
        replacements: 0,
    };
    let output = match run_scene(config, &data.scene, &data.imu) {
        Ok(o) => o,
        Err(Error::TrackingLost(why)) => {
            log::warn!("run {run}: tracking lost: {why}");
            metrics.failed = true;
            metrics.failure = Some(why);
            return Ok(metrics);
        }
        Err(e) => return Err(e),
    };
    write_tum_file(&out.join(format!("trajectory_{run}.txt")), &output.trajectory)?;
    write_csv_file(&out.join(format!("timeline_{run}.csv")), &output.timeline)?;

    let metric = output.phase >= Phase::Initialized;
    let alignment = if metric { Alignment::Se3 } else { Alignment::Sim3 };
    let ate = absolute_trajectory_error(&output.trajectory, &data.ground_truth, alignment)?;
    metrics.phase = Some(output.phase.to_string());
    metrics.alignment = Some(alignment);
    metrics.rmse_ate = Some(ate.rmse);
    metrics.drift = Some(drift_percent(ate.rmse, metrics.length));
    metrics.matched = ate.matched;
    if metric {
        metrics.scale_error = output.scale.map(|s| scale_error_percent(s, data.scene.true_scale));
        metrics.gravity_error_deg =
            output.gravity_direction.map(|g| angle_between_deg(&g, &data.scene.true_gravity_direction()));
    }
    metrics.initialized_at = output.stats.initialized_at;
    metrics.pgba_runs = output.stats.pgba_runs;
    metrics.replacements = output.stats.replacements;
    log::info!(
        "run {run}: phase {}, ATE {:.4} m ({alignment:?}), scale error {}",
        output.phase,
        ate.rmse,
        metrics.scale_error.map_or("n/a".to_string(), |e| format!("{e:.3}%"))
    );
    Ok(metrics)
}

/// Failed runs count as infinite error; a median that lands on one is `None`.
fn median_of(rows: &[RunMetrics], field: impl Fn(&RunMetrics) -> Option<f64>) -> Option<f64> {
    let values: Vec<f64> = rows.iter().map(|r| if r.failed { f64::INFINITY } else { field(r).unwrap_or(f64::NAN) }).collect();
    let values: Vec<f64> = values.into_iter().filter(|v| !v.is_nan()).collect();
    median(&values).filter(|m| m.is_finite())
}

fn summarize(rows: Vec<RunMetrics>) -> Metrics {
    let median = MedianMetrics {
        runs: rows.len(),
        failures: rows.iter().filter(|r| r.failed).count(),
        rmse_ate: median_of(&rows, |r| r.rmse_ate),
        scale_error: median_of(&rows, |r| r.scale_error),
        drift: median_of(&rows, |r| r.drift),
    };
    Metrics { runs: rows, median }
}

fn cumulative_rows(rows: &[RunMetrics]) -> Vec<CumulativeRow> {
    let errors: Vec<f64> = rows.iter().map(|r| r.rmse_ate.filter(|_| !r.failed).unwrap_or(f64::INFINITY)).collect();
    let mut thresholds: Vec<f64> = errors.iter().copied().filter(|e| e.is_finite()).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    cumulative_counts(&errors, &thresholds)
        .into_iter()
        .map(|(threshold_m, runs)| CumulativeRow { threshold_m, runs })
        .collect()
}

fn cmd_run(input: &Path, config: Option<&Path>, runs: usize, out: &Path) -> Result<ExitCode> {
    if runs == 0 {
        return Err(Error::Config("--runs must be at least 1".into()));
    }
    let config: PipelineConfig = load_or_default(config)?;
    config.validate()?;
    let recorded = load_dataset(input)?;
    let sim_path = input.join(SIMULATION_FILE);
    let sim_config: Option<SimConfig> = if sim_path.exists() { Some(read_json_file(&sim_path)?) } else { None };
    let base_seed = config.seed.or(sim_config.as_ref().map(|_| recorded.scene.seed));
    if runs > 1 && sim_config.is_none() {
        log::warn!("no {SIMULATION_FILE} in the input; every run replays the same recording");
    }
    std::fs::create_dir_all(out)?;
    write_json_file(&out.join("config.json"), &config)?;

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(runs);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Result<RunMetrics>>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let run = next.fetch_add(1, Ordering::SeqCst);
                if run >= runs {
                    break;
                }
                let seed = base_seed.map(|s| s + run as u64);
                let result = dataset_for_run(&recorded, sim_config.as_ref(), seed)
                    .and_then(|data| execute_run(run, seed, &data, &config, out));
                results.lock().expect("no worker panicked").push(result);
            });
        }
    });
    let mut rows = results.into_inner().expect("no worker panicked").into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| r.run);

    write_csv_file(&out.join("cumulative.csv"), &cumulative_rows(&rows))?;
    let metrics = summarize(rows);
    write_json_file(&out.join("metrics.json"), &metrics)?;
    println!("{}", serde_json::to_string_pretty(&metrics.median)?);
    if metrics.median.failures == metrics.median.runs {
        eprintln!("tracking lost in every run");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(est: &Path, gt: &Path, alignment: AlignArg) -> Result<()> {
    let alignment = match alignment {
        AlignArg::Se3 => Alignment::Se3,
        AlignArg::Sim3 => Alignment::Sim3,
    };
    let result = evaluate(&read_tum_file(est)?, &read_tum_file(gt)?, alignment)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}
