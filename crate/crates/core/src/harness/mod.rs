//! Experiment plumbing: trace generation, the offline training pipeline,
//! scenario replay across adapters, and CSV reporting.

mod report;
mod scenario;

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{simulate_link, ChannelConfig, ChannelFrame, EnvironmentSpec, DEFAULT_CARRIER_HZ, DEFAULT_EST_NOISE_SIGMA};
use crate::error::{Error, Result};
use crate::flightsim::{generate_trajectory, sample_sensors, FlightState, SensorNoiseSpec, TrajectorySpec};
use crate::phy::{McsIndex, Phy, PhyConfig, NUM_MCS};
use crate::staterate::{train_offline, StateRateModel, TrainConfig, TrainingReport};
use crate::sync::{align, LabeledSample, LabeledTrace};

pub use report::{aggregate_rows, compare_reports, evaluate_checks, export_csv, export_rows, parse_csv, read_csv, Check, CheckOutcome, CompareConfig, CsvRow, CSV_HEADER, CSV_SCHEMA_VERSION};
pub use scenario::{
    run_scenario, run_scenario_on, AdapterMetrics, AdapterSpec, BinMetrics, ChannelMetrics, MetricsReport, OutcomeRng,
    EvaluatorChoice, ScenarioConfig, VelocityBin,
};

/// Independent 64-bit seed for a named stream of a run.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_TRAJECTORY: u64 = 1;
const STREAM_CHANNEL: u64 = 2;
const STREAM_SENSORS: u64 = 3;

/// A preset name or a full environment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvironmentChoice {
    Preset(String),
    Spec(EnvironmentSpec),
}

impl EnvironmentChoice {
    pub fn resolve(&self) -> Result<EnvironmentSpec> {
        let env = match self {
            EnvironmentChoice::Preset(name) => EnvironmentSpec::preset(name)?,
            EnvironmentChoice::Spec(spec) => spec.clone(),
        };
        env.validate()?;
        Ok(env)
    }
}

/// Named hovering setups for RSSI observation runs, in the grove: a UAV
/// hovering 15 m out at 10 m height with 0.5 m position drift
/// (`"hover_drift"`), or resting on the ground at the same offset
/// (`"grounded"`).
pub fn observation_preset(name: &str, duration: f64) -> Result<(EnvironmentChoice, TrajectorySpec)> {
    let env = EnvironmentChoice::Preset("grove".to_string());
    let traj = match name {
        "hover_drift" => TrajectorySpec::hover(15.0, 10.0, duration).with_drift(0.5),
        "grounded" => TrajectorySpec::hover(15.0, 1.5, duration),
        other => return Err(Error::config(format!("unknown observation preset {other:?}"))),
    };
    Ok((env, traj))
}

/// Radio and sensing parameters shared by trace generation and replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkOptions {
    pub carrier_hz: f64,
    pub est_noise_sigma: f64,
    pub sensor_rate: f64,
    pub sensor_noise: SensorNoiseSpec,
    pub phy: PhyConfig,
}

impl Default for LinkOptions {
    fn default() -> Self {
        LinkOptions {
            carrier_hz: DEFAULT_CARRIER_HZ,
            est_noise_sigma: DEFAULT_EST_NOISE_SIGMA,
            sensor_rate: 50.0,
            sensor_noise: SensorNoiseSpec::default(),
            phy: PhyConfig::default(),
        }
    }
}

/// One simulated flight with everything the adapters and the trainer need.
#[derive(Debug, Clone)]
pub struct SimulatedTrace {
    pub environment: String,
    pub frames: Vec<ChannelFrame>,
    /// Sensor reading aligned with each frame.
    pub sensors: Vec<FlightState>,
    /// PER of every MCS on each frame's true channel.
    pub pers: Vec<[f64; NUM_MCS]>,
    /// Label oracle output on each frame's true channel.
    pub optimal: Vec<McsIndex>,
}

impl SimulatedTrace {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Estimated CSI and sensor readings labeled with the oracle on the true
    /// channel.
    pub fn labeled(&self) -> LabeledTrace {
        LabeledTrace {
            environment: self.environment.clone(),
            metadata: serde_json::Value::Null,
            samples: self
                .frames
                .iter()
                .zip(&self.sensors)
                .zip(&self.optimal)
                .map(|((f, s), &label)| LabeledSample {
                    channel: f.observed.clone(),
                    flight: *s,
                    label,
                })
                .collect(),
        }
    }
}

/// Flies `trajectory` through `env` and labels every frame.
pub fn simulate_trace(
    env: &EnvironmentSpec,
    trajectory: &TrajectorySpec,
    frame_rate: f64,
    link: &LinkOptions,
    seed: u64,
) -> Result<SimulatedTrace> {
    if !(frame_rate > 0.0) {
        return Err(Error::config("frame_rate must be positive"));
    }
    let phy = Phy::new(link.phy.clone())?;
    let traj = TrajectorySpec {
        seed: sub_seed(seed ^ trajectory.seed, STREAM_TRAJECTORY),
        ..trajectory.clone()
    };
    let states = generate_trajectory(&traj, 1.0 / frame_rate)?;
    let channel_cfg = ChannelConfig {
        carrier_hz: link.carrier_hz,
        frame_rate,
        est_noise_sigma: link.est_noise_sigma,
    };
    let frames = simulate_link(&states, env, &channel_cfg, sub_seed(seed, STREAM_CHANNEL))?;
    if frames.is_empty() {
        return Err(Error::config("scenario produced no frames"));
    }
    let noise = SensorNoiseSpec {
        seed: sub_seed(seed, STREAM_SENSORS),
        ..link.sensor_noise
    };
    let sensor_series = sample_sensors(&states, link.sensor_rate, &noise)?;
    let observed: Vec<_> = frames.iter().map(|f| f.observed.clone()).collect();
    let sensors = align(&observed, &sensor_series)?.into_iter().map(|(_, s)| s).collect();
    let pers: Vec<[f64; NUM_MCS]> = frames
        .iter()
        .map(|f| phy.per_profile(&phy.esnr_profile(&f.truth)))
        .collect();
    let optimal = pers.iter().map(Phy::optimal_from_pers).collect();
    Ok(SimulatedTrace {
        environment: env.name.clone(),
        frames,
        sensors,
        pers,
        optimal,
    })
}

fn default_frame_rate() -> f64 {
    200.0
}

/// Back-and-forth flights centred where the mean SNR hits evenly spaced
/// targets, cycling through `speeds`. Gives a roughly flat label histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub count: usize,
    /// Seconds per flight.
    pub duration: f64,
    pub height: f64,
    pub snr_min: f64,
    pub snr_max: f64,
    /// Peak speeds, m/s.
    pub speeds: Vec<f64>,
    /// Oscillation amplitude as a fraction of the centre distance.
    pub amplitude_fraction: f64,
    pub min_amplitude: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            count: 48,
            duration: 2.5,
            height: 20.0,
            snr_min: 3.0,
            snr_max: 30.0,
            speeds: vec![2.0, 5.0, 9.0],
            amplitude_fraction: 0.1,
            min_amplitude: 2.0,
        }
    }
}

impl SweepSpec {
    pub fn trajectories(&self, env: &EnvironmentSpec, phy: &PhyConfig) -> Result<Vec<TrajectorySpec>> {
        if self.count == 0 || self.speeds.is_empty() || self.speeds.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::config("sweep needs count > 0 and positive speeds"));
        }
        if !(self.snr_max > self.snr_min) || !(self.amplitude_fraction >= 0.0) || !(self.min_amplitude > 0.0) {
            return Err(Error::config("sweep needs snr_max > snr_min and positive amplitudes"));
        }
        let budget = phy.tx_power_dbm - phy.noise_floor_dbm - env.pl0;
        Ok((0..self.count)
            .map(|k| {
                let snr = self.snr_min + (k as f64 + 0.5) * (self.snr_max - self.snr_min) / self.count as f64;
                let d = 10f64.powf((budget - snr) / (10.0 * env.path_loss_exponent));
                let x = (d * d - self.height * self.height).max(0.0).sqrt();
                let v = self.speeds[k % self.speeds.len()];
                let amplitude = (self.amplitude_fraction * x).max(self.min_amplitude);
                let period = 2.0 * std::f64::consts::PI * amplitude / v;
                TrajectorySpec::back_and_forth(x, v, period, self.height, self.duration)
            })
            .collect())
    }
}

/// Labeled traces for one environment, one per trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub environment: EnvironmentChoice,
    #[serde(default)]
    pub trajectories: Vec<TrajectorySpec>,
    /// Flights appended after `trajectories`.
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    #[serde(default)]
    pub link: LinkOptions,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetConfig {
    /// Explicit trajectories followed by the sweep, if any.
    pub fn flights(&self) -> Result<Vec<TrajectorySpec>> {
        if !(self.frame_rate > 0.0) {
            return Err(Error::config("frame_rate must be positive"));
        }
        let env = self.environment.resolve()?;
        let mut all = self.trajectories.clone();
        if let Some(sweep) = &self.sweep {
            all.extend(sweep.trajectories(&env, &self.link.phy)?);
        }
        if all.is_empty() {
            return Err(Error::config("dataset needs at least one trajectory"));
        }
        for t in &all {
            t.validate()?;
        }
        Ok(all)
    }
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<Vec<SimulatedTrace>> {
    let flights = config.flights()?;
    let env = config.environment.resolve()?;
    flights
        .iter()
        .enumerate()
        .map(|(i, t)| simulate_trace(&env, t, config.frame_rate, &config.link, sub_seed(config.seed, 100 + i as u64)))
        .collect()
}

/// Dataset generation followed by offline training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Directory receiving the checkpoint and training report.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Thresholds verified in `--check` runs.
    #[serde(default)]
    pub checks: TrainingChecks,
}

/// Minimum final validation accuracies of the two networks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingChecks {
    #[serde(default)]
    pub min_prediction_accuracy: Option<f64>,
    #[serde(default)]
    pub min_evaluation_accuracy: Option<f64>,
}

impl TrainingChecks {
    /// One message per failed threshold; a missing validation split fails
    /// any configured threshold.
    pub fn failures(&self, report: &TrainingReport) -> Vec<String> {
        let mut out = Vec::new();
        let pairs = [
            ("prediction", self.min_prediction_accuracy, report.final_pred_val_accuracy()),
            ("evaluation", self.min_evaluation_accuracy, report.final_eval_val_accuracy()),
        ];
        for (net, min, got) in pairs {
            if let Some(min) = min {
                match got {
                    Some(v) if v >= min => {}
                    Some(v) => out.push(format!("{net} validation accuracy {v:.4} < {min}")),
                    None => out.push(format!("{net} network has no validation accuracy")),
                }
            }
        }
        out
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAINING_REPORT_FILE: &str = "training_report.json";

#[derive(Debug)]
pub struct PipelineOutput {
    pub model: StateRateModel,
    pub report: TrainingReport,
    pub checkpoint: Option<PathBuf>,
}

/// Generates the dataset, trains both networks and, when an output
/// directory is configured, writes the checkpoint and training report.
pub fn run_training_pipeline(config: &PipelineConfig) -> Result<PipelineOutput> {
    config.train.validate()?;
    let traces = generate_dataset(&config.dataset)?;
    let labeled: Vec<LabeledTrace> = traces.iter().map(SimulatedTrace::labeled).collect();
    let (model, report) = train_offline(&labeled, &config.train)?;
    let checkpoint = match &config.output_dir {
        Some(dir) => Some(write_pipeline_outputs(dir, &model, &report)?),
        None => None,
    };
    Ok(PipelineOutput {
        model,
        report,
        checkpoint,
    })
}

fn write_pipeline_outputs(dir: &Path, model: &StateRateModel, report: &TrainingReport) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    model.save(&ckpt)?;
    let report_path = dir.join(TRAINING_REPORT_FILE);
    let json = serde_json::to_vec_pretty(report)?;
    std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seeds_differ_by_stream_and_seed() {
        let a = sub_seed(7, 1);
        assert_eq!(a, sub_seed(7, 1));
        assert_ne!(a, sub_seed(7, 2));
        assert_ne!(a, sub_seed(8, 1));
    }

    #[test]
    fn environment_choice_accepts_name_or_spec() {
        let by_name: EnvironmentChoice = serde_json::from_str("\"grove\"").unwrap();
        let spec = by_name.resolve().unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        let by_spec: EnvironmentChoice = serde_json::from_str(&json).unwrap();
        assert_eq!(by_spec.resolve().unwrap(), spec);
        let bad: EnvironmentChoice = serde_json::from_str("\"moon\"").unwrap();
        assert!(matches!(bad.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn trace_labels_follow_true_channel() {
        let env = EnvironmentSpec::preset("playground").unwrap();
        let traj = TrajectorySpec::constant_velocity(20.0, 5.0, 10.0, 2.0);
        let link = LinkOptions::default();
        let trace = simulate_trace(&env, &traj, 200.0, &link, 3).unwrap();
        assert!((400..=401).contains(&trace.len()));
        assert_eq!(trace.sensors.len(), trace.len());
        let phy = Phy::new(link.phy).unwrap();
        for (f, &m) in trace.frames.iter().zip(&trace.optimal) {
            assert_eq!(phy.optimal_mcs(&f.truth), m);
        }
        let again = simulate_trace(&env, &traj, 200.0, &LinkOptions::default(), 3).unwrap();
        assert_eq!(again.optimal, trace.optimal);
    }
}
