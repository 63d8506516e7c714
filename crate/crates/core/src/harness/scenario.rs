use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{export_csv, Check};
use super::{simulate_trace, sub_seed, EnvironmentChoice, LinkOptions, SimulatedTrace};
use crate::baselines::{
    AdapterObservation, Charm, CharmConfig, Esnr, Oracle, OracleKind, RateAdapter, SampleRate, SampleRateConfig,
    ThresholdEvaluator, ThresholdKind,
};
use crate::error::{Error, Result};
use crate::flightsim::TrajectorySpec;
use crate::phy::{throughput, McsIndex, Phy, TransmissionRecord};
use crate::staterate::{OnlineConfig, StateRateAdapter, StateRateModel};

const STREAM_OUTCOMES: u64 = 4;
const STREAM_ADAPTERS: u64 = 1000;

/// Speed ranges used for per-bin breakdowns, m/s. Speeds above 10 m/s fall
/// into the top bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VelocityBin {
    #[serde(rename = "0-2")]
    Slow,
    #[serde(rename = "2-6")]
    Medium,
    #[serde(rename = "6-10")]
    Fast,
}

impl VelocityBin {
    pub const ALL: [VelocityBin; 3] = [VelocityBin::Slow, VelocityBin::Medium, VelocityBin::Fast];

    pub fn of(speed: f64) -> Self {
        if speed < 2.0 {
            VelocityBin::Slow
        } else if speed < 6.0 {
            VelocityBin::Medium
        } else {
            VelocityBin::Fast
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            VelocityBin::Slow => "0-2",
            VelocityBin::Medium => "2-6",
            VelocityBin::Fast => "6-10",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.label() == label)
    }
}

/// Source of virtual labels for online fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorChoice {
    #[default]
    Network,
    Snr,
    Esnr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdapterSpec {
    Opt,
    PreviousOpt,
    Samplerate {
        #[serde(default)]
        params: SampleRateConfig,
    },
    DynamicSamplerate {
        #[serde(default)]
        params: SampleRateConfig,
    },
    Charm {
        #[serde(default)]
        params: CharmConfig,
    },
    Esnr,
    DynamicEsnr,
    Staterate {
        /// Checkpoint file; `None` uses the model handed to the runner.
        #[serde(default)]
        checkpoint: Option<PathBuf>,
        /// Enables the prober and online fine-tuning.
        #[serde(default)]
        online: Option<OnlineConfig>,
        #[serde(default)]
        evaluator: EvaluatorChoice,
        #[serde(default)]
        name: Option<String>,
    },
}

/// How Bernoulli frame outcomes are drawn across adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeRng {
    /// Every adapter replays the same uniform draw on each frame.
    #[default]
    Common,
    /// Each adapter draws from its own sub-seeded stream.
    PerAdapter,
}

fn default_frame_rate() -> f64 {
    200.0
}

fn default_window() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub environment: EnvironmentChoice,
    /// Flight path; its duration is replaced by the scenario duration.
    pub trajectory: TrajectorySpec,
    pub adapters: Vec<AdapterSpec>,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    #[serde(default)]
    pub link: LinkOptions,
    #[serde(default)]
    pub outcome_rng: OutcomeRng,
    /// Window of the throughput time series, seconds.
    #[serde(default = "default_window")]
    pub throughput_window: f64,
    /// Thresholds verified in `--check` runs.
    #[serde(default)]
    pub checks: Vec<Check>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.adapters.is_empty() {
            return Err(Error::config("scenario needs at least one adapter"));
        }
        if !(self.duration > 0.0) || !(self.frame_rate > 0.0) {
            return Err(Error::config("duration and frame_rate must be positive"));
        }
        if !(self.throughput_window > 0.0) {
            return Err(Error::config("throughput_window must be positive"));
        }
        self.link.phy.validate()?;
        self.trajectory().validate()
    }

    pub fn trajectory(&self) -> TrajectorySpec {
        TrajectorySpec {
            duration: self.duration,
            ..self.trajectory.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMetrics {
    pub bin: VelocityBin,
    pub frames: usize,
    pub prediction_accuracy: f64,
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterMetrics {
    pub name: String,
    /// Fraction of frames sent at the label oracle's rate.
    pub prediction_accuracy: f64,
    /// Mbps.
    pub throughput: f64,
    pub throughput_vs_opt: f64,
    /// Non-empty bins only.
    pub bins: Vec<BinMetrics>,
    pub windowed_throughput: Vec<f64>,
    pub finetunes: usize,
}

impl AdapterMetrics {
    pub fn bin(&self, bin: VelocityBin) -> Option<&BinMetrics> {
        self.bins.iter().find(|b| b.bin == bin)
    }
}

/// Adjacent-frame RSSI statistics of the true channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    /// Mean `|RSSI_n - RSSI_{n-1}|` in dB per non-empty bin, binned by the
    /// speed at frame `n`.
    pub mean_abs_delta_rssi: Vec<(VelocityBin, f64)>,
    pub max_abs_delta_rssi: f64,
}

impl ChannelMetrics {
    pub fn mean_in(&self, bin: VelocityBin) -> Option<f64> {
        self.mean_abs_delta_rssi.iter().find(|(b, _)| *b == bin).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub frames: usize,
    /// Throughput of the next-frame oracle on the reference outcome stream.
    pub opt_throughput: f64,
    pub adapters: Vec<AdapterMetrics>,
    pub channel: ChannelMetrics,
}

impl MetricsReport {
    pub fn adapter(&self, name: &str) -> Option<&AdapterMetrics> {
        self.adapters.iter().find(|a| a.name == name)
    }

    /// Adapters whose throughput exceeds OPT's on this run.
    pub fn dominance_violations(&self) -> Vec<String> {
        self.adapters
            .iter()
            .filter(|a| a.throughput > self.opt_throughput)
            .map(|a| format!("{} {:.4} > opt {:.4}", a.name, a.throughput, self.opt_throughput))
            .collect()
    }
}

fn build_adapter(
    spec: &AdapterSpec,
    index: usize,
    cfg: &ScenarioConfig,
    trace: &SimulatedTrace,
    model: Option<&StateRateModel>,
) -> Result<Box<dyn RateAdapter>> {
    let phy = Phy::new(cfg.link.phy.clone())?;
    let payload = cfg.link.phy.payload_bits;
    let seeded = |p: &SampleRateConfig| SampleRateConfig {
        seed: p.seed ^ sub_seed(cfg.seed, STREAM_ADAPTERS + index as u64),
        ..*p
    };
    Ok(match spec {
        AdapterSpec::Opt => Box::new(Oracle::new(OracleKind::Opt, trace.optimal.clone())),
        AdapterSpec::PreviousOpt => Box::new(Oracle::new(OracleKind::PreviousOpt, trace.optimal.clone())),
        AdapterSpec::Samplerate { params } => Box::new(SampleRate::new(phy, payload, seeded(params))),
        AdapterSpec::DynamicSamplerate { params } => Box::new(SampleRate::dynamic(phy, payload, seeded(params))),
        AdapterSpec::Charm { params } => Box::new(Charm::new(&phy, *params)),
        AdapterSpec::Esnr => Box::new(Esnr::new(phy)),
        AdapterSpec::DynamicEsnr => Box::new(Esnr::dynamic(phy)),
        AdapterSpec::Staterate {
            checkpoint,
            online,
            evaluator,
            name,
        } => {
            let model = match (checkpoint, model) {
                (Some(path), _) => StateRateModel::load(path)?,
                (None, Some(m)) => m.clone(),
                (None, None) => {
                    return Err(Error::config(format!(
                        "adapter {} (#{index}): missing checkpoint",
                        name.as_deref().unwrap_or("staterate")
                    )))
                }
            };
            let mut adapter = match online {
                Some(oc) => {
                    let takeoff = trace.frames[0].flight.position;
                    StateRateAdapter::online(model, *oc, takeoff)?
                }
                None => StateRateAdapter::new(model),
            };
            adapter = match evaluator {
                EvaluatorChoice::Network => adapter,
                EvaluatorChoice::Snr => adapter.with_evaluator(ThresholdEvaluator::new(ThresholdKind::Snr, phy)),
                EvaluatorChoice::Esnr => adapter.with_evaluator(ThresholdEvaluator::new(ThresholdKind::Esnr, phy)),
            };
            if let Some(n) = name {
                adapter = adapter.with_name(n.clone());
            }
            Box::new(adapter)
        }
    })
}

struct Run {
    choices: Vec<McsIndex>,
    records: Vec<TransmissionRecord>,
}

/// Replays the trace frame by frame. Before frame `n` the adapter sees the
/// ACK channel estimate, outcome and sensor reading of frame `n - 1`.
fn replay(adapter: &mut dyn RateAdapter, trace: &SimulatedTrace, phy: &Phy, outcome_seed: u64) -> Result<Run> {
    let payload = phy.config().payload_bits;
    let mut rng = ChaCha8Rng::seed_from_u64(outcome_seed);
    let n = trace.len();
    let mut choices = Vec::with_capacity(n);
    let mut records: Vec<TransmissionRecord> = Vec::with_capacity(n);
    for i in 0..n {
        let obs = AdapterObservation {
            frame_index: i,
            last_channel: i.checked_sub(1).map(|p| &trace.frames[p].observed),
            last_tx: records.last(),
            flight: &trace.sensors[i.saturating_sub(1)],
        };
        let mcs = adapter.choose(&obs)?;
        records.push(phy.transmit_with_per(i, mcs, trace.pers[i][mcs.get()], payload, &mut rng));
        choices.push(mcs);
    }
    Ok(Run { choices, records })
}

fn accuracy(choices: &[McsIndex], optimal: &[McsIndex], frames: impl Iterator<Item = usize>) -> (usize, f64) {
    let (mut hits, mut count) = (0usize, 0usize);
    for i in frames {
        count += 1;
        hits += usize::from(choices[i] == optimal[i]);
    }
    (count, if count == 0 { 0.0 } else { hits as f64 / count as f64 })
}

fn channel_metrics(trace: &SimulatedTrace) -> ChannelMetrics {
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    let mut max = 0.0f64;
    for w in trace.frames.windows(2) {
        let d = (w[1].truth.rssi - w[0].truth.rssi).abs();
        let b = VelocityBin::of(w[1].flight.speed) as usize;
        sums[b] += d;
        counts[b] += 1;
        max = max.max(d);
    }
    ChannelMetrics {
        mean_abs_delta_rssi: VelocityBin::ALL
            .into_iter()
            .filter(|&b| counts[b as usize] > 0)
            .map(|b| (b, sums[b as usize] / counts[b as usize] as f64))
            .collect(),
        max_abs_delta_rssi: max,
    }
}

/// Simulates the configured flight once and replays it for every adapter.
/// `model` backs StateRate adapters that name no checkpoint. The CSV report
/// is written to `output_path` when one is set.
pub fn run_scenario(config: &ScenarioConfig, model: Option<&StateRateModel>) -> Result<MetricsReport> {
    config.validate()?;
    let env = config.environment.resolve()?;
    let trace = simulate_trace(&env, &config.trajectory(), config.frame_rate, &config.link, config.seed)?;
    let report = run_scenario_on(config, &trace, model)?;
    if let Some(path) = &config.output_path {
        export_csv(&report, path)?;
    }
    Ok(report)
}

/// [`run_scenario`] over an already simulated trace.
pub fn run_scenario_on(
    config: &ScenarioConfig,
    trace: &SimulatedTrace,
    model: Option<&StateRateModel>,
) -> Result<MetricsReport> {
    config.validate()?;
    if trace.is_empty() {
        return Err(Error::config("scenario trace is empty"));
    }
    let phy = Phy::new(config.link.phy.clone())?;
    let common = sub_seed(config.seed, STREAM_OUTCOMES);
    let outcome_seed = |index: usize| match config.outcome_rng {
        OutcomeRng::Common => common,
        OutcomeRng::PerAdapter => sub_seed(common, index as u64),
    };
    let mut adapters = Vec::with_capacity(config.adapters.len());
    for (i, spec) in config.adapters.iter().enumerate() {
        adapters.push(build_adapter(spec, i, config, trace, model)?);
    }

    let opt_index = config
        .adapters
        .iter()
        .position(|a| *a == AdapterSpec::Opt)
        .unwrap_or(config.adapters.len());
    let mut opt = Oracle::new(OracleKind::Opt, trace.optimal.clone());
    let opt_throughput = throughput(&replay(&mut opt, trace, &phy, outcome_seed(opt_index))?.records)?;

    let window = ((config.throughput_window * config.frame_rate).round() as usize).max(1);
    let bins: Vec<VelocityBin> = trace.frames.iter().map(|f| VelocityBin::of(f.flight.speed)).collect();
    let mut metrics = Vec::with_capacity(adapters.len());
    for (i, adapter) in adapters.iter_mut().enumerate() {
        let run = replay(adapter.as_mut(), trace, &phy, outcome_seed(i))?;
        let thr = throughput(&run.records)?;
        let (_, acc) = accuracy(&run.choices, &trace.optimal, 0..trace.len());
        let mut per_bin = Vec::new();
        for b in VelocityBin::ALL {
            let idx: Vec<usize> = (0..trace.len()).filter(|&k| bins[k] == b).collect();
            if idx.is_empty() {
                continue;
            }
            let (frames, acc) = accuracy(&run.choices, &trace.optimal, idx.iter().copied());
            let recs: Vec<TransmissionRecord> = idx.iter().map(|&k| run.records[k]).collect();
            per_bin.push(BinMetrics {
                bin: b,
                frames,
                prediction_accuracy: acc,
                throughput: throughput(&recs)?,
            });
        }
        let windowed_throughput = run.records.chunks(window).map(throughput).collect::<Result<Vec<_>>>()?;
        metrics.push(AdapterMetrics {
            name: adapter.name().to_string(),
            prediction_accuracy: acc,
            throughput: thr,
            throughput_vs_opt: if opt_throughput > 0.0 { thr / opt_throughput } else { 0.0 },
            bins: per_bin,
            windowed_throughput,
            finetunes: adapter.finetune_count(),
        });
    }
    Ok(MetricsReport {
        seed: config.seed,
        frames: trace.len(),
        opt_throughput,
        adapters: metrics,
        channel: channel_metrics(trace),
    })
}
