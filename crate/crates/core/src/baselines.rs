//! Reference rate adapters behind one contract: after each frame's ACK the
//! adapter sees what that frame revealed and picks the MCS for the next one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelState;
use crate::error::Result;
use crate::flightsim::FlightState;
use crate::phy::{logistic_per, McsIndex, Phy, TransmissionRecord, NUM_MCS, OPTIMAL_PER_BOUND};
use crate::staterate::RateDistribution;

/// What the transmitter knows before sending frame `frame_index`.
#[derive(Debug, Clone, Copy)]
pub struct AdapterObservation<'a> {
    /// Index of the frame about to be sent.
    pub frame_index: usize,
    /// Channel estimated from the previous frame's ACK; `None` before the
    /// first frame.
    pub last_channel: Option<&'a ChannelState>,
    /// Outcome of the previous frame.
    pub last_tx: Option<&'a TransmissionRecord>,
    /// Sensor reading aligned with the previous frame (the first reading
    /// before frame 0).
    pub flight: &'a FlightState,
}

pub trait RateAdapter {
    fn name(&self) -> &str;
    fn choose(&mut self, obs: &AdapterObservation) -> Result<McsIndex>;

    /// Online model updates performed so far.
    fn finetune_count(&self) -> usize {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleRateConfig {
    /// EWMA retention of the per-rate transmission-time estimate.
    pub ewma: f64,
    pub probe_interval: usize,
    pub seed: u64,
}

impl Default for SampleRateConfig {
    fn default() -> Self {
        SampleRateConfig {
            ewma: 0.95,
            probe_interval: 10,
            seed: 0,
        }
    }
}

/// Per-rate average transmission time with periodic probing.
///
/// A failed frame costs its airtime plus one base-rate retry. Probes go to
/// a uniformly random other rate whose lossless airtime beats the current
/// best average; with no such rate the probe slot uses the best rate.
#[derive(Debug, Clone)]
pub struct SampleRate {
    name: String,
    config: SampleRateConfig,
    phy: Phy,
    payload_bits: u32,
    avg_time: [Option<f64>; NUM_MCS],
    current: McsIndex,
    rng: ChaCha8Rng,
    /// Averaging window as a function of speed; `None` for the static form.
    dynamic_floor: Option<f64>,
    last_probe: Option<McsIndex>,
}

impl SampleRate {
    pub fn new(phy: Phy, payload_bits: u32, config: SampleRateConfig) -> Self {
        SampleRate {
            name: "samplerate".into(),
            config,
            phy,
            payload_bits,
            avg_time: [None; NUM_MCS],
            current: McsIndex::LOWEST,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            dynamic_floor: None,
            last_probe: None,
        }
    }

    /// Window shrinks with speed: W(v) = clamp(W0 / (1 + v/2), 4, W0) with
    /// W0 = 1 / (1 - ewma).
    pub fn dynamic(phy: Phy, payload_bits: u32, config: SampleRateConfig) -> Self {
        let mut s = Self::new(phy, payload_bits, config);
        s.name = "dynamic_samplerate".into();
        s.dynamic_floor = Some(4.0);
        s
    }

    pub fn is_probe_frame(&self, frame_index: usize) -> bool {
        frame_index > 0 && frame_index.is_multiple_of(self.config.probe_interval)
    }

    /// Most recent probe target, if the last choice was a probe.
    pub fn last_probe(&self) -> Option<McsIndex> {
        self.last_probe
    }

    pub fn estimate(&self, mcs: McsIndex) -> Option<f64> {
        self.avg_time[mcs.get()]
    }

    fn retention(&self, speed: f64) -> f64 {
        match self.dynamic_floor {
            None => self.config.ewma,
            Some(floor) => {
                let w0 = 1.0 / (1.0 - self.config.ewma);
                let w = (w0 / (1.0 + speed / 2.0)).clamp(floor.min(w0), w0);
                1.0 - 1.0 / w
            }
        }
    }

    fn record(&mut self, tx: &TransmissionRecord, speed: f64) {
        let penalty = if tx.success {
            0.0
        } else {
            self.phy.airtime(McsIndex::LOWEST, self.payload_bits)
        };
        let sample = tx.airtime + penalty;
        let a = self.retention(speed);
        let slot = &mut self.avg_time[tx.mcs.get()];
        *slot = Some(match *slot {
            Some(prev) => a * prev + (1.0 - a) * sample,
            None => sample,
        });
    }

    fn best(&self) -> McsIndex {
        let mut best: Option<(McsIndex, f64)> = None;
        for m in McsIndex::all() {
            if let Some(t) = self.avg_time[m.get()] {
                if best.is_none_or(|(_, bt)| t < bt) {
                    best = Some((m, t));
                }
            }
        }
        best.map_or(self.current, |(m, _)| m)
    }
}

impl RateAdapter for SampleRate {
    fn name(&self) -> &str {
        &self.name
    }

    fn choose(&mut self, obs: &AdapterObservation) -> Result<McsIndex> {
        if let Some(tx) = obs.last_tx {
            self.record(tx, obs.flight.speed);
        }
        self.current = self.best();
        self.last_probe = None;
        if self.is_probe_frame(obs.frame_index) {
            let bar = self.avg_time[self.current.get()].unwrap_or(f64::INFINITY);
            let candidates: Vec<McsIndex> = McsIndex::all()
                .filter(|&m| m != self.current && self.phy.airtime(m, self.payload_bits) < bar)
                .collect();
            if !candidates.is_empty() {
                let pick = candidates[self.rng.random_range(0..candidates.len())];
                self.last_probe = Some(pick);
                return Ok(pick);
            }
        }
        Ok(self.current)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CharmConfig {
    pub window: usize,
    /// Threshold increase after a failure, dB.
    pub delta: f64,
    /// Consecutive successes that lower a threshold by `delta / 10`.
    pub success_streak: usize,
}

impl Default for CharmConfig {
    fn default() -> Self {
        CharmConfig {
            window: 20,
            delta: 0.5,
            success_streak: 10,
        }
    }
}

/// RSSI-threshold adaptation with a linearly age-weighted RSSI window and
/// per-rate thresholds that move with observed outcomes.
#[derive(Debug, Clone)]
pub struct Charm {
    config: CharmConfig,
    noise_floor_dbm: f64,
    base: [f64; NUM_MCS],
    thresholds: [f64; NUM_MCS],
    rssi: std::collections::VecDeque<f64>,
    streak: usize,
}

impl Charm {
    pub fn new(phy: &Phy, config: CharmConfig) -> Self {
        let base = phy.config().snr_thresholds;
        Charm {
            config,
            noise_floor_dbm: phy.config().noise_floor_dbm,
            base,
            thresholds: base,
            rssi: std::collections::VecDeque::with_capacity(config.window),
            streak: 0,
        }
    }

    pub fn thresholds(&self) -> &[f64; NUM_MCS] {
        &self.thresholds
    }

    /// Weighted window average; the newest sample has weight W, the oldest 1.
    pub fn averaged_rssi(&self) -> Option<f64> {
        if self.rssi.is_empty() {
            return None;
        }
        let n = self.rssi.len();
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, r) in self.rssi.iter().enumerate() {
            let w = (self.config.window - (n - 1 - i)) as f64;
            num += w * r;
            den += w;
        }
        Some(num / den)
    }

    fn update_outcome(&mut self, tx: &TransmissionRecord) {
        let k = tx.mcs.get();
        if tx.success {
            self.streak += 1;
            if self.streak >= self.config.success_streak {
                self.thresholds[k] = (self.thresholds[k] - self.config.delta / 10.0).max(self.base[k]);
                self.streak = 0;
            }
        } else {
            self.thresholds[k] += self.config.delta;
            self.streak = 0;
        }
    }
}

impl RateAdapter for Charm {
    fn name(&self) -> &str {
        "charm"
    }

    fn choose(&mut self, obs: &AdapterObservation) -> Result<McsIndex> {
        if let Some(tx) = obs.last_tx {
            self.update_outcome(tx);
        }
        if let Some(c) = obs.last_channel {
            if self.rssi.len() == self.config.window {
                self.rssi.pop_front();
            }
            self.rssi.push_back(c.rssi);
        }
        let Some(avg) = self.averaged_rssi() else {
            return Ok(McsIndex::LOWEST);
        };
        let snr = avg - self.noise_floor_dbm;
        Ok(McsIndex::all()
            .rev()
            .find(|m| self.thresholds[m.get()] <= snr)
            .unwrap_or(McsIndex::LOWEST))
    }
}

/// Highest MCS predicted to lose under 10% at the ESNR of the last ACK's
/// channel estimate, optionally with a speed-dependent margin.
#[derive(Debug, Clone)]
pub struct Esnr {
    phy: Phy,
    /// Margin per m/s of speed, dB; zero for the plain form.
    margin_per_speed: f64,
}

impl Esnr {
    pub fn new(phy: Phy) -> Self {
        Esnr {
            phy,
            margin_per_speed: 0.0,
        }
    }

    /// Adds m(v) = 0.5·v dB to every threshold.
    pub fn dynamic(phy: Phy) -> Self {
        Esnr {
            phy,
            margin_per_speed: 0.5,
        }
    }

    pub fn select(&self, channel: &ChannelState, speed: f64) -> McsIndex {
        let margin = self.margin_per_speed * speed;
        let profile = self.phy.esnr_profile(channel);
        McsIndex::all()
            .rev()
            .find(|&m| {
                let esnr = profile.get(self.phy.entry(m).modulation) - margin;
                self.phy.per_at_esnr(m, esnr) < OPTIMAL_PER_BOUND
            })
            .unwrap_or(McsIndex::LOWEST)
    }
}

impl RateAdapter for Esnr {
    fn name(&self) -> &str {
        if self.margin_per_speed > 0.0 {
            "dynamic_esnr"
        } else {
            "esnr"
        }
    }

    fn choose(&mut self, obs: &AdapterObservation) -> Result<McsIndex> {
        let speed = if self.margin_per_speed > 0.0 { obs.flight.speed } else { 0.0 };
        Ok(obs
            .last_channel
            .map_or(McsIndex::LOWEST, |c| self.select(c, speed)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Optimal rate of the frame being sent.
    Opt,
    /// Optimal rate of the frame just acknowledged.
    PreviousOpt,
}

/// Omniscient baselines over the per-frame optimal rates of the true
/// channel.
#[derive(Debug, Clone)]
pub struct Oracle {
    kind: OracleKind,
    optimal: Vec<McsIndex>,
}

impl Oracle {
    pub fn new(kind: OracleKind, optimal: Vec<McsIndex>) -> Self {
        Oracle { kind, optimal }
    }
}

impl RateAdapter for Oracle {
    fn name(&self) -> &str {
        match self.kind {
            OracleKind::Opt => "opt",
            OracleKind::PreviousOpt => "previous_opt",
        }
    }

    fn choose(&mut self, obs: &AdapterObservation) -> Result<McsIndex> {
        let n = obs.frame_index;
        let prev = n.checked_sub(1).and_then(|p| self.optimal.get(p).copied());
        Ok(match self.kind {
            OracleKind::Opt => self.optimal.get(n).copied().or(prev),
            OracleKind::PreviousOpt => prev,
        }
        .unwrap_or(McsIndex::LOWEST))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdKind {
    /// Mean SNR from RSSI.
    Snr,
    /// Effective SNR from the CSI.
    Esnr,
}

/// Threshold-rule stand-ins for the evaluation network: label a frame from
/// its own channel estimate.
#[derive(Debug, Clone)]
pub struct ThresholdEvaluator {
    pub kind: ThresholdKind,
    phy: Phy,
}

impl ThresholdEvaluator {
    pub fn new(kind: ThresholdKind, phy: Phy) -> Self {
        ThresholdEvaluator { kind, phy }
    }

    pub fn label(&self, channel: &ChannelState) -> McsIndex {
        match self.kind {
            ThresholdKind::Esnr => self.phy.optimal_mcs(channel),
            ThresholdKind::Snr => {
                let snr = self.phy.rssi_snr(channel);
                let cfg = self.phy.config();
                McsIndex::all()
                    .rev()
                    .find(|m| logistic_per(snr, cfg.snr_thresholds[m.get()], cfg.per_slope) < OPTIMAL_PER_BOUND)
                    .unwrap_or(McsIndex::LOWEST)
            }
        }
    }

    pub fn evaluate(&self, channel: &ChannelState) -> RateDistribution {
        RateDistribution::one_hot(self.label(channel))
    }
}
