//! Air-to-ground OFDM channel model.
//!
//! Log-distance path loss, slow AR(1) shadowing, and a multi-tap Rician
//! channel whose scattered components follow a first-order Gauss–Markov
//! process with lag correlation `J0(2π·f_m·dt)`. Taps are rendered to
//! per-subcarrier CSI on the 20 MHz 802.11 grid.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flightsim::FlightState;

pub const SPEED_OF_LIGHT: f64 = 3.0e8;
pub const DEFAULT_CARRIER_HZ: f64 = 2.4e9;
pub const NUM_SUBCARRIERS: usize = 52;
pub const SUBCARRIER_SPACING_HZ: f64 = 312.5e3;
pub const TX_POWER_DBM: f64 = 20.0;
pub const NOISE_FLOOR_DBM: f64 = -90.0;
pub const DEFAULT_EST_NOISE_SIGMA: f64 = 0.1;
/// Reference distance of the log-distance model, meters.
pub const REFERENCE_DISTANCE: f64 = 1.0;
/// Floor applied to mean channel power before taking logs.
const MIN_POWER: f64 = 1e-30;

/// Logical subcarrier indices `-26..=-1, 1..=26`.
pub fn subcarrier_indices() -> impl Iterator<Item = i32> {
    (-26..=26).filter(|&k| k != 0)
}

/// Per-frame channel observation: CSI on every data/pilot subcarrier plus RSSI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    pub csi: Vec<Complex64>,
    /// Received signal strength, dBm.
    pub rssi: f64,
    pub timestamp: f64,
}

impl ChannelState {
    /// Builds a state whose RSSI follows the link-budget convention
    /// `rssi = P_tx + 10·log10(mean |csi_k|²)`.
    pub fn from_csi(csi: Vec<Complex64>, timestamp: f64) -> Self {
        let rssi = rssi_of(&csi);
        ChannelState {
            csi,
            rssi,
            timestamp,
        }
    }

    pub fn mean_power(&self) -> f64 {
        mean_power(&self.csi)
    }
}

fn mean_power(csi: &[Complex64]) -> f64 {
    if csi.is_empty() {
        return 0.0;
    }
    csi.iter().map(|c| c.norm_sqr()).sum::<f64>() / csi.len() as f64
}

pub fn rssi_of(csi: &[Complex64]) -> f64 {
    TX_POWER_DBM + 10.0 * mean_power(csi).max(MIN_POWER).log10()
}

/// Normalized magnitude of the inner product between two CSI vectors.
pub fn csi_similarity(a: &[Complex64], b: &[Complex64]) -> f64 {
    let dot: Complex64 = a.iter().zip(b).map(|(x, y)| x * y.conj()).sum();
    let na = a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let nb = b.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot.norm() / (na * nb)
}

fn default_shadow_decorrelation() -> f64 {
    20.0
}
fn default_tap_decay() -> f64 {
    3.0
}

/// Large-scale and multipath description of a flight site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub name: String,
    pub path_loss_exponent: f64,
    /// Path loss at the 1 m reference distance, dB.
    pub pl0: f64,
    pub shadowing_sigma: f64,
    /// Rician K-factor in dB; `f64::INFINITY` means pure line of sight.
    pub rician_k: f64,
    pub n_taps: usize,
    /// Excess delay of the last tap, seconds; taps are evenly spaced.
    pub tap_delay_spread: f64,
    /// Distance over which shadowing decorrelates to `1/e`, meters.
    #[serde(default = "default_shadow_decorrelation")]
    pub shadow_decorrelation: f64,
    /// Power drop between consecutive scattered taps, dB.
    #[serde(default = "default_tap_decay")]
    pub tap_decay_db: f64,
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1.6..=4.0).contains(&self.path_loss_exponent) {
            return Err(Error::config(format!(
                "environment {}: path_loss_exponent {} outside [1.6, 4.0]",
                self.name, self.path_loss_exponent
            )));
        }
        if self.n_taps == 0 {
            return Err(Error::config(format!(
                "environment {}: n_taps must be >= 1",
                self.name
            )));
        }
        if !(self.shadowing_sigma >= 0.0) {
            return Err(Error::config(format!(
                "environment {}: shadowing_sigma must be >= 0",
                self.name
            )));
        }
        if self.rician_k.is_nan() || !(self.tap_delay_spread >= 0.0) {
            return Err(Error::config(format!(
                "environment {}: invalid rician_k or tap_delay_spread",
                self.name
            )));
        }
        if !(self.shadow_decorrelation > 0.0) || !self.pl0.is_finite() {
            return Err(Error::config(format!(
                "environment {}: invalid pl0 or shadow_decorrelation",
                self.name
            )));
        }
        Ok(())
    }

    /// Named site presets: `square`, `playground`, `pool`, `grove`.
    pub fn preset(name: &str) -> Result<Self> {
        let (exponent, pl0, k, taps, spread) = match name {
            "square" => (2.0, 58.0, 18.0, 2, 100e-9),
            "playground" => (2.2, 52.0, 15.0, 3, 200e-9),
            "pool" => (2.5, 48.0, 12.0, 3, 250e-9),
            "grove" => (2.7, 46.0, 6.0, 5, 400e-9),
            other => return Err(Error::config(format!("unknown environment preset {other:?}"))),
        };
        Ok(EnvironmentSpec {
            name: name.to_string(),
            path_loss_exponent: exponent,
            pl0,
            shadowing_sigma: 2.0,
            rician_k: k,
            n_taps: taps,
            tap_delay_spread: spread,
            shadow_decorrelation: default_shadow_decorrelation(),
            tap_decay_db: default_tap_decay(),
        })
    }

    pub fn tap_delays(&self) -> Vec<f64> {
        let span = (self.n_taps.max(2) - 1) as f64;
        (0..self.n_taps)
            .map(|j| j as f64 * self.tap_delay_spread / span)
            .collect()
    }

    /// Linear K-factor, `None` for pure line of sight.
    fn k_linear(&self) -> Option<f64> {
        if self.rician_k == f64::INFINITY {
            None
        } else {
            Some(10f64.powf(self.rician_k / 10.0))
        }
    }

    /// `(los_power, scattered tap variances)`, summing to one.
    fn power_profile(&self) -> (f64, Vec<f64>) {
        let (los, scattered_total) = match self.k_linear() {
            None => (1.0, 0.0),
            Some(k) => (k / (k + 1.0), 1.0 / (k + 1.0)),
        };
        let raw: Vec<f64> = (0..self.n_taps)
            .map(|j| 10f64.powf(-(j as f64) * self.tap_decay_db / 10.0))
            .collect();
        let total: f64 = raw.iter().sum();
        (los, raw.iter().map(|p| p / total * scattered_total).collect())
    }
}

/// Maximum Doppler shift `f_m = v·f_c/c`.
pub fn max_doppler(v: f64, f_c: f64) -> f64 {
    v * f_c / SPEED_OF_LIGHT
}

/// Channel coherence time `T_m = 0.423 / f_m`; infinite for a static link.
pub fn coherence_time(v: f64, f_c: f64) -> Result<f64> {
    if v < 0.0 || v.is_nan() {
        return Err(Error::domain(format!("velocity must be >= 0, got {v}")));
    }
    if !(f_c > 0.0) {
        return Err(Error::domain(format!("carrier must be > 0, got {f_c}")));
    }
    if v == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(0.423 / max_doppler(v, f_c))
}

/// Whether an ACK received `frame_gap` seconds after the data frame still
/// sees the same channel.
pub fn reciprocity_valid(frame_gap: f64, v: f64, f_c: f64) -> Result<bool> {
    if frame_gap < 0.0 || frame_gap.is_nan() {
        return Err(Error::domain("frame_gap must be >= 0"));
    }
    Ok(frame_gap < coherence_time(v, f_c)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLoss {
    pub db: f64,
    /// The distance was below the reference distance and was clamped.
    pub clamped: bool,
}

pub fn path_loss(env: &EnvironmentSpec, d: f64) -> PathLoss {
    let clamped = !(d >= REFERENCE_DISTANCE);
    let d = if clamped { REFERENCE_DISTANCE } else { d };
    PathLoss {
        db: env.pl0 + 10.0 * env.path_loss_exponent * (d / REFERENCE_DISTANCE).log10(),
        clamped,
    }
}

/// Log-distance path loss in dB, shadowing excluded.
pub fn path_loss_db(env: &EnvironmentSpec, d: f64) -> f64 {
    path_loss(env, d).db
}

/// Temporal correlation of the scattered components over one step.
pub fn fading_correlation(dt: f64, v: f64, f_c: f64) -> f64 {
    libm::j0(2.0 * std::f64::consts::PI * max_doppler(v, f_c) * dt)
}

fn complex_gaussian(rng: &mut ChaCha8Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Small-scale and shadowing state carried from frame to frame.
#[derive(Debug, Clone)]
pub struct FadingState {
    los: Complex64,
    scattered: Vec<Complex64>,
    tap_variance: Vec<f64>,
    pub shadowing: f64,
    rng: ChaCha8Rng,
}

impl FadingState {
    /// Draws taps and shadowing from their stationary distributions.
    pub fn new(env: &EnvironmentSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (los_power, tap_variance) = env.power_profile();
        let scattered = tap_variance
            .iter()
            .map(|&var| complex_gaussian(&mut rng, var))
            .collect();
        let z: f64 = StandardNormal.sample(&mut rng);
        let shadowing = env.shadowing_sigma * z;
        FadingState {
            los: Complex64::new(los_power.sqrt(), 0.0),
            scattered,
            tap_variance,
            shadowing,
            rng,
        }
    }

    /// Builds a state with explicit taps (no scattered process, no shadowing).
    pub fn from_taps(taps: Vec<Complex64>, seed: u64) -> Self {
        let n = taps.len();
        FadingState {
            los: Complex64::new(0.0, 0.0),
            scattered: taps,
            tap_variance: vec![0.0; n],
            shadowing: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Complex amplitude of every tap, line-of-sight mean included in tap 0.
    pub fn taps(&self) -> Vec<Complex64> {
        let mut taps = self.scattered.clone();
        if let Some(first) = taps.first_mut() {
            *first += self.los;
        }
        taps
    }

    /// Advances the channel by `dt` seconds at speed `v`.
    pub fn evolve(&mut self, dt: f64, v: f64, f_c: f64, env: &EnvironmentSpec) {
        let rho = fading_correlation(dt, v, f_c);
        let innovation = (1.0 - rho * rho).max(0.0);
        for (tap, &var) in self.scattered.iter_mut().zip(&self.tap_variance) {
            if innovation > 0.0 && var > 0.0 {
                let w = complex_gaussian(&mut self.rng, var * innovation);
                *tap = *tap * rho + w;
            } else {
                *tap *= rho;
            }
        }
        let moved = v * dt;
        if moved > 0.0 && env.shadowing_sigma > 0.0 {
            let rho_s = (-moved / env.shadow_decorrelation).exp();
            let w: f64 = StandardNormal.sample(&mut self.rng);
            self.shadowing =
                rho_s * self.shadowing + (1.0 - rho_s * rho_s).sqrt() * env.shadowing_sigma * w;
        }
    }

    /// Noiseless channel at distance `d`.
    pub fn render_true(&self, env: &EnvironmentSpec, d: f64, timestamp: f64) -> ChannelState {
        let delays = env.tap_delays();
        let taps = self.taps();
        let gain = 10f64.powf(-(path_loss_db(env, d) + self.shadowing) / 20.0);
        let csi = subcarrier_indices()
            .map(|k| {
                let h: Complex64 = taps
                    .iter()
                    .zip(&delays)
                    .map(|(tap, tau)| {
                        let phase = -2.0 * std::f64::consts::PI * k as f64 * SUBCARRIER_SPACING_HZ * tau;
                        tap * Complex64::from_polar(1.0, phase)
                    })
                    .sum();
                h * gain
            })
            .collect();
        ChannelState::from_csi(csi, timestamp)
    }

    /// Adds complex Gaussian estimation error with per-component standard
    /// deviation `sigma · mean|csi|`. RSSI is carried over from `truth`.
    pub fn estimate(&mut self, truth: &ChannelState, sigma: f64) -> ChannelState {
        if sigma <= 0.0 {
            return truth.clone();
        }
        let mean_mag =
            truth.csi.iter().map(|c| c.norm()).sum::<f64>() / truth.csi.len().max(1) as f64;
        let s = sigma * mean_mag;
        let csi = truth
            .csi
            .iter()
            .map(|c| {
                let re: f64 = StandardNormal.sample(&mut self.rng);
                let im: f64 = StandardNormal.sample(&mut self.rng);
                c + Complex64::new(s * re, s * im)
            })
            .collect();
        ChannelState {
            csi,
            rssi: truth.rssi,
            timestamp: truth.timestamp,
        }
    }
}

/// Functional form of [`FadingState::evolve`].
pub fn evolve_fading(
    mut state: FadingState,
    dt: f64,
    v: f64,
    f_c: f64,
    env: &EnvironmentSpec,
) -> FadingState {
    state.evolve(dt, v, f_c, env);
    state
}

/// Renders the observed channel (with estimation error) at distance `d`.
pub fn render_csi(
    state: &mut FadingState,
    env: &EnvironmentSpec,
    d: f64,
    est_noise_sigma: f64,
) -> ChannelState {
    let truth = state.render_true(env, d, 0.0);
    state.estimate(&truth, est_noise_sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub carrier_hz: f64,
    pub frame_rate: f64,
    pub est_noise_sigma: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            carrier_hz: DEFAULT_CARRIER_HZ,
            frame_rate: 200.0,
            est_noise_sigma: DEFAULT_EST_NOISE_SIGMA,
        }
    }
}

/// One frame of a simulated link: the true channel and what the
/// transmitter estimates from the ACK.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFrame {
    pub truth: ChannelState,
    pub observed: ChannelState,
    /// True flight state at the frame instant.
    pub flight: FlightState,
}

/// Runs the channel along a flight path at `config.frame_rate`.
///
/// `flight` must be a time-sorted, finely sampled trajectory; each frame uses
/// the nearest preceding state.
pub fn simulate_link(
    flight: &[FlightState],
    env: &EnvironmentSpec,
    config: &ChannelConfig,
    seed: u64,
) -> Result<Vec<ChannelFrame>> {
    env.validate()?;
    if !(config.frame_rate > 0.0) || !(config.carrier_hz > 0.0) || !(config.est_noise_sigma >= 0.0)
    {
        return Err(Error::config("invalid channel config"));
    }
    let Some(first) = flight.first() else {
        return Ok(Vec::new());
    };
    let t0 = first.timestamp;
    let t_end = flight[flight.len() - 1].timestamp;
    let frame_dt = 1.0 / config.frame_rate;
    let n_frames = ((t_end - t0) / frame_dt + 1e-9).floor() as usize + 1;
    let mut fading = FadingState::new(env, seed);
    let mut frames = Vec::with_capacity(n_frames);
    let mut cursor = 0usize;
    for n in 0..n_frames {
        let t = t0 + n as f64 * frame_dt;
        while cursor + 1 < flight.len() && flight[cursor + 1].timestamp <= t + 1e-12 {
            cursor += 1;
        }
        let state = flight[cursor];
        if n > 0 {
            fading.evolve(frame_dt, state.speed, config.carrier_hz, env);
        }
        let truth = fading.render_true(env, state.distance, t);
        let observed = fading.estimate(&truth, config.est_noise_sigma);
        frames.push(ChannelFrame {
            truth,
            observed,
            flight: FlightState {
                timestamp: t,
                ..state
            },
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_env() -> EnvironmentSpec {
        EnvironmentSpec {
            name: "flat".into(),
            path_loss_exponent: 2.0,
            pl0: 0.0,
            shadowing_sigma: 0.0,
            rician_k: f64::INFINITY,
            n_taps: 1,
            tap_delay_spread: 0.0,
            shadow_decorrelation: 20.0,
            tap_decay_db: 3.0,
        }
    }

    #[test]
    fn coherence_time_values() {
        let t = coherence_time(20.0, 2.4e9).unwrap();
        assert!((t * 1e3 - 2.644).abs() < 1e-3, "{t}");
        assert!((coherence_time(5.0, 2.4e9).unwrap() * 1e3 - 10.575).abs() < 1e-9);
        assert_eq!(coherence_time(0.0, 2.4e9).unwrap(), f64::INFINITY);
        assert!(matches!(coherence_time(-1.0, 2.4e9), Err(Error::Domain(_))));
    }

    #[test]
    fn reciprocity() {
        assert!(reciprocity_valid(10e-6, 20.0, 2.4e9).unwrap());
        assert!(!reciprocity_valid(5e-3, 20.0, 2.4e9).unwrap());
        assert!(reciprocity_valid(1e6, 0.0, 2.4e9).unwrap());
    }

    #[test]
    fn log_distance_path_loss() {
        let mut env = flat_env();
        env.pl0 = 40.0;
        assert_eq!(path_loss_db(&env, 1.0), 40.0);
        assert!((path_loss_db(&env, 10.0) - 60.0).abs() < 1e-12);
        env.path_loss_exponent = 2.7;
        assert!((path_loss_db(&env, 100.0) - 94.0).abs() < 1e-12);
        let pl = path_loss(&env, 0.2);
        assert!(pl.clamped);
        assert_eq!(pl.db, 40.0);
    }

    #[test]
    fn static_channel_does_not_change() {
        let env = EnvironmentSpec::preset("grove").unwrap();
        let state = FadingState::new(&env, 9);
        let before = state.taps();
        let shadow = state.shadowing;
        let after = evolve_fading(state, 0.05, 0.0, 2.4e9, &env);
        assert_eq!(before, after.taps());
        assert_eq!(shadow, after.shadowing);
    }

    #[test]
    fn pure_los_tap_is_constant() {
        let mut env = EnvironmentSpec::preset("square").unwrap();
        env.rician_k = f64::INFINITY;
        let mut state = FadingState::new(&env, 1);
        let mag0 = state.taps()[0].norm();
        for _ in 0..200 {
            state.evolve(0.005, 10.0, 2.4e9, &env);
            assert!((state.taps()[0].norm() - mag0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_tap_channel_is_flat() {
        let state = FadingState::from_taps(vec![Complex64::new(1.0, 0.0)], 0);
        let mut env = flat_env();
        env.pl0 = 0.0;
        let cs = state.render_true(&env, 1.0, 0.0);
        assert_eq!(cs.csi.len(), NUM_SUBCARRIERS);
        assert!(cs.csi.iter().all(|c| (c.norm() - 1.0).abs() < 1e-12));
        assert!((cs.rssi - TX_POWER_DBM).abs() < 1e-12);
    }

    #[test]
    fn two_equal_taps_produce_a_null() {
        // Null at k = 5 when pi·k·df·tau = pi/2.
        let tau = 1.0 / (2.0 * 5.0 * SUBCARRIER_SPACING_HZ);
        let mut env = flat_env();
        env.n_taps = 2;
        env.tap_delay_spread = tau;
        let one = Complex64::new(1.0, 0.0);
        let cs = FadingState::from_taps(vec![one, one], 0).render_true(&env, 1.0, 0.0);
        let peak = cs.csi.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let min = cs.csi.iter().map(|c| c.norm()).fold(f64::INFINITY, f64::min);
        // |1 + e^{-i 2π k df tau}| = 2|cos(π k df tau)|
        for (k, c) in subcarrier_indices().zip(&cs.csi) {
            let expect = 2.0 * (std::f64::consts::PI * k as f64 * SUBCARRIER_SPACING_HZ * tau).cos().abs();
            assert!((c.norm() - expect).abs() < 1e-9);
        }
        assert!(min < 0.1 * peak);
    }

    #[test]
    fn rssi_tracks_path_loss() {
        let state = FadingState::from_taps(vec![Complex64::new(1.0, 0.0)], 0);
        let mut env = flat_env();
        let base = state.render_true(&env, 1.0, 0.0);
        env.pl0 = 60.0;
        let lossy = state.render_true(&env, 1.0, 0.0);
        assert!((base.rssi - lossy.rssi - 60.0).abs() < 1e-9);
        let ratio = lossy.csi[0].norm() / base.csi[0].norm();
        assert!((ratio - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn estimation_noise_leaves_rssi() {
        let env = EnvironmentSpec::preset("pool").unwrap();
        let mut state = FadingState::new(&env, 4);
        let truth = state.render_true(&env, 30.0, 0.0);
        let est = state.estimate(&truth, 0.05);
        assert_eq!(est.rssi, truth.rssi);
        assert_ne!(est.csi, truth.csi);
        let same = render_csi(&mut state, &env, 30.0, 0.0);
        assert_eq!(same.csi, truth.csi);
    }

    #[test]
    fn presets_are_valid() {
        for name in ["square", "playground", "pool", "grove"] {
            EnvironmentSpec::preset(name).unwrap().validate().unwrap();
        }
        assert!(EnvironmentSpec::preset("moon").is_err());
        let mut env = flat_env();
        env.path_loss_exponent = 5.0;
        assert!(env.validate().is_err());
    }
}
