//! 802.11 MCS table, effective SNR, packet error model and throughput
//! accounting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelState, NOISE_FLOOR_DBM, TX_POWER_DBM};
use crate::error::{Error, Result};

pub const NUM_MCS: usize = 8;
const DATA_SUBCARRIERS: f64 = 48.0;
const SYMBOL_TIME_US: f64 = 4.0;
/// Loss-rate bound that defines the optimal (label) MCS.
pub const OPTIMAL_PER_BOUND: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct McsIndex(u8);

impl McsIndex {
    pub const LOWEST: McsIndex = McsIndex(0);
    pub const HIGHEST: McsIndex = McsIndex(NUM_MCS as u8 - 1);

    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_MCS {
            Ok(McsIndex(index as u8))
        } else {
            Err(Error::domain(format!("MCS index {index} outside 0..{NUM_MCS}")))
        }
    }

    /// Clamps into the table instead of failing.
    pub fn saturating(index: usize) -> Self {
        McsIndex(index.min(NUM_MCS - 1) as u8)
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl DoubleEndedIterator<Item = McsIndex> {
        (0..NUM_MCS as u8).map(McsIndex)
    }

    /// One-hot label vector.
    pub fn one_hot(self) -> [f64; NUM_MCS] {
        let mut v = [0.0; NUM_MCS];
        v[self.get()] = 1.0;
        v
    }
}

impl std::fmt::Display for McsIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MCS{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modulation {
    Bpsk,
    Qpsk,
    Qam16,
    Qam64,
}

impl Modulation {
    pub const ALL: [Modulation; 4] = [
        Modulation::Bpsk,
        Modulation::Qpsk,
        Modulation::Qam16,
        Modulation::Qam64,
    ];

    pub fn bits_per_symbol(self) -> u32 {
        match self {
            Modulation::Bpsk => 1,
            Modulation::Qpsk => 2,
            Modulation::Qam16 => 4,
            Modulation::Qam64 => 6,
        }
    }

    fn slot(self) -> usize {
        match self {
            Modulation::Bpsk => 0,
            Modulation::Qpsk => 1,
            Modulation::Qam16 => 2,
            Modulation::Qam64 => 3,
        }
    }

    /// Uncoded AWGN bit error rate is `scale · Q(sqrt(arg · γ))`.
    fn ber_coefficients(self) -> (f64, f64) {
        match self {
            Modulation::Bpsk => (1.0, 2.0),
            Modulation::Qpsk => (1.0, 1.0),
            Modulation::Qam16 | Modulation::Qam64 => {
                let m = f64::from(1u32 << self.bits_per_symbol());
                let k = f64::from(self.bits_per_symbol());
                (4.0 / k * (1.0 - 1.0 / m.sqrt()), 3.0 / (m - 1.0))
            }
        }
    }

    /// Natural log of the uncoded BER at linear symbol SNR `gamma`.
    pub fn ln_ber(self, gamma: f64) -> f64 {
        let (scale, arg) = self.ber_coefficients();
        scale.ln() + ln_q(((arg * gamma).max(0.0)).sqrt())
    }

    pub fn ber(self, gamma: f64) -> f64 {
        self.ln_ber(gamma).exp()
    }
}

/// `ln Q(x)` for `x >= 0`, accurate far into the tail.
pub fn ln_q(x: f64) -> f64 {
    if x < 30.0 {
        (0.5 * libm::erfc(x / std::f64::consts::SQRT_2)).ln()
    } else {
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        -0.5 * x2 - (x * (2.0 * std::f64::consts::PI).sqrt()).ln() + series.ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McsEntry {
    pub index: McsIndex,
    pub modulation: Modulation,
    /// Code rate as `(numerator, denominator)`.
    pub code_rate: (u32, u32),
    pub bits_per_symbol: u32,
    pub data_rate_mbps: f64,
    /// SNR (dB) at which the PER curve crosses 50%.
    pub snr_threshold: f64,
}

impl McsEntry {
    pub fn code_rate_f64(&self) -> f64 {
        f64::from(self.code_rate.0) / f64::from(self.code_rate.1)
    }
}

const TABLE: [(Modulation, (u32, u32)); NUM_MCS] = [
    (Modulation::Bpsk, (1, 2)),
    (Modulation::Bpsk, (3, 4)),
    (Modulation::Qpsk, (1, 2)),
    (Modulation::Qpsk, (3, 4)),
    (Modulation::Qam16, (1, 2)),
    (Modulation::Qam16, (3, 4)),
    (Modulation::Qam64, (2, 3)),
    (Modulation::Qam64, (3, 4)),
];

pub const DEFAULT_SNR_THRESHOLDS: [f64; NUM_MCS] = [2.0, 5.0, 8.0, 11.0, 15.0, 19.0, 22.0, 25.0];

/// The eight-rate table with the default PER thresholds.
pub fn mcs_table() -> [McsEntry; NUM_MCS] {
    mcs_table_with(&DEFAULT_SNR_THRESHOLDS)
}

pub fn mcs_table_with(thresholds: &[f64; NUM_MCS]) -> [McsEntry; NUM_MCS] {
    std::array::from_fn(|i| {
        let (modulation, code_rate) = TABLE[i];
        let bits = modulation.bits_per_symbol();
        let rate = f64::from(code_rate.0) / f64::from(code_rate.1);
        McsEntry {
            index: McsIndex(i as u8),
            modulation,
            code_rate,
            bits_per_symbol: bits,
            data_rate_mbps: DATA_SUBCARRIERS * f64::from(bits) * rate / SYMBOL_TIME_US,
            snr_threshold: thresholds[i],
        }
    })
}

fn default_payload_bits() -> u32 {
    1500 * 8
}

/// Link-level parameters shared by labeling, transmission and adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhyConfig {
    pub snr_thresholds: [f64; NUM_MCS],
    /// Logistic PER slope, 1/dB.
    pub per_slope: f64,
    #[serde(default = "default_payload_bits")]
    pub payload_bits: u32,
    /// Preamble and MAC overhead per frame, seconds.
    pub overhead: f64,
    pub tx_power_dbm: f64,
    pub noise_floor_dbm: f64,
}

impl Default for PhyConfig {
    fn default() -> Self {
        PhyConfig {
            snr_thresholds: DEFAULT_SNR_THRESHOLDS,
            per_slope: 2.0,
            payload_bits: default_payload_bits(),
            overhead: 60e-6,
            tx_power_dbm: TX_POWER_DBM,
            noise_floor_dbm: NOISE_FLOOR_DBM,
        }
    }
}

impl PhyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr_thresholds.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("snr_thresholds must be strictly increasing"));
        }
        if !(self.per_slope > 0.0) || self.payload_bits == 0 || !(self.overhead >= 0.0) {
            return Err(Error::config(
                "per_slope and payload_bits must be positive, overhead non-negative",
            ));
        }
        Ok(())
    }

    pub fn table(&self) -> [McsEntry; NUM_MCS] {
        mcs_table_with(&self.snr_thresholds)
    }
}

/// Per-subcarrier SNR in dB; a zero gain maps to `-inf`.
pub fn subcarrier_snr(csi: &ChannelState, tx_power: f64, noise_floor: f64) -> Vec<f64> {
    csi.csi
        .iter()
        .map(|c| tx_power + 20.0 * c.norm().log10() - noise_floor)
        .collect()
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Effective SNR (dB) from a per-subcarrier SNR profile: average the uncoded
/// BER of `modulation` across subcarriers and invert the same BER curve.
pub fn esnr_from_snr(snr_db: &[f64], modulation: Modulation) -> f64 {
    if snr_db.is_empty() {
        return f64::NEG_INFINITY;
    }
    let ln_bers: Vec<f64> = snr_db
        .iter()
        .map(|&s| modulation.ln_ber(if s == f64::NEG_INFINITY { 0.0 } else { db_to_linear(s) }))
        .collect();
    let peak = ln_bers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let target =
        peak + (ln_bers.iter().map(|l| (l - peak).exp()).sum::<f64>() / ln_bers.len() as f64).ln();
    let finite = snr_db.iter().copied().filter(|s| s.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min).max(-100.0) - 1.0;
    let hi = finite.fold(f64::NEG_INFINITY, f64::max).max(-100.0) + 1.0;
    invert_ln_ber(target, modulation, lo, hi)
}

fn invert_ln_ber(target: f64, modulation: Modulation, lo: f64, hi: f64) -> f64 {
    if target >= modulation.ln_ber(0.0) {
        return f64::NEG_INFINITY;
    }
    // ln BER is strictly decreasing in SNR and the target lies between the
    // subcarrier extremes; Illinois regula falsi on that bracket.
    let f = |x: f64| modulation.ln_ber(db_to_linear(x)) - target;
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (f(a), f(b));
    while fa <= 0.0 {
        b = a;
        fb = fa;
        a -= 50.0;
        fa = f(a);
    }
    while fb >= 0.0 {
        a = b;
        fa = fb;
        b += 50.0;
        fb = f(b);
    }
    let mut side = 0i8;
    for _ in 0..100 {
        let c = (a * fb - b * fa) / (fb - fa);
        let fc = f(c);
        if fc == 0.0 || (b - a).abs() < 1e-10 {
            return c;
        }
        if fc > 0.0 {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        } else {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        }
        if (b - a).abs() < 1e-10 {
            break;
        }
    }
    0.5 * (a + b)
}

/// Logistic packet error rate at effective SNR `esnr` for threshold `threshold`.
pub fn logistic_per(esnr: f64, threshold: f64, slope: f64) -> f64 {
    if esnr == f64::NEG_INFINITY {
        return 1.0;
    }
    let z = slope * (esnr - threshold);
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// One attempted frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransmissionRecord {
    pub frame_index: usize,
    pub mcs: McsIndex,
    pub success: bool,
    pub payload_bits: u32,
    /// Seconds.
    pub airtime: f64,
}

/// Effective SNR of one channel for every modulation, computed once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsnrProfile([f64; 4]);

impl EsnrProfile {
    pub fn get(&self, modulation: Modulation) -> f64 {
        self.0[modulation.slot()]
    }
}

/// Link model: MCS table plus PER curves under a [`PhyConfig`].
#[derive(Debug, Clone)]
pub struct Phy {
    config: PhyConfig,
    table: [McsEntry; NUM_MCS],
}

impl Default for Phy {
    fn default() -> Self {
        Phy::new(PhyConfig::default()).expect("default config is valid")
    }
}

impl Phy {
    pub fn new(config: PhyConfig) -> Result<Self> {
        config.validate()?;
        let table = config.table();
        Ok(Phy { config, table })
    }

    pub fn config(&self) -> &PhyConfig {
        &self.config
    }

    pub fn table(&self) -> &[McsEntry; NUM_MCS] {
        &self.table
    }

    pub fn entry(&self, mcs: McsIndex) -> &McsEntry {
        &self.table[mcs.get()]
    }

    pub fn subcarrier_snr(&self, csi: &ChannelState) -> Vec<f64> {
        subcarrier_snr(csi, self.config.tx_power_dbm, self.config.noise_floor_dbm)
    }

    /// Wideband SNR implied by the RSSI.
    pub fn rssi_snr(&self, csi: &ChannelState) -> f64 {
        csi.rssi - (self.config.tx_power_dbm - TX_POWER_DBM) - self.config.noise_floor_dbm
    }

    pub fn esnr_profile(&self, csi: &ChannelState) -> EsnrProfile {
        let snr = self.subcarrier_snr(csi);
        EsnrProfile(Modulation::ALL.map(|m| esnr_from_snr(&snr, m)))
    }

    pub fn esnr(&self, csi: &ChannelState, mcs: McsIndex) -> f64 {
        esnr_from_snr(&self.subcarrier_snr(csi), self.entry(mcs).modulation)
    }

    pub fn per_at_esnr(&self, mcs: McsIndex, esnr: f64) -> f64 {
        logistic_per(esnr, self.entry(mcs).snr_threshold, self.config.per_slope)
    }

    pub fn per_profile(&self, profile: &EsnrProfile) -> [f64; NUM_MCS] {
        std::array::from_fn(|i| {
            let e = &self.table[i];
            self.per_at_esnr(e.index, profile.get(e.modulation))
        })
    }

    /// Packet error rate of `mcs` on channel `csi`.
    pub fn per(&self, mcs: McsIndex, csi: &ChannelState, payload_bits: u32) -> Result<f64> {
        if payload_bits == 0 {
            return Err(Error::domain("payload_bits must be positive"));
        }
        Ok(self.per_at_esnr(mcs, self.esnr(csi, mcs)))
    }

    pub fn airtime(&self, mcs: McsIndex, payload_bits: u32) -> f64 {
        self.config.overhead + f64::from(payload_bits) / (self.entry(mcs).data_rate_mbps * 1e6)
    }

    /// Draws the outcome of one frame with known PER.
    pub fn transmit_with_per<R: Rng + ?Sized>(
        &self,
        frame_index: usize,
        mcs: McsIndex,
        per: f64,
        payload_bits: u32,
        rng: &mut R,
    ) -> TransmissionRecord {
        let u: f64 = rng.random();
        TransmissionRecord {
            frame_index,
            mcs,
            success: u >= per,
            payload_bits,
            airtime: self.airtime(mcs, payload_bits),
        }
    }

    pub fn simulate_tx<R: Rng + ?Sized>(
        &self,
        frame_index: usize,
        mcs: McsIndex,
        csi: &ChannelState,
        payload_bits: u32,
        rng: &mut R,
    ) -> Result<TransmissionRecord> {
        let per = self.per(mcs, csi, payload_bits)?;
        Ok(self.transmit_with_per(frame_index, mcs, per, payload_bits, rng))
    }

    /// Highest MCS whose PER is below the 10% bound, from a precomputed PER row.
    pub fn optimal_from_pers(pers: &[f64; NUM_MCS]) -> McsIndex {
        McsIndex::all()
            .rev()
            .find(|m| pers[m.get()] < OPTIMAL_PER_BOUND)
            .unwrap_or(McsIndex::LOWEST)
    }

    /// Label oracle: highest MCS with PER < 10%, falling back to index 0.
    pub fn optimal_mcs(&self, csi: &ChannelState) -> McsIndex {
        Self::optimal_from_pers(&self.per_profile(&self.esnr_profile(csi)))
    }
}

/// Goodput in Mbps: delivered payload bits over total airtime.
pub fn throughput(records: &[TransmissionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::domain("throughput of an empty record set"));
    }
    let bits: f64 = records
        .iter()
        .filter(|r| r.success)
        .map(|r| f64::from(r.payload_bits))
        .sum();
    let time: f64 = records.iter().map(|r| r.airtime).sum();
    Ok(bits / time / 1e6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_channel(snr_db: f64) -> ChannelState {
        let mag = 10f64.powf((snr_db + NOISE_FLOOR_DBM - TX_POWER_DBM) / 20.0);
        ChannelState::from_csi(vec![Complex64::new(mag, 0.0); 52], 0.0)
    }

    #[test]
    fn table_rates() {
        let t = mcs_table();
        assert_eq!(t[0].modulation, Modulation::Bpsk);
        assert_eq!(t[0].code_rate, (1, 2));
        assert!((t[0].data_rate_mbps - 6.0).abs() < 1e-12);
        assert_eq!(t[7].modulation, Modulation::Qam64);
        assert!((t[7].data_rate_mbps - 54.0).abs() < 1e-12);
        let rates: Vec<f64> = t.iter().map(|e| e.data_rate_mbps).collect();
        assert_eq!(rates, vec![6.0, 9.0, 12.0, 18.0, 24.0, 36.0, 48.0, 54.0]);
        assert!(t.windows(2).all(|w| w[1].snr_threshold > w[0].snr_threshold));
    }

    #[test]
    fn snr_per_subcarrier() {
        let cs = ChannelState::from_csi(vec![Complex64::new(1.0, 0.0); 52], 0.0);
        let snr = subcarrier_snr(&cs, 20.0, -90.0);
        assert!(snr.iter().all(|&s| (s - 110.0).abs() < 1e-12));
        let half = ChannelState::from_csi(vec![Complex64::new(0.5, 0.0); 52], 0.0);
        let drop = snr[0] - subcarrier_snr(&half, 20.0, -90.0)[0];
        assert!((drop - 6.0206).abs() < 1e-4);
        let mut csi = vec![Complex64::new(1.0, 0.0); 52];
        csi[3] = Complex64::new(0.0, 0.0);
        let s = subcarrier_snr(&ChannelState::from_csi(csi, 0.0), 20.0, -90.0);
        assert_eq!(s[3], f64::NEG_INFINITY);
    }

    #[test]
    fn ln_q_is_continuous_at_the_switch() {
        let below = (0.5 * libm::erfc(29.999999 / std::f64::consts::SQRT_2)).ln();
        assert!((ln_q(30.0) - below).abs() < 1e-4);
        assert!((ln_q(0.0) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn esnr_flat_fixed_point() {
        let phy = Phy::default();
        for snr in [-3.0, 4.0, 12.5, 25.0, 60.0, 110.0] {
            let cs = flat_channel(snr);
            for m in McsIndex::all() {
                assert!((phy.esnr(&cs, m) - snr).abs() < 0.01, "{snr} {m}");
            }
        }
        let zero = ChannelState::from_csi(vec![Complex64::new(0.0, 0.0); 52], 0.0);
        assert_eq!(phy.esnr(&zero, McsIndex::LOWEST), f64::NEG_INFINITY);
    }

    #[test]
    fn esnr_penalizes_a_deep_null() {
        let phy = Phy::default();
        let mut cs = flat_channel(25.0);
        cs.csi[10] *= 1e-3;
        for m in McsIndex::all() {
            assert!(phy.esnr(&cs, m) < 25.0);
        }
    }

    #[test]
    fn per_logistic() {
        let phy = Phy::default();
        let thr = phy.entry(McsIndex(4)).snr_threshold;
        assert!((phy.per_at_esnr(McsIndex(4), thr) - 0.5).abs() < 1e-15);
        assert!(phy.per_at_esnr(McsIndex(4), thr + 10.0) < 1e-8);
        assert_eq!(logistic_per(f64::NEG_INFINITY, 2.0, 2.0), 1.0);
        assert!(phy.per(McsIndex(0), &flat_channel(3.0), 0).is_err());
    }

    #[test]
    fn tx_extremes_and_airtime() {
        let phy = Phy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!(phy.transmit_with_per(0, McsIndex(3), 0.0, 12000, &mut rng).success);
            assert!(!phy.transmit_with_per(0, McsIndex(3), 1.0, 12000, &mut rng).success);
        }
        let r = phy.transmit_with_per(0, McsIndex(0), 0.0, 12000, &mut rng);
        assert!((r.airtime - (60e-6 + 12000.0 / 6e6)).abs() < 1e-15);
    }

    #[test]
    fn tx_failure_rate_matches_per() {
        let phy = Phy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let fails = (0..10_000)
            .filter(|&i| !phy.transmit_with_per(i, McsIndex(2), 0.3, 12000, &mut rng).success)
            .count();
        let rate = fails as f64 / 10_000.0;
        assert!((0.28..=0.32).contains(&rate), "{rate}");
    }

    #[test]
    fn optimal_mcs_rule() {
        let phy = Phy::default();
        assert_eq!(phy.optimal_mcs(&flat_channel(60.0)), McsIndex::HIGHEST);
        assert_eq!(phy.optimal_mcs(&flat_channel(-20.0)), McsIndex::LOWEST);
        let pers = [0.0, 0.0, 0.01, 0.02, 0.05, 0.3, 0.6, 0.9];
        assert_eq!(Phy::optimal_from_pers(&pers), McsIndex(4));
    }

    #[test]
    fn throughput_accounting() {
        let rec = |success, mcs: u8, airtime| TransmissionRecord {
            frame_index: 0,
            mcs: McsIndex(mcs),
            success,
            payload_bits: 12000,
            airtime,
        };
        let all: Vec<_> = (0..10).map(|_| rec(true, 0, 12000.0 / 6e6)).collect();
        assert!((throughput(&all).unwrap() - 6.0).abs() < 1e-12);
        let alt: Vec<_> = (0..10).map(|i| rec(i % 2 == 0, 0, 12000.0 / 6e6)).collect();
        assert!((throughput(&alt).unwrap() - 3.0).abs() < 1e-12);
        // 2 successes of 12 kbit over 2 ms + 1 ms + 0.5 ms.
        let mixed = vec![rec(true, 0, 2e-3), rec(false, 3, 1e-3), rec(true, 7, 0.5e-3)];
        assert!((throughput(&mixed).unwrap() - 24000.0 / 3.5e-3 / 1e6).abs() < 1e-9);
        assert!(throughput(&[]).is_err());
    }
}
