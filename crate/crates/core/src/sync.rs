//! Sensor/channel synchronization, trace labeling and feature
//! standardization.
//!
//! # Trace file layout (version 1)
//!
//! A trace is a directory with three files:
//!
//! * `meta.json`: `{"version":1,"environment":..,"n_subcarriers":..,"metadata":{..}}`
//! * `index.csv`: one row per sample with header
//!   `version,index,channel_time,rssi,flight_time,pos_x,pos_y,pos_z,distance,speed,accel,label,csi_offset`.
//!   `csi_offset` is the byte offset of the sample's CSI block in `csi.bin`.
//! * `csi.bin`: the 8-byte magic `SRTRACE\0`, then little-endian `u32`
//!   version, `u32` subcarrier count, `u64` sample count, then for each
//!   sample `n_subcarriers` pairs of `f64` (re, im).

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelState;
use crate::error::{Error, Result};
use crate::flightsim::FlightState;
use crate::phy::{McsIndex, Phy};

pub const TRACE_VERSION: u32 = 1;
const TRACE_MAGIC: &[u8; 8] = b"SRTRACE\0";
/// Width of the flight-state feature vector: `(d, v, a, rssi)`.
pub const STATE_FEATURES: usize = 4;

fn check_sorted(name: &str, times: impl Iterator<Item = f64>) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for (i, t) in times.enumerate() {
        if !(t >= prev) {
            return Err(Error::precondition(format!(
                "{name} timestamps not sorted at position {i}"
            )));
        }
        prev = t;
    }
    Ok(())
}

/// Pairs every channel measurement with the sensor sample nearest in time,
/// breaking ties toward the earlier sample.
pub fn align(
    channel: &[ChannelState],
    sensors: &[FlightState],
) -> Result<Vec<(ChannelState, FlightState)>> {
    if channel.is_empty() || sensors.is_empty() {
        return Err(Error::precondition("align needs non-empty channel and sensor series"));
    }
    check_sorted("channel", channel.iter().map(|c| c.timestamp))?;
    check_sorted("sensor", sensors.iter().map(|s| s.timestamp))?;
    let mut j = 0usize;
    Ok(channel
        .iter()
        .map(|c| {
            while j + 1 < sensors.len()
                && (sensors[j + 1].timestamp - c.timestamp).abs()
                    < (sensors[j].timestamp - c.timestamp).abs()
            {
                j += 1;
            }
            (c.clone(), sensors[j])
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub channel: ChannelState,
    pub flight: FlightState,
    pub label: McsIndex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub environment: String,
    pub metadata: serde_json::Value,
    pub samples: Vec<LabeledSample>,
}

impl LabeledTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Labels each aligned sample with the optimal MCS of its own channel.
pub fn build_labeled_trace(
    aligned: Vec<(ChannelState, FlightState)>,
    phy: &Phy,
    environment: &str,
) -> Result<LabeledTrace> {
    build_labeled_trace_with(aligned, environment, |_, c| phy.optimal_mcs(c))
}

/// Labels aligned samples through an arbitrary oracle, e.g. one that reads
/// the noiseless channel while the sample keeps the estimated one.
pub fn build_labeled_trace_with(
    aligned: Vec<(ChannelState, FlightState)>,
    environment: &str,
    mut oracle: impl FnMut(usize, &ChannelState) -> McsIndex,
) -> Result<LabeledTrace> {
    if aligned.is_empty() {
        return Err(Error::precondition("cannot label an empty trace"));
    }
    let samples = aligned
        .into_iter()
        .enumerate()
        .map(|(i, (channel, flight))| {
            let label = oracle(i, &channel);
            LabeledSample {
                channel,
                flight,
                label,
            }
        })
        .collect();
    Ok(LabeledTrace {
        environment: environment.to_string(),
        metadata: serde_json::Value::Null,
        samples,
    })
}

/// Model input for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    /// Real plane followed by imaginary plane, `2 × n_subcarriers` values.
    pub csi: Vec<f64>,
    /// Standardized `(d, v, a, rssi)`.
    pub state: [f64; STATE_FEATURES],
}

/// CSI scaled to unit mean power and rotated so the subcarrier sum is real
/// and non-negative, as two planes. Absolute level is carried separately by
/// the RSSI feature; the common phase carries no rate information.
fn csi_planes(csi: &[Complex64]) -> Vec<f64> {
    let power = csi.iter().map(|c| c.norm_sqr()).sum::<f64>() / csi.len().max(1) as f64;
    let total: Complex64 = csi.iter().sum();
    let rotation = if total.norm() > 0.0 { total.conj() / total.norm() } else { Complex64::new(1.0, 0.0) };
    let scale = if power > 0.0 { rotation / power.sqrt() } else { Complex64::new(0.0, 0.0) };
    let aligned: Vec<Complex64> = csi.iter().map(|c| c * scale).collect();
    let mut planes = Vec::with_capacity(2 * csi.len());
    planes.extend(aligned.iter().map(|c| c.re));
    planes.extend(aligned.iter().map(|c| c.im));
    planes
}

fn raw_state(channel: &ChannelState, flight: &FlightState) -> [f64; STATE_FEATURES] {
    [flight.distance, flight.speed, flight.accel, channel.rssi]
}

/// Per-feature mean/std computed on the offline training set and frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub csi_mean: Vec<f64>,
    pub csi_std: Vec<f64>,
    pub state_mean: [f64; STATE_FEATURES],
    pub state_std: [f64; STATE_FEATURES],
}

fn mean_std(columns: usize, rows: impl Iterator<Item = Vec<f64>>) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; columns];
    let mut sum_sq = vec![0.0; columns];
    let mut n = 0usize;
    for row in rows {
        for (k, x) in row.iter().enumerate() {
            sum[k] += x;
            sum_sq[k] += x * x;
        }
        n += 1;
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            let var = (sq / n - m * m).max(0.0);
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl Standardizer {
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a LabeledSample> + Clone) -> Result<Self> {
        let n_sc = samples
            .clone()
            .into_iter()
            .next()
            .ok_or_else(|| Error::config("cannot fit standardization on an empty set"))?
            .channel
            .csi
            .len();
        let (csi_mean, csi_std) = mean_std(
            2 * n_sc,
            samples.clone().into_iter().map(|s| csi_planes(&s.channel.csi)),
        );
        let (sm, ss) = mean_std(
            STATE_FEATURES,
            samples
                .into_iter()
                .map(|s| raw_state(&s.channel, &s.flight).to_vec()),
        );
        Ok(Standardizer {
            csi_mean,
            csi_std,
            state_mean: sm.try_into().expect("state width"),
            state_std: ss.try_into().expect("state width"),
        })
    }

    pub fn n_subcarriers(&self) -> usize {
        self.csi_mean.len() / 2
    }

    pub fn featurize(&self, channel: &ChannelState, flight: &FlightState) -> Result<Features> {
        if channel.csi.len() != self.n_subcarriers() {
            return Err(Error::config(format!(
                "standardization built for {} subcarriers, sample has {}",
                self.n_subcarriers(),
                channel.csi.len()
            )));
        }
        let csi = csi_planes(&channel.csi)
            .iter()
            .zip(self.csi_mean.iter().zip(&self.csi_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect();
        let raw = raw_state(channel, flight);
        let state = std::array::from_fn(|k| (raw[k] - self.state_mean[k]) / self.state_std[k]);
        Ok(Features { csi, state })
    }
}

/// Featurizes a sample; fails when no standardization constants exist.
pub fn featurize(sample: &LabeledSample, standardizer: Option<&Standardizer>) -> Result<Features> {
    standardizer
        .ok_or_else(|| Error::config("featurize called without standardization constants"))?
        .featurize(&sample.channel, &sample.flight)
}

#[derive(Serialize, Deserialize)]
struct TraceMeta {
    version: u32,
    environment: String,
    n_subcarriers: usize,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct IndexRow {
    version: u32,
    index: usize,
    channel_time: f64,
    rssi: f64,
    flight_time: f64,
    pos_x: f64,
    pos_y: f64,
    pos_z: f64,
    distance: f64,
    speed: f64,
    accel: f64,
    label: usize,
    csi_offset: u64,
}

const BIN_HEADER: u64 = 8 + 4 + 4 + 8;

pub fn write_trace(trace: &LabeledTrace, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n_sc = trace.samples.first().map_or(0, |s| s.channel.csi.len());
    if trace.samples.iter().any(|s| s.channel.csi.len() != n_sc) {
        return Err(Error::config("trace samples have differing subcarrier counts"));
    }
    let meta = TraceMeta {
        version: TRACE_VERSION,
        environment: trace.environment.clone(),
        n_subcarriers: n_sc,
        metadata: trace.metadata.clone(),
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;

    let bin_path = dir.join("csi.bin");
    let file = fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut bin = BufWriter::new(file);
    let mut header = Vec::with_capacity(BIN_HEADER as usize);
    header.extend_from_slice(TRACE_MAGIC);
    header.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    header.extend_from_slice(&(n_sc as u32).to_le_bytes());
    header.extend_from_slice(&(trace.samples.len() as u64).to_le_bytes());
    bin.write_all(&header).map_err(|e| Error::io(&bin_path, e))?;

    let csv_path = dir.join("index.csv");
    let mut index = csv::Writer::from_path(&csv_path)?;
    let block = (n_sc * 16) as u64;
    for (i, s) in trace.samples.iter().enumerate() {
        for c in &s.channel.csi {
            bin.write_all(&c.re.to_le_bytes())
                .and_then(|_| bin.write_all(&c.im.to_le_bytes()))
                .map_err(|e| Error::io(&bin_path, e))?;
        }
        index.serialize(IndexRow {
            version: TRACE_VERSION,
            index: i,
            channel_time: s.channel.timestamp,
            rssi: s.channel.rssi,
            flight_time: s.flight.timestamp,
            pos_x: s.flight.position[0],
            pos_y: s.flight.position[1],
            pos_z: s.flight.position[2],
            distance: s.flight.distance,
            speed: s.flight.speed,
            accel: s.flight.accel,
            label: s.label.get(),
            csi_offset: BIN_HEADER + i as u64 * block,
        })?;
    }
    bin.flush().map_err(|e| Error::io(&bin_path, e))?;
    index.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

pub fn read_trace(dir: &Path) -> Result<LabeledTrace> {
    let meta_path = dir.join("meta.json");
    let meta: TraceMeta = serde_json::from_slice(
        &fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
    )?;
    if meta.version != TRACE_VERSION {
        return Err(Error::format(
            &meta_path,
            format!("unsupported trace version {}", meta.version),
        ));
    }
    let bin_path = dir.join("csi.bin");
    let mut bytes = Vec::new();
    fs::File::open(&bin_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() < BIN_HEADER as usize || &bytes[..8] != TRACE_MAGIC {
        return Err(Error::format(&bin_path, "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(8);
    let n_sc = u32_at(12) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if version != TRACE_VERSION || n_sc != meta.n_subcarriers {
        return Err(Error::format(&bin_path, "header disagrees with meta.json"));
    }
    let block = n_sc * 16;
    if bytes.len() != BIN_HEADER as usize + count * block {
        return Err(Error::format(&bin_path, "truncated CSI blocks"));
    }
    let csv_path = dir.join("index.csv");
    let mut reader = csv::Reader::from_path(&csv_path)?;
    let mut samples = Vec::with_capacity(count);
    for row in reader.deserialize() {
        let row: IndexRow = row?;
        if row.version != TRACE_VERSION || row.index != samples.len() {
            return Err(Error::format(&csv_path, format!("bad row {}", row.index)));
        }
        let start = row.csi_offset as usize;
        if start + block > bytes.len() {
            return Err(Error::format(&csv_path, "csi_offset out of range"));
        }
        let csi = (0..n_sc)
            .map(|k| Complex64::new(f64_at(start + 16 * k), f64_at(start + 16 * k + 8)))
            .collect();
        samples.push(LabeledSample {
            channel: ChannelState {
                csi,
                rssi: row.rssi,
                timestamp: row.channel_time,
            },
            flight: FlightState {
                timestamp: row.flight_time,
                position: [row.pos_x, row.pos_y, row.pos_z],
                distance: row.distance,
                speed: row.speed,
                accel: row.accel,
            },
            label: McsIndex::new(row.label)?,
        });
    }
    if samples.len() != count {
        return Err(Error::format(&csv_path, "row count disagrees with csi.bin"));
    }
    Ok(LabeledTrace {
        environment: meta.environment,
        metadata: meta.metadata,
        samples,
    })
}
