//! Seeded UAV trajectory generation and sensor sampling.
//!
//! The ground receiver sits at the origin; `z` is altitude. Every generator
//! is a pure function of its [`TrajectorySpec`] and step size, so the same
//! spec always yields the same state series.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Motion state of the UAV at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlightState {
    pub timestamp: f64,
    pub position: Vec3,
    /// Straight-line distance to the receiver, meters.
    pub distance: f64,
    /// Speed magnitude, m/s.
    pub speed: f64,
    /// Acceleration magnitude, m/s².
    pub accel: f64,
}

impl FlightState {
    fn from_kinematics(timestamp: f64, position: Vec3, velocity: Vec3, accel: Vec3) -> Self {
        FlightState {
            timestamp,
            position,
            distance: norm(position),
            speed: norm(velocity),
            accel: norm(accel),
        }
    }

    /// `(d, v, a)` as used by the prediction network.
    pub fn state_vector(&self) -> [f64; 3] {
        [self.distance, self.speed, self.accel]
    }
}

/// Kind-specific trajectory parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryKind {
    /// Hold position at a horizontal offset from the receiver, with
    /// mean-reverting drift around the anchor.
    Hover { anchor_distance: f64 },
    /// Fly radially away from the receiver at a fixed speed.
    ConstantVelocity { start_distance: f64, speed: f64 },
    /// Sinusoidal back-and-forth motion along the radial axis.
    VariableBackAndForth {
        center_distance: f64,
        max_speed: f64,
        period: f64,
    },
    /// Piecewise-constant-acceleration segments with random headings,
    /// bounded in speed and kept within `max_radius` of the receiver.
    Random {
        speed_cap: f64,
        max_radius: f64,
        #[serde(default = "default_start_distance")]
        start_distance: f64,
        #[serde(default = "default_segment_min")]
        segment_min: f64,
        #[serde(default = "default_segment_max")]
        segment_max: f64,
    },
}

fn default_start_distance() -> f64 {
    20.0
}
fn default_segment_min() -> f64 {
    1.0
}
fn default_segment_max() -> f64 {
    3.0
}
fn default_drift_rate() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    #[serde(flatten)]
    pub kind: TrajectoryKind,
    pub duration: f64,
    pub height: f64,
    /// Stationary standard deviation of hover drift per axis, meters.
    #[serde(default)]
    pub drift_sigma: f64,
    /// Natural frequency (rad/s) of the drift controller.
    #[serde(default = "default_drift_rate")]
    pub drift_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrajectorySpec {
    pub fn hover(anchor_distance: f64, height: f64, duration: f64) -> Self {
        Self::new(TrajectoryKind::Hover { anchor_distance }, height, duration)
    }

    pub fn constant_velocity(start_distance: f64, speed: f64, height: f64, duration: f64) -> Self {
        Self::new(
            TrajectoryKind::ConstantVelocity {
                start_distance,
                speed,
            },
            height,
            duration,
        )
    }

    pub fn back_and_forth(
        center_distance: f64,
        max_speed: f64,
        period: f64,
        height: f64,
        duration: f64,
    ) -> Self {
        Self::new(
            TrajectoryKind::VariableBackAndForth {
                center_distance,
                max_speed,
                period,
            },
            height,
            duration,
        )
    }

    pub fn random(speed_cap: f64, max_radius: f64, height: f64, duration: f64) -> Self {
        Self::new(
            TrajectoryKind::Random {
                speed_cap,
                max_radius,
                start_distance: default_start_distance().min(max_radius),
                segment_min: default_segment_min(),
                segment_max: default_segment_max(),
            },
            height,
            duration,
        )
    }

    fn new(kind: TrajectoryKind, height: f64, duration: f64) -> Self {
        TrajectorySpec {
            kind,
            duration,
            height,
            drift_sigma: 0.0,
            drift_rate: default_drift_rate(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_drift(mut self, sigma: f64) -> Self {
        self.drift_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.duration) {
            return Err(Error::config(format!(
                "trajectory duration must be positive, got {}",
                self.duration
            )));
        }
        if !positive(self.height) {
            return Err(Error::config(format!(
                "trajectory height must be positive, got {}",
                self.height
            )));
        }
        if !(self.drift_sigma >= 0.0) || !positive(self.drift_rate) {
            return Err(Error::config("drift_sigma must be >= 0 and drift_rate > 0"));
        }
        match self.kind {
            TrajectoryKind::Hover { anchor_distance } if !(anchor_distance >= 0.0) => {
                Err(Error::config("hover anchor_distance must be >= 0"))
            }
            TrajectoryKind::ConstantVelocity {
                start_distance,
                speed,
            } if !(start_distance >= 0.0) || !(speed >= 0.0) => Err(Error::config(
                "constant_velocity needs start_distance >= 0 and speed >= 0",
            )),
            TrajectoryKind::VariableBackAndForth {
                center_distance,
                max_speed,
                period,
            } if !(center_distance >= 0.0) || !(max_speed >= 0.0) || !positive(period) => {
                Err(Error::config(
                    "variable_back_and_forth needs center_distance >= 0, max_speed >= 0, period > 0",
                ))
            }
            TrajectoryKind::Random {
                speed_cap,
                max_radius,
                start_distance,
                segment_min,
                segment_max,
            } if !(speed_cap >= 0.0)
                || !positive(max_radius)
                || !(start_distance >= 0.0)
                || !positive(segment_min)
                || segment_max < segment_min =>
            {
                Err(Error::config(
                    "random trajectory needs speed_cap >= 0, max_radius > 0, 0 < segment_min <= segment_max",
                ))
            }
            _ => Ok(()),
        }
    }

    /// Upper bound on generated speed, if the kind declares one.
    pub fn speed_cap(&self) -> Option<f64> {
        match self.kind {
            TrajectoryKind::ConstantVelocity { speed, .. } => Some(speed),
            TrajectoryKind::VariableBackAndForth { max_speed, .. } => Some(max_speed),
            TrajectoryKind::Random { speed_cap, .. } => Some(speed_cap),
            TrajectoryKind::Hover { .. } => None,
        }
    }
}

fn step_count(duration: f64, dt: f64) -> usize {
    // Guard against 60.0 / 0.001 landing a hair above an integer.
    let ratio = duration / dt;
    let rounded = ratio.round();
    if (ratio - rounded).abs() < 1e-9 * ratio.max(1.0) {
        rounded as usize
    } else {
        ratio.ceil() as usize
    }
}

/// Generates `⌈duration/dt⌉` states sampled at `t = n·dt`.
pub fn generate_trajectory(spec: &TrajectorySpec, dt: f64) -> Result<Vec<FlightState>> {
    spec.validate()?;
    if !(dt > 0.0) || dt > spec.duration {
        return Err(Error::config(format!(
            "dt must be in (0, duration], got {dt}"
        )));
    }
    let n = step_count(spec.duration, dt);
    let h = spec.height;
    let states = match spec.kind {
        TrajectoryKind::Hover { anchor_distance } => {
            hover(anchor_distance, h, spec.drift_sigma, spec.drift_rate, spec.seed, n, dt)
        }
        TrajectoryKind::ConstantVelocity {
            start_distance,
            speed,
        } => (0..n)
            .map(|i| {
                let t = i as f64 * dt;
                FlightState::from_kinematics(
                    t,
                    [start_distance + speed * t, 0.0, h],
                    [speed, 0.0, 0.0],
                    [0.0; 3],
                )
            })
            .collect(),
        TrajectoryKind::VariableBackAndForth {
            center_distance,
            max_speed,
            period,
        } => {
            let omega = 2.0 * std::f64::consts::PI / period;
            let amplitude = max_speed / omega;
            (0..n)
                .map(|i| {
                    let t = i as f64 * dt;
                    let phase = omega * t;
                    FlightState::from_kinematics(
                        t,
                        [center_distance + amplitude * phase.sin(), 0.0, h],
                        [max_speed * phase.cos(), 0.0, 0.0],
                        [-max_speed * omega * phase.sin(), 0.0, 0.0],
                    )
                })
                .collect()
        }
        TrajectoryKind::Random {
            speed_cap,
            max_radius,
            start_distance,
            segment_min,
            segment_max,
        } => random_flight(
            RandomFlight {
                speed_cap,
                max_radius,
                start_distance,
                segment_min,
                segment_max,
            },
            h,
            spec.seed,
            n,
            dt,
        ),
    };
    Ok(states)
}

/// Critically damped second-order Ornstein–Uhlenbeck drift around the anchor.
/// Position variance per axis is `sigma²`, velocity variance `(rate·sigma)²`.
fn hover(
    anchor_distance: f64,
    height: f64,
    sigma: f64,
    rate: f64,
    seed: u64,
    n: usize,
    dt: f64,
) -> Vec<FlightState> {
    let anchor = [anchor_distance, 0.0, height];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zeta = 1.0;
    let q = sigma * (4.0 * zeta * rate.powi(3)).sqrt();
    // Start from the stationary distribution so the series has no transient.
    let mut offset = [0.0; 3];
    let mut vel = [0.0; 3];
    if sigma > 0.0 {
        for k in 0..3 {
            offset[k] = sigma * rng.sample::<f64, _>(StandardNormal);
            vel[k] = sigma * rate * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = [0.0; 3];
        for k in 0..3 {
            acc[k] = -rate * rate * offset[k] - 2.0 * zeta * rate * vel[k];
        }
        let mut pos = [0.0; 3];
        for k in 0..3 {
            pos[k] = anchor[k] + offset[k];
        }
        // Keep the airframe above ground even for absurd drift settings.
        pos[2] = pos[2].max(0.1);
        out.push(FlightState::from_kinematics(i as f64 * dt, pos, vel, acc));
        if sigma > 0.0 {
            for k in 0..3 {
                offset[k] += vel[k] * dt + 0.5 * acc[k] * dt * dt;
                vel[k] += acc[k] * dt + q * dt.sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    out
}

struct RandomFlight {
    speed_cap: f64,
    max_radius: f64,
    start_distance: f64,
    segment_min: f64,
    segment_max: f64,
}

fn random_flight(p: RandomFlight, height: f64, seed: u64, n: usize, dt: f64) -> Vec<FlightState> {
    use std::f64::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = [p.start_distance, 0.0, height];
    let mut vel = [0.0; 3];
    let mut acc = [0.0; 3];
    let mut remaining = 0usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if remaining == 0 {
            let seg = rng.random_range(p.segment_min..=p.segment_max);
            remaining = ((seg / dt).round() as usize).max(1);
            let seg_t = remaining as f64 * dt;
            let speed = p.speed_cap * rng.random::<f64>();
            let mut heading = rng.random_range(-PI..PI);
            // Turn back toward the receiver when the segment would leave the disk.
            for _ in 0..8 {
                let target = [speed * heading.cos(), speed * heading.sin()];
                let end = [
                    pos[0] + 0.5 * (vel[0] + target[0]) * seg_t,
                    pos[1] + 0.5 * (vel[1] + target[1]) * seg_t,
                ];
                if end[0].hypot(end[1]) <= p.max_radius {
                    break;
                }
                let inward = (-pos[1]).atan2(-pos[0]);
                heading = inward + rng.random_range(-PI / 4.0..PI / 4.0);
            }
            let target = [speed * heading.cos(), speed * heading.sin(), 0.0];
            for k in 0..3 {
                acc[k] = (target[k] - vel[k]) / seg_t;
            }
        }
        out.push(FlightState::from_kinematics(i as f64 * dt, pos, vel, acc));
        for k in 0..3 {
            pos[k] += vel[k] * dt + 0.5 * acc[k] * dt * dt;
            vel[k] += acc[k] * dt;
        }
        remaining -= 1;
        if remaining == 0 {
            // Snap to the segment target so rounding never pushes past the cap.
            let s = norm(vel);
            if s > p.speed_cap && s > 0.0 {
                let scale = p.speed_cap / s;
                vel.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    out
}

/// Additive Gaussian sensor error applied to `(d, v, a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorNoiseSpec {
    pub sigma_v: f64,
    pub sigma_d: f64,
    pub sigma_a: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SensorNoiseSpec {
    fn default() -> Self {
        SensorNoiseSpec {
            sigma_v: 0.1,
            sigma_d: 0.5,
            sigma_a: 0.2,
            seed: 0,
        }
    }
}

impl SensorNoiseSpec {
    pub fn noiseless() -> Self {
        SensorNoiseSpec {
            sigma_v: 0.0,
            sigma_d: 0.0,
            sigma_a: 0.0,
            seed: 0,
        }
    }
}

/// Decimates a state series to `sensor_rate` and adds sensor noise.
///
/// Each sensor tick takes the timestamp and position of the nearest source
/// state. Noisy magnitudes are clamped at zero.
pub fn sample_sensors(
    states: &[FlightState],
    sensor_rate: f64,
    noise: &SensorNoiseSpec,
) -> Result<Vec<FlightState>> {
    if states.is_empty() {
        return Ok(Vec::new());
    }
    if !(sensor_rate > 0.0) {
        return Err(Error::config("sensor_rate must be positive"));
    }
    if states.len() > 1 {
        let dt = states[1].timestamp - states[0].timestamp;
        if dt > 0.0 && sensor_rate > 1.0 / dt * (1.0 + 1e-9) {
            return Err(Error::config(format!(
                "sensor_rate {sensor_rate} Hz exceeds source rate {} Hz",
                1.0 / dt
            )));
        }
    }
    for (name, s) in [
        ("sigma_v", noise.sigma_v),
        ("sigma_d", noise.sigma_d),
        ("sigma_a", noise.sigma_a),
    ] {
        if !(s >= 0.0) {
            return Err(Error::config(format!("{name} must be >= 0")));
        }
    }
    let gauss = |s: f64| Normal::new(0.0, s).expect("validated sigma");
    let (nv, nd, na) = (gauss(noise.sigma_v), gauss(noise.sigma_d), gauss(noise.sigma_a));
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);

    let t0 = states[0].timestamp;
    let t_end = states[states.len() - 1].timestamp;
    let period = 1.0 / sensor_rate;
    let mut out = Vec::new();
    let mut cursor = 0usize;
    let mut k = 0u64;
    loop {
        let tick = t0 + k as f64 * period;
        if tick > t_end + 1e-9 * period {
            break;
        }
        while cursor + 1 < states.len()
            && (states[cursor + 1].timestamp - tick).abs() < (states[cursor].timestamp - tick).abs()
        {
            cursor += 1;
        }
        let src = states[cursor];
        out.push(FlightState {
            distance: (src.distance + nd.sample(&mut rng)).max(0.0),
            speed: (src.speed + nv.sample(&mut rng)).max(0.0),
            accel: (src.accel + na.sample(&mut rng)).max(0.0),
            ..src
        });
        k += 1;
    }
    Ok(out)
}
