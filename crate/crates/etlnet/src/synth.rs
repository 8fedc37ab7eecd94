//! Deterministic synthetic inertial-trace generator.
//!
//! Baseline samples carry Gaussian noise around (0, 0, 9.81) m/s^2
//! acceleration and zero gyroscope rates at a constant speed. Each bump adds
//! a half-sine pulse on acc_z (normalized so its peak is exactly the
//! configured amplitude), a derivative-shaped perturbation on gyro_y, and a
//! 20% speed dip; samples under a pulse are labeled as bumps. Everything is
//! a pure function of the configuration, so the same seed reproduces the
//! same trace.

use crate::dataio::{Label, Position, SampleRecord, Side};
use crate::error::{Error, Result};
use crate::numcore::Rng;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub duration_samples: usize,
    pub bump_count: usize,
    pub bump_len_samples: usize,
    /// Peak of the acc_z half-sine pulse, m/s^2 above gravity.
    pub bump_amplitude: f64,
    /// Peak of the gyro_y perturbation, rad/s.
    pub gyro_amplitude: f64,
    /// Gaussian noise std applied to all six inertial channels.
    pub noise_std: f64,
    pub base_speed: f64,
    pub seed: u64,
    pub trace_id: String,
    /// Seconds between samples; timestamps are `i * sample_period`.
    pub sample_period: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            duration_samples: 2000,
            bump_count: 3,
            bump_len_samples: 40,
            bump_amplitude: 0.5,
            gyro_amplitude: 0.2,
            noise_std: 0.05,
            base_speed: 10.0,
            seed: 0,
            trace_id: "synth0".to_string(),
            sample_period: 0.01,
        }
    }
}

/// Draws non-overlapping bump start indices, keeping at least one bump
/// length of gap between bumps, by rejection sampling.
fn place_bumps(cfg: &SynthConfig, rng: &mut Rng) -> Result<Vec<usize>> {
    if cfg.bump_count == 0 {
        return Ok(Vec::new());
    }
    let len = cfg.bump_len_samples;
    let max_start = cfg.duration_samples - len; // preconditions checked by caller
    let mut starts: Vec<usize> = Vec::with_capacity(cfg.bump_count);
    let mut attempts = 0usize;
    while starts.len() < cfg.bump_count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Arg(format!(
                "could not place {} non-overlapping bumps of length {len} in {} samples",
                cfg.bump_count, cfg.duration_samples
            )));
        }
        let candidate = rng.next_index(max_start + 1);
        // Enforce a gap of at least one bump length on both sides.
        let ok = starts.iter().all(|&s| {
            candidate + 2 * len <= s || s + 2 * len <= candidate
        });
        if ok {
            starts.push(candidate);
        }
    }
    starts.sort_unstable();
    Ok(starts)
}

/// Half-sine pulse shape over `len` samples, normalized to peak exactly 1.
fn pulse_shape(k: usize, len: usize) -> f64 {
    if len == 1 {
        return 1.0;
    }
    let raw = |i: usize| (std::f64::consts::PI * (i as f64 + 0.5) / len as f64).sin();
    let peak = raw(if len % 2 == 1 { len / 2 } else { len / 2 - 1 }).max(raw(len / 2));
    raw(k) / peak
}

/// Derivative-shaped (cosine) perturbation, normalized to peak magnitude 1.
fn pulse_slope(k: usize, len: usize) -> f64 {
    if len == 1 {
        return 1.0;
    }
    let raw = |i: usize| (std::f64::consts::PI * (i as f64 + 0.5) / len as f64).cos();
    raw(k) / raw(0)
}

pub fn generate_trace(cfg: &SynthConfig) -> Result<Vec<SampleRecord>> {
    if cfg.bump_len_samples == 0 {
        return Err(Error::Arg("bump_len_samples must be >= 1".into()));
    }
    if cfg.bump_count * cfg.bump_len_samples > cfg.duration_samples {
        return Err(Error::Arg(format!(
            "{} bumps of {} samples do not fit in {} samples",
            cfg.bump_count, cfg.bump_len_samples, cfg.duration_samples
        )));
    }
    if cfg.noise_std < 0.0 {
        return Err(Error::Arg("noise_std must be non-negative".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let starts = place_bumps(cfg, &mut rng)?;

    let mut records = Vec::with_capacity(cfg.duration_samples);
    for i in 0..cfg.duration_samples {
        let noise = |rng: &mut Rng| {
            if cfg.noise_std == 0.0 {
                0.0
            } else {
                cfg.noise_std * rng.next_gaussian()
            }
        };
        records.push(SampleRecord {
            timestamp: i as f64 * cfg.sample_period,
            acc: [noise(&mut rng), noise(&mut rng), GRAVITY + noise(&mut rng)],
            gyro: [noise(&mut rng), noise(&mut rng), noise(&mut rng)],
            speed: cfg.base_speed,
            label: Label::NoBump,
            position: Position::Dashboard,
            side: Side::Right,
            trace_id: cfg.trace_id.clone(),
        });
    }
    for &start in &starts {
        for k in 0..cfg.bump_len_samples {
            let r = &mut records[start + k];
            let shape = pulse_shape(k, cfg.bump_len_samples);
            r.acc[2] += cfg.bump_amplitude * shape;
            r.gyro[1] += cfg.gyro_amplitude * pulse_slope(k, cfg.bump_len_samples);
            r.speed = cfg.base_speed * (1.0 - 0.2 * shape);
            r.label = Label::Bump;
        }
    }
    Ok(records)
}
