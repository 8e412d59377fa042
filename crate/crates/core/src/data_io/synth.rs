//! Synthetic writers built from sums of sinusoids.
//!
//! Each writer owns a pen trajectory `x(t), y(t) = Σ A sin(2πft + φ)` and a
//! rectified sinusoidal pressure profile. A genuine sample re-draws the
//! writer's parameters with relative spread `σ_g`, applies a smooth
//! monotone time warp and a ±20% length change, and adds point noise. Each
//! writer has one imitator whose parameters deviate from the target's by
//! `σ_f`; skilled forgeries are samples of the imitator.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::{RawTrace, SampleKind, TracePoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub writers: usize,
    /// The first `train_writers` writers are marked train, the rest test.
    pub train_writers: usize,
    pub genuine_per_writer: usize,
    pub skilled_per_writer: usize,
    /// Sinusoid components per axis.
    pub components: usize,
    pub freq_min: f64,
    pub freq_max: f64,
    /// Nominal duration, seconds.
    pub duration: f64,
    /// Relative length change, uniform in `±length_jitter`.
    pub length_jitter: f64,
    /// Sampling rate of the emitted traces, Hz.
    pub rate: f64,
    /// Session-to-session spread of a writer's own parameters.
    pub sigma_genuine: f64,
    /// Deviation of the imitator from the target writer.
    pub sigma_forgery: f64,
    /// Strength of the time warp, in `[0, 1)`.
    pub warp: f64,
    /// Standard deviation of additive point noise on `x` and `y`.
    pub point_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            writers: 30,
            train_writers: 20,
            genuine_per_writer: 10,
            skilled_per_writer: 10,
            components: 4,
            freq_min: 0.5,
            freq_max: 8.0,
            duration: 1.5,
            length_jitter: 0.2,
            rate: 100.0,
            sigma_genuine: 0.03,
            sigma_forgery: 0.3,
            warp: 0.3,
            point_noise: 0.002,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generator(m));
        if self.writers < 2 {
            return bad(format!("need at least 2 writers, got {}", self.writers));
        }
        if self.train_writers > self.writers {
            return bad(format!("{} train writers exceed {} writers", self.train_writers, self.writers));
        }
        if self.genuine_per_writer == 0 {
            return bad("each writer needs at least one genuine sample".into());
        }
        if !(self.rate > 0.0 && self.duration > 0.0 && self.components > 0) {
            return bad("rate, duration and component count must be positive".into());
        }
        if !(self.freq_min > 0.0 && self.freq_min <= self.freq_max) {
            return bad(format!("bad frequency range [{}, {}]", self.freq_min, self.freq_max));
        }
        // Perturbed frequencies may reach (1 + 3σ) times the drawn value.
        let top = self.freq_max * (1.0 + 3.0 * self.sigma_genuine.max(self.sigma_forgery) + 3.0 * self.sigma_genuine);
        if top >= self.rate / 2.0 {
            return bad(format!(
                "frequencies up to {top:.3} Hz (after perturbation) reach the Nyquist limit {} Hz",
                self.rate / 2.0
            ));
        }
        if !(0.0..1.0).contains(&self.warp) || !(0.0..1.0).contains(&self.length_jitter) {
            return bad("warp and length_jitter must lie in [0, 1)".into());
        }
        if self.sigma_genuine < 0.0 || self.sigma_forgery < 0.0 || self.point_noise < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        let min_len = (self.duration * (1.0 - self.length_jitter) * self.rate).floor();
        if min_len < 8.0 {
            return bad(format!("samples as short as {min_len} points are too short"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveComponent {
    pub amplitude: f64,
    pub freq: f64,
    pub phase: f64,
}

impl WaveComponent {
    fn eval(&self, t: f64) -> f64 {
        self.amplitude * (TAU * self.freq * t + self.phase).sin()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWriterParams {
    pub x: Vec<WaveComponent>,
    pub y: Vec<WaveComponent>,
    /// Pressure is `max(0, pressure_base + pressure(t))`.
    pub pressure: WaveComponent,
    pub pressure_base: f64,
}

impl SyntheticWriterParams {
    fn draw(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let axis = |rng: &mut ChaCha8Rng| {
            (0..cfg.components)
                .map(|k| WaveComponent {
                    amplitude: rng.random_range(0.3..1.0) / (1.0 + k as f64),
                    freq: rng.random_range(cfg.freq_min..=cfg.freq_max),
                    phase: rng.random_range(0.0..TAU),
                })
                .collect::<Vec<_>>()
        };
        let x = axis(rng);
        let y = axis(rng);
        let pressure = WaveComponent {
            amplitude: rng.random_range(0.15..0.35),
            freq: rng.random_range(0.5..2.0),
            phase: rng.random_range(0.0..TAU),
        };
        Self {
            x,
            y,
            pressure,
            pressure_base: rng.random_range(0.4..0.7),
        }
    }

    /// Relative spread on amplitudes and frequencies, `π·σ` on phases.
    fn perturb(&self, sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        if sigma == 0.0 {
            return self.clone();
        }
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        let w = |c: &WaveComponent, rng: &mut ChaCha8Rng| WaveComponent {
            amplitude: c.amplitude * (1.0 + n.sample(rng)),
            freq: c.freq * (1.0 + n.sample(rng)).max(0.05),
            phase: c.phase + PI * n.sample(rng),
        };
        let x = self.x.iter().map(|c| w(c, rng)).collect();
        let y = self.y.iter().map(|c| w(c, rng)).collect();
        let pressure = w(&self.pressure, rng);
        Self {
            x,
            y,
            pressure,
            pressure_base: self.pressure_base * (1.0 + n.sample(rng)),
        }
    }

    fn sample<T: Scalar>(&self, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<TracePoint<T>> {
        let p = self.perturb(cfg.sigma_genuine, rng);
        let stretch = 1.0 + rng.random_range(-cfg.length_jitter..=cfg.length_jitter);
        let n = ((cfg.duration * stretch * cfg.rate).round() as usize).max(2);
        let w = if cfg.warp > 0.0 { rng.random_range(-cfg.warp..=cfg.warp) } else { 0.0 };
        let noise = Normal::new(0.0, cfg.point_noise).expect("finite noise");
        (0..n)
            .map(|i| {
                let tau = i as f64 / (n - 1) as f64;
                // u' = 1 + w·cos(2πτ) > 0 keeps the warp monotone.
                let s = cfg.duration * (tau + w * (TAU * tau).sin() / TAU);
                let x = p.x.iter().map(|c| c.eval(s)).sum::<f64>() + noise.sample(rng);
                let y = p.y.iter().map(|c| c.eval(s)).sum::<f64>() + noise.sample(rng);
                let pr = (p.pressure_base + p.pressure.eval(s)).max(0.0);
                TracePoint::new(T::lit(x), T::lit(y), T::lit(pr), T::lit(i as f64 / cfg.rate))
            })
            .collect()
    }
}

fn writer_id(i: usize, total: usize) -> String {
    let width = total.saturating_sub(1).to_string().len().max(3);
    format!("w{i:0width$}")
}

/// Deterministic synthetic dataset. Writers draw from independent
/// sub-seeds, so generation runs in parallel without affecting the output.
pub fn generate_synthetic<T: Scalar>(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset<T>> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..cfg.writers).map(|_| master.random()).collect();
    let per_writer: Vec<Vec<RawTrace<T>>> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let id = writer_id(i, cfg.writers);
            let own = SyntheticWriterParams::draw(cfg, &mut rng);
            let imitator = own.perturb(cfg.sigma_forgery, &mut rng);
            let trace = |kind, points, session| RawTrace {
                points,
                writer_id: id.clone(),
                kind,
                session,
                source_hz: T::lit(cfg.rate),
            };
            let mut out = Vec::with_capacity(cfg.genuine_per_writer + cfg.skilled_per_writer);
            for g in 0..cfg.genuine_per_writer {
                let session = 1 + (2 * g >= cfg.genuine_per_writer) as u32;
                out.push(trace(SampleKind::Genuine, own.sample(cfg, &mut rng), session));
            }
            for _ in 0..cfg.skilled_per_writer {
                out.push(trace(SampleKind::Skilled, imitator.sample(cfg, &mut rng), 1));
            }
            out
        })
        .collect();
    let split: BTreeMap<String, Split> = (0..cfg.writers)
        .map(|i| {
            let s = if i < cfg.train_writers { Split::Train } else { Split::Test };
            (writer_id(i, cfg.writers), s)
        })
        .collect();
    let samples: Vec<RawTrace<T>> = per_writer.into_iter().flatten().collect();
    for s in &samples {
        s.validate()?;
    }
    Ok(Dataset { samples, split })
}

/// The parameters writer `index` would receive for `seed`, for inspection.
pub fn writer_params(cfg: &SyntheticConfig, seed: u64, index: usize) -> SyntheticWriterParams {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let s: u64 = (0..=index).map(|_| master.random()).last().expect("index + 1 draws");
    SyntheticWriterParams::draw(cfg, &mut ChaCha8Rng::seed_from_u64(s))
}
