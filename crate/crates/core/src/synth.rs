//! Synthetic traffic-like series for tests and demos.
//!
//! Each node follows a two-peak daily profile with its own scale, amplitude
//! and phase. Weekends are damped. Perturbations are persistent AR(1)
//! noise (partly shared across nodes) plus rare decaying pulses, both
//! proportional to `noise`. With `noise = 0` the signal is exactly
//! periodic in the week.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{DataError, TrafficSeries, SECONDS_PER_DAY};

/// Monday 2024-01-01 00:00 UTC.
pub const DEFAULT_START: i64 = 1_704_067_200;

const AR_COEF: f64 = 0.99;
const PULSE_RATE: f64 = 0.005;
const PULSE_DECAY: f64 = 0.8;
const WEEKEND_FACTOR: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub nodes: usize,
    pub days: usize,
    /// Steps per day.
    pub frequency: usize,
    /// Noise level relative to each node's daily amplitude.
    pub noise: f64,
    pub seed: u64,
    pub start: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 20,
            days: 14,
            frequency: 48,
            noise: 0.3,
            seed: 0,
            start: DEFAULT_START,
        }
    }
}

struct NodeShape {
    base: f64,
    amplitude: f64,
    phase: f64,
    evening_weight: f64,
}

fn daily_profile(x: f64, evening_weight: f64) -> f64 {
    // x is the fraction of the day; peaks near 08:00 and 17:30
    let bump = |centre: f64, width: f64| {
        let mut d = (x - centre).abs();
        d = d.min(1.0 - d);
        (-(d / width).powi(2)).exp()
    };
    let level = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (x - 0.125)).cos();
    0.4 * level + bump(8.0 / 24.0, 0.06) + evening_weight * bump(17.5 / 24.0, 0.08)
}

/// Generates `days * frequency` steps for `nodes` nodes.
pub fn generate(cfg: &SynthConfig) -> Result<TrafficSeries, DataError> {
    if cfg.nodes == 0 || cfg.days == 0 {
        return Err(DataError::Invalid("nodes and days must be >= 1".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(DataError::Invalid(format!("noise {} must be >= 0", cfg.noise)));
    }
    if cfg.frequency == 0 || SECONDS_PER_DAY % cfg.frequency as i64 != 0 {
        return Err(DataError::Frequency(cfg.frequency as i64));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shapes: Vec<NodeShape> = (0..cfg.nodes)
        .map(|_| {
            let base = rng.random_range(50.0..150.0);
            NodeShape {
                base,
                amplitude: base * rng.random_range(0.3..0.6),
                phase: rng.random_range(-1.0..1.0) / 24.0,
                evening_weight: rng.random_range(0.6..1.0),
            }
        })
        .collect();
    let steps = cfg.days * cfg.frequency;
    let step_secs = SECONDS_PER_DAY / cfg.frequency as i64;
    // stationary std of an AR(1) with unit innovations is 1/sqrt(1-a^2)
    let innov = (1.0 - AR_COEF * AR_COEF).sqrt();
    let mut shared = 0.0;
    let mut local = vec![0.0; cfg.nodes];
    let mut pulse = vec![0.0; cfg.nodes];
    let mut values = Vec::with_capacity(steps * cfg.nodes);
    for k in 0..steps {
        let t = cfg.start + k as i64 * step_secs;
        let day = t.div_euclid(SECONDS_PER_DAY);
        let x = t.rem_euclid(SECONDS_PER_DAY) as f64 / SECONDS_PER_DAY as f64;
        let weekend = (day + 3).rem_euclid(7) >= 5;
        let week = if weekend { WEEKEND_FACTOR } else { 1.0 };
        let z: f64 = StandardNormal.sample(&mut rng);
        shared = AR_COEF * shared + innov * z;
        for (n, s) in shapes.iter().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            local[n] = AR_COEF * local[n] + innov * z;
            pulse[n] *= PULSE_DECAY;
            if rng.random_bool(PULSE_RATE) {
                pulse[n] += rng.random_range(1.0..3.0);
            }
            let periodic = s.base + week * s.amplitude * daily_profile((x - s.phase).rem_euclid(1.0), s.evening_weight);
            let noise = cfg.noise * s.amplitude * ((0.5f64.sqrt()) * (shared + local[n]) + pulse[n]);
            let v = (periodic + noise).max(0.0);
            values.push((v * 1e4).round() / 1e4);
        }
    }
    TrafficSeries::new(values, steps, cfg.nodes, cfg.frequency, cfg.start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, HistoricalAverage, SplitRatios};

    #[test]
    fn shape_and_determinism() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        assert_eq!((a.steps(), a.nodes(), a.frequency()), (672, 20, 48));
        assert_eq!(a, generate(&cfg).unwrap());
        let b = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.values(), b.values());
        assert!(a.values().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn noiseless_series_is_predicted_by_historical_average() {
        let s = generate(&SynthConfig { noise: 0.0, ..SynthConfig::default() }).unwrap();
        let splits = make_windows(&s, 24, 24, SplitRatios::default()).unwrap();
        let ha = HistoricalAverage::fit(&s, &splits.train).unwrap();
        let mut err = 0.0;
        let mut n = 0;
        for w in &splits.test {
            let truth = w.target(&s);
            for (p, t) in ha.predict(&s, w).iter().zip(&truth) {
                err += (p - t).abs();
                n += 1;
            }
        }
        assert!(err / (n as f64) < 1e-3, "HA MAE {}", err / n as f64);
    }

    #[test]
    fn rejects_bad_parameters() {
        let d = SynthConfig::default();
        assert!(generate(&SynthConfig { nodes: 0, ..d }).is_err());
        assert!(generate(&SynthConfig { frequency: 7, ..d }).is_err());
        assert!(generate(&SynthConfig { noise: -1.0, ..d }).is_err());
    }
}
