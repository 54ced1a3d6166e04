//! Heralding probability, attempt-loop timing and entanglement rates.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::photon::{arrival_phase_coherence, window_capture, DetectorModel};
use crate::rng::{substream, Domain};
use crate::source::EmissionTimePdf;
use crate::{Error, Result};

/// Factors of the per-attempt heralding probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateFactors {
    /// Emission into the 1092 nm channel.
    pub p_p: f64,
    /// Collection and transmission to the detector.
    pub p_c: f64,
    /// Detector quantum efficiency.
    pub p_q: f64,
    /// Fraction of emission inside the detection window.
    pub p_w: f64,
}

impl RateFactors {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p_p", self.p_p), ("p_c", self.p_c), ("p_q", self.p_q), ("p_w", self.p_w)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::out_of_range(name, v));
            }
        }
        Ok(())
    }
}

pub fn success_probability(f: &RateFactors) -> Result<f64> {
    f.validate()?;
    Ok(f.p_p * f.p_c * f.p_q * f.p_w)
}

fn default_cooling_period() -> u32 {
    50
}

/// Durations of the attempt loop, µs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingBudget {
    /// Pumping, excitation and margins of one attempt.
    pub body_us: f64,
    /// Control latency per attempt.
    pub latency_us: f64,
    /// Wait for the photon to reach the detector. `None` takes the fiber delay.
    #[serde(default)]
    pub travel_us: Option<f64>,
    /// Attempts between cooling breaks.
    #[serde(default = "default_cooling_period")]
    pub cooling_period: u32,
    #[serde(default)]
    pub cooling_us: f64,
    /// Ion rotation and readout after a herald.
    #[serde(default)]
    pub readout_us: f64,
}

impl TimingBudget {
    /// The lab loop: 2.136 µs split into a 1.636 µs body and 0.5 µs latency.
    pub fn lab() -> Self {
        Self {
            body_us: 1.636,
            latency_us: 0.5,
            travel_us: Some(0.0),
            cooling_period: 50,
            cooling_us: 0.0,
            readout_us: 0.0,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [
            ("timing.body_us", self.body_us),
            ("timing.latency_us", self.latency_us),
            ("timing.travel_us", self.travel_us.unwrap_or(0.0)),
            ("timing.cooling_us", self.cooling_us),
            ("timing.readout_us", self.readout_us),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                v.push(format!("{name} must be finite and ≥ 0"));
            }
        }
        if self.cooling_period == 0 {
            v.push("timing.cooling_period must be ≥ 1".into());
        }
        v
    }

    /// Length of one attempt with the given travel time.
    pub fn attempt_period_us(&self, travel_us: f64) -> f64 {
        self.body_us + self.latency_us + travel_us
    }
}

/// Attempts per second; cooling breaks are excluded.
pub fn attempt_rate(t: &TimingBudget, travel_us: f64) -> Result<f64> {
    let period = t.attempt_period_us(travel_us);
    if !(period > 0.0) {
        return Err(Error::Config(format!("attempt period {period} µs must be positive")));
    }
    Ok(1e6 / period)
}

/// Heralded events per second that stayed inside the qubit manifold.
pub fn entanglement_rate(attempts_per_s: f64, p_ent: f64, leakage_fraction: f64) -> f64 {
    attempts_per_s * p_ent * (1.0 - leakage_fraction)
}

/// One row of a detection-window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub window_ns: f64,
    pub p_w: f64,
    /// Magnitude of the arrival-averaged ion phase factor.
    pub gamma: f64,
    pub rate_per_s: f64,
}

/// Rate and phase coherence for windows of the given lengths, all opening at
/// `start_ns`. `factors.p_w` is ignored and replaced per window.
pub fn window_tradeoff(
    pdf: &EmissionTimePdf,
    start_ns: f64,
    windows_ns: &[f64],
    qubit_splitting_mhz: f64,
    attempts_per_s: f64,
    factors: &RateFactors,
    leakage_fraction: f64,
) -> Result<Vec<WindowRow>> {
    windows_ns
        .iter()
        .map(|&w| {
            if !(w >= 0.0) {
                return Err(Error::out_of_range("window_ns", w));
            }
            let det = DetectorModel {
                efficiency: 1.0,
                dark_count_rate_per_s: 0.0,
                window_ns: (start_ns, start_ns + w),
            };
            let (p_w, gamma) = if w == 0.0 {
                (0.0, 1.0)
            } else {
                (window_capture(pdf, &det)?, arrival_phase_coherence(pdf, &det, qubit_splitting_mhz)?)
            };
            let p = success_probability(&RateFactors { p_w, ..*factors })?;
            Ok(WindowRow {
                window_ns: w,
                p_w,
                gamma,
                rate_per_s: entanglement_rate(attempts_per_s, p, leakage_fraction),
            })
        })
        .collect()
}

pub fn write_window_csv<W: Write>(rows: &[WindowRow], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    wr.write_record(["window_ns", "p_w", "gamma", "rate_per_s"])?;
    for r in rows {
        wr.write_record([r.window_ns, r.p_w, r.gamma, r.rate_per_s].map(|x| format!("{x:.16e}")))?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Rate of the loop including cooling breaks and readout after each herald:
/// a renewal cycle is a cooling break followed by up to `cooling_period`
/// attempts, ending early on a herald.
pub fn cycle_rate(t: &TimingBudget, travel_us: f64, p_ent: f64, leakage_fraction: f64) -> Result<f64> {
    let period = t.attempt_period_us(travel_us);
    if !(period > 0.0) {
        return Err(Error::Config(format!("attempt period {period} µs must be positive")));
    }
    let n = t.cooling_period as i32;
    let p_herald = 1.0 - (1.0 - p_ent).powi(n);
    let mean_attempts = if p_ent > 0.0 { p_herald / p_ent } else { n as f64 };
    let cycle = t.cooling_us + mean_attempts * period + p_herald * t.readout_us;
    Ok(1e6 * p_herald * (1.0 - leakage_fraction) / cycle)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloRate {
    pub rate_per_s: f64,
    pub stderr_per_s: f64,
    pub successes: u64,
    pub heralds: u64,
    pub analytic_per_s: f64,
}

const MC_SEGMENTS: u64 = 16;

/// Event-driven simulation of the attempt loop for `duration_s` of wall time.
///
/// The duration is cut into fixed segments with their own random streams, so
/// the result does not depend on the number of worker threads.
pub fn monte_carlo_rate(
    t: &TimingBudget,
    travel_us: f64,
    p_ent: f64,
    leakage_fraction: f64,
    duration_s: f64,
    seed: u64,
) -> Result<MonteCarloRate> {
    if !(0.0..=1.0).contains(&p_ent) {
        return Err(Error::out_of_range("p_ent", p_ent));
    }
    if !(0.0..=1.0).contains(&leakage_fraction) {
        return Err(Error::out_of_range("leakage_fraction", leakage_fraction));
    }
    let analytic = cycle_rate(t, travel_us, p_ent, leakage_fraction)?;
    let period = t.attempt_period_us(travel_us);
    let segment_us = duration_s * 1e6 / MC_SEGMENTS as f64;
    let totals: Vec<(u64, u64)> = (0..MC_SEGMENTS)
        .into_par_iter()
        .map(|seg| {
            let mut rng = substream(seed, Domain::MonteCarlo, seg, 0);
            let (mut clock, mut heralds, mut successes) = (0.0, 0u64, 0u64);
            let log_fail = (1.0 - p_ent).ln();
            loop {
                clock += t.cooling_us;
                // attempt index of the first herald, or none within the period
                let first = if p_ent >= 1.0 {
                    Some(1)
                } else if p_ent <= 0.0 {
                    None
                } else {
                    let u: f64 = 1.0 - rng.random::<f64>();
                    let k = (u.ln() / log_fail).floor() as u64 + 1;
                    (k <= t.cooling_period as u64).then_some(k)
                };
                match first {
                    Some(k) => {
                        clock += k as f64 * period;
                        if clock > segment_us {
                            break;
                        }
                        clock += t.readout_us;
                        heralds += 1;
                        if rng.random::<f64>() >= leakage_fraction {
                            successes += 1;
                        }
                    }
                    None => {
                        clock += t.cooling_period as f64 * period;
                        if clock > segment_us {
                            break;
                        }
                    }
                }
            }
            (heralds, successes)
        })
        .collect();
    let heralds: u64 = totals.iter().map(|x| x.0).sum();
    let successes: u64 = totals.iter().map(|x| x.1).sum();
    Ok(MonteCarloRate {
        rate_per_s: successes as f64 / duration_s,
        stderr_per_s: (successes as f64).sqrt() / duration_s,
        successes,
        heralds,
        analytic_per_s: analytic,
    })
}
