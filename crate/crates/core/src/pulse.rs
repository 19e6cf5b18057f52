//! Pulse shapes and pulse events.
//!
//! The double-exponential pulse `p(t) = e^{-at} - e^{-bt}` (zero for `t < 0`)
//! approximates the response of a scintillation detector. Arbitrary measured
//! shapes are supported through [`PulseShape::Tabulated`], which interpolates
//! linearly between samples.
//!
//! Amplitudes are never normalised here: `eval` returns the raw shape and
//! callers decide whether they want peak- or area-normalised units.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Relative level below which filters truncate a pulse kernel.
pub const TRUNCATION_LEVEL: f64 = 1e-6;

/// The known pulse `p(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PulseShape {
    /// `e^{-a t} - e^{-b t}` for `t >= 0`, with `0 < a < b`.
    DoubleExp { a: f64, b: f64 },
    /// Samples of the pulse starting at `t_start`, spaced `dt` apart.
    Tabulated {
        samples: Vec<f64>,
        dt: f64,
        t_start: f64,
    },
}

/// One pulse: arrival time `tau` and amplitude `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseEvent {
    pub tau: f64,
    pub alpha: f64,
}

impl PulseEvent {
    pub fn new(tau: f64, alpha: f64) -> Self {
        Self { tau, alpha }
    }
}

/// A pulse sampled on a grid: `taps[m] = p((start + m) * dt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub start: isize,
    pub taps: Vec<f64>,
}

impl Kernel {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|v| v * v).sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.taps.iter().map(|v| v.abs()).sum()
    }

    pub fn is_degenerate(&self) -> bool {
        self.taps.iter().all(|&v| v == 0.0)
    }
}

impl PulseShape {
    pub fn double_exp(a: f64, b: f64) -> Result<Self> {
        let shape = PulseShape::DoubleExp { a, b };
        shape.validate()?;
        Ok(shape)
    }

    pub fn tabulated(samples: Vec<f64>, dt: f64, t_start: f64) -> Result<Self> {
        let shape = PulseShape::Tabulated {
            samples,
            dt,
            t_start,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PulseShape::DoubleExp { a, b } => {
                if !(a.is_finite() && b.is_finite() && *a > 0.0 && a < b) {
                    return Err(Error::InvalidShape(format!(
                        "double exponential needs 0 < a < b, got a = {a}, b = {b}"
                    )));
                }
            }
            PulseShape::Tabulated {
                samples,
                dt,
                t_start,
            } => {
                if !(dt.is_finite() && *dt > 0.0) {
                    return Err(Error::InvalidShape(format!("dt must be positive, got {dt}")));
                }
                if !t_start.is_finite() {
                    return Err(Error::InvalidShape("t_start must be finite".into()));
                }
                if samples.len() < 2 {
                    return Err(Error::InvalidShape(
                        "tabulated pulse needs at least 2 samples".into(),
                    ));
                }
                if samples.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidShape("tabulated samples must be finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Evaluates `p(t)`.
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            PulseShape::DoubleExp { a, b } => {
                if t < 0.0 {
                    0.0
                } else {
                    (-a * t).exp() - (-b * t).exp()
                }
            }
            PulseShape::Tabulated {
                samples,
                dt,
                t_start,
            } => {
                let x = (t - t_start) / dt;
                let last = (samples.len() - 1) as f64;
                if !(0.0..=last).contains(&x) {
                    return 0.0;
                }
                let i = x.floor() as usize;
                if i + 1 >= samples.len() {
                    return samples[samples.len() - 1];
                }
                let frac = x - i as f64;
                samples[i] + frac * (samples[i + 1] - samples[i])
            }
        }
    }

    /// Time and value of the pulse maximum.
    ///
    /// Tabulated shapes return the sample of largest magnitude (with its sign).
    pub fn peak(&self) -> Result<(f64, f64)> {
        match self {
            PulseShape::DoubleExp { a, b } => {
                let t = (b / a).ln() / (b - a);
                Ok((t, self.eval(t)))
            }
            PulseShape::Tabulated {
                samples,
                dt,
                t_start,
            } => {
                let (i, v) = samples
                    .iter()
                    .enumerate()
                    .fold((0, 0.0_f64), |best, (i, &v)| {
                        if v.abs() > best.1.abs() {
                            (i, v)
                        } else {
                            best
                        }
                    });
                if v == 0.0 {
                    return Err(Error::DegeneratePulse);
                }
                Ok((t_start + i as f64 * dt, v))
            }
        }
    }

    /// Continuous-time Fourier transform `P(f) = ∫ p(t) e^{-j2πft} dt`.
    ///
    /// Tabulated shapes use the Riemann sum over their samples.
    pub fn freq_response(&self, f: f64) -> Complex64 {
        match self {
            PulseShape::DoubleExp { a, b } => {
                let w = Complex64::new(0.0, 2.0 * PI * f);
                (w + a).inv() - (w + b).inv()
            }
            PulseShape::Tabulated {
                samples,
                dt,
                t_start,
            } => {
                let mut acc = Complex64::new(0.0, 0.0);
                for (k, &s) in samples.iter().enumerate() {
                    let t = t_start + k as f64 * dt;
                    acc += s * Complex64::from_polar(1.0, -2.0 * PI * f * t);
                }
                acc * *dt
            }
        }
    }

    /// `∫ p(t) dt`.
    pub fn area(&self) -> f64 {
        match self {
            PulseShape::DoubleExp { a, b } => 1.0 / a - 1.0 / b,
            PulseShape::Tabulated { samples, dt, .. } => trapezoid_sum(samples) * dt,
        }
    }

    /// `∫ p(t)² dt`.
    pub fn energy(&self) -> f64 {
        match self {
            PulseShape::DoubleExp { a, b } => {
                0.5 / a + 0.5 / b - 2.0 / (a + b)
            }
            PulseShape::Tabulated { samples, dt, .. } => {
                let sq: Vec<f64> = samples.iter().map(|v| v * v).collect();
                trapezoid_sum(&sq) * dt
            }
        }
    }

    /// First time at which the pulse is non-zero.
    pub fn support_start(&self) -> f64 {
        match self {
            PulseShape::DoubleExp { .. } => 0.0,
            PulseShape::Tabulated { t_start, .. } => *t_start,
        }
    }

    /// Time after which `|p(t)|` stays below `rel * |peak|`.
    pub fn support_end(&self, rel: f64) -> f64 {
        match self {
            PulseShape::DoubleExp { a, .. } => {
                let (tp, vp) = self.peak().expect("double exponential always has a peak");
                let level = rel * vp;
                // p(t) < e^{-at}, so the pulse is below `level` at `hi`.
                let mut lo = tp;
                let mut hi = tp.max((1.0 / level).ln() / a);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.eval(mid) >= level {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-12 * hi.max(1.0) {
                        break;
                    }
                }
                hi
            }
            PulseShape::Tabulated {
                samples,
                dt,
                t_start,
            } => {
                let peak = samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                let last = samples
                    .iter()
                    .rposition(|v| v.abs() >= rel * peak)
                    .unwrap_or(samples.len() - 1);
                t_start + ((last + 1).min(samples.len() - 1)) as f64 * dt
            }
        }
    }

    /// Width used for warm-up margins and fit brackets: the truncation time
    /// measured from the pulse start.
    pub fn width(&self) -> f64 {
        self.support_end(TRUNCATION_LEVEL) - self.support_start()
    }

    /// Samples the pulse on the grid `k * dt`, truncated where it falls below
    /// [`TRUNCATION_LEVEL`] of its peak.
    pub fn kernel(&self, dt: f64) -> Kernel {
        let start = (self.support_start() / dt).floor() as isize;
        let stop = (self.support_end(TRUNCATION_LEVEL) / dt).ceil() as isize;
        let taps = (start..=stop.max(start + 1))
            .map(|m| self.eval(m as f64 * dt))
            .collect();
        Kernel { start, taps }
    }
}

fn trapezoid_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => 0.0,
        n => v.iter().sum::<f64>() - 0.5 * (v[0] + v[n - 1]),
    }
}
