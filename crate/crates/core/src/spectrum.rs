//! Amplitude-spectrum estimation: histograms, two-pulse pile-up correction and
//! decompounding of interval areas.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};
use crate::signal::SampledSignal;

const NORMALIZATION_TOL: f64 = 1e-9;

/// Binned amplitude distribution. `underflow` and `overflow` hold mass below
/// the first and at or above the last edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
    #[serde(default)]
    pub underflow: f64,
    #[serde(default)]
    pub overflow: f64,
}

impl Histogram {
    pub fn new(edges: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        validate_edges(&edges)?;
        if masses.len() + 1 != edges.len() {
            return Err(invalid(format!(
                "{} masses for {} edges",
                masses.len(),
                edges.len()
            )));
        }
        if masses.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(invalid("histogram masses must be finite and >= 0"));
        }
        Ok(Self {
            edges,
            masses,
            underflow: 0.0,
            overflow: 0.0,
        })
    }

    /// `bins` equal bins on `[lo, hi)`, all empty.
    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(invalid("uniform grid needs bins >= 1 and hi > lo"));
        }
        let w = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + i as f64 * w).collect();
        Histogram::new(edges, vec![0.0; bins])
    }

    pub fn bins(&self) -> usize {
        self.masses.len()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Mass in bins plus under- and overflow.
    pub fn total(&self) -> f64 {
        self.masses.iter().sum::<f64>() + self.underflow + self.overflow
    }

    pub fn is_normalized(&self) -> bool {
        (self.total() - 1.0).abs() <= NORMALIZATION_TOL
    }

    /// Scales all mass (including under- and overflow) to total one.
    pub fn normalized(&self) -> Histogram {
        let t = self.total();
        if t <= 0.0 {
            return self.clone();
        }
        Histogram {
            edges: self.edges.clone(),
            masses: self.masses.iter().map(|m| m / t).collect(),
            underflow: self.underflow / t,
            overflow: self.overflow / t,
        }
    }

    /// Mean of the binned mass at bin centres (under- and overflow excluded).
    pub fn mean(&self) -> f64 {
        let m: f64 = self.masses.iter().sum();
        if m <= 0.0 {
            return f64::NAN;
        }
        self.centers()
            .iter()
            .zip(&self.masses)
            .map(|(c, w)| c * w)
            .sum::<f64>()
            / m
    }

    /// Total variation distance over bins, underflow and overflow.
    pub fn total_variation(&self, other: &Histogram) -> Result<f64> {
        if self.edges != other.edges {
            return Err(Error::MismatchedEdges);
        }
        let bins: f64 = self
            .masses
            .iter()
            .zip(&other.masses)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(0.5
            * (bins + (self.underflow - other.underflow).abs() + (self.overflow - other.overflow).abs()))
    }

    fn bin_of(&self, x: f64) -> Option<usize> {
        if x < self.edges[0] || x >= *self.edges.last().expect("edges") {
            return None;
        }
        Some(self.edges.partition_point(|&e| e <= x) - 1)
    }
}

fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(invalid("a histogram needs at least two edges"));
    }
    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("histogram edges must be finite and strictly increasing"));
    }
    Ok(())
}

/// Counts amplitudes into left-closed bins `[e_i, e_{i+1})`.
pub fn estimate_histogram(amplitudes: &[f64], edges: &[f64]) -> Result<Histogram> {
    let mut h = Histogram::new(edges.to_vec(), vec![0.0; edges.len().saturating_sub(1)])?;
    for &a in amplitudes {
        match h.bin_of(a) {
            Some(i) => h.masses[i] += 1.0,
            None if a < edges[0] => h.underflow += 1.0,
            None => h.overflow += 1.0,
        }
    }
    Ok(h)
}

/// Probability that a pulse is joined by another within `window`.
pub fn pileup_probability(rate: f64, window: f64) -> Result<f64> {
    if !(rate >= 0.0 && window >= 0.0) {
        return Err(invalid("rate and window must be >= 0"));
    }
    Ok(-(-rate * window).exp_m1())
}

/// Distribution of the sum of two independent draws, deposited onto bin
/// centres by linear splitting between the two nearest centres (mass beyond
/// the last centre is split towards a virtual next bin that counts as
/// overflow). Pairs involving under/overflow go to under/overflow.
fn self_convolve(h: &Histogram) -> Histogram {
    let c = h.centers();
    let nb = c.len();
    let mut out = Histogram {
        edges: h.edges.clone(),
        masses: vec![0.0; nb],
        underflow: 0.0,
        overflow: 0.0,
    };
    let top = c[nb - 1];
    let top_width = h.edges[nb] - h.edges[nb - 1];
    for i in 0..nb {
        let mi = h.masses[i];
        if mi == 0.0 {
            continue;
        }
        for j in 0..nb {
            let w = mi * h.masses[j];
            if w == 0.0 {
                continue;
            }
            let s = c[i] + c[j];
            if s <= c[0] {
                if s >= h.edges[0] {
                    out.masses[0] += w;
                } else {
                    out.underflow += w;
                }
            } else if s >= top {
                let frac = (s - top) / top_width;
                if frac >= 1.0 {
                    out.overflow += w;
                } else {
                    out.masses[nb - 1] += (1.0 - frac) * w;
                    out.overflow += frac * w;
                }
            } else {
                let k = c.partition_point(|&x| x <= s) - 1;
                let frac = (s - c[k]) / (c[k + 1] - c[k]);
                out.masses[k] += (1.0 - frac) * w;
                out.masses[k + 1] += frac * w;
            }
        }
    }
    let inside: f64 = h.masses.iter().sum();
    out.overflow += h.overflow * (2.0 * inside + h.overflow) + h.underflow * h.overflow * 2.0;
    out.underflow += h.underflow * (2.0 * inside + h.underflow);
    out
}

fn combine(a: &Histogram, wa: f64, b: &Histogram, wb: f64) -> Histogram {
    Histogram {
        edges: a.edges.clone(),
        masses: a.masses.iter().zip(&b.masses).map(|(x, y)| wa * x + wb * y).collect(),
        underflow: wa * a.underflow + wb * b.underflow,
        overflow: wa * a.overflow + wb * b.overflow,
    }
}

/// First-order pile-up: `(1 − q)·h + q·(h ⊛ h)` with `q = 1 − e^{−λT}`.
pub fn pileup_forward(h: &Histogram, rate: f64, window: f64) -> Result<Histogram> {
    if !h.is_normalized() {
        return Err(Error::NotNormalized(h.total()));
    }
    let q = pileup_probability(rate, window)?;
    if q == 0.0 {
        return Ok(h.clone());
    }
    Ok(combine(h, 1.0 - q, &self_convolve(h), q).normalized())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PileupCorrection {
    pub histogram: Histogram,
    /// `‖A⁽ᵏ⁺¹⁾ − A⁽ᵏ⁾‖₁` of the last iteration.
    pub residual: f64,
    pub iterations: usize,
}

/// Inverts [`pileup_forward`] by the fixed-point iteration
/// `A ← clip₀((measured − q·A⊛A)/(1 − q))`, renormalised, from `A = measured`.
pub fn pileup_correct(
    measured: &Histogram,
    rate: f64,
    window: f64,
    iters: usize,
) -> Result<PileupCorrection> {
    if iters < 1 {
        return Err(invalid("iters must be >= 1"));
    }
    let q = pileup_probability(rate, window)?;
    if q >= 1.0 {
        return Err(Error::Saturation(q));
    }
    if !measured.is_normalized() {
        return Err(Error::NotNormalized(measured.total()));
    }
    let mut a = measured.clone();
    let mut residual = 0.0;
    for _ in 0..iters {
        let conv = self_convolve(&a);
        let mut next = combine(measured, 1.0 / (1.0 - q), &conv, -q / (1.0 - q));
        next.masses.iter_mut().for_each(|m| *m = m.max(0.0));
        next.underflow = next.underflow.max(0.0);
        next.overflow = next.overflow.max(0.0);
        let next = next.normalized();
        residual = next
            .masses
            .iter()
            .zip(&a.masses)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            + (next.underflow - a.underflow).abs()
            + (next.overflow - a.overflow).abs();
        a = next;
    }
    Ok(PileupCorrection {
        histogram: a,
        residual,
        iterations: iters,
    })
}

/// Areas of non-overlapping intervals of length `interval_len` whose first and
/// last samples are quiet (`|v| < quiet_threshold`).
///
/// An interval covers `m = round(L/dt)` samples `i .. i + m`; after an accepted
/// interval the scan continues at `i + m`, otherwise at `i + 1`. Areas use the
/// trapezoid rule over the interval's samples.
pub fn interval_areas(signal: &SampledSignal, interval_len: f64, quiet_threshold: f64) -> Result<Vec<f64>> {
    if !(interval_len > 0.0) {
        return Err(invalid("interval length must be > 0"));
    }
    if !(quiet_threshold > 0.0) {
        return Err(invalid("quiet threshold must be > 0"));
    }
    let m = (interval_len / signal.dt).round().max(2.0) as usize;
    let v = &signal.values;
    let mut out = Vec::new();
    let mut i = 0;
    while i + m <= v.len() {
        let last = i + m - 1;
        if v[i].abs() < quiet_threshold && v[last].abs() < quiet_threshold {
            let sum: f64 = v[i..=last].iter().sum();
            out.push(signal.dt * (sum - 0.5 * (v[i] + v[last])));
            i += m;
        } else {
            i += 1;
        }
    }
    Ok(out)
}

/// Amplitude lattice for decompounding: `bins` equal bins on `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeGrid {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

/// Characteristic-function diagnostics at one lattice frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfSample {
    pub omega: f64,
    pub cf_abs: f64,
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decompounded {
    pub histogram: Histogram,
    /// No pulse was ever observed; `histogram` is empty.
    pub empty: bool,
    pub mu: f64,
    pub cutoff: f64,
    pub diagnostics: Vec<CfSample>,
}

fn empirical_cf(s: &[f64], omega: f64) -> Complex64 {
    let (mut re, mut im) = (0.0, 0.0);
    for &x in s {
        let (sin, cos) = (omega * x).sin_cos();
        re += cos;
        im += sin;
    }
    Complex64::new(re, im) / s.len() as f64
}

/// Recovers the amplitude distribution from interval areas `x = G·Σ αᵢ` with a
/// Poisson(`μ = λL`) number of pulses per interval.
///
/// `φ_α(ω) = 1 + log φ̂_s(ω) / μ` with the logarithm continued from `ω = 0`;
/// frequencies from the first one where `|φ̂_s| < 4/√N` onward are zeroed.
/// `noise_var` (area units²) is divided out as a Gaussian characteristic
/// function before the logarithm.
pub fn decompound_areas(
    areas: &[f64],
    rate: f64,
    interval_len: f64,
    pulse_area: f64,
    grid: AmplitudeGrid,
    noise_var: Option<f64>,
) -> Result<Decompounded> {
    if areas.is_empty() {
        return Err(invalid("no interval areas"));
    }
    let mu = rate * interval_len;
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(invalid(format!("rate × interval length must be > 0, got {mu}")));
    }
    if mu > 20.0 {
        return Err(Error::TooManyPulses(mu));
    }
    if !(pulse_area > 0.0 && pulse_area.is_finite()) {
        return Err(invalid("pulse area must be > 0"));
    }
    if grid.bins < 2 || !(grid.hi > grid.lo) {
        return Err(invalid("amplitude grid needs bins >= 2 and hi > lo"));
    }
    let mut histogram = Histogram::uniform(grid.lo, grid.hi, grid.bins)?;
    let s: Vec<f64> = areas.iter().map(|x| x / pulse_area).collect();
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::Malformed("interval areas contain non-finite values".into()));
    }
    let phi0 = empirical_cf(&s, 0.0);
    if (phi0 - 1.0).norm() > 1e-9 {
        return Err(Error::Malformed(format!("empirical cf at 0 is {phi0}, not 1")));
    }
    let n = s.len() as f64;
    let cutoff = 4.0 / n.sqrt();
    let bins = grid.bins;
    let period = grid.hi - grid.lo;
    let d_omega = 2.0 * PI / period;
    let k_max = bins / 2;

    if s.iter().all(|&x| x == 0.0) {
        let diagnostics = (0..=k_max)
            .map(|k| CfSample {
                omega: k as f64 * d_omega,
                cf_abs: 1.0,
                masked: false,
            })
            .collect();
        return Ok(Decompounded {
            histogram,
            empty: true,
            mu,
            cutoff,
            diagnostics,
        });
    }

    // Sub-sample the lattice frequencies so the phase of φ̂_s moves by at most
    // a quarter radian per step while |φ̂_s| stays well away from zero.
    let mean_abs = s.iter().map(|x| x.abs()).sum::<f64>() / n;
    let refine = ((d_omega * mean_abs / 0.25).ceil() as usize).clamp(1, 256);
    let fine_step = d_omega / refine as f64;
    let fine: Vec<Complex64> = (0..=k_max * refine)
        .into_par_iter()
        .map(|i| empirical_cf(&s, i as f64 * fine_step))
        .collect();
    let noise_var_s = noise_var.unwrap_or(0.0) / (pulse_area * pulse_area);

    let mut phi_alpha = vec![Complex64::new(0.0, 0.0); k_max + 1];
    let mut diagnostics = Vec::with_capacity(k_max + 1);
    let mut phase = 0.0;
    let mut prev_arg = 0.0;
    let mut live = true;
    for (i, &z) in fine.iter().enumerate() {
        if live && z.norm() < cutoff {
            live = false;
        }
        if live {
            let arg = z.arg();
            let mut d = arg - prev_arg;
            d -= (2.0 * PI) * (d / (2.0 * PI)).round();
            phase += d;
            prev_arg = arg;
        }
        if i % refine != 0 {
            continue;
        }
        let k = i / refine;
        let omega = i as f64 * fine_step;
        diagnostics.push(CfSample {
            omega,
            cf_abs: z.norm(),
            masked: !live,
        });
        if live {
            let noise_log = -0.5 * noise_var_s * omega * omega;
            let log_phi = Complex64::new(z.norm().ln() - noise_log, phase);
            phi_alpha[k] = 1.0 + log_phi / mu;
        }
    }

    let centers = histogram.centers();
    for (j, c) in centers.iter().enumerate() {
        let mut acc = phi_alpha[0].re;
        for (k, phi) in phi_alpha.iter().enumerate().skip(1) {
            let term = (phi * Complex64::from_polar(1.0, -(k as f64) * d_omega * c)).re;
            acc += if 2 * k == bins { term } else { 2.0 * term };
        }
        histogram.masses[j] = (acc / bins as f64).max(0.0);
    }
    let total: f64 = histogram.masses.iter().sum();
    if total > 0.0 {
        histogram.masses.iter_mut().for_each(|m| *m /= total);
    }
    Ok(Decompounded {
        empty: total <= 0.0,
        histogram,
        mu,
        cutoff,
        diagnostics,
    })
}
