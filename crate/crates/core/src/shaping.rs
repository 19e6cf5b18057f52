//! Linear pre-filters: matched filter, trapezoidal shaper, Wiener deconvolution.
//!
//! Every filter returns a [`Shaped`] signal that records how to map its peaks
//! back to pulse events: `tau = peak_time − group_delay` and
//! `alpha = peak_height / unit_gain`.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::conv::{fft_len, ConvOperator};
use crate::error::{invalid, Error, Result};
use crate::pulse::{PulseEvent, PulseShape};
use crate::signal::{synthesize, SampledSignal};

/// A filtered signal with its time alignment and amplitude scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Shaped {
    pub signal: SampledSignal,
    /// Delay between a pulse's arrival and its output peak (time units).
    pub group_delay: f64,
    /// Output peak produced by a unit-amplitude pulse.
    pub unit_gain: f64,
}

/// Correlates the signal with the sampled pulse:
/// `out[k] = dt · Σ_m taps[m] · y[k + start + m]`.
///
/// A noiseless unit pulse on the grid at index `j` peaks at `out[j]` with value
/// `dt · Σ taps²`, the sampled pulse energy.
pub fn matched_filter(signal: &SampledSignal, shape: &PulseShape) -> Result<Shaped> {
    shape.validate()?;
    let kernel = shape.kernel(signal.dt);
    if kernel.is_degenerate() {
        return Err(Error::DegeneratePulse);
    }
    let unit_gain = signal.dt * kernel.energy();
    let op = ConvOperator::new(kernel, signal.len());
    let mut values = op.adjoint(&signal.values);
    values.iter_mut().for_each(|v| *v *= signal.dt);
    Ok(Shaped {
        signal: signal.with_values(values),
        group_delay: 0.0,
        unit_gain,
    })
}

/// Matched-filter output at time `t` for a unit pulse arriving at `tau`,
/// together with the distance beyond which it vanishes.
pub fn matched_response(shape: &PulseShape, dt: f64) -> (impl Fn(f64, f64) -> f64 + '_, f64) {
    let kernel = shape.kernel(dt);
    let reach = (kernel.start.unsigned_abs() + 2 * kernel.len()) as f64 * dt;
    let f = move |tau: f64, t: f64| {
        let base = t + kernel.start as f64 * dt - tau;
        dt * kernel
            .taps
            .iter()
            .enumerate()
            .map(|(m, &w)| w * shape.eval(base + m as f64 * dt))
            .sum::<f64>()
    };
    (f, reach)
}

/// Trapezoidal shaper for an exponential tail `e^{-n/decay}` (`decay` in samples).
///
/// An input `α·e^{-n/decay}` starting at sample `n0` rises over `rise_k`
/// samples and holds the value `α` on samples `n0 + rise_k − 1 ..= n0 + rise_k −
/// 1 + flat_m`. Samples before the start of the signal read as zero.
pub fn trapezoid_filter(
    signal: &SampledSignal,
    decay: f64,
    rise_k: usize,
    flat_m: usize,
) -> Result<Shaped> {
    if !(decay.is_finite() && decay > 0.0) {
        return Err(invalid(format!("decay must be > 0, got {decay}")));
    }
    if rise_k == 0 {
        return Err(invalid("rise_k must be >= 1"));
    }
    let v = &signal.values;
    let k = rise_k;
    let l = rise_k + flat_m;
    let m_pole = 1.0 / ((1.0 / decay).exp() - 1.0);
    let scale = 1.0 / (k as f64 * (m_pole + 1.0));
    let at = |i: usize, back: usize| if i >= back { v[i - back] } else { 0.0 };
    let mut acc = 0.0;
    let mut sum = 0.0;
    let mut out = Vec::with_capacity(v.len());
    for n in 0..v.len() {
        let d = v[n] - at(n, k) - at(n, l) + at(n, l + k);
        acc += d;
        sum += acc + m_pole * d;
        out.push(sum * scale);
    }
    Ok(Shaped {
        signal: signal.with_values(out),
        group_delay: (k as f64 - 1.0 + flat_m as f64 / 2.0) * signal.dt,
        unit_gain: 1.0,
    })
}

/// Trapezoidal shaping of a double-exponential pulse stream using its slow
/// decay `1/a`; gain and delay are measured on the filtered unit pulse.
pub fn trapezoid_for_pulse(
    signal: &SampledSignal,
    shape: &PulseShape,
    rise_k: usize,
    flat_m: usize,
) -> Result<Shaped> {
    let decay = match shape {
        PulseShape::DoubleExp { a, .. } => 1.0 / (a * signal.dt),
        PulseShape::Tabulated { .. } => {
            return Err(invalid(
                "trapezoid shaping of a tabulated pulse needs an explicit decay constant",
            ))
        }
    };
    let mut shaped = trapezoid_filter(signal, decay, rise_k, flat_m)?;
    let (delay, gain) = unit_response_peak(signal.dt, shape, |s| {
        trapezoid_filter(s, decay, rise_k, flat_m)
    })?;
    shaped.group_delay = delay;
    shaped.unit_gain = gain;
    Ok(shaped)
}

/// Peak time and height of `filter` applied to a unit pulse at `t = 0`.
pub fn unit_response_peak(
    dt: f64,
    shape: &PulseShape,
    filter: impl Fn(&SampledSignal) -> Result<Shaped>,
) -> Result<(f64, f64)> {
    let n = ((shape.support_end(crate::pulse::TRUNCATION_LEVEL) / dt).ceil() as usize) * 2 + 64;
    let probe = synthesize(&[PulseEvent::new(0.0, 1.0)], shape, n, dt, 0.0);
    let out = filter(&probe)?;
    let peak = crate::detect::peak_candidates(&out.signal.values, f64::NEG_INFINITY)
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.total_cmp(&a.0)))
        .ok_or(Error::DegeneratePulse)?;
    Ok((peak.0 * dt, peak.1))
}

/// Wiener deconvolution `G = conj(P) / (|P|² + noise_power / S)`.
///
/// `P` is the DFT of the sampled truncated pulse, `S` the signal prior power
/// (default: the sampled pulse energy `Σ taps²`, i.e. unit event rate). The
/// output is a sharpened pulse train peaking at the arrival indices.
/// With `noise_power = 0` the filter is the naive inverse `1/P`, which is
/// rejected when `P` has (numerical) zeros.
pub fn wiener_filter(
    signal: &SampledSignal,
    shape: &PulseShape,
    noise_power: f64,
    prior_power: Option<f64>,
) -> Result<Shaped> {
    shape.validate()?;
    if !(noise_power >= 0.0) {
        return Err(invalid(format!("noise_power must be >= 0, got {noise_power}")));
    }
    let kernel = shape.kernel(signal.dt);
    if kernel.is_degenerate() {
        return Err(Error::DegeneratePulse);
    }
    let prior = prior_power.unwrap_or_else(|| kernel.energy());
    if !(prior.is_finite() && prior > 0.0) {
        return Err(invalid(format!("prior power must be > 0, got {prior}")));
    }
    let n = signal.len();
    let len = fft_len(n + kernel.len());
    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(len);
    let inverse = planner.plan_fft_inverse(len);

    let mut p = vec![Complex64::new(0.0, 0.0); len];
    for (m, &t) in kernel.taps.iter().enumerate() {
        let idx = (kernel.start + m as isize).rem_euclid(len as isize) as usize;
        p[idx].re += t;
    }
    forward.process(&mut p);

    let reg = noise_power / prior;
    if reg == 0.0 {
        let pmax = p.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if p.iter().any(|z| z.norm() < 1e-12 * pmax) {
            return Err(Error::IllPosedInverse);
        }
    }
    let gain: Vec<Complex64> = p.iter().map(|z| z.conj() / (z.norm_sqr() + reg)).collect();
    let unit_gain = p
        .iter()
        .zip(&gain)
        .map(|(z, g)| (z * g).re)
        .sum::<f64>()
        / len as f64;

    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for (dst, &v) in buf.iter_mut().zip(&signal.values) {
        dst.re = v;
    }
    forward.process(&mut buf);
    for (b, g) in buf.iter_mut().zip(&gain) {
        *b *= g;
    }
    inverse.process(&mut buf);
    let scale = 1.0 / len as f64;
    let values = buf[..n].iter().map(|z| z.re * scale).collect();
    Ok(Shaped {
        signal: signal.with_values(values),
        group_delay: 0.0,
        unit_gain,
    })
}

/// Filter selection for pipelines and configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "filter", rename_all = "snake_case")]
pub enum Shaper {
    Matched,
    /// `decay` in samples; derived from the pulse when omitted.
    Trapezoid {
        rise_k: usize,
        flat_m: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        decay: Option<f64>,
    },
    Wiener {
        noise_power: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prior_power: Option<f64>,
    },
}

impl Shaper {
    pub fn apply(&self, signal: &SampledSignal, shape: &PulseShape) -> Result<Shaped> {
        match *self {
            Shaper::Matched => matched_filter(signal, shape),
            Shaper::Trapezoid {
                rise_k,
                flat_m,
                decay: None,
            } => trapezoid_for_pulse(signal, shape, rise_k, flat_m),
            Shaper::Trapezoid {
                rise_k,
                flat_m,
                decay: Some(decay),
            } => trapezoid_filter(signal, decay, rise_k, flat_m),
            Shaper::Wiener {
                noise_power,
                prior_power,
            } => wiener_filter(signal, shape, noise_power, prior_power),
        }
    }
}
