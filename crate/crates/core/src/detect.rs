//! Candidate events from a (possibly shaped) signal.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fit::fit_single;
use crate::pulse::{PulseEvent, PulseShape};
use crate::signal::SampledSignal;

/// A maximal above-threshold interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub t1: f64,
    pub t2: f64,
    pub duration: f64,
    /// Integral of the signal over `[t1, t2]` (trapezoid rule).
    pub area: f64,
}

/// Maximal runs of samples `>= threshold`. Boundaries are placed at the linear
/// interpolation of the threshold crossing; runs touching the ends of the
/// signal start or stop at the first or last sample.
pub fn find_clusters(signal: &SampledSignal, threshold: f64) -> Result<Vec<Cluster>> {
    if !(threshold > 0.0) {
        return Err(invalid(format!("threshold must be > 0, got {threshold}")));
    }
    let v = &signal.values;
    let dt = signal.dt;
    let n = v.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if v[i] < threshold {
            i += 1;
            continue;
        }
        let first = i;
        while i < n && v[i] >= threshold {
            i += 1;
        }
        let last = i - 1;

        let (t1, lead) = if first > 0 {
            let frac = (threshold - v[first - 1]) / (v[first] - v[first - 1]);
            let gap = (1.0 - frac) * dt;
            (signal.time(first) - gap, 0.5 * (threshold + v[first]) * gap)
        } else {
            (signal.time(0), 0.0)
        };
        let (t2, tail) = if last + 1 < n {
            let frac = (v[last] - threshold) / (v[last] - v[last + 1]);
            let gap = frac * dt;
            (signal.time(last) + gap, 0.5 * (v[last] + threshold) * gap)
        } else {
            (signal.time(last), 0.0)
        };
        let inner: f64 = v[first..=last].windows(2).map(|w| 0.5 * (w[0] + w[1]) * dt).sum();
        out.push(Cluster {
            t1,
            t2,
            duration: t2 - t1,
            area: lead + inner + tail,
        });
    }
    Ok(out)
}

/// Local maxima `(position in samples, height)` with height `>= threshold`.
///
/// A plateau of equal samples counts once, at its centre. Single-sample maxima
/// are refined by a 3-point parabola. The first and last samples are never
/// maxima.
pub fn peak_candidates(values: &[f64], threshold: f64) -> Vec<(f64, f64)> {
    let n = values.len();
    let mut out = Vec::new();
    if n < 3 {
        return out;
    }
    let mut i = 1;
    while i + 1 < n {
        let v = values[i];
        if !(v > values[i - 1]) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < n && values[j + 1] == v {
            j += 1;
        }
        if j + 1 < n && values[j + 1] < v && v >= threshold {
            if i == j {
                let (y0, y1, y2) = (values[i - 1], v, values[i + 1]);
                let denom = y0 - 2.0 * y1 + y2;
                let delta = if denom < 0.0 {
                    (0.5 * (y0 - y2) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                };
                out.push((i as f64 + delta, y1 - 0.25 * (y0 - y2) * delta));
            } else {
                out.push((0.5 * (i + j) as f64, v));
            }
        }
        i = j + 1;
    }
    out
}

/// Peaks above `threshold`, kept greedily by descending height so that kept
/// peaks are at least `min_separation` samples apart. Returned sorted by `tau`.
pub fn detect_peaks(
    signal: &SampledSignal,
    threshold: f64,
    min_separation: usize,
    group_delay: f64,
    unit_gain: f64,
) -> Result<Vec<PulseEvent>> {
    if min_separation < 1 {
        return Err(invalid("min_separation must be >= 1"));
    }
    if !(unit_gain.is_finite() && unit_gain != 0.0) {
        return Err(invalid(format!("unit gain must be finite and non-zero, got {unit_gain}")));
    }
    let mut cand = peak_candidates(&signal.values, threshold);
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
    let sep = min_separation as f64;
    let mut kept: Vec<(f64, f64)> = Vec::new();
    for c in cand {
        let idx = kept.partition_point(|k| k.0 < c.0);
        let left_ok = idx == 0 || c.0 - kept[idx - 1].0 >= sep;
        let right_ok = idx == kept.len() || kept[idx].0 - c.0 >= sep;
        if left_ok && right_ok {
            kept.insert(idx, c);
        }
    }
    Ok(kept
        .into_iter()
        .map(|(pos, h)| PulseEvent::new(signal.t0 + pos * signal.dt - group_delay, h / unit_gain))
        .collect())
}

/// Re-locates peaks after removing the filtered contribution of their
/// neighbours within `reach` (time units).
///
/// `response(tau, t)` is the filter output at time `t` for a unit pulse
/// arriving at `tau`. Each sweep visits events by descending amplitude and
/// searches `±radius` samples around the current peak position.
#[allow(clippy::too_many_arguments)]
pub fn refine_overlapping(
    signal: &SampledSignal,
    events: &[PulseEvent],
    group_delay: f64,
    unit_gain: f64,
    reach: f64,
    radius: usize,
    sweeps: usize,
    response: impl Fn(f64, f64) -> f64,
) -> Vec<PulseEvent> {
    let n = signal.len();
    let mut ev = events.to_vec();
    if n < 3 || ev.len() < 2 {
        return ev;
    }
    let mut order: Vec<usize> = (0..ev.len()).collect();
    order.sort_by(|&i, &j| ev[j].alpha.total_cmp(&ev[i].alpha).then(i.cmp(&j)));
    let r = radius.max(1) as isize;
    for _ in 0..sweeps {
        let mut moved = false;
        for &i in &order {
            let centre = signal.position(ev[i].tau + group_delay).round() as isize;
            let lo = (centre - r - 1).max(0) as usize;
            let hi = ((centre + r + 1).min(n as isize - 1)).max(0) as usize;
            if hi < lo + 2 {
                continue;
            }
            let local: Vec<f64> = (lo..=hi)
                .map(|k| {
                    let t = signal.time(k);
                    let others: f64 = ev
                        .iter()
                        .enumerate()
                        .filter(|&(j, e)| j != i && (e.tau - ev[i].tau).abs() < reach)
                        .map(|(_, e)| e.alpha * response(e.tau, t))
                        .sum();
                    signal.values[k] - others
                })
                .collect();
            let Some(&(pos, h)) = peak_candidates(&local, f64::NEG_INFINITY)
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
            else {
                continue;
            };
            let tau = signal.time(0) + (lo as f64 + pos) * signal.dt - group_delay;
            let alpha = h / unit_gain;
            if (tau - ev[i].tau).abs() > 1e-9 * signal.dt || (alpha - ev[i].alpha).abs() > 1e-12 {
                moved = true;
            }
            ev[i] = PulseEvent::new(tau, alpha);
        }
        if !moved {
            break;
        }
    }
    ev.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    ev
}

/// Splits clusters into `(accepted, rejected)` by `duration <= max_duration`.
pub fn reject_pileup(clusters: &[Cluster], max_duration: f64) -> Result<(Vec<Cluster>, Vec<Cluster>)> {
    if !(max_duration > 0.0) {
        return Err(invalid(format!("max_duration must be > 0, got {max_duration}")));
    }
    Ok(clusters.iter().partition(|c| c.duration <= max_duration))
}

/// Outcome of [`peel`].
#[derive(Debug, Clone, PartialEq)]
pub struct PeelResult {
    /// Events in discovery order.
    pub events: Vec<PulseEvent>,
    pub residual: SampledSignal,
    pub residual_energy: f64,
    /// Windows skipped because the single-pulse fit failed.
    pub warnings: usize,
}

/// Pile-up peeling: repeatedly fit one pulse to the rising edge at the
/// earliest threshold crossing of the residual and subtract the whole pulse.
///
/// The fit window starts one pulse peak-time before the crossing and is grown
/// sample by sample, from three samples up to the crossing plus the peak time.
/// The largest window whose fit residual is consistent with `noise_sigma` is
/// kept (with `noise_sigma = 0` only an exact fit qualifies). Windows ending
/// before the crossing qualify only when the fitted pulse reaches `threshold`.
/// Windows whose fit fails are masked and counted in `warnings`.
pub fn peel(
    signal: &SampledSignal,
    shape: &PulseShape,
    threshold: f64,
    max_pulses: usize,
    noise_sigma: f64,
) -> Result<PeelResult> {
    shape.validate()?;
    if max_pulses < 1 {
        return Err(invalid("max_pulses must be >= 1"));
    }
    if !(threshold > 0.0) {
        return Err(invalid(format!("threshold must be > 0, got {threshold}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(invalid("noise_sigma must be >= 0"));
    }
    let n = signal.len();
    let dt = signal.dt;
    let (t_peak, peak_value) = shape.peak()?;
    let rise = ((t_peak - shape.support_start()) / dt).ceil().max(1.0) as usize;
    let mut residual = signal.values.clone();
    let mut masked = vec![false; n];
    let mut events = Vec::new();
    let mut warnings = 0;
    let mut cursor = 0;

    while events.len() < max_pulses {
        let Some(k) = (cursor..n).find(|&i| !masked[i] && residual[i] >= threshold) else {
            break;
        };
        cursor = k;
        let lo = k.saturating_sub(rise);
        let hi_max = (k + rise).min(n - 1);
        let tau_hi = signal.time(k) - shape.support_start();
        let tau_lo = tau_hi - t_peak - dt;

        let current = signal.with_values(residual.clone());
        let mut best = None;
        for hi in (lo + 2).min(hi_max)..=hi_max {
            let window = current.slice(lo..hi + 1);
            if window.len() < 3 {
                continue;
            }
            let Some(fit) = fit_single(&window, shape, tau_lo, tau_hi) else {
                continue;
            };
            let dof = window.len().saturating_sub(2) as f64;
            let energy = window.energy();
            let allowed = noise_sigma.powi(2) * (dof + 3.0 * (2.0 * dof).sqrt())
                + 1e-12 * energy
                + 1e-300;
            let consistent = fit.2 <= allowed;
            if hi <= k {
                // Windows that stop before the crossing only count for a visible pulse.
                if consistent && fit.1 * peak_value >= threshold {
                    best = Some(fit);
                }
                continue;
            }
            if consistent || best.is_none() {
                best = Some(fit);
            } else {
                break;
            }
        }

        match best {
            Some((tau, alpha, _)) if alpha > 0.0 && alpha.is_finite() => {
                for (i, r) in residual.iter_mut().enumerate() {
                    *r -= alpha * shape.eval(signal.time(i) - tau);
                }
                events.push(PulseEvent::new(tau, alpha));
                if residual[k] >= threshold {
                    masked[k] = true;
                }
            }
            _ => {
                warnings += 1;
                for m in masked.iter_mut().take(hi_max + 1).skip(k) {
                    *m = true;
                }
            }
        }
    }
    let residual = signal.with_values(residual);
    let residual_energy = residual.energy();
    Ok(PeelResult {
        events,
        residual,
        residual_energy,
        warnings,
    })
}
