//! Scoring against ground truth and Monte-Carlo sweeps.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{detect_peaks, find_clusters, peel, refine_overlapping};
use crate::error::{invalid, Error, Result};
use crate::fit::select_order;
use crate::pulse::PulseEvent;
use crate::shaping::{matched_response, Shaper};
use crate::signal::{derive_seed, SampledSignal};
use crate::sim::{simulate, SimConfig};
use crate::sparse::{activations_to_events, default_regularization, sparse_deconvolve};
use crate::spectrum::{estimate_histogram, Histogram};

/// Greedy matching in increasing `|Δτ|`; each event is used at most once and
/// only pairs with `|Δτ| <= time_tol` are considered. Returns
/// `(truth index, estimate index)` pairs sorted by truth index.
pub fn match_events(truth: &[PulseEvent], estimated: &[PulseEvent], time_tol: f64) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..estimated.len()).collect();
    order.sort_by(|&a, &b| estimated[a].tau.total_cmp(&estimated[b].tau));
    let taus: Vec<f64> = order.iter().map(|&j| estimated[j].tau).collect();
    let mut pairs = Vec::new();
    for (i, t) in truth.iter().enumerate() {
        let start = taus.partition_point(|&x| x < t.tau - time_tol);
        for k in start..taus.len() {
            if taus[k] > t.tau + time_tol {
                break;
            }
            pairs.push(((taus[k] - t.tau).abs(), i, order[k]));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_t = vec![false; truth.len()];
    let mut used_e = vec![false; estimated.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_t[i] && !used_e[j] {
            used_t[i] = true;
            used_e[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

/// Detection and estimation metrics of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when nothing was matched.
    pub tau_rmse: Option<f64>,
    pub alpha_rmse: Option<f64>,
    pub n_matched: usize,
}

pub fn score(truth: &[PulseEvent], estimated: &[PulseEvent], matching: &[(usize, usize)]) -> Score {
    let m = matching.len() as f64;
    let ratio = |den: usize, other_empty: bool| {
        if den == 0 {
            if other_empty {
                1.0
            } else {
                0.0
            }
        } else {
            m / den as f64
        }
    };
    let precision = ratio(estimated.len(), truth.is_empty());
    let recall = ratio(truth.len(), estimated.is_empty());
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let rmse = |f: &dyn Fn(&PulseEvent) -> f64| {
        (!matching.is_empty()).then(|| {
            (matching
                .iter()
                .map(|&(i, j)| (f(&truth[i]) - f(&estimated[j])).powi(2))
                .sum::<f64>()
                / m)
                .sqrt()
        })
    };
    Score {
        precision,
        recall,
        f1,
        tau_rmse: rmse(&|e| e.tau),
        alpha_rmse: rmse(&|e| e.alpha),
        n_matched: matching.len(),
    }
}

/// Wasserstein-1 distance `Σ |CDF₁ − CDF₂| · (c_{i+1} − c_i)` over bin centres.
pub fn spectrum_distance(h1: &Histogram, h2: &Histogram) -> Result<f64> {
    if h1.edges != h2.edges {
        return Err(Error::MismatchedEdges);
    }
    for h in [h1, h2] {
        if !h.is_normalized() {
            return Err(Error::NotNormalized(h.total()));
        }
    }
    let c = h1.centers();
    let (mut c1, mut c2, mut w) = (h1.underflow, h2.underflow, 0.0);
    for i in 0..c.len().saturating_sub(1) {
        c1 += h1.masses[i];
        c2 += h2.masses[i];
        w += (c1 - c2).abs() * (c[i + 1] - c[i]);
    }
    Ok(w)
}

/// Detection chain applied in a sweep. Thresholds are in pulse-amplitude
/// units unless stated otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodConfig {
    /// Shape, then pick peaks above `threshold` (amplitude units).
    Peaks {
        #[serde(flatten)]
        shaper: Shaper,
        threshold: f64,
        #[serde(default = "default_separation")]
        min_separation: usize,
    },
    /// Pile-up peeling on the raw signal; `threshold` in signal units.
    Peel {
        threshold: f64,
        #[serde(default = "default_max_pulses")]
        max_pulses: usize,
    },
    /// Order selection on each above-threshold cluster of the raw signal.
    Fit {
        threshold: f64,
        #[serde(default = "default_n_max")]
        n_max: usize,
    },
    /// Sparse deconvolution followed by merging of adjacent activations.
    Sparse {
        #[serde(default)]
        c: Option<f64>,
        #[serde(default = "default_tol")]
        tol: f64,
        #[serde(default = "default_max_iter")]
        max_iter: usize,
        #[serde(default)]
        min_alpha: f64,
        #[serde(default = "default_merge_window")]
        merge_window: usize,
    },
}

fn default_separation() -> usize {
    5
}
fn default_max_pulses() -> usize {
    10_000
}
fn default_n_max() -> usize {
    4
}
fn default_tol() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    5000
}
fn default_merge_window() -> usize {
    2
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::Peaks { shaper, .. } => match shaper {
                Shaper::Matched => "matched_peaks",
                Shaper::Trapezoid { .. } => "trapezoid_peaks",
                Shaper::Wiener { .. } => "wiener_peaks",
            },
            MethodConfig::Peel { .. } => "peel",
            MethodConfig::Fit { .. } => "fit",
            MethodConfig::Sparse { .. } => "sparse",
        }
    }

    /// Runs the chain on `signal`; `sigma` is the noise level it assumes.
    pub fn estimate(
        &self,
        signal: &SampledSignal,
        shape: &crate::pulse::PulseShape,
        sigma: f64,
    ) -> Result<Vec<PulseEvent>> {
        match self {
            MethodConfig::Peaks {
                shaper,
                threshold,
                min_separation,
            } => {
                let shaped = shaper.apply(signal, shape)?;
                let events = detect_peaks(
                    &shaped.signal,
                    threshold * shaped.unit_gain,
                    *min_separation,
                    shaped.group_delay,
                    shaped.unit_gain,
                )?;
                if !matches!(shaper, Shaper::Matched) {
                    return Ok(events);
                }
                let (response, reach) = matched_response(shape, signal.dt);
                Ok(refine_overlapping(
                    &shaped.signal,
                    &events,
                    shaped.group_delay,
                    shaped.unit_gain,
                    reach,
                    2,
                    3,
                    response,
                ))
            }
            MethodConfig::Peel {
                threshold,
                max_pulses,
            } => Ok(peel(signal, shape, *threshold, *max_pulses, sigma)?.events),
            MethodConfig::Fit { threshold, n_max } => {
                fit_clusters(signal, shape, sigma, *threshold, *n_max)
            }
            MethodConfig::Sparse {
                c,
                tol,
                max_iter,
                min_alpha,
                merge_window,
            } => {
                let c = c.unwrap_or_else(|| default_regularization(sigma, signal.len(), shape, signal.dt));
                let r = sparse_deconvolve(signal, shape, c, *tol, *max_iter)?;
                Ok(activations_to_events(&r.activations, *min_alpha, *merge_window))
            }
        }
    }
}

/// Runs order selection on each cluster, widened by one pulse peak time on
/// the left (to catch the rising edge) and one peak time on the right.
pub fn fit_clusters(
    signal: &SampledSignal,
    shape: &crate::pulse::PulseShape,
    sigma: f64,
    threshold: f64,
    n_max: usize,
) -> Result<Vec<PulseEvent>> {
    let sigma = if sigma > 0.0 { sigma } else { 1e-9 };
    let (t_peak, _) = shape.peak()?;
    let pad = (t_peak / signal.dt).ceil() as usize + 1;
    let mut events = Vec::new();
    for c in find_clusters(signal, threshold)? {
        let lo = signal.position(c.t1).floor().max(0.0) as usize;
        let hi = signal.position(c.t2).ceil() as usize;
        let window = signal.slice(lo.saturating_sub(pad)..hi + pad + 1);
        let cap = n_max.min(window.len() / 2);
        let sel = select_order(&window, shape, sigma, cap)?;
        events.extend(sel.fit.events);
    }
    events.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    Ok(events)
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sim: SimConfig,
    pub method: MethodConfig,
    /// Matching tolerance; one sample period when omitted.
    #[serde(default)]
    pub time_tol: Option<f64>,
    /// Bin edges for the amplitude-spectrum distance; skipped when omitted.
    #[serde(default)]
    pub spectrum_edges: Option<Vec<f64>>,
}

/// Per-trial report (one JSON line each).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub grid_index: usize,
    pub trial: usize,
    pub seed: u64,
    pub method: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tau_rmse: Option<f64>,
    pub alpha_rmse: Option<f64>,
    pub spectrum_w1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<f64>,
    pub n_truth: usize,
    pub n_estimated: usize,
    pub error: Option<String>,
    /// Reserved for per-event reliability scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reliability: Option<f64>,
    pub config: SweepPoint,
}

fn spectrum_w1(edges: &[f64], truth: &[PulseEvent], est: &[PulseEvent]) -> Result<Option<f64>> {
    if truth.is_empty() || est.is_empty() {
        return Ok(None);
    }
    let a: Vec<f64> = truth.iter().map(|e| e.alpha).collect();
    let b: Vec<f64> = est.iter().map(|e| e.alpha).collect();
    let h1 = estimate_histogram(&a, edges)?.normalized();
    let h2 = estimate_histogram(&b, edges)?.normalized();
    spectrum_distance(&h1, &h2).map(Some)
}

/// Simulates, estimates and scores one trial. Failures are recorded in the
/// report rather than returned.
pub fn run_trial(point: &SweepPoint, grid_index: usize, trial: usize, seed: u64, timings: bool) -> BenchReport {
    let mut config = point.sim.clone();
    config.seed = seed;
    let start = Instant::now();
    let outcome = simulate(&config).and_then(|sim| {
        let est = point.method.estimate(&sim.noisy, &config.shape, config.sigma)?;
        Ok((sim.events, est))
    });
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let mut report = BenchReport {
        grid_index,
        trial,
        seed,
        method: point.method.name().to_string(),
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        tau_rmse: None,
        alpha_rmse: None,
        spectrum_w1: None,
        runtime_ms: timings.then_some(elapsed),
        n_truth: 0,
        n_estimated: 0,
        error: None,
        reliability: None,
        config: point.clone(),
    };
    match outcome {
        Ok((truth, est)) => {
            let tol = point.time_tol.unwrap_or(config.dt);
            let s = score(&truth, &est, &match_events(&truth, &est, tol));
            report.precision = s.precision;
            report.recall = s.recall;
            report.f1 = s.f1;
            report.tau_rmse = s.tau_rmse;
            report.alpha_rmse = s.alpha_rmse;
            report.n_truth = truth.len();
            report.n_estimated = est.len();
            if let Some(edges) = &point.spectrum_edges {
                match spectrum_w1(edges, &truth, &est) {
                    Ok(w) => report.spectrum_w1 = w,
                    Err(e) => report.error = Some(e.to_string()),
                }
            }
        }
        Err(e) => report.error = Some(e.to_string()),
    }
    report
}

/// Seed of trial `trial` at grid point `grid_index`.
pub fn trial_seed(base_seed: u64, grid_index: usize, trial: usize) -> u64 {
    derive_seed(derive_seed(base_seed, grid_index as u64), trial as u64)
}

/// Runs every grid point `trials` times in parallel. Output order is
/// `(grid_index, trial)` regardless of scheduling.
pub fn run_sweep(points: &[SweepPoint], trials: usize, base_seed: u64, timings: bool) -> Result<Vec<BenchReport>> {
    if trials < 1 {
        return Err(invalid("trials must be >= 1"));
    }
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|g| (0..trials).map(move |t| (g, t)))
        .collect();
    Ok(jobs
        .par_iter()
        .map(|&(g, t)| run_trial(&points[g], g, t, trial_seed(base_seed, g, t), timings))
        .collect())
}

/// Mean and sample standard deviation of the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Stat {
    fn of(values: impl Iterator<Item = f64>) -> Stat {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return Stat { mean: None, std: None };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.len() > 1)
            .then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Stat { mean: Some(mean), std }
    }
}

/// Per-grid-point summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub grid_index: usize,
    pub method: String,
    pub trials: usize,
    pub failures: usize,
    pub precision: Stat,
    pub recall: Stat,
    pub f1: Stat,
    pub tau_rmse: Stat,
    pub alpha_rmse: Stat,
    pub spectrum_w1: Stat,
}

/// Aggregates reports by grid index (ascending); failed trials are counted
/// and excluded from the statistics.
pub fn aggregate(reports: &[BenchReport]) -> Vec<Summary> {
    let mut indices: Vec<usize> = reports.iter().map(|r| r.grid_index).collect();
    indices.sort_unstable();
    indices.dedup();
    indices
        .into_iter()
        .map(|g| {
            let all: Vec<&BenchReport> = reports.iter().filter(|r| r.grid_index == g).collect();
            let ok: Vec<&&BenchReport> = all.iter().filter(|r| r.error.is_none()).collect();
            Summary {
                grid_index: g,
                method: all[0].method.clone(),
                trials: all.len(),
                failures: all.len() - ok.len(),
                precision: Stat::of(ok.iter().map(|r| r.precision)),
                recall: Stat::of(ok.iter().map(|r| r.recall)),
                f1: Stat::of(ok.iter().map(|r| r.f1)),
                tau_rmse: Stat::of(ok.iter().filter_map(|r| r.tau_rmse)),
                alpha_rmse: Stat::of(ok.iter().filter_map(|r| r.alpha_rmse)),
                spectrum_w1: Stat::of(ok.iter().filter_map(|r| r.spectrum_w1)),
            }
        })
        .collect()
}

/// Writes summaries as CSV with `*_mean`/`*_std` columns (empty when undefined).
pub fn write_summary_csv<W: std::io::Write>(summaries: &[Summary], w: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    let metrics = ["precision", "recall", "f1", "tau_rmse", "alpha_rmse", "spectrum_w1"];
    let mut header = vec!["grid_index".to_string(), "method".into(), "trials".into(), "failures".into()];
    for m in metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    wtr.write_record(&header)?;
    let fmt = |v: Option<f64>| v.map(crate::io::fmt17).unwrap_or_default();
    for s in summaries {
        let mut row = vec![
            s.grid_index.to_string(),
            s.method.clone(),
            s.trials.to_string(),
            s.failures.to_string(),
        ];
        for st in [s.precision, s.recall, s.f1, s.tau_rmse, s.alpha_rmse, s.spectrum_w1] {
            row.push(fmt(st.mean));
            row.push(fmt(st.std));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
