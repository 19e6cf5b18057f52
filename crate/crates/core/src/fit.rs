//! Nonlinear least-squares fitting of `N` pulses and residual-based order
//! selection.
//!
//! For fixed arrival times the model is linear in the amplitudes, so they are
//! eliminated in closed form and only the times are searched (cyclic
//! coordinate descent with golden-section line searches).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conv::ConvOperator;
use crate::error::{invalid, Error, Result};
use crate::pulse::{PulseEvent, PulseShape};
use crate::signal::SampledSignal;

pub const MAX_CONDITION: f64 = 1e12;
const GOLDEN: f64 = 0.618_033_988_749_894_8;
const SCAN_POINTS: usize = 17;

/// A fitted pulse model. JSON field names: `events, rss, n, converged, iterations`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Sorted by `tau`.
    pub events: Vec<PulseEvent>,
    pub rss: f64,
    #[serde(rename = "n")]
    pub n_samples: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Extra pulse before the window start, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PulseEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_sweeps: usize,
    /// Fit one additional pulse arriving before the first sample to absorb the
    /// tail of earlier activity.
    pub phantom: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 200,
            phantom: false,
        }
    }
}

fn column(signal: &SampledSignal, shape: &PulseShape, tau: f64) -> Vec<f64> {
    (0..signal.len())
        .map(|k| shape.eval(signal.time(k) - tau))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Amplitudes and exact residual for fixed columns.
fn solve_columns(y: &[f64], cols: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let n = cols.len();
    if n == 0 {
        return Ok((Vec::new(), dot(y, y)));
    }
    let gram = DMatrix::from_fn(n, n, |i, j| dot(&cols[i], &cols[j]));
    let rhs = DVector::from_fn(n, |i, _| dot(&cols[i], y));
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::DegeneratePlacement(cond));
    }
    let alphas = gram
        .cholesky()
        .ok_or(Error::DegeneratePlacement(cond))?
        .solve(&rhs);
    let mut rss = 0.0;
    for (k, &yk) in y.iter().enumerate() {
        let model: f64 = cols.iter().zip(alphas.iter()).map(|(c, a)| a * c[k]).sum();
        rss += (yk - model).powi(2);
    }
    Ok((alphas.iter().copied().collect(), rss))
}

/// Least-squares amplitudes for pulses at `taus`, and the residual sum of
/// squares. Amplitudes are unconstrained (may be negative).
pub fn solve_amplitudes(
    signal: &SampledSignal,
    shape: &PulseShape,
    taus: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let cols: Vec<Vec<f64>> = taus.iter().map(|&t| column(signal, shape, t)).collect();
    solve_columns(&signal.values, &cols)
}

/// Golden-section minimisation on `[lo, hi]` after a coarse scan.
fn line_search(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    if !(hi > lo) {
        return (lo, f(lo));
    }
    let step = (hi - lo) / (SCAN_POINTS - 1) as f64;
    let xs: Vec<f64> = (0..SCAN_POINTS).map(|i| lo + i as f64 * step).collect();
    let fs: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let best = (0..SCAN_POINTS)
        .min_by(|&i, &j| fs[i].total_cmp(&fs[j]))
        .expect("non-empty scan");
    let (mut a, mut b) = (xs[best.saturating_sub(1)], xs[(best + 1).min(SCAN_POINTS - 1)]);
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    let fm = f(mid);
    // never return worse than the best scan point
    if fm <= fs[best] {
        (mid, fm)
    } else {
        (xs[best], fs[best])
    }
}

/// Best single pulse `(tau, alpha, rss)` with `tau ∈ [tau_lo, tau_hi]`.
/// Returns `None` when the window carries no usable information.
pub fn fit_single(
    window: &SampledSignal,
    shape: &PulseShape,
    tau_lo: f64,
    tau_hi: f64,
) -> Option<(f64, f64, f64)> {
    let y = &window.values;
    let energy = dot(y, y);
    let rss_at = |tau: f64| -> (f64, f64) {
        let c = column(window, shape, tau);
        let cc = dot(&c, &c);
        if cc <= 0.0 {
            return (0.0, energy);
        }
        let alpha = dot(&c, y) / cc;
        let rss = y
            .iter()
            .zip(&c)
            .map(|(v, p)| (v - alpha * p).powi(2))
            .sum();
        (alpha, rss)
    };
    let (tau, rss) = line_search(|t| rss_at(t).1, tau_lo, tau_hi, 1e-10 * window.dt);
    let (alpha, _) = rss_at(tau);
    if !(rss.is_finite() && alpha.is_finite()) || rss >= energy {
        return None;
    }
    Some((tau, alpha, rss))
}

fn residual_of(signal: &SampledSignal, shape: &PulseShape, taus: &[f64]) -> Vec<f64> {
    match solve_amplitudes(signal, shape, taus) {
        Ok((alphas, _)) => {
            let mut r = signal.values.clone();
            for (&t, &a) in taus.iter().zip(&alphas) {
                for (k, v) in r.iter_mut().enumerate() {
                    *v -= a * shape.eval(signal.time(k) - t);
                }
            }
            r
        }
        Err(_) => signal.values.clone(),
    }
}

/// Time of the largest matched-filter response of the residual of `taus`,
/// skipping samples within half a sample of an existing time.
fn residual_peak(signal: &SampledSignal, shape: &PulseShape, taus: &[f64]) -> Option<f64> {
    let r = residual_of(signal, shape, taus);
    let op = ConvOperator::new(shape.kernel(signal.dt), signal.len());
    let mf = op.adjoint(&r);
    (0..signal.len())
        .filter(|&k| {
            let t = signal.time(k);
            taus.iter().all(|&x| (x - t).abs() >= 0.5 * signal.dt)
        })
        .max_by(|&i, &j| mf[i].total_cmp(&mf[j]).then(j.cmp(&i)))
        .map(|k| signal.time(k))
}

/// Fits `n` pulses by minimising the residual sum of squares.
pub fn fit_pulses(
    signal: &SampledSignal,
    shape: &PulseShape,
    n: usize,
    init: Option<&[f64]>,
) -> Result<FitResult> {
    fit_pulses_with(signal, shape, n, init, &FitOptions::default())
}

pub fn fit_pulses_with(
    signal: &SampledSignal,
    shape: &PulseShape,
    n: usize,
    init: Option<&[f64]>,
    options: &FitOptions,
) -> Result<FitResult> {
    shape.validate()?;
    let ns = signal.len();
    let extra = usize::from(options.phantom);
    if n + extra > ns / 2 {
        return Err(Error::Overparameterized {
            pulses: n + extra,
            samples: ns,
        });
    }
    let mut taus: Vec<f64> = match init {
        Some(t) => {
            if t.len() != n {
                return Err(invalid(format!(
                    "init has {} times for {} pulses",
                    t.len(),
                    n
                )));
            }
            t.to_vec()
        }
        None => {
            let mut t = Vec::with_capacity(n);
            for _ in 0..n {
                let next = residual_peak(signal, shape, &t)
                    .ok_or_else(|| invalid("no room to place another pulse"))?;
                t.push(next);
            }
            t
        }
    };
    taus.sort_by(f64::total_cmp);
    if taus.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::DegeneratePlacement(f64::INFINITY));
    }

    let (t_peak, _) = shape.peak()?;
    let reach = t_peak.max(signal.dt);
    let t_first = signal.time(0);
    let t_last = signal.time(ns.saturating_sub(1)) - shape.support_start() - 1e-6 * signal.dt;
    let gap = 1e-6 * signal.dt;

    let mut phantom_tau = if options.phantom {
        Some(t_first - reach)
    } else {
        None
    };
    let all_taus = |taus: &[f64], ph: Option<f64>| -> Vec<f64> {
        let mut v = Vec::with_capacity(taus.len() + 1);
        v.extend(ph);
        v.extend_from_slice(taus);
        v
    };

    let mut cols: Vec<Vec<f64>> = all_taus(&taus, phantom_tau)
        .iter()
        .map(|&t| column(signal, shape, t))
        .collect();
    let (_, mut rss) = solve_columns(&signal.values, &cols)?;
    let mut converged = n + extra == 0;
    let mut sweeps = 0;

    while !converged && sweeps < options.max_sweeps {
        sweeps += 1;
        let before = rss;
        for j in 0..n + extra {
            let (lo, hi) = if options.phantom && j == 0 {
                let t = phantom_tau.expect("phantom enabled");
                let hi = taus.first().map_or(t_first, |&x| x.min(t_first)) - gap;
                ((t - reach).min(hi), hi)
            } else {
                let i = j - extra;
                let mut lo = taus[i] - reach;
                let mut hi = (taus[i] + reach).min(t_last);
                if i > 0 {
                    lo = lo.max(taus[i - 1] + gap);
                }
                if i + 1 < n {
                    hi = hi.min(taus[i + 1] - gap);
                }
                (lo.min(hi), hi)
            };
            let eval = |x: f64| -> f64 {
                let mut trial = cols.clone();
                trial[j] = column(signal, shape, x);
                solve_columns(&signal.values, &trial).map_or(f64::INFINITY, |r| r.1)
            };
            let (x, fx) = line_search(eval, lo, hi, 1e-10 * signal.dt);
            if fx < rss {
                rss = fx;
                cols[j] = column(signal, shape, x);
                if options.phantom && j == 0 {
                    phantom_tau = Some(x);
                } else {
                    taus[j - extra] = x;
                }
            }
        }
        if before - rss < 1e-10 * rss || rss <= f64::MIN_POSITIVE {
            converged = true;
        }
    }

    let (alphas, rss) = solve_columns(&signal.values, &cols)?;
    let mut events: Vec<PulseEvent> = taus
        .iter()
        .zip(&alphas[extra..])
        .map(|(&t, &a)| PulseEvent::new(t, a))
        .collect();
    events.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    Ok(FitResult {
        events,
        rss,
        n_samples: ns,
        converged,
        iterations: sweeps,
        phantom: phantom_tau.map(|t| PulseEvent::new(t, alphas[0])),
    })
}

/// One row of the order-selection table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderCandidate {
    pub n: usize,
    pub rss: Option<f64>,
    pub score: Option<f64>,
    pub error: Option<String>,
}

/// Result of [`select_order`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSelection {
    /// Number of pulses chosen by the residual rule.
    pub order: usize,
    /// The chosen fit, with events of amplitude below `3σ` removed.
    pub fit: FitResult,
    pub candidates: Vec<OrderCandidate>,
}

/// Chooses the number of pulses whose residual is closest to its expectation
/// `σ²(n − 2N)`.
///
/// Fits are nested: the `N`-pulse fit starts from the `(N−1)`-pulse solution
/// plus the largest matched-filter response of its residual. Scores within one
/// standard deviation of the residual statistic, `σ²√(2(n − 2N))`, of the best
/// are treated as ties and resolved towards smaller `N`.
pub fn select_order(
    signal: &SampledSignal,
    shape: &PulseShape,
    sigma: f64,
    n_max: usize,
) -> Result<OrderSelection> {
    select_order_with(signal, shape, sigma, n_max, &FitOptions::default())
}

pub fn select_order_with(
    signal: &SampledSignal,
    shape: &PulseShape,
    sigma: f64,
    n_max: usize,
    options: &FitOptions,
) -> Result<OrderSelection> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(invalid(format!("sigma must be > 0, got {sigma}")));
    }
    let ns = signal.len() as f64;
    let var = sigma * sigma;
    let mut candidates = Vec::new();
    let mut fits: Vec<Option<FitResult>> = Vec::new();
    let mut prev: Option<Vec<f64>> = Some(Vec::new());
    for n in 0..=n_max {
        let result = match &prev {
            None => Err(invalid("previous order failed")),
            Some(p) if n == 0 => fit_pulses_with(signal, shape, 0, Some(p), options),
            Some(p) => match residual_peak(signal, shape, p) {
                Some(t) => {
                    let mut init = p.clone();
                    init.push(t);
                    init.sort_by(f64::total_cmp);
                    fit_pulses_with(signal, shape, n, Some(&init), options)
                }
                None => Err(invalid("no room to place another pulse")),
            },
        };
        match result {
            Ok(fit) => {
                let expected = var * (ns - 2.0 * n as f64);
                candidates.push(OrderCandidate {
                    n,
                    rss: Some(fit.rss),
                    score: Some((fit.rss - expected).abs()),
                    error: None,
                });
                prev = Some(fit.events.iter().map(|e| e.tau).collect());
                fits.push(Some(fit));
            }
            Err(e) => {
                candidates.push(OrderCandidate {
                    n,
                    rss: None,
                    score: None,
                    error: Some(e.to_string()),
                });
                prev = None;
                fits.push(None);
            }
        }
    }
    let best = candidates
        .iter()
        .filter_map(|c| c.score)
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::AllFitsFailed);
    }
    let order = candidates
        .iter()
        .find(|c| {
            c.score.is_some_and(|s| {
                let dof = (ns - 2.0 * c.n as f64).max(1.0);
                s <= best + var * (2.0 * dof).sqrt()
            })
        })
        .map(|c| c.n)
        .expect("best score is attained");
    let mut fit = fits[order].take().expect("selected order has a fit");
    fit.events.retain(|e| e.alpha >= 3.0 * sigma);
    Ok(OrderSelection {
        order,
        fit,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{add_noise, synthesize};
    use proptest::prelude::*;

    fn fig1() -> PulseShape {
        PulseShape::double_exp(0.06, 0.15).unwrap()
    }

    fn trace(events: &[(f64, f64)], n: usize) -> SampledSignal {
        let ev: Vec<PulseEvent> = events.iter().map(|&(t, a)| PulseEvent::new(t, a)).collect();
        synthesize(&ev, &fig1(), n, 1.0, 0.0)
    }

    #[test]
    fn amplitudes_self_consistent() {
        let s = trace(&[(10.0, 1.0)], 150);
        let (a, rss) = solve_amplitudes(&s, &fig1(), &[10.0]).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-9);
        assert!(rss < 1e-20);
        let s = trace(&[(10.0, 1.0), (16.0, 0.7)], 150);
        let (a, _) = solve_amplitudes(&s, &fig1(), &[10.0, 16.0]).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-6 && (a[1] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn coincident_times_are_degenerate() {
        let s = trace(&[(10.0, 1.0)], 150);
        assert!(matches!(
            solve_amplitudes(&s, &fig1(), &[10.0, 10.0 + 1e-9]),
            Err(Error::DegeneratePlacement(_))
        ));
    }

    #[test]
    fn empty_model() {
        let s = trace(&[(10.0, 1.0)], 150);
        let f = fit_pulses(&s, &fig1(), 0, None).unwrap();
        assert!(f.events.is_empty());
        assert_eq!(f.rss, s.energy());
    }

    #[test]
    fn overparameterized() {
        let s = trace(&[(1.0, 1.0)], 6);
        assert!(matches!(
            fit_pulses(&s, &fig1(), 4, None),
            Err(Error::Overparameterized { .. })
        ));
    }

    #[test]
    fn separated_pair_is_exact() {
        let s = trace(&[(10.0, 1.0), (60.0, 0.6)], 200);
        let f = fit_pulses(&s, &fig1(), 2, None).unwrap();
        assert!(f.converged);
        assert!((f.events[0].tau - 10.0).abs() < 1e-3);
        assert!((f.events[1].tau - 60.0).abs() < 1e-3);
        assert!((f.events[0].alpha - 1.0).abs() < 1e-6);
        assert!((f.events[1].alpha - 0.6).abs() < 1e-6);
    }

    #[test]
    fn piled_pair_nested_residuals() {
        let s = trace(&[(10.0, 1.0), (16.0, 0.6)], 150);
        let one = fit_pulses(&s, &fig1(), 1, None).unwrap();
        assert!(one.rss > 0.0);
        let two = fit_pulses(&s, &fig1(), 2, None).unwrap();
        assert!(two.rss <= 1e-8 * s.energy(), "{}", two.rss);
    }

    #[test]
    fn order_zero_forced() {
        let s = trace(&[(10.0, 1.0)], 150);
        let sel = select_order(&s, &fig1(), 0.01, 0).unwrap();
        assert_eq!(sel.order, 0);
        assert!(sel.fit.events.is_empty());
    }

    #[test]
    fn order_selection_finds_piled_pair() {
        let clean = trace(&[(10.0, 1.0), (16.0, 0.6)], 150);
        for seed in 0..5 {
            let s = add_noise(&clean, 1e-6, seed).unwrap();
            let sel = select_order(&s, &fig1(), 1e-6, 3).unwrap();
            assert_eq!(sel.order, 2, "seed {seed}: {:?}", sel.candidates);
        }
    }

    #[test]
    fn order_selection_on_pure_noise() {
        let mut zero = 0;
        for seed in 0..20 {
            let s = add_noise(&SampledSignal::zeros(150, 1.0, 0.0), 0.02, seed).unwrap();
            if select_order(&s, &fig1(), 0.02, 3).unwrap().order == 0 {
                zero += 1;
            }
        }
        assert!(zero >= 18, "{zero}/20");
    }

    #[test]
    fn phantom_absorbs_earlier_tail() {
        let full = trace(&[(-15.0, 1.0), (30.0, 0.8)], 120);
        let plain = fit_pulses(&full, &fig1(), 1, Some(&[30.0])).unwrap();
        let opts = FitOptions {
            phantom: true,
            ..FitOptions::default()
        };
        let ph = fit_pulses_with(&full, &fig1(), 1, Some(&[30.0]), &opts).unwrap();
        assert!(ph.rss < 1e-10 * full.energy(), "{}", ph.rss);
        assert!(plain.rss > 1e3 * ph.rss.max(1e-30));
        assert!((ph.events[0].tau - 30.0).abs() < 1e-3);
        assert!((ph.phantom.unwrap().tau + 15.0).abs() < 1e-2);
    }

    #[test]
    fn fit_result_json_keys() {
        let f = FitResult {
            events: vec![PulseEvent::new(1.0, 2.0)],
            rss: 0.5,
            n_samples: 10,
            converged: true,
            iterations: 3,
            phantom: None,
        };
        let v: serde_json::Value = serde_json::to_value(&f).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        assert_eq!(keys, vec!["converged", "events", "iterations", "n", "rss"]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn nested_rss_non_increasing(
            taus in proptest::collection::vec(5.0f64..100.0, 1..4),
            seed in 0u64..1000,
        ) {
            let ev: Vec<(f64, f64)> = taus.iter().map(|&t| (t, 1.0)).collect();
            let s = add_noise(&trace(&ev, 150), 0.02, seed).unwrap();
            let sel = select_order(&s, &fig1(), 0.02, 3).unwrap();
            let rss: Vec<f64> = sel.candidates.iter().filter_map(|c| c.rss).collect();
            for w in rss.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
        }

        #[test]
        fn residual_orthogonal_to_columns(
            t1 in 5.0f64..40.0, gap in 8.0f64..60.0, a2 in 0.3f64..2.0, seed in 0u64..1000,
        ) {
            let s = add_noise(&trace(&[(t1, 1.0), (t1 + gap, a2)], 150), 0.01, seed).unwrap();
            let f = fit_pulses(&s, &fig1(), 2, Some(&[t1, t1 + gap])).unwrap();
            let taus: Vec<f64> = f.events.iter().map(|e| e.tau).collect();
            let r = residual_of(&s, &fig1(), &taus);
            let rn = dot(&r, &r).sqrt();
            for &t in &taus {
                let c = column(&s, &fig1(), t);
                prop_assert!(dot(&r, &c).abs() <= 1e-6 * rn * dot(&c, &c).sqrt() + 1e-12);
            }
        }

        #[test]
        fn translation_equivariance(t1 in 10.0f64..30.0, gap in 10.0f64..50.0, shift in 1usize..20) {
            let ev = [(t1, 1.0), (t1 + gap, 0.7)];
            let base = trace(&ev, 200);
            let moved = trace(&[(t1 + shift as f64, 1.0), (t1 + gap + shift as f64, 0.7)], 200);
            let fa = fit_pulses(&base, &fig1(), 2, None).unwrap();
            let fb = fit_pulses(&moved, &fig1(), 2, None).unwrap();
            for (a, b) in fa.events.iter().zip(&fb.events) {
                prop_assert!((b.tau - a.tau - shift as f64).abs() < 1e-6);
            }
        }
    }
}
