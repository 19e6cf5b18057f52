//! Non-negative 1-norm regularised deconvolution on the sample grid.
//!
//! Minimises `‖y − P a‖² + c · Σ a(k)` over `a ≥ 0`, where `P` places a sampled
//! pulse at every grid index. The solver is monotone FISTA with periodic
//! least-squares polishing on the current support.

use serde::{Deserialize, Serialize};

use crate::conv::ConvOperator;
use crate::error::{invalid, Error, Result};
use crate::pulse::{PulseEvent, PulseShape};
use crate::signal::SampledSignal;

const POLISH_EVERY: usize = 25;

/// One non-negative activation per sample; `values[k]` is a pulse arriving at
/// `t0 + k·dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activations {
    pub values: Vec<f64>,
    pub dt: f64,
    pub t0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseResult {
    pub activations: Activations,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    /// Objective after every iteration.
    pub history: Vec<f64>,
}

/// `2σ·√(2 ln n)·‖p‖₂`, the universal-threshold analogue for the penalty weight.
pub fn default_regularization(sigma: f64, n: usize, shape: &PulseShape, dt: f64) -> f64 {
    let norm = shape.kernel(dt).energy().sqrt();
    2.0 * sigma * (2.0 * (n.max(2) as f64).ln()).sqrt() * norm
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

struct Problem<'a> {
    op: ConvOperator,
    y: &'a [f64],
    c: f64,
}

impl Problem<'_> {
    fn objective(&self, a: &[f64], pa: &[f64]) -> f64 {
        sq_dist(pa, self.y) + self.c * a.iter().sum::<f64>()
    }

    fn gradient(&self, pa: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = pa.iter().zip(self.y).map(|(p, y)| p - y).collect();
        let mut g = self.op.adjoint(&r);
        g.iter_mut().for_each(|v| *v *= 2.0);
        g
    }

    fn kkt_holds(&self, a: &[f64], g: &[f64]) -> bool {
        let c = self.c;
        a.iter().zip(g).all(|(&ak, &gk)| {
            if ak > 0.0 {
                (gk + c).abs() <= 1e-3 * c + 1e-7
            } else {
                gk + c >= -1e-7
            }
        })
    }

    /// Solves the optimality system on the support of `a` by conjugate
    /// gradients, `P_Sᵀ P_S x = P_Sᵀ y − c/2`, then clips at zero.
    fn polish(&self, a: &[f64]) -> Vec<f64> {
        let support: Vec<usize> = (0..a.len()).filter(|&k| a[k] > 0.0).collect();
        if support.is_empty() {
            return a.to_vec();
        }
        let n = a.len();
        let normal = |x: &[f64]| -> Vec<f64> {
            let mut full = vec![0.0; n];
            for (&k, &v) in support.iter().zip(x) {
                full[k] = v;
            }
            let back = self.op.adjoint(&self.op.apply(&full));
            support.iter().map(|&k| back[k]).collect()
        };
        let pty = self.op.adjoint(self.y);
        let b: Vec<f64> = support.iter().map(|&k| pty[k] - 0.5 * self.c).collect();
        let mut x: Vec<f64> = support.iter().map(|&k| a[k]).collect();
        let ax = normal(&x);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, v)| b - v).collect();
        let mut p = r.clone();
        let mut rr: f64 = r.iter().map(|v| v * v).sum();
        let bnorm: f64 = b.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
        for _ in 0..support.len().min(500) {
            if rr <= 1e-28 * bnorm {
                break;
            }
            let ap = normal(&p);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                break;
            }
            let step = rr / pap;
            for i in 0..x.len() {
                x[i] += step * p[i];
                r[i] -= step * ap[i];
            }
            let rr_new: f64 = r.iter().map(|v| v * v).sum();
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..p.len() {
                p[i] = r[i] + beta * p[i];
            }
        }
        let mut out = vec![0.0; n];
        for (&k, &v) in support.iter().zip(&x) {
            out[k] = v.max(0.0);
        }
        out
    }
}

/// Solves the non-negative lasso for the pulse train.
///
/// Stops when the first-order optimality conditions hold, when an accepted
/// iteration lowers the objective by less than `tol` relative, or after
/// `max_iter` iterations (`converged = false`).
pub fn sparse_deconvolve(
    signal: &SampledSignal,
    shape: &PulseShape,
    c: f64,
    tol: f64,
    max_iter: usize,
) -> Result<SparseResult> {
    shape.validate()?;
    if !(c.is_finite() && c >= 0.0) {
        return Err(invalid(format!("regularisation weight must be >= 0, got {c}")));
    }
    if !(tol > 0.0) {
        return Err(invalid(format!("tolerance must be > 0, got {tol}")));
    }
    let kernel = shape.kernel(signal.dt);
    if kernel.is_degenerate() {
        return Err(Error::DegeneratePulse);
    }
    let n = signal.len();
    let problem = Problem {
        op: ConvOperator::new(kernel, n),
        y: &signal.values,
        c,
    };
    let lipschitz = 2.0 * problem.op.norm_sq_bound(60);
    let step = 1.0 / lipschitz;

    let mut a = vec![0.0; n];
    let mut pa = vec![0.0; n];
    let mut f = problem.objective(&a, &pa);
    let mut history = Vec::new();
    let mut z = a.clone();
    let mut pz = pa.clone();
    let mut t = 1.0_f64;
    let mut converged = false;
    let mut iterations = 0;

    if n == 0 || problem.kkt_holds(&a, &problem.gradient(&pa)) {
        converged = true;
    }

    while !converged && iterations < max_iter {
        iterations += 1;
        let g = problem.gradient(&pz);
        let u: Vec<f64> = z
            .iter()
            .zip(&g)
            .map(|(zk, gk)| (zk - step * (gk + c)).max(0.0))
            .collect();
        let pu = problem.op.apply(&u);
        let fu = problem.objective(&u, &pu);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let accepted = fu <= f;
        let (a_new, pa_new, f_new) = if accepted {
            (u.clone(), pu.clone(), fu)
        } else {
            (a.clone(), pa.clone(), f)
        };
        let w1 = t / t_next;
        let w2 = (t - 1.0) / t_next;
        for k in 0..n {
            z[k] = a_new[k] + w1 * (u[k] - a_new[k]) + w2 * (a_new[k] - a[k]);
            pz[k] = pa_new[k] + w1 * (pu[k] - pa_new[k]) + w2 * (pa_new[k] - pa[k]);
        }
        let decrease = f - f_new;
        a = a_new;
        pa = pa_new;
        f = f_new;
        t = t_next;

        if iterations % POLISH_EVERY == 0 {
            let candidate = problem.polish(&a);
            let pc = problem.op.apply(&candidate);
            let fc = problem.objective(&candidate, &pc);
            if fc <= f {
                a = candidate;
                pa = pc;
                f = fc;
                z.clone_from(&a);
                pz.clone_from(&pa);
                t = 1.0;
            }
            if problem.kkt_holds(&a, &problem.gradient(&pa)) {
                converged = true;
            }
        }
        history.push(f);
        if accepted && decrease >= 0.0 && decrease < tol * f && iterations > POLISH_EVERY {
            converged = true;
        }
    }

    Ok(SparseResult {
        activations: Activations {
            values: a,
            dt: signal.dt,
            t0: signal.t0,
        },
        converged,
        iterations,
        objective: f,
        history,
    })
}

/// Merges runs of non-zero activations into events.
///
/// Non-zero entries (above `1e-9` of the largest) whose indices differ by at
/// most `merge_window` form one run; its event has the summed amplitude and
/// the amplitude-weighted mean time. Events below `min_alpha` are dropped.
pub fn activations_to_events(act: &Activations, min_alpha: f64, merge_window: usize) -> Vec<PulseEvent> {
    let max = act.values.iter().fold(0.0_f64, |m, &v| m.max(v));
    if max <= 0.0 {
        return Vec::new();
    }
    let floor = 1e-9 * max;
    let support: Vec<usize> = (0..act.values.len())
        .filter(|&k| act.values[k] > floor)
        .collect();
    let mut events = Vec::new();
    let mut i = 0;
    while i < support.len() {
        let mut j = i;
        while j + 1 < support.len() && support[j + 1] - support[j] <= merge_window {
            j += 1;
        }
        let run = &support[i..=j];
        let alpha: f64 = run.iter().map(|&k| act.values[k]).sum();
        let centroid = run.iter().map(|&k| k as f64 * act.values[k]).sum::<f64>() / alpha;
        if alpha >= min_alpha {
            events.push(PulseEvent::new(act.t0 + centroid * act.dt, alpha));
        }
        i = j + 1;
    }
    events
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

    fn acts(values: Vec<f64>) -> Activations {
        Activations {
            values,
            dt: 1.0,
            t0: 0.0,
        }
    }

    #[test]
    fn zero_signal_zero_activations() {
        let r = sparse_deconvolve(&SampledSignal::zeros(200, 1.0, 0.0), &fig1(), 1.0, 1e-9, 100).unwrap();
        assert!(r.activations.values.iter().all(|&v| v == 0.0));
        assert!(r.converged);
    }

    #[test]
    fn exact_on_grid_recovery() {
        let s = trace(&[(10.0, 1.0)], 300);
        let r = sparse_deconvolve(&s, &fig1(), 0.0, 1e-12, 5000).unwrap();
        let v = &r.activations.values;
        assert!((v[10] - 1.0).abs() <= 1e-4, "a(10) = {}", v[10]);
        for (k, &x) in v.iter().enumerate() {
            if k != 10 {
                assert!(x.abs() <= 1e-4, "a({k}) = {x}");
            }
        }
    }

    #[test]
    fn off_grid_pulse_is_verbose() {
        let s = trace(&[(10.5, 1.0)], 300);
        let r = sparse_deconvolve(&s, &fig1(), 0.0, 1e-12, 5000).unwrap();
        let v = &r.activations.values;
        assert!(v[10] > 0.1 && v[11] > 0.1, "{} {}", v[10], v[11]);
        let ev = activations_to_events(&r.activations, 0.05, 2);
        assert_eq!(ev.len(), 1);
        assert!((ev[0].alpha - 1.0).abs() < 0.02);
        assert!((ev[0].tau - 10.5).abs() < 0.5);
    }

    #[test]
    fn objective_is_monotone_and_kkt_holds() {
        let s = add_noise(&trace(&[(20.0, 1.0), (70.0, 0.5), (75.0, 0.8)], 250), 0.02, 4).unwrap();
        let c = default_regularization(0.02, s.len(), &fig1(), 1.0);
        let r = sparse_deconvolve(&s, &fig1(), c, 1e-14, 20000).unwrap();
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.converged);
        let op = ConvOperator::new(fig1().kernel(1.0), s.len());
        let pa = op.apply(&r.activations.values);
        let resid: Vec<f64> = pa.iter().zip(&s.values).map(|(p, y)| p - y).collect();
        let g: Vec<f64> = op.adjoint(&resid).iter().map(|v| 2.0 * v).collect();
        for (k, (&a, &gk)) in r.activations.values.iter().zip(&g).enumerate() {
            if a > 0.0 {
                assert!((gk + c).abs() <= 1e-3 * c + 1e-6, "k {k}: {}", gk + c);
            } else {
                assert!(gk + c >= -1e-6, "k {k}: {}", gk + c);
            }
        }
    }

    #[test]
    fn merge_examples() {
        assert!(activations_to_events(&acts(vec![0.0; 20]), 0.0, 2).is_empty());
        let mut v = vec![0.0; 20];
        v[10] = 0.6;
        v[11] = 0.4;
        let ev = activations_to_events(&acts(v), 0.0, 2);
        assert_eq!(ev.len(), 1);
        assert!((ev[0].tau - 10.4).abs() < 1e-12 && (ev[0].alpha - 1.0).abs() < 1e-12);
        let mut v = vec![0.0; 80];
        v[10] = 1.0;
        v[60] = 0.6;
        let ev = activations_to_events(&acts(v), 0.0, 2);
        assert_eq!(ev, vec![PulseEvent::new(10.0, 1.0), PulseEvent::new(60.0, 0.6)]);
    }

    #[test]
    fn min_alpha_drops_small_runs() {
        let mut v = vec![0.0; 30];
        v[5] = 0.01;
        v[20] = 1.0;
        assert_eq!(activations_to_events(&acts(v), 0.1, 2).len(), 1);
    }

    #[test]
    fn invalid_arguments() {
        let s = SampledSignal::zeros(10, 1.0, 0.0);
        assert!(sparse_deconvolve(&s, &fig1(), -1.0, 1e-6, 10).is_err());
        assert!(sparse_deconvolve(&s, &fig1(), 1.0, 0.0, 10).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn larger_penalty_shrinks_total_activation(seed in 0u64..1000) {
            let s = add_noise(&trace(&[(20.0, 1.0), (60.0, 0.7)], 200), 0.02, seed).unwrap();
            let mut prev = f64::INFINITY;
            for c in [0.01, 0.05, 0.2, 1.0] {
                let r = sparse_deconvolve(&s, &fig1(), c, 1e-14, 20000).unwrap();
                let total: f64 = r.activations.values.iter().sum();
                prop_assert!(total <= prev + 1e-6, "c {}: {} > {}", c, total, prev);
                prev = total;
            }
        }
    }
}
