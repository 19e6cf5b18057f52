//! Matrix-free convolution with a sampled pulse kernel.
//!
//! For a kernel with `taps[m] = p((start + m)·dt)` the forward operator places
//! a pulse at every grid index, `(P a)[n] = Σ_m taps[m] · a[n − start − m]`, and
//! the adjoint correlates, `(Pᵀ r)[j] = Σ_m taps[m] · r[j + start + m]`. Both
//! keep the signal length. Long problems go through a cached FFT.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::pulse::Kernel;

const DIRECT_LIMIT: usize = 1 << 20;
const PAR_CHUNK: usize = 4096;

/// Smallest power of two `>= n`.
pub fn fft_len(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

struct Spectral {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    kernel: Vec<Complex64>,
}

/// `P` and `Pᵀ` for signals of a fixed length.
pub struct ConvOperator {
    kernel: Kernel,
    n: usize,
    spectral: Option<Spectral>,
}

impl ConvOperator {
    pub fn new(kernel: Kernel, n: usize) -> Self {
        let spectral = if n.saturating_mul(kernel.len()) > DIRECT_LIMIT && kernel.len() > 64 {
            let len = fft_len(n + kernel.len());
            let mut planner = FftPlanner::new();
            let forward = planner.plan_fft_forward(len);
            let inverse = planner.plan_fft_inverse(len);
            let mut k = vec![Complex64::new(0.0, 0.0); len];
            for (dst, &t) in k.iter_mut().zip(&kernel.taps) {
                dst.re = t;
            }
            forward.process(&mut k);
            Some(Spectral {
                len,
                forward,
                inverse,
                kernel: k,
            })
        } else {
            None
        };
        Self {
            kernel,
            n,
            spectral,
        }
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn apply(&self, a: &[f64]) -> Vec<f64> {
        assert_eq!(a.len(), self.n, "operator length mismatch");
        match &self.spectral {
            Some(sp) => self.spectral_apply(sp, a, false),
            None => self.direct_apply(a),
        }
    }

    pub fn adjoint(&self, r: &[f64]) -> Vec<f64> {
        assert_eq!(r.len(), self.n, "operator length mismatch");
        match &self.spectral {
            Some(sp) => self.spectral_apply(sp, r, true),
            None => self.direct_adjoint(r),
        }
    }

    fn direct_apply(&self, a: &[f64]) -> Vec<f64> {
        let n = self.n as isize;
        let s = self.kernel.start;
        let taps = &self.kernel.taps;
        let mut out = vec![0.0; self.n];
        for (j, &aj) in a.iter().enumerate() {
            if aj == 0.0 {
                continue;
            }
            for (m, &t) in taps.iter().enumerate() {
                let idx = j as isize + s + m as isize;
                if idx >= n {
                    break;
                }
                if idx >= 0 {
                    out[idx as usize] += t * aj;
                }
            }
        }
        out
    }

    fn direct_adjoint(&self, r: &[f64]) -> Vec<f64> {
        let n = self.n as isize;
        let s = self.kernel.start;
        let taps = &self.kernel.taps;
        let corr = |j: usize| -> f64 {
            let base = j as isize + s;
            let mut acc = 0.0;
            for (m, &t) in taps.iter().enumerate() {
                let idx = base + m as isize;
                if idx >= n {
                    break;
                }
                if idx >= 0 {
                    acc += t * r[idx as usize];
                }
            }
            acc
        };
        if self.n * taps.len() >= 1 << 16 {
            (0..self.n).into_par_iter().with_min_len(PAR_CHUNK).map(corr).collect()
        } else {
            (0..self.n).map(corr).collect()
        }
    }

    fn spectral_apply(&self, sp: &Spectral, x: &[f64], adjoint: bool) -> Vec<f64> {
        let len = sp.len;
        let mut buf = vec![Complex64::new(0.0, 0.0); len];
        for (dst, &v) in buf.iter_mut().zip(x) {
            dst.re = v;
        }
        sp.forward.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&sp.kernel) {
            *b *= if adjoint { k.conj() } else { *k };
        }
        sp.inverse.process(&mut buf);
        let scale = 1.0 / len as f64;
        let s = self.kernel.start;
        let klen = self.kernel.len() as isize;
        let n = self.n as isize;
        (0..n)
            .map(|j| {
                // linear index into the full convolution / correlation
                let i = if adjoint { j + s } else { j - s };
                let valid = if adjoint {
                    i > -klen && i < n
                } else {
                    i >= 0 && i < n + klen - 1
                };
                if valid {
                    buf[i.rem_euclid(len as isize) as usize].re * scale
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Upper bound on `‖P‖²` from power iteration, capped by `(Σ|taps|)²`.
    pub fn norm_sq_bound(&self, iterations: usize) -> f64 {
        let cap = self.kernel.l1_norm().powi(2);
        if self.n == 0 {
            return cap;
        }
        let mut v: Vec<f64> = (0..self.n).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0).collect();
        let mut est = 0.0;
        for _ in 0..iterations {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            let w = self.adjoint(&self.apply(&v));
            est = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            v = w;
        }
        (est * 1.01).min(cap).max(f64::MIN_POSITIVE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pulse::PulseShape;
    use proptest::prelude::*;

    fn brute_apply(k: &Kernel, a: &[f64]) -> Vec<f64> {
        let n = a.len() as isize;
        (0..n)
            .map(|i| {
                (0..k.len())
                    .map(|m| {
                        let j = i - k.start - m as isize;
                        if (0..n).contains(&j) {
                            k.taps[m] * a[j as usize]
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn unit_impulse_reproduces_kernel() {
        let k = PulseShape::double_exp(0.06, 0.15).unwrap().kernel(1.0);
        let op = ConvOperator::new(k.clone(), 400);
        let mut a = vec![0.0; 400];
        a[10] = 1.0;
        let y = op.apply(&a);
        for m in 0..k.len().min(390) {
            assert_eq!(y[10 + m], k.taps[m]);
        }
    }

    #[test]
    fn spectral_matches_direct() {
        let k = PulseShape::double_exp(0.06, 0.15).unwrap().kernel(1.0);
        let n = 20_000;
        let fast = ConvOperator::new(k.clone(), n);
        assert!(fast.spectral.is_some());
        let slow = ConvOperator {
            kernel: k,
            n,
            spectral: None,
        };
        let a: Vec<f64> = (0..n).map(|i| ((i * 31) % 17) as f64 - 8.0).collect();
        let (fa, sa) = (fast.apply(&a), slow.apply(&a));
        let (ft, st) = (fast.adjoint(&a), slow.adjoint(&a));
        for i in 0..n {
            assert!((fa[i] - sa[i]).abs() < 1e-9, "apply {i}");
            assert!((ft[i] - st[i]).abs() < 1e-9, "adjoint {i}");
        }
    }

    #[test]
    fn norm_bound_is_an_upper_bound() {
        let k = PulseShape::double_exp(0.06, 0.15).unwrap().kernel(1.0);
        let op = ConvOperator::new(k.clone(), 300);
        let l = op.norm_sq_bound(50);
        assert!(l <= k.l1_norm().powi(2) + 1e-12);
        let v: Vec<f64> = vec![1.0; 300];
        let pv = op.apply(&v);
        assert!(dot(&pv, &pv) <= l * dot(&v, &v));
    }

    proptest! {
        #[test]
        fn adjoint_identity_and_brute_force(
            start in -5isize..5,
            taps in proptest::collection::vec(-1.0f64..1.0, 1..12),
            a in proptest::collection::vec(-1.0f64..1.0, 1..40),
            seed in 0u64..1000,
        ) {
            let k = Kernel { start, taps };
            let n = a.len();
            let op = ConvOperator::new(k.clone(), n);
            let pa = op.apply(&a);
            let want = brute_apply(&k, &a);
            for i in 0..n {
                prop_assert!((pa[i] - want[i]).abs() < 1e-12);
            }
            let r: Vec<f64> = (0..n).map(|i| (((i as u64 + seed) * 2654435761) % 1000) as f64 / 500.0 - 1.0).collect();
            let lhs = dot(&pa, &r);
            let rhs = dot(&a, &op.adjoint(&r));
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
