//! Compound Poisson event streams and noisy filtered Poisson observations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StdNormal};

use crate::error::{invalid, Result};
use crate::pulse::{PulseEvent, PulseShape};
use crate::signal::{add_noise, derive_seed, synthesize, SampledSignal};

const STREAM_ARRIVALS: u64 = 0;
const STREAM_AMPLITUDES: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// One mixture component of an amplitude distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectrumComponent {
    /// Every amplitude equals `center`.
    Line { center: f64, weight: f64 },
    /// Gaussian truncated to `[0, ∞)`.
    GaussianLine { center: f64, std: f64, weight: f64 },
    Uniform { lo: f64, hi: f64, weight: f64 },
}

impl SpectrumComponent {
    fn weight(&self) -> f64 {
        match *self {
            SpectrumComponent::Line { weight, .. }
            | SpectrumComponent::GaussianLine { weight, .. }
            | SpectrumComponent::Uniform { weight, .. } => weight,
        }
    }

    fn validate(&self) -> Result<()> {
        let w = self.weight();
        if !(w.is_finite() && w > 0.0) {
            return Err(invalid(format!("component weight must be > 0, got {w}")));
        }
        match *self {
            SpectrumComponent::Line { center, .. } => {
                if !(center.is_finite() && center >= 0.0) {
                    return Err(invalid(format!("line center must be >= 0, got {center}")));
                }
            }
            SpectrumComponent::GaussianLine { center, std, .. } => {
                if !center.is_finite() || !(std.is_finite() && std > 0.0) {
                    return Err(invalid("gaussian line needs finite center and std > 0"));
                }
            }
            SpectrumComponent::Uniform { lo, hi, .. } => {
                if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo < hi) {
                    return Err(invalid(format!("uniform needs 0 <= lo < hi, got [{lo}, {hi})")));
                }
            }
        }
        Ok(())
    }

    fn mean(&self) -> f64 {
        match *self {
            SpectrumComponent::Line { center, .. } => center,
            SpectrumComponent::Uniform { lo, hi, .. } => 0.5 * (lo + hi),
            SpectrumComponent::GaussianLine { center, std, .. } => {
                let z = StdNormal::standard();
                let alpha = -center / std;
                center + std * z.pdf(alpha) / z.sf(alpha)
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            SpectrumComponent::Line { center, .. } => center,
            SpectrumComponent::Uniform { lo, hi, .. } => rng.random_range(lo..hi),
            SpectrumComponent::GaussianLine { center, std, .. } => {
                let z = StdNormal::standard();
                let p0 = z.cdf(-center / std);
                if p0 < 0.99 {
                    let normal = Normal::new(center, std).expect("validated std");
                    loop {
                        let x = normal.sample(rng);
                        if x >= 0.0 {
                            return x;
                        }
                    }
                }
                let u: f64 = rng.random_range(p0..1.0);
                (center + std * z.inverse_cdf(u)).max(0.0)
            }
        }
    }
}

/// The amplitude distribution: a finite mixture whose weights sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeSpectrum {
    pub components: Vec<SpectrumComponent>,
}

impl AmplitudeSpectrum {
    pub fn new(components: Vec<SpectrumComponent>) -> Result<Self> {
        let s = Self { components };
        s.validate()?;
        Ok(s)
    }

    pub fn line(center: f64) -> Self {
        Self {
            components: vec![SpectrumComponent::Line {
                center,
                weight: 1.0,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(invalid("amplitude spectrum has no components"));
        }
        for c in &self.components {
            c.validate()?;
        }
        let total: f64 = self.components.iter().map(|c| c.weight()).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("component weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Analytic mean amplitude.
    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight() * c.mean()).sum()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight();
            if u < acc {
                return c.sample(rng);
            }
        }
        self.components
            .last()
            .expect("validated non-empty")
            .sample(rng)
    }
}

/// Simulation parameters. Times are in the same unit as `dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub rate: f64,
    pub duration: f64,
    pub dt: f64,
    pub sigma: f64,
    pub shape: PulseShape,
    pub spectrum: AmplitudeSpectrum,
    pub seed: u64,
    /// Also generate arrivals during `10 × pulse width` before `t = 0`, so the
    /// observation starts in the stationary regime.
    #[serde(default)]
    pub warmup: bool,
    /// Replaces the Poisson stream with these events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_events: Option<Vec<PulseEvent>>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate.is_finite() && self.rate >= 0.0) {
            return Err(invalid(format!("rate must be >= 0, got {}", self.rate)));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(invalid(format!("duration must be > 0, got {}", self.duration)));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(invalid(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(invalid(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        self.shape.validate()?;
        self.spectrum.validate()?;
        if let Some(ev) = &self.fixed_events {
            if ev.iter().any(|e| !e.tau.is_finite() || !(e.alpha >= 0.0)) {
                return Err(invalid("fixed events need finite tau and alpha >= 0"));
            }
        }
        Ok(())
    }

    /// Number of samples covering `[0, duration)`.
    pub fn n_samples(&self) -> usize {
        (self.duration / self.dt - 1e-9).ceil().max(1.0) as usize
    }
}

/// Ground truth plus clean and noisy observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub events: Vec<PulseEvent>,
    pub clean: SampledSignal,
    pub noisy: SampledSignal,
}

/// Poisson arrivals on `[0, duration)` (or from the warm-up start) with
/// independent amplitudes, sorted by arrival time.
///
/// Arrivals, amplitudes and noise use separate sub-streams of `seed`, so
/// changing `sigma` or the spectrum leaves arrival times unchanged.
pub fn sample_events(config: &SimConfig) -> Result<Vec<PulseEvent>> {
    config.validate()?;
    if let Some(fixed) = &config.fixed_events {
        let mut ev = fixed.clone();
        ev.sort_by(|a, b| a.tau.total_cmp(&b.tau));
        return Ok(ev);
    }
    if config.rate == 0.0 {
        return Ok(Vec::new());
    }
    let start = if config.warmup {
        -10.0 * config.shape.width()
    } else {
        0.0
    };
    let gaps = Exp::new(config.rate).map_err(|e| invalid(e.to_string()))?;
    let mut arrivals = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_ARRIVALS));
    let mut marks = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_AMPLITUDES));
    let mut events = Vec::with_capacity((config.rate * config.duration * 1.1) as usize + 16);
    let mut t = start;
    loop {
        let gap = gaps.sample(&mut arrivals);
        if gap <= 0.0 {
            continue;
        }
        t += gap;
        if t >= config.duration {
            break;
        }
        events.push(PulseEvent::new(t, config.spectrum.sample(&mut marks)));
    }
    Ok(events)
}

/// Samples events, synthesises the clean trace on `[0, duration)` and adds noise.
pub fn simulate(config: &SimConfig) -> Result<Simulation> {
    let events = sample_events(config)?;
    let clean = synthesize(&events, &config.shape, config.n_samples(), config.dt, 0.0);
    let noisy = add_noise(&clean, config.sigma, derive_seed(config.seed, STREAM_NOISE))?;
    Ok(Simulation {
        events,
        clean,
        noisy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(rate: f64, duration: f64, seed: u64) -> SimConfig {
        SimConfig {
            rate,
            duration,
            dt: 1.0,
            sigma: 0.0,
            shape: PulseShape::double_exp(0.06, 0.15).unwrap(),
            spectrum: AmplitudeSpectrum::line(1.0),
            seed,
            warmup: false,
            fixed_events: None,
        }
    }

    #[test]
    fn zero_rate_is_empty() {
        let s = simulate(&config(0.0, 100.0, 1)).unwrap();
        assert!(s.events.is_empty());
        assert!(s.clean.values.iter().all(|&v| v == 0.0));
        assert_eq!(s.clean.len(), 100);
    }

    #[test]
    fn line_spectrum_is_exact() {
        let mut c = config(0.05, 1e4, 3);
        c.spectrum = AmplitudeSpectrum::line(5.0);
        let ev = sample_events(&c).unwrap();
        assert!(!ev.is_empty());
        assert!(ev.iter().all(|e| e.alpha == 5.0));
    }

    #[test]
    fn arrivals_sorted_and_in_range() {
        let ev = sample_events(&config(0.1, 1e4, 9)).unwrap();
        assert!(ev.windows(2).all(|w| w[0].tau < w[1].tau));
        assert!(ev.iter().all(|e| (0.0..1e4).contains(&e.tau)));
    }

    #[test]
    fn warmup_starts_before_zero() {
        let mut c = config(0.05, 100.0, 2);
        c.warmup = true;
        let ev = sample_events(&c).unwrap();
        assert!(ev.first().unwrap().tau < 0.0);
        assert!(ev.first().unwrap().tau >= -10.0 * c.shape.width());
    }

    #[test]
    fn noise_does_not_perturb_events() {
        let mut c = config(0.01, 1e4, 4);
        let a = simulate(&c).unwrap();
        c.sigma = 0.3;
        let b = simulate(&c).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.clean, b.clean);
        assert_ne!(a.noisy, b.noisy);
        assert_eq!(a.noisy, a.clean);
    }

    #[test]
    fn deterministic() {
        let mut c = config(0.02, 5e3, 77);
        c.sigma = 0.1;
        assert_eq!(simulate(&c).unwrap(), simulate(&c).unwrap());
    }

    #[test]
    fn poisson_count_within_three_sigma() {
        let mut inside = 0;
        for seed in 0..40 {
            let n = sample_events(&config(0.01, 1e6, seed)).unwrap().len() as f64;
            if (n - 1e4).abs() <= 300.0 {
                inside += 1;
            }
        }
        assert!(inside >= 38, "{inside}/40");
    }

    #[test]
    fn nearest_neighbour_fraction() {
        let c = SimConfig {
            rate: 1e-4,
            duration: 1e8,
            ..config(0.0, 1.0, 5)
        };
        let ev = sample_events(&c).unwrap();
        let width = 100.0;
        let close = (0..ev.len())
            .filter(|&i| {
                let l = i > 0 && ev[i].tau - ev[i - 1].tau < width;
                let r = i + 1 < ev.len() && ev[i + 1].tau - ev[i].tau < width;
                l || r
            })
            .count() as f64;
        let frac = close / ev.len() as f64;
        let expected = 1.0 - (-2.0 * 1e-4 * width).exp();
        assert!((frac - expected).abs() < 0.005, "{frac} vs {expected}");
    }

    #[test]
    fn truncated_gaussian_mean() {
        let c = SpectrumComponent::GaussianLine {
            center: 0.5,
            std: 1.0,
            weight: 1.0,
        };
        let spec = AmplitudeSpectrum::new(vec![c]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let m: f64 = (0..n).map(|_| spec.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((m - spec.mean()).abs() < 0.01, "{m} vs {}", spec.mean());
    }

    #[test]
    fn far_truncated_gaussian_stays_nonnegative() {
        let c = SpectrumComponent::GaussianLine {
            center: -5.0,
            std: 1.0,
            weight: 1.0,
        };
        let spec = AmplitudeSpectrum::new(vec![c]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            assert!(spec.sample(&mut rng) >= 0.0);
        }
    }

    #[test]
    fn invalid_spectra() {
        assert!(AmplitudeSpectrum::new(vec![]).is_err());
        assert!(AmplitudeSpectrum::new(vec![SpectrumComponent::Line {
            center: 1.0,
            weight: 0.5
        }])
        .is_err());
        assert!(AmplitudeSpectrum::new(vec![SpectrumComponent::Uniform {
            lo: -1.0,
            hi: 1.0,
            weight: 1.0
        }])
        .is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = config(0.01, 100.0, 5);
        let text = serde_json::to_string(&c).unwrap();
        let back: SimConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let minimal = r#"{"rate":0,"duration":10,"dt":1,"sigma":0,
            "shape":{"kind":"double_exp","a":0.06,"b":0.15},
            "spectrum":{"components":[{"kind":"line","center":1,"weight":1}]},"seed":1}"#;
        let m: SimConfig = serde_json::from_str(minimal).unwrap();
        assert!(!m.warmup && m.fixed_events.is_none());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn arrivals_sorted_within_window(rate in 0.0f64..0.2, duration in 1.0f64..5000.0, seed in 0u64..1000) {
            let ev = sample_events(&config(rate, duration, seed)).unwrap();
            proptest::prop_assert!(ev.windows(2).all(|w| w[0].tau <= w[1].tau));
            proptest::prop_assert!(ev.iter().all(|e| e.tau >= 0.0 && e.tau < duration));
        }
    }
}
