//! Shared inputs for the criterion benchmarks.

use pulsekit::sim::{simulate, Simulation};
use pulsekit::{AmplitudeSpectrum, PulseEvent, PulseShape, SampledSignal, SimConfig, SpectrumComponent};

pub fn fig1() -> PulseShape {
    PulseShape::DoubleExp { a: 0.06, b: 0.15 }
}

/// A stationary stream of `n` samples with Gaussian-line amplitudes around 1.
pub fn stream(n: usize, rate: f64, sigma: f64, seed: u64) -> Simulation {
    let cfg = SimConfig {
        rate,
        duration: n as f64,
        dt: 1.0,
        sigma,
        shape: fig1(),
        spectrum: AmplitudeSpectrum {
            components: vec![SpectrumComponent::GaussianLine {
                center: 1.0,
                std: 0.1,
                weight: 1.0,
            }],
        },
        seed,
        warmup: true,
        fixed_events: None,
    };
    simulate(&cfg).expect("valid benchmark configuration")
}

/// Noisy trace of explicit `(tau, alpha)` events.
pub fn trace(events: &[(f64, f64)], n: usize, sigma: f64, seed: u64) -> SampledSignal {
    let ev: Vec<PulseEvent> = events.iter().map(|&(t, a)| PulseEvent::new(t, a)).collect();
    let clean = pulsekit::signal::synthesize(&ev, &fig1(), n, 1.0, 0.0);
    pulsekit::signal::add_noise(&clean, sigma, seed).expect("sigma >= 0")
}

pub fn piled_pair(sigma: f64) -> SampledSignal {
    trace(&[(10.0, 1.0), (16.0, 0.6)], 200, sigma, 1)
}

pub fn separated_pair(sigma: f64) -> SampledSignal {
    trace(&[(10.0, 1.0), (60.0, 0.6)], 200, sigma, 1)
}
