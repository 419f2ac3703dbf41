//! Synthetic multi-domain signal benchmark.
//!
//! Each domain is a recording: a sticky Markov chain over the five classes
//! (stay with probability rho, otherwise redraw from the stationary
//! proportions, so the marginal class distribution is exactly the
//! configured one), with per-class oscillatory templates and a smooth,
//! label-independent per-domain transform. Class templates put spectral
//! power where each class lives: W broadband 8-30 Hz, N1 at 4-7 Hz, N2 a
//! 10 Hz background plus 12-14 Hz windowed spindle bursts, N3 high-
//! amplitude 0.5-2 Hz, REM low-amplitude 4-8 Hz. The domain transform is
//! a random gain, a spectral tilt f^(-gamma) applied in the frequency
//! domain, and additive noise at a per-domain SNR, all applied after class
//! synthesis so the domain factor never touches labels.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

use super::{Dataset, DatasetHeader, EpochSample, CLASS_NAMES, N_CLASSES};

pub const DEFAULT_PROPORTIONS: [f64; 5] = [0.196, 0.066, 0.421, 0.135, 0.182];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Number of domains M.
    pub domains: usize,
    pub epochs_per_domain: usize,
    /// Stationary class proportions; must sum to 1.
    pub class_proportions: [f64; 5],
    pub sample_rate_hz: f64,
    pub samples_per_epoch: usize,
    pub channels: usize,
    /// Probability of repeating the previous class at each step.
    pub stickiness: f64,
    /// Domain gain range (log-uniform).
    pub gain: (f64, f64),
    /// Spectral tilt exponent range for f^(-gamma).
    pub tilt: (f64, f64),
    /// Per-domain SNR range in dB.
    pub snr_db: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            domains: 8,
            epochs_per_domain: 1000,
            class_proportions: DEFAULT_PROPORTIONS,
            sample_rate_hz: 64.0,
            samples_per_epoch: 512,
            channels: 1,
            stickiness: 0.6,
            gain: (0.5, 2.0),
            tilt: (-0.3, 0.3),
            snr_db: (10.0, 30.0),
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains < 2 {
            return Err(Error::InvalidArg {
                context: "SynthConfig",
                detail: format!("need >= 2 domains, got {}", self.domains),
            });
        }
        if self.epochs_per_domain == 0 || self.samples_per_epoch == 0 || self.channels == 0 {
            return Err(Error::InvalidArg {
                context: "SynthConfig",
                detail: "epochs, samples, channels must be positive".into(),
            });
        }
        let sum: f64 = self.class_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.class_proportions.iter().any(|&p| p <= 0.0) {
            return Err(Error::InvalidArg {
                context: "SynthConfig",
                detail: format!("class proportions must be positive and sum to 1, sum {sum}"),
            });
        }
        if !(0.0..1.0).contains(&self.stickiness) {
            return Err(Error::InvalidArg {
                context: "SynthConfig",
                detail: format!("stickiness {} outside [0, 1)", self.stickiness),
            });
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::InvalidArg {
                context: "SynthConfig",
                detail: "sample rate must be positive".into(),
            });
        }
        Ok(())
    }
}

fn draw_class(proportions: &[f64; 5], rng: &mut Rng) -> u8 {
    let u = rng.f64();
    let mut acc = 0.0;
    for (i, &p) in proportions.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u8;
        }
    }
    (N_CLASSES - 1) as u8
}

fn add_tone(signal: &mut [f64], fs: f64, freq: f64, phase: f64, amp: f64) {
    let w = 2.0 * std::f64::consts::PI * freq / fs;
    for (i, v) in signal.iter_mut().enumerate() {
        *v += amp * (w * i as f64 + phase).sin();
    }
}

/// Hann-windowed tone burst centered at `center` (samples) of `dur`
/// samples.
fn add_burst(signal: &mut [f64], fs: f64, freq: f64, phase: f64, amp: f64, center: usize, dur: usize) {
    let w = 2.0 * std::f64::consts::PI * freq / fs;
    let start = center.saturating_sub(dur / 2);
    let end = (start + dur).min(signal.len());
    for i in start..end {
        let u = (i - start) as f64 / dur as f64;
        let window = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * u).cos();
        signal[i] += amp * window * (w * i as f64 + phase).sin();
    }
}

fn class_template(class: u8, t: usize, fs: f64, rng: &mut Rng) -> Vec<f64> {
    let mut x = vec![0.0; t];
    let two_pi = 2.0 * std::f64::consts::PI;
    match class {
        // W: broadband 8-30 Hz.
        0 => {
            let amp = (2.0 / 6.0_f64).sqrt();
            for _ in 0..6 {
                add_tone(&mut x, fs, rng.range_f64(8.0, 30.0), rng.f64() * two_pi, amp);
            }
        }
        // N1: 4-7 Hz.
        1 => {
            let amp = 0.9 * (2.0 / 3.0_f64).sqrt();
            for _ in 0..3 {
                add_tone(&mut x, fs, rng.range_f64(4.0, 7.0), rng.f64() * two_pi, amp);
            }
        }
        // N2: 10 Hz background plus 12-14 Hz spindles.
        2 => {
            add_tone(&mut x, fs, 10.0, rng.f64() * two_pi, 0.8 * 2.0_f64.sqrt());
            let n_spindles = 1 + rng.usize_below(2);
            for _ in 0..n_spindles {
                let dur = (rng.range_f64(0.75, 1.5) * fs) as usize;
                let lo = dur / 2;
                let hi = t.saturating_sub(dur / 2).max(lo + 1);
                let center = lo + rng.usize_below(hi - lo);
                add_burst(
                    &mut x,
                    fs,
                    rng.range_f64(12.0, 14.0),
                    rng.f64() * two_pi,
                    1.3,
                    center,
                    dur.max(4),
                );
            }
        }
        // N3: slow waves, high amplitude.
        3 => {
            let amp = 2.5;
            for _ in 0..2 {
                add_tone(&mut x, fs, rng.range_f64(0.5, 2.0), rng.f64() * two_pi, amp);
            }
        }
        // REM: 4-8 Hz mixed, low amplitude.
        _ => {
            let amp = 0.7 * (2.0 / 4.0_f64).sqrt();
            for _ in 0..4 {
                add_tone(&mut x, fs, rng.range_f64(4.0, 8.0), rng.f64() * two_pi, amp);
            }
        }
    }
    x
}

struct DomainTransform {
    gain: f64,
    gamma: f64,
    snr_db: f64,
}

impl DomainTransform {
    fn draw(cfg: &SynthConfig, rng: &mut Rng) -> Self {
        DomainTransform {
            gain: rng.range_f64(cfg.gain.0.ln(), cfg.gain.1.ln()).exp(),
            gamma: rng.range_f64(cfg.tilt.0, cfg.tilt.1),
            snr_db: rng.range_f64(cfg.snr_db.0, cfg.snr_db.1),
        }
    }
}

/// Multiply the spectrum by (f / 10 Hz)^(-gamma), preserving conjugate
/// symmetry; DC stays untouched.
fn spectral_tilt(
    signal: &mut [f64],
    fs: f64,
    gamma: f64,
    fft: &std::sync::Arc<dyn rustfft::Fft<f64>>,
    ifft: &std::sync::Arc<dyn rustfft::Fft<f64>>,
) {
    let t = signal.len();
    let mut buf: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.process(&mut buf);
    for k in 1..=t / 2 {
        let f = k as f64 * fs / t as f64;
        let factor = (f / 10.0).powf(-gamma);
        buf[k] *= factor;
        if k != t - k {
            buf[t - k] *= factor;
        }
    }
    ifft.process(&mut buf);
    for (v, c) in signal.iter_mut().zip(&buf) {
        *v = c.re / t as f64;
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.samples_per_epoch);
    let ifft = planner.plan_fft_inverse(cfg.samples_per_epoch);

    let domains: Vec<u16> = (1..=cfg.domains as u16).collect();
    let mut epochs = Vec::with_capacity(cfg.domains * cfg.epochs_per_domain);
    for &d in &domains {
        let mut rng = root.fork(d as u64);
        let transform = DomainTransform::draw(cfg, &mut rng);
        let noise_power_factor = 10f64.powf(-transform.snr_db / 10.0);
        let mut state = draw_class(&cfg.class_proportions, &mut rng);
        for k in 0..cfg.epochs_per_domain as u32 {
            if k > 0 && rng.f64() >= cfg.stickiness {
                state = draw_class(&cfg.class_proportions, &mut rng);
            }
            let mut signal = Matrix::zeros(cfg.channels, cfg.samples_per_epoch);
            for c in 0..cfg.channels {
                let mut x = class_template(state, cfg.samples_per_epoch, cfg.sample_rate_hz, &mut rng);
                spectral_tilt(&mut x, cfg.sample_rate_hz, transform.gamma, &fft, &ifft);
                for v in &mut x {
                    *v *= transform.gain;
                }
                let power: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
                let sigma = (power * noise_power_factor).sqrt();
                for v in &mut x {
                    *v += sigma * rng.normal();
                }
                signal.row_mut(c).copy_from_slice(&x);
            }
            epochs.push(EpochSample {
                d,
                y: state,
                k,
                signal,
            });
        }
    }

    Ok(Dataset {
        header: DatasetHeader {
            version: 1,
            channels: cfg.channels,
            samples_per_epoch: cfg.samples_per_epoch,
            sample_rate_hz: cfg.sample_rate_hz,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            domains,
            epochs: epochs.len(),
        },
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Power in [lo, hi] Hz from a plain periodogram, implemented with a
    /// direct DFT so it shares nothing with the generator's FFT path.
    fn band_power(signal: &[f64], fs: f64, lo: f64, hi: f64) -> f64 {
        let t = signal.len();
        let mut total = 0.0;
        for k in 1..t / 2 {
            let f = k as f64 * fs / t as f64;
            if f < lo || f > hi {
                continue;
            }
            let w = 2.0 * std::f64::consts::PI * k as f64 / t as f64;
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in signal.iter().enumerate() {
                re += v * (w * i as f64).cos();
                im -= v * (w * i as f64).sin();
            }
            total += re * re + im * im;
        }
        total
    }

    #[test]
    fn class_proportions_match_target_within_one_percent() {
        // 40k epochs; short epochs keep this test light, proportions do
        // not depend on signal length.
        let cfg = SynthConfig {
            domains: 8,
            epochs_per_domain: 5000,
            samples_per_epoch: 32,
            seed: 20260301,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        assert_eq!(ds.len(), 40_000);
        let mut counts = [0usize; 5];
        for e in &ds.epochs {
            counts[e.y as usize] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / ds.len() as f64;
            let want = DEFAULT_PROPORTIONS[i];
            println!("class {i}: {freq:.4} vs {want:.4}");
            assert!(
                (freq - want).abs() < 0.01,
                "class {i}: {freq} vs {want}"
            );
        }
    }

    #[test]
    fn chains_are_sticky() {
        let cfg = SynthConfig {
            domains: 4,
            epochs_per_domain: 2000,
            samples_per_epoch: 32,
            seed: 5,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        let mut same = 0usize;
        let mut total = 0usize;
        for (d, idxs) in ds.indices_by_domain() {
            let _ = d;
            for w in idxs.windows(2) {
                total += 1;
                if ds.epochs[w[0]].y == ds.epochs[w[1]].y {
                    same += 1;
                }
            }
        }
        let rate = same as f64 / total as f64;
        // rho + (1 - rho) * sum(pi^2) with rho 0.6 is about 0.71; far above
        // the iid value of about 0.26.
        assert!(rate > 0.6 && rate < 0.8, "self-transition rate {rate}");
    }

    #[test]
    fn n3_power_is_low_band_and_w_power_is_high_band() {
        let cfg = SynthConfig {
            domains: 3,
            epochs_per_domain: 60,
            seed: 13,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        let fs = cfg.sample_rate_hz;
        let mut checked_n3 = 0;
        let mut checked_w = 0;
        for e in &ds.epochs {
            let sig = e.signal.row(0);
            if e.y == 3 && checked_n3 < 25 {
                let low = band_power(sig, fs, 0.5, 2.0);
                let high = band_power(sig, fs, 8.0, 30.0);
                assert!(low > high, "N3 epoch d={} k={}: low {low}, high {high}", e.d, e.k);
                checked_n3 += 1;
            }
            if e.y == 0 && checked_w < 25 {
                let low = band_power(sig, fs, 0.5, 2.0);
                let high = band_power(sig, fs, 8.0, 30.0);
                assert!(high > low, "W epoch d={} k={}: low {low}, high {high}", e.d, e.k);
                checked_w += 1;
            }
        }
        assert!(checked_n3 >= 10, "too few N3 epochs ({checked_n3}) to test");
        assert!(checked_w >= 10, "too few W epochs ({checked_w}) to test");
    }

    #[test]
    fn identical_seed_is_bit_identical_and_seeds_differ() {
        let cfg = SynthConfig {
            domains: 2,
            epochs_per_domain: 15,
            samples_per_epoch: 64,
            ..SynthConfig::default()
        };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!((x.d, x.y, x.k), (y.d, y.y, y.k));
            assert_eq!(x.signal.data(), y.signal.data());
        }
        let c = synth_generate(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert!(a
            .epochs
            .iter()
            .zip(&c.epochs)
            .any(|(x, y)| x.signal.data() != y.signal.data()));
    }

    #[test]
    fn dataset_passes_validation_and_orders_time() {
        let ds = synth_generate(&SynthConfig {
            domains: 3,
            epochs_per_domain: 25,
            samples_per_epoch: 64,
            ..SynthConfig::default()
        })
        .unwrap();
        ds.validate().unwrap();
        assert_eq!(ds.header.domains, vec![1, 2, 3]);
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let ok = SynthConfig::default();
        ok.validate().unwrap();
        assert!(SynthConfig { domains: 1, ..ok.clone() }.validate().is_err());
        assert!(SynthConfig { stickiness: 1.0, ..ok.clone() }.validate().is_err());
        let mut bad = ok.clone();
        bad.class_proportions[0] += 0.1;
        assert!(bad.validate().is_err());
    }
}
