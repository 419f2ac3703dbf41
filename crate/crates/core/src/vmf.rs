//! von Mises-Fisher utilities on the unit sphere S^{n-1}.
//!
//! Density with respect to the surface measure:
//!
//!   p(x; mu, kappa) = C_n(kappa) exp(kappa mu^T x)
//!   log C_n(kappa)  = (n/2 - 1) log kappa - (n/2) log(2 pi) - log I_{n/2-1}(kappa)
//!
//! with I_nu the modified Bessel function of the first kind. Everything is
//! evaluated in log space so concentrations up to about 10^3 and dimensions
//! into the hundreds stay finite.
//!
//! The Bessel series sum_{j>=0} (x/2)^{nu+2j} / (j! Gamma(nu+j+1)) has only
//! positive terms, so evaluating it as a log-sum-exp over
//!
//!   t_j = 2 j log(x/2) - lgamma(j+1) - lgamma(nu+j+1)
//!
//! is stable for the whole (nu, x) range used here: there is no cancellation,
//! the peak term index is about (sqrt(nu^2 + x^2) - nu) / 2, and terms decay
//! super-exponentially past it. That makes a separate large-argument
//! asymptotic branch unnecessary; tests pin the series against closed
//! half-integer forms and external oracle values including nu = 255.5 and
//! x = 10^3.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, logsumexp, Matrix, Rng};

#[derive(Debug, Clone)]
pub struct VmfParams {
    mu: Vec<f64>,
    kappa: f64,
}

impl VmfParams {
    pub fn new(mu: Vec<f64>, kappa: f64) -> Result<Self> {
        if mu.len() < 2 {
            return Err(Error::InvalidArg {
                context: "VmfParams",
                detail: format!("dimension must be >= 2, got {}", mu.len()),
            });
        }
        if !(kappa >= 0.0) {
            return Err(Error::InvalidArg {
                context: "VmfParams",
                detail: format!("kappa must be >= 0, got {kappa}"),
            });
        }
        let norm: f64 = mu.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArg {
                context: "VmfParams",
                detail: format!("mu must be unit length, |mu| = {norm}"),
            });
        }
        Ok(VmfParams { mu, kappa })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }
}

/// log of the Bessel series without the leading power:
/// log sum_j exp(2j log(x/2) - lgamma(j+1) - lgamma(nu+j+1)).
fn log_bessel_series_tail(nu: f64, x: f64) -> f64 {
    if x == 0.0 {
        return -ln_gamma(nu + 1.0);
    }
    let log_half_x = (0.5 * x).ln();
    // Terms peak near j* = (sqrt(nu^2 + x^2) - nu) / 2; run well past it and
    // stop once terms are negligible relative to the running maximum.
    let j_peak = 0.5 * ((nu * nu + x * x).sqrt() - nu);
    let j_cap = (j_peak + 12.0 * (j_peak.sqrt() + 1.0) + 64.0) as usize;
    let mut terms = Vec::with_capacity(j_cap.min(1 << 16) + 1);
    let mut max_term = f64::NEG_INFINITY;
    for j in 0..=j_cap {
        let jf = j as f64;
        let t = 2.0 * jf * log_half_x - ln_gamma(jf + 1.0) - ln_gamma(nu + jf + 1.0);
        terms.push(t);
        if t > max_term {
            max_term = t;
        }
        if jf > j_peak && t < max_term - 60.0 {
            break;
        }
    }
    logsumexp(&terms)
}

/// log I_nu(x) for nu >= 0, x >= 0.
pub fn log_bessel_i(nu: f64, x: f64) -> f64 {
    assert!(nu >= 0.0 && x >= 0.0, "log_bessel_i domain: nu={nu}, x={x}");
    if x == 0.0 {
        // I_0(0) = 1, I_nu(0) = 0 for nu > 0.
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    nu * (0.5 * x).ln() + log_bessel_series_tail(nu, x)
}

/// log of the surface area of S^{n-1}: log(2 pi^{n/2} / Gamma(n/2)).
pub fn log_surface_area(n: usize) -> f64 {
    let half = n as f64 / 2.0;
    std::f64::consts::LN_2 + half * std::f64::consts::PI.ln() - ln_gamma(half)
}

/// log C_n(kappa). The kappa^{n/2-1} prefactor and the (x/2)^nu factor of
/// the Bessel function cancel analytically, leaving
///   log C_n = (n/2 - 1) log 2 - (n/2) log(2 pi) - log(series tail),
/// which is finite for every kappa >= 0 including 0, where it reduces to
/// -log(surface area): the uniform density on the sphere.
pub fn log_normalizer(n: usize, kappa: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidArg {
            context: "log_normalizer",
            detail: format!("dimension must be >= 2, got {n}"),
        });
    }
    if !(kappa >= 0.0) {
        return Err(Error::InvalidArg {
            context: "log_normalizer",
            detail: format!("kappa must be >= 0, got {kappa}"),
        });
    }
    let nu = n as f64 / 2.0 - 1.0;
    Ok(nu * std::f64::consts::LN_2
        - (n as f64 / 2.0) * (2.0 * std::f64::consts::PI).ln()
        - log_bessel_series_tail(nu, kappa))
}

/// log p(x; mu, kappa) = log C_n(kappa) + kappa mu^T x, for unit x.
pub fn log_pdf(x: &[f64], params: &VmfParams) -> Result<f64> {
    if x.len() != params.dim() {
        return Err(Error::LengthMismatch {
            context: "vmf::log_pdf",
            left: x.len(),
            right: params.dim(),
        });
    }
    let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArg {
            context: "vmf::log_pdf",
            detail: format!("x must be unit length, |x| = {norm}"),
        });
    }
    let dot: f64 = x.iter().zip(params.mu()).map(|(a, b)| a * b).sum();
    Ok(log_normalizer(params.dim(), params.kappa())? + params.kappa() * dot)
}

/// Mean resultant length A_n(kappa) = I_{n/2}(kappa) / I_{n/2-1}(kappa).
pub fn mean_resultant_length(n: usize, kappa: f64) -> f64 {
    if kappa == 0.0 {
        return 0.0;
    }
    let nu = n as f64 / 2.0 - 1.0;
    (log_bessel_i(nu + 1.0, kappa) - log_bessel_i(nu, kappa)).exp()
}

/// Differential entropy with respect to the surface measure:
/// H = -log C_n(kappa) - kappa A_n(kappa). Monotone non-increasing in kappa;
/// at kappa = 0 it is log(surface area).
pub fn entropy(n: usize, kappa: f64) -> Result<f64> {
    let log_c = log_normalizer(n, kappa)?;
    Ok(-log_c - kappa * mean_resultant_length(n, kappa))
}

/// Uniform sample on S^{n-1}: normalized isotropic Gaussian.
fn sample_uniform_direction(n: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// Draws vMF samples by Wood's (1994) rejection scheme: sample the cosine w
/// of the angle to mu through a Beta envelope, attach a uniform direction on
/// the orthogonal S^{n-2}, then rotate the north pole onto mu with a
/// Householder reflection. Exact for every dimension >= 2.
pub fn sample(params: &VmfParams, count: usize, rng: &mut Rng) -> Result<Matrix> {
    if count == 0 {
        return Err(Error::InvalidArg {
            context: "vmf::sample",
            detail: "count must be >= 1".into(),
        });
    }
    let n = params.dim();
    let kappa = params.kappa();
    let mut out = Matrix::zeros(count, n);

    if kappa == 0.0 {
        for i in 0..count {
            let u = sample_uniform_direction(n, rng);
            out.row_mut(i).copy_from_slice(&u);
        }
        return Ok(out);
    }

    let d = (n - 1) as f64;
    let b = (-2.0 * kappa + (4.0 * kappa * kappa + d * d).sqrt()) / d;
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + d * (1.0 - x0 * x0).ln();
    let beta = rand_distr::Beta::new(d / 2.0, d / 2.0).expect("valid beta parameters");

    // Householder reflection taking e1 to mu: H x = x - 2 u (u^T x).
    let mut u = params.mu().to_vec();
    u[0] -= 1.0;
    let u_norm: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let reflect = u_norm > 1e-12;
    if reflect {
        for v in &mut u {
            *v /= u_norm;
        }
    }

    for i in 0..count {
        let w = loop {
            let z: f64 = rand::Rng::sample(rng.inner_mut(), beta);
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            let uni = rng.f64().max(f64::MIN_POSITIVE);
            if kappa * w + d * (1.0 - x0 * w).ln() - c >= uni.ln() {
                break w;
            }
        };
        // Direction orthogonal to e1.
        let tangent = sample_uniform_direction(n - 1, rng);
        let scale = (1.0 - w * w).max(0.0).sqrt();
        let mut x = vec![0.0; n];
        x[0] = w;
        for j in 1..n {
            x[j] = scale * tangent[j - 1];
        }
        if reflect {
            let dot: f64 = u.iter().zip(&x).map(|(a, b)| a * b).sum();
            for j in 0..n {
                x[j] -= 2.0 * dot * u[j];
            }
        }
        // Guard against rounding drift; keeps every sample on the sphere.
        let x = l2_normalize(&x)?;
        out.row_mut(i).copy_from_slice(&x);
    }
    Ok(out)
}
