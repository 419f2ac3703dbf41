//! Kernel Stein estimation of the score function and the conditional-entropy
//! surrogate built on it.
//!
//! For samples z_1..z_n from an unknown density q, the estimator solves
//!
//!   G = -(K + eta I)^{-1} <grad, K>,      <grad, K>_{i.} = sum_j grad_{z_j} K(z_i, z_j)
//!
//! with an RBF kernel K_ij = exp(-|z_i - z_j|^2 / (2 h^2)), for which
//! <grad, K>_{i.} = sum_j K_ij (z_i - z_j) / h^2. Row i of G approximates the
//! score grad_z log q(z_i).
//!
//! The conditional entropy H(z|d) is then surrogated per domain:
//!
//!   S = -(1/M) sum_m mean_{i in domain m} g_i . z_i
//!
//! where the scores g are treated as constants during differentiation; the
//! training gradient flows only through the z factor. [`surrogate_with_grad`]
//! returns exactly that frozen-score gradient so losses and finite-difference
//! checks share one definition.
//!
//! Kernel defaults: bandwidth 2.0 x the median pairwise distance and ridge
//! 1e-2 x mean diag(K). A pre-build oracle run against analytic Gaussian
//! scores fixed these: the bare median heuristic with ridge 1e-3 lands near
//! cosine 0.57 to the true score at n = 512, while the shipped defaults give
//! cosine >= 0.92 for all n >= 128 with the estimator's L2 error still
//! shrinking as n grows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{solve_ridge, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// Fixed kernel width, must be positive.
    Fixed(f64),
    /// Multiple of the median pairwise distance of the batch being scored.
    MedianTimes(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
    /// Ridge scale; the actual eta is ridge * mean diag(K), which for the
    /// RBF kernel is just ridge.
    pub ridge: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            bandwidth: Bandwidth::MedianTimes(2.0),
            ridge: 1e-2,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        let bw_ok = match self.bandwidth {
            Bandwidth::Fixed(h) => h > 0.0,
            Bandwidth::MedianTimes(s) => s > 0.0,
        };
        if !bw_ok {
            return Err(Error::InvalidArg {
                context: "KernelConfig",
                detail: "bandwidth must be positive".into(),
            });
        }
        if !(self.ridge > 0.0) {
            return Err(Error::InvalidArg {
                context: "KernelConfig",
                detail: format!("ridge must be positive, got {}", self.ridge),
            });
        }
        Ok(())
    }
}

/// How E_{p(d)} weights domains when batch composition is unequal. The
/// uniform default treats every present domain the same regardless of its
/// sample count; the alternative weights by samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainWeighting {
    Uniform,
    SampleWeighted,
}

impl Default for DomainWeighting {
    fn default() -> Self {
        DomainWeighting::Uniform
    }
}

#[derive(Debug, Clone)]
pub struct SteinEstimate {
    /// One score row per input sample, in input order. Constant with respect
    /// to differentiation: downstream gradients must not flow through these.
    pub scores: Matrix,
    /// The scalar surrogate for H(z|d).
    pub surrogate: f64,
    /// (domain id, mean g.z over that domain), in ascending domain order.
    pub per_domain: Vec<(u16, f64)>,
}

/// K_ij = exp(-|z_i - z_j|^2 / (2 bw^2)).
pub fn rbf_kernel(z: &Matrix, bandwidth: f64) -> Result<Matrix> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArg {
            context: "rbf_kernel",
            detail: format!("bandwidth must be positive, got {bandwidth}"),
        });
    }
    let n = z.rows();
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        k.set(i, i, 1.0);
        for j in i + 1..n {
            let (a, b) = (z.row(i), z.row(j));
            let mut d2 = 0.0;
            for c in 0..z.cols() {
                let d = a[c] - b[c];
                d2 += d * d;
            }
            let v = (-d2 * inv).exp();
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    Ok(k)
}

/// Median of the pairwise Euclidean distances, zeros excluded. Returns 1
/// when every pairwise distance is zero, so a degenerate batch still yields
/// a usable kernel.
pub fn median_heuristic(z: &Matrix) -> Result<f64> {
    let n = z.rows();
    if n < 2 {
        return Err(Error::InsufficientSamples {
            context: "median_heuristic",
            need: 2,
            got: n,
        });
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (z.row(i), z.row(j));
            let mut d2 = 0.0;
            for c in 0..z.cols() {
                let d = a[c] - b[c];
                d2 += d * d;
            }
            if d2 > 0.0 {
                dists.push(d2.sqrt());
            }
        }
    }
    if dists.is_empty() {
        return Ok(1.0);
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let m = dists.len();
    Ok(if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    })
}

fn resolve_bandwidth(z: &Matrix, cfg: &KernelConfig) -> Result<f64> {
    Ok(match cfg.bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::MedianTimes(s) => s * median_heuristic(z)?,
    })
}

/// Score estimates, one row per sample.
pub fn stein_score(z: &Matrix, cfg: &KernelConfig) -> Result<Matrix> {
    cfg.validate()?;
    if z.rows() < 2 {
        return Err(Error::InsufficientSamples {
            context: "stein_score",
            need: 2,
            got: z.rows(),
        });
    }
    if !z.is_finite() {
        return Err(Error::NonFinite { context: "stein_score" });
    }
    let bw = resolve_bandwidth(z, cfg)?;
    let k = rbf_kernel(z, bw)?;
    let n = z.rows();

    // <grad, K>_{i.} = (rowsum_i z_i - (K z)_i) / bw^2.
    let kz = k.matmul(z);
    let mut grad_k = Matrix::zeros(n, z.cols());
    let inv_bw2 = 1.0 / (bw * bw);
    for i in 0..n {
        let rowsum: f64 = k.row(i).iter().sum();
        for c in 0..z.cols() {
            grad_k.set(i, c, (rowsum * z.get(i, c) - kz.get(i, c)) * inv_bw2);
        }
    }

    // eta = ridge * mean diag K; the RBF diagonal is exactly 1, but the
    // scaling is kept explicit so a different kernel would stay calibrated.
    let mean_diag = (0..n).map(|i| k.get(i, i)).sum::<f64>() / n as f64;
    let eta = cfg.ridge * mean_diag;
    let solved = solve_ridge(&k, &grad_k, eta)?;
    Ok(solved.scale(-1.0))
}

/// Groups sample indices by domain id, ascending; order within a domain
/// follows input order.
fn domain_partitions(domains: &[u16]) -> Vec<(u16, Vec<usize>)> {
    let mut ids: Vec<u16> = domains.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|d| {
            let idx = domains
                .iter()
                .enumerate()
                .filter(|(_, x)| **x == d)
                .map(|(i, _)| i)
                .collect();
            (d, idx)
        })
        .collect()
}

/// Per-domain Stein scores plus the scalar surrogate for H(z|d).
///
/// Scores are estimated independently on each domain partition (bandwidth
/// included, when the config uses the median heuristic) and written back to
/// the sample's original row. The returned scores are constants for
/// differentiation purposes.
pub fn conditional_entropy_surrogate(
    z: &Matrix,
    domains: &[u16],
    cfg: &KernelConfig,
    weighting: DomainWeighting,
) -> Result<SteinEstimate> {
    if domains.len() != z.rows() {
        return Err(Error::LengthMismatch {
            context: "conditional_entropy_surrogate",
            left: z.rows(),
            right: domains.len(),
        });
    }
    let parts = domain_partitions(domains);
    let mut scores = Matrix::zeros(z.rows(), z.cols());
    let mut per_domain = Vec::with_capacity(parts.len());
    for (d, idx) in &parts {
        if idx.len() < 2 {
            return Err(Error::DomainTooSmall {
                domain: *d,
                count: idx.len(),
            });
        }
        let mut zd = Matrix::zeros(idx.len(), z.cols());
        for (r, &i) in idx.iter().enumerate() {
            zd.row_mut(r).copy_from_slice(z.row(i));
        }
        let gd = stein_score(&zd, cfg)?;
        let mut mean_gz = 0.0;
        for (r, &i) in idx.iter().enumerate() {
            scores.row_mut(i).copy_from_slice(gd.row(r));
            let dot: f64 = gd.row(r).iter().zip(z.row(i)).map(|(a, b)| a * b).sum();
            mean_gz += dot;
        }
        mean_gz /= idx.len() as f64;
        per_domain.push((*d, mean_gz));
    }
    let (surrogate, _) = surrogate_from_scores(z, &scores, domains, weighting)?;
    Ok(SteinEstimate {
        scores,
        surrogate,
        per_domain,
    })
}

/// The surrogate S = -(1/M) sum_m mean_{i in m} g_i . z_i (uniform weighting;
/// sample weighting replaces the double average by a single mean over all
/// samples) together with dS/dz, holding the scores g fixed.
///
/// Split out from [`conditional_entropy_surrogate`] so the loss can recompute
/// the surrogate as a function of z with frozen scores; that is the quantity
/// finite-difference checks perturb.
pub fn surrogate_from_scores(
    z: &Matrix,
    scores: &Matrix,
    domains: &[u16],
    weighting: DomainWeighting,
) -> Result<(f64, Matrix)> {
    if z.rows() != scores.rows() || z.cols() != scores.cols() {
        return Err(Error::Dim {
            context: "surrogate_from_scores",
            detail: format!(
                "z is {}x{}, scores {}x{}",
                z.rows(),
                z.cols(),
                scores.rows(),
                scores.cols()
            ),
        });
    }
    if domains.len() != z.rows() {
        return Err(Error::LengthMismatch {
            context: "surrogate_from_scores",
            left: z.rows(),
            right: domains.len(),
        });
    }
    let parts = domain_partitions(domains);
    let m = parts.len() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    for (_, idx) in &parts {
        let w = match weighting {
            DomainWeighting::Uniform => 1.0 / (m * idx.len() as f64),
            DomainWeighting::SampleWeighted => 1.0 / z.rows() as f64,
        };
        for &i in idx {
            let dot: f64 = scores.row(i).iter().zip(z.row(i)).map(|(a, b)| a * b).sum();
            value -= w * dot;
            for c in 0..z.cols() {
                grad.set(i, c, -w * scores.get(i, c));
            }
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "surrogate_from_scores",
        });
    }
    Ok((value, grad))
}
