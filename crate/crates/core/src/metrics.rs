//! Classification metrics and information diagnostics.
//!
//! The classification side is a general n-class confusion matrix with
//! Cohen's kappa, accuracy, and macro F1. The information side estimates
//! differential entropies with the Kozachenko-Leonenko k-nearest-neighbor
//! estimator and combines them into I(z;d) = H(z) - sum_d p(d) H(z|d),
//! deliberately sharing nothing with the kernel score estimator used
//! during training, so the two can disagree.
//!
//! Embeddings live on the unit sphere, where the ambient-dimension
//! estimator degenerates (the support has Lebesgue measure zero). The
//! estimator therefore takes an optional intrinsic dimension; report
//! building detects unit-norm inputs and uses dim = cols - 1, reporting
//! entropy with respect to the surface measure.

use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::losses::vmf_alignment_bound;
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    /// Row-major counts; row = true class, column = predicted.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArg {
                context: "ConfusionMatrix",
                detail: "counts must be square and non-empty".into(),
            });
        }
        let mut cm = ConfusionMatrix::new(n);
        for (t, row) in rows.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                cm.counts[t * n + p] = c;
            }
        }
        Ok(cm)
    }

    pub fn from_pairs(truth: &[u8], pred: &[u8], n_classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::LengthMismatch {
                context: "ConfusionMatrix",
                left: truth.len(),
                right: pred.len(),
            });
        }
        let mut cm = ConfusionMatrix::new(n_classes);
        for (&t, &p) in truth.iter().zip(pred) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: u8, pred: u8) -> Result<()> {
        let max = self.n as u32 - 1;
        for (kind, v) in [("class", truth), ("class", pred)] {
            if v as usize >= self.n {
                return Err(Error::LabelOutOfRange {
                    kind,
                    value: v as u32,
                    max,
                });
            }
        }
        self.counts[truth as usize * self.n + pred as usize] += 1;
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Row sum: how many evaluated epochs truly belong to the class.
    pub fn support(&self, class: usize) -> u64 {
        (0..self.n).map(|p| self.count(class, p)).sum()
    }

    /// Classes that never occur as truth nor as prediction; their F1 is 0
    /// by convention and reports should call that out.
    pub fn absent_classes(&self) -> Vec<usize> {
        (0..self.n)
            .filter(|&c| self.support(c) == 0 && (0..self.n).all(|t| self.count(t, c) == 0))
            .collect()
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.nonempty()?;
        let diag: u64 = (0..self.n).map(|i| self.count(i, i)).sum();
        Ok(diag as f64 / total)
    }

    fn nonempty(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::InvalidArg {
                context: "ConfusionMatrix",
                detail: "empty confusion matrix".into(),
            });
        }
        Ok(total as f64)
    }
}

/// (p_o - p_e) / (1 - p_e), with 0 returned in the degenerate p_e = 1
/// case (everything in a single class, so chance explains all agreement).
pub fn cohens_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.nonempty()?;
    let n = cm.n_classes();
    let mut p_o = 0.0;
    let mut p_e = 0.0;
    for c in 0..n {
        p_o += cm.count(c, c) as f64;
        let row: u64 = (0..n).map(|p| cm.count(c, p)).sum();
        let col: u64 = (0..n).map(|t| cm.count(t, c)).sum();
        p_e += (row as f64 / total) * (col as f64 / total);
    }
    p_o /= total;
    if (1.0 - p_e).abs() < 1e-12 {
        return Ok(0.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Per-class F1 = 2PR/(P+R), 0 when precision and recall are both
/// undefined or zero.
pub fn per_class_f1(cm: &ConfusionMatrix) -> Result<Vec<f64>> {
    cm.nonempty()?;
    let n = cm.n_classes();
    let mut out = Vec::with_capacity(n);
    for c in 0..n {
        let tp = cm.count(c, c) as f64;
        let row: u64 = (0..n).map(|p| cm.count(c, p)).sum();
        let col: u64 = (0..n).map(|t| cm.count(t, c)).sum();
        let denom = row as f64 + col as f64;
        out.push(if denom == 0.0 { 0.0 } else { 2.0 * tp / denom });
    }
    Ok(out)
}

pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let f1 = per_class_f1(cm)?;
    Ok(f1.iter().sum::<f64>() / f1.len() as f64)
}

/// Kozachenko-Leonenko differential entropy estimate with Euclidean
/// distances:
///
///   H_hat = psi(n) - psi(k) + ln V_d + (d/n) sum_i ln r_k(i)
///
/// where r_k(i) is the distance from sample i to its k-th nearest
/// neighbor and V_d the unit-ball volume. `dim` overrides the ambient
/// column count for data on a lower-dimensional manifold (unit-sphere
/// embeddings use cols - 1); entropy is then with respect to that
/// manifold's Hausdorff measure, since locally the chordal and intrinsic
/// metrics agree.
pub fn knn_entropy(samples: &Matrix, k: usize, dim: Option<usize>) -> Result<f64> {
    let n = samples.rows();
    let cols = samples.cols();
    if k < 1 || n <= k {
        return Err(Error::InsufficientSamples {
            context: "knn_entropy",
            need: k.max(1) + 1,
            got: n,
        });
    }
    if !samples.is_finite() {
        return Err(Error::NonFinite {
            context: "knn_entropy",
        });
    }
    let d = dim.unwrap_or(cols);
    if d < 1 || d > cols {
        return Err(Error::InvalidArg {
            context: "knn_entropy",
            detail: format!("dimension {d} outside 1..={cols}"),
        });
    }

    let mut sum_log_r = 0.0;
    let mut dists = vec![0.0f64; n - 1];
    for i in 0..n {
        let zi = samples.row(i);
        let mut w = 0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let zj = samples.row(j);
            let mut sq = 0.0;
            for (a, b) in zi.iter().zip(zj) {
                let diff = a - b;
                sq += diff * diff;
            }
            dists[w] = sq;
            w += 1;
        }
        let (_, kth, _) = dists.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
        let r = kth.sqrt();
        if r <= 0.0 {
            return Err(Error::InvalidArg {
                context: "knn_entropy",
                detail: format!("sample {i} has a duplicate among its {k} nearest neighbors"),
            });
        }
        sum_log_r += r.ln();
    }

    let df = d as f64;
    let log_ball_volume = 0.5 * df * std::f64::consts::PI.ln() - ln_gamma(0.5 * df + 1.0);
    Ok(digamma(n as f64) - digamma(k as f64) + log_ball_volume + df * sum_log_r / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoSettings {
    pub knn_k: usize,
    pub kappa: f64,
    /// Dimension handed to the entropy estimator.
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct InfoReport {
    /// Upper bound on the superfluous information carried past the
    /// positives, from the vMF alignment bound at the given kappa.
    pub superfluous_proxy: f64,
    /// I(z;d) = H(z) - sum_d p(d) H(z|d), all kNN estimates.
    pub i_zd: f64,
    pub h_z: f64,
    /// Count-weighted mean of the per-domain entropies.
    pub h_z_given_d: f64,
    pub per_domain: Vec<(u16, f64)>,
    pub settings: InfoSettings,
}

fn rows_subset(z: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), z.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(z.row(i));
    }
    out
}

fn all_unit_norm(z: &Matrix) -> bool {
    (0..z.rows()).all(|i| {
        let sq: f64 = z.row(i).iter().map(|v| v * v).sum();
        (sq.sqrt() - 1.0).abs() < 1e-6
    })
}

/// Information diagnostics for a batch of embeddings: the vMF alignment
/// bound against their positives as the superfluous-information proxy,
/// and kNN entropy estimates for the domain-information side.
pub fn info_report(
    z: &Matrix,
    z_p: &Matrix,
    domains: &[u16],
    kappa: f64,
    k: usize,
) -> Result<InfoReport> {
    if z.rows() != domains.len() {
        return Err(Error::LengthMismatch {
            context: "info_report",
            left: z.rows(),
            right: domains.len(),
        });
    }
    let mut by_domain: std::collections::BTreeMap<u16, Vec<usize>> = Default::default();
    for (i, &d) in domains.iter().enumerate() {
        by_domain.entry(d).or_default().push(i);
    }
    for (&d, idx) in &by_domain {
        if idx.len() < 2 {
            return Err(Error::DomainTooSmall {
                domain: d,
                count: idx.len(),
            });
        }
    }

    let dim = if all_unit_norm(z) {
        (z.cols() - 1).max(1)
    } else {
        z.cols()
    };
    let superfluous_proxy = vmf_alignment_bound(z, z_p, kappa)?;
    let h_z = knn_entropy(z, k, Some(dim))?;
    let n = z.rows() as f64;
    let mut per_domain = Vec::with_capacity(by_domain.len());
    let mut h_z_given_d = 0.0;
    for (&d, idx) in &by_domain {
        let h = knn_entropy(&rows_subset(z, idx), k, Some(dim))?;
        h_z_given_d += h * idx.len() as f64 / n;
        per_domain.push((d, h));
    }

    Ok(InfoReport {
        superfluous_proxy,
        i_zd: h_z - h_z_given_d,
        h_z,
        h_z_given_d,
        per_domain,
        settings: InfoSettings {
            knn_k: k,
            kappa,
            dim,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{l2_normalize, Rng};
    use crate::vmf;

    fn two_class_example() -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&[vec![40, 10], vec![20, 30]]).unwrap()
    }

    #[test]
    fn kappa_matches_hand_computation() {
        // p_o = 0.7, row/col marginals (50,50)/(60,40) give p_e = 0.5.
        let cm = two_class_example();
        assert!((cohens_kappa(&cm).unwrap() - 0.4).abs() < 1e-12);
        assert!((cm.accuracy().unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn kappa_edge_cases() {
        let diag = ConfusionMatrix::from_rows(&[vec![7, 0], vec![0, 3]]).unwrap();
        assert_eq!(cohens_kappa(&diag).unwrap(), 1.0);

        // Product counts: rows (50, 50), columns (60, 40), independent.
        let indep = ConfusionMatrix::from_rows(&[vec![30, 20], vec![30, 20]]).unwrap();
        assert_eq!(cohens_kappa(&indep).unwrap(), 0.0);

        // Single-class degenerate case: p_e = 1, kappa defined as 0.
        let degenerate = ConfusionMatrix::from_rows(&[vec![100, 0], vec![0, 0]]).unwrap();
        assert_eq!(cohens_kappa(&degenerate).unwrap(), 0.0);

        let empty = ConfusionMatrix::new(5);
        assert!(cohens_kappa(&empty).is_err());
        assert!(macro_f1(&empty).is_err());
    }

    #[test]
    fn f1_matches_hand_computation() {
        let cm = two_class_example();
        let f1 = per_class_f1(&cm).unwrap();
        // P = 2/3, R = 4/5 -> 8/11; P = 3/4, R = 3/5 -> 2/3.
        assert!((f1[0] - 8.0 / 11.0).abs() < 1e-12);
        assert!((f1[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((macro_f1(&cm).unwrap() - 23.0 / 33.0).abs() < 1e-12);

        let perfect = ConfusionMatrix::from_rows(&[vec![5, 0], vec![0, 9]]).unwrap();
        assert!(per_class_f1(&perfect).unwrap().iter().all(|&f| f == 1.0));

        // Class 2 never true and never predicted: F1 = 0 by convention.
        let absent =
            ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![1, 4, 0], vec![0, 0, 0]]).unwrap();
        assert_eq!(per_class_f1(&absent).unwrap()[2], 0.0);
        assert_eq!(absent.absent_classes(), vec![2]);
    }

    #[test]
    fn kappa_and_f1_are_permutation_invariant() {
        let mut rng = Rng::new(17);
        let mut rows = vec![vec![0u64; 5]; 5];
        for row in &mut rows {
            for v in row.iter_mut() {
                *v = rng.usize_below(30) as u64;
            }
        }
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        let perm = [2usize, 0, 4, 1, 3];
        let mut permuted = vec![vec![0u64; 5]; 5];
        for t in 0..5 {
            for p in 0..5 {
                permuted[perm[t]][perm[p]] = rows[t][p];
            }
        }
        let pm = ConfusionMatrix::from_rows(&permuted).unwrap();
        assert!((cohens_kappa(&cm).unwrap() - cohens_kappa(&pm).unwrap()).abs() < 1e-12);
        assert!((macro_f1(&cm).unwrap() - macro_f1(&pm).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn record_checks_labels() {
        let mut cm = ConfusionMatrix::new(5);
        cm.record(4, 0).unwrap();
        assert!(matches!(
            cm.record(5, 0),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert_eq!(cm.total(), 1);
        let cm2 = ConfusionMatrix::from_pairs(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        assert_eq!(cm2.count(1, 0), 1);
        assert_eq!(cm2.support(1), 2);
    }

    #[test]
    fn knn_entropy_recovers_gaussian() {
        let mut rng = Rng::new(31);
        let mut z = Matrix::zeros(10_000, 2);
        for i in 0..z.rows() {
            for j in 0..2 {
                z.set(i, j, rng.normal());
            }
        }
        let h = knn_entropy(&z, 5, None).unwrap();
        let want = 2.8378770664093453; // ln(2 pi e)
        println!("gaussian entropy estimate {h:.4} vs {want:.4}");
        assert!((h - want).abs() < 0.05, "estimate {h} vs {want}");
    }

    #[test]
    fn knn_entropy_recovers_uniform_sphere() {
        // Uniform on the 2-sphere has density 1/(4 pi) under the surface
        // measure; with the intrinsic dimension the estimator should land
        // on log 4 pi.
        let mut rng = Rng::new(32);
        let mut z = Matrix::zeros(10_000, 3);
        for i in 0..z.rows() {
            let v: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let u = l2_normalize(&v).unwrap();
            z.row_mut(i).copy_from_slice(&u);
        }
        let h = knn_entropy(&z, 5, Some(2)).unwrap();
        let want = 2.5310242469692907; // log surface area of the 2-sphere
        println!("sphere entropy estimate {h:.4} vs {want:.4}");
        assert!((h - want).abs() < 0.1, "estimate {h} vs {want}");
    }

    #[test]
    fn knn_entropy_scaling_law_is_exact() {
        let mut rng = Rng::new(33);
        let mut z = Matrix::zeros(400, 2);
        for i in 0..z.rows() {
            for j in 0..2 {
                z.set(i, j, rng.normal());
            }
        }
        let h1 = knn_entropy(&z, 5, None).unwrap();
        let c = 3.0;
        let mut scaled = z.clone();
        for v in scaled.data_mut() {
            *v *= c;
        }
        let h2 = knn_entropy(&scaled, 5, None).unwrap();
        // Every neighbor distance scales by c, so the shift is exactly
        // d ln c up to rounding.
        assert!((h2 - h1 - 2.0 * c.ln()).abs() < 1e-9);
    }

    #[test]
    fn knn_entropy_rejects_bad_inputs() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            knn_entropy(&z, 1, None),
            Err(Error::InvalidArg { .. })
        ));
        assert!(matches!(
            knn_entropy(&z, 3, None),
            Err(Error::InsufficientSamples { .. })
        ));
        assert!(knn_entropy(&z, 2, Some(3)).is_err());
    }

    fn vmf_rows(mu: &[f64], kappa: f64, count: usize, rng: &mut Rng) -> Matrix {
        let params = vmf::VmfParams::new(mu.to_vec(), kappa).unwrap();
        vmf::sample(&params, count, rng).unwrap()
    }

    #[test]
    fn info_report_detects_domain_information() {
        let mut rng = Rng::new(44);
        // Two antipodal clusters: domain is readable from z, about ln 2.
        let a = vmf_rows(&[0.0, 0.0, 1.0], 50.0, 500, &mut rng);
        let b = vmf_rows(&[0.0, 0.0, -1.0], 50.0, 500, &mut rng);
        let mut z = Matrix::zeros(1000, 3);
        let mut domains = Vec::new();
        for i in 0..500 {
            z.row_mut(i).copy_from_slice(a.row(i));
            domains.push(1u16);
        }
        for i in 0..500 {
            z.row_mut(500 + i).copy_from_slice(b.row(i));
            domains.push(2u16);
        }
        let report = info_report(&z, &z, &domains, 10.0, 5).unwrap();
        println!(
            "separated: I(z;d) {:.4}, H(z) {:.4}, H(z|d) {:.4}",
            report.i_zd, report.h_z, report.h_z_given_d
        );
        assert!(report.i_zd > 0.5, "I(z;d) = {}", report.i_zd);
        assert!(report.i_zd < 0.9, "I(z;d) = {}", report.i_zd);
        assert_eq!(report.settings.dim, 2);
        assert!(
            (report.i_zd - (report.h_z - report.h_z_given_d)).abs() < 1e-12,
            "identity must hold by construction"
        );

        // Same distribution in both domains: nothing to read.
        let c = vmf_rows(&[0.0, 0.0, 1.0], 2.0, 1000, &mut rng);
        let report = info_report(&c, &c, &domains, 10.0, 5).unwrap();
        println!("mixed: I(z;d) {:.4}", report.i_zd);
        assert!(report.i_zd.abs() < 0.1, "I(z;d) = {}", report.i_zd);
    }

    #[test]
    fn info_report_i_zd_is_rotation_invariant() {
        let mut rng = Rng::new(45);
        let z = vmf_rows(&[1.0, 0.0, 0.0], 5.0, 300, &mut rng);
        let domains: Vec<u16> = (0..300).map(|i| (i % 3) as u16).collect();
        let before = info_report(&z, &z, &domains, 10.0, 5).unwrap();

        // Rotate in the (0, 1) plane by an arbitrary angle.
        let (s, c) = (0.6f64, 0.8f64);
        let mut rotated = z.clone();
        for i in 0..z.rows() {
            let x = z.get(i, 0);
            let y = z.get(i, 1);
            rotated.set(i, 0, c * x - s * y);
            rotated.set(i, 1, s * x + c * y);
        }
        let after = info_report(&rotated, &rotated, &domains, 10.0, 5).unwrap();
        assert!(
            (before.i_zd - after.i_zd).abs() < 1e-6,
            "{} vs {}",
            before.i_zd,
            after.i_zd
        );
    }

    #[test]
    fn info_report_proxy_minimum_at_perfect_alignment() {
        let mut rng = Rng::new(46);
        let z = vmf_rows(&[0.0, 1.0, 0.0], 8.0, 60, &mut rng);
        let domains: Vec<u16> = (0..60).map(|i| (i % 2) as u16).collect();
        let kappa = 12.0;
        let report = info_report(&z, &z, &domains, kappa, 5).unwrap();
        let minimum = -kappa - vmf::log_normalizer(3, kappa).unwrap();
        assert!((report.superfluous_proxy - minimum).abs() < 1e-12);

        // Any misalignment sits strictly above the minimum.
        let mut shifted = Matrix::zeros(60, 3);
        for i in 0..60 {
            shifted.row_mut(i).copy_from_slice(z.row((i + 1) % 60));
        }
        let worse = info_report(&z, &shifted, &domains, kappa, 5).unwrap();
        assert!(worse.superfluous_proxy > report.superfluous_proxy);
    }

    #[test]
    fn info_report_rejects_starved_domains() {
        let z = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let err = info_report(&z, &z, &[1, 1, 1, 2], 5.0, 1);
        assert!(matches!(err, Err(Error::DomainTooSmall { domain: 2, .. })));
    }
}
