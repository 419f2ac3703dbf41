//! Training objectives and the scalar identity checks behind them.
//!
//! The single-level objective on unit embeddings z with class labels y is
//!
//!   L = sum_i (-1/|P(i)|) sum_{p in P(i)} log [ exp(z_i.z_p / tau)
//!         / sum_{n in N(i)} exp(z_i.z_n / tau) ]  -  alpha * S
//!
//! where P(i) are the other same-class indices, N(i) the different-class
//! indices, and S the Stein surrogate for H(z|d) with frozen scores. Note
//! the denominator runs over negatives only, not over all other samples;
//! that is a deliberate departure from the usual supervised-contrastive
//! normalization and the default here, with `DenominatorMode::AllOthers`
//! available for ablation. Anchors with an empty positive or negative set
//! are skipped and counted, never errors, because two-domain batches with
//! class imbalance produce them routinely.
//!
//! The multi-scale form sums the same objective over a level set J, one
//! embedding matrix and one Stein estimate per level.
//!
//! Gradients returned here are with respect to the embeddings, to be pushed
//! through the encoder tape by the caller. With s_ij = z_i.z_j / tau and
//! W_ij = dL/ds_ij (softmax weight on negatives, -1/|P(i)| on positives),
//! the contrastive gradient is dL/dZ = (W + W^T) Z / tau. The entropy term
//! adds -alpha * dS/dZ with scores held constant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{logsumexp, Matrix};
use crate::stein::{surrogate_from_scores, DomainWeighting};
use crate::vmf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenominatorMode {
    /// Only different-class samples in the denominator (the printed form).
    NegativesOnly,
    /// Every other sample in the denominator (standard SupCon, for ablation).
    AllOthers,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Temperature tau.
    pub tau: f64,
    /// Weight of the conditional-entropy term.
    pub alpha: f64,
    /// Level set J: which encoder taps participate.
    pub levels: Vec<usize>,
    /// Balance factor beta = 1 / ((lambda + 1) kappa); identity tests only.
    pub beta: f64,
    /// Lagrange multipliers; identity tests only, training uses alpha.
    pub lambda1: f64,
    pub lambda2: f64,
    pub denominator: DenominatorMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            alpha: 1e-3,
            levels: vec![3, 4, 5],
            beta: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            denominator: DenominatorMode::NegativesOnly,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArg {
                context: "LossConfig",
                detail: format!("tau must be positive, got {}", self.tau),
            });
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidArg {
                context: "LossConfig",
                detail: format!("alpha must be >= 0, got {}", self.alpha),
            });
        }
        if self.levels.is_empty() {
            return Err(Error::InvalidArg {
                context: "LossConfig",
                detail: "level set must be nonempty".into(),
            });
        }
        Ok(())
    }
}

/// Per-level unit embeddings plus the shared class and domain labels.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    z: BTreeMap<usize, Matrix>,
    y: Vec<u8>,
    d: Vec<u16>,
}

impl BatchEmbeddings {
    pub fn new(z: BTreeMap<usize, Matrix>, y: Vec<u8>, d: Vec<u16>) -> Result<Self> {
        if y.len() != d.len() {
            return Err(Error::LengthMismatch {
                context: "BatchEmbeddings",
                left: y.len(),
                right: d.len(),
            });
        }
        for (level, m) in &z {
            if m.rows() != y.len() {
                return Err(Error::Dim {
                    context: "BatchEmbeddings",
                    detail: format!("level {level} has {} rows, labels {}", m.rows(), y.len()),
                });
            }
            for i in 0..m.rows() {
                let norm: f64 = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidArg {
                        context: "BatchEmbeddings",
                        detail: format!("level {level} row {i} has norm {norm}, want 1"),
                    });
                }
            }
        }
        Ok(BatchEmbeddings { z, y, d })
    }

    /// Training-path constructor that tolerates exactly-zero rows (a dead
    /// hidden layer normalizes to zero under the epsilon guard). Shape
    /// checks still apply; only the unit-norm check is waived.
    pub(crate) fn from_parts_unchecked(
        z: BTreeMap<usize, Matrix>,
        y: Vec<u8>,
        d: Vec<u16>,
    ) -> Result<Self> {
        if y.len() != d.len() {
            return Err(Error::LengthMismatch {
                context: "BatchEmbeddings",
                left: y.len(),
                right: d.len(),
            });
        }
        for (level, m) in &z {
            if m.rows() != y.len() {
                return Err(Error::Dim {
                    context: "BatchEmbeddings",
                    detail: format!("level {level} has {} rows, labels {}", m.rows(), y.len()),
                });
            }
        }
        Ok(BatchEmbeddings { z, y, d })
    }

    pub fn level(&self, level: usize) -> Result<&Matrix> {
        self.z.get(&level).ok_or(Error::MissingLevel { level })
    }

    pub fn levels(&self) -> impl Iterator<Item = usize> + '_ {
        self.z.keys().copied()
    }

    pub fn labels(&self) -> &[u8] {
        &self.y
    }

    pub fn domains(&self) -> &[u16] {
        &self.d
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Frozen Stein scores for the entropy term at one level.
#[derive(Debug, Clone, Copy)]
pub struct EntropyTerm<'a> {
    pub scores: &'a Matrix,
    pub weighting: DomainWeighting,
}

#[derive(Debug, Clone)]
pub struct LossEval {
    /// Full objective value: contrastive - alpha * surrogate.
    pub value: f64,
    pub contrastive: f64,
    /// Surrogate value, 0 when no entropy term was supplied.
    pub surrogate: f64,
    /// dL/dZ at this level.
    pub grad_z: Matrix,
    /// Anchors dropped for an empty positive or negative set.
    pub skipped_anchors: usize,
    pub used_anchors: usize,
}

fn contrastive_term(
    z: &Matrix,
    y: &[u8],
    tau: f64,
    mode: DenominatorMode,
) -> Result<(f64, Matrix, usize, usize)> {
    let n = z.rows();
    // s_ij = z_i . z_j / tau.
    let mut s = z.matmul_transb(z);
    for v in s.data_mut() {
        *v /= tau;
    }

    let mut w = Matrix::zeros(n, n);
    let mut value = 0.0;
    let mut skipped = 0;
    let mut scratch = Vec::with_capacity(n);
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && y[j] == y[i]).collect();
        let negatives: Vec<usize> = match mode {
            DenominatorMode::NegativesOnly => (0..n).filter(|&j| y[j] != y[i]).collect(),
            DenominatorMode::AllOthers => (0..n).filter(|&j| j != i).collect(),
        };
        if positives.is_empty() || negatives.is_empty() {
            skipped += 1;
            continue;
        }
        scratch.clear();
        scratch.extend(negatives.iter().map(|&j| s.get(i, j)));
        let lse = logsumexp(&scratch);
        let mean_pos: f64 =
            positives.iter().map(|&j| s.get(i, j)).sum::<f64>() / positives.len() as f64;
        value += lse - mean_pos;

        let inv_p = 1.0 / positives.len() as f64;
        for &j in &positives {
            w.set(i, j, w.get(i, j) - inv_p);
        }
        for &j in &negatives {
            w.set(i, j, w.get(i, j) + (s.get(i, j) - lse).exp());
        }
    }
    if skipped == n {
        return Err(Error::DegenerateBatch);
    }

    // dL/dZ = (W Z + W^T Z) / tau.
    let mut grad = w.matmul(z);
    let wt_z = w.transpose().matmul(z);
    grad.add_assign_scaled(&wt_z, 1.0);
    let grad = grad.scale(1.0 / tau);
    Ok((value, grad, skipped, n - skipped))
}

/// Single-level objective. When `entropy` is provided, its scores are used
/// both for the surrogate value and for the frozen-score gradient; passing
/// `None` with alpha > 0 is an error, since the term could not be formed.
pub fn supcon_entropy_loss(
    batch: &BatchEmbeddings,
    level: usize,
    entropy: Option<EntropyTerm<'_>>,
    cfg: &LossConfig,
) -> Result<LossEval> {
    cfg.validate()?;
    let z = batch.level(level)?;
    let (contrastive, mut grad, skipped, used) =
        contrastive_term(z, batch.labels(), cfg.tau, cfg.denominator)?;

    let mut surrogate = 0.0;
    if cfg.alpha > 0.0 {
        let term = entropy.ok_or(Error::InvalidArg {
            context: "supcon_entropy_loss",
            detail: "alpha > 0 but no Stein scores supplied".into(),
        })?;
        let (s, ds) = surrogate_from_scores(z, term.scores, batch.domains(), term.weighting)?;
        surrogate = s;
        grad.add_assign_scaled(&ds, -cfg.alpha);
    } else if let Some(term) = entropy {
        // Record the surrogate for diagnostics even at alpha = 0.
        let (s, _) = surrogate_from_scores(z, term.scores, batch.domains(), term.weighting)?;
        surrogate = s;
    }

    Ok(LossEval {
        value: contrastive - cfg.alpha * surrogate,
        contrastive,
        surrogate,
        grad_z: grad,
        skipped_anchors: skipped,
        used_anchors: used,
    })
}

#[derive(Debug, Clone)]
pub struct MultiscaleEval {
    pub value: f64,
    /// Per-level evaluations, in cfg.levels order.
    pub per_level: Vec<(usize, LossEval)>,
}

/// Sum of the single-level objective over cfg.levels. Stein terms are per
/// level and must cover every configured level when alpha > 0.
pub fn multiscale_loss(
    batch: &BatchEmbeddings,
    entropy: Option<&BTreeMap<usize, EntropyTerm<'_>>>,
    cfg: &LossConfig,
) -> Result<MultiscaleEval> {
    cfg.validate()?;
    let mut value = 0.0;
    let mut per_level = Vec::with_capacity(cfg.levels.len());
    for &level in &cfg.levels {
        let term = entropy.and_then(|m| m.get(&level)).copied();
        let eval = supcon_entropy_loss(batch, level, term, cfg)?;
        value += eval.value;
        per_level.push((level, eval));
    }
    Ok(MultiscaleEval { value, per_level })
}

/// Upper bound on the conditional entropy of an embedding given its positive,
/// under a vMF model with concentration kappa:
///   bound = -kappa * mean_i(z_p,i . z_i) - log C_n(kappa).
/// Tight (equal to the vMF entropy plus kappa (A_n - mean cos)) when pairs
/// actually follow the model; used as the superfluous-information proxy.
pub fn vmf_alignment_bound(z_i: &Matrix, z_p: &Matrix, kappa: f64) -> Result<f64> {
    if z_i.rows() != z_p.rows() || z_i.cols() != z_p.cols() {
        return Err(Error::LengthMismatch {
            context: "vmf_alignment_bound",
            left: z_i.rows(),
            right: z_p.rows(),
        });
    }
    if !(kappa > 0.0) {
        return Err(Error::InvalidArg {
            context: "vmf_alignment_bound",
            detail: format!("kappa must be positive, got {kappa}"),
        });
    }
    if z_i.rows() == 0 {
        return Err(Error::InsufficientSamples {
            context: "vmf_alignment_bound",
            need: 1,
            got: 0,
        });
    }
    let mut mean_dot = 0.0;
    for i in 0..z_i.rows() {
        mean_dot += z_i
            .row(i)
            .iter()
            .zip(z_p.row(i))
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
    mean_dot /= z_i.rows() as f64;
    Ok(-kappa * mean_dot - vmf::log_normalizer(z_i.cols(), kappa)?)
}

/// The two scalar forms of the constrained objective:
///   five:  (lambda1 + 1) H1 + (lambda2 - 1) H2 - lambda2 H3
///   six:   (lambda + 1) H1 - H3, with lambda = lambda1
/// H1 = H(z|v_p), H2 = H(z), H3 = H(z|d). Setting lambda2 = 1 collapses the
/// first into the second; returning both lets tests assert that algebra.
pub fn lagrangian_identity_check(
    h_z_given_vp: f64,
    h_z: f64,
    h_z_given_d: f64,
    lambda1: f64,
    lambda2: f64,
) -> (f64, f64) {
    let five = (lambda1 + 1.0) * h_z_given_vp + (lambda2 - 1.0) * h_z - lambda2 * h_z_given_d;
    let six = (lambda1 + 1.0) * h_z_given_vp - h_z_given_d;
    (five, six)
}

/// A fully enumerable toy channel: joint p(v, v_p) and an encoder kernel
/// q(z | v). Rows of `joint` index v, columns index v_p; rows of `encoder`
/// index v, columns index z and must each sum to 1.
#[derive(Debug, Clone)]
pub struct DiscreteToy {
    pub joint: Matrix,
    pub encoder: Matrix,
}

impl DiscreteToy {
    /// Deterministic encoder from an assignment v -> z.
    pub fn deterministic(joint: Matrix, assignment: &[usize], n_z: usize) -> Result<Self> {
        if assignment.len() != joint.rows() {
            return Err(Error::LengthMismatch {
                context: "DiscreteToy",
                left: assignment.len(),
                right: joint.rows(),
            });
        }
        let mut encoder = Matrix::zeros(assignment.len(), n_z);
        for (v, &z) in assignment.iter().enumerate() {
            if z >= n_z {
                return Err(Error::InvalidArg {
                    context: "DiscreteToy",
                    detail: format!("assignment {z} out of range {n_z}"),
                });
            }
            encoder.set(v, z, 1.0);
        }
        Ok(DiscreteToy { joint, encoder })
    }
}

#[derive(Debug, Clone)]
pub struct MiReport {
    pub i_z_v_given_vp: f64,
    pub h_z_given_vp: f64,
    pub h_z_given_v_vp: f64,
    pub h_z: f64,
    /// H(z|v_p) - I(z;v|v_p); equals H(z|v,v_p), and is exactly 0 for a
    /// deterministic encoder.
    pub difference: f64,
}

/// Plug-in check of I(z;v|v_p) = H(z|v_p) - H(z|v,v_p) on an enumerable
/// space. Both sides are computed independently from their definitions; the
/// summation visits (v_p, z) cells in the same order in every quantity so
/// the deterministic-encoder case cancels exactly, not just approximately.
pub fn mutual_information_decomposition_check(toy: &DiscreteToy) -> Result<MiReport> {
    let n_v = toy.joint.rows();
    let n_vp = toy.joint.cols();
    let n_z = toy.encoder.cols();
    if toy.encoder.rows() != n_v {
        return Err(Error::Dim {
            context: "mutual_information_decomposition_check",
            detail: format!("encoder rows {} vs joint rows {n_v}", toy.encoder.rows()),
        });
    }
    let total: f64 = toy.joint.data().iter().sum();
    if (total - 1.0).abs() > 1e-9 || toy.joint.data().iter().any(|&p| p < 0.0) {
        return Err(Error::InvalidArg {
            context: "mutual_information_decomposition_check",
            detail: "joint must be a probability table".into(),
        });
    }
    for v in 0..n_v {
        let row_sum: f64 = toy.encoder.row(v).iter().sum();
        if (row_sum - 1.0).abs() > 1e-9 || toy.encoder.row(v).iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidArg {
                context: "mutual_information_decomposition_check",
                detail: format!("encoder row {v} is not a distribution"),
            });
        }
    }

    // Marginals. p(z, v_p) = sum_v p(v, v_p) q(z|v).
    let mut p_vp = vec![0.0; n_vp];
    for v in 0..n_v {
        for vp in 0..n_vp {
            p_vp[vp] += toy.joint.get(v, vp);
        }
    }
    let mut p_z_vp = Matrix::zeros(n_z, n_vp);
    for vp in 0..n_vp {
        for z in 0..n_z {
            let mut acc = 0.0;
            for v in 0..n_v {
                acc += toy.joint.get(v, vp) * toy.encoder.get(v, z);
            }
            p_z_vp.set(z, vp, acc);
        }
    }
    let mut p_z = vec![0.0; n_z];
    for z in 0..n_z {
        for vp in 0..n_vp {
            p_z[z] += p_z_vp.get(z, vp);
        }
    }

    // H(z|v_p) = sum_{v_p, z} p(z, v_p) (ln p(v_p) - ln p(z, v_p)).
    let mut h_z_given_vp = 0.0;
    for vp in 0..n_vp {
        for z in 0..n_z {
            let p = p_z_vp.get(z, vp);
            if p > 0.0 {
                h_z_given_vp += p * (p_vp[vp].ln() - p.ln());
            }
        }
    }

    // I(z;v|v_p) and H(z|v,v_p), cell by cell over (v_p, z) with the inner
    // sum over v accumulated first.
    let mut i_z_v_given_vp = 0.0;
    let mut h_z_given_v_vp = 0.0;
    for vp in 0..n_vp {
        for z in 0..n_z {
            let mut cell_i = 0.0;
            let mut cell_h = 0.0;
            for v in 0..n_v {
                let p_vvp = toy.joint.get(v, vp);
                let q = toy.encoder.get(v, z);
                let p = p_vvp * q;
                if p > 0.0 {
                    cell_i += p
                        * ((p.ln() - p_vvp.ln()) + (p_vp[vp].ln() - p_z_vp.get(z, vp).ln()));
                    cell_h += p * (p_vvp.ln() - p.ln());
                }
            }
            i_z_v_given_vp += cell_i;
            h_z_given_v_vp += cell_h;
        }
    }

    let mut h_z = 0.0;
    for z in 0..n_z {
        if p_z[z] > 0.0 {
            h_z -= p_z[z] * p_z[z].ln();
        }
    }

    Ok(MiReport {
        i_z_v_given_vp,
        h_z_given_vp,
        h_z_given_v_vp,
        h_z,
        difference: h_z_given_vp - i_z_v_given_vp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::stein::{conditional_entropy_surrogate, KernelConfig};
    use approx::assert_relative_eq;

    fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Matrix {
        let mut m = Matrix::zeros(n, d);
        for i in 0..n {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let u = crate::numerics::l2_normalize(&v).unwrap();
            m.row_mut(i).copy_from_slice(&u);
        }
        m
    }

    fn batch_one_level(level: usize, z: Matrix, y: Vec<u8>, d: Vec<u16>) -> BatchEmbeddings {
        let mut map = BTreeMap::new();
        map.insert(level, z);
        BatchEmbeddings::new(map, y, d).unwrap()
    }

    fn cfg_alpha0(tau: f64) -> LossConfig {
        LossConfig {
            tau,
            alpha: 0.0,
            levels: vec![0],
            ..LossConfig::default()
        }
    }

    // Direct scalar evaluation, no log-sum-exp tricks, no matrices. The
    // independent oracle the optimized implementation is compared against.
    fn naive_supcon(z: &Matrix, y: &[u8], tau: f64, mode: DenominatorMode) -> (f64, usize) {
        let n = z.rows();
        let dot = |i: usize, j: usize| -> f64 {
            z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut total = 0.0;
        let mut skipped = 0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&j| j != i && y[j] == y[i]).collect();
            let neg: Vec<usize> = match mode {
                DenominatorMode::NegativesOnly => (0..n).filter(|&j| y[j] != y[i]).collect(),
                DenominatorMode::AllOthers => (0..n).filter(|&j| j != i).collect(),
            };
            if pos.is_empty() || neg.is_empty() {
                skipped += 1;
                continue;
            }
            let denom: f64 = neg.iter().map(|&j| (dot(i, j) / tau).exp()).sum();
            let mut term = 0.0;
            for &p in &pos {
                term += ((dot(i, p) / tau).exp() / denom).ln();
            }
            total -= term / pos.len() as f64;
        }
        (total, skipped)
    }

    #[test]
    fn hand_batch_evaluates_to_minus_two() {
        // z1 = z2 = (1,0), z3 = (0,1), classes (A, A, B), tau = 1, alpha = 0.
        // Anchors 1 and 2 contribute -1 each; anchor 3 has no positive and
        // is skipped. Total: -2.
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let batch = batch_one_level(0, z, vec![0, 0, 1], vec![0, 0, 0]);
        let eval = supcon_entropy_loss(&batch, 0, None, &cfg_alpha0(1.0)).unwrap();
        assert!((eval.value - (-2.0)).abs() < 1e-12, "value {}", eval.value);
        assert_eq!(eval.skipped_anchors, 1);
        assert_eq!(eval.used_anchors, 2);
    }

    #[test]
    fn matches_naive_reimplementation_on_random_batches() {
        let mut rng = Rng::new(42);
        for trial in 0..5 {
            let n = 12 + trial;
            let z = unit_rows(&mut rng, n, 6);
            let y: Vec<u8> = (0..n).map(|_| rng.usize_below(3) as u8).collect();
            let d = vec![0u16; n];
            for mode in [DenominatorMode::NegativesOnly, DenominatorMode::AllOthers] {
                for tau in [1.0, 0.07, 0.5] {
                    let (want, want_skipped) = naive_supcon(&z, &y, tau, mode);
                    let batch = batch_one_level(0, z.clone(), y.clone(), d.clone());
                    let cfg = LossConfig {
                        tau,
                        alpha: 0.0,
                        levels: vec![0],
                        denominator: mode,
                        ..LossConfig::default()
                    };
                    let eval = supcon_entropy_loss(&batch, 0, None, &cfg).unwrap();
                    assert_relative_eq!(eval.value, want, max_relative = 1e-10);
                    assert_eq!(eval.skipped_anchors, want_skipped);
                }
            }
        }
    }

    #[test]
    fn alpha_shifts_loss_linearly() {
        // With frozen scores the objective is contrastive - alpha * S, so
        // alpha = 0 gives the bare contrastive term and any alpha subtracts
        // alpha * S exactly.
        let mut rng = Rng::new(3);
        let n = 16;
        let z = unit_rows(&mut rng, n, 5);
        let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let d: Vec<u16> = (0..n).map(|i| (i % 2) as u16).collect();
        let est = conditional_entropy_surrogate(
            &z,
            &d,
            &KernelConfig::default(),
            DomainWeighting::Uniform,
        )
        .unwrap();
        let batch = batch_one_level(0, z, y, d);
        let term = EntropyTerm {
            scores: &est.scores,
            weighting: DomainWeighting::Uniform,
        };
        let base = supcon_entropy_loss(&batch, 0, Some(term), &cfg_alpha0(0.2)).unwrap();
        let alpha = 0.37;
        let cfg = LossConfig {
            alpha,
            ..cfg_alpha0(0.2)
        };
        let with = supcon_entropy_loss(&batch, 0, Some(term), &cfg).unwrap();
        assert_relative_eq!(base.value, base.contrastive, max_relative = 1e-15);
        assert_relative_eq!(
            with.value,
            base.contrastive - alpha * with.surrogate,
            max_relative = 1e-12
        );
        assert_relative_eq!(with.surrogate, est.surrogate, max_relative = 1e-12);
    }

    #[test]
    fn invariant_under_batch_permutation_and_rotation() {
        let mut rng = Rng::new(9);
        let n = 14;
        let z = unit_rows(&mut rng, n, 4);
        let y: Vec<u8> = (0..n).map(|_| rng.usize_below(3) as u8).collect();
        let d = vec![0u16; n];
        let cfg = cfg_alpha0(0.3);
        let base = supcon_entropy_loss(&batch_one_level(0, z.clone(), y.clone(), d.clone()), 0, None, &cfg)
            .unwrap();

        // Permutation of sample order.
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let mut zp = Matrix::zeros(n, 4);
        let mut yp = vec![0u8; n];
        for (new_i, &old_i) in perm.iter().enumerate() {
            zp.row_mut(new_i).copy_from_slice(z.row(old_i));
            yp[new_i] = y[old_i];
        }
        let permuted =
            supcon_entropy_loss(&batch_one_level(0, zp, yp, d.clone()), 0, None, &cfg).unwrap();
        assert_relative_eq!(base.value, permuted.value, max_relative = 1e-12);

        // Common orthogonal map (Householder reflection) on all embeddings.
        let u = crate::numerics::l2_normalize(&[0.3, -1.0, 0.5, 2.0]).unwrap();
        let mut zr = Matrix::zeros(n, 4);
        for i in 0..n {
            let dot: f64 = z.row(i).iter().zip(&u).map(|(a, b)| a * b).sum();
            for c in 0..4 {
                zr.set(i, c, z.get(i, c) - 2.0 * dot * u[c]);
            }
        }
        let rotated =
            supcon_entropy_loss(&batch_one_level(0, zr, y.clone(), d), 0, None, &cfg).unwrap();
        assert_relative_eq!(base.value, rotated.value, max_relative = 1e-11);
    }

    #[test]
    fn degenerate_batch_is_an_error() {
        // All samples share one class: every anchor lacks negatives.
        let mut rng = Rng::new(10);
        let z = unit_rows(&mut rng, 6, 3);
        let batch = batch_one_level(0, z, vec![2u8; 6], vec![0u16; 6]);
        assert!(matches!(
            supcon_entropy_loss(&batch, 0, None, &cfg_alpha0(1.0)),
            Err(Error::DegenerateBatch)
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Full objective including the frozen-score entropy term.
        let mut rng = Rng::new(12);
        let n = 10;
        let dim = 4;
        let z = unit_rows(&mut rng, n, dim);
        let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let d: Vec<u16> = (0..n).map(|i| (i / 5) as u16).collect();
        let est = conditional_entropy_surrogate(
            &z,
            &d,
            &KernelConfig::default(),
            DomainWeighting::Uniform,
        )
        .unwrap();
        let cfg = LossConfig {
            tau: 0.25,
            alpha: 0.05,
            levels: vec![0],
            ..LossConfig::default()
        };

        // Loss as a function of free z with frozen scores. The finite
        // difference perturbs raw coordinates, so evaluate through the same
        // path without the unit-norm validation.
        let eval_at = |zq: &Matrix| -> f64 {
            let (c, _, _, _) = contrastive_term(zq, &y, cfg.tau, cfg.denominator).unwrap();
            let (s, _) =
                surrogate_from_scores(zq, &est.scores, &d, DomainWeighting::Uniform).unwrap();
            c - cfg.alpha * s
        };
        let batch = batch_one_level(0, z.clone(), y.clone(), d.clone());
        let term = EntropyTerm {
            scores: &est.scores,
            weighting: DomainWeighting::Uniform,
        };
        let eval = supcon_entropy_loss(&batch, 0, Some(term), &cfg).unwrap();
        assert_relative_eq!(eval.value, eval_at(&z), max_relative = 1e-12);

        let h = 1e-6;
        let mut max_rel = 0.0_f64;
        for i in 0..n {
            for c in 0..dim {
                let mut zp = z.clone();
                zp.set(i, c, z.get(i, c) + h);
                let mut zm = z.clone();
                zm.set(i, c, z.get(i, c) - h);
                let fd = (eval_at(&zp) - eval_at(&zm)) / (2.0 * h);
                let an = eval.grad_z.get(i, c);
                let rel = (an - fd).abs() / fd.abs().max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
        println!("loss gradient max relative error: {max_rel:.3e}");
        assert!(max_rel < 1e-5, "max relative error {max_rel}");
    }

    #[test]
    fn multiscale_reduces_to_single_level_and_sums() {
        let mut rng = Rng::new(20);
        let n = 12;
        let y: Vec<u8> = (0..n).map(|_| rng.usize_below(3) as u8).collect();
        let d = vec![0u16; n];
        let z3 = unit_rows(&mut rng, n, 5);
        let z4 = unit_rows(&mut rng, n, 5);
        let z5 = unit_rows(&mut rng, n, 5);

        // |J| = 1 equals the single-level objective exactly.
        let mut one = BTreeMap::new();
        one.insert(3usize, z3.clone());
        let batch1 = BatchEmbeddings::new(one, y.clone(), d.clone()).unwrap();
        let cfg1 = LossConfig {
            alpha: 0.0,
            levels: vec![3],
            ..LossConfig::default()
        };
        let single = supcon_entropy_loss(&batch1, 3, None, &cfg1).unwrap();
        let multi1 = multiscale_loss(&batch1, None, &cfg1).unwrap();
        assert_eq!(single.value, multi1.value);

        // Two identical levels double the value exactly.
        let mut twin = BTreeMap::new();
        twin.insert(3usize, z3.clone());
        twin.insert(4usize, z3.clone());
        let batch2 = BatchEmbeddings::new(twin, y.clone(), d.clone()).unwrap();
        let cfg2 = LossConfig {
            alpha: 0.0,
            levels: vec![3, 4],
            ..LossConfig::default()
        };
        let multi2 = multiscale_loss(&batch2, None, &cfg2).unwrap();
        assert_relative_eq!(multi2.value, 2.0 * single.value, max_relative = 1e-14);

        // Three distinct levels equal the loop-free per-level recomputation.
        let mut three = BTreeMap::new();
        three.insert(3usize, z3.clone());
        three.insert(4usize, z4.clone());
        three.insert(5usize, z5.clone());
        let batch3 = BatchEmbeddings::new(three, y.clone(), d.clone()).unwrap();
        let cfg3 = LossConfig {
            alpha: 0.0,
            levels: vec![3, 4, 5],
            ..LossConfig::default()
        };
        let multi3 = multiscale_loss(&batch3, None, &cfg3).unwrap();
        let mut want = 0.0;
        for z in [&z3, &z4, &z5] {
            let (v, _) = naive_supcon(z, &y, cfg3.tau, cfg3.denominator);
            want += v;
        }
        assert_relative_eq!(multi3.value, want, max_relative = 1e-10);

        // Missing level is a specific error.
        let cfg_missing = LossConfig {
            levels: vec![3, 9],
            alpha: 0.0,
            ..LossConfig::default()
        };
        assert!(matches!(
            multiscale_loss(&batch3, None, &cfg_missing),
            Err(Error::MissingLevel { level: 9 })
        ));
    }

    #[test]
    fn alignment_bound_extremes_and_vmf_pairs() {
        let n = 30;
        let dim = 3;
        let kappa = 4.0;
        // Perfect alignment: -kappa - log C_n(kappa).
        let mut rng = Rng::new(30);
        let z = unit_rows(&mut rng, n, dim);
        let bound = vmf_alignment_bound(&z, &z, kappa).unwrap();
        let want = -kappa - vmf::log_normalizer(dim, kappa).unwrap();
        assert_relative_eq!(bound, want, max_relative = 1e-12);

        // Antipodal pairs: +kappa - log C_n(kappa).
        let zneg = z.scale(-1.0);
        let bound = vmf_alignment_bound(&z, &zneg, kappa).unwrap();
        assert_relative_eq!(
            bound,
            kappa - vmf::log_normalizer(dim, kappa).unwrap(),
            max_relative = 1e-12
        );

        // Pairs drawn from vMF(mu, kappa) against mu: the bound dominates
        // the true entropy, up to Monte-Carlo error on the mean cosine.
        let mu = crate::numerics::l2_normalize(&[0.2, -1.0, 0.4]).unwrap();
        let params = crate::vmf::VmfParams::new(mu.clone(), kappa).unwrap();
        let samples = crate::vmf::sample(&params, 4000, &mut rng).unwrap();
        let mut z_p = Matrix::zeros(4000, dim);
        for i in 0..4000 {
            z_p.row_mut(i).copy_from_slice(&mu);
        }
        let bound = vmf_alignment_bound(&samples, &z_p, kappa).unwrap();
        let entropy = vmf::entropy(dim, kappa).unwrap();
        assert!(
            bound >= entropy - 0.05,
            "bound {bound} fell below entropy {entropy}"
        );
    }

    #[test]
    fn lagrangian_forms_agree_exactly_at_lambda2_one() {
        let mut rng = Rng::new(44);
        for _ in 0..100 {
            let h1 = rng.normal() * 3.0;
            let h2 = rng.normal() * 3.0;
            let h3 = rng.normal() * 3.0;
            let l1 = rng.normal();
            let (five, six) = lagrangian_identity_check(h1, h2, h3, l1, 1.0);
            assert_eq!(five, six, "h=({h1},{h2},{h3}), lambda1={l1}");
        }
        for &l1 in &[0.0, 0.5, 2.0] {
            let (five, six) = lagrangian_identity_check(0.7, -1.3, 0.4, l1, 1.0);
            assert_eq!(five, six);
        }
        // lambda2 = 0 drops H3 and keeps -H2: check the residual algebra.
        let (five, six) = lagrangian_identity_check(0.7, -1.3, 0.4, 0.5, 0.0);
        let diff = five - six;
        assert_relative_eq!(diff, -(-1.3) + 0.4, max_relative = 1e-12);
    }

    #[test]
    fn deterministic_encoder_identity_is_exact() {
        // 8 v-states, uniform joint with 8 v_p states, encoder pairs v's
        // into 4 z's. Uniform dyadic probabilities make both plug-in sums
        // associate identically, so the identity holds bitwise.
        let joint = Matrix::from_vec(8, 8, vec![1.0 / 64.0; 64]).unwrap();
        let toy = DiscreteToy::deterministic(joint, &[0, 0, 1, 1, 2, 2, 3, 3], 4).unwrap();
        let report = mutual_information_decomposition_check(&toy).unwrap();
        assert_eq!(report.h_z_given_v_vp, 0.0);
        assert_eq!(
            report.difference, 0.0,
            "I = {}, H = {}",
            report.i_z_v_given_vp, report.h_z_given_vp
        );

        // Non-uniform joint: still a deterministic encoder, identity within
        // float rounding of independently accumulated sums.
        let mut rng = Rng::new(50);
        let mut weights: Vec<f64> = (0..64).map(|_| rng.f64() + 0.1).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        let joint = Matrix::from_vec(8, 8, weights).unwrap();
        let toy = DiscreteToy::deterministic(joint, &[0, 1, 1, 2, 0, 3, 3, 2], 4).unwrap();
        let report = mutual_information_decomposition_check(&toy).unwrap();
        assert_eq!(report.h_z_given_v_vp, 0.0);
        assert!(
            report.difference.abs() < 1e-12,
            "difference {}",
            report.difference
        );
    }

    #[test]
    fn randomized_encoder_gap_equals_conditional_entropy() {
        // A stochastic encoder leaves a strictly positive gap, equal to the
        // plug-in H(z|v,v_p).
        let joint = Matrix::from_vec(4, 4, vec![1.0 / 16.0; 16]).unwrap();
        let mut encoder = Matrix::zeros(4, 3);
        encoder.set(0, 0, 0.5);
        encoder.set(0, 1, 0.5);
        encoder.set(1, 1, 1.0);
        encoder.set(2, 2, 1.0);
        encoder.set(3, 0, 0.25);
        encoder.set(3, 2, 0.75);
        let toy = DiscreteToy { joint, encoder };
        let report = mutual_information_decomposition_check(&toy).unwrap();
        assert!(report.h_z_given_v_vp > 0.0);
        assert_relative_eq!(
            report.difference,
            report.h_z_given_v_vp,
            max_relative = 1e-12
        );
    }

    #[test]
    fn independent_z_and_vp_gives_marginal_entropy() {
        // Uniform joint means v (hence z) is independent of v_p, so
        // H(z|v_p) = H(z).
        let joint = Matrix::from_vec(8, 8, vec![1.0 / 64.0; 64]).unwrap();
        let toy = DiscreteToy::deterministic(joint, &[0, 0, 0, 1, 1, 2, 2, 2], 3).unwrap();
        let report = mutual_information_decomposition_check(&toy).unwrap();
        assert_relative_eq!(report.h_z_given_vp, report.h_z, max_relative = 1e-12);
    }
}
