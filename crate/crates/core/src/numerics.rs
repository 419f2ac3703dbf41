//! Dense row-major f64 matrices, the handful of linear-algebra routines the
//! crate needs, and seeded RNG plumbing.
//!
//! This is deliberately not a BLAS: the largest systems solved here are the
//! kernel matrices of the Stein estimator (about 10^3 square), and the hot
//! loops elsewhere are convolutions handled by the autodiff tape. Everything
//! is f64; finite-difference gradient checks need the headroom.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dim {
                context: "Matrix::from_vec",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dim {
                    context: "Matrix::from_rows",
                    detail: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// self * other. Plain i-k-j loop; row-major friendly.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} by {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    /// self * other^T, without materializing the transpose.
    pub fn matmul_transb(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.cols,
            "matmul_transb: {}x{} by {}x{}^T",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let brow = other.row(j);
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += arow[k] * brow[k];
                }
                out.data[i * other.rows + j] = s;
            }
        }
        out
    }

    pub fn scale(&self, c: f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= c;
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add: shape mismatch");
        let mut out = self.clone();
        for (o, v) in out.data.iter_mut().zip(&other.data) {
            *o += *v;
        }
        out
    }

    pub fn add_assign_scaled(&mut self, other: &Matrix, c: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add_assign_scaled: shape mismatch");
        for (o, v) in self.data.iter_mut().zip(&other.data) {
            *o += c * *v;
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Solves (A + eta I) X = B by LU factorization with partial pivoting.
///
/// A must be square and is expected to be symmetric (the Stein kernel matrix
/// is); the solver itself does not rely on symmetry. The ridge keeps the
/// system well conditioned, so plain partial pivoting is enough.
pub fn solve_ridge(a: &Matrix, b: &Matrix, eta: f64) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::Dim {
            context: "solve_ridge",
            detail: format!("A is {}x{}, B has {} rows", a.rows(), a.cols(), b.rows()),
        });
    }
    if !(eta > 0.0) {
        return Err(Error::InvalidArg {
            context: "solve_ridge",
            detail: format!("eta must be positive, got {eta}"),
        });
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite { context: "solve_ridge" });
    }

    let mut lu = a.clone();
    for i in 0..n {
        lu.data[i * n + i] += eta;
    }
    let mut perm: Vec<usize> = (0..n).collect();

    for k in 0..n {
        // Pivot on the largest remaining entry in column k.
        let mut p = k;
        let mut best = lu.data[k * n + k].abs();
        for i in k + 1..n {
            let v = lu.data[i * n + k].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best == 0.0 {
            return Err(Error::InvalidArg {
                context: "solve_ridge",
                detail: "singular system despite ridge".into(),
            });
        }
        if p != k {
            for j in 0..n {
                lu.data.swap(k * n + j, p * n + j);
            }
            perm.swap(k, p);
        }
        let pivot = lu.data[k * n + k];
        for i in k + 1..n {
            let f = lu.data[i * n + k] / pivot;
            lu.data[i * n + k] = f;
            if f != 0.0 {
                for j in k + 1..n {
                    lu.data[i * n + j] -= f * lu.data[k * n + j];
                }
            }
        }
    }

    // Forward/back substitution, one column of B at a time.
    let m = b.cols();
    let mut x = Matrix::zeros(n, m);
    let mut col = vec![0.0; n];
    for j in 0..m {
        for i in 0..n {
            col[i] = b.get(perm[i], j);
        }
        for i in 1..n {
            let mut s = col[i];
            for k in 0..i {
                s -= lu.data[i * n + k] * col[k];
            }
            col[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in i + 1..n {
                s -= lu.data[i * n + k] * col[k];
            }
            col[i] = s / lu.data[i * n + i];
        }
        for i in 0..n {
            x.set(i, j, col[i]);
        }
    }
    Ok(x)
}

/// Unit-normalizes a vector. Errors on the zero vector; this is the public
/// contract. Training-time normalization with an epsilon guard lives in the
/// autodiff tape instead.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    if !norm.is_finite() {
        return Err(Error::NonFinite { context: "l2_normalize" });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// log(sum_i exp(x_i)) with max subtraction. Returns -inf for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// SplitMix64 step, used to derive independent stream seeds from a run seed.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seeded RNG handle. ChaCha8 underneath: fast, splittable by reseeding, and
/// its stream depends only on the seed, never on global state.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child stream. Forking depends only on the seed
    /// and the tag, not on how much of this stream has been consumed, so the
    /// same (seed, tag) pair always names the same stream.
    pub fn fork(&self, tag: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(tag.wrapping_mul(0xa076_1d64_78bd_642f))))
    }

    pub fn next_u64(&mut self) -> u64 {
        RngCore::next_u64(&mut self.inner)
    }

    /// Uniform in [0, 1).
    pub fn f64(&mut self) -> f64 {
        // 53 random bits into the mantissa range.
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.f64()
    }

    /// Uniform integer in [0, n). n must be positive.
    pub fn usize_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "usize_below(0)");
        // Rejection sampling to stay unbiased.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller. One value per call keeps the stream
    /// layout simple and reproducible.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u1 = self.f64();
            if u1 > 0.0 {
                let u2 = self.f64();
                return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.usize_below(i + 1);
            xs.swap(i, j);
        }
    }

    pub(crate) fn inner_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn solve_ridge_identity() {
        // (I + I) X = I  =>  X = 0.5 I
        let a = Matrix::identity(3);
        let b = Matrix::identity(3);
        let x = solve_ridge(&a, &b, 1.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.5 } else { 0.0 };
                assert_relative_eq!(x.get(i, j), want, max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn solve_ridge_pure_ridge() {
        // A = 0, eta = 2: eta X = B.
        let a = Matrix::zeros(2, 2);
        let b = Matrix::from_vec(2, 1, vec![2.0, 4.0]).unwrap();
        let x = solve_ridge(&a, &b, 2.0).unwrap();
        assert_relative_eq!(x.get(0, 0), 1.0, max_relative = 1e-14);
        assert_relative_eq!(x.get(1, 0), 2.0, max_relative = 1e-14);
    }

    #[test]
    fn solve_ridge_random_spd_residual() {
        // Random SPD system; check the residual directly, which is the
        // contract, rather than comparing against another solver.
        let mut rng = Rng::new(7);
        let n = 8;
        let mut g = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                g.set(i, j, rng.normal());
            }
        }
        let a = g.matmul_transb(&g); // G G^T is SPD
        let mut b = Matrix::zeros(n, 3);
        for i in 0..n {
            for j in 0..3 {
                b.set(i, j, rng.normal());
            }
        }
        let eta = 0.1;
        let x = solve_ridge(&a, &b, eta).unwrap();
        // residual = (A + eta I) X - B
        let mut ax = a.matmul(&x);
        ax.add_assign_scaled(&x, eta);
        ax.add_assign_scaled(&b, -1.0);
        assert!(ax.max_abs() < 1e-8, "residual {}", ax.max_abs());
    }

    #[test]
    fn solve_ridge_large_eta_limit() {
        let mut rng = Rng::new(3);
        let n = 4;
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = rng.normal();
                a.set(i, j, v);
                a.set(j, i, v);
            }
        }
        let mut b = Matrix::zeros(n, 2);
        for v in b.data_mut() {
            *v = rng.normal();
        }
        let eta = 1e9;
        let x = solve_ridge(&a, &b, eta).unwrap();
        for i in 0..n {
            for j in 0..2 {
                assert_relative_eq!(x.get(i, j), b.get(i, j) / eta, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn solve_ridge_rejects_bad_shapes() {
        let a = Matrix::zeros(3, 2);
        let b = Matrix::zeros(3, 1);
        assert!(matches!(solve_ridge(&a, &b, 1.0), Err(Error::Dim { .. })));
        let a = Matrix::zeros(2, 2);
        let b = Matrix::from_vec(2, 1, vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(solve_ridge(&a, &b, 1.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn l2_normalize_basics() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert_relative_eq!(v[0], 0.6, max_relative = 1e-15);
        assert_relative_eq!(v[1], 0.8, max_relative = 1e-15);

        // Idempotence on an already-unit vector.
        let w = l2_normalize(&v).unwrap();
        assert_relative_eq!(w[0], v[0], max_relative = 1e-15);
        assert_relative_eq!(w[1], v[1], max_relative = 1e-15);

        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn l2_normalize_random_high_dim() {
        let mut rng = Rng::new(11);
        let v: Vec<f64> = (0..128).map(|_| rng.normal() * 10.0).collect();
        let u = l2_normalize(&v).unwrap();
        let norm: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // Scale invariance: normalize(c v) = normalize(v) for c > 0.
        let cv: Vec<f64> = v.iter().map(|x| 17.5 * x).collect();
        let ucv = l2_normalize(&cv).unwrap();
        for (a, b) in u.iter().zip(&ucv) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn logsumexp_matches_naive_and_survives_large_logits() {
        let xs: [f64; 3] = [1.0, 2.0, 3.0];
        let naive: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert_relative_eq!(logsumexp(&xs), naive, max_relative = 1e-14);
        // tau = 0.07 pushes logits to about +-14/0.07; no overflow allowed.
        let big = [1000.0, 999.0];
        assert_relative_eq!(logsumexp(&big), 1000.0 + (1.0 + (-1.0f64).exp()).ln(), max_relative = 1e-14);
    }

    #[test]
    fn rng_stream_is_seed_deterministic() {
        let mut a = Rng::new(99);
        let mut b = Rng::new(99);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        // Forks with the same tag agree, different tags do not.
        let mut f1 = Rng::new(99).fork(5);
        let mut f2 = Rng::new(99).fork(5);
        let mut f3 = Rng::new(99).fork(6);
        let x1 = f1.next_u64();
        assert_eq!(x1, f2.next_u64());
        assert_ne!(x1, f3.next_u64());
    }

    #[test]
    fn rng_uniform_and_normal_moments() {
        let mut rng = Rng::new(123);
        let n = 20000;
        let mean_u: f64 = (0..n).map(|_| rng.f64()).sum::<f64>() / n as f64;
        assert!((mean_u - 0.5).abs() < 0.01, "uniform mean {mean_u}");
        let (mut m, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            let x = rng.normal();
            m += x;
            m2 += x * x;
        }
        m /= n as f64;
        m2 /= n as f64;
        assert!(m.abs() < 0.03, "normal mean {m}");
        assert!((m2 - 1.0).abs() < 0.05, "normal second moment {m2}");
    }

    #[test]
    fn matmul_agrees_with_matmul_transb() {
        let mut rng = Rng::new(5);
        let mut a = Matrix::zeros(4, 6);
        let mut b = Matrix::zeros(3, 6);
        for v in a.data_mut() {
            *v = rng.normal();
        }
        for v in b.data_mut() {
            *v = rng.normal();
        }
        let direct = a.matmul_transb(&b);
        let via_t = a.matmul(&b.transpose());
        for i in 0..4 {
            for j in 0..3 {
                assert_relative_eq!(direct.get(i, j), via_t.get(i, j), max_relative = 1e-13);
            }
        }
    }
}
