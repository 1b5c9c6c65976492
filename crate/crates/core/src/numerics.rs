// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense linear algebra and probability primitives.
//!
//! Everything here works in `f64`. Activations and checkpoints are stored
//! as `f32` on disk, but training, gradient checks, and metrics all run at
//! double precision. Logarithms are natural (results are in nats).

use crate::error::{LensError, Result};

/// Tolerance on `sum(p) == 1` for a 64-bit [`Distribution`].
pub const DIST_SUM_TOL: f64 = 1e-9;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Wraps row-major `data`, checking `rows * cols == data.len()` and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LensError::Empty("matrix"));
        }
        if rows * cols != data.len() {
            return Err(LensError::Dimension {
                what: "matrix storage",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        check_finite("matrix", &data)?;
        Ok(Self { rows, cols, data })
    }

    #[must_use]
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[must_use]
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[must_use]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[must_use]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major backing storage.
    #[must_use]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[must_use]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[must_use]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(LensError::Dimension {
                what: "matvec operand",
                expected: self.cols,
                actual: x.len(),
            });
        }
        Ok(self.data.chunks_exact(self.cols).map(|row| dot(row, x)).collect())
    }

    /// `selfᵀ · y`, without materializing the transpose.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(LensError::Dimension {
                what: "transposed matvec operand",
                expected: self.rows,
                actual: y.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.data.chunks_exact(self.cols).zip(y) {
            for (o, &r) in out.iter_mut().zip(row) {
                *o += r * yi;
            }
        }
        Ok(out)
    }

    /// Frobenius norm of `self - other`.
    #[must_use]
    pub fn frobenius_distance(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Inner product, summed in index order.
#[must_use]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
#[must_use]
pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn check_finite(what: &'static str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(LensError::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// Computes `m · h + b`.
///
/// ```
/// use tunedlens::numerics::{affine_apply, Matrix};
///
/// let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
/// let out = affine_apply(&m, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
/// assert_eq!(out, vec![4.0, 1.0]);
/// ```
pub fn affine_apply(m: &Matrix, b: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if b.len() != m.rows {
        return Err(LensError::Dimension {
            what: "affine bias",
            expected: m.rows,
            actual: b.len(),
        });
    }
    let mut out = m.matvec(h)?;
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
    Ok(out)
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    /// Validates that every entry lies in `[0, 1]` and the entries sum to one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(LensError::Empty("distribution"));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(LensError::InvalidDistribution(format!(
                    "entry {i} = {p} outside [0, 1]"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > DIST_SUM_TOL {
            return Err(LensError::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    #[must_use]
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[must_use]
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn max_finite(what: &'static str, logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(LensError::Empty(what));
    }
    check_finite(what, logits)?;
    Ok(logits.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Numerically stable softmax (max-subtracted).
///
/// ```
/// use tunedlens::numerics::softmax;
///
/// let p = softmax(&[1000.0, 0.0]).unwrap();
/// assert!((p.probs()[0] - 1.0).abs() < 1e-12);
/// ```
pub fn softmax(logits: &[f64]) -> Result<Distribution> {
    let max = max_finite("softmax logits", logits)?;
    let mut exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    for e in &mut exps {
        *e /= total;
    }
    Ok(Distribution(exps))
}

/// Log-softmax via log-sum-exp, never forming the small probabilities.
///
/// The partition sum is split as `1 + rest` around the (first) maximum and
/// evaluated with `ln_1p`, which keeps the dominant entry accurate to a few
/// ulps even when its log-probability is close to zero.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let max = max_finite("log_softmax logits", logits)?;
    let arg = logits.iter().position(|&z| z == max).expect("max is an element");
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, z)| (z - max).exp())
        .sum();
    let lse = rest.ln_1p();
    Ok(logits.iter().map(|z| (z - max) - lse).collect())
}

/// Forward KL divergence `KL(p ‖ softmax(q_logits))` in nats, with `0·log 0 = 0`.
///
/// Rounding can push the sum a hair below zero; such results are clamped to 0.
pub fn kl_divergence(p: &Distribution, q_logits: &[f64]) -> Result<f64> {
    if p.len() != q_logits.len() {
        return Err(LensError::Dimension {
            what: "kl_divergence logits",
            expected: p.len(),
            actual: q_logits.len(),
        });
    }
    let log_q = log_softmax(q_logits)?;
    let kl: f64 = p
        .probs()
        .iter()
        .zip(&log_q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, lq)| pi * (pi.ln() - lq))
        .sum();
    debug_assert!(kl >= -1e-9, "KL far below zero: {kl}");
    Ok(if kl < 0.0 { 0.0 } else { kl })
}

/// Shannon entropy in nats, with `0·log 0 = 0`.
#[must_use]
pub fn entropy(p: &Distribution) -> f64 {
    let h: f64 = -p
        .probs()
        .iter()
        .filter(|pi| **pi > 0.0)
        .map(|pi| pi * pi.ln())
        .sum::<f64>();
    if h <= 0.0 {
        0.0
    } else {
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn naive_affine(m: &[Vec<f64>], b: &[f64], h: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m.len()];
        for i in 0..m.len() {
            for j in 0..h.len() {
                out[i] += m[i][j] * h[j];
            }
            out[i] += b[i];
        }
        out
    }

    #[test]
    fn affine_identity_and_zero_map() {
        let out = affine_apply(&Matrix::identity(2), &[0.0, 0.0], &[3.0, -1.0]).unwrap();
        assert_eq!(out, vec![3.0, -1.0]);
        let out = affine_apply(&Matrix::zeros(2, 2), &[5.0, 5.0], &[17.0, -3.5]).unwrap();
        assert_eq!(out, vec![5.0, 5.0]);
    }

    #[test]
    fn affine_hand_example_matches_naive_oracle() {
        let rows = vec![vec![1.0, 2.0], vec![0.0, 1.0]];
        let expected = naive_affine(&rows, &[1.0, 0.0], &[1.0, 1.0]);
        assert_eq!(expected, vec![4.0, 1.0]);
        let m = Matrix::from_vec(2, 2, rows.concat()).unwrap();
        assert_eq!(affine_apply(&m, &[1.0, 0.0], &[1.0, 1.0]).unwrap(), expected);
    }

    #[test]
    fn affine_dimension_errors_name_sizes() {
        let m = Matrix::identity(3);
        let err = affine_apply(&m, &[0.0; 3], &[1.0, 2.0]).unwrap_err();
        assert!(matches!(
            err,
            LensError::Dimension {
                expected: 3,
                actual: 2,
                ..
            }
        ));
        let err = affine_apply(&m, &[0.0; 2], &[1.0; 3]).unwrap_err();
        assert!(err.to_string().contains("expected 3, got 2"));
    }

    #[test]
    fn matrix_rejects_bad_storage() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0; 4]).unwrap();
        for &x in p.probs() {
            assert!((x - 0.25).abs() < 1e-15);
        }
        for c in [0.0, -3.0, 1e4] {
            let p = softmax(&[c, c + LN_2]).unwrap();
            assert!((p.probs()[0] - 1.0 / 3.0).abs() < 1e-12, "c = {c}");
            assert!((p.probs()[1] - 2.0 / 3.0).abs() < 1e-12, "c = {c}");
        }
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.probs().iter().all(|x| x.is_finite()));
        assert!((p.probs()[0] - 1.0).abs() < 1e-15);
        assert!(p.probs()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[0.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
        assert!(log_softmax(&[f64::NEG_INFINITY, 0.0]).is_err());
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn log_softmax_examples() {
        let l = log_softmax(&[0.0, 0.0]).unwrap();
        assert!((l[0] + LN_2).abs() < 1e-15 && (l[1] + LN_2).abs() < 1e-15);
        let l = log_softmax(&[1000.0, 0.0]).unwrap();
        assert!(l[0].abs() < 1e-15);
        assert!((l[1] + 1000.0).abs() < 1e-12);
    }

    /// Error-free transformation: `a + b = s + e` exactly.
    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    /// Entry `i` of log-softmax as `-ln1p(Σ_{j≠i} exp(x_j − x_i))`, with the
    /// sum carried in double-double precision. Independent of the
    /// max-shift used by the implementation and O(n²).
    fn log_softmax_oracle(z: &[f64]) -> Vec<f64> {
        (0..z.len())
            .map(|i| {
                let (mut hi, mut lo) = (0.0f64, 0.0f64);
                for (j, &x) in z.iter().enumerate() {
                    if j != i {
                        let (s, e) = two_sum(hi, (x - z[i]).exp());
                        hi = s;
                        lo += e;
                    }
                }
                -(hi + lo).ln_1p()
            })
            .collect()
    }

    #[test]
    fn log_softmax_matches_high_precision_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let z: Vec<f64> = (0..8).map(|_| rng.random_range(-20.0..20.0)).collect();
            let got = log_softmax(&z).unwrap();
            let want = log_softmax_oracle(&z);
            for (g, w) in got.iter().zip(&want) {
                let rel = (g - w).abs() / w.abs().max(1e-300);
                assert!(rel < 1e-12, "got {g}, want {w}");
            }
        }
    }

    #[test]
    fn kl_examples() {
        let z = [0.3, -1.2, 2.0, 0.0];
        let p = softmax(&z).unwrap();
        assert!(kl_divergence(&p, &z).unwrap() < 1e-12);

        let p = Distribution::new(vec![1.0, 0.0]).unwrap();
        let kl = kl_divergence(&p, &[0.0, 0.0]).unwrap();
        assert!((kl - LN_2).abs() < 1e-12);

        let p = Distribution::new(vec![0.5, 0.5]).unwrap();
        let kl = kl_divergence(&p, &[0.9f64.ln(), 0.1f64.ln()]).unwrap();
        let direct = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - direct).abs() < 1e-12);
        assert!((kl - 0.510826).abs() < 1e-6);
    }

    #[test]
    fn kl_rejects_length_mismatch() {
        let p = Distribution::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(kl_divergence(&p, &[0.0; 3]), Err(LensError::Dimension { .. })));
    }

    #[test]
    fn entropy_examples() {
        let u = Distribution::new(vec![0.25; 4]).unwrap();
        assert!((entropy(&u) - 4f64.ln()).abs() < 1e-15);
        let one_hot = Distribution::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy(&one_hot), 0.0);
        let p = Distribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert!((entropy(&p) - 1.5 * LN_2).abs() < 1e-15);
        assert!((entropy(&p) - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn distribution_validation() {
        assert!(Distribution::new(vec![0.6, 0.6]).is_err());
        assert!(Distribution::new(vec![-0.1, 1.1]).is_err());
        assert!(Distribution::new(vec![f64::NAN, 1.0]).is_err());
        assert!(Distribution::new(vec![]).is_err());
    }

    #[test]
    fn kl_nonnegative_over_many_draws() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let n = rng.random_range(1..=32);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
            let p = softmax(&a).unwrap();
            assert!(kl_divergence(&p, &b).unwrap() >= 0.0);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(z in prop::collection::vec(-1e4f64..1e4, 1..64)) {
            let p = softmax(&z).unwrap();
            prop_assert!(Distribution::new(p.clone().into_inner()).is_ok());
        }

        #[test]
        fn exp_log_softmax_matches_softmax(z in prop::collection::vec(-50f64..50.0, 1..32)) {
            let p = softmax(&z).unwrap();
            let l = log_softmax(&z).unwrap();
            for (pi, li) in p.probs().iter().zip(&l) {
                prop_assert!((li.exp() - pi).abs() <= 1e-12 * pi.max(f64::MIN_POSITIVE));
            }
        }

        #[test]
        fn entropy_permutation_invariant_and_bounded(
            z in prop::collection::vec(-10f64..10.0, 2..32),
            rot in 0usize..32,
        ) {
            let p = softmax(&z).unwrap();
            let mut q = p.clone().into_inner();
            let k = rot % q.len();
            q.rotate_left(k);
            let last = q.len() - 1;
            q.swap(0, last);
            let h = entropy(&p);
            let hq = entropy(&Distribution::new(q).unwrap());
            prop_assert!((h - hq).abs() < 1e-12);
            prop_assert!(h >= 0.0 && h <= (z.len() as f64).ln() + 1e-9);
        }

        #[test]
        fn affine_matches_naive_oracle(
            d in 1usize..=64,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..d)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = Matrix::from_vec(d, d, rows.concat()).unwrap();
            let got = affine_apply(&m, &b, &h).unwrap();
            let want = naive_affine(&rows, &b, &h);
            for (g, w) in got.iter().zip(&want) {
                let scale: f64 = rows.iter().flatten().map(|x| x.abs()).sum::<f64>() + 1.0;
                prop_assert!((g - w).abs() <= 1e-12 * scale);
            }
        }
    }
}
