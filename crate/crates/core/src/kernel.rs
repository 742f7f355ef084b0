//! Token sequences, projections and dense attention matrices.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::matcore::{Matrix, Real};

/// `n × d` token features laid out on an `grid_h × grid_w` spatial grid
/// (row-major, so token `t` sits at `(t / grid_w, t % grid_w)`).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    features: Matrix,
    grid_h: usize,
    grid_w: usize,
}

impl TokenSequence {
    pub fn new(features: Matrix, grid_h: usize, grid_w: usize) -> Result<Self> {
        if grid_h * grid_w != features.rows() {
            return Err(shape_err!(
                "grid {grid_h}x{grid_w} does not hold {} tokens",
                features.rows()
            ));
        }
        if features.cols() == 0 {
            return Err(shape_err!("tokens need at least one feature"));
        }
        Ok(TokenSequence {
            features,
            grid_h,
            grid_w,
        })
    }

    /// Tokens on an `n × 1` grid, for samplers that ignore geometry.
    pub fn flat(features: Matrix) -> Result<Self> {
        let n = features.rows();
        Self::new(features, n, 1)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn into_features(self) -> Matrix {
        self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }
}

/// Tied query/key projection plus value projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub w_qk: Matrix,
    pub w_v: Matrix,
}

impl ProjectionWeights {
    pub fn new(w_qk: Matrix, w_v: Matrix) -> Result<Self> {
        if w_qk.rows() != w_v.rows() {
            return Err(shape_err!(
                "projection input dims differ: {} vs {}",
                w_qk.rows(),
                w_v.rows()
            ));
        }
        Ok(ProjectionWeights { w_qk, w_v })
    }
}

/// Project tokens into the shared query/key space and the value space.
/// The first output serves as both `Q` and `K`.
pub fn project(x: &TokenSequence, w: &ProjectionWeights) -> Result<(TokenSequence, TokenSequence)> {
    let (h, wd) = x.grid();
    let q = x.features().matmul(&w.w_qk)?;
    let v = x.features().matmul(&w.w_v)?;
    Ok((TokenSequence::new(q, h, wd)?, TokenSequence::new(v, h, wd)?))
}

fn row_sq_norms(a: &Matrix) -> Vec<Real> {
    (0..a.rows())
        .map(|i| a.row(i).iter().map(|x| x * x).sum())
        .collect()
}

/// `D[i][j] = ‖a_i − b_j‖²`, via `‖a_i‖² + ‖b_j‖² − 2⟨a_i, b_j⟩` clamped at 0.
///
/// Passing the same matrix for both arguments selects the self-distance
/// path, which returns an exactly symmetric result with a zero diagonal.
pub fn pairwise_sq_dist(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(shape_err!(
            "pairwise distance between {}-d and {}-d points",
            a.cols(),
            b.cols()
        ));
    }
    if std::ptr::eq(a, b) {
        return Ok(self_sq_dist(a));
    }
    let na = row_sq_norms(a);
    let nb = row_sq_norms(b);
    let mut d = a.matmul_nt(b)?;
    for (i, &ni) in na.iter().enumerate() {
        for (dij, &nj) in d.row_mut(i).iter_mut().zip(&nb) {
            *dij = (ni + nj - 2.0 * *dij).max(0.0);
        }
    }
    Ok(d)
}

fn self_sq_dist(a: &Matrix) -> Matrix {
    let n = a.rows();
    let na = row_sq_norms(a);
    let mut d = a.matmul_nt(a).expect("a·aᵀ always conforms");
    for i in 0..n {
        d[(i, i)] = 0.0;
        for j in (i + 1)..n {
            let v = (na[i] + na[j] - 2.0 * d.get(i, j)).max(0.0);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Exponent scale of the Gaussian kernel: `−1 / (2√d_e)`.
pub fn gaussian_coeff(d_e: usize) -> Real {
    -1.0 / (2.0 * (d_e as Real).sqrt())
}

/// `S[i][j] = exp(−‖q_i − k_j‖² / (2√d_e))`.
///
/// `d_e` sets the kernel width; it normally equals the feature count of `q`.
/// When `q` and `k` are the same matrix the result is exactly symmetric with
/// a unit diagonal.
pub fn gaussian_attention_matrix(q: &Matrix, k: &Matrix, d_e: usize) -> Result<Matrix> {
    if d_e == 0 {
        return Err(domain_err!("kernel width d_e must be positive"));
    }
    let coeff = gaussian_coeff(d_e);
    let mut s = pairwise_sq_dist(q, k)?;
    s.map_inplace(|x| (x * coeff).exp());
    Ok(s)
}

/// Row-wise softmax of `q·kᵀ / √d_e`.
pub fn softmax_attention_matrix(q: &Matrix, k: &Matrix, d_e: usize) -> Result<Matrix> {
    if d_e == 0 {
        return Err(domain_err!("scale dimension d_e must be positive"));
    }
    if q.cols() != k.cols() {
        return Err(shape_err!("query dim {} vs key dim {}", q.cols(), k.cols()));
    }
    let inv = 1.0 / (d_e as Real).sqrt();
    let mut s = q.matmul_nt(k)?;
    for i in 0..s.rows() {
        softmax_row(s.row_mut(i), inv);
    }
    Ok(s)
}

fn softmax_row(row: &mut [Real], scale: Real) {
    let max = row
        .iter()
        .fold(Real::NEG_INFINITY, |m, &x| m.max(x * scale));
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x * scale - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Which attention matrix an exact (quadratic) mechanism uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExactKernel {
    Gaussian,
    Softmax,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[Real]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = TokenSequence::new(Matrix::random_normal(6, 3, 1.0, &mut rng), 2, 3).unwrap();
        let w = ProjectionWeights::new(Matrix::identity(3), Matrix::identity(3)).unwrap();
        let (q, v) = project(&x, &w).unwrap();
        assert_eq!(q, x);
        assert_eq!(v, x);
    }

    #[test]
    fn zero_tokens_project_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = TokenSequence::new(Matrix::zeros(4, 3), 2, 2).unwrap();
        let w = ProjectionWeights::new(
            Matrix::random_normal(3, 5, 1.0, &mut rng),
            Matrix::random_normal(3, 5, 1.0, &mut rng),
        )
        .unwrap();
        let (q, v) = project(&x, &w).unwrap();
        assert_eq!(q.features(), &Matrix::zeros(4, 5));
        assert_eq!(v.features(), &Matrix::zeros(4, 5));
    }

    #[test]
    fn projection_matches_separate_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xm = Matrix::random_normal(8, 4, 1.0, &mut rng);
        let w = ProjectionWeights::new(
            Matrix::random_normal(4, 6, 1.0, &mut rng),
            Matrix::random_normal(4, 6, 1.0, &mut rng),
        )
        .unwrap();
        let x = TokenSequence::new(xm.clone(), 4, 2).unwrap();
        let (q, v) = project(&x, &w).unwrap();
        assert_eq!(q.features(), &xm.matmul(&w.w_qk).unwrap());
        assert_eq!(v.features(), &xm.matmul(&w.w_v).unwrap());
        assert_eq!(q.grid(), (4, 2));
        let bad = ProjectionWeights::new(Matrix::zeros(5, 6), Matrix::zeros(5, 6)).unwrap();
        assert!(project(&x, &bad).is_err());
    }

    #[test]
    fn token_sequence_validates_grid() {
        assert!(TokenSequence::new(Matrix::zeros(6, 2), 2, 2).is_err());
        assert!(TokenSequence::new(Matrix::zeros(4, 0), 2, 2).is_err());
    }

    #[test]
    fn pairwise_small_cases() {
        let a = m(&[&[0.0], &[1.0]]);
        assert_eq!(
            pairwise_sq_dist(&a, &a).unwrap(),
            m(&[&[0.0, 1.0], &[1.0, 0.0]])
        );
        let r = m(&[&[1.5, -2.0]]);
        let r2 = r.clone();
        assert_eq!(pairwise_sq_dist(&r, &r2).unwrap(), m(&[&[0.0]]));
        assert!(pairwise_sq_dist(&a, &r).is_err());
    }

    #[test]
    fn pairwise_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Matrix::random_normal(6, 4, 1.0, &mut rng);
        let b = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let oracle = Matrix::from_fn(6, 3, |i, j| {
            (0..4).map(|k| (a[(i, k)] - b[(j, k)]).powi(2)).sum()
        });
        assert!(
            pairwise_sq_dist(&a, &b)
                .unwrap()
                .max_abs_diff(&oracle)
                .unwrap()
                <= 1e-10
        );
    }

    #[test]
    fn gaussian_small_cases() {
        let q = m(&[&[0.3, 0.1], &[0.3, 0.1]]);
        assert_eq!(
            gaussian_attention_matrix(&q, &q, 2).unwrap(),
            Matrix::filled(2, 2, 1.0)
        );

        let q = m(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let s = gaussian_attention_matrix(&q, &q, 4).unwrap();
        assert_eq!(s.diag(), vec![1.0, 1.0]);
        let e = (-1.0 as Real).exp();
        assert!((s[(0, 1)] - e).abs() < 1e-15 && (s[(0, 1)] - 0.367879).abs() < 1e-6);
        assert_eq!(s[(0, 1)], s[(1, 0)]);

        assert!(matches!(
            gaussian_attention_matrix(&q, &q, 0),
            Err(crate::Error::Domain(_))
        ));
    }

    #[test]
    fn softmax_small_cases() {
        let q = m(&[&[0.4, -1.0]]);
        assert_eq!(softmax_attention_matrix(&q, &q, 2).unwrap(), m(&[&[1.0]]));
        let q = Matrix::zeros(5, 3);
        let s = softmax_attention_matrix(&q, &q, 3).unwrap();
        assert!(s.as_slice().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        assert!(softmax_attention_matrix(&q, &q, 0).is_err());
    }

    #[test]
    fn softmax_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Matrix::random_normal(5, 8, 1.0, &mut rng);
        let s = softmax_attention_matrix(&q, &q, 8).unwrap();
        let oracle = Matrix::from_fn(5, 5, |i, j| {
            let logit = |a: usize, b: usize| {
                (0..8).map(|k| q[(a, k)] * q[(b, k)]).sum::<Real>() / (8.0 as Real).sqrt()
            };
            let z: Real = (0..5).map(|b| logit(i, b).exp()).sum();
            logit(i, j).exp() / z
        });
        assert!(s.max_abs_diff(&oracle).unwrap() <= 1e-12);
        for i in 0..5 {
            assert!((s.row(i).iter().sum::<Real>() - 1.0).abs() <= 1e-12);
        }
    }

    fn arb_tokens() -> impl Strategy<Value = Matrix> {
        (1usize..16, 1usize..6).prop_flat_map(|(n, d)| {
            proptest::collection::vec(-2.0..2.0 as Real, n * d)
                .prop_map(move |v| Matrix::new(n, d, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn gaussian_symmetric_unit_diag_in_range(q in arb_tokens()) {
            let s = gaussian_attention_matrix(&q, &q, q.cols()).unwrap();
            prop_assert_eq!(s.asymmetry(), 0.0);
            prop_assert!(s.diag().iter().all(|&x| x == 1.0));
            prop_assert!(s.as_slice().iter().all(|&x| x > 0.0 && x <= 1.0));
        }

        #[test]
        fn gaussian_translation_invariant(q in arb_tokens(), shift in -5.0..5.0 as Real) {
            let c: Vec<Real> = (0..q.cols()).map(|j| shift * (j as Real + 1.0)).collect();
            let moved = Matrix::from_fn(q.rows(), q.cols(), |i, j| q[(i, j)] + c[j]);
            let s0 = gaussian_attention_matrix(&q, &q, q.cols()).unwrap();
            let s1 = gaussian_attention_matrix(&moved, &moved, q.cols()).unwrap();
            prop_assert!(s0.max_abs_diff(&s1).unwrap() <= 1e-10);
        }
    }
}
