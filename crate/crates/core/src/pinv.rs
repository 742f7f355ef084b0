//! Moore-Penrose pseudoinverse of symmetric PSD matrices.
//!
//! [`newton_pinv`] runs the Newton-Raphson (Newton-Schulz) recurrence
//! `A_{k+1} = 2A_k − A_k·A·A_k` from `A_0 = α·A` for a fixed number of
//! steps. [`eigh_pinv`] is the eigendecomposition reference used to check it.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::matcore::{jacobi_eigh, norm, require_symmetric, Matrix, NormKind, Real};

/// Relative eigenvalue cut-off below which [`eigh_pinv`] treats an
/// eigenvalue as zero.
pub const DEFAULT_EIG_THRESHOLD: Real = 1e-10;

const SYMMETRY_TOL: Real = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRule {
    /// Smallest `n` with `‖I − A·2βⁿ/‖A‖₁²‖₁ < 1`, then `α = 2βⁿ/‖A‖₁²`.
    #[default]
    BetaSearch,
    /// `α = 2/‖A‖₁²` verbatim. Sits on the boundary of the convergence
    /// region when `‖A‖₁` equals the spectral radius (e.g. `I`).
    OneNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    pub max_iters: usize,
    pub beta: Real,
    pub alpha_search_cap: usize,
    pub norm_kind: NormKind,
    pub alpha_rule: AlphaRule,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            max_iters: 20,
            beta: 0.5,
            alpha_search_cap: 100,
            norm_kind: NormKind::Frobenius,
            alpha_rule: AlphaRule::BetaSearch,
        }
    }
}

impl NewtonConfig {
    pub fn with_iters(max_iters: usize) -> Self {
        NewtonConfig {
            max_iters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(domain_err!("max_iters must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(domain_err!("beta must lie in (0, 1), got {}", self.beta));
        }
        if self.norm_kind == NormKind::One || self.norm_kind == NormKind::Infinity {
            return Err(domain_err!(
                "convergence norm must be frobenius or spectral"
            ));
        }
        Ok(())
    }
}

/// Outcome of the step-size search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaInit {
    pub alpha: Real,
    pub exponent: usize,
    /// Whether the search inequality held for the returned exponent.
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinvReport {
    pub iterations_run: usize,
    /// `‖A·A_k·A − A‖ / ‖A‖` for `k = 0..=iterations_run`.
    pub residuals: Vec<Real>,
    pub alpha_used: Real,
    pub alpha_exponent: usize,
    /// False when no exponent up to the cap satisfied the search inequality.
    pub alpha_satisfied: bool,
    /// True when the exponent was raised to keep `‖I − A·A_0‖₁ < 1`.
    pub alpha_guarded: bool,
}

/// Step size for the Newton start `A_0 = α·A`.
///
/// Scans `n = 0..=cap` for the first exponent with
/// `‖I − A·(2βⁿ/‖A‖₁²)‖₁ < 1`. If none qualifies the exponent falls back to
/// 1, for which `α·λ_max² ≤ 2β < 2` always holds, and `satisfied` is false.
///
/// `α ↦ ‖I − αA‖₁` is convex and equals 1 at `α = 0`, so the inequality
/// holds for some `α > 0` exactly when every column is strictly diagonally
/// dominant. Without that the scan is skipped; otherwise rounding near
/// `α ≈ 1e-16` would report a spurious hit.
pub fn alpha_init(a: &Matrix, cfg: &NewtonConfig) -> Result<AlphaInit> {
    if !a.is_square() || a.is_empty() {
        return Err(domain_err!("alpha_init needs a non-empty square matrix"));
    }
    let one = norm(a, NormKind::One)?;
    if one == 0.0 {
        return Err(domain_err!("alpha_init on a zero matrix (‖A‖₁ = 0)"));
    }
    let base = 2.0 / (one * one);
    if cfg.alpha_rule == AlphaRule::OneNorm {
        return Ok(AlphaInit {
            alpha: base,
            exponent: 0,
            satisfied: true,
        });
    }
    let mut scale: Real = 1.0;
    let searchable = columns_dominant(a);
    for n in (0..=cfg.alpha_search_cap).take_while(|_| searchable) {
        let alpha = base * scale;
        if one_norm_of_i_minus(a, alpha) < 1.0 {
            return Ok(AlphaInit {
                alpha,
                exponent: n,
                satisfied: true,
            });
        }
        scale *= cfg.beta;
    }
    Ok(AlphaInit {
        alpha: base * cfg.beta,
        exponent: 1,
        satisfied: false,
    })
}

fn columns_dominant(a: &Matrix) -> bool {
    let n = a.rows();
    (0..n).all(|j| {
        let off: Real = (0..n).filter(|&i| i != j).map(|i| a.get(i, j).abs()).sum();
        off < a.get(j, j)
    })
}

/// `‖I − s·M‖₁`.
fn one_norm_of_i_minus(m: &Matrix, s: Real) -> Real {
    let n = m.rows();
    (0..n)
        .map(|j| {
            (0..n)
                .map(|i| {
                    let id = if i == j { 1.0 } else { 0.0 };
                    (id - s * m.get(i, j)).abs()
                })
                .sum::<Real>()
        })
        .fold(0.0, Real::max)
}

/// Slack demanded of `‖I − A·A_0‖₁` below 1. An error component at
/// `1 − δ` needs about `log₂(23/δ)` squarings to reach 1e-10, so `δ = 1e-3`
/// still fits in 20 steps. Without slack, `‖A‖₁ = λ_max` puts `α·λ_max²`
/// exactly on 2, where rounding decides whether the guard fires.
const GUARD_SLACK: Real = 1e-3;

/// Step size actually used by [`newton_pinv`]: the search result, raised to
/// exponent 1 when `n = 0` would leave `‖I − A·A_0‖₁ ≥ 1 − GUARD_SLACK`.
pub fn newton_start(a: &Matrix, cfg: &NewtonConfig) -> Result<(AlphaInit, bool)> {
    let init = alpha_init(a, cfg)?;
    if cfg.alpha_rule == AlphaRule::BetaSearch && init.exponent == 0 {
        let a2 = a.matmul(a)?;
        if one_norm_of_i_minus(&a2, init.alpha) >= 1.0 - GUARD_SLACK {
            let bumped = AlphaInit {
                alpha: init.alpha * cfg.beta,
                exponent: 1,
                satisfied: init.satisfied,
            };
            return Ok((bumped, true));
        }
    }
    Ok((init, false))
}

/// `‖A·A_k·A − A‖ / ‖A‖`, evaluated as `A·(A_k·A)`.
pub fn convergence_residual(a: &Matrix, a_k: &Matrix, kind: NormKind) -> Result<Real> {
    if !a.is_square() || a_k.shape() != a.shape() {
        return Err(shape_err!(
            "residual of {}x{} iterate against {}x{} matrix",
            a_k.rows(),
            a_k.cols(),
            a.rows(),
            a.cols()
        ));
    }
    residual_from_product(a, &a_k.matmul(a)?, kind, norm(a, kind)?)
}

/// Residual given `x = A_k·A` and `den = ‖A‖`.
fn residual_from_product(a: &Matrix, x: &Matrix, kind: NormKind, den: Real) -> Result<Real> {
    let mut r = a.clone();
    r.gemm_update(-1.0, a, x, 1.0)?;
    let num = norm(&r, kind)?;
    Ok(if den > 0.0 { num / den } else { num })
}

/// Newton-Raphson pseudoinverse, exactly `cfg.max_iters` steps.
pub fn newton_pinv(a: &Matrix, cfg: &NewtonConfig) -> Result<(Matrix, PinvReport)> {
    cfg.validate()?;
    require_symmetric(a, SYMMETRY_TOL, "newton_pinv")?;
    let (init, guarded) = newton_start(a, cfg)?;

    let den = norm(a, cfg.norm_kind)?;
    let mut a_k = a.scale(init.alpha);
    let mut residuals = Vec::with_capacity(cfg.max_iters + 1);
    for step in 0..cfg.max_iters {
        let x = a_k.matmul(a)?;
        residuals.push(residual_from_product(a, &x, cfg.norm_kind, den)?);
        let next = newton_step(&a_k, &x)?;
        if !next.is_finite() {
            return Err(Error::Numeric {
                step: step + 1,
                msg: "non-finite Newton iterate".into(),
            });
        }
        a_k = next;
    }
    let x = a_k.matmul(a)?;
    residuals.push(residual_from_product(a, &x, cfg.norm_kind, den)?);

    let report = PinvReport {
        iterations_run: cfg.max_iters,
        residuals,
        alpha_used: init.alpha,
        alpha_exponent: init.exponent,
        alpha_satisfied: init.satisfied,
        alpha_guarded: guarded,
    };
    Ok((a_k, report))
}

/// `2·A_k − (A_k·A)·A_k` given `x = A_k·A`.
pub(crate) fn newton_step(a_k: &Matrix, x: &Matrix) -> Result<Matrix> {
    let mut next = a_k.clone();
    next.gemm_update(-1.0, x, a_k, 2.0)?;
    Ok(next)
}

/// Pseudoinverse through the eigendecomposition `A = V·diag(λ)·Vᵀ`, keeping
/// eigenvalues above `eig_threshold · λ_max`.
pub fn eigh_pinv(a: &Matrix, eig_threshold: Real) -> Result<Matrix> {
    require_symmetric(a, SYMMETRY_TOL, "eigh_pinv")?;
    let eig = jacobi_eigh(a, SYMMETRY_TOL)?;
    let lmax = eig.values.iter().copied().fold(0.0, Real::max);
    let cut = eig_threshold * lmax;
    Ok(eig.reconstruct_with(|l| if l > cut && l > 0.0 { 1.0 / l } else { 0.0 }))
}

/// Relative Frobenius violations of the four Penrose conditions for a
/// candidate pseudoinverse `p` of `a`:
/// `[APA = A, PAP = P, (AP)ᵀ = AP, (PA)ᵀ = PA]`.
pub fn penrose_residuals(a: &Matrix, p: &Matrix) -> Result<[Real; 4]> {
    let ap = a.matmul(p)?;
    let pa = p.matmul(a)?;
    Ok([
        ap.matmul(a)?.rel_fro_err(a)?,
        pa.matmul(p)?.rel_fro_err(p)?,
        ap.transpose().rel_fro_err(&ap)?,
        pa.transpose().rel_fro_err(&pa)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::gaussian_attention_matrix;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_gram(m: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Matrix::random_normal(m, d, 1.0, &mut rng);
        gaussian_attention_matrix(&q, &q, d).unwrap()
    }

    #[test]
    fn alpha_for_identity() {
        // n = 0 gives α = 2 and ‖I − 2I‖₁ = 1, which is not < 1; n = 1 gives α = 1.
        let a = alpha_init(&Matrix::identity(5), &NewtonConfig::default()).unwrap();
        assert_eq!((a.exponent, a.alpha, a.satisfied), (1, 1.0, true));
    }

    #[test]
    fn alpha_for_scalar_two() {
        let a = Matrix::from_rows(&[[2.0]]).unwrap();
        let init = alpha_init(&a, &NewtonConfig::default()).unwrap();
        assert_eq!((init.exponent, init.alpha), (0, 0.5));
    }

    #[test]
    fn alpha_rejects_zero_matrix() {
        let r = alpha_init(&Matrix::zeros(3, 3), &NewtonConfig::default());
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn alpha_falls_back_when_unsatisfiable() {
        // all-ones block: column sums 6 > 2, so ‖I − αJ‖₁ = 1 + 4α for small α
        let j = Matrix::filled(6, 6, 1.0);
        let init = alpha_init(&j, &NewtonConfig::default()).unwrap();
        assert!(!init.satisfied);
        assert_eq!(init.exponent, 1);
        let (p, _) = newton_pinv(&j, &NewtonConfig::default()).unwrap();
        assert!(p.max_abs_diff(&j.scale(1.0 / 36.0)).unwrap() < 1e-14);
    }

    #[test]
    fn alpha_on_gaussian_gram_converges() {
        let a = gaussian_gram(49, 32, 9);
        let cfg = NewtonConfig::default();
        let init = alpha_init(&a, &cfg).unwrap();
        assert!(init.satisfied);
        assert!(one_norm_of_i_minus(&a, init.alpha) < 1.0);
        let (_, rep) = newton_pinv(&a, &cfg).unwrap();
        assert!(*rep.residuals.last().unwrap() <= 1e-6);
    }

    #[test]
    fn alpha_scan_ignores_rounding_hits() {
        // this Gram has a column whose off-diagonal mass exceeds its unit diagonal
        let a = gaussian_gram(49, 32, 3);
        assert!(!columns_dominant(&a));
        let init = alpha_init(&a, &NewtonConfig::default()).unwrap();
        assert_eq!((init.exponent, init.satisfied), (1, false));
        let (_, rep) = newton_pinv(&a, &NewtonConfig::default()).unwrap();
        assert!(*rep.residuals.last().unwrap() <= 1e-10);
    }

    #[test]
    fn newton_on_identity() {
        let (p, rep) = newton_pinv(&Matrix::identity(7), &NewtonConfig::default()).unwrap();
        assert_eq!(p, Matrix::identity(7));
        assert!(*rep.residuals.last().unwrap() <= 1e-10);
        assert_eq!(rep.residuals.len(), rep.iterations_run + 1);
    }

    #[test]
    fn newton_on_diagonal() {
        let a = Matrix::from_diag(&[4.0, 1.0]);
        let (p, rep) = newton_pinv(&a, &NewtonConfig::default()).unwrap();
        assert!(rep.alpha_guarded);
        assert!(p.max_abs_diff(&Matrix::from_diag(&[0.25, 1.0])).unwrap() <= 1e-8);
    }

    #[test]
    fn newton_on_scalar_two_is_guarded() {
        let a = Matrix::from_rows(&[[2.0]]).unwrap();
        let (p, rep) = newton_pinv(&a, &NewtonConfig::default()).unwrap();
        assert!(rep.alpha_guarded);
        assert!((p[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn one_norm_rule_is_verbatim() {
        let cfg = NewtonConfig {
            alpha_rule: AlphaRule::OneNorm,
            ..NewtonConfig::default()
        };
        let a = gaussian_gram(8, 8, 2);
        let one = norm(&a, NormKind::One).unwrap();
        let (_, rep) = newton_pinv(&a, &cfg).unwrap();
        assert_eq!(rep.alpha_used, 2.0 / (one * one));
        assert!(!rep.alpha_guarded);
    }

    #[test]
    fn newton_on_rank_one_projector() {
        let u: Vec<Real> = [1.0, 2.0, -2.0, 0.5]
            .iter()
            .map(|x| x / 3.041_381_265_149_11)
            .collect();
        let a = Matrix::from_fn(4, 4, |i, j| u[i] * u[j]);
        let (p, _) = newton_pinv(&a, &NewtonConfig::default()).unwrap();
        assert!(p.max_abs_diff(&a).unwrap() <= 1e-6);
        for r in penrose_residuals(&a, &p).unwrap() {
            assert!(r <= 1e-6, "penrose residual {r}");
        }
    }

    #[test]
    fn newton_rejects_asymmetric() {
        let a = Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]).unwrap();
        assert!(matches!(
            newton_pinv(&a, &NewtonConfig::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn newton_reports_non_finite() {
        let a = Matrix::from_rows(&[[Real::INFINITY]]).unwrap();
        match newton_pinv(&a, &NewtonConfig::default()) {
            Err(Error::Numeric { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(NewtonConfig::with_iters(0).validate().is_err());
        let bad = NewtonConfig {
            beta: 1.0,
            ..NewtonConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn eigh_pinv_small_cases() {
        let p = eigh_pinv(&Matrix::from_diag(&[2.0, 0.0]), DEFAULT_EIG_THRESHOLD).unwrap();
        assert_eq!(p, Matrix::from_diag(&[0.5, 0.0]));
        let p = eigh_pinv(&Matrix::identity(6), DEFAULT_EIG_THRESHOLD).unwrap();
        assert!(p.max_abs_diff(&Matrix::identity(6)).unwrap() < 1e-15);
        let asym = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(eigh_pinv(&asym, 1e-10), Err(Error::Domain(_))));
    }

    #[test]
    fn eigh_pinv_penrose_on_gram() {
        let a = gaussian_gram(49, 32, 4);
        let p = eigh_pinv(&a, DEFAULT_EIG_THRESHOLD).unwrap();
        assert!(
            a.matmul(&p)
                .unwrap()
                .matmul(&a)
                .unwrap()
                .rel_fro_err(&a)
                .unwrap()
                <= 1e-8
        );
    }

    #[test]
    fn residual_small_cases() {
        let a = gaussian_gram(12, 8, 5);
        let p = eigh_pinv(&a, DEFAULT_EIG_THRESHOLD).unwrap();
        assert!(convergence_residual(&a, &p, NormKind::Frobenius).unwrap() <= 1e-8);
        let z = Matrix::zeros(12, 12);
        assert_eq!(
            convergence_residual(&a, &z, NormKind::Frobenius).unwrap(),
            1.0
        );
        assert_eq!(
            convergence_residual(&a, &z, NormKind::Spectral).unwrap(),
            1.0
        );
        assert!(convergence_residual(&a, &Matrix::zeros(3, 3), NormKind::Frobenius).is_err());
    }

    #[test]
    fn trace_head_matches_residual_of_alpha_a() {
        let a = gaussian_gram(16, 8, 6);
        let cfg = NewtonConfig::default();
        let (_, rep) = newton_pinv(&a, &cfg).unwrap();
        let r0 = convergence_residual(&a, &a.scale(rep.alpha_used), cfg.norm_kind).unwrap();
        assert_eq!(rep.residuals[0], r0);
    }

    #[test]
    fn trace_is_monotone_and_iterates_symmetric() {
        for (m, seed) in [(8, 1), (16, 2), (49, 3)] {
            let a = gaussian_gram(m, 32, seed);
            let cfg = NewtonConfig::default();
            let (init, _) = newton_start(&a, &cfg).unwrap();
            let mut a_k = a.scale(init.alpha);
            for _ in 0..cfg.max_iters {
                assert!(a_k.asymmetry() <= 1e-9 * a_k.max_abs().max(1.0));
                let x = a_k.matmul(&a).unwrap();
                a_k = newton_step(&a_k, &x).unwrap();
            }
            let (p, rep) = newton_pinv(&a, &cfg).unwrap();
            for w in rep.residuals.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", rep.residuals);
            }
            let oracle = eigh_pinv(&a, DEFAULT_EIG_THRESHOLD).unwrap();
            assert!(p.rel_fro_err(&oracle).unwrap() <= 1e-4);
            assert!(p.asymmetry() <= 1e-6);
        }
    }

    #[test]
    fn spectral_residual_is_monotone() {
        let a = gaussian_gram(20, 16, 12);
        let cfg = NewtonConfig {
            norm_kind: NormKind::Spectral,
            ..NewtonConfig::default()
        };
        let (_, rep) = newton_pinv(&a, &cfg).unwrap();
        for w in rep.residuals.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn oracle_scale_covariance() {
        let a = gaussian_gram(10, 6, 7);
        let p = eigh_pinv(&a, DEFAULT_EIG_THRESHOLD).unwrap();
        for c in [0.5, 3.0, 100.0] {
            let pc = eigh_pinv(&a.scale(c), DEFAULT_EIG_THRESHOLD).unwrap();
            assert!(pc.max_abs_diff(&p.scale(1.0 / c)).unwrap() <= 1e-9 * p.max_abs());
        }
    }

    #[test]
    fn report_serialises_with_named_fields() {
        let (_, rep) = newton_pinv(&Matrix::identity(2), &NewtonConfig::with_iters(2)).unwrap();
        let json = serde_json::to_value(&rep).unwrap();
        for key in [
            "iterations_run",
            "residuals",
            "alpha_used",
            "alpha_exponent",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }
}
