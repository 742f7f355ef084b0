//! Finite-difference verification of tape gradients.

use serde::{Deserialize, Serialize};

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::matcore::{Matrix, Real};

/// Gradient entries smaller than this are compared in absolute terms.
pub const REL_FLOOR: Real = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub index: usize,
    pub entries: usize,
    /// `max |g − ĝ| / max(|g|, |ĝ|, REL_FLOOR)` over the entries.
    pub max_rel_err: Real,
    pub max_abs_err: Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: Real,
    pub tol: Real,
    pub passed: bool,
}

fn evaluate<F>(f: &F, params: &[Matrix], frozen: Option<&[Real]>) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut t = Tape::new();
    match frozen {
        Some(vals) => t.replay_frozen(vals.to_vec()),
        None => t.record_frozen(),
    }
    let vars: Vec<Var> = params.iter().map(|p| t.leaf(p.clone())).collect();
    let out = f(&mut t, &vars)?;
    if t.value(out).shape() != (1, 1) {
        return Err(Error::Usage(
            "grad_check needs a scalar-valued function".into(),
        ));
    }
    Ok((t, vars, out))
}

/// Compare tape gradients of `f` against central differences with step `h`.
///
/// Gradient-stopped scalars recorded by the unperturbed pass are replayed
/// in every perturbed pass, so the finite differences see the same
/// constants the backward sweep treats as fixed.
pub fn grad_check<F>(f: F, params: &[Matrix], h: Real, tol: Real) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(
            "finite-difference step must be positive".into(),
        ));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Domain("parameters must be finite".into()));
    }
    let (t, vars, out) = evaluate(&f, params, None)?;
    let base = t.value(out).get(0, 0);
    let frozen = t.frozen_values().to_vec();
    let (t2, _, out2) = evaluate(&f, params, None)?;
    if t2.value(out2).get(0, 0).to_bits() != base.to_bits()
        || t2.frozen_values() != frozen.as_slice()
    {
        return Err(Error::Usage("function is not deterministic".into()));
    }
    let grads = t.backward(out)?;

    let mut work: Vec<Matrix> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v)?;
        let (mut max_rel, mut max_abs): (Real, Real) = (0.0, 0.0);
        for e in 0..params[pi].as_slice().len() {
            let x0 = params[pi].as_slice()[e];
            work[pi].as_mut_slice()[e] = x0 + h;
            let fp = eval_value(&f, &work, &frozen)?;
            work[pi].as_mut_slice()[e] = x0 - h;
            let fm = eval_value(&f, &work, &frozen)?;
            work[pi].as_mut_slice()[e] = x0;
            let num = (fp - fm) / (2.0 * h);
            let an = analytic.as_slice()[e];
            let abs = (an - num).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / an.abs().max(num.abs()).max(REL_FLOOR));
        }
        checks.push(ParamCheck {
            index: pi,
            entries: params[pi].as_slice().len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, Real::max);
    Ok(GradCheckReport {
        params: checks,
        max_rel_err,
        tol,
        passed: max_rel_err <= tol,
    })
}

fn eval_value<F>(f: &F, params: &[Matrix], frozen: &[Real]) -> Result<Real>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (t, _, out) = evaluate(f, params, Some(frozen))?;
    Ok(t.value(out).get(0, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{gaussian_kernel, newton_pinv};
    use crate::pinv::NewtonConfig;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    fn rnd(r: usize, c: usize, std: Real, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::random_normal(r, c, std, &mut rng)
    }

    #[test]
    fn quadratic_is_exact() {
        let rep = grad_check(
            |t, p| {
                let sq = t.hadamard(p[0], p[0])?;
                t.sum(sq)
            },
            &[rnd(3, 4, 1.0, 1)],
            1e-4,
            1e-10,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn gaussian_block() {
        let r = rnd(7, 5, 1.0, 2);
        let rep = grad_check(
            |t, p| {
                let s = gaussian_kernel(t, p[0], p[1], 3)?;
                let w = t.constant(r.clone());
                let prod = t.hadamard(s, w)?;
                t.sum(prod)
            },
            &[rnd(7, 3, 0.7, 3), rnd(5, 3, 0.7, 4)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn newton_block() {
        let r = rnd(8, 8, 1.0, 5);
        let rep = grad_check(
            |t, p| {
                let a = gaussian_kernel(t, p[0], p[0], 4)?;
                let inv = newton_pinv(t, a, &NewtonConfig::with_iters(5))?;
                let w = t.constant(r.clone());
                let prod = t.hadamard(inv, w)?;
                t.sum(prod)
            },
            &[rnd(8, 4, 0.8, 6)],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn detects_nondeterminism() {
        let calls = Cell::new(0.0);
        let r = grad_check(
            |t, p| {
                calls.set(calls.get() + 1.0);
                let s = t.scalar_mul(p[0], calls.get())?;
                t.sum(s)
            },
            &[rnd(2, 2, 1.0, 7)],
            1e-5,
            1e-6,
        );
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn sum_of_losses_is_sum_of_gradients() {
        let x0 = rnd(5, 3, 1.0, 8);
        let w = rnd(3, 3, 1.0, 9);
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let wv = t.constant(w.clone());
            let y = t.matmul(x, wv).unwrap();
            let e = t.exp(y).unwrap();
            let l1 = t.sum(e).unwrap();
            let sq = t.hadamard(x, x).unwrap();
            let l2 = t.sum(sq).unwrap();
            let l = match which {
                0 => l1,
                1 => l2,
                _ => t.add(l1, l2).unwrap(),
            };
            t.backward(l).unwrap().wrt(x).unwrap()
        };
        let sum = grad_of(0).add(&grad_of(1)).unwrap();
        assert!(grad_of(2).max_abs_diff(&sum).unwrap() <= 1e-12 * sum.max_abs().max(1.0));
    }
}
