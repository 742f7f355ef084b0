//! Cyclic Jacobi eigendecomposition for symmetric matrices.

use super::{require_symmetric, Matrix, Real};
use crate::error::Result;

const MAX_SWEEPS: usize = 100;
const OFF_DIAG_TOL: Real = 1e-12;

/// Eigenpairs of a symmetric matrix, eigenvalues ascending.
/// Column `i` of `vectors` pairs with `values[i]`.
#[derive(Debug, Clone)]
pub struct Eigh {
    pub values: Vec<Real>,
    pub vectors: Matrix,
    pub sweeps: usize,
}

impl Eigh {
    /// `V · diag(f(λ)) · Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(Real) -> Real) -> Matrix {
        let n = self.values.len();
        let scaled: Vec<Real> = self.values.iter().map(|&l| f(l)).collect();
        let v = &self.vectors;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for (k, &d) in scaled.iter().enumerate() {
                    s += v.get(i, k) * d * v.get(j, k);
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|l| l)
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps stop once the off-diagonal Frobenius mass drops below `1e-12`
/// relative to `‖a‖_F`, or after 100 sweeps. `tol` bounds the asymmetry
/// accepted on input (relative to `max(1, max|a_ij|)`).
pub fn jacobi_eigh(a: &Matrix, tol: Real) -> Result<Eigh> {
    require_symmetric(a, tol, "jacobi_eigh")?;
    let n = a.rows();
    // symmetrise so rotations act on an exactly symmetric matrix
    let mut w = Matrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut v = Matrix::identity(n);
    let scale = w.frobenius_norm();

    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        let off = off_diagonal_norm(&w);
        if off <= OFF_DIAG_TOL * scale || off == 0.0 {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (w.get(q, q) - w.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut w, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w.get(i, i).total_cmp(&w.get(j, j)));
    let values = order.iter().map(|&i| w.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok(Eigh {
        values,
        vectors,
        sweeps,
    })
}

fn off_diagonal_norm(w: &Matrix) -> Real {
    let n = w.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += w.get(i, j) * w.get(i, j);
            }
        }
    }
    s.sqrt()
}

/// `w ← Jᵀ w J`, `v ← v J` for the rotation zeroing `w[p][q]`.
fn rotate(w: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: Real, s: Real) {
    let n = w.rows();
    for k in 0..n {
        let wkp = w.get(k, p);
        let wkq = w.get(k, q);
        w[(k, p)] = c * wkp - s * wkq;
        w[(k, q)] = s * wkp + c * wkq;
    }
    for k in 0..n {
        let wpk = w.get(p, k);
        let wqk = w.get(q, k);
        w[(p, k)] = c * wpk - s * wqk;
        w[(q, k)] = s * wpk + c * wqk;
    }
    w[(p, q)] = 0.0;
    w[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}
