//! Preconditioned conjugate gradient on interior-dof vectors.

use crate::error::Error;
use crate::Result;

/// Outcome of a CG solve.
#[derive(Debug, Clone, Copy)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solves A x = b for SPD `apply` with Jacobi preconditioning.
///
/// `x` holds the initial guess on entry and the solution on success.
/// Convergence is declared at ‖r‖ ≤ tol·‖b‖; a zero right-hand side returns
/// the zero solution immediately.
pub fn pcg<F>(
    apply: F,
    diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iters: usize,
) -> Result<CgReport>
where
    F: Fn(&[f64], &mut [f64]),
{
    let dim = b.len();
    assert_eq!(diag.len(), dim);
    assert_eq!(x.len(), dim);
    let norm_b = norm(b);
    if norm_b == 0.0 {
        x.fill(0.0);
        return Ok(CgReport {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = vec![0.0; dim];
    let mut ax = vec![0.0; dim];
    apply(x, &mut ax);
    for i in 0..dim {
        r[i] = b[i] - ax[i];
    }
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut res = norm(&r) / norm_b;
    if res <= tol {
        return Ok(CgReport {
            iterations: 0,
            relative_residual: res,
        });
    }
    let mut ap = vec![0.0; dim];
    for iter in 1..=max_iters {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::CgDidNotConverge {
                iterations: iter,
                relative_residual: res,
                tolerance: tol,
            });
        }
        let alpha = rz / pap;
        for i in 0..dim {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = norm(&r) / norm_b;
        if res <= tol {
            return Ok(CgReport {
                iterations: iter,
                relative_residual: res,
            });
        }
        for i in 0..dim {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..dim {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::CgDidNotConverge {
        iterations: max_iters,
        relative_residual: res,
        tolerance: tol,
    })
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
