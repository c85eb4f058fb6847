//! Lowest eigenpairs of the generalized problem A Φ = λ M Φ by block inverse
//! power iteration with Rayleigh–Ritz extraction.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::geometry::Grid;
use crate::operators::{Field, SparseOperator};
use crate::solver::pcg;
use crate::Result;

/// Eigenvalues in ascending order with M-orthonormal eigenfields.
#[derive(Debug, Clone)]
pub struct SpectralResult {
    pub eigenvalues: Vec<f64>,
    pub modes: Vec<Field>,
    /// ‖AΦ − λMΦ‖₂ per pair.
    pub residuals: Vec<f64>,
    pub iterations: usize,
}

/// Computes the `count` lowest generalized eigenpairs. A must be SPD on the
/// interior dofs (Dirichlet-eliminated stiffness), M the lumped mass.
pub fn lowest_eigenpairs(
    grid: &Grid,
    a: &SparseOperator,
    m: &SparseOperator,
    count: usize,
    tol: f64,
) -> Result<SpectralResult> {
    if count == 0 || count > 12 {
        return Err(Error::InvalidParameter(format!(
            "eigenpair count must lie in 1..=12, got {count}"
        )));
    }
    let dim = a.dim();
    let block = (count + 2).min(dim);
    let m_diag = m.diagonal();
    let a_diag = a.diagonal();
    let inner_tol = (tol * 1e-2).max(1e-14);

    // Deterministic random start.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut basis: Vec<Vec<f64>> = (0..block)
        .map(|_| (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
        .collect();
    m_orthonormalize(&mut basis, &m_diag);

    let mut history = Vec::new();
    let max_outer = 500;
    for outer in 1..=max_outer {
        // Inverse iteration: X = A⁻¹ M V, column by column.
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(block);
        for v in &basis {
            let rhs: Vec<f64> = v.iter().zip(&m_diag).map(|(x, d)| x * d).collect();
            let mut x = v.clone();
            pcg(
                |p, out| a.matvec(p, out),
                &a_diag,
                &rhs,
                &mut x,
                inner_tol,
                10 * dim,
            )?;
            next.push(x);
        }
        m_orthonormalize(&mut next, &m_diag);

        // Rayleigh–Ritz in the block: T_ij = xᵢᵀ A xⱼ.
        let mut t = DMatrix::zeros(block, block);
        let mut ax: Vec<Vec<f64>> = Vec::with_capacity(block);
        for x in &next {
            let mut y = vec![0.0; dim];
            a.matvec(x, &mut y);
            ax.push(y);
        }
        for i in 0..block {
            for j in 0..=i {
                let val = crate::solver::dot(&next[i], &ax[j]);
                t[(i, j)] = val;
                t[(j, i)] = val;
            }
        }
        let eig = t.symmetric_eigen();
        let mut order: Vec<usize> = (0..block).collect();
        order.sort_by(|&p, &q| eig.eigenvalues[p].total_cmp(&eig.eigenvalues[q]));

        let mut rotated: Vec<Vec<f64>> = Vec::with_capacity(block);
        let mut values = Vec::with_capacity(block);
        for &col in &order {
            let mut xr = vec![0.0; dim];
            for (i, x) in next.iter().enumerate() {
                let c = eig.eigenvectors[(i, col)];
                for (k, xk) in x.iter().enumerate() {
                    xr[k] += c * xk;
                }
            }
            rotated.push(xr);
            values.push(eig.eigenvalues[col]);
        }

        // Residuals of the leading `count` pairs.
        let mut residuals = Vec::with_capacity(count);
        let mut converged = true;
        for i in 0..count {
            let mut r = vec![0.0; dim];
            a.matvec(&rotated[i], &mut r);
            for (k, rk) in r.iter_mut().enumerate() {
                *rk -= values[i] * m_diag[k] * rotated[i][k];
            }
            let res = crate::solver::norm(&r);
            residuals.push(res);
            if res > tol * values[i].abs() {
                converged = false;
            }
        }
        history.push(residuals.iter().fold(0.0f64, |a, &b| a.max(b)));
        basis = rotated;

        if converged {
            let mut modes = Vec::with_capacity(count);
            for x in basis.iter().take(count) {
                modes.push(fix_sign(Field::from_interior(grid, x)));
            }
            return Ok(SpectralResult {
                eigenvalues: values[..count].to_vec(),
                modes,
                residuals,
                iterations: outer,
            });
        }
    }
    let tail = history.split_off(history.len().saturating_sub(8));
    Err(Error::EigenDidNotConverge {
        iterations: max_outer,
        history: tail,
    })
}

/// Modified Gram–Schmidt in the M-inner product (M diagonal).
fn m_orthonormalize(vs: &mut [Vec<f64>], m_diag: &[f64]) {
    let inner = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .zip(m_diag)
            .map(|((x, y), d)| x * y * d)
            .sum()
    };
    for i in 0..vs.len() {
        for j in 0..i {
            let (before, after) = vs.split_at_mut(i);
            let c = inner(&before[j], &after[0]);
            for (k, v) in after[0].iter_mut().enumerate() {
                *v -= c * before[j][k];
            }
        }
        let norm = inner(&vs[i], &vs[i]).sqrt();
        if norm > 0.0 {
            for v in vs[i].iter_mut() {
                *v /= norm;
            }
        }
    }
}

/// Positive value at the vertex of maximum magnitude.
fn fix_sign(mut field: Field) -> Field {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &v in field.values() {
        if v.abs() > best {
            best = v.abs();
            sign = v.signum();
        }
    }
    if sign < 0.0 {
        for v in field.values_mut() {
            *v = -*v;
        }
    }
    field
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, canonical_domain};
    use crate::operators::{assemble_mass, assemble_stiffness};
    use crate::weights::WeightSpec;
    use approx::assert_relative_eq;

    fn solve(n: usize, spec: WeightSpec, count: usize) -> (Grid, SpectralResult) {
        let domain = canonical_domain(if spec.alpha > 0.0 { spec.alpha } else { 1.0 });
        let grid = build_grid(&domain, n).unwrap();
        let a = assemble_stiffness(&grid, &spec).unwrap();
        let m = assemble_mass(&grid);
        let result = lowest_eigenpairs(&grid, &a, &m, count, 1e-10).unwrap();
        (grid, result)
    }

    #[test]
    fn constant_mode_first_eigenvalue_second_order() {
        let target = std::f64::consts::PI * std::f64::consts::PI / 2.0;
        let mut errors = Vec::new();
        for n in [17usize, 33, 65] {
            let (_, res) = solve(n, WeightSpec::constant(), 1);
            errors.push((res.eigenvalues[0] - target).abs());
        }
        assert!(errors[2] / target < 0.01, "1% accuracy at n = 65");
        let order1 = (errors[0] / errors[1]).log2();
        let order2 = (errors[1] / errors[2]).log2();
        assert!((order1 - 2.0).abs() < 0.2, "observed order {order1}");
        assert!((order2 - 2.0).abs() < 0.2, "observed order {order2}");
    }

    #[test]
    fn degenerate_ground_state_gap_and_stability() {
        let (_, coarse) = solve(33, WeightSpec::degenerate(1.0), 2);
        let (_, fine) = solve(65, WeightSpec::degenerate(1.0), 2);
        assert!(coarse.eigenvalues[0] > 0.0);
        assert!(coarse.eigenvalues[1] > coarse.eigenvalues[0]);
        let drift =
            (fine.eigenvalues[0] - coarse.eigenvalues[0]).abs() / fine.eigenvalues[0];
        assert!(drift < 0.03, "ground eigenvalue drift {drift}");
    }

    #[test]
    fn rayleigh_quotient_consistency_and_orthonormality() {
        let (grid, res) = solve(33, WeightSpec::degenerate(1.0), 4);
        let domain = canonical_domain(1.0);
        let _ = domain;
        let a = assemble_stiffness(&grid, &WeightSpec::degenerate(1.0)).unwrap();
        let h2 = grid.h() * grid.h();
        for (i, mode) in res.modes.iter().enumerate() {
            let x = mode.interior(&grid);
            let rq = a.quadratic_form(&x) / (h2 * crate::solver::dot(&x, &x));
            assert_relative_eq!(rq, res.eigenvalues[i], max_relative = 1e-8);
            for (j, other) in res.modes.iter().enumerate() {
                let y = other.interior(&grid);
                let inner = h2 * crate::solver::dot(&x, &y);
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((inner - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ground_state_has_no_sign_change() {
        let (grid, res) = solve(33, WeightSpec::degenerate(1.5), 1);
        for (_, v, _, _) in grid.interior_iter() {
            assert!(res.modes[0].get(v) > 0.0, "Perron property violated");
        }
    }

    #[test]
    fn rejects_large_count() {
        let domain = canonical_domain(1.0);
        let grid = build_grid(&domain, 17).unwrap();
        let a = assemble_stiffness(&grid, &WeightSpec::constant()).unwrap();
        let m = assemble_mass(&grid);
        assert!(lowest_eigenpairs(&grid, &a, &m, 13, 1e-8).is_err());
    }
}
