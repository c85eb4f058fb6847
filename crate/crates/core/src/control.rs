//! Observability-constant estimation and null-control synthesis.
//!
//! Both build on the composed discrete maps: the backward solve from terminal
//! data followed by the forward solve driven by the localized adjoint. Because
//! the backward stepping operator is the exact transpose of the forward one,
//! the composition Λ z_T = forward(χ_ω backward(z_T))(T) is symmetric positive
//! semidefinite in the mass inner product, which makes the penalized system
//! (Λ + βI) z_T = −φ̃(T) a plain SPD conjugate-gradient problem.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Error;
use crate::geometry::Mask;
use crate::operators::Field;
use crate::parabolic::{solve_backward, solve_forward, ProblemSpec, Stepper, TimeField};
use crate::sampling::random_smooth_field;
use crate::Result;

/// Regularization of the observability quotient denominator; pins the scale
/// when high-frequency terminal data barely registers on the control region.
pub const OBSERVABILITY_DELTA: f64 = 1e-10;

/// Synthesized control and its verification data.
#[derive(Debug, Clone)]
pub struct HumResult {
    pub terminal_adjoint: Field,
    /// Control on ω×(0,T); level j holds the adjoint at level j−1, level 0 is
    /// unused by the forward scheme and kept zero.
    pub control: TimeField,
    /// Trajectory recomputed by a fresh forward solve with the control.
    pub trajectory: TimeField,
    pub terminal_norm: f64,
    pub initial_norm: f64,
    pub cost: f64,
    /// Δt Σ ‖χ_ω zⁿ‖², the control energy.
    pub control_energy: f64,
    pub cg_iterations: usize,
    pub penalty: f64,
}

/// Observability-constant estimate with its iteration history.
#[derive(Debug, Clone)]
pub struct ObservabilityEstimate {
    pub constant: f64,
    pub extremal: Field,
    pub history: Vec<f64>,
    pub converged: bool,
    pub resolution: String,
    pub regularization: f64,
}

/// Summary form for reports.
#[derive(Debug, Clone, Serialize)]
pub struct ObservabilitySummary {
    pub constant: f64,
    pub iterations: usize,
    pub converged: bool,
    pub resolution: String,
    pub regularization: f64,
}

impl ObservabilityEstimate {
    pub fn summary(&self) -> ObservabilitySummary {
        ObservabilitySummary {
            constant: self.constant,
            iterations: self.history.len(),
            converged: self.converged,
            resolution: self.resolution.clone(),
            regularization: self.regularization,
        }
    }
}

/// Backward-then-localized-forward composition: Λ z_T plus the backward
/// trajectory it came from.
fn gramian_apply(p: &ProblemSpec, omega: &Mask, z_t: &Field) -> Result<(Field, TimeField)> {
    let z = solve_backward(p, None, z_t)?;
    let mut control = TimeField::zeros(&p.grid, &p.time);
    for j in 1..=p.time.steps {
        control.levels[j] = z.levels[j - 1].masked(omega);
    }
    let phi = solve_forward(p, Some((&control, omega)), &Field::zeros(&p.grid))?;
    Ok((phi.levels[p.time.steps].clone(), z))
}

/// Δt Σ_{n<M} ‖χ_ω zⁿ‖²_M.
fn observation_energy(p: &ProblemSpec, omega: &Mask, z: &TimeField) -> f64 {
    let dt = p.time.dt();
    let mut acc = 0.0;
    for n in 0..p.time.steps {
        let zn = z.levels[n].masked(omega);
        acc += dt * p.mass_inner(&zn, &zn);
    }
    acc
}

/// Free evolution over `steps` implicit-Euler steps (same Δt as the problem).
fn propagate_free(p: &ProblemSpec, start: &Field, steps: usize) -> Result<Field> {
    let stepper = Stepper::new(p)?;
    let mut current = start.interior(&p.grid);
    for _ in 0..steps {
        let rhs = current.clone();
        stepper.implicit_step(&rhs, &mut current)?;
    }
    Ok(Field::from_interior(&p.grid, &current))
}

/// Maximizes the regularized observability quotient
///   q(u_T) = ‖u(0)‖² / (Δt Σ ‖χ_ω uⁿ‖² + δ‖u_T‖²)
/// by power iteration on the pencil (S^{2M}, Λ + δI) with Rayleigh–Ritz
/// extraction in the grown Krylov subspace: each sweep applies the smoothing
/// map once and re-solves the small projected pencil, so no inverse of Λ + δI
/// is ever needed. The estimate rises monotonically toward the subspace
/// supremum; stagnation of the quotient is the convergence test.
pub fn observability_constant(
    p: &ProblemSpec,
    omega: &Mask,
    max_iters: usize,
    tol: f64,
) -> Result<ObservabilityEstimate> {
    let delta = OBSERVABILITY_DELTA;
    let grid = &p.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b5e);
    let mut candidate = random_smooth_field(grid, 3, &mut rng);
    let scale = p.mass_norm(&candidate);
    if scale == 0.0 {
        return Err(Error::ZeroField);
    }
    candidate = candidate.scale(1.0 / scale);

    let mut basis: Vec<Field> = Vec::new();
    let mut g_of: Vec<Field> = Vec::new();
    let mut l_of: Vec<Field> = Vec::new();
    let mut history: Vec<f64> = Vec::new();
    let mut best = candidate.clone();
    let mut q_prev = f64::NAN;
    let mut converged = false;

    for _ in 0..max_iters {
        // M-orthonormalize the candidate against the basis.
        let mut v = candidate.clone();
        for b in &basis {
            let c = p.mass_inner(&v, b);
            v = v.axpy(-c, b);
        }
        let norm = p.mass_norm(&v);
        if norm < 1e-12 {
            converged = true;
            break;
        }
        v = v.scale(1.0 / norm);

        let (lambda_v, z_v) = gramian_apply(p, omega, &v)?;
        let gv = propagate_free(p, &z_v.levels[0], p.time.steps)?;
        basis.push(v.clone());
        g_of.push(gv);
        l_of.push(lambda_v.axpy(delta, &v));

        // Projected pencil, symmetrized against solver noise.
        let m = basis.len();
        let mut gm = nalgebra::DMatrix::zeros(m, m);
        let mut lm = nalgebra::DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                gm[(i, j)] = p.mass_inner(&g_of[j], &basis[i]);
                lm[(i, j)] = p.mass_inner(&l_of[j], &basis[i]);
            }
        }
        let gm = (gm.clone() + gm.transpose()) * 0.5;
        let lm = (lm.clone() + lm.transpose()) * 0.5;
        let chol = nalgebra::Cholesky::new(lm).ok_or(Error::EigenDidNotConverge {
            iterations: history.len(),
            history: history.clone(),
        })?;
        let linv = chol.l().clone().try_inverse().ok_or(Error::EigenDidNotConverge {
            iterations: history.len(),
            history: history.clone(),
        })?;
        let reduced = &linv * gm * linv.transpose();
        let reduced = (reduced.clone() + reduced.transpose()) * 0.5;
        let eig = reduced.symmetric_eigen();
        let mut top = 0;
        for i in 1..m {
            if eig.eigenvalues[i] > eig.eigenvalues[top] {
                top = i;
            }
        }
        let q = eig.eigenvalues[top];
        // Back-substitute the Ritz vector: c = L⁻ᵀ y.
        let y = eig.eigenvectors.column(top).into_owned();
        let c = linv.transpose() * y;
        let mut x = Field::zeros(grid);
        for (i, b) in basis.iter().enumerate() {
            x = x.axpy(c[i], b);
        }
        let xnorm = p.mass_norm(&x);
        best = x.scale(1.0 / xnorm);
        history.push(q);
        if q_prev.is_finite() && (q - q_prev).abs() <= tol * q.abs() {
            converged = true;
            break;
        }
        q_prev = q;
        // Power step: expand along the smoothed candidate.
        candidate = g_of
            .iter()
            .zip(c.iter())
            .fold(Field::zeros(grid), |acc, (g, &ci)| acc.axpy(ci, g));
    }

    // Report the quotient achieved by the extremal datum itself.
    let z = solve_backward(p, None, &best)?;
    let num = p.mass_norm(&z.levels[0]).powi(2);
    let den = observation_energy(p, omega, &z) + delta * p.mass_norm(&best).powi(2);
    let constant = num / den;
    Ok(ObservabilityEstimate {
        constant,
        extremal: best,
        history,
        converged,
        resolution: format!("n={},M={}", grid.n(), p.time.steps),
        regularization: delta,
    })
}

/// Gradient of the penalized dual functional
///   J(z_T) = ½ Δt Σ ‖χ_ω zⁿ‖² + (β/2)‖z_T‖² + ⟨φ₀, z(0)⟩
/// with respect to the mass inner product: ∇J = φ(T) + β z_T where φ solves
/// the forward equation with control χ_ω z and initial data φ₀.
pub fn hum_gradient(
    p: &ProblemSpec,
    omega: &Mask,
    z_t: &Field,
    phi0: &Field,
    beta: f64,
) -> Result<Field> {
    if !(beta > 0.0) {
        return Err(Error::InvalidParameter("penalty must be positive".into()));
    }
    let z = solve_backward(p, None, z_t)?;
    let mut control = TimeField::zeros(&p.grid, &p.time);
    for j in 1..=p.time.steps {
        control.levels[j] = z.levels[j - 1].masked(omega);
    }
    let phi = solve_forward(p, Some((&control, omega)), phi0)?;
    Ok(phi.levels[p.time.steps].axpy(beta, z_t))
}

/// Value of the penalized dual functional.
pub fn hum_cost(
    p: &ProblemSpec,
    omega: &Mask,
    z_t: &Field,
    phi0: &Field,
    beta: f64,
) -> Result<f64> {
    let z = solve_backward(p, None, z_t)?;
    let energy = observation_energy(p, omega, &z);
    Ok(0.5 * energy + 0.5 * beta * p.mass_norm(z_t).powi(2) + p.mass_inner(phi0, &z.levels[0]))
}

/// Minimizes J by conjugate gradient on (Λ + βI) z_T = −φ̃(T), then recomputes
/// the controlled trajectory from scratch with the synthesized control.
pub fn hum_solve(
    p: &ProblemSpec,
    omega: &Mask,
    phi0: &Field,
    beta: f64,
    tol: f64,
) -> Result<HumResult> {
    if !(1e-8..=1e-1).contains(&beta) {
        return Err(Error::InvalidParameter(format!(
            "penalty must lie in [1e-8, 1e-1], got {beta}"
        )));
    }
    let grid = &p.grid;
    let free = solve_forward(p, None, phi0)?;
    let rhs = free.levels[p.time.steps].scale(-1.0);
    let rhs_norm = p.mass_norm(&rhs);

    let mut z_t = Field::zeros(grid);
    let mut iterations = 0;
    if rhs_norm > 0.0 {
        // CG in the mass inner product on the SPD operator Λ + βI.
        let mut r = rhs.clone();
        let mut dir = r.clone();
        let mut rr = p.mass_inner(&r, &r);
        let max_cg = 400;
        loop {
            if rr.sqrt() <= tol * rhs_norm {
                break;
            }
            if iterations >= max_cg {
                return Err(Error::CgDidNotConverge {
                    iterations,
                    relative_residual: rr.sqrt() / rhs_norm,
                    tolerance: tol,
                });
            }
            let (lam_dir, _) = gramian_apply(p, omega, &dir)?;
            let op_dir = lam_dir.axpy(beta, &dir);
            let alpha = rr / p.mass_inner(&dir, &op_dir);
            z_t = z_t.axpy(alpha, &dir);
            r = r.axpy(-alpha, &op_dir);
            let rr_new = p.mass_inner(&r, &r);
            dir = r.axpy(rr_new / rr, &dir);
            rr = rr_new;
            iterations += 1;
        }
    }

    let z = solve_backward(p, None, &z_t)?;
    let mut control = TimeField::zeros(grid, &p.time);
    for j in 1..=p.time.steps {
        control.levels[j] = z.levels[j - 1].masked(omega);
    }
    let trajectory = solve_forward(p, Some((&control, omega)), phi0)?;
    let control_energy = observation_energy(p, omega, &z);
    let cost = 0.5 * control_energy
        + 0.5 * beta * p.mass_norm(&z_t).powi(2)
        + p.mass_inner(phi0, &z.levels[0]);
    Ok(HumResult {
        terminal_adjoint: z_t,
        control,
        terminal_norm: p.mass_norm(&trajectory.levels[p.time.steps]),
        initial_norm: p.mass_norm(phi0),
        trajectory,
        cost,
        control_energy,
        cg_iterations: iterations,
        penalty: beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, canonical_domain, region_mask, Region};
    use crate::parabolic::TimeGrid;
    use crate::sampling::{centered_bump, random_interior_field};
    use crate::weights::WeightSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, m: usize, t: f64) -> (ProblemSpec, Mask) {
        let domain = canonical_domain(1.0);
        let grid = build_grid(&domain, n).unwrap();
        let omega = region_mask(&grid, &Region::Control(domain.clone())).unwrap();
        let p = ProblemSpec::new(
            domain,
            grid,
            WeightSpec::degenerate(1.0),
            TimeGrid::new(t, m).unwrap(),
            1e-11,
        )
        .unwrap();
        (p, omega)
    }

    #[test]
    fn gramian_symmetric_positive() {
        let (p, omega) = setup(17, 8, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..4 {
            let a = random_interior_field(&p.grid, &mut rng);
            let b = random_interior_field(&p.grid, &mut rng);
            let (la, _) = gramian_apply(&p, &omega, &a).unwrap();
            let (lb, _) = gramian_apply(&p, &omega, &b).unwrap();
            let ab = p.mass_inner(&la, &b);
            let ba = p.mass_inner(&lb, &a);
            let scale = ab.abs().max(ba.abs()).max(1e-30);
            assert!((ab - ba).abs() / scale < 1e-8, "asymmetry {ab} vs {ba}");
            assert!(p.mass_inner(&la, &a) >= -1e-12 * scale);
        }
    }

    #[test]
    fn gramian_quadratic_form_equals_observation_energy() {
        let (p, omega) = setup(17, 8, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let z_t = random_interior_field(&p.grid, &mut rng);
        let (lz, z) = gramian_apply(&p, &omega, &z_t).unwrap();
        let quad = p.mass_inner(&lz, &z_t);
        let energy = observation_energy(&p, &omega, &z);
        assert!((quad - energy).abs() <= 1e-9 * energy.max(1e-30));
    }

    #[test]
    fn gradient_zero_at_origin_without_data() {
        let (p, omega) = setup(17, 8, 0.5);
        let g = hum_gradient(&p, &omega, &Field::zeros(&p.grid), &Field::zeros(&p.grid), 1e-3)
            .unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn gradient_matches_directional_derivative() {
        let (p, omega) = setup(17, 8, 0.5);
        let phi0 = centered_bump(&p.grid, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let z_t = random_interior_field(&p.grid, &mut rng).scale(0.3);
        let beta = 1e-3;
        let grad = hum_gradient(&p, &omega, &z_t, &phi0, beta).unwrap();
        for _ in 0..5 {
            let d = random_interior_field(&p.grid, &mut rng);
            let eps = 1e-5;
            let jp = hum_cost(&p, &omega, &z_t.axpy(eps, &d), &phi0, beta).unwrap();
            let jm = hum_cost(&p, &omega, &z_t.axpy(-eps, &d), &phi0, beta).unwrap();
            let fd = (jp - jm) / (2.0 * eps);
            let predicted = p.mass_inner(&grad, &d);
            assert!(
                (fd - predicted).abs() <= 1e-6 * predicted.abs().max(1e-12),
                "fd {fd} vs predicted {predicted}"
            );
        }
    }

    #[test]
    fn gradient_affine_structure() {
        // ∇J(a z) − a ∇J(z) is independent of z (it is the affine φ₀ part).
        let (p, omega) = setup(17, 8, 0.5);
        let phi0 = centered_bump(&p.grid, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let z = random_interior_field(&p.grid, &mut rng);
        let beta = 1e-3;
        let g1 = hum_gradient(&p, &omega, &z, &phi0, beta).unwrap();
        let g2 = hum_gradient(&p, &omega, &z.scale(2.0), &phi0, beta).unwrap();
        let gz = hum_gradient(&p, &omega, &Field::zeros(&p.grid), &phi0, beta).unwrap();
        // g2 − 2 g1 = gz − 2 gz = −gz.
        let lhs = g2.axpy(-2.0, &g1);
        let diff = lhs.axpy(1.0, &gz);
        assert!(diff.max_abs() <= 1e-8 * gz.max_abs().max(1e-30));
    }

    #[test]
    fn hum_zero_initial_data() {
        let (p, omega) = setup(17, 8, 0.5);
        let res = hum_solve(&p, &omega, &Field::zeros(&p.grid), 1e-4, 1e-10).unwrap();
        assert_eq!(res.terminal_norm, 0.0);
        assert!(res.control.is_zero());
    }

    #[test]
    fn hum_rejects_bad_penalty() {
        let (p, omega) = setup(17, 8, 0.5);
        let phi0 = centered_bump(&p.grid, 0.5);
        assert!(hum_solve(&p, &omega, &phi0, 1e-9, 1e-8).is_err());
        assert!(hum_solve(&p, &omega, &phi0, 0.5, 1e-8).is_err());
    }

    #[test]
    fn control_beats_free_flow() {
        let (p, omega) = setup(33, 24, 1.0);
        let phi0 = centered_bump(&p.grid, 0.5);
        let free = solve_forward(&p, None, &phi0).unwrap();
        let free_terminal = p.mass_norm(&free.levels[p.time.steps]);
        let res = hum_solve(&p, &omega, &phi0, 1e-5, 1e-9).unwrap();
        assert!(free_terminal > 0.0);
        assert!(res.terminal_norm < free_terminal);
        // The control vanishes outside ω by construction.
        for level in &res.control.levels {
            for (_, v, _, _) in p.grid.interior_iter() {
                if !omega.get(v) {
                    assert_eq!(level.get(v), 0.0);
                }
            }
        }
    }

    #[test]
    fn observability_full_observation_bounded_by_inverse_horizon() {
        let (p, _) = setup(17, 16, 0.5);
        let omega = region_mask(&p.grid, &Region::All).unwrap();
        let est = observability_constant(&p, &omega, 16, 1e-6).unwrap();
        // Backward dissipativity makes the denominator at least T‖u(0)‖².
        assert!(est.constant <= 1.0 / p.time.horizon * (1.0 + 1e-9));
    }

    #[test]
    fn observability_monotone_under_shrinking_control_region() {
        let (p, omega) = setup(33, 16, 1.0);
        let mut small_domain = p.domain.clone();
        small_domain.control_radius *= 0.5;
        let omega_small = region_mask(&p.grid, &Region::Control(small_domain)).unwrap();
        let big = observability_constant(&p, &omega, 20, 1e-6).unwrap();
        let small = observability_constant(&p, &omega_small, 20, 1e-6).unwrap();
        assert!(small.constant >= big.constant * (1.0 - 1e-6));
    }

    #[test]
    fn observability_quotient_reproducible_from_extremal() {
        let (p, omega) = setup(17, 16, 0.5);
        let est = observability_constant(&p, &omega, 16, 1e-6).unwrap();
        let z = solve_backward(&p, None, &est.extremal).unwrap();
        let num = p.mass_norm(&z.levels[0]).powi(2);
        let den = observation_energy(&p, &omega, &z)
            + est.regularization * p.mass_norm(&est.extremal).powi(2);
        let q = num / den;
        assert!((q - est.constant).abs() <= 1e-6 * est.constant);
    }
}
