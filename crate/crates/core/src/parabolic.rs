//! Implicit-Euler time stepping for the forward controlled equation and the
//! time-reversed adjoint equation.
//!
//! Both directions step with the same operator M + Δt·A, so the discrete
//! backward map is the exact transpose of the discrete forward map and the
//! duality pairing ⟨forward(χ_ω z)(T), u_T⟩ = Δt Σ_n ‖χ_ω zⁿ‖² holds to
//! solver tolerance. Implicit Euler is used deliberately: the free evolution
//! is monotone in L² step by step, exactly, which the test suite leans on.

use crate::error::Error;
use crate::geometry::{Grid, Mask};
use crate::operators::{assemble_stiffness, Field, SparseOperator};
use crate::solver::pcg;
use crate::weights::WeightSpec;
use crate::{DomainSpec, Result};

/// Uniform partition of [0, T].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "time horizon must be positive, got {horizon}"
            )));
        }
        if steps < 8 {
            return Err(Error::InvalidParameter(format!(
                "time steps must be at least 8, got {steps}"
            )));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, level: usize) -> f64 {
        self.dt() * level as f64
    }
}

/// One field per time level, M+1 levels.
#[derive(Debug, Clone)]
pub struct TimeField {
    pub levels: Vec<Field>,
}

impl TimeField {
    pub fn zeros(grid: &Grid, tg: &TimeGrid) -> TimeField {
        TimeField {
            levels: vec![Field::zeros(grid); tg.steps + 1],
        }
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn is_zero(&self) -> bool {
        self.levels.iter().all(Field::is_zero)
    }
}

/// Everything a solve needs, bundled.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub domain: DomainSpec,
    pub grid: Grid,
    pub weight: WeightSpec,
    pub time: TimeGrid,
    pub solver_tol: f64,
}

impl ProblemSpec {
    pub fn new(
        domain: DomainSpec,
        grid: Grid,
        weight: WeightSpec,
        time: TimeGrid,
        solver_tol: f64,
    ) -> Result<Self> {
        domain.validate()?;
        weight.validate()?;
        if !(solver_tol > 0.0 && solver_tol < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "solver tolerance must lie in (0, 1), got {solver_tol}"
            )));
        }
        Ok(ProblemSpec {
            domain,
            grid,
            weight,
            time,
            solver_tol,
        })
    }

    /// L²(Ω) inner product of two fields (lumped mass).
    pub fn mass_inner(&self, a: &Field, b: &Field) -> f64 {
        let h2 = self.grid.h() * self.grid.h();
        let mut acc = 0.0;
        for (_, v, _, _) in self.grid.interior_iter() {
            acc += a.get(v) * b.get(v);
        }
        h2 * acc
    }

    pub fn mass_norm(&self, a: &Field) -> f64 {
        self.mass_inner(a, a).sqrt()
    }

    /// Discrete L²(Q) norm of a trajectory (trapezoid in time).
    pub fn space_time_norm(&self, tf: &TimeField) -> f64 {
        let dt = self.time.dt();
        let mut acc = 0.0;
        for (n, level) in tf.levels.iter().enumerate() {
            let w = if n == 0 || n == tf.levels.len() - 1 {
                0.5
            } else {
                1.0
            };
            acc += w * dt * self.mass_inner(level, level);
        }
        acc.sqrt()
    }
}

/// Pre-assembled implicit-Euler stepper for one ProblemSpec.
pub struct Stepper<'a> {
    p: &'a ProblemSpec,
    stiffness: SparseOperator,
    precond: Vec<f64>,
    h2: f64,
    dt: f64,
    max_iters: usize,
}

impl<'a> Stepper<'a> {
    pub fn new(p: &'a ProblemSpec) -> Result<Stepper<'a>> {
        let stiffness = assemble_stiffness(&p.grid, &p.weight)?;
        let h2 = p.grid.h() * p.grid.h();
        let dt = p.time.dt();
        let precond: Vec<f64> = stiffness.diagonal().iter().map(|d| h2 + dt * d).collect();
        let dim = stiffness.dim();
        Ok(Stepper {
            p,
            stiffness,
            precond,
            h2,
            dt,
            max_iters: 10 * dim,
        })
    }

    pub fn stiffness(&self) -> &SparseOperator {
        &self.stiffness
    }

    /// Solves (M + Δt A) x = M·rhs, warm-started at `x`.
    pub fn implicit_step(&self, rhs: &[f64], x: &mut [f64]) -> Result<()> {
        let b: Vec<f64> = rhs.iter().map(|r| self.h2 * r).collect();
        let apply = |v: &[f64], out: &mut [f64]| {
            self.stiffness.matvec(v, out);
            for i in 0..out.len() {
                out[i] = self.h2 * v[i] + self.dt * out[i];
            }
        };
        pcg(apply, &self.precond, &b, x, self.p.solver_tol, self.max_iters)?;
        Ok(())
    }
}

/// Runs the forward equation with a control supported on the mask:
/// (M + Δt A) φ^{n+1} = M(φⁿ + Δt·χ_ω f^{n+1}).
pub fn solve_forward(
    p: &ProblemSpec,
    forcing: Option<(&TimeField, &Mask)>,
    phi0: &Field,
) -> Result<TimeField> {
    let stepper = Stepper::new(p)?;
    let grid = &p.grid;
    let dt = p.time.dt();
    let mut levels = Vec::with_capacity(p.time.steps + 1);
    levels.push(phi0.clone());
    let mut current = phi0.interior(grid);
    let mut rhs = vec![0.0; current.len()];
    for n in 0..p.time.steps {
        rhs.copy_from_slice(&current);
        if let Some((f, mask)) = forcing {
            let f_next = &f.levels[n + 1];
            for (dof, v, _, _) in grid.interior_iter() {
                if mask.get(v) {
                    rhs[dof] += dt * f_next.get(v);
                }
            }
        }
        // Warm start from the previous level.
        stepper.implicit_step(&rhs, &mut current)?;
        levels.push(Field::from_interior(grid, &current));
    }
    Ok(TimeField { levels })
}

/// Runs the adjoint equation backwards from terminal data:
/// (M + Δt A) uⁿ = M(u^{n+1} − Δt·gⁿ), n = M−1, …, 0.
pub fn solve_backward(
    p: &ProblemSpec,
    source: Option<&TimeField>,
    u_terminal: &Field,
) -> Result<TimeField> {
    let stepper = Stepper::new(p)?;
    let grid = &p.grid;
    let dt = p.time.dt();
    let mut levels = vec![Field::zeros(grid); p.time.steps + 1];
    levels[p.time.steps] = u_terminal.clone();
    let mut current = u_terminal.interior(grid);
    let mut rhs = vec![0.0; current.len()];
    for n in (0..p.time.steps).rev() {
        rhs.copy_from_slice(&current);
        if let Some(g) = source {
            let g_here = &g.levels[n];
            for (dof, v, _, _) in grid.interior_iter() {
                rhs[dof] -= dt * g_here.get(v);
            }
        }
        stepper.implicit_step(&rhs, &mut current)?;
        levels[n] = Field::from_interior(grid, &current);
    }
    Ok(TimeField { levels })
}

/// One entry of the energy trace.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct EnergySample {
    pub t: f64,
    pub l2_sq: f64,
    pub weighted_h1_semi_sq: f64,
    /// Implicit-Euler energy-identity residual of the step ending here:
    /// ½‖φⁿ‖² − ½‖φ^{n−1}‖² + Δt(φⁿ)ᵀAφⁿ − Δt⟨χ_ω fⁿ, φⁿ⟩, which equals
    /// −½‖φⁿ − φ^{n−1}‖² exactly and is therefore never positive.
    pub step_residual: f64,
}

/// Per-level norms and per-step energy residuals of a trajectory.
pub fn energy_trace(
    p: &ProblemSpec,
    traj: &TimeField,
    forcing: Option<(&TimeField, &Mask)>,
) -> Result<Vec<EnergySample>> {
    let stiffness = assemble_stiffness(&p.grid, &p.weight)?;
    let dt = p.time.dt();
    let mut out = Vec::with_capacity(traj.levels.len());
    let mut prev_l2_sq = 0.0;
    for (n, level) in traj.levels.iter().enumerate() {
        let x = level.interior(&p.grid);
        let l2_sq = p.mass_inner(level, level);
        let h1_sq = stiffness.quadratic_form(&x);
        let step_residual = if n == 0 {
            0.0
        } else {
            let mut source_term = 0.0;
            if let Some((f, mask)) = forcing {
                source_term = p.mass_inner(&f.levels[n].masked(mask), level);
            }
            0.5 * l2_sq - 0.5 * prev_l2_sq + dt * h1_sq - dt * source_term
        };
        out.push(EnergySample {
            t: p.time.time(n),
            l2_sq,
            weighted_h1_semi_sq: h1_sq,
            step_residual,
        });
        prev_l2_sq = l2_sq;
    }
    Ok(out)
}
