//! The auxiliary function η, the exponential weights Θ, ξ, σ built from it,
//! numerical verification of the conjugation decomposition, and the weighted
//! inequality ratios used by the observability estimates.
//!
//! η equals ψ_ε^{2−α}(|x|) (or |x|^{2−α} in the ε → 0 limit) on the ball
//! B_{2R} around the degeneracy and is extended outward by blending with a
//! scaled solution of the constant-coefficient Poisson problem sourced on the
//! observation ball, so its critical points sit inside the observation ball
//! and at the origin. The extension is an explicit, checkable stand-in for an
//! existence-only construction: the gradient floor over the region where it
//! must not vanish is measured numerically and the build fails loudly when it
//! is not met.
//!
//! All weight products ξᵖe^{−2sσ} span hundreds of orders of magnitude over
//! the time interval, so every integral here is accumulated in log space
//! (streaming log-sum-exp) and exponentiated only when representable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Error;
use crate::geometry::{build_grid, region_mask, DomainSpec, Grid, Mask, Region};
use crate::interp::{bicubic, bicubic_with_gradient};
use crate::operators::{assemble_stiffness, Field};
use crate::parabolic::{solve_backward, ProblemSpec, TimeField, TimeGrid};
use crate::quad::DiscRule;
use crate::sampling::random_smooth_field;
use crate::solver::pcg;
use crate::weights::{psi_eps, psi_radial_slope, WeightKind, WeightSpec};
use crate::Result;

const GRADIENT_FLOOR: f64 = 1e-3;
/// Safety factor applied when matching the Poisson extension to the closed
/// form at the blend band; values below the closed form there tend to create
/// spurious critical points on the far side of the origin.
const BLEND_MATCH_FACTOR: f64 = 1.5;

/// Quality metrics of one η construction.
#[derive(Debug, Clone, Serialize)]
pub struct EtaReport {
    pub min_interior: f64,
    pub boundary_max_abs: f64,
    /// c_η = min |∇η| (central differences) outside B_R ∪ observation ball.
    pub gradient_floor: f64,
    pub sup_norm: f64,
    /// Scale applied to the Poisson extension.
    pub scale: f64,
    /// Vertices (i, j) where the floor would be violated.
    pub offending: Vec<[usize; 2]>,
}

/// The auxiliary function: positive inside, zero on the boundary, closed-form
/// near the degeneracy, with a continuous C¹ evaluator everywhere.
#[derive(Debug, Clone)]
pub struct EtaFunction {
    grid: Grid,
    alpha: f64,
    /// Regularization scale; 0 selects the |x|^{2−α} limit.
    eps: f64,
    ball_radius: f64,
    /// Scaled Poisson extension γ·G on vertices.
    gee: Field,
    pub values: Field,
    pub grad: [Field; 2],
    /// True where the vertex value comes from the closed form.
    pub analytic: Vec<bool>,
    pub sup_norm: f64,
    pub report: EtaReport,
}

impl EtaFunction {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    fn closed_value(&self, r: f64) -> f64 {
        if self.eps == 0.0 {
            r.powf(2.0 - self.alpha)
        } else {
            psi_value_unchecked(r, self.eps).powf(2.0 - self.alpha)
        }
    }

    /// η′(r)/r for the closed form; finite at the origin when ε > 0.
    fn closed_slope(&self, r: f64) -> f64 {
        let a = self.alpha;
        if self.eps == 0.0 {
            if r == 0.0 {
                // The origin is a critical point in the limit construction.
                0.0
            } else {
                (2.0 - a) * r.powf(-a)
            }
        } else {
            let psi = psi_value_unchecked(r, self.eps);
            (2.0 - a) * psi.powf(1.0 - a) * psi_radial_slope(r, self.eps)
        }
    }

    /// Continuous evaluation at an arbitrary point of the closed square.
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        let r = x[0].hypot(x[1]);
        let r2 = 2.0 * self.ball_radius;
        if r <= r2 {
            return self.closed_value(r);
        }
        let chi = blend(r, self.ball_radius);
        if chi == 0.0 {
            bicubic(&self.gee, &self.grid, x)
        } else {
            chi * self.closed_value(r) + (1.0 - chi) * bicubic(&self.gee, &self.grid, x)
        }
    }

    /// Gradient of the continuous evaluator.
    pub fn grad_eval(&self, x: [f64; 2]) -> [f64; 2] {
        let r = x[0].hypot(x[1]);
        let r2 = 2.0 * self.ball_radius;
        if r <= r2 {
            let q = self.closed_slope(r);
            return [q * x[0], q * x[1]];
        }
        let (gv, gg) = bicubic_with_gradient(&self.gee, &self.grid, x);
        let chi = blend(r, self.ball_radius);
        if chi == 0.0 {
            return gg;
        }
        let dchi = blend_derivative(r, self.ball_radius);
        let q = self.closed_slope(r);
        let closed = self.closed_value(r);
        let unit = [x[0] / r, x[1] / r];
        [
            dchi * unit[0] * (closed - gv) + chi * q * x[0] + (1.0 - chi) * gg[0],
            dchi * unit[1] * (closed - gv) + chi * q * x[1] + (1.0 - chi) * gg[1],
        ]
    }

    /// w(x)·|∇η(x)|² with the near-origin products taken in closed form so
    /// no ∞·0 shows up for α ≥ 1 in the limit construction.
    pub fn diffusion_times_grad_sq(&self, x: [f64; 2], weight: &WeightSpec) -> f64 {
        let r = x[0].hypot(x[1]);
        let a = self.alpha;
        if r <= 2.0 * self.ball_radius {
            return match weight.kind {
                WeightKind::Degenerate => {
                    debug_assert_eq!(self.eps, 0.0);
                    (2.0 - a) * (2.0 - a) * r.powf(2.0 - a)
                }
                WeightKind::Regularized { epsilon } => {
                    let psi = psi_eps(r, epsilon).expect("validated epsilon");
                    let c = (2.0 - a) * psi.value.powf(1.0 - a) * psi.d1;
                    psi.value.powf(a) * c * c
                }
                WeightKind::Constant => {
                    let g = self.grad_eval(x);
                    g[0] * g[0] + g[1] * g[1]
                }
            };
        }
        let g = self.grad_eval(x);
        weight.value_at(x) * (g[0] * g[0] + g[1] * g[1])
    }
}

#[inline]
fn psi_value_unchecked(r: f64, eps: f64) -> f64 {
    let a = r.abs();
    if a >= eps {
        a
    } else {
        let r2 = r * r;
        0.375 * eps + 0.75 * r2 / eps - 0.125 * r2 * r2 / (eps * eps * eps)
    }
}

/// C² radial blend: 1 on r ≤ 2R, 0 on r ≥ 3R, quintic smoothstep between.
fn blend(r: f64, ball_radius: f64) -> f64 {
    let t = (r - 2.0 * ball_radius) / ball_radius;
    if t <= 0.0 {
        1.0
    } else if t >= 1.0 {
        0.0
    } else {
        1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    }
}

fn blend_derivative(r: f64, ball_radius: f64) -> f64 {
    let t = (r - 2.0 * ball_radius) / ball_radius;
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        -30.0 * t * t * (t - 1.0) * (t - 1.0) / ball_radius
    }
}

/// Builds η for the given regularization scale (`eps == 0` selects the
/// |x|^{2−α} limit used by the degenerate-coefficient estimates).
pub fn build_eta(grid: &Grid, spec: &DomainSpec, eps: f64) -> Result<EtaFunction> {
    spec.validate()?;
    let r_ball = spec.origin_ball_radius;
    if eps != 0.0 {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::InvalidWeight(format!(
                "epsilon must lie in (0, 1/2), got {eps}"
            )));
        }
        if eps >= r_ball {
            return Err(Error::InvalidParameter(format!(
                "regularization scale {eps} must stay below the origin ball radius {r_ball}"
            )));
        }
    }
    let alpha = spec.alpha;

    // Poisson extension: −ΔG = 1 on the observation ball, G = 0 on ∂Ω.
    let obs_ball = Region::Ball {
        center: spec.control_center,
        radius: 2.0 * r_ball,
    };
    let obs_mask = region_mask(grid, &obs_ball)?;
    let laplace = assemble_stiffness(grid, &WeightSpec::constant())?;
    let h2 = grid.h() * grid.h();
    let rhs: Vec<f64> = grid
        .interior_iter()
        .map(|(_, v, _, _)| if obs_mask.get(v) { h2 } else { 0.0 })
        .collect();
    let mut g = vec![0.0; grid.interior_count()];
    pcg(
        |x, y| laplace.matvec(x, y),
        &laplace.diagonal(),
        &rhs,
        &mut g,
        1e-12,
        10 * grid.interior_count(),
    )?;
    let g_field = Field::from_interior(grid, &g);

    // Scale so the extension sits above the closed form across the blend band.
    let mut band_min = f64::INFINITY;
    for (_, v, i, j) in grid.interior_iter() {
        let [x, y] = grid.coords(i, j);
        let r = x.hypot(y);
        if r >= 2.0 * r_ball && r <= 3.0 * r_ball {
            band_min = band_min.min(g_field.get(v));
        }
    }
    if !(band_min > 0.0) {
        return Err(Error::EtaConstruction {
            gradient_floor: 0.0,
            offending: 0,
        });
    }
    let closed_at_3r = if eps == 0.0 {
        (3.0 * r_ball).powf(2.0 - alpha)
    } else {
        psi_value_unchecked(3.0 * r_ball, eps).powf(2.0 - alpha)
    };
    let scale = BLEND_MATCH_FACTOR * closed_at_3r / band_min;
    let gee = g_field.scale(scale);

    let mut eta = EtaFunction {
        grid: grid.clone(),
        alpha,
        eps,
        ball_radius: r_ball,
        gee,
        values: Field::zeros(grid),
        grad: [Field::zeros(grid), Field::zeros(grid)],
        analytic: vec![false; grid.vertex_count()],
        sup_norm: 0.0,
        report: EtaReport {
            min_interior: f64::INFINITY,
            boundary_max_abs: 0.0,
            gradient_floor: f64::INFINITY,
            sup_norm: 0.0,
            scale,
            offending: Vec::new(),
        },
    };

    let mut values = Field::zeros(grid);
    let mut gx = Field::zeros(grid);
    let mut gy = Field::zeros(grid);
    let origin = grid.origin_index();
    for (_, v, i, j) in grid.interior_iter() {
        let p = grid.coords(i, j);
        let val = eta.eval(p);
        values.values_mut()[v] = val;
        let gr = eta.grad_eval(p);
        gx.values_mut()[v] = gr[0];
        gy.values_mut()[v] = gr[1];
        eta.analytic[v] = p[0].hypot(p[1]) <= 2.0 * r_ball;
        // The ε → 0 limit vanishes at the origin itself by construction;
        // positivity is required everywhere else.
        if !(eps == 0.0 && v == origin) {
            eta.report.min_interior = eta.report.min_interior.min(val);
        }
        eta.sup_norm = eta.sup_norm.max(val.abs());
    }
    eta.values = values;
    eta.grad = [gx, gy];
    eta.report.sup_norm = eta.sup_norm;

    // Gradient floor by central differences over Ω \ (B_R ∪ observation ball).
    let origin_ball = region_mask(
        grid,
        &Region::Ball {
            center: [0.0, 0.0],
            radius: r_ball,
        },
    )?;
    let h = grid.h();
    let mut floor = f64::INFINITY;
    let mut offending = Vec::new();
    for (_, v, i, j) in grid.interior_iter() {
        if origin_ball.get(v) || obs_mask.get(v) {
            continue;
        }
        let e = |ii: usize, jj: usize| eta.values.get(grid.index(ii, jj));
        let dx = (e(i + 1, j) - e(i - 1, j)) / (2.0 * h);
        let dy = (e(i, j + 1) - e(i, j - 1)) / (2.0 * h);
        let mag = dx.hypot(dy);
        if mag <= GRADIENT_FLOOR {
            offending.push([i, j]);
        }
        floor = floor.min(mag);
    }
    eta.report.gradient_floor = floor;
    eta.report.offending = offending;

    if eta.report.min_interior <= 0.0 || !eta.report.offending.is_empty() {
        return Err(Error::EtaConstruction {
            gradient_floor: floor,
            offending: eta.report.offending.len(),
        });
    }
    Ok(eta)
}

/// Exponential weight bundle: Θ(t) = 1/[t(T−t)]⁴, ξ = Θe^{λ(8‖η‖+η)},
/// σ = Θe^{10λ‖η‖} − ξ, with log-space product evaluators.
#[derive(Debug, Clone)]
pub struct CarlemanWeights {
    pub eta: EtaFunction,
    pub s: f64,
    pub lambda: f64,
    pub time: TimeGrid,
    /// e^{10λ‖η‖∞}.
    big: f64,
}

/// Largest exponent exp() can take without overflowing.
const EXP_OVERFLOW: f64 = 709.0;
/// Below this the product is flushed to an exact zero.
const EXP_UNDERFLOW: f64 = -745.0;

/// Validates the parameter box and the exponent range, then builds the
/// evaluators. `s == 0` is admitted as a degenerate test value (it removes
/// the conjugation); otherwise s ∈ [1, 8], λ ∈ [1, 3], T ∈ [1, 4], a box in
/// which the scan below keeps every product representable.
pub fn carleman_weights(
    eta: EtaFunction,
    s: f64,
    lambda: f64,
    time: TimeGrid,
) -> Result<CarlemanWeights> {
    let box_ok =
        (s == 0.0 || (1.0..=8.0).contains(&s)) && (1.0..=3.0).contains(&lambda);
    let t_ok = (1.0..=4.0).contains(&time.horizon);
    if !box_ok || !t_ok {
        return Err(Error::WeightOverflow(format!(
            "parameters outside the admitted box: s = {s}, lambda = {lambda}, T = {}",
            time.horizon
        )));
    }
    let big = (10.0 * lambda * eta.sup_norm).exp();
    if !big.is_finite() {
        return Err(Error::WeightOverflow(
            "e^{10λ‖η‖} is not representable".into(),
        ));
    }
    let cw = CarlemanWeights {
        eta,
        s,
        lambda,
        time,
        big,
    };
    // Exponent scan: the largest log-product over vertices × interior levels
    // must stay below the overflow threshold for p ≤ 3.
    let grid = cw.eta.grid().clone();
    let mut worst = f64::NEG_INFINITY;
    for level in 1..cw.time.steps {
        let t = cw.time.time(level);
        for (_, _, i, j) in grid.interior_iter() {
            let lw = cw.log_weight(3.0, grid.coords(i, j), t);
            worst = worst.max(lw);
        }
    }
    if worst >= EXP_OVERFLOW {
        return Err(Error::WeightOverflow(format!(
            "weight exponent reaches {worst:.1}"
        )));
    }
    Ok(cw)
}

impl CarlemanWeights {
    pub fn theta(&self, t: f64) -> f64 {
        let rho = t * (self.time.horizon - t);
        1.0 / (rho * rho * rho * rho)
    }

    pub fn theta_prime(&self, t: f64) -> f64 {
        let tt = self.time.horizon;
        let rho = t * (tt - t);
        -4.0 * (tt - 2.0 * t) / rho.powi(5)
    }

    fn theta_second(&self, t: f64) -> f64 {
        let tt = self.time.horizon;
        let rho = t * (tt - t);
        let drho = tt - 2.0 * t;
        20.0 * drho * drho / rho.powi(6) + 8.0 / rho.powi(5)
    }

    /// e^{λ(8‖η‖ + η(x))}.
    fn amplitude(&self, x: [f64; 2]) -> f64 {
        (self.lambda * (8.0 * self.eta.sup_norm + self.eta.eval(x))).exp()
    }

    pub fn xi(&self, x: [f64; 2], t: f64) -> f64 {
        self.theta(t) * self.amplitude(x)
    }

    pub fn log_xi(&self, x: [f64; 2], t: f64) -> f64 {
        let rho = t * (self.time.horizon - t);
        -4.0 * rho.ln() + self.lambda * (8.0 * self.eta.sup_norm + self.eta.eval(x))
    }

    /// σ = Θ(e^{10λ‖η‖} − e^{λ(8‖η‖+η)}) > 0 on (0, T).
    pub fn sigma(&self, x: [f64; 2], t: f64) -> f64 {
        self.theta(t) * (self.big - self.amplitude(x))
    }

    pub fn sigma_t(&self, x: [f64; 2], t: f64) -> f64 {
        self.theta_prime(t) * (self.big - self.amplitude(x))
    }

    pub fn sigma_tt(&self, x: [f64; 2], t: f64) -> f64 {
        self.theta_second(t) * (self.big - self.amplitude(x))
    }

    /// ∇σ = −λ ξ ∇η.
    pub fn grad_sigma(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        let xi = self.xi(x, t);
        let g = self.eta.grad_eval(x);
        [-self.lambda * xi * g[0], -self.lambda * xi * g[1]]
    }

    /// ∂ₜ∇σ = −λ Θ′ e^{λ(8‖η‖+η)} ∇η.
    pub fn grad_sigma_t(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        let c = self.theta_prime(t) * self.amplitude(x);
        let g = self.eta.grad_eval(x);
        [-self.lambda * c * g[0], -self.lambda * c * g[1]]
    }

    /// ln(ξᵖ e^{−2sσ}); −∞ at the time endpoints, where the product vanishes
    /// identically.
    pub fn log_weight(&self, p: f64, x: [f64; 2], t: f64) -> f64 {
        if t <= 0.0 || t >= self.time.horizon {
            return f64::NEG_INFINITY;
        }
        p * self.log_xi(x, t) - 2.0 * self.s * self.sigma(x, t)
    }

    /// ξᵖ e^{−2sσ} with underflow flushed to exact zero; overflow cannot
    /// occur inside the validated box and is reported as an error otherwise.
    pub fn weight(&self, p: f64, x: [f64; 2], t: f64) -> Result<f64> {
        let lw = self.log_weight(p, x, t);
        if lw <= EXP_UNDERFLOW {
            Ok(0.0)
        } else if lw >= EXP_OVERFLOW {
            Err(Error::WeightOverflow(format!(
                "exponent {lw:.1} at x = ({}, {}), t = {t}",
                x[0], x[1]
            )))
        } else {
            Ok(lw.exp())
        }
    }

    /// Minimum of σ over interior vertices × levels with t in [lo, hi];
    /// the usual shift that keeps conjugated quantities representable.
    pub fn min_sigma(&self, lo: f64, hi: f64) -> f64 {
        let grid = self.eta.grid().clone();
        let mut best = f64::INFINITY;
        for level in 1..self.time.steps {
            let t = self.time.time(level);
            if t < lo || t > hi {
                continue;
            }
            for (_, _, i, j) in grid.interior_iter() {
                best = best.min(self.sigma(grid.coords(i, j), t));
            }
        }
        best
    }
}

/// Streaming log-sum-exp accumulator with deterministic order.
#[derive(Debug, Clone, Copy)]
pub struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    pub fn new() -> Self {
        LogSum {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    pub fn push(&mut self, log_term: f64) {
        if log_term == f64::NEG_INFINITY {
            return;
        }
        if log_term > self.max {
            self.sum = self.sum * (self.max - log_term).exp() + 1.0;
            self.max = log_term;
        } else {
            self.sum += (log_term - self.max).exp();
        }
    }

    /// ln Σ exp(terms); −∞ when empty.
    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

impl Default for LogSum {
    fn default() -> Self {
        Self::new()
    }
}

/// Relative L² residual of the conjugation decomposition over the middle of
/// the time interval: both sides of
///   e^{−sσ}(∂ₜu + div(w_ε∇u)) = P₁v + P₂v,  v = e^{−sσ}u,
/// are evaluated by central differences and compared. A constant σ-shift is
/// applied to both sides so the conjugated quantities stay representable; the
/// identity is homogeneous under that shift.
pub fn decomposition_residual(
    p: &ProblemSpec,
    cw: &CarlemanWeights,
    u: &TimeField,
) -> Result<f64> {
    let eps = match p.weight.kind {
        WeightKind::Regularized { epsilon } => epsilon,
        _ => {
            return Err(Error::InvalidParameter(
                "decomposition residual requires the regularized coefficient".into(),
            ))
        }
    };
    if (cw.eta.eps() - eps).abs() > 1e-14 {
        return Err(Error::InvalidParameter(
            "weight bundle and problem use different regularization scales".into(),
        ));
    }
    let grid = &p.grid;
    let time = &p.time;
    let dt = time.dt();
    let h = grid.h();
    let tt = time.horizon;
    let n_lo = time.steps.div_ceil(4).max(1);
    let n_hi = (3 * time.steps / 4).min(time.steps - 1);
    let sigma0 = cw.min_sigma(time.time(n_lo.saturating_sub(1)), time.time(n_hi + 1));
    let _ = tt;

    // Shifted conjugation v = e^{−s(σ−σ₀)} u on the band plus one level of
    // margin for the centered time derivative.
    let nv = grid.vertex_count();
    let mut v_levels: Vec<Vec<f64>> = Vec::new();
    let mut expfac: Vec<Vec<f64>> = Vec::new();
    let lvl_lo = n_lo - 1;
    let lvl_hi = n_hi + 1;
    for n in lvl_lo..=lvl_hi {
        let t = time.time(n);
        let mut v = vec![0.0; nv];
        let mut e = vec![0.0; nv];
        for (_, vx, i, j) in grid.interior_iter() {
            let xpt = grid.coords(i, j);
            let fac = (-cw.s * (cw.sigma(xpt, t) - sigma0)).exp();
            e[vx] = fac;
            v[vx] = fac * u.levels[n].get(vx);
        }
        v_levels.push(v);
        expfac.push(e);
    }

    let stiffness = assemble_stiffness(grid, &p.weight)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for n in n_lo..=n_hi {
        let li = n - lvl_lo;
        let t = time.time(n);
        let v_here = &v_levels[li];
        let v_prev = &v_levels[li - 1];
        let v_next = &v_levels[li + 1];

        // −div(w∇·) through the pointwise stencil M⁻¹A.
        let inv_h2 = 1.0 / (h * h);
        let v_int: Vec<f64> = grid.interior_iter().map(|(_, vx, _, _)| v_here[vx]).collect();
        let mut av = vec![0.0; v_int.len()];
        stiffness.matvec(&v_int, &mut av);
        for a in av.iter_mut() {
            *a *= inv_h2;
        }
        let u_int = u.levels[n].interior(grid);
        let mut au = vec![0.0; u_int.len()];
        stiffness.matvec(&u_int, &mut au);
        for a in au.iter_mut() {
            *a *= inv_h2;
        }

        // Flux v·w·∇σ on vertices for the centered divergence.
        let mut flux = vec![[0.0; 2]; nv];
        for (_, vx, i, j) in grid.interior_iter() {
            let xpt = grid.coords(i, j);
            let gs = cw.grad_sigma(xpt, t);
            let w = p.weight.value_at(xpt);
            flux[vx] = [v_here[vx] * w * gs[0], v_here[vx] * w * gs[1]];
        }

        for (dof, vx, i, j) in grid.interior_iter() {
            let xpt = grid.coords(i, j);
            let w = p.weight.value_at(xpt);
            let gs = cw.grad_sigma(xpt, t);
            let st = cw.sigma_t(xpt, t);

            let vt = (v_next[vx] - v_prev[vx]) / (2.0 * dt);
            let idx = |ii: usize, jj: usize| grid.index(ii, jj);
            let gvx = (v_here[idx(i + 1, j)] - v_here[idx(i - 1, j)]) / (2.0 * h);
            let gvy = (v_here[idx(i, j + 1)] - v_here[idx(i, j - 1)]) / (2.0 * h);
            let div_flux = (flux[idx(i + 1, j)][0] - flux[idx(i - 1, j)][0]) / (2.0 * h)
                + (flux[idx(i, j + 1)][1] - flux[idx(i, j - 1)][1]) / (2.0 * h);

            let p1 = vt + cw.s * w * (gvx * gs[0] + gvy * gs[1]) + cw.s * div_flux;
            let p2 = -av[dof]
                + cw.s * st * v_here[vx]
                + cw.s * cw.s * v_here[vx] * w * (gs[0] * gs[0] + gs[1] * gs[1]);
            let lhs = p1 + p2;

            let ut = (u.levels[n + 1].get(vx) - u.levels[n - 1].get(vx)) / (2.0 * dt);
            let rhs = expfac[li][vx] * (ut - au[dof]);

            num += (lhs - rhs) * (lhs - rhs);
            den += rhs * rhs;
        }
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((num / den).sqrt())
}

/// One sample of the weighted-inequality ratio.
#[derive(Debug, Clone, Serialize)]
pub struct RatioSample {
    pub index: usize,
    pub log_lhs: f64,
    pub log_observation: f64,
    /// LHS divided by the observation term.
    pub ratio: f64,
    /// Log of the ε^{α−2}-scaled shrinking-ball term (regularized runs only).
    pub eps_term_log: Option<f64>,
}

/// Ratio statistics over a batch of random backward solutions.
#[derive(Debug, Clone, Serialize)]
pub struct RatioStats {
    pub s: f64,
    pub lambda: f64,
    pub samples: Vec<RatioSample>,
    pub max_ratio: f64,
}

/// For random terminal data solved backward with zero source, computes the
/// discrete left-hand side
///   sλ ∬ ξ w |∇u|² e^{−2sσ} + s³λ⁴ ∬ ξ³ u² (w|∇η|²)² e^{−2sσ}
/// and the observation term s³λ⁴ ∬_{ω×(0,T)} ξ³ u² e^{−2sσ}, entirely in log
/// space, and reports per-sample ratios. The paper-style constant is the
/// maximum ratio; only its finiteness and stability are asserted by callers,
/// never a specific value.
pub fn carleman_ratio(
    p: &ProblemSpec,
    cw: &CarlemanWeights,
    omega: &Mask,
    samples: usize,
    seed: u64,
) -> Result<RatioStats> {
    match (p.weight.kind, cw.eta.eps()) {
        (WeightKind::Degenerate, e) if e == 0.0 => {}
        (WeightKind::Regularized { epsilon }, e) if (e - epsilon).abs() < 1e-14 => {}
        _ => {
            return Err(Error::InvalidParameter(
                "weight bundle does not match the problem coefficient".into(),
            ))
        }
    }
    let grid = &p.grid;
    let time = &p.time;
    let h = grid.h();
    let measure_log = (h * h * time.dt()).ln();
    let s = cw.s;
    let lam = cw.lambda;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    let mut max_ratio = 0.0f64;

    for index in 0..samples {
        let u_t = random_smooth_field(grid, 4, &mut rng);
        let u = solve_backward(p, None, &u_t)?;
        if u.is_zero() {
            out.push(RatioSample {
                index,
                log_lhs: f64::NEG_INFINITY,
                log_observation: f64::NEG_INFINITY,
                ratio: 0.0,
                eps_term_log: None,
            });
            continue;
        }
        let mut lhs = LogSum::new();
        let mut obs = LogSum::new();
        for n in 1..time.steps {
            let t = time.time(n);
            let level = &u.levels[n];
            for (_, vx, i, j) in grid.interior_iter() {
                let xpt = grid.coords(i, j);
                let uv = level.get(vx);
                let idx = |ii: usize, jj: usize| grid.index(ii, jj);
                let gx = (level.get(idx(i + 1, j)) - level.get(idx(i - 1, j))) / (2.0 * h);
                let gy = (level.get(idx(i, j + 1)) - level.get(idx(i, j - 1))) / (2.0 * h);
                let grad_sq = gx * gx + gy * gy;
                let w = p.weight.value_at(xpt);
                if grad_sq > 0.0 && w > 0.0 {
                    lhs.push(
                        (s * lam).ln()
                            + cw.log_weight(1.0, xpt, t)
                            + (w * grad_sq).ln()
                            + measure_log,
                    );
                }
                let q = cw.eta.diffusion_times_grad_sq(xpt, &p.weight);
                if uv != 0.0 && q > 0.0 {
                    lhs.push(
                        (s * s * s * lam.powi(4)).ln()
                            + cw.log_weight(3.0, xpt, t)
                            + (uv * uv * q * q).ln()
                            + measure_log,
                    );
                }
                if omega.get(vx) && uv != 0.0 {
                    obs.push(
                        (s * s * s * lam.powi(4)).ln()
                            + cw.log_weight(3.0, xpt, t)
                            + (uv * uv).ln()
                            + measure_log,
                    );
                }
            }
        }
        let eps_term_log = match p.weight.kind {
            WeightKind::Regularized { epsilon } => {
                let ball = shrinking_ball_weight_integral(p, cw, &u, epsilon)?;
                Some(
                    (s * s * lam.powi(3)).ln()
                        + (p.domain.alpha - 2.0) * epsilon.ln()
                        + ball,
                )
            }
            _ => None,
        };
        let log_lhs = lhs.value();
        let log_observation = obs.value();
        let ratio = (log_lhs - log_observation).exp();
        max_ratio = max_ratio.max(ratio);
        out.push(RatioSample {
            index,
            log_lhs,
            log_observation,
            ratio,
            eps_term_log,
        });
    }
    Ok(RatioStats {
        s,
        lambda: lam,
        samples: out,
        max_ratio,
    })
}

/// ln ∬_{B_radius×(0,T)} ξ³ u² e^{−2sσ}, with the ball integral done by a
/// polar rule on interpolated fields so radii below the grid spacing still
/// scale with the true ball area.
pub fn shrinking_ball_weight_integral(
    p: &ProblemSpec,
    cw: &CarlemanWeights,
    u: &TimeField,
    radius: f64,
) -> Result<f64> {
    let rule = DiscRule::new(radius, 16, 24);
    let time = &p.time;
    let mut acc = LogSum::new();
    for n in 1..time.steps {
        let t = time.time(n);
        let level = &u.levels[n];
        for (pt, w) in &rule.points {
            let uv = bicubic(level, &p.grid, *pt);
            if uv == 0.0 {
                continue;
            }
            acc.push(cw.log_weight(3.0, *pt, t) + (uv * uv).ln() + (w * time.dt()).ln());
        }
    }
    Ok(acc.value())
}

/// Extremes of the stationary-band and global weight products.
#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    /// ln min over Ω×[T/4, 3T/4] of ξ e^{−2sσ}; finite means positive.
    pub band_min_log: f64,
    pub band_min: f64,
    /// ln max over Q of ξ³ e^{−2sσ}.
    pub global_max_log: f64,
    pub global_max: f64,
    pub argmax_time: f64,
    pub argmax_vertex: [usize; 2],
}

/// Scans the two §-style bound functions in log space: the band minimum of
/// ξe^{−2sσ} (positive) and the global maximum of ξ³e^{−2sσ} (finite).
pub fn section5_bounds(cw: &CarlemanWeights, grid: &Grid, time: &TimeGrid) -> BoundsReport {
    let mut band_min = f64::INFINITY;
    let mut global_max = f64::NEG_INFINITY;
    let mut argmax_time = 0.0;
    let mut argmax_vertex = [0usize, 0usize];
    let t_lo = time.horizon / 4.0;
    let t_hi = 3.0 * time.horizon / 4.0;
    for n in 1..time.steps {
        let t = time.time(n);
        for (_, _, i, j) in grid.interior_iter() {
            let xpt = grid.coords(i, j);
            if t >= t_lo && t <= t_hi {
                band_min = band_min.min(cw.log_weight(1.0, xpt, t));
            }
            let lw3 = cw.log_weight(3.0, xpt, t);
            if lw3 > global_max {
                global_max = lw3;
                argmax_time = t;
                argmax_vertex = [i, j];
            }
        }
    }
    BoundsReport {
        band_min_log: band_min,
        band_min: if band_min <= EXP_UNDERFLOW { 0.0 } else { band_min.exp() },
        global_max_log: global_max,
        global_max: if global_max <= EXP_UNDERFLOW {
            0.0
        } else {
            global_max.exp()
        },
        argmax_time,
        argmax_vertex,
    }
}

/// Convenience: builds grid, η, and weights for a domain at once.
pub fn weights_for(
    spec: &DomainSpec,
    n: usize,
    eps: f64,
    s: f64,
    lambda: f64,
    time: TimeGrid,
) -> Result<(Grid, CarlemanWeights)> {
    let grid = build_grid(spec, n)?;
    let eta = build_eta(&grid, spec, eps)?;
    let cw = carleman_weights(eta, s, lambda, time)?;
    Ok((grid, cw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::canonical_domain;
    use crate::sampling::random_interior_field;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn canonical_eta(n: usize, eps: f64) -> (Grid, EtaFunction) {
        let spec = canonical_domain(1.0);
        let grid = build_grid(&spec, n).unwrap();
        let eta = build_eta(&grid, &spec, eps).unwrap();
        (grid, eta)
    }

    #[test]
    fn eta_matches_closed_form_inside_ball() {
        let (grid, eta) = canonical_eta(65, 0.0);
        let alpha = 1.0;
        for (_, v, i, j) in grid.interior_iter() {
            let [x, y] = grid.coords(i, j);
            let r = x.hypot(y);
            if r <= 0.2 {
                assert_relative_eq!(
                    eta.values.get(v),
                    r.powf(2.0 - alpha),
                    epsilon = 1e-14
                );
                assert!(eta.analytic[v]);
            }
        }
    }

    #[test]
    fn eta_regularized_closed_form_outside_eps() {
        let (grid, eta) = canonical_eta(65, 0.05);
        for (_, v, i, j) in grid.interior_iter() {
            let [x, y] = grid.coords(i, j);
            let r = x.hypot(y);
            if r > 0.05 && r <= 0.2 {
                assert_relative_eq!(eta.values.get(v), r.powf(1.0), epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn eta_boundary_and_positivity() {
        let (grid, eta) = canonical_eta(33, 0.0);
        for j in 0..grid.n() {
            for i in 0..grid.n() {
                if !grid.is_interior(i, j) {
                    assert_eq!(eta.values.get(grid.index(i, j)), 0.0);
                }
            }
        }
        assert!(eta.report.min_interior > 0.0);
        assert!(eta.report.gradient_floor > GRADIENT_FLOOR);
    }

    #[test]
    fn weights_respect_parameter_box() {
        let (_, eta) = canonical_eta(17, 0.0);
        let time = TimeGrid::new(2.0, 16).unwrap();
        assert!(carleman_weights(eta.clone(), 0.5, 2.0, time).is_err());
        assert!(carleman_weights(eta.clone(), 2.0, 5.0, time).is_err());
        let bad_time = TimeGrid::new(8.0, 16).unwrap();
        assert!(carleman_weights(eta.clone(), 2.0, 2.0, bad_time).is_err());
        assert!(carleman_weights(eta, 2.0, 2.0, time).is_ok());
    }

    #[test]
    fn theta_midpoint_value() {
        let (_, eta) = canonical_eta(17, 0.0);
        let time = TimeGrid::new(2.0, 16).unwrap();
        let cw = carleman_weights(eta, 2.0, 2.0, time).unwrap();
        assert_relative_eq!(cw.theta(1.0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn sigma_positive_everywhere() {
        let (grid, eta) = canonical_eta(33, 0.0);
        let time = TimeGrid::new(2.0, 32).unwrap();
        let cw = carleman_weights(eta, 2.0, 2.0, time).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10_000 {
            let x = [
                (rng.random::<f64>() * 2.0 - 1.0) * 0.95,
                (rng.random::<f64>() * 2.0 - 1.0) * 0.95,
            ];
            let t = 1e-6 + rng.random::<f64>() * (2.0 - 2e-6);
            assert!(cw.sigma(x, t) > 0.0);
        }
        let _ = grid;
    }

    #[test]
    fn gradient_identities_match_finite_differences() {
        // ∇σ = −λξ∇η and ∂ₜ∇σ = −λΘ′e^{λ(8‖η‖+η)}∇η against centered
        // differences of σ and ∇σ. Sample points keep a margin from the
        // interpolation cell edges where the evaluator is only C¹.
        let (grid, eta) = canonical_eta(65, 0.0);
        let time = TimeGrid::new(2.0, 32).unwrap();
        let cw = carleman_weights(eta, 1.0, 1.0, time).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let h = grid.h();
        let step = 1e-4;
        let mut checked = 0;
        while checked < 1000 {
            let x = [
                (rng.random::<f64>() * 2.0 - 1.0) * 0.9,
                (rng.random::<f64>() * 2.0 - 1.0) * 0.9,
            ];
            let r = x[0].hypot(x[1]);
            // Stay away from the origin ball (critical point), from the
            // observation ball (interior critical point of the extension),
            // and from cell edges.
            if r < 0.11 {
                continue;
            }
            if (x[0] - 0.6).hypot(x[1]) < 0.25 {
                continue;
            }
            let fx = ((x[0] + 1.0) / h).fract();
            let fy = ((x[1] + 1.0) / h).fract();
            let margin = 3.0 * step / h;
            if fx < margin || fx > 1.0 - margin || fy < margin || fy > 1.0 - margin {
                continue;
            }
            let t = 0.5 + rng.random::<f64>();
            let gs = cw.grad_sigma(x, t);
            let mut fd = [0.0; 2];
            for axis in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[axis] += step;
                xm[axis] -= step;
                fd[axis] = (cw.sigma(xp, t) - cw.sigma(xm, t)) / (2.0 * step);
            }
            let err = (fd[0] - gs[0]).hypot(fd[1] - gs[1]);
            let scale = gs[0].hypot(gs[1]);
            assert!(err <= 1e-5 * scale, "grad sigma mismatch at {x:?}: {err} vs {scale}");

            let gst = cw.grad_sigma_t(x, t);
            let dt = 1e-5;
            let gp = cw.grad_sigma(x, t + dt);
            let gm = cw.grad_sigma(x, t - dt);
            let fdt = [(gp[0] - gm[0]) / (2.0 * dt), (gp[1] - gm[1]) / (2.0 * dt)];
            let errt = (fdt[0] - gst[0]).hypot(fdt[1] - gst[1]);
            let scalet = gst[0].hypot(gst[1]).max(1e-30);
            assert!(errt <= 1e-5 * scalet, "grad sigma_t mismatch at {x:?}");
            checked += 1;
        }
    }

    #[test]
    fn conjugated_data_vanishes_at_time_endpoints() {
        let (grid, eta) = canonical_eta(33, 0.0);
        let time = TimeGrid::new(2.0, 64).unwrap();
        let cw = carleman_weights(eta, 1.0, 1.0, time).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let u = random_interior_field(&grid, &mut rng);
        let max_u = u.max_abs();
        for &level in &[1usize, time.steps - 1] {
            let t = time.time(level);
            for (_, v, i, j) in grid.interior_iter() {
                let x = grid.coords(i, j);
                let vval = (-cw.s * cw.sigma(x, t)).exp() * u.get(v);
                assert!(vval.abs() <= 1e-30 * max_u);
            }
        }
    }

    #[test]
    fn time_weight_growth_is_lambda_uniform() {
        // Fitted constants in |σ_tt| ≤ Cξ^{3/2} and |ξξ_t| ≤ Cξ^{9/4} do not
        // grow with λ.
        let (grid, eta) = canonical_eta(33, 0.0);
        let time = TimeGrid::new(2.0, 64).unwrap();
        let mut fits = Vec::new();
        for lambda in [1.0, 2.0, 3.0] {
            let cw = carleman_weights(eta.clone(), 2.0, lambda, time).unwrap();
            let mut c_tt = 0.0f64;
            let mut c_xxt = 0.0f64;
            for n in 1..time.steps {
                let t = time.time(n);
                for (_, _, i, j) in grid.interior_iter() {
                    let x = grid.coords(i, j);
                    let xi = cw.xi(x, t);
                    let stt = cw.sigma_tt(x, t).abs();
                    let xit = cw.theta_prime(t) * cw.amplitude(x);
                    c_tt = c_tt.max(stt / xi.powf(1.5));
                    c_xxt = c_xxt.max((xi * xit).abs() / xi.powf(2.25));
                }
            }
            fits.push((c_tt, c_xxt));
        }
        for (c_tt, c_xxt) in &fits {
            assert!(c_tt.is_finite() && c_xxt.is_finite());
        }
        for w in fits.windows(2) {
            assert!(w[1].0 <= w[0].0 * 1.05, "σ_tt fit grows with λ: {fits:?}");
            assert!(w[1].1 <= w[0].1 * 1.05, "ξξ_t fit grows with λ: {fits:?}");
        }
    }

    #[test]
    fn section5_bound_functions() {
        let spec = canonical_domain(1.0);
        let time = TimeGrid::new(2.0, 32).unwrap();
        let (grid, cw) = weights_for(&spec, 33, 0.0, 2.0, 2.0, time).unwrap();
        let report = section5_bounds(&cw, &grid, &time);
        assert!(report.band_min_log.is_finite());
        assert!(report.global_max_log.is_finite());
        // Near the endpoints the cube-weight vanishes.
        let x = grid.coords(20, 20);
        assert_eq!(cw.weight(3.0, x, 1e-9).unwrap(), 0.0);
        assert_eq!(cw.weight(3.0, x, 0.0).unwrap(), 0.0);
        // The maximizer sits at an interior time near the middle.
        assert!(report.argmax_time > 0.25 * time.horizon);
        assert!(report.argmax_time < 0.75 * time.horizon);
    }
}
