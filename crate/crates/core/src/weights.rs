//! The degenerate coefficient |x|^α, its C² regularization ψ_ε^α, derivative
//! formulas, machine checks of the closed-form identities the regularization
//! satisfies, and Muckenhoupt-constant estimation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::quad::GaussLegendre;
use crate::Result;

/// Which coefficient family a computation runs with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightKind {
    /// w(x) = |x|^α, degenerate at the origin.
    Degenerate,
    /// w_ε(x) = ψ_ε(|x|)^α, uniformly elliptic.
    Regularized { epsilon: f64 },
    /// w ≡ 1. Test mode standing in for the α → 0 limit; turns the operator
    /// into the standard five-point Laplacian with known spectra.
    Constant,
}

/// Coefficient family plus exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub kind: WeightKind,
    pub alpha: f64,
}

impl WeightSpec {
    pub fn degenerate(alpha: f64) -> Self {
        WeightSpec {
            kind: WeightKind::Degenerate,
            alpha,
        }
    }

    pub fn regularized(alpha: f64, epsilon: f64) -> Self {
        WeightSpec {
            kind: WeightKind::Regularized { epsilon },
            alpha,
        }
    }

    pub fn constant() -> Self {
        WeightSpec {
            kind: WeightKind::Constant,
            alpha: 0.0,
        }
    }

    /// The approximating family uses ε = 1/k.
    pub fn regularized_k(alpha: f64, k: u32) -> Self {
        Self::regularized(alpha, 1.0 / k as f64)
    }

    pub fn epsilon(&self) -> Option<f64> {
        match self.kind {
            WeightKind::Regularized { epsilon } => Some(epsilon),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            WeightKind::Constant => Ok(()),
            WeightKind::Degenerate => check_alpha(self.alpha),
            WeightKind::Regularized { epsilon } => {
                check_alpha(self.alpha)?;
                check_epsilon(epsilon)
            }
        }
    }

    /// Coefficient value at a point; no derivative, so the degenerate kind is
    /// fine at the origin (value 0).
    pub fn value_at(&self, x: [f64; 2]) -> f64 {
        let r = x[0].hypot(x[1]);
        match self.kind {
            WeightKind::Constant => 1.0,
            WeightKind::Degenerate => r.powf(self.alpha),
            WeightKind::Regularized { epsilon } => psi_value(r, epsilon).powf(self.alpha),
        }
    }

    /// Value, gradient, and Hessian of the coefficient.
    pub fn eval(&self, x: [f64; 2]) -> Result<WeightEval> {
        self.validate()?;
        let r = x[0].hypot(x[1]);
        match self.kind {
            WeightKind::Constant => Ok(WeightEval {
                value: 1.0,
                gradient: [0.0; 2],
                hessian: [[0.0; 2]; 2],
            }),
            WeightKind::Degenerate => {
                if r == 0.0 {
                    return Err(Error::SingularPoint);
                }
                let a = self.alpha;
                // w = r^α: ∇w = α r^{α−2} x, D²w = α r^{α−2} I + α(α−2) r^{α−4} x xᵀ.
                let c1 = a * r.powf(a - 2.0);
                let c2 = a * (a - 2.0) * r.powf(a - 4.0);
                Ok(radial_eval(r.powf(a), c1, c2, x))
            }
            WeightKind::Regularized { epsilon } => {
                let a = self.alpha;
                let psi = psi_eps(r, epsilon)?;
                // Radial slope ψ′(r)/r stays polynomial inside the matching
                // ball, so the gradient is finite at the origin.
                let q = psi_radial_slope(r, epsilon);
                let value = psi.value.powf(a);
                // g = ψ^α: g′/r = α ψ^{α−1} q, g″ = α(α−1)ψ^{α−2}ψ′² + αψ^{α−1}ψ″.
                let c1 = a * psi.value.powf(a - 1.0) * q;
                let g2 = a * (a - 1.0) * psi.value.powf(a - 2.0) * psi.d1 * psi.d1
                    + a * psi.value.powf(a - 1.0) * psi.d2;
                let c2 = if r == 0.0 { 0.0 } else { (g2 - c1) / (r * r) };
                Ok(radial_eval(value, c1, c2, x))
            }
        }
    }

    /// Gradient of ψ_ε itself (not of ψ_ε^α); the zero vector at the origin.
    pub fn psi_gradient(&self, x: [f64; 2]) -> Result<[f64; 2]> {
        match self.kind {
            WeightKind::Regularized { epsilon } => {
                let r = x[0].hypot(x[1]);
                let q = psi_radial_slope(r, epsilon);
                Ok([q * x[0], q * x[1]])
            }
            _ => Err(Error::InvalidWeight(
                "psi gradient only defined for the regularized kind".into(),
            )),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 2.0 {
        Ok(())
    } else {
        Err(Error::InvalidWeight(format!("alpha must lie in (0, 2), got {alpha}")))
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon <= 0.5 {
        Ok(())
    } else {
        Err(Error::InvalidWeight(format!(
            "epsilon must lie in (0, 1/2], got {epsilon}"
        )))
    }
}

/// Assembles value/gradient/Hessian for a radial function from
/// c1 = f′(r)/r and c2 = (f″ − f′/r)/r².
fn radial_eval(value: f64, c1: f64, c2: f64, x: [f64; 2]) -> WeightEval {
    let gradient = [c1 * x[0], c1 * x[1]];
    let hessian = [
        [c1 + c2 * x[0] * x[0], c2 * x[0] * x[1]],
        [c2 * x[0] * x[1], c1 + c2 * x[1] * x[1]],
    ];
    WeightEval {
        value,
        gradient,
        hessian,
    }
}

/// Coefficient value with first and second derivatives at a point.
#[derive(Debug, Clone, Copy)]
pub struct WeightEval {
    pub value: f64,
    pub gradient: [f64; 2],
    pub hessian: [[f64; 2]; 2],
}

/// Value and first three radial derivatives of ψ_ε.
#[derive(Debug, Clone, Copy)]
pub struct PsiEps {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

/// The quartic regularization of |r|: matches |r| with two derivatives at
/// |r| = ε, stays above ε/4, equals 3ε/8 + (3/4ε)r² − (1/8ε³)r⁴ inside.
pub fn psi_eps(r: f64, epsilon: f64) -> Result<PsiEps> {
    check_epsilon(epsilon)?;
    let e = epsilon;
    let a = r.abs();
    Ok(if a >= e {
        PsiEps {
            value: a,
            d1: r.signum(),
            d2: 0.0,
            d3: 0.0,
        }
    } else {
        let r2 = r * r;
        PsiEps {
            value: 0.375 * e + 0.75 * r2 / e - 0.125 * r2 * r2 / (e * e * e),
            d1: 1.5 * r / e - 0.5 * r2 * r / (e * e * e),
            d2: 1.5 / e - 1.5 * r2 / (e * e * e),
            d3: -3.0 * r / (e * e * e),
        }
    })
}

#[inline]
fn psi_value(r: f64, epsilon: f64) -> f64 {
    let a = r.abs();
    if a >= epsilon {
        a
    } else {
        let r2 = r * r;
        0.375 * epsilon + 0.75 * r2 / epsilon - 0.125 * r2 * r2 / (epsilon * epsilon * epsilon)
    }
}

/// ψ′(r)/r, which is (3ε² − r²)/(2ε³) inside the ball and 1/r outside;
/// finite everywhere except the degenerate-limit origin.
#[inline]
pub fn psi_radial_slope(r: f64, epsilon: f64) -> f64 {
    if r.abs() >= epsilon {
        1.0 / r.abs()
    } else {
        (3.0 * epsilon * epsilon - r * r) / (2.0 * epsilon * epsilon * epsilon)
    }
}

/// Summary of one identity over a random sample set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityStats {
    pub max_residual: f64,
    pub sign_violations: usize,
    pub samples: usize,
}

/// Residuals of the closed-form identities satisfied by ψ_ε inside its
/// matching ball, keyed by identity name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityReport {
    pub epsilon: f64,
    pub entries: BTreeMap<String, IdentityStats>,
}

impl IdentityReport {
    pub fn max_residual(&self) -> f64 {
        self.entries
            .values()
            .map(|s| s.max_residual)
            .fold(0.0, f64::max)
    }

    pub fn total_sign_violations(&self) -> usize {
        self.entries.values().map(|s| s.sign_violations).sum()
    }
}

/// Evaluates both closed forms of each identity at random points of the
/// matching ball and reports the worst residual relative to the largest
/// constituent term (the scale at which the subtraction happens).
pub fn check_weight_identities(
    epsilon: f64,
    sample_count: usize,
    seed: u64,
) -> Result<IdentityReport> {
    check_epsilon(epsilon)?;
    if sample_count < 1000 {
        return Err(Error::InvalidParameter(format!(
            "sample_count must be at least 1000, got {sample_count}"
        )));
    }
    let e = epsilon;
    let e3 = e * e * e;
    let e6 = e3 * e3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut gap = Accum::new(sample_count);
    let mut directional = Accum::new(sample_count);
    let mut bracket = Accum::new(sample_count);
    let mut bracket_bounds = Accum::new(sample_count);
    let mut tangency = Accum::new(sample_count);

    for _ in 0..sample_count {
        // Uniform sample of the ball B_ε plus a stand-in gradient vector.
        let r = e * rng.random::<f64>().sqrt();
        let th = rng.random::<f64>() * std::f64::consts::TAU;
        let x = [r * th.cos(), r * th.sin()];
        let g = [rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0];

        let psi = psi_eps(r, e)?;
        let q = psi_radial_slope(r, e);
        let r2 = r * r;
        let ring = e * e - r2;

        // ψ·(3/2ε − r²/2ε³) − |∇ψ|² against its factored form.
        let t1 = psi.value * q;
        let t2 = q * q * r2;
        let rhs = 3.0 / (16.0 * e6) * ring * ring * (3.0 * e * e - r2);
        gap.push(t1 - t2, rhs, t1.abs().max(t2.abs()));
        gap.check_sign(t1 - t2, t1.abs().max(t2.abs()));

        // (g·∇ψ)² − ψ(g·x)²/ε³ against (g·x)² times its factored bracket.
        let gx = g[0] * x[0] + g[1] * x[1];
        let gpsi = q * gx; // g·∇ψ = q (g·x)
        let t1 = gpsi * gpsi;
        let t2 = psi.value * gx * gx / e3;
        let rhs = gx * gx * (3.0 / (8.0 * e6) * ring * (5.0 * e * e - r2));
        directional.push(t1 - t2, rhs, t1.abs().max(t2.abs()));
        directional.check_sign(t1 - t2, t1.abs().max(t2.abs()));

        // Radial factor of ∇[|∇ψ|² + ψΔψ], written without divisions by r:
        // (d/dr)[ψ′² + ψ(2q − r²/ε³)] / r = 4q² − 3qr²/ε³ − 4ψ/ε³.
        let lhs_b = 4.0 * q * q - 3.0 * q * r2 / e3 - 4.0 * psi.value / e3;
        let rhs_b = 3.0 / (8.0 * e6)
            * (20.0 * e.powi(4) - 36.0 * e * e * r2 + 8.0 * r2 * r2);
        let scale_b = 4.0 * q * q + 3.0 * q * r2 / e3 + 4.0 * psi.value / e3;
        bracket.push(lhs_b, rhs_b, scale_b);

        // Bounds −3/ε² ≤ bracket ≤ 15(N+2)/(8ε²) with N = 2.
        let lo = -3.0 / (e * e);
        let hi = 7.5 / (e * e);
        let slack = 1e-12 / (e * e);
        let excess = (lo - lhs_b).max(lhs_b - hi).max(0.0);
        bracket_bounds.max_residual = bracket_bounds.max_residual.max(excess * e * e);
        if excess > slack {
            bracket_bounds.sign_violations += 1;
        }

        // ψ − x·∇ψ against (3/8ε³)(ε² − r²)², nonnegative.
        let t1 = psi.value;
        let t2 = r * psi.d1;
        let rhs = 3.0 / (8.0 * e3) * ring * ring;
        tangency.push(t1 - t2, rhs, t1.abs().max(t2.abs()));
        tangency.check_sign(t1 - t2, t1.abs().max(t2.abs()));
    }

    let mut entries = BTreeMap::new();
    entries.insert("curvature_gap_factorization".to_string(), gap.stats());
    entries.insert(
        "directional_gradient_factorization".to_string(),
        directional.stats(),
    );
    entries.insert(
        "energy_density_gradient_bracket".to_string(),
        bracket.stats(),
    );
    entries.insert("bracket_bounds".to_string(), bracket_bounds.stats());
    entries.insert("radial_tangency_defect".to_string(), tangency.stats());
    Ok(IdentityReport {
        epsilon,
        entries,
    })
}

struct Accum {
    max_residual: f64,
    sign_violations: usize,
    samples: usize,
}

impl Accum {
    fn new(samples: usize) -> Self {
        Accum {
            max_residual: 0.0,
            sign_violations: 0,
            samples,
        }
    }

    fn push(&mut self, lhs: f64, rhs: f64, term_scale: f64) {
        let scale = term_scale.max(rhs.abs()).max(f64::MIN_POSITIVE);
        let rel = (lhs - rhs).abs() / scale;
        self.max_residual = self.max_residual.max(rel);
    }

    fn check_sign(&mut self, value: f64, scale: f64) {
        if value < -1e-13 * scale.max(f64::MIN_POSITIVE) {
            self.sign_violations += 1;
        }
    }

    fn stats(&self) -> IdentityStats {
        IdentityStats {
            max_residual: self.max_residual,
            sign_violations: self.sign_violations,
            samples: self.samples,
        }
    }
}

/// Family of axis-aligned squares used to probe the A_p product.
#[derive(Debug, Clone)]
pub struct CubeFamily {
    /// Domain half-width; cubes stay inside (−L, L)².
    pub half_width: f64,
    /// Number of log-spaced side lengths.
    pub size_count: usize,
    /// Random cubes per side length (one origin-centered cube is added per
    /// size on top of these).
    pub cubes_per_size: usize,
    /// Smallest and largest side length.
    pub min_side: f64,
    pub max_side: f64,
    /// Gauss–Legendre points per axis on each cube.
    pub quad_order: usize,
    pub seed: u64,
}

impl CubeFamily {
    /// 16 sizes × (31 random + 1 origin-centered) = 512 cubes, 64² quadrature.
    pub fn standard(half_width: f64, seed: u64) -> Self {
        CubeFamily {
            half_width,
            size_count: 16,
            cubes_per_size: 31,
            min_side: 0.02 * half_width,
            max_side: 1.8 * half_width,
            quad_order: 64,
            seed,
        }
    }
}

/// Maximum of the Muckenhoupt product
/// (|K|⁻¹∫_K w)(|K|⁻¹∫_K w^{−1/(p−1)})^{p−1} over the cube family.
///
/// The supremum over all cubes is unreachable; a rich family with
/// origin-centered members gives a stable lower estimate, which is what the
/// uniformity checks need.
pub fn estimate_ap_constant(spec: &WeightSpec, p: f64, family: &CubeFamily) -> Result<f64> {
    spec.validate()?;
    if !(p > 1.0) {
        return Err(Error::InvalidParameter(format!("p must exceed 1, got {p}")));
    }
    // Admissibility of the dual exponent near the origin: |x|^{−α/(p−1)} must
    // be locally integrable, i.e. α < N(p−1) with N = 2.
    let degenerate_inadmissible =
        matches!(spec.kind, WeightKind::Degenerate) && spec.alpha >= 2.0 * (p - 1.0);
    let gl = GaussLegendre::new(family.quad_order);
    let mut rng = ChaCha8Rng::seed_from_u64(family.seed);
    let inv_exponent = -1.0 / (p - 1.0);
    let mut max_product: f64 = 0.0;

    for si in 0..family.size_count {
        let t = if family.size_count > 1 {
            si as f64 / (family.size_count - 1) as f64
        } else {
            0.0
        };
        let side = family.min_side * (family.max_side / family.min_side).powf(t);
        let a = 0.5 * side;
        let reach = family.half_width - a;
        if reach < 0.0 {
            continue;
        }
        for ci in 0..=family.cubes_per_size {
            let center = if ci == 0 {
                [0.0, 0.0]
            } else {
                [
                    (rng.random::<f64>() * 2.0 - 1.0) * reach,
                    (rng.random::<f64>() * 2.0 - 1.0) * reach,
                ]
            };
            let contains_origin = center[0].abs() <= a && center[1].abs() <= a;
            if degenerate_inadmissible && contains_origin {
                return Err(Error::NotApWeight {
                    alpha: spec.alpha,
                    p,
                });
            }
            let (xs, xw) = gl.mapped(center[0] - a, center[0] + a);
            let (ys, yw) = gl.mapped(center[1] - a, center[1] + a);
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for (x, wx) in xs.iter().zip(&xw) {
                for (y, wy) in ys.iter().zip(&yw) {
                    let w = wx * wy;
                    let value = spec.value_at([*x, *y]).max(1e-300);
                    m1 += w * value;
                    m2 += w * value.powf(inv_exponent);
                }
            }
            let area = side * side;
            let product = (m1 / area) * (m2 / area).powf(p - 1.0);
            max_product = max_product.max(product);
        }
    }
    Ok(max_product)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn psi_value_at_zero() {
        let p = psi_eps(0.0, 0.5).unwrap();
        assert_relative_eq!(p.value, 0.1875, epsilon = 1e-15);
        assert_eq!(p.d1, 0.0);
    }

    #[test]
    fn psi_matching_conditions() {
        for eps in [0.5, 0.1, 0.02] {
            let inside = psi_eps(eps * (1.0 - 1e-14), eps).unwrap();
            let outside = psi_eps(eps, eps).unwrap();
            assert_relative_eq!(inside.value, eps, epsilon = 1e-12);
            assert_relative_eq!(outside.value, eps, epsilon = 1e-15);
            assert_relative_eq!(inside.d1, 1.0, epsilon = 1e-12);
            assert_relative_eq!(outside.d1, 1.0, epsilon = 1e-15);
            assert!(inside.d2.abs() < 1e-12 / eps);
            assert_eq!(outside.d2, 0.0);
            let neg = psi_eps(-eps, eps).unwrap();
            assert_relative_eq!(neg.value, eps, epsilon = 1e-15);
            assert_relative_eq!(neg.d1, -1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn psi_bounds_with_single_constant() {
        // ψ ≥ ε/4, |ψ′| ≤ C, |ψ″| ≤ C/ε, |ψ‴| ≤ C/ε² with one C across the
        // ladder; the quartic gives C = 3 exactly.
        let mut fitted: f64 = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for eps in [0.5, 0.1, 0.02] {
            for _ in 0..10_000 {
                let r = (rng.random::<f64>() * 2.0 - 1.0) * 1.5;
                let p = psi_eps(r, eps).unwrap();
                assert!(p.value >= eps / 4.0);
                assert!(p.value >= r.abs());
                if r.abs() <= eps {
                    assert!(p.value <= 2.0 * eps + 1e-15);
                }
                fitted = fitted
                    .max(p.d1.abs())
                    .max(p.d2.abs() * eps)
                    .max(p.d3.abs() * eps * eps);
            }
        }
        assert!(fitted <= 4.0, "fitted constant {fitted} exceeds 4");
    }

    #[test]
    fn psi_rejects_bad_epsilon() {
        assert!(psi_eps(0.1, 0.5).is_ok());
        assert!(psi_eps(0.1, 0.6).is_err());
        assert!(psi_eps(0.1, 0.0).is_err());
    }

    #[test]
    fn weight_eval_examples() {
        let spec = WeightSpec::regularized(1.0, 0.5);
        let ev = spec.eval([0.5, 0.0]).unwrap();
        assert_relative_eq!(ev.value, 0.5, epsilon = 1e-15);
        let gpsi = spec.psi_gradient([0.5, 0.0]).unwrap();
        assert_relative_eq!(gpsi[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(gpsi[1], 0.0, epsilon = 1e-15);

        let gpsi0 = spec.psi_gradient([0.0, 0.0]).unwrap();
        assert_eq!(gpsi0, [0.0, 0.0]);

        let deg = WeightSpec::degenerate(1.0);
        assert_relative_eq!(deg.value_at([0.3, 0.4]), 0.5, epsilon = 1e-15);
        assert!(matches!(deg.eval([0.0, 0.0]), Err(Error::SingularPoint)));
    }

    #[test]
    fn gradient_formulas_agree_at_matching_radius() {
        // Inside formula q(ε)·x and outside formula x/|x| coincide at |x| = ε.
        for eps in [0.4, 0.1] {
            let q_in = (3.0 * eps * eps - eps * eps) / (2.0 * eps * eps * eps);
            assert_relative_eq!(q_in, 1.0 / eps, epsilon = 1e-14);
        }
    }

    #[test]
    fn domination_and_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for alpha in [0.5, 1.0, 1.5] {
            for eps in [0.25, 0.1, 0.05] {
                let w = WeightSpec::degenerate(alpha);
                let weps = WeightSpec::regularized(alpha, eps);
                for _ in 0..2000 {
                    let x = [
                        rng.random::<f64>() * 2.0 - 1.0,
                        rng.random::<f64>() * 2.0 - 1.0,
                    ];
                    let wv = w.value_at(x);
                    let wev = weps.value_at(x);
                    assert!(wv <= wev * (1.0 + 1e-14));
                    if x[0].hypot(x[1]) >= eps {
                        assert_eq!(wv, wev);
                    }
                }
            }
        }
    }

    #[test]
    fn eval_matches_finite_differences() {
        let step = 1e-5;
        let kink_band = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let specs = [
            WeightSpec::regularized(1.3, 0.3),
            WeightSpec::regularized(0.7, 0.1),
            WeightSpec::degenerate(1.0),
        ];
        for spec in specs {
            let mut checked = 0;
            while checked < 300 {
                let x = [
                    rng.random::<f64>() * 1.6 - 0.8,
                    rng.random::<f64>() * 1.6 - 0.8,
                ];
                let r = x[0].hypot(x[1]);
                if r < 0.02 {
                    continue;
                }
                if let Some(eps) = spec.epsilon() {
                    if (r - eps).abs() < kink_band {
                        continue;
                    }
                }
                let ev = spec.eval(x).unwrap();
                for axis in 0..2 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[axis] += step;
                    xm[axis] -= step;
                    let fd = (spec.value_at(xp) - spec.value_at(xm)) / (2.0 * step);
                    let scale = ev.gradient[axis].abs().max(1e-8);
                    assert!(
                        (fd - ev.gradient[axis]).abs() / scale < 1e-6,
                        "gradient mismatch at {x:?}"
                    );
                    let fd2 = (spec.value_at(xp) - 2.0 * ev.value + spec.value_at(xm))
                        / (step * step);
                    let scale2 = ev.hessian[axis][axis].abs().max(1.0);
                    assert!(
                        (fd2 - ev.hessian[axis][axis]).abs() / scale2 < 1e-4,
                        "hessian mismatch at {x:?}"
                    );
                }
                checked += 1;
            }
        }
    }

    #[test]
    fn identity_point_values() {
        // At x = 0 the curvature-gap identity reads (3ε/8)(3/2ε) = 9/16 on
        // both sides; at |x| = ε both sides vanish.
        for eps in [0.5, 0.1] {
            let psi0 = psi_eps(0.0, eps).unwrap();
            let lhs = psi0.value * psi_radial_slope(0.0, eps);
            assert_relative_eq!(lhs, 9.0 / 16.0, epsilon = 1e-14);
            let e6 = eps.powi(6);
            let rhs = 3.0 / (16.0 * e6) * eps.powi(4) * (3.0 * eps * eps);
            assert_relative_eq!(rhs, 9.0 / 16.0, epsilon = 1e-14);

            let psie = psi_eps(eps, eps).unwrap();
            let q = psi_radial_slope(eps, eps);
            assert_relative_eq!(psie.value * q - q * q * eps * eps, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn identity_suite_residuals() {
        for eps in [0.5, 0.1, 0.02] {
            let report = check_weight_identities(eps, 10_000, 42).unwrap();
            assert!(
                report.max_residual() <= 1e-10,
                "eps {eps}: residual {}",
                report.max_residual()
            );
            assert_eq!(report.total_sign_violations(), 0);
        }
    }

    #[test]
    fn identities_reject_small_sample() {
        assert!(check_weight_identities(0.1, 10, 0).is_err());
    }

    #[test]
    fn ap_constant_weight_is_one() {
        let family = CubeFamily::standard(1.0, 9);
        let c = estimate_ap_constant(&WeightSpec::constant(), 2.0, &family).unwrap();
        assert_relative_eq!(c, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ap_degenerate_finite_and_regularized_uniform() {
        let family = CubeFamily::standard(1.0, 9);
        let degen = estimate_ap_constant(&WeightSpec::degenerate(1.0), 2.0, &family).unwrap();
        assert!(degen.is_finite() && degen > 1.0);
        let mut max_over_eps: f64 = 0.0;
        for k in [4u32, 8, 16, 32, 64, 128, 256] {
            let c =
                estimate_ap_constant(&WeightSpec::regularized_k(1.0, k), 2.0, &family).unwrap();
            max_over_eps = max_over_eps.max(c);
        }
        assert!(max_over_eps <= 2.0 * degen, "{max_over_eps} vs {degen}");
        assert!(max_over_eps >= 0.5 * degen, "{max_over_eps} vs {degen}");
    }

    #[test]
    fn ap_rejects_inadmissible_exponent() {
        // α ≥ N(p−1) with a cube containing the origin: the dual integral
        // diverges. Use p = 1.5 so N(p−1) = 1 < α.
        let family = CubeFamily::standard(1.0, 9);
        let res = estimate_ap_constant(&WeightSpec::degenerate(1.2), 1.5, &family);
        assert!(matches!(res, Err(Error::NotApWeight { .. })));
    }

    #[test]
    fn ball_measure_scaling() {
        // w(B_{1/k}) and w_k(B_{1/k}) both scale like k^{−(2+α)}: the fitted
        // log-log slope must sit within 5% of −(2+α).
        use crate::quad::DiscRule;
        for alpha in [0.5, 1.0, 1.5] {
            for family in ["degenerate", "regularized"] {
                let mut logs = Vec::new();
                for k in [4u32, 8, 16, 32, 64] {
                    let radius = 1.0 / k as f64;
                    let spec = match family {
                        "degenerate" => WeightSpec::degenerate(alpha),
                        _ => WeightSpec::regularized_k(alpha, k),
                    };
                    let rule = DiscRule::new(radius, 24, 32);
                    let mass: f64 = rule
                        .points
                        .iter()
                        .map(|(x, w)| w * spec.value_at(*x))
                        .sum();
                    logs.push(((k as f64).ln(), mass.ln()));
                }
                let slope = fit_slope(&logs);
                let target = -(2.0 + alpha);
                assert!(
                    (slope - target).abs() <= 0.05 * target.abs(),
                    "{family} alpha {alpha}: slope {slope} vs {target}"
                );
            }
        }
    }

    fn fit_slope(points: &[(f64, f64)]) -> f64 {
        let n = points.len() as f64;
        let sx: f64 = points.iter().map(|p| p.0).sum();
        let sy: f64 = points.iter().map(|p| p.1).sum();
        let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    }
}
