//! Quadrature helpers: Gauss–Legendre rules, exact cell averages of |x|^β,
//! and polar rules on discs.

use crate::error::Error;
use crate::Result;

/// Gauss–Legendre rule on [−1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Computes the n-point rule by Newton iteration on the Legendre
    /// polynomial; accurate to machine precision for practical n.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for k in 0..m {
            // Tricomi initial guess for the k-th positive root.
            let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-15 {
                    let (p2, d2) = legendre_with_derivative(n, x);
                    dp = d2;
                    x -= p2 / d2;
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[k] = -x;
            nodes[n - 1 - k] = x;
            weights[k] = w;
            weights[n - 1 - k] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        GaussLegendre { nodes, weights }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// ∫_a^b f(x) dx.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let c = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(c + half * x);
        }
        acc * half
    }

    /// Maps the rule to [a, b], returning (points, weights).
    pub fn mapped(&self, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
        let c = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        let pts = self.nodes.iter().map(|x| c + half * x).collect();
        let wts = self.weights.iter().map(|w| w * half).collect();
        (pts, wts)
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// ∫₀^{π/4} sec^p θ dθ for real p; smooth integrand, 64-point rule.
pub fn sec_power_integral(p: f64) -> f64 {
    let gl = GaussLegendre::new(64);
    gl.integrate(0.0, std::f64::consts::FRAC_PI_4, |t| t.cos().powf(-p))
}

/// Average of |x|^β over the square cell [−h/2, h/2]², exact in the radial
/// direction. Requires β > −2 for integrability.
///
/// Splitting the cell into 8 congruent triangles and integrating r^{β+1}
/// exactly in r gives (1/h²)∫ = 2 a^β S(β+2)/(β+2) with a = h/2 and
/// S(p) = ∫₀^{π/4} sec^p θ dθ.
pub fn cell_average_radial_power(beta: f64, h: f64) -> Result<f64> {
    if beta <= -2.0 {
        return Err(Error::InvalidParameter(format!(
            "cell average of |x|^β requires β > −2, got {beta}"
        )));
    }
    let a = 0.5 * h;
    Ok(2.0 * a.powf(beta) * sec_power_integral(beta + 2.0) / (beta + 2.0))
}

/// Tensor polar rule on the disc of given radius: Gauss–Legendre in r,
/// uniform (trapezoid on the periodic circle) in θ.
pub struct DiscRule {
    /// (x, y, weight) triples; weights sum to the disc area.
    pub points: Vec<([f64; 2], f64)>,
}

impl DiscRule {
    pub fn new(radius: f64, radial: usize, angular: usize) -> Self {
        let gl = GaussLegendre::new(radial);
        let (rs, rws) = gl.mapped(0.0, radius);
        let dtheta = 2.0 * std::f64::consts::PI / angular as f64;
        let mut points = Vec::with_capacity(radial * angular);
        for (r, rw) in rs.iter().zip(&rws) {
            for k in 0..angular {
                let th = dtheta * k as f64;
                points.push(([r * th.cos(), r * th.sin()], rw * r * dtheta));
            }
        }
        DiscRule { points }
    }
}
