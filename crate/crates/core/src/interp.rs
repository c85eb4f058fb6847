//! Catmull–Rom bicubic interpolation of grid fields with analytic gradients.
//!
//! The interpolant is C¹ across cell boundaries, which is what the smooth
//! extension of the auxiliary function needs: finite differences of functions
//! built on top of it converge at second order away from cell edges.

use crate::geometry::Grid;
use crate::operators::Field;

/// Catmull–Rom basis values at local coordinate t ∈ [0, 1].
#[inline]
fn basis(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]
}

#[inline]
fn basis_derivative(t: f64) -> [f64; 4] {
    let t2 = t * t;
    [
        -1.5 * t2 + 2.0 * t - 0.5,
        4.5 * t2 - 5.0 * t,
        -4.5 * t2 + 4.0 * t + 0.5,
        1.5 * t2 - 1.0 * t,
    ]
}

fn local(grid: &Grid, coord: f64) -> (usize, f64) {
    let n = grid.n();
    let s = (coord + grid.half_width()) / grid.h();
    let cell = (s.floor() as isize).clamp(0, n as isize - 2) as usize;
    (cell, s - cell as f64)
}

#[inline]
fn clamp_index(idx: isize, n: usize) -> usize {
    idx.clamp(0, n as isize - 1) as usize
}

/// Interpolated value at an arbitrary point of the closed square.
pub fn bicubic(field: &Field, grid: &Grid, x: [f64; 2]) -> f64 {
    bicubic_with_gradient(field, grid, x).0
}

/// Interpolated value and its exact gradient.
pub fn bicubic_with_gradient(field: &Field, grid: &Grid, x: [f64; 2]) -> (f64, [f64; 2]) {
    let n = grid.n();
    let (ci, tx) = local(grid, x[0]);
    let (cj, ty) = local(grid, x[1]);
    let bx = basis(tx);
    let by = basis(ty);
    let dbx = basis_derivative(tx);
    let dby = basis_derivative(ty);
    let mut value = 0.0;
    let mut ddx = 0.0;
    let mut ddy = 0.0;
    for (b, row_off) in (-1isize..=2).enumerate() {
        let j = clamp_index(cj as isize + row_off, n);
        let mut row_v = 0.0;
        let mut row_d = 0.0;
        for (a, col_off) in (-1isize..=2).enumerate() {
            let i = clamp_index(ci as isize + col_off, n);
            let f = field.get(grid.index(i, j));
            row_v += bx[a] * f;
            row_d += dbx[a] * f;
        }
        value += by[b] * row_v;
        ddx += by[b] * row_d;
        ddy += dby[b] * row_v;
    }
    let inv_h = 1.0 / grid.h();
    (value, [ddx * inv_h, ddy * inv_h])
}
