//! Seeded random fields used by property checks and ratio sampling.

use rand::Rng;

use crate::geometry::Grid;
use crate::operators::Field;

/// Independent uniform values in [−1, 1] on interior vertices.
pub fn random_interior_field<R: Rng>(grid: &Grid, rng: &mut R) -> Field {
    let mut field = Field::zeros(grid);
    for (_, v, _, _) in grid.interior_iter() {
        field.values_mut()[v] = rng.random::<f64>() * 2.0 - 1.0;
    }
    field
}

/// Random combination of the lowest `modes` × `modes` Dirichlet sine modes.
///
/// Unlike vertex noise this represents the same function at every resolution,
/// so quantities computed from it can be compared across grids.
pub fn random_smooth_field<R: Rng>(grid: &Grid, modes: usize, rng: &mut R) -> Field {
    let l = grid.half_width();
    let coeffs: Vec<f64> = (0..modes * modes)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    Field::from_fn(grid, |[x, y]| {
        let mut acc = 0.0;
        for p in 1..=modes {
            for q in 1..=modes {
                let c = coeffs[(p - 1) * modes + (q - 1)];
                acc += c
                    * (p as f64 * std::f64::consts::PI * (x + l) / (2.0 * l)).sin()
                    * (q as f64 * std::f64::consts::PI * (y + l) / (2.0 * l)).sin();
            }
        }
        acc
    })
}

/// The centered C² bump of radius `radius` and unit amplitude used as default
/// initial data: (1 − (|x|/radius)²)³ inside, 0 outside.
pub fn centered_bump(grid: &Grid, radius: f64) -> Field {
    Field::from_fn(grid, |[x, y]| {
        let t = (x * x + y * y) / (radius * radius);
        if t < 1.0 {
            (1.0 - t).powi(3)
        } else {
            0.0
        }
    })
}
