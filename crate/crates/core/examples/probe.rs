use degenctrl_core::carleman::build_eta;
use degenctrl_core::geometry::{build_grid, canonical_domain};
use degenctrl_core::operators::{assemble_mass, assemble_stiffness, weighted_norms, Field};
use degenctrl_core::spectral::lowest_eigenpairs;
use degenctrl_core::weights::WeightSpec;

fn main() {
    let target = std::f64::consts::PI * std::f64::consts::PI / 2.0;
    for n in [17usize, 33, 65] {
        let domain = canonical_domain(1.0);
        let grid = build_grid(&domain, n).unwrap();
        let u = Field::from_fn(&grid, |[x, y]| {
            (std::f64::consts::FRAC_PI_2 * (x + 1.0)).sin()
                * (std::f64::consts::FRAC_PI_2 * (y + 1.0)).sin()
        });
        let norms = weighted_norms(&u, &WeightSpec::constant(), &grid).unwrap();
        let ratio = norms.weighted_h1_semi.powi(2) / norms.l2.powi(2);
        println!("n={n}: ratio={ratio:.6} target={target:.6} err={:.3e}", (ratio - target).abs());

        let a = assemble_stiffness(&grid, &WeightSpec::constant()).unwrap();
        let m = assemble_mass(&grid);
        match lowest_eigenpairs(&grid, &a, &m, 2, 1e-10) {
            Ok(res) => println!("  eig: {:?} iters={}", res.eigenvalues, res.iterations),
            Err(e) => println!("  eig error: {e}"),
        }
        // Eta construction: where is the minimum gradient?
        for eps in [0.0, 0.05] {
            match build_eta(&grid, &domain, eps) {
                Ok(eta) => {
                    let r = &eta.report;
                    // locate argmin of central-diff gradient outside the balls
                    let h = grid.h();
                    let mut best = (f64::INFINITY, 0usize, 0usize);
                    for (_, v, i, j) in grid.interior_iter() {
                        let [x, y] = grid.coords(i, j);
                        if x.hypot(y) <= 0.1 { continue; }
                        if (x - 0.6).hypot(y) <= 0.2 { continue; }
                        let e = |ii: usize, jj: usize| eta.values.get(grid.index(ii, jj));
                        let dx = (e(i + 1, j) - e(i - 1, j)) / (2.0 * h);
                        let dy = (e(i, j + 1) - e(i, j - 1)) / (2.0 * h);
                        let mag = dx.hypot(dy);
                        if mag < best.0 { best = (mag, i, j); let _ = v; }
                    }
                    let [bx, by] = grid.coords(best.1, best.2);
                    println!("  eta eps={eps}: c_eta={:.4e} at ({bx:.3},{by:.3}), |eta|inf={:.4}, scale={:.4}, min_int={:.3e}",
                        r.gradient_floor, r.sup_norm, r.scale, r.min_interior);
                }
                Err(e) => println!("  eta eps={eps}: ERROR {e}"),
            }
        }
    }
}
