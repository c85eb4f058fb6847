//! Experiment configuration, the coefficient-ladder convergence study, and
//! artifact emission (JSON summaries, CSV tables, binary trajectory dumps).
//!
//! Every output embeds the config hash and crate version; seeds are fixed in
//! the config and all reductions run in a fixed order, so re-running a config
//! reproduces the JSON summaries byte for byte.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::carleman::{
    build_eta, carleman_weights, carleman_ratio, section5_bounds, shrinking_ball_weight_integral,
    CarlemanWeights,
};
use crate::control::{hum_solve, observability_constant};
use crate::error::Error;
use crate::geometry::{build_grid, region_mask, DomainSpec, Grid, Region};
use crate::operators::{assemble_mass, assemble_stiffness, Field};
use crate::parabolic::{energy_trace, solve_forward, ProblemSpec, TimeField, TimeGrid};
use crate::sampling::centered_bump;
use crate::spectral::lowest_eigenpairs;
use crate::weights::{check_weight_identities, WeightSpec};
use crate::Result;

/// Environment variable overriding the configured output root.
pub const OUTPUT_ENV: &str = "DEGENCTRL_OUT";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSection {
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightSection {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderSection {
    pub ks: Vec<u32>,
    pub k_reference: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CarlemanSection {
    pub s: f64,
    pub lambda: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HumSection {
    pub betas: Vec<f64>,
    pub tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservabilitySection {
    pub max_iters: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverSection {
    pub tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputSection {
    pub dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    pub seed: u64,
}

/// One experiment configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub domain: DomainSpec,
    pub grid: GridSection,
    pub time: TimeGrid,
    pub weight: WeightSection,
    pub ladder: LadderSection,
    pub carleman: CarlemanSection,
    pub hum: HumSection,
    pub observability: ObservabilitySection,
    pub solver: SolverSection,
    pub output: OutputSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    /// Default configuration: degenerate coefficient at α = 1 on the shared
    /// canonical geometry.
    pub fn canonical() -> ExperimentConfig {
        ExperimentConfig {
            domain: crate::geometry::canonical_domain(1.0),
            grid: GridSection { n: 65 },
            time: TimeGrid {
                horizon: 2.0,
                steps: 128,
            },
            weight: WeightSection {
                kind: "degenerate".into(),
                epsilon: None,
            },
            ladder: LadderSection {
                ks: vec![4, 8, 16, 32, 64],
                k_reference: 256,
            },
            carleman: CarlemanSection {
                s: 2.0,
                lambda: 2.0,
                samples: 20,
            },
            hum: HumSection {
                betas: vec![1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
                tol: 1e-8,
            },
            observability: ObservabilitySection {
                max_iters: 24,
                tol: 1e-4,
            },
            solver: SolverSection { tol: 1e-10 },
            output: OutputSection { dir: "out".into() },
            run: RunSection { seed: 7 },
        }
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Field-by-field validation with the offending field named.
    pub fn validate(&self) -> Result<()> {
        self.domain
            .validate()
            .map_err(|e| Error::Config(format!("domain: {e}")))?;
        if self.grid.n % 2 == 0 || self.grid.n < 9 {
            return Err(Error::Config(format!(
                "grid.n: must be odd and at least 9, got {}",
                self.grid.n
            )));
        }
        TimeGrid::new(self.time.horizon, self.time.steps)
            .map_err(|e| Error::Config(format!("time: {e}")))?;
        self.weight_spec()
            .map_err(|e| Error::Config(format!("weight: {e}")))?;
        if self.ladder.ks.is_empty() || self.ladder.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("ladder.ks: must be strictly increasing".into()));
        }
        if self.ladder.k_reference <= *self.ladder.ks.last().unwrap() {
            return Err(Error::Config(
                "ladder.k_reference: must exceed the largest ladder entry".into(),
            ));
        }
        if *self.ladder.ks.first().unwrap() < 3 {
            return Err(Error::Config(
                "ladder.ks: entries must be at least 3 so ε = 1/k < 1/2".into(),
            ));
        }
        if !(self.carleman.s == 0.0 || (1.0..=8.0).contains(&self.carleman.s))
            || !(1.0..=3.0).contains(&self.carleman.lambda)
            || !(1.0..=4.0).contains(&self.time.horizon)
        {
            return Err(Error::Config(format!(
                "carleman: parameters outside the admitted box (s = {}, lambda = {}, T = {})",
                self.carleman.s, self.carleman.lambda, self.time.horizon
            )));
        }
        for beta in &self.hum.betas {
            if !(1e-8..=1e-1).contains(beta) {
                return Err(Error::Config(format!(
                    "hum.betas: {beta} outside [1e-8, 1e-1]"
                )));
            }
        }
        if !(self.solver.tol > 0.0 && self.solver.tol < 1.0) {
            return Err(Error::Config("solver.tol: must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn weight_spec(&self) -> Result<WeightSpec> {
        let spec = match self.weight.kind.as_str() {
            "degenerate" => WeightSpec::degenerate(self.domain.alpha),
            "constant" => WeightSpec::constant(),
            "regularized" => {
                let eps = self.weight.epsilon.ok_or_else(|| {
                    Error::InvalidWeight("epsilon required for the regularized kind".into())
                })?;
                WeightSpec::regularized(self.domain.alpha, eps)
            }
            other => {
                return Err(Error::InvalidWeight(format!(
                    "kind must be degenerate|regularized|constant, got {other}"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn build_grid(&self) -> Result<Grid> {
        build_grid(&self.domain, self.grid.n)
    }

    pub fn problem(&self) -> Result<ProblemSpec> {
        ProblemSpec::new(
            self.domain.clone(),
            self.build_grid()?,
            self.weight_spec()?,
            self.time,
            self.solver.tol,
        )
    }

    /// FNV-1a hash of the canonical serialized form.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).unwrap_or_default();
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// Output root, honoring the environment override.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var(OUTPUT_ENV) {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => PathBuf::from(&self.output.dir),
        }
    }
}

fn crate_version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Writes a JSON value with trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value)
        .map_err(|e| Error::Config(format!("serialize {}: {e}", path.display())))?;
    file.write_all(b"\n")?;
    Ok(())
}

/// Binary trajectory dump: little-endian f64 levels, plus a JSON manifest.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryManifest {
    pub n: usize,
    pub steps: usize,
    pub horizon: f64,
    pub half_width: f64,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub config_hash: String,
    pub version: String,
    pub data_file: String,
}

pub fn write_trajectory(
    dir: &Path,
    stem: &str,
    p: &ProblemSpec,
    tf: &TimeField,
    config_hash: &str,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let data_name = format!("{stem}.bin");
    let mut file = fs::File::create(dir.join(&data_name))?;
    for level in &tf.levels {
        for v in level.values() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    let manifest = TrajectoryManifest {
        n: p.grid.n(),
        steps: p.time.steps,
        horizon: p.time.horizon,
        half_width: p.domain.half_width,
        alpha: p.domain.alpha,
        epsilon: p.weight.epsilon(),
        config_hash: config_hash.to_string(),
        version: crate_version().to_string(),
        data_file: data_name,
    };
    let manifest_path = dir.join(format!("{stem}.manifest.json"));
    write_json(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

/// One row of the coefficient-ladder study.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub k: u32,
    /// ‖φ_k − φ_ref‖ over space-time.
    pub l2q_error: f64,
    /// ‖φ_k(T) − φ_ref(T)‖.
    pub terminal_error: f64,
    /// ln of k^{2−α} ∬_{B_{1/k}×(0,T)} ξ³ φ_k² e^{−2sσ}.
    pub ball_diagnostic_log: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub k_reference: u32,
    pub n: usize,
    pub steps: usize,
    pub alpha: f64,
    pub monotone: bool,
    pub config_hash: String,
    pub version: String,
}

/// Solves the fixed-initial-data free problem for every ladder coefficient
/// plus the reference, and tabulates distances to the reference together with
/// the shrinking-ball diagnostic. Ladder entries run as independent tasks.
pub fn run_convergence_study(cfg: &ExperimentConfig) -> Result<ConvergenceTable> {
    cfg.validate()?;
    let grid = cfg.build_grid()?;
    let phi0 = centered_bump(&grid, 0.5);
    let alpha = cfg.domain.alpha;

    let mut ks = cfg.ladder.ks.clone();
    ks.push(cfg.ladder.k_reference);

    let problems: Vec<ProblemSpec> = ks
        .iter()
        .map(|&k| {
            ProblemSpec::new(
                cfg.domain.clone(),
                grid.clone(),
                WeightSpec::regularized_k(alpha, k),
                cfg.time,
                cfg.solver.tol,
            )
        })
        .collect::<Result<_>>()?;

    // Independent sweep tasks; results land in ladder order.
    let mut trajectories: Vec<Option<Result<TimeField>>> = Vec::new();
    trajectories.resize_with(problems.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for p in &problems {
            let phi0 = &phi0;
            handles.push(scope.spawn(move || solve_forward(p, None, phi0)));
        }
        for (slot, handle) in trajectories.iter_mut().zip(handles) {
            *slot = Some(handle.join().expect("solver task panicked"));
        }
    });
    let mut solved = Vec::with_capacity(problems.len());
    for t in trajectories {
        solved.push(t.expect("slot filled")?);
    }
    let reference = solved.pop().expect("reference present");
    let p_ref = problems.last().expect("reference problem");

    // Shared limit weight bundle for the diagnostic column.
    let eta = build_eta(&grid, &cfg.domain, 0.0)?;
    let cw = carleman_weights(eta, cfg.carleman.s, cfg.carleman.lambda, cfg.time)?;

    let mut rows = Vec::with_capacity(cfg.ladder.ks.len());
    for (idx, k) in cfg.ladder.ks.iter().enumerate() {
        let traj = &solved[idx];
        let mut diff_levels = Vec::with_capacity(traj.levels.len());
        for (a, b) in traj.levels.iter().zip(&reference.levels) {
            diff_levels.push(a.axpy(-1.0, b));
        }
        let diff = TimeField {
            levels: diff_levels,
        };
        let l2q_error = p_ref.space_time_norm(&diff);
        let terminal_error = p_ref.mass_norm(&diff.levels[cfg.time.steps]);
        let radius = 1.0 / *k as f64;
        let ball = shrinking_ball_weight_integral(&problems[idx], &cw, traj, radius)?;
        rows.push(ConvergenceRow {
            k: *k,
            l2q_error,
            terminal_error,
            ball_diagnostic_log: (2.0 - alpha) * (*k as f64).ln() + ball,
        });
    }

    let monotone = rows.windows(2).all(|w| {
        w[1].l2q_error < w[0].l2q_error
            && w[1].terminal_error < w[0].terminal_error
            && w[1].ball_diagnostic_log < w[0].ball_diagnostic_log
    });
    Ok(ConvergenceTable {
        rows,
        k_reference: cfg.ladder.k_reference,
        n: cfg.grid.n,
        steps: cfg.time.steps,
        alpha,
        monotone,
        config_hash: cfg.hash(),
        version: crate_version().to_string(),
    })
}

/// Writes the study table as CSV + JSON; errors with `StudyFailed` when a
/// column is not monotone (after emitting the artifacts).
pub fn convergence_pipeline(cfg: &ExperimentConfig) -> Result<ConvergenceTable> {
    let table = run_convergence_study(cfg)?;
    let dir = cfg.output_root();
    fs::create_dir_all(&dir)?;
    let mut csv = String::from("k,l2q_error,terminal_error,ball_diagnostic_log\n");
    for row in &table.rows {
        csv.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e}\n",
            row.k, row.l2q_error, row.terminal_error, row.ball_diagnostic_log
        ));
    }
    fs::write(dir.join("convergence.csv"), csv)?;
    write_json(&dir.join("convergence.json"), &table)?;
    if !table.monotone {
        return Err(Error::StudyFailed(
            "error or diagnostic columns are not monotonically decreasing".into(),
        ));
    }
    Ok(table)
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub terminal_l2: f64,
    pub initial_l2: f64,
    pub config_hash: String,
    pub version: String,
}

/// Free or controlled forward solve with the default bump initial data;
/// writes the trajectory, energy trace, and a summary.
pub fn solve_pipeline(cfg: &ExperimentConfig) -> Result<SolveSummary> {
    let p = cfg.problem()?;
    let phi0 = centered_bump(&p.grid, 0.5);
    let traj = solve_forward(&p, None, &phi0)?;
    let dir = cfg.output_root();
    fs::create_dir_all(&dir)?;
    let hash = cfg.hash();
    write_trajectory(&dir, "trajectory", &p, &traj, &hash)?;
    let trace = energy_trace(&p, &traj, None)?;
    let mut csv = String::from("t,l2_sq,weighted_h1_semi_sq,step_residual\n");
    for s in &trace {
        csv.push_str(&format!(
            "{:.17e},{:.17e},{:.17e},{:.17e}\n",
            s.t, s.l2_sq, s.weighted_h1_semi_sq, s.step_residual
        ));
    }
    fs::write(dir.join("energy_trace.csv"), csv)?;
    let summary = SolveSummary {
        terminal_l2: p.mass_norm(&traj.levels[p.time.steps]),
        initial_l2: p.mass_norm(&phi0),
        config_hash: hash,
        version: crate_version().to_string(),
    };
    write_json(&dir.join("solve.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct HumRunSummary {
    pub beta: f64,
    pub terminal_norm: f64,
    pub initial_norm: f64,
    pub terminal_over_initial: f64,
    pub cost: f64,
    pub control_energy: f64,
    pub cg_iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct HumSummary {
    pub runs: Vec<HumRunSummary>,
    pub config_hash: String,
    pub version: String,
}

/// Penalized control synthesis for each β in the ladder (or a single given
/// β); β values run as independent tasks.
pub fn hum_pipeline(cfg: &ExperimentConfig, beta_override: Option<f64>) -> Result<HumSummary> {
    let p = cfg.problem()?;
    let omega = region_mask(&p.grid, &Region::Control(cfg.domain.clone()))?;
    let phi0 = centered_bump(&p.grid, 0.5);
    let betas: Vec<f64> = match beta_override {
        Some(b) => vec![b],
        None => cfg.hum.betas.clone(),
    };
    let mut results: Vec<Option<Result<crate::control::HumResult>>> = Vec::new();
    results.resize_with(betas.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for beta in &betas {
            let p = &p;
            let omega = &omega;
            let phi0 = &phi0;
            let tol = cfg.hum.tol;
            let beta = *beta;
            handles.push(scope.spawn(move || hum_solve(p, omega, phi0, beta, tol)));
        }
        for (slot, handle) in results.iter_mut().zip(handles) {
            *slot = Some(handle.join().expect("hum task panicked"));
        }
    });
    let mut runs = Vec::with_capacity(betas.len());
    let dir = cfg.output_root();
    fs::create_dir_all(&dir)?;
    let hash = cfg.hash();
    for (beta, slot) in betas.iter().zip(results) {
        let res = slot.expect("slot filled")?;
        if *beta == *betas.last().unwrap() {
            write_trajectory(&dir, "hum_trajectory", &p, &res.trajectory, &hash)?;
        }
        runs.push(HumRunSummary {
            beta: *beta,
            terminal_norm: res.terminal_norm,
            initial_norm: res.initial_norm,
            terminal_over_initial: res.terminal_norm / res.initial_norm,
            cost: res.cost,
            control_energy: res.control_energy,
            cg_iterations: res.cg_iterations,
        });
    }
    let summary = HumSummary {
        runs,
        config_hash: hash,
        version: crate_version().to_string(),
    };
    write_json(&dir.join("hum.json"), &summary)?;
    Ok(summary)
}

/// Observability estimate artifact.
pub fn observability_pipeline(
    cfg: &ExperimentConfig,
) -> Result<crate::control::ObservabilitySummary> {
    let p = cfg.problem()?;
    let omega = region_mask(&p.grid, &Region::Control(cfg.domain.clone()))?;
    let est = observability_constant(&p, &omega, cfg.observability.max_iters, cfg.observability.tol)?;
    let dir = cfg.output_root();
    fs::create_dir_all(&dir)?;
    #[derive(Serialize)]
    struct Artifact {
        #[serde(flatten)]
        summary: crate::control::ObservabilitySummary,
        history: Vec<f64>,
        config_hash: String,
        version: String,
    }
    let artifact = Artifact {
        summary: est.summary(),
        history: est.history.clone(),
        config_hash: cfg.hash(),
        version: crate_version().to_string(),
    };
    write_json(&dir.join("observability.json"), &artifact)?;
    Ok(est.summary())
}

#[derive(Debug, Clone, Serialize)]
pub struct CarlemanArtifact {
    pub max_ratio: f64,
    pub sample_count: usize,
    pub band_min_log: f64,
    pub global_max_log: f64,
    pub config_hash: String,
    pub version: String,
}

/// Weighted-inequality ratio sampling plus the stationary-band bounds; the
/// per-sample breakdown goes to CSV.
pub fn carleman_pipeline(cfg: &ExperimentConfig) -> Result<CarlemanArtifact> {
    let p = cfg.problem()?;
    let omega = region_mask(&p.grid, &Region::Control(cfg.domain.clone()))?;
    let eps = match p.weight.kind {
        crate::weights::WeightKind::Regularized { epsilon } => epsilon,
        _ => 0.0,
    };
    let eta = build_eta(&p.grid, &cfg.domain, eps)?;
    let cw: CarlemanWeights = carleman_weights(eta, cfg.carleman.s, cfg.carleman.lambda, cfg.time)?;
    let stats = carleman_ratio(&p, &cw, &omega, cfg.carleman.samples, cfg.run.seed)?;
    let bounds = section5_bounds(&cw, &p.grid, &cfg.time);
    let dir = cfg.output_root();
    fs::create_dir_all(&dir)?;
    let mut csv = String::from("index,log_lhs,log_observation,ratio,eps_term_log\n");
    for s in &stats.samples {
        csv.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{}\n",
            s.index,
            s.log_lhs,
            s.log_observation,
            s.ratio,
            s.eps_term_log
                .map(|v| format!("{v:.17e}"))
                .unwrap_or_default()
        ));
    }
    fs::write(dir.join("carleman_ratios.csv"), csv)?;
    let artifact = CarlemanArtifact {
        max_ratio: stats.max_ratio,
        sample_count: stats.samples.len(),
        band_min_log: bounds.band_min_log,
        global_max_log: bounds.global_max_log,
        config_hash: cfg.hash(),
        version: crate_version().to_string(),
    };
    write_json(&dir.join("carleman.json"), &artifact)?;
    write_json(&dir.join("section5_bounds.json"), &bounds)?;
    Ok(artifact)
}

/// Identity-report artifact (config-free; parameters come from the CLI).
pub fn weights_check_pipeline(
    eps: f64,
    samples: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<crate::weights::IdentityReport> {
    let report = check_weight_identities(eps, samples, seed)?;
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("weights_check.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralArtifact {
    pub eigenvalues: Vec<f64>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub config_hash: String,
    pub version: String,
}

/// Lowest eigenpairs of the configured operator; values to JSON, modes to a
/// binary dump.
pub fn spectral_pipeline(cfg: &ExperimentConfig, count: usize) -> Result<SpectralArtifact> {
    let p = cfg.problem()?;
    let a = assemble_stiffness(&p.grid, &p.weight)?;
    let m = assemble_mass(&p.grid);
    let res = lowest_eigenpairs(&p.grid, &a, &m, count, 1e-10)?;
    let dir = cfg.output_root();
    fs::create_dir_all(&dir)?;
    let mut file = fs::File::create(dir.join("modes.bin"))?;
    for mode in &res.modes {
        for v in mode.values() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    let artifact = SpectralArtifact {
        eigenvalues: res.eigenvalues.clone(),
        residuals: res.residuals.clone(),
        iterations: res.iterations,
        config_hash: cfg.hash(),
        version: crate_version().to_string(),
    };
    write_json(&dir.join("spectral.json"), &artifact)?;
    Ok(artifact)
}

/// The free trajectory used as the reference in several pipelines.
pub fn default_initial_data(grid: &Grid) -> Field {
    centered_bump(grid, 0.5)
}

/// Canonical example config in TOML form, shipped with the repo.
pub fn canonical_toml() -> String {
    toml::to_string_pretty(&ExperimentConfig::canonical()).expect("serializable")
}
