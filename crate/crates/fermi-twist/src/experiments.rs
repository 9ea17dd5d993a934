//! The reproducible experiment runner behind the CLI, and the acceptance
//! suite shared between the CLI and the integration tests.

use crate::config::{ConfigError, ExperimentConfig, ExperimentKind};
use crate::critical::{
    band_measure_partial_sum, cell_measure_c2, classify, strip_measure_c1, CriticalError,
    CriticalParams, PreimageMode,
};
use crate::decomposition::{
    decompose_image, expansion_bounds_audit, DecompConfig, DecompError, SampleWalker,
    StandardPartition,
};
use crate::equidistribution::{
    lemma_e0_check, nu_min, one_step_error_scan, psi_compute, psi_fourier, psi_periodicity_check,
    E0Verdict, EquiError, Observable, PsiStrategy,
};
use crate::map::{apply_map, inverse_map, jacobian, MapError, MapParams, Point};
use crate::pairs::{make_reference_pair, PairError};
use crate::report::{ClassGrid, ReportError, RunWriter};
use crate::walk::{
    control_walk, drift_estimate, escape_scan, master_pair, tau_tail, walk_run, LevelScheme,
    WalkError,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ExpError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Pair(#[from] PairError),
    #[error(transparent)]
    Critical(#[from] CriticalError),
    #[error(transparent)]
    Decomp(#[from] DecompError),
    #[error(transparent)]
    Equi(#[from] EquiError),
    #[error(transparent)]
    Walk(#[from] WalkError),
}

pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub check_failures: usize,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Execute one configured experiment, writing CSVs plus the manifest.
pub fn run(
    cfg: &ExperimentConfig,
    out_override: Option<&Path>,
    threads: usize,
) -> Result<RunOutcome, ExpError> {
    let params = cfg.map.build()?;
    let cps = match cfg.critical {
        Some(c) => c,
        None => CriticalParams::auto_for(&params, cfg.seed)?,
    };
    let out_dir = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(cfg.out_dir.clone().unwrap_or_else(|| "out".into())));
    let digest = cfg.digest();
    let mut w = RunWriter::new(&out_dir, &digest, threads)?;
    let mut failures = 0usize;

    match cfg.experiment {
        ExperimentKind::MapAudit => {
            let mut rows = Vec::new();
            let n = cfg.n_samples.unwrap_or(100_000);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut max_det = 0.0f64;
            let mut max_rt = 0.0f64;
            for _ in 0..n {
                let p = Point {
                    x: rng.random::<f64>() * TAU,
                    y: 10.0 * (1e5f64).powf(rng.random::<f64>()),
                };
                let j = jacobian(p, &params);
                max_det = max_det.max((j[0][0] * j[1][1] - j[0][1] * j[1][0] - 1.0).abs());
                if let Ok(q) = apply_map(p, &params) {
                    if let Ok(b) = inverse_map(q, &params) {
                        let dx = (b.x - p.x).abs().min(TAU - (b.x - p.x).abs());
                        max_rt = max_rt.max(dx.max((b.y - p.y).abs()));
                    }
                }
            }
            if max_det > 1e-12 || max_rt > 1e-10 {
                failures += 1;
            }
            rows.push(vec![
                fmt(params.gamma),
                n.to_string(),
                fmt(max_det),
                fmt(max_rt),
            ]);
            w.write_csv(
                "map_audit.csv",
                &["gamma", "n_points", "max_det_error", "max_roundtrip_error"],
                &rows,
            )?;
        }
        ExperimentKind::PairAudit => {
            let n = cfg.n_samples.unwrap_or(50);
            let mut rows = Vec::new();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for i in 0..n {
                let center = 0.45 + 0.7 * rng.random::<f64>();
                let y = params.y_star * (2.0 + 8.0 * rng.random::<f64>());
                let pair = make_reference_pair(
                    center - 0.15,
                    center + 0.15,
                    Point::new(center, y),
                    &params,
                    cps.delta,
                )?;
                let push =
                    crate::pairs::pushforward_pair(&pair, center - 0.1, center - 0.05, &params)?;
                let rep = crate::pairs::check_standard(&pair, &params, cps.d, cps.delta);
                let gron = crate::pairs::gronwall_bounds(&pair, cps.delta);
                let ok = rep.is_standard
                    && gron.ok()
                    && push.consistency.slope_max_rel_dev < 1e-4
                    && push.consistency.dslope_max_rel_dev < 1e-4
                    && push.consistency.log_deriv_max_rel_dev < 1e-4;
                if !ok {
                    failures += 1;
                }
                rows.push(vec![
                    i.to_string(),
                    fmt(y),
                    fmt(push.consistency.slope_max_rel_dev),
                    fmt(push.consistency.dslope_max_rel_dev),
                    fmt(push.consistency.log_deriv_max_rel_dev),
                    rep.is_standard.to_string(),
                    gron.ok().to_string(),
                ]);
            }
            w.write_csv(
                "pair_audit.csv",
                &[
                    "pair",
                    "y_hat",
                    "slope_dev",
                    "dslope_dev",
                    "log_deriv_dev",
                    "standard",
                    "density_bounds_ok",
                ],
                &rows,
            )?;
        }
        ExperimentKind::CriticalMeasure => {
            let n_samples = cfg.n_samples.unwrap_or(100_000);
            let mut band_rows = Vec::new();
            let mut cell_rows = Vec::new();
            for (j, &y) in cfg.y_grid.iter().enumerate() {
                let m = strip_measure_c1(y, &params, &cps, n_samples, cfg.seed + j as u64)?;
                band_rows.push(vec![
                    fmt(y),
                    fmt(m.measure),
                    fmt(m.std_error),
                    m.n_samples.to_string(),
                    m.seed.to_string(),
                ]);
                let n_window = (params.big_y_raw(y) / std::f64::consts::PI) as u64;
                for i in 0..2u8 {
                    match cell_measure_c2(i, n_window, &params, &cps, n_samples, cfg.seed) {
                        Ok(c) => cell_rows.push(vec![
                            i.to_string(),
                            c.n.to_string(),
                            fmt(c.y_hat_n),
                            fmt(c.measure),
                            fmt(c.std_error),
                            c.n_samples.to_string(),
                            c.seed.to_string(),
                        ]),
                        Err(CriticalError::EmptyCell { .. }) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            w.write_csv(
                "bands.csv",
                &["y", "measure", "std_error", "n_samples", "seed"],
                &band_rows,
            )?;
            w.write_csv(
                "cells.csv",
                &["i", "n", "y_hat_n", "measure", "std_error", "n_samples", "seed"],
                &cell_rows,
            )?;
            let pts: Vec<(f64, f64)> = band_rows
                .iter()
                .map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap()))
                .collect();
            w.write_text(
                "band_scaling.svg",
                &crate::report::log_log_plot(&pts, "order-1 band measure vs height"),
            )?;
        }
        ExperimentKind::DecomposeAudit => {
            let n = cfg.n_samples.unwrap_or(100);
            let partition = StandardPartition::new(cps.delta)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut records = Vec::new();
            for _ in 0..n {
                let center = rng.random::<f64>() * TAU;
                let y = params.y_star * (3.0 + 27.0 * rng.random::<f64>());
                let pair = make_reference_pair(
                    center - 0.15,
                    center + 0.15,
                    Point::new(center, y),
                    &params,
                    cps.delta,
                )?;
                let dec = decompose_image(&pair, &partition, &params, &cps, &DecompConfig::default())?;
                let audit = expansion_bounds_audit(&pair, &params, &cps);
                let mass_err = (dec.total_mass() - 1.0).abs();
                if mass_err > 1e-8 || !audit.ok() {
                    failures += 1;
                }
                records.push(serde_json::json!({
                    "y_hat": pair.y_hat,
                    "center": center,
                    "aligned_mass": dec.aligned_mass,
                    "boundary_mass": dec.boundary_mass,
                    "standby_mass": dec.standby_mass,
                    "invalid_mass": dec.invalid_mass,
                    "mass_error": mass_err,
                    "aligned_pieces": dec.aligned_piece_count(),
                    "standby_count": dec.standby.len(),
                    "merged_short_leftovers": dec.merged_short_leftovers,
                    "expansion_audit_ok": audit.ok(),
                }));
            }
            w.write_jsonl("decompose_audit.jsonl", &records)?;
        }
        ExperimentKind::EquiScan => {
            let partition = StandardPartition::new(cps.delta)?;
            let obs = cfg.observable();
            let scan = one_step_error_scan(
                cfg.cell_or_default(),
                &cfg.y_grid,
                &obs,
                &params,
                &cps,
                &partition,
            )?;
            let rows: Vec<Vec<String>> = scan
                .rows
                .iter()
                .map(|r| vec![fmt(r.y_hat), fmt(r.error), fmt(r.envelope)])
                .collect();
            w.write_csv("equi_scan.csv", &["y_hat", "error", "envelope"], &rows)?;
            if let Some(f) = scan.fit {
                w.write_text(
                    "equi_fit.txt",
                    &format!(
                        "slope {} stderr {} r_squared {}\n",
                        f.slope, f.slope_stderr, f.r_squared
                    ),
                )?;
            }
            let pts: Vec<(f64, f64)> = scan.rows.iter().map(|r| (r.y_hat, r.error)).collect();
            w.write_text(
                "equi_scaling.svg",
                &crate::report::log_log_plot(&pts, "one-step equidistribution error"),
            )?;
        }
        ExperimentKind::Psi => {
            let partition = StandardPartition::new(cps.delta)?;
            let obs = cfg.observable();
            let k = cfg.k.unwrap_or(1);
            let periods = cfg.periods.unwrap_or(2);
            let ppp = cfg.points_per_period.unwrap_or(12);
            let mut psi_rows = Vec::new();
            let mut fourier_rows = Vec::new();
            for &y in &cfg.y_grid {
                let table = psi_compute(
                    cfg.cell_or_default(),
                    k,
                    y,
                    periods,
                    ppp,
                    &obs,
                    &params,
                    &cps,
                    &partition,
                    PsiStrategy::Direct,
                )?;
                for i in 0..table.values.len() {
                    psi_rows.push(vec![
                        fmt(table.cell_lo),
                        k.to_string(),
                        fmt(table.eta_anchor + table.eta_offsets[i]),
                        fmt(table.phases[i].rem_euclid(TAU)),
                        fmt(table.values[i]),
                        fmt(table.std_errors[i]),
                    ]);
                }
                let fourier = psi_fourier(&table)?;
                for &(l, re, im, mag) in &fourier.coefficients {
                    fourier_rows.push(vec![
                        fmt(y),
                        l.to_string(),
                        fmt(re),
                        fmt(im),
                        fmt(mag),
                    ]);
                }
            }
            w.write_csv(
                "psi.csv",
                &["alpha", "k", "eta", "y_eta_mod", "psi_value", "stderr"],
                &psi_rows,
            )?;
            w.write_csv("fourier.csv", &["y_hat", "l", "re", "im", "magnitude"], &fourier_rows)?;
        }
        ExperimentKind::Walk => {
            let partition = StandardPartition::new(cps.delta)?;
            let walker = SampleWalker::new(&params, &cps, &partition);
            let beta = params.beta();
            let nu = nu_min(beta)?;
            let n_samples = cfg.n_samples.unwrap_or(1000);
            let max_iter = cfg.max_iter.unwrap_or(1_000_000);
            let mut drift_rows = Vec::new();
            let mut walk_rows = Vec::new();
            for &y in &cfg.y_grid {
                let scheme = LevelScheme::new(y, nu, &params);
                let master = master_pair(cfg.cell_or_default(), y, &params)?;
                let drift =
                    drift_estimate(&master, 0, &scheme, &walker, n_samples, max_iter, cfg.seed)?;
                drift_rows.push(vec![
                    fmt(y),
                    drift.n_samples.to_string(),
                    drift.used.to_string(),
                    drift.truncated.to_string(),
                    fmt(drift.p_down),
                    fmt(drift.p_down_stderr),
                    fmt(drift.p_down_with_truncated),
                    fmt(drift.mean_tau),
                ]);
                let horizon = cfg.horizon_levels.unwrap_or(6);
                let (records, _summary) = walk_run(
                    &master,
                    &scheme,
                    &walker,
                    horizon,
                    max_iter,
                    n_samples.min(200),
                    cfg.seed,
                )?;
                for rec in &records {
                    for (step, st) in rec.stages.iter().enumerate() {
                        walk_rows.push(vec![
                            rec.sample.to_string(),
                            step.to_string(),
                            st.tau_k.to_string(),
                            st.chi_k.to_string(),
                            st.xi.to_string(),
                            format!("{:?}", rec.terminal),
                        ]);
                    }
                }
            }
            let cw = control_walk(0.4, 20, 100_000, cfg.seed);
            w.write_csv(
                "drift.csv",
                &[
                    "y_master",
                    "n_samples",
                    "used",
                    "truncated",
                    "p_down",
                    "p_down_stderr",
                    "p_down_with_truncated",
                    "mean_tau",
                ],
                &drift_rows,
            )?;
            w.write_csv(
                "walk.csv",
                &["sample", "step", "tau_k", "chi_k", "xi", "status"],
                &walk_rows,
            )?;
            w.write_csv(
                "control_walk.csv",
                &["p_up", "horizon", "simulated", "stderr", "closed_form"],
                &[vec![
                    fmt(cw.p_up),
                    cw.horizon.to_string(),
                    fmt(cw.simulated_return),
                    fmt(cw.simulated_stderr),
                    fmt(cw.closed_form_return),
                ]],
            )?;
        }
        ExperimentKind::Escape => {
            let n_orbits = cfg.n_orbits.unwrap_or(100);
            let t_steps = cfg.t_steps.unwrap_or(1_000_000);
            let mut rows = Vec::new();
            for &y0 in &cfg.y_grid {
                let (_, summary) =
                    escape_scan(&params, &cps, y0, n_orbits, t_steps, true, cfg.seed)?;
                rows.push(vec![
                    fmt(params.gamma),
                    fmt(params.a),
                    fmt(y0),
                    t_steps.to_string(),
                    fmt(summary.frac_bounded),
                    fmt(summary.frac_returned),
                    fmt(summary.frac_growth),
                    fmt(summary.growth_ci.0),
                    fmt(summary.growth_ci.1),
                    fmt(summary.c2_reentry_fraction),
                ]);
            }
            w.write_csv(
                "escape.csv",
                &[
                    "gamma",
                    "a",
                    "y0",
                    "t_steps",
                    "frac_bounded",
                    "frac_returned",
                    "frac_growth",
                    "ci_lo",
                    "ci_hi",
                    "c2_reentry_fraction",
                ],
                &rows,
            )?;
        }
        ExperimentKind::Render => {
            let (x_lo, x_hi, y_lo, y_hi) = cfg.window.unwrap_or((-0.5, 0.5, 200.0, 260.0));
            let (px_w, px_h) = cfg.pixels.unwrap_or((400, 300));
            let grid = render_critical_geometry(&params, &cps, (x_lo, x_hi), (y_lo, y_hi), px_w, px_h);
            w.write_text("critical_geometry.svg", &grid.to_svg(2))?;
            w.write_csv(
                "render_counts.csv",
                &["class", "pixels"],
                &(0..=5u8)
                    .map(|c| {
                        vec![
                            c.to_string(),
                            grid.classes.iter().filter(|&&v| v == c).count().to_string(),
                        ]
                    })
                    .collect::<Vec<_>>(),
            )?;
        }
        ExperimentKind::Acceptance => {
            let results = acceptance::run_all();
            let mut rows = Vec::new();
            for r in &results {
                if !r.pass {
                    failures += 1;
                }
                println!(
                    "criterion {:2} [{}] {} (measured {}, threshold {}) in {:.1}s",
                    r.id,
                    if r.pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.measured,
                    r.threshold,
                    r.runtime_s
                );
                rows.push(vec![
                    r.id.to_string(),
                    r.name.clone(),
                    r.measured.clone(),
                    r.threshold.clone(),
                    r.pass.to_string(),
                    format!("{:.2}", r.runtime_s),
                ]);
            }
            w.write_csv(
                "acceptance.csv",
                &["criterion", "name", "measured", "threshold", "pass", "runtime_s"],
                &rows,
            )?;
        }
    }

    w.finish()?;
    Ok(RunOutcome {
        out_dir,
        check_failures: failures,
    })
}

/// Raster classification of a phase-space window by critical-set
/// membership.
pub fn render_critical_geometry(
    params: &MapParams,
    cps: &CriticalParams,
    x_window: (f64, f64),
    y_window: (f64, f64),
    px_w: usize,
    px_h: usize,
) -> ClassGrid {
    let classes = crate::par::run_indexed(px_h, |row| {
        let mut out = vec![0u8; px_w];
        // row 0 at the top = largest y
        let y = y_window.1 - (y_window.1 - y_window.0) * (row as f64 + 0.5) / px_h as f64;
        for (col, slot) in out.iter_mut().enumerate() {
            let x = x_window.0 + (x_window.1 - x_window.0) * (col as f64 + 0.5) / px_w as f64;
            let c = classify(
                Point {
                    x: x.rem_euclid(TAU),
                    y,
                },
                params,
                cps,
                PreimageMode::Exact,
            );
            *slot = if c.in_core_c2 {
                5
            } else if c.in_c2_hat {
                4
            } else if c.in_c2_star {
                3
            } else if c.in_c1 {
                2
            } else if c.in_c1_hat {
                1
            } else {
                0
            };
        }
        out
    })
    .into_iter()
    .flatten()
    .collect();
    ClassGrid {
        width: px_w,
        height: px_h,
        classes,
    }
}

// ---------------------------------------------------------------------------
// Acceptance suite
// ---------------------------------------------------------------------------

pub mod acceptance {
    //! The acceptance criteria: every quantitative estimate this laboratory
    //! checks, with its tolerance pinned in code. Each function returns a
    //! result the tests and the CLI both consume.

    use super::*;
    use crate::numerics::log_log_fit;
    use std::time::Instant;

    #[derive(Clone, Debug)]
    pub struct CriterionResult {
        pub id: u32,
        pub name: String,
        pub measured: String,
        pub threshold: String,
        pub pass: bool,
        pub runtime_s: f64,
    }

    fn result(
        id: u32,
        name: &str,
        measured: String,
        threshold: &str,
        pass: bool,
        started: Instant,
    ) -> CriterionResult {
        CriterionResult {
            id,
            name: name.to_string(),
            measured,
            threshold: threshold.to_string(),
            pass,
            runtime_s: started.elapsed().as_secs_f64(),
        }
    }

    pub fn run_all() -> Vec<CriterionResult> {
        vec![
            criterion_01_area_preservation(),
            criterion_02_pushforward_consistency(),
            criterion_03_density_bounds(),
            criterion_04_expansion_bounds(),
            criterion_05_decomposition_mass_and_inclusions(),
            criterion_06_cell_measure_scaling(),
            criterion_07_band_finiteness_threshold(),
            criterion_08_one_step_decay(),
            criterion_09_fourier_decay(),
            criterion_10_periodicity_decay(),
            criterion_11_averaging_inequality(),
            criterion_12_walk_drift(),
            criterion_13_tau_tail(),
            criterion_14_regime_sanity(),
            criterion_15_iterate_count_formula(),
        ]
    }

    /// shared default constants for the γ used by most criteria
    fn shipped(gamma: f64) -> (MapParams, CriticalParams) {
        let params = MapParams::new(1.0, gamma).expect("valid params");
        // the automated search lands on 512 for these parameter ranges;
        // pinned here so the suite does not depend on search runtime
        let cps = CriticalParams::with_k2(512.0);
        (params, cps)
    }

    pub fn criterion_01_area_preservation() -> CriterionResult {
        let t = Instant::now();
        let mut max_det = 0.0f64;
        for (gi, &gamma) in [1.0, 2.5, 3.0, 4.0].iter().enumerate() {
            let params = MapParams::with_cutoffs(1.0, gamma, 1.0, 10.0, 20.0).unwrap();
            let dets = crate::par::run_indexed(250, |b| {
                let mut rng = ChaCha8Rng::seed_from_u64(101 + gi as u64);
                rng.set_stream(b as u64);
                let mut worst = 0.0f64;
                for _ in 0..1000 {
                    let p = Point {
                        x: rng.random::<f64>() * TAU,
                        y: 10.0 * (1e5f64).powf(rng.random::<f64>()),
                    };
                    let j = jacobian(p, &params);
                    worst = worst.max((j[0][0] * j[1][1] - j[0][1] * j[1][0] - 1.0).abs());
                }
                worst
            });
            max_det = dets.into_iter().fold(max_det, f64::max);
        }
        result(
            1,
            "area preservation |det DF − 1|",
            format!("{max_det:.2e}"),
            "<= 1e-12 at 1e6 points",
            max_det <= 1e-12,
            t,
        )
    }

    pub fn criterion_02_pushforward_consistency() -> CriterionResult {
        let t = Instant::now();
        let mut worst = 0.0f64;
        for (gi, &gamma) in [2.5, 3.0].iter().enumerate() {
            let (params, cps) = shipped(gamma);
            let devs = crate::par::run_indexed(100, |i| {
                let mut rng = ChaCha8Rng::seed_from_u64(202 + gi as u64);
                rng.set_stream(i as u64);
                // centers away from the forcing zeros so the image angle is
                // monotone on the whole pair
                let center = if rng.random::<bool>() {
                    0.5 + 2.0 * rng.random::<f64>() * 0.55
                } else {
                    2.0 + 0.6 * rng.random::<f64>()
                };
                let y = 150.0 * (10.0f64).powf(rng.random::<f64>());
                let freq = 8.0 + 24.0 * rng.random::<f64>();
                let pair = crate::pairs::perturbed_reference_pair(
                    center - 0.15,
                    center + 0.15,
                    Point::new(center, y),
                    &params,
                    0.5 * rng.random::<f64>(),
                    freq,
                    cps.d,
                )
                .expect("pair");
                let a = center - 0.12 + 0.05 * rng.random::<f64>();
                let push = crate::pairs::pushforward_pair(&pair, a, a + 0.06, &params)
                    .expect("pushforward");
                push.consistency
                    .slope_max_rel_dev
                    .max(push.consistency.dslope_max_rel_dev)
                    .max(push.consistency.log_deriv_max_rel_dev)
            });
            worst = devs.into_iter().fold(worst, f64::max);
        }
        result(
            2,
            "pushforward recursion vs finite differences",
            format!("{worst:.2e}"),
            "<= 1e-4 relative",
            worst <= 1e-4,
            t,
        )
    }

    pub fn criterion_03_density_bounds() -> CriterionResult {
        let t = Instant::now();
        let (params, cps) = shipped(3.0);
        let mut violations = 0usize;
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        for _ in 0..1000 {
            let width = cps.delta / 4.0 + (cps.delta * 0.74) * rng.random::<f64>();
            let lo = rng.random::<f64>() * TAU;
            let omega = 1.0 + 6.0 * rng.random::<f64>();
            let amp: f64 = 0.95 * rng.random::<f64>() / omega.max(1.0);
            let phase = rng.random::<f64>() * TAU;
            let pair = crate::pairs::BasicPair::from_fns(
                lo,
                lo + width,
                512,
                |_| 500.0,
                |x| (amp * (omega * x + phase).sin()).exp(),
                &params,
            )
            .expect("pair");
            if pair.log_deriv_norm() >= 1.0 {
                continue;
            }
            let b = crate::pairs::gronwall_bounds(&pair, cps.delta);
            if !b.ok() {
                violations += 1;
            }
        }
        result(
            3,
            "density comparison bounds on regular densities",
            violations.to_string(),
            "0 violations of 1000",
            violations == 0,
            t,
        )
    }

    pub fn criterion_04_expansion_bounds() -> CriterionResult {
        let t = Instant::now();
        let (params, cps) = shipped(3.0);
        let totals = crate::par::run_indexed(1000, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(404);
            rng.set_stream(i as u64);
            let center = rng.random::<f64>() * TAU;
            let y = 1e3 * (100.0f64).powf(rng.random::<f64>());
            let pair = make_reference_pair(
                center - 0.15,
                center + 0.15,
                Point::new(center, y),
                &params,
                cps.delta,
            )
            .expect("pair");
            let audit = expansion_bounds_audit(&pair, &params, &cps);
            audit.one_step_violations + audit.core_violations + audit.two_step_violations
        });
        let violations: usize = totals.into_iter().sum();
        result(
            4,
            "invariance expansion bounds on reference pairs",
            violations.to_string(),
            "0 violations over 1000 pairs",
            violations == 0,
            t,
        )
    }

    pub fn criterion_05_decomposition_mass_and_inclusions() -> CriterionResult {
        let t = Instant::now();
        let mut worst_mass = 0.0f64;
        let mut inclusion_failures = 0usize;
        for (gi, &gamma) in [2.5, 3.0].iter().enumerate() {
            let (params, cps) = shipped(gamma);
            let partition = StandardPartition::new(cps.delta).unwrap();
            let outcomes = crate::par::run_indexed(500, |i| {
                let mut rng = ChaCha8Rng::seed_from_u64(505 + gi as u64);
                rng.set_stream(i as u64);
                let center = rng.random::<f64>() * TAU;
                let y = 300.0 * (10.0f64).powf(rng.random::<f64>());
                let pair = make_reference_pair(
                    center - 0.15,
                    center + 0.15,
                    Point::new(center, y),
                    &params,
                    cps.delta,
                )
                .expect("pair");
                let dec =
                    decompose_image(&pair, &partition, &params, &cps, &DecompConfig::default())
                        .expect("decomposition");
                let mass_err = (dec.total_mass() - 1.0).abs();
                // inclusion sandwich witnesses
                let mut bad = 0usize;
                for sb in &dec.standby {
                    for j in 0..8 {
                        let x = sb.src_lo + (sb.src_hi - sb.src_lo) * (j as f64 + 0.5) / 8.0;
                        let c = classify(
                            Point {
                                x: x.rem_euclid(TAU),
                                y: pair.psi_at(x, &params),
                            },
                            &params,
                            &cps,
                            PreimageMode::Exact,
                        );
                        if !c.in_c1_hat {
                            bad += 1;
                        }
                    }
                }
                if let Some((g_lo, g_hi)) = dec.core_region {
                    for j in 0..32 {
                        let x = pair.x_lo + pair.width() * (j as f64 + 0.5) / 32.0;
                        let c = classify(
                            Point {
                                x: x.rem_euclid(TAU),
                                y: pair.psi_at(x, &params),
                            },
                            &params,
                            &cps,
                            PreimageMode::Exact,
                        );
                        // curve ∩ order-1 set must lie inside the core region
                        if c.in_c1 && (x < g_lo - 1e-9 || x > g_hi + 1e-9) {
                            bad += 1;
                        }
                        // invalid remainder must lie in the augmented order-2 set
                        let in_standby = dec
                            .standby
                            .iter()
                            .any(|s| x >= s.src_lo && x <= s.src_hi);
                        if x >= g_lo && x <= g_hi && !in_standby && !c.in_c2_hat {
                            bad += 1;
                        }
                        // order-2 points must fall in the invalid remainder
                        if c.in_c2 && x >= g_lo && x <= g_hi && in_standby {
                            bad += 1;
                        }
                    }
                }
                (mass_err, bad)
            });
            for (m, b) in outcomes {
                worst_mass = worst_mass.max(m);
                inclusion_failures += b;
            }
        }
        result(
            5,
            "decomposition mass conservation and inclusion sandwich",
            format!("mass_err {worst_mass:.2e}, inclusion failures {inclusion_failures}"),
            "mass <= 1e-8, 0 failures",
            worst_mass <= 1e-8 && inclusion_failures == 0,
            t,
        )
    }

    pub fn criterion_06_cell_measure_scaling() -> CriterionResult {
        let t = Instant::now();
        let mut report = Vec::new();
        let mut pass = true;
        for &(gamma, want) in &[(2.5, -3.0), (3.0, -4.0)] {
            let (params, cps) = shipped(gamma);
            let mut ys = Vec::new();
            let mut ms = Vec::new();
            for j in 0..9 {
                let y = 100.0 * (100.0f64).powf(j as f64 / 8.0);
                let n = (params.big_y_raw(y) / std::f64::consts::PI) as u64;
                let mut total = 0.0;
                let mut ok = true;
                for i in 0..2u8 {
                    match cell_measure_c2(i, n, &params, &cps, 100_000, 606 + j) {
                        Ok(c) => total += c.measure,
                        Err(_) => ok = false,
                    }
                }
                if ok && total > 0.0 {
                    ys.push(y);
                    ms.push(total);
                }
            }
            let fit = log_log_fit(&ys, &ms).expect("fit");
            let good = (fit.slope - want).abs() <= 0.4;
            pass &= good;
            report.push(format!("gamma {gamma}: slope {:.3}", fit.slope));
        }
        result(
            6,
            "order-2 cell measure scaling",
            report.join("; "),
            "slope within 0.4 of -4β",
            pass,
            t,
        )
    }

    pub fn criterion_07_band_finiteness_threshold() -> CriterionResult {
        let t = Instant::now();
        let mut pass = true;
        let mut report = Vec::new();
        for &(gamma, want_convergent) in &[(4.0, true), (2.5, false)] {
            let (params, cps) = shipped(gamma);
            let series =
                band_measure_partial_sum(&params, &cps, 12, (100.0, 1e5), 40_000, 707)
                    .expect("series");
            let got = series.convergent.unwrap_or(false);
            pass &= got == want_convergent;
            report.push(format!(
                "gamma {gamma}: slope {:.3} -> {}",
                series.tail_fit.map(|f| f.slope).unwrap_or(f64::NAN),
                if got { "convergent" } else { "divergent" }
            ));
        }
        result(
            7,
            "order-1 band measure finiteness threshold",
            report.join("; "),
            "convergent iff gamma > 3",
            pass,
            t,
        )
    }

    pub fn criterion_08_one_step_decay() -> CriterionResult {
        let t = Instant::now();
        let (params, cps) = shipped(3.0);
        let partition = StandardPartition::new(cps.delta).unwrap();
        let y_grid: Vec<f64> = (0..7).map(|j| 100.0 * (1000.0f64).powf(j as f64 / 6.0)).collect();
        // a cell crossing the forcing zero so the order-1 mass drives the
        // envelope
        let scan = one_step_error_scan(
            (-0.13, 0.17),
            &y_grid,
            &Observable::cosine(1),
            &params,
            &cps,
            &partition,
        )
        .expect("scan");
        let fit = scan.fit.expect("fit");
        let gate = fit.slope + 2.0 * fit.slope_stderr;
        result(
            8,
            "one-step equidistribution decay exponent",
            format!("slope {:.3} (+2se {:.3})", fit.slope, gate),
            "<= -0.8",
            gate <= -0.8,
            t,
        )
    }

    pub fn criterion_09_fourier_decay() -> CriterionResult {
        let t = Instant::now();
        let mut pass = true;
        let mut report = Vec::new();
        // (gamma, k, gate, heights, points per period)
        let cases: [(f64, usize, f64, Vec<f64>, usize); 2] = [
            (
                3.0,
                1,
                -0.8,
                (0..7).map(|j| 100.0 * (1000.0f64).powf(j as f64 / 6.0)).collect(),
                12,
            ),
            (2.5, 2, -0.85, vec![110.0, 150.0, 205.0, 280.0], 6),
        ];
        for (gamma, k, gate, heights, ppp) in cases {
            let (params, cps) = shipped(gamma);
            let partition = StandardPartition::new(cps.delta).unwrap();
            let mut hs = Vec::new();
            let mut mags = Vec::new();
            for &y in &heights {
                let table = psi_compute(
                    (1.35, 1.65),
                    k,
                    y,
                    2,
                    ppp,
                    &Observable::cosine(1),
                    &params,
                    &cps,
                    &partition,
                    PsiStrategy::Direct,
                )
                .expect("table");
                let fourier = psi_fourier(&table).expect("fourier");
                let mag = fourier.magnitude(1).max(fourier.magnitude(-1));
                if mag > 0.0 {
                    hs.push(y);
                    mags.push(mag);
                }
            }
            let fit = log_log_fit(&hs, &mags).expect("fit");
            let gated = fit.slope + 2.0 * fit.slope_stderr;
            let good = gated <= gate;
            pass &= good;
            report.push(format!(
                "gamma {gamma} k {k}: slope {:.3} (+2se {:.3}) vs {gate}",
                fit.slope, gated
            ));
        }
        result(
            9,
            "phase-table first-mode decay exponents",
            report.join("; "),
            "k=1 <= -0.8; k=2 <= -0.85",
            pass,
            t,
        )
    }

    pub fn criterion_10_periodicity_decay() -> CriterionResult {
        let t = Instant::now();
        let (params, cps) = shipped(3.0);
        let partition = StandardPartition::new(cps.delta).unwrap();
        let mut discrepancies = Vec::new();
        for &y in &[1e3, 1e4] {
            let table = psi_compute(
                (1.35, 1.65),
                1,
                y,
                2,
                16,
                &Observable::cosine(1),
                &params,
                &cps,
                &partition,
                PsiStrategy::Direct,
            )
            .expect("table");
            let per = psi_periodicity_check(&table).expect("periodicity");
            discrepancies.push(per.max_discrepancy);
        }
        let ratio = discrepancies[0] / discrepancies[1].max(1e-300);
        result(
            10,
            "phase-table periodicity discrepancy decay",
            format!(
                "disc(1e3) {:.2e}, disc(1e4) {:.2e}, ratio {:.1}",
                discrepancies[0], discrepancies[1], ratio
            ),
            "ratio >= 5 per decade",
            ratio >= 5.0,
            t,
        )
    }

    pub fn criterion_11_averaging_inequality() -> CriterionResult {
        let t = Instant::now();
        let mut pass = true;
        let mut report = Vec::new();
        // shipped decomposition datasets: inverse expansion rates on
        // strip-crossing reference pairs
        for &(gamma, y) in &[(2.5, 150.0), (3.0, 400.0)] {
            let (params, cps) = shipped(gamma);
            let pair = make_reference_pair(
                -0.05,
                0.25,
                Point::new(0.1, y),
                &params,
                cps.delta,
            )
            .expect("pair");
            let probes = 384;
            let mut weights = Vec::new();
            let mut ls = Vec::new();
            for j in 0..probes {
                let a = pair.x_lo + pair.width() * j as f64 / probes as f64;
                let b = pair.x_lo + pair.width() * (j as f64 + 1.0) / probes as f64;
                let x = 0.5 * (a + b);
                let c = classify(
                    Point {
                        x: x.rem_euclid(TAU),
                        y: pair.psi_at(x, &params),
                    },
                    &params,
                    &cps,
                    PreimageMode::Exact,
                );
                if c.in_c1 {
                    continue;
                }
                weights.push(pair.mass(a, b));
                ls.push(crate::pairs::expansion_rate(&pair, x, &params).abs());
            }
            let l_hat = ls.iter().cloned().fold(f64::INFINITY, f64::min);
            let l_max = ls.iter().cloned().fold(0.0f64, f64::max);
            let fs: Vec<f64> = ls.iter().map(|l| l_hat / l).collect();
            let lambda = (l_hat / l_max).min(0.5);
            let mu: f64 = weights.iter().sum();
            // fit the smallest admissible tail constant, then check
            let mut c_fit = 0.0f64;
            for i in 0..64 {
                let z = (1.0 / lambda).powf(i as f64 / 63.0);
                let tail: f64 = weights
                    .iter()
                    .zip(&fs)
                    .filter(|(_, &f)| f > z * lambda)
                    .map(|(w, _)| w)
                    .sum();
                c_fit = c_fit.max(tail * z / mu);
            }
            match lemma_e0_check(&weights, &fs, lambda, c_fit * 1.0001, 1.0) {
                E0Verdict::Holds { integral, bound, .. } => {
                    report.push(format!("gamma {gamma}: {integral:.3e} <= {bound:.3e}"));
                }
                v => {
                    pass = false;
                    report.push(format!("gamma {gamma}: {v:?}"));
                }
            }
        }
        // constructed hypothesis violation must be flagged, never silently
        // passed
        let verdict = lemma_e0_check(&[1.0], &[1.0], 1e-3, 1e-3, 1.0);
        let flagged = matches!(verdict, E0Verdict::HypothesisViolated { .. });
        pass &= flagged;
        report.push(format!(
            "constructed violation flagged: {flagged}"
        ));
        result(
            11,
            "finite-measure averaging inequality checker",
            report.join("; "),
            "holds on shipped data; violation flagged",
            pass,
            t,
        )
    }

    pub fn criterion_12_walk_drift() -> CriterionResult {
        let t = Instant::now();
        let (params, cps) = shipped(2.5);
        let partition = StandardPartition::new(cps.delta).unwrap();
        let walker = SampleWalker::new(&params, &cps, &partition);
        let nu = nu_min(params.beta()).unwrap();
        let mut pass = true;
        let mut report = Vec::new();
        for &y in &[1e3, 1e4] {
            let scheme = LevelScheme::new(y, nu, &params);
            let master = master_pair((1.35, 1.65), y, &params).expect("master");
            let drift = drift_estimate(&master, 0, &scheme, &walker, 10_000, 2_000_000, 1212)
                .expect("drift");
            let good = drift.p_down >= 0.55;
            pass &= good;
            report.push(format!(
                "y {y:.0e}: P(down) {:.4} ± {:.4} (excl. {} truncated)",
                drift.p_down, drift.p_down_stderr, drift.truncated
            ));
        }
        result(
            12,
            "level-walk downward drift",
            report.join("; "),
            ">= 0.55 at both heights",
            pass,
            t,
        )
    }

    pub fn criterion_13_tau_tail() -> CriterionResult {
        let t = Instant::now();
        let (params, cps) = shipped(2.5);
        let partition = StandardPartition::new(cps.delta).unwrap();
        let walker = SampleWalker::new(&params, &cps, &partition);
        let nu = nu_min(params.beta()).unwrap();
        let y = 1e3;
        let scheme = LevelScheme::new(y, nu, &params);
        let master = master_pair((1.35, 1.65), y, &params).expect("master");
        let s_grid: Vec<f64> = (0..14).map(|j| 4.0f64.powi(j) / 2.0).collect();
        let tail = tau_tail(
            &master,
            0,
            &scheme,
            &walker,
            &s_grid,
            10_000,
            5_000_000,
            1313,
        )
        .expect("tail");
        let fit = tail.fit.expect("fit");
        let theta = tail.theta.unwrap_or(f64::NAN);
        let pass = fit.r_squared >= 0.9 && theta < 1.0 && fit.slope < 0.0;
        result(
            13,
            "level-stopped-time tail",
            format!(
                "R^2 {:.3}, theta {:.3e} (log-tail slope {:.3e})",
                fit.r_squared, theta, fit.slope
            ),
            "R^2 >= 0.9 and theta < 1",
            pass,
            t,
        )
    }

    pub fn criterion_14_regime_sanity() -> CriterionResult {
        let t = Instant::now();
        // confined regime: γ = 0.5
        let params_kam = MapParams::with_cutoffs(1.0, 0.5, 1.0, 2.0, 5.0).unwrap();
        let cps_kam = CriticalParams::with_k2(512.0);
        let (_, kam) = escape_scan(&params_kam, &cps_kam, 50.0, 100, 1_000_000, false, 1414)
            .expect("scan");
        // recurrent regime: γ = 2.5 re-enters the augmented order-2 set
        let (params_rec, cps_rec) = shipped(2.5);
        let (_, rec) = escape_scan(&params_rec, &cps_rec, 1e3, 100, 10_000_000, true, 1415)
            .expect("scan");
        let pass = kam.frac_growth == 0.0 && rec.c2_reentry_fraction >= 0.99;
        result(
            14,
            "regime sanity (confinement and recurrence)",
            format!(
                "growth fraction {:.3}, re-entry fraction {:.3}",
                kam.frac_growth, rec.c2_reentry_fraction
            ),
            "growth = 0; re-entry >= 0.99",
            pass,
            t,
        )
    }

    pub fn criterion_15_iterate_count_formula() -> CriterionResult {
        let t = Instant::now();
        let a = nu_min(1.0);
        let b = nu_min(0.75);
        let c = nu_min(0.5);
        let pass = matches!(a, Ok(2)) && matches!(b, Ok(3)) && c.is_err();
        result(
            15,
            "minimal iterate count formula",
            format!("nu(1.0) = {a:?}, nu(0.75) = {b:?}, nu(0.5) = {c:?}"),
            "2, 3, domain error",
            pass,
            t,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_has_nested_strips() {
        let (params, cps) = (
            MapParams::new(1.0, 3.0).unwrap(),
            CriticalParams::with_k2(512.0),
        );
        let grid = render_critical_geometry(&params, &cps, (-0.4, 0.4), (200.0, 210.0), 160, 40);
        let c1_pixels = grid.count_at_least(2);
        let c2_pixels = grid.count_at_least(4);
        assert!(c1_pixels > 0);
        assert!(c2_pixels < c1_pixels, "{c2_pixels} vs {c1_pixels}");
        // window away from the strip is single-class
        let far = render_critical_geometry(&params, &cps, (1.2, 1.8), (200.0, 210.0), 60, 20);
        assert_eq!(far.count_at_least(1), 0);
    }

    #[test]
    fn render_strip_width_shrinks_with_height() {
        let (params, cps) = (
            MapParams::new(1.0, 3.0).unwrap(),
            CriticalParams::with_k2(512.0),
        );
        let grid =
            render_critical_geometry(&params, &cps, (-0.4, 0.4), (150.0, 1500.0), 200, 120);
        let widths = grid.row_run_widths(2);
        // rows are top (large y) to bottom: widths nondecreasing downward
        let top_avg: f64 =
            widths[..20].iter().map(|&w| w as f64).sum::<f64>() / 20.0;
        let bottom_avg: f64 =
            widths[widths.len() - 20..].iter().map(|&w| w as f64).sum::<f64>() / 20.0;
        assert!(
            top_avg < bottom_avg,
            "top {top_avg} vs bottom {bottom_avg}"
        );
    }
}
