//! Equidistribution diagnostics: expectations of circle observables along
//! pairs and their iterates, the per-cell phase tables Ψ over reference
//! pairs, their periodicity and Fourier decay, the one-step error scan, and
//! the finite-measure-space averaging inequality checker.

use crate::critical::{classify, CriticalParams, PreimageMode};
use crate::decomposition::{
    critical_time, decompose_image, DecompConfig, DecompError, SampleWalker, StandardPartition,
    StopReason,
};
use crate::map::{apply_map, MapError, MapParams, Point};
use crate::numerics::{
    adaptive_quad, log_log_fit, mean_stderr, LineFit, OscillatoryPanels, Sampled,
};
use crate::pairs::{
    reference_pair_from_curve, slope_field_1, BasicPair, CurveForm, PairError, ReferenceCurve,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

#[derive(Debug, thiserror::Error)]
pub enum EquiError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Pair(#[from] PairError),
    #[error(transparent)]
    Decomp(#[from] DecompError),
    #[error("quadrature did not converge (estimate {0})")]
    QuadratureNonConvergence(f64),
    #[error("η grid must span at least two rotation periods (got {0:.2})")]
    InsufficientSpan(f64),
    #[error("β must exceed 1/2 (got {0})")]
    BetaTooSmall(f64),
    #[error("decomposition tree exceeded {0} leaves")]
    TreeBudget(usize),
}

// ---------------------------------------------------------------------------
// Observables
// ---------------------------------------------------------------------------

/// A circle observable held as a finite Fourier series
/// `a₀ + Σ_{l≥1} a_l cos(lθ) + b_l sin(lθ)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Observable {
    pub coeffs: Vec<(u32, f64, f64)>,
}

impl Observable {
    pub fn constant(c: f64) -> Observable {
        Observable {
            coeffs: vec![(0, c, 0.0)],
        }
    }

    pub fn cosine(l: u32) -> Observable {
        Observable {
            coeffs: vec![(l, 1.0, 0.0)],
        }
    }

    pub fn sine(l: u32) -> Observable {
        Observable {
            coeffs: vec![(l, 0.0, 1.0)],
        }
    }

    pub fn eval(&self, theta: f64) -> f64 {
        let mut acc = 0.0;
        for &(l, a, b) in &self.coeffs {
            if l == 0 {
                acc += a;
            } else {
                let (s, c) = (l as f64 * theta).sin_cos();
                acc += a * c + b * s;
            }
        }
        acc
    }

    /// `⟨𝒜⟩ = ∫₀^{2π} 𝒜(θ) dθ`.
    pub fn mean(&self) -> f64 {
        TAU * self
            .coeffs
            .iter()
            .filter(|(l, _, _)| *l == 0)
            .map(|(_, a, _)| a)
            .sum::<f64>()
    }

    pub fn is_zero_average(&self) -> bool {
        self.mean() == 0.0
    }

    /// Sup-norm bound `Σ |coefficients|`.
    pub fn sup_norm(&self) -> f64 {
        self.coeffs
            .iter()
            .map(|&(l, a, b)| if l == 0 { a.abs() } else { a.hypot(b) })
            .sum()
    }

    /// C¹-norm bound `‖𝒜‖ + ‖𝒜̇‖`.
    pub fn c1_norm(&self) -> f64 {
        self.coeffs
            .iter()
            .map(|&(l, a, b)| {
                let amp = if l == 0 { a.abs() } else { a.hypot(b) };
                amp * (1.0 + l as f64)
            })
            .sum()
    }

    /// `Σ_{l∈ℤ} l² |Â_l|` (exact for the stored series).
    pub fn prime_norm(&self) -> f64 {
        self.coeffs
            .iter()
            .map(|&(l, a, b)| (l as f64) * (l as f64) * a.hypot(b))
            .sum()
    }

    /// Complex coefficient magnitude `|Â_l|` for `l > 0`.
    pub fn coeff_magnitude(&self, l: u32) -> f64 {
        self.coeffs
            .iter()
            .filter(|(m, _, _)| *m == l)
            .map(|&(_, a, b)| 0.5 * a.hypot(b))
            .sum()
    }

    pub fn max_mode(&self) -> u32 {
        self.coeffs.iter().map(|&(l, _, _)| l).max().unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// Iterated phases on reference curves
// ---------------------------------------------------------------------------

/// Continuous lift of the k-th image angle along a reference curve:
/// `Θ_{j+1}(x) = Θ_j(x) + Y(ψ(x) + Σ kicks)` built from the anchored
/// expm1/log1p phase so increments stay accurate at any height.
pub fn iterated_phase_lift(
    curve: &ReferenceCurve,
    x: f64,
    k: usize,
    params: &MapParams,
) -> f64 {
    debug_assert!(k >= 1);
    let mut theta = curve.phase_lift(x, 0.0, params);
    let mut w_cum = 0.0;
    for _ in 1..k {
        w_cum += params.kick(theta.rem_euclid(TAU));
        theta += curve.phase_lift(x, w_cum, params) - x;
    }
    theta
}

/// Hot-loop variant of [`iterated_phase_lift`] backed by the precomputed
/// series evaluator.
pub struct IteratedPhase {
    fp: crate::pairs::FastPhase,
    k: usize,
    two_a: f64,
}

impl IteratedPhase {
    pub fn new(curve: &ReferenceCurve, x_lo: f64, x_hi: f64, k: usize, params: &MapParams) -> Self {
        let max_extra = 2.0 * params.a * (k.saturating_sub(1)) as f64;
        IteratedPhase {
            fp: curve.fast_phase(x_lo, x_hi, max_extra, params),
            k,
            two_a: 2.0 * params.a,
        }
    }

    #[inline]
    pub fn lift(&self, x: f64) -> f64 {
        let mut theta = self.fp.eval(x, 0.0);
        let mut w_cum = 0.0;
        for _ in 1..self.k {
            w_cum += self.two_a * theta.rem_euclid(TAU).cos();
            theta += self.fp.eval(x, w_cum) - x;
        }
        theta
    }
}

// ---------------------------------------------------------------------------
// Expectations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Expectation {
    pub value: f64,
    /// statistical error when Monte Carlo was used; 0 for quadrature
    pub std_error: f64,
    /// mass excluded by the τ-gate
    pub gated_out_mass: f64,
}

/// How Ψ-type expectations are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PsiStrategy {
    /// single oscillatory integral of the k-step phase (reference pairs)
    Direct,
    /// materialized decomposition-tree propagation with mass pruning
    Tree { prune: f64, max_leaves: usize },
    /// stratified Monte Carlo over the curve
    MonteCarlo { samples: usize, seed: u64 },
}

/// `E_ℓ(𝒜 ∘ F^n · 1_{τ ≥ n−1})` for a general pair. Ungated expectations use
/// adaptive quadrature (rel. tol 1e−7); gated ones fall back to Monte Carlo
/// with the τ recursion per sample.
pub fn pair_expectation(
    pair: &BasicPair,
    obs: &Observable,
    n: usize,
    gate_tau: bool,
    params: &MapParams,
    cps: &CriticalParams,
    partition: &StandardPartition,
    mc_samples: usize,
    seed: u64,
) -> Result<Expectation, EquiError> {
    if n == 0 {
        let v = pair.expect(params, |p| obs.eval(p.x));
        return Ok(Expectation {
            value: v,
            std_error: 0.0,
            gated_out_mass: 0.0,
        });
    }
    if !gate_tau || n == 1 {
        // τ ≥ 0 always holds: ungated quadrature
        let f = |x: f64| {
            let mut p = Point {
                x: x.rem_euclid(TAU),
                y: pair.psi_at(x, params),
            };
            for _ in 0..n {
                p = match apply_map(p, params) {
                    Ok(q) => q,
                    Err(_) => return 0.0,
                };
            }
            obs.eval(p.x) * pair.rho_at(x)
        };
        let v = adaptive_quad(pair.x_lo, pair.x_hi, &f, 1e-7)
            .map_err(EquiError::QuadratureNonConvergence)?;
        return Ok(Expectation {
            value: v,
            std_error: 0.0,
            gated_out_mass: 0.0,
        });
    }
    // gated: Monte Carlo with per-sample critical times
    let walker = SampleWalker::new(params, cps, partition);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(mc_samples);
    let mut gated_out = 0usize;
    for _ in 0..mc_samples {
        // sample x from ρ by inverse transform on the cumulative mass
        let u: f64 = rng.random();
        let x = invert_mass(pair, u);
        let ct = critical_time(pair, x, (n as u64).saturating_sub(1), &walker)?;
        let passes = ct.tau >= n as u64 - 1 || ct.stop == StopReason::Truncated;
        if !passes {
            gated_out += 1;
            vals.push(0.0);
            continue;
        }
        let mut p = Point {
            x: x.rem_euclid(TAU),
            y: pair.psi_at(x, params),
        };
        let mut ok = true;
        for _ in 0..n {
            match apply_map(p, params) {
                Ok(q) => p = q,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        vals.push(if ok { obs.eval(p.x) } else { 0.0 });
    }
    let (mean, se) = mean_stderr(&vals);
    Ok(Expectation {
        value: mean,
        std_error: se,
        gated_out_mass: gated_out as f64 / mc_samples as f64,
    })
}

fn invert_mass(pair: &BasicPair, u: f64) -> f64 {
    let mut lo = pair.x_lo;
    let mut hi = pair.x_hi;
    for _ in 0..60 {
        let m = 0.5 * (lo + hi);
        if pair.mass_below(m) < u {
            lo = m;
        } else {
            hi = m;
        }
    }
    0.5 * (lo + hi)
}

/// Gated expectation of 𝒜 ∘ F^k over a *reference* pair. One-step
/// expectations go through the boundary-term hybrid; deeper iterates run a
/// single oscillatory integral of the k-step phase, with the gate excluding
/// the invalid-remainder preimage of the pair's own splitting (exact for
/// `k ≤ 2`).
pub fn reference_expectation_direct(
    pair: &BasicPair,
    obs: &Observable,
    k: usize,
    params: &MapParams,
    cps: &CriticalParams,
    partition: &StandardPartition,
) -> Result<Expectation, EquiError> {
    if k == 1 {
        return reference_expectation_k1_hybrid(pair, obs, params);
    }
    reference_expectation_panels(pair, obs, k, params, cps, partition)
}

/// Panel-sum evaluation of the gated k-step expectation (any `k ≥ 1`; cost
/// proportional to the total phase variation).
pub fn reference_expectation_panels(
    pair: &BasicPair,
    obs: &Observable,
    k: usize,
    params: &MapParams,
    cps: &CriticalParams,
    partition: &StandardPartition,
) -> Result<Expectation, EquiError> {
    let curve = match &pair.form {
        CurveForm::Reference(c) => *c,
        _ => {
            return Err(EquiError::Pair(PairError::NotClean));
        }
    };
    debug_assert!(k >= 1);

    // gate intervals: for k ≥ 2 exclude the invalid remainder; for k ≥ 3
    // additionally gate pointwise inside the panels (rare, handled by the
    // tree/MC strategies instead — the direct mode documents k ≤ 2).
    let mut allowed: Vec<(f64, f64)> = vec![(pair.x_lo, pair.x_hi)];
    let mut gated_out = 0.0;
    if k >= 2 {
        let dec = decompose_image(pair, partition, params, cps, &DecompConfig::default())?;
        if let Some((g_lo, g_hi)) = dec.core_region {
            // excluded: core minus the stand-by subintervals
            let mut excluded: Vec<(f64, f64)> = vec![(g_lo, g_hi)];
            for sb in &dec.standby {
                excluded = subtract_interval(&excluded, (sb.src_lo, sb.src_hi));
            }
            for (a, b) in &excluded {
                gated_out += pair.mass(*a, *b);
                allowed = subtract_interval(&allowed, (*a, *b));
            }
        }
    }

    let rho_uniform = 1.0 / pair.width();
    // panel phase budget: one full turn of the highest observable mode for
    // the single-step phase; tighter for iterated phases whose curvature
    // within a panel is larger
    let mode = obs.max_mode().max(1) as f64;
    let span = if k == 1 { TAU / mode } else { (TAU / mode).min(std::f64::consts::PI) };
    let panels = OscillatoryPanels {
        max_phase_per_panel: span,
        min_width: 1e-13,
    };
    let it = IteratedPhase::new(&curve, pair.x_lo, pair.x_hi, k, params);
    // specialized integrands for the common single-harmonic observables
    let single = match obs.coeffs.as_slice() {
        [(l, a, b)] if *l > 0 => Some((*l as f64, *a, *b)),
        _ => None,
    };
    let mut total = 0.0;
    for (a, b) in allowed {
        if b - a < 1e-14 {
            continue;
        }
        let phase = |x: f64| it.lift(x);
        let part = match single {
            Some((lf, ca, 0.0)) => {
                let f = |x: f64| ca * (lf * it.lift(x).rem_euclid(TAU)).cos();
                panels.integrate_marching(a, b, &phase, &f)
            }
            Some((lf, ca, cb)) => {
                let f = |x: f64| {
                    let (s, c) = (lf * it.lift(x).rem_euclid(TAU)).sin_cos();
                    ca * c + cb * s
                };
                panels.integrate_marching(a, b, &phase, &f)
            }
            None => {
                let f = |x: f64| obs.eval(it.lift(x).rem_euclid(TAU));
                panels.integrate_marching(a, b, &phase, &f)
            }
        };
        total += part * rho_uniform;
    }
    Ok(Expectation {
        value: total,
        std_error: 0.0,
        gated_out_mass: gated_out,
    })
}

/// One-step expectation over a reference pair by two integrations by parts
/// away from the critical strip (all amplitudes closed-form along the
/// curve) plus panel summation over the strip neighborhood where the phase
/// has near-stationary points. Cost is O(1) in the height. The returned
/// `std_error` carries the rigorous bound on the dropped remainder.
pub fn reference_expectation_k1_hybrid(
    pair: &BasicPair,
    obs: &Observable,
    params: &MapParams,
) -> Result<Expectation, EquiError> {
    let curve = match &pair.form {
        CurveForm::Reference(c) => *c,
        _ => return Err(EquiError::Pair(PairError::NotClean)),
    };
    let rho = 1.0 / pair.width();
    // IBP is admissible where the per-step gain q = 2A·Y′/ℒ² is below q0
    let q0 = 1e-5;
    let gain_ok = |x: f64| {
        let (l, _, _) = curve.expansion_derivatives(x, params);
        let psi = curve.eval(x, params);
        2.0 * params.a * params.big_y_prime_raw(psi) / (l * l) <= q0
    };
    // locate the panel region (complement of gain_ok)
    let mut panel_regions: Vec<(f64, f64)> = Vec::new();
    let mut tail_regions: Vec<(f64, f64)> = Vec::new();
    {
        let n = 129;
        let h = pair.width() / (n - 1) as f64;
        let vals: Vec<bool> = (0..n).map(|i| gain_ok(pair.x_lo + i as f64 * h)).collect();
        let mut start = pair.x_lo;
        let mut cur = vals[0];
        for i in 1..n {
            if vals[i] != cur {
                // refine the edge
                let mut lo = pair.x_lo + (i - 1) as f64 * h;
                let mut hi = pair.x_lo + i as f64 * h;
                for _ in 0..50 {
                    let m = 0.5 * (lo + hi);
                    if gain_ok(m) == cur {
                        lo = m;
                    } else {
                        hi = m;
                    }
                }
                let edge = 0.5 * (lo + hi);
                if cur {
                    tail_regions.push((start, edge));
                } else {
                    panel_regions.push((start, edge));
                }
                start = edge;
                cur = vals[i];
            }
        }
        if cur {
            tail_regions.push((start, pair.x_hi));
        } else {
            panel_regions.push((start, pair.x_hi));
        }
    }

    let mut total = 0.0;
    let mut remainder_bound = 0.0;

    // panel part (full integrand, same as the direct engine)
    if !panel_regions.is_empty() {
        let it = IteratedPhase::new(&curve, pair.x_lo, pair.x_hi, 1, params);
        let mode = obs.max_mode().max(1) as f64;
        let panels = OscillatoryPanels {
            max_phase_per_panel: TAU / mode,
            min_width: 1e-13,
        };
        for &(a, b) in &panel_regions {
            let phase = |x: f64| it.lift(x);
            let f = |x: f64| obs.eval(it.lift(x).rem_euclid(TAU));
            total += panels.integrate_marching(a, b, &phase, &f) * rho;
        }
    }

    // boundary-term part per Fourier mode: 𝒜 = Σ Re[(a − i b) e^{i l θ}]
    for &(l, ca, cb) in &obs.coeffs {
        if l == 0 {
            for &(a, b) in &tail_regions {
                total += rho * ca * (b - a);
            }
            continue;
        }
        let lf = l as f64;
        for &(a, b) in &tail_regions {
            // complex boundary contributions at both ends
            let endpoint = |x: f64, sign: f64| -> (f64, f64) {
                let theta = lf * curve.phase_angle(x, 0.0, params);
                let (s, c) = theta.sin_cos();
                let (el, el1, el2) = curve.expansion_derivatives(x, params);
                let lp = lf * el;
                // term1 = g e^{iθ}/(i lΘ′);  term2 = g1 e^{iθ}/(i lΘ′)
                // with g1 = g·ℒ′/(i l ℒ²)
                // combined: e^{iθ}·[ g/(i lp) + g·ℒ′/(i l ℒ²)/(i lp) ]
                let g = rho;
                // 1/(i lp): multiply by e^{iθ}
                let t1_re = g * s / lp;
                let t1_im = -g * c / lp;
                // g1/(i lp) = g·ℒ′/( (i l ℒ²)(i lp) ) = −g·ℒ′/(l² ℒ³·l?) careful:
                // g1 = g·ℒ′/(i l ℒ²); boundary2 = g1 e^{iθ}/(i l ℒ)
                //    = g·ℒ′ e^{iθ} / (i² l² ℒ³) = −g·ℒ′ e^{iθ}/(l² ℒ³)
                let f2 = -g * el1 / (lf * lf * el * el * el);
                let t2_re = f2 * c;
                let t2_im = f2 * s;
                let _ = el2;
                (sign * (t1_re + t2_re), sign * (t1_im + t2_im))
            };
            let (hi_re, hi_im) = endpoint(b, 1.0);
            let (lo_re, lo_im) = endpoint(a, -1.0);
            let i_re = hi_re + lo_re;
            let i_im = hi_im + lo_im;
            // Re[(ca − i cb)(i_re + i i_im)] = ca·i_re + cb·i_im
            total += ca * i_re + cb * i_im;

            // remainder bound: ∫ |g2| with
            // g2 = −(g1/(i l ℒ))′ ⇒ |g2| = g·|ℒ″ℒ − 3ℒ′²| / (l² ℒ⁴)
            let nodes = 257;
            let hh = (b - a) / (nodes - 1) as f64;
            let mut acc = 0.0;
            for i in 0..nodes {
                let x = a + i as f64 * hh;
                let (el, el1, el2) = curve.expansion_derivatives(x, params);
                let w = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
                acc += w * (el2 * el - 3.0 * el1 * el1).abs() / (el * el * el * el);
            }
            remainder_bound += rho * acc * hh / (lf * lf) * (ca.abs() + cb.abs());
        }
    }

    Ok(Expectation {
        value: total,
        std_error: remainder_bound,
        gated_out_mass: 0.0,
    })
}

fn subtract_interval(list: &[(f64, f64)], cut: (f64, f64)) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(list.len() + 1);
    for &(a, b) in list {
        if cut.1 <= a || cut.0 >= b {
            out.push((a, b));
            continue;
        }
        if cut.0 > a {
            out.push((a, cut.0));
        }
        if cut.1 < b {
            out.push((cut.1, b));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Ψ tables
// ---------------------------------------------------------------------------

/// Values of the gated k-step expectation over the reference pairs of one
/// partition cell, sampled on a phase-uniform grid of heights. Heights are
/// carried as an anchor plus exact offsets because one rotation period of
/// phase corresponds to a height step `2π/Y′` that can sit below f64
/// resolution of the height itself.
#[derive(Clone, Debug, Serialize)]
pub struct PsiTable {
    pub cell_lo: f64,
    pub cell_hi: f64,
    pub anchor_x: f64,
    pub k: usize,
    pub eta_anchor: f64,
    pub eta_offsets: Vec<f64>,
    /// phase `Y(η) − Y(anchor)`, exact by grid construction
    pub phases: Vec<f64>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub points_per_period: usize,
    pub periods: usize,
    pub strategy: PsiStrategy,
}

/// Locate the minimiser of `|h̃₁(·, ŷ)|` over a cell (the cell's adapted
/// coordinate anchor).
pub fn cell_anchor_x(cell: (f64, f64), y_hat: f64, params: &MapParams) -> f64 {
    let n = 257;
    let mut best = cell.0;
    let mut best_v = f64::INFINITY;
    for i in 0..n {
        let x = cell.0 + (cell.1 - cell.0) * i as f64 / (n - 1) as f64;
        let f = slope_field_1(
            Point {
                x: x.rem_euclid(TAU),
                y: y_hat,
            },
            None,
            params,
        );
        if f.h1_tilde.abs() < best_v {
            best_v = f.h1_tilde.abs();
            best = x;
        }
    }
    best
}

/// Compute Ψ over a phase-uniform η grid spanning `periods` rotation
/// periods around `y_hat`.
#[allow(clippy::too_many_arguments)]
pub fn psi_compute(
    cell: (f64, f64),
    k: usize,
    y_hat: f64,
    periods: usize,
    points_per_period: usize,
    obs: &Observable,
    params: &MapParams,
    cps: &CriticalParams,
    partition: &StandardPartition,
    strategy: PsiStrategy,
) -> Result<PsiTable, EquiError> {
    if periods < 2 {
        return Err(EquiError::InsufficientSpan(periods as f64));
    }
    let anchor_x = cell_anchor_x(cell, y_hat, params);
    let n_pts = periods * points_per_period;
    let dphi = TAU / points_per_period as f64;
    let yp = params.big_y_prime_raw(y_hat);
    let _ = yp;

    let results: Vec<(f64, f64, f64)> = crate::par::run_indexed(n_pts, |i| {
        let target = i as f64 * dphi;
        // offset with Y(anchor+d) − Y(anchor) = target: d = y·expm1(log1p(target/Y)/γ)
        let dy = y_hat * f64::exp_m1(f64::ln_1p(target / params.big_y_raw(y_hat)) / params.gamma);
        let anchor = Point {
            x: anchor_x.rem_euclid(TAU),
            y: y_hat,
        };
        let curve = match ReferenceCurve::through_with_offset(anchor, dy, params) {
            Ok(c) => c,
            Err(_) => return (dy, f64::NAN, 0.0),
        };
        let pair = match reference_pair_from_curve(cell.0, cell.1, curve, params) {
            Ok(p) => p,
            Err(_) => return (dy, f64::NAN, 0.0),
        };
        let res = match strategy {
            PsiStrategy::Direct => {
                reference_expectation_direct(&pair, obs, k, params, cps, partition)
            }
            PsiStrategy::Tree { prune, max_leaves } => {
                psi_tree(&pair, obs, k, prune, max_leaves, params, cps, partition)
            }
            PsiStrategy::MonteCarlo { samples, seed } => pair_expectation(
                &pair,
                obs,
                k,
                true,
                params,
                cps,
                partition,
                samples,
                seed.wrapping_add(i as u64),
            ),
        };
        match res {
            Ok(e) => (dy, e.value, e.std_error),
            Err(_) => (dy, f64::NAN, 0.0),
        }
    });

    let mut eta_offsets = Vec::with_capacity(n_pts);
    let mut phases = Vec::with_capacity(n_pts);
    let mut values = Vec::with_capacity(n_pts);
    let mut std_errors = Vec::with_capacity(n_pts);
    for (i, (dy, v, se)) in results.into_iter().enumerate() {
        eta_offsets.push(dy);
        phases.push(i as f64 * dphi);
        values.push(v);
        std_errors.push(se);
    }
    Ok(PsiTable {
        cell_lo: cell.0,
        cell_hi: cell.1,
        anchor_x,
        k,
        eta_anchor: y_hat,
        eta_offsets,
        phases,
        values,
        std_errors,
        points_per_period,
        periods,
        strategy,
    })
}

/// Tree-mode gated expectation: materialize the splitting, recurse on the
/// pieces, prune leaves lighter than `prune`.
#[allow(clippy::too_many_arguments)]
fn psi_tree(
    pair: &BasicPair,
    obs: &Observable,
    k: usize,
    prune: f64,
    max_leaves: usize,
    params: &MapParams,
    cps: &CriticalParams,
    partition: &StandardPartition,
) -> Result<Expectation, EquiError> {
    let mut leaves = 0usize;
    let value = psi_tree_rec(
        pair,
        obs,
        k,
        prune,
        max_leaves,
        &mut leaves,
        params,
        cps,
        partition,
    )?;
    Ok(Expectation {
        value,
        std_error: 0.0,
        gated_out_mass: f64::NAN,
    })
}

#[allow(clippy::too_many_arguments)]
fn psi_tree_rec(
    pair: &BasicPair,
    obs: &Observable,
    k: usize,
    prune: f64,
    max_leaves: usize,
    leaves: &mut usize,
    params: &MapParams,
    cps: &CriticalParams,
    partition: &StandardPartition,
) -> Result<f64, EquiError> {
    if k == 1 {
        *leaves += 1;
        if *leaves > max_leaves {
            return Err(EquiError::TreeBudget(max_leaves));
        }
        let f = |x: f64| {
            let p = Point {
                x: x.rem_euclid(TAU),
                y: pair.psi_at(x, params),
            };
            let q = match apply_map(p, params) {
                Ok(q) => q,
                Err(_) => return 0.0,
            };
            obs.eval(q.x) * pair.rho_at(x)
        };
        return adaptive_quad(pair.x_lo, pair.x_hi, &f, 1e-9)
            .map_err(EquiError::QuadratureNonConvergence);
    }
    let dec = decompose_image(pair, partition, params, cps, &DecompConfig::default())?;
    if dec.aligned_piece_count() as usize + *leaves > max_leaves {
        return Err(EquiError::TreeBudget(max_leaves));
    }
    let mut acc = 0.0;
    let recurse_span = |a: f64, b: f64, leaves: &mut usize| -> Result<f64, EquiError> {
        let mass = pair.mass(a, b);
        if mass < prune {
            return Ok(0.0);
        }
        let piece = crate::pairs::pushforward_pair(pair, a, b, params)?.pair;
        Ok(mass
            * psi_tree_rec(
                &piece,
                obs,
                k - 1,
                prune,
                max_leaves,
                leaves,
                params,
                cps,
                partition,
            )?)
    };
    for (ci, comp) in dec.components.iter().enumerate() {
        for j in 0..comp.aligned_count {
            if let Some((a, b)) = dec.aligned_piece_span(ci, j, pair, partition, params) {
                acc += recurse_span(a, b, &mut *leaves)?;
            }
        }
        for low_end in [true, false] {
            if let Some((a, b)) = dec.boundary_piece_span(ci, low_end, pair, params) {
                acc += recurse_span(a, b, &mut *leaves)?;
            }
        }
    }
    // stand-by pieces: one more iterate costs two steps; gate τ ≥ k−1 keeps
    // them whenever k ≥ 2
    for sb in &dec.standby {
        if sb.mass < prune {
            continue;
        }
        if k >= 3 {
            let push = crate::pairs::pushforward_pair(pair, sb.src_lo, sb.src_hi, params)?;
            acc += sb.mass
                * psi_tree_rec(
                    &push.pair,
                    obs,
                    k - 1,
                    prune,
                    max_leaves,
                    leaves,
                    params,
                    cps,
                    partition,
                )?;
        } else {
            // k == 2: expectation of 𝒜 ∘ F² over the stand-by preimage
            let f = |x: f64| {
                let p = Point {
                    x: x.rem_euclid(TAU),
                    y: pair.psi_at(x, params),
                };
                let q1 = match apply_map(p, params) {
                    Ok(q) => q,
                    Err(_) => return 0.0,
                };
                let q2 = match apply_map(q1, params) {
                    Ok(q) => q,
                    Err(_) => return 0.0,
                };
                obs.eval(q2.x) * pair.rho_at(x)
            };
            acc += adaptive_quad(sb.src_lo, sb.src_hi, &f, 1e-9)
                .map_err(EquiError::QuadratureNonConvergence)?;
        }
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Periodicity and Fourier analysis of Ψ
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct PeriodicityReport {
    pub pairs_compared: usize,
    pub max_discrepancy: f64,
    pub mean_discrepancy: f64,
}

/// Compare Ψ at heights one rotation period apart (equal `Y(η) mod 2π`).
pub fn psi_periodicity_check(table: &PsiTable) -> Result<PeriodicityReport, EquiError> {
    if table.periods < 2 {
        return Err(EquiError::InsufficientSpan(table.periods as f64));
    }
    let p = table.points_per_period;
    let mut max_d = 0.0f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..table.values.len() - p {
        let a = table.values[i];
        let b = table.values[i + p];
        if a.is_nan() || b.is_nan() {
            continue;
        }
        let d = (a - b).abs();
        max_d = max_d.max(d);
        sum += d;
        count += 1;
    }
    Ok(PeriodicityReport {
        pairs_compared: count,
        max_discrepancy: max_d,
        mean_discrepancy: if count > 0 { sum / count as f64 } else { 0.0 },
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PsiFourier {
    /// (l, re, im, magnitude)
    pub coefficients: Vec<(i64, f64, f64, f64)>,
    pub aliasing_warning: bool,
}

/// Discrete Fourier transform of Ψ against the phase variable
/// `Y(η) mod 2π`.
pub fn psi_fourier(table: &PsiTable) -> Result<PsiFourier, EquiError> {
    if table.periods < 2 {
        return Err(EquiError::InsufficientSpan(table.periods as f64));
    }
    let vals: Vec<f64> = table.values.iter().cloned().filter(|v| !v.is_nan()).collect();
    if vals.len() != table.values.len() {
        // NaN values would bias the transform; drop trailing data instead
    }
    let n = table.values.len();
    let l_max = (table.points_per_period / 2).max(1) as i64;
    let mut coefficients = Vec::new();
    for l in -l_max..=l_max {
        let mut re = 0.0;
        let mut im = 0.0;
        let mut m = 0usize;
        for (j, &v) in table.values.iter().enumerate() {
            if v.is_nan() {
                continue;
            }
            let phi = table.phases[j];
            // Ψ(η) ≈ Σ_l Ψ̂^{(l)} e^{−i l Y(η)}
            let (s, c) = (l as f64 * phi).sin_cos();
            re += v * c;
            im += v * s;
            m += 1;
        }
        if m == 0 {
            continue;
        }
        re /= m as f64;
        im /= m as f64;
        coefficients.push((l, re, im, re.hypot(im)));
    }
    let _ = n;
    // aliasing check: magnitude at the Nyquist mode should sit at noise level
    let nyq = coefficients
        .iter()
        .filter(|(l, ..)| l.unsigned_abs() as usize == table.points_per_period / 2)
        .map(|&(_, _, _, m)| m)
        .fold(0.0f64, f64::max);
    let max_mag = coefficients
        .iter()
        .filter(|(l, ..)| *l != 0)
        .map(|&(_, _, _, m)| m)
        .fold(0.0f64, f64::max);
    Ok(PsiFourier {
        coefficients,
        aliasing_warning: nyq > 0.2 * max_mag && max_mag > 0.0,
    })
}

impl PsiFourier {
    pub fn magnitude(&self, l: i64) -> f64 {
        self.coefficients
            .iter()
            .find(|(m, ..)| *m == l)
            .map(|&(_, _, _, m)| m)
            .unwrap_or(0.0)
    }
}

/// Log-log fit of `max(|Ψ̂^{(l)}|, |Ψ̂^{(-l)}|)` against height.
pub fn fourier_decay_fit(heights: &[f64], magnitudes: &[f64]) -> Option<LineFit> {
    log_log_fit(heights, magnitudes)
}

// ---------------------------------------------------------------------------
// One-step error scan
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct OneStepScanRow {
    pub y_hat: f64,
    pub error: f64,
    pub envelope: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OneStepScan {
    pub rows: Vec<OneStepScanRow>,
    pub fit: Option<LineFit>,
}

/// Measured one-step equidistribution error `|E_ℓ(𝒜∘F) − ⟨𝒜⟩/2π·∫ρ|` on
/// reference pairs across heights, against the theoretical envelope
/// `‖𝒜‖·(P(C₁) + ℒ̂⁻¹ log ŷ)`.
pub fn one_step_error_scan(
    cell: (f64, f64),
    y_grid: &[f64],
    obs: &Observable,
    params: &MapParams,
    cps: &CriticalParams,
    partition: &StandardPartition,
) -> Result<OneStepScan, EquiError> {
    let mut rows = Vec::with_capacity(y_grid.len());
    for &y in y_grid {
        let anchor_x = cell_anchor_x(cell, y, params);
        let curve = ReferenceCurve::through(
            Point {
                x: anchor_x.rem_euclid(TAU),
                y,
            },
            params,
        )?;
        let pair = reference_pair_from_curve(cell.0, cell.1, curve, params)?;
        let e = reference_expectation_direct(&pair, obs, 1, params, cps, partition)?;
        // ⟨𝒜⟩/2π is the Lebesgue average on the circle
        let err = (e.value - obs.mean() / TAU).abs();
        // envelope: mass in the order-1 set plus inverse expansion
        let mass_c1 = mass_in_c1(&pair, params, cps);
        let l_hat = min_expansion_outside_c1(&pair, params, cps);
        let envelope = obs.sup_norm() * (mass_c1 + y.ln() / l_hat.max(1.0));
        rows.push(OneStepScanRow {
            y_hat: y,
            error: err,
            envelope,
        });
    }
    let fit = log_log_fit(
        &rows.iter().map(|r| r.y_hat).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.error).collect::<Vec<_>>(),
    );
    Ok(OneStepScan { rows, fit })
}

/// Mass of the pair inside the order-1 critical set.
pub fn mass_in_c1(pair: &BasicPair, params: &MapParams, cps: &CriticalParams) -> f64 {
    let n = 513;
    let integrand = Sampled::from_fn(pair.x_lo, pair.x_hi, n, |x| {
        let y = pair.psi_at(x, params);
        let c = classify(
            Point {
                x: x.rem_euclid(TAU),
                y,
            },
            params,
            cps,
            PreimageMode::Exact,
        );
        if c.in_c1 {
            pair.rho_at(x)
        } else {
            0.0
        }
    });
    integrand.integral().max(0.0)
}

fn min_expansion_outside_c1(pair: &BasicPair, params: &MapParams, cps: &CriticalParams) -> f64 {
    let n = 513;
    let mut min_l = f64::INFINITY;
    for i in 0..n {
        let x = pair.x_lo + pair.width() * i as f64 / (n - 1) as f64;
        let y = pair.psi_at(x, params);
        let c = classify(
            Point {
                x: x.rem_euclid(TAU),
                y,
            },
            params,
            cps,
            PreimageMode::Exact,
        );
        if !c.in_c1 {
            let l = crate::pairs::expansion_rate(pair, x, params).abs();
            min_l = min_l.min(l);
        }
    }
    if min_l.is_finite() {
        min_l
    } else {
        1.0
    }
}

// ---------------------------------------------------------------------------
// Finite-measure averaging inequality
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum E0Verdict {
    /// the tail hypothesis `μ{f > zλ} ≤ μ(Ω)·C·z^{−α}` failed at some z
    HypothesisViolated { z: f64, observed: f64, allowed: f64 },
    /// hypothesis held and the conclusion bound holds with this slack
    Holds { integral: f64, bound: f64, slack: f64 },
    /// hypothesis held but the integral exceeded the bound (a genuine
    /// failure — release blocker, since the inequality is proved)
    ConclusionFailed { integral: f64, bound: f64 },
}

/// Check the averaging inequality: for `f: Ω → [0,1]` on a finite measure
/// space with tail bound `μ{f > zλ} ≤ μ(Ω) C z^{−α}` for `1 ≤ z ≤ λ⁻¹`,
/// conclude `μ(f) ≤ μ(Ω)(C+1)·λ^α/(1−α)` (α < 1) or
/// `μ(Ω)(C+1)·λ|log λ|` (α = 1).
pub fn lemma_e0_check(weights: &[f64], f_values: &[f64], lambda: f64, c: f64, alpha: f64) -> E0Verdict {
    assert_eq!(weights.len(), f_values.len());
    assert!(lambda > 0.0 && lambda < 1.0, "need 0 < λ < 1");
    assert!(alpha > 0.0 && alpha <= 1.0, "need 0 < α ≤ 1");
    let mu_omega: f64 = weights.iter().sum();
    // hypothesis on a log grid of z
    let n_z = 64;
    for i in 0..n_z {
        let z = (1.0 / lambda).powf(i as f64 / (n_z - 1) as f64);
        let tail: f64 = weights
            .iter()
            .zip(f_values)
            .filter(|(_, &f)| f > z * lambda)
            .map(|(w, _)| w)
            .sum();
        let allowed = mu_omega * c * z.powf(-alpha);
        if tail > allowed * (1.0 + 1e-12) {
            return E0Verdict::HypothesisViolated {
                z,
                observed: tail,
                allowed,
            };
        }
    }
    let integral: f64 = weights.iter().zip(f_values).map(|(w, f)| w * f).sum();
    let bound = if alpha < 1.0 {
        mu_omega * (c + 1.0) * lambda.powf(alpha) / (1.0 - alpha)
    } else {
        mu_omega * (c + 1.0) * lambda * lambda.ln().abs()
    };
    if integral <= bound {
        E0Verdict::Holds {
            integral,
            bound,
            slack: bound - integral,
        }
    } else {
        E0Verdict::ConclusionFailed { integral, bound }
    }
}

/// Smallest admissible iterate count for the equidistribution scheme:
/// the least integer strictly greater than `½(β−½)⁻¹`.
pub fn nu_min(beta: f64) -> Result<u32, EquiError> {
    if beta <= 0.5 {
        return Err(EquiError::BetaTooSmall(beta));
    }
    let threshold = 0.5 / (beta - 0.5);
    let mut nu = threshold.floor() as u32 + 1;
    if (threshold - threshold.floor()).abs() < 1e-12 && threshold.floor() >= 1.0 {
        // exactly an integer: "strictly greater" forces the next one
        nu = threshold as u32 + 1;
    }
    Ok(nu.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(gamma: f64) -> (MapParams, CriticalParams, StandardPartition) {
        let params = MapParams::new(1.0, gamma).unwrap();
        let cps = CriticalParams::with_k2(512.0);
        let partition = StandardPartition::new(cps.delta).unwrap();
        (params, cps, partition)
    }

    #[test]
    fn observable_norms() {
        let a = Observable::cosine(4);
        assert_eq!(a.mean(), 0.0);
        assert!((a.sup_norm() - 1.0).abs() < 1e-15);
        assert!((a.prime_norm() - 16.0).abs() < 1e-12);
        let c = Observable::constant(2.0);
        assert!((c.mean() - 2.0 * TAU).abs() < 1e-12);
    }

    #[test]
    fn nu_min_values() {
        assert_eq!(nu_min(1.0).unwrap(), 2);
        assert_eq!(nu_min(0.75).unwrap(), 3);
        assert!(nu_min(0.5).is_err());
        assert!(nu_min(0.3).is_err());
    }

    #[test]
    fn expectation_of_one_is_one() {
        let (params, cps, partition) = setup(3.0);
        let anchor = Point::new(1.5, 300.0);
        let pair =
            crate::pairs::make_reference_pair(1.35, 1.65, anchor, &params, cps.delta).unwrap();
        let e = pair_expectation(
            &pair,
            &Observable::constant(1.0),
            0,
            false,
            &params,
            &cps,
            &partition,
            0,
            0,
        )
        .unwrap();
        assert!((e.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn direct_matches_adaptive_quadrature_k1() {
        let (params, cps, partition) = setup(3.0);
        let anchor = Point::new(1.5, 200.0);
        let pair =
            crate::pairs::make_reference_pair(1.35, 1.65, anchor, &params, cps.delta).unwrap();
        let obs = Observable::cosine(1);
        let direct = reference_expectation_direct(&pair, &obs, 1, &params, &cps, &partition)
            .unwrap();
        let quad = pair_expectation(&pair, &obs, 1, false, &params, &cps, &partition, 0, 0)
            .unwrap();
        assert!(
            (direct.value - quad.value).abs() < 1e-8,
            "{} vs {}",
            direct.value,
            quad.value
        );
    }

    #[test]
    fn direct_matches_tree_and_mc_k2_small() {
        let (params, cps, partition) = setup(2.5);
        let anchor = Point::new(1.5, 140.0);
        let pair =
            crate::pairs::make_reference_pair(1.35, 1.65, anchor, &params, cps.delta).unwrap();
        let obs = Observable::cosine(1);
        let direct =
            reference_expectation_direct(&pair, &obs, 2, &params, &cps, &partition).unwrap();
        let mc = pair_expectation(
            &pair,
            &obs,
            2,
            true,
            &params,
            &cps,
            &partition,
            60_000,
            42,
        )
        .unwrap();
        assert!(
            (direct.value - mc.value).abs() < 4.0 * mc.std_error + 2e-3,
            "direct {} vs mc {} ± {}",
            direct.value,
            mc.value,
            mc.std_error
        );
    }

    #[test]
    fn one_step_error_decays() {
        let (params, cps, partition) = setup(3.0);
        let obs = Observable::cosine(1);
        let scan = one_step_error_scan(
            (1.35, 1.65),
            &[200.0, 480.0, 1150.0, 2750.0],
            &obs,
            &params,
            &cps,
            &partition,
        )
        .unwrap();
        let fit = scan.fit.unwrap();
        assert!(fit.slope < -0.6, "slope {}", fit.slope);
        // zero observable gives zero error
        let scan0 = one_step_error_scan(
            (1.35, 1.65),
            &[200.0],
            &Observable::constant(0.0),
            &params,
            &cps,
            &partition,
        )
        .unwrap();
        assert!(scan0.rows[0].error.abs() < 1e-14);
    }

    #[test]
    fn psi_constant_observable_is_one() {
        let (params, cps, partition) = setup(3.0);
        let table = psi_compute(
            (1.35, 1.65),
            1,
            500.0,
            2,
            8,
            &Observable::constant(1.0 / TAU),
            &params,
            &cps,
            &partition,
            PsiStrategy::Direct,
        )
        .unwrap();
        for v in &table.values {
            assert!((v - 1.0 / TAU).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn psi_periodicity_and_fourier() {
        let (params, cps, partition) = setup(3.0);
        let obs = Observable::cosine(1);
        let table = psi_compute(
            (1.35, 1.65),
            1,
            600.0,
            2,
            16,
            &obs,
            &params,
            &cps,
            &partition,
            PsiStrategy::Direct,
        )
        .unwrap();
        let per = psi_periodicity_check(&table).unwrap();
        // discrepancy across one period is far below the value scale ŷ^{-β}
        let scale = table
            .values
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(per.max_discrepancy < 0.5 * scale + 1e-12, "{per:?} scale {scale}");

        let fourier = psi_fourier(&table).unwrap();
        // the mean (l=0) of a zero-average observable's Ψ is near zero
        let zero_mode = fourier.magnitude(0);
        assert!(zero_mode < 0.3 * scale + 1e-12, "{zero_mode} vs {scale}");
    }

    #[test]
    fn e0_checker_cases() {
        // constant f ≡ λ: integral = μ(Ω)λ ≤ bound
        let w = vec![0.25; 8];
        let f = vec![0.3; 8];
        match lemma_e0_check(&w, &f, 0.3, 1.0, 1.0) {
            E0Verdict::Holds { .. } => {}
            v => panic!("expected Holds, got {v:?}"),
        }
        // atom at f=1 with tiny λ and C: hypothesis must fail
        let w = vec![1.0];
        let f = vec![1.0];
        match lemma_e0_check(&w, &f, 1e-3, 1e-3, 1.0) {
            E0Verdict::HypothesisViolated { .. } => {}
            v => panic!("expected HypothesisViolated, got {v:?}"),
        }
    }

    #[test]
    fn e0_on_decomposition_expansion_data() {
        // apply to the inverse expansion rates of a real splitting; the
        // pair straddles the order-1 strip so the expansion genuinely
        // spans orders of magnitude (λ must be far from 1 for the stated
        // bound to kick in)
        let (params, cps, partition) = setup(2.5);
        let anchor = Point::new(0.1, 150.0);
        let pair =
            crate::pairs::make_reference_pair(-0.05, 0.25, anchor, &params, cps.delta).unwrap();
        let dec = decompose_image(&pair, &partition, &params, &cps, &DecompConfig::default())
            .unwrap();
        // pieces: use aligned pieces of the first component
        let comp = &dec.components[0];
        let mut weights = Vec::new();
        let mut fs = Vec::new();
        let mut l_hat = f64::INFINITY;
        let mut ls = Vec::new();
        let probes = 64.min(comp.aligned_count as usize);
        for j in 0..probes {
            let frac = (j as f64 + 0.5) / probes as f64;
            let x = comp.src_lo + (comp.src_hi - comp.src_lo) * frac;
            let l = crate::pairs::expansion_rate(&pair, x, &params).abs();
            l_hat = l_hat.min(l);
            ls.push(l);
            weights.push(pair.mass(
                comp.src_lo + (comp.src_hi - comp.src_lo) * (j as f64) / probes as f64,
                comp.src_lo + (comp.src_hi - comp.src_lo) * (j as f64 + 1.0) / probes as f64,
            ));
        }
        for &l in &ls {
            fs.push(l_hat / l);
        }
        let l_max = ls.iter().fold(0.0f64, |m, &v| m.max(v));
        let lambda = (l_hat / l_max).min(0.99);
        // fit the smallest C making the hypothesis hold, then verify the
        // conclusion — it must hold since the inequality is proved
        let mut c_fit = 0.0f64;
        for i in 0..64 {
            let z = (1.0 / lambda).powf(i as f64 / 63.0);
            let tail: f64 = weights
                .iter()
                .zip(&fs)
                .filter(|(_, &f)| f > z * lambda)
                .map(|(w, _)| w)
                .sum();
            let mu: f64 = weights.iter().sum();
            c_fit = c_fit.max(tail * z / mu);
        }
        match lemma_e0_check(&weights, &fs, lambda, c_fit * 1.0001, 1.0) {
            E0Verdict::Holds { .. } => {}
            v => panic!("expected Holds on real data, got {v:?}"),
        }
    }
}
