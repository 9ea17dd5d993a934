//! Level scheme, stopped times and outcomes for the comparison of the
//! vertical motion with a downward-biased random walk, plus escape-regime
//! orbit scans.

use crate::critical::CriticalParams;
use crate::decomposition::{Carrier, SampleWalker, StopReason, WalkStep};
use crate::map::{MapError, MapParams, Point};
use crate::numerics::{linear_fit, LineFit};
use crate::pairs::{BasicPair, ReferenceCurve};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::f64::consts::TAU;

#[derive(Debug, thiserror::Error)]
pub enum WalkError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("time horizon {0} exceeds the 1e8 step cap")]
    HorizonTooLarge(u64),
    #[error("too few usable tail samples ({0}) for a fit")]
    InsufficientSamples(usize),
}

// ---------------------------------------------------------------------------
// Level scheme
// ---------------------------------------------------------------------------

/// Geometric height levels `R_k = 2^k · ŷ_master` with the closeness band
/// `[R_k − 2Aν, R_k + 2Aν]` and compatibility band `[R_{k−1}, R_{k+1}]`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LevelScheme {
    pub y_master: f64,
    pub nu: u32,
    pub forcing_amplitude: f64,
}

impl LevelScheme {
    pub fn new(y_master: f64, nu: u32, params: &MapParams) -> LevelScheme {
        LevelScheme {
            y_master,
            nu,
            forcing_amplitude: params.a,
        }
    }

    pub fn level(&self, k: i32) -> f64 {
        self.y_master * 2f64.powi(k)
    }

    pub fn close_band(&self, k: i32) -> (f64, f64) {
        let r = self.level(k);
        let half = 2.0 * self.forcing_amplitude * self.nu as f64;
        (r - half, r + half)
    }

    pub fn compat_band(&self, k: i32) -> (f64, f64) {
        (self.level(k - 1), self.level(k + 1))
    }

    pub fn range_close(&self, y_range: (f64, f64), k: i32) -> bool {
        let (lo, hi) = self.close_band(k);
        y_range.0 >= lo && y_range.1 <= hi
    }

    pub fn range_compatible(&self, y_range: (f64, f64), k: i32) -> bool {
        let (lo, hi) = self.compat_band(k);
        y_range.0 >= lo && y_range.1 <= hi
    }

    /// Nearest level index to a height.
    pub fn nearest_level(&self, y: f64) -> i32 {
        (y / self.y_master).log2().round() as i32
    }
}

// ---------------------------------------------------------------------------
// Stopped time at one level
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LevelStop {
    /// the carrying pair left the compatibility band (the underlying walk
    /// continues from there)
    Incompatible,
    /// landed in the invalid remainder
    InvalidSet,
    /// dipped below the studied region
    LeftDomain,
    Truncated,
}

#[derive(Clone, Copy, Debug)]
pub struct LevelOutcome {
    pub tau: u64,
    pub stop: LevelStop,
    pub final_point: Point,
    pub final_carrier: Carrier,
    pub final_lifted_x: f64,
}

/// The stopped time `τ^{[k]}`: the critical-time recursion additionally
/// frozen (contributing 0 further) as soon as the carrying pair stops being
/// compatible with `R_k`.
pub fn tau_level(
    mut carrier: Carrier,
    mut p: Point,
    mut lifted_x: f64,
    k: i32,
    scheme: &LevelScheme,
    walker: &SampleWalker,
    max_iter: u64,
) -> Result<LevelOutcome, WalkError> {
    let params = walker.params;
    let mut tau = 0u64;
    loop {
        if !scheme.range_compatible(carrier.y_range(params), k) {
            return Ok(LevelOutcome {
                tau,
                stop: LevelStop::Incompatible,
                final_point: p,
                final_carrier: carrier,
                final_lifted_x: lifted_x,
            });
        }
        if tau >= max_iter {
            return Ok(LevelOutcome {
                tau,
                stop: LevelStop::Truncated,
                final_point: p,
                final_carrier: carrier,
                final_lifted_x: lifted_x,
            });
        }
        match walker.step(&carrier, p, lifted_x)? {
            WalkStep::Standard { point, carrier: c } => {
                tau += 1;
                p = point;
                carrier = c;
                lifted_x = lift_into(point.x, carrier.x_lo, carrier.x_hi);
            }
            WalkStep::Standby { point, carrier: c } => {
                tau += 2;
                p = point;
                carrier = c;
                lifted_x = lift_into(point.x, carrier.x_lo, carrier.x_hi);
            }
            WalkStep::Stopped(reason) => {
                let stop = match reason {
                    StopReason::InvalidSet => LevelStop::InvalidSet,
                    StopReason::LeftDomain => LevelStop::LeftDomain,
                    StopReason::Truncated => LevelStop::Truncated,
                };
                return Ok(LevelOutcome {
                    tau,
                    stop,
                    final_point: p,
                    final_carrier: carrier,
                    final_lifted_x: lifted_x,
                });
            }
        }
    }
}

fn lift_into(x: f64, lo: f64, hi: f64) -> f64 {
    let mut v = x;
    while v < lo {
        v += TAU;
    }
    while v > hi {
        v -= TAU;
    }
    if v < lo {
        v = x.clamp(lo, hi);
    }
    v
}

/// Outcome `ξ^{[k]} ∈ {−1, +1}` for a sample on a pair close to `R_k`:
/// `+1` exactly when the level time stopped strictly before the critical
/// time with the carrying pair close to `R_{k+1}`; truncation reports `−1`
/// with the flag set (excluded from drift estimates).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct XiOutcome {
    pub xi: i8,
    pub tau: u64,
    pub truncated: bool,
    pub stop: LevelStop,
}

#[allow(clippy::too_many_arguments)]
pub fn xi_level(
    carrier: Carrier,
    p: Point,
    lifted_x: f64,
    k: i32,
    scheme: &LevelScheme,
    walker: &SampleWalker,
    max_iter: u64,
) -> Result<(XiOutcome, LevelOutcome), WalkError> {
    let out = tau_level(carrier, p, lifted_x, k, scheme, walker, max_iter)?;
    let xi = match out.stop {
        LevelStop::Incompatible => {
            // τ > τ^{[k]} (the last step landed on a standard piece);
            // up-exit iff the pair is now close to the next level
            if scheme.range_close(out.final_carrier.y_range(walker.params), k + 1) {
                1
            } else {
                -1
            }
        }
        LevelStop::InvalidSet | LevelStop::LeftDomain | LevelStop::Truncated => -1,
    };
    Ok((
        XiOutcome {
            xi,
            tau: out.tau,
            truncated: out.stop == LevelStop::Truncated,
            stop: out.stop,
        },
        out,
    ))
}

/// Drift estimate at one level: `P(ξ = −1)` over uniformly drawn samples of
/// a master pair close to `R_k`. Truncated samples are excluded from both
/// numerator and denominator; the value with them counted as −1 is reported
/// alongside as the sensitivity.
#[derive(Clone, Debug, Serialize)]
pub struct DriftEstimate {
    pub n_samples: usize,
    pub used: usize,
    pub truncated: usize,
    pub p_down: f64,
    pub p_down_stderr: f64,
    pub p_down_with_truncated: f64,
    pub mean_tau: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn drift_estimate(
    master: &BasicPair,
    k: i32,
    scheme: &LevelScheme,
    walker: &SampleWalker,
    n_samples: usize,
    max_iter: u64,
    seed: u64,
) -> Result<DriftEstimate, WalkError> {
    let params = walker.params;
    let outcomes: Vec<(i8, bool, u64)> = crate::par::run_indexed(n_samples, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let x = master.x_lo + master.width() * rng.random::<f64>();
        let p = Point {
            x: x.rem_euclid(TAU),
            y: master.psi_at(x, params),
        };
        let carrier = match Carrier::through(master.x_lo, master.x_hi, p, params) {
            Ok(c) => c,
            Err(_) => return (-1, true, 0),
        };
        match xi_level(carrier, p, x, k, scheme, walker, max_iter) {
            Ok((o, _)) => (o.xi, o.truncated, o.tau),
            Err(_) => (-1, true, 0),
        }
    });
    let truncated = outcomes.iter().filter(|(_, t, _)| *t).count();
    let used = n_samples - truncated;
    let down = outcomes.iter().filter(|(xi, t, _)| !*t && *xi < 0).count();
    let down_all = outcomes.iter().filter(|(xi, _, _)| *xi < 0).count();
    let p_down = down as f64 / used.max(1) as f64;
    let mean_tau =
        outcomes.iter().map(|(_, _, t)| *t as f64).sum::<f64>() / n_samples.max(1) as f64;
    Ok(DriftEstimate {
        n_samples,
        used,
        truncated,
        p_down,
        p_down_stderr: (p_down * (1.0 - p_down) / used.max(1) as f64).sqrt(),
        p_down_with_truncated: down_all as f64 / n_samples.max(1) as f64,
        mean_tau,
    })
}

// ---------------------------------------------------------------------------
// Tail of the stopped time
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct TauTail {
    pub s_values: Vec<f64>,
    pub tail_probability: Vec<f64>,
    /// fit of `log P(τ ≥ s)` against `s·ŷ⁻²`
    pub fit: Option<LineFit>,
    pub theta: Option<f64>,
    pub n_samples: usize,
    pub warning_insufficient: bool,
}

/// Empirical tail `P(τ^{[k]} ≥ s)` over uniformly drawn samples of a master
/// pair.
#[allow(clippy::too_many_arguments)]
pub fn tau_tail(
    master: &BasicPair,
    k: i32,
    scheme: &LevelScheme,
    walker: &SampleWalker,
    s_grid: &[f64],
    n_samples: usize,
    max_iter: u64,
    seed: u64,
) -> Result<TauTail, WalkError> {
    let params = walker.params;
    let taus: Vec<u64> = crate::par::run_indexed(n_samples, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let x = master.x_lo + master.width() * rng.random::<f64>();
        let p = Point {
            x: x.rem_euclid(TAU),
            y: master.psi_at(x, params),
        };
        let carrier = match Carrier::through(master.x_lo, master.x_hi, p, params) {
            Ok(c) => c,
            Err(_) => return 0,
        };
        match tau_level(carrier, p, x, k, scheme, walker, max_iter) {
            Ok(out) => out.tau,
            Err(_) => 0,
        }
    });
    let n = taus.len() as f64;
    let mut s_values = Vec::new();
    let mut tail = Vec::new();
    for &s in s_grid {
        let count = taus.iter().filter(|&&t| (t as f64) >= s).count();
        s_values.push(s);
        tail.push(count as f64 / n);
    }
    let y2 = scheme.y_master * scheme.y_master;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (s, p) in s_values.iter().zip(&tail) {
        if *p > 0.0 && *p < 1.0 {
            xs.push(s / y2);
            ys.push(p.ln());
        }
    }
    let warning = xs.len() < 4;
    let fit = if xs.len() >= 3 {
        Some(linear_fit(&xs, &ys))
    } else {
        None
    };
    let theta = fit.map(|f| f.slope.exp());
    Ok(TauTail {
        s_values,
        tail_probability: tail,
        fit,
        theta,
        n_samples,
        warning_insufficient: warning,
    })
}

// ---------------------------------------------------------------------------
// Full walk comparison
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct WalkStage {
    pub tau_k: u64,
    pub chi_k: i32,
    pub xi: i8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TerminalStatus {
    /// landed in the invalid remainder (extended order-2 set)
    EnteredInvalid,
    LeftDomain,
    Truncated,
    /// climbed past the configured top level
    ReachedTop,
}

#[derive(Clone, Debug, Serialize)]
pub struct WalkRecord {
    pub sample: u64,
    pub stages: Vec<WalkStage>,
    pub terminal: TerminalStatus,
    /// stages where the level index was re-assigned to the nearest level
    pub level_snaps: u32,
}

#[derive(Clone, Debug, Serialize)]
pub struct WalkSummary {
    pub n_samples: usize,
    pub up_steps: u64,
    pub down_steps: u64,
    pub truncated_samples: u64,
    /// fraction of samples that dropped below the start level or terminated
    /// in the critical region / domain floor
    pub returned_fraction: f64,
    pub up_fraction: f64,
    /// the biased-walk up probability the dynamics is compared against
    pub reference_up_probability: f64,
}

/// Run the staged walk on samples of a master reference pair: at each stage
/// evaluate the level outcome at the current level, move the level by the
/// outcome, and stop on the invalid set, the domain floor, the top level, or
/// the step cap.
#[allow(clippy::too_many_arguments)]
pub fn walk_run(
    master: &BasicPair,
    scheme: &LevelScheme,
    walker: &SampleWalker,
    horizon_levels: i32,
    max_steps: u64,
    n_samples: usize,
    seed: u64,
) -> Result<(Vec<WalkRecord>, WalkSummary), WalkError> {
    let params = walker.params;
    let records: Vec<WalkRecord> = crate::par::run_indexed(n_samples, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let x = master.x_lo + master.width() * rng.random::<f64>();
        let p = Point {
            x: x.rem_euclid(TAU),
            y: master.psi_at(x, params),
        };
        match Carrier::through(master.x_lo, master.x_hi, p, params) {
            Ok(carrier) => walk_one(
                carrier,
                p,
                x,
                scheme,
                walker,
                horizon_levels,
                max_steps,
                i as u64,
            ),
            Err(_) => WalkRecord {
                sample: i as u64,
                stages: Vec::new(),
                terminal: TerminalStatus::LeftDomain,
                level_snaps: 0,
            },
        }
    });

    let mut up = 0u64;
    let mut down = 0u64;
    let mut truncated = 0u64;
    let mut returned = 0usize;
    for rec in &records {
        let mut dropped = false;
        for st in &rec.stages {
            if st.xi > 0 {
                up += 1;
            } else {
                down += 1;
            }
            if st.chi_k < 0 {
                dropped = true;
            }
        }
        if rec.terminal == TerminalStatus::Truncated {
            truncated += 1;
        }
        if dropped
            || rec.terminal == TerminalStatus::EnteredInvalid
            || rec.terminal == TerminalStatus::LeftDomain
        {
            returned += 1;
        }
    }
    let total = up + down;
    let summary = WalkSummary {
        n_samples,
        up_steps: up,
        down_steps: down,
        truncated_samples: truncated,
        returned_fraction: returned as f64 / n_samples.max(1) as f64,
        up_fraction: if total > 0 {
            up as f64 / total as f64
        } else {
            0.0
        },
        reference_up_probability: 0.4,
    };
    Ok((records, summary))
}

#[allow(clippy::too_many_arguments)]
fn walk_one(
    mut carrier: Carrier,
    mut p: Point,
    mut lifted_x: f64,
    scheme: &LevelScheme,
    walker: &SampleWalker,
    horizon_levels: i32,
    max_steps: u64,
    sample: u64,
) -> WalkRecord {
    let params = walker.params;
    let mut stages = Vec::new();
    let mut chi = 0i32;
    let mut tau_total = 0u64;
    let mut snaps = 0u32;
    let terminal = loop {
        if chi >= horizon_levels {
            break TerminalStatus::ReachedTop;
        }
        if tau_total >= max_steps {
            break TerminalStatus::Truncated;
        }
        let yr = carrier.y_range(params);
        if !scheme.range_close(yr, chi) {
            let snapped = scheme.nearest_level(0.5 * (yr.0 + yr.1));
            if snapped != chi {
                chi = snapped;
                snaps += 1;
            }
        }
        let (out, lvl) = match xi_level(
            carrier,
            p,
            lifted_x,
            chi,
            scheme,
            walker,
            max_steps - tau_total,
        ) {
            Ok(v) => v,
            Err(_) => break TerminalStatus::LeftDomain,
        };
        tau_total += out.tau;
        chi += out.xi as i32;
        stages.push(WalkStage {
            tau_k: tau_total,
            chi_k: chi,
            xi: out.xi,
        });
        match out.stop {
            LevelStop::Incompatible => {
                carrier = lvl.final_carrier;
                p = lvl.final_point;
                lifted_x = lvl.final_lifted_x;
            }
            LevelStop::InvalidSet => break TerminalStatus::EnteredInvalid,
            LevelStop::LeftDomain => break TerminalStatus::LeftDomain,
            LevelStop::Truncated => break TerminalStatus::Truncated,
        }
    };
    WalkRecord {
        sample,
        stages,
        terminal,
        level_snaps: snaps,
    }
}

// ---------------------------------------------------------------------------
// Control walk (gambler's ruin)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ControlWalk {
    pub p_up: f64,
    pub horizon: u32,
    pub simulated_return: f64,
    pub simulated_stderr: f64,
    pub closed_form_return: f64,
}

/// Probability that a ±1 walk starting at 0 with up-probability `p_up`
/// reaches −1 before +`horizon`.
pub fn gamblers_ruin_return(p_up: f64, horizon: u32) -> f64 {
    let d_over_u = (1.0 - p_up) / p_up;
    if (d_over_u - 1.0).abs() < 1e-12 {
        return 1.0 - 1.0 / (horizon as f64 + 1.0);
    }
    let n = horizon as f64 + 1.0;
    // start at 1 with absorption at 0 and N
    let p_reach_top = (1.0 - d_over_u) / (1.0 - d_over_u.powf(n));
    1.0 - p_reach_top
}

pub fn control_walk(p_up: f64, horizon: u32, n_samples: usize, seed: u64) -> ControlWalk {
    let outcomes: Vec<f64> = crate::par::run_indexed(n_samples, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut pos = 0i64;
        loop {
            if rng.random::<f64>() < p_up {
                pos += 1;
            } else {
                pos -= 1;
            }
            if pos <= -1 {
                return 1.0;
            }
            if pos >= horizon as i64 {
                return 0.0;
            }
        }
    });
    let (mean, se) = crate::numerics::mean_stderr(&outcomes);
    ControlWalk {
        p_up,
        horizon,
        simulated_return: mean,
        simulated_stderr: se,
        closed_form_return: gamblers_ruin_return(p_up, horizon),
    }
}

// ---------------------------------------------------------------------------
// Escape-regime scans
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum OrbitClass {
    Bounded,
    Returned,
    GrowthCandidate,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct OrbitOutcome {
    pub class: OrbitClass,
    pub final_y: f64,
    pub max_y: f64,
    pub reentered_c2_hat: bool,
    pub left_domain: bool,
    pub final_speed: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EscapeSummary {
    pub n_orbits: usize,
    pub frac_bounded: f64,
    pub frac_returned: f64,
    pub frac_growth: f64,
    /// normal-approximation 95% interval on the growth fraction
    pub growth_ci: (f64, f64),
    pub c2_reentry_fraction: f64,
}

/// Classify one orbit over `T` steps. The growth proxy requires the final
/// height to exceed `4·y₀` with the windowed minima over the second half
/// monotonically increasing (window `T/20`).
pub fn classify_orbit(
    seed_point: Point,
    t_steps: u64,
    params: &MapParams,
    cps: &CriticalParams,
    track_c2: bool,
) -> OrbitOutcome {
    let window = (t_steps / 20).max(1);
    let half = t_steps / 2;
    let mut p = seed_point;
    let mut max_y = p.y;
    let mut reentered = false;
    let mut left_domain = false;
    let mut window_min = f64::INFINITY;
    let mut minima: Vec<f64> = Vec::new();
    // rolling one-step-behind slope data for the order-2 membership
    let mut prev_inv_yp = 1.0 / params.big_y_prime_raw(p.y);
    let mut prev_h_tilde: Option<(f64, f64)> = None; // (h̃, Y′) at the previous point
    for step in 1..=t_steps {
        let x1 = params.advance_angle(p.x, p.y);
        let y1 = p.y + params.kick(x1);
        if y1 <= 0.0 {
            left_domain = true;
            break;
        }
        if track_c2 {
            let inv_yp1 = 1.0 / params.big_y_prime_raw(y1);
            let h_tilde_here = 2.0 * params.forcing(x1, 2) + prev_inv_yp + inv_yp1;
            if let Some((h_prev, yp_prev)) = prev_h_tilde {
                let in_c1_hat = h_prev.abs() < cps.k1_hat / yp_prev.sqrt();
                if in_c1_hat && (h_prev * h_tilde_here).abs() < cps.k2_hat / yp_prev {
                    reentered = true;
                }
            }
            prev_h_tilde = Some((h_tilde_here, 1.0 / prev_inv_yp));
            prev_inv_yp = inv_yp1;
        }
        p = Point { x: x1, y: y1 };
        max_y = max_y.max(y1);
        if y1 <= params.y_star {
            left_domain = true;
        }
        if step > half {
            window_min = window_min.min(y1);
            if (step - half) % window == 0 {
                minima.push(window_min);
                window_min = f64::INFINITY;
            }
        }
    }
    let growth = p.y > 4.0 * seed_point.y
        && minima.len() >= 3
        && minima.windows(2).all(|w| w[1] > w[0]);
    let class = if growth {
        OrbitClass::GrowthCandidate
    } else if reentered || left_domain {
        OrbitClass::Returned
    } else {
        OrbitClass::Bounded
    };
    OrbitOutcome {
        class,
        final_y: p.y,
        max_y,
        reentered_c2_hat: reentered,
        left_domain,
        final_speed: p.y / t_steps as f64,
    }
}

/// Ensemble scan over random seed points near `y0`.
#[allow(clippy::too_many_arguments)]
pub fn escape_scan(
    params: &MapParams,
    cps: &CriticalParams,
    y0: f64,
    n_orbits: usize,
    t_steps: u64,
    track_c2: bool,
    seed: u64,
) -> Result<(Vec<OrbitOutcome>, EscapeSummary), WalkError> {
    if t_steps > 100_000_000 {
        return Err(WalkError::HorizonTooLarge(t_steps));
    }
    let outcomes: Vec<OrbitOutcome> = crate::par::run_indexed(n_orbits, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let p = Point {
            x: rng.random::<f64>() * TAU,
            y: y0 * (1.0 + 0.01 * (rng.random::<f64>() - 0.5)),
        };
        classify_orbit(p, t_steps, params, cps, track_c2)
    });
    let n = outcomes.len() as f64;
    let growth = outcomes
        .iter()
        .filter(|o| o.class == OrbitClass::GrowthCandidate)
        .count() as f64;
    let returned = outcomes
        .iter()
        .filter(|o| o.class == OrbitClass::Returned)
        .count() as f64;
    let bounded = outcomes
        .iter()
        .filter(|o| o.class == OrbitClass::Bounded)
        .count() as f64;
    let reentry = outcomes.iter().filter(|o| o.reentered_c2_hat).count() as f64;
    let pg = growth / n;
    let half_width = 1.96 * (pg * (1.0 - pg) / n).sqrt();
    let summary = EscapeSummary {
        n_orbits,
        frac_bounded: bounded / n,
        frac_returned: returned / n,
        frac_growth: pg,
        growth_ci: ((pg - half_width).max(0.0), (pg + half_width).min(1.0)),
        c2_reentry_fraction: reentry / n,
    };
    Ok((outcomes, summary))
}

/// Best-effort linear-acceleration detector for the resonant `γ = 1`
/// regime: over a grid of forcing amplitudes, report the largest final
/// `y_T / T` among the orbits (bounded away from 0 signals ballistic
/// acceleration).
pub fn acceleration_scan(
    gamma: f64,
    a_grid: &[f64],
    y0: f64,
    n_orbits: usize,
    t_steps: u64,
    seed: u64,
) -> Vec<(f64, f64)> {
    a_grid
        .iter()
        .map(|&a| {
            let params =
                MapParams::with_cutoffs(a, gamma, 1.0, 1.0, 2.0).expect("valid scan parameters");
            let best = crate::par::run_indexed(n_orbits, |i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let mut cur = Point {
                    x: rng.random::<f64>() * TAU,
                    y: y0 * (1.0 + 0.2 * rng.random::<f64>()),
                };
                for _ in 0..t_steps {
                    match crate::map::apply_map(cur, &params) {
                        Ok(q) => cur = q,
                        Err(_) => break,
                    }
                }
                cur.y / t_steps as f64
            })
            .into_iter()
            .fold(0.0f64, f64::max);
            (a, best)
        })
        .collect()
}

/// Build a master reference pair at height `y_master` over `cell`.
pub fn master_pair(
    cell: (f64, f64),
    y_master: f64,
    params: &MapParams,
) -> Result<BasicPair, crate::pairs::PairError> {
    let anchor = Point {
        x: (0.5 * (cell.0 + cell.1)).rem_euclid(TAU),
        y: y_master,
    };
    let curve = ReferenceCurve::through(anchor, params)?;
    crate::pairs::reference_pair_from_curve(cell.0, cell.1, curve, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critical::{classify, PreimageMode};
    use crate::decomposition::StandardPartition;

    fn setup(gamma: f64) -> (MapParams, CriticalParams, StandardPartition) {
        let params = MapParams::new(1.0, gamma).unwrap();
        let cps = CriticalParams::with_k2(512.0);
        let partition = StandardPartition::new(cps.delta).unwrap();
        (params, cps, partition)
    }

    #[test]
    fn level_scheme_geometry() {
        let params = MapParams::new(1.0, 2.5).unwrap();
        let s = LevelScheme::new(1000.0, 3, &params);
        assert_eq!(s.level(0), 1000.0);
        assert_eq!(s.level(1), 2000.0);
        assert_eq!(s.level(-1), 500.0);
        let (lo, hi) = s.close_band(0);
        assert!((lo - 994.0).abs() < 1e-12);
        assert!((hi - 1006.0).abs() < 1e-12);
        assert!(s.range_compatible((600.0, 1800.0), 0));
        assert!(!s.range_compatible((400.0, 1800.0), 0));
    }

    #[test]
    fn incompatible_pair_has_zero_tau() {
        let (params, cps, partition) = setup(2.5);
        let walker = SampleWalker::new(&params, &cps, &partition);
        let scheme = LevelScheme::new(1000.0, 3, &params);
        let p = Point::new(1.5, 3000.0);
        let carrier = Carrier::through(1.4, 1.6, p, &params).unwrap();
        let out = tau_level(carrier, p, 1.5, 0, &scheme, &walker, 1000).unwrap();
        assert_eq!(out.tau, 0);
        assert_eq!(out.stop, LevelStop::Incompatible);
    }

    #[test]
    fn tau_level_below_critical_time() {
        let (params, cps, partition) = setup(2.5);
        let walker = SampleWalker::new(&params, &cps, &partition);
        let scheme = LevelScheme::new(400.0, 3, &params);
        let pair = master_pair((1.35, 1.65), 400.0, &params).unwrap();
        for i in 0..100 {
            let x = pair.x_lo + pair.width() * (i as f64 + 0.5) / 100.0;
            let p = Point {
                x: x.rem_euclid(TAU),
                y: pair.psi_at(x, &params),
            };
            let carrier = Carrier::through(pair.x_lo, pair.x_hi, p, &params).unwrap();
            let lvl = tau_level(carrier, p, x, 0, &scheme, &walker, 50_000).unwrap();
            let ct = crate::decomposition::critical_time(&pair, x, 50_000, &walker).unwrap();
            assert!(
                lvl.tau <= ct.tau,
                "x={x}: tau_level {} > tau {}",
                lvl.tau,
                ct.tau
            );
        }
    }

    #[test]
    fn control_walk_matches_closed_form() {
        let cw = control_walk(0.4, 10, 40_000, 7);
        let diff = (cw.simulated_return - cw.closed_form_return).abs();
        assert!(
            diff < 3.0 * cw.simulated_stderr + 1e-4,
            "sim {} vs exact {} (se {})",
            cw.simulated_return,
            cw.closed_form_return,
            cw.simulated_stderr
        );
        assert!(gamblers_ruin_return(0.4, 200) > 0.999999);
    }

    #[test]
    fn chi_paths_are_unit_steps() {
        let (params, cps, partition) = setup(2.5);
        let walker = SampleWalker::new(&params, &cps, &partition);
        let scheme = LevelScheme::new(400.0, 3, &params);
        let master = master_pair((1.35, 1.65), 400.0, &params).unwrap();
        let (records, summary) = walk_run(&master, &scheme, &walker, 6, 200_000, 50, 11).unwrap();
        for rec in &records {
            let mut prev = 0i32;
            for st in &rec.stages {
                // ξ is ±1; the rare level snap can shift the base
                assert!((st.chi_k - prev).abs() <= 2, "jump {} -> {}", prev, st.chi_k);
                assert!(st.xi == 1 || st.xi == -1);
                prev = st.chi_k;
            }
        }
        assert!(summary.up_steps + summary.down_steps > 0);
    }

    #[test]
    fn kam_regime_has_no_growth() {
        let params = MapParams::with_cutoffs(1.0, 0.5, 1.0, 2.0, 5.0).unwrap();
        let cps = CriticalParams::with_k2(512.0);
        let (_, summary) = escape_scan(&params, &cps, 50.0, 20, 100_000, false, 3).unwrap();
        assert_eq!(summary.frac_growth, 0.0);
    }

    #[test]
    fn recurrent_regime_reenters() {
        let (params, cps, _) = setup(2.5);
        let (_, summary) = escape_scan(&params, &cps, 1000.0, 10, 1_000_000, true, 5).unwrap();
        assert!(summary.c2_reentry_fraction > 0.9, "{summary:?}");
    }

    #[test]
    fn rolling_membership_matches_pointwise_classifier() {
        let (params, cps, _) = setup(2.5);
        let mut p = Point::new(0.37, 800.0);
        let mut rolling_hits = 0;
        let mut direct_hits = 0;
        let mut prev_inv_yp = 1.0 / params.big_y_prime_raw(p.y);
        let mut prev_h: Option<(f64, f64)> = None;
        let mut prev_point = p;
        for _ in 0..5000 {
            let x1 = params.advance_angle(p.x, p.y);
            let y1 = p.y + params.kick(x1);
            if y1 <= 0.0 {
                break;
            }
            let inv_yp1 = 1.0 / params.big_y_prime_raw(y1);
            let h_here = 2.0 * params.forcing(x1, 2) + prev_inv_yp + inv_yp1;
            if let Some((hp, yp_prev)) = prev_h {
                let in_c1_hat = hp.abs() < cps.k1_hat / yp_prev.sqrt();
                if in_c1_hat && (hp * h_here).abs() < cps.k2_hat / yp_prev {
                    rolling_hits += 1;
                }
                let c = classify(prev_point, &params, &cps, PreimageMode::Exact);
                if c.in_c2_hat {
                    direct_hits += 1;
                }
            }
            prev_h = Some((h_here, 1.0 / prev_inv_yp));
            prev_inv_yp = inv_yp1;
            prev_point = Point { x: x1, y: y1 };
            p = prev_point;
        }
        let diff = (rolling_hits as i64 - direct_hits as i64).abs();
        assert!(diff <= 2, "rolling {rolling_hits} vs direct {direct_hits}");
    }
}
