//! Curves with densities ("pairs") and their one-step evolution.
//!
//! A basic pair is a graph curve `y = ψ(x)` over an interval of the circle
//! together with a probability density `ρ` on that interval. Reference pairs
//! are images of vertical lines (`ψ = 2φ̇_A + Y⁻¹(c + x)`) carrying uniform
//! density; standard pairs are quantitatively close to reference pairs and
//! carry regular densities. The pushforward of a pair under the map obeys a
//! closed-form recursion for the slope, its derivative and the logarithmic
//! density derivative, which this module implements next to the sampled
//! image so the two can be cross-checked.

use crate::map::{MapError, MapParams, Point};
use crate::numerics::{fd_derivative, Dd, Sampled};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

pub const DEFAULT_NODES: usize = 2048;

#[derive(Debug, thiserror::Error)]
pub enum PairError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("interval width {width} outside admissible range ({lo}, {hi})")]
    IntervalWidth { width: f64, lo: f64, hi: f64 },
    #[error("density must be strictly positive (min {0})")]
    NonPositiveDensity(f64),
    #[error("curve dips to y={0}, below the studied region y*={1}")]
    BelowRegion(f64, f64),
    #[error("image degenerates: |expansion| = {0} below tolerance {1}")]
    DegenerateImage(f64, f64),
    #[error("anchor x={0} outside interval [{1}, {2}]")]
    AnchorOutside(f64, f64, f64),
    #[error("pair is not clean: curve minus the order-1 critical set is disconnected")]
    NotClean,
    #[error("subinterval [{0}, {1}] not contained in pair interval")]
    SubintervalOutside(f64, f64),
}

// ---------------------------------------------------------------------------
// Slope fields of the vertical-line foliation
// ---------------------------------------------------------------------------

/// One-step slope data at a point: `h₁ = 2φ̈_A(x) + 1/Y′(y₋₁)` and the
/// adapted slope `h̃₁ = h₁ + 1/Y′(y)`.
#[derive(Clone, Copy, Debug)]
pub struct SlopeField {
    pub h1: f64,
    pub h1_tilde: f64,
    /// Derivative field `ḣ₁ = 2φ⃛_A(x) − Y″(y₋₁)/Y′(y₋₁)³`.
    pub h1_dot: f64,
    /// Relative error bound on the `1/Y′(y₋₁)` term when the approximate
    /// (`y₋₁ := y`) mode was used; `None` in exact mode.
    pub approx_error_bound: Option<f64>,
}

/// Evaluate the slope fields at `p`. `y_prev` is the height of the preimage;
/// pass `None` to substitute the current height (the approximation the
/// thresholds tolerate for large `y`).
pub fn slope_field_1(p: Point, y_prev: Option<f64>, params: &MapParams) -> SlopeField {
    let (y_m1, bound) = match y_prev {
        Some(v) => (v, None),
        None => {
            // |1/Y'(y₋₁) − 1/Y'(y)| / (1/Y'(y)) ≈ (γ−1)·2A/y
            let b = (params.gamma - 1.0).abs() * 2.0 * params.a / p.y;
            (p.y, Some(b))
        }
    };
    let yp_prev = params.big_y_prime_raw(y_m1);
    let ypp_prev = params.big_y_second_raw(y_m1);
    let h1 = 2.0 * params.forcing(p.x, 2) + 1.0 / yp_prev;
    let h1_dot = 2.0 * params.forcing(p.x, 3) - ypp_prev / (yp_prev * yp_prev * yp_prev);
    let h1_tilde = h1 + 1.0 / params.big_y_prime_raw(p.y);
    SlopeField {
        h1,
        h1_tilde,
        h1_dot,
        approx_error_bound: bound,
    }
}

/// Exact-mode slope fields: the preimage height is recovered from the
/// vertical fiber, `y₋₁ = y − 2φ̇_A(x)`.
pub fn slope_field_1_exact(p: Point, params: &MapParams) -> Result<SlopeField, MapError> {
    let y_prev = p.y - params.kick(p.x);
    if y_prev <= 0.0 {
        return Err(MapError::PreimageHeight(y_prev));
    }
    Ok(slope_field_1(p, Some(y_prev), params))
}

// ---------------------------------------------------------------------------
// Analytic reference curves
// ---------------------------------------------------------------------------

/// The image of a vertical line: `ψ(x) = 2φ̇_A(x) + Y⁻¹(c + x)` for a fixed
/// `c > 0`. Stores a double-double anchor so that the forward phase
/// `x + Y(ψ(x))` can be produced with near-eps accuracy at any height.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceCurve {
    pub c: f64,
    c_dd: Dd,
    /// `c mod 2π`, double-double reduced.
    c_mod: f64,
}

impl ReferenceCurve {
    /// Curve through `anchor` (with `x` taken as a lifted coordinate).
    pub fn through(anchor: Point, params: &MapParams) -> Result<ReferenceCurve, MapError> {
        Self::through_with_offset(anchor, 0.0, params)
    }

    /// Curve through `(anchor.x, anchor.y + dy)` with the height offset `dy`
    /// tracked exactly. Phase tables step heights by fractions of the
    /// rotation period `2π/Y′`, far below f64 resolution of the height
    /// itself; carrying the offset separately keeps the anchor constant `c`
    /// phase-exact.
    pub fn through_with_offset(
        anchor: Point,
        dy: f64,
        params: &MapParams,
    ) -> Result<ReferenceCurve, MapError> {
        let y_prev = anchor.y - params.kick(anchor.x);
        if y_prev <= params.cutoff_l {
            return Err(MapError::PreimageHeight(y_prev));
        }
        // Y(y_prev + dy) = Y(y_prev) + Y(y_prev)·expm1(γ·log1p(dy/y_prev))
        let bump = params.big_y_raw(y_prev)
            * f64::exp_m1(params.gamma * f64::ln_1p(dy / y_prev));
        let c_dd = params
            .big_y_dd(y_prev)
            .add_f64(bump)
            .add_f64(-anchor.x);
        let c = c_dd.value();
        if c <= 0.0 {
            return Err(MapError::NonPositive(c));
        }
        Ok(ReferenceCurve {
            c,
            c_dd,
            c_mod: c_dd.mod_tau(),
        })
    }

    /// Unforced height `u(x) = Y⁻¹(c + x)`.
    #[inline]
    pub fn unforced_height(&self, x: f64, params: &MapParams) -> f64 {
        params.big_y_inverse_raw(self.c + x)
    }

    #[inline]
    pub fn eval(&self, x: f64, params: &MapParams) -> f64 {
        2.0 * params.forcing(x, 1) + self.unforced_height(x, params)
    }

    #[inline]
    pub fn slope(&self, x: f64, params: &MapParams) -> f64 {
        let u = self.unforced_height(x, params);
        2.0 * params.forcing(x, 2) + 1.0 / params.big_y_prime_raw(u)
    }

    #[inline]
    pub fn dslope(&self, x: f64, params: &MapParams) -> f64 {
        let u = self.unforced_height(x, params);
        let yp = params.big_y_prime_raw(u);
        2.0 * params.forcing(x, 3) - params.big_y_second_raw(u) / (yp * yp * yp)
    }

    /// Third derivative `ψ‴` of the curve.
    #[inline]
    pub fn dslope2(&self, x: f64, params: &MapParams) -> f64 {
        let u = self.unforced_height(x, params);
        let yp = params.big_y_prime_raw(u);
        let ypp = params.big_y_second_raw(u);
        let yppp = params.big_y_third_raw(u);
        // d/dx of 2φ⃛_A is 2A sin x; chain terms through u′ = 1/Y′
        2.0 * params.a * x.sin() - (yppp * yp - 3.0 * ypp * ypp) / (yp * yp * yp * yp * yp)
    }

    /// Expansion rate `ℒ = ψ′Y′(ψ) + 1` and its first two derivatives along
    /// the curve, all in closed form.
    pub fn expansion_derivatives(&self, x: f64, params: &MapParams) -> (f64, f64, f64) {
        let psi = self.eval(x, params);
        let d1 = self.slope(x, params);
        let d2 = self.dslope(x, params);
        let d3 = self.dslope2(x, params);
        let yp = params.big_y_prime_raw(psi);
        let ypp = params.big_y_second_raw(psi);
        let yppp = params.big_y_third_raw(psi);
        let l = d1 * yp + 1.0;
        let l1 = d2 * yp + d1 * d1 * ypp;
        let l2 = d3 * yp + 3.0 * d2 * d1 * ypp + d1 * d1 * d1 * yppp;
        (l, l1, l2)
    }

    /// Continuous lift of the forward phase `Θ(x) = x + Y(ψ(x))`, reduced by
    /// the constant anchor so increments and `mod 2π` values are accurate:
    /// `Θ_red = c_mod + 2x + (c + x)·expm1(γ·log1p(2φ̇_A(x)/u))`.
    /// Adding extra kick `w` evaluates the phase of the same fiber after the
    /// height has been shifted by `w` (used by multi-step phases).
    #[inline]
    pub fn phase_lift(&self, x: f64, extra_kick: f64, params: &MapParams) -> f64 {
        let u = self.unforced_height(x, params);
        let w = 2.0 * params.forcing(x, 1) + extra_kick;
        let rel = w / u;
        let bump = (self.c + x) * f64::exp_m1(params.gamma * f64::ln_1p(rel));
        self.c_mod + 2.0 * x + bump
    }

    /// Same phase as a wrapped angle in `[0, 2π)`.
    #[inline]
    pub fn phase_angle(&self, x: f64, extra_kick: f64, params: &MapParams) -> f64 {
        self.phase_lift(x, extra_kick, params).rem_euclid(TAU)
    }

    /// Build the fast phase evaluator for this curve over `[x_lo, x_hi]`,
    /// valid for extra kicks up to `max_extra` in magnitude.
    pub fn fast_phase(
        &self,
        x_lo: f64,
        x_hi: f64,
        max_extra: f64,
        params: &MapParams,
    ) -> FastPhase {
        FastPhase::new(self, x_lo, x_hi, max_extra, params)
    }
}

/// Precomputed evaluator for the anchored phase lift of one reference curve
/// over a fixed interval. Replaces the `expm1/log1p` pair by a binomial
/// series in `w/u` (the kick-to-height ratio, tiny in the studied region)
/// and the `Y⁻¹` evaluation by a local Taylor expansion; falls back to the
/// exact path when the series cannot reach ~1e−8 phase accuracy.
#[derive(Clone, Copy, Debug)]
pub struct FastPhase {
    c_mod: f64,
    c_plus_xmid: f64,
    x_mid: f64,
    u_mid: f64,
    du1: f64,
    du2: f64,
    two_a: f64,
    coeffs: [f64; 13],
    series_ok: bool,
    gamma: f64,
}

impl FastPhase {
    pub fn new(
        curve: &ReferenceCurve,
        x_lo: f64,
        x_hi: f64,
        max_extra: f64,
        params: &MapParams,
    ) -> FastPhase {
        let x_mid = 0.5 * (x_lo + x_hi);
        let u_mid = curve.unforced_height(x_mid, params);
        let yp = params.big_y_prime_raw(u_mid);
        let ypp = params.big_y_second_raw(u_mid);
        let du1 = 1.0 / yp;
        let du2 = -0.5 * ypp / (yp * yp * yp);
        let gamma = params.gamma;
        // binomial coefficients C(γ, k)
        let mut coeffs = [0.0; 13];
        let mut c = 1.0;
        for (k, slot) in coeffs.iter_mut().enumerate() {
            if k == 0 {
                *slot = 0.0; // series starts at k = 1
                continue;
            }
            c *= (gamma - (k as f64 - 1.0)) / k as f64;
            *slot = c;
        }
        // series is admissible when the truncation stays below ~1e-9 of
        // phase: (c+x)·|C(γ,13)|·r^13 with r the largest kick ratio
        let r_max = (2.0 * params.a + max_extra.abs()) / (u_mid - (x_hi - x_lo));
        let tail = (curve.c + x_mid).abs() * coeffs[12].abs() * r_max.powi(13) * r_max.abs();
        let series_ok = r_max < 0.2 && tail < 1e-9;
        FastPhase {
            c_mod: curve.c_mod,
            c_plus_xmid: curve.c + x_mid,
            x_mid,
            u_mid,
            du1,
            du2,
            two_a: 2.0 * params.a,
            coeffs,
            series_ok,
            gamma,
        }
    }

    /// Continuous phase lift `x + Y(ψ(x) + extra)`, reduced by the anchor
    /// constant (same frame as [`ReferenceCurve::phase_lift`]).
    #[inline]
    pub fn eval(&self, x: f64, extra_kick: f64) -> f64 {
        let dx = x - self.x_mid;
        let u = self.u_mid + dx * (self.du1 + dx * self.du2);
        let w = self.two_a * x.cos() + extra_kick;
        let r = w / u;
        let s = if self.series_ok {
            // Horner over C(γ,k) r^k, k = 12..1
            let c = &self.coeffs;
            let mut acc = c[12];
            let mut k = 11;
            loop {
                acc = c[k] + r * acc;
                if k == 1 {
                    break;
                }
                k -= 1;
            }
            acc * r
        } else {
            f64::exp_m1(self.gamma * f64::ln_1p(r))
        };
        self.c_mod + 2.0 * x + (self.c_plus_xmid + dx) * s
    }
}

// ---------------------------------------------------------------------------
// Basic pairs
// ---------------------------------------------------------------------------

/// How the curve is represented. Sampled pairs interpolate grids; analytic
/// pairs evaluate the reference formula (optionally with a small admissible
/// perturbation used by shadowing experiments).
#[derive(Clone, Debug)]
pub enum CurveForm {
    Sampled,
    Reference(ReferenceCurve),
    PerturbedReference {
        base: ReferenceCurve,
        /// vertical perturbation `p(x) = amp·sin(freq·(x − x0))`
        amp: f64,
        freq: f64,
        x0: f64,
    },
}

/// A graph curve with a probability density and cached derivative data.
#[derive(Clone, Debug)]
pub struct BasicPair {
    /// Lifted interval `[lo, hi]`, `hi − lo < 2π`.
    pub x_lo: f64,
    pub x_hi: f64,
    pub psi: Sampled,
    pub rho: Sampled,
    /// slope `h = ψ̇` at the grid nodes
    pub slope: Vec<f64>,
    /// `ḣ = ψ̈` at the grid nodes
    pub dslope: Vec<f64>,
    /// logarithmic density derivative `r = ρ̇/ρ` at the grid nodes
    pub log_deriv: Vec<f64>,
    /// cumulative mass at the grid nodes (ends at 1)
    mass_cum: Sampled,
    pub y_hat: f64,
    pub form: CurveForm,
}

impl BasicPair {
    /// Build from analytic curve and density functions; caches come from
    /// finite differences of the samples.
    pub fn from_fns(
        x_lo: f64,
        x_hi: f64,
        n: usize,
        psi_fn: impl Fn(f64) -> f64,
        rho_fn: impl Fn(f64) -> f64,
        params: &MapParams,
    ) -> Result<BasicPair, PairError> {
        let psi = Sampled::from_fn(x_lo, x_hi, n, psi_fn);
        let rho = Sampled::from_fn(x_lo, x_hi, n, rho_fn);
        Self::from_samples(psi, rho, params)
    }

    pub fn from_samples(
        psi: Sampled,
        rho: Sampled,
        params: &MapParams,
    ) -> Result<BasicPair, PairError> {
        let h = psi.spacing();
        let slope = fd_derivative(&psi.values, h);
        let dslope = fd_derivative(&slope, h);
        Self::assemble(psi, rho, slope, dslope, CurveForm::Sampled, params)
    }

    fn assemble(
        psi: Sampled,
        mut rho: Sampled,
        slope: Vec<f64>,
        dslope: Vec<f64>,
        form: CurveForm,
        params: &MapParams,
    ) -> Result<BasicPair, PairError> {
        let min_rho = rho.values.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min_rho > 0.0) {
            return Err(PairError::NonPositiveDensity(min_rho));
        }
        let total = rho.integral();
        for v in &mut rho.values {
            *v /= total;
        }
        let y_hat = psi.values.iter().cloned().fold(f64::INFINITY, f64::min);
        if y_hat <= params.y_star {
            return Err(PairError::BelowRegion(y_hat, params.y_star));
        }
        let h = rho.spacing();
        let log_deriv: Vec<f64> = fd_derivative(&rho.values, h)
            .iter()
            .zip(&rho.values)
            .map(|(d, v)| d / v)
            .collect();
        let cum = rho.cumulative();
        let mass_cum = Sampled::from_values(rho.a, rho.b, cum);
        Ok(BasicPair {
            x_lo: psi.a,
            x_hi: psi.b,
            psi,
            rho,
            slope,
            dslope,
            log_deriv,
            mass_cum,
            y_hat,
            form,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_hi - self.x_lo
    }

    pub fn nodes(&self) -> usize {
        self.psi.len()
    }

    /// Curve height at `x` (analytic when available, interpolated otherwise).
    pub fn psi_at(&self, x: f64, params: &MapParams) -> f64 {
        match &self.form {
            CurveForm::Sampled => self.psi.eval(x),
            CurveForm::Reference(r) => r.eval(x, params),
            CurveForm::PerturbedReference {
                base,
                amp,
                freq,
                x0,
            } => base.eval(x, params) + amp * (freq * (x - x0)).sin(),
        }
    }

    pub fn slope_at(&self, x: f64, params: &MapParams) -> f64 {
        match &self.form {
            CurveForm::Sampled => interp_cache(&self.psi, &self.slope, x),
            CurveForm::Reference(r) => r.slope(x, params),
            CurveForm::PerturbedReference {
                base,
                amp,
                freq,
                x0,
            } => base.slope(x, params) + amp * freq * (freq * (x - x0)).cos(),
        }
    }

    pub fn dslope_at(&self, x: f64, params: &MapParams) -> f64 {
        match &self.form {
            CurveForm::Sampled => interp_cache(&self.psi, &self.dslope, x),
            CurveForm::Reference(r) => r.dslope(x, params),
            CurveForm::PerturbedReference {
                base,
                amp,
                freq,
                x0,
            } => base.dslope(x, params) - amp * freq * freq * (freq * (x - x0)).sin(),
        }
    }

    pub fn rho_at(&self, x: f64) -> f64 {
        self.rho.eval(x)
    }

    pub fn log_deriv_at(&self, x: f64) -> f64 {
        interp_cache(&self.rho, &self.log_deriv, x)
    }

    /// Adapted slope `h̃ = h + 1/Y′(ψ)`.
    pub fn adapted_slope_at(&self, x: f64, params: &MapParams) -> f64 {
        self.slope_at(x, params) + 1.0 / params.big_y_prime_raw(self.psi_at(x, params))
    }

    /// Mass of `[a, b] ⊂ I` under `ρ`.
    pub fn mass(&self, a: f64, b: f64) -> f64 {
        self.mass_cum.eval(b.min(self.x_hi)) - self.mass_cum.eval(a.max(self.x_lo))
    }

    /// Cumulative mass from the left endpoint.
    pub fn mass_below(&self, x: f64) -> f64 {
        self.mass_cum.eval(x)
    }

    /// `sup |r|` over the nodes.
    pub fn log_deriv_norm(&self) -> f64 {
        self.log_deriv.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Expectation of a phase-space observable along the pair.
    pub fn expect(&self, params: &MapParams, f: impl Fn(Point) -> f64) -> f64 {
        let n = self.nodes();
        let integrand = Sampled::from_fn(self.x_lo, self.x_hi, n, |x| {
            f(Point {
                x: x.rem_euclid(TAU),
                y: self.psi_at(x, params),
            }) * self.rho.eval(x)
        });
        integrand.integral()
    }

    /// Serialization record for experiment replay.
    pub fn to_record(&self, params_digest: &str) -> PairRecord {
        PairRecord {
            interval: (self.x_lo, self.x_hi),
            psi_samples: self.psi.values.clone(),
            rho_samples: self.rho.values.clone(),
            params_digest: params_digest.to_string(),
        }
    }

    pub fn from_record(rec: &PairRecord, params: &MapParams) -> Result<BasicPair, PairError> {
        let (lo, hi) = rec.interval;
        let psi = Sampled::from_values(lo, hi, rec.psi_samples.clone());
        let rho = Sampled::from_values(lo, hi, rec.rho_samples.clone());
        BasicPair::from_samples(psi, rho, params)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairRecord {
    pub interval: (f64, f64),
    pub psi_samples: Vec<f64>,
    pub rho_samples: Vec<f64>,
    pub params_digest: String,
}

fn interp_cache(grid: &Sampled, cache: &[f64], x: f64) -> f64 {
    let proxy = Sampled {
        a: grid.a,
        b: grid.b,
        values: cache.to_vec(),
    };
    proxy.eval(x)
}

// ---------------------------------------------------------------------------
// Reference pairs
// ---------------------------------------------------------------------------

/// Build the reference pair over `alpha_interval` through `anchor`
/// (uniform density). The interval must be standard: `δ/4 < |I| < δ`.
pub fn make_reference_pair(
    x_lo: f64,
    x_hi: f64,
    anchor: Point,
    params: &MapParams,
    delta: f64,
) -> Result<BasicPair, PairError> {
    let width = x_hi - x_lo;
    if !(width > delta / 4.0 && width < delta) {
        return Err(PairError::IntervalWidth {
            width,
            lo: delta / 4.0,
            hi: delta,
        });
    }
    if !(anchor.x >= x_lo && anchor.x <= x_hi) {
        return Err(PairError::AnchorOutside(anchor.x, x_lo, x_hi));
    }
    reference_pair_unchecked(x_lo, x_hi, anchor, params)
}

/// Reference pair without the interval-width gate (decomposition pieces and
/// charts construct reference curves over arbitrary spans).
pub fn reference_pair_unchecked(
    x_lo: f64,
    x_hi: f64,
    anchor: Point,
    params: &MapParams,
) -> Result<BasicPair, PairError> {
    let curve = ReferenceCurve::through(anchor, params)?;
    reference_pair_from_curve(x_lo, x_hi, curve, params)
}

pub fn reference_pair_from_curve(
    x_lo: f64,
    x_hi: f64,
    curve: ReferenceCurve,
    params: &MapParams,
) -> Result<BasicPair, PairError> {
    let n = DEFAULT_NODES;
    let psi = Sampled::from_fn(x_lo, x_hi, n, |x| curve.eval(x, params));
    let rho = Sampled::from_fn(x_lo, x_hi, n, |_| 1.0 / (x_hi - x_lo));
    let h = psi.spacing();
    let slope: Vec<f64> = (0..n).map(|i| curve.slope(psi.a + i as f64 * h, params)).collect();
    let dslope: Vec<f64> = (0..n)
        .map(|i| curve.dslope(psi.a + i as f64 * h, params))
        .collect();
    BasicPair::assemble(psi, rho, slope, dslope, CurveForm::Reference(curve), params)
}

/// Reference pair plus an admissible analytic perturbation, used by the
/// shadowing experiments where genuine slope deviations sit far below f64
/// resolution of the raw curve heights.
pub fn perturbed_reference_pair(
    x_lo: f64,
    x_hi: f64,
    anchor: Point,
    params: &MapParams,
    slope_margin: f64,
    freq: f64,
    standardness_d: f64,
) -> Result<BasicPair, PairError> {
    let curve = ReferenceCurve::through(anchor, params)?;
    let yp = params.big_y_prime_raw(anchor.y);
    let amp = slope_margin / standardness_d * yp.powf(-1.5) / freq;
    let x0 = anchor.x;
    let n = DEFAULT_NODES;
    let psi = Sampled::from_fn(x_lo, x_hi, n, |x| {
        curve.eval(x, params) + amp * (freq * (x - x0)).sin()
    });
    let rho = Sampled::from_fn(x_lo, x_hi, n, |_| 1.0 / (x_hi - x_lo));
    let h = psi.spacing();
    let slope: Vec<f64> = (0..n)
        .map(|i| {
            let x = psi.a + i as f64 * h;
            curve.slope(x, params) + amp * freq * (freq * (x - x0)).cos()
        })
        .collect();
    let dslope: Vec<f64> = (0..n)
        .map(|i| {
            let x = psi.a + i as f64 * h;
            curve.dslope(x, params) - amp * freq * freq * (freq * (x - x0)).sin()
        })
        .collect();
    BasicPair::assemble(
        psi,
        rho,
        slope,
        dslope,
        CurveForm::PerturbedReference {
            base: curve,
            amp,
            freq,
            x0,
        },
        params,
    )
}

// ---------------------------------------------------------------------------
// Expansion rate and pushforward
// ---------------------------------------------------------------------------

/// Local expansion rate `ℒ(x) = h̃(x)·Y′(ψ(x))` — the derivative of the
/// image angle along the curve (signed).
pub fn expansion_rate(pair: &BasicPair, x: f64, params: &MapParams) -> f64 {
    pair.adapted_slope_at(x, params) * params.big_y_prime_raw(pair.psi_at(x, params))
}

/// Diagnostics comparing the closed-form pushforward recursion with finite
/// differences of the sampled image.
#[derive(Clone, Copy, Debug, Default)]
pub struct PushforwardConsistency {
    pub slope_max_rel_dev: f64,
    pub dslope_max_rel_dev: f64,
    pub log_deriv_max_rel_dev: f64,
}

#[derive(Clone, Debug)]
pub struct Pushforward {
    pub pair: BasicPair,
    /// Mass of the source subinterval (the pre-normalization image mass).
    pub source_mass: f64,
    /// Mass of the image density before renormalization, integrated on the
    /// image grid; equals `source_mass` up to quadrature error.
    pub image_mass_raw: f64,
    pub consistency: PushforwardConsistency,
    /// Sign of the expansion on the subinterval.
    pub orientation: f64,
}

/// Push `pair` restricted to `[a, b]` forward one step. Requires `h̃ ≠ 0`
/// on the subinterval (monotone image angle).
pub fn pushforward_pair(
    pair: &BasicPair,
    a: f64,
    b: f64,
    params: &MapParams,
) -> Result<Pushforward, PairError> {
    pushforward_with_nodes(pair, a, b, params, None)
}

pub fn pushforward_with_nodes(
    pair: &BasicPair,
    a: f64,
    b: f64,
    params: &MapParams,
    node_override: Option<usize>,
) -> Result<Pushforward, PairError> {
    if a < pair.x_lo - 1e-12 || b > pair.x_hi + 1e-12 || b <= a {
        return Err(PairError::SubintervalOutside(a, b));
    }
    let degenerate_tol = 1e-9;
    // Source sampling of the subinterval.
    let n_src = DEFAULT_NODES;
    let hs = (b - a) / (n_src - 1) as f64;
    let xs: Vec<f64> = (0..n_src).map(|i| a + i as f64 * hs).collect();
    let mut min_abs_l = f64::INFINITY;
    let mut sign = 0.0;
    let lvals: Vec<f64> = xs
        .iter()
        .map(|&x| expansion_rate(pair, x, params))
        .collect();
    for &l in &lvals {
        min_abs_l = min_abs_l.min(l.abs());
        if sign == 0.0 {
            sign = l.signum();
        } else if sign != l.signum() {
            min_abs_l = 0.0;
        }
    }
    if min_abs_l < degenerate_tol {
        return Err(PairError::DegenerateImage(min_abs_l, degenerate_tol));
    }

    // Continuous lift of the image angle, anchored at the left end.
    let y0 = pair.psi_at(a, params);
    let base_dd = params.big_y_dd(y0).add_f64(a);
    let base_angle = base_dd.mod_tau();
    let lift = |x: f64| -> f64 {
        let y = pair.psi_at(x, params);
        params
            .big_y_dd(y)
            .add_f64(x)
            .sub(base_dd)
            .value()
    };
    let u_end = lift(b);
    let (u_lo, u_hi) = if sign > 0.0 { (0.0, u_end) } else { (u_end, 0.0) };
    let img_width = u_hi - u_lo;

    // Image node count per the spacing rule: image spacing at most twice the
    // source spacing scaled by the local expansion.
    let n_img = match node_override {
        Some(n) => n.max(5),
        None => {
            let target = (img_width / (2.0 * hs * min_abs_l)).ceil() as usize + 1;
            target.clamp(33, 1 << 16)
        }
    };

    // Solve x(u) on target nodes by Newton on the lift (bisection fallback).
    let hu = img_width / (n_img - 1) as f64;
    let mut src_x = Vec::with_capacity(n_img);
    for i in 0..n_img {
        let u_t = u_lo + i as f64 * hu;
        let f = |x: f64| lift(x) - u_t;
        let mut x_guess = if i == 0 {
            if sign > 0.0 {
                a
            } else {
                b
            }
        } else {
            *src_x.last().unwrap()
        };
        let mut ok = false;
        for _ in 0..60 {
            let fv = f(x_guess);
            if fv.abs() < 1e-12 * img_width.max(1.0) {
                ok = true;
                break;
            }
            let d = expansion_rate(pair, x_guess, params);
            let next = x_guess - fv / d;
            if next.is_finite() && next >= a - hs && next <= b + hs {
                x_guess = next.clamp(a, b);
            } else {
                break;
            }
        }
        if !ok {
            if let Some(r) = crate::numerics::brent_root(a, b, &f, 1e-14) {
                x_guess = r;
            }
        }
        src_x.push(x_guess);
    }
    // exact ends
    if sign > 0.0 {
        src_x[0] = a;
        *src_x.last_mut().unwrap() = b;
    } else {
        src_x[0] = b;
        *src_x.last_mut().unwrap() = a;
    }

    // Image samples and closed-form caches.
    let x_img_lo = base_angle + u_lo;
    let x_img_hi = base_angle + u_hi;
    let mut psi_v = Vec::with_capacity(n_img);
    let mut rho_v = Vec::with_capacity(n_img);
    let mut slope_v = Vec::with_capacity(n_img);
    let mut dslope_v = Vec::with_capacity(n_img);
    let mut logd_v = Vec::with_capacity(n_img);
    for (i, &x) in src_x.iter().enumerate() {
        let x_img = x_img_lo + i as f64 * hu;
        let y = pair.psi_at(x, params);
        let yp = params.big_y_prime_raw(y);
        let ypp = params.big_y_second_raw(y);
        let h = pair.slope_at(x, params);
        let hd = pair.dslope_at(x, params);
        let r = pair.log_deriv_at(x);
        let l = (h + 1.0 / yp) * yp;
        let one_m = 1.0 - 1.0 / l;
        let y_img = y + params.kick(x_img.rem_euclid(TAU));
        psi_v.push(y_img);
        rho_v.push(pair.rho_at(x) / l.abs());
        slope_v.push(2.0 * params.forcing(x_img, 2) + one_m / yp);
        dslope_v.push(
            2.0 * params.forcing(x_img, 3) + hd / (l * l * l)
                - ypp / (yp * yp * yp) * one_m * one_m * one_m,
        );
        logd_v.push(r / l - hd * yp / (l * l) - ypp / (yp * yp) * one_m * one_m);
    }

    let psi = Sampled::from_values(x_img_lo, x_img_hi, psi_v);
    let rho_raw = Sampled::from_values(x_img_lo, x_img_hi, rho_v);
    let image_mass_raw = rho_raw.integral();
    let source_mass = pair.mass(a, b);

    // Finite-difference comparison on the resampled image.
    let fd_slope = fd_derivative(&psi.values, hu);
    let fd_dslope = fd_derivative(&fd_slope, hu);
    let fd_logd: Vec<f64> = fd_derivative(&rho_raw.values, hu)
        .iter()
        .zip(&rho_raw.values)
        .map(|(d, v)| d / v)
        .collect();
    let mut cons = PushforwardConsistency::default();
    let interior = 4..n_img.saturating_sub(4);
    for i in interior {
        let rel = |got: f64, want: f64, scale: f64| (got - want).abs() / want.abs().max(scale);
        cons.slope_max_rel_dev = cons
            .slope_max_rel_dev
            .max(rel(fd_slope[i], slope_v[i], 1e-3 * params.a.max(1e-6)));
        cons.dslope_max_rel_dev = cons
            .dslope_max_rel_dev
            .max(rel(fd_dslope[i], dslope_v[i], 1e-1 * params.a.max(1e-6)));
        cons.log_deriv_max_rel_dev = cons
            .log_deriv_max_rel_dev
            .max(rel(fd_logd[i], logd_v[i], 1e-2));
    }

    let out = BasicPair::assemble(psi, rho_raw, slope_v, dslope_v, CurveForm::Sampled, params)?;
    Ok(Pushforward {
        pair: out,
        source_mass,
        image_mass_raw,
        consistency: cons,
        orientation: sign,
    })
}

// ---------------------------------------------------------------------------
// Standardness
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct StandardnessReport {
    pub is_standard: bool,
    pub slope_ok: bool,
    pub dslope_ok: bool,
    pub regular_ok: bool,
    pub interval_ok: bool,
    pub max_delta_slope: f64,
    pub max_delta_dslope: f64,
    pub max_abs_r: f64,
    pub violating_x: Option<f64>,
    /// The constant `D` the slope test used.
    pub d_constant: f64,
}

/// Classify closeness to the reference-slope field per the standard-pair
/// inequalities: `|Δh| < D⁻¹ Y′(ψ)^{−3/2}` pointwise, `|Δḣ| < A/10`,
/// `‖r‖ < 1`, and `δ/4 < |I| < δ`.
pub fn check_standard(
    pair: &BasicPair,
    params: &MapParams,
    d_constant: f64,
    delta: f64,
) -> StandardnessReport {
    let n = pair.nodes();
    let h = pair.psi.spacing();
    let mut max_ds = 0.0f64;
    let mut max_dds = 0.0f64;
    let mut max_r = 0.0f64;
    let mut slope_ok = true;
    let mut dslope_ok = true;
    let mut violating_x = None;
    for i in 0..n {
        let x = pair.psi.a + i as f64 * h;
        let y = pair.psi.values[i];
        let y_prev = y - params.kick(x);
        if y_prev <= 0.0 {
            slope_ok = false;
            violating_x.get_or_insert(x);
            continue;
        }
        let field = slope_field_1(
            Point {
                x: x.rem_euclid(TAU),
                y,
            },
            Some(y_prev),
            params,
        );
        let ds = (pair.slope[i] - field.h1).abs();
        let dds = (pair.dslope[i] - field.h1_dot).abs();
        max_ds = max_ds.max(ds);
        max_dds = max_dds.max(dds);
        max_r = max_r.max(pair.log_deriv[i].abs());
        let yp = params.big_y_prime_raw(y);
        let slope_thresh = yp.powf(-1.5) / d_constant;
        if ds >= slope_thresh {
            slope_ok = false;
            violating_x.get_or_insert(x);
        }
        if dds >= params.a / 10.0 {
            dslope_ok = false;
            violating_x.get_or_insert(x);
        }
    }
    let regular_ok = max_r < 1.0;
    let width = pair.width();
    let interval_ok = width > delta / 4.0 && width < delta;
    StandardnessReport {
        is_standard: slope_ok && dslope_ok && regular_ok && interval_ok,
        slope_ok,
        dslope_ok,
        regular_ok,
        interval_ok,
        max_delta_slope: max_ds,
        max_delta_dslope: max_dds,
        max_abs_r: max_r,
        violating_x,
        d_constant,
    }
}

// ---------------------------------------------------------------------------
// Density comparison bounds
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct DensityBounds {
    pub mu1: f64,
    pub mu2: f64,
    pub min_rho: f64,
    pub max_rho: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
    pub witness_x: Option<f64>,
}

impl DensityBounds {
    pub fn ok(&self) -> bool {
        self.lower_ok && self.upper_ok
    }
}

/// Verify `μ₁ = δ⁻¹e^{−δ} < ρ < 4δ⁻¹e^{δ} = μ₂` pointwise for a regular
/// density on a standard interval.
pub fn gronwall_bounds(pair: &BasicPair, delta: f64) -> DensityBounds {
    let mu1 = (-delta).exp() / delta;
    let mu2 = 4.0 * delta.exp() / delta;
    let mut min_rho = f64::INFINITY;
    let mut max_rho = 0.0f64;
    let mut witness = None;
    let h = pair.rho.spacing();
    for (i, &v) in pair.rho.values.iter().enumerate() {
        min_rho = min_rho.min(v);
        max_rho = max_rho.max(v);
        if (v <= mu1 || v >= mu2) && witness.is_none() {
            witness = Some(pair.rho.a + i as f64 * h);
        }
    }
    DensityBounds {
        mu1,
        mu2,
        min_rho,
        max_rho,
        lower_ok: min_rho > mu1,
        upper_ok: max_rho < mu2,
        witness_x: witness,
    }
}

// ---------------------------------------------------------------------------
// Shadowing by reference curves
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ShadowReport {
    pub reference: BasicPair,
    pub anchor_x: f64,
    /// sup over the retained set of the vertical distance between the two
    /// image curves at equal angle.
    pub max_vertical_gap: f64,
    /// Mass of the part of the curve whose image angle leaves the image
    /// range of the shadowing reference curve.
    pub excluded_mass: f64,
}

/// Find the shadowing reference pair of a clean standard pair: anchored at
/// the minimiser of `|φ̈_A|` over the critical-set-free part, and report how
/// closely its image tracks the image of the pair.
pub fn shadow_reference(
    pair: &BasicPair,
    params: &MapParams,
    k1: f64,
) -> Result<ShadowReport, PairError> {
    // Γ* = curve minus the order-1 critical strip; must be connected.
    let n = pair.nodes();
    let h = pair.psi.spacing();
    let mut outside: Vec<bool> = Vec::with_capacity(n);
    for i in 0..n {
        let x = pair.psi.a + i as f64 * h;
        let y = pair.psi.values[i];
        let f = slope_field_1_exact(
            Point {
                x: x.rem_euclid(TAU),
                y,
            },
            params,
        )
        .map_err(PairError::Map)?;
        let thresh = k1 * params.big_y_prime_raw(y).powf(-0.5);
        outside.push(f.h1_tilde.abs() >= thresh);
    }
    // connected components of `outside`
    let mut comps: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (i, &o) in outside.iter().enumerate() {
        match (o, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                comps.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        comps.push((s, n - 1));
    }
    if comps.len() != 1 {
        return Err(PairError::NotClean);
    }
    let (i0, i1) = comps[0];

    // anchor: argmin |φ̈_A| over Γ*
    let mut best_i = i0;
    let mut best = f64::INFINITY;
    for i in i0..=i1 {
        let x = pair.psi.a + i as f64 * h;
        let v = params.forcing(x.rem_euclid(TAU), 2).abs();
        if v < best {
            best = v;
            best_i = i;
        }
    }
    let anchor_x = pair.psi.a + best_i as f64 * h;
    let anchor = Point {
        x: anchor_x,
        y: pair.psi_at(anchor_x, params),
    };
    let reference = reference_pair_unchecked(pair.x_lo, pair.x_hi, anchor, params)?;
    let ref_curve = match &reference.form {
        CurveForm::Reference(c) => *c,
        _ => unreachable!(),
    };

    // Image angles of both curves on a common reduced scale. The reference
    // curve's `phase_lift` equals the absolute angle minus the constant
    // `c − (c mod 2π)`; subtracting the same double-double constant from the
    // pair's angle makes the two directly comparable.
    let a_star = pair.psi.a + i0 as f64 * h;
    let b_star = pair.psi.a + i1 as f64 * h;
    let offset = ref_curve.c_dd.add_f64(-ref_curve.c_mod);
    let lift_ref = |z: f64| ref_curve.phase_lift(z, 0.0, params);
    let lift_pair = |x: f64| {
        let y = pair.psi_at(x, params);
        params.big_y_dd(y).add_f64(x).sub(offset).value()
    };

    // Vertical gap via the perturbation algebra when available, otherwise by
    // direct subtraction (accurate while the gap clears f64 resolution of
    // the heights).
    let mut max_gap = 0.0f64;
    let probes = 257;
    for j in 0..probes {
        let x = a_star + (b_star - a_star) * j as f64 / (probes - 1) as f64;
        let gap = match &pair.form {
            CurveForm::PerturbedReference {
                base,
                amp,
                freq,
                x0,
            } if (base.c - ref_curve.c).abs() < 1e-6 * ref_curve.c.abs() => {
                // Transport the analytic perturbation along the fiber
                // foliation instead of subtracting near-equal heights.
                let p = amp * (freq * (x - x0)).sin();
                let psi_bar = base.eval(x, params);
                let yp = params.big_y_prime_raw(psi_bar);
                let l_bar = (base.slope(x, params) + 1.0 / yp) * yp;
                let s = yp * p / l_bar;
                let h_bar = base.slope(x, params);
                let dd = base.dslope(x, params);
                (p - h_bar * s - 0.5 * dd * s * s).abs()
            }
            _ => {
                // find z on the reference with the same image angle
                let target = lift_pair(x);
                let mut z = x;
                for _ in 0..60 {
                    let diff = lift_ref(z) - target;
                    let d = expansion_rate(&reference, z, params);
                    if d.abs() < 1e-12 {
                        break;
                    }
                    let step = diff / d;
                    z -= step;
                    if step.abs() < 1e-16 * (1.0 + z.abs()) {
                        break;
                    }
                }
                (pair.psi_at(x, params) - reference.psi_at(z, params)).abs()
            }
        };
        max_gap = max_gap.max(gap);
    }

    // Excluded mass: points whose image angle leaves the image range of the
    // reference curve over the same base (their connecting fiber misses it).
    let ref_lo = lift_ref(a_star).min(lift_ref(b_star));
    let ref_hi = lift_ref(a_star).max(lift_ref(b_star));
    let mut excluded = pair.mass(pair.x_lo, a_star) + pair.mass(b_star, pair.x_hi);
    let fine = 2049;
    let cell = (b_star - a_star) / (fine - 1) as f64;
    for j in 0..fine {
        let x = a_star + j as f64 * cell;
        let u = lift_pair(x);
        if !(ref_lo..=ref_hi).contains(&u) {
            excluded += pair.mass(x - 0.5 * cell, x + 0.5 * cell);
        }
    }
    Ok(ShadowReport {
        reference,
        anchor_x,
        max_vertical_gap: max_gap,
        excluded_mass: excluded,
    })
}

// ---------------------------------------------------------------------------
// Adapted coordinates
// ---------------------------------------------------------------------------

/// Chart straightening the reference-curve foliation of a vertical strip:
/// `κ(ξ, η) = (ξ + x̄, ψ_η(ξ + x̄))` with `ψ_η` the reference curve through
/// `(x̄, η)`.
#[derive(Clone, Copy, Debug)]
pub struct AdaptedChart {
    pub x_bar: f64,
    pub strip_lo: f64,
    pub strip_hi: f64,
}

impl AdaptedChart {
    pub fn new(strip_lo: f64, strip_hi: f64, x_bar: f64) -> Result<AdaptedChart, PairError> {
        if !(x_bar >= strip_lo && x_bar <= strip_hi) {
            return Err(PairError::AnchorOutside(x_bar, strip_lo, strip_hi));
        }
        Ok(AdaptedChart {
            x_bar,
            strip_lo,
            strip_hi,
        })
    }

    /// Forward chart.
    pub fn to_phase(&self, xi: f64, eta: f64, params: &MapParams) -> Result<Point, MapError> {
        let curve = ReferenceCurve::through(
            Point {
                x: self.x_bar,
                y: eta,
            },
            params,
        )?;
        let x = xi + self.x_bar;
        Ok(Point {
            x,
            y: curve.eval(x, params),
        })
    }

    /// Inverse chart (closed form: the reference curve through `(x, y)` is
    /// followed back to the anchor abscissa).
    pub fn from_phase(&self, p: Point, params: &MapParams) -> Result<(f64, f64), MapError> {
        let curve = ReferenceCurve::through(p, params)?;
        let eta = curve.eval(self.x_bar, params);
        Ok((p.x - self.x_bar, eta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::apply_map;

    fn params(a: f64, gamma: f64, y_star: f64) -> MapParams {
        MapParams::with_cutoffs(a, gamma, 1.0, 10.0, y_star).unwrap()
    }

    #[test]
    fn slope_field_hand_value() {
        // A=1, γ=3, x=π/2, y=10, y_prev=10 → h̃₁ = −2 + 2/300
        let p = MapParams::with_cutoffs(1.0, 3.0, 1.0, 1.0, 2.0).unwrap();
        let f = slope_field_1(
            Point::new(std::f64::consts::FRAC_PI_2, 10.0),
            Some(10.0),
            &p,
        );
        let want = -2.0 + 2.0 / 300.0;
        assert!((f.h1_tilde - want).abs() < 1e-12, "{}", f.h1_tilde);
    }

    #[test]
    fn slope_field_vanishes_at_high_y() {
        let p = params(1.0, 3.0, 100.0);
        // φ̈ = −A sin; zero at x=0
        let f = slope_field_1(Point::new(0.0, 1e8), None, &p);
        assert!(f.h1_tilde.abs() < 1e-15);
        assert!(f.approx_error_bound.unwrap() < 1e-7);
    }

    #[test]
    fn exact_vs_approx_mode_error_scaling() {
        let p = params(1.0, 3.0, 50.0);
        for &y in &[100.0, 1000.0, 10_000.0] {
            let pt = Point::new(1.0, y);
            let exact = slope_field_1_exact(pt, &p).unwrap();
            let approx = slope_field_1(pt, None, &p);
            let rel = (exact.h1 - approx.h1).abs() / (1.0 / p.big_y_prime(y).unwrap());
            assert!(rel < 10.0 / y, "y={y}, rel={rel}");
        }
    }

    #[test]
    fn reference_pair_hits_anchor_and_matches_slope_field() {
        let p = params(1.0, 3.0, 50.0);
        let anchor = Point::new(1.0, 200.0);
        let pair = make_reference_pair(0.8, 1.2, anchor, &p, 0.5).unwrap();
        assert!((pair.psi_at(1.0, &p) - 200.0).abs() < 1e-9);
        // cached slope = slope field with exact preimage height, everywhere
        for i in (0..pair.nodes()).step_by(97) {
            let x = pair.psi.a + i as f64 * pair.psi.spacing();
            let y = pair.psi.values[i];
            let f = slope_field_1_exact(Point::new(x.rem_euclid(TAU), y), &p).unwrap();
            assert!(
                (pair.slope[i] - f.h1).abs() < 1e-8,
                "i={i}: {} vs {}",
                pair.slope[i],
                f.h1
            );
        }
    }

    #[test]
    fn reference_pairs_same_curve_share_c() {
        let p = params(1.0, 3.0, 50.0);
        let anchor = Point::new(1.0, 200.0);
        let pair = make_reference_pair(0.8, 1.2, anchor, &p, 0.5).unwrap();
        let x2 = 1.1;
        let anchor2 = Point {
            x: x2,
            y: pair.psi_at(x2, &p),
        };
        let c1 = ReferenceCurve::through(anchor, &p).unwrap().c;
        let c2 = ReferenceCurve::through(anchor2, &p).unwrap().c;
        assert!((c1 - c2).abs() / c1 < 1e-10, "{c1} vs {c2}");
    }

    #[test]
    fn interval_width_gate() {
        let p = params(1.0, 3.0, 50.0);
        let anchor = Point::new(1.0, 200.0);
        assert!(make_reference_pair(0.9, 1.6, anchor, &p, 0.5).is_err());
        assert!(make_reference_pair(0.99, 1.05, anchor, &p, 0.5).is_err());
    }

    #[test]
    fn expansion_rate_matches_finite_difference_of_image_angle() {
        let p = params(1.0, 3.0, 50.0);
        let anchor = Point::new(2.0, 100.0);
        let pair = make_reference_pair(1.8, 2.2, anchor, &p, 0.5).unwrap();
        let x = 2.05;
        let l = expansion_rate(&pair, x, &p);
        let eps = 1e-7;
        let angle = |x: f64| {
            let y = pair.psi_at(x, &p);
            p.big_y_dd(y).add_f64(x)
        };
        let fd = angle(x + eps).sub(angle(x - eps)).value() / (2.0 * eps);
        assert!((l - fd).abs() / fd.abs() < 1e-5, "{l} vs {fd}");
    }

    #[test]
    fn pushforward_mass_and_consistency() {
        let p = params(1.0, 3.0, 50.0);
        let anchor = Point::new(2.0, 100.0);
        let pair = make_reference_pair(1.8, 2.2, anchor, &p, 0.5).unwrap();
        // pick a subinterval where h̃ has no zero
        let res = pushforward_pair(&pair, 2.0, 2.001, &p).unwrap();
        assert!((res.image_mass_raw - res.source_mass).abs() < 1e-8);
        assert!((res.pair.rho.integral() - 1.0).abs() < 1e-9);
        assert!(res.consistency.slope_max_rel_dev < 1e-4, "{:?}", res.consistency);
        assert!(res.consistency.dslope_max_rel_dev < 1e-4, "{:?}", res.consistency);
        assert!(res.consistency.log_deriv_max_rel_dev < 1e-4, "{:?}", res.consistency);
    }

    #[test]
    fn pushforward_of_reference_matches_slope_field_on_image() {
        let p = params(1.0, 3.0, 50.0);
        let anchor = Point::new(2.0, 80.0);
        let pair = make_reference_pair(1.8, 2.2, anchor, &p, 0.5).unwrap();
        let res = pushforward_pair(&pair, 2.0, 2.002, &p).unwrap();
        let img = &res.pair;
        for i in (4..img.nodes() - 4).step_by(101) {
            let x = img.psi.a + i as f64 * img.psi.spacing();
            let y = img.psi.values[i];
            let f = slope_field_1_exact(Point::new(x.rem_euclid(TAU), y), &p).unwrap();
            assert!(
                (img.slope[i] - f.h1).abs() < 1e-6,
                "node {i}: {} vs {}",
                img.slope[i],
                f.h1
            );
        }
    }

    #[test]
    fn zero_forcing_pushforward_flat_curve() {
        // A=0, constant ψ: ρ' uniform and h' = (1/Y')(1 − 1/ℒ) with ℒ = 1,
        // hence h' = 0.
        let p = MapParams::with_cutoffs(0.0, 2.0, 1.0, 1.0, 2.0).unwrap();
        let pair = BasicPair::from_fns(1.0, 1.4, 512, |_| 40.0, |_| 1.0, &p).unwrap();
        let res = pushforward_pair(&pair, 1.05, 1.35, &p).unwrap();
        for (i, &s) in res.pair.slope.iter().enumerate() {
            assert!(s.abs() < 1e-10, "slope {s} at {i}");
        }
        let (lo, hi) = (res.pair.rho.values[4], res.pair.rho.values[res.pair.nodes() - 5]);
        assert!((lo - hi).abs() / hi < 1e-9);
    }

    #[test]
    fn standardness_of_reference_and_exponential_density() {
        let p = params(1.0, 3.0, 50.0);
        let anchor = Point::new(2.0, 500.0);
        let pair = make_reference_pair(1.8, 2.2, anchor, &p, 0.5).unwrap();
        let rep = check_standard(&pair, &p, 10.0, 0.5);
        assert!(rep.is_standard, "{rep:?}");
        assert!(rep.max_delta_slope < 1e-9);

        // ρ ∝ exp(2x) on a unit-ish interval fails regularity (‖r‖ = 2)
        let bad = BasicPair::from_fns(
            1.8,
            2.2,
            512,
            |x| anchorless_psi(x, &p),
            |x| (2.0 * x).exp(),
            &p,
        )
        .unwrap();
        let rep = check_standard(&bad, &p, 10.0, 0.5);
        assert!(!rep.regular_ok);
        assert!((rep.max_abs_r - 2.0).abs() < 1e-3);
    }

    fn anchorless_psi(x: f64, params: &MapParams) -> f64 {
        ReferenceCurve::through(Point::new(2.0, 500.0), params)
            .unwrap()
            .eval(x, params)
    }

    #[test]
    fn fast_phase_matches_exact_lift() {
        for &(gamma, y) in &[(3.0, 500.0), (3.0, 9.7e4), (2.5, 1.1e3), (4.0, 800.0)] {
            let p = params(1.0, gamma, 100.0);
            let curve = ReferenceCurve::through(Point::new(1.5, y), &p).unwrap();
            let fp = curve.fast_phase(1.35, 1.65, 4.0 * p.a, &p);
            for i in 0..200 {
                let x = 1.35 + 0.3 * i as f64 / 199.0;
                for &extra in &[0.0, 1.3, -2.0] {
                    let exact = curve.phase_lift(x, extra, &p);
                    let fast = fp.eval(x, extra);
                    // the lift value itself sits at the f64 representation
                    // floor for large heights; allow a few ulps of it
                    let tol = (8.0 * f64::EPSILON * exact.abs()).max(2e-6);
                    assert!(
                        (exact - fast).abs() < tol,
                        "gamma={gamma} y={y} x={x} extra={extra}: {exact} vs {fast}"
                    );
                }
            }
        }
    }

    #[test]
    fn gronwall_bounds_formulas() {
        // δ=0.5, uniform ρ on |I|=0.4 → ρ=2.5 within (2e^{−1/2}, 8e^{1/2})
        let p = params(1.0, 3.0, 50.0);
        let pair = BasicPair::from_fns(1.0, 1.4, 512, |_| 200.0, |_| 1.0, &p).unwrap();
        let b = gronwall_bounds(&pair, 0.5);
        assert!((b.mu1 - 2.0 * (-0.5f64).exp()).abs() < 1e-12);
        assert!((b.mu2 - 8.0 * 0.5f64.exp()).abs() < 1e-12);
        assert!(b.ok());

        // ρ ∝ e^{0.9x} on |I| = 0.45, δ = 0.5: bounds hold
        let pair = BasicPair::from_fns(1.0, 1.45, 512, |_| 200.0, |x| (0.9 * x).exp(), &p).unwrap();
        let b = gronwall_bounds(&pair, 0.5);
        assert!(b.ok(), "{b:?}");
    }

    #[test]
    fn adapted_chart_round_trip_and_anchor() {
        let p = params(1.0, 3.0, 50.0);
        let chart = AdaptedChart::new(1.0, 1.4, 1.2).unwrap();
        // κ(0, η) = (x̄, η)
        let q = chart.to_phase(0.0, 300.0, &p).unwrap();
        assert!((q.x - 1.2).abs() < 1e-14);
        assert!((q.y - 300.0).abs() < 1e-9);
        // closed-form inverse round trip
        for k in 0..50 {
            let xi = -0.15 + 0.3 * (k as f64) / 49.0;
            let eta = 120.0 + 5.0 * (k as f64);
            let q = chart.to_phase(xi, eta, &p).unwrap();
            let (xi2, eta2) = chart.from_phase(q, &p).unwrap();
            assert!((xi - xi2).abs() < 1e-9);
            assert!((eta - eta2).abs() / eta < 1e-9);
        }
    }

    #[test]
    fn adapted_chart_inverse_matches_root_find_oracle() {
        let p = params(1.0, 2.5, 50.0);
        let chart = AdaptedChart::new(2.0, 2.4, 2.2).unwrap();
        let q = chart.to_phase(0.13, 210.0, &p).unwrap();
        let (_, eta) = chart.from_phase(q, &p).unwrap();
        // oracle: 1-D root find on η ↦ ψ_η(q.x) − q.y
        let f = |e: f64| chart.to_phase(q.x - 2.2, e, &p).unwrap().y - q.y;
        let oracle = crate::numerics::brent_root(150.0, 280.0, &f, 1e-12).unwrap();
        assert!((eta - oracle).abs() < 1e-7, "{eta} vs {oracle}");
    }

    #[test]
    fn horizontal_line_maps_to_reference_curve() {
        let p = params(1.0, 3.0, 50.0);
        let chart = AdaptedChart::new(1.0, 1.4, 1.2).unwrap();
        let eta = 250.0;
        // points of the chart's horizontal line at η, mapped forward, land on
        // the image of the vertical fiber: verify they form a reference curve
        // by checking the slope identity.
        for k in 0..20 {
            let xi = -0.1 + 0.2 * k as f64 / 19.0;
            let q = chart.to_phase(xi, eta, &p).unwrap();
            let f = slope_field_1_exact(Point::new(q.x.rem_euclid(TAU), q.y), &p).unwrap();
            let curve = ReferenceCurve::through(q, &p).unwrap();
            assert!((curve.slope(q.x, &p) - f.h1).abs() < 1e-10);
        }
    }

    #[test]
    fn expectation_change_of_variables() {
        // E_ℓ(𝒜∘F) equals the mass-weighted expectation over pushforward
        // pieces of 𝒜.
        let p = params(1.0, 2.5, 50.0);
        let anchor = Point::new(2.0, 80.0);
        let pair = make_reference_pair(1.8, 2.2, anchor, &p, 0.5).unwrap();
        let obs = |pt: Point| (pt.x).cos();
        // restrict to a subinterval where the image angle is monotone
        let a = 1.9;
        let b = 1.95;
        let lhs = {
            let integrand = Sampled::from_fn(a, b, 2049, |x| {
                let pt = Point {
                    x: x.rem_euclid(TAU),
                    y: pair.psi_at(x, &p),
                };
                obs(apply_map(pt, &p).unwrap()) * pair.rho_at(x)
            });
            integrand.integral()
        };
        let mut rhs = 0.0;
        let pieces = 4;
        for j in 0..pieces {
            let pa = a + (b - a) * j as f64 / pieces as f64;
            let pb = a + (b - a) * (j + 1) as f64 / pieces as f64;
            let push = pushforward_pair(&pair, pa, pb, &p).unwrap();
            rhs += push.source_mass * push.pair.expect(&p, obs);
        }
        assert!((lhs - rhs).abs() < 1e-6, "lhs {lhs} vs rhs {rhs}");
    }
}
