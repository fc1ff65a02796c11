//! Continuously updated GMM on the orthogonalized interaction moments:
//! objective, minimization, sandwich variance and the overidentification test.
//!
//! Because `gbar(beta)` is affine and `Omega(beta)` quadratic in `beta`, the
//! objective `Q(beta) = gbar^T Omega^{-1} gbar / 2` and both of its
//! derivatives are evaluated from the precomputed cross moments:
//!
//! ```text
//! x   = Omega^{-1} gbar
//! Q'  = gbar'^T x - x^T Omega' x / 2
//! Q'' = u^T Omega^{-1} u - x^T S_bb x,   u = gbar' - Omega' x
//! ```
//!
//! with `gbar' = -bbar` and `Omega' = -(S_ab + S_ab^T) + 2 beta S_bb`.
//!
//! Regularization, when needed, adds `c * trace(S) / r` to the diagonal of
//! each coefficient matrix. The regularized `Omega` is then still quadratic in
//! `beta` and equals `Omega(beta) + c * trace(Omega(beta)) / r * I`, so the
//! derivative formulas above hold unchanged.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chisq::{chisq_quantile, chisq_sf};
use crate::error::{Error, Result};
use crate::linalg::{condition_estimate, factor_spd, SpdFactor, RIDGE_LADDER};
use crate::moments::{CrossMoments, MomentComponents};

pub const DEFAULT_BOUNDS: (f64, f64) = (-10.0, 10.0);
pub const DEFAULT_GRID_POINTS: usize = 512;
pub const DEFAULT_TOL: f64 = 1e-9;

/// What to do when `Omega(beta)` does not factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RidgePolicy {
    /// Climb the ridge ladder until every evaluation factors.
    Ladder,
    /// Fail with a factorization error.
    Off,
}

impl std::str::FromStr for RidgePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ladder" => Ok(RidgePolicy::Ladder),
            "off" => Ok(RidgePolicy::Off),
            _ => Err(Error::Config(format!(
                "unknown ridge policy `{s}` (expected ladder or off)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CueOptions {
    pub bounds: (f64, f64),
    pub grid_points: usize,
    pub tol: f64,
    pub ci_level: f64,
    pub ridge: RidgePolicy,
}

impl Default for CueOptions {
    fn default() -> Self {
        Self {
            bounds: DEFAULT_BOUNDS,
            grid_points: DEFAULT_GRID_POINTS,
            tol: DEFAULT_TOL,
            ci_level: 0.95,
            ridge: RidgePolicy::Ladder,
        }
    }
}

/// Cross moments with the diagonal loading of one ridge rung applied.
#[derive(Debug, Clone)]
pub struct Objective {
    cross: CrossMoments,
    ridge_scale: f64,
}

/// Objective value and derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveDerivatives {
    pub value: f64,
    pub first: f64,
    pub second: f64,
}

struct Solved {
    gbar: DVector<f64>,
    x: DVector<f64>,
    factor: Option<SpdFactor>,
}

impl Objective {
    /// `ridge_scale` is the multiple of `trace(Omega)/r` added to the diagonal.
    pub fn new(mc: &MomentComponents, ridge_scale: f64) -> Self {
        Self::from_cross(mc.cross(), ridge_scale)
    }

    pub fn from_cross(cross: &CrossMoments, ridge_scale: f64) -> Self {
        let mut cross = cross.clone();
        if ridge_scale > 0.0 {
            let r = cross.r() as f64;
            let (taa, tab, tbb) = (cross.s_aa.trace(), cross.s_ab.trace(), cross.s_bb.trace());
            for i in 0..cross.r() {
                cross.s_aa[(i, i)] += ridge_scale * taa / r;
                cross.s_ab[(i, i)] += ridge_scale * tab / r;
                cross.s_bb[(i, i)] += ridge_scale * tbb / r;
            }
        }
        Self { cross, ridge_scale }
    }

    pub fn ridge_scale(&self) -> f64 {
        self.ridge_scale
    }

    /// The (possibly regularized) `Omega(beta)`.
    pub fn omega(&self, beta: f64) -> DMatrix<f64> {
        self.cross.omega(beta)
    }

    fn solve(&self, beta: f64) -> Result<Solved> {
        let gbar = self.cross.gbar(beta);
        if gbar.iter().all(|&v| v == 0.0) {
            // Q = 0 whatever Omega is; skip the (possibly singular) factorization
            return Ok(Solved {
                x: DVector::zeros(gbar.len()),
                gbar,
                factor: None,
            });
        }
        let omega = self.omega(beta);
        let factor = factor_spd(&omega, 0.0).ok_or_else(|| Error::Factorization {
            ridge: self.ridge_scale,
            condition: condition_estimate(&omega),
        })?;
        let x = factor.solve(&gbar);
        Ok(Solved {
            gbar,
            x,
            factor: Some(factor),
        })
    }

    pub fn value(&self, beta: f64) -> Result<f64> {
        let s = self.solve(beta)?;
        Ok((0.5 * s.gbar.dot(&s.x)).max(0.0))
    }

    pub fn derivatives(&self, beta: f64) -> Result<ObjectiveDerivatives> {
        let s = self.solve(beta)?;
        let value = (0.5 * s.gbar.dot(&s.x)).max(0.0);
        let Some(factor) = s.factor else {
            // gbar = 0: first derivative vanishes; the curvature needs Omega
            let omega = self.omega(beta);
            let f = factor_spd(&omega, 0.0).ok_or_else(|| Error::Factorization {
                ridge: self.ridge_scale,
                condition: condition_estimate(&omega),
            })?;
            let gp = -&self.cross.b_bar;
            let second = gp.dot(&f.solve(&gp));
            return Ok(ObjectiveDerivatives {
                value,
                first: 0.0,
                second,
            });
        };
        let gp = -&self.cross.b_bar;
        let op = self.cross.omega_prime(beta);
        let opx = &op * &s.x;
        let first = gp.dot(&s.x) - 0.5 * s.x.dot(&opx);
        let u = &gp - &opx;
        let second = u.dot(&factor.solve(&u)) - s.x.dot(&(&self.cross.s_bb * &s.x));
        Ok(ObjectiveDerivatives { value, first, second })
    }
}

/// `Q(beta) = gbar^T (Omega + ridge I)^{-1} gbar / 2` with an absolute ridge.
pub fn objective(mc: &MomentComponents, beta: f64, ridge: f64) -> Result<f64> {
    let gbar = mc.gbar(beta);
    if gbar.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let omega = mc.omega(beta);
    let f = factor_spd(&omega, ridge).ok_or_else(|| Error::Factorization {
        ridge,
        condition: condition_estimate(&omega),
    })?;
    Ok((0.5 * gbar.dot(&f.solve(&gbar))).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Minimum {
    pub beta_hat: f64,
    pub q_min: f64,
    pub boundary_flag: bool,
    /// Ridge multiple of `trace(Omega)/r` that was applied (0 when none).
    pub ridge_scale: f64,
}

impl Minimum {
    pub fn ridge_used(&self) -> bool {
        self.ridge_scale > 0.0
    }
}

/// Grid search, golden-section refinement and a Newton polish, escalating the ridge
/// ladder until `Omega` factors at every evaluated point.
pub fn minimize(mc: &MomentComponents, bounds: (f64, f64), grid_points: usize, tol: f64) -> Result<Minimum> {
    minimize_with_ladder(mc, bounds, grid_points, tol, &RIDGE_LADDER)
}

fn minimize_with_ladder(
    mc: &MomentComponents,
    bounds: (f64, f64),
    grid_points: usize,
    tol: f64,
    ladder: &[f64],
) -> Result<Minimum> {
    let (lo, hi) = bounds;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Bounds { lo, hi });
    }
    if grid_points < 3 {
        return Err(Error::Config(format!("grid_points = {grid_points} must be at least 3")));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance {tol} must be positive")));
    }
    let mut last_err = None;
    for &scale in ladder {
        let obj = Objective::new(mc, scale);
        match minimize_objective(&obj, bounds, grid_points, tol) {
            Err(e @ Error::Factorization { .. }) => last_err = Some(e),
            other => return other,
        }
    }
    Err(last_err.unwrap_or(Error::ObjectiveNonFinite))
}

/// Minimization for a fixed regularization.
pub fn minimize_objective(obj: &Objective, (lo, hi): (f64, f64), grid_points: usize, tol: f64) -> Result<Minimum> {
    let step = (hi - lo) / (grid_points - 1) as f64;
    let grid: Vec<f64> = (0..grid_points)
        .map(|j| if j + 1 == grid_points { hi } else { lo + step * j as f64 })
        .collect();
    let values = grid.par_iter().map(|&b| obj.value(b)).collect::<Result<Vec<f64>>>()?;

    // strict comparison: ties go to the smallest beta
    let mut best: Option<usize> = None;
    for (j, v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| *v < values[b]) {
            best = Some(j);
        }
    }
    let j = best.ok_or(Error::ObjectiveNonFinite)?;

    let (mut a, mut b) = (grid[j.saturating_sub(1)], grid[(j + 1).min(grid_points - 1)]);
    let invphi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - invphi * (b - a);
    let mut d = a + invphi * (b - a);
    let mut fc = obj.value(c)?;
    let mut fd = obj.value(d)?;
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = obj.value(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = obj.value(d)?;
        }
    }
    let refined = 0.5 * (a + b);
    let f_refined = obj.value(refined)?;
    let (start, f_start) = if f_refined.is_finite() && f_refined <= values[j] {
        (refined, f_refined)
    } else {
        (grid[j], values[j])
    };
    let bracket = (grid[j.saturating_sub(1)], grid[(j + 1).min(grid_points - 1)]);
    let (beta_hat, q_min) = polish(obj, start, f_start, bracket);
    Ok(Minimum {
        beta_hat,
        q_min,
        boundary_flag: (beta_hat - lo).abs() <= tol || (hi - beta_hat).abs() <= tol,
        ridge_scale: obj.ridge_scale(),
    })
}

/// Newton steps on `Q'(beta) = 0` inside the bracket. Golden section pins a
/// flat minimum only to about `sqrt(eps)`; the root of the derivative is
/// resolved to rounding. A step is kept only if it does not raise `Q`.
fn polish(obj: &Objective, mut x: f64, mut fx: f64, (lo, hi): (f64, f64)) -> (f64, f64) {
    for _ in 0..50 {
        let Ok(der) = obj.derivatives(x) else { break };
        if !(der.second > 0.0) || der.first == 0.0 {
            break;
        }
        let next = x - der.first / der.second;
        if !(next >= lo && next <= hi) {
            break;
        }
        let Ok(f_next) = obj.value(next) else { break };
        if !(f_next <= fx + 1e-12 * fx.abs()) {
            break;
        }
        let moved = (next - x).abs();
        x = next;
        fx = f_next;
        if moved <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
            break;
        }
    }
    (x, fx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceEstimate {
    /// `H^{-1} D^T Omega^{-1} D H^{-1}`
    pub v_hat: f64,
    /// `sqrt(v_hat / n)`
    pub se: f64,
    /// Second derivative of the objective at the estimate.
    pub h_hat: f64,
    /// `false` when the objective is not locally convex at the estimate.
    pub reliable: bool,
}

/// Sandwich variance at `beta_hat` under the regularization `ridge_scale`.
pub fn variance(mc: &MomentComponents, beta_hat: f64, ridge_scale: f64) -> Result<VarianceEstimate> {
    let obj = Objective::new(mc, ridge_scale);
    let h_hat = obj.derivatives(beta_hat)?.second;
    let cross = &obj.cross;
    let omega = obj.omega(beta_hat);
    let factor = factor_spd(&omega, 0.0).ok_or_else(|| Error::Factorization {
        ridge: ridge_scale,
        condition: condition_estimate(&omega),
    })?;
    let gbar = cross.gbar(beta_hat);
    let x = factor.solve(&gbar);
    // D = E[G] - E[G g^T] Omega^{-1} gbar, with G_i = -b_i
    let e_bg = cross.s_ab.transpose() - &cross.s_bb * beta_hat;
    let d = -&cross.b_bar + e_bg * &x;
    let meat = d.dot(&factor.solve(&d));
    let v_hat = meat / (h_hat * h_hat);
    Ok(VarianceEstimate {
        v_hat,
        se: (v_hat / mc.n() as f64).sqrt(),
        h_hat,
        reliable: h_hat > 0.0 && v_hat.is_finite(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverIdTest {
    pub j_stat: f64,
    pub df: usize,
    pub p_value: f64,
}

/// `J = 2 n Q(beta_hat)` against `chi^2_{r-1}`; `None` when `r = 1`.
pub fn overid_test(mc: &MomentComponents, q_min: f64) -> Result<Option<OverIdTest>> {
    let r = mc.r();
    if r < 2 {
        return Ok(None);
    }
    let j_stat = 2.0 * mc.n() as f64 * q_min.max(0.0);
    Ok(Some(OverIdTest {
        j_stat,
        df: r - 1,
        p_value: chisq_sf(j_stat, r - 1)?.clamp(0.0, 1.0),
    }))
}

/// Point estimate, inference and the overidentification test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CueResult {
    pub beta_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    pub q_min: f64,
    pub j_stat: Option<f64>,
    pub j_df: Option<usize>,
    pub j_pvalue: Option<f64>,
    pub r: usize,
    pub n: usize,
    pub boundary_flag: bool,
    pub ridge_used: bool,
    pub ridge_scale: f64,
    pub h_hat: f64,
    pub variance_reliable: bool,
}

impl CueResult {
    pub fn covers(&self, beta: f64) -> bool {
        self.ci_low <= beta && beta <= self.ci_high
    }

    /// Rejection of the overidentifying restrictions at level `alpha`.
    pub fn rejects(&self, alpha: f64) -> bool {
        self.j_pvalue.is_some_and(|p| p < alpha)
    }
}

/// Two-sided normal critical value for a confidence level.
pub fn normal_critical(level: f64) -> Result<f64> {
    Ok(chisq_quantile(1.0 - level, 1)?.sqrt())
}

pub fn estimate(mc: &MomentComponents, opts: &CueOptions) -> Result<CueResult> {
    if !(opts.ci_level > 0.0 && opts.ci_level < 1.0) {
        return Err(Error::Config(format!("ci_level {} outside (0, 1)", opts.ci_level)));
    }
    let ladder = match opts.ridge {
        RidgePolicy::Ladder => &RIDGE_LADDER[..],
        RidgePolicy::Off => &RIDGE_LADDER[..1],
    };
    let min = minimize_with_ladder(mc, opts.bounds, opts.grid_points, opts.tol, ladder)?;
    let var = variance(mc, min.beta_hat, min.ridge_scale)?;
    let test = overid_test(mc, min.q_min)?;
    let half = normal_critical(opts.ci_level)? * var.se;
    Ok(CueResult {
        beta_hat: min.beta_hat,
        se: var.se,
        ci_low: min.beta_hat - half,
        ci_high: min.beta_hat + half,
        ci_level: opts.ci_level,
        q_min: min.q_min,
        j_stat: test.map(|t| t.j_stat),
        j_df: test.map(|t| t.df),
        j_pvalue: test.map(|t| t.p_value),
        r: mc.r(),
        n: mc.n(),
        boundary_flag: min.boundary_flag,
        ridge_used: min.ridge_used(),
        ridge_scale: min.ridge_scale,
        h_hat: var.h_hat,
        variance_reliable: var.reliable,
    })
}
