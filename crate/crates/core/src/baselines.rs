//! Reference estimators: two-stage least squares on the main effects, the
//! single-pair interaction ratio, and a fixed-r two-step GMM weighted by
//! `Omega^{-1} M` together with its efficiency-bound estimate.
//!
//! The Two-Stage Hard Thresholding and adaptive Lasso comparators that are
//! common in this literature are not provided.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::interactions::InteractionPlan;
use crate::linalg::{factor_with_ladder, lstsq};
use crate::nuisance::estimate_means;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tsls,
    RatioPair,
    EfficientFixedR,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineResult {
    pub method: Method,
    pub beta_hat: f64,
    pub se: f64,
    pub extra: BTreeMap<String, f64>,
}

impl BaselineResult {
    pub fn covers(&self, beta: f64, crit: f64) -> bool {
        (self.beta_hat - beta).abs() <= crit * self.se
    }
}

/// `[1, z_i]` for every row.
fn main_effects_design(ds: &Dataset) -> DMatrix<f64> {
    DMatrix::from_fn(ds.n(), ds.p() + 1, |i, j| if j == 0 { 1.0 } else { ds.z_row(i)[j - 1] })
}

fn full_rank_lstsq(x: &DMatrix<f64>, rhs: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let ls = lstsq(x, rhs, context)?;
    if ls.rank < x.ncols() {
        return Err(Error::RankDeficient {
            context,
            rank: ls.rank,
            cols: x.ncols(),
        });
    }
    Ok(ls.coef)
}

/// TSLS of `y` on `(1, d)` instrumented by `(1, Z)`, HC0 standard error.
pub fn tsls(ds: &Dataset) -> Result<BaselineResult> {
    let n = ds.n();
    let zi = main_effects_design(ds);
    let d = DVector::from_column_slice(ds.d());
    let y = DVector::from_column_slice(ds.y());
    let first = full_rank_lstsq(
        &zi,
        &DMatrix::from_column_slice(n, 1, ds.d()),
        "baselines: tsls first stage",
    )?;
    let d_hat = &zi * first.column(0);

    let xh = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { d_hat[i] });
    let coef = full_rank_lstsq(
        &xh,
        &DMatrix::from_column_slice(n, 1, ds.y()),
        "baselines: tsls second stage",
    )?;
    let (c0, beta) = (coef[(0, 0)], coef[(1, 0)]);
    let resid = &y - d * beta - DVector::from_element(n, c0);

    let bread = (xh.transpose() * &xh).try_inverse().ok_or(Error::RankDeficient {
        context: "baselines: tsls",
        rank: 1,
        cols: 2,
    })?;
    let mut meat = DMatrix::zeros(2, 2);
    for i in 0..n {
        let x = DVector::from_vec(vec![1.0, d_hat[i]]);
        meat += &x * x.transpose() * (resid[i] * resid[i]);
    }
    let cov = &bread * meat * &bread;
    Ok(BaselineResult {
        method: Method::Tsls,
        beta_hat: beta,
        se: cov[(1, 1)].max(0.0).sqrt(),
        extra: BTreeMap::new(),
    })
}

/// Plug-in ratio from one pairwise interaction `(j, k)` with delta-method SE.
pub fn ratio_pair(ds: &Dataset, j: usize, k: usize) -> Result<BaselineResult> {
    if j == k || j >= ds.p() || k >= ds.p() {
        return Err(Error::Config(format!(
            "ratio_pair needs two distinct instruments below p = {}, got ({j}, {k})",
            ds.p()
        )));
    }
    let mu = estimate_means(ds);
    let n = ds.n() as f64;
    let w: Vec<f64> = (0..ds.n())
        .map(|i| {
            let z = ds.z_row(i);
            (z[j] - mu[j]) * (z[k] - mu[k])
        })
        .collect();
    let num = w.iter().zip(ds.y()).map(|(w, y)| w * y).sum::<f64>() / n;
    let den = w.iter().zip(ds.d()).map(|(w, d)| w * d).sum::<f64>() / n;
    let scale = w.iter().zip(ds.d()).map(|(w, d)| (w * d).abs()).sum::<f64>() / n;
    if den == 0.0 || den.abs() <= 1e-12 * scale {
        return Err(Error::WeakInteraction { denominator: den.abs() });
    }
    let beta = num / den;
    // influence function, including the terms from estimating both means
    let u: Vec<f64> = ds.y().iter().zip(ds.d()).map(|(y, d)| y - beta * d).collect();
    let (mut cj, mut ck) = (0.0, 0.0);
    for (i, u) in u.iter().enumerate() {
        let z = ds.z_row(i);
        cj += (z[k] - mu[k]) * u;
        ck += (z[j] - mu[j]) * u;
    }
    let (cj, ck) = (cj / n, ck / n);
    let ss: f64 = (0..ds.n())
        .map(|i| {
            let z = ds.z_row(i);
            let psi = (w[i] * u[i] - cj * (z[j] - mu[j]) - ck * (z[k] - mu[k])) / den;
            psi * psi
        })
        .sum();
    let mut extra = BTreeMap::new();
    extra.insert("denominator".into(), den);
    Ok(BaselineResult {
        method: Method::RatioPair,
        beta_hat: beta,
        se: ss.sqrt() / n,
        extra,
    })
}

/// Two-step GMM on the interaction moments with main effects profiled out,
/// weighted by `theta_opt = Omega^{-1} M`.
///
/// `beta_init` is the first-step value used to estimate the direct effects and
/// `Omega`; it defaults to [`tsls`]. The first step only affects efficiency,
/// not consistency, because the interaction moments are valid regardless.
pub fn efficient_fixed_r(ds: &Dataset, plan: &InteractionPlan, beta_init: Option<f64>) -> Result<BaselineResult> {
    if plan.p() != ds.p() {
        return Err(Error::Dimension {
            context: "baselines: plan instrument count",
            expected: ds.p(),
            got: plan.p(),
        });
    }
    let beta0 = match beta_init {
        Some(b) => b,
        None => tsls(ds)?.beta_hat,
    };
    let (n, r) = (ds.n(), plan.r());
    let nf = n as f64;
    let zi = main_effects_design(ds);
    let shifted: Vec<f64> = ds.y().iter().zip(ds.d()).map(|(y, d)| y - d * beta0).collect();
    let pi = full_rank_lstsq(
        &zi,
        &DMatrix::from_column_slice(n, 1, &shifted),
        "baselines: direct effects",
    )?;
    let fitted = &zi * pi.column(0);

    let mu = estimate_means(ds);
    let mut zbar = vec![0.0; r];
    let mut omega = DMatrix::zeros(r, r);
    let mut m_hat = DVector::zeros(r);
    let mut e_zy = DVector::zeros(r);
    for i in 0..n {
        plan.eval_demeaned_into(ds.z_row(i), &mu, &mut zbar);
        let zb = DVector::from_column_slice(&zbar);
        let resid = shifted[i] - fitted[i];
        omega.ger(resid * resid, &zb, &zb, 1.0);
        m_hat.axpy(-ds.d()[i], &zb, 1.0);
        e_zy.axpy(ds.y()[i] - fitted[i], &zb, 1.0);
    }
    omega /= nf;
    m_hat /= nf;
    e_zy /= nf;

    let mut extra = BTreeMap::new();
    extra.insert("beta_init".into(), beta0);
    let (theta, bound) = if omega.trace() > 0.0 {
        let (factor, level) = factor_with_ladder(&omega, 0)?;
        extra.insert("ridge_level".into(), level as f64);
        let theta = factor.solve(&m_hat);
        let info = m_hat.dot(&theta);
        (theta, 1.0 / (info * nf))
    } else {
        // every moment residual vanishes, so the weighting is immaterial
        extra.insert("identity_weighting".into(), 1.0);
        (m_hat.clone(), 0.0)
    };
    let den = -theta.dot(&m_hat);
    if den == 0.0 {
        return Err(Error::Identification(
            "interaction moments carry no exposure signal".into(),
        ));
    }
    let beta = theta.dot(&e_zy) / den;
    extra.insert("bound".into(), bound);
    Ok(BaselineResult {
        method: Method::EfficientFixedR,
        beta_hat: beta,
        se: bound.max(0.0).sqrt(),
        extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(p: usize, reps: usize) -> Vec<Vec<f64>> {
        (0..reps << p)
            .map(|i| (0..p).map(|j| ((i >> j) & 1) as f64).collect())
            .collect()
    }

    #[test]
    fn noiseless_single_instrument() {
        let rows = factorial(1, 10);
        let d: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let y: Vec<f64> = d.iter().map(|d| 2.0 * d).collect();
        let ds = Dataset::from_rows(y, d, &rows).unwrap();
        let res = tsls(&ds).unwrap();
        assert!((res.beta_hat - 2.0).abs() < 1e-12);
        assert!(res.se < 1e-10);
    }

    #[test]
    fn just_identified_tsls_is_wald_ratio() {
        let rows = factorial(1, 20);
        let d: Vec<f64> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| 0.7 * r[0] + (i as f64 * 0.9).sin())
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .zip(&d)
            .enumerate()
            .map(|(i, (_, d))| 1.3 * d + (i as f64 * 0.4).cos())
            .collect();
        let ds = Dataset::from_rows(y.clone(), d.clone(), &rows).unwrap();
        let z: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let cov = |a: &[f64], b: &[f64]| {
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>()
        };
        let wald = cov(&z, &y) / cov(&z, &d);
        assert!((tsls(&ds).unwrap().beta_hat - wald).abs() < 1e-10);
    }

    #[test]
    fn noiseless_interaction_ratio() {
        let rows = factorial(2, 7);
        let d: Vec<f64> = rows.iter().map(|r| r[0] * r[1]).collect();
        let y: Vec<f64> = d.iter().map(|d| 3.0 * d).collect();
        let ds = Dataset::from_rows(y, d, &rows).unwrap();
        let a = ratio_pair(&ds, 0, 1).unwrap();
        let b = ratio_pair(&ds, 1, 0).unwrap();
        assert!((a.beta_hat - 3.0).abs() < 1e-12);
        assert_eq!(a.beta_hat, b.beta_hat);
    }

    #[test]
    fn ratio_is_symmetric_in_pair() {
        let rows = factorial(3, 5);
        let d: Vec<f64> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| r[0] * r[2] + 0.3 * (i as f64).sin())
            .collect();
        let y: Vec<f64> = d.iter().enumerate().map(|(i, d)| -0.5 * d + (i as f64).cos()).collect();
        let ds = Dataset::from_rows(y, d, &rows).unwrap();
        let a = ratio_pair(&ds, 0, 2).unwrap();
        let b = ratio_pair(&ds, 2, 0).unwrap();
        assert!((a.beta_hat - b.beta_hat).abs() < 1e-14);
        assert!((a.se - b.se).abs() < 1e-14);
    }

    #[test]
    fn constant_exposure_is_a_weak_interaction() {
        let rows = factorial(2, 4);
        let ds = Dataset::from_rows((0..16).map(|i| i as f64).collect(), vec![2.0; 16], &rows).unwrap();
        assert!(matches!(ratio_pair(&ds, 0, 1), Err(Error::WeakInteraction { .. })));
        assert!(ratio_pair(&ds, 1, 1).is_err());
    }

    #[test]
    fn efficient_matches_ratio_without_noise() {
        let rows = factorial(2, 9);
        let d: Vec<f64> = rows.iter().map(|r| 0.4 * r[0] + r[0] * r[1] - 0.2 * r[1]).collect();
        let y: Vec<f64> = d.iter().map(|d| 1.5 * d).collect();
        let ds = Dataset::from_rows(y, d, &rows).unwrap();
        let plan = InteractionPlan::new(2, 2).unwrap();
        let eff = efficient_fixed_r(&ds, &plan, None).unwrap();
        let ratio = ratio_pair(&ds, 0, 1).unwrap();
        let t = tsls(&ds).unwrap();
        assert!((eff.beta_hat - ratio.beta_hat).abs() < 1e-8);
        assert!((eff.beta_hat - t.beta_hat).abs() < 1e-8);
    }

    #[test]
    fn bound_is_positive_with_signal() {
        let rows = factorial(3, 20);
        let d: Vec<f64> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| r[0] * r[1] + r[1] * r[2] + 0.5 * (i as f64 * 1.7).sin())
            .collect();
        let y: Vec<f64> = d
            .iter()
            .enumerate()
            .map(|(i, d)| 0.3 * d + (i as f64 * 0.3).cos())
            .collect();
        let ds = Dataset::from_rows(y, d, &rows).unwrap();
        let plan = InteractionPlan::new(3, 2).unwrap();
        let eff = efficient_fixed_r(&ds, &plan, Some(0.0)).unwrap();
        assert!(eff.extra["bound"] > 0.0);
        assert!(eff.se > 0.0);
    }
}
