//! First-stage nuisance fits: instrument means and, for every order `k`, the
//! least-squares projections of the outcome and exposure onto the lower-order
//! basis `W_{k-1}(Z)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::interactions::InteractionPlan;
use crate::linalg::lstsq;

/// Projection coefficients for one order `k`, fitted on `W_{k-1}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderFit {
    /// The moment order `k` these coefficients serve.
    pub order: usize,
    /// Outcome projection onto `W_{k-1}`.
    pub theta: Vec<f64>,
    /// Exposure projection onto `W_{k-1}`.
    pub xi: Vec<f64>,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuisanceEstimate {
    pub mu_hat: Vec<f64>,
    /// One entry per order `k = 2..q`, ascending.
    pub fits: Vec<OrderFit>,
}

impl NuisanceEstimate {
    pub fn fit(&self, k: usize) -> Option<&OrderFit> {
        self.fits.iter().find(|f| f.order == k)
    }
}

/// Per-order residuals `R_k^Y`, `R_k^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPair {
    pub order: usize,
    pub r_y: Vec<f64>,
    pub r_d: Vec<f64>,
}

pub fn estimate_means(ds: &Dataset) -> Vec<f64> {
    let n = ds.n() as f64;
    let mut mu = vec![0.0; ds.p()];
    for i in 0..ds.n() {
        for (m, z) in mu.iter_mut().zip(ds.z_row(i)) {
            *m += z;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    mu
}

/// The `n x dim(W_{k-1})` design whose rows are `W_{k-1}(z_i)`.
pub fn basis_design(ds: &Dataset, plan: &InteractionPlan, k: usize) -> Result<DMatrix<f64>> {
    check_plan(ds, plan)?;
    if !(2..=plan.q()).contains(&k) {
        return Err(Error::Plan(format!("basis order k = {k} outside 2..={}", plan.q())));
    }
    let m = plan.basis_dim(k);
    let mut x = DMatrix::zeros(ds.n(), m);
    let mut row = vec![0.0; m];
    for i in 0..ds.n() {
        plan.eval_basis_into(ds.z_row(i), k, &mut row);
        for (j, v) in row.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    Ok(x)
}

fn check_plan(ds: &Dataset, plan: &InteractionPlan) -> Result<()> {
    if plan.p() != ds.p() {
        return Err(Error::Dimension {
            context: "nuisance: plan instrument count",
            expected: ds.p(),
            got: plan.p(),
        });
    }
    Ok(())
}

/// Regresses `y` and `d` on `W_{k-1}(Z)`; returns `(theta_{k-1}, xi_{k-1})`.
pub fn project(ds: &Dataset, plan: &InteractionPlan, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let fit = project_order(ds, plan, k)?;
    Ok((fit.theta, fit.xi))
}

fn project_order(ds: &Dataset, plan: &InteractionPlan, k: usize) -> Result<OrderFit> {
    let x = basis_design(ds, plan, k)?;
    if ds.n() < x.ncols() {
        return Err(Error::DesignTooWide {
            cols: x.ncols(),
            n: ds.n(),
        });
    }
    let mut rhs = DMatrix::zeros(ds.n(), 2);
    rhs.set_column(0, &DVector::from_column_slice(ds.y()));
    rhs.set_column(1, &DVector::from_column_slice(ds.d()));
    let ls = lstsq(&x, &rhs, "nuisance")?;
    Ok(OrderFit {
        order: k,
        theta: ls.coef.column(0).iter().copied().collect(),
        xi: ls.coef.column(1).iter().copied().collect(),
        rank: ls.rank,
    })
}

/// Means plus one independent projection per order `k = 2..q`.
pub fn estimate(ds: &Dataset, plan: &InteractionPlan) -> Result<NuisanceEstimate> {
    check_plan(ds, plan)?;
    let fits = (2..=plan.q())
        .into_par_iter()
        .map(|k| project_order(ds, plan, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(NuisanceEstimate {
        mu_hat: estimate_means(ds),
        fits,
    })
}

pub fn residuals(ds: &Dataset, nuis: &NuisanceEstimate, plan: &InteractionPlan, k: usize) -> Result<ResidualPair> {
    check_plan(ds, plan)?;
    let fit = nuis
        .fit(k)
        .ok_or_else(|| Error::Plan(format!("nuisance estimate has no coefficients for order {k}")))?;
    let m = plan.basis_dim(k);
    if fit.theta.len() != m || fit.xi.len() != m {
        return Err(Error::Dimension {
            context: "nuisance: coefficient length",
            expected: m,
            got: fit.theta.len(),
        });
    }
    let mut w = vec![0.0; m];
    let mut r_y = Vec::with_capacity(ds.n());
    let mut r_d = Vec::with_capacity(ds.n());
    for i in 0..ds.n() {
        plan.eval_basis_into(ds.z_row(i), k, &mut w);
        let fy: f64 = w.iter().zip(&fit.theta).map(|(a, b)| a * b).sum();
        let fd: f64 = w.iter().zip(&fit.xi).map(|(a, b)| a * b).sum();
        r_y.push(ds.y()[i] - fy);
        r_d.push(ds.d()[i] - fd);
    }
    Ok(ResidualPair { order: k, r_y, r_d })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_rows(n: usize, p: usize, salt: u64) -> Vec<Vec<f64>> {
        // splitmix bits; the first two rows are all-zero and all-one so every column varies
        let mut state = salt;
        (0..n)
            .map(|i| {
                (0..p)
                    .map(|_| {
                        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
                        let mut x = state;
                        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
                        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
                        x ^= x >> 31;
                        match i {
                            0 => 0.0,
                            1 => 1.0,
                            _ => (x >> 63) as f64,
                        }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn exact_linear_fit() {
        let rows = binary_rows(30, 2, 1);
        let y: Vec<f64> = rows.iter().map(|r| 2.0 + 3.0 * r[0]).collect();
        let d: Vec<f64> = rows.iter().map(|r| 1.0 - r[1]).collect();
        let ds = Dataset::from_rows(y, d, &rows).unwrap();
        let plan = InteractionPlan::new(2, 2).unwrap();
        let (theta, _) = project(&ds, &plan, 2).unwrap();
        assert!((theta[0] - 2.0).abs() < 1e-12);
        assert!((theta[1] - 3.0).abs() < 1e-12);
        assert!(theta[2].abs() < 1e-12);
        let nuis = estimate(&ds, &plan).unwrap();
        let res = residuals(&ds, &nuis, &plan, 2).unwrap();
        assert!(res.r_y.iter().chain(&res.r_d).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn constant_outcome_lands_on_intercept() {
        let rows = binary_rows(25, 3, 7);
        let ds = Dataset::from_rows(vec![4.5; 25], (0..25).map(|i| i as f64).collect(), &rows).unwrap();
        let plan = InteractionPlan::new(3, 2).unwrap();
        let (theta, _) = project(&ds, &plan, 2).unwrap();
        assert!((theta[0] - 4.5).abs() < 1e-12);
        assert!(theta[1..].iter().all(|t| t.abs() < 1e-12));
    }

    #[test]
    fn zero_coefficients_leave_data_untouched() {
        let rows = binary_rows(10, 2, 3);
        let y: Vec<f64> = (0..10).map(|i| i as f64 * 0.5).collect();
        let ds = Dataset::from_rows(y.clone(), vec![1.0; 10], &rows).unwrap();
        let plan = InteractionPlan::new(2, 2).unwrap();
        let nuis = NuisanceEstimate {
            mu_hat: estimate_means(&ds),
            fits: vec![OrderFit {
                order: 2,
                theta: vec![0.0; 3],
                xi: vec![0.0; 3],
                rank: 3,
            }],
        };
        assert_eq!(residuals(&ds, &nuis, &plan, 2).unwrap().r_y, y);
    }

    #[test]
    fn product_outcome_matches_normal_equations() {
        let rows = binary_rows(20, 2, 11);
        let y: Vec<f64> = rows.iter().map(|r| r[0] * r[1]).collect();
        let d: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let ds = Dataset::from_rows(y.clone(), d, &rows).unwrap();
        let plan = InteractionPlan::new(2, 2).unwrap();
        let nuis = estimate(&ds, &plan).unwrap();
        let res = residuals(&ds, &nuis, &plan, 2).unwrap();

        // oracle: solve X'X b = X'y directly
        let x = DMatrix::from_fn(20, 3, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
        let yv = DVector::from_vec(y);
        let b = (x.transpose() * &x).lu().solve(&(x.transpose() * &yv)).unwrap();
        let oracle = &yv - &x * b;
        assert!(oracle.amax() > 1e-3, "product must not be in the span");
        for (r, o) in res.r_y.iter().zip(oracle.iter()) {
            assert!((r - o).abs() < 1e-10);
        }
    }

    #[test]
    fn residuals_are_orthogonal_to_basis() {
        let rows = binary_rows(200, 4, 5);
        let y: Vec<f64> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| r[0] * r[1] * r[2] + (i as f64 * 0.3).sin())
            .collect();
        let d: Vec<f64> = rows.iter().enumerate().map(|(i, r)| r[3] - (i as f64).cos()).collect();
        let ds = Dataset::from_rows(y, d, &rows).unwrap();
        let plan = InteractionPlan::new(4, 3).unwrap();
        let nuis = estimate(&ds, &plan).unwrap();
        for k in 2..=3 {
            let res = residuals(&ds, &nuis, &plan, k).unwrap();
            let w = basis_design(&ds, &plan, k).unwrap();
            let scale = 200.0 * ds.y().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for m in 0..w.ncols() {
                let dot: f64 = w.column(m).iter().zip(&res.r_y).map(|(a, b)| a * b).sum();
                assert!(dot.abs() <= 1e-8 * scale, "k={k} m={m} dot={dot}");
            }
        }
    }

    #[test]
    fn outcome_shift_moves_only_intercept() {
        let rows = binary_rows(60, 3, 9);
        let y: Vec<f64> = rows.iter().map(|r| r[0] * r[2] - 0.4 * r[1]).collect();
        let d: Vec<f64> = (0..60).map(|i| 0.5 * i as f64).collect();
        let ds = Dataset::from_rows(y.clone(), d, &rows).unwrap();
        let shifted = ds.with_outcome(y.iter().map(|v| v + 10.0).collect()).unwrap();
        let plan = InteractionPlan::new(3, 3).unwrap();
        let a = estimate(&ds, &plan).unwrap();
        let b = estimate(&shifted, &plan).unwrap();
        for (fa, fb) in a.fits.iter().zip(&b.fits) {
            assert!((fb.theta[0] - fa.theta[0] - 10.0).abs() < 1e-10);
            for (x, y) in fa.theta[1..].iter().zip(&fb.theta[1..]) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        let ra = residuals(&ds, &a, &plan, 3).unwrap();
        let rb = residuals(&shifted, &b, &plan, 3).unwrap();
        for (x, y) in ra.r_y.iter().zip(&rb.r_y) {
            assert!((x - y).abs() <= 1e-12 * 10.0);
        }
    }

    #[test]
    fn too_wide_design_reports_required_rows() {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..4).map(|j| ((i >> (j % 3)) & 1) as f64).collect())
            .collect();
        let ds = Dataset::from_rows((0..6).map(|i| i as f64).collect(), vec![1.0; 6], &rows).unwrap();
        let plan = InteractionPlan::new(4, 3).unwrap();
        let err = estimate(&ds, &plan).unwrap_err();
        assert!(matches!(err, Error::DesignTooWide { cols: 11, n: 6 }), "{err}");
    }

    #[test]
    fn missing_order_is_an_error() {
        let rows = binary_rows(10, 3, 4);
        let ds = Dataset::from_rows((0..10).map(|i| i as f64).collect(), vec![1.0; 10], &rows).unwrap();
        let plan = InteractionPlan::new(3, 3).unwrap();
        let nuis = NuisanceEstimate {
            mu_hat: estimate_means(&ds),
            fits: vec![],
        };
        assert!(residuals(&ds, &nuis, &plan, 3).is_err());
    }
}
