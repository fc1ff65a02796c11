//! Interaction-strength diagnostic: a heteroskedasticity-robust F statistic
//! for the demeaned interactions in a regression of the exposure, after its
//! linear dependence on the instruments has been partialled out.
//!
//! The statistic is the HC0 Wald statistic for the `r` interaction
//! coefficients divided by `r`. It is descriptive; no reference distribution
//! is attached.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::interactions::InteractionPlan;
use crate::linalg::lstsq;
use crate::nuisance::estimate_means;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FStatReport {
    pub f_value: f64,
    pub num_restrictions: usize,
    pub n_effective: usize,
}

pub fn f_stat(ds: &Dataset, plan: &InteractionPlan) -> Result<FStatReport> {
    let (n, p, r) = (ds.n(), ds.p(), plan.r());
    if plan.p() != p {
        return Err(Error::Dimension {
            context: "diagnostics: plan instrument count",
            expected: p,
            got: plan.p(),
        });
    }
    if n <= r + 1 {
        return Err(Error::DesignTooWide { cols: r + 2, n });
    }

    // partial out (1, Z)
    let zi = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { ds.z_row(i)[j - 1] });
    let d = DMatrix::from_column_slice(n, 1, ds.d());
    let first = lstsq(&zi, &d, "diagnostics: partialling")?;
    if first.rank < p + 1 {
        return Err(Error::RankDeficient {
            context: "diagnostics: partialling",
            rank: first.rank,
            cols: p + 1,
        });
    }
    let d_res: DVector<f64> = d.column(0) - &zi * first.coef.column(0);

    let report = |f_value| FStatReport {
        f_value,
        num_restrictions: r,
        n_effective: n,
    };
    let d_mean = ds.d().iter().sum::<f64>() / n as f64;
    let d_spread = ds.d().iter().fold(0.0f64, |m, v| m.max((v - d_mean).abs()));
    if d_res.amax() <= 1e-11 * d_spread.max(f64::MIN_POSITIVE) {
        return Ok(report(0.0));
    }

    let mu = estimate_means(ds);
    let mut x = DMatrix::zeros(n, r + 1);
    let mut zbar = vec![0.0; r];
    for i in 0..n {
        plan.eval_demeaned_into(ds.z_row(i), &mu, &mut zbar);
        x[(i, 0)] = 1.0;
        for (j, v) in zbar.iter().enumerate() {
            x[(i, j + 1)] = *v;
        }
    }
    let fit = lstsq(
        &x,
        &DMatrix::from_column_slice(n, 1, d_res.as_slice()),
        "diagnostics: interaction regression",
    )?;
    if fit.rank < r + 1 {
        return Err(Error::RankDeficient {
            context: "diagnostics: interaction regression",
            rank: fit.rank,
            cols: r + 1,
        });
    }
    let gamma = fit.coef.column(0).into_owned();
    let e = &d_res - &x * &gamma;

    let xtx = x.transpose() * &x;
    let bread = Cholesky::new(xtx)
        .ok_or(Error::RankDeficient {
            context: "diagnostics: interaction regression",
            rank: 0,
            cols: r + 1,
        })?
        .inverse();
    let mut xe = x.clone();
    for (i, ei) in e.iter().enumerate() {
        xe.row_mut(i).scale_mut(*ei);
    }
    let meat = xe.transpose() * &xe;
    let cov = &bread * meat * &bread;

    let v_int = cov.view((1, 1), (r, r)).into_owned();
    let g_int = gamma.rows(1, r).into_owned();
    let wald = match Cholesky::new(v_int) {
        Some(ch) => g_int.dot(&ch.solve(&g_int)),
        None => {
            return Err(Error::RankDeficient {
                context: "diagnostics: robust covariance",
                rank: 0,
                cols: r,
            })
        }
    };
    Ok(report((wald / r as f64).max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, p: usize) -> Vec<Vec<f64>> {
        let mut s = 12345u64;
        (0..n)
            .map(|_| {
                (0..p)
                    .map(|_| {
                        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        ((s >> 33) & 1) as f64
                    })
                    .collect()
            })
            .collect()
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn exactly_linear_exposure_gives_zero() {
        let z = rows(300, 4);
        let d: Vec<f64> = z.iter().map(|r| 1.0 + r[0] - 2.0 * r[3]).collect();
        let ds = Dataset::from_rows(
            vec![0.0; 300].iter().enumerate().map(|(i, _)| i as f64).collect(),
            d,
            &z,
        )
        .unwrap();
        let plan = InteractionPlan::new(4, 2).unwrap();
        assert_eq!(f_stat(&ds, &plan).unwrap().f_value, 0.0);
    }

    #[test]
    fn invariant_to_linear_terms_and_scale() {
        let z = rows(400, 4);
        let e = noise(400, 77);
        let d: Vec<f64> = z.iter().zip(&e).map(|(r, e)| 0.6 * r[0] * r[1] + e).collect();
        let y: Vec<f64> = (0..400).map(|i| i as f64).collect();
        let ds = Dataset::from_rows(y.clone(), d.clone(), &z).unwrap();
        let plan = InteractionPlan::new(4, 2).unwrap();
        let base = f_stat(&ds, &plan).unwrap();
        assert!(base.f_value > 0.0);
        assert_eq!(base.num_restrictions, 6);

        let shifted: Vec<f64> = d.iter().zip(&z).map(|(d, r)| d + 3.0 * r[2] - r[1] + 5.0).collect();
        let f2 = f_stat(&ds.with_exposure(shifted).unwrap(), &plan).unwrap();
        assert!((f2.f_value - base.f_value).abs() < 1e-8 * base.f_value.max(1.0));

        let scaled: Vec<f64> = d.iter().map(|d| -4.0 * d).collect();
        let f3 = f_stat(&ds.with_exposure(scaled).unwrap(), &plan).unwrap();
        assert!((f3.f_value - base.f_value).abs() < 1e-8 * base.f_value.max(1.0));
    }

    #[test]
    fn too_few_rows() {
        let z = vec![
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let ds = Dataset::from_rows(vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 0.1, 0.2, 0.9], &z).unwrap();
        let plan = InteractionPlan::new(3, 2).unwrap();
        assert!(f_stat(&ds, &plan).is_err());
    }
}
