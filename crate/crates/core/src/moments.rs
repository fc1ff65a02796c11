//! Orthogonalized interaction moments.
//!
//! The stacked moment for observation `i` is linear in the causal parameter,
//! `g_i(beta) = a_i - beta * b_i`, where the order-k block of `a_i` is the
//! demeaned order-k interaction vector times the outcome residual `R_k^Y` and
//! `b_i` uses the exposure residual `R_k^D`. Everything the estimator needs is
//! therefore a polynomial in `beta` with coefficients computed once:
//!
//! ```text
//! gbar(beta)  = abar - beta * bbar
//! Omega(beta) = S_aa - beta * (S_ab + S_ab^T) + beta^2 * S_bb
//! ```

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::interactions::InteractionPlan;
use crate::nuisance::{residuals, NuisanceEstimate};

/// Rows per accumulation block. Fixed so that the reduction tree, and hence
/// every floating-point sum, does not depend on the number of threads.
const BLOCK_ROWS: usize = 512;

/// Averages of the moment components and their cross products.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossMoments {
    pub a_bar: DVector<f64>,
    pub b_bar: DVector<f64>,
    /// `E_n[a a^T]`
    pub s_aa: DMatrix<f64>,
    /// `E_n[a b^T]`
    pub s_ab: DMatrix<f64>,
    /// `E_n[b b^T]`
    pub s_bb: DMatrix<f64>,
}

impl CrossMoments {
    pub fn r(&self) -> usize {
        self.a_bar.len()
    }

    pub fn gbar(&self, beta: f64) -> DVector<f64> {
        &self.a_bar - &self.b_bar * beta
    }

    /// `S_1 = E_n[a b^T + b a^T]`
    pub fn s_sym(&self) -> DMatrix<f64> {
        &self.s_ab + self.s_ab.transpose()
    }

    pub fn omega(&self, beta: f64) -> DMatrix<f64> {
        let r = self.r();
        let mut out = DMatrix::zeros(r, r);
        for j in 0..r {
            for i in 0..r {
                out[(i, j)] = self.s_aa[(i, j)] - beta * (self.s_ab[(i, j)] + self.s_ab[(j, i)])
                    + beta * beta * self.s_bb[(i, j)];
            }
        }
        out
    }

    /// `dOmega/dbeta = -S_1 + 2 beta S_bb`
    pub fn omega_prime(&self, beta: f64) -> DMatrix<f64> {
        -self.s_sym() + &self.s_bb * (2.0 * beta)
    }

    fn add(mut self, other: &Self) -> Self {
        self.a_bar += &other.a_bar;
        self.b_bar += &other.b_bar;
        self.s_aa += &other.s_aa;
        self.s_ab += &other.s_ab;
        self.s_bb += &other.s_bb;
        self
    }

    fn scale(mut self, f: f64) -> Self {
        self.a_bar *= f;
        self.b_bar *= f;
        self.s_aa *= f;
        self.s_ab *= f;
        self.s_bb *= f;
        self
    }
}

/// Per-observation moment components: `n x r` matrices `A` and `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentComponents {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    cross: CrossMoments,
}

/// The empirical moment and its uncentered second moment at one `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSnapshot {
    pub beta: f64,
    pub gbar: DVector<f64>,
    pub omega: DMatrix<f64>,
}

impl MomentComponents {
    /// Wraps precomputed component matrices (rows are observations).
    pub fn from_matrices(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension {
                context: "moments: component shapes",
                expected: a.len(),
                got: b.len(),
            });
        }
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(Error::Dimension {
                context: "moments: component rows",
                expected: 1,
                got: 0,
            });
        }
        let cross = accumulate(&a, &b);
        Ok(Self { a, b, cross })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn r(&self) -> usize {
        self.a.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn cross(&self) -> &CrossMoments {
        &self.cross
    }

    /// `g_i(beta) = a_i - beta b_i`
    pub fn row_moment(&self, i: usize, beta: f64) -> DVector<f64> {
        (self.a.row(i) - self.b.row(i) * beta).transpose()
    }

    /// `G_i = dg_i/dbeta = -b_i`
    pub fn row_derivative(&self, i: usize) -> DVector<f64> {
        -self.b.row(i).transpose()
    }

    pub fn gbar(&self, beta: f64) -> DVector<f64> {
        self.cross.gbar(beta)
    }

    pub fn omega(&self, beta: f64) -> DMatrix<f64> {
        self.cross.omega(beta)
    }

    pub fn snapshot(&self, beta: f64) -> MomentSnapshot {
        MomentSnapshot {
            beta,
            gbar: self.gbar(beta),
            omega: self.omega(beta),
        }
    }
}

fn block_sums(a: &DMatrix<f64>, b: &DMatrix<f64>, start: usize, len: usize) -> CrossMoments {
    let ab = a.rows(start, len);
    let bb = b.rows(start, len);
    let r = a.ncols();
    let mut a_bar = DVector::zeros(r);
    let mut b_bar = DVector::zeros(r);
    for j in 0..r {
        a_bar[j] = ab.column(j).sum();
        b_bar[j] = bb.column(j).sum();
    }
    let at = ab.transpose();
    let bt = bb.transpose();
    let mut s_aa = &at * ab;
    let s_ab = &at * bb;
    let mut s_bb = &bt * bb;
    // exact symmetry for the pure squares
    symmetrize(&mut s_aa);
    symmetrize(&mut s_bb);
    CrossMoments {
        a_bar,
        b_bar,
        s_aa,
        s_ab,
        s_bb,
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let r = m.nrows();
    for j in 0..r {
        for i in j + 1..r {
            m[(j, i)] = m[(i, j)];
        }
    }
}

/// Pairwise reduction with a shape that depends only on `parts.len()`.
fn tree_sum(mut parts: Vec<CrossMoments>) -> CrossMoments {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(left) = it.next() {
            match it.next() {
                Some(right) => next.push(left.add(&right)),
                None => next.push(left),
            }
        }
        parts = next;
    }
    parts.pop().expect("at least one block")
}

fn accumulate(a: &DMatrix<f64>, b: &DMatrix<f64>) -> CrossMoments {
    let n = a.nrows();
    let blocks: Vec<(usize, usize)> = (0..n).step_by(BLOCK_ROWS).map(|s| (s, BLOCK_ROWS.min(n - s))).collect();
    let parts: Vec<CrossMoments> = blocks.par_iter().map(|&(s, len)| block_sums(a, b, s, len)).collect();
    tree_sum(parts).scale(1.0 / n as f64)
}

/// Assembles `A` and `B` from the data, the nuisance fits and the plan.
pub fn build_components(ds: &Dataset, nuis: &NuisanceEstimate, plan: &InteractionPlan) -> Result<MomentComponents> {
    if nuis.mu_hat.len() != ds.p() {
        return Err(Error::Dimension {
            context: "moments: mean vector",
            expected: ds.p(),
            got: nuis.mu_hat.len(),
        });
    }
    let res = (2..=plan.q())
        .map(|k| residuals(ds, nuis, plan, k))
        .collect::<Result<Vec<_>>>()?;
    let (n, r) = (ds.n(), plan.r());
    let mut a = DMatrix::zeros(n, r);
    let mut b = DMatrix::zeros(n, r);
    let mut zbar = vec![0.0; r];
    for i in 0..n {
        plan.eval_demeaned_into(ds.z_row(i), &nuis.mu_hat, &mut zbar);
        for (pair, k) in res.iter().zip(2..) {
            let (ry, rd) = (pair.r_y[i], pair.r_d[i]);
            for j in plan.order_range(k) {
                a[(i, j)] = zbar[j] * ry;
                b[(i, j)] = zbar[j] * rd;
            }
        }
    }
    MomentComponents::from_matrices(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::estimate;

    fn lcg_matrix(n: usize, r: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed;
        DMatrix::from_fn(n, r, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    fn fixture(n: usize, r: usize, seed: u64) -> MomentComponents {
        let a = lcg_matrix(n, r, seed);
        let b = &a * 0.3 + lcg_matrix(n, r, seed + 1);
        MomentComponents::from_matrices(a, b).unwrap()
    }

    #[test]
    fn gbar_matches_direct_average() {
        let mc = fixture(300, 4, 1);
        for beta in [0.0, 0.7, -2.5] {
            let mut direct = DVector::zeros(4);
            for i in 0..300 {
                direct += mc.row_moment(i, beta);
            }
            direct /= 300.0;
            assert!((mc.gbar(beta) - direct).amax() < 1e-12);
        }
        let col_means: Vec<f64> = (0..4).map(|j| mc.a().column(j).mean()).collect();
        assert!((mc.gbar(0.0) - DVector::from_vec(col_means)).amax() < 1e-14);
    }

    #[test]
    fn omega_matches_direct_accumulation() {
        let mc = fixture(500, 6, 3);
        for beta in [0.0, 1.3, -0.4] {
            let mut direct = DMatrix::zeros(6, 6);
            for i in 0..500 {
                let g = mc.row_moment(i, beta);
                direct += &g * g.transpose();
            }
            direct /= 500.0;
            let om = mc.omega(beta);
            let rel = (&om - &direct).amax() / direct.amax();
            assert!(rel < 1e-10, "rel {rel}");
            assert_eq!(om.clone(), om.transpose());
        }
    }

    #[test]
    fn single_row_is_outer_product() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]);
        let b = DMatrix::from_row_slice(1, 3, &[0.5, 0.0, 1.0]);
        let mc = MomentComponents::from_matrices(a, b).unwrap();
        let g = mc.row_moment(0, 2.0);
        assert_eq!(mc.omega(2.0), &g * g.transpose());
    }

    #[test]
    fn equal_components_vanish_at_one() {
        let a = lcg_matrix(50, 3, 9);
        let mc = MomentComponents::from_matrices(a.clone(), a).unwrap();
        assert!(mc.gbar(1.0).amax() < 1e-15);
        assert!(mc.omega(1.0).amax() < 1e-15);
    }

    #[test]
    fn omega_is_psd_and_quadratic_in_beta() {
        let mc = fixture(400, 5, 17);
        let v = DVector::from_vec(vec![0.3, -1.0, 0.2, 0.8, -0.5]);
        let quad = |beta: f64| (v.transpose() * mc.omega(beta) * &v)[0];
        let lin = |beta: f64| mc.gbar(beta).dot(&v);
        // Lagrange interpolation through 0, 1, 2 evaluated at 3.7
        let x = 3.7;
        let interp = |f: &dyn Fn(f64) -> f64| {
            f(0.0) * (x - 1.0) * (x - 2.0) / 2.0 - f(1.0) * x * (x - 2.0) + f(2.0) * x * (x - 1.0) / 2.0
        };
        let q_rel = (interp(&quad) - quad(x)).abs() / quad(x).abs();
        assert!(q_rel < 1e-10, "{q_rel}");
        let l_rel = (interp(&lin) - lin(x)).abs() / lin(x).abs().max(1e-300);
        assert!(l_rel < 1e-10);
        for beta in [-3.0, 0.0, 2.0] {
            let eig = nalgebra::SymmetricEigen::new(mc.omega(beta)).eigenvalues;
            assert!(eig.min() > -1e-12);
        }
    }

    #[test]
    fn blocked_reduction_is_stable_across_block_counts() {
        // more rows than one block so the reduction tree is exercised
        let mc = fixture(2 * BLOCK_ROWS + 37, 3, 5);
        let direct = mc.a().transpose() * mc.a() / mc.n() as f64;
        assert!((&mc.cross().s_aa - direct).amax() < 1e-13);
    }

    fn p2_dataset(y_of: impl Fn(&[f64], f64) -> f64) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..64).map(|i| vec![(i & 1) as f64, ((i >> 1) & 1) as f64]).collect();
        let d: Vec<f64> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| r[0] * r[1] + 0.1 * (i as f64).sin())
            .collect();
        let y: Vec<f64> = rows.iter().zip(&d).map(|(r, &d)| y_of(r, d)).collect();
        Dataset::from_rows(y, d, &rows).unwrap()
    }

    #[test]
    fn outcome_equal_to_exposure_gives_equal_components() {
        let ds = p2_dataset(|_, d| d);
        let plan = InteractionPlan::new(2, 2).unwrap();
        let nuis = estimate(&ds, &plan).unwrap();
        let mc = build_components(&ds, &nuis, &plan).unwrap();
        assert_eq!(mc.a(), mc.b());
        for i in 0..ds.n() {
            assert!(mc.row_moment(i, 1.0).amax() == 0.0);
        }
    }

    #[test]
    fn outcome_shift_leaves_components_unchanged() {
        let ds = p2_dataset(|r, d| 0.5 * d + r[0] - 0.3 * r[1]);
        let shifted = ds.with_outcome(ds.y().iter().map(|v| v + 7.5).collect()).unwrap();
        let plan = InteractionPlan::new(2, 2).unwrap();
        let a1 = build_components(&ds, &estimate(&ds, &plan).unwrap(), &plan).unwrap();
        let a2 = build_components(&shifted, &estimate(&shifted, &plan).unwrap(), &plan).unwrap();
        assert!((a1.a() - a2.a()).amax() < 1e-12);
    }
}
