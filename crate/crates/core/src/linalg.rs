//! Dense least squares and symmetric positive-definite solves.
//!
//! Least squares uses Householder QR with column pivoting on column norms.
//! When the numerical rank falls short of the column count the trailing
//! columns are folded back in through a second QR of the leading trapezoid,
//! which yields the minimum-norm solution.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Solution of `min ||X b - Y||` for one or more right-hand sides.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    /// `m x k` coefficients, one column per right-hand side.
    pub coef: DMatrix<f64>,
    /// Numerical rank of the design.
    pub rank: usize,
}

impl LeastSquares {
    pub fn column(&self, j: usize) -> DVector<f64> {
        self.coef.column(j).into_owned()
    }
}

/// Minimum-norm least squares of every column of `rhs` on `design`.
///
/// `context` prefixes error messages. Requires `design.nrows() >= design.ncols()`.
pub fn lstsq(design: &DMatrix<f64>, rhs: &DMatrix<f64>, context: &'static str) -> Result<LeastSquares> {
    let (n, m) = design.shape();
    if rhs.nrows() != n {
        return Err(Error::Dimension {
            context,
            expected: n,
            got: rhs.nrows(),
        });
    }
    if n < m {
        return Err(Error::DesignTooWide { cols: m, n });
    }
    if m == 0 {
        return Err(Error::RankZero { context });
    }

    let mut a = design.clone();
    let mut b = rhs.clone();
    let mut perm: Vec<usize> = (0..m).collect();
    let mut diag = vec![0.0; m];
    let mut v = vec![0.0; n];

    for i in 0..m {
        // pivot on the largest remaining column norm
        let mut best = i;
        let mut best_norm = -1.0;
        for j in i..m {
            let s: f64 = a.column(j).rows_range(i..).norm_squared();
            if s > best_norm {
                best_norm = s;
                best = j;
            }
        }
        if best != i {
            a.swap_columns(i, best);
            perm.swap(i, best);
        }

        let norm = best_norm.sqrt();
        if norm == 0.0 {
            diag[i] = 0.0;
            continue;
        }
        let x0 = a[(i, i)];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let len = n - i;
        for t in 0..len {
            v[t] = a[(i + t, i)];
        }
        v[0] -= alpha;
        let vnorm2: f64 = v[..len].iter().map(|x| x * x).sum();
        diag[i] = alpha;
        a[(i, i)] = alpha;
        for t in 1..len {
            a[(i + t, i)] = 0.0;
        }
        if vnorm2 == 0.0 {
            continue;
        }
        let scale = 2.0 / vnorm2;
        for j in i + 1..m {
            let mut col = a.column_mut(j);
            let dot: f64 = (0..len).map(|t| v[t] * col[i + t]).sum();
            let f = scale * dot;
            for t in 0..len {
                col[i + t] -= f * v[t];
            }
        }
        for j in 0..b.ncols() {
            let mut col = b.column_mut(j);
            let dot: f64 = (0..len).map(|t| v[t] * col[i + t]).sum();
            let f = scale * dot;
            for t in 0..len {
                col[i + t] -= f * v[t];
            }
        }
    }

    let lead = diag[0].abs();
    if lead == 0.0 || !lead.is_finite() {
        return Err(Error::RankZero { context });
    }
    let tol = f64::EPSILON * n.max(m) as f64 * lead;
    let rank = diag.iter().take_while(|d| d.abs() > tol).count();

    let k = b.ncols();
    let c = b.rows(0, rank).into_owned();
    let r_lead = a.view((0, 0), (rank, m)).upper_triangle();

    let x_perm = if rank == m {
        let r = r_lead.columns(0, m).into_owned();
        r.solve_upper_triangular(&c).ok_or(Error::RankZero { context })?
    } else {
        // T = [R11 R12] (rank x m). With T^T = Q2 L, the minimum-norm solution
        // of T x = c is x = Q2 L^{-T} c.
        let qr = r_lead.transpose().qr();
        let q2 = qr.q();
        let l = qr.r();
        let w = l
            .transpose()
            .solve_lower_triangular(&c)
            .ok_or(Error::RankZero { context })?;
        q2 * w
    };

    let mut coef = DMatrix::zeros(m, k);
    for (j, &orig) in perm.iter().enumerate() {
        coef.row_mut(orig).copy_from(&x_perm.row(j));
    }
    Ok(LeastSquares { coef, rank })
}

/// Cholesky factor of `M + ridge I` for symmetric positive semidefinite `M`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    pub ridge: f64,
}

impl SpdFactor {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }
}

/// Ridge levels tried in order, as multiples of `trace(M) / dim`.
pub const RIDGE_LADDER: [f64; 8] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Factors `m + ridge I` with the given absolute ridge.
pub fn factor_spd(m: &DMatrix<f64>, ridge: f64) -> Option<SpdFactor> {
    let mut shifted = m.clone();
    if ridge > 0.0 {
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += ridge;
        }
    }
    if shifted.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(shifted).map(|chol| SpdFactor { chol, ridge })
}

/// Absolute ridge for rung `level` of [`RIDGE_LADDER`].
pub fn ridge_at(m: &DMatrix<f64>, level: usize) -> f64 {
    let dim = m.nrows().max(1) as f64;
    RIDGE_LADDER[level] * m.trace().abs() / dim
}

/// Climbs the ridge ladder from `start` until `m + ridge I` factors.
/// Returns the factor and the rung used.
pub fn factor_with_ladder(m: &DMatrix<f64>, start: usize) -> Result<(SpdFactor, usize)> {
    for level in start..RIDGE_LADDER.len() {
        if let Some(f) = factor_spd(m, ridge_at(m, level)) {
            return Ok((f, level));
        }
    }
    Err(Error::Factorization {
        ridge: ridge_at(m, RIDGE_LADDER.len() - 1),
        condition: condition_estimate(m),
    })
}

/// Ratio of extreme absolute eigenvalues (infinite when singular).
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    if m.iter().any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    let eig = SymmetricEigen::new(m.clone());
    let (lo, hi) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| {
        (lo.min(e.abs()), hi.max(e.abs()))
    });
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}
