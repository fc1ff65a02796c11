//! Exact population quantities for small `p`, computed by enumerating every
//! binary instrument configuration.
//!
//! The population model is
//!
//! ```text
//! E[D | z] = sum_j theta_j z_j + sum_S alpha_S prod_{j in S} z_j
//! E[Y | z] = beta E[D | z] + sum_j pi_j z_j + sum_S phi_S prod_{j in S} z_j
//! ```
//!
//! with mean-zero errors independent of `Z`. The instruments follow either
//! independent Bernoulli laws or an arbitrary probability table, which is how
//! dependent-instrument counterexamples are expressed.
//!
//! ```
//! use magic_iv::oracle::{population_beta, PopulationDgp};
//!
//! let dgp = PopulationDgp::independent(vec![0.5, 0.5], 0.5)
//!     .with_exposure_term(vec![0, 1], 1.0)
//!     .with_pi(vec![0.3, -0.8]);
//! assert!((population_beta(&dgp, 2).unwrap() - 0.5).abs() < 1e-12);
//! ```

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interactions::{InteractionPlan, SubsetIndex};
use crate::linalg::lstsq;

/// Largest `p` the enumeration accepts (`2^12 = 4096` lattice points).
pub const MAX_ORACLE_P: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum InstrumentLaw {
    /// Independent Bernoulli instruments with these success probabilities.
    Independent(Vec<f64>),
    /// Joint probabilities indexed by configuration; bit `j` of the index is `z_j`.
    Table(Vec<f64>),
}

/// A product term `coef * prod_{j in indices} z_j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Term {
    pub indices: Vec<usize>,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationDgp {
    pub p: usize,
    pub law: InstrumentLaw,
    pub beta_true: f64,
    /// Direct instrument effects on the outcome.
    pub pi: Vec<f64>,
    /// Main instrument effects on the exposure.
    pub theta: Vec<f64>,
    /// Exposure interactions. Pairs reproduce the simulation design; higher
    /// orders are available for testing deeper plans.
    pub alpha: Vec<Term>,
    /// Outcome interactions; any nonzero entry breaks the additive linear
    /// outcome model.
    pub phi: Vec<Term>,
}

impl PopulationDgp {
    /// Independent instruments with zero effects everywhere except `beta`.
    pub fn independent(mu: Vec<f64>, beta_true: f64) -> Self {
        let p = mu.len();
        Self {
            p,
            law: InstrumentLaw::Independent(mu),
            beta_true,
            pi: vec![0.0; p],
            theta: vec![0.0; p],
            alpha: Vec::new(),
            phi: Vec::new(),
        }
    }

    /// Instruments drawn from an explicit joint table of length `2^p`.
    pub fn with_table(p: usize, pmf: Vec<f64>, beta_true: f64) -> Self {
        Self {
            p,
            law: InstrumentLaw::Table(pmf),
            beta_true,
            pi: vec![0.0; p],
            theta: vec![0.0; p],
            alpha: Vec::new(),
            phi: Vec::new(),
        }
    }

    pub fn with_pi(mut self, pi: Vec<f64>) -> Self {
        self.pi = pi;
        self
    }

    pub fn with_theta(mut self, theta: Vec<f64>) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_exposure_term(mut self, indices: Vec<usize>, coef: f64) -> Self {
        self.alpha.push(Term { indices, coef });
        self
    }

    pub fn with_outcome_term(mut self, indices: Vec<usize>, coef: f64) -> Self {
        self.phi.push(Term { indices, coef });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.p > MAX_ORACLE_P {
            return Err(Error::Guard {
                p: self.p,
                max: MAX_ORACLE_P,
            });
        }
        if self.p == 0 {
            return Err(Error::InvalidData("oracle needs at least one instrument".into()));
        }
        for (name, v) in [("pi", &self.pi), ("theta", &self.theta)] {
            if v.len() != self.p {
                return Err(Error::InvalidData(format!(
                    "{name} has length {} but p = {}",
                    v.len(),
                    self.p
                )));
            }
        }
        for t in self.alpha.iter().chain(&self.phi) {
            SubsetIndex::new(t.indices.clone(), self.p)?;
        }
        match &self.law {
            InstrumentLaw::Independent(mu) => {
                if mu.len() != self.p {
                    return Err(Error::InvalidData(format!(
                        "mu has length {} but p = {}",
                        mu.len(),
                        self.p
                    )));
                }
                if let Some(m) = mu.iter().find(|m| !(**m > 0.0 && **m < 1.0)) {
                    return Err(Error::InvalidData(format!("probability {m} outside (0, 1)")));
                }
            }
            InstrumentLaw::Table(pmf) => {
                if pmf.len() != 1 << self.p {
                    return Err(Error::InvalidData(format!(
                        "probability table has {} entries, expected {}",
                        pmf.len(),
                        1usize << self.p
                    )));
                }
                if pmf.iter().any(|w| !(*w >= 0.0)) {
                    return Err(Error::InvalidData("negative or NaN probability".into()));
                }
                let total: f64 = pmf.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidData(format!("probability table sums to {total}")));
                }
            }
        }
        Ok(())
    }

    /// The enumerated lattice as `(z, Pr(z))`, in configuration-index order.
    pub fn lattice(&self) -> Result<Vec<(Vec<f64>, f64)>> {
        self.validate()?;
        let p = self.p;
        Ok((0..1usize << p)
            .map(|idx| {
                let z: Vec<f64> = (0..p).map(|j| ((idx >> j) & 1) as f64).collect();
                let w = match &self.law {
                    InstrumentLaw::Independent(mu) => z
                        .iter()
                        .zip(mu)
                        .map(|(z, m)| if *z == 1.0 { *m } else { 1.0 - m })
                        .product(),
                    InstrumentLaw::Table(pmf) => pmf[idx],
                };
                (z, w)
            })
            .collect())
    }

    /// Marginal means `E[Z_j]`.
    pub fn mu(&self) -> Result<Vec<f64>> {
        if let InstrumentLaw::Independent(mu) = &self.law {
            self.validate()?;
            return Ok(mu.clone());
        }
        let mut mu = vec![0.0; self.p];
        for (z, w) in self.lattice()? {
            for (m, z) in mu.iter_mut().zip(&z) {
                *m += w * z;
            }
        }
        Ok(mu)
    }

    pub fn exposure_mean(&self, z: &[f64]) -> f64 {
        linear(&self.theta, z) + terms(&self.alpha, z)
    }

    pub fn outcome_mean(&self, z: &[f64]) -> f64 {
        self.beta_true * self.exposure_mean(z) + linear(&self.pi, z) + terms(&self.phi, z)
    }
}

fn linear(coef: &[f64], z: &[f64]) -> f64 {
    coef.iter().zip(z).map(|(c, z)| c * z).sum()
}

fn terms(ts: &[Term], z: &[f64]) -> f64 {
    ts.iter()
        .map(|t| t.coef * t.indices.iter().map(|&j| z[j]).product::<f64>())
        .sum()
}

/// Total lattice probability; 1 up to rounding for any valid law.
pub fn total_probability(dgp: &PopulationDgp) -> Result<f64> {
    Ok(dgp.lattice()?.iter().map(|(_, w)| w).sum())
}

fn plan_for(dgp: &PopulationDgp, q: usize) -> Result<InteractionPlan> {
    dgp.validate()?;
    InteractionPlan::new(dgp.p, q)
}

/// `E[m(O; beta, mu)]`: the demeaned interactions of orders `2..=q` at the
/// true means, times `Y - beta D`, averaged over the lattice.
pub fn population_moment(dgp: &PopulationDgp, beta: f64, q: usize) -> Result<Vec<f64>> {
    let (m0, m1) = moment_parts(dgp, q)?;
    Ok(m0.iter().zip(&m1).map(|(a, b)| a + beta * b).collect())
}

/// `M = E[dm/dbeta] = -E[m_bar(Z) D]`.
pub fn population_derivative(dgp: &PopulationDgp, q: usize) -> Result<Vec<f64>> {
    Ok(moment_parts(dgp, q)?.1)
}

// (E[m_bar Y], -E[m_bar D])
fn moment_parts(dgp: &PopulationDgp, q: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let plan = plan_for(dgp, q)?;
    let mu = dgp.mu()?;
    let r = plan.r();
    let (mut m0, mut m1) = (vec![0.0; r], vec![0.0; r]);
    let mut bar = vec![0.0; r];
    for (z, w) in dgp.lattice()? {
        plan.eval_demeaned_into(&z, &mu, &mut bar);
        let (ey, ed) = (dgp.outcome_mean(&z), dgp.exposure_mean(&z));
        for l in 0..r {
            m0[l] += w * bar[l] * ey;
            m1[l] -= w * bar[l] * ed;
        }
    }
    Ok((m0, m1))
}

/// The root of `M' E[m(O; beta, mu)] = 0`, which is affine in `beta`.
pub fn population_beta(dgp: &PopulationDgp, q: usize) -> Result<f64> {
    let (m0, m1) = moment_parts(dgp, q)?;
    let scale = dgp
        .theta
        .iter()
        .chain(dgp.alpha.iter().map(|t| &t.coef))
        .fold(1.0f64, |a, v| a.max(v.abs()));
    let mm: f64 = m1.iter().map(|v| v * v).sum();
    if mm.sqrt() <= 1e-12 * scale {
        return Err(Error::Identification(format!(
            "no interaction of order 2..={q} is relevant for the exposure (|M| = {:.3e})",
            mm.sqrt()
        )));
    }
    let m0m: f64 = m0.iter().zip(&m1).map(|(a, b)| a * b).sum();
    Ok(-m0m / mm)
}

/// Population projections of `E[Y|Z]` and `E[D|Z]` onto `W_{k-1}(Z)`.
pub fn population_projection(dgp: &PopulationDgp, plan: &InteractionPlan, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let lattice = dgp.lattice()?;
    let m = plan.basis_dim(k);
    let rows = lattice.len();
    let mut w = DMatrix::zeros(rows, m);
    let mut rhs = DMatrix::zeros(rows, 2);
    let mut basis = vec![0.0; m];
    for (i, (z, p)) in lattice.iter().enumerate() {
        let s = p.sqrt();
        plan.eval_basis_into(z, k, &mut basis);
        for (c, b) in basis.iter().enumerate() {
            w[(i, c)] = s * b;
        }
        rhs[(i, 0)] = s * dgp.outcome_mean(z);
        rhs[(i, 1)] = s * dgp.exposure_mean(z);
    }
    let fit = lstsq(&w, &rhs, "oracle: population projection")?;
    if fit.rank < m {
        return Err(Error::RankDeficient {
            context: "oracle: population projection",
            rank: fit.rank,
            cols: m,
        });
    }
    Ok((fit.column(0).as_slice().to_vec(), fit.column(1).as_slice().to_vec()))
}

/// Nuisance parameters of the order-`k` moments: `(mu, theta_{k-1}, xi_{k-1})`
/// flattened in that order. `theta` projects the outcome, `xi` the exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct Eta {
    pub mu: Vec<f64>,
    pub theta: Vec<f64>,
    pub xi: Vec<f64>,
}

impl Eta {
    pub fn len(&self) -> usize {
        self.mu.len() + self.theta.len() + self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, c: usize) -> f64 {
        let (a, b) = (self.mu.len(), self.mu.len() + self.theta.len());
        match c {
            _ if c < a => self.mu[c],
            _ if c < b => self.theta[c - a],
            _ => self.xi[c - b],
        }
    }

    pub fn set(&mut self, c: usize, v: f64) {
        let (a, b) = (self.mu.len(), self.mu.len() + self.theta.len());
        match c {
            _ if c < a => self.mu[c] = v,
            _ if c < b => self.theta[c - a] = v,
            _ => self.xi[c - b] = v,
        }
    }

    pub fn label(&self, c: usize) -> String {
        let (a, b) = (self.mu.len(), self.mu.len() + self.theta.len());
        match c {
            _ if c < a => format!("mu[{c}]"),
            _ if c < b => format!("theta[{}]", c - a),
            _ => format!("xi[{}]", c - b),
        }
    }
}

/// `eta_k*` at the population.
pub fn population_eta(dgp: &PopulationDgp, plan: &InteractionPlan, k: usize) -> Result<Eta> {
    let (theta, xi) = population_projection(dgp, plan, k)?;
    Ok(Eta {
        mu: dgp.mu()?,
        theta,
        xi,
    })
}

/// `E[g_k(O; beta, eta)]` for every order-`k` subset, at an arbitrary `eta`.
pub fn orthogonal_moment(
    dgp: &PopulationDgp,
    lattice: &[(Vec<f64>, f64)],
    plan: &InteractionPlan,
    k: usize,
    beta: f64,
    eta: &Eta,
) -> Vec<f64> {
    let subsets = plan.subsets(k);
    let mut out = vec![0.0; subsets.len()];
    let mut basis = vec![0.0; plan.basis_dim(k)];
    for (z, p) in lattice {
        plan.eval_basis_into(z, k, &mut basis);
        let ry = dgp.outcome_mean(z) - linear(&eta.theta, &basis);
        let rd = dgp.exposure_mean(z) - linear(&eta.xi, &basis);
        let resid = ry - beta * rd;
        for (o, s) in out.iter_mut().zip(subsets) {
            *o += p * s.centered_product(z, &eta.mu) * resid;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrthogonalityReport {
    pub max_abs_derivative: f64,
    /// Where the maximum was attained.
    pub order: usize,
    pub beta: f64,
    pub coordinate: String,
    pub evaluations: usize,
}

/// Central finite differences of the exact `E[g_k]` in every nuisance
/// coordinate, for `k = 2..=q` and every `beta` in the grid.
pub fn orthogonality_check(dgp: &PopulationDgp, q: usize, beta_grid: &[f64], step: f64) -> Result<OrthogonalityReport> {
    if !(step > 0.0) || beta_grid.is_empty() {
        return Err(Error::Config(
            "orthogonality check needs a positive step and a non-empty grid".into(),
        ));
    }
    let plan = plan_for(dgp, q)?;
    let lattice = dgp.lattice()?;
    let mut report = OrthogonalityReport {
        max_abs_derivative: 0.0,
        order: 2,
        beta: beta_grid[0],
        coordinate: String::new(),
        evaluations: 0,
    };
    for k in 2..=q {
        let eta = population_eta(dgp, &plan, k)?;
        for &beta in beta_grid {
            for c in 0..eta.len() {
                let mut up = eta.clone();
                let mut down = eta.clone();
                up.set(c, eta.get(c) + step);
                down.set(c, eta.get(c) - step);
                let gu = orthogonal_moment(dgp, &lattice, &plan, k, beta, &up);
                let gd = orthogonal_moment(dgp, &lattice, &plan, k, beta, &down);
                for (a, b) in gu.iter().zip(&gd) {
                    let deriv = ((a - b) / (2.0 * step)).abs();
                    if deriv > report.max_abs_derivative || report.coordinate.is_empty() {
                        report.max_abs_derivative = deriv;
                        report.order = k;
                        report.beta = beta;
                        report.coordinate = eta.label(c);
                    }
                }
                report.evaluations += 1;
            }
        }
    }
    Ok(report)
}

/// `|E[g_k](eta* + 2t v) - E[g_k](eta*)| / |E[g_k](eta* + t v) - E[g_k](eta*)|`
/// in the Euclidean norm. A value near 4 means the moment moves only at
/// second order along `v`.
pub fn second_order_ratio(
    dgp: &PopulationDgp,
    q: usize,
    k: usize,
    beta: f64,
    direction: &[f64],
    t: f64,
) -> Result<f64> {
    let plan = plan_for(dgp, q)?;
    if !(2..=q).contains(&k) {
        return Err(Error::Plan(format!("order {k} outside 2..={q}")));
    }
    let lattice = dgp.lattice()?;
    let eta = population_eta(dgp, &plan, k)?;
    if direction.len() != eta.len() {
        return Err(Error::Dimension {
            context: "oracle: perturbation direction",
            expected: eta.len(),
            got: direction.len(),
        });
    }
    let base = orthogonal_moment(dgp, &lattice, &plan, k, beta, &eta);
    let change = |scale: f64| {
        let mut e = eta.clone();
        for (c, v) in direction.iter().enumerate() {
            e.set(c, eta.get(c) + scale * v);
        }
        let g = orthogonal_moment(dgp, &lattice, &plan, k, beta, &e);
        g.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let (one, two) = (change(t), change(2.0 * t));
    if one == 0.0 {
        return Err(Error::NonConvergence("perturbation leaves the moment unchanged"));
    }
    Ok(two / one)
}

/// Asymptotic variance of `sqrt(n)(ratio - beta)` for the plug-in ratio on
/// pair `(j, k)` with estimated means. `outcome_noise_var` is `Var(eps)`.
pub fn ratio_variance(dgp: &PopulationDgp, j: usize, k: usize, outcome_noise_var: f64) -> Result<f64> {
    let lattice = dgp.lattice()?;
    if j == k || j >= dgp.p || k >= dgp.p {
        return Err(Error::Plan(format!("invalid instrument pair ({j}, {k})")));
    }
    let mu = dgp.mu()?;
    let u = |z: &[f64]| dgp.outcome_mean(z) - dgp.beta_true * dgp.exposure_mean(z);
    let (mut den, mut cj, mut ck, mut mbar2) = (0.0, 0.0, 0.0, 0.0);
    for (z, p) in &lattice {
        let (a, b) = (z[j] - mu[j], z[k] - mu[k]);
        den += p * a * b * dgp.exposure_mean(z);
        cj += p * b * u(z);
        ck += p * a * u(z);
        mbar2 += p * (a * b).powi(2);
    }
    if den == 0.0 {
        return Err(Error::WeakInteraction { denominator: 0.0 });
    }
    let mut h2 = 0.0;
    for (z, p) in &lattice {
        let (a, b) = (z[j] - mu[j], z[k] - mu[k]);
        let h = a * b * u(z) - cj * a - ck * b;
        h2 += p * h * h;
    }
    Ok((h2 + outcome_noise_var * mbar2) / (den * den))
}

/// Summary printed by the command-line `oracle-check`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub p: usize,
    pub q: usize,
    pub beta_true: f64,
    pub population_beta: Option<f64>,
    pub beta_error: Option<f64>,
    pub moment_at_truth: f64,
    pub orthogonality: OrthogonalityReport,
    pub identification_pass: bool,
    pub orthogonality_pass: bool,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.identification_pass && self.orthogonality_pass
    }
}

pub const BETA_TOL: f64 = 1e-12;
pub const ORTHOGONALITY_TOL: f64 = 1e-6;

pub fn run_check(dgp: &PopulationDgp, q: usize, beta_grid: &[f64], step: f64) -> Result<OracleCheck> {
    let beta = population_beta(dgp, q).ok();
    let moment = population_moment(dgp, dgp.beta_true, q)?;
    let orth = orthogonality_check(dgp, q, beta_grid, step)?;
    let err = beta.map(|b| (b - dgp.beta_true).abs());
    Ok(OracleCheck {
        p: dgp.p,
        q,
        beta_true: dgp.beta_true,
        population_beta: beta,
        beta_error: err,
        moment_at_truth: moment.iter().fold(0.0f64, |a, v| a.max(v.abs())),
        identification_pass: err.is_some_and(|e| e <= BETA_TOL),
        orthogonality_pass: orth.max_abs_derivative <= ORTHOGONALITY_TOL,
        orthogonality: orth,
    })
}

/// Two independent fair instruments, `beta = 0.5`, a unit exposure interaction
/// and both instruments invalid.
pub fn default_fixture() -> PopulationDgp {
    PopulationDgp::independent(vec![0.5, 0.5], 0.5)
        .with_theta(vec![1.0, 0.7])
        .with_pi(vec![0.4, -0.3])
        .with_exposure_term(vec![0, 1], 1.0)
}

/// Positively dependent pair: `Pr(1,1) = Pr(0,0) = 0.4`, `Pr(1,0) = Pr(0,1) = 0.1`.
pub fn dependent_fixture() -> PopulationDgp {
    // index bit j is z_j: 0 -> (0,0), 1 -> (1,0), 2 -> (0,1), 3 -> (1,1)
    PopulationDgp::with_table(2, vec![0.4, 0.1, 0.1, 0.4], 0.5)
        .with_theta(vec![1.0, 0.7])
        .with_pi(vec![0.4, -0.3])
        .with_exposure_term(vec![0, 1], 1.0)
}

/// Independent fair instruments `0..p` with no effects; used to probe the guard.
pub fn fair_fixture(p: usize, beta_true: f64) -> PopulationDgp {
    PopulationDgp::independent(vec![0.5; p], beta_true)
}

/// `p` independent fair instruments, unit main effects and unit pairwise
/// exposure interactions, direct effects cycling through 0, 0.2, 0.4.
/// For `p = 2` this is [`default_fixture`].
pub fn pairwise_fixture(p: usize) -> PopulationDgp {
    if p == 2 {
        return default_fixture();
    }
    let mut dgp = PopulationDgp::independent(vec![0.5; p], 0.5)
        .with_theta(vec![1.0; p])
        .with_pi((0..p).map(|j| 0.2 * (j % 3) as f64).collect());
    for j in 0..p {
        for k in j + 1..p {
            dgp = dgp.with_exposure_term(vec![j, k], 1.0);
        }
    }
    dgp
}
