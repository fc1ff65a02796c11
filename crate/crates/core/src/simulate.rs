//! Data-generating processes for the Monte Carlo studies and a replication
//! runner that summarizes bias, spread, standard errors, coverage, the
//! overidentification rejection rate and the interaction F statistic.
//!
//! Instruments are independent Bernoulli(`mu`). The exposure is
//!
//! ```text
//! D = sum_j theta_j Z_j + sum_{j<k} alpha_jk I_jk + nu,   alpha_jk = c / sqrt(n)
//! Y = D beta + sum_j pi_j Z_j [+ sum_{j<k} phi_jk I_jk] + eps
//! ```
//!
//! with `(eps, nu)` bivariate normal. The bracketed term breaks the additive
//! linear outcome model; `phi_jk = e_jk * c / sqrt(n)` with `e_jk ~ N(1, 1)`.
//!
//! The pair term `I_jk` is `(Z_j - mu)(Z_k - mu)` by default and `Z_j Z_k`
//! under [`InteractionCoding::Raw`]. The two codings differ by a linear
//! function of the instruments, so MAGIC, its J statistic and the F
//! diagnostic are unchanged; only estimators that use the main effects, such
//! as TSLS, see a different first stage. With raw products the interactions
//! leak `alpha * mu * (p - 1)` into every main effect, which dilutes the TSLS
//! bias (0.048 instead of 0.060 in scenario I at `p = 10`).
//!
//! Randomness: every replication owns a ChaCha8 stream selected by its index
//! under a key derived from the seed, so replications are independent of one
//! another and of execution order. Normals come from Box-Muller.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::cue::CueOptions;
use crate::data::Dataset;
use crate::diagnostics::f_stat;
use crate::error::{Error, Result};
use crate::interactions::InteractionPlan;
use crate::pipeline::fit_with_plan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// `theta_j = 1`; the first 30% of instruments have `pi_j = 0.2`.
    I,
    /// `theta_j = 1`; 20% each with `pi_j` = 0.2, 0.4, 0.6.
    II,
    /// `theta_j ~ N(1, 1)`, `pi_j ~ N(0.2, 0.2)` (variance reading).
    III,
    /// `theta_j ~ N(1, 1)`; the first 70% have `pi_j = theta_j / 2`.
    IV,
    /// `theta_j ~ N(theta_mean, theta_var)`, `pi_j ~ N(pi_mean, pi_var)`;
    /// defaults to the identification-strength study, `N(1, 1)` and `N(0, 0.2)`.
    Custom,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Scenario::I),
            "II" | "2" => Ok(Scenario::II),
            "III" | "3" => Ok(Scenario::III),
            "IV" | "4" => Ok(Scenario::IV),
            "CUSTOM" => Ok(Scenario::Custom),
            _ => Err(Error::Config(format!(
                "unknown scenario `{s}` (expected I, II, III, IV or custom)"
            ))),
        }
    }
}

/// How a pairwise interaction enters the exposure and outcome equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionCoding {
    /// `(Z_j - mu)(Z_k - mu)`
    Centered,
    /// `Z_j Z_k`
    Raw,
}

impl std::str::FromStr for InteractionCoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "centered" => Ok(InteractionCoding::Centered),
            "raw" => Ok(InteractionCoding::Raw),
            _ => Err(Error::Config(format!(
                "unknown interaction coding `{s}` (expected centered or raw)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub p: usize,
    pub n: usize,
    pub q: usize,
    pub beta_true: f64,
    /// Interaction strength; `alpha_jk = c / sqrt(n)`.
    pub c: f64,
    /// Bernoulli success probability of every instrument.
    pub mu: f64,
    /// Covariance of `(eps, nu)`.
    pub sigma: [[f64; 2]; 2],
    pub scenario: Scenario,
    pub interaction_coding: InteractionCoding,
    pub misspecify_alice: bool,
    /// Draw the misspecification multipliers `e_jk` once per seed instead of
    /// once per replication.
    pub freeze_misspecification: bool,
    /// Overrides for the normal draws used by scenarios III, IV and custom.
    /// `None` selects the scenario's own value.
    pub theta_mean: Option<f64>,
    pub theta_var: Option<f64>,
    pub pi_mean: Option<f64>,
    pub pi_var: Option<f64>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            p: 10,
            n: 5000,
            q: 2,
            beta_true: 0.0,
            c: 3.75,
            mu: 0.5,
            sigma: [[1.0, 0.25], [0.25, 1.0]],
            scenario: Scenario::I,
            interaction_coding: InteractionCoding::Centered,
            misspecify_alice: false,
            freeze_misspecification: false,
            theta_mean: None,
            theta_var: None,
            pi_mean: None,
            pi_var: None,
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.p < 2 {
            return bad(format!("p = {} must be at least 2", self.p));
        }
        if self.n < 2 {
            return bad(format!("n = {} must be at least 2", self.n));
        }
        if self.q < 2 || self.q > self.p {
            return bad(format!("q = {} must lie in 2..={}", self.q, self.p));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return bad(format!("mu = {} must lie in (0, 1)", self.mu));
        }
        let s = self.sigma;
        if s[0][1] != s[1][0] || !(s[0][0] > 0.0) || !(s[0][0] * s[1][1] - s[0][1] * s[0][1] > 0.0) {
            return bad(format!("sigma {s:?} is not symmetric positive definite"));
        }
        for (name, v) in [("theta_var", self.theta_var), ("pi_var", self.pi_var)] {
            if v.is_some_and(|v| !(v >= 0.0)) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if !self.c.is_finite() || !self.beta_true.is_finite() {
            return bad("c and beta_true must be finite".into());
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.c / (self.n as f64).sqrt()
    }
}

/// Parameters realized for one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    pub beta: f64,
    pub pi: Vec<f64>,
    pub theta: Vec<f64>,
    /// Pairwise exposure interactions in plan order `(0,1), (0,2), ...`.
    pub alpha: Vec<f64>,
    /// Pairwise outcome interactions (empty when the outcome model holds).
    pub phi: Vec<f64>,
}

/// Counter-based normal source: ChaCha8 uniforms through Box-Muller.
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl NormalStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = seed;
        for chunk in key.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, prob: f64) -> f64 {
        if self.uniform() < prob {
            1.0
        } else {
            0.0
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal(&mut self, mean: f64, var: f64) -> f64 {
        mean + var.sqrt() * self.standard_normal()
    }
}

const FROZEN_STREAM: u64 = u64::MAX;

fn count_of(fraction: f64, p: usize) -> usize {
    ((fraction * p as f64) - 1e-9).ceil().max(0.0) as usize
}

fn draw_effects(cfg: &ScenarioConfig, rng: &mut NormalStream) -> (Vec<f64>, Vec<f64>) {
    let p = cfg.p;
    let theta_mean = cfg.theta_mean.unwrap_or(1.0);
    let theta_var = cfg.theta_var.unwrap_or(1.0);
    match cfg.scenario {
        Scenario::I => {
            let k = count_of(0.3, p);
            let pi = (0..p).map(|j| if j < k { 0.2 } else { 0.0 }).collect();
            (vec![1.0; p], pi)
        }
        Scenario::II => {
            let k = count_of(0.2, p);
            let pi = (0..p)
                .map(|j| match j / k.max(1) {
                    0 => 0.2,
                    1 => 0.4,
                    2 => 0.6,
                    _ => 0.0,
                })
                .collect();
            (vec![1.0; p], pi)
        }
        Scenario::III | Scenario::Custom => {
            let (pm, pv) = match cfg.scenario {
                Scenario::III => (cfg.pi_mean.unwrap_or(0.2), cfg.pi_var.unwrap_or(0.2)),
                _ => (cfg.pi_mean.unwrap_or(0.0), cfg.pi_var.unwrap_or(0.2)),
            };
            let theta: Vec<f64> = (0..p).map(|_| rng.normal(theta_mean, theta_var)).collect();
            let pi = (0..p).map(|_| rng.normal(pm, pv)).collect();
            (theta, pi)
        }
        Scenario::IV => {
            let k = count_of(0.7, p);
            let theta: Vec<f64> = (0..p).map(|_| rng.normal(theta_mean, theta_var)).collect();
            let pi = theta
                .iter()
                .enumerate()
                .map(|(j, t)| if j < k { t / 2.0 } else { 0.0 })
                .collect();
            (theta, pi)
        }
    }
}

/// Generates replication `rep_index` of the configured design.
pub fn gen_dataset(cfg: &ScenarioConfig, rep_index: u64) -> Result<(Dataset, Truth)> {
    cfg.validate()?;
    let (n, p) = (cfg.n, cfg.p);
    let pairs = p * (p - 1) / 2;
    let mut rng = NormalStream::new(cfg.seed, rep_index);

    let (theta, pi) = draw_effects(cfg, &mut rng);
    let alpha = vec![cfg.alpha(); pairs];
    let phi = if cfg.misspecify_alice {
        let mut frozen;
        let src = if cfg.freeze_misspecification {
            frozen = NormalStream::new(cfg.seed, FROZEN_STREAM);
            &mut frozen
        } else {
            &mut rng
        };
        (0..pairs).map(|_| src.normal(1.0, 1.0) * cfg.alpha()).collect()
    } else {
        Vec::new()
    };

    let s = cfg.sigma;
    let l11 = s[0][0].sqrt();
    let l21 = s[1][0] / l11;
    let l22 = (s[1][1] - l21 * l21).sqrt();

    let mut z = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    let shift = match cfg.interaction_coding {
        InteractionCoding::Centered => cfg.mu,
        InteractionCoding::Raw => 0.0,
    };
    let mut row = vec![0.0; p];
    for _ in 0..n {
        for v in row.iter_mut() {
            *v = rng.bernoulli(cfg.mu);
        }
        let u1 = rng.standard_normal();
        let u2 = rng.standard_normal();
        let eps = l11 * u1;
        let nu = l21 * u1 + l22 * u2;

        let mut di: f64 = theta.iter().zip(&row).map(|(t, z)| t * z).sum();
        let mut yi: f64 = pi.iter().zip(&row).map(|(t, z)| t * z).sum();
        let mut pair = 0;
        for j in 0..p {
            for k in j + 1..p {
                let prod = (row[j] - shift) * (row[k] - shift);
                di += alpha[pair] * prod;
                if !phi.is_empty() {
                    yi += phi[pair] * prod;
                }
                pair += 1;
            }
        }
        di += nu;
        yi += di * cfg.beta_true + eps;
        z.extend_from_slice(&row);
        y.push(yi);
        d.push(di);
    }
    let ds = Dataset::from_parts(y, d, z, p, None)?;
    if let Some(v) = ds.validate().first() {
        // e.g. a constant instrument at tiny n
        return Err(Error::InvalidData(format!("generated replication {rep_index}: {v}")));
    }
    Ok((
        ds,
        Truth {
            beta: cfg.beta_true,
            pi,
            theta,
            alpha,
            phi,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McMethod {
    Magic,
    Tsls,
    EfficientFixedR,
}

impl McMethod {
    pub fn label(self) -> &'static str {
        match self {
            McMethod::Magic => "MAGIC",
            McMethod::Tsls => "TSLS",
            McMethod::EfficientFixedR => "GMM-fixed-r",
        }
    }
}

impl std::str::FromStr for McMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "magic" | "cue" => Ok(McMethod::Magic),
            "tsls" => Ok(McMethod::Tsls),
            "efficient" | "efficient_fixed_r" | "gmm" => Ok(McMethod::EfficientFixedR),
            _ => Err(Error::Config(format!("unknown method `{s}`"))),
        }
    }
}

/// Outcome of one method on one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodDraw {
    pub beta_hat: f64,
    pub se: f64,
    pub covers: bool,
    pub overid_reject: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRecord {
    pub rep: u64,
    pub f_stat: f64,
    pub draws: BTreeMap<McMethod, MethodDraw>,
}

/// Estimates every requested method on one replication.
pub fn run_replication(cfg: &ScenarioConfig, rep: u64, methods: &[McMethod], cue: &CueOptions) -> Result<RepRecord> {
    let (ds, truth) = gen_dataset(cfg, rep)?;
    let plan = InteractionPlan::new(cfg.p, cfg.q)?;
    let f = f_stat(&ds, &plan)?.f_value;
    let crit = crate::cue::normal_critical(0.95)?;
    let mut draws = BTreeMap::new();
    for &m in methods {
        let draw = match m {
            McMethod::Magic => {
                let fit = fit_with_plan(&ds, plan.clone(), cue)?;
                MethodDraw {
                    beta_hat: fit.cue.beta_hat,
                    se: fit.cue.se,
                    covers: (fit.cue.beta_hat - truth.beta).abs() <= crit * fit.cue.se,
                    overid_reject: fit.cue.j_pvalue.map(|p| p < 0.05),
                }
            }
            McMethod::Tsls => {
                let b = baselines::tsls(&ds)?;
                MethodDraw {
                    beta_hat: b.beta_hat,
                    se: b.se,
                    covers: b.covers(truth.beta, crit),
                    overid_reject: None,
                }
            }
            McMethod::EfficientFixedR => {
                let b = baselines::efficient_fixed_r(&ds, &plan, None)?;
                MethodDraw {
                    beta_hat: b.beta_hat,
                    se: b.se,
                    covers: b.covers(truth.beta, crit),
                    overid_reject: None,
                }
            }
        };
        draws.insert(m, draw);
    }
    Ok(RepRecord { rep, f_stat: f, draws })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub mean_beta: f64,
    pub abs_bias: f64,
    pub sd: f64,
    pub mean_se: f64,
    pub coverage_95: f64,
    pub overid_rejection_rate: Option<f64>,
    pub mean_f_stat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub config: ScenarioConfig,
    pub reps: usize,
    pub excluded: usize,
    /// Messages for excluded replications, keyed by replication index.
    pub exclusion_reasons: BTreeMap<u64, String>,
    pub methods: BTreeMap<McMethod, MethodSummary>,
}

fn summarize(beta: f64, draws: &[MethodDraw], f_stats: &[f64]) -> MethodSummary {
    let k = draws.len() as f64;
    let mean_beta = draws.iter().map(|d| d.beta_hat).sum::<f64>() / k;
    let sd = if draws.len() > 1 {
        (draws.iter().map(|d| (d.beta_hat - mean_beta).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    let rejections: Vec<bool> = draws.iter().filter_map(|d| d.overid_reject).collect();
    MethodSummary {
        mean_beta,
        abs_bias: (mean_beta - beta).abs(),
        sd,
        mean_se: draws.iter().map(|d| d.se).sum::<f64>() / k,
        coverage_95: draws.iter().filter(|d| d.covers).count() as f64 / k,
        overid_rejection_rate: (!rejections.is_empty())
            .then(|| rejections.iter().filter(|r| **r).count() as f64 / rejections.len() as f64),
        mean_f_stat: f_stats.iter().sum::<f64>() / f_stats.len() as f64,
    }
}

/// Runs `reps` replications on `workers` threads (0 = rayon default).
///
/// Results are reduced in replication order, so the summary is identical for
/// every worker count.
pub fn run_monte_carlo(
    cfg: &ScenarioConfig,
    reps: usize,
    methods: &[McMethod],
    cue: &CueOptions,
    workers: usize,
) -> Result<McSummary> {
    cfg.validate()?;
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    if methods.is_empty() {
        return Err(Error::Config("at least one method is required".into()));
    }
    let job = || {
        (0..reps as u64)
            .into_par_iter()
            .map(|rep| run_replication(cfg, rep, methods, cue))
            .collect::<Vec<_>>()
    };
    let outcomes = if workers == 0 {
        job()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(job)
    };

    let mut records = Vec::with_capacity(reps);
    let mut exclusion_reasons = BTreeMap::new();
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(rec) => records.push(rec),
            Err(e) => {
                exclusion_reasons.insert(rep as u64, e.to_string());
            }
        }
    }
    let excluded = exclusion_reasons.len();
    if excluded * 20 > reps || records.is_empty() {
        return Err(Error::TooManyExcluded { excluded, reps });
    }
    let f_stats: Vec<f64> = records.iter().map(|r| r.f_stat).collect();
    let methods = methods
        .iter()
        .map(|&m| {
            let draws: Vec<MethodDraw> = records.iter().map(|r| r.draws[&m]).collect();
            (m, summarize(cfg.beta_true, &draws, &f_stats))
        })
        .collect();
    Ok(McSummary {
        config: cfg.clone(),
        reps,
        excluded,
        exclusion_reasons,
        methods,
    })
}

impl McSummary {
    /// Aligned text table: method, |Bias|, SD, Mean SE, Coverage (95%), plus
    /// the overidentification rejection rate and mean F where available.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>8} {:>8} {:>14} {:>10} {:>8}",
            "Method", "|Bias|", "SD", "Mean SE", "Coverage(95%)", "J-reject", "F"
        );
        for (m, s) in &self.methods {
            let rej = s
                .overid_rejection_rate
                .map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                out,
                "{:<12} {:>8.3} {:>8.3} {:>8.3} {:>14.3} {:>10} {:>8.3}",
                m.label(),
                s.abs_bias,
                s.sd,
                s.mean_se,
                s.coverage_95,
                rej,
                s.mean_f_stat
            );
        }
        let _ = writeln!(out, "replications: {} (excluded {})", self.reps, self.excluded);
        out
    }
}
