//! Causal effect estimation from interactions of mutually independent
//! candidate instruments.
//!
//! Under an additive linear model for the outcome, demeaned products of
//! independent instruments are orthogonal to every linear direct effect, so
//! they yield valid moment conditions even when every instrument is invalid on
//! its own. This crate builds those moments (orthogonalized against lower-order
//! interaction bases), estimates the causal effect by continuously updated GMM,
//! and reports a sandwich standard error and an overidentification test.
//!
//! ```
//! use magic_iv::simulate::{gen_dataset, Scenario, ScenarioConfig};
//! use magic_iv::{fit, FitOptions};
//!
//! let cfg = ScenarioConfig { p: 5, n: 4000, c: 8.0, scenario: Scenario::I, ..Default::default() };
//! let (ds, truth) = gen_dataset(&cfg, 0).unwrap();
//! let magic = fit(&ds, &FitOptions::default()).unwrap();
//! assert_eq!(magic.cue.r, 10);
//! assert!((magic.cue.beta_hat - truth.beta).abs() < 6.0 * magic.cue.se);
//! ```

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod chisq;
pub mod cue;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod interactions;
pub mod linalg;
pub mod moments;
pub mod nuisance;
pub mod oracle;
pub mod pipeline;
pub mod simulate;

pub use data::{load_csv, Dataset};
pub use error::{Error, Result};
pub use interactions::InteractionPlan;
pub use pipeline::{fit, FitOptions, MagicFit};
