//! The full estimator: plan, nuisance fits, moment assembly and CUE.

use serde::Serialize;

use crate::cue::{self, CueOptions, CueResult};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::interactions::InteractionPlan;
use crate::moments::{build_components, MomentComponents};
use crate::nuisance::{self, NuisanceEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitOptions {
    /// Highest interaction order used in the moments.
    pub q: usize,
    pub cue: CueOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            q: 2,
            cue: CueOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MagicFit {
    pub plan: InteractionPlan,
    pub nuisance: NuisanceEstimate,
    pub components: MomentComponents,
    pub cue: CueResult,
}

impl MagicFit {
    /// `r^2 / n` and `r^3 / n`, the growth ratios the asymptotics need small.
    pub fn growth(&self) -> (f64, f64) {
        let r = self.plan.r() as f64;
        let n = self.cue.n as f64;
        (r * r / n, r * r * r / n)
    }
}

pub fn fit(ds: &Dataset, opts: &FitOptions) -> Result<MagicFit> {
    if ds.p() < 2 {
        return Err(Error::Plan(format!(
            "q >= 2 requires p >= 2 (dataset has p = {})",
            ds.p()
        )));
    }
    let plan = InteractionPlan::new(ds.p(), opts.q)?;
    fit_with_plan(ds, plan, &opts.cue)
}

pub fn fit_with_plan(ds: &Dataset, plan: InteractionPlan, opts: &CueOptions) -> Result<MagicFit> {
    let nuisance = nuisance::estimate(ds, &plan)?;
    let components = build_components(ds, &nuisance, &plan)?;
    let cue = cue::estimate(&components, opts)?;
    Ok(MagicFit {
        plan,
        nuisance,
        components,
        cue,
    })
}
