//! Browser bindings: fractional constants and y-grading, a small adaptive
//! solve on the unit interval, and rate fitting of uploaded run logs.
//!
//! Every export returns a JSON string; the `*_json` functions hold the logic
//! and are usable from native code as well.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use frac_afem::afem::{run, GammaPolicy};
use frac_afem::experiments::{
    estimate_rate_by, mean_effectivity, parse_records, ExperimentName, ExperimentSpec, RunPlan, RATE_WINDOW,
};
use frac_afem::mesh::YPartition;
use frac_afem::weighted::FractionalParams;
use frac_afem::{Error, Result};

fn policy(strong: bool) -> GammaPolicy {
    if strong {
        GammaPolicy::Strong
    } else {
        GammaPolicy::Default
    }
}

fn to_json(value: &impl Serialize) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Parse(e.to_string()))
}

#[derive(Serialize)]
struct Constants {
    alpha: f64,
    d_s: f64,
    gamma: f64,
    nodes: Vec<f64>,
}

pub fn constants_json(s: f64, intervals: usize, height: f64, strong: bool) -> Result<String> {
    let p = FractionalParams::new(s)?;
    let gamma = policy(strong).gamma(s);
    let part = YPartition::graded(intervals, height, gamma)?;
    to_json(&Constants { alpha: p.alpha, d_s: p.d_s, gamma, nodes: part.nodes().to_vec() })
}

#[derive(Serialize)]
struct Step {
    iter: usize,
    cells: usize,
    dofs: usize,
    error: f64,
    estimator: f64,
    tau: f64,
}

#[derive(Serialize)]
struct Solve {
    steps: Vec<Step>,
    rate: Option<f64>,
    stop: &'static str,
    /// `(x, computed trace, exact solution)` on the final mesh.
    trace: Vec<[f64; 3]>,
}

pub fn solve_interval_json(s: f64, theta: f64, budget: usize, strong: bool) -> Result<String> {
    let mut spec = ExperimentSpec::new(ExperimentName::Bessel1d);
    spec.overrides.theta = Some(theta);
    spec.overrides.dof_budget = Some(budget);
    spec.overrides.gamma_policy = Some(policy(strong));
    let RunPlan::Anisotropic(cfg) = spec.plan(s)? else {
        return Err(Error::Parse("unexpected plan".into()));
    };
    let out = run(&cfg)?;
    if let Some(e) = out.failure {
        return Err(e);
    }
    let exact = cfg.data.exact_solution(cfg.domain, s);
    let mut trace = Vec::new();
    if let Some(v) = &out.final_solution {
        let values = v.trace();
        for (i, t) in values.iter().enumerate() {
            let p = v.mesh.base.coord(i);
            trace.push([p[0], *t, exact.as_ref().map_or(f64::NAN, |u| u(p))]);
        }
        trace.sort_by(|a, b| a[0].total_cmp(&b[0]));
    }
    let steps = out
        .records
        .iter()
        .map(|r| Step {
            iter: r.iter,
            cells: r.n_cyl_cells,
            dofs: r.dofs,
            error: r.error,
            estimator: r.estimator,
            tau: r.tau,
        })
        .collect();
    let rate = estimate_rate_by(&out.records, RATE_WINDOW, |r| r.error).ok();
    to_json(&Solve { steps, rate, stop: frac_afem::experiments::stop_tag(out.stop), trace })
}

#[derive(Serialize)]
struct Fit {
    iterations: usize,
    error_rate: f64,
    estimator_rate: Option<f64>,
    mean_effectivity: f64,
    tail_mean_effectivity: f64,
}

pub fn fit_rate_json(csv_text: &str, window: usize) -> Result<String> {
    let records = parse_records(csv_text.as_bytes())?;
    to_json(&Fit {
        iterations: records.len(),
        error_rate: estimate_rate_by(&records, window, |r| r.error)?,
        estimator_rate: estimate_rate_by(&records, window, |r| r.estimator).ok(),
        mean_effectivity: mean_effectivity(&records, None),
        tail_mean_effectivity: mean_effectivity(&records, Some(window)),
    })
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// `alpha`, `d_s`, the grading exponent and the graded y-nodes.
#[wasm_bindgen]
pub fn constants(s: f64, intervals: usize, height: f64, strong: bool) -> std::result::Result<String, JsError> {
    js(constants_json(s, intervals, height, strong))
}

/// Adaptive solve of the unit-interval problem with a known solution.
#[wasm_bindgen]
pub fn solve_interval(s: f64, theta: f64, budget: usize, strong: bool) -> std::result::Result<String, JsError> {
    js(solve_interval_json(s, theta, budget, strong))
}

/// Convergence rate and effectivity of a run log in CSV form.
#[wasm_bindgen]
pub fn fit_rate(csv_text: &str, window: usize) -> std::result::Result<String, JsError> {
    js(fit_rate_json(csv_text, window))
}
