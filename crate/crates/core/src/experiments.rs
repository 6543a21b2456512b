//! Predefined experiments, run logs and rate fitting.
//!
//! Each experiment name fixes a domain, a right-hand side and, when known,
//! the exact solution; the remaining knobs are [`AfemConfig`] fields that
//! callers may override. Runs write one CSV per fractional order and a
//! summary computed from those files.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::afem::{
    run_with, AfemConfig, DataSpec, ErrorMode, GammaPolicy, IterationRecord, StopReason,
};
use crate::error::{invalid, Error, Result};
use crate::estimator::IndicatorSet;
use crate::isotropic::{run_isotropic, IsotropicConfig};
use crate::mesh::{CylinderMesh, Domain};
use crate::weighted::LocalSpace;

/// Fractional orders used when none are given.
pub const DEFAULT_S_VALUES: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

/// Trailing window of the fitted rates.
pub const RATE_WINDOW: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExperimentName {
    /// Unit square, `f = sin(2 pi x) sin(2 pi y)`.
    SmoothCompatible2d,
    /// Unit square, `f = 1`.
    IncompatibleConst2d,
    /// L-shape, `f = sin(2 pi x) sin(pi y)`.
    LshapeCompatible,
    /// L-shape, `f = 1`.
    LshapeIncompatible,
    /// Unit interval, `f = pi^(2s) sin(pi x)`.
    Bessel1d,
    /// The same problem on isotropic meshes of the cylinder.
    IsotropicBaseline1d,
    /// L-shape, `f = 1`, plain quadratic local spaces.
    OscillationVariant,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 7] = [
        ExperimentName::SmoothCompatible2d,
        ExperimentName::IncompatibleConst2d,
        ExperimentName::LshapeCompatible,
        ExperimentName::LshapeIncompatible,
        ExperimentName::Bessel1d,
        ExperimentName::IsotropicBaseline1d,
        ExperimentName::OscillationVariant,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ExperimentName::SmoothCompatible2d => "smooth_compatible_2d",
            ExperimentName::IncompatibleConst2d => "incompatible_const_2d",
            ExperimentName::LshapeCompatible => "lshape_compatible",
            ExperimentName::LshapeIncompatible => "lshape_incompatible",
            ExperimentName::Bessel1d => "bessel_1d",
            ExperimentName::IsotropicBaseline1d => "isotropic_baseline_1d",
            ExperimentName::OscillationVariant => "oscillation_variant",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            ExperimentName::SmoothCompatible2d | ExperimentName::IncompatibleConst2d => Domain::UnitSquare,
            ExperimentName::LshapeCompatible
            | ExperimentName::LshapeIncompatible
            | ExperimentName::OscillationVariant => Domain::LShape,
            ExperimentName::Bessel1d | ExperimentName::IsotropicBaseline1d => Domain::UnitInterval,
        }
    }

    pub fn data(self, s: f64) -> DataSpec {
        match self {
            ExperimentName::SmoothCompatible2d => DataSpec::SinProduct { kx: 2.0, ky: 2.0, scale: 1.0 },
            ExperimentName::LshapeCompatible => DataSpec::SinProduct { kx: 2.0, ky: 1.0, scale: 1.0 },
            ExperimentName::IncompatibleConst2d
            | ExperimentName::LshapeIncompatible
            | ExperimentName::OscillationVariant => DataSpec::Constant { value: 1.0 },
            ExperimentName::Bessel1d | ExperimentName::IsotropicBaseline1d => {
                DataSpec::SinProduct { kx: 1.0, ky: 0.0, scale: PI.powf(2.0 * s) }
            }
        }
    }

    /// How the error column is obtained. The L-shape runs always use the
    /// reference solve, even where the solution happens to be known.
    pub fn error_mode(self) -> ErrorMode {
        match self {
            ExperimentName::SmoothCompatible2d | ExperimentName::Bessel1d | ExperimentName::IsotropicBaseline1d => {
                ErrorMode::Exact
            }
            _ => ErrorMode::Reference,
        }
    }

    pub fn default_s_values(self) -> Vec<f64> {
        match self {
            ExperimentName::IsotropicBaseline1d => vec![0.2, 0.6],
            _ => DEFAULT_S_VALUES.to_vec(),
        }
    }

    pub fn default_budget(self) -> usize {
        match self.domain() {
            Domain::UnitInterval => 40_000,
            _ => 200_000,
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentName::ALL
            .into_iter()
            .find(|e| e.tag() == s)
            .ok_or_else(|| Error::Parse(format!("unknown experiment '{s}'")))
    }
}

/// Optional changes to the preset configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub theta: Option<f64>,
    pub dof_budget: Option<usize>,
    pub max_iterations: Option<usize>,
    pub enforce_mesh_condition: Option<bool>,
    pub space: Option<LocalSpace>,
    pub gamma_policy: Option<GammaPolicy>,
    pub initial_h: Option<f64>,
    pub solver_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    pub s_values: Vec<f64>,
    pub overrides: Overrides,
}

/// A fully specified run.
#[derive(Debug, Clone, PartialEq)]
pub enum RunPlan {
    Anisotropic(AfemConfig),
    Isotropic(IsotropicConfig),
}

impl ExperimentSpec {
    pub fn new(name: ExperimentName) -> Self {
        Self { name, s_values: name.default_s_values(), overrides: Overrides::default() }
    }

    /// The configuration of the run with fractional order `s`.
    pub fn plan(&self, s: f64) -> Result<RunPlan> {
        let o = &self.overrides;
        if self.name == ExperimentName::IsotropicBaseline1d {
            let mut cfg = IsotropicConfig::new(s);
            cfg.dof_budget = self.name.default_budget();
            if o.enforce_mesh_condition == Some(true) || o.space.is_some() || o.gamma_policy.is_some() {
                return Err(invalid(
                    "the isotropic baseline has no y-grading, mesh condition or local space choice",
                ));
            }
            cfg.theta = o.theta.unwrap_or(cfg.theta);
            cfg.dof_budget = o.dof_budget.unwrap_or(cfg.dof_budget);
            cfg.max_iterations = o.max_iterations.unwrap_or(cfg.max_iterations);
            cfg.initial_h = o.initial_h.unwrap_or(cfg.initial_h);
            cfg.solver_tol = o.solver_tol.unwrap_or(cfg.solver_tol);
            cfg.validate()?;
            return Ok(RunPlan::Isotropic(cfg));
        }
        let mut cfg = AfemConfig::new(s, self.name.domain(), self.name.data(s));
        cfg.dof_budget = self.name.default_budget();
        cfg.error_mode = self.name.error_mode();
        if self.name == ExperimentName::OscillationVariant {
            cfg.space = LocalSpace::P2;
        }
        cfg.theta = o.theta.unwrap_or(cfg.theta);
        cfg.dof_budget = o.dof_budget.unwrap_or(cfg.dof_budget);
        cfg.max_iterations = o.max_iterations.unwrap_or(cfg.max_iterations);
        cfg.enforce_mesh_condition = o.enforce_mesh_condition.unwrap_or(cfg.enforce_mesh_condition);
        cfg.space = o.space.unwrap_or(cfg.space);
        cfg.gamma_policy = o.gamma_policy.unwrap_or(cfg.gamma_policy);
        cfg.initial_h = o.initial_h.unwrap_or(cfg.initial_h);
        cfg.solver_tol = o.solver_tol.unwrap_or(cfg.solver_tol);
        cfg.validate()?;
        Ok(RunPlan::Anisotropic(cfg))
    }
}

/// Records and stop reason of one run.
#[derive(Debug)]
pub struct RunResult {
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
    pub failure: Option<Error>,
}

/// Snapshot handed to [`run_plan_with`] observers of anisotropic runs.
pub struct Snapshot<'a> {
    pub record: &'a IterationRecord,
    pub mesh: &'a CylinderMesh,
    pub indicators: &'a IndicatorSet,
}

pub fn run_plan(plan: &RunPlan) -> Result<RunResult> {
    run_plan_with(plan, |_| Ok(()))
}

/// Runs a plan; `observer` sees every iteration of anisotropic runs.
pub fn run_plan_with(plan: &RunPlan, mut observer: impl FnMut(&Snapshot) -> Result<()>) -> Result<RunResult> {
    match plan {
        RunPlan::Anisotropic(cfg) => {
            let out = run_with(cfg, |st| {
                observer(&Snapshot { record: st.record, mesh: st.mesh, indicators: st.indicators })
            })?;
            Ok(RunResult { records: out.records, stop: out.stop, failure: out.failure })
        }
        RunPlan::Isotropic(cfg) => {
            let out = run_isotropic(cfg)?;
            Ok(RunResult { records: out.records, stop: out.stop, failure: out.failure })
        }
    }
}

pub fn write_records(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(crate::afem::RECORD_COLUMNS)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<IterationRecord>> {
    parse_records(fs::File::open(path)?)
        .map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            e => e,
        })
}

/// Reads a run log from any byte source.
pub fn parse_records(source: impl std::io::Read) -> Result<Vec<IterationRecord>> {
    let mut rd = csv::Reader::from_reader(source);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    if header != crate::afem::RECORD_COLUMNS {
        return Err(Error::Parse("not a run log: unexpected columns".into()));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Per-node indicator table: node, E, osc, tau. The oscillation column
/// includes the flux term whenever it enters `tau`.
pub fn write_indicators(path: &Path, ind: &IndicatorSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node", "E", "osc", "tau"])?;
    for z in 0..ind.len() {
        let osc = if ind.include_flux { ind.oscillation[z].hypot(ind.flux_oscillation[z]) } else { ind.oscillation[z] };
        w.write_record(&[z.to_string(), ind.estimator[z].to_string(), osc.to_string(), ind.tau[z].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares slope of `log(value)` against `log(#cells)` over the last
/// `window` records. Records with a non-positive or undefined value are
/// left out; fewer than three usable points is an error.
pub fn estimate_rate_by(
    records: &[IterationRecord],
    window: usize,
    value: impl Fn(&IterationRecord) -> f64,
) -> Result<f64> {
    let tail = &records[records.len().saturating_sub(window)..];
    let pts: Vec<(f64, f64)> = tail
        .iter()
        .filter_map(|r| {
            let v = value(r);
            (v > 0.0 && v.is_finite() && r.n_cyl_cells > 0).then(|| ((r.n_cyl_cells as f64).ln(), v.ln()))
        })
        .collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} usable records in a window of {window}, need 3",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all records have the same mesh size".into()));
    }
    Ok(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

/// Rate of the error column.
pub fn estimate_rate(records: &[IterationRecord], window: usize) -> Result<f64> {
    estimate_rate_by(records, window, |r| r.error)
}

/// Mean effectivity over the last `window` records (all when `None`),
/// ignoring undefined entries.
pub fn mean_effectivity(records: &[IterationRecord], window: Option<usize>) -> f64 {
    let tail = &records[records.len().saturating_sub(window.unwrap_or(records.len()))..];
    let v: Vec<f64> = tail.iter().map(|r| r.effectivity).filter(|e| e.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// One line of the summary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub s: f64,
    pub iterations: usize,
    pub final_cells: usize,
    pub final_dofs: usize,
    pub final_error: f64,
    pub rate_error: f64,
    pub rate_estimator: f64,
    pub rate_tau: f64,
    pub mean_effectivity: f64,
    pub tail_mean_effectivity: f64,
    pub stop: String,
}

impl SummaryRow {
    /// Summary of one run log; rates that cannot be fitted are NaN.
    pub fn from_records(s: f64, records: &[IterationRecord], stop: &str) -> Self {
        let rate = |f: fn(&IterationRecord) -> f64| estimate_rate_by(records, RATE_WINDOW, f).unwrap_or(f64::NAN);
        let last = records.last();
        Self {
            s,
            iterations: records.len(),
            final_cells: last.map_or(0, |r| r.n_cyl_cells),
            final_dofs: last.map_or(0, |r| r.dofs),
            final_error: last.map_or(f64::NAN, |r| r.error),
            rate_error: rate(|r| r.error),
            rate_estimator: rate(|r| r.estimator),
            rate_tau: rate(|r| r.tau),
            mean_effectivity: mean_effectivity(records, None),
            tail_mean_effectivity: mean_effectivity(records, Some(RATE_WINDOW)),
            stop: stop.to_owned(),
        }
    }
}

pub fn stop_tag(stop: StopReason) -> &'static str {
    match stop {
        StopReason::Converged => "converged",
        StopReason::BudgetReached => "budget",
        StopReason::IterationCap => "iteration_cap",
        StopReason::Failed => "failed",
    }
}

/// File name of the run log of order `s`.
pub fn run_file_name(name: ExperimentName, s: f64) -> String {
    format!("{}_s{}.csv", name.tag(), s)
}

/// Outcome of one fractional order inside an experiment.
#[derive(Debug)]
pub struct OrderOutcome {
    pub s: f64,
    pub path: PathBuf,
    pub stop: StopReason,
    pub failure: Option<Error>,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub runs: Vec<OrderOutcome>,
    pub summary_path: PathBuf,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    /// Worst stop reason: failure, then any budget or iteration-cap stop,
    /// converged only when every run converged.
    pub fn overall_stop(&self) -> StopReason {
        let stops: Vec<StopReason> = self.runs.iter().map(|r| r.stop).collect();
        if stops.contains(&StopReason::Failed) {
            StopReason::Failed
        } else if stops.iter().all(|&s| s == StopReason::Converged) {
            StopReason::Converged
        } else if stops.contains(&StopReason::BudgetReached) {
            StopReason::BudgetReached
        } else {
            StopReason::IterationCap
        }
    }
}

/// Runs every order of the experiment, possibly concurrently, writing one
/// log per order into `out` and then the summary read back from the logs.
/// Logs of failed runs keep the iterations finished before the failure.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<ExperimentReport> {
    if spec.s_values.is_empty() {
        return Err(invalid("no fractional orders given"));
    }
    fs::create_dir_all(out)?;
    let plans: Vec<RunPlan> = spec.s_values.iter().map(|&s| spec.plan(s)).collect::<Result<_>>()?;
    let one = |i: usize| -> Result<OrderOutcome> {
        let s = spec.s_values[i];
        let result = run_plan(&plans[i])?;
        let path = out.join(run_file_name(spec.name, s));
        write_records(&path, &result.records)?;
        Ok(OrderOutcome { s, path, stop: result.stop, failure: result.failure })
    };
    let runs: Vec<OrderOutcome> = crate::estimator::map_indices(plans.len(), one)
        .into_iter()
        .collect::<Result<_>>()?;
    let mut summary = Vec::with_capacity(runs.len());
    for r in &runs {
        let records = read_records(&r.path)?;
        summary.push(SummaryRow::from_records(r.s, &records, stop_tag(r.stop)));
    }
    let summary_path = out.join(format!("{}_summary.csv", spec.name.tag()));
    let mut w = csv::Writer::from_path(&summary_path)?;
    for row in &summary {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(ExperimentReport { runs, summary_path, summary })
}

/// Run description read from a TOML file:
///
/// ```toml
/// experiment = "bessel_1d"
/// s = 0.5
///
/// [overrides]
/// theta = 0.4
/// dof_budget = 5000
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub experiment: String,
    pub s: f64,
    #[serde(default)]
    pub overrides: Overrides,
}

impl RunFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn plan(&self) -> Result<RunPlan> {
        let name: ExperimentName = self.experiment.parse()?;
        ExperimentSpec { name, s_values: vec![self.s], overrides: self.overrides.clone() }.plan(self.s)
    }
}

/// Mesh and indicators of iteration `iter` of an anisotropic run.
pub struct MeshDump {
    pub record: IterationRecord,
    /// Base mesh dump followed by the y-partition.
    pub text: String,
    pub indicators: IndicatorSet,
}

/// Runs `plan` up to iteration `iter` and captures that iteration.
pub fn dump_mesh(plan: &RunPlan, iter: usize) -> Result<MeshDump> {
    let RunPlan::Anisotropic(cfg) = plan else {
        return Err(invalid("mesh dumps are available for anisotropic runs only"));
    };
    let mut cfg = cfg.clone();
    cfg.max_iterations = iter + 1;
    cfg.error_mode = match cfg.error_mode {
        ErrorMode::Reference => ErrorMode::None,
        e => e,
    };
    let mut captured = None;
    let result = run_plan_with(&RunPlan::Anisotropic(cfg), |snap| {
        if snap.record.iter == iter {
            captured = Some(MeshDump {
                record: *snap.record,
                text: cylinder_text(snap.mesh),
                indicators: snap.indicators.clone(),
            });
        }
        Ok(())
    })?;
    match (captured, result.failure) {
        (Some(d), _) => Ok(d),
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::InsufficientData(format!(
            "the run stopped ({}) after {} iterations, before iteration {iter}",
            stop_tag(result.stop),
            result.records.len()
        ))),
    }
}

/// Base mesh text, then `YPART M m Y height GAMMA gamma` and one line
/// `l y_l` per partition node.
pub fn cylinder_text(mesh: &CylinderMesh) -> String {
    let mut out = mesh.base.to_text();
    if !out.ends_with('\n') {
        out.push('\n');
    }
    out.push_str(&format!(
        "YPART M {} Y {} GAMMA {}\n",
        mesh.m(),
        mesh.ypart.height(),
        mesh.ypart.gamma()
    ));
    for (l, y) in mesh.ypart.nodes().iter().enumerate() {
        out.push_str(&format!("{l} {y}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn synthetic(rate: f64, n: usize) -> Vec<IterationRecord> {
        (0..n)
            .map(|i| {
                let cells = 100 * (1usize << i);
                IterationRecord {
                    iter: i,
                    n_base_elems: cells / 4,
                    n_cyl_cells: cells,
                    dofs: cells,
                    m: 4,
                    y: 2.0,
                    error: 3.0 * (cells as f64).powf(rate),
                    estimator: 4.5 * (cells as f64).powf(rate),
                    oscillation: 0.0,
                    tau: 4.5 * (cells as f64).powf(rate),
                    effectivity: 1.5,
                    aspect_bottom_mean: f64::NAN,
                    mesh_cond_worst: 0.5,
                    solver_iters: 7,
                    wall_ms: 1.25,
                }
            })
            .collect()
    }

    #[test]
    fn exact_power_laws() {
        let r = synthetic(-1.0 / 3.0, 12);
        assert!((estimate_rate(&r, RATE_WINDOW).unwrap() + 1.0 / 3.0).abs() < 1e-10);
        let r = synthetic(-0.1, 12);
        assert!((estimate_rate(&r, RATE_WINDOW).unwrap() + 0.1).abs() < 1e-10);
    }

    #[test]
    fn rate_needs_three_points() {
        let r = synthetic(-0.5, 2);
        assert!(matches!(estimate_rate(&r, 8), Err(Error::InsufficientData(_))));
        let mut r = synthetic(-0.5, 5);
        for x in r.iter_mut().take(3) {
            x.error = f64::NAN;
        }
        assert!(estimate_rate(&r, 8).is_err());
    }

    #[test]
    fn names_round_trip() {
        for n in ExperimentName::ALL {
            assert_eq!(n.tag().parse::<ExperimentName>().unwrap(), n);
        }
        assert!("nope".parse::<ExperimentName>().is_err());
    }

    #[test]
    fn smooth_trace_value() {
        // u(1/4, 1/4) = (8 pi^2)^(-s)
        for s in [0.2, 0.5, 0.8] {
            let u = ExperimentName::SmoothCompatible2d
                .data(s)
                .exact_solution(Domain::UnitSquare, s)
                .unwrap();
            let want = (8.0 * PI * PI).powf(-s);
            assert!((u([0.25, 0.25]) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn presets_and_overrides() {
        let mut spec = ExperimentSpec::new(ExperimentName::OscillationVariant);
        let RunPlan::Anisotropic(cfg) = spec.plan(0.8).unwrap() else { panic!() };
        assert_eq!(cfg.space, LocalSpace::P2);
        assert_eq!(cfg.error_mode, ErrorMode::Reference);
        spec.overrides.gamma_policy = Some(GammaPolicy::Strong);
        spec.overrides.theta = Some(0.3);
        let RunPlan::Anisotropic(cfg) = spec.plan(0.8).unwrap() else { panic!() };
        assert_eq!(cfg.gamma_policy, GammaPolicy::Strong);
        assert_eq!(cfg.theta, 0.3);
        let mut iso = ExperimentSpec::new(ExperimentName::IsotropicBaseline1d);
        assert_eq!(iso.s_values, vec![0.2, 0.6]);
        iso.overrides.space = Some(LocalSpace::P2);
        assert!(iso.plan(0.2).is_err());
        spec.overrides.theta = Some(1.5);
        assert!(spec.plan(0.8).is_err());
    }

    #[test]
    fn run_file_parses() {
        let f = RunFile::parse(
            "experiment = \"bessel_1d\"\ns = 0.5\n[overrides]\ntheta = 0.4\nspace = \"p2\"\ngamma_policy = \"strong\"\n",
        )
        .unwrap();
        let RunPlan::Anisotropic(cfg) = f.plan().unwrap() else { panic!() };
        assert_eq!(cfg.theta, 0.4);
        assert_eq!(cfg.space, LocalSpace::P2);
        assert_eq!(cfg.gamma_policy, GammaPolicy::Strong);
        assert!(RunFile::parse("experiment = \"bessel_1d\"\ns = 0.5\nbogus = 1\n").is_err());
        assert!(RunFile::parse("experiment = \"x\"\ns = 0.5\n").unwrap().plan().is_err());
    }

    fn same(a: &IterationRecord, b: &IterationRecord) -> bool {
        let f = |x: f64, y: f64| x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan());
        a.iter == b.iter
            && a.n_base_elems == b.n_base_elems
            && a.n_cyl_cells == b.n_cyl_cells
            && a.dofs == b.dofs
            && a.m == b.m
            && f(a.y, b.y)
            && f(a.error, b.error)
            && f(a.estimator, b.estimator)
            && f(a.oscillation, b.oscillation)
            && f(a.tau, b.tau)
            && f(a.effectivity, b.effectivity)
            && f(a.aspect_bottom_mean, b.aspect_bottom_mean)
            && f(a.mesh_cond_worst, b.mesh_cond_worst)
            && a.solver_iters == b.solver_iters
            && f(a.wall_ms, b.wall_ms)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn csv_round_trip(vals in proptest::collection::vec(
            (any::<f64>(), 0usize..1_000_000, -1e300f64..1e300), 0..6)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("log.csv");
            let records: Vec<IterationRecord> = vals
                .iter()
                .enumerate()
                .map(|(i, &(x, n, y))| IterationRecord {
                    iter: i,
                    n_base_elems: n,
                    n_cyl_cells: n + 1,
                    dofs: n / 2,
                    m: n % 97,
                    y,
                    error: x,
                    estimator: y.abs(),
                    oscillation: f64::NAN,
                    tau: x * 0.5,
                    effectivity: if x.is_finite() { x / 3.0 } else { 1.0 },
                    aspect_bottom_mean: 1.0 / (n as f64 + 1.0),
                    mesh_cond_worst: f64::INFINITY,
                    solver_iters: n,
                    wall_ms: y / 7.0,
                })
                .collect();
            write_records(&path, &records).unwrap();
            let back = read_records(&path).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for (a, b) in records.iter().zip(&back) {
                prop_assert!(same(a, b), "{:?} vs {:?}", a, b);
            }
        }
    }

    #[test]
    fn header_order_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_records(&path, &synthetic(-0.3, 2)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), crate::afem::RECORD_COLUMNS.join(","));
        write_records(&path, &[]).unwrap();
        assert!(read_records(&path).unwrap().is_empty());
    }

    #[test]
    fn summary_matches_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ExperimentSpec::new(ExperimentName::Bessel1d);
        spec.s_values = vec![0.3, 0.7];
        spec.overrides.dof_budget = Some(300);
        let report = run_experiment(&spec, dir.path()).unwrap();
        assert_eq!(report.overall_stop(), StopReason::BudgetReached);
        for (run, row) in report.runs.iter().zip(&report.summary) {
            let records = read_records(&run.path).unwrap();
            let rate = estimate_rate(&records, RATE_WINDOW).unwrap();
            assert_eq!(rate.to_bits(), row.rate_error.to_bits());
            assert_eq!(row.iterations, records.len());
        }
        let mut rd = csv::Reader::from_path(&report.summary_path).unwrap();
        let rows: Vec<SummaryRow> = rd.deserialize().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].rate_error.to_bits(), report.summary[0].rate_error.to_bits());
    }

    #[test]
    fn dump_captures_requested_iteration() {
        let mut spec = ExperimentSpec::new(ExperimentName::Bessel1d);
        spec.overrides.dof_budget = Some(2000);
        let plan = spec.plan(0.5).unwrap();
        let d = dump_mesh(&plan, 2).unwrap();
        assert_eq!(d.record.iter, 2);
        assert!(d.text.starts_with("DIM 1"));
        assert!(d.text.contains("YPART M"));
        assert_eq!(d.indicators.len(), d.text.lines().filter(|l| l.starts_with("v ")).count());
        assert!(dump_mesh(&plan, 500).is_err());
    }
}
