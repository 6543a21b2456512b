//! The adaptive loop SOLVE -> ESTIMATE -> MARK -> REFINE.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimator::{estimate, to_elementwise, EstimatorOptions, IndicatorSet, DATA_DEGREE};
use crate::mesh::{BaseMesh, CylinderMesh, Domain, YPartition};
use crate::system::{assemble, check_nested, exact_error_identity, DiscreteField};
use crate::weighted::{DataFn, FractionalParams, LocalSpace};

/// Largest number of y-intervals the mesh-condition enforcement may reach.
pub const MAX_Y_INTERVALS: usize = 100_000;

/// Exponent policy for the graded y-partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaPolicy {
    /// `3 / (2s) + 0.1`.
    #[default]
    Default,
    /// `3 / (1 - |alpha|) + 0.1`, strong enough for the flux oscillation.
    Strong,
}

impl GammaPolicy {
    pub fn gamma(self, s: f64) -> f64 {
        match self {
            GammaPolicy::Default => 3.0 / (2.0 * s) + 0.1,
            GammaPolicy::Strong => 3.0 / (1.0 - (1.0 - 2.0 * s).abs()) + 0.1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            GammaPolicy::Default => "default",
            GammaPolicy::Strong => "strong",
        }
    }
}

impl FromStr for GammaPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(GammaPolicy::Default),
            "strong" => Ok(GammaPolicy::Strong),
            _ => Err(Error::Parse(format!("unknown gamma policy '{s}'"))),
        }
    }
}

/// Granularity of the Dörfler marking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkingMode {
    /// Mark stars by `tau_z'`, refine every element of a marked star.
    #[default]
    Star,
    /// Mark elements by the element-wise indicators.
    Element,
}

/// How the error column is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// Energy identity against the known trace `u`.
    Exact,
    /// Energy differences against a uniformly refined reference solve.
    Reference,
    None,
}

/// Right-hand side descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// `scale * sin(kx pi x) * sin(ky pi y)`; `ky = 0` drops the y-factor.
    SinProduct { kx: f64, ky: f64, scale: f64 },
    Constant { value: f64 },
}

impl DataSpec {
    pub fn function(&self) -> Arc<DataFn> {
        match *self {
            DataSpec::SinProduct { kx, ky, scale } => {
                Arc::new(move |p: [f64; 2]| {
                    let y = if ky == 0.0 { 1.0 } else { (ky * PI * p[1]).sin() };
                    scale * (kx * PI * p[0]).sin() * y
                })
            }
            DataSpec::Constant { value } => Arc::new(move |_: [f64; 2]| value),
        }
    }

    /// The trace `u = (-Delta)^(-s) f` when `f` is a Dirichlet eigenfunction
    /// of the domain (or zero).
    pub fn exact_solution(&self, domain: Domain, s: f64) -> Option<Arc<DataFn>> {
        match *self {
            DataSpec::Constant { value: 0.0 } => Some(Arc::new(|_: [f64; 2]| 0.0)),
            DataSpec::Constant { .. } => None,
            DataSpec::SinProduct { kx, ky, scale } => {
                let integer = |k: f64| k.fract() == 0.0 && k != 0.0;
                let lambda = match domain {
                    Domain::UnitInterval if integer(kx) && ky == 0.0 => PI * PI * kx * kx,
                    Domain::UnitSquare if integer(kx) && integer(ky) => PI * PI * (kx * kx + ky * ky),
                    // sin(kx pi x) sin(ky pi y) vanishes on x, y in {-1, 0, 1}
                    Domain::Square | Domain::LShape if integer(kx) && integer(ky) => {
                        PI * PI * (kx * kx + ky * ky)
                    }
                    _ => return None,
                };
                let factor = scale * lambda.powf(-s);
                Some(Arc::new(move |p: [f64; 2]| {
                    let y = if ky == 0.0 { 1.0 } else { (ky * PI * p[1]).sin() };
                    factor * (kx * PI * p[0]).sin() * y
                }))
            }
        }
    }
}

/// Parameters of one adaptive run.
#[derive(Debug, Clone, PartialEq)]
pub struct AfemConfig {
    pub s: f64,
    pub domain: Domain,
    pub data: DataSpec,
    /// Dörfler parameter in `(0, 1]`.
    pub theta: f64,
    pub max_iterations: usize,
    pub dof_budget: usize,
    pub gamma_policy: GammaPolicy,
    /// Constant `C_T` of the mesh condition `h_Y <= C_T h_z'`.
    pub c_t: f64,
    pub enforce_mesh_condition: bool,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    pub space: LocalSpace,
    /// Grid spacing of the initial base mesh.
    pub initial_h: f64,
    pub marking: MarkingMode,
    pub error_mode: ErrorMode,
    /// Adds the flux oscillation to `tau`; `None` picks the space default.
    pub include_flux: Option<bool>,
}

impl AfemConfig {
    pub fn new(s: f64, domain: Domain, data: DataSpec) -> Self {
        Self {
            s,
            domain,
            data,
            theta: 0.5,
            max_iterations: 60,
            dof_budget: 20_000,
            gamma_policy: GammaPolicy::Default,
            c_t: 1.0,
            enforce_mesh_condition: false,
            solver_tol: 1e-9,
            solver_max_iter: 20_000,
            space: LocalSpace::P2Bubble,
            initial_h: if domain.dim() == 1 { 0.25 } else { 0.5 },
            marking: MarkingMode::Star,
            error_mode: ErrorMode::Exact,
            include_flux: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        FractionalParams::new(self.s)?;
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(invalid(format!("theta = {} outside (0, 1]", self.theta)));
        }
        if self.max_iterations == 0 || self.dof_budget == 0 || self.solver_max_iter == 0 {
            return Err(invalid("iteration caps and budgets must be positive"));
        }
        if !(self.c_t > 0.0) || !(self.solver_tol > 0.0) || !(self.initial_h > 0.0) {
            return Err(invalid("C_T, solver tolerance and initial h must be positive"));
        }
        self.space.x_kind(self.domain.dim())?;
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.gamma_policy.gamma(self.s)
    }

    pub fn estimator_options(&self) -> EstimatorOptions {
        let mut o = EstimatorOptions::new(self.space);
        if let Some(flag) = self.include_flux {
            o.include_flux = flag;
        }
        o
    }
}

/// One row of the run log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub n_base_elems: usize,
    pub n_cyl_cells: usize,
    pub dofs: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "Y")]
    pub y: f64,
    pub error: f64,
    pub estimator: f64,
    pub oscillation: f64,
    pub tau: f64,
    pub effectivity: f64,
    pub aspect_bottom_mean: f64,
    pub mesh_cond_worst: f64,
    pub solver_iters: usize,
    pub wall_ms: f64,
}

/// Column order of the run log.
pub const RECORD_COLUMNS: [&str; 15] = [
    "iter",
    "n_base_elems",
    "n_cyl_cells",
    "dofs",
    "M",
    "Y",
    "error",
    "estimator",
    "oscillation",
    "tau",
    "effectivity",
    "aspect_bottom_mean",
    "mesh_cond_worst",
    "solver_iters",
    "wall_ms",
];

/// Outcome of Dörfler marking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Marking {
    /// Selected indices in decreasing indicator order.
    pub selected: Vec<usize>,
    /// All indicators vanish.
    pub converged: bool,
}

/// Minimal set whose squared indicators reach `theta^2` of the total:
/// the shortest prefix of the indicators sorted in decreasing order, ties
/// broken by index.
pub fn dorfler_select(values: &[f64], theta: f64) -> Result<Marking> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(invalid(format!("theta = {theta} outside (0, 1]")));
    }
    if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(invalid(format!("indicator {bad} is not a finite non-negative number")));
    }
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| values[i] > 0.0).collect();
    if order.is_empty() {
        return Ok(Marking { selected: Vec::new(), converged: true });
    }
    order.sort_by(|&a, &b| match values[b].partial_cmp(&values[a]) {
        Some(Ordering::Equal) | None => a.cmp(&b),
        Some(o) => o,
    });
    if theta == 1.0 {
        return Ok(Marking { selected: order, converged: false });
    }
    let total: f64 = order.iter().map(|&i| values[i] * values[i]).sum();
    let goal = theta * theta * total;
    let mut acc = 0.0;
    let mut take = order.len();
    for (n, &i) in order.iter().enumerate() {
        acc += values[i] * values[i];
        if acc >= goal {
            take = n + 1;
            break;
        }
    }
    order.truncate(take);
    Ok(Marking { selected: order, converged: false })
}

/// Dörfler marking of stars by `tau_z'`.
pub fn mark_dorfler(ind: &IndicatorSet, theta: f64) -> Result<Marking> {
    dorfler_select(&ind.tau, theta)
}

/// Elements of the marked stars, sorted and without repetitions.
pub fn star_elements(base: &BaseMesh, stars: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> =
        stars.iter().flat_map(|&z| base.vertex_elements(z).iter().copied()).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Truncation height `1 + ln(#T) / 3`.
pub fn truncation_height(n_elements: usize) -> f64 {
    1.0 + (n_elements as f64).ln() / 3.0
}

/// `ceil(#T^(1/n))`, computed without floating point for perfect powers.
pub fn y_intervals(n_elements: usize, dim: usize) -> usize {
    let root = (n_elements as f64).powf(1.0 / dim as f64).round() as usize;
    if root.pow(dim as u32) == n_elements {
        root.max(1)
    } else {
        ((n_elements as f64).powf(1.0 / dim as f64).ceil() as usize).max(1)
    }
}

/// Number of free dofs of the tensor system on `mesh`.
pub fn free_dofs(mesh: &CylinderMesh) -> usize {
    mesh.base.interior_vertices().count() * mesh.m()
}

/// Extrudes `base` with the height and interval rules of the loop; when
/// enforcement is requested, increases `M` until the mesh condition holds.
pub fn build_cylinder(base: BaseMesh, cfg: &AfemConfig) -> Result<CylinderMesh> {
    let y = truncation_height(base.num_elements());
    let mut m = y_intervals(base.num_elements(), base.dim());
    let gamma = cfg.gamma();
    let mut mesh = CylinderMesh::new(base, YPartition::graded(m, y, gamma)?);
    if cfg.enforce_mesh_condition {
        while !mesh.check_mesh_condition(cfg.c_t).satisfied {
            m += 1;
            if m > MAX_Y_INTERVALS {
                return Err(invalid("mesh condition needs more y-intervals than allowed"));
            }
            mesh.ypart = YPartition::graded(m, y, gamma)?;
        }
    }
    Ok(mesh)
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum RefineOutcome {
    Refined(CylinderMesh),
    /// The refined mesh would exceed the dof budget.
    BudgetExceeded { dofs: usize },
}

/// Bisects every element of the marked stars and rebuilds the y-partition.
pub fn refine_step(base: &BaseMesh, marked_stars: &[usize], cfg: &AfemConfig) -> Result<RefineOutcome> {
    if marked_stars.is_empty() {
        return Err(invalid("no stars marked"));
    }
    refine_elements(base, &star_elements(base, marked_stars), cfg)
}

fn refine_elements(base: &BaseMesh, elements: &[usize], cfg: &AfemConfig) -> Result<RefineOutcome> {
    let mesh = build_cylinder(base.bisect(elements), cfg)?;
    let dofs = free_dofs(&mesh);
    if dofs > cfg.dof_budget {
        Ok(RefineOutcome::BudgetExceeded { dofs })
    } else {
        Ok(RefineOutcome::Refined(mesh))
    }
}

/// Why the loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// All indicators vanished.
    Converged,
    BudgetReached,
    IterationCap,
    Failed,
}

/// State of one finished iteration, passed to observers.
pub struct IterationState<'a> {
    pub record: &'a IterationRecord,
    pub mesh: &'a Arc<CylinderMesh>,
    pub solution: &'a DiscreteField,
    pub indicators: &'a IndicatorSet,
    pub energy: f64,
}

#[derive(Debug)]
pub struct AfemOutcome {
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
    /// The error that ended the run, if any; records up to it are kept.
    pub failure: Option<Error>,
    pub final_mesh: Option<Arc<CylinderMesh>>,
    pub final_solution: Option<DiscreteField>,
}

/// Runs the loop.
pub fn run(cfg: &AfemConfig) -> Result<AfemOutcome> {
    run_with(cfg, |_| Ok(()))
}

/// Runs the loop and hands every finished iteration to `observer`.
pub fn run_with(
    cfg: &AfemConfig,
    mut observer: impl FnMut(&IterationState) -> Result<()>,
) -> Result<AfemOutcome> {
    cfg.validate()?;
    let params = FractionalParams::new(cfg.s)?;
    let f = cfg.data.function();
    let u_exact = match cfg.error_mode {
        ErrorMode::Exact => Some(cfg.data.exact_solution(cfg.domain, cfg.s).ok_or_else(|| {
            invalid("exact error requested but the trace of the solution is unknown")
        })?),
        _ => None,
    };
    let opts = cfg.estimator_options();

    let mut records = Vec::new();
    let mut energies: Vec<(f64, Arc<CylinderMesh>)> = Vec::new();
    let mut mesh = Arc::new(build_cylinder(BaseMesh::build(cfg.domain, cfg.initial_h)?, cfg)?);
    let mut previous: Option<DiscreteField> = None;
    let mut failure = None;
    let mut stop = StopReason::IterationCap;
    let mut final_solution = None;

    for iter in 0..cfg.max_iterations {
        let elapsed_ms = stopwatch();
        let step = (|| -> Result<_> {
            let sys = assemble(mesh.clone(), params, f.as_ref(), DATA_DEGREE)?;
            let guess = match &previous {
                Some(p) => Some(p.prolongate(mesh.clone())?),
                None => None,
            };
            let (v, info) = sys.solve(cfg.solver_tol, cfg.solver_max_iter, guess.as_ref())?;
            let energy = sys.energy(&v)?;
            let ind = estimate(&v, f.as_ref(), params, opts)?;
            let error = match &u_exact {
                Some(u) => exact_error_identity(&v, f.as_ref(), u.as_ref(), params.d_s, DATA_DEGREE)?,
                None => f64::NAN,
            };
            Ok((v, info, energy, ind, error))
        })();
        let (v, info, energy, ind, error) = match step {
            Ok(r) => r,
            Err(e) => {
                failure = Some(e);
                stop = StopReason::Failed;
                break;
            }
        };
        let tau = ind.tau_total();
        let record = IterationRecord {
            iter,
            n_base_elems: mesh.base.num_elements(),
            n_cyl_cells: mesh.num_cells(),
            dofs: free_dofs(&mesh),
            m: mesh.m(),
            y: mesh.ypart.height(),
            error,
            estimator: ind.estimator_total(),
            oscillation: ind.oscillation_total(),
            tau,
            effectivity: ratio(tau, error),
            aspect_bottom_mean: mesh.aspect_ratio_stats().bottom_layer_mean,
            mesh_cond_worst: mesh.check_mesh_condition(cfg.c_t).worst_ratio,
            solver_iters: info.iterations,
            wall_ms: elapsed_ms(),
        };
        let state = IterationState { record: &record, mesh: &mesh, solution: &v, indicators: &ind, energy };
        if let Err(e) = observer(&state) {
            failure = Some(e);
            stop = StopReason::Failed;
            break;
        }
        records.push(record);
        energies.push((energy, mesh.clone()));

        let next = (|| -> Result<Option<RefineOutcome>> {
            let elements = match cfg.marking {
                MarkingMode::Star => {
                    let marking = mark_dorfler(&ind, cfg.theta)?;
                    if marking.converged {
                        return Ok(None);
                    }
                    star_elements(&mesh.base, &marking.selected)
                }
                MarkingMode::Element => {
                    let el = to_elementwise(&ind, &mesh.base);
                    let tau_k: Vec<f64> = el.tau_sq.iter().map(|t| t.sqrt()).collect();
                    let marking = dorfler_select(&tau_k, cfg.theta)?;
                    if marking.converged {
                        return Ok(None);
                    }
                    let mut e = marking.selected;
                    e.sort_unstable();
                    e
                }
            };
            refine_elements(&mesh.base, &elements, cfg).map(Some)
        })();
        final_solution = Some(v);
        match next {
            Ok(None) => {
                stop = StopReason::Converged;
                break;
            }
            Ok(Some(RefineOutcome::BudgetExceeded { .. })) => {
                stop = StopReason::BudgetReached;
                break;
            }
            Ok(Some(RefineOutcome::Refined(new_mesh))) => {
                if iter + 1 == cfg.max_iterations {
                    break;
                }
                previous = final_solution.take();
                mesh = Arc::new(new_mesh);
            }
            Err(e) => {
                failure = Some(e);
                stop = StopReason::Failed;
                break;
            }
        }
    }
    if final_solution.is_none() {
        final_solution = previous;
    }

    if cfg.error_mode == ErrorMode::Reference && failure.is_none() && !records.is_empty() {
        if let Err(e) = fill_reference_errors(cfg, params, f.as_ref(), &mut records, &energies, final_solution.as_ref()) {
            failure = Some(e);
            stop = StopReason::Failed;
        }
    }
    let final_mesh = energies.last().map(|(_, m)| m.clone());
    Ok(AfemOutcome { records, stop, failure, final_mesh, final_solution })
}

/// Milliseconds since the call; NaN on targets without a clock.
#[cfg(not(target_arch = "wasm32"))]
pub(crate) fn stopwatch() -> impl Fn() -> f64 {
    let start = std::time::Instant::now();
    move || start.elapsed().as_secs_f64() * 1e3
}

#[cfg(target_arch = "wasm32")]
pub(crate) fn stopwatch() -> impl Fn() -> f64 {
    || f64::NAN
}

fn ratio(tau: f64, error: f64) -> f64 {
    if error > 0.0 {
        tau / error
    } else {
        f64::NAN
    }
}

/// Reference mesh for runs without a known solution: one uniform
/// refinement of the base (two bisections in 2D, so that `h` halves) and
/// twice as many y-intervals with the same height and grading.
pub fn reference_mesh(last: &CylinderMesh) -> Result<CylinderMesh> {
    let times = last.base.dim();
    let base = last.base.refine_uniform(times);
    let ypart = YPartition::graded(2 * last.m(), last.ypart.height(), last.ypart.gamma())?;
    Ok(CylinderMesh::new(base, ypart))
}

fn fill_reference_errors(
    cfg: &AfemConfig,
    params: FractionalParams,
    f: &DataFn,
    records: &mut [IterationRecord],
    energies: &[(f64, Arc<CylinderMesh>)],
    last_solution: Option<&DiscreteField>,
) -> Result<()> {
    let last = &energies.last().expect("at least one iteration").1;
    let fine = Arc::new(reference_mesh(last)?);
    let sys = assemble(fine.clone(), params, f, DATA_DEGREE)?;
    let guess = match last_solution {
        Some(v) => Some(v.prolongate(fine.clone())?),
        None => None,
    };
    let (vf, _) = sys.solve(cfg.solver_tol, cfg.solver_max_iter, guess.as_ref())?;
    let e_ref = sys.energy(&vf)?;
    for (rec, (e, mesh)) in records.iter_mut().zip(energies) {
        check_nested(mesh, &fine)?;
        rec.error = (2.0 * (e - e_ref)).max(0.0).sqrt();
        rec.effectivity = ratio(rec.tau, rec.error);
    }
    Ok(())
}
