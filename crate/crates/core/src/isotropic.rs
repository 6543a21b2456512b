//! Isotropic baseline for one-dimensional problems.
//!
//! The truncated cylinder `(0, 1) x (0, Y)` is triangulated with shape-regular
//! triangles and refined by newest-vertex bisection of the whole
//! two-dimensional mesh, without any tensor structure or grading. The
//! discrete space is weighted P1; the estimator solves a P2-plus-bubble
//! problem on every vertex patch, homogeneous on the patch boundary except
//! on its part in `y = 0`.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::afem::{dorfler_select, DataSpec, IterationRecord, StopReason};
use crate::error::{invalid, Error, Result};
use crate::estimator::map_indices;
use crate::linalg::{self, Csr, SolveInfo, SpdOperator};
use crate::mesh::{BaseMesh, Domain};
use crate::quadrature::{gauss_jacobi, gauss_legendre};
use crate::weighted::{local_edges, DataFn, FractionalParams, XBasisKind, XReference};

/// Rule for `int_a^b y^alpha g(y) dy`, exact when `g` is a polynomial of
/// degree `degree`. Near `y = 0` it is the difference of two Gauss-Jacobi
/// rules on `[0, b]` and `[0, a]`, whose nodes may lie below `a`; callers
/// must evaluate `g` as a polynomial there.
pub fn weighted_interval_rule(a: f64, b: f64, alpha: f64, degree: usize) -> Vec<(f64, f64)> {
    debug_assert!(a >= 0.0 && b > a);
    let n = degree / 2 + 1;
    let h = b - a;
    let jacobi = |len: f64, sign: f64, out: &mut Vec<(f64, f64)>| {
        let (x, w) = cached_jacobi(n, alpha);
        let scale = sign * len.powf(alpha + 1.0);
        out.extend(x.iter().zip(&w).map(|(x, w)| (len * x, scale * w)));
    };
    let mut out = Vec::new();
    if a == 0.0 {
        jacobi(b, 1.0, &mut out);
    } else if a < h {
        jacobi(b, 1.0, &mut out);
        jacobi(a, -1.0, &mut out);
    } else {
        // the weight is analytic well beyond the interval
        let (x, w) = gauss_legendre(n + 8);
        out.extend(x.iter().zip(&w).map(|(x, w)| {
            let y = a + h * x;
            (y, h * w * y.powf(alpha))
        }));
    }
    out
}

type JacobiCache = std::collections::HashMap<(usize, u64), (Vec<f64>, Vec<f64>)>;

fn cached_jacobi(n: usize, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    thread_local! {
        static CACHE: std::cell::RefCell<JacobiCache> =
            Default::default();
    }
    CACHE.with(|c| {
        c.borrow_mut().entry((n, alpha.to_bits())).or_insert_with(|| gauss_jacobi(n, alpha)).clone()
    })
}

/// Points and weights integrating `y^alpha p(x, y)` over a triangle in the
/// `(x, y)` half plane, exact for polynomials `p` of total degree `degree`.
///
/// The triangle is cut by the horizontal line through its middle vertex;
/// over each part the inner x-integral is a polynomial of degree
/// `degree + 1` in `y`.
pub fn weighted_triangle_rule(verts: [[f64; 2]; 3], alpha: f64, degree: usize) -> Vec<([f64; 2], f64)> {
    let mut v = verts;
    v.sort_by(|a, b| a[1].total_cmp(&b[1]));
    let [p0, p1, p2] = v;
    let t = (p1[1] - p0[1]) / (p2[1] - p0[1]);
    let q = [p0[0] + t * (p2[0] - p0[0]), p1[1]];
    let (xu, xw) = gauss_legendre(degree / 2 + 1);
    let mut out = Vec::new();
    // the slab between two edges meeting at apex `c`, bounded by the
    // horizontal segment from `l` to `r`
    let mut slab = |c: [f64; 2], l: [f64; 2], r: [f64; 2]| {
        let (ya, yb) = if c[1] < l[1] { (c[1], l[1]) } else { (l[1], c[1]) };
        if yb <= ya {
            return;
        }
        let sign = if r[0] >= l[0] { 1.0 } else { -1.0 };
        for (y, wy) in weighted_interval_rule(ya, yb, alpha, degree + 1) {
            let s = (y - c[1]) / (l[1] - c[1]);
            let x1 = c[0] + s * (l[0] - c[0]);
            let x2 = c[0] + s * (r[0] - c[0]);
            let width = x2 - x1;
            for (u, wu) in xu.iter().zip(&xw) {
                out.push(([x1 + u * width, y], sign * wy * width * wu));
            }
        }
    };
    slab(p0, p1, q);
    slab(p2, p1, q);
    out
}

/// Barycentric coordinates of `p` in element `k`.
fn barycentric(mesh: &BaseMesh, k: usize, g: &[[f64; 2]; 3], p: [f64; 2]) -> [f64; 3] {
    let v0 = mesh.coord(mesh.element(k)[0]);
    let d = [p[0] - v0[0], p[1] - v0[1]];
    let l1 = g[1][0] * d[0] + g[1][1] * d[1];
    let l2 = g[2][0] * d[0] + g[2][1] * d[1];
    [1.0 - l1 - l2, l1, l2]
}

/// Parameters of an isotropic run.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotropicConfig {
    pub s: f64,
    /// One-dimensional data; its exact solution must be known.
    pub data: DataSpec,
    pub theta: f64,
    pub max_iterations: usize,
    pub dof_budget: usize,
    /// Fixed truncation height.
    pub height: f64,
    pub initial_h: f64,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
}

impl IsotropicConfig {
    /// `f = pi^(2s) sin(pi x)`, whose solution trace is `sin(pi x)`.
    pub fn new(s: f64) -> Self {
        Self {
            s,
            data: DataSpec::SinProduct { kx: 1.0, ky: 0.0, scale: PI.powf(2.0 * s) },
            theta: 0.5,
            max_iterations: 80,
            dof_budget: 20_000,
            height: 3.0,
            initial_h: 0.25,
            solver_tol: 1e-10,
            solver_max_iter: 20_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        FractionalParams::new(self.s)?;
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(invalid(format!("theta = {} outside (0, 1]", self.theta)));
        }
        if !(self.height > 0.0) || !(self.initial_h > 0.0) || !(self.solver_tol > 0.0) {
            return Err(invalid("height, initial h and solver tolerance must be positive"));
        }
        if self.max_iterations == 0 || self.dof_budget == 0 || self.solver_max_iter == 0 {
            return Err(invalid("iteration caps and budgets must be positive"));
        }
        Ok(())
    }
}

/// Weighted P1 problem on a triangulation of the rectangle.
pub struct IsotropicSystem<'a> {
    mesh: &'a BaseMesh,
    /// Vertex -> dof, `usize::MAX` for Dirichlet vertices.
    pub dof: Vec<usize>,
    pub matrix: Csr,
    pub rhs: Vec<f64>,
}

/// Vertex on `y = 0` strictly inside the interval: the Neumann part.
fn on_bottom(p: [f64; 2]) -> bool {
    p[1] == 0.0 && p[0] > 0.0 && p[0] < 1.0
}

/// Bottom edges of element `k`, as local vertex pairs.
fn bottom_edges(mesh: &BaseMesh, k: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let el = mesh.element(k);
    local_edges(2)
        .iter()
        .copied()
        .filter(move |&(a, b)| mesh.coord(el[a])[1] == 0.0 && mesh.coord(el[b])[1] == 0.0)
}

const EDGE_POINTS: usize = 6;

impl<'a> IsotropicSystem<'a> {
    pub fn assemble(mesh: &'a BaseMesh, params: FractionalParams, f: &DataFn) -> Result<Self> {
        let nv = mesh.num_vertices();
        let mut dof = vec![usize::MAX; nv];
        let mut n = 0;
        for (v, d) in dof.iter_mut().enumerate() {
            if !mesh.is_boundary(v) || on_bottom(mesh.coord(v)) {
                *d = n;
                n += 1;
            }
        }
        let (gx, gw) = gauss_legendre(EDGE_POINTS);
        let mut trip = Vec::new();
        let mut rhs = vec![0.0; n];
        for k in 0..mesh.num_elements() {
            let el = mesh.element(k);
            let g = mesh.bary_gradients(k);
            let verts = [mesh.coord(el[0]), mesh.coord(el[1]), mesh.coord(el[2])];
            let weight: f64 = weighted_triangle_rule(verts, params.alpha, 0).iter().map(|p| p.1).sum();
            for a in 0..3 {
                let i = dof[el[a]];
                if i == usize::MAX {
                    continue;
                }
                for b in 0..3 {
                    let j = dof[el[b]];
                    if j != usize::MAX {
                        trip.push((i, j, weight * (g[a][0] * g[b][0] + g[a][1] * g[b][1])));
                    }
                }
            }
            for (a, b) in bottom_edges(mesh, k) {
                let (xa, xb) = (verts[a][0], verts[b][0]);
                let len = (xb - xa).abs();
                for (t, w) in gx.iter().zip(&gw) {
                    let fv = f([xa + t * (xb - xa), 0.0]);
                    for (c, phi) in [(a, 1.0 - t), (b, *t)] {
                        let i = dof[el[c]];
                        if i != usize::MAX {
                            rhs[i] += params.d_s * len * w * fv * phi;
                        }
                    }
                }
            }
        }
        Ok(Self { mesh, dof, matrix: Csr::from_triplets(n, trip), rhs })
    }

    pub fn num_dofs(&self) -> usize {
        self.rhs.len()
    }

    pub fn solve(&self, guess: Option<Vec<f64>>, tol: f64, max_iter: usize) -> Result<(Vec<f64>, SolveInfo)> {
        let n = self.num_dofs();
        let mut x = match guess {
            Some(g) if g.len() == self.mesh.num_vertices() => {
                (0..self.mesh.num_vertices()).filter(|&v| self.dof[v] != usize::MAX).map(|v| g[v]).collect()
            }
            _ => vec![0.0; n],
        };
        let info = linalg::pcg(self, &self.rhs, &mut x, tol, max_iter)?;
        let mut out = vec![0.0; self.mesh.num_vertices()];
        for (v, &d) in self.dof.iter().enumerate() {
            if d != usize::MAX {
                out[v] = x[d];
            }
        }
        Ok((out, info))
    }
}

impl SpdOperator for IsotropicSystem<'_> {
    fn dim(&self) -> usize {
        self.num_dofs()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.apply(x, y)
    }

    /// Symmetric Gauss-Seidel.
    fn precondition(&self, r: &[f64], z: &mut [f64]) {
        let n = self.num_dofs();
        for i in 0..n {
            let mut acc = r[i];
            let mut d = 1.0;
            for (j, a) in self.matrix.row(i) {
                if j < i {
                    acc -= a * z[j];
                } else if j == i {
                    d = a;
                }
            }
            z[i] = acc / d;
        }
        for i in 0..n {
            z[i] *= self.matrix.get(i, i);
        }
        for i in (0..n).rev() {
            let mut acc = z[i];
            let mut d = 1.0;
            for (j, a) in self.matrix.row(i) {
                if j > i {
                    acc -= a * z[j];
                } else if j == i {
                    d = a;
                }
            }
            z[i] = acc / d;
        }
    }
}

/// Indicators of one vertex patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchIndicator {
    pub estimator_sq: f64,
    pub oscillation_sq: f64,
}

/// Local dof of the patch space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum PatchDof {
    Vertex(usize),
    Edge(usize, usize),
    Bubble(usize),
}

const LOCAL_DEGREE: usize = 4;

/// Solves the local problem of the patch of vertex `z`.
pub fn patch_indicator(
    mesh: &BaseMesh,
    z: usize,
    v: &[f64],
    f: &DataFn,
    params: FractionalParams,
) -> Result<PatchIndicator> {
    let reference = XReference::get(2, XBasisKind::P2Bubble);
    let nb = reference.len();
    let patch = mesh.vertex_elements(z);
    let edge = |a: usize, b: usize| if a < b { PatchDof::Edge(a, b) } else { PatchDof::Edge(b, a) };
    let mut edge_count = std::collections::HashMap::new();
    for &k in patch {
        let el = mesh.element(k);
        for &(a, b) in local_edges(2) {
            *edge_count.entry(edge(el[a], el[b])).or_insert(0usize) += 1;
        }
    }
    let is_free = |d: PatchDof| match d {
        PatchDof::Vertex(w) => w == z && (!mesh.is_boundary(z) || on_bottom(mesh.coord(z))),
        PatchDof::Edge(a, b) => {
            (a == z || b == z)
                && (edge_count[&d] == 2 || (mesh.coord(a)[1] == 0.0 && mesh.coord(b)[1] == 0.0))
        }
        PatchDof::Bubble(_) => true,
    };
    let mut free: Vec<PatchDof> = Vec::new();
    let mut local = Vec::with_capacity(patch.len());
    for &k in patch {
        let el = mesh.element(k);
        let mut dofs = Vec::with_capacity(nb);
        for &w in el {
            dofs.push(PatchDof::Vertex(w));
        }
        for &(a, b) in local_edges(2) {
            dofs.push(edge(el[a], el[b]));
        }
        dofs.push(PatchDof::Bubble(k));
        local.push(dofs);
        for &d in local.last().unwrap() {
            if is_free(d) && !free.contains(&d) {
                free.push(d);
            }
        }
    }
    free.sort();
    let nf = free.len();
    if nf == 0 {
        return Ok(PatchIndicator { estimator_sq: 0.0, oscillation_sq: 0.0 });
    }
    let index = |d: PatchDof| free.binary_search(&d).ok();

    let (gx, gw) = gauss_legendre(EDGE_POINTS + 2);
    let mut a = DMatrix::<f64>::zeros(nf, nf);
    let mut r = vec![0.0; nf];
    let mut vals = vec![0.0; nb];
    let mut dl = vec![[0.0; 3]; nb];
    let mut grads = vec![[0.0; 2]; nb];
    let mut dev_sq = 0.0;
    let mut h_bottom: f64 = 0.0;
    for (&k, dofs) in patch.iter().zip(&local) {
        let el = mesh.element(k);
        let g = mesh.bary_gradients(k);
        let verts = [mesh.coord(el[0]), mesh.coord(el[1]), mesh.coord(el[2])];
        let grad_v = [0, 1].map(|c| (0..3).map(|i| v[el[i]] * g[i][c]).sum::<f64>());
        let idx: Vec<Option<usize>> = dofs.iter().map(|&d| index(d)).collect();
        for (p, w) in weighted_triangle_rule(verts, params.alpha, LOCAL_DEGREE) {
            let l = barycentric(mesh, k, &g, p);
            reference.eval_derivs(&l, &mut dl);
            for (gr, d) in grads.iter_mut().zip(&dl) {
                for c in 0..2 {
                    gr[c] = d[0] * g[0][c] + d[1] * g[1][c] + d[2] * g[2][c];
                }
            }
            for (i, gi) in grads.iter().enumerate() {
                let Some(ri) = idx[i] else { continue };
                r[ri] -= w * (gi[0] * grad_v[0] + gi[1] * grad_v[1]);
                for (j, gj) in grads.iter().enumerate() {
                    if let Some(rj) = idx[j] {
                        a[(ri, rj)] += w * (gi[0] * gj[0] + gi[1] * gj[1]);
                    }
                }
            }
        }
        for (ea, eb) in bottom_edges(mesh, k) {
            let (xa, xb) = (verts[ea][0], verts[eb][0]);
            let len = (xb - xa).abs();
            h_bottom = h_bottom.max(len);
            let mut fv = Vec::with_capacity(gx.len());
            for (t, w) in gx.iter().zip(&gw) {
                let value = f([xa + t * (xb - xa), 0.0]);
                fv.push(value);
                let mut l = [0.0; 3];
                l[ea] = 1.0 - t;
                l[eb] = *t;
                reference.eval(&l, &mut vals);
                for (i, phi) in vals.iter().enumerate() {
                    if let Some(ri) = idx[i] {
                        r[ri] += params.d_s * len * w * value * phi;
                    }
                }
            }
            let mean: f64 = fv.iter().zip(&gw).map(|(v, w)| v * w).sum();
            dev_sq += len * fv.iter().zip(&gw).map(|(v, w)| w * (v - mean).powi(2)).sum::<f64>();
        }
    }
    let chol = a.cholesky().ok_or(Error::SingularLocal { node: z })?;
    let eta = chol.solve(&nalgebra::DVector::from_vec(r.clone()));
    let estimator_sq = eta.iter().zip(&r).map(|(e, r)| e * r).sum::<f64>().max(0.0);
    let oscillation_sq = params.d_s * h_bottom.powf(2.0 * params.s) * dev_sq;
    Ok(PatchIndicator { estimator_sq, oscillation_sq })
}

/// `sqrt(d_s int_0^1 f (u - V(., 0)))`, the energy error of a Galerkin
/// solution by orthogonality.
pub fn exact_error(mesh: &BaseMesh, v: &[f64], f: &DataFn, u: &DataFn, d_s: f64) -> f64 {
    let (gx, gw) = gauss_legendre(EDGE_POINTS + 4);
    let mut acc = 0.0;
    for k in 0..mesh.num_elements() {
        let el = mesh.element(k);
        for (a, b) in bottom_edges(mesh, k) {
            let (xa, xb) = (mesh.coord(el[a])[0], mesh.coord(el[b])[0]);
            let len = (xb - xa).abs();
            for (t, w) in gx.iter().zip(&gw) {
                let p = [xa + t * (xb - xa), 0.0];
                let vh = (1.0 - t) * v[el[a]] + t * v[el[b]];
                acc += len * w * f(p) * (u(p) - vh);
            }
        }
    }
    (d_s * acc).max(0.0).sqrt()
}

/// Number of bottom edges, the size of the induced trace mesh.
pub fn trace_elements(mesh: &BaseMesh) -> usize {
    (0..mesh.num_elements()).map(|k| bottom_edges(mesh, k).count()).sum()
}

#[derive(Debug)]
pub struct IsotropicOutcome {
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
    pub failure: Option<Error>,
    pub final_mesh: Option<BaseMesh>,
}

/// Values of the solution at the vertices of a bisection refinement.
fn prolongate(fine: &BaseMesh, coarse_values: &[f64]) -> Vec<f64> {
    let mut out = coarse_values.to_vec();
    for v in coarse_values.len()..fine.num_vertices() {
        let (a, b) = fine.parent_edge(v).expect("new vertices have parents");
        out.push(0.5 * (out[a] + out[b]));
    }
    out
}

/// The adaptive loop on isotropic meshes; the error uses the exact solution.
pub fn run_isotropic(cfg: &IsotropicConfig) -> Result<IsotropicOutcome> {
    cfg.validate()?;
    let params = FractionalParams::new(cfg.s)?;
    let f = cfg.data.function();
    let u = cfg
        .data
        .exact_solution(Domain::UnitInterval, cfg.s)
        .ok_or_else(|| invalid("the isotropic baseline needs data with a known solution"))?;
    let mut mesh = BaseMesh::build(Domain::Rectangle { width: 1.0, height: cfg.height }, cfg.initial_h)?;
    let mut records = Vec::new();
    let mut previous: Option<Vec<f64>> = None;
    let mut stop = StopReason::IterationCap;
    let mut failure = None;
    for iter in 0..cfg.max_iterations {
        let elapsed_ms = crate::afem::stopwatch();
        let step = (|| -> Result<_> {
            let sys = IsotropicSystem::assemble(&mesh, params, f.as_ref())?;
            let guess = previous.as_ref().map(|p| prolongate(&mesh, p));
            let (v, info) = sys.solve(guess, cfg.solver_tol, cfg.solver_max_iter)?;
            let ind: Vec<PatchIndicator> = map_indices(mesh.num_vertices(), |z| {
                patch_indicator(&mesh, z, &v, f.as_ref(), params)
            })
            .into_iter()
            .collect::<Result<_>>()?;
            Ok((sys.num_dofs(), v, info, ind))
        })();
        let (dofs, v, info, ind) = match step {
            Ok(r) => r,
            Err(e) => {
                failure = Some(e);
                stop = StopReason::Failed;
                break;
            }
        };
        let est: f64 = ind.iter().map(|i| i.estimator_sq).sum();
        let osc: f64 = ind.iter().map(|i| i.oscillation_sq).sum();
        let tau_z: Vec<f64> = ind.iter().map(|i| (i.estimator_sq + i.oscillation_sq).sqrt()).collect();
        let error = exact_error(&mesh, &v, f.as_ref(), u.as_ref(), params.d_s);
        let tau = (est + osc).sqrt();
        records.push(IterationRecord {
            iter,
            n_base_elems: trace_elements(&mesh),
            n_cyl_cells: mesh.num_elements(),
            dofs,
            m: 0,
            y: cfg.height,
            error,
            estimator: est.sqrt(),
            oscillation: osc.sqrt(),
            tau,
            effectivity: if error > 0.0 { tau / error } else { f64::NAN },
            aspect_bottom_mean: f64::NAN,
            mesh_cond_worst: f64::NAN,
            solver_iters: info.iterations,
            wall_ms: elapsed_ms(),
        });
        let marking = match dorfler_select(&tau_z, cfg.theta) {
            Ok(m) => m,
            Err(e) => {
                failure = Some(e);
                stop = StopReason::Failed;
                break;
            }
        };
        if marking.converged {
            stop = StopReason::Converged;
            break;
        }
        let mut elements: Vec<usize> =
            marking.selected.iter().flat_map(|&z| mesh.vertex_elements(z).iter().copied()).collect();
        elements.sort_unstable();
        elements.dedup();
        let refined = mesh.bisect(&elements);
        let free = (0..refined.num_vertices())
            .filter(|&w| !refined.is_boundary(w) || on_bottom(refined.coord(w)))
            .count();
        if free > cfg.dof_budget {
            stop = StopReason::BudgetReached;
            break;
        }
        if iter + 1 == cfg.max_iterations {
            break;
        }
        previous = Some(v);
        mesh = refined;
    }
    Ok(IsotropicOutcome { records, stop, failure, final_mesh: Some(mesh) })
}
