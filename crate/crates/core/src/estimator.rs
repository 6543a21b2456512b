//! Star-based a posteriori error estimator.
//!
//! For every base vertex `z'` a local problem is posed on the column
//! `S_z' x (0, Y)` in an enriched space (quadratics, optionally with cubic
//! bubbles, in x'; quadratics in y) that vanishes on the column boundary
//! except on the bottom face. The local operator is again a Kronecker sum
//! `Sx (x) My + Mx (x) Sy`; it is solved exactly by diagonalizing the small
//! x-pencil `(Sx, Mx)` and then factoring one pentadiagonal y-system per
//! mode.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::{pcg, BandedCholesky, SpdOperator};
use crate::mesh::{BaseMesh, CylinderMesh, Star};
use crate::quadrature::{simplex_rule, SimplexRule};
use crate::system::DiscreteField;
use crate::weighted::{
    local_edges, sample, weighted_moment, DataFn, FractionalParams, LocalSpace, XBasisKind,
    XReference, YElement,
};

/// Default exactness degree of every data integral in the estimator.
pub const DATA_DEGREE: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorOptions {
    pub space: LocalSpace,
    pub data_degree: usize,
    /// Add the flux oscillation to the total indicator. Defaults to true only
    /// for the plain quadratic space, which lacks the bubble enrichment.
    pub include_flux: bool,
}

impl EstimatorOptions {
    pub fn new(space: LocalSpace) -> Self {
        Self { space, data_degree: DATA_DEGREE, include_flux: space == LocalSpace::P2 }
    }
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self::new(LocalSpace::P2Bubble)
    }
}

/// Quadratic y-matrices on the whole partition, nodes `0..=2M`
/// (even: partition nodes, odd: interval midpoints), pentadiagonal.
#[derive(Debug, Clone)]
pub struct YQuadratic {
    n: usize,
    mass: Vec<[f64; 5]>,
    stiff: Vec<[f64; 5]>,
    elem_stiff: Vec<[[f64; 3]; 3]>,
}

impl YQuadratic {
    pub fn new(nodes: &[f64], alpha: f64) -> Self {
        let m = nodes.len() - 1;
        let n = 2 * m + 1;
        let mut mass = vec![[0.0; 5]; n];
        let mut stiff = vec![[0.0; 5]; n];
        let mut elem_stiff = Vec::with_capacity(m);
        for i in 0..m {
            let e = YElement::new(nodes[i], nodes[i + 1] - nodes[i], alpha, 2);
            elem_stiff.push(e.stiff);
            // local order (bottom, middle, top) -> global 2i, 2i+1, 2i+2
            for p in 0..3 {
                for q in 0..3 {
                    let (r, c) = (2 * i + p, 2 * i + q);
                    mass[r][2 + c - r] += e.mass[p][q];
                    stiff[r][2 + c - r] += e.stiff[p][q];
                }
            }
        }
        Self { n, mass, stiff, elem_stiff }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn mass(&self, i: usize, j: usize) -> f64 {
        band_get(&self.mass, i, j)
    }

    pub fn stiff(&self, i: usize, j: usize) -> f64 {
        band_get(&self.stiff, i, j)
    }

    /// Stiffness product assembled element by element from differences
    /// against the element's bottom value; near `y = 0` the entries are
    /// large and the plain banded product loses most digits.
    fn apply_stiff(&self, x: &[f64], y: &mut [f64]) {
        y[..self.n].fill(0.0);
        for (i, k) in self.elem_stiff.iter().enumerate() {
            let base = x[2 * i];
            let d = [0.0, x[2 * i + 1] - base, x[2 * i + 2] - base];
            for p in 0..3 {
                y[2 * i + p] += k[p][1] * d[1] + k[p][2] * d[2];
            }
        }
    }

    fn apply(band: &[[f64; 5]], x: &[f64], y: &mut [f64]) {
        let n = band.len();
        for i in 0..n {
            let mut acc = 0.0;
            for (o, b) in band[i].iter().enumerate() {
                let j = i as isize + o as isize - 2;
                if j >= 0 && (j as usize) < n {
                    acc += b * x[j as usize];
                }
            }
            y[i] = acc;
        }
    }
}

fn band_get(band: &[[f64; 5]], i: usize, j: usize) -> f64 {
    if i.abs_diff(j) > 2 {
        0.0
    } else {
        band[i][2 + j - i]
    }
}

const LOCAL_TOL: f64 = 1e-12;
const LOCAL_MAX_ITER: usize = 200;

/// `mu My + Sy` on the free y-dofs (all but the top node). The product is
/// exact in the sense of [`YQuadratic::apply_stiff`]; the assembled band is
/// only used as a preconditioner, because on strongly graded partitions its
/// bottom entries are many orders above the Schur complements and a direct
/// factorization of it is meaningless.
struct YModeOperator<'a> {
    yq: &'a YQuadratic,
    mu: f64,
    chol: BandedCholesky,
    scratch: std::cell::RefCell<(Vec<f64>, Vec<f64>)>,
}

impl<'a> YModeOperator<'a> {
    fn new(yq: &'a YQuadratic, mu: f64) -> Result<Self> {
        let ny = yq.len() - 1;
        // eliminated from the Dirichlet top downwards; any pivot lost to
        // cancellation is restored to a small fraction of the diagonal
        let rev = |p: usize| ny - 1 - p;
        let entry = |p: usize, q: usize| mu * yq.mass(rev(p), rev(q)) + yq.stiff(rev(p), rev(q));
        let chol = BandedCholesky::factor(ny, 2.min(ny - 1), entry).or_else(|_| {
            BandedCholesky::factor(ny, 2.min(ny - 1), |p, q| {
                if p == q {
                    entry(p, q) * (1.0 + 1e-8)
                } else {
                    entry(p, q)
                }
            })
        })?;
        let n = yq.len();
        Ok(Self { yq, mu, chol, scratch: std::cell::RefCell::new((vec![0.0; n], vec![0.0; n])) })
    }
}

impl SpdOperator for YModeOperator<'_> {
    fn dim(&self) -> usize {
        self.yq.len() - 1
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let ny = self.dim();
        let mut guard = self.scratch.borrow_mut();
        let (ext, out) = &mut *guard;
        ext[..ny].copy_from_slice(x);
        ext[ny] = 0.0;
        self.yq.apply_stiff(ext, out);
        YQuadratic::apply(&self.yq.mass[..ny], x, y);
        for l in 0..ny {
            y[l] = self.mu * y[l] + out[l];
        }
    }

    fn precondition(&self, r: &[f64], z: &mut [f64]) {
        z.iter_mut().zip(r.iter().rev()).for_each(|(a, b)| *a = *b);
        self.chol.solve(z);
        z.reverse();
    }
}

/// A local x-dof of the star space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum XDof {
    Vertex(usize),
    Edge(usize, usize),
    Bubble(usize),
}

/// Local problem of one cylindrical star, solved.
#[derive(Debug, Clone)]
pub struct StarProblem {
    pub star: Star,
    /// All x-dofs touching the star.
    pub x_dofs: Vec<XDof>,
    /// Indices into `x_dofs` of the unconstrained ones.
    pub free: Vec<usize>,
    /// x-matrices over all x-dofs.
    pub sx: DMatrix<f64>,
    pub mx: DMatrix<f64>,
    /// Free y-nodes (the top node is constrained).
    pub ny: usize,
    /// Residual load on free dofs, index `a * ny + l` for free x-dof `a`.
    pub load: Vec<f64>,
    /// Local solution on free dofs.
    pub eta: Vec<f64>,
    energy_sq: f64,
}

/// Shared data for all stars of one mesh.
pub struct StarContext<'a> {
    pub mesh: &'a CylinderMesh,
    pub params: FractionalParams,
    pub kind: XBasisKind,
    pub yq: YQuadratic,
    pub rule: SimplexRule,
}

impl<'a> StarContext<'a> {
    pub fn new(
        mesh: &'a CylinderMesh,
        params: FractionalParams,
        space: LocalSpace,
        data_degree: usize,
    ) -> Result<Self> {
        let kind = space.x_kind(mesh.base.dim())?;
        Ok(Self {
            mesh,
            params,
            kind,
            yq: YQuadratic::new(mesh.ypart.nodes(), params.alpha),
            rule: simplex_rule(mesh.base.dim(), data_degree),
        })
    }
}

/// Local x-dof indices of each basis function of element `k`.
fn element_dofs(base: &BaseMesh, k: usize, kind: XBasisKind) -> Vec<XDof> {
    let el = base.element(k);
    let mut out: Vec<XDof> = el.iter().map(|&v| XDof::Vertex(v)).collect();
    if kind != XBasisKind::P1 {
        for &(a, b) in local_edges(base.dim()) {
            let (p, q) = (el[a].min(el[b]), el[a].max(el[b]));
            out.push(XDof::Edge(p, q));
        }
    }
    if kind == XBasisKind::P2Bubble && base.dim() == 2 {
        out.push(XDof::Bubble(k));
    }
    out
}

impl StarProblem {
    /// Assembles and solves the local problem around base vertex `center`.
    pub fn solve(ctx: &StarContext, center: usize, v: &DiscreteField, f: &DataFn) -> Result<Self> {
        let mesh = ctx.mesh;
        let base = &mesh.base;
        let star = Star::new(base, center);
        let reference = XReference::get(base.dim(), ctx.kind);

        // enumerate x-dofs
        let mut index: HashMap<XDof, usize> = HashMap::new();
        let mut x_dofs = Vec::new();
        let mut edge_count: HashMap<XDof, usize> = HashMap::new();
        let mut maps = Vec::with_capacity(star.len());
        for &k in &star.elements {
            let dofs = element_dofs(base, k, ctx.kind);
            let map: Vec<usize> = dofs
                .iter()
                .map(|d| {
                    if let XDof::Edge(..) = d {
                        *edge_count.entry(*d).or_insert(0) += 1;
                    }
                    *index.entry(*d).or_insert_with(|| {
                        x_dofs.push(*d);
                        x_dofs.len() - 1
                    })
                })
                .collect();
            maps.push(map);
        }
        let free: Vec<usize> = (0..x_dofs.len())
            .filter(|&i| match x_dofs[i] {
                XDof::Vertex(w) => w == center && !base.is_boundary(center),
                XDof::Edge(a, b) => {
                    base.dim() == 1 || ((a == center || b == center) && edge_count[&x_dofs[i]] == 2)
                }
                XDof::Bubble(_) => true,
            })
            .collect();

        let nx = x_dofs.len();
        let mut sx = DMatrix::zeros(nx, nx);
        let mut mx = DMatrix::zeros(nx, nx);
        let mut fx = vec![0.0; nx];
        let mut phi = vec![0.0; reference.len()];
        for (e, &k) in star.elements.iter().enumerate() {
            let (mk, sk) = reference.element_matrices(base, k);
            let map = &maps[e];
            for p in 0..map.len() {
                for q in 0..map.len() {
                    sx[(map[p], map[q])] += sk[(p, q)];
                    mx[(map[p], map[q])] += mk[(p, q)];
                }
            }
            let vol = base.measure(k);
            for (l, w) in ctx.rule.bary.iter().zip(&ctx.rule.weights) {
                let fv = sample(f, base.point(k, l), base.dim())?;
                if fv == 0.0 {
                    continue;
                }
                reference.eval(l, &mut phi);
                for p in 0..map.len() {
                    fx[map[p]] += ctx.params.d_s * vol * w * fv * phi[p];
                }
            }
        }

        // discrete solution interpolated into the quadratic space
        let nyq = ctx.yq.len();
        let ny = nyq - 1;
        let mcount = mesh.m();
        let column = |w: usize| -> Vec<f64> {
            let mut c = vec![0.0; nyq];
            for i in 0..=mcount {
                c[2 * i] = v.at(w, i);
            }
            for i in 0..mcount {
                c[2 * i + 1] = 0.5 * (c[2 * i] + c[2 * i + 2]);
            }
            c
        };
        let mut xv: Vec<Vec<f64>> = Vec::with_capacity(nx);
        for d in &x_dofs {
            xv.push(match *d {
                XDof::Vertex(w) => column(w),
                XDof::Edge(a, b) => {
                    let (ca, cb) = (column(a), column(b));
                    ca.iter().zip(&cb).map(|(p, q)| 0.5 * (p + q)).collect()
                }
                XDof::Bubble(_) => vec![0.0; nyq],
            });
        }
        let mut vm = vec![vec![0.0; nyq]; nx];
        let mut vs = vec![vec![0.0; nyq]; nx];
        for b in 0..nx {
            YQuadratic::apply(&ctx.yq.mass, &xv[b], &mut vm[b]);
            ctx.yq.apply_stiff(&xv[b], &mut vs[b]);
        }
        let nf = free.len();
        let mut load = vec![0.0; nf * ny];
        for (ai, &a) in free.iter().enumerate() {
            let row = &mut load[ai * ny..(ai + 1) * ny];
            row[0] = fx[a];
            for b in 0..nx {
                let (s, q) = (sx[(a, b)], mx[(a, b)]);
                if s == 0.0 && q == 0.0 {
                    continue;
                }
                for l in 0..ny {
                    row[l] -= s * vm[b][l] + q * vs[b][l];
                }
            }
        }

        let mut sp = StarProblem {
            star,
            x_dofs,
            free,
            sx,
            mx,
            ny,
            load,
            eta: vec![0.0; nf * ny],
            energy_sq: 0.0,
        };
        if nf > 0 {
            sp.solve_modes(ctx)?;
        }
        Ok(sp)
    }

    fn solve_modes(&mut self, ctx: &StarContext) -> Result<()> {
        let nf = self.free.len();
        let ny = self.ny;
        let singular = || Error::SingularLocal { node: self.star.center };
        let sxf = DMatrix::from_fn(nf, nf, |i, j| self.sx[(self.free[i], self.free[j])]);
        let mxf = DMatrix::from_fn(nf, nf, |i, j| self.mx[(self.free[i], self.free[j])]);
        // Sx v = mu Mx v through C = L^-1 Sx L^-T
        let chol = mxf.cholesky().ok_or_else(singular)?;
        let l = chol.l();
        let linv = l.clone().try_inverse().ok_or_else(singular)?;
        let c = &linv * &sxf * linv.transpose();
        let c = (&c + c.transpose()) * 0.5;
        let eig = SymmetricEigen::new(c);
        // modes V = L^-T Q with V^T Mx V = I, V^T Sx V = diag(mu)
        let modes = linv.transpose() * &eig.eigenvectors;

        // project the load: R~_j = sum_a V[a, j] R[a, :]
        let mut eta = vec![0.0; nf * ny];
        let mut energy = 0.0;
        let mut rj = vec![0.0; ny];
        for j in 0..nf {
            let mu = eig.eigenvalues[j].max(0.0);
            for (l, r) in rj.iter_mut().enumerate() {
                *r = (0..nf).map(|a| modes[(a, j)] * self.load[a * ny + l]).sum();
            }
            let mode = YModeOperator::new(&ctx.yq, mu)?;
            let mut xi = vec![0.0; ny];
            pcg(&mode, &rj, &mut xi, LOCAL_TOL, LOCAL_MAX_ITER).map_err(|_| singular())?;
            energy += xi.iter().zip(&rj).map(|(a, b)| a * b).sum::<f64>();
            for a in 0..nf {
                let va = modes[(a, j)];
                for l in 0..ny {
                    eta[a * ny + l] += va * xi[l];
                }
            }
        }
        self.eta = eta;
        self.energy_sq = energy.max(0.0);
        Ok(())
    }

    /// `E_z' = |||eta|||`, evaluated as `sqrt(eta^T load)`.
    pub fn indicator(&self) -> f64 {
        self.energy_sq.sqrt()
    }

    pub fn indicator_sq(&self) -> f64 {
        self.energy_sq
    }

    /// Dense free-dof local matrix, for inspection and tests.
    pub fn dense_matrix(&self, ctx: &StarContext) -> DMatrix<f64> {
        let nf = self.free.len();
        let ny = self.ny;
        DMatrix::from_fn(nf * ny, nf * ny, |r, c| {
            let (a, l) = (self.free[r / ny], r % ny);
            let (b, k) = (self.free[c / ny], c % ny);
            self.sx[(a, b)] * ctx.yq.mass(l, k) + self.mx[(a, b)] * ctx.yq.stiff(l, k)
        })
    }
}

/// `int_K (f - mean_K f)^2` for every element, two-pass with the given rule.
pub fn element_data_deviation(base: &BaseMesh, f: &DataFn, rule: &SimplexRule) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(base.num_elements());
    let mut vals = vec![0.0; rule.len()];
    for k in 0..base.num_elements() {
        for (i, l) in rule.bary.iter().enumerate() {
            vals[i] = sample(f, base.point(k, l), base.dim())?;
        }
        let mean: f64 = vals.iter().zip(&rule.weights).map(|(v, w)| v * w).sum();
        let dev: f64 = vals
            .iter()
            .zip(&rule.weights)
            .map(|(v, w)| w * (v - mean) * (v - mean))
            .sum();
        out.push(dev * base.measure(k));
    }
    Ok(out)
}

/// `osc_z'(f) = (d_s h_z'^(2s) sum_{K in S_z'} ||f - mean_K f||^2)^(1/2)`.
pub fn oscillation_node(
    base: &BaseMesh,
    star: &Star,
    f: &DataFn,
    params: FractionalParams,
    degree: usize,
) -> Result<f64> {
    let rule = simplex_rule(base.dim(), degree);
    let mut sum = 0.0;
    let mut vals = vec![0.0; rule.len()];
    for &k in &star.elements {
        for (i, l) in rule.bary.iter().enumerate() {
            vals[i] = sample(f, base.point(k, l), base.dim())?;
        }
        let mean: f64 = vals.iter().zip(&rule.weights).map(|(v, w)| v * w).sum();
        sum += base.measure(k)
            * vals.iter().zip(&rule.weights).map(|(v, w)| w * (v - mean).powi(2)).sum::<f64>();
    }
    Ok((params.d_s * star.h.powf(2.0 * params.s) * sum).sqrt())
}

/// Squared flux oscillation `||y^a grad V - sigma||^2_{L2(y^-a)}` on each
/// base element column, with `sigma` the cellwise constant weighted average.
pub fn flux_oscillation_elements(v: &DiscreteField, alpha: f64) -> Vec<f64> {
    let mesh = &v.mesh;
    let base = &mesh.base;
    let m = mesh.m();
    let dim = base.dim();
    let ys: Vec<(YElement, f64)> = (0..m)
        .map(|i| {
            let (a, b) = mesh.ypart.interval(i);
            let inv = weighted_moment(a, b, -alpha, 0).expect("valid interval");
            (YElement::new(a, b - a, alpha, 1), inv)
        })
        .collect();
    let p1 = XReference::get(dim, XBasisKind::P1);
    let mut out = vec![0.0; base.num_elements()];
    for (k, o) in out.iter_mut().enumerate() {
        let el = base.element(k);
        let g = base.bary_gradients(k);
        let vol = base.measure(k);
        let (mk, _) = p1.element_matrices(base, k);
        let mut total = 0.0;
        for (i, (ye, inv)) in ys.iter().enumerate() {
            let h = mesh.ypart.length(i);
            let w = inv * vol;
            // x-gradient g0 l0(y) + g1 l1(y)
            let mut g0 = [0.0; 2];
            let mut g1 = [0.0; 2];
            let mut dy = vec![0.0; el.len()];
            for (a, &vtx) in el.iter().enumerate() {
                let (v0, v1) = (v.at(vtx, i), v.at(vtx, i + 1));
                for c in 0..dim {
                    g0[c] += v0 * g[a][c];
                    g1[c] += v1 * g[a][c];
                }
                dy[a] = (v1 - v0) / h;
            }
            for c in 0..dim {
                let weighted = vol
                    * (g0[c] * g0[c] * ye.mass[0][0]
                        + 2.0 * g0[c] * g1[c] * ye.mass[0][1]
                        + g1[c] * g1[c] * ye.mass[1][1]);
                let mean = vol * 0.5 * h * (g0[c] + g1[c]);
                total += (weighted - mean * mean / w).max(0.0);
            }
            // y-derivative: linear in x', constant in y
            let mut sq = 0.0;
            for a in 0..el.len() {
                for b in 0..el.len() {
                    sq += dy[a] * dy[b] * mk[(a, b)];
                }
            }
            let integral: f64 = dy.iter().sum::<f64>() * vol / (dim + 1) as f64 * h;
            let weight_y = ye.mass[0][0] + 2.0 * ye.mass[0][1] + ye.mass[1][1];
            total += (sq * weight_y - integral * integral / w).max(0.0);
        }
        *o = total;
    }
    out
}

/// Flux oscillation of one star.
pub fn oscillation_flux(star: &Star, v: &DiscreteField, alpha: f64) -> f64 {
    let per = flux_oscillation_elements(v, alpha);
    star.elements.iter().map(|&k| per[k]).sum::<f64>().sqrt()
}

/// Indicators of every base vertex plus per-element data.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorSet {
    /// `E_z'` per base vertex.
    pub estimator: Vec<f64>,
    /// `osc_z'(f)` per base vertex.
    pub oscillation: Vec<f64>,
    /// Flux oscillation per base vertex (zeros unless computed).
    pub flux_oscillation: Vec<f64>,
    /// `tau_z'` per base vertex.
    pub tau: Vec<f64>,
    /// Whether `flux_oscillation` enters `tau`.
    pub include_flux: bool,
    /// `#S_z'` per base vertex.
    pub star_sizes: Vec<usize>,
    /// `osc_K(f)^2 = d_s h_K^(2s) ||f - mean_K f||^2`.
    pub element_oscillation_sq: Vec<f64>,
    /// Flux oscillation squared per element column.
    pub element_flux_sq: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl IndicatorSet {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn estimator_total(&self) -> f64 {
        norm(&self.estimator)
    }

    /// Data oscillation, plus the flux term when it is part of `tau`.
    pub fn oscillation_total(&self) -> f64 {
        let o = norm(&self.oscillation);
        if self.include_flux {
            o.hypot(norm(&self.flux_oscillation))
        } else {
            o
        }
    }

    pub fn tau_total(&self) -> f64 {
        norm(&self.tau)
    }

    /// `tau(M) = (sum_{z' in M} tau_z'^2)^(1/2)`.
    pub fn tau_of(&self, nodes: &[usize]) -> f64 {
        nodes.iter().map(|&z| self.tau[z] * self.tau[z]).sum::<f64>().sqrt()
    }

    pub fn flux_total(&self) -> f64 {
        norm(&self.flux_oscillation)
    }
}

/// Per-element indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementIndicators {
    /// `E_K^2 = sum_{z' in K} E_z'^2 / #S_z'`.
    pub estimator_sq: Vec<f64>,
    pub oscillation_sq: Vec<f64>,
    pub tau_sq: Vec<f64>,
}

pub fn to_elementwise(ind: &IndicatorSet, base: &BaseMesh) -> ElementIndicators {
    let ne = base.num_elements();
    let mut estimator_sq = vec![0.0; ne];
    for (k, e) in estimator_sq.iter_mut().enumerate() {
        *e = base
            .element(k)
            .iter()
            .map(|&z| ind.estimator[z] * ind.estimator[z] / ind.star_sizes[z] as f64)
            .sum();
    }
    let oscillation_sq: Vec<f64> = (0..ne)
        .map(|k| {
            ind.element_oscillation_sq[k] + if ind.include_flux { ind.element_flux_sq[k] } else { 0.0 }
        })
        .collect();
    let tau_sq = estimator_sq.iter().zip(&oscillation_sq).map(|(a, b)| a + b).collect();
    ElementIndicators { estimator_sq, oscillation_sq, tau_sq }
}

/// `tau_total / error`.
pub fn effectivity(ind: &IndicatorSet, error: f64) -> Result<f64> {
    if !(error > 0.0) {
        return Err(Error::UndefinedRatio(format!("error is {error}")));
    }
    Ok(ind.tau_total() / error)
}

#[cfg(feature = "parallel")]
pub(crate) fn map_indices<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indices<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Caps the worker pool at `FRAC_AFEM_THREADS` when set. Has no effect once
/// the pool is running or without the `parallel` feature.
pub fn configure_threads_from_env() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("FRAC_AFEM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Solves every star problem and collects all indicators. Stars run in
/// parallel; results are gathered in vertex order, so the output does not
/// depend on scheduling.
pub fn estimate(
    v: &DiscreteField,
    f: &DataFn,
    params: FractionalParams,
    opts: EstimatorOptions,
) -> Result<IndicatorSet> {
    let mesh: &CylinderMesh = &v.mesh;
    let base = &mesh.base;
    let ctx = StarContext::new(mesh, params, opts.space, opts.data_degree)?;
    let nv = base.num_vertices();
    let results = map_indices(nv, |z| StarProblem::solve(&ctx, z, v, f).map(|sp| sp.indicator()));
    let estimator = results.into_iter().collect::<Result<Vec<f64>>>()?;

    let dev = element_data_deviation(base, f, &ctx.rule)?;
    let two_s = 2.0 * params.s;
    let element_oscillation_sq: Vec<f64> = (0..base.num_elements())
        .map(|k| params.d_s * base.diameter(k).powf(two_s) * dev[k])
        .collect();
    let element_flux_sq = if opts.include_flux {
        flux_oscillation_elements(v, params.alpha)
    } else {
        vec![0.0; base.num_elements()]
    };
    let mut oscillation = Vec::with_capacity(nv);
    let mut flux_oscillation = Vec::with_capacity(nv);
    let mut star_sizes = Vec::with_capacity(nv);
    for z in 0..nv {
        let star = Star::new(base, z);
        let d: f64 = star.elements.iter().map(|&k| dev[k]).sum();
        oscillation.push((params.d_s * star.h.powf(two_s) * d).sqrt());
        flux_oscillation.push(star.elements.iter().map(|&k| element_flux_sq[k]).sum::<f64>().sqrt());
        star_sizes.push(star.len());
    }
    let tau = (0..nv)
        .map(|z| {
            let mut t = estimator[z] * estimator[z] + oscillation[z] * oscillation[z];
            if opts.include_flux {
                t += flux_oscillation[z] * flux_oscillation[z];
            }
            t.sqrt()
        })
        .collect();
    Ok(IndicatorSet {
        estimator,
        oscillation,
        flux_oscillation,
        tau,
        include_flux: opts.include_flux,
        star_sizes,
        element_oscillation_sq,
        element_flux_sq,
    })
}

#[cfg(test)]
use crate::oracle;

#[cfg(test)]
mod tests {
    use super::*;
    use super::oracle;
    use crate::mesh::{Domain, YPartition};
    use crate::system::assemble;
    use crate::weighted::local_stiffness_enriched;
    use nalgebra::DVector;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn setup(
        domain: Domain,
        h: f64,
        m: usize,
        s: f64,
        f: &DataFn,
    ) -> (Arc<CylinderMesh>, FractionalParams, DiscreteField) {
        let params = FractionalParams::new(s).unwrap();
        let mesh = Arc::new(CylinderMesh::new(
            BaseMesh::build(domain, h).unwrap(),
            YPartition::graded(m, 1.5, 3.0 / (2.0 * s) + 0.1).unwrap(),
        ));
        let sys = assemble(mesh.clone(), params, f, 4).unwrap();
        let (v, _) = sys.solve(1e-12, 5000, None).unwrap();
        (mesh, params, v)
    }

    /// Dense local system assembled cell by cell from the enriched prism
    /// matrices, with an independent dof bookkeeping.
    fn dense_oracle(sp: &StarProblem, ctx: &StarContext, space: LocalSpace) -> DMatrix<f64> {
        let mesh = ctx.mesh;
        let base = &mesh.base;
        let ny = sp.ny;
        let nf = sp.free.len();
        let pos: HashMap<XDof, usize> =
            sp.free.iter().enumerate().map(|(i, &a)| (sp.x_dofs[a], i)).collect();
        let mut a = DMatrix::zeros(nf * ny, nf * ny);
        for &k in &sp.star.elements {
            let dofs = element_dofs(base, k, ctx.kind);
            for iv in 0..mesh.m() {
                let (y0, y1) = mesh.ypart.interval(iv);
                let e = local_stiffness_enriched(base, k, y0, y1, ctx.params.alpha, space).unwrap();
                for (p, dp) in dofs.iter().enumerate() {
                    for i in 0..3 {
                        let (Some(&fp), l) = (pos.get(dp), 2 * iv + i) else { continue };
                        if l >= ny {
                            continue;
                        }
                        for (q, dq) in dofs.iter().enumerate() {
                            for j in 0..3 {
                                let (Some(&fq), k2) = (pos.get(dq), 2 * iv + j) else { continue };
                                if k2 >= ny {
                                    continue;
                                }
                                a[(fp * ny + l, fq * ny + k2)] += e.stiffness[(p * 3 + i, q * 3 + j)];
                            }
                        }
                    }
                }
            }
        }
        a
    }

    #[test]
    fn local_solution_matches_dense_oracle() {
        let f: Box<DataFn> = Box::new(|p| 1.0 + (3.0 * p[0]).sin() * (1.0 + p[1]));
        for (domain, h, space) in [
            (Domain::UnitInterval, 0.25, LocalSpace::P2Bubble),
            (Domain::UnitSquare, 0.5, LocalSpace::P2Bubble),
            (Domain::LShape, 0.5, LocalSpace::P2),
        ] {
            let (mesh, params, v) = setup(domain, h, 4, 0.3, f.as_ref());
            let ctx = StarContext::new(&mesh, params, space, 7).unwrap();
            for z in 0..mesh.base.num_vertices() {
                let sp = StarProblem::solve(&ctx, z, &v, f.as_ref()).unwrap();
                if sp.free.is_empty() {
                    continue;
                }
                let a = dense_oracle(&sp, &ctx, space);
                let kron = sp.dense_matrix(&ctx);
                assert!((&a - &kron).abs().max() <= 1e-12 * a.abs().max());
                let eta = a.clone().cholesky().unwrap().solve(&DVector::from_vec(sp.load.clone()));
                let scale = eta.amax().max(1e-300);
                for i in 0..eta.len() {
                    assert!((eta[i] - sp.eta[i]).abs() <= 1e-9 * scale, "{domain:?} z={z}");
                }
                // local Galerkin identity
                let eta_v = DVector::from_vec(sp.eta.clone());
                let quad = eta_v.dot(&(&a * &eta_v));
                assert!((quad - sp.indicator_sq()).abs() <= 1e-10 * quad.max(1e-300));
            }
        }
    }

    #[test]
    fn interior_star_1d_by_hand() {
        // s = 1/2, two intervals around an interior vertex, constant data
        let f: Box<DataFn> = Box::new(|_| 1.0);
        let (mesh, params, v) = setup(Domain::UnitInterval, 0.5, 1, 0.5, f.as_ref());
        let ctx = StarContext::new(&mesh, params, LocalSpace::P2Bubble, 7).unwrap();
        let sp = StarProblem::solve(&ctx, 1, &v, f.as_ref()).unwrap();
        // free x-dofs: the center and both interval midpoints; free y-nodes 0, 1
        assert_eq!(sp.free.len(), 3);
        assert_eq!(sp.ny, 2);
        let a = sp.dense_matrix(&ctx);
        let eta = a.cholesky().unwrap().solve(&DVector::from_vec(sp.load.clone()));
        for i in 0..eta.len() {
            assert!((eta[i] - sp.eta[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_data_zero_indicators() {
        let zero: Box<DataFn> = Box::new(|_| 0.0);
        let (mesh, params, v) = setup(Domain::LShape, 0.5, 4, 0.4, zero.as_ref());
        let ind = estimate(&v, zero.as_ref(), params, EstimatorOptions::new(LocalSpace::P2)).unwrap();
        assert_eq!(ind.len(), mesh.base.num_vertices());
        assert!(ind.tau.iter().all(|&t| t == 0.0));
        assert!(ind.flux_oscillation.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn scaling_is_linear() {
        let f: Box<DataFn> = Box::new(|p| (PI * p[0]).sin() * (PI * p[1]).sin() + p[0]);
        let g: Box<DataFn> = Box::new(|p| 3.0 * ((PI * p[0]).sin() * (PI * p[1]).sin() + p[0]));
        let (_, params, v) = setup(Domain::UnitSquare, 0.25, 5, 0.6, f.as_ref());
        let (_, _, w) = setup(Domain::UnitSquare, 0.25, 5, 0.6, g.as_ref());
        let opts = EstimatorOptions { include_flux: true, ..EstimatorOptions::default() };
        let a = estimate(&v, f.as_ref(), params, opts).unwrap();
        let b = estimate(&w, g.as_ref(), params, opts).unwrap();
        for z in 0..a.len() {
            assert!((3.0 * a.estimator[z] - b.estimator[z]).abs() <= 1e-9 * b.estimator[z].max(1e-12));
            assert!((3.0 * a.oscillation[z] - b.oscillation[z]).abs() <= 1e-12 * b.oscillation[z].max(1e-12));
            assert!((3.0 * a.tau[z] - b.tau[z]).abs() <= 1e-9 * b.tau[z].max(1e-12));
        }
    }

    #[test]
    fn tau_identities() {
        let f: Box<DataFn> = Box::new(|p| 1.0 + p[0] * p[1]);
        let (mesh, params, v) = setup(Domain::LShape, 0.5, 4, 0.8, f.as_ref());
        for opts in [EstimatorOptions::new(LocalSpace::P2Bubble), EstimatorOptions::new(LocalSpace::P2)] {
            let ind = estimate(&v, f.as_ref(), params, opts).unwrap();
            for z in 0..ind.len() {
                let mut t2 = ind.estimator[z].powi(2) + ind.oscillation[z].powi(2);
                if opts.include_flux {
                    t2 += ind.flux_oscillation[z].powi(2);
                }
                assert!((ind.tau[z].powi(2) - t2).abs() <= 1e-14 * t2.max(1e-300));
            }
            let total = ind.tau_total();
            let parts = ind.estimator_total().hypot(ind.oscillation_total());
            assert!((total - parts).abs() <= 1e-12 * total);
            let all: Vec<usize> = (0..ind.len()).collect();
            assert!((ind.tau_of(&all) - total).abs() <= 1e-12 * total);
            let el = to_elementwise(&ind, &mesh.base);
            let e_sum: f64 = el.estimator_sq.iter().sum();
            assert!((e_sum - ind.estimator_total().powi(2)).abs() <= 1e-12 * e_sum);
        }
    }

    #[test]
    fn elementwise_shares_single_interval() {
        let base = BaseMesh::build(Domain::UnitInterval, 1.0).unwrap();
        let ind = IndicatorSet {
            estimator: vec![2.0, 3.0],
            oscillation: vec![0.0; 2],
            flux_oscillation: vec![0.0; 2],
            tau: vec![2.0, 3.0],
            include_flux: false,
            star_sizes: vec![1, 1],
            element_oscillation_sq: vec![0.0],
            element_flux_sq: vec![0.0],
        };
        assert_eq!(to_elementwise(&ind, &base).estimator_sq, vec![13.0]);
    }

    #[test]
    fn elementwise_shares_criss_cross() {
        let base = BaseMesh::from_raw(
            2,
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]],
            vec![vec![0, 1, 4], vec![1, 2, 4], vec![2, 3, 4], vec![3, 0, 4]],
            None,
        )
        .unwrap();
        // corners sit in two triangles, the center in four
        let e = vec![1.0, 2.0, 3.0, 4.0, 8.0];
        let ind = IndicatorSet {
            estimator: e.clone(),
            oscillation: vec![0.0; 5],
            flux_oscillation: vec![0.0; 5],
            tau: e,
            include_flux: false,
            star_sizes: (0..5).map(|z| Star::new(&base, z).len()).collect(),
            element_oscillation_sq: vec![0.0; 4],
            element_flux_sq: vec![0.0; 4],
        };
        let el = to_elementwise(&ind, &base);
        // triangle (0, 1, 4): 1/2 + 4/2 + 64/4
        let k = (0..4).find(|&k| {
            let mut v = base.element(k).to_vec();
            v.sort();
            v == vec![0, 1, 4]
        });
        assert!((el.estimator_sq[k.unwrap()] - 18.5).abs() < 1e-14);
        let total: f64 = el.estimator_sq.iter().sum();
        assert!((total - (1.0 + 4.0 + 9.0 + 16.0 + 64.0)).abs() < 1e-12);
    }

    #[test]
    fn effectivity_rules() {
        let ind = IndicatorSet {
            estimator: vec![3.0],
            oscillation: vec![4.0],
            flux_oscillation: vec![0.0],
            tau: vec![5.0],
            include_flux: false,
            star_sizes: vec![1],
            element_oscillation_sq: vec![],
            element_flux_sq: vec![],
        };
        assert_eq!(effectivity(&ind, 5.0).unwrap(), 1.0);
        assert!(matches!(effectivity(&ind, 0.0), Err(Error::UndefinedRatio(_))));
    }

    #[test]
    fn data_oscillation_examples() {
        let base = BaseMesh::build(Domain::UnitInterval, 0.25).unwrap();
        let params = FractionalParams::new(0.3).unwrap();
        let pc: Box<DataFn> = Box::new(|p| if p[0] < 0.5 { 1.0 } else { -2.0 });
        for z in 0..base.num_vertices() {
            let star = Star::new(&base, z);
            assert!(oscillation_node(&base, &star, pc.as_ref(), params, 7).unwrap() < 1e-14);
        }
        // f = x on [0, h]: ||x - h/2||^2 = h^3 / 12
        let lin: Box<DataFn> = Box::new(|p| p[0]);
        let star = Star::new(&base, 0);
        let h: f64 = 0.25;
        let o = oscillation_node(&base, &star, lin.as_ref(), params, 7).unwrap();
        let expect = (params.d_s * h.powf(0.6) * h.powi(3) / 12.0).sqrt();
        assert!((o - expect).abs() < 1e-14);
    }

    #[test]
    fn data_oscillation_order() {
        // for smooth data the node oscillation decays like h^(s+1) in 1D
        let params = FractionalParams::new(0.4).unwrap();
        let f: Box<DataFn> = Box::new(|p| (3.0 * p[0]).exp());
        let mut prev: Option<f64> = None;
        let mut orders = Vec::new();
        let mut base = BaseMesh::build(Domain::UnitInterval, 0.125).unwrap();
        for _ in 0..4 {
            let z = (0..base.num_vertices())
                .find(|&z| (base.coord(z)[0] - 0.5).abs() < 1e-12)
                .unwrap();
            let o = oscillation_node(&base, &Star::new(&base, z), f.as_ref(), params, 7).unwrap();
            if let Some(p) = prev {
                orders.push((p / o).log2());
            }
            prev = Some(o);
            base = base.refine_uniform(1);
        }
        // ||f - mean||_{L2(S)} ~ h^(3/2) in 1D, times h^s
        let last = *orders.last().unwrap();
        assert!((last - (params.s + 1.5)).abs() < 0.05, "{orders:?}");
    }

    #[test]
    fn flux_oscillation_examples() {
        let zero: Box<DataFn> = Box::new(|_| 0.0);
        let (mesh, _, v) = setup(Domain::UnitSquare, 0.5, 3, 0.5, zero.as_ref());
        let star = Star::new(&mesh.base, 0);
        assert_eq!(oscillation_flux(&star, &v, 0.0), 0.0);
        // a field linear in x', constant in y, alpha = 0: constant flux
        let mut w = DiscreteField::zeros(mesh.clone());
        for node in 0..mesh.num_nodes() {
            let (vx, _) = mesh.node(node);
            let [x, y] = mesh.base.coord(vx);
            w.values[node] = 2.0 * x - y;
        }
        for z in 0..mesh.base.num_vertices() {
            let star = Star::new(&mesh.base, z);
            assert!(oscillation_flux(&star, &w, 0.0) < 1e-12);
        }
    }

    #[test]
    fn flux_oscillation_matches_quadrature() {
        // direct evaluation of ||y^a dV - sigma||^2_{y^-a} on one cell
        let alpha = -0.6;
        let mesh = Arc::new(CylinderMesh::new(
            BaseMesh::build(Domain::UnitInterval, 1.0).unwrap(),
            YPartition::from_nodes(vec![0.0, 0.3, 1.0]).unwrap(),
        ));
        let mut v = DiscreteField::zeros(mesh.clone());
        v.values = vec![1.0, 0.5, -0.2, 2.0, -1.0, 0.7];
        let per = flux_oscillation_elements(&v, alpha);
        let mut expect = 0.0;
        for i in 0..2 {
            let (y0, y1) = mesh.ypart.interval(i);
            let (a0, a1) = (v.at(0, i), v.at(0, i + 1));
            let (b0, b1) = (v.at(1, i), v.at(1, i + 1));
            let hy = y1 - y0;
            let vx = |y: f64| {
                let t = (y - y0) / hy;
                (b0 - a0) * (1.0 - t) + (b1 - a1) * t
            };
            let vy = |x: f64| ((1.0 - x) * (a1 - a0) + x * (b1 - b0)) / hy;
            let ix = 0.5 * hy * ((b0 - a0) + (b1 - a1));
            let wsum = oracle::weighted_integral(|_| 1.0, y0, y1, -alpha);
            let sx2 = oracle::weighted_integral(|y| vx(y) * vx(y), y0, y1, alpha);
            let wy = oracle::weighted_integral(|_| 1.0, y0, y1, alpha);
            let n = 4000;
            let (mut iyx, mut sqx) = (0.0, 0.0);
            for jx in 0..n {
                let x = (jx as f64 + 0.5) / n as f64;
                iyx += vy(x) / n as f64;
                sqx += vy(x) * vy(x) / n as f64;
            }
            let iy = iyx * hy;
            let sy2 = sqx * wy;
            expect += sx2 - ix * ix / wsum + sy2 - iy * iy / wsum;
        }
        assert!((per[0] - expect).abs() < 1e-6 * expect, "{} vs {expect}", per[0]);
    }
}
