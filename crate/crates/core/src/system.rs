//! Global discretization of the truncated extension problem with P1 x P1
//! elements on a cylinder mesh.
//!
//! The stiffness matrix has the Kronecker-sum form `A = Sx (x) My + Mx (x) Sy`,
//! where `Sx, Mx` are the P1 stiffness and mass matrices of the base mesh and
//! `My, Sy` the weighted mass and stiffness of the y-partition. It is stored
//! through these factors; element-by-element summation of the prism matrices
//! gives the same entries.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{self, BandedCholesky, Csr, SolveInfo, SpdOperator, Tridiagonal};
use crate::mesh::CylinderMesh;
use crate::quadrature::simplex_rule;
use crate::weighted::{sample, trace_load, DataFn, FractionalParams, XBasisKind, XReference, YElement};

/// Systems below this size are factored directly.
pub const DIRECT_SOLVE_LIMIT: usize = 2000;

/// Coefficients of a P1 x P1 function on every tensor node of a cylinder mesh;
/// Dirichlet nodes hold exact zeros.
#[derive(Debug, Clone)]
pub struct DiscreteField {
    pub mesh: Arc<CylinderMesh>,
    pub values: Vec<f64>,
}

impl DiscreteField {
    pub fn zeros(mesh: Arc<CylinderMesh>) -> Self {
        let n = mesh.num_nodes();
        Self { mesh, values: vec![0.0; n] }
    }

    /// Value at base vertex `v`, level `l`.
    pub fn at(&self, v: usize, l: usize) -> f64 {
        self.values[self.mesh.node_id(v, l)]
    }

    /// Trace on `y = 0` as base-vertex values.
    pub fn trace(&self) -> Vec<f64> {
        (0..self.mesh.base.num_vertices()).map(|v| self.at(v, 0)).collect()
    }

    /// Point evaluation of the y-profile above base vertex `v`.
    pub fn column_value(&self, v: usize, y: f64) -> f64 {
        interp_column(self.mesh.ypart.nodes(), |l| self.at(v, l), y)
    }

    /// Transfers to a mesh whose base refines this one by bisection and whose
    /// truncation height is at least as large. Base values are interpolated
    /// through the recorded parent edges and columns linearly in `y`; above
    /// the old height the field vanishes. Exact whenever the spaces are nested.
    pub fn prolongate(&self, target: Arc<CylinderMesh>) -> Result<DiscreteField> {
        check_nested(&self.mesh, &target)?;
        let nv_old = self.mesh.base.num_vertices();
        let nv = target.base.num_vertices();
        let old_nodes = self.mesh.ypart.nodes();
        let m_new = target.m();
        // columns of the old field, then extended vertex-by-vertex
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(nv);
        for v in 0..nv_old {
            let col: Vec<f64> = (0..=self.mesh.m()).map(|l| self.at(v, l)).collect();
            columns.push(col);
        }
        for v in nv_old..nv {
            let (a, b) = target.base.parent_edge(v).ok_or_else(|| {
                Error::ContractViolation(format!("vertex {v} has no parent edge"))
            })?;
            let col: Vec<f64> =
                columns[a].iter().zip(&columns[b]).map(|(x, y)| 0.5 * (x + y)).collect();
            columns.push(col);
        }
        let mut out = DiscreteField::zeros(target.clone());
        for v in 0..nv {
            if target.base.is_boundary(v) {
                continue;
            }
            for (l, &y) in target.ypart.nodes()[..m_new].iter().enumerate() {
                let id = target.node_id(v, l);
                out.values[id] = interp_column(old_nodes, |k| columns[v][k], y);
            }
        }
        Ok(out)
    }
}

fn interp_column(nodes: &[f64], value: impl Fn(usize) -> f64, y: f64) -> f64 {
    let top = nodes[nodes.len() - 1];
    if y >= top {
        return 0.0;
    }
    let i = match nodes.binary_search_by(|p| p.total_cmp(&y)) {
        Ok(i) => return value(i),
        Err(i) => i - 1,
    };
    let t = (y - nodes[i]) / (nodes[i + 1] - nodes[i]);
    (1.0 - t) * value(i) + t * value(i + 1)
}

/// Checks that `fine` refines `coarse`: same dimension, the coarse vertices
/// are a prefix of the fine ones, and the fine cylinder is at least as tall.
pub fn check_nested(coarse: &CylinderMesh, fine: &CylinderMesh) -> Result<()> {
    let (cb, fb) = (&coarse.base, &fine.base);
    if cb.dim() != fb.dim() {
        return Err(Error::ContractViolation("meshes of different dimension".into()));
    }
    if cb.num_vertices() > fb.num_vertices()
        || (0..cb.num_vertices()).any(|v| cb.coord(v) != fb.coord(v))
    {
        return Err(Error::ContractViolation(
            "the fine base mesh does not extend the coarse one".into(),
        ));
    }
    if fine.ypart.height() < coarse.ypart.height() {
        return Err(Error::ContractViolation(
            "the fine cylinder is shorter than the coarse one".into(),
        ));
    }
    Ok(())
}

/// Free-dof system of the truncated problem. Free dof `i * M + l` is level
/// `l < M` above the `i`-th interior base vertex.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub mesh: Arc<CylinderMesh>,
    pub params: FractionalParams,
    /// Interior base vertices in free-dof order.
    pub free_vertices: Vec<usize>,
    /// Base vertex -> position in `free_vertices` (`usize::MAX` on the boundary).
    pub vertex_index: Vec<usize>,
    /// P1 stiffness of the base mesh on interior vertices.
    pub sx: Csr,
    /// P1 mass of the base mesh on interior vertices (same pattern as `sx`).
    pub mx: Csr,
    my: Band3,
    sy: WeightedLaplacian,
    pub rhs: Vec<f64>,
    lines: Vec<Tridiagonal>,
}

/// Symmetric tridiagonal matrix on levels `0..M`.
#[derive(Debug, Clone)]
struct Band3 {
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl Band3 {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.diag.len();
        for l in 0..n {
            let mut v = self.diag[l] * x[l];
            if l > 0 {
                v += self.off[l - 1] * x[l - 1];
            }
            if l + 1 < n {
                v += self.off[l] * x[l + 1];
            }
            y[l] = v;
        }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        match i.abs_diff(j) {
            0 => self.diag[i],
            1 => self.off[i.min(j)],
            _ => 0.0,
        }
    }
}

/// Weighted P1 stiffness in y on levels `0..M`, the top level being
/// Dirichlet. Stored as the interval weights `k_i = int_{I_i} y^alpha / h_i^2`
/// and applied through differences, which stays accurate on graded
/// partitions where the entries near `y = 0` are huge and nearly cancel.
#[derive(Debug, Clone)]
struct WeightedLaplacian {
    k: Vec<f64>,
}

impl WeightedLaplacian {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let m = self.k.len();
        for l in 0..m {
            let up = if l + 1 < m { x[l + 1] } else { 0.0 };
            let mut v = self.k[l] * (x[l] - up);
            if l > 0 {
                v += self.k[l - 1] * (x[l] - x[l - 1]);
            }
            y[l] = v;
        }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        match i.abs_diff(j) {
            0 => self.k[i] + if i > 0 { self.k[i - 1] } else { 0.0 },
            1 => -self.k[i.min(j)],
            _ => 0.0,
        }
    }
}

/// Factor of the line matrix `s My + q Sy`, eliminated from the top level
/// down. The pivots are accumulated as sums of positive pieces (mass row sums
/// and series combinations of the coupling with the part already
/// eliminated) rather than as `diag - off^2 / pivot`, which near `y = 0`
/// subtracts numbers many orders larger than the result.
fn line_factor(s: f64, q: f64, k: &[f64], mass: &[[f64; 3]]) -> Tridiagonal {
    let m = k.len();
    let below = |l: usize| -> (f64, f64) {
        // stiffness and mass parts of the coupling to level l - 1
        if l == 0 {
            (0.0, 0.0)
        } else {
            (q * k[l - 1], s * mass[l - 1][2])
        }
    };
    let mut d = vec![0.0; m];
    let mut mult = vec![0.0; m.saturating_sub(1)];
    let (kb, mb) = below(m - 1);
    d[m - 1] = kb + mb + s * mass[m - 1][0] + q * k[m - 1];
    // e: pivot of the level just eliminated minus its coupling to the
    // current level, again formed without subtraction
    let mut e = if m >= 2 {
        s * (mass[m - 2][1] + mass[m - 2][2] + mass[m - 1][0]) + q * k[m - 1]
    } else {
        d[0]
    };
    for l in (0..m.saturating_sub(1)).rev() {
        let c = q * k[l] - s * mass[l][1];
        let g = c * e / (c + e);
        let (kb, mb) = below(l);
        d[l] = kb + mb + s * (mass[l][0] + mass[l][1]) + g;
        mult[l] = -c / d[l + 1];
        e = if l == 0 {
            d[0]
        } else {
            s * (mass[l - 1][1] + mass[l - 1][2] + mass[l][0] + mass[l][1]) + g
        };
    }
    Tridiagonal::from_factors(d, mult)
}

/// Assembles the free-dof system; the load uses the degree-`load_degree`
/// simplex rule.
pub fn assemble(
    mesh: Arc<CylinderMesh>,
    params: FractionalParams,
    f: &DataFn,
    load_degree: usize,
) -> Result<AssembledSystem> {
    let base = &mesh.base;
    let m = mesh.m();
    let nv = base.num_vertices();
    let mut vertex_index = vec![usize::MAX; nv];
    let free_vertices: Vec<usize> = base.interior_vertices().collect();
    for (i, &v) in free_vertices.iter().enumerate() {
        vertex_index[v] = i;
    }
    let nf = free_vertices.len();

    let reference = XReference::get(base.dim(), XBasisKind::P1);
    let rule = simplex_rule(base.dim(), load_degree);
    let mut ts = Vec::new();
    let mut tm = Vec::new();
    let mut load = vec![0.0; nf];
    for k in 0..base.num_elements() {
        let el = base.element(k);
        let (mk, sk) = reference.element_matrices(base, k);
        let fk = trace_load(base, k, f, params.d_s, &rule)?;
        for (p, &vp) in el.iter().enumerate() {
            let i = vertex_index[vp];
            if i == usize::MAX {
                continue;
            }
            load[i] += fk[p];
            for (q, &vq) in el.iter().enumerate() {
                let j = vertex_index[vq];
                if j != usize::MAX {
                    ts.push((i, j, sk[(p, q)]));
                    tm.push((i, j, mk[(p, q)]));
                }
            }
        }
    }
    let sx = Csr::from_triplets(nf, ts);
    let mx = Csr::from_triplets(nf, tm);

    // weighted y-matrices on the free levels 0..M-1
    let mut my = Band3 { diag: vec![0.0; m], off: vec![0.0; m.saturating_sub(1)] };
    let mut sy = WeightedLaplacian { k: vec![0.0; m] };
    let mut interval_mass = Vec::with_capacity(m);
    for i in 0..m {
        let (a, b) = mesh.ypart.interval(i);
        let e = YElement::new(a, b - a, params.alpha, 1);
        interval_mass.push([e.mass[0][0], e.mass[0][1], e.mass[1][1]]);
        my.diag[i] += e.mass[0][0];
        sy.k[i] = e.stiff[0][0];
        if i + 1 < m {
            my.diag[i + 1] += e.mass[1][1];
            my.off[i] += e.mass[0][1];
        }
    }

    let mut rhs = vec![0.0; nf * m];
    for i in 0..nf {
        rhs[i * m] = load[i];
    }

    let lines = (0..nf)
        .map(|i| line_factor(sx.get(i, i), mx.get(i, i), &sy.k, &interval_mass))
        .collect();

    Ok(AssembledSystem { mesh, params, free_vertices, vertex_index, sx, mx, my, sy, rhs, lines })
}

impl AssembledSystem {
    pub fn num_dofs(&self) -> usize {
        self.rhs.len()
    }

    fn m(&self) -> usize {
        self.mesh.m()
    }

    /// Entry of the free-dof matrix.
    pub fn entry(&self, r: usize, c: usize) -> f64 {
        let m = self.m();
        let (i, l) = (r / m, r % m);
        let (j, k) = (c / m, c % m);
        self.sx.get(i, j) * self.my.get(l, k) + self.mx.get(i, j) * self.sy.get(l, k)
    }

    /// Global tensor node of free dof `r`.
    pub fn dof_node(&self, r: usize) -> usize {
        let m = self.m();
        self.mesh.node_id(self.free_vertices[r / m], r % m)
    }

    /// Nonzero entries as `(row, col, value)`, row-major.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let m = self.m();
        let mut out = Vec::new();
        for i in 0..self.free_vertices.len() {
            for l in 0..m {
                for (j, _) in self.sx.row(i) {
                    for k in l.saturating_sub(1)..(l + 2).min(m) {
                        out.push((i * m + l, j * m + k, self.entry(i * m + l, j * m + k)));
                    }
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let m = self.m();
        let n = self.num_dofs();
        let mut u = vec![0.0; n];
        let mut w = vec![0.0; n];
        for i in 0..self.free_vertices.len() {
            let r = i * m..(i + 1) * m;
            self.my.apply(&x[r.clone()], &mut u[r.clone()]);
            self.sy.apply(&x[r.clone()], &mut w[r]);
        }
        for i in 0..self.free_vertices.len() {
            let yi = &mut y[i * m..(i + 1) * m];
            yi.iter_mut().for_each(|v| *v = 0.0);
            for ((j, s), (_, q)) in self.sx.row(i).zip(self.mx.row(i)) {
                let (uj, wj) = (&u[j * m..(j + 1) * m], &w[j * m..(j + 1) * m]);
                for l in 0..m {
                    yi[l] += s * uj[l] + q * wj[l];
                }
            }
        }
    }

    /// Free-dof coefficients of a field on this mesh.
    pub fn restrict(&self, field: &DiscreteField) -> Result<Vec<f64>> {
        if !Arc::ptr_eq(&field.mesh, &self.mesh) && field.values.len() != self.mesh.num_nodes() {
            return Err(Error::DimensionMismatch {
                expected: self.mesh.num_nodes(),
                found: field.values.len(),
            });
        }
        Ok((0..self.num_dofs()).map(|r| field.values[self.dof_node(r)]).collect())
    }

    pub fn expand(&self, x: &[f64]) -> DiscreteField {
        let mut f = DiscreteField::zeros(self.mesh.clone());
        for (r, &v) in x.iter().enumerate() {
            f.values[self.dof_node(r)] = v;
        }
        f
    }

    /// Solves to relative residual `rel_tol`, starting from `guess` when
    /// given. Small systems are factored directly.
    pub fn solve(
        &self,
        rel_tol: f64,
        max_iter: usize,
        guess: Option<&DiscreteField>,
    ) -> Result<(DiscreteField, SolveInfo)> {
        let n = self.num_dofs();
        if n == 0 {
            return Ok((DiscreteField::zeros(self.mesh.clone()), SolveInfo { iterations: 0, residual: 0.0 }));
        }
        if n < DIRECT_SOLVE_LIMIT {
            let x = self.solve_direct()?;
            let res = linalg::relative_residual(self, &self.rhs, &x);
            if res <= rel_tol {
                return Ok((self.expand(&x), SolveInfo { iterations: 0, residual: res }));
            }
            // polish the direct solution iteratively
            let mut x = x;
            let info = linalg::pcg(self, &self.rhs, &mut x, rel_tol, max_iter)?;
            return Ok((self.expand(&x), info));
        }
        let mut x = match guess {
            Some(g) => self.restrict(g)?,
            None => vec![0.0; n],
        };
        let info = linalg::pcg(self, &self.rhs, &mut x, rel_tol, max_iter)?;
        Ok((self.expand(&x), info))
    }

    /// Banded Cholesky after reverse Cuthill-McKee ordering of the base
    /// vertices; each vertex keeps its column of `M` levels contiguous.
    fn solve_direct(&self) -> Result<Vec<f64>> {
        let m = self.m();
        let nf = self.free_vertices.len();
        let adj: Vec<Vec<usize>> = (0..nf)
            .map(|i| self.sx.row(i).map(|(j, _)| j).filter(|&j| j != i).collect())
            .collect();
        let order = linalg::reverse_cuthill_mckee(&adj);
        let mut pos = vec![0usize; nf];
        for (k, &v) in order.iter().enumerate() {
            pos[v] = k;
        }
        let vb = (0..nf)
            .flat_map(|i| adj[i].iter().map(move |&j| (i, j)))
            .map(|(i, j)| pos[i].abs_diff(pos[j]))
            .max()
            .unwrap_or(0);
        let kb = vb * m + m.min(2) - 1;
        let n = nf * m;
        // permuted dof p * m + l  <->  original order[p] * m + l
        let to_orig = |r: usize| order[r / m] * m + r % m;
        let chol = BandedCholesky::factor(n, kb, |i, j| self.entry(to_orig(i), to_orig(j)))?;
        let mut b: Vec<f64> = (0..n).map(|r| self.rhs[to_orig(r)]).collect();
        chol.solve(&mut b);
        let mut x = vec![0.0; n];
        for (r, v) in b.into_iter().enumerate() {
            x[to_orig(r)] = v;
        }
        Ok(x)
    }

    /// `1/2 x^T A x - b^T x`.
    pub fn energy(&self, field: &DiscreteField) -> Result<f64> {
        let x = self.restrict(field)?;
        let mut ax = vec![0.0; x.len()];
        self.matvec(&x, &mut ax);
        Ok(0.5 * linalg::dot(&x, &ax) - linalg::dot(&self.rhs, &x))
    }

    /// `x^T A x` of a field on this mesh.
    pub fn energy_norm_sq(&self, field: &DiscreteField) -> Result<f64> {
        let x = self.restrict(field)?;
        let mut ax = vec![0.0; x.len()];
        self.matvec(&x, &mut ax);
        Ok(linalg::dot(&x, &ax))
    }
}

impl SpdOperator for AssembledSystem {
    fn dim(&self) -> usize {
        self.num_dofs()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matvec(x, y)
    }

    fn rounding_floor(&self, x: &[f64]) -> f64 {
        let m = self.m();
        let mut sum = 0.0;
        for i in 0..self.free_vertices.len() {
            let (s, q) = (self.sx.get(i, i), self.mx.get(i, i));
            for l in 0..m {
                let d = s * self.my.get(l, l) + q * self.sy.get(l, l);
                sum += d * (f64::EPSILON * x[i * m + l]).powi(2);
            }
        }
        sum.sqrt()
    }

    /// Symmetric block Gauss-Seidel sweep over vertical lines.
    fn precondition(&self, r: &[f64], z: &mut [f64]) {
        let m = self.m();
        let nf = self.free_vertices.len();
        let n = nf * m;
        // cached My z_j and Sy z_j for finished lines
        let mut u = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut acc = vec![0.0; m];
        for i in 0..nf {
            acc.copy_from_slice(&r[i * m..(i + 1) * m]);
            for ((j, s), (_, q)) in self.sx.row(i).zip(self.mx.row(i)) {
                if j >= i {
                    break;
                }
                for l in 0..m {
                    acc[l] -= s * u[j * m + l] + q * w[j * m + l];
                }
            }
            self.lines[i].solve(&mut acc);
            z[i * m..(i + 1) * m].copy_from_slice(&acc);
            self.my.apply(&acc, &mut u[i * m..(i + 1) * m]);
            self.sy.apply(&acc, &mut w[i * m..(i + 1) * m]);
        }
        for i in (0..nf).rev() {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let mut any = false;
            for ((j, s), (_, q)) in self.sx.row(i).zip(self.mx.row(i)) {
                if j <= i {
                    continue;
                }
                any = true;
                for l in 0..m {
                    acc[l] += s * u[j * m + l] + q * w[j * m + l];
                }
            }
            if any {
                self.lines[i].solve(&mut acc);
                for l in 0..m {
                    z[i * m + l] -= acc[l];
                }
            }
            let zi = &z[i * m..(i + 1) * m];
            self.my.apply(zi, &mut u[i * m..(i + 1) * m]);
            self.sy.apply(zi, &mut w[i * m..(i + 1) * m]);
        }
    }
}

/// `sqrt(max(0, 2 (E(V_coarse) - E(V_fine))))`, each energy evaluated with
/// its own system.
pub fn energy_error(
    coarse: &DiscreteField,
    coarse_sys: &AssembledSystem,
    fine: &DiscreteField,
    fine_sys: &AssembledSystem,
) -> Result<f64> {
    check_nested(&coarse.mesh, &fine.mesh)?;
    let ec = coarse_sys.energy(coarse)?;
    let ef = fine_sys.energy(fine)?;
    Ok((2.0 * (ec - ef)).max(0.0).sqrt())
}

/// `sqrt(max(0, d_s int f (u - tr V)))` with a degree-`degree` rule.
pub fn exact_error_identity(
    field: &DiscreteField,
    f: &DataFn,
    u_exact: &DataFn,
    d_s: f64,
    degree: usize,
) -> Result<f64> {
    let base = &field.mesh.base;
    let rule = simplex_rule(base.dim(), degree);
    let trace = field.trace();
    let mut total = 0.0;
    for k in 0..base.num_elements() {
        let el = base.element(k);
        let mut acc = 0.0;
        for (l, w) in rule.bary.iter().zip(&rule.weights) {
            let p = base.point(k, l);
            let fv = sample(f, p, base.dim())?;
            if fv == 0.0 {
                continue;
            }
            let uv = sample(u_exact, p, base.dim())?;
            let tv: f64 = el.iter().enumerate().map(|(i, &v)| l[i] * trace[v]).sum();
            acc += w * fv * (uv - tv);
        }
        total += acc * base.measure(k);
    }
    Ok((d_s * total).max(0.0).sqrt())
}

/// `int_{K x (0, Y)} y^alpha |grad W|^2` for every base element `K`.
pub fn column_energy_sq(field: &DiscreteField, alpha: f64) -> Vec<f64> {
    let mesh = &field.mesh;
    let base = &mesh.base;
    let reference = XReference::get(base.dim(), XBasisKind::P1);
    let ys: Vec<YElement> = (0..mesh.m())
        .map(|i| {
            let (a, b) = mesh.ypart.interval(i);
            YElement::new(a, b - a, alpha, 1)
        })
        .collect();
    (0..base.num_elements())
        .map(|k| {
            let el = base.element(k);
            let (mx, sx) = reference.element_matrices(base, k);
            let mut total = 0.0;
            for (i, ye) in ys.iter().enumerate() {
                // the y-stiffness only sees the jumps across the interval
                let kw = ye.stiff[0][0];
                for (p, &vp) in el.iter().enumerate() {
                    let dp = field.at(vp, i + 1) - field.at(vp, i);
                    for (q, &vq) in el.iter().enumerate() {
                        let dq = field.at(vq, i + 1) - field.at(vq, i);
                        total += kw * mx[(p, q)] * dp * dq;
                        for a in 0..2 {
                            for b in 0..2 {
                                total += sx[(p, q)] * ye.mass[a][b] * field.at(vp, i + a) * field.at(vq, i + b);
                            }
                        }
                    }
                }
            }
            total
        })
        .collect()
}
