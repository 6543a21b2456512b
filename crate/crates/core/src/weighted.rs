//! Integration of the weight `y^alpha` against polynomials and the element
//! matrices built from it.
//!
//! Every y-integral is closed form. On an interval `[a, a + h]` all matrices
//! reduce to the moments `J_j = int_0^1 (a + h t)^alpha t^j dt`, evaluated by
//! one of three formulas depending on `h / a` to avoid cancellation.

use std::str::FromStr;
use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::mesh::BaseMesh;
use crate::quadrature::SimplexRule;

/// Pointwise data on the base domain; 1D problems ignore the second coordinate.
pub type DataFn = dyn Fn([f64; 2]) -> f64 + Send + Sync;

/// The fractional order together with the derived constants of the extension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FractionalParams {
    pub s: f64,
    pub alpha: f64,
    pub d_s: f64,
}

impl FractionalParams {
    pub fn new(s: f64) -> Result<Self> {
        if !(s > 0.0 && s < 1.0) {
            return Err(invalid(format!("fractional order s = {s} outside (0, 1)")));
        }
        let alpha = 1.0 - 2.0 * s;
        let d_s = if s == 0.5 {
            1.0
        } else {
            use statrs::function::gamma::gamma;
            2f64.powf(alpha) * gamma(1.0 - s) / gamma(s)
        };
        Ok(Self { s, alpha, d_s })
    }
}

/// `int_a^b y^(alpha + k) dy`.
pub fn weighted_moment(a: f64, b: f64, alpha: f64, k: u32) -> Result<f64> {
    if !(alpha > -1.0) || !alpha.is_finite() {
        return Err(invalid(format!("weight exponent {alpha} is not integrable at 0")));
    }
    if !(a >= 0.0) || !(b > a) || !b.is_finite() {
        return Err(invalid(format!("bad interval [{a}, {b}]")));
    }
    let p = alpha + k as f64 + 1.0;
    if b >= 2.0 * a {
        return Ok((b.powf(p) - a.powf(p)) / p);
    }
    // b^p - a^p = a^p (exp(p ln(b/a)) - 1), free of cancellation for b near a
    Ok(a.powf(p) * (p * ((b - a) / a).ln_1p()).exp_m1() / p)
}

/// Number of moments kept by [`interval_moments`]; enough for products of
/// two quadratics.
pub const NUM_MOMENTS: usize = 5;

/// `J_j = int_0^1 (a + h t)^alpha t^j dt` for `j < NUM_MOMENTS`.
pub fn interval_moments(a: f64, h: f64, alpha: f64) -> [f64; NUM_MOMENTS] {
    debug_assert!(a >= 0.0 && h > 0.0 && alpha > -1.0);
    let mut out = [0.0; NUM_MOMENTS];
    if a == 0.0 {
        let scale = h.powf(alpha);
        for (j, o) in out.iter_mut().enumerate() {
            *o = scale / (alpha + j as f64 + 1.0);
        }
        return out;
    }
    let r = h / a;
    if r > 0.5 {
        // expand t^j = ((y - a) / h)^j under y = a + h t
        let b = a + h;
        let mut raw = [0.0; NUM_MOMENTS];
        for (i, m) in raw.iter_mut().enumerate() {
            let p = alpha + i as f64 + 1.0;
            *m = (b.powf(p) - a.powf(p)) / p;
        }
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            let mut binom = 1.0;
            for i in 0..=j {
                // C(j, i) (-a)^(j-i) M_i
                acc += binom * (-a).powi((j - i) as i32) * raw[i];
                binom = binom * (j - i) as f64 / (i + 1) as f64;
            }
            *o = acc / h.powi(j as i32 + 1);
        }
        return out;
    }
    // a^alpha * sum_i C(alpha, i) r^i / (i + j + 1), converging like 2^-i
    let scale = a.powf(alpha);
    for (j, o) in out.iter_mut().enumerate() {
        let mut coef = 1.0;
        let mut rp = 1.0;
        let mut acc = 0.0;
        for i in 0..200 {
            let term = coef * rp / (i + j + 1) as f64;
            acc += term;
            if term.abs() <= 1e-17 * acc.abs() {
                break;
            }
            coef *= (alpha - i as f64) / (i + 1) as f64;
            rp *= r;
        }
        *o = scale * acc;
    }
    out
}

/// Lagrange basis of order 1 or 2 on `[0, 1]` as monomial coefficients.
fn y_basis(order: usize) -> &'static [[f64; 3]] {
    const P1: [[f64; 3]; 2] = [[1.0, -1.0, 0.0], [0.0, 1.0, 0.0]];
    // nodes ordered 0, 1/2, 1
    const P2: [[f64; 3]; 3] = [[1.0, -3.0, 2.0], [0.0, 4.0, -4.0], [0.0, -1.0, 2.0]];
    match order {
        1 => &P1,
        2 => &P2,
        _ => unreachable!("y basis order must be 1 or 2"),
    }
}

/// Weighted mass and stiffness matrices of a 1D Lagrange element on
/// `[a, a + h]` with weight `y^alpha`. Order 1 uses nodes `(a, a+h)`;
/// order 2 uses `(a, a+h/2, a+h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YElement {
    pub order: usize,
    pub mass: [[f64; 3]; 3],
    pub stiff: [[f64; 3]; 3],
}

impl YElement {
    pub fn new(a: f64, h: f64, alpha: f64, order: usize) -> Self {
        let j = interval_moments(a, h, alpha);
        let basis = y_basis(order);
        let n = basis.len();
        let mut mass = [[0.0; 3]; 3];
        let mut stiff = [[0.0; 3]; 3];
        for p in 0..n {
            for q in 0..n {
                let (bp, bq) = (basis[p], basis[q]);
                let mut m = 0.0;
                for i in 0..3 {
                    for k in 0..3 {
                        m += bp[i] * bq[k] * j[i + k];
                    }
                }
                // derivatives: c1 + 2 c2 t
                let dp = [bp[1], 2.0 * bp[2]];
                let dq = [bq[1], 2.0 * bq[2]];
                let mut s = 0.0;
                for i in 0..2 {
                    for k in 0..2 {
                        s += dp[i] * dq[k] * j[i + k];
                    }
                }
                mass[p][q] = h * m;
                stiff[p][q] = s / h;
            }
        }
        Self { order, mass, stiff }
    }

    pub fn size(&self) -> usize {
        self.order + 1
    }
}

/// Finite element families on the base simplex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum XBasisKind {
    P1,
    P2,
    /// Quadratics plus the cubic bubble `27 l0 l1 l2` (triangles only; on an
    /// interval this coincides with [`XBasisKind::P2`]).
    P2Bubble,
}

/// Local enrichment used by the star estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalSpace {
    #[serde(rename = "bubble", alias = "p2_bubble")]
    P2Bubble,
    #[serde(alias = "p2_plain")]
    P2,
    /// Tensor quadratics; only defined on intervals, where they equal P2.
    Q2,
}

impl LocalSpace {
    pub fn x_kind(self, dim: usize) -> Result<XBasisKind> {
        match (self, dim) {
            (LocalSpace::P2Bubble, 1) | (LocalSpace::P2, _) | (LocalSpace::Q2, 1) => {
                Ok(XBasisKind::P2)
            }
            (LocalSpace::P2Bubble, _) => Ok(XBasisKind::P2Bubble),
            (LocalSpace::Q2, _) => Err(invalid(
                "the Q2 local space requires a tensor-product base element",
            )),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            LocalSpace::P2Bubble => "bubble",
            LocalSpace::P2 => "p2",
            LocalSpace::Q2 => "q2",
        }
    }
}

impl FromStr for LocalSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bubble" | "p2_bubble" => Ok(LocalSpace::P2Bubble),
            "p2" | "p2_plain" => Ok(LocalSpace::P2),
            "q2" => Ok(LocalSpace::Q2),
            other => Err(invalid(format!("unknown local space `{other}`"))),
        }
    }
}

/// Polynomial in barycentric coordinates: list of (exponents, coefficient).
type BPoly = Vec<([u8; 3], f64)>;

fn bmul(a: &BPoly, b: &BPoly) -> BPoly {
    let mut out: BPoly = Vec::new();
    for (ea, ca) in a {
        for (eb, cb) in b {
            let e = [ea[0] + eb[0], ea[1] + eb[1], ea[2] + eb[2]];
            match out.iter_mut().find(|(x, _)| *x == e) {
                Some((_, c)) => *c += ca * cb,
                None => out.push((e, ca * cb)),
            }
        }
    }
    out
}

fn bderiv(p: &BPoly, k: usize) -> BPoly {
    p.iter()
        .filter(|(e, _)| e[k] > 0)
        .map(|(e, c)| {
            let mut e2 = *e;
            e2[k] -= 1;
            (e2, c * e[k] as f64)
        })
        .collect()
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// `int_K p / |K|` via `int_K l^e = n! |K| prod(e_i!) / (sum(e) + n)!`.
fn bintegrate(p: &BPoly, dim: usize) -> f64 {
    p.iter()
        .map(|(e, c)| {
            let num: f64 = e.iter().map(|&x| factorial(x as u32)).product();
            let total: u32 = e.iter().map(|&x| x as u32).sum();
            c * factorial(dim as u32) * num / factorial(total + dim as u32)
        })
        .sum()
}

fn beval(p: &BPoly, l: &[f64; 3]) -> f64 {
    p.iter()
        .map(|(e, c)| c * l[0].powi(e[0] as i32) * l[1].powi(e[1] as i32) * l[2].powi(e[2] as i32))
        .sum()
}

fn unit(i: usize) -> [u8; 3] {
    let mut e = [0; 3];
    e[i] = 1;
    e
}

/// Local edges of a simplex, each given by its two local vertices. Triangle
/// edge `i` is opposite vertex `i`.
pub fn local_edges(dim: usize) -> &'static [(usize, usize)] {
    const INTERVAL: [(usize, usize); 1] = [(0, 1)];
    const TRIANGLE: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];
    if dim == 1 {
        &INTERVAL
    } else {
        &TRIANGLE
    }
}

fn build_basis(dim: usize, kind: XBasisKind) -> Vec<BPoly> {
    let nl = dim + 1;
    let mut basis = Vec::new();
    match kind {
        XBasisKind::P1 => {
            for i in 0..nl {
                basis.push(vec![(unit(i), 1.0)]);
            }
        }
        XBasisKind::P2 | XBasisKind::P2Bubble => {
            for i in 0..nl {
                let mut sq = [0; 3];
                sq[i] = 2;
                basis.push(vec![(sq, 2.0), (unit(i), -1.0)]);
            }
            for &(a, b) in local_edges(dim) {
                let mut e = [0; 3];
                e[a] = 1;
                e[b] = 1;
                basis.push(vec![(e, 4.0)]);
            }
            if kind == XBasisKind::P2Bubble && dim == 2 {
                basis.push(vec![([1, 1, 1], 27.0)]);
            }
        }
    }
    basis
}

/// Reference integrals of one basis family: `mass[p][q] = int phi_p phi_q / |K|`
/// and `stiff[p][q][k][l] = int d_k phi_p d_l phi_q / |K|` with derivatives
/// taken in barycentric coordinates.
pub struct XReference {
    dim: usize,
    basis: Vec<BPoly>,
    derivs: Vec<Vec<BPoly>>,
    mass: Vec<f64>,
    stiff: Vec<f64>,
    load: Vec<f64>,
}

impl XReference {
    fn new(dim: usize, kind: XBasisKind) -> Self {
        let basis = build_basis(dim, kind);
        let nb = basis.len();
        let nl = dim + 1;
        let derivs: Vec<Vec<BPoly>> =
            basis.iter().map(|p| (0..nl).map(|k| bderiv(p, k)).collect()).collect();
        let mut mass = vec![0.0; nb * nb];
        let mut stiff = vec![0.0; nb * nb * nl * nl];
        for p in 0..nb {
            for q in 0..nb {
                mass[p * nb + q] = bintegrate(&bmul(&basis[p], &basis[q]), dim);
                for k in 0..nl {
                    for l in 0..nl {
                        stiff[((p * nb + q) * nl + k) * nl + l] =
                            bintegrate(&bmul(&derivs[p][k], &derivs[q][l]), dim);
                    }
                }
            }
        }
        let load = basis.iter().map(|p| bintegrate(p, dim)).collect();
        Self { dim, basis, derivs, mass, stiff, load }
    }

    pub fn get(dim: usize, kind: XBasisKind) -> &'static XReference {
        static CACHE: [[OnceLock<XReference>; 3]; 2] = [
            [OnceLock::new(), OnceLock::new(), OnceLock::new()],
            [OnceLock::new(), OnceLock::new(), OnceLock::new()],
        ];
        let slot = match kind {
            XBasisKind::P1 => 0,
            XBasisKind::P2 => 1,
            XBasisKind::P2Bubble => 2,
        };
        CACHE[dim - 1][slot].get_or_init(|| XReference::new(dim, kind))
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    /// Basis values at a barycentric point.
    pub fn eval(&self, bary: &[f64; 3], out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.basis) {
            *o = beval(p, bary);
        }
    }

    /// Derivatives of every basis function with respect to the barycentric
    /// coordinates, at a barycentric point; combine with the element's
    /// barycentric gradients for the spatial gradient.
    pub fn eval_derivs(&self, bary: &[f64; 3], out: &mut [[f64; 3]]) {
        for (o, d) in out.iter_mut().zip(&self.derivs) {
            for (k, dk) in d.iter().enumerate() {
                o[k] = beval(dk, bary);
            }
        }
    }

    /// `int_K phi_p / |K|`.
    pub fn mean(&self, p: usize) -> f64 {
        self.load[p]
    }

    /// Mass and stiffness matrices on element `k` of `mesh`.
    pub fn element_matrices(&self, mesh: &BaseMesh, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        debug_assert_eq!(mesh.dim(), self.dim);
        let nb = self.len();
        let nl = self.dim + 1;
        let vol = mesh.measure(k);
        let g = mesh.bary_gradients(k);
        let mut gram = [[0.0; 3]; 3];
        for a in 0..nl {
            for b in 0..nl {
                gram[a][b] = g[a][0] * g[b][0] + g[a][1] * g[b][1];
            }
        }
        let mass = DMatrix::from_fn(nb, nb, |p, q| vol * self.mass[p * nb + q]);
        let stiff = DMatrix::from_fn(nb, nb, |p, q| {
            let base = (p * nb + q) * nl * nl;
            let mut acc = 0.0;
            for a in 0..nl {
                for b in 0..nl {
                    acc += gram[a][b] * self.stiff[base + a * nl + b];
                }
            }
            vol * acc
        });
        (mass, stiff)
    }
}

/// Dense element matrices of a prism `K x I` for a tensor basis
/// `phi_p(x') l_i(y)`, local index `p * ny + i`.
#[derive(Debug, Clone)]
pub struct ElementMatrix {
    pub stiffness: DMatrix<f64>,
    pub mass: DMatrix<f64>,
}

fn kron_sum(
    mx: &DMatrix<f64>,
    sx: &DMatrix<f64>,
    y: &YElement,
) -> ElementMatrix {
    let nx = mx.nrows();
    let ny = y.size();
    let n = nx * ny;
    let mut stiffness = DMatrix::zeros(n, n);
    let mut mass = DMatrix::zeros(n, n);
    for p in 0..nx {
        for q in 0..nx {
            for i in 0..ny {
                for j in 0..ny {
                    let r = p * ny + i;
                    let c = q * ny + j;
                    stiffness[(r, c)] = sx[(p, q)] * y.mass[i][j] + mx[(p, q)] * y.stiff[i][j];
                    mass[(r, c)] = mx[(p, q)] * y.mass[i][j];
                }
            }
        }
    }
    ElementMatrix { stiffness, mass }
}

fn check_interval(y0: f64, y1: f64) -> Result<()> {
    if !(y0 >= 0.0) || !(y1 > y0) || !y1.is_finite() {
        return Err(Error::Geometry(format!("degenerate y-interval [{y0}, {y1}]")));
    }
    Ok(())
}

/// Weighted P1 x P1 matrices of the prism over element `k` and `[y0, y1]`.
pub fn local_stiffness(
    mesh: &BaseMesh,
    k: usize,
    y0: f64,
    y1: f64,
    alpha: f64,
) -> Result<ElementMatrix> {
    check_interval(y0, y1)?;
    let (mx, sx) = XReference::get(mesh.dim(), XBasisKind::P1).element_matrices(mesh, k);
    Ok(kron_sum(&mx, &sx, &YElement::new(y0, y1 - y0, alpha, 1)))
}

/// Weighted matrices of the enriched space (`space` in x', quadratic in y).
pub fn local_stiffness_enriched(
    mesh: &BaseMesh,
    k: usize,
    y0: f64,
    y1: f64,
    alpha: f64,
    space: LocalSpace,
) -> Result<ElementMatrix> {
    check_interval(y0, y1)?;
    let kind = space.x_kind(mesh.dim())?;
    let (mx, sx) = XReference::get(mesh.dim(), kind).element_matrices(mesh, k);
    Ok(kron_sum(&mx, &sx, &YElement::new(y0, y1 - y0, alpha, 2)))
}

/// Evaluates `f` at a physical point, failing on non-finite values.
pub fn sample(f: &DataFn, p: [f64; 2], dim: usize) -> Result<f64> {
    let v = f(p);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Data { value: v, location: p[..dim].to_vec() })
    }
}

/// `d_s int_K f phi_i` for the P1 trace basis of element `k`.
pub fn trace_load(
    mesh: &BaseMesh,
    k: usize,
    f: &DataFn,
    d_s: f64,
    rule: &SimplexRule,
) -> Result<Vec<f64>> {
    let nl = mesh.dim() + 1;
    let vol = mesh.measure(k);
    let mut out = vec![0.0; nl];
    for (l, w) in rule.bary.iter().zip(&rule.weights) {
        let fv = sample(f, mesh.point(k, l), mesh.dim())?;
        for i in 0..nl {
            out[i] += w * fv * l[i];
        }
    }
    for o in &mut out {
        *o *= d_s * vol;
    }
    Ok(out)
}

#[cfg(test)]
use crate::oracle;
