//! Independent numerical oracles shared by unit and integration tests.
//!
//! Nothing here depends on the library: basis functions are written out by
//! hand and integrals use tanh-sinh or tensor Gauss rules.

use std::f64::consts::PI;

/// Tanh-sinh quadrature of a function with integrable endpoint singularities.
/// Nodes are generated from their distance to the nearest endpoint so that
/// points next to `a` are resolved to full relative precision.
pub fn tanh_sinh(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let len = b - a;
    let h = 1.0 / 64.0;
    let mut acc = 0.0;
    let mut k = 0i64;
    loop {
        let t = k as f64 * h;
        let u = 0.5 * PI * t.sinh();
        let cu = u.cosh();
        // distance from the nearer endpoint and the derivative of the map
        let d = len / (1.0 + (2.0 * u).exp());
        let w = 0.5 * len * 0.5 * PI * t.cosh() / (cu * cu);
        if d < 1e-300 || w < 1e-300 {
            break;
        }
        let mut term = w * f(a + d);
        if k > 0 {
            term += w * f(b - d);
        } else {
            // t = 0 is the midpoint, d = len / 2
            term = w * f(a + 0.5 * len);
        }
        acc += h * term;
        if k > 0 && term.abs() * h < 1e-18 * acc.abs() && t > 1.0 {
            break;
        }
        k += 1;
    }
    acc
}

/// `int_a^b y^alpha g(y) dy` for smooth `g`. When `a = 0` the substitution
/// `y = b v^q`, `q = 1 / (1 + alpha)`, removes the weight singularity.
pub fn weighted_integral(g: impl Fn(f64) -> f64, a: f64, b: f64, alpha: f64) -> f64 {
    if a > 0.0 {
        return tanh_sinh(|y| y.powf(alpha) * g(y), a, b);
    }
    let q = 1.0 / (1.0 + alpha);
    // y^alpha dy = b^(1+alpha) q dv
    let scale = b.powf(1.0 + alpha) * q;
    scale * tanh_sinh(|v| g(b * v.powf(q)), 0.0, 1.0)
}

/// Gamma function on `(0, 30)` by upward recurrence and the Stirling series.
pub fn gamma_oracle(x: f64) -> f64 {
    let mut z = x;
    let mut prod = 1.0;
    while z < 20.0 {
        prod *= z;
        z += 1.0;
    }
    let zi = 1.0 / z;
    let zi2 = zi * zi;
    let series = zi
        * (1.0 / 12.0
            - zi2 * (1.0 / 360.0 - zi2 * (1.0 / 1260.0 - zi2 * (1.0 / 1680.0 - zi2 / 1188.0))));
    let lg = (z - 0.5) * z.ln() - z + 0.5 * (2.0 * PI).ln() + series;
    lg.exp() / prod
}

/// Gauss-Legendre on [0, 1] by Golub-Welsch-free Newton iteration.
pub fn gauss(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..200 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        out.push((0.5 * (x + 1.0), 1.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    (p1, n as f64 * (x * p1 - p0) / (x * x - 1.0))
}

/// Lagrange basis values and derivatives on nodes `xs`.
pub fn lagrange(xs: &[f64], x: f64) -> (Vec<f64>, Vec<f64>) {
    let n = xs.len();
    let mut val = vec![0.0; n];
    let mut der = vec![0.0; n];
    for i in 0..n {
        let mut v = 1.0;
        for j in 0..n {
            if j != i {
                v *= (x - xs[j]) / (xs[i] - xs[j]);
            }
        }
        val[i] = v;
        let mut d = 0.0;
        for m in 0..n {
            if m == i {
                continue;
            }
            let mut t = 1.0 / (xs[i] - xs[m]);
            for j in 0..n {
                if j != i && j != m {
                    t *= (x - xs[j]) / (xs[i] - xs[j]);
                }
            }
            d += t;
        }
        der[i] = d;
    }
    (val, der)
}

/// Weighted stiffness of a tensor Lagrange element on `[x0,x1] x [y0,y1]`
/// with x-nodes `xn` and y-nodes `yn`; dof `p * yn.len() + i`.
pub fn tensor_prism_stiffness_1d(xn: &[f64], yn: &[f64], alpha: f64) -> Vec<Vec<f64>> {
    let (nx, ny) = (xn.len(), yn.len());
    let (x0, x1) = (xn[0], xn[nx - 1]);
    let (y0, y1) = (yn[0], yn[ny - 1]);
    let gx = gauss(8);
    let n = nx * ny;
    let mut out = vec![vec![0.0; n]; n];
    for r in 0..n {
        for c in r..n {
            let (p, i) = (r / ny, r % ny);
            let (q, j) = (c / ny, c % ny);
            let g = |y: f64| {
                let (yv, yd) = lagrange(yn, y);
                let mut acc = 0.0;
                for &(t, w) in &gx {
                    let x = x0 + (x1 - x0) * t;
                    let (xv, xd) = lagrange(xn, x);
                    acc += w
                        * (x1 - x0)
                        * (xd[p] * yv[i] * xd[q] * yv[j] + xv[p] * yd[i] * xv[q] * yd[j]);
                }
                acc
            };
            let v = weighted_integral(g, y0, y1, alpha);
            out[r][c] = v;
            out[c][r] = v;
        }
    }
    out
}

pub fn p1_prism_stiffness_1d(x0: f64, x1: f64, y0: f64, y1: f64, alpha: f64) -> Vec<Vec<f64>> {
    tensor_prism_stiffness_1d(&[x0, x1], &[y0, y1], alpha)
}

/// P2 in x (vertex, vertex, midpoint) times P2 in y (bottom, middle, top).
pub fn p2_prism_stiffness_1d(x0: f64, x1: f64, y0: f64, y1: f64, alpha: f64) -> Vec<Vec<f64>> {
    let xm = 0.5 * (x0 + x1);
    let ym = 0.5 * (y0 + y1);
    let full = tensor_prism_stiffness_1d(&[x0, xm, x1], &[y0, ym, y1], alpha);
    // reorder x dofs from (x0, xm, x1) to (x0, x1, xm)
    let perm = [0usize, 2, 1];
    let map = |r: usize| perm[r / 3] * 3 + r % 3;
    (0..9).map(|r| (0..9).map(|c| full[map(r)][map(c)]).collect()).collect()
}

/// Barycentric coordinates and their gradients on a triangle.
pub fn barycentric(tri: &[[f64; 2]; 3], p: [f64; 2]) -> ([f64; 3], [[f64; 2]; 3]) {
    let [a, b, c] = *tri;
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
    let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
    let g1 = [(c[1] - a[1]) / det, -(c[0] - a[0]) / det];
    let g2 = [-(b[1] - a[1]) / det, (b[0] - a[0]) / det];
    let g0 = [-g1[0] - g2[0], -g1[1] - g2[1]];
    ([1.0 - l1 - l2, l1, l2], [g0, g1, g2])
}

/// P2 + bubble values and gradients: vertices, edges (1,2), (0,2), (0,1), bubble.
pub fn p2_bubble(l: [f64; 3], g: [[f64; 2]; 3]) -> (Vec<f64>, Vec<[f64; 2]>) {
    let mut v = Vec::with_capacity(7);
    let mut d = Vec::with_capacity(7);
    for i in 0..3 {
        v.push(l[i] * (2.0 * l[i] - 1.0));
        let s = 4.0 * l[i] - 1.0;
        d.push([s * g[i][0], s * g[i][1]]);
    }
    for (a, b) in [(1, 2), (0, 2), (0, 1)] {
        v.push(4.0 * l[a] * l[b]);
        d.push([
            4.0 * (l[a] * g[b][0] + l[b] * g[a][0]),
            4.0 * (l[a] * g[b][1] + l[b] * g[a][1]),
        ]);
    }
    v.push(27.0 * l[0] * l[1] * l[2]);
    let mut gb = [0.0; 2];
    for k in 0..2 {
        gb[k] = 27.0
            * (g[0][k] * l[1] * l[2] + l[0] * g[1][k] * l[2] + l[0] * l[1] * g[2][k]);
    }
    d.push(gb);
    (v, d)
}

/// Points and weights of a Duffy-collapsed Gauss rule on a physical triangle.
pub fn triangle_points(tri: &[[f64; 2]; 3], n: usize) -> Vec<([f64; 2], f64)> {
    let [a, b, c] = *tri;
    let area = 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs();
    let g = gauss(n);
    let mut out = Vec::new();
    for &(u, wu) in &g {
        for &(v, wv) in &g {
            let l1 = u;
            let l2 = (1.0 - u) * v;
            let p = [
                a[0] + l1 * (b[0] - a[0]) + l2 * (c[0] - a[0]),
                a[1] + l1 * (b[1] - a[1]) + l2 * (c[1] - a[1]),
            ];
            out.push((p, 2.0 * area * wu * wv * (1.0 - u)));
        }
    }
    out
}

/// Weighted stiffness of (P2 + bubble) x P2 on the prism over `tri` and
/// `[y0, y1]`.
pub fn enriched_triangle_prism(
    tri: &[[f64; 2]; 3],
    y0: f64,
    y1: f64,
    alpha: f64,
) -> Vec<Vec<f64>> {
    let pts = triangle_points(tri, 8);
    let yn = [y0, 0.5 * (y0 + y1), y1];
    let n = 21;
    let mut out = vec![vec![0.0; n]; n];
    // x-integrals are independent of y: precompute the two x-matrices
    let mut mx = [[0.0; 7]; 7];
    let mut sx = [[0.0; 7]; 7];
    for &(p, w) in &pts {
        let (l, g) = barycentric(tri, p);
        let (v, d) = p2_bubble(l, g);
        for i in 0..7 {
            for j in 0..7 {
                mx[i][j] += w * v[i] * v[j];
                sx[i][j] += w * (d[i][0] * d[j][0] + d[i][1] * d[j][1]);
            }
        }
    }
    for i in 0..3 {
        for j in 0..3 {
            let my = weighted_integral(
                |y| {
                    let (v, _) = lagrange(&yn, y);
                    v[i] * v[j]
                },
                y0,
                y1,
                alpha,
            );
            let sy = weighted_integral(
                |y| {
                    let (_, d) = lagrange(&yn, y);
                    d[i] * d[j]
                },
                y0,
                y1,
                alpha,
            );
            for p in 0..7 {
                for q in 0..7 {
                    out[p * 3 + i][q * 3 + j] = sx[p][q] * my + mx[p][q] * sy;
                }
            }
        }
    }
    out
}
