//! Gauss rules on the unit interval and on reference simplices.
//!
//! Simplex rules are returned in barycentric form with weights normalized to
//! sum to one, so `sum_i w_i g(x_i) * |K|` integrates `g` over a simplex `K`.

use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on `[0, 1]` with `n` points
/// (exact for polynomials of degree `2n - 1`).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        // map [-1, 1] -> [0, 1]
        nodes[n - 1 - i] = 0.5 * (x + 1.0);
        weights[n - 1 - i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Gauss rule for `int_0^1 t^alpha g(t) dt`, `alpha > -1`, with `n` points
/// (exact for degree `2n - 1`). Golub-Welsch on the three-term recurrence of
/// the Jacobi polynomials with weight `(1 + x)^alpha` on `[-1, 1]`.
pub fn gauss_jacobi(n: usize, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1 && alpha > -1.0);
    let b = alpha;
    let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let kf = k as f64;
        let t = 2.0 * kf + b;
        jac[(k, k)] = if k == 0 { b / (b + 2.0) } else { b * b / (t * (t + 2.0)) };
        if k >= 1 {
            let beta = 4.0 * kf * kf * (kf + b) * (kf + b) / (t * t * (t + 1.0) * (t - 1.0));
            jac[(k, k - 1)] = beta.sqrt();
            jac[(k - 1, k)] = beta.sqrt();
        }
    }
    let eig = nalgebra::SymmetricEigen::new(jac);
    let total = 1.0 / (alpha + 1.0);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v = eig.eigenvectors[(0, i)];
            (0.5 * (1.0 + eig.eigenvalues[i]), total * v * v)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// A quadrature rule on a reference simplex in barycentric coordinates.
#[derive(Debug, Clone)]
pub struct SimplexRule {
    pub bary: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl SimplexRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Rule exact for polynomials of total degree `degree` on an interval
/// (`dim = 1`) or a triangle (`dim = 2`). Triangles use a collapsed tensor
/// Gauss rule.
pub fn simplex_rule(dim: usize, degree: usize) -> SimplexRule {
    match dim {
        1 => {
            let (x, w) = gauss_legendre(degree / 2 + 1);
            SimplexRule {
                bary: x.iter().map(|&t| [1.0 - t, t, 0.0]).collect(),
                weights: w,
            }
        }
        2 => {
            let qu = (degree + 2).div_ceil(2).max(1);
            let qv = (degree + 1).div_ceil(2).max(1);
            let (xu, wu) = gauss_legendre(qu);
            let (xv, wv) = gauss_legendre(qv);
            let mut bary = Vec::with_capacity(qu * qv);
            let mut weights = Vec::with_capacity(qu * qv);
            for (&u, &a) in xu.iter().zip(&wu) {
                for (&v, &b) in xv.iter().zip(&wv) {
                    let x = u;
                    let y = (1.0 - u) * v;
                    bary.push([1.0 - x - y, x, y]);
                    weights.push(2.0 * a * b * (1.0 - u));
                }
            }
            SimplexRule { bary, weights }
        }
        _ => panic!("simplex rules only for dimension 1 or 2"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_jacobi_moments() {
        for &alpha in &[-0.6, -0.2, 0.0, 0.4, 0.9] {
            for n in 1..8 {
                let (x, w) = gauss_jacobi(n, alpha);
                for k in 0..2 * n {
                    let got: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
                    let want = 1.0 / (alpha + k as f64 + 1.0);
                    assert!((got - want).abs() < 1e-13 * want.max(1.0), "a={alpha} n={n} k={k}");
                }
                assert!(x.iter().all(|&t| t > 0.0 && t < 1.0));
            }
        }
        // alpha = 0 reproduces Gauss-Legendre
        let (x, w) = gauss_jacobi(5, 0.0);
        let (xl, wl) = gauss_legendre(5);
        for i in 0..5 {
            assert!((x[i] - xl[i]).abs() < 1e-14 && (w[i] - wl[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn gauss_legendre_integrates_monomials() {
        for n in 1..12 {
            let (x, w) = gauss_legendre(n);
            for k in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
                assert!((q - 1.0 / (k as f64 + 1.0)).abs() < 1e-14, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn triangle_rule_exactness() {
        // int over reference triangle of x^a y^b = a! b! / (a+b+2)!
        fn fact(n: usize) -> f64 {
            (1..=n).map(|k| k as f64).product()
        }
        for degree in [1, 4, 7, 12] {
            let rule = simplex_rule(2, degree);
            for a in 0..=degree {
                for b in 0..=(degree - a) {
                    let q: f64 = rule
                        .bary
                        .iter()
                        .zip(&rule.weights)
                        .map(|(l, w)| 0.5 * w * l[1].powi(a as i32) * l[2].powi(b as i32))
                        .sum();
                    let exact = fact(a) * fact(b) / fact(a + b + 2);
                    assert!((q - exact).abs() < 1e-15, "deg {degree} a={a} b={b}");
                }
            }
        }
    }
}
