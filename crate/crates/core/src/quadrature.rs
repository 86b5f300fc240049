//! Quadrature on simplices and intervals.
//!
//! Simplex rules are stored in barycentric coordinates with weights that sum
//! to one, so `∫_K f ≈ |K| Σ w_q f(x_q)`.

use std::f64::consts::PI;

#[derive(Debug, Clone)]
pub struct SimplexRule {
    pub dim: usize,
    /// degree of polynomials integrated exactly
    pub degree: usize,
    /// barycentric coordinates, `dim + 1` per point
    pub points: Vec<[f64; 4]>,
    pub weights: Vec<f64>,
}

impl SimplexRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn for_dim(dim: usize, degree: usize) -> Self {
        match dim {
            2 => Self::triangle(degree),
            3 => Self::tetrahedron(degree),
            _ => panic!("no simplex rule for dimension {dim}"),
        }
    }

    /// Symmetric 6-point rule up to degree 4, collapsed Gauss products above.
    pub fn triangle(degree: usize) -> Self {
        if degree <= 4 {
            let a = 0.445_948_490_915_965;
            let wa = 0.223_381_589_678_011;
            let b = 0.091_576_213_509_771;
            let wb = 0.109_951_743_655_322;
            let mut points = Vec::new();
            let mut weights = Vec::new();
            for (x, w) in [(a, wa), (b, wb)] {
                let y = 1.0 - 2.0 * x;
                for p in [[y, x, x, 0.0], [x, y, x, 0.0], [x, x, y, 0.0]] {
                    points.push(p);
                    weights.push(w);
                }
            }
            return Self { dim: 2, degree: 4, points, weights };
        }
        let q = (degree + 2).div_ceil(2);
        let (gx, gw) = gauss_legendre_unit(q);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (u, wu) in gx.iter().zip(&gw) {
            for (v, wv) in gx.iter().zip(&gw) {
                let x = *u;
                let y = v * (1.0 - u);
                points.push([1.0 - x - y, x, y, 0.0]);
                weights.push(2.0 * wu * wv * (1.0 - u));
            }
        }
        Self { dim: 2, degree: 2 * q - 2, points, weights }
    }

    /// 14-point positive rule up to degree 5, collapsed Gauss products above.
    pub fn tetrahedron(degree: usize) -> Self {
        if degree <= 5 {
            let classes = [
                (0.092_735_250_310_891_2, 0.012_248_840_519_393_66 * 6.0),
                (0.310_885_919_263_300_6, 0.018_781_320_953_002_64 * 6.0),
            ];
            let mut points = Vec::new();
            let mut weights = Vec::new();
            for (a, w) in classes {
                let b = 1.0 - 3.0 * a;
                for k in 0..4 {
                    let mut p = [a; 4];
                    p[k] = b;
                    points.push(p);
                    weights.push(w);
                }
            }
            let c = 0.454_496_295_874_350_4;
            let wc = 0.007_091_003_462_846_911 * 6.0;
            let d = 0.5 - c;
            for (i, j) in [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)] {
                let mut p = [d; 4];
                p[i] = c;
                p[j] = c;
                points.push(p);
                weights.push(wc);
            }
            return Self { dim: 3, degree: 5, points, weights };
        }
        let q = (degree + 3).div_ceil(2);
        let (gx, gw) = gauss_legendre_unit(q);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (u, wu) in gx.iter().zip(&gw) {
            for (v, wv) in gx.iter().zip(&gw) {
                for (s, ws) in gx.iter().zip(&gw) {
                    let x = *u;
                    let y = v * (1.0 - u);
                    let z = s * (1.0 - u) * (1.0 - v);
                    points.push([1.0 - x - y - z, x, y, z]);
                    weights.push(6.0 * wu * wv * ws * (1.0 - u).powi(2) * (1.0 - v));
                }
            }
        }
        Self { dim: 3, degree: 2 * q - 3, points, weights }
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pnm1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            x[0] = 0.0;
            w[0] = 2.0;
            break;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Gauss–Legendre rule mapped to `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    (x.iter().map(|t| 0.5 * (t + 1.0)).collect(), w.iter().map(|t| 0.5 * t).collect())
}

/// Composite Gauss–Legendre integral of `f` over `[a, b]` split into `pieces`.
pub fn integrate_interval(f: impl Fn(f64) -> f64, a: f64, b: f64, order: usize, pieces: usize) -> f64 {
    let (x, w) = gauss_legendre_unit(order);
    let h = (b - a) / pieces as f64;
    let mut acc = 0.0;
    for p in 0..pieces {
        let lo = a + p as f64 * h;
        for (xi, wi) in x.iter().zip(&w) {
            acc += wi * f(lo + xi * h);
        }
    }
    acc * h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(n: usize) -> f64 {
        (1..=n).map(|k| k as f64).product()
    }

    /// Exact normalized integral of a barycentric monomial over a simplex.
    fn monomial_exact(exps: &[usize], dim: usize) -> f64 {
        let num: f64 = exps.iter().map(|&e| factorial(e)).product();
        let s: usize = exps.iter().sum();
        num * factorial(dim) / factorial(s + dim)
    }

    fn check_rule(rule: &SimplexRule) {
        let d = rule.dim;
        let deg = rule.degree;
        let mut exps = vec![0usize; d + 1];
        loop {
            let s: usize = exps.iter().sum();
            if s <= deg {
                let q: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(p, w)| w * exps.iter().enumerate().map(|(k, &e)| p[k].powi(e as i32)).product::<f64>())
                    .sum();
                let exact = monomial_exact(&exps, d);
                assert!((q - exact).abs() < 1e-14, "dim {d} exps {exps:?}: {q} vs {exact}");
            }
            let mut k = 0;
            loop {
                if k > d {
                    return;
                }
                exps[k] += 1;
                if exps[k] <= deg {
                    break;
                }
                exps[k] = 0;
                k += 1;
            }
        }
    }

    #[test]
    fn simplex_rules_integrate_monomials_exactly() {
        for deg in [2, 4, 6, 8] {
            check_rule(&SimplexRule::triangle(deg));
            check_rule(&SimplexRule::tetrahedron(deg));
        }
        check_rule(&SimplexRule::tetrahedron(5));
    }

    #[test]
    fn weights_are_positive() {
        for r in [SimplexRule::triangle(4), SimplexRule::tetrahedron(5), SimplexRule::tetrahedron(9)] {
            assert!(r.weights.iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn gauss_legendre_exactness() {
        for n in 1..12 {
            let (x, w) = gauss_legendre(n);
            for p in 0..2 * n {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p as i32)).sum();
                let exact = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n {n} p {p}");
            }
        }
    }
}
