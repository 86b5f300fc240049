//! Stationary and shifted saddle-point solves, discrete projections and the
//! discrete inf-sup constant.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::assembly::SaddleSystem;
use crate::error::{Error, Result};
use crate::ldl::{saddle_ordering, LdlFactor};
use crate::sparse::{norm_inf, CsrMatrix, Scalar, Symmetry, Triplets};

/// Default sector half-angle parameter.
pub const DEFAULT_DELTA: f64 = PI / 4.0;

/// Whether `λ ∈ Σ_δ = { z ≠ 0 : |arg z| < π - δ }`.
pub fn in_sector(lambda: Complex64, delta: f64) -> bool {
    lambda != Complex64::new(0.0, 0.0) && lambda.arg().abs() < PI - delta
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolventShift {
    pub lambda: Complex64,
    pub delta: f64,
    /// `λ = 0` accepted without the sector check (invertible reduced operator)
    pub allow_zero: bool,
}

impl ResolventShift {
    pub fn new(lambda: Complex64, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < PI / 2.0) {
            return Err(Error::InvalidParameter(format!("sector parameter δ = {delta} outside (0, π/2)")));
        }
        if !in_sector(lambda, delta) {
            return Err(Error::ShiftOutsideSector { re: lambda.re, im: lambda.im, delta });
        }
        Ok(Self { lambda, delta, allow_zero: false })
    }

    /// `|λ| e^{iθ}`.
    pub fn polar(modulus: f64, arg: f64, delta: f64) -> Result<Self> {
        Self::new(Complex64::from_polar(modulus, arg), delta)
    }

    pub fn zero() -> Self {
        Self { lambda: Complex64::new(0.0, 0.0), delta: DEFAULT_DELTA, allow_zero: true }
    }

    pub fn check(&self) -> Result<()> {
        if self.allow_zero && self.lambda == Complex64::new(0.0, 0.0) {
            return Ok(());
        }
        if in_sector(self.lambda, self.delta) {
            Ok(())
        } else {
            Err(Error::ShiftOutsideSector { re: self.lambda.re, im: self.lambda.im, delta: self.delta })
        }
    }
}

/// Solution of one block solve; `w` and `pi` are free coefficient vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleSolution<T> {
    pub w: Vec<T>,
    pub pi: Vec<T>,
    pub mean_multiplier: T,
    /// `‖f - (V w + Bᵀ π)‖_∞ / ‖f‖_∞`
    pub residual_velocity: f64,
    /// `‖B w + m μ‖_∞` (absolute; the right-hand side of this block is zero)
    pub residual_pressure: f64,
    /// `|m · π|`
    pub pressure_mean: f64,
}

/// Factorized block matrix `[V, Bᵀ, 0; B, 0, mᵀ; 0, m, 0]`.
#[derive(Debug, Clone)]
pub struct SaddleFactor<T> {
    matrix: CsrMatrix<T>,
    factor: LdlFactor<T>,
    b: CsrMatrix<f64>,
    mean_row: Vec<f64>,
    nv: usize,
    np: usize,
}

impl<T: Scalar> SaddleFactor<T> {
    pub fn new(velocity_block: &CsrMatrix<T>, b: &CsrMatrix<f64>, mean_row: &[f64]) -> Result<Self> {
        let nv = velocity_block.rows;
        let np = b.rows;
        if b.cols != nv {
            return Err(Error::DimensionMismatch { expected: nv, got: b.cols });
        }
        if mean_row.len() != np {
            return Err(Error::DimensionMismatch { expected: np, got: mean_row.len() });
        }
        let n = nv + np + 1;
        let mut t = Triplets::with_capacity(n, n, velocity_block.nnz() + 2 * b.nnz() + 2 * np);
        for i in 0..nv {
            for (j, v) in velocity_block.row(i) {
                t.push(i, j, v);
            }
        }
        for k in 0..np {
            for (i, v) in b.row(k) {
                t.push(nv + k, i, T::from_real(v));
                t.push(i, nv + k, T::from_real(v));
            }
            t.push(nv + k, nv + np, T::from_real(mean_row[k]));
            t.push(nv + np, nv + k, T::from_real(mean_row[k]));
        }
        let matrix = t.into_csr(Symmetry::Symmetric);
        let perm = saddle_ordering(&matrix, nv, np, true)?;
        let factor = LdlFactor::with_ordering(&matrix, perm)?;
        Ok(Self { matrix, factor, b: b.clone(), mean_row: mean_row.to_vec(), nv, np })
    }

    pub fn n_velocity(&self) -> usize {
        self.nv
    }

    /// Solve with velocity right-hand side `f` and zero divergence/mean data.
    pub fn solve(&self, f: &[T]) -> Result<SaddleSolution<T>> {
        if f.len() != self.nv {
            return Err(Error::DimensionMismatch { expected: self.nv, got: f.len() });
        }
        let mut rhs = vec![T::zero(); self.nv + self.np + 1];
        rhs[..self.nv].copy_from_slice(f);
        let x = self.factor.solve_refined(&self.matrix, &rhs, 4);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite saddle solution".into()));
        }
        let w = x[..self.nv].to_vec();
        let pi = x[self.nv..self.nv + self.np].to_vec();
        let mu = x[self.nv + self.np];
        let ax = self.matrix.mul_vec(&x);
        let fnorm = norm_inf(f);
        let rv = (0..self.nv).map(|i| (f[i] - ax[i]).modulus()).fold(0.0, f64::max);
        let rp = (self.nv..self.nv + self.np).map(|i| ax[i].modulus()).fold(0.0, f64::max);
        let mut mean = T::zero();
        for (p, m) in pi.iter().zip(&self.mean_row) {
            mean += *p * T::from_real(*m);
        }
        Ok(SaddleSolution {
            w,
            pi,
            mean_multiplier: mu,
            residual_velocity: if fnorm > 0.0 { rv / fnorm } else { rv },
            residual_pressure: rp,
            pressure_mean: mean.modulus(),
        })
    }

    /// `‖B w‖_∞` for a velocity vector.
    pub fn divergence_residual(&self, w: &[T]) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..self.np {
            let mut acc = T::zero();
            for (i, v) in self.b.row(k) {
                acc += w[i] * T::from_real(v);
            }
            worst = worst.max(acc.modulus());
        }
        worst
    }
}

/// Factor of the resolvent operator `λM + A` coupled with `B`.
pub fn resolvent_factor(system: &SaddleSystem, shift: &ResolventShift) -> Result<SaddleFactor<Complex64>> {
    shift.check()?;
    let block = system.m.to_complex().combine(shift.lambda, &system.a.to_complex(), Complex64::new(1.0, 0.0))?;
    SaddleFactor::new(&block, &system.b, &system.mean_row)
}

/// Solve `λ(w, v) + a(w, v) + b(v, π) = (g, v)`, `b(w, q) = 0` for `g` given
/// by free coefficients in the velocity space.
pub fn solve_resolvent(system: &SaddleSystem, shift: &ResolventShift, g: &[Complex64]) -> Result<SaddleSolution<Complex64>> {
    let mg = system.m.to_complex().mul_vec(g);
    resolvent_factor(system, shift)?.solve(&mg)
}

/// As [`solve_resolvent`] with the load `(g, φ_i)` supplied directly.
pub fn solve_resolvent_load(system: &SaddleSystem, shift: &ResolventShift, load: &[Complex64]) -> Result<SaddleSolution<Complex64>> {
    resolvent_factor(system, shift)?.solve(load)
}

/// `M`-orthogonal projection onto the discretely solenoidal space.
pub fn project_solenoidal(system: &SaddleSystem, u0: &[f64]) -> Result<Vec<f64>> {
    project_solenoidal_load(system, &system.m.mul_vec(u0))
}

/// `P_{h,σ} u` from the load `(u, φ_i)` of an arbitrary `L²` field.
pub fn project_solenoidal_load(system: &SaddleSystem, load: &[f64]) -> Result<Vec<f64>> {
    let f = SaddleFactor::new(&system.m, &system.b, &system.mean_row)?;
    Ok(f.solve(load)?.w)
}

/// `K`-orthogonal (Ritz) projection onto the discretely solenoidal space.
pub fn ritz_projection(system: &SaddleSystem, u: &[f64]) -> Result<Vec<f64>> {
    ritz_projection_load(system, &system.k.mul_vec(u))
}

/// Ritz projection from the load `(u, φ_i) + (∇u, ∇φ_i)` of a continuous field.
pub fn ritz_projection_load(system: &SaddleSystem, load: &[f64]) -> Result<Vec<f64>> {
    let f = SaddleFactor::new(&system.k, &system.b, &system.mean_row)?;
    Ok(f.solve(load)?.w)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfSupOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub subspace: usize,
}

impl Default for InfSupOptions {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iterations: 5000, subspace: 6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfSupEstimate {
    pub h: f64,
    /// zero when the pair has a nontrivial zero-mean pressure kernel
    pub beta: f64,
    pub mu_min: f64,
    pub iterations: usize,
    pub singular: bool,
}

/// Inf-sup estimates over a refinement sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct InfSupReport {
    pub levels: Vec<InfSupEstimate>,
}

impl InfSupReport {
    pub fn betas(&self) -> Vec<f64> {
        self.levels.iter().map(|e| e.beta).collect()
    }

    /// `max β_h / min β_h` (infinite if any level is singular).
    pub fn spread(&self) -> f64 {
        let b = self.betas();
        let max = b.iter().copied().fold(0.0, f64::max);
        let min = b.iter().copied().fold(f64::INFINITY, f64::min);
        if min > 0.0 {
            max / min
        } else {
            f64::INFINITY
        }
    }

    /// Collapse under refinement: a singular level, or the finest `β_h` at
    /// most half the coarsest.
    pub fn collapses(&self) -> bool {
        let b = self.betas();
        match (b.first(), b.last()) {
            (Some(&first), Some(&last)) => self.levels.iter().any(|e| e.singular) || last <= 0.5 * first,
            _ => false,
        }
    }
}

/// Dense pressure Schur complement `B K⁻¹ Bᵀ`, one `K` solve per pressure DOF.
pub fn schur_complement(system: &SaddleSystem) -> Result<DMatrix<f64>> {
    let kf = LdlFactor::new(&system.k)?;
    let np = system.n_pressure();
    let bt = system.b.transpose();
    let cols: Vec<Vec<f64>> = (0..np)
        .into_par_iter()
        .map(|k| {
            let mut e = vec![0.0; np];
            e[k] = 1.0;
            let rhs = bt.mul_vec(&e);
            let y = kf.solve_refined(&system.k, &rhs, 2);
            system.b.mul_vec(&y)
        })
        .collect();
    let mut s = DMatrix::zeros(np, np);
    for (k, col) in cols.iter().enumerate() {
        for i in 0..np {
            s[(i, k)] = col[i];
        }
    }
    // symmetrize away round-off
    let st = s.transpose();
    Ok((s + st) * 0.5)
}

/// Smallest Ritz pairs of `(S, M)` on `span(X)`, by ascending Ritz value.
fn rayleigh_ritz(s: &DMatrix<f64>, m: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let sx = x.transpose() * s * x;
    let mx = x.transpose() * m * x;
    let mx = (&mx + mx.transpose()) * 0.5;
    let chol = mx
        .cholesky()
        .ok_or_else(|| Error::InvariantViolation("subspace lost M-definiteness".into()))?;
    let l = chol.l();
    let linv = l.clone().try_inverse().ok_or_else(|| Error::InvariantViolation("singular subspace basis".into()))?;
    let c = &linv * sx * linv.transpose();
    let eig = ((&c + c.transpose()) * 0.5).symmetric_eigen();
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(x.nrows(), idx.len());
    let back = linv.transpose() * &eig.eigenvectors;
    for (k, &i) in idx.iter().enumerate() {
        vecs.set_column(k, &(x * back.column(i)));
    }
    Ok((vals, vecs))
}

/// `β_h = √μ_min` for `(B K⁻¹ Bᵀ) q = μ M_Q q` over zero-mean pressures.
///
/// The constant pressure (kernel of `Bᵀ`) is deflated to a large eigenvalue;
/// the smallest eigenpair is then found by shift-invert subspace iteration
/// against a Cholesky factor of the deflated Schur complement.
pub fn estimate_infsup(system: &SaddleSystem, opts: &InfSupOptions) -> Result<InfSupEstimate> {
    let s = schur_complement(system)?;
    let mq = system.m_q.to_dense();
    infsup_from_schur(&s, &mq, &system.mean_row, opts).map(|(mu, it, singular)| InfSupEstimate {
        h: system.h(),
        beta: if singular { 0.0 } else { mu.max(0.0).sqrt() },
        mu_min: mu,
        iterations: it,
        singular,
    })
}

fn infsup_from_schur(s: &DMatrix<f64>, mq: &DMatrix<f64>, mean_row: &[f64], opts: &InfSupOptions) -> Result<(f64, usize, bool)> {
    let np = s.nrows();
    if np < 2 {
        return Err(Error::InvalidParameter("inf-sup needs at least two pressure DOFs".into()));
    }
    // M_Q-normalized constant: mean_row = M_Q 1, so 1ᵀ M_Q 1 = Σ mean_row
    let area: f64 = mean_row.iter().sum();
    let me = DVector::from_iterator(np, mean_row.iter().map(|&v| v / area.sqrt()));
    let scale = s.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs())) / mq.diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let kappa = 10.0 * scale.max(1.0) * np as f64;
    let sdef = s + (&me * me.transpose()) * kappa;
    // a small positive shift keeps the factorization defined when unstable
    // pairs make the Schur complement singular on zero-mean pressures
    let sigma = 1e-6 * scale.max(f64::MIN_POSITIVE);
    let chol = (&sdef + mq * sigma)
        .cholesky()
        .ok_or_else(|| Error::InvariantViolation("shifted Schur complement not positive definite".into()))?;
    let p = opts.subspace.clamp(1, np - 1);
    let mut x = DMatrix::from_fn(np, p, |i, j| (((i + 1) * (j + 3)) as f64 * 0.754_877_666).sin());
    let mut prev = f64::INFINITY;
    for it in 1..=opts.max_iterations {
        let y = chol.solve(&(mq * &x));
        let (vals, vecs) = rayleigh_ritz(&sdef, mq, &y)?;
        let mu = vals[0];
        let v = vecs.column(0);
        let r = &sdef * v - (mq * v) * mu;
        let rel = r.norm() / ((&sdef * v).norm().max(f64::MIN_POSITIVE));
        let floor = 1e-10 * scale;
        let change = (mu - prev).abs() / mu.abs().max(floor);
        // numerically singular: the pair has a nontrivial pressure kernel
        let singular = mu.abs() <= floor && prev.abs() <= floor;
        if singular || (change <= opts.tolerance && rel <= opts.tolerance.sqrt()) {
            return Ok((mu, it, singular));
        }
        prev = mu;
        // M-orthonormalize the Ritz basis for the next sweep
        x = vecs;
    }
    Err(Error::NoConvergence { iterations: opts.max_iterations, change: prev })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::ElementPair;
    use proptest::prelude::*;

    #[test]
    fn sector_membership() {
        assert!(in_sector(Complex64::new(1.0, 0.0), DEFAULT_DELTA));
        assert!(!in_sector(Complex64::new(-1.0, 0.0), DEFAULT_DELTA));
        assert!(!in_sector(Complex64::new(0.0, 0.0), DEFAULT_DELTA));
        assert!(ResolventShift::polar(1.0, 3.0 * PI / 4.0 - 1e-9, DEFAULT_DELTA).is_ok());
        assert!(matches!(
            ResolventShift::polar(1.0, 3.0 * PI / 4.0 + 1e-9, DEFAULT_DELTA),
            Err(Error::ShiftOutsideSector { .. })
        ));
        assert!(ResolventShift::zero().check().is_ok());
        assert!(ResolventShift::new(Complex64::new(1.0, 0.0), 2.0).is_err());
    }

    proptest! {
        #[test]
        fn sector_inequality(s in 0.0f64..100.0, t in 0.0f64..100.0, r in 1e-3f64..1e3, frac in -0.999f64..0.999, delta in 0.05f64..1.5) {
            let lambda = Complex64::from_polar(r, frac * (PI - delta));
            let lhs = (lambda * s + t).norm();
            let rhs = (delta / 2.0).sin() * (s * r + t);
            prop_assert!(lhs >= rhs * (1.0 - 1e-12));
        }
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let sys = SaddleSystem::stokes_2d(3, ElementPair::Mini).unwrap();
        let shift = ResolventShift::new(Complex64::new(1.0, 1.0), DEFAULT_DELTA).unwrap();
        let sol = solve_resolvent(&sys, &shift, &vec![Complex64::new(0.0, 0.0); sys.n_velocity()]).unwrap();
        assert!(sol.w.iter().all(|v| v.norm() == 0.0));
        assert!(sol.pi.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn conjugate_symmetry_and_residuals() {
        let sys = SaddleSystem::hydrostatic(2, 2, 1.0, ElementPair::TaylorHood).unwrap();
        let g: Vec<Complex64> = (0..sys.n_velocity()).map(|i| Complex64::new((i as f64).sin(), (0.3 * i as f64).cos())).collect();
        let lam = Complex64::new(-2.0, 5.0);
        let s1 = solve_resolvent(&sys, &ResolventShift::new(lam, DEFAULT_DELTA).unwrap(), &g).unwrap();
        let gc: Vec<Complex64> = g.iter().map(|z| z.conj()).collect();
        let s2 = solve_resolvent(&sys, &ResolventShift::new(lam.conj(), DEFAULT_DELTA).unwrap(), &gc).unwrap();
        for (a, b) in s1.w.iter().zip(&s2.w) {
            assert!((a.conj() - b).norm() <= 1e-12 * (1.0 + a.norm()));
        }
        assert!(s1.residual_velocity <= 1e-9);
        assert!(s1.residual_pressure <= 1e-10);
        assert!(s1.pressure_mean <= 1e-12);
    }

    #[test]
    fn projections_are_idempotent_contractions() {
        let sys = SaddleSystem::stokes_2d(4, ElementPair::TaylorHood).unwrap();
        let nv = sys.n_velocity();
        for seed in 0..5 {
            let u: Vec<f64> = (0..nv).map(|i| ((i * 7 + seed * 13) as f64 * 0.37).sin()).collect();
            let p = project_solenoidal(&sys, &u).unwrap();
            assert!(sys.m.bilinear(&p, &p) <= sys.m.bilinear(&u, &u) * (1.0 + 1e-12));
            assert!(norm_inf(&sys.b.mul_vec(&p)) <= 1e-10);
            let pp = project_solenoidal(&sys, &p).unwrap();
            assert!(p.iter().zip(&pp).all(|(a, b)| (a - b).abs() <= 1e-10));
            let r = ritz_projection(&sys, &u).unwrap();
            assert!(sys.k.bilinear(&r, &r) <= sys.k.bilinear(&u, &u) * (1.0 + 1e-12));
            let rr = ritz_projection(&sys, &r).unwrap();
            assert!(r.iter().zip(&rr).all(|(a, b)| (a - b).abs() <= 1e-10));
            // a solenoidal field is left alone by the M-projection
            let rp = project_solenoidal(&sys, &r).unwrap();
            assert!(r.iter().zip(&rp).all(|(a, b)| (a - b).abs() <= 1e-10));
        }
    }

    #[test]
    fn infsup_matches_dense_generalized_eigensolve() {
        for sys in [SaddleSystem::stokes_2d(4, ElementPair::Mini).unwrap(), SaddleSystem::hydrostatic(2, 2, 1.0, ElementPair::TaylorHood).unwrap()] {
            let est = estimate_infsup(&sys, &InfSupOptions::default()).unwrap();
            // independent route: dense inverse of K, zero-mean basis, full eigensolve
            let k = sys.k.to_dense();
            let b = sys.b.to_dense();
            let s = &b * k.try_inverse().unwrap() * b.transpose();
            let mq = sys.m_q.to_dense();
            let np = mq.nrows();
            // basis of {q : mean_row · q = 0}: e_i - (m_i / m_last) e_last
            let m = &sys.mean_row;
            let z = DMatrix::from_fn(np, np - 1, |i, j| {
                if i == j {
                    1.0
                } else if i == np - 1 {
                    -m[j] / m[np - 1]
                } else {
                    0.0
                }
            });
            let sz = z.transpose() * &s * &z;
            let mz = z.transpose() * &mq * &z;
            let l = mz.cholesky().unwrap().l();
            let li = l.try_inverse().unwrap();
            let c = &li * sz * li.transpose();
            let mu = c.symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            assert!((est.mu_min - mu).abs() <= 1e-7 * mu, "{} vs {}", est.mu_min, mu);
            assert!(est.beta > 0.0);
        }
    }
}
