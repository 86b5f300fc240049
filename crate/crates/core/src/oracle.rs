//! Reference solutions.
//!
//! On the periodic box `(0,1)² × (-D, 0)` the hydrostatic problem separates
//! into horizontal Fourier modes `e^{2πi k·x}`. For each `k` the velocity
//! splits into a component along `k`, which carries the vertical-mean
//! constraint and the pressure, and a component across `k`, which is plain
//! heat flow. Both are diagonalized in closed form:
//!
//! * across `k` (and both components when `k = 0`): `cos(μ_j z)`,
//!   `μ_j = (2j+1)π / (2D)`;
//! * along `k`: `cos(s_j z) - cos(s_j D)` where `s_j D` is the `j`-th positive
//!   root of `tan x = x`. These are the eigenfunctions of `-∂_zz` restricted to
//!   mean-zero profiles, the `z`-constant multiplier being the pressure.
//!
//! The Dirichlet Stokes problem has no closed form, so [`Stokes2dReference`]
//! provides a fine-mesh Taylor–Hood solution instead.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;

use crate::assembly::{assemble_load_with_degree, ElementPair, SaddleSystem};
use crate::evolution::{EvolutionState, Evolver, Scheme, SchemeSpec};
use crate::fespace::{FieldVector, VectorField};
use crate::quadrature::integrate_interval;
use crate::sparse::norm_inf;
use crate::{Error, Result};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Which part of the horizontal velocity a mode describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModeComponent {
    /// along `k/|k|`; constrained to zero vertical mean
    Parallel,
    /// along `(-k₂, k₁)/|k|`
    Perpendicular,
    /// `k = 0`: the fixed horizontal axis 0 (x) or 1 (y), unconstrained
    Free(usize),
}

impl ModeComponent {
    pub fn name(self) -> String {
        match self {
            Self::Parallel => "parallel".into(),
            Self::Perpendicular => "perpendicular".into(),
            Self::Free(a) => format!("free_{}", ["x", "y"][a.min(1)]),
        }
    }
}

/// `j`-th positive root (`j ≥ 1`) of `tan x = x`, which lies in
/// `(jπ, jπ + π/2)`.
pub fn tan_root(j: usize) -> f64 {
    assert!(j >= 1, "roots of tan x = x are counted from 1");
    let g = |x: f64| x.sin() - x * x.cos();
    let mut lo = j as f64 * PI;
    let mut hi = lo + 0.5 * PI;
    let glo = g(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (g(mid) > 0.0) == (glo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // one Newton polish; g' = x sin x
    let x = 0.5 * (lo + hi);
    let x1 = x - g(x) / (x * x.sin());
    if (lo..=hi).contains(&x1) {
        x1
    } else {
        x
    }
}

/// One separated solution `Re[e^{2πi k·x}] f_j(z) e` of the hydrostatic
/// problem, decaying like `e^{-νt}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HydrostaticMode {
    pub k: [i64; 2],
    pub j: usize,
    pub component: ModeComponent,
    pub depth: f64,
    s: f64,
}

impl HydrostaticMode {
    pub fn new(k: [i64; 2], j: usize, component: ModeComponent, depth: f64) -> Result<Self> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(Error::InvalidParameter(format!("depth must be positive, got {depth}")));
        }
        let zero = k == [0, 0];
        let s = match component {
            ModeComponent::Free(a) if zero && a < 2 => (2 * j + 1) as f64 * PI / (2.0 * depth),
            ModeComponent::Perpendicular if !zero => (2 * j + 1) as f64 * PI / (2.0 * depth),
            ModeComponent::Parallel if !zero => tan_root(j + 1) / depth,
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "component {} is not defined for k = ({}, {})",
                    component.name(),
                    k[0],
                    k[1]
                )))
            }
        };
        Ok(Self { k, j, component, depth, s })
    }

    pub fn vertical_wavenumber(&self) -> f64 {
        self.s
    }

    fn k_norm(&self) -> f64 {
        ((self.k[0] * self.k[0] + self.k[1] * self.k[1]) as f64).sqrt()
    }

    /// `4π²|k|²`
    pub fn horizontal_rate(&self) -> f64 {
        4.0 * PI * PI * (self.k[0] * self.k[0] + self.k[1] * self.k[1]) as f64
    }

    /// Decay rate `ν = 4π²|k|² + s²`.
    pub fn rate(&self) -> f64 {
        self.horizontal_rate() + self.s * self.s
    }

    fn offset(&self) -> f64 {
        match self.component {
            ModeComponent::Parallel => (self.s * self.depth).cos(),
            _ => 0.0,
        }
    }

    pub fn profile(&self, z: f64) -> f64 {
        (self.s * z).cos() - self.offset()
    }

    pub fn profile_dz(&self, z: f64) -> f64 {
        -self.s * (self.s * z).sin()
    }

    pub fn profile_dzz(&self, z: f64) -> f64 {
        -self.s * self.s * (self.s * z).cos()
    }

    /// `∫ f² dz`
    pub fn profile_norm2(&self) -> f64 {
        match self.component {
            ModeComponent::Parallel => 0.5 * self.depth * (self.s * self.depth).sin().powi(2),
            _ => 0.5 * self.depth,
        }
    }

    /// `∫ f dz`, zero for parallel modes.
    pub fn profile_integral(&self) -> f64 {
        (self.s * self.depth).sin() / self.s - self.depth * self.offset()
    }

    /// Horizontal unit direction of the velocity.
    pub fn direction(&self) -> [f64; 2] {
        let kn = self.k_norm();
        let (k1, k2) = (self.k[0] as f64, self.k[1] as f64);
        match self.component {
            ModeComponent::Parallel => [k1 / kn, k2 / kn],
            ModeComponent::Perpendicular => [-k2 / kn, k1 / kn],
            ModeComponent::Free(0) => [1.0, 0.0],
            ModeComponent::Free(_) => [0.0, 1.0],
        }
    }

    /// Pressure per unit velocity amplitude: `p = Re[a P e^{2πi k·x}]`.
    pub fn pressure_factor(&self) -> Complex64 {
        match self.component {
            ModeComponent::Parallel => {
                I * (self.s * self.s * (self.s * self.depth).cos() / (2.0 * PI * self.k_norm()))
            }
            _ => Complex64::new(0.0, 0.0),
        }
    }

    fn phase(&self, p: &[f64; 3]) -> Complex64 {
        let theta = 2.0 * PI * (self.k[0] as f64 * p[0] + self.k[1] as f64 * p[1]);
        let (s, c) = theta.sin_cos();
        Complex64::new(c, s)
    }
}

/// A mode with its (complex) amplitude at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeTerm {
    pub mode: HydrostaticMode,
    pub amplitude: Complex64,
}

/// Superposition of separated modes. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub depth: f64,
    pub terms: Vec<ModeTerm>,
}

/// Value and gradient of a (complex-weighted) oracle field.
#[derive(Debug, Clone, Copy)]
struct Sample {
    value: [Complex64; 3],
    grad: [[Complex64; 3]; 3],
}

impl OracleSolution {
    pub fn new(depth: f64, terms: Vec<ModeTerm>) -> Result<Self> {
        for t in &terms {
            if t.mode.depth != depth {
                return Err(Error::InvalidParameter(format!("mode depth {} differs from {depth}", t.mode.depth)));
            }
            if !t.amplitude.re.is_finite() || !t.amplitude.im.is_finite() {
                return Err(Error::InvalidParameter("non-finite modal amplitude".into()));
            }
        }
        Ok(Self { depth, terms })
    }

    pub fn single(mode: HydrostaticMode, amplitude: Complex64) -> Self {
        Self { depth: mode.depth, terms: vec![ModeTerm { mode, amplitude }] }
    }

    /// Checkerboard datum [`checkerboard_value`] expanded in the odd
    /// wavenumbers `|k₁|, |k₂| ≤ k_max` and `j_max` vertical modes per
    /// component. The datum is already solenoidal, so each parallel part lies
    /// in the constrained basis.
    pub fn checkerboard(depth: f64, k_max: i64, j_max: usize) -> Result<Self> {
        if k_max < 1 || j_max == 0 {
            return Err(Error::InvalidParameter("checkerboard needs k_max ≥ 1 and j_max ≥ 1".into()));
        }
        // square wave s(x) = Σ_{k odd} 2/(iπk) e^{2πikx}
        let sq = |k: i64| Complex64::new(0.0, -2.0 / (PI * k as f64));
        // ⟨ω, cos(σz)⟩ for ω = sign(z + D/2)
        let omega_cos = |s: f64| (2.0 * (0.5 * s * depth).sin() - (s * depth).sin()) / s;
        let mut terms = Vec::new();
        for j in 0..j_max {
            let mode = HydrostaticMode::new([0, 0], j, ModeComponent::Free(0), depth)?;
            let amp = 0.5 * omega_cos(mode.s) / mode.profile_norm2();
            terms.push(ModeTerm { mode, amplitude: Complex64::new(amp, 0.0) });
        }
        let odd: Vec<i64> = (-k_max..=k_max).filter(|k| k.rem_euclid(2) == 1).collect();
        for &k1 in odd.iter().filter(|&&k| k > 0) {
            for &k2 in &odd {
                let kn = ((k1 * k1 + k2 * k2) as f64).sqrt();
                // Re-form amplitude 2·(½ ŝ(k₁) ŝ(k₂)) times the e_x projection
                let base = sq(k1) * sq(k2);
                for j in 0..j_max {
                    let par = HydrostaticMode::new([k1, k2], j, ModeComponent::Parallel, depth)?;
                    // ⟨ω, 1⟩ = 0, so the offset does not contribute
                    let c = omega_cos(par.s) / par.profile_norm2();
                    terms.push(ModeTerm { mode: par, amplitude: base * (k1 as f64 / kn) * c });
                    let perp = HydrostaticMode::new([k1, k2], j, ModeComponent::Perpendicular, depth)?;
                    let c = omega_cos(perp.s) / perp.profile_norm2();
                    terms.push(ModeTerm { mode: perp, amplitude: base * (-(k2 as f64) / kn) * c });
                }
            }
        }
        Self::new(depth, terms)
    }

    /// Drop terms whose size at `t_min` is below `rel_tol` times the largest.
    pub fn pruned(&self, t_min: f64, rel_tol: f64) -> Self {
        let size = |t: &ModeTerm| t.amplitude.norm() * (-t.mode.rate() * t_min).exp() * (1.0 + t.mode.rate());
        let max = self.terms.iter().map(size).fold(0.0, f64::max);
        let terms = self.terms.iter().filter(|t| size(t) > rel_tol * max).copied().collect();
        Self { depth: self.depth, terms }
    }

    pub fn mode_count(&self) -> usize {
        self.terms.len()
    }

    pub fn max_horizontal_wavenumber(&self) -> i64 {
        self.terms.iter().map(|t| t.mode.k[0].abs().max(t.mode.k[1].abs())).max().unwrap_or(0)
    }

    fn max_vertical_wavenumber(&self) -> f64 {
        self.terms.iter().map(|t| t.mode.s).fold(0.0, f64::max)
    }

    fn sample(&self, p: &[f64; 3], weight: &dyn Fn(&HydrostaticMode) -> Complex64) -> Sample {
        let zero = Complex64::new(0.0, 0.0);
        let mut value = [zero; 3];
        let mut grad = [[zero; 3]; 3];
        for term in &self.terms {
            let m = &term.mode;
            let kappa = weight(m);
            if kappa == zero {
                continue;
            }
            let e = term.amplitude * m.phase(p);
            let r = e.re;
            let rx = (e * I * (2.0 * PI * m.k[0] as f64)).re;
            let ry = (e * I * (2.0 * PI * m.k[1] as f64)).re;
            let f = m.profile(p[2]);
            let fz = m.profile_dz(p[2]);
            let dir = m.direction();
            for c in 0..2 {
                let kd = kappa * dir[c];
                value[c] += kd * (r * f);
                grad[c][0] += kd * (rx * f);
                grad[c][1] += kd * (ry * f);
                grad[c][2] += kd * (r * fz);
            }
        }
        Sample { value, grad }
    }

    fn pressure_sample(&self, p: &[f64; 3], weight: &dyn Fn(&HydrostaticMode) -> Complex64) -> (Complex64, [Complex64; 2]) {
        let zero = Complex64::new(0.0, 0.0);
        let mut val = zero;
        let mut grad = [zero; 2];
        for term in &self.terms {
            let m = &term.mode;
            if m.component != ModeComponent::Parallel {
                continue;
            }
            let kappa = weight(m);
            let e = term.amplitude * m.pressure_factor() * m.phase(p);
            val += kappa * e.re;
            for d in 0..2 {
                grad[d] += kappa * (e * I * (2.0 * PI * m.k[d] as f64)).re;
            }
        }
        (val, grad)
    }

    /// Velocity at `(x, y, z)` and time `t` (third component zero).
    pub fn velocity(&self, p: &[f64; 3], t: f64) -> [f64; 3] {
        re3(self.sample(p, &|m| decay(m, t)).value)
    }

    pub fn velocity_gradient(&self, p: &[f64; 3], t: f64) -> [[f64; 3]; 3] {
        re33(self.sample(p, &|m| decay(m, t)).grad)
    }

    pub fn velocity_dt(&self, p: &[f64; 3], t: f64) -> [f64; 3] {
        re3(self.sample(p, &|m| decay(m, t) * -m.rate()).value)
    }

    /// Surface pressure at `(x, y)`; `p[2]` is ignored.
    pub fn pressure(&self, p: &[f64; 3], t: f64) -> f64 {
        self.pressure_sample(p, &|m| decay(m, t)).0.re
    }

    /// `(λ + A)⁻¹ P_σ g` for `g` the field at `t = 0`.
    pub fn resolvent_velocity(&self, p: &[f64; 3], lambda: Complex64) -> [Complex64; 3] {
        self.sample(p, &|m| 1.0 / (lambda + m.rate())).value
    }

    pub fn resolvent_gradient(&self, p: &[f64; 3], lambda: Complex64) -> [[Complex64; 3]; 3] {
        self.sample(p, &|m| 1.0 / (lambda + m.rate())).grad
    }

    pub fn resolvent_pressure(&self, p: &[f64; 3], lambda: Complex64) -> Complex64 {
        self.pressure_sample(p, &|m| 1.0 / (lambda + m.rate())).0
    }

    /// `‖u(t)‖²_{L²(Ω)}` from the modal amplitudes.
    pub fn l2_norm2_parseval(&self, t: f64) -> f64 {
        self.parseval(&|m| decay(m, t))
    }

    /// `‖(λ + A)⁻¹ g‖²_{L²(Ω)}` from the modal amplitudes.
    pub fn resolvent_l2_norm2_parseval(&self, lambda: Complex64) -> f64 {
        self.parseval(&|m| 1.0 / (lambda + m.rate()))
    }

    fn parseval(&self, weight: &dyn Fn(&HydrostaticMode) -> Complex64) -> f64 {
        // Re[a e^{iθ}] = (a e^{iθ} + ā e^{-iθ}) / 2; the directions of ±k
        // differ by a sign for the k-relative components.
        let mut coeffs: BTreeMap<([i64; 2], ModeComponent, usize), (Complex64, f64)> = BTreeMap::new();
        for term in &self.terms {
            let m = &term.mode;
            let c = weight(m) * term.amplitude * 0.5;
            let cbar = weight(m) * term.amplitude.conj() * 0.5;
            let flip = if matches!(m.component, ModeComponent::Free(_)) { 1.0 } else { -1.0 };
            let norm2 = m.profile_norm2();
            coeffs.entry((m.k, m.component, m.j)).or_insert((Complex64::new(0.0, 0.0), norm2)).0 += c;
            coeffs
                .entry(([-m.k[0], -m.k[1]], m.component, m.j))
                .or_insert((Complex64::new(0.0, 0.0), norm2))
                .0 += cbar * flip;
        }
        coeffs.values().map(|(c, n2)| c.norm_sqr() * n2).sum()
    }

    /// `‖u(t)‖²_{L²(Ω)}` by tensor quadrature: trapezoidal in `(x, y)`, exact
    /// for the trigonometric content, and composite Gauss in `z`.
    pub fn l2_norm2_quadrature(&self, t: f64) -> f64 {
        let nx = (4 * self.max_horizontal_wavenumber() + 8) as usize;
        let pieces = ((self.max_vertical_wavenumber() * self.depth / PI).ceil() as usize + 4).max(8);
        let mut acc = 0.0;
        for ix in 0..nx {
            for iy in 0..nx {
                let (x, y) = (ix as f64 / nx as f64, iy as f64 / nx as f64);
                acc += integrate_interval(
                    |z| {
                        let u = self.velocity(&[x, y, z], t);
                        u[0] * u[0] + u[1] * u[1]
                    },
                    -self.depth,
                    0.0,
                    12,
                    pieces,
                );
            }
        }
        acc / (nx * nx) as f64
    }

    /// Strong-form check at `n_points` quasi-random points per sample time.
    pub fn selfcheck(&self, t_samples: &[f64], n_points: usize) -> SelfCheckReport {
        let s_max = self.max_vertical_wavenumber().max(1.0);
        let hz = 0.03 / s_max;
        const C6: [f64; 7] = [1.0 / 90.0, -3.0 / 20.0, 1.5, -49.0 / 18.0, 1.5, -3.0 / 20.0, 1.0 / 90.0];
        let pieces = ((s_max * self.depth / PI).ceil() as usize + 4).max(8);
        let mut report = SelfCheckReport::default();
        for &t in t_samples {
            let mut res_max: f64 = 0.0;
            let mut scale: f64 = 0.0;
            let mut div_max: f64 = 0.0;
            let mut div_scale: f64 = 0.0;
            for q in 0..n_points {
                let p = quasi_random_point(q, self.depth);
                let ut = re3(self.sample(&p, &|m| decay(m, t) * -m.rate()).value);
                let lap_h = re3(self.sample(&p, &|m| decay(m, t) * -m.horizontal_rate()).value);
                let mut uzz = [0.0; 3];
                for (o, c) in C6.iter().enumerate() {
                    let z = p[2] + (o as f64 - 3.0) * hz;
                    let u = self.velocity(&[p[0], p[1], z], t);
                    for d in 0..2 {
                        uzz[d] += c * u[d] / (hz * hz);
                    }
                }
                let (_, gp) = self.pressure_sample(&p, &|m| decay(m, t));
                for d in 0..2 {
                    let r = ut[d] - lap_h[d] - uzz[d] + gp[d].re;
                    res_max = res_max.max(r.abs());
                    scale = scale.max(ut[d].abs() + lap_h[d].abs() + uzz[d].abs() + gp[d].re.abs());
                }
                // div_H ū with the vertical mean taken by quadrature
                let mut div = 0.0;
                let mut dscale = 0.0;
                for term in &self.terms {
                    let m = &term.mode;
                    let w = decay(m, t).re;
                    let dir = m.direction();
                    let kd = m.k[0] as f64 * dir[0] + m.k[1] as f64 * dir[1];
                    if kd == 0.0 {
                        continue;
                    }
                    let fbar = integrate_interval(|z| m.profile(z), -self.depth, 0.0, 12, pieces);
                    let e = term.amplitude * w * m.phase(&p) * I * (2.0 * PI * kd);
                    div += e.re * fbar;
                    let fabs = integrate_interval(|z| m.profile(z).abs(), -self.depth, 0.0, 12, pieces);
                    dscale += e.norm() * fabs;
                }
                div_max = div_max.max(div.abs());
                div_scale = div_scale.max(dscale);
            }
            report.momentum = report.momentum.max(ratio(res_max, scale));
            report.constraint = report.constraint.max(ratio(div_max, div_scale));
        }
        // pressure recovered by integrating the momentum equation in z:
        // 2πi|k| D P = -∂_z u(-D) for each constrained profile
        let mut worst: f64 = 0.0;
        for term in &self.terms {
            let m = &term.mode;
            if m.component != ModeComponent::Parallel {
                continue;
            }
            let kn = m.k_norm();
            let recovered = -m.profile_dz(-self.depth) / (I * (2.0 * PI * kn * self.depth));
            let p = m.pressure_factor();
            worst = worst.max(ratio((recovered - p).norm(), p.norm()));
        }
        report.pressure_identity = worst;
        let t0 = t_samples.first().copied().unwrap_or(0.0);
        let pars = self.l2_norm2_parseval(t0);
        let quad = self.l2_norm2_quadrature(t0);
        report.parseval = ratio((pars - quad).abs(), pars);
        report
    }
}

fn decay(m: &HydrostaticMode, t: f64) -> Complex64 {
    Complex64::new((-m.rate() * t).exp(), 0.0)
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        a
    }
}

fn re3(v: [Complex64; 3]) -> [f64; 3] {
    [v[0].re, v[1].re, v[2].re]
}

fn re33(g: [[Complex64; 3]; 3]) -> [[f64; 3]; 3] {
    g.map(re3)
}

/// Low-discrepancy points in the box (additive recurrence with the plastic
/// constant), kept strictly inside in `z`.
pub fn quasi_random_point(i: usize, depth: f64) -> [f64; 3] {
    let g = 1.220_744_084_605_759_5_f64;
    let a = [1.0 / g, 1.0 / (g * g), 1.0 / (g * g * g)];
    let f = |k: usize| (0.5 + a[k] * (i + 1) as f64).fract();
    [f(0), f(1), -depth * (0.02 + 0.96 * f(2))]
}

/// Relative residuals from [`OracleSolution::selfcheck`]: each is the largest
/// defect divided by the largest size of the terms that make it up.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SelfCheckReport {
    pub momentum: f64,
    pub constraint: f64,
    pub pressure_identity: f64,
    pub parseval: f64,
}

impl SelfCheckReport {
    pub fn max(&self) -> f64 {
        self.momentum.max(self.constraint).max(self.pressure_identity).max(self.parseval)
    }
}

/// The checkerboard datum `χ(x, y) ω(z) e_x`, with `χ` the indicator of the
/// squares where the square waves in `x` and `y` agree and
/// `ω = sign(z + D/2)`.
pub fn checkerboard_value(p: &[f64; 3], depth: f64) -> [f64; 3] {
    let sq = |x: f64| if x.rem_euclid(1.0) < 0.5 { 1.0 } else { -1.0 };
    let chi = 0.5 * (1.0 + sq(p[0]) * sq(p[1]));
    let omega = if p[2] + 0.5 * depth >= 0.0 { 1.0 } else { -1.0 };
    [chi * omega, 0.0, 0.0]
}

/// Exact time evolution of one horizontal wavenumber from a given vertical
/// profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeEvolution {
    pub modes: Vec<HydrostaticMode>,
    pub coefficients: Vec<f64>,
}

impl ModeEvolution {
    pub fn profile(&self, z: f64, t: f64) -> f64 {
        self.modes.iter().zip(&self.coefficients).map(|(m, c)| c * (-m.rate() * t).exp() * m.profile(z)).sum()
    }

    /// `P(t)` with `p = Re[P(t) e^{2πi k·x}]` for a unit horizontal amplitude.
    pub fn pressure_amplitude(&self, t: f64) -> Complex64 {
        self.modes
            .iter()
            .zip(&self.coefficients)
            .map(|(m, c)| m.pressure_factor() * (c * (-m.rate() * t).exp()))
            .sum()
    }

    pub fn vertical_integral(&self, t: f64) -> f64 {
        self.modes.iter().zip(&self.coefficients).map(|(m, c)| c * (-m.rate() * t).exp() * m.profile_integral()).sum()
    }

    pub fn to_solution(&self) -> OracleSolution {
        let depth = self.modes.first().map_or(1.0, |m| m.depth);
        let terms = self
            .modes
            .iter()
            .zip(&self.coefficients)
            .map(|(&mode, &c)| ModeTerm { mode, amplitude: Complex64::new(c, 0.0) })
            .collect();
        OracleSolution { depth, terms }
    }
}

/// Expand `initial_profile` in the `j_max` eigenprofiles of the component and
/// evolve each with its own rate.
pub fn solve_mode(
    k: [i64; 2],
    component: ModeComponent,
    initial_profile: &dyn Fn(f64) -> f64,
    depth: f64,
    j_max: usize,
) -> Result<ModeEvolution> {
    let pieces = (4 * j_max).max(64);
    if component == ModeComponent::Parallel {
        let mean = integrate_interval(initial_profile, -depth, 0.0, 12, pieces);
        if mean.abs() > 1e-8 {
            return Err(Error::ConstraintViolation(mean));
        }
    }
    let mut modes = Vec::with_capacity(j_max);
    let mut coefficients = Vec::with_capacity(j_max);
    for j in 0..j_max {
        let m = HydrostaticMode::new(k, j, component, depth)?;
        let ip = integrate_interval(|z| initial_profile(z) * m.profile(z), -depth, 0.0, 12, pieces);
        coefficients.push(ip / m.profile_norm2());
        modes.push(m);
    }
    Ok(ModeEvolution { modes, coefficients })
}

/// Fine-mesh Taylor–Hood reference for the Dirichlet Stokes problem, stored
/// at a set of sample times.
pub struct Stokes2dReference {
    pub system: SaddleSystem,
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<EvolutionState>,
}

impl Stokes2dReference {
    /// Run BDF2 on the `n`-mesh from `P_{h,σ} u₀`.
    pub fn compute(n: usize, dt: f64, u0: &dyn VectorField<f64>, sample_times: &[f64]) -> Result<Self> {
        let system = SaddleSystem::stokes_2d(n, ElementPair::TaylorHood)?;
        let t_end = sample_times.iter().copied().fold(0.0, f64::max);
        let spec = SchemeSpec::new(Scheme::Bdf2, dt, t_end)?;
        let evolver = Evolver::new(&system, spec)?;
        let load = assemble_load_with_degree(&system.velocity, u0, 8)?;
        let init = evolver.initialize_load(&load)?;
        let states = evolver.evolve(init, sample_times)?;
        drop(evolver);
        Ok(Self { system, dt, times: sample_times.to_vec(), states })
    }

    pub fn state_at(&self, t: f64) -> Option<&EvolutionState> {
        self.times.iter().position(|&s| (s - t).abs() <= 1e-12 * t.abs().max(1.0)).map(|i| &self.states[i])
    }

    pub fn velocity_field(&self, t: f64) -> Option<FieldVector<f64>> {
        self.state_at(t).map(|s| self.system.velocity.expand(&s.u))
    }

    /// `‖B u‖_∞` over all stored states.
    pub fn divergence_residual(&self) -> f64 {
        self.states.iter().map(|s| norm_inf(&self.system.b.mul_vec(&s.u))).fold(0.0, f64::max)
    }
}

/// The oracle velocity at a fixed time as a [`VectorField`] with gradient.
pub struct OracleVelocity<'a> {
    pub oracle: &'a OracleSolution,
    pub t: f64,
}

impl VectorField<f64> for OracleVelocity<'_> {
    fn value(&self, p: &[f64; 3]) -> [f64; 3] {
        self.oracle.velocity(p, self.t)
    }
    fn gradient(&self, p: &[f64; 3]) -> Option<[[f64; 3]; 3]> {
        Some(self.oracle.velocity_gradient(p, self.t))
    }
}

/// The oracle time derivative at a fixed time.
pub struct OracleVelocityDt<'a> {
    pub oracle: &'a OracleSolution,
    pub t: f64,
}

impl VectorField<f64> for OracleVelocityDt<'_> {
    fn value(&self, p: &[f64; 3]) -> [f64; 3] {
        self.oracle.velocity_dt(p, self.t)
    }
}

/// The oracle surface pressure at a fixed time as a scalar field.
pub struct OraclePressure<'a> {
    pub oracle: &'a OracleSolution,
    pub t: f64,
}

impl VectorField<f64> for OraclePressure<'_> {
    fn value(&self, p: &[f64; 3]) -> [f64; 3] {
        [self.oracle.pressure(p, self.t), 0.0, 0.0]
    }
}

/// The continuous resolvent solution `(λ + A)⁻¹ g`.
pub struct OracleResolvent<'a> {
    pub oracle: &'a OracleSolution,
    pub lambda: Complex64,
}

impl VectorField<Complex64> for OracleResolvent<'_> {
    fn value(&self, p: &[f64; 3]) -> [Complex64; 3] {
        self.oracle.resolvent_velocity(p, self.lambda)
    }
    fn gradient(&self, p: &[f64; 3]) -> Option<[[Complex64; 3]; 3]> {
        Some(self.oracle.resolvent_gradient(p, self.lambda))
    }
}

/// The continuous resolvent pressure as a scalar field.
pub struct OracleResolventPressure<'a> {
    pub oracle: &'a OracleSolution,
    pub lambda: Complex64,
}

impl VectorField<Complex64> for OracleResolventPressure<'_> {
    fn value(&self, p: &[f64; 3]) -> [Complex64; 3] {
        let z = Complex64::new(0.0, 0.0);
        [self.oracle.resolvent_pressure(p, self.lambda), z, z]
    }
}

/// The source `g` (the field at `t = 0`) as a complex field.
pub struct OracleSource<'a> {
    pub oracle: &'a OracleSolution,
}

impl VectorField<Complex64> for OracleSource<'_> {
    fn value(&self, p: &[f64; 3]) -> [Complex64; 3] {
        self.oracle.velocity(p, 0.0).map(|v| Complex64::new(v, 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn modes8(depth: f64) -> OracleSolution {
        use ModeComponent::*;
        let spec = [
            ([0, 0], 0, Free(0), 1.0, 0.0),
            ([0, 0], 1, Free(1), -0.3, 0.0),
            ([1, 0], 0, Parallel, 0.7, 0.2),
            ([1, 0], 2, Perpendicular, 0.4, -0.1),
            ([0, 1], 1, Parallel, -0.5, 0.5),
            ([1, -1], 0, Parallel, 0.25, 0.0),
            ([2, 1], 0, Perpendicular, 0.0, 0.6),
            ([1, 2], 3, Parallel, 0.1, -0.2),
        ];
        let terms = spec
            .iter()
            .map(|&(k, j, c, re, im)| ModeTerm {
                mode: HydrostaticMode::new(k, j, c, depth).unwrap(),
                amplitude: Complex64::new(re, im),
            })
            .collect();
        OracleSolution::new(depth, terms).unwrap()
    }

    #[test]
    fn tan_roots_bracketed_and_exact() {
        assert_relative_eq!(tan_root(1), 4.493_409_457_909_064, max_relative = 1e-14);
        assert_relative_eq!(tan_root(2), 7.725_251_836_937_707, max_relative = 1e-14);
        for j in 1..200 {
            let x = tan_root(j);
            assert!(x > j as f64 * PI && x < j as f64 * PI + 0.5 * PI);
            assert!((x.tan() - x).abs() < 1e-9 * x * x, "root {j}");
        }
    }

    #[test]
    fn profiles_satisfy_boundary_conditions_and_constraint() {
        for depth in [0.5, 1.0, 2.0] {
            for j in 0..20 {
                for (k, c) in [([0, 0], ModeComponent::Free(1)), ([1, 2], ModeComponent::Perpendicular), ([1, 2], ModeComponent::Parallel)] {
                    let m = HydrostaticMode::new(k, j, c, depth).unwrap();
                    assert!(m.profile(-depth).abs() < 1e-13);
                    assert!(m.profile_dz(0.0).abs() < 1e-13);
                    let n2 = integrate_interval(|z| m.profile(z).powi(2), -depth, 0.0, 12, 64);
                    assert_relative_eq!(n2, m.profile_norm2(), max_relative = 1e-10);
                    if c == ModeComponent::Parallel {
                        let mean = integrate_interval(|z| m.profile(z), -depth, 0.0, 12, 64);
                        assert!(mean.abs() < 1e-10, "{mean}");
                        assert!(m.profile_integral().abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn wrong_component_for_wavenumber_rejected() {
        assert!(HydrostaticMode::new([0, 0], 0, ModeComponent::Parallel, 1.0).is_err());
        assert!(HydrostaticMode::new([1, 0], 0, ModeComponent::Free(0), 1.0).is_err());
        assert!(HydrostaticMode::new([1, 0], 0, ModeComponent::Parallel, 0.0).is_err());
    }

    #[test]
    fn solve_mode_barotropic_heat_flow() {
        let depth = 1.0;
        let mu0 = PI / (2.0 * depth);
        let ev = solve_mode([0, 0], ModeComponent::Free(0), &|z| (mu0 * z).cos(), depth, 8).unwrap();
        for t in [0.0, 0.1, 0.5] {
            for z in [-0.9, -0.5, -0.1] {
                assert_relative_eq!(ev.profile(z, t), (-mu0 * mu0 * t).exp() * (mu0 * z).cos(), epsilon = 1e-12);
            }
            assert_eq!(ev.pressure_amplitude(t), Complex64::new(0.0, 0.0));
        }
    }

    #[test]
    fn solve_mode_perpendicular_rate() {
        for j in 0..4 {
            let m = HydrostaticMode::new([1, 0], j, ModeComponent::Perpendicular, 1.0).unwrap();
            let mu = (2 * j + 1) as f64 * PI / 2.0;
            assert_relative_eq!(m.rate(), 4.0 * PI * PI + mu * mu, max_relative = 1e-15);
            let ev = solve_mode([1, 0], ModeComponent::Perpendicular, &|z| (mu * z).cos(), 1.0, 8).unwrap();
            let r = -(ev.profile(-0.3, 0.01) / ev.profile(-0.3, 0.0)).ln() / 0.01;
            assert_relative_eq!(r, m.rate(), max_relative = 1e-10);
        }
    }

    #[test]
    fn solve_mode_parallel_keeps_constraint() {
        let depth = 1.0;
        // a mean-zero cubic vanishing at the bottom with zero slope on top
        let g = |z: f64| {
            let w = z + 1.0;
            0.75 * w - 1.875 * w * w + w * w * w
        };
        let ev = solve_mode([1, 0], ModeComponent::Parallel, &g, depth, 64).unwrap();
        for t in [0.0, 0.001, 0.01, 0.1] {
            assert!(ev.vertical_integral(t).abs() < 1e-10);
        }
        let bad = |z: f64| (0.5 * PI * z).cos();
        assert!(matches!(
            solve_mode([1, 0], ModeComponent::Parallel, &bad, depth, 8),
            Err(Error::ConstraintViolation(_))
        ));
    }

    #[test]
    fn single_mode_selfcheck() {
        let m = HydrostaticMode::new([1, 0], 0, ModeComponent::Parallel, 1.0).unwrap();
        let sol = OracleSolution::single(m, Complex64::new(1.0, 0.0));
        let rep = sol.selfcheck(&[0.0, 0.01, 0.05], 100);
        assert!(rep.momentum < 1e-8, "{rep:?}");
        assert!(rep.constraint < 1e-9, "{rep:?}");
        assert!(rep.pressure_identity < 1e-7, "{rep:?}");
        assert!(rep.parseval < 1e-8, "{rep:?}");
    }

    #[test]
    fn superposition_selfcheck() {
        let sol = modes8(1.3);
        let rep = sol.selfcheck(&[0.0, 0.02, 0.1], 100);
        assert!(rep.max() < 1e-7, "{rep:?}");
    }

    #[test]
    fn pressure_has_zero_mean_and_amplitudes_decay() {
        let sol = modes8(1.0);
        let n = 24;
        for t in [0.0, 0.05] {
            let mut mean = 0.0;
            for i in 0..n {
                for j in 0..n {
                    mean += sol.pressure(&[i as f64 / n as f64, j as f64 / n as f64, 0.0], t);
                }
            }
            assert!(mean.abs() / ((n * n) as f64) < 1e-14);
        }
        let mut last = f64::INFINITY;
        for t in [0.0, 0.01, 0.02, 0.04, 0.08] {
            let e = sol.l2_norm2_parseval(t);
            assert!(e <= last);
            last = e;
        }
    }

    #[test]
    fn checkerboard_series_converges_to_datum() {
        let depth = 1.0;
        let sol = OracleSolution::checkerboard(depth, 31, 64).unwrap();
        assert_eq!(sol.mode_count(), 64 + 16 * 32 * 64 * 2);
        // ‖u₀‖² = ½ D; the truncated series captures most of it
        let e0 = sol.l2_norm2_parseval(0.0);
        assert!(e0 < 0.5 * depth && e0 > 0.97 * 0.5 * depth, "{e0}");
        // away from the jumps the partial sums approach the datum
        let p = [0.23, 0.61, -0.3];
        let u = sol.velocity(&p, 0.0);
        assert!((u[0] - checkerboard_value(&p, depth)[0]).abs() < 0.05, "{u:?}");
        assert!(u[1].abs() < 0.05);
    }

    #[test]
    fn checkerboard_projection_matches_quadrature() {
        let depth = 1.0;
        let sol = OracleSolution::checkerboard(depth, 3, 6).unwrap();
        let omega = |z: f64| if z + 0.5 * depth >= 0.0 { 1.0 } else { -1.0 };
        // even piece count keeps the jump on a panel boundary
        for term in sol.terms.iter().filter(|t| t.mode.k == [1, 1]) {
            let m = term.mode;
            let ev = solve_mode(m.k, m.component, &omega, depth, 6).unwrap();
            let base = -4.0 / (PI * PI);
            let sign = if m.component == ModeComponent::Parallel { 1.0 } else { -1.0 };
            let proj = sign / 2f64.sqrt();
            assert_relative_eq!(term.amplitude.re, base * proj * ev.coefficients[m.j], epsilon = 1e-12);
            assert!(term.amplitude.im.abs() < 1e-15);
        }
    }

    #[test]
    fn pruned_checkerboard_selfcheck() {
        let sol = OracleSolution::checkerboard(1.0, 31, 64).unwrap().pruned(0.02, 1e-15);
        assert!(sol.mode_count() < 4000, "{}", sol.mode_count());
        let rep = sol.selfcheck(&[0.02, 0.32], 20);
        assert!(rep.momentum < 1e-7 && rep.constraint < 1e-9, "{rep:?}");
    }

    #[test]
    fn resolvent_field_solves_shifted_problem() {
        let sol = modes8(1.0);
        let lambda = Complex64::from_polar(10.0, 0.75 * PI);
        let p = [0.3, 0.7, -0.4];
        // (λ - Δ) w + ∇π = g, checked with the exact Fourier factors and
        // finite differences in z
        let hz = 1e-3;
        let w = sol.resolvent_velocity(&p, lambda);
        let up = sol.resolvent_velocity(&[p[0], p[1], p[2] + hz], lambda);
        let dn = sol.resolvent_velocity(&[p[0], p[1], p[2] - hz], lambda);
        let lap_h = sol.sample(&p, &|m| -m.horizontal_rate() / (lambda + m.rate())).value;
        let (_, gp) = sol.pressure_sample(&p, &|m| 1.0 / (lambda + m.rate()));
        let g = sol.velocity(&p, 0.0);
        for d in 0..2 {
            let wzz = (up[d] - 2.0 * w[d] + dn[d]) / (hz * hz);
            let r = lambda * w[d] - lap_h[d] - wzz + gp[d] - g[d];
            assert!(r.norm() < 1e-4, "{r}");
        }
    }
}
