//! Error norms, rate extraction and the convergence, singularity and
//! resolvent studies.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::assembly::{assemble_h1_load, assemble_load_with_degree, ElementPair, ProblemKind, SaddleSystem};
use crate::evolution::{EvolutionState, Evolver, Scheme, SchemeSpec};
use crate::fespace::{eval_local_basis, CellGeometry, FieldVector, FunctionSpace, Norm, VectorField};
use crate::ldl::LdlFactor;
use crate::oracle::{
    checkerboard_value, OraclePressure, OracleResolvent, OracleResolventPressure, OracleSolution, OracleSource,
    OracleVelocity, OracleVelocityDt, Stokes2dReference,
};
use crate::quadrature::SimplexRule;
use crate::saddle::{solve_resolvent_load, ResolventShift};
use crate::sparse::Scalar;
use crate::{Error, Result};

/// Errors below this are treated as solver noise and get no rate.
pub const RATE_FLOOR: f64 = 1e-10;

/// Quadrature degree used for loads of reference fields.
const LOAD_DEGREE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorNorm {
    VelocityL2,
    VelocityH1,
    VdualUt,
    PressureL2,
}

impl ErrorNorm {
    pub const ALL: [ErrorNorm; 4] = [Self::VelocityL2, Self::VelocityH1, Self::VdualUt, Self::PressureL2];

    pub fn name(self) -> &'static str {
        match self {
            Self::VelocityL2 => "velocity_L2",
            Self::VelocityH1 => "velocity_H1",
            Self::VdualUt => "velocity_time_derivative_Vdual",
            Self::PressureL2 => "pressure_L2",
        }
    }
}

/// Errors of one discrete solution at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub t: f64,
    pub h: f64,
    pub dt: f64,
    pub norms: BTreeMap<ErrorNorm, f64>,
}

impl ErrorReport {
    pub fn get(&self, norm: ErrorNorm) -> Option<f64> {
        self.norms.get(&norm).copied()
    }
}

/// `(‖f - u_h‖_{L²}, ‖f - u_h‖_{H¹})`.
pub fn velocity_errors<T: Scalar>(space: &FunctionSpace, field: &FieldVector<T>, reference: &dyn VectorField<T>) -> Result<(f64, f64)> {
    if field.coeffs.len() != space.n_dofs_raw {
        return Err(Error::SpaceMismatch(format!("field has {} coefficients, space {}", field.coeffs.len(), space.n_dofs_raw)));
    }
    Ok((space.error_norm(reference, field, Norm::L2)?, space.error_norm(reference, field, Norm::H1)?))
}

/// `∫ f` of the first component over the domain of `space`.
fn integral<T: Scalar>(space: &FunctionSpace, f: &dyn VectorField<T>) -> T {
    let rule = space.rule();
    let mut acc = T::zero();
    for c in 0..space.mesh.n_cells() {
        let geom = CellGeometry::new(&space.mesh, c);
        for (lam, w) in rule.points.iter().zip(&rule.weights) {
            acc += f.value(&space.point_in_cell(c, lam))[0] * T::from_real(w * geom.measure);
        }
    }
    acc
}

/// `L²(G)` pressure error after removing the mean of both fields.
pub fn pressure_error<T: Scalar>(space: &FunctionSpace, free: &[T], mean_row: &[f64], reference: &dyn VectorField<T>) -> Result<f64> {
    if free.len() != space.n_dofs_free || mean_row.len() != free.len() {
        return Err(Error::SpaceMismatch("pressure vector does not match its space".into()));
    }
    let area = space.mesh.measure();
    let ref_mean = integral(space, reference) * T::from_real(1.0 / area);
    let mut h_mean = T::zero();
    for (p, m) in free.iter().zip(mean_row) {
        h_mean += *p * T::from_real(*m);
    }
    let h_mean = h_mean * T::from_real(1.0 / area);
    let shifted: Vec<T> = free.iter().map(|&p| p - h_mean).collect();
    let field = space.expand(&shifted);
    let centered = |x: &[f64; 3]| {
        let v = reference.value(x);
        [v[0] - ref_mean, T::zero(), T::zero()]
    };
    space.error_norm(&centered, &field, Norm::L2)
}

/// The discrete dual norm `‖r‖ = (rᵀ K⁻¹ r)^½` on free velocity DOFs.
pub struct DualNorm {
    k: crate::sparse::CsrMatrix<f64>,
    factor: LdlFactor<f64>,
}

impl DualNorm {
    pub fn new(system: &SaddleSystem) -> Result<Self> {
        Ok(Self { k: system.k.clone(), factor: LdlFactor::new(&system.k)? })
    }

    pub fn norm_real(&self, r: &[f64]) -> Result<f64> {
        if r.len() != self.k.rows {
            return Err(Error::DimensionMismatch { expected: self.k.rows, got: r.len() });
        }
        let x = self.factor.solve_refined(&self.k, r, 4);
        Ok(r.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt())
    }

    pub fn norm<T: Scalar>(&self, r: &[T]) -> Result<f64> {
        let re: Vec<f64> = r.iter().map(|v| v.real()).collect();
        let im: Vec<f64> = r.iter().map(|v| v.imag()).collect();
        let a = self.norm_real(&re)?;
        let b = self.norm_real(&im)?;
        Ok((a * a + b * b).sqrt())
    }
}

/// `r_i = (f, φ_i) - (M u)_i` for a reference load and a discrete vector.
pub fn residual_functional<T: Scalar>(system: &SaddleSystem, reference_load: &[T], discrete: &[T]) -> Result<Vec<T>> {
    if reference_load.len() != system.n_velocity() || discrete.len() != system.n_velocity() {
        return Err(Error::DimensionMismatch { expected: system.n_velocity(), got: discrete.len() });
    }
    let mut r: Vec<T> = reference_load.to_vec();
    // M is real; apply to real/imaginary parts through the generic product
    for i in 0..system.m.rows {
        let mut s = T::zero();
        for (j, v) in system.m.row(i) {
            s += discrete[j] * T::from_real(v);
        }
        r[i] -= s;
    }
    Ok(r)
}

/// All four norms of a hydrostatic state against the modal oracle.
pub fn error_norms_oracle(
    system: &SaddleSystem,
    state: &EvolutionState,
    oracle: &OracleSolution,
    dual: &DualNorm,
    dt: f64,
) -> Result<ErrorReport> {
    let t = state.t;
    let field = system.velocity.expand(&state.u);
    let (l2, h1) = velocity_errors(&system.velocity, &field, &OracleVelocity { oracle, t })?;
    let mut norms = BTreeMap::from([(ErrorNorm::VelocityL2, l2), (ErrorNorm::VelocityH1, h1)]);
    if let Some(u_dot) = &state.u_dot {
        let load = assemble_load_with_degree(&system.velocity, &OracleVelocityDt { oracle, t }, LOAD_DEGREE)?;
        let r = residual_functional(system, &load, u_dot)?;
        norms.insert(ErrorNorm::VdualUt, dual.norm_real(&r)?);
    }
    if let Some(p) = &state.p {
        let e = pressure_error(&system.pressure, p, &system.mean_row, &OraclePressure { oracle, t })?;
        norms.insert(ErrorNorm::PressureL2, e);
    }
    Ok(ErrorReport { t, h: system.h(), dt, norms })
}

/// Quadrature points of a fine mesh located in a nested coarse mesh.
pub struct NestedMap {
    rule: SimplexRule,
    coarse_cell: Vec<usize>,
    coarse_lam: Vec<Vec<[f64; 4]>>,
}

impl NestedMap {
    pub fn new(coarse: &FunctionSpace, fine: &FunctionSpace, degree: usize) -> Result<Self> {
        let rule = SimplexRule::for_dim(fine.dim(), degree);
        let mut coarse_cell = Vec::with_capacity(fine.mesh.n_cells());
        let mut coarse_lam = Vec::with_capacity(fine.mesh.n_cells());
        let mid = if fine.dim() == 2 { [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0] } else { [0.25; 4] };
        for c in 0..fine.mesh.n_cells() {
            let centroid = fine.point_in_cell(c, &mid);
            let (cc, _) = coarse
                .mesh
                .locate(&centroid)
                .ok_or_else(|| Error::SpaceMismatch(format!("fine cell {c} lies outside the coarse mesh")))?;
            let lams: Vec<[f64; 4]> = rule
                .points
                .iter()
                .map(|lam| coarse.mesh.barycentric(cc, &fine.point_in_cell(c, lam)))
                .collect();
            if lams.iter().flatten().any(|&l| l < -1e-9) {
                return Err(Error::SpaceMismatch(format!("fine cell {c} is not nested in coarse cell {cc}")));
            }
            coarse_cell.push(cc);
            coarse_lam.push(lams);
        }
        Ok(Self { rule, coarse_cell, coarse_lam })
    }

    /// `(‖u_f - u_c‖_{L²}, ‖u_f - u_c‖_{H¹})` with an optional constant
    /// shift of each first component (used for mean removal).
    fn difference(
        &self,
        coarse: &FunctionSpace,
        uc: &FieldVector<f64>,
        fine: &FunctionSpace,
        uf: &FieldVector<f64>,
        shift: (f64, f64),
    ) -> (f64, f64) {
        let dim = fine.dim();
        let mut l2 = 0.0;
        let mut semi = 0.0;
        for c in 0..fine.mesh.n_cells() {
            let gf = CellGeometry::new(&fine.mesh, c);
            let cc = self.coarse_cell[c];
            let gc = CellGeometry::new(&coarse.mesh, cc);
            for (q, (lam, w)) in self.rule.points.iter().zip(&self.rule.weights).enumerate() {
                let bf = eval_local_basis(fine.family, dim, lam, &gf);
                let bc = eval_local_basis(coarse.family, dim, &self.coarse_lam[c][q], &gc);
                let vf = fine.combine_values(uf, c, &bf);
                let vc = coarse.combine_values(uc, cc, &bc);
                let df = fine.combine_grads(uf, c, &bf);
                let dc = coarse.combine_grads(uc, cc, &bc);
                let wk = w * gf.measure;
                for k in 0..fine.components {
                    let (sf, sc) = if k == 0 { shift } else { (0.0, 0.0) };
                    l2 += wk * ((vf[k] - sf) - (vc[k] - sc)).powi(2);
                    for d in 0..dim {
                        semi += wk * (df[k][d] - dc[k][d]).powi(2);
                    }
                }
            }
        }
        (l2.sqrt(), (l2 + semi).sqrt())
    }

    /// Free coarse load `∫ u_f · φ_i^c`.
    fn coarse_load(&self, coarse: &FunctionSpace, fine: &FunctionSpace, uf: &FieldVector<f64>) -> Vec<f64> {
        let dim = fine.dim();
        let mut raw = vec![0.0; coarse.n_dofs_raw];
        for c in 0..fine.mesh.n_cells() {
            let gf = CellGeometry::new(&fine.mesh, c);
            let cc = self.coarse_cell[c];
            let gc = CellGeometry::new(&coarse.mesh, cc);
            let dofs = coarse.cell_dofs(cc);
            for (q, (lam, w)) in self.rule.points.iter().zip(&self.rule.weights).enumerate() {
                let vf = fine.combine_values(uf, c, &eval_local_basis(fine.family, dim, lam, &gf));
                let bc = eval_local_basis(coarse.family, dim, &self.coarse_lam[c][q], &gc);
                let wk = w * gf.measure;
                for (a, phi) in bc.values.iter().enumerate() {
                    for k in 0..coarse.components {
                        raw[dofs[a * coarse.components + k]] += wk * phi * vf[k];
                    }
                }
            }
        }
        coarse.reduce_dual(&raw)
    }

    fn mean(&self, fine: &FunctionSpace, uf: &FieldVector<f64>) -> f64 {
        let mut acc = 0.0;
        for c in 0..fine.mesh.n_cells() {
            let g = CellGeometry::new(&fine.mesh, c);
            for (lam, w) in self.rule.points.iter().zip(&self.rule.weights) {
                acc += w * g.measure * fine.combine_values(uf, c, &eval_local_basis(fine.family, fine.dim(), lam, &g))[0];
            }
        }
        acc / fine.mesh.measure()
    }
}

/// Errors of a coarse 2D state against the fine reference state.
pub fn error_norms_nested(
    coarse: &SaddleSystem,
    state: &EvolutionState,
    reference: &SaddleSystem,
    ref_state: &EvolutionState,
    maps: &(NestedMap, NestedMap),
    dual: &DualNorm,
    dt: f64,
) -> Result<ErrorReport> {
    let (vmap, qmap) = maps;
    let uc = coarse.velocity.expand(&state.u);
    let uf = reference.velocity.expand(&ref_state.u);
    let (l2, h1) = vmap.difference(&coarse.velocity, &uc, &reference.velocity, &uf, (0.0, 0.0));
    let mut norms = BTreeMap::from([(ErrorNorm::VelocityL2, l2), (ErrorNorm::VelocityH1, h1)]);
    if let (Some(dc), Some(df)) = (&state.u_dot, &ref_state.u_dot) {
        let load = vmap.coarse_load(&coarse.velocity, &reference.velocity, &reference.velocity.expand(df));
        let r = residual_functional(coarse, &load, dc)?;
        norms.insert(ErrorNorm::VdualUt, dual.norm_real(&r)?);
    }
    if let (Some(pc), Some(pf)) = (&state.p, &ref_state.p) {
        let pcf = coarse.pressure.expand(pc);
        let pff = reference.pressure.expand(pf);
        let shift = (qmap.mean(&reference.pressure, &pff), qmap.mean(&coarse.pressure, &pcf));
        let (e, _) = qmap.difference(&coarse.pressure, &pcf, &reference.pressure, &pff, shift);
        norms.insert(ErrorNorm::PressureL2, e);
    }
    Ok(ErrorReport { t: state.t, h: coarse.h(), dt, norms })
}

/// `log(e_c / e_f) / log(h_c / h_f)`, or `None` when either error is at the
/// solver floor.
pub fn observed_rate(e_coarse: f64, e_fine: f64, h_coarse: f64, h_fine: f64) -> Option<f64> {
    if e_coarse > RATE_FLOOR && e_fine > RATE_FLOOR && h_coarse > h_fine {
        Some((e_coarse / e_fine).ln() / (h_coarse / h_fine).ln())
    } else {
        None
    }
}

/// Expected rate and tolerance for one norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateTarget {
    pub norm: ErrorNorm,
    pub rate: f64,
    pub tol: f64,
}

impl RateTarget {
    pub fn new(norm: ErrorNorm, rate: f64, tol: f64) -> Self {
        Self { norm, rate, tol }
    }
}

/// First-order H¹, second-order L², first-order pressure.
pub fn standard_targets() -> Vec<RateTarget> {
    vec![
        RateTarget::new(ErrorNorm::VelocityH1, 1.0, 0.25),
        RateTarget::new(ErrorNorm::VelocityL2, 2.0, 0.3),
        RateTarget::new(ErrorNorm::PressureL2, 1.0, 0.3),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceLevel {
    pub n: usize,
    pub m: Option<usize>,
    pub report: ErrorReport,
}

/// Outcome of checking one target over all consecutive level pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCheck {
    pub target: RateTarget,
    pub observed: Vec<Option<f64>>,
    pub pass: bool,
}

/// Per-level errors with observed rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub problem: ProblemKind,
    pub pair: ElementPair,
    pub levels: Vec<ConvergenceLevel>,
    pub targets: Vec<RateTarget>,
    pub notes: Vec<String>,
}

impl ConvergenceReport {
    /// Rate between level `i-1` and `i` at index `i` (first entry `None`).
    pub fn rates(&self, norm: ErrorNorm) -> Vec<Option<f64>> {
        let mut out = vec![None];
        for w in self.levels.windows(2) {
            let (a, b) = (&w[0].report, &w[1].report);
            out.push(match (a.get(norm), b.get(norm)) {
                (Some(ea), Some(eb)) => observed_rate(ea, eb, a.h, b.h),
                _ => None,
            });
        }
        out.truncate(self.levels.len());
        out
    }

    pub fn errors(&self, norm: ErrorNorm) -> Vec<Option<f64>> {
        self.levels.iter().map(|l| l.report.get(norm)).collect()
    }

    /// Every pairwise rate must exist and lie within tolerance.
    pub fn check(&self) -> Vec<TargetCheck> {
        self.targets
            .iter()
            .map(|t| {
                let observed: Vec<Option<f64>> = self.rates(t.norm).into_iter().skip(1).collect();
                let pass = !observed.is_empty() && observed.iter().all(|r| r.is_some_and(|r| (r - t.rate).abs() <= t.tol));
                TargetCheck { target: *t, observed, pass }
            })
            .collect()
    }

    pub fn pass(&self) -> bool {
        self.check().iter().all(|c| c.pass)
    }

    /// Like [`check`](Self::check), but only the finest level pair decides;
    /// coarser rates stay in `observed` for the record.
    pub fn check_finest(&self) -> Vec<TargetCheck> {
        self.check()
            .into_iter()
            .map(|mut c| {
                c.pass = c.observed.last().copied().flatten().is_some_and(|r| (r - c.target.rate).abs() <= c.target.tol);
                c
            })
            .collect()
    }

    /// CSV in the fixed column order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        let rates: Vec<Vec<Option<f64>>> =
            [ErrorNorm::VelocityL2, ErrorNorm::VelocityH1, ErrorNorm::VdualUt, ErrorNorm::PressureL2].iter().map(|&n| self.rates(n)).collect();
        for (i, lvl) in self.levels.iter().enumerate() {
            let r = &lvl.report;
            let _ = write!(
                s,
                "{},{},{},{},{},{},{}",
                self.problem.name(),
                self.pair.name(),
                lvl.n,
                lvl.m.map(|m| m.to_string()).unwrap_or_default(),
                fmt_num(Some(r.h)),
                fmt_num(Some(r.dt)),
                fmt_num(Some(r.t)),
            );
            for norm in [ErrorNorm::VelocityL2, ErrorNorm::VelocityH1, ErrorNorm::VdualUt, ErrorNorm::PressureL2] {
                let _ = write!(s, ",{}", fmt_num(r.get(norm)));
            }
            for col in &rates {
                let _ = write!(s, ",{}", fmt_num(col[i]));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Human-readable table.
    pub fn summary(&self) -> String {
        self.summary_judged(false)
    }

    /// Table with rate verdicts from [`check_finest`](Self::check_finest)
    /// when `finest_only`.
    pub fn summary_judged(&self, finest_only: bool) -> String {
        let mut s = format!("{} / {}\n", self.problem.name(), self.pair.name());
        let _ = writeln!(s, "{:>4} {:>10} {:>12} {:>12} {:>12} {:>12}", "n", "h", "L2", "H1", "V'(u_t)", "p L2");
        for l in &self.levels {
            let r = &l.report;
            let g = |n| r.get(n).map_or("-".to_string(), |v| format!("{v:.4e}"));
            let _ = writeln!(
                s,
                "{:>4} {:>10.4e} {:>12} {:>12} {:>12} {:>12}",
                l.n,
                r.h,
                g(ErrorNorm::VelocityL2),
                g(ErrorNorm::VelocityH1),
                g(ErrorNorm::VdualUt),
                g(ErrorNorm::PressureL2)
            );
        }
        let checks = if finest_only { self.check_finest() } else { self.check() };
        for c in checks {
            let obs: Vec<String> = c.observed.iter().map(|r| r.map_or("-".into(), |r| format!("{r:.3}"))).collect();
            let _ = writeln!(
                s,
                "  {} rate {:.2} ± {:.2}: [{}] {}",
                c.target.norm.name(),
                c.target.rate,
                c.target.tol,
                obs.join(", "),
                if c.pass { "PASS" } else { "FAIL" }
            );
        }
        for n in &self.notes {
            let _ = writeln!(s, "  note: {n}");
        }
        s
    }
}

pub const CSV_HEADER: &str =
    "problem,element_pair,n,m,h,dt,t,err_L2,err_H1,err_Vdual_ut,err_p_L2,rate_L2,rate_H1,rate_Vdual,rate_p";

pub fn fmt_num(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.12e}")).unwrap_or_default()
}

/// How the time step is chosen per level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DtPolicy {
    Fixed(f64),
    /// `dt = factor · h`, shortened so that `t_end / dt` is an integer
    TiedToH(f64),
}

impl DtPolicy {
    pub fn dt(&self, h: f64, t_end: f64) -> Result<f64> {
        match *self {
            DtPolicy::Fixed(dt) => {
                let steps = t_end / dt;
                if !(dt > 0.0) || (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
                    return Err(Error::MisalignedSample(t_end));
                }
                Ok(dt)
            }
            DtPolicy::TiedToH(f) => {
                if !(f > 0.0) || !(h > 0.0) {
                    return Err(Error::InvalidParameter(format!("tied_to_h factor must be positive, got {f}")));
                }
                let steps = (t_end / (f * h)).ceil().max(1.0);
                Ok(t_end / steps)
            }
        }
    }
}

/// Initial data for evolution studies.
#[derive(Clone)]
pub enum Datum {
    /// an oracle superposition (hydrostatic)
    Modes(OracleSolution),
    /// the nonsmooth checkerboard (hydrostatic)
    Checkerboard { k_max: i64, j_max: usize },
    /// curl of `(sin πx sin πy)²` (2D)
    Vortex,
    /// any field; only usable where the reference is numerical
    Custom(Arc<dyn Fn(&[f64; 3]) -> [f64; 3] + Send + Sync>),
}

impl std::fmt::Debug for Datum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Datum::Modes(o) => write!(f, "Modes({} terms)", o.mode_count()),
            Datum::Checkerboard { k_max, j_max } => write!(f, "Checkerboard {{ k_max: {k_max}, j_max: {j_max} }}"),
            Datum::Vortex => write!(f, "Vortex"),
            Datum::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// Solenoidal vortex vanishing on the boundary of the unit square.
pub fn vortex(p: &[f64; 3]) -> [f64; 3] {
    let (sx, sy) = ((PI * p[0]).sin(), (PI * p[1]).sin());
    [PI * sx * sx * (2.0 * PI * p[1]).sin(), -PI * (2.0 * PI * p[0]).sin() * sy * sy, 0.0]
}

impl Datum {
    fn value(&self, p: &[f64; 3], depth: f64) -> [f64; 3] {
        match self {
            Datum::Modes(o) => o.velocity(p, 0.0),
            Datum::Checkerboard { .. } => checkerboard_value(p, depth),
            Datum::Vortex => vortex(p),
            Datum::Custom(f) => f(p),
        }
    }

    /// The oracle for hydrostatic data, pruned for evaluation from `t_min`.
    pub fn oracle(&self, depth: f64, t_min: f64) -> Result<Option<OracleSolution>> {
        Ok(match self {
            Datum::Modes(o) => Some(o.clone()),
            Datum::Checkerboard { k_max, j_max } => Some(OracleSolution::checkerboard(depth, *k_max, *j_max)?.pruned(t_min, 1e-16)),
            _ => None,
        })
    }
}

/// One evolution study definition.
#[derive(Debug, Clone)]
pub struct EvolutionStudy {
    pub problem: ProblemKind,
    pub pair: ElementPair,
    pub levels: Vec<usize>,
    /// vertical layers per level (hydrostatic); defaults to `levels`
    pub layers: Option<Vec<usize>>,
    pub depth: f64,
    pub scheme: Scheme,
    pub dt: DtPolicy,
    pub t_eval: f64,
    pub datum: Datum,
    pub targets: Vec<RateTarget>,
    /// also rerun the finest level with `dt / 2`
    pub dt_control: bool,
}

impl EvolutionStudy {
    fn layers(&self) -> Result<Vec<usize>> {
        match &self.layers {
            Some(m) if m.len() != self.levels.len() => {
                Err(Error::InvalidParameter(format!("{} layer counts for {} levels", m.len(), self.levels.len())))
            }
            Some(m) => Ok(m.clone()),
            None => Ok(self.levels.clone()),
        }
    }

    fn system(&self, n: usize, m: usize) -> Result<SaddleSystem> {
        match self.problem {
            ProblemKind::Stokes2d => SaddleSystem::stokes_2d(n, self.pair),
            ProblemKind::Hydrostatic => SaddleSystem::hydrostatic(n, m, self.depth, self.pair),
        }
    }
}

/// Run one level from the datum and return the states at `times`.
pub fn run_level(
    system: &SaddleSystem,
    scheme: Scheme,
    dt: f64,
    datum: &Datum,
    depth: f64,
    times: &[f64],
) -> Result<Vec<EvolutionState>> {
    let t_end = times.iter().copied().fold(0.0, f64::max);
    let evolver = Evolver::new(system, SchemeSpec::new(scheme, dt, t_end)?)?;
    let field = |p: &[f64; 3]| datum.value(p, depth);
    let load = assemble_load_with_degree(&system.velocity, &field, LOAD_DEGREE)?;
    let init = evolver.initialize_load(&load)?;
    evolver.evolve(init, times)
}

/// Resolution audit of the 2D reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceAudit {
    pub n_ref: usize,
    /// `‖u_ref(n_ref/2) - u_ref(n_ref)‖_{L²}`
    pub self_difference: f64,
    /// L² error of the finest study level
    pub finest_gap: f64,
    pub coarsest_error: f64,
    pub under_resolved: bool,
}

/// Errors at `t_eval` for each level, with rates.
pub fn convergence_study(study: &EvolutionStudy) -> Result<ConvergenceReport> {
    if study.levels.len() < 2 {
        return Err(Error::InvalidParameter("a convergence study needs at least two levels".into()));
    }
    let layers = study.layers()?;
    let mut levels: Vec<(usize, usize)> = study.levels.iter().copied().zip(layers).collect();
    levels.sort();
    let mut notes = Vec::new();
    let reports: Vec<ConvergenceLevel> = match study.problem {
        ProblemKind::Hydrostatic => {
            let oracle = study
                .datum
                .oracle(study.depth, study.t_eval)?
                .ok_or_else(|| Error::InvalidParameter("hydrostatic studies need oracle initial data".into()))?;
            let out: Result<Vec<ConvergenceLevel>> = levels
                .par_iter()
                .map(|&(n, m)| {
                    let sys = study.system(n, m)?;
                    let dt = study.dt.dt(sys.h(), study.t_eval)?;
                    let states = run_level(&sys, study.scheme, dt, &study.datum, study.depth, &[study.t_eval])?;
                    let dual = DualNorm::new(&sys)?;
                    let report = error_norms_oracle(&sys, &states[0], &oracle, &dual, dt)?;
                    Ok(ConvergenceLevel { n, m: Some(m), report })
                })
                .collect();
            let out = out?;
            if study.dt_control {
                let &(n, m) = levels.last().expect("levels checked non-empty");
                let sys = study.system(n, m)?;
                let dt = out.last().expect("levels").report.dt * 0.5;
                let states = run_level(&sys, study.scheme, dt, &study.datum, study.depth, &[study.t_eval])?;
                let report = error_norms_oracle(&sys, &states[0], &oracle, &DualNorm::new(&sys)?, dt)?;
                notes.push(dt_control_note(&out.last().expect("levels").report, &report));
            }
            out
        }
        ProblemKind::Stokes2d => {
            let systems: Vec<SaddleSystem> = levels.iter().map(|&(n, _)| study.system(n, 0)).collect::<Result<_>>()?;
            let dts: Vec<f64> = systems.iter().map(|s| study.dt.dt(s.h(), study.t_eval)).collect::<Result<_>>()?;
            let dt_min = dts.iter().copied().fold(f64::INFINITY, f64::min);
            let n_max = levels.last().expect("levels").0;
            let n_ref = 4 * n_max;
            let dt_ref = 0.25 * dt_min;
            let field = |p: &[f64; 3]| study.datum.value(p, study.depth);
            let times = [study.t_eval];
            let (reference, audit_ref) = rayon::join(
                || Stokes2dReference::compute(n_ref, dt_ref, &field, &times),
                || Stokes2dReference::compute(n_ref / 2, dt_ref, &field, &times),
            );
            let (reference, audit_ref) = (reference?, audit_ref?);
            let ref_state = &reference.states[0];
            let out: Result<Vec<ConvergenceLevel>> = systems
                .par_iter()
                .zip(levels.par_iter())
                .zip(dts.par_iter())
                .map(|((sys, &(n, _)), &dt)| {
                    let states = run_level(sys, study.scheme, dt, &study.datum, study.depth, &times)?;
                    let maps = (
                        NestedMap::new(&sys.velocity, &reference.system.velocity, 6)?,
                        NestedMap::new(&sys.pressure, &reference.system.pressure, 6)?,
                    );
                    let dual = DualNorm::new(sys)?;
                    let report = error_norms_nested(sys, &states[0], &reference.system, ref_state, &maps, &dual, dt)?;
                    Ok(ConvergenceLevel { n, m: None, report })
                })
                .collect();
            let out = out?;
            let audit = audit_reference(&audit_ref, &reference, &out)?;
            notes.push(format!(
                "reference: Taylor–Hood n = {}, dt = {:.3e}; self-difference vs n = {}: {:.3e}; {}",
                audit.n_ref,
                dt_ref,
                audit.n_ref / 2,
                audit.self_difference,
                if audit.under_resolved { "UNDER-RESOLVED" } else { "resolved" }
            ));
            if study.dt_control {
                let sys = systems.last().expect("levels");
                let dt = 0.5 * dts.last().expect("levels");
                let states = run_level(sys, study.scheme, dt, &study.datum, study.depth, &times)?;
                let maps = (
                    NestedMap::new(&sys.velocity, &reference.system.velocity, 6)?,
                    NestedMap::new(&sys.pressure, &reference.system.pressure, 6)?,
                );
                let report = error_norms_nested(sys, &states[0], &reference.system, ref_state, &maps, &DualNorm::new(sys)?, dt)?;
                notes.push(dt_control_note(&out.last().expect("levels").report, &report));
            }
            out
        }
    };
    Ok(ConvergenceReport { problem: study.problem, pair: study.pair, levels: reports, targets: study.targets.clone(), notes })
}

fn dt_control_note(base: &ErrorReport, half: &ErrorReport) -> String {
    let worst = ErrorNorm::ALL
        .iter()
        .filter_map(|&n| Some(((half.get(n)? - base.get(n)?) / base.get(n)?).abs()))
        .fold(0.0, f64::max);
    format!("dt control: halving dt on the finest level changes errors by at most {:.2}%", 100.0 * worst)
}

/// Largest relative change of any error norm when halving `dt`, parsed back
/// from the study notes.
pub fn dt_control_change(report: &ConvergenceReport) -> Option<f64> {
    report.notes.iter().find_map(|n| {
        let rest = n.strip_prefix("dt control: halving dt on the finest level changes errors by at most ")?;
        rest.trim_end_matches('%').parse::<f64>().ok().map(|v| v / 100.0)
    })
}

fn audit_reference(half: &Stokes2dReference, reference: &Stokes2dReference, levels: &[ConvergenceLevel]) -> Result<ReferenceAudit> {
    let map = NestedMap::new(&half.system.velocity, &reference.system.velocity, 6)?;
    let uh = half.system.velocity.expand(&half.states[0].u);
    let uf = reference.system.velocity.expand(&reference.states[0].u);
    let (self_difference, _) = map.difference(&half.system.velocity, &uh, &reference.system.velocity, &uf, (0.0, 0.0));
    let finest_gap = levels.last().and_then(|l| l.report.get(ErrorNorm::VelocityL2)).unwrap_or(0.0);
    let coarsest_error = levels.first().and_then(|l| l.report.get(ErrorNorm::VelocityL2)).unwrap_or(0.0);
    let n_ref = reference.system.velocity.mesh.grid.map_or(0, |g| g.n);
    Ok(ReferenceAudit { n_ref, self_difference, finest_gap, coarsest_error, under_resolved: finest_gap <= 10.0 * self_difference })
}

/// Errors at several times on one level.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularityProfile {
    pub problem: ProblemKind,
    pub pair: ElementPair,
    pub n: usize,
    pub m: usize,
    pub rows: Vec<ErrorReport>,
}

impl SingularityProfile {
    /// `t^power · ‖e(t)‖` for every sample.
    pub fn weighted(&self, norm: ErrorNorm, power: f64) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.get(norm).map(|e| r.t.powf(power) * e)).collect()
    }

    /// `max / min` of the weighted profile.
    pub fn spread(&self, norm: ErrorNorm, power: f64) -> f64 {
        let w: Vec<f64> = self.weighted(norm, power).into_iter().flatten().collect();
        let max = w.iter().copied().fold(0.0, f64::max);
        let min = w.iter().copied().fold(f64::INFINITY, f64::min);
        if w.is_empty() || min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Log-log slope of the weighted profile over the `k` smallest times.
    pub fn small_time_slope(&self, norm: ErrorNorm, power: f64, k: usize) -> Option<f64> {
        let w = self.weighted(norm, power);
        let k = k.min(self.rows.len());
        if k < 2 {
            return None;
        }
        let (w0, w1) = (w[0]?, w[k - 1]?);
        Some((w1 / w0).ln() / (self.rows[k - 1].t / self.rows[0].t).ln())
    }

    /// Same schema as the convergence CSV, one row per sample time.
    pub fn to_csv(&self) -> String {
        let report = ConvergenceReport {
            problem: self.problem,
            pair: self.pair,
            levels: self.rows.iter().map(|r| ConvergenceLevel { n: self.n, m: Some(self.m), report: r.clone() }).collect(),
            targets: vec![],
            notes: vec![],
        };
        // rates across times are meaningless; blank them
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for line in report.to_csv().lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            s.push_str(&cols[..11].join(","));
            s.push_str(",,,,\n");
        }
        s
    }

    /// `t, t‖e_L2‖, t‖e_H1‖, t‖e_p‖, t^{3/2}‖e_p‖`.
    pub fn weighted_csv(&self) -> String {
        let mut s = String::from("t,t_err_L2,t_err_H1,t_err_p_L2,t32_err_p_L2\n");
        let a = self.weighted(ErrorNorm::VelocityL2, 1.0);
        let b = self.weighted(ErrorNorm::VelocityH1, 1.0);
        let c = self.weighted(ErrorNorm::PressureL2, 1.0);
        let d = self.weighted(ErrorNorm::PressureL2, 1.5);
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{},{}", fmt_num(Some(r.t)), fmt_num(a[i]), fmt_num(b[i]), fmt_num(c[i]), fmt_num(d[i]));
        }
        s
    }
}

/// Hydrostatic errors on one level at every sample time.
pub fn singularity_profile(
    pair: ElementPair,
    n: usize,
    m: usize,
    depth: f64,
    scheme: Scheme,
    dt: f64,
    times: &[f64],
    datum: &Datum,
) -> Result<SingularityProfile> {
    let mut times = times.to_vec();
    times.sort_by(|a, b| a.total_cmp(b));
    let t_min = *times.first().ok_or_else(|| Error::InvalidParameter("no sample times".into()))?;
    let oracle = datum
        .oracle(depth, t_min)?
        .ok_or_else(|| Error::InvalidParameter("singularity profiles need oracle initial data".into()))?;
    let sys = SaddleSystem::hydrostatic(n, m, depth, pair)?;
    let states = run_level(&sys, scheme, dt, datum, depth, &times)?;
    let dual = DualNorm::new(&sys)?;
    let rows: Vec<ErrorReport> = states
        .par_iter()
        .map(|s| error_norms_oracle(&sys, s, &oracle, &dual, dt))
        .collect::<Result<_>>()?;
    Ok(SingularityProfile { problem: ProblemKind::Hydrostatic, pair, n, m, rows })
}

/// Resolvent errors for one shift on one hydrostatic level.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolventErrors {
    pub lambda: Complex64,
    pub h: f64,
    pub l2: f64,
    pub h1: f64,
    pub vdual: f64,
    pub pressure: f64,
    pub g_norm: f64,
    pub divergence: f64,
}

/// Compare the discrete resolvent `(λ + A_h)⁻¹ P_{h,σ} g` with the modal
/// `(λ + A)⁻¹ g` for `g` the oracle field at `t = 0`.
pub fn resolvent_errors(system: &SaddleSystem, shift: &ResolventShift, source: &OracleSolution, dual: &DualNorm) -> Result<ResolventErrors> {
    shift.check()?;
    let lambda = shift.lambda;
    let load = assemble_load_with_degree(&system.velocity, &OracleSource { oracle: source }, LOAD_DEGREE)?;
    let sol = solve_resolvent_load(system, shift, &load)?;
    let field = system.velocity.expand(&sol.w);
    let exact = OracleResolvent { oracle: source, lambda };
    let (l2, h1) = velocity_errors(&system.velocity, &field, &exact)?;
    let wload = assemble_load_with_degree(&system.velocity, &exact, LOAD_DEGREE)?;
    let r = residual_functional(system, &wload, &sol.w)?;
    let vdual = dual.norm(&r)?;
    let pressure = pressure_error(&system.pressure, &sol.pi, &system.mean_row, &OracleResolventPressure { oracle: source, lambda })?;
    Ok(ResolventErrors {
        lambda,
        h: system.h(),
        l2,
        h1,
        vdual,
        pressure,
        g_norm: source.l2_norm2_parseval(0.0).sqrt(),
        divergence: sol.residual_pressure,
    })
}

/// Per-shift convergence reports over hydrostatic levels (`m = n`).
pub fn resolvent_rate_study(
    pair: ElementPair,
    levels: &[usize],
    depth: f64,
    shifts: &[ResolventShift],
    source: &OracleSolution,
) -> Result<Vec<(ResolventShift, ConvergenceReport, Vec<ResolventErrors>)>> {
    for s in shifts {
        s.check()?;
    }
    let mut levels = levels.to_vec();
    levels.sort();
    let per_level: Vec<Vec<ResolventErrors>> = levels
        .par_iter()
        .map(|&n| {
            let sys = SaddleSystem::hydrostatic(n, n, depth, pair)?;
            let dual = DualNorm::new(&sys)?;
            shifts.iter().map(|s| resolvent_errors(&sys, s, source, &dual)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, shift) in shifts.iter().enumerate() {
        let errs: Vec<ResolventErrors> = per_level.iter().map(|l| l[i].clone()).collect();
        let levels_rep = levels
            .iter()
            .zip(&errs)
            .map(|(&n, e)| ConvergenceLevel {
                n,
                m: Some(n),
                report: ErrorReport {
                    t: 0.0,
                    h: e.h,
                    dt: 0.0,
                    norms: BTreeMap::from([
                        (ErrorNorm::VelocityL2, e.l2),
                        (ErrorNorm::VelocityH1, e.h1),
                        (ErrorNorm::VdualUt, e.vdual),
                        (ErrorNorm::PressureL2, e.pressure),
                    ]),
                },
            })
            .collect();
        let report = ConvergenceReport {
            problem: ProblemKind::Hydrostatic,
            pair,
            levels: levels_rep,
            targets: vec![RateTarget::new(ErrorNorm::VelocityH1, 1.0, 0.25), RateTarget::new(ErrorNorm::VelocityL2, 2.0, 0.3)],
            notes: vec![format!("lambda = {:.6e} {:+.6e}i", shift.lambda.re, shift.lambda.im)],
        };
        out.push((*shift, report, errs));
    }
    Ok(out)
}

/// `|λ| · ‖e‖_{V'}` for shifts `|λ| e^{i arg}` at one level.
pub fn vdual_lambda_sweep(
    pair: ElementPair,
    n: usize,
    depth: f64,
    moduli: &[f64],
    arg: f64,
    delta: f64,
    source: &OracleSolution,
) -> Result<Vec<ResolventErrors>> {
    let sys = SaddleSystem::hydrostatic(n, n, depth, pair)?;
    let dual = DualNorm::new(&sys)?;
    moduli
        .iter()
        .map(|&r| resolvent_errors(&sys, &ResolventShift::polar(r, arg, delta)?, source, &dual))
        .collect()
}

/// Interpolation and Ritz-projection errors of a smooth hydrostatic field.
pub fn approximation_study(pair: ElementPair, levels: &[usize], depth: f64, field: &OracleSolution) -> Result<(ConvergenceReport, ConvergenceReport)> {
    let mut levels = levels.to_vec();
    levels.sort();
    let rows: Vec<(ConvergenceLevel, ConvergenceLevel)> = levels
        .par_iter()
        .map(|&n| {
            let sys = SaddleSystem::hydrostatic(n, n, depth, pair)?;
            let f = OracleVelocity { oracle: field, t: 0.0 };
            let interp = sys.velocity.interpolate(&f)?;
            let (il2, ih1) = velocity_errors(&sys.velocity, &interp, &f)?;
            let load = assemble_h1_load(&sys.velocity, &f, LOAD_DEGREE)?;
            let ritz = crate::saddle::ritz_projection_load(&sys, &load)?;
            let (rl2, rh1) = velocity_errors(&sys.velocity, &sys.velocity.expand(&ritz), &f)?;
            let mk = |l2, h1| ConvergenceLevel {
                n,
                m: Some(n),
                report: ErrorReport {
                    t: 0.0,
                    h: sys.h(),
                    dt: 0.0,
                    norms: BTreeMap::from([(ErrorNorm::VelocityL2, l2), (ErrorNorm::VelocityH1, h1)]),
                },
            };
            Ok((mk(il2, ih1), mk(rl2, rh1)))
        })
        .collect::<Result<_>>()?;
    let targets = vec![RateTarget::new(ErrorNorm::VelocityH1, 1.0, 0.25), RateTarget::new(ErrorNorm::VelocityL2, 2.0, 0.3)];
    let (a, b): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let mk = |levels, note: &str| ConvergenceReport {
        problem: ProblemKind::Hydrostatic,
        pair,
        levels,
        targets: targets.clone(),
        notes: vec![note.to_string()],
    };
    Ok((mk(a, "nodal interpolation"), mk(b, "Ritz projection onto the discretely solenoidal space")))
}

/// Structural checks on one assembled system and a short zero-forcing run.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantReport {
    pub problem: ProblemKind,
    pub pair: ElementPair,
    pub n: usize,
    /// `(name, positive pivots, dimension, relative asymmetry)` for M, K, M_Q
    pub spd: Vec<(&'static str, usize, usize, f64)>,
    /// `‖A 1‖_∞ / ‖A‖_max` on the unconstrained space
    pub constant_kernel: f64,
    pub max_divergence: f64,
    pub max_pressure_mean: f64,
    /// energies `‖uⁿ‖_M` along the run
    pub energies: Vec<f64>,
    /// `max |B_vol - B_surf| / max |B_vol|`; `None` in 2D
    pub fubini: Option<f64>,
}

impl InvariantReport {
    pub fn spd_ok(&self) -> bool {
        self.spd.iter().all(|&(_, pos, n, asym)| pos == n && asym <= 1e-13)
    }

    pub fn energy_monotone(&self) -> bool {
        self.energies.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12))
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for &(name, pos, n, asym) in &self.spd {
            if pos != n || asym > 1e-13 {
                out.push(format!("{name}: {pos}/{n} positive pivots, asymmetry {asym:.2e}"));
            }
        }
        if self.constant_kernel > 1e-12 {
            out.push(format!("A·1 = {:.2e}", self.constant_kernel));
        }
        if self.max_divergence > 1e-9 {
            out.push(format!("‖B u‖_∞ = {:.2e}", self.max_divergence));
        }
        if self.max_pressure_mean > 1e-12 {
            out.push(format!("pressure mean {:.2e}", self.max_pressure_mean));
        }
        if !self.energy_monotone() {
            out.push("energy increased".into());
        }
        if let Some(f) = self.fubini.filter(|&f| f > 1e-12) {
            out.push(format!("B volume/surface mismatch {f:.2e}"));
        }
        out
    }

    pub fn pass(&self) -> bool {
        self.failures().is_empty()
    }
}

fn spd_entry(name: &'static str, m: &crate::sparse::CsrMatrix<f64>) -> Result<(&'static str, usize, usize, f64)> {
    let f = LdlFactor::new(m)?;
    let (pos, _) = f.inertia();
    Ok((name, pos, m.rows, m.asymmetry() / m.max_abs().max(f64::MIN_POSITIVE)))
}

/// Run the invariant checks with `steps` implicit Euler steps of size `dt`
/// from `datum`.
pub fn structural_invariants(system: &SaddleSystem, datum: &Datum, depth: f64, steps: usize, dt: f64) -> Result<InvariantReport> {
    let spd = vec![spd_entry("M", &system.m)?, spd_entry("K", &system.k)?, spd_entry("M_Q", &system.m_q)?];
    let raw = FunctionSpace::new(system.velocity.mesh.clone(), system.velocity.family, 1, crate::fespace::BcSpec::None)?;
    let a_raw = crate::assembly::assemble_stiffness(&raw);
    let one = raw.reduce(&raw.interpolate(&|_: &[f64; 3]| [1.0, 0.0, 0.0])?);
    let constant_kernel = crate::sparse::norm_inf(&a_raw.mul_vec(&one)) / a_raw.max_abs();
    let evolver = Evolver::new(system, SchemeSpec::new(Scheme::ImplicitEuler, dt, dt * steps as f64)?)?;
    let field = |p: &[f64; 3]| datum.value(p, depth);
    let mut state = evolver.initialize_load(&assemble_load_with_degree(&system.velocity, &field, LOAD_DEGREE)?)?;
    let div = |u: &[f64]| crate::sparse::norm_inf(&system.b.mul_vec(u));
    let mut max_divergence = div(&state.u);
    let mut max_pressure_mean: f64 = 0.0;
    let mut energies = vec![crate::evolution::energy(system, &state.u)];
    for _ in 0..steps {
        state = evolver.step(&state)?;
        max_divergence = max_divergence.max(div(&state.u));
        if let Some(p) = &state.p {
            let mean: f64 = p.iter().zip(&system.mean_row).map(|(a, b)| a * b).sum();
            max_pressure_mean = max_pressure_mean.max(mean.abs());
        }
        energies.push(crate::evolution::energy(system, &state.u));
    }
    let fubini = match &system.structure {
        Some(s) => {
            let surf = crate::assembly::assemble_divergence_hydrostatic_surface(&system.velocity, &system.pressure, s)?;
            let diff = system.b.combine(1.0, &surf, -1.0)?;
            Some(diff.max_abs() / system.b.max_abs())
        }
        None => None,
    };
    let n = system.pressure.mesh.grid.map_or(0, |g| g.n);
    Ok(InvariantReport {
        problem: system.kind,
        pair: system.pair,
        n,
        spd,
        constant_kernel,
        max_divergence,
        max_pressure_mean,
        energies,
        fubini,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{HydrostaticMode, ModeComponent};
    use approx::assert_relative_eq;

    fn smooth(depth: f64) -> OracleSolution {
        let m = HydrostaticMode::new([1, 0], 0, ModeComponent::Parallel, depth).unwrap();
        OracleSolution::single(m, Complex64::new(1.0, 0.0))
    }

    #[test]
    fn rates_are_scale_invariant() {
        assert_relative_eq!(observed_rate(4.0, 1.0, 0.2, 0.1).unwrap(), 2.0);
        assert_relative_eq!(observed_rate(4e-3, 1e-3, 0.2, 0.1).unwrap(), 2.0, epsilon = 1e-14);
        assert!(observed_rate(1e-11, 1e-12, 0.2, 0.1).is_none());
    }

    #[test]
    fn dt_policy() {
        assert_relative_eq!(DtPolicy::TiedToH(0.5).dt(0.1, 0.25).unwrap(), 0.05);
        let dt = DtPolicy::TiedToH(0.3).dt(0.1, 0.25).unwrap();
        assert!(dt <= 0.03 && ((0.25 / dt).round() - 0.25 / dt).abs() < 1e-9);
        assert!(DtPolicy::Fixed(0.1).dt(0.1, 0.25).is_err());
        assert!(DtPolicy::Fixed(0.05).dt(0.1, 0.25).is_ok());
    }

    #[test]
    fn identical_fields_have_zero_error_and_scaling_doubles() {
        let sys = SaddleSystem::hydrostatic(2, 2, 1.0, ElementPair::TaylorHood).unwrap();
        let o = smooth(1.0);
        let f = OracleVelocity { oracle: &o, t: 0.0 };
        let ih = sys.velocity.interpolate(&f).unwrap();
        // a discrete field compared with itself
        let as_field = |p: &[f64; 3]| sys.velocity.eval_at(&ih, p).unwrap();
        let l2 = sys.velocity.error_norm(&as_field, &ih, Norm::L2).unwrap();
        assert!(l2 < 1e-12);
        let (e1, h1) = velocity_errors(&sys.velocity, &ih, &f).unwrap();
        let doubled = FieldVector { coeffs: ih.coeffs.iter().map(|c| 2.0 * c).collect() };
        let f2 = OracleVelocity { oracle: &OracleSolution::single(o.terms[0].mode, Complex64::new(2.0, 0.0)), t: 0.0 };
        let (e2, h2) = velocity_errors(&sys.velocity, &doubled, &f2).unwrap();
        assert_relative_eq!(e2, 2.0 * e1, max_relative = 1e-12);
        assert_relative_eq!(h2, 2.0 * h1, max_relative = 1e-12);
    }

    #[test]
    fn h1_error_matches_interpolation_error() {
        let sys = SaddleSystem::hydrostatic(4, 4, 1.0, ElementPair::Mini).unwrap();
        let o = smooth(1.0);
        let f = OracleVelocity { oracle: &o, t: 0.0 };
        let ih = sys.velocity.interpolate(&f).unwrap();
        let (_, h1) = velocity_errors(&sys.velocity, &ih, &f).unwrap();
        assert!((h1 - sys.velocity.interpolation_error(&f, Norm::H1).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn dual_norm_is_a_norm() {
        use rand::{Rng, SeedableRng};
        let sys = SaddleSystem::stokes_2d(4, ElementPair::Mini).unwrap();
        let d = DualNorm::new(&sys).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = sys.n_velocity();
        for _ in 0..10 {
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let na = d.norm_real(&a).unwrap();
            assert!(na > 0.0);
            let a3: Vec<f64> = a.iter().map(|v| -3.0 * v).collect();
            assert_relative_eq!(d.norm_real(&a3).unwrap(), 3.0 * na, max_relative = 1e-12);
            let s: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            assert!(d.norm_real(&s).unwrap() <= na + d.norm_real(&b).unwrap() * (1.0 + 1e-12));
        }
        assert_eq!(d.norm_real(&vec![0.0; n]).unwrap(), 0.0);
    }

    #[test]
    fn zero_source_gives_zero_resolvent_errors() {
        let sys = SaddleSystem::hydrostatic(2, 2, 1.0, ElementPair::Mini).unwrap();
        let dual = DualNorm::new(&sys).unwrap();
        let zero = OracleSolution::new(1.0, vec![]).unwrap();
        let e = resolvent_errors(&sys, &ResolventShift::new(Complex64::new(1.0, 0.0), 0.1).unwrap(), &zero, &dual).unwrap();
        assert_eq!((e.l2, e.h1, e.vdual, e.pressure), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn out_of_sector_shift_rejected() {
        let zero = OracleSolution::new(1.0, vec![]).unwrap();
        let bad = ResolventShift { lambda: Complex64::new(-1.0, 0.0), delta: 0.1, allow_zero: false };
        assert!(resolvent_rate_study(ElementPair::Mini, &[2], 1.0, &[bad], &zero).is_err());
    }

    #[test]
    fn csv_schema_and_blank_coarsest_rates() {
        let mk = |n: usize, h: f64, e: f64| ConvergenceLevel {
            n,
            m: Some(n),
            report: ErrorReport {
                t: 0.25,
                h,
                dt: 0.01,
                norms: BTreeMap::from([(ErrorNorm::VelocityL2, e), (ErrorNorm::VelocityH1, e.sqrt())]),
            },
        };
        let r = ConvergenceReport {
            problem: ProblemKind::Hydrostatic,
            pair: ElementPair::Mini,
            levels: vec![mk(2, 0.5, 0.04), mk(4, 0.25, 0.01)],
            targets: standard_targets(),
            notes: vec![],
        };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first.len(), 15);
        assert!(first[11..].iter().all(|c| c.is_empty()));
        assert_eq!(first[10], "");
        let second: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(second[11], "2.000000000000e0");
        assert_eq!(second[12], "1.000000000000e0");
    }
}
