//! Sparse operators of the discrete saddle-point system.
//!
//! All operators act on free DOFs: periodic slaves are folded into their
//! masters and Dirichlet rows/columns are dropped during insertion.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fespace::{eval_local_basis, BcSpec, CellGeometry, Family, FunctionSpace, LocalBasis, VectorField};
use crate::mesh::{periodic_box, triangulate_unit_square, Mesh, PrismaticStructure};
use crate::quadrature::{gauss_legendre_unit, SimplexRule};
use crate::sparse::{CsrMatrix, Scalar, Symmetry, Triplets};

pub type SparseOperator<T = f64> = CsrMatrix<T>;

/// Local contributions of one cell: `(raw row, raw col, value)`.
type LocalEntries = Vec<(usize, usize, f64)>;

fn cell_point(mesh: &Mesh, c: usize, lam: &[f64; 4]) -> [f64; 3] {
    let mut x = [0.0; 3];
    for (i, &v) in mesh.cell(c).iter().enumerate() {
        for k in 0..3 {
            x[k] += lam[i] * mesh.vertices[v][k];
        }
    }
    x
}

/// Cell-parallel assembly with a sequential, cell-ordered reduction so the
/// result does not depend on thread scheduling.
fn assemble_cells<F>(rows: &FunctionSpace, cols: &FunctionSpace, n_cells: usize, symmetry: Symmetry, local: F) -> CsrMatrix<f64>
where
    F: Fn(usize) -> LocalEntries + Sync + Send,
{
    let parts: Vec<LocalEntries> = (0..n_cells).into_par_iter().map(local).collect();
    let cap = parts.iter().map(Vec::len).sum();
    let mut t = Triplets::with_capacity(rows.n_dofs_free, cols.n_dofs_free, cap);
    for part in parts {
        for (i, j, v) in part {
            if let (Some(fi), Some(fj)) = (rows.free_index(i), cols.free_index(j)) {
                t.push(fi, fj, v);
            }
        }
    }
    t.into_csr(symmetry)
}

/// Symmetric velocity form built from a scalar kernel, replicated over components.
fn assemble_scalar_form(space: &FunctionSpace, kernel: fn(&LocalBasis, usize, usize, usize) -> f64) -> CsrMatrix<f64> {
    let rule = space.rule();
    let dim = space.dim();
    let nc = space.components;
    assemble_cells(space, space, space.mesh.n_cells(), Symmetry::Symmetric, |c| {
        let geom = CellGeometry::new(&space.mesh, c);
        let dofs = space.cell_dofs(c);
        let nl = dofs.len() / nc;
        let mut local = vec![0.0; nl * nl];
        for (lam, w) in rule.points.iter().zip(&rule.weights) {
            let b = eval_local_basis(space.family, dim, lam, &geom);
            let wk = w * geom.measure;
            for a in 0..nl {
                for bb in 0..nl {
                    local[a * nl + bb] += wk * kernel(&b, a, bb, dim);
                }
            }
        }
        let mut out = Vec::with_capacity(nl * nl * nc);
        for a in 0..nl {
            for bb in 0..nl {
                for k in 0..nc {
                    out.push((dofs[a * nc + k], dofs[bb * nc + k], local[a * nl + bb]));
                }
            }
        }
        out
    })
}

fn mass_kernel(b: &LocalBasis, i: usize, j: usize, _dim: usize) -> f64 {
    b.values[i] * b.values[j]
}

fn stiffness_kernel(b: &LocalBasis, i: usize, j: usize, dim: usize) -> f64 {
    (0..dim).map(|d| b.grads[i][d] * b.grads[j][d]).sum()
}

/// `M_ij = ∫ φ_i · φ_j`.
pub fn assemble_mass(space: &FunctionSpace) -> CsrMatrix<f64> {
    assemble_scalar_form(space, mass_kernel)
}

/// `A_ij = ∫ ∇φ_i : ∇φ_j`.
pub fn assemble_stiffness(space: &FunctionSpace) -> CsrMatrix<f64> {
    assemble_scalar_form(space, stiffness_kernel)
}

/// `B_ki = -∫_Ω (div φ_i) ψ_k` for velocity and pressure on one 2D mesh.
pub fn assemble_divergence_2d(v_space: &FunctionSpace, q_space: &FunctionSpace) -> Result<CsrMatrix<f64>> {
    if v_space.dim() != 2 || q_space.dim() != 2 || v_space.components != 2 || q_space.components != 1 {
        return Err(Error::SpaceMismatch("2D divergence needs a 2-component 2D velocity and a scalar 2D pressure".into()));
    }
    if !Arc::ptr_eq(&v_space.mesh, &q_space.mesh) && *v_space.mesh != *q_space.mesh {
        return Err(Error::SpaceMismatch("velocity and pressure live on different meshes".into()));
    }
    let rule = v_space.rule();
    Ok(assemble_cells(q_space, v_space, v_space.mesh.n_cells(), Symmetry::General, |c| {
        let geom = CellGeometry::new(&v_space.mesh, c);
        let vd = v_space.cell_dofs(c);
        let qd = q_space.cell_dofs(c);
        let mut out = Vec::new();
        for (lam, w) in rule.points.iter().zip(&rule.weights) {
            let bv = eval_local_basis(v_space.family, 2, lam, &geom);
            let bq = eval_local_basis(q_space.family, 2, lam, &geom);
            let wk = w * geom.measure;
            for (kq, psi) in bq.values.iter().enumerate() {
                for (a, g) in bv.grads.iter().enumerate() {
                    for comp in 0..2 {
                        out.push((qd[kq], vd[a * 2 + comp], -wk * g[comp] * psi));
                    }
                }
            }
        }
        out
    }))
}

fn check_hydrostatic_spaces(v_space: &FunctionSpace, q_space: &FunctionSpace, structure: &PrismaticStructure) -> Result<()> {
    if v_space.dim() != 3 || v_space.components != 2 {
        return Err(Error::SpaceMismatch("hydrostatic velocity must be a 2-component field on a 3D mesh".into()));
    }
    if q_space.dim() != 2 || q_space.components != 1 {
        return Err(Error::SpaceMismatch("hydrostatic pressure must be scalar on the surface mesh".into()));
    }
    structure.check(&v_space.mesh)?;
    let s = &structure.surface_mesh;
    if s.n_cells() != q_space.mesh.n_cells() || s.vertices != q_space.mesh.vertices || s.cells != q_space.mesh.cells {
        return Err(Error::SpaceMismatch("pressure mesh is not the surface triangulation of the prism structure".into()));
    }
    Ok(())
}

/// `B_ki = -∫_Ω (div_H φ_i) ψ̃_k` with `ψ̃_k` the z-constant extension of the
/// surface basis function `ψ_k`. On a prismatic mesh `ψ̃_k` is linear on each
/// tetrahedron, so standard volume quadrature is exact.
pub fn assemble_divergence_hydrostatic(
    v_space: &FunctionSpace,
    q_space: &FunctionSpace,
    structure: &PrismaticStructure,
) -> Result<CsrMatrix<f64>> {
    check_hydrostatic_spaces(v_space, q_space, structure)?;
    let rule = v_space.rule();
    let mesh = &v_space.mesh;
    let surface = &q_space.mesh;
    Ok(assemble_cells(q_space, v_space, mesh.n_cells(), Symmetry::General, |c| {
        let geom = CellGeometry::new(mesh, c);
        let t = structure.cell_to_prism[c];
        let sgeom = CellGeometry::new(surface, t);
        let vd = v_space.cell_dofs(c);
        let qd = q_space.cell_dofs(t);
        let mut out = Vec::new();
        for (lam, w) in rule.points.iter().zip(&rule.weights) {
            let x = cell_point(mesh, c, lam);
            let slam = surface.barycentric(t, &[x[0], x[1], 0.0]);
            let bv = eval_local_basis(v_space.family, 3, lam, &geom);
            let bq = eval_local_basis(q_space.family, 2, &slam, &sgeom);
            let wk = w * geom.measure;
            for (kq, psi) in bq.values.iter().enumerate() {
                for (a, g) in bv.grads.iter().enumerate() {
                    for comp in 0..2 {
                        out.push((qd[kq], vd[a * 2 + comp], -wk * g[comp] * psi));
                    }
                }
            }
        }
        out
    }))
}

/// The same operator by the surface formula `-∫_G (div_H φ̄_i) ψ_k`, where the
/// vertical integral `φ̄_i` is computed explicitly along vertical lines through
/// each prism column. Used to cross-check the volumetric route.
pub fn assemble_divergence_hydrostatic_surface(
    v_space: &FunctionSpace,
    q_space: &FunctionSpace,
    structure: &PrismaticStructure,
) -> Result<CsrMatrix<f64>> {
    check_hydrostatic_spaces(v_space, q_space, structure)?;
    let mesh = &v_space.mesh;
    let surface = &q_space.mesh;
    // columns: surface triangle -> tetrahedra above it
    let mut columns: Vec<Vec<usize>> = vec![Vec::new(); surface.n_cells()];
    for (c, &t) in structure.cell_to_prism.iter().enumerate() {
        columns[t].push(c);
    }
    let srule = SimplexRule::triangle(8);
    let (gz, gw) = gauss_legendre_unit(4);
    Ok(assemble_cells(q_space, v_space, surface.n_cells(), Symmetry::General, |t| {
        let sgeom = CellGeometry::new(surface, t);
        let qd = q_space.cell_dofs(t);
        let mut out = Vec::new();
        let tets: Vec<(usize, CellGeometry, Vec<usize>)> =
            columns[t].iter().map(|&c| (c, CellGeometry::new(mesh, c), v_space.cell_dofs(c))).collect();
        for (slam, sw) in srule.points.iter().zip(&srule.weights) {
            let p = cell_point(surface, t, slam);
            let bq = eval_local_basis(q_space.family, 2, slam, &sgeom);
            for (c, geom, vd) in &tets {
                // λ_j(p, z) = α_j + β_j z on this tetrahedron
                let l0 = mesh.barycentric(*c, &[p[0], p[1], 0.0]);
                let l1 = mesh.barycentric(*c, &[p[0], p[1], 1.0]);
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                for j in 0..4 {
                    let (alpha, beta) = (l0[j], l1[j] - l0[j]);
                    if beta.abs() < 1e-300 {
                        if alpha < 0.0 {
                            hi = lo;
                        }
                        continue;
                    }
                    let root = -alpha / beta;
                    if beta > 0.0 {
                        lo = lo.max(root);
                    } else {
                        hi = hi.min(root);
                    }
                }
                if !(hi > lo) {
                    continue;
                }
                let len = hi - lo;
                for (zq, wz) in gz.iter().zip(&gw) {
                    let z = lo + zq * len;
                    let lam = mesh.barycentric(*c, &[p[0], p[1], z]);
                    let bv = eval_local_basis(v_space.family, 3, &lam, geom);
                    let wk = sw * sgeom.measure * wz * len;
                    for (kq, psi) in bq.values.iter().enumerate() {
                        for (a, g) in bv.grads.iter().enumerate() {
                            for comp in 0..2 {
                                out.push((qd[kq], vd[a * 2 + comp], -wk * g[comp] * psi));
                            }
                        }
                    }
                }
            }
        }
        out
    }))
}

/// Raw load `F_i = ∫ f · φ_i` over every raw DOF, computed with a simplex
/// rule of the given degree.
pub fn assemble_load_raw<T: Scalar>(space: &FunctionSpace, f: &dyn VectorField<T>, degree: usize) -> Result<Vec<T>> {
    let rule = SimplexRule::for_dim(space.dim(), degree.max(space.quadrature_degree()));
    let nc = space.components;
    let parts: Vec<Result<Vec<(usize, T)>>> = (0..space.mesh.n_cells())
        .into_par_iter()
        .map(|c| {
            let geom = CellGeometry::new(&space.mesh, c);
            let dofs = space.cell_dofs(c);
            let mut local = vec![T::zero(); dofs.len()];
            for (lam, w) in rule.points.iter().zip(&rule.weights) {
                let x = cell_point(&space.mesh, c, lam);
                let v = f.value(&x);
                if (0..nc).any(|k| !v[k].is_finite()) {
                    return Err(Error::NonFinite { x: x[0], y: x[1], z: x[2] });
                }
                let b = eval_local_basis(space.family, space.dim(), lam, &geom);
                let wk = w * geom.measure;
                for (a, phi) in b.values.iter().enumerate() {
                    for k in 0..nc {
                        local[a * nc + k] += v[k] * T::from_real(wk * phi);
                    }
                }
            }
            Ok(dofs.into_iter().zip(local).collect())
        })
        .collect();
    let mut out = vec![T::zero(); space.n_dofs_raw];
    for part in parts {
        for (i, v) in part? {
            out[i] += v;
        }
    }
    Ok(out)
}

/// Free load vector `F_i = ∫ f · φ_i`.
pub fn assemble_load<T: Scalar>(space: &FunctionSpace, f: &dyn VectorField<T>) -> Result<Vec<T>> {
    Ok(space.reduce_dual(&assemble_load_raw(space, f, space.quadrature_degree())?))
}

/// Free load vector with a quadrature rule of at least `degree`.
pub fn assemble_load_with_degree<T: Scalar>(space: &FunctionSpace, f: &dyn VectorField<T>, degree: usize) -> Result<Vec<T>> {
    Ok(space.reduce_dual(&assemble_load_raw(space, f, degree)?))
}

/// Free load `F_i = ∫ f · φ_i + ∇f : ∇φ_i`, the right-hand side of the Ritz
/// projection of a continuous field. Needs the analytic gradient of `f`.
pub fn assemble_h1_load(space: &FunctionSpace, f: &dyn VectorField<f64>, degree: usize) -> Result<Vec<f64>> {
    let rule = SimplexRule::for_dim(space.dim(), degree.max(space.quadrature_degree()));
    let nc = space.components;
    let dim = space.dim();
    let parts: Vec<Result<Vec<(usize, f64)>>> = (0..space.mesh.n_cells())
        .into_par_iter()
        .map(|c| {
            let geom = CellGeometry::new(&space.mesh, c);
            let dofs = space.cell_dofs(c);
            let mut local = vec![0.0; dofs.len()];
            for (lam, w) in rule.points.iter().zip(&rule.weights) {
                let x = cell_point(&space.mesh, c, lam);
                let v = f.value(&x);
                let g = f
                    .gradient(&x)
                    .ok_or_else(|| Error::InvalidParameter("H1 load needs an analytic gradient".into()))?;
                let b = eval_local_basis(space.family, dim, lam, &geom);
                let wk = w * geom.measure;
                for (a, (phi, dphi)) in b.values.iter().zip(&b.grads).enumerate() {
                    for k in 0..nc {
                        let mut s = v[k] * phi;
                        for d in 0..dim {
                            s += g[k][d] * dphi[d];
                        }
                        local[a * nc + k] += wk * s;
                    }
                }
            }
            Ok(dofs.into_iter().zip(local).collect())
        })
        .collect();
    let mut out = vec![0.0; space.n_dofs_raw];
    for part in parts {
        for (i, v) in part? {
            out[i] += v;
        }
    }
    Ok(space.reduce_dual(&out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    /// 2D non-stationary Stokes, homogeneous Dirichlet on the whole boundary
    Stokes2d,
    /// hydrostatic Stokes on the periodic box
    Hydrostatic,
}

impl ProblemKind {
    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Stokes2d => "stokes2d",
            ProblemKind::Hydrostatic => "hydrostatic",
        }
    }
}

/// Velocity/pressure pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementPair {
    /// P1-bubble / P1
    Mini,
    /// P2 / P1
    TaylorHood,
    /// P1 / P1, not inf-sup stable
    P1P1,
}

impl ElementPair {
    pub fn name(self) -> &'static str {
        match self {
            ElementPair::Mini => "mini",
            ElementPair::TaylorHood => "taylor_hood",
            ElementPair::P1P1 => "p1p1",
        }
    }

    pub fn velocity_family(self) -> Family {
        match self {
            ElementPair::Mini => Family::P1Bubble,
            ElementPair::TaylorHood => Family::P2,
            ElementPair::P1P1 => Family::P1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mini" => Ok(ElementPair::Mini),
            "taylor_hood" => Ok(ElementPair::TaylorHood),
            "p1p1" => Ok(ElementPair::P1P1),
            other => Err(Error::Config(format!("unknown element pair `{other}` (expected mini, taylor_hood or p1p1)"))),
        }
    }
}

/// All operators of one discretization level.
#[derive(Debug, Clone)]
pub struct SaddleSystem {
    pub kind: ProblemKind,
    pub pair: ElementPair,
    pub velocity: FunctionSpace,
    pub pressure: FunctionSpace,
    pub structure: Option<PrismaticStructure>,
    pub m: CsrMatrix<f64>,
    pub a: CsrMatrix<f64>,
    pub b: CsrMatrix<f64>,
    pub k: CsrMatrix<f64>,
    pub m_q: CsrMatrix<f64>,
    pub mean_row: Vec<f64>,
}

impl SaddleSystem {
    pub fn from_spaces(
        kind: ProblemKind,
        pair: ElementPair,
        velocity: FunctionSpace,
        pressure: FunctionSpace,
        structure: Option<PrismaticStructure>,
    ) -> Result<Self> {
        let m = assemble_mass(&velocity);
        let a = assemble_stiffness(&velocity);
        let k = m.combine(1.0, &a, 1.0)?;
        let b = match (&structure, kind) {
            (Some(s), ProblemKind::Hydrostatic) => assemble_divergence_hydrostatic(&velocity, &pressure, s)?,
            (None, ProblemKind::Stokes2d) => assemble_divergence_2d(&velocity, &pressure)?,
            _ => return Err(Error::SpaceMismatch("prism structure required exactly for the hydrostatic problem".into())),
        };
        let m_q = assemble_mass(&pressure);
        let mean_row = pressure
            .constraints
            .mean_functional
            .clone()
            .ok_or_else(|| Error::SpaceMismatch("pressure space carries no zero-mean functional".into()))?;
        Ok(Self { kind, pair, velocity, pressure, structure, m, a, b, k, m_q, mean_row })
    }

    /// 2D Stokes on the `n × n` unit square.
    pub fn stokes_2d(n: usize, pair: ElementPair) -> Result<Self> {
        let mesh = Arc::new(triangulate_unit_square(n)?);
        let v = FunctionSpace::new(mesh.clone(), pair.velocity_family(), 2, BcSpec::StokesDirichlet)?;
        let q = FunctionSpace::new(mesh, Family::P1, 1, BcSpec::SurfacePressureZeroMean)?;
        Self::from_spaces(ProblemKind::Stokes2d, pair, v, q, None)
    }

    /// Hydrostatic Stokes on the periodic box with `n × n` surface cells and
    /// `layers` layers.
    pub fn hydrostatic(n: usize, layers: usize, depth: f64, pair: ElementPair) -> Result<Self> {
        let (mesh, structure) = periodic_box(n, layers, depth)?;
        let v = FunctionSpace::new(Arc::new(mesh), pair.velocity_family(), 2, BcSpec::HydrostaticVelocity)?;
        let q = FunctionSpace::new(Arc::new(structure.surface_mesh.clone()), Family::P1, 1, BcSpec::SurfacePressureZeroMean)?;
        Self::from_spaces(ProblemKind::Hydrostatic, pair, v, q, Some(structure))
    }

    pub fn n_velocity(&self) -> usize {
        self.velocity.n_dofs_free
    }

    pub fn n_pressure(&self) -> usize {
        self.pressure.n_dofs_free
    }

    pub fn h(&self) -> f64 {
        self.velocity.mesh.h()
    }

    /// Dump every operator in Matrix Market format into `dir`.
    pub fn write_matrix_market(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, mat) in [("M", &self.m), ("A", &self.a), ("B", &self.b), ("K", &self.k), ("M_Q", &self.m_q)] {
            let f = std::fs::File::create(dir.join(format!("{name}.mtx")))?;
            mat.write_matrix_market(std::io::BufWriter::new(f))?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("mean_row.mtx"))?);
        writeln!(f, "%%MatrixMarket matrix array real general")?;
        writeln!(f, "1 {}", self.mean_row.len())?;
        for v in &self.mean_row {
            writeln!(f, "{v:.17e}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::WithGradient;

    fn square(n: usize) -> Arc<Mesh> {
        Arc::new(triangulate_unit_square(n).unwrap())
    }

    #[test]
    fn p1_mass_single_triangle() {
        let mut mesh = triangulate_unit_square(1).unwrap();
        mesh.cells.truncate(1);
        mesh.facet_tags.clear();
        let s = FunctionSpace::new(Arc::new(mesh), Family::P1, 1, BcSpec::None).unwrap();
        let m = assemble_mass(&s);
        let area = 0.5;
        for i in 0..3 {
            let cell = s.mesh.cell(0);
            for j in 0..3 {
                let want = if i == j { area / 6.0 } else { area / 12.0 };
                assert!((m.get(cell[i], cell[j]) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mass_sums_to_measure() {
        let s = FunctionSpace::new(square(4), Family::P1, 1, BcSpec::None).unwrap();
        assert!((assemble_mass(&s).values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (b, _) = periodic_box(3, 2, 0.5).unwrap();
        let s = FunctionSpace::new(Arc::new(b), Family::P2, 1, BcSpec::None).unwrap();
        assert!((assemble_mass(&s).values.iter().sum::<f64>() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constants_in_stiffness_kernel() {
        for fam in [Family::P1, Family::P1Bubble, Family::P2] {
            let mut raw = triangulate_unit_square(3).unwrap();
            raw.periodic_map.clear();
            let s = FunctionSpace::new(Arc::new(raw), fam, 2, BcSpec::None).unwrap();
            let a = assemble_stiffness(&s);
            let ones = s.reduce(&s.interpolate(&|_p: &[f64; 3]| [1.0, 1.0, 0.0]).unwrap());
            assert!(a.mul_vec(&ones).iter().all(|v| v.abs() < 1e-12));
            assert!(a.asymmetry() <= 1e-12 * a.max_abs());
        }
    }

    #[test]
    fn rayleigh_quotient_approximates_laplace_eigenvalue() {
        let s = FunctionSpace::new(square(16), Family::P1, 1, BcSpec::StokesDirichlet).unwrap();
        let v = s.reduce(&s.interpolate(&|p: &[f64; 3]| [(2.0 * std::f64::consts::PI * p[0]).sin() * p[1] * (1.0 - p[1]), 0.0, 0.0]).unwrap());
        let a = assemble_stiffness(&s);
        let m = assemble_mass(&s);
        // sin(2πx) y(1-y): a/m = 4π² + ∫(y(1-y))'² / ∫(y(1-y))² = 4π² + 10
        let rq = a.bilinear(&v, &v) / m.bilinear(&v, &v);
        let want = 4.0 * std::f64::consts::PI.powi(2) + 10.0;
        assert!((rq - want).abs() < 0.1 * want, "{rq} vs {want}");
    }

    #[test]
    fn divergence_2d_examples() {
        let mesh = square(3);
        let v = FunctionSpace::new(mesh.clone(), Family::P2, 2, BcSpec::None).unwrap();
        let q = FunctionSpace::new(mesh, Family::P1, 1, BcSpec::SurfacePressureZeroMean).unwrap();
        let b = assemble_divergence_2d(&v, &q).unwrap();
        let c = v.reduce(&v.interpolate(&|_p: &[f64; 3]| [0.3, -1.2, 0.0]).unwrap());
        assert!(b.mul_vec(&c).iter().all(|x| x.abs() < 1e-14));
        let x = v.reduce(&v.interpolate(&|p: &[f64; 3]| [p[0], 0.0, 0.0]).unwrap());
        let bx = b.mul_vec(&x);
        // B x = -∫ ψ_k = -mean row, which annihilates zero-mean q
        let row = q.constraints.mean_functional.as_ref().unwrap();
        for (a, r) in bx.iter().zip(row) {
            assert!((a + r).abs() < 1e-14);
        }
        let mismatch = FunctionSpace::new(square(2), Family::P1, 1, BcSpec::SurfacePressureZeroMean).unwrap();
        assert!(assemble_divergence_2d(&v, &mismatch).is_err());
    }

    #[test]
    fn hydrostatic_divergence_examples_and_fubini() {
        for (fam, n, m) in [(Family::P2, 2, 2), (Family::P1Bubble, 3, 2), (Family::P1, 2, 3)] {
            let (mesh, st) = periodic_box(n, m, 0.8).unwrap();
            let mut open = mesh.clone();
            open.periodic_map.clear();
            let v = FunctionSpace::new(Arc::new(open), fam, 2, BcSpec::None).unwrap();
            let q = FunctionSpace::new(Arc::new(st.surface_mesh.clone()), Family::P1, 1, BcSpec::SurfacePressureZeroMean).unwrap();
            let b = assemble_divergence_hydrostatic(&v, &q, &st).unwrap();
            let b2 = assemble_divergence_hydrostatic_surface(&v, &q, &st).unwrap();
            let scale = b.max_abs();
            let diff = b.combine(1.0, &b2, -1.0).unwrap().max_abs();
            assert!(diff <= 1e-12 * scale.max(1.0), "{fam:?}: {diff}");

            let zonly = v.reduce(&v.interpolate(&|p: &[f64; 3]| [p[2] * p[2], (3.0 * p[2]).sin(), 0.0]).unwrap());
            assert!(b.mul_vec(&zonly).iter().all(|x| x.abs() < 1e-13));
            let x = v.reduce(&v.interpolate(&|p: &[f64; 3]| [p[0], 0.0, 0.0]).unwrap());
            let row = q.constraints.mean_functional.as_ref().unwrap();
            for (a, r) in b.mul_vec(&x).iter().zip(row) {
                assert!((a + 0.8 * r).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn hydrostatic_rejects_non_prismatic() {
        let (mesh, mut st) = periodic_box(2, 2, 1.0).unwrap();
        let v = FunctionSpace::new(Arc::new(mesh), Family::P1, 2, BcSpec::HydrostaticVelocity).unwrap();
        let q = FunctionSpace::new(Arc::new(st.surface_mesh.clone()), Family::P1, 1, BcSpec::SurfacePressureZeroMean).unwrap();
        st.cell_to_prism.swap(0, 40);
        assert!(matches!(assemble_divergence_hydrostatic(&v, &q, &st), Err(Error::NotPrismatic(_))));
    }

    #[test]
    fn load_examples() {
        let mesh = square(3);
        let s = FunctionSpace::new(mesh, Family::P2, 2, BcSpec::None).unwrap();
        let zero = assemble_load(&s, &|_p: &[f64; 3]| [0.0f64; 3]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let f = assemble_load(&s, &|_p: &[f64; 3]| [1.0, 0.0, 0.0]).unwrap();
        let c = s.reduce(&s.interpolate(&|_p: &[f64; 3]| [2.0, 5.0, 0.0]).unwrap());
        let fc: f64 = f.iter().zip(&c).map(|(a, b)| a * b).sum();
        assert!((fc - 2.0).abs() < 1e-12);

        // f = φ_j: load equals column j of M
        let m = assemble_mass(&s);
        let j = 17;
        let mut e = vec![0.0; s.n_dofs_free];
        e[j] = 1.0;
        let field = s.expand(&e);
        struct Basis<'a>(&'a FunctionSpace, &'a crate::fespace::FieldVector);
        impl VectorField<f64> for Basis<'_> {
            fn value(&self, p: &[f64; 3]) -> [f64; 3] {
                self.0.eval_at(self.1, p).unwrap()
            }
        }
        let load = assemble_load(&s, &Basis(&s, &field)).unwrap();
        let col = m.mul_vec(&e);
        for (a, b) in load.iter().zip(&col) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = |_p: &[f64; 3]| [f64::INFINITY, 0.0, 0.0];
        assert!(assemble_load(&s, &bad).is_err());
        let _ = WithGradient { value: |_p: &[f64; 3]| [0.0f64; 3], gradient: |_p: &[f64; 3]| [[0.0f64; 3]; 3] };
    }

    #[test]
    fn k_is_m_plus_a_and_ordering_invariance() {
        let sys = SaddleSystem::hydrostatic(2, 2, 1.0, ElementPair::TaylorHood).unwrap();
        let diff = sys.k.combine(1.0, &sys.m.combine(1.0, &sys.a, 1.0).unwrap(), -1.0).unwrap();
        assert!(diff.max_abs() <= 1e-14);
        assert!((sys.mean_row.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mesh = triangulate_unit_square(3).unwrap();
        let mut shuffled = mesh.clone();
        shuffled.cells.reverse();
        for c in shuffled.cells.iter_mut() {
            c[..3].rotate_left(1);
        }
        let s1 = FunctionSpace::new(Arc::new(mesh), Family::P2, 2, BcSpec::StokesDirichlet).unwrap();
        let s2 = FunctionSpace::new(Arc::new(shuffled), Family::P2, 2, BcSpec::StokesDirichlet).unwrap();
        let (a1, a2) = (assemble_stiffness(&s1), assemble_stiffness(&s2));
        assert_eq!(a1.col_idx, a2.col_idx);
        let d = a1.combine(1.0, &a2, -1.0).unwrap().max_abs();
        assert!(d <= 1e-14 * a1.max_abs().max(1.0) * 10.0, "{d}");
    }
}
