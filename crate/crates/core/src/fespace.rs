//! Lagrange finite element spaces with Dirichlet, periodic and zero-mean
//! constraints.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{local_edges, BoundaryTag, Mesh, GEOM_TOL};
use crate::quadrature::SimplexRule;
use crate::sparse::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    P1,
    /// P1 enriched by one interior bubble per cell (MINI velocity)
    P1Bubble,
    P2,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::P1 => "P1",
            Family::P1Bubble => "P1_BUBBLE",
            Family::P2 => "P2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BcSpec {
    /// zero on every facet tagged `Dirichlet`
    StokesDirichlet,
    /// zero on `Γ_b`, periodic on `Γ_l`
    HydrostaticVelocity,
    /// periodic where the mesh is identified, zero mean via a separate functional
    SurfacePressureZeroMean,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Norm {
    L2,
    /// full `H¹` norm, `(‖v‖² + ‖∇v‖²)^½`
    H1,
    H1Semi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofStatus {
    Free(usize),
    Dirichlet,
    PeriodicSlave(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub dirichlet_dofs: BTreeSet<usize>,
    /// raw slave DOF -> raw master DOF
    pub periodic_pairs: BTreeMap<usize, usize>,
    pub zero_mean: bool,
    /// `∫ ψ_k` for every free DOF when `zero_mean` is set
    pub mean_functional: Option<Vec<f64>>,
}

/// Per-cell affine geometry.
#[derive(Debug, Clone, Copy)]
pub struct CellGeometry {
    pub measure: f64,
    pub grad_lambda: [[f64; 3]; 4],
}

impl CellGeometry {
    pub fn new(mesh: &Mesh, c: usize) -> Self {
        let v = mesh.cell_coords(c);
        let mut g = [[0.0; 3]; 4];
        match mesh.dim {
            2 => {
                let det = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]);
                g[1] = [(v[2][1] - v[0][1]) / det, -(v[2][0] - v[0][0]) / det, 0.0];
                g[2] = [-(v[1][1] - v[0][1]) / det, (v[1][0] - v[0][0]) / det, 0.0];
                g[0] = [-g[1][0] - g[2][0], -g[1][1] - g[2][1], 0.0];
            }
            3 => {
                let d = |a: usize| [v[a][0] - v[0][0], v[a][1] - v[0][1], v[a][2] - v[0][2]];
                let (a, b, cc) = (d(1), d(2), d(3));
                let cross = |p: [f64; 3], q: [f64; 3]| [p[1] * q[2] - p[2] * q[1], p[2] * q[0] - p[0] * q[2], p[0] * q[1] - p[1] * q[0]];
                let bc = cross(b, cc);
                let det = a[0] * bc[0] + a[1] * bc[1] + a[2] * bc[2];
                let ca = cross(cc, a);
                let ab = cross(a, b);
                for k in 0..3 {
                    g[1][k] = bc[k] / det;
                    g[2][k] = ca[k] / det;
                    g[3][k] = ab[k] / det;
                    g[0][k] = -g[1][k] - g[2][k] - g[3][k];
                }
            }
            _ => unreachable!(),
        }
        Self { measure: mesh.signed_measure(c), grad_lambda: g }
    }
}

/// Values and gradients of the local scalar basis at one point.
#[derive(Debug, Clone)]
pub struct LocalBasis {
    pub values: Vec<f64>,
    pub grads: Vec<[f64; 3]>,
}

/// Number of local scalar basis functions.
pub fn local_dimension(family: Family, dim: usize) -> usize {
    match family {
        Family::P1 => dim + 1,
        Family::P1Bubble => dim + 2,
        Family::P2 => (dim + 1) * (dim + 2) / 2,
    }
}

fn bubble_scale(dim: usize) -> f64 {
    if dim == 2 {
        27.0
    } else {
        256.0
    }
}

/// Evaluate the local scalar basis at barycentric point `lam`.
///
/// Ordering: vertex functions, then edge functions in [`local_edges`] order
/// (P2) or the single bubble (P1 bubble).
pub fn eval_local_basis(family: Family, dim: usize, lam: &[f64; 4], geom: &CellGeometry) -> LocalBasis {
    let nv = dim + 1;
    let gl = &geom.grad_lambda;
    let mut values = Vec::with_capacity(local_dimension(family, dim));
    let mut grads = Vec::with_capacity(local_dimension(family, dim));
    match family {
        Family::P1 | Family::P1Bubble => {
            for i in 0..nv {
                values.push(lam[i]);
                grads.push(gl[i]);
            }
            if family == Family::P1Bubble {
                let s = bubble_scale(dim);
                let prod: f64 = lam[..nv].iter().product();
                let mut g = [0.0; 3];
                for i in 0..nv {
                    let others: f64 = (0..nv).filter(|&j| j != i).map(|j| lam[j]).product();
                    for k in 0..3 {
                        g[k] += s * others * gl[i][k];
                    }
                }
                values.push(s * prod);
                grads.push(g);
            }
        }
        Family::P2 => {
            for i in 0..nv {
                values.push(lam[i] * (2.0 * lam[i] - 1.0));
                let f = 4.0 * lam[i] - 1.0;
                grads.push([f * gl[i][0], f * gl[i][1], f * gl[i][2]]);
            }
            for e in local_edges(dim) {
                let (a, b) = (e[0], e[1]);
                values.push(4.0 * lam[a] * lam[b]);
                let mut g = [0.0; 3];
                for k in 0..3 {
                    g[k] = 4.0 * (lam[a] * gl[b][k] + lam[b] * gl[a][k]);
                }
                grads.push(g);
            }
        }
    }
    LocalBasis { values, grads }
}

/// A (possibly vector-valued) field given pointwise.
pub trait VectorField<T: Scalar>: Sync {
    fn value(&self, p: &[f64; 3]) -> [T; 3];
    /// `grad[c][k] = ∂_k f_c`, when known analytically
    fn gradient(&self, _p: &[f64; 3]) -> Option<[[T; 3]; 3]> {
        None
    }
}

impl<T: Scalar, F: Fn(&[f64; 3]) -> [T; 3] + Sync> VectorField<T> for F {
    fn value(&self, p: &[f64; 3]) -> [T; 3] {
        self(p)
    }
}

/// A field together with its analytic gradient.
pub struct WithGradient<F, G> {
    pub value: F,
    pub gradient: G,
}

impl<T, F, G> VectorField<T> for WithGradient<F, G>
where
    T: Scalar,
    F: Fn(&[f64; 3]) -> [T; 3] + Sync,
    G: Fn(&[f64; 3]) -> [[T; 3]; 3] + Sync,
{
    fn value(&self, p: &[f64; 3]) -> [T; 3] {
        (self.value)(p)
    }
    fn gradient(&self, p: &[f64; 3]) -> Option<[[T; 3]; 3]> {
        Some((self.gradient)(p))
    }
}

/// Coefficients of a finite element function over all raw DOFs, with the
/// constraints of its space already applied.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldVector<T = f64> {
    pub coeffs: Vec<T>,
}

impl<T: Scalar> FieldVector<T> {
    pub fn zeros(n: usize) -> Self {
        Self { coeffs: vec![T::zero(); n] }
    }
}

#[derive(Debug, Clone)]
pub struct FunctionSpace {
    pub mesh: Arc<Mesh>,
    pub family: Family,
    pub components: usize,
    pub bc: BcSpec,
    pub constraints: ConstraintSet,
    pub n_dofs_raw: usize,
    pub n_dofs_free: usize,
    /// scalar node indices per cell, in local basis order
    cell_nodes: Vec<Vec<usize>>,
    node_coords: Vec<[f64; 3]>,
    status: Vec<DofStatus>,
    free_to_raw: Vec<usize>,
}

fn quantize(p: &[f64; 3]) -> [i64; 3] {
    [(p[0] * 1e9).round() as i64, (p[1] * 1e9).round() as i64, (p[2] * 1e9).round() as i64]
}

impl FunctionSpace {
    pub fn new(mesh: Arc<Mesh>, family: Family, components: usize, bc: BcSpec) -> Result<Self> {
        if !(1..=3).contains(&components) {
            return Err(Error::InvalidParameter(format!("components must be 1, 2 or 3, got {components}")));
        }
        if mesh.dim != 2 && mesh.dim != 3 {
            return Err(Error::UnsupportedFamily { family: family.name().into(), dim: mesh.dim });
        }
        match (bc, mesh.dim) {
            (BcSpec::HydrostaticVelocity, 2) => {
                return Err(Error::InvalidParameter("hydrostatic velocity needs a 3D mesh".into()))
            }
            (BcSpec::SurfacePressureZeroMean, 3) => {
                return Err(Error::InvalidParameter("surface pressure lives on a 2D mesh".into()))
            }
            _ => {}
        }
        let dim = mesh.dim;
        let nv = mesh.n_vertices();
        let mut node_coords: Vec<[f64; 3]> = mesh.vertices.clone();
        let mut cell_nodes: Vec<Vec<usize>> = (0..mesh.n_cells()).map(|c| mesh.cell(c).to_vec()).collect();
        let mut edge_node: BTreeMap<[usize; 2], usize> = BTreeMap::new();
        match family {
            Family::P1 => {}
            Family::P1Bubble => {
                for (c, nodes) in cell_nodes.iter_mut().enumerate() {
                    let pts = mesh.cell_coords(c);
                    let mut g = [0.0; 3];
                    for p in &pts {
                        for k in 0..3 {
                            g[k] += p[k] / pts.len() as f64;
                        }
                    }
                    nodes.push(node_coords.len());
                    node_coords.push(g);
                }
            }
            Family::P2 => {
                for e in mesh.edges() {
                    edge_node.insert(e, node_coords.len());
                    let (a, b) = (mesh.vertices[e[0]], mesh.vertices[e[1]]);
                    node_coords.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (a[2] + b[2])]);
                }
                for (c, nodes) in cell_nodes.iter_mut().enumerate() {
                    let cell = mesh.cell(c).to_vec();
                    for le in local_edges(dim) {
                        let (a, b) = (cell[le[0]], cell[le[1]]);
                        nodes.push(edge_node[&[a.min(b), a.max(b)]]);
                    }
                }
            }
        }
        let n_nodes = node_coords.len();

        // Dirichlet nodes: vertices and edges of the tagged facets
        let dirichlet_tag = match bc {
            BcSpec::StokesDirichlet => Some(BoundaryTag::Dirichlet),
            BcSpec::HydrostaticVelocity => Some(BoundaryTag::Bottom),
            _ => None,
        };
        let mut dirichlet_nodes = BTreeSet::new();
        if let Some(tag) = dirichlet_tag {
            for (key, t) in &mesh.facet_tags {
                if *t != tag {
                    continue;
                }
                let verts: Vec<usize> = key.iter().copied().filter(|&v| v < nv).collect();
                dirichlet_nodes.extend(verts.iter().copied());
                if family == Family::P2 {
                    for i in 0..verts.len() {
                        for j in i + 1..verts.len() {
                            let (a, b) = (verts[i].min(verts[j]), verts[i].max(verts[j]));
                            dirichlet_nodes.insert(edge_node[&[a, b]]);
                        }
                    }
                }
            }
        }

        // periodic nodes: wrap coordinates on identified faces, first node of a
        // class (in index order) is its master
        let periodic = !mesh.periodic_map.is_empty() && matches!(bc, BcSpec::HydrostaticVelocity | BcSpec::SurfacePressureZeroMean | BcSpec::None);
        let mut node_master: Vec<usize> = (0..n_nodes).collect();
        if periodic {
            let mut wrap_x = false;
            let mut wrap_y = false;
            for (&s, &m) in &mesh.periodic_map {
                let (p, q) = (mesh.vertices[s], mesh.vertices[m]);
                wrap_x |= p[0] - q[0] > 0.5;
                wrap_y |= p[1] - q[1] > 0.5;
            }
            let mut class: BTreeMap<[i64; 3], usize> = BTreeMap::new();
            for (i, p) in node_coords.iter().enumerate() {
                let mut w = *p;
                if wrap_x && (w[0] - 1.0).abs() <= GEOM_TOL {
                    w[0] = 0.0;
                }
                if wrap_y && (w[1] - 1.0).abs() <= GEOM_TOL {
                    w[1] = 0.0;
                }
                let key = quantize(&w);
                let m = *class.entry(key).or_insert(i);
                node_master[i] = m;
            }
            for (&s, &m) in &mesh.periodic_map {
                if node_master[s] != m {
                    return Err(Error::InvariantViolation(format!("vertex {s} wraps to {} not {m}", node_master[s])));
                }
            }
        }

        let n_dofs_raw = n_nodes * components;
        let mut status = vec![DofStatus::Dirichlet; n_dofs_raw];
        let mut free_to_raw = Vec::new();
        let mut constraints = ConstraintSet {
            dirichlet_dofs: BTreeSet::new(),
            periodic_pairs: BTreeMap::new(),
            zero_mean: bc == BcSpec::SurfacePressureZeroMean,
            mean_functional: None,
        };
        for node in 0..n_nodes {
            let master = node_master[node];
            let is_dirichlet = dirichlet_nodes.contains(&node) || dirichlet_nodes.contains(&master);
            for c in 0..components {
                let dof = node * components + c;
                if is_dirichlet {
                    status[dof] = DofStatus::Dirichlet;
                    constraints.dirichlet_dofs.insert(dof);
                } else if master != node {
                    let m = master * components + c;
                    status[dof] = DofStatus::PeriodicSlave(m);
                    constraints.periodic_pairs.insert(dof, m);
                } else {
                    status[dof] = DofStatus::Free(free_to_raw.len());
                    free_to_raw.push(dof);
                }
            }
        }
        let n_dofs_free = free_to_raw.len();
        let mut space = Self {
            mesh,
            family,
            components,
            bc,
            constraints,
            n_dofs_raw,
            n_dofs_free,
            cell_nodes,
            node_coords,
            status,
            free_to_raw,
        };
        if space.constraints.zero_mean {
            let mut row = vec![0.0; space.n_dofs_free];
            let rule = space.rule();
            for c in 0..space.mesh.n_cells() {
                let geom = CellGeometry::new(&space.mesh, c);
                let dofs = space.cell_dofs(c);
                for (lam, w) in rule.points.iter().zip(&rule.weights) {
                    let basis = eval_local_basis(family, dim, lam, &geom);
                    for (a, &phi) in basis.values.iter().enumerate() {
                        if let Some(f) = space.free_index(dofs[a * components]) {
                            row[f] += w * geom.measure * phi;
                        }
                    }
                }
            }
            space.constraints.mean_functional = Some(row);
        }
        Ok(space)
    }

    pub fn dim(&self) -> usize {
        self.mesh.dim
    }

    /// Quadrature rule exact for products of two basis functions.
    pub fn rule(&self) -> SimplexRule {
        SimplexRule::for_dim(self.dim(), self.quadrature_degree())
    }

    pub fn quadrature_degree(&self) -> usize {
        match (self.family, self.dim()) {
            (Family::P1Bubble, 2) => 6,
            (Family::P1Bubble, _) => 8,
            _ => 4,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn node_coords(&self) -> &[[f64; 3]] {
        &self.node_coords
    }

    /// Scalar node indices of a cell.
    pub fn cell_nodes(&self, c: usize) -> &[usize] {
        &self.cell_nodes[c]
    }

    /// Raw DOFs of a cell, node-major: `node * components + component`.
    pub fn cell_dofs(&self, c: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cell_nodes[c].len() * self.components);
        for &n in &self.cell_nodes[c] {
            for k in 0..self.components {
                out.push(n * self.components + k);
            }
        }
        out
    }

    pub fn status(&self, raw: usize) -> DofStatus {
        self.status[raw]
    }

    /// Free DOF carrying raw DOF `raw` (through its periodic master), if any.
    pub fn free_index(&self, raw: usize) -> Option<usize> {
        match self.status[raw] {
            DofStatus::Free(f) => Some(f),
            DofStatus::Dirichlet => None,
            DofStatus::PeriodicSlave(m) => match self.status[m] {
                DofStatus::Free(f) => Some(f),
                _ => None,
            },
        }
    }

    pub fn free_to_raw(&self) -> &[usize] {
        &self.free_to_raw
    }

    /// Free coefficients -> raw coefficients (slaves copy masters, Dirichlet 0).
    pub fn expand<T: Scalar>(&self, free: &[T]) -> FieldVector<T> {
        assert_eq!(free.len(), self.n_dofs_free);
        let coeffs = (0..self.n_dofs_raw).map(|r| self.free_index(r).map_or(T::zero(), |f| free[f])).collect();
        FieldVector { coeffs }
    }

    /// Raw coefficients -> free coefficients (values at masters).
    pub fn reduce<T: Scalar>(&self, field: &FieldVector<T>) -> Vec<T> {
        self.free_to_raw.iter().map(|&r| field.coeffs[r]).collect()
    }

    /// Raw dual vector (e.g. a load) -> free dual vector, folding slaves into masters.
    pub fn reduce_dual<T: Scalar>(&self, raw: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.n_dofs_free];
        for (r, &v) in raw.iter().enumerate() {
            if let Some(f) = self.free_index(r) {
                out[f] += v;
            }
        }
        out
    }

    /// Enforce constraints on arbitrary raw coefficients.
    pub fn constrain<T: Scalar>(&self, field: &FieldVector<T>) -> FieldVector<T> {
        self.expand(&self.reduce(field))
    }

    /// Nodal interpolant. Master nodes are sampled; slaves copy their master
    /// and Dirichlet DOFs are set to zero. Bubble coefficients are zero.
    pub fn interpolate<T: Scalar>(&self, f: &dyn VectorField<T>) -> Result<FieldVector<T>> {
        let mut raw = vec![T::zero(); self.n_dofs_raw];
        let bubble_start = if self.family == Family::P1Bubble { self.mesh.n_vertices() } else { usize::MAX };
        for (node, p) in self.node_coords.iter().enumerate() {
            if node >= bubble_start {
                continue;
            }
            let v = f.value(p);
            for k in 0..self.components {
                if !v[k].is_finite() {
                    return Err(Error::NonFinite { x: p[0], y: p[1], z: p[2] });
                }
                raw[node * self.components + k] = v[k];
            }
        }
        Ok(self.constrain(&FieldVector { coeffs: raw }))
    }

    /// Value of a field at barycentric point `lam` of cell `c`.
    pub fn eval_in_cell<T: Scalar>(&self, field: &FieldVector<T>, c: usize, lam: &[f64; 4]) -> [T; 3] {
        let geom = CellGeometry::new(&self.mesh, c);
        let basis = eval_local_basis(self.family, self.dim(), lam, &geom);
        self.combine_values(field, c, &basis)
    }

    pub(crate) fn combine_values<T: Scalar>(&self, field: &FieldVector<T>, c: usize, basis: &LocalBasis) -> [T; 3] {
        let mut out = [T::zero(); 3];
        for (a, &node) in self.cell_nodes[c].iter().enumerate() {
            let phi = T::from_real(basis.values[a]);
            for k in 0..self.components {
                out[k] += field.coeffs[node * self.components + k] * phi;
            }
        }
        out
    }

    pub(crate) fn combine_grads<T: Scalar>(&self, field: &FieldVector<T>, c: usize, basis: &LocalBasis) -> [[T; 3]; 3] {
        let mut out = [[T::zero(); 3]; 3];
        for (a, &node) in self.cell_nodes[c].iter().enumerate() {
            let g = basis.grads[a];
            for k in 0..self.components {
                let coef = field.coeffs[node * self.components + k];
                for d in 0..3 {
                    out[k][d] += coef * T::from_real(g[d]);
                }
            }
        }
        out
    }

    /// Value of a field at an arbitrary point of the domain.
    pub fn eval_at<T: Scalar>(&self, field: &FieldVector<T>, p: &[f64; 3]) -> Option<[T; 3]> {
        let (c, lam) = self.mesh.locate(p)?;
        Some(self.eval_in_cell(field, c, &lam))
    }

    /// `‖f - g_h‖` for a continuous field `f` and discrete `g_h`, using the
    /// space's quadrature rule.
    pub fn error_norm<T: Scalar>(&self, f: &dyn VectorField<T>, field: &FieldVector<T>, norm: Norm) -> Result<f64> {
        let rule = self.rule();
        let dim = self.dim();
        let mut l2 = 0.0;
        let mut semi = 0.0;
        for c in 0..self.mesh.n_cells() {
            let geom = CellGeometry::new(&self.mesh, c);
            let verts = self.mesh.cell_coords(c);
            for (lam, w) in rule.points.iter().zip(&rule.weights) {
                let mut x = [0.0; 3];
                for (i, v) in verts.iter().enumerate() {
                    for k in 0..3 {
                        x[k] += lam[i] * v[k];
                    }
                }
                let basis = eval_local_basis(self.family, dim, lam, &geom);
                let wk = w * geom.measure;
                if norm != Norm::H1Semi {
                    let uh = self.combine_values(field, c, &basis);
                    let u = f.value(&x);
                    for k in 0..self.components {
                        l2 += wk * (u[k] - uh[k]).modulus().powi(2);
                    }
                }
                if norm != Norm::L2 {
                    let g = f
                        .gradient(&x)
                        .ok_or_else(|| Error::InvalidParameter("H1 error needs an analytic gradient".into()))?;
                    let gh = self.combine_grads(field, c, &basis);
                    for k in 0..self.components {
                        for d in 0..dim {
                            semi += wk * (g[k][d] - gh[k][d]).modulus().powi(2);
                        }
                    }
                }
            }
        }
        Ok(match norm {
            Norm::L2 => l2.sqrt(),
            Norm::H1 => (l2 + semi).sqrt(),
            Norm::H1Semi => semi.sqrt(),
        })
    }

    /// `‖f - I_h f‖` in the requested norm.
    pub fn interpolation_error<T: Scalar>(&self, f: &dyn VectorField<T>, norm: Norm) -> Result<f64> {
        let ih = self.interpolate(f)?;
        self.error_norm(f, &ih, norm)
    }

    /// Cartesian coordinates of a barycentric point of cell `c`.
    pub fn point_in_cell(&self, c: usize, lam: &[f64; 4]) -> [f64; 3] {
        let mut x = [0.0; 3];
        for (i, &v) in self.mesh.cell(c).iter().enumerate() {
            for k in 0..3 {
                x[k] += lam[i] * self.mesh.vertices[v][k];
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{periodic_box, triangulate_unit_square};
    use std::f64::consts::PI;

    fn square(n: usize) -> Arc<Mesh> {
        Arc::new(triangulate_unit_square(n).unwrap())
    }

    #[test]
    fn dof_counts_match_combinatorics() {
        let (b, _) = periodic_box(2, 2, 1.0).unwrap();
        let v = FunctionSpace::new(Arc::new(b), Family::P1, 2, BcSpec::HydrostaticVelocity).unwrap();
        assert_eq!(v.n_dofs_free, 16);

        let s = FunctionSpace::new(square(2), Family::P1Bubble, 2, BcSpec::StokesDirichlet).unwrap();
        assert_eq!((s.n_dofs_raw, s.n_dofs_free), (34, 18));

        let (_, st) = periodic_box(2, 2, 1.0).unwrap();
        let q = FunctionSpace::new(Arc::new(st.surface_mesh), Family::P1, 1, BcSpec::SurfacePressureZeroMean).unwrap();
        assert_eq!(q.n_dofs_free, 4);
        let row = q.constraints.mean_functional.as_ref().unwrap();
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let p2 = FunctionSpace::new(square(2), Family::P2, 2, BcSpec::StokesDirichlet).unwrap();
        // 9 vertices + 16 edges; interior: 1 vertex + 8 edges
        assert_eq!((p2.n_dofs_raw, p2.n_dofs_free), (50, 18));
    }

    #[test]
    fn every_raw_dof_has_one_status() {
        let (b, _) = periodic_box(3, 2, 1.0).unwrap();
        for fam in [Family::P1, Family::P1Bubble, Family::P2] {
            let v = FunctionSpace::new(Arc::new(b.clone()), fam, 2, BcSpec::HydrostaticVelocity).unwrap();
            let mut seen_free = vec![false; v.n_dofs_free];
            for r in 0..v.n_dofs_raw {
                match v.status(r) {
                    DofStatus::Free(f) => {
                        assert!(!seen_free[f]);
                        seen_free[f] = true;
                        assert!(!v.constraints.dirichlet_dofs.contains(&r));
                    }
                    DofStatus::Dirichlet => assert!(v.constraints.dirichlet_dofs.contains(&r)),
                    DofStatus::PeriodicSlave(m) => {
                        assert!(!v.constraints.periodic_pairs.contains_key(&m), "chain at {r}");
                        assert!(matches!(v.status(m), DofStatus::Free(_)));
                    }
                }
            }
            assert!(seen_free.iter().all(|&s| s));
        }
    }

    #[test]
    fn bubble_and_p2_need_supported_dims() {
        let (b, _) = periodic_box(2, 1, 1.0).unwrap();
        assert!(FunctionSpace::new(Arc::new(b), Family::P1, 1, BcSpec::SurfacePressureZeroMean).is_err());
        assert!(FunctionSpace::new(square(2), Family::P1, 4, BcSpec::None).is_err());
    }

    #[test]
    fn nodal_property() {
        for dim in [2, 3] {
            let mesh: Mesh = if dim == 2 {
                triangulate_unit_square(1).unwrap()
            } else {
                crate::mesh::build_prismatic_mesh(&triangulate_unit_square(1).unwrap(), 1.0, 1).unwrap().0
            };
            let geom = CellGeometry::new(&mesh, 0);
            let mut nodes: Vec<[f64; 4]> = (0..=dim)
                .map(|i| {
                    let mut l = [0.0; 4];
                    l[i] = 1.0;
                    l
                })
                .collect();
            for e in local_edges(dim) {
                let mut l = [0.0; 4];
                l[e[0]] = 0.5;
                l[e[1]] = 0.5;
                nodes.push(l);
            }
            let b = eval_local_basis(Family::P2, dim, &[0.0; 4], &geom);
            assert_eq!(b.values.len(), nodes.len());
            for (j, lam) in nodes.iter().enumerate() {
                let b = eval_local_basis(Family::P2, dim, lam, &geom);
                for (i, v) in b.values.iter().enumerate() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((v - want).abs() < 1e-13);
                }
            }
            let centroid = [1.0 / (dim + 1) as f64; 4];
            let mut centroid = centroid;
            if dim == 2 {
                centroid[3] = 0.0;
            }
            let b = eval_local_basis(Family::P1Bubble, dim, &centroid, &geom);
            assert!((b.values[dim + 1] - 1.0).abs() < 1e-13);
            for lam in &nodes {
                let b = eval_local_basis(Family::P1Bubble, dim, lam, &geom);
                assert!(b.values[dim + 1].abs() < 1e-13);
            }
        }
    }

    #[test]
    fn linear_reproduction() {
        let lin = |p: &[f64; 3]| [1.0 + 2.0 * p[0] - 3.0 * p[1], 0.5 * p[0] + p[1], 0.0];
        for fam in [Family::P1, Family::P1Bubble, Family::P2] {
            let s = FunctionSpace::new(square(3), fam, 2, BcSpec::None).unwrap();
            let ih = s.interpolate(&lin).unwrap();
            for k in 0..20 {
                let t = 0.1 + 0.8 * ((k as f64 * 0.754_877_666).fract());
                let u = 0.1 + 0.8 * ((k as f64 * 0.569_840_29).fract());
                let p = [t, u, 0.0];
                let v = s.eval_at(&ih, &p).unwrap();
                let e = lin(&p);
                assert!((v[0] - e[0]).abs() < 1e-12 && (v[1] - e[1]).abs() < 1e-12);
            }
            assert!(s.interpolation_error(&lin, Norm::L2).unwrap() < 1e-12);
            assert!(s.interpolate(&|_p: &[f64; 3]| [0.0f64; 3]).unwrap().coeffs.iter().all(|&c| c == 0.0));
        }
    }

    #[test]
    fn non_finite_rejected() {
        let s = FunctionSpace::new(square(2), Family::P1, 1, BcSpec::None).unwrap();
        let bad = |p: &[f64; 3]| [if p[0] > 0.9 { f64::NAN } else { 0.0 }, 0.0, 0.0];
        assert!(matches!(s.interpolate(&bad), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn hydrostatic_interpolant_satisfies_constraints() {
        let (b, _) = periodic_box(4, 3, 1.0).unwrap();
        let v = FunctionSpace::new(Arc::new(b), Family::P2, 2, BcSpec::HydrostaticVelocity).unwrap();
        let f = |p: &[f64; 3]| [(2.0 * PI * p[0]).sin() * (p[2] + 1.0) * (1.0 - p[2]), 0.0, 0.0];
        let ih = v.interpolate(&f).unwrap();
        for &d in &v.constraints.dirichlet_dofs {
            assert_eq!(ih.coeffs[d], 0.0);
        }
        for (&s, &m) in &v.constraints.periodic_pairs {
            assert_eq!(ih.coeffs[s], ih.coeffs[m]);
        }
    }

    #[test]
    fn partition_of_unity() {
        let (b, _) = periodic_box(2, 2, 1.0).unwrap();
        let meshes = [triangulate_unit_square(2).unwrap(), b];
        for mesh in &meshes {
            let dim = mesh.dim;
            for c in [0, mesh.n_cells() - 1] {
                let geom = CellGeometry::new(mesh, c);
                for fam in [Family::P1, Family::P1Bubble, Family::P2] {
                    for k in 0..10 {
                        let mut lam = [0.0; 4];
                        let mut s = 0.0;
                        for i in 0..=dim {
                            lam[i] = 1.0 + ((k * 7 + i * 3) as f64 * 0.618).fract();
                            s += lam[i];
                        }
                        for l in lam.iter_mut() {
                            *l /= s;
                        }
                        let b = eval_local_basis(fam, dim, &lam, &geom);
                        let n = if fam == Family::P1Bubble { dim + 1 } else { b.values.len() };
                        let total: f64 = b.values[..n].iter().sum();
                        assert!((total - 1.0).abs() < 1e-12);
                    }
                    if fam == Family::P1Bubble {
                        for f in crate::mesh::local_facets(dim) {
                            let mut lam = [0.0; 4];
                            for &i in f.iter() {
                                lam[i] = 1.0 / f.len() as f64;
                            }
                            let b = eval_local_basis(fam, dim, &lam, &geom);
                            assert!(b.values[dim + 1].abs() < 1e-15);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn interpolation_rates_p1() {
        let f = WithGradient {
            value: |p: &[f64; 3]| [(2.0 * PI * p[0]).sin() * (2.0 * PI * p[1]).sin(), 0.0, 0.0],
            gradient: |p: &[f64; 3]| {
                let (sx, cx) = (2.0 * PI * p[0]).sin_cos();
                let (sy, cy) = (2.0 * PI * p[1]).sin_cos();
                [[2.0 * PI * cx * sy, 2.0 * PI * sx * cy, 0.0], [0.0; 3], [0.0; 3]]
            },
        };
        let errs: Vec<(f64, f64)> = [4, 8, 16]
            .iter()
            .map(|&n| {
                let s = FunctionSpace::new(square(n), Family::P1, 1, BcSpec::None).unwrap();
                (s.interpolation_error(&f, Norm::H1Semi).unwrap(), s.interpolation_error(&f, Norm::L2).unwrap())
            })
            .collect();
        // h = 1/4 resolves one wavelength with four cells and is still
        // pre-asymptotic; the 8 -> 16 pair is in the asymptotic regime
        let (h1_ratio, l2_ratio) = (errs[1].0 / errs[2].0, errs[1].1 / errs[2].1);
        assert!((h1_ratio - 2.0).abs() < 0.15, "H1 ratio {h1_ratio}");
        assert!((l2_ratio - 4.0).abs() < 0.3, "L2 ratio {l2_ratio}");
        assert!(errs[0].0 > errs[1].0 && errs[0].1 > errs[1].1);
    }

    #[test]
    fn expand_reduce_identity_and_closure() {
        let (b, _) = periodic_box(3, 2, 1.0).unwrap();
        let v = FunctionSpace::new(Arc::new(b), Family::P2, 2, BcSpec::HydrostaticVelocity).unwrap();
        let free: Vec<f64> = (0..v.n_dofs_free).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(v.reduce(&v.expand(&free)), free);
        let raw = FieldVector { coeffs: (0..v.n_dofs_raw).map(|i| (i as f64 * 0.11).cos()).collect() };
        let once = v.constrain(&raw);
        assert_eq!(v.constrain(&once), once);
    }
}
