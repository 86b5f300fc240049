//! Simplicial meshes of the unit square and of prismatic boxes `G × (-D, 0)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Coordinate tolerance used for geometric matching.
pub const GEOM_TOL: f64 = 1e-12;

const UNUSED: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BoundaryTag {
    /// `Γ_b`, the bottom `z = -D`
    Bottom,
    /// `Γ_u`, the surface `z = 0`
    Top,
    /// `Γ_l`, the lateral faces `∂G × (-D, 0)`
    Lateral,
    /// whole-boundary Dirichlet tag of the 2D square
    Dirichlet,
}

/// Sorted vertex indices of a facet; 2D facets (edges) pad with `usize::MAX`.
pub type FacetKey = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    X,
    Y,
}

/// Structured-grid metadata used for O(1) point location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridInfo {
    pub n: usize,
    pub layers: usize,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub dim: usize,
    pub vertices: Vec<[f64; 3]>,
    /// `dim + 1` vertex indices per cell, unused slots are `usize::MAX`
    pub cells: Vec<[usize; 4]>,
    pub facet_tags: BTreeMap<FacetKey, BoundaryTag>,
    /// slave vertex -> master vertex (always a root, never itself a slave)
    pub periodic_map: BTreeMap<usize, usize>,
    pub grid: Option<GridInfo>,
}

/// Prism-column bookkeeping of a prismatic tetrahedralization.
#[derive(Debug, Clone, PartialEq)]
pub struct PrismaticStructure {
    pub surface_mesh: Mesh,
    /// tetrahedron -> parent surface triangle
    pub cell_to_prism: Vec<usize>,
    /// tetrahedron -> vertical layer (0 at the bottom)
    pub cell_layer: Vec<usize>,
    pub layers: usize,
    pub depth: f64,
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    dot3(&sub(a, b), &sub(a, b)).sqrt()
}

pub(crate) fn facet_key(verts: &[usize]) -> FacetKey {
    let mut k = [UNUSED; 3];
    k[..verts.len()].copy_from_slice(verts);
    k[..verts.len()].sort_unstable();
    k
}

/// Local facets of a simplex (vertex positions within the cell).
pub fn local_facets(dim: usize) -> &'static [&'static [usize]] {
    match dim {
        2 => &[&[1, 2], &[0, 2], &[0, 1]],
        3 => &[&[1, 2, 3], &[0, 2, 3], &[0, 1, 3], &[0, 1, 2]],
        _ => panic!("unsupported dimension {dim}"),
    }
}

/// Local edges of a simplex.
pub fn local_edges(dim: usize) -> &'static [[usize; 2]] {
    match dim {
        2 => &[[0, 1], [1, 2], [0, 2]],
        3 => &[[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]],
        _ => panic!("unsupported dimension {dim}"),
    }
}

impl Mesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, c: usize) -> &[usize] {
        &self.cells[c][..self.dim + 1]
    }

    pub fn cell_coords(&self, c: usize) -> Vec<[f64; 3]> {
        self.cell(c).iter().map(|&v| self.vertices[v]).collect()
    }

    /// Signed area (2D) or volume (3D).
    pub fn signed_measure(&self, c: usize) -> f64 {
        let p = self.cell_coords(c);
        match self.dim {
            2 => {
                let a = sub(&p[1], &p[0]);
                let b = sub(&p[2], &p[0]);
                0.5 * (a[0] * b[1] - a[1] * b[0])
            }
            3 => {
                let a = sub(&p[1], &p[0]);
                let b = sub(&p[2], &p[0]);
                let cc = sub(&p[3], &p[0]);
                dot3(&a, &cross(&b, &cc)) / 6.0
            }
            _ => unreachable!(),
        }
    }

    pub fn measure(&self) -> f64 {
        (0..self.n_cells()).map(|c| self.signed_measure(c)).sum()
    }

    pub fn cell_diameter(&self, c: usize) -> f64 {
        let p = self.cell_coords(c);
        let mut d = 0.0f64;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                d = d.max(dist(&p[i], &p[j]));
            }
        }
        d
    }

    /// Mesh size `h = max diam(K)`.
    pub fn h(&self) -> f64 {
        (0..self.n_cells()).map(|c| self.cell_diameter(c)).fold(0.0, f64::max)
    }

    fn facet_measure(&self, verts: &[usize]) -> f64 {
        let p: Vec<[f64; 3]> = verts.iter().map(|&v| self.vertices[v]).collect();
        match p.len() {
            2 => dist(&p[0], &p[1]),
            3 => {
                let n = cross(&sub(&p[1], &p[0]), &sub(&p[2], &p[0]));
                0.5 * dot3(&n, &n).sqrt()
            }
            _ => unreachable!(),
        }
    }

    /// `inradius / diameter` of one cell.
    pub fn cell_quality(&self, c: usize) -> f64 {
        let cell = self.cell(c);
        let surface: f64 = local_facets(self.dim)
            .iter()
            .map(|f| self.facet_measure(&f.iter().map(|&k| cell[k]).collect::<Vec<_>>()))
            .sum();
        let inradius = self.dim as f64 * self.signed_measure(c).abs() / surface;
        inradius / self.cell_diameter(c)
    }

    /// Minimum cell quality; bounded below for shape-regular families.
    pub fn shape_regularity(&self) -> f64 {
        (0..self.n_cells()).map(|c| self.cell_quality(c)).fold(f64::INFINITY, f64::min)
    }

    /// Facet -> adjacent cells.
    pub fn facet_cells(&self) -> BTreeMap<FacetKey, Vec<usize>> {
        let mut map: BTreeMap<FacetKey, Vec<usize>> = BTreeMap::new();
        for c in 0..self.n_cells() {
            let cell = self.cell(c);
            for f in local_facets(self.dim) {
                let verts: Vec<usize> = f.iter().map(|&k| cell[k]).collect();
                map.entry(facet_key(&verts)).or_default().push(c);
            }
        }
        map
    }

    pub fn boundary_facets(&self) -> Vec<FacetKey> {
        self.facet_cells().into_iter().filter(|(_, cs)| cs.len() == 1).map(|(k, _)| k).collect()
    }

    /// Unique edges as sorted vertex pairs, in lexicographic order.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut set = BTreeSet::new();
        for c in 0..self.n_cells() {
            let cell = self.cell(c);
            for e in local_edges(self.dim) {
                let (a, b) = (cell[e[0]], cell[e[1]]);
                set.insert([a.min(b), a.max(b)]);
            }
        }
        set.into_iter().collect()
    }

    /// Master of a vertex under periodic identification (itself if unmapped).
    pub fn master(&self, v: usize) -> usize {
        *self.periodic_map.get(&v).unwrap_or(&v)
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        for c in 0..self.n_cells() {
            let m = self.signed_measure(c);
            if !(m > 0.0) {
                return Err(Error::DegenerateCell { cell: c, measure: m });
            }
        }
        let facets = self.facet_cells();
        for (k, cs) in &facets {
            if cs.len() > 2 {
                return Err(Error::NonConforming(format!("facet {k:?} shared by {} cells", cs.len())));
            }
        }
        // a non-conforming mesh leaves hanging boundary facets strictly inside
        // the domain; their total measure then exceeds the boundary measure
        let boundary: BTreeSet<FacetKey> = facets.iter().filter(|(_, c)| c.len() == 1).map(|(k, _)| *k).collect();
        let tagged: BTreeSet<FacetKey> = self.facet_tags.keys().copied().collect();
        if boundary != tagged {
            return Err(Error::NonConforming(format!(
                "facet tags cover {} facets but the boundary has {}",
                tagged.len(),
                boundary.len()
            )));
        }
        for (&s, &m) in &self.periodic_map {
            if self.periodic_map.contains_key(&m) {
                return Err(Error::InvariantViolation(format!("periodic chain {s} -> {m}")));
            }
            let d = sub(&self.vertices[s], &self.vertices[m]);
            let shifts = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
            let ok = d[2].abs() <= GEOM_TOL && shifts.iter().any(|sh| (d[0] - sh[0]).abs() <= GEOM_TOL && (d[1] - sh[1]).abs() <= GEOM_TOL);
            if !ok {
                return Err(Error::InvariantViolation(format!("periodic pair {s} -> {m} offset {d:?}")));
            }
        }
        Ok(())
    }

    /// Euler characteristic `V - E + F` of the 2D complex after periodic
    /// identification (0 for the torus, 1 for the plain square).
    pub fn periodic_euler_characteristic(&self) -> i64 {
        assert_eq!(self.dim, 2);
        let verts: BTreeSet<usize> = (0..self.n_vertices()).map(|v| self.master(v)).collect();
        // on coarse tori two distinct edges can join the same pair of vertex
        // classes, so an edge class also records its displacement vector
        let edges: BTreeSet<(usize, usize, [i64; 2])> = self
            .edges()
            .iter()
            .map(|e| {
                let (a, b) = (self.master(e[0]), self.master(e[1]));
                let d = sub(&self.vertices[e[1]], &self.vertices[e[0]]);
                let d = [(d[0] * 1e9).round() as i64, (d[1] * 1e9).round() as i64];
                (a, b, d).min((b, a, [-d[0], -d[1]]))
            })
            .collect();
        verts.len() as i64 - edges.len() as i64 + self.n_cells() as i64
    }

    /// Locate the cell containing `p` and its barycentric coordinates.
    pub fn locate(&self, p: &[f64; 3]) -> Option<(usize, [f64; 4])> {
        if let Some(g) = self.grid {
            let n = g.n as f64;
            let i = ((p[0] * n).floor().max(0.0) as usize).min(g.n - 1);
            let j = ((p[1] * n).floor().max(0.0) as usize).min(g.n - 1);
            let xi = p[0] * n - i as f64;
            let eta = p[1] * n - j as f64;
            let tri = 2 * (j * g.n + i) + usize::from(xi < eta);
            if self.dim == 2 {
                return Some((tri, self.barycentric(tri, p)));
            }
            let dz = g.depth / g.layers as f64;
            let l = (((p[2] + g.depth) / dz).floor().max(0.0) as usize).min(g.layers - 1);
            let nt = 2 * g.n * g.n;
            let mut best = (UNUSED, [0.0; 4], f64::NEG_INFINITY);
            for s in 0..3 {
                let c = 3 * (l * nt + tri) + s;
                let b = self.barycentric(c, p);
                let worst = b.iter().copied().fold(f64::INFINITY, f64::min);
                if worst > best.2 {
                    best = (c, b, worst);
                }
            }
            return Some((best.0, best.1));
        }
        let mut best = None;
        let mut best_val = f64::NEG_INFINITY;
        for c in 0..self.n_cells() {
            let b = self.barycentric(c, p);
            let worst = b[..=self.dim].iter().copied().fold(f64::INFINITY, f64::min);
            if worst > best_val {
                best_val = worst;
                best = Some((c, b));
            }
            if worst >= -GEOM_TOL {
                return Some((c, b));
            }
        }
        if best_val > -1e-8 {
            best
        } else {
            None
        }
    }

    /// Barycentric coordinates of `p` with respect to cell `c`.
    pub fn barycentric(&self, c: usize, p: &[f64; 3]) -> [f64; 4] {
        let v = self.cell_coords(c);
        let mut out = [0.0; 4];
        match self.dim {
            2 => {
                let det = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]);
                let l1 = ((p[0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (p[1] - v[0][1])) / det;
                let l2 = ((v[1][0] - v[0][0]) * (p[1] - v[0][1]) - (p[0] - v[0][0]) * (v[1][1] - v[0][1])) / det;
                out[0] = 1.0 - l1 - l2;
                out[1] = l1;
                out[2] = l2;
            }
            3 => {
                let total = 6.0 * self.signed_measure(c);
                let q = sub(p, &v[0]);
                let a = sub(&v[1], &v[0]);
                let b = sub(&v[2], &v[0]);
                let cc = sub(&v[3], &v[0]);
                out[1] = dot3(&q, &cross(&b, &cc)) / total;
                out[2] = dot3(&a, &cross(&q, &cc)) / total;
                out[3] = dot3(&a, &cross(&b, &q)) / total;
                out[0] = 1.0 - out[1] - out[2] - out[3];
            }
            _ => unreachable!(),
        }
        out
    }

    /// The same structured mesh with twice the subdivisions (and layers).
    pub fn refined(&self) -> Result<Mesh> {
        let g = self.grid.ok_or_else(|| Error::InvalidParameter("refinement needs a structured mesh".into()))?;
        let surface = triangulate_unit_square(2 * g.n)?;
        let mut m = if self.dim == 2 { surface } else { build_prismatic_mesh(&surface, g.depth, 2 * g.layers)?.0 };
        let dirs: BTreeSet<Direction> = self.periodic_directions();
        if !dirs.is_empty() {
            m = identify_periodic(&m, &dirs)?;
        }
        Ok(m)
    }

    fn periodic_directions(&self) -> BTreeSet<Direction> {
        let mut dirs = BTreeSet::new();
        for (&s, &m) in &self.periodic_map {
            let d = sub(&self.vertices[s], &self.vertices[m]);
            if d[0] > 0.5 {
                dirs.insert(Direction::X);
            }
            if d[1] > 0.5 {
                dirs.insert(Direction::Y);
            }
        }
        dirs
    }

    /// Legacy ASCII VTK unstructured grid, with optional point vector data.
    pub fn to_vtk(&self, point_vectors: Option<(&str, &[[f64; 3]])>) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# vtk DataFile Version 3.0");
        let _ = writeln!(s, "saddlefem mesh");
        let _ = writeln!(s, "ASCII");
        let _ = writeln!(s, "DATASET UNSTRUCTURED_GRID");
        let _ = writeln!(s, "POINTS {} double", self.n_vertices());
        for v in &self.vertices {
            let _ = writeln!(s, "{:.17e} {:.17e} {:.17e}", v[0], v[1], v[2]);
        }
        let k = self.dim + 1;
        let _ = writeln!(s, "CELLS {} {}", self.n_cells(), self.n_cells() * (k + 1));
        for c in 0..self.n_cells() {
            let ids: Vec<String> = self.cell(c).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{} {}", k, ids.join(" "));
        }
        let _ = writeln!(s, "CELL_TYPES {}", self.n_cells());
        let ty = if self.dim == 2 { 5 } else { 10 };
        for _ in 0..self.n_cells() {
            let _ = writeln!(s, "{ty}");
        }
        if let Some((name, data)) = point_vectors {
            let _ = writeln!(s, "POINT_DATA {}", self.n_vertices());
            let _ = writeln!(s, "VECTORS {name} double");
            for v in data {
                let _ = writeln!(s, "{:.17e} {:.17e} {:.17e}", v[0], v[1], v[2]);
            }
        }
        s
    }

    /// Read a mesh written by [`Mesh::to_vtk`]. Boundary tags are rebuilt from
    /// the geometry of the unit square / box.
    pub fn from_vtk(text: &str) -> Result<Mesh> {
        let mut tokens = text.lines().skip(4).flat_map(|l| l.split_whitespace());
        let mut next = |what: &str| tokens.next().ok_or_else(|| Error::Parse(format!("unexpected end of file reading {what}")));
        let expect = |got: &str, want: &str| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Parse(format!("expected `{want}`, found `{got}`")))
            }
        };
        expect(next("POINTS")?, "POINTS")?;
        let nv: usize = next("count")?.parse().map_err(|_| Error::Parse("bad point count".into()))?;
        next("type")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let mut p = [0.0; 3];
            for x in p.iter_mut() {
                *x = next("coordinate")?.parse().map_err(|_| Error::Parse("bad coordinate".into()))?;
            }
            vertices.push(p);
        }
        expect(next("CELLS")?, "CELLS")?;
        let nc: usize = next("count")?.parse().map_err(|_| Error::Parse("bad cell count".into()))?;
        next("size")?;
        let mut cells = Vec::with_capacity(nc);
        for _ in 0..nc {
            let k: usize = next("cell size")?.parse().map_err(|_| Error::Parse("bad cell size".into()))?;
            if !(3..=4).contains(&k) {
                return Err(Error::Parse(format!("unsupported cell with {k} vertices")));
            }
            let mut c = [UNUSED; 4];
            for slot in c.iter_mut().take(k) {
                *slot = next("cell index")?.parse().map_err(|_| Error::Parse("bad cell index".into()))?;
            }
            cells.push(c);
        }
        expect(next("CELL_TYPES")?, "CELL_TYPES")?;
        next("count")?;
        let mut dim = 0;
        for _ in 0..nc {
            let ty = next("cell type")?;
            let d = match ty {
                "5" => 2,
                "10" => 3,
                _ => return Err(Error::Parse(format!("unsupported VTK cell type {ty}"))),
            };
            if dim != 0 && dim != d {
                return Err(Error::Parse("mixed cell dimensions".into()));
            }
            dim = d;
        }
        let mut mesh = Mesh { dim, vertices, cells, facet_tags: BTreeMap::new(), periodic_map: BTreeMap::new(), grid: None };
        mesh.tag_box_boundary();
        Ok(mesh)
    }

    /// Tag all boundary facets: `Dirichlet` in 2D; `Bottom`/`Top`/`Lateral` in 3D.
    fn tag_box_boundary(&mut self) {
        let mut z_min = f64::INFINITY;
        let mut z_max = f64::NEG_INFINITY;
        for v in &self.vertices {
            z_min = z_min.min(v[2]);
            z_max = z_max.max(v[2]);
        }
        let mut tags = BTreeMap::new();
        for key in self.boundary_facets() {
            let tag = if self.dim == 2 {
                BoundaryTag::Dirichlet
            } else {
                let zs: Vec<f64> = key.iter().map(|&v| self.vertices[v][2]).collect();
                if zs.iter().all(|z| (z - z_min).abs() <= GEOM_TOL) {
                    BoundaryTag::Bottom
                } else if zs.iter().all(|z| (z - z_max).abs() <= GEOM_TOL) {
                    BoundaryTag::Top
                } else {
                    BoundaryTag::Lateral
                }
            };
            tags.insert(key, tag);
        }
        self.facet_tags = tags;
    }

    /// Vertices lying on at least one boundary facet with the given tag.
    pub fn vertices_with_tag(&self, tag: BoundaryTag) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for (k, t) in &self.facet_tags {
            if *t == tag {
                out.extend(k.iter().copied().filter(|&v| v != UNUSED));
            }
        }
        out
    }
}

/// Uniform `n × n` grid on `(0,1)²`, each square split along its SW–NE diagonal.
pub fn triangulate_unit_square(n: usize) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::InvalidSubdivision(n));
    }
    let idx = |i: usize, j: usize| j * (n + 1) + i;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            vertices.push([i as f64 / n as f64, j as f64 / n as f64, 0.0]);
        }
    }
    let mut cells = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            cells.push([a, b, c, UNUSED]);
            cells.push([a, c, d, UNUSED]);
        }
    }
    let mut mesh = Mesh {
        dim: 2,
        vertices,
        cells,
        facet_tags: BTreeMap::new(),
        periodic_map: BTreeMap::new(),
        grid: Some(GridInfo { n, layers: 0, depth: 0.0 }),
    };
    mesh.tag_box_boundary();
    Ok(mesh)
}

/// Extrude a surface triangulation of `G` into `layers` prism layers over
/// `(-depth, 0)` and split every prism into three tetrahedra.
///
/// Vertex `v` of the surface at layer `l` becomes `l * n_surface + v`. Every
/// quadrilateral prism face is cut by the diagonal leaving its lowest global
/// index, so neighbouring prisms always agree on the shared face.
pub fn build_prismatic_mesh(surface: &Mesh, depth: f64, layers: usize) -> Result<(Mesh, PrismaticStructure)> {
    if surface.dim != 2 {
        return Err(Error::InvalidParameter("surface mesh must be two-dimensional".into()));
    }
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidParameter(format!("depth must be positive, got {depth}")));
    }
    if layers == 0 {
        return Err(Error::InvalidSubdivision(layers));
    }
    for c in 0..surface.n_cells() {
        let a = surface.signed_measure(c);
        if a.abs() <= GEOM_TOL * GEOM_TOL || !a.is_finite() {
            return Err(Error::DegenerateCell { cell: c, measure: a });
        }
    }
    for (k, cs) in surface.facet_cells() {
        if cs.len() > 2 {
            return Err(Error::NonConforming(format!("surface edge {k:?} shared by {} triangles", cs.len())));
        }
    }
    // hanging vertices: a vertex lying strictly inside another triangle's edge
    let edges = surface.edges();
    for e in &edges {
        let (p, q) = (surface.vertices[e[0]], surface.vertices[e[1]]);
        for (v, x) in surface.vertices.iter().enumerate() {
            if v == e[0] || v == e[1] {
                continue;
            }
            let d = sub(&q, &p);
            let r = sub(x, &p);
            let len2 = dot3(&d, &d);
            let t = dot3(&r, &d) / len2;
            let crossz = d[0] * r[1] - d[1] * r[0];
            if t > GEOM_TOL && t < 1.0 - GEOM_TOL && crossz.abs() <= GEOM_TOL * len2.sqrt() {
                return Err(Error::NonConforming(format!("vertex {v} hangs on edge {e:?}")));
            }
        }
    }

    let nv = surface.n_vertices();
    let nt = surface.n_cells();
    let mut vertices = Vec::with_capacity(nv * (layers + 1));
    for l in 0..=layers {
        let z = if l == layers { 0.0 } else { -depth + depth * l as f64 / layers as f64 };
        for v in &surface.vertices {
            vertices.push([v[0], v[1], z]);
        }
    }
    let mut cells = Vec::with_capacity(3 * nt * layers);
    let mut cell_to_prism = Vec::with_capacity(3 * nt * layers);
    let mut cell_layer = Vec::with_capacity(3 * nt * layers);
    for l in 0..layers {
        for t in 0..nt {
            let mut tri: Vec<usize> = surface.cell(t).to_vec();
            tri.sort_unstable();
            let lo = |v: usize| l * nv + v;
            let hi = |v: usize| (l + 1) * nv + v;
            let (a, b, c) = (tri[0], tri[1], tri[2]);
            let tets = [[lo(a), lo(b), lo(c), hi(c)], [lo(a), lo(b), hi(b), hi(c)], [lo(a), hi(a), hi(b), hi(c)]];
            for tet in tets {
                cells.push(tet);
                cell_to_prism.push(t);
                cell_layer.push(l);
            }
        }
    }
    let mut mesh = Mesh {
        dim: 3,
        vertices,
        cells,
        facet_tags: BTreeMap::new(),
        periodic_map: BTreeMap::new(),
        grid: surface.grid.map(|g| GridInfo { n: g.n, layers, depth }),
    };
    for c in 0..mesh.n_cells() {
        if mesh.signed_measure(c) < 0.0 {
            mesh.cells[c].swap(0, 1);
        }
    }
    mesh.tag_box_boundary();
    let mut surface_copy = surface.clone();
    surface_copy.periodic_map.clear();
    let structure = PrismaticStructure { surface_mesh: surface_copy, cell_to_prism, cell_layer, layers, depth };
    structure.check(&mesh)?;
    Ok((mesh, structure))
}

impl PrismaticStructure {
    /// Verify the prismatic condition: every tetrahedron vertex projects into
    /// the closed parent triangle.
    pub fn check(&self, mesh: &Mesh) -> Result<()> {
        if mesh.dim != 3 || self.cell_to_prism.len() != mesh.n_cells() {
            return Err(Error::NotPrismatic("cell map does not match the mesh".into()));
        }
        for c in 0..mesh.n_cells() {
            let t = self.cell_to_prism[c];
            if t >= self.surface_mesh.n_cells() {
                return Err(Error::NotPrismatic(format!("cell {c} maps to missing triangle {t}")));
            }
            for &v in mesh.cell(c) {
                let p = mesh.vertices[v];
                let b = self.surface_mesh.barycentric(t, &[p[0], p[1], 0.0]);
                if b[..3].iter().any(|&x| x < -GEOM_TOL) {
                    return Err(Error::NotPrismatic(format!("vertex {v} of cell {c} leaves prism over triangle {t}")));
                }
            }
        }
        let mut per_prism: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for c in 0..mesh.n_cells() {
            *per_prism.entry((self.cell_to_prism[c], self.cell_layer[c])).or_default() += 1;
        }
        if let Some(((t, l), k)) = per_prism.iter().find(|(_, &k)| k != 3) {
            return Err(Error::NotPrismatic(format!("prism ({t}, layer {l}) holds {k} tetrahedra")));
        }
        Ok(())
    }
}

/// The triangulation of `G` cut out by the top faces of the tetrahedra.
pub fn induced_surface_triangulation(mesh3d: &Mesh, structure: &PrismaticStructure) -> Result<Mesh> {
    structure.check(mesh3d)?;
    let mut top: Vec<FacetKey> = mesh3d
        .facet_tags
        .iter()
        .filter(|(_, &t)| t == BoundaryTag::Top)
        .map(|(k, _)| *k)
        .collect();
    top.sort_unstable();
    let mut used: BTreeSet<usize> = BTreeSet::new();
    for k in &top {
        used.extend(k.iter().copied());
    }
    let new_index: BTreeMap<usize, usize> = used.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let vertices: Vec<[f64; 3]> = used.iter().map(|&v| [mesh3d.vertices[v][0], mesh3d.vertices[v][1], 0.0]).collect();
    let mut cells = Vec::with_capacity(top.len());
    for k in &top {
        let mut c = [new_index[&k[0]], new_index[&k[1]], new_index[&k[2]], UNUSED];
        let p: Vec<[f64; 3]> = c[..3].iter().map(|&v| vertices[v]).collect();
        let area = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        if area < 0.0 {
            c.swap(1, 2);
        }
        cells.push(c);
    }
    let mut mesh = Mesh { dim: 2, vertices, cells, facet_tags: BTreeMap::new(), periodic_map: BTreeMap::new(), grid: None };
    mesh.tag_box_boundary();
    Ok(mesh)
}

/// Identify opposite faces `x = 0 ~ x = 1` and/or `y = 0 ~ y = 1`.
///
/// In 3D only vertices on lateral facets take part. Chains created by
/// identifying both directions are collapsed so every slave points at its
/// unique root master.
pub fn identify_periodic(mesh: &Mesh, directions: &BTreeSet<Direction>) -> Result<Mesh> {
    let candidates: BTreeSet<usize> = if mesh.dim == 3 {
        mesh.vertices_with_tag(BoundaryTag::Lateral)
    } else {
        mesh.facet_tags.keys().flat_map(|k| k.iter().copied()).filter(|&v| v != UNUSED).collect()
    };
    let mut raw: BTreeMap<usize, usize> = mesh.periodic_map.clone();
    for dir in directions {
        let axis = match dir {
            Direction::X => 0,
            Direction::Y => 1,
        };
        let masters: Vec<usize> = candidates.iter().copied().filter(|&v| mesh.vertices[v][axis].abs() <= GEOM_TOL).collect();
        for &v in &candidates {
            let p = mesh.vertices[v];
            if (p[axis] - 1.0).abs() > GEOM_TOL {
                continue;
            }
            let partner = masters.iter().copied().find(|&m| {
                let q = mesh.vertices[m];
                (0..3).filter(|&k| k != axis).all(|k| (p[k] - q[k]).abs() <= GEOM_TOL)
            });
            match partner {
                Some(m) => {
                    raw.insert(v, m);
                }
                None => return Err(Error::PeriodicMismatch { vertex: v, x: p[0], y: p[1], z: p[2] }),
            }
        }
    }
    let mut resolved = BTreeMap::new();
    for &s in raw.keys() {
        let mut m = s;
        let mut steps = 0;
        while let Some(&next) = raw.get(&m) {
            m = next;
            steps += 1;
            if steps > 4 {
                return Err(Error::InvariantViolation(format!("periodic cycle through vertex {s}")));
            }
        }
        if m != s {
            resolved.insert(s, m);
        }
    }
    let mut out = mesh.clone();
    out.periodic_map = resolved;
    Ok(out)
}

pub fn both_directions() -> BTreeSet<Direction> {
    [Direction::X, Direction::Y].into_iter().collect()
}

/// Periodic hydrostatic box: surface `n × n`, `layers` layers, depth `depth`,
/// identified laterally in both directions.
pub fn periodic_box(n: usize, layers: usize, depth: f64) -> Result<(Mesh, PrismaticStructure)> {
    let surface = triangulate_unit_square(n)?;
    let (mesh, mut structure) = build_prismatic_mesh(&surface, depth, layers)?;
    let mesh = identify_periodic(&mesh, &both_directions())?;
    structure.surface_mesh = identify_periodic(&structure.surface_mesh, &both_directions())?;
    Ok((mesh, structure))
}
