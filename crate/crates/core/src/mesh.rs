//! Simplicial meshes (triangles in 2D, tetrahedra in 3D), their boundary
//! facets and the node graph used by the block systems and the networks.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spade::{DelaunayTriangulation, HasPosition, Point2, Triangulation};

use crate::error::{Error, Result};

/// Tag assigned to boundary facets that match no predicate.
pub const FREE_TAG: &str = "free";

/// Axis-aligned boundary predicate: the facet lies on the plane `x[axis] == value`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTag {
    pub name: String,
    pub axis: usize,
    pub value: f64,
    pub tolerance: f64,
}

impl BoundaryTag {
    pub fn new(name: &str, axis: usize, value: f64) -> Self {
        Self { name: name.to_string(), axis, value, tolerance: 1e-9 }
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        (point[self.axis] - self.value).abs() <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFacet {
    pub nodes: Vec<usize>,
    pub tag: String,
}

/// Immutable simplicial mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshTopology {
    dim: usize,
    coords: Vec<f64>,
    elements: Vec<usize>,
    facets: Vec<BoundaryFacet>,
    node_tags: Vec<BTreeSet<String>>,
}

impl MeshTopology {
    /// Builds a mesh, normalizing every element to positive orientation and
    /// validating indices, facets and connectivity.
    pub fn new(dim: usize, coords: Vec<f64>, elements: Vec<usize>, facets: Vec<BoundaryFacet>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidArgument(format!("mesh dimension must be 2 or 3, got {dim}")));
        }
        if coords.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!("{} coordinates is not a multiple of {dim}", coords.len())));
        }
        let arity = dim + 1;
        if elements.len() % arity != 0 {
            return Err(Error::DimensionMismatch(format!("{} element indices is not a multiple of {arity}", elements.len())));
        }
        let n = coords.len() / dim;
        if let Some(&bad) = elements.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("element references node {bad} but mesh has {n} nodes")));
        }
        let mut mesh = Self { dim, coords, elements, facets, node_tags: vec![BTreeSet::new(); n] };
        for e in 0..mesh.num_elements() {
            let vol = mesh.signed_measure(e);
            if vol < 0.0 {
                mesh.elements.swap(e * arity + dim - 1, e * arity + dim);
            }
        }

        let face_count = mesh.face_counts();
        for (fi, facet) in mesh.facets.iter().enumerate() {
            if facet.nodes.len() != dim {
                return Err(Error::DimensionMismatch(format!("facet {fi} has {} nodes, expected {dim}", facet.nodes.len())));
            }
            if let Some(&bad) = facet.nodes.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidArgument(format!("facet {fi} references node {bad} but mesh has {n} nodes")));
            }
            let mut key = facet.nodes.clone();
            key.sort_unstable();
            if face_count.get(&key).copied() != Some(1) {
                return Err(Error::InvalidArgument(format!("facet {fi} is not a face of exactly one element")));
            }
        }
        for facet in &mesh.facets {
            for &v in &facet.nodes {
                mesh.node_tags[v].insert(facet.tag.clone());
            }
        }
        if n > 0 && !mesh.is_connected() {
            return Err(Error::InvalidArgument("node adjacency graph is not connected".into()));
        }
        Ok(mesh)
    }

    /// Builds a mesh and derives its boundary facets, tagging each with the first matching predicate.
    pub fn with_tagged_boundary(dim: usize, coords: Vec<f64>, elements: Vec<usize>, tags: &[BoundaryTag]) -> Result<Self> {
        let untagged = Self::new(dim, coords, elements, Vec::new())?;
        let facets = untagged
            .boundary_faces()
            .into_iter()
            .map(|nodes| {
                let tag = tags
                    .iter()
                    .find(|t| nodes.iter().all(|&v| t.contains(untagged.node(v))))
                    .map_or_else(|| FREE_TAG.to_string(), |t| t.name.clone());
                BoundaryFacet { nodes, tag }
            })
            .collect();
        Self::new(untagged.dim, untagged.coords, untagged.elements, facets)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len() / (self.dim + 1)
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn element(&self, e: usize) -> &[usize] {
        let a = self.dim + 1;
        &self.elements[e * a..(e + 1) * a]
    }

    pub fn facets(&self) -> &[BoundaryFacet] {
        &self.facets
    }

    pub fn node_tags(&self, i: usize) -> &BTreeSet<String> {
        &self.node_tags[i]
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.facets.iter().any(|f| f.tag == tag)
    }

    /// Sorted, de-duplicated nodes lying on facets with the given tag.
    pub fn nodes_with_tag(&self, tag: &str) -> Vec<usize> {
        let set: BTreeSet<usize> = self.facets.iter().filter(|f| f.tag == tag).flat_map(|f| f.nodes.iter().copied()).collect();
        set.into_iter().collect()
    }

    /// Signed area (2D) or volume (3D) of an element.
    pub fn signed_measure(&self, e: usize) -> f64 {
        let el = self.element(e);
        let p0 = self.node(el[0]);
        if self.dim == 2 {
            let (p1, p2) = (self.node(el[1]), self.node(el[2]));
            0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]))
        } else {
            let a: Vec<[f64; 3]> = (1..4)
                .map(|k| {
                    let p = self.node(el[k]);
                    [p[0] - p0[0], p[1] - p0[1], p[2] - p0[2]]
                })
                .collect();
            det3(&a) / 6.0
        }
    }

    /// Length (2D) or area (3D) of a boundary facet.
    pub fn facet_measure(&self, facet: &BoundaryFacet) -> f64 {
        let p0 = self.node(facet.nodes[0]);
        let p1 = self.node(facet.nodes[1]);
        if self.dim == 2 {
            ((p1[0] - p0[0]).powi(2) + (p1[1] - p0[1]).powi(2)).sqrt()
        } else {
            let p2 = self.node(facet.nodes[2]);
            let u = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
            let v = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
            0.5 * norm3(&cross(&u, &v))
        }
    }

    /// Unit outward normal of a boundary facet.
    pub fn facet_normal(&self, facet: &BoundaryFacet) -> Vec<f64> {
        let d = self.dim;
        let p0 = self.node(facet.nodes[0]);
        let mut n = if d == 2 {
            let p1 = self.node(facet.nodes[1]);
            vec![p1[1] - p0[1], -(p1[0] - p0[0])]
        } else {
            let p1 = self.node(facet.nodes[1]);
            let p2 = self.node(facet.nodes[2]);
            let u = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
            let v = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
            cross(&u, &v).to_vec()
        };
        let len = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        n.iter_mut().for_each(|x| *x /= len);
        // orient away from the centroid of the owning element
        let mut key = facet.nodes.clone();
        key.sort_unstable();
        if let Some(e) = (0..self.num_elements()).find(|&e| key.iter().all(|v| self.element(e).contains(v))) {
            let opposite = self.element(e).iter().copied().find(|v| !key.contains(v)).expect("simplex has an opposite vertex");
            let q = self.node(opposite);
            let dot: f64 = (0..d).map(|k| (q[k] - p0[k]) * n[k]).sum();
            if dot > 0.0 {
                n.iter_mut().for_each(|x| *x = -*x);
            }
        }
        n
    }

    /// Node neighbours (sharing an element), sorted, excluding the node itself.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![BTreeSet::new(); self.num_nodes()];
        for e in 0..self.num_elements() {
            let el = self.element(e);
            for &a in el {
                for &b in el {
                    if a != b {
                        sets[a].insert(b);
                    }
                }
            }
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency().iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_connected(&self) -> bool {
        let adj = self.adjacency();
        let n = adj.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == n
    }

    /// Per-axis (min, max) of node coordinates.
    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        (0..self.dim)
            .map(|a| {
                (0..self.num_nodes()).map(|i| self.node(i)[a]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
            })
            .collect()
    }

    fn faces_of(&self, e: usize) -> Vec<Vec<usize>> {
        let el = self.element(e);
        (0..el.len()).map(|skip| el.iter().enumerate().filter(|&(k, _)| k != skip).map(|(_, &v)| v).collect()).collect()
    }

    fn face_counts(&self) -> HashMap<Vec<usize>, usize> {
        let mut counts = HashMap::new();
        for e in 0..self.num_elements() {
            for mut f in self.faces_of(e) {
                f.sort_unstable();
                *counts.entry(f).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Faces owned by exactly one element, in element order.
    pub fn boundary_faces(&self) -> Vec<Vec<usize>> {
        let counts = self.face_counts();
        let mut out = Vec::new();
        for e in 0..self.num_elements() {
            for f in self.faces_of(e) {
                let mut key = f.clone();
                key.sort_unstable();
                if counts[&key] == 1 {
                    out.push(f);
                }
            }
        }
        out
    }

    /// Writes the ASCII mesh format.
    pub fn to_ascii(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {} {} {}", self.dim, self.num_nodes(), self.num_elements(), self.facets.len());
        for i in 0..self.num_nodes() {
            let row: Vec<String> = self.node(i).iter().map(|x| format!("{x}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        for e in 0..self.num_elements() {
            let row: Vec<String> = self.element(e).iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        for f in &self.facets {
            let row: Vec<String> = f.nodes.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{} {}", row.join(" "), f.tag);
        }
        s
    }

    /// Parses the ASCII mesh format; errors carry 1-based line numbers.
    pub fn from_ascii(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
        let (hline, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
        let h: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { line: hline, msg: format!("malformed header: {e}") })?;
        if h.len() != 4 {
            return Err(Error::Parse { line: hline, msg: format!("header needs `dim N M B`, got {} fields", h.len()) });
        }
        let (dim, n, m, b) = (h[0], h[1], h[2], h[3]);
        if dim != 2 && dim != 3 {
            return Err(Error::Parse { line: hline, msg: format!("dimension {dim} not supported") });
        }
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Parse { line: 0, msg: format!("unexpected end of file while reading {what}") });

        let mut coords = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let (ln, l) = next("nodes")?;
            let vals: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { line: ln, msg: format!("bad coordinate: {e}") })?;
            if vals.len() != dim {
                return Err(Error::Parse { line: ln, msg: format!("dim mismatch: node has {} coordinates, expected {dim}", vals.len()) });
            }
            coords.extend(vals);
        }
        let mut elements = Vec::with_capacity(m * (dim + 1));
        for _ in 0..m {
            let (ln, l) = next("elements")?;
            let idx = parse_indices(l, ln)?;
            if idx.len() != dim + 1 {
                return Err(Error::Parse { line: ln, msg: format!("dim mismatch: element has {} nodes, a {dim}D mesh needs {}", idx.len(), dim + 1) });
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::Parse { line: ln, msg: format!("element index {bad} out of range (N = {n})") });
            }
            elements.extend(idx);
        }
        let mut facets = Vec::with_capacity(b);
        for _ in 0..b {
            let (ln, l) = next("facets")?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != dim + 1 {
                return Err(Error::Parse { line: ln, msg: format!("dim mismatch: facet line needs {dim} indices and a tag") });
            }
            let idx = parse_indices(&toks[..dim].join(" "), ln)?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::Parse { line: ln, msg: format!("facet index {bad} out of range (N = {n})") });
            }
            facets.push(BoundaryFacet { nodes: idx, tag: toks[dim].to_string() });
        }
        Self::new(dim, coords, elements, facets)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_ascii())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_ascii(&std::fs::read_to_string(path)?)
    }
}

fn parse_indices(line: &str, ln: usize) -> Result<Vec<usize>> {
    line.split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse { line: ln, msg: format!("bad index: {e}") })
}

fn det3(a: &[[f64; 3]]) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn cross(u: &[f64; 3], v: &[f64; 3]) -> [f64; 3] {
    [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]]
}

fn norm3(u: &[f64; 3]) -> f64 {
    (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
}

fn square_tags() -> Vec<BoundaryTag> {
    vec![
        BoundaryTag::new("left", 0, 0.0),
        BoundaryTag::new("right", 0, 1.0),
        BoundaryTag::new("bottom", 1, 0.0),
        BoundaryTag::new("top", 1, 1.0),
    ]
}

/// Unit square split into `n × n` cells, each cut along the lower-left to
/// upper-right diagonal. Sides are tagged `left`, `right`, `bottom`, `top`.
pub fn build_structured_square(n: usize) -> Result<MeshTopology> {
    if n == 0 {
        return Err(Error::InvalidArgument("square mesh needs at least one subdivision".into()));
    }
    let np = n + 1;
    let mut coords = Vec::with_capacity(2 * np * np);
    for j in 0..np {
        for i in 0..np {
            coords.push(i as f64 / n as f64);
            coords.push(j as f64 / n as f64);
        }
    }
    let mut elements = Vec::with_capacity(6 * n * n);
    for j in 0..n {
        for i in 0..n {
            let v00 = j * np + i;
            let (v10, v01, v11) = (v00 + 1, v00 + np, v00 + np + 1);
            elements.extend([v00, v10, v11, v00, v11, v01]);
        }
    }
    MeshTopology::with_tagged_boundary(2, coords, elements, &square_tags())
}

/// Box `[0,ex]×[0,ey]×[0,ez]` with each hexahedral cell split into six
/// tetrahedra around its main diagonal. Faces are tagged `left`/`right` (x),
/// `front`/`back` (y) and `bottom`/`top` (z).
pub fn build_structured_box(nx: usize, ny: usize, nz: usize, extent: [f64; 3]) -> Result<MeshTopology> {
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::InvalidArgument("box mesh needs at least one subdivision per axis".into()));
    }
    if extent.iter().any(|&e| e <= 0.0 || !e.is_finite()) {
        return Err(Error::InvalidArgument(format!("box extents must be positive, got {extent:?}")));
    }
    let (px, py) = (nx + 1, ny + 1);
    let id = |i: usize, j: usize, k: usize| (k * py + j) * px + i;
    let mut coords = Vec::new();
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                coords.extend([extent[0] * i as f64 / nx as f64, extent[1] * j as f64 / ny as f64, extent[2] * k as f64 / nz as f64]);
            }
        }
    }
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut elements = Vec::with_capacity(24 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                for perm in PERMS {
                    let mut c = [i, j, k];
                    let mut tet = vec![id(c[0], c[1], c[2])];
                    for &axis in &perm {
                        c[axis] += 1;
                        tet.push(id(c[0], c[1], c[2]));
                    }
                    elements.extend(tet);
                }
            }
        }
    }
    let tags = vec![
        BoundaryTag::new("left", 0, 0.0),
        BoundaryTag::new("right", 0, extent[0]),
        BoundaryTag::new("front", 1, 0.0),
        BoundaryTag::new("back", 1, extent[1]),
        BoundaryTag::new("bottom", 2, 0.0),
        BoundaryTag::new("top", 2, extent[2]),
    ];
    MeshTopology::with_tagged_boundary(3, coords, elements, &tags)
}

struct IndexedPoint {
    pos: Point2<f64>,
    idx: usize,
}

impl HasPosition for IndexedPoint {
    type Scalar = f64;
    fn position(&self) -> Point2<f64> {
        self.pos
    }
}

/// Jittered-grid Delaunay mesh of the unit square. Interior nodes of an
/// `(n+1)²` grid are perturbed by up to `0.3·h` per axis; boundary nodes stay put.
pub fn build_unstructured_2d(n: usize, seed: u64) -> Result<MeshTopology> {
    if n < 2 {
        return Err(Error::InvalidArgument("unstructured mesh needs n >= 2".into()));
    }
    let h = 1.0 / n as f64;
    let np = n + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter: Vec<[f64; 2]> = (0..np * np).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();

    let mut amplitude = 0.3 * h;
    for _attempt in 0..=5 {
        let mut coords = Vec::with_capacity(2 * np * np);
        for j in 0..np {
            for i in 0..np {
                let mut p = [i as f64 * h, j as f64 * h];
                if i > 0 && i < n && j > 0 && j < n {
                    let r = jitter[j * np + i];
                    p[0] += amplitude * r[0];
                    p[1] += amplitude * r[1];
                }
                coords.extend(p);
            }
        }
        let mut tri: DelaunayTriangulation<IndexedPoint> = DelaunayTriangulation::new();
        for idx in 0..np * np {
            tri.insert(IndexedPoint { pos: Point2::new(coords[2 * idx], coords[2 * idx + 1]), idx })
                .map_err(|e| Error::MeshGeneration(format!("insertion failed: {e:?}")))?;
        }
        let mut elements = Vec::new();
        let mut faces: Vec<[usize; 3]> = tri.inner_faces().map(|f| f.vertices().map(|v| v.data().idx)).collect();
        faces.sort_unstable();
        for f in faces {
            elements.extend(f);
        }
        let mesh = MeshTopology::with_tagged_boundary(2, coords, elements, &square_tags())?;
        let min_area = (0..mesh.num_elements()).map(|e| mesh.signed_measure(e)).fold(f64::INFINITY, f64::min);
        if min_area >= 1e-12 * h * h {
            return Ok(mesh);
        }
        amplitude *= 0.5;
    }
    Err(Error::MeshGeneration("degenerate triangulation after 5 perturbation halvings".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_square() {
        let m = build_structured_square(1).unwrap();
        assert_eq!(m.num_nodes(), 4);
        assert_eq!(m.num_elements(), 2);
        assert_eq!(m.facets().len(), 4);
        assert!(build_structured_square(0).is_err());
    }

    #[test]
    fn paper_scale_square_node_count() {
        assert_eq!(build_structured_square(32).unwrap().num_nodes(), 1089);
    }

    #[test]
    fn diagonal_split_gives_degree_six() {
        let m = build_structured_square(2).unwrap();
        assert_eq!(m.num_nodes(), 9);
        assert_eq!(m.num_elements(), 8);
        assert_eq!(m.adjacency()[4].len(), 6);
    }

    #[test]
    fn euler_characteristic_square() {
        for n in [1, 3, 7] {
            let m = build_structured_square(n).unwrap();
            let (v, e, f) = (m.num_nodes() as i64, m.num_edges() as i64, m.num_elements() as i64);
            assert_eq!(v - e + f, 1);
        }
    }

    #[test]
    fn box_counts_and_volume() {
        let m = build_structured_box(1, 1, 1, [1.0; 3]).unwrap();
        assert_eq!((m.num_nodes(), m.num_elements()), (8, 6));
        let m = build_structured_box(3, 1, 1, [3.0, 1.0, 1.0]).unwrap();
        assert_eq!((m.num_nodes(), m.num_elements()), (16, 18));
        let m = build_structured_box(4, 2, 3, [3.0, 1.0, 0.5]).unwrap();
        let vol: f64 = (0..m.num_elements()).map(|e| m.signed_measure(e)).sum();
        assert!((vol - 1.5).abs() < 1e-12);
        assert!((0..m.num_elements()).all(|e| m.signed_measure(e) > 0.0));
        assert!(m.has_tag("left") && m.has_tag("right"));
        assert!(m.nodes_with_tag("right").iter().all(|&v| (m.node(v)[0] - 3.0).abs() < 1e-12));
        assert!(build_structured_box(0, 1, 1, [1.0; 3]).is_err());
    }

    #[test]
    fn adjacency_symmetric() {
        let m = build_structured_box(2, 2, 1, [1.0; 3]).unwrap();
        let adj = m.adjacency();
        for (i, nb) in adj.iter().enumerate() {
            for &j in nb {
                assert!(adj[j].contains(&i));
            }
        }
    }

    #[test]
    fn unstructured_is_deterministic_and_valid() {
        let a = build_unstructured_2d(8, 7).unwrap();
        let b = build_unstructured_2d(8, 7).unwrap();
        assert_eq!(a, b);
        assert!((0..a.num_elements()).all(|e| a.signed_measure(e) > 0.0));
        let area: f64 = (0..a.num_elements()).map(|e| a.signed_measure(e)).sum();
        assert!((area - 1.0).abs() < 1e-12);
        assert_ne!(a, build_unstructured_2d(8, 8).unwrap());
    }

    #[test]
    fn unstructured_boundary_pinned() {
        let m = build_unstructured_2d(4, 1).unwrap();
        for f in m.facets() {
            assert_ne!(f.tag, FREE_TAG);
            for &v in &f.nodes {
                let p = m.node(v);
                assert!(p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0);
            }
        }
    }

    #[test]
    fn outward_normals() {
        let m = build_structured_square(2).unwrap();
        for f in m.facets() {
            let n = m.facet_normal(f);
            let expect = match f.tag.as_str() {
                "left" => [-1.0, 0.0],
                "right" => [1.0, 0.0],
                "bottom" => [0.0, -1.0],
                _ => [0.0, 1.0],
            };
            assert!((n[0] - expect[0]).abs() < 1e-12 && (n[1] - expect[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn ascii_round_trip() {
        let m = build_unstructured_2d(5, 3).unwrap();
        let back = MeshTopology::from_ascii(&m.to_ascii()).unwrap();
        assert_eq!(m, back);
        let b = build_structured_box(2, 1, 1, [3.0, 1.0, 1.0]).unwrap();
        assert_eq!(b, MeshTopology::from_ascii(&b.to_ascii()).unwrap());
    }

    #[test]
    fn ascii_rejects_bad_index_with_line() {
        let text = "2 3 1 0\n0 0\n1 0\n0 1\n0 1 3\n";
        match MeshTopology::from_ascii(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ascii_rejects_dim_mismatch() {
        let text = "2 4 1 0\n0 0\n1 0\n0 1\n1 1\n0 1 2 3\n";
        match MeshTopology::from_ascii(text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 6);
                assert!(msg.contains("dim mismatch"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(MeshTopology::from_ascii("x 1 1 1\n"), Err(Error::Parse { line: 1, .. })));
    }
}
