use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};

/// Named base domains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Domain {
    /// `(0, 1)`
    UnitInterval,
    /// `(0, 1)^2`
    UnitSquare,
    /// `(-1, 1)^2`
    Square,
    /// `(-1, 1)^2 \ (0, 1) x (-1, 0)`
    LShape,
    /// `(0, width) x (0, height)`; used by the isotropic cylinder baseline.
    Rectangle { width: f64, height: f64 },
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::UnitInterval => 1,
            _ => 2,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Domain::UnitInterval => "unit_interval",
            Domain::UnitSquare => "unit_square",
            Domain::Square => "square",
            Domain::LShape => "l_shape",
            Domain::Rectangle { .. } => "rectangle",
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit_interval" => Ok(Domain::UnitInterval),
            "unit_square" => Ok(Domain::UnitSquare),
            "square" | "square(-1,1)^2" => Ok(Domain::Square),
            "l_shape" | "lshape" => Ok(Domain::LShape),
            other => Err(invalid(format!("unknown domain tag `{other}`"))),
        }
    }
}

/// Conforming simplicial mesh of an interval or a polygon.
///
/// Triangles are stored counter-clockwise with their refinement edge opposite
/// local vertex 0, so `refine_edge` is always 0 after construction; it is kept
/// explicitly for the text dump. Vertex ids are stable under refinement: new
/// vertices are appended and remember the edge they bisect.
#[derive(Debug, Clone)]
pub struct BaseMesh {
    dim: usize,
    coords: Vec<[f64; 2]>,
    cells: Vec<[usize; 3]>,
    refine_edge: Vec<u8>,
    boundary: Vec<bool>,
    parents: Vec<Option<(usize, usize)>>,
    diam: Vec<f64>,
    volume: Vec<f64>,
    // vertex -> incident elements, CSR layout
    v2e_offsets: Vec<usize>,
    v2e: Vec<usize>,
}

impl BaseMesh {
    /// Builds a mesh from raw vertices and elements. Triangles are reoriented
    /// counter-clockwise; when `refine_edges` is `None` the longest edge of each
    /// triangle becomes its refinement edge.
    pub fn from_raw(
        dim: usize,
        coords: Vec<[f64; 2]>,
        elements: Vec<Vec<usize>>,
        refine_edges: Option<Vec<u8>>,
    ) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(invalid(format!("dimension {dim} not supported")));
        }
        let nv = coords.len();
        let mut cells = Vec::with_capacity(elements.len());
        for (k, el) in elements.iter().enumerate() {
            if el.len() != dim + 1 {
                return Err(invalid(format!("element {k} has {} vertices", el.len())));
            }
            if el.iter().any(|&v| v >= nv) {
                return Err(invalid(format!("element {k} references a missing vertex")));
            }
            let mut c = [usize::MAX; 3];
            c[..=dim].copy_from_slice(el);
            if dim == 2 {
                if signed_area(&coords, &c) < 0.0 {
                    c.swap(1, 2);
                }
                let r = match &refine_edges {
                    Some(r) => *r.get(k).ok_or_else(|| invalid("missing refinement edge"))?,
                    None => longest_edge(&coords, &c),
                };
                if r > 2 {
                    return Err(invalid(format!("refinement edge {r} out of range")));
                }
                // rotate so that the refinement edge is opposite local vertex 0
                c.rotate_left(r as usize);
            } else if coords[c[1]][0] < coords[c[0]][0] {
                c.swap(0, 1);
            }
            cells.push(c);
        }
        let parents = vec![None; nv];
        Self::assemble(dim, coords, cells, parents)
    }

    pub(crate) fn assemble(
        dim: usize,
        coords: Vec<[f64; 2]>,
        cells: Vec<[usize; 3]>,
        parents: Vec<Option<(usize, usize)>>,
    ) -> Result<Self> {
        let nv = coords.len();
        let mut diam = Vec::with_capacity(cells.len());
        let mut volume = Vec::with_capacity(cells.len());
        for (k, c) in cells.iter().enumerate() {
            let (d, vol) = if dim == 1 {
                let l = (coords[c[1]][0] - coords[c[0]][0]).abs();
                (l, l)
            } else {
                let a = signed_area(&coords, c);
                let d = (0..3)
                    .map(|i| dist(&coords[c[i]], &coords[c[(i + 1) % 3]]))
                    .fold(0.0, f64::max);
                (d, a)
            };
            if !(vol > 0.0) {
                return Err(Error::Geometry(format!("element {k} has non-positive measure")));
            }
            diam.push(d);
            volume.push(vol);
        }

        // boundary detection via facet multiplicity
        let mut boundary = vec![false; nv];
        if dim == 1 {
            let mut count = vec![0usize; nv];
            for c in &cells {
                count[c[0]] += 1;
                count[c[1]] += 1;
            }
            for v in 0..nv {
                boundary[v] = count[v] == 1;
            }
        } else {
            let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
            for c in &cells {
                for i in 0..3 {
                    *edges.entry(edge_key(c[i], c[(i + 1) % 3])).or_insert(0) += 1;
                }
            }
            for (&(a, b), &n) in &edges {
                if n > 2 {
                    return Err(Error::Geometry(format!("edge ({a},{b}) shared by {n} elements")));
                }
                if n == 1 {
                    boundary[a] = true;
                    boundary[b] = true;
                }
            }
        }

        let mut counts = vec![0usize; nv + 1];
        for c in &cells {
            for &v in &c[..=dim] {
                counts[v + 1] += 1;
            }
        }
        for i in 0..nv {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut v2e = vec![0usize; counts[nv]];
        for (k, c) in cells.iter().enumerate() {
            for &v in &c[..=dim] {
                v2e[fill[v]] = k;
                fill[v] += 1;
            }
        }
        let refine_edge = vec![0u8; cells.len()];
        Ok(Self {
            dim,
            coords,
            cells,
            refine_edge,
            boundary,
            parents,
            diam,
            volume,
            v2e_offsets: counts,
            v2e,
        })
    }

    /// Uniform mesh of a named domain. `initial_h` is the grid spacing: the
    /// interval is cut into `ceil(L / h)` pieces, polygons into squares of side
    /// at most `h`, each split along a diagonal.
    pub fn build(domain: Domain, initial_h: f64) -> Result<Self> {
        if !(initial_h > 0.0) || !initial_h.is_finite() {
            return Err(invalid("initial_h must be positive and finite"));
        }
        match domain {
            Domain::UnitInterval => {
                let n = (1.0 / initial_h - 1e-12).ceil().max(1.0) as usize;
                let coords = (0..=n).map(|i| [i as f64 / n as f64, 0.0]).collect();
                let elements = (0..n).map(|i| vec![i, i + 1]).collect();
                Self::from_raw(1, coords, elements, None)
            }
            Domain::UnitSquare => grid(0.0, 0.0, 1.0, 1.0, initial_h, |_, _| true, |_, _| false),
            Domain::Square => grid(-1.0, -1.0, 2.0, 2.0, initial_h, |_, _| true, |_, _| false),
            Domain::Rectangle { width, height } => {
                if !(width > 0.0 && height > 0.0) {
                    return Err(invalid("rectangle sides must be positive"));
                }
                grid(0.0, 0.0, width, height, initial_h, |_, _| true, |_, _| false)
            }
            Domain::LShape => grid(
                -1.0,
                -1.0,
                2.0,
                2.0,
                initial_h,
                // drop the fourth quadrant (0,1) x (-1,0)
                |cx, cy| !(cx > 0.0 && cy < 0.0),
                // diagonals through the reentrant corner in quadrants 1 and 3
                |cx, cy| (cx > 0.0) != (cy > 0.0),
            ),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_vertices(&self) -> usize {
        self.coords.len()
    }

    pub fn num_elements(&self) -> usize {
        self.cells.len()
    }

    pub fn coord(&self, v: usize) -> [f64; 2] {
        self.coords[v]
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// Vertex ids of element `k` (2 for intervals, 3 for triangles).
    pub fn element(&self, k: usize) -> &[usize] {
        &self.cells[k][..=self.dim]
    }

    pub fn refine_edge(&self, k: usize) -> u8 {
        self.refine_edge[k]
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary[v]
    }

    pub fn parent_edge(&self, v: usize) -> Option<(usize, usize)> {
        self.parents[v]
    }

    /// Element diameter `h_K`.
    pub fn diameter(&self, k: usize) -> f64 {
        self.diam[k]
    }

    /// Element measure `|K|`.
    pub fn measure(&self, k: usize) -> f64 {
        self.volume[k]
    }

    pub fn vertex_elements(&self, v: usize) -> &[usize] {
        &self.v2e[self.v2e_offsets[v]..self.v2e_offsets[v + 1]]
    }

    pub fn interior_vertices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_vertices()).filter(|&v| !self.boundary[v])
    }

    pub fn max_diameter(&self) -> f64 {
        self.diam.iter().copied().fold(0.0, f64::max)
    }

    /// Vertex coordinates of element `k` in local order.
    pub fn element_coords(&self, k: usize) -> Vec<[f64; 2]> {
        self.element(k).iter().map(|&v| self.coords[v]).collect()
    }

    /// Maps barycentric coordinates on element `k` to a physical point.
    pub fn point(&self, k: usize, bary: &[f64; 3]) -> [f64; 2] {
        let mut p = [0.0; 2];
        for (i, &v) in self.element(k).iter().enumerate() {
            p[0] += bary[i] * self.coords[v][0];
            p[1] += bary[i] * self.coords[v][1];
        }
        p
    }

    /// Gradients of the barycentric coordinates on element `k`.
    pub fn bary_gradients(&self, k: usize) -> [[f64; 2]; 3] {
        let c = self.element(k);
        if self.dim == 1 {
            let h = self.coords[c[1]][0] - self.coords[c[0]][0];
            [[-1.0 / h, 0.0], [1.0 / h, 0.0], [0.0; 2]]
        } else {
            let p = |i: usize| self.coords[c[i]];
            let twice = 2.0 * self.volume[k];
            let mut g = [[0.0; 2]; 3];
            for i in 0..3 {
                let a = p((i + 1) % 3);
                let b = p((i + 2) % 3);
                // rotate (b - a) clockwise for a ccw triangle
                g[i] = [(a[1] - b[1]) / twice, (b[0] - a[0]) / twice];
            }
            g
        }
    }

    /// Minimum interior angle of triangle `k` in radians.
    pub fn min_angle(&self, k: usize) -> f64 {
        self.angles(k).into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn angles(&self, k: usize) -> [f64; 3] {
        let c = self.element(k);
        let mut out = [0.0; 3];
        for i in 0..3 {
            let p = self.coords[c[i]];
            let a = self.coords[c[(i + 1) % 3]];
            let b = self.coords[c[(i + 2) % 3]];
            let u = [a[0] - p[0], a[1] - p[1]];
            let w = [b[0] - p[0], b[1] - p[1]];
            let cos = (u[0] * w[0] + u[1] * w[1]) / (dist(&a, &p) * dist(&b, &p));
            out[i] = cos.clamp(-1.0, 1.0).acos();
        }
        out
    }

    /// Plain-text dump: `DIM n NV nv NE ne`, then `v x [y] flag` and
    /// `e v0 v1 [v2] refedge` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "DIM {} NV {} NE {}",
            self.dim,
            self.num_vertices(),
            self.num_elements()
        );
        for (v, c) in self.coords.iter().enumerate() {
            let flag = self.boundary[v] as u8;
            if self.dim == 1 {
                let _ = writeln!(s, "v {} {}", c[0], flag);
            } else {
                let _ = writeln!(s, "v {} {} {}", c[0], c[1], flag);
            }
        }
        for k in 0..self.num_elements() {
            let ids: Vec<String> = self.element(k).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "e {} {}", ids.join(" "), self.refine_edge[k]);
        }
        s
    }

    /// Parses the format written by [`BaseMesh::to_text`]. Boundary flags are
    /// recomputed from the topology and checked against the file.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Parse("empty mesh file".into()))?
            .split_whitespace()
            .collect();
        if header.len() != 6 || header[0] != "DIM" || header[2] != "NV" || header[4] != "NE" {
            return Err(Error::Parse("bad header line".into()));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse(format!("bad integer `{s}`")))
        };
        let real = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse(format!("bad real `{s}`")))
        };
        let dim = num(header[1])?;
        let nv = num(header[3])?;
        let ne = num(header[5])?;
        let mut coords = Vec::with_capacity(nv);
        let mut flags = Vec::with_capacity(nv);
        for _ in 0..nv {
            let t: Vec<&str> = lines
                .next()
                .ok_or_else(|| Error::Parse("missing vertex line".into()))?
                .split_whitespace()
                .collect();
            if t.len() != dim + 2 || t[0] != "v" {
                return Err(Error::Parse("bad vertex line".into()));
            }
            let y = if dim == 2 { real(t[2])? } else { 0.0 };
            coords.push([real(t[1])?, y]);
            flags.push(num(t[dim + 1])? != 0);
        }
        let mut elements = Vec::with_capacity(ne);
        let mut refs = Vec::with_capacity(ne);
        for _ in 0..ne {
            let t: Vec<&str> = lines
                .next()
                .ok_or_else(|| Error::Parse("missing element line".into()))?
                .split_whitespace()
                .collect();
            if t.len() != dim + 3 || t[0] != "e" {
                return Err(Error::Parse("bad element line".into()));
            }
            elements.push(t[1..=dim + 1].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?);
            refs.push(num(t[dim + 2])? as u8);
        }
        let mesh = Self::from_raw(dim, coords, elements, Some(refs))?;
        if mesh.boundary != flags {
            return Err(Error::Parse("boundary flags disagree with topology".into()));
        }
        Ok(mesh)
    }

    pub(crate) fn cells(&self) -> &[[usize; 3]] {
        &self.cells
    }

    pub(crate) fn parents(&self) -> &[Option<(usize, usize)>] {
        &self.parents
    }
}

pub(crate) fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn signed_area(coords: &[[f64; 2]], c: &[usize; 3]) -> f64 {
    let (a, b, d) = (coords[c[0]], coords[c[1]], coords[c[2]]);
    0.5 * ((b[0] - a[0]) * (d[1] - a[1]) - (d[0] - a[0]) * (b[1] - a[1]))
}

/// Local index of the vertex opposite the longest edge (first one on ties).
fn longest_edge(coords: &[[f64; 2]], c: &[usize; 3]) -> u8 {
    let mut best = 0;
    let mut len = -1.0;
    for i in 0..3 {
        let l = dist(&coords[c[(i + 1) % 3]], &coords[c[(i + 2) % 3]]);
        if l > len * (1.0 + 1e-12) {
            len = l;
            best = i;
        }
    }
    best as u8
}

/// Structured triangulation of `[x0, x0+w] x [y0, y0+h]` with square-ish
/// cells of side at most `step`. `keep(cx, cy)` filters cells by centre;
/// `anti(cx, cy)` selects the `(-1, 1)` diagonal instead of `(1, 1)`.
fn grid(
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    step: f64,
    keep: impl Fn(f64, f64) -> bool,
    anti: impl Fn(f64, f64) -> bool,
) -> Result<BaseMesh> {
    let nx = (w / step - 1e-12).ceil().max(1.0) as usize;
    let ny = (h / step - 1e-12).ceil().max(1.0) as usize;
    let dx = w / nx as f64;
    let dy = h / ny as f64;
    let mut id = vec![usize::MAX; (nx + 1) * (ny + 1)];
    let mut coords = Vec::new();
    let mut elements = Vec::new();
    let mut vid = |i: usize, j: usize, coords: &mut Vec<[f64; 2]>| -> usize {
        let slot = &mut id[j * (nx + 1) + i];
        if *slot == usize::MAX {
            *slot = coords.len();
            let x = if i == nx { x0 + w } else { x0 + i as f64 * dx };
            let y = if j == ny { y0 + h } else { y0 + j as f64 * dy };
            coords.push([x, y]);
        }
        *slot
    };
    for j in 0..ny {
        for i in 0..nx {
            let cx = x0 + (i as f64 + 0.5) * dx;
            let cy = y0 + (j as f64 + 0.5) * dy;
            if !keep(cx, cy) {
                continue;
            }
            let a = vid(i, j, &mut coords);
            let b = vid(i + 1, j, &mut coords);
            let c = vid(i + 1, j + 1, &mut coords);
            let d = vid(i, j + 1, &mut coords);
            if anti(cx, cy) {
                // diagonal b-d
                elements.push(vec![a, b, d]);
                elements.push(vec![c, d, b]);
            } else {
                // diagonal a-c
                elements.push(vec![b, c, a]);
                elements.push(vec![d, a, c]);
            }
        }
    }
    BaseMesh::from_raw(2, coords, elements, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_counts() {
        let m = BaseMesh::build(Domain::UnitInterval, 0.5).unwrap();
        assert_eq!(m.num_elements(), 2);
        assert_eq!(m.num_vertices(), 3);
        assert!(m.is_boundary(0) && m.is_boundary(2) && !m.is_boundary(1));
    }

    #[test]
    fn unit_square_minimal() {
        let m = BaseMesh::build(Domain::UnitSquare, 1.0).unwrap();
        assert_eq!(m.num_elements(), 2);
        assert_eq!(m.num_vertices(), 4);
        assert!((0..4).all(|v| m.is_boundary(v)));
        let area: f64 = (0..2).map(|k| m.measure(k)).sum();
        assert!((area - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lshape_six_triangles() {
        let m = BaseMesh::build(Domain::LShape, 1.0).unwrap();
        assert_eq!(m.num_elements(), 6);
        assert_eq!(m.num_vertices(), 8);
        let area: f64 = (0..6).map(|k| m.measure(k)).sum();
        assert!((area - 3.0).abs() < 1e-14);
        // every refinement edge ends at the reentrant corner
        let origin = m.coords().iter().position(|c| c[0] == 0.0 && c[1] == 0.0).unwrap();
        for k in 0..6 {
            let e = m.element(k);
            assert!(e[1] == origin || e[2] == origin);
        }
        // the reentrant corner is on the boundary
        assert!(m.is_boundary(origin));
    }

    #[test]
    fn unknown_domain_tag_rejected() {
        assert!("annulus".parse::<Domain>().is_err());
        assert_eq!("l_shape".parse::<Domain>().unwrap(), Domain::LShape);
    }

    #[test]
    fn text_roundtrip() {
        let m = BaseMesh::build(Domain::LShape, 0.5).unwrap();
        let t = m.to_text();
        assert!(t.starts_with("DIM 2 NV"));
        let back = BaseMesh::from_text(&t).unwrap();
        assert_eq!(back.to_text(), t);
        let m1 = BaseMesh::build(Domain::UnitInterval, 0.25).unwrap();
        assert_eq!(BaseMesh::from_text(&m1.to_text()).unwrap().to_text(), m1.to_text());
    }

    #[test]
    fn bary_gradients_sum_to_zero() {
        let m = BaseMesh::build(Domain::Square, 0.7).unwrap();
        for k in 0..m.num_elements() {
            let g = m.bary_gradients(k);
            assert!((g[0][0] + g[1][0] + g[2][0]).abs() < 1e-12);
            assert!((g[0][1] + g[1][1] + g[2][1]).abs() < 1e-12);
            // grad lambda_i . (x_j - x_0) = delta_ij - delta_i0
            let c = m.element_coords(k);
            for i in 0..3 {
                for j in 1..3 {
                    let d = [c[j][0] - c[0][0], c[j][1] - c[0][1]];
                    let v = g[i][0] * d[0] + g[i][1] * d[1];
                    let e = (i == j) as i32 as f64 - (i == 0) as i32 as f64;
                    assert!((v - e).abs() < 1e-12);
                }
            }
        }
    }
}
