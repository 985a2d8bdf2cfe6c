//! Triangle meshes, the icosphere template, the fixed UV mapping and the
//! smoothness regularizers.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::texel_uv;
use crate::texflow::{sample_canonical_at_vertices, CanonicalUV};

pub type Vec3 = [f64; 3];
pub type Vec2 = [f64; 2];

/// Triangle mesh with positions and a separate UV index buffer, as in OBJ.
///
/// Faces index `vertices`; `face_uvs` index `uvs` corner by corner. Keeping the
/// two index sets separate lets the UV atlas cut the sphere along a seam while
/// the position topology stays closed.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub uvs: Vec<Vec2>,
    pub face_uvs: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Mesh { vertices, faces, uvs: Vec::new(), face_uvs: Vec::new() };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn with_uvs(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        uvs: Vec<Vec2>,
        face_uvs: Vec<[usize; 3]>,
    ) -> Result<Self> {
        let mesh = Mesh { vertices, faces, uvs, face_uvs };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn has_uv(&self) -> bool {
        !self.uvs.is_empty() && self.face_uvs.len() == self.faces.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&k| k >= n) {
                return Err(Error::param(format!("face {i} references a missing vertex")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::param(format!("face {i} is degenerate")));
            }
        }
        if !self.face_uvs.is_empty() {
            if self.face_uvs.len() != self.faces.len() {
                return Err(Error::param("face uv count differs from face count"));
            }
            let m = self.uvs.len();
            if self.face_uvs.iter().flatten().any(|&k| k >= m) {
                return Err(Error::param("face uv index out of range"));
            }
            if self.uvs.iter().flatten().any(|&t| !(0.0..=1.0).contains(&t)) {
                return Err(Error::param("uv coordinate outside the unit square"));
            }
        }
        Ok(())
    }

    /// Unique undirected edges, sorted.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut set = BTreeSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                set.insert([a.min(b), a.max(b)]);
            }
        }
        set.into_iter().collect()
    }

    /// Every edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        let mut count: HashMap<[usize; 2], usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry([a.min(b), a.max(b)]).or_default() += 1;
            }
        }
        !count.is_empty() && count.values().all(|&c| c == 2)
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.vertices.len().max(1) as f64;
        let mut c = [0.0; 3];
        for v in &self.vertices {
            for k in 0..3 {
                c[k] += v[k];
            }
        }
        c.map(|x| x / n)
    }

    /// For each vertex, the distinct UV indices it takes across its faces.
    pub fn vertex_uv_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.vertices.len()];
        for (f, fu) in self.faces.iter().zip(&self.face_uvs) {
            for k in 0..3 {
                let list: &mut Vec<usize> = &mut out[f[k]];
                if !list.contains(&fu[k]) {
                    list.push(fu[k]);
                }
            }
        }
        out
    }
}

/// Per-vertex displacement applied to a template.
#[derive(Clone, Debug, PartialEq)]
pub struct Deformation {
    pub offsets: Vec<Vec3>,
}

impl Deformation {
    pub fn zeros(n: usize) -> Self {
        Deformation { offsets: vec![[0.0; 3]; n] }
    }
}

pub fn apply_deformation(template: &Mesh, d: &Deformation) -> Result<Mesh> {
    if d.offsets.len() != template.vertices.len() {
        return Err(Error::param(format!(
            "deformation has {} offsets for {} vertices",
            d.offsets.len(),
            template.vertices.len()
        )));
    }
    let mut mesh = template.clone();
    for (v, o) in mesh.vertices.iter_mut().zip(&d.offsets) {
        for k in 0..3 {
            v[k] += o[k];
        }
    }
    Ok(mesh)
}

// ---------------------------------------------------------------------------
// Icosphere

fn normalize3(v: Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn from_lat_lon(lat: f64, lon: f64) -> Vec3 {
    [lat.cos() * lon.sin(), lat.sin(), lat.cos() * lon.cos()]
}

/// Icosahedron with vertices on the `+y` / `-y` poles and two staggered rings.
fn icosahedron() -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let lat = 0.5f64.atan();
    // Offset keeps ring vertices and their midpoints off the `lon = pi` seam.
    let offset = 0.1;
    let mut v = vec![[0.0, 1.0, 0.0]];
    for k in 0..5 {
        v.push(from_lat_lon(lat, offset + 2.0 * PI * k as f64 / 5.0));
    }
    for k in 0..5 {
        v.push(from_lat_lon(-lat, offset + 2.0 * PI * k as f64 / 5.0 + PI / 5.0));
    }
    v.push([0.0, -1.0, 0.0]);

    let mut f = Vec::with_capacity(20);
    for k in 0..5 {
        let (a, b) = (1 + k, 1 + (k + 1) % 5);
        let (c, d) = (6 + k, 6 + (k + 1) % 5);
        f.push([0, a, b]);
        f.push([a, c, b]);
        f.push([b, c, d]);
        f.push([11, d, c]);
    }
    (v, f)
}

fn subdivide(vertices: &mut Vec<Vec3>, faces: &[[usize; 3]]) -> Vec<[usize; 3]> {
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mid = |a: usize, b: usize, vertices: &mut Vec<Vec3>| -> usize {
        let key = (a.min(b), a.max(b));
        *midpoint.entry(key).or_insert_with(|| {
            let (p, q) = (vertices[a], vertices[b]);
            vertices.push(normalize3([p[0] + q[0], p[1] + q[1], p[2] + q[2]]));
            vertices.len() - 1
        })
    };
    let mut out = Vec::with_capacity(faces.len() * 4);
    for &[a, b, c] in faces {
        let ab = mid(a, b, vertices);
        let bc = mid(b, c, vertices);
        let ca = mid(c, a, vertices);
        out.push([a, ab, ca]);
        out.push([b, bc, ab]);
        out.push([c, ca, bc]);
        out.push([ab, bc, ca]);
    }
    out
}

fn spherical_uv(p: Vec3) -> Vec2 {
    let lon = p[0].atan2(p[2]);
    let lat = p[1].clamp(-1.0, 1.0).asin();
    [0.5 + lon / (2.0 * PI), 0.5 + lat / PI]
}

/// Unit icosphere with `20 * 4^subdivisions` faces and a longitude/latitude
/// UV atlas.
///
/// Faces that straddle the `lon = pi` seam get duplicated UV corners shifted
/// by one period, pole corners take the mean longitude of their face, and the
/// atlas is then rescaled horizontally back into the unit square.
pub fn make_sphere(subdivisions: u32) -> Result<Mesh> {
    if subdivisions > 6 {
        return Err(Error::param(format!("subdivisions must be in [0, 6], got {subdivisions}")));
    }
    let (mut vertices, mut faces) = icosahedron();
    for _ in 0..subdivisions {
        faces = subdivide(&mut vertices, &faces);
    }

    let is_pole = |p: &Vec3| p[1].abs() > 1.0 - 1e-12;
    let mut corner_uv: Vec<[Vec2; 3]> = Vec::with_capacity(faces.len());
    for f in &faces {
        let mut uv = [spherical_uv(vertices[f[0]]), spherical_uv(vertices[f[1]]), spherical_uv(vertices[f[2]])];
        let regular: Vec<usize> = (0..3).filter(|&k| !is_pole(&vertices[f[k]])).collect();
        let umax = regular.iter().map(|&k| uv[k][0]).fold(f64::MIN, f64::max);
        let umin = regular.iter().map(|&k| uv[k][0]).fold(f64::MAX, f64::min);
        if umax - umin > 0.5 {
            for &k in &regular {
                if uv[k][0] < 0.5 {
                    uv[k][0] += 1.0;
                }
            }
        }
        for k in 0..3 {
            if is_pole(&vertices[f[k]]) {
                let mean = regular.iter().map(|&j| uv[j][0]).sum::<f64>() / regular.len() as f64;
                uv[k][0] = mean;
            }
        }
        corner_uv.push(uv);
    }
    let umax = corner_uv.iter().flatten().map(|t| t[0]).fold(1.0, f64::max);

    let mut uvs: Vec<Vec2> = Vec::new();
    let mut lookup: HashMap<(usize, u64, u64), usize> = HashMap::new();
    let mut face_uvs = Vec::with_capacity(faces.len());
    for (f, cuv) in faces.iter().zip(&corner_uv) {
        let mut idx = [0; 3];
        for k in 0..3 {
            let t = [(cuv[k][0] / umax).clamp(0.0, 1.0), cuv[k][1].clamp(0.0, 1.0)];
            let key = (f[k], t[0].to_bits(), t[1].to_bits());
            idx[k] = *lookup.entry(key).or_insert_with(|| {
                uvs.push(t);
                uvs.len() - 1
            });
        }
        face_uvs.push(idx);
    }
    Mesh::with_uvs(vertices, faces, uvs, face_uvs)
}

// ---------------------------------------------------------------------------
// UV mapping

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TexelEntry {
    pub face: usize,
    pub bary: [f64; 3],
}

/// Fixed assignment of every texel of an `H_uv x W_uv` grid to a surface point
/// given as (face, barycentric coordinates).
#[derive(Clone, Debug, PartialEq)]
pub struct UVMapping {
    pub height: usize,
    pub width: usize,
    pub entries: Vec<TexelEntry>,
    /// Whether the texel center falls inside its face's UV triangle.
    pub covered: Vec<bool>,
}

impl UVMapping {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Surface point of every texel on a mesh sharing the template topology.
    pub fn surface_points(&self, mesh: &Mesh) -> Vec<Vec3> {
        self.entries
            .iter()
            .map(|e| {
                let f = mesh.faces[e.face];
                let mut p = [0.0; 3];
                for k in 0..3 {
                    for d in 0..3 {
                        p[d] += e.bary[k] * mesh.vertices[f[k]][d];
                    }
                }
                p
            })
            .collect()
    }

    /// Texel indices grouped by face. Only texels covered by the face's UV
    /// triangle are listed; a face without any falls back to the filled
    /// texels that copied its entry.
    pub fn texels_per_face(&self, n_faces: usize) -> Vec<Vec<usize>> {
        let mut covered = vec![Vec::new(); n_faces];
        let mut filled = vec![Vec::new(); n_faces];
        for (t, e) in self.entries.iter().enumerate() {
            if self.covered[t] {
                covered[e.face].push(t);
            } else {
                filled[e.face].push(t);
            }
        }
        covered.into_iter().zip(filled).map(|(c, f)| if c.is_empty() { f } else { c }).collect()
    }
}

/// Barycentric coordinates of `p` in the 2D triangle `(a, b, c)`.
pub fn barycentric_2d(p: Vec2, a: Vec2, b: Vec2, c: Vec2) -> Option<[f64; 3]> {
    let cross = |u: Vec2, v: Vec2| u[0] * v[1] - u[1] * v[0];
    let sub = |u: Vec2, v: Vec2| [u[0] - v[0], u[1] - v[1]];
    let area = cross(sub(b, a), sub(c, a));
    if area.abs() < 1e-300 {
        return None;
    }
    let w0 = cross(sub(b, p), sub(c, p)) / area;
    let w1 = cross(sub(c, p), sub(a, p)) / area;
    Some([w0, w1, 1.0 - w0 - w1])
}

pub fn build_uv_mapping(mesh: &Mesh, h_uv: usize, w_uv: usize) -> Result<UVMapping> {
    if !mesh.has_uv() {
        return Err(Error::param("mesh has no uv coordinates"));
    }
    if h_uv < 8 || w_uv < 8 {
        return Err(Error::param(format!("uv grid must be at least 8x8, got {h_uv}x{w_uv}")));
    }
    const TOL: f64 = 1e-12;
    let n = h_uv * w_uv;
    let mut slot: Vec<Option<TexelEntry>> = vec![None; n];

    for (fi, fu) in mesh.face_uvs.iter().enumerate() {
        let (a, b, c) = (mesh.uvs[fu[0]], mesh.uvs[fu[1]], mesh.uvs[fu[2]]);
        let umin = a[0].min(b[0]).min(c[0]);
        let umax = a[0].max(b[0]).max(c[0]);
        let vmin = a[1].min(b[1]).min(c[1]);
        let vmax = a[1].max(b[1]).max(c[1]);
        // u = (col + 0.5) / W, v = 1 - (row + 0.5) / H
        let c0 = ((umin * w_uv as f64 - 0.5).floor().max(0.0)) as usize;
        let c1 = ((umax * w_uv as f64 - 0.5).ceil().max(0.0) as usize).min(w_uv - 1);
        let r0 = (((1.0 - vmax) * h_uv as f64 - 0.5).floor().max(0.0)) as usize;
        let r1 = ((((1.0 - vmin) * h_uv as f64 - 0.5).ceil()).max(0.0) as usize).min(h_uv - 1);
        for r in r0..=r1 {
            for col in c0..=c1 {
                let t = r * w_uv + col;
                if slot[t].is_some() {
                    continue;
                }
                let p = texel_uv(r, col, h_uv, w_uv);
                let Some(w) = barycentric_2d(p, a, b, c) else { continue };
                if w.iter().all(|&x| x >= -TOL) {
                    let clamped = w.map(|x| x.max(0.0));
                    let s: f64 = clamped.iter().sum();
                    slot[t] = Some(TexelEntry { face: fi, bary: clamped.map(|x| x / s) });
                }
            }
        }
    }

    let covered: Vec<bool> = slot.iter().map(Option::is_some).collect();
    if !covered.iter().any(|&c| c) {
        return Err(Error::param("no texel falls inside any uv triangle"));
    }

    // Uncovered texels copy the entry of the nearest covered texel, found
    // with an exact separable Euclidean distance transform.
    let nearest = nearest_sites(&covered, h_uv, w_uv);
    let entries = (0..n).map(|t| slot[nearest[t]].expect("nearest site is covered")).collect();

    Ok(UVMapping { height: h_uv, width: w_uv, entries, covered })
}

/// Lower envelope of the parabolas `(q - p)^2 + f[p]` over the finite `f[p]`.
/// Returns, per `q`, the minimum value and the `p` attaining it.
fn envelope_1d(f: &[f64]) -> Vec<(f64, usize)> {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else { break };
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.clear();
            z.push(f64::NEG_INFINITY);
        }
    }
    if v.is_empty() {
        return vec![(f64::INFINITY, 0); n];
    }
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        out.push((((q as f64) - p as f64).powi(2) + f[p], p));
    }
    out
}

/// Index of the nearest `true` cell of a `h x w` grid for every cell.
fn nearest_sites(site: &[bool], h: usize, w: usize) -> Vec<usize> {
    // columns first: nearest site row within each column
    let mut col_d = vec![f64::INFINITY; h * w];
    let mut col_row = vec![0usize; h * w];
    let mut f = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            f[r] = if site[r * w + c] { 0.0 } else { f64::INFINITY };
        }
        for (r, (d, p)) in envelope_1d(&f).into_iter().enumerate() {
            col_d[r * w + c] = d;
            col_row[r * w + c] = p;
        }
    }
    let mut out = vec![0usize; h * w];
    for r in 0..h {
        let row = &col_d[r * w..(r + 1) * w];
        for (c, (_, p)) in envelope_1d(row).into_iter().enumerate() {
            out[r * w + c] = col_row[r * w + p] * w + p;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Regularizers

/// Vertex adjacency derived from faces.
#[derive(Clone, Debug)]
pub struct Adjacency {
    pub neighbors: Vec<Vec<usize>>,
    pub edges: Vec<[usize; 2]>,
}

impl Adjacency {
    pub fn new(mesh: &Mesh) -> Self {
        let edges = mesh.edges();
        let mut neighbors = vec![Vec::new(); mesh.vertices.len()];
        for &[a, b] in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        Adjacency { neighbors, edges }
    }

    /// `sum_i |v_i - mean(N(v_i))|^2` with its gradient accumulated into `grad`.
    pub fn laplacian(&self, vertices: &[Vec3], grad: Option<&mut [Vec3]>) -> f64 {
        let n = vertices.len();
        let mut lap = vec![[0.0; 3]; n];
        let mut energy = 0.0;
        for i in 0..n {
            let nb = &self.neighbors[i];
            if nb.is_empty() {
                continue;
            }
            let inv = 1.0 / nb.len() as f64;
            let mut m = [0.0; 3];
            for &j in nb {
                for d in 0..3 {
                    m[d] += vertices[j][d];
                }
            }
            for d in 0..3 {
                lap[i][d] = vertices[i][d] - m[d] * inv;
                energy += lap[i][d] * lap[i][d];
            }
        }
        if let Some(g) = grad {
            for i in 0..n {
                let nb = &self.neighbors[i];
                if nb.is_empty() {
                    continue;
                }
                let inv = 1.0 / nb.len() as f64;
                for d in 0..3 {
                    g[i][d] += 2.0 * lap[i][d];
                }
                for &j in nb {
                    for d in 0..3 {
                        g[j][d] -= 2.0 * inv * lap[i][d];
                    }
                }
            }
        }
        energy
    }

    /// Mean squared edge length with its gradient accumulated into `grad`.
    pub fn edge_energy(&self, vertices: &[Vec3], grad: Option<&mut [Vec3]>) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        let inv = 1.0 / self.edges.len() as f64;
        let mut sum = 0.0;
        for &[a, b] in &self.edges {
            for d in 0..3 {
                let e = vertices[a][d] - vertices[b][d];
                sum += e * e;
            }
        }
        if let Some(g) = grad {
            for &[a, b] in &self.edges {
                for d in 0..3 {
                    let e = 2.0 * inv * (vertices[a][d] - vertices[b][d]);
                    g[a][d] += e;
                    g[b][d] -= e;
                }
            }
        }
        sum * inv
    }
}

pub fn laplacian_energy(mesh: &Mesh) -> f64 {
    Adjacency::new(mesh).laplacian(&mesh.vertices, None)
}

pub fn edge_regularizer(mesh: &Mesh) -> f64 {
    Adjacency::new(mesh).edge_energy(&mesh.vertices, None)
}

// ---------------------------------------------------------------------------
// Part labels

/// Argmax part per vertex of the canonical map sampled at the vertex's UV
/// coordinates (averaged over seam copies). Ties go to the lowest index.
pub fn vertex_part_labels(mesh: &Mesh, canonical: &CanonicalUV) -> Result<Vec<usize>> {
    let probs = sample_canonical_at_vertices(mesh, canonical)?;
    let np = canonical.parts();
    Ok(probs.chunks(np).map(argmax_lowest).collect())
}

pub(crate) fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
