//! Soft rasterizer.
//!
//! Every face contributes a coverage probability to each pixel near it,
//! `W[j][m] = sigmoid(sign * d^2 / sigma)` where `d` is the distance from the
//! pixel center to the projected triangle's boundary and `sign` is `+1`
//! inside. The silhouette is the probabilistic union `1 - prod_j (1 - W[j][m])`
//! and per-corner attributes are blended with a depth softmax weighted by
//! coverage. All of it is differentiable with respect to the projected
//! vertices, their depths and the attributes; [`RasterOutput::backward`] is
//! the adjoint.

use serde::{Deserialize, Serialize};

use crate::camera::{project_with_depth, Camera, Projection};
use crate::error::{Error, Result};
use crate::geometry::{Mesh, UVMapping, Vec2};
use crate::grid::{pixel_center, Image};
use crate::texflow::{sample_canonical_at_vertices, CanonicalUV};

/// Coverage below this value is truncated from the sparse face rows.
pub const COVERAGE_CUTOFF: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub height: usize,
    pub width: usize,
    /// Distance-to-probability bandwidth in squared normalized units.
    pub sigma: f64,
    /// Depth softmax temperature.
    pub gamma: f64,
    pub background: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig { height: 64, width: 64, sigma: 1e-4, gamma: 1e-4, background: 0.0 }
    }
}

impl RasterConfig {
    pub fn with_size(height: usize, width: usize) -> Self {
        RasterConfig { height, width, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::param("raster sigma and gamma must be positive"));
        }
        if self.height * self.width == 0 {
            return Err(Error::param("raster size must be at least 1x1"));
        }
        Ok(())
    }

    /// Distance beyond which coverage falls below [`COVERAGE_CUTOFF`].
    pub fn support_radius(&self) -> f64 {
        (self.sigma * ((1.0 - COVERAGE_CUTOFF) / COVERAGE_CUTOFF).ln()).sqrt()
    }
}

/// Attributes given per face corner, `faces x 3 x channels`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CornerAttrs {
    pub channels: usize,
    pub data: Vec<f64>,
}

impl CornerAttrs {
    pub fn empty(n_faces: usize) -> Self {
        let _ = n_faces;
        CornerAttrs { channels: 0, data: Vec::new() }
    }

    /// Expands per-vertex attributes (`vertices x channels`) to corners.
    pub fn from_vertices(faces: &[[usize; 3]], per_vertex: &[f64], channels: usize) -> Self {
        let mut data = Vec::with_capacity(faces.len() * 3 * channels);
        for f in faces {
            for &v in f {
                data.extend_from_slice(&per_vertex[v * channels..(v + 1) * channels]);
            }
        }
        CornerAttrs { channels, data }
    }

    /// The mesh's UV coordinates as two corner channels.
    pub fn from_uv(mesh: &Mesh) -> Self {
        let mut data = Vec::with_capacity(mesh.faces.len() * 6);
        for fu in &mesh.face_uvs {
            for &t in fu {
                data.extend_from_slice(&mesh.uvs[t]);
            }
        }
        CornerAttrs { channels: 2, data }
    }

    /// Concatenates channels corner by corner.
    pub fn concat(&self, other: &CornerAttrs) -> CornerAttrs {
        if self.channels == 0 {
            return other.clone();
        }
        if other.channels == 0 {
            return self.clone();
        }
        let corners = self.data.len() / self.channels;
        let channels = self.channels + other.channels;
        let mut data = Vec::with_capacity(corners * channels);
        for c in 0..corners {
            data.extend_from_slice(&self.data[c * self.channels..(c + 1) * self.channels]);
            data.extend_from_slice(&other.data[c * other.channels..(c + 1) * other.channels]);
        }
        CornerAttrs { channels, data }
    }

    /// Folds corner gradients back to per-vertex gradients.
    pub fn fold_to_vertices(faces: &[[usize; 3]], grad: &[f64], channels: usize, n_vertices: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_vertices * channels];
        for (fi, f) in faces.iter().enumerate() {
            for (k, &v) in f.iter().enumerate() {
                let src = (fi * 3 + k) * channels;
                for c in 0..channels {
                    out[v * channels + c] += grad[src + c];
                }
            }
        }
        out
    }
}

/// One nonzero entry of the coverage map `W`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceSample {
    pub face: u32,
    pub pixel: u32,
    pub coverage: f64,
    /// Clamped and renormalized barycentric coordinates of the pixel center.
    pub bary: [f64; 3],
    pub depth: f64,
}

#[derive(Clone, Debug)]
pub struct RasterOutput {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub background: f64,
    /// `H x W`, probabilistic union of face coverages.
    pub silhouette: Vec<f64>,
    /// `H x W x C`, coverage- and depth-weighted blend over faces (zero where
    /// no face reaches the pixel).
    pub blend: Vec<f64>,
    /// Sparse `W`, grouped by face.
    pub samples: Vec<FaceSample>,
    pub face_offsets: Vec<usize>,
    pixel_order: Vec<u32>,
    pixel_offsets: Vec<usize>,
}

impl RasterOutput {
    pub fn n_faces(&self) -> usize {
        self.face_offsets.len() - 1
    }

    /// Sparse row `W[j]` as `(pixel, probability)` pairs.
    pub fn face_probs(&self, face: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.samples[self.face_offsets[face]..self.face_offsets[face + 1]]
            .iter()
            .map(|s| (s.pixel as usize, s.coverage))
    }

    /// Sample indices touching `pixel`.
    pub fn pixel_samples(&self, pixel: usize) -> &[u32] {
        &self.pixel_order[self.pixel_offsets[pixel]..self.pixel_offsets[pixel + 1]]
    }

    /// Silhouette recomputed from the rows of `W`.
    pub fn silhouette_from_face_probs(&self) -> Vec<f64> {
        let mut keep = vec![1.0; self.height * self.width];
        for j in 0..self.n_faces() {
            for (m, w) in self.face_probs(j) {
                keep[m] *= 1.0 - w;
            }
        }
        keep.into_iter().map(|k| 1.0 - k).collect()
    }

    /// Attributes composited over the background: `sil * blend + (1 - sil) * bg`.
    pub fn attributes(&self) -> Image {
        let c = self.channels;
        let mut data = vec![0.0; self.blend.len()];
        for m in 0..self.height * self.width {
            let s = self.silhouette[m];
            for k in 0..c {
                data[m * c + k] = s * self.blend[m * c + k] + (1.0 - s) * self.background;
            }
        }
        Image { height: self.height, width: self.width, channels: c, data }
    }

    pub fn silhouette_image(&self) -> Image {
        Image { height: self.height, width: self.width, channels: 1, data: self.silhouette.clone() }
    }

    /// Adjoint of [`rasterize_projected`].
    ///
    /// `grad_sil` is `H x W`, `grad_blend` is `H x W x C`, `grad_cov` is per
    /// entry of `samples`. Any of them may be omitted.
    pub fn backward(
        &self,
        proj: &Projection,
        faces: &[[usize; 3]],
        attrs: &CornerAttrs,
        cfg: &RasterConfig,
        grad_sil: Option<&[f64]>,
        grad_blend: Option<&[f64]>,
        grad_cov: Option<&[f64]>,
    ) -> RasterGrad {
        let c = self.channels;
        let ns = self.samples.len();
        let mut g_cov = match grad_cov {
            Some(g) => g.to_vec(),
            None => vec![0.0; ns],
        };
        let mut g_bary = vec![[0.0f64; 3]; ns];
        let mut out = RasterGrad {
            xy: vec![[0.0; 2]; proj.xy.len()],
            depth: vec![0.0; proj.xy.len()],
            attrs: vec![0.0; attrs.data.len()],
        };

        let mut keep_prefix: Vec<f64> = Vec::new();
        let mut a_buf: Vec<f64> = Vec::new();
        for m in 0..self.height * self.width {
            let list = self.pixel_samples(m);
            if list.is_empty() {
                continue;
            }
            if let Some(gs) = grad_sil {
                let g = gs[m];
                if g != 0.0 {
                    // d sil / d c_j = prod_{k != j} (1 - c_k)
                    keep_prefix.clear();
                    let mut acc = 1.0;
                    for &si in list {
                        keep_prefix.push(acc);
                        acc *= 1.0 - self.samples[si as usize].coverage;
                    }
                    let mut suffix = 1.0;
                    for (pos, &si) in list.iter().enumerate().rev() {
                        g_cov[si as usize] += g * keep_prefix[pos] * suffix;
                        suffix *= 1.0 - self.samples[si as usize].coverage;
                    }
                }
            }
            let Some(gb) = grad_blend else { continue };
            if c == 0 {
                continue;
            }
            let gb = &gb[m * c..(m + 1) * c];
            if gb.iter().all(|&x| x == 0.0) {
                continue;
            }
            let zmax = blend_shift(list.iter().map(|&si| &self.samples[si as usize]), cfg.gamma);
            let mut total = 0.0;
            for &si in list {
                let s = &self.samples[si as usize];
                total += s.coverage * ((s.depth - zmax) / cfg.gamma).exp();
            }
            if !(total > 0.0) {
                continue;
            }
            let blend = &self.blend[m * c..(m + 1) * c];
            for &si in list {
                let si = si as usize;
                let s = &self.samples[si];
                let f = s.face as usize;
                let e = ((s.depth - zmax) / cfg.gamma).exp();
                let u = s.coverage * e;
                a_buf.clear();
                a_buf.resize(c, 0.0);
                for k in 0..3 {
                    let base = (f * 3 + k) * c;
                    for ch in 0..c {
                        a_buf[ch] += s.bary[k] * attrs.data[base + ch];
                    }
                }
                let mut g_u = 0.0;
                for ch in 0..c {
                    g_u += gb[ch] * (a_buf[ch] - blend[ch]);
                }
                g_u /= total;
                g_cov[si] += g_u * e;
                let g_depth = g_u * u / cfg.gamma;
                let w = u / total;
                let fv = faces[f];
                for k in 0..3 {
                    let base = (f * 3 + k) * c;
                    let mut gbk = g_depth * proj.depth[fv[k]];
                    for ch in 0..c {
                        let ga = gb[ch] * w;
                        gbk += ga * attrs.data[base + ch];
                        out.attrs[base + ch] += ga * s.bary[k];
                    }
                    g_bary[si][k] += gbk;
                    out.depth[fv[k]] += g_depth * s.bary[k];
                }
            }
        }

        let radius_sq_inv = 1.0 / cfg.sigma;
        for (si, s) in self.samples.iter().enumerate() {
            let gc = g_cov[si];
            let gbar = g_bary[si];
            if gc == 0.0 && gbar == [0.0; 3] {
                continue;
            }
            let f = faces[s.face as usize];
            let tri = [proj.xy[f[0]], proj.xy[f[1]], proj.xy[f[2]]];
            let p = pixel_center(s.pixel as usize / self.width, s.pixel as usize % self.width, self.height, self.width);
            let geom = face_pixel(&tri, p).expect("sample faces are non-degenerate");
            let sign = if geom.inside { 1.0 } else { -1.0 };
            let g_d2 = gc * s.coverage * (1.0 - s.coverage) * sign * radius_sq_inv;
            let gt = face_pixel_backward(&tri, p, &geom, g_d2, gbar);
            for k in 0..3 {
                out.xy[f[k]][0] += gt[k][0];
                out.xy[f[k]][1] += gt[k][1];
            }
        }
        out
    }
}

/// Gradients with respect to rasterizer inputs.
#[derive(Clone, Debug)]
pub struct RasterGrad {
    pub xy: Vec<Vec2>,
    pub depth: Vec<f64>,
    /// Same layout as [`CornerAttrs::data`].
    pub attrs: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FaceGeom {
    raw: [f64; 3],
    area2: f64,
    pub(crate) inside: bool,
    pub(crate) d2: f64,
    edge: usize,
    t: f64,
}

#[inline]
fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

/// Depth offset for the softmax weights `c exp(z / gamma)`: the largest
/// `z + gamma ln c`, so every weight stays within `1 / COVERAGE_CUTOFF`.
fn blend_shift<'a>(samples: impl Iterator<Item = &'a FaceSample>, gamma: f64) -> f64 {
    samples.map(|s| s.depth + gamma * s.coverage.ln()).fold(f64::MIN, f64::max)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Barycentrics, inside test and squared boundary distance of `p`.
pub(crate) fn face_pixel(tri: &[Vec2; 3], p: Vec2) -> Option<FaceGeom> {
    let area2 = cross(sub(tri[1], tri[0]), sub(tri[2], tri[0]));
    if area2.abs() < 1e-14 {
        return None;
    }
    let d = [sub(tri[0], p), sub(tri[1], p), sub(tri[2], p)];
    let raw = [cross(d[1], d[2]) / area2, cross(d[2], d[0]) / area2, cross(d[0], d[1]) / area2];
    let inside = raw.iter().all(|&b| b >= 0.0);
    let mut best = (f64::INFINITY, 0, 0.0);
    for k in 0..3 {
        let a = tri[k];
        let b = tri[(k + 1) % 3];
        let ab = sub(b, a);
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let ap = sub(p, a);
        let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
        let dd = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        if dd < best.0 {
            best = (dd, k, t);
        }
    }
    Some(FaceGeom { raw, area2, inside, d2: best.0, edge: best.1, t: best.2 })
}

pub(crate) fn clamped_bary(raw: [f64; 3]) -> [f64; 3] {
    let c = raw.map(|b| b.max(0.0));
    let s = c[0] + c[1] + c[2];
    c.map(|b| b / s)
}

fn face_pixel_backward(tri: &[Vec2; 3], p: Vec2, g: &FaceGeom, g_d2: f64, g_bary: [f64; 3]) -> [Vec2; 3] {
    let mut out = [[0.0; 2]; 3];
    if g_d2 != 0.0 {
        let (k, k1) = (g.edge, (g.edge + 1) % 3);
        let (a, b) = (tri[k], tri[k1]);
        let q = [a[0] + g.t * (b[0] - a[0]), a[1] + g.t * (b[1] - a[1])];
        let diff = [p[0] - q[0], p[1] - q[1]];
        for d in 0..2 {
            out[k][d] += -2.0 * diff[d] * (1.0 - g.t) * g_d2;
            out[k1][d] += -2.0 * diff[d] * g.t * g_d2;
        }
    }
    if g_bary != [0.0; 3] {
        let clamped = g.raw.map(|b| b.max(0.0));
        let s = clamped[0] + clamped[1] + clamped[2];
        let norm = clamped.map(|b| b / s);
        let dot: f64 = (0..3).map(|l| g_bary[l] * norm[l]).sum();
        let mut g_raw = [0.0; 3];
        for k in 0..3 {
            if g.raw[k] > 0.0 {
                g_raw[k] = (g_bary[k] - dot) / s;
            }
        }
        let g_area: f64 = -(0..3).map(|k| g_raw[k] * g.raw[k]).sum::<f64>() / g.area2;
        let g_n: [f64; 3] = std::array::from_fn(|k| g_raw[k] / g.area2 + g_area);
        let d = [sub(tri[0], p), sub(tri[1], p), sub(tri[2], p)];
        // n0 = d1 x d2, n1 = d2 x d0, n2 = d0 x d1
        let pairs = [(1, 2), (2, 0), (0, 1)];
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let (a, b) = (d[i], d[j]);
            out[i][0] += g_n[k] * b[1];
            out[i][1] -= g_n[k] * b[0];
            out[j][0] -= g_n[k] * a[1];
            out[j][1] += g_n[k] * a[0];
        }
    }
    out
}

/// Rasterizes already-projected vertices.
pub fn rasterize_projected(
    proj: &Projection,
    faces: &[[usize; 3]],
    attrs: &CornerAttrs,
    cfg: &RasterConfig,
) -> Result<RasterOutput> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let c = attrs.channels;
    if c > 0 && attrs.data.len() != faces.len() * 3 * c {
        return Err(Error::param("corner attribute buffer does not match face count"));
    }
    let radius = cfg.support_radius();
    let mut samples = Vec::new();
    let mut face_offsets = Vec::with_capacity(faces.len() + 1);
    face_offsets.push(0);
    for (fi, f) in faces.iter().enumerate() {
        let tri = [proj.xy[f[0]], proj.xy[f[1]], proj.xy[f[2]]];
        let area2 = cross(sub(tri[1], tri[0]), sub(tri[2], tri[0]));
        if area2.abs() >= 1e-14 && tri.iter().flatten().all(|x| x.is_finite()) {
            let xmin = tri[0][0].min(tri[1][0]).min(tri[2][0]) - radius;
            let xmax = tri[0][0].max(tri[1][0]).max(tri[2][0]) + radius;
            let ymin = tri[0][1].min(tri[1][1]).min(tri[2][1]) - radius;
            let ymax = tri[0][1].max(tri[1][1]).max(tri[2][1]) + radius;
            // x = (2c + 1) / W - 1  =>  c = ((x + 1) W - 1) / 2
            let c0 = (((xmin + 1.0) * w as f64 - 1.0) * 0.5).ceil().max(0.0);
            let c1 = (((xmax + 1.0) * w as f64 - 1.0) * 0.5).floor().min(w as f64 - 1.0);
            let r0 = (((1.0 - ymax) * h as f64 - 1.0) * 0.5).ceil().max(0.0);
            let r1 = (((1.0 - ymin) * h as f64 - 1.0) * 0.5).floor().min(h as f64 - 1.0);
            if c0 <= c1 && r0 <= r1 {
                for r in r0 as usize..=r1 as usize {
                    for col in c0 as usize..=c1 as usize {
                        let p = pixel_center(r, col, h, w);
                        let Some(g) = face_pixel(&tri, p) else { continue };
                        if !g.inside && g.d2 > radius * radius {
                            continue;
                        }
                        let arg = if g.inside { g.d2 } else { -g.d2 } / cfg.sigma;
                        let bary = clamped_bary(g.raw);
                        let depth = (0..3).map(|k| bary[k] * proj.depth[f[k]]).sum();
                        samples.push(FaceSample {
                            face: fi as u32,
                            pixel: (r * w + col) as u32,
                            coverage: sigmoid(arg),
                            bary,
                            depth,
                        });
                    }
                }
            }
        }
        face_offsets.push(samples.len());
    }

    // Group samples by pixel, keeping face order within a pixel.
    let npix = h * w;
    let mut pixel_offsets = vec![0usize; npix + 1];
    for s in &samples {
        pixel_offsets[s.pixel as usize + 1] += 1;
    }
    for m in 0..npix {
        pixel_offsets[m + 1] += pixel_offsets[m];
    }
    let mut cursor = pixel_offsets.clone();
    let mut pixel_order = vec![0u32; samples.len()];
    for (i, s) in samples.iter().enumerate() {
        let m = s.pixel as usize;
        pixel_order[cursor[m]] = i as u32;
        cursor[m] += 1;
    }

    let mut silhouette = vec![0.0; npix];
    let mut blend = vec![0.0; npix * c];
    for m in 0..npix {
        let list = &pixel_order[pixel_offsets[m]..pixel_offsets[m + 1]];
        if list.is_empty() {
            continue;
        }
        let mut keep = 1.0;
        for &si in list {
            keep *= 1.0 - samples[si as usize].coverage;
        }
        silhouette[m] = 1.0 - keep;
        if c == 0 {
            continue;
        }
        let zmax = blend_shift(list.iter().map(|&si| &samples[si as usize]), cfg.gamma);
        let mut total = 0.0;
        let out = &mut blend[m * c..(m + 1) * c];
        for &si in list {
            let s = &samples[si as usize];
            let u = s.coverage * ((s.depth - zmax) / cfg.gamma).exp();
            if u == 0.0 {
                continue;
            }
            total += u;
            let f = s.face as usize;
            for k in 0..3 {
                let base = (f * 3 + k) * c;
                for ch in 0..c {
                    out[ch] += u * s.bary[k] * attrs.data[base + ch];
                }
            }
        }
        if total > 0.0 {
            out.iter_mut().for_each(|x| *x /= total);
        }
    }

    Ok(RasterOutput {
        height: h,
        width: w,
        channels: c,
        background: cfg.background,
        silhouette,
        blend,
        samples,
        face_offsets,
        pixel_order,
        pixel_offsets,
    })
}

/// Faces that face the camera, are not hidden behind another face at their
/// centroid, and whose projected inradius exceeds the coverage support radius
/// so that their coverage saturates somewhere inside.
pub fn visible_faces(proj: &Projection, faces: &[[usize; 3]], cfg: &RasterConfig) -> Vec<usize> {
    let tri = |f: &[usize; 3]| [proj.xy[f[0]], proj.xy[f[1]], proj.xy[f[2]]];
    let front: Vec<usize> = (0..faces.len())
        .filter(|&j| {
            let t = tri(&faces[j]);
            let area2 = cross(sub(t[1], t[0]), sub(t[2], t[0]));
            if area2 <= 0.0 {
                return false;
            }
            let perim: f64 = (0..3).map(|k| sub(t[(k + 1) % 3], t[k])).map(|d| d[0].hypot(d[1])).sum();
            area2 / perim > cfg.support_radius()
        })
        .collect();
    front
        .iter()
        .copied()
        .filter(|&j| {
            let f = faces[j];
            let t = tri(&f);
            let c = [(t[0][0] + t[1][0] + t[2][0]) / 3.0, (t[0][1] + t[1][1] + t[2][1]) / 3.0];
            let z = (proj.depth[f[0]] + proj.depth[f[1]] + proj.depth[f[2]]) / 3.0;
            !(0..faces.len()).any(|k| {
                if k == j {
                    return false;
                }
                let g = faces[k];
                let u = tri(&g);
                match crate::geometry::barycentric_2d(c, u[0], u[1], u[2]) {
                    Some(b) if b.iter().all(|&x| x >= 0.0) => {
                        let zk = b[0] * proj.depth[g[0]] + b[1] * proj.depth[g[1]] + b[2] * proj.depth[g[2]];
                        zk > z + 1e-9
                    }
                    _ => false,
                }
            })
        })
        .collect()
}

/// Projects `mesh` with `cam` and rasterizes it with per-vertex attributes
/// (`vertices x channels`, may be empty).
pub fn rasterize(
    mesh: &Mesh,
    cam: &Camera,
    per_vertex_attrs: &[f64],
    channels: usize,
    cfg: &RasterConfig,
) -> Result<RasterOutput> {
    if channels > 0 && per_vertex_attrs.len() != mesh.vertices.len() * channels {
        return Err(Error::param(format!(
            "attribute buffer has {} values for {} vertices x {} channels",
            per_vertex_attrs.len(),
            mesh.vertices.len(),
            channels
        )));
    }
    let attrs = if channels > 0 {
        CornerAttrs::from_vertices(&mesh.faces, per_vertex_attrs, channels)
    } else {
        CornerAttrs::empty(mesh.faces.len())
    };
    let proj = project_with_depth(&mesh.vertices, cam);
    rasterize_projected(&proj, &mesh.faces, &attrs, cfg)
}

pub fn render_silhouette(mesh: &Mesh, cam: &Camera, cfg: &RasterConfig) -> Result<Image> {
    Ok(rasterize(mesh, cam, &[], 0, cfg)?.silhouette_image())
}

/// Renders the canonical part map carried onto the surface: per-vertex part
/// probabilities are sampled at the vertices' UV coordinates and rasterized
/// over a zero background.
pub fn render_part_probs(
    mesh: &Mesh,
    cam: &Camera,
    canonical: &CanonicalUV,
    mapping: &UVMapping,
    cfg: &RasterConfig,
) -> Result<Image> {
    if canonical.probs.height != mapping.height || canonical.probs.width != mapping.width {
        return Err(Error::param("canonical map and uv mapping grids differ"));
    }
    let np = canonical.parts();
    let per_vertex = sample_canonical_at_vertices(mesh, canonical)?;
    let out = rasterize(mesh, cam, &per_vertex, np, &RasterConfig { background: 0.0, ..cfg.clone() })?;
    Ok(out.attributes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_sphere;

    fn tri_mesh(v: [[f64; 3]; 3]) -> Mesh {
        Mesh::new(v.to_vec(), vec![[0, 1, 2]]).unwrap()
    }

    fn point_segment_d2(p: Vec2, a: Vec2, b: Vec2) -> f64 {
        let ab = sub(b, a);
        let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / (ab[0] * ab[0] + ab[1] * ab[1])).clamp(0.0, 1.0);
        (p[0] - a[0] - t * ab[0]).powi(2) + (p[1] - a[1] - t * ab[1]).powi(2)
    }

    #[test]
    fn deep_inside_saturates() {
        let mesh = tri_mesh([[-0.9, -0.9, 0.0], [0.9, -0.9, 0.0], [0.0, 0.9, 0.0]]);
        let cfg = RasterConfig { height: 8, width: 8, sigma: 1e-5, ..Default::default() };
        let out = rasterize(&mesh, &Camera::default(), &[], 0, &cfg).unwrap();
        // pixel (4, 3) center (-0.125, -0.125)
        let m = 4 * 8 + 3;
        let w: Vec<_> = out.face_probs(0).filter(|&(p, _)| p == m).collect();
        assert_eq!(w.len(), 1);
        assert!(w[0].1 >= 0.999);
    }

    #[test]
    fn far_pixels_are_empty() {
        let mesh = tri_mesh([[-0.2, -0.2, 0.0], [0.2, -0.2, 0.0], [0.0, 0.2, 0.0]]);
        let cfg = RasterConfig::with_size(32, 32);
        let sil = render_silhouette(&mesh, &Camera::default(), &cfg).unwrap();
        assert!(sil.get(0, 0, 0) < 1e-3);
        assert!(sil.get(31, 31, 0) < 1e-3);
    }

    #[test]
    fn coverage_matches_closed_form() {
        let v = [[-0.5, -0.4, 0.0], [0.6, -0.3, 0.0], [0.1, 0.55, 0.0]];
        let mesh = tri_mesh(v);
        let cfg = RasterConfig { height: 16, width: 16, sigma: 2e-3, ..Default::default() };
        let out = rasterize(&mesh, &Camera::default(), &[], 0, &cfg).unwrap();
        let tri: Vec<Vec2> = v.iter().map(|p| [p[0], p[1]]).collect();
        assert!(out.face_probs(0).count() > 10);
        for (m, w) in out.face_probs(0) {
            let p = pixel_center(m / 16, m % 16, 16, 16);
            let d2 = (0..3).map(|k| point_segment_d2(p, tri[k], tri[(k + 1) % 3])).fold(f64::INFINITY, f64::min);
            let bc = crate::geometry::barycentric_2d(p, tri[0], tri[1], tri[2]).unwrap();
            let sign = if bc.iter().all(|&b| b >= 0.0) { 1.0 } else { -1.0 };
            let expect = 1.0 / (1.0 + (-sign * d2 / cfg.sigma).exp());
            assert!((w - expect).abs() < 1e-9, "pixel {m}: {w} vs {expect}");
        }
    }

    #[test]
    fn empty_mesh_renders_nothing() {
        let mesh = Mesh::new(Vec::new(), Vec::new()).unwrap();
        let sil = render_silhouette(&mesh, &Camera::default(), &RasterConfig::with_size(8, 8)).unwrap();
        assert!(sil.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_area_face_is_skipped() {
        let mesh = tri_mesh([[0.0, 0.0, 0.0], [0.5, 0.5, 0.0], [1.0, 1.0, 0.0]]);
        let out = rasterize(&mesh, &Camera::default(), &[], 0, &RasterConfig::with_size(8, 8)).unwrap();
        assert!(out.samples.is_empty());
    }

    #[test]
    fn sphere_interior_saturates() {
        let mesh = make_sphere(3).unwrap();
        // generic pose so no pixel centre lands on a projected edge
        let cam = Camera { scale: 0.9, translation: [0.0, 0.0], rotation: [0.93, 0.17, 0.29, -0.11] };
        // pixels lying within ~sqrt(sigma) of an interior edge see two
        // half-covering faces, so the bandwidth must be well below the pitch
        let cfg = RasterConfig { height: 32, width: 32, sigma: 1e-7, ..Default::default() };
        let sil = render_silhouette(&mesh, &cam, &cfg).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let p = pixel_center(r, c, 32, 32);
                if p[0].hypot(p[1]) < 0.8 {
                    assert!(sil.get(r, c, 0) > 0.99, "({r},{c}) {}", sil.get(r, c, 0));
                }
            }
        }
    }

    #[test]
    fn silhouette_is_union_of_face_rows() {
        let mesh = make_sphere(1).unwrap();
        let cam = Camera { scale: 0.7, translation: [0.05, -0.1], rotation: [0.9, 0.1, 0.3, -0.2] };
        let out = rasterize(&mesh, &cam, &[], 0, &RasterConfig::with_size(24, 24)).unwrap();
        let recomputed = out.silhouette_from_face_probs();
        for (a, b) in recomputed.iter().zip(&out.silhouette) {
            assert!((a - b).abs() < 1e-5);
            assert!((0.0..=1.0).contains(b));
        }
    }

    #[test]
    fn unit_attributes_reproduce_silhouette() {
        let mesh = make_sphere(1).unwrap();
        let cam = Camera { scale: 0.6, ..Camera::default() };
        let ones = vec![1.0; mesh.vertices.len()];
        let out = rasterize(&mesh, &cam, &ones, 1, &RasterConfig::with_size(16, 16)).unwrap();
        let attrs = out.attributes();
        for (a, s) in attrs.data.iter().zip(&out.silhouette) {
            assert!((a - s).abs() < 1e-12);
        }
    }

    #[test]
    fn smaller_sigma_moves_toward_hard_coverage() {
        // holds per face; the union can dip near interior edges
        let mesh = make_sphere(2).unwrap();
        let cam = Camera { scale: 0.6, translation: [0.03, 0.01], ..Camera::default() };
        let wide = rasterize(&mesh, &cam, &[], 0, &RasterConfig { sigma: 1e-3, ..RasterConfig::with_size(32, 32) }).unwrap();
        let sharp = rasterize(&mesh, &cam, &[], 0, &RasterConfig { sigma: 1e-4, ..RasterConfig::with_size(32, 32) }).unwrap();
        let mut checked = 0;
        for j in 0..mesh.faces.len() {
            let wide_row: std::collections::HashMap<usize, f64> = wide.face_probs(j).collect();
            for (m, b) in sharp.face_probs(j) {
                let a = wide_row[&m];
                if a > 0.5 {
                    assert!(b >= a - 1e-12, "face {j} pixel {m}: {a} -> {b}");
                } else if a < 0.5 {
                    assert!(b <= a + 1e-12, "face {j} pixel {m}: {a} -> {b}");
                }
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn hard_limit_matches_point_in_triangle() {
        let mesh = make_sphere(2).unwrap();
        let cam = Camera { scale: 0.7, translation: [0.1, 0.0], rotation: [0.95, 0.2, 0.1, 0.05] };
        let cfg = RasterConfig { sigma: 1e-6, ..RasterConfig::with_size(48, 48) };
        let sil = render_silhouette(&mesh, &cam, &cfg).unwrap();
        let proj = project_with_depth(&mesh.vertices, &cam);
        let mut agree = 0;
        for r in 0..48 {
            for c in 0..48 {
                let p = pixel_center(r, c, 48, 48);
                let hit = mesh.faces.iter().any(|f| {
                    let (a, b, cc) = (proj.xy[f[0]], proj.xy[f[1]], proj.xy[f[2]]);
                    crate::geometry::barycentric_2d(p, a, b, cc).is_some_and(|w| w.iter().all(|&x| x >= 0.0))
                });
                if hit == (sil.get(r, c, 0) > 0.5) {
                    agree += 1;
                }
            }
        }
        assert!(agree as f64 >= 0.99 * 48.0 * 48.0);
    }

    #[test]
    fn translation_moves_silhouette_centroid() {
        let mesh = make_sphere(2).unwrap();
        let cfg = RasterConfig::with_size(32, 32);
        let centroid = |cam: &Camera| {
            let s = render_silhouette(&mesh, cam, &cfg).unwrap();
            let (mut sx, mut total) = (0.0, 0.0);
            for r in 0..32 {
                for c in 0..32 {
                    sx += c as f64 * s.get(r, c, 0);
                    total += s.get(r, c, 0);
                }
            }
            sx / total
        };
        let cam = Camera { scale: 0.5, ..Camera::default() };
        let delta = 0.25;
        let moved = Camera { translation: [delta, 0.0], ..cam };
        let shift = centroid(&moved) - centroid(&cam);
        assert!((shift - delta * 32.0 / 2.0).abs() < 0.1, "shift {shift}");
    }

    fn fd_raster(mesh: &Mesh, cam: &Camera, attrs_v: &[f64], ch: usize, cfg: &RasterConfig) -> f64 {
        // loss = sum_m a_m sil_m + sum_{m,c} b_{mc} blend_{mc} + sum_s c_s W_s
        let objective = |verts: &[[f64; 3]], cam: &Camera, av: &[f64]| -> (f64, RasterOutput) {
            let m = Mesh { vertices: verts.to_vec(), ..mesh.clone() };
            let out = rasterize(&m, cam, av, ch, cfg).unwrap();
            let mut l = 0.0;
            for (i, s) in out.silhouette.iter().enumerate() {
                l += (0.3 + (i as f64 * 0.37).sin()) * s;
            }
            for (i, b) in out.blend.iter().enumerate() {
                l += (i as f64 * 0.13).cos() * b;
            }
            for s in &out.samples {
                l += 0.2 * ((s.face as f64) + 0.01 * s.pixel as f64).sin() * s.coverage;
            }
            (l, out)
        };
        let (_, out) = objective(&mesh.vertices, cam, attrs_v);
        let gs: Vec<f64> = (0..out.silhouette.len()).map(|i| 0.3 + (i as f64 * 0.37).sin()).collect();
        let gb: Vec<f64> = (0..out.blend.len()).map(|i| (i as f64 * 0.13).cos()).collect();
        let gc: Vec<f64> = out.samples.iter().map(|s| 0.2 * ((s.face as f64) + 0.01 * s.pixel as f64).sin()).collect();
        let proj = project_with_depth(&mesh.vertices, cam);
        let attrs = CornerAttrs::from_vertices(&mesh.faces, attrs_v, ch);
        let g = out.backward(&proj, &mesh.faces, &attrs, cfg, Some(&gs), Some(&gb), Some(&gc));
        let mut vg = vec![[0.0; 3]; mesh.vertices.len()];
        let cg = crate::camera::project_backward(&mesh.vertices, cam, &g.xy, Some(&g.depth), Some(&mut vg));
        let ag = CornerAttrs::fold_to_vertices(&mesh.faces, &g.attrs, ch, mesh.vertices.len());

        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        let mut worst: f64 = 0.0;
        for i in 0..mesh.vertices.len() {
            for d in 0..3 {
                let mut v = mesh.vertices.clone();
                v[i][d] += h;
                let fp = objective(&v, cam, attrs_v).0;
                v[i][d] -= 2.0 * h;
                let fm = objective(&v, cam, attrs_v).0;
                worst = worst.max(rel(vg[i][d], (fp - fm) / (2.0 * h)));
            }
        }
        let p0 = cam.to_params();
        for k in 0..7 {
            let mut p = p0;
            p[k] += h;
            let fp = objective(&mesh.vertices, &Camera::from_params(&p), attrs_v).0;
            p[k] -= 2.0 * h;
            let fm = objective(&mesh.vertices, &Camera::from_params(&p), attrs_v).0;
            worst = worst.max(rel(cg[k], (fp - fm) / (2.0 * h)));
        }
        for i in 0..attrs_v.len() {
            let mut a = attrs_v.to_vec();
            a[i] += h;
            let fp = objective(&mesh.vertices, cam, &a).0;
            a[i] -= 2.0 * h;
            let fm = objective(&mesh.vertices, cam, &a).0;
            worst = worst.max(rel(ag[i], (fp - fm) / (2.0 * h)));
        }
        worst
    }

    #[test]
    fn two_triangle_gradients_match_finite_differences() {
        let mesh = Mesh::new(
            vec![[-0.6, -0.5, 0.1], [0.5, -0.4, -0.2], [0.1, 0.6, 0.3], [0.7, 0.5, 0.0]],
            vec![[0, 1, 2], [1, 3, 2]],
        )
        .unwrap();
        let cam = Camera { scale: 0.9, translation: [0.02, -0.03], rotation: [0.98, 0.05, 0.1, 0.12] };
        let cfg = RasterConfig { sigma: 1e-2, gamma: 0.5, ..RasterConfig::with_size(16, 16) };
        let attrs: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let err = fd_raster(&mesh, &cam, &attrs, 2, &cfg);
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn sphere_gradients_match_finite_differences() {
        let mesh = make_sphere(0).unwrap();
        let cam = Camera { scale: 0.7, translation: [0.05, 0.0], rotation: [0.9, 0.2, 0.3, 0.1] };
        let cfg = RasterConfig { sigma: 3e-3, gamma: 0.05, ..RasterConfig::with_size(16, 16) };
        let attrs: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).cos()).collect();
        let err = fd_raster(&mesh, &cam, &attrs, 1, &cfg);
        assert!(err < 1e-3, "max relative error {err}");
    }
}
