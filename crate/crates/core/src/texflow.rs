//! Texture flow, bilinear sampling and semantic UV maps.

use crate::camera::{project, Camera};
use crate::error::{Error, Result};
use crate::geometry::{Mesh, UVMapping, Vec2};
use crate::grid::{to_pixel_space, uv_to_coord, Image};

/// Per-texel source-image coordinate in `[-1, 1]^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureFlow {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<Vec2>,
}

impl TextureFlow {
    pub fn new(height: usize, width: usize, coords: Vec<Vec2>) -> Result<Self> {
        if coords.len() != height * width {
            return Err(Error::param("flow coordinate count does not match grid"));
        }
        let mut f = TextureFlow { height, width, coords };
        f.clamp();
        Ok(f)
    }

    pub fn clamp(&mut self) {
        for c in &mut self.coords {
            c[0] = c[0].clamp(-1.0, 1.0);
            c[1] = c[1].clamp(-1.0, 1.0);
        }
    }
}

/// Per-pixel part probabilities, `N_p` parts followed by background.
#[derive(Clone, Debug, PartialEq)]
pub struct PartMap {
    pub probs: Image,
}

impl PartMap {
    /// Wraps `probs`, checking that every pixel lies on the simplex.
    pub fn new(probs: Image) -> Result<Self> {
        if probs.channels < 2 {
            return Err(Error::param("part map needs at least one part plus background"));
        }
        for px in probs.data.chunks(probs.channels) {
            let s: f64 = px.iter().sum();
            if (s - 1.0).abs() > 1e-5 || px.iter().any(|&p| !(-1e-12..=1.0 + 1e-12).contains(&p)) {
                return Err(Error::param("part map pixel is not a probability vector"));
            }
        }
        Ok(PartMap { probs })
    }

    /// Clamps negatives and rescales every pixel to sum to one.
    pub fn renormalized(mut probs: Image) -> Result<Self> {
        let c = probs.channels;
        for px in probs.data.chunks_mut(c) {
            px.iter_mut().for_each(|p| *p = p.max(0.0));
            let s: f64 = px.iter().sum();
            if s <= 0.0 {
                px.iter_mut().for_each(|p| *p = 0.0);
                px[c - 1] = 1.0;
            } else {
                px.iter_mut().for_each(|p| *p /= s);
            }
        }
        PartMap::new(probs)
    }

    pub fn n_parts(&self) -> usize {
        self.probs.channels - 1
    }

    /// Argmax over all channels (background included), lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs.data.chunks(self.probs.channels).map(crate::geometry::argmax_lowest).collect()
    }
}

/// Category-level part probabilities over the UV grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalUV {
    pub probs: Image,
    pub sample_count: usize,
}

impl CanonicalUV {
    pub fn parts(&self) -> usize {
        self.probs.channels
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    idx: [usize; 4],
    w: [f64; 4],
    // d(col)/dx and d(row)/dy, zero when clamped
    dcol: f64,
    drow: f64,
    fx: f64,
    fy: f64,
}

fn axis(f: f64, n: usize) -> (usize, usize, f64, bool) {
    let clamped = f < 0.0 || f > (n - 1) as f64;
    let f = f.clamp(0.0, (n - 1) as f64);
    if n == 1 {
        return (0, 0, 0.0, clamped);
    }
    let i0 = (f.floor() as usize).min(n - 2);
    (i0, i0 + 1, f - i0 as f64, clamped)
}

fn tap(image: &Image, p: Vec2) -> Tap {
    let (h, w) = (image.height, image.width);
    let (col, row) = to_pixel_space(p, h, w);
    let (c0, c1, fx, cx) = axis(col, w);
    let (r0, r1, fy, cy) = axis(row, h);
    Tap {
        idx: [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1],
        w: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        dcol: if cx || w == 1 { 0.0 } else { 0.5 * w as f64 },
        drow: if cy || h == 1 { 0.0 } else { -0.5 * h as f64 },
        fx,
        fy,
    }
}

/// Bilinear lookup with border clamping; returns `coords.len() x C` values.
pub fn sample_image(image: &Image, coords: &[Vec2]) -> Result<Vec<f64>> {
    if image.pixels() == 0 || image.channels == 0 {
        return Err(Error::param("cannot sample an empty image"));
    }
    let c = image.channels;
    let mut out = vec![0.0; coords.len() * c];
    for (i, &p) in coords.iter().enumerate() {
        let t = tap(image, p);
        let dst = &mut out[i * c..(i + 1) * c];
        for k in 0..4 {
            if t.w[k] == 0.0 {
                continue;
            }
            let src = &image.data[t.idx[k] * c..(t.idx[k] + 1) * c];
            for ch in 0..c {
                dst[ch] += t.w[k] * src[ch];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`sample_image`]: gradients with respect to the coordinates
/// and, when `image_grad` is given, accumulated into the image values.
pub fn sample_image_backward(
    image: &Image,
    coords: &[Vec2],
    grad_out: &[f64],
    mut image_grad: Option<&mut [f64]>,
) -> Vec<Vec2> {
    let c = image.channels;
    let mut g_coords = vec![[0.0; 2]; coords.len()];
    for (i, &p) in coords.iter().enumerate() {
        let g = &grad_out[i * c..(i + 1) * c];
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let t = tap(image, p);
        let px = |k: usize, ch: usize| image.data[t.idx[k] * c + ch];
        let mut gx = 0.0;
        let mut gy = 0.0;
        for ch in 0..c {
            let (v00, v01, v10, v11) = (px(0, ch), px(1, ch), px(2, ch), px(3, ch));
            let d_fx = (1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10);
            let d_fy = (1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01);
            gx += g[ch] * d_fx;
            gy += g[ch] * d_fy;
        }
        g_coords[i] = [gx * t.dcol, gy * t.drow];
        if let Some(ig) = image_grad.as_deref_mut() {
            for k in 0..4 {
                for ch in 0..c {
                    ig[t.idx[k] * c + ch] += t.w[k] * g[ch];
                }
            }
        }
    }
    g_coords
}

/// Part probabilities pulled into UV space through the flow, background dropped.
pub fn semantic_uv(flow: &TextureFlow, parts: &PartMap) -> Result<Image> {
    let np = parts.n_parts();
    let full = sample_image(&parts.probs, &flow.coords)?;
    let c = parts.probs.channels;
    let mut data = Vec::with_capacity(flow.coords.len() * np);
    for px in full.chunks(c) {
        data.extend_from_slice(&px[..np]);
    }
    Image::from_vec(flow.height, flow.width, np, data)
}

/// Elementwise mean of semantic UV maps.
pub fn aggregate_canonical(maps: &[Image]) -> Result<CanonicalUV> {
    let first = maps.first().ok_or_else(|| Error::param("no semantic uv maps to aggregate"))?;
    if maps.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::param("semantic uv maps differ in shape"));
    }
    let n = maps.len() as f64;
    let mut data = vec![0.0; first.data.len()];
    for m in maps {
        for (d, v) in data.iter_mut().zip(&m.data) {
            *d += v;
        }
    }
    data.iter_mut().for_each(|d| *d /= n);
    Ok(CanonicalUV {
        probs: Image { height: first.height, width: first.width, channels: first.channels, data },
        sample_count: maps.len(),
    })
}

/// Flow whose every texel points at the projection of its own surface point.
pub fn init_flow_from_projection(mesh: &Mesh, cam: &Camera, mapping: &UVMapping) -> Result<TextureFlow> {
    if mapping.entries.iter().any(|e| e.face >= mesh.faces.len()) {
        return Err(Error::param("uv mapping references faces missing from the mesh"));
    }
    let pts = mapping.surface_points(mesh);
    TextureFlow::new(mapping.height, mapping.width, project(&pts, cam))
}

/// Canonical part probabilities at every vertex (`V x N_p`), averaging the
/// samples taken at each of the vertex's UV copies.
pub fn sample_canonical_at_vertices(mesh: &Mesh, canonical: &CanonicalUV) -> Result<Vec<f64>> {
    if !mesh.has_uv() {
        return Err(Error::param("mesh has no uv coordinates"));
    }
    let np = canonical.parts();
    let coords: Vec<Vec2> = mesh.uvs.iter().map(|&t| uv_to_coord(t)).collect();
    let per_uv = sample_image(&canonical.probs, &coords)?;
    let mut out = vec![0.0; mesh.vertices.len() * np];
    for (v, copies) in mesh.vertex_uv_indices().iter().enumerate() {
        if copies.is_empty() {
            continue;
        }
        let inv = 1.0 / copies.len() as f64;
        for &t in copies {
            for k in 0..np {
                out[v * np + k] += inv * per_uv[t * np + k];
            }
        }
    }
    Ok(out)
}
