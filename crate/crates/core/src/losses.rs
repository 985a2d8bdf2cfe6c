//! Loss terms and their gradients.
//!
//! The individual terms are plain functions over images, point sets and
//! raster outputs. [`total_loss`] and [`total_loss_grad`] tie them to one fit
//! state (deformation, camera, texture flow) and produce the weighted sum
//! together with its gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{project, project_backward, project_with_depth, Camera, CAMERA_PARAMS};
use crate::error::{Error, Result};
use crate::geometry::{Adjacency, Mesh, UVMapping, Vec2, Vec3};
use crate::grid::{pixel_center, uv_to_coord, Image};
use crate::softras::{rasterize_projected, CornerAttrs, RasterConfig, RasterOutput};
use crate::texflow::{sample_canonical_at_vertices, sample_image, sample_image_backward, CanonicalUV, PartMap, TextureFlow};

/// Default cap on the number of pixels drawn per part for the vertex term.
pub const SAMPLES_PER_PART: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_iou: f64,
    pub w_img: f64,
    pub w_sp: f64,
    pub w_sv: f64,
    pub w_tcyc: f64,
    pub w_lap: f64,
    pub w_edge: f64,
    /// Mean squared vertex offset from the template.
    pub w_def: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_iou: 1.0, w_img: 1.0, w_sp: 1.0, w_sv: 0.1, w_tcyc: 0.5, w_lap: 0.1, w_edge: 0.1, w_def: 1.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { w_iou: 0.0, w_img: 0.0, w_sp: 0.0, w_sv: 0.0, w_tcyc: 0.0, w_lap: 0.0, w_edge: 0.0, w_def: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::param(format!("loss weight {name} must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("iou", self.w_iou),
            ("img", self.w_img),
            ("sp", self.w_sp),
            ("sv", self.w_sv),
            ("tcyc", self.w_tcyc),
            ("lap", self.w_lap),
            ("edge", self.w_edge),
            ("def", self.w_def),
        ]
    }
}

/// Per-term values and the weighted total. Skipped terms report 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iou: f64,
    pub img: f64,
    pub sp: f64,
    pub sv: f64,
    pub tcyc: f64,
    pub lap: f64,
    pub edge: f64,
    pub def: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("iou", self.iou),
            ("img", self.img),
            ("sp", self.sp),
            ("sv", self.sv),
            ("tcyc", self.tcyc),
            ("lap", self.lap),
            ("edge", self.edge),
            ("def", self.def),
        ]
    }

    /// `sum_i w_i * term_i`.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.terms().iter().zip(w.named()).map(|((_, t), (_, wi))| if wi == 0.0 { 0.0 } else { wi * t }).sum()
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

// ---------------------------------------------------------------- silhouette

/// Soft negative IoU `-sum(r g) / sum(r + g - r g)`; 0 when both are empty.
pub fn neg_iou(rendered: &[f64], gt: &[f64]) -> Result<f64> {
    Ok(neg_iou_grad(rendered, gt, false)?.0)
}

pub(crate) fn neg_iou_grad(rendered: &[f64], gt: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
    if rendered.len() != gt.len() {
        return Err(Error::param("neg_iou inputs differ in size"));
    }
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&r, &g) in rendered.iter().zip(gt) {
        inter += r * g;
        union += r + g - r * g;
    }
    if union <= 0.0 {
        return Ok((0.0, if want_grad { vec![0.0; gt.len()] } else { Vec::new() }));
    }
    let value = -inter / union;
    let grad = if want_grad {
        // d/dr of -I/U = -(g U - I (1 - g)) / U^2
        rendered
            .iter()
            .zip(gt)
            .map(|(_, &g)| -(g * union - inter * (1.0 - g)) / (union * union))
            .collect()
    } else {
        Vec::new()
    };
    Ok((value, grad))
}

// ---------------------------------------------------------------- image

const IMAGE_SCALES: [usize; 3] = [1, 2, 4];

/// Masked mean squared error averaged over scales 1, 1/2 and 1/4.
///
/// At each scale the residual is average-pooled over the foreground pixels of
/// every block and the blocks are weighted by their foreground count, so a
/// constant residual `c` gives `c^2` at every scale.
pub fn image_loss(rendered: &Image, target: &Image, mask: &[f64]) -> Result<f64> {
    Ok(image_loss_grad(rendered, target, mask, false)?.0)
}

pub(crate) fn image_loss_grad(rendered: &Image, target: &Image, mask: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
    if !rendered.same_shape(target) || mask.len() != rendered.pixels() {
        return Err(Error::param("image loss inputs differ in shape"));
    }
    let (h, w, c) = (rendered.height, rendered.width, rendered.channels);
    let mut grad = if want_grad { vec![0.0; rendered.data.len()] } else { Vec::new() };
    let count: f64 = mask.iter().sum();
    if count <= 0.0 || c == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    let mut pooled = vec![0.0; c];
    for s in IMAGE_SCALES {
        let mut acc = 0.0;
        for br in (0..h).step_by(s) {
            for bc in (0..w).step_by(s) {
                let rows = br..(br + s).min(h);
                let cols = bc..(bc + s).min(w);
                let mut n = 0.0;
                pooled.iter_mut().for_each(|p| *p = 0.0);
                for r in rows.clone() {
                    for col in cols.clone() {
                        let m = r * w + col;
                        let wt = mask[m];
                        if wt == 0.0 {
                            continue;
                        }
                        n += wt;
                        for ch in 0..c {
                            pooled[ch] += wt * (rendered.data[m * c + ch] - target.data[m * c + ch]);
                        }
                    }
                }
                if n == 0.0 {
                    continue;
                }
                pooled.iter_mut().for_each(|p| *p /= n);
                acc += n * pooled.iter().map(|p| p * p).sum::<f64>();
                if want_grad {
                    let k = 2.0 / (c as f64 * count * IMAGE_SCALES.len() as f64);
                    for r in rows.clone() {
                        for col in cols.clone() {
                            let m = r * w + col;
                            for ch in 0..c {
                                grad[m * c + ch] += k * mask[m] * pooled[ch];
                            }
                        }
                    }
                }
            }
        }
        total += acc / (c as f64 * count);
    }
    Ok((total / IMAGE_SCALES.len() as f64, grad))
}

// ---------------------------------------------------------------- semantic

/// Mean squared difference between the part channels of `parts` (background
/// excluded) and `rendered` (`H x W x N_p`).
pub fn semantic_prob_loss(parts: &PartMap, rendered: &Image) -> Result<f64> {
    Ok(semantic_prob_loss_grad(parts, rendered, false)?.0)
}

pub(crate) fn semantic_prob_loss_grad(parts: &PartMap, rendered: &Image, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let np = parts.n_parts();
    let pc = parts.probs.channels;
    if rendered.channels != np || rendered.height != parts.probs.height || rendered.width != parts.probs.width {
        return Err(Error::param("rendered part map does not match the part map"));
    }
    let n = (rendered.pixels() * np) as f64;
    let mut sum = 0.0;
    let mut grad = if want_grad { vec![0.0; rendered.data.len()] } else { Vec::new() };
    for m in 0..rendered.pixels() {
        for k in 0..np {
            let d = rendered.data[m * np + k] - parts.probs.data[m * pc + k];
            sum += d * d;
            if want_grad {
                grad[m * np + k] = 2.0 * d / n;
            }
        }
    }
    Ok((sum / n, grad))
}

/// Symmetric Chamfer distance with squared distances and per-direction means.
/// Returns the value and the gradient with respect to `x`. Nearest-neighbour
/// ties go to the lowest index.
pub fn chamfer(x: &[Vec2], y: &[Vec2]) -> (f64, Vec<Vec2>) {
    let mut grad = vec![[0.0; 2]; x.len()];
    if x.is_empty() || y.is_empty() {
        return (0.0, grad);
    }
    let d2 = |a: Vec2, b: Vec2| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let nearest = |p: Vec2, set: &[Vec2]| {
        let mut best = (0, f64::INFINITY);
        for (i, &q) in set.iter().enumerate() {
            let d = d2(p, q);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    };
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let mut fwd = 0.0;
    for (i, &p) in x.iter().enumerate() {
        let (j, d) = nearest(p, y);
        fwd += d;
        grad[i][0] += 2.0 * (p[0] - y[j][0]) / nx;
        grad[i][1] += 2.0 * (p[1] - y[j][1]) / nx;
    }
    let mut bwd = 0.0;
    for &q in y {
        let (i, d) = nearest(q, x);
        bwd += d;
        grad[i][0] += 2.0 * (x[i][0] - q[0]) / ny;
        grad[i][1] += 2.0 * (x[i][1] - q[1]) / ny;
    }
    (fwd / nx + bwd / ny, grad)
}

/// Pixel centers whose argmax over all channels is part `p`, for every part,
/// each subsampled without replacement to at most `samples_per_part` points.
pub fn part_points(parts: &PartMap, samples_per_part: usize, seed: u64) -> Vec<Vec<Vec2>> {
    let (h, w) = (parts.probs.height, parts.probs.width);
    let labels = parts.argmax();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..parts.n_parts())
        .map(|p| {
            let pix: Vec<usize> = (0..labels.len()).filter(|&m| labels[m] == p).collect();
            let chosen: Vec<usize> = if pix.len() > samples_per_part {
                let mut idx = sample(&mut rng, pix.len(), samples_per_part).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| pix[i]).collect()
            } else {
                pix
            };
            chosen.into_iter().map(|m| pixel_center(m / w, m % w, h, w)).collect()
        })
        .collect()
}

/// Per part, `Chamfer(project(V_p), Y_p) / |V_p|`, summed over parts that have
/// both vertices and pixels.
pub fn semantic_vertex_loss(
    template: &Mesh,
    labels: &[usize],
    cam: &Camera,
    parts: &PartMap,
    samples_per_part: usize,
    seed: u64,
) -> Result<f64> {
    let targets = part_points(parts, samples_per_part, seed);
    Ok(semantic_vertex_terms(&template.vertices, labels, cam, &targets, false)?.0)
}

/// Vertex term against precomputed part points. Gradients are with respect to
/// the raw camera parameters and the vertices.
pub(crate) fn semantic_vertex_terms(
    vertices: &[Vec3],
    labels: &[usize],
    cam: &Camera,
    targets: &[Vec<Vec2>],
    want_grad: bool,
) -> Result<(f64, [f64; CAMERA_PARAMS], Vec<Vec3>)> {
    if labels.len() != vertices.len() {
        return Err(Error::param("vertex label count does not match the template"));
    }
    let xy = project(vertices, cam);
    let mut value = 0.0;
    let mut g_xy = vec![[0.0; 2]; vertices.len()];
    for (p, y) in targets.iter().enumerate() {
        let members: Vec<usize> = (0..labels.len()).filter(|&v| labels[v] == p).collect();
        if members.is_empty() || y.is_empty() {
            continue;
        }
        let x: Vec<Vec2> = members.iter().map(|&v| xy[v]).collect();
        let (d, g) = chamfer(&x, y);
        let inv = 1.0 / members.len() as f64;
        value += d * inv;
        for (k, &v) in members.iter().enumerate() {
            g_xy[v][0] += g[k][0] * inv;
            g_xy[v][1] += g[k][1] * inv;
        }
    }
    if !want_grad {
        return Ok((value, [0.0; CAMERA_PARAMS], Vec::new()));
    }
    let mut g_v = vec![[0.0; 3]; vertices.len()];
    let g_cam = project_backward(vertices, cam, &g_xy, None, Some(&mut g_v));
    Ok((value, g_cam, g_v))
}

// ---------------------------------------------------------------- cycle

/// Mean source coordinate of the texels assigned to each face; `None` for
/// faces that received no texel.
pub fn flow_face_centers(flow: &TextureFlow, texels_per_face: &[Vec<usize>]) -> Vec<Option<Vec2>> {
    texels_per_face
        .iter()
        .map(|t| {
            if t.is_empty() {
                return None;
            }
            let mut c = [0.0; 2];
            for &i in t {
                c[0] += flow.coords[i][0];
                c[1] += flow.coords[i][1];
            }
            Some([c[0] / t.len() as f64, c[1] / t.len() as f64])
        })
        .collect()
}

/// Coverage-weighted centroid of pixel centers for each face.
pub fn raster_face_centers(raster: &RasterOutput) -> Vec<Option<Vec2>> {
    (0..raster.n_faces())
        .map(|j| {
            let mut s = 0.0;
            let mut c = [0.0; 2];
            for (m, wgt) in raster.face_probs(j) {
                let p = pixel_center(m / raster.width, m % raster.width, raster.height, raster.width);
                s += wgt;
                c[0] += wgt * p[0];
                c[1] += wgt * p[1];
            }
            (s >= 1e-8).then(|| [c[0] / s, c[1] / s])
        })
        .collect()
}

/// Texture-cycle term: mean over faces of `|C_in - C_out|^2`, where `C_in` is
/// the mean flow coordinate of the face's texels and `C_out` the
/// coverage-weighted centroid of its pixels. `faces` restricts the mean to a
/// subset; faces missing either center are skipped.
pub fn texture_cycle_loss(
    flow: &TextureFlow,
    mapping: &UVMapping,
    raster: &RasterOutput,
    faces: Option<&[usize]>,
) -> Result<f64> {
    if flow.height != mapping.height || flow.width != mapping.width {
        return Err(Error::param("flow and uv mapping grids differ"));
    }
    let tpf = mapping.texels_per_face(raster.n_faces());
    Ok(cycle_terms(flow, &tpf, raster, faces, false).0)
}

/// Value, flow-coordinate gradient and per-sample coverage gradient.
pub(crate) fn cycle_terms(
    flow: &TextureFlow,
    texels_per_face: &[Vec<usize>],
    raster: &RasterOutput,
    faces: Option<&[usize]>,
    want_grad: bool,
) -> (f64, Vec<Vec2>, Vec<f64>) {
    let c_in = flow_face_centers(flow, texels_per_face);
    let c_out = raster_face_centers(raster);
    let all: Vec<usize>;
    let faces = match faces {
        Some(f) => f,
        None => {
            all = (0..raster.n_faces()).collect();
            &all
        }
    };
    let valid: Vec<usize> = faces.iter().copied().filter(|&j| c_in[j].is_some() && c_out[j].is_some()).collect();
    let mut g_flow = if want_grad { vec![[0.0; 2]; flow.coords.len()] } else { Vec::new() };
    let mut g_cov = if want_grad { vec![0.0; raster.samples.len()] } else { Vec::new() };
    if valid.is_empty() {
        return (0.0, g_flow, g_cov);
    }
    let inv = 1.0 / valid.len() as f64;
    let mut value = 0.0;
    for &j in &valid {
        let (a, b) = (c_in[j].unwrap(), c_out[j].unwrap());
        let d = [a[0] - b[0], a[1] - b[1]];
        value += (d[0] * d[0] + d[1] * d[1]) * inv;
        if !want_grad {
            continue;
        }
        let t = &texels_per_face[j];
        let k = 2.0 * inv / t.len() as f64;
        for &i in t {
            g_flow[i][0] += k * d[0];
            g_flow[i][1] += k * d[1];
        }
        // C_out = sum w p / sum w  =>  dC_out/dw_m = (p_m - C_out) / sum w
        let range = raster.face_offsets[j]..raster.face_offsets[j + 1];
        let s: f64 = raster.samples[range.clone()].iter().map(|x| x.coverage).sum();
        for si in range {
            let m = raster.samples[si].pixel as usize;
            let p = pixel_center(m / raster.width, m % raster.width, raster.height, raster.width);
            g_cov[si] += -2.0 * inv * (d[0] * (p[0] - b[0]) + d[1] * (p[1] - b[1])) / s;
        }
    }
    (value, g_flow, g_cov)
}

// ---------------------------------------------------------------- objective

/// `mean |d|^2` over vertices; adds `scale` times its gradient into `grad`.
pub fn deformation_energy(deform: &[Vec3], grad: Option<&mut [Vec3]>, scale: f64) -> f64 {
    let n = deform.len().max(1) as f64;
    if let Some(g) = grad {
        for (g, d) in g.iter_mut().zip(deform) {
            for k in 0..3 {
                g[k] += scale * 2.0 * d[k] / n;
            }
        }
    }
    deform.iter().map(|d| d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sum::<f64>() / n
}

/// Everything held fixed while one instance is fitted.
#[derive(Clone, Debug)]
pub struct FitContext {
    pub template: Mesh,
    pub mapping: UVMapping,
    pub texels_per_face: Vec<Vec<usize>>,
    pub adjacency: Adjacency,
    /// Per-vertex canonical part probabilities, `V x N_p`; empty before the
    /// first canonical map exists.
    pub vertex_parts: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_parts: usize,
    pub raster: RasterConfig,
    pub weights: LossWeights,
    /// Restricts the cycle term to these faces when set.
    pub cycle_faces: Option<Vec<usize>>,
}

impl FitContext {
    pub fn new(
        template: Mesh,
        mapping: UVMapping,
        canonical: Option<&CanonicalUV>,
        labels: Vec<usize>,
        raster: RasterConfig,
        weights: LossWeights,
    ) -> Result<Self> {
        template.validate()?;
        if !template.has_uv() {
            return Err(Error::param("template has no uv coordinates"));
        }
        if mapping.entries.iter().any(|e| e.face >= template.faces.len()) {
            return Err(Error::param("uv mapping references faces missing from the template"));
        }
        weights.validate()?;
        raster.validate()?;
        let (vertex_parts, n_parts) = match canonical {
            Some(c) => (sample_canonical_at_vertices(&template, c)?, c.parts()),
            None => (Vec::new(), 0),
        };
        if !labels.is_empty() && labels.len() != template.vertices.len() {
            return Err(Error::param("vertex label count does not match the template"));
        }
        Ok(FitContext {
            texels_per_face: mapping.texels_per_face(template.faces.len()),
            adjacency: Adjacency::new(&template),
            template,
            mapping,
            vertex_parts,
            labels,
            n_parts,
            raster,
            weights,
            cycle_faces: None,
        })
    }
}

/// One observed instance.
#[derive(Clone, Debug)]
pub struct Observation {
    /// `H x W x 3` colors.
    pub image: Image,
    /// `H x W` binary foreground.
    pub mask: Vec<f64>,
    pub parts: PartMap,
    /// Pixel samples per part for the vertex term.
    pub part_points: Vec<Vec<Vec2>>,
}

impl Observation {
    pub fn new(image: Image, mask: Vec<f64>, parts: PartMap, seed: u64) -> Result<Self> {
        if image.channels != 3 {
            return Err(Error::param("observation image must have 3 channels"));
        }
        if mask.len() != image.pixels()
            || parts.probs.height != image.height
            || parts.probs.width != image.width
        {
            return Err(Error::param("image, mask and part map sizes differ"));
        }
        let part_points = part_points(&parts, SAMPLES_PER_PART, seed);
        Ok(Observation { image, mask, parts, part_points })
    }
}

/// Per-instance unknowns.
#[derive(Clone, Debug, PartialEq)]
pub struct FitState {
    pub deform: Vec<Vec3>,
    pub camera: Camera,
    pub flow: TextureFlow,
}

/// Gradient with respect to every part of a [`FitState`].
#[derive(Clone, Debug, PartialEq)]
pub struct FitGrad {
    pub deform: Vec<Vec3>,
    pub camera: [f64; CAMERA_PARAMS],
    pub flow: Vec<Vec2>,
}

impl FitGrad {
    fn zeros(n_vertices: usize, n_texels: usize) -> Self {
        FitGrad { deform: vec![[0.0; 3]; n_vertices], camera: [0.0; CAMERA_PARAMS], flow: vec![[0.0; 2]; n_texels] }
    }
}

/// Weighted loss of `state` against `obs`.
pub fn total_loss(ctx: &FitContext, obs: &Observation, state: &FitState) -> Result<LossReport> {
    Ok(evaluate(ctx, obs, state, false)?.0)
}

/// Weighted loss and its gradient.
pub fn total_loss_grad(ctx: &FitContext, obs: &Observation, state: &FitState) -> Result<(LossReport, FitGrad)> {
    let (r, g) = evaluate(ctx, obs, state, true)?;
    Ok((r, g.expect("gradient requested")))
}

/// Renders the composited rgb image of `state`: the source image pulled into
/// uv space through the flow, then looked up at each pixel's blended uv.
pub fn render_rgb(ctx: &FitContext, obs: &Observation, state: &FitState) -> Result<Image> {
    let vertices = deformed(&ctx.template, &state.deform)?;
    let proj = project_with_depth(&vertices, &state.camera);
    let attrs = CornerAttrs::from_uv(&ctx.template);
    let out = rasterize_projected(&proj, &ctx.template.faces, &attrs, &ctx.raster)?;
    let (rgb, _, _) = texture_lookup(obs, state, &out);
    let mut img = rgb;
    for m in 0..img.pixels() {
        let s = out.silhouette[m];
        for ch in 0..3 {
            img.data[m * 3 + ch] *= s;
        }
    }
    Ok(img)
}

fn deformed(template: &Mesh, deform: &[Vec3]) -> Result<Vec<Vec3>> {
    if deform.len() != template.vertices.len() {
        return Err(Error::param("deformation length does not match the template"));
    }
    Ok(template.vertices.iter().zip(deform).map(|(v, d)| [v[0] + d[0], v[1] + d[1], v[2] + d[2]]).collect())
}

/// Per-pixel rgb from the uv channels (first two) of `out.blend`, plus the
/// texture and the pixel sampling coordinates needed by the adjoint.
fn texture_lookup(obs: &Observation, state: &FitState, out: &RasterOutput) -> (Image, Image, Vec<Vec2>) {
    let flow = &state.flow;
    let tex_data = sample_image(&obs.image, &flow.coords).expect("observation image is non-empty");
    let texture = Image { height: flow.height, width: flow.width, channels: 3, data: tex_data };
    let c = out.channels;
    let coords: Vec<Vec2> = (0..out.height * out.width)
        .map(|m| uv_to_coord([out.blend[m * c], out.blend[m * c + 1]]))
        .collect();
    let rgb = sample_image(&texture, &coords).expect("texture is non-empty");
    (Image { height: out.height, width: out.width, channels: 3, data: rgb }, texture, coords)
}

fn evaluate(
    ctx: &FitContext,
    obs: &Observation,
    state: &FitState,
    want_grad: bool,
) -> Result<(LossReport, Option<FitGrad>)> {
    let w = &ctx.weights;
    let mesh = &ctx.template;
    let nv = mesh.vertices.len();
    if state.flow.height != ctx.mapping.height || state.flow.width != ctx.mapping.width {
        return Err(Error::param("flow grid does not match the uv mapping"));
    }
    if obs.image.height != ctx.raster.height || obs.image.width != ctx.raster.width {
        return Err(Error::param("observation size does not match the raster size"));
    }
    let use_sp = w.w_sp > 0.0 && ctx.n_parts > 0;
    let use_sv = w.w_sv > 0.0 && !ctx.labels.is_empty();
    if use_sp && ctx.n_parts != obs.parts.n_parts() {
        return Err(Error::param("canonical map and part map disagree on the part count"));
    }
    let vertices = deformed(mesh, &state.deform)?;
    let mut report = LossReport::default();
    let mut grad = want_grad.then(|| FitGrad::zeros(nv, state.flow.coords.len()));

    let mut g_v = vec![[0.0; 3]; nv];
    if w.w_lap > 0.0 {
        report.lap = ctx.adjacency.laplacian(&vertices, want_grad.then_some(&mut g_v[..]));
        g_v.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= w.w_lap));
    }
    if w.w_edge > 0.0 {
        let mut ge = vec![[0.0; 3]; nv];
        report.edge = ctx.adjacency.edge_energy(&vertices, want_grad.then_some(&mut ge[..]));
        for (a, b) in g_v.iter_mut().zip(&ge) {
            for k in 0..3 {
                a[k] += w.w_edge * b[k];
            }
        }
    }

    if w.w_def > 0.0 {
        report.def = deformation_energy(&state.deform, want_grad.then_some(&mut g_v[..]), w.w_def);
    }

    if use_sv {
        let (v, gc, gtv) = semantic_vertex_terms(&mesh.vertices, &ctx.labels, &state.camera, &obs.part_points, want_grad)?;
        report.sv = v;
        if let Some(g) = grad.as_mut() {
            // the vertex term sees the template, so only the camera moves it
            let _ = gtv;
            for k in 0..CAMERA_PARAMS {
                g.camera[k] += w.w_sv * gc[k];
            }
        }
    }

    let use_img = w.w_img > 0.0;
    let use_raster = w.w_iou > 0.0 || use_img || use_sp || w.w_tcyc > 0.0;
    if use_raster {
        let proj = project_with_depth(&vertices, &state.camera);
        let mut attrs = CornerAttrs::empty(mesh.faces.len());
        if use_img {
            attrs = attrs.concat(&CornerAttrs::from_uv(mesh));
        }
        let part_base = attrs.channels;
        if use_sp {
            attrs = attrs.concat(&CornerAttrs::from_vertices(&mesh.faces, &ctx.vertex_parts, ctx.n_parts));
        }
        let out = rasterize_projected(&proj, &mesh.faces, &attrs, &ctx.raster)?;
        let npix = out.height * out.width;
        let c = out.channels;
        let mut g_sil = vec![0.0; npix];
        let mut g_blend = vec![0.0; npix * c];
        let mut g_cov: Option<Vec<f64>> = None;

        if w.w_iou > 0.0 {
            let (v, g) = neg_iou_grad(&out.silhouette, &obs.mask, want_grad)?;
            report.iou = v;
            if want_grad {
                g_sil.iter_mut().zip(&g).for_each(|(a, b)| *a += w.w_iou * b);
            }
        }

        if use_img {
            let (rgb, texture, coords) = texture_lookup(obs, state, &out);
            let (v, g_rgb) = image_loss_grad(&rgb, &obs.image, &obs.mask, want_grad)?;
            report.img = v;
            if let Some(g) = grad.as_mut() {
                let g_rgb: Vec<f64> = g_rgb.iter().map(|x| x * w.w_img).collect();
                let mut g_tex = vec![0.0; texture.data.len()];
                let g_coords = sample_image_backward(&texture, &coords, &g_rgb, Some(&mut g_tex));
                for m in 0..npix {
                    // coord = 2 uv - 1
                    g_blend[m * c] += 2.0 * g_coords[m][0];
                    g_blend[m * c + 1] += 2.0 * g_coords[m][1];
                }
                let g_flow = sample_image_backward(&obs.image, &state.flow.coords, &g_tex, None);
                for (a, b) in g.flow.iter_mut().zip(&g_flow) {
                    a[0] += b[0];
                    a[1] += b[1];
                }
            }
        }

        if use_sp {
            let np = ctx.n_parts;
            let mut rendered = Image::zeros(out.height, out.width, np);
            for m in 0..npix {
                let s = out.silhouette[m];
                for k in 0..np {
                    rendered.data[m * np + k] = s * out.blend[m * c + part_base + k];
                }
            }
            let (v, g) = semantic_prob_loss_grad(&obs.parts, &rendered, want_grad)?;
            report.sp = v;
            if want_grad {
                for m in 0..npix {
                    let s = out.silhouette[m];
                    for k in 0..np {
                        let gk = w.w_sp * g[m * np + k];
                        g_sil[m] += gk * out.blend[m * c + part_base + k];
                        g_blend[m * c + part_base + k] += gk * s;
                    }
                }
            }
        }

        if w.w_tcyc > 0.0 {
            let (v, g_flow, gc) =
                cycle_terms(&state.flow, &ctx.texels_per_face, &out, ctx.cycle_faces.as_deref(), want_grad);
            report.tcyc = v;
            if let Some(g) = grad.as_mut() {
                for (a, b) in g.flow.iter_mut().zip(&g_flow) {
                    a[0] += w.w_tcyc * b[0];
                    a[1] += w.w_tcyc * b[1];
                }
                g_cov = Some(gc.iter().map(|x| x * w.w_tcyc).collect());
            }
        }

        if let Some(g) = grad.as_mut() {
            let rg = out.backward(
                &proj,
                &mesh.faces,
                &attrs,
                &ctx.raster,
                Some(&g_sil),
                (c > 0).then_some(&g_blend[..]),
                g_cov.as_deref(),
            );
            let gc = project_backward(&vertices, &state.camera, &rg.xy, Some(&rg.depth), Some(&mut g_v));
            for k in 0..CAMERA_PARAMS {
                g.camera[k] += gc[k];
            }
        }
    }

    report.total = report.weighted_sum(w);
    if let Some(term) = report.non_finite() {
        return Err(Error::numerical(format!("loss term {term} is not finite")));
    }
    if !report.total.is_finite() {
        return Err(Error::numerical("total loss is not finite"));
    }
    if let Some(g) = grad.as_mut() {
        g.deform = g_v;
    }
    Ok((report, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_uv_mapping, make_sphere};
    use crate::texflow::init_flow_from_projection;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn neg_iou_cases() {
        let g = [1.0, 1.0, 0.0, 0.0, 1.0];
        assert_eq!(neg_iou(&g, &g).unwrap(), -1.0);
        assert_eq!(neg_iou(&[0.0, 0.0, 1.0, 1.0, 0.0], &g).unwrap(), 0.0);
        assert_eq!(neg_iou(&[0.0; 5], &[0.0; 5]).unwrap(), 0.0);
        let half: Vec<f64> = g.iter().map(|x| 0.5 * x).collect();
        assert!((neg_iou(&half, &g).unwrap() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn neg_iou_grad_matches_differences() {
        let mut r = rng(3);
        let x: Vec<f64> = (0..12).map(|_| r.random::<f64>()).collect();
        let g: Vec<f64> = (0..12).map(|_| if r.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let (_, grad) = neg_iou_grad(&x, &g, true).unwrap();
        for i in 0..12 {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (neg_iou(&a, &g).unwrap() - neg_iou(&b, &g).unwrap()) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn image_loss_cases() {
        let a = Image::filled(8, 8, 3, 0.2);
        let mask = vec![1.0; 64];
        assert_eq!(image_loss(&a, &a, &mask).unwrap(), 0.0);
        let b = Image::filled(8, 8, 3, 0.5);
        assert!((image_loss(&a, &b, &mask).unwrap() - 0.09).abs() < 1e-12);
        assert_eq!(image_loss(&a, &b, &[0.0; 64]).unwrap(), 0.0);
    }

    #[test]
    fn checkerboard_full_scale_error_is_one() {
        let mut a = Image::zeros(8, 8, 3);
        let mut b = Image::zeros(8, 8, 3);
        for r in 0..8 {
            for c in 0..8 {
                let v = ((r + c) % 2) as f64;
                for ch in 0..3 {
                    a.set(r, c, ch, v);
                    b.set(r, c, ch, 1.0 - v);
                }
            }
        }
        let mask = vec![1.0; 64];
        let (v, _) = image_loss_grad(&a, &b, &mask, false).unwrap();
        // full scale contributes 1, the pooled scales cancel to 0
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn image_loss_grad_matches_differences() {
        let mut r = rng(5);
        let mut a = Image::zeros(7, 5, 3);
        let mut b = Image::zeros(7, 5, 3);
        a.data.iter_mut().for_each(|x| *x = r.random());
        b.data.iter_mut().for_each(|x| *x = r.random());
        let mask: Vec<f64> = (0..35).map(|_| if r.random::<f64>() < 0.6 { 1.0 } else { 0.0 }).collect();
        let (_, g) = image_loss_grad(&a, &b, &mask, true).unwrap();
        for i in 0..a.data.len() {
            let mut p = a.clone();
            let mut q = a.clone();
            p.data[i] += 1e-6;
            q.data[i] -= 1e-6;
            let fd = (image_loss(&p, &b, &mask).unwrap() - image_loss(&q, &b, &mask).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8, "{i}: {fd} vs {}", g[i]);
        }
    }

    fn part_map(h: usize, w: usize, np: usize, seed: u64) -> PartMap {
        let mut r = rng(seed);
        let mut img = Image::zeros(h, w, np + 1);
        img.data.iter_mut().for_each(|x| *x = r.random::<f64>() + 0.01);
        PartMap::renormalized(img).unwrap()
    }

    #[test]
    fn semantic_prob_loss_cases() {
        let parts = part_map(4, 4, 4, 1);
        let mut rendered = Image::zeros(4, 4, 4);
        for m in 0..16 {
            for k in 0..4 {
                rendered.data[m * 4 + k] = parts.probs.data[m * 5 + k];
            }
        }
        assert_eq!(semantic_prob_loss(&parts, &rendered).unwrap(), 0.0);
        for m in 0..16 {
            rendered.data[m * 4 + 2] += 0.1;
        }
        assert!((semantic_prob_loss(&parts, &rendered).unwrap() - 0.0025).abs() < 1e-12);
    }

    #[test]
    fn semantic_prob_loss_matches_elementwise_oracle() {
        let parts = part_map(5, 3, 3, 2);
        let mut r = rng(9);
        let mut rendered = Image::zeros(5, 3, 3);
        rendered.data.iter_mut().for_each(|x| *x = r.random());
        let mut s = 0.0;
        for m in 0..15 {
            for k in 0..3 {
                s += (rendered.get(m / 3, m % 3, k) - parts.probs.get(m / 3, m % 3, k)).powi(2);
            }
        }
        assert!((semantic_prob_loss(&parts, &rendered).unwrap() - s / 45.0).abs() < 1e-15);
    }

    #[test]
    fn chamfer_one_point() {
        let (v, _) = chamfer(&[[0.0, 0.0]], &[[0.3, 0.4]]);
        assert!((v - 0.5).abs() < 1e-15);
        let pts = [[0.1, 0.2], [0.5, -0.3]];
        assert_eq!(chamfer(&pts, &pts).0, 0.0);
    }

    #[test]
    fn chamfer_grad_matches_differences() {
        let mut r = rng(4);
        let x: Vec<Vec2> = (0..9).map(|_| [r.random(), r.random()]).collect();
        let y: Vec<Vec2> = (0..13).map(|_| [r.random(), r.random()]).collect();
        let (_, g) = chamfer(&x, &y);
        for i in 0..9 {
            for k in 0..2 {
                let mut a = x.clone();
                let mut b = x.clone();
                a[i][k] += 1e-7;
                b[i][k] -= 1e-7;
                let fd = (chamfer(&a, &y).0 - chamfer(&b, &y).0) / 2e-7;
                assert!((fd - g[i][k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn part_points_respect_cap_and_labels() {
        let parts = part_map(20, 20, 3, 7);
        let pts = part_points(&parts, 10, 1);
        let labels = parts.argmax();
        for (p, set) in pts.iter().enumerate() {
            assert!(set.len() <= 10);
            for q in set {
                let (col, row) = crate::grid::to_pixel_space(*q, 20, 20);
                let m = row.round() as usize * 20 + col.round() as usize;
                assert_eq!(labels[m], p);
            }
        }
        assert_eq!(pts, part_points(&parts, 10, 1));
    }

    #[test]
    fn cycle_single_face_case() {
        // triangle whose pixel centroid is (0.6, 0.8) and whose single texel points at the origin
        let tri = Mesh::with_uvs(
            vec![[0.45, 0.75, 0.0], [0.75, 0.75, 0.0], [0.6, 0.9, 0.0]],
            vec![[0, 1, 2]],
            vec![[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let mapping = UVMapping {
            height: 1,
            width: 1,
            entries: vec![crate::geometry::TexelEntry { face: 0, bary: [1.0 / 3.0; 3] }],
            covered: vec![true],
        };
        let flow = TextureFlow::new(1, 1, vec![[0.0, 0.0]]).unwrap();
        let cfg = RasterConfig::with_size(64, 64);
        let out = rasterize_projected(&project_with_depth(&tri.vertices, &Camera::default()), &tri.faces, &CornerAttrs::empty(1), &cfg).unwrap();
        let c = raster_face_centers(&out)[0].unwrap();
        let expect = c[0] * c[0] + c[1] * c[1];
        let v = texture_cycle_loss(&flow, &mapping, &out, None).unwrap();
        assert!((v - expect).abs() < 1e-12);
        assert!((c[0] - 0.6).abs() < 0.02 && (c[1] - 0.8).abs() < 0.02);
    }

    fn small_scene(seed: u64) -> (FitContext, Observation, FitState) {
        let mesh = make_sphere(1).unwrap();
        let mapping = build_uv_mapping(&mesh, 8, 8).unwrap();
        let mut r = rng(seed);
        let np = 3;
        let mut canon = Image::zeros(8, 8, np);
        canon.data.iter_mut().for_each(|x| *x = r.random());
        let canonical = CanonicalUV { probs: canon, sample_count: 1 };
        let labels = crate::geometry::vertex_part_labels(&mesh, &canonical).unwrap();
        let raster = RasterConfig { height: 16, width: 16, sigma: 3e-3, gamma: 0.05, background: 0.0 };
        let ctx = FitContext::new(mesh.clone(), mapping.clone(), Some(&canonical), labels, raster, LossWeights::default()).unwrap();
        let mut image = Image::zeros(16, 16, 3);
        image.data.iter_mut().for_each(|x| *x = r.random());
        let mask: Vec<f64> = crate::grid::pixel_grid(16, 16).iter().map(|p| if p[0].hypot(p[1]) < 0.55 { 1.0 } else { 0.0 }).collect();
        let obs = Observation::new(image, mask, part_map(16, 16, np, seed + 1), seed).unwrap();
        let camera = Camera { scale: 0.55, translation: [0.03, -0.02], rotation: [0.9, 0.2, -0.3, 0.1] };
        let deform: Vec<Vec3> = (0..mesh.vertices.len()).map(|_| [0.05 * r.random::<f64>(), -0.04 * r.random::<f64>(), 0.03 * r.random::<f64>()]).collect();
        let mut flow = init_flow_from_projection(&mesh, &camera, &mapping).unwrap();
        flow.coords.iter_mut().for_each(|c| {
            c[0] += 0.03 * (r.random::<f64>() - 0.5);
            c[1] += 0.03 * (r.random::<f64>() - 0.5);
        });
        (ctx, obs, FitState { deform, camera, flow })
    }

    #[test]
    fn report_total_recomposes() {
        let (ctx, obs, state) = small_scene(11);
        let rep = total_loss(&ctx, &obs, &state).unwrap();
        let w = ctx.weights;
        let manual = w.w_iou * rep.iou
            + w.w_img * rep.img
            + w.w_sp * rep.sp
            + w.w_sv * rep.sv
            + w.w_tcyc * rep.tcyc
            + w.w_lap * rep.lap
            + w.w_edge * rep.edge
            + w.w_def * rep.def;
        assert!((rep.total - manual).abs() < 1e-9);
        assert!(rep.iou < 0.0 && rep.img > 0.0 && rep.sp > 0.0 && rep.sv > 0.0 && rep.tcyc > 0.0);
    }

    #[test]
    fn zero_weights_give_zero() {
        let (mut ctx, obs, state) = small_scene(12);
        ctx.weights = LossWeights::zero();
        let (rep, g) = total_loss_grad(&ctx, &obs, &state).unwrap();
        assert_eq!(rep.total, 0.0);
        assert!(g.camera.iter().all(|&x| x == 0.0));
        assert!(g.deform.iter().flatten().all(|&x| x == 0.0));
        assert!(g.flow.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn invalid_weights_rejected() {
        let w = LossWeights { w_sv: -1.0, ..Default::default() };
        assert!(w.validate().is_err());
        let w = LossWeights { w_img: f64::NAN, ..Default::default() };
        assert!(w.validate().is_err());
    }
}
