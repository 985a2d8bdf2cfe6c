//! Flat parameter vectors, gradient evaluation and the finite-difference checker.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{quat_from_axis_angle, Camera, CAMERA_PARAMS};
use crate::error::{Error, Result};
use crate::geometry::{build_uv_mapping, make_sphere, vertex_part_labels, Vec3};
use crate::grid::{pixel_grid, Image};
use crate::losses::{total_loss, total_loss_grad, FitContext, FitState, LossReport, LossWeights, Observation};
use crate::softras::RasterConfig;
use crate::texflow::{init_flow_from_projection, CanonicalUV, PartMap, TextureFlow};

/// Segment sizes of a [`ParamVector`]: deformation, cameras, flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_vertices: usize,
    pub n_cameras: usize,
    pub flow_height: usize,
    pub flow_width: usize,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.flow().end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn deform(&self) -> Range<usize> {
        0..3 * self.n_vertices
    }

    pub fn camera(&self, k: usize) -> Range<usize> {
        let start = 3 * self.n_vertices + CAMERA_PARAMS * k;
        start..start + CAMERA_PARAMS
    }

    pub fn cameras(&self) -> Range<usize> {
        let start = 3 * self.n_vertices;
        start..start + CAMERA_PARAMS * self.n_cameras
    }

    pub fn flow(&self) -> Range<usize> {
        let start = self.cameras().end;
        start..start + 2 * self.flow_height * self.flow_width
    }
}

/// `[deformation (3V) | cameras (7K) | flow (2 H_uv W_uv)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        ParamVector { layout, values: vec![0.0; layout.len()] }
    }

    pub fn pack(deform: &[Vec3], cameras: &[Camera], flow: &TextureFlow) -> Self {
        let layout = Layout {
            n_vertices: deform.len(),
            n_cameras: cameras.len(),
            flow_height: flow.height,
            flow_width: flow.width,
        };
        let mut values = Vec::with_capacity(layout.len());
        values.extend(deform.iter().flatten());
        for c in cameras {
            values.extend(c.to_params());
        }
        values.extend(flow.coords.iter().flatten());
        ParamVector { layout, values }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::param(format!("expected {} parameters, got {}", layout.len(), values.len())));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn deform(&self) -> Vec<Vec3> {
        self.values[self.layout.deform()].chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    /// Camera `k` with its raw, possibly unnormalized quaternion.
    pub fn camera(&self, k: usize) -> Camera {
        Camera::from_params(&self.values[self.layout.camera(k)])
    }

    pub fn set_camera(&mut self, k: usize, cam: &Camera) {
        let r = self.layout.camera(k);
        self.values[r].copy_from_slice(&cam.to_params());
    }

    /// Flow coordinates as stored, without clamping.
    pub fn flow(&self) -> TextureFlow {
        let coords = self.values[self.layout.flow()].chunks(2).map(|c| [c[0], c[1]]).collect();
        TextureFlow { height: self.layout.flow_height, width: self.layout.flow_width, coords }
    }

    pub fn set_flow(&mut self, flow: &TextureFlow) {
        let r = self.layout.flow();
        for (dst, src) in self.values[r].chunks_mut(2).zip(&flow.coords) {
            dst.copy_from_slice(src);
        }
    }

    pub fn set_deform(&mut self, deform: &[Vec3]) {
        let r = self.layout.deform();
        for (dst, src) in self.values[r].chunks_mut(3).zip(deform) {
            dst.copy_from_slice(src);
        }
    }

    pub fn unpack(&self) -> (Vec<Vec3>, Vec<Camera>, TextureFlow) {
        let cams = (0..self.layout.n_cameras).map(|k| self.camera(k)).collect();
        (self.deform(), cams, self.flow())
    }

    /// Fit state seen by camera `k`.
    pub fn state(&self, k: usize) -> FitState {
        FitState { deform: self.deform(), camera: self.camera(k), flow: self.flow() }
    }
}

/// A scalar function of a flat parameter vector with an exact gradient.
pub trait Differentiable {
    fn value(&self, params: &[f64]) -> Result<f64>;
    fn value_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Gradient of `objective` at `params`, in the same layout.
pub fn grad<D: Differentiable + ?Sized>(objective: &D, params: &ParamVector) -> Result<ParamVector> {
    let (v, g) = objective.value_grad(&params.values)?;
    if !v.is_finite() {
        return Err(Error::numerical("objective is not finite"));
    }
    ParamVector::from_values(params.layout, g)
}

/// Largest relative error between the analytic gradient and central
/// differences over `indices`, with denominator `max(|g|, |g_fd|, 1e-8)`.
pub fn fd_check<D: Differentiable + ?Sized>(objective: &D, params: &[f64], step: f64, indices: &[usize]) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::param("finite-difference step must be positive"));
    }
    let (_, g) = objective.value_grad(params)?;
    let mut worst: f64 = 0.0;
    let mut x = params.to_vec();
    for &i in indices {
        if i >= params.len() {
            return Err(Error::param(format!("index {i} outside a vector of {}", params.len())));
        }
        x[i] = params[i] + step;
        let up = objective.value(&x)?;
        x[i] = params[i] - step;
        let down = objective.value(&x)?;
        x[i] = params[i];
        let fd = (up - down) / (2.0 * step);
        let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// The total loss of one instance as a function of its parameter vector,
/// evaluated with camera hypothesis `camera`.
pub struct FitObjective<'a> {
    pub ctx: &'a FitContext,
    pub obs: &'a Observation,
    pub layout: Layout,
    pub camera: usize,
}

impl<'a> FitObjective<'a> {
    pub fn new(ctx: &'a FitContext, obs: &'a Observation, layout: Layout, camera: usize) -> Result<Self> {
        if layout.n_vertices != ctx.template.vertices.len()
            || layout.flow_height != ctx.mapping.height
            || layout.flow_width != ctx.mapping.width
        {
            return Err(Error::param("parameter layout does not match the fit context"));
        }
        if camera >= layout.n_cameras {
            return Err(Error::param("camera index outside the parameter layout"));
        }
        Ok(FitObjective { ctx, obs, layout, camera })
    }

    fn state(&self, params: &[f64]) -> Result<FitState> {
        Ok(ParamVector::from_values(self.layout, params.to_vec())?.state(self.camera))
    }

    pub fn report(&self, params: &[f64]) -> Result<LossReport> {
        total_loss(self.ctx, self.obs, &self.state(params)?)
    }

    pub fn report_grad(&self, params: &[f64]) -> Result<(LossReport, Vec<f64>)> {
        let (rep, g) = total_loss_grad(self.ctx, self.obs, &self.state(params)?)?;
        let mut out = vec![0.0; self.layout.len()];
        for (dst, src) in out[self.layout.deform()].chunks_mut(3).zip(&g.deform) {
            dst.copy_from_slice(src);
        }
        out[self.layout.camera(self.camera)].copy_from_slice(&g.camera);
        for (dst, src) in out[self.layout.flow()].chunks_mut(2).zip(&g.flow) {
            dst.copy_from_slice(src);
        }
        Ok((rep, out))
    }
}

impl Differentiable for FitObjective<'_> {
    fn value(&self, params: &[f64]) -> Result<f64> {
        Ok(self.report(params)?.total)
    }

    fn value_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (r, g) = self.report_grad(params)?;
        Ok((r.total, g))
    }
}

/// Worst relative error per parameter group for one loss term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: String,
    pub deform: f64,
    pub camera: f64,
    pub flow: f64,
}

impl TermCheck {
    pub fn worst(&self) -> f64 {
        self.deform.max(self.camera).max(self.flow)
    }
}

/// Small random scene used by the gradient checks: an 80-face sphere, a
/// 16x16 observation with random colors and parts, a perturbed camera,
/// deformation and flow.
pub fn check_scene(seed: u64) -> Result<(FitContext, Observation, ParamVector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mesh = make_sphere(1)?;
    let mapping = build_uv_mapping(&mesh, 8, 8)?;
    let np = 3;
    let mut canon = Image::zeros(8, 8, np);
    canon.data.iter_mut().for_each(|x| *x = rng.random());
    let canonical = CanonicalUV { probs: canon, sample_count: 1 };
    let labels = vertex_part_labels(&mesh, &canonical)?;
    let raster = RasterConfig { height: 16, width: 16, sigma: 3e-3, gamma: 0.05, background: 0.0 };
    let ctx = FitContext::new(mesh.clone(), mapping.clone(), Some(&canonical), labels, raster, LossWeights::default())?;
    let mut image = Image::zeros(16, 16, 3);
    image.data.iter_mut().for_each(|x| *x = rng.random());
    let r0 = 0.45 + 0.1 * rng.random::<f64>();
    let mask = pixel_grid(16, 16).iter().map(|p| if p[0].hypot(p[1]) < r0 { 1.0 } else { 0.0 }).collect();
    let mut probs = Image::zeros(16, 16, np + 1);
    probs.data.iter_mut().for_each(|x| *x = rng.random::<f64>() + 0.01);
    let parts = PartMap::renormalized(probs)?;
    let obs = Observation::new(image, mask, parts, seed)?;
    let axis = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
    let rot = quat_from_axis_angle(axis, 2.0 * rng.random::<f64>());
    let q = rot.map(|x| x * (0.8 + 0.4 * rng.random::<f64>()));
    let camera = Camera {
        scale: 0.5 + 0.1 * rng.random::<f64>(),
        translation: [0.1 * (rng.random::<f64>() - 0.5), 0.1 * (rng.random::<f64>() - 0.5)],
        rotation: q,
    };
    let deform: Vec<Vec3> =
        (0..mesh.vertices.len()).map(|_| std::array::from_fn(|_| 0.08 * (rng.random::<f64>() - 0.5))).collect();
    let mut flow = init_flow_from_projection(&mesh, &camera, &mapping)?;
    for c in &mut flow.coords {
        c[0] = (c[0] + 0.05 * (rng.random::<f64>() - 0.5)).clamp(-0.95, 0.95);
        c[1] = (c[1] + 0.05 * (rng.random::<f64>() - 0.5)).clamp(-0.95, 0.95);
    }
    Ok((ctx, obs, ParamVector::pack(&deform, &[camera], &flow)))
}

/// Checks the gradient of every loss term in isolation against central
/// differences on `samples` random coordinates of each parameter group
/// (all seven camera parameters are always checked).
pub fn check_terms(
    ctx: &FitContext,
    obs: &Observation,
    params: &ParamVector,
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<TermCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = params.layout;
    let mut pick = |r: Range<usize>| -> Vec<usize> {
        let n = r.len().min(samples);
        let mut idx = rand::seq::index::sample(&mut rng, r.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| r.start + i).collect()
    };
    let deform_idx = pick(l.deform());
    let flow_idx = pick(l.flow());
    let camera_idx: Vec<usize> = l.camera(0).collect();
    let zero = LossWeights::zero();
    let single: [(&str, LossWeights); 8] = [
        ("iou", LossWeights { w_iou: 1.0, ..zero }),
        ("img", LossWeights { w_img: 1.0, ..zero }),
        ("sp", LossWeights { w_sp: 1.0, ..zero }),
        ("sv", LossWeights { w_sv: 1.0, ..zero }),
        ("tcyc", LossWeights { w_tcyc: 1.0, ..zero }),
        ("lap", LossWeights { w_lap: 1.0, ..zero }),
        ("edge", LossWeights { w_edge: 1.0, ..zero }),
        ("def", LossWeights { w_def: 1.0, ..zero }),
    ];
    let mut out = Vec::new();
    for (name, weights) in single.into_iter().chain([("total", ctx.weights)]) {
        let ctx_t = FitContext { weights, ..ctx.clone() };
        let obj = FitObjective::new(&ctx_t, obs, l, 0)?;
        out.push(TermCheck {
            term: name.to_string(),
            deform: fd_check(&obj, &params.values, step, &deform_idx)?,
            camera: fd_check(&obj, &params.values, step, &camera_idx)?,
            flow: fd_check(&obj, &params.values, step, &flow_idx)?,
        });
    }
    Ok(out)
}
