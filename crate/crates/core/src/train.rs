//! Alternating fit of a category: every instance is fitted against a frozen
//! template and canonical part map (E-step), then the template and canonical
//! map are refreshed from well-fitted instances (M-step).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{FitObjective, Layout, ParamVector};
use crate::camera::{init_hypotheses, quat_normalize, Camera, CameraHypotheses};
use crate::error::{Error, Result};
use crate::eval::{mask_iou, KeypointSet};
use crate::geometry::{
    apply_deformation, build_uv_mapping, make_sphere, vertex_part_labels, Deformation, Mesh, UVMapping, Vec3,
};
use crate::grid::{pixel_center, Image};
use crate::losses::{total_loss, FitContext, LossReport, LossWeights, Observation};
use crate::optim::{halving_schedule, Adam};
use crate::softras::{rasterize, render_silhouette, RasterConfig};
use crate::texflow::{
    aggregate_canonical, init_flow_from_projection, sample_canonical_at_vertices, semantic_uv, CanonicalUV,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rounds: usize,
    /// Optimizer steps per instance and hypothesis in each E-step.
    pub e_epochs: usize,
    pub lr: f64,
    /// The learning rate halves every this many steps; 0 keeps it constant.
    pub halve_every: usize,
    /// Camera hypotheses from the second round on.
    pub k_hyp: usize,
    /// Subset size for the M-step; `None` means `max(3, 20%)` of instances.
    pub k_select: Option<usize>,
    pub template_subdivisions: u32,
    pub uv_size: usize,
    /// Learning-rate multiplier of the deformation relative to the camera
    /// and flow from the second round on. The first round always learns the
    /// shape at the full rate.
    pub deform_lr_scale: f64,
    /// Start every hypothesis from a zero deformation instead of the
    /// instance's current one.
    pub reset_deform: bool,
    pub seed: u64,
    pub weights: LossWeights,
    pub raster: RasterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 2,
            e_epochs: 200,
            lr: 1e-2,
            halve_every: 50,
            k_hyp: 8,
            k_select: None,
            template_subdivisions: 2,
            uv_size: 64,
            deform_lr_scale: 0.1,
            reset_deform: true,
            seed: 0,
            weights: LossWeights::default(),
            raster: RasterConfig { sigma: 1e-5, gamma: 1e-4, ..RasterConfig::with_size(64, 64) },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.k_hyp == 0 || self.k_select == Some(0) {
            return Err(Error::param("rounds, k_hyp and k_select must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() || !(self.deform_lr_scale >= 0.0) {
            return Err(Error::param("learning rates must be positive"));
        }
        if self.uv_size < 2 {
            return Err(Error::param("uv grid must be at least 2x2"));
        }
        self.weights.validate()?;
        self.raster.validate()
    }

    pub fn subset_size(&self, n_instances: usize) -> usize {
        self.k_select.unwrap_or_else(|| 3.max((n_instances as f64 * 0.2).round() as usize))
    }
}

/// One image with its supervision and fitted unknowns.
#[derive(Clone, Debug)]
pub struct Instance {
    pub name: String,
    pub obs: Observation,
    /// Deformation, the selected camera and the flow.
    pub params: ParamVector,
    pub hypotheses: CameraHypotheses,
    pub report: Option<LossReport>,
    /// Why the last E-step gave up on this instance.
    pub failure: Option<String>,
    pub keypoints: Option<KeypointSet>,
}

impl Instance {
    pub fn new(name: impl Into<String>, obs: Observation, state: &CategoryState) -> Result<Self> {
        if obs.mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::param("instance silhouette must be binary"));
        }
        let layout = Layout {
            n_vertices: state.template.vertices.len(),
            n_cameras: 1,
            flow_height: state.mapping.height,
            flow_width: state.mapping.width,
        };
        let mut params = ParamVector::zeros(layout);
        params.set_camera(0, &Camera::default());
        Ok(Instance {
            name: name.into(),
            obs,
            params,
            hypotheses: CameraHypotheses { cameras: vec![Camera::default()], scores: vec![f64::INFINITY] },
            report: None,
            failure: None,
            keypoints: None,
        })
    }

    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn camera(&self) -> Camera {
        self.params.camera(0)
    }

    pub fn vertices(&self, template: &Mesh) -> Vec<Vec3> {
        offset_vertices(&template.vertices, &self.params.deform())
    }

    pub fn mesh(&self, template: &Mesh) -> Result<Mesh> {
        apply_deformation(template, &Deformation { offsets: self.params.deform() })
    }
}

fn offset_vertices(base: &[Vec3], d: &[Vec3]) -> Vec<Vec3> {
    base.iter().zip(d).map(|(v, d)| [v[0] + d[0], v[1] + d[1], v[2] + d[2]]).collect()
}

/// Category-level quantities shared by all instances.
#[derive(Clone, Debug)]
pub struct CategoryState {
    pub template: Mesh,
    pub mapping: UVMapping,
    pub canonical: Option<CanonicalUV>,
    /// Part index per template vertex; empty until a canonical map exists.
    pub labels: Vec<usize>,
    /// The round whose E-step runs next, starting at 1.
    pub round: usize,
}

impl CategoryState {
    /// A unit icosphere template with no canonical map.
    pub fn sphere(subdivisions: u32, uv_size: usize) -> Result<Self> {
        let template = make_sphere(subdivisions)?;
        let mapping = build_uv_mapping(&template, uv_size, uv_size)?;
        Ok(CategoryState { template, mapping, canonical: None, labels: Vec::new(), round: 1 })
    }

    pub fn with_canonical(template: Mesh, mapping: UVMapping, canonical: CanonicalUV, round: usize) -> Result<Self> {
        let labels = vertex_part_labels(&template, &canonical)?;
        Ok(CategoryState { template, mapping, canonical: Some(canonical), labels, round })
    }

    /// The fit context of the next E-step. The semantic terms stay off until
    /// a canonical map exists.
    pub fn context(&self, cfg: &TrainConfig) -> Result<FitContext> {
        let mut weights = cfg.weights.clone();
        if self.canonical.is_none() {
            weights.w_sp = 0.0;
            weights.w_sv = 0.0;
        }
        FitContext::new(
            self.template.clone(),
            self.mapping.clone(),
            self.canonical.as_ref(),
            self.labels.clone(),
            cfg.raster.clone(),
            weights,
        )
    }
}

/// One optimizer step of one hypothesis, as written to the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub round: usize,
    pub instance: usize,
    pub hypothesis: usize,
    pub step: usize,
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

impl LogLine {
    fn new(round: usize, instance: usize, hypothesis: usize, step: usize, r: &LossReport) -> Self {
        LogLine {
            round,
            instance,
            hypothesis,
            step,
            iou: r.iou,
            img: r.img,
            sp: r.sp,
            sv: r.sv,
            tcyc: r.tcyc,
            lap: r.lap,
            edge: r.edge,
            def: r.def,
            total: r.total,
        }
    }
}

/// Camera centered on the mask with the unit sphere's disk matching its area.
pub fn camera_from_mask(mask: &[f64], height: usize, width: usize) -> Camera {
    let mut sum = [0.0; 2];
    let mut n = 0usize;
    for (m, &v) in mask.iter().enumerate() {
        if v > 0.5 {
            let p = pixel_center(m / width, m % width, height, width);
            sum[0] += p[0];
            sum[1] += p[1];
            n += 1;
        }
    }
    if n == 0 {
        return Camera { scale: 0.5, ..Camera::default() };
    }
    let area = n as f64 * 4.0 / (height * width) as f64;
    Camera {
        scale: (area / std::f64::consts::PI).sqrt().max(1e-3),
        translation: [sum[0] / n as f64, sum[1] / n as f64],
        ..Camera::default()
    }
}

fn instance_seed(seed: u64, round: usize, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (round as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Keeps the parameters on their domain: unit quaternion, positive scale,
/// flow inside the image.
fn project_params(p: &mut ParamVector) {
    let mut cam = p.camera(0);
    let q = cam.rotation;
    let n = q.iter().map(|x| x * x).sum::<f64>();
    cam.rotation = if n > 1e-24 { quat_normalize(q) } else { [1.0, 0.0, 0.0, 0.0] };
    cam.scale = cam.scale.max(1e-3);
    p.set_camera(0, &cam);
    let flow = p.layout.flow();
    p.values[flow].iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));
}

struct HypothesisFit {
    params: ParamVector,
    report: LossReport,
    log: Vec<LogLine>,
}

/// Adam on one starting point. The best iterate seen is returned, so the
/// result never scores worse than the start.
fn fit_hypothesis(
    ctx: &FitContext,
    obs: &Observation,
    start: ParamVector,
    cfg: &TrainConfig,
    tag: (usize, usize, usize),
) -> Result<HypothesisFit> {
    let objective = FitObjective::new(ctx, obs, start.layout, 0)?;
    let mut params = start;
    let mut scales = vec![1.0; params.values.len()];
    if tag.0 > 1 {
        scales[params.layout.deform()].iter_mut().for_each(|s| *s = cfg.deform_lr_scale);
    }
    let mut adam = Adam::new(params.values.len()).with_scales(scales);
    let mut best: Option<(ParamVector, LossReport)> = None;
    let mut log = Vec::with_capacity(cfg.e_epochs + 1);
    for step in 0..=cfg.e_epochs {
        let last = step == cfg.e_epochs;
        let (report, grad) = if last {
            (objective.report(&params.values)?, Vec::new())
        } else {
            objective.report_grad(&params.values)?
        };
        if let Some(term) = report.non_finite() {
            return Err(Error::numerical(format!("{term} became non-finite at step {step}")));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numerical(format!("gradient became non-finite at step {step}")));
        }
        log.push(LogLine::new(tag.0, tag.1, tag.2, step, &report));
        if best.as_ref().is_none_or(|(_, b)| report.total < b.total) {
            best = Some((params.clone(), report.clone()));
        }
        if !last {
            adam.step(&mut params.values, &grad, halving_schedule(cfg.lr, cfg.halve_every, step));
            project_params(&mut params);
        }
    }
    let (params, report) = best.expect("at least one evaluation");
    Ok(HypothesisFit { params, report, log })
}

/// Starting points for one instance in the current round.
fn starting_points(inst: &Instance, index: usize, state: &CategoryState, cfg: &TrainConfig) -> Result<Vec<ParamVector>> {
    let layout = inst.params.layout;
    if state.round == 1 {
        let h = inst.obs.image.height;
        let w = inst.obs.image.width;
        let cam = camera_from_mask(&inst.obs.mask, h, w);
        let flow = init_flow_from_projection(&state.template, &cam, &state.mapping)?;
        let mut p = ParamVector::zeros(layout);
        p.set_camera(0, &cam);
        p.set_flow(&flow);
        return Ok(vec![p]);
    }
    let base = inst.camera();
    let deform = if cfg.reset_deform { vec![[0.0; 3]; layout.n_vertices] } else { inst.params.deform() };
    let mesh = apply_deformation(&state.template, &Deformation { offsets: deform.clone() })?;
    let hyps = init_hypotheses(cfg.k_hyp, instance_seed(cfg.seed, state.round, index))?;
    hyps.cameras
        .iter()
        .map(|h| {
            let cam = base.rotated_by(h.rotation);
            let mut p = ParamVector::zeros(layout);
            p.set_deform(&deform);
            p.set_camera(0, &cam);
            p.set_flow(&init_flow_from_projection(&mesh, &cam, &state.mapping)?);
            Ok(p)
        })
        .collect()
}

fn fit_instance(
    ctx: &FitContext,
    inst: &mut Instance,
    index: usize,
    state: &CategoryState,
    cfg: &TrainConfig,
) -> Result<Vec<LogLine>> {
    let starts = starting_points(inst, index, state, cfg)?;
    let mut log = Vec::new();
    let mut cameras = Vec::with_capacity(starts.len());
    let mut scores = Vec::with_capacity(starts.len());
    let mut best: Option<HypothesisFit> = None;
    for (h, start) in starts.into_iter().enumerate() {
        cameras.push(start.camera(0));
        let fit = fit_hypothesis(ctx, &inst.obs, start, cfg, (state.round, index, h))?;
        log.extend_from_slice(&fit.log);
        scores.push(fit.report.total);
        if best.as_ref().is_none_or(|b| fit.report.total < b.report.total) {
            best = Some(HypothesisFit { log: Vec::new(), ..fit });
        }
    }
    let best = best.expect("at least one hypothesis");
    inst.params = best.params;
    inst.report = Some(best.report);
    inst.hypotheses = CameraHypotheses { cameras, scores };
    Ok(log)
}

/// Fits every instance against the frozen `state`. Instances run in parallel;
/// the returned log is ordered by instance, hypothesis and step. An instance
/// whose loss turns non-finite is marked failed and keeps its parameters.
pub fn e_step(instances: &mut [Instance], state: &CategoryState, cfg: &TrainConfig) -> Result<Vec<LogLine>> {
    cfg.validate()?;
    let ctx = state.context(cfg)?;
    let results: Vec<Result<Vec<LogLine>>> = instances
        .par_iter_mut()
        .enumerate()
        .map(|(i, inst)| {
            if inst.failed() {
                return Ok(Vec::new());
            }
            match fit_instance(&ctx, inst, i, state, cfg) {
                Err(Error::Numerical(msg)) => {
                    inst.failure = Some(msg);
                    Ok(Vec::new())
                }
                other => other,
            }
        })
        .collect();
    let mut log = Vec::new();
    for r in results {
        log.extend(r?);
    }
    Ok(log)
}

/// Picks the exemplar with the highest `score` (lowest index on ties) and
/// the `k - 1` others most similar to it. `None` scores are excluded.
pub fn rank_subset(score: &[Option<f64>], similarity: impl Fn(usize, usize) -> f64, k: usize) -> Vec<usize> {
    let mut exemplar = None;
    for (i, s) in score.iter().enumerate() {
        if let Some(s) = *s {
            if exemplar.is_none_or(|(_, b)| s > b) {
                exemplar = Some((i, s));
            }
        }
    }
    let Some((e, _)) = exemplar else { return Vec::new() };
    let mut others: Vec<(usize, f64)> =
        (0..score.len()).filter(|&i| i != e && score[i].is_some()).map(|i| (i, similarity(e, i))).collect();
    others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    std::iter::once(e).chain(others.into_iter().map(|(i, _)| i)).take(k.max(1)).collect()
}

fn silhouettes(instances: &[Instance], state: &CategoryState, raster: &RasterConfig) -> Result<Vec<Option<Image>>> {
    instances
        .par_iter()
        .map(|inst| {
            if inst.failed() {
                return Ok(None);
            }
            render_silhouette(&inst.mesh(&state.template)?, &inst.camera(), raster).map(Some)
        })
        .collect()
}

/// Shape subset: the exemplar best matches its ground-truth mask, members
/// have rendered silhouettes most like the exemplar's.
pub fn select_shape_subset(
    instances: &[Instance],
    state: &CategoryState,
    raster: &RasterConfig,
    k: usize,
) -> Result<Vec<usize>> {
    let sils = silhouettes(instances, state, raster)?;
    let score = sils
        .iter()
        .zip(instances)
        .map(|(s, inst)| s.as_ref().map(|s| mask_iou(&s.data, &inst.obs.mask, 0.5)).transpose())
        .collect::<Result<Vec<_>>>()?;
    let sim = |a: usize, b: usize| {
        let (Some(x), Some(y)) = (&sils[a], &sils[b]) else { return f64::NEG_INFINITY };
        let bin: Vec<f64> = x.data.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
        mask_iou(&y.data, &bin, 0.5).unwrap_or(0.0)
    };
    Ok(rank_subset(&score, sim, k))
}

/// Per-instance semantic UV maps, `None` for failed instances.
pub fn semantic_maps(instances: &[Instance]) -> Result<Vec<Option<Image>>> {
    instances
        .iter()
        .map(|inst| if inst.failed() { Ok(None) } else { semantic_uv(&inst.params.flow(), &inst.obs.parts).map(Some) })
        .collect()
}

/// UV subset: the exemplar reconstructs its image best, members have the
/// closest semantic UV maps in L2.
pub fn select_uv_subset(instances: &[Instance], k: usize) -> Result<Vec<usize>> {
    let maps = semantic_maps(instances)?;
    let score: Vec<Option<f64>> =
        instances.iter().map(|i| if i.failed() { None } else { Some(-i.report.as_ref().map_or(f64::INFINITY, |r| r.img)) }).collect();
    Ok(rank_subset(&score, |a, b| -map_distance(&maps[a], &maps[b]), k))
}

fn map_distance(a: &Option<Image>, b: &Option<Image>) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        _ => f64::INFINITY,
    }
}

/// Mean of the selected instances' deformations.
pub fn mean_deformation(instances: &[Instance], subset: &[usize]) -> Vec<Vec3> {
    let n = instances.first().map_or(0, |i| i.params.layout.n_vertices);
    let mut mean = vec![[0.0; 3]; n];
    for &i in subset {
        for (m, d) in mean.iter_mut().zip(instances[i].params.deform()) {
            for k in 0..3 {
                m[k] += d[k];
            }
        }
    }
    let inv = 1.0 / subset.len().max(1) as f64;
    mean.iter_mut().for_each(|m| m.iter_mut().for_each(|x| *x *= inv));
    mean
}

/// Outcome of one M-step.
#[derive(Clone, Debug)]
pub struct MStep {
    pub state: CategoryState,
    pub shape_subset: Vec<usize>,
    pub uv_subset: Vec<usize>,
}

/// Moves the template by the mean deformation of the shape subset and
/// re-bases every instance onto it. Returns the new template and the subset;
/// with no usable instance the template is unchanged and the subset empty.
pub fn update_template(instances: &mut [Instance], state: &CategoryState, cfg: &TrainConfig) -> Result<(Mesh, Vec<usize>)> {
    let k = cfg.subset_size(instances.len());
    let shape = select_shape_subset(instances, state, &cfg.raster, k)?;
    if shape.is_empty() {
        return Ok((state.template.clone(), shape));
    }
    let mean = mean_deformation(instances, &shape);
    let mut template = state.template.clone();
    template.vertices = offset_vertices(&template.vertices, &mean);
    for inst in instances.iter_mut() {
        let d: Vec<Vec3> =
            inst.params.deform().iter().zip(&mean).map(|(d, m)| [d[0] - m[0], d[1] - m[1], d[2] - m[2]]).collect();
        inst.params.set_deform(&d);
    }
    Ok((template, shape))
}

/// Averages the semantic UV maps of the UV subset. `None` when no instance
/// is usable.
pub fn update_canonical(instances: &[Instance], cfg: &TrainConfig) -> Result<Option<(CanonicalUV, Vec<usize>)>> {
    let uv = select_uv_subset(instances, cfg.subset_size(instances.len()))?;
    if uv.is_empty() {
        return Ok(None);
    }
    let maps = semantic_maps(instances)?;
    let chosen: Vec<Image> = uv.iter().filter_map(|&i| maps[i].clone()).collect();
    Ok(Some((aggregate_canonical(&chosen)?, uv)))
}

/// Template update followed by the canonical map rebuild. With no usable
/// instance the state is returned unchanged apart from the round.
pub fn m_step(instances: &mut [Instance], state: &CategoryState, cfg: &TrainConfig) -> Result<MStep> {
    let (template, shape) = update_template(instances, state, cfg)?;
    match update_canonical(instances, cfg)? {
        Some((canonical, uv)) if !shape.is_empty() => {
            let next = CategoryState::with_canonical(template, state.mapping.clone(), canonical, state.round + 1)?;
            Ok(MStep { state: next, shape_subset: shape, uv_subset: uv })
        }
        _ => Ok(MStep { state: CategoryState { round: state.round + 1, ..state.clone() }, shape_subset: shape, uv_subset: Vec::new() }),
    }
}

/// Raw `L_sp + L_sv` of every instance against `state`.
pub fn semantic_losses(instances: &[Instance], state: &CategoryState, raster: &RasterConfig) -> Result<Vec<Option<f64>>> {
    let canonical = state.canonical.as_ref().ok_or_else(|| Error::param("no canonical map yet"))?;
    let weights = LossWeights { w_sp: 1.0, w_sv: 1.0, ..LossWeights::zero() };
    let ctx = FitContext::new(
        state.template.clone(),
        state.mapping.clone(),
        Some(canonical),
        state.labels.clone(),
        raster.clone(),
        weights,
    )?;
    instances
        .par_iter()
        .map(|inst| {
            if inst.failed() {
                return Ok(None);
            }
            let r = total_loss(&ctx, &inst.obs, &inst.params.state(0))?;
            Ok(Some(r.sp + r.sv))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub selected: Vec<bool>,
    /// `H x W` part indices for selected instances; background is `N_p`.
    pub labels: Vec<Option<Vec<usize>>>,
    pub scores: Vec<Option<f64>>,
}

/// Part-index maps rendered from the canonical map for the instances whose
/// semantic losses fall below `threshold`.
pub fn pseudo_labels(
    instances: &[Instance],
    state: &CategoryState,
    raster: &RasterConfig,
    threshold: f64,
) -> Result<PseudoLabels> {
    let canonical = state.canonical.as_ref().ok_or_else(|| Error::param("pseudo labels need a canonical map"))?;
    let scores = semantic_losses(instances, state, raster)?;
    let np = canonical.parts();
    let mut selected = Vec::with_capacity(instances.len());
    let mut labels = Vec::with_capacity(instances.len());
    for (inst, score) in instances.iter().zip(&scores) {
        let pick = score.is_some_and(|s| s < threshold);
        selected.push(pick);
        if !pick {
            labels.push(None);
            continue;
        }
        let mesh = inst.mesh(&state.template)?;
        let per_vertex = sample_canonical_at_vertices(&mesh, canonical)?;
        let out = rasterize(&mesh, &inst.camera(), &per_vertex, np, &RasterConfig { background: 0.0, ..raster.clone() })?;
        let map = (0..out.height * out.width)
            .map(|m| {
                if out.silhouette[m] < 0.5 {
                    return np;
                }
                let row = &out.blend[m * np..(m + 1) * np];
                let mut best = 0;
                for k in 1..np {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        labels.push(Some(map));
    }
    Ok(PseudoLabels { selected, labels, scores })
}

/// Everything produced by a full fit.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub state: CategoryState,
    pub log: Vec<LogLine>,
}

/// Runs `cfg.rounds` E/M rounds starting from `state`. `on_round` sees the
/// instances and state after each M-step together with that round's log.
pub fn fit(
    instances: &mut [Instance],
    mut state: CategoryState,
    cfg: &TrainConfig,
    mut on_round: impl FnMut(&CategoryState, &[Instance], &[LogLine]) -> Result<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut all = Vec::new();
    for _ in 0..cfg.rounds {
        let log = e_step(instances, &state, cfg)?;
        state = m_step(instances, &state, cfg)?.state;
        on_round(&state, instances, &log)?;
        all.extend(log);
    }
    Ok(FitOutcome { state, log: all })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::quat_from_axis_angle;
    use crate::softras::render_part_probs;
    use crate::texflow::PartMap;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            e_epochs: 5,
            uv_size: 16,
            template_subdivisions: 1,
            k_hyp: 2,
            raster: RasterConfig { sigma: 3e-4, gamma: 1e-4, ..RasterConfig::with_size(24, 24) },
            ..Default::default()
        }
    }

    /// Renders the template under `cam` into an observation whose part map
    /// splits the silhouette into left and right halves.
    fn rendered_instance(state: &CategoryState, cam: &Camera, cfg: &TrainConfig) -> Instance {
        let r = &cfg.raster;
        let sil = render_silhouette(&state.template, cam, r).unwrap();
        let mask: Vec<f64> = sil.data.iter().map(|&s| if s > 0.5 { 1.0 } else { 0.0 }).collect();
        let mut image = Image::zeros(r.height, r.width, 3);
        let mut parts = Image::zeros(r.height, r.width, 3);
        for m in 0..mask.len() {
            let p = pixel_center(m / r.width, m % r.width, r.height, r.width);
            let k = if mask[m] == 0.0 { 2 } else if p[0] < cam.translation[0] { 0 } else { 1 };
            parts.data[m * 3 + k] = 1.0;
            image.data[m * 3 + k] = mask[m];
        }
        let obs = Observation::new(image, mask, PartMap::new(parts).unwrap(), 3).unwrap();
        Instance::new("rendered", obs, state).unwrap()
    }

    #[test]
    fn mask_moments() {
        let (h, w) = (32, 32);
        let cam = Camera { scale: 0.4, translation: [0.2, -0.1], ..Camera::default() };
        let state = CategoryState::sphere(3, 8).unwrap();
        let r = RasterConfig { sigma: 1e-7, ..RasterConfig::with_size(h, w) };
        let sil = render_silhouette(&state.template, &cam, &r).unwrap();
        let mask: Vec<f64> = sil.data.iter().map(|&s| if s > 0.5 { 1.0 } else { 0.0 }).collect();
        let est = camera_from_mask(&mask, h, w);
        assert!((est.scale - 0.4).abs() < 0.02, "{}", est.scale);
        assert!((est.translation[0] - 0.2).abs() < 0.02 && (est.translation[1] + 0.1).abs() < 0.02);
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let cfg = TrainConfig { e_epochs: 0, ..small_cfg() };
        let state = CategoryState::sphere(1, 16).unwrap();
        let mut inst = rendered_instance(&state, &Camera { scale: 0.5, ..Camera::default() }, &cfg);
        let mut state2 = state.clone();
        state2.round = 2;
        inst.params.set_camera(0, &Camera { scale: 0.45, ..Camera::default() });
        let d: Vec<Vec3> = (0..state.template.vertices.len()).map(|i| [0.01 * i as f64, 0.0, 0.0]).collect();
        inst.params.set_deform(&d);
        let before = inst.params.clone();
        let cfg1 = TrainConfig { k_hyp: 1, reset_deform: false, ..cfg };
        let mut insts = vec![inst];
        let log = e_step(&mut insts, &state2, &cfg1).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(insts[0].params.deform(), before.deform());
        // a single hypothesis is the current camera; the flow is re-projected
        let cam = insts[0].camera();
        let q = init_hypotheses(1, 0).unwrap().cameras[0].rotation;
        assert_eq!(cam, before.camera(0).rotated_by(q));
    }

    #[test]
    fn identical_instances_fit_identically() {
        let cfg = small_cfg();
        let state = CategoryState::sphere(1, 16).unwrap();
        let cam = Camera { scale: 0.5, translation: [0.05, 0.0], ..Camera::default() };
        let inst = rendered_instance(&state, &cam, &cfg);
        let mut a = vec![inst.clone()];
        let mut b = vec![inst];
        let la = e_step(&mut a, &state, &cfg).unwrap();
        let lb = e_step(&mut b, &state, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a[0].params, b[0].params);
    }

    #[test]
    fn warm_start_at_truth_stays_put() {
        let cfg = TrainConfig { e_epochs: 30, k_hyp: 1, ..small_cfg() };
        let mut state = CategoryState::sphere(2, 16).unwrap();
        state.round = 2;
        let cam = Camera { scale: 0.6, translation: [0.05, -0.03], rotation: quat_from_axis_angle([0.3, 1.0, 0.1], 0.5) };
        let mut inst = rendered_instance(&state, &cam, &cfg);
        inst.params.set_camera(0, &cam);
        let mut insts = vec![inst];
        let log = e_step(&mut insts, &state, &cfg).unwrap();
        let first = log.first().unwrap().total;
        let fitted = insts[0].report.as_ref().unwrap().total;
        assert!(fitted <= first);
        let sil = render_silhouette(&insts[0].mesh(&state.template).unwrap(), &insts[0].camera(), &cfg.raster).unwrap();
        assert!(mask_iou(&sil.data, &insts[0].obs.mask, 0.5).unwrap() >= 0.99);
    }

    #[test]
    fn subset_ranking_matches_brute_force() {
        // pairwise similarity from a fixed table, exemplar by score
        let score = [Some(0.2), Some(0.9), None, Some(0.5), Some(0.9)];
        let table = [[0.0, 0.3, 0.0, 0.8, 0.1], [0.3, 0.0, 0.0, 0.6, 0.6], [0.0; 5], [0.8, 0.6, 0.0, 0.0, 0.2], [0.1, 0.6, 0.0, 0.2, 0.0]];
        let sim = |a: usize, b: usize| table[a][b];
        assert_eq!(rank_subset(&score, sim, 1), vec![1]);
        // ties at 0.6 break towards the lower index
        assert_eq!(rank_subset(&score, sim, 3), vec![1, 3, 4]);
        assert_eq!(rank_subset(&score, sim, 10), vec![1, 3, 4, 0]);
        assert!(rank_subset(&[None, None], sim, 2).is_empty());
    }

    #[test]
    fn uv_subset_brute_force() {
        let cfg = small_cfg();
        let state = CategoryState::sphere(1, 16).unwrap();
        let base = rendered_instance(&state, &Camera { scale: 0.5, ..Camera::default() }, &cfg);
        let n = base.params.layout.flow().len() / 2;
        let mut insts = Vec::new();
        for (i, (img, shift)) in [(0.3, 0.0), (0.1, 0.4), (0.2, 0.1), (0.4, -0.2)].into_iter().enumerate() {
            let mut inst = base.clone();
            inst.name = format!("i{i}");
            let flow: Vec<[f64; 2]> = (0..n).map(|t| [(t % 16) as f64 / 8.0 - 1.0 + shift, 0.0]).collect();
            inst.params.set_flow(&crate::texflow::TextureFlow::new(16, 16, flow).unwrap());
            inst.report = Some(LossReport { img, ..Default::default() });
            insts.push(inst);
        }
        let maps = semantic_maps(&insts).unwrap();
        let mut oracle: Vec<(f64, usize)> = (0..4).filter(|&i| i != 1).map(|i| (map_distance(&maps[1], &maps[i]), i)).collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let got = select_uv_subset(&insts, 4).unwrap();
        assert_eq!(got[0], 1);
        assert_eq!(&got[1..], oracle.iter().map(|o| o.1).collect::<Vec<_>>().as_slice());
        assert_eq!(select_uv_subset(&insts, 1).unwrap(), vec![1]);
    }

    #[test]
    fn identical_maps_tie_by_index() {
        let cfg = small_cfg();
        let state = CategoryState::sphere(1, 16).unwrap();
        let mut inst = rendered_instance(&state, &Camera { scale: 0.5, ..Camera::default() }, &cfg);
        inst.report = Some(LossReport::default());
        let insts = vec![inst; 4];
        assert_eq!(select_uv_subset(&insts, 4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn disjoint_silhouettes_rank_last() {
        let cfg = small_cfg();
        let state = CategoryState::sphere(1, 16).unwrap();
        let a = rendered_instance(&state, &Camera { scale: 0.3, translation: [-0.5, 0.0], ..Camera::default() }, &cfg);
        let mut insts = vec![a.clone(), a.clone(), a];
        insts[0].params.set_camera(0, &Camera { scale: 0.3, translation: [-0.5, 0.0], ..Camera::default() });
        insts[1].params.set_camera(0, &Camera { scale: 0.3, translation: [0.55, 0.0], ..Camera::default() });
        insts[2].params.set_camera(0, &Camera { scale: 0.3, translation: [-0.45, 0.0], ..Camera::default() });
        let q = select_shape_subset(&insts, &state, &cfg.raster, 3).unwrap();
        assert_eq!(q, vec![0, 2, 1]);
    }

    fn with_deforms(ds: &[Vec<Vec3>]) -> (Vec<Instance>, CategoryState, TrainConfig) {
        let cfg = TrainConfig { k_select: Some(ds.len()), ..small_cfg() };
        let state = CategoryState::sphere(1, 16).unwrap();
        let base = rendered_instance(&state, &Camera { scale: 0.5, ..Camera::default() }, &cfg);
        let insts = ds
            .iter()
            .map(|d| {
                let mut i = base.clone();
                i.params.set_camera(0, &Camera { scale: 0.5, ..Camera::default() });
                i.params.set_deform(d);
                i.report = Some(LossReport::default());
                i
            })
            .collect();
        (insts, state, cfg)
    }

    #[test]
    fn m_step_with_zero_deformations_keeps_template() {
        let (mut insts, state, cfg) = with_deforms(&[vec![[0.0; 3]; 42], vec![[0.0; 3]; 42]]);
        let out = m_step(&mut insts, &state, &cfg).unwrap();
        assert_eq!(out.state.template.vertices, state.template.vertices);
        assert_eq!(out.state.canonical.as_ref().unwrap().sample_count, out.uv_subset.len());
        assert!(out.state.template.is_watertight());
        assert_eq!(out.state.labels.len(), 42);
    }

    #[test]
    fn m_step_equal_deformations_shift_template() {
        let d = [0.0625, -0.125, 0.25];
        let (mut insts, state, cfg) = with_deforms(&[vec![d; 42], vec![d; 42], vec![d; 42]]);
        let out = m_step(&mut insts, &state, &cfg).unwrap();
        for (a, b) in out.state.template.vertices.iter().zip(&state.template.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k] - d[k]).abs() < 1e-15);
            }
        }
        for i in &insts {
            assert!(i.params.deform().iter().all(|v| v.iter().all(|x| x.abs() < 1e-15)));
        }
    }

    #[test]
    fn m_step_mean_and_rebase() {
        let ds: Vec<Vec<Vec3>> =
            (0..3).map(|s| (0..42).map(|v| [0.01 * (s * v) as f64, -0.02 * s as f64, 0.003 * v as f64]).collect()).collect();
        let (mut insts, state, cfg) = with_deforms(&ds);
        let before: Vec<Vec<Vec3>> = insts.iter().map(|i| i.vertices(&state.template)).collect();
        let out = m_step(&mut insts, &state, &cfg).unwrap();
        let mut subset = out.shape_subset.clone();
        subset.sort();
        assert_eq!(subset, vec![0, 1, 2]);
        for v in 0..42 {
            for k in 0..3 {
                let mean = (ds[0][v][k] + ds[1][v][k] + ds[2][v][k]) / 3.0;
                let inc = out.state.template.vertices[v][k] - state.template.vertices[v][k];
                assert!((inc - mean).abs() < 1e-12);
            }
        }
        for (inst, old) in insts.iter().zip(&before) {
            for (a, b) in inst.vertices(&out.state.template).iter().zip(old) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn m_step_is_permutation_invariant() {
        let ds: Vec<Vec<Vec3>> = (0..3).map(|s| (0..42).map(|v| [0.01 * (s + v) as f64, 0.0, -0.004 * s as f64]).collect()).collect();
        let (mut a, state, cfg) = with_deforms(&ds);
        let rev: Vec<Vec<Vec3>> = ds.iter().rev().cloned().collect();
        let (mut b, _, _) = with_deforms(&rev);
        let ta = m_step(&mut a, &state, &cfg).unwrap().state.template.vertices;
        let tb = m_step(&mut b, &state, &cfg).unwrap().state.template.vertices;
        for (x, y) in ta.iter().zip(&tb) {
            for k in 0..3 {
                assert!((x[k] - y[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pseudo_label_thresholds() {
        let (mut insts, state, cfg) = with_deforms(&[vec![[0.0; 3]; 42], vec![[0.0; 3]; 42]]);
        let state = m_step(&mut insts, &state, &cfg).unwrap().state;
        let none = pseudo_labels(&insts, &state, &cfg.raster, 0.0).unwrap();
        assert!(none.selected.iter().all(|s| !s) && none.labels.iter().all(|l| l.is_none()));
        let all = pseudo_labels(&insts, &state, &cfg.raster, f64::INFINITY).unwrap();
        assert!(all.selected.iter().all(|&s| s));
        let canonical = state.canonical.as_ref().unwrap();
        let probs = render_part_probs(&state.template, &insts[0].camera(), canonical, &state.mapping, &cfg.raster).unwrap();
        let sil = render_silhouette(&state.template, &insts[0].camera(), &cfg.raster).unwrap();
        let labels = all.labels[0].as_ref().unwrap();
        for m in 0..labels.len() {
            if sil.data[m] < 0.5 {
                assert_eq!(labels[m], 2);
            } else {
                let p = probs.pixel(m / probs.width, m % probs.width);
                assert!(p[labels[m]] >= p.iter().cloned().fold(0.0, f64::max) - 1e-12);
            }
        }
    }

    #[test]
    fn median_loss_drops_during_e_step() {
        let cfg = TrainConfig { e_epochs: 40, ..small_cfg() };
        let state = CategoryState::sphere(1, 16).unwrap();
        let mut insts: Vec<Instance> = (0..3)
            .map(|i| {
                let cam = Camera { scale: 0.4 + 0.1 * i as f64, translation: [0.1 * i as f64 - 0.1, 0.0], ..Camera::default() };
                rendered_instance(&state, &cam, &cfg)
            })
            .collect();
        let log = e_step(&mut insts, &state, &cfg).unwrap();
        let median = |step: usize| {
            let mut v: Vec<f64> = log.iter().filter(|l| l.step == step).map(|l| l.total).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(median(40) < median(1));
    }
}
