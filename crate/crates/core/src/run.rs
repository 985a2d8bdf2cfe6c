//! Workflows behind the command line verbs. Each writes its artifacts under
//! an output directory and returns what it computed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{check_scene, check_terms, TermCheck};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::eval::{kt_camera, kt_flow, mask_iou, seen_faces};
use crate::geometry::{apply_deformation, argmax_lowest, make_sphere, Deformation, Mesh, Vec3};
use crate::grid::Image;
use crate::io::{read_checkpoint, read_scene_dir, write_checkpoint, write_json, write_jsonl, RunConfig, SceneBundle};
use crate::softras::{render_silhouette, RasterConfig};
use crate::synth::synth;
use crate::texflow::CanonicalUV;
use crate::train::{fit, CategoryState, Instance, LogLine};

/// Finite-difference step and sample count of the gradient check.
pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_SAMPLES: usize = 40;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// The scenes of a run: the bundles under `cfg.data`, or `cfg.instances`
/// synthetic scenes drawn from `cfg.train.seed`.
pub fn load_scenes(cfg: &RunConfig) -> Result<Vec<SceneBundle>> {
    match &cfg.data {
        Some(dir) => read_scene_dir(dir),
        None => Ok(synth(cfg.instances, cfg.train.seed, &cfg.synth)?.into_iter().map(SceneBundle::from).collect()),
    }
}

pub fn write_scenes(dir: impl AsRef<Path>, scenes: &[SceneBundle]) -> Result<()> {
    for s in scenes {
        s.write(dir.as_ref().join(&s.name))?;
    }
    Ok(())
}

/// Fresh instances; instance `i` subsamples its part points with `seed + i`.
pub fn instances(scenes: &[SceneBundle], state: &CategoryState, seed: u64) -> Result<Vec<Instance>> {
    scenes.iter().enumerate().map(|(i, s)| s.instance(state, seed + i as u64)).collect()
}

pub struct RunOutcome {
    pub state: CategoryState,
    pub instances: Vec<Instance>,
    pub scenes: Vec<SceneBundle>,
    pub log: Vec<LogLine>,
}

/// Full EM fit. Writes `config.json` (the resolved configuration), the
/// scenes when they are synthetic, one `round<r>/` checkpoint per round and
/// the whole `loss.jsonl`.
pub fn fit_run(cfg: &RunConfig, out: impl AsRef<Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let scenes = load_scenes(cfg)?;
    let mut resolved = cfg.clone();
    if cfg.data.is_none() {
        let dir = out.join("scenes");
        write_scenes(&dir, &scenes)?;
        resolved.data = Some(dir);
    }
    write_json(out.join("config.json"), &resolved)?;
    let state = CategoryState::sphere(cfg.train.template_subdivisions, cfg.train.uv_size)?;
    let mut insts = instances(&scenes, &state, cfg.train.seed)?;
    let outcome = fit(&mut insts, state, &cfg.train, |st, insts, log| {
        write_checkpoint(out.join(format!("round{}", st.round - 1)), st, insts, log)
    })?;
    write_jsonl(out.join("loss.jsonl"), &outcome.log)?;
    Ok(RunOutcome { state: outcome.state, instances: insts, scenes, log: outcome.log })
}

/// Reopens a round directory written by [`fit_run`] against the scenes of
/// `cfg`.
pub fn open_checkpoint(cfg: &RunConfig, dir: impl AsRef<Path>) -> Result<(CategoryState, Vec<Instance>, Vec<SceneBundle>)> {
    let scenes = load_scenes(cfg)?;
    let (state, insts) = read_checkpoint(dir, &scenes, &cfg.train)?;
    Ok((state, insts, scenes))
}

/// Finite-difference check of every loss term on the small check scene.
pub fn gradcheck(seed: u64) -> Result<Vec<TermCheck>> {
    let (ctx, obs, params) = check_scene(seed)?;
    check_terms(&ctx, &obs, &params, GRADCHECK_STEP, GRADCHECK_SAMPLES, seed)
}

/// A camera and optional per-vertex offsets, as in `truth.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub camera: Camera,
    #[serde(default)]
    pub deformation: Vec<Vec3>,
}

/// Silhouette of `template` deformed by `params`.
pub fn render_params(template: &Mesh, params: &RenderParams, raster: &RasterConfig) -> Result<Image> {
    let mesh = if params.deformation.is_empty() {
        template.clone()
    } else {
        apply_deformation(template, &Deformation { offsets: params.deformation.clone() })?
    };
    render_silhouette(&mesh, &params.camera, raster)
}

/// The template used when none is given: the configured icosphere.
pub fn default_template(cfg: &RunConfig) -> Result<Mesh> {
    make_sphere(cfg.train.template_subdivisions)
}

/// Hard IoU of every instance's silhouette against its mask; `None` for
/// failed instances.
pub fn instance_ious(state: &CategoryState, insts: &[Instance], raster: &RasterConfig) -> Result<Vec<Option<f64>>> {
    insts
        .iter()
        .map(|i| {
            if i.failed() {
                return Ok(None);
            }
            let sil = render_silhouette(&i.mesh(&state.template)?, &i.camera(), raster)?;
            mask_iou(&sil.data, &i.obs.mask, 0.5).map(Some)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub pck_flow: Option<f64>,
    pub pck_camera: Option<f64>,
    pub mean_iou: Option<f64>,
    pub n_pairs: usize,
}

/// Keypoint transfer over all ordered pairs of usable instances with
/// keypoints. PCK pools the evaluated keypoints of every pair.
pub fn keypoint_transfer(state: &CategoryState, insts: &[Instance], alpha: f64) -> Result<EvalSummary> {
    let usable: Vec<&Instance> = insts.iter().filter(|i| !i.failed() && i.keypoints.is_some()).collect();
    let n_faces = state.template.faces.len();
    let (mut hit_f, mut hit_c, mut n_f, mut n_c, mut pairs) = (0.0, 0.0, 0usize, 0usize, 0);
    for (a, src) in usable.iter().enumerate() {
        for (b, tgt) in usable.iter().enumerate() {
            if a == b {
                continue;
            }
            let (ks, kt) = (src.keypoints.as_ref().expect("filtered"), tgt.keypoints.as_ref().expect("filtered"));
            let size = (tgt.obs.image.height, tgt.obs.image.width);
            let seen = seen_faces(&src.vertices(&state.template), &state.template.faces, &src.camera());
            let (sf, tf) = (src.params.flow(), tgt.params.flow());
            let f = kt_flow(&sf, &tf, &state.mapping, n_faces, Some(&seen), ks, kt, alpha, size)?;
            let c = kt_camera(
                &src.camera(),
                &tgt.camera(),
                &src.vertices(&state.template),
                &tgt.vertices(&state.template),
                &state.template.faces,
                ks,
                kt,
                alpha,
                size,
            )?;
            hit_f += f.pck * f.evaluated as f64 / 100.0;
            hit_c += c.pck * c.evaluated as f64 / 100.0;
            n_f += f.evaluated;
            n_c += c.evaluated;
            pairs += 1;
        }
    }
    let pct = |h: f64, n: usize| (n > 0).then(|| 100.0 * h / n as f64);
    Ok(EvalSummary { pck_flow: pct(hit_f, n_f), pck_camera: pct(hit_c, n_c), mean_iou: None, n_pairs: pairs })
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

const LABEL_COLORS: [[f64; 3]; 8] = [
    [0.9, 0.3, 0.2],
    [0.2, 0.4, 0.9],
    [0.3, 0.8, 0.3],
    [0.9, 0.8, 0.3],
    [0.7, 0.3, 0.8],
    [0.3, 0.8, 0.8],
    [0.9, 0.5, 0.7],
    [0.5, 0.5, 0.5],
];

/// Color preview of a label map; `background` is drawn black.
pub fn label_preview(labels: &[usize], height: usize, width: usize, background: usize) -> Result<Image> {
    let data = labels
        .iter()
        .flat_map(|&l| if l == background { [0.0; 3] } else { LABEL_COLORS[l % LABEL_COLORS.len()] })
        .collect();
    Image::from_vec(height, width, 3, data)
}

/// Most likely part per texel; `usize::MAX` where the map holds no mass.
pub fn canonical_argmax(c: &CanonicalUV) -> Vec<usize> {
    c.probs.data.chunks(c.parts()).map(|p| if p.iter().sum::<f64>() > 0.0 { argmax_lowest(p) } else { usize::MAX }).collect()
}

/// `dir/round<r>` for the last round of a run directory.
pub fn last_round_dir(run: impl AsRef<Path>) -> Result<PathBuf> {
    let mut best: Option<(usize, PathBuf)> = None;
    for e in fs::read_dir(run.as_ref())? {
        let p = e?.path();
        let r = p.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_prefix("round")).and_then(|n| n.parse().ok());
        if let Some(r) = r {
            if best.as_ref().is_none_or(|(b, _)| r > *b) {
                best = Some((r, p));
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| Error::param(format!("no round directories in {}", run.as_ref().display())))
}
