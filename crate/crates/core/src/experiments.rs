//! Synthetic experiments with known answers: recovery of cameras from a
//! batch of scenes, and the flipped-camera ambiguity on a single scene.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{quat_from_axis_angle, quat_mul, Camera};
use crate::error::{Error, Result};
use crate::eval::{mask_iou, rotation_error};
use crate::geometry::make_sphere;
use crate::io::{RunConfig, SceneBundle};
use crate::losses::{LossWeights, Observation};
use crate::softras::render_silhouette;
use crate::synth::{synth, truth_canonical, SynthConfig};
use crate::train::{e_step, CategoryState, Instance, TrainConfig};

/// Eight synthetic scenes fitted for two rounds. The M-step pools all
/// instances and the semantic terms are weighted up from the defaults.
pub fn recovery_config(seed: u64) -> RunConfig {
    let mut train = TrainConfig { seed, k_select: Some(8), ..Default::default() };
    train.weights.w_sp = 20.0;
    train.weights.w_sv = 2.0;
    RunConfig { train, instances: 8, ..Default::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub name: String,
    pub iou: Option<f64>,
    /// Degrees between the fitted and the true camera rotation.
    pub rotation_error: Option<f64>,
}

impl RecoveryRow {
    pub fn recovered(&self, min_iou: f64, max_degrees: f64) -> bool {
        self.iou.is_some_and(|i| i >= min_iou) && self.rotation_error.is_some_and(|e| e <= max_degrees)
    }
}

/// Fitted instances against the ground truth of their scenes.
pub fn recovery_rows(
    state: &CategoryState,
    insts: &[Instance],
    scenes: &[SceneBundle],
    cfg: &TrainConfig,
) -> Result<Vec<RecoveryRow>> {
    insts
        .iter()
        .zip(scenes)
        .map(|(i, s)| {
            if i.failed() {
                return Ok(RecoveryRow { name: i.name.clone(), iou: None, rotation_error: None });
            }
            let sil = render_silhouette(&i.mesh(&state.template)?, &i.camera(), &cfg.raster)?;
            let truth = s.truth.as_ref().ok_or_else(|| Error::param(format!("{} has no ground truth", s.name)))?;
            Ok(RecoveryRow {
                name: i.name.clone(),
                iou: Some(mask_iou(&sil.data, &i.obs.mask, 0.5)?),
                rotation_error: Some(rotation_error(i.camera().rotation, truth.camera.rotation)),
            })
        })
        .collect()
}

/// Half-turn about the vertical image axis composed with a seeded tilt of
/// up to ten degrees.
pub fn flipped_camera(truth: &Camera, seed: u64) -> Camera {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let tilt = quat_from_axis_angle(axis, rng.random_range(0.0..10f64).to_radians());
    truth.rotated_by(quat_mul(tilt, quat_from_axis_angle([0.0, 1.0, 0.0], std::f64::consts::PI)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityTrial {
    pub seed: u64,
    pub start_error: f64,
    pub iou: f64,
    pub rotation_error: f64,
}

/// Fits one synthetic scene whose template and canonical map are the true
/// ones, starting from the flipped camera. The deformation is free. With
/// `semantics` off only the silhouette and the mesh regularizers act;
/// `k_hyp` hypotheses are spread in azimuth around the start.
pub fn ambiguity_trial(seed: u64, semantics: bool, k_hyp: usize) -> Result<AmbiguityTrial> {
    let scene = synth(1, 100 + seed, &SynthConfig::default())?.remove(0);
    let sphere = make_sphere(2)?;
    let mut template = sphere.clone();
    for (v, d) in template.vertices.iter_mut().zip(&scene.truth.deformation) {
        for k in 0..3 {
            v[k] += d[k];
        }
    }
    let base = CategoryState::sphere(2, 64)?;
    let canonical = truth_canonical(&sphere, &base.mapping);
    let state = CategoryState::with_canonical(template, base.mapping, canonical, 2)?;
    let defaults = LossWeights::default();
    let weights = LossWeights {
        w_img: 0.0,
        w_tcyc: 0.0,
        w_def: 0.0,
        w_sp: if semantics { defaults.w_sp } else { 0.0 },
        w_sv: if semantics { defaults.w_sv } else { 0.0 },
        ..defaults
    };
    let cfg = TrainConfig { k_hyp, deform_lr_scale: 1.0, seed, weights, ..Default::default() };
    let obs = Observation::new(scene.image.clone(), scene.mask.clone(), scene.parts.clone(), seed)?;
    let mut inst = Instance::new(&scene.name, obs, &state)?;
    let start = flipped_camera(&scene.truth.camera, seed);
    inst.params.set_camera(0, &start);
    e_step(std::slice::from_mut(&mut inst), &state, &cfg)?;
    if let Some(f) = &inst.failure {
        return Err(Error::numerical(f.clone()));
    }
    let sil = render_silhouette(&inst.mesh(&state.template)?, &inst.camera(), &cfg.raster)?;
    Ok(AmbiguityTrial {
        seed,
        start_error: rotation_error(start.rotation, scene.truth.camera.rotation),
        iou: mask_iou(&sil.data, &scene.mask, 0.5)?,
        rotation_error: rotation_error(inst.camera().rotation, scene.truth.camera.rotation),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flipped_camera_is_near_a_half_turn() {
        let truth = Camera { rotation: quat_from_axis_angle([0.2, 1.0, 0.1], 0.4), ..Camera::default() };
        for seed in 0..5 {
            let e = rotation_error(flipped_camera(&truth, seed).rotation, truth.rotation);
            assert!((170.0..=180.0).contains(&e), "{e}");
        }
    }

    #[test]
    fn recovery_config_is_valid() {
        let c = recovery_config(0);
        c.validate().unwrap();
        assert_eq!(c.train.rounds, 2);
        assert_eq!(c.train.subset_size(8), 8);
    }
}
