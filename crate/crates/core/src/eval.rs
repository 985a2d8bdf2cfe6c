//! Mask IoU, keypoint transfer and pose error.

use serde::{Deserialize, Serialize};

use crate::camera::{project, project_with_depth, quat_normalize, Camera, Quat};
use crate::error::{Error, Result};
use crate::geometry::{UVMapping, Vec2, Vec3};
use crate::softras::{visible_faces, RasterConfig};
use crate::texflow::TextureFlow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub xy: Vec2,
    pub visible: bool,
}

/// Named 2D points in normalized image coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn validate(&self) -> Result<()> {
        for k in &self.points {
            if k.visible && !k.xy.iter().all(|c| (-1.0..=1.0).contains(c)) {
                return Err(Error::param(format!("visible keypoint {} lies outside the image", k.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Keypoint> {
        self.points.iter().find(|k| k.name == name)
    }
}

/// Hard IoU after thresholding `rendered` at `threshold` and `gt` at 0.5.
/// Two empty masks agree perfectly.
pub fn mask_iou(rendered: &[f64], gt: &[f64], threshold: f64) -> Result<f64> {
    if rendered.len() != gt.len() {
        return Err(Error::param("mask sizes differ"));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&r, &g) in rendered.iter().zip(gt) {
        let (a, b) = (r > threshold, g > 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Outcome of transferring the source keypoints onto a target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    /// Percentage of evaluated keypoints within the threshold.
    pub pck: f64,
    pub evaluated: usize,
    /// Prediction per source keypoint, `None` when it could not be placed.
    pub predictions: Vec<Option<Vec2>>,
}

/// PCK of `predictions` (one per `source` keypoint) against the keypoints of
/// the same name in `target`. A keypoint counts when it is visible in both;
/// distances are measured in pixels of an `h x w` image and normalized by
/// `max(h, w)`.
pub fn pck(
    source: &KeypointSet,
    target: &KeypointSet,
    predictions: &[Option<Vec2>],
    alpha: f64,
    h: usize,
    w: usize,
) -> (f64, usize) {
    let side = h.max(w) as f64;
    let mut n = 0;
    let mut hit = 0;
    for (k, pred) in source.points.iter().zip(predictions) {
        let Some(t) = target.get(&k.name) else { continue };
        if !(k.visible && t.visible) {
            continue;
        }
        n += 1;
        if let Some(p) = pred {
            let dx = (p[0] - t.xy[0]) * w as f64 / 2.0;
            let dy = (p[1] - t.xy[1]) * h as f64 / 2.0;
            if dx.hypot(dy) / side <= alpha {
                hit += 1;
            }
        }
    }
    (if n == 0 { 100.0 } else { 100.0 * hit as f64 / n as f64 }, n)
}

/// Keypoint transfer through the texture flows: each source keypoint picks
/// the texel whose source flow coordinate is nearest, that texel's face is
/// looked up in the UV mapping, and the prediction is the mean target flow
/// coordinate over the face's texels. With `src_seen`, only texels of those
/// faces are candidates.
#[allow(clippy::too_many_arguments)]
pub fn kt_flow(
    src_flow: &TextureFlow,
    tgt_flow: &TextureFlow,
    mapping: &UVMapping,
    n_faces: usize,
    src_seen: Option<&[usize]>,
    src_kp: &KeypointSet,
    tgt_kp: &KeypointSet,
    alpha: f64,
    image_size: (usize, usize),
) -> Result<Transfer> {
    if src_flow.coords.len() != mapping.len() || tgt_flow.coords.len() != mapping.len() {
        return Err(Error::param("flow grids do not match the uv mapping"));
    }
    let texels = mapping.texels_per_face(n_faces);
    let mut candidate = vec![src_seen.is_none(); mapping.len()];
    for &j in src_seen.unwrap_or(&[]) {
        for &t in texels.get(j).ok_or_else(|| Error::param("seen face out of range"))? {
            candidate[t] = true;
        }
    }
    if !candidate.contains(&true) {
        candidate.fill(true);
    }
    let predictions = src_kp
        .points
        .iter()
        .map(|k| {
            let mut best = (0, f64::INFINITY);
            for (t, c) in src_flow.coords.iter().enumerate().filter(|&(t, _)| candidate[t]) {
                let d = (c[0] - k.xy[0]).powi(2) + (c[1] - k.xy[1]).powi(2);
                if d < best.1 {
                    best = (t, d);
                }
            }
            let face = mapping.entries[best.0].face;
            let ts = &texels[face];
            if ts.is_empty() {
                return None;
            }
            let mut m = [0.0; 2];
            for &t in ts {
                m[0] += tgt_flow.coords[t][0];
                m[1] += tgt_flow.coords[t][1];
            }
            Some([m[0] / ts.len() as f64, m[1] / ts.len() as f64])
        })
        .collect::<Vec<_>>();
    let (pck, evaluated) = pck(src_kp, tgt_kp, &predictions, alpha, image_size.0, image_size.1);
    Ok(Transfer { pck, evaluated, predictions })
}

/// Faces turned toward `cam` and not hidden behind another face.
pub fn seen_faces(vertices: &[Vec3], faces: &[[usize; 3]], cam: &Camera) -> Vec<usize> {
    let any_size = RasterConfig { sigma: 0.0, ..RasterConfig::default() };
    visible_faces(&project_with_depth(vertices, cam), faces, &any_size)
}

/// Keypoint transfer through the cameras: the vertex whose source projection
/// is nearest each keypoint is projected with the target camera. Only
/// vertices of faces seen by the source camera are candidates, falling back
/// to all vertices when none is seen.
#[allow(clippy::too_many_arguments)]
pub fn kt_camera(
    src_cam: &Camera,
    tgt_cam: &Camera,
    src_vertices: &[Vec3],
    tgt_vertices: &[Vec3],
    faces: &[[usize; 3]],
    src_kp: &KeypointSet,
    tgt_kp: &KeypointSet,
    alpha: f64,
    image_size: (usize, usize),
) -> Result<Transfer> {
    if src_vertices.len() != tgt_vertices.len() || src_vertices.is_empty() {
        return Err(Error::param("source and target meshes must share a non-empty vertex set"));
    }
    if faces.iter().flatten().any(|&v| v >= src_vertices.len()) {
        return Err(Error::param("face references a missing vertex"));
    }
    let sp = project(src_vertices, src_cam);
    let tp = project(tgt_vertices, tgt_cam);
    let mut seen = vec![false; sp.len()];
    for j in seen_faces(src_vertices, faces, src_cam) {
        for &v in &faces[j] {
            seen[v] = true;
        }
    }
    if !seen.contains(&true) {
        seen.fill(true);
    }
    let predictions = src_kp
        .points
        .iter()
        .map(|k| {
            let mut best = (0, f64::INFINITY);
            for (v, p) in sp.iter().enumerate().filter(|&(v, _)| seen[v]) {
                let d = (p[0] - k.xy[0]).powi(2) + (p[1] - k.xy[1]).powi(2);
                if d < best.1 {
                    best = (v, d);
                }
            }
            Some(tp[best.0])
        })
        .collect::<Vec<_>>();
    let (pck, evaluated) = pck(src_kp, tgt_kp, &predictions, alpha, image_size.0, image_size.1);
    Ok(Transfer { pck, evaluated, predictions })
}

/// Geodesic angle between two rotations in degrees, insensitive to the sign
/// of either quaternion.
pub fn rotation_error(q: Quat, q_gt: Quat) -> f64 {
    let a = quat_normalize(q);
    let b = quat_normalize(q_gt);
    let dot: f64 = (0..4).map(|k| a[k] * b[k]).sum::<f64>().abs().min(1.0);
    2.0 * dot.acos().to_degrees()
}
