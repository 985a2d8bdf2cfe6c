//! Synthetic scenes: a bumpy sphere with a head and a tail, four surface
//! parts, rendered from a random camera.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{project_with_depth, quat_from_axis_angle, quat_mul, Camera};
use crate::error::{Error, Result};
use crate::eval::{Keypoint, KeypointSet};
use crate::geometry::{make_sphere, Mesh, UVMapping, Vec3};
use crate::grid::Image;
use crate::softras::{rasterize_projected, visible_faces, CornerAttrs, RasterConfig};
use crate::texflow::{CanonicalUV, PartMap};

pub const N_PARTS: usize = 4;
pub const PART_NAMES: [&str; N_PARTS] = ["head", "tail", "back", "belly"];
const PART_COLORS: [[f64; 3]; N_PARTS] = [[0.9, 0.3, 0.2], [0.2, 0.4, 0.9], [0.3, 0.8, 0.3], [0.9, 0.8, 0.3]];
const HEAD_DIR: Vec3 = [0.8, 0.25, 0.55];
const TAIL_DIR: Vec3 = [-0.8, 0.35, -0.45];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub subdivisions: u32,
    /// Half-ranges of the camera angles in degrees.
    pub azimuth: f64,
    pub elevation: f64,
    pub roll: f64,
    pub scale: [f64; 2],
    pub translation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            subdivisions: 2,
            azimuth: 30.0,
            elevation: 15.0,
            roll: 8.0,
            scale: [0.42, 0.5],
            translation: 0.06,
        }
    }
}

/// What generated a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub camera: Camera,
    /// Offsets from the unit icosphere, one per vertex.
    pub deformation: Vec<Vec3>,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub name: String,
    pub image: Image,
    pub mask: Vec<f64>,
    /// `H x W x (N_PARTS + 1)`, background last.
    pub parts: PartMap,
    pub keypoints: KeypointSet,
    pub truth: Truth,
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Part of a point on the unit sphere.
pub fn part_of(p: Vec3) -> usize {
    if dot(p, unit(HEAD_DIR)) > 0.7 {
        0
    } else if dot(p, unit(TAIL_DIR)) > 0.75 {
        1
    } else if p[1] >= 0.0 {
        2
    } else {
        3
    }
}

/// Part per vertex of the unit icosphere.
pub fn vertex_parts(sphere: &Mesh) -> Vec<usize> {
    sphere.vertices.iter().map(|&v| part_of(unit(v))).collect()
}

/// The canonical map implied by the vertex parts: each texel interpolates
/// the one-hot parts of its face corners.
pub fn truth_canonical(sphere: &Mesh, mapping: &UVMapping) -> CanonicalUV {
    let labels = vertex_parts(sphere);
    let mut data = vec![0.0; mapping.len() * N_PARTS];
    for (t, e) in mapping.entries.iter().enumerate() {
        for (c, &v) in sphere.faces[e.face].iter().enumerate() {
            data[t * N_PARTS + labels[v]] += e.bary[c];
        }
    }
    CanonicalUV {
        probs: Image { height: mapping.height, width: mapping.width, channels: N_PARTS, data },
        sample_count: 1,
    }
}

/// Seeded shape: an elongated head bump and a smaller tail bump.
pub fn deformation(sphere: &Mesh, rng: &mut impl Rng) -> Vec<Vec3> {
    let head = unit(HEAD_DIR);
    let tail = unit(TAIL_DIR);
    let a_head = rng.random_range(0.55..0.7);
    let a_tail = rng.random_range(0.22..0.32);
    let stretch = rng.random_range(0.0..0.1);
    sphere
        .vertices
        .iter()
        .map(|&v| {
            let n = unit(v);
            let bump = a_head * (-(1.0 - dot(n, head)) / 0.18).exp() + a_tail * (-(1.0 - dot(n, tail)) / 0.08).exp();
            let r = bump + stretch * n[0] * n[0];
            [n[0] * r, n[1] * r, n[2] * r]
        })
        .collect()
}

pub fn random_camera(cfg: &SynthConfig, rng: &mut impl Rng) -> Camera {
    let az = rng.random_range(-cfg.azimuth..=cfg.azimuth).to_radians();
    let el = rng.random_range(-cfg.elevation..=cfg.elevation).to_radians();
    let roll = rng.random_range(-cfg.roll..=cfg.roll).to_radians();
    let q = quat_mul(
        quat_from_axis_angle([0.0, 0.0, 1.0], roll),
        quat_mul(quat_from_axis_angle([1.0, 0.0, 0.0], el), quat_from_axis_angle([0.0, 1.0, 0.0], az)),
    );
    Camera {
        scale: rng.random_range(cfg.scale[0]..=cfg.scale[1]),
        translation: [
            rng.random_range(-cfg.translation..=cfg.translation),
            rng.random_range(-cfg.translation..=cfg.translation),
        ],
        rotation: q,
    }
}

/// Renderer used for scene masks and part maps: near-hard edges.
pub fn scene_raster(size: usize) -> RasterConfig {
    RasterConfig { sigma: 1e-6, gamma: 1e-5, ..RasterConfig::with_size(size, size) }
}

/// Renders a scene of `mesh` (icosphere topology) under `camera`.
pub fn render_scene(name: &str, sphere: &Mesh, truth: Truth, size: usize) -> Result<Scene> {
    if truth.deformation.len() != sphere.vertices.len() {
        return Err(Error::param("truth deformation does not match the sphere"));
    }
    let vertices: Vec<Vec3> =
        sphere.vertices.iter().zip(&truth.deformation).map(|(v, d)| [v[0] + d[0], v[1] + d[1], v[2] + d[2]]).collect();
    let labels = vertex_parts(sphere);
    let proj = project_with_depth(&vertices, &truth.camera);
    let rot = truth.camera.rotation_matrix();
    let light = unit([0.3, 0.5, 1.0]);
    // colors per corner: vertex part color times the face's lambert shade
    let mut data = Vec::with_capacity(sphere.faces.len() * 3 * (3 + N_PARTS));
    for f in &sphere.faces {
        let [a, b, c] = f.map(|v| vertices[v]);
        let n = cross3([b[0] - a[0], b[1] - a[1], b[2] - a[2]], [c[0] - a[0], c[1] - a[1], c[2] - a[2]]);
        let n = unit([dot(rot[0], n), dot(rot[1], n), dot(rot[2], n)]);
        let shade = 0.35 + 0.65 * dot(n, light).max(0.0);
        for &v in f {
            let col = PART_COLORS[labels[v]];
            data.extend(col.iter().map(|c| c * shade));
            data.extend((0..N_PARTS).map(|k| if k == labels[v] { 1.0 } else { 0.0 }));
        }
    }
    let attrs = CornerAttrs { channels: 3 + N_PARTS, data };
    let cfg = scene_raster(size);
    let out = rasterize_projected(&proj, &sphere.faces, &attrs, &cfg)?;
    let px = size * size;
    let mask: Vec<f64> = out.silhouette.iter().map(|&s| if s > 0.5 { 1.0 } else { 0.0 }).collect();
    let mut image = Image::zeros(size, size, 3);
    let mut parts = Image::zeros(size, size, N_PARTS + 1);
    for m in 0..px {
        let row = &out.blend[m * (3 + N_PARTS)..(m + 1) * (3 + N_PARTS)];
        if mask[m] == 0.0 {
            parts.data[m * (N_PARTS + 1) + N_PARTS] = 1.0;
            continue;
        }
        image.data[m * 3..m * 3 + 3].copy_from_slice(&row[..3]);
        let p = &row[3..];
        let mut best = 0;
        for k in 1..N_PARTS {
            if p[k] > p[best] {
                best = k;
            }
        }
        parts.data[m * (N_PARTS + 1) + best] = 1.0;
    }
    let keypoints = keypoints(&vertices, sphere, &proj, &cfg);
    Ok(Scene { name: name.to_string(), image, mask, parts: PartMap::new(parts)?, keypoints, truth })
}

fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Head tip, tail tip, top and bottom. A keypoint is visible when one of
/// its faces is.
fn keypoints(vertices: &[Vec3], sphere: &Mesh, proj: &crate::camera::Projection, cfg: &RasterConfig) -> KeypointSet {
    let argmax = |f: &dyn Fn(Vec3) -> f64| {
        let mut best = 0;
        for (i, &v) in vertices.iter().enumerate() {
            if f(v) > f(vertices[best]) {
                best = i;
            }
        }
        best
    };
    let head = unit(HEAD_DIR);
    let tail = unit(TAIL_DIR);
    let picks = [
        ("head", argmax(&|v| dot(v, head))),
        ("tail", argmax(&|v| dot(v, tail))),
        ("top", argmax(&|v| v[1])),
        ("bottom", argmax(&|v| -v[1])),
    ];
    let vis = visible_faces(proj, &sphere.faces, cfg);
    let points = picks
        .iter()
        .map(|&(name, v)| {
            let xy = proj.xy[v];
            let inside = xy.iter().all(|c| (-1.0..=1.0).contains(c));
            let seen = vis.iter().any(|&j| sphere.faces[j].contains(&v));
            Keypoint { name: name.to_string(), xy, visible: inside && seen }
        })
        .collect();
    KeypointSet { points }
}

/// `n` scenes from one seed. Shapes and cameras are drawn from the same
/// stream so a seed fixes the whole set.
pub fn synth(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::param("synth needs at least one scene"));
    }
    let sphere = make_sphere(cfg.subdivisions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let deformation = deformation(&sphere, &mut rng);
            let camera = random_camera(cfg, &mut rng);
            render_scene(&format!("scene_{i:03}"), &sphere, Truth { camera, deformation }, cfg.image_size)
        })
        .collect()
}
