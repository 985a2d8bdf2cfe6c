//! Weak-perspective camera: rotate, drop depth, scale, translate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Vec2, Vec3};

/// Number of scalar parameters of a camera: scale, translation (2), quaternion (4).
pub const CAMERA_PARAMS: usize = 7;

pub type Quat = [f64; 4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub scale: f64,
    #[serde(rename = "trans")]
    pub translation: [f64; 2],
    /// `[w, x, y, z]`; projection normalizes internally.
    #[serde(rename = "quat")]
    pub rotation: Quat,
}

impl Default for Camera {
    fn default() -> Self {
        Camera { scale: 1.0, translation: [0.0, 0.0], rotation: [1.0, 0.0, 0.0, 0.0] }
    }
}

impl Camera {
    pub fn new(scale: f64, translation: [f64; 2], rotation: Quat) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::param(format!("camera scale must be positive, got {scale}")));
        }
        normalize_rotation(&Camera { scale, translation, rotation })
    }

    pub fn to_params(&self) -> [f64; CAMERA_PARAMS] {
        let q = self.rotation;
        [self.scale, self.translation[0], self.translation[1], q[0], q[1], q[2], q[3]]
    }

    pub fn from_params(p: &[f64]) -> Self {
        Camera { scale: p[0], translation: [p[1], p[2]], rotation: [p[3], p[4], p[5], p[6]] }
    }

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        quat_to_matrix(quat_normalize(self.rotation))
    }

    /// Pre-multiplies the rotation by `q`, i.e. rotates the object by the
    /// current pose first and then by `q`.
    pub fn rotated_by(&self, q: Quat) -> Camera {
        Camera { rotation: quat_mul(q, quat_normalize(self.rotation)), ..*self }
    }
}

pub fn quat_normalize(q: Quat) -> Quat {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    q.map(|x| x / n)
}

pub fn quat_mul(a: Quat, b: Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_from_axis_angle(axis: Vec3, angle: f64) -> Quat {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (s, c) = (0.5 * angle).sin_cos();
    [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n]
}

pub fn quat_to_matrix(q: Quat) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Renormalizes the quaternion to unit length.
pub fn normalize_rotation(cam: &Camera) -> Result<Camera> {
    let q = cam.rotation;
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(n > 1e-8) {
        return Err(Error::numerical(format!("quaternion norm {n} too small to normalize")));
    }
    Ok(Camera { rotation: q.map(|x| x / n), ..*cam })
}

/// Projected 2D positions and the rotated depth used for z-ordering.
#[derive(Clone, Debug, Default)]
pub struct Projection {
    pub xy: Vec<Vec2>,
    pub depth: Vec<f64>,
}

pub fn project(points: &[Vec3], cam: &Camera) -> Vec<Vec2> {
    project_with_depth(points, cam).xy
}

/// Weak-perspective projection `scale * (R p).xy + t`, keeping `(R p).z`.
/// Larger depth is closer to the viewer.
pub fn project_with_depth(points: &[Vec3], cam: &Camera) -> Projection {
    let r = cam.rotation_matrix();
    let mut xy = Vec::with_capacity(points.len());
    let mut depth = Vec::with_capacity(points.len());
    for p in points {
        let rp = mat_vec(&r, p);
        xy.push([cam.scale * rp[0] + cam.translation[0], cam.scale * rp[1] + cam.translation[1]]);
        depth.push(rp[2]);
    }
    Projection { xy, depth }
}

#[inline]
fn mat_vec(r: &[[f64; 3]; 3], p: &Vec3) -> Vec3 {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

/// Backpropagates gradients on projected positions and depths.
///
/// Returns the gradient with respect to the camera's seven raw parameters and
/// accumulates point gradients into `point_grad` when given.
pub fn project_backward(
    points: &[Vec3],
    cam: &Camera,
    grad_xy: &[Vec2],
    grad_depth: Option<&[f64]>,
    mut point_grad: Option<&mut [Vec3]>,
) -> [f64; CAMERA_PARAMS] {
    let qn = (cam.rotation.iter().map(|x| x * x).sum::<f64>()).sqrt();
    let q = cam.rotation.map(|x| x / qn);
    let r = quat_to_matrix(q);
    let mut g_scale = 0.0;
    let mut g_t = [0.0; 2];
    let mut g_r = [[0.0; 3]; 3];
    for (i, p) in points.iter().enumerate() {
        let g = grad_xy[i];
        let gz = grad_depth.map_or(0.0, |d| d[i]);
        if g[0] == 0.0 && g[1] == 0.0 && gz == 0.0 {
            continue;
        }
        let rp = mat_vec(&r, p);
        g_scale += g[0] * rp[0] + g[1] * rp[1];
        g_t[0] += g[0];
        g_t[1] += g[1];
        let g_rp = [cam.scale * g[0], cam.scale * g[1], gz];
        for a in 0..3 {
            for b in 0..3 {
                g_r[a][b] += g_rp[a] * p[b];
            }
        }
        if let Some(pg) = point_grad.as_deref_mut() {
            for b in 0..3 {
                pg[i][b] += r[0][b] * g_rp[0] + r[1][b] * g_rp[1] + r[2][b] * g_rp[2];
            }
        }
    }
    let g_qhat = matrix_grad_to_quat(&g_r, q);
    let dot: f64 = (0..4).map(|k| g_qhat[k] * q[k]).sum();
    let g_q: [f64; 4] = std::array::from_fn(|k| (g_qhat[k] - q[k] * dot) / qn);
    [g_scale, g_t[0], g_t[1], g_q[0], g_q[1], g_q[2], g_q[3]]
}

fn matrix_grad_to_quat(g: &[[f64; 3]; 3], q: Quat) -> Quat {
    let [w, x, y, z] = q;
    let gw = 2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let gx = 2.0 * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2] + z * g[2][0]
        + w * g[2][1]
        - 2.0 * x * g[2][2]);
    let gy = 2.0 * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0]
        + z * g[2][1]
        - 2.0 * y * g[2][2]);
    let gz = 2.0 * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
        + y * g[1][2]
        + x * g[2][0]
        + y * g[2][1]);
    [gw, gx, gy, gz]
}

/// K camera hypotheses with the latest total loss of each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraHypotheses {
    pub cameras: Vec<Camera>,
    pub scores: Vec<f64>,
}

impl CameraHypotheses {
    /// Index of the lowest score; ties go to the lowest index.
    pub fn best(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s < self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// `k` cameras at azimuths `2 pi i / k` about the vertical axis, elevation 0.
///
/// With more than one hypothesis each azimuth is jittered by seeded Gaussian
/// noise with a 5 degree standard deviation.
pub fn init_hypotheses(k: usize, seed: u64) -> Result<CameraHypotheses> {
    if k == 0 {
        return Err(Error::param("at least one camera hypothesis is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 5f64.to_radians()).expect("valid sigma");
    let cameras = (0..k)
        .map(|i| {
            let mut az = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            if k > 1 {
                az += noise.sample(&mut rng);
            }
            Camera { rotation: quat_from_axis_angle([0.0, 1.0, 0.0], az), ..Camera::default() }
        })
        .collect();
    Ok(CameraHypotheses { cameras, scores: vec![f64::INFINITY; k] })
}
