//! File formats and run artifacts.
//!
//! TNSR layout: magic `TNSR`, `u32` version 1, `u32` rank, one `u32` per
//! dimension, then little-endian `f32` payload, row-major with the last
//! dimension fastest.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::eval::KeypointSet;
use crate::geometry::{Mesh, Vec3};
use crate::grid::Image;
use crate::losses::{LossReport, Observation};
use crate::synth::{Scene, SynthConfig, Truth};
use crate::texflow::{CanonicalUV, PartMap};
use crate::train::{CategoryState, Instance, LogLine, TrainConfig};

/// Tags an io error with the path it concerns.
fn at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

const TNSR_MAGIC: &[u8; 4] = b"TNSR";
const TNSR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::param(format!("tensor of shape {dims:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { dims, data })
    }

    /// `H x W x C`, values rounded to `f32`.
    pub fn from_image(img: &Image) -> Self {
        Tensor { dims: vec![img.height, img.width, img.channels], data: img.data.iter().map(|&x| x as f32).collect() }
    }

    pub fn to_image(&self) -> Result<Image> {
        match self.dims[..] {
            [h, w, c] => Image::from_vec(h, w, c, self.data.iter().map(|&x| x as f64).collect()),
            [h, w] => Image::from_vec(h, w, 1, self.data.iter().map(|&x| x as f64).collect()),
            _ => Err(Error::format(format!("expected a rank 2 or 3 tensor, got shape {:?}", self.dims))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TNSR_MAGIC);
        out.extend_from_slice(&TNSR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
                .ok_or_else(|| Error::format("truncated TNSR header"))
        };
        if bytes.len() < 12 || &bytes[..4] != TNSR_MAGIC {
            return Err(Error::format("missing TNSR magic"));
        }
        let version = word(4)?;
        if version != TNSR_VERSION {
            return Err(Error::format(format!("unsupported TNSR version {version}")));
        }
        let rank = word(8)? as usize;
        let dims: Vec<usize> = (0..rank).map(|k| word(12 + 4 * k).map(|d| d as usize)).collect::<Result<_>>()?;
        let start = 12 + 4 * rank;
        let n: usize = dims.iter().product();
        if bytes.len() != start + 4 * n {
            return Err(Error::format(format!("TNSR payload has {} bytes, expected {}", bytes.len() - start, 4 * n)));
        }
        let data = bytes[start..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("four bytes"))).collect();
        Ok(Tensor { dims, data })
    }
}

pub fn write_tnsr(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, t.to_bytes())?;
    Ok(())
}

pub fn read_tnsr(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    Tensor::from_bytes(&fs::read(path).map_err(at(path))?)
}

/// Wavefront OBJ with positions, optional texture coordinates and triangles.
/// Coordinates are written in shortest round-trip form.
pub fn obj_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        s.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    let uv = mesh.has_uv();
    if uv {
        for t in &mesh.uvs {
            s.push_str(&format!("vt {} {}\n", t[0], t[1]));
        }
    }
    for (j, f) in mesh.faces.iter().enumerate() {
        if uv {
            let t = mesh.face_uvs[j];
            s.push_str(&format!("f {}/{} {}/{} {}/{}\n", f[0] + 1, t[0] + 1, f[1] + 1, t[1] + 1, f[2] + 1, t[2] + 1));
        } else {
            s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
        }
    }
    s
}

pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut uvs = Vec::new();
    let mut faces = Vec::new();
    let mut face_uvs = Vec::new();
    let num = |tok: Option<&str>, line: usize| -> Result<f64> {
        tok.and_then(|t| t.parse().ok()).ok_or_else(|| Error::format(format!("bad number on OBJ line {line}")))
    };
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let mut it = raw.split_whitespace();
        match it.next() {
            Some("v") => vertices.push([num(it.next(), line)?, num(it.next(), line)?, num(it.next(), line)?]),
            Some("vt") => uvs.push([num(it.next(), line)?, num(it.next(), line)?]),
            Some("f") => {
                let corners: Vec<&str> = it.collect();
                if corners.len() != 3 {
                    return Err(Error::format(format!("OBJ line {line}: only triangles are supported")));
                }
                let mut f = [0; 3];
                let mut t = [0; 3];
                let mut has_t = true;
                for (c, tok) in corners.iter().enumerate() {
                    let mut parts = tok.split('/');
                    let idx = |p: Option<&str>| -> Option<usize> {
                        p.filter(|s| !s.is_empty()).and_then(|s| s.parse::<usize>().ok()).filter(|&i| i > 0).map(|i| i - 1)
                    };
                    f[c] = idx(parts.next()).ok_or_else(|| Error::format(format!("OBJ line {line}: bad face index")))?;
                    match idx(parts.next()) {
                        Some(i) => t[c] = i,
                        None => has_t = false,
                    }
                }
                faces.push(f);
                if has_t {
                    face_uvs.push(t);
                }
            }
            _ => {}
        }
    }
    if !face_uvs.is_empty() && face_uvs.len() != faces.len() {
        return Err(Error::format("OBJ mixes faces with and without texture coordinates"));
    }
    let mesh = if face_uvs.is_empty() {
        Mesh::new(vertices, faces)
    } else {
        Mesh::with_uvs(vertices, faces, uvs, face_uvs)
    };
    mesh.map_err(|e| Error::format(format!("OBJ does not describe a valid mesh: {e}")))
}

pub fn write_obj(path: impl AsRef<Path>, mesh: &Mesh) -> Result<()> {
    fs::write(path, obj_string(mesh))?;
    Ok(())
}

pub fn read_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    parse_obj(&fs::read_to_string(path).map_err(at(path))?)
}

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit PNG from a 1- or 3-channel image with values in `[0, 1]`.
pub fn write_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::param(format!("PNG export needs 1 or 3 channels, got {c}"))),
    };
    let w = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(w, img.width as u32, img.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data.iter().map(|&x| to_u8(x)).collect();
    let mut writer = enc.write_header().map_err(|e| Error::format(e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::format(e.to_string()))?;
    writer.finish().map_err(|e| Error::format(e.to_string()))?;
    Ok(())
}

/// Reads a PNG as values in `[0, 1]`: grayscale files give one channel,
/// color files three. Alpha is dropped.
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let r = BufReader::new(fs::File::open(path).map_err(at(path))?);
    let mut dec = png::Decoder::new(r);
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| Error::format(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format("PNG too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (src, dst) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::format("unexpanded palette PNG")),
    };
    let mut data = Vec::with_capacity(h * w * dst);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        for px in row[..w * src].chunks(src) {
            data.extend(px[..dst].iter().map(|&b| b as f64 / 255.0));
        }
    }
    Image::from_vec(h, w, dst, data)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    serde_json::from_str(&fs::read_to_string(path).map_err(at(path))?)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    fs::read_to_string(path)
        .map_err(at(path))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// A scene directory: `image.png`, `mask.png`, `parts.tnsr` and optionally
/// `keypoints.json` and `truth.json`.
#[derive(Clone, Debug)]
pub struct SceneBundle {
    pub name: String,
    pub image: Image,
    /// Binary, `> 127` on disk is foreground.
    pub mask: Vec<f64>,
    pub parts: PartMap,
    pub keypoints: Option<KeypointSet>,
    pub truth: Option<Truth>,
}

impl From<Scene> for SceneBundle {
    fn from(s: Scene) -> Self {
        SceneBundle {
            name: s.name,
            image: s.image,
            mask: s.mask,
            parts: s.parts,
            keypoints: Some(s.keypoints),
            truth: Some(s.truth),
        }
    }
}

impl SceneBundle {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_png(dir.join("image.png"), &self.image)?;
        let mask = Image::from_vec(self.image.height, self.image.width, 1, self.mask.clone())?;
        write_png(dir.join("mask.png"), &mask)?;
        write_tnsr(dir.join("parts.tnsr"), &Tensor::from_image(&self.parts.probs))?;
        if let Some(k) = &self.keypoints {
            write_json(dir.join("keypoints.json"), k)?;
        }
        if let Some(t) = &self.truth {
            write_json(dir.join("truth.json"), t)?;
        }
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let name = dir.file_name().map_or_else(|| "scene".to_string(), |n| n.to_string_lossy().into_owned());
        let image = read_png(dir.join("image.png"))?;
        if image.channels != 3 {
            return Err(Error::format(format!("{}: image.png must be color", dir.display())));
        }
        let m = read_png(dir.join("mask.png"))?;
        if m.height != image.height || m.width != image.width {
            return Err(Error::format(format!("{}: mask and image sizes differ", dir.display())));
        }
        // first channel of a gray or color mask
        let mask = m.data.chunks(m.channels).map(|p| if p[0] * 255.0 > 127.5 { 1.0 } else { 0.0 }).collect();
        let probs = read_tnsr(dir.join("parts.tnsr"))?.to_image()?;
        if probs.height != image.height || probs.width != image.width {
            return Err(Error::format(format!("{}: parts and image sizes differ", dir.display())));
        }
        for px in probs.data.chunks(probs.channels) {
            if (px.iter().sum::<f64>() - 1.0).abs() > 1e-3 {
                return Err(Error::format(format!("{}: parts pixel is off the simplex", dir.display())));
            }
        }
        let parts = PartMap::renormalized(probs)?;
        let opt = |f: &str| dir.join(f).exists().then(|| dir.join(f));
        let keypoints: Option<KeypointSet> = opt("keypoints.json").map(read_json).transpose()?;
        if let Some(k) = &keypoints {
            k.validate()?;
        }
        let truth = opt("truth.json").map(read_json).transpose()?;
        Ok(SceneBundle { name, image, mask, parts, keypoints, truth })
    }

    /// An unfitted instance; `seed` drives its part-point subsampling.
    pub fn instance(&self, state: &CategoryState, seed: u64) -> Result<Instance> {
        let obs = Observation::new(self.image.clone(), self.mask.clone(), self.parts.clone(), seed)?;
        let mut inst = Instance::new(&self.name, obs, state)?;
        inst.keypoints = self.keypoints.clone();
        Ok(inst)
    }
}

/// Scene directories directly under `dir`, sorted by name.
pub fn read_scene_dir(dir: impl AsRef<Path>) -> Result<Vec<SceneBundle>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir.as_ref())
        .map_err(at(dir.as_ref()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("mask.png").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::param(format!("no scene bundles in {}", dir.as_ref().display())));
    }
    dirs.iter().map(SceneBundle::read).collect()
}

/// Everything a command-line run reads from its configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Directory of scene bundles. Without it runs fit synthetic scenes.
    pub data: Option<PathBuf>,
    /// Number of synthetic scenes when no data directory is given.
    pub instances: usize,
    /// PCK threshold as a fraction of the longer image side.
    pub alpha: f64,
    /// Largest combined semantic loss accepted for a pseudo label.
    pub pseudo_label_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            data: None,
            instances: 8,
            alpha: 0.1,
            pseudo_label_threshold: 0.05,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.instances == 0 {
            return Err(Error::param("instances must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::param("alpha must be positive"));
        }
        Ok(())
    }
}

/// Fitted unknowns of one instance as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub name: String,
    pub camera: Camera,
    pub deformation: Vec<Vec3>,
    pub failure: Option<String>,
    pub report: Option<LossReport>,
}

#[derive(Serialize, Deserialize)]
struct RoundInfo {
    /// The round whose E-step runs next.
    next_round: usize,
}

/// Writes a round directory: `template.obj`, `canonical.tnsr`, `labels.tnsr`,
/// `params.json`, `flow.tnsr` (instances x H x W x 2), `loss.jsonl` and
/// `state.json`.
pub fn write_checkpoint(dir: impl AsRef<Path>, state: &CategoryState, instances: &[Instance], log: &[LogLine]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_obj(dir.join("template.obj"), &state.template)?;
    if let Some(c) = &state.canonical {
        write_tnsr(dir.join("canonical.tnsr"), &Tensor::from_image(&c.probs))?;
        let labels: Vec<f32> = state.labels.iter().map(|&l| l as f32).collect();
        write_tnsr(dir.join("labels.tnsr"), &Tensor::new(vec![labels.len()], labels)?)?;
    }
    let records: Vec<InstanceRecord> = instances
        .iter()
        .map(|i| InstanceRecord {
            name: i.name.clone(),
            camera: i.camera(),
            deformation: i.params.deform(),
            failure: i.failure.clone(),
            report: i.report.clone(),
        })
        .collect();
    write_json(dir.join("params.json"), &records)?;
    let (h, w) = (state.mapping.height, state.mapping.width);
    let mut flow = Vec::with_capacity(instances.len() * h * w * 2);
    for i in instances {
        flow.extend(i.params.flow().coords.iter().flat_map(|c| [c[0] as f32, c[1] as f32]));
    }
    write_tnsr(dir.join("flow.tnsr"), &Tensor::new(vec![instances.len(), h, w, 2], flow)?)?;
    write_jsonl(dir.join("loss.jsonl"), log)?;
    write_json(dir.join("state.json"), &RoundInfo { next_round: state.round })?;
    Ok(())
}

/// Restores the category state and the fitted instances of a round
/// directory. `scenes` supply the observations and must match the stored
/// instance names in order.
pub fn read_checkpoint(dir: impl AsRef<Path>, scenes: &[SceneBundle], cfg: &TrainConfig) -> Result<(CategoryState, Vec<Instance>)> {
    let dir = dir.as_ref();
    let round = read_json::<RoundInfo>(dir.join("state.json"))?.next_round;
    let template = read_obj(dir.join("template.obj"))?;
    let base = CategoryState::sphere(cfg.template_subdivisions, cfg.uv_size)?;
    if template.faces != base.template.faces {
        return Err(Error::format("checkpoint template topology differs from the configured sphere"));
    }
    let state = if dir.join("canonical.tnsr").exists() {
        let probs = read_tnsr(dir.join("canonical.tnsr"))?.to_image()?;
        if probs.height != base.mapping.height || probs.width != base.mapping.width {
            return Err(Error::format("canonical map size differs from the configured uv size"));
        }
        let canonical = CanonicalUV { probs, sample_count: 1 };
        CategoryState::with_canonical(template, base.mapping, canonical, round)?
    } else {
        CategoryState { template, round, ..base }
    };
    let records: Vec<InstanceRecord> = read_json(dir.join("params.json"))?;
    if records.len() != scenes.len() || records.iter().zip(scenes).any(|(r, s)| r.name != s.name) {
        return Err(Error::param("checkpoint instances do not match the scenes"));
    }
    let flow = read_tnsr(dir.join("flow.tnsr"))?;
    let (h, w) = (state.mapping.height, state.mapping.width);
    if flow.dims != [records.len(), h, w, 2] {
        return Err(Error::format(format!("flow.tnsr has shape {:?}", flow.dims)));
    }
    let per = h * w * 2;
    let mut out = Vec::with_capacity(records.len());
    for (k, (r, s)) in records.into_iter().zip(scenes).enumerate() {
        let mut inst = s.instance(&state, cfg.seed + k as u64)?;
        if r.deformation.len() != state.template.vertices.len() {
            return Err(Error::format(format!("{}: deformation length mismatch", r.name)));
        }
        inst.params.set_deform(&r.deformation);
        inst.params.set_camera(0, &r.camera);
        let coords = flow.data[k * per..(k + 1) * per].chunks(2).map(|c| [c[0] as f64, c[1] as f64]).collect();
        inst.params.set_flow(&crate::texflow::TextureFlow::new(h, w, coords)?);
        inst.failure = r.failure;
        inst.report = r.report;
        out.push(inst);
    }
    Ok((state, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_sphere;
    use crate::synth::synth;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn tnsr_round_trip_is_bit_exact(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back.dims, t.dims);
            prop_assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn tnsr_header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"TNSR");
        assert_eq!(b[4..8], 1u32.to_le_bytes());
        assert_eq!(b[8..12], 2u32.to_le_bytes());
        assert_eq!(b.len(), 12 + 8 + 8);
        assert_eq!(b[20..24], 1.0f32.to_le_bytes());
    }

    #[test]
    fn tnsr_rejects_bad_input() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = t.to_bytes();
        assert!(matches!(Tensor::from_bytes(&b[..b.len() - 1]), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Tensor::from_bytes(&bad).is_err());
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(Tensor::from_bytes(&v2).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn obj_round_trip_keeps_topology_and_positions() {
        let mut mesh = make_sphere(2).unwrap();
        for (i, v) in mesh.vertices.iter_mut().enumerate() {
            v[0] += 1e-3 * (i as f64).sin();
        }
        let back = parse_obj(&obj_string(&mesh)).unwrap();
        assert_eq!(back.faces, mesh.faces);
        assert_eq!(back.face_uvs, mesh.face_uvs);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-9 * b[k].abs().max(1e-300));
            }
        }
        assert!(back.is_watertight());
    }

    #[test]
    fn obj_accepts_plain_faces_and_rejects_quads() {
        let m = parse_obj("# tri\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2]]);
        assert!(!m.has_uv());
        assert!(parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n").is_err());
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }

    #[test]
    fn png_round_trip_quantizes_to_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..4 * 5 * 3).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = Image::from_vec(4, 5, 3, data).unwrap();
        write_png(dir.path().join("a.png"), &img).unwrap();
        let back = read_png(dir.path().join("a.png")).unwrap();
        assert_eq!((back.height, back.width, back.channels), (4, 5, 3));
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() < 1e-12));
        let gray = Image::from_vec(2, 2, 1, vec![0.0, 0.2, 0.7, 1.0]).unwrap();
        write_png(dir.path().join("g.png"), &gray).unwrap();
        let g = read_png(dir.path().join("g.png")).unwrap();
        assert_eq!(g.channels, 1);
        assert!(g.data.iter().zip(&gray.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0));
    }

    #[test]
    fn scene_bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = synth(1, 3, &SynthConfig { image_size: 24, ..Default::default() }).unwrap().remove(0);
        let bundle = SceneBundle::from(scene);
        let path = dir.path().join(&bundle.name);
        bundle.write(&path).unwrap();
        let back = SceneBundle::read(&path).unwrap();
        assert_eq!(back.name, bundle.name);
        assert_eq!(back.mask, bundle.mask);
        assert_eq!(back.keypoints, bundle.keypoints);
        assert_eq!(back.truth, bundle.truth);
        assert_eq!(back.parts.probs.channels, bundle.parts.probs.channels);
        assert!(back.parts.probs.data.iter().zip(&bundle.parts.probs.data).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(back.image.data.iter().zip(&bundle.image.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
        assert_eq!(read_scene_dir(dir.path()).unwrap().len(), 1);
    }

    #[test]
    fn run_config_rejects_unknown_keys_and_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"rounds": 3}}"#).unwrap();
        assert_eq!(cfg.train.rounds, 3);
        assert_eq!(cfg.train.e_epochs, TrainConfig::default().e_epochs);
        assert_eq!(cfg.alpha, 0.1);
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"round": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"alpah": 0.2}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"weights": {"w_ioux": 1}}}"#).is_err());
        let echoed: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { uv_size: 8, template_subdivisions: 1, ..Default::default() };
        let state = CategoryState::sphere(1, 8).unwrap();
        let scenes: Vec<SceneBundle> = synth(2, 4, &SynthConfig { image_size: 16, subdivisions: 1, ..Default::default() })
            .unwrap()
            .into_iter()
            .map(SceneBundle::from)
            .collect();
        let mut insts: Vec<Instance> = scenes.iter().map(|s| s.instance(&state, 0).unwrap()).collect();
        insts[1].params.set_camera(0, &Camera { scale: 0.3, translation: [0.1, -0.2], rotation: [0.6, 0.8, 0.0, 0.0] });
        let n = state.template.vertices.len();
        insts[1].params.set_deform(&vec![[0.25, -0.5, 0.125]; n]);
        let log = vec![];
        write_checkpoint(dir.path(), &state, &insts, &log).unwrap();
        let (st, back) = read_checkpoint(dir.path(), &scenes, &cfg).unwrap();
        assert_eq!(st.round, 1);
        assert_eq!(st.template.faces, state.template.faces);
        assert_eq!(back[1].camera(), insts[1].camera());
        assert_eq!(back[1].params.deform(), insts[1].params.deform());
        assert!(read_jsonl::<LogLine>(dir.path().join("loss.jsonl")).unwrap().is_empty());
    }
}
