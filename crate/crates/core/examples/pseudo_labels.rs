//! Part labels rendered from reconstructions. Here the cameras and shapes
//! are the true ones, so the labels should reproduce the input part maps.
//!
//!     cargo run --release --example pseudo_labels -- out_dir

use semrecon::geometry::make_sphere;
use semrecon::io::{write_png, SceneBundle};
use semrecon::run::{instances, label_preview};
use semrecon::synth::{scene_raster, synth, truth_canonical, SynthConfig, N_PARTS};
use semrecon::train::{pseudo_labels, CategoryState};

fn main() -> semrecon::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "labels".into()));
    std::fs::create_dir_all(&out)?;
    let scenes: Vec<SceneBundle> = synth(4, 2, &SynthConfig::default())?.into_iter().map(SceneBundle::from).collect();
    let sphere = make_sphere(2)?;
    let base = CategoryState::sphere(2, 64)?;
    let canonical = truth_canonical(&sphere, &base.mapping);
    let state = CategoryState::with_canonical(sphere, base.mapping, canonical, 2)?;
    let mut insts = instances(&scenes, &state, 0)?;
    for (i, s) in insts.iter_mut().zip(&scenes) {
        let t = s.truth.as_ref().expect("synthetic scene");
        i.params.set_camera(0, &t.camera);
        i.params.set_deform(&t.deformation);
    }
    let pl = pseudo_labels(&insts, &state, &scene_raster(64), f64::INFINITY)?;
    for ((s, labels), score) in scenes.iter().zip(&pl.labels).zip(&pl.scores) {
        let Some(labels) = labels else { continue };
        let truth = s.parts.argmax();
        let fg: Vec<usize> = (0..labels.len()).filter(|&m| s.mask[m] > 0.5).collect();
        let agree = fg.iter().filter(|&&m| labels[m] == truth[m]).count();
        println!("{}  score {:.4}  agreement {:.1}%", s.name, score.unwrap_or(f64::NAN), 100.0 * agree as f64 / fg.len() as f64);
        write_png(out.join(format!("{}.png", s.name)), &label_preview(labels, 64, 64, N_PARTS)?)?;
    }
    Ok(())
}
