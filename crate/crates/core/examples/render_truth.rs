//! Renders a synthetic scene from its true camera and deformation and
//! compares the silhouette with the stored mask.
//!
//!     cargo run --release --example render_truth -- out.png

use semrecon::eval::mask_iou;
use semrecon::geometry::make_sphere;
use semrecon::io::write_png;
use semrecon::run::{render_params, RenderParams};
use semrecon::synth::{scene_raster, synth, SynthConfig};

fn main() -> semrecon::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "render.png".into());
    let cfg = SynthConfig::default();
    let scene = synth(1, 7, &cfg)?.remove(0);
    let params = RenderParams { camera: scene.truth.camera, deformation: scene.truth.deformation.clone() };
    let sil = render_params(&make_sphere(cfg.subdivisions)?, &params, &scene_raster(cfg.image_size))?;
    println!("iou against mask {:.4}", mask_iou(&sil.data, &scene.mask, 0.5)?);
    write_png(&out, &sil)?;
    println!("wrote {out}");
    Ok(())
}
