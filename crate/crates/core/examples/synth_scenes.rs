//! Writes synthetic scene bundles: image, mask, part maps, keypoints and the
//! true camera and deformation.
//!
//!     cargo run --release --example synth_scenes -- /tmp/scenes 6

use semrecon::io::SceneBundle;
use semrecon::run::write_scenes;
use semrecon::synth::{synth, SynthConfig};

fn main() -> semrecon::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "scenes".into());
    let n = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);
    let scenes = synth(n, 0, &SynthConfig::default())?;
    for s in &scenes {
        let fg = s.mask.iter().filter(|&&m| m > 0.5).count();
        let visible = s.keypoints.points.iter().filter(|k| k.visible).count();
        println!("{}  foreground {fg:>4} px  keypoints visible {visible}/4  scale {:.3}", s.name, s.truth.camera.scale);
    }
    let bundles: Vec<SceneBundle> = scenes.into_iter().map(SceneBundle::from).collect();
    write_scenes(&out, &bundles)?;
    println!("wrote {} scenes to {out}", bundles.len());
    Ok(())
}
