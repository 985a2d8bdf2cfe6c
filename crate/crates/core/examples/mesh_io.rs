//! OBJ, TNSR and PNG round trips for a UV-mapped icosphere.
//!
//!     cargo run --release --example mesh_io -- out_dir

use semrecon::geometry::{build_uv_mapping, make_sphere};
use semrecon::io::{read_obj, read_tnsr, write_obj, write_png, write_tnsr, Tensor};
use semrecon::softras::{render_silhouette, RasterConfig};
use semrecon::camera::Camera;

fn main() -> semrecon::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "mesh_io".into()));
    std::fs::create_dir_all(&out)?;
    let mesh = make_sphere(2)?;
    write_obj(out.join("sphere.obj"), &mesh)?;
    let back = read_obj(out.join("sphere.obj"))?;
    println!("obj: {} vertices, {} faces, identical {}", back.vertices.len(), back.faces.len(), back == mesh);

    let mapping = build_uv_mapping(&mesh, 32, 32)?;
    let faces: Vec<f32> = mapping.entries.iter().map(|e| e.face as f32).collect();
    let t = Tensor::new(vec![32, 32], faces)?;
    write_tnsr(out.join("texel_faces.tnsr"), &t)?;
    println!("tnsr: dims {:?}, identical {}", t.dims, read_tnsr(out.join("texel_faces.tnsr"))? == t);

    let cam = Camera { scale: 0.5, ..Camera::default() };
    write_png(out.join("sphere.png"), &render_silhouette(&mesh, &cam, &RasterConfig::default())?)?;
    println!("wrote {}", out.display());
    Ok(())
}
