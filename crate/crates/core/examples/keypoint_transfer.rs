//! Keypoint transfer between instances through the fitted cameras and
//! through the texture flows, after a short fit.
//!
//!     cargo run --release --example keypoint_transfer

use semrecon::io::RunConfig;
use semrecon::run::{fit_run, keypoint_transfer};
use semrecon::train::TrainConfig;

fn main() -> semrecon::Result<()> {
    let mut train = TrainConfig { e_epochs: 60, k_select: Some(6), ..Default::default() };
    train.weights.w_sp = 20.0;
    train.weights.w_sv = 2.0;
    let cfg = RunConfig { train, instances: 6, ..Default::default() };
    let run = fit_run(&cfg, std::env::temp_dir().join("semrecon-kt"))?;
    let s = keypoint_transfer(&run.state, &run.instances, cfg.alpha)?;
    let f = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.1}"));
    println!("pairs {}  PCK@{} camera {}  flow {}", s.n_pairs, cfg.alpha, f(s.pck_camera), f(s.pck_flow));
    Ok(())
}
