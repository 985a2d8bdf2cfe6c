//! Two EM rounds on eight synthetic scenes, then per-instance mask IoU and
//! camera error against the ground truth. Takes about half a minute.
//!
//!     cargo run --release --example recover_cameras -- [seed]

use semrecon::experiments::{recovery_config, recovery_rows};
use semrecon::run::fit_run;

fn main() -> semrecon::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let cfg = recovery_config(seed);
    let dir = std::env::temp_dir().join(format!("semrecon-recovery-{seed}"));
    let t = std::time::Instant::now();
    let run = fit_run(&cfg, &dir)?;
    println!("fit in {:.1}s, checkpoints in {}", t.elapsed().as_secs_f64(), dir.display());
    let rows = recovery_rows(&run.state, &run.instances, &run.scenes, &cfg.train)?;
    println!("{:<10} {:>6} {:>8}", "instance", "iou", "deg");
    for r in &rows {
        let f = |x: Option<f64>| x.map_or("failed".to_string(), |v| format!("{v:.3}"));
        println!("{:<10} {:>6} {:>8}", r.name, f(r.iou), f(r.rotation_error));
    }
    let ok = rows.iter().filter(|r| r.recovered(0.95, 10.0)).count();
    println!("{ok}/{} within iou 0.95 and 10 degrees", rows.len());
    Ok(())
}
