//! Central differences against the analytic gradient of every loss term.
//!
//!     cargo run --release --example check_gradients -- [seed]

use semrecon::run::{gradcheck, GRADCHECK_TOLERANCE};

fn main() -> semrecon::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1);
    let checks = gradcheck(seed)?;
    println!("{:<6} {:>10} {:>10} {:>10}", "term", "deform", "camera", "flow");
    for c in &checks {
        println!("{:<6} {:>10.2e} {:>10.2e} {:>10.2e}", c.term, c.deform, c.camera, c.flow);
    }
    let worst = checks.iter().map(|c| c.worst()).fold(0.0, f64::max);
    println!("worst {worst:.2e}, tolerance {GRADCHECK_TOLERANCE:.0e}");
    Ok(())
}
