//! Starting from a camera turned half way round, a silhouette alone is
//! matched just as well by the flipped pose. The part terms with several
//! hypotheses find the true one.
//!
//!     cargo run --release --example flipped_camera

use semrecon::experiments::ambiguity_trial;

fn main() -> semrecon::Result<()> {
    println!("{:<6} {:<28} {:>6} {:>10} {:>8}", "seed", "setting", "iou", "start deg", "end deg");
    for seed in 0..3 {
        for (name, semantics, k) in [("silhouette, 1 hypothesis", false, 1), ("with parts, 8 hypotheses", true, 8)] {
            let t = ambiguity_trial(seed, semantics, k)?;
            println!("{seed:<6} {name:<28} {:>6.3} {:>10.1} {:>8.1}", t.iou, t.start_error, t.rotation_error);
        }
    }
    Ok(())
}
