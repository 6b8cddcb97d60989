//! Benchmark single-image inference latency: a masked (pruned-in-place)
//! network against its compacted form, which does strictly less work.
//!
//! ```bash
//! cargo run --release --example bench_inference
//! ```

use prunekit::arch::make_wrn;
use prunekit::bench::{bench_inference, compare, comparison_csv};
use prunekit::net::{BuildMode, Network};

fn main() -> prunekit::Result<()> {
    let desc = make_wrn(16, 2.0, 1.0)?;
    let mut masked = Network::build(&desc, BuildMode::Masked, 3)?;
    // prune 40% of each block's intermediate channels in place
    for mask in masked.masks() {
        let drop = mask.slots() * 2 / 5;
        for c in 0..drop {
            masked.apply_mask(mask.block, c)?;
        }
    }
    let compacted = masked.compact();

    println!("benchmarking (single image, single-threaded timed region)...");
    let a = bench_inference(&masked, 32, 5, 20, false)?;
    let b = bench_inference(&compacted, 32, 5, 20, false)?;

    for (label, r) in [("masked", &a), ("compacted", &b)] {
        println!(
            "{label:<10} {:>9} params  median {:.6}s  IQR {:.6}s  {:.3e} MACs/s",
            r.params, r.median_latency_seconds, r.iqr_seconds, r.throughput_macs_per_second
        );
    }
    let rows = compare(&[a, b], &[None, None])?;
    println!("\ncomparison table (fastest first):\n{}", comparison_csv(&rows));
    Ok(())
}
