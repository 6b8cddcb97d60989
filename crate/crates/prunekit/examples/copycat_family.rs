//! Scale a pruning profile into a family of architectures: each block's
//! live channel count becomes alpha * n_m, giving networks from a fraction
//! of the original size up past it.
//!
//! ```bash
//! cargo run --release --example copycat_family
//! ```

use prunekit::accounting::cost_report;
use prunekit::arch::{extract_profile, make_copycat, make_wrn};
use prunekit::blocks::BlockId;
use prunekit::net::{BuildMode, Network};

fn main() -> prunekit::Result<()> {
    // a hand-pruned profile standing in for a real pruning run
    let desc = make_wrn(16, 2.0, 1.0)?;
    let mut network = Network::build(&desc, BuildMode::Masked, 1)?;
    for (block, drop) in [(0usize, 20), (1, 8), (2, 30), (3, 12), (4, 40), (5, 16)] {
        for c in 0..drop {
            network.apply_mask(BlockId(block), c)?;
        }
    }
    let profile = extract_profile(&network);
    println!("source profile: {} of {} channels pruned",
        profile.total_pruned(),
        profile.entries.iter().map(|e| e.n_o).sum::<usize>());

    println!("\nalpha   params      macs        n_m per block");
    for alpha in [0.25, 0.5, 1.0, 1.5, 2.0] {
        let scaled = make_copycat(&profile, alpha)?;
        let cost = cost_report(&scaled)?;
        let channels: Vec<usize> = scaled.profile.iter().map(|e| e.n_m).collect();
        println!("{alpha:<6} {:>9}  {:>10}  {channels:?}", cost.params, cost.macs);
    }
    Ok(())
}
