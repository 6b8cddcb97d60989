//! Parameter and MAC accounting for the builtin architecture descriptors.
//!
//! ```bash
//! cargo run --example count_builtins
//! ```

use prunekit::accounting::cost_report;
use prunekit::cli::{builtin_descriptor, builtin_names};

fn main() -> prunekit::Result<()> {
    println!("{:<22} {:>12} {:>15}  res", "network", "params", "macs");
    for name in builtin_names() {
        let desc = builtin_descriptor(name)?;
        let cost = cost_report(&desc)?;
        println!(
            "{:<22} {:>12} {:>15}  {}",
            name, cost.params, cost.macs, desc.input_resolution
        );
    }

    // per-layer breakdown for one of them
    let desc = builtin_descriptor("resnet9")?;
    let cost = cost_report(&desc)?;
    println!("\nresnet9 breakdown:");
    for layer in &cost.breakdown {
        println!("  {:<18} {:>10} params {:>12} macs", layer.layer, layer.params, layer.macs);
    }
    Ok(())
}
