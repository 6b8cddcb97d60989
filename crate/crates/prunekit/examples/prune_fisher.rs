//! Fisher prune-and-tune: train a small network, then alternately fine-tune
//! and remove the channel with the lowest estimated loss impact, printing
//! the (params, error) trajectory as it shrinks.
//!
//! ```bash
//! cargo run --release --example prune_fisher
//! ```

use prunekit::arch::make_wrn;
use prunekit::data::{make_synthetic, Split};
use prunekit::net::{BuildMode, Network};
use prunekit::prune::{prune_and_tune, PruneConfig, PruneMethod, StopCondition};
use prunekit::train::{evaluate, train, TrainConfig};

fn main() -> prunekit::Result<()> {
    let mut desc = make_wrn(10, 1.0, 1.0)?;
    desc.input_resolution = 16;
    let data = make_synthetic(desc.classes, 100, desc.input_resolution, 11)?;

    let train_cfg = TrainConfig {
        epochs: 3,
        batch: 64,
        milestones: vec![2],
        seed: 11,
        ..TrainConfig::default()
    };
    let mut network = Network::build(&desc, BuildMode::Masked, train_cfg.seed)?;
    train(&mut network, &train_cfg, &data)?;

    let mut prune_cfg = PruneConfig::new(PruneMethod::Fisher, StopCondition::ChannelsPruned(16));
    prune_cfg.steps_between_prunes = 10;
    prune_cfg.batch = 32;
    prune_cfg.fine_tune_lr = train_cfg.final_lr();
    prune_cfg.seed = 11;

    let mut evaluator = |net: &Network| evaluate(net, &data, Split::Test);
    let outcome = prune_and_tune(network, &prune_cfg, &data, &mut evaluator)?;

    println!("event  channels  params   error%");
    for e in &outcome.trajectory.entries {
        println!(
            "{:5}  {:8}  {:6}  {:6.2}",
            e.event, e.channels_pruned, e.params, e.test_error_percent
        );
    }
    println!("\nremovals (block, channel, saliency):");
    for (event, block, channel, delta) in outcome.decisions.iter().take(8) {
        println!("  event {event}: block {} channel {channel} (delta {delta:.3e})", block.0);
    }
    let csv = std::env::temp_dir().join("prunekit-example-trajectory.csv");
    std::fs::write(&csv, outcome.trajectory.to_csv())?;
    println!("trajectory csv written to {}", csv.display());
    Ok(())
}
