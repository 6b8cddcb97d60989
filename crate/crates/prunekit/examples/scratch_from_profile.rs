//! Prune a network, extract its channel profile, then train the compacted
//! architecture from scratch with fresh weights and compare the two.
//!
//! ```bash
//! cargo run --release --example scratch_from_profile
//! ```

use prunekit::arch::{extract_profile, make_wrn};
use prunekit::data::{make_synthetic, Split};
use prunekit::net::{BuildMode, Network};
use prunekit::prune::{prune_and_tune, scratch_train_from_profile, PruneConfig, PruneMethod, StopCondition};
use prunekit::train::{evaluate, train, TrainConfig};

fn main() -> prunekit::Result<()> {
    let mut desc = make_wrn(10, 1.0, 1.0)?;
    desc.input_resolution = 16;
    let data = make_synthetic(desc.classes, 100, desc.input_resolution, 5)?;
    let train_cfg = TrainConfig { epochs: 3, batch: 64, milestones: vec![2], seed: 5, ..TrainConfig::default() };

    let mut network = Network::build(&desc, BuildMode::Masked, train_cfg.seed)?;
    train(&mut network, &train_cfg, &data)?;

    let mut cfg = PruneConfig::new(PruneMethod::L1, StopCondition::ChannelsPruned(24));
    cfg.steps_between_prunes = 10;
    cfg.batch = 32;
    cfg.fine_tune_lr = train_cfg.final_lr();
    let mut evaluator = |net: &Network| evaluate(net, &data, Split::Test);
    let outcome = prune_and_tune(network, &cfg, &data, &mut evaluator)?;
    let pruned_error = outcome.trajectory.entries.last().unwrap().test_error_percent;

    let profile = extract_profile(&outcome.network);
    println!("pruned profile (n_m/n_o per block):");
    for e in &profile.entries {
        println!("  block {}: {}/{} ({:.0}%)", e.block, e.n_m, e.n_o, 100.0 * e.ratio);
    }

    let (scratch_net, scratch_log) = scratch_train_from_profile(&profile, &train_cfg, &data)?;
    println!(
        "\npruned-and-tuned: {:6} params, {:.2}% error",
        outcome.network.active_param_count(),
        pruned_error
    );
    println!(
        "scratch-trained:  {:6} params, {:.2}% error",
        scratch_net.active_param_count(),
        scratch_log.final_error().unwrap()
    );
    Ok(())
}
