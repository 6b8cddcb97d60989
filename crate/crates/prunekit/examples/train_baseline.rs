//! Train a small WideResNet from scratch on the synthetic dataset and save
//! a checkpoint.
//!
//! ```bash
//! cargo run --release --example train_baseline
//! ```

use prunekit::arch::make_wrn;
use prunekit::checkpoint::{self, CheckpointMeta};
use prunekit::data::make_synthetic;
use prunekit::net::{BuildMode, Network};
use prunekit::train::{train, TrainConfig};

fn main() -> prunekit::Result<()> {
    let out = std::env::temp_dir().join("prunekit-example-train");

    // WRN-10-1 at 16x16 keeps this demo under a minute on a laptop.
    let desc = make_wrn(10, 1.0, 1.0)?;
    let mut desc = desc;
    desc.input_resolution = 16;
    let data = make_synthetic(desc.classes, 100, desc.input_resolution, 7)?;

    let config = TrainConfig {
        epochs: 4,
        batch: 64,
        lr: 0.1,
        milestones: vec![2, 3],
        seed: 7,
        ..TrainConfig::default()
    };
    let mut network = Network::build(&desc, BuildMode::Compacted, config.seed)?;
    println!(
        "training {} ({} params) on {} synthetic images",
        desc.name(),
        network.active_param_count(),
        data.len(prunekit::data::Split::Train)
    );
    let log = train(&mut network, &config, &data)?;
    for e in &log.epochs {
        println!(
            "epoch {:2}  lr {:<6}  train loss {:.4}  test error {:5.2}%",
            e.epoch, e.lr, e.train_loss, e.test_error_percent
        );
    }

    let meta = CheckpointMeta {
        label: desc.name(),
        final_test_error: log.final_error(),
        final_lr: Some(config.final_lr()),
        seed: Some(config.seed),
    };
    checkpoint::save(&out, &network, &meta)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}
