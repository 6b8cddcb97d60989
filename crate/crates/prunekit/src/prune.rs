//! The sequential prune-and-tune loop: fine-tune, rank, remove the single
//! lowest-saliency channel, repeat; recording a trajectory of
//! (params, MACs, test error) along the way.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accounting;
use crate::arch::{extract_profile, ProfileVector};
use crate::blocks::BlockId;
use crate::data::{DatasetHandle, Split};
use crate::error::{Error, Result};
use crate::net::{BuildMode, Network};
use crate::saliency::{l1_saliency, rank_channels, FisherAccumulator, SaliencyRecord};
use crate::train::{train, train_minibatch, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PruneMethod {
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "fisher")]
    Fisher,
}

impl std::fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PruneMethod::L1 => write!(f, "l1"),
            PruneMethod::Fisher => write!(f, "fisher"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopCondition {
    /// Stop after this many channels have been removed.
    ChannelsPruned(usize),
    /// Stop once the live parameter count is at or below this budget.
    TargetParams(u64),
    /// Prune until every block is down to this many live channels.
    BlockFloor(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub method: PruneMethod,
    /// Fine-tune steps between consecutive removals.
    pub steps_between_prunes: usize,
    pub fine_tune_lr: f64,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
    pub stop: StopCondition,
    /// Parameter budgets at which to snapshot a compacted network the first
    /// time the live count falls to or below them.
    pub budgets: Vec<u64>,
}

impl PruneConfig {
    pub fn new(method: PruneMethod, stop: StopCondition) -> Self {
        PruneConfig {
            method,
            steps_between_prunes: 100,
            fine_tune_lr: 0.004,
            batch: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            augment: true,
            stop,
            budgets: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_between_prunes < 1 {
            return Err(Error::Config("steps_between_prunes must be >= 1".into()));
        }
        if self.fine_tune_lr <= 0.0 {
            return Err(Error::Config("fine_tune_lr must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if let StopCondition::BlockFloor(f) = self.stop {
            if f == 0 {
                return Err(Error::Config("block floor must be >= 1".into()));
            }
        }
        Ok(())
    }

    fn floor(&self) -> usize {
        match self.stop {
            StopCondition::BlockFloor(f) => f,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub event: usize,
    pub channels_pruned: usize,
    pub params: u64,
    pub macs: u64,
    pub test_error_percent: f64,
    pub seconds: f64,
    /// Channel profile at this event (not serialized to the CSV).
    pub profile: Option<ProfileVector>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub entries: Vec<TrajectoryEntry>,
}

impl Trajectory {
    /// CSV per the documented schema: header plus one row per event,
    /// UTF-8 with LF line endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("event,channels_pruned,params,macs,test_error_percent,seconds\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{:.4},{:.3}\n",
                e.event, e.channels_pruned, e.params, e.macs, e.test_error_percent, e.seconds
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PruneStatus {
    ReachedTarget,
    /// Every block hit the floor before the stop condition was met.
    Exhausted,
}

/// A compacted network captured the first time the parameter count dropped
/// to or below a requested budget.
pub struct BudgetSnapshot {
    pub requested: u64,
    pub event: usize,
    pub achieved_params: u64,
    pub network: Network,
}

pub struct PruneOutcome {
    pub network: Network,
    pub trajectory: Trajectory,
    pub status: PruneStatus,
    pub snapshots: Vec<BudgetSnapshot>,
    /// (event, block, channel, saliency) for every removal, in order.
    pub decisions: Vec<(usize, BlockId, usize, f64)>,
}

/// Mask the lowest-ranked prunable channel. Returns the decision, or None
/// when every block is at the floor (nothing left to prune).
pub fn prune_once(
    network: &mut Network,
    records: &[SaliencyRecord],
    floor: usize,
) -> Result<Option<(BlockId, usize, f64)>> {
    let prunable = prunable_with_floor(network, floor);
    if prunable.is_empty() {
        return Ok(None);
    }
    let ranked = rank_channels(records, &prunable)?;
    let pick = ranked[0];
    network.apply_mask(pick.block, pick.channel)?;
    Ok(Some((pick.block, pick.channel, pick.delta)))
}

fn prunable_with_floor(network: &Network, floor: usize) -> Vec<(BlockId, usize)> {
    let mut out = Vec::new();
    for mask in network.masks() {
        if mask.active_count() <= floor {
            continue;
        }
        for c in mask.active_indices() {
            out.push((mask.block, c));
        }
    }
    out
}

/// Saliency records for the network's current state under the given method.
/// l1 reads each block's first-conv filters; Fisher finalizes the window
/// accumulator.
fn current_saliency(
    network: &Network,
    method: PruneMethod,
    fisher: &FisherAccumulator,
) -> Result<Vec<SaliencyRecord>> {
    match method {
        PruneMethod::L1 => {
            let mut records = Vec::new();
            for (block, weight) in network.conv1_weights() {
                let sums = l1_saliency(&network.params.get(weight).value)?;
                for (channel, &delta) in sums.iter().enumerate() {
                    records.push(SaliencyRecord { block, channel, delta });
                }
            }
            Ok(records)
        }
        PruneMethod::Fisher => fisher.finalize(),
    }
}

fn macs_of(network: &Network) -> Result<u64> {
    Ok(accounting::cost_report(&network.descriptor)?.macs)
}

/// The sequential prune-and-tune loop. Each iteration fine-tunes for
/// `steps_between_prunes` minibatches (accumulating Fisher statistics over
/// the window), removes the single lowest-ranked channel, evaluates, and
/// records a trajectory entry. An event-0 entry for the untouched network
/// is logged before the loop.
pub fn prune_and_tune(
    mut network: Network,
    config: &PruneConfig,
    data: &DatasetHandle,
    evaluator: &mut dyn FnMut(&Network) -> Result<f64>,
) -> Result<PruneOutcome> {
    config.validate()?;
    let started = Instant::now();
    let floor = config.floor();
    let mut trajectory = Trajectory::default();
    let mut decisions = Vec::new();
    let mut snapshots: Vec<BudgetSnapshot> = Vec::new();
    // ascending, so the largest not-yet-satisfied budget sits at the end
    let mut pending_budgets: Vec<u64> = config.budgets.clone();
    pending_budgets.sort_unstable();

    let record = |net: &Network, event: usize, elapsed: f64, error: f64, traj: &mut Trajectory| -> Result<()> {
        traj.entries.push(TrajectoryEntry {
            event,
            channels_pruned: event,
            params: net.active_param_count(),
            macs: macs_of(net)?,
            test_error_percent: error,
            seconds: elapsed,
            profile: Some(extract_profile(net)),
        });
        Ok(())
    };

    let initial_error = evaluator(&network)?;
    record(&network, 0, started.elapsed().as_secs_f64(), initial_error, &mut trajectory)?;
    take_budget_snapshots(&network, 0, &mut pending_budgets, &mut snapshots);

    let mut fisher = FisherAccumulator::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len(Split::Train)).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut event = 0usize;

    let status = loop {
        match config.stop {
            StopCondition::ChannelsPruned(n) if event >= n => break PruneStatus::ReachedTarget,
            StopCondition::TargetParams(p) if network.active_param_count() <= p => {
                break PruneStatus::ReachedTarget
            }
            StopCondition::BlockFloor(_) if prunable_with_floor(&network, floor).is_empty() => {
                break PruneStatus::ReachedTarget
            }
            _ => {}
        }
        if prunable_with_floor(&network, floor).is_empty() {
            break PruneStatus::Exhausted;
        }

        // fine-tune window at the lowest schedule LR
        for _ in 0..config.steps_between_prunes {
            if cursor + config.batch > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let take = config.batch.min(order.len());
            let chunk = &order[cursor..cursor + take];
            cursor += take;
            let (images, labels) = if config.augment {
                data.augmented_batch(chunk, &mut rng)
            } else {
                data.batch(Split::Train, chunk)
            };
            train_minibatch(
                &mut network,
                images,
                &labels,
                config.fine_tune_lr,
                config.momentum,
                config.weight_decay,
                (config.method == PruneMethod::Fisher).then_some(&mut fisher),
            )?;
        }

        let records = current_saliency(&network, config.method, &fisher)?;
        let Some((block, channel, delta)) = prune_once(&mut network, &records, floor)? else {
            break PruneStatus::Exhausted;
        };
        fisher.reset();
        event += 1;
        decisions.push((event, block, channel, delta));

        let error = evaluator(&network)?;
        record(&network, event, started.elapsed().as_secs_f64(), error, &mut trajectory)?;
        take_budget_snapshots(&network, event, &mut pending_budgets, &mut snapshots);
    };

    Ok(PruneOutcome { network, trajectory, status, snapshots, decisions })
}

fn take_budget_snapshots(
    network: &Network,
    event: usize,
    pending: &mut Vec<u64>,
    snapshots: &mut Vec<BudgetSnapshot>,
) {
    let params = network.active_param_count();
    while let Some(&budget) = pending.last() {
        if params > budget {
            break;
        }
        pending.pop();
        snapshots.push(BudgetSnapshot {
            requested: budget,
            event,
            achieved_params: params,
            network: network.compact(),
        });
    }
}

/// Build the compacted architecture a profile describes, reinitialize at
/// random, and train it with the full from-scratch schedule.
pub fn scratch_train_from_profile(
    profile: &ProfileVector,
    config: &TrainConfig,
    data: &DatasetHandle,
) -> Result<(Network, TrainLog)> {
    let desc = profile.to_descriptor();
    let mut network = Network::build(&desc, BuildMode::Compacted, config.seed)?;
    let log = train(&mut network, config, data)?;
    Ok((network, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::make_wrn;
    use crate::data::make_synthetic;
    use crate::train::evaluate;

    fn tiny_setup() -> (Network, DatasetHandle) {
        let desc = make_wrn(10, 1.0, 1.0).unwrap();
        let net = Network::build(&desc, BuildMode::Masked, 1).unwrap();
        let data = make_synthetic(10, 20, 16, 2).unwrap();
        (net, data)
    }

    fn cheap_config(method: PruneMethod, stop: StopCondition) -> PruneConfig {
        let mut cfg = PruneConfig::new(method, stop);
        cfg.steps_between_prunes = 2;
        cfg.batch = 16;
        cfg.augment = false;
        cfg
    }

    #[test]
    fn one_event_yields_two_entries() {
        let (net, data) = tiny_setup();
        let cfg = cheap_config(PruneMethod::L1, StopCondition::ChannelsPruned(1));
        let mut eval = |n: &Network| evaluate(n, &data, Split::Test);
        let out = prune_and_tune(net, &cfg, &data, &mut eval).unwrap();
        assert_eq!(out.trajectory.entries.len(), 2);
        assert_eq!(out.status, PruneStatus::ReachedTarget);
        assert_eq!(out.trajectory.entries[0].channels_pruned, 0);
        assert_eq!(out.trajectory.entries[1].channels_pruned, 1);
        assert!(out.trajectory.entries[1].params < out.trajectory.entries[0].params);
        assert_eq!(out.decisions.len(), 1);
    }

    #[test]
    fn trajectory_invariants_hold_over_a_run() {
        let (net, data) = tiny_setup();
        let cfg = cheap_config(PruneMethod::Fisher, StopCondition::ChannelsPruned(6));
        let mut eval = |n: &Network| evaluate(n, &data, Split::Test);
        let out = prune_and_tune(net, &cfg, &data, &mut eval).unwrap();
        let e = &out.trajectory.entries;
        assert_eq!(e.len(), 7);
        for w in e.windows(2) {
            assert!(w[1].params < w[0].params, "params not strictly decreasing");
            assert_eq!(w[1].channels_pruned, w[0].channels_pruned + 1);
        }
        // after k events the masks account for exactly k missing channels
        let profile = e.last().unwrap().profile.as_ref().unwrap();
        assert_eq!(profile.total_pruned(), 6);
    }

    #[test]
    fn params_drop_by_block_arithmetic_per_event() {
        // remove 1 channel from a block with N_i=32, N_o=32:
        // 9*32 + 9*32 + 2 = 578 parameters
        let desc = make_wrn(40, 2.0, 1.0).unwrap();
        let mut net = Network::build(&desc, BuildMode::Masked, 1).unwrap();
        let before = net.active_param_count();
        // block 1 (second of stage 1) has n_i = n_o = 32
        net.apply_mask(BlockId(1), 0).unwrap();
        assert_eq!(before - net.active_param_count(), 578);
    }

    #[test]
    fn hand_set_saliency_prunes_the_argmin() {
        let (mut net, _) = tiny_setup();
        let mut records = Vec::new();
        for mask in net.masks() {
            for c in mask.active_indices() {
                let delta = if mask.block == BlockId(1) && c == 5 { 0.0 } else { 1.0 + c as f64 };
                records.push(SaliencyRecord { block: mask.block, channel: c, delta });
            }
        }
        let picked = prune_once(&mut net, &records, 1).unwrap().unwrap();
        assert_eq!((picked.0, picked.1), (BlockId(1), 5));
        // brute-force argmin agrees
        let min = records
            .iter()
            .filter(|r| !(r.block == BlockId(1) && r.channel == 5))
            .fold(f64::MAX, |m, r| m.min(r.delta));
        assert!(min > 0.0);
    }

    #[test]
    fn tie_break_is_block_then_channel() {
        let (mut net, _) = tiny_setup();
        let records: Vec<SaliencyRecord> = net
            .masks()
            .iter()
            .flat_map(|m| {
                let b = m.block;
                m.active_indices().into_iter().map(move |c| SaliencyRecord {
                    block: b,
                    channel: c,
                    delta: 1.0,
                })
            })
            .collect();
        let picked = prune_once(&mut net, &records, 1).unwrap().unwrap();
        assert_eq!((picked.0, picked.1), (BlockId(0), 0));
    }

    #[test]
    fn exhaustion_terminates_with_status() {
        let (net, data) = tiny_setup();
        // floor 16 on a wrn-10-1: stage-1 block already has exactly 16
        // slots, deeper blocks have more
        let mut cfg = cheap_config(PruneMethod::L1, StopCondition::BlockFloor(16));
        cfg.steps_between_prunes = 1;
        let mut eval = |_: &Network| Ok(5.0);
        let out = prune_and_tune(net, &cfg, &data, &mut eval).unwrap();
        assert_eq!(out.status, PruneStatus::ReachedTarget);
        // every block is at (or started at) the floor
        assert!(out.network.masks().iter().all(|m| m.active_count() <= 16));

        // an unreachable channel target exhausts instead of erroring
        let (net2, data2) = tiny_setup();
        let cfg2 = cheap_config(PruneMethod::L1, StopCondition::ChannelsPruned(100_000));
        let mut eval2 = |_: &Network| Ok(5.0);
        let out2 = prune_and_tune(net2, &cfg2, &data2, &mut eval2).unwrap();
        assert_eq!(out2.status, PruneStatus::Exhausted);
        assert!(out2.network.masks().iter().all(|m| m.active_count() == 1));
    }

    #[test]
    fn budget_snapshots_fire_at_first_crossing() {
        let (net, data) = tiny_setup();
        let initial = net.active_param_count();
        let mut cfg = cheap_config(PruneMethod::L1, StopCondition::ChannelsPruned(5));
        cfg.budgets = vec![initial - 1, initial + 1000];
        let mut eval = |_: &Network| Ok(5.0);
        let out = prune_and_tune(net, &cfg, &data, &mut eval).unwrap();
        assert_eq!(out.snapshots.len(), 2);
        // the generous budget is satisfied by the unpruned network
        assert!(out.snapshots.iter().any(|s| s.event == 0));
        for s in &out.snapshots {
            assert!(s.achieved_params <= s.requested);
            assert_eq!(s.network.active_param_count(), s.achieved_params);
        }
    }

    #[test]
    fn target_params_stop() {
        let (net, data) = tiny_setup();
        let target = net.active_param_count() - 1000;
        let cfg = cheap_config(PruneMethod::L1, StopCondition::TargetParams(target));
        let mut eval = |_: &Network| Ok(5.0);
        let out = prune_and_tune(net, &cfg, &data, &mut eval).unwrap();
        assert_eq!(out.status, PruneStatus::ReachedTarget);
        assert!(out.network.active_param_count() <= target);
    }

    #[test]
    fn scratch_profile_of_unpruned_net_reproduces_architecture() {
        let desc = make_wrn(10, 1.0, 1.0).unwrap();
        let net = Network::build(&desc, BuildMode::Masked, 1).unwrap();
        let profile = extract_profile(&net);
        let data = make_synthetic(10, 5, 16, 3).unwrap();
        let cfg = TrainConfig { epochs: 1, batch: 25, augment: false, seed: 21, ..TrainConfig::default() };
        let (rebuilt, log) = scratch_train_from_profile(&profile, &cfg, &data).unwrap();
        assert_eq!(rebuilt.descriptor.profile, desc.profile);
        assert_eq!(
            rebuilt.active_param_count(),
            accounting::cost_report(&profile.to_descriptor()).unwrap().params
        );
        assert_eq!(log.epochs.len(), 1);
        // same seed, same initial weights
        let (again, _) = scratch_train_from_profile(&profile, &cfg, &data).unwrap();
        for i in 0..rebuilt.params.len() {
            assert_eq!(
                again.params.by_index(i).value.data().len(),
                rebuilt.params.by_index(i).value.data().len()
            );
        }
    }

    #[test]
    fn trajectory_csv_schema() {
        let traj = Trajectory {
            entries: vec![TrajectoryEntry {
                event: 0,
                channels_pruned: 0,
                params: 100,
                macs: 200,
                test_error_percent: 12.5,
                seconds: 1.5,
                profile: None,
            }],
        };
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "event,channels_pruned,params,macs,test_error_percent,seconds"
        );
        assert_eq!(lines.next().unwrap(), "0,0,100,200,12.5000,1.500");
        assert!(csv.ends_with('\n') && !csv.contains('\r'));
    }
}
