//! Exact parameter and multiply-accumulate counting from descriptors.
//!
//! Conventions: convolutions carry no bias (they are always followed by
//! batch norm), the classifier carries one; batch norm costs 2 parameters
//! per channel and no MACs; relu and pooling cost nothing. One MAC is one
//! multiply plus one add; no factor-of-2 FLOP conversion anywhere. Counts
//! use the live channel count `n_m`, so they describe the compacted form
//! of a pruned network.

use serde::{Deserialize, Serialize};

use crate::arch::{skeleton, ArchDescriptor, Family, SkeletonItem};
use crate::error::Result;
use crate::kernels::conv_out_extent;
use crate::prune::Trajectory;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub macs: u64,
    pub breakdown: Vec<LayerCost>,
}

fn conv_cost(k: usize, c_in: usize, c_out: usize, oh: usize, ow: usize) -> (u64, u64) {
    let params = (k * k * c_in * c_out) as u64;
    (params, params * (oh * ow) as u64)
}

/// Full cost report: parameters and per-inference MACs at the descriptor's
/// input resolution, with a per-layer breakdown.
pub fn cost_report(desc: &ArchDescriptor) -> Result<CostReport> {
    let items = skeleton(desc)?;
    let mut h = desc.input_resolution;
    let mut w = desc.input_resolution;
    let mut breakdown: Vec<LayerCost> = Vec::new();
    let push = |breakdown: &mut Vec<LayerCost>, layer: String, params: u64, macs: u64| {
        breakdown.push(LayerCost { layer, params, macs });
    };

    for item in &items {
        match *item {
            SkeletonItem::StemConv { c_in, c_out, k, stride, pad, bn } => {
                h = conv_out_extent(h, k, stride, pad);
                w = conv_out_extent(w, k, stride, pad);
                let (p, m) = conv_cost(k, c_in, c_out, h, w);
                push(&mut breakdown, "stem.conv".into(), p, m);
                if bn {
                    push(&mut breakdown, "stem.bn".into(), 2 * c_out as u64, 0);
                }
            }
            SkeletonItem::MaxPool { k, stride, pad } => {
                h = conv_out_extent(h, k, stride, pad);
                w = conv_out_extent(w, k, stride, pad);
            }
            SkeletonItem::Block { entry, out_width } => {
                let j = entry.block;
                match desc.family {
                    Family::Wrn | Family::ResNet => {
                        let h1 = conv_out_extent(h, 3, entry.stride, 1);
                        let w1 = conv_out_extent(w, 3, entry.stride, 1);
                        let (p, m) = conv_cost(3, entry.n_i, entry.n_m, h1, w1);
                        push(&mut breakdown, format!("block{j}.conv1"), p, m);
                        push(&mut breakdown, format!("block{j}.bn_mid"), 2 * entry.n_m as u64, 0);
                        let (p, m) = conv_cost(3, entry.n_m, out_width, h1, w1);
                        push(&mut breakdown, format!("block{j}.conv2"), p, m);
                        push(&mut breakdown, format!("block{j}.bn_out"), 2 * out_width as u64, 0);
                        if entry.stride != 1 || entry.n_i != out_width {
                            let (p, m) = conv_cost(1, entry.n_i, out_width, h1, w1);
                            push(&mut breakdown, format!("block{j}.shortcut"), p, m);
                        }
                        h = h1;
                        w = w1;
                    }
                    Family::DenseNetBc => {
                        push(&mut breakdown, format!("block{j}.bn_in"), 2 * entry.n_i as u64, 0);
                        let (p, m) = conv_cost(1, entry.n_i, entry.n_m, h, w);
                        push(&mut breakdown, format!("block{j}.conv1"), p, m);
                        push(&mut breakdown, format!("block{j}.bn_mid"), 2 * entry.n_m as u64, 0);
                        let (p, m) = conv_cost(3, entry.n_m, out_width, h, w);
                        push(&mut breakdown, format!("block{j}.conv2"), p, m);
                    }
                }
            }
            SkeletonItem::Transition { c_in, c_out } => {
                push(&mut breakdown, format!("transition@{c_in}.bn"), 2 * c_in as u64, 0);
                let (p, m) = conv_cost(1, c_in, c_out, h, w);
                push(&mut breakdown, format!("transition@{c_in}.conv"), p, m);
                h = (h - 2) / 2 + 1;
                w = (w - 2) / 2 + 1;
            }
            SkeletonItem::FinalBn { channels } => {
                push(&mut breakdown, "head.bn".into(), 2 * channels as u64, 0);
            }
            SkeletonItem::Classifier { d_in } => {
                let params = (d_in * desc.classes + desc.classes) as u64;
                let macs = (d_in * desc.classes) as u64;
                push(&mut breakdown, "head.linear".into(), params, macs);
            }
        }
    }
    let params = breakdown.iter().map(|l| l.params).sum();
    let macs = breakdown.iter().map(|l| l.macs).sum();
    Ok(CostReport { params, macs, breakdown })
}

/// Parameter counts for a descriptor (report includes MACs too).
pub fn count_params(desc: &ArchDescriptor) -> Result<CostReport> {
    cost_report(desc)
}

/// MAC counts for a descriptor (report includes parameters too).
pub fn count_macs(desc: &ArchDescriptor) -> Result<CostReport> {
    cost_report(desc)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPick {
    pub requested: u64,
    /// Index of the chosen trajectory entry, if the budget was reachable.
    pub event: Option<usize>,
    pub achieved_params: Option<u64>,
}

/// For each parameter budget, the trajectory entry closest below-or-equal.
/// Budgets below the final entry are reported as unreachable.
pub fn budget_snapshot(trajectory: &Trajectory, budgets: &[u64]) -> Vec<BudgetPick> {
    budgets
        .iter()
        .map(|&budget| {
            let pick = trajectory
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.params <= budget)
                .max_by_key(|(_, e)| e.params)
                .map(|(i, e)| (i, e.params));
            BudgetPick {
                requested: budget,
                event: pick.map(|(i, _)| i),
                achieved_params: pick.map(|(_, p)| p),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{make_densenet_bc, make_resnet, make_wrn};
    use crate::net::{BuildMode, Network};
    use crate::prune::TrajectoryEntry;

    fn within(actual: u64, expected: f64, tol: f64) -> bool {
        let a = actual as f64;
        (a - expected).abs() <= expected * tol
    }

    #[test]
    fn single_conv_mac_example() {
        // 3x3 kernel, 2 in, 4 out, 8x8 output: 9*2*4*64 = 4608
        assert_eq!(conv_cost(3, 2, 4, 8, 8), (72, 4608));
    }

    #[test]
    fn residual_block_conv_params_arithmetic() {
        // N_i=16, N_o=32: 9*16*32 + 9*32*32 = 13824 conv parameters.
        let desc = make_wrn(10, 2.0, 1.0).unwrap();
        let report = cost_report(&desc).unwrap();
        let find = |name: &str| report.breakdown.iter().find(|l| l.layer == name).unwrap();
        assert_eq!(find("block0.conv1").params + find("block0.conv2").params, 13824);
    }

    #[test]
    fn totals_equal_breakdown_sums() {
        for desc in [
            make_wrn(40, 2.0, 1.0).unwrap(),
            make_densenet_bc(100, 12, 0.5).unwrap(),
            make_resnet(18, 1000, 224).unwrap(),
        ] {
            let r = cost_report(&desc).unwrap();
            assert_eq!(r.params, r.breakdown.iter().map(|l| l.params).sum::<u64>());
            assert_eq!(r.macs, r.breakdown.iter().map(|l| l.macs).sum::<u64>());
        }
    }

    #[test]
    fn paper_counting_fixtures() {
        let wrn = cost_report(&make_wrn(40, 2.0, 1.0).unwrap()).unwrap();
        assert!(within(wrn.params, 2.2e6, 0.03), "wrn-40-2 params {}", wrn.params);

        let r18 = cost_report(&make_resnet(18, 1000, 224).unwrap()).unwrap();
        assert!(within(r18.params, 11.6e6, 0.03), "resnet18 params {}", r18.params);
        assert!(within(r18.macs, 1.81e9, 0.03), "resnet18 macs {}", r18.macs);

        let r9 = cost_report(&make_resnet(9, 1000, 224).unwrap()).unwrap();
        assert!(within(r9.params, 5.4e6, 0.05), "resnet9 params {}", r9.params);
        assert!(within(r9.macs, 0.89e9, 0.05), "resnet9 macs {}", r9.macs);

        let dn = cost_report(&make_densenet_bc(100, 12, 0.5).unwrap()).unwrap();
        assert!(within(dn.params, 0.8e6, 0.06), "densenet params {}", dn.params);

        let r34 = cost_report(&make_resnet(34, 1000, 224).unwrap()).unwrap();
        assert!(
            (21_000_000..22_000_000).contains(&r34.params),
            "resnet34 params {}",
            r34.params
        );
    }

    #[test]
    fn instantiated_params_equal_descriptor_count_exactly() {
        for desc in [
            make_wrn(10, 1.0, 1.0).unwrap(),
            make_wrn(16, 1.5, 0.5).unwrap(),
            make_densenet_bc(10, 6, 0.5).unwrap(),
            make_resnet(9, 10, 32).unwrap(),
        ] {
            let report = cost_report(&desc).unwrap();
            let net = Network::build(&desc, BuildMode::Masked, 1).unwrap();
            assert_eq!(report.params, net.active_param_count(), "{}", desc.name());
            let compacted = Network::build(&desc, BuildMode::Compacted, 1).unwrap();
            assert_eq!(report.params, compacted.active_param_count(), "{}", desc.name());
        }
    }

    #[test]
    fn removing_one_channel_is_linear_in_counts() {
        let desc = make_wrn(16, 1.0, 1.0).unwrap();
        let base = cost_report(&desc).unwrap();
        for j in [0usize, 2, 5] {
            let mut pruned = desc.clone();
            pruned.profile[j].n_m -= 1;
            let r = cost_report(&pruned).unwrap();
            let e = desc.profile[j];
            // out width equals n_o for an unscaled wrn
            let expect_params = (9 * e.n_i + 9 * e.n_o + 2) as u64;
            assert_eq!(base.params - r.params, expect_params);
            // wrn-16 has 2 blocks per stage; both convs of block j run at
            // the stage resolution 32 / 2^stage
            let res = desc.input_resolution / (1 << (j / 2));
            let expect_macs = ((9 * e.n_i + 9 * e.n_o) * res * res) as u64;
            assert_eq!(base.macs - r.macs, expect_macs, "block {j}");
        }
    }

    #[test]
    fn stride1_preserving_conv_macs_are_params_times_area() {
        let desc = make_wrn(10, 1.0, 1.0).unwrap();
        let r = cost_report(&desc).unwrap();
        // stage-1 convs run at full 32x32 resolution with stride 1
        for name in ["block0.conv1", "block0.conv2"] {
            let l = r.breakdown.iter().find(|l| l.layer == name).unwrap();
            assert_eq!(l.macs, l.params * 32 * 32);
        }
    }

    #[test]
    fn budget_snapshot_scan() {
        let entries: Vec<TrajectoryEntry> = [1000u64, 900, 800, 700]
            .iter()
            .enumerate()
            .map(|(i, &p)| TrajectoryEntry {
                event: i,
                channels_pruned: i,
                params: p,
                macs: p * 10,
                test_error_percent: 10.0,
                seconds: 0.0,
                profile: None,
            })
            .collect();
        let traj = Trajectory { entries };
        let picks = budget_snapshot(&traj, &[u64::MAX, 850, 700, 600]);
        assert_eq!(picks[0].event, Some(0)); // unbounded budget: initial entry
        assert_eq!(picks[1].event, Some(2)); // between entries: smaller-param one
        assert_eq!(picks[1].achieved_params, Some(800));
        assert_eq!(picks[2].event, Some(3)); // exact hit
        assert_eq!(picks[3].event, None); // below final entry: unreachable
        for p in &picks {
            if let Some(a) = p.achieved_params {
                assert!(a <= p.requested);
            }
        }
    }
}