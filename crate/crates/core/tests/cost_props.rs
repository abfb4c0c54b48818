mod common;

use bhkit_core::arch::{ArchSpec, BlockSpec, LayerSpec, Shortcut, StageSpec, BUILTIN_NAMES};
use bhkit_core::cost::{analyze_many, stage_profile};
use bhkit_core::rebalance::{evaluate_candidate, rebalance_with, RebalanceProblem};
use bhkit_core::{analyze, builtin, Execution, TensorShape};
use common::recount::{self, StemOp};
use proptest::prelude::*;

#[test]
fn recount_matches_resnets_at_several_sizes() {
    for (h, w) in [(640, 512), (224, 224), (97, 131), (32, 32)] {
        let shape = TensorShape::new(3, h, w);
        let r = analyze(&builtin("resnet50").unwrap(), shape).unwrap();
        let want = recount::resnet50(h.into(), w.into());
        assert_eq!(
            (r.totals.params, r.totals.macs),
            (want.params, want.macs),
            "{h}x{w}"
        );
        let stages: Vec<u64> = r.per_stage.iter().map(|s| s.macs).collect();
        assert_eq!(stages, want.stage_macs);

        let r = analyze(&builtin("bh-resnet50").unwrap(), shape).unwrap();
        let want = recount::bh_resnet50_with([7, 6, 2, 1], h.into(), w.into());
        assert_eq!(
            (r.totals.params, r.totals.macs),
            (want.params, want.macs),
            "bh {h}x{w}"
        );
    }
}

#[test]
fn recount_matches_hrnet_chains() {
    let plain = [
        StemOp::Conv {
            k: 3,
            cout: 64,
            s: 2,
        },
        StemOp::Conv {
            k: 3,
            cout: 64,
            s: 2,
        },
    ];
    let bh = [
        StemOp::Conv {
            k: 3,
            cout: 64,
            s: 1,
        },
        StemOp::Conv {
            k: 3,
            cout: 64,
            s: 2,
        },
        StemOp::Pool,
    ];
    let cases = [
        (
            "hrnet32-deep",
            &plain[..],
            [64, 64, 128, 256],
            [4, 4, 16, 12],
        ),
        ("bh-hrnet32-deep", &bh[..], [64, 64, 128, 256], [4, 4, 8, 3]),
        (
            "hrnet18-deep",
            &plain[..],
            [36, 64, 72, 144],
            [4, 4, 16, 12],
        ),
        ("bh-hrnet18-deep", &bh[..], [36, 36, 72, 144], [4, 4, 12, 6]),
    ];
    for (name, stem, widths, repeats) in cases {
        let r = analyze(&builtin(name).unwrap(), TensorShape::new(3, 640, 512)).unwrap();
        let want = recount::hrnet(stem, widths, repeats, 640, 512);
        assert_eq!(
            (r.totals.params, r.totals.macs),
            (want.params, want.macs),
            "{name}"
        );
        let shares: Vec<f64> = stage_profile(&r).iter().map(|s| s.macs_share).collect();
        for (a, b) in shares.iter().zip(want.shares()) {
            assert!((a - b).abs() < 1e-12, "{name}");
        }
    }
}

#[test]
fn rebalance_candidates_match_recount() {
    let problem =
        RebalanceProblem::new(builtin("resnet50").unwrap(), TensorShape::new(3, 640, 512));
    for repeats in [[1, 1, 1, 1], [7, 6, 2, 1], [8, 6, 1, 1], [3, 9, 12, 2]] {
        let c = evaluate_candidate(&problem, &repeats).unwrap();
        let want = recount::bh_resnet50_with(repeats.map(u64::from), 640, 512);
        assert_eq!((c.params, c.macs), (want.params, want.macs));
        assert_eq!(c.early_macs, want.stage_macs[..3].iter().sum::<u64>());
    }
}

#[test]
fn sums_and_shares_are_consistent() {
    for name in BUILTIN_NAMES {
        let r = analyze(&builtin(name).unwrap(), TensorShape::new(3, 640, 512)).unwrap();
        let layer_params: u64 = r.per_layer.iter().map(|l| l.params).sum();
        let stage_params: u64 = r.per_stage.iter().map(|s| s.params).sum();
        let stage_macs: u64 = r.per_stage.iter().map(|s| s.macs).sum();
        assert_eq!(layer_params, r.totals.params);
        assert_eq!(stage_params, r.totals.params);
        assert_eq!(stage_macs, r.totals.macs);
        let share_sum: f64 = stage_profile(&r).iter().map(|s| s.macs_share).sum();
        assert!((share_sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn analyze_many_is_order_preserving_and_deterministic() {
    let archs: Vec<ArchSpec> = BUILTIN_NAMES.iter().map(|n| builtin(n).unwrap()).collect();
    let shape = TensorShape::new(3, 640, 512);
    let seq = analyze_many(&archs, shape, Execution::Sequential);
    let par = analyze_many(&archs, shape, Execution::Parallel);
    assert_eq!(seq, par);
    for (a, r) in archs.iter().zip(&seq) {
        assert_eq!(r.as_ref().unwrap().arch, a.name);
    }
}

#[test]
fn rebalance_sequential_equals_parallel() {
    let mut problem =
        RebalanceProblem::new(builtin("resnet50").unwrap(), TensorShape::new(3, 320, 256))
            .with_bounds(1, 6);
    problem.collect_feasible = true;
    let a = rebalance_with(&problem, Execution::Sequential).unwrap();
    let b = rebalance_with(&problem, Execution::Parallel).unwrap();
    assert_eq!(a.repeats, b.repeats);
    assert_eq!(a.feasible, b.feasible);
    assert_eq!(a.candidates_examined, 6u64.pow(4));
    assert_eq!(a.feasible_count, a.feasible.as_ref().unwrap().len() as u64);
}

#[test]
fn candidates_examined_is_the_product_of_ranges() {
    let mut problem =
        RebalanceProblem::new(builtin("resnet50").unwrap(), TensorShape::new(3, 128, 128));
    problem.repeat_bounds = vec![(2, 5), (1, 3), (1, 1), (4, 6)];
    problem.parity_tolerance = 0.2;
    match rebalance_with(&problem, Execution::Parallel) {
        Ok(r) => assert_eq!(r.candidates_examined, 4 * 3 * 3),
        Err(e) => panic!("{e}"),
    }
}

fn random_arch() -> impl Strategy<Value = ArchSpec> {
    (
        prop::collection::vec((1u32..=4, 1u32..=4, prop::bool::ANY), 2..=4),
        1u32..=2,
        prop::bool::ANY,
    )
        .prop_map(|(stages, stem_stride, pool)| {
            let mut stem = vec![LayerSpec::conv(3, 16, 2 * stem_stride)];
            if pool {
                stem.push(LayerSpec::max_pool(3, 2));
            }
            let mut channels = 16;
            let stages = stages
                .into_iter()
                .enumerate()
                .map(|(i, (repeats, width_mult, bottleneck))| {
                    let width = 8 * width_mult;
                    let block = if bottleneck {
                        BlockSpec::bottleneck(width, 2, Shortcut::Identity)
                    } else {
                        BlockSpec::basic(width, Shortcut::Identity)
                    };
                    let out = block.out_channels(channels);
                    let stride = if i == 0 { 1 } else { 2 };
                    let shortcut = if out != channels || stride > 1 {
                        Shortcut::Projection
                    } else {
                        Shortcut::Identity
                    };
                    channels = out;
                    StageSpec {
                        name: format!("stage{}", i + 1),
                        block: BlockSpec { shortcut, ..block },
                        repeats,
                        first_block_stride: stride,
                    }
                })
                .collect();
            ArchSpec {
                name: "rand".into(),
                in_channels: 3,
                stem,
                stages,
            }
        })
}

proptest! {
    #[test]
    fn params_do_not_depend_on_input(arch in random_arch(), h in 32u32..200, w in 32u32..200) {
        let a = analyze(&arch, TensorShape::new(3, h, w)).unwrap();
        let b = analyze(&arch, TensorShape::new(3, 224, 160)).unwrap();
        prop_assert_eq!(a.totals.params, b.totals.params);
    }

    #[test]
    fn doubling_input_quadruples_macs(arch in random_arch(), h in 2u32..40, w in 2u32..40) {
        // Multiples of the total stride keep every division exact.
        let s = 64;
        let a = analyze(&arch, TensorShape::new(3, h * s, w * s)).unwrap();
        let b = analyze(&arch, TensorShape::new(3, 2 * h * s, 2 * w * s)).unwrap();
        prop_assert_eq!(b.totals.macs, 4 * a.totals.macs);
    }

    #[test]
    fn more_repeats_never_cost_less(arch in random_arch(), stage in 0usize..4) {
        let stage = stage % arch.stages.len();
        let mut problem = RebalanceProblem::new(arch.clone(), TensorShape::new(3, 256, 256));
        // Shallow random archs may lack a third halving, so pin the pivot.
        problem.pivot = Some(1);
        let base = arch.repeats();
        let mut more = base.clone();
        more[stage] += 1;
        let a = evaluate_candidate(&problem, &base).unwrap();
        let b = evaluate_candidate(&problem, &more).unwrap();
        prop_assert!(b.params > a.params);
        prop_assert!(b.macs > a.macs);
        let early = stage < 1;
        if early {
            prop_assert!(b.early_macs > a.early_macs);
        } else {
            prop_assert_eq!(b.early_macs, a.early_macs);
        }
    }
}
