//! Parameter, MAC and activation accounting against hand-derived totals.

use mnlab::arch::{build_depthwise_block, build_micro_cnn, build_resnet18, LayerKind, PreservationClass};
use mnlab::audit::{audit, count_params, param_sweep, preservation_report, AuditOptions, MacConvention, Preservation};
use mnlab::transform::{mn_transform, TransformConfig};
use proptest::prelude::*;

/// ResNet-18 (3x3 stem, no max-pool, bias only on the classifier) counted block by block.
fn resnet18_params_by_hand(classes: u64, r: u64) -> u64 {
    let m = r * r;
    let conv = |k: u64, cin: u64, cout: u64, groups: u64| k * k * (cin / groups) * cout;
    let bn = |c: u64| 2 * c;
    let widths = [64u64, 128, 256, 512];
    let mut total = conv(3, 3 * m, 64 * r, m) + bn(64 * r);
    let mut cin = 64;
    for (s, &c) in widths.iter().enumerate() {
        for b in 0..2 {
            let input = if b == 0 { cin } else { c };
            total += conv(3, input * r, c * r, m) + bn(c * r) + conv(3, c * r, c * r, m) + bn(c * r);
            if b == 0 && s > 0 {
                total += conv(1, input * r, c * r, m) + bn(c * r);
            }
        }
        cin = c;
    }
    total + (512 * r / m) * classes * m + classes * m
}

#[test]
fn resnet18_totals_match_hand_count() {
    let base = build_resnet18(100, 3);
    for r in [1usize, 2, 4, 8, 16, 32] {
        let g = mn_transform(&base, &TransformConfig::new(r)).unwrap();
        assert_eq!(
            count_params(&g).unwrap().total_params,
            resnet18_params_by_hand(100, r as u64),
            "r={r}"
        );
    }
    assert_eq!(resnet18_params_by_hand(100, 1), 11_220_132);
}

#[test]
fn sweep_rows_round_to_tenths_of_millions() {
    let rows = param_sweep(&build_resnet18(100, 3), &[1, 2, 4, 8, 16, 32]).unwrap();
    let m: Vec<f64> = rows.iter().map(|r| r.params_m).collect();
    assert_eq!(m, vec![11.2, 11.3, 11.4, 11.7, 12.2, 13.3]);
    let table: Vec<f64> = rows.iter().map(|r| r.gain_percent_rounded).collect();
    assert_eq!(table, vec![0.0, 0.9, 1.8, 4.5, 8.9, 18.8]);
    assert_eq!(rows[0].gain_percent, 0.0);
}

/// MACs from the layer list alone: convs and linears cost one MAC per weight
/// per output position, norm layers `per_norm` per output element.
fn macs_by_hand(g: &mnlab::ArchGraph, per_norm: u64, batch: u64) -> u64 {
    let plan = g.spatial_plan(32, 32).unwrap();
    let mut total = 0;
    for (l, &(h, w)) in g.layers.iter().zip(&plan) {
        let pos = (h * w) as u64;
        let cin_g = (l.in_channels / l.groups.max(1)) as u64;
        total += match l.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
                (l.kernel * l.kernel) as u64 * cin_g * l.out_channels as u64 * pos
            }
            LayerKind::Dense | LayerKind::ClassifierHead => cin_g * l.out_channels as u64,
            LayerKind::Norm => per_norm * l.out_channels as u64 * pos,
            _ => 0,
        };
    }
    total * batch
}

#[test]
fn macs_match_layer_enumeration() {
    let base = build_resnet18(100, 3);
    for r in [1usize, 4, 32] {
        let g = mn_transform(&base, &TransformConfig::new(r)).unwrap();
        for (conv, per) in [
            (MacConvention::LayerOnly, 0),
            (MacConvention::Eval, 2),
            (MacConvention::Train, 5),
        ] {
            let opts = AuditOptions {
                batch_size: 128,
                convention: conv,
                ..AuditOptions::default()
            };
            assert_eq!(
                audit(&g, &opts).unwrap().total_macs_per_batch,
                macs_by_hand(&g, per, 128),
                "r={r} {conv:?}"
            );
        }
    }
}

#[test]
fn depthwise_and_norm_inflate_by_r() {
    let base = build_depthwise_block(16, 10);
    let before = count_params(&base).unwrap();
    for r in [2usize, 4] {
        let after = count_params(&mn_transform(&base, &TransformConfig::new(r)).unwrap()).unwrap();
        let rep = preservation_report(&before, &after).unwrap();
        for e in rep {
            match e.class {
                PreservationClass::DenseCoupling => assert_eq!(e.outcome, Preservation::PreservedExactly, "{}", e.id),
                PreservationClass::Depthwise | PreservationClass::PerChannel => {
                    assert_eq!(e.outcome, Preservation::InflatedByR, "{}", e.id);
                    assert_eq!(e.params_after, r as u64 * e.params_before);
                }
                _ => {}
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dense_coupling_params_preserved(
        w1 in 1usize..5, w2 in 1usize..5, classes in 2usize..12, r in prop::sample::select(vec![1usize, 2, 4])
    ) {
        let base = build_micro_cnn(&[w1 * 8, w2 * 8], classes);
        let g = mn_transform(&base, &TransformConfig::new(r)).unwrap();
        let before = count_params(&base).unwrap().params_of_class(PreservationClass::DenseCoupling);
        let after = count_params(&g).unwrap().params_of_class(PreservationClass::DenseCoupling);
        prop_assert_eq!(before, after);
    }

    #[test]
    fn stage_channels_scale_by_r(w1 in 1usize..5, w2 in 1usize..5, r in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let base = build_micro_cnn(&[w1 * 8, w2 * 8], 3);
        let g = mn_transform(&base, &TransformConfig::new(r)).unwrap();
        prop_assert_eq!(g.path_multiplicity, r * r);
        let before = base.stage_channel_widths();
        let after = g.stage_channel_widths();
        prop_assert_eq!(before.len(), after.len());
        for ((s0, w0), (s1, wr)) in before.iter().zip(&after) {
            prop_assert_eq!(s0, s1);
            prop_assert_eq!(wr.clone(), w0.iter().map(|c| c * r).collect::<Vec<_>>());
        }
    }

    #[test]
    fn params_never_decrease_with_r(classes in 2usize..20) {
        let base = build_micro_cnn(&[32, 64], classes);
        let mut last = 0;
        for r in [1usize, 2, 4, 8] {
            let p = count_params(&mn_transform(&base, &TransformConfig::new(r)).unwrap()).unwrap().total_params;
            prop_assert!(p >= last);
            last = p;
        }
    }
}
