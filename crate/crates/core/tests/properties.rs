use proptest::prelude::*;

use pfgdf::config::RunConfig;
use pfgdf::model::checkpoint::{weight_name, Checkpoint};
use pfgdf::model::{build, init_params, Arch};
use pfgdf::prune::{
    count_filters, count_flops, count_params, prune_conv_pair, select_keep_set, PruneDecision,
};
use pfgdf::stats::{
    density_histogram, filter_l1_norms, fit_gaussian, histogram_bins, qq_linearity, qq_points,
    FilterNormSet,
};
use pfgdf::Tensor;

fn norm_set(norms: Vec<f64>) -> FilterNormSet {
    FilterNormSet { layer: 0, norms }
}

fn norms(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..50.0, 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn norms_follow_a_filter_permutation(
        (cout, cin, perm) in (1usize..8, 1usize..4).prop_flat_map(|(cout, cin)| {
            (Just(cout), Just(cin), Just((0..cout).collect::<Vec<_>>()).prop_shuffle())
        }),
        seed in any::<u64>(),
    ) {
        let graph = build(Arch::ToyCnn, 2, [cin, 16, 16]).unwrap();
        let w = init_params(&graph, seed).unwrap().tensors[&weight_name(0)].clone();
        let w = w.select(0, &(0..cout).collect::<Vec<_>>()).unwrap();
        let base = filter_l1_norms(0, &w).unwrap();
        let permuted = filter_l1_norms(0, &w.select(0, &perm).unwrap()).unwrap();
        for (j, &p) in perm.iter().enumerate() {
            prop_assert_eq!(permuted.norms[j].to_bits(), base.norms[p].to_bits());
        }
    }

    #[test]
    fn fit_moves_with_affine_maps(xs in norms(64), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let a = fit_gaussian(&norm_set(xs.clone())).unwrap();
        let b = fit_gaussian(&norm_set(xs.iter().map(|x| scale * x + shift).collect())).unwrap();
        let tol = 1e-9 * (1.0 + a.mu.abs() * scale + shift.abs());
        prop_assert!((b.mu - (scale * a.mu + shift)).abs() <= tol);
        prop_assert!((b.sigma - scale * a.sigma).abs() <= 1e-9 * (1.0 + scale * a.sigma));
        prop_assert!(a.sigma >= 0.0);
    }

    #[test]
    fn qq_series_is_monotone_and_linearity_bounded(xs in prop::collection::vec(0.0f64..50.0, 3..64)) {
        let qq = qq_points(&norm_set(xs.clone())).unwrap();
        prop_assert_eq!(qq.points.len(), xs.len());
        for w in qq.points.windows(2) {
            prop_assert!(w[0].0 < w[1].0 && w[0].1 <= w[1].1);
        }
        let lin = qq_linearity(&qq).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&lin.r2));
    }

    #[test]
    fn histogram_integrates_to_one(xs in norms(200)) {
        let bins = density_histogram(&xs, histogram_bins(xs.len())).unwrap();
        let area: f64 = bins.iter().map(|b| b.density * b.width).sum();
        prop_assert!((area - 1.0).abs() < 1e-9);
        prop_assert!(bins.iter().all(|b| b.density >= 0.0));
    }

    #[test]
    fn selection_partitions_and_grows_with_alpha(xs in norms(64), a in 0.05f64..3.0, extra in 0.0f64..2.0) {
        let set = norm_set(xs.clone());
        let fit = fit_gaussian(&set).unwrap();
        let narrow = select_keep_set(&set, &fit, a).unwrap();
        let wide = select_keep_set(&set, &fit, a + extra).unwrap();
        for d in [&narrow, &wide] {
            let mut all: Vec<usize> = d.keep.iter().chain(&d.removed_low).chain(&d.removed_high).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..xs.len()).collect::<Vec<_>>());
            prop_assert!(!d.keep.is_empty());
            prop_assert!(d.keep.windows(2).all(|w| w[0] < w[1]));
        }
        if !narrow.degenerate {
            prop_assert!(narrow.keep.iter().all(|k| wide.keep.contains(k)));
        }
    }

    #[test]
    fn rewrites_never_grow_the_model(layer_pick in 0usize..3, mask in prop::collection::vec(any::<bool>(), 32), seed in any::<u64>()) {
        let graph = build(Arch::ToyCnn, 3, [3, 16, 16]).unwrap();
        let ckpt = init_params(&graph, seed).unwrap();
        let layer = graph.prunable_indices()[layer_pick];
        let width = graph.layers[layer].out_channels;
        let mut keep: Vec<usize> = (0..width).filter(|&j| mask[j]).collect();
        if keep.is_empty() {
            keep.push(0);
        }
        let removed: Vec<usize> = (0..width).filter(|j| !keep.contains(j)).collect();
        let decision = PruneDecision {
            layer,
            alpha: 1.0,
            keep: keep.clone(),
            removed_low: removed,
            removed_high: vec![],
            mu: 0.0,
            sigma: 1.0,
            degenerate: false,
        };
        let pruned: Checkpoint = prune_conv_pair(&ckpt, layer, &decision).unwrap();
        pruned.validate().unwrap();
        prop_assert_eq!(pruned.graph.layers[layer].out_channels, keep.len());
        prop_assert!(count_filters(&pruned.graph) <= count_filters(&graph));
        prop_assert!(count_params(&pruned) <= count_params(&ckpt));
        prop_assert!(count_flops(&pruned.graph).unwrap() <= count_flops(&graph).unwrap());
        let x = Tensor::full(&[1, 3, 16, 16], 0.25f32);
        let logits = pfgdf::model::forward(&pruned, &x).unwrap();
        prop_assert_eq!(logits.shape(), &[1, 3]);
    }

    #[test]
    fn learning_rate_never_rises(total in 1usize..400) {
        let cfg = RunConfig::default();
        let lrs: Vec<f64> = (0..total).map(|e| cfg.lr_at(e, total)).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(lrs[0], cfg.lr);
    }
}
