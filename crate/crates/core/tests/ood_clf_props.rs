use adaptkan::clf::{self, Analytical, ConformalReport, SimConfig};
use adaptkan::exec::Exec;
use adaptkan::ood::{auroc, Bounds, OodScorer};
use ndarray::Array2;
use proptest::prelude::*;

/// Pairwise count, the definition the rank formula must agree with.
fn auroc_pairs(id: &[f64], ood: &[f64]) -> f64 {
    let mut s = 0.0;
    for a in id {
        for b in ood {
            s += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    s / (id.len() * ood.len()) as f64
}

// coarse values so ties are common
fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-20i32..20).prop_map(|v| v as f64 / 4.0), 1..40)
}

fn feature_matrix() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..5).prop_flat_map(|nf| (Just(nf), prop::collection::vec(-3.0f64..3.0, nf * 20..nf * 60)))
}

proptest! {
    #[test]
    fn auroc_matches_pair_counting(id in scores(), ood in scores()) {
        prop_assert!((auroc(&id, &ood) - auroc_pairs(&id, &ood)).abs() <= 1e-12);
    }

    #[test]
    fn auroc_is_antisymmetric(id in scores(), ood in scores()) {
        prop_assert!((auroc(&id, &ood) + auroc(&ood, &id) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn dyadic_rescaling_leaves_scores_unchanged((nf, flat) in feature_matrix(), exps in prop::collection::vec(-6i32..6, 5), bins in 2usize..50) {
        let n = flat.len() / nf;
        let x = Array2::from_shape_vec((n, nf), flat[..n * nf].to_vec()).unwrap();
        let (fit, query) = (x.slice(ndarray::s![..n / 2, ..]), x.slice(ndarray::s![n / 2.., ..]));
        let scale = |m: ndarray::ArrayView2<f64>| {
            let mut m = m.to_owned();
            for (j, mut c) in m.columns_mut().into_iter().enumerate() {
                c.mapv_inplace(|v| v * 2f64.powi(exps[j]));
            }
            m
        };
        let plain = OodScorer::fit(fit, bins, &Bounds::FromData).unwrap();
        let scaled = OodScorer::fit(scale(fit).view(), bins, &Bounds::FromData).unwrap();
        let a = plain.score_batch(query, Exec::Sequential).unwrap();
        let b = scaled.score_batch(scale(query).view(), Exec::Sequential).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn lowering_one_marginal_lowers_the_score((nf, flat) in feature_matrix(), row in 0usize..20, feat in 0usize..5, drop in 0.0f64..1.0) {
        let n = flat.len() / nf;
        let x = Array2::from_shape_vec((n, nf), flat[..n * nf].to_vec()).unwrap();
        let mut scorer = OodScorer::fit(x.view(), 8, &Bounds::FromData).unwrap();
        let q: Vec<f64> = x.row(row % n).to_vec();
        let before = scorer.score_hist(&q).unwrap();
        let j = feat % nf;
        let h = &mut scorer.histograms[j];
        let bin = h.domain.bin_index(q[j]);
        // moving mass out of the query's bin lowers P_j only
        let moved = h.hist[bin] * drop;
        h.hist[bin] -= moved;
        let other = (bin + 1) % h.hist.len();
        if other != bin {
            h.hist[other] += moved;
        }
        prop_assert!(scorer.score_hist(&q).unwrap() <= before + 1e-15);
    }

    #[test]
    fn conformal_bounds_are_monotone(d in prop::collection::vec(0.0f64..5.0, 1..200), d1 in 0.0f64..1.0, d2 in 0.0f64..1.0, c1 in 0.0f64..5.0, c2 in 0.0f64..5.0) {
        let r = ConformalReport::new(d).unwrap();
        let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(r.quantile(hi) <= r.quantile(lo));
        let (lo, hi) = if c1 < c2 { (c1, c2) } else { (c2, c1) };
        prop_assert!(r.confidence(lo) <= r.confidence(hi));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn uncontrolled_flow_conserves_quartic_energy(r in 0.01f64..2.0, theta in 0.0f64..std::f64::consts::TAU) {
        // RK4 at dt = 0.01 stays inside 1e-6 up to radius 2; the error grows steeply with r
        let start = [r * theta.cos(), r * theta.sin()];
        let e0 = clf::quartic_energy(start);
        for x in clf::simulate_uncontrolled(start, &SimConfig::default()) {
            prop_assert!((clf::quartic_energy(x) - e0).abs() <= 1e-6 * e0);
        }
    }

    #[test]
    fn closed_loop_value_never_increases(x1 in -3.0f64..3.0, x2 in -3.0f64..3.0) {
        let cfg = SimConfig { record_path: true, ..Default::default() };
        let t = clf::simulate([x1, x2], &Analytical, &cfg).unwrap();
        prop_assert!(!t.failed);
        for w in t.values.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-8, "{} -> {}", w[0], w[1]);
        }
    }
}
