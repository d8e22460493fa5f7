use adg_core::data::{ChannelLayout, TrajectoryDataset};
use adg_core::detect::{auc, classify_and_split, rescale_scores, RescaleMode};
use adg_core::schedule::VarianceSchedule;
use ndarray::Array2;
use proptest::prelude::*;

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1e3, 1..200)
}

fn dataset() -> impl Strategy<Value = TrajectoryDataset> {
    prop::collection::vec(1usize..12, 1..4).prop_flat_map(|lengths| {
        let total: usize = lengths.iter().sum();
        prop::collection::vec(-5.0f64..5.0, total * 4).prop_map(move |vals| {
            let mut off = 0;
            let episodes = lengths
                .iter()
                .map(|&len| {
                    let ep = Array2::from_shape_vec((len, 4), vals[off * 4..(off + len) * 4].to_vec()).unwrap();
                    off += len;
                    ep
                })
                .collect();
            TrajectoryDataset::new("prop", ChannelLayout::new(2, 1, 1).unwrap(), episodes).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn rescaling_lands_in_unit_interval_and_keeps_order(xs in scores(), clipped in any::<bool>()) {
        let mode = if clipped { RescaleMode::Clipped } else { RescaleMode::MinMax };
        let r = rescale_scores(&xs, mode).unwrap();
        prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for i in 0..xs.len() {
            for j in 0..xs.len() {
                if xs[i] < xs[j] {
                    prop_assert!(r[i] <= r[j]);
                }
            }
        }
    }

    #[test]
    fn raising_the_threshold_never_flags_more(xs in scores(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let r = rescale_scores(&xs, RescaleMode::MinMax).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let low = classify_and_split(&r, lo).unwrap();
        let high = classify_and_split(&r, hi).unwrap();
        prop_assert!(high.corrupted.len() <= low.corrupted.len());
        for (l, h) in low.indicator.iter().zip(&high.indicator) {
            prop_assert!(!*l || *h);
        }
        prop_assert_eq!(low.clean.len() + low.corrupted.len(), xs.len());
    }

    #[test]
    fn auc_is_a_probability_and_flips_with_labels(
        pairs in prop::collection::vec((0.0f64..10.0, any::<bool>()), 2..100)
    ) {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auc(&xs, &labels);
        prop_assert!((0.0..=1.0).contains(&a));
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((a + auc(&xs, &flipped) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slices_replicate_episode_edges(d in dataset(), h in 0usize..4) {
        for at in d.step_indices() {
            let w = d.slice_at(at.episode, at.t, h).unwrap();
            let len = d.episode_lengths()[at.episode] as isize;
            prop_assert_eq!(w.values.dim(), (4, 2 * h + 1));
            prop_assert_eq!(w.center(), d.row(at));
            for j in 0..=2 * h {
                let src = (at.t as isize + j as isize - h as isize).clamp(0, len - 1) as usize;
                prop_assert_eq!(w.values.column(j), d.episodes()[at.episode].row(src));
            }
        }
    }

    #[test]
    fn standardization_round_trips(d in dataset()) {
        let back = d.standardize().destandardize().unwrap();
        for (a, b) in d.values().zip(back.values()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn schedule_identities_hold(
        steps in 2usize..300,
        first in 1e-5f64..1e-2,
        spread in 0.0f64..0.05,
    ) {
        let s = VarianceSchedule::linear(steps, first, first + spread).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for k in 1..=steps {
            prop_assert!((s.alpha_bar(k) - s.alpha_bar(k - 1) * s.alpha(k)).abs() < 1e-12);
            prop_assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
        }
        let k_a = 1 + steps / 3;
        for k in k_a..=steps {
            let b = s.bridge_coefficients(k_a, k).unwrap();
            let total = b.signal * b.signal * (1.0 - s.alpha_bar(k_a)) + b.noise * b.noise;
            prop_assert!((total - (1.0 - s.alpha_bar(k))).abs() < 1e-12);
        }
    }
}
