mod common;

use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cosod_core::backend::{DiffusionBackend, ToyBackend};
use cosod_core::concept::{concept_from_token, learn_concept, LearnConfig, ResamplingConfig, TimestepSampling};
use cosod_core::dataset::{load_group, ImageGroup};
use cosod_core::metrics::{
    e_measure_curve, e_measure_max, f_measure_curve, iou, mae, max_f_measure, s_measure, thresholds,
};
use cosod_core::segmentation::{segment_group, BinarySaliencyMap, FailurePolicy, SegmentConfig, SoftSaliencyMap};

fn fixture_group(name: &str) -> ImageGroup {
    load_group(&common::fixture_images().join(name), None).unwrap()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn running_mean_of_loss_is_eventually_nonincreasing() {
    let toy = ToyBackend::default();
    let out = learn_concept(&toy, &fixture_group("group_a"), &LearnConfig::default()).unwrap();
    let window = 100;
    let means: Vec<f64> = out
        .losses
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    let last_rise = means.windows(2).rposition(|p| p[1] > p[0]);
    assert!(
        last_rise.is_none_or(|i| i < means.len() / 2),
        "running mean still rising at window {last_rise:?} of {}",
        means.len()
    );
    assert!(out.final_loss < 1e-4 * out.initial_loss());
}

#[test]
fn toy_minimizer_does_not_depend_on_timestep_distribution() {
    let toy = ToyBackend::default();
    let group = fixture_group("group_b");
    for timesteps in [
        TimestepSampling::Uniform,
        TimestepSampling::Resampled(ResamplingConfig::with_alpha(1.0)),
        TimestepSampling::Resampled(ResamplingConfig::with_alpha(2.0)),
    ] {
        let cfg = LearnConfig {
            timesteps: timesteps.clone(),
            ..LearnConfig::default()
        };
        let out = learn_concept(&toy, &group, &cfg).unwrap();
        let init = toy.token_embedding(&cfg.init_token).unwrap();
        let ratio = dist(&out.concept.embedding, toy.target_embedding()) / dist(&init, toy.target_embedding());
        assert!(ratio < 0.05, "{timesteps:?}: {ratio}");
    }
}

#[test]
fn interval_frequencies_pass_chi_square() {
    let cfg = ResamplingConfig::default();
    let masses = cfg.interval_masses();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 100_000;
    let mut counts = [0f64; 3];
    for _ in 0..n {
        let t = cfg.sample(&mut rng);
        counts[cfg.intervals().iter().position(|iv| iv.contains(t)).unwrap()] += 1.0;
    }
    let chi2: f64 = counts
        .iter()
        .zip(masses)
        .map(|(o, m)| (o - m * n as f64).powi(2) / (m * n as f64))
        .sum();
    // Upper 1% point of χ² with 2 degrees of freedom: −2 ln 0.01.
    let critical = -2.0 * 0.01f64.ln();
    assert!(chi2 < critical, "χ² = {chi2}");
}

#[test]
fn segmentation_is_permutation_equivariant() {
    let toy = ToyBackend::default();
    let group = fixture_group("group_a");
    let concept = concept_from_token(&toy, "object").unwrap();
    let cfg = SegmentConfig::default();
    let forward = segment_group(&toy, &group, &concept, &cfg, FailurePolicy::FailFast).unwrap();
    let mut reversed = group.clone();
    reversed.images.reverse();
    let backward = segment_group(&toy, &reversed, &concept, &cfg, FailurePolicy::FailFast).unwrap();
    assert_eq!(forward.len(), group.len());
    for (a, b) in forward.iter().zip(backward.iter().rev()) {
        assert_eq!(a.image_id, b.image_id);
        let (pa, pb) = (a.result.as_ref().unwrap(), b.result.as_ref().unwrap());
        assert_eq!(pa.0, pb.0);
        assert_eq!(pa.1, pb.1);
    }
}

#[test]
fn backend_is_deterministic() {
    let a = ToyBackend::default();
    let b = ToyBackend::default();
    let img = fixture_group("group_a").images[0].image.clone();
    let img = cosod_core::backend::fit_to_backend(&a, &img);
    assert_eq!(a.encode_image(&img).unwrap(), b.encode_image(&img).unwrap());
    assert_eq!(a.target_embedding(), b.target_embedding());
}

fn pair_strategy() -> impl Strategy<Value = (Array2<f64>, Array2<bool>)> {
    (2usize..9, 2usize..9).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0.0f64..=1.0, h * w),
            prop::collection::vec(any::<bool>(), h * w),
        )
            .prop_map(move |(p, g)| {
                (
                    Array2::from_shape_vec((h, w), p).unwrap(),
                    Array2::from_shape_vec((h, w), g).unwrap(),
                )
            })
    })
}

fn all_scores(p: &Array2<f64>, g: &Array2<bool>) -> [f64; 5] {
    let soft = SoftSaliencyMap::new(p.clone()).unwrap();
    let gt = BinarySaliencyMap::new(g.clone());
    let b = cosod_core::segmentation::binarize(&soft, 0.5).unwrap();
    [
        iou(&b, &gt).unwrap(),
        mae(&soft, &gt).unwrap(),
        max_f_measure(&soft, &gt, 0.3, 256).unwrap(),
        e_measure_max(&soft, &gt, 256).unwrap(),
        s_measure(&soft, &gt).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn scores_are_in_unit_interval((p, g) in pair_strategy()) {
        for v in all_scores(&p, &g) {
            prop_assert!(v.is_finite() && (0.0..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn every_measure_is_transpose_invariant((p, g) in pair_strategy()) {
        let a = all_scores(&p, &g);
        let b = all_scores(&p.t().to_owned(), &g.t().to_owned());
        for (x, y) in a.iter().zip(b) {
            prop_assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn set_measures_are_flip_invariant((p, g) in pair_strategy()) {
        let a = all_scores(&p, &g);
        for (fp, fg) in [
            (p.slice(s![..;-1, ..]).to_owned(), g.slice(s![..;-1, ..]).to_owned()),
            (p.slice(s![.., ..;-1]).to_owned(), g.slice(s![.., ..;-1]).to_owned()),
        ] {
            let b = all_scores(&fp, &fg);
            for k in 0..4 {
                prop_assert!((a[k] - b[k]).abs() < 1e-12, "measure {k}: {} vs {}", a[k], b[k]);
            }
        }
    }

    #[test]
    fn max_f_dominates_every_threshold((p, g) in pair_strategy()) {
        let soft = SoftSaliencyMap::new(p).unwrap();
        let gt = BinarySaliencyMap::new(g);
        let best = max_f_measure(&soft, &gt, 0.3, 256).unwrap();
        let curve = f_measure_curve(&soft, &gt, 0.3, 256).unwrap();
        prop_assert_eq!(curve.len(), thresholds(256).len());
        prop_assert!(curve.iter().all(|&f| f <= best));
        let e_best = e_measure_max(&soft, &gt, 256).unwrap();
        prop_assert!(e_measure_curve(&soft, &gt, 256).unwrap().iter().all(|&e| e <= e_best));
    }

    #[test]
    fn iou_and_binary_mae_are_symmetric((p, g) in pair_strategy()) {
        let pb = BinarySaliencyMap::new(p.mapv(|v| v >= 0.5));
        let gb = BinarySaliencyMap::new(g.clone());
        prop_assert_eq!(iou(&pb, &gb).unwrap(), iou(&gb, &pb).unwrap());
        let as_soft = |b: &BinarySaliencyMap| SoftSaliencyMap::new(b.values().mapv(|v| if v { 1.0 } else { 0.0 })).unwrap();
        let m1 = mae(&as_soft(&pb), &gb).unwrap();
        let m2 = mae(&as_soft(&gb), &pb).unwrap();
        prop_assert_eq!(m1, m2);
        let agree = pb.values().iter().zip(gb.values()).filter(|(a, b)| a == b).count() as f64;
        let accuracy = agree / g.len() as f64;
        prop_assert!((m1 - (1.0 - accuracy)).abs() < 1e-12);
    }
}
