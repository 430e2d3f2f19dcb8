use std::collections::BTreeMap;

use av_align::alignment::{contrastive_loss_embedded, retrieve_cross_modal, EmbeddedEntries};
use av_align::evaluation::{auc, ciou};
use av_align::localization::{fuse_maps, normalize, Heatmap};
use av_align::scene_synth::stratify;
use av_align::separation::bss_metrics;
use candle_core::{Device, Tensor};
use proptest::prelude::*;

fn heatmap_and_mask(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (
        prop::collection::vec(0.0f64..=1.0, n * n),
        prop::collection::vec(any::<bool>(), n * n).prop_filter("non-empty mask", |m| m.iter().any(|&b| b)),
    )
}

fn embedded(rows: &[Vec<f64>], keys: Vec<(u64, usize)>) -> EmbeddedEntries {
    let e = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    EmbeddedEntries {
        embeddings: Tensor::from_vec(flat, (rows.len(), e), &Device::Cpu).unwrap(),
        keys,
    }
}

proptest! {
    #[test]
    fn ciou_bounded_and_exact_on_own_mask((data, mask) in heatmap_and_mask(6), tau in 0.05f64..1.0) {
        let h = Heatmap::new(6, 6, data).unwrap();
        let v = ciou(&h, &mask, tau).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let perfect = Heatmap::new(6, 6, mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
        prop_assert_eq!(ciou(&perfect, &mask, tau).unwrap(), 1.0);
    }

    #[test]
    fn auc_bounded_and_monotone(scores in prop::collection::vec(0.0f64..=1.0, 1..40), bump in 0.0f64..0.5, i in any::<prop::sample::Index>()) {
        let a = auc(&scores);
        prop_assert!((0.0..=1.0).contains(&a));
        let mut better = scores.clone();
        let k = i.index(scores.len());
        better[k] = (better[k] + bump).min(1.0);
        prop_assert!(auc(&better) >= a);
    }

    #[test]
    fn normalization_keeps_argmax(data in prop::collection::vec(-5.0f64..0.0, 16)) {
        let raw = Heatmap::new(4, 4, data).unwrap();
        let n = normalize(&raw).unwrap();
        prop_assert!(n.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let lo = raw.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            prop_assert_eq!(raw.data[raw.argmax()], raw.data[n.argmax()]);
        }
    }

    #[test]
    fn fusion_stays_in_unit_interval(
        maps in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 9), 3),
        probs in prop::collection::vec(0.0f64..=1.0, 3),
    ) {
        let m: BTreeMap<usize, Heatmap> = maps.into_iter().enumerate().map(|(c, d)| (c, Heatmap::new(3, 3, d).unwrap())).collect();
        let fused = fuse_maps(&m, &probs, &[0, 1, 2]).unwrap();
        prop_assert!(fused.data.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn retrieval_matches_sorting(gallery in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..30), q in prop::collection::vec(-3.0f64..3.0, 3), k in 1usize..40) {
        let got = retrieve_cross_modal(&q, &gallery, k).unwrap();
        let dist = |g: &Vec<f64>| g.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let mut idx: Vec<usize> = (0..gallery.len()).collect();
        idx.sort_by(|&a, &b| dist(&gallery[a]).total_cmp(&dist(&gallery[b])).then(a.cmp(&b)));
        idx.truncate(k.min(gallery.len()));
        prop_assert_eq!(got, idx);
    }

    #[test]
    fn contrastive_loss_nonnegative_and_monotone_in_margin(
        a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..5),
        v in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..5),
        m1 in 0.1f64..2.0,
        extra in 0.0f64..2.0,
    ) {
        let ka: Vec<(u64, usize)> = (0..a.len()).map(|i| (i as u64, 0)).collect();
        let kv: Vec<(u64, usize)> = (0..v.len()).map(|i| (i as u64, 0)).collect();
        let (ea, ev) = (embedded(&a, ka), embedded(&v, kv));
        let l1: f64 = contrastive_loss_embedded(&ea, &ev, m1).unwrap().to_scalar().unwrap();
        let l2: f64 = contrastive_loss_embedded(&ea, &ev, m1 + extra).unwrap().to_scalar().unwrap();
        prop_assert!(l1 >= 0.0);
        prop_assert!(l2 >= l1 - 1e-12);
    }

    #[test]
    fn stratification_partitions(n in 0usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let total = a + b + 1.0;
        let counts = stratify(n, [a / total, b / total, 1.0 / total]);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
    }

    #[test]
    fn sdr_never_exceeds_sir(seed in any::<u64>(), w in 0.0f64..1.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s1: Vec<f32> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s2: Vec<f32> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let est: Vec<f32> = s1.iter().zip(&s2).map(|(a, b)| a + w as f32 * b + 0.05 * rng.random_range(-1.0f32..1.0)).collect();
        let m = bss_metrics(&est, &[s1, s2], 0).unwrap();
        prop_assert!(m.sdr <= m.sir + 1e-9);
        prop_assert!(m.sdr <= m.sar + 1e-9);
    }
}
