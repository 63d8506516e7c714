use proptest::prelude::*;
use staterate_core::harness::VelocityBin;
use staterate_core::nn::layers::{BatchNorm, Mode};
use staterate_core::nn::loss::softmax;
use staterate_core::nn::{ParamGroup, ParamStore, Tensor};
use staterate_core::phy::{Phy, NUM_MCS, OPTIMAL_PER_BOUND};
use staterate_core::RateDistribution;

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-1e6f64..1e6, 1..16)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn positive_scaling_keeps_the_argmax(logits in prop::array::uniform8(-20f64..20.0), c in 0.1f64..10.0) {
        let scaled: Vec<f64> = logits.iter().map(|z| z * c).collect();
        let a = RateDistribution::from_logits(&logits).unwrap().argmax();
        let b = RateDistribution::from_logits(&scaled).unwrap().argmax();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn velocity_bins_cover_each_speed_once(v in 0.0f64..30.0) {
        let edges = [(0.0, 2.0), (2.0, 6.0), (6.0, f64::INFINITY)];
        let hits: Vec<usize> = edges
            .iter()
            .enumerate()
            .filter(|(_, (lo, hi))| v >= *lo && v < *hi)
            .map(|(i, _)| i)
            .collect();
        prop_assert_eq!(hits.len(), 1);
        prop_assert_eq!(VelocityBin::of(v) as usize, hits[0]);
    }

    #[test]
    fn batchnorm_train_and_infer_agree_on_frozen_stats(
        data in prop::collection::vec(-5f64..5.0, 24),
        gamma in prop::collection::vec(0.2f64..3.0, 3),
    ) {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3, ParamGroup::Extractor);
        store.get_mut(0).copy_from_slice(&gamma);
        let x = Tensor::from_vec(&[8, 3], data).unwrap();
        let (train, cache) = bn.forward(&store, &x, Mode::Train).unwrap();
        let (rm, rv) = bn.running_ids();
        store.get_mut(rm).copy_from_slice(cache.batch_mean());
        store.get_mut(rv).copy_from_slice(cache.batch_var());
        let (infer, _) = bn.forward(&store, &x, Mode::Infer).unwrap();
        for (a, b) in train.data().iter().zip(infer.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn label_survives_monotone_per_rescaling(
        raw in prop::array::uniform8(0.0f64..1.0),
        power in 0.2f64..5.0,
    ) {
        let mut pers = raw;
        pers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Fixes the 10% point and preserves order on both sides of it.
        let b = OPTIMAL_PER_BOUND;
        let warp = |p: f64| b * (p / b).powf(power);
        let mut warped = [0.0; NUM_MCS];
        for (w, p) in warped.iter_mut().zip(&pers) {
            *w = warp(*p).min(1.0);
        }
        prop_assert_eq!(Phy::optimal_from_pers(&pers), Phy::optimal_from_pers(&warped));
    }
}
