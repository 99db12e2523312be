use kevo::graph::{build_architecture, Family, ParamStore};
use kevo::io::{Checkpoint, CheckpointMeta};
use kevo::split::{compute_sparsity, kels_count, kels_split, wels_count, wels_split, Bitset, SplitMask};
use kevo::tensor::{SeededRng, Tensor};
use proptest::prelude::*;

fn bits() -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), 0..300)
}

proptest! {
    #[test]
    fn bitset_matches_bool_vector(a in bits(), seed in any::<u64>()) {
        let set = Bitset::from_fn(a.len(), |i| a[i]);
        prop_assert_eq!(set.iter().collect::<Vec<_>>(), a.clone());
        prop_assert_eq!(set.count_ones(), a.iter().filter(|&&x| x).count());
        prop_assert_eq!(set.count_ones() + set.complement().count_ones(), a.len());

        let mut rng = SeededRng::new(seed, "other");
        let b: Vec<bool> = (0..a.len()).map(|_| rng.symmetric(1.0) > 0.0).collect();
        let other = Bitset::from_fn(b.len(), |i| b[i]);
        prop_assert_eq!(set.hamming(&other), a.iter().zip(&b).filter(|(x, y)| x != y).count());
        prop_assert_eq!(set.overlap(&other), a.iter().zip(&b).filter(|(x, y)| **x && **y).count());

        let back = Bitset::from_bytes(a.len(), set.as_bytes().to_vec()).unwrap();
        prop_assert_eq!(back, set);
    }

    #[test]
    fn kels_count_is_the_smallest_covering_count(s in 0.001f64..=1.0, c in 1usize..4096) {
        let k = kels_count(s, c);
        let oracle = (1..=c).find(|&k| k as f64 >= s * c as f64 - 1e-9).unwrap_or(c);
        prop_assert_eq!(k, oracle);
    }

    #[test]
    fn wels_count_is_within_half_a_weight(s in 0.001f64..=1.0, n in 0usize..100_000) {
        let k = wels_count(s, n);
        prop_assert!(k <= n);
        prop_assert!((k as f64 - s * n as f64).abs() <= 0.5 + 1e-9);
    }

    #[test]
    fn wels_masks_hit_exact_counts(s in 0.05f64..0.95, seed in any::<u64>()) {
        let graph = build_architecture(Family::ToyResnet, 4, [3, 8, 8]).unwrap();
        let mask = wels_split(&graph, s, &mut SeededRng::new(seed, "wels")).unwrap();
        mask.validate(&graph).unwrap();
        for (key, fit) in mask.param_masks(&graph).unwrap() {
            if fit.count_ones() != fit.len() {
                prop_assert_eq!(fit.count_ones(), wels_count(s, fit.len()), "{}", key);
            }
        }
        prop_assert_eq!(SplitMask::from_text(&mask.to_text()).unwrap(), mask);
    }

    #[test]
    fn kels_fit_grows_with_split_rate(a in 0.05f64..1.0, b in 0.05f64..1.0) {
        let graph = build_architecture(Family::SmallVggBn, 10, [3, 16, 16]).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let fit = |s| {
            let mask = kels_split(&graph, s).unwrap();
            prop_assert_eq!(SplitMask::from_text(&mask.to_text()).unwrap(), mask.clone());
            Ok(compute_sparsity(&mask, &graph).unwrap().fit())
        };
        prop_assert!(fit(lo)? <= fit(hi)?);
    }

    #[test]
    fn checkpoints_round_trip_bit_for_bit(
        values in prop::collection::vec(any::<u32>(), 1..64),
        generation in 0usize..100,
    ) {
        let mut params = ParamStore::new();
        let floats: Vec<f32> = values.iter().map(|&b| f32::from_bits(b)).collect();
        params.insert("x.weight", Tensor::new(vec![floats.len()], floats).unwrap());
        let ck = Checkpoint {
            params,
            mask: None,
            meta: CheckpointMeta { generation, ..CheckpointMeta::default() },
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let bits: Vec<u32> = back.params.get("x.weight").unwrap().data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, values);
        prop_assert_eq!(back.meta.generation, generation);
    }
}
