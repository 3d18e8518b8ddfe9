use std::path::Path;

use darl::patch::{
    augment, darlpack, ordering_permutation, patchify, pnm, unpatchify, AugmentParams, ImageRecord, OrderingStrategy,
};
use darl::Rng;
use proptest::prelude::*;

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

fn image(seed: u64, h: usize, w: usize, c: usize) -> ImageRecord {
    ImageRecord::new(Rng::seed_from_u64(seed).uniform_tensor(&[h, w, c]), Some((seed % 7) as u32)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_ordering_is_a_bijection(gh in 1usize..=16, gw in 1usize..=16, pick in any::<(usize, usize, u64)>()) {
        let (dh, dw) = (divisors(gh), divisors(gw));
        let block = (dh[pick.0 % dh.len()], dw[pick.1 % dw.len()]);
        let mut rng = Rng::seed_from_u64(pick.2);
        for s in [
            OrderingStrategy::raster(),
            OrderingStrategy::random(),
            OrderingStrategy::nested(block.0, block.1),
            OrderingStrategy::round_robin(block.0, block.1),
        ] {
            let mut p = ordering_permutation((gh, gw), s, &mut rng).unwrap();
            p.sort_unstable();
            prop_assert_eq!(p, (0..gh * gw).collect::<Vec<_>>());
        }
    }

    #[test]
    fn trivial_blocks_give_raster(gh in 1usize..=16, gw in 1usize..=16) {
        let mut rng = Rng::seed_from_u64(0);
        let raster: Vec<usize> = (0..gh * gw).collect();
        prop_assert_eq!(ordering_permutation((gh, gw), OrderingStrategy::nested(1, 1), &mut rng).unwrap(), raster.clone());
        prop_assert_eq!(ordering_permutation((gh, gw), OrderingStrategy::round_robin(gh, gw), &mut rng).unwrap(), raster);
    }

    #[test]
    fn reorder_then_invert_restores_raster(seed in any::<u64>(), gh in 1usize..6, gw in 1usize..6, p in 1usize..4, c in 1usize..4) {
        let img = image(seed, gh * p, gw * p, c);
        let seq = patchify(&img, p).unwrap();
        let perm = ordering_permutation(seq.grid, OrderingStrategy::random(), &mut Rng::seed_from_u64(seed)).unwrap();
        let shuffled = seq.reorder(&perm).unwrap();
        prop_assert_eq!(&shuffled.to_raster().unwrap(), &seq);
        prop_assert_eq!(&unpatchify(&shuffled).unwrap(), &img.pixels);
    }

    #[test]
    fn augmentation_stays_in_unit_range(seed in any::<u64>(), h in 2usize..24, w in 2usize..24, out in 1usize..20) {
        let img = image(seed, h, w, 1);
        let a = augment(&img, &mut Rng::seed_from_u64(seed ^ 1), &AugmentParams::new(out, out)).unwrap();
        prop_assert_eq!(a.pixels.shape(), &[out, out, 1]);
        prop_assert!(a.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn quantized_images_round_trip(seed in any::<u64>(), h in 1usize..12, w in 1usize..12, color in any::<bool>()) {
        let c = if color { 3 } else { 1 };
        let px = Rng::seed_from_u64(seed).uniform_tensor(&[h, w, c]).map(|v| (v * 255.0).round() / 255.0);
        let bytes = pnm::encode(&px).unwrap();
        let back = pnm::decode(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &px);
        let flipped = px.map(|v| (255.0 - (v * 255.0).round()) / 255.0);
        let records = vec![ImageRecord::new(px, Some(3)).unwrap(), ImageRecord::new(flipped, Some(0)).unwrap()];
        let packed = darlpack::encode(&records).unwrap();
        prop_assert_eq!(darlpack::decode(&packed, Path::new("mem")).unwrap(), records);
    }
}
