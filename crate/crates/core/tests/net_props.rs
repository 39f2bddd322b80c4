use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use umbra_core::blocks::MambaBlock;
use umbra_core::net::{InterleavedSequence, Model, ModelConfig, Routing};
use umbra_core::{MaskImage, ParamStore, Tape, Tensor};

fn image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0))
}

fn config() -> impl Strategy<Value = ModelConfig> {
    (1usize..4, 0usize..3, prop::sample::select(vec![1usize, 2, 4]), 1usize..4, 1usize..3, any::<u64>()).prop_map(
        |(channels, unet_depth, patch_size, state_dim, expansion, seed)| ModelConfig {
            channels,
            unet_depth,
            patch_size,
            state_dim,
            expansion,
            seed,
            ..ModelConfig::default()
        },
    )
}

fn rect_mask(seed: u64, h: usize, w: usize) -> MaskImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, l) = (rng.gen_range(0..h), rng.gen_range(0..w));
    MaskImage::rectangle(h, w, t, rng.gen_range(t + 1..=h), l, rng.gen_range(l + 1..=w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn model_preserves_image_shape(cfg in config(), seed: u64) {
        let (h, w) = (8, 16);
        let mut store = ParamStore::new();
        let model = Model::new(cfg, &mut store).unwrap();
        let mask = rect_mask(seed, h, w);
        let out = model.predict(&store, &image(seed, h, w), &mask).unwrap();
        prop_assert_eq!(out.shape(), &[3, h, w]);
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn block_maps_tokens_to_tokens(seed: u64, c in 1usize..4, n in 1usize..4) {
        let (h, w) = (4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = MambaBlock::new(&mut store, &mut rng, "b", c, n, 2, 0.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[h * w, c], |_| rng.gen_range(-1.0..1.0)));
        let order: Vec<usize> = (0..h * w).rev().collect();
        let y = block.forward(&mut tape, &store, x, Some(&order), h, w).unwrap();
        prop_assert_eq!(tape.shape(y), &[h * w, c]);
    }

    #[test]
    fn interleave_fold_is_bitwise(seed: u64, hh in 1usize..=32, hw in 1usize..=32, c in 1usize..4) {
        let (h, w) = (2 * hh, 2 * hw);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fine = Tensor::from_fn(&[h * w, c], |_| rng.gen::<f64>() * 1e6 - 5e5);
        let coarse = Tensor::from_fn(&[hh * hw, c], |_| rng.gen::<f64>());
        let seq = InterleavedSequence::new(&fine, &coarse, h, w).unwrap();
        prop_assert_eq!(seq.len(), 5 * h * w / 4);
        prop_assert_eq!(seq.fold(), fine);
    }

    #[test]
    fn routing_depends_only_on_mask_and_scan_settings(a in config(), b in config(), seed: u64) {
        let mask = rect_mask(seed, 16, 16);
        let b = ModelConfig { patch_size: a.patch_size, threshold: a.threshold, unet_depth: a.unet_depth, ..b };
        prop_assert_eq!(Routing::new(&a, &mask).unwrap(), Routing::new(&b, &mask).unwrap());
    }

    #[test]
    fn silenced_model_is_the_identity(cfg in config(), seed: u64) {
        let (h, w) = (8, 8);
        let mut store = ParamStore::new();
        let model = Model::new(cfg, &mut store).unwrap();
        model.silence(&mut store);
        model.zero_decoder(&mut store);
        let img = image(seed, h, w);
        let out = model.predict(&store, &img, &rect_mask(seed, h, w)).unwrap();
        prop_assert!(out.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn forward_is_reproducible(cfg in config(), seed: u64) {
        let mut store = ParamStore::new();
        let model = Model::new(cfg.clone(), &mut store).unwrap();
        let mut store2 = ParamStore::new();
        let model2 = Model::new(cfg, &mut store2).unwrap();
        let (img, mask) = (image(seed, 8, 8), rect_mask(seed, 8, 8));
        prop_assert_eq!(model.predict(&store, &img, &mask).unwrap(), model2.predict(&store2, &img, &mask).unwrap());
    }
}
