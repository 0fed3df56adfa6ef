mod common;

use glyphmoe::metrics::{l1, rmse, ssim};
use glyphmoe::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn image(rng: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize, binary: bool) -> Tensor<f64> {
    Tensor::from_fn(&[1, h, w], |_| if binary { f64::from(rng.gen_bool(0.2) as u8) } else { rng.gen_range(0.0..1.0) })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ssim_matches_brute_force(seed in any::<u64>(), h in 8usize..20, w in 8usize..20, binary in any::<bool>()) {
        let mut rng = common::rng(seed);
        let a = image(&mut rng, h, w, binary);
        let b = image(&mut rng, h, w, binary);
        let fast = ssim(&a, &b).unwrap();
        prop_assert!((fast - common::ssim_brute(a.data(), b.data(), h, w)).abs() < 1e-9);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        prop_assert_eq!(l1(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let (d1, d2) = (l1(&a, &b).unwrap(), rmse(&a, &b).unwrap());
        prop_assert!(d1 <= d2 + 1e-15);
        prop_assert!((ssim(&b, &a).unwrap() - fast).abs() < 1e-12);
    }
}

#[test]
fn glyph_sized_images_match_brute_force() {
    let mut rng = common::rng(5);
    for _ in 0..10 {
        let a = image(&mut rng, 32, 32, false);
        let b = image(&mut rng, 32, 32, true);
        assert!((ssim(&a, &b).unwrap() - common::ssim_brute(a.data(), b.data(), 32, 32)).abs() < 1e-9);
    }
}

#[test]
fn channels_are_averaged() {
    let mut rng = common::rng(6);
    let a = image(&mut rng, 2 * 9, 9, false).reshape(&[2, 9, 9]).unwrap();
    let b = image(&mut rng, 2 * 9, 9, false).reshape(&[2, 9, 9]).unwrap();
    let per = |c: usize| common::ssim_brute(&a.data()[c * 81..(c + 1) * 81], &b.data()[c * 81..(c + 1) * 81], 9, 9);
    assert!((ssim(&a, &b).unwrap() - (per(0) + per(1)) / 2.0).abs() < 1e-12);
}
