mod common;

use glyphmoe::model::haa::{channel_attention, spatial_attention, BranchParams, HaaConfig};
use glyphmoe::tensor::{Tape, Tensor};
use proptest::prelude::*;

struct Run {
    out: Vec<f64>,
    attn: Tensor<f64>,
    oracle_out: Vec<f64>,
    oracle_attn: Vec<f64>,
}

fn run_branch(cfg: &HaaConfig, spatial: bool, seed: u64) -> Run {
    let mut rng = common::rng(seed);
    let h = cfg.half();
    let z = common::random(&mut rng, &[h, cfg.h_bar, cfg.w_bar]);
    let w: Vec<Tensor<f64>> = (0..4).map(|_| common::random(&mut rng, &[h, h])).collect();
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone()).unwrap();
    let [q, k, v, o] = [0, 1, 2, 3].map(|i| tape.constant(w[i].clone()).unwrap());
    let p = BranchParams { q, k, v, o };
    let a = if spatial {
        spatial_attention(&mut tape, zv, &p, cfg).unwrap()
    } else {
        channel_attention(&mut tape, zv, &p, cfg).unwrap()
    };
    let (oracle_out, oracle_attn) = if spatial {
        common::spatial_attention(
            z.data(),
            h,
            cfg.h_bar,
            cfg.w_bar,
            cfg.s,
            w[0].data(),
            w[1].data(),
            w[2].data(),
            w[3].data(),
        )
    } else {
        common::channel_attention(z.data(), h, cfg.tokens(), w[0].data(), w[1].data(), w[2].data(), w[3].data())
    };
    Run { out: tape.value(a.out).data().to_vec(), attn: tape.value(a.attn).clone(), oracle_out, oracle_attn }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn cfg(c_bar: usize, side: usize, s: usize) -> HaaConfig {
    HaaConfig { c_bar, h_bar: side, w_bar: side, s, ffn_mult: 2 }
}

#[test]
fn branches_match_loop_oracles_on_grid() {
    for c_bar in [8, 16] {
        for side in [4, 8] {
            for s in [1, 2] {
                let cfg = cfg(c_bar, side, s);
                let ch = run_branch(&cfg, false, 7);
                assert_eq!(ch.attn.shape(), [c_bar / 2, c_bar / 2]);
                assert!(max_diff(&ch.out, &ch.oracle_out) < 1e-10, "{cfg:?}");
                assert!(max_diff(ch.attn.data(), &ch.oracle_attn) < 1e-12, "{cfg:?}");
                let sp = run_branch(&cfg, true, 8);
                assert_eq!(sp.attn.shape(), [side * side, side * side / (s * s)]);
                assert!(max_diff(&sp.out, &sp.oracle_out) < 1e-10, "{cfg:?}");
                assert!(max_diff(sp.attn.data(), &sp.oracle_attn) < 1e-12, "{cfg:?}");
            }
        }
    }
}

#[test]
fn non_square_maps_pool_each_axis() {
    let cfg = HaaConfig { c_bar: 6, h_bar: 4, w_bar: 6, s: 2, ffn_mult: 1 };
    let sp = run_branch(&cfg, true, 3);
    assert_eq!(sp.attn.shape(), [24, 6]);
    assert!(max_diff(&sp.out, &sp.oracle_out) < 1e-10);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let cfg = cfg(8, 4, 2);
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[8, 4, 4])).unwrap();
    let w = tape.constant(Tensor::zeros(&[4, 4])).unwrap();
    let p = BranchParams { q: w, k: w, v: w, o: w };
    assert!(spatial_attention(&mut tape, z, &p, &cfg).is_err());
    assert!(channel_attention(&mut tape, z, &p, &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), big_c in any::<bool>(), big_hw in any::<bool>(), pooled in any::<bool>()) {
        let cfg = cfg(if big_c { 16 } else { 8 }, if big_hw { 8 } else { 4 }, if pooled { 2 } else { 1 });
        for spatial in [false, true] {
            let r = run_branch(&cfg, spatial, seed);
            let cols = r.attn.shape()[1];
            for row in r.attn.data().chunks(cols) {
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
