use super::*;
use crate::glyph::{make_dataset, DatasetOptions};
use crate::model::Variant;

fn toy_data() -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let opts = DatasetOptions { n_fonts: 3, n_unseen_fonts: 1, n_chars: 6, n_unseen_chars: 1, seed: 2, force: false };
    make_dataset(dir.path(), &opts).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    (dir, data)
}

fn toy_model(data: &Dataset, variant: Variant) -> ModelConfig {
    ModelConfig { n_train_fonts: data.split.n_train_fonts(), variant, ..Default::default() }
}

#[test]
fn batches_are_reproducible_and_come_from_training_pairs() {
    let (_dir, data) = toy_data();
    let a = make_batch(&data, 7, 3, 5, 2).unwrap();
    let b = make_batch(&data, 7, 3, 5, 2).unwrap();
    let c = make_batch(&data, 7, 4, 5, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for it in &a.items {
        assert!(data.split.is_train_pair(it.font_id, it.char_id));
        assert_eq!(data.split.train_fonts[it.font_class], it.font_id);
        assert_eq!(it.refs.len(), 2);
        assert!(!it.ref_chars.contains(&it.char_id));
        assert!(it.ref_chars.iter().all(|&r| data.split.is_train_pair(it.font_id, r)));
        assert_eq!(&it.target, data.image(it.font_id, it.char_id).unwrap());
        assert_eq!(&it.content, data.image(data.split.base_font, it.char_id).unwrap());
    }
}

#[test]
fn identical_steps_are_bitwise_identical() {
    let (_dir, data) = toy_data();
    let model = toy_model(&data, Variant::Full);
    let batch = make_batch(&data, 0, 0, 2, 2).unwrap();
    let run = || {
        let mut params = init_params(&model, 1).unwrap();
        let mut adam = AdamState::zeros_like(&params);
        let r = train_step(&mut params, &mut adam, &model, &batch, &AdamConfig::default(), &LossWeights::default(), 1)
            .unwrap();
        (params, adam, r)
    };
    let (p1, a1, r1) = run();
    let (p2, a2, r2) = run();
    assert_eq!(p1, p2);
    assert_eq!(a1, a2);
    assert_eq!(r1, r2);
    assert_ne!(p1, init_params(&model, 1).unwrap());
}

#[test]
fn no_csh_reports_but_excludes_homogeneity() {
    let (_dir, data) = toy_data();
    let model = toy_model(&data, Variant::NoCsh);
    let cfg = TrainConfig::from_text("variant = no_csh").unwrap();
    let w = cfg.effective_weights();
    let batch = make_batch(&data, 0, 0, 2, 2).unwrap();
    let mut params = init_params(&model, 1).unwrap();
    let mut adam = AdamState::zeros_like(&params);
    let r = train_step(&mut params, &mut adam, &model, &batch, &AdamConfig::default(), &w, 1).unwrap();
    assert!(r.csh > 0.0 && r.csh < 1.0);
    assert_eq!(r.weights.csh, 0.0);
    let want = r.adv_g + 10.0 * r.recon_l1 + r.style_ce + r.content_ce;
    assert!((r.total - want).abs() < 1e-9);
}

/// Gradients of the full objective minus those of the homogeneity term alone
/// equal the gradients of the objective with that term's weight at zero.
#[test]
fn zero_homogeneity_weight_removes_exactly_its_gradient() {
    let (_dir, data) = toy_data();
    let model = toy_model(&data, Variant::Full);
    let batch = make_batch(&data, 0, 0, 1, 2).unwrap().cast::<f64>();
    let store: ParamStore<f64> = init_params(&model, 3).unwrap().cast();
    let names: Vec<String> = store.names().filter(|n| !is_discriminator(n)).map(String::from).collect();

    let grads = |which: &str| {
        let mut tape = Tape::<f64>::new();
        let b = Bound::bind(&mut tape, &store, true).unwrap();
        let pass = generator_pass(&mut tape, &b, &model, &batch).unwrap();
        let adv = adversarial_term(&mut tape, &b, &model, &batch, &pass.fakes).unwrap();
        let loss = match which {
            "full" => weighted_objective(&mut tape, &pass, adv, &LossWeights::default()).unwrap(),
            "no_csh" => {
                weighted_objective(&mut tape, &pass, adv, &LossWeights { csh: 0.0, ..Default::default() }).unwrap()
            }
            _ => pass.csh,
        };
        tape.backward(loss).unwrap();
        b.grads(&tape, names.iter().cloned()).unwrap()
    };
    let (full, no_csh, csh) = (grads("full"), grads("no_csh"), grads("csh"));
    let mut moved = 0;
    for n in &names {
        let (f, z, c) = (full.get(n).unwrap(), no_csh.get(n).unwrap(), csh.get(n).unwrap());
        for ((f, z), c) in f.data().iter().zip(z.data()).zip(c.data()) {
            assert!((f - c - z).abs() <= 1e-10 * (1.0 + f.abs()), "{n}: {f} - {c} != {z}");
            moved += (*c != 0.0) as usize;
        }
    }
    assert!(moved > 0, "homogeneity term produced no gradient");
}

#[test]
fn parameter_counts_per_variant() {
    let full = build_variant(&ModelConfig::default(), 0).unwrap();
    let conv = build_variant(&ModelConfig { variant: Variant::NoHae, ..Default::default() }, 0).unwrap();
    let csh = build_variant(&ModelConfig { variant: Variant::NoCsh, ..Default::default() }, 0).unwrap();
    assert_eq!(full.param_count, csh.param_count);
    assert_ne!(full.param_count, conv.param_count);
    assert_eq!(full.param_count, full.params.param_count());
}
