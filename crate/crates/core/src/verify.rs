//! Gradient verification suite: every tape operation, every model block and
//! the full training objectives, checked against central differences in f64.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::glyph::{ComponentId, IMAGE_SIZE};
use crate::model::encoder::{encode, pool_content, pool_style, stem_forward};
use crate::model::haa::{hae_block_forward, HaeBlockParams};
use crate::model::heads::{
    content_classify, cross_entropy, csh_loss, discriminate, generate, match_components, style_classify,
};
use crate::model::losses::LossWeights;
use crate::model::{init_params, Bound, HaaConfig, ModelConfig, ParamStore, CONTENT_CLASSES};
use crate::tensor::gradcheck::{grad_check, GradCheckOptions, GradReport};
use crate::tensor::{OpKind, Tape, Tensor, Var};
use crate::train::{adversarial_term, discriminator_loss, generator_pass, weighted_objective, Batch, BatchItem};

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Corrupt the backward pass of this op family (negative control).
    pub sabotage: Option<OpKind>,
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradReport,
}

type Params = Vec<(String, Tensor<f64>)>;
type Loss<'a> = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a>;

struct Case<'a> {
    name: &'static str,
    params: Params,
    loss: Loss<'a>,
    max_per_block: Option<usize>,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Weighted sum so that every output element gets a distinct adjoint.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn named(pairs: Vec<(&str, Tensor<f64>)>) -> Params {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn bound(params: &Params, vars: &[Var]) -> Bound {
    Bound::from_vars(params.iter().map(|(n, _)| n.clone()).zip(vars.iter().copied()))
}

fn store_pairs(store: &ParamStore<f64>) -> Params {
    store.iter().map(|(n, t)| (n.clone(), t.clone())).collect()
}

fn op_cases<'a>(rng: &mut ChaCha8Rng) -> Vec<Case<'a>> {
    let mut r = |shape: &[usize]| random(rng, shape, -1.0, 1.0);
    let unary = |name: &'static str, x: Tensor<f64>, f: fn(&mut Tape<f64>, Var) -> Result<Var>| Case {
        name,
        params: named(vec![("x", x)]),
        loss: Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let y = f(t, v[0])?;
            probe(t, y, 1)
        }),
        max_per_block: None,
    };
    let binary =
        |name: &'static str, a: Tensor<f64>, b: Tensor<f64>, f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>| Case {
            name,
            params: named(vec![("a", a), ("b", b)]),
            loss: Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
                let y = f(t, v[0], v[1])?;
                probe(t, y, 2)
            }),
            max_per_block: None,
        };
    let positive = Tensor::from_fn(&[3, 4], |i| 0.5 + 0.1 * i as f64);
    // Keep kinked ops away from their kink.
    let off_zero =
        Tensor::from_fn(&[3, 4], |i| if i % 2 == 0 { 0.3 + 0.05 * i as f64 } else { -0.2 - 0.07 * i as f64 });
    vec![
        binary("matmul", r(&[3, 4]), r(&[4, 2]), |t, a, b| t.matmul(a, b)),
        unary("transpose", r(&[3, 5]), |t, x| t.transpose(x)),
        unary("reshape", r(&[2, 6]), |t, x| t.reshape(x, &[3, 4])),
        binary("add", r(&[2, 3]), r(&[2, 3]), |t, a, b| t.add(a, b)),
        binary("sub", r(&[2, 3]), r(&[2, 3]), |t, a, b| t.sub(a, b)),
        binary("mul", r(&[2, 3]), r(&[2, 3]), |t, a, b| t.mul(a, b)),
        binary("div", r(&[3, 4]), positive.clone(), |t, a, b| t.div(a, b)),
        unary("scale", r(&[4]), |t, x| t.scale(x, -2.5)),
        unary("add_scalar", r(&[4]), |t, x| t.add_scalar(x, 0.7)),
        binary("add_all", r(&[2, 2]), r(&[2, 2]), |t, a, b| t.add_all(&[a, b, a])),
        binary("channel_bias", r(&[3, 2, 2]), r(&[3]), |t, a, b| t.add_channel_bias(a, b)),
        unary("gelu", r(&[3, 4]), |t, x| t.gelu(x)),
        unary("leaky_relu", off_zero.clone(), |t, x| t.leaky_relu(x, 0.2)),
        unary("relu", off_zero.clone(), |t, x| t.relu(x)),
        unary("sigmoid", r(&[3, 4]), |t, x| t.sigmoid(x)),
        unary("abs", off_zero, |t, x| t.abs(x)),
        unary("sqrt", positive, |t, x| t.sqrt(x)),
        unary("sum", r(&[3, 4]), |t, x| {
            let s = t.sum(x)?;
            t.mul(s, s)
        }),
        unary("mean", r(&[3, 4]), |t, x| {
            let s = t.mean(x)?;
            t.mul(s, s)
        }),
        unary("mean_inner", r(&[3, 2, 2]), |t, x| t.mean_inner(x)),
        unary("gather", r(&[6]), |t, x| t.gather(x, &[4, 1, 1, 0])),
        unary("select_row", r(&[3, 4]), |t, x| t.select_row(x, 2)),
        unary("softmax", r(&[3, 4]), |t, x| t.softmax(x, 1)),
        unary("softmax_axis0", r(&[3, 4]), |t, x| t.softmax(x, 0)),
        unary("log_softmax", r(&[3, 4]), |t, x| t.log_softmax(x, 1)),
        Case {
            name: "layer_norm",
            params: named(vec![("x", r(&[3, 5])), ("g", r(&[5])), ("b", r(&[5]))]),
            loss: Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                probe(t, y, 3)
            }),
            max_per_block: None,
        },
        binary("conv2d", r(&[2, 5, 5]), r(&[3, 2, 3, 3]), |t, a, b| t.conv2d(a, b, 2, 1)),
        binary("conv2d_1x1", r(&[2, 3, 3]), r(&[4, 2, 1, 1]), |t, a, b| t.conv2d(a, b, 1, 0)),
        unary("avg_pool2d", r(&[2, 4, 4]), |t, x| t.avg_pool2d(x, 2)),
        unary("upsample", r(&[2, 2, 3]), |t, x| t.upsample(x, 2)),
        unary("slice", r(&[4, 2]), |t, x| t.slice_channels(x, 1, 2)),
        binary("concat", r(&[2, 3]), r(&[1, 3]), |t, a, b| t.concat_channels(&[b, a])),
    ]
}

fn small_haa() -> HaaConfig {
    HaaConfig { c_bar: 4, h_bar: 4, w_bar: 4, s: 2, ffn_mult: 2 }
}

fn gt(ids: &[usize]) -> BTreeSet<ComponentId> {
    ids.iter().map(|&i| ComponentId::new(i).expect("valid component")).collect()
}

/// A single-item batch of random glyph-like images.
fn toy_batch(rng: &mut ChaCha8Rng, n_refs: usize) -> Batch<f64> {
    let mut img = || random(rng, &[1, IMAGE_SIZE, IMAGE_SIZE], 0.0, 1.0);
    Batch {
        items: vec![BatchItem {
            char_id: 0,
            font_id: 1,
            font_class: 1,
            ref_chars: (1..=n_refs).collect(),
            content: img(),
            refs: (0..n_refs).map(|_| img()).collect(),
            target: img(),
            comp_gt: gt(&[1, 6]),
        }],
    }
}

fn model_cases<'a>(rng: &mut ChaCha8Rng) -> Vec<Case<'a>> {
    let haa = small_haa();
    let mut block = ParamStore::<f64>::new();
    for (name, shape) in haa.block_shapes() {
        block.insert(format!("blk.{name}"), random(rng, &shape, -0.5, 0.5));
    }
    let mut block_params = store_pairs(&block);
    block_params.push(("z".into(), random(rng, &[4, 4, 4], -1.0, 1.0)));

    let model = ModelConfig { n_train_fonts: 3, ..Default::default() };
    let full: ParamStore<f64> = init_params(&model, rng.gen()).expect("valid model").cast();
    let image = random(rng, &[1, IMAGE_SIZE, IMAGE_SIZE], 0.0, 1.0);

    let mut stem_params = store_pairs(&full.filter("enc.stem."));
    stem_params.push(("x".into(), image.clone()));

    let mut enc_params = store_pairs(&full.filter("enc."));
    enc_params.push(("x".into(), image.clone()));

    let mut gen_params = store_pairs(&full.filter("gen."));
    let kc = model.k * model.c_bar;
    for i in 0..model.k {
        gen_params.push((format!("c{i}"), random(rng, &[model.c_bar, 8, 8], -1.0, 1.0)));
        gen_params.push((format!("s{i}"), random(rng, &[model.c_bar, 8, 8], -1.0, 1.0)));
    }

    let mut disc_params = store_pairs(&full.filter("disc."));
    disc_params.push(("x".into(), image));

    let cls = store_pairs(&full.filter("cls."));
    let mut style_params = cls.clone();
    style_params.push(("f".into(), random(rng, &[kc], -1.0, 1.0)));
    let mut content_params = cls;
    content_params.push(("f".into(), random(rng, &[model.c_bar], -1.0, 1.0)));

    let batch = toy_batch(rng, 2);
    let all = store_pairs(&full);
    let m1 = model.clone();
    let m2 = model.clone();
    let m3 = model.clone();
    let m4 = model.clone();
    let m5 = model.clone();
    let m6 = model.clone();
    let m7 = model;
    let b2 = batch.clone();
    let all2 = all.clone();
    let bp = block_params.clone();
    let sp = stem_params.clone();
    let ep = enc_params.clone();
    let gp = gen_params.clone();
    let dp = disc_params.clone();
    let stp = style_params.clone();
    let cp = content_params.clone();

    vec![
        Case {
            name: "hae_block",
            params: block_params,
            loss: Box::new(move |t, v| {
                let b = bound(&bp, v);
                let p = HaeBlockParams::bind(&b, "blk")?;
                let y = hae_block_forward(t, b.get("z")?, &p, &haa)?;
                probe(t, y, 4)
            }),
            max_per_block: None,
        },
        Case {
            name: "stem",
            params: stem_params,
            loss: Box::new(move |t, v| {
                let b = bound(&sp, v);
                let y = stem_forward(t, b.get("x")?, &b)?;
                probe(t, y, 5)
            }),
            max_per_block: Some(16),
        },
        Case {
            name: "encoder",
            params: enc_params,
            loss: Box::new(move |t, v| {
                let b = bound(&ep, v);
                let e = encode(t, b.get("x")?, &b, &m1)?;
                let s = pool_style(t, &e)?;
                let c = pool_content(t, &e)?;
                let y = t.concat_channels(&[s, c])?;
                probe(t, y, 6)
            }),
            max_per_block: Some(6),
        },
        Case {
            name: "style_classifier",
            params: style_params,
            loss: Box::new(move |t, v| {
                let b = bound(&stp, v);
                let l = style_classify(t, b.get("f")?, &b, &m2)?;
                cross_entropy(t, l, 2)
            }),
            max_per_block: Some(24),
        },
        Case {
            name: "content_classifier",
            params: content_params,
            loss: Box::new(move |t, v| {
                let b = bound(&cp, v);
                let l = content_classify(t, b.get("f")?, &b, &m3)?;
                cross_entropy(t, l, 4)
            }),
            max_per_block: Some(24),
        },
        Case {
            name: "component_matching",
            params: named(vec![("logits", random(rng, &[3, CONTENT_CLASSES], -2.0, 2.0))]),
            loss: Box::new(|t, v| {
                let rows = (0..3).map(|i| t.select_row(v[0], i)).collect::<Result<Vec<_>>>()?;
                Ok(match_components(t, &rows, &gt(&[2, 9]))?.loss)
            }),
            max_per_block: None,
        },
        Case {
            name: "homogeneity",
            params: named(vec![("s", random(rng, &[6], -1.0, 1.0)), ("c", random(rng, &[6], -1.0, 1.0))]),
            loss: Box::new(|t, v| csh_loss(t, v[0], v[1])),
            max_per_block: None,
        },
        Case {
            name: "generator",
            params: gen_params,
            loss: Box::new(move |t, v| {
                let b = bound(&gp, v);
                let bundle = |t: &mut Tape<f64>, c: &str, s: &str| -> Result<_> {
                    let _ = t;
                    Ok(crate::model::ExpertBundle { f: b.get(c)?, f_c: b.get(c)?, f_s: b.get(s)? })
                };
                let content =
                    (0..m4.k).map(|i| bundle(t, &format!("c{i}"), &format!("c{i}"))).collect::<Result<Vec<_>>>()?;
                let style =
                    (0..m4.k).map(|i| bundle(t, &format!("s{i}"), &format!("s{i}"))).collect::<Result<Vec<_>>>()?;
                let y = generate(t, &content, &style, &b, &m4)?;
                probe(t, y, 7)
            }),
            max_per_block: Some(12),
        },
        Case {
            name: "discriminator",
            params: disc_params,
            loss: Box::new(move |t, v| {
                let b = bound(&dp, v);
                discriminate(t, b.get("x")?, 2, &b, &m5)
            }),
            max_per_block: Some(12),
        },
        Case {
            name: "generator_objective",
            params: all,
            loss: Box::new(move |t, v| {
                let b = Bound::from_vars(all2.iter().map(|(n, _)| n.clone()).zip(v.iter().copied()));
                let pass = generator_pass(t, &b, &m6, &batch)?;
                let adv = adversarial_term(t, &b, &m6, &batch, &pass.fakes)?;
                weighted_objective(t, &pass, adv, &LossWeights::default())
            }),
            max_per_block: Some(3),
        },
        Case {
            name: "discriminator_objective",
            params: store_pairs(&full.filter("disc.")),
            loss: Box::new(move |t, v| {
                let names = full.filter("disc.");
                let b = Bound::from_vars(names.names().map(String::from).zip(v.iter().copied()));
                let fakes = b2.items.iter().map(|it| t.constant(it.refs[0].clone())).collect::<Result<Vec<_>>>()?;
                discriminator_loss(t, &b, &m7, &b2, &fakes)
            }),
            max_per_block: Some(8),
        },
    ]
}

/// Run every case; one entry per case in a fixed order.
pub fn gradient_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cases = op_cases(&mut rng);
    cases.extend(model_cases(&mut rng));
    cases
        .into_iter()
        .map(|c| {
            let go = GradCheckOptions {
                max_per_block: c.max_per_block,
                seed: opts.seed,
                sabotage: opts.sabotage,
                ..Default::default()
            };
            let report = grad_check(|t, v| (c.loss)(t, v), &c.params, &go)?;
            Ok(SuiteEntry { name: c.name.to_string(), report })
        })
        .collect()
}
