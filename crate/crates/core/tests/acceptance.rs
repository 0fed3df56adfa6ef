//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! `cargo test -p glyphmoe-core --test acceptance` runs everything, including
//! two long training criteria (overfit, about 5 min; ablation, about 2 h).
//! Set `GLYPHMOE_SKIP_LONG=1` to report those two as SKIP, or pass criterion
//! numbers after `--` to run a subset. Finished ablation runs are cached under
//! the cargo target directory and reused when their config is unchanged.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use glyphmoe::ablation::{run_ablation, AblationOptions, ABLATION_FILE};
use glyphmoe::eval::{audit, evaluate, evaluate_with, load_for, EvalOptions, GlyphSource, PairPlan, Split};
use glyphmoe::glyph::{make_dataset, ComponentId, DatasetOptions, MANIFEST_FILE};
use glyphmoe::metrics::{l1, rmse, ssim};
use glyphmoe::model::assignment::{assignment_cost, min_cost_assignment};
use glyphmoe::model::haa::{
    channel_attention, hae_block_forward, spatial_attention, BranchParams, HaaConfig, HaeBlockParams,
};
use glyphmoe::model::heads::{csh_loss, match_components, padded_labels};
use glyphmoe::model::{Bound, ParamStore, Variant, CONTENT_CLASSES};
use glyphmoe::tensor::{OpKind, Tape, Tensor};
use glyphmoe::train::{build_variant, checkpoint_name, train, AdamState, Checkpoint, RunOptions, TrainConfig};
use glyphmoe::verify::{gradient_suite, SuiteOptions};
use rand::seq::SliceRandom;
use rand::Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Outcome::{Fail, Pass, Skip};

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn work_dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    fs::create_dir_all(&d).unwrap();
    d
}

fn long_skipped() -> bool {
    std::env::var("GLYPHMOE_SKIP_LONG").is_ok_and(|v| !v.is_empty() && v != "0")
}

/// Generate the corpus into `dir` unless an identical one is already there.
fn corpus(dir: &Path, opts: &DatasetOptions) -> PathBuf {
    let stamp = dir.join("options.txt");
    let want = format!("{opts:?}");
    if !(dir.join(MANIFEST_FILE).exists() && fs::read_to_string(&stamp).is_ok_and(|s| s == want)) {
        make_dataset(dir, &DatasetOptions { force: true, ..opts.clone() }).unwrap();
        fs::write(&stamp, want).unwrap();
    }
    dir.to_path_buf()
}

fn default_corpus() -> PathBuf {
    corpus(&work_dir("default_corpus"), &DatasetOptions::default())
}

fn c1_gradients() -> Outcome {
    let t0 = Instant::now();
    let clean = gradient_suite(&SuiteOptions::default()).unwrap();
    let worst = clean.iter().map(|e| e.report.max_rel_err()).fold(0.0, f64::max);
    let failed: Vec<&str> = clean.iter().filter(|e| !e.report.passed()).map(|e| e.name.as_str()).collect();
    let secs = t0.elapsed().as_secs_f64();
    let mut controls = Vec::new();
    for op in [OpKind::MatMul, OpKind::Conv2d, OpKind::Softmax] {
        let sabotaged = gradient_suite(&SuiteOptions { seed: 0, sabotage: Some(op) }).unwrap();
        controls.push((op, sabotaged.iter().filter(|e| !e.report.passed()).count()));
    }
    let caught = controls.iter().all(|&(_, n)| n > 0);
    check(
        failed.is_empty() && caught && secs < 120.0,
        format!(
            "{} checks, max rel err {worst:.2e} (tol 1e-4), failing {failed:?}; sabotaged ops caught: {}; {secs:.1} s",
            clean.len(),
            controls.iter().map(|(op, n)| format!("{op}={n}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn c2_attention() -> Outcome {
    let mut worst_row = 0.0f64;
    let mut worst_oracle = 0.0f64;
    let mut shapes_ok = true;
    let mut rng = common::rng(2);
    for c_bar in [8, 16] {
        for side in [4, 8] {
            for s in [1, 2] {
                let cfg = HaaConfig { c_bar, h_bar: side, w_bar: side, s, ffn_mult: 2 };
                let h = c_bar / 2;
                let z = common::random(&mut rng, &[h, side, side]);
                let w: Vec<Tensor<f64>> = (0..8).map(|_| common::random(&mut rng, &[h, h])).collect();
                let mut tape = Tape::new();
                let zv = tape.constant(z.clone()).unwrap();
                let v: Vec<_> = w.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
                let sp = spatial_attention(&mut tape, zv, &BranchParams { q: v[0], k: v[1], v: v[2], o: v[3] }, &cfg)
                    .unwrap();
                let ch = channel_attention(&mut tape, zv, &BranchParams { q: v[4], k: v[5], v: v[6], o: v[7] }, &cfg)
                    .unwrap();
                let (so, sa) = common::spatial_attention(
                    z.data(),
                    h,
                    side,
                    side,
                    s,
                    w[0].data(),
                    w[1].data(),
                    w[2].data(),
                    w[3].data(),
                );
                let (co, ca) = common::channel_attention(
                    z.data(),
                    h,
                    side * side,
                    w[4].data(),
                    w[5].data(),
                    w[6].data(),
                    w[7].data(),
                );
                shapes_ok &= tape.shape(ch.attn) == [h, h];
                shapes_ok &= tape.shape(sp.attn) == [side * side, side * side / (s * s)];
                for (attn, out, oa, oo) in [(sp.attn, sp.out, &sa, &so), (ch.attn, ch.out, &ca, &co)] {
                    let a = tape.value(attn);
                    for row in a.data().chunks(a.shape()[1]) {
                        worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                    }
                    let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                    worst_oracle = worst_oracle.max(diff(a.data(), oa)).max(diff(tape.value(out).data(), oo));
                }
            }
        }
    }
    check(
        shapes_ok && worst_row < 1e-6 && worst_oracle < 1e-5,
        format!(
            "8 configs, shapes {}, max |row sum - 1| {worst_row:.1e}, max oracle diff {worst_oracle:.1e}",
            if shapes_ok { "ok" } else { "WRONG" }
        ),
    )
}

fn c3_identity() -> Outcome {
    let mut rng = common::rng(3);
    let mut all_equal = true;
    let mut n = 0;
    for (c_bar, side, s) in [(4, 4, 2), (8, 8, 2), (16, 8, 1), (16, 8, 4)] {
        let cfg = HaaConfig { c_bar, h_bar: side, w_bar: side, s, ffn_mult: 2 };
        let mut store = ParamStore::<f64>::new();
        for (name, shape) in cfg.block_shapes() {
            let t = if ["spat.o", "chan.o", "ffn.w2", "ffn.b2"].contains(&name) {
                Tensor::zeros(&shape)
            } else {
                common::random(&mut rng, &shape)
            };
            store.insert(format!("blk.{name}"), t);
        }
        let z = common::random(&mut rng, &[c_bar, side, side]);
        let mut tape = Tape::new();
        let b = Bound::bind(&mut tape, &store, false).unwrap();
        let p = HaeBlockParams::bind(&b, "blk").unwrap();
        let zv = tape.constant(z.clone()).unwrap();
        let out = hae_block_forward(&mut tape, zv, &p, &cfg).unwrap();
        let same = tape.value(out).data().iter().zip(z.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        all_equal &= same;
        n += 1;
    }
    check(all_equal, format!("{n} block configs, output bitwise equal to input: {all_equal}"))
}

fn csh(a: &[f64], b: &[f64]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[a.len()], a.to_vec()).unwrap()).unwrap();
    let y = tape.constant(Tensor::new(&[b.len()], b.to_vec()).unwrap()).unwrap();
    let l = csh_loss(&mut tape, x, y).unwrap();
    tape.value(l).item()
}

fn c4_homogeneity() -> Outcome {
    let mut rng = common::rng(4);
    let mut bad = 0;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=48);
        let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let (ca, cb) = (rng.gen_range(1e-3..1e3), rng.gen_range(1e-3..1e3));
        let neg: Vec<f64> = f.iter().map(|x| -x).collect();
        let sf: Vec<f64> = f.iter().map(|x| x * ca).collect();
        let sg: Vec<f64> = g.iter().map(|x| x * cb).collect();
        let v = csh(&f, &g);
        let errs = [(csh(&f, &f) - 1.0).abs(), csh(&f, &neg).abs(), (csh(&sf, &g) - v).abs(), (csh(&f, &sg) - v).abs()];
        worst = errs.iter().cloned().fold(worst, f64::max);
        if !(0.0..=1.0).contains(&v) || errs.iter().any(|&e| e >= 1e-6) {
            bad += 1;
        }
    }
    check(bad == 0, format!("1000 random pairs, {bad} violations, max deviation {worst:.1e}"))
}

fn c5_matching() -> Outcome {
    let mut rng = common::rng(5);
    let classes: Vec<usize> = (0..CONTENT_CLASSES - 1).collect();
    let mut worst = 0.0f64;
    let mut total = 0;
    for k in 2..=4 {
        for _ in 0..100 {
            let n_gt = rng.gen_range(0..=k);
            let gt: BTreeSet<ComponentId> =
                classes.choose_multiple(&mut rng, n_gt).map(|&i| ComponentId::new(i).unwrap()).collect();
            let logits: Vec<Vec<f64>> =
                (0..k).map(|_| (0..CONTENT_CLASSES).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
            let labels = padded_labels(&gt, k).unwrap();
            let cost: Vec<Vec<f64>> = logits
                .iter()
                .map(|l| {
                    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = l.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
                    labels.iter().map(|&c| lse - l[c]).collect()
                })
                .collect();
            let brute = common::brute_min_cost(&cost);
            let mut tape = Tape::<f64>::new();
            let vars: Vec<_> = logits
                .iter()
                .map(|l| tape.constant(Tensor::new(&[CONTENT_CLASSES], l.clone()).unwrap()).unwrap())
                .collect();
            let m = match_components(&mut tape, &vars, &gt).unwrap();
            let solver = assignment_cost(&cost, &min_cost_assignment(&cost));
            worst = worst.max((tape.value(m.loss).item() * k as f64 - brute).abs()).max((solver - brute).abs());
            total += 1;
        }
    }
    check(worst < 1e-9, format!("{total} instances (k = 2, 3, 4), max |loss - exhaustive minimum| {worst:.1e}"))
}

fn c6_ssim() -> Outcome {
    let mut rng = common::rng(6);
    let mut worst = 0.0f64;
    let mut identity = 0.0f64;
    for i in 0..50 {
        let (h, w) = if i < 10 { (32, 32) } else { (rng.gen_range(8..24), rng.gen_range(8..24)) };
        let a = Tensor::from_fn(&[1, h, w], |_| rng.gen_range(0.0..1.0));
        let b = Tensor::from_fn(&[1, h, w], |_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.5..1.0) });
        worst = worst.max((ssim(&a, &b).unwrap() - common::ssim_brute(a.data(), b.data(), h, w)).abs());
        identity =
            identity.max((ssim(&a, &a).unwrap() - 1.0).abs()).max(l1(&a, &a).unwrap()).max(rmse(&a, &a).unwrap());
    }
    check(
        worst < 1e-9 && identity < 1e-12,
        format!("50 image pairs, max |fast - brute force| {worst:.1e}, identity deviation {identity:.1e}"),
    )
}

/// Answers every pair with an empty white page.
struct Blank;

impl GlyphSource for Blank {
    fn produce(&mut self, _: &PairPlan, content: &Tensor<f32>, _: &[Tensor<f32>]) -> glyphmoe::Result<Tensor<f32>> {
        Ok(Tensor::full(content.shape(), 1.0))
    }
}

/// Mean L1 of a blank page on `which`: what a generator that draws nothing scores.
fn blank_l1(root: &Path, which: Split) -> f64 {
    let opts = EvalOptions::default();
    let (data, plans, _) = load_for(root, which, &opts).unwrap();
    evaluate_with(&mut Blank, &data, &plans, which, &opts).unwrap().mean_l1
}

fn c7_overfit() -> Outcome {
    if long_skipped() {
        return Skip("GLYPHMOE_SKIP_LONG set".into());
    }
    let dir = work_dir("overfit");
    let data = corpus(
        &dir.join("corpus"),
        &DatasetOptions { n_fonts: 8, n_unseen_fonts: 0, n_chars: 20, n_unseen_chars: 0, seed: 0, force: false },
    );
    let mut cfg = TrainConfig { steps: 2000, batch_size: 8, seed: 0, variant: Variant::Full, ..TrainConfig::default() };
    cfg.data_dir = data.clone();
    cfg.out_dir = dir.join("run");
    let t0 = Instant::now();
    let out = train(&cfg, &RunOptions { force: true, ..Default::default() }).unwrap();
    let ck = Checkpoint::load(&out.checkpoint).unwrap();
    let report = evaluate(&ck, &data, Split::Train, &EvalOptions::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    check(
        report.mean_l1 < 0.05 && secs < 1800.0,
        format!(
            "8 fonts x 20 chars, 2000 steps: mean training-pair L1 {:.4} (target < 0.05, blank page {:.4}), SSIM {:.3}, {:.0} s",
            report.mean_l1,
            blank_l1(&data, Split::Train),
            report.mean_ssim,
            secs
        ),
    )
}

fn c8_ablation() -> Outcome {
    if long_skipped() {
        return Skip("GLYPHMOE_SKIP_LONG set".into());
    }
    let data = default_corpus();
    let mut cfg = TrainConfig { steps: 5000, ..TrainConfig::default() };
    cfg.data_dir = data.clone();
    cfg.out_dir = work_dir("ablation");
    let t0 = Instant::now();
    // Finished runs with an identical config are reused; only the table is rebuilt.
    let _ = fs::remove_file(cfg.out_dir.join(ABLATION_FILE));
    let opts = AblationOptions { seeds: vec![0, 1, 2], ..Default::default() };
    let report = run_ablation(&cfg, &opts).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let means = report
        .means
        .iter()
        .map(|m| format!("{} l1={:.4} ssim={:.4}", m.variant, m.l1, m.ssim))
        .collect::<Vec<_>>()
        .join(", ");
    let orderings = report.orderings();
    let ok = orderings.len() == 2 && orderings.iter().all(|o| o.l1_ok && o.ssim_ok);
    let detail = orderings
        .iter()
        .map(|o| format!("vs {}: l1 {} ssim {}", o.ablation, ok_word(o.l1_ok), ok_word(o.ssim_ok)))
        .collect::<Vec<_>>()
        .join("; ");
    let blank = blank_l1(&data, Split::Ufuc);
    check(
        ok && secs < 6.0 * 3600.0,
        format!("3 seeds x 5000 steps, ufuc means: {means} (blank page l1={blank:.4}); {detail}; {secs:.0} s"),
    )
}

fn ok_word(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "reversed"
    }
}

fn c9_persistence() -> Outcome {
    let dir = work_dir("persistence");
    let data = corpus(
        &dir.join("corpus"),
        &DatasetOptions { n_fonts: 6, n_unseen_fonts: 1, n_chars: 12, n_unseen_chars: 2, seed: 9, force: false },
    );
    let cfg = |name: &str, steps: usize| {
        let mut c = TrainConfig { steps, checkpoint_every: 250, seed: 9, ..TrainConfig::default() };
        c.data_dir = data.clone();
        c.out_dir = dir.join(name);
        c
    };
    let fresh = RunOptions { force: true, ..Default::default() };
    let a = cfg("a", 500);
    train(&a, &fresh).unwrap();
    train(&cfg("b", 500), &fresh).unwrap();
    let bytes = |run: &str, step: usize| fs::read(dir.join(run).join(checkpoint_name(step))).unwrap();
    let same_seed = bytes("a", 500) == bytes("b", 500);

    let c = cfg("c", 500);
    let _ = fs::remove_dir_all(&c.out_dir);
    fs::create_dir_all(&c.out_dir).unwrap();
    fs::copy(dir.join("a").join(checkpoint_name(250)), c.out_dir.join(checkpoint_name(250))).unwrap();
    train(&c, &RunOptions { resume: Some(c.out_dir.join(checkpoint_name(250))), ..Default::default() }).unwrap();
    let resumed = bytes("c", 500) == bytes("a", 500);

    let ck = Checkpoint::load(&dir.join("a").join(checkpoint_name(500))).unwrap();
    let copy = dir.join("roundtrip.mxpp");
    ck.save(&copy).unwrap();
    let round_trip = fs::read(&copy).unwrap() == bytes("a", 500) && Checkpoint::load(&copy).unwrap() == ck;

    check(
        same_seed && resumed && round_trip,
        format!("step-500 checkpoints identical: {same_seed}; resume from 250 identical: {resumed}; save/load bitwise: {round_trip}"),
    )
}

fn c10_leakage() -> Outcome {
    let data = default_corpus();
    let probe = glyphmoe::glyph::Dataset::load_where(&data, |_, _| false).unwrap();
    let model = TrainConfig::default().model_config(probe.split.n_train_fonts());
    let v = build_variant(&model, 0).unwrap();
    let adam = AdamState::zeros_like(&v.params);
    let ck = Checkpoint { step: 0, model, params: v.params, adam };
    let opts = EvalOptions::default();
    let mut lines = Vec::new();
    let mut ok = true;
    for which in [Split::Ufuc, Split::Ufsc] {
        let (loaded, plans, log) = load_for(&data, which, &opts).unwrap();
        let read: BTreeSet<(usize, usize)> = loaded.loaded_pairs().collect();
        let a = audit(&log, &probe.split);
        let report = evaluate(&ck, &data, which, &opts).unwrap();
        let only_planned = read == log.all();
        let strict = a.touches_no_train_pair();
        ok &= only_planned && a.passed() && report.audit.passed() && report.access == log;
        if which == Split::Ufuc {
            ok &= strict && report.rows.len() == 80;
        }
        lines.push(format!(
            "{which}: {} pairs, {} glyphs read, style/target train pairs {}, content outside base font {}, base-font content pairs in train split {}",
            plans.len(),
            read.len(),
            a.style_or_target_leaks.len(),
            a.foreign_content.len(),
            a.base_font_train_pairs.len()
        ));
    }
    check(ok, lines.join("; "))
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        (1, "gradient suite", c1_gradients),
        (2, "attention contracts", c2_attention),
        (3, "residual identity", c3_identity),
        (4, "homogeneity law", c4_homogeneity),
        (5, "component matching", c5_matching),
        (6, "ssim oracle", c6_ssim),
        (7, "overfit check", c7_overfit),
        (8, "ablation direction", c8_ablation),
        (9, "determinism and persistence", c9_persistence),
        (10, "leakage guard", c10_leakage),
    ];
    let mut failures = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let (tag, detail) = match run() {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failures += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("criterion {n:>2} {name:<28} {tag}  {detail}");
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
