//! Alternating discriminator/generator training with Adam, checkpoints and
//! a per-step loss log.

pub mod adam;
pub mod batch;
pub mod checkpoint;
pub mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::glyph::Dataset;
use crate::model::encoder::{encode, mean_bundles, pool_content, pool_style};
use crate::model::heads::{
    content_classify, cross_entropy, csh_loss, discriminate, generate, match_components, style_classify,
};
use crate::model::losses::{d_hinge, g_adversarial, l1_loss, total_loss, LossParts, LossReport, LossWeights};
use crate::model::{init_params, is_discriminator, Bound, ModelConfig, ParamStore};
use crate::tensor::{Scalar, Tape, Var};

pub use adam::{adam_update, AdamConfig, AdamState};
pub use batch::{make_batch, Batch, BatchItem};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;

pub const LOSS_LOG: &str = "loss.tsv";

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_{step:06}.mxpp")
}

/// Generator-side graph for one batch, before the adversarial term.
#[derive(Clone, Debug)]
pub struct GeneratorPass {
    pub fakes: Vec<Var>,
    pub recon_l1: Var,
    pub style_ce: Var,
    pub content_ce: Var,
    pub csh: Var,
}

fn batch_mean<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let s = tape.add_all(vars)?;
    tape.scale(s, 1.0 / vars.len() as f64)
}

/// Encode, fuse and decode every item; also builds the reconstruction,
/// classification and homogeneity terms (each averaged over the batch).
///
/// The style of an item is the mean of its reference bundles. Classification
/// and the homogeneity term use the content glyph's own features, with the
/// style classifier applied to the reference mean.
pub fn generator_pass<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    model: &ModelConfig,
    batch: &Batch<T>,
) -> Result<GeneratorPass> {
    if batch.items.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let n = batch.items.len();
    let (mut fakes, mut recon, mut style, mut content, mut csh) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for item in &batch.items {
        let xc = tape.constant(item.content.clone())?;
        let content_b = encode(tape, xc, b, model)?;
        let mut ref_b = Vec::with_capacity(item.refs.len());
        for r in &item.refs {
            let xr = tape.constant(r.clone())?;
            ref_b.push(encode(tape, xr, b, model)?);
        }
        let style_b = mean_bundles(tape, &ref_b)?;

        let fake = generate(tape, &content_b, &style_b, b, model)?;
        let target = tape.constant(item.target.clone())?;
        recon.push(l1_loss(tape, fake, target)?);
        fakes.push(fake);

        let fs = pool_style(tape, &style_b)?;
        let logits = style_classify(tape, fs, b, model)?;
        style.push(cross_entropy(tape, logits, item.font_class)?);

        let per_expert = content_b
            .iter()
            .map(|e| {
                let v = tape.mean_inner(e.f_c)?;
                content_classify(tape, v, b, model)
            })
            .collect::<Result<Vec<_>>>()?;
        content.push(match_components(tape, &per_expert, &item.comp_gt)?.loss);

        let own_s = pool_style(tape, &content_b)?;
        let own_c = pool_content(tape, &content_b)?;
        csh.push(csh_loss(tape, own_s, own_c)?);
    }
    Ok(GeneratorPass {
        recon_l1: batch_mean(tape, &recon)?,
        style_ce: batch_mean(tape, &style)?,
        content_ce: batch_mean(tape, &content)?,
        csh: batch_mean(tape, &csh)?,
        fakes,
    })
}

/// Hinge loss of the discriminator on real targets versus `fakes`.
pub fn discriminator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    model: &ModelConfig,
    batch: &Batch<T>,
    fakes: &[Var],
) -> Result<Var> {
    let mut real = Vec::with_capacity(fakes.len());
    let mut fake = Vec::with_capacity(fakes.len());
    for (item, &f) in batch.items.iter().zip(fakes) {
        let x = tape.constant(item.target.clone())?;
        real.push(discriminate(tape, x, item.font_class, b, model)?);
        fake.push(discriminate(tape, f, item.font_class, b, model)?);
    }
    d_hinge(tape, &real, &fake)
}

/// Adversarial generator term for the batch.
pub fn adversarial_term<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    model: &ModelConfig,
    batch: &Batch<T>,
    fakes: &[Var],
) -> Result<Var> {
    let scores = batch
        .items
        .iter()
        .zip(fakes)
        .map(|(item, &f)| discriminate(tape, f, item.font_class, b, model))
        .collect::<Result<Vec<_>>>()?;
    g_adversarial(tape, &scores)
}

/// `Σ λ·term` on the tape.
pub fn weighted_objective<T: Scalar>(
    tape: &mut Tape<T>,
    pass: &GeneratorPass,
    adv_g: Var,
    w: &LossWeights,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(5);
    for (v, lambda) in [
        (adv_g, w.adv),
        (pass.recon_l1, w.l1),
        (pass.style_ce, w.style),
        (pass.content_ce, w.content),
        (pass.csh, w.csh),
    ] {
        if lambda != 0.0 {
            terms.push(tape.scale(v, lambda)?);
        }
    }
    if terms.is_empty() {
        return Err(Error::Config("all loss weights are zero".into()));
    }
    tape.add_all(&terms)
}

fn split_store(params: &ParamStore) -> (ParamStore, ParamStore) {
    let mut gen = ParamStore::new();
    let mut disc = ParamStore::new();
    for (n, t) in params.iter() {
        if is_discriminator(n) {
            disc.insert(n.clone(), t.clone());
        } else {
            gen.insert(n.clone(), t.clone());
        }
    }
    (gen, disc)
}

fn scalar<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().as_f64()
}

/// One discriminator update followed by one generator/encoder/classifier
/// update. `t` is the 1-based Adam iteration shared by both updates.
pub fn train_step(
    params: &mut ParamStore,
    adam: &mut AdamState,
    model: &ModelConfig,
    batch: &Batch,
    cfg: &AdamConfig,
    weights: &LossWeights,
    t: u64,
) -> Result<LossReport> {
    let (gen_store, disc_store) = split_store(params);

    let mut g_tape = Tape::<f32>::new();
    let mut g_bound = Bound::bind(&mut g_tape, &gen_store, true)?;
    let pass = generator_pass(&mut g_tape, &g_bound, model, batch)?;

    // Discriminator step on detached fakes.
    let mut d_tape = Tape::<f32>::new();
    let d_bound = Bound::bind(&mut d_tape, &disc_store, true)?;
    let fakes = pass.fakes.iter().map(|&f| d_tape.constant(g_tape.value(f).clone())).collect::<Result<Vec<_>>>()?;
    let d_loss = discriminator_loss(&mut d_tape, &d_bound, model, batch, &fakes)?;
    let adv_d = scalar(&d_tape, d_loss);
    if !adv_d.is_finite() {
        return Err(Error::NonFinite { op: "discriminator loss".into() });
    }
    d_tape.backward(d_loss)?;
    let d_grads = d_bound.grads(&d_tape, disc_store.names().map(String::from))?;
    adam.apply(params, &d_grads, cfg, t)?;

    // Generator step against the updated discriminator.
    let (_, disc_store) = split_store(params);
    g_bound.extend(&mut g_tape, &disc_store, false)?;
    let adv_g = adversarial_term(&mut g_tape, &g_bound, model, batch, &pass.fakes)?;
    let total = weighted_objective(&mut g_tape, &pass, adv_g, weights)?;
    let parts = LossParts {
        adv_g: scalar(&g_tape, adv_g),
        recon_l1: scalar(&g_tape, pass.recon_l1),
        style_ce: scalar(&g_tape, pass.style_ce),
        content_ce: scalar(&g_tape, pass.content_ce),
        csh: scalar(&g_tape, pass.csh),
    };
    let report = total_loss(parts, adv_d, *weights)?;
    g_tape.backward(total)?;
    let g_grads = g_bound.grads(&g_tape, gen_store.names().map(String::from))?;
    adam.apply(params, &g_grads, cfg, t)?;
    Ok(report)
}

/// Freshly initialized parameters of a variant, with their scalar count.
pub struct VariantModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub param_count: usize,
}

pub fn build_variant(model: &ModelConfig, seed: u64) -> Result<VariantModel> {
    let params = init_params(model, seed)?;
    let param_count = params.param_count();
    Ok(VariantModel { config: model.clone(), params, param_count })
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub last: Option<LossReport>,
    pub param_count: usize,
}

fn log_header() -> String {
    let mut s = String::from("step");
    for f in LossReport::FIELDS {
        s.push('\t');
        s.push_str(f);
    }
    s
}

fn log_row(step: usize, r: &LossReport) -> String {
    let mut s = step.to_string();
    for v in r.values() {
        s.push('\t');
        s.push_str(&format!("{v:.6e}"));
    }
    s
}

/// Keep the header and rows with `step <= upto`.
fn truncate_log(path: &Path, upto: usize) -> Result<()> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let step: Option<usize> = line.split('\t').next().and_then(|s| s.parse().ok());
        if i == 0 || step.is_some_and(|s| s <= upto) {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Options that are not part of the training recipe.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub resume: Option<PathBuf>,
    pub force: bool,
    /// Print a progress line every this many steps (0 = silent).
    pub progress_every: usize,
}

pub fn train(cfg: &TrainConfig, run: &RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.data_dir)?;
    let model = cfg.model_config(data.split.n_train_fonts());
    let weights = cfg.effective_weights();
    let log_path = cfg.out_dir.join(LOSS_LOG);

    let (mut params, mut adam, start) = match &run.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model != model {
                return Err(Error::Config(format!(
                    "checkpoint model ({}) does not match the config",
                    ck.model.to_text().replace('\n', " ")
                )));
            }
            if ck.step > cfg.steps {
                return Err(Error::Config(format!("checkpoint is at step {} beyond steps = {}", ck.step, cfg.steps)));
            }
            (ck.params, ck.adam, ck.step)
        }
        None => {
            if log_path.exists() && !run.force {
                return Err(Error::Config(format!(
                    "{} already holds a training run; pass --force to overwrite",
                    cfg.out_dir.display()
                )));
            }
            let v = build_variant(&model, cfg.seed)?;
            let adam = AdamState::zeros_like(&v.params);
            (v.params, adam, 0)
        }
    };
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(&cfg.out_dir, e))?;

    if run.resume.is_some() && log_path.exists() {
        truncate_log(&log_path, start)?;
    } else {
        fs::write(&log_path, format!("{}\n", log_header())).map_err(|e| Error::io(&log_path, e))?;
    }
    let mut log = OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let param_count = params.param_count();
    let mut last = None;
    let mut ckpt_path = cfg.out_dir.join(checkpoint_name(start));
    for step in start..cfg.steps {
        let batch = make_batch(&data, cfg.seed, step, cfg.batch_size, cfg.n_style_refs)?;
        let report =
            train_step(&mut params, &mut adam, &model, &batch, &cfg.adam, &weights, step as u64 + 1).map_err(|e| {
                match e {
                    Error::NonFinite { op } => Error::NonFinite { op: format!("{op} at step {}", step + 1) },
                    other => other,
                }
            })?;
        writeln!(log, "{}", log_row(step + 1, &report)).map_err(|e| Error::io(&log_path, e))?;
        let done = step + 1;
        if run.progress_every > 0 && done % run.progress_every == 0 {
            eprintln!("step {done}/{}: {report}", cfg.steps);
        }
        if done % cfg.checkpoint_every == 0 || done == cfg.steps {
            ckpt_path = cfg.out_dir.join(checkpoint_name(done));
            let ck = Checkpoint { step: done, model: model.clone(), params: params.clone(), adam: adam.clone() };
            ck.save(&ckpt_path)?;
        }
        last = Some(report);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome { checkpoint: ckpt_path, log: log_path, last, param_count })
}

#[cfg(test)]
mod tests;
