use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};

use glyphmoe::ablation::{run_ablation, AblationOptions, ABLATION_FILE};
use glyphmoe::eval::{evaluate, generate_for_font, EvalOptions, Split};
use glyphmoe::glyph::{make_dataset, write_pgm, DatasetOptions};
use glyphmoe::model::Variant;
use glyphmoe::tensor::OpKind;
use glyphmoe::train::config::KEYS;
use glyphmoe::train::{train, Checkpoint, RunOptions, TrainConfig};
use glyphmoe::verify::{gradient_suite, SuiteOptions};
use glyphmoe::Error;

#[derive(Parser, Debug)]
#[command(name = "glyphmoe", version, about = "Few-shot glyph generation with a mixture of attention experts")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render the synthetic glyph corpus.
    GenData {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        fonts: usize,
        #[arg(long, default_value_t = 4)]
        unseen_fonts: usize,
        #[arg(long, default_value_t = 80)]
        chars: usize,
        #[arg(long, default_value_t = 20)]
        unseen_chars: usize,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train one model; writes checkpoints and loss.tsv into --out-dir.
    Train {
        /// Config file of `key = value` lines; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        keys: ConfigFlags,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overwrite an existing run in --out-dir.
        #[arg(long)]
        force: bool,
        /// Print a progress line every N steps (0 = silent).
        #[arg(long, default_value_t = 100)]
        progress: usize,
    },
    /// Score a checkpoint on a held-out split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// ufsc | ufuc
        #[arg(long)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Reference glyphs per style.
        #[arg(long, default_value_t = 4)]
        refs: usize,
        /// Seed for reference selection.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Generate characters in the style of one font.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        font_id: usize,
        /// Comma-separated character ids.
        #[arg(long, value_delimiter = ',', required = true)]
        chars: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Reference glyphs per style.
        #[arg(long, default_value_t = 4)]
        refs: usize,
        /// Seed for reference selection.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Train full, no_hae and no_csh for several seeds and compare them on ufuc.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        keys: ConfigFlags,
        /// Number of seeds, counting up from the configured seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Retrain runs that already finished with the same config.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 500)]
        progress: usize,
    },
    /// Check every analytic gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one op's backward pass (negative control).
        #[arg(long, hide = true)]
        sabotage: Option<String>,
    },
}

/// One optional flag per training config key, generated from [`KEYS`].
#[derive(Clone, Debug, Default)]
struct ConfigFlags {
    values: Vec<(&'static str, String)>,
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

impl FromArgMatches for ConfigFlags {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let values = KEYS.iter().filter_map(|(k, _, _)| m.get_one::<String>(k).map(|v| (*k, v.clone()))).collect();
        Ok(ConfigFlags { values })
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigFlags {
    fn augment_args(cmd: Command) -> Command {
        KEYS.iter().fold(cmd, |cmd, (key, default, desc)| {
            let shown = if default.is_empty() { "none".to_string() } else { default.to_string() };
            cmd.arg(Arg::new(*key).long(flag_name(key)).value_name("VALUE").help(format!("{desc} [default: {shown}]")))
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

/// Defaults, then the config file, then flags.
fn load_config(file: Option<&Path>, flags: &ConfigFlags) -> glyphmoe::Result<TrainConfig> {
    let mut cfg = match file {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    for (k, v) in &flags.values {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Cmd) -> glyphmoe::Result<ExitCode> {
    match cmd {
        Cmd::GenData { out, seed, fonts, unseen_fonts, chars, unseen_chars, force } => {
            let opts = DatasetOptions {
                n_fonts: fonts,
                n_unseen_fonts: unseen_fonts,
                n_chars: chars,
                n_unseen_chars: unseen_chars,
                seed,
                force,
            };
            let split = make_dataset(&out, &opts)?;
            println!("wrote {} glyphs to {}", split.samples.len(), out.display());
        }
        Cmd::Train { config, keys, resume, force, progress } => {
            let cfg = load_config(config.as_deref(), &keys)?;
            let outcome = train(&cfg, &RunOptions { resume, force, progress_every: progress })?;
            println!("parameters: {}", outcome.param_count);
            if let Some(last) = &outcome.last {
                println!("final: {last}");
            }
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("loss log: {}", outcome.log.display());
        }
        Cmd::Eval { ckpt, data, split, out, refs, seed, force } => {
            let ck = Checkpoint::load(&ckpt)?;
            let report = evaluate(&ck, &data, split, &EvalOptions { n_style_refs: refs, seed })?;
            report.write(&out, force)?;
            print!("{}", report.summary_text());
        }
        Cmd::Generate { ckpt, data, font_id, chars, out, refs, seed, force } => {
            let paths: Vec<PathBuf> = chars.iter().map(|c| out.join(format!("f{font_id:03}_c{c:03}.pgm"))).collect();
            if !force {
                if let Some(p) = paths.iter().find(|p| p.exists()) {
                    return Err(Error::Config(format!("{} exists; pass --force to overwrite", p.display())));
                }
            }
            let ck = Checkpoint::load(&ckpt)?;
            let glyphs = generate_for_font(&ck, &data, font_id, &chars, &EvalOptions { n_style_refs: refs, seed })?;
            fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.display().to_string(), source: e })?;
            for ((_, img), path) in glyphs.iter().zip(&paths) {
                write_pgm(path, img)?;
                println!("{}", path.display());
            }
        }
        Cmd::Ablate { config, keys, seeds, force, progress } => {
            let base = load_config(config.as_deref(), &keys)?;
            if seeds == 0 {
                return Err(Error::Config("--seeds must be at least 1".into()));
            }
            let opts = AblationOptions {
                seeds: (base.seed..base.seed + seeds).collect(),
                variants: Variant::ALL.to_vec(),
                eval: EvalOptions { n_style_refs: base.n_style_refs, seed: 0 },
                force,
                progress_every: progress,
            };
            let report = run_ablation(&base, &opts)?;
            print!("{}", report.to_tsv());
            for o in report.orderings() {
                println!(
                    "full vs {}: l1 {} ssim {}",
                    o.ablation,
                    if o.l1_ok { "ok" } else { "reversed" },
                    if o.ssim_ok { "ok" } else { "reversed" }
                );
            }
            println!("table: {}", base.out_dir.join(ABLATION_FILE).display());
        }
        Cmd::Gradcheck { seed, sabotage } => {
            let sabotage = match sabotage {
                Some(name) => {
                    Some(OpKind::from_name(&name).ok_or_else(|| Error::Config(format!("unknown op {name:?}")))?)
                }
                None => None,
            };
            let entries = gradient_suite(&SuiteOptions { seed, sabotage })?;
            let mut failed = 0;
            for e in &entries {
                let ok = e.report.passed();
                println!(
                    "{:<24} max_rel_err={:.3e} {}",
                    e.name,
                    e.report.max_rel_err(),
                    if ok { "ok" } else { "FAIL" }
                );
                for b in e.report.failures() {
                    println!("    {} max_rel_err={:.3e}", b.name, b.max_rel_err);
                }
                failed += usize::from(!ok);
            }
            if failed > 0 {
                eprintln!("error: {failed} of {} gradient checks failed", entries.len());
                return Ok(ExitCode::from(1));
            }
            println!("all {} gradient checks passed", entries.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
