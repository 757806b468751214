use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rdlg_core::checkpoint::{self, ContainerKind};
use rdlg_core::run::{evaluate, MODEL_FILE};
use rdlg_core::{collapse_model, data, gradcheck, shift, CollapsedModel, Dataset, Evaluated, RunConfig, Seq2SeqModel, Trainer};

#[derive(Parser)]
#[command(name = "rdlg", version, about = "Recurrent logic-gate sequence models")]
struct Cli {
    /// Root for relative output directories.
    #[arg(long, env = "RDLG_OUTPUT_ROOT", global = true)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Soft,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Dims {
    Tiny,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; resumes if the output directory holds a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured total step count.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Report accuracy, BLEU and perplexity on the validation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the run's latest soft checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "soft")]
        mode: Mode,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Discretize a soft checkpoint and print size accounting.
    Collapse {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output path; defaults to `<checkpoint>.rdlgc`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the accounting for `--config` without building a model.
        #[arg(long)]
        dry_run: bool,
    },
    /// Decode sentences given as arguments, or one per stdin line.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "soft")]
        mode: Mode,
        text: Vec<String>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// Model to check; must stay under the parameter limit.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "tiny")]
        dims: Dims,
    },
    /// Train one model per shift and print accuracy per shift as CSV.
    ShiftBench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,2,4,6")]
        shifts: Vec<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
}

struct Loaded {
    config: RunConfig,
    base_dir: PathBuf,
    out_dir: PathBuf,
}

fn load_config(path: &Path, root: &Option<PathBuf>, seed: Option<u64>) -> anyhow::Result<Loaded> {
    let mut config = RunConfig::load(path)?;
    if let Some(s) = seed {
        config.override_seed(s);
    }
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let out_dir = match root {
        Some(r) if config.output_dir.is_relative() => r.join(&config.output_dir),
        _ => config.output_dir.clone(),
    };
    Ok(Loaded {
        config,
        base_dir,
        out_dir,
    })
}

enum AnyModel {
    Soft(Seq2SeqModel),
    Hard(CollapsedModel),
}

fn load_for_mode(path: &Path, mode: Mode) -> anyhow::Result<AnyModel> {
    match (checkpoint::container_kind(path)?, mode) {
        (ContainerKind::Soft, Mode::Soft) => Ok(AnyModel::Soft(checkpoint::load_model(path)?)),
        (ContainerKind::Soft, Mode::Hard) => {
            eprintln!("warning: {} is a soft checkpoint; collapsing it for hard mode", path.display());
            Ok(AnyModel::Hard(collapse_model(&checkpoint::load_model(path)?)))
        }
        (ContainerKind::Collapsed, Mode::Hard) => Ok(AnyModel::Hard(checkpoint::load_collapsed(path)?)),
        (ContainerKind::Collapsed, Mode::Soft) => Err(rdlg_core::Error::Config {
            field: "mode".into(),
            message: format!("{} is collapsed and can only run in hard mode", path.display()),
        }
        .into()),
        (ContainerKind::TrainState, _) => Err(rdlg_core::Error::Corrupt(format!(
            "{} holds optimizer state, not a model",
            path.display()
        ))
        .into()),
    }
}

fn check_model_matches(cfg: &RunConfig, model: &rdlg_core::ModelConfig) -> anyhow::Result<()> {
    if &cfg.model != model {
        return Err(rdlg_core::Error::Config {
            field: "model".into(),
            message: "checkpoint was written with a different model config".into(),
        }
        .into());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = cli.output_root;
    match cli.command {
        Command::Train {
            config,
            steps,
            seed_override,
        } => {
            let mut l = load_config(&config, &root, seed_override)?;
            if let Some(s) = steps {
                l.config.steps = s;
            }
            let data = Dataset::load(&l.config, &l.base_dir)?;
            println!(
                "train {} pairs, val {} pairs, vocab {}",
                data.train.len(),
                data.val.len(),
                data.vocab.len()
            );
            let mut trainer = Trainer::new(l.config, data, l.out_dir.clone())?;
            if trainer.state.step > 0 {
                println!("resuming from step {}", trainer.state.step);
            }
            trainer.run()?;
            for row in &trainer.history {
                println!(
                    "step {:>6} train_loss {:.4} val_loss {:.4} lr {:.3e} acc {:.4} ppl {:.3}",
                    row.step, row.train_loss, row.val_loss, row.lr, row.acc, row.ppl
                );
            }
            let eval = trainer.validate_now()?;
            println!("final step {} acc {:.4}", trainer.state.step, eval.accuracy);
            println!("checkpoint: {}", l.out_dir.join(MODEL_FILE).display());
        }
        Command::Eval {
            config,
            checkpoint,
            mode,
            seed_override,
        } => {
            let l = load_config(&config, &root, seed_override)?;
            let path = checkpoint.unwrap_or_else(|| l.out_dir.join(MODEL_FILE));
            let data = Dataset::load(&l.config, &l.base_dir)?;
            let generative = l.config.data.is_generative();
            let report = match load_for_mode(&path, mode)? {
                AnyModel::Soft(m) => {
                    check_model_matches(&l.config, m.config())?;
                    evaluate(Evaluated::Soft(&m), &data.val, generative)?
                }
                AnyModel::Hard(m) => {
                    check_model_matches(&l.config, m.config())?;
                    evaluate(Evaluated::Hard(&m), &data.val, generative)?
                }
            };
            println!("mode: {}", if mode == Mode::Soft { "soft" } else { "hard" });
            println!("{report}");
        }
        Command::Collapse {
            config,
            checkpoint,
            out,
            dry_run,
        } => {
            if dry_run {
                let Some(config) = config else {
                    bail!(rdlg_core::Error::Config {
                        field: "config".into(),
                        message: "--dry-run needs --config".into(),
                    });
                };
                let text = std::fs::read_to_string(&config).with_context(|| config.display().to_string())?;
                let model = match RunConfig::from_json(&text) {
                    Ok(run) => run.model,
                    Err(_) => {
                        let m: rdlg_core::ModelConfig = serde_json::from_str(&text).map_err(rdlg_core::Error::from)?;
                        m.validate()?;
                        m
                    }
                };
                println!("{}", model.accounting());
                return Ok(());
            }
            let input = match (checkpoint, config) {
                (Some(c), _) => c,
                (None, Some(cfg)) => load_config(&cfg, &root, None)?.out_dir.join(MODEL_FILE),
                (None, None) => bail!(rdlg_core::Error::Config {
                    field: "checkpoint".into(),
                    message: "pass --checkpoint or --config".into(),
                }),
            };
            let model = checkpoint::load_model(&input)?;
            let collapsed = collapse_model(&model);
            let out = out.unwrap_or_else(|| input.with_extension("rdlgc"));
            checkpoint::save_collapsed(&collapsed, &out)?;
            println!("{}", model.config().accounting());
            let hist = collapsed.gate_histogram();
            let names: Vec<String> = rdlg_core::GateKind::ALL
                .iter()
                .zip(hist)
                .filter(|(_, n)| *n > 0)
                .map(|(g, n)| format!("{g}={n}"))
                .collect();
            println!("gate usage: {}", names.join(" "));
            println!("wrote {}", out.display());
        }
        Command::Infer {
            config,
            checkpoint,
            mode,
            text,
        } => {
            let l = load_config(&config, &root, None)?;
            let path = checkpoint.unwrap_or_else(|| l.out_dir.join(MODEL_FILE));
            let vocab = Dataset::load(&l.config, &l.base_dir)?.vocab;
            let model = load_for_mode(&path, mode)?;
            let lines: Vec<String> = if text.is_empty() {
                std::io::stdin().lock().lines().collect::<Result<_, _>>()?
            } else {
                vec![text.join(" ")]
            };
            let s = l.config.model.seq_len;
            let generative = l.config.data.is_generative();
            for line in lines {
                let tokens = data::tokenize(&line);
                if tokens.is_empty() {
                    println!();
                    continue;
                }
                let ids = if generative {
                    data::fix_length(&vocab.encode(&tokens), s)
                } else {
                    let mut ids = vocab.encode(&tokens);
                    ids.resize(s, data::PAD);
                    ids.truncate(s);
                    ids
                };
                let batch = [ids.clone()];
                let out = match (&model, generative) {
                    (AnyModel::Soft(m), true) => m.generate_batch(&batch, s)?,
                    (AnyModel::Hard(m), true) => m.generate_batch(&batch, s)?,
                    (AnyModel::Soft(m), false) => m.predict(&batch, &batch)?,
                    (AnyModel::Hard(m), false) => m.predict(&batch, &batch)?,
                };
                println!("{}", vocab.decode(&out[0]).join(" "));
            }
        }
        Command::Gradcheck { config, dims } => {
            let cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| p.display().to_string())?;
                    let m = match RunConfig::from_json(&text) {
                        Ok(run) => run.model,
                        Err(_) => serde_json::from_str(&text).map_err(rdlg_core::Error::from)?,
                    };
                    m.validate()?;
                    m
                }
                None => match dims {
                    Dims::Tiny => gradcheck::tiny_config(),
                },
            };
            let report = gradcheck::gradcheck(&cfg)?;
            println!("{report}");
            let closed = gradcheck::closed_form_logit_check(50, 7)?;
            println!("closed-form logit gradient max abs err: {closed:.3e}");
            if !report.passed() || closed > 1e-10 {
                bail!("gradient check failed");
            }
        }
        Command::ShiftBench {
            config,
            shifts,
            steps,
            seed_override,
        } => {
            let mut l = load_config(&config, &root, seed_override)?;
            if let Some(s) = steps {
                l.config.steps = s;
            }
            let results = shift::shift_bench(&l.config, &shifts, &l.base_dir, &l.out_dir)?;
            let csv = shift::to_csv(&results);
            std::fs::create_dir_all(&l.out_dir).with_context(|| l.out_dir.display().to_string())?;
            let path = l.out_dir.join("shift_bench.csv");
            std::fs::write(&path, &csv).with_context(|| path.display().to_string())?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let input = e
                .chain()
                .any(|c| c.downcast_ref::<rdlg_core::Error>().is_some_and(|e| e.is_input_error()))
                || e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some());
            ExitCode::from(if input { 2 } else { 1 })
        }
    }
}
