//! `lexrl`: dictionary building, toy-data generation, SFT, RL, evaluation,
//! scoring and one-off generation.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{Map, Value};

use lexrl::config::{read_object, RunConfig};
use lexrl::data::{generate_toy_language, load_corpus};
use lexrl::dictionary::{filter_entries, load_raw, Dictionary};
use lexrl::eval::{evaluate, read_transcripts, report_from_transcripts, write_json, write_transcripts};
use lexrl::exec::Workers;
use lexrl::grpo::rl_train;
use lexrl::metrics::{answer_reward, RewardKind};
use lexrl::policy::checkpoint::{self, CheckpointMeta};
use lexrl::protocol::run_tool_loop;
use lexrl::sft::{loss_csv, sft_train};
use lexrl::Policy32;

#[derive(Parser)]
#[command(name = "lexrl", version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CARGO_PKG_NAME"), ")"))]
#[command(about = "Dictionary-augmented translation: SFT, GRPO and evaluation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for rollouts, evaluation and gradient passes.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override any config key, e.g. `--set max_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Dictionary utilities.
    Dict {
        #[command(subcommand)]
        action: DictAction,
    },
    /// Generate a synthetic toy language.
    Toygen {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Supervised fine-tuning with synthetic tool calls.
    Sft {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// GRPO reinforcement learning.
    Rl {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_tool: bool,
        #[arg(long)]
        reward: Option<RewardKind>,
    },
    /// Evaluate a checkpoint on a test set, or replay transcripts.
    Eval {
        #[arg(long, required_unless_present = "replay")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long)]
        no_tool: bool,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        transcripts: Option<PathBuf>,
        /// Recompute the report from a transcript dump.
        #[arg(long, conflicts_with = "ckpt")]
        replay: Option<PathBuf>,
    },
    /// Score hypotheses against references line by line.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value = "bleu")]
        metric: RewardKind,
    },
    /// Run one tool-augmented episode and print its transcript.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long)]
        no_tool: bool,
    },
}

#[derive(Subcommand)]
enum DictAction {
    /// Filter a raw TSV dictionary by source length.
    Build {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_source_words: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Flags recognised by the current subcommand, as config keys.
#[derive(Default)]
struct Flags(Map<String, Value>);

impl Flags {
    fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.0.insert(key.into(), value.into());
    }

    fn path(&mut self, key: &str, value: &Option<PathBuf>) {
        if let Some(p) = value {
            self.set(key, p.to_string_lossy().into_owned());
        }
    }
}

fn resolve(global: &Global, mut flags: Flags) -> Result<RunConfig> {
    let file = global.config.as_deref().map(read_object).transpose()?;
    let mut layered = Map::new();
    for item in &global.overrides {
        let (k, v) = item.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{item}`"))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        layered.insert(k.trim().to_string(), value);
    }
    // dedicated flags take precedence over --set
    layered.append(&mut flags.0);
    if let Some(seed) = global.seed {
        layered.insert("seed".into(), seed.into());
    }
    if let Some(w) = global.workers {
        layered.insert("workers".into(), w.into());
    }
    Ok(RunConfig::resolve(file, layered)?)
}

fn need<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value.as_deref().with_context(|| format!("no {what} given (flag or config key `{what}`)"))
}

fn load_dict(path: &Path, cfg: &RunConfig) -> Result<Dictionary> {
    Ok(filter_entries(&load_raw(path)?, cfg.max_source_words.max(1)))
}

fn tool_dict(cfg: &RunConfig) -> Result<Option<Dictionary>> {
    match (&cfg.dict, cfg.use_tool) {
        (Some(p), true) => Ok(Some(load_dict(p, cfg)?)),
        _ => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Dict { action: DictAction::Build { input, out, max_source_words } } => {
            let mut f = Flags::default();
            if let Some(k) = max_source_words {
                f.set("max_source_words", *k);
            }
            let cfg = resolve(g, f)?;
            if cfg.max_source_words == 0 {
                bail!("max_source_words must be at least 1");
            }
            let raw = load_raw(input)?;
            let dict = filter_entries(&raw, cfg.max_source_words);
            dict.write_tsv(out)?;
            println!("kept={} dropped={}", dict.len(), raw.len() - dict.len());
        }
        Command::Toygen { out_dir } => {
            let cfg = resolve(g, Flags::default())?;
            let lang = generate_toy_language(&cfg.toy())?;
            lang.write_to(out_dir)?;
            info!(
                "wrote {} train, {} test pairs and {} dictionary entries to {}",
                lang.train.len(),
                lang.test.len(),
                lang.dictionary.len(),
                out_dir.display()
            );
        }
        Command::Sft { corpus, dict, out, init } => {
            let mut f = Flags::default();
            f.path("corpus", corpus);
            f.path("dict", dict);
            f.path("out", out);
            f.path("ckpt", init);
            let cfg = resolve(g, f)?;
            let pairs = load_corpus(need(&cfg.corpus, "corpus")?)?;
            let dict = tool_dict(&cfg)?;
            let out = need(&cfg.out, "out")?;
            let mut policy = match &cfg.ckpt {
                Some(p) => checkpoint::load::<f32>(p)?.0,
                None => Policy32::new(cfg.model(), cfg.seed)?,
            };
            let workers = Workers::new(cfg.workers)?;
            let log = sft_train(&mut policy, &pairs, dict.as_ref(), &cfg.sft(), &workers)?;
            let steps = log.last().map_or(0, |r| r.step) as u64;
            checkpoint::save(out, &policy, &CheckpointMeta::at(steps, cfg.seed))?;
            write_file(&out.join("sft_loss.csv"), &loss_csv(&log))?;
            info!("sft: {} steps, final loss {:.4}", steps, log.last().map_or(f64::NAN, |r| r.loss));
        }
        Command::Rl { ckpt, corpus, dict, out, no_tool, reward } => {
            let mut f = Flags::default();
            f.path("ckpt", ckpt);
            f.path("corpus", corpus);
            f.path("dict", dict);
            f.path("out", out);
            if *no_tool {
                f.set("use_tool", false);
            }
            if let Some(r) = reward {
                f.set("reward", serde_json::to_value(r)?);
            }
            let cfg = resolve(g, f)?;
            let (mut policy, meta) = checkpoint::load::<f32>(need(&cfg.ckpt, "ckpt")?)?;
            let pairs = load_corpus(need(&cfg.corpus, "corpus")?)?;
            let dict = tool_dict(&cfg)?;
            let out = need(&cfg.out, "out")?;
            let workers = Workers::new(cfg.workers)?;
            let log = rl_train(&mut policy, &pairs, dict.as_ref(), &cfg.grpo(), &workers)?;
            checkpoint::save(out, &policy, &CheckpointMeta::at(meta.step + cfg.max_steps as u64, cfg.seed))?;
            write_file(&out.join("rl_metrics.csv"), &log.metrics_csv())?;
            write_file(&out.join("rl_eval.csv"), &log.eval_csv())?;
        }
        Command::Eval { ckpt, test, dict, no_tool, report, transcripts, replay } => {
            let mut f = Flags::default();
            f.path("ckpt", ckpt);
            f.path("test", test);
            f.path("dict", dict);
            if *no_tool {
                f.set("use_tool", false);
            }
            let cfg = resolve(g, f)?;
            let dict = tool_dict(&cfg)?;
            let (rep, meta) = match replay {
                Some(path) => {
                    let t = read_transcripts(path)?;
                    report_from_transcripts(&t, dict.as_ref(), cfg.tool_budget, &cfg.bleu())?
                }
                None => {
                    let (policy, _) = checkpoint::load::<f32>(need(&cfg.ckpt, "ckpt")?)?;
                    let pairs = load_corpus(need(&cfg.test, "test")?)?;
                    let workers = Workers::new(cfg.workers)?;
                    let (rep, meta, t) = evaluate(&policy, &pairs, dict.as_ref(), &cfg.eval(), &workers)?;
                    if let Some(path) = transcripts {
                        write_transcripts(path, &t)?;
                    }
                    (rep, meta)
                }
            };
            write_json(report, &rep)?;
            write_json(meta_path(report), &meta)?;
            info!(
                "avg BLEU {:.2} | answers with tools {:.2}% | avg tool calls {:.2} | successful calls {:.2}% | queries {}/{}",
                100.0 * rep.avg_bleu,
                rep.answers_with_tools_pct,
                rep.avg_tool_calls,
                rep.successful_tool_calls_pct,
                rep.successful_queries,
                rep.successful_queries_max
            );
        }
        Command::Score { hyp, reference, metric } => {
            let cfg = resolve(g, Flags::default())?;
            let hyps = read_lines(hyp)?;
            let refs = read_lines(reference)?;
            if hyps.len() != refs.len() {
                bail!("{} hypotheses but {} references", hyps.len(), refs.len());
            }
            if refs.is_empty() {
                bail!("nothing to score");
            }
            let mut total = 0.0;
            println!("line\tscore");
            for (i, (h, r)) in hyps.iter().zip(&refs).enumerate() {
                let s = answer_reward(Some(h), r, *metric, &cfg.bleu())?;
                total += s;
                println!("{}\t{}", i + 1, s);
            }
            println!("mean\t{}", total / refs.len() as f64);
        }
        Command::Generate { ckpt, text, dict, no_tool } => {
            let mut f = Flags::default();
            f.path("dict", dict);
            if *no_tool {
                f.set("use_tool", false);
            }
            let cfg = resolve(g, f)?;
            let (policy, _) = checkpoint::load::<f32>(ckpt)?;
            let dict = tool_dict(&cfg)?;
            let ep = run_tool_loop(&policy, text, dict.as_ref(), cfg.tool_budget, &cfg.eval().generation)?;
            println!("{}", ep.completion_text());
            println!("answer: {}", ep.answer.as_deref().unwrap_or("<none>"));
        }
    }
    Ok(())
}

fn meta_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    report.with_file_name(format!("{stem}.meta.json"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}
