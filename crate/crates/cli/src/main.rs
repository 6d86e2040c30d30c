use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use kgalign::config::RunConfig;
use kgalign::dataset::Dataset;
use kgalign::pipeline::{evaluate_checkpoint, generate_data, run_pretrain};
use kgalign::trainer::{checkpoint_id, export_lm, sha256_hex, Checkpoint};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Joint masked-language-model and knowledge-graph alignment pretraining.
///
/// Any `--section.key VALUE` (or `--section.key=VALUE`) flag overrides the
/// matching configuration entry, e.g. `--trainer.batch_size 16`.
#[derive(Debug, Parser)]
#[command(name = "kgalign", version)]
struct Cli {
    /// TOML run configuration; defaults to the tiny profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic graph, corpora and evaluation mentions.
    GenData {
        /// Output directory; defaults to the configured data directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain and write the checkpoint, LM-only export and metrics log.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory; defaults to `out_dir` from the configuration.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint and write a JSON report plus a text table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Strip the graph encoder and optimizer state from a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `<checkpoint stem>.lm.ckpt` next to the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Pulls `--a.b value` and `--a.b=value` pairs out of the argument list.
fn split_overrides(args: Vec<OsString>) -> anyhow::Result<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.to_str().and_then(|s| s.strip_prefix("--")).filter(|s| s.contains('.')) else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .and_then(|v| v.into_string().ok())
                    .with_context(|| format!("override --{flag} needs a value"))?;
                (flag.to_string(), v)
            }
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn load_config(cli: &Cli, base: Option<String>, mut overrides: Vec<(String, String)>) -> kgalign::Result<RunConfig> {
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    match (&cli.config, base) {
        (Some(path), _) => RunConfig::load(Some(path), &overrides),
        (None, doc) => RunConfig::resolve(doc.as_deref(), &overrides),
    }
}

fn gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> anyhow::Result<()> {
    let dir = out.unwrap_or_else(|| cfg.data_dir());
    let data = generate_data(cfg)?;
    data.write(&dir)?;
    let s = &data.summary;
    println!("wrote {}", dir.display());
    println!("nodes {}  edges {}  relations {}", s.nodes, s.edges, s.relations);
    println!("sentences {}  mentions {}", s.sentences, s.mentions);
    println!("heldout sentences {}  eval mentions {}", s.heldout_sentences, s.eval_mentions);
    for (name, body) in data.files() {
        println!("{}  {name}", &sha256_hex(body.as_bytes())[..16]);
    }
    Ok(())
}

fn pretrain(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: bool,
    stop_after: Option<usize>,
) -> anyhow::Result<()> {
    let data_dir = data.unwrap_or_else(|| cfg.data_dir());
    let ds = Dataset::load_dir(&data_dir)?;
    let out = out.unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let snapshot = out.join("config.toml");
    fs::write(&snapshot, cfg.to_toml()).with_context(|| format!("writing {}", snapshot.display()))?;

    let outcome = run_pretrain(cfg, &ds, &out, resume, stop_after)?;
    println!("steps {}/{}", outcome.completed, outcome.total_steps);
    println!("checkpoint {}", outcome.checkpoint.display());
    println!("metrics {}", outcome.metrics_log.display());
    if outcome.finished {
        let lm = out.join("lm.ckpt");
        export_lm(&outcome.checkpoint, &lm)?;
        println!("lm export {}", lm.display());
    }
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: &Path, data: Option<PathBuf>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let id = checkpoint_id(checkpoint)?;
    let ds = Dataset::load_dir(&data.unwrap_or_else(|| cfg.data_dir()))?;
    let report = evaluate_checkpoint(cfg, &ckpt, &id, &ds)?;

    let out = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let json = out.join(format!("{stem}.eval.json"));
    let table = out.join(format!("{stem}.eval.txt"));
    fs::write(&json, report.to_json()).with_context(|| format!("writing {}", json.display()))?;
    fs::write(&table, report.to_table()).with_context(|| format!("writing {}", table.display()))?;
    print!("{}", report.to_table());
    println!("report {}", json.display());
    Ok(())
}

fn export(checkpoint: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let out = out.unwrap_or_else(|| {
        let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        checkpoint.with_file_name(format!("{stem}.lm.ckpt"))
    });
    let lm = export_lm(checkpoint, &out)?;
    println!("lm export {} ({} tensors)", out.display(), lm.params.len());
    Ok(())
}

/// The configuration a checkpoint was trained with, as a TOML document.
fn checkpoint_config(path: &Path) -> anyhow::Result<Option<String>> {
    let ckpt = Checkpoint::load(path)?;
    Ok(Some(RunConfig::from_snapshot(&ckpt.config)?.to_toml()))
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> anyhow::Result<()> {
    let base = match (&cli.command, &cli.config) {
        (Command::Eval { checkpoint, .. }, None) => checkpoint_config(checkpoint)?,
        _ => None,
    };
    let cfg = load_config(&cli, base, overrides)?;
    match cli.command {
        Command::GenData { out } => gen_data(&cfg, out),
        Command::Pretrain {
            data,
            out,
            resume,
            stop_after,
        } => pretrain(&cfg, data, out, resume, stop_after),
        Command::Eval { checkpoint, data, out } => eval(&cfg, &checkpoint, data, out),
        Command::Export { checkpoint, out } => export(&checkpoint, out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<kgalign::Error>() {
        Some(kgalign::Error::NonFinite { .. }) => EXIT_NUMERIC,
        Some(_) => EXIT_USAGE,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args_os().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
