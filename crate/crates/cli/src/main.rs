use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use conntext::data::{
    generate_synthetic, load_dataset, save_dataset, stratified_split, SubjectRecord, SyntheticConfig,
};
use conntext::eval::{interpret, metrics_lines, metrics_table, run_ablation_suite, write_report, InterpretConfig};
use conntext::train::{evaluate, history_lines, load_checkpoint, save_checkpoint, train_with_split, TrainConfig};
use conntext::{data::prepare_inputs, verify};

const CHECKPOINT_FILE: &str = "model.ckpt";
const HISTORY_FILE: &str = "history.jsonl";
const METRICS_FILE: &str = "metrics.jsonl";
const METRICS_TABLE: &str = "metrics.txt";
const GROUND_TRUTH_FILE: &str = "ground_truth.json";
const ABLATION_FILE: &str = "ablation.jsonl";
const ABLATION_TABLE: &str = "ablation.txt";

/// Connectome and clinical-report alignment: data synthesis, training,
/// evaluation, interpretation and self-verification.
#[derive(Parser, Debug)]
#[command(name = "conntext", version)]
struct Cli {
    /// TOML config with optional [synth], [train], [interpret] and [paths] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config (data, split, init and batches).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with planted region/token pairs.
    Synth,
    /// Train on a dataset and write a checkpoint, history and test metrics.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        ablation: AblationFlags,
    },
    /// Score a checkpoint on one part of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        split: Part,
    },
    /// Rank subnetworks and tokens by cross-modal attention.
    Interpret {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Part::All)]
        split: Part,
        #[arg(long)]
        k_subnets: Option<usize>,
        #[arg(long)]
        k_tokens: Option<usize>,
    },
    /// Train the modality and alignment ablations on one split.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the gradient, oracle and invariance checks.
    Verify,
}

#[derive(Args, Debug, Default)]
struct AblationFlags {
    /// Drop the connectome-level alignment loss.
    #[arg(long)]
    no_cl: bool,
    /// Drop the subject-level alignment loss.
    #[arg(long)]
    no_sl: bool,
    /// Connectome encoder only.
    #[arg(long, conflicts_with = "text_only")]
    image_only: bool,
    /// Report encoder only.
    #[arg(long)]
    text_only: bool,
}

/// Which records of a dataset a command looks at. `train` and `test` redo
/// the split recorded in the checkpoint's config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Part {
    Train,
    Test,
    All,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CliConfig {
    synth: SyntheticConfig,
    train: TrainConfig,
    interpret: InterpretConfig,
    paths: Paths,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Paths {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
}

/// Failure that maps to exit code 1.
#[derive(Debug)]
struct CheckFailed(String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use conntext::Error as E;
    for cause in err.chain() {
        if cause.is::<CheckFailed>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } | E::Parse { .. } | E::Checkpoint(_) | E::Config(_) => 2,
                _ => 1,
            };
        }
    }
    2
}

/// The error chain joined with ": ", skipping causes whose text the
/// previous message already ends with.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.is_empty() {
            out = text;
        } else if !out.ends_with(&text) {
            out = format!("{out}: {text}");
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

fn load_config(cli: &Cli) -> Result<CliConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?
        }
        None => CliConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
        cfg.train.split.seed = seed;
    }
    if cli.out.is_some() {
        cfg.paths.out = cli.out.clone();
    }
    Ok(cfg)
}

fn out_dir(cfg: &CliConfig) -> Result<PathBuf> {
    let dir = cfg
        .paths
        .out
        .clone()
        .context("no output directory; pass --out or set paths.out")?;
    fs::create_dir_all(&dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir)
}

fn data_dir(flag: &Option<PathBuf>, cfg: &CliConfig) -> Result<PathBuf> {
    let dir = flag
        .clone()
        .or_else(|| cfg.paths.data.clone())
        .context("no dataset; pass --data or set paths.data")?;
    if !dir.is_dir() {
        bail!("dataset directory {} does not exist", dir.display());
    }
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Verify = cli.command {
        return cmd_verify();
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train { data, ablation } => cmd_train(&cfg, data, ablation),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => cmd_eval(&cfg, checkpoint, data, *split),
        Command::Interpret {
            checkpoint,
            data,
            split,
            k_subnets,
            k_tokens,
        } => {
            let mut icfg = cfg.interpret.clone();
            icfg.subnetworks = k_subnets.unwrap_or(icfg.subnetworks);
            icfg.tokens = k_tokens.unwrap_or(icfg.tokens);
            cmd_interpret(&cfg, checkpoint, data, *split, &icfg)
        }
        Command::Ablate { data } => cmd_ablate(&cfg, data),
        Command::Verify => unreachable!("handled above"),
    }
}

fn cmd_synth(cfg: &CliConfig) -> Result<()> {
    cfg.synth.validate()?;
    let out = out_dir(cfg)?;
    let records = generate_synthetic(&cfg.synth)?;
    save_dataset(&out, &records)?;
    let truth = serde_json::to_string_pretty(&cfg.synth.ground_truth())?;
    write(&out.join(GROUND_TRUTH_FILE), &(truth + "\n"))?;
    println!("wrote {} subjects to {}", records.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &CliConfig, data: &Option<PathBuf>, flags: &AblationFlags) -> Result<()> {
    let mut train = cfg.train.clone();
    train.use_cl &= !flags.no_cl;
    train.use_sl &= !flags.no_sl;
    if flags.image_only {
        train.model.use_text = false;
    }
    if flags.text_only {
        train.model.use_image = false;
    }
    train.validate()?;
    let data = data_dir(data, cfg)?;
    let out = out_dir(cfg)?;
    let records = load_dataset(&data)?;

    let (outcome, _) = train_with_split(&train, &records)?;
    for r in &outcome.history {
        eprintln!(
            "epoch {:>3}  L {:.4}  L_cl {:.4}  L_sl {:.4}  L_cls {:.4}  acc {:.4}",
            r.epoch, r.l, r.l_cl, r.l_sl, r.l_cls, r.eval_acc
        );
    }
    save_checkpoint(&outcome.checkpoint(&train), &out.join(CHECKPOINT_FILE))?;
    write(&out.join(HISTORY_FILE), &history_lines(&outcome.history))?;
    let rows: Vec<_> = outcome
        .final_metrics
        .into_iter()
        .map(|m| ("test".to_string(), m))
        .collect();
    write(&out.join(METRICS_FILE), &metrics_lines(&rows))?;
    let table = metrics_table(&rows);
    write(&out.join(METRICS_TABLE), &table)?;
    print!("{table}");
    Ok(())
}

fn select(records: Vec<SubjectRecord>, train: &TrainConfig, part: Part) -> Result<Vec<SubjectRecord>> {
    Ok(match part {
        Part::All => records,
        Part::Train => stratified_split(&records, &train.split)?.0,
        Part::Test => stratified_split(&records, &train.split)?.1,
    })
}

fn part_name(part: Part) -> &'static str {
    match part {
        Part::Train => "train",
        Part::Test => "test",
        Part::All => "all",
    }
}

fn cmd_eval(cfg: &CliConfig, checkpoint: &Path, data: &Option<PathBuf>, part: Part) -> Result<()> {
    let data = data_dir(data, cfg)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let records = select(load_dataset(&data)?, &ckpt.config, part)?;
    let m = &ckpt.config.model;
    if let Some(r) = records.iter().find(|r| r.sc.region_count() != m.regions) {
        bail!(conntext::Error::Checkpoint(format!(
            "dimension mismatch: checkpoint expects N={}, subject {} has N={}",
            m.regions,
            r.subject_id,
            r.sc.region_count()
        )));
    }
    let inputs = prepare_inputs(&records, &ckpt.vocab, m.max_len, m.input_transform)?;
    let metrics = evaluate(&ckpt.model, &inputs)?;
    let lines = metrics_lines(&[(part_name(part).to_string(), metrics)]);
    print!("{lines}");
    if let Some(out) = &cfg.paths.out {
        fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
        write(&out.join(METRICS_FILE), &lines)?;
    }
    Ok(())
}

fn cmd_interpret(
    cfg: &CliConfig,
    checkpoint: &Path,
    data: &Option<PathBuf>,
    part: Part,
    icfg: &InterpretConfig,
) -> Result<()> {
    let data = data_dir(data, cfg)?;
    let out = out_dir(cfg)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let records = select(load_dataset(&data)?, &ckpt.config, part)?;
    let report = interpret(&ckpt.model, &ckpt.vocab, &records, icfg)?;
    write_report(&report, &out)?;
    println!("top subnetworks:");
    for s in &report.subnetworks.top {
        println!("  {:<12} {:.4}", s.region, s.salience);
    }
    println!("top tokens:");
    for t in &report.tokens.top {
        println!("  {:<28} {:.4}", t.influence.token, t.influence.diff);
    }
    Ok(())
}

fn cmd_ablate(cfg: &CliConfig, data: &Option<PathBuf>) -> Result<()> {
    cfg.train.validate()?;
    let data = data_dir(data, cfg)?;
    let out = out_dir(cfg)?;
    let records = load_dataset(&data)?;
    let table = run_ablation_suite(&cfg.train, &records)?;
    write(&out.join(ABLATION_FILE), &table.lines())?;
    let text = table.text_table();
    write(&out.join(ABLATION_TABLE), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_verify() -> Result<()> {
    let summary = verify::run_all();
    println!("{summary}");
    if !summary.all_passed() {
        return Err(CheckFailed(format!("{} verification checks failed", summary.failures())).into());
    }
    Ok(())
}
