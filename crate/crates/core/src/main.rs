//! Command-line entry point: catalog generation, indexing, the two
//! training stages, evaluation, and one-off / cached expansion. Every
//! command is deterministic given its seeds; errors exit with a distinct
//! code per failure class.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use qexpand::catalog::{self, Catalog, QueryWorkload};
use qexpand::config::{self, RunConfig};
use qexpand::error::{Error, Result};
use qexpand::eval::{
    self, evaluate_system, identity_generator, lexical_neighbor_baseline, EvalReport,
    ExpandOptions, ReportFormat,
};
use qexpand::policy::{load_checkpoint, save_checkpoint};
use qexpand::search::build_index;
use qexpand::trainer::{self, derive_seed};
use qexpand::vocab::Vocab;

#[derive(Parser)]
#[command(name = "qexpand", about = "Search-in-the-loop query expansion training")]
struct Cli {
    /// Run configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed from config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate catalog, training workload, and held-out workload files.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the inverted index and print corpus statistics.
    Index {
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Optionally persist index statistics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised warm-up; writes the SFT checkpoint.
    Sft,
    /// GRPO training from the SFT checkpoint; writes checkpoint + metrics.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        /// Skip the warm-up requirement and start from random init.
        #[arg(long)]
        no_warmup: bool,
    },
    /// Evaluate one or more systems (identity and lexical always included).
    Eval {
        /// Policy checkpoints to evaluate, named by file stem.
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value = "table")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expand one query (or a file of queries) and print the parsed sets.
    Expand {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: Option<String>,
        #[arg(long)]
        query_file: Option<PathBuf>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        greedy: bool,
        /// Also print the raw generated text before parsing.
        #[arg(long)]
        raw: bool,
    },
    /// Precompute an expansion cache for a query list (greedy decoding).
    Cache {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query_file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    });
}

/// Distinct exit codes per failure class: 2 missing file, 3 configuration,
/// 4 checkpoint format, 1 everything else.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Config(_) => 3,
        Error::CheckpointVersion(_) => 4,
        _ => 1,
    }
}

fn load_run_config(cli_config: &Option<PathBuf>, cli_seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match cli_config {
        Some(p) => config::load_config(p)?,
        None => RunConfig::default(),
    };
    config::apply_env_overrides(&mut cfg)?;
    if let Some(seed) = cli_seed {
        cfg.gen.seed = seed;
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_world(cfg: &RunConfig) -> Result<(Catalog, QueryWorkload)> {
    let catalog = catalog::load_catalog(&cfg.paths.catalog)?;
    let workload = catalog::load_workload(&cfg.paths.workload)?;
    Ok((catalog, workload))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_run_config(&cli.config, cli.seed)?;
    match cli.command {
        Command::Gen { out } => cmd_gen(&cfg, out.as_deref()),
        Command::Index { catalog, out } => cmd_index(&cfg, catalog.as_deref(), out.as_deref()),
        Command::Sft => cmd_sft(&cfg),
        Command::Train { steps, no_warmup } => cmd_train(&cfg, steps, no_warmup),
        Command::Eval {
            checkpoints,
            runs,
            temperature,
            format,
            out,
        } => cmd_eval(&cfg, &checkpoints, runs, temperature, &format, out.as_deref()),
        Command::Expand {
            checkpoint,
            query,
            query_file,
            temperature,
            greedy,
            raw,
        } => cmd_expand(&cfg, &checkpoint, query, query_file, temperature, greedy, raw),
        Command::Cache {
            checkpoint,
            query_file,
            out,
        } => cmd_cache(&cfg, &checkpoint, &query_file, &out),
    }
}

fn with_dir(dir: Option<&Path>, path: &Path) -> PathBuf {
    match dir {
        Some(d) => d.join(path),
        None => path.to_path_buf(),
    }
}

fn cmd_gen(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let g = &cfg.gen;
    let catalog =
        catalog::generate_catalog(g.seed, g.n_items, g.n_categories, g.attrs_per_category)?;
    let workload = catalog::generate_workload(&catalog, derive_seed(g.seed, 1, 0, 0), g.n_queries)?;
    let holdout = catalog::generate_workload(&catalog, derive_seed(g.seed, 2, 0, 0), g.n_holdout)?;
    if let Some(d) = out {
        std::fs::create_dir_all(d)?;
    }
    catalog::save_catalog(&catalog, &with_dir(out, &cfg.paths.catalog))?;
    catalog::save_workload(&workload, &with_dir(out, &cfg.paths.workload))?;
    catalog::save_workload(&holdout, &with_dir(out, &cfg.paths.holdout))?;
    println!(
        "generated catalog: {} items, {} vocab tokens; workload {} + {} held-out queries",
        catalog.items.len(),
        catalog.vocabulary.len(),
        workload.queries.len(),
        holdout.queries.len()
    );
    Ok(())
}

fn cmd_index(cfg: &RunConfig, catalog_path: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let path = catalog_path.unwrap_or(&cfg.paths.catalog);
    let catalog = catalog::load_catalog(path)?;
    let index = build_index(&catalog)?;
    let stats = serde_json::json!({
        "n_docs": index.n_docs(),
        "avg_doc_length": index.avg_doc_length(),
        "vocabulary": catalog.vocabulary.len(),
    });
    println!("{stats}");
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(&stats).unwrap())?;
    }
    Ok(())
}

fn cmd_sft(cfg: &RunConfig) -> Result<()> {
    let (catalog, workload) = load_world(cfg)?;
    let index = build_index(&catalog)?;
    let vocab = Vocab::build(catalog.vocabulary.iter().cloned());
    let t = &cfg.train;
    let mut model = qexpand::policy::PolicyModel::new(
        t.model_config(vocab.len()),
        qexpand::policy::Init::Gaussian { std: 0.02 },
        derive_seed(t.seed, 0, 0, 1),
    )?;
    let corpus =
        trainer::make_sft_corpus(&catalog, &workload, &index, &vocab, t, t.sft_examples)?;
    let losses = trainer::run_sft(
        &mut model,
        &corpus,
        t.sft_epochs,
        t.sft_lr,
        t.sft_batch_size,
        derive_seed(t.seed, 0, 0, 3),
    )?;
    save_checkpoint(&cfg.paths.sft_checkpoint, &model, &vocab)?;
    let hash = cfg.hash()?;
    let mut log = open_metrics(&cfg.paths.metrics, false)?;
    for (batch, loss) in losses.iter().enumerate() {
        writeln!(
            log,
            "{}",
            serde_json::json!({"kind": "sft", "batch": batch, "loss": loss, "config": hash})
        )?;
    }
    println!(
        "sft: {} batches, final loss {:.4}, checkpoint {}",
        losses.len(),
        losses.last().unwrap_or(&f64::NAN),
        cfg.paths.sft_checkpoint.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, steps: Option<usize>, no_warmup: bool) -> Result<()> {
    let (catalog, workload) = load_world(cfg)?;
    let index = build_index(&catalog)?;
    let mut t = cfg.train.clone();
    if let Some(s) = steps {
        t.steps = s;
    }
    let (warm, vocab) = if no_warmup {
        (None, Vocab::build(catalog.vocabulary.iter().cloned()))
    } else {
        let (model, vocab) = load_checkpoint(&cfg.paths.sft_checkpoint)?;
        (Some(model), vocab)
    };
    let hash = cfg.hash()?;
    let mut log = open_metrics(&cfg.paths.metrics, true)?;
    let out = trainer::run_training(&t, &catalog, &workload, &index, &vocab, warm, |m| {
        let line = serde_json::json!({
            "kind": "grpo", "step": m.step, "mean_reward": m.mean_reward,
            "valid_frac": m.valid_frac, "mean_kl": m.mean_kl,
            "clip_frac": m.clip_frac, "loss": m.loss, "config": hash,
        });
        let _ = writeln!(log, "{line}");
    })?;
    save_checkpoint(&cfg.paths.grpo_checkpoint, &out.model, &vocab)?;
    if let Some(last) = out.metrics.last() {
        println!(
            "grpo: {} steps, mean reward {:.4}, valid {:.2}%, checkpoint {}",
            out.metrics.len(),
            last.mean_reward,
            100.0 * last.valid_frac,
            cfg.paths.grpo_checkpoint.display()
        );
    }
    Ok(())
}

fn open_metrics(path: &Path, append: bool) -> Result<std::fs::File> {
    Ok(std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)?)
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    runs: Option<usize>,
    temperature: Option<f64>,
    format: &str,
    out: Option<&Path>,
) -> Result<()> {
    let catalog = catalog::load_catalog(&cfg.paths.catalog)?;
    let workload = catalog::load_workload(&cfg.paths.holdout)?;
    let index = build_index(&catalog)?;
    let mut ecfg = cfg.eval.clone();
    if let Some(r) = runs {
        ecfg.runs = r;
    }
    if let Some(t) = temperature {
        ecfg.temperature = t;
    }
    let mut systems = Vec::new();
    let (sys, _) = evaluate_system(
        "identity",
        identity_generator(),
        &workload,
        &index,
        &catalog,
        &ecfg,
    )?;
    systems.push(sys);
    let (sys, _) = evaluate_system(
        "lexical",
        |_, _, q: &catalog::WorkQuery| {
            Ok(Some(lexical_neighbor_baseline(&q.tokens, &index, &catalog, 3)))
        },
        &workload,
        &index,
        &catalog,
        &ecfg,
    )?;
    systems.push(sys);
    for path in checkpoints {
        let (model, vocab) = load_checkpoint(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let opts = ExpandOptions {
            temperature: ecfg.temperature,
            seed: ecfg.seed,
            greedy: false,
            max_new_tokens: cfg.train.max_new_tokens,
            gate: cfg.train.gate.clone(),
        };
        let gen = eval::policy_generator(&model, &vocab, &catalog, &index, opts);
        let (sys, _) = evaluate_system(&name, gen, &workload, &index, &catalog, &ecfg)?;
        systems.push(sys);
    }
    let report = EvalReport {
        version: eval::REPORT_VERSION,
        systems,
    };
    let fmt: ReportFormat = format.parse()?;
    print!("{}", eval::format_report(&report, fmt)?);
    let out_path = out.unwrap_or(&cfg.paths.report);
    eval::emit_report(&report, out_path, fmt)?;
    Ok(())
}

fn read_queries(
    query: Option<String>,
    query_file: Option<PathBuf>,
) -> Result<Vec<Vec<String>>> {
    let lines: Vec<String> = match (query, query_file) {
        (Some(q), None) => vec![q],
        (None, Some(f)) => std::fs::read_to_string(f)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.to_string())
            .collect(),
        _ => {
            return Err(Error::Config(
                "provide exactly one of --query / --query-file".into(),
            ))
        }
    };
    Ok(lines
        .iter()
        .map(|l| l.split_whitespace().map(|t| t.to_lowercase()).collect())
        .collect())
}

fn cmd_expand(
    cfg: &RunConfig,
    checkpoint: &Path,
    query: Option<String>,
    query_file: Option<PathBuf>,
    temperature: Option<f64>,
    greedy: bool,
    raw: bool,
) -> Result<()> {
    let (model, vocab) = load_checkpoint(checkpoint)?;
    let catalog = catalog::load_catalog(&cfg.paths.catalog)?;
    let index = build_index(&catalog)?;
    let opts = ExpandOptions {
        temperature: temperature.unwrap_or(cfg.eval.temperature),
        seed: cfg.eval.seed,
        greedy,
        max_new_tokens: cfg.train.max_new_tokens,
        gate: cfg.train.gate.clone(),
    };
    for q in read_queries(query, query_file)? {
        let (text, set) = eval::policy_expand_raw(&model, &vocab, &catalog, &index, &q, &opts)?;
        let mut line = match set {
            Some(s) => serde_json::json!({
                "query": q.join(" "),
                "valid": true,
                "expansions": s.expansions.iter().map(|e| e.join(" ")).collect::<Vec<_>>(),
            }),
            None => serde_json::json!({"query": q.join(" "), "valid": false, "expansions": []}),
        };
        if raw {
            line["raw"] = serde_json::Value::String(text);
        }
        println!("{line}");
    }
    Ok(())
}

fn cmd_cache(cfg: &RunConfig, checkpoint: &Path, query_file: &Path, out: &Path) -> Result<()> {
    let (model, vocab) = load_checkpoint(checkpoint)?;
    let catalog = catalog::load_catalog(&cfg.paths.catalog)?;
    let index = build_index(&catalog)?;
    let ckpt_hash: String = Sha256::digest(std::fs::read(checkpoint)?)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(
        w,
        "{}",
        serde_json::json!({"format_version": 1, "kind": "expansion_cache",
                           "checkpoint_sha256": ckpt_hash, "created_unix": created})
    )?;
    let opts = ExpandOptions {
        temperature: 1.0,
        seed: 0,
        greedy: true,
        max_new_tokens: cfg.train.max_new_tokens,
        gate: cfg.train.gate.clone(),
    };
    let mut n = 0usize;
    for q in read_queries(None, Some(query_file.to_path_buf()))? {
        let set = eval::policy_expand(&model, &vocab, &catalog, &index, &q, &opts)?;
        let expansions: Vec<String> = set
            .map(|s| s.expansions.iter().map(|e| e.join(" ")).collect())
            .unwrap_or_default();
        writeln!(
            w,
            "{}",
            serde_json::json!({"query": q.join(" "), "expansions": expansions})
        )?;
        n += 1;
    }
    println!("cached {n} queries to {}", out.display());
    Ok(())
}
