//! `hgib` command-line tool: ingest, synth, train, eval, diagnose.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error,
//! 3 numerical failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hgib::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use hgib::data::{
    generate_synthetic, leave_one_out_split, load_dataset, read_bundle, write_bundle, write_synthetic, DatasetManifest,
    SplitDataset, SynthConfig,
};
use hgib::eval::{diagnose_hierarchy, rank_metrics, RankingOptions};
use hgib::gre::Mode;
use hgib::model::forward;
use hgib::report::write_json_atomic;
use hgib::trainer::{fit_with, TrainConfig};
use hgib::HgibError;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "hgib", version, about = "Hierarchical graph information bottleneck recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a dataset manifest, split it and write a binary bundle.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed for tie-breaking when timestamps are missing.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a dataset bundle.
    Train(TrainArgs),
    /// Rank held-out test items and print HR@k / NDCG@k as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Also write the metrics JSON to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Information abundance of every encoder stage.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a clustered synthetic view/cart/buy dataset.
    Synth {
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 5)]
        clusters: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON run config; omitted keys take their defaults, unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss breakdown as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    no_pres: bool,
    #[arg(long)]
    no_comp: bool,
    #[arg(long)]
    no_gre: bool,
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<HgibError> for Failure {
    fn from(e: HgibError) -> Self {
        match e {
            HgibError::NonFinite { .. } | HgibError::Shape { .. } => Failure::Numerical(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

type CliResult<T> = Result<T, Failure>;

/// `HGIB_THREADS`, when set, caps evaluation parallelism.
fn env_threads() -> CliResult<Option<usize>> {
    match std::env::var("HGIB_THREADS") {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::Usage(format!("HGIB_THREADS must be a positive integer, got {s:?}"))),
        },
    }
}

fn read_config(path: &Path) -> CliResult<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let config: TrainConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        Failure::Usage(format!("{}: field `{field}`: {}", path.display(), e.inner()))
    })?;
    de.end().map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(config)
}

fn check_compatible(ck: &Checkpoint, data: &SplitDataset) -> CliResult<()> {
    let h = &ck.header;
    if h.num_users != data.num_users || h.num_items != data.num_items {
        return Err(Failure::Data(format!(
            "model is for {} users x {} items, dataset has {} x {}",
            h.num_users, h.num_items, data.num_users, data.num_items
        )));
    }
    if h.behaviors != data.schema.names() || h.target != data.schema.target_name() {
        return Err(Failure::Data(format!(
            "model behaviors {:?} (target {}) differ from dataset {:?} (target {})",
            h.behaviors,
            h.target,
            data.schema.names(),
            data.schema.target_name()
        )));
    }
    Ok(())
}

fn ingest(manifest: &Path, out: &Path, seed: u64) -> CliResult<()> {
    let raw = load_dataset(&DatasetManifest::read(manifest)?)?;
    let split = leave_one_out_split(&raw, seed)?;
    write_bundle(&split, out)?;
    let counts: Vec<String> = split.train.iter().zip(split.schema.names()).map(|(g, n)| format!("{n}={}", g.num_edges())).collect();
    println!(
        "ingested {} users, {} items, train edges {}, test {}, validation {} -> {}",
        split.num_users,
        split.num_items,
        counts.join(" "),
        split.test.len(),
        split.validation.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    model: &'a Path,
    epochs: usize,
    best_epoch: usize,
    best_val_hr: Option<f64>,
    best_val_ndcg: Option<f64>,
    seed: u64,
    config: &'a TrainConfig,
}

fn train(args: &TrainArgs) -> CliResult<()> {
    let mut config = match &args.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.no_pres |= args.no_pres;
    config.no_comp |= args.no_comp;
    config.no_gre |= args.no_gre;
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    // Thread count never changes results, so it stays out of the stored config.
    let run_config = TrainConfig { eval_threads: env_threads()?.unwrap_or(config.eval_threads), ..config };
    let data = read_bundle(&args.data)?;

    let mut log = match &args.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| io_failure(p, e))?)),
        None => None,
    };
    let fit = fit_with::<f64>(&data, &run_config, |record| {
        log::info!("epoch {} total {:.6} val_hr {:?}", record.epoch, record.total, record.val_hr);
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(record)?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| HgibError::Data(format!("writing log: {e}")))?;
        }
        Ok(())
    })?;
    save_checkpoint(&args.out, &fit.params, &data.schema, &config, fit.best_epoch)?;
    let summary = TrainSummary {
        model: &args.out,
        epochs: fit.log.len(),
        best_epoch: fit.best_epoch,
        best_val_hr: fit.best_validation.map(|v| v.hr),
        best_val_ndcg: fit.best_validation.map(|v| v.ndcg),
        seed: config.seed,
        config: &config,
    };
    println!("{}", serde_json::to_string(&summary).map_err(HgibError::from)?);
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    k: usize,
    hr: f64,
    ndcg: f64,
    users: usize,
    seed: u64,
    config: &'a TrainConfig,
}

fn eval(model: &Path, data: &Path, k: usize, report: Option<&Path>) -> CliResult<()> {
    if k == 0 {
        return Err(Failure::Usage("--k must be at least 1".into()));
    }
    let ck = load_checkpoint(model)?;
    let data = read_bundle(data)?;
    check_compatible(&ck, &data)?;
    let config = &ck.header.config;
    let h = data.hierarchy()?;
    let out = forward(&ck.params, &h, &config.model_config(Mode::Eval), None)?;
    let threads = env_threads()?.unwrap_or(1);
    let m = rank_metrics(&out, &data.test, data.target_train(), RankingOptions { k, include_train: false, threads })?;
    let r = EvalReport { k: m.k, hr: m.hr, ndcg: m.ndcg, users: m.users, seed: config.seed, config };
    println!("{}", serde_json::to_string(&r).map_err(HgibError::from)?);
    if let Some(p) = report {
        write_json_atomic(p, &r)?;
        eprintln!("HR@{k} {:.4} NDCG@{k} {:.4} over {} users -> {}", r.hr, r.ndcg, r.users, p.display());
    }
    Ok(())
}

fn diagnose(model: &Path, data: &Path) -> CliResult<()> {
    let ck = load_checkpoint(model)?;
    let data = read_bundle(data)?;
    check_compatible(&ck, &data)?;
    let h = data.hierarchy()?;
    let out = forward(&ck.params, &h, &ck.header.config.model_config(Mode::Eval), None)?;
    let stages = diagnose_hierarchy(&out, &data.schema)?;
    let width = stages.iter().map(|s| s.stage.chars().count()).max().unwrap_or(5).max(5);
    println!("{:<width$}  IA", "stage");
    for s in &stages {
        let pad = width - s.stage.chars().count();
        println!("{}{}  {:.4}", s.stage, " ".repeat(pad), s.ia);
    }
    Ok(())
}

fn synth(config: SynthConfig, out: &Path) -> CliResult<()> {
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let data = generate_synthetic(&config)?;
    let manifest = write_synthetic(&data, out)?;
    println!(
        "synthetic view={} cart={} buy={} (noise {}) -> {}",
        data.view.len(),
        data.cart.len(),
        data.buy.len(),
        data.noise.len(),
        manifest.display()
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Ingest { manifest, out, seed } => ingest(&manifest, &out, seed),
        Command::Train(args) => train(&args),
        Command::Eval { model, data, k, report } => eval(&model, &data, k, report.as_deref()),
        Command::Diagnose { model, data } => diagnose(&model, &data),
        Command::Synth { users, items, clusters, noise, seed, out } => synth(
            SynthConfig { num_users: users, num_items: items, num_clusters: clusters, noise_rate: noise, seed },
            &out,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(3)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn config_file_defaults_missing_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"beta": 10}"#).unwrap();
        let c = read_config(&p).ok().unwrap();
        assert_eq!(c, TrainConfig { beta: 10.0, ..TrainConfig::default() });
    }

    #[test]
    fn nested_errors_report_their_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"kernel": "cubic"}"#).unwrap();
        match read_config(&p) {
            Err(Failure::Usage(m)) => assert!(m.contains("field `kernel`"), "{m}"),
            _ => panic!("expected a usage failure"),
        }
    }

    #[test]
    fn numerical_errors_map_to_their_own_code() {
        assert!(matches!(Failure::from(HgibError::NonFinite { op: "matmul" }), Failure::Numerical(_)));
        assert!(matches!(Failure::from(HgibError::Data("x".into())), Failure::Data(_)));
    }
}
