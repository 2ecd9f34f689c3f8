//! `uae` — train and query a learned cardinality estimator from the shell.
//!
//! The pipeline is: `ingest` a CSV into a dictionary-encoded table,
//! `gen-workload` to synthesize labeled queries, `train` a model (data-only,
//! query-only, or hybrid), then `estimate`/`eval` selectivities or `refine`
//! an existing model on new rows or a shifted workload.
//!
//! Exit codes: 0 on success, 2 for validation problems (bad flags, malformed
//! files, mismatched schemas), 3 for runtime failures (I/O, numerics).
//! `UAE_THREADS` caps the worker pool used by parallel estimation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use uae_core::data::{read_csv_tuples, CsvOptions, EncodedTable};
use uae_core::eval::{evaluate, write_query_csv, ErrorReport};
use uae_core::model::{ModelConfig, ResMadeModel};
use uae_core::sampler::{progressive_sample_estimate, SamplerConfig};
use uae_core::trainer::{
    hybrid_train, incremental_ingest_data, incremental_ingest_workload, rng_stream,
    write_training_log, TrainMode, TrainingConfig,
};
use uae_core::workload::{
    generate_workload, read_queries, read_workload, to_region, write_workload, WorkloadSpec,
};
use uae_core::{Error, Result};

#[derive(Parser)]
#[command(name = "uae", version, about = "Learned cardinality estimation over single tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a CSV file into a binary table with per-column dictionaries.
    Ingest(IngestArgs),
    /// Generate a labeled workload (train / in-workload test / random test).
    GenWorkload(GenWorkloadArgs),
    /// Train a model on a table and, optionally, a labeled workload.
    Train(TrainArgs),
    /// Estimate selectivities for a file of queries.
    Estimate(EstimateArgs),
    /// Evaluate q-error statistics against labeled queries.
    Eval(EvalArgs),
    /// Continue training an existing model on new rows or a new workload.
    Refine(RefineArgs),
}

#[derive(Args)]
struct CsvFlags {
    /// Field delimiter (single ASCII character).
    #[arg(long, default_value = ",")]
    delimiter: char,
    /// Treat the first row as data, not column names.
    #[arg(long)]
    no_header: bool,
    /// Comma-separated zero-based indices of numeric columns, e.g. "0,3,7".
    #[arg(long)]
    numeric_columns: Option<String>,
}

impl CsvFlags {
    fn options(&self) -> Result<CsvOptions> {
        if !self.delimiter.is_ascii() {
            return Err(Error::Config(format!("delimiter {:?} is not ASCII", self.delimiter)));
        }
        let numeric_columns = match &self.numeric_columns {
            None => Vec::new(),
            Some(spec) => spec
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad column index '{s}'")))
                })
                .collect::<Result<Vec<usize>>>()?,
        };
        Ok(CsvOptions { header: !self.no_header, delimiter: self.delimiter as u8, numeric_columns })
    }
}

#[derive(Args)]
struct IngestArgs {
    /// Input CSV file.
    #[arg(long)]
    csv: PathBuf,
    #[command(flatten)]
    csv_flags: CsvFlags,
    /// Output table file (binary).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenWorkloadArgs {
    /// Encoded table file.
    #[arg(long)]
    table: PathBuf,
    /// Column carrying the range predicate in every in-workload query.
    #[arg(long)]
    bounded_column: String,
    /// Fraction of the bounded column's distinct values per range.
    #[arg(long, default_value_t = 0.01)]
    target_volume: f64,
    /// Minimum number of extra filters per query.
    #[arg(long, default_value_t = 1)]
    filters_min: usize,
    #[arg(long, default_value_t = 20000)]
    train_count: usize,
    #[arg(long, default_value_t = 2000)]
    test_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output stem: writes {out}.train.jsonl, {out}.test_in.jsonl,
    /// {out}.test_random.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Likelihood training on tuples only.
    Data,
    /// Q-error training on labeled queries only.
    Query,
    /// Both losses on one model.
    Hybrid,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> TrainMode {
        match m {
            Mode::Data => TrainMode::DataOnly,
            Mode::Query => TrainMode::QueryOnly,
            Mode::Hybrid => TrainMode::Hybrid,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    table: PathBuf,
    /// Labeled workload (required outside data mode).
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Hybrid)]
    mode: Mode,
    /// Query-loss weight in the hybrid objective.
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    /// Gumbel-Softmax temperature.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Progressive samples per query.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    /// Rows per data batch.
    #[arg(long, default_value_t = 512)]
    batch: usize,
    /// Queries per query batch.
    #[arg(long, default_value_t = 64)]
    query_batch: usize,
    #[arg(long, default_value_t = 2)]
    hidden_layers: usize,
    #[arg(long, default_value_t = 128)]
    hidden_units: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model file; checkpoints land next to it as {stem}.epNN.uae
    /// and the step log as {stem}.train.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Table file; used for its dictionaries (no data is scanned).
    #[arg(long)]
    table: PathBuf,
    /// Queries as JSON lines; "card" fields are ignored if present.
    #[arg(long)]
    workload: PathBuf,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record wall-clock latency per query (off keeps output reproducible).
    #[arg(long)]
    timing: bool,
    /// Output CSV of per-query estimates.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    table: PathBuf,
    /// Labeled queries as JSON lines.
    #[arg(long)]
    workload: PathBuf,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    timing: bool,
    /// Output CSV of per-query results (summary goes to stdout).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RefineArgs {
    /// Model to start from.
    #[arg(long)]
    model: PathBuf,
    /// The table the model was trained on (for its dictionaries).
    #[arg(long)]
    table: PathBuf,
    /// CSV of new rows (data-only refinement). Column kinds and names come
    /// from the table.
    #[arg(long)]
    new_data: Option<PathBuf>,
    /// Labeled queries (query-only refinement).
    #[arg(long)]
    new_workload: Option<PathBuf>,
    #[command(flatten)]
    csv_flags: CsvFlags,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    query_batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("UAE_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: UAE_THREADS must be a positive integer, got '{threads}'");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::GenWorkload(args) => cmd_gen_workload(args),
        Command::Train(args) => cmd_train(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Refine(args) => cmd_refine(args),
    }
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let table = EncodedTable::ingest_csv(&args.csv, &args.csv_flags.options()?)?;
    table.save(&args.out)?;
    println!(
        "ingested {} rows × {} columns into {}",
        table.row_count(),
        table.col_count(),
        args.out.display()
    );
    Ok(())
}

fn suite_path(stem: &Path, suite: &str) -> PathBuf {
    PathBuf::from(format!("{}.{suite}.jsonl", stem.display()))
}

fn cmd_gen_workload(args: GenWorkloadArgs) -> Result<()> {
    let table = EncodedTable::load(&args.table)?;
    let spec = WorkloadSpec {
        bounded_column: args.bounded_column,
        target_volume: args.target_volume,
        n_filters_min: args.filters_min,
        train_count: args.train_count,
        test_count: args.test_count,
        seed: args.seed,
    };
    let w = generate_workload(&table, &spec)?;
    for (suite, queries) in
        [("train", &w.train), ("test_in", &w.test_in), ("test_random", &w.test_random)]
    {
        let path = suite_path(&args.out, suite);
        write_workload(&path, queries)?;
        println!("{suite}: {} queries → {}", queries.len(), path.display());
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let table = EncodedTable::load(&args.table)?;
    let workload = match &args.workload {
        Some(path) => read_workload(path)?,
        None => Vec::new(),
    };
    let mut model = ResMadeModel::build(
        ModelConfig {
            hidden_layers: args.hidden_layers,
            hidden_units: args.hidden_units,
            ordering: Vec::new(),
            residual: true,
            seed: args.seed,
        },
        &table,
    )?;
    let config = TrainingConfig {
        lambda: args.lambda,
        data_batch: args.batch,
        query_batch: args.query_batch,
        epochs: args.epochs,
        lr: args.lr,
        mode: args.mode.into(),
        sampler: SamplerConfig { tau: args.tau, samples: args.samples, seed: args.seed },
        seed: args.seed,
    };
    let started = Instant::now();
    let records = hybrid_train(&mut model, &table, &workload, &config, Some(&args.out))?;
    model.save(&args.out)?;
    let log_path = args.out.with_extension("train.csv");
    write_training_log(&log_path, &records)?;
    if let Some(last) = records.last() {
        println!(
            "trained {} steps in {:.1}s (final loss {:.6}, data {:.6}, query {:.6})",
            last.step,
            started.elapsed().as_secs_f64(),
            last.loss,
            last.data_loss,
            last.query_loss
        );
    }
    println!("model → {}  log → {}", args.out.display(), log_path.display());
    Ok(())
}

fn load_model_for(table: &EncodedTable, path: &Path) -> Result<ResMadeModel> {
    let model = ResMadeModel::load(path)?;
    if model.dict_hash != table.dict_hash() {
        return Err(Error::Dictionary(
            "model was trained on different dictionaries than this table".into(),
        ));
    }
    Ok(model)
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    use std::io::Write;

    let table = EncodedTable::load(&args.table)?;
    let model = load_model_for(&table, &args.model)?;
    let queries = read_queries(&args.workload)?;
    if queries.is_empty() {
        return Err(Error::Config("no queries to estimate".into()));
    }
    let rows = model.row_count as f64;

    let estimates: Vec<(f64, f64)> = queries
        .par_iter()
        .enumerate()
        .map(|(i, query)| -> Result<(f64, f64)> {
            let started = args.timing.then(Instant::now);
            let region = to_region(query, &table.columns)?;
            let sel = if region.is_empty() {
                0.0
            } else {
                let mut rng = rng_stream(args.seed, 1000 + i as u64);
                progressive_sample_estimate(&model, &region, args.samples, &mut rng)?
            };
            Ok((sel, started.map_or(0.0, |t| t.elapsed().as_secs_f64() * 1e3)))
        })
        .collect::<Result<_>>()?;

    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    writeln!(out, "query,est_sel,est_card,millis")?;
    for (i, (sel, millis)) in estimates.iter().enumerate() {
        writeln!(out, "{i},{sel:?},{:?},{millis:?}", sel * rows)?;
    }
    out.flush()?;
    println!("estimated {} queries → {}", estimates.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let table = EncodedTable::load(&args.table)?;
    let model = load_model_for(&table, &args.model)?;
    let workload = read_workload(&args.workload)?;
    let (report, per_query) =
        evaluate(&model, &workload, &table.columns, args.samples, args.seed, args.timing)?;
    write_query_csv(&args.out, &per_query)?;
    println!("{report}");
    println!("{}", ErrorReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

fn cmd_refine(args: RefineArgs) -> Result<()> {
    let table = EncodedTable::load(&args.table)?;
    let mut model = load_model_for(&table, &args.model)?;
    let config = TrainingConfig {
        data_batch: args.batch,
        query_batch: args.query_batch,
        epochs: args.epochs,
        lr: args.lr,
        sampler: SamplerConfig { tau: args.tau, samples: args.samples, seed: args.seed },
        seed: args.seed,
        ..TrainingConfig::default()
    };

    let records = match (&args.new_data, &args.new_workload) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "refine takes either --new-data or --new-workload, not both".into(),
            ))
        }
        (None, None) => {
            return Err(Error::Config("nothing to refine: pass --new-data or --new-workload".into()))
        }
        (Some(csv), None) => {
            let mut options = args.csv_flags.options()?;
            // Column kinds come from the table, not from flags.
            options.numeric_columns = (0..table.col_count())
                .filter(|&c| table.columns[c].kind == uae_core::data::ColumnKind::Numeric)
                .collect();
            let (names, tuples) = read_csv_tuples(csv, &options)?;
            if !names.is_empty() {
                let expected: Vec<&str> =
                    table.columns.iter().map(|c| c.name.as_str()).collect();
                if names != expected {
                    return Err(Error::Config(format!(
                        "new data columns {names:?} do not match the table's {expected:?}"
                    )));
                }
            }
            let codes = table.encode_tuples(&tuples)?;
            incremental_ingest_data(&mut model, &codes, &config)?
        }
        (None, Some(path)) => {
            let queries = read_workload(path)?;
            incremental_ingest_workload(&mut model, &queries, &table.columns, &config)?
        }
    };

    model.save(&args.out)?;
    let log_path = args.out.with_extension("train.csv");
    write_training_log(&log_path, &records)?;
    println!(
        "refined for {} steps; model → {}  log → {}",
        records.len(),
        args.out.display(),
        log_path.display()
    );
    Ok(())
}
