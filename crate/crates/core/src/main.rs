use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dyntree::aggregate::EntityKind;
use dyntree::eval::{timeline_report, Granularity};
use dyntree::ingest::{ErrorPolicy, EventStream, Format, Source};
use dyntree::oracle::{generate_synthetic, SynthConfig};
use dyntree::pipeline::{self, BenchConfig, PipelineConfig, PipelineError, EVENTS_FILE};

#[derive(Parser)]
#[command(name = "dyntree", version, about = "Time-windowed rating aggregation, fallback-tree features and combiner evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse input files into a normalized, day-sorted events.csv.
    Ingest(ConfigArgs),
    /// Per-entity daily counts and sums from events.csv.
    Aggregate(ConfigArgs),
    /// Fallback-tree feature files, one per setting.
    Features(ConfigArgs),
    /// Fit one logistic combiner per setting.
    Train(ConfigArgs),
    /// Per-category AUC, rankings and the warm/cold portfolio.
    Evaluate(ConfigArgs),
    /// AUC of every single tree/window feature on the test split.
    Dissect(ConfigArgs),
    /// Warm/cold AUC breakdown only.
    Portfolio(ConfigArgs),
    /// Count and average rating per time bucket for one entity.
    Timeline(TimelineArgs),
    /// Generate a synthetic ratings csv.
    Synth(SynthArgs),
    /// Compare indexed and naive window aggregation.
    Bench(BenchArgs),
    /// All stages, then summary.json and manifest.json.
    Run(ConfigArgs),
    /// Print the effective configuration as TOML.
    Config(ConfigArgs),
}

#[derive(Args, Clone, Debug)]
struct ConfigArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input file (repeatable); replaces inputs from the config file.
    #[arg(long = "input", short = 'i')]
    inputs: Vec<PathBuf>,
    /// Format of --input files.
    #[arg(long, default_value = "csv")]
    format: Format,
    /// --input csv files start with a header line.
    #[arg(long)]
    has_header: bool,
    /// Fallback category for --input jsonl records without one.
    #[arg(long)]
    category: Option<String>,
    #[arg(long, short = 'o')]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated settings, e.g. S1,S4.
    #[arg(long, value_delimiter = ',')]
    settings: Option<Vec<String>>,
    /// Comma-separated windows, e.g. 7d,30d,life.
    #[arg(long, value_delimiter = ',')]
    windows: Option<Vec<String>>,
    #[arg(long)]
    default_value: Option<f64>,
    #[arg(long)]
    error_policy: Option<ErrorPolicy>,
    #[arg(long)]
    category_filter: Option<String>,
    #[arg(long)]
    valid_start: Option<u32>,
    #[arg(long)]
    test_start: Option<u32>,
    #[arg(long)]
    test_end: Option<u32>,
    /// Skip combiner training and scored reports.
    #[arg(long)]
    no_train: bool,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::from_toml_file(path)?,
            None => PipelineConfig::default(),
        };
        if !self.inputs.is_empty() {
            cfg.inputs = self
                .inputs
                .iter()
                .map(|p| Source {
                    path: p.clone(),
                    format: self.format,
                    has_header: self.has_header,
                    category: self.category.clone(),
                })
                .collect();
        }
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(self.output_dir => cfg.output_dir);
        set!(self.seed => cfg.seed);
        set!(self.settings => cfg.settings);
        set!(self.windows => cfg.windows);
        set!(self.default_value => cfg.default_value);
        set!(self.error_policy => cfg.error_policy);
        set!(self.valid_start => cfg.split.valid_start_day);
        set!(self.test_start => cfg.split.test_start_day);
        set!(self.test_end => cfg.split.test_end_day);
        set!(self.learning_rate => cfg.combiner.learning_rate);
        set!(self.l2 => cfg.combiner.l2);
        set!(self.max_epochs => cfg.combiner.max_epochs);
        set!(self.patience => cfg.combiner.patience);
        if self.category_filter.is_some() {
            cfg.category_filter = self.category_filter.clone();
        }
        if self.no_train {
            cfg.train = false;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TimelineArgs {
    /// Directory holding events.csv from a previous ingest.
    #[arg(long, short = 'o', default_value = "out")]
    output_dir: PathBuf,
    #[arg(long, default_value = "user")]
    kind: EntityKind,
    /// Entity name; ignored for the global kind.
    #[arg(long, default_value = "")]
    entity: String,
    #[arg(long, default_value = "monthly")]
    granularity: Granularity,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with generator parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, short = 'o')]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_events: Option<usize>,
    #[arg(long)]
    n_users: Option<usize>,
    #[arg(long)]
    n_products: Option<usize>,
    #[arg(long)]
    user_weight: Option<f64>,
    #[arg(long)]
    product_weight: Option<f64>,
    #[arg(long)]
    cold_start_fraction: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 50)]
    density: usize,
    #[arg(long, default_value_t = 100)]
    entities: usize,
    #[arg(long, default_value_t = 365)]
    days: u32,
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn validated(args: &ConfigArgs) -> Result<(PipelineConfig, pipeline::Resolved), PipelineError> {
    let cfg = args.resolve()?;
    let resolved = cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| PipelineError::Validation(format!("cannot create {}: {e}", cfg.output_dir.display())))?;
    Ok((cfg, resolved))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Validation(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn timeline(args: &TimelineArgs) -> Result<(), PipelineError> {
    let runtime = |message: String| PipelineError::Stage {
        stage: "timeline",
        message,
        partial: false,
    };
    let stream = EventStream::read_csv_file(&args.output_dir.join(EVENTS_FILE), true).map_err(|e| runtime(e.to_string()))?;
    let names = match args.kind {
        EntityKind::User => Some(stream.users()),
        EntityKind::Product => Some(stream.products()),
        EntityKind::Category => Some(stream.categories()),
        EntityKind::Global => None,
    };
    let entity = match names {
        None => 0,
        Some(table) => table
            .get(&args.entity)
            .ok_or_else(|| PipelineError::Validation(format!("unknown {} '{}'", args.kind.as_str(), args.entity)))?,
    };
    let buckets = timeline_report(&stream, args.kind, entity, args.granularity);
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    for b in &buckets {
        w.serialize(b).map_err(|e| runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| runtime(e.to_string()))
}

fn synth(args: &SynthArgs) -> Result<(), PipelineError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| PipelineError::Validation(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| PipelineError::Validation(e.to_string()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.n_events {
        cfg.n_events = v;
    }
    if let Some(v) = args.n_users {
        cfg.n_users = v;
    }
    if let Some(v) = args.n_products {
        cfg.n_products = v;
    }
    if let Some(v) = args.user_weight {
        cfg.user_bias_weight = v;
    }
    if let Some(v) = args.product_weight {
        cfg.product_bias_weight = v;
    }
    if let Some(v) = args.cold_start_fraction {
        cfg.cold_start_fraction = v;
    }
    let stream = generate_synthetic(&cfg).map_err(|e| PipelineError::Validation(e.to_string()))?;
    write_events(&args.out, &stream)
}

fn write_events(path: &Path, stream: &EventStream) -> Result<(), PipelineError> {
    let runtime = |message: String| PipelineError::Stage {
        stage: "synth",
        message,
        partial: false,
    };
    let file = fs::File::create(path).map_err(|e| runtime(format!("cannot create {}: {e}", path.display())))?;
    stream
        .write_csv(io::BufWriter::new(file), false)
        .map_err(|e| runtime(e.to_string()))?;
    eprintln!("wrote {} events to {}", stream.len(), path.display());
    Ok(())
}

fn dispatch(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Ingest(a) => {
            let cfg = a.resolve()?;
            cfg.validate()?;
            if cfg.inputs.is_empty() {
                return Err(PipelineError::Validation("no input files configured".into()));
            }
            fs::create_dir_all(&cfg.output_dir)
                .map_err(|e| PipelineError::Validation(format!("cannot create {}: {e}", cfg.output_dir.display())))?;
            print_json(&pipeline::stage_ingest(&cfg)?)
        }
        Command::Aggregate(a) => {
            let (cfg, _) = validated(&a)?;
            let rows = pipeline::stage_aggregate(&cfg.output_dir)?;
            eprintln!("wrote {rows} daily aggregate rows");
            Ok(())
        }
        Command::Features(a) => {
            let (cfg, r) = validated(&a)?;
            for (setting, rows) in pipeline::stage_features(&cfg, &r)? {
                eprintln!("{setting}: {rows} rows");
            }
            Ok(())
        }
        Command::Train(a) => {
            let (cfg, r) = validated(&a)?;
            for (setting, model) in pipeline::stage_train(&cfg, &r)? {
                eprintln!(
                    "{setting}: best epoch {} of {}",
                    model.meta.best_epoch, model.meta.epochs_run
                );
            }
            Ok(())
        }
        Command::Evaluate(a) => {
            let (cfg, r) = validated(&a)?;
            print_json(&pipeline::stage_evaluate(&cfg, &r)?)
        }
        Command::Dissect(a) => {
            let (cfg, r) = validated(&a)?;
            print_json(&pipeline::stage_dissect(&cfg, &r)?)
        }
        Command::Portfolio(a) => {
            let (cfg, r) = validated(&a)?;
            print_json(&pipeline::stage_portfolio(&cfg, &r)?)
        }
        Command::Timeline(a) => timeline(&a),
        Command::Synth(a) => synth(&a),
        Command::Bench(a) => {
            let report = pipeline::bench_aggregation(&BenchConfig {
                density: a.density,
                n_entities: a.entities,
                n_days: a.days,
                n_queries: a.queries,
                seed: a.seed,
            });
            print_json(&report)
        }
        Command::Run(a) => {
            let cfg = a.resolve()?;
            let manifest = pipeline::run_pipeline(&cfg)?;
            eprintln!("{} artifacts in {}", manifest.artifacts.len(), cfg.output_dir.display());
            Ok(())
        }
        Command::Config(a) => {
            let cfg = a.resolve()?;
            cfg.validate()?;
            print!("{}", cfg.to_toml());
            io::stdout().flush().ok();
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
