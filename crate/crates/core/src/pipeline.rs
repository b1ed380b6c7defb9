//! End-to-end pipeline: config, stages, artifacts and the manifest.
//!
//! Stages and the files they exchange (all under `output_dir`):
//!
//! | stage | reads | writes |
//! |-------|-------|--------|
//! | ingest | input files | `events.csv` |
//! | aggregate | `events.csv` | `aggregates.csv` |
//! | features | `events.csv`, `aggregates.csv` | `features_<S>.csv` |
//! | train | `features_<S>.csv` | `model_<S>.json` |
//! | evaluate | `features_<S>.csv`, `model_<S>.json` | `portfolio.csv`, `category.csv`, `category_rankings.csv` |
//! | dissect | `events.csv`, `aggregates.csv` | `dissection.csv` |
//!
//! `run` executes them in order, then writes `summary.json` and
//! `manifest.json` (path, row count and SHA-256 of every artifact).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aggregate::{
    build_daily_aggregates, build_prefix_index, naive_window_stats, read_aggregates_csv, write_aggregates_csv,
    EntityKind, PrefixIndex, Window,
};
use crate::combiner::{self, Dataset, FitConfig, LinearModel, ModelMeta};
use crate::eval::{
    build_instances, dissection_report, per_category_report, portfolio_report, split_by_time, EvalReport,
    LabeledInstance, SettingScores, Split, SplitConfig, SplitCounts,
};
use crate::ingest::{build_event_stream, Day, ErrorPolicy, EventStream, Interner, Rating, RatingEvent, Source};
use crate::trees::{FeatureVector, Query, Setting, TreeEvaluator, WindowSpec, DEFAULT_VALUE};

pub const EVENTS_FILE: &str = "events.csv";
pub const AGGREGATES_FILE: &str = "aggregates.csv";
pub const DISSECTION_FILE: &str = "dissection.csv";
pub const PORTFOLIO_FILE: &str = "portfolio.csv";
pub const CATEGORY_FILE: &str = "category.csv";
pub const RANKINGS_FILE: &str = "category_rankings.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn features_file(setting: Setting) -> String {
    format!("features_{setting}.csv")
}

pub fn model_file(setting: Setting) -> String {
    format!("model_{setting}.json")
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("stage '{stage}' failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
        /// Some artifacts were written before the failure.
        partial: bool,
    },
}

impl PipelineError {
    /// 1 validation, 2 runtime, 3 runtime with partial artifacts on disk.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 1,
            PipelineError::Stage { partial: false, .. } => 2,
            PipelineError::Stage { partial: true, .. } => 3,
        }
    }
}

fn stage_err(stage: &'static str) -> impl Fn(String) -> PipelineError {
    move |message| PipelineError::Stage {
        stage,
        message,
        partial: false,
    }
}

/// On-disk configuration. Every field has a default and a CLI override.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: Vec<Source>,
    pub split: SplitConfig,
    pub windows: Vec<String>,
    pub default_value: f64,
    pub settings: Vec<String>,
    pub combiner: CombinerSection,
    /// Train and evaluate on one category only.
    pub category_filter: Option<String>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub error_policy: ErrorPolicy,
    /// Fit the combiner and produce scored reports.
    pub train: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombinerSection {
    pub learning_rate: f64,
    pub l2: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for CombinerSection {
    fn default() -> Self {
        let f = FitConfig::default();
        CombinerSection {
            learning_rate: f.learning_rate,
            l2: f.l2,
            max_epochs: f.max_epochs,
            patience: f.patience,
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            inputs: Vec::new(),
            split: SplitConfig::default(),
            windows: WindowSpec::standard().windows().iter().map(|w| w.label()).collect(),
            default_value: DEFAULT_VALUE,
            settings: Setting::ALL.iter().map(|s| s.to_string()).collect(),
            combiner: CombinerSection::default(),
            category_filter: None,
            output_dir: PathBuf::from("out"),
            seed: 42,
            error_policy: ErrorPolicy::Abort,
            train: true,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Validation(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that can be checked without doing work.
    pub fn validate(&self) -> Result<Resolved, PipelineError> {
        let invalid = |m: String| PipelineError::Validation(m);
        let settings = self
            .settings
            .iter()
            .map(|s| s.parse::<Setting>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(invalid)?;
        if settings.is_empty() {
            return Err(invalid("no settings selected".into()));
        }
        let spec = WindowSpec::parse_list(&self.windows).map_err(invalid)?;
        self.split.validate().map_err(|e| invalid(e.to_string()))?;
        if !self.default_value.is_finite() {
            return Err(invalid("default_value must be finite".into()));
        }
        let c = &self.combiner;
        if !(c.learning_rate > 0.0 && c.learning_rate.is_finite()) || !(c.l2 >= 0.0 && c.l2.is_finite()) {
            return Err(invalid("combiner learning_rate must be > 0 and l2 >= 0".into()));
        }
        if c.patience == 0 || c.max_epochs == 0 {
            return Err(invalid("combiner max_epochs and patience must be positive".into()));
        }
        Ok(Resolved {
            settings,
            spec,
            fit: FitConfig {
                learning_rate: c.learning_rate,
                l2: c.l2,
                max_epochs: c.max_epochs,
                patience: c.patience,
                seed: self.seed,
            },
        })
    }

    fn validate_inputs(&self) -> Result<(), PipelineError> {
        if self.inputs.is_empty() {
            return Err(PipelineError::Validation("no input files configured".into()));
        }
        for s in &self.inputs {
            if !s.path.is_file() {
                return Err(PipelineError::Validation(format!("input {} does not exist", s.path.display())));
            }
        }
        Ok(())
    }
}

/// Parsed, validated view of a [`PipelineConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub settings: Vec<Setting>,
    pub spec: WindowSpec,
    pub fit: FitConfig,
}

fn create_csv(path: &Path) -> Result<BufWriter<File>, String> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| format!("cannot create {}: {e}", path.display()))
}

fn load_events(dir: &Path) -> Result<EventStream, String> {
    EventStream::read_csv_file(&dir.join(EVENTS_FILE), true).map_err(|e| e.to_string())
}

fn load_index(dir: &Path, stream: &EventStream) -> Result<PrefixIndex, String> {
    let path = dir.join(AGGREGATES_FILE);
    let file = File::open(&path).map_err(|e| format!("cannot open {}: {e}", path.display()))?;
    let rows = read_aggregates_csv(file, stream).map_err(|e| e.to_string())?;
    Ok(build_prefix_index(&rows))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IngestSummary {
    pub events: usize,
    pub skipped_lines: usize,
    pub day_range: Option<(Day, Day)>,
    pub users: usize,
    pub products: usize,
    pub categories: usize,
}

pub fn stage_ingest(cfg: &PipelineConfig) -> Result<IngestSummary, PipelineError> {
    let err = stage_err("ingest");
    let (stream, report) = build_event_stream(&cfg.inputs, cfg.error_policy).map_err(|e| err(e.to_string()))?;
    let path = cfg.output_dir.join(EVENTS_FILE);
    stream
        .write_csv(create_csv(&path).map_err(&err)?, true)
        .map_err(|e| err(e.to_string()))?;
    Ok(IngestSummary {
        events: stream.len(),
        skipped_lines: report.skipped,
        day_range: stream.day_range(),
        users: stream.users().len(),
        products: stream.products().len(),
        categories: stream.categories().len(),
    })
}

pub fn stage_aggregate(dir: &Path) -> Result<usize, PipelineError> {
    let err = stage_err("aggregate");
    let stream = load_events(dir).map_err(&err)?;
    let rows = build_daily_aggregates(&stream);
    write_aggregates_csv(create_csv(&dir.join(AGGREGATES_FILE)).map_err(&err)?, &rows, &stream)
        .map_err(|e| err(e.to_string()))?;
    Ok(rows.len())
}

/// Header: `user,product,category,day,label,<feature columns>,user_cold,product_cold`.
pub fn write_features_csv<W: Write>(
    writer: W,
    stream: &EventStream,
    instances: &[LabeledInstance],
    setting: Setting,
    spec: &WindowSpec,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["user".to_owned(), "product".into(), "category".into(), "day".into(), "label".into()];
    header.extend(setting.column_names(spec));
    header.extend(["user_cold".to_owned(), "product_cold".into()]);
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for inst in instances {
        record.clear();
        let q = &inst.query;
        record.push(stream.users().name(q.user).unwrap_or_default().to_owned());
        record.push(stream.products().name(q.product).unwrap_or_default().to_owned());
        record.push(stream.categories().name(q.category).unwrap_or_default().to_owned());
        record.push(q.day.to_string());
        record.push(inst.label.to_string());
        record.extend(inst.features.values.iter().map(|v| v.to_string()));
        record.push(u8::from(inst.features.user_cold_start).to_string());
        record.push(u8::from(inst.features.product_cold_start).to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn stage_features(cfg: &PipelineConfig, resolved: &Resolved) -> Result<Vec<(Setting, usize)>, PipelineError> {
    let err = stage_err("features");
    let dir = &cfg.output_dir;
    let stream = load_events(dir).map_err(&err)?;
    let index = load_index(dir, &stream).map_err(&err)?;
    let evaluator = TreeEvaluator::with_default(&index, cfg.default_value);
    let mut out = Vec::new();
    for &setting in &resolved.settings {
        let instances = build_instances(&stream, &evaluator, setting, &resolved.spec, &cfg.split);
        let file = create_csv(&dir.join(features_file(setting))).map_err(&err)?;
        write_features_csv(file, &stream, &instances, setting, &resolved.spec).map_err(|e| err(e.to_string()))?;
        out.push((setting, instances.len()));
    }
    Ok(out)
}

/// A features file read back into memory, with its own intern tables.
#[derive(Clone, Debug)]
pub struct FeatureTable {
    pub setting: Setting,
    pub columns: Vec<String>,
    pub instances: Vec<LabeledInstance>,
    pub categories: Interner,
}

impl FeatureTable {
    pub fn read(path: &Path, setting: Setting, split: &SplitConfig) -> Result<Self, String> {
        let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let header = r.headers().map_err(|e| e.to_string())?.clone();
        let n = header.len();
        if n < 7 || &header[0] != "user" || &header[n - 1] != "product_cold" {
            return Err(format!("{}: not a features file", path.display()));
        }
        let columns: Vec<String> = header.iter().skip(5).take(n - 7).map(str::to_owned).collect();
        let (mut users, mut products, mut categories) = (Interner::new(), Interner::new(), Interner::new());
        let mut instances = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| e.to_string())?;
            let bad = |what: &str| format!("{} row {}: bad {what}", path.display(), i + 2);
            let day: Day = rec[3].parse().map_err(|_| bad("day"))?;
            let label: u8 = rec[4].parse().map_err(|_| bad("label"))?;
            let values = (5..n - 2)
                .map(|k| rec[k].parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad("feature"))?;
            let flag = |k: usize| match &rec[k] {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(bad("cold-start flag")),
            };
            instances.push(LabeledInstance {
                query: Query {
                    user: users.intern(&rec[0]),
                    product: products.intern(&rec[1]),
                    category: categories.intern(&rec[2]),
                    day,
                },
                label,
                split: split.split_of(day),
                features: FeatureVector {
                    setting,
                    values,
                    levels: Vec::new(),
                    user_cold_start: flag(n - 2)?,
                    product_cold_start: flag(n - 1)?,
                },
            });
        }
        Ok(FeatureTable {
            setting,
            columns,
            instances,
            categories,
        })
    }

    /// Instances of `split`, optionally restricted to one category.
    pub fn select(&self, split: Split, category: Option<&str>) -> Vec<LabeledInstance> {
        let cat = category.map(|c| self.categories.get(c));
        self.instances
            .iter()
            .filter(|i| i.split == split)
            .filter(|i| match cat {
                None => true,
                Some(id) => Some(i.query.category) == id,
            })
            .cloned()
            .collect()
    }
}

pub fn stage_train(cfg: &PipelineConfig, resolved: &Resolved) -> Result<Vec<(Setting, LinearModel)>, PipelineError> {
    let err = stage_err("train");
    let mut models = Vec::new();
    for &setting in &resolved.settings {
        let table = FeatureTable::read(&cfg.output_dir.join(features_file(setting)), setting, &cfg.split).map_err(&err)?;
        let filter = cfg.category_filter.as_deref();
        let train = Dataset::from_instances(&table.select(Split::Train, filter), None);
        let valid = Dataset::from_instances(&table.select(Split::Valid, filter), None);
        let meta = ModelMeta {
            setting: Some(setting.to_string()),
            category_filter: cfg.category_filter.clone(),
            feature_names: table.columns.clone(),
            ..ModelMeta::default()
        };
        let model = combiner::fit(&train, &valid, &resolved.fit, meta).map_err(|e| err(format!("{setting}: {e}")))?;
        model
            .save(&cfg.output_dir.join(model_file(setting)))
            .map_err(|e| err(e.to_string()))?;
        models.push((setting, model));
    }
    Ok(models)
}

/// Scores the test split of every setting with its saved model.
fn scored_test_sets(cfg: &PipelineConfig, resolved: &Resolved, stage: &'static str) -> Result<(Vec<SettingScores>, Vec<LabeledInstance>, Interner), PipelineError> {
    let err = stage_err(stage);
    let mut scores = Vec::new();
    let mut keys: Option<(Vec<LabeledInstance>, Interner)> = None;
    for &setting in &resolved.settings {
        let table = FeatureTable::read(&cfg.output_dir.join(features_file(setting)), setting, &cfg.split).map_err(&err)?;
        let model = LinearModel::load(&cfg.output_dir.join(model_file(setting))).map_err(|e| err(e.to_string()))?;
        let test = table.select(Split::Test, cfg.category_filter.as_deref());
        let s = test
            .iter()
            .map(|i| combiner::predict_proba(&model, &i.features.values))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(e.to_string()))?;
        scores.push(SettingScores { setting, scores: s });
        if keys.is_none() {
            keys = Some((test, table.categories.clone()));
        }
    }
    let (instances, categories) = keys.unwrap_or_default();
    Ok((scores, instances, categories))
}

fn write_report(path: &Path, report: &EvalReport, err: &impl Fn(String) -> PipelineError) -> Result<(), PipelineError> {
    report
        .write_csv(create_csv(path).map_err(err)?)
        .map_err(|e| err(e.to_string()))
}

pub fn stage_portfolio(cfg: &PipelineConfig, resolved: &Resolved) -> Result<EvalReport, PipelineError> {
    let err = stage_err("portfolio");
    let (scores, instances, _) = scored_test_sets(cfg, resolved, "portfolio")?;
    let report = portfolio_report(&scores, &instances);
    write_report(&cfg.output_dir.join(PORTFOLIO_FILE), &report, &err)?;
    Ok(report)
}

pub fn stage_evaluate(cfg: &PipelineConfig, resolved: &Resolved) -> Result<EvalReport, PipelineError> {
    let err = stage_err("evaluate");
    let (scores, instances, categories) = scored_test_sets(cfg, resolved, "evaluate")?;
    let mut report = portfolio_report(&scores, &instances);
    write_report(&cfg.output_dir.join(PORTFOLIO_FILE), &report, &err)?;
    let category = per_category_report(&scores, &instances, &categories);
    write_report(&cfg.output_dir.join(CATEGORY_FILE), &category, &err)?;
    category
        .write_rankings_csv(create_csv(&cfg.output_dir.join(RANKINGS_FILE)).map_err(&err)?)
        .map_err(|e| err(e.to_string()))?;
    report.extend(category);
    Ok(report)
}

pub fn stage_dissect(cfg: &PipelineConfig, resolved: &Resolved) -> Result<EvalReport, PipelineError> {
    let err = stage_err("dissect");
    let stream = load_events(&cfg.output_dir).map_err(&err)?;
    let index = load_index(&cfg.output_dir, &stream).map_err(&err)?;
    let evaluator = TreeEvaluator::with_default(&index, cfg.default_value);
    let test: Vec<LabeledInstance> = stream
        .events()
        .iter()
        .filter(|e| cfg.split.split_of(e.day) == Split::Test)
        .map(|e| LabeledInstance {
            query: Query {
                user: e.user,
                product: e.product,
                category: e.category,
                day: e.day,
            },
            label: crate::eval::label_of(e.rating),
            split: Split::Test,
            features: FeatureVector {
                setting: Setting::S4,
                values: Vec::new(),
                levels: Vec::new(),
                user_cold_start: false,
                product_cold_start: false,
            },
        })
        .collect();
    let report = dissection_report(&evaluator, &resolved.spec, &test);
    write_report(&cfg.output_dir.join(DISSECTION_FILE), &report, &err)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    /// Data rows (header excluded) for csv artifacts.
    pub rows: Option<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: Vec<ArtifactEntry>,
    pub partial: bool,
    pub failed_stage: Option<String>,
}

impl Manifest {
    fn record(&mut self, dir: &Path, name: &str) -> Result<(), String> {
        let bytes = fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let rows = name
            .ends_with(".csv")
            .then(|| bytes.iter().filter(|&&b| b == b'\n').count().saturating_sub(1));
        self.artifacts.push(ArtifactEntry {
            path: name.to_owned(),
            rows,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)
    }

    pub fn get(&self, name: &str) -> Option<&ArtifactEntry> {
        self.artifacts.iter().find(|a| a.path == name)
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RunSummary {
    pub ingest: IngestSummary,
    pub split: SplitCounts,
    pub settings: Vec<String>,
    pub windows: Vec<String>,
    pub category_filter: Option<String>,
    pub reports: EvalReport,
}

/// Runs every stage and writes `summary.json` and `manifest.json`. Identical
/// inputs and config reproduce identical artifacts.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Manifest, PipelineError> {
    let resolved = cfg.validate()?;
    cfg.validate_inputs()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| stage_err("setup")(format!("cannot create {}: {e}", dir.display())))?;

    let mut manifest = Manifest::default();
    let result = run_stages(cfg, &resolved, &mut manifest);
    match result {
        Ok(()) => {
            manifest
                .write(&dir)
                .map_err(|e| stage_err("manifest")(e.to_string()))?;
            Ok(manifest)
        }
        Err(PipelineError::Stage { stage, message, .. }) => {
            let partial = !manifest.artifacts.is_empty();
            if partial {
                manifest.partial = true;
                manifest.failed_stage = Some(stage.to_owned());
                let _ = manifest.write(&dir);
            }
            Err(PipelineError::Stage {
                stage,
                message,
                partial,
            })
        }
        Err(e) => Err(e),
    }
}

fn run_stages(cfg: &PipelineConfig, resolved: &Resolved, manifest: &mut Manifest) -> Result<(), PipelineError> {
    let dir = &cfg.output_dir;
    let note = |m: &mut Manifest, name: &str, stage: &'static str| m.record(dir, name).map_err(stage_err(stage));

    let ingest = stage_ingest(cfg)?;
    note(manifest, EVENTS_FILE, "ingest")?;
    stage_aggregate(dir)?;
    note(manifest, AGGREGATES_FILE, "aggregate")?;
    stage_features(cfg, resolved)?;
    for &s in &resolved.settings {
        note(manifest, &features_file(s), "features")?;
    }

    let mut reports = EvalReport::default();
    if cfg.train {
        stage_train(cfg, resolved)?;
        for &s in &resolved.settings {
            note(manifest, &model_file(s), "train")?;
        }
        reports.extend(stage_evaluate(cfg, resolved)?);
        for name in [PORTFOLIO_FILE, CATEGORY_FILE, RANKINGS_FILE] {
            note(manifest, name, "evaluate")?;
        }
    }
    reports.extend(stage_dissect(cfg, resolved)?);
    note(manifest, DISSECTION_FILE, "dissect")?;

    let stream = load_events(dir).map_err(stage_err("summary"))?;
    let (_, split) = split_by_time(&stream, &cfg.split);
    let summary = RunSummary {
        ingest,
        split,
        settings: resolved.settings.iter().map(|s| s.to_string()).collect(),
        windows: resolved.spec.windows().iter().map(|w| w.label()).collect(),
        category_filter: cfg.category_filter.clone(),
        reports,
    };
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| stage_err("summary")(e.to_string()))?;
    text.push('\n');
    fs::write(dir.join(SUMMARY_FILE), text).map_err(|e| stage_err("summary")(e.to_string()))?;
    note(manifest, SUMMARY_FILE, "summary")?;
    Ok(())
}

/// Workload for [`bench_aggregation`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Events per entity per day.
    pub density: usize,
    pub n_entities: usize,
    pub n_days: u32,
    pub n_queries: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            density: 50,
            n_entities: 100,
            n_days: 365,
            n_queries: 1_000,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub events: usize,
    pub queries: usize,
    /// Daily aggregation plus prefix-index construction.
    pub build_secs: f64,
    pub indexed_query_secs: f64,
    pub indexed_total_secs: f64,
    pub naive_secs: f64,
    /// `naive_secs / indexed_total_secs`.
    pub speedup: f64,
    /// Both paths returned identical statistics for every query.
    pub results_match: bool,
}

pub fn bench_stream(cfg: &BenchConfig) -> EventStream {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_products = 1_000;
    let n_categories = 10;
    let mut events = Vec::with_capacity(cfg.density * cfg.n_entities * cfg.n_days as usize);
    for day in 0..cfg.n_days {
        for user in 0..cfg.n_entities {
            for _ in 0..cfg.density {
                let product = rng.random_range(0..n_products);
                events.push(RatingEvent {
                    user: user as u32,
                    product,
                    category: product % n_categories,
                    rating: Rating::from_milli(rng.random_range(1..=5u32) * Rating::SCALE).expect("1..=5 stars"),
                    day,
                });
            }
        }
    }
    let table = |prefix: &str, n: usize| {
        let mut t = Interner::new();
        (0..n).for_each(|i| {
            t.intern(&format!("{prefix}{i}"));
        });
        t
    };
    EventStream::from_parts(
        events,
        table("u", cfg.n_entities),
        table("p", n_products as usize),
        table("c", n_categories as usize),
    )
}

/// Times a window-query workload through the prefix index (including its
/// construction) and through raw scans.
pub fn bench_aggregation(cfg: &BenchConfig) -> BenchReport {
    let stream = bench_stream(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let windows = WindowSpec::standard();
    let queries: Vec<(u32, Day, Window)> = (0..cfg.n_queries)
        .map(|_| {
            (
                rng.random_range(0..cfg.n_entities.max(1)) as u32,
                rng.random_range(0..=cfg.n_days),
                windows.windows()[rng.random_range(0..windows.len())],
            )
        })
        .collect();

    let start = Instant::now();
    let index = build_prefix_index(&build_daily_aggregates(&stream));
    let build_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let fast: Vec<_> = queries
        .iter()
        .map(|&(u, t, w)| index.window_stats(EntityKind::User, u, t, w))
        .collect();
    let indexed_query_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let slow: Vec<_> = queries
        .iter()
        .map(|&(u, t, w)| naive_window_stats(&stream, EntityKind::User, u, t, w))
        .collect();
    let naive_secs = start.elapsed().as_secs_f64();

    let indexed_total_secs = build_secs + indexed_query_secs;
    BenchReport {
        events: stream.len(),
        queries: queries.len(),
        build_secs,
        indexed_query_secs,
        indexed_total_secs,
        naive_secs,
        speedup: naive_secs / indexed_total_secs.max(1e-9),
        results_match: fast == slow,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::D0_CSV;

    fn d0_config(dir: &Path) -> PipelineConfig {
        let input = dir.join("d0.csv");
        fs::write(&input, D0_CSV).unwrap();
        PipelineConfig {
            inputs: vec![Source::csv(input, false)],
            output_dir: dir.join("out"),
            settings: vec!["S4".into()],
            train: false,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn d0_s4_features_file_shape() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = d0_config(dir.path());
        let manifest = run_pipeline(&cfg).unwrap();
        let text = fs::read_to_string(cfg.output_dir.join("features_S4.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        let header: Vec<&str> = lines[0].split(',').collect();
        assert_eq!(header.len(), 5 + 21 + 2);
        assert_eq!(&header[..6], ["user", "product", "category", "day", "label", "pt1_7d"]);
        assert_eq!(&header[26..], ["user_cold", "product_cold"]);
        assert_eq!(manifest.get("features_S4.csv").unwrap().rows, Some(4));
        assert!(!manifest.partial);
        // last row: u3,p3 at day 107, both cold
        assert!(lines[4].starts_with("u3,p3,Electronics,107,0,"));
        assert!(lines[4].ends_with(",1,1"));
    }

    #[test]
    fn unknown_setting_fails_validation_before_work() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = d0_config(dir.path());
        cfg.settings = vec!["S9".into()];
        let e = run_pipeline(&cfg).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(!cfg.output_dir.exists());
    }

    #[test]
    fn missing_input_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = d0_config(dir.path());
        cfg.inputs[0].path = dir.path().join("nope.csv");
        assert_eq!(run_pipeline(&cfg).unwrap_err().exit_code(), 1);
        cfg.inputs.clear();
        assert_eq!(run_pipeline(&cfg).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn stage_failure_after_artifacts_is_partial() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = d0_config(dir.path());
        // only positive training labels: ingest and features succeed, training cannot
        cfg.train = true;
        cfg.split = SplitConfig::new(300, 400, 500).unwrap();
        fs::write(&cfg.inputs[0].path, "u1,p1,Books,5,100\nu2,p1,Books,5,101\n").unwrap();
        let e = run_pipeline(&cfg).unwrap_err();
        assert_eq!(e.exit_code(), 3, "{e}");
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(cfg.output_dir.join(MANIFEST_FILE)).unwrap()).unwrap();
        assert!(manifest.partial);
        assert_eq!(manifest.failed_stage.as_deref(), Some("train"));
    }

    #[test]
    fn identical_runs_have_identical_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = d0_config(dir.path());
        run_pipeline(&cfg).unwrap();
        let first = fs::read(cfg.output_dir.join(MANIFEST_FILE)).unwrap();
        run_pipeline(&cfg).unwrap();
        assert_eq!(fs::read(cfg.output_dir.join(MANIFEST_FILE)).unwrap(), first);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = PipelineConfig {
            category_filter: Some("Books".into()),
            inputs: vec![Source::jsonl("Books.jsonl", Some("Books".into()))],
            ..PipelineConfig::default()
        };
        let back: PipelineConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial: PipelineConfig = toml::from_str("seed = 7\nsettings = [\"S1\"]\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.split, SplitConfig::default());
        assert!(toml::from_str::<PipelineConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn bench_smoke() {
        let report = bench_aggregation(&BenchConfig {
            density: 1,
            n_entities: 5,
            n_days: 20,
            n_queries: 50,
            seed: 1,
        });
        assert_eq!(report.events, 100);
        assert_eq!(report.queries, 50);
        assert!(report.results_match);
        assert!(report.speedup.is_finite());
    }
}
