//! Labels, out-of-time splits, AUC and the report suite.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::EntityKind;
use crate::ingest::{Day, EventStream, Interner, Rating};
use crate::trees::{FeatureVector, Query, Setting, TreeEvaluator, TreeKind, WindowSpec};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("rating {0} outside [1, 5]")]
    RatingOutOfRange(f64),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

/// 1 iff the rating is strictly above 3 stars.
pub fn binarize_label(rating: f64) -> Result<u8, EvalError> {
    if !(1.0..=5.0).contains(&rating) {
        return Err(EvalError::RatingOutOfRange(rating));
    }
    Ok(u8::from(rating > 3.0))
}

pub fn label_of(rating: Rating) -> u8 {
    u8::from(rating.milli() > 3 * Rating::SCALE)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
    /// After the test window.
    Dropped,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
            Split::Dropped => "dropped",
        }
    }
}

/// Day boundaries of the out-of-time split. Defaults: validation from
/// 2016-01-01, test from 2017-01-01 through 2018-10-31.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub valid_start_day: Day,
    pub test_start_day: Day,
    /// Inclusive.
    pub test_end_day: Day,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            valid_start_day: 16_801,
            test_start_day: 17_167,
            test_end_day: 17_835,
        }
    }
}

impl SplitConfig {
    pub fn new(valid_start_day: Day, test_start_day: Day, test_end_day: Day) -> Result<Self, EvalError> {
        let cfg = SplitConfig {
            valid_start_day,
            test_start_day,
            test_end_day,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.valid_start_day >= self.test_start_day {
            return Err(EvalError::InvalidSplit("valid_start_day must precede test_start_day".into()));
        }
        if self.test_start_day > self.test_end_day {
            return Err(EvalError::InvalidSplit("test_start_day is after test_end_day".into()));
        }
        Ok(())
    }

    pub fn split_of(&self, day: Day) -> Split {
        if day < self.valid_start_day {
            Split::Train
        } else if day < self.test_start_day {
            Split::Valid
        } else if day <= self.test_end_day {
            Split::Test
        } else {
            Split::Dropped
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub dropped: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.valid + self.test + self.dropped
    }
}

/// Tags every event of the stream, in stream order.
pub fn split_by_time(stream: &EventStream, config: &SplitConfig) -> (Vec<Split>, SplitCounts) {
    let mut counts = SplitCounts::default();
    let tags = stream
        .events()
        .iter()
        .map(|e| {
            let s = config.split_of(e.day);
            match s {
                Split::Train => counts.train += 1,
                Split::Valid => counts.valid += 1,
                Split::Test => counts.test += 1,
                Split::Dropped => counts.dropped += 1,
            }
            s
        })
        .collect();
    (tags, counts)
}

/// One review turned into a modeling row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledInstance {
    pub query: Query,
    pub label: u8,
    pub split: Split,
    pub features: FeatureVector,
}

impl LabeledInstance {
    pub fn user_cold_start(&self) -> bool {
        self.features.user_cold_start
    }

    pub fn product_cold_start(&self) -> bool {
        self.features.product_cold_start
    }
}

/// Features for every non-dropped event, in stream order.
pub fn build_instances(
    stream: &EventStream,
    evaluator: &TreeEvaluator<'_>,
    setting: Setting,
    spec: &WindowSpec,
    split: &SplitConfig,
) -> Vec<LabeledInstance> {
    stream
        .events()
        .par_iter()
        .filter_map(|e| {
            let s = split.split_of(e.day);
            if s == Split::Dropped {
                return None;
            }
            let query = Query {
                user: e.user,
                product: e.product,
                category: e.category,
                day: e.day,
            };
            Some(LabeledInstance {
                query,
                label: label_of(e.rating),
                split: s,
                features: evaluator.assemble_features(setting, &query, spec),
            })
        })
        .collect()
}

/// Rank-based (Mann-Whitney) AUC. Tied scores share their average rank, so
/// a tied positive/negative pair counts one half. `None` unless both classes
/// are present.
///
/// Panics if the slices differ in length or a score is NaN.
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    assert!(scores.iter().all(|s| !s.is_nan()), "NaN score");
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the positive rank sum, so average ranks stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += pos_in_group * (i as u128 + 1 + j as u128);
        i = j;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Some(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// `(a - b) / b`.
pub fn relative_difference(a: f64, b: f64) -> f64 {
    (a - b) / b
}

/// One AUC value plus the class counts behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucCell {
    pub report: String,
    pub setting: String,
    pub segment: String,
    /// `None` when a class is missing.
    pub auc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl AucCell {
    pub fn new(report: &str, setting: &str, segment: &str, scores: &[f64], labels: &[u8]) -> Self {
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        AucCell {
            report: report.to_owned(),
            setting: setting.to_owned(),
            segment: segment.to_owned(),
            auc: compute_auc(scores, labels),
            n_pos,
            n_neg: labels.len() - n_pos,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeDiff {
    pub category: String,
    /// Baseline setting: `S1` or `S2`.
    pub versus: String,
    pub s3_auc: f64,
    pub baseline_auc: f64,
    pub relative_diff: f64,
    /// 1 = largest relative difference.
    pub rank: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<AucCell>,
    #[serde(default)]
    pub rankings: Vec<RelativeDiff>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn cell(&self, report: &str, setting: &str, segment: &str) -> Option<&AucCell> {
        self.cells
            .iter()
            .find(|c| c.report == report && c.setting == setting && c.segment == segment)
    }

    pub fn auc(&self, report: &str, setting: &str, segment: &str) -> Option<f64> {
        self.cell(report, setting, segment).and_then(|c| c.auc)
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.cells.extend(other.cells);
        self.rankings.extend(other.rankings);
        self.notes.extend(other.notes);
    }

    /// `report,setting,segment,auc,n_pos,n_neg`; undefined AUCs are empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["report", "setting", "segment", "auc", "n_pos", "n_neg"])?;
        for c in &self.cells {
            w.write_record([
                c.report.as_str(),
                &c.setting,
                &c.segment,
                &c.auc.map(|a| a.to_string()).unwrap_or_default(),
                &c.n_pos.to_string(),
                &c.n_neg.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `category,versus,s3_auc,baseline_auc,relative_diff,rank`.
    pub fn write_rankings_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["category", "versus", "s3_auc", "baseline_auc", "relative_diff", "rank"])?;
        for r in &self.rankings {
            w.write_record([
                r.category.as_str(),
                &r.versus,
                &r.s3_auc.to_string(),
                &r.baseline_auc.to_string(),
                &r.relative_diff.to_string(),
                &r.rank.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// AUC of each raw tree output, one cell per (tree, window).
pub fn dissection_report(
    evaluator: &TreeEvaluator<'_>,
    spec: &WindowSpec,
    instances: &[LabeledInstance],
) -> EvalReport {
    let labels: Vec<u8> = instances.iter().map(|i| i.label).collect();
    let grid: Vec<(TreeKind, _)> = TreeKind::ALL
        .into_iter()
        .flat_map(|t| spec.windows().iter().map(move |&w| (t, w)))
        .collect();
    let cells = grid
        .par_iter()
        .map(|&(tree, window)| {
            let scores: Vec<f64> = instances
                .iter()
                .map(|i| evaluator.eval(tree, &i.query, window).value)
                .collect();
            AucCell::new("dissection", tree.as_str(), &window.label(), &scores, &labels)
        })
        .collect::<Vec<_>>();
    let notes = cells
        .iter()
        .filter(|c| c.auc.is_none())
        .map(|c| format!("dissection {} {}: undefined AUC (n_pos={}, n_neg={})", c.setting, c.segment, c.n_pos, c.n_neg))
        .collect();
    EvalReport {
        cells,
        rankings: Vec::new(),
        notes,
    }
}

/// Scores of one setting, aligned with an instance slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SettingScores {
    pub setting: Setting,
    pub scores: Vec<f64>,
}

pub const PORTFOLIO_SEGMENTS: [&str; 5] = ["all", "user_warm", "user_cold", "product_warm", "product_cold"];

fn in_segment(segment: &str, inst: &LabeledInstance) -> bool {
    match segment {
        "all" => true,
        "user_warm" => !inst.user_cold_start(),
        "user_cold" => inst.user_cold_start(),
        "product_warm" => !inst.product_cold_start(),
        "product_cold" => inst.product_cold_start(),
        _ => false,
    }
}

fn subset(scores: &[f64], instances: &[LabeledInstance], keep: impl Fn(&LabeledInstance) -> bool) -> (Vec<f64>, Vec<u8>) {
    scores
        .iter()
        .zip(instances)
        .filter(|(_, i)| keep(i))
        .map(|(&s, i)| (s, i.label))
        .unzip()
}

/// AUC per warm/cold segment per setting.
pub fn portfolio_report(scores: &[SettingScores], instances: &[LabeledInstance]) -> EvalReport {
    let mut report = EvalReport::default();
    for s in scores {
        assert_eq!(s.scores.len(), instances.len(), "scores not aligned with instances");
        for segment in PORTFOLIO_SEGMENTS {
            let (sc, lb) = subset(&s.scores, instances, |i| in_segment(segment, i));
            let cell = AucCell::new("portfolio", s.setting.as_str(), segment, &sc, &lb);
            if cell.auc.is_none() {
                report.notes.push(format!("portfolio {} {segment}: undefined AUC", s.setting));
            }
            report.cells.push(cell);
        }
    }
    report
}

/// AUC per category per setting (plus an `overall` row) and the ranked
/// S3-vs-S1 / S3-vs-S2 relative differences.
pub fn per_category_report(
    scores: &[SettingScores],
    instances: &[LabeledInstance],
    categories: &Interner,
) -> EvalReport {
    let mut report = EvalReport::default();
    let present: Vec<u32> = {
        let mut ids: Vec<u32> = instances.iter().map(|i| i.query.category).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let name = |c: u32| categories.name(c).map(str::to_owned).unwrap_or_else(|| format!("#{c}"));
    for s in scores {
        assert_eq!(s.scores.len(), instances.len(), "scores not aligned with instances");
        let (sc, lb) = subset(&s.scores, instances, |_| true);
        report.cells.push(AucCell::new("category", s.setting.as_str(), "overall", &sc, &lb));
        for &c in &present {
            let (sc, lb) = subset(&s.scores, instances, |i| i.query.category == c);
            report.cells.push(AucCell::new("category", s.setting.as_str(), &name(c), &sc, &lb));
        }
    }

    let has = |st: Setting| scores.iter().any(|s| s.setting == st);
    if has(Setting::S3) {
        for base in [Setting::S1, Setting::S2] {
            if !has(base) {
                continue;
            }
            let mut diffs = Vec::new();
            for segment in std::iter::once("overall".to_owned()).chain(present.iter().map(|&c| name(c))) {
                let s3 = report.auc("category", "S3", &segment);
                let b = report.auc("category", base.as_str(), &segment);
                match (s3, b) {
                    (Some(s3), Some(b)) if b > 0.0 => diffs.push((segment, s3, b, relative_difference(s3, b))),
                    _ => report
                        .notes
                        .push(format!("{segment} excluded from S3-vs-{base} ranking: undefined AUC")),
                }
            }
            diffs.sort_by(|a, b| b.3.total_cmp(&a.3).then_with(|| a.0.cmp(&b.0)));
            report.rankings.extend(diffs.into_iter().enumerate().map(|(k, (category, s3, b, d))| RelativeDiff {
                category,
                versus: base.as_str().to_owned(),
                s3_auc: s3,
                baseline_auc: b,
                relative_diff: d,
                rank: k + 1,
            }));
        }
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Daily,
    /// Fixed 30-day blocks counted from day 0.
    Monthly,
    /// Fixed 365-day blocks counted from day 0.
    Yearly,
}

impl Granularity {
    pub fn block_days(self) -> Day {
        match self {
            Granularity::Daily => 1,
            Granularity::Monthly => 30,
            Granularity::Yearly => 365,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Daily => "daily",
            Granularity::Monthly => "monthly",
            Granularity::Yearly => "yearly",
        })
    }
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "daily" | "day" => Ok(Granularity::Daily),
            "monthly" | "month" => Ok(Granularity::Monthly),
            "yearly" | "year" => Ok(Granularity::Yearly),
            other => Err(format!("unknown granularity '{other}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimelineBucket {
    /// Day index for daily buckets, block index otherwise.
    pub bucket: Day,
    pub count: u64,
    pub sum_milli: u64,
    pub avg: f64,
}

/// Count and average rating per time bucket for one entity. Empty buckets
/// are omitted; an unknown entity yields an empty series.
pub fn timeline_report(
    stream: &EventStream,
    kind: EntityKind,
    entity: u32,
    granularity: Granularity,
) -> Vec<TimelineBucket> {
    let mut buckets: BTreeMap<Day, (u64, u64)> = BTreeMap::new();
    for e in stream.events() {
        if kind == EntityKind::Global || kind.entity_of(e) == entity {
            let b = buckets.entry(e.day / granularity.block_days()).or_default();
            b.0 += 1;
            b.1 += u64::from(e.rating.milli());
        }
    }
    buckets
        .into_iter()
        .map(|(bucket, (count, sum_milli))| TimelineBucket {
            bucket,
            count,
            sum_milli,
            avg: sum_milli as f64 / (count * u64::from(Rating::SCALE)) as f64,
        })
        .collect()
}
