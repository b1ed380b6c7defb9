//! Review ingestion: line parsers, string interning and the day-sorted
//! [`EventStream`] that every later stage consumes.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Day index: `floor(unix_seconds / 86400)`, UTC.
pub type Day = u32;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Converts a Unix timestamp to its day index. Negative timestamps have no
/// day index.
pub fn day_of_timestamp(unix_seconds: i64) -> Option<Day> {
    if unix_seconds < 0 {
        return None;
    }
    Day::try_from(unix_seconds / SECONDS_PER_DAY).ok()
}

/// A star rating in `[1, 5]`, stored as an integer count of thousandths so
/// that sums over any number of events stay exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Rating(u32);

impl Rating {
    pub const SCALE: u32 = 1000;
    pub const MIN: Rating = Rating(1000);
    pub const MAX: Rating = Rating(5000);

    /// Rounds to the nearest thousandth of a star.
    pub fn from_stars(stars: f64) -> Option<Rating> {
        if !stars.is_finite() || !(1.0..=5.0).contains(&stars) {
            return None;
        }
        Some(Rating((stars * f64::from(Self::SCALE)).round() as u32))
    }

    pub fn from_milli(milli: u32) -> Option<Rating> {
        (Self::MIN.0..=Self::MAX.0).contains(&milli).then_some(Rating(milli))
    }

    pub fn milli(self) -> u32 {
        self.0
    }

    pub fn stars(self) -> f64 {
        f64::from(self.0) / f64::from(Self::SCALE)
    }
}

impl fmt::Display for Rating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_milli(f, u64::from(self.0))
    }
}

/// Writes a non-negative thousandths value as the shortest exact decimal.
pub(crate) fn write_milli(f: &mut impl fmt::Write, milli: u64) -> fmt::Result {
    let whole = milli / 1000;
    let frac = milli % 1000;
    if frac == 0 {
        write!(f, "{whole}")
    } else {
        let digits = format!("{frac:03}");
        write!(f, "{whole}.{}", digits.trim_end_matches('0'))
    }
}

pub(crate) fn format_milli(milli: u64) -> String {
    let mut s = String::new();
    write_milli(&mut s, milli).expect("writing to a String cannot fail");
    s
}

/// Parses a decimal with at most three fractional digits into thousandths.
pub(crate) fn parse_milli(text: &str) -> Option<u64> {
    let text = text.trim();
    let (whole, frac) = match text.split_once('.') {
        Some((w, f)) => (w, f),
        None => (text, ""),
    };
    if whole.is_empty() || frac.len() > 3 || !whole.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let whole: u64 = whole.parse().ok()?;
    let frac_milli: u64 = if frac.is_empty() {
        0
    } else {
        format!("{frac:0<3}").parse().ok()?
    };
    whole.checked_mul(1000)?.checked_add(frac_milli)
}

/// Bidirectional string/dense-id table for one entity kind.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Interner {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Interner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = u32::try_from(self.names.len()).expect("more than u32::MAX distinct names");
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One review with interned entity ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RatingEvent {
    pub user: u32,
    pub product: u32,
    pub category: u32,
    pub rating: Rating,
    pub day: Day,
}

/// A parsed review before interning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawEvent {
    pub user: String,
    pub product: String,
    pub category: String,
    pub rating: Rating,
    pub day: Day,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown input format '{other}' (expected jsonl or csv)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorPolicy {
    /// Drop the offending line and count it.
    Skip,
    #[default]
    Abort,
}

impl FromStr for ErrorPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "skip" => Ok(ErrorPolicy::Skip),
            "abort" => Ok(ErrorPolicy::Abort),
            other => Err(format!("unknown error policy '{other}' (expected skip or abort)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ParseErrorKind {
    #[error("missing field '{0}'")]
    MissingField(&'static str),
    #[error("malformed field '{field}': {value:?}")]
    Malformed { field: &'static str, value: String },
    #[error("rating out of range: {0}")]
    RatingOutOfRange(String),
    #[error("negative timestamp: {0}")]
    NegativeTimestamp(i64),
    #[error("expected 5 csv columns, found {0}")]
    ColumnCount(usize),
    #[error("invalid json: {0}")]
    Json(String),
}

#[derive(Clone, Debug, PartialEq, Error)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
}

#[derive(Deserialize)]
struct JsonRecord {
    #[serde(rename = "reviewerID")]
    reviewer_id: String,
    asin: String,
    overall: f64,
    #[serde(rename = "unixReviewTime")]
    unix_review_time: i64,
    category: Option<String>,
}

/// Parses one record. `line` is the 1-based line number carried into errors.
pub fn parse_event_line(text: &str, format: Format, line: usize) -> Result<RawEvent, ParseError> {
    parse_event_line_with_category(text, format, line, None)
}

/// Like [`parse_event_line`], but a jsonl record without a `category` field
/// takes `fallback_category` (the category of the file it came from).
pub fn parse_event_line_with_category(
    text: &str,
    format: Format,
    line: usize,
    fallback_category: Option<&str>,
) -> Result<RawEvent, ParseError> {
    let err = |kind| ParseError { line, kind };
    match format {
        Format::Jsonl => {
            let rec: JsonRecord =
                serde_json::from_str(text).map_err(|e| err(ParseErrorKind::Json(e.to_string())))?;
            let rating = Rating::from_stars(rec.overall)
                .ok_or_else(|| err(ParseErrorKind::RatingOutOfRange(rec.overall.to_string())))?;
            let day = day_of_timestamp(rec.unix_review_time)
                .ok_or_else(|| err(ParseErrorKind::NegativeTimestamp(rec.unix_review_time)))?;
            let category = match (rec.category, fallback_category) {
                (Some(c), _) => c,
                (None, Some(c)) => c.to_owned(),
                (None, None) => return Err(err(ParseErrorKind::MissingField("category"))),
            };
            Ok(RawEvent {
                user: rec.reviewer_id,
                product: rec.asin,
                category,
                rating,
                day,
            })
        }
        Format::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .flexible(true)
                .from_reader(text.as_bytes());
            let record = match reader.records().next() {
                Some(Ok(r)) => r,
                Some(Err(e)) => {
                    return Err(err(ParseErrorKind::Malformed {
                        field: "record",
                        value: e.to_string(),
                    }))
                }
                None => return Err(err(ParseErrorKind::ColumnCount(0))),
            };
            parse_csv_record(&record, line)
        }
    }
}

fn parse_csv_record(record: &csv::StringRecord, line: usize) -> Result<RawEvent, ParseError> {
    let err = |kind| ParseError { line, kind };
    if record.len() != 5 {
        return Err(err(ParseErrorKind::ColumnCount(record.len())));
    }
    let text_field = |i: usize, name: &'static str| -> Result<String, ParseError> {
        let v = record[i].trim();
        if v.is_empty() {
            Err(err(ParseErrorKind::MissingField(name)))
        } else {
            Ok(v.to_owned())
        }
    };
    let rating_text = record[3].trim();
    let stars: f64 = rating_text.parse().map_err(|_| {
        err(ParseErrorKind::Malformed {
            field: "rating",
            value: rating_text.to_owned(),
        })
    })?;
    let rating = Rating::from_stars(stars)
        .ok_or_else(|| err(ParseErrorKind::RatingOutOfRange(rating_text.to_owned())))?;
    let day_text = record[4].trim();
    let day: i64 = day_text.parse().map_err(|_| {
        err(ParseErrorKind::Malformed {
            field: "day",
            value: day_text.to_owned(),
        })
    })?;
    if day < 0 {
        return Err(err(ParseErrorKind::NegativeTimestamp(day)));
    }
    let day = Day::try_from(day).map_err(|_| {
        err(ParseErrorKind::Malformed {
            field: "day",
            value: day_text.to_owned(),
        })
    })?;
    Ok(RawEvent {
        user: text_field(0, "user")?,
        product: text_field(1, "product")?,
        category: text_field(2, "category")?,
        rating,
        day,
    })
}

/// One input file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub path: PathBuf,
    pub format: Format,
    /// Skip the first csv line.
    #[serde(default)]
    pub has_header: bool,
    /// Category assigned to jsonl records that carry none.
    #[serde(default)]
    pub category: Option<String>,
}

impl Source {
    pub fn csv(path: impl Into<PathBuf>, has_header: bool) -> Self {
        Source {
            path: path.into(),
            format: Format::Csv,
            has_header,
            category: None,
        }
    }

    pub fn jsonl(path: impl Into<PathBuf>, category: Option<String>) -> Self {
        Source {
            path: path.into(),
            format: Format::Jsonl,
            has_header: false,
            category,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    pub parsed: usize,
    pub skipped: usize,
    /// First few skipped lines, for diagnostics.
    pub skipped_examples: Vec<String>,
}

const MAX_SKIP_EXAMPLES: usize = 10;

fn read_source(
    source: &Source,
    policy: ErrorPolicy,
) -> Result<(Vec<RawEvent>, Vec<ParseError>), IngestError> {
    let text = std::fs::read_to_string(&source.path).map_err(|e| IngestError::Io {
        path: source.path.clone(),
        source: e,
    })?;
    let mut events = Vec::new();
    let mut skipped = Vec::new();
    let mut first_content_line = true;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if first_content_line && source.has_header && source.format == Format::Csv {
            first_content_line = false;
            continue;
        }
        first_content_line = false;
        match parse_event_line_with_category(line, source.format, i + 1, source.category.as_deref()) {
            Ok(ev) => events.push(ev),
            Err(e) => match policy {
                ErrorPolicy::Skip => skipped.push(e),
                ErrorPolicy::Abort => {
                    return Err(IngestError::Parse {
                        path: source.path.clone(),
                        source: e,
                    })
                }
            },
        }
    }
    Ok((events, skipped))
}

/// Parses every source (in parallel), interns in source order and returns the
/// merged, day-sorted stream.
pub fn build_event_stream(
    sources: &[Source],
    policy: ErrorPolicy,
) -> Result<(EventStream, IngestReport), IngestError> {
    let parsed: Vec<_> = sources.par_iter().map(|s| read_source(s, policy)).collect();
    let mut report = IngestReport::default();
    let mut raw = Vec::new();
    for (source, result) in sources.iter().zip(parsed) {
        let (events, skipped) = result?;
        report.parsed += events.len();
        report.skipped += skipped.len();
        for e in skipped {
            if report.skipped_examples.len() < MAX_SKIP_EXAMPLES {
                report.skipped_examples.push(format!("{}: {e}", source.path.display()));
            }
        }
        raw.extend(events);
    }
    Ok((EventStream::from_raw_events(raw), report))
}

/// Events sorted by day (ties keep input order) plus the intern tables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventStream {
    events: Vec<RatingEvent>,
    users: Interner,
    products: Interner,
    categories: Interner,
}

impl EventStream {
    pub fn from_raw_events(raw: impl IntoIterator<Item = RawEvent>) -> Self {
        let mut stream = EventStream::default();
        stream.append_raw(raw);
        stream
    }

    /// Assembles a stream from pre-interned events. Panics if an event
    /// references an id missing from its table.
    pub fn from_parts(
        mut events: Vec<RatingEvent>,
        users: Interner,
        products: Interner,
        categories: Interner,
    ) -> Self {
        for e in &events {
            assert!((e.user as usize) < users.len(), "user id {} not interned", e.user);
            assert!((e.product as usize) < products.len(), "product id {} not interned", e.product);
            assert!(
                (e.category as usize) < categories.len(),
                "category id {} not interned",
                e.category
            );
        }
        events.sort_by_key(|e| e.day);
        EventStream {
            events,
            users,
            products,
            categories,
        }
    }

    /// Appends events and restores day order. Existing events keep their
    /// position relative to new events on the same day.
    pub fn append_raw(&mut self, raw: impl IntoIterator<Item = RawEvent>) {
        for r in raw {
            let ev = RatingEvent {
                user: self.users.intern(&r.user),
                product: self.products.intern(&r.product),
                category: self.categories.intern(&r.category),
                rating: r.rating,
                day: r.day,
            };
            self.events.push(ev);
        }
        self.events.sort_by_key(|e| e.day);
    }

    pub fn events(&self) -> &[RatingEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn users(&self) -> &Interner {
        &self.users
    }

    pub fn products(&self) -> &Interner {
        &self.products
    }

    pub fn categories(&self) -> &Interner {
        &self.categories
    }

    /// `(min_day, max_day)`, or `None` for an empty stream.
    pub fn day_range(&self) -> Option<(Day, Day)> {
        Some((self.events.first()?.day, self.events.last()?.day))
    }

    pub fn to_raw(&self, e: &RatingEvent) -> RawEvent {
        RawEvent {
            user: self.users.name(e.user).unwrap_or_default().to_owned(),
            product: self.products.name(e.product).unwrap_or_default().to_owned(),
            category: self.categories.name(e.category).unwrap_or_default().to_owned(),
            rating: e.rating,
            day: e.day,
        }
    }

    /// Canonical dump: `user,product,category,rating,day`, day-sorted.
    pub fn write_csv<W: Write>(&self, writer: W, header: bool) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        if header {
            w.write_record(["user", "product", "category", "rating", "day"])?;
        }
        for e in &self.events {
            w.write_record([
                self.users.name(e.user).unwrap_or_default(),
                self.products.name(e.product).unwrap_or_default(),
                self.categories.name(e.category).unwrap_or_default(),
                &e.rating.to_string(),
                &e.day.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self, header: bool) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, header).expect("in-memory csv write");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn read_csv_file(path: &Path, has_header: bool) -> Result<Self, IngestError> {
        let (stream, _) = build_event_stream(&[Source::csv(path, has_header)], ErrorPolicy::Abort)?;
        Ok(stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const D0: &str = "u1,p1,Books,5,100\nu1,p2,Books,4,105\nu2,p1,Books,2,106\nu3,p3,Electronics,3,107\n";

    #[test]
    fn jsonl_day_is_floor_division() {
        let line = r#"{"reviewerID":"u1","asin":"p1","overall":5,"unixReviewTime":1527811200,"category":"Books"}"#;
        let ev = parse_event_line(line, Format::Jsonl, 1).unwrap();
        assert_eq!(
            ev,
            RawEvent {
                user: "u1".into(),
                product: "p1".into(),
                category: "Books".into(),
                rating: Rating::from_stars(5.0).unwrap(),
                day: 17683,
            }
        );
    }

    #[test]
    fn jsonl_ignores_unknown_fields_and_uses_file_category() {
        let line = r#"{"reviewerID":"a","asin":"b","overall":4.0,"unixReviewTime":86399,"vote":"3","summary":"ok"}"#;
        let ev = parse_event_line_with_category(line, Format::Jsonl, 7, Some("Toys")).unwrap();
        assert_eq!(ev.day, 0);
        assert_eq!(ev.category, "Toys");
        let err = parse_event_line(line, Format::Jsonl, 7).unwrap_err();
        assert_eq!(err.line, 7);
        assert_eq!(err.kind, ParseErrorKind::MissingField("category"));
    }

    #[test]
    fn csv_line_passes_through() {
        let ev = parse_event_line("u1,p1,Books,5,100", Format::Csv, 1).unwrap();
        assert_eq!(ev.user, "u1");
        assert_eq!(ev.product, "p1");
        assert_eq!(ev.category, "Books");
        assert_eq!(ev.rating.stars(), 5.0);
        assert_eq!(ev.day, 100);
    }

    #[test]
    fn out_of_range_rating_is_rejected() {
        let line = r#"{"reviewerID":"u1","asin":"p1","overall":0,"unixReviewTime":1527811200,"category":"Books"}"#;
        let err = parse_event_line(line, Format::Jsonl, 3).unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::RatingOutOfRange(_)));
        assert!(err.to_string().contains("rating out of range"));
        assert_eq!(err.line, 3);

        let err = parse_event_line("u,p,c,5.5,1", Format::Csv, 1).unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::RatingOutOfRange(_)));
    }

    #[test]
    fn negative_timestamps_and_bad_fields() {
        let line = r#"{"reviewerID":"u1","asin":"p1","overall":3,"unixReviewTime":-5,"category":"Books"}"#;
        assert_eq!(
            parse_event_line(line, Format::Jsonl, 1).unwrap_err().kind,
            ParseErrorKind::NegativeTimestamp(-5)
        );
        assert_eq!(
            parse_event_line("u,p,c,3,-1", Format::Csv, 1).unwrap_err().kind,
            ParseErrorKind::NegativeTimestamp(-1)
        );
        assert!(matches!(
            parse_event_line("u,p,c,x,1", Format::Csv, 1).unwrap_err().kind,
            ParseErrorKind::Malformed { field: "rating", .. }
        ));
        assert_eq!(
            parse_event_line("u,p,c,3", Format::Csv, 1).unwrap_err().kind,
            ParseErrorKind::ColumnCount(4)
        );
        assert!(matches!(
            parse_event_line("{not json", Format::Jsonl, 1).unwrap_err().kind,
            ParseErrorKind::Json(_)
        ));
    }

    fn write_tmp(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn d0_stream() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "d0.csv", D0);
        let (s, report) = build_event_stream(&[Source::csv(p, false)], ErrorPolicy::Abort).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.day_range(), Some((100, 107)));
        assert_eq!(report.skipped, 0);
        assert_eq!(s.users().len(), 3);
        assert_eq!(s.categories().names(), ["Books", "Electronics"]);
    }

    #[test]
    fn empty_file_gives_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "empty.csv", "");
        let (s, _) = build_event_stream(&[Source::csv(p, false)], ErrorPolicy::Abort).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.day_range(), None);
    }

    #[test]
    fn overlapping_files_merge_sorted_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_tmp(&dir, "a.csv", "user,product,category,rating,day\nua,p1,c,1,5\nua,p2,c,2,10\nua,p3,c,3,20\n");
        let b = write_tmp(&dir, "b.csv", "ub,p1,c,4,1\nub,p2,c,5,10\nub,p3,c,1,15\n");
        let (s, _) = build_event_stream(
            &[Source::csv(a, true), Source::csv(b, false)],
            ErrorPolicy::Abort,
        )
        .unwrap();
        let days: Vec<Day> = s.events().iter().map(|e| e.day).collect();
        assert!(days.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(days, [1, 5, 10, 10, 15, 20]);
        // day 10: file a's event precedes file b's
        let at10: Vec<&str> = s
            .events()
            .iter()
            .filter(|e| e.day == 10)
            .map(|e| s.users().name(e.user).unwrap())
            .collect();
        assert_eq!(at10, ["ua", "ub"]);
    }

    #[test]
    fn skip_policy_counts_and_abort_policy_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(&dir, "bad.csv", "u,p,c,5,1\nu,p,c,9,2\n\nu,p,c,3,3\n");
        let (s, report) =
            build_event_stream(&[Source::csv(p.clone(), false)], ErrorPolicy::Skip).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(report.skipped, 1);
        match build_event_stream(&[Source::csv(p, false)], ErrorPolicy::Abort) {
            Err(IngestError::Parse { source, .. }) => assert_eq!(source.line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let missing = dir.path().join("nope.csv");
        assert!(matches!(
            build_event_stream(&[Source::csv(missing, false)], ErrorPolicy::Skip),
            Err(IngestError::Io { .. })
        ));
    }

    #[test]
    fn milli_formatting() {
        assert_eq!(format_milli(5000), "5");
        assert_eq!(format_milli(4500), "4.5");
        assert_eq!(format_milli(1234), "1.234");
        assert_eq!(parse_milli("4.5"), Some(4500));
        assert_eq!(parse_milli("12"), Some(12000));
        assert_eq!(parse_milli("1.2345"), None);
        assert_eq!(parse_milli("-1"), None);
    }

    proptest! {
        #[test]
        fn day_conversion_brackets_timestamp(ts in 0i64..4_000_000_000) {
            let d = i64::from(day_of_timestamp(ts).unwrap());
            prop_assert!(d * SECONDS_PER_DAY <= ts && ts < (d + 1) * SECONDS_PER_DAY);
        }

        #[test]
        fn csv_dump_round_trips(
            rows in proptest::collection::vec((0u8..6, 0u8..6, 0u8..3, 1000u32..=5000, 0u32..50_000), 0..60)
        ) {
            let raw: Vec<RawEvent> = rows
                .iter()
                .map(|&(u, p, c, r, d)| RawEvent {
                    user: format!("u{u}"),
                    product: format!("p \"{p}\",x"),
                    category: format!("c{c}"),
                    rating: Rating::from_milli(r).unwrap(),
                    day: d,
                })
                .collect();
            let stream = EventStream::from_raw_events(raw);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("dump.csv");
            std::fs::write(&path, stream.to_csv_string(true)).unwrap();
            let back = EventStream::read_csv_file(&path, true).unwrap();
            prop_assert_eq!(back.len(), stream.len());
            for (a, b) in stream.events().iter().zip(back.events()) {
                prop_assert_eq!(stream.to_raw(a), back.to_raw(b));
            }
        }
    }
}
