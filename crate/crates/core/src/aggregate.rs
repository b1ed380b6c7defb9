//! Daily aggregation and the prefix index behind every windowed lookup.
//!
//! Events are first collapsed to one `(count, sum)` row per entity per active
//! day. Each entity's rows are then turned into cumulative arrays so that the
//! statistics over any day range cost two binary searches.
//!
//! Sums are carried in thousandths of a star (see [`Rating`]) and are exact.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{format_milli, parse_milli, Day, EventStream, Rating, RatingEvent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    User,
    Product,
    Category,
    Global,
}

impl EntityKind {
    pub const ALL: [EntityKind; 4] = [
        EntityKind::User,
        EntityKind::Product,
        EntityKind::Category,
        EntityKind::Global,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::User => "user",
            EntityKind::Product => "product",
            EntityKind::Category => "category",
            EntityKind::Global => "global",
        }
    }

    /// The entity id of `event` under this kind (always 0 for global).
    pub fn entity_of(self, event: &RatingEvent) -> u32 {
        match self {
            EntityKind::User => event.user,
            EntityKind::Product => event.product,
            EntityKind::Category => event.category,
            EntityKind::Global => 0,
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "user" => Ok(EntityKind::User),
            "product" => Ok(EntityKind::Product),
            "category" => Ok(EntityKind::Category),
            "global" => Ok(EntityKind::Global),
            other => Err(format!("unknown entity kind '{other}'")),
        }
    }
}

/// A look-back length. `Days(l)` covers `[t - l, t - 1]`; `Lifespan` covers
/// every day before `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Window {
    Days(u32),
    Lifespan,
}

impl Window {
    /// Inclusive day span seen from prediction day `t`; `None` when empty.
    pub fn span(self, t: Day) -> Option<(Day, Day)> {
        let last = t.checked_sub(1)?;
        let first = match self {
            Window::Days(len) => t.saturating_sub(len),
            Window::Lifespan => 0,
        };
        (first <= last).then_some((first, last))
    }

    pub fn label(self) -> String {
        match self {
            Window::Lifespan => "life".to_owned(),
            Window::Days(d) if d >= 365 && d % 365 == 0 => format!("{}y", d / 365),
            Window::Days(d) => format!("{d}d"),
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Window {
    type Err = String;

    /// Accepts `7d`, `1y` (365 days), `life`/`lifespan`, or a bare day count.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        if s == "life" || s == "lifespan" {
            return Ok(Window::Lifespan);
        }
        let bad = || format!("invalid window '{s}'");
        let days = if let Some(n) = s.strip_suffix('y') {
            n.parse::<u32>().map_err(|_| bad())?.checked_mul(365).ok_or_else(bad)?
        } else if let Some(n) = s.strip_suffix('d') {
            n.parse::<u32>().map_err(|_| bad())?
        } else {
            s.parse::<u32>().map_err(|_| bad())?
        };
        if days == 0 {
            return Err(format!("window '{s}' must span at least one day"));
        }
        Ok(Window::Days(days))
    }
}

/// One entity's activity on one day.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DailyAggregate {
    pub kind: EntityKind,
    pub entity: u32,
    pub day: Day,
    pub count: u64,
    /// Sum of ratings in thousandths of a star.
    pub sum_milli: u64,
}

/// Count and exact rating sum over an inclusive day span.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct WindowStats {
    pub count: u64,
    pub sum_milli: u64,
    /// `None` when the span is empty (e.g. `t = 0`).
    pub window: Option<(Day, Day)>,
}

impl WindowStats {
    /// Average rating, `None` when no events fall in the window.
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_milli as f64 / (self.count * u64::from(Rating::SCALE)) as f64)
    }
}

/// Collapses a day-sorted stream into one row per (kind, entity, day).
/// Output is ordered by kind, entity, day.
pub fn build_daily_aggregates(stream: &EventStream) -> Vec<DailyAggregate> {
    let sizes = [
        stream.users().len(),
        stream.products().len(),
        stream.categories().len(),
        1,
    ];
    let mut out = Vec::new();
    if stream.is_empty() {
        return out;
    }
    for (kind, size) in EntityKind::ALL.into_iter().zip(sizes) {
        let mut rows: Vec<Vec<DailyAggregate>> = vec![Vec::new(); size];
        for e in stream.events() {
            let entity = kind.entity_of(e);
            let bucket = &mut rows[entity as usize];
            match bucket.last_mut() {
                Some(last) if last.day == e.day => {
                    last.count += 1;
                    last.sum_milli += u64::from(e.rating.milli());
                }
                _ => bucket.push(DailyAggregate {
                    kind,
                    entity,
                    day: e.day,
                    count: 1,
                    sum_milli: u64::from(e.rating.milli()),
                }),
            }
        }
        out.extend(rows.into_iter().flatten());
    }
    out
}

/// Cumulative arrays for one entity.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Series {
    days: Vec<Day>,
    cum_count: Vec<u64>,
    cum_sum: Vec<u64>,
}

impl Series {
    fn from_rows(mut rows: Vec<(Day, u64, u64)>) -> Self {
        rows.sort_by_key(|r| r.0);
        let mut s = Series::default();
        let (mut cc, mut cs) = (0u64, 0u64);
        for (day, count, sum) in rows {
            cc += count;
            cs += sum;
            if s.days.last() == Some(&day) {
                *s.cum_count.last_mut().unwrap() = cc;
                *s.cum_sum.last_mut().unwrap() = cs;
            } else {
                s.days.push(day);
                s.cum_count.push(cc);
                s.cum_sum.push(cs);
            }
        }
        s
    }

    pub fn days(&self) -> &[Day] {
        &self.days
    }

    pub fn cumulative_counts(&self) -> &[u64] {
        &self.cum_count
    }

    pub fn cumulative_sums(&self) -> &[u64] {
        &self.cum_sum
    }

    pub fn total_count(&self) -> u64 {
        self.cum_count.last().copied().unwrap_or(0)
    }

    fn prefix(&self, n: usize) -> (u64, u64) {
        if n == 0 {
            (0, 0)
        } else {
            (self.cum_count[n - 1], self.cum_sum[n - 1])
        }
    }

    /// `(count, sum_milli)` over `[first, last]`.
    pub fn range(&self, first: Day, last: Day) -> (u64, u64) {
        if first > last {
            return (0, 0);
        }
        let lo = self.days.partition_point(|&d| d < first);
        let hi = self.days.partition_point(|&d| d <= last);
        let (c_hi, s_hi) = self.prefix(hi);
        let (c_lo, s_lo) = self.prefix(lo);
        (c_hi - c_lo, s_hi - s_lo)
    }
}

/// Per-entity cumulative (count, sum) over active days. Immutable once built.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrefixIndex {
    users: Vec<Series>,
    products: Vec<Series>,
    categories: Vec<Series>,
    global: Series,
}

/// Builds the index from daily rows. Rows may arrive in any order; rows that
/// share (kind, entity, day) are merged.
pub fn build_prefix_index(aggregates: &[DailyAggregate]) -> PrefixIndex {
    let mut per_kind: [Vec<Vec<(Day, u64, u64)>>; 4] = Default::default();
    for a in aggregates {
        let slot = match a.kind {
            EntityKind::User => 0,
            EntityKind::Product => 1,
            EntityKind::Category => 2,
            EntityKind::Global => 3,
        };
        let entity = if a.kind == EntityKind::Global { 0 } else { a.entity as usize };
        let rows = &mut per_kind[slot];
        if rows.len() <= entity {
            rows.resize_with(entity + 1, Vec::new);
        }
        rows[entity].push((a.day, a.count, a.sum_milli));
    }
    let [users, products, categories, global] = per_kind.map(|rows| {
        rows.into_iter().map(Series::from_rows).collect::<Vec<_>>()
    });
    PrefixIndex {
        users,
        products,
        categories,
        global: global.into_iter().next().unwrap_or_default(),
    }
}

impl PrefixIndex {
    pub fn from_stream(stream: &EventStream) -> Self {
        build_prefix_index(&build_daily_aggregates(stream))
    }

    pub fn series(&self, kind: EntityKind, entity: u32) -> Option<&Series> {
        match kind {
            EntityKind::User => self.users.get(entity as usize),
            EntityKind::Product => self.products.get(entity as usize),
            EntityKind::Category => self.categories.get(entity as usize),
            EntityKind::Global => Some(&self.global),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.global.days.is_empty()
            && self.users.iter().chain(&self.products).chain(&self.categories).all(|s| s.days.is_empty())
    }

    /// Statistics over the inclusive span `[first, last]`.
    pub fn range_stats(&self, kind: EntityKind, entity: u32, first: Day, last: Day) -> WindowStats {
        let window = (first <= last).then_some((first, last));
        let (count, sum_milli) = self
            .series(kind, entity)
            .map_or((0, 0), |s| s.range(first, last));
        WindowStats {
            count,
            sum_milli,
            window,
        }
    }

    /// Statistics over the look-back window ending the day before `t`.
    /// Unknown entities yield a zero count.
    pub fn window_stats(&self, kind: EntityKind, entity: u32, t: Day, window: Window) -> WindowStats {
        match window.span(t) {
            Some((first, last)) => self.range_stats(kind, entity, first, last),
            None => WindowStats::default(),
        }
    }
}

/// Reference implementation of [`PrefixIndex::window_stats`] by a linear
/// scan over raw events. Also the "no daily aggregation" benchmark baseline.
pub fn naive_window_stats(
    stream: &EventStream,
    kind: EntityKind,
    entity: u32,
    t: Day,
    window: Window,
) -> WindowStats {
    let Some((first, last)) = window.span(t) else {
        return WindowStats::default();
    };
    let mut stats = WindowStats {
        window: Some((first, last)),
        ..WindowStats::default()
    };
    for e in stream.events() {
        if e.day >= first && e.day <= last && (kind == EntityKind::Global || kind.entity_of(e) == entity) {
            stats.count += 1;
            stats.sum_milli += u64::from(e.rating.milli());
        }
    }
    stats
}

#[derive(Debug, Error)]
pub enum AggregateIoError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("aggregate row {row}: {message}")]
    Row { row: usize, message: String },
}

/// Name shown for the single global entity in dumps.
pub const GLOBAL_ENTITY: &str = "*";

/// Writes `kind,entity,day,count,sum` with entity names resolved through
/// `stream`'s intern tables.
pub fn write_aggregates_csv<W: Write>(
    writer: W,
    aggregates: &[DailyAggregate],
    stream: &EventStream,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["kind", "entity", "day", "count", "sum"])?;
    for a in aggregates {
        let name = match a.kind {
            EntityKind::User => stream.users().name(a.entity),
            EntityKind::Product => stream.products().name(a.entity),
            EntityKind::Category => stream.categories().name(a.entity),
            EntityKind::Global => Some(GLOBAL_ENTITY),
        }
        .unwrap_or_default();
        w.write_record([
            a.kind.as_str(),
            name,
            &a.day.to_string(),
            &a.count.to_string(),
            &format_milli(a.sum_milli),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dump written by [`write_aggregates_csv`], resolving names against
/// `stream`.
pub fn read_aggregates_csv<R: Read>(
    reader: R,
    stream: &EventStream,
) -> Result<Vec<DailyAggregate>, AggregateIoError> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let bad = |message: String| AggregateIoError::Row { row, message };
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 columns, found {}", rec.len())));
        }
        let kind: EntityKind = rec[0].parse().map_err(bad)?;
        let name = &rec[1];
        let entity = match kind {
            EntityKind::User => stream.users().get(name),
            EntityKind::Product => stream.products().get(name),
            EntityKind::Category => stream.categories().get(name),
            EntityKind::Global => Some(0),
        }
        .ok_or_else(|| bad(format!("unknown {kind} '{name}'")))?;
        let day: Day = rec[2].parse().map_err(|_| bad(format!("bad day '{}'", &rec[2])))?;
        let count: u64 = rec[3].parse().map_err(|_| bad(format!("bad count '{}'", &rec[3])))?;
        let sum_milli = parse_milli(&rec[4]).ok_or_else(|| bad(format!("bad sum '{}'", &rec[4])))?;
        if count == 0 {
            return Err(bad("zero-count row".to_owned()));
        }
        out.push(DailyAggregate {
            kind,
            entity,
            day,
            count,
            sum_milli,
        });
    }
    Ok(out)
}
