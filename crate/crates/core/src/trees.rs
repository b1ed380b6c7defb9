//! The three fallback cascades and feature assembly.
//!
//! Each tree walks a fixed list of levels and returns the first windowed
//! average that has at least one rating behind it:
//!
//! | tree | cascade |
//! |------|---------|
//! | `PT1` | product, category, global |
//! | `PT2` | product, user, category, global |
//! | `UT`  | user, product, category, global |
//!
//! A total miss returns the configured default with [`Level::Default`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregate::{EntityKind, PrefixIndex, Window, WindowStats};
use crate::ingest::Day;

/// Rating-scale midpoint, used when every level of a cascade is empty.
pub const DEFAULT_VALUE: f64 = 3.0;

/// Ordered look-back windows, shortest first, lifespan last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSpec(Vec<Window>);

impl WindowSpec {
    /// 7d, 30d, 90d, 1y, 3y, 5y, lifespan.
    pub fn standard() -> Self {
        WindowSpec(vec![
            Window::Days(7),
            Window::Days(30),
            Window::Days(90),
            Window::Days(365),
            Window::Days(1095),
            Window::Days(1825),
            Window::Lifespan,
        ])
    }

    /// Validates a custom ladder: non-empty, finite lengths strictly
    /// ascending, exactly one lifespan and it comes last.
    pub fn new(windows: Vec<Window>) -> Result<Self, String> {
        let Some((last, finite)) = windows.split_last() else {
            return Err("window list is empty".to_owned());
        };
        if *last != Window::Lifespan {
            return Err("window list must end with lifespan".to_owned());
        }
        let mut prev = 0;
        for w in finite {
            match *w {
                Window::Days(d) if d > prev => prev = d,
                Window::Days(_) => return Err("window lengths must be strictly ascending".to_owned()),
                Window::Lifespan => return Err("lifespan may only appear last".to_owned()),
            }
        }
        Ok(WindowSpec(windows))
    }

    pub fn parse_list(items: &[String]) -> Result<Self, String> {
        let windows = items.iter().map(|s| s.parse()).collect::<Result<Vec<Window>, _>>()?;
        Self::new(windows)
    }

    pub fn windows(&self) -> &[Window] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TreeKind {
    Pt1,
    Pt2,
    Ut,
}

impl TreeKind {
    pub const ALL: [TreeKind; 3] = [TreeKind::Pt1, TreeKind::Pt2, TreeKind::Ut];

    pub fn cascade(self) -> &'static [Level] {
        match self {
            TreeKind::Pt1 => &[Level::Product, Level::Category, Level::Global],
            TreeKind::Pt2 => &[Level::Product, Level::User, Level::Category, Level::Global],
            TreeKind::Ut => &[Level::User, Level::Product, Level::Category, Level::Global],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TreeKind::Pt1 => "pt1",
            TreeKind::Pt2 => "pt2",
            TreeKind::Ut => "ut",
        }
    }
}

impl fmt::Display for TreeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which branch of a cascade produced a value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Product,
    User,
    Category,
    Global,
    Default,
}

impl Level {
    pub fn entity_kind(self) -> Option<EntityKind> {
        match self {
            Level::Product => Some(EntityKind::Product),
            Level::User => Some(EntityKind::User),
            Level::Category => Some(EntityKind::Category),
            Level::Global => Some(EntityKind::Global),
            Level::Default => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeOutput {
    pub value: f64,
    pub level: Level,
    pub tree: TreeKind,
}

impl TreeOutput {
    /// Value and level agree, ignoring which tree produced them.
    pub fn same_outcome(&self, other: &TreeOutput) -> bool {
        self.value.to_bits() == other.value.to_bits() && self.level == other.level
    }
}

/// One prediction point: this user rating this product on day `day`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Query {
    pub user: u32,
    pub product: u32,
    pub category: u32,
    pub day: Day,
}

impl Query {
    fn entity(&self, kind: EntityKind) -> u32 {
        match kind {
            EntityKind::User => self.user,
            EntityKind::Product => self.product,
            EntityKind::Category => self.category,
            EntityKind::Global => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    S1,
    S2,
    S3,
    S4,
}

impl Setting {
    pub const ALL: [Setting; 4] = [Setting::S1, Setting::S2, Setting::S3, Setting::S4];

    pub fn trees(self) -> &'static [TreeKind] {
        match self {
            Setting::S1 => &[TreeKind::Pt1],
            Setting::S2 => &[TreeKind::Pt2],
            Setting::S3 => &[TreeKind::Ut],
            Setting::S4 => &TreeKind::ALL,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::S1 => "S1",
            Setting::S2 => "S2",
            Setting::S3 => "S3",
            Setting::S4 => "S4",
        }
    }

    /// Feature column names, tree-major: `pt1_7d, …, pt1_life, pt2_7d, …`.
    pub fn column_names(self, spec: &WindowSpec) -> Vec<String> {
        self.trees()
            .iter()
            .flat_map(|t| spec.windows().iter().map(move |w| format!("{t}_{}", w.label())))
            .collect()
    }

    pub fn feature_len(self, spec: &WindowSpec) -> usize {
        self.trees().len() * spec.len()
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S1" => Ok(Setting::S1),
            "S2" => Ok(Setting::S2),
            "S3" => Ok(Setting::S3),
            "S4" => Ok(Setting::S4),
            other => Err(format!("unknown setting '{other}' (expected S1..S4)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub setting: Setting,
    pub values: Vec<f64>,
    pub levels: Vec<Level>,
    /// No ratings by the user on any day before the query day.
    pub user_cold_start: bool,
    pub product_cold_start: bool,
}

/// Evaluates cascades against an immutable index.
#[derive(Clone, Copy, Debug)]
pub struct TreeEvaluator<'a> {
    index: &'a PrefixIndex,
    default_value: f64,
}

impl<'a> TreeEvaluator<'a> {
    pub fn new(index: &'a PrefixIndex) -> Self {
        Self::with_default(index, DEFAULT_VALUE)
    }

    pub fn with_default(index: &'a PrefixIndex, default_value: f64) -> Self {
        TreeEvaluator { index, default_value }
    }

    pub fn index(&self) -> &'a PrefixIndex {
        self.index
    }

    pub fn default_value(&self) -> f64 {
        self.default_value
    }

    fn stats(&self, kind: EntityKind, q: &Query, window: Window) -> WindowStats {
        self.index.window_stats(kind, q.entity(kind), q.day, window)
    }

    pub fn eval(&self, tree: TreeKind, q: &Query, window: Window) -> TreeOutput {
        for &level in tree.cascade() {
            let kind = level.entity_kind().expect("cascades hold entity levels only");
            if let Some(value) = self.stats(kind, q, window).mean() {
                return TreeOutput { value, level, tree };
            }
        }
        TreeOutput {
            value: self.default_value,
            level: Level::Default,
            tree,
        }
    }

    pub fn eval_product_tree_1(&self, q: &Query, window: Window) -> TreeOutput {
        self.eval(TreeKind::Pt1, q, window)
    }

    pub fn eval_product_tree_2(&self, q: &Query, window: Window) -> TreeOutput {
        self.eval(TreeKind::Pt2, q, window)
    }

    pub fn eval_user_tree(&self, q: &Query, window: Window) -> TreeOutput {
        self.eval(TreeKind::Ut, q, window)
    }

    pub fn user_cold_start(&self, q: &Query) -> bool {
        self.stats(EntityKind::User, q, Window::Lifespan).count == 0
    }

    pub fn product_cold_start(&self, q: &Query) -> bool {
        self.stats(EntityKind::Product, q, Window::Lifespan).count == 0
    }

    pub fn assemble_features(&self, setting: Setting, q: &Query, spec: &WindowSpec) -> FeatureVector {
        let n = setting.feature_len(spec);
        let mut values = Vec::with_capacity(n);
        let mut levels = Vec::with_capacity(n);
        for &tree in setting.trees() {
            for &w in spec.windows() {
                let out = self.eval(tree, q, w);
                values.push(out.value);
                levels.push(out.level);
            }
        }
        FeatureVector {
            setting,
            values,
            levels,
            user_cold_start: self.user_cold_start(q),
            product_cold_start: self.product_cold_start(q),
        }
    }
}
