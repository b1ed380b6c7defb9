//! Synthetic workloads and brute-force reference implementations.
//!
//! Nothing in here touches the daily aggregates or the prefix index: the
//! references scan raw events so they can be used to check the fast paths.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::Window;
use crate::ingest::{Day, EventStream, Interner, Rating, RatingEvent};
use crate::trees::{Level, Query, TreeKind, TreeOutput};

/// Four-event fixture used throughout the tests:
///
/// ```text
/// u1,p1,Books,5,100
/// u1,p2,Books,4,105
/// u2,p1,Books,2,106
/// u3,p3,Electronics,3,107
/// ```
pub const D0_CSV: &str = "u1,p1,Books,5,100\nu1,p2,Books,4,105\nu2,p1,Books,2,106\nu3,p3,Electronics,3,107\n";

pub fn d0_stream() -> EventStream {
    EventStream::from_raw_events(D0_CSV.lines().enumerate().map(|(i, line)| {
        crate::ingest::parse_event_line(line, crate::ingest::Format::Csv, i + 1).expect("D0 fixture parses")
    }))
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid synthetic config: {0}")]
pub struct SynthError(pub String);

/// Knobs for [`generate_synthetic`].
///
/// A rating's latent value is
/// `global_mean + user_bias_weight * user_effect + product_bias_weight * product_effect
///  + user_slope * (day - user_start) + product_slope * (day - product_start) + noise`,
/// clamped to `[1, 5]` and rounded to whole stars. Effects are uniform on
/// `[-effect_scale, effect_scale]`, slopes uniform on `trend_slope_range`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_products: usize,
    pub n_categories: usize,
    pub n_events: usize,
    pub user_bias_weight: f64,
    pub product_bias_weight: f64,
    /// Per-day drift of an entity's mean, `(low, high)`.
    pub trend_slope_range: (f64, f64),
    pub noise_std: f64,
    /// Share of users and of products that only exist from `cold_start_day` on.
    pub cold_start_fraction: f64,
    /// Inclusive.
    pub day_range: (Day, Day),
    pub cold_start_day: Day,
    /// 0 draws entities uniformly; `s > 0` weights entity `i` by `(i + 1)^-s`.
    pub popularity_exponent: f64,
    pub global_mean: f64,
    pub effect_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 2_000,
            n_products: 1_000,
            n_categories: 8,
            n_events: 20_000,
            user_bias_weight: 0.5,
            product_bias_weight: 0.5,
            trend_slope_range: (-1e-4, 1e-4),
            noise_std: 0.6,
            cold_start_fraction: 0.1,
            // 2008-01-26 .. 2018-10-31; cold entities arrive 2017-01-01.
            day_range: (13_904, 17_835),
            cold_start_day: 17_167,
            popularity_exponent: 0.0,
            global_mean: 3.5,
            effect_scale: 1.5,
            seed: 42,
        }
    }
}

impl SynthConfig {
    fn n_cold(&self, n: usize) -> usize {
        (self.cold_start_fraction * n as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError(m.to_owned()));
        if self.n_users == 0 || self.n_products == 0 || self.n_categories == 0 {
            return bad("n_users, n_products and n_categories must be positive");
        }
        if self.n_events == 0 {
            return bad("n_events must be at least 1");
        }
        for (name, w) in [
            ("user_bias_weight", self.user_bias_weight),
            ("product_bias_weight", self.product_bias_weight),
            ("cold_start_fraction", self.cold_start_fraction),
        ] {
            if !(0.0..=1.0).contains(&w) {
                return Err(SynthError(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if !(self.effect_scale >= 0.0 && self.effect_scale.is_finite()) {
            return bad("effect_scale must be finite and non-negative");
        }
        let (lo, hi) = self.trend_slope_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad("trend_slope_range must be a finite (low, high) pair");
        }
        if self.day_range.0 > self.day_range.1 {
            return bad("day_range start is after its end");
        }
        if self.cold_start_fraction > 0.0 {
            if self.cold_start_day <= self.day_range.0 || self.cold_start_day > self.day_range.1 {
                return bad("cold_start_day must fall after the first day and within day_range");
            }
            if self.n_cold(self.n_users) >= self.n_users || self.n_cold(self.n_products) >= self.n_products {
                return bad("cold_start_fraction leaves no warm users or products for the training period");
            }
        }
        Ok(())
    }
}

struct Entities {
    effect: Vec<f64>,
    slope: Vec<f64>,
    start: Vec<Day>,
    sampler: Option<WeightedIndex<f64>>,
}

impl Entities {
    fn draw(n: usize, n_cold: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let effect = (0..n)
            .map(|_| {
                if cfg.effect_scale > 0.0 {
                    rng.random_range(-cfg.effect_scale..=cfg.effect_scale)
                } else {
                    0.0
                }
            })
            .collect();
        let (lo, hi) = cfg.trend_slope_range;
        let slope = (0..n)
            .map(|_| if lo < hi { rng.random_range(lo..=hi) } else { lo })
            .collect();
        let start = (0..n)
            .map(|i| if i >= n - n_cold { cfg.cold_start_day } else { cfg.day_range.0 })
            .collect();
        let sampler = (cfg.popularity_exponent > 0.0).then(|| {
            WeightedIndex::new((0..n).map(|i| ((i + 1) as f64).powf(-cfg.popularity_exponent)))
                .expect("positive weights")
        });
        Entities {
            effect,
            slope,
            start,
            sampler,
        }
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> usize {
        match &self.sampler {
            Some(w) => w.sample(rng),
            None => rng.random_range(0..self.effect.len()),
        }
    }
}

/// Seeded synthetic review stream. Identical configs give identical streams.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<EventStream, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let users = Entities::draw(cfg.n_users, cfg.n_cold(cfg.n_users), cfg, &mut rng);
    let products = Entities::draw(cfg.n_products, cfg.n_cold(cfg.n_products), cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| SynthError(e.to_string()))?;

    let mut events = Vec::with_capacity(cfg.n_events);
    for _ in 0..cfg.n_events {
        let u = users.pick(&mut rng);
        let p = products.pick(&mut rng);
        let first = users.start[u].max(products.start[p]);
        let day = rng.random_range(first..=cfg.day_range.1);
        let latent = cfg.global_mean
            + cfg.user_bias_weight * users.effect[u]
            + cfg.product_bias_weight * products.effect[p]
            + users.slope[u] * f64::from(day - users.start[u])
            + products.slope[p] * f64::from(day - products.start[p])
            + noise.sample(&mut rng);
        let stars = latent.clamp(1.0, 5.0).round() as u32;
        events.push(RatingEvent {
            user: u as u32,
            product: p as u32,
            category: (p % cfg.n_categories) as u32,
            rating: Rating::from_milli(stars * Rating::SCALE).expect("clamped to [1, 5]"),
            day,
        });
    }

    let table = |prefix: &str, n: usize| {
        let mut t = Interner::new();
        for i in 0..n {
            t.intern(&format!("{prefix}{i}"));
        }
        t
    };
    Ok(EventStream::from_parts(
        events,
        table("u", cfg.n_users),
        table("p", cfg.n_products),
        table("c", cfg.n_categories),
    ))
}

/// Raw-scan evaluation of one cascade. Shares no code with the indexed path.
pub fn brute_force_tree_eval(
    stream: &EventStream,
    tree: TreeKind,
    q: &Query,
    window: Window,
    default_value: f64,
) -> TreeOutput {
    let t = u64::from(q.day);
    let visible = |d: Day| {
        let d = u64::from(d);
        d < t
            && match window {
                Window::Lifespan => true,
                Window::Days(len) => d + u64::from(len) >= t,
            }
    };
    let average = |keep: &dyn Fn(&RatingEvent) -> bool| -> Option<f64> {
        let (mut n, mut sum) = (0u64, 0u64);
        for e in stream.events() {
            if visible(e.day) && keep(e) {
                n += 1;
                sum += u64::from(e.rating.milli());
            }
        }
        (n > 0).then(|| sum as f64 / (n * 1000) as f64)
    };
    let product = || average(&|e| e.product == q.product).map(|v| (v, Level::Product));
    let user = || average(&|e| e.user == q.user).map(|v| (v, Level::User));
    let category = || average(&|e| e.category == q.category).map(|v| (v, Level::Category));
    let global = || average(&|_| true).map(|v| (v, Level::Global));

    let hit = match tree {
        TreeKind::Pt1 => product().or_else(category).or_else(global),
        TreeKind::Pt2 => product().or_else(user).or_else(category).or_else(global),
        TreeKind::Ut => user().or_else(product).or_else(category).or_else(global),
    };
    let (value, level) = hit.unwrap_or((default_value, Level::Default));
    TreeOutput { value, level, tree }
}

/// Pairwise AUC: concordant pairs plus half the tied pairs, over all
/// positive/negative pairs. `None` unless both classes are present.
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let (mut twice_credit, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                twice_credit += 2;
            } else if si == sj {
                twice_credit += 1;
            }
        }
    }
    (pairs > 0).then(|| twice_credit as f64 / (2 * pairs) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            n_events: 3_000,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.to_csv_string(false), b.to_csv_string(false));
        let c = generate_synthetic(&SynthConfig { seed: 7, ..cfg }).unwrap();
        assert_ne!(a.to_csv_string(false), c.to_csv_string(false));
    }

    #[test]
    fn pure_user_effect_is_constant_per_user() {
        let cfg = SynthConfig {
            n_events: 5_000,
            user_bias_weight: 1.0,
            product_bias_weight: 0.0,
            noise_std: 0.0,
            trend_slope_range: (0.0, 0.0),
            ..SynthConfig::default()
        };
        let s = generate_synthetic(&cfg).unwrap();
        let mut seen: HashMap<u32, Rating> = HashMap::new();
        for e in s.events() {
            assert_eq!(*seen.entry(e.user).or_insert(e.rating), e.rating, "user {}", e.user);
        }
    }

    #[test]
    fn event_count_and_day_bounds() {
        let cfg = SynthConfig {
            n_events: 10_000,
            ..SynthConfig::default()
        };
        let s = generate_synthetic(&cfg).unwrap();
        assert_eq!(s.len(), 10_000);
        let (lo, hi) = s.day_range().unwrap();
        assert!(lo >= cfg.day_range.0 && hi <= cfg.day_range.1);
    }

    #[test]
    fn cold_entities_only_appear_late() {
        let cfg = SynthConfig {
            n_events: 10_000,
            cold_start_fraction: 0.3,
            ..SynthConfig::default()
        };
        let s = generate_synthetic(&cfg).unwrap();
        let cold_users = (cfg.n_users - 600) as u32;
        let cold_products = (cfg.n_products - 300) as u32;
        let mut late = 0;
        for e in s.events() {
            if e.user >= cold_users || e.product >= cold_products {
                assert!(e.day >= cfg.cold_start_day);
                late += 1;
            }
        }
        assert!(late > 0);
    }

    #[test]
    fn power_law_option_skews_activity() {
        let cfg = SynthConfig {
            n_events: 20_000,
            popularity_exponent: 1.0,
            cold_start_fraction: 0.0,
            ..SynthConfig::default()
        };
        let s = generate_synthetic(&cfg).unwrap();
        let first = s.events().iter().filter(|e| e.user == 0).count();
        let last = s.events().iter().filter(|e| e.user == 1999).count();
        assert!(first > 20 * last.max(1));
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let base = SynthConfig::default();
        assert!(generate_synthetic(&SynthConfig { cold_start_fraction: 1.0, ..base.clone() }).is_err());
        assert!(generate_synthetic(&SynthConfig { n_events: 0, ..base.clone() }).is_err());
        assert!(generate_synthetic(&SynthConfig { user_bias_weight: 1.5, ..base.clone() }).is_err());
        assert!(generate_synthetic(&SynthConfig { day_range: (10, 5), ..base.clone() }).is_err());
        assert!(generate_synthetic(&SynthConfig { cold_start_day: 1, ..base }).is_err());
    }

    #[test]
    fn labels_are_balanced_enough() {
        let s = generate_synthetic(&SynthConfig::default()).unwrap();
        let pos = s.events().iter().filter(|e| e.rating.stars() > 3.0).count();
        let frac = pos as f64 / s.len() as f64;
        assert!((0.3..0.7).contains(&frac), "positive share {frac}");
    }

    #[test]
    fn d0_tree_examples() {
        let s = d0_stream();
        let q = |u: &str, p: &str, c: &str| Query {
            user: s.users().get(u).unwrap(),
            product: s.products().get(p).unwrap(),
            category: s.categories().get(c).unwrap(),
            day: 107,
        };
        let w = Window::Days(7);
        let cases = [
            (TreeKind::Pt1, q("u1", "p1", "Books"), 3.5, Level::Product),
            (TreeKind::Pt1, q("u1", "p3", "Electronics"), 11.0 / 3.0, Level::Global),
            (TreeKind::Pt2, q("u1", "p3", "Electronics"), 4.5, Level::User),
            (TreeKind::Pt2, q("u1", "p1", "Books"), 3.5, Level::Product),
            (TreeKind::Ut, q("u2", "p3", "Electronics"), 2.0, Level::User),
            (TreeKind::Ut, q("u3", "p1", "Books"), 3.5, Level::Product),
        ];
        for (tree, query, value, level) in cases {
            let out = brute_force_tree_eval(&s, tree, &query, w, 3.0);
            assert_eq!((out.value, out.level), (value, level), "{tree}");
        }
        let empty = EventStream::default();
        let out = brute_force_tree_eval(&empty, TreeKind::Ut, &q("u1", "p1", "Books"), w, 3.0);
        assert_eq!((out.value, out.level), (3.0, Level::Default));
    }

    #[test]
    fn pairwise_auc_examples() {
        assert_eq!(brute_force_auc(&[0.8, 0.4, 0.6, 0.2], &[1, 1, 0, 0]), Some(0.75));
        assert_eq!(brute_force_auc(&[0.5, 0.5], &[1, 0]), Some(0.5));
        assert_eq!(brute_force_auc(&[0.5, 0.1], &[1, 1]), None);
    }
}
