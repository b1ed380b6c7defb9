//! Logistic-regression combiner over tree features.
//!
//! Full-batch gradient descent on the mean logistic loss plus `l2 / 2 * |w|^2`,
//! run on standardized inputs. Training keeps the weights from the epoch
//! with the best validation AUC (ties broken by lower validation loss) and
//! stops after `patience` epochs without improvement.

use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{compute_auc, LabeledInstance, Split};

#[derive(Debug, Error)]
pub enum CombinerError {
    #[error("training data needs both classes (positives={n_pos}, negatives={n_neg})")]
    SingleClass { n_pos: usize, n_neg: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("expected {expected} features, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("model file: {0}")]
    Io(#[from] io::Error),
    #[error("model file: {0}")]
    Format(#[from] serde_json::Error),
}

/// Row-major feature matrix with labels and a category per row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    n_features: usize,
    x: Vec<f64>,
    y: Vec<u8>,
    category: Vec<u32>,
}

impl Dataset {
    pub fn new(n_features: usize) -> Self {
        Dataset {
            n_features,
            ..Dataset::default()
        }
    }

    pub fn push(&mut self, row: &[f64], label: u8, category: u32) {
        assert_eq!(row.len(), self.n_features, "row width");
        self.x.extend_from_slice(row);
        self.y.push(label);
        self.category.push(category);
    }

    /// Instances of `split` (all instances when `None`).
    pub fn from_instances(instances: &[LabeledInstance], split: Option<Split>) -> Self {
        let n = instances.first().map_or(0, |i| i.features.values.len());
        let mut d = Dataset::new(n);
        for i in instances.iter().filter(|i| split.is_none_or(|s| i.split == s)) {
            d.push(&i.features.values, i.label, i.query.category);
        }
        d
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn labels(&self) -> &[u8] {
        &self.y
    }

    pub fn categories(&self) -> &[u32] {
        &self.category
    }

    /// Rows whose category is `category`, order preserved.
    pub fn filter_category(&self, category: u32) -> Dataset {
        let mut d = Dataset::new(self.n_features);
        for i in 0..self.len() {
            if self.category[i] == category {
                d.push(self.row(i), self.y[i], category);
            }
        }
        d
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.y.iter().filter(|&&l| l == 1).count();
        (pos, self.len() - pos)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 0.5,
            l2: 1e-4,
            max_epochs: 300,
            patience: 20,
            seed: 42,
        }
    }
}

/// Per-feature mean and population standard deviation from training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Zero-variance columns; they standardize to 0 and keep weight 0.
    pub constant: Vec<bool>,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Self {
        let d = data.n_features;
        let n = data.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for i in 0..data.len() {
            for (m, &v) in mean.iter_mut().zip(data.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..data.len() {
            for ((s, &v), &m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        let constant = std
            .iter()
            .zip(&mean)
            .map(|(&s, &m)| s <= 1e-12 * (1.0 + m.abs()))
            .collect();
        Standardizer { mean, std, constant }
    }

    pub fn apply(&self, row: &[f64], out: &mut [f64]) {
        for j in 0..row.len() {
            out[j] = if self.constant[j] {
                0.0
            } else {
                (row[j] - self.mean[j]) / self.std[j]
            };
        }
    }

    fn transform(&self, data: &Dataset) -> Vec<f64> {
        let d = data.n_features;
        let mut z = vec![0.0; data.x.len()];
        for i in 0..data.len() {
            self.apply(data.row(i), &mut z[i * d..(i + 1) * d]);
        }
        z
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub setting: Option<String>,
    pub category_filter: Option<String>,
    pub feature_names: Vec<String>,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub standardizer: Standardizer,
    pub meta: ModelMeta,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

const CHUNK: usize = 4096;

/// Mean logistic loss + L2 penalty and its gradient at `(w, b)` over a
/// standardized matrix. Chunks are reduced in a fixed order, so the result
/// does not depend on the thread count.
fn loss_and_gradient(z: &[f64], y: &[u8], d: usize, w: &[f64], b: f64, l2: f64) -> (f64, Vec<f64>, f64) {
    let n = y.len();
    let partials: Vec<(f64, Vec<f64>, f64)> = z
        .par_chunks(CHUNK * d.max(1))
        .zip(y.par_chunks(CHUNK))
        .map(|(zc, yc)| {
            let mut loss = 0.0;
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (i, &label) in yc.iter().enumerate() {
                let row = &zc[i * d..(i + 1) * d];
                let logit = b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
                let target = f64::from(label);
                loss += softplus(logit) - target * logit;
                let r = sigmoid(logit) - target;
                for (g, &v) in gw.iter_mut().zip(row) {
                    *g += r * v;
                }
                gb += r;
            }
            (loss, gw, gb)
        })
        .collect();
    let mut loss = 0.0;
    let mut gw = vec![0.0; d];
    let mut gb = 0.0;
    for (l, g, b) in partials {
        loss += l;
        gw.iter_mut().zip(&g).for_each(|(a, c)| *a += c);
        gb += b;
    }
    let nf = n.max(1) as f64;
    let penalty: f64 = w.iter().map(|v| v * v).sum::<f64>() * l2 / 2.0;
    for (g, &wj) in gw.iter_mut().zip(w) {
        *g = *g / nf + l2 * wj;
    }
    (loss / nf + penalty, gw, gb / nf)
}

fn logits(z: &[f64], d: usize, w: &[f64], b: f64) -> Vec<f64> {
    z.par_chunks(d.max(1))
        .map(|row| b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

/// Fits the combiner. `valid` drives early stopping when it holds both
/// classes; otherwise training runs for `max_epochs`.
pub fn fit(train: &Dataset, valid: &Dataset, config: &FitConfig, mut meta: ModelMeta) -> Result<LinearModel, CombinerError> {
    let (n_pos, n_neg) = train.class_counts();
    if n_pos == 0 || n_neg == 0 {
        return Err(CombinerError::SingleClass { n_pos, n_neg });
    }
    if !valid.is_empty() && valid.n_features != train.n_features {
        return Err(CombinerError::LengthMismatch {
            expected: train.n_features,
            got: valid.n_features,
        });
    }
    let d = train.n_features;
    let standardizer = Standardizer::fit(train);
    let zt = standardizer.transform(train);
    let zv = standardizer.transform(valid);
    let (vp, vn) = valid.class_counts();
    let early_stopping = vp > 0 && vn > 0;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w: Vec<f64> = standardizer
        .constant
        .iter()
        .map(|&c| {
            let r = rng.random_range(-0.01..0.01);
            if c {
                0.0
            } else {
                r
            }
        })
        .collect();
    let mut b = 0.0;

    let mut best = (w.clone(), b, 0usize);
    let mut best_score = (f64::NEG_INFINITY, f64::INFINITY);
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        let (loss, gw, gb) = loss_and_gradient(&zt, &train.y, d, &w, b, config.l2);
        if !loss.is_finite() {
            return Err(CombinerError::NonFiniteLoss { epoch });
        }
        for j in 0..d {
            if !standardizer.constant[j] {
                w[j] -= config.learning_rate * gw[j];
            }
        }
        b -= config.learning_rate * gb;
        epochs_run = epoch;

        if early_stopping {
            let lv = logits(&zv, d, &w, b);
            let auc = compute_auc(&lv, &valid.y).unwrap_or(0.5);
            let vloss = lv
                .iter()
                .zip(&valid.y)
                .map(|(&z, &y)| softplus(z) - f64::from(y) * z)
                .sum::<f64>()
                / lv.len() as f64;
            if auc > best_score.0 || (auc == best_score.0 && vloss < best_score.1) {
                best_score = (auc, vloss);
                best = (w.clone(), b, epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
        } else {
            best = (w.clone(), b, epoch);
        }
    }

    let (weights, bias, best_epoch) = best;
    meta.seed = config.seed;
    meta.epochs_run = epochs_run;
    meta.best_epoch = best_epoch;
    Ok(LinearModel {
        weights,
        bias,
        standardizer,
        meta,
    })
}

impl LinearModel {
    pub fn n_features(&self) -> usize {
        self.weights.len()
    }

    pub fn logit(&self, features: &[f64]) -> Result<f64, CombinerError> {
        if features.len() != self.weights.len() {
            return Err(CombinerError::LengthMismatch {
                expected: self.weights.len(),
                got: features.len(),
            });
        }
        let mut z = vec![0.0; features.len()];
        self.standardizer.apply(features, &mut z);
        Ok(self.bias + z.iter().zip(&self.weights).map(|(a, c)| a * c).sum::<f64>())
    }

    pub fn predict_many(&self, data: &Dataset) -> Result<Vec<f64>, CombinerError> {
        (0..data.len()).map(|i| predict_proba(self, data.row(i))).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CombinerError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CombinerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String, CombinerError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, CombinerError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// `sigmoid(w · standardize(x) + b)`.
pub fn predict_proba(model: &LinearModel, features: &[f64]) -> Result<f64, CombinerError> {
    model.logit(features).map(sigmoid)
}

/// Largest relative gap between the analytic gradient of the training
/// objective (at the model's weights, on its standardized scale) and central
/// finite differences with step `1e-5`. The gap is `|a - n| / max(|a|, |n|, 1e-6)`,
/// so coordinates where both gradients vanish compare absolutely.
pub fn gradient_check(model: &LinearModel, batch: &Dataset, l2: f64) -> f64 {
    const STEP: f64 = 1e-5;
    let d = batch.n_features;
    let z = model.standardizer.transform(batch);
    let (_, gw, gb) = loss_and_gradient(&z, &batch.y, d, &model.weights, model.bias, l2);
    let loss_at = |w: &[f64], b: f64| loss_and_gradient(&z, &batch.y, d, w, b, l2).0;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);

    let mut worst: f64 = 0.0;
    let mut w = model.weights.clone();
    for j in 0..d {
        let orig = w[j];
        w[j] = orig + STEP;
        let up = loss_at(&w, model.bias);
        w[j] = orig - STEP;
        let down = loss_at(&w, model.bias);
        w[j] = orig;
        worst = worst.max(rel(gw[j], (up - down) / (2.0 * STEP)));
    }
    let up = loss_at(&w, model.bias + STEP);
    let down = loss_at(&w, model.bias - STEP);
    worst.max(rel(gb, (up - down) / (2.0 * STEP)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::brute_force_auc;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn toy(n: usize, d: usize, seed: u64, noise: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut data = Dataset::new(d);
        for i in 0..n {
            let row: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng) * 2.0 + 3.0).collect();
            let signal = row.iter().enumerate().map(|(j, v)| (v - 3.0) * (1.0 - 0.3 * j as f64)).sum::<f64>();
            let label = u8::from(signal + noise * normal.sample(&mut rng) > 0.0);
            data.push(&row, label, (i % 3) as u32);
        }
        data
    }

    fn model_with(weights: Vec<f64>, bias: f64, data: &Dataset) -> LinearModel {
        LinearModel {
            weights,
            bias,
            standardizer: Standardizer::fit(data),
            meta: ModelMeta::default(),
        }
    }

    #[test]
    fn separable_data_reaches_perfect_training_auc() {
        let mut data = Dataset::new(2);
        for i in 0..40 {
            let x = f64::from(i) / 4.0;
            data.push(&[x, 10.0 - x], u8::from(i >= 20), 0);
        }
        let model = fit(&data, &Dataset::new(2), &FitConfig::default(), ModelMeta::default()).unwrap();
        let scores = model.predict_many(&data).unwrap();
        let auc = brute_force_auc(&scores, data.labels()).unwrap();
        assert!((auc - 1.0).abs() < 1e-3, "auc {auc}");
    }

    #[test]
    fn constant_features_recover_base_rate_intercept() {
        let mut data = Dataset::new(3);
        for i in 0..100 {
            data.push(&[0.0, 0.0, 0.0], u8::from(i % 4 == 0), 0);
        }
        let model = fit(&data, &Dataset::new(3), &FitConfig::default(), ModelMeta::default()).unwrap();
        assert_eq!(model.weights, vec![0.0; 3]);
        let p: f64 = 0.25;
        assert!((model.bias - (p / (1.0 - p)).ln()).abs() < 1e-6, "bias {}", model.bias);
    }

    #[test]
    fn fitting_is_deterministic() {
        let train = toy(3000, 4, 1, 1.0);
        let valid = toy(800, 4, 2, 1.0);
        let cfg = FitConfig::default();
        let a = fit(&train, &valid, &cfg, ModelMeta::default()).unwrap();
        let b = fit(&train, &valid, &cfg, ModelMeta::default()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(a.meta.best_epoch >= 1 && a.meta.best_epoch <= a.meta.epochs_run);
    }

    #[test]
    fn single_class_training_is_an_error() {
        let mut data = Dataset::new(1);
        data.push(&[1.0], 1, 0);
        data.push(&[2.0], 1, 0);
        assert!(matches!(
            fit(&data, &Dataset::new(1), &FitConfig::default(), ModelMeta::default()),
            Err(CombinerError::SingleClass { n_pos: 2, n_neg: 0 })
        ));
    }

    #[test]
    fn diverging_training_reports_epoch() {
        let data = toy(200, 2, 3, 0.0);
        let cfg = FitConfig {
            learning_rate: 1e300,
            max_epochs: 50,
            ..FitConfig::default()
        };
        match fit(&data, &Dataset::new(2), &cfg, ModelMeta::default()) {
            Err(CombinerError::NonFiniteLoss { epoch }) => assert!(epoch >= 1),
            other => panic!("expected a non-finite loss, got {other:?}"),
        }
    }

    #[test]
    fn predict_proba_examples() {
        let mut data = Dataset::new(1);
        data.push(&[-1.0], 0, 0);
        data.push(&[1.0], 1, 0);
        // standardization of [-1, 1] is the identity
        let zero = model_with(vec![0.0], 0.0, &data);
        assert_eq!(predict_proba(&zero, &[0.3]).unwrap(), 0.5);
        let big = model_with(vec![0.0], 40.0, &data);
        assert!(predict_proba(&big, &[0.0]).unwrap() > 0.999);
        let unit = model_with(vec![1.0], 0.0, &data);
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((predict_proba(&unit, &[1.0]).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.7311).abs() < 1e-4);
        assert!(matches!(
            predict_proba(&unit, &[1.0, 2.0]),
            Err(CombinerError::LengthMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn gradient_check_on_random_batches() {
        for seed in 0..20 {
            let data = toy(64, 5, seed, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let w: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let model = model_with(w, rng.random_range(-1.0..1.0), &data);
            assert!(gradient_check(&model, &data, 0.01) < 1e-4);
        }
        let one = toy(1, 3, 9, 1.0);
        let model = model_with(vec![0.2, -0.1, 0.4], 0.1, &one);
        assert!(gradient_check(&model, &one, 0.0) < 1e-4);
    }

    #[test]
    fn gradient_vanishes_near_separable_optimum() {
        let mut data = Dataset::new(1);
        data.push(&[-1.0], 0, 0);
        data.push(&[1.0], 1, 0);
        let model = model_with(vec![40.0], 0.0, &data);
        let z = model.standardizer.transform(&data);
        let (_, gw, gb) = loss_and_gradient(&z, data.labels(), 1, &model.weights, model.bias, 0.0);
        assert!(gw[0].abs() < 1e-15 && gb.abs() < 1e-15);
        assert!(gradient_check(&model, &data, 0.0) < 1e-4);
    }

    #[test]
    fn affine_rescaling_is_absorbed_by_standardization() {
        let data = toy(500, 3, 4, 1.0);
        let model = model_with(vec![0.7, -0.2, 1.1], 0.3, &data);
        let mut scaled = Dataset::new(3);
        for i in 0..data.len() {
            let row: Vec<f64> = data.row(i).iter().enumerate().map(|(j, v)| v * (j as f64 + 2.5) - 7.0).collect();
            scaled.push(&row, data.labels()[i], 0);
        }
        let refit = model_with(model.weights.clone(), model.bias, &scaled);
        for i in 0..data.len() {
            let a = predict_proba(&model, data.row(i)).unwrap();
            let b = predict_proba(&refit, scaled.row(i)).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn category_filter_sees_only_that_category() {
        let data = toy(600, 3, 5, 1.0);
        let filtered = data.filter_category(1);
        assert!(filtered.categories().iter().all(|&c| c == 1));
        assert_eq!(filtered.len(), data.categories().iter().filter(|&&c| c == 1).count());
        let mut manual = Dataset::new(3);
        for i in 0..data.len() {
            if data.categories()[i] == 1 {
                manual.push(data.row(i), data.labels()[i], 1);
            }
        }
        let cfg = FitConfig::default();
        let a = fit(&filtered, &Dataset::new(3), &cfg, ModelMeta::default()).unwrap();
        let b = fit(&manual, &Dataset::new(3), &cfg, ModelMeta::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stronger_l2_never_grows_weights() {
        let data = toy(400, 3, 6, 2.0);
        let mut prev = f64::INFINITY;
        for l2 in [0.0, 0.01, 0.1, 1.0] {
            let cfg = FitConfig {
                l2,
                max_epochs: 2000,
                ..FitConfig::default()
            };
            let m = fit(&data, &Dataset::new(3), &cfg, ModelMeta::default()).unwrap();
            let norm = m.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
            assert!(norm <= prev * (1.0 + 1e-9), "l2={l2}: {norm} > {prev}");
            prev = norm;
        }
    }

    #[test]
    fn model_file_round_trips() {
        let train = toy(300, 4, 7, 1.0);
        let model = fit(
            &train,
            &toy(100, 4, 8, 1.0),
            &FitConfig::default(),
            ModelMeta {
                setting: Some("S3".into()),
                category_filter: Some("Books".into()),
                feature_names: (0..4).map(|i| format!("f{i}")).collect(),
                ..ModelMeta::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let back = LinearModel::load(&path).unwrap();
        assert_eq!(back, model);
        for (a, b) in back.weights.iter().zip(&model.weights) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(seed in 0u64..1000, n in 1usize..40, d in 1usize..6, l2 in 0.0f64..0.5) {
            let data = toy(n, d, seed, 1.5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let model = model_with(w, rng.random_range(-1.0..1.0), &data);
            prop_assert!(gradient_check(&model, &data, l2) < 1e-4);
        }
    }
}
