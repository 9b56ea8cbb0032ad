//! Multinomial linear classifier trained with mini-batch SGD.
//!
//! Objective: mean softmax cross-entropy over the batch plus
//! `0.5 · l2 · ‖W‖²`. Weights start at zero. Batch gradients are summed in
//! fixed chunks whose partial sums are combined in chunk order, so training
//! is bit-reproducible with or without the `parallel` feature.

use std::fmt::Write as _;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::dataset::ClassLabel;
use crate::image_core::{resize, RgbImage};
use crate::par;
use crate::rng::SplitMix64;

/// Side of the square thumbnail fed to the classifier.
pub const FEATURE_SIDE: usize = 32;

const MODEL_MAGIC: [u8; 4] = *b"LSCW";
const MODEL_VERSION: u32 = 1;

// Samples per partial gradient sum.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("loss became non-finite at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("feature length {actual} does not match model width {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("bad model file: {0}")]
    BadModel(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Flattened, channel-normalised thumbnail plus a trailing bias term.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Resizes to `side × side`, scales channels to `[0, 1]`, flattens
/// row-major (`y, x, channel`) and appends a constant 1.0.
pub fn featurize_with(img: &RgbImage, side: usize) -> FeatureVector {
    let small = resize(img, side, side).expect("side >= 1");
    let mut v = Vec::with_capacity(side * side * 3 + 1);
    for p in small.pixels() {
        v.extend(p.iter().map(|&c| f64::from(c) / 255.0));
    }
    v.push(1.0);
    FeatureVector(v)
}

pub fn featurize(img: &RgbImage) -> FeatureVector {
    featurize_with(img, FEATURE_SIDE)
}

#[derive(Debug, Clone)]
pub struct Example {
    pub features: FeatureVector,
    pub label: usize,
}

/// Row-major `classes × width` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
        }
    }

    pub fn from_weights(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self, TrainError> {
        if weights.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(TrainError::BadModel(format!(
                "{} weights for a {rows}x{cols} model",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(TrainError::BadModel("non-finite weight".into()));
        }
        Ok(Self { rows, cols, weights })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn check_width(&self, fv: &FeatureVector) -> Result<(), TrainError> {
        if fv.len() != self.cols {
            return Err(TrainError::DimensionMismatch {
                expected: self.cols,
                actual: fv.len(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, fv: &FeatureVector) -> Vec<f64> {
        self.weights
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(&fv.0).map(|(w, x)| w * x).sum())
            .collect()
    }

    /// 16-byte header (`LSCW`, version, rows, cols as little-endian u32)
    /// followed by the weights as little-endian f64, row-major.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TrainError> {
        w.write_all(&MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        for dim in [self.rows, self.cols] {
            let dim = u32::try_from(dim).map_err(|_| TrainError::BadModel("dimension exceeds u32".into()))?;
            w.write_all(&dim.to_le_bytes())?;
        }
        for x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, TrainError> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if header[..4] != MODEL_MAGIC {
            return Err(TrainError::BadModel("wrong magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != MODEL_VERSION {
            return Err(TrainError::BadModel(format!("unsupported version {}", word(4))));
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf)?;
        let weights = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Self::from_weights(rows, cols, weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.1,
            batch_size: 16,
            seed: 0,
            l2: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::BadConfig(format!(
                "learning_rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(TrainError::BadConfig(format!("l2 must be >= 0, got {}", self.l2)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub entries: Vec<EpochStats>,
}

impl LossCurve {
    /// `epoch,train_loss,val_loss,val_accuracy`, epochs numbered from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_accuracy\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                e.epoch, e.train_loss, e.val_loss, e.val_accuracy
            );
        }
        s
    }
}

/// Softmax probabilities from logits, max-subtracted.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of one sample, via log-sum-exp.
fn sample_loss(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn check_batch(params: &ModelParams, batch: &[Example]) -> Result<(), TrainError> {
    for ex in batch {
        params.check_width(&ex.features)?;
        if ex.label >= params.rows {
            return Err(TrainError::BadLabel {
                label: ex.label,
                classes: params.rows,
            });
        }
    }
    Ok(())
}

/// Objective (mean cross-entropy + `0.5·l2·‖W‖²`) without the gradient.
pub fn objective(params: &ModelParams, batch: &[Example], l2: f64) -> f64 {
    let ce: f64 = batch
        .iter()
        .map(|ex| sample_loss(&params.logits(&ex.features), ex.label))
        .sum::<f64>()
        / batch.len() as f64;
    ce + 0.5 * l2 * params.weights.iter().map(|w| w * w).sum::<f64>()
}

/// Objective and its gradient with respect to every weight.
pub fn loss_and_grad(params: &ModelParams, batch: &[Example], l2: f64) -> (f64, Vec<f64>) {
    let (rows, cols) = (params.rows, params.cols);
    let chunks: Vec<&[Example]> = batch.chunks(GRAD_CHUNK).collect();
    let partials = par::map(&chunks, |chunk| {
        let mut loss = 0.0;
        let mut grad = vec![0.0; rows * cols];
        for ex in chunk.iter() {
            let logits = params.logits(&ex.features);
            loss += sample_loss(&logits, ex.label);
            let p = softmax(&logits);
            for (c, g_row) in grad.chunks_exact_mut(cols).enumerate() {
                let coef = p[c] - if c == ex.label { 1.0 } else { 0.0 };
                for (g, x) in g_row.iter_mut().zip(&ex.features.0) {
                    *g += coef * x;
                }
            }
        }
        (loss, grad)
    });
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; rows * cols];
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    for (g, w) in grad.iter_mut().zip(&params.weights) {
        *g = *g * inv + l2 * w;
    }
    let penalty = 0.5 * l2 * params.weights.iter().map(|w| w * w).sum::<f64>();
    (loss * inv + penalty, grad)
}

/// Argmax of the logits; ties go to the smallest ordinal.
pub fn predict_index(params: &ModelParams, fv: &FeatureVector) -> Result<usize, TrainError> {
    params.check_width(fv)?;
    let logits = params.logits(fv);
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn predict(params: &ModelParams, fv: &FeatureVector) -> Result<ClassLabel, TrainError> {
    let i = predict_index(params, fv)?;
    ClassLabel::from_ordinal(i).ok_or(TrainError::BadLabel {
        label: i,
        classes: ClassLabel::COUNT,
    })
}

/// Mean cross-entropy (no penalty) and accuracy over `data`.
pub fn evaluate(params: &ModelParams, data: &[Example]) -> (f64, f64) {
    let per = par::map(data, |ex| {
        let logits = params.logits(&ex.features);
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate().skip(1) {
            if z > logits[best] {
                best = i;
            }
        }
        (sample_loss(&logits, ex.label), best == ex.label)
    });
    let n = data.len() as f64;
    let loss = per.iter().map(|(l, _)| l).sum::<f64>() / n;
    let acc = per.iter().filter(|(_, ok)| *ok).count() as f64 / n;
    (loss, acc)
}

/// Trains from zero weights. The epoch-`e` visiting order is a
/// `SplitMix64::derive(seed, e)` shuffle of the training indices.
pub fn train(
    train_set: &[Example],
    val_set: &[Example],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<(ModelParams, LossCurve), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let width = train_set[0].features.len();
    let mut params = ModelParams::zeros(classes, width);
    check_batch(&params, train_set)?;
    check_batch(&params, val_set)?;

    let mut curve = LossCurve::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        SplitMix64::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        for idx in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| train_set[i].clone()));
            let (loss, grad) = loss_and_grad(&params, &batch, cfg.l2);
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch });
            }
            for (w, g) in params.weights.iter_mut().zip(&grad) {
                *w -= cfg.learning_rate * g;
            }
        }
        let (train_loss, _) = evaluate(&params, train_set);
        let (val_loss, val_accuracy) = evaluate(&params, val_set);
        if !train_loss.is_finite() || !val_loss.is_finite() || params.weights.iter().any(|w| !w.is_finite()) {
            return Err(TrainError::Divergence { epoch });
        }
        log::debug!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4} acc {val_accuracy:.4}");
        curve.entries.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
    }
    Ok((params, curve))
}

/// Finite-difference step for [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Coordinates where both gradients are below this are skipped.
pub const GRAD_CHECK_FLOOR: f64 = 1e-10;
/// Number of coordinates sampled by [`grad_check`].
pub const GRAD_CHECK_COORDS: usize = 100;

/// `objective(w + step·eᵢ) − objective(w − step·eᵢ)`.
///
/// Moving weight `i` only shifts logit `r = i / cols` of each sample by
/// `±step·x`, so each log-sum-exp changes by `log1p(p_r·expm1(±step·x))`.
/// Summing those changes avoids subtracting two nearly equal objectives,
/// whose rounding would otherwise swamp gradients far below the loss.
fn objective_delta(params: &ModelParams, batch: &[Example], l2: f64, i: usize, step: f64) -> f64 {
    let (r, j) = (i / params.cols, i % params.cols);
    let ce: f64 = batch
        .iter()
        .map(|ex| {
            let x = ex.features.0[j];
            if x == 0.0 {
                return 0.0;
            }
            let p = softmax(&params.logits(&ex.features))[r];
            let up = (p * (step * x).exp_m1()).ln_1p();
            let down = (p * (-step * x).exp_m1()).ln_1p();
            let own = if ex.label == r { 2.0 * step * x } else { 0.0 };
            up - down - own
        })
        .sum::<f64>()
        / batch.len() as f64;
    // 0.5·l2·((w + s)² − (w − s)²)
    ce + 2.0 * l2 * params.weights[i] * step
}

/// Max relative error `|a − n| / max(|a|, |n|)` between `analytic` and the
/// central finite difference `n` of the objective over `coords`.
pub fn check_gradient(params: &ModelParams, batch: &[Example], l2: f64, analytic: &[f64], coords: &[usize]) -> f64 {
    let mut worst = 0.0f64;
    for &i in coords {
        let numeric = objective_delta(params, batch, l2, i, GRAD_CHECK_STEP) / (2.0 * GRAD_CHECK_STEP);
        let a = analytic[i];
        if a.abs() < GRAD_CHECK_FLOOR && numeric.abs() < GRAD_CHECK_FLOOR {
            continue;
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()));
    }
    worst
}

/// Checks [`loss_and_grad`] on `GRAD_CHECK_COORDS` coordinates drawn with
/// `seed` (all of them if the model is smaller).
pub fn grad_check(params: &ModelParams, batch: &[Example], l2: f64, seed: u64) -> f64 {
    assert!(!batch.is_empty(), "grad_check needs a non-empty batch");
    let (_, analytic) = loss_and_grad(params, batch, l2);
    let total = params.weights.len();
    let coords: Vec<usize> = if total <= GRAD_CHECK_COORDS {
        (0..total).collect()
    } else {
        let mut rng = SplitMix64::new(seed);
        (0..GRAD_CHECK_COORDS).map(|_| rng.below(total as u64) as usize).collect()
    };
    check_gradient(params, batch, l2, &analytic, &coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::render_fixture_sample;

    fn random_problem(seed: u64, width: usize, n: usize) -> (ModelParams, Vec<Example>) {
        let mut rng = SplitMix64::new(seed);
        let weights = (0..5 * width).map(|_| rng.range_f64(-0.5, 0.5)).collect();
        let params = ModelParams::from_weights(5, width, weights).unwrap();
        let batch = (0..n)
            .map(|_| {
                let mut f: Vec<f64> = (0..width - 1).map(|_| rng.next_f64()).collect();
                f.push(1.0);
                Example {
                    features: FeatureVector(f),
                    label: rng.below(5) as usize,
                }
            })
            .collect();
        (params, batch)
    }

    #[test]
    fn featurize_examples() {
        let black = RgbImage::filled(128, 128, [0, 0, 0]).unwrap();
        let f = featurize(&black);
        assert_eq!(f.len(), 3073);
        assert!(f.0[..3072].iter().all(|&x| x == 0.0));
        assert_eq!(f.0[3072], 1.0);
        let white = RgbImage::filled(128, 128, [255, 255, 255]).unwrap();
        let w = featurize(&white);
        assert!(w.0.iter().all(|&x| x == 1.0));
        assert_eq!(w.len(), 3073);
        let s = render_fixture_sample(ClassLabel::Monocyte, 0, 1, 128).image;
        assert_eq!(featurize(&s), featurize(&s.clone()));
    }

    #[test]
    fn predict_examples() {
        let zero = ModelParams::zeros(5, 4);
        let fv = FeatureVector(vec![0.3, 0.1, 0.9, 1.0]);
        assert_eq!(predict(&zero, &fv).unwrap(), ClassLabel::Basophil);

        let mut w = ModelParams::zeros(5, 4);
        w.weights_mut()[3 * 4 + 3] = 1.0;
        for x in [[0.0, 0.0, 0.0, 1.0], [1.0, 1.0, 1.0, 1.0], [0.2, 0.9, 0.4, 1.0]] {
            assert_eq!(predict(&w, &FeatureVector(x.to_vec())).unwrap(), ClassLabel::Myeloblast);
        }
        assert!(matches!(
            predict(&w, &FeatureVector(vec![1.0])),
            Err(TrainError::DimensionMismatch { expected: 4, actual: 1 })
        ));
    }

    #[test]
    fn logit_shift_keeps_prediction() {
        let (mut params, batch) = random_problem(3, 9, 20);
        let before: Vec<usize> = batch.iter().map(|e| predict_index(&params, &e.features).unwrap()).collect();
        // Adding the same amount to every row's bias weight shifts all logits equally.
        for r in 0..5 {
            params.weights_mut()[r * 9 + 8] += 2.5;
        }
        let after: Vec<usize> = batch.iter().map(|e| predict_index(&params, &e.features).unwrap()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn softmax_sums_to_one() {
        let (params, batch) = random_problem(4, 12, 50);
        for ex in &batch {
            let p = softmax(&params.logits(&ex.features));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let p = softmax(&[800.0, -800.0, 0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn objective_delta_matches_direct_difference() {
        let (params, batch) = random_problem(6, 7, 10);
        for i in 0..params.weights().len() {
            let mut probe = params.clone();
            probe.weights_mut()[i] += 1e-2;
            let plus = objective(&probe, &batch, 1e-3);
            probe.weights_mut()[i] -= 2e-2;
            let minus = objective(&probe, &batch, 1e-3);
            let d = objective_delta(&params, &batch, 1e-3, i, 1e-2);
            assert!((d - (plus - minus)).abs() < 1e-13, "coord {i}: {d} vs {}", plus - minus);
        }
    }

    #[test]
    fn grad_check_passes() {
        for seed in 0..5 {
            let (params, batch) = random_problem(seed, 40, 16);
            let err = grad_check(&params, &batch, 1e-3, seed);
            assert!(err <= 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn grad_check_detects_sign_flip() {
        let (params, batch) = random_problem(9, 10, 8);
        let (_, mut g) = loss_and_grad(&params, &batch, 0.0);
        let i = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
        g[i] = -g[i];
        let err = check_gradient(&params, &batch, 0.0, &g, &[i]);
        assert!((err - 2.0).abs() < 1e-4, "{err}");
    }

    #[test]
    fn grad_check_saturated_softmax() {
        let mut params = ModelParams::zeros(5, 2);
        params.weights_mut()[2 * 2] = 60.0; // class 2 on feature 0
        let batch = vec![Example {
            features: FeatureVector(vec![1.0, 1.0]),
            label: 2,
        }];
        let (_, g) = loss_and_grad(&params, &batch, 0.0);
        assert!(g.iter().all(|x| x.abs() < 1e-8));
        assert_eq!(grad_check(&params, &batch, 0.0, 0), 0.0);
    }

    fn fixture_examples(indices: std::ops::Range<usize>, size: usize, side: usize) -> Vec<Example> {
        ClassLabel::ALL
            .iter()
            .flat_map(|&l| {
                indices.clone().map(move |i| Example {
                    features: featurize_with(&render_fixture_sample(l, i, 0, size).image, side),
                    label: l.ordinal(),
                })
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_keeps_uniform_loss() {
        let data = fixture_examples(0..4, 64, 16);
        let cfg = TrainConfig { epochs: 3, learning_rate: 0.0, ..Default::default() };
        let (params, curve) = train(&data, &data, 5, &cfg).unwrap();
        assert!(params.weights().iter().all(|&w| w == 0.0));
        assert_eq!(curve.entries.len(), 3);
        for e in &curve.entries {
            assert!((e.train_loss - 5f64.ln()).abs() < 1e-12);
            assert_eq!(e.train_loss, curve.entries[0].train_loss);
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let train_set = fixture_examples(0..70, 128, FEATURE_SIDE);
        let val_set = fixture_examples(70..85, 128, FEATURE_SIDE);
        let cfg = TrainConfig { seed: 5, ..Default::default() };
        let (p1, c1) = train(&train_set, &val_set, 5, &cfg).unwrap();
        let (p2, c2) = train(&train_set, &val_set, 5, &cfg).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(p1, p2);
        let last = c1.entries.last().unwrap();
        assert_eq!(last.epoch, 50);
        assert!(last.val_accuracy >= 0.95, "{last:?}");
    }

    #[test]
    fn small_lr_train_loss_non_increasing() {
        let data = fixture_examples(0..20, 128, FEATURE_SIDE);
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: data.len(),
            l2: 0.0,
            ..Default::default()
        };
        let (_, curve) = train(&data, &data, 5, &cfg).unwrap();
        for w in curve.entries.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss, "{:?}", w);
        }
        assert!(curve.entries[19].train_loss < curve.entries[0].train_loss);
    }

    #[test]
    fn divergence_is_reported() {
        let mut data = fixture_examples(0..2, 64, 16);
        for ex in &mut data {
            for x in &mut ex.features.0 {
                *x *= 1e200;
            }
        }
        let cfg = TrainConfig { epochs: 3, learning_rate: 1e10, ..Default::default() };
        assert!(matches!(train(&data, &data, 5, &cfg), Err(TrainError::Divergence { epoch: 1 })));
    }

    #[test]
    fn config_and_split_errors() {
        let data = fixture_examples(0..1, 64, 16);
        assert!(matches!(train(&[], &data, 5, &TrainConfig::default()), Err(TrainError::EmptySplit("train"))));
        assert!(matches!(train(&data, &[], 5, &TrainConfig::default()), Err(TrainError::EmptySplit("val"))));
        let bad = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(matches!(train(&data, &data, 5, &bad), Err(TrainError::BadConfig(_))));
    }

    #[test]
    fn model_blob_round_trip() {
        let (params, _) = random_problem(6, 7, 1);
        let mut buf = Vec::new();
        params.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 5 * 7 * 8);
        assert_eq!(&buf[..4], b"LSCW");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 7);
        assert_eq!(ModelParams::read_from(&buf[..]).unwrap(), params);
        buf[0] = b'X';
        assert!(ModelParams::read_from(&buf[..]).is_err());
    }

    #[test]
    fn loss_curve_csv() {
        let c = LossCurve {
            entries: vec![EpochStats { epoch: 1, train_loss: 1.5, val_loss: 1.25, val_accuracy: 0.5 }],
        };
        assert_eq!(c.to_csv(), "epoch,train_loss,val_loss,val_accuracy\n1,1.500000,1.250000,0.500000\n");
    }
}
