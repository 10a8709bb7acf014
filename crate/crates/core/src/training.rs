//! Losses, the per-file gradient loop, file-level data splits and
//! PQ-maximizing threshold selection.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::morphology::MorphFilterSpec;
use crate::nets::{self, binarize, Mode, ModelParams};
use crate::passage_metric::{PqReport, PqTally};
use crate::seed;

/// Weighted squared error with an optional penalty on frame-to-frame output
/// changes:
///
/// `Σ ω_t (y_t − r_t)² / Σ ω_t + λ Σ_{t≥1} (y_t − y_{t−1})²`
///
/// where `ω_t` is `positive_weight` on reference-positive frames and
/// `negative_weight` elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub positive_weight: f64,
    pub negative_weight: f64,
    #[serde(default)]
    pub derivative_lambda: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            positive_weight: 1.0,
            negative_weight: 1.0,
            derivative_lambda: 0.0,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.positive_weight > 0.0 && self.negative_weight > 0.0) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if !(self.derivative_lambda >= 0.0) {
            return Err(Error::Config("derivative_lambda must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_lengths(outputs: &[f64], targets: &[bool]) -> Result<()> {
    if outputs.len() != targets.len() {
        return Err(Error::LengthMismatch {
            expected: outputs.len(),
            actual: targets.len(),
        });
    }
    Ok(())
}

pub fn loss(outputs: &[f64], targets: &[bool], spec: &LossSpec) -> Result<f64> {
    loss_with_gradient(outputs, targets, spec).map(|(v, _)| v)
}

/// Loss value and its derivative with respect to every output.
pub fn loss_with_gradient(outputs: &[f64], targets: &[bool], spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    check_lengths(outputs, targets)?;
    let n = outputs.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let weight = |r: bool| if r { spec.positive_weight } else { spec.negative_weight };
    let total_weight: f64 = targets.iter().map(|&r| weight(r)).sum();

    let mut weighted = 0.0;
    let mut grad = vec![0.0; n];
    for t in 0..n {
        let r = if targets[t] { 1.0 } else { 0.0 };
        let e = outputs[t] - r;
        let w = weight(targets[t]);
        weighted += w * e * e;
        grad[t] = 2.0 * w * e / total_weight;
    }
    let mut value = weighted / total_weight;
    if spec.derivative_lambda > 0.0 {
        for t in 1..n {
            let d = outputs[t] - outputs[t - 1];
            value += spec.derivative_lambda * d * d;
            grad[t] += 2.0 * spec.derivative_lambda * d;
            grad[t - 1] -= 2.0 * spec.derivative_lambda * d;
        }
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub loss: LossSpec,
    pub threshold_grid: f64,
    pub shuffle_files: bool,
    /// Rescale each per-file gradient to at most this global norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 1e-2,
            optimizer: Optimizer::default(),
            seed: 0,
            loss: LossSpec::default(),
            threshold_grid: 0.01,
            shuffle_files: true,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if !(self.threshold_grid > 0.0 && self.threshold_grid < 1.0) {
            return Err(Error::Config("threshold_grid must lie in (0, 1)".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        self.loss.validate()
    }
}

/// One file prepared for a model: inputs per frame and the reference bits.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub first_frame: u64,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ModelParams,
    /// Mean per-file training loss of each epoch, measured on the forward
    /// pass that produced that file's update.
    pub loss_trace: Vec<f64>,
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, lr: f64, n: usize) -> Self {
        let (m, v) = match kind {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam { .. } => (vec![0.0; n], vec![0.0; n]),
        };
        Self {
            kind,
            lr,
            m,
            v,
            steps: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.steps += 1;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Loss and flat gradient of one sequence under the given dropout seed.
pub fn sequence_gradient(
    model: &ModelParams,
    sample: &Sample,
    loss: &LossSpec,
    mode: Mode,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let trace = nets::forward_trace(model, &sample.inputs, mode, seed)?;
    let (value, grad) = nets::backward(model, &trace, &sample.targets, loss)?;
    Ok((value, grad.to_flat()))
}

/// Gradient descent with one update per file. Deterministic for a given
/// `config.seed`.
pub fn train(init: ModelParams, data: &[Sample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set has no files"));
    }
    for s in data {
        if s.inputs.len() != s.targets.len() {
            return Err(Error::LengthMismatch {
                expected: s.inputs.len(),
                actual: s.targets.len(),
            });
        }
    }
    init.validate()?;

    let mut model = init;
    let mut flat = model.to_flat();
    let mut opt = OptimizerState::new(config.optimizer, config.learning_rate, flat.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        if config.shuffle_files {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[0x5348_5546, epoch as u64]));
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for &i in &order {
            let dropout_seed = seed::derive(config.seed, &[epoch as u64, i as u64]);
            let (value, mut grad) = sequence_gradient(&model, &data[i], &config.loss, Mode::Train, dropout_seed)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    loss: value,
                });
            }
            epoch_loss += value;
            if let Some(max_norm) = config.clip_norm {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max_norm {
                    let scale = max_norm / norm;
                    grad.iter_mut().for_each(|g| *g *= scale);
                }
            }
            opt.update(&mut flat, &grad);
            if flat.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    loss: f64::NAN,
                });
            }
            model.set_flat(&flat);
        }
        let mean = epoch_loss / data.len() as f64;
        log::debug!("{} epoch {}: loss {mean:.6}", model.variant, epoch + 1);
        loss_trace.push(mean);
    }
    Ok(TrainOutcome { model, loss_trace })
}

/// Mean plain (unit-weight, λ = 0) squared error over files, eval mode.
pub fn mean_squared_error(model: &ModelParams, data: &[Sample]) -> Result<f64> {
    let plain = LossSpec::default();
    let mut total = 0.0;
    for s in data {
        let out = nets::forward(model, &s.inputs, Mode::Eval, 0)?;
        total += loss(&out, &s.targets, &plain)?;
    }
    Ok(if data.is_empty() {
        0.0
    } else {
        total / data.len() as f64
    })
}

/// Model output for one file, ready for thresholding.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredFile {
    pub first_frame: u64,
    pub probabilities: Vec<f64>,
    pub reference: Vec<bool>,
}

pub fn score_files(model: &ModelParams, data: &[Sample]) -> Result<Vec<ScoredFile>> {
    data.par_iter()
        .map(|s| {
            Ok(ScoredFile {
                first_frame: s.first_frame,
                probabilities: nets::forward(model, &s.inputs, Mode::Eval, 0)?,
                reference: s.targets.clone(),
            })
        })
        .collect()
}

/// Binarizes, optionally filters, and scores a set of files as one corpus.
pub fn evaluate_scored(
    files: &[ScoredFile],
    threshold: f64,
    post_filter: Option<&MorphFilterSpec>,
) -> Result<PqReport> {
    let mut tally = PqTally::default();
    for f in files {
        let mut predicted = binarize(&f.probabilities, threshold);
        if let Some(spec) = post_filter {
            predicted = spec.apply(&predicted)?;
        }
        tally.add_signals(&f.reference, &predicted, f.first_frame)?;
    }
    Ok(tally.report())
}

/// Grid `{step, 2·step, …}` strictly below 1.
pub fn threshold_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::Config("threshold grid step must lie in (0, 1)".into()));
    }
    Ok((1..)
        .map(|i| i as f64 * step)
        .take_while(|&t| t < 1.0 - 1e-12)
        .collect())
}

/// Picks the grid threshold maximizing corpus PQ over `files`; ties go to
/// the smallest threshold.
pub fn select_threshold_scored(
    files: &[ScoredFile],
    step: f64,
    post_filter: Option<&MorphFilterSpec>,
) -> Result<(f64, PqReport)> {
    let grid = threshold_grid(step)?;
    let reports: Vec<PqReport> = grid
        .par_iter()
        .map(|&t| evaluate_scored(files, t, post_filter))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, r) in reports.iter().enumerate() {
        if r.pq > reports[best].pq {
            best = i;
        }
    }
    Ok((grid[best], reports[best]))
}

pub fn select_threshold(
    model: &ModelParams,
    data: &[Sample],
    step: f64,
    post_filter: Option<&MorphFilterSpec>,
) -> Result<(f64, PqReport)> {
    select_threshold_scored(&score_files(model, data)?, step, post_filter)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    /// Every fold serves once as the test set.
    KFold,
    /// Fold 0 trains, fold 1 tests.
    Holdout,
}

/// Assignment of whole files to folds. Frames of one file never cross folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub n_folds: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl SplitPlan {
    /// Fold indices that act as a test set.
    pub fn test_folds(&self) -> Vec<usize> {
        match self.kind {
            SplitKind::KFold => (0..self.n_folds).collect(),
            SplitKind::Holdout => vec![1],
        }
    }

    pub fn fold_members(&self, fold: usize) -> BTreeSet<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// SHA-256 of the canonical JSON form.
    pub fn plan_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("split plan serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn shuffled_ids(file_ids: &[String], seed: u64) -> Result<Vec<String>> {
    let unique: BTreeSet<&String> = file_ids.iter().collect();
    if unique.len() != file_ids.len() {
        return Err(Error::Config("duplicate file ids".into()));
    }
    let mut ids: Vec<String> = unique.into_iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0x5350_4c54]));
    ids.shuffle(&mut rng);
    Ok(ids)
}

/// Seeded k-fold assignment with fold sizes differing by at most one.
pub fn make_splits(file_ids: &[String], n_folds: usize, seed: u64) -> Result<SplitPlan> {
    if n_folds < 2 {
        return Err(Error::Config("k-fold split needs at least 2 folds".into()));
    }
    if file_ids.len() < n_folds {
        return Err(Error::TooFewFiles {
            needed: n_folds,
            available: file_ids.len(),
        });
    }
    let ids = shuffled_ids(file_ids, seed)?;
    Ok(SplitPlan {
        kind: SplitKind::KFold,
        n_folds,
        assignments: ids.into_iter().enumerate().map(|(i, id)| (id, i % n_folds)).collect(),
    })
}

/// Seeded train/test partition with exactly `n_test` test files.
pub fn make_holdout(file_ids: &[String], n_test: usize, seed: u64) -> Result<SplitPlan> {
    if file_ids.len() < 2 {
        return Err(Error::TooFewFiles {
            needed: 2,
            available: file_ids.len(),
        });
    }
    if n_test == 0 || n_test >= file_ids.len() {
        return Err(Error::Config(format!(
            "holdout of {n_test} files from {} leaves an empty side",
            file_ids.len()
        )));
    }
    let ids = shuffled_ids(file_ids, seed)?;
    Ok(SplitPlan {
        kind: SplitKind::Holdout,
        n_folds: 2,
        assignments: ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, usize::from(i < n_test)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{ArchSpec, Variant};
    use rand::Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i:03}")).collect()
    }

    #[test]
    fn loss_closed_forms() {
        let spec = LossSpec::default();
        assert_eq!(loss(&[1.0, 0.0, 1.0], &[true, false, true], &spec).unwrap(), 0.0);
        assert_eq!(loss(&[0.5; 6], &[false; 6], &spec).unwrap(), 0.25);
        assert!(matches!(loss(&[0.5], &[], &spec), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn loss_matches_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let y: Vec<f64> = (0..40).map(|_| rng.gen()).collect();
        let r: Vec<bool> = (0..40).map(|_| rng.gen()).collect();
        let spec = LossSpec {
            positive_weight: 3.0,
            negative_weight: 0.5,
            derivative_lambda: 0.2,
        };
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 0..40 {
            let w = if r[t] { 3.0 } else { 0.5 };
            let target = if r[t] { 1.0 } else { 0.0 };
            num += w * (y[t] - target) * (y[t] - target);
            den += w;
        }
        let mut pen = 0.0;
        for t in 1..40 {
            pen += (y[t] - y[t - 1]).powi(2);
        }
        let expected = num / den + 0.2 * pen;
        assert!((loss(&y, &r, &spec).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y: Vec<f64> = (0..15).map(|_| rng.gen()).collect();
        let r: Vec<bool> = (0..15).map(|_| rng.gen()).collect();
        let spec = LossSpec {
            positive_weight: 2.0,
            negative_weight: 1.0,
            derivative_lambda: 0.3,
        };
        let (_, grad) = loss_with_gradient(&y, &r, &spec).unwrap();
        for t in 0..y.len() {
            let mut up = y.clone();
            up[t] += 1e-6;
            let mut dn = y.clone();
            dn[t] -= 1e-6;
            let fd = (loss(&up, &r, &spec).unwrap() - loss(&dn, &r, &spec).unwrap()) / 2e-6;
            assert!((fd - grad[t]).abs() < 1e-7, "t={t}");
        }
    }

    #[test]
    fn zero_penalty_matches_plain_mse_gradient() {
        let y = [0.1, 0.7, 0.4, 0.9];
        let r = [false, true, true, false];
        let plain = loss_with_gradient(&y, &r, &LossSpec::default()).unwrap();
        let zero_lambda = loss_with_gradient(
            &y,
            &r,
            &LossSpec {
                derivative_lambda: 0.0,
                ..LossSpec::default()
            },
        )
        .unwrap();
        assert_eq!(plain, zero_lambda);
        let mse: f64 = y
            .iter()
            .zip(&r)
            .map(|(a, &b)| (a - b as u8 as f64).powi(2))
            .sum::<f64>()
            / 4.0;
        assert!((plain.0 - mse).abs() < 1e-15);
    }

    #[test]
    fn grid_excludes_zero_and_one() {
        let g = threshold_grid(0.01).unwrap();
        assert_eq!(g.len(), 99);
        assert_eq!(g[0], 0.01);
        assert!(g.iter().all(|&t| t > 0.0 && t < 1.0));
        assert_eq!(threshold_grid(0.25).unwrap(), vec![0.25, 0.5, 0.75]);
        assert!(threshold_grid(0.0).is_err());
        assert!(threshold_grid(1.0).is_err());
    }

    #[test]
    fn constant_output_on_idle_corpus_picks_first_threshold_above() {
        let files: Vec<ScoredFile> = (0..3)
            .map(|i| ScoredFile {
                first_frame: i * 100,
                probabilities: vec![0.9; 50],
                reference: vec![false; 50],
            })
            .collect();
        let (t, report) = select_threshold_scored(&files, 0.01, None).unwrap();
        let expected = threshold_grid(0.01).unwrap().into_iter().find(|&g| g > 0.9).unwrap();
        assert_eq!(t, expected);
        assert_eq!(report.pq, 1.0);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let arch = ArchSpec::preset(Variant::Lstm);
        let init = ModelParams::init(&arch, 2, 3).unwrap();
        let sample = Sample {
            id: "a".into(),
            first_frame: 0,
            inputs: vec![vec![1.0, 0.0]; 12],
            targets: vec![true; 12],
        };
        let config = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let out = train(init.clone(), &[sample], &config).unwrap();
        assert_eq!(out.model, init);
        assert_eq!(out.loss_trace.len(), 3);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let init = ModelParams::init(&ArchSpec::preset(Variant::Lr), 2, 3).unwrap();
        assert!(matches!(
            train(init, &[], &TrainConfig::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn divergence_names_epoch() {
        let mut init = ModelParams::init(&ArchSpec::preset(Variant::Lr), 1, 3).unwrap();
        init.dense[0].bias[0] = 0.0;
        let sample = Sample {
            id: "a".into(),
            first_frame: 0,
            inputs: vec![vec![f64::NAN]; 4],
            targets: vec![true; 4],
        };
        match train(init, &[sample], &TrainConfig::default()) {
            Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn folds_are_balanced_and_deterministic() {
        let plan = make_splits(&ids(10), 5, 42).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2; 5]);
        assert_eq!(plan, make_splits(&ids(10), 5, 42).unwrap());
        assert_eq!(plan.plan_hash(), make_splits(&ids(10), 5, 42).unwrap().plan_hash());
        assert_ne!(plan.plan_hash(), make_splits(&ids(10), 5, 43).unwrap().plan_hash());
        assert!(matches!(make_splits(&ids(3), 5, 1), Err(Error::TooFewFiles { .. })));
        assert!(make_splits(&ids(3), 1, 1).is_err());
    }

    #[test]
    fn fold_sizes_over_many_seeds() {
        let all = ids(23);
        let mut hits = vec![0usize; 4];
        for seed in 0..100 {
            let plan = make_splits(&all, 4, seed).unwrap();
            let sizes = plan.fold_sizes();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            assert_eq!(sizes.iter().sum::<usize>(), 23);
            // how often does file f000 land in each fold
            hits[plan.assignments["f000"]] += 1;
        }
        // 100 draws over 4 folds: each fold expected 25, σ ≈ 4.3
        assert!(hits.iter().all(|&h| (12..=38).contains(&h)), "{hits:?}");
    }

    #[test]
    fn holdout_partition() {
        let plan = make_holdout(&ids(250), 50, 7).unwrap();
        assert_eq!(plan.fold_sizes(), vec![200, 50]);
        assert_eq!(plan.test_folds(), vec![1]);
        assert!(make_holdout(&ids(5), 5, 7).is_err());
        assert!(make_holdout(&ids(5), 0, 7).is_err());
    }
}
