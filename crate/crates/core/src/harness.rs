//! Experiment orchestration: model comparison, feature ablation,
//! architecture search, single-model training bundles and report output.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SplitSpec};
use crate::error::{Error, Result};
use crate::event_log::{densify, Channel, EventLog, FrameSeries};
use crate::features::{sensor_subsets, window_expand, FeatureSpec};
use crate::morphology::{apply_filter, MorphFilterSpec};
use crate::nets::{ArchSpec, ModelParams, Variant};
use crate::passage_metric::{pq_from_totals, PqReport, PqTally};
use crate::seed;
use crate::training::{
    evaluate_scored, make_holdout, make_splits, score_files, select_threshold_scored, train, Sample, SplitPlan,
    TrainConfig,
};

/// A densified log with its reference channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFile {
    pub id: String,
    pub series: FrameSeries,
}

/// Densifies logs and optionally smooths every sensor channel.
pub fn prepare_files(logs: &[EventLog], input_morph: Option<&MorphFilterSpec>) -> Result<Vec<LabeledFile>> {
    logs.par_iter()
        .map(|log| {
            let mut series = densify(log).map_err(|e| Error::in_file(log.source_id(), e))?;
            if let Some(spec) = input_morph {
                for c in Channel::SENSORS {
                    series = apply_filter(&series, c, spec)?;
                }
            }
            Ok(LabeledFile {
                id: log.source_id().to_string(),
                series,
            })
        })
        .collect()
}

pub fn make_samples(files: &[LabeledFile], features: &FeatureSpec) -> Result<Vec<Sample>> {
    files
        .par_iter()
        .map(|f| {
            Ok(Sample {
                id: f.id.clone(),
                first_frame: f.series.first_frame(),
                inputs: window_expand(&f.series, features).map_err(|e| Error::in_file(&f.id, e))?,
                targets: f.series.channel(Channel::Ref)?.to_vec(),
            })
        })
        .collect()
}

/// Per-file thresholded model output → optional morphology → corpus PQ.
pub fn evaluate_model(
    model: &ModelParams,
    features: &FeatureSpec,
    threshold: f64,
    files: &[LabeledFile],
    post_filter: Option<&MorphFilterSpec>,
) -> Result<PqReport> {
    let samples = make_samples(files, features)?;
    evaluate_scored(&score_files(model, &samples)?, threshold, post_filter)
}

/// Scores an already present channel (e.g. `basic`) against the reference.
pub fn evaluate_channel(files: &[LabeledFile], channel: Channel) -> Result<PqReport> {
    let mut tally = PqTally::default();
    for f in files {
        let s = &f.series;
        tally.add_signals(s.channel(Channel::Ref)?, s.channel(channel)?, s.first_frame())?;
    }
    Ok(tally.report())
}

/// One trainable model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub tag: String,
    pub arch: ArchSpec,
    pub features: FeatureSpec,
    pub train: TrainConfig,
    pub post_filter: Option<MorphFilterSpec>,
    /// Candidate windows; with more than one the window is picked by an
    /// inner split of the training files.
    pub window_grid: Vec<usize>,
    pub window_folds: usize,
}

impl ModelSpec {
    pub fn from_config(config: &ExperimentConfig, arch: ArchSpec) -> Self {
        let windowed = matches!(arch.variant, Variant::Lr | Variant::Mlp);
        let post_filter = if arch.variant == Variant::Final {
            config.morph
        } else {
            None
        };
        Self {
            tag: arch.variant.name().to_string(),
            features: config.features.clone(),
            train: config.train.clone(),
            post_filter,
            window_grid: if windowed {
                config.window_grid.clone()
            } else {
                Vec::new()
            },
            window_folds: config.window_folds,
            arch,
        }
    }
}

/// A model trained on a set of files, with its selected threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted {
    pub model: ModelParams,
    pub features: FeatureSpec,
    pub threshold: f64,
    pub train_report: PqReport,
    pub loss_trace: Vec<f64>,
}

fn fit_with_window(spec: &ModelSpec, window: usize, files: &[LabeledFile], seed: u64) -> Result<Fitted> {
    let features = FeatureSpec {
        window,
        ..spec.features.clone()
    };
    let samples = make_samples(files, &features)?;
    let init = ModelParams::init(&spec.arch, features.input_dim(), seed::derive(seed, &[1]))?;
    let train_config = TrainConfig {
        seed: seed::derive(seed, &[2]),
        ..spec.train.clone()
    };
    let outcome = train(init, &samples, &train_config)?;
    let scored = score_files(&outcome.model, &samples)?;
    let (threshold, train_report) =
        select_threshold_scored(&scored, spec.train.threshold_grid, spec.post_filter.as_ref())?;
    Ok(Fitted {
        model: outcome.model,
        features,
        threshold,
        train_report,
        loss_trace: outcome.loss_trace,
    })
}

/// Picks the window whose pooled inner-validation PQ is highest (smallest
/// window on ties).
fn select_window(spec: &ModelSpec, files: &[LabeledFile], seed: u64) -> Result<usize> {
    let mut grid = spec.window_grid.clone();
    grid.sort_unstable();
    grid.dedup();
    if grid.len() <= 1 {
        return Ok(grid.first().copied().unwrap_or(spec.features.window));
    }
    let ids: Vec<String> = files.iter().map(|f| f.id.clone()).collect();
    let inner = make_splits(&ids, spec.window_folds, seed::derive(seed, &[3]))?;
    let mut best: Option<(usize, f64)> = None;
    for &w in &grid {
        let (mut r, mut err) = (0u64, 0u64);
        for fold in 0..inner.n_folds {
            let members = inner.fold_members(fold);
            let (val, fit_on): (Vec<LabeledFile>, Vec<LabeledFile>) =
                files.iter().cloned().partition(|f| members.contains(f.id.as_str()));
            let fitted = fit_with_window(spec, w, &fit_on, seed::derive(seed, &[4, fold as u64]))?;
            let report = evaluate_model(
                &fitted.model,
                &fitted.features,
                fitted.threshold,
                &val,
                spec.post_filter.as_ref(),
            )?;
            r += report.r;
            err += report.sum_err;
        }
        let pq = pq_from_totals(r as f64, err as f64);
        log::debug!("{} window {w}: inner PQ {pq:.4}", spec.tag);
        if best.is_none_or(|(_, b)| pq > b) {
            best = Some((w, pq));
        }
    }
    Ok(best.map(|(w, _)| w).unwrap_or(0))
}

/// Trains `spec` on `files`, searching the window first when configured.
pub fn fit(spec: &ModelSpec, files: &[LabeledFile], seed: u64) -> Result<Fitted> {
    let window = select_window(spec, files, seed)?;
    fit_with_window(spec, window, files, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub run: usize,
    pub fold: usize,
    pub window: Option<usize>,
    pub threshold: Option<f64>,
    pub train_pq: Option<f64>,
    pub report: PqReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub model: String,
    pub features: Vec<Channel>,
    pub folds: Vec<FoldResult>,
    /// Mean of per-fold PQ values.
    pub mean_pq: f64,
    pub std_pq: f64,
    pub mean_r: f64,
    pub mean_sum_err: f64,
    pub total_r: u64,
    pub total_sum_err: u64,
    /// PQ of the summed counts over all folds.
    pub pooled_pq: f64,
    pub plan_hash: String,
    /// Set when training diverged; `folds` then holds the completed folds.
    pub error: Option<String>,
    pub config: serde_json::Value,
}

impl ExperimentResult {
    fn new(
        model: String,
        features: Vec<Channel>,
        folds: Vec<FoldResult>,
        plan_hash: String,
        error: Option<String>,
        config: serde_json::Value,
    ) -> Self {
        let n = folds.len() as f64;
        let pqs: Vec<f64> = folds.iter().map(|f| f.report.pq).collect();
        let mean = |xs: &mut dyn Iterator<Item = f64>| if n > 0.0 { xs.sum::<f64>() / n } else { 0.0 };
        let mean_pq = mean(&mut pqs.iter().copied());
        let std_pq = if folds.len() > 1 {
            (pqs.iter().map(|p| (p - mean_pq).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let total_r = folds.iter().map(|f| f.report.r).sum();
        let total_sum_err = folds.iter().map(|f| f.report.sum_err).sum();
        Self {
            mean_r: mean(&mut folds.iter().map(|f| f.report.r as f64)),
            mean_sum_err: mean(&mut folds.iter().map(|f| f.report.sum_err as f64)),
            pooled_pq: pq_from_totals(total_r as f64, total_sum_err as f64),
            model,
            features,
            folds,
            mean_pq,
            std_pq,
            total_r,
            total_sum_err,
            plan_hash,
            error,
            config,
        }
    }

    pub fn mean_train_pq(&self) -> Option<f64> {
        let v: Vec<f64> = self.folds.iter().filter_map(|f| f.train_pq).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn make_plan(files: &[LabeledFile], split: SplitSpec, seed: u64) -> Result<SplitPlan> {
    let ids: Vec<String> = files.iter().map(|f| f.id.clone()).collect();
    match split {
        SplitSpec::KFold { n_folds } => make_splits(&ids, n_folds, seed),
        SplitSpec::Holdout { n_test } => make_holdout(&ids, n_test, seed),
    }
}

fn fold_files(files: &[LabeledFile], plan: &SplitPlan, fold: usize) -> (Vec<LabeledFile>, Vec<LabeledFile>) {
    let members = plan.fold_members(fold);
    let (test, train): (Vec<_>, Vec<_>) = files.iter().cloned().partition(|f| members.contains(f.id.as_str()));
    (train, test)
}

fn job_seed(master: u64, run: usize, fold: usize) -> u64 {
    seed::derive(master, &[run as u64, fold as u64])
}

fn run_fold(
    spec: &ModelSpec,
    files: &[LabeledFile],
    plan: &SplitPlan,
    master: u64,
    run: usize,
    fold: usize,
) -> Result<FoldResult> {
    let (train_files, test_files) = fold_files(files, plan, fold);
    let fitted = fit(spec, &train_files, job_seed(master, run, fold))?;
    let report = evaluate_model(
        &fitted.model,
        &fitted.features,
        fitted.threshold,
        &test_files,
        spec.post_filter.as_ref(),
    )?;
    log::info!(
        "{} [{}] run {run} fold {fold}: test PQ {:.4} (threshold {:.2}, window {})",
        spec.tag,
        channel_list(&spec.features.channels),
        report.pq,
        fitted.threshold,
        fitted.features.window
    );
    Ok(FoldResult {
        run,
        fold,
        window: Some(fitted.features.window),
        threshold: Some(fitted.threshold),
        train_pq: Some(fitted.train_report.pq),
        report,
    })
}

/// Runs every spec over every (run, test fold) pair of `plan`. Training
/// seeds depend only on (master, run, fold), so all specs see the same
/// seeds.
pub fn run_specs(
    specs: &[ModelSpec],
    files: &[LabeledFile],
    plan: &SplitPlan,
    runs: usize,
    master: u64,
    echo: &serde_json::Value,
) -> Result<Vec<ExperimentResult>> {
    let jobs: Vec<(usize, usize, usize)> = (0..specs.len())
        .flat_map(|s| (0..runs).flat_map(move |r| plan.test_folds().into_iter().map(move |f| (s, r, f))))
        .collect();
    let outcomes: Vec<Result<FoldResult>> = jobs
        .par_iter()
        .map(|&(s, r, f)| run_fold(&specs[s], files, plan, master, r, f))
        .collect();

    let hash = plan.plan_hash();
    let mut results = Vec::with_capacity(specs.len());
    for (s, spec) in specs.iter().enumerate() {
        let mut folds = Vec::new();
        let mut error = None;
        for (&(js, _, _), outcome) in jobs.iter().zip(&outcomes) {
            if js != s {
                continue;
            }
            match outcome {
                Ok(fold) => folds.push(fold.clone()),
                Err(e @ Error::Divergence { .. }) => {
                    log::warn!("{}: {e}", spec.tag);
                    error.get_or_insert_with(|| e.to_string());
                }
                Err(e) => return Err(Error::Config(format!("{}: {e}", spec.tag))),
            }
        }
        let config = serde_json::json!({ "experiment": echo, "model": spec });
        results.push(ExperimentResult::new(
            spec.tag.clone(),
            spec.features.channels.clone(),
            folds,
            hash.clone(),
            error,
            config,
        ));
    }
    Ok(results)
}

fn basic_row(files: &[LabeledFile], plan: &SplitPlan, echo: &serde_json::Value) -> Result<ExperimentResult> {
    let mut folds = Vec::new();
    for fold in plan.test_folds() {
        let (_, test) = fold_files(files, plan, fold);
        folds.push(FoldResult {
            run: 0,
            fold,
            window: None,
            threshold: None,
            train_pq: None,
            report: evaluate_channel(&test, Channel::Basic)?,
        });
    }
    Ok(ExperimentResult::new(
        "basic".into(),
        Channel::SENSORS.to_vec(),
        folds,
        plan.plan_hash(),
        None,
        serde_json::json!({ "experiment": echo }),
    ))
}

fn echo(config: &ExperimentConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(config)?)
}

/// Model families compared under one split plan.
pub fn comparison_specs(config: &ExperimentConfig) -> Vec<ModelSpec> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let arch = if v == config.model.variant {
                config.model.clone()
            } else {
                ArchSpec::preset(v)
            };
            ModelSpec::from_config(config, arch)
        })
        .collect()
}

/// The basic-classifier row (when every file carries it) followed by every
/// model family.
pub fn run_model_comparison(files: &[LabeledFile], config: &ExperimentConfig) -> Result<Vec<ExperimentResult>> {
    config.validate()?;
    if files.is_empty() {
        return Err(Error::EmptyInput("corpus has no files"));
    }
    let plan = make_plan(files, config.split, config.seed)?;
    let echo = echo(config)?;
    let mut results = Vec::new();
    if files.iter().all(|f| f.series.has_channel(Channel::Basic)) {
        results.push(basic_row(files, &plan, &echo)?);
    }
    results.extend(run_specs(
        &comparison_specs(config),
        files,
        &plan,
        config.runs,
        config.seed,
        &echo,
    )?);
    Ok(results)
}

/// `config.model` trained on each of the seven sensor subsets, in canonical
/// order, under one shared split plan.
pub fn run_ablation(files: &[LabeledFile], config: &ExperimentConfig) -> Result<Vec<ExperimentResult>> {
    config.validate()?;
    if files.is_empty() {
        return Err(Error::EmptyInput("corpus has no files"));
    }
    let plan = make_plan(files, config.split, config.seed)?;
    let base = ModelSpec::from_config(config, config.model.clone());
    let specs: Vec<ModelSpec> = sensor_subsets()
        .into_iter()
        .map(|channels| ModelSpec {
            features: FeatureSpec {
                channels,
                ..base.features.clone()
            },
            ..base.clone()
        })
        .collect();
    run_specs(&specs, files, &plan, config.runs, config.seed, &echo(config)?)
}

/// Recurrent architecture search: every cell type at every hidden size,
/// repeated with independent seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpec {
    pub hidden_sizes: Vec<usize>,
    pub repeats: usize,
    pub epochs: usize,
}

impl Default for SearchSpec {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![2, 4, 8],
            repeats: 30,
            epochs: 40,
        }
    }
}

impl SearchSpec {
    pub const MAX_HIDDEN: usize = 8;
    pub const MAX_EPOCHS: usize = 40;

    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() || self.hidden_sizes.iter().any(|&h| h == 0 || h > Self::MAX_HIDDEN) {
            return Err(Error::Config(format!(
                "hidden sizes must lie in 1..={}",
                Self::MAX_HIDDEN
            )));
        }
        if self.epochs == 0 || self.epochs > Self::MAX_EPOCHS {
            return Err(Error::Config(format!("epochs must lie in 1..={}", Self::MAX_EPOCHS)));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn architecture_search(
    files: &[LabeledFile],
    config: &ExperimentConfig,
    search: &SearchSpec,
) -> Result<Vec<ExperimentResult>> {
    config.validate()?;
    search.validate()?;
    let plan = make_plan(files, config.split, config.seed)?;
    let mut specs = Vec::new();
    for variant in [Variant::SimpleRnn, Variant::Lstm, Variant::Gru] {
        for &hidden in &search.hidden_sizes {
            let arch = ArchSpec {
                hidden,
                ..ArchSpec::preset(variant)
            };
            let mut spec = ModelSpec::from_config(config, arch);
            spec.tag = format!("{variant}-{hidden}");
            spec.train.epochs = search.epochs;
            specs.push(spec);
        }
    }
    run_specs(&specs, files, &plan, search.repeats, config.seed, &echo(config)?)
}

/// The search result with the highest mean training PQ.
pub fn best_by_train_pq(results: &[ExperimentResult]) -> Option<&ExperimentResult> {
    results
        .iter()
        .filter_map(|r| r.mean_train_pq().map(|pq| (r, pq)))
        .fold(None, |best: Option<(&ExperimentResult, f64)>, (r, pq)| match best {
            Some((_, b)) if b >= pq => best,
            _ => Some((r, pq)),
        })
        .map(|(r, _)| r)
}

fn channel_list(channels: &[Channel]) -> String {
    channels.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")
}

/// Aligned text table of results.
pub fn render_table(results: &[ExperimentResult]) -> String {
    let header = [
        "model",
        "features",
        "folds",
        "R",
        "ΣErr",
        "PQ",
        "std",
        "pooled PQ",
        "note",
    ];
    let rows: Vec<[String; 9]> = results
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                channel_list(&r.features),
                r.folds.len().to_string(),
                format!("{:.1}", r.mean_r),
                format!("{:.1}", r.mean_sum_err),
                format!("{:.4}", r.mean_pq),
                format!("{:.4}", r.std_pq),
                format!("{:.4}", r.pooled_pq),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let mut text = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            let pad = w - cell.chars().count();
            if i < 2 || i == 8 {
                let _ = write!(text, "{cell}{}", " ".repeat(pad));
            } else {
                let _ = write!(text, "{}{cell}", " ".repeat(pad));
            }
            text.push_str("  ");
        }
        out.push_str(text.trim_end());
        out.push('\n');
    };
    line(&header.map(String::from));
    for row in &rows {
        line(row);
    }
    out
}

/// Writes `<stem>.json` and `<stem>.txt` into `dir`.
pub fn write_results(dir: &Path, stem: &str, results: &[ExperimentResult]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(results)?;
    std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    let table_path = dir.join(format!("{stem}.txt"));
    std::fs::write(&table_path, render_table(results)).map_err(|e| Error::io(&table_path, e))
}

/// Everything needed to apply a trained model to new logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub model: ModelParams,
    pub features: FeatureSpec,
    pub threshold: f64,
    pub post_filter: Option<MorphFilterSpec>,
    pub input_morph: Option<MorphFilterSpec>,
    pub seed: u64,
    pub train_report: PqReport,
    pub loss_trace: Vec<f64>,
    pub config: ExperimentConfig,
}

impl ModelBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bundle: Self = serde_json::from_str(&text).map_err(|e| Error::in_file(path, e.into()))?;
        bundle.model.validate()?;
        Ok(bundle)
    }

    pub fn evaluate(
        &self,
        logs: &[EventLog],
        threshold: Option<f64>,
        post_filter: Option<&MorphFilterSpec>,
    ) -> Result<PqReport> {
        let files = prepare_files(logs, self.input_morph.as_ref())?;
        let post = post_filter.or(self.post_filter.as_ref());
        evaluate_model(
            &self.model,
            &self.features,
            threshold.unwrap_or(self.threshold),
            &files,
            post,
        )
    }
}

/// Trains `config.model` on every file.
pub fn train_bundle(logs: &[EventLog], config: &ExperimentConfig) -> Result<ModelBundle> {
    config.validate()?;
    let files = prepare_files(logs, config.input_morph.as_ref())?;
    if files.is_empty() {
        return Err(Error::EmptyInput("training corpus has no files"));
    }
    let spec = ModelSpec::from_config(config, config.model.clone());
    let seed = job_seed(config.seed, 0, 0);
    let fitted = fit(&spec, &files, seed)?;
    Ok(ModelBundle {
        model: fitted.model,
        features: fitted.features,
        threshold: fitted.threshold,
        post_filter: spec.post_filter,
        input_morph: config.input_morph,
        seed,
        train_report: fitted.train_report,
        loss_trace: fitted.loss_trace,
        config: config.clone(),
    })
}
