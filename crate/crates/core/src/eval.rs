//! Subject-wise k-fold evaluation: confusion matrices, accuracy metrics,
//! the binary and distraction-only protocols, and report rendering.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{mode_filter_labels, segmentize, FilterConfig};
use crate::manifest::{ClassId, DatasetManifest, FoldSpec};
use crate::model::{argmax, save_checkpoint, ModelConfig, ModelParams};
use crate::store::EmbeddingStore;
use crate::train::{train, EmbeddingSet, TrainConfig, TrainHistory};
use crate::util::{create_dir_all, mean_and_sample_std, mix_seed, promote_dir, write_atomic};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![0; n * n],
        }
    }

    /// Numbered `0..n` labels.
    pub fn with_size(n: usize) -> Self {
        Self::new((0..n).map(|i| i.to_string()).collect())
    }

    pub fn from_rows(labels: Vec<String>, rows: &[Vec<u64>]) -> Result<Self> {
        let n = labels.len();
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!("confusion rows must form a {n}x{n} matrix")));
        }
        Ok(ConfusionMatrix {
            labels,
            counts: rows.concat(),
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n() + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        let n = self.n();
        self.counts[truth * n + pred] += 1;
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        let n = self.n();
        &self.counts[truth * n..(truth + 1) * n]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n()).map(|i| self.get(i, i)).sum()
    }

    /// `100 * trace / total`.
    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Validation("accuracy of an empty confusion matrix".into()));
        }
        Ok(100.0 * self.trace() as f64 / total as f64)
    }

    /// Recall per class in percent; `None` for classes with no true frames.
    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        (0..self.n())
            .map(|i| {
                let row: u64 = self.row(i).iter().sum();
                (row > 0).then(|| 100.0 * self.get(i, i) as f64 / row as f64)
            })
            .collect()
    }

    /// Unweighted mean of per-class recall over classes with true frames.
    pub fn macro_per_class_accuracy(&self) -> Result<f64> {
        let recalls = self.per_class_recall();
        let present: Vec<f64> = recalls.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Validation("macro accuracy needs at least one non-empty row".into()));
        }
        let skipped = recalls.len() - present.len();
        if skipped > 0 {
            log::debug!("macro accuracy skips {skipped} classes without true frames");
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for l in &self.labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            s.push_str(l);
            for c in self.row(i) {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }

    /// Row-normalized heatmap, `cell` pixels per entry.
    pub fn heatmap(&self, cell: u32) -> RgbImage {
        let n = self.n() as u32;
        let mut img = RgbImage::from_pixel(n * cell, n * cell, Rgb([255, 255, 255]));
        for i in 0..self.n() {
            let row: u64 = self.row(i).iter().sum();
            for j in 0..self.n() {
                let v = if row == 0 { 0.0 } else { self.get(i, j) as f64 / row as f64 };
                let px = Rgb([
                    (255.0 * (1.0 - v)) as u8,
                    (255.0 * (1.0 - 0.75 * v)) as u8,
                    (255.0 * (1.0 - 0.35 * v)) as u8,
                ]);
                for y in 0..cell {
                    for x in 0..cell {
                        img.put_pixel(j as u32 * cell + x, i as u32 * cell + y, px);
                    }
                }
            }
        }
        img
    }
}

/// Folds class `class0` against everything else: index 0 is `class0`,
/// index 1 is "other".
pub fn collapse_binary(cm: &ConfusionMatrix, class0: usize) -> ConfusionMatrix {
    let mut out = ConfusionMatrix::new(binary_labels());
    let side = |i: usize| usize::from(i != class0);
    for t in 0..cm.n() {
        for p in 0..cm.n() {
            out.counts[side(t) * 2 + side(p)] += cm.get(t, p);
        }
    }
    out
}

fn binary_labels() -> Vec<String> {
    vec!["0".into(), "other".into()]
}

/// Mean and sample standard deviation of fold accuracies.
pub fn summarize_accuracies(accuracies: &[f64]) -> Result<(f64, f64)> {
    if accuracies.len() < 2 {
        return Err(Error::Validation(format!(
            "a k-fold summary needs at least 2 folds, got {}",
            accuracies.len()
        )));
    }
    Ok(mean_and_sample_std(accuracies))
}

pub fn kfold_summary(results: &[FoldResult]) -> Result<(f64, f64)> {
    let accs = results.iter().map(|r| r.accuracy()).collect::<Result<Vec<_>>>()?;
    summarize_accuracies(&accs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    AllClasses,
    BinaryClass0,
    ExcludeClass0,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::AllClasses => "all_classes",
            Protocol::BinaryClass0 => "binary_class0",
            Protocol::ExcludeClass0 => "exclude_class0",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_classes" => Ok(Protocol::AllClasses),
            "binary_class0" => Ok(Protocol::BinaryClass0),
            "exclude_class0" => Ok(Protocol::ExcludeClass0),
            _ => Err(Error::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

/// How the distraction-only protocol drops class 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExcludeMode {
    /// Train a fresh model on the remaining classes.
    #[default]
    #[serde(rename = "retrain_15")]
    Retrain15,
    /// Keep the full model and ignore its class-0 logit.
    MaskLogits,
}

impl FromStr for ExcludeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrain_15" => Ok(ExcludeMode::Retrain15),
            "mask_logits" => Ok(ExcludeMode::MaskLogits),
            _ => Err(Error::Config(format!("unknown exclude mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub filter: bool,
    pub exclude_mode: ExcludeMode,
    pub folds: usize,
    /// `participant_id,fold_index` CSV; round-robin folds when absent.
    pub fold_file: Option<PathBuf>,
    /// Probability of replacing each raw prediction with a different random
    /// class before filtering. Only for studying the filter; 0 in real runs.
    pub prediction_noise: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: Protocol::AllClasses,
            filter: true,
            exclude_mode: ExcludeMode::Retrain15,
            folds: 7,
            fold_file: None,
            prediction_noise: 0.0,
            batch_size: 512,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("eval.folds must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.prediction_noise) {
            return Err(Error::Config("eval.prediction_noise must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    fn retrains_without_class0(&self) -> bool {
        self.protocol == Protocol::ExcludeClass0 && self.exclude_mode == ExcludeMode::Retrain15
    }
}

/// Embedded frames of one session, in frame order.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub name: String,
    pub participant: String,
    pub frames: Vec<u32>,
    pub labels: Vec<Option<ClassId>>,
    /// Sample `i` holds the views of `frames[i]`; its label entry is unused.
    pub set: EmbeddingSet,
}

/// Reads every session's complete triplets from the store. Fails listing
/// the sessions whose labeled frames are not all embedded.
pub fn load_eval_data(manifest: &DatasetManifest, store: &EmbeddingStore) -> Result<Vec<SessionData>> {
    let mut out = Vec::with_capacity(manifest.sessions.len());
    let mut missing = Vec::new();
    for (s, record) in manifest.sessions.iter().enumerate() {
        let name = record.key.to_string();
        let triplets = manifest.frames_for_session(s)?;
        let scan = store.scan_session(&name)?;
        let mut scanned = scan.frames.into_iter().peekable();
        let mut data = SessionData {
            name: name.clone(),
            participant: record.participant_id().to_string(),
            frames: Vec::new(),
            labels: Vec::new(),
            set: EmbeddingSet::new(3, store.embed_dim()),
        };
        let mut complete = true;
        for t in &triplets {
            while scanned.peek().is_some_and(|(f, _)| *f < t.frame_index) {
                scanned.next();
            }
            match scanned.peek() {
                Some((f, views)) if *f == t.frame_index => {
                    let refs: Vec<&[f32]> = views.iter().map(|v| v.as_slice()).collect();
                    data.set.push(&refs, 0)?;
                    data.frames.push(t.frame_index);
                    data.labels.push(t.label);
                }
                _ => complete &= t.label.is_none(),
            }
        }
        if !complete {
            missing.push(name);
        }
        out.push(data);
    }
    if !missing.is_empty() {
        return Err(Error::MissingEmbeddings(missing));
    }
    Ok(out)
}

/// Train and test participant sets of one fold, checked to be disjoint.
pub fn fold_participants(folds: &FoldSpec, fold: usize) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    if fold >= folds.k {
        return Err(Error::Validation(format!("fold {fold} outside [0, {})", folds.k)));
    }
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for (p, &f) in &folds.assignment {
        if f == fold {
            test.insert(p.clone());
        } else {
            train.insert(p.clone());
        }
    }
    if let Some(p) = train.intersection(&test).next() {
        return Err(Error::Validation(format!("participant {p} is in both train and test of fold {fold}")));
    }
    Ok((train, test))
}

fn class_count(model_cfg: &ModelConfig, eval: &EvalConfig) -> usize {
    if eval.retrains_without_class0() {
        model_cfg.num_classes - 1
    } else {
        model_cfg.num_classes
    }
}

/// Trains the fold's model on the labeled frames of all other folds.
pub fn train_fold(
    data: &[SessionData],
    folds: &FoldSpec,
    fold: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<(ModelParams, TrainHistory)> {
    let (train_ps, _) = fold_participants(folds, fold)?;
    let cfg = ModelConfig {
        num_classes: class_count(model_cfg, eval),
        ..model_cfg.clone()
    };
    let drop0 = eval.retrains_without_class0();
    let mut set = EmbeddingSet::new(cfg.num_views, cfg.embed_dim);
    for sd in data.iter().filter(|sd| train_ps.contains(&sd.participant)) {
        for (i, label) in sd.labels.iter().enumerate() {
            let Some(y) = *label else { continue };
            if drop0 && y == 0 {
                continue;
            }
            let y = if drop0 { y as usize - 1 } else { y as usize };
            set.push(&sd.set.views(i), y)?;
        }
    }
    let seeded = TrainConfig {
        seed: mix_seed(&[train_cfg.seed, fold as u64]),
        ..train_cfg.clone()
    };
    train(&set, &cfg, &seeded)
}

/// One predicted frame; labels are dataset class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRecord {
    pub session: String,
    pub frame_index: u32,
    pub true_label: Option<ClassId>,
    pub raw_pred: ClassId,
    pub filtered_pred: ClassId,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub protocol: Protocol,
    pub raw: ConfusionMatrix,
    pub filtered: Option<ConfusionMatrix>,
    pub predictions: Vec<PredictionRecord>,
    pub train_participants: BTreeSet<String>,
    pub test_participants: BTreeSet<String>,
    pub history: Option<TrainHistory>,
}

impl FoldResult {
    /// The reported confusion: filtered when the filter ran.
    pub fn confusion(&self) -> &ConfusionMatrix {
        self.filtered.as_ref().unwrap_or(&self.raw)
    }

    pub fn accuracy(&self) -> Result<f64> {
        self.confusion().accuracy()
    }

    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        self.confusion().per_class_recall()
    }
}

fn predict_classes(model: &ModelParams, set: &EmbeddingSet, eval: &EvalConfig) -> Result<Vec<ClassId>> {
    let mut out = Vec::with_capacity(set.len());
    let all: Vec<usize> = (0..set.len()).collect();
    for chunk in all.chunks(eval.batch_size) {
        let inputs = set.batch(chunk, None);
        let views: Vec<_> = inputs.iter().map(|m| m.view()).collect();
        let logits = model.forward_eval_batch(&views)?;
        for row in logits.outer_iter() {
            let row = row.as_slice().expect("contiguous logits");
            let id = match eval.protocol {
                Protocol::ExcludeClass0 if eval.exclude_mode == ExcludeMode::Retrain15 => argmax(row) + 1,
                Protocol::ExcludeClass0 => argmax(&row[1..]) + 1,
                _ => argmax(row),
            };
            out.push(id as ClassId);
        }
    }
    Ok(out)
}

/// Scores `model` on the fold's test participants.
///
/// Under the distraction-only protocol, frames whose true class is 0 are
/// removed before filtering, as if an upstream binary classifier had
/// already routed them away. The binary protocol filters in the full label
/// space and collapses afterwards.
pub fn score_fold(
    data: &[SessionData],
    folds: &FoldSpec,
    fold: usize,
    model: &ModelParams,
    filter_cfg: &FilterConfig,
    eval: &EvalConfig,
) -> Result<FoldResult> {
    eval.validate()?;
    filter_cfg.validate()?;
    let (train_ps, test_ps) = fold_participants(folds, fold)?;
    let n_model = model.config().num_classes;
    let n_classes = if eval.retrains_without_class0() { n_model + 1 } else { n_model };
    let first_class = usize::from(eval.protocol == Protocol::ExcludeClass0);
    let mut predictions = Vec::new();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[0x6e6f_6973_65, fold as u64]));
    for sd in data.iter().filter(|sd| test_ps.contains(&sd.participant)) {
        let keep: Vec<usize> = (0..sd.frames.len())
            .filter(|&i| !(eval.protocol == Protocol::ExcludeClass0 && sd.labels[i] == Some(0)))
            .collect();
        if keep.is_empty() {
            continue;
        }
        let set = sd.set.subset(&keep);
        let mut raw = predict_classes(model, &set, eval)?;
        if eval.prediction_noise > 0.0 {
            let alphabet = n_classes - first_class;
            for p in raw.iter_mut() {
                if alphabet > 1 && noise_rng.random::<f64>() < eval.prediction_noise {
                    let shift = noise_rng.random_range(1..alphabet);
                    *p = (first_class + (*p as usize - first_class + shift) % alphabet) as ClassId;
                }
            }
        }
        let filtered = if eval.filter {
            mode_filter_labels(&raw, filter_cfg)?
        } else {
            raw.clone()
        };
        for (k, &i) in keep.iter().enumerate() {
            predictions.push(PredictionRecord {
                session: sd.name.clone(),
                frame_index: sd.frames[i],
                true_label: sd.labels[i],
                raw_pred: raw[k],
                filtered_pred: filtered[k],
            });
        }
    }
    let mut result = result_from_predictions(fold, eval.protocol, n_classes, eval.filter, predictions)?;
    result.train_participants = train_ps;
    result.test_participants = test_ps;
    Ok(result)
}

/// Scores recorded predictions. `num_classes` counts dataset classes,
/// including class 0.
pub fn result_from_predictions(
    fold: usize,
    protocol: Protocol,
    num_classes: usize,
    filtered: bool,
    predictions: Vec<PredictionRecord>,
) -> Result<FoldResult> {
    let first_class = usize::from(protocol == Protocol::ExcludeClass0);
    let labels = match protocol {
        Protocol::BinaryClass0 => binary_labels(),
        _ => (first_class..num_classes).map(|i| i.to_string()).collect(),
    };
    let index = |id: ClassId| -> Result<usize> {
        let id = id as usize;
        if id >= num_classes || id < first_class {
            return Err(Error::UnknownClass(id as i64));
        }
        Ok(match protocol {
            Protocol::BinaryClass0 => usize::from(id != 0),
            _ => id - first_class,
        })
    };
    let mut raw_cm = ConfusionMatrix::new(labels.clone());
    let mut filt_cm = ConfusionMatrix::new(labels);
    for p in &predictions {
        if let Some(t) = p.true_label {
            let t = index(t)?;
            raw_cm.add(t, index(p.raw_pred)?);
            filt_cm.add(t, index(p.filtered_pred)?);
        }
    }
    if raw_cm.total() == 0 {
        return Err(Error::Validation(format!("fold {fold} has no labeled test frames")));
    }
    Ok(FoldResult {
        fold,
        protocol,
        raw: raw_cm,
        filtered: filtered.then_some(filt_cm),
        predictions,
        train_participants: BTreeSet::new(),
        test_participants: BTreeSet::new(),
        history: None,
    })
}

/// Trains on the complementary folds, then scores the held-out fold.
pub fn run_fold(
    data: &[SessionData],
    folds: &FoldSpec,
    fold: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    filter_cfg: &FilterConfig,
    eval: &EvalConfig,
) -> Result<(FoldResult, ModelParams)> {
    let (model, history) = train_fold(data, folds, fold, model_cfg, train_cfg, eval)?;
    let mut result = score_fold(data, folds, fold, &model, filter_cfg, eval)?;
    result.history = Some(history);
    Ok((result, model))
}

/// Runs every fold on up to `jobs` threads. Results come back in fold order
/// and do not depend on `jobs`.
pub fn run_all_folds(
    data: &[SessionData],
    folds: &FoldSpec,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    filter_cfg: &FilterConfig,
    eval: &EvalConfig,
    jobs: usize,
) -> Result<Vec<(FoldResult, ModelParams)>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build a pool of {jobs} threads: {e}")))?;
    pool.install(|| {
        (0..folds.k)
            .into_par_iter()
            .map(|f| run_fold(data, folds, f, model_cfg, train_cfg, filter_cfg, eval))
            .collect()
    })
}

fn fmt_pct(x: f64) -> String {
    format!("{x:.4}")
}

fn predictions_csv(preds: &[PredictionRecord]) -> String {
    let mut s = String::from("session,frame_index,true_label,raw_pred,filtered_pred\n");
    for p in preds {
        let truth = p.true_label.map(|t| t.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            p.session, p.frame_index, truth, p.raw_pred, p.filtered_pred
        ));
    }
    s
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    session: String,
    frame_index: u32,
    true_label: Option<ClassId>,
    raw_pred: ClassId,
    filtered_pred: ClassId,
}

/// Reads a `predictions.csv` written by [`render_reports`].
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Io {
        context: format!("opening {}", path.display()),
        source: e.into(),
    })?;
    reader
        .deserialize::<PredictionRow>()
        .map(|row| {
            let r = row?;
            Ok(PredictionRecord {
                session: r.session,
                frame_index: r.frame_index,
                true_label: r.true_label,
                raw_pred: r.raw_pred,
                filtered_pred: r.filtered_pred,
            })
        })
        .collect()
}

fn segments_csv(preds: &[PredictionRecord]) -> Result<String> {
    let mut s = String::from("session,start,end,label\n");
    let mut start = 0;
    while start < preds.len() {
        let session = &preds[start].session;
        let mut end = start;
        while end < preds.len() && &preds[end].session == session {
            end += 1;
        }
        let run = &preds[start..end];
        let labels: Vec<ClassId> = run.iter().map(|p| p.filtered_pred).collect();
        for seg in segmentize(&labels)? {
            let first = run[seg.start].frame_index;
            let last = run[seg.end - 1].frame_index + 1;
            s.push_str(&format!("{session},{first},{last},{}\n", seg.label));
        }
        start = end;
    }
    Ok(s)
}

/// Index of the fold with the highest reported accuracy (first on ties).
pub fn best_fold(results: &[FoldResult]) -> Result<usize> {
    let accs = results.iter().map(|r| r.accuracy()).collect::<Result<Vec<_>>>()?;
    Ok(argmax(&accs))
}

pub fn summary_csv(results: &[FoldResult]) -> Result<String> {
    let best = best_fold(results)?;
    let mut s = String::from("fold,accuracy,raw_accuracy,macro_accuracy,frames,best\n");
    let mut accs = Vec::new();
    let mut raws = Vec::new();
    let mut macros = Vec::new();
    for (i, r) in results.iter().enumerate() {
        let (acc, raw, mac) = (r.accuracy()?, r.raw.accuracy()?, r.confusion().macro_per_class_accuracy()?);
        accs.push(acc);
        raws.push(raw);
        macros.push(mac);
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.fold,
            fmt_pct(acc),
            fmt_pct(raw),
            fmt_pct(mac),
            r.confusion().total(),
            u8::from(i == best)
        ));
    }
    for (name, f) in [("mean", 0usize), ("std", 1)] {
        let pick = |xs: &[f64]| -> Result<String> {
            let (m, sd) = summarize_accuracies(xs)?;
            Ok(fmt_pct(if f == 0 { m } else { sd }))
        };
        s.push_str(&format!("{name},{},{},{},,\n", pick(&accs)?, pick(&raws)?, pick(&macros)?));
    }
    Ok(s)
}

fn summary_md(results: &[FoldResult]) -> Result<String> {
    let protocol = results[0].protocol;
    let best = best_fold(results)?;
    let mut s = format!("# Evaluation summary: {protocol}\n\n");
    s.push_str("| fold | accuracy % | without filter % | macro per-class % | frames |\n");
    s.push_str("|---|---|---|---|---|\n");
    for (i, r) in results.iter().enumerate() {
        let flag = if i == best { " (best)" } else { "" };
        s.push_str(&format!(
            "| {}{flag} | {:.2} | {:.2} | {:.2} | {} |\n",
            r.fold,
            r.accuracy()?,
            r.raw.accuracy()?,
            r.confusion().macro_per_class_accuracy()?,
            r.confusion().total()
        ));
    }
    if results.len() >= 2 {
        let (mean, sd) = kfold_summary(results)?;
        s.push_str(&format!("\nMean accuracy {mean:.2} %, sample standard deviation {sd:.2} %.\n"));
    }
    Ok(s)
}

/// Writes `out_dir/<protocol>/` with one `fold<i>/` directory per result
/// (`confusion.csv`, `confusion.png`, `predictions.csv`,
/// `filtered_predictions.csv`) plus `summary.csv` and `summary.md`. The tree
/// is staged next to its destination and moved into place once complete.
pub fn render_reports(results: &[FoldResult], out_dir: &Path) -> Result<PathBuf> {
    let Some(first) = results.first() else {
        return Err(Error::Validation("no fold results to report".into()));
    };
    let dest = out_dir.join(first.protocol.as_str());
    let staged = out_dir.join(format!(".{}.staging{}", first.protocol, std::process::id()));
    if staged.exists() {
        std::fs::remove_dir_all(&staged).map_err(|e| Error::Io {
            context: format!("clearing {}", staged.display()),
            source: e,
        })?;
    }
    create_dir_all(&staged)?;
    for r in results {
        let dir = staged.join(format!("fold{}", r.fold));
        create_dir_all(&dir)?;
        let cm = r.confusion();
        write_atomic(&dir.join("confusion.csv"), cm.to_csv().as_bytes())?;
        cm.heatmap(24).save(dir.join("confusion.png"))?;
        write_atomic(&dir.join("predictions.csv"), predictions_csv(&r.predictions).as_bytes())?;
        write_atomic(&dir.join("filtered_predictions.csv"), segments_csv(&r.predictions)?.as_bytes())?;
        if let Some(h) = &r.history {
            h.write_csv(&dir.join("history.csv"))?;
        }
    }
    if results.len() >= 2 {
        write_atomic(&staged.join("summary.csv"), summary_csv(results)?.as_bytes())?;
    }
    write_atomic(&staged.join("summary.md"), summary_md(results)?.as_bytes())?;
    promote_dir(&staged, &dest)?;
    Ok(dest)
}

/// Saves each fold's model as `fold<i>/model.ckpt` under `report_dir`.
pub fn save_fold_models(report_dir: &Path, runs: &[(FoldResult, ModelParams)]) -> Result<()> {
    for (r, m) in runs {
        let dir = report_dir.join(format!("fold{}", r.fold));
        create_dir_all(&dir)?;
        save_checkpoint(&dir.join("model.ckpt"), m)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| i.to_string()).collect()
    }

    #[test]
    fn accuracy_examples() {
        let mut diag = ConfusionMatrix::with_size(4);
        for i in 0..4 {
            diag.add(i, i);
        }
        assert_eq!(diag.accuracy().unwrap(), 100.0);
        let uniform = ConfusionMatrix::from_rows(labels(16), &vec![vec![1; 16]; 16]).unwrap();
        assert_eq!(uniform.accuracy().unwrap(), 6.25);
        let m = ConfusionMatrix::from_rows(labels(2), &[vec![3, 1], vec![1, 3]]).unwrap();
        assert_eq!(m.accuracy().unwrap(), 75.0);
        assert!(ConfusionMatrix::with_size(3).accuracy().is_err());
    }

    #[test]
    fn macro_examples() {
        let m = ConfusionMatrix::from_rows(labels(2), &[vec![8, 2], vec![5, 5]]).unwrap();
        assert!((m.macro_per_class_accuracy().unwrap() - 65.0).abs() < 1e-12);
        // Majority class 0 is well recognized, minority class 1 is not.
        let imb = ConfusionMatrix::from_rows(labels(2), &[vec![90, 0], vec![8, 2]]).unwrap();
        let brute_acc = 100.0 * (90 + 2) as f64 / 100.0;
        let brute_macro = (100.0 * 90.0 / 90.0 + 100.0 * 2.0 / 10.0) / 2.0;
        assert_eq!(imb.accuracy().unwrap(), brute_acc);
        assert!((imb.macro_per_class_accuracy().unwrap() - brute_macro).abs() < 1e-12);
        assert!(imb.macro_per_class_accuracy().unwrap() < imb.accuracy().unwrap());
        let empty_row = ConfusionMatrix::from_rows(labels(2), &[vec![4, 0], vec![0, 0]]).unwrap();
        assert_eq!(empty_row.macro_per_class_accuracy().unwrap(), 100.0);
        assert!(ConfusionMatrix::with_size(2).macro_per_class_accuracy().is_err());
    }

    #[test]
    fn binary_collapse_examples() {
        let mut m = ConfusionMatrix::with_size(16);
        for i in 0..16 {
            m.add(i, i);
        }
        let b = collapse_binary(&m, 0);
        assert_eq!((b.get(0, 0), b.get(0, 1), b.get(1, 0), b.get(1, 1)), (1, 0, 0, 15));
        let mut wrong = ConfusionMatrix::with_size(16);
        wrong.add(3, 5);
        assert_eq!(collapse_binary(&wrong, 0).accuracy().unwrap(), 100.0);
    }

    #[test]
    fn summary_examples() {
        let table = [68.09, 74.40, 73.60, 71.37, 70.15, 75.34, 68.53];
        let (mean, sd) = summarize_accuracies(&table).unwrap();
        assert!((mean - 71.64).abs() <= 0.01);
        assert!((sd - 2.88).abs() <= 0.01);
        assert_eq!(summarize_accuracies(&[70.0; 3]).unwrap().1, 0.0);
        let (m2, s2) = summarize_accuracies(&[60.0, 64.0]).unwrap();
        assert_eq!(m2, 62.0);
        assert!((s2 - 4.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(summarize_accuracies(&[1.0]).is_err());
    }

    fn matrix(n: usize) -> impl Strategy<Value = ConfusionMatrix> {
        proptest::collection::vec(0u64..20, n * n)
            .prop_map(move |c| ConfusionMatrix { labels: labels(n), counts: c })
            .prop_filter("non-empty", |m| m.total() > 0)
    }

    proptest! {
        #[test]
        fn collapse_conserves_counts(m in (2usize..8).prop_flat_map(matrix)) {
            let b = collapse_binary(&m, 0);
            prop_assert_eq!(b.total(), m.total());
        }

        #[test]
        fn collapse_never_hurts_within_other_block(m in (2usize..8).prop_flat_map(matrix)) {
            // Move all class-0 confusions onto the diagonal so every error
            // lies inside the "other" block.
            let mut m = m;
            let n = m.n();
            for j in 1..n {
                let c = m.counts[j];
                m.counts[j] = 0;
                m.counts[0] += c;
                let c = m.counts[j * n];
                m.counts[j * n] = 0;
                m.counts[j * n + j] += c;
            }
            let b = collapse_binary(&m, 0);
            prop_assert!(b.accuracy().unwrap() >= m.accuracy().unwrap() - 1e-12);
        }

        #[test]
        fn uniform_accuracy_is_reciprocal(n in 1usize..40) {
            let m = ConfusionMatrix::from_rows(labels(n), &vec![vec![1; n]; n]).unwrap();
            prop_assert!((m.accuracy().unwrap() - 100.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn heatmap_and_csv_shapes() {
        let m = ConfusionMatrix::from_rows(binary_labels(), &[vec![3, 1], vec![0, 2]]).unwrap();
        assert_eq!(m.heatmap(10).dimensions(), (20, 20));
        assert_eq!(m.to_csv(), "true\\pred,0,other\n0,3,1\nother,0,2\n");
    }

    #[test]
    fn participants_partition() {
        let folds = FoldSpec {
            k: 3,
            assignment: [("a", 0), ("b", 1), ("c", 2), ("d", 0)]
                .into_iter()
                .map(|(p, f)| (p.to_string(), f))
                .collect(),
        };
        let (train, test) = fold_participants(&folds, 0).unwrap();
        assert_eq!(test, BTreeSet::from(["a".to_string(), "d".to_string()]));
        assert_eq!(train, BTreeSet::from(["b".to_string(), "c".to_string()]));
        assert!(fold_participants(&folds, 3).is_err());
    }
}
