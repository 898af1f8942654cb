//! Training, frame-wise evaluation, cross-validation and figure exports.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FoldPlan, Segment, Sequence, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::ingest::View;
use crate::models::{InputNorm, Model, ModelConfig};
use crate::nn::loss::argmax;
use crate::nn::{Adam, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Fit per-channel z-scoring on the training set before the first epoch.
    pub normalize_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            lr: 0.001,
            batch_size: 16,
            seed: 0,
            shuffle: true,
            normalize_inputs: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_model: Model,
    /// Snapshot from the epoch with the highest validation accuracy (earliest
    /// on ties); the final model when there is no validation set.
    pub best_model: Model,
    pub best_epoch: usize,
    pub best_val_acc: Option<f64>,
    pub history: Vec<EpochRecord>,
}

fn check_labels(model: &Model, sequences: &[&Sequence]) -> Result<()> {
    let nc = model.config().n_classes;
    let c = model.config().n_channels;
    for s in sequences {
        if s.n_channels() != c {
            return Err(Error::Shape(format!(
                "sequence {} has {} channels, model expects {c}",
                s.id,
                s.n_channels()
            )));
        }
        if let Some(&bad) = s.labels.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= nc) {
            return Err(Error::LabelCoverage(format!(
                "sequence {} has label {bad} but the model has {nc} classes",
                s.id
            )));
        }
    }
    Ok(())
}

/// Mini-batch Adam on the masked cross-entropy.
///
/// Per-sequence gradients are computed in parallel and reduced in batch
/// order, so results do not depend on the thread count.
pub fn train(
    mut model: Model,
    train_set: &[&Sequence],
    val_set: &[&Sequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    check_labels(&model, train_set)?;
    check_labels(&model, val_set)?;
    if cfg.normalize_inputs {
        model.set_input_norm(InputNorm::fit(train_set)?)?;
    }
    let adam = Adam::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Model, usize, f64)> = None;

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut loss_sum, mut count, mut correct) = (0.0, 0usize, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| model.sequence_grad(train_set[i], IGNORE_INDEX))
                .collect::<Result<_>>()?;
            let batch_count: usize = results.iter().map(|r| r.count).sum();
            if batch_count == 0 {
                continue;
            }
            let batch_loss: f64 = results.iter().map(|r| r.loss_sum).sum();
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            let scale = 1.0 / batch_count as f64;
            for r in &results {
                model.params_mut().accumulate(&r.grads, scale);
            }
            if !model.params().iter().all(|p| p.grad.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            adam.step(model.params_mut());
            loss_sum += batch_loss;
            count += batch_count;
            correct += results.iter().map(|r| r.correct).sum::<usize>();
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let val_acc = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, val_set)?)
        };
        if let Some(acc) = val_acc {
            if best.as_ref().is_none_or(|(_, _, b)| acc > *b) {
                best = Some((model.clone(), epoch, acc));
            }
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / count as f64,
            train_acc: correct as f64 / count as f64,
            val_acc,
        });
    }

    let (best_model, best_epoch, best_val_acc) = match best {
        Some((m, e, a)) => (m, e, Some(a)),
        None => (model.clone(), cfg.epochs, None),
    };
    Ok(TrainOutcome {
        final_model: model,
        best_model,
        best_epoch,
        best_val_acc,
        history,
    })
}

/// Fraction of non-ignored frames whose argmax logit equals the label.
pub fn framewise_accuracy(logits: &Tensor, labels: &[u8], ignore_index: u8) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let preds: Vec<u8> = (0..logits.rows()).map(|t| argmax(logits.row(t)) as u8).collect();
    framewise_accuracy_predictions(&preds, labels, ignore_index)
}

pub fn framewise_accuracy_predictions(predictions: &[u8], labels: &[u8], ignore_index: u8) -> Result<f64> {
    let (correct, total) = count_correct(predictions, labels, ignore_index);
    if total == 0 {
        return Err(Error::EmptyMetric);
    }
    Ok(correct as f64 / total as f64)
}

fn count_correct(predictions: &[u8], labels: &[u8], ignore_index: u8) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (i, &l) in labels.iter().enumerate() {
        if l == ignore_index {
            continue;
        }
        total += 1;
        if predictions.get(i) == Some(&l) {
            correct += 1;
        }
    }
    (correct, total)
}

/// Frame-wise accuracy pooled over all labelled frames of `sequences`.
pub fn evaluate(model: &Model, sequences: &[&Sequence]) -> Result<f64> {
    let counts: Vec<(usize, usize)> = sequences
        .par_iter()
        .map(|s| {
            let preds = model.predict_sequence(s)?;
            Ok(count_correct(&preds, &s.labels[..s.valid_len()], IGNORE_INDEX))
        })
        .collect::<Result<_>>()?;
    let (correct, total) = counts
        .iter()
        .fold((0, 0), |(c, t), &(dc, dt)| (c + dc, t + dt));
    if total == 0 {
        return Err(Error::EmptyMetric);
    }
    Ok(correct as f64 / total as f64)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    // Welford's update: exact when every value is the same.
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &v) in values.iter().enumerate() {
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    (mean, (m2 / values.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub model: String,
    pub view: View,
    /// Validation accuracy of each fold's best-validation snapshot.
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Validation accuracy of each fold's final-epoch model.
    pub final_fold_accuracies: Vec<f64>,
    /// Held-out test accuracy of each fold's best snapshot, when a test set is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fold_accuracies: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_std: Option<f64>,
}

impl FoldReport {
    /// `mean ± std` in percent, two decimals.
    pub fn summary(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: usize,
    pub seed: u64,
    pub outcome: TrainOutcome,
}

/// Seed for fold `fold`, decorrelated from neighbouring folds.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add((fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains one fresh model per fold and aggregates validation accuracy.
/// Folds run on up to `jobs` threads; results are identical for any `jobs`.
pub fn cross_validate_runs(
    config: &ModelConfig,
    data: &[Sequence],
    plan: &FoldPlan,
    train_cfg: &TrainConfig,
    test: Option<&[Sequence]>,
    jobs: usize,
) -> Result<(FoldReport, Vec<FoldRun>)> {
    train_cfg.validate()?;
    config.validate()?;
    let view = data
        .first()
        .map(|s| s.view)
        .ok_or_else(|| Error::Config("cross-validation needs data".into()))?;
    let run_fold = |fold: usize| -> Result<(FoldRun, f64, f64, Option<f64>)> {
        let seed = fold_seed(train_cfg.seed, fold);
        let (tr, va) = plan.partition(fold, data);
        let model = Model::build(config.clone(), seed)?;
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let outcome = train(model, &tr, &va, &cfg)?;
        let best = evaluate(&outcome.best_model, &va)?;
        let last = evaluate(&outcome.final_model, &va)?;
        let test_acc = match test {
            Some(t) => {
                let refs: Vec<&Sequence> = t.iter().collect();
                Some(evaluate(&outcome.best_model, &refs)?)
            }
            None => None,
        };
        Ok((FoldRun { fold, seed, outcome }, best, last, test_acc))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| {
        (0..plan.folds.len())
            .into_par_iter()
            .map(run_fold)
            .collect::<Result<Vec<_>>>()
    })?;

    let fold_accuracies: Vec<f64> = results.iter().map(|r| r.1).collect();
    let final_fold_accuracies = results.iter().map(|r| r.2).collect();
    let test_fold_accuracies: Option<Vec<f64>> = results.iter().map(|r| r.3).collect();
    let (mean, std) = mean_std(&fold_accuracies);
    let (test_mean, test_std) = match &test_fold_accuracies {
        Some(t) => {
            let (m, s) = mean_std(t);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    let report = FoldReport {
        model: config.name(),
        view,
        fold_accuracies,
        mean,
        std,
        final_fold_accuracies,
        test_fold_accuracies,
        test_mean,
        test_std,
    };
    Ok((report, results.into_iter().map(|r| r.0).collect()))
}

pub fn cross_validate(
    config: &ModelConfig,
    data: &[Sequence],
    plan: &FoldPlan,
    train_cfg: &TrainConfig,
) -> Result<FoldReport> {
    cross_validate_runs(config, data, plan, train_cfg, None, 1).map(|(r, _)| r)
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let mut w = create(path)?;
    let mut line = String::new();
    for r in 0..m.rows() {
        line.clear();
        for (j, v) in m.row(r).iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            write!(line, "{v}").expect("writing to a String");
        }
        line.push('\n');
        w.write_all(line.as_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a matrix written by the attention export.
pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        for field in line.split(',') {
            data.push(field.trim().parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        rows += 1;
    }
    let cols = if rows == 0 { 0 } else { data.len() / rows };
    Tensor::matrix(rows, cols, data)
}

#[derive(Debug, Clone)]
pub struct AttentionExport {
    /// `files[l][h]` holds layer `l`, head `h`.
    pub head_files: Vec<Vec<PathBuf>>,
    pub mean_file: PathBuf,
    pub svg_file: Option<PathBuf>,
}

/// Writes every attention map of `seq` as CSV, plus the head-averaged final
/// layer and, optionally, an SVG heatmap of it with the true segment
/// boundaries drawn in red.
pub fn export_attention(model: &Model, seq: &Sequence, dir: &Path, svg: bool) -> Result<AttentionExport> {
    if !model.config().has_attention() {
        return Err(Error::Capability(format!(
            "{} has no attention layers",
            model.name()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let values = model.sequence_tensor(seq)?;
    let (_, trace) = model.forward_traced(&values, seq.valid_len())?;
    let mut head_files = Vec::with_capacity(trace.layers.len());
    for (l, heads) in trace.layers.iter().enumerate() {
        let mut files = Vec::with_capacity(heads.len());
        for (h, w) in heads.iter().enumerate() {
            let path = dir.join(format!("layer{l:02}_head{h}.csv"));
            write_matrix_csv(&path, w)?;
            files.push(path);
        }
        head_files.push(files);
    }
    let mean = trace.final_layer_mean().expect("at least one layer");
    let mean_file = dir.join("final_layer_mean.csv");
    write_matrix_csv(&mean_file, &mean)?;
    let svg_file = if svg {
        let path = dir.join("final_layer_mean.svg");
        fs::write(&path, attention_svg(&mean, &seq.labels, seq.valid_len()))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Some(path)
    } else {
        None
    };
    Ok(AttentionExport {
        head_files,
        mean_file,
        svg_file,
    })
}

fn attention_svg(mean: &Tensor, labels: &[u8], valid: usize) -> String {
    let n = valid.min(mean.rows()).max(1);
    let cell = (600.0 / n as f64).max(1.0);
    let size = cell * n as f64;
    let max = (0..n)
        .flat_map(|r| mean.row(r)[..n].iter().copied())
        .fold(f64::MIN_POSITIVE, f64::max);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    )
    .unwrap();
    s.push_str("<g data-layer=\"heatmap\">\n");
    for r in 0..n {
        for c in 0..n {
            let v = (mean.at(r, c) / max).clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            writeln!(
                s,
                r#"<rect x="{:.3}" y="{:.3}" width="{cell:.3}" height="{cell:.3}" fill="rgb({shade},{shade},255)"/>"#,
                c as f64 * cell,
                r as f64 * cell
            )
            .unwrap();
        }
    }
    s.push_str("</g>\n<g data-layer=\"boundaries\" stroke=\"red\" stroke-width=\"1.5\">\n");
    for t in 1..n {
        if labels.get(t) != labels.get(t - 1) {
            let p = t as f64 * cell;
            writeln!(s, r#"<line x1="{p:.3}" y1="0" x2="{p:.3}" y2="{size}"/>"#).unwrap();
            writeln!(s, r#"<line x1="0" y1="{p:.3}" x2="{size}" y2="{p:.3}"/>"#).unwrap();
        }
    }
    s.push_str("</g>\n</svg>\n");
    s
}

/// Run-length encoding as `(label, start, end_exclusive)`.
pub fn label_runs(labels: &[u8]) -> Vec<(u8, usize, usize)> {
    let mut runs: Vec<(u8, usize, usize)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match runs.last_mut() {
            Some(run) if run.0 == l => run.2 = i + 1,
            _ => runs.push((l, i, i + 1)),
        }
    }
    runs
}

fn label_name(l: u8) -> String {
    Segment::from_index(l)
        .map(|s| s.to_string())
        .unwrap_or_else(|| l.to_string())
}

const PALETTE: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

/// Two stacked tracks (truth above prediction) of the wrist trace, coloured
/// by label. Padded frames are left out.
pub fn timeline_svg(seq: &Sequence, predictions: &[u8]) -> Result<String> {
    let valid = seq.valid_len();
    if predictions.len() < valid {
        return Err(Error::Shape(format!(
            "{} predictions for {valid} frames",
            predictions.len()
        )));
    }
    let wrist: Vec<f64> = (0..valid).map(|t| seq.row(t)[0]).collect();
    let (lo, hi) = wrist
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (width, track_h, margin) = (900.0, 120.0, 30.0);
    let dx = if valid > 1 { width / (valid - 1) as f64 } else { 0.0 };
    let mut s = String::new();
    let height = 2.0 * track_h + 3.0 * margin;
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" viewBox="0 0 {} {height}">"#,
        width + 2.0 * margin,
        width + 2.0 * margin
    )
    .unwrap();
    let tracks = [("truth", &seq.labels[..valid]), ("prediction", &predictions[..valid])];
    for (k, (name, labels)) in tracks.iter().enumerate() {
        let top = margin + k as f64 * (track_h + margin);
        writeln!(s, r#"<g data-track="{name}" fill="none" stroke-width="2">"#).unwrap();
        writeln!(
            s,
            r#"<text x="{margin}" y="{:.1}" font-size="12" fill="black" stroke="none">{name}</text>"#,
            top - 6.0
        )
        .unwrap();
        for (label, start, end) in label_runs(labels) {
            // Include the first frame of the next run so the trace is continuous.
            let stop = (end + 1).min(valid);
            let points: Vec<String> = (start..stop)
                .map(|t| {
                    // Image coordinates: larger y is lower on screen.
                    let y = top + (wrist[t] - lo) / span * track_h;
                    format!("{:.2},{:.2}", margin + t as f64 * dx, y)
                })
                .collect();
            writeln!(
                s,
                r#"<polyline class="run" data-label="{}" data-start="{start}" data-end="{end}" stroke="{}" points="{}"/>"#,
                label_name(label),
                PALETTE[label as usize % PALETTE.len()],
                points.join(" ")
            )
            .unwrap();
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn export_timeline(seq: &Sequence, predictions: &[u8], path: &Path) -> Result<()> {
    let svg = timeline_svg(seq, predictions)?;
    fs::write(path, svg).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
