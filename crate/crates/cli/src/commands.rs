use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use keyseg_core::dataset::{
    build_sequence, downsample_indices, kfold_by_patient, load_dataset, read_labels, save_dataset,
    split_by_patient, standardize_length, write_labels, LabelScheme, Segment, Sequence, SEQUENCE_LEN,
};
use keyseg_core::ingest::{
    align_object_centers, assemble_channels, parse_detections, parse_landmarks, RawSequence, View,
};
use keyseg_core::models::{Model, ModelConfig};
use keyseg_core::nn::Tensor;
use keyseg_core::refine::{
    append_manifest, missing_fraction, refine_sequence, write_manifest, ManifestRow, Refinement,
};
use keyseg_core::synth::generate;
use keyseg_core::trainer::{
    cross_validate_runs, export_attention, export_timeline, train, write_history,
};
use keyseg_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{
    AttnArgs, BuildArgs, Command, CvArgs, IngestArgs, PlotArgs, PredictArgs, RefineArgs,
    SynthArgs, TrainArgs, EXIT_OK, EXIT_REJECTED,
};

pub(crate) fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Ingest(a) => ingest(a),
        Command::Refine(a) => refine(a),
        Command::Synth(a) => synth(a),
        Command::Build(a) => build(a),
        Command::Train(a) => train_cmd(a),
        Command::Cv(a) => cv(a),
        Command::Predict(a) => predict(a),
        Command::Attn(a) => attn(a),
        Command::Plot(a) => plot(a),
    }
}

fn io_err(what: &str, path: &Path) -> impl FnOnce(std::io::Error) -> Error {
    let context = format!("{what} {}", path.display());
    move |source| Error::Io { context, source }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err("creating", dir))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into())
}

/// View of a sequence CSV: as given, or from its channel count. Top and
/// ipsilateral files are indistinguishable and refine identically.
fn infer_view(path: &Path, given: Option<View>) -> Result<View> {
    if let Some(v) = given {
        return Ok(v);
    }
    let file = fs::File::open(path).map_err(io_err("opening", path))?;
    let mut header = String::new();
    BufReader::new(file)
        .read_line(&mut header)
        .map_err(io_err("reading", path))?;
    view_for_channels(header.trim_end().split(',').count().saturating_sub(1)).ok_or_else(|| {
        Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected 21 or 22 channel columns after `frame`".into(),
        }
    })
}

fn view_for_channels(c: usize) -> Option<View> {
    match c {
        22 => Some(View::Contralateral),
        21 => Some(View::Ipsilateral),
        _ => None,
    }
}

/// Loads a refined sequence as row-major values.
fn load_refined(path: &Path, view: View) -> Result<(RawSequence, Vec<f64>)> {
    let raw = RawSequence::load_csv(path, view)?;
    let dense = raw.to_dense().ok_or_else(|| {
        Error::Format(format!(
            "{} has missing values; run `keyseg refine` first",
            path.display()
        ))
    })?;
    if raw.n_frames() == 0 {
        return Err(Error::Format(format!("{} has no frames", path.display())));
    }
    Ok((raw, dense))
}

fn ingest(a: IngestArgs) -> Result<i32> {
    let landmarks = parse_landmarks(&a.landmarks)?;
    let centers = match &a.detections {
        Some(p) => Some(align_object_centers(&parse_detections(p)?, &landmarks, &a.target_class)),
        None => None,
    };
    let seq = assemble_channels(&landmarks, centers.as_deref(), a.view)?;
    seq.save_csv(&a.out)?;
    println!("wrote {} frames x {} channels to {}", seq.n_frames(), seq.n_channels(), a.out.display());
    Ok(EXIT_OK)
}

fn refine(a: RefineArgs) -> Result<i32> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let view = infer_view(&a.input, a.view.or(cfg.view))?;
    let raw = RawSequence::load_csv(&a.input, view)?;
    let id = a.id.unwrap_or_else(|| file_stem(&a.input));
    let manifest = a.manifest.unwrap_or_else(|| {
        a.out
            .parent()
            .unwrap_or(Path::new("."))
            .join("refine_manifest.csv")
    });
    let fractions = missing_fraction(&raw);
    match refine_sequence(&raw, &cfg.refine)? {
        Refinement::Accepted(seq) => {
            seq.save_csv(&a.out)?;
            append_manifest(&manifest, &[ManifestRow::new(id, fractions, true)])?;
            Ok(EXIT_OK)
        }
        Refinement::Rejected(fr) => {
            append_manifest(&manifest, &[ManifestRow::new(&id, fr, false)])?;
            eprintln!(
                "rejected {id}: hand missing {:.3}, object missing {:.3} (limit {})",
                fr.hand, fr.object, cfg.refine.max_missing_fraction
            );
            Ok(EXIT_REJECTED)
        }
    }
}

/// One row of the manifest written by `synth`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SynthEntry {
    id: String,
    patient_id: String,
    view: View,
    sequence_path: PathBuf,
    labels_path: PathBuf,
}

const SYNTH_HEADER: [&str; 5] = ["id", "patient_id", "view", "sequence_path", "labels_path"];

fn synth(a: SynthArgs) -> Result<i32> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    cfg.apply_seed(a.seed);
    if let Some(n) = a.n {
        cfg.synth.n_sequences = n;
    }
    if let Some(v) = a.view {
        cfg.synth.view = v;
    }
    let out = a
        .out_dir
        .or(cfg.paths.out_dir.clone())
        .ok_or_else(|| Error::Config("--out-dir is required".into()))?;
    create_dir(&out)?;
    let manifest = out.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(SYNTH_HEADER)?;
    let sequences = generate(&cfg.synth)?;
    for s in &sequences {
        let seq_rel = PathBuf::from(format!("{}.csv", s.id));
        let lab_rel = PathBuf::from(format!("{}.labels.csv", s.id));
        s.raw.save_csv(&out.join(&seq_rel))?;
        write_labels(&out.join(&lab_rel), &s.labels)?;
        let view = s.raw.view.to_string();
        w.write_record([
            s.id.as_str(),
            s.patient_id.as_str(),
            view.as_str(),
            &seq_rel.to_string_lossy(),
            &lab_rel.to_string_lossy(),
        ])?;
    }
    w.flush().map_err(io_err("writing", &manifest))?;
    println!("wrote {} sequences to {}", sequences.len(), out.display());
    Ok(EXIT_OK)
}

fn read_synth_manifest(path: &Path) -> Result<Vec<SynthEntry>> {
    let file = fs::File::open(path).map_err(io_err("opening", path))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

fn build(a: BuildArgs) -> Result<i32> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let base = a.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out = a
        .out_dir
        .or(cfg.paths.out_dir.clone())
        .unwrap_or_else(|| base.join("dataset"));
    let entries = read_synth_manifest(&a.manifest)?;
    let mut sequences = Vec::new();
    let mut rows = Vec::new();
    for e in &entries {
        let raw = RawSequence::load_csv(&base.join(&e.sequence_path), e.view)?;
        let labels = read_labels(&base.join(&e.labels_path))?;
        match refine_sequence(&raw, &cfg.refine)? {
            Refinement::Accepted(refined) => {
                rows.push(ManifestRow::new(&e.id, missing_fraction(&raw), true));
                sequences.push(build_sequence(&e.id, &e.patient_id, &refined, &labels)?);
            }
            Refinement::Rejected(fr) => rows.push(ManifestRow::new(&e.id, fr, false)),
        }
    }
    let dataset = save_dataset(&out, &sequences)?;
    write_manifest(&out.join("refine_manifest.csv"), &rows)?;
    println!(
        "kept {} of {} sequences; dataset at {}",
        sequences.len(),
        entries.len(),
        dataset.display()
    );
    Ok(EXIT_OK)
}

struct Prepared {
    cfg: RunConfig,
    model: ModelConfig,
    view: View,
    data: Vec<Sequence>,
}

fn prepare(
    config: Option<&Path>,
    manifest: Option<PathBuf>,
    model: Option<String>,
    view: Option<View>,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<Prepared> {
    let mut cfg = RunConfig::load_or_default(config)?;
    cfg.apply_seed(seed);
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        cfg.train.validate()?;
    }
    let manifest = manifest
        .or(cfg.paths.manifest.clone())
        .ok_or_else(|| Error::Config("--manifest is required".into()))?;
    let name = model
        .or(cfg.model.clone())
        .ok_or_else(|| Error::Config("--model is required".into()))?;
    let mut data = load_dataset(&manifest)?;
    let view = match view.or(cfg.view) {
        Some(v) => v,
        None => {
            let first = data
                .first()
                .map(|s| s.view)
                .ok_or_else(|| Error::Lookup(format!("{} lists no sequences", manifest.display())))?;
            if data.iter().any(|s| s.view != first) {
                return Err(Error::Config("dataset mixes views; pass --view".into()));
            }
            first
        }
    };
    data.retain(|s| s.view == view);
    if data.is_empty() {
        return Err(Error::Lookup(format!("no {view} sequences in {}", manifest.display())));
    }
    let scheme = LabelScheme::for_view(view);
    let model = ModelConfig::from_name(&name, view.n_channels(), scheme.n_classes())?;
    Ok(Prepared {
        cfg,
        model,
        view,
        data,
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let p = prepare(a.config.as_deref(), a.manifest, a.model, a.view, a.seed, a.epochs)?;
    let (train_set, val_set) = if p.cfg.test_patients.is_empty() {
        (p.data, Vec::new())
    } else {
        let split = split_by_patient(p.data, &p.cfg.test_patients)?;
        (split.train, split.test)
    };
    let tr: Vec<&Sequence> = train_set.iter().collect();
    let va: Vec<&Sequence> = val_set.iter().collect();
    let model = Model::build(p.model.clone(), p.cfg.train.seed)?;
    let outcome = train(model, &tr, &va, &p.cfg.train)?;
    if let Some(parent) = a.out_model.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    outcome.final_model.save(&a.out_model)?;
    if !va.is_empty() {
        outcome.best_model.save(&with_suffix(&a.out_model, ".best"))?;
    }
    let history = a
        .history
        .unwrap_or_else(|| with_suffix(&a.out_model, ".history.csv"));
    write_history(&history, &outcome.history)?;
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "{} on {} {} sequences: final train loss {:.4}, train acc {:.4}{}",
        p.model.name(),
        tr.len(),
        p.view,
        last.train_loss,
        last.train_acc,
        outcome
            .best_val_acc
            .map(|v| format!(", best val acc {v:.4} (epoch {})", outcome.best_epoch))
            .unwrap_or_default()
    );
    Ok(EXIT_OK)
}

fn cv(a: CvArgs) -> Result<i32> {
    let p = prepare(a.config.as_deref(), a.manifest, a.model, a.view, a.seed, a.epochs)?;
    let k = a.k.unwrap_or(p.cfg.folds.k);
    if k < 2 {
        return Err(Error::Config(format!("--k must be at least 2, got {k}")));
    }
    let out = a
        .out_dir
        .or(p.cfg.paths.out_dir.clone())
        .ok_or_else(|| Error::Config("--out-dir is required".into()))?;
    let (train_set, test_set) = if p.cfg.test_patients.is_empty() {
        (p.data, None)
    } else {
        let split = split_by_patient(p.data, &p.cfg.test_patients)?;
        (split.train, Some(split.test))
    };
    let plan = kfold_by_patient(&train_set, k, p.cfg.fold_seed())?;
    let (report, runs) = cross_validate_runs(
        &p.model,
        &train_set,
        &plan,
        &p.cfg.train,
        test_set.as_deref(),
        a.jobs,
    )?;
    create_dir(&out)?;
    let write_json = |name: &str, text: String| -> Result<()> {
        let path = out.join(name);
        fs::write(&path, text + "\n").map_err(io_err("writing", &path))
    };
    write_json("fold_plan.json", serde_json::to_string_pretty(&plan)?)?;
    write_json("fold_report.json", serde_json::to_string_pretty(&report)?)?;
    for run in &runs {
        write_history(&out.join(format!("fold{}_history.csv", run.fold)), &run.outcome.history)?;
        run.outcome
            .best_model
            .save(&out.join(format!("fold{}_best.ckpt", run.fold)))?;
    }
    println!("{} {}: {}", report.model, report.view, report.summary());
    Ok(EXIT_OK)
}

fn model_view(model: &Model) -> Result<View> {
    view_for_channels(model.config().n_channels).ok_or_else(|| {
        Error::Format(format!(
            "model expects {} channels; sequence files have 21 or 22",
            model.config().n_channels
        ))
    })
}

/// Standardized model input for a refined sequence of any length.
fn standardized_input(dense: &[f64], n_frames: usize, c: usize) -> Result<(Tensor, usize)> {
    let (values, _, _) = standardize_length(dense, c, &vec![0; n_frames], SEQUENCE_LEN);
    Ok((Tensor::matrix(SEQUENCE_LEN, c, values)?, n_frames.min(SEQUENCE_LEN)))
}

fn to_segments(labels: &[u8]) -> Result<Vec<Segment>> {
    labels
        .iter()
        .map(|&l| {
            Segment::from_index(l).ok_or_else(|| Error::Format(format!("class {l} has no segment name")))
        })
        .collect()
}

fn predict(a: PredictArgs) -> Result<i32> {
    let model = Model::load(&a.model_file)?;
    let view = model_view(&model)?;
    let (raw, dense) = load_refined(&a.input, view)?;
    let t = raw.n_frames();
    let (x, valid) = standardized_input(&dense, t, raw.n_channels())?;
    let preds = model.predict(&x, valid)?;
    let per_frame: Vec<u8> = if t > SEQUENCE_LEN {
        // Each original frame takes the prediction of the latest sampled frame at or before it.
        let idx = downsample_indices(t, SEQUENCE_LEN);
        (0..t)
            .map(|f| preds[idx.partition_point(|&i| i <= f) - 1])
            .collect()
    } else {
        preds
    };
    write_labels(&a.out, &to_segments(&per_frame)?)?;
    Ok(EXIT_OK)
}

fn attn(a: AttnArgs) -> Result<i32> {
    let model = Model::load(&a.model_file)?;
    if !model.config().has_attention() {
        return Err(Error::Capability(format!(
            "{} has no attention layers to export",
            model.name()
        )));
    }
    let view = model_view(&model)?;
    let (raw, dense) = load_refined(&a.input, view)?;
    let t = raw.n_frames();
    let labels: Vec<u8> = match &a.labels {
        Some(p) => {
            let l = read_labels(p)?;
            if l.len() != t {
                return Err(Error::Shape(format!("{t} frames but {} labels", l.len())));
            }
            l.iter().map(|s| s.index()).collect()
        }
        None => vec![0; t],
    };
    let c = raw.n_channels();
    let (values, labels, original_length) = standardize_length(&dense, c, &labels, SEQUENCE_LEN);
    let seq = Sequence {
        id: file_stem(&a.input),
        patient_id: String::new(),
        view,
        values,
        labels,
        original_length,
    };
    let export = export_attention(&model, &seq, &a.out_dir, !a.no_svg)?;
    println!(
        "wrote {} attention maps and {}",
        export.head_files.iter().map(Vec::len).sum::<usize>(),
        export.mean_file.display()
    );
    Ok(EXIT_OK)
}

fn plot(a: PlotArgs) -> Result<i32> {
    let view = infer_view(&a.input, None)?;
    let (raw, dense) = load_refined(&a.input, view)?;
    let t = raw.n_frames();
    let truth: Vec<u8> = read_labels(&a.labels)?.iter().map(|s| s.index()).collect();
    let pred: Vec<u8> = read_labels(&a.pred)?.iter().map(|s| s.index()).collect();
    if truth.len() != t || pred.len() != t {
        return Err(Error::Shape(format!(
            "{t} frames but {} true and {} predicted labels",
            truth.len(),
            pred.len()
        )));
    }
    let seq = Sequence {
        id: file_stem(&a.input),
        patient_id: String::new(),
        view,
        values: dense,
        labels: truth,
        original_length: t,
    };
    export_timeline(&seq, &pred, &a.out)?;
    Ok(EXIT_OK)
}
