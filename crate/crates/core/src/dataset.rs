//! Fixed-length training sequences, label encoding, and patient-grouped
//! splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{format_value, RawSequence, View};

/// Sequence length every sample is standardized to.
pub const SEQUENCE_LEN: usize = 300;

/// Label of zero-padded frames; never a class index.
pub const IGNORE_INDEX: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Segment {
    /// Initiation and progression: hand moves toward the object.
    IP,
    /// Termination: grasp completes, object lifted off the table.
    T,
    /// Manipulation and transportation.
    MTR,
    /// Placement and release.
    PR,
}

impl Segment {
    pub const ALL: [Segment; 4] = [Segment::IP, Segment::T, Segment::MTR, Segment::PR];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Option<Segment> {
        Segment::ALL.get(i as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Segment::IP => "IP",
            Segment::T => "T",
            Segment::MTR => "MTR",
            Segment::PR => "PR",
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Segment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "IP" => Ok(Segment::IP),
            "T" => Ok(Segment::T),
            "MTR" => Ok(Segment::MTR),
            "PR" => Ok(Segment::PR),
            other => Err(Error::Format(format!("unknown segment label {other:?}"))),
        }
    }
}

/// Classes used for a view: all four for the top view, IP/T/MTR for the side views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelScheme {
    pub classes: Vec<Segment>,
    pub ignore_index: u8,
}

impl LabelScheme {
    pub fn for_view(view: View) -> Self {
        let classes = match view {
            View::Top => Segment::ALL.to_vec(),
            View::Ipsilateral | View::Contralateral => vec![Segment::IP, Segment::T, Segment::MTR],
        };
        LabelScheme {
            classes,
            ignore_index: IGNORE_INDEX,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn encode(&self, segment: Segment) -> Result<u8> {
        self.classes
            .iter()
            .position(|&c| c == segment)
            .map(|i| i as u8)
            .ok_or_else(|| {
                Error::LabelCoverage(format!("label {segment} is not part of this view's scheme"))
            })
    }

    pub fn decode(&self, index: u8) -> Option<Segment> {
        self.classes.get(index as usize).copied()
    }
}

/// A standardized training sample: `SEQUENCE_LEN` rows, padded rows zeroed
/// and labelled [`IGNORE_INDEX`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub patient_id: String,
    pub view: View,
    /// Row-major `SEQUENCE_LEN x n_channels`.
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
    pub original_length: usize,
}

impl Sequence {
    pub fn n_channels(&self) -> usize {
        match self.labels.len() {
            0 => self.view.n_channels(),
            n => self.values.len() / n,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of frames that carry real data (at most `SEQUENCE_LEN`).
    pub fn valid_len(&self) -> usize {
        self.original_length.min(self.labels.len())
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.n_channels();
        &self.values[t * c..(t + 1) * c]
    }
}

/// Frame indices kept when downsampling `len` frames to `target`.
pub fn downsample_indices(len: usize, target: usize) -> Vec<usize> {
    (0..target).map(|i| i * len / target).collect()
}

/// Downsamples (`floor(i * T / target)`) or zero-pads to `target` rows.
/// Returns the new values, labels, and the original length.
pub fn standardize_length(
    values: &[f64],
    n_channels: usize,
    labels: &[u8],
    target: usize,
) -> (Vec<f64>, Vec<u8>, usize) {
    let len = labels.len();
    assert_eq!(values.len(), len * n_channels, "values and labels are not aligned");
    if len > target {
        let idx = downsample_indices(len, target);
        let mut v = Vec::with_capacity(target * n_channels);
        for &i in &idx {
            v.extend_from_slice(&values[i * n_channels..(i + 1) * n_channels]);
        }
        let l = idx.iter().map(|&i| labels[i]).collect();
        (v, l, len)
    } else {
        let mut v = values.to_vec();
        v.resize(target * n_channels, 0.0);
        let mut l = labels.to_vec();
        l.resize(target, IGNORE_INDEX);
        (v, l, len)
    }
}

/// Drops every frame after the last MTR frame.
pub fn truncate_after_mtr(
    values: &[f64],
    n_channels: usize,
    labels: &[Segment],
) -> Result<(Vec<f64>, Vec<Segment>)> {
    let last = labels
        .iter()
        .rposition(|&s| s == Segment::MTR)
        .ok_or_else(|| Error::LabelCoverage("sequence has no MTR frame".into()))?;
    let keep = last + 1;
    Ok((values[..keep * n_channels].to_vec(), labels[..keep].to_vec()))
}

/// Turns a refined sequence and its per-frame labels into a standardized
/// [`Sequence`]. Side views are truncated after MTR first.
pub fn build_sequence(
    id: impl Into<String>,
    patient_id: impl Into<String>,
    refined: &RawSequence,
    labels: &[Segment],
) -> Result<Sequence> {
    let id = id.into();
    if labels.len() != refined.n_frames() {
        return Err(Error::Shape(format!(
            "sequence {id}: {} frames but {} labels",
            refined.n_frames(),
            labels.len()
        )));
    }
    let values = refined.to_dense().ok_or_else(|| {
        Error::Format(format!("sequence {id} still has missing values; refine it first"))
    })?;
    let view = refined.view;
    let c = view.n_channels();
    let (values, labels) = match view {
        View::Top => (values, labels.to_vec()),
        View::Ipsilateral | View::Contralateral => truncate_after_mtr(&values, c, labels)?,
    };
    let scheme = LabelScheme::for_view(view);
    let encoded = labels
        .iter()
        .map(|&s| scheme.encode(s))
        .collect::<Result<Vec<u8>>>()?;
    let (values, labels, original_length) =
        standardize_length(&values, c, &encoded, SEQUENCE_LEN);
    Ok(Sequence {
        id,
        patient_id: patient_id.into(),
        view,
        values,
        labels,
        original_length,
    })
}

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

/// Routes every sequence of a held-out patient to the test side.
pub fn split_by_patient(records: Vec<Sequence>, test_patient_ids: &[String]) -> Result<Split> {
    if test_patient_ids.is_empty() {
        return Err(Error::Config("no test patients given".into()));
    }
    let present: HashSet<&str> = records.iter().map(|s| s.patient_id.as_str()).collect();
    if let Some(unknown) = test_patient_ids.iter().find(|p| !present.contains(p.as_str())) {
        return Err(Error::Lookup(format!("patient {unknown:?} has no sequences")));
    }
    let held: HashSet<&str> = test_patient_ids.iter().map(String::as_str).collect();
    let (test, train): (Vec<_>, Vec<_>) = records
        .into_iter()
        .partition(|s| held.contains(s.patient_id.as_str()));
    Ok(Split { train, test })
}

/// Patient-disjoint cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// `folds[i]` holds the validation patients of fold `i`.
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    pub fn validation_patients(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    /// Splits `sequences` into (train, validation) for the given fold.
    pub fn partition<'a>(
        &self,
        fold: usize,
        sequences: &'a [Sequence],
    ) -> (Vec<&'a Sequence>, Vec<&'a Sequence>) {
        let val: HashSet<&str> = self.folds[fold].iter().map(String::as_str).collect();
        sequences
            .iter()
            .partition(|s| !val.contains(s.patient_id.as_str()))
    }
}

/// Shuffles the distinct patients with `seed` and deals them round-robin
/// into `k` validation groups.
pub fn kfold_by_patient(train: &[Sequence], k: usize, seed: u64) -> Result<FoldPlan> {
    let patients: BTreeSet<&str> = train.iter().map(|s| s.patient_id.as_str()).collect();
    kfold_patients(patients.into_iter().map(String::from).collect(), k, seed)
}

/// Same as [`kfold_by_patient`], starting from a patient list. Duplicates are ignored.
pub fn kfold_patients(patients: Vec<String>, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut patients: Vec<String> = patients
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if patients.len() < k {
        return Err(Error::Config(format!(
            "{} patients cannot fill {k} folds",
            patients.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, p) in patients.into_iter().enumerate() {
        folds[i % k].push(p);
    }
    Ok(FoldPlan { k, seed, folds })
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    frame: usize,
    label: String,
}

pub fn read_labels(path: &Path) -> Result<Vec<Segment>> {
    let file =
        File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<LabelRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if row.frame != i {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected frame {i}, found {}", row.frame),
            });
        }
        out.push(row.label.parse().map_err(|e: Error| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[Segment]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame", "label"])?;
    for (t, s) in labels.iter().enumerate() {
        w.write_record([t.to_string(), s.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("writing labels", e))?;
    Ok(())
}

/// Writes `frame,ch0..chN,label` where label is the class index (255 = padding).
pub fn write_sequence_csv(path: &Path, seq: &Sequence) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let c = seq.n_channels();
    let mut header = vec!["frame".to_string()];
    header.extend((0..c).map(|i| format!("ch{i}")));
    header.push("label".into());
    w.write_record(&header)?;
    for t in 0..seq.len() {
        let mut rec = vec![t.to_string()];
        rec.extend(seq.row(t).iter().map(|&v| format_value(v)));
        rec.push(seq.labels[t].to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("writing sequence", e))?;
    Ok(())
}

fn read_sequence_csv(path: &Path, view: View) -> Result<(Vec<f64>, Vec<u8>)> {
    let file =
        File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let c = view.n_channels();
    let width = rdr.headers()?.len();
    if width != c + 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected {} columns for {view} view, found {width}", c + 2),
        });
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        for field in rec.iter().skip(1).take(c) {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|_| bad(format!("cannot parse {field:?}")))?,
            );
        }
        let label = &rec[c + 1];
        labels.push(
            label
                .parse::<u8>()
                .map_err(|_| bad(format!("cannot parse label {label:?}")))?,
        );
    }
    Ok((values, labels))
}

/// One row of the standardized-dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub patient_id: String,
    pub view: View,
    pub original_length: usize,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
}

/// Writes each sequence as `<id>.csv` under `dir` plus `dir/dataset.csv`.
pub fn save_dataset(dir: &Path, sequences: &[Sequence]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let manifest = dir.join("dataset.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    if sequences.is_empty() {
        w.write_record(["id", "patient_id", "view", "original_length", "path"])?;
    }
    for seq in sequences {
        let rel = PathBuf::from(format!("{}.csv", seq.id));
        write_sequence_csv(&dir.join(&rel), seq)?;
        w.serialize(DatasetEntry {
            id: seq.id.clone(),
            patient_id: seq.patient_id.clone(),
            view: seq.view,
            original_length: seq.original_length,
            path: rel,
        })?;
    }
    w.flush().map_err(|e| Error::io("writing dataset manifest", e))?;
    Ok(manifest)
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<Sequence>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let file = File::open(manifest)
        .map_err(|e| Error::io(format!("opening {}", manifest.display()), e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for (i, entry) in rdr.deserialize::<DatasetEntry>().enumerate() {
        let entry = entry.map_err(|e| Error::Parse {
            path: manifest.to_path_buf(),
            line: i + 2,
            message: e.to_string(),
        })?;
        let (values, labels) = read_sequence_csv(&base.join(&entry.path), entry.view)?;
        out.push(Sequence {
            id: entry.id,
            patient_id: entry.patient_id,
            view: entry.view,
            values,
            labels,
            original_length: entry.original_length,
        });
    }
    Ok(out)
}

/// Sequence counts per patient, in patient-id order.
pub fn patient_counts(sequences: &[Sequence]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in sequences {
        *counts.entry(s.patient_id.clone()).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use Segment::*;

    fn seq(id: &str, patient: &str) -> Sequence {
        Sequence {
            id: id.into(),
            patient_id: patient.into(),
            view: View::Top,
            values: vec![0.0; SEQUENCE_LEN * 21],
            labels: vec![0; SEQUENCE_LEN],
            original_length: SEQUENCE_LEN,
        }
    }

    fn numbered(t: usize, c: usize) -> (Vec<f64>, Vec<u8>) {
        let values = (0..t * c).map(|i| i as f64).collect();
        let labels = (0..t).map(|i| (i % 4) as u8).collect();
        (values, labels)
    }

    #[test]
    fn length_300_is_identity() {
        let (v, l) = numbered(300, 2);
        let (v2, l2, n) = standardize_length(&v, 2, &l, 300);
        assert_eq!((v2, l2, n), (v, l, 300));
    }

    #[test]
    fn downsampling_600_takes_even_frames() {
        let (v, l) = numbered(600, 2);
        let (v2, l2, n) = standardize_length(&v, 2, &l, 300);
        assert_eq!(n, 600);
        assert_eq!(downsample_indices(600, 300), (0..300).map(|i| 2 * i).collect::<Vec<_>>());
        for i in 0..300 {
            assert_eq!(&v2[i * 2..i * 2 + 2], &v[4 * i..4 * i + 2]);
            assert_eq!(l2[i], l[2 * i]);
        }
    }

    #[test]
    fn short_sequences_are_zero_padded() {
        let (v, l) = numbered(150, 3);
        let (v2, l2, n) = standardize_length(&v, 3, &l, 300);
        assert_eq!(n, 150);
        assert_eq!(&v2[..450], &v[..]);
        assert!(v2[450..].iter().all(|&x| x == 0.0));
        assert_eq!(&l2[..150], &l[..]);
        assert!(l2[150..].iter().all(|&x| x == IGNORE_INDEX));
    }

    #[test]
    fn truncation_keeps_through_last_mtr() {
        let labels = [IP, IP, T, MTR, MTR, PR, PR];
        let values: Vec<f64> = (0..7).map(f64::from).collect();
        let (v, l) = truncate_after_mtr(&values, 1, &labels).unwrap();
        assert_eq!(l, vec![IP, IP, T, MTR, MTR]);
        assert_eq!(v, vec![0.0, 1.0, 2.0, 3.0, 4.0]);

        let ends = [IP, T, MTR];
        assert_eq!(truncate_after_mtr(&[0.0; 3], 1, &ends).unwrap().1, ends.to_vec());

        assert!(matches!(
            truncate_after_mtr(&[0.0; 2], 1, &[IP, T]),
            Err(Error::LabelCoverage(_))
        ));
    }

    #[test]
    fn side_view_build_truncates_and_encodes() {
        let rows: Vec<Vec<Option<f64>>> = (0..6).map(|t| vec![Some(t as f64); 22]).collect();
        let raw = RawSequence::from_rows(View::Contralateral, rows).unwrap();
        let s = build_sequence("s", "p", &raw, &[IP, T, MTR, MTR, PR, PR]).unwrap();
        assert_eq!(s.original_length, 4);
        assert_eq!(&s.labels[..5], &[0, 1, 2, 2, IGNORE_INDEX]);
        assert_eq!(s.values.len(), SEQUENCE_LEN * 22);
    }

    #[test]
    fn top_view_keeps_pr() {
        let rows: Vec<Vec<Option<f64>>> = (0..4).map(|t| vec![Some(t as f64); 21]).collect();
        let raw = RawSequence::from_rows(View::Top, rows).unwrap();
        let s = build_sequence("s", "p", &raw, &[IP, T, MTR, PR]).unwrap();
        assert_eq!(&s.labels[..4], &[0, 1, 2, 3]);
    }

    #[test]
    fn split_routes_by_patient() {
        let records: Vec<Sequence> = (0..10)
            .flat_map(|p| (0..3).map(move |i| seq(&format!("s{p}_{i}"), &format!("p{p}"))))
            .collect();
        let split = split_by_patient(records, &["p3".into(), "p7".into()]).unwrap();
        assert_eq!(split.test.len(), 6);
        assert_eq!(split.train.len(), 24);
        assert!(split.test.iter().all(|s| s.patient_id == "p3" || s.patient_id == "p7"));
        assert!(split.train.iter().all(|s| s.patient_id != "p3" && s.patient_id != "p7"));
    }

    #[test]
    fn split_unknown_patient_is_lookup_error() {
        let records = vec![seq("a", "p1")];
        assert!(matches!(
            split_by_patient(records, &["p9".into()]),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn single_patient_held_out_leaves_empty_train() {
        let split = split_by_patient(vec![seq("a", "p1"), seq("b", "p1")], &["p1".into()]).unwrap();
        assert!(split.train.is_empty());
        assert_eq!(split.test.len(), 2);
    }

    #[test]
    fn folds_deal_round_robin() {
        let ten: Vec<Sequence> = (0..10).map(|p| seq(&format!("s{p}"), &format!("p{p}"))).collect();
        let plan = kfold_by_patient(&ten, 5, 7).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 2));

        let eleven: Vec<String> = (0..11).map(|p| format!("p{p}")).collect();
        let plan = kfold_patients(eleven, 5, 7).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
    }

    #[test]
    fn folds_are_deterministic_and_seed_dependent() {
        let ps: Vec<String> = (0..20).map(|p| format!("p{p}")).collect();
        let a = kfold_patients(ps.clone(), 5, 1).unwrap();
        let b = kfold_patients(ps.clone(), 5, 1).unwrap();
        let c = kfold_patients(ps, 5, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_patients_for_k() {
        let ps: Vec<String> = (0..4).map(|p| format!("p{p}")).collect();
        assert!(matches!(kfold_patients(ps, 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn partition_respects_fold() {
        let seqs: Vec<Sequence> = (0..10).map(|p| seq(&format!("s{p}"), &format!("p{p}"))).collect();
        let plan = kfold_by_patient(&seqs, 5, 3).unwrap();
        let (train, val) = plan.partition(2, &seqs);
        assert_eq!(train.len(), 8);
        assert_eq!(val.len(), 2);
        for v in &val {
            assert!(plan.folds[2].contains(&v.patient_id));
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = seq("a", "p1");
        s.values[5] = 1.5;
        s.labels[299] = IGNORE_INDEX;
        s.original_length = 299;
        let manifest = save_dataset(dir.path(), std::slice::from_ref(&s)).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back, vec![s]);
    }

    #[test]
    fn labels_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        let labels = vec![IP, IP, T, MTR, PR];
        write_labels(&path, &labels).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "frame,label\n0,IP\n1,IP\n2,T\n3,MTR\n4,PR\n"
        );
        assert_eq!(read_labels(&path).unwrap(), labels);
    }
}
