//! Sequence refinement: reject sequences with too many undetected frames,
//! fill the remaining gaps with nearest-neighbor interpolation, then smooth
//! every channel with a Savitzky-Golay filter.

use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{RawSequence, N_LANDMARKS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Sequences with a larger missing fraction in either source are rejected.
    pub max_missing_fraction: f64,
    pub sg_window: usize,
    pub sg_polyorder: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            max_missing_fraction: 0.25,
            sg_window: 11,
            sg_polyorder: 3,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_missing_fraction) {
            return Err(Error::Config(format!(
                "max_missing_fraction {} outside [0, 1]",
                self.max_missing_fraction
            )));
        }
        check_window(self.sg_window, self.sg_polyorder)
    }
}

/// Fraction of frames in which each source (hand, object) is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingFractions {
    pub hand: f64,
    pub object: f64,
}

/// A hand counts as missing in a frame only when all 21 landmark channels
/// are missing. Views without an object channel report an object fraction of 0.
pub fn missing_fraction(sequence: &RawSequence) -> MissingFractions {
    let t = sequence.n_frames();
    if t == 0 {
        return MissingFractions {
            hand: 0.0,
            object: 0.0,
        };
    }
    let mut hand = 0usize;
    let mut object = 0usize;
    for f in 0..t {
        let row = sequence.row(f);
        if row[..N_LANDMARKS].iter().all(Option::is_none) {
            hand += 1;
        }
        if sequence.view.has_object_channel() && row[N_LANDMARKS].is_none() {
            object += 1;
        }
    }
    MissingFractions {
        hand: hand as f64 / t as f64,
        object: object as f64 / t as f64,
    }
}

/// Kept when neither source exceeds the threshold; exactly at the threshold is kept.
pub fn accept(fractions: MissingFractions, config: &RefineConfig) -> bool {
    fractions.hand <= config.max_missing_fraction && fractions.object <= config.max_missing_fraction
}

/// Replaces each missing entry with the nearest observed value by index
/// distance. Equidistant neighbors resolve to the earlier index.
pub fn interpolate_nn(channel: &[Option<f64>]) -> Result<Vec<f64>> {
    interpolate_channel(channel, 0)
}

fn interpolate_channel(channel: &[Option<f64>], channel_index: usize) -> Result<Vec<f64>> {
    let n = channel.len();
    // Index of the closest observation at or after each position.
    let mut next = vec![usize::MAX; n];
    let mut upcoming = usize::MAX;
    for i in (0..n).rev() {
        if channel[i].is_some() {
            upcoming = i;
        }
        next[i] = upcoming;
    }
    if n > 0 && next[0] == usize::MAX {
        return Err(Error::UnrecoverableChannel {
            channel: channel_index,
        });
    }

    let mut out = Vec::with_capacity(n);
    let mut prev: Option<usize> = None;
    for i in 0..n {
        if let Some(v) = channel[i] {
            prev = Some(i);
            out.push(v);
            continue;
        }
        let source = match (prev, next[i]) {
            (Some(p), usize::MAX) => p,
            (None, nx) => nx,
            (Some(p), nx) => {
                if i - p <= nx - i {
                    p
                } else {
                    nx
                }
            }
        };
        out.push(channel[source].expect("source index is observed"));
    }
    Ok(out)
}

fn check_window(window: usize, polyorder: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!(
            "Savitzky-Golay window must be odd and positive, got {window}"
        )));
    }
    if polyorder >= window {
        return Err(Error::Config(format!(
            "polyorder {polyorder} must be smaller than window {window}"
        )));
    }
    Ok(())
}

/// Precomputed Savitzky-Golay smoothing weights.
///
/// Row `i` of the projection matrix evaluates the least-squares polynomial fit
/// of a window at offset `i`. Interior samples use the center row; the first and
/// last half-window evaluate the boundary window's fit off-center.
#[derive(Debug, Clone)]
pub struct SavgolKernel {
    window: usize,
    polyorder: usize,
    projection: Vec<f64>,
}

impl SavgolKernel {
    pub fn new(window: usize, polyorder: usize) -> Result<Self> {
        check_window(window, polyorder)?;
        let half = (window / 2) as f64;
        let scale = if half > 0.0 { half } else { 1.0 };
        let n_basis = polyorder + 1;

        // Orthonormal basis of the (scaled) Vandermonde column space, built by
        // modified Gram-Schmidt with one reorthogonalization pass.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n_basis);
        for degree in 0..n_basis {
            let mut col: Vec<f64> = (0..window)
                .map(|i| ((i as f64 - half) / scale).powi(degree as i32))
                .collect();
            for _ in 0..2 {
                for q in &basis {
                    let dot: f64 = q.iter().zip(&col).map(|(a, b)| a * b).sum();
                    for (c, qv) in col.iter_mut().zip(q) {
                        *c -= dot * qv;
                    }
                }
            }
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            col.iter_mut().for_each(|v| *v /= norm);
            basis.push(col);
        }

        let mut projection = vec![0.0; window * window];
        for i in 0..window {
            for j in 0..window {
                projection[i * window + j] = basis.iter().map(|q| q[i] * q[j]).sum();
            }
        }
        Ok(SavgolKernel {
            window,
            polyorder,
            projection,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn polyorder(&self) -> usize {
        self.polyorder
    }

    /// Weights that evaluate the window fit at in-window position `offset`.
    pub fn weights(&self, offset: usize) -> &[f64] {
        &self.projection[offset * self.window..(offset + 1) * self.window]
    }

    pub fn apply(&self, channel: &[f64]) -> Result<Vec<f64>> {
        let n = channel.len();
        let w = self.window;
        if n < w {
            return Err(Error::Shape(format!(
                "channel of length {n} is shorter than the Savitzky-Golay window {w}"
            )));
        }
        let half = w / 2;
        let dot = |weights: &[f64], start: usize| -> f64 {
            weights
                .iter()
                .zip(&channel[start..start + w])
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut out = Vec::with_capacity(n);
        for i in 0..half {
            out.push(dot(self.weights(i), 0));
        }
        let center = self.weights(half);
        for i in half..n - half {
            out.push(dot(center, i - half));
        }
        for i in n - half..n {
            out.push(dot(self.weights(i - (n - w)), n - w));
        }
        Ok(out)
    }
}

pub fn savgol(channel: &[f64], window: usize, polyorder: usize) -> Result<Vec<f64>> {
    SavgolKernel::new(window, polyorder)?.apply(channel)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Refinement {
    Accepted(RawSequence),
    Rejected(MissingFractions),
}

impl Refinement {
    pub fn accepted(self) -> Option<RawSequence> {
        match self {
            Refinement::Accepted(seq) => Some(seq),
            Refinement::Rejected(_) => None,
        }
    }
}

/// Gate, interpolate, then smooth. Accepted output has no missing entries and
/// keeps the input's shape.
pub fn refine_sequence(sequence: &RawSequence, config: &RefineConfig) -> Result<Refinement> {
    config.validate()?;
    let fractions = missing_fraction(sequence);
    if !accept(fractions, config) {
        return Ok(Refinement::Rejected(fractions));
    }
    let kernel = SavgolKernel::new(config.sg_window, config.sg_polyorder)?;
    let mut out = sequence.clone();
    for c in 0..sequence.n_channels() {
        let filled = interpolate_channel(&sequence.channel(c), c)?;
        let smoothed = kernel.apply(&filled)?;
        out.set_channel(c, &smoothed);
    }
    Ok(Refinement::Accepted(out))
}

/// One line of the refinement manifest CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sequence_id: String,
    pub hand_fraction: f64,
    pub object_fraction: f64,
    pub accepted: bool,
}

impl ManifestRow {
    pub fn new(sequence_id: impl Into<String>, fractions: MissingFractions, accepted: bool) -> Self {
        ManifestRow {
            sequence_id: sequence_id.into(),
            hand_fraction: fractions.hand,
            object_fraction: fractions.object,
            accepted,
        }
    }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["sequence_id", "hand_fraction", "object_fraction", "accepted"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("writing refine manifest", e))?;
    Ok(())
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("writing refine manifest", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::View;

    fn seq_with_hand_missing(t: usize, missing: &[usize]) -> RawSequence {
        let rows = (0..t)
            .map(|f| {
                (0..21)
                    .map(|c| {
                        if missing.contains(&f) {
                            None
                        } else {
                            Some(100.0 + f as f64 + c as f64)
                        }
                    })
                    .collect()
            })
            .collect();
        RawSequence::from_rows(View::Top, rows).unwrap()
    }

    #[test]
    fn counts_missing_hand_frames() {
        let missing: Vec<usize> = (0..75).collect();
        let fr = missing_fraction(&seq_with_hand_missing(300, &missing));
        assert_eq!(fr.hand, 0.25);
        assert_eq!(fr.object, 0.0);

        let missing: Vec<usize> = (0..76).collect();
        let fr = missing_fraction(&seq_with_hand_missing(300, &missing));
        assert!((fr.hand - 76.0 / 300.0).abs() < 1e-15);
    }

    #[test]
    fn partially_missing_hand_is_not_counted() {
        let mut seq = seq_with_hand_missing(10, &[]);
        seq.set(3, 0, None);
        assert_eq!(missing_fraction(&seq).hand, 0.0);
    }

    #[test]
    fn acceptance_threshold_is_inclusive() {
        let cfg = RefineConfig::default();
        let f = |hand, object| MissingFractions { hand, object };
        assert!(accept(f(0.25, 0.0), &cfg));
        assert!(!accept(f(0.26, 0.0), &cfg));
        assert!(!accept(f(0.0, 0.26), &cfg));
        assert!(accept(f(0.0, 0.0), &cfg));
    }

    #[test]
    fn nearest_neighbor_examples() {
        assert_eq!(
            interpolate_nn(&[Some(1.0), None, Some(3.0)]).unwrap(),
            vec![1.0, 1.0, 3.0]
        );
        assert_eq!(
            interpolate_nn(&[None, None, Some(5.0)]).unwrap(),
            vec![5.0, 5.0, 5.0]
        );
        assert_eq!(
            interpolate_nn(&[Some(2.0), None, None, None, Some(10.0)]).unwrap(),
            vec![2.0, 2.0, 2.0, 10.0, 10.0]
        );
        assert_eq!(
            interpolate_nn(&[Some(4.0), None, None]).unwrap(),
            vec![4.0, 4.0, 4.0]
        );
    }

    #[test]
    fn all_missing_channel_is_unrecoverable() {
        assert!(matches!(
            interpolate_nn(&[None, None]),
            Err(Error::UnrecoverableChannel { .. })
        ));
    }

    #[test]
    fn savgol_reproduces_constant_and_ramp() {
        let constant = vec![4.0; 11];
        for (w, p) in [(5, 2), (7, 3), (11, 3), (3, 0), (11, 10)] {
            let out = savgol(&constant, w, p).unwrap();
            assert!(out.iter().all(|v| (v - 4.0).abs() < 1e-12), "{w} {p}: {out:?}");
        }
        let ramp: Vec<f64> = (0..=20).map(f64::from).collect();
        let out = savgol(&ramp, 5, 2).unwrap();
        for (a, b) in out.iter().zip(&ramp) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn savgol_impulse_matches_classic_kernel() {
        let mut x = vec![0.0; 11];
        x[5] = 1.0;
        let out = savgol(&x, 5, 2).unwrap();
        let expected = [
            0.0,
            0.0,
            0.0,
            -3.0 / 35.0,
            12.0 / 35.0,
            17.0 / 35.0,
            12.0 / 35.0,
            -3.0 / 35.0,
            0.0,
            0.0,
            0.0,
        ];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{out:?}");
        }
    }

    #[test]
    fn savgol_rejects_bad_parameters() {
        assert!(matches!(savgol(&[0.0; 10], 4, 2), Err(Error::Config(_))));
        assert!(matches!(savgol(&[0.0; 10], 5, 5), Err(Error::Config(_))));
        assert!(matches!(savgol(&[0.0; 4], 5, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn refine_rejects_over_missing_sequences() {
        let missing: Vec<usize> = (0..90).map(|i| i * 3).collect();
        let seq = seq_with_hand_missing(300, &missing);
        match refine_sequence(&seq, &RefineConfig::default()).unwrap() {
            Refinement::Rejected(fr) => assert!((fr.hand - 0.30).abs() < 1e-12),
            Refinement::Accepted(_) => panic!("30% missing must be rejected"),
        }
    }

    #[test]
    fn refine_fills_scattered_gaps() {
        let missing: Vec<usize> = (0..30).map(|i| i * 10 + 3).collect();
        let seq = seq_with_hand_missing(300, &missing);
        let out = refine_sequence(&seq, &RefineConfig::default())
            .unwrap()
            .accepted()
            .unwrap();
        assert_eq!(out.n_frames(), 300);
        assert_eq!(out.n_channels(), 21);
        assert_eq!(out.missing_count(), 0);
    }

    #[test]
    fn refine_propagates_unrecoverable_object_channel() {
        let rows = (0..20)
            .map(|f| {
                let mut r: Vec<Option<f64>> = (0..21).map(|_| Some(f as f64)).collect();
                r.push(if f < 4 { None } else { Some(1.0) });
                r
            })
            .collect();
        let mut seq = RawSequence::from_rows(View::Contralateral, rows).unwrap();
        let cfg = RefineConfig {
            max_missing_fraction: 1.0,
            ..RefineConfig::default()
        };
        assert!(refine_sequence(&seq, &cfg).unwrap().accepted().is_some());
        for f in 0..20 {
            seq.set(f, 21, None);
        }
        assert!(matches!(
            refine_sequence(&seq, &cfg),
            Err(Error::UnrecoverableChannel { channel: 21 })
        ));
    }

    #[test]
    fn manifest_appends_with_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let fr = MissingFractions {
            hand: 0.3,
            object: 0.0,
        };
        append_manifest(&path, &[ManifestRow::new("a", fr, false)]).unwrap();
        append_manifest(&path, &[ManifestRow::new("b", fr, true)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "sequence_id,hand_fraction,object_fraction,accepted\na,0.3,0.0,false\nb,0.3,0.0,true\n"
        );
    }
}
