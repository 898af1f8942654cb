//! Detector and hand-landmark ingestion.
//!
//! Detections and landmarks arrive as line-delimited JSON, one frame per line.
//! They are joined by frame index into a [`RawSequence`] holding only the
//! y-coordinates: 21 hand landmarks, plus the target object's bounding-box
//! center for the contralateral view. Coordinates are kept in whatever units
//! the detector produced (pixels, y growing downward).

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of hand landmarks produced per detected hand.
pub const N_LANDMARKS: usize = 21;

/// Landmark names in canonical index order.
pub const LANDMARK_NAMES: [&str; N_LANDMARKS] = [
    "wrist",
    "thumb_cmc",
    "thumb_mcp",
    "thumb_ip",
    "thumb_tip",
    "index_mcp",
    "index_pip",
    "index_dip",
    "index_tip",
    "middle_mcp",
    "middle_pip",
    "middle_dip",
    "middle_tip",
    "ring_mcp",
    "ring_pip",
    "ring_dip",
    "ring_tip",
    "pinky_mcp",
    "pinky_pip",
    "pinky_dip",
    "pinky_tip",
];

pub const OBJECT_CHANNEL_NAME: &str = "object_center";

/// Camera view. Only the contralateral view carries the object channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Top,
    Ipsilateral,
    Contralateral,
}

impl View {
    pub const ALL: [View; 3] = [View::Top, View::Ipsilateral, View::Contralateral];

    pub fn n_channels(self) -> usize {
        match self {
            View::Contralateral => N_LANDMARKS + 1,
            View::Top | View::Ipsilateral => N_LANDMARKS,
        }
    }

    pub fn has_object_channel(self) -> bool {
        self == View::Contralateral
    }

    pub fn as_str(self) -> &'static str {
        match self {
            View::Top => "top",
            View::Ipsilateral => "ipsilateral",
            View::Contralateral => "contralateral",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "top" => Ok(View::Top),
            "ipsilateral" | "ipsi" => Ok(View::Ipsilateral),
            "contralateral" | "contra" => Ok(View::Contralateral),
            other => Err(Error::Config(format!("unknown view {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "class")]
    pub class_label: String,
    pub score: f64,
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
}

impl Detection {
    pub fn center(&self) -> (f64, f64) {
        let [x1, y1, x2, y2] = self.bbox;
        ((x1 + x2) / 2.0, (y1 + y2) / 2.0)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        let [x1, y1, x2, y2] = self.bbox;
        if !(x1 < x2 && y1 < y2) {
            return Err(format!("bbox {:?} is not ordered as x1<x2, y1<y2", self.bbox));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    #[serde(rename = "frame")]
    pub frame_index: u64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkFrame {
    #[serde(rename = "frame")]
    pub frame_index: u64,
    /// `None` when no hand was found in the frame.
    pub landmarks: Option<Vec<[f64; 2]>>,
}

/// Frame-major matrix of y-coordinates with explicit missing entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSequence {
    pub view: View,
    pub channel_names: Vec<String>,
    n_frames: usize,
    values: Vec<Option<f64>>,
}

impl RawSequence {
    /// Builds a sequence from row-major values (`n_frames * view.n_channels()` entries).
    pub fn new(view: View, n_frames: usize, values: Vec<Option<f64>>) -> Result<Self> {
        let c = view.n_channels();
        if values.len() != n_frames * c {
            return Err(Error::Shape(format!(
                "{} values cannot form {n_frames} frames of {c} channels",
                values.len()
            )));
        }
        Ok(RawSequence {
            view,
            channel_names: default_channel_names(view),
            n_frames,
            values,
        })
    }

    pub fn from_rows(view: View, rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let c = view.n_channels();
        let n = rows.len();
        let mut values = Vec::with_capacity(n * c);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != c {
                return Err(Error::Shape(format!(
                    "frame {t} has {} channels, {} view expects {c}",
                    row.len(),
                    view
                )));
            }
            values.extend(row);
        }
        Self::new(view, n, values)
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_channels(&self) -> usize {
        self.view.n_channels()
    }

    pub fn get(&self, frame: usize, channel: usize) -> Option<f64> {
        self.values[frame * self.n_channels() + channel]
    }

    pub fn set(&mut self, frame: usize, channel: usize, value: Option<f64>) {
        let c = self.n_channels();
        self.values[frame * c + channel] = value;
    }

    pub fn row(&self, frame: usize) -> &[Option<f64>] {
        let c = self.n_channels();
        &self.values[frame * c..(frame + 1) * c]
    }

    pub fn channel(&self, channel: usize) -> Vec<Option<f64>> {
        (0..self.n_frames).map(|t| self.get(t, channel)).collect()
    }

    pub fn set_channel(&mut self, channel: usize, data: &[f64]) {
        assert_eq!(data.len(), self.n_frames, "channel length mismatch");
        for (t, &v) in data.iter().enumerate() {
            self.set(t, channel, Some(v));
        }
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Row-major dense values, or `None` if anything is still missing.
    pub fn to_dense(&self) -> Option<Vec<f64>> {
        self.values.iter().copied().collect()
    }

    /// Writes `frame,ch0,...,chN` CSV; missing entries become `nan`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["frame".to_string()];
        header.extend((0..self.n_channels()).map(|c| format!("ch{c}")));
        w.write_record(&header)?;
        for t in 0..self.n_frames {
            let mut rec = vec![t.to_string()];
            rec.extend(self.row(t).iter().map(|v| match v {
                Some(x) => format_value(*x),
                None => "nan".to_string(),
            }));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("writing sequence csv", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_csv(file)
    }

    /// Reads a sequence CSV. The view must be supplied because the top and
    /// ipsilateral views share the same channel count.
    pub fn read_csv<R: Read>(reader: R, view: View, origin: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let c = view.n_channels();
        if header.len() != c + 1 || &header[0] != "frame" {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 1,
                message: format!(
                    "expected header frame,ch0..ch{} for {view} view, found {} columns",
                    c - 1,
                    header.len()
                ),
            });
        }
        let mut values = Vec::new();
        let mut n = 0;
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
            for field in rec.iter().skip(1) {
                values.push(parse_value(field).map_err(|message| Error::Parse {
                    path: origin.to_path_buf(),
                    line,
                    message,
                })?);
            }
            n += 1;
        }
        Self::new(view, n, values)
    }

    pub fn load_csv(path: &Path, view: View) -> Result<Self> {
        let file =
            File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_csv(file, view, path)
    }
}

pub(crate) fn format_value(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x}")
    }
}

fn parse_value(field: &str) -> std::result::Result<Option<f64>, String> {
    let f = field.trim();
    if f.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    f.parse::<f64>()
        .map(Some)
        .map_err(|_| format!("cannot parse {f:?} as a number"))
}

pub fn default_channel_names(view: View) -> Vec<String> {
    let mut names: Vec<String> = LANDMARK_NAMES.iter().map(|s| s.to_string()).collect();
    if view.has_object_channel() {
        names.push(OBJECT_CHANNEL_NAME.to_string());
    }
    names
}

fn open_lines(path: &Path) -> Result<BufReader<File>> {
    let file =
        File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    Ok(BufReader::new(file))
}

/// Parses JSON lines into frames, enforcing strictly increasing frame indices.
fn parse_frames<T, R, F>(reader: R, origin: &Path, validate: F) -> Result<Vec<T>>
where
    T: serde::de::DeserializeOwned,
    R: BufRead,
    F: Fn(&T) -> (u64, std::result::Result<(), String>),
{
    let mut frames: Vec<T> = Vec::new();
    let mut last: Option<u64> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", origin.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let (index, valid) = validate(&frame);
        valid.map_err(|message| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            message,
        })?;
        if let Some(prev) = last {
            if index == prev {
                return Err(Error::Format(format!(
                    "{}:{line_no}: duplicate frame index {index}",
                    origin.display()
                )));
            }
            if index < prev {
                return Err(Error::Format(format!(
                    "{}:{line_no}: frame index {index} follows {prev}; frames must be strictly increasing",
                    origin.display()
                )));
            }
        }
        last = Some(index);
        frames.push(frame);
    }
    Ok(frames)
}

pub fn read_detections<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<DetectionFrame>> {
    parse_frames(reader, origin, |f: &DetectionFrame| {
        let valid = f.detections.iter().try_for_each(Detection::validate);
        (f.frame_index, valid)
    })
}

pub fn parse_detections(path: &Path) -> Result<Vec<DetectionFrame>> {
    read_detections(open_lines(path)?, path)
}

pub fn read_landmarks<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<LandmarkFrame>> {
    parse_frames(reader, origin, |f: &LandmarkFrame| {
        let valid = match &f.landmarks {
            Some(points) if points.len() != N_LANDMARKS => Err(format!(
                "expected {N_LANDMARKS} landmark pairs, found {}",
                points.len()
            )),
            _ => Ok(()),
        };
        (f.frame_index, valid)
    })
}

pub fn parse_landmarks(path: &Path) -> Result<Vec<LandmarkFrame>> {
    read_landmarks(open_lines(path)?, path)
}

/// Center of the best detection for `target_class`.
///
/// Falls back to the highest-scoring detection of any class when the target
/// was not detected. Ties keep the earliest detection in list order.
pub fn select_object_center(frame: &DetectionFrame, target_class: &str) -> Option<(f64, f64)> {
    fn best<'a>(it: impl Iterator<Item = &'a Detection>) -> Option<&'a Detection> {
        it.fold(None, |acc: Option<&Detection>, d| match acc {
            Some(b) if b.score >= d.score => Some(b),
            _ => Some(d),
        })
    }
    best(frame.detections.iter().filter(|d| d.class_label == target_class))
        .or_else(|| best(frame.detections.iter()))
        .map(Detection::center)
}

/// Object centers aligned to the landmark frames by frame index. Frames
/// without a detection record are missing.
pub fn align_object_centers(
    detections: &[DetectionFrame],
    landmarks: &[LandmarkFrame],
    target_class: &str,
) -> Vec<Option<(f64, f64)>> {
    let mut j = 0;
    landmarks
        .iter()
        .map(|lf| {
            while j < detections.len() && detections[j].frame_index < lf.frame_index {
                j += 1;
            }
            match detections.get(j) {
                Some(df) if df.frame_index == lf.frame_index => {
                    select_object_center(df, target_class)
                }
                _ => None,
            }
        })
        .collect()
}

/// Stacks landmark y-coordinates (and the object center y for the
/// contralateral view) into a [`RawSequence`]. Row `t` is landmark frame `t`.
/// Object centers are ignored for views without an object channel.
pub fn assemble_channels(
    landmarks: &[LandmarkFrame],
    object_centers: Option<&[Option<(f64, f64)>]>,
    view: View,
) -> Result<RawSequence> {
    let objects = if view.has_object_channel() {
        let centers = object_centers.ok_or_else(|| {
            Error::Shape("contralateral view requires an object-center series".into())
        })?;
        if centers.len() != landmarks.len() {
            return Err(Error::Shape(format!(
                "{} landmark frames but {} object centers",
                landmarks.len(),
                centers.len()
            )));
        }
        Some(centers)
    } else {
        None
    };

    let c = view.n_channels();
    let mut values = Vec::with_capacity(landmarks.len() * c);
    for (t, frame) in landmarks.iter().enumerate() {
        match &frame.landmarks {
            Some(points) => values.extend(points.iter().map(|p| Some(p[1]))),
            None => values.extend(std::iter::repeat_n(None, N_LANDMARKS)),
        }
        if let Some(centers) = objects {
            values.push(centers[t].map(|(_, y)| y));
        }
    }
    RawSequence::new(view, landmarks.len(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn origin() -> PathBuf {
        PathBuf::from("test.jsonl")
    }

    fn det(class: &str, score: f64, bbox: [f64; 4]) -> Detection {
        Detection {
            class_label: class.into(),
            score,
            bbox,
        }
    }

    fn hand(y: f64) -> LandmarkFrame {
        LandmarkFrame {
            frame_index: 0,
            landmarks: Some((0..N_LANDMARKS).map(|i| [i as f64, y + i as f64]).collect()),
        }
    }

    #[test]
    fn parses_single_detection_line() {
        let text = r#"{"frame":0,"detections":[{"class":"marble","score":0.9,"bbox":[10,10,20,20]}]}"#;
        let frames = read_detections(text.as_bytes(), &origin()).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].detections.len(), 1);
        assert_eq!(frames[0].detections[0].class_label, "marble");
        assert_eq!(frames[0].detections[0].bbox, [10.0, 10.0, 20.0, 20.0]);
    }

    #[test]
    fn empty_detection_list_is_kept() {
        let text = "{\"frame\":0,\"detections\":[]}\n{\"frame\":1,\"detections\":[]}\n";
        let frames = read_detections(text.as_bytes(), &origin()).unwrap();
        assert_eq!(frames.len(), 2);
        assert!(frames.iter().all(|f| f.detections.is_empty()));
    }

    #[test]
    fn non_increasing_frames_are_rejected() {
        let text = "{\"frame\":0,\"detections\":[]}\n{\"frame\":2,\"detections\":[]}\n{\"frame\":1,\"detections\":[]}\n";
        let err = read_detections(text.as_bytes(), &origin()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        let dup = "{\"frame\":3,\"detections\":[]}\n{\"frame\":3,\"detections\":[]}\n";
        assert!(matches!(
            read_detections(dup.as_bytes(), &origin()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"frame\":0,\"detections\":[]}\n{\"frame\":1,\"detections\":[\n";
        match read_detections(text.as_bytes(), &origin()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_score =
            r#"{"frame":0,"detections":[{"class":"a","score":1.5,"bbox":[0,0,1,1]}]}"#;
        assert!(matches!(
            read_detections(bad_score.as_bytes(), &origin()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn landmark_lines_need_21_pairs() {
        let ok = format!(
            "{{\"frame\":0,\"landmarks\":{}}}\n{{\"frame\":1,\"landmarks\":null}}\n",
            serde_json::to_string(&vec![[1.0, 2.0]; 21]).unwrap()
        );
        let frames = read_landmarks(ok.as_bytes(), &origin()).unwrap();
        assert!(frames[0].landmarks.is_some());
        assert!(frames[1].landmarks.is_none());

        let short = "{\"frame\":0,\"landmarks\":[[1,2],[3,4]]}";
        assert!(matches!(
            read_landmarks(short.as_bytes(), &origin()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn target_center_is_bbox_midpoint() {
        let frame = DetectionFrame {
            frame_index: 0,
            detections: vec![det("marble", 0.9, [10.0, 10.0, 20.0, 20.0])],
        };
        assert_eq!(select_object_center(&frame, "marble"), Some((15.0, 15.0)));
    }

    #[test]
    fn falls_back_to_highest_score_of_other_classes() {
        let frame = DetectionFrame {
            frame_index: 0,
            detections: vec![
                det("washer", 0.7, [0.0, 0.0, 4.0, 8.0]),
                det("tumbler", 0.9, [2.0, 2.0, 6.0, 10.0]),
            ],
        };
        assert_eq!(select_object_center(&frame, "marble"), Some((4.0, 6.0)));
    }

    #[test]
    fn target_class_wins_over_higher_scoring_other_class() {
        let frame = DetectionFrame {
            frame_index: 0,
            detections: vec![
                det("tumbler", 0.99, [0.0, 0.0, 2.0, 2.0]),
                det("marble", 0.3, [10.0, 10.0, 12.0, 12.0]),
            ],
        };
        assert_eq!(select_object_center(&frame, "marble"), Some((11.0, 11.0)));
    }

    #[test]
    fn score_ties_keep_earliest() {
        let frame = DetectionFrame {
            frame_index: 0,
            detections: vec![
                det("marble", 0.5, [0.0, 0.0, 2.0, 2.0]),
                det("marble", 0.5, [10.0, 10.0, 12.0, 12.0]),
            ],
        };
        assert_eq!(select_object_center(&frame, "marble"), Some((1.0, 1.0)));
    }

    #[test]
    fn empty_frame_has_no_center() {
        let frame = DetectionFrame {
            frame_index: 0,
            detections: vec![],
        };
        assert_eq!(select_object_center(&frame, "marble"), None);
    }

    #[test]
    fn assembles_top_view() {
        let frames = vec![hand(100.0), hand(110.0), hand(120.0)];
        let seq = assemble_channels(&frames, None, View::Top).unwrap();
        assert_eq!(seq.n_frames(), 3);
        assert_eq!(seq.n_channels(), 21);
        assert_eq!(seq.missing_count(), 0);
        assert_eq!(seq.get(1, 0), Some(110.0));
        assert_eq!(seq.get(2, 20), Some(140.0));
    }

    #[test]
    fn contralateral_sources_are_independent() {
        let frames = vec![LandmarkFrame {
            frame_index: 0,
            landmarks: None,
        }];
        let centers = vec![Some((3.0, 7.0))];
        let seq = assemble_channels(&frames, Some(&centers), View::Contralateral).unwrap();
        assert_eq!(seq.n_channels(), 22);
        assert!(seq.row(0)[..21].iter().all(Option::is_none));
        assert_eq!(seq.get(0, 21), Some(7.0));
    }

    #[test]
    fn contralateral_requires_matching_object_series() {
        let frames = vec![hand(1.0), hand(2.0)];
        assert!(matches!(
            assemble_channels(&frames, None, View::Contralateral),
            Err(Error::Shape(_))
        ));
        let centers = vec![Some((0.0, 0.0))];
        assert!(matches!(
            assemble_channels(&frames, Some(&centers), View::Contralateral),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn aligns_detections_by_frame_index() {
        let landmarks: Vec<LandmarkFrame> = [0u64, 1, 2, 5]
            .iter()
            .map(|&i| LandmarkFrame {
                frame_index: i,
                landmarks: None,
            })
            .collect();
        let dets = vec![
            DetectionFrame {
                frame_index: 1,
                detections: vec![det("marble", 0.5, [0.0, 0.0, 2.0, 4.0])],
            },
            DetectionFrame {
                frame_index: 5,
                detections: vec![],
            },
        ];
        let centers = align_object_centers(&dets, &landmarks, "marble");
        assert_eq!(centers, vec![None, Some((1.0, 2.0)), None, None]);
    }

    #[test]
    fn csv_writes_nan_for_missing_and_reads_back() {
        let seq = RawSequence::from_rows(
            View::Contralateral,
            vec![
                (0..22).map(|c| Some(c as f64 + 0.5)).collect(),
                (0..22).map(|c| if c == 21 { None } else { Some(-1.25) }).collect(),
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        seq.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("frame,ch0,ch1,"));
        assert!(text.lines().nth(2).unwrap().ends_with(",nan"));
        let back = RawSequence::read_csv(buf.as_slice(), View::Contralateral, Path::new("x")).unwrap();
        assert_eq!(back, seq);
    }
}
