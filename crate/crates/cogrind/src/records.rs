//! On-disk run artifacts: prediction JSON lines, run manifests, and
//! training history CSV.
//!
//! Floats in these files print with exactly six fixed decimals — the
//! documented precision contract — so two runs diff line by line and a
//! write→read→write cycle is byte-stable. Readers report the offending
//! line number on malformed input.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::CenterBox;
use crate::model::FramePrediction;
use crate::postproc::{StabilizedFrame, TopKFrame};
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("record io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Line { line: usize, detail: String },
    #[error("invalid record: {detail}")]
    Invalid { detail: String },
}

/// One candidate box in normalized image units plus its confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub cx: Real,
    pub cy: Real,
    pub w: Real,
    pub h: Real,
    pub score: Real,
}

impl BoxRecord {
    pub fn center_box(&self) -> CenterBox {
        CenterBox::new(self.cx, self.cy, self.w, self.h)
    }
}

/// One frame's prediction: the top-K candidates (score-sorted), the
/// selected index among them, and one feature row per candidate for the
/// temporal stabilizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub video_id: usize,
    pub frame_idx: usize,
    pub boxes: Vec<BoxRecord>,
    pub selected_idx: usize,
    pub features: Vec<Vec<Real>>,
}

/// Six-decimal fixed formatting; negative zero normalizes to zero so
/// equal values always print identically.
fn fmt_f(v: Real) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v:.6}")
}

impl FrameRecord {
    pub fn from_prediction(video_id: usize, frame_idx: usize, pred: &FramePrediction) -> FrameRecord {
        let boxes = pred
            .topk
            .boxes
            .iter()
            .zip(&pred.topk.scores)
            .map(|(b, &score)| BoxRecord { cx: b.cx, cy: b.cy, w: b.w, h: b.h, score })
            .collect();
        FrameRecord {
            video_id,
            frame_idx,
            boxes,
            selected_idx: pred.selected,
            features: pred.topk.features.clone(),
        }
    }

    /// The stabilizer's view of this record.
    pub fn topk_frame(&self) -> Result<TopKFrame, RecordError> {
        let boxes = self.boxes.iter().map(BoxRecord::center_box).collect();
        let scores = self.boxes.iter().map(|b| b.score).collect();
        TopKFrame::new(boxes, scores, self.features.clone(), false)
            .map_err(|e| RecordError::Invalid { detail: format!("video {} frame {}: {e}", self.video_id, self.frame_idx) })
    }

    /// Replace scores and selection with stabilized values.
    pub fn restabilized(&self, s: &StabilizedFrame) -> FrameRecord {
        let mut out = self.clone();
        for (b, &score) in out.boxes.iter_mut().zip(&s.scores) {
            b.score = score;
        }
        out.selected_idx = s.selected;
        out
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        let fail = |detail: String| Err(RecordError::Invalid { detail });
        if self.boxes.is_empty() {
            return fail(format!("video {} frame {}: no boxes", self.video_id, self.frame_idx));
        }
        if self.features.len() != self.boxes.len() {
            return fail(format!(
                "video {} frame {}: {} boxes but {} feature rows",
                self.video_id,
                self.frame_idx,
                self.boxes.len(),
                self.features.len()
            ));
        }
        if self.selected_idx >= self.boxes.len() {
            return fail(format!(
                "video {} frame {}: selected_idx {} out of {} boxes",
                self.video_id,
                self.frame_idx,
                self.selected_idx,
                self.boxes.len()
            ));
        }
        Ok(())
    }

    /// Serialize with fixed key order and six-decimal floats.
    pub fn to_json_line(&self) -> String {
        let mut s = String::with_capacity(256);
        write!(s, "{{\"video_id\":{},\"frame_idx\":{},\"boxes\":[", self.video_id, self.frame_idx).unwrap();
        for (i, b) in self.boxes.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(
                s,
                "{{\"cx\":{},\"cy\":{},\"w\":{},\"h\":{},\"score\":{}}}",
                fmt_f(b.cx),
                fmt_f(b.cy),
                fmt_f(b.w),
                fmt_f(b.h),
                fmt_f(b.score)
            )
            .unwrap();
        }
        write!(s, "],\"selected_idx\":{},\"features\":[", self.selected_idx).unwrap();
        for (i, row) in self.features.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push('[');
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                s.push_str(&fmt_f(*v));
            }
            s.push(']');
        }
        s.push_str("]}");
        s
    }
}

/// Write records sorted by `(video_id, frame_idx)`; one JSON object per
/// line.
pub fn write_predictions(path: &Path, records: &[FrameRecord]) -> Result<(), RecordError> {
    let mut sorted: Vec<&FrameRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.video_id, r.frame_idx));
    let mut out = String::new();
    for r in sorted {
        r.validate()?;
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a prediction file, reporting the line number of any malformed
/// or invalid record.
pub fn read_predictions(path: &Path) -> Result<Vec<FrameRecord>, RecordError> {
    let content = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord = serde_json::from_str(line).map_err(|e| RecordError::Line {
            line: i + 1,
            detail: e.to_string(),
        })?;
        record.validate().map_err(|e| RecordError::Line { line: i + 1, detail: e.to_string() })?;
        records.push(record);
    }
    Ok(records)
}

/// Group records into per-video frame sequences, ordered by frame index;
/// every frame of a video must carry the same K.
pub fn group_by_video(records: &[FrameRecord]) -> Result<Vec<(usize, Vec<FrameRecord>)>, RecordError> {
    let mut sorted: Vec<FrameRecord> = records.to_vec();
    sorted.sort_by_key(|r| (r.video_id, r.frame_idx));
    let mut videos: Vec<(usize, Vec<FrameRecord>)> = Vec::new();
    for r in sorted {
        match videos.last_mut() {
            Some((id, frames)) if *id == r.video_id => {
                if frames[0].boxes.len() != r.boxes.len() {
                    return Err(RecordError::Invalid {
                        detail: format!(
                            "video {}: frame {} has {} boxes, expected {}",
                            r.video_id,
                            r.frame_idx,
                            r.boxes.len(),
                            frames[0].boxes.len()
                        ),
                    });
                }
                frames.push(r);
            }
            _ => videos.push((r.video_id, vec![r])),
        }
    }
    Ok(videos)
}

/// Provenance sidecar written next to every artifact a subcommand
/// produces: what ran, with which resolved settings, on what.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    /// Fully resolved settings (defaults merged with file and flags).
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: Real,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64) -> RunManifest {
        RunManifest {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), RecordError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| RecordError::Invalid { detail: e.to_string() })?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest, RecordError> {
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| RecordError::Invalid { detail: e.to_string() })
    }
}

/// One training-history row: epoch-mean loss terms plus validation
/// metrics measured after the epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: Real,
    pub reg: Real,
    pub cls: Real,
    pub rank: Real,
    pub ce: Real,
    pub val_acc: Real,
    pub val_miou: Real,
}

pub const HISTORY_HEADER: &str = "epoch,loss,reg,cls,rank,ce,val_acc,val_miou";

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<(), RecordError> {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            fmt_f(r.loss),
            fmt_f(r.reg),
            fmt_f(r.cls),
            fmt_f(r.rank),
            fmt_f(r.ce),
            fmt_f(r.val_acc),
            fmt_f(r.val_miou)
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>, RecordError> {
    let content = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if i == 0 {
            if line != HISTORY_HEADER {
                return Err(RecordError::Line { line: 1, detail: format!("expected header {HISTORY_HEADER:?}") });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(RecordError::Line { line: i + 1, detail: format!("expected 8 fields, got {}", fields.len()) });
        }
        let num = |s: &str| s.parse::<Real>().map_err(|e| RecordError::Line { line: i + 1, detail: e.to_string() });
        rows.push(HistoryRow {
            epoch: fields[0].parse().map_err(|e: std::num::ParseIntError| RecordError::Line {
                line: i + 1,
                detail: e.to_string(),
            })?,
            loss: num(fields[1])?,
            reg: num(fields[2])?,
            cls: num(fields[3])?,
            rank: num(fields[4])?,
            ce: num(fields[5])?,
            val_acc: num(fields[6])?,
            val_miou: num(fields[7])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(video_id: usize, frame_idx: usize, base: Real) -> FrameRecord {
        FrameRecord {
            video_id,
            frame_idx,
            boxes: vec![
                BoxRecord { cx: base, cy: 0.25, w: 0.125, h: 0.1875, score: 0.75 },
                BoxRecord { cx: base / 2.0, cy: 0.5, w: 0.25, h: 0.25, score: 0.5 },
            ],
            selected_idx: 0,
            features: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
        }
    }

    #[test]
    fn json_line_uses_six_decimals_and_fixed_key_order() {
        let r = sample(3, 1, 0.5);
        let line = r.to_json_line();
        assert!(line.starts_with("{\"video_id\":3,\"frame_idx\":1,\"boxes\":[{\"cx\":0.500000,"));
        assert!(line.contains("\"selected_idx\":0,\"features\":[[1.000000,0.000000,0.000000]"));
        // Negative zero prints as zero.
        let mut neg = r;
        neg.boxes[0].cx = -0.0;
        assert!(neg.to_json_line().contains("\"cx\":0.000000,"));
    }

    #[test]
    fn write_read_write_is_byte_stable_and_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        // Unsorted on purpose; exact dyadic values survive the 6-decimal
        // round-trip bitwise.
        let records = vec![sample(2, 0, 0.5), sample(1, 1, 0.25), sample(1, 0, 0.75)];
        write_predictions(&path, &records).unwrap();
        let loaded = read_predictions(&path).unwrap();
        let order: Vec<(usize, usize)> = loaded.iter().map(|r| (r.video_id, r.frame_idx)).collect();
        assert_eq!(order, vec![(1, 0), (1, 1), (2, 0)]);

        let path2 = dir.path().join("again.jsonl");
        write_predictions(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rounding_stays_within_half_ulp_of_the_contract() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        let mut r = sample(0, 0, 0.1234567891);
        r.boxes[1].score = 0.9999995;
        write_predictions(&path, &[r.clone()]).unwrap();
        let loaded = read_predictions(&path).unwrap();
        assert!((loaded[0].boxes[0].cx - r.boxes[0].cx).abs() <= 5e-7);
        assert!((loaded[0].boxes[1].score - r.boxes[1].score).abs() <= 5e-7);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = sample(0, 0, 0.5).to_json_line();
        std::fs::write(&path, format!("{good}\n{good}\nnot json at all\n")).unwrap();
        let err = read_predictions(&path).unwrap_err();
        assert!(matches!(err, RecordError::Line { line: 3, .. }), "{err}");

        // Structurally valid JSON with an out-of-range selection also
        // names the line.
        let mut bad = sample(0, 1, 0.5);
        bad.selected_idx = 9;
        std::fs::write(&path, format!("{good}\n{}\n", bad.to_json_line())).unwrap();
        let err = read_predictions(&path).unwrap_err();
        assert!(matches!(err, RecordError::Line { line: 2, .. }), "{err}");
    }

    #[test]
    fn grouping_collects_frames_and_rejects_ragged_k() {
        let records = vec![sample(1, 1, 0.5), sample(0, 0, 0.5), sample(1, 0, 0.5)];
        let videos = group_by_video(&records).unwrap();
        assert_eq!(videos.len(), 2);
        assert_eq!(videos[0].0, 0);
        assert_eq!(videos[1].1.len(), 2);
        assert_eq!(videos[1].1[0].frame_idx, 0);

        let mut ragged = sample(1, 2, 0.5);
        ragged.boxes.pop();
        ragged.features.pop();
        let err = group_by_video(&[sample(1, 0, 0.5), ragged]).unwrap_err();
        assert!(matches!(err, RecordError::Invalid { .. }));
    }

    #[test]
    fn stabilized_records_swap_scores_and_selection_only() {
        let r = sample(4, 2, 0.5);
        let s = StabilizedFrame { scores: vec![0.125, 0.625], selected: 1 };
        let out = r.restabilized(&s);
        assert_eq!(out.boxes[0].score, 0.125);
        assert_eq!(out.boxes[1].score, 0.625);
        assert_eq!(out.selected_idx, 1);
        assert_eq!(out.boxes[0].cx, r.boxes[0].cx);
        assert_eq!(out.features, r.features);
    }

    #[test]
    fn topk_frame_conversion_preserves_order() {
        let r = sample(0, 0, 0.5);
        let f = r.topk_frame().unwrap();
        assert_eq!(f.k(), 2);
        assert_eq!(f.scores, vec![0.75, 0.5]);
        assert_eq!(f.boxes[0].cx, 0.5);
        assert!(!f.padded);
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut m = RunManifest::new("infer", 42);
        m.config.insert("topk".into(), "5".into());
        m.inputs.push("data/".into());
        m.outputs.push("preds.jsonl".into());
        m.wall_clock_secs = 1.5;
        m.save(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn history_round_trips_and_checks_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let rows = vec![
            HistoryRow { epoch: 0, loss: 4.5, reg: 1.0, cls: 3.0, rank: 0.25, ce: 0.25, val_acc: 0.5, val_miou: 0.375 },
            HistoryRow { epoch: 1, loss: 2.0, reg: 0.5, cls: 1.0, rank: 0.25, ce: 0.25, val_acc: 0.75, val_miou: 0.5 },
        ];
        write_history(&path, &rows).unwrap();
        assert_eq!(read_history(&path).unwrap(), rows);

        std::fs::write(&path, "bogus,header\n1,2").unwrap();
        assert!(matches!(read_history(&path).unwrap_err(), RecordError::Line { line: 1, .. }));
    }
}
