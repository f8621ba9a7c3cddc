//! Grounding metrics: per-frame IoU rolled up into Acc@0.5, mean IoU,
//! success AUC, and center-distance precision.
//!
//! Conventions baked in here and relied on by the acceptance suite:
//! Acc@0.5 uses a strict `IoU > 0.5`; the success curve samples
//! `fraction(IoU > τ)` on the 101-point grid τ = k/100 and the AUC is its
//! plain mean, so `acc_at_05` equals the curve at τ = 0.5 exactly;
//! precision counts frames whose predicted center lies within `d` pixels
//! of the ground-truth center (`≤`, grid d = 0..50). Success is
//! non-increasing in τ and precision non-decreasing in d.

use serde::Serialize;
use thiserror::Error;

use crate::geom::{Box2, GeomError};
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("evaluate: {preds} predictions vs {gts} ground-truth frames")]
    LengthMismatch { preds: usize, gts: usize },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Raw per-frame comparison underlying every metric.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FrameScore {
    pub iou: Real,
    pub center_dist: Real,
}

/// Score one video's selected boxes against its ground-truth tube
/// (both in pixels, same frame count).
pub fn frame_scores(preds: &[Box2], gts: &[Box2]) -> Result<Vec<FrameScore>, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), gts: gts.len() });
    }
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| Ok(FrameScore { iou: p.iou(g)?, center_dist: p.center_distance(g) }))
        .collect()
}

/// Per-video roll-up inside a report.
#[derive(Debug, Clone, Serialize)]
pub struct VideoScore {
    pub video_id: String,
    pub n_frames: usize,
    pub acc_at_05: Real,
    pub miou: Real,
}

/// Aggregate evaluation over all frames of all videos.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_videos: usize,
    pub n_frames: usize,
    pub acc_at_05: Real,
    pub miou: Real,
    pub success_auc: Real,
    pub precision_20: Real,
    /// fraction(IoU > τ) at τ = k/100 for k = 0..=100.
    pub success_curve: Vec<Real>,
    /// fraction(center distance ≤ d px) at d = 0..=50.
    pub precision_curve: Vec<Real>,
    pub per_video: Vec<VideoScore>,
}

impl EvalReport {
    /// Build a report from per-video frame scores. Frames pool equally
    /// across videos (frame-weighted, not video-weighted).
    pub fn from_scores(videos: &[(String, Vec<FrameScore>)]) -> EvalReport {
        let all: Vec<FrameScore> = videos.iter().flat_map(|(_, s)| s.iter().copied()).collect();
        let n = all.len();
        let frac = |pred: &dyn Fn(&FrameScore) -> bool| -> Real {
            if n == 0 {
                return 0.0;
            }
            all.iter().filter(|s| pred(s)).count() as Real / n as Real
        };
        let success_curve: Vec<Real> =
            (0..=100).map(|k| frac(&|s: &FrameScore| s.iou > k as Real / 100.0)).collect();
        let precision_curve: Vec<Real> =
            (0..=50).map(|d| frac(&|s: &FrameScore| s.center_dist <= d as Real)).collect();
        let miou = if n == 0 { 0.0 } else { all.iter().map(|s| s.iou).sum::<Real>() / n as Real };
        let per_video = videos
            .iter()
            .map(|(id, scores)| {
                let vn = scores.len();
                VideoScore {
                    video_id: id.clone(),
                    n_frames: vn,
                    acc_at_05: if vn == 0 {
                        0.0
                    } else {
                        scores.iter().filter(|s| s.iou > 0.5).count() as Real / vn as Real
                    },
                    miou: if vn == 0 { 0.0 } else { scores.iter().map(|s| s.iou).sum::<Real>() / vn as Real },
                }
            })
            .collect();
        EvalReport {
            n_videos: videos.len(),
            n_frames: n,
            acc_at_05: success_curve[50],
            miou,
            success_auc: success_curve.iter().sum::<Real>() / success_curve.len() as Real,
            precision_20: precision_curve[20],
            success_curve,
            precision_curve,
            per_video,
        }
    }

    /// One-video convenience used by tests and the training loop.
    pub fn single(preds: &[Box2], gts: &[Box2]) -> Result<EvalReport, MetricsError> {
        let scores = frame_scores(preds, gts)?;
        Ok(EvalReport::from_scores(&[("video".to_string(), scores)]))
    }

    /// Aligned-column text table of the headline numbers.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>8} {:>8} {:>9} {:>9} {:>8}\n",
            "scope", "frames", "acc@0.5", "mIoU", "success", "prec@20"
        ));
        out.push_str(&format!(
            "{:<10} {:>8} {:>8.4} {:>9.4} {:>9.4} {:>8.4}\n",
            "overall", self.n_frames, self.acc_at_05, self.miou, self.success_auc, self.precision_20
        ));
        out
    }

    /// Threshold curves as CSV (`kind,threshold,value`) for plotting.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("kind,threshold,value\n");
        for (k, v) in self.success_curve.iter().enumerate() {
            out.push_str(&format!("success,{:.2},{:.6}\n", k as Real / 100.0, v));
        }
        for (d, v) in self.precision_curve.iter().enumerate() {
            out.push_str(&format!("precision,{},{:.6}\n", d, v));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
