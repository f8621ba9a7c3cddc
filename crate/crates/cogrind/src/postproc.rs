//! Temporal re-ranking of per-frame candidate boxes.
//!
//! Each frame keeps its top-K boxes, their confidences, and a unit-norm
//! feature vector per box. To stabilize frame `t*`, every frame `t` in a
//! window of `P` frames around it votes: candidate `i` of the center
//! frame matches its most feature-similar candidate in frame `t` (argmax
//! of row `i` of the affinity `Z = 𝒱_center · 𝒱_tᵀ`) and collects that
//! candidate's confidence. The re-ranked score of candidate `i` is the
//! mean collected confidence over the clipped window, and the final box
//! is the argmax of those means — a box that keeps matching high-scoring
//! boxes in neighboring frames can overtake a flickering rank-1.
//!
//! Scores are always read from the unstabilized inputs; there is no
//! iterative re-application. `P` must be odd so the window is symmetric.

use thiserror::Error;

use crate::geom::CenterBox;
use crate::head::{self, BoxPrediction};
use crate::tensor::{Real, Tensor};

/// Default candidate count per frame.
pub const DEFAULT_K: usize = 5;
/// Default window length (frames).
pub const DEFAULT_P: usize = 5;

#[derive(Debug, Error)]
pub enum PostprocError {
    #[error("stabilization window must be odd, got {0}")]
    EvenWindow(usize),
    #[error("empty video")]
    EmptyVideo,
    #[error("bad top-k frame: {detail}")]
    BadFrame { detail: String },
}

/// Top-K slice of one frame: boxes, confidences, and one feature row per
/// candidate. Produced sorted by confidence (non-increasing); frames
/// with fewer raw candidates than K repeat their last entry and carry
/// the `padded` flag.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKFrame {
    pub boxes: Vec<CenterBox>,
    pub scores: Vec<Real>,
    pub features: Vec<Vec<Real>>,
    pub padded: bool,
}

impl TopKFrame {
    pub fn new(
        boxes: Vec<CenterBox>,
        scores: Vec<Real>,
        features: Vec<Vec<Real>>,
        padded: bool,
    ) -> Result<Self, PostprocError> {
        if boxes.is_empty() {
            return Err(PostprocError::BadFrame { detail: "no candidates".into() });
        }
        if boxes.len() != scores.len() || boxes.len() != features.len() {
            return Err(PostprocError::BadFrame {
                detail: format!("{} boxes, {} scores, {} features", boxes.len(), scores.len(), features.len()),
            });
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(PostprocError::BadFrame { detail: "feature rows must share one positive width".into() });
        }
        Ok(Self { boxes, scores, features, padded })
    }

    pub fn k(&self) -> usize {
        self.boxes.len()
    }
}

fn unit(v: &[Real]) -> Vec<Real> {
    let norm = v.iter().map(|x| x * x).sum::<Real>().sqrt().max(1e-8);
    v.iter().map(|x| x / norm).collect()
}

/// Assemble a frame's top-K slice from decoded predictions and the
/// enhanced feature map `v: [HW, D]` (each candidate takes its center
/// cell's row, L2-normalized). Short frames pad by repeating the last
/// candidate.
pub fn gather_topk(preds: &[BoxPrediction], v: &Tensor, k: usize) -> Result<TopKFrame, PostprocError> {
    if k == 0 {
        return Err(PostprocError::BadFrame { detail: "k must be positive".into() });
    }
    let d = v.last_dim();
    let idx = head::top_k(preds, k);
    if idx.is_empty() {
        return Err(PostprocError::BadFrame { detail: "no candidates".into() });
    }
    let mut boxes = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    let mut features = Vec::with_capacity(k);
    for &i in &idx {
        let p = &preds[i];
        boxes.push(p.bbox);
        scores.push(p.score);
        features.push(unit(&v.data()[p.cell * d..(p.cell + 1) * d]));
    }
    let padded = idx.len() < k;
    while boxes.len() < k {
        boxes.push(*boxes.last().unwrap());
        scores.push(*scores.last().unwrap());
        features.push(features.last().unwrap().clone());
    }
    TopKFrame::new(boxes, scores, features, padded)
}

/// Re-ranked scores of one frame and the index they select.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilizedFrame {
    pub scores: Vec<Real>,
    pub selected: usize,
}

fn argmax(values: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Window bounds around `t_star` for an odd window length `p`, clipped
/// to `[0, n)`. Returns `(lo, hi)` inclusive.
fn window(t_star: usize, n: usize, p: usize) -> (usize, usize) {
    let dt = p / 2;
    (t_star.saturating_sub(dt), (t_star + dt).min(n - 1))
}

/// Stabilize a single frame against the clipped window around it.
pub fn stabilize_window(frames: &[TopKFrame], t_star: usize, p: usize) -> StabilizedFrame {
    let center = &frames[t_star];
    let k = center.k();
    let (lo, hi) = window(t_star, frames.len(), p);
    let n = (hi - lo + 1) as Real;
    let mut scores = vec![0.0; k];
    for t in lo..=hi {
        let fref = &frames[t];
        for i in 0..k {
            let fi = &center.features[i];
            let mut row = Vec::with_capacity(k);
            for j in 0..k {
                row.push(fi.iter().zip(&fref.features[j]).map(|(a, b)| a * b).sum::<Real>());
            }
            scores[i] += fref.scores[argmax(&row)];
        }
    }
    for s in scores.iter_mut() {
        *s /= n;
    }
    let selected = argmax(&scores);
    StabilizedFrame { scores, selected }
}

/// Stabilize every frame of a video. All frames must share one K.
pub fn stabilize_video(frames: &[TopKFrame], p: usize) -> Result<Vec<StabilizedFrame>, PostprocError> {
    if p % 2 == 0 {
        return Err(PostprocError::EvenWindow(p));
    }
    if frames.is_empty() {
        return Err(PostprocError::EmptyVideo);
    }
    let k = frames[0].k();
    if let Some(t) = frames.iter().position(|f| f.k() != k) {
        return Err(PostprocError::BadFrame {
            detail: format!("frame {t} has {} candidates, expected {k}", frames[t].k()),
        });
    }
    Ok((0..frames.len()).map(|t| stabilize_window(frames, t, p)).collect())
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> CenterBox {
        CenterBox { cx: 0.5, cy: 0.5, w: 0.2, h: 0.2 }
    }

    pub(super) fn random_video(rng: &mut ChaCha8Rng, t: usize, k: usize, d: usize) -> Vec<TopKFrame> {
        (0..t)
            .map(|_| {
                let mut scores: Vec<Real> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
                scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let features: Vec<Vec<Real>> = (0..k)
                    .map(|_| unit(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
                    .collect();
                TopKFrame::new(vec![unit_box(); k], scores, features, false).unwrap()
            })
            .collect()
    }

    #[test]
    fn single_window_is_a_no_op_on_scores_and_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let frames = random_video(&mut rng, 6, 4, 5);
            let out = stabilize_video(&frames, 1).unwrap();
            for (f, s) in frames.iter().zip(&out) {
                assert_eq!(s.scores, f.scores);
                assert_eq!(s.selected, 0, "sorted scores select rank 1");
            }
        }
    }

    #[test]
    fn single_frame_video_keeps_its_scores_for_any_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames = random_video(&mut rng, 1, 5, 4);
        for p in [1, 3, 5, 9] {
            let out = stabilize_video(&frames, p).unwrap();
            assert_eq!(out[0].scores, frames[0].scores);
            assert_eq!(out[0].selected, 0);
        }
    }

    #[test]
    fn identical_frames_with_orthonormal_features_keep_center_scores() {
        let k = 3;
        let features: Vec<Vec<Real>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        // Dyadic scores keep window averaging exact for any window size.
        let scores = vec![0.75, 0.5, 0.25];
        let frame = TopKFrame::new(vec![unit_box(); k], scores.clone(), features, false).unwrap();
        let frames = vec![frame; 5];
        let out = stabilize_video(&frames, 3).unwrap();
        for s in &out {
            assert_eq!(s.scores, scores);
            assert_eq!(s.selected, 0);
        }
    }

    #[test]
    fn persistent_rank_two_candidate_overtakes_flickering_rank_one() {
        // Center frame: rank-1 feature [1,0] (score 0.6), rank-2 [0,1]
        // (score 0.5). Both neighbors put feature [0,1] on their strong
        // 0.9 box, so rank 2 collects 0.9 votes and wins.
        let mk = |scores: Vec<Real>, feats: Vec<Vec<Real>>| {
            TopKFrame::new(vec![unit_box(); 2], scores, feats, false).unwrap()
        };
        let neighbor = mk(vec![0.9, 0.1], vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let center = mk(vec![0.6, 0.5], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let frames = vec![neighbor.clone(), center, neighbor];
        let out = stabilize_video(&frames, 3).unwrap();
        let mid = &out[1];
        assert!((mid.scores[0] - 0.8 / 3.0).abs() < 1e-15);
        assert!((mid.scores[1] - 2.3 / 3.0).abs() < 1e-15);
        assert_eq!(mid.selected, 1);
        // Matches the independent oracle bitwise.
        let oracle = oracle::stabilize(&frames, 3);
        assert_eq!(oracle[1].scores, mid.scores);
    }

    #[test]
    fn matches_the_brute_force_oracle_on_random_videos() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let t = rng.gen_range(1..=9);
            let k = [1, 2, 3, 5][rng.gen_range(0..4)];
            let frames = random_video(&mut rng, t, k, 6);
            for p in [1, 3, 5] {
                let ours = stabilize_video(&frames, p).unwrap();
                let theirs = oracle::stabilize(&frames, p);
                for (a, b) in ours.iter().zip(&theirs) {
                    assert_eq!(a.selected, b.selected);
                    for (x, y) in a.scores.iter().zip(&b.scores) {
                        assert!((x - y).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn candidate_permutation_permutes_output_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = 4;
        let frames = random_video(&mut rng, 5, k, 6);
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<TopKFrame> = frames
            .iter()
            .map(|f| {
                TopKFrame::new(
                    perm.iter().map(|&i| f.boxes[i]).collect(),
                    perm.iter().map(|&i| f.scores[i]).collect(),
                    perm.iter().map(|&i| f.features[i].clone()).collect(),
                    false,
                )
                .unwrap()
            })
            .collect();
        let base = stabilize_video(&frames, 3).unwrap();
        let swapped = stabilize_video(&permuted, 3).unwrap();
        for (b, s) in base.iter().zip(&swapped) {
            for i in 0..k {
                assert_eq!(s.scores[i], b.scores[perm[i]]);
            }
        }
    }

    #[test]
    fn doubling_confidences_doubles_scores_and_keeps_selections() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = random_video(&mut rng, 7, 3, 5);
        let doubled: Vec<TopKFrame> = frames
            .iter()
            .map(|f| {
                let mut g = f.clone();
                for s in g.scores.iter_mut() {
                    *s *= 2.0;
                }
                g
            })
            .collect();
        let base = stabilize_video(&frames, 5).unwrap();
        let twice = stabilize_video(&doubled, 5).unwrap();
        for (b, d) in base.iter().zip(&twice) {
            assert_eq!(d.selected, b.selected);
            for (x, y) in b.scores.iter().zip(&d.scores) {
                assert_eq!(*y, 2.0 * x, "doubling is exact in binary floating point");
            }
        }
    }

    #[test]
    fn boosting_matched_neighbor_scores_raises_the_matched_candidate() {
        let mk = |scores: Vec<Real>, feats: Vec<Vec<Real>>| {
            TopKFrame::new(vec![unit_box(); 2], scores, feats, false).unwrap()
        };
        let center = mk(vec![0.6, 0.5], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let lo = mk(vec![0.5, 0.2], vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let hi = mk(vec![0.9, 0.2], vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let before = stabilize_video(&[lo.clone(), center.clone(), lo], 3).unwrap();
        let after = stabilize_video(&[hi.clone(), center, hi], 3).unwrap();
        assert!(after[1].scores[1] > before[1].scores[1]);
    }

    #[test]
    fn validation_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames = random_video(&mut rng, 3, 2, 4);
        assert!(matches!(stabilize_video(&frames, 4), Err(PostprocError::EvenWindow(4))));
        assert!(matches!(stabilize_video(&[], 3), Err(PostprocError::EmptyVideo)));
        let mut uneven = frames.clone();
        uneven[1] = random_video(&mut rng, 1, 3, 4).pop().unwrap();
        let err = stabilize_video(&uneven, 3).unwrap_err().to_string();
        assert!(err.contains("frame 1 has 3 candidates"), "{err}");
    }

    #[test]
    fn gather_topk_sorts_normalizes_and_pads() {
        use crate::head::{decode_grid, scale_scores_by_cell};
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw = Tensor::new(vec![4, 5], (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let anchors = [crate::head::Anchor { w: 0.3, h: 0.3 }];
        let mut preds = decode_grid(&raw, 2, &anchors).unwrap();
        scale_scores_by_cell(&mut preds, &[1.0, 0.9, 0.3, 0.7]);
        let v = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let f = gather_topk(&preds, &v, 3).unwrap();
        assert!(!f.padded);
        assert!(f.scores.windows(2).all(|w| w[0] >= w[1]));
        for feat in &f.features {
            let norm: Real = feat.iter().map(|x| x * x).sum::<Real>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }

        // K beyond the candidate count repeats the tail and sets the flag.
        let f = gather_topk(&preds, &v, 6).unwrap();
        assert!(f.padded);
        assert_eq!(f.k(), 6);
        assert_eq!(f.scores[4], f.scores[3]);
        assert_eq!(f.scores[5], f.scores[3]);
        assert_eq!(f.features[5], f.features[3]);
    }

    #[test]
    fn ties_in_affinity_rows_pick_the_earliest_candidate() {
        // Two identical feature rows in the reference frame: the earlier
        // (higher-scoring) one must win the match.
        let center = TopKFrame::new(
            vec![unit_box(); 2],
            vec![0.5, 0.4],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            false,
        )
        .unwrap();
        let reference = TopKFrame::new(
            vec![unit_box(); 2],
            vec![0.9, 0.1],
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            false,
        )
        .unwrap();
        let frames = vec![reference, center];
        let out = stabilize_window(&frames, 1, 3);
        // Candidate 0 matches reference candidate 0 (tie broken low) and
        // averages 0.5 and 0.9.
        assert!((out.scores[0] - 0.7).abs() < 1e-15);
    }
}
