//! Grid prediction head: dense anchor boxes, objectness, and selection.
//!
//! Every grid cell carries `A` anchor slots, each predicting a raw
//! 5-vector `(tx, ty, tw, th, to)`. Centers decode through a sigmoid into
//! the cell's own extent, sizes scale the anchor exponentially, and the
//! objectness logit `to` trains with a softmax cross-entropy over all
//! `H·W·A` slots where the single positive is the slot responsible for
//! the ground truth (the cell holding its center, the anchor with the
//! best co-centered overlap).
//!
//! The fusion stack in [`head_forward`] is deliberately linear: the
//! expression queries enter as cell-constant rows, so with no
//! nonlinearity between concat and output the query can only shift each
//! anchor's logits uniformly across cells — it cannot re-rank cells.
//! Spatial preference must therefore come through the similarity maps,
//! which is exactly the ablation boundary the mode switches probe
//! ([`crate::model`]).

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::CenterBox;
use crate::params::{Bindings, ParamStore};
use crate::tape::{sigmoid, Tape, TensorId};
use crate::tensor::{fmt_shape, Real, Tensor, TensorError};

/// Raw channels per anchor slot: tx, ty, tw, th, to.
pub const SLOT_CHANNELS: usize = 5;
/// Center offsets are clamped to this open interval before the logit
/// when encoding, keeping encode/decode mutually inverse.
pub const CENTER_CLAMP: Real = 0.001;

pub const FUSE_W: &str = "head/fuse/w";
pub const FUSE_B: &str = "head/fuse/b";
pub const OUT_W: &str = "head/out/w";
pub const OUT_B: &str = "head/out/b";

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("degenerate ground-truth box: {detail}")]
    Degenerate { detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Anchor extent in normalized image units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Anchor {
    pub w: Real,
    pub h: Real,
}

/// Square anchors covering small/medium/large synthetic targets.
pub fn default_anchors() -> Vec<Anchor> {
    [0.15, 0.3, 0.5].iter().map(|&s| Anchor { w: s, h: s }).collect()
}

/// Widths feeding the head: enhanced visual `D`, coordinate `D'`, and
/// the anchor count.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDims {
    pub feature: usize,
    pub coord: usize,
    pub anchors: usize,
}

impl HeadDims {
    pub fn fused_in(&self) -> usize {
        3 * self.feature + self.coord
    }

    pub fn out_channels(&self) -> usize {
        SLOT_CHANNELS * self.anchors
    }
}

/// Register the two linear convolutions of the head.
pub fn register(params: &mut ParamStore, dims: &HeadDims, rng: &mut ChaCha8Rng) {
    let fuse_in = dims.fused_in();
    let bound = (1.0 / fuse_in as Real).sqrt();
    params.insert_uniform(FUSE_W, &[fuse_in, dims.feature], bound, rng);
    params.insert(FUSE_B, Tensor::zeros(&[dims.feature]));
    params.insert_uniform(OUT_W, &[dims.feature, dims.out_channels()], 0.01, rng);
    params.insert(OUT_B, Tensor::zeros(&[dims.out_channels()]));
}

/// Dense raw predictions `[HW, 5A]` from enhanced features `v: [HW, D]`,
/// projected queries `q_sub_d`/`q_loc_d: [1, D]` (broadcast to every
/// cell), and coordinate features `u: [HW, D']`. Both stages are linear.
pub fn head_forward(
    tape: &mut Tape,
    b: &Bindings,
    dims: &HeadDims,
    v: TensorId,
    q_sub_d: TensorId,
    q_loc_d: TensorId,
    u: TensorId,
) -> Result<TensorId, TensorError> {
    let vs = tape.value(v).shape().to_vec();
    if vs.len() != 2 || vs[1] != dims.feature {
        return Err(TensorError::shape("head_forward", format!("visual map must be [HW, {}], got {}", dims.feature, fmt_shape(&vs))));
    }
    let hw = vs[0];
    let us = tape.value(u).shape().to_vec();
    if us != [hw, dims.coord] {
        return Err(TensorError::shape("head_forward", format!("coordinate map must be [{hw}, {}], got {}", dims.coord, fmt_shape(&us))));
    }
    let qs = tape.broadcast_rows(q_sub_d, hw)?;
    let ql = tape.broadcast_rows(q_loc_d, hw)?;
    let cat = tape.concat(&[v, qs, ql, u])?;
    let fused = tape.conv1x1(cat, b.p(FUSE_W), b.p(FUSE_B))?;
    tape.conv1x1(fused, b.p(OUT_W), b.p(OUT_B))
}

/// The objectness logits of every slot as a `[1, HW*A]` row, slot order
/// `cell * A + anchor`.
pub fn objectness_logits(tape: &mut Tape, raw: TensorId, anchors: usize) -> Result<TensorId, TensorError> {
    let shape = tape.value(raw).shape().to_vec();
    if shape.len() != 2 || shape[1] != SLOT_CHANNELS * anchors {
        return Err(TensorError::shape(
            "objectness_logits",
            format!("raw grid must be [HW, {}], got {}", SLOT_CHANNELS * anchors, fmt_shape(&shape)),
        ));
    }
    let hw = shape[0];
    let cols: Vec<usize> = (0..anchors).map(|a| a * SLOT_CHANNELS + 4).collect();
    let rt = tape.transpose(raw)?;
    let o_rows = tape.gather_rows(rt, &cols)?;
    let o = tape.transpose(o_rows)?;
    tape.reshape(o, &[1, hw * anchors])
}

/// Selection loss: softmax cross-entropy over all slot objectness
/// logits, positive class = the responsible slot.
pub fn cls_loss(tape: &mut Tape, raw: TensorId, anchors: usize, slot: usize) -> Result<TensorId, TensorError> {
    let logits = objectness_logits(tape, raw, anchors)?;
    tape.softmax_xent(logits, &[slot])
}

/// Regression loss at the responsible slot: mean squared difference of
/// the four box channels against their encoded targets.
pub fn reg_loss(
    tape: &mut Tape,
    raw: TensorId,
    cell: usize,
    anchor: usize,
    targets: &[Real; 4],
) -> Result<TensorId, TensorError> {
    let row = tape.gather_rows(raw, &[cell])?;
    let rt = tape.transpose(row)?;
    let base = anchor * SLOT_CHANNELS;
    let picked = tape.gather_rows(rt, &[base, base + 1, base + 2, base + 3])?;
    let flat = tape.reshape(picked, &[4])?;
    let tgt = tape.constant(Tensor::vector(targets))?;
    let neg = tape.scale(tgt, -1.0)?;
    let diff = tape.add(flat, neg)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Grid slot responsible for a ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsible {
    pub cell_i: usize,
    pub cell_j: usize,
    pub cell: usize,
    pub anchor: usize,
    /// Encoded (tx*, ty*, tw*, th*).
    pub targets: [Real; 4],
}

impl Responsible {
    /// Flat slot index in `cell * A + anchor` order.
    pub fn slot(&self, anchors: usize) -> usize {
        self.cell * anchors + self.anchor
    }
}

/// Overlap of two boxes sharing a center, in normalized units.
pub fn co_centered_iou(w1: Real, h1: Real, w2: Real, h2: Real) -> Real {
    let inter = w1.min(w2) * h1.min(h2);
    inter / (w1 * h1 + w2 * h2 - inter)
}

fn logit(p: Real) -> Real {
    (p / (1.0 - p)).ln()
}

/// Find the responsible slot for `gt` and encode its regression targets.
/// Boxes at most one pixel wide or tall are rejected.
pub fn encode_targets(
    gt: &CenterBox,
    grid: usize,
    anchors: &[Anchor],
    image_size: usize,
) -> Result<Responsible, HeadError> {
    let px = image_size as Real;
    if gt.w * px <= 1.0 || gt.h * px <= 1.0 {
        return Err(HeadError::Degenerate {
            detail: format!("{:.3}x{:.3} px at ({:.3}, {:.3})", gt.w * px, gt.h * px, gt.cx, gt.cy),
        });
    }
    let g = grid as Real;
    let cell_j = ((gt.cx * g).floor() as usize).min(grid - 1);
    let cell_i = ((gt.cy * g).floor() as usize).min(grid - 1);
    let anchor = anchors
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            let va = co_centered_iou(gt.w, gt.h, a.w, a.h);
            let vb = co_centered_iou(gt.w, gt.h, b.w, b.h);
            // Strictly-greater keeps the earliest index on ties.
            va.partial_cmp(&vb).unwrap().then(ib.cmp(ia))
        })
        .map(|(i, _)| i)
        .expect("anchor list is non-empty");
    let off_x = (gt.cx * g - cell_j as Real).clamp(CENTER_CLAMP, 1.0 - CENTER_CLAMP);
    let off_y = (gt.cy * g - cell_i as Real).clamp(CENTER_CLAMP, 1.0 - CENTER_CLAMP);
    let a = &anchors[anchor];
    Ok(Responsible {
        cell_i,
        cell_j,
        cell: cell_i * grid + cell_j,
        anchor,
        targets: [logit(off_x), logit(off_y), (gt.w / a.w).ln(), (gt.h / a.h).ln()],
    })
}

/// Decode one slot's raw 5-vector into a normalized box and objectness.
pub fn decode_slot(raw: &[Real], cell_i: usize, cell_j: usize, grid: usize, anchor: &Anchor) -> (CenterBox, Real) {
    let g = grid as Real;
    let b = CenterBox {
        cx: (cell_j as Real + sigmoid(raw[0])) / g,
        cy: (cell_i as Real + sigmoid(raw[1])) / g,
        w: anchor.w * raw[2].exp(),
        h: anchor.h * raw[3].exp(),
    };
    (b, sigmoid(raw[4]))
}

/// One decoded anchor slot. `score` starts as objectness and is scaled
/// by the similarity maps in fused modes.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxPrediction {
    pub cell: usize,
    pub anchor: usize,
    pub raw: [Real; SLOT_CHANNELS],
    pub bbox: CenterBox,
    pub objectness: Real,
    pub score: Real,
}

/// Decode every slot of a raw `[HW, 5A]` grid, slot order
/// `cell * A + anchor`.
pub fn decode_grid(raw: &Tensor, grid: usize, anchors: &[Anchor]) -> Result<Vec<BoxPrediction>, TensorError> {
    let want = [grid * grid, SLOT_CHANNELS * anchors.len()];
    if raw.shape() != want {
        return Err(TensorError::shape(
            "decode_grid",
            format!("expected {}, got {}", fmt_shape(&want), fmt_shape(raw.shape())),
        ));
    }
    let mut out = Vec::with_capacity(grid * grid * anchors.len());
    for cell in 0..grid * grid {
        let (i, j) = (cell / grid, cell % grid);
        let row = &raw.data()[cell * want[1]..(cell + 1) * want[1]];
        for (a, anchor) in anchors.iter().enumerate() {
            let slot = &row[a * SLOT_CHANNELS..(a + 1) * SLOT_CHANNELS];
            let (bbox, objectness) = decode_slot(slot, i, j, grid, anchor);
            out.push(BoxPrediction {
                cell,
                anchor: a,
                raw: slot.try_into().expect("slot width"),
                bbox,
                objectness,
                score: objectness,
            });
        }
    }
    Ok(out)
}

/// Scale every slot's score by its cell's similarity factors (already
/// mapped to `[0, 1]`); `factors` is one value per cell.
pub fn scale_scores_by_cell(preds: &mut [BoxPrediction], factors: &[Real]) {
    for p in preds.iter_mut() {
        p.score *= factors[p.cell];
    }
}

/// Index of the highest-scoring prediction; ties go to the lowest
/// (cell, anchor) pair. Predictions are stored in that order, so a
/// strictly-greater scan implements the tie rule.
pub fn select(preds: &[BoxPrediction]) -> usize {
    assert!(!preds.is_empty(), "select needs at least one prediction");
    let mut best = 0;
    for (i, p) in preds.iter().enumerate().skip(1) {
        if p.score > preds[best].score {
            best = i;
        }
    }
    best
}

/// Indices of the top `k` predictions by score, ties by lowest
/// (cell, anchor); clipped to the available count.
pub fn top_k(preds: &[BoxPrediction], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
    idx.truncate(k.min(preds.len()));
    idx
}
