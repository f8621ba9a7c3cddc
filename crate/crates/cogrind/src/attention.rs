//! Attribute attention and the semantic maps it induces on the grid.
//!
//! Two attribute queries are pooled from an encoded expression: a learned
//! score vector (one per attribute, width `2H`) is dotted with each
//! word's BiLSTM code, the scores are softmaxed into a simplex weight
//! vector α, and the query is the α-weighted sum of the raw word
//! *embeddings* (not the LSTM states). The subject query scores every
//! grid cell by cosine similarity ([`subject_map`]) and trains with a
//! margin [`rank_loss`]; the location query scores cells through a
//! position-affinity pipeline ([`location_features`], [`location_map`])
//! trained with a temperature-scaled cross-entropy ([`location_ce_loss`]).
//!
//! Both similarity families are cosines, so a confidence fusion maps
//! their `[-1, 1]` range into `[0, 1]` via `s ↦ (1+s)/2` before
//! multiplying with objectness ([`map_to_unit`]).

use crate::params::Bindings;
use crate::tape::{Tape, TensorId};
use crate::tensor::{Real, Tensor, TensorError};
use crate::text::Encoded;

/// Margin of the subject rank loss.
pub const DEFAULT_MARGIN: Real = 0.5;
/// Softmax temperature of the location cross-entropy: cosine logits live
/// in `[-1, 1]` and need sharpening over HW cells to train.
pub const DEFAULT_TAU: Real = 0.1;

/// Learned attention over words: α = softmax(h · w), q = α-weighted sum
/// of embeddings. Returns `(alpha [1, N], q [1, E])`.
pub fn attend(tape: &mut Tape, b: &Bindings, w_path: &str, enc: &Encoded) -> Result<(TensorId, TensorId), TensorError> {
    let scores = tape.matmul(enc.h, b.p(w_path))?;
    let row = tape.reshape(scores, &[1, enc.n])?;
    let alpha = tape.softmax(row)?;
    let q = tape.matmul(alpha, enc.e)?;
    Ok((alpha, q))
}

/// Attention-free pooling: α fixed at 1/N, so q is the mean embedding.
/// Baseline modes route their single text feature through this.
pub fn attend_uniform(tape: &mut Tape, enc: &Encoded) -> Result<(TensorId, TensorId), TensorError> {
    let alpha = tape.constant(Tensor::filled(&[1, enc.n], 1.0 / enc.n as Real))?;
    let q = tape.matmul(alpha, enc.e)?;
    Ok((alpha, q))
}

/// Cosine of every row of `m: [R, D]` against the single row `q: [1, D]`,
/// returned as a `[R, 1]` column. Zero-norm rows fall back to the
/// normalizer's floor instead of dividing by zero.
pub fn cosine_map(tape: &mut Tape, m: TensorId, q: TensorId) -> Result<TensorId, TensorError> {
    let mn = tape.l2norm(m)?;
    let qn = tape.l2norm(q)?;
    let qt = tape.transpose(qn)?;
    tape.matmul(mn, qt)
}

/// Cosine of two single rows, as a `[1]` scalar.
pub fn cosine_pair(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
    let an = tape.l2norm(a)?;
    let bn = tape.l2norm(b)?;
    let d = tape.dot(an, bn)?;
    tape.reshape(d, &[1])
}

/// Subject map: cosine between each cell of the (enhanced) visual grid
/// `v: [HW, D]` and the projected subject query `q_d: [1, D]`.
pub fn subject_map(tape: &mut Tape, v: TensorId, q_d: TensorId) -> Result<TensorId, TensorError> {
    cosine_map(tape, v, q_d)
}

/// One positive/negative-set margin loss term pair:
/// `max(0, Δ + δ(neg_cell) − δ(pos)) + max(0, Δ + δ(neg_query) − δ(pos))`.
/// All three inputs are `[1]` cosine scalars; with several negative pairs
/// average the returned terms with [`Tape::mean_scalars`].
pub fn rank_loss(
    tape: &mut Tape,
    delta_pos: TensorId,
    delta_neg_cell: TensorId,
    delta_neg_query: TensorId,
    margin: Real,
) -> Result<TensorId, TensorError> {
    let neg_pos = tape.scale(delta_pos, -1.0)?;
    let mut terms = Vec::with_capacity(2);
    for neg in [delta_neg_cell, delta_neg_query] {
        let gap = tape.add(neg, neg_pos)?;
        let margin_c = tape.constant(Tensor::scalar(margin))?;
        let shifted = tape.add(gap, margin_c)?;
        terms.push(tape.relu(shifted)?);
    }
    tape.add(terms[0], terms[1])
}

/// Position affinity `A(x, y) = u_x · u_y` over projected coordinate
/// rows `u: [HW, D']`; symmetric `[HW, HW]`.
pub fn location_affinity(tape: &mut Tape, u: TensorId) -> Result<TensorId, TensorError> {
    let ut = tape.transpose(u)?;
    tape.matmul(u, ut)
}

/// Object-aware location features: scale column `y` of the affinity by
/// the subject response `s[y]`, then map each row through a learned
/// `HW -> D'` layer. `s` is the `[HW, 1]` subject column.
pub fn location_features(
    tape: &mut Tape,
    b: &Bindings,
    fc_w_path: &str,
    fc_b_path: &str,
    affinity: TensorId,
    s: TensorId,
) -> Result<TensorId, TensorError> {
    let hw = tape.value(affinity).dim(0);
    let s_row = tape.reshape(s, &[1, hw])?;
    let s_grid = tape.broadcast_rows(s_row, hw)?;
    let scaled = tape.mul(affinity, s_grid)?;
    tape.conv1x1(scaled, b.p(fc_w_path), b.p(fc_b_path))
}

/// Location map: cosine of each object-aware row against the projected
/// location query.
pub fn location_map(tape: &mut Tape, u_tilde: TensorId, q_d: TensorId) -> Result<TensorId, TensorError> {
    cosine_map(tape, u_tilde, q_d)
}

/// Cross-entropy over all cells of the temperature-sharpened location
/// map, with the responsible cell as the target class.
pub fn location_ce_loss(tape: &mut Tape, l: TensorId, tau: Real, gt_cell: usize) -> Result<TensorId, TensorError> {
    let hw = tape.value(l).dim(0);
    let row = tape.reshape(l, &[1, hw])?;
    let logits = tape.scale(row, 1.0 / tau)?;
    tape.softmax_xent(logits, &[gt_cell])
}

/// Affine map from cosine range `[-1, 1]` to `[0, 1]`: `s ↦ (1 + s) / 2`.
pub fn map_to_unit(tape: &mut Tape, s: TensorId) -> Result<TensorId, TensorError> {
    let half = tape.scale(s, 0.5)?;
    let shift = tape.constant(Tensor::filled(tape.value(half).shape(), 0.5))?;
    tape.add(half, shift)
}
