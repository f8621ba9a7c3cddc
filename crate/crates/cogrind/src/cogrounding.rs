//! Cross-frame feature enhancement ("co-grounding").
//!
//! Two frames of one video vote on each other's features: a row-stochastic
//! affinity matrix matches every cell of frame a against all cells of
//! frame b ([`affinity`]), propagated features are the affinity-weighted
//! convex mix of frame b's cells ([`propagate`]), and a shared pointwise
//! convolution fuses each frame's own features with the propagated ones
//! ([`enhance_pair`]). When the target is occluded in one frame, the other
//! frame's cells carry the missing evidence across.
//!
//! The reverse direction recomputes its own softmax over frame a's cells
//! rather than transposing the forward affinity — a transposed
//! row-stochastic matrix is no longer row-stochastic, and the convex-mix
//! guarantee would be lost.
//!
//! The fusion convolution starts as an identity on the frame's own
//! features (propagated block zeroed), so an untrained enhancer is a
//! no-op and training only mixes in cross-frame evidence where it pays.

use rand_chacha::ChaCha8Rng;

use crate::params::{Bindings, ParamStore};
use crate::tape::{Tape, TensorId};
use crate::tensor::{fmt_shape, Tensor, TensorError};

/// Parameter paths of the shared fusion convolution.
pub const CONV_W: &str = "cg/w";
pub const CONV_B: &str = "cg/b";

/// Register the fusion convolution (`2D -> D`) as an identity on the
/// first block: `[I; 0]` weights, zero bias. `_rng` is accepted for
/// signature symmetry with the other registrars; the init is exact.
pub fn register(params: &mut ParamStore, d: usize, _rng: &mut ChaCha8Rng) {
    let mut w = Tensor::zeros(&[2 * d, d]);
    for k in 0..d {
        w.data_mut()[k * d + k] = 1.0;
    }
    params.insert(CONV_W, w);
    params.insert(CONV_B, Tensor::zeros(&[d]));
}

/// Row-stochastic affinity from frame a's cells to frame b's:
/// `M(x, y) = softmax_y(F_a(x) · F_b(y))` on raw (unnormalized) dots.
/// Both maps are `[HW, D]` from the same video and level.
pub fn affinity(tape: &mut Tape, fa: TensorId, fb: TensorId) -> Result<TensorId, TensorError> {
    let (sa, sb) = (tape.value(fa).shape().to_vec(), tape.value(fb).shape().to_vec());
    if sa != sb || sa.len() != 2 {
        return Err(TensorError::shape(
            "affinity",
            format!("paired maps must both be [HW, D], got {} and {}", fmt_shape(&sa), fmt_shape(&sb)),
        ));
    }
    let fbt = tape.transpose(fb)?;
    let dots = tape.matmul(fa, fbt)?;
    tape.softmax(dots)
}

/// Convex mix of frame b's cells under the affinity: `F̃(x) = Σ_y M(x,y) F_b(y)`.
pub fn propagate(tape: &mut Tape, m: TensorId, fb: TensorId) -> Result<TensorId, TensorError> {
    tape.matmul(m, fb)
}

/// Enhance one frame from its partner: affinity, propagate, then the
/// shared fusion conv over `[own ⊕ propagated]`.
pub fn enhance(tape: &mut Tape, b: &Bindings, own: TensorId, other: TensorId) -> Result<TensorId, TensorError> {
    let m = affinity(tape, own, other)?;
    let prop = propagate(tape, m, other)?;
    let cat = tape.concat(&[own, prop])?;
    tape.conv1x1(cat, b.p(CONV_W), b.p(CONV_B))
}

/// Enhance both frames of a pair; the reverse direction runs its own
/// softmax over the opposite axis and shares the fusion weights.
pub fn enhance_pair(
    tape: &mut Tape,
    b: &Bindings,
    fa: TensorId,
    fb: TensorId,
) -> Result<(TensorId, TensorId), TensorError> {
    let va = enhance(tape, b, fa, fb)?;
    let vb = enhance(tape, b, fb, fa)?;
    Ok((va, vb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Real;
    use rand::{Rng, SeedableRng};

    fn cg_bindings(tape: &mut Tape, d: usize) -> Bindings {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        register(&mut params, d, &mut rng);
        params.bind(tape, false).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, hw: usize, d: usize) -> Tensor {
        Tensor::new(vec![hw, d], (0..hw * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn orthogonal_large_norm_features_give_near_identity_affinity() {
        let mut tape = Tape::new();
        let mut f = Tensor::zeros(&[4, 4]);
        for k in 0..4 {
            f.data_mut()[k * 4 + k] = 50.0;
        }
        let fa = tape.constant(f.clone()).unwrap();
        let fb = tape.constant(f).unwrap();
        let m = affinity(&mut tape, fa, fb).unwrap();
        for (at, &v) in tape.value(m).data().iter().enumerate() {
            if at / 4 == at % 4 {
                assert!(v > 1.0 - 1e-10, "diagonal {v}");
            } else {
                assert!(v < 1e-10, "off-diagonal {v}");
            }
        }
    }

    #[test]
    fn constant_features_give_uniform_affinity() {
        let mut tape = Tape::new();
        let fa = tape.constant(Tensor::filled(&[6, 3], 0.7)).unwrap();
        let fb = tape.constant(Tensor::filled(&[6, 3], -0.2)).unwrap();
        let m = affinity(&mut tape, fa, fb).unwrap();
        for &v in tape.value(m).data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_cell_ln2_row_matches_softmax_arithmetic() {
        let mut tape = Tape::new();
        let fa = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap()).unwrap();
        let fb = tape
            .constant(Tensor::new(vec![2, 1], vec![(2.0 as Real).ln(), 0.0]).unwrap())
            .unwrap();
        let m = affinity(&mut tape, fa, fb).unwrap();
        let row0 = &tape.value(m).data()[..2];
        assert!((row0[0] - 2.0 / 3.0).abs() < 1e-12 && (row0[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn affinity_rejects_mismatched_maps() {
        let mut tape = Tape::new();
        let fa = tape.constant(Tensor::zeros(&[4, 3])).unwrap();
        let fb = tape.constant(Tensor::zeros(&[5, 3])).unwrap();
        let err = affinity(&mut tape, fa, fb).unwrap_err().to_string();
        assert!(err.contains("[4, 3]") && err.contains("[5, 3]"), "{err}");
    }

    #[test]
    fn identity_affinity_propagates_unchanged() {
        let mut tape = Tape::new();
        let mut eye = Tensor::zeros(&[3, 3]);
        for k in 0..3 {
            eye.data_mut()[k * 3 + k] = 1.0;
        }
        let m = tape.constant(eye).unwrap();
        let fb = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let p = propagate(&mut tape, m, fb).unwrap();
        assert_eq!(tape.value(p).data(), tape.value(fb).data());
    }

    #[test]
    fn uniform_affinity_propagates_the_spatial_mean() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::filled(&[4, 4], 0.25)).unwrap();
        let fb = tape
            .constant(Tensor::new(vec![4, 2], vec![1.0, 0.0, 3.0, 4.0, 5.0, -4.0, (-1.0), 8.0]).unwrap())
            .unwrap();
        let p = propagate(&mut tape, m, fb).unwrap();
        for row in tape.value(p).data().chunks(2) {
            assert!((row[0] - 2.0).abs() < 1e-12 && (row[1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn affinity_rows_are_stochastic_and_propagation_stays_in_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (hw, d) = (rng.gen_range(1..=9), rng.gen_range(1..=5));
            let mut tape = Tape::new();
            let fa = tape.constant(random_map(&mut rng, hw, d)).unwrap();
            let fb = tape.constant(random_map(&mut rng, hw, d)).unwrap();
            let m = affinity(&mut tape, fa, fb).unwrap();
            let mv = tape.value(m);
            for row in mv.data().chunks(hw) {
                let sum: Real = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-10, "row sum {sum}");
                assert!(row.iter().all(|&v| v >= 0.0));
            }
            let p = propagate(&mut tape, m, fb).unwrap();
            let (pv, bv) = (tape.value(p), tape.value(fb));
            for c in 0..d {
                let col: Vec<Real> = (0..hw).map(|y| bv.data()[y * d + c]).collect();
                let (lo, hi) = col.iter().fold((Real::MAX, Real::MIN), |(l, h), &v| (l.min(v), h.max(v)));
                for x in 0..hw {
                    let v = pv.data()[x * d + c];
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "component escaped the hull");
                }
            }
        }
    }

    #[test]
    fn identity_init_makes_enhancement_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let b = cg_bindings(&mut tape, 3);
        let fa = tape.constant(random_map(&mut rng, 4, 3)).unwrap();
        let fb = tape.constant(random_map(&mut rng, 4, 3)).unwrap();
        let (va, vb) = enhance_pair(&mut tape, &b, fa, fb).unwrap();
        assert_eq!(tape.value(va).data(), tape.value(fa).data());
        assert_eq!(tape.value(vb).data(), tape.value(fb).data());
    }

    #[test]
    fn equal_frames_enhance_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tape = Tape::new();
        let d = 3;
        // Non-trivial shared conv: random weights on both blocks.
        let mut params = ParamStore::new();
        params.insert_uniform(CONV_W, &[2 * d, d], 0.8, &mut rng);
        params.insert_uniform(CONV_B, &[d], 0.1, &mut rng);
        let b = params.bind(&mut tape, false).unwrap();
        let f = tape.constant(random_map(&mut rng, 5, d)).unwrap();
        let (va, vb) = enhance_pair(&mut tape, &b, f, f).unwrap();
        assert_eq!(tape.value(va).data(), tape.value(vb).data());
    }

    #[test]
    fn zero_features_with_zero_bias_enhance_to_zero() {
        let mut tape = Tape::new();
        let b = cg_bindings(&mut tape, 4);
        let fa = tape.constant(Tensor::zeros(&[6, 4])).unwrap();
        let fb = tape.constant(Tensor::zeros(&[6, 4])).unwrap();
        let (va, vb) = enhance_pair(&mut tape, &b, fa, fb).unwrap();
        assert!(tape.value(va).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(vb).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cell_permutation_conjugates_affinity_and_permutes_enhanced_maps() {
        // Exact-arithmetic toy: frame b rows are -1000 * e_y, so dots are
        // 0 or -1000, exp underflows to exactly 0, and every row sum is a
        // small integer -- bitwise equality survives any summation order.
        let d = 4;
        let perm = [2usize, 0, 3, 1];
        let fa_rows: [[Real; 4]; 4] = [
            [0.0, 1.0, 1.0, 0.0],
            [1.0, 0.0, 1.0, 1.0],
            [0.0, 0.0, 0.0, 1.0],
            [1.0, 1.0, 0.0, 0.0],
        ];
        let mut fb_t = Tensor::zeros(&[4, d]);
        for k in 0..4 {
            fb_t.data_mut()[k * d + k] = -1000.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = ParamStore::new();
        params.insert_uniform(CONV_W, &[2 * d, d], 0.7, &mut rng);
        params.insert_uniform(CONV_B, &[d], 0.3, &mut rng);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false).unwrap();

        let build = |tape: &mut Tape, order: &[usize]| {
            let fa_data: Vec<Real> = order.iter().flat_map(|&r| fa_rows[r]).collect();
            let fb_data: Vec<Real> = order
                .iter()
                .flat_map(|&r| fb_t.data()[r * d..(r + 1) * d].to_vec())
                .collect();
            let fa = tape.constant(Tensor::new(vec![4, d], fa_data).unwrap()).unwrap();
            let fb = tape.constant(Tensor::new(vec![4, d], fb_data).unwrap()).unwrap();
            (fa, fb)
        };
        let (fa, fb) = build(&mut tape, &[0, 1, 2, 3]);
        let (fa_p, fb_p) = build(&mut tape, &perm);

        let m = affinity(&mut tape, fa, fb).unwrap();
        let m_p = affinity(&mut tape, fa_p, fb_p).unwrap();
        let (mv, mpv) = (tape.value(m).data(), tape.value(m_p).data());
        for x in 0..4 {
            for y in 0..4 {
                assert_eq!(mpv[x * 4 + y], mv[perm[x] * 4 + perm[y]], "M not conjugated at ({x}, {y})");
            }
        }

        let (va, _) = enhance_pair(&mut tape, &b, fa, fb).unwrap();
        let (va_p, _) = enhance_pair(&mut tape, &b, fa_p, fb_p).unwrap();
        let (vav, vapv) = (tape.value(va).data(), tape.value(va_p).data());
        for x in 0..4 {
            assert_eq!(&vapv[x * d..(x + 1) * d], &vav[perm[x] * d..(perm[x] + 1) * d], "row {x}");
        }
    }

    #[test]
    fn enhancement_gradients_pass_grad_check() {
        use crate::gradcheck::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 3;
        let mut params = ParamStore::new();
        params.insert_uniform(CONV_W, &[2 * d, d], 0.6, &mut rng);
        params.insert_uniform(CONV_B, &[d], 0.2, &mut rng);
        let fa_t = random_map(&mut rng, 4, d);
        let fb_t = random_map(&mut rng, 4, d);

        // Through the shared conv weights.
        let err = grad_check(params.get(CONV_W).unwrap(), 1e-5, |tape, id| {
            let b = params.bind_except(tape, CONV_W, id)?;
            let fa = tape.constant(fa_t.clone())?;
            let fb = tape.constant(fb_t.clone())?;
            let (va, vb) = enhance_pair(tape, &b, fa, fb)?;
            let cat = tape.concat(&[va, vb])?;
            let sq = tape.mul(cat, cat)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-4, "conv weights: relative error {err}");

        // Through the frame features (affinity softmax included).
        let err = grad_check(&fa_t, 1e-5, |tape, fa| {
            let b = params.bind(tape, false)?;
            let fb = tape.constant(fb_t.clone())?;
            let (va, vb) = enhance_pair(tape, &b, fa, fb)?;
            let cat = tape.concat(&[va, vb])?;
            let sq = tape.mul(cat, cat)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-4, "frame features: relative error {err}");
    }
}
