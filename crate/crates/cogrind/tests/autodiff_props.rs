//! Property tests pitting every differentiable tape primitive against
//! central finite differences. Inputs are kept away from kinks (relu at
//! zero, ties under max, the l2 floor) since the analytic gradient picks
//! one subgradient there and differences straddle both sides.

use cogrind::gradcheck::grad_check;
use cogrind::tape::{Tape, TensorId};
use cogrind::tensor::{Real, Tensor, TensorError};
use proptest::prelude::*;

const EPS: Real = 1e-4;
const TOL: Real = 1e-5;

fn vals(n: usize) -> impl Strategy<Value = Vec<Real>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

/// Deterministic varied positive weights so the scalarized output mixes
/// Jacobian rows with distinct coefficients (a plain sum could mask
/// gradient components that cancel).
fn mix_weights(n: usize) -> Vec<Real> {
    (0..n).map(|i| 0.3 + 0.7 * ((i * 37 % 11) as Real / 11.0)).collect()
}

fn scalarize(tape: &mut Tape, y: TensorId) -> Result<TensorId, TensorError> {
    let n = tape.value(y).numel();
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(Tensor::new(shape, mix_weights(n))?)?;
    tape.dot(y, w)
}

fn tensor(shape: &[usize], data: Vec<Real>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// All row entries pairwise separated, so argmax is locally stable.
fn unique_rows(data: &[Real], c: usize) -> bool {
    data.chunks(c).all(|row| {
        row.iter()
            .enumerate()
            .all(|(i, a)| row[..i].iter().all(|b| (a - b).abs() > 0.05))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_gradient_wrt_left((m, k, n) in (1usize..4, 1usize..4, 1usize..4), data in vals(36)) {
        let a = tensor(&[m, k], data[..m * k].to_vec());
        let b = mix_weights(k * n);
        let err = grad_check(&a, EPS, |t, id| {
            let bc = t.constant(tensor(&[k, n], b.clone()))?;
            let y = t.matmul(id, bc)?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn matmul_gradient_wrt_right((m, k, n) in (1usize..4, 1usize..4, 1usize..4), data in vals(36)) {
        let b = tensor(&[k, n], data[..k * n].to_vec());
        let a = mix_weights(m * k);
        let err = grad_check(&b, EPS, |t, id| {
            let ac = t.constant(tensor(&[m, k], a.clone()))?;
            let y = t.matmul(ac, id)?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn conv1x1_gradient_wrt_input((r, ci, co) in (1usize..4, 1usize..4, 1usize..4), data in vals(36)) {
        let x = tensor(&[r, ci], data[..r * ci].to_vec());
        let (w, b) = (mix_weights(ci * co), mix_weights(co));
        let err = grad_check(&x, EPS, |t, id| {
            let wc = t.constant(tensor(&[ci, co], w.clone()))?;
            let bc = t.constant(tensor(&[co], b.clone()))?;
            let y = t.conv1x1(id, wc, bc)?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn conv1x1_gradient_wrt_weight((r, ci, co) in (1usize..4, 1usize..4, 1usize..4), data in vals(36)) {
        let w = tensor(&[ci, co], data[..ci * co].to_vec());
        let (x, b) = (mix_weights(r * ci), mix_weights(co));
        let err = grad_check(&w, EPS, |t, id| {
            let xc = t.constant(tensor(&[r, ci], x.clone()))?;
            let bc = t.constant(tensor(&[co], b.clone()))?;
            let y = t.conv1x1(xc, id, bc)?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn conv1x1_gradient_wrt_bias((r, ci, co) in (1usize..4, 1usize..4, 1usize..4), data in vals(4)) {
        let b = tensor(&[co], data[..co].to_vec());
        let (x, w) = (mix_weights(r * ci), mix_weights(ci * co));
        let err = grad_check(&b, EPS, |t, id| {
            let xc = t.constant(tensor(&[r, ci], x.clone()))?;
            let wc = t.constant(tensor(&[ci, co], w.clone()))?;
            let y = t.conv1x1(xc, wc, id)?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn concat_gradient_flows_to_each_part((r, c1, c2) in (1usize..4, 1usize..4, 1usize..4), data in vals(36)) {
        let x = tensor(&[r, c1], data[..r * c1].to_vec());
        let other = mix_weights(r * c2);
        let err = grad_check(&x, EPS, |t, id| {
            let oc = t.constant(tensor(&[r, c2], other.clone()))?;
            let y = t.concat(&[id, oc])?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "first part rel err {err}");
        let x2 = tensor(&[r, c2], data[..r * c2].to_vec());
        let first = mix_weights(r * c1);
        let err2 = grad_check(&x2, EPS, |t, id| {
            let fc = t.constant(tensor(&[r, c1], first.clone()))?;
            let y = t.concat(&[fc, id])?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err2 <= TOL, "second part rel err {err2}");
    }

    #[test]
    fn add_and_mul_gradients((r, c) in (1usize..4, 1usize..5), data in vals(20)) {
        let x = tensor(&[r, c], data[..r * c].to_vec());
        let other = mix_weights(r * c);
        for op in 0..2usize {
            let other = other.clone();
            let err = grad_check(&x, EPS, move |t, id| {
                let oc = t.constant(tensor(&[r, c], other.clone()))?;
                let y = if op == 0 { t.add(id, oc)? } else { t.mul(id, oc)? };
                scalarize(t, y)
            }).unwrap();
            prop_assert!(err <= TOL, "op {op} rel err {err}");
        }
    }

    #[test]
    fn add_bias_gradient_wrt_both((r, c) in (1usize..4, 1usize..5), data in vals(20)) {
        let x = tensor(&[r, c], data[..r * c].to_vec());
        let b = mix_weights(c);
        let err = grad_check(&x, EPS, |t, id| {
            let bc = t.constant(tensor(&[c], b.clone()))?;
            let y = t.add_bias(id, bc)?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "input rel err {err}");
        let bias = tensor(&[c], data[..c].to_vec());
        let xc = mix_weights(r * c);
        let err2 = grad_check(&bias, EPS, |t, id| {
            let x0 = t.constant(tensor(&[r, c], xc.clone()))?;
            let y = t.add_bias(x0, id)?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err2 <= TOL, "bias rel err {err2}");
    }

    #[test]
    fn scale_gradient((n, factor) in (1usize..6, -3.0..3.0f64), data in vals(6)) {
        let x = tensor(&[n], data[..n].to_vec());
        let err = grad_check(&x, EPS, move |t, id| {
            let y = t.scale(id, factor)?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn softmax_gradient((r, c) in (1usize..4, 1usize..5), data in vals(20)) {
        let x = tensor(&[r, c], data[..r * c].to_vec());
        let err = grad_check(&x, EPS, |t, id| {
            let y = t.softmax(id)?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn pointwise_nonlinearity_gradients((r, c) in (1usize..4, 1usize..5), data in vals(20)) {
        let raw = &data[..r * c];
        prop_assume!(raw.iter().all(|v| v.abs() > 0.05)); // relu kink margin
        let x = tensor(&[r, c], raw.to_vec());
        for op in 0..3usize {
            let err = grad_check(&x, EPS, move |t, id| {
                let y = match op {
                    0 => t.sigmoid(id)?,
                    1 => t.tanh(id)?,
                    _ => t.relu(id)?,
                };
                scalarize(t, y)
            }).unwrap();
            prop_assert!(err <= TOL, "op {op} rel err {err}");
        }
    }

    #[test]
    fn l2norm_gradient((r, c) in (1usize..4, 1usize..5), data in vals(20)) {
        let raw = &data[..r * c];
        let norms_ok = raw.chunks(c).all(|row| row.iter().map(|v| v * v).sum::<Real>().sqrt() > 0.1);
        prop_assume!(norms_ok);
        let x = tensor(&[r, c], raw.to_vec());
        let err = grad_check(&x, EPS, |t, id| {
            let y = t.l2norm(id)?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn sum_and_mean_gradients(n in 1usize..8, data in vals(8)) {
        let x = tensor(&[n], data[..n].to_vec());
        let err = grad_check(&x, EPS, |t, id| t.sum(id)).unwrap();
        prop_assert!(err <= TOL, "sum rel err {err}");
        let err2 = grad_check(&x, EPS, |t, id| t.mean(id)).unwrap();
        prop_assert!(err2 <= TOL, "mean rel err {err2}");
    }

    #[test]
    fn max_last_gradient_hits_the_argmax((r, c) in (1usize..4, 2usize..5), data in vals(20)) {
        let raw = &data[..r * c];
        prop_assume!(unique_rows(raw, c));
        let x = tensor(&[r, c], raw.to_vec());
        let err = grad_check(&x, EPS, |t, id| {
            let y = t.max_last(id)?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn gather_rows_gradient_accumulates_repeats(
        (r, c) in (2usize..5, 1usize..4),
        picks in prop::collection::vec(0usize..5, 1..6),
        data in vals(20),
    ) {
        let rows: Vec<usize> = picks.iter().map(|&p| p % r).collect();
        let x = tensor(&[r, c], data[..r * c].to_vec());
        let err = grad_check(&x, EPS, move |t, id| {
            let y = t.gather_rows(id, &rows)?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn permute_gradient((a, b, c) in (1usize..4, 1usize..4, 1usize..4), pidx in 0usize..6, data in vals(36)) {
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = PERMS[pidx];
        let x = tensor(&[a, b, c], data[..a * b * c].to_vec());
        let err = grad_check(&x, EPS, move |t, id| {
            let y = t.permute(id, &perm)?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "perm {perm:?} rel err {err}");
    }

    #[test]
    fn reshape_gradient_is_identity_on_the_buffer((r, c) in (1usize..5, 1usize..5), data in vals(20)) {
        let x = tensor(&[r, c], data[..r * c].to_vec());
        let err = grad_check(&x, EPS, move |t, id| {
            let y = t.reshape(id, &[r * c])?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn softmax_xent_gradient(
        (r, c) in (1usize..4, 2usize..5),
        picks in prop::collection::vec(0usize..5, 3),
        data in vals(20),
    ) {
        let targets: Vec<usize> = (0..r).map(|i| picks[i % picks.len()] % c).collect();
        let x = tensor(&[r, c], data[..r * c].to_vec());
        let err = grad_check(&x, EPS, move |t, id| t.softmax_xent(id, &targets)).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn broadcast_rows_gradient((c, reps) in (1usize..5, 1usize..5), data in vals(5)) {
        let x = tensor(&[1, c], data[..c].to_vec());
        let err = grad_check(&x, EPS, move |t, id| {
            let y = t.broadcast_rows(id, reps)?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn stack_rows_gradient_wrt_one_row((k, c) in (2usize..4, 1usize..4), data in vals(4)) {
        let x = tensor(&[c], data[..c].to_vec());
        let others: Vec<Vec<Real>> = (1..k).map(|i| mix_weights(c * (i + 1))[c * i..].to_vec()).collect();
        let err = grad_check(&x, EPS, move |t, id| {
            let mut rows = vec![id];
            for o in &others {
                rows.push(t.constant(tensor(&[c], o.clone()))?);
            }
            let y = t.stack_rows(&rows)?;
            scalarize(t, y)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn mean_scalars_gradient(k in 1usize..6, data in vals(6)) {
        let x = tensor(&[k, 1], data[..k].to_vec());
        let err = grad_check(&x, EPS, move |t, id| {
            let terms: Vec<TensorId> = (0..k)
                .map(|i| {
                    let row = t.gather_rows(id, &[i])?;
                    t.reshape(row, &[1])
                })
                .collect::<Result<_, _>>()?;
            t.mean_scalars(&terms)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn dot_gradient(n in 1usize..6, data in vals(6)) {
        let x = tensor(&[n], data[..n].to_vec());
        let w = mix_weights(n);
        let err = grad_check(&x, EPS, move |t, id| {
            let wc = t.constant(tensor(&[n], w.clone()))?;
            t.dot(id, wc)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }

    #[test]
    fn chained_ops_gradient((r, ci, co, cls) in (1usize..3, 1usize..4, 2usize..4, 2usize..4), data in vals(12)) {
        // conv -> tanh -> matmul -> cross-entropy, checking the backward
        // pass through a stack of different rules at once.
        let x = tensor(&[r, ci], data[..r * ci].to_vec());
        let (w1, b1, w2) = (mix_weights(ci * co), mix_weights(co), mix_weights(co * cls));
        let targets: Vec<usize> = (0..r).map(|i| i % cls).collect();
        let err = grad_check(&x, EPS, move |t, id| {
            let w1c = t.constant(tensor(&[ci, co], w1.clone()))?;
            let b1c = t.constant(tensor(&[co], b1.clone()))?;
            let h = t.conv1x1(id, w1c, b1c)?;
            let a = t.tanh(h)?;
            let w2c = t.constant(tensor(&[co, cls], w2.clone()))?;
            let logits = t.matmul(a, w2c)?;
            t.softmax_xent(logits, &targets)
        }).unwrap();
        prop_assert!(err <= TOL, "rel err {err}");
    }
}
