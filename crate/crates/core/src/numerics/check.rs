//! Finite-difference verification harness for recorded programs.

use super::{NumericsError, Tape, Tensor, VarId};

/// Builds the program on a fresh tape, runs the backward pass, and returns the
/// scalar value plus one gradient tensor per watched input (zero where the
/// input does not reach the loss).
pub fn evaluate_with_gradients<F>(
    inputs: &[Tensor],
    build: F,
) -> Result<(f64, Vec<Tensor>), NumericsError>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId, NumericsError>,
{
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let out = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            grads
                .wrt(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();
    Ok((value, out))
}

/// |a − b| relative to max(1, |a|, |b|).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Central-difference check of a scalar program: every coordinate of every
/// input is perturbed by ±h and compared against the tape gradient. Returns
/// the maximum relative error over all coordinates.
pub fn finite_diff_check<F>(inputs: &[Tensor], h: f64, build: F) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId, NumericsError> + Copy,
{
    let (_, grads) = evaluate_with_gradients(inputs, build)?;
    let eval = |inputs: &[Tensor]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in grads.iter().enumerate() {
        for k in 0..work[ti].len() {
            let orig = work[ti].data()[k];
            work[ti].data_mut()[k] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[k] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[k] = orig;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[k], fd));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, standard_normal};
    use std::sync::Arc;

    fn random_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(
            shape,
            (0..len).map(|_| 0.9 * (standard_normal(rng).tanh())).collect(),
        )
        .unwrap()
    }

    #[test]
    fn quadratic_form_tight() {
        // f(x) = x A x^T with constant A
        let mut rng = rng_from_seed(1);
        let a = random_tensor(&mut rng, vec![4, 4]);
        let x = random_tensor(&mut rng, vec![1, 4]);
        let err = finite_diff_check(&[x], 1e-5, |tape, ids| {
            let a = tape.constant(a.clone());
            let ax = tape.matmul(ids[0], a)?;
            let q = tape.mul(ax, ids[0])?;
            tape.sum_all(q)
        })
        .unwrap();
        assert!(err < 1e-9, "relative error {err:e}");
    }

    #[test]
    fn constant_program_has_zero_gradients() {
        let x = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let (v, grads) = evaluate_with_gradients(&[x], |tape, _ids| {
            let c = tape.constant(Tensor::scalar(2.5));
            tape.sum_all(c)
        })
        .unwrap();
        assert_eq!(v, 2.5);
        assert_eq!(grads[0].data(), &[0.0, 0.0, 0.0]);
    }

    /// Every registered primitive, checked against central differences on
    /// random inputs in [-1, 1].
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(42);
        type Builder = Box<
            dyn Fn(&mut Tape, &[VarId]) -> Result<VarId, NumericsError>,
        >;
        let idx = Arc::new(vec![2usize, 0, 1, 2]);
        let dst = Arc::new(vec![1usize, 0, 1, 2]);
        let cases: Vec<(&str, Vec<Vec<usize>>, Builder)> = vec![
            ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, ids| {
                let s = t.add(ids[0], ids[1])?;
                t.sum_all(s)
            })),
            ("sub+mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, ids| {
                let d = t.sub(ids[0], ids[1])?;
                let m = t.mul(d, d)?;
                t.sum_all(m)
            })),
            ("scale+add_scalar", vec![vec![2, 2]], Box::new(|t, ids| {
                let s = t.scale(ids[0], -1.7)?;
                let s = t.add_scalar(s, 0.3)?;
                let m = t.mul(s, s)?;
                t.mean_all(m)
            })),
            ("matmul", vec![vec![2, 3], vec![3, 2]], Box::new(|t, ids| {
                let p = t.matmul(ids[0], ids[1])?;
                let sq = t.mul(p, p)?;
                t.sum_all(sq)
            })),
            ("add_row/mul_row", vec![vec![3, 2], vec![1, 2], vec![1, 2]], Box::new(|t, ids| {
                let a = t.add_row(ids[0], ids[1])?;
                let m = t.mul_row(a, ids[2])?;
                let sq = t.mul(m, m)?;
                t.sum_all(sq)
            })),
            ("mul_col", vec![vec![3, 2], vec![3, 1]], Box::new(|t, ids| {
                let m = t.mul_col(ids[0], ids[1])?;
                let sq = t.mul(m, m)?;
                t.sum_all(sq)
            })),
            ("leaky_relu", vec![vec![3, 3]], Box::new(|t, ids| {
                let r = t.leaky_relu(ids[0], 0.02)?;
                let sq = t.mul(r, r)?;
                t.sum_all(sq)
            })),
            ("exp", vec![vec![2, 2]], Box::new(|t, ids| {
                let e = t.exp(ids[0])?;
                t.sum_all(e)
            })),
            ("ln", vec![vec![2, 2]], Box::new(|t, ids| {
                // keep inputs positive: ln(2 + x)
                let s = t.add_scalar(ids[0], 2.0)?;
                let l = t.ln(s)?;
                t.sum_all(l)
            })),
            ("powf", vec![vec![2, 2]], Box::new(|t, ids| {
                let s = t.add_scalar(ids[0], 2.0)?;
                let p = t.powf(s, -0.5)?;
                t.sum_all(p)
            })),
            ("softmax_rows", vec![vec![2, 4], vec![2, 4]], Box::new(|t, ids| {
                let s = t.softmax_rows(ids[0])?;
                let w = t.mul(s, ids[1])?;
                t.sum_all(w)
            })),
            ("mean_all", vec![vec![3, 3]], Box::new(|t, ids| {
                let sq = t.mul(ids[0], ids[0])?;
                t.mean_all(sq)
            })),
            ("mean_rows", vec![vec![4, 3], vec![1, 3]], Box::new(|t, ids| {
                let m = t.mean_rows(ids[0])?;
                let w = t.mul(m, ids[1])?;
                let sq = t.mul(w, w)?;
                t.sum_all(sq)
            })),
            ("gather_rows", vec![vec![3, 2]], Box::new(move |t, ids| {
                let g = t.gather_rows(ids[0], idx.clone())?;
                let sq = t.mul(g, g)?;
                t.sum_all(sq)
            })),
            ("scatter_add_rows", vec![vec![4, 2]], Box::new(move |t, ids| {
                let s = t.scatter_add_rows(ids[0], dst.clone(), 3)?;
                let sq = t.mul(s, s)?;
                t.sum_all(sq)
            })),
            ("group_weighted_sum", vec![vec![3, 6], vec![3, 2]], Box::new(|t, ids| {
                let q = t.softmax_rows(ids[1])?;
                let y = t.group_weighted_sum(ids[0], q, 2)?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            })),
            ("rotate_points", vec![vec![1, 3], vec![4, 3]], Box::new(|t, ids| {
                let y = t.rotate_points(ids[0], ids[1])?;
                let sq = t.mul(y, y)?;
                let s = t.sum_all(sq)?;
                // asymmetric weighting so rotation actually matters
                let y2 = t.slice_cols(y, 0, 1)?;
                let s2 = t.sum_all(y2)?;
                t.add(s, s2)
            })),
            ("reshape+slice_cols", vec![vec![2, 6]], Box::new(|t, ids| {
                let r = t.reshape(ids[0], vec![3, 4])?;
                let s = t.slice_cols(r, 1, 2)?;
                let sq = t.mul(s, s)?;
                t.sum_all(sq)
            })),
            ("rotate_points_near_zero", vec![vec![1, 3], vec![3, 3]], Box::new(|t, ids| {
                let tiny = t.scale(ids[0], 1e-5)?;
                let y = t.rotate_points(tiny, ids[1])?;
                let w = t.slice_cols(y, 1, 2)?;
                t.sum_all(w)
            })),
        ];
        for (name, shapes, build) in cases {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| random_tensor(&mut rng, s.clone()))
                .collect();
            let err = finite_diff_check(&inputs, 1e-5, |t, ids| build(t, ids)).unwrap();
            assert!(err < 1e-5, "{name}: relative error {err:e}");
        }
    }
}
