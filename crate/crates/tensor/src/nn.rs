//! Layer primitives composed from tape ops.

use crate::error::{Result, TensorError};
use crate::tape::Var;

/// Layer normalization over the last dimension with affine `gamma`, `beta`.
pub fn layer_norm<'t>(x: &Var<'t>, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
    x.normalize(eps)?.channel_scale(gamma)?.bias_add(beta)
}

/// `x[L, in] @ w[in, out] (+ b[out])`
pub fn linear<'t>(x: &Var<'t>, w: &Var<'t>, b: Option<&Var<'t>>) -> Result<Var<'t>> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => y.bias_add(b),
        None => Ok(y),
    }
}

/// Single-head scaled dot-product attention `softmax(q k^T / sqrt(D)) v`.
pub fn attention<'t>(q: &Var<'t>, k: &Var<'t>, v: &Var<'t>) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(TensorError::Dimension(format!(
            "attention shapes q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    let scale = 1.0 / (qs[1] as f64).sqrt();
    q.matmul(&k.t()?)?.scale(scale)?.softmax(1)?.matmul(v)
}

/// Splits the feature axis into `heads` equal slices, attends per head and
/// concatenates the results.
pub fn multi_head_attention<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    heads: usize,
) -> Result<Var<'t>> {
    let d = q.shape()[1];
    if heads == 0 || d % heads != 0 || v.shape()[1] % heads != 0 {
        return Err(TensorError::Config(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    if heads == 1 {
        return attention(q, k, v);
    }
    let dh = d / heads;
    let dv = v.shape()[1] / heads;
    let outs = (0..heads)
        .map(|h| {
            attention(
                &q.narrow(1, h * dh, dh)?,
                &k.narrow(1, h * dh, dh)?,
                &v.narrow(1, h * dv, dv)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    q.tape().concat(&outs, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Tape, Tensor};

    #[test]
    fn single_key_returns_its_value() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::from_fn(&[3, 4], |i| i as f64 - 5.0));
        let k = tape.constant(Tensor::from_fn(&[1, 4], |i| i as f64));
        let v = tape.constant(Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 3.0]).unwrap());
        let out = attention(&q, &k, &v).unwrap().value();
        for row in out.data().chunks(4) {
            assert_eq!(row, &[0.5, -1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn dominant_key_selects_its_value() {
        let tape = Tape::new();
        // q along e0; one key scaled strongly along e0, the others orthogonal to q
        let q = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let k =
            tape.constant(Tensor::new(vec![3, 2], vec![0.0, 1.0, 60.0, 0.0, 0.0, -1.0]).unwrap());
        let v =
            tape.constant(Tensor::new(vec![3, 2], vec![1.0, 1.0, 7.0, -3.0, 2.0, 2.0]).unwrap());
        let out = attention(&q, &k, &v).unwrap().value();
        // direct evaluation: logits (0, 60/sqrt2, 0)
        let l = 60.0 / 2f64.sqrt();
        let z = 2.0 + l.exp();
        let w = [1.0 / z, l.exp() / z, 1.0 / z];
        let expect = [
            w[0] * 1.0 + w[1] * 7.0 + w[2] * 2.0,
            w[0] * 1.0 + w[1] * -3.0 + w[2] * 2.0,
        ];
        assert!((out.data()[0] - expect[0]).abs() < 1e-12);
        assert!((out.data()[1] - expect[1]).abs() < 1e-12);
        assert!((out.data()[0] - 7.0).abs() < 1e-15 * 1e4);
    }

    #[test]
    fn head_count_must_divide_width() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 6]));
        assert!(matches!(
            multi_head_attention(&x, &x, &x, 4),
            Err(TensorError::Config(_))
        ));
        assert_eq!(
            multi_head_attention(&x, &x, &x, 3).unwrap().shape(),
            vec![2, 6]
        );
    }
}
