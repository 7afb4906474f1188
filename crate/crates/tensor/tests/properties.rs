use proptest::prelude::*;
use tokenmotion_tensor::{Rng, Tape, Tensor};

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        logits in prop::collection::vec(-700.0f64..700.0, 12),
        axis in 0usize..2,
    ) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], logits).unwrap());
        let y = x.softmax(axis).unwrap().value();
        let (outer, len, inner) = if axis == 0 { (1, 3, 4) } else { (3, 4, 1) };
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|l| y.data()[(o * len + l) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!((0..len).all(|l| y.data()[(o * len + l) * inner + i] >= 0.0));
            }
        }
    }

    #[test]
    fn causal_conv3d_output_ignores_later_frames(
        seed in 0u64..1000,
        stride in 1usize..4,
        kt in 1usize..5,
        t_out in 1usize..4,
        tau in 0usize..4,
    ) {
        let tau = tau % t_out;
        let frames = stride * t_out;
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor(&[2, frames, 2, 3], 1.0);
        let w = rng.normal_tensor(&[2, 2, kt, 1, 1], 1.0);
        let run = |x: &Tensor| {
            let tape = Tape::new();
            let (x, w) = (tape.constant(x.clone()), tape.constant(w.clone()));
            x.causal_conv3d(&w, None, stride).unwrap().value()
        };
        let base = run(&x);
        let mut perturbed = x.clone();
        let plane = 6;
        for c in 0..2 {
            for t in ((tau + 1) * stride)..frames {
                for s in 0..plane {
                    perturbed.data_mut()[(c * frames + t) * plane + s] += rng.normal();
                }
            }
        }
        let out = run(&perturbed);
        for o in 0..2 {
            for step in 0..=tau {
                for s in 0..plane {
                    let i = (o * t_out + step) * plane + s;
                    prop_assert_eq!(base.data()[i].to_bits(), out.data()[i].to_bits());
                }
            }
        }
    }

    #[test]
    fn ten1_roundtrip(dims in prop::collection::vec(1usize..4, 1..4), seed in 0u64..100) {
        let t = Rng::new(seed).normal_tensor(&dims, 3.0);
        let mut buf = Vec::new();
        t.write_ten1(&mut buf).unwrap();
        prop_assert_eq!(buf.len(), 8 + 8 * dims.len() + 8 * t.numel());
        prop_assert_eq!(Tensor::read_ten1(&buf[..]).unwrap(), t);
    }
}

#[test]
fn identical_seeds_give_identical_values_and_gradients() {
    let run = || {
        let mut rng = Rng::stream(99, "det");
        let tape = Tape::new();
        let a = tape.param(rng.normal_tensor(&[6, 5], 1.0));
        let b = tape.param(rng.normal_tensor(&[5, 4], 1.0));
        let y = a
            .matmul(&b)
            .unwrap()
            .softmax(1)
            .unwrap()
            .normalize(1e-5)
            .unwrap();
        let loss = y.mul(&y).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        (
            loss.value().checksum(),
            g.get(a).unwrap().checksum(),
            g.get(b).unwrap().checksum(),
        )
    };
    assert_eq!(run(), run());
}
