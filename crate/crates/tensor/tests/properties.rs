use itermvs_tensor::{Tape, Tensor};
use proptest::prelude::*;

fn nested_conv(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    wt: &[f64],
    (o, k): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += wt[((oc * c + ic) * k + ky) * k + kx]
                                    * x[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn softmax_is_a_distribution(
        logits in prop::collection::vec(-30.0f32..30.0, 1..300),
    ) {
        let n = logits.len();
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([n], logits).unwrap());
        let y = tape.value(tape.softmax(x, 0).unwrap());
        let sum: f64 = y.data().iter().map(|&v| v as f64).sum();
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        prop_assert!((sum - 1.0).abs() < 1e-6, "sum {}", sum);
    }

    #[test]
    fn conv_equals_nested_loops_up_to_8x8x8(
        c in 1usize..=8, o in 1usize..=8, h in 3usize..=8, w in 3usize..=8,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..=2,
        seed in any::<u64>(),
    ) {
        let pad = (k - 1) / 2;
        let mut s = seed | 1;
        let mut rnd = move || {
            s ^= s << 13; s ^= s >> 7; s ^= s << 17;
            (s % 2000) as f64 / 1000.0 - 1.0
        };
        let x: Vec<f64> = (0..c * h * w).map(|_| rnd()).collect();
        let wt: Vec<f64> = (0..o * c * k * k).map(|_| rnd()).collect();
        let tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new([1, c, h, w], x.clone()).unwrap());
        let wv = tape.constant(Tensor::new([o, c, k, k], wt.clone()).unwrap());
        let y = tape.value(tape.conv2d(xv, wv, None, stride, pad).unwrap());
        let expect = nested_conv(&x, (c, h, w), &wt, (o, k), stride, pad);
        prop_assert_eq!(y.numel(), expect.len());
        for (a, b) in y.data().iter().zip(&expect) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
