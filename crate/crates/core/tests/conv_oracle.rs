//! Graph convolution against a direct nested-loop cross-correlation.

use proptest::prelude::*;
use tac_core::autodiff::{Graph, Tensor};
use tac_core::rng::SplitMix64;

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Tensor {
    let [n, c, h, wd] = x.shape()[..] else { unreachable!() };
    let [o, _, kh, kw] = w.shape()[..] else { unreachable!() };
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for f in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let (r, s) = ((i * stride + a) as isize - padding as isize, (j * stride + bb) as isize - padding as isize);
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ch) * h + r as usize) * wd + s as usize];
                                let wv = w.data()[((f * c + ch) * kh + a) * kw + bb];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * o + f) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_nested_loops(
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..8, w in 3usize..8, k in 1usize..4,
        stride in 1usize..3, padding in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(k <= h + 2 * padding && k <= w + 2 * padding);
        let mut rng = SplitMix64::new(seed);
        let x = Tensor::from_fn(&[n, c, h, w], |_| rng.uniform(-1.0, 1.0));
        let kern = Tensor::from_fn(&[o, c, k, k], |_| rng.uniform(-1.0, 1.0));
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(kern.clone()));
        let y = g.conv2d(xv, kv, stride, padding).unwrap();
        let expected = naive_conv(&x, &kern, stride, padding);
        prop_assert_eq!(g.value(y).shape(), expected.shape());
        prop_assert!(g.value(y).max_abs_diff(&expected) < 1e-12);
    }
}
