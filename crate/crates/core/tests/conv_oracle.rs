use masnn::kernels::ConvGeometry;
use masnn::snn_core::{conv_feature, BnMode, ConvLayerParams};
use masnn::tensor::Tensor;
use proptest::prelude::*;

/// Direct convolution with zero padding, then non-overlapping average pooling.
fn oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize, pool: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, ci, h, wd) = x.dims4().unwrap();
    let (co, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let at = |b: usize, c: usize, y: isize, z: isize| -> f64 {
        if y < 0 || z < 0 || y >= h as isize || z >= wd as isize {
            0.0
        } else {
            x.data()[((b * ci + c) * h + y as usize) * wd + z as usize]
        }
    };
    let mut conv = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for z in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let yy = (y * stride + i) as isize - pad as isize;
                                let zz = (z * stride + j) as isize - pad as isize;
                                acc += w.data()[((o * ci + c) * kh + i) * kw + j] * at(b, c, yy, zz);
                            }
                        }
                    }
                    conv[((b * co + o) * oh + y) * ow + z] = acc;
                }
            }
        }
    }
    let (ph, pw) = (oh / pool, ow / pool);
    let mut out = vec![0.0; n * co * ph * pw];
    for bc in 0..n * co {
        for y in 0..ph {
            for z in 0..pw {
                let mut s = 0.0;
                for i in 0..pool {
                    for j in 0..pool {
                        s += conv[(bc * oh + y * pool + i) * ow + z * pool + j];
                    }
                }
                out[(bc * ph + y) * pw + z] = s / (pool * pool) as f64;
            }
        }
    }
    (vec![n, co, ph, pw], out)
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1e-12))
}

#[test]
fn three_by_three_on_four_by_four() {
    let x = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
    let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0, 0.0, -1.0, 2.0, 0.0, -2.0, 1.0, 0.0, -1.0]).unwrap();
    let p = ConvLayerParams::new(w.clone(), ConvGeometry { stride: 1, padding: 0 }, 1).unwrap();
    let got = conv_feature(&x, &p, BnMode::Off).unwrap();
    assert_eq!(got.shape(), &[1, 1, 2, 2]);
    // Horizontal Sobel on a ramp with unit x-slope: -2 * (1 + 2 + 1).
    assert_eq!(got.data(), &[-8.0; 4]);
    assert_eq!(oracle(&x, &w, 1, 0, 1).1, got.data());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn conv_feature_matches_nested_loops(n in 1usize..3, ci in 1usize..4, co in 1usize..4,
                                         h in 3usize..8, w in 3usize..8, k in 1usize..4,
                                         stride in 1usize..3, pad in 0usize..2, pool in 1usize..3,
                                         seed in any::<u64>()) {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        prop_assume!(oh >= pool && ow >= pool);
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let x = Tensor::from_vec(&[n, ci, h, w], (0..n * ci * h * w).map(|_| next()).collect()).unwrap();
        let wt = Tensor::from_vec(&[co, ci, k, k], (0..co * ci * k * k).map(|_| next()).collect()).unwrap();
        let p = ConvLayerParams::new(wt.clone(), ConvGeometry { stride, padding: pad }, pool).unwrap();
        let got = conv_feature(&x, &p, BnMode::Off).unwrap();
        let (shape, want) = oracle(&x, &wt, stride, pad, pool);
        prop_assert_eq!(got.shape(), &shape[..]);
        prop_assert!(close(got.data(), &want));
    }
}
