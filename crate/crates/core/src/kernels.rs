//! Forward and backward kernels for the dense operators.
//!
//! Summation order in every kernel is fixed by the loop nest, so results are
//! bit-reproducible run to run.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn same(kernel: usize) -> Self {
        ConvGeometry {
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if kernel > padded || self.stride == 0 {
            return Err(Error::shape(format!(
                "kernel {} does not fit input {} (padding {})",
                kernel, input, self.padding
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

pub fn conv2d(input: &Tensor, weight: &Tensor, geo: ConvGeometry) -> Result<Tensor> {
    let (n, ci, h, w) = input.dims4()?;
    let (co, wci, kh, kw) = weight.dims4()?;
    if wci != ci {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {}",
            wci, ci
        )));
    }
    let ho = geo.output_len(h, kh)?;
    let wo = geo.output_len(w, kw)?;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let x = input.data();
    let wt = weight.data();
    let y = out.data_mut();
    let (s, p) = (geo.stride as isize, geo.padding as isize);
    for b in 0..n {
        for o in 0..co {
            let ybase = (b * co + o) * ho * wo;
            for c in 0..ci {
                let xbase = (b * ci + c) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((o * ci + c) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let yrow = ybase + oy * wo;
                            for ox in 0..wo {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                y[yrow + ox] += wv * x[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d` with respect to its input and weight.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geo: ConvGeometry,
    need_input_grad: bool,
) -> (Tensor, Tensor) {
    let (n, ci, h, w) = input.dims4().expect("conv input rank");
    let (co, _, kh, kw) = weight.dims4().expect("conv weight rank");
    let (_, _, ho, wo) = grad_out.dims4().expect("conv grad rank");
    let mut gx = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let x = input.data();
    let wt = weight.data();
    let gy = grad_out.data();
    let (s, p) = (geo.stride as isize, geo.padding as isize);
    {
        let gxd = gx.data_mut();
        for b in 0..n {
            for o in 0..co {
                let ybase = (b * co + o) * ho * wo;
                for c in 0..ci {
                    let xbase = (b * ci + c) * h * w;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = ((o * ci + c) * kh + ky) * kw + kx;
                            let wv = wt[widx];
                            let mut acc = 0.0;
                            for oy in 0..ho {
                                let iy = oy as isize * s + ky as isize - p;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + iy as usize * w;
                                let yrow = ybase + oy * wo;
                                for ox in 0..wo {
                                    let ix = ox as isize * s + kx as isize - p;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let g = gy[yrow + ox];
                                    acc += g * x[xrow + ix as usize];
                                    if need_input_grad {
                                        gxd[xrow + ix as usize] += g * wv;
                                    }
                                }
                            }
                            gw.data_mut()[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Non-overlapping average pooling with a square window.
pub fn avg_pool(input: &Tensor, window: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if window == 0 || window > h || window > w {
        return Err(Error::shape(format!(
            "pool window {} larger than feature map {}x{}",
            window, h, w
        )));
    }
    if window == 1 {
        return Ok(input.clone());
    }
    let (ho, wo) = (h / window, w / window);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let x = input.data();
    let inv = 1.0 / (window * window) as f64;
    let y = out.data_mut();
    for m in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for dy in 0..window {
                    let row = m * h * w + (oy * window + dy) * w + ox * window;
                    for dx in 0..window {
                        acc += x[row + dx];
                    }
                }
                y[(m * ho + oy) * wo + ox] = acc * inv;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(input_shape: &[usize], grad_out: &Tensor, window: usize) -> Tensor {
    if window == 1 {
        return grad_out.clone();
    }
    let (h, w) = (input_shape[2], input_shape[3]);
    let (_, _, ho, wo) = grad_out.dims4().expect("pool grad rank");
    let mut gx = Tensor::zeros(input_shape);
    let inv = 1.0 / (window * window) as f64;
    let maps = input_shape[0] * input_shape[1];
    let gy = grad_out.data();
    let g = gx.data_mut();
    for m in 0..maps {
        for oy in 0..ho {
            for ox in 0..wo {
                let v = gy[(m * ho + oy) * wo + ox] * inv;
                for dy in 0..window {
                    let row = m * h * w + (oy * window + dy) * w + ox * window;
                    for dx in 0..window {
                        g[row + dx] += v;
                    }
                }
            }
        }
    }
    gx
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel statistics over the `N`, `H`, `W` axes.
pub fn channel_stats(input: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = input.dims4()?;
    let x = input.data();
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            acc += x[base..base + hw].iter().sum::<f64>();
        }
        let m = acc / count;
        let mut sq = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            sq += x[base..base + hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    Ok((mean, var))
}

/// `y = scale * (x - mean) / sqrt(var + eps) + shift`, per channel.
pub fn batch_norm_apply(
    input: &Tensor,
    mean: &[f64],
    var: &[f64],
    scale: &[f64],
    shift: &[f64],
) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if [mean.len(), var.len(), scale.len(), shift.len()] != [c; 4] {
        return Err(Error::shape(format!("batch norm over {} channels", c)));
    }
    let hw = h * w;
    let mut out = input.clone();
    let y = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
            let base = (b * c + ch) * hw;
            for v in &mut y[base..base + hw] {
                *v = scale[ch] * ((*v - mean[ch]) * inv) + shift[ch];
            }
        }
    }
    Ok(out)
}

/// Backward of training-mode batch norm (statistics depend on the input).
/// Returns `(grad_input, grad_scale, grad_shift)`.
pub fn batch_norm_backward(
    input: &Tensor,
    mean: &[f64],
    var: &[f64],
    scale: &[f64],
    grad_out: &Tensor,
    batch_stats: bool,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = input.dims4().expect("bn input rank");
    let hw = h * w;
    let count = (n * hw) as f64;
    let x = input.data();
    let gy = grad_out.data();
    let mut gx = Tensor::zeros(input.shape());
    let mut gscale = vec![0.0; c];
    let mut gshift = vec![0.0; c];
    let gxd = gx.data_mut();
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
        let mut sum_g = 0.0;
        let mut sum_gxhat = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xhat = (x[i] - mean[ch]) * inv;
                sum_g += gy[i];
                sum_gxhat += gy[i] * xhat;
            }
        }
        gscale[ch] = sum_gxhat;
        gshift[ch] = sum_g;
        let k = scale[ch] * inv;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                gxd[i] = if batch_stats {
                    let xhat = (x[i] - mean[ch]) * inv;
                    k * (gy[i] - sum_g / count - xhat * sum_gxhat / count)
                } else {
                    k * gy[i]
                };
            }
        }
    }
    (gx, gscale, gshift)
}

/// `y = x · wᵀ` for `x: [N][in]`, `w: [out][in]`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, din) = x.dims2()?;
    let (dout, win) = w.dims2()?;
    if din != win {
        return Err(Error::shape(format!(
            "linear expects {} inputs, got {}",
            win, din
        )));
    }
    let mut out = Tensor::zeros(&[n, dout]);
    let (xd, wd) = (x.data(), w.data());
    let y = out.data_mut();
    for b in 0..n {
        let xr = &xd[b * din..(b + 1) * din];
        for o in 0..dout {
            let wr = &wd[o * din..(o + 1) * din];
            y[b * dout + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let (n, din) = x.dims2().expect("linear input rank");
    let (dout, _) = w.dims2().expect("linear weight rank");
    let (xd, wd, gy) = (x.data(), w.data(), grad_out.data());
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    {
        let g = gx.data_mut();
        for b in 0..n {
            for o in 0..dout {
                let go = gy[b * dout + o];
                if go == 0.0 {
                    continue;
                }
                for i in 0..din {
                    g[b * din + i] += go * wd[o * din + i];
                }
            }
        }
    }
    {
        let g = gw.data_mut();
        for b in 0..n {
            for o in 0..dout {
                let go = gy[b * dout + o];
                if go == 0.0 {
                    continue;
                }
                for i in 0..din {
                    g[o * din + i] += go * xd[b * din + i];
                }
            }
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_len_rejects_oversized_kernels() {
        let geo = ConvGeometry { stride: 1, padding: 0 };
        assert!(geo.output_len(2, 3).is_err());
        assert_eq!(geo.output_len(4, 3).unwrap(), 2);
        assert_eq!(ConvGeometry::same(3).output_len(4, 3).unwrap(), 4);
    }

    #[test]
    fn pool_window_larger_than_map_is_an_error() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(avg_pool(&x, 3).is_err());
    }

    #[test]
    fn pool_of_constant_is_constant() {
        let x = Tensor::filled(&[1, 2, 4, 4], 3.0);
        let y = avg_pool(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn batch_norm_normalizes() {
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (m, v) = channel_stats(&x).unwrap();
        assert_eq!(m, vec![2.5]);
        assert_eq!(v, vec![1.25]);
        let y = batch_norm_apply(&x, &m, &v, &[1.0], &[0.0]).unwrap();
        assert!(y.sum().abs() < 1e-12);
    }

    #[test]
    fn linear_matches_hand_product() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 3.0, -1.0]).unwrap();
        assert_eq!(linear(&x, &w).unwrap().data(), &[1.0, 1.0]);
    }
}
