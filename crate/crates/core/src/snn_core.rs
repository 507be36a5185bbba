//! LIF neuron dynamics, the convolutional feature extractor, and the
//! surrogate derivative used in place of the Heaviside derivative.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    pub u_th: f64,
    pub v_reset: f64,
    /// Leak factor `exp(-dt / tau)`.
    pub beta: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            u_th: 0.5,
            v_reset: 0.0,
            beta: 0.25,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::config(format!("beta must lie in (0,1), got {}", self.beta)));
        }
        if !(self.u_th > 0.0) {
            return Err(Error::config(format!("u_th must be positive, got {}", self.u_th)));
        }
        if !self.v_reset.is_finite() {
            return Err(Error::config("v_reset must be finite"));
        }
        Ok(())
    }
}

/// Heaviside firing rule; fires at equality.
#[inline]
pub fn fire(u: f64, u_th: f64) -> f64 {
    if u - u_th >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Hard reset: `v_reset * s + (beta * u) * (1 - s)`.
#[inline]
pub fn reset(u: f64, s: f64, p: &LifParams) -> f64 {
    p.v_reset * s + (p.beta * u) * (1.0 - s)
}

/// Output of one LIF update.
#[derive(Clone, Debug, PartialEq)]
pub struct LifStep {
    pub spikes: Tensor,
    pub state: Tensor,
    pub membrane: Tensor,
}

/// One LIF update over a whole tensor: integrate, fire, reset.
pub fn lif_step(x: &Tensor, h_prev: &Tensor, p: &LifParams) -> Result<LifStep> {
    let membrane = h_prev.zip_map(x, |h, x| h + x)?;
    let spikes = membrane.map(|u| fire(u, p.u_th));
    let state = membrane.zip_map(&spikes, |u, s| reset(u, s, p))?;
    Ok(LifStep {
        spikes,
        state,
        membrane,
    })
}

/// Run `lif_step` over a step-major sequence `[T][...]` starting from rest.
pub fn lif_sequence(xs: &[Tensor], p: &LifParams) -> Result<Vec<LifStep>> {
    let mut out = Vec::with_capacity(xs.len());
    let mut h = match xs.first() {
        Some(x) => Tensor::zeros(x.shape()),
        None => return Ok(out),
    };
    for x in xs {
        let step = lif_step(x, &h, p)?;
        h = step.state.clone();
        out.push(step);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurrogateKind {
    Rectangular,
    Triangular,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateParams {
    pub kind: SurrogateKind,
    /// Half-width of the support window.
    pub a: f64,
}

impl SurrogateParams {
    /// Rectangular window with `a = u_th / 2`.
    pub fn default_for(lif: &LifParams) -> Self {
        SurrogateParams {
            kind: SurrogateKind::Rectangular,
            a: 0.5 * lif.u_th,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) {
            return Err(Error::config(format!("surrogate width must be positive, got {}", self.a)));
        }
        Ok(())
    }

    /// Surrogate derivative at offset `d = u - u_th`.
    #[inline]
    pub fn derivative(&self, d: f64) -> f64 {
        let a = self.a;
        match self.kind {
            SurrogateKind::Rectangular => {
                if d.abs() < a {
                    1.0 / (2.0 * a)
                } else {
                    0.0
                }
            }
            SurrogateKind::Triangular => (1.0 - d.abs() / a).max(0.0) / a,
        }
    }

    /// Antiderivative of the surrogate, rising from 0 to 1 across the
    /// window. Used as the differentiable stand-in for the spike function.
    #[inline]
    pub fn integral(&self, d: f64) -> f64 {
        let a = self.a;
        if d <= -a {
            return 0.0;
        }
        if d >= a {
            return 1.0;
        }
        match self.kind {
            SurrogateKind::Rectangular => (d + a) / (2.0 * a),
            SurrogateKind::Triangular => {
                let z = d / a;
                if z < 0.0 {
                    0.5 * (1.0 + z) * (1.0 + z)
                } else {
                    1.0 - 0.5 * (1.0 - z) * (1.0 - z)
                }
            }
        }
    }
}

/// Surrogate gradient of the spike nonlinearity at membrane potential `u`.
pub fn surrogate_grad(u: f64, lif: &LifParams, sg: &SurrogateParams) -> f64 {
    sg.derivative(u - lif.u_th)
}

/// Per-channel affine normalization with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// Weight of the previous running statistic in the exponential average.
pub const BN_MOMENTUM: f64 = 0.9;

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            scale: Tensor::filled(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }

    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let rm = self.running_mean.data_mut();
        for (r, m) in rm.iter_mut().zip(mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        let rv = self.running_var.data_mut();
        for (r, v) in rv.iter_mut().zip(var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}

/// How batch normalization behaves in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with statistics of the current batch.
    Batch,
    /// Normalize with the running statistics.
    Running,
    /// Skip normalization entirely (identity).
    Off,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerParams {
    /// `[c_out][c_in][k_h][k_w]`
    pub weight: Tensor,
    pub geometry: ConvGeometry,
    pub bn: BatchNormParams,
    pub pool: usize,
}

impl ConvLayerParams {
    pub fn new(weight: Tensor, geometry: ConvGeometry, pool: usize) -> Result<Self> {
        let (co, _, kh, kw) = weight.dims4()?;
        if kh == 0 || kw == 0 {
            return Err(Error::shape("kernel dims must be at least 1"));
        }
        if pool == 0 {
            return Err(Error::shape("pool window must be at least 1"));
        }
        Ok(ConvLayerParams {
            weight,
            geometry,
            bn: BatchNormParams::identity(co),
            pool,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    /// Output `(C, H, W)` for an `h × w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let (kh, kw) = self.kernel();
        let ho = self.geometry.output_len(h, kh)?;
        let wo = self.geometry.output_len(w, kw)?;
        if self.pool > ho || self.pool > wo {
            return Err(Error::shape(format!(
                "pool window {} larger than feature map {}x{}",
                self.pool, ho, wo
            )));
        }
        Ok((self.out_channels(), ho / self.pool, wo / self.pool))
    }
}

/// `AvgPool(BN(Conv(W, input)))` for a batch of images `[N][C][H][W]`.
///
/// In `BnMode::Batch` the running statistics are not touched; callers that
/// train update them explicitly.
pub fn conv_feature(input: &Tensor, p: &ConvLayerParams, bn: BnMode) -> Result<Tensor> {
    let (_, c, _, _) = input.dims4()?;
    if c != p.in_channels() {
        return Err(Error::shape(format!(
            "layer expects {} input channels, got {}",
            p.in_channels(),
            c
        )));
    }
    let conv = kernels::conv2d(input, &p.weight, p.geometry)?;
    let normed = match bn {
        BnMode::Off => conv,
        BnMode::Running => kernels::batch_norm_apply(
            &conv,
            p.bn.running_mean.data(),
            p.bn.running_var.data(),
            p.bn.scale.data(),
            p.bn.shift.data(),
        )?,
        BnMode::Batch => {
            let (mean, var) = kernels::channel_stats(&conv)?;
            kernels::batch_norm_apply(&conv, &mean, &var, p.bn.scale.data(), p.bn.shift.data())?
        }
    };
    kernels::avg_pool(&normed, p.pool)
}
