//! Temporal, channel and spatial attention over spiking layers.
//!
//! Every gate is a sigmoid image, so refining a tensor with it can only
//! shrink magnitudes. The gates are built on the tape (so they train with
//! the rest of the network); the free functions [`ta_weights`],
//! [`ca_weights`] and [`sa_weights`] evaluate the same graphs on constants.
//!
//! Insertion points:
//!
//! * `ConvPre` gates the layer input before the convolution;
//! * `ConvPost` gates the spatial feature `X` before integration;
//! * `ActivatePre` gates the integrated membrane potential `U`.
//!
//! Temporal attention needs the whole `[T]` block of a layer, so a layer
//! with TA cannot run in strict single-step streaming mode; TA is skipped
//! when `T = 1`. Channel then spatial order is fixed whenever both act at
//! the same location.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{PoolKind, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::params::{self, Binder, ParamKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dimension {
    Temporal,
    Channel,
    Spatial,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Temporal, Dimension::Channel, Dimension::Spatial];

    pub fn short(self) -> &'static str {
        match self {
            Dimension::Temporal => "TA",
            Dimension::Channel => "CA",
            Dimension::Spatial => "SA",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Location {
    ConvPre,
    ConvPost,
    ActivatePre,
}

impl Location {
    pub const ALL: [Location; 3] = [Location::ConvPre, Location::ConvPost, Location::ActivatePre];
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Location::ConvPre => "conv-pre",
            Location::ConvPost => "conv-post",
            Location::ActivatePre => "activate-pre",
        })
    }
}

impl FromStr for Location {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "conv-pre" => Ok(Location::ConvPre),
            "conv-post" => Ok(Location::ConvPost),
            "activate-pre" => Ok(Location::ActivatePre),
            other => Err(Error::config(format!("unknown attention location '{}'", other))),
        }
    }
}

/// Which tensor a gate reads and refines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operand {
    /// Layer input `S^{t,n-1}` (frames for the encoder layer).
    LayerInput,
    /// Spatial feature `X^{t,n}` after conv/BN/pool.
    SpatialFeature,
    /// Integrated membrane potential `U^{t,n}`.
    MembranePotential,
}

/// Where a gate is wired into a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hook {
    pub dimension: Dimension,
    pub location: Location,
    pub operand: Operand,
}

/// Resolve the hook for one dimension at one location. Temporal attention
/// cannot act on membrane potentials that already mixed past steps.
pub fn place_attention(location: Location, dimension: Dimension) -> Result<Hook> {
    let operand = match location {
        Location::ConvPre => Operand::LayerInput,
        Location::ConvPost => Operand::SpatialFeature,
        Location::ActivatePre => Operand::MembranePotential,
    };
    if dimension == Dimension::Temporal && location == Location::ActivatePre {
        return Err(Error::config(
            "temporal attention cannot be placed at activate-pre: it would recalibrate state that has already been integrated",
        ));
    }
    Ok(Hook {
        dimension,
        location,
        operand,
    })
}

pub fn default_location(dimension: Dimension) -> Location {
    match dimension {
        Dimension::Temporal => Location::ConvPost,
        Dimension::Channel | Dimension::Spatial => Location::ActivatePre,
    }
}

/// How gate values are produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    Learned,
    /// Every gate outputs this constant; `Pinned(1.0)` recovers the
    /// vanilla layer exactly.
    Pinned(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub temporal: Option<Location>,
    pub channel: Option<Location>,
    pub spatial: Option<Location>,
    pub r_t: usize,
    pub r_c: usize,
    pub sa_kernel: usize,
    pub gate_mode: GateMode,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig::none()
    }
}

impl AttentionConfig {
    pub fn none() -> Self {
        AttentionConfig {
            temporal: None,
            channel: None,
            spatial: None,
            r_t: 2,
            r_c: 4,
            sa_kernel: 7,
            gate_mode: GateMode::Learned,
        }
    }

    /// Enable the named dimensions (any of `T`, `C`, `S`, e.g. `"TCS"`, or
    /// the ablation row labels such as `"TCSA"`, `"CSA"`, `"none"`) at their
    /// default locations.
    pub fn from_combo(combo: &str) -> Result<Self> {
        let mut cfg = AttentionConfig::none();
        let c = combo.trim().to_ascii_uppercase();
        if c == "NONE" || c == "VANILLA" || c.is_empty() {
            return Ok(cfg);
        }
        let body = c.strip_suffix('A').unwrap_or(&c);
        for ch in body.chars() {
            let dim = match ch {
                'T' => Dimension::Temporal,
                'C' => Dimension::Channel,
                'S' => Dimension::Spatial,
                _ => return Err(Error::config(format!("unknown attention combination '{}'", combo))),
            };
            cfg.set(dim, Some(default_location(dim)))?;
        }
        Ok(cfg)
    }

    pub fn location(&self, dim: Dimension) -> Option<Location> {
        match dim {
            Dimension::Temporal => self.temporal,
            Dimension::Channel => self.channel,
            Dimension::Spatial => self.spatial,
        }
    }

    pub fn set(&mut self, dim: Dimension, location: Option<Location>) -> Result<()> {
        if let Some(loc) = location {
            place_attention(loc, dim)?;
        }
        match dim {
            Dimension::Temporal => self.temporal = location,
            Dimension::Channel => self.channel = location,
            Dimension::Spatial => self.spatial = location,
        }
        Ok(())
    }

    pub fn is_enabled(&self) -> bool {
        Dimension::ALL.iter().any(|&d| self.location(d).is_some())
    }

    /// Short label in ablation-row style, e.g. `TCSA`, `CA`, `none`.
    pub fn label(&self) -> String {
        let mut s = String::new();
        if self.temporal.is_some() {
            s.push('T');
        }
        if self.channel.is_some() {
            s.push('C');
        }
        if self.spatial.is_some() {
            s.push('S');
        }
        if s.is_empty() {
            "none".into()
        } else {
            s.push('A');
            s
        }
    }

    /// Hooks at a given location, in application order (T, C, S).
    pub fn hooks_at(&self, location: Location) -> Vec<Hook> {
        Dimension::ALL
            .iter()
            .filter(|&&d| self.location(d) == Some(location))
            .map(|&d| place_attention(location, d).expect("validated on set"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for d in Dimension::ALL {
            if let Some(loc) = self.location(d) {
                place_attention(loc, d)?;
            }
        }
        if self.r_t == 0 || self.r_c == 0 {
            return Err(Error::config("reduction factors must be positive"));
        }
        if self.sa_kernel % 2 == 0 {
            return Err(Error::config(format!("spatial kernel must be odd, got {}", self.sa_kernel)));
        }
        if let GateMode::Pinned(v) = self.gate_mode {
            if !v.is_finite() {
                return Err(Error::config("pinned gate value must be finite"));
            }
        }
        Ok(())
    }
}

/// Largest divisor of `dim` not exceeding `preferred` (at least 1).
pub fn resolve_reduction(dim: usize, preferred: usize) -> usize {
    (1..=preferred.max(1).min(dim.max(1)))
        .rev()
        .find(|r| dim % r == 0)
        .unwrap_or(1)
}

/// Shared two-layer MLP of a squeeze-and-excitation style gate:
/// `w0: [D/r][D]`, `w1: [D][D/r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGateParams {
    pub w0: Tensor,
    pub w1: Tensor,
}

pub type TaParams = MlpGateParams;
pub type CaParams = MlpGateParams;

impl MlpGateParams {
    pub fn zeros(dim: usize, reduction: usize) -> Result<Self> {
        let hidden = Self::hidden(dim, reduction)?;
        Ok(MlpGateParams {
            w0: Tensor::zeros(&[hidden, dim]),
            w1: Tensor::zeros(&[dim, hidden]),
        })
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let hidden = Self::hidden(dim, reduction)?;
        Ok(MlpGateParams {
            w0: params::kaiming(&[hidden, dim], rng),
            w1: params::kaiming(&[dim, hidden], rng),
        })
    }

    /// Scaled Haar-orthogonal weights.
    pub fn orthogonal<R: Rng + ?Sized>(
        dim: usize,
        reduction: usize,
        gain0: f64,
        gain1: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = Self::hidden(dim, reduction)?;
        Ok(MlpGateParams {
            w0: params::orthogonal(&[hidden, dim], gain0, rng),
            w1: params::orthogonal(&[dim, hidden], gain1, rng),
        })
    }

    fn hidden(dim: usize, reduction: usize) -> Result<usize> {
        if reduction == 0 || dim % reduction != 0 {
            return Err(Error::config(format!(
                "reduction factor {} must divide {}",
                reduction, dim
            )));
        }
        Ok(dim / reduction)
    }

    pub fn dim(&self) -> usize {
        self.w0.shape()[1]
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&format!("{}.w0", prefix), ParamKind::Trainable, &self.w0);
        f(&format!("{}.w1", prefix), ParamKind::Trainable, &self.w1);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&format!("{}.w0", prefix), ParamKind::Trainable, &mut self.w0);
        f(&format!("{}.w1", prefix), ParamKind::Trainable, &mut self.w1);
    }
}

/// Spatial gate kernel `[1][2][k][k]` over stacked avg/max channel maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SaParams {
    pub kernel: Tensor,
}

impl SaParams {
    pub fn zeros(k: usize) -> Self {
        SaParams {
            kernel: Tensor::zeros(&[1, 2, k, k]),
        }
    }

    pub fn random<R: Rng + ?Sized>(k: usize, std: f64, rng: &mut R) -> Self {
        SaParams {
            kernel: params::normal(&[1, 2, k, k], std, rng),
        }
    }

    pub fn size(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f(&format!("{}.kernel", prefix), ParamKind::Trainable, &self.kernel);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f(&format!("{}.kernel", prefix), ParamKind::Trainable, &mut self.kernel);
    }
}

fn mlp(tape: &mut Tape, x: Var, w0: Var, w1: Var) -> Result<Var> {
    let h = tape.linear(x, w0)?;
    let h = tape.relu(h);
    tape.linear(h, w1)
}

/// Temporal gate for a step-major batch `[T*B][C][H][W]`; returns `[T*B]`
/// (one weight per step per sample).
pub fn ta_gate(tape: &mut Tape, x: Var, steps: usize, w0: Var, w1: Var) -> Result<Var> {
    let n = tape.value(x).dims4()?.0;
    if steps == 0 || n % steps != 0 {
        return Err(Error::shape(format!("{} images do not split into {} steps", n, steps)));
    }
    if tape.value(w0).shape().get(1) != Some(&steps) {
        return Err(Error::shape(format!(
            "temporal MLP expects T = {:?}, got {}",
            tape.value(w0).shape().get(1),
            steps
        )));
    }
    let batch = n / steps;
    let mut paths = Vec::with_capacity(2);
    for kind in [PoolKind::Avg, PoolKind::Max] {
        let p = tape.pool_image(x, kind)?;
        let p = tape.reshape(p, &[steps, batch])?;
        let p = tape.transpose(p)?;
        paths.push(mlp(tape, p, w0, w1)?);
    }
    let z = tape.add(paths[0], paths[1])?;
    let g = tape.sigmoid(z);
    let g = tape.transpose(g)?;
    tape.reshape(g, &[n])
}

/// Channel gate for images `[N][C][H][W]`; returns `[N][C]`.
pub fn ca_gate(tape: &mut Tape, u: Var, w0: Var, w1: Var) -> Result<Var> {
    let c = tape.value(u).dims4()?.1;
    if tape.value(w0).shape().get(1) != Some(&c) {
        return Err(Error::shape(format!("channel MLP does not match {} channels", c)));
    }
    let avg = tape.pool_spatial(u, PoolKind::Avg)?;
    let max = tape.pool_spatial(u, PoolKind::Max)?;
    let a = mlp(tape, avg, w0, w1)?;
    let m = mlp(tape, max, w0, w1)?;
    let z = tape.add(a, m)?;
    Ok(tape.sigmoid(z))
}

/// Spatial gate for images `[N][C][H][W]`; returns `[N][1][H][W]`.
pub fn sa_gate(tape: &mut Tape, u: Var, kernel: Var) -> Result<Var> {
    let k = tape.value(kernel).shape()[2];
    let pooled = tape.pool_channels(u)?;
    let z = tape.conv2d(pooled, kernel, ConvGeometry::same(k))?;
    Ok(tape.sigmoid(z))
}

/// Temporal weights of one sample `X: [T][C][H][W]`.
pub fn ta_weights(x_all: &Tensor, p: &TaParams) -> Result<Vec<f64>> {
    let steps = x_all.dims4()?.0;
    let mut tape = Tape::new();
    let x = tape.constant(x_all.clone());
    let w0 = tape.constant(p.w0.clone());
    let w1 = tape.constant(p.w1.clone());
    let g = ta_gate(&mut tape, x, steps, w0, w1)?;
    Ok(tape.value(g).data().to_vec())
}

/// Channel weights of one membrane tensor `U: [C][H][W]`.
pub fn ca_weights(u: &Tensor, p: &CaParams) -> Result<Vec<f64>> {
    let u4 = as_batch(u)?;
    let mut tape = Tape::new();
    let x = tape.constant(u4);
    let w0 = tape.constant(p.w0.clone());
    let w1 = tape.constant(p.w1.clone());
    let g = ca_gate(&mut tape, x, w0, w1)?;
    Ok(tape.value(g).data().to_vec())
}

/// Spatial weights `[H][W]` of one membrane tensor `U: [C][H][W]`.
pub fn sa_weights(u: &Tensor, p: &SaParams) -> Result<Tensor> {
    let u4 = as_batch(u)?;
    let (_, _, h, w) = u4.dims4()?;
    let mut tape = Tape::new();
    let x = tape.constant(u4);
    let k = tape.constant(p.kernel.clone());
    let g = sa_gate(&mut tape, x, k)?;
    tape.value(g).clone().reshape(&[h, w])
}

fn as_batch(u: &Tensor) -> Result<Tensor> {
    let [c, h, w] = u.shape()[..] else {
        return Err(Error::shape(format!("expected [C][H][W], got {:?}", u.shape())));
    };
    u.clone().reshape(&[1, c, h, w])
}

/// Parameters of the gates one layer may use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerGates {
    pub ta: Option<TaParams>,
    pub ca: Option<CaParams>,
    pub sa: Option<SaParams>,
}

impl LayerGates {
    /// Allocate learned parameters for every enabled dimension. `steps` and
    /// `channels` are the sizes seen at each dimension's operand.
    pub fn init<R: Rng + ?Sized>(
        cfg: &AttentionConfig,
        steps: usize,
        channels_at: impl Fn(Location) -> usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut gates = LayerGates::default();
        if cfg.temporal.is_some() && steps > 1 {
            gates.ta = Some(MlpGateParams::random(steps, resolve_reduction(steps, cfg.r_t), rng)?);
        }
        if let Some(loc) = cfg.channel {
            let c = channels_at(loc);
            gates.ca = Some(MlpGateParams::random(c, resolve_reduction(c, cfg.r_c), rng)?);
        }
        if cfg.spatial.is_some() {
            let k = cfg.sa_kernel;
            gates.sa = Some(SaParams::random(k, (1.0 / (2 * k * k) as f64).sqrt(), rng));
        }
        Ok(gates)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        if let Some(p) = &self.ta {
            p.visit(&format!("{}.ta", prefix), f);
        }
        if let Some(p) = &self.ca {
            p.visit(&format!("{}.ca", prefix), f);
        }
        if let Some(p) = &self.sa {
            p.visit(&format!("{}.sa", prefix), f);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        if let Some(p) = &mut self.ta {
            p.visit_mut(&format!("{}.ta", prefix), f);
        }
        if let Some(p) = &mut self.ca {
            p.visit_mut(&format!("{}.ca", prefix), f);
        }
        if let Some(p) = &mut self.sa {
            p.visit_mut(&format!("{}.sa", prefix), f);
        }
    }
}

/// Applies one layer's gates on the tape.
pub struct GateApplier<'a> {
    pub cfg: &'a AttentionConfig,
    pub gates: &'a LayerGates,
    pub prefix: &'a str,
}

impl GateApplier<'_> {
    fn pinned(&self, tape: &mut Tape, shape: &[usize]) -> Option<Var> {
        match self.cfg.gate_mode {
            GateMode::Pinned(v) => Some(tape.constant(Tensor::filled(shape, v))),
            GateMode::Learned => None,
        }
    }

    /// Apply every stateless gate placed at `location` to a step-major
    /// batch `[T*B][C][H][W]` (used for `ConvPre` and `ConvPost`).
    pub fn apply_block(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        steps: usize,
        location: Location,
    ) -> Result<Var> {
        let mut x = x;
        for hook in self.cfg.hooks_at(location) {
            x = match hook.dimension {
                Dimension::Temporal => {
                    if steps <= 1 {
                        continue;
                    }
                    let g = self.temporal(tape, binder, x, steps)?;
                    tape.gate_image(x, g)?
                }
                Dimension::Channel | Dimension::Spatial => self.apply_one(tape, binder, x, hook.dimension)?,
            };
        }
        Ok(x)
    }

    /// Apply the channel and spatial gates placed at `ActivatePre` to one
    /// step's membrane potential `[B][C][H][W]`.
    pub fn apply_membrane(&self, tape: &mut Tape, binder: &mut Binder, u: Var) -> Result<Var> {
        let mut u = u;
        for hook in self.cfg.hooks_at(Location::ActivatePre) {
            u = self.apply_one(tape, binder, u, hook.dimension)?;
        }
        Ok(u)
    }

    fn temporal(&self, tape: &mut Tape, binder: &mut Binder, x: Var, steps: usize) -> Result<Var> {
        let n = tape.value(x).dims4()?.0;
        if let Some(g) = self.pinned(tape, &[n]) {
            return Ok(g);
        }
        let p = self
            .gates
            .ta
            .as_ref()
            .ok_or_else(|| Error::config(format!("{}: temporal gate has no parameters", self.prefix)))?;
        let w0 = binder.bind(tape, &format!("{}.ta.w0", self.prefix), &p.w0);
        let w1 = binder.bind(tape, &format!("{}.ta.w1", self.prefix), &p.w1);
        ta_gate(tape, x, steps, w0, w1)
    }

    fn apply_one(&self, tape: &mut Tape, binder: &mut Binder, x: Var, dim: Dimension) -> Result<Var> {
        let (n, c, h, w) = tape.value(x).dims4()?;
        match dim {
            Dimension::Channel => {
                let g = match self.pinned(tape, &[n, c]) {
                    Some(g) => g,
                    None => {
                        let p = self.gates.ca.as_ref().ok_or_else(|| {
                            Error::config(format!("{}: channel gate has no parameters", self.prefix))
                        })?;
                        let w0 = binder.bind(tape, &format!("{}.ca.w0", self.prefix), &p.w0);
                        let w1 = binder.bind(tape, &format!("{}.ca.w1", self.prefix), &p.w1);
                        ca_gate(tape, x, w0, w1)?
                    }
                };
                tape.gate_channel(x, g)
            }
            Dimension::Spatial => {
                let g = match self.pinned(tape, &[n, 1, h, w]) {
                    Some(g) => g,
                    None => {
                        let p = self.gates.sa.as_ref().ok_or_else(|| {
                            Error::config(format!("{}: spatial gate has no parameters", self.prefix))
                        })?;
                        let k = binder.bind(tape, &format!("{}.sa.kernel", self.prefix), &p.kernel);
                        sa_gate(tape, x, k)?
                    }
                };
                tape.gate_pixel(x, g)
            }
            Dimension::Temporal => unreachable!("temporal gates are applied per block"),
        }
    }
}

/// Gate values for one TCSA layer evaluation; `None` means "disabled",
/// which acts as the constant 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TcsaParams {
    pub ta: Option<TaParams>,
    pub ca: Option<CaParams>,
    pub sa: Option<SaParams>,
}

/// Membrane potentials of a TCSA layer given the spatial features of one
/// sample `X: [T][C][H][W]` and the temporal carry `H^{t-1}` entering each
/// step: `X_TA = g_t(X)·X`, `U_CA = g_c(H + X_TA)·(H + X_TA)`,
/// `U = g_s(U_CA)·U_CA`.
pub fn apply_tcsa(x_all: &Tensor, h_prev: &[Tensor], p: &TcsaParams) -> Result<Vec<Tensor>> {
    let (steps, c, h, w) = x_all.dims4()?;
    if h_prev.len() != steps {
        return Err(Error::shape(format!("{} carries for {} steps", h_prev.len(), steps)));
    }
    let ta = match &p.ta {
        Some(ta) if steps > 1 => ta_weights(x_all, ta)?,
        _ => vec![1.0; steps],
    };
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = x_all.slice_outer(t, 1)?.reshape(&[c, h, w])?.scale(ta[t]);
        let u = h_prev[t].zip_map(&x_t, |a, b| a + b)?;
        let u_ca = match &p.ca {
            Some(ca) => {
                let g = ca_weights(&u, ca)?;
                let mut v = u.clone();
                for (i, chunk) in v.data_mut().chunks_mut(h * w).enumerate() {
                    chunk.iter_mut().for_each(|e| *e *= g[i]);
                }
                v
            }
            None => u,
        };
        let u_sa = match &p.sa {
            Some(sa) => {
                let g = sa_weights(&u_ca, sa)?;
                let mut v = u_ca.clone();
                for chunk in v.data_mut().chunks_mut(h * w) {
                    chunk.iter_mut().zip(g.data()).for_each(|(e, gv)| *e *= gv);
                }
                v
            }
            None => u_ca,
        };
        out.push(u_sa);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        params::normal(shape, 1.0, rng)
    }

    #[test]
    fn ta_constant_input_gives_equal_weights() {
        let mut r = rng();
        let frame = random(&[1, 2, 3, 3], &mut r);
        let x = Tensor::concat_outer(&[&frame, &frame, &frame, &frame]).unwrap();
        // The T->T MLP sees step positions, so equal outputs for equal steps
        // need an output layer that treats positions alike.
        let mut p = MlpGateParams::random(4, 2, &mut r).unwrap();
        let row = p.w1.data()[..2].to_vec();
        for chunk in p.w1.data_mut().chunks_mut(2) {
            chunk.copy_from_slice(&row);
        }
        let g = ta_weights(&x, &p).unwrap();
        assert!(g.iter().all(|&v| v == g[0]));
    }

    #[test]
    fn zero_weights_give_half() {
        let mut r = rng();
        let x = random(&[4, 8, 3, 3], &mut r);
        let ta = ta_weights(&x, &MlpGateParams::zeros(4, 2).unwrap()).unwrap();
        assert!(ta.iter().all(|&v| v == 0.5));
        let u = random(&[8, 3, 3], &mut r);
        let ca = ca_weights(&u, &MlpGateParams::zeros(8, 4).unwrap()).unwrap();
        assert_eq!(ca.len(), 8);
        assert!(ca.iter().all(|&v| v == 0.5));
        let sa = sa_weights(&u, &SaParams::zeros(7)).unwrap();
        assert_eq!(sa.shape(), &[3, 3]);
        assert!(sa.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn ca_is_spatial_permutation_invariant() {
        let mut r = rng();
        let u = random(&[4, 2, 3], &mut r);
        let p = MlpGateParams::random(4, 2, &mut r).unwrap();
        // reverse the spatial positions of every channel
        let mut perm = u.clone();
        for chunk in perm.data_mut().chunks_mut(6) {
            chunk.reverse();
        }
        assert_eq!(ca_weights(&u, &p).unwrap(), ca_weights(&perm, &p).unwrap());
    }

    #[test]
    fn sa_is_channel_permutation_invariant() {
        let mut r = rng();
        let u = random(&[3, 4, 4], &mut r);
        let p = SaParams::random(3, 0.5, &mut r);
        let mut perm = Tensor::zeros(&[3, 4, 4]);
        for (dst, src) in [(0, 2), (1, 0), (2, 1)] {
            perm.data_mut()[dst * 16..(dst + 1) * 16].copy_from_slice(&u.data()[src * 16..(src + 1) * 16]);
        }
        let a = sa_weights(&u, &p).unwrap();
        let b = sa_weights(&perm, &p).unwrap();
        // the avg path sums in a different order
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tcsa_identity_gates() {
        let mut r = rng();
        let x = random(&[3, 2, 2, 2], &mut r);
        let h: Vec<Tensor> = (0..3).map(|_| random(&[2, 2, 2], &mut r)).collect();
        let u = apply_tcsa(&x, &h, &TcsaParams::default()).unwrap();
        for t in 0..3 {
            let want = h[t].zip_map(&x.slice_outer(t, 1).unwrap().reshape(&[2, 2, 2]).unwrap(), |a, b| a + b);
            assert_eq!(u[t], want.unwrap());
        }
    }

    #[test]
    fn tcsa_hand_example() {
        // T = C = H = W = 1, X = 2, H = 0, all gates 0.5 -> U = 0.25.
        // TA with T = 1 is skipped, so emulate its 0.5 by halving X.
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0 * 0.5]).unwrap();
        let p = TcsaParams {
            ta: None,
            ca: Some(MlpGateParams::zeros(1, 1).unwrap()),
            sa: Some(SaParams::zeros(1)),
        };
        let u = apply_tcsa(&x, &[Tensor::zeros(&[1, 1, 1])], &p).unwrap();
        assert_eq!(u[0].data(), &[0.25]);
    }

    #[test]
    fn tcsa_hand_example_with_temporal_gate() {
        // Two identical steps so TA is active; zero weights give 0.5 gates.
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![2.0, 2.0]).unwrap();
        let p = TcsaParams {
            ta: Some(MlpGateParams::zeros(2, 2).unwrap()),
            ca: Some(MlpGateParams::zeros(1, 1).unwrap()),
            sa: Some(SaParams::zeros(1)),
        };
        let zero = Tensor::zeros(&[1, 1, 1]);
        let u = apply_tcsa(&x, &[zero.clone(), zero], &p).unwrap();
        assert_eq!(u[0].data(), &[0.25]);
        assert_eq!(u[1].data(), &[0.25]);
    }

    #[test]
    fn tcsa_zero_input_is_zero() {
        let mut r = rng();
        let p = TcsaParams {
            ta: Some(MlpGateParams::random(2, 2, &mut r).unwrap()),
            ca: Some(MlpGateParams::random(4, 4, &mut r).unwrap()),
            sa: Some(SaParams::random(3, 0.3, &mut r)),
        };
        let zero = Tensor::zeros(&[4, 3, 3]);
        let u = apply_tcsa(&Tensor::zeros(&[2, 4, 3, 3]), &[zero.clone(), zero], &p).unwrap();
        assert!(u.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn placement_rules() {
        assert!(place_attention(Location::ActivatePre, Dimension::Temporal).is_err());
        let ca = place_attention(Location::ActivatePre, Dimension::Channel).unwrap();
        assert_eq!(ca.operand, Operand::MembranePotential);
        assert_eq!(ca.location, default_location(Dimension::Channel));
        let sa = place_attention(Location::ConvPre, Dimension::Spatial).unwrap();
        assert_eq!(sa.operand, Operand::LayerInput);
        assert_eq!(default_location(Dimension::Temporal), Location::ConvPost);
        assert_eq!(default_location(Dimension::Spatial), Location::ActivatePre);
    }

    #[test]
    fn combos_and_labels() {
        for combo in ["none", "TA", "CA", "SA", "TCA", "TSA", "CSA", "TCSA"] {
            assert_eq!(AttentionConfig::from_combo(combo).unwrap().label(), combo);
        }
        assert!(AttentionConfig::from_combo("XA").is_err());
        let mut cfg = AttentionConfig::none();
        assert!(cfg.set(Dimension::Temporal, Some(Location::ActivatePre)).is_err());
    }

    #[test]
    fn reduction_defaults() {
        assert_eq!(resolve_reduction(16, 2), 2);
        assert_eq!(resolve_reduction(8, 4), 4);
        assert_eq!(resolve_reduction(6, 4), 3);
        assert_eq!(resolve_reduction(5, 4), 1);
        assert_eq!(resolve_reduction(1, 2), 1);
    }

    #[test]
    fn even_spatial_kernel_is_rejected() {
        let cfg = AttentionConfig {
            sa_kernel: 4,
            ..AttentionConfig::from_combo("SA").unwrap()
        };
        assert!(cfg.validate().is_err());
    }
}
