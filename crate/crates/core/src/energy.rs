//! FLOP ledger and energy model.
//!
//! Counting rules (also printed in the report header):
//!
//! * conv FLOPs = `k_h·k_w·c_in·c_out·h_out·w_out` with `h_out, w_out` the
//!   convolution output before pooling; fc FLOPs = `in·out`;
//! * the first (encoder) layer is MAC, every other conv/fc layer is AC;
//! * a spike entering a conv layer costs `k_h·k_w·c_out` ACs, entering an fc
//!   layer `out` ACs (boundary clipping ignored unless asked for);
//! * attention weight generation (`delta_mac1`): TA `4·T²/r_t` once per
//!   sample, CA `4·C²/r_c` per step, SA `2·k²·H·W` per step;
//! * attention refinement (`delta_mac2`): one multiply per gated element;
//! * pooling additions inside gates are reported as ACs but kept out of
//!   `ΔE`. BN and average pooling of the backbone are excluded.
//!
//! All totals cover one sample over all `T` steps.

use std::fmt::Write as _;

use crate::attention::{Dimension, Location};
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::tensor::Tensor;

/// Energy per operation in picojoules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyConstants {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyConstants {
    /// 32-bit float operations in 45 nm technology.
    fn default() -> Self {
        EnergyConstants { e_mac: 4.6, e_ac: 0.9 }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_mac > 0.0 && self.e_ac > 0.0) || !self.e_mac.is_finite() || !self.e_ac.is_finite() {
            return Err(Error::config("energy constants must be finite and positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Fc,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpClass {
    Mac,
    Ac,
}

/// Shape of one synaptic layer. An fc layer has `k = h = w = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub geometry: ConvGeometry,
    pub op_class: OpClass,
}

impl LayerDesc {
    pub fn conv(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: (usize, usize),
        input: (usize, usize),
        geometry: ConvGeometry,
        op_class: OpClass,
    ) -> Result<Self> {
        let h_out = geometry.output_len(input.0, k.0)?;
        let w_out = geometry.output_len(input.1, k.1)?;
        Ok(LayerDesc {
            name: name.to_string(),
            kind: LayerKind::Conv,
            c_in,
            c_out,
            k_h: k.0,
            k_w: k.1,
            h_in: input.0,
            w_in: input.1,
            h_out,
            w_out,
            geometry,
            op_class,
        })
    }

    pub fn fc(name: &str, inputs: usize, outputs: usize, op_class: OpClass) -> Self {
        LayerDesc {
            name: name.to_string(),
            kind: LayerKind::Fc,
            c_in: inputs,
            c_out: outputs,
            k_h: 1,
            k_w: 1,
            h_in: 1,
            w_in: 1,
            h_out: 1,
            w_out: 1,
            geometry: ConvGeometry { stride: 1, padding: 0 },
            op_class,
        }
    }

    /// Dense FLOPs of one step.
    pub fn flops(&self) -> f64 {
        (self.k_h * self.k_w * self.c_in * self.c_out * self.h_out * self.w_out) as f64
    }

    /// Accumulations triggered by one active input.
    pub fn fan_out(&self) -> usize {
        match self.kind {
            LayerKind::Fc => self.c_out,
            _ => self.k_h * self.k_w * self.c_out,
        }
    }

    pub fn input_numel(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }
}

/// One attention gate and the operand it refines.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDesc {
    pub name: String,
    pub dimension: Dimension,
    pub location: Location,
    /// Operand `[C][H][W]` of one step.
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Reduction factor (TA, CA) or kernel size (SA).
    pub reduction: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArchDescription {
    pub steps: usize,
    pub layers: Vec<LayerDesc>,
    pub gates: Vec<GateDesc>,
    /// Spiking neurons of one step (all LIF layers).
    pub neurons: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerFlops {
    pub name: String,
    pub kind: LayerKind,
    pub flops: f64,
    pub op_class: OpClass,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopProfile {
    pub layers: Vec<LayerFlops>,
    pub delta_mac1: f64,
    pub delta_mac2: f64,
    pub delta_ac: f64,
    /// Pooling additions inside the attention gates (informational).
    pub attention_pool_acs: f64,
}

impl FlopProfile {
    pub fn total(&self, class: OpClass, kind: Option<LayerKind>) -> f64 {
        self.layers
            .iter()
            .filter(|l| l.op_class == class && kind.is_none_or(|k| k == l.kind))
            .map(|l| l.flops)
            .sum()
    }

    pub fn scaled(&self, s: f64) -> FlopProfile {
        FlopProfile {
            layers: self
                .layers
                .iter()
                .map(|l| LayerFlops {
                    flops: l.flops * s,
                    ..l.clone()
                })
                .collect(),
            delta_mac1: self.delta_mac1 * s,
            delta_mac2: self.delta_mac2 * s,
            delta_ac: self.delta_ac * s,
            attention_pool_acs: self.attention_pool_acs * s,
        }
    }
}

/// Dense FLOP profile of one sample over all steps.
pub fn count_flops(arch: &ArchDescription) -> Result<FlopProfile> {
    if arch.steps == 0 {
        return Err(Error::shape("architecture has no time steps"));
    }
    let t = arch.steps as f64;
    let mut profile = FlopProfile::default();
    for l in &arch.layers {
        if l.c_in == 0 || l.c_out == 0 || l.k_h == 0 || l.k_w == 0 {
            return Err(Error::shape(format!("layer {} is underspecified", l.name)));
        }
        profile.layers.push(LayerFlops {
            name: l.name.clone(),
            kind: l.kind,
            flops: l.flops() * t,
            op_class: l.op_class,
        });
    }
    for g in &arch.gates {
        let (mac1, mac2, pool) = gate_ops(g, arch.steps)?;
        profile.delta_mac1 += mac1;
        profile.delta_mac2 += mac2;
        profile.attention_pool_acs += pool;
        profile.layers.push(LayerFlops {
            name: g.name.clone(),
            kind: LayerKind::Attention,
            flops: mac1 + mac2,
            op_class: OpClass::Mac,
        });
    }
    Ok(profile)
}

/// `(delta_mac1, delta_mac2, pooling ACs)` of one gate over all steps.
pub fn gate_ops(g: &GateDesc, steps: usize) -> Result<(f64, f64, f64)> {
    let t = steps as f64;
    let (c, h, w) = (g.c as f64, g.h as f64, g.w as f64);
    let elems = c * h * w;
    let refine = elems * t;
    Ok(match g.dimension {
        Dimension::Temporal => {
            if steps < 2 {
                return Ok((0.0, 0.0, 0.0));
            }
            check_reduction(g, steps)?;
            let gen = 2.0 * (t * t / g.reduction as f64 * 2.0);
            // avg and max over each step block
            (gen, refine, 2.0 * elems * t)
        }
        Dimension::Channel => {
            check_reduction(g, g.c)?;
            let gen = 2.0 * (c * c / g.reduction as f64 * 2.0) * t;
            (gen, refine, 2.0 * elems * t)
        }
        Dimension::Spatial => {
            let k = g.kernel as f64;
            (2.0 * k * k * h * w * t, refine, 2.0 * elems * t)
        }
    })
}

fn check_reduction(g: &GateDesc, dim: usize) -> Result<()> {
    if g.reduction == 0 || dim % g.reduction != 0 {
        return Err(Error::shape(format!(
            "gate {}: reduction {} does not divide {}",
            g.name, g.reduction, dim
        )));
    }
    Ok(())
}

/// `E_MAC·FL_1 + E_AC·Σ(other conv and fc FLOPs)` in pJ.
pub fn e_base(profile: &FlopProfile, k: &EnergyConstants) -> f64 {
    let mac: f64 = profile
        .layers
        .iter()
        .filter(|l| l.kind != LayerKind::Attention && l.op_class == OpClass::Mac)
        .map(|l| l.flops)
        .sum();
    let ac: f64 = profile
        .layers
        .iter()
        .filter(|l| l.kind != LayerKind::Attention && l.op_class == OpClass::Ac)
        .map(|l| l.flops)
        .sum();
    k.e_mac * mac + k.e_ac * ac
}

/// `ΔE = E_MAC·(ΔMAC1 + ΔMAC2) − E_AC·ΔAC` and `r_EE = E_Base/(E_Base + ΔE)`.
pub fn delta_e_and_r_ee(profile: &FlopProfile, k: &EnergyConstants) -> Result<(f64, f64)> {
    let base = e_base(profile, k);
    let delta = k.e_mac * (profile.delta_mac1 + profile.delta_mac2) - k.e_ac * profile.delta_ac;
    let att = base + delta;
    if !(att > 0.0) {
        return Err(Error::Nonphysical(format!(
            "attention energy E_Base + dE = {} + {} is not positive",
            base, delta
        )));
    }
    Ok((delta, base / att))
}

/// Spike counts summed over a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeRecord {
    pub steps: usize,
    /// Spiking neurons of one sample at one step.
    pub neurons: usize,
    pub samples: usize,
    /// Spikes at each step summed over neurons and samples.
    pub counts: Vec<u64>,
}

impl SpikeRecord {
    pub fn new(steps: usize, neurons: usize) -> Self {
        SpikeRecord {
            steps,
            neurons,
            samples: 0,
            counts: vec![0; steps],
        }
    }

    pub fn merge(&mut self, other: &SpikeRecord) -> Result<()> {
        if other.steps != self.steps || other.neurons != self.neurons {
            return Err(Error::shape("spike records of different networks"));
        }
        self.samples += other.samples;
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nasar {
    pub nsar: Vec<f64>,
    pub nasar: f64,
    /// Mean spikes per sample.
    pub spike_count: f64,
}

pub fn nasar(rec: &SpikeRecord) -> Result<Nasar> {
    if rec.steps == 0 || rec.neurons == 0 || rec.samples == 0 || rec.counts.len() != rec.steps {
        return Err(Error::shape("empty spike record"));
    }
    let cap = (rec.neurons * rec.samples) as f64;
    if rec.counts.iter().any(|&c| c as f64 > cap) {
        return Err(Error::shape("more spikes than neurons"));
    }
    let nsar: Vec<f64> = rec.counts.iter().map(|&c| c as f64 / cap).collect();
    // One division from the integer total keeps `nasar * neurons * steps`
    // within one ulp of `spike_count`.
    let spike_count = rec.total() as f64 / rec.samples as f64;
    let nasar = spike_count / (rec.neurons * rec.steps) as f64;
    Ok(Nasar {
        nsar,
        nasar,
        spike_count,
    })
}

/// Spike-driven accumulations of one layer: active inputs times fan-out.
pub fn spike_driven_acs(layer: &LayerDesc, input: &Tensor) -> u64 {
    let active = input.data().iter().filter(|&&v| v != 0.0).count() as u64;
    active * layer.fan_out() as u64
}

/// Reference counter walking every active input and every synapse it
/// drives. With `boundary_aware`, synapses whose output position falls
/// outside the map (or off the stride grid) are skipped. `input` is
/// `[N][c_in][h_in][w_in]` (conv) or `[N][in]` (fc).
pub fn brute_force_acs(layer: &LayerDesc, input: &Tensor, boundary_aware: bool) -> Result<u64> {
    let per = layer.input_numel();
    if per == 0 || input.numel() % per != 0 {
        return Err(Error::shape(format!(
            "layer {} expects inputs of {} elements",
            layer.name, per
        )));
    }
    let mut count = 0u64;
    for (idx, &v) in input.data().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        match layer.kind {
            LayerKind::Fc => {
                for _ in 0..layer.c_out {
                    count += 1;
                }
            }
            _ => {
                let within = idx % per;
                let y = (within / layer.w_in) % layer.h_in;
                let x = within % layer.w_in;
                for _oc in 0..layer.c_out {
                    for ky in 0..layer.k_h {
                        for kx in 0..layer.k_w {
                            if !boundary_aware || lands(layer, y, ky, layer.h_out) && lands(layer, x, kx, layer.w_out) {
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(count)
}

/// Whether input row `i` through kernel tap `k` reaches a valid output.
fn lands(layer: &LayerDesc, i: usize, k: usize, out_len: usize) -> bool {
    let s = layer.geometry.stride as isize;
    let num = i as isize + layer.geometry.padding as isize - k as isize;
    num >= 0 && num % s == 0 && ((num / s) as usize) < out_len
}

/// Inputs seen by the synaptic layers of a forward pass, in layer order.
/// Each tensor holds `samples` samples over all steps.
#[derive(Clone, Debug, Default)]
pub struct LayerInputs {
    pub samples: usize,
    pub inputs: Vec<(String, Tensor)>,
}

/// Replace the AC layers' dense FLOPs by measured spike-driven counts
/// (per sample, all steps). MAC layers and attention terms are kept.
pub fn measured_profile(dense: &FlopProfile, arch: &ArchDescription, seen: &LayerInputs) -> Result<FlopProfile> {
    if seen.samples == 0 {
        return Err(Error::shape("no samples recorded"));
    }
    let mut p = dense.clone();
    for lf in p.layers.iter_mut() {
        if lf.op_class != OpClass::Ac || lf.kind == LayerKind::Attention {
            continue;
        }
        let desc = arch
            .layers
            .iter()
            .find(|l| l.name == lf.name)
            .ok_or_else(|| Error::shape(format!("layer {} missing from description", lf.name)))?;
        let acs: u64 = seen
            .inputs
            .iter()
            .filter(|(n, _)| *n == lf.name)
            .map(|(_, t)| spike_driven_acs(desc, t))
            .sum();
        lf.flops = acs as f64 / seen.samples as f64;
    }
    Ok(p)
}

/// Profile of an attention run anchored on a vanilla run: the AC layers are
/// taken from the vanilla run (so `E_Base` is the vanilla cost) and
/// `delta_ac` is the drop of spike-driven ACs.
pub fn anchor_on_vanilla(vanilla: &FlopProfile, attention: &FlopProfile) -> FlopProfile {
    let ac = |p: &FlopProfile| p.total(OpClass::Ac, None);
    let mut p = vanilla.clone();
    p.layers.retain(|l| l.kind != LayerKind::Attention);
    p.layers
        .extend(attention.layers.iter().filter(|l| l.kind == LayerKind::Attention).cloned());
    p.delta_mac1 = attention.delta_mac1;
    p.delta_mac2 = attention.delta_mac2;
    p.attention_pool_acs = attention.attention_pool_acs;
    p.delta_ac = ac(vanilla) - ac(attention);
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub profile: FlopProfile,
    pub e_base: f64,
    pub e_att: f64,
    pub delta_e: f64,
    pub r_ee: f64,
    pub nasar: f64,
    pub nsar: Vec<f64>,
    pub spike_count: f64,
}

impl EnergyReport {
    pub fn build(profile: FlopProfile, spikes: &SpikeRecord, k: &EnergyConstants) -> Result<Self> {
        let base = e_base(&profile, k);
        let (delta_e, r_ee) = delta_e_and_r_ee(&profile, k)?;
        let n = nasar(spikes)?;
        Ok(EnergyReport {
            profile,
            e_base: base,
            e_att: base + delta_e,
            delta_e,
            r_ee,
            nasar: n.nasar,
            nsar: n.nsar,
            spike_count: n.spike_count,
        })
    }

    pub const RULES: &'static str = "\
# conv FLOPs = kh*kw*cin*cout*hout*wout; fc FLOPs = in*out; first layer MAC, others AC
# spike-driven ACs: conv kh*kw*cout per input spike, fc out per input spike
# dMAC1: TA 4*T^2/r_t per sample, CA 4*C^2/r_c per step, SA 2*k^2*H*W per step
# dMAC2: one multiply per gated element; gate pooling additions reported as ACs, excluded from dE
# totals are per sample over all time steps; energies in pJ";

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", Self::RULES);
        let _ = writeln!(s, "{:<24} {:<10} {:<4} {:>16}", "layer", "kind", "op", "flops");
        for l in &self.profile.layers {
            let _ = writeln!(
                s,
                "{:<24} {:<10} {:<4} {:>16.1}",
                l.name,
                format!("{:?}", l.kind).to_lowercase(),
                format!("{:?}", l.op_class).to_uppercase(),
                l.flops
            );
        }
        let rows = [
            ("delta_mac1", self.profile.delta_mac1),
            ("delta_mac2", self.profile.delta_mac2),
            ("delta_ac", self.profile.delta_ac),
            ("attention_pool_acs", self.profile.attention_pool_acs),
            ("e_base_pj", self.e_base),
            ("e_att_pj", self.e_att),
            ("delta_e_pj", self.delta_e),
            ("r_ee", self.r_ee),
            ("nasar", self.nasar),
            ("spike_count", self.spike_count),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{:<24} {:>16.6}", k, v);
        }
        let nsar: Vec<String> = self.nsar.iter().map(|v| format!("{:.4}", v)).collect();
        let _ = writeln!(s, "{:<24} {}", "nsar", nsar.join(" "));
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for l in &self.profile.layers {
            let _ = writeln!(s, "flops:{},{}", l.name, l.flops);
        }
        let rows = [
            ("delta_mac1", self.profile.delta_mac1),
            ("delta_mac2", self.profile.delta_mac2),
            ("delta_ac", self.profile.delta_ac),
            ("attention_pool_acs", self.profile.attention_pool_acs),
            ("e_base_pj", self.e_base),
            ("e_att_pj", self.e_att),
            ("delta_e_pj", self.delta_e),
            ("r_ee", self.r_ee),
            ("nasar", self.nasar),
            ("spike_count", self.spike_count),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{},{}", k, v);
        }
        for (t, v) in self.nsar.iter().enumerate() {
            let _ = writeln!(s, "nsar:{},{}", t, v);
        }
        s
    }
}
