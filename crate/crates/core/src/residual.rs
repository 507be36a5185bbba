//! Membrane-shortcut residual blocks and the two attention wirings.
//!
//! Inside a block the residual branch is
//! `LIF -> conv -> BN -> LIF -> conv -> BN`, and the shortcut carries the
//! membrane potential `U_in` unchanged. The last BN scale starts at `zeta`
//! so a fresh block is close to the identity. Downsampling blocks put a 1×1
//! strided conv + BN on the shortcut; it reads the block's first spikes
//! (so it stays spike driven) rather than the raw potential.
//!
//! Attention acts on the branch output `U_Ori`:
//!
//! * `V1`: `U_out = SA(CA(U_Ori)) + U_in`;
//! * `V2`: `U_out = SA(CA(U_Ori + U_in))`.

use rand::Rng;

use crate::attention::{AttentionConfig, GateApplier, LayerGates, Location};
use crate::autograd::Var;
use crate::energy::{ArchDescription, GateDesc, LayerDesc, OpClass};
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::network::{conv_bn, fc, lif_layer, output_layer, ForwardOptions, Model, Pass};
use crate::params::{self, visit_bn, visit_bn_mut, Binder, ParamKind, Parameterized};
use crate::snn_core::{BatchNormParams, ConvLayerParams, LifParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttResVariant {
    #[default]
    V1,
    V2,
}

impl std::str::FromStr for AttResVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "v1" | "1" => Ok(AttResVariant::V1),
            "v2" | "2" => Ok(AttResVariant::V2),
            other => Err(Error::config(format!("unknown residual variant '{}'", other))),
        }
    }
}

pub const DEFAULT_ZETA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlockParams {
    pub conv1: ConvLayerParams,
    pub conv2: ConvLayerParams,
    pub projection: Option<ConvLayerParams>,
    /// Channel and spatial gates on the branch output (`ta` unused).
    pub gates: LayerGates,
}

/// How the weights of a fresh block are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlockInit {
    Kaiming,
    /// Haar-orthogonal kernels scaled by the gain.
    Orthogonal(f64),
}

impl ResBlockParams {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        stride: usize,
        zeta: f64,
        attention: &AttentionConfig,
        init: BlockInit,
        rng: &mut R,
    ) -> Result<Self> {
        let draw = |shape: &[usize], rng: &mut R| match init {
            BlockInit::Kaiming => params::kaiming(shape, rng),
            BlockInit::Orthogonal(g) => params::orthogonal(shape, g, rng),
        };
        let geo = ConvGeometry { stride, padding: 1 };
        let conv1 = ConvLayerParams::new(draw(&[c_out, c_in, 3, 3], rng), geo, 1)?;
        let mut conv2 = ConvLayerParams::new(draw(&[c_out, c_out, 3, 3], rng), ConvGeometry::same(3), 1)?;
        conv2.bn.scale = Tensor::filled(&[c_out], zeta);
        let projection = if stride != 1 || c_in != c_out {
            let w = draw(&[c_out, c_in, 1, 1], rng);
            Some(ConvLayerParams::new(w, ConvGeometry { stride, padding: 0 }, 1)?)
        } else {
            None
        };
        let gates = LayerGates::init(&csa_config(attention), 1, |_| c_out, rng)?;
        Ok(ResBlockParams {
            conv1,
            conv2,
            projection,
            gates,
        })
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        for (name, c) in self.convs() {
            let p = format!("{}.{}", prefix, name);
            f(&format!("{}.weight", p), ParamKind::Trainable, &c.weight);
            visit_bn(&p, &c.bn, f);
        }
        self.gates.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        let mut convs: Vec<(&str, &mut ConvLayerParams)> = vec![("conv1", &mut self.conv1), ("conv2", &mut self.conv2)];
        if let Some(p) = self.projection.as_mut() {
            convs.push(("proj", p));
        }
        for (name, c) in convs {
            let p = format!("{}.{}", prefix, name);
            f(&format!("{}.weight", p), ParamKind::Trainable, &mut c.weight);
            visit_bn_mut(&p, &mut c.bn, f);
        }
        self.gates.visit_mut(prefix, f);
    }

    fn convs(&self) -> Vec<(&'static str, &ConvLayerParams)> {
        let mut v = vec![("conv1", &self.conv1), ("conv2", &self.conv2)];
        if let Some(p) = &self.projection {
            v.push(("proj", p));
        }
        v
    }

    /// BN layers in forward order: conv1, conv2, projection.
    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNormParams> {
        let mut v = vec![&mut self.conv1.bn, &mut self.conv2.bn];
        if let Some(p) = self.projection.as_mut() {
            v.push(&mut p.bn);
        }
        v
    }
}

/// Channel and spatial attention of `cfg`, both on the membrane potential.
pub fn csa_config(cfg: &AttentionConfig) -> AttentionConfig {
    AttentionConfig {
        temporal: None,
        channel: cfg.channel.map(|_| Location::ActivatePre),
        spatial: cfg.spatial.map(|_| Location::ActivatePre),
        ..cfg.clone()
    }
}

/// Combine the branch output and the shortcut on the tape.
pub fn att_res_combine(
    pass: &mut Pass,
    prefix: &str,
    u_ori: Var,
    shortcut: Var,
    gates: &LayerGates,
    cfg: Option<(&AttentionConfig, AttResVariant)>,
) -> Result<Var> {
    let Some((cfg, variant)) = cfg else {
        return pass.tape.add(u_ori, shortcut);
    };
    let applier = GateApplier {
        cfg,
        gates,
        prefix,
    };
    match variant {
        AttResVariant::V1 => {
            let u_csa = applier.apply_membrane(&mut pass.tape, &mut pass.binder, u_ori)?;
            pass.tape.add(u_csa, shortcut)
        }
        AttResVariant::V2 => {
            let sum = pass.tape.add(u_ori, shortcut)?;
            applier.apply_membrane(&mut pass.tape, &mut pass.binder, sum)
        }
    }
}

/// One residual block over a step-major membrane block `[T*B][C][H][W]`.
/// `attention = None` gives the plain membrane-shortcut block.
pub fn block_forward(
    pass: &mut Pass,
    prefix: &str,
    u_in: Var,
    p: &ResBlockParams,
    lif: &LifParams,
    attention: Option<(&AttentionConfig, AttResVariant)>,
) -> Result<Var> {
    let (s1, _) = lif_layer(pass, &format!("{}.lif1", prefix), u_in, lif, None)?;
    let x1 = conv_bn(pass, &format!("{}.conv1", prefix), s1, &p.conv1)?;
    let (s2, _) = lif_layer(pass, &format!("{}.lif2", prefix), x1, lif, None)?;
    let u_ori = conv_bn(pass, &format!("{}.conv2", prefix), s2, &p.conv2)?;
    let shortcut = match &p.projection {
        Some(proj) => conv_bn(pass, &format!("{}.proj", prefix), s1, proj)?,
        None => u_in,
    };
    if pass.tape.value(shortcut).shape() != pass.tape.value(u_ori).shape() {
        return Err(Error::shape(format!(
            "{}: shortcut {:?} does not match branch {:?}",
            prefix,
            pass.tape.value(shortcut).shape(),
            pass.tape.value(u_ori).shape()
        )));
    }
    let csa = attention.map(|(cfg, v)| (csa_config(cfg), v));
    att_res_combine(pass, prefix, u_ori, shortcut, &p.gates, csa.as_ref().map(|(c, v)| (c, *v)))
}

fn single_sample_pass(u_in: &Tensor, opts: ForwardOptions) -> Result<(Pass, Var)> {
    let (steps, ..) = u_in.dims4()?;
    let mut pass = Pass::new(Binder::frozen(), opts, steps, 1);
    let x = pass.tape.constant(u_in.clone());
    Ok((pass, x))
}

/// Membrane-shortcut block on one sample `U_in: [T][C][H][W]`.
pub fn ms_res_block(u_in: &Tensor, p: &ResBlockParams, lif: &LifParams, opts: ForwardOptions) -> Result<Tensor> {
    let (mut pass, x) = single_sample_pass(u_in, opts)?;
    let out = block_forward(&mut pass, "block", x, p, lif, None)?;
    Ok(pass.tape.value(out).clone())
}

/// Attention residual block on one sample `U_in: [T][C][H][W]`.
pub fn att_res_block(
    u_in: &Tensor,
    p: &ResBlockParams,
    lif: &LifParams,
    cfg: &AttentionConfig,
    variant: AttResVariant,
    opts: ForwardOptions,
) -> Result<Tensor> {
    let (mut pass, x) = single_sample_pass(u_in, opts)?;
    let out = block_forward(&mut pass, "block", x, p, lif, Some((cfg, variant)))?;
    Ok(pass.tape.value(out).clone())
}

/// Blocks per stage for the supported depths.
pub fn stage_blocks(depth: usize) -> Result<Vec<usize>> {
    match depth {
        8 => Ok(vec![1, 1, 1]),
        18 => Ok(vec![2, 2, 2, 2]),
        34 => Ok(vec![3, 4, 6, 3]),
        104 => Ok(vec![3, 8, 32, 8]),
        other => Err(Error::config(format!(
            "unsupported residual depth {} (use 8, 18 or 34)",
            other
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResSpec {
    pub input: [usize; 3],
    pub depth: usize,
    /// Channel width of every stage; the stem uses the first.
    pub widths: Vec<usize>,
    pub classes: usize,
    pub variant: AttResVariant,
    pub zeta: f64,
}

impl Default for ResSpec {
    fn default() -> Self {
        ResSpec {
            input: [2, 16, 16],
            depth: 8,
            widths: vec![8, 16, 32, 64],
            classes: 4,
            variant: AttResVariant::V1,
            zeta: DEFAULT_ZETA,
        }
    }
}

/// Stem conv, residual stages, spikes flattened into a spiking fc layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ResNet {
    pub spec: ResSpec,
    pub steps: usize,
    pub lif: LifParams,
    pub attention: AttentionConfig,
    pub stem: ConvLayerParams,
    /// `(stage, block)` ordered.
    pub blocks: Vec<ResBlockParams>,
    pub fc: Tensor,
    /// `(h, w)` after the stem and after each block.
    dims: Vec<(usize, usize)>,
}

impl ResNet {
    pub fn new<R: Rng + ?Sized>(
        spec: ResSpec,
        steps: usize,
        lif: LifParams,
        attention: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("T must be at least 1"));
        }
        lif.validate()?;
        attention.validate()?;
        if attention.temporal.is_some() {
            return Err(Error::config(
                "residual networks support channel and spatial attention only",
            ));
        }
        let stages = stage_blocks(spec.depth)?;
        if spec.widths.len() < stages.len() || spec.widths.contains(&0) {
            return Err(Error::config(format!(
                "depth {} needs {} positive stage widths",
                spec.depth,
                stages.len()
            )));
        }
        if !(spec.zeta.is_finite() && spec.zeta > 0.0) {
            return Err(Error::config("zeta must be positive"));
        }
        let [c0, h0, w0] = spec.input;
        let stem = ConvLayerParams::new(params::kaiming(&[spec.widths[0], c0, 3, 3], rng), ConvGeometry::same(3), 1)?;
        let mut dims = vec![(h0, w0)];
        let mut blocks = Vec::new();
        let mut c = spec.widths[0];
        let (mut h, mut w) = (h0, w0);
        for (s, &n) in stages.iter().enumerate() {
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let c_out = spec.widths[s];
                let block = ResBlockParams::new(c, c_out, stride, spec.zeta, &attention, BlockInit::Kaiming, rng)?;
                h = block.conv1.geometry.output_len(h, 3)?;
                w = block.conv1.geometry.output_len(w, 3)?;
                dims.push((h, w));
                blocks.push(block);
                c = c_out;
            }
        }
        let fc = params::kaiming(&[spec.classes, c * h * w], rng);
        Ok(ResNet {
            spec,
            steps,
            lif,
            attention,
            stem,
            blocks,
            fc,
            dims,
        })
    }

    fn block_names(&self) -> Vec<String> {
        let stages = stage_blocks(self.spec.depth).unwrap_or_default();
        let mut names = Vec::new();
        for (s, &n) in stages.iter().enumerate() {
            for b in 0..n {
                names.push(format!("stage{}.block{}", s + 1, b + 1));
            }
        }
        names
    }

    fn attention_arg(&self) -> Option<(&AttentionConfig, AttResVariant)> {
        self.attention
            .is_enabled()
            .then_some((&self.attention, self.spec.variant))
    }
}

impl Parameterized for ResNet {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        f("stem.weight", ParamKind::Trainable, &self.stem.weight);
        visit_bn("stem", &self.stem.bn, f);
        for (name, b) in self.block_names().iter().zip(&self.blocks) {
            b.visit(name, f);
        }
        f("fc.weight", ParamKind::Trainable, &self.fc);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        f("stem.weight", ParamKind::Trainable, &mut self.stem.weight);
        visit_bn_mut("stem", &mut self.stem.bn, f);
        let names = self.block_names();
        for (name, b) in names.iter().zip(self.blocks.iter_mut()) {
            b.visit_mut(name, f);
        }
        f("fc.weight", ParamKind::Trainable, &mut self.fc);
    }
}

impl Model for ResNet {
    fn steps(&self) -> usize {
        self.steps
    }

    fn input_shape(&self) -> [usize; 3] {
        self.spec.input
    }

    fn classes(&self) -> usize {
        self.spec.classes
    }

    fn lif(&self) -> &LifParams {
        &self.lif
    }

    fn forward(&self, pass: &mut Pass, input: Var) -> Result<Var> {
        let mut u = conv_bn(pass, "stem", input, &self.stem)?;
        for (name, block) in self.block_names().iter().zip(&self.blocks) {
            u = block_forward(pass, name, u, block, &self.lif, self.attention_arg())?;
        }
        let (s, _) = lif_layer(pass, "head", u, &self.lif, None)?;
        let n = pass.tape.value(s).shape()[0];
        let flat = pass.tape.value(s).numel() / n;
        let s = pass.tape.reshape(s, &[n, flat])?;
        let z = fc(pass, "fc", s, &self.fc)?;
        output_layer(pass, z, &self.lif)
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNormParams> {
        let mut v = vec![&mut self.stem.bn];
        for b in self.blocks.iter_mut() {
            v.extend(b.bn_layers_mut());
        }
        v
    }

    fn describe(&self) -> Result<ArchDescription> {
        let mut arch = ArchDescription {
            steps: self.steps,
            ..ArchDescription::default()
        };
        let [c0, h0, w0] = self.spec.input;
        arch.layers.push(LayerDesc::conv(
            "stem",
            c0,
            self.stem.out_channels(),
            (3, 3),
            (h0, w0),
            self.stem.geometry,
            OpClass::Mac,
        )?);
        let csa = csa_config(&self.attention);
        for (i, (name, b)) in self.block_names().iter().zip(&self.blocks).enumerate() {
            let (h, w) = self.dims[i];
            let (ho, wo) = self.dims[i + 1];
            let (ci, co) = (b.conv1.in_channels(), b.conv1.out_channels());
            arch.neurons += ci * h * w + co * ho * wo;
            arch.layers.push(LayerDesc::conv(
                &format!("{}.conv1", name),
                ci,
                co,
                (3, 3),
                (h, w),
                b.conv1.geometry,
                OpClass::Ac,
            )?);
            arch.layers.push(LayerDesc::conv(
                &format!("{}.conv2", name),
                co,
                co,
                (3, 3),
                (ho, wo),
                b.conv2.geometry,
                OpClass::Ac,
            )?);
            if let Some(p) = &b.projection {
                arch.layers.push(LayerDesc::conv(
                    &format!("{}.proj", name),
                    ci,
                    co,
                    (1, 1),
                    (h, w),
                    p.geometry,
                    OpClass::Ac,
                )?);
            }
            for hook in csa.hooks_at(Location::ActivatePre) {
                let (reduction, kernel) = match hook.dimension {
                    crate::attention::Dimension::Channel => (crate::attention::resolve_reduction(co, csa.r_c), 0),
                    _ => (0, csa.sa_kernel),
                };
                arch.gates.push(GateDesc {
                    name: format!("{}.{}", name, hook.dimension.short().to_lowercase()),
                    dimension: hook.dimension,
                    location: hook.location,
                    c: co,
                    h: ho,
                    w: wo,
                    reduction,
                    kernel,
                });
            }
        }
        let (h, w) = *self.dims.last().expect("stem dims");
        let c = self.blocks.last().map_or(self.stem.out_channels(), |b| b.conv2.out_channels());
        arch.neurons += c * h * w + self.spec.classes;
        arch.layers.push(LayerDesc::fc("fc", c * h * w, self.spec.classes, OpClass::Ac));
        Ok(arch)
    }
}
