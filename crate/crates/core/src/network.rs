//! Forward-pass plumbing shared by all models, and the plain convolutional
//! spiking network.
//!
//! Image batches are laid out step-major: `[T*B][C][H][W]` with image
//! `t*B + b` holding sample `b` at step `t`. Convolution and batch norm run
//! on the whole block at once (so BN statistics pool over batch and time);
//! only the LIF recurrence walks the steps.

use rand::Rng;

use crate::attention::{AttentionConfig, GateApplier, LayerGates, Location};
use crate::autograd::{SpikeMode, Tape, Var};
use crate::energy::{ArchDescription, GateDesc, LayerDesc, LayerInputs, OpClass, SpikeRecord};
use crate::error::{Error, Result};
use crate::event_ingest::FrameSequence;
use crate::kernels::ConvGeometry;
use crate::params::{self, visit_bn, visit_bn_mut, Binder, ParamKind, Parameterized};
use crate::snn_core::{BatchNormParams, BnMode, ConvLayerParams, LifParams, SurrogateParams};
use crate::tensor::Tensor;

/// How class scores are read from the output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    /// Mean over steps of the pre-spike membrane potential.
    Membrane,
    /// Mean over steps of the output spikes.
    SpikeCount,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub spike: SpikeMode,
    pub bn: BnMode,
    pub readout: Readout,
}

impl ForwardOptions {
    pub fn train(lif: &LifParams) -> Self {
        ForwardOptions {
            spike: SpikeMode::Surrogate(SurrogateParams::default_for(lif)),
            bn: BnMode::Batch,
            readout: Readout::Membrane,
        }
    }

    pub fn eval(lif: &LifParams) -> Self {
        ForwardOptions {
            bn: BnMode::Running,
            ..ForwardOptions::train(lif)
        }
    }
}

/// Spikes of one LIF layer over a batch, `[T*B][...]`.
#[derive(Clone, Debug)]
pub struct LayerSpikes {
    pub name: String,
    pub spikes: Tensor,
}

impl LayerSpikes {
    /// Neurons of one sample at one step.
    pub fn neurons(&self, steps: usize, batch: usize) -> usize {
        self.spikes.numel() / (steps * batch).max(1)
    }
}

/// One forward evaluation: the tape, the bound parameters and a trace of
/// what the layers saw.
pub struct Pass {
    pub tape: Tape,
    pub binder: Binder,
    pub opts: ForwardOptions,
    pub steps: usize,
    pub batch: usize,
    /// Batch statistics of every BN layer in forward order (`BnMode::Batch`).
    pub bn_stats: Vec<(Vec<f64>, Vec<f64>)>,
    pub spikes: Vec<LayerSpikes>,
    /// Inputs of the synaptic layers, recorded when `record` is set.
    pub layer_inputs: Vec<(String, Tensor)>,
    pub record: bool,
}

impl Pass {
    pub fn new(binder: Binder, opts: ForwardOptions, steps: usize, batch: usize) -> Self {
        Pass {
            tape: Tape::new(),
            binder,
            opts,
            steps,
            batch,
            bn_stats: Vec::new(),
            spikes: Vec::new(),
            layer_inputs: Vec::new(),
            record: false,
        }
    }

    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn bind(&mut self, name: &str, value: &Tensor) -> Var {
        self.binder.bind(&mut self.tape, name, value)
    }

    fn note_input(&mut self, name: &str, x: Var) {
        if self.record {
            self.layer_inputs.push((name.to_string(), self.tape.value(x).clone()));
        }
    }

    /// Spike counts per step summed over every recorded layer and sample.
    pub fn spike_record(&self) -> SpikeRecord {
        let layers = self.layer_spike_records();
        let neurons = layers.iter().map(|(_, r)| r.neurons).sum();
        let mut rec = SpikeRecord::new(self.steps, neurons);
        rec.samples = self.batch;
        for (_, r) in &layers {
            rec.counts.iter_mut().zip(&r.counts).for_each(|(a, b)| *a += b);
        }
        rec
    }

    /// Spike counts per step of each recorded layer separately.
    pub fn layer_spike_records(&self) -> Vec<(String, SpikeRecord)> {
        let (steps, batch) = (self.steps, self.batch);
        self.spikes
            .iter()
            .map(|layer| {
                let mut rec = SpikeRecord::new(steps, layer.neurons(steps, batch));
                rec.samples = batch;
                let per_step = layer.spikes.numel() / steps;
                for (t, chunk) in layer.spikes.data().chunks(per_step).enumerate() {
                    rec.counts[t] += chunk.iter().filter(|&&v| v != 0.0).count() as u64;
                }
                (layer.name.clone(), rec)
            })
            .collect()
    }

    pub fn layer_inputs(&self) -> LayerInputs {
        LayerInputs {
            samples: self.batch,
            inputs: self.layer_inputs.clone(),
        }
    }
}

/// `AvgPool(BN(Conv(W, x)))` on the tape; batch statistics are appended to
/// `pass.bn_stats`.
pub fn conv_bn(pass: &mut Pass, prefix: &str, x: Var, p: &ConvLayerParams) -> Result<Var> {
    pass.note_input(prefix, x);
    let w = pass.bind(&format!("{}.weight", prefix), &p.weight);
    let conv = pass.tape.conv2d(x, w, p.geometry)?;
    let normed = match pass.opts.bn {
        BnMode::Off => conv,
        mode => {
            let scale = pass.bind(&format!("{}.bn.scale", prefix), &p.bn.scale);
            let shift = pass.bind(&format!("{}.bn.shift", prefix), &p.bn.shift);
            if mode == BnMode::Batch {
                let (y, mean, var) = pass.tape.batch_norm(conv, scale, shift, None)?;
                pass.bn_stats.push((mean, var));
                y
            } else {
                let stats = (p.bn.running_mean.data(), p.bn.running_var.data());
                pass.tape.batch_norm(conv, scale, shift, Some(stats))?.0
            }
        }
    };
    if p.pool > 1 {
        pass.tape.avg_pool(normed, p.pool)
    } else {
        Ok(normed)
    }
}

/// Fully connected synapses `[N][in] -> [N][out]`.
pub fn fc(pass: &mut Pass, prefix: &str, x: Var, weight: &Tensor) -> Result<Var> {
    pass.note_input(prefix, x);
    let w = pass.bind(&format!("{}.weight", prefix), weight);
    pass.tape.linear(x, w)
}

/// LIF layer over a step-major block. `gates` refine the integrated
/// membrane potential before firing. Returns the spikes `[T*B][...]` and
/// the pre-spike membrane potentials of every step.
pub fn lif_layer(
    pass: &mut Pass,
    name: &str,
    x: Var,
    lif: &LifParams,
    gates: Option<&GateApplier>,
) -> Result<(Var, Vec<Var>)> {
    let (steps, batch) = (pass.steps, pass.batch);
    let n = pass.tape.value(x).shape()[0];
    if n != steps * batch {
        return Err(Error::shape(format!(
            "layer {} got {} images for {} steps of {} samples",
            name, n, steps, batch
        )));
    }
    let mode = pass.opts.spike;
    let mut h: Option<Var> = None;
    let mut spikes = Vec::with_capacity(steps);
    let mut membranes = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = pass.tape.slice_outer(x, t * batch, batch)?;
        let mut u = match h {
            Some(h) => pass.tape.add(h, x_t)?,
            None => x_t,
        };
        if let Some(g) = gates {
            u = g.apply_membrane(&mut pass.tape, &mut pass.binder, u)?;
        }
        let s = pass.tape.spike(u, lif.u_th, mode);
        h = Some(pass.tape.lif_reset(u, s, *lif)?);
        spikes.push(s);
        membranes.push(u);
    }
    let s = pass.tape.concat_outer(&spikes)?;
    if pass.record {
        pass.spikes.push(LayerSpikes {
            name: name.to_string(),
            spikes: pass.tape.value(s).clone(),
        });
    }
    Ok((s, membranes))
}

/// Class scores `[B][K]` from per-step output tensors `[B][K]`.
pub fn readout_tape(pass: &mut Pass, per_step: &[Var]) -> Result<Var> {
    let mut acc = *per_step
        .first()
        .ok_or_else(|| Error::shape("readout of zero steps"))?;
    for &v in &per_step[1..] {
        acc = pass.tape.add(acc, v)?;
    }
    Ok(pass.tape.scale(acc, 1.0 / per_step.len() as f64))
}

/// Mean over steps of per-step output vectors `[T][K]`.
pub fn readout(per_step: &Tensor) -> Result<Vec<f64>> {
    let (t, k) = per_step.dims2()?;
    if t == 0 {
        return Err(Error::shape("readout of zero steps"));
    }
    let mut out = vec![0.0; k];
    for row in per_step.data().chunks(k) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= t as f64);
    Ok(out)
}

/// Output layer: LIF over `[T*B][K]` synaptic currents, read out as scores.
pub fn output_layer(pass: &mut Pass, z: Var, lif: &LifParams) -> Result<Var> {
    let (s, membranes) = lif_layer(pass, "out", z, lif, None)?;
    match pass.opts.readout {
        Readout::Membrane => readout_tape(pass, &membranes),
        Readout::SpikeCount => {
            let batch = pass.batch;
            let steps: Result<Vec<Var>> = (0..pass.steps)
                .map(|t| pass.tape.slice_outer(s, t * batch, batch))
                .collect();
            readout_tape(pass, &steps?)
        }
    }
}

/// Stack samples into a step-major batch `[T*B][C][H][W]`.
pub fn batch_frames(samples: &[&FrameSequence]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::shape("empty batch"))?;
    let shape = first.data.shape().to_vec();
    let (steps, c, h, w) = first.data.dims4()?;
    let per = c * h * w;
    let b = samples.len();
    let mut data = vec![0.0; steps * b * per];
    for (j, s) in samples.iter().enumerate() {
        if s.data.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "sample shape {:?} differs from {:?}",
                s.data.shape(),
                shape
            )));
        }
        for t in 0..steps {
            let dst = (t * b + j) * per;
            data[dst..dst + per].copy_from_slice(&s.data.data()[t * per..(t + 1) * per]);
        }
    }
    Tensor::from_vec(&[steps * b, c, h, w], data)
}

/// A spiking classifier evaluated on the tape.
pub trait Model: Parameterized {
    fn steps(&self) -> usize;
    /// `[C, H, W]` of one input frame.
    fn input_shape(&self) -> [usize; 3];
    fn classes(&self) -> usize;
    fn lif(&self) -> &LifParams;
    /// Class scores `[B][K]` for a step-major input block.
    fn forward(&self, pass: &mut Pass, input: Var) -> Result<Var>;
    /// BN layers in the order their statistics appear in `Pass::bn_stats`.
    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNormParams>;
    fn describe(&self) -> Result<ArchDescription>;

    fn apply_bn_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        let layers = self.bn_layers_mut();
        if layers.len() != stats.len() {
            return Err(Error::shape(format!(
                "{} BN layers but {} statistics",
                layers.len(),
                stats.len()
            )));
        }
        for (bn, (m, v)) in layers.into_iter().zip(stats) {
            bn.update_running(m, v);
        }
        Ok(())
    }
}

/// Run a model on a batch of samples and return the pass with its scores.
pub fn run<M: Model + ?Sized>(
    model: &M,
    samples: &[&FrameSequence],
    binder: Binder,
    opts: ForwardOptions,
    record: bool,
) -> Result<(Pass, Var)> {
    let input = batch_frames(samples)?;
    let [c, h, w] = model.input_shape();
    let (_, ci, hi, wi) = input.dims4()?;
    if (ci, hi, wi) != (c, h, w) || samples[0].steps() != model.steps() {
        return Err(Error::shape(format!(
            "model expects T={} x [{}][{}][{}], got T={} x [{}][{}][{}]",
            model.steps(),
            c,
            h,
            w,
            samples[0].steps(),
            ci,
            hi,
            wi
        )));
    }
    let mut pass = Pass::new(binder, opts, model.steps(), samples.len());
    pass.record = record;
    let x = pass.tape.constant(input);
    let logits = model.forward(&mut pass, x)?;
    Ok((pass, logits))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool: usize,
}

impl ConvSpec {
    pub fn same(out_channels: usize, kernel: usize, pool: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            pool,
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: self.stride,
            padding: self.padding,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlainSpec {
    /// `[C, H, W]` of one frame.
    pub input: [usize; 3],
    pub convs: Vec<ConvSpec>,
    pub classes: usize,
}

impl Default for PlainSpec {
    /// Two spiking conv layers and a spiking fc classifier for 16×16
    /// two-polarity frames.
    fn default() -> Self {
        PlainSpec {
            input: [2, 16, 16],
            convs: vec![ConvSpec::same(8, 3, 2), ConvSpec::same(16, 3, 2)],
            classes: 4,
        }
    }
}

impl PlainSpec {
    /// `(c_in, h_in, w_in, c_out, h_conv, w_conv, h_out, w_out)` per layer.
    fn shapes(&self) -> Result<Vec<[usize; 8]>> {
        let [mut c, mut h, mut w] = self.input;
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, s) in self.convs.iter().enumerate() {
            if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 || s.pool == 0 {
                return Err(Error::config(format!("conv layer {} has a zero dimension", i + 1)));
            }
            let g = s.geometry();
            let hc = g.output_len(h, s.kernel)?;
            let wc = g.output_len(w, s.kernel)?;
            if s.pool > hc || s.pool > wc {
                return Err(Error::config(format!(
                    "conv layer {}: pool window {} larger than {}x{} map",
                    i + 1,
                    s.pool,
                    hc,
                    wc
                )));
            }
            let (ho, wo) = (hc / s.pool, wc / s.pool);
            out.push([c, h, w, s.out_channels, hc, wc, ho, wo]);
            (c, h, w) = (s.out_channels, ho, wo);
        }
        Ok(out)
    }

    pub fn flat_features(&self) -> Result<usize> {
        Ok(match self.shapes()?.last() {
            Some(s) => s[3] * s[6] * s[7],
            None => self.input.iter().product(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    pub conv: ConvLayerParams,
    pub gates: LayerGates,
}

/// Spiking conv layers followed by a spiking fc output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainNet {
    pub spec: PlainSpec,
    pub steps: usize,
    pub lif: LifParams,
    pub attention: AttentionConfig,
    pub stages: Vec<ConvStage>,
    /// `[classes][flat features]`
    pub fc: Tensor,
}

impl PlainNet {
    pub fn new<R: Rng + ?Sized>(
        spec: PlainSpec,
        steps: usize,
        lif: LifParams,
        attention: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("T must be at least 1"));
        }
        if spec.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        lif.validate()?;
        attention.validate()?;
        let shapes = spec.shapes()?;
        let mut stages = Vec::with_capacity(spec.convs.len());
        for (s, sh) in spec.convs.iter().zip(&shapes) {
            let weight = params::kaiming(&[s.out_channels, sh[0], s.kernel, s.kernel], rng);
            let conv = ConvLayerParams::new(weight, s.geometry(), s.pool)?;
            let (c_in, c_out) = (sh[0], sh[3]);
            let gates = LayerGates::init(
                &attention,
                steps,
                |loc| if loc == Location::ConvPre { c_in } else { c_out },
                rng,
            )?;
            stages.push(ConvStage { conv, gates });
        }
        let fc = params::kaiming(&[spec.classes, spec.flat_features()?], rng);
        Ok(PlainNet {
            spec,
            steps,
            lif,
            attention,
            stages,
            fc,
        })
    }

    /// Same weights, different attention configuration. Gates that the new
    /// configuration needs but `self` lacks are freshly drawn.
    pub fn with_attention<R: Rng + ?Sized>(&self, attention: AttentionConfig, rng: &mut R) -> Result<Self> {
        attention.validate()?;
        let shapes = self.spec.shapes()?;
        let mut net = self.clone();
        net.attention = attention.clone();
        for (stage, sh) in net.stages.iter_mut().zip(&shapes) {
            let (c_in, c_out) = (sh[0], sh[3]);
            let fresh = LayerGates::init(
                &attention,
                self.steps,
                |loc| if loc == Location::ConvPre { c_in } else { c_out },
                rng,
            )?;
            stage.gates = LayerGates {
                ta: keep(&stage.gates.ta, fresh.ta, self.attention.temporal == attention.temporal),
                ca: keep(&stage.gates.ca, fresh.ca, self.attention.channel == attention.channel),
                sa: keep(&stage.gates.sa, fresh.sa, self.attention.spatial == attention.spatial),
            };
        }
        Ok(net)
    }
}

/// Keep an existing gate when the dimension stays at the same location.
fn keep<T: Clone>(old: &Option<T>, new: Option<T>, same_location: bool) -> Option<T> {
    if new.is_some() && same_location {
        old.clone().or(new)
    } else {
        new
    }
}

impl Parameterized for PlainNet {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor)) {
        for (i, s) in self.stages.iter().enumerate() {
            let prefix = format!("conv{}", i + 1);
            f(&format!("{}.weight", prefix), ParamKind::Trainable, &s.conv.weight);
            visit_bn(&prefix, &s.conv.bn, f);
            s.gates.visit(&prefix, f);
        }
        f("fc.weight", ParamKind::Trainable, &self.fc);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let prefix = format!("conv{}", i + 1);
            f(&format!("{}.weight", prefix), ParamKind::Trainable, &mut s.conv.weight);
            visit_bn_mut(&prefix, &mut s.conv.bn, f);
            s.gates.visit_mut(&prefix, f);
        }
        f("fc.weight", ParamKind::Trainable, &mut self.fc);
    }
}

impl Model for PlainNet {
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
        let steps = pass.steps;
        let mut x = input;
        for (i, stage) in self.stages.iter().enumerate() {
            let prefix = format!("conv{}", i + 1);
            let gates = GateApplier {
                cfg: &self.attention,
                gates: &stage.gates,
                prefix: &prefix,
            };
            let x_in = gates.apply_block(&mut pass.tape, &mut pass.binder, x, steps, Location::ConvPre)?;
            let feat = conv_bn(pass, &prefix, x_in, &stage.conv)?;
            let feat = gates.apply_block(&mut pass.tape, &mut pass.binder, feat, steps, Location::ConvPost)?;
            x = lif_layer(pass, &prefix, feat, &self.lif, Some(&gates))?.0;
        }
        let n = pass.tape.value(x).shape()[0];
        let flat = pass.tape.value(x).numel() / n;
        let x = pass.tape.reshape(x, &[n, flat])?;
        let z = fc(pass, "fc", x, &self.fc)?;
        output_layer(pass, z, &self.lif)
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNormParams> {
        self.stages.iter_mut().map(|s| &mut s.conv.bn).collect()
    }

    fn describe(&self) -> Result<ArchDescription> {
        let shapes = self.spec.shapes()?;
        let mut arch = ArchDescription {
            steps: self.steps,
            ..ArchDescription::default()
        };
        for (i, (s, sh)) in self.spec.convs.iter().zip(&shapes).enumerate() {
            let name = format!("conv{}", i + 1);
            let class = if i == 0 { OpClass::Mac } else { OpClass::Ac };
            arch.layers.push(LayerDesc::conv(
                &name,
                sh[0],
                sh[3],
                (s.kernel, s.kernel),
                (sh[1], sh[2]),
                s.geometry(),
                class,
            )?);
            arch.neurons += sh[3] * sh[6] * sh[7];
            for hook in Location::ALL.iter().flat_map(|&l| self.attention.hooks_at(l)) {
                let (c, h, w) = if hook.location == Location::ConvPre {
                    (sh[0], sh[1], sh[2])
                } else {
                    (sh[3], sh[6], sh[7])
                };
                let (reduction, kernel) = match hook.dimension {
                    crate::attention::Dimension::Temporal => {
                        if self.steps < 2 {
                            continue;
                        }
                        (crate::attention::resolve_reduction(self.steps, self.attention.r_t), 0)
                    }
                    crate::attention::Dimension::Channel => {
                        (crate::attention::resolve_reduction(c, self.attention.r_c), 0)
                    }
                    crate::attention::Dimension::Spatial => (0, self.attention.sa_kernel),
                };
                arch.gates.push(GateDesc {
                    name: format!("{}.{}", name, hook.dimension.short().to_lowercase()),
                    dimension: hook.dimension,
                    location: hook.location,
                    c,
                    h,
                    w,
                    reduction,
                    kernel,
                });
            }
        }
        let class = if shapes.is_empty() { OpClass::Mac } else { OpClass::Ac };
        arch.layers
            .push(LayerDesc::fc("fc", self.spec.flat_features()?, self.spec.classes, class));
        arch.neurons += self.spec.classes;
        Ok(arch)
    }
}
