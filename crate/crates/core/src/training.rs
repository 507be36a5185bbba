//! Surrogate-gradient BPTT, evaluation, the finite-difference check, and
//! checkpoints.
//!
//! A parameter may be bound to the tape several times in one pass (gates
//! are re-bound at every step); its gradient is the sum over all bindings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, SpikeMode};
use crate::energy::{count_flops, measured_profile, nasar, FlopProfile, SpikeRecord};
use crate::error::{Error, Result};
use crate::event_ingest::{aggregate_frames, FrameSequence, LabeledStream, Window};
use crate::network::{run, ForwardOptions, Model, Pass, Readout};
use crate::params::{Binder, ParamKind, Parameterized};
use crate::snn_core::{BnMode, SurrogateKind, SurrogateParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub frames: FrameSequence,
    pub label: usize,
}

/// Aggregate labeled streams into `steps` frames of `window` each.
pub fn examples_from_streams(streams: &[LabeledStream], window: Window, steps: usize) -> Result<Vec<Example>> {
    streams
        .iter()
        .map(|s| {
            Ok(Example {
                frames: aggregate_frames(&s.stream, window, steps)?,
                label: s.label,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd() -> Self {
        Optimizer::SgdMomentum { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub readout: Readout,
    pub surrogate: Option<SurrogateParams>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 0.05,
            optimizer: Optimizer::sgd(),
            seed: 0,
            readout: Readout::Membrane,
            surrogate: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        match self.optimizer {
            Optimizer::SgdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::config("momentum must lie in [0,1)"))
            }
            Optimizer::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                Err(Error::config("invalid Adam constants"))
            }
            _ => Ok(()),
        }
    }

    fn options<M: Model + ?Sized>(&self, model: &M, bn: BnMode) -> ForwardOptions {
        let sg = self.surrogate.unwrap_or_else(|| SurrogateParams::default_for(model.lif()));
        ForwardOptions {
            spike: SpikeMode::Surrogate(sg),
            bn,
            readout: self.readout,
        }
    }

    pub fn train_options<M: Model + ?Sized>(&self, model: &M) -> ForwardOptions {
        self.options(model, BnMode::Batch)
    }

    pub fn eval_options<M: Model + ?Sized>(&self, model: &M) -> ForwardOptions {
        self.options(model, BnMode::Running)
    }
}

/// Sum of the gradients of every binding, keyed by parameter name.
pub fn collect_grads(pass: &Pass, grads: &Gradients) -> BTreeMap<String, Tensor> {
    let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, var) in pass.binder.bound() {
        if let Some(g) = grads.get(*var) {
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
    }
    out
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    fn new(kind: Optimizer, lr: f64) -> Self {
        OptimizerState {
            kind,
            lr,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    fn apply<M: Parameterized + ?Sized>(&mut self, model: &mut M, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let (kind, lr, step) = (self.kind, self.lr, self.step);
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_mut(&mut |name, pk, w| {
            if pk != ParamKind::Trainable {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            let m = first.entry(name.to_string()).or_insert_with(|| vec![0.0; w.numel()]);
            match kind {
                Optimizer::SgdMomentum { momentum } => {
                    for ((wi, gi), mi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *mi = momentum * *mi + gi;
                        *wi -= lr * *mi;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let v = second.entry(name.to_string()).or_insert_with(|| vec![0.0; w.numel()]);
                    let c1 = 1.0 - beta1.powi(step as i32);
                    let c2 = 1.0 - beta2.powi(step as i32);
                    for (((wi, gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        });
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub nasar: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,accuracy,nasar\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:e},{},{}", e.epoch, e.loss, e.accuracy, e.nasar);
        }
        s
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

fn check_examples<M: Model + ?Sized>(model: &M, data: &[Example]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    if let Some(e) = data.iter().find(|e| e.label >= model.classes()) {
        return Err(Error::config(format!(
            "label {} out of range for {} classes",
            e.label,
            model.classes()
        )));
    }
    Ok(())
}

/// Unrolled surrogate-gradient training. `on_epoch` sees every epoch's
/// statistics as they are produced.
pub fn bptt_train<M: Model + ?Sized>(
    model: &mut M,
    data: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_examples(model, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    let opts = cfg.train_options(model);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0;
        let mut spikes: Option<SpikeRecord> = None;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FrameSequence> = chunk.iter().map(|&i| &data[i].frames).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
            let (mut pass, logits) = run(model, &batch, Binder::trainable(), opts, true)?;
            let loss = pass.tape.cross_entropy(logits, &labels)?;
            let lv = pass.tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss became {} at epoch {} (learning rate {})",
                    lv, epoch, cfg.learning_rate
                )));
            }
            loss_sum += lv * chunk.len() as f64;
            hits += correct(pass.tape.value(logits), &labels);
            let rec = pass.spike_record();
            match spikes.as_mut() {
                Some(s) => s.merge(&rec)?,
                None => spikes = Some(rec),
            }
            let grads = collect_grads(&pass, &pass.tape.backward(loss));
            if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} at epoch {}", name, epoch)));
            }
            opt.apply(model, &grads);
            let stats = std::mem::take(&mut pass.bn_stats);
            model.apply_bn_stats(&stats)?;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: hits as f64 / data.len() as f64,
            nasar: nasar(&spikes.expect("non-empty dataset"))?.nasar,
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
    pub spikes: SpikeRecord,
    /// Per-layer records in forward order.
    pub layer_spikes: Vec<(String, SpikeRecord)>,
    pub nasar: f64,
}

/// Evaluate in inference mode (running BN statistics).
pub fn evaluate<M: Model + ?Sized>(
    model: &M,
    data: &[Example],
    batch_size: usize,
    opts: ForwardOptions,
) -> Result<EvalStats> {
    check_examples(model, data)?;
    let mut hits = 0;
    let mut loss_sum = 0.0;
    let mut spikes: Option<SpikeRecord> = None;
    let mut layer_spikes: Vec<(String, SpikeRecord)> = Vec::new();
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&FrameSequence> = chunk.iter().map(|e| &e.frames).collect();
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        let (mut pass, logits) = run(model, &batch, Binder::frozen(), opts, true)?;
        let loss = pass.tape.cross_entropy(logits, &labels)?;
        loss_sum += pass.tape.value(loss).data()[0] * chunk.len() as f64;
        hits += correct(pass.tape.value(logits), &labels);
        let layers = pass.layer_spike_records();
        if layer_spikes.is_empty() {
            layer_spikes = layers;
        } else {
            for ((_, acc), (_, rec)) in layer_spikes.iter_mut().zip(&layers) {
                acc.merge(rec)?;
            }
        }
        let rec = pass.spike_record();
        match spikes.as_mut() {
            Some(s) => s.merge(&rec)?,
            None => spikes = Some(rec),
        }
    }
    let spikes = spikes.expect("non-empty dataset");
    Ok(EvalStats {
        accuracy: hits as f64 / data.len() as f64,
        loss: loss_sum / data.len() as f64,
        correct: hits,
        total: data.len(),
        nasar: nasar(&spikes)?.nasar,
        spikes,
        layer_spikes,
    })
}

/// Spike-driven FLOP profile (per sample, all steps) and spike record of
/// `model` over `data`.
pub fn energy_profile<M: Model + ?Sized>(
    model: &M,
    data: &[Example],
    batch_size: usize,
    opts: ForwardOptions,
) -> Result<(FlopProfile, SpikeRecord)> {
    check_examples(model, data)?;
    let arch = model.describe()?;
    let dense = count_flops(&arch)?;
    let mut acc = dense.clone();
    acc.layers.iter_mut().for_each(|l| l.flops = 0.0);
    let mut spikes: Option<SpikeRecord> = None;
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&FrameSequence> = chunk.iter().map(|e| &e.frames).collect();
        let (pass, _) = run(model, &batch, Binder::frozen(), opts, true)?;
        let p = measured_profile(&dense, &arch, &pass.layer_inputs())?;
        let w = chunk.len() as f64;
        for (a, l) in acc.layers.iter_mut().zip(&p.layers) {
            a.flops += l.flops * w;
        }
        let rec = pass.spike_record();
        match spikes.as_mut() {
            Some(s) => s.merge(&rec)?,
            None => spikes = Some(rec),
        }
    }
    let n = data.len() as f64;
    acc.layers.iter_mut().for_each(|l| l.flops /= n);
    Ok((acc, spikes.expect("non-empty dataset")))
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Denominator floor of the relative error, so entries whose analytic and
/// numeric gradients both vanish do not divide by zero.
pub const FD_REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR)
}

/// Forward options for the differentiable relaxation: the spike emits the
/// integral of a triangular surrogate (continuously differentiable).
pub fn relaxed_options<M: Model + ?Sized>(model: &M, bn: BnMode) -> ForwardOptions {
    let lif = model.lif();
    ForwardOptions {
        spike: SpikeMode::Relaxed(SurrogateParams {
            kind: SurrogateKind::Triangular,
            a: 0.5 * lif.u_th,
        }),
        bn,
        readout: Readout::Membrane,
    }
}

/// Loss of `model` on one batch and, optionally, the gradients.
pub fn loss_and_grads<M: Model + ?Sized>(
    model: &M,
    batch: &[Example],
    opts: ForwardOptions,
    with_grads: bool,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let frames: Vec<&FrameSequence> = batch.iter().map(|e| &e.frames).collect();
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let binder = if with_grads { Binder::trainable() } else { Binder::frozen() };
    let (mut pass, logits) = run(model, &frames, binder, opts, false)?;
    let loss = pass.tape.cross_entropy(logits, &labels)?;
    let lv = pass.tape.value(loss).data()[0];
    if !with_grads {
        return Ok((lv, BTreeMap::new()));
    }
    let grads = collect_grads(&pass, &pass.tape.backward(loss));
    Ok((lv, grads))
}

/// Compare analytic gradients with central differences on `n_params`
/// randomly chosen trainable entries. `opts` should use the relaxed spike.
pub fn finite_diff_check<M: Model + Clone>(
    model: &M,
    batch: &[Example],
    epsilon: f64,
    n_params: usize,
    opts: ForwardOptions,
    seed: u64,
) -> Result<FdReport> {
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon must be positive"));
    }
    let (_, grads) = loss_and_grads(model, batch, opts, true)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", name)));
    }
    let mut entries: Vec<(String, usize)> = Vec::new();
    model.visit(&mut |name, kind, t| {
        if kind == ParamKind::Trainable {
            entries.extend((0..t.numel()).map(|i| (name.to_string(), i)));
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    entries.shuffle(&mut rng);
    entries.truncate(n_params);
    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (name, idx) in entries {
        let analytic = grads.get(&name).map_or(0.0, |g| g.data()[idx]);
        let eval = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            m.visit_mut(&mut |n, _, t| {
                if n == name {
                    t.data_mut()[idx] += delta;
                }
            });
            Ok(loss_and_grads(&m, batch, opts, false)?.0)
        };
        let numeric = (eval(epsilon)? - eval(-epsilon)?) / (2.0 * epsilon);
        let rel = relative_error(analytic, numeric);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((name.clone(), idx, analytic, numeric));
        }
    }
    Ok(report)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MASNNCK1";

/// Named tensors plus the configuration text and the accuracy recorded when
/// the checkpoint was written.
///
/// Layout: magic, then three little-endian `u64`-length-prefixed sections
/// (manifest text, config text, raw `f64` payload) and the accuracy as an
/// `f64` (NaN when absent). Manifest lines are
/// `name<TAB>kind<TAB>dims<TAB>offset`, dims `x`-separated, offset counted
/// in values.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, ParamKind, Tensor)>,
    pub config: String,
    pub accuracy: Option<f64>,
}

impl Checkpoint {
    pub fn capture<M: Parameterized + ?Sized>(model: &M, config: &str, accuracy: Option<f64>) -> Self {
        let mut tensors = Vec::new();
        model.visit(&mut |name, kind, t| tensors.push((name.to_string(), kind, t.clone())));
        Checkpoint {
            tensors,
            config: config.to_string(),
            accuracy,
        }
    }

    /// Copy the stored tensors into `model`; names and shapes must match.
    pub fn restore_into<M: Parameterized + ?Sized>(&self, model: &mut M) -> Result<()> {
        let stored: BTreeMap<&str, &Tensor> = self.tensors.iter().map(|(n, _, t)| (n.as_str(), t)).collect();
        let mut problem: Option<String> = None;
        let mut seen = 0;
        model.visit_mut(&mut |name, _, t| {
            match stored.get(name) {
                Some(s) if s.shape() == t.shape() => {
                    *t = (*s).clone();
                    seen += 1;
                }
                Some(s) => {
                    problem.get_or_insert(format!("{}: stored {:?}, model {:?}", name, s.shape(), t.shape()));
                }
                None => {
                    problem.get_or_insert(format!("{} missing from checkpoint", name));
                }
            }
        });
        if let Some(p) = problem {
            return Err(Error::Format {
                what: "checkpoint",
                message: p,
            });
        }
        if seen != stored.len() {
            return Err(Error::Format {
                what: "checkpoint",
                message: "checkpoint holds tensors the model does not have".into(),
            });
        }
        Ok(())
    }

    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let mut offset = 0;
        for (name, kind, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let kind = match kind {
                ParamKind::Trainable => "param",
                ParamKind::Buffer => "buffer",
            };
            let _ = writeln!(s, "{}\t{}\t{}\t{}", name, kind, dims.join("x"), offset);
            offset += t.numel();
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self.manifest();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for text in [manifest.as_bytes(), self.config.as_bytes()] {
            out.extend_from_slice(&(text.len() as u64).to_le_bytes());
            out.extend_from_slice(text);
        }
        let n: usize = self.tensors.iter().map(|(_, _, t)| t.numel()).sum();
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for (_, _, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.accuracy.unwrap_or(f64::NAN).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Format {
            what: "checkpoint",
            message: m.to_string(),
        };
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8).ok_or_else(|| fail("truncated"))? != CHECKPOINT_MAGIC {
            return Err(fail("bad magic"));
        }
        let mut text = || -> Result<String> {
            let len = cur.u64().ok_or_else(|| fail("truncated"))? as usize;
            let raw = cur.take(len).ok_or_else(|| fail("truncated"))?;
            String::from_utf8(raw.to_vec()).map_err(|_| fail("section is not UTF-8"))
        };
        let manifest = text()?;
        let config = text()?;
        let n = cur.u64().ok_or_else(|| fail("truncated"))? as usize;
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| fail("bad payload length"))?).ok_or_else(|| fail("truncated payload"))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let acc = cur.u64().map(f64::from_bits).ok_or_else(|| fail("missing accuracy"))?;
        if cur.pos != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        let mut tensors = Vec::new();
        for (i, line) in manifest.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || fail(&format!("manifest line {}", i + 1));
            if cols.len() != 4 {
                return Err(bad());
            }
            let kind = match cols[1] {
                "param" => ParamKind::Trainable,
                "buffer" => ParamKind::Buffer,
                _ => return Err(bad()),
            };
            let dims: Vec<usize> = if cols[2].is_empty() {
                Vec::new()
            } else {
                cols[2].split('x').map(|d| d.parse().map_err(|_| bad())).collect::<Result<_>>()?
            };
            let offset: usize = cols[3].parse().map_err(|_| bad())?;
            let len: usize = dims.iter().product();
            let slice = values.get(offset..offset + len).ok_or_else(bad)?;
            tensors.push((cols[0].to_string(), kind, Tensor::from_vec(&dims, slice.to_vec())?));
        }
        Ok(Checkpoint {
            tensors,
            config,
            accuracy: (!acc.is_nan()).then_some(acc),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Draw a random example set for smoke tests: Bernoulli frames whose rate
/// depends on the label.
pub fn random_examples<R: Rng + ?Sized>(
    n: usize,
    steps: usize,
    shape: [usize; 3],
    classes: usize,
    rng: &mut R,
) -> Vec<Example> {
    let [c, h, w] = shape;
    (0..n)
        .map(|i| {
            let label = i % classes;
            let p = 0.1 + 0.3 * label as f64 / classes as f64;
            let data = (0..steps * c * h * w)
                .map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 })
                .collect();
            Example {
                frames: FrameSequence {
                    data: Tensor::from_vec(&[steps, c, h, w], data).expect("shape product"),
                    window: Window { us: 1000 },
                },
                label,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionConfig;
    use crate::network::{ConvSpec, PlainNet, PlainSpec};
    use crate::snn_core::LifParams;

    fn tiny_spec() -> PlainSpec {
        PlainSpec {
            input: [2, 6, 6],
            convs: vec![ConvSpec::same(3, 3, 2)],
            classes: 2,
        }
    }

    fn tiny_net(attention: &str, seed: u64) -> PlainNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PlainNet::new(
            tiny_spec(),
            3,
            LifParams::default(),
            AttentionConfig::from_combo(attention).unwrap(),
            &mut rng,
        )
        .unwrap()
    }

    fn data(n: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_examples(n, 3, [2, 6, 6], 2, &mut rng)
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let d = data(8, 1);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut a = tiny_net("TCSA", 2);
        let mut b = tiny_net("TCSA", 2);
        let ra = bptt_train(&mut a, &d, &cfg, |_| {}).unwrap();
        let rb = bptt_train(&mut b, &d, &cfg, |_| {}).unwrap();
        assert_eq!(ra.final_loss().unwrap().to_bits(), rb.final_loss().unwrap().to_bits());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let d = data(6, 3);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 6,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut net = tiny_net("CA", 4);
        let before = net.clone();
        let r = bptt_train(&mut net, &d, &cfg, |_| {}).unwrap();
        let mut same = true;
        net.visit(&mut |name, kind, t| {
            if kind == ParamKind::Trainable {
                let mut orig = None;
                before.visit(&mut |n, _, o| {
                    if n == name {
                        orig = Some(o.clone());
                    }
                });
                same &= orig.as_ref() == Some(t);
            }
        });
        assert!(same);
        let l0 = r.epochs[0].loss;
        assert!(r.epochs.iter().all(|e| e.loss == l0));
    }

    #[test]
    fn adam_runs() {
        let d = data(6, 5);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 3,
            optimizer: Optimizer::adam(),
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut net = tiny_net("SA", 6);
        assert!(bptt_train(&mut net, &d, &cfg, |_| {}).is_ok());
    }

    #[test]
    fn nan_loss_aborts() {
        let d = data(4, 7);
        let mut net = tiny_net("none", 8);
        net.fc.data_mut()[0] = f64::NAN;
        let err = bptt_train(&mut net, &d, &TrainConfig::default(), |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn relaxed_gradients_match_central_differences() {
        let net = tiny_net("TCSA", 9);
        let d = data(2, 10);
        let opts = relaxed_options(&net, BnMode::Batch);
        let r = finite_diff_check(&net, &d, 1e-4, 60, opts, 11).unwrap();
        assert_eq!(r.checked, 60);
        assert!(r.max_rel_error <= 1e-3, "{:?}", r);
    }

    #[test]
    fn zero_input_gives_zero_first_layer_gradient() {
        let net = tiny_net("none", 12);
        let mut d = data(2, 13);
        for e in d.iter_mut() {
            e.frames.data = Tensor::zeros(e.frames.data.shape());
        }
        let opts = relaxed_options(&net, BnMode::Running);
        let (_, g) = loss_and_grads(&net, &d, opts, true).unwrap();
        assert!(g["conv1.weight"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = tiny_net("TCSA", 14);
        let ck = Checkpoint::capture(&net, "[train]\nepochs = 1\n", Some(0.75));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut other = tiny_net("TCSA", 15);
        back.restore_into(&mut other).unwrap();
        assert_eq!(other, net);
        let mut wrong = tiny_net("none", 15);
        assert!(back.restore_into(&mut wrong).is_err());
        let mut bytes = ck.to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn csv_has_one_row_per_epoch() {
        let d = data(4, 16);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut net = tiny_net("none", 17);
        let r = bptt_train(&mut net, &d, &cfg, |_| {}).unwrap();
        assert_eq!(r.to_csv().lines().count(), 3);
    }
}
