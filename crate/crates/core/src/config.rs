//! Run configuration in a flat sectioned `key = value` format.
//!
//! Grammar, one construct per line:
//!
//! ```text
//! line     := blank | comment | section | entry
//! comment  := ('#' | ';') any*
//! section  := '[' name ']'
//! entry    := key '=' value
//! ```
//!
//! Names and values are trimmed; values run to the end of the line.
//! Entries before the first section, unknown sections or keys, and repeated
//! keys are errors. Overrides use `section.key=value` and win over the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::attention::{AttentionConfig, Dimension, Location};
use crate::energy::EnergyConstants;
use crate::error::{Error, Result};
use crate::event_ingest::{SyntheticDatasetSpec, Window};
use crate::isometry::{BlockSpec, InputSpec};
use crate::network::{ConvSpec, PlainSpec, Readout};
use crate::residual::{AttResVariant, ResSpec};
use crate::snn_core::{LifParams, SurrogateKind, SurrogateParams};
use crate::training::{Optimizer, TrainConfig};

/// Line number given to values that come from overrides.
pub const OVERRIDE_LINE: usize = 0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ini {
    /// `(section, key) -> (value, line)`.
    entries: BTreeMap<(String, String), (String, usize)>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ini = Ini::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(line, "section header lacks ']'"))?
                    .trim();
                if name.is_empty() {
                    return Err(err(line, "empty section name"));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = s.split_once('=').ok_or_else(|| err(line, "expected key = value"))?;
            let sec = section.clone().ok_or_else(|| err(line, "entry before any [section]"))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(err(line, "empty key"));
            }
            let slot = (sec, key.to_string());
            if let Some((_, first)) = ini.entries.get(&slot) {
                return Err(err(line, &format!("{}.{} already set on line {}", slot.0, slot.1, first)));
            }
            ini.entries.insert(slot, (v.trim().to_string(), line));
        }
        Ok(ini)
    }

    /// Apply a `section.key=value` override.
    pub fn set_override(&mut self, spec: &str) -> Result<()> {
        let (path, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {:?} is not section.key=value", spec)))?;
        let (sec, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::config(format!("override {:?} lacks a section", spec)))?;
        self.entries.insert(
            (sec.trim().to_string(), key.trim().to_string()),
            (v.trim().to_string(), OVERRIDE_LINE),
        );
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<(&str, usize)> {
        self.entries
            .get(&(section.to_string(), key.to_string()))
            .map(|(v, l)| (v.as_str(), *l))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, &str, usize)> {
        self.entries.iter().map(|((s, k), (v, l))| (s.as_str(), k.as_str(), v.as_str(), *l))
    }

    /// Canonical text with sorted sections and keys.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current: Option<&str> = None;
        for (s, k, v, _) in self.entries() {
            if current != Some(s) {
                if current.is_some() {
                    out.push('\n');
                }
                out.push_str(&format!("[{}]\n", s));
                current = Some(s);
            }
            out.push_str(&format!("{} = {}\n", k, v));
        }
        out
    }
}

fn err(line: usize, message: &str) -> Error {
    Error::ConfigLine {
        line,
        message: message.to_string(),
    }
}

/// Entry reader that remembers which keys were consumed.
struct Reader<'a> {
    ini: &'a Ini,
    used: std::collections::BTreeSet<(String, String)>,
}

impl<'a> Reader<'a> {
    fn raw(&mut self, section: &str, key: &str) -> Option<(&'a str, usize)> {
        self.used.insert((section.to_string(), key.to_string()));
        self.ini.get(section, key)
    }

    fn parse<T: std::str::FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(default),
            Some((v, line)) => v
                .parse()
                .map_err(|e| err(line, &format!("{}.{} = {:?}: {}", section, key, v, e))),
        }
    }

    fn with<T>(&mut self, section: &str, key: &str, default: T, f: impl Fn(&str) -> Result<T>) -> Result<T> {
        match self.raw(section, key) {
            None => Ok(default),
            Some((v, line)) => f(v).map_err(|e| err(line, &format!("{}.{}: {}", section, key, plain(&e)))),
        }
    }

    fn line_of(&self, section: &str, key: &str) -> usize {
        self.ini.get(section, key).map(|(_, l)| l).unwrap_or(OVERRIDE_LINE)
    }

    fn reject_unknown(&self) -> Result<()> {
        for (s, k, _, line) in self.ini.entries() {
            if !self.used.contains(&(s.to_string(), k.to_string())) {
                return Err(err(line, &format!("unknown key {}.{}", s, k)));
            }
        }
        Ok(())
    }
}

fn plain(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        Error::ConfigLine { message, .. } => message.clone(),
        other => other.to_string(),
    }
}

/// Attach the line of `section.key` to a validation failure.
fn at(r: &Reader, section: &str, key: &str, res: Result<()>) -> Result<()> {
    res.map_err(|e| err(r.line_of(section, key), &plain(&e)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub synth: SyntheticDatasetSpec,
    /// Validation samples per class, drawn with their own seed.
    pub val_per_class: usize,
    pub steps: usize,
}

impl DataConfig {
    /// Each step covers an equal share of the stream.
    pub fn window(&self) -> Result<Window> {
        Window::from_ms(self.synth.duration_us as f64 / 1000.0 / self.steps as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelConfig {
    Plain(PlainSpec),
    Res(ResSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualizeConfig {
    /// Layer name, or every layer when `None`.
    pub layer: Option<String>,
    /// Time step, or every step when `None`.
    pub step: Option<usize>,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub attention: AttentionConfig,
    pub lif: LifParams,
    pub train: TrainConfig,
    pub energy: EnergyConstants,
    pub isometry: BlockSpec,
    pub visualize: VisualizeConfig,
    pub ablate: AblateConfig,
    /// Canonical text of the merged configuration.
    pub source: String,
}

const SECTIONS: [&str; 10] = [
    "run", "data", "model", "attention", "lif", "train", "energy", "isometry", "visualize", "ablate",
];

/// SplitMix64 of `root` mixed with an FNV-1a hash of `consumer`.
pub fn derive_seed(root: u64, consumer: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in consumer.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn parse_convs(v: &str) -> Result<Vec<ConvSpec>> {
    v.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            let nums = parts
                .iter()
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::config(format!("conv {:?}: {}", item.trim(), e)))?;
            match nums[..] {
                [c, k, p] => Ok(ConvSpec::same(c, k, p)),
                _ => Err(Error::config(format!("conv {:?} is not out:kernel:pool", item.trim()))),
            }
        })
        .collect()
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| Error::config(format!("{:?}: {}", s.trim(), e))))
        .collect()
}

fn parse_location(v: &str) -> Result<Option<Location>> {
    match v {
        "none" | "off" => Ok(None),
        other => other.parse().map(Some),
    }
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, overrides)
    }

    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut ini = Ini::parse(text)?;
        for o in overrides {
            ini.set_override(o)?;
        }
        Self::from_ini(&ini)
    }

    pub fn from_ini(ini: &Ini) -> Result<Self> {
        for (s, _, _, line) in ini.entries() {
            if !SECTIONS.contains(&s) {
                return Err(err(line, &format!("unknown section [{}]", s)));
            }
        }
        let mut r = Reader {
            ini,
            used: Default::default(),
        };

        let seed = r.parse("run", "seed", 0u64)?;
        let out_dir = PathBuf::from(r.parse("run", "out_dir", String::from("out"))?);

        let d = SyntheticDatasetSpec::default();
        let synth = SyntheticDatasetSpec {
            n_classes: r.parse("data", "classes", d.n_classes)?,
            samples_per_class: r.parse("data", "samples_per_class", 16)?,
            width: r.parse("data", "width", d.width)?,
            height: r.parse("data", "height", d.height)?,
            duration_us: r.parse("data", "duration_us", d.duration_us)?,
            seed: derive_seed(seed, "data.train"),
            noise_rate: r.parse("data", "noise_rate", d.noise_rate)?,
            tick_us: r.parse("data", "tick_us", d.tick_us)?,
            bar_width: r.parse("data", "bar_width", d.bar_width)?,
        };
        let data = DataConfig {
            synth,
            val_per_class: r.parse("data", "val_per_class", 8)?,
            steps: r.parse("data", "steps", 8usize)?,
        };
        at(&r, "data", "classes", data.synth.validate())?;
        if data.steps == 0 {
            return Err(err(r.line_of("data", "steps"), "steps must be positive"));
        }
        if data.val_per_class == 0 {
            return Err(err(r.line_of("data", "val_per_class"), "need validation samples"));
        }
        at(&r, "data", "steps", data.window().map(|_| ()))?;
        let input = [2, data.synth.height as usize, data.synth.width as usize];
        let classes = data.synth.n_classes;

        let kind = r.parse("model", "kind", String::from("plain"))?;
        let plain_default = PlainSpec::default();
        let convs = r.with("model", "convs", plain_default.convs, parse_convs)?;
        let rs = ResSpec::default();
        let depth = r.parse("model", "depth", rs.depth)?;
        let widths = r.with("model", "widths", rs.widths, parse_list::<usize>)?;
        let variant: AttResVariant = r.parse("model", "variant", rs.variant)?;
        let zeta = r.parse("model", "zeta", rs.zeta)?;
        let model = match kind.as_str() {
            "plain" => {
                let spec = PlainSpec { input, convs, classes };
                at(&r, "model", "convs", spec.flat_features().map(|_| ()))?;
                ModelConfig::Plain(spec)
            }
            "resnet" => {
                at(&r, "model", "depth", crate::residual::stage_blocks(depth).map(|_| ()))?;
                ModelConfig::Res(ResSpec {
                    input,
                    depth,
                    widths,
                    classes,
                    variant,
                    zeta,
                })
            }
            other => {
                return Err(err(
                    r.line_of("model", "kind"),
                    &format!("model.kind {:?} is neither plain nor resnet", other),
                ));
            }
        };

        let mut attention = r.with("attention", "dims", AttentionConfig::none(), AttentionConfig::from_combo)?;
        for (dim, key) in [
            (Dimension::Temporal, "temporal"),
            (Dimension::Channel, "channel"),
            (Dimension::Spatial, "spatial"),
        ] {
            if let Some((v, line)) = r.raw("attention", key) {
                let loc = parse_location(v).map_err(|e| err(line, &plain(&e)))?;
                attention.set(dim, loc).map_err(|e| err(line, &plain(&e)))?;
            }
        }
        attention.r_t = r.parse("attention", "r_t", attention.r_t)?;
        attention.r_c = r.parse("attention", "r_c", attention.r_c)?;
        attention.sa_kernel = r.parse("attention", "sa_kernel", attention.sa_kernel)?;
        at(&r, "attention", "sa_kernel", attention.validate())?;
        if matches!(model, ModelConfig::Res(_)) && attention.temporal.is_some() {
            return Err(err(
                r.line_of("attention", "dims"),
                "residual networks support channel and spatial attention only",
            ));
        }

        let ld = LifParams::default();
        let lif = LifParams {
            u_th: r.parse("lif", "u_th", ld.u_th)?,
            v_reset: r.parse("lif", "v_reset", ld.v_reset)?,
            beta: r.parse("lif", "beta", ld.beta)?,
        };
        at(&r, "lif", "beta", lif.validate())?;

        let td = TrainConfig::default();
        let optimizer = r.with("train", "optimizer", td.optimizer, |v| match v {
            "sgd" => Ok(Optimizer::sgd()),
            "adam" => Ok(Optimizer::adam()),
            other => Err(Error::config(format!("unknown optimizer {:?}", other))),
        })?;
        let readout = r.with("train", "readout", td.readout, |v| match v {
            "membrane" => Ok(Readout::Membrane),
            "spikes" => Ok(Readout::SpikeCount),
            other => Err(Error::config(format!("unknown readout {:?}", other))),
        })?;
        let surrogate_kind = r.with("train", "surrogate", None, |v| match v {
            "rectangular" => Ok(Some(SurrogateKind::Rectangular)),
            "triangular" => Ok(Some(SurrogateKind::Triangular)),
            other => Err(Error::config(format!("unknown surrogate {:?}", other))),
        })?;
        let surrogate_a = r.parse("train", "surrogate_width", 0.5 * lif.u_th)?;
        let surrogate = surrogate_kind.map(|kind| SurrogateParams { kind, a: surrogate_a });
        if let Some(sg) = &surrogate {
            at(&r, "train", "surrogate_width", sg.validate())?;
        }
        let train = TrainConfig {
            epochs: r.parse("train", "epochs", td.epochs)?,
            batch_size: r.parse("train", "batch_size", td.batch_size)?,
            learning_rate: r.parse("train", "lr", td.learning_rate)?,
            optimizer,
            seed: derive_seed(seed, "train.shuffle"),
            readout,
            surrogate,
        };
        at(&r, "train", "epochs", train.validate())?;

        let ed = EnergyConstants::default();
        let energy = EnergyConstants {
            e_mac: r.parse("energy", "e_mac", ed.e_mac)?,
            e_ac: r.parse("energy", "e_ac", ed.e_ac)?,
        };
        at(&r, "energy", "e_mac", energy.validate())?;

        let bd = BlockSpec::default();
        let isometry = BlockSpec {
            channels: r.parse("isometry", "channels", bd.channels)?,
            height: r.parse("isometry", "height", bd.height)?,
            width: r.parse("isometry", "width", bd.width)?,
            steps: r.parse("isometry", "steps", bd.steps)?,
            reduction: r.parse("isometry", "reduction", bd.reduction)?,
            sa_kernel: r.parse("isometry", "sa_kernel", bd.sa_kernel)?,
            gamma_w0: r.parse("isometry", "gamma_w0", bd.gamma_w0)?,
            gamma_w1: r.parse("isometry", "gamma_w1", bd.gamma_w1)?,
            epsilon: r.parse("isometry", "epsilon", bd.epsilon)?,
            zeta: r.parse("isometry", "zeta", bd.zeta)?,
            conv_gain: r.parse("isometry", "conv_gain", bd.conv_gain)?,
            input: InputSpec::normal(r.parse("isometry", "input_std", bd.input.std)?),
            n_samples: r.parse("isometry", "samples", bd.n_samples)?,
            orthogonality_tol: bd.orthogonality_tol,
        };
        if isometry.n_samples == 0 || isometry.channels == 0 || isometry.steps == 0 {
            return Err(err(r.line_of("isometry", "samples"), "isometry sizes must be positive"));
        }

        let visualize = VisualizeConfig {
            layer: r.with("visualize", "layer", None, |v| Ok(Some(v.to_string())))?,
            step: r.with("visualize", "step", None, |v| {
                v.parse::<usize>().map(Some).map_err(|e| Error::config(e.to_string()))
            })?,
            samples: r.parse("visualize", "samples", 8usize)?,
        };
        let ablate = AblateConfig {
            seeds: r.with("ablate", "seeds", vec![0, 1, 2], parse_list::<u64>)?,
        };
        if ablate.seeds.is_empty() {
            return Err(err(r.line_of("ablate", "seeds"), "need at least one seed"));
        }

        r.reject_unknown()?;
        Ok(RunConfig {
            seed,
            out_dir,
            data,
            model,
            attention,
            lif,
            train,
            energy,
            isometry,
            visualize,
            ablate,
            source: ini.to_text(),
        })
    }

    /// Same configuration under another root seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.data.synth.seed = derive_seed(seed, "data.train");
        c.train.seed = derive_seed(seed, "train.shuffle");
        c
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "model.init")
    }

    pub fn val_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            samples_per_class: self.data.val_per_class,
            seed: derive_seed(self.seed, "data.val"),
            ..self.data.synth.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = RunConfig::from_text("", &[]).unwrap();
        assert_eq!(c.lif, LifParams::default());
        assert_eq!(c.energy, EnergyConstants::default());
        assert!(matches!(c.model, ModelConfig::Plain(_)));
        assert!(!c.attention.is_enabled());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "[run]\nseed = 3\n\n[lif]\nbeta = 1.5\n";
        match RunConfig::from_text(text, &[]) {
            Err(Error::ConfigLine { line, .. }) => assert_eq!(line, 5),
            other => panic!("{:?}", other),
        }
        match RunConfig::from_text("[train]\nepochs = many\n", &[]) {
            Err(Error::ConfigLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("{:?}", other),
        }
        match RunConfig::from_text("[run]\nseed = 1\nbogus = 2\n", &[]) {
            Err(Error::ConfigLine { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("run.bogus"));
            }
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn syntax_errors_are_located() {
        for (text, line) in [
            ("seed = 1\n", 1),
            ("[run]\nseed 1\n", 2),
            ("[run\n", 1),
            ("[run]\nseed = 1\nseed = 2\n", 3),
            ("[nope]\nx = 1\n", 2),
        ] {
            match RunConfig::from_text(text, &[]) {
                Err(Error::ConfigLine { line: l, .. }) => assert_eq!(l, line, "{:?}", text),
                other => panic!("{:?}: {:?}", text, other),
            }
        }
    }

    #[test]
    fn attention_keys_compose() {
        let text = "[attention]\ndims = TCSA\nchannel = conv-post\nr_c = 2\n";
        let c = RunConfig::from_text(text, &[]).unwrap();
        assert_eq!(c.attention.channel, Some(Location::ConvPost));
        assert_eq!(c.attention.r_c, 2);
        assert_eq!(c.attention.label(), AttentionConfig::from_combo("TCSA").map(|mut a| {
            a.channel = Some(Location::ConvPost);
            a.label()
        }).unwrap());
        let bad = "[attention]\ndims = TA\ntemporal = activate-pre\n";
        assert!(matches!(RunConfig::from_text(bad, &[]), Err(Error::ConfigLine { line: 3, .. })));
    }

    #[test]
    fn overrides_win_and_reseed() {
        let c = RunConfig::from_text("[train]\nepochs = 3\n", &["train.epochs=5".into(), "run.seed=9".into()]).unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.seed, derive_seed(9, "train.shuffle"));
        assert_ne!(c.data.synth.seed, c.val_spec().seed);
        assert!(c.source.contains("epochs = 5"));
    }

    #[test]
    fn seeds_split_per_consumer() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(7, "x"), derive_seed(7, "x"));
    }

    #[test]
    fn resnet_rejects_temporal_attention() {
        let text = "[model]\nkind = resnet\n\n[attention]\ndims = TCSA\n";
        assert!(matches!(RunConfig::from_text(text, &[]), Err(Error::ConfigLine { line: 5, .. })));
        let ok = "[model]\nkind = resnet\ndepth = 8\n\n[attention]\ndims = CSA\n";
        assert!(matches!(RunConfig::from_text(ok, &[]).unwrap().model, ModelConfig::Res(_)));
    }
}
