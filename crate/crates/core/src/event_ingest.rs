//! Event streams, frame aggregation, static-image replication, and the
//! synthetic moving-bar dataset.
//!
//! Text event format (one header line, then one event per line):
//!
//! ```text
//! width,height,dt_prime_us
//! x,y,t_us,p          # p is 1 (ON) or -1 (OFF)
//! ```
//!
//! Binary frame format: eight little-endian `u32` header words
//! `[magic, version, T, channels, H, W, dt_num, dt_den]` (the window is
//! `dt_num / dt_den` milliseconds) followed by `T*channels*H*W`
//! little-endian `f32` values in `[T][C][H][W]` order.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    pub fn from_sign(p: i64) -> Option<Self> {
        match p {
            1 => Some(Polarity::On),
            -1 => Some(Polarity::Off),
            _ => None,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }

    /// Frame channel: 0 for ON, 1 for OFF.
    pub fn channel(self) -> usize {
        match self {
            Polarity::On => 0,
            Polarity::Off => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    pub t_us: u64,
    pub polarity: Polarity,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    pub width: u32,
    pub height: u32,
    pub dt_prime_us: u64,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u32, height: u32, dt_prime_us: u64) -> Self {
        EventStream {
            width,
            height,
            dt_prime_us,
            events: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config(format!(
                "event stream has empty resolution {}x{}",
                self.width, self.height
            )));
        }
        let mut last = 0;
        for (i, e) in self.events.iter().enumerate() {
            if e.x >= self.width || e.y >= self.height {
                return Err(Error::config(format!(
                    "event {} at ({}, {}) outside {}x{}",
                    i, e.x, e.y, self.width, self.height
                )));
            }
            if e.t_us < last {
                return Err(Error::config(format!("event {} goes back in time", i)));
            }
            last = e.t_us;
        }
        Ok(())
    }

    pub fn duration_us(&self) -> u64 {
        self.events.last().map_or(0, |e| e.t_us + 1)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(16 * self.events.len() + 32);
        let _ = writeln!(s, "{},{},{}", self.width, self.height, self.dt_prime_us);
        for e in &self.events {
            let _ = writeln!(s, "{},{},{},{}", e.x, e.y, e.t_us, e.polarity.sign());
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let fail = |line: usize, msg: String| Error::Format {
            what: "event file",
            message: format!("line {}: {}", line, msg),
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hl, header) = lines.next().ok_or_else(|| fail(1, "missing header".into()))?;
        let h: Vec<u64> = header
            .split(',')
            .map(|f| f.trim().parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| fail(hl, format!("bad header: {}", e)))?;
        let [width, height, dt_prime_us] = h[..] else {
            return Err(fail(hl, "header must be width,height,dt_prime_us".into()));
        };
        let mut stream = EventStream::new(width as u32, height as u32, dt_prime_us);
        for (ln, line) in lines {
            let f: Vec<i64> = line
                .split(',')
                .map(|f| f.trim().parse::<i64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| fail(ln, format!("bad event: {}", e)))?;
            let [x, y, t, p] = f[..] else {
                return Err(fail(ln, "event must be x,y,t_us,p".into()));
            };
            if x < 0 || y < 0 || t < 0 {
                return Err(fail(ln, "negative coordinate or timestamp".into()));
            }
            let polarity =
                Polarity::from_sign(p).ok_or_else(|| fail(ln, format!("polarity {} not in {{1,-1}}", p)))?;
            stream.events.push(Event {
                x: x as u32,
                y: y as u32,
                t_us: t as u64,
                polarity,
            });
        }
        stream.validate()?;
        Ok(stream)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Aggregation window length, held exactly in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub us: u64,
}

impl Window {
    pub fn from_ms(ms: f64) -> Result<Self> {
        let us = (ms * 1000.0).round();
        if !(us >= 1.0) || !us.is_finite() {
            return Err(Error::config(format!("window must be at least 1 us, got {} ms", ms)));
        }
        Ok(Window { us: us as u64 })
    }

    pub fn ms(&self) -> f64 {
        self.us as f64 / 1000.0
    }
}

/// Input tensor `[T][C][H][W]` plus the window each step represents.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub data: Tensor,
    pub window: Window,
}

impl FrameSequence {
    pub fn steps(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn frame(&self, t: usize) -> Result<Tensor> {
        let (_, c, h, w) = self.data.dims4()?;
        self.data.slice_outer(t, 1)?.reshape(&[c, h, w])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (t, c, h, w) = self.data.dims4().expect("frame rank");
        let header = [
            FRAME_MAGIC,
            FRAME_VERSION,
            t as u32,
            c as u32,
            h as u32,
            w as u32,
            self.window.us as u32,
            1000,
        ];
        let mut out = Vec::with_capacity(32 + 4 * self.data.numel());
        for word in header {
            out.extend_from_slice(&word.to_le_bytes());
        }
        for &v in self.data.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Format {
            what: "frame file",
            message: m.to_string(),
        };
        if bytes.len() < 32 {
            return Err(fail("truncated header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        if word(0) != FRAME_MAGIC {
            return Err(fail("bad magic"));
        }
        if word(1) != FRAME_VERSION {
            return Err(fail("unsupported version"));
        }
        let dims = [word(2), word(3), word(4), word(5)].map(|d| d as usize);
        let (num, den) = (word(6) as u64, word(7) as u64);
        if den == 0 || (num * 1000) % den != 0 {
            return Err(fail("window is not a whole number of microseconds"));
        }
        let n: usize = dims.iter().product();
        let body = &bytes[32..];
        if body.len() != 4 * n {
            return Err(fail("payload length does not match header"));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(FrameSequence {
            data: Tensor::from_vec(&dims, data)?,
            window: Window { us: num * 1000 / den },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub const FRAME_MAGIC: u32 = u32::from_le_bytes(*b"MAFR");
pub const FRAME_VERSION: u32 = 1;

/// Sum events into `steps` half-open windows `[t*dt, (t+1)*dt)`.
/// Events at or beyond `steps * dt` are dropped.
pub fn aggregate_frames(stream: &EventStream, window: Window, steps: usize) -> Result<FrameSequence> {
    if stream.width == 0 || stream.height == 0 {
        return Err(Error::config("event stream has an empty dimension"));
    }
    if steps == 0 {
        return Err(Error::config("need at least one time step"));
    }
    let (h, w) = (stream.height as usize, stream.width as usize);
    let mut data = Tensor::zeros(&[steps, 2, h, w]);
    let d = data.data_mut();
    for e in &stream.events {
        let t = (e.t_us / window.us) as usize;
        if t >= steps {
            continue;
        }
        if e.x as usize >= w || e.y as usize >= h {
            return Err(Error::config(format!("event at ({}, {}) out of bounds", e.x, e.y)));
        }
        d[((t * 2 + e.polarity.channel()) * h + e.y as usize) * w + e.x as usize] += 1.0;
    }
    Ok(FrameSequence { data, window })
}

/// Copy a static `[C][H][W]` image to every one of `steps` frames.
pub fn replicate_static(image: &Tensor, steps: usize, window: Window) -> Result<FrameSequence> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::shape(format!("image must be [C][H][W], got {:?}", image.shape())));
    };
    if steps == 0 {
        return Err(Error::config("need at least one time step"));
    }
    let mut data = Vec::with_capacity(steps * image.numel());
    for _ in 0..steps {
        data.extend_from_slice(image.data());
    }
    Ok(FrameSequence {
        data: Tensor::from_vec(&[steps, c, h, w], data)?,
        window,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub width: u32,
    pub height: u32,
    pub duration_us: u64,
    pub seed: u64,
    /// Bernoulli probability of an OFF noise event per pixel per tick.
    pub noise_rate: f64,
    /// Simulation tick; also the native resolution `dt'` of the stream.
    pub tick_us: u64,
    pub bar_width: f64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            n_classes: 4,
            samples_per_class: 10,
            width: 16,
            height: 16,
            duration_us: 160_000,
            seed: 0,
            noise_rate: 0.01,
            tick_us: 1000,
            bar_width: 2.0,
        }
    }
}

/// Motion directions of the bar, one per class, in class order.
pub const DIRECTIONS: [(f64, f64); 8] = [
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
    (-std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
    (-std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
    (std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
];

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.n_classes > DIRECTIONS.len() {
            return Err(Error::config(format!(
                "{} classes requested but only {} motion templates exist",
                self.n_classes,
                DIRECTIONS.len()
            )));
        }
        if self.width == 0 || self.height == 0 || self.duration_us == 0 || self.tick_us == 0 {
            return Err(Error::config("synthetic dimensions must be positive"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("need at least one sample per class"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::config("noise rate must lie in [0,1]"));
        }
        if !(self.bar_width > 0.0) {
            return Err(Error::config("bar width must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledStream {
    pub label: usize,
    pub stream: EventStream,
}

/// Generate a deterministic moving-bar dataset: samples are emitted class by
/// class, `samples_per_class` each.
pub fn synth_events(spec: &SyntheticDatasetSpec) -> Result<Vec<LabeledStream>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    for label in 0..spec.n_classes {
        for _ in 0..spec.samples_per_class {
            let stream = render_bar(spec, DIRECTIONS[label], &mut rng);
            out.push(LabeledStream { label, stream });
        }
    }
    Ok(out)
}

fn render_bar(spec: &SyntheticDatasetSpec, dir: (f64, f64), rng: &mut ChaCha8Rng) -> EventStream {
    let (w, h) = (spec.width as usize, spec.height as usize);
    let cx = (w as f64 - 1.0) / 2.0 + rng.random_range(-1.0..1.0);
    let cy = (h as f64 - 1.0) / 2.0 + rng.random_range(-1.0..1.0);
    let reach = 0.5 * ((w * w + h * h) as f64).sqrt() + spec.bar_width;
    let speed_jitter = rng.random_range(0.85..1.15);
    let phase = rng.random_range(0.0..0.15);
    let half = spec.bar_width / 2.0;
    let ticks = (spec.duration_us / spec.tick_us) as usize;

    let inside = |tick: usize, x: usize, y: usize| -> bool {
        let frac = phase + speed_jitter * tick as f64 / ticks.max(1) as f64;
        let pos = -reach + 2.0 * reach * frac;
        let s = (x as f64 - cx) * dir.0 + (y as f64 - cy) * dir.1;
        (s - pos).abs() < half
    };

    let mut stream = EventStream::new(spec.width, spec.height, spec.tick_us);
    let mut prev = vec![false; w * h];
    let mut batch: Vec<Event> = Vec::new();
    for tick in 0..ticks {
        batch.clear();
        let t0 = tick as u64 * spec.tick_us;
        for y in 0..h {
            for x in 0..w {
                let now = inside(tick, x, y);
                let was = prev[y * w + x];
                let polarity = match (was, now) {
                    (false, true) => Some(Polarity::On),
                    (true, false) => Some(Polarity::Off),
                    _ => None,
                };
                if let Some(polarity) = polarity {
                    batch.push(Event {
                        x: x as u32,
                        y: y as u32,
                        t_us: t0 + rng.random_range(0..spec.tick_us),
                        polarity,
                    });
                }
                if spec.noise_rate > 0.0 && rng.random_bool(spec.noise_rate) {
                    batch.push(Event {
                        x: x as u32,
                        y: y as u32,
                        t_us: t0 + rng.random_range(0..spec.tick_us),
                        polarity: Polarity::Off,
                    });
                }
                prev[y * w + x] = now;
            }
        }
        batch.sort_by_key(|e| e.t_us);
        stream.events.extend_from_slice(&batch);
    }
    stream
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(v: f64) -> Window {
        Window::from_ms(v).unwrap()
    }

    fn on(x: u32, y: u32, t_us: u64) -> Event {
        Event {
            x,
            y,
            t_us,
            polarity: Polarity::On,
        }
    }

    #[test]
    fn empty_stream_gives_zero_frames() {
        let s = EventStream::new(5, 7, 1);
        let f = aggregate_frames(&s, ms(1.0), 4).unwrap();
        assert_eq!(f.data.shape(), &[4, 2, 7, 5]);
        assert!(f.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_on_event_lands_in_its_pixel() {
        let mut s = EventStream::new(8, 8, 1);
        s.events.push(on(3, 5, 0));
        let f = aggregate_frames(&s, ms(1.0), 1).unwrap();
        let d = f.data.data();
        assert_eq!(d[(5 * 8) + 3], 1.0);
        assert_eq!(f.data.sum(), 1.0);
    }

    #[test]
    fn repeated_events_accumulate() {
        let mut s = EventStream::new(4, 4, 1);
        s.events.push(on(1, 1, 10));
        s.events.push(on(1, 1, 999));
        let f = aggregate_frames(&s, ms(1.0), 2).unwrap();
        assert_eq!(f.data.data()[4 + 1], 2.0);
    }

    #[test]
    fn boundary_event_goes_to_next_window_and_overflow_is_dropped() {
        let mut s = EventStream::new(2, 1, 1);
        s.events.push(on(0, 0, 1000));
        s.events.push(Event {
            x: 1,
            y: 0,
            t_us: 2000,
            polarity: Polarity::Off,
        });
        let f = aggregate_frames(&s, ms(1.0), 2).unwrap();
        let step1_on = f.frame(1).unwrap();
        assert_eq!(step1_on.data()[0], 1.0);
        assert_eq!(f.frame(0).unwrap().sum(), 0.0);
        assert_eq!(f.data.sum(), 1.0);
    }

    #[test]
    fn empty_dimension_is_a_config_error() {
        let s = EventStream::new(0, 4, 1);
        assert!(matches!(aggregate_frames(&s, ms(1.0), 1), Err(Error::Config(_))));
    }

    #[test]
    fn replicate_static_copies_frames() {
        let img = Tensor::from_vec(&[1, 1, 2], vec![0.25, 0.5]).unwrap();
        let one = replicate_static(&img, 1, ms(1.0)).unwrap();
        assert_eq!(one.frame(0).unwrap(), img);
        let three = replicate_static(&img, 3, ms(1.0)).unwrap();
        for t in 0..3 {
            assert_eq!(three.frame(t).unwrap(), img);
        }
        let zero = replicate_static(&Tensor::zeros(&[2, 3, 3]), 5, ms(1.0)).unwrap();
        assert_eq!(zero.data.sum(), 0.0);
        assert!(replicate_static(&Tensor::zeros(&[3, 3]), 2, ms(1.0)).is_err());
    }

    #[test]
    fn text_format_roundtrip_and_errors() {
        let mut s = EventStream::new(4, 3, 1);
        s.events.push(on(3, 2, 5));
        s.events.push(Event {
            x: 0,
            y: 0,
            t_us: 7,
            polarity: Polarity::Off,
        });
        let text = s.to_text();
        assert_eq!(text, "4,3,1\n3,2,5,1\n0,0,7,-1\n");
        assert_eq!(EventStream::parse_text(&text).unwrap(), s);
        assert!(EventStream::parse_text("4,3,1\n1,1,5,0\n").is_err());
        assert!(EventStream::parse_text("4,3,1\n4,1,5,1\n").is_err());
        assert!(EventStream::parse_text("4,3,1\n1,1,5,1\n1,1,4,1\n").is_err());
        let err = EventStream::parse_text("4,3,1\n1,1\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{}", err);
    }

    #[test]
    fn frame_binary_header_layout() {
        let f = FrameSequence {
            data: Tensor::filled(&[3, 2, 2, 5], 1.0),
            window: ms(1.5),
        };
        let bytes = f.to_bytes();
        let words: Vec<u32> = bytes[..32]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(words, vec![FRAME_MAGIC, 1, 3, 2, 2, 5, 1500, 1000]);
        assert_eq!(bytes.len(), 32 + 4 * 60);
        assert_eq!(FrameSequence::from_bytes(&bytes).unwrap(), f);
        assert!(FrameSequence::from_bytes(&bytes[..40]).is_err());
    }

    #[test]
    fn synth_counts_and_bounds() {
        let spec = SyntheticDatasetSpec {
            n_classes: 4,
            samples_per_class: 10,
            ..Default::default()
        };
        let data = synth_events(&spec).unwrap();
        assert_eq!(data.len(), 40);
        for label in 0..4 {
            assert_eq!(data.iter().filter(|d| d.label == label).count(), 10);
        }
        for d in &data {
            d.stream.validate().unwrap();
            assert!(!d.stream.events.is_empty());
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SyntheticDatasetSpec::default();
        let a: Vec<String> = synth_events(&spec).unwrap().iter().map(|d| d.stream.to_text()).collect();
        let b: Vec<String> = synth_events(&spec).unwrap().iter().map(|d| d.stream.to_text()).collect();
        assert_eq!(a, b);
        let other = SyntheticDatasetSpec { seed: 1, ..spec };
        let c: Vec<String> = synth_events(&other).unwrap().iter().map(|d| d.stream.to_text()).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_rejects_too_many_classes() {
        let spec = SyntheticDatasetSpec {
            n_classes: 9,
            ..Default::default()
        };
        assert!(matches!(synth_events(&spec), Err(Error::Config(_))));
        let spec = SyntheticDatasetSpec {
            n_classes: 1,
            ..Default::default()
        };
        assert!(synth_events(&spec).is_err());
    }
}
