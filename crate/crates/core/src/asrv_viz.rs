//! Average spiking response maps and heatmap output.
//!
//! Rates are kept as integer spike counts per neuron per step and divided
//! once at read-out, so they are exact `k / N` fractions independent of
//! batching order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::event_ingest::FrameSequence;
use crate::network::{run, ForwardOptions, Model, Pass};
use crate::params::Binder;
use crate::tensor::Tensor;
use crate::training::Example;

/// Spike counts of one layer over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct AsrMap {
    pub layer: String,
    /// Neuron shape at one step, `[C][H][W]` or `[K]`.
    pub shape: Vec<usize>,
    pub steps: usize,
    pub samples: usize,
    /// `counts[t * neurons + i]` = samples in which neuron `i` fired at `t`.
    pub counts: Vec<u64>,
}

impl AsrMap {
    fn new(layer: &str, shape: &[usize], steps: usize) -> Self {
        let neurons = shape.iter().product::<usize>();
        AsrMap {
            layer: layer.to_string(),
            shape: shape.to_vec(),
            steps,
            samples: 0,
            counts: vec![0; steps * neurons],
        }
    }

    pub fn neurons(&self) -> usize {
        self.shape.iter().product()
    }

    /// Firing-rate map at step `t` with the layer's neuron shape.
    pub fn rate(&self, t: usize) -> Result<Tensor> {
        self.check_step(t)?;
        let n = self.neurons();
        let denom = self.samples.max(1) as f64;
        let data = self.counts[t * n..(t + 1) * n].iter().map(|&c| c as f64 / denom).collect();
        Tensor::from_vec(&self.shape, data)
    }

    /// Mean rate over neurons at step `t`, computed from the integer total.
    pub fn neuron_mean(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let n = self.neurons();
        let total: u64 = self.counts[t * n..(t + 1) * n].iter().sum();
        Ok(total as f64 / (n * self.samples.max(1)) as f64)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps {
            return Err(Error::config(format!("step {} outside 0..{}", t, self.steps)));
        }
        Ok(())
    }
}

/// Add the recorded spikes of one pass to per-layer maps.
pub fn accumulate(maps: &mut Vec<AsrMap>, pass: &Pass) -> Result<()> {
    let (steps, batch) = (pass.steps, pass.batch);
    if maps.is_empty() {
        for l in &pass.spikes {
            maps.push(AsrMap::new(&l.name, &l.spikes.shape()[1..], steps));
        }
    }
    if maps.len() != pass.spikes.len() {
        return Err(Error::shape("pass records a different set of layers"));
    }
    for (map, l) in maps.iter_mut().zip(&pass.spikes) {
        let n = map.neurons();
        if l.spikes.shape()[1..] != map.shape[..] || l.spikes.numel() != steps * batch * n {
            return Err(Error::shape(format!("layer {} changed shape", l.name)));
        }
        // Step-major: image `t * batch + b`.
        for (img, chunk) in l.spikes.data().chunks(n).enumerate() {
            let t = img / batch;
            let row = &mut map.counts[t * n..(t + 1) * n];
            for (c, &s) in row.iter_mut().zip(chunk) {
                if s != 0.0 {
                    *c += 1;
                }
            }
        }
        map.samples += batch;
    }
    Ok(())
}

/// Per-layer, per-step firing rates of every neuron over `data`.
pub fn average_spiking_response<M: Model + ?Sized>(
    model: &M,
    data: &[Example],
    batch_size: usize,
    opts: ForwardOptions,
) -> Result<Vec<AsrMap>> {
    if data.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    let mut maps = Vec::new();
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&FrameSequence> = chunk.iter().map(|e| &e.frames).collect();
        let (pass, _) = run(model, &batch, Binder::frozen(), opts, true)?;
        accumulate(&mut maps, &pass)?;
    }
    Ok(maps)
}

/// Mean of one sample's spikes `[T][C][H][W]` over time and channels.
pub fn collapse_sample(spikes: &Tensor) -> Result<Tensor> {
    let (t, c, h, w) = spikes.dims4()?;
    let hw = h * w;
    let mut out = vec![0.0; hw];
    for chunk in spikes.data().chunks(hw) {
        out.iter_mut().zip(chunk).for_each(|(o, &s)| *o += s);
    }
    let n = (t * c).max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Tensor::from_vec(&[h, w], out)
}

const fn build_colormap() -> [[u8; 3]; 256] {
    let mut m = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        m[i] = [i as u8, 0, (255 - i) as u8];
        i += 1;
    }
    m
}

/// Linear blue-to-red table: entry `i` is `(i, 0, 255 - i)`.
pub const COLORMAP: [[u8; 3]; 256] = build_colormap();

/// Colour of the separators between tiles.
pub const SEPARATOR_RGB: [u8; 3] = [255, 255, 255];

/// Separator width in pixels.
pub const TILE_GAP: usize = 1;

/// Colormap index of a rate in `[0, 1]`: `round(v * 255)`.
pub fn color_index(v: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::config(format!("map value {} outside [0, 1]", v)));
    }
    Ok((v * 255.0).round() as usize)
}

fn p6(width: usize, height: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    out.reserve(rgb.len() * 3);
    for px in rgb {
        out.extend_from_slice(px);
    }
    out
}

/// Binary P6 pixmap of a `[H][W]` map.
pub fn render_heatmap(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = map.dims2()?;
    let rgb = map
        .data()
        .iter()
        .map(|&v| color_index(v).map(|i| COLORMAP[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(p6(w, h, &rgb))
}

/// Row-major grid of equally sized `[H][W]` tiles separated by
/// `TILE_GAP` pixels of `SEPARATOR_RGB`; no outer border.
pub fn render_tiled(tiles: &[Tensor], cols: usize) -> Result<Vec<u8>> {
    let first = tiles.first().ok_or_else(|| Error::config("no tiles"))?;
    let (h, w) = first.dims2()?;
    let cols = cols.clamp(1, tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let width = cols * w + (cols - 1) * TILE_GAP;
    let height = rows * h + (rows - 1) * TILE_GAP;
    let mut rgb = vec![SEPARATOR_RGB; width * height];
    for (k, tile) in tiles.iter().enumerate() {
        if tile.shape() != [h, w] {
            return Err(Error::shape("tiles differ in size"));
        }
        let (r, c) = (k / cols, k % cols);
        let (y0, x0) = (r * (h + TILE_GAP), c * (w + TILE_GAP));
        for y in 0..h {
            for x in 0..w {
                let i = color_index(tile.data()[y * w + x])?;
                rgb[(y0 + y) * width + x0 + x] = COLORMAP[i];
            }
        }
    }
    Ok(p6(width, height, &rgb))
}

/// Grid columns for `n` tiles: `ceil(sqrt(n))`.
pub fn default_columns(n: usize) -> usize {
    let mut c = 1;
    while c * c < n {
        c += 1;
    }
    c
}

/// Split a `[C][H][W]` map into channel tiles; `[K]` becomes one `[1][K]` strip.
pub fn channel_tiles(map: &Tensor) -> Result<Vec<Tensor>> {
    match map.shape() {
        &[c, h, w] => (0..c).map(|i| map.slice_outer(i, 1)?.reshape(&[h, w])).collect(),
        &[k] => Ok(vec![map.clone().reshape(&[1, k])?]),
        s => Err(Error::shape(format!("cannot tile a map of shape {:?}", s))),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn emit_heatmap(map: &Tensor, path: &Path) -> Result<()> {
    write_bytes(path, &render_heatmap(map)?)
}

pub fn emit_tiled(tiles: &[Tensor], cols: usize, path: &Path) -> Result<()> {
    write_bytes(path, &render_tiled(tiles, cols)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn colormap_runs_blue_to_red() {
        assert_eq!(COLORMAP[0], [0, 0, 255]);
        assert_eq!(COLORMAP[255], [255, 0, 0]);
        assert_eq!(COLORMAP[100], [100, 0, 155]);
        assert_eq!(color_index(0.5).unwrap(), 128);
        assert!(color_index(1.01).is_err());
        assert!(color_index(f64::NAN).is_err());
    }

    #[test]
    fn collapse_averages_time_and_channels() {
        // T=2, C=2, one hot slice at (t=1, c=0).
        let mut d = vec![0.0; 2 * 2 * 2 * 2];
        d[8..12].copy_from_slice(&[1.0, 0.0, 1.0, 1.0]);
        let m = collapse_sample(&t(&[2, 2, 2, 2], d)).unwrap();
        assert_eq!(m.data(), &[0.25, 0.0, 0.25, 0.25]);
        let ones = collapse_sample(&Tensor::filled(&[3, 2, 2, 2], 1.0)).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_maps_use_end_colours() {
        let img = render_heatmap(&Tensor::zeros(&[2, 3])).unwrap();
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert!(img[header.len()..].chunks(3).all(|p| p == [0, 0, 255]));
    }

    #[test]
    fn tiles_are_separated_by_one_pixel() {
        let tiles = vec![Tensor::zeros(&[1, 1]), Tensor::filled(&[1, 1], 1.0), Tensor::zeros(&[1, 1])];
        let img = render_tiled(&tiles, 2).unwrap();
        let header = b"P6\n3 3\n255\n";
        assert_eq!(&img[..header.len()], header);
        let px: Vec<&[u8]> = img[header.len()..].chunks(3).collect();
        assert_eq!(px[0], [0, 0, 255]);
        assert_eq!(px[1], SEPARATOR_RGB);
        assert_eq!(px[2], [255, 0, 0]);
        assert!(px[3..6].iter().all(|p| *p == SEPARATOR_RGB));
        assert_eq!(px[6], [0, 0, 255]);
        assert_eq!(px[8], SEPARATOR_RGB);
    }

    #[test]
    fn default_columns_is_ceil_sqrt() {
        assert_eq!(
            [1, 2, 4, 5, 9, 10].map(default_columns),
            [1, 2, 2, 3, 3, 4]
        );
    }

    #[test]
    fn channel_tiles_split_and_strip() {
        let m = t(&[2, 1, 2], vec![0.0, 0.5, 1.0, 0.25]);
        let tiles = channel_tiles(&m).unwrap();
        assert_eq!(tiles[1].data(), &[1.0, 0.25]);
        let fc = channel_tiles(&t(&[3], vec![0.0; 3])).unwrap();
        assert_eq!(fc[0].shape(), &[1, 3]);
    }
}
