//! Synthetic bouncing-sprite sequences and the `STLD` dataset format.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpriteKind {
    Square,
    Cross,
}

impl SpriteKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "square" => Some(Self::Square),
            "cross" => Some(Self::Cross),
            _ => None,
        }
    }

    /// Whether pixel (dy, dx) of a `size`-wide sprite is lit.
    fn covers(self, size: usize, dy: usize, dx: usize) -> bool {
        match self {
            SpriteKind::Square => true,
            SpriteKind::Cross => {
                let arm = (size / 3).max(1);
                let lo = (size - arm) / 2;
                let band = lo..lo + arm;
                band.contains(&dy) || band.contains(&dx)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_sequences: usize,
    /// Frames per sequence, past plus future.
    pub t_total: usize,
    /// Where a generated sequence is split into past and future.
    pub t_past: usize,
    pub height: usize,
    pub width: usize,
    pub n_shapes: usize,
    pub kind: SpriteKind,
    pub size: usize,
    /// Speed range in pixels per frame.
    pub speed: (f64, f64),
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_sequences: 64,
            t_total: 20,
            t_past: 10,
            height: 16,
            width: 16,
            n_shapes: 2,
            kind: SpriteKind::Square,
            size: 4,
            speed: (0.5, 1.5),
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_sequences == 0 || self.t_total == 0 || self.height == 0 || self.width == 0 {
            return bad("sequence count, length and frame size must be positive".into());
        }
        if self.t_past > self.t_total {
            return bad(format!("past length {} exceeds sequence length {}", self.t_past, self.t_total));
        }
        if self.size == 0 || self.size >= self.height.min(self.width) {
            return bad(format!(
                "sprite size {} must be in 1..{} for a {}x{} frame",
                self.size,
                self.height.min(self.width),
                self.height,
                self.width
            ));
        }
        let (lo, hi) = self.speed;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return bad(format!("invalid speed range ({lo}, {hi})"));
        }
        Ok(())
    }
}

/// A sprite's top-left corner and velocity, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sprite {
    pub y: f64,
    pub x: f64,
    pub vy: f64,
    pub vx: f64,
    pub size: usize,
    pub kind: SpriteKind,
}

fn reflect(pos: &mut f64, vel: &mut f64, max: f64) {
    *pos += *vel;
    // a single fold suffices while |vel| <= max
    if *pos < 0.0 {
        *pos = -*pos;
        *vel = -*vel;
    } else if *pos > max {
        *pos = 2.0 * max - *pos;
        *vel = -*vel;
    }
    *pos = pos.clamp(0.0, max);
}

impl Sprite {
    /// Advances one frame, bouncing the bounding box off the frame edges.
    pub fn advance(&mut self, height: usize, width: usize) {
        reflect(&mut self.y, &mut self.vy, (height - self.size) as f64);
        reflect(&mut self.x, &mut self.vx, (width - self.size) as f64);
    }

    /// Integer top-left corner used for rasterization.
    pub fn corner(&self) -> (usize, usize) {
        (self.y.round() as usize, self.x.round() as usize)
    }

    fn draw(&self, frame: &mut [f32], width: usize) {
        let (y0, x0) = self.corner();
        for dy in 0..self.size {
            for dx in 0..self.size {
                if self.kind.covers(self.size, dy, dx) {
                    frame[(y0 + dy) * width + x0 + dx] = 1.0;
                }
            }
        }
    }
}

/// Renders `t_total` frames of the given sprites, max-composited.
pub fn render(sprites: &[Sprite], t_total: usize, height: usize, width: usize) -> Vec<f32> {
    let mut sprites = sprites.to_vec();
    let frame = height * width;
    let mut out = vec![0.0f32; t_total * frame];
    for t in 0..t_total {
        if t > 0 {
            sprites.iter_mut().for_each(|s| s.advance(height, width));
        }
        for s in &sprites {
            s.draw(&mut out[t * frame..(t + 1) * frame], width);
        }
    }
    out
}

fn random_sprite(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Sprite {
    let max_y = (spec.height - spec.size) as f64;
    let max_x = (spec.width - spec.size) as f64;
    let (lo, hi) = spec.speed;
    let speed = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    Sprite {
        y: rng.random_range(0.0..=max_y),
        x: rng.random_range(0.0..=max_x),
        vy: speed * angle.sin(),
        vx: speed * angle.cos(),
        size: spec.size,
        kind: spec.kind,
    }
}

pub fn generate(spec: &GeneratorSpec) -> Result<SequenceBatch> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(spec.n_sequences * spec.t_total * spec.height * spec.width);
    for _ in 0..spec.n_sequences {
        let sprites: Vec<Sprite> = (0..spec.n_shapes).map(|_| random_sprite(spec, &mut rng)).collect();
        data.extend(render(&sprites, spec.t_total, spec.height, spec.width));
    }
    let tensor = Tensor::from_vec(
        &[spec.n_sequences, spec.t_total, 1, spec.height, spec.width],
        data,
    )?;
    SequenceBatch::new(tensor, spec.t_past)
}

/// Sequences `[N, T + T', C, H, W]` with the past/future boundary at `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    tensor: Tensor<f32>,
    t_past: usize,
}

impl SequenceBatch {
    pub fn new(tensor: Tensor<f32>, t_past: usize) -> Result<Self> {
        if tensor.dims().len() != 5 {
            return Err(Error::InvalidShape(tensor.dims().to_vec(), "sequence batches are [N, T, C, H, W]"));
        }
        if t_past > tensor.dims()[1] {
            return Err(Error::InvalidArgument(format!(
                "past length {t_past} exceeds sequence length {}",
                tensor.dims()[1]
            )));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("frame value {v} outside [0, 1]")));
        }
        Ok(Self { tensor, t_past })
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn len(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn t_total(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn t_past(&self) -> usize {
        self.t_past
    }

    pub fn t_future(&self) -> usize {
        self.t_total() - self.t_past
    }

    /// `[C, H, W]`.
    pub fn frame_dims(&self) -> [usize; 3] {
        let d = self.tensor.dims();
        [d[2], d[3], d[4]]
    }

    fn frames(&self, range: std::ops::Range<usize>) -> Result<Tensor<f32>> {
        let [c, h, w] = self.frame_dims();
        let frame = c * h * w;
        let per_seq = self.t_total() * frame;
        let mut out = Vec::with_capacity(self.len() * range.len() * frame);
        for s in self.tensor.data().chunks_exact(per_seq) {
            out.extend_from_slice(&s[range.start * frame..range.end * frame]);
        }
        Tensor::from_vec(&[self.len(), range.len(), c, h, w], out)
    }

    /// Frames `0..T` as `[N, T, C, H, W]`.
    pub fn past(&self) -> Result<Tensor<f32>> {
        self.frames(0..self.t_past)
    }

    /// Frames `T..T+T'` as `[N, T', C, H, W]`.
    pub fn future(&self) -> Result<Tensor<f32>> {
        self.frames(self.t_past..self.t_total())
    }

    /// Sequences at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let d = self.tensor.dims();
        let per_seq: usize = d[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * per_seq);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("sequence {i} out of {}", self.len())));
            }
            out.extend_from_slice(&self.tensor.data()[i * per_seq..(i + 1) * per_seq]);
        }
        let tensor = Tensor::from_vec(&[indices.len(), d[1], d[2], d[3], d[4]], out)?;
        Ok(Self {
            tensor,
            t_past: self.t_past,
        })
    }
}

pub const MAGIC: &[u8; 4] = b"STLD";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 32;

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "dataset",
        reason: reason.into(),
    }
}

pub fn to_bytes(batch: &SequenceBatch) -> Vec<u8> {
    let [c, h, w] = batch.frame_dims();
    let header = [batch.len(), batch.t_past(), batch.t_future(), c, h, w];
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * batch.tensor.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in header {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in batch.tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<SequenceBatch> {
    if bytes.len() < HEADER_BYTES {
        return Err(format_err(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err("bad magic, expected STLD"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let version = word(1) as u32;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let (n, t, t_out, c, h, w) = (word(2), word(3), word(4), word(5), word(6), word(7));
    let numel = [n, t + t_out, c, h, w]
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err("header dimensions overflow"))?;
    let payload = &bytes[HEADER_BYTES..];
    if Some(payload.len()) != numel.checked_mul(4) {
        return Err(format_err(format!(
            "header declares {numel} values ({} bytes) but payload has {} bytes",
            numel.saturating_mul(4),
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let tensor = Tensor::from_vec(&[n, t + t_out, c, h, w], data).map_err(|e| format_err(e.to_string()))?;
    SequenceBatch::new(tensor, t).map_err(|e| format_err(e.to_string()))
}

pub fn write_dataset(batch: &SequenceBatch, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(batch))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<SequenceBatch> {
    from_bytes(&fs::read(path)?)
}

/// Iterator over consecutive mini-batches of a dataset.
pub struct Batches<'a> {
    ds: &'a SequenceBatch,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self
            .ds
            .select(&self.order[self.pos..end])
            .expect("indices come from the dataset");
        self.pos = end;
        Some(b)
    }
}

/// Splits `ds` into `ceil(N / batch_size)` batches, optionally shuffled.
pub fn batches(ds: &SequenceBatch, batch_size: usize, shuffle_seed: Option<u64>) -> Batches<'_> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    }
}
