//! Deterministic synthetic videos, frame samplers, augmentation and the
//! network input encoding.
//!
//! Every video shows a few square shapes sharing one global velocity. The
//! label is the vertical component of that velocity (still, up or down);
//! the horizontal component is a distractor drawn independently of the
//! label, so a horizontal flip maps every latent to one with the same label.
//!
//! Start positions are drawn so that the position of any shape in a frame
//! taken at a uniformly random time has the same distribution under every
//! class: still shapes are offset by a per-video phase that plays the role
//! of elapsed time. A single frame therefore carries no label information.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{DType, Tensor};

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["still", "up", "down"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub videos: usize,
    #[serde(default = "d_length")]
    pub length: usize,
    #[serde(default = "d_side")]
    pub height: usize,
    #[serde(default = "d_side")]
    pub width: usize,
    #[serde(default = "d_shapes")]
    pub shapes: usize,
    #[serde(default = "d_min")]
    pub min_size: usize,
    #[serde(default = "d_max")]
    pub max_size: usize,
    #[serde(default = "d_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_length() -> usize {
    24
}
fn d_side() -> usize {
    32
}
fn d_shapes() -> usize {
    2
}
fn d_min() -> usize {
    5
}
fn d_max() -> usize {
    7
}
fn d_noise() -> f64 {
    0.05
}

impl SyntheticSpec {
    pub fn new(videos: usize, seed: u64) -> Self {
        SyntheticSpec {
            videos,
            length: d_length(),
            height: d_side(),
            width: d_side(),
            shapes: d_shapes(),
            min_size: d_min(),
            max_size: d_max(),
            noise: d_noise(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("synthetic spec", d));
        if self.videos == 0 || self.length < 2 || self.shapes == 0 {
            return bad("need at least one video, two frames and one shape".into());
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad(format!("shape sizes {}..={} are invalid", self.min_size, self.max_size));
        }
        let travel = self.length - 1;
        for (axis, ext) in [("height", self.height), ("width", self.width)] {
            if self.max_size + travel > ext {
                return bad(format!(
                    "shape of {} plus {travel} pixels of travel exceeds frame {axis} {ext}",
                    self.max_size
                ));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be finite and non-negative", self.noise));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeLatent {
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
}

/// Generator latents of one video; velocities in pixels per frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Latent {
    pub vx: i64,
    pub vy: i64,
    pub shapes: Vec<ShapeLatent>,
}

impl Latent {
    /// The class is the vertical motion alone.
    pub fn label(&self) -> usize {
        match self.vy.signum() {
            0 => 0,
            -1 => 1,
            _ => 2,
        }
    }

    /// Latent of the horizontally mirrored video.
    pub fn flipped(&self, width: usize) -> Latent {
        let shapes = self.shapes.iter().map(|s| ShapeLatent { x0: width - s.size - s.x0, ..*s }).collect();
        Latent { vx: -self.vx, vy: self.vy, shapes }
    }

    pub fn position(&self, shape: &ShapeLatent, t: usize) -> (usize, usize) {
        let x = shape.x0 as i64 + self.vx * t as i64;
        let y = shape.y0 as i64 + self.vy * t as i64;
        (x as usize, y as usize)
    }
}

fn velocity_for(label: usize) -> i64 {
    match label {
        0 => 0,
        1 => -1,
        _ => 1,
    }
}

fn start(rng: &mut ChaCha8Rng, v: i64, ext: usize, size: usize, travel: usize, phase: usize) -> usize {
    let slack = ext - size - travel;
    match v.signum() {
        1 => rng.gen_range(0..=slack),
        -1 => travel + rng.gen_range(0..=slack),
        _ => rng.gen_range(0..=slack) + phase,
    }
}

/// Draws the latents of video `id` from its own derived stream.
pub fn latent(spec: &SyntheticSpec, id: usize) -> Latent {
    let mut rng = seed::stream(seed::derive_index(spec.seed, id as u64), "video");
    let label = id % NUM_CLASSES;
    let vy = velocity_for(label);
    let vx = rng.gen_range(-1..=1i64);
    let travel = spec.length - 1;
    let phase_x = rng.gen_range(0..spec.length);
    let phase_y = rng.gen_range(0..spec.length);
    let shapes = (0..spec.shapes)
        .map(|_| {
            let size = rng.gen_range(spec.min_size..=spec.max_size);
            let x0 = start(&mut rng, vx, spec.width, size, travel, phase_x);
            let y0 = start(&mut rng, vy, spec.height, size, travel, phase_y);
            ShapeLatent { x0, y0, size }
        })
        .collect();
    Latent { vx, vy, shapes }
}

/// Draws frames `[L, H, W]` for a latent; noise comes from `rng`.
pub fn render(spec: &SyntheticSpec, lat: &Latent, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (l, h, w) = (spec.length, spec.height, spec.width);
    let mut data = vec![0.0; l * h * w];
    for t in 0..l {
        let frame = &mut data[t * h * w..(t + 1) * h * w];
        for s in &lat.shapes {
            let (x, y) = lat.position(s, t);
            for row in y..y + s.size {
                frame[row * w + x..row * w + x + s.size].fill(1.0);
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid("synthetic spec", e.to_string()))?;
        for v in &mut data {
            *v += normal.sample(rng);
        }
    }
    Tensor::new(vec![l, h, w], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: usize,
    pub label: usize,
    /// Grayscale frames `[L, H, W]`.
    pub frames: Tensor,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub videos: Vec<Video>,
    pub num_classes: usize,
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let videos = (0..spec.videos)
        .map(|id| {
            let lat = latent(spec, id);
            let mut rng = seed::stream(seed::derive_index(spec.seed, id as u64), "noise");
            Ok(Video { id, label: lat.label(), frames: render(spec, &lat, &mut rng)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { videos, num_classes: NUM_CLASSES })
}

const MAGIC: &[u8; 4] = b"LGDV";
const FORMAT_VERSION: u32 = 1;

impl Dataset {
    pub fn frame_shape(&self) -> Result<[usize; 3]> {
        let first = self.videos.first().ok_or_else(|| Error::invalid("dataset", "no videos"))?;
        let s = first.frames.shape();
        Ok([s[0], s[1], s[2]])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for v in &self.videos {
            counts[v.label] += 1;
        }
        counts
    }

    /// Binary layout, little-endian: magic, version u32, dtype code u8,
    /// classes u32, count u64, length/height/width u32, labels u32 × count,
    /// then all frames in video order.
    pub fn write_to<W: Write>(&self, out: &mut W, dtype: DType) -> Result<()> {
        let [l, h, w] = self.frame_shape()?;
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&[dtype.code()])?;
        out.write_all(&(self.num_classes as u32).to_le_bytes())?;
        out.write_all(&(self.videos.len() as u64).to_le_bytes())?;
        for e in [l, h, w] {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in &self.videos {
            out.write_all(&(v.label as u32).to_le_bytes())?;
        }
        for v in &self.videos {
            if v.frames.shape() != [l, h, w] {
                return Err(Error::Format(format!("video {} has shape {:?}", v.id, v.frames.shape())));
            }
            for &x in v.frames.data() {
                match dtype {
                    DType::Single => out.write_all(&(x as f32).to_le_bytes())?,
                    DType::Double => out.write_all(&x.to_le_bytes())?,
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Dataset> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let version = read_u32(input)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let mut code = [0u8; 1];
        input.read_exact(&mut code)?;
        let dtype = DType::from_code(code[0])?;
        let classes = read_u32(input)? as usize;
        let mut count = [0u8; 8];
        input.read_exact(&mut count)?;
        let count = u64::from_le_bytes(count) as usize;
        let (l, h, w) = (read_u32(input)? as usize, read_u32(input)? as usize, read_u32(input)? as usize);
        if classes < 2 || count == 0 || l == 0 || h == 0 || w == 0 {
            return Err(Error::Format("degenerate dataset header".into()));
        }
        let labels = (0..count).map(|_| read_u32(input).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Format(format!("label {bad} outside {classes} classes")));
        }
        let per = l * h * w;
        let mut buf = vec![0u8; per * dtype.size()];
        let mut videos = Vec::with_capacity(count);
        for (id, label) in labels.into_iter().enumerate() {
            input.read_exact(&mut buf)?;
            let data = match dtype {
                DType::Single => buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                DType::Double => buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            videos.push(Video { id, label, frames: Tensor::new(vec![l, h, w], data)? });
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after dataset".into()));
        }
        Ok(Dataset { videos, num_classes: classes })
    }

    pub fn save(&self, path: &Path, dtype: DType) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        self.write_to(&mut f, dtype)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Frame-selection mode within a snippet or for a clip start.
pub enum Sampling<'a> {
    Center,
    Random(&'a mut ChaCha8Rng),
}

/// `[floor(s·L/T), floor((s+1)·L/T))` for snippet `s`.
pub fn snippet_bounds(len: usize, t: usize, s: usize) -> (usize, usize) {
    (s * len / t, (s + 1) * len / t)
}

/// One frame index per snippet.
pub fn snippet_indices(len: usize, t: usize, mode: Sampling<'_>) -> Result<Vec<usize>> {
    if t == 0 || len < t {
        return Err(Error::invalid("sample_snippets", format!("video of {len} frames is shorter than {t} snippets")));
    }
    let mut rng = match mode {
        Sampling::Center => None,
        Sampling::Random(r) => Some(r),
    };
    Ok((0..t)
        .map(|s| {
            let (a, b) = snippet_bounds(len, t, s);
            match rng.as_deref_mut() {
                None => (a + b - 1) / 2,
                Some(r) => r.gen_range(a..b),
            }
        })
        .collect())
}

/// Frame indices of inference sample `k` of `n`: the same relative
/// position inside every snippet, spread uniformly over the snippet.
pub fn snippet_indices_uniform(len: usize, t: usize, k: usize, n: usize) -> Result<Vec<usize>> {
    if t == 0 || len < t || n == 0 || k >= n {
        return Err(Error::invalid("sample_snippets", format!("cannot take sample {k}/{n} of {t} snippets from {len} frames")));
    }
    Ok((0..t)
        .map(|s| {
            let (a, b) = snippet_bounds(len, t, s);
            let span = b - a;
            let off = ((2 * k + 1) * span).saturating_sub(n) / (2 * n);
            a + off.min(span - 1)
        })
        .collect())
}

/// Start of a `t`-frame clip: centered for `Center`, uniform otherwise.
pub fn clip_start(len: usize, t: usize, mode: Sampling<'_>) -> Result<usize> {
    if t == 0 || len < t {
        return Err(Error::invalid("sample_clip", format!("video of {len} frames is shorter than clip {t}")));
    }
    Ok(match mode {
        Sampling::Center => (len - t) / 2,
        Sampling::Random(r) => r.gen_range(0..=len - t),
    })
}

/// Starts of `n` inference clips spaced uniformly over `[0, L − T]`,
/// rounding half up.
pub fn clip_starts_uniform(len: usize, t: usize, n: usize) -> Result<Vec<usize>> {
    if t == 0 || len < t || n == 0 {
        return Err(Error::invalid("sample_clip", format!("cannot place {n} clips of {t} in {len} frames")));
    }
    if n == 1 {
        return Ok(vec![(len - t) / 2]);
    }
    let span = len - t;
    Ok((0..n).map(|k| (2 * k * span + (n - 1)) / (2 * (n - 1))).collect())
}

/// Gathers frames `[L, H, W]` at the given indices.
pub fn gather_frames(frames: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 3 {
        return Err(Error::shape("gather_frames", format!("expected [L, H, W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let mut out = Vec::with_capacity(idx.len() * plane);
    for &i in idx {
        if i >= s[0] {
            return Err(Error::invalid("gather_frames", format!("frame {i} outside {} frames", s[0])));
        }
        out.extend_from_slice(&frames.data()[i * plane..(i + 1) * plane]);
    }
    Tensor::new(vec![idx.len(), s[1], s[2]], out)
}

/// Repeats the video from its start until it has at least `min_len` frames.
pub fn loop_pad(frames: &Tensor, min_len: usize) -> Result<Tensor> {
    let len = frames.shape()[0];
    if len == 0 {
        return Err(Error::invalid("loop_pad", "empty video"));
    }
    if len >= min_len {
        return Ok(frames.clone());
    }
    let idx: Vec<usize> = (0..min_len).map(|i| i % len).collect();
    gather_frames(frames, &idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AugmentFlags {
    #[serde(default)]
    pub flip: bool,
    /// Square crop side; `None` keeps the full frame.
    #[serde(default)]
    pub crop: Option<usize>,
}

pub fn flip_horizontal(frames: &Tensor) -> Tensor {
    let s = frames.shape();
    let w = s[s.len() - 1];
    let mut out = frames.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Crops `[T, H, W]` to `size × size` at `(top, left)`.
pub fn crop(frames: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let s = frames.shape();
    let (t, h, w) = (s[0], s[1], s[2]);
    if size == 0 || top + size > h || left + size > w {
        return Err(Error::invalid("crop", format!("crop {size} at ({top}, {left}) exceeds {h}×{w}")));
    }
    let mut out = Vec::with_capacity(t * size * size);
    for f in 0..t {
        for r in top..top + size {
            let base = (f * h + r) * w + left;
            out.extend_from_slice(&frames.data()[base..base + size]);
        }
    }
    Tensor::new(vec![t, size, size], out)
}

/// Center crop used at inference.
pub fn center_crop(frames: &Tensor, size: usize) -> Result<Tensor> {
    let s = frames.shape();
    if size > s[1] || size > s[2] {
        return Err(Error::invalid("crop", format!("crop {size} exceeds {}×{}", s[1], s[2])));
    }
    crop(frames, (s[1] - size) / 2, (s[2] - size) / 2, size)
}

/// One flip decision and one crop offset shared by all frames.
pub fn augment(frames: &Tensor, flags: AugmentFlags, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 3 {
        return Err(Error::shape("augment", format!("expected [T, H, W], got {s:?}")));
    }
    let mut out = frames.clone();
    if let Some(size) = flags.crop {
        if size > s[1] || size > s[2] || size == 0 {
            return Err(Error::invalid("augment", format!("crop {size} exceeds {}×{}", s[1], s[2])));
        }
        let top = rng.gen_range(0..=s[1] - size);
        let left = rng.gen_range(0..=s[2] - size);
        out = crop(&out, top, left, size)?;
    }
    if flags.flip && rng.gen::<bool>() {
        out = flip_horizontal(&out);
    }
    Ok(out)
}

/// How grayscale frames become the three network input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputEncoding {
    /// `[v, v, v]`.
    Replicate,
    /// `[v, v·x̂·τ, v·ŷ·τ]`: intensity tagged with its column and row in
    /// `[-1, 1]` and the frame's centred position `τ ∈ [-1, 1]` in the sample.
    #[default]
    Position,
}

fn ramp(i: usize, n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// `[T, H, W]` frames to a `[3, T, H, W]` input.
pub fn encode(frames: &Tensor, enc: InputEncoding) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 3 {
        return Err(Error::shape("encode", format!("expected [T, H, W], got {s:?}")));
    }
    let (t, h, w) = (s[0], s[1], s[2]);
    let v = frames.data();
    let mut out = Vec::with_capacity(3 * v.len());
    out.extend_from_slice(v);
    match enc {
        InputEncoding::Replicate => {
            out.extend_from_slice(v);
            out.extend_from_slice(v);
        }
        InputEncoding::Position => {
            for axis in 0..2 {
                for f in 0..t {
                    let tau = ramp(f, t);
                    for r in 0..h {
                        for c in 0..w {
                            let pos = if axis == 0 { ramp(c, w) } else { ramp(r, h) };
                            out.push(v[(f * h + r) * w + c] * pos * tau);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, t, h, w], out)
}
