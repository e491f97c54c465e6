//! Procedurally generated fine-grained image dataset and its raw binary
//! export format.
//!
//! Every image shows one randomly placed, sized, rotated and coloured body
//! on a noisy background. In fine-grained mode the class is carried only by
//! a gray band on the body whose vertical intensity profile depends on the
//! class, drawn at a random position with random polarity. All profiles
//! share one autocorrelation, so class-conditional pixel means and
//! covariances match and a linear model on raw pixels stays at chance.
//! With fine-grained mode off the class instead fixes the body's row and
//! colour.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
const DATASET_MAGIC: &[u8; 4] = b"CRXD";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub image_size: usize,
    pub fine_grained: bool,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub train_per_class: usize,
    /// Validation samples per class; `None` carves 10% out of the training
    /// samples instead.
    pub val_per_class: Option<usize>,
    pub test_per_class: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            image_size: 64,
            fine_grained: true,
            noise: 0.05,
            train_per_class: 50,
            val_per_class: Some(10),
            test_per_class: 20,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > MAX_CLASSES {
            return Err(Error::config(format!("classes must be in 2..={MAX_CLASSES}")));
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size must be at least 16"));
        }
        let (train, val) = self.split_counts();
        if train == 0 || val == 0 || self.test_per_class == 0 {
            return Err(Error::config("every split needs at least one sample per class"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise must be non-negative"));
        }
        Ok(())
    }

    /// (train, val) samples per class after carving.
    pub fn split_counts(&self) -> (usize, usize) {
        match self.val_per_class {
            Some(v) => (self.train_per_class, v),
            None => {
                let v = (self.train_per_class as f64 * 0.1).round().max(1.0) as usize;
                (self.train_per_class.saturating_sub(v), v)
            }
        }
    }

    /// Vertical intensity profile that marks `class`, with unit norm.
    pub fn class_profile(&self, class: usize) -> [f64; PROFILE_LEN] {
        class_profile(class)
    }
}

/// Two-tap factors whose convolution gives every class profile. Reversing
/// a factor leaves the profile's autocorrelation unchanged, so all classes
/// share one power spectrum.
const PROFILE_FACTORS: [f64; 4] = [0.5, -0.25, 1.75, -1.5];

/// Peak scale of the marking relative to its unit-norm profile.
const GLYPH_AMPLITUDE: f64 = 0.8;

/// Rows of a class profile.
pub const PROFILE_LEN: usize = PROFILE_FACTORS.len() + 1;

/// Factor-reversal bit patterns in class order, most distinct first.
const CLASS_PATTERNS: [u8; 16] = [0, 6, 12, 8, 5, 3, 11, 4, 7, 13, 2, 9, 1, 14, 10, 15];

pub const MAX_CLASSES: usize = CLASS_PATTERNS.len();

fn class_profile(class: usize) -> [f64; PROFILE_LEN] {
    let bits = CLASS_PATTERNS[class % MAX_CLASSES];
    let mut h = vec![1.0];
    for (i, &a) in PROFILE_FACTORS.iter().enumerate() {
        let f = if bits >> (PROFILE_FACTORS.len() - 1 - i) & 1 == 0 { [1.0, a] } else { [a, 1.0] };
        let mut next = vec![0.0; h.len() + 1];
        for (j, &v) in h.iter().enumerate() {
            next[j] += v * f[0];
            next[j + 1] += v * f[1];
        }
        h = next;
    }
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = [0.0; PROFILE_LEN];
    for (o, v) in out.iter_mut().zip(&h) {
        *o = v / norm;
    }
    out
}

/// Images `[N×3×H×W]` with values on the 1/255 grid in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Gather a batch, flipping the samples whose `flip` flag is set.
    pub fn batch(&self, indices: &[usize], flip: Option<&[bool]>) -> (Tensor, Vec<usize>) {
        let mut images = self.images.select_rows(indices);
        if let Some(flags) = flip {
            let s = self.image_size();
            let per = CHANNELS * s * s;
            for (i, &f) in flags.iter().enumerate() {
                if f {
                    flip_horizontal(&mut images.data_mut()[i * per..(i + 1) * per], s);
                }
            }
        }
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Mirror every row of each `size×size` plane in a CHW buffer.
pub fn flip_horizontal(chw: &mut [f64], size: usize) {
    for row in chw.chunks_mut(size) {
        row.reverse();
    }
}

fn sample_seed(seed: u64, stream: u64, class: usize, index: usize) -> u64 {
    // SplitMix64 finalizer over the packed coordinates.
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream << 48)
        .wrapping_add((class as u64) << 24)
        .wrapping_add(index as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn render(spec: &SynthSpec, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = spec.image_size;
    let sf = s as f64;
    let mut img = vec![0.0; CHANNELS * s * s];

    let base: f64 = rng.gen_range(0.25..0.45);
    let (gx, gy): (f64, f64) = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
    let (cx, cy, rx, ry, rot, color) = if spec.fine_grained {
        let color: [f64; 3] = [rng.gen_range(0.4..0.6), rng.gen_range(0.4..0.6), rng.gen_range(0.4..0.6)];
        (
            rng.gen_range(0.4..0.6) * sf,
            rng.gen_range(0.4..0.6) * sf,
            rng.gen_range(0.26..0.36) * sf,
            rng.gen_range(0.2..0.3) * sf,
            rng.gen_range(0.0..std::f64::consts::PI),
            color,
        )
    } else {
        // Row and colour encode the class; both survive a horizontal flip.
        let cell = sf / spec.classes as f64;
        let hue = std::f64::consts::TAU * class as f64 / spec.classes as f64;
        let color = [0.5 + 0.4 * hue.cos(), 0.5 + 0.4 * (hue + 2.1).cos(), 0.5 + 0.4 * (hue + 4.2).cos()];
        (
            sf / 2.0 + rng.gen_range(-0.05..0.05) * sf,
            (class as f64 + 0.5) * cell + rng.gen_range(-0.1..0.1) * cell,
            0.3 * sf,
            0.45 * cell,
            0.0,
            color,
        )
    };
    let (sin_r, cos_r) = rot.sin_cos();
    for y in 0..s {
        for x in 0..s {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (fx - cx, fy - cy);
            let u = (dx * cos_r + dy * sin_r) / rx;
            let v = (-dx * sin_r + dy * cos_r) / ry;
            let inside = u * u + v * v <= 1.0;
            for c in 0..CHANNELS {
                let bg = base + gx * (fx / sf - 0.5) + gy * (fy / sf - 0.5);
                img[(c * s + y) * s + x] = if inside { color[c] } else { bg };
            }
        }
    }

    if spec.fine_grained {
        let row = (s / 16).max(1);
        let (gw, gh) = (s / 2, PROFILE_LEN * row);
        let jitter = sf / 8.0;
        let place = |c: f64, extent: usize, rng: &mut ChaCha8Rng| {
            (c + rng.gen_range(-jitter..jitter) - extent as f64 / 2.0).round().clamp(0.0, (s - extent) as f64) as usize
        };
        let px = place(cx, gw, rng);
        let py = place(cy, gh, rng);
        let polarity = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let profile = class_profile(class);
        for y in py..py + gh {
            let delta = polarity * GLYPH_AMPLITUDE * profile[(y - py) / row];
            for x in px..px + gw {
                for c in 0..CHANNELS {
                    img[(c * s + y) * s + x] += delta;
                }
            }
        }
    }

    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("valid sigma");
        for v in &mut img {
            *v += normal.sample(rng);
        }
    }
    for v in &mut img {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    img
}

fn generate(spec: &SynthSpec, seed: u64, stream: u64, per_class: usize) -> Dataset {
    let s = spec.image_size;
    let mut data = Vec::with_capacity(spec.classes * per_class * CHANNELS * s * s);
    let mut labels = Vec::with_capacity(spec.classes * per_class);
    for i in 0..per_class {
        for k in 0..spec.classes {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, stream, k, i));
            data.extend(render(spec, k, &mut rng));
            labels.push(k);
        }
    }
    let images = Tensor::from_vec(&[labels.len(), CHANNELS, s, s], data);
    Dataset { images, labels }
}

/// Deterministic train/val/test splits. Each split draws from its own
/// random stream, so the splits never share a sample.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Splits> {
    spec.validate()?;
    let test = generate(spec, seed, 2, spec.test_per_class);
    let (train, val) = match spec.val_per_class {
        Some(v) => (generate(spec, seed, 0, spec.train_per_class), generate(spec, seed, 1, v)),
        None => {
            let full = generate(spec, seed, 0, spec.train_per_class);
            let (_, v) = spec.split_counts();
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, 3, 0, 0));
            let mut val_idx = Vec::new();
            let mut train_idx = Vec::new();
            for k in 0..spec.classes {
                let mut members: Vec<usize> = (0..full.len()).filter(|&i| full.labels[i] == k).collect();
                members.shuffle(&mut rng);
                val_idx.extend_from_slice(&members[..v]);
                train_idx.extend_from_slice(&members[v..]);
            }
            train_idx.sort_unstable();
            val_idx.sort_unstable();
            let pick = |idx: &[usize]| Dataset {
                images: full.images.select_rows(idx),
                labels: idx.iter().map(|&i| full.labels[i]).collect(),
            };
            (pick(&train_idx), pick(&val_idx))
        }
    };
    Ok(Splits { train, val, test })
}

/// Write `images.bin` and `labels.csv` into `dir`.
///
/// `images.bin`: `"CRXD"`, u32 count, u16 height, u16 width, u8 channels
/// (all little-endian), then each image's pixels as u8 in channel, row,
/// column order.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (n, c, h, w) = ds.images.dims4()?;
    let mut out = BufWriter::new(File::create(dir.join("images.bin"))?);
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&(n as u32).to_le_bytes())?;
    out.write_all(&(h as u16).to_le_bytes())?;
    out.write_all(&(w as u16).to_le_bytes())?;
    out.write_all(&[c as u8])?;
    let bytes: Vec<u8> = ds.images.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    out.write_all(&bytes)?;
    out.flush()?;

    let mut csv = String::from("index,label\n");
    for (i, l) in ds.labels.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    fs::write(dir.join("labels.csv"), csv)?;
    Ok(())
}

/// Read an `images.bin` file back into `[N×C×H×W]` values in `[0, 1]`.
pub fn read_images(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 13 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format(format!("{}: not a CRXD image file", path.display())));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let h = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let w = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let c = bytes[12] as usize;
    let body = &bytes[13..];
    if n == 0 || body.len() != n * c * h * w {
        return Err(Error::Format(format!(
            "{}: header announces {n}x{c}x{h}x{w} pixels, file holds {}",
            path.display(),
            body.len()
        )));
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(&[n, c, h, w], data)
}

/// Read `labels.csv` as written by [`export_dataset`].
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().skip(1).enumerate() {
        let (idx, label) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("labels.csv line {}: '{line}'", i + 2)))?;
        if idx.trim().parse::<usize>().ok() != Some(i) {
            return Err(Error::Format(format!("labels.csv line {}: index out of order", i + 2)));
        }
        labels.push(label.trim().parse().map_err(|_| Error::Format(format!("bad label '{label}'")))?);
    }
    Ok(labels)
}
