//! Activation-map export: per-excitation heatmaps, overlays on the input
//! and a per-stage max-over-excitations map, written as PGM/PPM files.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use crate::autodiff::Graph;
use crate::blocks::Mode;
use crate::data::CHANNELS;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{argmax_rows, combined_prediction, CrossXModel, STAGE_G, STAGE_L, STAGE_LM1, STAGE_NAMES};
use crate::registry::{Named, Registry};
use crate::tensor::Tensor;

/// Overlay weight of the heatmap.
pub const OVERLAY_ALPHA: f64 = 0.5;
/// Value of a heatmap whose activation is constant.
pub const FLAT_LEVEL: f64 = 128.0;

/// Inputs available when reducing one excitation map to a single plane.
pub struct CamInput<'a> {
    /// `C×h×w` activations of one image.
    pub map: &'a [f64],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Classifier weights of this excitation's channels for the predicted
    /// class, when the stage has a head.
    pub class_weights: Option<&'a [f64]>,
}

/// Collapses the channels of an excitation map into one `h×w` plane.
pub trait CamStrategy: Named + Send + Sync {
    fn reduce(&self, input: &CamInput<'_>) -> Result<Vec<f64>>;
}

/// Mean over channels.
pub struct ChannelMean;

impl Named for ChannelMean {
    fn name(&self) -> &str {
        "channel-mean"
    }
}

impl CamStrategy for ChannelMean {
    fn reduce(&self, input: &CamInput<'_>) -> Result<Vec<f64>> {
        let w = vec![1.0 / input.channels as f64; input.channels];
        Ok(weighted_sum(input, &w))
    }
}

/// Channels weighted by the stage classifier's weights for the predicted
/// class.
pub struct ClassifierWeighted;

impl Named for ClassifierWeighted {
    fn name(&self) -> &str {
        "classifier-weighted"
    }
}

impl CamStrategy for ClassifierWeighted {
    fn reduce(&self, input: &CamInput<'_>) -> Result<Vec<f64>> {
        let w = input
            .class_weights
            .ok_or_else(|| Error::contract("classifier-weighted maps need a classifier on this stage"))?;
        Ok(weighted_sum(input, w))
    }
}

fn weighted_sum(input: &CamInput<'_>, weights: &[f64]) -> Vec<f64> {
    let plane = input.height * input.width;
    let mut out = vec![0.0; plane];
    for (c, &wc) in weights.iter().enumerate().take(input.channels) {
        for (o, &v) in out.iter_mut().zip(&input.map[c * plane..(c + 1) * plane]) {
            *o += wc * v;
        }
    }
    out
}

pub fn builtin() -> &'static Registry<dyn CamStrategy> {
    static REGISTRY: OnceLock<Registry<dyn CamStrategy>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn CamStrategy> = Registry::new("cam mode");
        r.register(Arc::new(ChannelMean)).expect("unique");
        r.register(Arc::new(ClassifierWeighted)).expect("unique");
        r
    })
}

pub fn lookup(name: &str) -> Result<Arc<dyn CamStrategy>> {
    builtin().get(name)
}

/// Min–max scale to `[0, 255]`; a constant plane maps to [`FLAT_LEVEL`].
pub fn normalize_to_levels(plane: &[f64]) -> Vec<f64> {
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![FLAT_LEVEL; plane.len()];
    }
    plane.iter().map(|v| 255.0 * (v - lo) / (hi - lo)).collect()
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn encode_pgm(width: usize, height: usize, levels: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(levels.iter().map(|&v| to_u8(v)));
    out
}

/// `rgb` is planar `3×h×w` in `[0, 1]`.
pub fn encode_ppm(width: usize, height: usize, rgb: &[f64]) -> Vec<u8> {
    let plane = width * height;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_u8(rgb[c * plane + i] * 255.0));
        }
    }
    out
}

/// Blend a `[0, 255]` heatmap over a planar RGB image in `[0, 1]`.
pub fn overlay(image: &[f64], heat: &[f64]) -> Vec<f64> {
    let plane = heat.len();
    (0..CHANNELS * plane)
        .map(|i| (1.0 - OVERLAY_ALPHA) * image[i] + OVERLAY_ALPHA * heat[i % plane] / 255.0)
        .collect()
}

/// Write maps for every image of `images` into `out`. Stages are visited in
/// the order `L−1`, `L`, `G`; disabled branches are skipped. Returns the
/// written paths in order.
pub fn export_cams(
    model: &mut CrossXModel,
    images: &Tensor,
    strategy: &dyn CamStrategy,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (n, c, size_h, size_w) = images.dims4()?;
    if c != CHANNELS {
        return Err(Error::dim(format!("expected {CHANNELS}-channel images, got {c}")));
    }
    fs::create_dir_all(out)?;
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, images, Mode::Eval)?;
    let combined = combined_prediction(&mut g, &fwd.logits)?;
    let predicted = argmax_rows(g.value(combined));
    let heads = [Some(&model.head_l), model.head_lm1.as_ref(), model.head_g.as_ref()];
    let k = model.classes;

    let mut written = Vec::new();
    let mut write = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = out.join(name);
        fs::write(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    let image_plane = CHANNELS * size_h * size_w;
    for i in 0..n {
        let img = &images.data()[i * image_plane..(i + 1) * image_plane];
        for s in [STAGE_LM1, STAGE_L, STAGE_G] {
            let Some(maps) = &fwd.maps[s] else { continue };
            let stage = STAGE_NAMES[s];
            let mut combined_map: Option<Vec<f64>> = None;
            for (p, &m) in maps.iter().enumerate() {
                let (_, ch, h, w) = g.value(m).dims4()?;
                let per = ch * h * w;
                let map = &g.value(m).data()[i * per..(i + 1) * per];
                let class_weights: Option<Vec<f64>> = heads[s].map(|head| {
                    (0..ch).map(|cc| head.weight.data()[(p * ch + cc) * k + predicted[i]]).collect()
                });
                let input = CamInput { map, channels: ch, height: h, width: w, class_weights: class_weights.as_deref() };
                let plane = strategy.reduce(&input)?;
                let levels = normalize_to_levels(&plane);
                let heat = kernels::resize_planes(&levels, 1, h, w, size_h, size_w);
                write(format!("img{i:04}_{stage}_p{p}.pgm"), encode_pgm(size_w, size_h, &heat))?;
                write(format!("img{i:04}_{stage}_p{p}_overlay.ppm"), encode_ppm(size_w, size_h, &overlay(img, &heat)))?;
                combined_map = Some(match combined_map {
                    None => heat,
                    Some(acc) => acc.iter().zip(&heat).map(|(a, b)| a.max(*b)).collect(),
                });
            }
            if let Some(cm) = combined_map {
                write(format!("img{i:04}_{stage}_combined.pgm"), encode_pgm(size_w, size_h, &cm))?;
            }
        }
    }
    Ok(written)
}

/// Parse a binary PGM (`P5`, maxval 255). Returns width, height, pixels.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format("expected an 8-bit binary PGM".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM extent {s}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| Error::Format("truncated PGM data".into()))?;
    Ok((w, h, data.to_vec()))
}
