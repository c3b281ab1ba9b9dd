//! Synthetic cluttered classification tasks with per-patch relevance masks,
//! the on-disk dataset format, and the attention focus score.
//!
//! An image is a grid of patches on a mid-gray background. Signal patches
//! carry the class texture; distractor patches carry textures drawn from a
//! pool shared by every class. Textures are fixed ±1 patterns from a seeded
//! bank, optionally overlaid with a common marker pattern that makes a patch
//! look salient regardless of its identity.

use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_u16, put_u32, read_file, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"TDDS";
pub const DATASET_VERSION: u16 = 1;

/// Background intensity of empty patches.
const BACKGROUND: f32 = 0.5;
/// Contrast of each ±1 pattern layered onto a patch.
const CONTRAST: f32 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[channels × side × side]`, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub label: usize,
    /// Row-major per-patch relevance, `grid²` entries.
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub side: usize,
    pub grid: usize,
    pub n_classes: usize,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Bitwise equality, including pixel payloads.
    pub fn bits_eq(&self, other: &Dataset) -> bool {
        self.channels == other.channels
            && self.side == other.side
            && self.grid == other.grid
            && self.n_classes == other.n_classes
            && self.images.len() == other.images.len()
            && self
                .images
                .iter()
                .zip(&other.images)
                .all(|(a, b)| a.label == b.label && a.mask == b.mask && a.pixels.bits_eq(&b.pixels))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for im in &self.images {
            counts[im.label] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCfg {
    /// Patches per side.
    pub grid: usize,
    /// Pixels per patch side.
    pub patch_side: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub n_images: usize,
    pub signal_patch_count: usize,
    pub distractor_count: usize,
    /// Standard deviation of additive pixel noise.
    pub noise_level: f64,
    /// Drives placement and noise.
    pub seed: u64,
    /// Drives the texture bank; tasks that share it share textures.
    pub texture_seed: u64,
    /// Bank indices of the class textures: class `c` uses `class_textures.start + c`.
    pub class_textures: Range<usize>,
    /// Bank indices of the distractor pool.
    pub distractor_textures: Range<usize>,
    pub marker_on_signal: bool,
    pub marker_on_distractors: bool,
}

impl Default for SyntheticCfg {
    fn default() -> Self {
        SyntheticCfg {
            grid: 8,
            patch_side: 4,
            channels: 1,
            n_classes: 10,
            n_images: 2000,
            signal_patch_count: 4,
            distractor_count: 8,
            noise_level: 0.05,
            seed: 0,
            texture_seed: 0,
            class_textures: 10..20,
            distractor_textures: 20..30,
            marker_on_signal: false,
            marker_on_distractors: true,
        }
    }
}

impl SyntheticCfg {
    /// A generic task on the same texture bank and clutter pool as the
    /// default, with classes the default never shows. Only signal patches
    /// carry the marker, so a backbone trained here learns to treat it as
    /// salient.
    pub fn generic() -> Self {
        SyntheticCfg {
            seed: 100,
            class_textures: 0..10,
            marker_on_signal: true,
            marker_on_distractors: false,
            ..SyntheticCfg::default()
        }
    }

    pub fn side(&self) -> usize {
        self.grid * self.patch_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.patch_side == 0 || self.channels == 0 || self.n_classes == 0 {
            return Err(Error::Config(
                "grid, patch_side, channels and n_classes must be positive".into(),
            ));
        }
        if self.signal_patch_count + self.distractor_count > self.grid * self.grid {
            return Err(Error::Config(format!(
                "{} signal + {} distractor patches exceed the {}-cell grid",
                self.signal_patch_count,
                self.distractor_count,
                self.grid * self.grid
            )));
        }
        if self.class_textures.len() != self.n_classes {
            return Err(Error::Config(format!(
                "{} class textures for {} classes",
                self.class_textures.len(),
                self.n_classes
            )));
        }
        if self.distractor_count > 0 && self.distractor_textures.is_empty() {
            return Err(Error::Config(
                "distractors requested with an empty texture pool".into(),
            ));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::Config(
                "noise_level must be a finite non-negative number".into(),
            ));
        }
        Ok(())
    }
}

/// Seeded ±1 patterns, one per patch pixel and channel. Index `0` of the
/// underlying stream is the marker; textures follow.
#[derive(Clone, Debug)]
pub struct TextureBank {
    marker: Vec<f32>,
    textures: Vec<Vec<f32>>,
}

impl TextureBank {
    pub fn new(seed: u64, count: usize, patch_len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pattern = || -> Vec<f32> {
            (0..patch_len)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect()
        };
        let marker = pattern();
        let textures = (0..count).map(|_| pattern()).collect();
        TextureBank { marker, textures }
    }

    pub fn marker(&self) -> &[f32] {
        &self.marker
    }

    pub fn texture(&self, i: usize) -> &[f32] {
        &self.textures[i]
    }
}

/// Writes `BACKGROUND + CONTRAST · (texture [+ marker])` into one patch.
fn paint(
    pixels: &mut [f32],
    cfg: &SyntheticCfg,
    cell: usize,
    texture: &[f32],
    marker: Option<&[f32]>,
) {
    let (p, side) = (cfg.patch_side, cfg.side());
    let (gy, gx) = (cell / cfg.grid, cell % cfg.grid);
    for ch in 0..cfg.channels {
        for y in 0..p {
            for x in 0..p {
                let k = (ch * p + y) * p + x;
                let mut v = texture[k];
                if let Some(m) = marker {
                    v += m[k];
                }
                pixels[(ch * side + gy * p + y) * side + gx * p + x] = BACKGROUND + CONTRAST * v;
            }
        }
    }
}

/// Generates `cfg.n_images` images; image `i` has label `i mod n_classes`.
pub fn gen_cluttered(cfg: &SyntheticCfg) -> Result<Dataset> {
    cfg.validate()?;
    let patch_len = cfg.patch_side * cfg.patch_side * cfg.channels;
    let bank_size = cfg.class_textures.end.max(cfg.distractor_textures.end);
    let bank = TextureBank::new(cfg.texture_seed, bank_size, patch_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_level).map_err(|e| Error::Config(e.to_string()))?;
    let n_cells = cfg.grid * cfg.grid;
    let side = cfg.side();
    let marker = |on: bool| on.then(|| bank.marker());

    let mut images = Vec::with_capacity(cfg.n_images);
    for i in 0..cfg.n_images {
        let label = i % cfg.n_classes;
        let mut pixels = vec![BACKGROUND; cfg.channels * side * side];
        let chosen = sample(
            &mut rng,
            n_cells,
            cfg.signal_patch_count + cfg.distractor_count,
        )
        .into_vec();
        let mut mask = vec![false; n_cells];
        for (k, &cell) in chosen.iter().enumerate() {
            if k < cfg.signal_patch_count {
                mask[cell] = true;
                let tex = bank.texture(cfg.class_textures.start + label);
                paint(&mut pixels, cfg, cell, tex, marker(cfg.marker_on_signal));
            } else {
                let t = rng.random_range(cfg.distractor_textures.clone());
                paint(
                    &mut pixels,
                    cfg,
                    cell,
                    bank.texture(t),
                    marker(cfg.marker_on_distractors),
                );
            }
        }
        if cfg.noise_level > 0.0 {
            for v in &mut pixels {
                *v = (*v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
            }
        }
        images.push(LabeledImage {
            pixels: Tensor::new(vec![cfg.channels, side, side], pixels)?,
            label,
            mask: Some(mask),
        });
    }
    Ok(Dataset {
        channels: cfg.channels,
        side,
        grid: cfg.grid,
        n_classes: cfg.n_classes,
        images,
    })
}

/// Serializes to the `TDDS` format.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let has_mask = ds.images.first().is_some_and(|im| im.mask.is_some());
    let cells = ds.grid * ds.grid;
    let pixels = ds.channels * ds.side * ds.side;
    let mut out = Vec::with_capacity(24 + ds.len() * (4 + cells / 8 + 1 + pixels * 4));
    out.extend_from_slice(DATASET_MAGIC);
    put_u16(&mut out, DATASET_VERSION);
    put_u32(&mut out, ds.len())?;
    put_u32(&mut out, ds.channels)?;
    put_u32(&mut out, ds.side)?;
    put_u32(&mut out, ds.grid)?;
    put_u32(&mut out, ds.n_classes)?;
    out.push(u8::from(has_mask));
    for (i, im) in ds.images.iter().enumerate() {
        if im.label >= ds.n_classes || im.pixels.len() != pixels || im.mask.is_some() != has_mask {
            return Err(Error::Config(format!(
                "image {i} is inconsistent with the dataset header"
            )));
        }
        put_u32(&mut out, im.label)?;
        if let Some(mask) = &im.mask {
            if mask.len() != cells {
                return Err(Error::Config(format!(
                    "image {i} mask has {} cells, expected {cells}",
                    mask.len()
                )));
            }
            let mut bits = vec![0u8; cells.div_ceil(8)];
            for (c, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                bits[c / 8] |= 1 << (c % 8);
            }
            out.extend_from_slice(&bits);
        }
        put_f32s(&mut out, im.pixels.data());
    }
    Ok(out)
}

/// Parses the `TDDS` format. A zero-length input is an empty dataset.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Ok(Dataset::default());
    }
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(r.error_at(0, "bad magic, expected TDDS"));
    }
    let version = r.u16("version")?;
    if version > DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            supported: DATASET_VERSION,
        });
    }
    if version == 0 {
        return Err(r.error_at(4, "version 0 is not a valid dataset version"));
    }
    let n = r.usize32("image count")?;
    let channels = r.usize32("channels")?;
    let side = r.usize32("side")?;
    let grid = r.usize32("grid")?;
    let n_classes = r.usize32("class count")?;
    let flag_at = r.offset();
    let has_mask = match r.u8("mask flag")? {
        0 => false,
        1 => true,
        other => return Err(r.error_at(flag_at, format!("mask flag {other} is not 0 or 1"))),
    };
    let cells = grid * grid;
    let pixels = channels * side * side;
    if n > 0 && (pixels == 0 || (has_mask && cells == 0)) {
        return Err(r.error_at(6, "zero image dimensions"));
    }
    let record = 4 + if has_mask { cells.div_ceil(8) } else { 0 } + pixels * 4;
    if r.remaining() != n * record {
        return Err(r.error(format!(
            "{} payload bytes for {n} images of {record} bytes",
            r.remaining()
        )));
    }
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let label = r.usize32("label")?;
        if label >= n_classes {
            return Err(r.error_at(at, format!("label {label} >= {n_classes} classes")));
        }
        let mask = if has_mask {
            let bits = r.take(cells.div_ceil(8), "mask")?;
            Some(
                (0..cells)
                    .map(|c| bits[c / 8] >> (c % 8) & 1 == 1)
                    .collect(),
            )
        } else {
            None
        };
        let data = r.f32s(pixels, "pixels")?;
        images.push(LabeledImage {
            pixels: Tensor::new(vec![channels, side, side], data)?,
            label,
            mask,
        });
    }
    Ok(Dataset {
        channels,
        side,
        grid,
        n_classes,
        images,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read_file(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocusScore {
    /// Fraction of the map's mass inside the mask, in `[0, 1]`.
    pub value: f64,
    /// Set when the map had no mass at all; `value` is then 0.
    pub zero_mass: bool,
}

/// Share of a nonnegative per-patch map that falls on masked patches.
pub fn attention_focus_score(map: &[f64], mask: &[bool]) -> Result<FocusScore> {
    if map.len() != mask.len() {
        return Err(Error::dim(
            "attention_focus_score",
            format!("map has {} entries, mask {}", map.len(), mask.len()),
        ));
    }
    if map.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::dim(
            "attention_focus_score",
            "map has negative or non-finite entries",
        ));
    }
    let total: f64 = map.iter().sum();
    if total == 0.0 {
        return Ok(FocusScore {
            value: 0.0,
            zero_mass: true,
        });
    }
    let inside: f64 = map
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum();
    Ok(FocusScore {
        value: (inside / total).clamp(0.0, 1.0),
        zero_mass: false,
    })
}
