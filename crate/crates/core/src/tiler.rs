//! Downsampling, overlapping tile extraction, mask-derived labels and
//! class-balanced tile sampling.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{MaskImage, RgbImage};
use crate::{seed_for, Label};

pub const TILE_SIZE: usize = 224;
pub const TILE_STRIDE: usize = 112;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TileError {
    #[error("downsampling {width}x{height} by {factor} leaves an empty image")]
    ZeroDimension {
        width: usize,
        height: usize,
        factor: usize,
    },
    #[error("tile size {size} exceeds image {width}x{height}")]
    TooSmall {
        width: usize,
        height: usize,
        size: usize,
    },
    #[error("stride and factor must be at least 1")]
    ZeroStep,
    #[error("tile at ({x}, {y}) of size {size} leaves the {width}x{height} mask")]
    OutOfBounds {
        x: usize,
        y: usize,
        size: usize,
        width: usize,
        height: usize,
    },
    #[error("slide {slide_id}: only {available} {label} tiles, {wanted} requested")]
    InsufficientClass {
        slide_id: String,
        label: Label,
        available: usize,
        wanted: usize,
    },
}

/// Rounded block mean; trailing pixels that do not fill a block are dropped.
pub fn downsample(img: &RgbImage, factor: usize) -> Result<RgbImage, TileError> {
    if factor == 0 {
        return Err(TileError::ZeroStep);
    }
    let (w, h) = (img.width() / factor, img.height() / factor);
    if w == 0 || h == 0 {
        return Err(TileError::ZeroDimension {
            width: img.width(),
            height: img.height(),
            factor,
        });
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let n = (factor * factor) as u64;
    let src = img.data();
    let stride = img.width() * 3;
    let mut out = Vec::with_capacity(w * h * 3);
    let mut acc = vec![0u64; w * 3];
    for by in 0..h {
        acc.iter_mut().for_each(|a| *a = 0);
        for row in by * factor..(by + 1) * factor {
            let line = &src[row * stride..row * stride + w * factor * 3];
            for (bx, block) in line.chunks_exact(factor * 3).enumerate() {
                for px in block.chunks_exact(3) {
                    for c in 0..3 {
                        acc[bx * 3 + c] += u64::from(px[c]);
                    }
                }
            }
        }
        out.extend(acc.iter().map(|&s| ((s + n / 2) / n) as u8));
    }
    Ok(RgbImage::new(w, h, out).expect("nonempty"))
}

/// Max-pools a mask so that any nonzero pixel in a block survives.
pub fn downsample_mask(mask: &MaskImage, factor: usize) -> Result<MaskImage, TileError> {
    if factor == 0 {
        return Err(TileError::ZeroStep);
    }
    let (w, h) = (mask.width() / factor, mask.height() / factor);
    if w == 0 || h == 0 {
        return Err(TileError::ZeroDimension {
            width: mask.width(),
            height: mask.height(),
            factor,
        });
    }
    let mut out = MaskImage::zeros(w, h).expect("nonempty");
    for y in 0..h * factor {
        for x in 0..w * factor {
            let v = mask.get(x, y);
            if v > out.get(x / factor, y / factor) {
                out.set(x / factor, y / factor, v);
            }
        }
    }
    Ok(out)
}

/// Top-left corners of every fully in-bounds tile, row-major.
pub fn tile_grid(
    width: usize,
    height: usize,
    size: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>, TileError> {
    if stride == 0 || size == 0 {
        return Err(TileError::ZeroStep);
    }
    if size > width || size > height {
        return Err(TileError::TooSmall {
            width,
            height,
            size,
        });
    }
    let cols = (width - size) / stride + 1;
    let rows = (height - size) / stride + 1;
    let mut out = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            out.push((c * stride, r * stride));
        }
    }
    Ok(out)
}

/// Plexus iff any mask pixel in the window is nonzero.
pub fn label_tile(mask: &MaskImage, x: usize, y: usize, size: usize) -> Result<Label, TileError> {
    if x + size > mask.width() || y + size > mask.height() {
        return Err(TileError::OutOfBounds {
            x,
            y,
            size,
            width: mask.width(),
            height: mask.height(),
        });
    }
    let w = mask.width();
    let hit = (y..y + size).any(|row| {
        mask.data()[row * w + x..row * w + x + size]
            .iter()
            .any(|&v| v != 0)
    });
    Ok(if hit { Label::Plexus } else { Label::NoPlexus })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
}

impl Augment {
    pub const ALL: [Augment; 6] = [
        Augment::Identity,
        Augment::Rot90,
        Augment::Rot180,
        Augment::Rot270,
        Augment::FlipH,
        Augment::FlipV,
    ];

    pub fn inverse(self) -> Self {
        match self {
            Augment::Rot90 => Augment::Rot270,
            Augment::Rot270 => Augment::Rot90,
            other => other,
        }
    }
}

/// Exact pixel permutation. Rotations are clockwise.
pub fn augment_tile(img: &RgbImage, op: Augment) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let (ow, oh) = match op {
        Augment::Rot90 | Augment::Rot270 => (h, w),
        _ => (w, h),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for oy in 0..oh {
        for ox in 0..ow {
            let (sx, sy) = match op {
                Augment::Identity => (ox, oy),
                Augment::Rot90 => (oy, h - 1 - ox),
                Augment::Rot180 => (w - 1 - ox, h - 1 - oy),
                Augment::Rot270 => (w - 1 - oy, ox),
                Augment::FlipH => (w - 1 - ox, oy),
                Augment::FlipV => (ox, h - 1 - oy),
            };
            data.extend_from_slice(&img.pixel(sx, sy));
        }
    }
    RgbImage::new(ow, oh, data).expect("permutation keeps size")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRecord {
    pub slide_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<Augment>,
}

impl TileRecord {
    pub fn id(&self) -> String {
        format!("{}/{}_{}", self.slide_id, self.x, self.y)
    }
}

/// Tiles and labels one slide at working resolution.
pub fn index_slide(
    slide_id: &str,
    mask: &MaskImage,
    size: usize,
    stride: usize,
) -> Result<Vec<TileRecord>, TileError> {
    tile_grid(mask.width(), mask.height(), size, stride)?
        .into_iter()
        .map(|(x, y)| {
            Ok(TileRecord {
                slide_id: slide_id.to_owned(),
                x,
                y,
                size,
                label: label_tile(mask, x, y, size)?,
                augmentation: None,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub per_class_count: usize,
    pub seed: u64,
    /// Take every available tile of a short class instead of failing.
    #[serde(default)]
    pub allow_short: bool,
}

impl Default for SamplePlan {
    fn default() -> Self {
        Self {
            per_class_count: 250,
            seed: 0,
            allow_short: false,
        }
    }
}

impl SamplePlan {
    pub fn per_slide_count(&self) -> usize {
        2 * self.per_class_count
    }
}

/// Draws `per_class_count` tiles of each class from every slide without
/// replacement. Output is ordered by (slide_id, y, x).
pub fn balanced_sample(tiles: &[TileRecord], plan: &SamplePlan) -> Result<Vec<TileRecord>, TileError> {
    let mut by_slide: BTreeMap<&str, [Vec<&TileRecord>; 2]> = BTreeMap::new();
    for t in tiles {
        by_slide.entry(&t.slide_id).or_default()[t.label.index()].push(t);
    }
    let mut out = Vec::new();
    for (slide_id, mut classes) in by_slide {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(plan.seed, slide_id));
        let mut picked = Vec::with_capacity(plan.per_slide_count());
        for label in [Label::Plexus, Label::NoPlexus] {
            let pool = &mut classes[label.index()];
            pool.sort_by_key(|t| (t.y, t.x));
            if pool.len() < plan.per_class_count {
                if !plan.allow_short {
                    return Err(TileError::InsufficientClass {
                        slide_id: slide_id.to_owned(),
                        label,
                        available: pool.len(),
                        wanted: plan.per_class_count,
                    });
                }
                picked.extend(pool.iter().map(|t| (*t).clone()));
                continue;
            }
            let idx = rand::seq::index::sample(&mut rng, pool.len(), plan.per_class_count);
            picked.extend(idx.into_iter().map(|i| pool[i].clone()));
        }
        picked.sort_by_key(|t| (t.y, t.x));
        out.extend(picked);
    }
    Ok(out)
}
