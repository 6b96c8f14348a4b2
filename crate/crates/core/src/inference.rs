//! Tiled inference: denoise frames of any size with a fixed-input-size
//! generator by blending overlapping tiles, plus qualitative crop
//! export.
//!
//! Blend weights are a function of tile-local position only, so the
//! result is independent of traversal order, and after weight
//! normalization the tile weights form a partition of unity at every
//! pixel.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use crate::data::{denormalize, write_tiff_f32, write_tiff_u16, NormalizationRecord};
use crate::error::InferenceError;
use crate::models::Generator;

/// A model that denoises fixed-size square tiles.
pub trait TileModel {
    fn tile_size(&self) -> usize;
    fn denoise_tile(&self, tile: &Array2<f64>) -> Array2<f64>;
}

impl TileModel for Generator {
    fn tile_size(&self) -> usize {
        self.config().input_size
    }

    fn denoise_tile(&self, tile: &Array2<f64>) -> Array2<f64> {
        Generator::denoise_tile(self, tile)
    }
}

/// How overlapping tile outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BlendMode {
    /// Weights ramp down linearly toward tile edges inside the overlap
    /// zone; avoids visible seams.
    LinearRamp,
    /// Every covering tile contributes equally.
    UniformAverage,
}

/// Tiling geometry for full-frame inference.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TilingSpec {
    pub tile: usize,
    pub overlap: usize,
    pub blend: BlendMode,
}

impl Default for TilingSpec {
    fn default() -> Self {
        Self {
            tile: 256,
            overlap: 32,
            blend: BlendMode::LinearRamp,
        }
    }
}

impl TilingSpec {
    /// A spec sized for a given tile side, with a proportional overlap.
    pub fn for_tile(tile: usize) -> Self {
        Self {
            tile,
            overlap: (tile / 8).clamp(1, tile.saturating_sub(1)),
            blend: BlendMode::LinearRamp,
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.tile == 0 {
            return Err(InferenceError::InvalidTiling("tile size must be positive".into()));
        }
        if self.overlap >= self.tile {
            return Err(InferenceError::InvalidTiling(format!(
                "overlap {} must be smaller than tile {}",
                self.overlap, self.tile
            )));
        }
        Ok(())
    }
}

/// Mirror an out-of-range index back into [0, n) without repeating the
/// edge sample (reflect padding).
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - k;
    }
    k as usize
}

/// Reflect-pad a frame up to at least (min_h, min_w).
fn reflect_pad_to(frame: &ArrayView2<f64>, min_h: usize, min_w: usize) -> Array2<f64> {
    let (h, w) = frame.dim();
    let out_h = h.max(min_h);
    let out_w = w.max(min_w);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        frame[[reflect_index(i as isize, h), reflect_index(j as isize, w)]]
    })
}

/// Tile start offsets covering [0, dim) with the given stride, the last
/// tile clamped flush to the border.
fn tile_starts(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    debug_assert!(dim >= tile);
    let mut starts = Vec::new();
    let mut s = 0usize;
    loop {
        starts.push(s);
        if s + tile >= dim {
            break;
        }
        s = (s + stride).min(dim - tile);
    }
    starts.dedup();
    starts
}

/// Per-axis blend weight profile. Strictly positive everywhere so the
/// accumulated weight never vanishes, flat in the tile interior, and
/// ramping across the overlap zone for `LinearRamp`.
fn weight_profile(tile: usize, overlap: usize, blend: BlendMode) -> Vec<f64> {
    match blend {
        BlendMode::UniformAverage => vec![1.0; tile],
        BlendMode::LinearRamp => (0..tile)
            .map(|i| {
                let up = (i + 1) as f64;
                let down = (tile - i) as f64;
                up.min(down).min((overlap + 1) as f64)
            })
            .collect(),
    }
}

/// Denoise a frame of arbitrary size. Frames smaller than the tile are
/// reflect-padded up to tile size and cropped back; larger frames are
/// covered by overlapping tiles whose outputs are blended by
/// position-dependent weights normalized to sum to one per pixel.
pub fn denoise_frame(
    model: &dyn TileModel,
    frame: &ArrayView2<f64>,
    spec: &TilingSpec,
) -> Result<Array2<f64>, InferenceError> {
    spec.validate()?;
    if spec.tile != model.tile_size() {
        return Err(InferenceError::InvalidTiling(format!(
            "tile {} does not match model input size {}",
            spec.tile,
            model.tile_size()
        )));
    }
    let (h, w) = frame.dim();
    if h == 0 || w == 0 {
        return Err(InferenceError::InvalidTiling("empty frame".into()));
    }
    let tile = spec.tile;
    let padded = reflect_pad_to(frame, tile, tile);
    let (ph, pw) = padded.dim();
    let stride = tile - spec.overlap;
    let rows = tile_starts(ph, tile, stride);
    let cols = tile_starts(pw, tile, stride);

    // single covering tile: one forward pass, no blending
    if rows.len() == 1 && cols.len() == 1 {
        let out = model.denoise_tile(&padded);
        return Ok(out.slice(ndarray::s![..h, ..w]).to_owned());
    }
    let profile = weight_profile(tile, spec.overlap, spec.blend);

    let mut acc = Array2::<f64>::zeros((ph, pw));
    let mut wsum = Array2::<f64>::zeros((ph, pw));
    for &r0 in &rows {
        for &c0 in &cols {
            let tile_in = padded
                .slice(ndarray::s![r0..r0 + tile, c0..c0 + tile])
                .to_owned();
            let tile_out = model.denoise_tile(&tile_in);
            debug_assert_eq!(tile_out.dim(), (tile, tile));
            for i in 0..tile {
                for j in 0..tile {
                    let wgt = profile[i] * profile[j];
                    acc[[r0 + i, c0 + j]] += wgt * tile_out[[i, j]];
                    wsum[[r0 + i, c0 + j]] += wgt;
                }
            }
        }
    }
    let blended = Array2::from_shape_fn((h, w), |(i, j)| acc[[i, j]] / wsum[[i, j]]);
    Ok(blended)
}

/// Write the denoised frame as 32-bit float TIFF in normalized space.
pub fn save_normalized_tiff(path: &Path, frame: &Array2<f64>) -> Result<(), crate::Error> {
    write_tiff_f32(path, frame)?;
    Ok(())
}

/// Write the denoised frame mapped back to raw intensity units as
/// 16-bit TIFF.
pub fn save_raw_tiff(
    path: &Path,
    frame: &Array2<f64>,
    rec: &NormalizationRecord,
) -> Result<(), crate::Error> {
    let raw = denormalize(&frame.view(), rec);
    write_tiff_u16(path, &raw)?;
    Ok(())
}

/// Export side-by-side 8-bit PNG crops of (noisy, denoised, clean) with
/// one shared display normalization, so the same intensity maps to the
/// same gray level in all three panels. Returns the written paths.
pub fn export_crops(
    noisy: &ArrayView2<f64>,
    denoised: &ArrayView2<f64>,
    gt: &ArrayView2<f64>,
    crop_box: (usize, usize, usize, usize),
    out_dir: &Path,
) -> Result<Vec<PathBuf>, crate::Error> {
    let (r0, r1, c0, c1) = crop_box;
    let (h, w) = noisy.dim();
    if r0 >= r1 || c0 >= c1 || r1 > h || c1 > w || denoised.dim() != (h, w) || gt.dim() != (h, w) {
        return Err(InferenceError::CropOutOfBounds {
            row0: r0,
            row1: r1,
            col0: c0,
            col1: c1,
            height: h,
            width: w,
        }
        .into());
    }
    std::fs::create_dir_all(out_dir)?;

    let crops: Vec<(&str, Array2<f64>)> = vec![
        ("noisy", noisy.slice(ndarray::s![r0..r1, c0..c1]).to_owned()),
        ("denoised", denoised.slice(ndarray::s![r0..r1, c0..c1]).to_owned()),
        ("gt", gt.slice(ndarray::s![r0..r1, c0..c1]).to_owned()),
    ];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, c) in &crops {
        for &v in c.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut written = Vec::with_capacity(3);
    for (name, crop) in &crops {
        let (ch, cw) = crop.dim();
        let img = image::GrayImage::from_fn(cw as u32, ch as u32, |x, y| {
            let v = crop[[y as usize, x as usize]];
            image::Luma([(((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8])
        });
        let path = out_dir.join(format!("{name}_crop_{r0}_{r1}_{c0}_{c1}.png"));
        img.save(&path)
            .map_err(|e| InferenceError::InvalidTiling(e.to_string()))?;
        written.push(path);
    }
    Ok(written)
}
