//! Stack loading, the raw array format, TIFF export, and the dataset
//! manifest that makes an experiment re-runnable bit-for-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::{
    synthesize_ground_truth, apply_normalization, DenoisingDataset, ImageStack,
    NormalizationRecord, Pair,
};
use crate::error::DataError;

/// Magic bytes of the raw stack format.
const RAW_MAGIC: &[u8; 8] = b"MCDSTACK";

/// First line of a dataset manifest.
const MANIFEST_HEADER: &str = "mcdenoise-manifest v1";

/// Supported acquisition container formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StackFormat {
    /// Multi-page grayscale TIFF (8/16-bit unsigned or 32-bit float).
    TiffStack,
    /// Directory of single-frame PNG or TIFF images, in filename order.
    ImageDirectory,
    /// The self-describing binary format written by [`write_raw_stack`].
    RawArray,
}

impl std::fmt::Display for StackFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StackFormat::TiffStack => "tiff-stack",
            StackFormat::ImageDirectory => "image-directory",
            StackFormat::RawArray => "raw-array",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for StackFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiff-stack" | "tiff" => Ok(StackFormat::TiffStack),
            "image-directory" | "dir" => Ok(StackFormat::ImageDirectory),
            "raw-array" | "raw" => Ok(StackFormat::RawArray),
            other => Err(format!("unknown stack format {other:?}")),
        }
    }
}

/// Guess the format from the path: directories load as image
/// directories, `.raw` as the raw format, anything else as TIFF.
pub fn guess_format(path: &Path) -> StackFormat {
    if path.is_dir() {
        StackFormat::ImageDirectory
    } else if path.extension().and_then(|e| e.to_str()) == Some("raw") {
        StackFormat::RawArray
    } else {
        StackFormat::TiffStack
    }
}

fn missing(path: &Path) -> DataError {
    DataError::MissingFile(path.display().to_string())
}

fn decode_err(path: &Path, what: impl std::fmt::Display) -> DataError {
    DataError::NonImageData(format!("{}: {what}", path.display()))
}

/// Load the frames of an acquisition container without stack-level
/// validation (inference inputs may be single frames).
pub fn load_frames(path: &Path, format: StackFormat) -> Result<Vec<Array2<f64>>, DataError> {
    if !path.exists() {
        return Err(missing(path));
    }
    match format {
        StackFormat::TiffStack => load_tiff_frames(path),
        StackFormat::ImageDirectory => load_directory_frames(path),
        StackFormat::RawArray => load_raw_frames(path),
    }
}

/// Load and validate a full acquisition stack.
pub fn load_stack(path: &Path, format: StackFormat) -> Result<ImageStack, DataError> {
    let frames = load_frames(path, format)?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("stack")
        .to_string();
    ImageStack::from_frames(name, frames)
}

fn decoding_to_array(
    path: &Path,
    res: tiff::decoder::DecodingResult,
    h: usize,
    w: usize,
) -> Result<Array2<f64>, DataError> {
    let data: Vec<f64> = match res {
        tiff::decoder::DecodingResult::U8(v) => v.into_iter().map(|x| x as f64).collect(),
        tiff::decoder::DecodingResult::U16(v) => v.into_iter().map(|x| x as f64).collect(),
        tiff::decoder::DecodingResult::U32(v) => v.into_iter().map(|x| x as f64).collect(),
        tiff::decoder::DecodingResult::F32(v) => v.into_iter().map(|x| x as f64).collect(),
        tiff::decoder::DecodingResult::F64(v) => v,
        _ => {
            return Err(decode_err(path, "unsupported TIFF sample format"));
        }
    };
    if data.len() != h * w {
        return Err(decode_err(
            path,
            format!("expected {}x{} samples, got {}", h, w, data.len()),
        ));
    }
    Array2::from_shape_vec((h, w), data).map_err(|e| decode_err(path, e))
}

fn load_tiff_frames(path: &Path) -> Result<Vec<Array2<f64>>, DataError> {
    let file = File::open(path).map_err(|_| missing(path))?;
    let mut decoder =
        tiff::decoder::Decoder::new(BufReader::new(file)).map_err(|e| decode_err(path, e))?;
    let mut frames = Vec::new();
    loop {
        match decoder.colortype().map_err(|e| decode_err(path, e))? {
            tiff::ColorType::Gray(_) => {}
            other => {
                return Err(decode_err(path, format!("not single-channel: {other:?}")));
            }
        }
        let (w, h) = decoder.dimensions().map_err(|e| decode_err(path, e))?;
        let img = decoder.read_image().map_err(|e| decode_err(path, e))?;
        frames.push(decoding_to_array(path, img, h as usize, w as usize)?);
        if !decoder.more_images() {
            break;
        }
        decoder.next_image().map_err(|e| decode_err(path, e))?;
    }
    Ok(frames)
}

fn load_single_image(path: &Path) -> Result<Array2<f64>, DataError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    if ext == "tif" || ext == "tiff" {
        let mut frames = load_tiff_frames(path)?;
        return frames
            .drain(..)
            .next()
            .ok_or_else(|| decode_err(path, "empty TIFF"));
    }
    let img = image::open(path).map_err(|e| decode_err(path, e))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let data: Vec<f64> = g.into_raw().into_iter().map(|v| v as f64).collect();
            Array2::from_shape_vec((h as usize, w as usize), data).map_err(|e| decode_err(path, e))
        }
        image::DynamicImage::ImageLuma16(g) => {
            let (w, h) = g.dimensions();
            let data: Vec<f64> = g.into_raw().into_iter().map(|v| v as f64).collect();
            Array2::from_shape_vec((h as usize, w as usize), data).map_err(|e| decode_err(path, e))
        }
        _ => Err(decode_err(path, "not single-channel grayscale")),
    }
}

fn load_directory_frames(path: &Path) -> Result<Vec<Array2<f64>>, DataError> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|_| missing(path))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| {
                    let e = e.to_ascii_lowercase();
                    e == "png" || e == "tif" || e == "tiff"
                })
                .unwrap_or(false)
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(decode_err(path, "directory contains no PNG/TIFF frames"));
    }
    entries.iter().map(|p| load_single_image(p)).collect()
}

/// Raw stack sample types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawDtype {
    U8 = 0,
    U16 = 1,
    F32 = 2,
}

/// Write frames in the raw stack format: 8-byte magic, u8 dtype code,
/// u32 height/width/count (little endian), then frames row-major.
pub fn write_raw_stack(path: &Path, frames: &[Array2<f64>], dtype: RawDtype) -> Result<(), DataError> {
    assert!(!frames.is_empty());
    let (h, w) = frames[0].dim();
    let mut out = BufWriter::new(File::create(path).map_err(|e| DataError::Manifest(e.to_string()))?);
    let io_err = |e: std::io::Error| DataError::Manifest(e.to_string());
    out.write_all(RAW_MAGIC).map_err(io_err)?;
    out.write_u8(dtype as u8).map_err(io_err)?;
    out.write_u32::<LittleEndian>(h as u32).map_err(io_err)?;
    out.write_u32::<LittleEndian>(w as u32).map_err(io_err)?;
    out.write_u32::<LittleEndian>(frames.len() as u32).map_err(io_err)?;
    for f in frames {
        assert_eq!(f.dim(), (h, w));
        for &v in f.iter() {
            match dtype {
                RawDtype::U8 => out.write_u8(v.round().clamp(0.0, 255.0) as u8).map_err(io_err)?,
                RawDtype::U16 => out
                    .write_u16::<LittleEndian>(v.round().clamp(0.0, 65535.0) as u16)
                    .map_err(io_err)?,
                RawDtype::F32 => out.write_f32::<LittleEndian>(v as f32).map_err(io_err)?,
            }
        }
    }
    out.flush().map_err(io_err)
}

fn load_raw_frames(path: &Path) -> Result<Vec<Array2<f64>>, DataError> {
    let mut input = BufReader::new(File::open(path).map_err(|_| missing(path))?);
    let io_err = |_: std::io::Error| decode_err(path, "truncated raw stack");
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io_err)?;
    if &magic != RAW_MAGIC {
        return Err(decode_err(path, "bad magic bytes"));
    }
    let dtype = input.read_u8().map_err(io_err)?;
    let h = input.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let w = input.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let n = input.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    if h == 0 || w == 0 || n == 0 {
        return Err(decode_err(path, "empty raw stack"));
    }
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let mut data = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            let v = match dtype {
                0 => input.read_u8().map_err(io_err)? as f64,
                1 => input.read_u16::<LittleEndian>().map_err(io_err)? as f64,
                2 => input.read_f32::<LittleEndian>().map_err(io_err)? as f64,
                other => {
                    return Err(decode_err(path, format!("unknown dtype code {other}")));
                }
            };
            data.push(v);
        }
        frames.push(Array2::from_shape_vec((h, w), data).expect("sized above"));
    }
    Ok(frames)
}

/// Everything needed to rebuild a dataset exactly: stack location,
/// frozen normalization bounds, and the frozen split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub stack_path: PathBuf,
    pub stack_format: StackFormat,
    pub normalization: NormalizationRecord,
    pub patch_size: usize,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

fn indices_to_string(ix: &[usize]) -> String {
    ix.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn indices_from_string(s: &str) -> Result<Vec<usize>, DataError> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| DataError::Manifest(format!("bad index {t:?}")))
        })
        .collect()
}

/// Write the manifest as a plain-text key=value file.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let mut text = String::new();
    text.push_str(MANIFEST_HEADER);
    text.push('\n');
    let mut kv = |k: &str, v: String| {
        text.push_str(k);
        text.push('=');
        text.push_str(&v);
        text.push('\n');
    };
    kv("name", manifest.name.clone());
    kv("stack_path", manifest.stack_path.display().to_string());
    kv("stack_format", manifest.stack_format.to_string());
    kv("low_pct", manifest.normalization.low_pct.to_string());
    kv("high_pct", manifest.normalization.high_pct.to_string());
    kv("p_low", manifest.normalization.p_low.to_string());
    kv("p_high", manifest.normalization.p_high.to_string());
    kv("patch_size", manifest.patch_size.to_string());
    kv("test_fraction", manifest.test_fraction.to_string());
    kv("split_seed", manifest.split_seed.to_string());
    kv("train_indices", indices_to_string(&manifest.train_indices));
    kv("test_indices", indices_to_string(&manifest.test_indices));
    std::fs::write(path, text).map_err(|e| DataError::Manifest(e.to_string()))
}

/// Parse a manifest file.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|_| missing(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(DataError::Manifest(format!(
            "{} is not a dataset manifest",
            path.display()
        )));
    }
    let mut map = std::collections::BTreeMap::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(DataError::Manifest(format!("bad line {line:?}")));
        };
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<String, DataError> {
        map.get(k)
            .cloned()
            .ok_or_else(|| DataError::Manifest(format!("missing key {k}")))
    };
    let parse_f64 = |k: &str| -> Result<f64, DataError> {
        get(k)?
            .parse::<f64>()
            .map_err(|_| DataError::Manifest(format!("bad value for {k}")))
    };
    Ok(DatasetManifest {
        name: get("name")?,
        stack_path: PathBuf::from(get("stack_path")?),
        stack_format: get("stack_format")?
            .parse()
            .map_err(DataError::Manifest)?,
        normalization: NormalizationRecord {
            low_pct: parse_f64("low_pct")?,
            high_pct: parse_f64("high_pct")?,
            p_low: parse_f64("p_low")?,
            p_high: parse_f64("p_high")?,
        },
        patch_size: get("patch_size")?
            .parse()
            .map_err(|_| DataError::Manifest("bad patch_size".into()))?,
        test_fraction: parse_f64("test_fraction")?,
        split_seed: get("split_seed")?
            .parse()
            .map_err(|_| DataError::Manifest("bad split_seed".into()))?,
        train_indices: indices_from_string(&get("train_indices")?)?,
        test_indices: indices_from_string(&get("test_indices")?)?,
    })
}

/// SHA-256 of the manifest file contents, hex encoded. Used by the
/// experiment harness for resumability checks.
pub fn manifest_hash(path: &Path) -> Result<String, DataError> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|_| missing(path))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Rebuild the dataset a manifest describes: reload the stack, average
/// the ground truth, and apply the frozen normalization and split.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<DenoisingDataset, DataError> {
    let stack = load_stack(&manifest.stack_path, manifest.stack_format)?;
    let gt = synthesize_ground_truth(&stack);
    let rec = manifest.normalization;
    let clean = std::sync::Arc::new(apply_normalization(&gt.view(), &rec));
    let pairs: Vec<Pair> = stack
        .frames()
        .iter()
        .map(|f| Pair {
            noisy: apply_normalization(&f.view(), &rec),
            clean: std::sync::Arc::clone(&clean),
        })
        .collect();
    DenoisingDataset::from_parts(
        manifest.name.clone(),
        pairs,
        manifest.train_indices.clone(),
        manifest.test_indices.clone(),
        rec,
        manifest.patch_size,
    )
}

/// Write a single frame as 32-bit float grayscale TIFF.
pub fn write_tiff_f32(path: &Path, frame: &Array2<f64>) -> Result<(), DataError> {
    let (h, w) = frame.dim();
    let data: Vec<f32> = frame.iter().map(|&v| v as f32).collect();
    let file = File::create(path).map_err(|e| DataError::Manifest(e.to_string()))?;
    let mut enc = tiff::encoder::TiffEncoder::new(BufWriter::new(file))
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    enc.write_image::<tiff::encoder::colortype::Gray32Float>(w as u32, h as u32, &data)
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    Ok(())
}

/// Write a single frame as 16-bit grayscale TIFF, rounding and clamping.
pub fn write_tiff_u16(path: &Path, frame: &Array2<f64>) -> Result<(), DataError> {
    let (h, w) = frame.dim();
    let data: Vec<u16> = frame
        .iter()
        .map(|&v| v.round().clamp(0.0, 65535.0) as u16)
        .collect();
    let file = File::create(path).map_err(|e| DataError::Manifest(e.to_string()))?;
    let mut enc = tiff::encoder::TiffEncoder::new(BufWriter::new(file))
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    enc.write_image::<tiff::encoder::colortype::Gray16>(w as u32, h as u32, &data)
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    Ok(())
}
