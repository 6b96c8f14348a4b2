//! Acquisition stacks and training datasets.
//!
//! A raw acquisition is an [`ImageStack`]: repeated noisy exposures of a
//! static sample. The clean reference is synthesized by per-pixel
//! averaging over all frames in raw intensity units, then frames and
//! reference are normalized together with stack-level percentile bounds
//! and split deterministically into train/test pairs.

mod augment;
mod io;

pub use augment::AugmentChain;
pub use io::{
    guess_format, load_dataset, load_frames, load_stack, manifest_hash, read_manifest,
    write_manifest, write_raw_stack, write_tiff_f32, write_tiff_u16, DatasetManifest, RawDtype,
    StackFormat,
};

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};

use crate::error::DataError;
use crate::rng::SeededRng;

/// An ordered series of co-registered single-channel exposures.
#[derive(Debug, Clone)]
pub struct ImageStack {
    name: String,
    frames: Vec<Array2<f64>>,
    pixel_range: (f64, f64),
}

impl ImageStack {
    /// Validates the stack invariants: at least two frames (averaging
    /// needs multiple exposures), identical dimensions, finite
    /// nonnegative intensities.
    pub fn from_frames(name: impl Into<String>, frames: Vec<Array2<f64>>) -> Result<Self, DataError> {
        if frames.len() < 2 {
            return Err(DataError::NonImageData(format!(
                "stack needs >= 2 frames for ground-truth averaging, got {}",
                frames.len()
            )));
        }
        let first = frames[0].dim();
        for (i, f) in frames.iter().enumerate() {
            if f.dim() != first {
                return Err(DataError::MixedShapes {
                    first,
                    offending: f.dim(),
                    index: i,
                });
            }
            if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(DataError::NonImageData(format!(
                    "frame {i} contains non-finite or negative intensities"
                )));
            }
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for f in &frames {
            for &v in f.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        Ok(Self {
            name: name.into(),
            frames,
            pixel_range: (lo, hi),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn frames(&self) -> &[Array2<f64>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// (height, width) shared by all frames.
    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dim()
    }

    /// Observed (min, max) raw intensity over the whole stack.
    pub fn pixel_range(&self) -> (f64, f64) {
        self.pixel_range
    }
}

/// Per-pixel arithmetic mean over all frames, in raw intensity units.
pub fn synthesize_ground_truth(stack: &ImageStack) -> Array2<f64> {
    let (h, w) = stack.dims();
    let mut acc = Array2::<f64>::zeros((h, w));
    for f in stack.frames() {
        acc += f;
    }
    acc / stack.len() as f64
}

/// Percentile bounds used to map raw intensities into [0, 1], kept for
/// inversion back to raw units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalizationRecord {
    pub low_pct: f64,
    pub high_pct: f64,
    pub p_low: f64,
    pub p_high: f64,
}

/// Linear-interpolated percentile of an unsorted sample.
fn percentile_of_sorted(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = pct / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Compute a normalization record from a pooled sample of intensities.
pub fn normalization_from_values(
    mut values: Vec<f64>,
    low_pct: f64,
    high_pct: f64,
) -> Result<NormalizationRecord, DataError> {
    assert!(low_pct < high_pct, "low percentile must be below high");
    assert!(!values.is_empty());
    values.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite intensities"));
    let p_low = percentile_of_sorted(&values, low_pct);
    let p_high = percentile_of_sorted(&values, high_pct);
    if p_high == p_low {
        return Err(DataError::DegenerateRange(p_low));
    }
    Ok(NormalizationRecord {
        low_pct,
        high_pct,
        p_low,
        p_high,
    })
}

/// Stack-level record: percentiles of all frames pooled together.
pub fn stack_normalization(
    stack: &ImageStack,
    low_pct: f64,
    high_pct: f64,
) -> Result<NormalizationRecord, DataError> {
    let values: Vec<f64> = stack.frames().iter().flat_map(|f| f.iter().copied()).collect();
    normalization_from_values(values, low_pct, high_pct)
}

/// clip((arr - p_low) / (p_high - p_low), 0, 1) under an existing record.
pub fn apply_normalization(arr: &ArrayView2<f64>, rec: &NormalizationRecord) -> Array2<f64> {
    let span = rec.p_high - rec.p_low;
    arr.mapv(|v| ((v - rec.p_low) / span).clamp(0.0, 1.0))
}

/// Percentile normalization of a single array: bounds are the given
/// percentiles of the array itself.
pub fn normalize(
    arr: &ArrayView2<f64>,
    low_pct: f64,
    high_pct: f64,
) -> Result<(Array2<f64>, NormalizationRecord), DataError> {
    let rec = normalization_from_values(arr.iter().copied().collect(), low_pct, high_pct)?;
    Ok((apply_normalization(arr, &rec), rec))
}

/// Inverse map back to raw intensity units (exact for unclipped values).
pub fn denormalize(arr: &ArrayView2<f64>, rec: &NormalizationRecord) -> Array2<f64> {
    let span = rec.p_high - rec.p_low;
    arr.mapv(|v| v * span + rec.p_low)
}

/// Number of training samples drawn in a few-shot run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum FewShotSize {
    All,
    N(usize),
}

impl std::fmt::Display for FewShotSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FewShotSize::All => write!(f, "all"),
            FewShotSize::N(n) => write!(f, "{n}"),
        }
    }
}

impl std::str::FromStr for FewShotSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            Ok(FewShotSize::All)
        } else {
            s.parse::<usize>()
                .map(FewShotSize::N)
                .map_err(|_| format!("invalid few-shot size {s:?} (expected \"all\" or a count)"))
        }
    }
}

/// A seeded few-shot subset request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FewShotSpec {
    pub n_samples: FewShotSize,
    pub seed: u64,
}

/// One (noisy, clean) frame pair in normalized space. The clean side is
/// shared across pairs of the same stack, so it sits behind an Arc.
#[derive(Debug, Clone)]
pub struct Pair {
    pub noisy: Array2<f64>,
    pub clean: Arc<Array2<f64>>,
}

/// Indexed (noisy, clean) pairs with the normalization record and a
/// deterministic train/test split. Immutable after construction.
#[derive(Debug, Clone)]
pub struct DenoisingDataset {
    name: String,
    pairs: Vec<Pair>,
    train_indices: Vec<usize>,
    test_indices: Vec<usize>,
    normalization: NormalizationRecord,
    patch_size: usize,
}

/// Knobs for [`build_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetParams {
    pub patch_size: usize,
    pub test_fraction: f64,
    pub low_pct: f64,
    pub high_pct: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            patch_size: 256,
            test_fraction: 0.1,
            low_pct: 0.1,
            high_pct: 99.9,
        }
    }
}

/// Pair every noisy frame with the shared ground truth, normalize both
/// with stack-level percentile bounds, and split deterministically.
pub fn build_dataset(
    stack: &ImageStack,
    gt: &Array2<f64>,
    params: &DatasetParams,
    seed: u64,
) -> Result<DenoisingDataset, DataError> {
    let (h, w) = stack.dims();
    if params.patch_size > h || params.patch_size > w {
        return Err(DataError::PatchTooLarge {
            patch: params.patch_size,
            height: h,
            width: w,
        });
    }
    assert_eq!(gt.dim(), (h, w), "ground truth must match frame dimensions");

    let rec = stack_normalization(stack, params.low_pct, params.high_pct)?;
    let clean = Arc::new(apply_normalization(&gt.view(), &rec));
    let pairs: Vec<Pair> = stack
        .frames()
        .iter()
        .map(|f| Pair {
            noisy: apply_normalization(&f.view(), &rec),
            clean: Arc::clone(&clean),
        })
        .collect();

    let n = pairs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut order);
    let n_test = ((n as f64 * params.test_fraction).round() as usize).min(n.saturating_sub(1));
    let test_indices: Vec<usize> = order[..n_test].to_vec();
    let train_indices: Vec<usize> = order[n_test..].to_vec();

    DenoisingDataset::from_parts(
        stack.name().to_string(),
        pairs,
        train_indices,
        test_indices,
        rec,
        params.patch_size,
    )
}

impl DenoisingDataset {
    /// Assemble a dataset from prebuilt pairs (synthetic data, manifest
    /// replay). Validates pair shapes, split disjointness, and bounds.
    pub fn from_parts(
        name: String,
        pairs: Vec<Pair>,
        train_indices: Vec<usize>,
        test_indices: Vec<usize>,
        normalization: NormalizationRecord,
        patch_size: usize,
    ) -> Result<Self, DataError> {
        for (i, p) in pairs.iter().enumerate() {
            if p.noisy.dim() != p.clean.dim() {
                return Err(DataError::MixedShapes {
                    first: p.noisy.dim(),
                    offending: p.clean.dim(),
                    index: i,
                });
            }
            let (h, w) = p.noisy.dim();
            if patch_size > h || patch_size > w {
                return Err(DataError::PatchTooLarge {
                    patch: patch_size,
                    height: h,
                    width: w,
                });
            }
        }
        let mut seen = vec![false; pairs.len()];
        for &i in train_indices.iter().chain(test_indices.iter()) {
            if i >= pairs.len() {
                return Err(DataError::Manifest(format!(
                    "split index {i} out of range for {} pairs",
                    pairs.len()
                )));
            }
            if seen[i] {
                return Err(DataError::Manifest(format!(
                    "index {i} appears in both splits or twice"
                )));
            }
            seen[i] = true;
        }
        if train_indices.is_empty() {
            return Err(DataError::EmptySplit("train"));
        }
        Ok(Self {
            name,
            pairs,
            train_indices,
            test_indices,
            normalization,
            patch_size,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn normalization(&self) -> &NormalizationRecord {
        &self.normalization
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn train_len(&self) -> usize {
        self.train_indices.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_indices.len()
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_indices
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test_indices
    }

    /// The i-th training pair (full frames).
    pub fn train_pair(&self, i: usize) -> (&Array2<f64>, &Array2<f64>) {
        let p = &self.pairs[self.train_indices[i]];
        (&p.noisy, &p.clean)
    }

    /// The i-th test pair (full frames).
    pub fn test_pair(&self, i: usize) -> (&Array2<f64>, &Array2<f64>) {
        let p = &self.pairs[self.test_indices[i]];
        (&p.noisy, &p.clean)
    }

    /// Random crop of the i-th training pair; noisy and clean are taken
    /// from identical coordinates.
    pub fn sample_train_patch(&self, i: usize, rng: &mut SeededRng) -> (Array2<f64>, Array2<f64>) {
        let p = &self.pairs[self.train_indices[i]];
        let (h, w) = p.noisy.dim();
        let r0 = if h == self.patch_size { 0 } else { rng.index(h - self.patch_size + 1) };
        let c0 = if w == self.patch_size { 0 } else { rng.index(w - self.patch_size + 1) };
        let sl = ndarray::s![r0..r0 + self.patch_size, c0..c0 + self.patch_size];
        (p.noisy.slice(sl).to_owned(), p.clean.slice(sl).to_owned())
    }

    /// Restrict the training split to a seeded uniform sample without
    /// replacement; the test split is untouched.
    pub fn few_shot_subset(&self, spec: &FewShotSpec) -> Result<Self, DataError> {
        let n = match spec.n_samples {
            FewShotSize::All => return Ok(self.clone()),
            FewShotSize::N(n) => n,
        };
        if n == 0 || n > self.train_indices.len() {
            return Err(DataError::SubsetTooLarge {
                requested: n,
                available: self.train_indices.len(),
            });
        }
        let mut rng = SeededRng::new(spec.seed);
        let picked = rng.sample_indices(self.train_indices.len(), n);
        let train_indices: Vec<usize> = picked.iter().map(|&k| self.train_indices[k]).collect();
        Ok(Self {
            train_indices,
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_frame(h: usize, w: usize, v: f64) -> Array2<f64> {
        Array2::from_elem((h, w), v)
    }

    fn noisy_stack(n: usize, h: usize, w: usize, seed: u64) -> ImageStack {
        let mut rng = SeededRng::new(seed);
        let frames = (0..n)
            .map(|_| Array2::from_shape_fn((h, w), |_| rng.uniform_in(10.0, 500.0)))
            .collect();
        ImageStack::from_frames("test", frames).unwrap()
    }

    #[test]
    fn stack_rejects_mixed_shapes() {
        let err = ImageStack::from_frames(
            "bad",
            vec![const_frame(8, 8, 1.0), const_frame(16, 16, 1.0)],
        )
        .unwrap_err();
        assert!(matches!(err, DataError::MixedShapes { index: 1, .. }));
    }

    #[test]
    fn stack_constant_frames_pixel_range() {
        let s = ImageStack::from_frames(
            "const",
            vec![const_frame(8, 8, 3.5), const_frame(8, 8, 3.5)],
        )
        .unwrap();
        assert_eq!(s.pixel_range(), (3.5, 3.5));
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn stack_rejects_single_frame_and_negative_values() {
        assert!(ImageStack::from_frames("one", vec![const_frame(4, 4, 1.0)]).is_err());
        let mut neg = const_frame(4, 4, 1.0);
        neg[[0, 0]] = -0.5;
        assert!(ImageStack::from_frames("neg", vec![neg, const_frame(4, 4, 1.0)]).is_err());
    }

    #[test]
    fn ground_truth_mean_of_zero_and_two_is_one() {
        let s = ImageStack::from_frames(
            "mix",
            vec![const_frame(6, 6, 0.0), const_frame(6, 6, 2.0)],
        )
        .unwrap();
        let gt = synthesize_ground_truth(&s);
        assert!(gt.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ground_truth_matches_brute_force_accumulation() {
        let s = noisy_stack(100, 12, 9, 42);
        let gt = synthesize_ground_truth(&s);
        // independent oracle: explicit per-pixel summation loop
        for i in 0..12 {
            for j in 0..9 {
                let mut acc = 0.0;
                for f in s.frames() {
                    acc += f[[i, j]];
                }
                assert_eq!(gt[[i, j]], acc / 100.0);
            }
        }
    }

    #[test]
    fn ground_truth_of_repeated_frame_is_that_frame() {
        let mut rng = SeededRng::new(1);
        let base = Array2::from_shape_fn((7, 7), |_| rng.uniform_in(0.0, 100.0));
        let s = ImageStack::from_frames("rep", vec![base.clone(); 5]).unwrap();
        let gt = synthesize_ground_truth(&s);
        for (a, b) in gt.iter().zip(base.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ground_truth_commutes_with_frame_permutation() {
        let s = noisy_stack(10, 5, 5, 7);
        let gt = synthesize_ground_truth(&s);
        let mut frames = s.frames().to_vec();
        frames.reverse();
        frames.swap(0, 3);
        let permuted = ImageStack::from_frames("perm", frames).unwrap();
        let gt2 = synthesize_ground_truth(&permuted);
        // mean over reordered frames; equal within accumulation rounding
        for (a, b) in gt.iter().zip(gt2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_constant_array_is_degenerate() {
        let arr = const_frame(4, 4, 9.0);
        assert!(matches!(
            normalize(&arr.view(), 0.0, 100.0),
            Err(DataError::DegenerateRange(_))
        ));
    }

    #[test]
    fn normalize_linear_rescale() {
        let arr = ndarray::arr2(&[[0.0, 50.0, 100.0]]);
        let (out, rec) = normalize(&arr.view(), 0.0, 100.0).unwrap();
        assert_eq!(out, ndarray::arr2(&[[0.0, 0.5, 1.0]]));
        assert_eq!(rec.p_low, 0.0);
        assert_eq!(rec.p_high, 100.0);
    }

    #[test]
    fn normalize_roundtrip_within_tolerance() {
        let mut rng = SeededRng::new(8);
        let arr = Array2::from_shape_fn((16, 16), |_| rng.uniform_in(5.0, 900.0));
        let (norm, rec) = normalize(&arr.view(), 0.0, 100.0).unwrap();
        let back = denormalize(&norm.view(), &rec);
        for (a, b) in arr.iter().zip(back.iter()) {
            assert!((a - b).abs() / a.abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn normalize_is_monotone() {
        let mut rng = SeededRng::new(9);
        let a = Array2::from_shape_fn((8, 8), |_| rng.uniform_in(0.0, 100.0));
        let b = &a + 3.0; // elementwise a <= b
        let rec = normalization_from_values(a.iter().copied().collect(), 0.1, 99.9).unwrap();
        let na = apply_normalization(&a.view(), &rec);
        let nb = apply_normalization(&b.view(), &rec);
        for (x, y) in na.iter().zip(nb.iter()) {
            assert!(x <= y);
        }
    }

    #[test]
    fn build_dataset_split_counts_and_disjointness() {
        let s = noisy_stack(100, 20, 20, 3);
        let gt = synthesize_ground_truth(&s);
        let params = DatasetParams {
            patch_size: 16,
            test_fraction: 0.1,
            ..Default::default()
        };
        let d = build_dataset(&s, &gt, &params, 0).unwrap();
        assert_eq!(d.train_len(), 90);
        assert_eq!(d.test_len(), 10);
        let mut all: Vec<usize> = d
            .train_indices()
            .iter()
            .chain(d.test_indices().iter())
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn build_dataset_deterministic_per_seed() {
        let s = noisy_stack(30, 16, 16, 4);
        let gt = synthesize_ground_truth(&s);
        let params = DatasetParams {
            patch_size: 8,
            test_fraction: 0.2,
            ..Default::default()
        };
        let a = build_dataset(&s, &gt, &params, 5).unwrap();
        let b = build_dataset(&s, &gt, &params, 5).unwrap();
        assert_eq!(a.train_indices(), b.train_indices());
        assert_eq!(a.test_indices(), b.test_indices());
    }

    #[test]
    fn build_dataset_patch_too_large() {
        let s = noisy_stack(4, 32, 32, 5);
        let gt = synthesize_ground_truth(&s);
        let params = DatasetParams {
            patch_size: 512,
            ..Default::default()
        };
        assert!(matches!(
            build_dataset(&s, &gt, &params, 0),
            Err(DataError::PatchTooLarge { patch: 512, .. })
        ));
    }

    #[test]
    fn patch_sampling_uses_identical_coordinates() {
        // coordinate-ramp oracle: noisy pixel value encodes its position,
        // clean encodes position + offset; a crop is coordinate-aligned
        // iff clean - noisy is the constant offset everywhere
        let (h, w) = (24, 18);
        let ramp = Array2::from_shape_fn((h, w), |(i, j)| (i * w + j) as f64);
        let offset = 10_000.0;
        let clean = Arc::new(ramp.mapv(|v| v + offset));
        let pairs = vec![Pair {
            noisy: ramp,
            clean,
        }];
        let rec = NormalizationRecord {
            low_pct: 0.0,
            high_pct: 100.0,
            p_low: 0.0,
            p_high: 1.0,
        };
        let d =
            DenoisingDataset::from_parts("ramp".into(), pairs, vec![0], vec![], rec, 8).unwrap();
        let mut rng = SeededRng::new(0);
        for _ in 0..50 {
            let (noisy, clean) = d.sample_train_patch(0, &mut rng);
            for (a, b) in noisy.iter().zip(clean.iter()) {
                assert_eq!(b - a, offset);
            }
        }
    }

    #[test]
    fn few_shot_subset_reproducible_and_bounded() {
        let s = noisy_stack(100, 16, 16, 6);
        let gt = synthesize_ground_truth(&s);
        let params = DatasetParams {
            patch_size: 8,
            test_fraction: 0.1,
            ..Default::default()
        };
        let d = build_dataset(&s, &gt, &params, 0).unwrap();

        let spec = FewShotSpec {
            n_samples: FewShotSize::N(16),
            seed: 0,
        };
        let a = d.few_shot_subset(&spec).unwrap();
        let b = d.few_shot_subset(&spec).unwrap();
        assert_eq!(a.train_len(), 16);
        assert_eq!(a.train_indices(), b.train_indices());
        assert_eq!(a.test_indices(), d.test_indices());

        // ALL is the identity
        let all = d
            .few_shot_subset(&FewShotSpec {
                n_samples: FewShotSize::All,
                seed: 9,
            })
            .unwrap();
        assert_eq!(all.train_indices(), d.train_indices());

        // different seeds pick different sets; verified against the
        // seeded sampler stream itself
        let other = d
            .few_shot_subset(&FewShotSpec {
                n_samples: FewShotSize::N(16),
                seed: 1,
            })
            .unwrap();
        let mut oracle_rng = SeededRng::new(1);
        let oracle: Vec<usize> = oracle_rng
            .sample_indices(d.train_len(), 16)
            .iter()
            .map(|&k| d.train_indices()[k])
            .collect();
        assert_eq!(other.train_indices(), oracle.as_slice());
        assert_ne!(other.train_indices(), a.train_indices());

        // oversized request is rejected
        assert!(matches!(
            d.few_shot_subset(&FewShotSpec {
                n_samples: FewShotSize::N(91),
                seed: 0,
            }),
            Err(DataError::SubsetTooLarge { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn normalization_is_monotone_on_random_arrays(
            values in proptest::collection::vec(0.0f64..1000.0, 16..64),
            shift in 0.0f64..50.0,
        ) {
            let n = values.len();
            let a = Array2::from_shape_vec((n, 1), values).unwrap();
            let b = &a + shift;
            let rec = normalization_from_values(a.iter().copied().collect(), 0.1, 99.9);
            proptest::prop_assume!(rec.is_ok());
            let rec = rec.unwrap();
            let na = apply_normalization(&a.view(), &rec);
            let nb = apply_normalization(&b.view(), &rec);
            for (x, y) in na.iter().zip(nb.iter()) {
                proptest::prop_assert!(x <= y);
            }
        }

        #[test]
        fn normalize_roundtrip_recovers_values(
            values in proptest::collection::vec(1.0f64..5000.0, 8..64),
        ) {
            let n = values.len();
            let a = Array2::from_shape_vec((n, 1), values).unwrap();
            // full-range percentiles leave nothing clipped
            let out = normalize(&a.view(), 0.0, 100.0);
            proptest::prop_assume!(out.is_ok());
            let (norm, rec) = out.unwrap();
            let back = denormalize(&norm.view(), &rec);
            for (orig, rt) in a.iter().zip(back.iter()) {
                proptest::prop_assert!((orig - rt).abs() / orig.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn few_shot_size_parses_and_displays() {
        assert_eq!("all".parse::<FewShotSize>().unwrap(), FewShotSize::All);
        assert_eq!("16".parse::<FewShotSize>().unwrap(), FewShotSize::N(16));
        assert!("sixteen".parse::<FewShotSize>().is_err());
        assert_eq!(FewShotSize::All.to_string(), "all");
        assert_eq!(FewShotSize::N(32).to_string(), "32");
    }
}
