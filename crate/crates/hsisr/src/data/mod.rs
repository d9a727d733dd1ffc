//! Hyperspectral cube I/O and the LR/HR pair pipeline: normalization,
//! center cropping, patch extraction, degradation (area downsample) plus
//! bilinear pre-upsampling, dataset splitting, and manifest files.

mod envi;
mod hsc;
mod synth;

pub(crate) use hsc::write_atomic;

pub use envi::import_envi;
pub use hsc::{read_hsc, write_hsc};
pub use synth::{synth_generate, SynthSpec};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resample::{area_downsample, bilinear_resize};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {got:?}")]
    BadMagic { expected: String, got: String },
    #[error("file truncated: expected {expected} more bytes")]
    Truncated { expected: usize },
    #[error("header does not match payload: {0}")]
    HeaderMismatch(String),
    #[error("unsupported {what}: {value}")]
    Unsupported { what: &'static str, value: String },
    #[error("missing header field '{0}'")]
    MissingField(&'static str),
    #[error("malformed header field '{field}': {value}")]
    MalformedField { field: &'static str, value: String },
    #[error("cube is already normalized")]
    AlreadyNormalized,
    #[error("cube maximum is not positive; cannot normalize")]
    NonPositiveMax,
    #[error("cube contains negative values; cannot normalize to [0, 1]")]
    NegativeValues,
    #[error("crop size {size} exceeds cube extent {h}x{w}")]
    CropTooLarge { size: usize, h: usize, w: usize },
    #[error("patch size {size} exceeds cube extent {h}x{w}")]
    PatchTooLarge { size: usize, h: usize, w: usize },
    #[error("patch size {size} is not divisible by scale {scale}")]
    IndivisiblePatch { size: usize, scale: usize },
    #[error("need at least 2 pairs to split, got {0}")]
    TooFewPairs(usize),
    #[error("validation fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("split would leave no training pairs")]
    EmptySplit,
    #[error("manifest parse error: {0}")]
    ManifestParse(String),
    #[error("pair {index}: stored lr_up does not match re-derivation from hr")]
    PairIntegrity { index: usize },
    #[error("cube metadata mismatch: {0}")]
    MetaMismatch(String),
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Provenance and normalization state of a cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeMeta {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub normalized: bool,
    /// Divisor that was applied when normalizing (1.0 when untouched).
    pub norm_scale: f32,
    pub source: String,
}

/// A single hyperspectral image: a batch-1 tensor plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Cube {
    pub data: Tensor<f32>,
    pub meta: CubeMeta,
}

impl Cube {
    /// Validates the dims/meta agreement and, for normalized cubes, the
    /// [0, 1] range and a positive scale.
    pub fn new(data: Tensor<f32>, meta: CubeMeta) -> Result<Self, DataError> {
        let (b, h, w, c) = data.dims();
        if b != 1 || h != meta.height || w != meta.width || c != meta.bands {
            return Err(DataError::MetaMismatch(format!(
                "tensor {b}x{h}x{w}x{c} vs meta {}x{}x{}",
                meta.height, meta.width, meta.bands
            )));
        }
        if meta.normalized {
            if !(meta.norm_scale > 0.0) {
                return Err(DataError::MetaMismatch(
                    "normalized cube requires a positive norm_scale".into(),
                ));
            }
            if data.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(DataError::MetaMismatch(
                    "normalized cube has values outside [0, 1]".into(),
                ));
            }
        }
        Ok(Self { data, meta })
    }

    pub fn height(&self) -> usize {
        self.meta.height
    }

    pub fn width(&self) -> usize {
        self.meta.width
    }

    pub fn bands(&self) -> usize {
        self.meta.bands
    }
}

/// Divides every value by the global maximum and records it as the scale.
/// The input must not be normalized already, must be nonnegative, and must
/// have a positive maximum; the output maximum is exactly 1.
pub fn normalize_cube(cube: &Cube) -> Result<Cube, DataError> {
    if cube.meta.normalized {
        return Err(DataError::AlreadyNormalized);
    }
    let mut max = f32::NEG_INFINITY;
    let mut min = f32::INFINITY;
    for &v in cube.data.data() {
        max = max.max(v);
        min = min.min(v);
    }
    if min < 0.0 {
        return Err(DataError::NegativeValues);
    }
    if !(max > 0.0) {
        return Err(DataError::NonPositiveMax);
    }
    let data = cube.data.map(|v| v / max);
    let meta = CubeMeta {
        normalized: true,
        norm_scale: max,
        ..cube.meta.clone()
    };
    Cube::new(data, meta)
}

/// Center crop with top-left `((H - size) / 2, (W - size) / 2)`, floored.
pub fn center_crop(cube: &Cube, size: usize) -> Result<Cube, DataError> {
    let (h, w) = (cube.height(), cube.width());
    if size > h.min(w) || size == 0 {
        return Err(DataError::CropTooLarge { size, h, w });
    }
    let top = (h - size) / 2;
    let left = (w - size) / 2;
    let data = Tensor::from_fn(1, size, size, cube.bands(), |_, y, x, c| {
        cube.data.at(0, top + y, left + x, c)
    });
    let meta = CubeMeta {
        height: size,
        width: size,
        ..cube.meta.clone()
    };
    Cube::new(data, meta)
}

/// A high-resolution patch with its origin in the source cube.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub data: Tensor<f32>,
    /// `(row, col)` of the patch's top-left corner in the source cube.
    pub origin: (usize, usize),
}

/// Non-overlapping patch grid: stride = patch size, row-major order,
/// remainder rows and columns discarded.
pub fn extract_patches(cube: &Cube, patch: usize) -> Result<Vec<Patch>, DataError> {
    let (h, w) = (cube.height(), cube.width());
    if patch == 0 || patch > h.min(w) {
        return Err(DataError::PatchTooLarge { size: patch, h, w });
    }
    let mut out = Vec::with_capacity((h / patch) * (w / patch));
    for py in 0..h / patch {
        for px in 0..w / patch {
            let (top, left) = (py * patch, px * patch);
            let data = Tensor::from_fn(1, patch, patch, cube.bands(), |_, y, x, c| {
                cube.data.at(0, top + y, left + x, c)
            });
            out.push(Patch {
                data,
                origin: (top, left),
            });
        }
    }
    Ok(out)
}

/// A training sample: the HR patch and its degraded, re-upsampled
/// counterpart at the same resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub hr: Tensor<f32>,
    pub lr_up: Tensor<f32>,
    pub scale: usize,
    pub origin: (usize, usize),
}

impl SamplePair {
    /// Re-derives `lr_up` from `hr` and demands bitwise equality; the
    /// integrity gate applied when loading prepared datasets.
    pub fn verify(&self, index: usize) -> Result<(), DataError> {
        let derived = derive_lr_up(&self.hr, self.scale)?;
        let ok = derived.same_dims(&self.lr_up)
            && derived
                .data()
                .iter()
                .zip(self.lr_up.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if ok {
            Ok(())
        } else {
            Err(DataError::PairIntegrity { index })
        }
    }
}

fn derive_lr_up(hr: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>, DataError> {
    let lr = area_downsample(hr, scale)?;
    Ok(bilinear_resize(&lr, hr.height(), hr.width())?)
}

/// Degrades an HR patch by area downsampling and bilinear pre-upsampling.
pub fn make_pair(patch: &Patch, scale: usize) -> Result<SamplePair, DataError> {
    let (_, h, w, _) = patch.data.dims();
    if h % scale != 0 || w % scale != 0 {
        return Err(DataError::IndivisiblePatch {
            size: h.max(w),
            scale,
        });
    }
    let lr_up = derive_lr_up(&patch.data, scale)?;
    Ok(SamplePair {
        hr: patch.data.clone(),
        lr_up,
        scale,
        origin: patch.origin,
    })
}

/// Seeded deterministic shuffle; the last `ceil(val_fraction * n)` pairs
/// become the validation set. The two sets are disjoint and exhaustive.
pub fn split_dataset(
    mut pairs: Vec<SamplePair>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<SamplePair>, Vec<SamplePair>), DataError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::BadFraction(val_fraction));
    }
    let n = pairs.len();
    if n < 2 {
        return Err(DataError::TooFewPairs(n));
    }
    let val = (val_fraction * n as f64).ceil() as usize;
    if val >= n {
        return Err(DataError::EmptySplit);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let tail = pairs.split_off(n - val);
    Ok((pairs, tail))
}

/// Which half of a prepared dataset to load.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split '{other}' (expected train|val)")),
        }
    }
}

/// One manifest row: where the pair's cubes live and how it was made.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPair {
    pub hr: String,
    pub lr_up: String,
    pub scale: usize,
    pub split: Split,
    pub origin: [usize; 2],
    pub source: String,
}

/// Dataset manifest: a TOML document listing every prepared pair.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, rename = "pair")]
    pub pairs: Vec<ManifestPair>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        toml::from_str(&text).map_err(|e| DataError::ManifestParse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = toml::to_string(self).map_err(|e| DataError::ManifestParse(e.to_string()))?;
        crate::data::hsc::write_atomic(path, text.as_bytes())
    }

    /// Band count shared by all pairs, read from the first HR cube.
    pub fn peek_bands(&self, dir: &Path) -> Result<usize, DataError> {
        let first = self
            .pairs
            .first()
            .ok_or_else(|| DataError::ManifestParse("manifest lists no pairs".into()))?;
        let cube = read_hsc(&dir.join(&first.hr))?;
        Ok(cube.bands())
    }
}

/// Loads all pairs of one split, verifying pair integrity. Paths in the
/// manifest are relative to the manifest's directory.
pub fn load_split(manifest_path: &Path, split: Split) -> Result<Vec<SamplePair>, DataError> {
    let manifest = Manifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (index, entry) in manifest.pairs.iter().enumerate() {
        if entry.split != split {
            continue;
        }
        let hr = read_hsc(&dir.join(&entry.hr))?;
        let lr_up = read_hsc(&dir.join(&entry.lr_up))?;
        let pair = SamplePair {
            hr: hr.data,
            lr_up: lr_up.data,
            scale: entry.scale,
            origin: (entry.origin[0], entry.origin[1]),
        };
        pair.verify(index)?;
        out.push(pair);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::seeded_tensor;

    fn test_cube(seed: u64, h: usize, w: usize, c: usize) -> Cube {
        let data = seeded_tensor::<f32>(seed, 1, h, w, c, 0.0, 2.0);
        Cube::new(
            data,
            CubeMeta {
                height: h,
                width: w,
                bands: c,
                normalized: false,
                norm_scale: 1.0,
                source: "test".into(),
            },
        )
        .unwrap()
    }

    #[test]
    fn cube_meta_must_match_tensor() {
        let data = Tensor::<f32>::zeros(1, 4, 4, 2);
        let meta = CubeMeta {
            height: 4,
            width: 5,
            bands: 2,
            normalized: false,
            norm_scale: 1.0,
            source: String::new(),
        };
        assert!(matches!(
            Cube::new(data, meta),
            Err(DataError::MetaMismatch(_))
        ));
    }

    #[test]
    fn normalized_cube_rejects_out_of_range() {
        let data = Tensor::<f32>::filled(1, 2, 2, 1, 1.5);
        let meta = CubeMeta {
            height: 2,
            width: 2,
            bands: 1,
            normalized: true,
            norm_scale: 1.0,
            source: String::new(),
        };
        assert!(Cube::new(data, meta).is_err());
    }

    #[test]
    fn normalize_divides_by_global_max() {
        let data = Tensor::<f32>::new(1, 1, 2, 2, vec![0.5, 1.0, 2.0, 0.25]).unwrap();
        let cube = Cube::new(
            data,
            CubeMeta {
                height: 1,
                width: 2,
                bands: 2,
                normalized: false,
                norm_scale: 1.0,
                source: String::new(),
            },
        )
        .unwrap();
        let n = normalize_cube(&cube).unwrap();
        assert_eq!(n.meta.norm_scale, 2.0);
        assert_eq!(n.data.data(), &[0.25, 0.5, 1.0, 0.125]);
        // Idempotence guard.
        assert!(matches!(
            normalize_cube(&n),
            Err(DataError::AlreadyNormalized)
        ));
    }

    #[test]
    fn normalize_max_is_exactly_one_and_round_trips() {
        let cube = test_cube(400, 6, 6, 3);
        let n = normalize_cube(&cube).unwrap();
        let max = n.data.data().iter().cloned().fold(f32::MIN, f32::max);
        assert_eq!(max, 1.0);
        // Multiplying back recovers the source within 1 ulp per element.
        for (&orig, &norm) in cube.data.data().iter().zip(n.data.data()) {
            let back = norm * n.meta.norm_scale;
            let ulp = (orig.abs() * f32::EPSILON).max(f32::MIN_POSITIVE);
            assert!((back - orig).abs() <= ulp, "{back} vs {orig}");
        }
    }

    #[test]
    fn normalize_rejects_degenerate_cubes() {
        let zero = Cube::new(
            Tensor::<f32>::zeros(1, 2, 2, 1),
            CubeMeta {
                height: 2,
                width: 2,
                bands: 1,
                normalized: false,
                norm_scale: 1.0,
                source: String::new(),
            },
        )
        .unwrap();
        assert!(matches!(
            normalize_cube(&zero),
            Err(DataError::NonPositiveMax)
        ));
        let neg = Cube::new(
            Tensor::<f32>::new(1, 1, 2, 1, vec![-0.5, 1.0]).unwrap(),
            CubeMeta {
                height: 1,
                width: 2,
                bands: 1,
                normalized: false,
                norm_scale: 1.0,
                source: String::new(),
            },
        )
        .unwrap();
        assert!(matches!(
            normalize_cube(&neg),
            Err(DataError::NegativeValues)
        ));
    }

    #[test]
    fn center_crop_origin_arithmetic() {
        // 512 crop of a 530x520 cube starts at (9, 4).
        let cube = test_cube(401, 530, 520, 1);
        let cropped = center_crop(&cube, 512).unwrap();
        assert_eq!(cropped.data.at(0, 0, 0, 0), cube.data.at(0, 9, 4, 0));
        assert_eq!(
            cropped.data.at(0, 511, 511, 0),
            cube.data.at(0, 9 + 511, 4 + 511, 0)
        );
    }

    #[test]
    fn center_crop_identity_and_bounds() {
        let cube = test_cube(402, 8, 8, 2);
        let same = center_crop(&cube, 8).unwrap();
        assert_eq!(same.data, cube.data);
        assert!(matches!(
            center_crop(&cube, 9),
            Err(DataError::CropTooLarge { .. })
        ));
    }

    #[test]
    fn patch_grid_counts_and_origins() {
        let cube = test_cube(403, 300, 300, 1);
        let patches = extract_patches(&cube, 128).unwrap();
        assert_eq!(patches.len(), 4);
        assert_eq!(patches[0].origin, (0, 0));
        assert_eq!(patches[1].origin, (0, 128));
        assert_eq!(patches[2].origin, (128, 0));
        assert_eq!(patches[3].origin, (128, 128));
        // Values equal the source sub-window bitwise.
        for p in &patches {
            for y in 0..128 {
                for x in 0..128 {
                    assert_eq!(
                        p.data.at(0, y, x, 0).to_bits(),
                        cube.data.at(0, p.origin.0 + y, p.origin.1 + x, 0).to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn patch_tiles_are_disjoint_and_in_bounds() {
        let cube = test_cube(404, 50, 70, 1);
        let patches = extract_patches(&cube, 16).unwrap();
        assert_eq!(patches.len(), 3 * 4);
        let mut seen = std::collections::HashSet::new();
        for p in &patches {
            assert!(p.origin.0 + 16 <= 50 && p.origin.1 + 16 <= 70);
            for y in 0..16 {
                for x in 0..16 {
                    assert!(seen.insert((p.origin.0 + y, p.origin.1 + x)));
                }
            }
        }
    }

    #[test]
    fn make_pair_shapes_and_constant_exactness() {
        let patch = Patch {
            data: Tensor::<f32>::filled(1, 144, 144, 2, 0.7),
            origin: (0, 0),
        };
        let pair = make_pair(&patch, 8).unwrap();
        assert_eq!(pair.lr_up.dims(), (1, 144, 144, 2));
        // Constant patches pass through the degradation unchanged.
        for (a, b) in pair.hr.data().iter().zip(pair.lr_up.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(matches!(
            make_pair(
                &Patch {
                    data: Tensor::<f32>::zeros(1, 100, 100, 1),
                    origin: (0, 0)
                },
                8
            ),
            Err(DataError::IndivisiblePatch { .. })
        ));
    }

    #[test]
    fn make_pair_matches_kernel_composition_bitwise() {
        let data = seeded_tensor::<f32>(405, 1, 32, 32, 3, 0.0, 1.0);
        let patch = Patch {
            data: data.clone(),
            origin: (4, 8),
        };
        let pair = make_pair(&patch, 4).unwrap();
        let lr = crate::resample::area_downsample(&data, 4).unwrap();
        let want = crate::resample::bilinear_resize(&lr, 32, 32).unwrap();
        for (a, b) in pair.lr_up.data().iter().zip(want.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        pair.verify(0).unwrap();
    }

    #[test]
    fn pair_integrity_detects_tampering() {
        let data = seeded_tensor::<f32>(406, 1, 16, 16, 2, 0.0, 1.0);
        let mut pair = make_pair(
            &Patch {
                data,
                origin: (0, 0),
            },
            2,
        )
        .unwrap();
        let mut bad = pair.lr_up.data().to_vec();
        bad[5] += 1e-3;
        pair.lr_up = Tensor::new(1, 16, 16, 2, bad).unwrap();
        assert!(matches!(
            pair.verify(3),
            Err(DataError::PairIntegrity { index: 3 })
        ));
    }

    fn dummy_pairs(n: usize) -> Vec<SamplePair> {
        (0..n)
            .map(|i| SamplePair {
                hr: Tensor::<f32>::filled(1, 4, 4, 1, i as f32 * 0.01),
                lr_up: Tensor::<f32>::filled(1, 4, 4, 1, i as f32 * 0.01),
                scale: 2,
                origin: (i, 0),
            })
            .collect()
    }

    #[test]
    fn split_is_deterministic_disjoint_exhaustive() {
        let (train, val) = split_dataset(dummy_pairs(10), 0.1, 42).unwrap();
        assert_eq!(train.len(), 9);
        assert_eq!(val.len(), 1);
        let (train2, val2) = split_dataset(dummy_pairs(10), 0.1, 42).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);
        let mut origins: Vec<usize> = train.iter().chain(&val).map(|p| p.origin.0).collect();
        origins.sort_unstable();
        assert_eq!(origins, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_validates_inputs() {
        assert!(matches!(
            split_dataset(dummy_pairs(1), 0.5, 0),
            Err(DataError::TooFewPairs(1))
        ));
        assert!(matches!(
            split_dataset(dummy_pairs(4), 0.0, 0),
            Err(DataError::BadFraction(_))
        ));
        assert!(matches!(
            split_dataset(dummy_pairs(2), 0.9, 0),
            Err(DataError::EmptySplit)
        ));
    }
}
