//! Volume ingestion, per-subject normalization, slice-sequence extraction
//! with bilinear resizing, dataset manifests, and a synthetic phantom
//! generator for desk-scale verification.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub mod manifest;
pub mod phantom;

pub use manifest::{read_manifest, split_manifest, write_manifest, ManifestEntry, Split};
pub use phantom::{generate_corpus, generate_phantom};

#[derive(Debug)]
pub enum DataError {
    /// Filesystem failure, with the path involved.
    Io { path: PathBuf, source: std::io::Error },
    /// Sidecar or manifest content that cannot be interpreted.
    Parse { path: PathBuf, detail: String },
    /// Structurally valid input that violates a contract.
    Invalid { what: &'static str, detail: String },
    /// Volume with zero variance cannot be normalized.
    DegenerateVolume,
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            DataError::Parse { path, detail } => write!(f, "{}: {detail}", path.display()),
            DataError::Invalid { what, detail } => write!(f, "invalid {what}: {detail}"),
            DataError::DegenerateVolume => write!(f, "degenerate volume: zero variance"),
        }
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DataError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type DataResult<T> = Result<T, DataError>;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sidecar header stored next to each raw volume as `<path>.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    dtype: String,
    age_years: f64,
    subject_id: String,
    site: String,
    cohort: String,
}

/// Dense 3D scalar field with subject metadata. Voxels are stored with the
/// first axis fastest: `index = x + X*(y + Y*z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub voxels: Vec<f32>,
    pub age_years: f64,
    pub subject_id: String,
    pub site: String,
    pub cohort: String,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        voxels: Vec<f32>,
        age_years: f64,
        subject_id: impl Into<String>,
    ) -> DataResult<Self> {
        let n: usize = dims.iter().product();
        if n == 0 || voxels.len() != n {
            return Err(DataError::Invalid {
                what: "volume",
                detail: format!("dims {dims:?} need {n} voxels, got {}", voxels.len()),
            });
        }
        if !(0.0..=120.0).contains(&age_years) {
            return Err(DataError::Invalid {
                what: "volume",
                detail: format!("age_years {age_years} outside [0, 120]"),
            });
        }
        Ok(Volume {
            dims,
            voxels,
            age_years,
            subject_id: subject_id.into(),
            site: String::new(),
            cohort: String::new(),
        })
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        let [dx, dy, _] = self.dims;
        self.voxels[x + dx * (y + dy * z)]
    }

    /// Writes raw little-endian f32 voxels to `path` and the header sidecar
    /// to `path.json`.
    pub fn write(&self, path: &Path) -> DataResult<()> {
        let mut bytes = Vec::with_capacity(self.voxels.len() * 4);
        for v in &self.voxels {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        f.write_all(&bytes).map_err(|e| io_err(path, e))?;
        let sidecar = Sidecar {
            dims: self.dims,
            dtype: "f32le".to_string(),
            age_years: self.age_years,
            subject_id: self.subject_id.clone(),
            site: self.site.clone(),
            cohort: self.cohort.clone(),
        };
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        let sc_path = sidecar_path(path);
        std::fs::write(&sc_path, text + "\n").map_err(|e| io_err(&sc_path, e))
    }

    /// Reads a volume written by [`Volume::write`], validating dtype and
    /// byte length against the sidecar.
    pub fn read(path: &Path) -> DataResult<Self> {
        let sc_path = sidecar_path(path);
        let text = std::fs::read_to_string(&sc_path).map_err(|e| io_err(&sc_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| DataError::Parse {
            path: sc_path.clone(),
            detail: e.to_string(),
        })?;
        if sidecar.dtype != "f32le" {
            return Err(DataError::Parse {
                path: sc_path,
                detail: format!("unknown dtype {:?}", sidecar.dtype),
            });
        }
        let n: usize = sidecar.dims.iter().product();
        let mut f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
        if bytes.len() != n * 4 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                detail: format!(
                    "dims {:?} need {} bytes, file has {}",
                    sidecar.dims,
                    n * 4,
                    bytes.len()
                ),
            });
        }
        let voxels = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut v = Volume::new(sidecar.dims, voxels, sidecar.age_years, sidecar.subject_id)?;
        v.site = sidecar.site;
        v.cohort = sidecar.cohort;
        Ok(v)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

/// Denominator used for per-subject standardization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// Divide by the standard deviation (z-score, the default).
    Std,
    /// Divide by the variance (the literal protocol wording).
    Variance,
}

impl NormMode {
    pub fn parse(s: &str) -> DataResult<Self> {
        match s {
            "std" => Ok(NormMode::Std),
            "variance" => Ok(NormMode::Variance),
            other => Err(DataError::Invalid {
                what: "normalize_by",
                detail: format!("expected std or variance, got {other:?}"),
            }),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            NormMode::Std => "std",
            NormMode::Variance => "variance",
        }
    }
}

/// Per-subject standardization: subtract the volume mean, divide by the
/// standard deviation (or variance under the literal mode). Statistics are
/// population statistics accumulated in 64-bit.
pub fn normalize(v: &Volume, mode: NormMode) -> DataResult<Volume> {
    let n = v.voxels.len() as f64;
    let mean = v.voxels.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .voxels
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if var <= 0.0 {
        return Err(DataError::DegenerateVolume);
    }
    let denom = match mode {
        NormMode::Std => var.sqrt(),
        NormMode::Variance => var,
    };
    let voxels = v
        .voxels
        .iter()
        .map(|&x| ((x as f64 - mean) / denom) as f32)
        .collect();
    Ok(Volume {
        dims: v.dims,
        voxels,
        age_years: v.age_years,
        subject_id: v.subject_id.clone(),
        site: v.site.clone(),
        cohort: v.cohort.clone(),
    })
}

/// How volumes become fixed-length slice sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Volume axis sliced along (0, 1, or 2).
    pub axis: usize,
    /// Number of equally spaced slices extracted.
    pub n_slices: usize,
    /// Output slice size `[H, W]` after bilinear resizing.
    pub target: [usize; 2],
    /// Standardization denominator.
    pub normalize_by: NormMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            axis: 2,
            n_slices: 36,
            target: [50, 50],
            normalize_by: NormMode::Std,
        }
    }
}

/// Ordered slice sequence extracted from one subject's volume. Slices are
/// `[1, H, W]` tensors sharing one target size.
#[derive(Debug, Clone)]
pub struct SliceSequence {
    pub slices: Vec<Tensor<f32>>,
    pub subject_id: String,
    pub age_years: f64,
}

/// Indices of `n` equally spaced samples from `0..extent`, endpoints
/// included, nearest-index rounding.
pub fn slice_indices(extent: usize, n: usize) -> DataResult<Vec<usize>> {
    if n == 0 || n > extent {
        return Err(DataError::Invalid {
            what: "n_slices",
            detail: format!("requested {n} slices from extent {extent}"),
        });
    }
    if n == 1 {
        return Ok(vec![(extent - 1) / 2]);
    }
    let step = (extent - 1) as f64 / (n - 1) as f64;
    Ok((0..n).map(|i| (i as f64 * step).round() as usize).collect())
}

/// Extracts one plane perpendicular to `axis` in row-major order:
/// axis 2 gives `[Y, X]`, axis 1 gives `[Z, X]`, axis 0 gives `[Z, Y]`.
fn extract_plane(v: &Volume, axis: usize, at: usize) -> (Vec<f32>, [usize; 2]) {
    let [dx, dy, dz] = v.dims;
    match axis {
        2 => {
            let mut out = Vec::with_capacity(dy * dx);
            for y in 0..dy {
                for x in 0..dx {
                    out.push(v.at(x, y, at));
                }
            }
            (out, [dy, dx])
        }
        1 => {
            let mut out = Vec::with_capacity(dz * dx);
            for z in 0..dz {
                for x in 0..dx {
                    out.push(v.at(x, at, z));
                }
            }
            (out, [dz, dx])
        }
        _ => {
            let mut out = Vec::with_capacity(dz * dy);
            for z in 0..dz {
                for y in 0..dy {
                    out.push(v.at(at, y, z));
                }
            }
            (out, [dz, dy])
        }
    }
}

/// Bilinear resize with corner alignment: output corners sample input
/// corners exactly; a single output row or column samples the center.
pub fn resize_bilinear(src: &[f32], size: [usize; 2], out_size: [usize; 2]) -> Vec<f32> {
    let [h, w] = size;
    let [oh, ow] = out_size;
    assert!(h > 0 && w > 0 && oh > 0 && ow > 0, "empty resize extent");
    let coord = |i: usize, out_n: usize, in_n: usize| -> f64 {
        if out_n == 1 {
            (in_n - 1) as f64 / 2.0
        } else {
            i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let sy = coord(oy, oh, h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..ow {
            let sx = coord(ox, ow, w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let v00 = src[y0 * w + x0] as f64;
            let v01 = src[y0 * w + x1] as f64;
            let v10 = src[y1 * w + x0] as f64;
            let v11 = src[y1 * w + x1] as f64;
            let top = v00 * (1.0 - fx) + v01 * fx;
            let bot = v10 * (1.0 - fx) + v11 * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

/// Extracts `cfg.n_slices` equally spaced slices along `cfg.axis` and
/// bilinear-resizes each to `cfg.target`. Normalization is a separate,
/// earlier step.
pub fn slice_and_resize(v: &Volume, cfg: &PipelineConfig) -> DataResult<SliceSequence> {
    if cfg.axis > 2 {
        return Err(DataError::Invalid {
            what: "axis",
            detail: format!("axis {} not in 0..=2", cfg.axis),
        });
    }
    let indices = slice_indices(v.dims[cfg.axis], cfg.n_slices)?;
    let [th, tw] = cfg.target;
    if th == 0 || tw == 0 {
        return Err(DataError::Invalid {
            what: "target",
            detail: format!("target {:?} has a zero extent", cfg.target),
        });
    }
    let mut slices = Vec::with_capacity(indices.len());
    for at in indices {
        let (plane, size) = extract_plane(v, cfg.axis, at);
        let resized = resize_bilinear(&plane, size, [th, tw]);
        slices.push(
            Tensor::from_vec(&[1, th, tw], resized).expect("resize output matches target shape"),
        );
    }
    Ok(SliceSequence {
        slices,
        subject_id: v.subject_id.clone(),
        age_years: v.age_years,
    })
}

/// Full preprocessing for one volume file: read, normalize, slice.
pub fn load_sequence(path: &Path, cfg: &PipelineConfig) -> DataResult<SliceSequence> {
    let v = Volume::read(path)?;
    let normed = normalize(&v, cfg.normalize_by)?;
    slice_and_resize(&normed, cfg)
}

/// Stacks a slice sequence into one `[1, n, H, W]` tensor for the
/// volumetric model.
pub fn stack_slices(seq: &SliceSequence) -> Tensor<f32> {
    let n = seq.slices.len();
    let shape = seq.slices[0].shape();
    let (h, w) = (shape[1], shape[2]);
    let mut data = Vec::with_capacity(n * h * w);
    for s in &seq.slices {
        data.extend_from_slice(s.data());
    }
    Tensor::from_vec(&[1, n, h, w], data).expect("stacked slices match combined shape")
}

/// Drops the leading channel axis, used by tests that inspect raw planes.
pub fn slice_plane(t: &Tensor<f32>) -> (Vec<f32>, [usize; 2]) {
    let s = t.shape();
    (t.data().to_vec(), [s[1], s[2]])
}

impl SliceSequence {
    /// Scales every slice intensity, preserving shapes. Used by invariance
    /// tests.
    pub fn scaled(&self, factor: f32) -> SliceSequence {
        SliceSequence {
            slices: self
                .slices
                .iter()
                .map(|t| {
                    let data: Vec<f32> = t.data().iter().map(|v| v * factor).collect();
                    Tensor::from_vec(t.shape(), data).expect("same shape")
                })
                .collect(),
            subject_id: self.subject_id.clone(),
            age_years: self.age_years,
        }
    }
}

const _: fn() = || {
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<Volume>();
    assert_send_sync::<SliceSequence>();
};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pattern_volume() -> Volume {
        // v[x,y,z] = x + 10y + 100z makes every axis identifiable.
        let dims = [4, 3, 5];
        let mut voxels = vec![0.0; 60];
        for z in 0..5 {
            for y in 0..3 {
                for x in 0..4 {
                    voxels[x + 4 * (y + 3 * z)] = (x + 10 * y + 100 * z) as f32;
                }
            }
        }
        Volume::new(dims, voxels, 5.0, "pattern").unwrap()
    }

    #[test]
    fn write_read_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.f32");
        let mut v = pattern_volume();
        v.site = "siteA".into();
        v.cohort = "controls".into();
        v.write(&path).unwrap();
        let back = Volume::read(&path).unwrap();
        assert_eq!(v, back);
        back.write(&dir.path().join("vol2.f32")).unwrap();
        let a = std::fs::read(dir.path().join("vol.f32")).unwrap();
        let b = std::fs::read(dir.path().join("vol2.f32")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_volume_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.f32");
        pattern_volume().write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = Volume::read(&path).unwrap_err();
        assert!(matches!(err, DataError::Parse { .. }), "{err}");
    }

    #[test]
    fn minimal_header_with_matching_bytes_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.f32");
        let v = Volume::new([2, 2, 2], vec![1.0; 8], 0.0, "tiny").unwrap();
        v.write(&path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 32);
        assert_eq!(Volume::read(&path).unwrap().dims, [2, 2, 2]);
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.f32");
        pattern_volume().write(&path).unwrap();
        let sc = sidecar_path(&path);
        let text = std::fs::read_to_string(&sc).unwrap().replace("f32le", "f64be");
        std::fs::write(&sc, text).unwrap();
        assert!(matches!(
            Volume::read(&path).unwrap_err(),
            DataError::Parse { .. }
        ));
    }

    #[test]
    fn normalize_standardizes_a_two_value_volume() {
        let v = Volume::new([2, 2, 2], vec![0.0, 2.0, 0.0, 2.0, 0.0, 2.0, 0.0, 2.0], 1.0, "s")
            .unwrap();
        let n = normalize(&v, NormMode::Std).unwrap();
        assert_eq!(n.voxels, vec![-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn variance_mode_divides_by_the_variance() {
        let v = Volume::new([2, 2, 2], vec![0.0, 4.0, 0.0, 4.0, 0.0, 4.0, 0.0, 4.0], 1.0, "s")
            .unwrap();
        let z = normalize(&v, NormMode::Std).unwrap();
        let lit = normalize(&v, NormMode::Variance).unwrap();
        assert_eq!(z.voxels[1], 1.0);
        assert_eq!(lit.voxels[1], 0.5);
    }

    #[test]
    fn constant_volume_cannot_be_normalized() {
        let v = Volume::new([2, 2, 2], vec![3.0; 8], 1.0, "s").unwrap();
        assert!(matches!(
            normalize(&v, NormMode::Std).unwrap_err(),
            DataError::DegenerateVolume
        ));
    }

    #[test]
    fn normalize_is_idempotent_and_standardizing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let voxels: Vec<f32> = (0..16 * 16 * 12)
            .map(|_| rng.gen_range(-3.0f32..9.0))
            .collect();
        let v = Volume::new([16, 16, 12], voxels, 2.0, "s").unwrap();
        let once = normalize(&v, NormMode::Std).unwrap();
        let twice = normalize(&once, NormMode::Std).unwrap();

        let n = once.voxels.len() as f64;
        let mean = once.voxels.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = once
            .voxels
            .iter()
            .map(|&x| (x as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 1e-5);
        assert!((var.sqrt() - 1.0).abs() < 1e-3);
        for (a, b) in once.voxels.iter().zip(&twice.voxels) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn doubling_intensities_leaves_the_zscore_output_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let voxels: Vec<f32> = (0..10 * 9 * 8).map(|_| rng.gen_range(0.0f32..5.0)).collect();
        let doubled: Vec<f32> = voxels.iter().map(|v| v * 2.0).collect();
        let a = normalize(
            &Volume::new([10, 9, 8], voxels, 1.0, "s").unwrap(),
            NormMode::Std,
        )
        .unwrap();
        let b = normalize(
            &Volume::new([10, 9, 8], doubled, 1.0, "s").unwrap(),
            NormMode::Std,
        )
        .unwrap();
        assert_eq!(a.voxels, b.voxels);
    }

    #[test]
    fn resize_to_native_size_is_the_identity() {
        let src: Vec<f32> = (0..20).map(|i| i as f32 * 0.3).collect();
        assert_eq!(resize_bilinear(&src, [4, 5], [4, 5]), src);
    }

    #[test]
    fn resize_of_a_constant_plane_is_constant() {
        let src = vec![2.5f32; 36];
        let out = resize_bilinear(&src, [6, 6], [4, 9]);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn four_by_four_to_two_by_two_samples_the_corners() {
        // Corner alignment maps output corners onto input corners, so the
        // hand oracle for a 4x4 checkerboard is its four corner values.
        let mut src = vec![0.0f32; 16];
        for y in 0..4 {
            for x in 0..4 {
                src[y * 4 + x] = ((x + y) % 2) as f32;
            }
        }
        let out = resize_bilinear(&src, [4, 4], [2, 2]);
        assert_eq!(out, vec![src[0], src[3], src[12], src[15]]);
    }

    #[test]
    fn resize_output_stays_within_the_source_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let h = rng.gen_range(2..9);
            let w = rng.gen_range(2..9);
            let src: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-5.0f32..5.0)).collect();
            let oh = rng.gen_range(1..9);
            let ow = rng.gen_range(1..9);
            let out = resize_bilinear(&src, [h, w], [oh, ow]);
            let lo = src.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = src.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for &v in &out {
                assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn slice_indices_are_equally_spaced_with_endpoints() {
        assert_eq!(slice_indices(12, 12).unwrap(), (0..12).collect::<Vec<_>>());
        assert_eq!(slice_indices(12, 5).unwrap(), vec![0, 3, 6, 8, 11]);
        assert_eq!(slice_indices(12, 1).unwrap(), vec![5]);
        assert!(slice_indices(12, 13).is_err());
        assert!(slice_indices(12, 0).is_err());
    }

    #[test]
    fn slice_orientation_follows_the_axis_conventions() {
        let v = pattern_volume();
        let cfg = |axis| PipelineConfig {
            axis,
            n_slices: 1,
            target: match axis {
                2 => [3, 4],
                1 => [5, 4],
                _ => [5, 3],
            },
            normalize_by: NormMode::Std,
        };

        // Axis 2 (native [Y,X] plane at z=2): value x + 10y + 200.
        let s2 = slice_and_resize(&v, &cfg(2)).unwrap();
        let (p, _) = slice_plane(&s2.slices[0]);
        assert_eq!(p[0], 200.0);
        assert_eq!(p[1], 201.0);
        assert_eq!(p[4], 210.0);

        // Axis 1 ([Z,X] plane at y=1): value x + 100z + 10.
        let s1 = slice_and_resize(&v, &cfg(1)).unwrap();
        let (p, _) = slice_plane(&s1.slices[0]);
        assert_eq!(p[0], 10.0);
        assert_eq!(p[1], 11.0);
        assert_eq!(p[4], 110.0);

        // Axis 0 ([Z,Y] plane at x=1): value 10y + 100z + 1.
        let s0 = slice_and_resize(&v, &cfg(0)).unwrap();
        let (p, _) = slice_plane(&s0.slices[0]);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 11.0);
        assert_eq!(p[3], 101.0);
    }

    #[test]
    fn stacked_slices_form_one_volume_tensor() {
        let v = pattern_volume();
        let cfg = PipelineConfig {
            axis: 2,
            n_slices: 5,
            target: [3, 4],
            normalize_by: NormMode::Std,
        };
        let seq = slice_and_resize(&v, &cfg).unwrap();
        let stacked = stack_slices(&seq);
        assert_eq!(stacked.shape(), &[1, 5, 3, 4]);
        assert_eq!(&stacked.data()[..12], seq.slices[0].data());
    }
}
