//! Synthetic phantoms: concentric spheres whose radius and inner intensity
//! encode the regression target, plus a corpus generator that writes
//! volumes and a split manifest.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{split_manifest, write_manifest, ManifestEntry, Split};
use super::{DataError, DataResult, Volume};

/// Builds one phantom: background 0, a centered sphere of intensity 1
/// whose radius grows linearly with `age` from 15% to 90% of the largest
/// inscribed radius, a concentric half-radius core of intensity
/// `1 + age/age_max`, and additive Gaussian noise everywhere.
pub fn generate_phantom(
    age: f64,
    age_max: f64,
    dims: [usize; 3],
    noise_sigma: f64,
    seed: u64,
) -> DataResult<Volume> {
    if dims.iter().any(|&d| d < 8) {
        return Err(DataError::Invalid {
            what: "dims",
            detail: format!("{dims:?}: every extent must be at least 8"),
        });
    }
    if !(age_max > 0.0 && age_max.is_finite()) {
        return Err(DataError::Invalid {
            what: "age_max",
            detail: format!("{age_max} must be positive and finite"),
        });
    }
    if !(0.0..=age_max).contains(&age) {
        return Err(DataError::Invalid {
            what: "age",
            detail: format!("{age} outside [0, {age_max}]"),
        });
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(DataError::Invalid {
            what: "noise_sigma",
            detail: format!("{noise_sigma} must be nonnegative and finite"),
        });
    }

    let half_min = dims.iter().copied().min().unwrap() as f64 / 2.0;
    let r_min = 0.15 * half_min;
    let r_max = 0.9 * half_min;
    let r = r_min + (age / age_max) * (r_max - r_min);
    let core = 1.0 + age / age_max;
    let center = [
        (dims[0] - 1) as f64 / 2.0,
        (dims[1] - 1) as f64 / 2.0,
        (dims[2] - 1) as f64 / 2.0,
    ];

    let [dx, dy, dz] = dims;
    let mut voxels = Vec::with_capacity(dx * dy * dz);
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let d = ((x as f64 - center[0]).powi(2)
                    + (y as f64 - center[1]).powi(2)
                    + (z as f64 - center[2]).powi(2))
                .sqrt();
                let v = if d <= r / 2.0 {
                    core
                } else if d <= r {
                    1.0
                } else {
                    0.0
                };
                voxels.push(v as f32);
            }
        }
    }
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("finite positive sigma");
        for v in &mut voxels {
            *v += normal.sample(&mut rng) as f32;
        }
    }

    let mut vol = Volume::new(dims, voxels, age, "phantom")?;
    vol.site = "synthetic".into();
    vol.cohort = "synthetic".into();
    Ok(vol)
}

/// Writes `count` phantoms with ages sampled uniformly in `[0, age_max]`,
/// plus `manifest.csv` with a seeded train/test split. Returns the manifest
/// path and its entries (volume paths relative to `out_dir`).
pub fn generate_corpus(
    out_dir: &Path,
    count: usize,
    age_max: f64,
    dims: [usize; 3],
    noise_sigma: f64,
    seed: u64,
    train_frac: f64,
) -> DataResult<(PathBuf, Vec<ManifestEntry>)> {
    if count < 2 {
        return Err(DataError::Invalid {
            what: "count",
            detail: format!("need at least 2 subjects, got {count}"),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| DataError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let age = rng.gen::<f64>() * age_max;
        let vol_seed = rng.gen::<u64>();
        let subject_id = format!("synth{i:04}");
        let mut vol = generate_phantom(age, age_max, dims, noise_sigma, vol_seed)?;
        vol.subject_id = subject_id.clone();
        let file = format!("{subject_id}.f32");
        vol.write(&out_dir.join(&file))?;
        entries.push(ManifestEntry {
            subject_id,
            volume_path: PathBuf::from(file),
            age_years: age,
            cohort: "synthetic".into(),
            split: Split::Train,
        });
    }
    let split_seed = rng.gen::<u64>();
    let entries = split_manifest(&entries, train_frac, split_seed)?;
    let manifest_path = out_dir.join("manifest.csv");
    write_manifest(&manifest_path, &entries)?;
    Ok((manifest_path, entries))
}
