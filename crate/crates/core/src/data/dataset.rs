//! On-disk datasets: `<id>_L.ppm`, `<id>_R.ppm`, `<id>_D.pgm` per sample plus
//! a `manifest.json`.
//!
//! Manifest keys:
//!
//! | key | meaning |
//! |---|---|
//! | `version` | format version, currently 1 |
//! | `split` | free-form tag, usually `train` or `test` |
//! | `seed` | generator seed; sample `k` uses [`sample_seed`]`(seed, k)` |
//! | `width`, `height` | image size in pixels |
//! | `d_max` | disparity bound in pixels |
//! | `disp_sign` | `"+1"` or `"-1"`, see [`DispSign`] |
//! | `kind` | disparity layout, e.g. `constant:4`, `ramp:2:6`, `boxes`, `mixed` |
//! | `blur_sigma` | texture blur at zero disparity |
//! | `texture_gain` | growth of the blur per pixel of disparity |
//! | `ids` | sample ids in generation order |

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pnm::{load_disparity, load_image, save_disparity, save_image, write_atomic};
use super::synth::{generate_sample, DisparityKind, StereoSample, SynthParams};
use crate::error::{Error, Result};
use crate::parallel;
use crate::warp::DispSign;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub split: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub d_max: f64,
    pub disp_sign: DispSign,
    pub kind: DisparityKind,
    pub blur_sigma: f64,
    pub texture_gain: f64,
    pub ids: Vec<String>,
}

impl Manifest {
    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            width: self.width,
            height: self.height,
            d_max: self.d_max,
            disp_sign: self.disp_sign,
            blur_sigma: self.blur_sigma,
            texture_gain: self.texture_gain,
        }
    }
}

/// SplitMix64 mix of the dataset seed and sample index.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_paths(root: &Path, id: &str) -> [PathBuf; 3] {
    [
        root.join(format!("{id}_L.ppm")),
        root.join(format!("{id}_R.ppm")),
        root.join(format!("{id}_D.pgm")),
    ]
}

/// What to generate.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub params: SynthParams,
    pub kind: DisparityKind,
    pub count: usize,
    pub seed: u64,
    pub split: String,
}

impl DatasetSpec {
    pub fn ids(&self) -> Vec<String> {
        (0..self.count)
            .map(|k| format!("{}_{k:05}", self.split))
            .collect()
    }

    /// Generates sample `k` in memory.
    pub fn sample(&self, k: usize, id: &str) -> Result<StereoSample> {
        generate_sample(
            &self.params,
            &self.kind.resolve(k),
            sample_seed(self.seed, k),
            id,
        )
    }

    /// All samples in memory, in index order.
    pub fn samples(&self) -> Result<Vec<StereoSample>> {
        let ids = self.ids();
        parallel::map_indices(self.count, |k| self.sample(k, &ids[k]))
            .into_iter()
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.kind.validate(self.params.width, self.params.d_max)?;
        if self.count == 0 {
            return Err(Error::InvalidArgument(
                "sample count must be positive".into(),
            ));
        }
        if self.split.is_empty() || self.split.contains(['/', '\\']) {
            return Err(Error::InvalidArgument(format!(
                "invalid split tag {:?}",
                self.split
            )));
        }
        Ok(())
    }
}

/// Writes every sample and the manifest under `root`, creating it if needed.
pub fn generate_dataset(root: &Path, spec: &DatasetSpec) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let ids = spec.ids();
    let results = parallel::map_indices(spec.count, |k| -> Result<()> {
        let s = spec.sample(k, &ids[k])?;
        let [l, r, d] = sample_paths(root, &ids[k]);
        save_image(&s.left, &l)?;
        save_image(&s.right, &r)?;
        save_disparity(
            s.gt_disparity
                .as_ref()
                .expect("generated samples carry ground truth"),
            &d,
        )
    });
    results.into_iter().collect::<Result<()>>()?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        split: spec.split.clone(),
        seed: spec.seed,
        width: spec.params.width,
        height: spec.params.height,
        d_max: spec.params.d_max,
        disp_sign: spec.params.disp_sign,
        kind: spec.kind.clone(),
        blur_sigma: spec.params.blur_sigma,
        texture_gain: spec.params.texture_gain,
        ids,
    };
    let path = root.join(MANIFEST);
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        cause: e,
    })?;
    json.push(b'\n');
    write_atomic(&path, &json)?;
    Ok(manifest)
}

/// A dataset directory with its parsed manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::Json {
            path: path.clone(),
            cause: e,
        })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::InvalidArgument(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                manifest.version
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = manifest.ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "{}: duplicate id {dup}",
                path.display()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.ids.is_empty()
    }

    /// Loads one sample. The disparity file is optional.
    pub fn load_sample(&self, id: &str) -> Result<StereoSample> {
        let [l, r, d] = sample_paths(&self.root, id);
        let left = load_image(&l)?;
        let right = load_image(&r)?;
        let expect = [3, self.manifest.height, self.manifest.width];
        for (t, p) in [(&left, &l), (&right, &r)] {
            if t.shape() != expect {
                return Err(Error::InvalidShape {
                    op: "load_sample",
                    msg: format!("{}: expected {expect:?}, got {:?}", p.display(), t.shape()),
                });
            }
        }
        let gt_disparity = if d.exists() {
            Some(load_disparity(&d)?)
        } else {
            None
        };
        Ok(StereoSample {
            id: id.to_string(),
            left,
            right,
            gt_disparity,
            disp_sign: self.manifest.disp_sign,
        })
    }

    /// Loads every sample in manifest order.
    pub fn load_all(&self) -> Result<Vec<StereoSample>> {
        let ids = &self.manifest.ids;
        parallel::map_indices(ids.len(), |k| self.load_sample(&ids[k]))
            .into_iter()
            .collect()
    }
}
