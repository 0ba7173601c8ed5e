//! Per-pixel loss weights: inverse-frequency class weights, boundary
//! uncertainty from the distance transform, and their product.
//!
//! The combined map is `weight(x) = class_weight[label(x)] * uncertainty(x)`
//! with
//!
//! ```text
//! class_weight[c] = m / (C * n_c)
//! uncertainty(x)  = 1 - exp(-d(x)^2 / (2 sigma^2))
//! ```
//!
//! where `m` is the number of training pixels, `n_c` the number of training
//! pixels labelled `c`, and `d(x)` the Euclidean distance to the nearest
//! class boundary. The combined map is not renormalized, so changing sigma
//! changes the effective loss scale.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edt::{distance_to_boundary, DistanceField};
use crate::error::{ensure, Error, Result};
use crate::imagery::{load_weight_map, save_weight_map, LabelMask, WeightMap};

/// Pixel counts per class over a training split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    num_classes: usize,
    pixels_per_class: Vec<u64>,
    total_pixels: u64,
}

impl ClassStats {
    pub fn from_counts(pixels_per_class: Vec<u64>) -> Result<Self> {
        ensure!(
            pixels_per_class.len() >= 2,
            "class statistics need at least two classes"
        );
        Ok(ClassStats {
            num_classes: pixels_per_class.len(),
            total_pixels: pixels_per_class.iter().sum(),
            pixels_per_class,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pixels_per_class(&self) -> &[u64] {
        &self.pixels_per_class
    }

    pub fn total_pixels(&self) -> u64 {
        self.total_pixels
    }
}

pub fn accumulate_class_stats<'a, I>(masks: I) -> Result<ClassStats>
where
    I: IntoIterator<Item = &'a LabelMask>,
{
    let mut counts: Option<Vec<u64>> = None;
    for mask in masks {
        let hist = mask.histogram();
        match counts.as_mut() {
            None => counts = Some(hist),
            Some(acc) => {
                ensure!(
                    acc.len() == hist.len(),
                    "masks disagree on num_classes ({} vs {})",
                    acc.len(),
                    hist.len()
                );
                acc.iter_mut().zip(hist).for_each(|(a, h)| *a += h);
            }
        }
    }
    let counts = counts.ok_or_else(|| {
        Error::Validation("cannot accumulate class statistics over zero masks".into())
    })?;
    ClassStats::from_counts(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    /// All ones: class weighting switched off.
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; num_classes],
        }
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        ensure!(
            weights.iter().all(|w| w.is_finite() && *w >= 0.0),
            "class weights must be finite and non-negative"
        );
        Ok(ClassWeights { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Inverse-frequency weights `m / (C * n_c)`. Classes absent from the
/// training set get weight 0.
pub fn class_weights(stats: &ClassStats) -> Result<ClassWeights> {
    ensure!(
        stats.total_pixels > 0,
        "class statistics cover zero pixels"
    );
    let m = stats.total_pixels as f64;
    let c = stats.num_classes as f64;
    let weights = stats
        .pixels_per_class
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { m / (c * n as f64) })
        .collect();
    Ok(ClassWeights { weights })
}

/// Spread of boundary uncertainty, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct UncertaintySigma(f64);

impl UncertaintySigma {
    pub fn new(sigma: f64) -> Result<Self> {
        ensure!(
            sigma.is_finite() && sigma > 0.0,
            "sigma must be positive and finite, got {sigma}"
        );
        Ok(UncertaintySigma(sigma))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for UncertaintySigma {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<UncertaintySigma> for f64 {
    fn from(s: UncertaintySigma) -> f64 {
        s.0
    }
}

/// `1 - exp(-sq_dist / (2 sigma^2))`; `None` (no boundary anywhere) gives 1.
pub fn uncertainty_weight(sq_dist: Option<u64>, sigma: UncertaintySigma) -> f64 {
    match sq_dist {
        None => 1.0,
        Some(d2) => -(-(d2 as f64) / (2.0 * sigma.0 * sigma.0)).exp_m1(),
    }
}

fn field_to_uncertainty(field: &DistanceField, sigma: UncertaintySigma) -> Vec<f64> {
    if !field.has_boundary() {
        return vec![1.0; field.width() * field.height()];
    }
    field
        .sq_dists()
        .iter()
        .map(|&d2| uncertainty_weight(Some(d2), sigma))
        .collect()
}

pub fn uncertainty_map(mask: &LabelMask, sigma: UncertaintySigma) -> WeightMap {
    let field = distance_to_boundary(mask);
    let weights = field_to_uncertainty(&field, sigma)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    WeightMap::new(mask.width(), mask.height(), weights).expect("uncertainty lies in [0, 1]")
}

/// Class weight of each pixel's ground-truth label, no uncertainty term.
pub fn class_weight_map(mask: &LabelMask, cw: &ClassWeights) -> Result<WeightMap> {
    check_classes(mask, cw)?;
    let weights = mask
        .labels()
        .iter()
        .map(|&l| cw.weights[l as usize] as f32)
        .collect();
    WeightMap::new(mask.width(), mask.height(), weights)
}

pub fn combined_weight_map(
    mask: &LabelMask,
    cw: &ClassWeights,
    sigma: UncertaintySigma,
) -> Result<WeightMap> {
    check_classes(mask, cw)?;
    let field = distance_to_boundary(mask);
    let delta = field_to_uncertainty(&field, sigma);
    let weights = mask
        .labels()
        .iter()
        .zip(delta)
        .map(|(&l, d)| (cw.weights[l as usize] * d) as f32)
        .collect();
    WeightMap::new(mask.width(), mask.height(), weights)
}

fn check_classes(mask: &LabelMask, cw: &ClassWeights) -> Result<()> {
    ensure!(
        cw.len() == mask.num_classes(),
        "{} class weights for a mask with {} classes",
        cw.len(),
        mask.num_classes()
    );
    Ok(())
}

/// Which weighting terms are active. Both off is plain cross-entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelWeighting {
    pub class_weights: Option<ClassWeights>,
    pub sigma: Option<UncertaintySigma>,
}

impl PixelWeighting {
    pub fn none() -> Self {
        PixelWeighting {
            class_weights: None,
            sigma: None,
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.class_weights.is_none() && self.sigma.is_none()
    }

    pub fn weight_map(&self, mask: &LabelMask) -> Result<WeightMap> {
        let uniform;
        let cw = match &self.class_weights {
            Some(cw) => cw,
            None => {
                uniform = ClassWeights::uniform(mask.num_classes());
                &uniform
            }
        };
        match self.sigma {
            Some(sigma) => combined_weight_map(mask, cw, sigma),
            None => class_weight_map(mask, cw),
        }
    }

    /// Cache key: digest of the mask contents and every weighting parameter.
    pub fn cache_key(&self, mask: &LabelMask) -> String {
        let mut h = Sha256::new();
        h.update((mask.width() as u64).to_le_bytes());
        h.update((mask.height() as u64).to_le_bytes());
        h.update((mask.num_classes() as u64).to_le_bytes());
        h.update(mask.labels());
        match self.sigma {
            Some(s) => h.update(s.0.to_le_bytes()),
            None => h.update(b"no-sigma"),
        }
        match &self.class_weights {
            Some(cw) => cw.weights.iter().for_each(|w| h.update(w.to_le_bytes())),
            None => h.update(b"no-class-weights"),
        }
        hex::encode(h.finalize())
    }
}

/// Directory of PFM weight maps keyed by [`PixelWeighting::cache_key`].
#[derive(Clone, Debug)]
pub struct WeightCache {
    dir: PathBuf,
}

impl WeightCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(WeightCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn get_or_compute(&self, weighting: &PixelWeighting, mask: &LabelMask) -> Result<WeightMap> {
        let path = self.dir.join(format!("{}.pfm", weighting.cache_key(mask)));
        if path.exists() {
            let map = load_weight_map(&path)?;
            if map.width() == mask.width() && map.height() == mask.height() {
                return Ok(map);
            }
        }
        let map = weighting.weight_map(mask)?;
        save_weight_map(&map, &path)?;
        Ok(map)
    }
}
