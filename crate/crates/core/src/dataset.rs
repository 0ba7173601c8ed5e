//! Train/val/test splits of (image, mask) pairs, generated or on disk.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/{train,val,test}/images/<name>.png
//! <root>/{train,val,test}/masks/<name>.png
//! ```

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::imagery::{load_image, load_mask, save_image, save_mask, FloatImage, LabelMask};
use crate::rng::Rng;
use crate::synth::{add_gaussian_noise, generate_scene, perturb_boundary, SceneParams};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: FloatImage,
    pub mask: LabelMask,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn masks(&self) -> impl Iterator<Item = &LabelMask> {
        self.samples.iter().map(|s| &s.mask)
    }

    /// Same masks, every image independently corrupted with Gaussian noise.
    pub fn with_image_noise(&self, sigma: f64, rng: &Rng) -> Result<Split> {
        let samples = self
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(Sample {
                    name: s.name.clone(),
                    image: add_gaussian_noise(&s.image, sigma, &mut rng.split(i as u64))?.quantized(),
                    mask: s.mask.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Split { samples })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.train
            .samples
            .first()
            .map(|s| s.mask.num_classes())
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<Vec<String>> {
        let root = root.as_ref();
        let mut written = Vec::new();
        for (name, split) in SPLITS.iter().zip([&self.train, &self.val, &self.test]) {
            for sub in ["images", "masks"] {
                let dir = root.join(name).join(sub);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            for s in &split.samples {
                let file = format!("{}.png", s.name);
                save_image(&s.image, root.join(name).join("images").join(&file))?;
                save_mask(&s.mask, root.join(name).join("masks").join(&file))?;
                written.push(format!("{name}/images/{file}"));
                written.push(format!("{name}/masks/{file}"));
            }
        }
        Ok(written)
    }

    pub fn load(root: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let root = root.as_ref();
        Ok(Dataset {
            train: load_split(root, "train", num_classes)?,
            val: load_split(root, "val", num_classes)?,
            test: load_split(root, "test", num_classes)?,
        })
    }
}

/// Load one split; images and masks are paired by file name.
pub fn load_split(root: &Path, split: &str, num_classes: usize) -> Result<Split> {
    let mask_dir = root.join(split).join("masks");
    let image_dir = root.join(split).join("images");
    let mut names: Vec<String> = fs::read_dir(&mask_dir)
        .map_err(|e| Error::io(&mask_dir, e))?
        .filter_map(|entry| entry.ok())
        .filter_map(|entry| {
            let name = entry.file_name().into_string().ok()?;
            name.strip_suffix(".png").map(str::to_owned)
        })
        .collect();
    names.sort();
    let samples = names
        .into_iter()
        .map(|name| {
            let file = format!("{name}.png");
            let image = load_image(image_dir.join(&file))?;
            let mask = load_mask(mask_dir.join(&file), num_classes)?;
            ensure!(
                mask.same_shape(image.width(), image.height()),
                "{split}/{file}: image and mask sizes differ"
            );
            Ok(Sample { name, image, mask })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Split { samples })
}

/// Split sizes proportional to 580/193/193, the remainder going to test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 580.0 / 966.0).round() as usize;
    let val = ((n as f64 * 193.0 / 966.0).round() as usize).min(n - train);
    (train, val, n - train - val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scene: SceneParams,
    pub count: usize,
    /// Boundary perturbation magnitude (pixels) applied to training masks.
    pub label_noise: f64,
    /// Gaussian noise sigma applied to every image.
    pub image_noise: f64,
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    ensure!(spec.count >= 3, "need at least 3 scenes, got {}", spec.count);
    spec.scene.validate()?;
    let root = Rng::new(spec.scene.seed);
    let scenes = root.named("scene");
    let label_noise = root.named("label-noise");
    let image_noise = root.named("image-noise");
    let (n_train, n_val, _) = split_sizes(spec.count);

    let samples = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let (mut image, mut mask) = generate_scene(&spec.scene, &mut scenes.split(i as u64))?;
            if i < n_train && spec.label_noise > 0.0 {
                mask = perturb_boundary(&mask, spec.label_noise, &mut label_noise.split(i as u64))?;
            }
            if spec.image_noise > 0.0 {
                image = add_gaussian_noise(&image, spec.image_noise, &mut image_noise.split(i as u64))?;
            }
            Ok(Sample {
                name: format!("{i:05}"),
                image: image.quantized(),
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut it = samples.into_iter();
    let train = Split {
        samples: it.by_ref().take(n_train).collect(),
    };
    let val = Split {
        samples: it.by_ref().take(n_val).collect(),
    };
    let test = Split {
        samples: it.collect(),
    };
    Ok(Dataset { train, val, test })
}
