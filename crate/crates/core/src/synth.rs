//! Seeded synthetic segmentation scenes.
//!
//! A scene is a small number of star-convex foreground blobs on a textured
//! background. Blob radii are modulated by a few random sinusoids
//! (`boundary_roughness` sets the amplitude), the foreground is brighter and
//! more strongly textured than the background, and a few background
//! "decoys" share the foreground brightness but not its texture. Foreground
//! edges are blended over a pixel or two so boundary labels are genuinely
//! ambiguous.

use std::f64::consts::{PI, TAU};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::edt::distance_to_boundary;
use crate::error::{ensure, Error, Result};
use crate::imagery::{FloatImage, LabelMask};
use crate::rng::Rng;

const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of foreground blob counts.
    pub num_blobs: (usize, usize),
    /// Inclusive range of the foreground pixel fraction.
    pub fg_coverage_target: (f64, f64),
    pub boundary_roughness: f64,
    /// Foreground/background separation in `(0, 1]`.
    pub texture_contrast: f64,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 64,
            height: 64,
            num_blobs: (1, 3),
            fg_coverage_target: (0.05, 0.10),
            boundary_roughness: 0.3,
            texture_contrast: 0.5,
            channels: 1,
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.width >= 32 && self.height >= 32,
            "scenes must be at least 32x32, got {}x{}",
            self.width,
            self.height
        );
        let (lo, hi) = self.fg_coverage_target;
        ensure!(
            0.0 < lo && lo <= hi && hi < 1.0,
            "coverage range must satisfy 0 < lo <= hi < 1, got [{lo}, {hi}]"
        );
        ensure!(
            self.num_blobs.0 >= 1 && self.num_blobs.0 <= self.num_blobs.1,
            "blob count range must be non-empty and start at 1 or more"
        );
        ensure!(
            self.boundary_roughness >= 0.0 && self.boundary_roughness.is_finite(),
            "roughness must be non-negative"
        );
        ensure!(
            self.texture_contrast > 0.0 && self.texture_contrast <= 1.0,
            "contrast must lie in (0, 1]"
        );
        ensure!(
            self.channels == 1 || self.channels == 3,
            "channels must be 1 or 3"
        );
        Ok(())
    }
}

/// Star-convex blob: an ellipse whose radius is modulated by harmonics.
#[derive(Clone, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    aspect: f64,
    angle: f64,
    harmonics: Vec<(f64, f64, f64)>, // (frequency, amplitude, phase)
}

impl Blob {
    fn random(rng: &mut Rng, w: f64, h: f64, radius: f64, roughness: f64) -> Self {
        let mut harmonics: Vec<(f64, f64, f64)> = (2..=6)
            .map(|k| {
                let k = f64::from(k);
                (k, rng.random_range(-1.0..1.0) / k, rng.random_range(0.0..TAU))
            })
            .collect();
        // Normalize so the modulation spans exactly +/- roughness at most.
        let total: f64 = harmonics.iter().map(|h| h.1.abs()).sum();
        for h in &mut harmonics {
            h.1 *= roughness / total.max(1e-12);
        }
        Blob {
            cx: rng.random_range(0.15 * w..0.85 * w),
            cy: rng.random_range(0.15 * h..0.85 * h),
            radius,
            aspect: rng.random_range(1.0..1.6),
            angle: rng.random_range(0.0..PI),
            harmonics,
        }
    }

    fn contains(&self, px: f64, py: f64, scale: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let r = self.radius * scale;
        let sa = self.aspect.sqrt();
        let (u, v) = (u / (r * sa), v * sa / r);
        let rho = (u * u + v * v).sqrt();
        let theta = v.atan2(u);
        let modulation: f64 = self
            .harmonics
            .iter()
            .map(|&(k, a, phi)| a * (k * theta + phi).sin())
            .sum();
        rho <= (1.0 + modulation).max(0.2)
    }
}

fn rasterize(blobs: &[Blob], w: usize, h: usize, scale: f64) -> Vec<bool> {
    let mut fg = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            fg[y * w + x] = blobs.iter().any(|b| b.contains(px, py, scale));
        }
    }
    fg
}

/// Sum of a few random plane waves, amplitude-normalized to `amp`.
fn smooth_field(rng: &mut Rng, w: usize, h: usize, amp: f64, max_freq: f64) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..TAU);
            let f = rng.random_range(0.5..max_freq) * TAU / w.max(h) as f64;
            (f * theta.cos(), f * theta.sin(), rng.random_range(0.0..TAU))
        })
        .collect();
    (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            amp / 3.0
                * waves
                    .iter()
                    .map(|&(fx, fy, p)| (fx * x + fy * y + p).sin())
                    .sum::<f64>()
        })
        .collect()
}

/// 3x3 box blur of a 0/1 map, clamped at the frame.
fn soften(fg: &[bool], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    sum += f64::from(u8::from(fg[yy * w + xx]));
                    n += 1.0;
                }
            }
            out[y * w + x] = sum / n;
        }
    }
    out
}

pub fn generate_scene(params: &SceneParams, rng: &mut Rng) -> Result<(FloatImage, LabelMask)> {
    params.validate()?;
    let (w, h) = (params.width, params.height);
    let (lo, hi) = params.fg_coverage_target;
    let area = (w * h) as f64;

    let mut geometry = rng.named("geometry");
    let count = geometry.random_range(params.num_blobs.0..=params.num_blobs.1);
    let target = lo + (hi - lo) * geometry.random_range(0.2..0.8);
    let shares: Vec<f64> = (0..count).map(|_| geometry.random_range(0.5..1.5)).collect();
    let share_sum: f64 = shares.iter().sum();
    let blobs: Vec<Blob> = shares
        .iter()
        .map(|s| {
            let r = (target * area * s / share_sum / PI).sqrt();
            Blob::random(&mut geometry, w as f64, h as f64, r, params.boundary_roughness)
        })
        .collect();

    let mut scale = 1.0;
    let mut fg = None;
    for _ in 0..MAX_ATTEMPTS {
        let candidate = rasterize(&blobs, w, h, scale);
        let realized = candidate.iter().filter(|&&b| b).count() as f64 / area;
        if (lo..=hi).contains(&realized) {
            fg = Some(candidate);
            break;
        }
        scale *= if realized == 0.0 {
            2.0
        } else {
            (target / realized).sqrt().clamp(0.5, 2.0)
        };
    }
    let fg = fg.ok_or_else(|| {
        Error::Generation(format!(
            "could not reach foreground coverage [{lo}, {hi}] in {MAX_ATTEMPTS} attempts"
        ))
    })?;

    let mut appearance = rng.named("appearance");
    let decoys: Vec<Blob> = (0..appearance.random_range(0..=2usize))
        .map(|_| {
            let r = (target * area / count as f64 / PI).sqrt() * appearance.random_range(0.6..1.2);
            Blob::random(&mut appearance, w as f64, h as f64, r, params.boundary_roughness)
        })
        .collect();
    let decoy = rasterize(&decoys, w, h, 1.0);

    let soft = soften(&fg, w, h);
    let soft_decoy: Vec<f64> = soften(
        &decoy
            .iter()
            .zip(&fg)
            .map(|(&d, &f)| d && !f)
            .collect::<Vec<_>>(),
        w,
        h,
    );
    let contrast = params.texture_contrast;
    let illumination = smooth_field(&mut appearance, w, h, 0.06, 2.0);
    let fg_grain = smooth_field(&mut appearance, w, h, 1.0, 0.45 * w.max(h) as f64);

    let bg_mean = 0.40;
    let fg_mean = bg_mean + 0.22 * contrast;
    let bg_tex = 0.04;
    let fg_tex = 0.04 + 0.14 * contrast;

    let mut data = Vec::with_capacity(w * h * params.channels);
    for i in 0..w * h {
        let t = soft[i];
        let d = soft_decoy[i] * (1.0 - t);
        let mean = bg_mean + (fg_mean - bg_mean) * (t + d);
        let white = appearance.random_range(-1.0..1.0);
        let texture = (1.0 - t) * bg_tex * white + t * fg_tex * (0.5 * white + 0.5 * fg_grain[i]);
        let v = mean + illumination[i] + texture;
        for c in 0..params.channels {
            let tint = if params.channels == 3 {
                [0.02, 0.0, -0.02][c] * (1.0 - 2.0 * t)
            } else {
                0.0
            };
            data.push((v + tint).clamp(0.0, 1.0));
        }
    }

    let labels = fg.iter().map(|&b| u8::from(b)).collect();
    Ok((
        FloatImage::new(w, h, params.channels, data)?,
        LabelMask::new(w, h, 2, labels)?,
    ))
}

/// Re-draw labels near class boundaries to imitate annotation error.
///
/// Pixels within `magnitude` of a boundary take the label found at a random
/// offset of length at most `magnitude`; offsets are shared over small
/// square cells, so edges shift coherently (a local erosion or dilation)
/// rather than flickering. Pixels farther than `magnitude` from any
/// boundary are never touched.
pub fn perturb_boundary(mask: &LabelMask, magnitude: f64, rng: &mut Rng) -> Result<LabelMask> {
    ensure!(
        magnitude >= 0.0 && magnitude.is_finite(),
        "perturbation magnitude must be non-negative, got {magnitude}"
    );
    let field = distance_to_boundary(mask);
    if magnitude == 0.0 || !field.has_boundary() {
        return Ok(mask.clone());
    }
    let (w, h) = (mask.width(), mask.height());
    let cell = (2.0 * magnitude).ceil().max(4.0) as usize;
    let (cw, ch) = (w.div_ceil(cell), h.div_ceil(cell));
    let reach = magnitude.floor() as i64;
    let offsets: Vec<(i64, i64)> = (0..cw * ch)
        .map(|_| loop {
            let dx = rng.random_range(-reach..=reach);
            let dy = rng.random_range(-reach..=reach);
            if ((dx * dx + dy * dy) as f64) <= magnitude * magnitude {
                break (dx, dy);
            }
        })
        .collect();

    let limit = magnitude * magnitude;
    let src = mask.labels();
    let mut labels = src.to_vec();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if field.sq_dists()[i] as f64 > limit {
                continue;
            }
            let (dx, dy) = offsets[(y / cell) * cw + x / cell];
            let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
            let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
            labels[i] = src[sy * w + sx];
        }
    }
    LabelMask::new(w, h, mask.num_classes(), labels)
}

/// Add i.i.d. `N(0, sigma^2)` to every channel value, then clamp to `[0, 1]`.
pub fn add_gaussian_noise(img: &FloatImage, sigma: f64, rng: &mut Rng) -> Result<FloatImage> {
    ensure!(
        sigma >= 0.0 && sigma.is_finite(),
        "noise sigma must be non-negative, got {sigma}"
    );
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let data = img
        .data()
        .iter()
        .map(|v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    FloatImage::new(img.width(), img.height(), img.channels(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edt::extract_boundary;

    fn params(seed: u64) -> SceneParams {
        SceneParams {
            seed,
            ..SceneParams::default()
        }
    }

    fn coverage(mask: &LabelMask) -> f64 {
        mask.histogram()[1] as f64 / mask.len() as f64
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(&params(1), &mut Rng::new(9)).unwrap();
        let b = generate_scene(&params(1), &mut Rng::new(9)).unwrap();
        assert_eq!(a.0.to_bytes(), b.0.to_bytes());
        assert_eq!(a.1, b.1);
        let c = generate_scene(&params(1), &mut Rng::new(10)).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn smooth_single_blob_is_one_convex_region() {
        let p = SceneParams {
            num_blobs: (1, 1),
            boundary_roughness: 0.0,
            fg_coverage_target: (0.10, 0.20),
            ..SceneParams::default()
        };
        for seed in 0..5 {
            let (_, mask) = generate_scene(&p, &mut Rng::new(seed)).unwrap();
            // Every row and column crosses an ellipse in at most one run.
            let (w, h) = (mask.width(), mask.height());
            for y in 0..h {
                let runs = (1..w).filter(|&x| mask.get(x, y) == 1 && mask.get(x - 1, y) == 0).count()
                    + usize::from(mask.get(0, y) == 1);
                assert!(runs <= 1, "seed {seed} row {y}");
            }
            for x in 0..w {
                let runs = (1..h).filter(|&y| mask.get(x, y) == 1 && mask.get(x, y - 1) == 0).count()
                    + usize::from(mask.get(x, 0) == 1);
                assert!(runs <= 1, "seed {seed} col {x}");
            }
        }
    }

    #[test]
    fn coverage_stays_in_range() {
        let p = SceneParams {
            fg_coverage_target: (0.05, 0.10),
            ..SceneParams::default()
        };
        let root = Rng::new(11);
        for i in 0..100 {
            let (_, mask) = generate_scene(&p, &mut root.split(i)).unwrap();
            let c = coverage(&mask);
            assert!((0.05..=0.10).contains(&c), "scene {i}: {c}");
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = params(0);
        p.width = 16;
        assert!(generate_scene(&p, &mut Rng::new(0)).is_err());
        let mut p = params(0);
        p.fg_coverage_target = (0.2, 0.1);
        assert!(generate_scene(&p, &mut Rng::new(0)).is_err());
        let mut p = params(0);
        p.texture_contrast = 0.0;
        assert!(generate_scene(&p, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn unreachable_coverage_is_generation_error() {
        // A 1-pixel-wide coverage window on a 32x32 grid cannot always be hit,
        // but an empty window between two pixel counts never can.
        let p = SceneParams {
            width: 32,
            height: 32,
            fg_coverage_target: (0.10001, 0.10002),
            ..SceneParams::default()
        };
        assert!(matches!(
            generate_scene(&p, &mut Rng::new(0)),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn image_values_in_unit_interval_and_rgb() {
        let p = SceneParams {
            channels: 3,
            ..params(0)
        };
        let (img, _) = generate_scene(&p, &mut Rng::new(4)).unwrap();
        assert_eq!(img.channels(), 3);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn foreground_is_brighter_on_average() {
        let (img, mask) = generate_scene(&params(0), &mut Rng::new(5)).unwrap();
        let mut sums = [0.0; 2];
        let mut counts = [0.0; 2];
        for (v, &l) in img.data().iter().zip(mask.labels()) {
            sums[l as usize] += v;
            counts[l as usize] += 1.0;
        }
        assert!(sums[1] / counts[1] > sums[0] / counts[0]);
    }

    #[test]
    fn perturbation_trivial_cases() {
        let (_, mask) = generate_scene(&params(0), &mut Rng::new(1)).unwrap();
        assert_eq!(perturb_boundary(&mask, 0.0, &mut Rng::new(0)).unwrap(), mask);
        let flat = LabelMask::filled(40, 40, 2, 0).unwrap();
        assert_eq!(perturb_boundary(&flat, 3.0, &mut Rng::new(0)).unwrap(), flat);
        assert!(perturb_boundary(&mask, -1.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn perturbation_stays_within_band() {
        let root = Rng::new(21);
        let mut changed_total = 0;
        for i in 0..20 {
            let (_, mask) = generate_scene(&params(0), &mut root.split(i)).unwrap();
            let noisy = perturb_boundary(&mask, 2.0, &mut root.named("perturb").split(i)).unwrap();
            let field = crate::edt::squared_edt(&extract_boundary(&mask));
            for (j, (a, b)) in mask.labels().iter().zip(noisy.labels()).enumerate() {
                if a != b {
                    changed_total += 1;
                    assert!(field.sq_dists()[j] <= 4, "pixel {j} changed at d^2={}", field.sq_dists()[j]);
                }
            }
        }
        assert!(changed_total > 0, "perturbation never changed anything");
    }

    #[test]
    fn gaussian_noise_statistics() {
        let img = FloatImage::new(1000, 1000, 1, vec![0.5; 1_000_000]).unwrap();
        let noisy = add_gaussian_noise(&img, 0.02, &mut Rng::new(2)).unwrap();
        let n = noisy.data().len() as f64;
        let mean = noisy.data().iter().sum::<f64>() / n;
        let var = noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 0.5).abs() < 0.001, "mean {mean}");
        assert!((var.sqrt() - 0.02).abs() < 0.002, "std {}", var.sqrt());
    }

    #[test]
    fn gaussian_noise_identity_and_clamp() {
        let img = FloatImage::new(4, 4, 1, vec![1.0; 16]).unwrap();
        assert_eq!(add_gaussian_noise(&img, 0.0, &mut Rng::new(0)).unwrap(), img);
        let noisy = add_gaussian_noise(&img, 0.5, &mut Rng::new(0)).unwrap();
        assert!(noisy.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(add_gaussian_noise(&img, -0.1, &mut Rng::new(0)).is_err());
    }
}
