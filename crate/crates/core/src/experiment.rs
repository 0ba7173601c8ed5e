//! Multi-arm experiments: the sigma sweep and the noisy-training benchmark.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetSpec};
use crate::error::{ensure, Result};
use crate::metrics::ClassMetrics;
use crate::rng::Rng;
use crate::synth::SceneParams;
use crate::train::{evaluate, train, History, TrainConfig, TrainOutcome};
use crate::weighting::UncertaintySigma;

/// Master seed of the fixed benchmark.
pub const BENCHMARK_SEED: u64 = 7;
pub const BENCHMARK_SCENES: usize = 200;
pub const BENCHMARK_EPOCHS: usize = 30;
/// Boundary jitter (pixels) applied to benchmark training masks.
pub const BENCHMARK_LABEL_NOISE: f64 = 1.5;
pub const SWEEP_SIGMAS: [f64; 3] = [1.0, 2.0, 3.0];
/// Sigma of the weighted arm in two-arm comparisons.
pub const WEIGHTED_SIGMA: f64 = 2.0;

pub fn benchmark_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        scene: SceneParams {
            width: 64,
            height: 64,
            fg_coverage_target: (0.05, 0.10),
            boundary_roughness: 0.35,
            texture_contrast: 0.8,
            seed,
            ..SceneParams::default()
        },
        count: BENCHMARK_SCENES,
        label_noise: BENCHMARK_LABEL_NOISE,
        image_noise: 0.0,
    }
}

/// Training setup for one arm. `sigma = None` with class weights off is the
/// uniform baseline.
pub fn arm_config(sigma: Option<f64>, class_weights: bool, epochs: usize, seed: u64) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs,
        sigma: sigma.map(UncertaintySigma::new).transpose()?,
        use_class_weights: class_weights,
        seed,
        ..TrainConfig::default()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub sigma: Option<f64>,
    pub class_weights: bool,
}

impl Arm {
    pub fn baseline() -> Self {
        Arm {
            label: "baseline".into(),
            sigma: None,
            class_weights: false,
        }
    }

    pub fn weighted(sigma: f64) -> Self {
        Arm {
            label: format!("sigma={sigma}"),
            sigma: Some(sigma),
            class_weights: true,
        }
    }

    pub fn config(&self, epochs: usize, seed: u64) -> Result<TrainConfig> {
        arm_config(self.sigma, self.class_weights, epochs, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    /// Foreground metrics on the test split.
    pub test: ClassMetrics,
    pub history: History,
}

pub fn run_arm(arm: &Arm, data: &Dataset, epochs: usize, seed: u64) -> Result<(ArmResult, TrainOutcome)> {
    let config = arm.config(epochs, seed)?;
    let outcome = train(&config, data)?;
    let test = evaluate(&outcome.model, &data.test)?.class_metrics(config.foreground_class);
    Ok((
        ArmResult {
            arm: arm.clone(),
            test,
            history: outcome.history.clone(),
        },
        outcome,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub seed: u64,
    pub epochs: usize,
    pub rows: Vec<ArmResult>,
}

impl SweepResult {
    pub fn baseline(&self) -> &ArmResult {
        &self.rows[0]
    }

    pub fn row(&self, label: &str) -> Option<&ArmResult> {
        self.rows.iter().find(|r| r.arm.label == label)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method | PA | IoU |\n|---|---|---|\n");
        for r in &self.rows {
            s += &format!("| {} | {} | {} |\n", r.arm.label, cell(r.test.pa, r.test.pa_defined), cell(r.test.iou, r.test.iou_defined));
        }
        s
    }
}

fn cell(v: f64, defined: bool) -> String {
    if defined {
        format!("{v:.3}")
    } else {
        "n/a".into()
    }
}

/// Baseline plus one class-weighted arm per sigma in [`SWEEP_SIGMAS`].
pub fn sweep(data: &Dataset, epochs: usize, seed: u64) -> Result<SweepResult> {
    let mut arms = vec![Arm::baseline()];
    arms.extend(SWEEP_SIGMAS.iter().map(|&s| Arm::weighted(s)));
    let rows = arms
        .iter()
        .map(|a| run_arm(a, data, epochs, seed).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { seed, epochs, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    #[serde(rename = "PA")]
    pub pa: f64,
    #[serde(rename = "IoU")]
    pub iou: f64,
}

impl From<&ClassMetrics> for Score {
    fn from(m: &ClassMetrics) -> Self {
        Score { pa: m.pa, iou: m.iou }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseArmResult {
    pub arm: Arm,
    pub noisy_test: Score,
    pub clean_test: Score,
    /// Noisy-test PA minus clean-test PA.
    pub pa_drop: f64,
    pub history: History,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseBenchResult {
    pub noise: f64,
    pub seed: u64,
    pub epochs: usize,
    pub baseline: NoiseArmResult,
    pub weighted: NoiseArmResult,
}

impl NoiseBenchResult {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Method | Noisy test PA | Noisy test IoU | Clean test PA | Clean test IoU |\n|---|---|---|---|---|\n",
        );
        for r in [&self.baseline, &self.weighted] {
            s += &format!(
                "| {} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
                r.arm.label, r.noisy_test.pa, r.noisy_test.iou, r.clean_test.pa, r.clean_test.iou
            );
        }
        s
    }
}

/// Train a baseline and a weighted arm on noise-corrupted train/val images,
/// then score both on a noisy and on the original clean test split.
pub fn noise_bench(clean: &Dataset, noise: f64, epochs: usize, seed: u64) -> Result<NoiseBenchResult> {
    ensure!(noise.is_finite() && noise > 0.0, "noise sigma must be positive, got {noise}");
    let rng = Rng::new(seed).named("noise-bench");
    let noisy = Dataset {
        train: clean.train.with_image_noise(noise, &rng.named("train"))?,
        val: clean.val.with_image_noise(noise, &rng.named("val"))?,
        test: clean.test.with_image_noise(noise, &rng.named("test"))?,
    };
    let run = |arm: Arm| -> Result<NoiseArmResult> {
        let (res, outcome) = run_arm(&arm, &noisy, epochs, seed)?;
        let fg = outcome.history.config.foreground_class;
        let clean_test = Score::from(&evaluate(&outcome.model, &clean.test)?.class_metrics(fg));
        let noisy_test = Score::from(&res.test);
        Ok(NoiseArmResult {
            arm,
            pa_drop: noisy_test.pa - clean_test.pa,
            noisy_test,
            clean_test,
            history: res.history,
        })
    };
    Ok(NoiseBenchResult {
        noise,
        seed,
        epochs,
        baseline: run(Arm::baseline())?,
        weighted: run(Arm::weighted(WEIGHTED_SIGMA))?,
    })
}
