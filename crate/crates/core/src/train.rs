//! Mini-batch SGD training of [`MicroSegNet`] under uniform or pixel-weighted
//! cross-entropy, plus split evaluation.
//!
//! A mini-batch objective is the *sum* over its images of each image's mean
//! weighted pixel loss, so the per-image term is exactly the weighted loss
//! and the batch estimates the sum over the training set.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample, Split};
use crate::error::{ensure, Error, Result};
use crate::imagery::{LabelMask, WeightMap};
use crate::loss::{loss_gradient, softmax, weighted_loss};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{MicroSegNet, ModelDims, Params};
use crate::optim::{sgd_step, OptimizerState, SgdConfig};
use crate::rng::Rng;
use crate::weighting::{accumulate_class_stats, class_weights, ClassStats, PixelWeighting, UncertaintySigma};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Boundary-uncertainty spread; `None` disables the uncertainty term.
    pub sigma: Option<UncertaintySigma>,
    pub use_class_weights: bool,
    pub seed: u64,
    pub features: usize,
    pub sgd: SgdConfig,
    /// Class whose validation IoU drives model selection.
    pub foreground_class: usize,
    /// Abort if the epoch training loss rises during this many leading
    /// epochs. 0 disables the check.
    pub warmup_check_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            sigma: None,
            use_class_weights: false,
            seed: 0,
            features: 16,
            sgd: SgdConfig::default(),
            foreground_class: 1,
            warmup_check_epochs: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, "batch size must be at least 1");
        ensure!(self.features >= 1, "feature width must be at least 1");
        Ok(())
    }

    /// Weighting for this run; class weights come from the training masks.
    pub fn weighting(&self, train: &Split) -> Result<(PixelWeighting, ClassStats)> {
        let stats = accumulate_class_stats(train.masks())?;
        let cw = if self.use_class_weights {
            Some(class_weights(&stats)?)
        } else {
            None
        };
        Ok((
            PixelWeighting {
                class_weights: cw,
                sigma: self.sigma,
            },
            stats,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_pa: f64,
    pub val_iou: f64,
    pub val_pa_defined: bool,
    pub val_iou_defined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub config: TrainConfig,
    pub class_stats: ClassStats,
    pub weighting: PixelWeighting,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (best validation foreground IoU).
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MicroSegNet,
    pub history: History,
}

/// Loss and parameter gradient for one image.
pub fn image_gradient(model: &MicroSegNet, sample: &Sample, weights: &WeightMap) -> Result<(f64, Params)> {
    let (logits, cache) = model.forward(&sample.image)?;
    let probs = softmax(&logits);
    let loss = weighted_loss(&probs, &sample.mask, weights)?.total;
    let grad_logits = loss_gradient(&probs, &sample.mask, weights)?;
    Ok((loss, model.backward(&cache, &grad_logits)?))
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    ensure!(!data.train.is_empty(), "training split is empty");
    ensure!(!data.val.is_empty(), "validation split is empty");
    let first = &data.train.samples[0];
    let dims = ModelDims {
        in_channels: first.image.channels(),
        features: config.features,
        classes: first.mask.num_classes(),
    };
    ensure!(
        config.foreground_class < dims.classes,
        "foreground class {} out of range",
        config.foreground_class
    );

    let (weighting, class_stats) = config.weighting(&data.train)?;
    let weight_maps = data
        .train
        .samples
        .par_iter()
        .map(|s| weighting.weight_map(&s.mask))
        .collect::<Result<Vec<_>>>()?;

    let root = Rng::new(config.seed);
    let mut model = MicroSegNet::init(dims, &mut root.named("init"))?;
    let mut opt = OptimizerState::new(config.sgd, &model);
    let shuffle = root.named("shuffle");

    let mut records: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, MicroSegNet)> = None;

    for epoch in 0..config.epochs {
        let order = shuffled(data.train.len(), &mut shuffle.split(epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| image_gradient(&model, &data.train.samples[i], &weight_maps[i]))
                .collect::<Result<Vec<_>>>()?;
            // Reduce in batch order so the result is thread-count independent.
            let mut grads = Params::zeros(&dims);
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, loss: *loss });
                }
                loss_sum += loss;
                grads.add_assign(g);
            }
            match sgd_step(&mut model, &grads, &mut opt) {
                Err(Error::NonFiniteGradient { .. }) => {
                    return Err(Error::Divergence {
                        epoch,
                        loss: f64::NAN,
                    })
                }
                other => other?,
            }
        }
        let train_loss = loss_sum / data.train.len() as f64;
        if !train_loss.is_finite() || !model.params.all_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: train_loss,
            });
        }
        if epoch > 0 && epoch < config.warmup_check_epochs {
            let prev = records[epoch - 1].train_loss;
            if train_loss > prev {
                return Err(Error::Misconfigured(format!(
                    "training loss rose from {prev} to {train_loss} at epoch {epoch}, \
                     within the first {} epochs",
                    config.warmup_check_epochs
                )));
            }
        }

        let val = evaluate(&model, &data.val)?.class_metrics(config.foreground_class);
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_pa: val.pa,
            val_iou: val.iou,
            val_pa_defined: val.pa_defined,
            val_iou_defined: val.iou_defined,
        });
        if best.as_ref().is_none_or(|(iou, _, _)| val.iou > *iou) {
            best = Some((val.iou, epoch, model.clone()));
        }
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model: best_model,
        history: History {
            config: config.clone(),
            class_stats,
            weighting,
            epochs: records,
            best_epoch,
        },
    })
}

pub fn predict_mask(model: &MicroSegNet, sample: &Sample) -> Result<LabelMask> {
    let logits = model.predict(&sample.image)?;
    LabelMask::new(
        logits.width(),
        logits.height(),
        logits.num_classes(),
        logits.argmax(),
    )
}

/// Confusion matrix over a whole split.
pub fn evaluate(model: &MicroSegNet, split: &Split) -> Result<ConfusionMatrix> {
    ensure!(!split.is_empty(), "cannot evaluate on an empty split");
    let per_image = split
        .samples
        .par_iter()
        .map(|s| {
            let mut cm = ConfusionMatrix::new(model.dims().classes);
            cm.accumulate(&predict_mask(model, s)?, &s.mask)?;
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ConfusionMatrix::new(model.dims().classes);
    for cm in &per_image {
        total += cm;
    }
    Ok(total)
}

pub fn evaluate_report(model: &MicroSegNet, split: &Split) -> Result<MetricsReport> {
    evaluate(model, split).map(|cm| cm.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetSpec};
    use crate::synth::SceneParams;
    use crate::weighting::ClassWeights;

    fn tiny_data() -> Dataset {
        generate_dataset(&DatasetSpec {
            scene: SceneParams {
                width: 32,
                height: 32,
                fg_coverage_target: (0.10, 0.20),
                seed: 3,
                ..SceneParams::default()
            },
            count: 8,
            label_noise: 0.0,
            image_noise: 0.0,
        })
        .unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            features: 4,
            warmup_check_epochs: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_history() {
        let data = tiny_data();
        let a = train(&quick(), &data).unwrap();
        let b = train(&quick(), &data).unwrap();
        assert_eq!(
            serde_json::to_string(&a.history).unwrap(),
            serde_json::to_string(&b.history).unwrap()
        );
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let data = tiny_data();
        let mut cfg = quick();
        cfg.sigma = Some(UncertaintySigma::new(2.0).unwrap());
        cfg.use_class_weights = true;
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| train(&cfg, &data).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn unit_class_weights_match_unweighted_path() {
        let data = tiny_data();
        let model = MicroSegNet::init(
            ModelDims {
                in_channels: 1,
                features: 4,
                classes: 2,
            },
            &mut Rng::new(1),
        )
        .unwrap();
        let explicit = PixelWeighting {
            class_weights: Some(ClassWeights::uniform(2)),
            sigma: None,
        };
        for s in &data.train.samples {
            let ones = PixelWeighting::none().weight_map(&s.mask).unwrap();
            let unit = explicit.weight_map(&s.mask).unwrap();
            assert_eq!(ones, unit);
            let probs = softmax(&model.predict(&s.image).unwrap());
            let plain = crate::loss::mean_ce(&probs, &s.mask).unwrap();
            let weighted = weighted_loss(&probs, &s.mask, &ones).unwrap().total;
            assert_eq!(plain, weighted);
        }
    }

    #[test]
    fn rejects_bad_configs_and_empty_splits() {
        let data = tiny_data();
        let mut cfg = quick();
        cfg.epochs = 0;
        assert!(train(&cfg, &data).is_err());
        let mut cfg = quick();
        cfg.foreground_class = 5;
        assert!(train(&cfg, &data).is_err());
        let model = MicroSegNet::zeros(ModelDims {
            in_channels: 1,
            features: 2,
            classes: 2,
        })
        .unwrap();
        assert!(evaluate(&model, &Split::default()).is_err());
    }

    #[test]
    fn all_background_model_flags_undefined_metrics() {
        let data = tiny_data();
        let mut model = MicroSegNet::zeros(ModelDims {
            in_channels: 1,
            features: 2,
            classes: 2,
        })
        .unwrap();
        model.params.head_b[0] = 1.0;
        let report = evaluate_report(&model, &data.test).unwrap();
        let fg = report.class(1);
        assert_eq!(fg.pa, 0.0);
        assert!(fg.pa_defined);
        // Nothing predicted as foreground but foreground exists: IoU is 0, defined.
        assert_eq!(fg.iou, 0.0);

        let mut bg_only = data.test.clone();
        for s in &mut bg_only.samples {
            s.mask = LabelMask::filled(s.mask.width(), s.mask.height(), 2, 0).unwrap();
        }
        let report = evaluate_report(&model, &bg_only).unwrap();
        assert!(!report.class(1).pa_defined);
        assert!(!report.class(1).iou_defined);
    }

    #[test]
    fn memorizes_a_single_image() {
        let data = tiny_data();
        let one = Dataset {
            train: Split {
                samples: vec![data.train.samples[0].clone()],
            },
            val: Split {
                samples: vec![data.train.samples[0].clone()],
            },
            test: Split::default(),
        };
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 1,
            features: 8,
            warmup_check_epochs: 0,
            sgd: SgdConfig {
                learning_rate: 0.05,
                ..SgdConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train(&cfg, &one).unwrap();
        let report = evaluate_report(&out.model, &one.train).unwrap();
        assert!(report.class(1).pa > 0.9, "{:?}", report.class(1));
        assert!(report.class(0).pa > 0.9, "{:?}", report.class(0));
    }
}
