//! Softmax cross-entropy with per-pixel weights, and its gradient with
//! respect to the logits.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::imagery::{LabelMask, WeightMap};

/// Lower clamp applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-pixel class scores, interleaved: `scores[pixel * C + class]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap {
    width: usize,
    height: usize,
    num_classes: usize,
    scores: Vec<f64>,
}

impl LogitMap {
    pub fn new(width: usize, height: usize, num_classes: usize, scores: Vec<f64>) -> Result<Self> {
        ensure!(num_classes >= 1, "logits need at least one class");
        ensure!(
            scores.len() == width * height * num_classes,
            "logit array has {} values, expected {}x{}x{}",
            scores.len(),
            width,
            height,
            num_classes
        );
        ensure!(
            scores.iter().all(|v| v.is_finite()),
            "logits must be finite"
        );
        Ok(LogitMap {
            width,
            height,
            num_classes,
            scores,
        })
    }

    pub fn zeros(width: usize, height: usize, num_classes: usize) -> Self {
        LogitMap {
            width,
            height,
            num_classes,
            scores: vec![0.0; width * height * num_classes],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut [f64] {
        &mut self.scores
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.scores[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Highest-scoring class per pixel; ties go to the lower index.
    pub fn argmax(&self) -> Vec<u8> {
        self.scores
            .chunks(self.num_classes)
            .map(|s| {
                let mut best = 0;
                for (k, &v) in s.iter().enumerate().skip(1) {
                    if v > s[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Softmax output; same layout as [`LogitMap`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    num_classes: usize,
    probs: Vec<f64>,
}

impl ProbMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_pixel: Option<Vec<f64>>,
}

/// Max-subtracted softmax. Probabilities are floored at the smallest
/// positive normal `f64` so that no class ever reaches exactly zero.
pub fn softmax(logits: &LogitMap) -> ProbMap {
    let c = logits.num_classes;
    let mut probs = vec![0.0; logits.scores.len()];
    for (out, s) in probs.chunks_mut(c).zip(logits.scores.chunks(c)) {
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(s) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o = (*o / sum).max(f64::MIN_POSITIVE);
        }
    }
    ProbMap {
        width: logits.width,
        height: logits.height,
        num_classes: c,
        probs,
    }
}

fn check_mask(probs: &ProbMap, mask: &LabelMask) -> Result<()> {
    ensure!(
        mask.same_shape(probs.width, probs.height),
        "prediction is {}x{} but mask is {}x{}",
        probs.width,
        probs.height,
        mask.width(),
        mask.height()
    );
    ensure!(
        mask.num_classes() == probs.num_classes,
        "prediction has {} classes but mask has {}",
        probs.num_classes,
        mask.num_classes()
    );
    Ok(())
}

fn check_weights(probs: &ProbMap, w: &WeightMap) -> Result<()> {
    ensure!(
        w.width() == probs.width && w.height() == probs.height,
        "prediction is {}x{} but weight map is {}x{}",
        probs.width,
        probs.height,
        w.width(),
        w.height()
    );
    Ok(())
}

/// `-ln p_true` per pixel, with `p_true` floored at [`PROB_FLOOR`].
pub fn pixel_ce(probs: &ProbMap, mask: &LabelMask) -> Result<Vec<f64>> {
    check_mask(probs, mask)?;
    let c = probs.num_classes;
    Ok(mask
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.probs[i * c + l as usize].max(PROB_FLOOR).ln())
        .collect())
}

/// Mean of `weight(x) * ce(x)` over *all* pixels, zero-weight ones included.
pub fn weighted_loss(probs: &ProbMap, mask: &LabelMask, w: &WeightMap) -> Result<LossReport> {
    check_weights(probs, w)?;
    let per_pixel: Vec<f64> = pixel_ce(probs, mask)?
        .into_iter()
        .zip(w.weights())
        .map(|(l, &wt)| f64::from(wt) * l)
        .collect();
    let n = per_pixel.len().max(1) as f64;
    Ok(LossReport {
        total: tree_sum(&per_pixel) / n,
        per_pixel: Some(per_pixel),
    })
}

/// Unweighted mean cross-entropy.
pub fn mean_ce(probs: &ProbMap, mask: &LabelMask) -> Result<f64> {
    let ce = pixel_ce(probs, mask)?;
    Ok(tree_sum(&ce) / ce.len().max(1) as f64)
}

/// `d total / d logit_k(x) = weight(x) / n * (p_k(x) - [k == label(x)])`.
pub fn loss_gradient(probs: &ProbMap, mask: &LabelMask, w: &WeightMap) -> Result<LogitMap> {
    check_mask(probs, mask)?;
    check_weights(probs, w)?;
    let c = probs.num_classes;
    let n = mask.len().max(1) as f64;
    let mut grad = probs.probs.clone();
    for (g, (&l, &wt)) in grad.chunks_mut(c).zip(mask.labels().iter().zip(w.weights())) {
        g[l as usize] -= 1.0;
        let scale = f64::from(wt) / n;
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(LogitMap {
        width: probs.width,
        height: probs.height,
        num_classes: c,
        scores: grad,
    })
}

/// Pairwise summation with a fixed split, so the result depends only on the
/// input order.
pub fn tree_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if values.len() <= LEAF {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        tree_sum(&values[..mid]) + tree_sum(&values[mid..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logits(w: usize, h: usize, c: usize, v: &[f64]) -> LogitMap {
        LogitMap::new(w, h, c, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax(&logits(1, 1, 2, &[0.0, 0.0]));
        assert_eq!(p.probs(), &[0.5, 0.5]);
        let p = softmax(&logits(1, 1, 2, &[2f64.ln(), 0.0]));
        assert!((p.probs()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.probs()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let p = softmax(&logits(1, 1, 2, &[1000.0, 0.0]));
        assert_eq!(p.probs()[0], 1.0);
        assert_eq!(p.probs()[1], f64::MIN_POSITIVE);
        assert!(p.probs().iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn pixel_ce_closed_forms() {
        let mask = LabelMask::new(3, 1, 2, vec![0, 0, 0]).unwrap();
        let probs = ProbMap {
            width: 3,
            height: 1,
            num_classes: 2,
            probs: vec![1.0, 0.0, 0.5, 0.5, (-1f64).exp(), 1.0 - (-1f64).exp()],
        };
        let ce = pixel_ce(&probs, &mask).unwrap();
        assert_eq!(ce[0], 0.0);
        assert!((ce[1] - 2f64.ln()).abs() < 1e-15);
        assert!((ce[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ce_clamps_zero_probability() {
        let mask = LabelMask::new(1, 1, 2, vec![1]).unwrap();
        let probs = ProbMap {
            width: 1,
            height: 1,
            num_classes: 2,
            probs: vec![1.0, 0.0],
        };
        let ce = pixel_ce(&probs, &mask).unwrap();
        assert!((ce[0] + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_loss_arithmetic() {
        let mask = LabelMask::new(2, 1, 2, vec![0, 0]).unwrap();
        let probs = ProbMap {
            width: 2,
            height: 1,
            num_classes: 2,
            probs: vec![0.5, 0.5, (-1f64).exp(), 1.0 - (-1f64).exp()],
        };
        let w = WeightMap::new(2, 1, vec![2.0, 0.0]).unwrap();
        let r = weighted_loss(&probs, &mask, &w).unwrap();
        assert!((r.total - 2f64.ln()).abs() < 1e-15);
        assert!((r.total - std::f64::consts::LN_2).abs() < 1e-6);

        let zero = WeightMap::uniform(2, 1, 0.0).unwrap();
        assert_eq!(weighted_loss(&probs, &mask, &zero).unwrap().total, 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = softmax(&LogitMap::zeros(2, 2, 2));
        let mask = LabelMask::filled(2, 1, 2, 0).unwrap();
        assert!(pixel_ce(&p, &mask).is_err());
        let mask = LabelMask::filled(2, 2, 2, 0).unwrap();
        let w = WeightMap::uniform(3, 2, 1.0).unwrap();
        assert!(weighted_loss(&p, &mask, &w).is_err());
        assert!(loss_gradient(&p, &mask, &w).is_err());
        let mask3 = LabelMask::filled(2, 2, 3, 0).unwrap();
        assert!(pixel_ce(&p, &mask3).is_err());
    }

    #[test]
    fn gradient_closed_forms() {
        let p = softmax(&LogitMap::zeros(1, 1, 2));
        let mask = LabelMask::new(1, 1, 2, vec![0]).unwrap();
        let w = WeightMap::uniform(1, 1, 2.0).unwrap();
        assert_eq!(loss_gradient(&p, &mask, &w).unwrap().scores(), &[-1.0, 1.0]);
        let w = WeightMap::uniform(1, 1, 0.0).unwrap();
        assert!(loss_gradient(&p, &mask, &w).unwrap().scores().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        let l = logits(2, 1, 3, &[0.0, 1.0, 1.0, 2.0, 0.0, 0.0]);
        assert_eq!(l.argmax(), vec![1, 0]);
    }

    #[test]
    fn tree_sum_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(f64::from).collect();
        assert_eq!(tree_sum(&v), 499_500.0);
        assert_eq!(tree_sum(&[]), 0.0);
    }

    fn instance() -> impl Strategy<Value = (LogitMap, LabelMask, WeightMap)> {
        (1usize..6, 1usize..6, 2usize..5).prop_flat_map(|(w, h, c)| {
            let n = w * h;
            (
                proptest::collection::vec(-5.0f64..5.0, n * c),
                proptest::collection::vec(0..c as u8, n),
                proptest::collection::vec(0.0f32..4.0, n),
            )
                .prop_map(move |(s, l, wt)| {
                    (
                        LogitMap::new(w, h, c, s).unwrap(),
                        LabelMask::new(w, h, c, l).unwrap(),
                        WeightMap::new(w, h, wt).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one((l, _, _) in instance()) {
            let p = softmax(&l);
            for i in 0..l.width() * l.height() {
                let s: f64 = p.pixel(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(p.pixel(i).iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }

        #[test]
        fn gradient_rows_sum_to_zero((l, m, w) in instance()) {
            let g = loss_gradient(&softmax(&l), &m, &w).unwrap();
            for i in 0..l.width() * l.height() {
                prop_assert!(g.pixel(i).iter().sum::<f64>().abs() < 1e-10);
            }
        }

        #[test]
        fn loss_is_linear_in_weights((l, m, w) in instance(), alpha in 0.0f32..8.0) {
            let p = softmax(&l);
            let base = weighted_loss(&p, &m, &w).unwrap().total;
            // Scaling in f32 can round; compare against the rounded map.
            let scaled_map = w.scaled(alpha).unwrap();
            let scaled = weighted_loss(&p, &m, &scaled_map).unwrap().total;
            let exact: f64 = pixel_ce(&p, &m).unwrap().iter().zip(scaled_map.weights())
                .map(|(l, &wt)| l * f64::from(wt)).sum::<f64>() / m.len() as f64;
            prop_assert!((scaled - exact).abs() <= 1e-12 * exact.abs().max(1.0));
            prop_assert!((scaled - f64::from(alpha) * base).abs() <= 1e-6 * (f64::from(alpha) * base).abs().max(1e-6));
        }

        #[test]
        fn unit_weights_reduce_to_mean_ce((l, m, _) in instance()) {
            let p = softmax(&l);
            let ones = WeightMap::uniform(l.width(), l.height(), 1.0).unwrap();
            let r = weighted_loss(&p, &m, &ones).unwrap();
            prop_assert!((r.total - mean_ce(&p, &m).unwrap()).abs() < 1e-12);
            prop_assert!(r.total >= 0.0);
            let per = r.per_pixel.unwrap();
            prop_assert!((r.total - tree_sum(&per) / per.len() as f64).abs() == 0.0);
        }
    }
}
