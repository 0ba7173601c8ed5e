//! SGD with momentum and L2 weight decay folded into the velocity:
//!
//! ```text
//! v <- momentum * v + grad + weight_decay * theta
//! theta <- theta - lr * v
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{MicroSegNet, Params};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: SgdConfig,
    velocity: Params,
}

impl OptimizerState {
    pub fn new(config: SgdConfig, model: &MicroSegNet) -> Self {
        OptimizerState {
            config,
            velocity: Params::zeros(&model.dims()),
        }
    }

    pub fn velocity(&self) -> &Params {
        &self.velocity
    }
}

/// One update. Nothing is modified if any gradient is non-finite.
pub fn sgd_step(model: &mut MicroSegNet, grads: &Params, opt: &mut OptimizerState) -> Result<()> {
    for ((name, g), (_, v)) in grads.blocks().iter().zip(opt.velocity.blocks()) {
        ensure!(
            g.len() == v.len(),
            "gradient block {name} has {} values, expected {}",
            g.len(),
            v.len()
        );
        if let Some(index) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { block: name, index });
        }
    }
    let SgdConfig {
        learning_rate: lr,
        momentum,
        weight_decay: wd,
    } = opt.config;
    for (((_, theta), (_, g)), (_, v)) in model
        .params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(opt.velocity.blocks_mut())
    {
        for ((t, &gi), vi) in theta.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi + wd * *t;
            *t -= lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    fn scalar_model(theta: f64) -> MicroSegNet {
        let dims = ModelDims {
            in_channels: 1,
            features: 1,
            classes: 2,
        };
        let mut m = MicroSegNet::zeros(dims).unwrap();
        m.params.head_b[0] = theta;
        m
    }

    fn unit_grad(m: &MicroSegNet) -> Params {
        let mut g = Params::zeros(&m.dims());
        g.head_b[0] = 1.0;
        g
    }

    #[test]
    fn zero_grads_without_decay_leave_model_unchanged() {
        let mut m = scalar_model(1.0);
        let before = m.clone();
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, &m);
        let zero = Params::zeros(&m.dims());
        sgd_step(&mut m, &zero, &mut opt).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn one_and_two_momentum_steps() {
        let mut m = scalar_model(1.0);
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, &m);
        let g = unit_grad(&m);
        sgd_step(&mut m, &g, &mut opt).unwrap();
        assert!((m.params.head_b[0] - 0.999).abs() < 1e-15);
        sgd_step(&mut m, &g, &mut opt).unwrap();
        assert!((opt.velocity().head_b[0] - 1.9).abs() < 1e-15);
        assert!((m.params.head_b[0] - 0.9971).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_velocity() {
        let mut m = scalar_model(2.0);
        let mut opt = OptimizerState::new(SgdConfig::default(), &m);
        let zero = Params::zeros(&m.dims());
        sgd_step(&mut m, &zero, &mut opt).unwrap();
        assert!((opt.velocity().head_b[0] - 0.001).abs() < 1e-15);
        assert!((m.params.head_b[0] - (2.0 - 0.001 * 0.001)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut m = scalar_model(1.0);
        let before = m.clone();
        let mut opt = OptimizerState::new(SgdConfig::default(), &m);
        let mut g = Params::zeros(&m.dims());
        g.conv2_w[0] = f64::NAN;
        match sgd_step(&mut m, &g, &mut opt) {
            Err(Error::NonFiniteGradient { block, index }) => {
                assert_eq!(block, "conv2_w");
                assert_eq!(index, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(m, before);
    }
}
