//! Parameterized building blocks on top of [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ConvSpec, Graph, Mode, ParamId, ParamStore, Tensor, Var, BN_EPS, BN_MOMENTUM};
use crate::error::Result;

pub const HEAD_INIT_STD: f64 = 0.01;

/// He-normal initialization for a fan-in.
pub fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| dist.sample(rng)).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let shape = spec.weight_shape();
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let weight = store.add(&format!("{name}.weight"), he_normal(rng, &shape, fan_in));
        let bias = spec
            .bias
            .then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[spec.out_channels])));
        Conv2d { spec, weight, bias }
    }

    /// Output layer: weights drawn from `N(0, HEAD_INIT_STD²)` so initial
    /// predictions sit near the bias.
    pub fn new_head(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let layer = Conv2d::new(store, name, spec, rng);
        let w = store.value_mut(layer.weight);
        let dist = Normal::new(0.0, HEAD_INIT_STD).expect("finite std");
        w.data.iter_mut().for_each(|v| *v = dist.sample(rng));
        layer
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, &self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let mut mean = store.value(self.running_mean).data.clone();
        let mut var = store.value(self.running_var).data.clone();
        let y = g.batch_norm(
            x,
            gamma,
            beta,
            Some((&mut mean, &mut var)),
            mode,
            g.bn_momentum().unwrap_or(BN_MOMENTUM),
            BN_EPS,
        )?;
        if mode == Mode::Train {
            store.value_mut(self.running_mean).data = mean;
            store.value_mut(self.running_var).data = var;
        }
        Ok(y)
    }
}

/// Convolution, batch norm, ReLU. The convolution carries no bias.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let spec = spec.bias(false);
        ConvBnRelu {
            conv: Conv2d::new(store, &format!("{name}.conv"), spec, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), spec.out_channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let c = self.conv.forward(g, store, x)?;
        let n = self.bn.forward(g, store, c, mode)?;
        let y = g.relu(n);
        g.discard(&[c, n]);
        Ok(y)
    }
}
