use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId, Padding};
use crate::params::{he_uniform, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: Padding,
}

impl Conv2d {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            he_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Conv2d { weight, bias, padding }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.padding)
    }
}

/// Fully connected layer, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), he_uniform(&[fan_in, fan_out], fan_in, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Dense { weight, bias }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.dense(x, w, b)
    }
}
