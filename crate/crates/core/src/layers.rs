//! Parameterized primitives: convolution and inference-mode batch norm.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::param::{Initializer, ParamId, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

/// Geometry of a square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { c_in, c_out, kernel, stride, padding, bias: true }
    }

    pub fn pointwise(c_in: usize, c_out: usize) -> Self {
        Self::new(c_in, c_out, 1, 1, 0)
    }

    pub fn without_bias(self) -> Self {
        ConvSpec { bias: false, ..self }
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + if self.bias { self.c_out } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2dLayer {
    /// Registers `{name}.weight` (He-normal) and `{name}.bias` (zeros).
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        spec: ConvSpec,
    ) -> Result<Self> {
        let ws = Shape::new(spec.c_out, spec.c_in, spec.kernel, spec.kernel);
        let weight = store.add(format!("{name}.weight"), init.he_normal(ws))?;
        let bias = if spec.bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, spec.c_out, 1, 1)))?)
        } else {
            None
        };
        Ok(Conv2dLayer { name: name.to_string(), spec, weight, bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        g.scoped(self.name.clone(), |g| {
            let w = g.param(store, self.weight)?;
            let b = match self.bias {
                Some(b) => Some(g.param(store, b)?),
                None => None,
            };
            g.conv2d(x, w, b, self.spec.stride, self.spec.padding)
        })
    }
}

/// Batch norm with frozen running statistics (mean 0, variance 1 at init).
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNormLayer {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let stat = Shape::new(1, channels, 1, 1);
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(stat))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(stat))?;
        Ok(BatchNormLayer {
            name: name.to_string(),
            channels,
            gamma,
            beta,
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: Self::EPS,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        g.scoped(self.name.clone(), |g| {
            let gamma = g.param(store, self.gamma)?;
            let beta = g.param(store, self.beta)?;
            let mean: Vec<T> = self.mean.iter().map(|&v| T::from_f64_lossy(v)).collect();
            let var: Vec<T> = self.var.iter().map(|&v| T::from_f64_lossy(v)).collect();
            g.batchnorm_inference(x, gamma, beta, &mean, &var, T::from_f64_lossy(self.eps))
        })
    }
}
