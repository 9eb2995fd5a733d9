//! Toy regression task: drive the neck output towards a fixed random pyramid.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::exec::Execution;
use crate::graph::{Graph, NodeId};
use crate::necks::model::NeckModel;
use crate::necks::pyramid::FeaturePyramid;
use crate::tensor::{Real, Tensor};

/// Standard deviation of the random target maps.
pub const TARGET_STD: f64 = 1.0;

/// Fixed input and target pyramids for one seed.
#[derive(Clone, Debug)]
pub struct ToyTask<T> {
    pub input: FeaturePyramid<T>,
    pub target: FeaturePyramid<T>,
}

impl<T: Real> ToyTask<T> {
    /// Input and target drawn from one seeded stream at `resolution`, batch 1.
    pub fn new(model: &NeckModel<T>, resolution: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = FeaturePyramid::random_input(model.config(), resolution, 1, &mut rng)?;
        let shapes = model.output_shapes(resolution)?;
        let target = FeaturePyramid::new(
            shapes.into_iter().map(|(l, s)| (l, Tensor::randn(s, TARGET_STD, &mut rng))).collect(),
        )?;
        Ok(ToyTask { input, target })
    }
}

/// Records the neck plus `sum_l mse(P_l, target_l)` and returns the loss node.
pub fn toy_loss<T: Real>(
    g: &mut Graph<T>,
    model: &NeckModel<T>,
    input: &FeaturePyramid<T>,
    target: &FeaturePyramid<T>,
) -> Result<NodeId> {
    let mut inputs = BTreeMap::new();
    for (l, t) in input.iter() {
        inputs.insert(l, g.scoped(format!("c{l}"), |g| g.input(t.clone(), false))?);
    }
    let out = model.forward_graph(g, &inputs)?;
    let mut loss: Option<NodeId> = None;
    for (&l, &p) in &out.outputs {
        let t = target.get(l).ok_or_else(|| config_err!("toy target has no level P{l}"))?;
        let term = g.scoped(format!("loss.p{l}"), |g| g.mse(p, t))?;
        loss = Some(match loss {
            None => term,
            Some(acc) => g.scoped("loss", |g| g.add(acc, term))?,
        });
    }
    loss.ok_or_else(|| config_err!("model has no outputs"))
}

/// Plain gradient descent on the toy task; returns the loss before each step.
pub fn train_toy<T: Real>(model: &mut NeckModel<T>, steps: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
    let resolution = model.config().micro_resolution();
    train_toy_at(model, steps, lr, seed, resolution)
}

pub fn train_toy_at<T: Real>(
    model: &mut NeckModel<T>,
    steps: usize,
    lr: f64,
    seed: u64,
    resolution: usize,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Usage("steps must be >= 1".into()));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Usage(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    let task = ToyTask::new(model, resolution, seed)?;
    let lr_t = T::from_f64_lossy(lr);
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut g = Graph::new().with_execution(Execution::Sequential);
        let loss = toy_loss(&mut g, model, &task.input, &task.target)?;
        let value = g.value(loss)?.data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric { node: g.name(loss).to_string(), detail: format!("loss diverged at step {step}") });
        }
        curve.push(value);
        let params = model.params_mut();
        params.zero_grad();
        g.backward_into(loss, params)?;
        params.sgd_step(lr_t);
    }
    Ok(curve)
}
