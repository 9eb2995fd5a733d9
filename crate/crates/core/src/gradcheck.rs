//! Finite-difference check of analytic parameter gradients on the toy loss.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::exec::Execution;
use crate::graph::Graph;
use crate::necks::model::{build, NeckModel};
use crate::necks::train::{toy_loss, ToyTask};
use crate::necks::NeckConfig;
use crate::param::ParamId;
use crate::tensor::Tensor;

/// Standard deviation of the biases used at the evaluation point.
pub const BIAS_JITTER: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub coordinates: usize,
    pub min_params: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Test hook: adds an offset to the analytic gradient of this parameter.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { coordinates: 200, min_params: 10, step: 1e-5, tolerance: 1e-4, seed: 0, corrupt: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub coordinates: usize,
    pub params_checked: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst: Option<CoordinateCheck>,
    /// Parameters with at least one coordinate over tolerance.
    pub failing_params: Vec<String>,
    pub passed: bool,
}

/// `|a - n| / max(1, |a|, |n|)`: relative for large gradients, absolute below 1.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn loss_at(model: &NeckModel<f64>, task: &ToyTask<f64>) -> Result<f64> {
    let mut g = Graph::new().with_execution(Execution::Sequential);
    let loss = toy_loss(&mut g, model, &task.input, &task.target)?;
    Ok(g.value(loss)?.data()[0])
}

/// Zero biases put every conv whose input window is all-zero (common after
/// ReLU at micro widths) exactly on a ReLU kink, where central differences
/// disagree with any one-sided derivative. Small random biases move the
/// evaluation point off those kinks.
fn jitter_biases(model: &mut NeckModel<f64>, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6269_6173);
    let ids: Vec<ParamId> = model.params().iter().filter(|(_, p)| p.name.ends_with(".bias")).map(|(id, _)| id).collect();
    for id in ids {
        let p = model.params_mut().get_mut(id);
        p.value = Tensor::randn(p.value.shape(), BIAS_JITTER, &mut rng);
    }
    Ok(())
}

/// Checks `config` in double precision with norm disabled.
pub fn gradcheck(config: &NeckConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if !config.is_micro() {
        return Err(config_err!(
            "gradient check needs micro shapes (resolution <= {}, widths <= 128); pass a micro config",
            config.micro_resolution()
        ));
    }
    let config = NeckConfig { norm: false, ..config.clone() };
    let mut model: NeckModel<f64> = build(&config)?;
    jitter_biases(&mut model, opts.seed)?;
    let task = ToyTask::new(&model, config.resolution, opts.seed)?;

    let mut g = Graph::new().with_execution(Execution::Sequential);
    let loss = toy_loss(&mut g, &model, &task.input, &task.target)?;
    let grads = g.backward(loss)?;
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6772_6164);
    let mut ids: Vec<ParamId> = model.params().ids().collect();
    if ids.len() < opts.min_params {
        return Err(config_err!("model has {} parameters, gradient check needs {}", ids.len(), opts.min_params));
    }
    ids.shuffle(&mut rng);
    if let Some(name) = &opts.corrupt {
        let id = model.params().id(name).ok_or_else(|| config_err!("no parameter named {name}"))?;
        ids.retain(|&i| i != id);
        ids.insert(0, id);
    }

    let mut checks = Vec::with_capacity(opts.coordinates);
    let mut touched = BTreeSet::new();
    for k in 0..opts.coordinates.max(opts.min_params) {
        let id = ids[k % ids.len()];
        let (name, len) = {
            let p = model.params().get(id);
            (p.name.clone(), p.value.len())
        };
        let index = rng.random_range(0..len);
        let mut analytic = grads.param(id).map_or(0.0, |t| t.data()[index]);
        if opts.corrupt.as_deref() == Some(name.as_str()) {
            analytic += 1.0 + analytic.abs();
        }

        let original = model.params().get(id).value.data()[index];
        model.params_mut().get_mut(id).value.data_mut()[index] = original + opts.step;
        let plus = loss_at(&model, &task)?;
        model.params_mut().get_mut(id).value.data_mut()[index] = original - opts.step;
        let minus = loss_at(&model, &task)?;
        model.params_mut().get_mut(id).value.data_mut()[index] = original;
        let numeric = (plus - minus) / (2.0 * opts.step);
        if !numeric.is_finite() {
            return Err(Error::Numeric { node: name, detail: "finite difference is not finite".into() });
        }
        touched.insert(id.index());
        checks.push(CoordinateCheck { rel_error: relative_error(analytic, numeric), param: name, index, analytic, numeric });
    }

    let worst = checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).cloned();
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    let failing_params: Vec<String> = checks
        .iter()
        .filter(|c| c.rel_error >= opts.tolerance)
        .map(|c| c.param.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(GradcheckReport {
        coordinates: checks.len(),
        params_checked: touched.len(),
        step: opts.step,
        tolerance: opts.tolerance,
        max_rel_error,
        worst,
        passed: max_rel_error < opts.tolerance,
        failing_params,
    })
}

impl GradcheckReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "gradcheck: {} coordinates over {} parameters, step {:e}, tolerance {:e}\nmax relative error {:.3e}\n",
            self.coordinates, self.params_checked, self.step, self.tolerance, self.max_rel_error
        );
        if let Some(w) = &self.worst {
            s.push_str(&format!(
                "worst: {}[{}] analytic {:.6e} numeric {:.6e}\n",
                w.param, w.index, w.analytic, w.numeric
            ));
        }
        if !self.failing_params.is_empty() {
            s.push_str(&format!("failing parameters: {}\n", self.failing_params.join(", ")));
        }
        s.push_str(if self.passed { "PASS\n" } else { "FAIL\n" });
        s
    }
}
