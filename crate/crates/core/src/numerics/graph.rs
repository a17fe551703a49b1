use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NamedTensors = BTreeMap<String, Tensor>;

type BuildFn = dyn Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>;

/// A scalar-valued function of named tensor inputs.
///
/// The function is rebuilt on a fresh [`Tape`] for every evaluation, so the
/// same graph can be evaluated at perturbed inputs by the gradient checker.
pub struct Graph {
    build: Box<BuildFn>,
    state: Option<Forwarded>,
}

struct Forwarded {
    tape: Tape,
    output: Var,
    inputs: BTreeMap<String, Var>,
}

impl Graph {
    pub fn new<F>(build: F) -> Self
    where
        F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var> + 'static,
    {
        Self {
            build: Box::new(build),
            state: None,
        }
    }

    fn run(&self, inputs: &NamedTensors) -> Result<Forwarded> {
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (name, t) in inputs {
            vars.insert(name.clone(), tape.leaf(t.clone())?);
        }
        let output = (self.build)(&mut tape, &vars)?;
        if tape.value(output).len() != 1 {
            return Err(Error::Dimension(format!(
                "graph output has shape {:?}, expected a scalar",
                tape.value(output).shape()
            )));
        }
        Ok(Forwarded {
            tape,
            output,
            inputs: vars,
        })
    }

    /// Evaluates the graph and keeps the tape for [`Graph::backward`].
    pub fn forward(&mut self, inputs: &NamedTensors) -> Result<f64> {
        self.state = None;
        let state = self.run(inputs)?;
        let value = state.tape.value(state.output).data()[0];
        self.state = Some(state);
        Ok(value)
    }

    /// Gradients of the last forward value with respect to every named input.
    pub fn backward(&self) -> Result<NamedTensors> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let mut grads = state.tape.backward(state.output)?;
        Ok(state
            .inputs
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .take(*var)
                    .unwrap_or_else(|| Tensor::zeros(state.tape.value(*var).shape()));
                (name.clone(), g)
            })
            .collect())
    }

    fn evaluate(&self, inputs: &NamedTensors) -> Result<(f64, Vec<u32>)> {
        let state = self.run(inputs)?;
        Ok((
            state.tape.value(state.output).data()[0],
            state.tape.decisions().to_vec(),
        ))
    }
}

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_err: f64,
    /// Input name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates skipped because a `max`/hinge branch flipped within ±step.
    pub excluded: usize,
    pub passed: bool,
}

/// Threshold below which both gradients are compared by absolute error.
const ABS_FLOOR: f64 = 1e-8;

/// Compares reverse-mode gradients against central differences
/// `(f(θ+h·e) − f(θ−h·e)) / 2h` for every coordinate of every input.
pub fn finite_diff_check(
    graph: &mut Graph,
    inputs: &NamedTensors,
    step: f64,
    tol: f64,
) -> Result<CheckReport> {
    if step <= 0.0 {
        return Err(Error::Config(format!("finite difference step must be positive, got {step}")));
    }
    graph.forward(inputs)?;
    let analytic = graph.backward()?;
    let (_, base_decisions) = graph.evaluate(inputs)?;

    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        excluded: 0,
        passed: true,
    };
    let mut probe = inputs.clone();
    for (name, tensor) in inputs {
        let grad = &analytic[name];
        for i in 0..tensor.len() {
            let original = tensor.data()[i];
            probe.get_mut(name).expect("input").data_mut()[i] = original + step;
            let (plus, plus_dec) = graph.evaluate(&probe)?;
            probe.get_mut(name).expect("input").data_mut()[i] = original - step;
            let (minus, minus_dec) = graph.evaluate(&probe)?;
            probe.get_mut(name).expect("input").data_mut()[i] = original;

            if plus_dec != base_decisions || minus_dec != base_decisions {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let err = if a.abs() < ABS_FLOOR && numeric.abs() < ABS_FLOOR {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / a.abs().max(numeric.abs())
            };
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
