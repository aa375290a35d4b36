//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Bound, Tape, Var};
use crate::tensor::Tensor;

/// Magnitudes below this are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` seen.
    pub max_rel_error: f64,
    /// (tensor index, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
        }
    }

    fn record(&mut self, tensor: usize, elem: usize, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
        let err = (analytic - numeric).abs() / scale;
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((tensor, elem));
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Checks gradients of `loss_fn` with respect to freshly created input leaves.
pub fn check_input_gradients<F>(inputs: &[Tensor], step: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = loss_fn(&mut tape, &vars)?;
    let adj = tape.backward(loss)?;

    let mut report = GradCheckReport::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = adj
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[ti].rows(), inputs[ti].cols()));
        for e in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[e];
            work[ti].data_mut()[e] = orig + step;
            let up = eval(&work)?;
            work[ti].data_mut()[e] = orig - step;
            let down = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            report.record(ti, e, analytic.data()[e], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks gradients of `loss_fn` with respect to every parameter in `store`.
pub fn check_param_gradients<F>(store: &ParamStore, step: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind(s)?;
        let loss = loss_fn(&mut tape, &bound)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let bound = tape.bind(store)?;
    let loss = loss_fn(&mut tape, &bound)?;
    let grads = tape.backward(loss)?.param_gradients(&tape, store);

    let mut report = GradCheckReport::new();
    let mut work = store.clone();
    for id in store.ids() {
        for e in 0..store.get(id).len() {
            let orig = store.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig;
            report.record(id.index(), e, grads.get(id).data()[e], (up - down) / (2.0 * step));
        }
    }
    Ok(report)
}
