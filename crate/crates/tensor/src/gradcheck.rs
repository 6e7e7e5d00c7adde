use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Relative-error floor. Central differences at [`FD_STEP`] carry roundoff
/// of order 1e-10 for outputs of order 1-10, so gradients smaller than this
/// are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Which entry produced the maximum, e.g. `param conv.weight[3]`.
    pub worst: String,
    /// Analytic and numeric values at the worst entry.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval<F>(store: &ParamStore, inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, store, &vars)?;
    Ok(tape.value(out)?.data()[0])
}

/// Compare reverse-mode gradients of the scalar `f` against central
/// differences for every parameter entry and every input entry.
pub fn grad_check<F>(store: &mut ParamStore, inputs: &mut [Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, store, &vars)?;
    if tape.value(out)?.len() != 1 {
        return Err(TensorError::Shape {
            node: out.index(),
            op: "grad_check",
            detail: "function must return a scalar".into(),
        });
    }
    let grads = tape.backward(out, None)?;
    let param_grads = grads.param_grads(store);
    let input_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs.iter())
        .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    drop(tape);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), worst_pair: (0.0, 0.0), checked: 0 };
    let mut record = |analytic: f64, numeric: f64, what: String| {
        let err = rel_err(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = what;
            report.worst_pair = (analytic, numeric);
        }
    };

    for id in store.ids().collect::<Vec<_>>() {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let fp = eval(store, inputs, &f)?;
            store.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let fm = eval(store, inputs, &f)?;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let analytic = param_grads[id.index()].data()[j];
            record(analytic, numeric, format!("param {}[{j}]", store.name(id)));
        }
    }
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + FD_STEP;
            let fp = eval(store, inputs, &f)?;
            inputs[i].data_mut()[j] = orig - FD_STEP;
            let fm = eval(store, inputs, &f)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let analytic = input_grads[i].data()[j];
            record(analytic, numeric, format!("input {i}[{j}]"));
        }
    }
    Ok(report)
}
