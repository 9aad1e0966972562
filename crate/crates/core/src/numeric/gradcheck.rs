use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

/// Worst disagreement found by [`gradient_check_report`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub scalars_checked: usize,
    /// Objective value at the unperturbed parameters.
    pub objective: f64,
    pub entries: Vec<GradEntry>,
}

/// One checked scalar.
#[derive(Clone, Debug)]
pub struct GradEntry {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Dimension(format!("objective must be scalar, got {:?}", v.shape())));
    }
    let x = v.data()[0];
    if !x.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {x}")));
    }
    Ok(x)
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every scalar in `store`, returning the maximum relative error
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check<F>(f: F, store: &mut ParamStore, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    Ok(gradient_check_report(f, store, epsilon)?.max_relative_error)
}

pub fn gradient_check_report<F>(f: F, store: &mut ParamStore, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let objective = eval_scalar(&f, store)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let mut entries = Vec::with_capacity(store.num_scalars());
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let analytic_all = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for (i, &analytic) in analytic_all.iter().enumerate() {
            let orig = store.get(id).data()[i];
            store.set_scalar(id, i, orig + epsilon);
            let plus = eval_scalar(&f, store);
            store.set_scalar(id, i, orig - epsilon);
            let minus = eval_scalar(&f, store);
            store.set_scalar(id, i, orig);
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            entries.push(GradEntry {
                param: id,
                index: i,
                analytic,
                numeric,
            });
        }
    }
    let worst = entries
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |best, (k, e)| match best {
            Some((_, err)) if err >= e.relative_error() => best,
            _ => Some((k, e.relative_error())),
        });
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        scalars_checked: entries.len(),
        objective,
        entries: Vec::new(),
    };
    if let Some((k, err)) = worst {
        let e = &entries[k];
        report.max_relative_error = err;
        report.worst_param = store.name(e.param).to_string();
        report.worst_index = e.index;
        report.analytic = e.analytic;
        report.numeric = e.numeric;
    }
    report.entries = entries;
    Ok(report)
}
