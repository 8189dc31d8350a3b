//! Tape gradients against central finite differences.

use super::model::ToyModel;
use super::pipeline::{Objective, Term};
use super::step::{build_step, combine, StepPlan};
use super::tape::Tape;
use crate::error::Result;
use crate::vwal::WeightSchedule;

pub const FD_STEP: f64 = 1e-3;

/// Gradient entries whose magnitude is below this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Max relative error between `analytic` and central differences of `f`.
pub fn grad_check_fn(theta: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut point = theta.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        point[i] = theta[i] + FD_STEP;
        let up = f(&point);
        point[i] = theta[i] - FD_STEP;
        let down = f(&point);
        point[i] = theta[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

/// Loss selector of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub enum LossSelector {
    Single(Term),
    Combined(Objective),
}

impl LossSelector {
    fn objective(&self) -> Objective {
        match self {
            LossSelector::Single(t) => vec![(*t, 1.0)],
            LossSelector::Combined(o) => o.clone(),
        }
    }
}

/// Max relative error over all model parameters for the selected loss.
/// Voxel weights are ranked once at the base point and then held fixed.
pub fn grad_check(
    model: &ToyModel,
    plan: &StepPlan,
    sched: &WeightSchedule,
    selector: &LossSelector,
) -> Result<f64> {
    let objective = selector.objective();
    let eval =
        |m: &ToyModel, frozen: Option<&[Vec<f64>]>| -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape);
            let terms = build_step(&mut tape, &bound, plan, sched, frozen)?;
            let parts: Vec<_> = objective.iter().map(|&(t, k)| (terms.term(t), k)).collect();
            let out = combine(&mut tape, &parts);
            let value = tape.value(out).item();
            let grads = tape.backward(out);
            Ok((value, bound.flat_gradient(&grads), terms.weights))
        };
    let (_, analytic, weights) = eval(model, None)?;
    let theta = model.params();
    let mut failure = None;
    let worst = grad_check_fn(&theta, &analytic, |p| {
        let probe = model.with_params(p).and_then(|m| eval(&m, Some(&weights)));
        match probe {
            Ok((v, _, _)) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(worst),
    }
}
