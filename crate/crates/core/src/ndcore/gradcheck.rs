use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Worst entry found by [`grad_check_report`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Returns the maximum over every parameter entry of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    Ok(grad_check_report(f, params, step)?.max_rel)
}

/// [`grad_check`] with the location of the worst entry.
pub fn grad_check_report<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(invalid("grad_check: step must be positive"));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars = params
            .iter()
            .map(|p| tape.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };

    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut worst = GradCheckReport::default();
    let mut probe = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..probe[pi].numel() {
            let orig = probe[pi].data()[i];
            probe[pi].data_mut()[i] = orig + step;
            let up = evaluate(&f, &probe)?;
            probe[pi].data_mut()[i] = orig - step;
            let down = evaluate(&f, &probe)?;
            probe[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst.max_rel {
                worst = GradCheckReport {
                    max_rel: rel,
                    param: pi,
                    index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    let value = out.value();
    if value.numel() != 1 {
        return Err(Error::NotScalar(value.shape().to_vec()));
    }
    Ok(value.item())
}
