use rand::seq::index::sample;

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Maximum relative error between reverse-mode gradients and central finite
/// differences, over every scalar of every parameter in `point`.
///
/// `build` must record a scalar (`1 × 1`) output. The error per coordinate is
/// `|analytic − fd| / max(1, |fd|)`.
pub fn grad_check<F>(build: F, point: &ParameterStore, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    grad_check_impl(&build, point, h, None)
}

/// As [`grad_check`] but probing at most `per_param` randomly chosen
/// coordinates of each parameter.
pub fn grad_check_sampled<F>(build: F, point: &ParameterStore, h: f64, per_param: usize, stream: RngStream) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    grad_check_impl(&build, point, h, Some((per_param, stream)))
}

fn eval_scalar<F>(build: &F, store: &ParameterStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", format!("output must be scalar, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

fn grad_check_impl<F>(build: &F, point: &ParameterStore, h: f64, sampling: Option<(usize, RngStream)>) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Invalid(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let mut analytic = point.clone();
    analytic.zero_grad();
    let mut tape = Tape::new();
    let out = build(&mut tape, &analytic)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("grad_check", "output must be scalar"));
    }
    tape.backward(out, &Tensor::filled(1, 1, 1.0), &mut analytic)?;

    let mut probe = point.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = point.names().map(str::to_string).collect();
    for name in names {
        let n = point.value(&name)?.len();
        let coords: Vec<usize> = match sampling {
            Some((k, stream)) if k < n => {
                let mut rng = stream.named(&name).rng();
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let grad = analytic.grad(&name)?.clone();
        for i in coords {
            let orig = point.value(&name)?.data()[i];
            probe.get_mut(&name)?.value.data_mut()[i] = orig + h;
            let fp = eval_scalar(build, &probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig - h;
            let fm = eval_scalar(build, &probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let err = (grad.data()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
