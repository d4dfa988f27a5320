use super::{Result, Tape, Tensor, TensorError, Var};

/// Largest relative disagreement between the tape gradient and central
/// differences of `f` at `point`.
///
/// The relative error per coordinate is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|vars| f(vars[0]), std::slice::from_ref(point), eps)
}

/// [`grad_check`] over several inputs at once; the maximum over all
/// coordinates of all inputs is returned.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    if eps <= 0.0 {
        return Err(super::invalid("grad_check", "epsilon must be positive"));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = pts.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&vars)?;
        if out.value().len() != 1 {
            return Err(TensorError::NotScalar(out.shape()));
        }
        Ok(out.value()[0])
    };

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = points
            .iter()
            .map(|p| tape.leaf(&p.clone().with_grad()))
            .collect();
        let out = f(&vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(points)
            .map(|(v, p)| grads.get(*v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
            .collect()
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = points.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..points[which].numel() {
            let orig = points[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
