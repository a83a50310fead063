//! Central-difference gradient checking for scalar-valued tensor functions.

use super::Tensor;
use crate::error::Result;

/// Compare analytic gradients of `f` against central finite differences with
/// step `h`. Returns the maximum over all input coordinates of
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[(Vec<usize>, Vec<f64>)], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, vals)| Tensor::from_vec(shape.clone(), vals.clone(), true))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |probe: usize, coord: usize, delta: f64| -> Result<f64> {
        let leaves: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, (shape, vals))| {
                let mut v = vals.clone();
                if i == probe {
                    v[coord] += delta;
                }
                Tensor::from_vec(shape.clone(), v, false)
            })
            .collect::<Result<_>>()?;
        Ok(f(&leaves)?.item())
    };

    let mut worst = 0.0f64;
    for (i, (_, vals)) in inputs.iter().enumerate() {
        for c in 0..vals.len() {
            let plus = eval(i, c, h)?;
            let minus = eval(i, c, -h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i][c];
            let err = (a - numeric).abs() / 1e-12f64.max(a.abs() + numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
