use super::{Parameter, Tensor};

/// Central-difference gradient `(L(θ+h) − L(θ−h)) / 2h` for every component
/// of every parameter. Parameter values are restored before returning.
pub fn finite_difference_gradient<F>(params: &mut [Parameter], mut loss_fn: F, h: f64) -> Vec<Tensor>
where
    F: FnMut(&[Parameter]) -> f64,
{
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut grad = Tensor::zeros(params[pi].value.shape());
        for i in 0..grad.len() {
            let orig = params[pi].value.data()[i];
            params[pi].value.data_mut()[i] = orig + h;
            let up = loss_fn(params);
            params[pi].value.data_mut()[i] = orig - h;
            let down = loss_fn(params);
            params[pi].value.data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut p = vec![Parameter::new("t", Tensor::scalar(3.0))];
        let g = finite_difference_gradient(&mut p, |ps| ps[0].value.data()[0].powi(2), 1e-5);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-8);
        assert_eq!(p[0].value.data(), &[3.0]);
    }

    #[test]
    fn linear_is_exact() {
        let mut p = vec![Parameter::new("t", Tensor::scalar(0.0))];
        let g = finite_difference_gradient(&mut p, |ps| 5.0 * ps[0].value.data()[0], 0.5);
        assert_eq!(g[0].data()[0], 5.0);
    }
}
