use crate::error::{DstError, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Worst relative error between the tape gradient of `f` at `x` and central
/// differences `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h`.
///
/// `f` builds a scalar from the input leaf it is handed. The relative error
/// of each coordinate uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.input_with_grad(x.clone());
    let out = f(&mut g, leaf)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.input(t);
        let out = f(&mut g, leaf)?;
        let v = g.value(out).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DstError::NonFinite("finite_diff_check"))
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |g: &mut Graph, v: Var| {
            let sq = g.mul(v, v)?;
            g.sum(sq)
        };
        let mut g = Graph::new();
        let leaf = g.input_with_grad(x.clone());
        let out = f(&mut g, leaf).unwrap();
        assert_eq!(g.backward(out).unwrap().grad(leaf).unwrap(), &[2.0, 4.0]);
        assert!(finite_diff_check(f, &x, 1e-4).unwrap() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let err = finite_diff_check(|g, _| Ok(g.input(Tensor::scalar(4.0))), &x, 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }
}
