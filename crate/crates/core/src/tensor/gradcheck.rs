use super::{Graph, Tensor, TensorError, Var};

/// Compare reverse-mode gradients of a scalar function with central
/// differences. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        scalar(&g, y)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = f(&mut g, &vars)?;
    scalar(&g, y)?;
    g.backward(y)?;

    let mut worst = 0.0f64;
    let mut values = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            values[which].data_mut()[i] = orig + step;
            let plus = eval(&values)?;
            values[which].data_mut()[i] = orig - step;
            let minus = eval(&values)?;
            values[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn scalar(g: &Graph<f64>, y: Var) -> Result<f64, TensorError> {
    let v = g.value(y);
    if v.numel() != 1 {
        return Err(TensorError::invalid(
            "grad_check",
            format!("function must return a scalar, got shape {:?}", v.shape()),
        ));
    }
    Ok(v.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[2.0, 4.0]);

        let err = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum(sq)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn two_class_cross_entropy_at_zero_logits() {
        let x = Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
        let f = |g: &mut Graph<f64>, v| g.smoothed_cross_entropy(v, &[0], None, 0.0);
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let l = f(&mut g, v).unwrap();
        g.backward(l).unwrap();
        // softmax - onehot = [0.5 - 1, 0.5]
        assert_eq!(g.grad(v).unwrap().data(), &[-0.5, 0.5]);
        assert!(grad_check(f, &x, 1e-4).unwrap() < 1e-8);
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        assert!(grad_check(|g, v| g.scale(v, 2.0), &x, 1e-4).is_err());
    }
}
