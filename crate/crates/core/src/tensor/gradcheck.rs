use super::{Tape, Tensor, TensorError, Var};

/// Agreement between backward-pass gradients and central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` per input.
    pub relative_errors: Vec<f64>,
    pub max_abs_errors: Vec<f64>,
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Compare the gradient of `f` at `inputs` against central finite differences
/// with step `h`. `f` must build a scalar loss from the given leaves.
pub fn check_gradients<F, E>(inputs: &[Tensor<f64>], h: f64, mut f: F) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut eval = |values: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss);
        value
            .item()
            .ok_or_else(|| TensorError::NonScalarLoss { shape: value.shape().to_vec() }.into())
    };

    let mut work = inputs.to_vec();
    let mut evaluations = 0;
    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut max_abs_errors = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let original = work[i].data()[j];
            work[i].data_mut()[j] = original + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = original - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = original;
            evaluations += 2;
            *slot = (plus - minus) / (2.0 * h);
        }
        let diff = norm(grad.iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(grad.iter().copied()).max(norm(numeric.iter().copied())).max(1e-8);
        relative_errors.push(diff / scale);
        max_abs_errors.push(grad.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max));
    }
    Ok(GradCheckReport { relative_errors, max_abs_errors, evaluations })
}
