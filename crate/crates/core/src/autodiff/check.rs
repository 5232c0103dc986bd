use super::{AutodiffError, Graph, Tensor, Var};

/// Below this magnitude a gradient entry is compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Result of a gradient check.
#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Evaluates `f` on a fresh graph at `point`, returning the scalar value.
fn eval<F>(f: &F, point: &Tensor, requires_grad: bool) -> Result<(Graph, Var, Var), AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), requires_grad);
    let y = f(&mut g, x)?;
    if !g.value(y)?.is_scalar() {
        return Err(AutodiffError::NonScalarOutput {
            shape: g.value(y)?.shape().to_vec(),
        });
    }
    Ok((g, x, y))
}

/// Compares the reverse-mode gradient of `f` at `point` with central finite
/// differences of width `step`, coordinate by coordinate.
pub fn check_gradients<F>(f: F, point: &Tensor, step: f64) -> Result<GradientCheck, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(AutodiffError::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let (mut g, x, y) = eval(&f, point, true)?;
    g.backward(y)?;
    let analytic = g.grad(x)?.data().to_vec();

    let mut numeric = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = evaluate_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = evaluate_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }

    let (worst_index, max_relative_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradientCheck {
        max_relative_error,
        worst_index,
        analytic,
        numeric,
    })
}

fn evaluate_scalar<F>(f: &F, point: &Tensor) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    let (g, _, y) = eval(f, point, false)?;
    let v = g.value(y)?.item();
    if !v.is_finite() {
        return Err(AutodiffError::NonFinite { op: "finite-difference probe" });
    }
    Ok(v)
}
