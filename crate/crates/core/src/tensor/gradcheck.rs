//! Central finite-difference gradient checks at f64.

use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, Tensor, TensorError, Var};

/// Relative error with an absolute floor so that near-zero gradients are
/// compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Worst relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare the tape gradient of `f(inputs)` against central differences.
///
/// `f` must build a scalar from the given leaves. At most `max_probes`
/// coordinates per input are probed (all of them when `None`), chosen
/// with `rng`.
pub fn check<F, R>(
    inputs: &[Tensor<f64>],
    f: F,
    step: f64,
    max_probes: Option<usize>,
    rng: &mut R,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
    R: Rng,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, (&v, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = g
            .grad(v)
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = input.len();
        let idx: Vec<usize> = match max_probes {
            Some(m) if m < n => sample(rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for j in idx {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
            report.checked += 1;
        }
        report.per_input.push(worst);
    }
    Ok(report)
}
