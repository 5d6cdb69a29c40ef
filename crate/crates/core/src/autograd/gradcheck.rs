//! Central finite-difference checks of graph gradients.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` per leaf, 0 when both vanish.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences with step `h` for every leaf in `leaves`.
pub fn check_gradients<F>(leaves: &[Vec<f64>], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.variable(v.clone())).collect();
        let out = build(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::Usage("gradient check needs a scalar output".into()));
        }
        Ok(g.scalar(out))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|v| g.variable(v.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let mut rel_errors = Vec::with_capacity(leaves.len());
    let mut values = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; leaves[li].len()]);
        let mut numeric = vec![0.0; leaves[li].len()];
        for i in 0..leaves[li].len() {
            let orig = values[li][i];
            values[li][i] = orig + h;
            let plus = eval(&values)?;
            values[li][i] = orig - h;
            let minus = eval(&values)?;
            values[li][i] = orig;
            numeric[i] = (plus - minus) / (2.0 * h);
        }
        rel_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck { rel_errors })
}
