use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of a scalar function against central
/// differences at `point`.
///
/// `f` receives a fresh graph and the leaf holding the (perturbed) point and
/// must return a scalar variable. It is evaluated `2·numel + 1` times.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let y = f(&mut g, x)?;
    if g.value(y).numel() != 1 {
        return Err(Error::dim(format!("grad_check needs a scalar function, got shape {:?}", g.shape(y))));
    }
    let analytic = g.backward(y)?.get(x).expect("leaf requires grad").data().to_vec();

    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::no_grad();
        let x = g.leaf(p, false);
        let y = f(&mut g, x)?;
        Ok(g.value(y).data()[0])
    };

    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let (fp, fm) = match (eval(plus), eval(minus)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(Error::NonFinite(msg)), _) | (_, Err(Error::NonFinite(msg))) => {
                return Err(Error::NonFinite(format!("grad_check coordinate {i}: {msg}")))
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let d = (fp - fm) / (2.0 * h);
        if !d.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite(format!(
                "grad_check coordinate {i}: analytic {} numeric {d}",
                analytic[i]
            )));
        }
        numeric.push(d);
    }

    let (worst_index, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport { max_rel_err, worst_index, analytic, numeric })
}
