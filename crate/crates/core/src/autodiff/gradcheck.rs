use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Maximum relative discrepancy between reverse-mode and central-difference
/// gradients of a scalar function `f` at `x`.
///
/// Per coordinate the error is `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let out = f(&mut g, v)?;
        let y = g.value(out).item();
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("grad_check objective = {y}")));
        }
        Ok(y)
    };

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite("grad_check objective at base point".into()));
    }
    let analytic = g.backward(out)?.get_or_zeros(v, x.len());

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let ad = analytic[i];
        let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
