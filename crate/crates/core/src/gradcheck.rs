//! Central finite-difference checks of autograd gradients.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

/// Compares the autograd gradient of `f` with respect to every variable in
/// `vars` against central differences with step `h`.
///
/// Returns `||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12)`
/// over all entries of all variables. Variables must be f64.
pub fn relative_error<F>(vars: &[Var], h: f64, f: F) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    if vars.iter().any(|v| v.dtype() != DType::F64) {
        return Err(Error::invalid("gradient checks need f64 variables"));
    }
    let grads = f()?.backward()?;
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for v in vars {
        let analytic: Vec<f64> = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; v.elem_count()],
        };
        let original = v.as_tensor().copy()?;
        let base: Vec<f64> = original.flatten_all()?.to_vec1()?;
        for (i, &a) in analytic.iter().enumerate() {
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            v.set(&Tensor::from_vec(probe.clone(), original.shape(), original.device())?)?;
            let up = f()?.to_scalar::<f64>()?;
            probe[i] = base[i] - h;
            v.set(&Tensor::from_vec(probe, original.shape(), original.device())?)?;
            let down = f()?.to_scalar::<f64>()?;
            let numeric = (up - down) / (2.0 * h);
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        v.set(&original)?;
    }
    Ok(diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12))
}
