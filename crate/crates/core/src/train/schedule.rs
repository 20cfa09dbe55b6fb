use crate::error::{Error, Result};

/// Poly decay: `base · (1 − epoch/total)^power`.
pub fn poly_lr(epoch: usize, total: usize, base: f64, power: f64) -> Result<f64> {
    if epoch > total {
        return Err(Error::Validation(format!("epoch {epoch} beyond schedule of {total}")));
    }
    if total == 0 {
        return Ok(base);
    }
    Ok(base * (1.0 - epoch as f64 / total as f64).powf(power))
}
