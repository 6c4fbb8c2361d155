use crate::error::{Error, Result};

/// Constant `base` for the first `warmup` steps, then cosine annealing
/// `base/2 · (1 + cos πt)` with `t` the post-warm-up progress.
pub fn cosine_with_warmup(step: usize, total: usize, warmup: usize, base: f64) -> Result<f64> {
    if step >= total {
        return Err(Error::StepOutOfRange { step, total });
    }
    if step < warmup {
        return Ok(base);
    }
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(0.5 * base * (1.0 + (std::f64::consts::PI * t).cos()))
}
