use candle_core::Tensor;

use crate::error::{Error, Result};

/// Batch-averaged `sum (D(real) - 1)^2 + sum D(fake)^2`. Scores are `(B, ...)`.
pub fn lsgan_d_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    if real_scores.dims() != fake_scores.dims() {
        return Err(Error::Shape(format!(
            "score shapes differ: {:?} vs {:?}",
            real_scores.dims(),
            fake_scores.dims()
        )));
    }
    let b = real_scores.dim(0)? as f64;
    let real = (real_scores - 1.0)?.sqr()?.sum_all()?;
    let fake = fake_scores.sqr()?.sum_all()?;
    Ok(((real + fake)? / b)?)
}

/// Batch-averaged `sum (D(fake) - 1)^2`.
pub fn lsgan_g_loss(fake_scores: &Tensor) -> Result<Tensor> {
    let b = fake_scores.dim(0)? as f64;
    Ok(((fake_scores - 1.0)?.sqr()?.sum_all()? / b)?)
}

/// `(1/L) sum_l mean |D_l(real) - D_l(fake)|`; the mean over a `(B, ...)`
/// map is the batch average of the per-item `1/d_l`-normalized L1 norms.
pub fn feature_matching_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!("{} vs {} feature maps", real.len(), fake.len())));
    }
    let mut total: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        if r.dims() != f.dims() {
            return Err(Error::Shape(format!("feature map {:?} vs {:?}", r.dims(), f.dims())));
        }
        let term = (r - f)?.abs()?.mean_all()?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    let l = real.len() as f64;
    Ok((total.expect("nonempty") / l)?)
}
