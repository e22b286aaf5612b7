//! Contrastive objectives.
//!
//! Losses are evaluated in f64 whatever the feature scalar is, with a
//! max-subtracted log-softmax.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureBatch;
use crate::{Error, Result, Scalar};

/// Mean and directional losses of one symmetric InfoNCE term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossFragment {
    pub mean: f64,
    /// Image-to-text (`a → b`).
    pub i2t: f64,
    /// Text-to-image (`b → a`).
    pub t2i: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub total: f64,
    pub qt: f64,
    pub org: f64,
    pub qt_i2t: f64,
    pub qt_t2i: f64,
    pub org_i2t: f64,
    pub org_t2i: f64,
    pub alpha: f64,
}

impl LossBundle {
    /// Checks `total = alpha·qt + org` and that every component is finite and non-negative.
    pub fn check(&self, tol: f64) -> Result<()> {
        let parts = [self.total, self.qt, self.org, self.qt_i2t, self.qt_t2i, self.org_i2t, self.org_t2i];
        if parts.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::ContractViolation(format!("loss components out of range: {self:?}")));
        }
        let expected = self.alpha * self.qt + self.org;
        if (self.total - expected).abs() > tol {
            return Err(Error::ContractViolation(format!(
                "total {} differs from alpha*qt + org = {expected}",
                self.total
            )));
        }
        Ok(())
    }
}

/// Loss values with gradients of `mean` w.r.t. both (normalized) inputs.
#[derive(Debug, Clone)]
pub struct InfoNceGrad<T> {
    pub loss: LossFragment,
    pub grad_a: Array2<T>,
    pub grad_b: Array2<T>,
}

fn check_inputs<T: Scalar>(a: &FeatureBatch<T>, b: &FeatureBatch<T>, temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("loss.temperature must be positive, got {temperature}")));
    }
    if a.vectors.dim() != b.vectors.dim() {
        return Err(Error::dims("contrastive pair shape", format!("{:?}", a.vectors.dim()), format!("{:?}", b.vectors.dim())));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("contrastive loss needs at least one pair".into()));
    }
    a.check_normalized()?;
    b.check_normalized()
}

fn to_f64<T: Scalar>(x: ArrayView2<T>) -> Array2<f64> {
    x.mapv(|v| v.to_f64_lossy())
}

/// Row-wise log-softmax.
fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn directional(logp: &Array2<f64>) -> f64 {
    let n = logp.nrows();
    -(0..n).map(|i| logp[[i, i]]).sum::<f64>() / n as f64
}

/// `(mean, a→b, b→a)`; each direction is the cross-entropy of the row softmax of
/// `a·bᵀ / temperature` against the diagonal.
pub fn symmetric_info_nce<T: Scalar>(a: &FeatureBatch<T>, b: &FeatureBatch<T>, temperature: f64) -> Result<(f64, f64, f64)> {
    check_inputs(a, b, temperature)?;
    let logits = to_f64(a.vectors.view()).dot(&to_f64(b.vectors.view()).t()) / temperature;
    let ab = directional(&log_softmax_rows(&logits));
    let ba = directional(&log_softmax_rows(&logits.t().to_owned()));
    Ok(((ab + ba) / 2.0, ab, ba))
}

/// [`symmetric_info_nce`] plus the gradient of the mean.
pub fn symmetric_info_nce_grad<T: Scalar>(a: &FeatureBatch<T>, b: &FeatureBatch<T>, temperature: f64) -> Result<InfoNceGrad<T>> {
    check_inputs(a, b, temperature)?;
    let (a64, b64) = (to_f64(a.vectors.view()), to_f64(b.vectors.view()));
    let n = a.len();
    let logits = a64.dot(&b64.t()) / temperature;
    let lp_ab = log_softmax_rows(&logits);
    let lp_ba = log_softmax_rows(&logits.t().to_owned());
    let (ab, ba) = (directional(&lp_ab), directional(&lp_ba));
    // d(mean)/d(logits), combining both softmax directions
    let scale = 0.5 / n as f64;
    let mut d_ab = lp_ab.mapv(f64::exp);
    let mut d_ba = lp_ba.mapv(f64::exp);
    for i in 0..n {
        d_ab[[i, i]] -= 1.0;
        d_ba[[i, i]] -= 1.0;
    }
    let d_logits = (d_ab + d_ba.t()) * scale;
    let grad_a = d_logits.dot(&b64) / temperature;
    let grad_b = d_logits.t().dot(&a64) / temperature;
    Ok(InfoNceGrad {
        loss: LossFragment { mean: (ab + ba) / 2.0, i2t: ab, t2i: ba },
        grad_a: grad_a.mapv(T::lit),
        grad_b: grad_b.mapv(T::lit),
    })
}

fn fragment<T: Scalar>(a: &FeatureBatch<T>, b: &FeatureBatch<T>, temperature: f64) -> Result<LossFragment> {
    let (mean, i2t, t2i) = symmetric_info_nce(a, b, temperature)?;
    Ok(LossFragment { mean, i2t, t2i })
}

/// Original images against composed masked-pair queries.
pub fn query_target_loss<T: Scalar>(target_img: &FeatureBatch<T>, composed: &FeatureBatch<T>, temperature: f64) -> Result<LossFragment> {
    fragment(target_img, composed, temperature)
}

/// Original images against their "a photo of *" prompts.
pub fn original_loss<T: Scalar>(img: &FeatureBatch<T>, prompt: &FeatureBatch<T>, temperature: f64) -> Result<LossFragment> {
    fragment(img, prompt, temperature)
}

pub fn total_loss(qt: LossFragment, org: LossFragment, alpha: f64) -> LossBundle {
    LossBundle {
        total: alpha * qt.mean + org.mean,
        qt: qt.mean,
        org: org.mean,
        qt_i2t: qt.i2t,
        qt_t2i: qt.t2i,
        org_i2t: org.i2t,
        org_t2i: org.t2i,
        alpha,
    }
}

/// `loss.temperature` if set, else the inverse of the backbone's logit scale.
pub fn resolve_temperature(configured: Option<f64>, logit_scale: f64) -> Result<f64> {
    let t = configured.unwrap_or(1.0 / logit_scale);
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Config(format!("loss.temperature must be positive, got {t}")));
    }
    Ok(t)
}

/// Joint row permutation, used to check batch-order invariance.
pub fn permute_rows<T: Scalar>(x: &FeatureBatch<T>, perm: &[usize]) -> FeatureBatch<T> {
    FeatureBatch { vectors: x.vectors.select(Axis(0), perm), normalized: x.normalized }
}
