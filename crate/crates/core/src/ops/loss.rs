use alloc::format;

use crate::tensor::Tensor;
use crate::{Error, Result};

fn require_two_channels(t: &Tensor, what: &str) -> Result<()> {
    if t.shape().c != 2 {
        return Err(Error::ShapeMismatch(format!("{what} needs 2 channels, got {}", t.shape())));
    }
    Ok(())
}

/// Per-voxel softmax over the two class channels, stabilized by subtracting the max.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    require_two_channels(logits, "softmax")?;
    let mut p = logits.clone();
    for row in p.as_mut_slice().chunks_exact_mut(2) {
        let m = f64::max(row[0], row[1]);
        let e0 = libm::exp(row[0] - m);
        let e1 = libm::exp(row[1] - m);
        let z = e0 + e1;
        row[0] = e0 / z;
        row[1] = e1 / z;
    }
    Ok(p)
}

/// Expands a `{0, 1}` single-channel label tensor into two one-hot channels
/// (background first).
pub fn one_hot(labels: &Tensor) -> Result<Tensor> {
    let s = labels.shape();
    if s.c != 1 {
        return Err(Error::ShapeMismatch(format!("one_hot expects 1 channel, got {s}")));
    }
    let mut out = alloc::vec::Vec::with_capacity(labels.len() * 2);
    for &v in labels.as_slice() {
        match v {
            0.0 => out.extend_from_slice(&[1.0, 0.0]),
            1.0 => out.extend_from_slice(&[0.0, 1.0]),
            v => return Err(Error::InvalidData(format!("label value {v} is not 0 or 1"))),
        }
    }
    Tensor::from_vec(s.with_c(2), out)
}

/// Binary cross-entropy of the softmax foreground probability, averaged over
/// every voxel of every batch item. Returns the loss and the probabilities.
pub fn softmax_xent_fwd(logits: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
    require_two_channels(logits, "logits")?;
    if labels.shape() != logits.shape() {
        return Err(Error::ShapeMismatch(format!("labels {} vs logits {}", labels.shape(), logits.shape())));
    }
    logits.ensure_finite("logits")?;
    let mut total = 0.0;
    for (z, y) in logits.as_slice().chunks_exact(2).zip(labels.as_slice().chunks_exact(2)) {
        let hot = (y[0] == 1.0 && y[1] == 0.0) || (y[0] == 0.0 && y[1] == 1.0);
        if !hot {
            return Err(Error::InvalidData(format!("label ({}, {}) is not one-hot", y[0], y[1])));
        }
        // -(y log p1 + (1 - y) log p0) with y the foreground indicator;
        // -log p_k = softplus(z_other - z_k)
        let t = if y[1] == 1.0 { z[0] - z[1] } else { z[1] - z[0] };
        total += f64::max(t, 0.0) + libm::log1p(libm::exp(-libm::fabs(t)));
    }
    let voxels = (logits.len() / 2) as f64;
    Ok((total / voxels, softmax(logits)?))
}

/// Gradient of the mean loss with respect to the logits: `(p - y) / V`.
pub fn softmax_xent_bwd(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    require_two_channels(probs, "probabilities")?;
    if labels.shape() != probs.shape() {
        return Err(Error::ShapeMismatch(format!("labels {} vs probs {}", labels.shape(), probs.shape())));
    }
    let voxels = (probs.len() / 2) as f64;
    let mut g = probs.clone();
    for (gv, &y) in g.as_mut_slice().iter_mut().zip(labels.as_slice()) {
        *gv = (*gv - y) / voxels;
    }
    Ok(g)
}
