use alloc::vec;
use alloc::vec::Vec;

use super::{check_grad_shape, InstanceNormParams};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Statistics saved by [`instance_norm_fwd`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormCache {
    /// Normalized input before the affine map.
    pub x_hat: Tensor,
    /// Per `(n, c)` mean, indexed `n * c + channel`.
    pub mean: Vec<f64>,
    /// Per `(n, c)` biased variance.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalizes every `(n, c)` slab over its `h * w * d` voxels with the biased
/// variance, then applies `gamma * x_hat + beta`.
pub fn instance_norm_fwd(x: &Tensor, p: &InstanceNormParams) -> Result<(Tensor, NormCache)> {
    let s = x.shape();
    if p.channels() != s.c || p.beta.len() != s.c {
        return Err(Error::ShapeMismatch(alloc::format!(
            "norm has {} channels, input {s}",
            p.channels()
        )));
    }
    if p.epsilon.is_nan() || p.epsilon <= 0.0 {
        return Err(Error::Unsupported("epsilon must be positive".into()));
    }
    let c = s.c;
    let m = s.spatial();
    let per_sample = m * c;
    let xv = x.as_slice();
    let mut mean = vec![0.0; s.n * c];
    let mut var = vec![0.0; s.n * c];
    for n in 0..s.n {
        let slab = &xv[n * per_sample..(n + 1) * per_sample];
        let mu = &mut mean[n * c..(n + 1) * c];
        for row in slab.chunks_exact(c) {
            for (a, &v) in mu.iter_mut().zip(row) {
                *a += v;
            }
        }
        for a in mu.iter_mut() {
            *a /= m as f64;
        }
        let vr = &mut var[n * c..(n + 1) * c];
        for row in slab.chunks_exact(c) {
            for ((a, &v), &u) in vr.iter_mut().zip(row).zip(mu.iter()) {
                *a += (v - u) * (v - u);
            }
        }
        for a in vr.iter_mut() {
            *a /= m as f64;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / libm::sqrt(v + p.epsilon)).collect();
    let mut x_hat = x.clone();
    let mut y = x.clone();
    {
        let xh = x_hat.as_mut_slice();
        let yv = y.as_mut_slice();
        for n in 0..s.n {
            let range = n * per_sample..(n + 1) * per_sample;
            let stats = n * c..(n + 1) * c;
            for (hrow, yrow) in xh[range.clone()].chunks_exact_mut(c).zip(yv[range].chunks_exact_mut(c)) {
                for ch in 0..c {
                    let k = stats.start + ch;
                    let h = (hrow[ch] - mean[k]) * inv_std[k];
                    hrow[ch] = h;
                    yrow[ch] = p.gamma[ch] * h + p.beta[ch];
                }
            }
        }
    }
    y.ensure_finite("instance norm output")?;
    Ok((y, NormCache { x_hat, mean, var, inv_std }))
}

/// Input gradient through the normalization, including the dependence of the
/// mean and variance on `x`. Accumulates `gamma`/`beta` gradients into `p`.
pub fn instance_norm_bwd(saved: &NormCache, p: &mut InstanceNormParams, grad_out: &Tensor) -> Result<Tensor> {
    let s = saved.x_hat.shape();
    check_grad_shape(grad_out, s, "instance_norm_bwd")?;
    if p.channels() != s.c {
        return Err(Error::ShapeMismatch("norm parameters do not match saved statistics".into()));
    }
    let c = s.c;
    let m = s.spatial() as f64;
    let per_sample = s.spatial() * c;
    let xh = saved.x_hat.as_slice();
    let gv = grad_out.as_slice();
    let mut gx = Tensor::zeros(s)?;
    let gxv = gx.as_mut_slice();
    for n in 0..s.n {
        let range = n * per_sample..(n + 1) * per_sample;
        // per channel: sum(g), sum(g * x_hat)
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (grow, hrow) in gv[range.clone()].chunks_exact(c).zip(xh[range.clone()].chunks_exact(c)) {
            for ch in 0..c {
                sum_g[ch] += grow[ch];
                sum_gx[ch] += grow[ch] * hrow[ch];
            }
        }
        for ch in 0..c {
            p.beta_grad[ch] += sum_g[ch];
            p.gamma_grad[ch] += sum_gx[ch];
        }
        // d x_hat = gamma * g
        // dx = inv_std / m * (m * dxh - sum(dxh) - x_hat * sum(dxh * x_hat))
        for ((orow, grow), hrow) in gxv[range.clone()]
            .chunks_exact_mut(c)
            .zip(gv[range.clone()].chunks_exact(c))
            .zip(xh[range].chunks_exact(c))
        {
            for ch in 0..c {
                let gamma = p.gamma[ch];
                let k = n * c + ch;
                orow[ch] = gamma * saved.inv_std[k] / m
                    * (m * grow[ch] - sum_g[ch] - hrow[ch] * sum_gx[ch]);
            }
        }
    }
    gx.ensure_finite("instance norm input gradient")?;
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape5;

    #[test]
    fn four_values() {
        let x = Tensor::from_vec(Shape5::new(1, 2, 2, 1, 1).unwrap(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = InstanceNormParams::identity(1);
        let (y, cache) = instance_norm_fwd(&x, &p).unwrap();
        assert_eq!(cache.mean, vec![2.5]);
        assert_eq!(cache.var, vec![1.25]);
        for (i, v) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            let expected = (v - 2.5) / libm::sqrt(1.25 + DEFAULT_EPSILON);
            assert!((y.as_slice()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_slab_maps_to_beta() {
        let x = Tensor::new_filled(Shape5::new(2, 3, 3, 2, 2).unwrap(), 7.0).unwrap();
        let mut p = InstanceNormParams::identity(2);
        p.beta = vec![0.5, -1.0];
        let (y, _) = instance_norm_fwd(&x, &p).unwrap();
        for (i, &v) in y.as_slice().iter().enumerate() {
            assert_eq!(v, if i % 2 == 0 { 0.5 } else { -1.0 });
        }
    }

    #[test]
    fn statistics_after_normalization() {
        let x = Tensor::from_fn(Shape5::new(2, 3, 4, 5, 3).unwrap(), |[n, h, w, d, c]| {
            3.0 * libm::sin((n * 131 + h * 17 + w * 5 + d * 3 + c * 7) as f64) * (c + 1) as f64 + n as f64
        })
        .unwrap();
        let (y, _) = instance_norm_fwd(&x, &InstanceNormParams::identity(3)).unwrap();
        let s = y.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                let vals: Vec<f64> = (0..s.spatial())
                    .map(|v| y.as_slice()[(n * s.spatial() + v) * s.c + c])
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() < 1e-10);
                // v / (v + eps) is within 1e-5 of 1 once the input variance exceeds ~1
                assert!((var - 1.0).abs() < 1e-5, "var {var}");
            }
        }
    }

    #[test]
    fn beta_gradient_is_sum() {
        let s = Shape5::new(1, 2, 2, 2, 2).unwrap();
        let x = Tensor::from_fn(s, |[_, h, w, d, c]| (h + 2 * w + 3 * d + c) as f64).unwrap();
        let mut p = InstanceNormParams::identity(2);
        let (_, cache) = instance_norm_fwd(&x, &p).unwrap();
        let g = Tensor::from_fn(s, |[_, h, _, _, c]| (h + 1) as f64 * (c + 1) as f64).unwrap();
        instance_norm_bwd(&cache, &mut p, &g).unwrap();
        assert_eq!(p.beta_grad, vec![12.0, 24.0]);
        let expected: f64 = (0..8)
            .map(|v| g.as_slice()[v * 2] * cache.x_hat.as_slice()[v * 2])
            .sum();
        assert!((p.gamma_grad[0] - expected).abs() < 1e-12);
    }
}
