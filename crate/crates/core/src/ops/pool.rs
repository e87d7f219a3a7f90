use alloc::format;
use alloc::vec::Vec;

use super::check_grad_shape;
use crate::tensor::{Shape5, Tensor};
use crate::{Error, Result};

/// Argmax positions recorded by [`maxpool3d_fwd`], one flat input index per
/// output element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Shape5,
    pub output_shape: Shape5,
    pub argmax: Vec<usize>,
}

/// Max pooling with cubic window `k` and stride `s`. Extents that do not divide
/// evenly are truncated. Ties go to the first position in `(h, w, d)` scan order.
pub fn maxpool3d_fwd(x: &Tensor, k: usize, s: usize) -> Result<(Tensor, PoolIndices)> {
    let xs = x.shape();
    if k == 0 || s == 0 {
        return Err(Error::Unsupported("pool window and stride must be >= 1".into()));
    }
    if xs.h < k || xs.w < k || xs.d < k {
        return Err(Error::InvalidShape(format!("pool window {k} exceeds spatial extent of {xs}")));
    }
    let out = |e: usize| (e - k) / s + 1;
    let ys = Shape5::new(xs.n, out(xs.h), out(xs.w), out(xs.d), xs.c)?;
    let mut y = Tensor::zeros(ys)?;
    let mut argmax = Vec::with_capacity(ys.len());
    let xv = x.as_slice();
    let yv = y.as_mut_slice();
    for n in 0..ys.n {
        for oh in 0..ys.h {
            for ow in 0..ys.w {
                for od in 0..ys.d {
                    for c in 0..ys.c {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for i in 0..k {
                            for j in 0..k {
                                for l in 0..k {
                                    let idx = xs.index(n, oh * s + i, ow * s + j, od * s + l, c);
                                    if best == usize::MAX || xv[idx] > best_v {
                                        best = idx;
                                        best_v = xv[idx];
                                    }
                                }
                            }
                        }
                        yv[ys.index(n, oh, ow, od, c)] = best_v;
                        argmax.push(best);
                    }
                }
            }
        }
    }
    Ok((y, PoolIndices { input_shape: xs, output_shape: ys, argmax }))
}

/// Routes each output gradient to the recorded argmax position.
pub fn maxpool3d_bwd(indices: &PoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    check_grad_shape(grad_out, indices.output_shape, "maxpool3d_bwd")?;
    if indices.argmax.len() != indices.output_shape.len() {
        return Err(Error::ShapeMismatch("stale pooling indices".into()));
    }
    let mut gx = Tensor::zeros(indices.input_shape)?;
    let gxv = gx.as_mut_slice();
    for (&idx, &g) in indices.argmax.iter().zip(grad_out.as_slice()) {
        gxv[idx] += g;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(n: usize, h: usize, w: usize, d: usize, c: usize) -> Shape5 {
        Shape5::new(n, h, w, d, c).unwrap()
    }

    #[test]
    fn constant_input() {
        let x = Tensor::new_filled(sh(1, 4, 6, 8, 2), 3.0).unwrap();
        let (y, _) = maxpool3d_fwd(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), sh(1, 2, 3, 4, 2));
        assert!(y.as_slice().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn depth_eight_to_one() {
        let mut x = Tensor::new_filled(sh(1, 8, 8, 8, 1), 1.0).unwrap();
        let mut depths = alloc::vec![8];
        for _ in 0..3 {
            x = maxpool3d_fwd(&x, 2, 2).unwrap().0;
            depths.push(x.shape().d);
        }
        assert_eq!(depths, [8, 4, 2, 1]);
        assert!(maxpool3d_fwd(&x, 2, 2).is_err());
    }

    #[test]
    fn block_max_and_routing() {
        let x = Tensor::from_fn(sh(1, 2, 2, 2, 1), |[_, h, w, d, _]| (h * 4 + w * 2 + d + 1) as f64).unwrap();
        let (y, idx) = maxpool3d_fwd(&x, 2, 2).unwrap();
        assert_eq!(y.as_slice(), &[8.0]);
        let g = Tensor::new_filled(y.shape(), 1.0).unwrap();
        let gx = maxpool3d_bwd(&idx, &g).unwrap();
        assert_eq!(gx.as_slice(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn tie_goes_to_first() {
        let x = Tensor::new_filled(sh(1, 2, 2, 2, 1), 5.0).unwrap();
        let (y, idx) = maxpool3d_fwd(&x, 2, 2).unwrap();
        let gx = maxpool3d_bwd(&idx, &Tensor::new_filled(y.shape(), 1.0).unwrap()).unwrap();
        assert_eq!(gx.as_slice()[0], 1.0);
        assert_eq!(gx.sum(), 1.0);
    }

    #[test]
    fn distinct_blocks_single_route() {
        let x = Tensor::from_fn(sh(1, 4, 4, 4, 1), |[_, h, w, d, _]| ((h * 7 + w * 13 + d * 29) % 64) as f64).unwrap();
        let (y, idx) = maxpool3d_fwd(&x, 2, 2).unwrap();
        let gx = maxpool3d_bwd(&idx, &Tensor::new_filled(y.shape(), 1.0).unwrap()).unwrap();
        assert_eq!(gx.sum(), 8.0);
        assert!(gx.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
        let wrong = Tensor::zeros(sh(1, 1, 1, 1, 1)).unwrap();
        assert!(maxpool3d_bwd(&idx, &wrong).is_err());
    }
}
