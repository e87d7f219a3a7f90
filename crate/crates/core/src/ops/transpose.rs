use alloc::format;

use super::{check_grad_shape, ConvParams, ConvSpec};
use crate::tensor::Tensor;
use crate::{Error, Result};

fn require_transposed(spec: &ConvSpec) -> Result<()> {
    if !spec.transposed {
        return Err(Error::Unsupported(format!("expected a transposed conv, got {spec:?}")));
    }
    Ok(())
}

/// Adjoint of the `Valid` stride-`S` convolution with the same kernel: every
/// input voxel scatters `x[o] * w[t]` to output `o * S + t`. With the default
/// 2x2x2 stride-2 kernel the output extent is exactly twice the input.
pub fn conv_transpose3d_fwd(x: &Tensor, spec: &ConvSpec, p: &ConvParams) -> Result<Tensor> {
    require_transposed(spec)?;
    p.check(spec)?;
    let xs = x.shape();
    let ys = spec.output_shape(xs)?;
    let mut y = Tensor::zeros(ys)?;
    let (ci, co, s) = (spec.c_in, spec.c_out, spec.stride);
    {
        let yv = y.as_mut_slice();
        for chunk in yv.chunks_exact_mut(co) {
            chunk.copy_from_slice(&p.bias);
        }
    }
    let xv = x.as_slice();
    let wv = p.weights.as_slice();
    let yv = y.as_mut_slice();
    for n in 0..xs.n {
        for h in 0..xs.h {
            for w in 0..xs.w {
                for d in 0..xs.d {
                    let xo = xs.index(n, h, w, d, 0);
                    let xrow = &xv[xo..xo + ci];
                    for i in 0..spec.kh {
                        for j in 0..spec.kw {
                            for l in 0..spec.kd {
                                let yo = ys.index(n, h * s + i, w * s + j, d * s + l, 0);
                                let wo = ((i * spec.kw + j) * spec.kd + l) * ci * co;
                                let acc = &mut yv[yo..yo + co];
                                for (&xa, wr) in xrow.iter().zip(wv[wo..wo + ci * co].chunks_exact(co)) {
                                    for (a, &wt) in acc.iter_mut().zip(wr) {
                                        *a += xa * wt;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y.ensure_finite("transposed conv output")?;
    Ok(y)
}

/// Returns the input gradient and accumulates parameter gradients into `p`.
pub fn conv_transpose3d_bwd(x: &Tensor, spec: &ConvSpec, p: &mut ConvParams, grad_out: &Tensor) -> Result<Tensor> {
    require_transposed(spec)?;
    p.check(spec)?;
    let xs = x.shape();
    let ys = spec.output_shape(xs)?;
    check_grad_shape(grad_out, ys, "conv_transpose3d_bwd")?;
    let (ci, co, s) = (spec.c_in, spec.c_out, spec.stride);
    let gv = grad_out.as_slice();
    for chunk in gv.chunks_exact(co) {
        for (b, &g) in p.bias_grad.iter_mut().zip(chunk) {
            *b += g;
        }
    }
    let mut gx = Tensor::zeros(xs)?;
    let xv = x.as_slice();
    let gxv = gx.as_mut_slice();
    let ConvParams { weights, weight_grad, .. } = p;
    let wv = weights.as_slice();
    let gwv = weight_grad.as_mut_slice();
    for n in 0..xs.n {
        for h in 0..xs.h {
            for w in 0..xs.w {
                for d in 0..xs.d {
                    let xo = xs.index(n, h, w, d, 0);
                    for i in 0..spec.kh {
                        for j in 0..spec.kw {
                            for l in 0..spec.kd {
                                let go = ys.index(n, h * s + i, w * s + j, d * s + l, 0);
                                let g = &gv[go..go + co];
                                let wo = ((i * spec.kw + j) * spec.kd + l) * ci * co;
                                for a in 0..ci {
                                    let wr = &wv[wo + a * co..wo + (a + 1) * co];
                                    let mut dot = 0.0;
                                    for (&wt, &gb) in wr.iter().zip(g) {
                                        dot += wt * gb;
                                    }
                                    gxv[xo + a] += dot;
                                    let xa = xv[xo + a];
                                    let gwr = &mut gwv[wo + a * co..wo + (a + 1) * co];
                                    for (gw, &gb) in gwr.iter_mut().zip(g) {
                                        *gw += xa * gb;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx.ensure_finite("transposed conv input gradient")?;
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{conv3d_bwd, conv3d_fwd, conv_transpose3d_oracle};
    use crate::tensor::Shape5;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sh(n: usize, h: usize, w: usize, d: usize, c: usize) -> Shape5 {
        Shape5::new(n, h, w, d, c).unwrap()
    }

    #[test]
    fn doubling_shape() {
        let spec = ConvSpec::upsample(8, 3);
        let x = Tensor::new_filled(sh(1, 4, 4, 1, 8), 0.5).unwrap();
        let p = ConvParams::zeros(&spec).unwrap();
        assert_eq!(conv_transpose3d_fwd(&x, &spec, &p).unwrap().shape(), sh(1, 8, 8, 2, 3));
        assert!(conv_transpose3d_fwd(&Tensor::zeros(sh(1, 2, 2, 2, 2)).unwrap(), &spec, &p).is_err());
    }

    #[test]
    fn one_hot_stamp() {
        let spec = ConvSpec::upsample(1, 1);
        let p = ConvParams::from_parts(&spec, vec![1.0; 8], vec![0.0]).unwrap();
        let mut x = Tensor::zeros(sh(1, 3, 3, 3, 1)).unwrap();
        x.set(0, 1, 2, 0, 0, 1.0);
        let y = conv_transpose3d_fwd(&x, &spec, &p).unwrap();
        assert_eq!(y.sum(), 8.0);
        for dh in 0..2 {
            for dw in 0..2 {
                for dd in 0..2 {
                    assert_eq!(y.get(0, 2 + dh, 4 + dw, dd, 0), 1.0);
                }
            }
        }
    }

    #[test]
    fn equals_strided_conv_input_gradient() {
        // conv_transpose(y) with kernel W equals conv3d_bwd's grad_x for the
        // stride-2 conv whose weight swaps the channel roles.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (cx, cy) = (2, 3);
        let t_spec = ConvSpec::upsample(cy, cx);
        let len = t_spec.weight_shape().unwrap().len();
        let w: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tp = ConvParams::from_parts(&t_spec, w.clone(), vec![0.0; cx]).unwrap();

        let c_spec = ConvSpec::new((2, 2, 2), 2, cx, cy).valid();
        let mut cw = vec![0.0; len];
        for tap in 0..8 {
            for a in 0..cy {
                for b in 0..cx {
                    cw[tap * cx * cy + b * cy + a] = w[tap * cx * cy + a * cx + b];
                }
            }
        }
        let mut cp = ConvParams::from_parts(&c_spec, cw, vec![0.0; cy]).unwrap();

        let x = Tensor::from_fn(sh(1, 6, 4, 2, cx), |_| rng.gen_range(-1.0..1.0)).unwrap();
        let y = Tensor::from_fn(sh(1, 3, 2, 1, cy), |_| rng.gen_range(-1.0..1.0)).unwrap();
        let via_bwd = conv3d_bwd(&x, &c_spec, &mut cp, &y).unwrap();
        let via_t = conv_transpose3d_fwd(&y, &t_spec, &tp).unwrap();
        assert!(via_bwd.max_abs_diff(&via_t).unwrap() < 1e-12);

        let ax = conv3d_fwd(&x, &c_spec, &cp).unwrap();
        let lhs = ax.dot(&y).unwrap();
        let rhs = x.dot(&via_t).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);

        let oracle = conv_transpose3d_oracle(&y, &t_spec, &tp).unwrap();
        assert!(oracle.max_abs_diff(&via_t).unwrap() < 1e-12);
    }
}
