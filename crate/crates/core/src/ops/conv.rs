use alloc::format;
use alloc::vec;

use super::{check_grad_shape, AxisPlan, ConvParams, ConvSpec};
use crate::tensor::{Shape5, Tensor};
use crate::{Error, Result};

/// Tap range `[lo, hi)` along one axis for output position `o`, and the input
/// coordinate of tap `lo`.
#[inline]
fn tap_range(o: usize, stride: usize, plan: AxisPlan, k: usize, extent: usize) -> (usize, usize, usize) {
    let origin = o * stride;
    let lo = plan.front.saturating_sub(origin);
    let hi = k.min((extent + plan.front).saturating_sub(origin));
    let first = (origin + lo).saturating_sub(plan.front);
    (lo, hi.max(lo), first)
}

/// Borrowed kernel bank in `[tap][c_in][c_out]` order.
#[derive(Clone, Copy)]
struct Kernel<'a> {
    w: &'a [f64],
    k: [usize; 3],
    ci: usize,
    co: usize,
    stride: usize,
}

/// Generic correlation loop; `CO` is the output channel count when it is one of
/// the specialised widths, so the accumulator lives in registers.
fn correlate<const CO: usize>(x: &Tensor, ker: Kernel, bias: &[f64], plan: [AxisPlan; 3], y: &mut Tensor) {
    debug_assert_eq!(CO, ker.co);
    let [ph, pw, pd] = plan;
    let [kh, kw, kd] = ker.k;
    let xs = x.shape();
    let ys = y.shape();
    let (ci, s) = (ker.ci, ker.stride);
    let xv = x.as_slice();
    let yv = y.as_mut_slice();
    let bias: [f64; CO] = bias.try_into().expect("bias length checked");
    for n in 0..xs.n {
        for oh in 0..ys.h {
            let (i0, i1, ih0) = tap_range(oh, s, ph, kh, xs.h);
            for ow in 0..ys.w {
                let (j0, j1, iw0) = tap_range(ow, s, pw, kw, xs.w);
                for od in 0..ys.d {
                    let (l0, l1, id0) = tap_range(od, s, pd, kd, xs.d);
                    let mut acc = bias;
                    let run = (l1 - l0) * ci;
                    for i in i0..i1 {
                        for j in j0..j1 {
                            let xo = xs.index(n, ih0 + i - i0, iw0 + j - j0, id0, 0);
                            let wo = ((i * kw + j) * kd + l0) * ci * CO;
                            let xrow = &xv[xo..xo + run];
                            let wrow = &ker.w[wo..wo + run * CO];
                            for (&xa, wr) in xrow.iter().zip(wrow.chunks_exact(CO)) {
                                let wr: &[f64; CO] = wr.try_into().unwrap();
                                for k in 0..CO {
                                    acc[k] += xa * wr[k];
                                }
                            }
                        }
                    }
                    let yo = ys.index(n, oh, ow, od, 0);
                    yv[yo..yo + CO].copy_from_slice(&acc);
                }
            }
        }
    }
}

fn correlate_dyn(x: &Tensor, ker: Kernel, bias: &[f64], plan: [AxisPlan; 3], y: &mut Tensor) {
    let [ph, pw, pd] = plan;
    let [kh, kw, kd] = ker.k;
    let xs = x.shape();
    let ys = y.shape();
    let (ci, co, s) = (ker.ci, ker.co, ker.stride);
    let xv = x.as_slice();
    let yv = y.as_mut_slice();
    for n in 0..xs.n {
        for oh in 0..ys.h {
            let (i0, i1, ih0) = tap_range(oh, s, ph, kh, xs.h);
            for ow in 0..ys.w {
                let (j0, j1, iw0) = tap_range(ow, s, pw, kw, xs.w);
                for od in 0..ys.d {
                    let (l0, l1, id0) = tap_range(od, s, pd, kd, xs.d);
                    let yo = ys.index(n, oh, ow, od, 0);
                    let acc = &mut yv[yo..yo + co];
                    acc.copy_from_slice(bias);
                    let run = (l1 - l0) * ci;
                    for i in i0..i1 {
                        for j in j0..j1 {
                            let xo = xs.index(n, ih0 + i - i0, iw0 + j - j0, id0, 0);
                            let wo = ((i * kw + j) * kd + l0) * ci * co;
                            let xrow = &xv[xo..xo + run];
                            let wrow = &ker.w[wo..wo + run * co];
                            for (&xa, wr) in xrow.iter().zip(wrow.chunks_exact(co)) {
                                for (a, &w) in acc.iter_mut().zip(wr) {
                                    *a += xa * w;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dispatch_correlate(x: &Tensor, ker: Kernel, bias: &[f64], plan: [AxisPlan; 3], y: &mut Tensor) {
    match ker.co {
        1 => correlate::<1>(x, ker, bias, plan, y),
        2 => correlate::<2>(x, ker, bias, plan, y),
        4 => correlate::<4>(x, ker, bias, plan, y),
        8 => correlate::<8>(x, ker, bias, plan, y),
        16 => correlate::<16>(x, ker, bias, plan, y),
        32 => correlate::<32>(x, ker, bias, plan, y),
        64 => correlate::<64>(x, ker, bias, plan, y),
        128 => correlate::<128>(x, ker, bias, plan, y),
        _ => correlate_dyn(x, ker, bias, plan, y),
    }
}

/// Stride-`S` cross-correlation plus per-channel bias. No activation.
pub fn conv3d_fwd(x: &Tensor, spec: &ConvSpec, p: &ConvParams) -> Result<Tensor> {
    p.check(spec)?;
    let xs = x.shape();
    let plan = spec.plan(xs)?;
    let ys = Shape5::new(xs.n, plan[0].out, plan[1].out, plan[2].out, spec.c_out)?;
    let mut y = Tensor::zeros(ys)?;
    let ker = Kernel {
        w: p.weights.as_slice(),
        k: [spec.kh, spec.kw, spec.kd],
        ci: spec.c_in,
        co: spec.c_out,
        stride: spec.stride,
    };
    dispatch_correlate(x, ker, &p.bias, plan, &mut y);
    y.ensure_finite("conv3d output")?;
    Ok(y)
}

/// Returns the input gradient and accumulates weight/bias gradients into `p`.
pub fn conv3d_bwd(x: &Tensor, spec: &ConvSpec, p: &mut ConvParams, grad_out: &Tensor) -> Result<Tensor> {
    p.check(spec)?;
    let xs = x.shape();
    let plan = spec.plan(xs)?;
    let ys = Shape5::new(xs.n, plan[0].out, plan[1].out, plan[2].out, spec.c_out)?;
    check_grad_shape(grad_out, ys, "conv3d_bwd")?;
    let mut gx = Tensor::zeros(xs)?;
    if spec.stride == 1 {
        input_grad_stride1(spec, &p.weights, plan, grad_out, &mut gx);
    }
    let scatter_x = spec.stride != 1;
    match spec.c_out {
        1 => bwd_fixed::<1>(x, spec, p, plan, grad_out, &mut gx, scatter_x),
        2 => bwd_fixed::<2>(x, spec, p, plan, grad_out, &mut gx, scatter_x),
        4 => bwd_fixed::<4>(x, spec, p, plan, grad_out, &mut gx, scatter_x),
        8 => bwd_fixed::<8>(x, spec, p, plan, grad_out, &mut gx, scatter_x),
        16 => bwd_fixed::<16>(x, spec, p, plan, grad_out, &mut gx, scatter_x),
        32 => bwd_fixed::<32>(x, spec, p, plan, grad_out, &mut gx, scatter_x),
        64 => bwd_fixed::<64>(x, spec, p, plan, grad_out, &mut gx, scatter_x),
        _ => bwd_dyn(x, spec, p, plan, grad_out, &mut gx, scatter_x),
    }
    gx.ensure_finite("conv3d input gradient")?;
    Ok(gx)
}

/// For stride 1 the input gradient is itself a correlation of `grad_out` with
/// the kernel flipped in space and transposed in channels, padded by
/// `k - 1 - front` in front.
fn input_grad_stride1(spec: &ConvSpec, weights: &Tensor, plan: [AxisPlan; 3], grad_out: &Tensor, gx: &mut Tensor) {
    let (kh, kw, kd, ci, co) = (spec.kh, spec.kw, spec.kd, spec.c_in, spec.c_out);
    let w = weights.as_slice();
    let mut flipped = vec![0.0; w.len()];
    for i in 0..kh {
        for j in 0..kw {
            for l in 0..kd {
                let src = ((i * kw + j) * kd + l) * ci * co;
                let dst = (((kh - 1 - i) * kw + (kw - 1 - j)) * kd + (kd - 1 - l)) * ci * co;
                for a in 0..ci {
                    for b in 0..co {
                        flipped[dst + b * ci + a] = w[src + a * co + b];
                    }
                }
            }
        }
    }
    let xs = gx.shape();
    let flip_plan = [
        AxisPlan { front: kh - 1 - plan[0].front, out: xs.h },
        AxisPlan { front: kw - 1 - plan[1].front, out: xs.w },
        AxisPlan { front: kd - 1 - plan[2].front, out: xs.d },
    ];
    let ker = Kernel { w: &flipped, k: [kh, kw, kd], ci: co, co: ci, stride: 1 };
    let zero = vec![0.0; ci];
    dispatch_correlate(grad_out, ker, &zero, flip_plan, gx);
}

/// Dot product summed in four interleaved lanes.
#[inline(always)]
fn dot_lanes<const CO: usize>(a: &[f64; CO], b: &[f64; CO]) -> f64 {
    if CO < 4 {
        let mut s = 0.0;
        for k in 0..CO {
            s += a[k] * b[k];
        }
        return s;
    }
    let mut lanes = [0.0; 4];
    for q in (0..CO).step_by(4) {
        for m in 0..4 {
            lanes[m] += a[q + m] * b[q + m];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3])
}

/// Weight and bias gradients, plus the input gradient by scattering when
/// `scatter_x` is set (strided convolutions).
fn bwd_fixed<const CO: usize>(
    x: &Tensor,
    spec: &ConvSpec,
    p: &mut ConvParams,
    [ph, pw, pd]: [AxisPlan; 3],
    grad_out: &Tensor,
    gx: &mut Tensor,
    scatter_x: bool,
) {
    let xs = x.shape();
    let ys = grad_out.shape();
    let (ci, s) = (spec.c_in, spec.stride);
    let xv = x.as_slice();
    let gv = grad_out.as_slice();
    let gxv = gx.as_mut_slice();
    let ConvParams { weights, weight_grad, bias_grad, .. } = p;
    let wv = weights.as_slice();
    let gwv = weight_grad.as_mut_slice();
    let mut bias_acc = [0.0; CO];
    for n in 0..xs.n {
        for oh in 0..ys.h {
            let (i0, i1, ih0) = tap_range(oh, s, ph, spec.kh, xs.h);
            for ow in 0..ys.w {
                let (j0, j1, iw0) = tap_range(ow, s, pw, spec.kw, xs.w);
                for od in 0..ys.d {
                    let (l0, l1, id0) = tap_range(od, s, pd, spec.kd, xs.d);
                    let go = ys.index(n, oh, ow, od, 0);
                    let g: [f64; CO] = gv[go..go + CO].try_into().unwrap();
                    for k in 0..CO {
                        bias_acc[k] += g[k];
                    }
                    if g.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let run = (l1 - l0) * ci;
                    for i in i0..i1 {
                        for j in j0..j1 {
                            let xo = xs.index(n, ih0 + i - i0, iw0 + j - j0, id0, 0);
                            let wo = ((i * spec.kw + j) * spec.kd + l0) * ci * CO;
                            let xrow = &xv[xo..xo + run];
                            let gwrow = &mut gwv[wo..wo + run * CO];
                            for (&xa, gwr) in xrow.iter().zip(gwrow.chunks_exact_mut(CO)) {
                                if xa == 0.0 {
                                    continue;
                                }
                                let gwr: &mut [f64; CO] = gwr.try_into().unwrap();
                                for k in 0..CO {
                                    gwr[k] += xa * g[k];
                                }
                            }
                            if scatter_x {
                                let gxrow = &mut gxv[xo..xo + run];
                                let wrow = &wv[wo..wo + run * CO];
                                for (gxa, wr) in gxrow.iter_mut().zip(wrow.chunks_exact(CO)) {
                                    *gxa += dot_lanes(wr.try_into().unwrap(), &g);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for (b, a) in bias_grad.iter_mut().zip(bias_acc) {
        *b += a;
    }
}

fn bwd_dyn(
    x: &Tensor,
    spec: &ConvSpec,
    p: &mut ConvParams,
    [ph, pw, pd]: [AxisPlan; 3],
    grad_out: &Tensor,
    gx: &mut Tensor,
    scatter_x: bool,
) {
    let xs = x.shape();
    let ys = grad_out.shape();
    let (ci, co, s) = (spec.c_in, spec.c_out, spec.stride);
    let xv = x.as_slice();
    let gv = grad_out.as_slice();
    let gxv = gx.as_mut_slice();
    let ConvParams { weights, weight_grad, bias_grad, .. } = p;
    let wv = weights.as_slice();
    let gwv = weight_grad.as_mut_slice();
    for n in 0..xs.n {
        for oh in 0..ys.h {
            let (i0, i1, ih0) = tap_range(oh, s, ph, spec.kh, xs.h);
            for ow in 0..ys.w {
                let (j0, j1, iw0) = tap_range(ow, s, pw, spec.kw, xs.w);
                for od in 0..ys.d {
                    let (l0, l1, id0) = tap_range(od, s, pd, spec.kd, xs.d);
                    let go = ys.index(n, oh, ow, od, 0);
                    let g = &gv[go..go + co];
                    for (b, &gb) in bias_grad.iter_mut().zip(g) {
                        *b += gb;
                    }
                    let run = (l1 - l0) * ci;
                    for i in i0..i1 {
                        for j in j0..j1 {
                            let xo = xs.index(n, ih0 + i - i0, iw0 + j - j0, id0, 0);
                            let wo = ((i * spec.kw + j) * spec.kd + l0) * ci * co;
                            let xrow = &xv[xo..xo + run];
                            let gxrow = &mut gxv[xo..xo + run];
                            let wrow = &wv[wo..wo + run * co];
                            let gwrow = &mut gwv[wo..wo + run * co];
                            for (((&xa, gxa), wr), gwr) in xrow
                                .iter()
                                .zip(gxrow.iter_mut())
                                .zip(wrow.chunks_exact(co))
                                .zip(gwrow.chunks_exact_mut(co))
                            {
                                if scatter_x {
                                    let mut dot = 0.0;
                                    for (&w, &gb) in wr.iter().zip(g) {
                                        dot += w * gb;
                                    }
                                    *gxa += dot;
                                }
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

fn require_in_plane(spec: &ConvSpec) -> Result<()> {
    if spec.kd != 1 || spec.transposed {
        return Err(Error::Unsupported(format!("in-plane convolution needs kd = 1, got {spec:?}")));
    }
    Ok(())
}

fn require_full_depth(spec: &ConvSpec, x: &Tensor) -> Result<()> {
    if spec.kh != 1 || spec.kw != 1 || spec.stride != 1 || spec.transposed {
        return Err(Error::Unsupported(format!("along-depth convolution needs 1x1xD, got {spec:?}")));
    }
    if spec.kd != x.shape().d {
        return Err(Error::Unsupported(format!(
            "full-depth kernel of {} slices applied to depth {}",
            spec.kd,
            x.shape().d
        )));
    }
    Ok(())
}

/// `kh x kw x 1` convolution: mixes nothing across depth slices.
pub fn conv2d_in3d_fwd(x: &Tensor, spec: &ConvSpec, p: &ConvParams) -> Result<Tensor> {
    require_in_plane(spec)?;
    conv3d_fwd(x, spec, p)
}

pub fn conv2d_in3d_bwd(x: &Tensor, spec: &ConvSpec, p: &mut ConvParams, grad_out: &Tensor) -> Result<Tensor> {
    require_in_plane(spec)?;
    conv3d_bwd(x, spec, p, grad_out)
}

/// `1 x 1 x D` convolution whose kernel spans the whole incoming depth.
pub fn conv1d_z_fwd(x: &Tensor, spec: &ConvSpec, p: &ConvParams) -> Result<Tensor> {
    require_full_depth(spec, x)?;
    conv3d_fwd(x, spec, p)
}

pub fn conv1d_z_bwd(x: &Tensor, spec: &ConvSpec, p: &mut ConvParams, grad_out: &Tensor) -> Result<Tensor> {
    require_full_depth(spec, x)?;
    conv3d_bwd(x, spec, p, grad_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv3d_oracle;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sh(n: usize, h: usize, w: usize, d: usize, c: usize) -> Shape5 {
        Shape5::new(n, h, w, d, c).unwrap()
    }

    fn random(shape: Shape5, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn random_params(spec: &ConvSpec, rng: &mut ChaCha8Rng) -> ConvParams {
        let len = spec.weight_shape().unwrap().len();
        let w: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..spec.c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ConvParams::from_parts(spec, w, b).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(sh(1, 3, 4, 5, 1), &mut rng);
        let spec = ConvSpec::new((1, 1, 1), 1, 1, 1);
        let mut p = ConvParams::from_parts(&spec, vec![1.0], vec![0.0]).unwrap();
        assert_eq!(conv3d_fwd(&x, &spec, &p).unwrap(), x);
        let g = random(x.shape(), &mut rng);
        assert_eq!(conv3d_bwd(&x, &spec, &mut p, &g).unwrap(), g);
    }

    #[test]
    fn matches_oracle_3x3x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(sh(1, 4, 4, 4, 2), &mut rng);
        let spec = ConvSpec::new((3, 3, 3), 1, 2, 3);
        let p = random_params(&spec, &mut rng);
        let fast = conv3d_fwd(&x, &spec, &p).unwrap();
        let slow = conv3d_oracle(&x, &spec, &p).unwrap();
        assert_eq!(fast.shape(), sh(1, 4, 4, 4, 3));
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
    }

    #[test]
    fn strided_shape() {
        let x = Tensor::new_filled(sh(1, 8, 8, 8, 1), 1.0).unwrap();
        let spec = ConvSpec::new((2, 2, 2), 2, 1, 4).valid();
        let p = ConvParams::zeros(&spec).unwrap();
        assert_eq!(conv3d_fwd(&x, &spec, &p).unwrap().shape(), sh(1, 4, 4, 4, 4));
        // odd extents floor
        let x = Tensor::new_filled(sh(1, 5, 7, 3, 1), 1.0).unwrap();
        assert_eq!(conv3d_fwd(&x, &spec, &p).unwrap().shape(), sh(1, 2, 3, 1, 4));
    }

    #[test]
    fn bias_gradient_counts_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(sh(2, 3, 3, 4, 2), &mut rng);
        let spec = ConvSpec::new((3, 3, 3), 1, 2, 2);
        let mut p = random_params(&spec, &mut rng);
        let g = Tensor::new_filled(sh(2, 3, 3, 4, 2), 1.0).unwrap();
        conv3d_bwd(&x, &spec, &mut p, &g).unwrap();
        assert_eq!(p.bias_grad, vec![72.0, 72.0]);
    }

    #[test]
    fn channel_mismatch_and_bad_grad() {
        let x = Tensor::zeros(sh(1, 4, 4, 4, 2)).unwrap();
        let spec = ConvSpec::new((3, 3, 3), 1, 3, 1);
        let p = ConvParams::zeros(&spec).unwrap();
        assert!(conv3d_fwd(&x, &spec, &p).is_err());
        let spec = ConvSpec::new((3, 3, 3), 1, 2, 1);
        let mut q = ConvParams::zeros(&spec).unwrap();
        let bad = Tensor::zeros(sh(1, 4, 4, 3, 1)).unwrap();
        assert!(conv3d_bwd(&x, &spec, &mut q, &bad).is_err());
        assert!(conv3d_fwd(&x, &ConvSpec::new((3, 3, 3), 1, 2, 2), &p).is_err());
        let big = ConvSpec::new((5, 5, 5), 1, 2, 1).valid();
        assert!(conv3d_fwd(&x, &big, &ConvParams::zeros(&big).unwrap()).is_err());
    }

    #[test]
    fn in_plane_keeps_slices_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(sh(1, 8, 8, 8, 1), &mut rng);
        let spec = ConvSpec::new((3, 3, 1), 1, 1, 2);
        let p = random_params(&spec, &mut rng);
        let y = conv2d_in3d_fwd(&x, &spec, &p).unwrap();
        assert_eq!(y.shape(), sh(1, 8, 8, 8, 2));
        let mut x2 = x.clone();
        for h in 0..8 {
            for w in 0..8 {
                let v = x2.get(0, h, w, 5, 0);
                x2.set(0, h, w, 5, 0, v + 1.0);
            }
        }
        let y2 = conv2d_in3d_fwd(&x2, &spec, &p).unwrap();
        for i in 0..y.len() {
            let [_, _, _, d, _] = y.shape().coords(i);
            let changed = y.as_slice()[i] != y2.as_slice()[i];
            assert_eq!(changed, d == 5, "index {i}");
        }
        assert!(conv2d_in3d_fwd(&x, &ConvSpec::new((3, 3, 3), 1, 1, 2), &p).is_err());
    }

    #[test]
    fn full_depth_all_ones() {
        let x = Tensor::new_filled(sh(1, 2, 2, 8, 1), 1.0).unwrap();
        let spec = ConvSpec::full_depth(8, 1, 1);
        let p = ConvParams::from_parts(&spec, vec![1.0; 8], vec![0.0]).unwrap();
        let y = conv1d_z_fwd(&x, &spec, &p).unwrap();
        // padding 3 front, 4 back: output z sees input slices z-3 ..= z+4
        let expected = [5.0, 6.0, 7.0, 8.0, 7.0, 6.0, 5.0, 4.0];
        for (d, &e) in expected.iter().enumerate() {
            assert_eq!(y.get(0, 1, 0, d, 0), e);
        }
        let wrong = ConvSpec::full_depth(4, 1, 1);
        let pw = ConvParams::zeros(&wrong).unwrap();
        assert!(conv1d_z_fwd(&x, &wrong, &pw).is_err());
    }

    #[test]
    fn full_depth_of_one_is_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(sh(1, 3, 3, 1, 2), &mut rng);
        let spec = ConvSpec::full_depth(1, 2, 3);
        let p = random_params(&spec, &mut rng);
        let y = conv1d_z_fwd(&x, &spec, &p).unwrap();
        for h in 0..3 {
            for w in 0..3 {
                for b in 0..3 {
                    let expected = p.bias[b]
                        + x.get(0, h, w, 0, 0) * p.weights.as_slice()[b]
                        + x.get(0, h, w, 0, 1) * p.weights.as_slice()[3 + b];
                    assert!((y.get(0, h, w, 0, b) - expected).abs() < 1e-14);
                }
            }
        }
    }
}
