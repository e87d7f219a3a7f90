//! Reference convolutions written as plain nested loops straight from the
//! definition. They share no indexing code with the fast kernels and exist to
//! check them.

use alloc::format;

use super::{ConvParams, ConvSpec, Padding};
use crate::tensor::{same_padding, Shape5, Tensor};
use crate::{Error, Result};

fn weight(p: &ConvParams, spec: &ConvSpec, i: usize, j: usize, l: usize, a: usize, b: usize) -> f64 {
    p.weights.get(0, i, j, l, a * spec.c_out + b)
}

fn extent_and_front(spec: &ConvSpec, k: usize, e: usize) -> Result<(usize, isize)> {
    match spec.padding {
        Padding::Valid => {
            if e < k {
                return Err(Error::InvalidShape(format!("kernel {k} > extent {e}")));
            }
            Ok(((e - k) / spec.stride + 1, 0))
        }
        Padding::Same => {
            let (front, _) = same_padding(k, e)?;
            if e / spec.stride == 0 {
                return Err(Error::InvalidShape(format!("extent {e} below stride")));
            }
            Ok((e / spec.stride, front as isize))
        }
    }
}

/// Direct cross-correlation: for every output voxel and channel, sum over all
/// taps and input channels, reading zero outside the input.
pub fn conv3d_oracle(x: &Tensor, spec: &ConvSpec, p: &ConvParams) -> Result<Tensor> {
    let s = x.shape();
    if s.c != spec.c_in || spec.transposed {
        return Err(Error::ShapeMismatch(format!("oracle: {s} vs {spec:?}")));
    }
    p.check(spec)?;
    let (ho, fh) = extent_and_front(spec, spec.kh, s.h)?;
    let (wo, fw) = extent_and_front(spec, spec.kw, s.w)?;
    let (dof, fd) = extent_and_front(spec, spec.kd, s.d)?;
    let stride = spec.stride as isize;
    let out_shape = Shape5::new(s.n, ho, wo, dof, spec.c_out)?;
    let mut out = Tensor::zeros(out_shape)?;
    for n in 0..s.n {
        for oh in 0..ho {
            for ow in 0..wo {
                for od in 0..dof {
                    for b in 0..spec.c_out {
                        let mut acc = p.bias[b];
                        for i in 0..spec.kh {
                            for j in 0..spec.kw {
                                for l in 0..spec.kd {
                                    let ih = oh as isize * stride + i as isize - fh;
                                    let iw = ow as isize * stride + j as isize - fw;
                                    let id = od as isize * stride + l as isize - fd;
                                    let inside = ih >= 0
                                        && iw >= 0
                                        && id >= 0
                                        && (ih as usize) < s.h
                                        && (iw as usize) < s.w
                                        && (id as usize) < s.d;
                                    if !inside {
                                        continue;
                                    }
                                    for a in 0..spec.c_in {
                                        acc += x.get(n, ih as usize, iw as usize, id as usize, a)
                                            * weight(p, spec, i, j, l, a, b);
                                    }
                                }
                            }
                        }
                        out.set(n, oh, ow, od, b, acc);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Direct transposed convolution by gathering: output voxel `q` receives
/// `x[o] * w[t]` for every tap with `o * stride + t == q`.
pub fn conv_transpose3d_oracle(x: &Tensor, spec: &ConvSpec, p: &ConvParams) -> Result<Tensor> {
    let s = x.shape();
    if s.c != spec.c_in || !spec.transposed {
        return Err(Error::ShapeMismatch(format!("transpose oracle: {s} vs {spec:?}")));
    }
    p.check(spec)?;
    let st = spec.stride;
    let out_shape = Shape5::new(
        s.n,
        (s.h - 1) * st + spec.kh,
        (s.w - 1) * st + spec.kw,
        (s.d - 1) * st + spec.kd,
        spec.c_out,
    )?;
    let mut out = Tensor::zeros(out_shape)?;
    let source = |q: usize, t: usize, extent: usize| -> Option<usize> {
        if q < t || !(q - t).is_multiple_of(st) {
            return None;
        }
        let o = (q - t) / st;
        (o < extent).then_some(o)
    };
    for n in 0..s.n {
        for qh in 0..out_shape.h {
            for qw in 0..out_shape.w {
                for qd in 0..out_shape.d {
                    for b in 0..spec.c_out {
                        let mut acc = p.bias[b];
                        for i in 0..spec.kh {
                            let Some(oh) = source(qh, i, s.h) else { continue };
                            for j in 0..spec.kw {
                                let Some(ow) = source(qw, j, s.w) else { continue };
                                for l in 0..spec.kd {
                                    let Some(od) = source(qd, l, s.d) else { continue };
                                    for a in 0..spec.c_in {
                                        acc += x.get(n, oh, ow, od, a) * weight(p, spec, i, j, l, a, b);
                                    }
                                }
                            }
                        }
                        out.set(n, qh, qw, qd, b, acc);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sh(n: usize, h: usize, w: usize, d: usize, c: usize) -> Shape5 {
        Shape5::new(n, h, w, d, c).unwrap()
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::zeros(sh(1, 3, 3, 3, 2)).unwrap();
        let spec = ConvSpec::new((3, 3, 3), 1, 2, 2);
        let p = ConvParams::from_parts(&spec, vec![0.7; 27 * 4], vec![0.1, -0.3]).unwrap();
        let y = conv3d_oracle(&x, &spec, &p).unwrap();
        for i in 0..y.len() {
            let expected = if i % 2 == 0 { 0.1 } else { -0.3 };
            assert_eq!(y.as_slice()[i], expected);
        }
    }

    #[test]
    fn impulse_stamps_flipped_kernel() {
        // kernel values 1..=27 at tap (i, j, l)
        let spec = ConvSpec::new((3, 3, 3), 1, 1, 1);
        let w = (1..=27).map(|v| v as f64).collect();
        let p = ConvParams::from_parts(&spec, w, vec![0.0]).unwrap();
        let mut x = Tensor::zeros(sh(1, 5, 5, 5, 1)).unwrap();
        x.set(0, 2, 2, 2, 0, 1.0);
        let y = conv3d_oracle(&x, &spec, &p).unwrap();
        // cross-correlation: y[2 + u] = w[1 - u], i.e. the kernel appears flipped
        for u in 0..3 {
            for v in 0..3 {
                for t in 0..3 {
                    let expected = ((2 - u) * 9 + (2 - v) * 3 + (2 - t) + 1) as f64;
                    assert_eq!(y.get(0, 1 + u, 1 + v, 1 + t, 0), expected);
                }
            }
        }
        assert_eq!(y.sum(), (1..=27).sum::<usize>() as f64);
    }

    #[test]
    fn transpose_stamp() {
        let spec = ConvSpec::upsample(1, 1);
        let p = ConvParams::from_parts(&spec, vec![1.0; 8], vec![0.0]).unwrap();
        let mut x = Tensor::zeros(sh(1, 2, 2, 2, 1)).unwrap();
        x.set(0, 1, 0, 1, 0, 1.0);
        let y = conv_transpose3d_oracle(&x, &spec, &p).unwrap();
        assert_eq!(y.shape(), sh(1, 4, 4, 4, 1));
        for i in 0..y.len() {
            let [_, h, w, d, _] = y.shape().coords(i);
            let inside = (2..4).contains(&h) && (0..2).contains(&w) && (2..4).contains(&d);
            assert_eq!(y.as_slice()[i], if inside { 1.0 } else { 0.0 });
        }
    }
}
