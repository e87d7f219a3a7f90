use alloc::format;

use super::check_grad_shape;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Stacks channels `a` then `b`.
pub fn concat_channels_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.with_c(1) != sb.with_c(1) {
        return Err(Error::ShapeMismatch(format!("concat of {sa} and {sb}")));
    }
    let out_shape = sa.with_c(sa.c + sb.c);
    let mut out = alloc::vec::Vec::with_capacity(out_shape.len());
    for (ra, rb) in a.as_slice().chunks_exact(sa.c).zip(b.as_slice().chunks_exact(sb.c)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    Tensor::from_vec(out_shape, out)
}

/// Splits the gradient back into the `a` part (first `c_a` channels) and the rest.
pub fn concat_channels_bwd(grad_out: &Tensor, c_a: usize) -> Result<(Tensor, Tensor)> {
    let s = grad_out.shape();
    if c_a == 0 || c_a >= s.c {
        return Err(Error::ShapeMismatch(format!("split at {c_a} of {} channels", s.c)));
    }
    let c_b = s.c - c_a;
    check_grad_shape(grad_out, s, "concat_channels_bwd")?;
    let mut ga = alloc::vec::Vec::with_capacity(s.spatial() * s.n * c_a);
    let mut gb = alloc::vec::Vec::with_capacity(s.spatial() * s.n * c_b);
    for row in grad_out.as_slice().chunks_exact(s.c) {
        ga.extend_from_slice(&row[..c_a]);
        gb.extend_from_slice(&row[c_a..]);
    }
    Ok((Tensor::from_vec(s.with_c(c_a), ga)?, Tensor::from_vec(s.with_c(c_b), gb)?))
}
