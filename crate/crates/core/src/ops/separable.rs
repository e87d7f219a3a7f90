use alloc::vec::Vec;

use super::{conv1d_z_fwd, conv2d_in3d_fwd, conv3d_fwd, ConvParams, ConvSpec};
use crate::tensor::Tensor;
use crate::Result;

/// Single-channel 3x3x3 kernel `k[i][j][l] = u[i][j] * v[l]`, flattened in tap order.
pub fn outer_kernel(u: &[[f64; 3]; 3], v: &[f64; 3]) -> Vec<f64> {
    let mut k = Vec::with_capacity(27);
    for row in u {
        for &a in row {
            for &b in v {
                k.push(a * b);
            }
        }
    }
    k
}

/// Largest absolute difference between the 3x3x3 convolution with `k3` and the
/// in-plane `u` convolution followed by the length-3 along-depth `v` convolution,
/// all single-channel, bias-free and same-padded.
pub fn separable_residual(x: &Tensor, k3: &[f64], u: &[[f64; 3]; 3], v: &[f64; 3]) -> Result<f64> {
    let full = ConvSpec::new((3, 3, 3), 1, 1, 1);
    let full_p = ConvParams::from_parts(&full, k3.to_vec(), alloc::vec![0.0])?;
    let plane = ConvSpec::new((3, 3, 1), 1, 1, 1);
    let plane_p = ConvParams::from_parts(&plane, u.iter().flatten().copied().collect(), alloc::vec![0.0])?;
    let depth = ConvSpec::new((1, 1, 3), 1, 1, 1);
    let depth_p = ConvParams::from_parts(&depth, v.to_vec(), alloc::vec![0.0])?;

    let direct = conv3d_fwd(x, &full, &full_p)?;
    let in_plane = conv2d_in3d_fwd(x, &plane, &plane_p)?;
    // A 3-tap depth kernel: the full-depth wrapper would insist on kd == depth.
    let factored = if x.shape().d == 3 {
        conv1d_z_fwd(&in_plane, &depth, &depth_p)?
    } else {
        conv3d_fwd(&in_plane, &depth, &depth_p)?
    };
    direct.max_abs_diff(&factored)
}

/// True when the rank-1 kernel `u ⊗ v` convolved directly agrees with the
/// two-stage factorization within `1e-10` on `x`.
pub fn separable_pair_equivalence_check(x: &Tensor, u: &[[f64; 3]; 3], v: &[f64; 3]) -> Result<bool> {
    Ok(separable_residual(x, &outer_kernel(u, v), u, v)? < 1e-10)
}
