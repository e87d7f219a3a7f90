use super::check_grad_shape;
use crate::tensor::Tensor;
use crate::Result;

pub fn relu_fwd(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes the gradient where `x > 0`. The subgradient at exactly zero is 0.
pub fn relu_bwd(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    check_grad_shape(grad_out, x.shape(), "relu_bwd")?;
    let mut gx = grad_out.clone();
    for (g, &v) in gx.as_mut_slice().iter_mut().zip(x.as_slice()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(gx)
}

/// Residual addition. The backward pass hands the same gradient to both inputs.
pub fn add_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.add(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape5;
    use alloc::vec;

    #[test]
    fn relu_values_and_mask() {
        let s = Shape5::new(1, 1, 1, 3, 1).unwrap();
        let x = Tensor::from_vec(s, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_fwd(&x).as_slice(), &[0.0, 0.0, 2.0]);
        let g = Tensor::new_filled(s, 1.0).unwrap();
        assert_eq!(relu_bwd(&x, &g).unwrap().as_slice(), &[0.0, 0.0, 1.0]);
    }
}
