//! Forward and backward throughput of the convolution shapes used by the
//! default networks on a 2x64x64x8 batch.
//!
//! `cargo run --release -p znet-core --example conv_throughput`

use std::time::Instant;

use znet_core::ops::{conv3d_bwd, conv3d_fwd, ConvParams, ConvSpec};
use znet_core::{Shape5, Tensor};

fn main() {
    let cases = [((3, 3, 1), 8, 8), ((3, 3, 1), 16, 8), ((1, 1, 8), 8, 8), ((3, 3, 3), 8, 8)];
    for (k, ci, co) in cases {
        let x = Tensor::new_filled(Shape5::new(2, 64, 64, 8, ci).unwrap(), 0.3).unwrap();
        let spec = ConvSpec::new(k, 1, ci, co);
        let mut p = ConvParams::zeros(&spec).unwrap();
        p.weights.as_mut_slice().fill(0.01);

        let t = Instant::now();
        let y = conv3d_fwd(&x, &spec, &p).unwrap();
        let fwd = t.elapsed().as_secs_f64();
        let t = Instant::now();
        conv3d_bwd(&x, &spec, &mut p, &y).unwrap();
        let bwd = t.elapsed().as_secs_f64();

        let macs = (x.shape().n * x.shape().spatial() * spec.taps() * ci * co) as f64;
        println!(
            "{k:?} {ci}->{co}: forward {fwd:.3}s ({:.2} GMAC/s), backward {bwd:.3}s ({:.2} GMAC/s)",
            macs / fwd / 1e9,
            2.0 * macs / bwd / 1e9
        );
    }
}
