//! Central finite-difference checks of every backward pass.
//!
//! Each check builds a scalar objective `sum(r * f(x))` with a random `r`,
//! compares the analytic gradient against `(L(x + h) - L(x - h)) / 2h` and
//! reports the worst relative error `|a - n| / max(|a|, |n|, 1e-6)`. An
//! entry that misses at step `h` is retried at `h / 10` and keeps the better
//! of the two, so a ReLU or pooling switch inside the step is not reported
//! as a wrong gradient.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward, compile, forward, init_params, ParamStore};
use crate::models::{ArchConfig, Family, Mode};
use crate::ops::{self, ConvParams, ConvSpec, InstanceNormParams};
use crate::tensor::{Shape5, Tensor};
use crate::Result;

/// Tolerance on single operators.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance on whole networks.
pub const NETWORK_TOLERANCE: f64 = 1e-3;
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteOptions {
    /// Perturbs every analytic convolution weight gradient by 1% before
    /// comparing. Used to confirm that the suite can fail.
    pub corrupt_conv_grad: bool,
    /// Entries checked per operator buffer; `None` checks everything.
    pub max_entries: Option<usize>,
    /// Entries checked per network buffer (input, all parameters).
    pub network_entries: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { corrupt_conv_grad: false, max_entries: None, network_entries: 600 }
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(DENOMINATOR_FLOOR)
}

struct Ctx {
    rng: ChaCha8Rng,
    seed: u64,
    opts: SuiteOptions,
    results: Vec<CheckResult>,
}

impl Ctx {
    fn tensor(&mut self, shape: Shape5) -> Result<Tensor> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Values bounded away from zero so ReLU kinks are never crossed.
    fn off_zero(&mut self, shape: Shape5) -> Result<Tensor> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
    }

    fn indices(&mut self, len: usize, limit: Option<usize>) -> Vec<usize> {
        match limit {
            Some(k) if k < len => {
                let mut v = sample(&mut self.rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    }

    /// Compares `analytic[i]` with the central difference of `f` in the
    /// coordinate `i` of `base`.
    #[allow(clippy::too_many_arguments)]
    fn compare(
        &mut self,
        name: &str,
        limit: Option<usize>,
        tolerance: f64,
        h: f64,
        base: &[f64],
        analytic: &[f64],
        mut f: impl FnMut(&[f64]) -> Result<f64>,
    ) -> Result<()> {
        let idx = self.indices(base.len(), limit);
        let mut worst = 0.0f64;
        let mut probe = base.to_vec();
        for &i in &idx {
            // a kink inside the step shows up as disagreement at one step size
            // only; a wrong gradient disagrees at both
            let mut best = f64::INFINITY;
            for step in [h, h / 10.0] {
                probe[i] = base[i] + step;
                let up = f(&probe)?;
                probe[i] = base[i] - step;
                let down = f(&probe)?;
                probe[i] = base[i];
                let e = rel_error(analytic[i], (up - down) / (2.0 * step));
                if e < best {
                    best = e;
                }
                if best < tolerance / 10.0 {
                    break;
                }
            }
            worst = worst.max(best);
        }
        self.results.push(CheckResult {
            name: name.into(),
            seed: self.seed,
            checked: idx.len(),
            max_rel_error: worst,
            tolerance,
            passed: worst < tolerance,
        });
        Ok(())
    }

    fn corrupt(&self, g: &[f64]) -> Vec<f64> {
        if self.opts.corrupt_conv_grad {
            g.iter().map(|v| v * 1.01 + 1e-3).collect()
        } else {
            g.to_vec()
        }
    }
}

fn weighted(y: &Tensor, r: &Tensor) -> Result<f64> {
    y.dot(r)
}

fn with_values(t: &Tensor, v: &[f64]) -> Result<Tensor> {
    Tensor::from_vec(t.shape(), v.to_vec())
}

fn check_conv(ctx: &mut Ctx, name: &str, spec: ConvSpec, input: Shape5) -> Result<()> {
    let x = ctx.tensor(input)?;
    let ws = spec.weight_shape()?;
    let w = ctx.tensor(ws)?;
    let b: Vec<f64> = (0..spec.c_out).map(|_| ctx.rng.gen_range(-1.0..1.0)).collect();
    let mut p = ConvParams::from_parts(&spec, w.into_vec(), b)?;
    let run = |x: &Tensor, p: &ConvParams| {
        if spec.transposed {
            ops::conv_transpose3d_fwd(x, &spec, p)
        } else {
            ops::conv3d_fwd(x, &spec, p)
        }
    };
    let y = run(&x, &p)?;
    let r = ctx.tensor(y.shape())?;
    let gx = if spec.transposed {
        ops::conv_transpose3d_bwd(&x, &spec, &mut p, &r)?
    } else {
        ops::conv3d_bwd(&x, &spec, &mut p, &r)?
    };
    let p0 = p.clone();
    ctx.compare(&format!("{name}/input"), ctx.opts.max_entries, OP_TOLERANCE, 1e-5, x.as_slice(), gx.as_slice(), |v| {
        weighted(&run(&with_values(&x, v)?, &p0)?, &r)
    })?;
    let gw = ctx.corrupt(p0.weight_grad.as_slice());
    ctx.compare(&format!("{name}/weight"), ctx.opts.max_entries, OP_TOLERANCE, 1e-5, p0.weights.as_slice(), &gw, |v| {
        let mut q = p0.clone();
        q.weights = with_values(&p0.weights, v)?;
        weighted(&run(&x, &q)?, &r)
    })?;
    ctx.compare(&format!("{name}/bias"), ctx.opts.max_entries, OP_TOLERANCE, 1e-5, &p0.bias, &p0.bias_grad, |v| {
        let mut q = p0.clone();
        q.bias = v.to_vec();
        weighted(&run(&x, &q)?, &r)
    })
}

fn check_pool(ctx: &mut Ctx) -> Result<()> {
    // distinct values spaced well above the step so the argmax never moves
    let shape = Shape5::new(1, 4, 5, 4, 2)?;
    let mut order: Vec<usize> = (0..shape.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ctx.rng);
    let x = Tensor::from_vec(shape, order.iter().map(|&k| k as f64 * 0.01).collect())?;
    let (y, idx) = ops::maxpool3d_fwd(&x, 2, 2)?;
    let r = ctx.tensor(y.shape())?;
    let gx = ops::maxpool3d_bwd(&idx, &r)?;
    ctx.compare("maxpool/input", ctx.opts.max_entries, OP_TOLERANCE, 1e-5, x.as_slice(), gx.as_slice(), |v| {
        weighted(&ops::maxpool3d_fwd(&with_values(&x, v)?, 2, 2)?.0, &r)
    })
}

fn check_norm(ctx: &mut Ctx) -> Result<()> {
    let shape = Shape5::new(2, 3, 3, 2, 3)?;
    let x = ctx.tensor(shape)?;
    let mut p = InstanceNormParams::identity(3);
    for c in 0..3 {
        p.gamma[c] = ctx.rng.gen_range(0.5..1.5);
        p.beta[c] = ctx.rng.gen_range(-0.5..0.5);
    }
    let (y, cache) = ops::instance_norm_fwd(&x, &p)?;
    let r = ctx.tensor(y.shape())?;
    let gx = ops::instance_norm_bwd(&cache, &mut p, &r)?;
    let p0 = p.clone();
    ctx.compare("instance_norm/input", ctx.opts.max_entries, OP_TOLERANCE, 1e-5, x.as_slice(), gx.as_slice(), |v| {
        weighted(&ops::instance_norm_fwd(&with_values(&x, v)?, &p0)?.0, &r)
    })?;
    ctx.compare("instance_norm/gamma", ctx.opts.max_entries, OP_TOLERANCE, 1e-5, &p0.gamma, &p0.gamma_grad, |v| {
        let mut q = p0.clone();
        q.gamma = v.to_vec();
        weighted(&ops::instance_norm_fwd(&x, &q)?.0, &r)
    })?;
    ctx.compare("instance_norm/beta", ctx.opts.max_entries, OP_TOLERANCE, 1e-5, &p0.beta, &p0.beta_grad, |v| {
        let mut q = p0.clone();
        q.beta = v.to_vec();
        weighted(&ops::instance_norm_fwd(&x, &q)?.0, &r)
    })
}

fn check_pointwise(ctx: &mut Ctx) -> Result<()> {
    let shape = Shape5::new(1, 3, 2, 2, 3)?;
    let x = ctx.off_zero(shape)?;
    let r = ctx.tensor(shape)?;
    let gx = ops::relu_bwd(&x, &r)?;
    ctx.compare("relu/input", ctx.opts.max_entries, OP_TOLERANCE, 1e-5, x.as_slice(), gx.as_slice(), |v| {
        weighted(&ops::relu_fwd(&with_values(&x, v)?), &r)
    })?;

    let a = ctx.tensor(shape)?;
    let b = ctx.tensor(shape.with_c(2))?;
    let r = ctx.tensor(shape.with_c(5))?;
    let (ga, gb) = ops::concat_channels_bwd(&r, 3)?;
    ctx.compare("concat/first", ctx.opts.max_entries, OP_TOLERANCE, 1e-5, a.as_slice(), ga.as_slice(), |v| {
        weighted(&ops::concat_channels_fwd(&with_values(&a, v)?, &b)?, &r)
    })?;
    ctx.compare("concat/second", ctx.opts.max_entries, OP_TOLERANCE, 1e-5, b.as_slice(), gb.as_slice(), |v| {
        weighted(&ops::concat_channels_fwd(&a, &with_values(&b, v)?)?, &r)
    })?;

    let c = ctx.tensor(shape)?;
    let r = ctx.tensor(shape)?;
    ctx.compare("add/first", ctx.opts.max_entries, OP_TOLERANCE, 1e-5, a.as_slice(), r.as_slice(), |v| {
        weighted(&ops::add_fwd(&with_values(&a, v)?, &c)?, &r)
    })?;

    let logits = ctx.tensor(shape.with_c(2))?.scale(3.0);
    let labels = Tensor::from_fn(shape.with_c(2), |[_, h, w, d, ch]| {
        let fg = (h + w + d) % 2 == 0;
        if (ch == 1) == fg { 1.0 } else { 0.0 }
    })?;
    let (_, probs) = ops::softmax_xent_fwd(&logits, &labels)?;
    let g = ops::softmax_xent_bwd(&probs, &labels)?;
    ctx.compare("softmax_xent/logits", ctx.opts.max_entries, OP_TOLERANCE, 1e-5, logits.as_slice(), g.as_slice(), |v| {
        Ok(ops::softmax_xent_fwd(&with_values(&logits, v)?, &labels)?.0)
    })
}

fn network_loss(g: &crate::autograd::ModelGraph, p: &ParamStore, x: &Tensor, labels: &Tensor) -> Result<f64> {
    let (logits, _) = forward(g, p, x)?;
    Ok(ops::softmax_xent_fwd(&logits, labels)?.0)
}

fn check_network(ctx: &mut Ctx, arch: ArchConfig) -> Result<()> {
    let shape = Shape5::new(1, 8, 8, 4, 1)?;
    let spec = arch.build()?;
    let g = compile(&spec, shape)?;
    let mut p = init_params(&g, ctx.seed)?;
    // non-trivial affine parameters so their gradients are exercised
    p.update_each(|w, _| {
        if w.iter().all(|&v| v == 1.0 || v == 0.0) {
            for v in w.iter_mut() {
                *v += 0.1;
            }
        }
        Ok(())
    })?;
    let x = ctx.tensor(shape)?;
    let labels = Tensor::from_fn(shape.with_c(2), |[_, h, w, d, c]| {
        let fg = (h as i64 - 4).pow(2) + (w as i64 - 4).pow(2) <= 5 + d as i64;
        if (c == 1) == fg { 1.0 } else { 0.0 }
    })?;
    let (logits, tape) = forward(&g, &p, &x)?;
    let (_, probs) = ops::softmax_xent_fwd(&logits, &labels)?;
    let lg = ops::softmax_xent_bwd(&probs, &labels)?;
    let gx = backward(&g, &mut p, &tape, &lg)?;
    let name = arch.name();

    ctx.compare(&format!("{name}/input"), Some(ctx.opts.network_entries), NETWORK_TOLERANCE, 1e-5, x.as_slice(), gx.as_slice(), |v| {
        network_loss(&g, &p, &with_values(&x, v)?, &labels)
    })?;

    let base: Vec<f64> = p.values().flat_map(|v| v.values.iter().copied()).collect();
    let is_conv_weight: Vec<bool> =
        p.values().flat_map(|v| core::iter::repeat_n(v.field == "weight", v.values.len())).collect();
    let analytic: Vec<f64> = p.grads().flatten().copied().collect();
    let analytic: Vec<f64> = if ctx.opts.corrupt_conv_grad {
        analytic.iter().zip(&is_conv_weight).map(|(&a, &w)| if w { a * 1.01 + 1e-3 } else { a }).collect()
    } else {
        analytic
    };
    let mut probe = p.clone();
    ctx.compare(&format!("{name}/params"), Some(ctx.opts.network_entries), NETWORK_TOLERANCE, 1e-5, &base, &analytic, |v| {
        let mut k = 0;
        probe.update_each(|w, _| {
            w.copy_from_slice(&v[k..k + w.len()]);
            k += w.len();
            Ok(())
        })?;
        network_loss(&g, &probe, &x, &labels)
    })
}

/// Every operator check plus two small two-level networks, for one seed.
pub fn run_suite(seed: u64, opts: SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut ctx = Ctx { rng: ChaCha8Rng::seed_from_u64(seed), seed, opts, results: Vec::new() };
    check_conv(&mut ctx, "conv3x3x3", ConvSpec::new((3, 3, 3), 1, 2, 3), Shape5::new(1, 4, 5, 3, 2)?)?;
    check_conv(&mut ctx, "conv3x3x1", ConvSpec::new((3, 3, 1), 1, 2, 3), Shape5::new(1, 4, 5, 3, 2)?)?;
    check_conv(&mut ctx, "conv1x1xdepth", ConvSpec::full_depth(4, 3, 2), Shape5::new(1, 3, 2, 4, 3)?)?;
    check_conv(&mut ctx, "conv2x2x2/2", ConvSpec::new((2, 2, 2), 2, 2, 3).valid(), Shape5::new(1, 4, 4, 4, 2)?)?;
    check_conv(&mut ctx, "conv3x3x3/2", ConvSpec::new((3, 3, 3), 2, 2, 2), Shape5::new(1, 5, 4, 6, 2)?)?;
    check_conv(&mut ctx, "upconv2x2x2", ConvSpec::upsample(3, 2), Shape5::new(1, 2, 3, 2, 3)?)?;
    check_pool(&mut ctx)?;
    check_norm(&mut ctx)?;
    check_pointwise(&mut ctx)?;
    for (family, mode) in [(Family::Unet, Mode::ZV2), (Family::Vnet, Mode::Full3d)] {
        let arch = ArchConfig { family, mode, levels: 2, base_channels: 2, ..ArchConfig::default() };
        check_network(&mut ctx, arch)?;
    }
    Ok(ctx.results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(1.0, 1.0), 0.0);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(rel_error(1e-9, 0.0) < 1e-2);
    }

    #[test]
    fn suite_passes_and_corruption_fails() {
        let opts = SuiteOptions { max_entries: Some(40), network_entries: 60, ..SuiteOptions::default() };
        let results = run_suite(0, opts).unwrap();
        for r in &results {
            assert!(r.passed, "{r:?}");
        }
        let bad = run_suite(0, SuiteOptions { corrupt_conv_grad: true, ..opts }).unwrap();
        assert!(bad.iter().any(|r| !r.passed));
        assert!(bad.iter().filter(|r| r.name.ends_with("weight")).all(|r| !r.passed));
    }
}
