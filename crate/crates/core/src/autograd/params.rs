use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelGraph, ParamSlotKind};
use crate::ops::{ConvParams, InstanceNormParams};
use crate::tensor::Shape5;
use crate::{Error, Result};

/// Standard deviation of the weight initializer.
pub const INIT_SIGMA: f64 = 0.1;
/// Initial value of every convolution bias.
pub const INIT_BIAS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv(ConvParams),
    Norm(InstanceNormParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    /// Name of the owning layer.
    pub layer: String,
    pub params: LayerParams,
}

/// Every trainable tensor of a compiled graph, in graph order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
    pub seed: u64,
    /// Bumped on every in-place update so tapes recorded earlier are rejected.
    pub(crate) version: u64,
}

/// One named scalar buffer inside a [`ParamStore`]: `"<layer>/weight"`,
/// `"<layer>/bias"`, `"<layer>/gamma"` or `"<layer>/beta"`.
#[derive(Debug, Clone, Copy)]
pub struct NamedValues<'a> {
    pub layer: &'a str,
    pub field: &'static str,
    pub shape: Shape5,
    pub values: &'a [f64],
}

fn vector_shape(len: usize) -> Shape5 {
    Shape5 { n: 1, h: 1, w: 1, d: 1, c: len }
}

/// Samples `N(0, sigma)` and redraws anything outside `±2 sigma`.
pub fn truncated_normal(rng: &mut impl Rng, sigma: f64) -> f64 {
    let normal = Normal::new(0.0, sigma).expect("sigma is positive");
    loop {
        let v: f64 = normal.sample(rng);
        if libm::fabs(v) <= 2.0 * sigma {
            return v;
        }
    }
}

/// Weights from the truncated normal, biases at [`INIT_BIAS`], norm layers at
/// `gamma = 1`, `beta = 0`.
pub fn init_params(g: &ModelGraph, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(g.slots.len());
    for slot in &g.slots {
        let params = match &slot.kind {
            ParamSlotKind::Conv(spec) => {
                let mut p = ConvParams::zeros(spec)?;
                for w in p.weights.as_mut_slice() {
                    *w = truncated_normal(&mut rng, INIT_SIGMA);
                }
                p.bias.fill(INIT_BIAS);
                LayerParams::Conv(p)
            }
            ParamSlotKind::Norm(c) => LayerParams::Norm(InstanceNormParams::identity(*c)),
        };
        entries.push(ParamEntry { layer: slot.layer.clone(), params });
    }
    Ok(ParamStore { entries, seed, version: 0 })
}

impl ParamStore {
    pub fn count(&self) -> usize {
        self.values().map(|v| v.values.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            match &mut e.params {
                LayerParams::Conv(p) => p.zero_grad(),
                LayerParams::Norm(p) => p.zero_grad(),
            }
        }
    }

    /// All named buffers in registry order.
    pub fn values(&self) -> impl Iterator<Item = NamedValues<'_>> {
        self.entries.iter().flat_map(|e| {
            let layer = e.layer.as_str();
            let pair: [NamedValues<'_>; 2] = match &e.params {
                LayerParams::Conv(p) => [
                    NamedValues { layer, field: "weight", shape: p.weights.shape(), values: p.weights.as_slice() },
                    NamedValues { layer, field: "bias", shape: vector_shape(p.bias.len()), values: &p.bias },
                ],
                LayerParams::Norm(p) => [
                    NamedValues { layer, field: "gamma", shape: vector_shape(p.gamma.len()), values: &p.gamma },
                    NamedValues { layer, field: "beta", shape: vector_shape(p.beta.len()), values: &p.beta },
                ],
            };
            pair
        })
    }

    /// Gradients in the same order as [`ParamStore::values`].
    pub fn grads(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().flat_map(|e| -> [&[f64]; 2] {
            match &e.params {
                LayerParams::Conv(p) => [p.weight_grad.as_slice(), &p.bias_grad],
                LayerParams::Norm(p) => [&p.gamma_grad, &p.beta_grad],
            }
        })
    }

    /// Visits `(values, grads)` for every buffer, mutably. Invalidates tapes.
    pub fn update_each(&mut self, mut f: impl FnMut(&mut [f64], &[f64]) -> Result<()>) -> Result<()> {
        self.version += 1;
        for e in &mut self.entries {
            match &mut e.params {
                LayerParams::Conv(p) => {
                    f(p.weights.as_mut_slice(), p.weight_grad.as_slice())?;
                    f(&mut p.bias, &p.bias_grad)?;
                }
                LayerParams::Norm(p) => {
                    f(&mut p.gamma, &p.gamma_grad)?;
                    f(&mut p.beta, &p.beta_grad)?;
                }
            }
        }
        Ok(())
    }

    /// Overwrites the named buffer; used when restoring checkpoints.
    pub fn set_values(&mut self, layer: &str, field: &str, shape: Shape5, data: &[f64]) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.layer == layer)
            .ok_or_else(|| Error::Graph(format!("no parameters for layer {layer}")))?;
        let (target_shape, target): (Shape5, &mut [f64]) = match (&mut entry.params, field) {
            (LayerParams::Conv(p), "weight") => (p.weights.shape(), p.weights.as_mut_slice()),
            (LayerParams::Conv(p), "bias") => (vector_shape(p.bias.len()), &mut p.bias),
            (LayerParams::Norm(p), "gamma") => (vector_shape(p.gamma.len()), &mut p.gamma),
            (LayerParams::Norm(p), "beta") => (vector_shape(p.beta.len()), &mut p.beta),
            _ => return Err(Error::Graph(format!("layer {layer} has no field {field}"))),
        };
        if target_shape != shape || target.len() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{layer}/{field}: stored {shape} but model expects {target_shape}"
            )));
        }
        target.copy_from_slice(data);
        self.version += 1;
        Ok(())
    }

    /// Value at flat position `i` over all buffers in registry order.
    pub fn get_flat(&self, i: usize) -> Option<f64> {
        let mut i = i;
        for v in self.values() {
            if i < v.values.len() {
                return Some(v.values[i]);
            }
            i -= v.values.len();
        }
        None
    }

    /// Overwrites flat position `i`; returns false when out of range.
    pub fn set_flat(&mut self, i: usize, value: f64) -> bool {
        let mut i = i;
        let mut done = false;
        let _ = self.update_each(|vals, _| {
            if !done {
                if i < vals.len() {
                    vals[i] = value;
                    done = true;
                } else {
                    i -= vals.len();
                }
            }
            Ok(())
        });
        done
    }

    /// Gradient at flat position `i`, same indexing as [`ParamStore::get_flat`].
    pub fn grad_flat(&self, i: usize) -> Option<f64> {
        let mut i = i;
        for g in self.grads() {
            if i < g.len() {
                return Some(g[i]);
            }
            i -= g.len();
        }
        None
    }

    pub fn conv(&self, layer: &str) -> Option<&ConvParams> {
        self.entries.iter().find(|e| e.layer == layer).and_then(|e| match &e.params {
            LayerParams::Conv(p) => Some(p),
            LayerParams::Norm(_) => None,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.values.iter().all(|x| x.is_finite()))
    }
}
