//! The six architectures: 3D U-Net, V-Net and their factorized variants.
//!
//! Every convolution is followed by instance normalization and ReLU, except
//! the final 1x1x1 classifier and the V-Net residual projections. In the
//! factorized modes a `k x k x k` convolution becomes `k x k x 1`; mode 1
//! follows each of those with a `1 x 1 x depth` convolution, mode 2 only
//! places one `1 x 1 x depth` convolution in front of every down- and
//! up-sampling layer. Sampling layers themselves stay 3D.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{resolve, DepthExtent, LayerKind, LayerSpec, ModelGraph, NodeOp, INPUT};
use crate::tensor::Shape5;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Unet,
    Vnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full3d,
    ZV1,
    ZV2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub family: Family,
    pub mode: Mode,
    /// Number of down-sampling steps.
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { family: Family::Unet, mode: Mode::Full3d, levels: 3, base_channels: 8, in_channels: 1, out_classes: 2 }
    }
}

/// Names accepted on the command line, in the order they are listed there.
pub const ARCH_NAMES: [&str; 6] = ["unet", "vnet", "zunet-v1", "zunet-v2", "zvnet-v1", "zvnet-v2"];

impl FromStr for ArchConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (family, mode) = match s {
            "unet" => (Family::Unet, Mode::Full3d),
            "vnet" => (Family::Vnet, Mode::Full3d),
            "zunet-v1" => (Family::Unet, Mode::ZV1),
            "zunet-v2" => (Family::Unet, Mode::ZV2),
            "zvnet-v1" => (Family::Vnet, Mode::ZV1),
            "zvnet-v2" => (Family::Vnet, Mode::ZV2),
            other => return Err(Error::Unsupported(format!("unknown architecture {other:?}"))),
        };
        Ok(ArchConfig { family, mode, ..ArchConfig::default() })
    }
}

impl ArchConfig {
    pub fn name(&self) -> &'static str {
        match (self.family, self.mode) {
            (Family::Unet, Mode::Full3d) => "unet",
            (Family::Vnet, Mode::Full3d) => "vnet",
            (Family::Unet, Mode::ZV1) => "zunet-v1",
            (Family::Unet, Mode::ZV2) => "zunet-v2",
            (Family::Vnet, Mode::ZV1) => "zvnet-v1",
            (Family::Vnet, Mode::ZV2) => "zvnet-v2",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 {
            return Err(Error::Unsupported("levels and base_channels must be at least 1".into()));
        }
        if self.in_channels != 1 || self.out_classes != 2 {
            return Err(Error::Unsupported("only one input channel and two classes are supported".into()));
        }
        if self.base_channels.checked_shl(self.levels as u32 + 1).is_none() || self.levels > 16 {
            return Err(Error::Unsupported("channel schedule overflows".into()));
        }
        Ok(())
    }

    /// Channels at encoder level `l` (0-based); the bottleneck is `l = levels`.
    pub fn channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Smallest extent each spatial axis must be a multiple of.
    pub fn granularity(&self) -> usize {
        1 << self.levels
    }

    pub fn build(&self) -> Result<Vec<LayerSpec>> {
        match self.family {
            Family::Unet => build_unet(self),
            Family::Vnet => build_vnet(self),
        }
    }
}

struct Builder {
    mode: Mode,
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn push(&mut self, name: String, kind: LayerKind, from: Option<&str>) -> String {
        let mut spec = LayerSpec::new(name.clone(), kind);
        if let Some(f) = from {
            spec = spec.from(&[f]);
        }
        self.layers.push(spec);
        name
    }

    fn norm_relu(&mut self, name: &str) -> String {
        self.push(format!("{name}/norm"), LayerKind::InstanceNorm, None);
        self.push(format!("{name}/relu"), LayerKind::Relu, None)
    }

    fn conv_unit(&mut self, name: &str, kind: LayerKind, from: Option<&str>) -> String {
        self.push(name.into(), kind, from);
        self.norm_relu(name)
    }

    /// `1 x 1 x depth` convolution keeping the channel count.
    fn depth_conv(&mut self, name: &str, c: usize, from: Option<&str>) -> String {
        self.conv_unit(name, LayerKind::conv(1, 1, DepthExtent::FullDepth, c), from)
    }

    /// A `k x k x k` convolution block as rewritten by the current mode.
    fn block(&mut self, name: &str, k: usize, c_out: usize, from: Option<&str>) -> String {
        match self.mode {
            Mode::Full3d => self.conv_unit(name, LayerKind::conv(k, k, DepthExtent::Fixed(k), c_out), from),
            Mode::ZV2 => self.conv_unit(name, LayerKind::conv(k, k, DepthExtent::Fixed(1), c_out), from),
            Mode::ZV1 => {
                let planar = self.conv_unit(&format!("{name}/xy"), LayerKind::conv(k, k, DepthExtent::Fixed(1), c_out), from);
                self.depth_conv(&format!("{name}/z"), c_out, Some(&planar))
            }
        }
    }

    /// Mode-2 depth convolution in front of a sampling layer.
    fn before_sampling(&mut self, name: &str, c: usize, from: &str) -> String {
        if self.mode == Mode::ZV2 {
            self.depth_conv(name, c, Some(from))
        } else {
            from.into()
        }
    }

    fn classifier(mut self, classes: usize, from: &str) -> Vec<LayerSpec> {
        self.push("classifier".into(), LayerKind::conv(1, 1, DepthExtent::Fixed(1), classes), Some(from));
        self.layers
    }
}

/// Encoder of two convolutions and a max pool per level, two bottleneck
/// convolutions, and a decoder of up-convolution, skip concatenation and two
/// convolutions per level.
pub fn build_unet(cfg: &ArchConfig) -> Result<Vec<LayerSpec>> {
    cfg.validate()?;
    if cfg.family != Family::Unet {
        return Err(Error::Unsupported(format!("{} is not a U-Net", cfg.name())));
    }
    let mut b = Builder { mode: cfg.mode, layers: Vec::new() };
    let mut prev = String::from(INPUT);
    let mut skips = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        let c = cfg.channels(l);
        prev = b.block(&format!("enc{l}/conv1"), 3, c, Some(&prev));
        prev = b.block(&format!("enc{l}/conv2"), 3, c, Some(&prev));
        prev = b.before_sampling(&format!("enc{l}/depth"), c, &prev);
        skips.push(prev.clone());
        prev = b.push(format!("enc{l}/pool"), LayerKind::MaxPool, Some(&prev));
    }
    let c = cfg.channels(cfg.levels);
    prev = b.block("bottom/conv1", 3, c, Some(&prev));
    prev = b.block("bottom/conv2", 3, c, Some(&prev));
    let mut c_prev = c;
    for l in (0..cfg.levels).rev() {
        let c = cfg.channels(l);
        prev = b.before_sampling(&format!("dec{l}/depth"), c_prev, &prev);
        let up = b.conv_unit(&format!("dec{l}/up"), LayerKind::UpConv { c_out: c }, Some(&prev));
        let cat = format!("dec{l}/concat");
        b.layers.push(LayerSpec::new(cat.clone(), LayerKind::Concat).from(&[&up, &skips[l]]));
        prev = b.block(&format!("dec{l}/conv1"), 3, c, Some(&cat));
        prev = b.block(&format!("dec{l}/conv2"), 3, c, Some(&prev));
        c_prev = c;
    }
    Ok(b.classifier(cfg.out_classes, &prev))
}

/// Residual stages with `min(i, 3)` convolutions at encoder stage `i`,
/// strided-convolution down-sampling, a three-convolution bottleneck and a
/// mirrored decoder. Where a stage input has a different channel count from
/// its output the residual goes through a 1x1x1 projection.
pub fn build_vnet(cfg: &ArchConfig) -> Result<Vec<LayerSpec>> {
    cfg.validate()?;
    if cfg.family != Family::Vnet {
        return Err(Error::Unsupported(format!("{} is not a V-Net", cfg.name())));
    }
    let mut b = Builder { mode: cfg.mode, layers: Vec::new() };
    let mut prev = String::from(INPUT);
    let mut c_in = cfg.in_channels;
    let mut skips = Vec::with_capacity(cfg.levels);

    let stage = |b: &mut Builder, name: &str, n: usize, input: &str, first_from: &str, c_in: usize, c: usize| {
        let mut x = String::from(first_from);
        for j in 1..=n {
            x = b.block(&format!("{name}/conv{j}"), 5, c, Some(&x));
        }
        let residual = if c_in == c {
            String::from(input)
        } else {
            b.push(format!("{name}/project"), LayerKind::conv(1, 1, DepthExtent::Fixed(1), c), Some(input))
        };
        let add = format!("{name}/add");
        b.layers.push(LayerSpec::new(add.clone(), LayerKind::Add).from(&[&x, &residual]));
        add
    };

    for i in 1..=cfg.levels {
        let c = cfg.channels(i - 1);
        let name = format!("enc{i}");
        prev = stage(&mut b, &name, i.min(3), &prev, &prev, c_in, c);
        skips.push(prev.clone());
        prev = b.before_sampling(&format!("{name}/depth"), c, &prev);
        prev = b.conv_unit(&format!("{name}/down"), LayerKind::down_conv(2 * c), Some(&prev));
        c_in = 2 * c;
    }
    let c = cfg.channels(cfg.levels);
    prev = stage(&mut b, "bottom", 3, &prev, &prev, c_in, c);
    let mut c_prev = c;
    for i in (1..=cfg.levels).rev() {
        let c = cfg.channels(i - 1);
        let name = format!("dec{i}");
        prev = b.before_sampling(&format!("{name}/depth"), c_prev, &prev);
        let up = b.conv_unit(&format!("{name}/up"), LayerKind::UpConv { c_out: c }, Some(&prev));
        let cat = format!("{name}/concat");
        b.layers.push(LayerSpec::new(cat.clone(), LayerKind::Concat).from(&[&up, &skips[i - 1]]));
        prev = stage(&mut b, &name, i.min(3), &up, &cat, c, c);
        c_prev = c;
    }
    Ok(b.classifier(cfg.out_classes, &prev))
}

/// Trainable scalars of `spec` at `input_shape`, full-depth kernels resolved.
pub fn count_params(spec: &[LayerSpec], input_shape: Shape5) -> Result<usize> {
    Ok(resolve(spec, input_shape)?.param_count())
}

/// Convolutions other than down/up-sampling layers, in graph order:
/// `(layer, kh, kw, kd)`.
pub fn feature_convs(g: &ModelGraph) -> Vec<(&str, usize, usize, usize)> {
    g.nodes
        .iter()
        .filter_map(|n| match n.op {
            NodeOp::Conv { spec, .. } if spec.stride == 1 => Some((n.name.as_str(), spec.kh, spec.kw, spec.kd)),
            _ => None,
        })
        .collect()
}

/// Layers that combine voxels of different slices other than through a
/// `1 x 1 x depth` convolution or a sampling layer.
pub fn slice_mixing_layers(g: &ModelGraph) -> Vec<&str> {
    g.nodes
        .iter()
        .filter(|n| match n.op {
            NodeOp::Conv { spec, .. } => {
                let depth = g.nodes[n.inputs[0]].shape.d;
                let full_depth_line = spec.kh == 1 && spec.kw == 1 && spec.kd == depth;
                spec.stride == 1 && spec.kd > 1 && !full_depth_line
            }
            _ => false,
        })
        .map(|n| n.name.as_str())
        .collect()
}

fn kind_label(op: &NodeOp) -> String {
    match op {
        NodeOp::Input => "input".into(),
        NodeOp::Conv { spec, .. } if spec.stride > 1 => {
            format!("conv {}x{}x{} /{}", spec.kh, spec.kw, spec.kd, spec.stride)
        }
        NodeOp::Conv { spec, .. } => format!("conv {}x{}x{}", spec.kh, spec.kw, spec.kd),
        NodeOp::UpConv { spec, .. } => format!("upconv {}x{}x{} x{}", spec.kh, spec.kw, spec.kd, spec.stride),
        NodeOp::Norm { .. } => "instnorm".into(),
        NodeOp::Relu => "relu".into(),
        NodeOp::MaxPool => "maxpool 2".into(),
        NodeOp::Concat => "concat".into(),
        NodeOp::Add => "add".into(),
    }
}

fn shape_label(s: Shape5) -> String {
    format!("{}x{}x{}x{}", s.h, s.w, s.d, s.c)
}

/// One row per layer and a final `total` row.
pub fn summarize(spec: &[LayerSpec], input_shape: Shape5) -> Result<String> {
    let g = resolve(spec, input_shape)?;
    let mut out = String::new();
    let _ = writeln!(out, "{:<22} {:<18} {:>14} {:>14} {:>10}", "layer", "kind", "in", "out", "params");
    let mut total = 0usize;
    for node in g.nodes.iter().skip(1) {
        let params = match node.op {
            NodeOp::Conv { spec, .. } | NodeOp::UpConv { spec, .. } => spec.param_count(),
            NodeOp::Norm { .. } => 2 * node.shape.c,
            _ => 0,
        };
        total += params;
        let _ = writeln!(
            out,
            "{:<22} {:<18} {:>14} {:>14} {:>10}",
            node.name,
            kind_label(&node.op),
            shape_label(g.nodes[node.inputs[0]].shape),
            shape_label(node.shape),
            params
        );
    }
    let _ = writeln!(out, "total {total}");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::compile;
    use alloc::vec;

    fn input() -> Shape5 {
        Shape5::new(1, 16, 16, 8, 1).unwrap()
    }

    fn arch(s: &str) -> ArchConfig {
        s.parse().unwrap()
    }

    fn graph(s: &str) -> ModelGraph {
        compile(&arch(s).build().unwrap(), input()).unwrap()
    }

    fn total(s: &str) -> usize {
        count_params(&arch(s).build().unwrap(), input()).unwrap()
    }

    #[test]
    fn arch_strings_round_trip() {
        for name in ARCH_NAMES {
            assert_eq!(arch(name).name(), name);
        }
        assert!("unet3d".parse::<ArchConfig>().is_err());
    }

    #[test]
    fn invalid_config() {
        let mut cfg = ArchConfig { levels: 0, ..ArchConfig::default() };
        assert!(build_unet(&cfg).is_err());
        cfg.levels = 3;
        cfg.base_channels = 0;
        assert!(build_unet(&cfg).is_err());
        assert!(build_vnet(&ArchConfig::default()).is_err());
    }

    #[test]
    fn unet_conv_counts() {
        assert_eq!(feature_convs(&graph("unet")).len(), 15);
        assert_eq!(feature_convs(&graph("zunet-v1")).len(), 29);
        let g2 = graph("zunet-v2");
        let v2 = feature_convs(&g2);
        assert_eq!(v2.len(), 21);
        let one_d = v2.iter().filter(|c| c.0.ends_with("depth")).count();
        assert_eq!(one_d, 6);
        let planar = v2.iter().filter(|c| c.3 == 1 && c.1 == 3).count();
        assert_eq!(planar, 14);
    }

    #[test]
    fn vnet_stage_counts() {
        let g = graph("vnet");
        let convs = feature_convs(&g);
        let count = |prefix: &str| {
            convs.iter().filter(|c| c.0.starts_with(prefix) && c.1 == 5).count()
        };
        assert_eq!([count("enc1/"), count("enc2/"), count("enc3/")], [1, 2, 3]);
        assert_eq!(count("bottom/"), 3);
        assert_eq!([count("dec3/"), count("dec2/"), count("dec1/")], [3, 2, 1]);
        assert!(convs.iter().any(|c| c.0 == "enc1/project"));
        assert_eq!(convs.iter().filter(|c| c.0.ends_with("project")).count(), 1);

        let g2 = graph("zvnet-v2");
        let v2 = feature_convs(&g2);
        assert_eq!(v2.iter().filter(|c| c.0.ends_with("depth")).count(), 6);
    }

    #[test]
    fn every_model_preserves_shape() {
        for name in ARCH_NAMES {
            for s in [Shape5::new(2, 8, 16, 8, 1).unwrap(), Shape5::new(1, 16, 8, 16, 1).unwrap()] {
                let g = compile(&arch(name).build().unwrap(), s).unwrap();
                assert_eq!(g.output().shape, s.with_c(2), "{name}");
            }
        }
    }

    #[test]
    fn closed_form_counts() {
        let one = |kd| {
            vec![LayerSpec::new("c", LayerKind::conv(3, 3, kd, 16))]
        };
        let s = Shape5::new(1, 4, 4, 8, 8).unwrap();
        assert_eq!(count_params(&one(DepthExtent::Fixed(3)), s).unwrap(), 3472);
        let pair = vec![
            LayerSpec::new("xy", LayerKind::conv(3, 3, DepthExtent::Fixed(1), 16)),
            LayerSpec::new("z", LayerKind::conv(1, 1, DepthExtent::FullDepth, 16)),
        ];
        assert_eq!(count_params(&pair, s).unwrap(), 3232);
        assert_eq!((count_params(&one(DepthExtent::Fixed(1)), s).unwrap() - 16) * 3, 3472 - 16);
    }

    #[test]
    fn mode_ordering() {
        for (full, v1, v2) in [("unet", "zunet-v1", "zunet-v2"), ("vnet", "zvnet-v1", "zvnet-v2")] {
            assert!(total(v2) <= total(v1), "{v2} vs {v1}");
            assert!(total(v1) < total(full), "{v1} vs {full}");
        }
        assert!(total("zunet-v2") < total("zunet-v1"));
        assert!((total("zunet-v1") as f64) < 0.5 * total("unet") as f64);
        assert!((total("zunet-v2") as f64) < 0.5 * total("unet") as f64);
        let ratio = total("zvnet-v2") as f64 / total("vnet") as f64;
        assert!((0.15..=0.35).contains(&ratio), "{ratio}");
    }

    #[test]
    fn z_modes_do_not_mix_slices() {
        for name in ["zunet-v1", "zunet-v2", "zvnet-v1", "zvnet-v2"] {
            assert!(slice_mixing_layers(&graph(name)).is_empty(), "{name}");
        }
        assert!(!slice_mixing_layers(&graph("unet")).is_empty());
    }

    #[test]
    fn summary_total_matches() {
        for name in ARCH_NAMES {
            let spec = arch(name).build().unwrap();
            let text = summarize(&spec, input()).unwrap();
            let last = text.lines().last().unwrap();
            assert_eq!(last, format!("total {}", count_params(&spec, input()).unwrap()));
        }
    }
}
