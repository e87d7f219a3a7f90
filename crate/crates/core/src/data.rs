//! Volumes, patch planning, augmentation, fold splitting and stitching.
//!
//! A volume of `X x Y x L` voxels is held as a tensor of shape `(1, Y, X, L, c)`.
//! Patch origins and sizes are written in `(x, y, z)` order.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Shape5, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeMeta {
    /// X extent.
    pub width: usize,
    /// Y extent.
    pub height: usize,
    /// Z extent `L`.
    pub slices: usize,
    pub dtype: Dtype,
    pub kind: VolumeKind,
    pub source: String,
}

impl VolumeMeta {
    pub fn image(width: usize, height: usize, slices: usize, source: impl Into<String>) -> Self {
        VolumeMeta { width, height, slices, dtype: Dtype::F32, kind: VolumeKind::Image, source: source.into() }
    }

    pub fn label(width: usize, height: usize, slices: usize, source: impl Into<String>) -> Self {
        VolumeMeta { width, height, slices, dtype: Dtype::U8, kind: VolumeKind::Label, source: source.into() }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.width, self.height, self.slices]
    }

    pub fn voxels(&self) -> usize {
        self.width * self.height * self.slices
    }

    pub fn shape(&self) -> Result<Shape5> {
        Shape5::new(1, self.height, self.width, self.slices, 1)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape()?;
        let consistent = match self.kind {
            VolumeKind::Image => self.dtype == Dtype::F32,
            VolumeKind::Label => self.dtype == Dtype::U8,
        };
        if !consistent {
            return Err(Error::InvalidData(format!("{:?} volumes must be stored as {:?}", self.kind, self.dtype)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub meta: VolumeMeta,
    pub data: Tensor,
}

impl Volume {
    pub fn new(meta: VolumeMeta, data: Tensor) -> Result<Self> {
        meta.validate()?;
        if data.shape() != meta.shape()? {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} volume but tensor {}",
                meta.width,
                meta.height,
                meta.slices,
                data.shape()
            )));
        }
        if meta.kind == VolumeKind::Label {
            check_binary(&data)?;
        }
        Ok(Volume { meta, data })
    }

    pub fn foreground(&self) -> usize {
        self.data.as_slice().iter().filter(|&&v| v == 1.0).count()
    }
}

pub fn check_binary(t: &Tensor) -> Result<()> {
    match t.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::InvalidData(format!("label value {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Divides by the volume maximum. Negative voxels are rejected; shift them
/// into the non-negative range before calling.
pub fn normalize_intensity(v: &Tensor) -> Result<Tensor> {
    v.ensure_finite("volume")?;
    if let Some(neg) = v.as_slice().iter().find(|&&x| x < 0.0) {
        return Err(Error::InvalidData(format!("negative intensity {neg}")));
    }
    let max = v.as_slice().iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::InvalidData("volume maximum is not positive".into()));
    }
    Ok(v.map(|x| x / max))
}

/// Extent along one axis: a fixed count or the full volume extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extent {
    Full,
    #[serde(untagged)]
    Fixed(usize),
}

impl Extent {
    fn resolve(self, volume: usize) -> usize {
        match self {
            Extent::Full => volume,
            Extent::Fixed(n) => n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
}

/// Crop size and strides, all in `(x, y, z)` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchPolicy {
    pub name: String,
    pub patch: [Extent; 3],
    pub train_stride: [Extent; 3],
    pub eval_stride: [Extent; 3],
}

impl PatchPolicy {
    /// Full in-plane slab, 8 slices deep.
    pub fn patch512() -> Self {
        PatchPolicy {
            name: "patch512".into(),
            patch: [Extent::Full, Extent::Full, Extent::Fixed(8)],
            train_stride: [Extent::Full, Extent::Full, Extent::Fixed(1)],
            eval_stride: [Extent::Full, Extent::Full, Extent::Fixed(8)],
        }
    }

    pub fn patch128() -> Self {
        PatchPolicy {
            name: "patch128".into(),
            patch: [Extent::Fixed(128), Extent::Fixed(128), Extent::Fixed(64)],
            train_stride: [Extent::Fixed(128), Extent::Fixed(128), Extent::Fixed(8)],
            eval_stride: [Extent::Fixed(128), Extent::Fixed(128), Extent::Fixed(64)],
        }
    }

    pub fn patch64() -> Self {
        PatchPolicy {
            name: "patch64".into(),
            patch: [Extent::Fixed(64); 3],
            train_stride: [Extent::Fixed(64), Extent::Fixed(64), Extent::Fixed(8)],
            eval_stride: [Extent::Fixed(64); 3],
        }
    }

    /// `n^3` cubes; training steps half a cube along z.
    pub fn cube(n: usize) -> Self {
        PatchPolicy {
            name: format!("cube{n}"),
            patch: [Extent::Fixed(n); 3],
            train_stride: [Extent::Fixed(n), Extent::Fixed(n), Extent::Fixed((n / 2).max(1))],
            eval_stride: [Extent::Fixed(n); 3],
        }
    }

    /// `patch512`, `patch128`, `patch64` or `cube<N>`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "patch512" => Ok(Self::patch512()),
            "patch128" => Ok(Self::patch128()),
            "patch64" => Ok(Self::patch64()),
            _ => match name.strip_prefix("cube").and_then(|n| n.parse::<usize>().ok()) {
                Some(n) if n > 0 => Ok(Self::cube(n)),
                _ => Err(Error::Unsupported(format!("unknown patch policy {name:?}"))),
            },
        }
    }

    /// Patch size for a volume of `dims = (X, Y, L)`.
    pub fn patch_size(&self, dims: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| self.patch[a].resolve(dims[a]))
    }

    pub fn stride(&self, phase: Phase, dims: [usize; 3]) -> [usize; 3] {
        let s = match phase {
            Phase::Train => &self.train_stride,
            Phase::Eval => &self.eval_stride,
        };
        [0, 1, 2].map(|a| s[a].resolve(dims[a]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPlan {
    pub policy: PatchPolicy,
    /// Volume extent `(X, Y, L)`.
    pub dims: [usize; 3],
    /// Patch extent `(px, py, pz)`.
    pub patch: [usize; 3],
    /// Crop origins `(x0, y0, z0)`, z outermost.
    pub origins: Vec<[usize; 3]>,
}

impl PatchPlan {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Tensor shape of one patch with `c` channels.
    pub fn patch_shape(&self, c: usize) -> Result<Shape5> {
        Shape5::new(1, self.patch[1], self.patch[0], self.patch[2], c)
    }
}

fn axis_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Origins at multiples of the phase stride, with the last one on each axis
/// clamped so the crops reach the far border.
pub fn plan_patches(meta: &VolumeMeta, policy: &PatchPolicy, phase: Phase) -> Result<PatchPlan> {
    let dims = meta.dims();
    let patch = policy.patch_size(dims);
    let stride = policy.stride(phase, dims);
    for a in 0..3 {
        if patch[a] == 0 || stride[a] == 0 {
            return Err(Error::InvalidShape(format!("policy {} has a zero extent", policy.name)));
        }
        if patch[a] > dims[a] {
            return Err(Error::InvalidShape(format!(
                "patch {:?} does not fit volume {:?}",
                patch, dims
            )));
        }
    }
    let [xs, ys, zs] = [0, 1, 2].map(|a| axis_origins(dims[a], patch[a], stride[a]));
    let mut origins = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(PatchPlan { policy: policy.clone(), dims, patch, origins })
}

fn check_volume(plan: &PatchPlan, volume: &Tensor) -> Result<()> {
    let s = volume.shape();
    if s.n != 1 || [s.w, s.h, s.d] != plan.dims {
        return Err(Error::ShapeMismatch(format!("volume {s} does not match plan {:?}", plan.dims)));
    }
    Ok(())
}

/// Copy of crop `i` of `volume`, shape `(1, py, px, pz, c)`.
pub fn extract(volume: &Tensor, plan: &PatchPlan, i: usize) -> Result<Tensor> {
    check_volume(plan, volume)?;
    let [x0, y0, z0] = *plan
        .origins
        .get(i)
        .ok_or_else(|| Error::OutOfRange(format!("patch {i} of {}", plan.len())))?;
    let s = volume.shape();
    let out_shape = plan.patch_shape(s.c)?;
    let [px, py, pz] = plan.patch;
    let src = volume.as_slice();
    let mut out = Vec::with_capacity(out_shape.len());
    let run = pz * s.c;
    for y in 0..py {
        for x in 0..px {
            let start = s.index(0, y0 + y, x0 + x, z0, 0);
            out.extend_from_slice(&src[start..start + run]);
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// The pair plus its 90, 180 and 270 degree rotations about z.
pub fn augment_rotations(patch: &Tensor, label: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
    if patch.shape().with_c(1) != label.shape().with_c(1) {
        return Err(Error::ShapeMismatch(format!("patch {} vs label {}", patch.shape(), label.shape())));
    }
    (0..4u8).map(|k| Ok((patch.rot90_z(k)?, label.rot90_z(k)?))).collect()
}

/// Reassembles per-patch predictions, averaging voxels covered more than once.
pub fn stitch(plan: &PatchPlan, predictions: &[Tensor]) -> Result<Tensor> {
    if predictions.len() != plan.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for a plan of {} patches",
            predictions.len(),
            plan.len()
        )));
    }
    let c = predictions.first().map_or(1, |p| p.shape().c);
    let [x_dim, y_dim, l] = plan.dims;
    let shape = Shape5::new(1, y_dim, x_dim, l, c)?;
    let patch_shape = plan.patch_shape(c)?;
    let mut sum = vec![0.0; shape.len()];
    let mut hits = vec![0u32; shape.spatial()];
    let [px, py, pz] = plan.patch;
    for (p, &[x0, y0, z0]) in predictions.iter().zip(&plan.origins) {
        if p.shape() != patch_shape {
            return Err(Error::ShapeMismatch(format!("prediction {} vs patch {patch_shape}", p.shape())));
        }
        let src = p.as_slice();
        for y in 0..py {
            for x in 0..px {
                for z in 0..pz {
                    let dst = shape.index(0, y0 + y, x0 + x, z0 + z, 0);
                    let from = patch_shape.index(0, y, x, z, 0);
                    for ch in 0..c {
                        sum[dst + ch] += src[from + ch];
                    }
                    hits[dst / c] += 1;
                }
            }
        }
    }
    for (v, chunk) in sum.chunks_exact_mut(c).enumerate() {
        let n = hits[v];
        if n == 0 {
            return Err(Error::InvalidData(format!("plan leaves voxel {:?} uncovered", shape.coords(v * c))));
        }
        if n > 1 {
            for x in chunk {
                *x /= n as f64;
            }
        }
    }
    Tensor::from_vec(shape, sum)
}

/// How volume ids are divided into train/validation/test groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    /// 20 ids in two halves; each fold trains on one half (10) and splits
    /// the other into 2 validation and 8 test volumes.
    #[serde(rename = "two_fold_10_2_8")]
    TwoFold10_2_8,
    /// 60 ids: 36 for training (the last 4 of them held out for
    /// validation) and 24 for testing.
    #[serde(rename = "fixed_36_24")]
    Fixed36_24,
    /// A single fold with the given group sizes.
    Custom { train: usize, val: usize, test: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn split_folds(ids: &[String], seed: u64, scheme: SplitScheme) -> Result<Vec<Fold>> {
    let expected = match scheme {
        SplitScheme::TwoFold10_2_8 => 20,
        SplitScheme::Fixed36_24 => 60,
        SplitScheme::Custom { train, val, test } => train + val + test,
    };
    if ids.len() != expected {
        return Err(Error::InvalidData(format!("{:?} needs {expected} ids, got {}", scheme, ids.len())));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidData("duplicate volume id".into()));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |r: core::ops::Range<usize>| shuffled[r].to_vec();
    Ok(match scheme {
        SplitScheme::TwoFold10_2_8 => vec![
            Fold { train: take(0..10), val: take(10..12), test: take(12..20) },
            Fold { train: take(10..20), val: take(0..2), test: take(2..10) },
        ],
        SplitScheme::Fixed36_24 => vec![Fold { train: take(0..32), val: take(32..36), test: take(36..60) }],
        SplitScheme::Custom { train, val, test } => vec![Fold {
            train: take(0..train),
            val: take(train..train + val),
            test: take(train + val..train + val + test),
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn meta(x: usize, y: usize, l: usize) -> VolumeMeta {
        VolumeMeta::image(x, y, l, "v")
    }

    fn ramp(x: usize, y: usize, l: usize, c: usize) -> Tensor {
        Tensor::from_fn(Shape5::new(1, y, x, l, c).unwrap(), |[_, h, w, d, ch]| {
            (h * 1000 + w * 10 + d) as f64 + ch as f64 * 0.5
        })
        .unwrap()
    }

    #[test]
    fn normalize_examples() {
        let v = Tensor::from_vec(Shape5::new(1, 1, 3, 1, 1).unwrap(), vec![0.0, 5.0, 10.0]).unwrap();
        assert_eq!(normalize_intensity(&v).unwrap().as_slice(), &[0.0, 0.5, 1.0]);
        let n = normalize_intensity(&v).unwrap();
        assert_eq!(normalize_intensity(&n).unwrap(), n);
        assert!(normalize_intensity(&v.scale(-1.0)).is_err());
        assert!(normalize_intensity(&v.scale(0.0)).is_err());
    }

    #[test]
    fn patch512_counts() {
        let p = PatchPolicy::patch512();
        let train = plan_patches(&meta(16, 16, 400), &p, Phase::Train).unwrap();
        assert_eq!(train.len(), 393);
        assert_eq!(train.origins.last().unwrap(), &[0, 0, 392]);
        let eval = plan_patches(&meta(16, 16, 400), &p, Phase::Eval).unwrap();
        let z: Vec<usize> = eval.origins.iter().map(|o| o[2]).collect();
        assert_eq!(z, (0..50).map(|i| i * 8).collect::<Vec<_>>());
        assert!(eval.origins.iter().all(|o| o[0] == 0 && o[1] == 0));
        assert_eq!(eval.patch, [16, 16, 8]);
    }

    #[test]
    fn patch128_count() {
        let plan = plan_patches(&meta(512, 512, 448), &PatchPolicy::patch128(), Phase::Train).unwrap();
        assert_eq!(plan.len(), 784);
    }

    #[test]
    fn patch_too_large() {
        assert!(plan_patches(&meta(64, 64, 32), &PatchPolicy::patch128(), Phase::Eval).is_err());
        assert!(plan_patches(&meta(16, 16, 7), &PatchPolicy::patch512(), Phase::Eval).is_err());
    }

    #[test]
    fn clamped_eval_origins() {
        let plan = plan_patches(&meta(4, 4, 12), &PatchPolicy::patch512(), Phase::Eval).unwrap();
        assert_eq!(plan.origins, vec![[0, 0, 0], [0, 0, 4]]);
    }

    #[test]
    fn policy_names() {
        for name in ["patch512", "patch128", "patch64", "cube16"] {
            assert_eq!(PatchPolicy::by_name(name).unwrap().name, name);
        }
        assert!(PatchPolicy::by_name("cube0").is_err());
        assert!(PatchPolicy::by_name("patch32").is_err());
    }

    #[test]
    fn extract_whole_and_adjacent() {
        let v = ramp(4, 3, 10, 1);
        let whole = PatchPolicy {
            name: "whole".into(),
            patch: [Extent::Full; 3],
            train_stride: [Extent::Full; 3],
            eval_stride: [Extent::Full; 3],
        };
        let plan = plan_patches(&meta(4, 3, 10), &whole, Phase::Eval).unwrap();
        assert_eq!(extract(&v, &plan, 0).unwrap(), v);
        assert!(extract(&v, &plan, 1).is_err());

        let plan = plan_patches(&meta(4, 3, 10), &PatchPolicy::patch512(), Phase::Train).unwrap();
        let a = extract(&v, &plan, 0).unwrap();
        let b = extract(&v, &plan, 1).unwrap();
        assert_eq!(a.slice_z(1, 7).unwrap(), b.slice_z(0, 7).unwrap());
        assert_eq!(a.get(0, 2, 3, 4, 0), v.get(0, 2, 3, 4, 0));
    }

    #[test]
    fn rotations() {
        let p = ramp(4, 4, 2, 1);
        let l = Tensor::from_fn(p.shape(), |[_, h, w, _, _]| if h == 0 && w < 3 { 1.0 } else { 0.0 }).unwrap();
        let pairs = augment_rotations(&p, &l).unwrap();
        assert_eq!(pairs.len(), 4);
        assert_eq!(pairs[0], (p.clone(), l.clone()));
        for (_, lr) in &pairs {
            assert_eq!(lr.sum(), 6.0);
        }
        let half = &pairs[2].0;
        assert_eq!(half.rot90_z(2).unwrap(), p);
        let wide = ramp(4, 3, 2, 1);
        assert!(augment_rotations(&wide, &wide).is_err());
    }

    #[test]
    fn stitch_inverts_extract() {
        let m = meta(4, 3, 12);
        let field = ramp(4, 3, 12, 2);
        let plan = plan_patches(&m, &PatchPolicy::patch512(), Phase::Eval).unwrap();
        let parts: Vec<Tensor> = (0..plan.len()).map(|i| extract(&field, &plan, i).unwrap()).collect();
        assert_eq!(stitch(&plan, &parts).unwrap(), field);
        assert!(stitch(&plan, &parts[..1]).is_err());
    }

    #[test]
    fn stitch_averages_overlap() {
        let plan = plan_patches(&meta(2, 2, 12), &PatchPolicy::patch512(), Phase::Eval).unwrap();
        let shape = plan.patch_shape(1).unwrap();
        let parts = vec![Tensor::new_filled(shape, 1.0).unwrap(), Tensor::new_filled(shape, 3.0).unwrap()];
        let out = stitch(&plan, &parts).unwrap();
        for z in 0..12 {
            let expected = match z {
                0..=3 => 1.0,
                4..=7 => 2.0,
                _ => 3.0,
            };
            assert_eq!(out.get(0, 1, 1, z, 0), expected);
        }
    }

    #[test]
    fn folds() {
        let ids: Vec<String> = (0..20).map(|i| i.to_string()).collect();
        let folds = split_folds(&ids, 3, SplitScheme::TwoFold10_2_8).unwrap();
        assert_eq!(folds.len(), 2);
        for f in &folds {
            assert_eq!((f.train.len(), f.val.len(), f.test.len()), (10, 2, 8));
            let mut all: Vec<String> = f.train.iter().chain(&f.val).chain(&f.test).cloned().collect();
            all.sort();
            let mut want = ids.clone();
            want.sort();
            assert_eq!(all, want);
        }
        assert_eq!(folds, split_folds(&ids, 3, SplitScheme::TwoFold10_2_8).unwrap());
        assert_ne!(folds, split_folds(&ids, 4, SplitScheme::TwoFold10_2_8).unwrap());
        assert!(split_folds(&ids, 3, SplitScheme::Fixed36_24).is_err());
        let sixty: Vec<String> = (0..60).map(|i| i.to_string()).collect();
        let f = &split_folds(&sixty, 0, SplitScheme::Fixed36_24).unwrap()[0];
        assert_eq!(f.train.len() + f.val.len(), 36);
        assert_eq!(f.test.len(), 24);
    }

    #[test]
    fn label_volume_must_be_binary() {
        let m = VolumeMeta::label(2, 2, 1, "l");
        let bad = Tensor::from_vec(m.shape().unwrap(), vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        assert!(Volume::new(m.clone(), bad).is_err());
        let good = Tensor::from_vec(m.shape().unwrap(), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(Volume::new(m, good).unwrap().foreground(), 2);
    }
}
