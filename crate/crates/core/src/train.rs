//! SGD with momentum, the step learning-rate schedule, the epoch loop,
//! evaluation by stitched foreground IoU and best-validation selection.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward, compile, forward, init_params, LayerSpec, ModelGraph, ParamStore};
use crate::data::{extract, plan_patches, stitch, PatchPlan, PatchPolicy, Phase, Volume};
use crate::metrics::{binarize, ConfusionCounts};
use crate::models::ArchConfig;
use crate::ops::{one_hot, softmax, softmax_xent_bwd, softmax_xent_fwd};
use crate::tensor::{Shape5, Tensor};
use crate::{Error, Result};

/// Initial learning rates tried by [`lr_sweep`].
pub const SWEEP_RATES: [f64; 4] = [0.1, 0.05, 0.01, 0.005];

/// How the four z-rotations enter training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    None,
    /// Every patch appears once per rotation.
    AllRotations,
    /// Every patch appears once per epoch with a rotation drawn at random.
    RandomRotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: Augment,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.05,
            momentum: 0.9,
            epochs: 4,
            batch_size: 2,
            augment: Augment::AllRotations,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::InvalidData(format!("learning rate {} must be positive", self.initial_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidData(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidData("epochs and batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `lr0` in epoch 1, `lr0 / 2` in epochs 2 to 4, `lr0 / 20` afterwards.
pub fn lr_at(epoch: usize, lr0: f64) -> f64 {
    match epoch {
        0 | 1 => lr0,
        2..=4 => lr0 / 2.0,
        _ => lr0 / 20.0,
    }
}

/// `v = m v + g; w = w - lr v`.
pub fn sgd_update(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if w.len() != g.len() || w.len() != v.len() {
        return Err(Error::ShapeMismatch(format!("{} weights, {} grads, {} velocities", w.len(), g.len(), v.len())));
    }
    if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("gradient value {bad}")));
    }
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for every parameter buffer of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(params: &ParamStore) -> Self {
        SgdState { velocity: params.values().map(|v| vec![0.0; v.values.len()]).collect() }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// One optimizer step using the gradients currently stored in `params`.
pub fn sgd_step(params: &mut ParamStore, state: &mut SgdState, lr: f64, momentum: f64) -> Result<()> {
    let mut buffers = state.velocity.iter_mut();
    params.update_each(|w, g| {
        let v = buffers.next().ok_or_else(|| Error::Graph("optimizer state does not match parameters".into()))?;
        sgd_update(w, g, v, lr, momentum)
    })
}

/// Source of wall-clock time, in seconds from an arbitrary origin.
pub trait Stopwatch {
    fn seconds(&self) -> f64;
}

/// A clock that never advances, for callers that do not record timing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Stopwatch for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_iou: f64,
}

/// Seconds spent on iterations `first..=last`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub first: usize,
    pub last: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
    pub timing: Vec<TimingRecord>,
}

impl RunLog {
    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> = self.iterations.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).collect();
        (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

/// Image/label pair with the label as a single-channel {0, 1} tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Volume,
    pub label: Volume,
}

impl Sample {
    pub fn new(image: Volume, label: Volume) -> Result<Self> {
        if image.meta.dims() != label.meta.dims() {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} vs label {:?}",
                image.meta.dims(),
                label.meta.dims()
            )));
        }
        Ok(Sample { image, label })
    }
}

/// Training patches of a set of volumes, extracted on demand.
#[derive(Debug, Clone)]
pub struct PatchSet<'a> {
    samples: &'a [Sample],
    plans: Vec<PatchPlan>,
    /// `(sample, patch)` pairs.
    items: Vec<(usize, usize)>,
}

impl<'a> PatchSet<'a> {
    pub fn new(samples: &'a [Sample], policy: &PatchPolicy) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidData("no training volumes".into()));
        }
        let plans: Vec<PatchPlan> =
            samples.iter().map(|s| plan_patches(&s.image.meta, policy, Phase::Train)).collect::<Result<_>>()?;
        if plans.windows(2).any(|w| w[0].patch != w[1].patch) {
            return Err(Error::InvalidData("training volumes produce different patch sizes".into()));
        }
        let items = plans.iter().enumerate().flat_map(|(s, p)| (0..p.len()).map(move |i| (s, i))).collect();
        Ok(PatchSet { samples, plans, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn patch_shape(&self) -> Result<Shape5> {
        self.plans[0].patch_shape(1)
    }

    /// Image patch and one-hot label of item `i`, rotated by `turns` quarter turns.
    pub fn get(&self, i: usize, turns: u8) -> Result<(Tensor, Tensor)> {
        let (s, p) = self.items[i];
        let sample = &self.samples[s];
        let image = extract(&sample.image.data, &self.plans[s], p)?;
        let label = extract(&sample.label.data, &self.plans[s], p)?;
        Ok((image.rot90_z(turns)?, one_hot(&label.rot90_z(turns)?)?))
    }
}

/// The visiting order of one epoch: `(item, quarter turns)`.
pub fn epoch_order(len: usize, augment: Augment, seed: u64, epoch: usize) -> Vec<(usize, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<(usize, u8)> = match augment {
        Augment::None => (0..len).map(|i| (i, 0)).collect(),
        Augment::AllRotations => (0..len).flat_map(|i| (0..4).map(move |t| (i, t))).collect(),
        Augment::RandomRotation => (0..len).map(|i| (i, rng.gen_range(0..4u8))).collect(),
    };
    order.shuffle(&mut rng);
    order
}

/// Forward, loss, backward and an optimizer step on one batch. Returns the loss.
pub fn train_step(
    g: &ModelGraph,
    params: &mut ParamStore,
    state: &mut SgdState,
    x: &Tensor,
    y: &Tensor,
    lr: f64,
    momentum: f64,
) -> Result<f64> {
    let (logits, tape) = forward(g, params, x)?;
    let (loss, probs) = softmax_xent_fwd(&logits, y)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    let grad = softmax_xent_bwd(&probs, y)?;
    backward(g, params, &tape, &grad)?;
    sgd_step(params, state, lr, momentum)?;
    Ok(loss)
}

/// Softmax probabilities for a whole volume, assembled from eval-phase patches.
pub fn predict_volume(spec: &[LayerSpec], params: &ParamStore, image: &Volume, policy: &PatchPolicy) -> Result<Tensor> {
    let plan = plan_patches(&image.meta, policy, Phase::Eval)?;
    let g = compile(spec, plan.patch_shape(1)?)?;
    let mut preds = Vec::with_capacity(plan.len());
    for i in 0..plan.len() {
        let x = extract(&image.data, &plan, i)?;
        let (logits, _) = forward(&g, params, &x)?;
        preds.push(softmax(&logits)?);
    }
    stitch(&plan, &preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub id: String,
    pub iou: f64,
    pub counts: ConfusionCounts,
}

/// Per-volume foreground IoU of the stitched, binarized predictions.
pub fn evaluate_volumes(
    spec: &[LayerSpec],
    params: &ParamStore,
    samples: &[Sample],
    policy: &PatchPolicy,
) -> Result<Vec<VolumeScore>> {
    if samples.is_empty() {
        return Err(Error::InvalidData("no volumes to evaluate".into()));
    }
    samples
        .iter()
        .map(|s| {
            let probs = predict_volume(spec, params, &s.image, policy)?;
            let counts = ConfusionCounts::from_labels(&s.label.data, &binarize(&probs)?)?;
            Ok(VolumeScore { id: s.image.meta.source.clone(), iou: counts.iou(), counts })
        })
        .collect()
}

/// Mean foreground IoU over `samples`.
pub fn evaluate(spec: &[LayerSpec], params: &ParamStore, samples: &[Sample], policy: &PatchPolicy) -> Result<f64> {
    let scores = evaluate_volumes(spec, params, samples, policy)?;
    Ok(scores.iter().map(|s| s.iou).sum::<f64>() / scores.len() as f64)
}

/// State of a training run across epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub arch: ArchConfig,
    pub spec: Vec<LayerSpec>,
    pub policy: PatchPolicy,
    pub cfg: TrainConfig,
    pub params: ParamStore,
    pub state: SgdState,
    pub log: RunLog,
    /// Parameters of the epoch with the highest validation IoU so far.
    pub best: Option<(usize, f64, ParamStore)>,
    iteration: usize,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(arch: ArchConfig, policy: PatchPolicy, cfg: TrainConfig, patch_shape: Shape5) -> Result<Self> {
        cfg.validate()?;
        let spec = arch.build()?;
        let g = compile(&spec, patch_shape)?;
        let params = init_params(&g, cfg.seed)?;
        let state = SgdState::new(&params);
        Ok(Trainer {
            arch,
            spec,
            policy,
            cfg,
            params,
            state,
            log: RunLog::default(),
            best: None,
            iteration: 0,
            epochs_done: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// One pass over `data` in seeded-shuffle order. Returns the epoch mean loss.
    pub fn train_epoch(&mut self, data: &PatchSet<'_>, clock: &dyn Stopwatch) -> Result<f64> {
        let epoch = self.epochs_done + 1;
        let lr = lr_at(epoch, self.cfg.initial_lr);
        let order = epoch_order(data.len(), self.cfg.augment, self.cfg.seed, epoch);
        let shape = data.patch_shape()?;
        let mut graphs: Vec<Option<ModelGraph>> = vec![None; self.cfg.batch_size + 1];
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut window_start = clock.seconds();
        for chunk in order.chunks(self.cfg.batch_size) {
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ys = Vec::with_capacity(chunk.len());
            for &(i, turns) in chunk {
                let (x, y) = data.get(i, turns)?;
                xs.push(x);
                ys.push(y);
            }
            let g = match &mut graphs[chunk.len()] {
                Some(g) => g,
                slot => slot.insert(compile(&self.spec, shape.with_n(chunk.len()))?),
            };
            let x = Tensor::stack_batch(&xs)?;
            let y = Tensor::stack_batch(&ys)?;
            let loss = train_step(g, &mut self.params, &mut self.state, &x, &y, lr, self.cfg.momentum)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, iteration {}: {e}", self.iteration + 1)))?;
            self.iteration += 1;
            self.log.iterations.push(IterationRecord { iteration: self.iteration, epoch, lr, loss });
            total += loss;
            batches += 1;
            if self.iteration.is_multiple_of(100) {
                let now = clock.seconds();
                self.log.timing.push(TimingRecord {
                    first: self.iteration - 99,
                    last: self.iteration,
                    seconds: now - window_start,
                });
                window_start = now;
            }
        }
        self.epochs_done = epoch;
        Ok(total / batches as f64)
    }

    /// Trains one epoch, scores `val` and updates the best-validation copy.
    pub fn run_epoch(&mut self, data: &PatchSet<'_>, val: &[Sample], clock: &dyn Stopwatch) -> Result<EpochRecord> {
        let mean_loss = self.train_epoch(data, clock)?;
        let val_iou = if val.is_empty() { f64::NAN } else { evaluate(&self.spec, &self.params, val, &self.policy)? };
        let epoch = self.epochs_done;
        let better = match &self.best {
            None => true,
            Some((_, best, _)) => val_iou > *best,
        };
        if better {
            self.best = Some((epoch, val_iou, self.params.clone()));
        }
        let rec = EpochRecord { epoch, mean_loss, val_iou };
        self.log.epochs.push(rec);
        Ok(rec)
    }

    /// Parameters chosen by validation, or the current ones before any epoch.
    pub fn selected(&self) -> &ParamStore {
        self.best.as_ref().map_or(&self.params, |b| &b.2)
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub trainer: Trainer,
    pub test_iou: Option<f64>,
}

/// Full run: `cfg.epochs` epochs with validation, then the selected
/// parameters are scored on `test`. `on_epoch` sees every epoch's state.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    arch: ArchConfig,
    policy: PatchPolicy,
    cfg: TrainConfig,
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    clock: &dyn Stopwatch,
    mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
) -> Result<FitOutcome> {
    let data = PatchSet::new(train, &policy)?;
    let mut trainer = Trainer::new(arch, policy, cfg, data.patch_shape()?)?;
    for _ in 0..trainer.cfg.epochs {
        let rec = trainer.run_epoch(&data, val, clock)?;
        on_epoch(&trainer, &rec)?;
    }
    let test_iou = if test.is_empty() {
        None
    } else {
        Some(evaluate(&trainer.spec, trainer.selected(), test, &trainer.policy)?)
    };
    Ok(FitOutcome { trainer, test_iou })
}

/// Runs `score` for every rate and returns the best `(rate, score)`; earlier
/// rates win ties.
pub fn lr_sweep(rates: &[f64], mut score: impl FnMut(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &lr in rates {
        let s = score(lr)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((lr, s));
        }
    }
    best.ok_or_else(|| Error::InvalidData("empty learning-rate list".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{DepthExtent, LayerKind};
    use crate::data::VolumeMeta;
    use crate::models::Mode;
    use crate::phantom::{generate, PhantomSpec};

    #[test]
    fn schedule() {
        assert_eq!(lr_at(1, 0.1), 0.1);
        assert_eq!(lr_at(2, 0.1), 0.05);
        assert_eq!(lr_at(4, 0.1), 0.05);
        assert!((lr_at(5, 0.1) - 0.005).abs() < 1e-18);
        for e in 1..10 {
            assert!(lr_at(e + 1, 0.05) <= lr_at(e, 0.05));
        }
    }

    #[test]
    fn momentum_examples() {
        let (mut w, mut v) = ([1.0], [0.0]);
        sgd_update(&mut w, &[2.0], &mut v, 0.1, 0.0).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15);

        let (mut w, mut v) = ([0.0], [0.0]);
        sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!((w[0], v[0]), (-0.1, 1.0));
        sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.9).unwrap();
        assert!((v[0] - 1.9).abs() < 1e-15 && (w[0] + 0.29).abs() < 1e-15);

        let (mut w, mut v) = ([3.0], [0.0]);
        sgd_update(&mut w, &[0.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(w[0], 3.0);
        assert!(sgd_update(&mut w, &[f64::NAN], &mut v, 0.1, 0.9).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { initial_lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn epoch_orders() {
        assert_eq!(epoch_order(5, Augment::AllRotations, 1, 1).len(), 20);
        let a = epoch_order(50, Augment::RandomRotation, 1, 1);
        assert_eq!(a, epoch_order(50, Augment::RandomRotation, 1, 1));
        assert_ne!(a, epoch_order(50, Augment::RandomRotation, 1, 2));
        let mut items: Vec<usize> = a.iter().map(|p| p.0).collect();
        items.sort();
        assert_eq!(items, (0..50).collect::<Vec<_>>());
    }

    fn oracle_spec() -> Vec<LayerSpec> {
        // one 1x1x1 conv whose logits are (0, 20 * x - 10): class 1 where x = 1
        vec![LayerSpec::new("out", LayerKind::conv(1, 1, DepthExtent::Fixed(1), 2))]
    }

    fn oracle_params(spec: &[LayerSpec], shape: Shape5) -> ParamStore {
        let g = compile(spec, shape).unwrap();
        let mut p = init_params(&g, 0).unwrap();
        let ws = Shape5::new(1, 1, 1, 1, 2).unwrap();
        p.set_values("out", "weight", ws, &[0.0, 20.0]).unwrap();
        p.set_values("out", "bias", ws, &[0.0, -10.0]).unwrap();
        p
    }

    fn small_sample(seed: u64) -> Sample {
        let spec = PhantomSpec { dims: [16, 16, 12], radius: [2.0, 3.0], distractors: 0, seed, ..PhantomSpec::default() };
        let (image, label) = generate(&spec, "s").unwrap();
        Sample::new(image, label).unwrap()
    }

    #[test]
    fn perfect_and_empty_predictors() {
        let s = small_sample(1);
        let fed = Sample::new(
            Volume::new(VolumeMeta::image(16, 16, 12, "s"), s.label.data.clone()).unwrap(),
            s.label.clone(),
        )
        .unwrap();
        let spec = oracle_spec();
        let policy = PatchPolicy::patch512();
        let p = oracle_params(&spec, Shape5::new(1, 16, 16, 8, 1).unwrap());
        assert_eq!(evaluate(&spec, &p, core::slice::from_ref(&fed), &policy).unwrap(), 1.0);

        let mut never = p.clone();
        never.set_values("out", "bias", Shape5::new(1, 1, 1, 1, 2).unwrap(), &[0.0, -100.0]).unwrap();
        assert_eq!(evaluate(&spec, &never, &[fed], &policy).unwrap(), 0.0);
        assert!(evaluate(&spec, &p, &[], &policy).is_err());
    }

    #[test]
    fn single_patch_stitch_equals_direct_forward() {
        let s = small_sample(2);
        let arch = ArchConfig { mode: Mode::ZV2, levels: 2, base_channels: 2, ..ArchConfig::default() };
        let spec = arch.build().unwrap();
        let shape = s.image.meta.shape().unwrap();
        let whole = PatchPolicy {
            name: "whole".into(),
            patch: [crate::data::Extent::Full; 3],
            train_stride: [crate::data::Extent::Full; 3],
            eval_stride: [crate::data::Extent::Full; 3],
        };
        let g = compile(&spec, shape).unwrap();
        let p = init_params(&g, 3).unwrap();
        let stitched = predict_volume(&spec, &p, &s.image, &whole).unwrap();
        let (logits, _) = forward(&g, &p, &s.image.data).unwrap();
        assert_eq!(stitched, softmax(&logits).unwrap());
    }

    #[test]
    fn tiny_run_is_deterministic_and_learns() {
        let samples: Vec<Sample> = (0..2).map(small_sample).collect();
        let arch = ArchConfig { mode: Mode::ZV2, levels: 1, base_channels: 2, ..ArchConfig::default() };
        let cfg = TrainConfig { epochs: 3, augment: Augment::RandomRotation, seed: 5, ..TrainConfig::default() };
        let run = || {
            fit(arch, PatchPolicy::patch512(), cfg.clone(), &samples, &samples[..1], &samples[1..], &NoClock, |_, _| {
                Ok(())
            })
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.trainer.log, b.trainer.log);
        assert_eq!(a.trainer.params, b.trainer.params);
        let log = &a.trainer.log;
        assert_eq!(log.iterations.len(), 3 * 5);
        assert!(log.iterations.windows(2).all(|w| w[0].iteration < w[1].iteration));
        assert!(log.iterations.iter().all(|r| r.lr == lr_at(r.epoch, cfg.initial_lr)));
        assert!(log.epoch_mean_loss(3).unwrap() < log.epoch_mean_loss(1).unwrap());
        assert!(a.test_iou.unwrap().is_finite());
    }

    #[test]
    fn sweep_picks_best() {
        let (lr, s) = lr_sweep(&SWEEP_RATES, |lr| Ok(-(lr - 0.01f64).abs())).unwrap();
        assert_eq!((lr, s), (0.01, 0.0));
        assert!(lr_sweep(&[], |_| Ok(0.0)).is_err());
    }
}
