//! Training loops: AdamW with a warm-up cosine schedule, masked-predicted
//! pretraining, and fine-tuning with optional distillation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::divergence::HolderParams;
use crate::error::{Error, Result};
use crate::masking::{
    mask_ratio_for_missing, masked_reconstruction_loss, reconstruction_target, sample_patch_mask,
    MaskRatioMode, RecNorm, RecScope, ReconstructionTarget,
};
use crate::model::{Model, ModelConfig, Param};
use crate::phantom::drop_modalities;
use crate::seg_loss::{finetune_loss, Distillation, KdKind};
use crate::tensor::{Tape, Tensor, Var};
use crate::volume::{LabelVolume, ModalitySet, MultiModalVolume};

/// Moment buffers for [`adamw_step`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

/// One AdamW update. Decay is applied to the parameters directly; the
/// moments see only the gradient. A non-finite gradient aborts before any
/// parameter changes.
pub fn adamw_step(
    params: &mut [Param],
    grads: &[Tensor],
    state: &mut AdamState,
    hp: &AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.value.shape(), g.shape()));
        }
        if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("gradient of {} contains {bad}", p.name)));
        }
    }
    state.step += 1;
    let (b1, b2) = hp.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (x, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            *x -= hp.lr * hp.weight_decay * *x;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            *x -= hp.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Linear ramp from 0 over `warmup` epochs, then cosine decay to 0.
pub fn lr_schedule(epoch: usize, total: usize, warmup: usize, lr: f64) -> f64 {
    if epoch < warmup {
        return lr * epoch as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    lr * (1.0 + (std::f64::consts::PI * (epoch - warmup) as f64 / span).cos()) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPhase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdChoice {
    None,
    Kl,
    Holder,
}

impl KdChoice {
    pub fn kind(self) -> Option<KdKind> {
        match self {
            KdChoice::None => None,
            KdChoice::Kl => Some(KdKind::Kl),
            KdChoice::Holder => Some(KdKind::Holder),
        }
    }
}

impl FromStr for KdChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(KdChoice::None),
            "kl" => Ok(KdChoice::Kl),
            "holder" => Ok(KdChoice::Holder),
            _ => Err(Error::Config(format!("unknown kd kind {s:?}"))),
        }
    }
}

impl fmt::Display for KdChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KdChoice::None => "none",
            KdChoice::Kl => "kl",
            KdChoice::Holder => "holder",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: TrainPhase,
    pub modalities: ModalitySet,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub tau: f64,
    pub w: f64,
    pub alpha: f64,
    pub rec_norm: RecNorm,
    pub mask_mode: MaskRatioMode,
    /// Fixed mask ratio instead of the schedule.
    pub mask_ratio: Option<f64>,
    /// Reconstruct the missing modalities too (joint objective) rather
    /// than the visible ones alone.
    pub predict_missing: bool,
    pub rec_scope: RecScope,
    pub kd: KdChoice,
    /// Trailing dataset entries held out for validation.
    pub val_count: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: TrainPhase::Pretrain,
            modalities: ModalitySet::ALL,
            epochs: 30,
            batch_size: 2,
            lr: 1e-4,
            weight_decay: 1e-5,
            warmup: 5,
            betas: (0.99, 0.999),
            eps: 1e-8,
            seed: 0,
            tau: 1.0,
            w: 1.0,
            alpha: 1.6,
            rec_norm: RecNorm::L1,
            mask_mode: MaskRatioMode::Table,
            mask_ratio: None,
            predict_missing: true,
            rec_scope: RecScope::MaskedPlusMissing,
            kd: KdChoice::None,
            val_count: 10,
            model: ModelConfig::default(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl TrainConfig {
    /// Applies one setting; `model.*` keys go to the model configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        let v = value.trim();
        match key.trim() {
            "phase" => {
                self.phase = match v {
                    "pretrain" => TrainPhase::Pretrain,
                    "finetune" => TrainPhase::Finetune,
                    _ => return Err(Error::Config(format!("phase: unknown {v:?}"))),
                }
            }
            "modalities" => self.modalities = v.parse()?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "warmup" => self.warmup = num(key, v)?,
            "beta1" => self.betas.0 = num(key, v)?,
            "beta2" => self.betas.1 = num(key, v)?,
            "eps" => self.eps = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "w" => self.w = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "rec_norm" => {
                self.rec_norm = match v {
                    "l1" => RecNorm::L1,
                    "l2" => RecNorm::L2,
                    _ => return Err(Error::Config(format!("rec_norm: unknown {v:?}"))),
                }
            }
            "mask_mode" => {
                self.mask_mode = match v {
                    "table" => MaskRatioMode::Table,
                    "linear" => MaskRatioMode::Linear,
                    _ => return Err(Error::Config(format!("mask_mode: unknown {v:?}"))),
                }
            }
            "mask_ratio" => {
                self.mask_ratio = match v {
                    "auto" => None,
                    _ => Some(num(key, v)?),
                }
            }
            "predict_missing" => self.predict_missing = parse_bool(key, v)?,
            "rec_scope" => {
                self.rec_scope = match v {
                    "masked" => RecScope::MaskedOnly,
                    "masked+missing" => RecScope::MaskedPlusMissing,
                    _ => return Err(Error::Config(format!("rec_scope: unknown {v:?}"))),
                }
            }
            "kd" => self.kd = v.parse()?,
            "val_count" => self.val_count = num(key, v)?,
            k => match k.strip_prefix("model.") {
                Some(mk) => self.model.set(mk, v)?,
                None => return Err(Error::Config(format!("unknown key {k:?}"))),
            },
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn holder_params(&self) -> Result<HolderParams> {
        HolderParams::new(self.alpha)
    }

    pub fn hyper(&self, epoch: usize) -> AdamHyper {
        AdamHyper {
            lr: lr_schedule(epoch, self.epochs, self.warmup, self.lr),
            weight_decay: self.weight_decay,
            betas: self.betas,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad(format!("lr {}, weight_decay {}, eps {}", self.lr, self.weight_decay, self.eps));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad(format!("betas {:?} outside [0, 1)", self.betas));
        }
        if !(self.tau > 0.0) || !(self.w >= 0.0) {
            return bad(format!("tau {} and w {} must be positive", self.tau, self.w));
        }
        if let Some(r) = self.mask_ratio {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("mask_ratio {r} outside [0, 1)"));
            }
        }
        self.modalities.validate_scenario()?;
        self.holder_params()?;
        self.model.validate()
    }

    pub fn mask_ratio(&self) -> Result<f64> {
        match self.mask_ratio {
            Some(r) => Ok(r),
            None => mask_ratio_for_missing(self.modalities.missing_count(), self.mask_mode),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("epoch,step,loss\n");
    for r in records {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.step, r.loss));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub losses: Vec<LossRecord>,
}

pub type Sample = (MultiModalVolume, LabelVolume);

/// Derived per-purpose seed so independent streams never collide.
fn sub_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for v in [a, b] {
        x = (x ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 31;
    }
    x
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, 1, epoch as u64, 0)));
    idx
}

/// Student input: visible channels with absent ones zero-filled.
pub fn student_input(volume: &MultiModalVolume, keep: ModalitySet) -> Result<Tensor> {
    let (visible, _) = drop_modalities(volume, keep)?;
    visible.zero_filled().to_tensor()
}

fn gradients(tape: &Tape, bound: &[Var], params: &[Param]) -> Vec<Tensor> {
    bound
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.value.shape()).expect("valid shape")))
        .collect()
}

fn check_loss(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "loss is {loss} at epoch {epoch}, step {step}; aborting"
        )))
    }
}

fn run_epochs<F>(cfg: &TrainConfig, model: &mut Model, n: usize, mut batch_loss: F) -> Result<Vec<LossRecord>>
where
    F: FnMut(&Model, &mut Tape, &crate::model::Bound, &[usize], usize, usize) -> Result<Var>,
{
    if n == 0 {
        return Err(Error::Config("empty training set".into()));
    }
    let mut state = AdamState::new(model.params());
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let hp = cfg.hyper(epoch);
        let order = epoch_order(n, cfg.seed, epoch);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let loss = batch_loss(model, &mut tape, &bound, batch, epoch, step)?;
            let value = tape.value(loss).item();
            check_loss(value, epoch, step)?;
            tape.backward(loss)?;
            let grads = gradients(&tape, bound.vars(), model.params());
            adamw_step(model.params_mut(), &grads, &mut state, &hp)?;
            losses.push(LossRecord { epoch, step, loss: value });
        }
    }
    Ok(losses)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / terms.len() as f64)
}

/// Selects the channels of a `[C, D, H, W]` variable listed in `channels`.
fn select_channels(tape: &mut Tape, x: Var, channels: &[usize]) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let plane: usize = shape[1..].iter().product();
    if channels.len() == shape[0] {
        return Ok(x);
    }
    let idx: std::sync::Arc<[usize]> = channels
        .iter()
        .flat_map(|&c| c * plane..(c + 1) * plane)
        .collect();
    tape.gather(x, idx, &[channels.len(), shape[1], shape[2], shape[3]])
}

/// Masked-predicted pretraining on the configured modality subset.
pub fn pretrain(cfg: &TrainConfig, data: &[Sample]) -> Result<TrainOutput> {
    cfg.validate()?;
    let ratio = cfg.mask_ratio()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let keep = cfg.modalities;
    let p = cfg.model.patch_size;

    let mut prepared = Vec::with_capacity(data.len());
    for (vol, _) in data {
        let (visible, missing) = drop_modalities(vol, keep)?;
        let target = if cfg.predict_missing {
            reconstruction_target(&visible, missing.as_ref())?
        } else {
            ReconstructionTarget::visible_only(&visible)?
        };
        let channels: Vec<usize> = target.volume.modalities().iter().map(|m| m.index()).collect();
        let grid = cfg.model.geometry(vol.spatial())?[0];
        prepared.push((visible.zero_filled().to_tensor()?, target, channels, grid));
    }
    debug_assert!(p > 0);

    let losses = run_epochs(cfg, &mut model, prepared.len(), |model, tape, bound, batch, epoch, step| {
        let mut terms = Vec::with_capacity(batch.len());
        for (k, &i) in batch.iter().enumerate() {
            let (input, target, channels, grid) = &prepared[i];
            let seed = sub_seed(cfg.seed, 2, (epoch * 1_000_003 + step) as u64, k as u64);
            let mask = sample_patch_mask(*grid, p, ratio, seed)?;
            let rec = model.forward_reconstruct(tape, bound, input, Some(&mask))?;
            let rec = select_channels(tape, rec, channels)?;
            terms.push(masked_reconstruction_loss(tape, rec, target, &mask, cfg.rec_norm, cfg.rec_scope)?);
        }
        mean_of(tape, &terms)
    })?;
    Ok(TrainOutput { model, losses })
}

/// Copies every `encoder.*` tensor of `from` into `to`.
pub fn transfer_encoder(from: &Model, to: &mut Model) -> Result<()> {
    if from.config() != to.config() {
        return Err(Error::Config("encoder transfer between different configurations".into()));
    }
    for p in to.params_mut() {
        if p.name.starts_with("encoder.") {
            p.value = from.param(&p.name).expect("same configuration").clone();
        }
    }
    Ok(())
}

/// Fine-tunes a segmentation model on the configured modality subset.
/// `init` contributes its encoder; `teacher` sees all modalities and is
/// never modified.
pub fn finetune(cfg: &TrainConfig, data: &[Sample], init: Option<&Model>, teacher: Option<&Model>) -> Result<TrainOutput> {
    cfg.validate()?;
    let kind = cfg.kd.kind();
    if kind.is_some() && teacher.is_none() {
        return Err(Error::Config(format!("kd = {} needs a teacher", cfg.kd)));
    }
    if let Some(t) = teacher {
        if t.config().num_classes != cfg.model.num_classes {
            return Err(Error::Config(format!(
                "teacher predicts {} classes, student {}",
                t.config().num_classes,
                cfg.model.num_classes
            )));
        }
    }
    let params = cfg.holder_params()?;
    let mut model = Model::new(cfg.model.clone(), sub_seed(cfg.seed, 3, 0, 0))?;
    if let Some(init) = init {
        transfer_encoder(init, &mut model)?;
    }

    let mut prepared = Vec::with_capacity(data.len());
    for (vol, labels) in data {
        let input = student_input(vol, cfg.modalities)?;
        // the teacher is frozen, so its logits can be computed once
        let soft = match (kind, teacher) {
            (Some(_), Some(t)) => Some(t.predict_logits(&vol.zero_filled().to_tensor()?)?.into_tensor()),
            _ => None,
        };
        prepared.push((input, labels, soft));
    }

    let losses = run_epochs(cfg, &mut model, prepared.len(), |model, tape, bound, batch, _, _| {
        let mut terms = Vec::with_capacity(batch.len());
        for &i in batch {
            let (input, labels, soft) = &prepared[i];
            let logits = model.forward_segment(tape, bound, input)?;
            let kd = match (kind, soft) {
                (Some(kind), Some(teacher)) => Some(Distillation {
                    teacher,
                    kind,
                    weight: cfg.w,
                    tau: cfg.tau,
                    params,
                }),
                _ => None,
            };
            terms.push(finetune_loss(tape, logits, labels, kd)?);
        }
        mean_of(tape, &terms)
    })?;
    Ok(TrainOutput { model, losses })
}

/// Splits off the trailing `val_count` samples as the validation set.
pub fn split_dataset(data: &[Sample], val_count: usize) -> Result<(&[Sample], &[Sample])> {
    if val_count >= data.len() {
        return Err(Error::Config(format!(
            "{} samples cannot hold {val_count} validation cases plus training data",
            data.len()
        )));
    }
    Ok(data.split_at(data.len() - val_count))
}
