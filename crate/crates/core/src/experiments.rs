//! Desk-scale ablations: pretraining objectives for a FLAIR-only student
//! and distillation divergences for a T2-only student.

use crate::error::Result;
use crate::eval::{evaluate, InferSettings};
use crate::model::Model;
use crate::phantom::{generate_phantom, PhantomConfig};
use crate::train::{finetune, pretrain, KdChoice, Sample, TrainConfig, TrainPhase};
use crate::volume::{Modality, ModalitySet};

/// Dataset and schedule sizes for one ablation run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentScale {
    pub train: usize,
    pub val: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub lr: f64,
    /// First-moment decay; the default 0.99 carries momentum across too
    /// large a share of a run this short.
    pub beta1: f64,
    pub batch_size: usize,
    pub warmup: usize,
    pub phantom: PhantomConfig,
}

impl Default for ExperimentScale {
    fn default() -> Self {
        Self {
            train: 8,
            val: 6,
            pretrain_epochs: 10,
            finetune_epochs: 40,
            lr: 1e-2,
            beta1: 0.9,
            batch_size: 1,
            warmup: 1,
            phantom: PhantomConfig::default(),
        }
    }
}

impl ExperimentScale {
    pub fn data(&self, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let cfg = PhantomConfig {
            seed,
            noise_seed: seed,
            ..self.phantom.clone()
        };
        let all = (0..(self.train + self.val) as u64)
            .map(|i| generate_phantom(&cfg, i))
            .collect::<Result<Vec<_>>>()?;
        let (train, val) = all.split_at(self.train);
        Ok((train.to_vec(), val.to_vec()))
    }

    fn base(&self, seed: u64, phase: TrainPhase, modalities: ModalitySet) -> TrainConfig {
        TrainConfig {
            phase,
            modalities,
            epochs: match phase {
                TrainPhase::Pretrain => self.pretrain_epochs,
                TrainPhase::Finetune => self.finetune_epochs,
            },
            batch_size: self.batch_size,
            lr: self.lr,
            betas: (self.beta1, TrainConfig::default().betas.1),
            warmup: self.warmup,
            seed,
            ..TrainConfig::default()
        }
    }
}

/// Outcome of one arm on one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub seed: u64,
    pub arm: &'static str,
    /// WT, TC, ET.
    pub dice: [f64; 3],
}

impl ArmResult {
    pub fn mean(&self) -> f64 {
        self.dice.iter().sum::<f64>() / 3.0
    }
}

pub fn arms_csv(rows: &[ArmResult]) -> String {
    let mut s = String::from("seed,arm,WT,TC,ET,mean\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.seed, r.arm, r.dice[0], r.dice[1], r.dice[2], r.mean()
        ));
    }
    s
}

/// Mean over seeds of the per-arm mean Dice.
pub fn arm_mean(rows: &[ArmResult], arm: &str) -> f64 {
    let picked: Vec<f64> = rows.iter().filter(|r| r.arm == arm).map(ArmResult::mean).collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}

fn score(model: &Model, val: &[Sample], scenario: ModalitySet) -> Result<[f64; 3]> {
    Ok(evaluate(model, val, &[scenario], InferSettings::default())?.rows[0].dice)
}

pub const PRETRAIN_ARMS: [&str; 4] = ["no-pretrain", "mask-only", "predict-only", "mask+predict"];

/// All pretraining arms share the fine-tuning recipe; they differ in the
/// objective: masked visible patches only, whole missing modalities with
/// nothing masked, or both.
pub fn pretraining_ablation(seed: u64, scale: &ExperimentScale) -> Result<Vec<ArmResult>> {
    let keep = ModalitySet::single(Modality::Flair);
    let (train, val) = scale.data(seed)?;
    let ft = scale.base(seed, TrainPhase::Finetune, keep);
    let mut out = Vec::new();
    for arm in PRETRAIN_ARMS {
        let mut pt = scale.base(seed, TrainPhase::Pretrain, keep);
        let init = match arm {
            "no-pretrain" => None,
            _ => {
                let (ratio, predict) = match arm {
                    "mask-only" => (0.5, false),
                    "predict-only" => (0.0, true),
                    _ => (0.5, true),
                };
                pt.mask_ratio = Some(ratio);
                pt.predict_missing = predict;
                Some(pretrain(&pt, &train)?.model)
            }
        };
        let student = finetune(&ft, &train, init.as_ref(), None)?.model;
        out.push(ArmResult {
            seed,
            arm,
            dice: score(&student, &val, keep)?,
        });
    }
    Ok(out)
}

pub const KD_ARMS: [&str; 3] = ["none", "kl", "holder-1.6"];

/// Teacher fine-tuned on all modalities without distillation, then T2-only
/// students without KD, with KL, and with the Hölder divergence at α = 1.6.
/// The teacher's own full-modality score is reported as arm `teacher`.
pub fn distillation_ablation(seed: u64, scale: &ExperimentScale) -> Result<Vec<ArmResult>> {
    let keep = ModalitySet::single(Modality::T2);
    let (train, val) = scale.data(seed)?;
    let teacher_cfg = scale.base(seed, TrainPhase::Finetune, ModalitySet::ALL);
    let teacher = finetune(&teacher_cfg, &train, None, None)?.model;
    let mut out = vec![ArmResult {
        seed,
        arm: "teacher",
        dice: score(&teacher, &val, ModalitySet::ALL)?,
    }];
    for (arm, kd) in KD_ARMS.into_iter().zip([KdChoice::None, KdChoice::Kl, KdChoice::Holder]) {
        let cfg = TrainConfig {
            kd,
            alpha: 1.6,
            ..scale.base(seed, TrainPhase::Finetune, keep)
        };
        let teacher_ref = (kd != KdChoice::None).then_some(&teacher);
        let student = finetune(&cfg, &train, None, teacher_ref)?.model;
        out.push(ArmResult {
            seed,
            arm,
            dice: score(&student, &val, keep)?,
        });
    }
    Ok(out)
}
