//! Segmentation criteria: soft Dice loss, Dice metric, BraTS-style region
//! decomposition, and pixel-wise distillation.

use crate::divergence::{holder_along_classes_log, kl_along_classes_log, log_softmax_classes, HolderParams};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::volume::{LabelVolume, ENHANCING, NECROTIC};

/// Smoothing added to every per-class numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

/// `1 - (2/J) Σ_j (Σ_i G Y + ε) / (Σ_i G² + Σ_i Y² + ε)` over per-voxel class
/// probabilities `probs: [J, D, H, W]`.
pub fn soft_dice_loss(tape: &mut Tape, probs: Var, truth: &LabelVolume) -> Result<Var> {
    let one_hot = truth.one_hot()?;
    if tape.shape(probs) != one_hot.shape() {
        return Err(Error::shape("soft_dice_loss", tape.shape(probs), one_hot.shape()));
    }
    let classes = one_hot.shape()[0];
    let voxels = one_hot.len() / classes;
    let truth_sq: Vec<f64> = one_hot
        .data()
        .chunks(voxels)
        .map(|c| c.iter().sum::<f64>() + DICE_EPS)
        .collect();

    let flat = tape.reshape(probs, &[classes, voxels])?;
    let g = tape.constant(one_hot.reshaped(vec![classes, voxels])?);
    let inter = tape.mul(flat, g)?;
    let inter = tape.sum(inter, &[1])?;
    let num = tape.add_const(inter, Tensor::full(&[classes], DICE_EPS)?)?;
    let sq = tape.mul(flat, flat)?;
    let sq = tape.sum(sq, &[1])?;
    let den = tape.add_const(sq, Tensor::new(vec![classes], truth_sq)?)?;
    let inv = tape.pow(den, -1.0)?;
    let ratio = tape.mul(num, inv)?;
    let total = tape.sum_all(ratio)?;
    let scaled = tape.scale(total, -2.0 / classes as f64)?;
    tape.add_const(scaled, Tensor::scalar(1.0))
}

/// `2|ŷ ∩ y| / (|ŷ| + |y|)`, with two empty masks scoring 1.
pub fn dice_score(prediction: &[bool], truth: &[bool]) -> Result<f64> {
    if prediction.len() != truth.len() {
        return Err(Error::shape("dice_score", &[prediction.len()], &[truth.len()]));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &t) in prediction.iter().zip(truth) {
        inter += (p && t) as usize;
        total += p as usize + t as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    WholeTumor,
    TumorCore,
    Enhancing,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WholeTumor, Region::TumorCore, Region::Enhancing];

    pub fn abbrev(self) -> &'static str {
        match self {
            Region::WholeTumor => "WT",
            Region::TumorCore => "TC",
            Region::Enhancing => "ET",
        }
    }

    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::WholeTumor => label != 0,
            Region::TumorCore => label == NECROTIC || label == ENHANCING,
            Region::Enhancing => label == ENHANCING,
        }
    }
}

/// Nested evaluation regions; `et ⊆ tc ⊆ wt`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    pub wt: Vec<bool>,
    pub tc: Vec<bool>,
    pub et: Vec<bool>,
}

impl RegionMasks {
    pub fn get(&self, r: Region) -> &[bool] {
        match r {
            Region::WholeTumor => &self.wt,
            Region::TumorCore => &self.tc,
            Region::Enhancing => &self.et,
        }
    }
}

pub fn region_decompose(labels: &LabelVolume) -> RegionMasks {
    region_masks(labels.labels())
}

pub(crate) fn region_masks(labels: &[u8]) -> RegionMasks {
    let mask = |r: Region| labels.iter().map(|&l| r.contains(l)).collect();
    RegionMasks {
        wt: mask(Region::WholeTumor),
        tc: mask(Region::TumorCore),
        et: mask(Region::Enhancing),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdKind {
    Kl,
    Holder,
}

/// Tempered log-softmax along axis 0.
fn tempered_log_softmax(logits: &Tensor, tau: f64) -> Result<Tensor> {
    let classes = logits.shape()[0];
    let inner = logits.len() / classes;
    let mut out = vec![0.0; logits.len()];
    for i in 0..inner {
        let max = (0..classes)
            .map(|c| logits.data()[c * inner + i] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = (0..classes)
            .map(|c| (logits.data()[c * inner + i] / tau - max).exp())
            .sum();
        let lse = max + s.ln();
        for c in 0..classes {
            out[c * inner + i] = logits.data()[c * inner + i] / tau - lse;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean over voxels of `Div(σ(S_s/τ) ‖ σ(S_t/τ))`, student first. The
/// teacher is a constant.
pub fn pixelwise_kd_loss(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    tau: f64,
    kind: KdKind,
    params: &HolderParams,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if tape.shape(student) != teacher.shape() {
        return Err(Error::shape("pixelwise_kd_loss", tape.shape(student), teacher.shape()));
    }
    if teacher.rank() < 2 || teacher.shape()[0] < 2 {
        return Err(Error::InvalidArgument(format!(
            "logits need a class axis of at least 2, got {:?}",
            teacher.shape()
        )));
    }
    let log_q = tempered_log_softmax(teacher, tau)?;
    let scaled = tape.scale(student, 1.0 / tau)?;
    let log_p = log_softmax_classes(tape, scaled)?;
    let per_voxel = match kind {
        KdKind::Kl => kl_along_classes_log(tape, log_p, &log_q)?,
        KdKind::Holder => holder_along_classes_log(tape, log_p, &log_q, params)?,
    };
    tape.mean_all(per_voxel)
}

/// Teacher signal for [`finetune_loss`].
#[derive(Clone, Copy, Debug)]
pub struct Distillation<'a> {
    pub teacher: &'a Tensor,
    pub kind: KdKind,
    pub weight: f64,
    pub tau: f64,
    pub params: HolderParams,
}

/// Soft Dice on `softmax(logits)` plus, when a teacher is given,
/// `w · pixelwise_kd_loss`.
pub fn finetune_loss(
    tape: &mut Tape,
    logits: Var,
    truth: &LabelVolume,
    kd: Option<Distillation<'_>>,
) -> Result<Var> {
    let probs = tape.softmax(logits, 0)?;
    let dice = soft_dice_loss(tape, probs, truth)?;
    match kd {
        None => Ok(dice),
        Some(kd) => {
            let div = pixelwise_kd_loss(tape, logits, kd.teacher, kd.tau, kd.kind, &kd.params)?;
            let div = tape.scale(div, kd.weight)?;
            tape.add(dice, div)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn dice_counts() {
        let a = [true, true, false, false];
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let p = [true, true, true, true, false, false, false, false];
        let t = [true, true, false, false, true, true, true, true];
        // |p∩t| = 2, |p| = 4, |t| = 6
        assert!((dice_score(&p, &t).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(dice_score(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(dice_score(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(dice_score(&[true], &[true, false]).is_err());
    }

    #[test]
    fn regions_nest() {
        let l = LabelVolume::new([1, 1, 4], vec![0, 1, 2, 3], 4).unwrap();
        let r = region_decompose(&l);
        assert_eq!(r.wt, vec![false, true, true, true]);
        assert_eq!(r.tc, vec![false, true, false, true]);
        assert_eq!(r.et, vec![false, false, false, true]);
        let bg = LabelVolume::new([1, 1, 3], vec![0; 3], 4).unwrap();
        let r = region_decompose(&bg);
        assert!(r.wt.iter().chain(&r.tc).chain(&r.et).all(|&b| !b));
    }

    #[test]
    fn perfect_dice_is_near_zero() {
        let l = LabelVolume::new([1, 2, 2], vec![0, 1, 2, 3], 4).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(l.one_hot().unwrap());
        let loss = soft_dice_loss(&mut tape, p, &l).unwrap();
        assert!(tape.value(loss).item().abs() <= 1e-4);
    }

    #[test]
    fn uniform_dice_matches_scalar_loop() {
        let j = 3;
        let labels = vec![1u8; 8];
        let l = LabelVolume::new([2, 2, 2], labels.clone(), j).unwrap();
        let probs = Tensor::full(&[j, 2, 2, 2], 1.0 / j as f64).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(probs);
        let loss = soft_dice_loss(&mut tape, p, &l).unwrap();

        let mut acc = 0.0;
        for c in 0..j {
            let (mut gy, mut gg, mut yy) = (0.0, 0.0, 0.0);
            for &lab in &labels {
                let g = if lab as usize == c { 1.0 } else { 0.0 };
                let y = 1.0 / j as f64;
                gy += g * y;
                gg += g * g;
                yy += y * y;
            }
            acc += (gy + DICE_EPS) / (gg + yy + DICE_EPS);
        }
        let expect = 1.0 - 2.0 / j as f64 * acc;
        assert!((tape.value(loss).item() - expect).abs() < 1e-14);
    }

    #[test]
    fn dice_gradcheck() {
        let l = LabelVolume::new([1, 2, 3], vec![0, 1, 2, 2, 1, 0], 3).unwrap();
        let logits = Tensor::new(
            vec![3, 1, 2, 3],
            vec![
                0.3, -1.1, 0.8, 0.05, 1.7, -0.4, -0.9, 0.2, 0.6, -0.3, 1.1, 0.9, 0.4, -0.7, -1.3,
                0.25, 0.15, 2.0,
            ],
        )
        .unwrap();
        let err = grad_check(
            |t, x| {
                let p = t.softmax(x, 0)?;
                soft_dice_loss(t, p, &l)
            },
            &logits,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn kd_examples() {
        let params = HolderParams::new(2.0).unwrap();
        let student = Tensor::new(vec![2, 1, 1, 1], vec![0.0, 0.0]).unwrap();
        let teacher = Tensor::new(vec![2, 1, 1, 1], vec![4f64.ln(), 0.0]).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(student.clone());
        let h = pixelwise_kd_loss(&mut tape, s, &teacher, 1.0, KdKind::Holder, &params).unwrap();
        assert!((tape.value(h).item() - 0.153_742_349_873_980_32).abs() < 1e-14);
        let k = pixelwise_kd_loss(&mut tape, s, &teacher, 1.0, KdKind::Kl, &params).unwrap();
        // KL([.5,.5] ‖ [.8,.2]), 40-digit reference
        assert!((tape.value(k).item() - 0.223_143_551_314_209_76).abs() < 1e-14);

        let same = pixelwise_kd_loss(&mut tape, s, &student, 1.0, KdKind::Holder, &params).unwrap();
        assert!(tape.value(same).item().abs() < 1e-12);
        assert!(pixelwise_kd_loss(&mut tape, s, &teacher, 0.0, KdKind::Kl, &params).is_err());
    }

    #[test]
    fn kd_is_finite_for_saturated_logits() {
        let teacher = Tensor::new(vec![3, 1, 1, 2], vec![900.0, -5.0, 0.0, 0.0, -900.0, 5.0]).unwrap();
        for kind in [KdKind::Kl, KdKind::Holder] {
            for alpha in [1.6, 0.5] {
                let params = HolderParams::new(alpha).unwrap();
                let mut tape = Tape::new();
                let s = tape.leaf(
                    Tensor::new(vec![3, 1, 1, 2], vec![-800.0, 0.0, 0.0, 1.0, 800.0, 2.0])
                        .unwrap()
                        .requires_grad(true),
                );
                let loss = pixelwise_kd_loss(&mut tape, s, &teacher, 1.0, kind, &params).unwrap();
                assert!(tape.value(loss).item().is_finite());
                tape.backward(loss).unwrap();
                assert!(tape.grad(s).unwrap().data().iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn kd_gradient_reaches_student_only() {
        let params = HolderParams::default();
        let teacher = Tensor::new(vec![3, 1, 1, 2], vec![0.1, 0.5, -0.2, 0.3, 1.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let s = tape.leaf(
            Tensor::new(vec![3, 1, 1, 2], vec![0.4, -0.1, 0.2, 0.9, -0.5, 0.0])
                .unwrap()
                .requires_grad(true),
        );
        let loss = pixelwise_kd_loss(&mut tape, s, &teacher, 2.0, KdKind::Holder, &params).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(s).unwrap();
        assert!(g.data().iter().any(|v| *v != 0.0));
        // teacher values enter as constants, so the student is the only leaf
        // that carries gradient
        assert_eq!(tape.leaves_with_grad(), vec![s]);
    }

    #[test]
    fn finetune_degenerate_cases() {
        let l = LabelVolume::new([1, 1, 2], vec![0, 1], 2).unwrap();
        let logits = Tensor::new(vec![2, 1, 1, 2], vec![0.2, -0.4, 0.1, 0.3]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(logits.clone());
        let plain = finetune_loss(&mut tape, x, &l, None).unwrap();
        let probs = tape.softmax(x, 0).unwrap();
        let dice = soft_dice_loss(&mut tape, probs, &l).unwrap();
        assert_eq!(tape.value(plain).item(), tape.value(dice).item());

        let other = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 0.0, -1.0, 0.5]).unwrap();
        let kd = |teacher: &Tensor, weight: f64, alpha: f64| -> f64 {
            let mut t = Tape::new();
            let x = t.constant(logits.clone());
            let d = Distillation {
                teacher,
                kind: KdKind::Holder,
                weight,
                tau: 1.0,
                params: HolderParams::new(alpha).unwrap(),
            };
            let l = finetune_loss(&mut t, x, &l, Some(d)).unwrap();
            t.value(l).item()
        };
        let base = tape.value(dice).item();
        assert!((kd(&other, 0.0, 1.6) - base).abs() <= 1e-15);
        assert!((kd(&logits, 1.0, 2.0) - base).abs() <= 1e-12);
        assert!(kd(&other, 1.0, 1.6) > base);
        // the pseudo-divergence vanishes at p^α ∝ q^β, not at p = q, so a
        // non-uniform student matching its teacher still pays for α ≠ 2
        assert!(kd(&logits, 1.0, 1.6) > base);
    }
}
