//! Central-difference checks of every differentiable op, the losses, and
//! the whole model.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::CheckCase;
use crate::divergence::HolderParams;
use crate::error::Result;
use crate::masking::{masked_reconstruction_loss, sample_patch_mask, RecNorm, RecScope, ReconstructionTarget};
use crate::model::{Model, ModelConfig};
use crate::seg_loss::{finetune_loss, pixelwise_kd_loss, soft_dice_loss, Distillation, KdKind};
use crate::tensor::{grad_check, Tape, Tensor, Var};
use crate::volume::{LabelVolume, Modality, ModalitySet, MultiModalVolume};

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Random points per op.
pub const TRIALS: u64 = 10;

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("valid shape")
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let t = normal(shape, rng);
    Tensor::new(shape.to_vec(), t.data().iter().map(|v| v.abs() + 0.5).collect()).expect("valid shape")
}

/// Contracts `y` with fixed random weights so no gradient is trivially zero.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = normal(&shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xABCD));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

type Unary = fn(&mut Tape, Var) -> Result<Var>;

fn unary_ops() -> Vec<(&'static str, Unary, bool)> {
    vec![
        ("scale", |t, x| t.scale(x, -1.7), false),
        ("exp", |t, x| t.exp(x), false),
        ("log", |t, x| t.log(x), true),
        ("pow2", |t, x| t.pow(x, 2.0), false),
        ("pow1.6", |t, x| t.pow(x, 1.6), true),
        ("pow-1", |t, x| t.pow(x, -1.0), true),
        ("sqrt", |t, x| t.sqrt(x), true),
        ("softmax0", |t, x| t.softmax(x, 0), false),
        ("softmax2", |t, x| t.softmax(x, 2), false),
        ("layer_norm", |t, x| t.layer_norm(x, 1, 1e-5), false),
        ("gelu", |t, x| t.gelu(x), false),
        ("relu", |t, x| t.relu(x), false),
        ("sigmoid", |t, x| t.sigmoid(x), false),
        ("abs", |t, x| t.abs(x), false),
        ("sum", |t, x| t.sum(x, &[0, 2]), false),
        ("mean", |t, x| t.mean(x, &[1]), false),
        ("reshape", |t, x| t.reshape(x, &[6, 4]), false),
        ("permute", |t, x| t.permute(x, &[2, 0, 1]), false),
        ("concat", |t, x| t.concat(&[x, x], 1), false),
        ("gather", |t, x| {
            let idx: Arc<[usize]> = (0..30).map(|i| (i * 7) % 24).collect();
            t.gather(x, idx, &[5, 6])
        }, false),
        ("masked_select", |t, x| {
            let mask: Arc<[bool]> = (0..24).map(|i| i % 3 != 1).collect();
            t.masked_select(x, mask)
        }, false),
        ("broadcast_rows", |t, x| {
            let v = t.reshape(x, &[24])?;
            t.broadcast_rows(v, 3)
        }, false),
    ]
}

fn binary_ops() -> Vec<(&'static str, fn(&mut Tape, Var, Var) -> Result<Var>, [usize; 3], [usize; 3])> {
    vec![
        ("add", |t, a, b| t.add(a, b), [2, 3, 4], [2, 3, 4]),
        ("sub", |t, a, b| t.sub(a, b), [2, 3, 4], [2, 3, 4]),
        ("mul", |t, a, b| t.mul(a, b), [2, 3, 4], [2, 3, 4]),
        ("matmul_batched", |t, a, b| t.matmul(a, b), [2, 3, 4], [2, 4, 5]),
    ]
}

/// Every op on [`TRIALS`] random points, step [`STEP`].
pub fn op_cases() -> Vec<CheckCase> {
    let mut out = Vec::new();
    for (name, op, needs_positive) in unary_ops() {
        let mut worst: f64 = 0.0;
        for trial in 0..TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let x = if needs_positive {
                positive(&[2, 3, 4], &mut rng)
            } else {
                normal(&[2, 3, 4], &mut rng)
            };
            let f = |t: &mut Tape, v: Var| {
                let y = op(t, v)?;
                project(t, y, trial)
            };
            worst = worst.max(grad_check(f, &x, STEP));
        }
        out.push(CheckCase {
            name: name.to_string(),
            error: worst,
            tolerance: OP_TOLERANCE,
        });
    }
    for (name, op, sa, sb) in binary_ops() {
        for side in ["lhs", "rhs"] {
            let mut worst: f64 = 0.0;
            for trial in 0..TRIALS {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
                let a = normal(&sa, &mut rng);
                let b = normal(&sb, &mut rng);
                let (point, other) = if side == "lhs" { (&a, &b) } else { (&b, &a) };
                let f = |t: &mut Tape, v: Var| {
                    let o = t.constant(other.clone());
                    let y = if side == "lhs" { op(t, v, o)? } else { op(t, o, v)? };
                    project(t, y, trial)
                };
                worst = worst.max(grad_check(f, point, STEP));
            }
            out.push(CheckCase {
                name: format!("{name}/{side}"),
                error: worst,
                tolerance: OP_TOLERANCE,
            });
        }
    }
    // plain 2-D matmul and linear layers
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let x = normal(&[5, 3], &mut rng);
        let w = normal(&[3, 4], &mut rng);
        let b = normal(&[4], &mut rng);
        let f = |t: &mut Tape, v: Var| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.linear(v, wv, Some(bv))?;
            project(t, y, trial)
        };
        worst = worst.max(grad_check(f, &x, STEP));
        let g = |t: &mut Tape, v: Var| {
            let xv = t.constant(x.clone());
            let y = t.matmul(xv, v)?;
            project(t, y, trial)
        };
        worst = worst.max(grad_check(g, &w, STEP));
    }
    out.push(CheckCase {
        name: "matmul_2d/linear".into(),
        error: worst,
        tolerance: OP_TOLERANCE,
    });
    out
}

fn random_labels(spatial: [usize; 3], rng: &mut ChaCha8Rng) -> LabelVolume {
    let n = spatial.iter().product();
    LabelVolume::new(spatial, (0..n).map(|_| rng.gen_range(0..4u8)).collect(), 4).expect("valid labels")
}

/// Soft Dice, both distillation losses and the reconstruction loss.
pub fn loss_cases() -> Vec<CheckCase> {
    let mut cases: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, e: f64| match cases.iter_mut().find(|(n, _)| n == name) {
        Some((_, w)) => *w = w.max(e),
        None => cases.push((name.to_string(), e)),
    };
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + trial);
        let logits = normal(&[4, 3, 3, 3], &mut rng);
        let truth = random_labels([3, 3, 3], &mut rng);
        let dice = |t: &mut Tape, v: Var| {
            let p = t.softmax(v, 0)?;
            soft_dice_loss(t, p, &truth)
        };
        push("soft_dice_loss", grad_check(dice, &logits, STEP));

        let teacher = normal(&[4, 3, 3, 3], &mut rng);
        for (name, kind) in [("kd_kl", KdKind::Kl), ("kd_holder", KdKind::Holder)] {
            let params = HolderParams::new(1.6).expect("valid alpha");
            let f = |t: &mut Tape, v: Var| pixelwise_kd_loss(t, v, &teacher, 2.0, kind, &params);
            push(name, grad_check(f, &logits, STEP));
        }

        let spatial = [4, 4, 4];
        let full = MultiModalVolume::new(
            Modality::ALL.to_vec(),
            spatial,
            normal(&[4, 4, 4, 4], &mut rng).into_data(),
        )
        .expect("valid volume");
        let target = ReconstructionTarget {
            volume: full,
            missing: ModalitySet::from_modalities(&[Modality::T1, Modality::T2]),
        };
        let mask = sample_patch_mask([2, 2, 2], 2, 0.5, trial).expect("valid ratio");
        let rec = normal(&[4, 4, 4, 4], &mut rng);
        for (name, norm) in [("masked_reconstruction_l1", RecNorm::L1), ("masked_reconstruction_l2", RecNorm::L2)] {
            let f = |t: &mut Tape, v: Var| {
                masked_reconstruction_loss(t, v, &target, &mask, norm, RecScope::MaskedPlusMissing)
            };
            push(name, grad_check(f, &rec, STEP));
        }
    }
    cases
        .into_iter()
        .map(|(name, error)| CheckCase {
            name,
            error,
            tolerance: OP_TOLERANCE,
        })
        .collect()
}

/// Largest error over every parameter tensor of `model` for `loss`.
pub fn model_grad_error<F>(model: &Model, loss: F) -> f64
where
    F: Fn(&Model, &mut Tape, &crate::model::Bound) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for (i, p) in model.params().iter().enumerate() {
        let f = |t: &mut Tape, v: Var| {
            let mut b = model.bind(t, false);
            b.replace(i, v);
            loss(model, t, &b)
        };
        worst = worst.max(grad_check(f, &p.value, STEP));
    }
    worst
}

/// Desk model whose weights are scaled up from the initializer so that no
/// parameter sits in a vanishing-gradient corner.
pub fn check_model(seed: u64) -> Result<Model> {
    let mut model = Model::new(ModelConfig::default(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    for p in model.params_mut() {
        // norm gains stay near 1 so the MLP activations do not saturate
        let gain = p.name.ends_with("gamma");
        for v in p.value.data_mut() {
            let noise = rng.sample::<f64, _>(StandardNormal);
            *v = if gain { 1.0 + 0.1 * noise } else { 10.0 * *v + 0.05 * noise };
        }
    }
    Ok(model)
}

/// Reconstruction and fine-tuning losses through the full 8³ model.
pub fn model_cases() -> Result<Vec<CheckCase>> {
    let model = check_model(0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let input = normal(&[4, 8, 8, 8], &mut rng);
    let truth = random_labels([8, 8, 8], &mut rng);
    let teacher = normal(&[4, 8, 8, 8], &mut rng);
    let full = MultiModalVolume::new(Modality::ALL.to_vec(), [8, 8, 8], normal(&[4, 8, 8, 8], &mut rng).into_data())?;
    let target = ReconstructionTarget {
        volume: full,
        missing: ModalitySet::single(Modality::T1c),
    };
    let mask = sample_patch_mask([4, 4, 4], 2, 0.5, 1)?;
    let params = HolderParams::new(1.6)?;

    let rec = model_grad_error(&model, |m, t, b| {
        let y = m.forward_reconstruct(t, b, &input, Some(&mask))?;
        masked_reconstruction_loss(t, y, &target, &mask, RecNorm::L2, RecScope::MaskedPlusMissing)
    });
    let seg = model_grad_error(&model, |m, t, b| {
        let y = m.forward_segment(t, b, &input)?;
        let kd = Distillation {
            teacher: &teacher,
            kind: KdKind::Holder,
            weight: 0.5,
            tau: 1.0,
            params,
        };
        finetune_loss(t, y, &truth, Some(kd))
    });
    Ok(vec![
        CheckCase {
            name: "model/masked_reconstruction".into(),
            error: rec,
            tolerance: MODEL_TOLERANCE,
        },
        CheckCase {
            name: "model/finetune".into(),
            error: seg,
            tolerance: MODEL_TOLERANCE,
        },
    ])
}

pub fn all_cases() -> Result<Vec<CheckCase>> {
    let mut out = op_cases();
    out.extend(loss_cases());
    out.extend(model_cases()?);
    Ok(out)
}
