//! Masked-predicted pretraining objective: the mask-ratio schedule, patch
//! masks shared by every channel, mask-token substitution, and the joint
//! masked + missing reconstruction loss.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::volume::{ModalitySet, MultiModalVolume, MODALITY_COUNT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskRatioMode {
    /// The four measured optima, one per missing count.
    #[default]
    Table,
    /// `p = k·m + b` through the m = 0 and m = 3 anchors. Note the measured
    /// optima (0.75, 0.65, 0.60, 0.50) are not affine in `m`, so the two
    /// modes disagree at m = 1 and m = 2.
    Linear,
}

pub const LINEAR_SLOPE: f64 = -1.0 / 12.0;
pub const LINEAR_INTERCEPT: f64 = 0.75;

/// Mask ratio for `missing` absent modalities (0..=3).
pub fn mask_ratio_for_missing(missing: usize, mode: MaskRatioMode) -> Result<f64> {
    if missing >= MODALITY_COUNT {
        return Err(Error::InvalidArgument(format!(
            "missing modality count must be 0..=3, got {missing}"
        )));
    }
    Ok(match mode {
        MaskRatioMode::Table => [0.75, 0.65, 0.60, 0.50][missing],
        // written as b - m/12 so the m = 3 anchor lands on 0.5 exactly
        MaskRatioMode::Linear => LINEAR_INTERCEPT - missing as f64 / 12.0,
    })
}

/// Boolean mask over a patch grid. Immutable once built; applies to every
/// channel alike.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    patch_size: usize,
    grid: [usize; 3],
    masked: Vec<bool>,
    requested_ratio: f64,
}

impl MaskSpec {
    /// A mask with nothing hidden.
    pub fn none(grid: [usize; 3], patch_size: usize) -> Self {
        Self {
            patch_size,
            grid,
            masked: vec![false; grid.iter().product()],
            requested_ratio: 0.0,
        }
    }

    pub fn from_mask(grid: [usize; 3], patch_size: usize, masked: Vec<bool>) -> Result<Self> {
        if masked.len() != grid.iter().product::<usize>() {
            return Err(Error::shape("MaskSpec", &grid, &[masked.len()]));
        }
        let ratio = masked.iter().filter(|&&m| m).count() as f64 / masked.len() as f64;
        Ok(Self {
            patch_size,
            grid,
            masked,
            requested_ratio: ratio,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn patches(&self) -> usize {
        self.masked.len()
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn requested_ratio(&self) -> f64 {
        self.requested_ratio
    }

    /// Realized fraction of masked patches.
    pub fn ratio(&self) -> f64 {
        self.masked_count() as f64 / self.patches() as f64
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.grid.map(|g| g * self.patch_size)
    }

    /// Per-voxel mask over the tiled spatial extent.
    pub fn voxel_mask(&self) -> Vec<bool> {
        let [d, h, w] = self.spatial();
        let p = self.patch_size;
        let [_, gh, gw] = self.grid;
        let mut out = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    out.push(self.masked[((z / p) * gh + y / p) * gw + x / p]);
                }
            }
        }
        out
    }
}

/// Masks exactly `round(ratio · patches)` patches (ties to even), chosen
/// uniformly without replacement from a ChaCha stream seeded by `seed`.
pub fn sample_patch_mask(
    grid: [usize; 3],
    patch_size: usize,
    ratio: f64,
    seed: u64,
) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio must be in [0, 1), got {ratio}"
        )));
    }
    let n: usize = grid.iter().product();
    let count = (ratio * n as f64).round_ties_even() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![false; n];
    for i in sample(&mut rng, n, count) {
        masked[i] = true;
    }
    Ok(MaskSpec {
        patch_size,
        grid,
        masked,
        requested_ratio: ratio,
    })
}

/// Replaces masked rows of `tokens: [N, S]` with `mask_token: [S]`.
pub fn apply_mask_tokens(
    tape: &mut Tape,
    tokens: Var,
    spec: &MaskSpec,
    mask_token: Var,
) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 2 || shape[0] != spec.patches() {
        return Err(Error::shape("apply_mask_tokens", &shape, &[spec.patches()]));
    }
    let (n, s) = (shape[0], shape[1]);
    if tape.shape(mask_token) != [s] {
        return Err(Error::shape("apply_mask_tokens", &[s], tape.shape(mask_token)));
    }
    let row = tape.reshape(mask_token, &[1, s])?;
    let stacked = tape.concat(&[tokens, row], 0)?;
    let index: Arc<[usize]> = spec
        .masked
        .iter()
        .enumerate()
        .flat_map(|(i, &m)| {
            let src = if m { n } else { i };
            (0..s).map(move |c| src * s + c)
        })
        .collect();
    tape.gather(stacked, index, &[n, s])
}

/// Full-modality reconstruction target plus which of its channels were
/// absent from the model input.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionTarget {
    pub volume: MultiModalVolume,
    pub missing: ModalitySet,
}

impl ReconstructionTarget {
    /// Target made of the visible channels alone (no missing-modality term).
    pub fn visible_only(x_visible: &MultiModalVolume) -> Result<Self> {
        Ok(Self {
            volume: x_visible.select(x_visible.modality_set())?,
            missing: ModalitySet::EMPTY,
        })
    }
}

/// Concatenates visible and missing channels back into canonical order.
/// With no missing volume the target is the visible volume itself.
pub fn reconstruction_target(
    x_visible: &MultiModalVolume,
    x_missing: Option<&MultiModalVolume>,
) -> Result<ReconstructionTarget> {
    let Some(x_missing) = x_missing else {
        return ReconstructionTarget::visible_only(x_visible);
    };
    let vis = x_visible.modality_set();
    let mis = x_missing.modality_set();
    if !vis.intersection(mis).is_empty() {
        return Err(Error::InvalidArgument(format!(
            "visible {vis} and missing {mis} overlap"
        )));
    }
    if vis.union(mis) != ModalitySet::ALL {
        return Err(Error::InvalidArgument(format!(
            "visible {vis} and missing {mis} do not cover all modalities"
        )));
    }
    if x_visible.spatial() != x_missing.spatial() {
        return Err(Error::shape(
            "reconstruction_target",
            &x_visible.spatial(),
            &x_missing.spatial(),
        ));
    }
    let n = x_visible.voxels();
    let mut data = Vec::with_capacity(MODALITY_COUNT * n);
    for m in ModalitySet::ALL.iter() {
        let ch = x_visible
            .channel_of(m)
            .or_else(|| x_missing.channel_of(m))
            .expect("covered above");
        data.extend_from_slice(ch);
    }
    Ok(ReconstructionTarget {
        volume: MultiModalVolume::new(ModalitySet::ALL.iter().collect(), x_visible.spatial(), data)?,
        missing: mis,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RecNorm {
    #[default]
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecScope {
    /// Masked-patch voxels of every target channel.
    MaskedOnly,
    /// Masked-patch voxels of visible channels and every voxel of missing ones.
    MaskedPlusMissing,
}

/// Per-voxel mask of the voxels a reconstruction loss counts, in
/// `C × D × H × W` order.
pub fn counted_voxels(target: &ReconstructionTarget, spec: &MaskSpec, scope: RecScope) -> Vec<bool> {
    let patch_mask = spec.voxel_mask();
    let mut counted = Vec::with_capacity(target.volume.channels() * patch_mask.len());
    for m in target.volume.modalities() {
        let everywhere = scope == RecScope::MaskedPlusMissing && target.missing.contains(*m);
        if everywhere {
            counted.extend(std::iter::repeat(true).take(patch_mask.len()));
        } else {
            counted.extend_from_slice(&patch_mask);
        }
    }
    counted
}

/// Mean absolute (L1) or squared (L2) error of `x_rec` against the target
/// over the counted voxels. An empty count gives a constant 0.
pub fn masked_reconstruction_loss(
    tape: &mut Tape,
    x_rec: Var,
    target: &ReconstructionTarget,
    spec: &MaskSpec,
    norm: RecNorm,
    scope: RecScope,
) -> Result<Var> {
    let t = target.volume.to_tensor()?;
    if tape.shape(x_rec) != t.shape() {
        return Err(Error::shape("masked_reconstruction_loss", tape.shape(x_rec), t.shape()));
    }
    if spec.spatial() != target.volume.spatial() {
        return Err(Error::shape(
            "masked_reconstruction_loss",
            &spec.spatial(),
            &target.volume.spatial(),
        ));
    }
    let counted = counted_voxels(target, spec, scope);
    let count = counted.iter().filter(|&&c| c).count();
    if count == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let tv = tape.constant(t);
    let diff = tape.sub(x_rec, tv)?;
    let err = match norm {
        RecNorm::L1 => tape.abs(diff)?,
        RecNorm::L2 => tape.mul(diff, diff)?,
    };
    let picked = tape.masked_select(err, Arc::from(counted))?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, 1.0 / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;

    #[test]
    fn table_schedule() {
        let got: Vec<f64> = (0..4)
            .map(|m| mask_ratio_for_missing(m, MaskRatioMode::Table).unwrap())
            .collect();
        assert_eq!(got, vec![0.75, 0.65, 0.60, 0.50]);
        assert_eq!(mask_ratio_for_missing(3, MaskRatioMode::Linear).unwrap(), 0.5);
        assert_eq!(mask_ratio_for_missing(0, MaskRatioMode::Linear).unwrap(), 0.75);
        assert!(mask_ratio_for_missing(4, MaskRatioMode::Table).is_err());
    }

    #[test]
    fn sampling_counts_and_determinism() {
        let none = sample_patch_mask([4, 4, 4], 2, 0.0, 1).unwrap();
        assert_eq!(none.masked_count(), 0);
        let half = sample_patch_mask([4, 4, 4], 2, 0.5, 7).unwrap();
        assert_eq!(half.masked_count(), 32);
        assert_eq!(half, sample_patch_mask([4, 4, 4], 2, 0.5, 7).unwrap());
        assert_ne!(half, sample_patch_mask([4, 4, 4], 2, 0.5, 8).unwrap());
        assert!(sample_patch_mask([2, 2, 2], 2, 1.0, 0).is_err());
        // 0.3 * 8 = 2.4 -> 2; 0.625 * 8 = 5 exactly
        assert_eq!(sample_patch_mask([2, 2, 2], 2, 0.3, 0).unwrap().masked_count(), 2);
        assert_eq!(sample_patch_mask([2, 2, 2], 2, 0.625, 0).unwrap().masked_count(), 5);
    }

    #[test]
    fn voxel_mask_tiles_patches() {
        let spec = MaskSpec::from_mask([1, 1, 2], 2, vec![true, false]).unwrap();
        let vm = spec.voxel_mask();
        assert_eq!(vm.len(), 2 * 2 * 4);
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..4 {
                    assert_eq!(vm[(z * 2 + y) * 4 + x], x < 2);
                }
            }
        }
    }

    fn tokens(tape: &mut Tape, n: usize, s: usize) -> Var {
        let data = (0..n * s).map(|v| v as f64).collect();
        tape.constant(Tensor::new(vec![n, s], data).unwrap())
    }

    #[test]
    fn mask_token_substitution() {
        let mut tape = Tape::new();
        let x = tokens(&mut tape, 8, 3);
        let tok = tape.leaf(Tensor::from_vec(vec![-1.0, -2.0, -3.0]).unwrap().requires_grad(true));

        let all = MaskSpec::from_mask([2, 2, 2], 2, vec![true; 8]).unwrap();
        let y = apply_mask_tokens(&mut tape, x, &all, tok).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert_eq!(row, &[-1.0, -2.0, -3.0]);
        }
        let none = MaskSpec::none([2, 2, 2], 2);
        let y = apply_mask_tokens(&mut tape, x, &none, tok).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let some = MaskSpec::from_mask(
            [2, 2, 2],
            2,
            vec![true, false, true, false, false, false, true, false],
        )
        .unwrap();
        let y = apply_mask_tokens(&mut tape, x, &some, tok).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(tok).unwrap().data(), &[3.0, 3.0, 3.0]);
        assert!(apply_mask_tokens(&mut tape, x, &MaskSpec::none([1, 1, 2], 2), tok).is_err());
    }

    fn vol(mods: &[Modality], spatial: [usize; 3], base: f64) -> MultiModalVolume {
        let n = mods.len() * spatial.iter().product::<usize>();
        MultiModalVolume::new(
            mods.to_vec(),
            spatial,
            (0..n).map(|i| base + i as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn targets_restore_canonical_order() {
        let full = vol(&Modality::ALL, [1, 2, 2], 0.0);
        let t = reconstruction_target(&full, None).unwrap();
        assert_eq!(t.volume, full);
        assert!(t.missing.is_empty());

        let visible = full.select(ModalitySet::single(Modality::T2)).unwrap();
        let missing = full.select(ModalitySet::single(Modality::T2).complement()).unwrap();
        let t = reconstruction_target(&visible, Some(&missing)).unwrap();
        assert_eq!(t.volume, full);
        assert_eq!(t.missing.len(), 3);

        let a = full
            .select(ModalitySet::from_modalities(&[Modality::T1, Modality::Flair]))
            .unwrap();
        let b = full.select(a.modality_set().complement()).unwrap();
        assert_eq!(reconstruction_target(&a, Some(&b)).unwrap().volume, full);
        assert_eq!(reconstruction_target(&b, Some(&a)).unwrap().volume, full);

        assert!(reconstruction_target(&a, Some(&a)).is_err());
        assert!(reconstruction_target(&visible, Some(&a)).is_err());
    }

    #[test]
    fn loss_hand_values() {
        // 2x2x2 single channel, one patch of size 2 masked, error 0.5 everywhere
        let target = ReconstructionTarget {
            volume: MultiModalVolume::new(vec![Modality::Flair], [2, 2, 2], vec![1.0; 8]).unwrap(),
            missing: ModalitySet::EMPTY,
        };
        let spec = MaskSpec::from_mask([1, 1, 1], 2, vec![true]).unwrap();
        let mut tape = Tape::new();
        let rec = tape.constant(Tensor::full(&[1, 2, 2, 2], 1.5).unwrap());
        for norm in [RecNorm::L1, RecNorm::L2] {
            let l = masked_reconstruction_loss(&mut tape, rec, &target, &spec, norm, RecScope::MaskedOnly)
                .unwrap();
            let expect = if norm == RecNorm::L1 { 0.5 } else { 0.25 };
            assert_eq!(tape.value(l).item(), expect);
        }
        let nothing = MaskSpec::none([1, 1, 1], 2);
        let l = masked_reconstruction_loss(
            &mut tape,
            rec,
            &target,
            &nothing,
            RecNorm::L1,
            RecScope::MaskedPlusMissing,
        )
        .unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn missing_channels_count_everywhere() {
        let full = vol(&Modality::ALL, [2, 2, 2], 0.0);
        let visible = full.select(ModalitySet::single(Modality::Flair)).unwrap();
        let missing = full.select(visible.modality_set().complement()).unwrap();
        let target = reconstruction_target(&visible, Some(&missing)).unwrap();
        let spec = MaskSpec::none([1, 1, 1], 2);
        let counted = counted_voxels(&target, &spec, RecScope::MaskedPlusMissing);
        assert_eq!(counted.iter().filter(|&&c| c).count(), 3 * 8);
        assert!(counted[..8].iter().all(|&c| !c));
        let counted = counted_voxels(&target, &spec, RecScope::MaskedOnly);
        assert!(counted.iter().all(|&c| !c));
    }
}
