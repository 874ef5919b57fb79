//! Multi-channel MRI-like volumes, label volumes, and modality bookkeeping.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Flair,
    T1,
    T1c,
    T2,
}

impl Modality {
    /// Canonical channel order.
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1, Modality::T1c, Modality::T2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Flair => "FLAIR",
            Modality::T1 => "T1",
            Modality::T1c => "T1c",
            Modality::T2 => "T2",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "flair" | "f" => Ok(Modality::Flair),
            "t1" => Ok(Modality::T1),
            "t1c" | "t1ce" | "t1gd" => Ok(Modality::T1c),
            "t2" => Ok(Modality::T2),
            other => Err(Error::InvalidArgument(format!("unknown modality {other:?}"))),
        }
    }
}

pub const MODALITY_COUNT: usize = 4;

/// Subset of the four modalities, stored as a bitmask in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);
    pub const ALL: ModalitySet = ModalitySet(0b1111);

    pub fn from_modalities(mods: &[Modality]) -> Self {
        ModalitySet(mods.iter().fold(0, |m, x| m | (1 << x.index())))
    }

    pub fn single(m: Modality) -> Self {
        ModalitySet(1 << m.index())
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Number of absent modalities, the `m` of the mask-ratio schedule.
    pub fn missing_count(self) -> usize {
        MODALITY_COUNT - self.len()
    }

    pub fn complement(self) -> Self {
        ModalitySet(!self.0 & 0b1111)
    }

    pub fn union(self, other: Self) -> Self {
        ModalitySet(self.0 | other.0)
    }

    pub fn intersection(self, other: Self) -> Self {
        ModalitySet(self.0 & other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    /// Rejects the empty set, which is never a valid scenario.
    pub fn validate_scenario(self) -> Result<Self> {
        if self.is_empty() {
            return Err(Error::InvalidArgument(
                "modality set must contain at least one modality".into(),
            ));
        }
        Ok(self)
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.iter().map(Modality::name).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    /// Accepts `all`, or names separated by `,` or `+`.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(ModalitySet::ALL);
        }
        let mods = s
            .split([',', '+'])
            .filter(|p| !p.trim().is_empty())
            .map(Modality::from_str)
            .collect::<Result<Vec<_>>>()?;
        ModalitySet::from_modalities(&mods).validate_scenario()
    }
}

/// `C × D × H × W` intensities, channel `c` holding `modalities[c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    modalities: Vec<Modality>,
    spatial: [usize; 3],
    data: Vec<f64>,
}

impl MultiModalVolume {
    pub fn new(modalities: Vec<Modality>, spatial: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let mut seen = ModalitySet::EMPTY;
        for m in &modalities {
            if seen.contains(*m) {
                return Err(Error::InvalidArgument(format!("duplicate modality {m}")));
            }
            seen = seen.union(ModalitySet::single(*m));
        }
        if spatial.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument(format!(
                "zero spatial extent {spatial:?}"
            )));
        }
        let expected = modalities.len() * spatial.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "volume data has {} values, expected {expected}",
                data.len()
            )));
        }
        Ok(Self {
            modalities,
            spatial,
            data,
        })
    }

    pub fn zeros(modalities: Vec<Modality>, spatial: [usize; 3]) -> Result<Self> {
        let n = modalities.len() * spatial.iter().product::<usize>();
        Self::new(modalities, spatial, vec![0.0; n])
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn modality_set(&self) -> ModalitySet {
        ModalitySet::from_modalities(&self.modalities)
    }

    pub fn channels(&self) -> usize {
        self.modalities.len()
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.spatial
    }

    pub fn voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_of(&self, m: Modality) -> Option<&[f64]> {
        self.modalities
            .iter()
            .position(|x| *x == m)
            .map(|c| self.channel(c))
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let [d, h, w] = self.spatial;
        Tensor::new(vec![self.channels(), d, h, w], self.data.clone())
    }

    /// Channels of `keep` in canonical order. Every kept modality must be present.
    pub fn select(&self, keep: ModalitySet) -> Result<Self> {
        let mut data = Vec::with_capacity(keep.len() * self.voxels());
        for m in keep.iter() {
            let ch = self.channel_of(m).ok_or_else(|| {
                Error::InvalidArgument(format!("modality {m} not present in volume"))
            })?;
            data.extend_from_slice(ch);
        }
        Self::new(keep.iter().collect(), self.spatial, data)
    }

    /// All four modalities in canonical order, absent ones filled with zeros.
    pub fn zero_filled(&self) -> Self {
        let n = self.voxels();
        let mut data = vec![0.0; MODALITY_COUNT * n];
        for m in Modality::ALL {
            if let Some(ch) = self.channel_of(m) {
                data[m.index() * n..(m.index() + 1) * n].copy_from_slice(ch);
            }
        }
        Self {
            modalities: Modality::ALL.to_vec(),
            spatial: self.spatial,
            data,
        }
    }

    /// Axis-aligned sub-volume starting at `origin`.
    pub fn crop(&self, origin: [usize; 3], extent: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if extent[a] == 0 || origin[a] + extent[a] > self.spatial[a] {
                return Err(Error::Geometry(format!(
                    "crop {origin:?}+{extent:?} outside {:?}",
                    self.spatial
                )));
            }
        }
        let [_, h, w] = self.spatial;
        let mut data = Vec::with_capacity(self.channels() * extent.iter().product::<usize>());
        for c in 0..self.channels() {
            let ch = self.channel(c);
            for z in 0..extent[0] {
                for y in 0..extent[1] {
                    let start = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
                    data.extend_from_slice(&ch[start..start + extent[2]]);
                }
            }
        }
        Self::new(self.modalities.clone(), extent, data)
    }
}

pub const BACKGROUND: u8 = 0;
pub const NECROTIC: u8 = 1;
pub const EDEMA: u8 = 2;
pub const ENHANCING: u8 = 3;
pub const CLASS_NAMES: [&str; 4] = ["background", "NCR/NE", "ED", "ET"];

/// `D × H × W` class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    spatial: [usize; 3],
    labels: Vec<u8>,
    num_classes: usize,
}

impl LabelVolume {
    pub fn new(spatial: [usize; 3], labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two classes, got {num_classes}"
            )));
        }
        if labels.len() != spatial.iter().product::<usize>() {
            return Err(Error::InvalidArgument(format!(
                "label count {} does not match extent {spatial:?}",
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            spatial,
            labels,
            num_classes,
        })
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.spatial
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> &'static [&'static str] {
        &CLASS_NAMES[..self.num_classes.min(CLASS_NAMES.len())]
    }

    pub fn crop(&self, origin: [usize; 3], extent: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if extent[a] == 0 || origin[a] + extent[a] > self.spatial[a] {
                return Err(Error::Geometry(format!(
                    "crop {origin:?}+{extent:?} outside {:?}",
                    self.spatial
                )));
            }
        }
        let [_, h, w] = self.spatial;
        let mut labels = Vec::with_capacity(extent.iter().product());
        for z in 0..extent[0] {
            for y in 0..extent[1] {
                let start = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
                labels.extend_from_slice(&self.labels[start..start + extent[2]]);
            }
        }
        Self::new(extent, labels, self.num_classes)
    }

    /// `J × D × H × W` one-hot encoding.
    pub fn one_hot(&self) -> Result<Tensor> {
        let n = self.labels.len();
        let mut data = vec![0.0; self.num_classes * n];
        for (i, &l) in self.labels.iter().enumerate() {
            data[l as usize * n + i] = 1.0;
        }
        let [d, h, w] = self.spatial;
        Tensor::new(vec![self.num_classes, d, h, w], data)
    }
}

/// `J × D × H × W` class logits, class axis first.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitVolume(Tensor);

impl LogitVolume {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 || t.shape()[0] < 2 {
            return Err(Error::InvalidArgument(format!(
                "logit volume needs shape [J>=2, D, H, W], got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.0.shape();
        [s[1], s[2], s[3]]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Per-voxel argmax, ties to the lower class index.
    pub fn argmax(&self) -> Result<LabelVolume> {
        let labels = self.0.argmax_axis0().into_iter().map(|c| c as u8).collect();
        LabelVolume::new(self.spatial(), labels, self.classes())
    }
}
