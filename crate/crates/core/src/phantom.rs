//! Synthetic multi-modal phantoms with nested tumour regions, plus the
//! `MMV1` volume file format and dataset manifests.
//!
//! `MMV1` layout: magic `MMV1`, u8 rank, `rank` little-endian u64 extents,
//! then f32 little-endian values in row-major order. Image volumes are
//! stored `[C, D, H, W]`; label volumes `[D, H, W]` with class ids as floats.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};
use crate::volume::{
    LabelVolume, Modality, ModalitySet, MultiModalVolume, BACKGROUND, EDEMA, ENHANCING, MODALITY_COUNT, NECROTIC,
};

pub const NUM_CLASSES: usize = 4;
pub const MMV_MAGIC: [u8; 4] = *b"MMV1";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contrast {
    pub mean: f64,
    pub sigma: f64,
}

/// Mean and noise per modality (canonical order) and label class.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastTable(pub [[Contrast; NUM_CLASSES]; MODALITY_COUNT]);

impl Default for ContrastTable {
    fn default() -> Self {
        // columns: background, NCR/NE, ED, ET
        let means = [
            [0.20, 0.45, 0.85, 0.50], // FLAIR
            [0.40, 0.20, 0.35, 0.30], // T1
            [0.30, 0.15, 0.35, 0.90], // T1c
            [0.25, 0.50, 0.85, 0.45], // T2
        ];
        Self(means.map(|row| row.map(|mean| Contrast { mean, sigma: 0.05 })))
    }
}

impl ContrastTable {
    pub fn get(&self, m: Modality, class: u8) -> Contrast {
        self.0[m.index()][class as usize]
    }

    /// Two-class Fisher ratio of `class` against an equal-weight mixture of
    /// the remaining classes, in modality `m`.
    pub fn fisher_ratio(&self, m: Modality, class: u8) -> f64 {
        let row = &self.0[m.index()];
        let target = row[class as usize];
        let rest: Vec<Contrast> = (0..NUM_CLASSES)
            .filter(|&c| c != class as usize)
            .map(|c| row[c])
            .collect();
        let k = rest.len() as f64;
        let mean = rest.iter().map(|c| c.mean).sum::<f64>() / k;
        let var = rest
            .iter()
            .map(|c| c.sigma * c.sigma + (c.mean - mean).powi(2))
            .sum::<f64>()
            / k;
        (target.mean - mean).powi(2) / (target.sigma * target.sigma + var)
    }

    /// ET must separate best in T1c, ED best in FLAIR or T2.
    pub fn validate(&self) -> Result<()> {
        for m in Modality::ALL {
            for c in 0..NUM_CLASSES as u8 {
                let v = self.get(m, c);
                if !v.mean.is_finite() || !v.sigma.is_finite() || v.sigma <= 0.0 {
                    return Err(Error::Config(format!("contrast {m}/{c}: invalid {v:?}")));
                }
            }
        }
        let best = |class: u8| {
            Modality::ALL
                .into_iter()
                .max_by(|a, b| self.fisher_ratio(*a, class).total_cmp(&self.fisher_ratio(*b, class)))
                .expect("four modalities")
        };
        if best(ENHANCING) != Modality::T1c {
            return Err(Error::Config(format!(
                "enhancing tumour separates best in {}, not T1c",
                best(ENHANCING)
            )));
        }
        if !matches!(best(EDEMA), Modality::Flair | Modality::T2) {
            return Err(Error::Config(format!(
                "edema separates best in {}, not FLAIR/T2",
                best(EDEMA)
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub extent: [usize; 3],
    pub tumors: (usize, usize),
    pub wt_radius: (f64, f64),
    pub tc_radius: (f64, f64),
    pub et_radius: (f64, f64),
    pub contrast: ContrastTable,
    /// Seeds tumour geometry.
    pub seed: u64,
    /// Seeds intensity noise.
    pub noise_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            extent: [32; 3],
            tumors: (2, 3),
            wt_radius: (5.0, 9.0),
            tc_radius: (3.0, 6.0),
            et_radius: (1.0, 3.0),
            contrast: ContrastTable::default(),
            seed: 0,
            noise_seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            noise_seed: seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if lo > 0.0 && lo <= hi && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} radius range ({lo}, {hi}) is invalid")))
            }
        };
        range("WT", self.wt_radius)?;
        range("TC", self.tc_radius)?;
        range("ET", self.et_radius)?;
        // every draw must leave room for a strictly smaller inner radius
        if self.tc_radius.0 >= self.wt_radius.0 || self.et_radius.0 >= self.tc_radius.0 {
            return Err(Error::Config(format!(
                "radius ranges cannot nest: ET {:?}, TC {:?}, WT {:?}",
                self.et_radius, self.tc_radius, self.wt_radius
            )));
        }
        if self.tumors.0 == 0 || self.tumors.0 > self.tumors.1 {
            return Err(Error::Config(format!("tumour count range {:?}", self.tumors)));
        }
        if self.extent.contains(&0) {
            return Err(Error::Config(format!("extent {:?}", self.extent)));
        }
        self.contrast.validate()
    }
}

/// One tumour: concentric ellipsoids sharing a centre and axis scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct Tumor {
    pub center: [f64; 3],
    pub aspect: [f64; 3],
    pub wt: f64,
    pub tc: f64,
    pub et: f64,
}

fn rng_for(seed: u64, index: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(2).wrapping_add(stream));
    rng
}

pub fn sample_tumors(config: &PhantomConfig, index: u64) -> Result<Vec<Tumor>> {
    config.validate()?;
    let mut rng = rng_for(config.seed, index, 0);
    let count = rng.gen_range(config.tumors.0..=config.tumors.1);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let wt = rng.gen_range(config.wt_radius.0..=config.wt_radius.1);
        let tc = rng.gen_range(config.tc_radius.0..config.tc_radius.1.min(wt));
        let et = rng.gen_range(config.et_radius.0..config.et_radius.1.min(tc));
        let aspect = [0; 3].map(|_| rng.gen_range(0.8..1.2));
        let center = [0, 1, 2].map(|a| {
            let e = config.extent[a] as f64;
            let margin = (wt * 0.5).min(e / 2.0);
            rng.gen_range(margin..=e - margin)
        });
        out.push(Tumor {
            center,
            aspect,
            wt,
            tc,
            et,
        });
    }
    Ok(out)
}

fn depth_rank(label: u8) -> u8 {
    match label {
        EDEMA => 1,
        NECROTIC => 2,
        ENHANCING => 3,
        _ => 0,
    }
}

pub fn rasterize(extent: [usize; 3], tumors: &[Tumor]) -> Vec<u8> {
    let [d, h, w] = extent;
    let mut labels = vec![BACKGROUND; d * h * w];
    for t in tumors {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [z, y, x];
                    let r = (0..3)
                        .map(|a| ((p[a] as f64 + 0.5 - t.center[a]) / t.aspect[a]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    let label = if r < t.et {
                        ENHANCING
                    } else if r < t.tc {
                        NECROTIC
                    } else if r < t.wt {
                        EDEMA
                    } else {
                        continue;
                    };
                    let slot = &mut labels[(z * h + y) * w + x];
                    if depth_rank(label) > depth_rank(*slot) {
                        *slot = label;
                    }
                }
            }
        }
    }
    labels
}

/// Deterministic phantom for `(config.seed, config.noise_seed, index)`.
/// Intensities are rounded to f32 so files round-trip exactly.
pub fn generate_phantom(config: &PhantomConfig, index: u64) -> Result<(MultiModalVolume, LabelVolume)> {
    let tumors = sample_tumors(config, index)?;
    let labels = rasterize(config.extent, &tumors);
    let mut rng = rng_for(config.noise_seed, index, 1);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(MODALITY_COUNT * labels.len());
    for m in Modality::ALL {
        for &l in &labels {
            let c = config.contrast.get(m, l);
            let z: f64 = std.sample(&mut rng);
            data.push((c.mean + c.sigma * z) as f32 as f64);
        }
    }
    Ok((
        MultiModalVolume::new(Modality::ALL.to_vec(), config.extent, data)?,
        LabelVolume::new(config.extent, labels, NUM_CLASSES)?,
    ))
}

/// Splits `volume` into the kept channels and, unless nothing is dropped,
/// the dropped ones.
pub fn drop_modalities(
    volume: &MultiModalVolume,
    keep: ModalitySet,
) -> Result<(MultiModalVolume, Option<MultiModalVolume>)> {
    if keep.is_empty() {
        return Err(Error::InvalidArgument("cannot keep an empty modality set".into()));
    }
    let have = volume.modality_set();
    if keep.intersection(have) != keep {
        return Err(Error::InvalidArgument(format!("volume has {have}, cannot keep {keep}")));
    }
    let dropped = have.intersection(keep.complement());
    let missing = if dropped.is_empty() {
        None
    } else {
        Some(volume.select(dropped)?)
    };
    Ok((volume.select(keep)?, missing))
}

pub fn encode_mmv(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(5 + 8 * t.rank() + 4 * t.len());
    buf.extend_from_slice(&MMV_MAGIC);
    buf.push(t.rank() as u8);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_mmv(bytes: &[u8]) -> Result<Tensor> {
    const WHAT: &str = "volume file";
    let truncated = |detail: String| Error::Truncated { what: WHAT, detail };
    if bytes.len() < 5 {
        return Err(truncated(format!("{} byte header", bytes.len())));
    }
    if bytes[..4] != MMV_MAGIC {
        return Err(Error::BadMagic {
            what: WHAT,
            expected: MMV_MAGIC,
            found: bytes[..4].to_vec(),
        });
    }
    let rank = bytes[4] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Corrupt {
            what: WHAT,
            detail: format!("rank {rank}"),
        });
    }
    let header = 5 + 8 * rank;
    if bytes.len() < header {
        return Err(truncated(format!("header needs {header} bytes, have {}", bytes.len())));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut n: u64 = 1;
    for i in 0..rank {
        let e = u64::from_le_bytes(bytes[5 + 8 * i..13 + 8 * i].try_into().expect("8 bytes"));
        n = n.checked_mul(e).ok_or_else(|| Error::Corrupt {
            what: WHAT,
            detail: "extent product overflows".into(),
        })?;
        shape.push(usize::try_from(e).map_err(|_| Error::Corrupt {
            what: WHAT,
            detail: format!("extent {e} overflows"),
        })?);
    }
    let payload = n.checked_mul(4).ok_or_else(|| Error::Corrupt {
        what: WHAT,
        detail: "payload size overflows".into(),
    })?;
    let have = (bytes.len() - header) as u64;
    if have < payload {
        return Err(truncated(format!("payload needs {payload} bytes, have {have}")));
    }
    if have > payload {
        return Err(Error::Corrupt {
            what: WHAT,
            detail: format!("{} trailing bytes", have - payload),
        });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Corrupt {
        what: WHAT,
        detail: e.to_string(),
    })
}

pub fn write_volume(path: &Path, volume: &MultiModalVolume) -> Result<()> {
    std::fs::write(path, encode_mmv(&volume.to_tensor()?))?;
    Ok(())
}

/// Reads a `[C, D, H, W]` file; four channels are taken as the canonical
/// modality order, fewer as its first `C` modalities.
pub fn read_volume(path: &Path) -> Result<MultiModalVolume> {
    let t = decode_mmv(&std::fs::read(path)?)?;
    let s = t.shape().to_vec();
    if s.len() != 4 || s[0] > MODALITY_COUNT {
        return Err(Error::Corrupt {
            what: "volume file",
            detail: format!("expected [C<=4, D, H, W], found {s:?}"),
        });
    }
    MultiModalVolume::new(Modality::ALL[..s[0]].to_vec(), [s[1], s[2], s[3]], t.into_data())
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    let t = Tensor::new(
        labels.spatial().to_vec(),
        labels.labels().iter().map(|&l| l as f64).collect(),
    )?;
    std::fs::write(path, encode_mmv(&t))?;
    Ok(())
}

pub fn read_labels(path: &Path, num_classes: usize) -> Result<LabelVolume> {
    let t = decode_mmv(&std::fs::read(path)?)?;
    let s = t.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::Corrupt {
            what: "label file",
            detail: format!("expected [D, H, W], found {s:?}"),
        });
    }
    let labels = t
        .data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..num_classes as f64).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::Corrupt {
                    what: "label file",
                    detail: format!("label value {v}"),
                })
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelVolume::new([s[0], s[1], s[2]], labels, num_classes)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: u64,
    pub volume: PathBuf,
    pub labels: PathBuf,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Writes `count` phantoms and a manifest into `dir`.
pub fn generate_dataset(config: &PhantomConfig, count: usize, dir: &Path) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(count);
    let mut manifest = String::from("# index, volume_path, label_path\n");
    for i in 0..count as u64 {
        let (vol, lab) = generate_phantom(config, i)?;
        let entry = ManifestEntry {
            index: i,
            volume: PathBuf::from(format!("volume_{i:04}.mmv")),
            labels: PathBuf::from(format!("labels_{i:04}.mmv")),
        };
        write_volume(&dir.join(&entry.volume), &vol)?;
        write_labels(&dir.join(&entry.labels), &lab)?;
        manifest.push_str(&format!(
            "{}, {}, {}\n",
            entry.index,
            entry.volume.display(),
            entry.labels.display()
        ));
        entries.push(entry);
    }
    std::fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(entries)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .map(str::trim)
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(n, l)| {
            let bad = || Error::Config(format!("manifest line {}: {l:?}", n + 1));
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let [index, volume, labels] = f[..] else {
                return Err(bad());
            };
            Ok(ManifestEntry {
                index: index.parse().map_err(|_| bad())?,
                volume: volume.into(),
                labels: labels.into(),
            })
        })
        .collect()
}

/// Loads every manifest entry of `dir`, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<(MultiModalVolume, LabelVolume)>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_NAME))?;
    parse_manifest(&text)?
        .iter()
        .map(|e| {
            Ok((
                read_volume(&dir.join(&e.volume))?,
                read_labels(&dir.join(&e.labels), NUM_CLASSES)?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seg_loss::{region_decompose, Region};

    #[test]
    fn deterministic_and_nested() {
        let cfg = PhantomConfig::with_seed(5);
        let a = generate_phantom(&cfg, 3).unwrap();
        assert_eq!(a, generate_phantom(&cfg, 3).unwrap());
        assert_ne!(a.1, generate_phantom(&cfg, 4).unwrap().1);
        let r = region_decompose(&a.1);
        for i in 0..a.1.labels().len() {
            assert!(!r.et[i] || r.tc[i]);
            assert!(!r.tc[i] || r.wt[i]);
        }
        for t in sample_tumors(&cfg, 3).unwrap() {
            assert!(t.et < t.tc && t.tc < t.wt);
        }
        assert!(r.get(Region::WholeTumor).iter().any(|&v| v));
    }

    #[test]
    fn noise_seed_leaves_labels_alone() {
        let a = PhantomConfig::with_seed(1);
        let b = PhantomConfig {
            noise_seed: 77,
            ..a.clone()
        };
        let (va, la) = generate_phantom(&a, 0).unwrap();
        let (vb, lb) = generate_phantom(&b, 0).unwrap();
        assert_eq!(la, lb);
        assert_ne!(va, vb);
    }

    #[test]
    fn enhancing_mean_in_t1c() {
        let cfg = PhantomConfig::with_seed(2);
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..4 {
            let (v, l) = generate_phantom(&cfg, i).unwrap();
            let ch = v.channel_of(Modality::T1c).unwrap();
            for (x, &lab) in ch.iter().zip(l.labels()) {
                if lab == ENHANCING {
                    sum += x;
                    n += 1;
                }
            }
        }
        assert!(n > 0);
        let c = cfg.contrast.get(Modality::T1c, ENHANCING);
        assert!((sum / n as f64 - c.mean).abs() < 3.0 * c.sigma / (n as f64).sqrt());
    }

    #[test]
    fn all_classes_present_in_aggregate() {
        let cfg = PhantomConfig::with_seed(0);
        let mut seen = [false; NUM_CLASSES];
        for i in 0..6 {
            for &l in generate_phantom(&cfg, i).unwrap().1.labels() {
                seen[l as usize] = true;
            }
        }
        assert_eq!(seen, [true; NUM_CLASSES]);
    }

    #[test]
    fn fisher_premise() {
        let t = ContrastTable::default();
        t.validate().unwrap();
        for m in [Modality::Flair, Modality::T1, Modality::T2] {
            assert!(t.fisher_ratio(Modality::T1c, ENHANCING) > t.fisher_ratio(m, ENHANCING));
        }
        let mut swapped = t.clone();
        swapped.0.swap(1, 2);
        assert!(swapped.validate().is_err());
    }

    #[test]
    fn infeasible_radii() {
        let cfg = PhantomConfig {
            tc_radius: (6.0, 8.0),
            wt_radius: (5.0, 9.0),
            ..PhantomConfig::default()
        };
        assert!(generate_phantom(&cfg, 0).is_err());
    }

    #[test]
    fn drop_partitions_channels() {
        let (v, _) = generate_phantom(&PhantomConfig::default(), 0).unwrap();
        let (all, none) = drop_modalities(&v, ModalitySet::ALL).unwrap();
        assert_eq!(all, v);
        assert!(none.is_none());
        let keep = ModalitySet::single(Modality::T2);
        let (t2, rest) = drop_modalities(&v, keep).unwrap();
        assert_eq!(t2.data(), v.channel_of(Modality::T2).unwrap());
        let rest = rest.unwrap();
        assert_eq!(rest.modality_set(), keep.complement());
        assert!(drop_modalities(&v, ModalitySet::EMPTY).is_err());
    }

    #[test]
    fn mmv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (v, l) = generate_phantom(&PhantomConfig::default(), 1).unwrap();
        let vp = dir.path().join("v.mmv");
        let lp = dir.path().join("l.mmv");
        write_volume(&vp, &v).unwrap();
        write_labels(&lp, &l).unwrap();
        assert_eq!(read_volume(&vp).unwrap(), v);
        assert_eq!(read_labels(&lp, NUM_CLASSES).unwrap(), l);
        let size = std::fs::metadata(&vp).unwrap().len();
        assert_eq!(size, 5 + 4 * 8 + 4 * (4 * 32 * 32 * 32));

        let bytes = std::fs::read(&vp).unwrap();
        let mut bad = bytes.clone();
        bad[3] = b'2';
        assert!(matches!(decode_mmv(&bad), Err(Error::BadMagic { .. })));
        for cut in [2, 7, 40, bytes.len() - 1] {
            assert!(matches!(decode_mmv(&bytes[..cut]), Err(Error::Truncated { .. })));
        }
        let mut huge = bytes[..5 + 8].to_vec();
        huge[4] = 2;
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        huge[5..13].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_mmv(&huge), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn dataset_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig {
            extent: [8, 8, 8],
            wt_radius: (3.0, 4.0),
            tc_radius: (2.0, 2.5),
            et_radius: (1.0, 1.5),
            ..PhantomConfig::with_seed(3)
        };
        let entries = generate_dataset(&cfg, 3, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(parse_manifest(&text).unwrap(), entries);
        let data = load_dataset(dir.path()).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data[2], generate_phantom(&cfg, 2).unwrap());
        assert!(parse_manifest("0, a").is_err());
    }
}
