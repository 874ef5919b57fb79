//! Sliding-window inference and the 15-scenario Dice evaluation.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::seg_loss::{dice_score, region_decompose, Region};
use crate::tensor::Tensor;
use crate::train::{student_input, Sample};
use crate::volume::{LogitVolume, Modality, ModalitySet};

/// Anything that maps a `[C, d, h, w]` window to `[J, d, h, w]` logits.
/// `case` is the validation index; learned models ignore it.
pub trait Predictor {
    fn predict(&self, case: usize, input: &Tensor) -> Result<Tensor>;
}

impl Predictor for Model {
    fn predict(&self, _case: usize, input: &Tensor) -> Result<Tensor> {
        Ok(self.predict_logits(input)?.into_tensor())
    }
}

/// Window start offsets along one axis: multiples of the stride, with the
/// last window pulled back to end at the border.
pub fn axis_starts(extent: usize, window: usize, overlap: f64) -> Result<Vec<usize>> {
    if window == 0 || window > extent {
        return Err(Error::Geometry(format!("window {window} does not fit extent {extent}")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Geometry(format!("overlap {overlap} outside [0, 1)")));
    }
    let stride = ((window as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|s| s + window <= extent)
        .collect();
    if starts.last().map_or(true, |s| s + window < extent) {
        starts.push(extent - window);
    }
    Ok(starts)
}

pub fn window_origins(extent: [usize; 3], window: [usize; 3], overlap: f64) -> Result<Vec<[usize; 3]>> {
    let z = axis_starts(extent[0], window[0], overlap)?;
    let y = axis_starts(extent[1], window[1], overlap)?;
    let x = axis_starts(extent[2], window[2], overlap)?;
    let mut out = Vec::with_capacity(z.len() * y.len() * x.len());
    for &a in &z {
        for &b in &y {
            for &c in &x {
                out.push([a, b, c]);
            }
        }
    }
    Ok(out)
}

fn crop(t: &Tensor, origin: [usize; 3], window: [usize; 3]) -> Result<Tensor> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[2], s[3]);
    let d = s[1];
    let mut out = Vec::with_capacity(c * window.iter().product::<usize>());
    for ch in 0..c {
        for z in origin[0]..origin[0] + window[0] {
            for y in origin[1]..origin[1] + window[1] {
                let row = ((ch * d + z) * h + y) * w;
                out.extend_from_slice(&t.data()[row + origin[2]..row + origin[2] + window[2]]);
            }
        }
    }
    Tensor::new(vec![c, window[0], window[1], window[2]], out)
}

/// Runs `predictor` over overlapping windows and averages the logits of
/// every voxel uniformly over the windows covering it.
pub fn sliding_window_infer(
    predictor: &dyn Predictor,
    case: usize,
    input: &Tensor,
    window: [usize; 3],
    overlap: f64,
) -> Result<LogitVolume> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Geometry(format!("expected [C, D, H, W] input, got {s:?}")));
    }
    let extent = [s[1], s[2], s[3]];
    let origins = window_origins(extent, window, overlap)?;
    let vox: usize = extent.iter().product();
    let mut sum: Vec<f64> = Vec::new();
    let mut count = vec![0u32; vox];
    let mut classes = 0;
    for o in &origins {
        let logits = predictor.predict(case, &crop(input, *o, window)?)?;
        let ls = logits.shape();
        if ls.len() != 4 || ls[1..] != window {
            return Err(Error::shape("sliding_window_infer", ls, &window));
        }
        if sum.is_empty() {
            classes = ls[0];
            sum = vec![0.0; classes * vox];
        } else if ls[0] != classes {
            return Err(Error::shape("sliding_window_infer", ls, &[classes]));
        }
        let wv: usize = window.iter().product();
        for z in 0..window[0] {
            for y in 0..window[1] {
                for x in 0..window[2] {
                    let local = (z * window[1] + y) * window[2] + x;
                    let global = ((o[0] + z) * extent[1] + o[1] + y) * extent[2] + o[2] + x;
                    count[global] += 1;
                    for c in 0..classes {
                        sum[c * vox + global] += logits.data()[c * wv + local];
                    }
                }
            }
        }
    }
    for c in 0..classes {
        for (v, &n) in sum[c * vox..(c + 1) * vox].iter_mut().zip(&count) {
            *v /= n as f64;
        }
    }
    LogitVolume::new(Tensor::new(vec![classes, extent[0], extent[1], extent[2]], sum)?)
}

/// The 15 non-empty modality subsets: four singletons, six pairs, four
/// triples, then the full set.
pub fn enumerate_scenarios() -> Vec<ModalitySet> {
    use Modality::*;
    let rows: [&[Modality]; 15] = [
        &[T2],
        &[T1c],
        &[T1],
        &[Flair],
        &[T1c, T2],
        &[T1, T1c],
        &[Flair, T1],
        &[T1, T2],
        &[Flair, T2],
        &[Flair, T1c],
        &[Flair, T1, T1c],
        &[Flair, T1, T2],
        &[Flair, T1c, T2],
        &[T1, T1c, T2],
        &[Flair, T1, T1c, T2],
    ];
    rows.iter().map(|r| ModalitySet::from_modalities(r)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioRow {
    pub scenario: ModalitySet,
    /// Mean Dice for WT, TC, ET.
    pub dice: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub rows: Vec<ScenarioRow>,
}

impl EvaluationReport {
    /// Per-region mean over the scenario rows.
    pub fn average(&self) -> [f64; 3] {
        let n = self.rows.len() as f64;
        [0, 1, 2].map(|r| self.rows.iter().map(|row| row.dice[r]).sum::<f64>() / n)
    }

    /// Mean over the three regions of [`EvaluationReport::average`].
    pub fn mean_dice(&self) -> f64 {
        self.average().iter().sum::<f64>() / 3.0
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scenario,FLAIR,T1,T1c,T2,WT,TC,ET,mean\n");
        let fmt = |d: [f64; 3]| {
            let mean = d.iter().sum::<f64>() / 3.0;
            format!("{:.6},{:.6},{:.6},{:.6}", d[0], d[1], d[2], mean)
        };
        for row in &self.rows {
            let flags: Vec<&str> = Modality::ALL
                .iter()
                .map(|&m| if row.scenario.contains(m) { "1" } else { "0" })
                .collect();
            s.push_str(&format!("{},{},{}\n", row.scenario, flags.join(","), fmt(row.dice)));
        }
        s.push_str(&format!("Average,,,,,{}\n", fmt(self.average())));
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferSettings {
    pub window: [usize; 3],
    pub overlap: f64,
}

impl Default for InferSettings {
    fn default() -> Self {
        Self {
            window: [32; 3],
            overlap: 0.5,
        }
    }
}

/// Per-region Dice of one predicted label map against the truth.
pub fn region_dice(pred: &crate::volume::LabelVolume, truth: &crate::volume::LabelVolume) -> Result<[f64; 3]> {
    let p = region_decompose(pred);
    let t = region_decompose(truth);
    let mut out = [0.0; 3];
    for (i, r) in Region::ALL.iter().enumerate() {
        out[i] = dice_score(p.get(*r), t.get(*r))?;
    }
    Ok(out)
}

/// Mean per-region Dice for each scenario over the validation cases.
pub fn evaluate(
    predictor: &dyn Predictor,
    cases: &[Sample],
    scenarios: &[ModalitySet],
    settings: InferSettings,
) -> Result<EvaluationReport> {
    if cases.is_empty() {
        return Err(Error::Config("no validation cases".into()));
    }
    let mut rows = Vec::with_capacity(scenarios.len());
    for &scenario in scenarios {
        scenario.validate_scenario()?;
        let mut total = [0.0; 3];
        for (case, (vol, truth)) in cases.iter().enumerate() {
            let input = student_input(vol, scenario)?;
            let window = [0, 1, 2].map(|a| settings.window[a].min(vol.spatial()[a]));
            let logits = sliding_window_infer(predictor, case, &input, window, settings.overlap)?;
            let d = region_dice(&logits.argmax()?, truth)?;
            for r in 0..3 {
                total[r] += d[r];
            }
        }
        rows.push(ScenarioRow {
            scenario,
            dice: total.map(|t| t / cases.len() as f64),
        });
    }
    Ok(EvaluationReport { rows })
}

/// Stub that emits large logits for the true class of each case.
pub struct OraclePredictor<'a> {
    pub cases: &'a [Sample],
}

impl Predictor for OraclePredictor<'_> {
    fn predict(&self, case: usize, input: &Tensor) -> Result<Tensor> {
        let (_, truth) = self
            .cases
            .get(case)
            .ok_or_else(|| Error::InvalidArgument(format!("no case {case}")))?;
        if input.shape()[1..] != truth.spatial() {
            return Err(Error::Geometry("oracle needs whole-volume windows".into()));
        }
        let s = truth.spatial();
        let data = truth.one_hot()?.into_data().into_iter().map(|v| 10.0 * v).collect();
        Tensor::new(vec![truth.num_classes(), s[0], s[1], s[2]], data)
    }
}

/// Stub returning the same logit vector everywhere.
pub struct ConstantPredictor(pub Vec<f64>);

impl Predictor for ConstantPredictor {
    fn predict(&self, _case: usize, input: &Tensor) -> Result<Tensor> {
        let s = input.shape();
        let n: usize = s[1..].iter().product();
        let data = self.0.iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect();
        Tensor::new(vec![self.0.len(), s[1], s[2], s[3]], data)
    }
}
