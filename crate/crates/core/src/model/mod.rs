//! Miniature 3D windowed-attention encoder with a light upsampling decoder
//! and two output heads (reconstruction and segmentation).

mod checkpoint;
pub mod index;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::masking::{apply_mask_tokens, MaskSpec};
use crate::tensor::{Tape, Tensor, Var};
use crate::volume::LogitVolume;

pub use checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, LoadMode, Phase};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub patch_size: usize,
    pub feature_size: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: [usize; 3],
    pub num_classes: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 4,
            patch_size: 2,
            feature_size: 8,
            depths: vec![1, 1],
            heads: vec![2, 4],
            window: [4, 4, 4],
            num_classes: 4,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// The large published configuration. Expressible, not trained here.
    pub fn full_scale() -> Self {
        Self {
            input_channels: 4,
            patch_size: 2,
            feature_size: 48,
            depths: vec![2, 2, 2, 2],
            heads: vec![3, 6, 12, 24],
            window: [7, 7, 7],
            num_classes: 4,
            mlp_ratio: 4,
        }
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.feature_size << stage
    }

    /// Decoder levels: one per merge back to the token grid, then one per
    /// halving of the patch size.
    pub fn decoder_levels(&self) -> usize {
        self.stages() - 1 + self.patch_size.trailing_zeros() as usize
    }

    /// `(in, out)` widths of each decoder level's projection.
    pub fn decoder_widths(&self) -> Vec<(usize, usize)> {
        let mut w = self.stage_width(self.stages() - 1);
        (0..self.decoder_levels())
            .map(|_| {
                let out = (w / 2).max(self.feature_size);
                let pair = (w, out);
                w = out;
                pair
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_channels == 0 || self.feature_size == 0 || self.mlp_ratio == 0 {
            return bad("channel counts and mlp ratio must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !self.patch_size.is_power_of_two() {
            return bad(format!("patch size {} is not a power of two", self.patch_size));
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return bad(format!(
                "depths {:?} and heads {:?} must be non-empty and equally long",
                self.depths, self.heads
            ));
        }
        if self.depths.contains(&0) || self.window.contains(&0) {
            return bad("depths and window extents must be positive".into());
        }
        for (i, &h) in self.heads.iter().enumerate() {
            if h == 0 || self.stage_width(i) % h != 0 {
                return bad(format!(
                    "stage {i} width {} is not divisible by {h} heads",
                    self.stage_width(i)
                ));
            }
        }
        Ok(())
    }

    /// Token grid of every stage for an input of `spatial` voxels.
    pub fn geometry(&self, spatial: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        self.validate()?;
        let p = self.patch_size;
        if spatial.iter().any(|&s| s == 0 || s % p != 0) {
            return Err(Error::Geometry(format!(
                "extent {spatial:?} not divisible by patch size {p}"
            )));
        }
        let mut grid = spatial.map(|s| s / p);
        let mut out = Vec::with_capacity(self.stages());
        for stage in 0..self.stages() {
            if stage > 0 {
                if grid.iter().any(|g| g % 2 != 0) {
                    return Err(Error::Geometry(format!(
                        "token grid {grid:?} cannot be merged into stage {stage}"
                    )));
                }
                grid = grid.map(|g| g / 2);
            }
            let win = self.effective_window(grid);
            if (0..3).any(|a| grid[a] % win[a] != 0) {
                return Err(Error::Geometry(format!(
                    "stage {stage} grid {grid:?} is not a multiple of window {win:?}"
                )));
            }
            out.push(grid);
        }
        Ok(out)
    }

    /// Window clipped to the grid, so small grids form a single window.
    pub fn effective_window(&self, grid: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| self.window[a].min(grid[a]))
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("input_channels".into(), self.input_channels.to_string()),
            ("patch_size".into(), self.patch_size.to_string()),
            ("feature_size".into(), self.feature_size.to_string()),
            ("depths".into(), list(&self.depths)),
            ("heads".into(), list(&self.heads)),
            ("window".into(), list(&self.window)),
            ("num_classes".into(), self.num_classes.to_string()),
            ("mlp_ratio".into(), self.mlp_ratio.to_string()),
        ]
    }

    /// Applies one `key=value` setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
        };
        let list = |v: &str| v.split(',').map(num).collect::<Result<Vec<usize>>>();
        match key {
            "input_channels" => self.input_channels = num(value)?,
            "patch_size" => self.patch_size = num(value)?,
            "feature_size" => self.feature_size = num(value)?,
            "depths" => self.depths = list(value)?,
            "heads" => self.heads = list(value)?,
            "window" => {
                let w = list(value)?;
                self.window = match w.as_slice() {
                    [a] => [*a; 3],
                    [a, b, c] => [*a, *b, *c],
                    _ => return Err(Error::Config(format!("window: expected 1 or 3 extents, got {value:?}"))),
                }
            }
            "num_classes" => self.num_classes = num(value)?,
            "mlp_ratio" => self.mlp_ratio = num(value)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named parameter list in a fixed construction order.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Parameters placed on a tape, in the model's parameter order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Substitutes the variable standing for parameter `index`.
    pub fn replace(&mut self, index: usize, var: Var) {
        self.vars[index] = var;
    }
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let linear = |out: &mut Vec<_>, name: &str, i: usize, o: usize, bias: bool| {
        out.push((format!("{name}.weight"), vec![i, o], Init::Normal));
        if bias {
            out.push((format!("{name}.bias"), vec![o], Init::Zeros));
        }
    };
    let s = cfg.feature_size;
    let p3 = cfg.patch_size.pow(3);
    linear(&mut out, "encoder.patch_embed", cfg.input_channels * p3, s, true);
    out.push(("encoder.mask_token".into(), vec![s], Init::Normal));
    for stage in 0..cfg.stages() {
        let w = cfg.stage_width(stage);
        for block in 0..cfg.depths[stage] {
            let pre = format!("encoder.stages.{stage}.blocks.{block}");
            for norm in ["norm1", "norm2"] {
                out.push((format!("{pre}.{norm}.gamma"), vec![w], Init::Ones));
                out.push((format!("{pre}.{norm}.beta"), vec![w], Init::Zeros));
            }
            linear(&mut out, &format!("{pre}.attn.q"), w, w, true);
            // a key bias shifts every score in a row equally and cancels in softmax
            linear(&mut out, &format!("{pre}.attn.k"), w, w, false);
            linear(&mut out, &format!("{pre}.attn.v"), w, w, true);
            linear(&mut out, &format!("{pre}.attn.proj"), w, w, true);
            let hidden = w * cfg.mlp_ratio;
            linear(&mut out, &format!("{pre}.mlp.fc1"), w, hidden, true);
            linear(&mut out, &format!("{pre}.mlp.fc2"), hidden, w, true);
        }
        if stage + 1 < cfg.stages() {
            linear(&mut out, &format!("encoder.stages.{stage}.merge"), 8 * w, 2 * w, true);
        }
    }
    for (l, (i, o)) in cfg.decoder_widths().into_iter().enumerate() {
        linear(&mut out, &format!("decoder.up.{l}"), i, o, true);
    }
    linear(&mut out, "decoder.rec_head", s, cfg.input_channels, true);
    linear(&mut out, "decoder.seg_head", s, cfg.num_classes, true);
    out
}

/// Parameters of one attention block, already on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub norm1: (Var, Var),
    pub q: (Var, Var),
    pub k: Var,
    pub v: (Var, Var),
    pub proj: (Var, Var),
    pub norm2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Head {
    Reconstruct,
    Segment,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let mut params = Vec::new();
        for (name, shape, init) in param_specs(&config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal => (0..n)
                    .map(|_| loop {
                        let z: f64 = normal.sample(&mut rng);
                        if z.abs() <= 2.0 * INIT_STD {
                            break z;
                        }
                    })
                    .collect(),
            };
            params.push(Param {
                name,
                value: Tensor::new(shape, data)?,
            });
        }
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: ModelConfig, params: Vec<Param>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Self {
            config,
            params,
            index,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on the tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone().requires_grad(true))
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn var(&self, b: &Bound, name: &str) -> Var {
        b.vars[self.index[name]]
    }

    fn lin(&self, b: &Bound, name: &str) -> (Var, Var) {
        (
            self.var(b, &format!("{name}.weight")),
            self.var(b, &format!("{name}.bias")),
        )
    }

    fn block_params(&self, b: &Bound, stage: usize, block: usize) -> BlockParams {
        let pre = format!("encoder.stages.{stage}.blocks.{block}");
        let norm = |n: &str| {
            (
                self.var(b, &format!("{pre}.{n}.gamma")),
                self.var(b, &format!("{pre}.{n}.beta")),
            )
        };
        BlockParams {
            norm1: norm("norm1"),
            q: self.lin(b, &format!("{pre}.attn.q")),
            k: self.var(b, &format!("{pre}.attn.k.weight")),
            v: self.lin(b, &format!("{pre}.attn.v")),
            proj: self.lin(b, &format!("{pre}.attn.proj")),
            norm2: norm("norm2"),
            fc1: self.lin(b, &format!("{pre}.mlp.fc1")),
            fc2: self.lin(b, &format!("{pre}.mlp.fc2")),
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<[usize; 3]> {
        let s = input.shape();
        if s.len() != 4 || s[0] != self.config.input_channels {
            return Err(Error::Config(format!(
                "model expects [{}, D, H, W] input, got {s:?}",
                self.config.input_channels
            )));
        }
        Ok([s[1], s[2], s[3]])
    }

    fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        input: &Tensor,
        mask: Option<&MaskSpec>,
        head: Head,
    ) -> Result<Var> {
        let cfg = &self.config;
        let spatial = self.check_input(input)?;
        let grids = cfg.geometry(spatial)?;
        let x = tape.constant(input.clone());
        let (w, bias) = self.lin(b, "encoder.patch_embed");
        let (mut h, _) = patch_embed(tape, x, cfg.patch_size, w, bias)?;
        if let Some(spec) = mask {
            if spec.grid() != grids[0] {
                return Err(Error::shape("forward_reconstruct", &spec.grid(), &grids[0]));
            }
            let token = self.var(b, "encoder.mask_token");
            h = apply_mask_tokens(tape, h, spec, token)?;
        }
        let skip = h;

        let mut counter = 0;
        for (stage, &grid) in grids.iter().enumerate() {
            if stage > 0 {
                let (w, bias) = self.lin(b, &format!("encoder.stages.{}.merge", stage - 1));
                h = patch_merge(tape, h, grids[stage - 1], w, bias)?.0;
            }
            let window = cfg.effective_window(grid);
            for block in 0..cfg.depths[stage] {
                let p = self.block_params(b, stage, block);
                h = swin_block(tape, h, grid, window, cfg.heads[stage], counter % 2 == 1, &p)?;
                counter += 1;
            }
        }

        let mut grid = *grids.last().expect("at least one stage");
        for level in 0..cfg.decoder_levels() {
            if level == cfg.stages() - 1 {
                h = tape.add(h, skip)?;
            }
            let (w, bias) = self.lin(b, &format!("decoder.up.{level}"));
            h = upsample(tape, h, grid)?;
            grid = grid.map(|g| 2 * g);
            h = tape.linear(h, w, Some(bias))?;
            h = tape.gelu(h)?;
        }
        if cfg.decoder_levels() == cfg.stages() - 1 {
            h = tape.add(h, skip)?;
        }
        let name = match head {
            Head::Reconstruct => "decoder.rec_head",
            Head::Segment => "decoder.seg_head",
        };
        let (w, bias) = self.lin(b, name);
        let out = tape.linear(h, w, Some(bias))?;
        let channels = tape.shape(out)[1];
        let out = tape.permute(out, &[1, 0])?;
        tape.reshape(out, &[channels, spatial[0], spatial[1], spatial[2]])
    }

    /// Full-resolution `[C, D, H, W]` reconstruction; masked patches are
    /// replaced by the mask token right after embedding.
    pub fn forward_reconstruct(
        &self,
        tape: &mut Tape,
        b: &Bound,
        input: &Tensor,
        mask: Option<&MaskSpec>,
    ) -> Result<Var> {
        self.forward(tape, b, input, mask, Head::Reconstruct)
    }

    /// `[J, D, H, W]` segmentation logits.
    pub fn forward_segment(&self, tape: &mut Tape, b: &Bound, input: &Tensor) -> Result<Var> {
        self.forward(tape, b, input, None, Head::Segment)
    }

    /// Logits from a throwaway tape with frozen parameters.
    pub fn predict_logits(&self, input: &Tensor) -> Result<LogitVolume> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let out = self.forward_segment(&mut tape, &b, input)?;
        LogitVolume::new(tape.value(out).clone())
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pairs: Vec<String> = self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&pairs.join(" "))
    }
}

/// `[C, D, H, W]` → `[N, S]` tokens: non-overlapping `p³` patches flattened
/// and projected. Returns the token grid alongside.
pub fn patch_embed(tape: &mut Tape, x: Var, p: usize, w: Var, b: Var) -> Result<(Var, [usize; 3])> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || p == 0 || s[1..].iter().any(|&e| e % p != 0) {
        return Err(Error::Geometry(format!(
            "patch_embed: shape {s:?} not divisible by patch size {p}"
        )));
    }
    let spatial = [s[1], s[2], s[3]];
    let grid = spatial.map(|e| e / p);
    let n: usize = grid.iter().product();
    let idx: Arc<[usize]> = index::patch_index(s[0], spatial, p).into();
    let rows = tape.gather(x, idx, &[n, s[0] * p * p * p])?;
    Ok((tape.linear(rows, w, Some(b))?, grid))
}

fn rows_of(tape: &Tape, x: Var, grid: [usize; 3], op: &'static str) -> Result<usize> {
    let s = tape.shape(x);
    let n: usize = grid.iter().product();
    if s.len() != 2 || s[0] != n {
        return Err(Error::Geometry(format!(
            "{op}: {s:?} tokens do not match grid {grid:?}"
        )));
    }
    Ok(s[1])
}

fn permute_rows(tape: &mut Tape, x: Var, rows: &[usize], width: usize) -> Result<Var> {
    tape.gather(x, index::expand_rows(rows, width), &[rows.len(), width])
}

fn affine_norm(tape: &mut Tape, x: Var, (gamma, beta): (Var, Var)) -> Result<Var> {
    let n = tape.shape(x)[0];
    let h = tape.layer_norm(x, 1, LN_EPS)?;
    let g = tape.broadcast_rows(gamma, n)?;
    let h = tape.mul(h, g)?;
    let bb = tape.broadcast_rows(beta, n)?;
    tape.add(h, bb)
}

/// Multi-head self-attention inside each window; with `shifted` the grid is
/// rolled by half a window first and rolled back afterwards.
pub fn window_attention(
    tape: &mut Tape,
    x: Var,
    grid: [usize; 3],
    window: [usize; 3],
    heads: usize,
    shifted: bool,
    p: &BlockParams,
) -> Result<Var> {
    let width = rows_of(tape, x, grid, "window_attention")?;
    if heads == 0 || width % heads != 0 || (0..3).any(|a| window[a] == 0 || grid[a] % window[a] != 0) {
        return Err(Error::Geometry(format!(
            "window_attention: width {width}, heads {heads}, grid {grid:?}, window {window:?}"
        )));
    }
    let shift = if shifted { window.map(|w| w / 2) } else { [0; 3] };
    let order = index::window_order(grid, window, shift);
    let t: usize = window.iter().product();
    let nw = order.len() / t;
    let dh = width / heads;

    let xw = permute_rows(tape, x, &order, width)?;
    let q = tape.linear(xw, p.q.0, Some(p.q.1))?;
    let k = tape.linear(xw, p.k, None)?;
    let v = tape.linear(xw, p.v.0, Some(p.v.1))?;
    let split = |tape: &mut Tape, y: Var, perm: &[usize], last: [usize; 2]| -> Result<Var> {
        let y = tape.reshape(y, &[nw, t, heads, dh])?;
        let y = tape.permute(y, perm)?;
        tape.reshape(y, &[nw * heads, last[0], last[1]])
    };
    let q = split(tape, q, &[0, 2, 1, 3], [t, dh])?;
    let kt = split(tape, k, &[0, 2, 3, 1], [dh, t])?;
    let v = split(tape, v, &[0, 2, 1, 3], [t, dh])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = tape.softmax(scores, 2)?;
    let o = tape.matmul(attn, v)?;
    let o = tape.reshape(o, &[nw, heads, t, dh])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[nw * t, width])?;
    let o = tape.linear(o, p.proj.0, Some(p.proj.1))?;
    permute_rows(tape, o, &index::invert(&order), width)
}

/// Pre-norm block: `x + attn(LN(x))`, then `x + MLP(LN(x))`.
pub fn swin_block(
    tape: &mut Tape,
    x: Var,
    grid: [usize; 3],
    window: [usize; 3],
    heads: usize,
    shifted: bool,
    p: &BlockParams,
) -> Result<Var> {
    rows_of(tape, x, grid, "swin_block")?;
    let h = affine_norm(tape, x, p.norm1)?;
    let a = window_attention(tape, h, grid, window, heads, shifted, p)?;
    let x = tape.add(x, a)?;
    let h = affine_norm(tape, x, p.norm2)?;
    let h = tape.linear(h, p.fc1.0, Some(p.fc1.1))?;
    let h = tape.gelu(h)?;
    let h = tape.linear(h, p.fc2.0, Some(p.fc2.1))?;
    tape.add(x, h)
}

/// Concatenates each 2×2×2 token neighbourhood and projects `8S → 2S`.
pub fn patch_merge(
    tape: &mut Tape,
    x: Var,
    grid: [usize; 3],
    w: Var,
    b: Var,
) -> Result<(Var, [usize; 3])> {
    let width = rows_of(tape, x, grid, "patch_merge")?;
    if grid.iter().any(|g| g % 2 != 0) {
        return Err(Error::Geometry(format!("patch_merge: odd grid {grid:?}")));
    }
    let rows = index::merge_rows(grid);
    let coarse = grid.map(|g| g / 2);
    let n: usize = coarse.iter().product();
    let cat = tape.gather(x, index::expand_rows(&rows, width), &[n, 8 * width])?;
    Ok((tape.linear(cat, w, Some(b))?, coarse))
}

fn upsample(tape: &mut Tape, x: Var, grid: [usize; 3]) -> Result<Var> {
    let width = rows_of(tape, x, grid, "upsample")?;
    permute_rows(tape, x, &index::upsample_rows(grid), width)
}
