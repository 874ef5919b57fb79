use std::sync::Arc;

use super::{split_axis, strides, validate_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation catalog. Attributes ride along with the variant.
#[derive(Clone, Debug)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    /// `[m,k] x [k,n]` or batched `[b,m,k] x [b,k,n]`.
    Matmul,
    Scale(f64),
    Exp,
    Log,
    Pow(f64),
    Softmax { axis: usize },
    /// Normalization only; affine terms are separate ops.
    LayerNorm { axis: usize, eps: f64 },
    Gelu,
    Relu,
    Sigmoid,
    Sum { axes: Vec<usize> },
    Mean { axes: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Permute { perm: Vec<usize> },
    Concat { axis: usize },
    /// `out[i] = in[index[i]]`, output laid out as `shape`. Repeated indices
    /// are allowed, which is how row broadcasts are expressed.
    Gather { index: Arc<[usize]>, shape: Vec<usize> },
    MaskedSelect { mask: Arc<[bool]> },
    Sqrt,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Matmul => "matmul",
            OpKind::Scale(_) => "scale",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Pow(_) => "pow",
            OpKind::Softmax { .. } => "softmax",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Sum { .. } => "sum",
            OpKind::Mean { .. } => "mean",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Permute { .. } => "permute",
            OpKind::Concat { .. } => "concat",
            OpKind::Gather { .. } => "gather",
            OpKind::MaskedSelect { .. } => "masked_select",
            OpKind::Sqrt => "sqrt",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Matmul => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

struct Node {
    value: Tensor,
    kind: Option<OpKind>,
    inputs: Vec<Var>,
    requires_grad: bool,
    // layer-norm inverse standard deviations
    saved: Vec<f64>,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a topological order by construction.
///
/// `backward` adds into per-leaf accumulators; call [`Tape::zero_grad`]
/// between steps when reusing a tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it gets a
    /// gradient accumulator.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.is_requires_grad();
        self.push(tensor, None, Vec::new(), requires_grad, Vec::new())
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let t = tensor.requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if it received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape().to_vec(),
            data: g.clone(),
            requires_grad: false,
        })
    }

    /// Leaves holding an accumulated gradient, in creation order.
    pub fn leaves_with_grad(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].kind.is_none() && self.grads[i].is_some())
            .map(Var)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(
        &mut self,
        value: Tensor,
        kind: Option<OpKind>,
        inputs: Vec<Var>,
        requires_grad: bool,
        saved: Vec<f64>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            kind,
            inputs,
            requires_grad,
            saved,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "{} takes {n} inputs, got {}",
                    kind.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} needs at least one input",
                kind.name()
            )));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::InvalidArgument(format!(
                "variable {} is not on this tape",
                bad.0
            )));
        }
        let (value, saved) = self.forward(&kind, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Some(kind), inputs.to_vec(), requires_grad, saved))
    }

    fn forward(&self, kind: &OpKind, inputs: &[Var]) -> Result<(Tensor, Vec<f64>)> {
        let x = &self.nodes[inputs[0].0].value;
        let out = |shape: Vec<usize>, data: Vec<f64>| Tensor {
            shape,
            data,
            requires_grad: false,
        };
        let mut saved = Vec::new();
        let t = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let y = &self.nodes[inputs[1].0].value;
                if x.shape != y.shape {
                    return Err(Error::shape(kind.name(), &x.shape, &y.shape));
                }
                let data = x
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(a, b)| match kind {
                        OpKind::Add => a + b,
                        OpKind::Sub => a - b,
                        _ => a * b,
                    })
                    .collect();
                out(x.shape.clone(), data)
            }
            OpKind::Matmul => {
                let y = &self.nodes[inputs[1].0].value;
                let (batch, m, k, n) = matmul_dims(&x.shape, &y.shape)?;
                let mut data = vec![0.0; batch * m * n];
                for b in 0..batch {
                    matmul_into(
                        &x.data[b * m * k..(b + 1) * m * k],
                        &y.data[b * k * n..(b + 1) * k * n],
                        &mut data[b * m * n..(b + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                let shape = if x.rank() == 2 {
                    vec![m, n]
                } else {
                    vec![batch, m, n]
                };
                out(shape, data)
            }
            OpKind::Scale(c) => out(x.shape.clone(), x.data.iter().map(|v| v * c).collect()),
            OpKind::Exp => out(x.shape.clone(), x.data.iter().map(|v| v.exp()).collect()),
            OpKind::Log => {
                if let Some(v) = x.data.iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::domain("log", format!("non-positive input {v}")));
                }
                out(x.shape.clone(), x.data.iter().map(|v| v.ln()).collect())
            }
            OpKind::Pow(e) => {
                let needs_positive = e.fract() != 0.0;
                let needs_nonzero = *e < 0.0;
                if let Some(v) = x
                    .data
                    .iter()
                    .find(|v| (needs_positive && !(**v > 0.0)) || (needs_nonzero && **v == 0.0))
                {
                    return Err(Error::domain(
                        "pow",
                        format!("input {v} not allowed for exponent {e}"),
                    ));
                }
                out(x.shape.clone(), x.data.iter().map(|v| v.powf(*e)).collect())
            }
            OpKind::Sqrt => {
                if let Some(v) = x.data.iter().find(|v| !(**v >= 0.0)) {
                    return Err(Error::domain("sqrt", format!("negative input {v}")));
                }
                out(x.shape.clone(), x.data.iter().map(|v| v.sqrt()).collect())
            }
            OpKind::Softmax { axis } => {
                check_axis(kind.name(), *axis, &x.shape)?;
                let (outer, len, inner) = split_axis(&x.shape, *axis);
                let mut data = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut max = f64::NEG_INFINITY;
                        for a in 0..len {
                            max = max.max(x.data[base + a * inner]);
                        }
                        let mut sum = 0.0;
                        for a in 0..len {
                            let e = (x.data[base + a * inner] - max).exp();
                            data[base + a * inner] = e;
                            sum += e;
                        }
                        for a in 0..len {
                            data[base + a * inner] /= sum;
                        }
                    }
                }
                out(x.shape.clone(), data)
            }
            OpKind::LayerNorm { axis, eps } => {
                check_axis(kind.name(), *axis, &x.shape)?;
                let (outer, len, inner) = split_axis(&x.shape, *axis);
                let mut data = vec![0.0; x.len()];
                saved = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mean =
                            (0..len).map(|a| x.data[base + a * inner]).sum::<f64>() / len as f64;
                        let var = (0..len)
                            .map(|a| (x.data[base + a * inner] - mean).powi(2))
                            .sum::<f64>()
                            / len as f64;
                        let r = 1.0 / (var + eps).sqrt();
                        saved[o * inner + i] = r;
                        for a in 0..len {
                            data[base + a * inner] = (x.data[base + a * inner] - mean) * r;
                        }
                    }
                }
                out(x.shape.clone(), data)
            }
            OpKind::Gelu => out(
                x.shape.clone(),
                x.data
                    .iter()
                    .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
                    .collect(),
            ),
            OpKind::Relu => out(x.shape.clone(), x.data.iter().map(|v| v.max(0.0)).collect()),
            OpKind::Sigmoid => out(
                x.shape.clone(),
                x.data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
            ),
            OpKind::Sum { axes } | OpKind::Mean { axes } => {
                let (shape, map, count) = reduce_map(kind.name(), &x.shape, axes)?;
                let mut data = vec![0.0; shape.iter().product()];
                for (v, &o) in x.data.iter().zip(&map) {
                    data[o] += v;
                }
                if matches!(kind, OpKind::Mean { .. }) {
                    let inv = 1.0 / count as f64;
                    data.iter_mut().for_each(|v| *v *= inv);
                }
                out(shape, data)
            }
            OpKind::Reshape { shape } => {
                validate_shape(shape)?;
                if shape.iter().product::<usize>() != x.len() {
                    return Err(Error::shape("reshape", &x.shape, shape));
                }
                out(shape.clone(), x.data.clone())
            }
            OpKind::Permute { perm } => {
                let (shape, src) = permute_map(&x.shape, perm)?;
                out(shape, src.iter().map(|&i| x.data[i]).collect())
            }
            OpKind::Concat { axis } => {
                let first = x;
                check_axis(kind.name(), *axis, &first.shape)?;
                let mut shape = first.shape.clone();
                shape[*axis] = 0;
                for v in inputs {
                    let t = &self.nodes[v.0].value;
                    let compatible = t.rank() == first.rank()
                        && t
                            .shape
                            .iter()
                            .zip(&first.shape)
                            .enumerate()
                            .all(|(d, (a, b))| d == *axis || a == b);
                    if !compatible {
                        return Err(Error::shape("concat", &first.shape, &t.shape));
                    }
                    shape[*axis] += t.shape[*axis];
                }
                let (outer, _, inner) = split_axis(&shape, *axis);
                let mut data = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for v in inputs {
                        let t = &self.nodes[v.0].value;
                        let chunk = t.shape[*axis] * inner;
                        data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
                    }
                }
                out(shape, data)
            }
            OpKind::Gather { index, shape } => {
                validate_shape(shape)?;
                if shape.iter().product::<usize>() != index.len() {
                    return Err(Error::shape("gather", &[index.len()], shape));
                }
                if let Some(&i) = index.iter().find(|&&i| i >= x.len()) {
                    return Err(Error::InvalidArgument(format!(
                        "gather index {i} out of range for {} elements",
                        x.len()
                    )));
                }
                out(shape.clone(), index.iter().map(|&i| x.data[i]).collect())
            }
            OpKind::MaskedSelect { mask } => {
                if mask.len() != x.len() {
                    return Err(Error::shape("masked_select", &x.shape, &[mask.len()]));
                }
                let data: Vec<f64> = x
                    .data
                    .iter()
                    .zip(mask.iter())
                    .filter_map(|(v, &m)| m.then_some(*v))
                    .collect();
                if data.is_empty() {
                    return Err(Error::InvalidArgument(
                        "masked_select selected no elements".into(),
                    ));
                }
                out(vec![data.len()], data)
            }
        };
        Ok((t, saved))
    }

    /// Reverse sweep from a `[1]`-shaped loss. Leaf gradients are added to
    /// any already accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape();
        if shape != [1] {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.kind {
                None => match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                },
                Some(kind) => self.backprop(i, kind, &g, &mut work),
            }
        }
        Ok(())
    }

    fn backprop(&self, idx: usize, kind: &OpKind, g: &[f64], work: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let a = node.inputs[0];
        let x = &self.nodes[a.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let b = node.inputs[1];
                let yv = &self.nodes[b.0].value;
                if wants(a) {
                    let ga = slot(work, a, x.len());
                    match kind {
                        OpKind::Mul => {
                            for ((s, gi), bi) in ga.iter_mut().zip(g).zip(&yv.data) {
                                *s += gi * bi;
                            }
                        }
                        _ => ga.iter_mut().zip(g).for_each(|(s, gi)| *s += gi),
                    }
                }
                if wants(b) {
                    let gb = slot(work, b, yv.len());
                    match kind {
                        OpKind::Add => gb.iter_mut().zip(g).for_each(|(s, gi)| *s += gi),
                        OpKind::Sub => gb.iter_mut().zip(g).for_each(|(s, gi)| *s -= gi),
                        _ => {
                            for ((s, gi), ai) in gb.iter_mut().zip(g).zip(&x.data) {
                                *s += gi * ai;
                            }
                        }
                    }
                }
            }
            OpKind::Matmul => {
                let b = node.inputs[1];
                let w = &self.nodes[b.0].value;
                let (batch, m, k, n) =
                    matmul_dims(&x.shape, &w.shape).expect("validated in forward");
                if wants(a) {
                    let ga = slot(work, a, x.len());
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let ws = &w.data[bi * k * n..(bi + 1) * k * n];
                        let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            let grow = &gs[i * n..(i + 1) * n];
                            for p in 0..k {
                                let wrow = &ws[p * n..(p + 1) * n];
                                out[i * k + p] +=
                                    grow.iter().zip(wrow).map(|(u, v)| u * v).sum::<f64>();
                            }
                        }
                    }
                }
                if wants(b) {
                    let gb = slot(work, b, w.len());
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let xs = &x.data[bi * m * k..(bi + 1) * m * k];
                        let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                        for i in 0..m {
                            let grow = &gs[i * n..(i + 1) * n];
                            for p in 0..k {
                                let xv = xs[i * k + p];
                                let orow = &mut out[p * n..(p + 1) * n];
                                orow.iter_mut().zip(grow).for_each(|(o, gv)| *o += xv * gv);
                            }
                        }
                    }
                }
            }
            OpKind::Reshape { .. } => {
                let ga = slot(work, a, x.len());
                ga.iter_mut().zip(g).for_each(|(s, gi)| *s += gi);
            }
            OpKind::Concat { axis } => {
                let (outer, _, inner) = split_axis(&y.shape, *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for &v in &node.inputs {
                        let t = &self.nodes[v.0].value;
                        let chunk = t.shape[*axis] * inner;
                        if wants(v) {
                            let gv = slot(work, v, t.len());
                            gv[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(&g[offset..offset + chunk])
                                .for_each(|(s, gi)| *s += gi);
                        }
                        offset += chunk;
                    }
                }
            }
            OpKind::Gather { index, .. } => {
                let ga = slot(work, a, x.len());
                for (gi, &i) in g.iter().zip(index.iter()) {
                    ga[i] += gi;
                }
            }
            OpKind::Permute { perm } => {
                let (_, src) = permute_map(&x.shape, perm).expect("validated in forward");
                let ga = slot(work, a, x.len());
                for (gi, &i) in g.iter().zip(&src) {
                    ga[i] += gi;
                }
            }
            OpKind::MaskedSelect { mask } => {
                let ga = slot(work, a, x.len());
                let mut it = g.iter();
                for (s, &m) in ga.iter_mut().zip(mask.iter()) {
                    if m {
                        *s += it.next().expect("mask count matches output");
                    }
                }
            }
            OpKind::Sum { axes } | OpKind::Mean { axes } => {
                let (_, map, count) = reduce_map("sum", &x.shape, axes).expect("validated");
                let factor = if matches!(kind, OpKind::Mean { .. }) {
                    1.0 / count as f64
                } else {
                    1.0
                };
                let ga = slot(work, a, x.len());
                for (s, &o) in ga.iter_mut().zip(&map) {
                    *s += g[o] * factor;
                }
            }
            OpKind::Softmax { axis } => {
                let (outer, len, inner) = split_axis(&y.shape, *axis);
                let ga = slot(work, a, x.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|k| g[base + k * inner] * y.data[base + k * inner])
                            .sum();
                        for k in 0..len {
                            let j = base + k * inner;
                            ga[j] += y.data[j] * (g[j] - dot);
                        }
                    }
                }
            }
            OpKind::LayerNorm { axis, .. } => {
                let (outer, len, inner) = split_axis(&y.shape, *axis);
                let ga = slot(work, a, x.len());
                let n = len as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let r = node.saved[o * inner + i];
                        let mut mean_g = 0.0;
                        let mut mean_gy = 0.0;
                        for k in 0..len {
                            let j = base + k * inner;
                            mean_g += g[j];
                            mean_gy += g[j] * y.data[j];
                        }
                        mean_g /= n;
                        mean_gy /= n;
                        for k in 0..len {
                            let j = base + k * inner;
                            ga[j] += r * (g[j] - mean_g - y.data[j] * mean_gy);
                        }
                    }
                }
            }
            _ => {
                let ga = slot(work, a, x.len());
                for (j, s) in ga.iter_mut().enumerate() {
                    let xv = x.data[j];
                    let yv = y.data[j];
                    let d = match kind {
                        OpKind::Scale(c) => *c,
                        OpKind::Exp => yv,
                        OpKind::Log => 1.0 / xv,
                        OpKind::Pow(e) => e * xv.powf(e - 1.0),
                        OpKind::Sqrt => 0.5 / yv,
                        OpKind::Relu => {
                            if xv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        OpKind::Sigmoid => yv * (1.0 - yv),
                        OpKind::Gelu => {
                            let t = (GELU_C * (xv + GELU_K * xv * xv * xv)).tanh();
                            0.5 * (1.0 + t)
                                + 0.5 * xv * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * xv * xv)
                        }
                        _ => unreachable!("handled above"),
                    };
                    *s += g[j] * d;
                }
            }
        }
    }

    // Convenience wrappers over `apply`.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Matmul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn pow(&mut self, a: Var, e: f64) -> Result<Var> {
        self.apply(OpKind::Pow(e), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sqrt, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Softmax { axis }, &[a])
    }

    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        self.apply(OpKind::LayerNorm { axis, eps }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Gelu, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.apply(OpKind::Sum { axes: axes.to_vec() }, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.apply(OpKind::Sum { axes }, &[a])
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.apply(OpKind::Mean { axes: axes.to_vec() }, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.apply(OpKind::Mean { axes }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            OpKind::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.apply(
            OpKind::Permute {
                perm: perm.to_vec(),
            },
            &[a],
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, xs)
    }

    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        self.apply(
            OpKind::Gather {
                index,
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    pub fn masked_select(&mut self, a: Var, mask: Arc<[bool]>) -> Result<Var> {
        self.apply(OpKind::MaskedSelect { mask }, &[a])
    }

    /// `|x|` spelled as `relu(x) + relu(-x)`; subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let pos = self.relu(a)?;
        let neg = self.scale(a, -1.0)?;
        let neg = self.relu(neg)?;
        self.add(pos, neg)
    }

    /// Adds a constant tensor of matching shape.
    pub fn add_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let c = self.constant(c);
        self.add(a, c)
    }

    /// Repeats a `[n]` vector as the rows of an `[rows, n]` matrix.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let n = self.value(v).len();
        let index: Arc<[usize]> = (0..rows).flat_map(|_| 0..n).collect();
        self.gather(v, index, &[rows, n])
    }

    /// `x @ w + b` for `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let rows = self.shape(y)[0];
                let bb = self.broadcast_rows(b, rows)?;
                self.add(y, bb)
            }
            None => Ok(y),
        }
    }
}

fn slot<'a>(work: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    work[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn check_axis(op: &'static str, axis: usize, shape: &[usize]) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => Ok((*b1, *m, *k, *n)),
        _ => Err(Error::shape("matmul", a, b)),
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
}

/// Output shape, per-input-element output index, and reduction count.
fn reduce_map(
    op: &'static str,
    shape: &[usize],
    axes: &[usize],
) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let mut reduce = vec![false; shape.len()];
    for &a in axes {
        check_axis(op, a, shape)?;
        if reduce[a] {
            return Err(Error::InvalidArgument(format!("{op}: repeated axis {a}")));
        }
        reduce[a] = true;
    }
    let kept: Vec<usize> = (0..shape.len()).filter(|&d| !reduce[d]).collect();
    let out_shape: Vec<usize> = if kept.is_empty() {
        vec![1]
    } else {
        kept.iter().map(|&d| shape[d]).collect()
    };
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    let total: usize = shape.iter().product();
    if kept.is_empty() {
        return Ok((out_shape, vec![0; total], count));
    }
    let out_strides = strides(&out_shape);
    // stride contributed by each input axis to the output index
    let mut contrib = vec![0; shape.len()];
    for (k, &d) in kept.iter().enumerate() {
        contrib[d] = out_strides[k];
    }
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut o = 0usize;
    for _ in 0..total {
        map.push(o);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            o += contrib[d];
            if idx[d] < shape[d] {
                break;
            }
            o -= contrib[d] * shape[d];
            idx[d] = 0;
        }
    }
    Ok((out_shape, map, count))
}

/// Output shape and, for every output element, its source index.
fn permute_map(shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len()
        || perm
            .iter()
            .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::InvalidArgument(format!(
            "permute: {perm:?} is not a permutation of rank {}",
            shape.len()
        )));
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut src = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut s = 0usize;
    for _ in 0..total {
        src.push(s);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            s += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            s -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok((out_shape, src))
}
