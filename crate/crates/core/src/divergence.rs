//! Discrete statistical divergences.
//!
//! The plain `f64` functions here are the reference path used by property
//! tests; [`kl_along_classes`] and [`holder_along_classes`] are the same
//! formulas recorded on a [`Tape`] for training.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const NORMALIZED_TOL: f64 = 1e-9;

/// Nonnegative weights over a finite support of size at least two.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution {
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "support size must be at least 2, got {}",
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidArgument(format!("invalid weight {w}")));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidArgument("all weights are zero".into()));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        (self.weights.iter().sum::<f64>() - 1.0).abs() <= NORMALIZED_TOL
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.weights.iter().all(|&w| w > 0.0)
    }

    pub fn normalized(&self) -> Self {
        let s: f64 = self.weights.iter().sum();
        Self {
            weights: self.weights.iter().map(|w| w / s).collect(),
        }
    }

    /// Elementwise power, e.g. to build `p^(α/β)` for the Hölder equality case.
    pub fn powf(&self, e: f64) -> Result<Self> {
        Self::new(self.weights.iter().map(|w| w.powf(e)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HolderRegime {
    /// α > 1, so β > 1 as well.
    Standard,
    /// 0 < α < 1 (β < 0) or α < 0 (0 < β < 1).
    Reverse,
}

/// Hölder conjugate pair (α, β = α/(α-1)) plus the PHD power γ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HolderParams {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl HolderParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha == 0.0 || alpha == 1.0 {
            return Err(Error::InvalidExponent(format!(
                "alpha must be finite and not 0 or 1, got {alpha}"
            )));
        }
        Ok(Self {
            alpha,
            beta: alpha / (alpha - 1.0),
            gamma: 1.0,
        })
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidExponent(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// The same divergence with roles swapped: (β, α).
    pub fn conjugate(&self) -> Self {
        Self {
            alpha: self.beta,
            beta: self.alpha,
            gamma: self.gamma,
        }
    }

    pub fn regime(&self) -> HolderRegime {
        if self.alpha > 1.0 {
            HolderRegime::Standard
        } else {
            HolderRegime::Reverse
        }
    }
}

impl Default for HolderParams {
    fn default() -> Self {
        Self::new(1.6).expect("1.6 is a valid exponent")
    }
}

fn same_support(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::SupportMismatch(p.len(), q.len()));
    }
    Ok(())
}

/// `Σ p log(p/q)` with `0 log(0/q) = 0`. `p` must be normalized.
pub fn kl_divergence(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    same_support(p, q)?;
    if !p.is_normalized() {
        return Err(Error::InvalidArgument(
            "kl_divergence needs a normalized p".into(),
        ));
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.weights.iter().zip(&q.weights).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::DivergenceInfinite(format!(
                "q is zero at {i} where p = {pi}"
            )));
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// Hölder statistical pseudo-divergence, with the reverse form selected by
/// the exponent regime. Inputs need not be normalized.
pub fn holder_pseudo_divergence(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    params: &HolderParams,
) -> Result<f64> {
    same_support(p, q)?;
    let regime = params.regime();
    if regime == HolderRegime::Reverse && !(p.is_strictly_positive() && q.is_strictly_positive())
    {
        return Err(Error::domain(
            "holder_pseudo_divergence",
            "reverse regime needs strictly positive weights",
        ));
    }
    let cross: f64 = p.weights.iter().zip(&q.weights).map(|(a, b)| a * b).sum();
    if cross == 0.0 {
        return Err(Error::DivergenceInfinite("Σ p q = 0".into()));
    }
    let (alpha, beta) = (params.alpha, params.beta);
    let p_norm: f64 = p.weights.iter().map(|w| w.powf(alpha)).sum();
    let q_norm: f64 = q.weights.iter().map(|w| w.powf(beta)).sum();
    let gap = cross.ln() - p_norm.ln() / alpha - q_norm.ln() / beta;
    Ok(match regime {
        HolderRegime::Standard => -gap,
        HolderRegime::Reverse => gap,
    })
}

/// Proper Hölder divergence `D_{α,γ}`; zero iff `p ∝ q`.
pub fn proper_holder_divergence(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    params: &HolderParams,
) -> Result<f64> {
    same_support(p, q)?;
    if params.regime() != HolderRegime::Standard {
        return Err(Error::InvalidExponent(format!(
            "proper Hölder divergence needs α, β > 0 with α > 1, got α = {}",
            params.alpha
        )));
    }
    if p == q {
        return Ok(0.0);
    }
    let (alpha, beta, gamma) = (params.alpha, params.beta, params.gamma);
    let cross: f64 = p
        .weights
        .iter()
        .zip(&q.weights)
        .map(|(a, b)| a.powf(gamma / alpha) * b.powf(gamma / beta))
        .sum();
    if cross == 0.0 {
        return Err(Error::DivergenceInfinite(
            "disjoint supports in proper Hölder divergence".into(),
        ));
    }
    let p_norm: f64 = p.weights.iter().map(|w| w.powf(gamma)).sum();
    let q_norm: f64 = q.weights.iter().map(|w| w.powf(gamma)).sum();
    Ok(-(cross.ln() - p_norm.ln() / alpha - q_norm.ln() / beta))
}

/// `-log(Σpq / (‖p‖₂ ‖q‖₂))`.
pub fn cauchy_schwarz_divergence(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    same_support(p, q)?;
    let cross: f64 = p.weights.iter().zip(&q.weights).map(|(a, b)| a * b).sum();
    if cross == 0.0 {
        return Err(Error::DivergenceInfinite(
            "orthogonal supports in Cauchy-Schwarz divergence".into(),
        ));
    }
    let pp: f64 = p.weights.iter().map(|w| w * w).sum();
    let qq: f64 = q.weights.iter().map(|w| w * w).sum();
    Ok(-(cross / (pp.sqrt() * qq.sqrt())).ln())
}

/// `-log Σ sqrt(p q)` for normalized inputs.
pub fn bhattacharyya_distance(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    same_support(p, q)?;
    let bc: f64 = p
        .weights
        .iter()
        .zip(&q.weights)
        .map(|(a, b)| (a * b).sqrt())
        .sum();
    if bc == 0.0 {
        return Err(Error::DivergenceInfinite(
            "disjoint supports in Bhattacharyya distance".into(),
        ));
    }
    Ok(-bc.ln())
}

/// Tempered softmax of one voxel's class logits.
pub fn soft_class_probabilities(logits: &[f64], tau: f64) -> Result<DiscreteDistribution> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two class logits".into(),
        ));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
    let e: Vec<f64> = logits.iter().map(|v| (v / tau - max).exp()).collect();
    let s: f64 = e.iter().sum();
    DiscreteDistribution::new(e.into_iter().map(|v| v / s).collect())
}

/// Per-position KL along axis 0: `p` is a tape value of shape `[J, ...]`,
/// `q` a constant of the same shape. Output drops axis 0.
pub fn kl_along_classes(tape: &mut Tape, p: Var, q: &Tensor) -> Result<Var> {
    if tape.shape(p) != q.shape() {
        return Err(Error::shape("kl_along_classes", tape.shape(p), q.shape()));
    }
    let log_q = Tensor::new(
        q.shape().to_vec(),
        q.data().iter().map(|v| v.ln()).collect(),
    )?;
    let log_p = tape.log(p)?;
    let log_q = tape.constant(log_q);
    let ratio = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, ratio)?;
    tape.sum(terms, &[0])
}

/// Per-position Hölder pseudo-divergence `D_α(p : q)` along axis 0, with
/// `p` differentiable and `q` constant. Both must be strictly positive.
pub fn holder_along_classes(
    tape: &mut Tape,
    p: Var,
    q: &Tensor,
    params: &HolderParams,
) -> Result<Var> {
    if tape.shape(p) != q.shape() {
        return Err(Error::shape("holder_along_classes", tape.shape(p), q.shape()));
    }
    let (alpha, beta) = (params.alpha, params.beta);
    let classes = q.shape()[0];
    let inner = q.len() / classes;
    let mut q_term = vec![0.0; inner];
    for (i, t) in q_term.iter_mut().enumerate() {
        let s: f64 = (0..classes).map(|c| q.data()[c * inner + i].powf(beta)).sum();
        *t = s.ln() / beta;
    }
    let out_shape: Vec<usize> = if q.rank() == 1 {
        vec![1]
    } else {
        q.shape()[1..].to_vec()
    };

    let qc = tape.constant(q.clone());
    let cross = tape.mul(p, qc)?;
    let cross = tape.sum(cross, &[0])?;
    let cross = tape.log(cross)?;
    let p_pow = tape.pow(p, alpha)?;
    let p_norm = tape.sum(p_pow, &[0])?;
    let p_norm = tape.log(p_norm)?;
    let p_norm = tape.scale(p_norm, 1.0 / alpha)?;
    let gap = tape.sub(cross, p_norm)?;
    let gap = tape.add_const(gap, Tensor::new(out_shape, q_term.iter().map(|v| -v).collect())?)?;
    match params.regime() {
        HolderRegime::Standard => tape.scale(gap, -1.0),
        HolderRegime::Reverse => Ok(gap),
    }
}

/// Log-sum-exp along axis 0, shifted by the per-position maximum.
pub fn log_sum_exp_classes(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let classes = shape[0];
    let data = tape.value(x).data();
    let inner = data.len() / classes;
    let max: Vec<f64> = (0..inner)
        .map(|i| (0..classes).map(|c| data[c * inner + i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let full: Vec<f64> = (0..classes).flat_map(|_| max.iter().copied()).collect();
    let m = tape.constant(Tensor::new(shape, full)?);
    let shifted = tape.sub(x, m)?;
    let e = tape.exp(shifted)?;
    let s = tape.sum(e, &[0])?;
    let l = tape.log(s)?;
    let out = tape.shape(l).to_vec();
    tape.add_const(l, Tensor::new(out, max)?)
}

/// `x - logsumexp(x)` along axis 0.
pub fn log_softmax_classes(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let lse = log_sum_exp_classes(tape, x)?;
    let inner = tape.value(lse).len();
    let index: Arc<[usize]> = (0..shape[0]).flat_map(|_| 0..inner).collect();
    let lse = tape.gather(lse, index, &shape)?;
    tape.sub(x, lse)
}

/// [`kl_along_classes`] from log-probabilities, so vanishing class
/// probabilities never reach a logarithm.
pub fn kl_along_classes_log(tape: &mut Tape, log_p: Var, log_q: &Tensor) -> Result<Var> {
    if tape.shape(log_p) != log_q.shape() {
        return Err(Error::shape("kl_along_classes_log", tape.shape(log_p), log_q.shape()));
    }
    let p = tape.exp(log_p)?;
    let lq = tape.constant(log_q.clone());
    let ratio = tape.sub(log_p, lq)?;
    let terms = tape.mul(p, ratio)?;
    tape.sum(terms, &[0])
}

/// [`holder_along_classes`] from log-probabilities; every sum becomes a
/// log-sum-exp.
pub fn holder_along_classes_log(
    tape: &mut Tape,
    log_p: Var,
    log_q: &Tensor,
    params: &HolderParams,
) -> Result<Var> {
    if tape.shape(log_p) != log_q.shape() {
        return Err(Error::shape("holder_along_classes_log", tape.shape(log_p), log_q.shape()));
    }
    let (alpha, beta) = (params.alpha, params.beta);
    let classes = log_q.shape()[0];
    let inner = log_q.len() / classes;
    let q_term: Vec<f64> = (0..inner)
        .map(|i| {
            let v: Vec<f64> = (0..classes).map(|c| beta * log_q.data()[c * inner + i]).collect();
            let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()) / beta
        })
        .collect();

    let lq = tape.constant(log_q.clone());
    let joint = tape.add(log_p, lq)?;
    let cross = log_sum_exp_classes(tape, joint)?;
    let scaled = tape.scale(log_p, alpha)?;
    let p_norm = log_sum_exp_classes(tape, scaled)?;
    let p_norm = tape.scale(p_norm, 1.0 / alpha)?;
    let gap = tape.sub(cross, p_norm)?;
    let out = tape.shape(gap).to_vec();
    let gap = tape.add_const(gap, Tensor::new(out, q_term.iter().map(|v| -v).collect())?)?;
    match params.regime() {
        HolderRegime::Standard => tape.scale(gap, -1.0),
        HolderRegime::Reverse => Ok(gap),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(w: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::new(w.to_vec()).unwrap()
    }

    // Reference values from 40-digit evaluation of the closed forms.
    const KL_HALF_QUARTER: f64 = 0.143_841_036_225_890_46;
    const HPD2_HALF_EIGHT: f64 = 0.153_742_349_873_980_32;
    const PHD2_HALF_NINE: f64 = 0.111_571_775_657_104_88;

    #[test]
    fn kl_examples() {
        let u = d(&[0.25; 4]);
        assert_eq!(kl_divergence(&u, &u).unwrap(), 0.0);
        let v = kl_divergence(&d(&[0.5, 0.5]), &d(&[0.25, 0.75])).unwrap();
        assert!((v - KL_HALF_QUARTER).abs() < 1e-15);
        let v = kl_divergence(&d(&[1.0, 0.0]), &d(&[0.5, 0.5])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn kl_errors() {
        assert!(matches!(
            kl_divergence(&d(&[0.5, 0.5]), &d(&[1.0, 0.0])),
            Err(Error::DivergenceInfinite(_))
        ));
        assert!(matches!(
            kl_divergence(&d(&[0.5, 0.5]), &d(&[0.2, 0.3, 0.5])),
            Err(Error::SupportMismatch(2, 3))
        ));
        assert!(kl_divergence(&d(&[1.0, 1.0]), &d(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn hpd_examples() {
        let two = HolderParams::new(2.0).unwrap();
        let u = d(&[0.25; 4]);
        assert!(holder_pseudo_divergence(&u, &u, &two).unwrap().abs() < 1e-15);
        let v = holder_pseudo_divergence(&d(&[0.5, 0.5]), &d(&[0.8, 0.2]), &two).unwrap();
        assert!((v - HPD2_HALF_EIGHT).abs() < 1e-14);

        let a = HolderParams::new(1.6).unwrap();
        let p = d(&[0.1, 0.2, 0.3, 0.4]);
        let q = p.powf(a.alpha() / a.beta()).unwrap().normalized();
        assert!(holder_pseudo_divergence(&p, &q, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn hpd_exponent_and_domain_errors() {
        assert!(matches!(HolderParams::new(1.0), Err(Error::InvalidExponent(_))));
        assert!(matches!(HolderParams::new(0.0), Err(Error::InvalidExponent(_))));
        let rev = HolderParams::new(0.5).unwrap();
        assert_eq!(rev.regime(), HolderRegime::Reverse);
        assert!(matches!(
            holder_pseudo_divergence(&d(&[1.0, 0.0]), &d(&[0.5, 0.5]), &rev),
            Err(Error::Domain { .. })
        ));
        let neg = HolderParams::new(-2.0).unwrap();
        assert_eq!(neg.regime(), HolderRegime::Reverse);
        assert!(neg.beta() > 0.0 && neg.beta() < 1.0);
    }

    #[test]
    fn reverse_hpd_is_nonnegative() {
        for alpha in [0.3, 0.7, -0.5, -3.0] {
            let params = HolderParams::new(alpha).unwrap();
            let v = holder_pseudo_divergence(&d(&[0.1, 0.6, 0.3]), &d(&[0.5, 0.25, 0.25]), &params)
                .unwrap();
            assert!(v >= -1e-12, "alpha {alpha}: {v}");
        }
    }

    #[test]
    fn phd_examples() {
        let two = HolderParams::new(2.0).unwrap();
        let p = d(&[0.5, 0.5]);
        let q = d(&[0.9, 0.1]);
        let v = proper_holder_divergence(&p, &q, &two).unwrap();
        assert!((v - PHD2_HALF_NINE).abs() < 1e-14);
        assert!((v - bhattacharyya_distance(&p, &q).unwrap()).abs() < 1e-12);
        let g = HolderParams::new(3.0).unwrap().with_gamma(0.7).unwrap();
        assert_eq!(proper_holder_divergence(&q, &q, &g).unwrap(), 0.0);
        assert!(proper_holder_divergence(&p, &q, &HolderParams::new(0.5).unwrap()).is_err());
        assert!(HolderParams::new(2.0).unwrap().with_gamma(0.0).is_err());
    }

    #[test]
    fn cauchy_schwarz_examples() {
        let p = d(&[1.0, 2.0, 3.0]);
        let q = d(&[2.0, 4.0, 6.0]);
        assert!(cauchy_schwarz_divergence(&p, &q).unwrap().abs() < 1e-15);
        assert!(matches!(
            cauchy_schwarz_divergence(&d(&[1.0, 0.0]), &d(&[0.0, 1.0])),
            Err(Error::DivergenceInfinite(_))
        ));
        let v = cauchy_schwarz_divergence(&d(&[0.5, 0.5]), &d(&[0.8, 0.2])).unwrap();
        assert!((v - HPD2_HALF_EIGHT).abs() < 1e-14);
    }

    #[test]
    fn soft_probabilities() {
        let u = soft_class_probabilities(&[0.0; 4], 3.0).unwrap();
        assert_eq!(u.weights(), &[0.25; 4]);
        let p = soft_class_probabilities(&[4f64.ln(), 0.0], 1.0).unwrap();
        assert!((p.weights()[0] - 0.8).abs() < 1e-15);
        assert!((p.weights()[1] - 0.2).abs() < 1e-15);
        assert!(soft_class_probabilities(&[1.0, 2.0], 0.0).is_err());
        assert!(soft_class_probabilities(&[1.0], 1.0).is_err());

        let entropy =
            |p: &DiscreteDistribution| -p.weights().iter().map(|w| w * w.ln()).sum::<f64>();
        let logits = [2.0, -1.0, 0.5];
        let cold = soft_class_probabilities(&logits, 1.0).unwrap();
        let hot = soft_class_probabilities(&logits, 100.0).unwrap();
        assert!(entropy(&hot) > entropy(&cold));
        assert!(entropy(&hot) < 3f64.ln());
    }

    #[test]
    fn tape_forms_match_plain_forms() {
        let p = [0.1, 0.2, 0.7, 0.4, 0.4, 0.2];
        let q = [0.3, 0.3, 0.4, 0.1, 0.6, 0.3];
        // columns are positions, rows are classes: shape [3, 2]
        let p_t = Tensor::new(vec![3, 2], vec![p[0], p[3], p[1], p[4], p[2], p[5]]).unwrap();
        let q_t = Tensor::new(vec![3, 2], vec![q[0], q[3], q[1], q[4], q[2], q[5]]).unwrap();
        let params = HolderParams::new(1.6).unwrap();
        let mut tape = Tape::new();
        let pv = tape.constant(p_t);
        let h = holder_along_classes(&mut tape, pv, &q_t, &params).unwrap();
        let k = kl_along_classes(&mut tape, pv, &q_t).unwrap();
        for i in 0..2 {
            let pd = d(&p[3 * i..3 * i + 3]);
            let qd = d(&q[3 * i..3 * i + 3]);
            let hp = holder_pseudo_divergence(&pd, &qd, &params).unwrap();
            let kp = kl_divergence(&pd, &qd).unwrap();
            assert!((tape.value(h).data()[i] - hp).abs() < 1e-14);
            assert!((tape.value(k).data()[i] - kp).abs() < 1e-14);
        }
        let log_q = Tensor::new(vec![3, 2], q_t.data().iter().map(|v| v.ln()).collect()).unwrap();
        let lp = tape.log(pv).unwrap();
        let hl = holder_along_classes_log(&mut tape, lp, &log_q, &params).unwrap();
        let kl = kl_along_classes_log(&mut tape, lp, &log_q).unwrap();
        for i in 0..2 {
            assert!((tape.value(hl).data()[i] - tape.value(h).data()[i]).abs() < 1e-14);
            assert!((tape.value(kl).data()[i] - tape.value(k).data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn log_softmax_survives_huge_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 1], vec![1000.0, 0.0, -1000.0]).unwrap());
        let l = log_softmax_classes(&mut tape, x).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0, -1000.0, -2000.0]);
    }
}
