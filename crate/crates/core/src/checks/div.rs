//! Divergence checks: a compensated direct evaluation, the specialization
//! identities and the Hölder properties, on seeded random pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CheckCase;
use crate::divergence::{
    bhattacharyya_distance, cauchy_schwarz_divergence, holder_pseudo_divergence, kl_divergence,
    proper_holder_divergence, DiscreteDistribution, HolderParams,
};
use crate::error::Result;

pub const ALPHAS: [f64; 5] = [1.1, 1.5, 1.6, 2.0, 4.0];
pub const ORACLE_TOLERANCE: f64 = 1e-9;
pub const IDENTITY_TOLERANCE: f64 = 1e-12;
pub const EQUALITY_TOLERANCE: f64 = 1e-10;

/// Random normalized pair with support drawn from 2..=16 and every weight
/// bounded away from zero.
pub fn random_pair(rng: &mut ChaCha8Rng) -> (DiscreteDistribution, DiscreteDistribution) {
    let n = rng.gen_range(2..=16);
    let mut draw = || {
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        DiscreteDistribution::new(w).expect("positive weights").normalized()
    };
    let p = draw();
    let q = draw();
    (p, q)
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn reference_kl(p: &[f64], q: &[f64]) -> f64 {
    compensated_sum(p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a.ln() - b.ln())))
}

fn reference_hpd(p: &[f64], q: &[f64], alpha: f64, beta: f64) -> f64 {
    let cross = compensated_sum(p.iter().zip(q).map(|(a, b)| a * b));
    let pa = compensated_sum(p.iter().map(|a| a.powf(alpha))).powf(1.0 / alpha);
    let qb = compensated_sum(q.iter().map(|b| b.powf(beta))).powf(1.0 / beta);
    -(cross / (pa * qb)).ln()
}

fn reference_phd(p: &[f64], q: &[f64], alpha: f64, beta: f64, gamma: f64) -> f64 {
    let cross = compensated_sum(
        p.iter()
            .zip(q)
            .map(|(a, b)| a.powf(gamma / alpha) * b.powf(gamma / beta)),
    );
    let pa = compensated_sum(p.iter().map(|a| a.powf(gamma))).powf(1.0 / alpha);
    let qb = compensated_sum(q.iter().map(|b| b.powf(gamma))).powf(1.0 / beta);
    -(cross / (pa * qb)).ln()
}

/// Library KL, HPD and PHD against the reference evaluation.
pub fn oracle_cases(pairs: usize, seed: u64) -> Result<Vec<CheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kl: f64 = 0.0;
    let mut hpd = [0.0f64; ALPHAS.len()];
    let mut phd = [0.0f64; ALPHAS.len()];
    for _ in 0..pairs {
        let (p, q) = random_pair(&mut rng);
        let (pw, qw) = (p.weights(), q.weights());
        kl = kl.max((kl_divergence(&p, &q)? - reference_kl(pw, qw)).abs());
        let gamma = rng.gen_range(0.5..2.0);
        for (i, &alpha) in ALPHAS.iter().enumerate() {
            let hp = HolderParams::new(alpha)?;
            let beta = hp.beta();
            hpd[i] = hpd[i].max((holder_pseudo_divergence(&p, &q, &hp)? - reference_hpd(pw, qw, alpha, beta)).abs());
            let pp = hp.with_gamma(gamma)?;
            phd[i] = phd[i]
                .max((proper_holder_divergence(&p, &q, &pp)? - reference_phd(pw, qw, alpha, beta, gamma)).abs());
        }
    }
    let mut out = vec![CheckCase::new("oracle/kl", kl, ORACLE_TOLERANCE)];
    for (i, alpha) in ALPHAS.iter().enumerate() {
        out.push(CheckCase::new(format!("oracle/hpd alpha={alpha}"), hpd[i], ORACLE_TOLERANCE));
        out.push(CheckCase::new(format!("oracle/phd alpha={alpha}"), phd[i], ORACLE_TOLERANCE));
    }
    Ok(out)
}

/// HPD at α = 2 against Cauchy-Schwarz and PHD at α = 2, γ = 1 against
/// Bhattacharyya.
pub fn identity_cases(pairs: usize, seed: u64) -> Result<Vec<CheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let two = HolderParams::new(2.0)?;
    let (mut cs, mut bh): (f64, f64) = (0.0, 0.0);
    for _ in 0..pairs {
        let (p, q) = random_pair(&mut rng);
        cs = cs.max((holder_pseudo_divergence(&p, &q, &two)? - cauchy_schwarz_divergence(&p, &q)?).abs());
        bh = bh.max((proper_holder_divergence(&p, &q, &two)? - bhattacharyya_distance(&p, &q)?).abs());
    }
    Ok(vec![
        CheckCase::new("identity/hpd2=cauchy-schwarz", cs, IDENTITY_TOLERANCE),
        CheckCase::new("identity/phd2=bhattacharyya", bh, IDENTITY_TOLERANCE),
    ])
}

fn rescale(d: &DiscreteDistribution, k: f64) -> Result<DiscreteDistribution> {
    DiscreteDistribution::new(d.weights().iter().map(|w| w * k).collect())
}

/// Non-negativity, projectivity, skew symmetry and the equality case.
/// The reverse regime (α = 0.5, α = -1) joins the HPD checks.
pub fn property_cases(pairs: usize, seed: u64) -> Result<Vec<CheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphas: Vec<f64> = ALPHAS.iter().copied().chain([0.5, -1.0]).collect();
    let (mut negative, mut projective, mut skew, mut equality): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..pairs {
        let (p, q) = random_pair(&mut rng);
        let a = rng.gen_range(0.1..10.0);
        let b = rng.gen_range(0.1..10.0);
        let (ps, qs) = (rescale(&p, a)?, rescale(&q, b)?);
        for &alpha in &alphas {
            let hp = HolderParams::new(alpha)?;
            let d = holder_pseudo_divergence(&p, &q, &hp)?;
            negative = negative.max(-d);
            projective = projective.max((holder_pseudo_divergence(&ps, &qs, &hp)? - d).abs());
            skew = skew.max((holder_pseudo_divergence(&q, &p, &hp.conjugate())? - d).abs());
            let partner = p.powf(hp.alpha() / hp.beta())?.normalized();
            equality = equality.max(holder_pseudo_divergence(&p, &partner, &hp)?.abs());
            if alpha > 1.0 {
                let d = proper_holder_divergence(&p, &q, &hp)?;
                negative = negative.max(-d);
                projective = projective.max((proper_holder_divergence(&ps, &qs, &hp)? - d).abs());
            }
        }
    }
    Ok(vec![
        CheckCase::new("property/non-negative", negative.max(0.0), IDENTITY_TOLERANCE),
        CheckCase::new("property/projective", projective, ORACLE_TOLERANCE),
        CheckCase::new("property/skew-symmetric", skew, ORACLE_TOLERANCE),
        CheckCase::new("property/equality-case", equality, EQUALITY_TOLERANCE),
    ])
}

pub fn all_cases(seed: u64) -> Result<Vec<CheckCase>> {
    let mut out = oracle_cases(200, seed)?;
    out.extend(identity_cases(100, seed + 1)?);
    out.extend(property_cases(200, seed + 2)?);
    Ok(out)
}
