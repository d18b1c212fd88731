//! Mask and classifier losses with hand-derived gradients, plus a central
//! finite-difference checker. Everything here is f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DICE_EPS: f64 = 1e-6;
pub const PROB_CLAMP: f64 = 1e-7;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

fn check_shapes(probs: &[f64], gt: &[bool]) -> Result<()> {
    if probs.len() != gt.len() {
        return Err(Error::arg(format!(
            "probabilities have {} elements, ground truth has {}",
            probs.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// `1 - (2·Σpg + ε) / (Σp + Σg + ε)` and its gradient w.r.t. `probs`.
pub fn dice_loss(probs: &[f64], gt: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_shapes(probs, gt)?;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in probs.iter().zip(gt) {
        sp += p;
        if g {
            inter += p;
            sg += 1.0;
        }
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = sp + sg + DICE_EPS;
    let value = 1.0 - num / den;
    let grad = gt
        .iter()
        .map(|&g| {
            let dnum = if g { 2.0 } else { 0.0 };
            -(dnum * den - num) / (den * den)
        })
        .collect();
    Ok((value, grad))
}

/// Mean over pixels of `-α_t (1-p_t)^γ ln p_t`.
///
/// Probabilities are clamped to `[1e-7, 1-1e-7]` before evaluation. The
/// gradient is the formula's derivative at the clamped value, so saturated
/// but wrong pixels still push back.
pub fn focal_loss(probs: &[f64], gt: &[bool], alpha: f64, gamma: f64) -> Result<(f64, Vec<f64>)> {
    check_shapes(probs, gt)?;
    let n = probs.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&p, &g) in probs.iter().zip(gt) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let (pt, at, sign) = if g { (p, alpha, 1.0) } else { (1.0 - p, 1.0 - alpha, -1.0) };
        let q = 1.0 - pt;
        let ln_pt = pt.ln();
        value -= at * q.powf(gamma) * ln_pt;
        // d/dpt of -(1-pt)^γ ln pt, then dpt/dp = sign
        let dpow = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
        let d_pt = at * (dpow * ln_pt - q.powf(gamma) / pt);
        grad.push(sign * d_pt / n);
    }
    Ok((value / n, grad))
}

/// Mean binary cross-entropy over pixels, same clamping as [`focal_loss`].
pub fn binary_cross_entropy(probs: &[f64], gt: &[bool]) -> Result<(f64, Vec<f64>)> {
    focal_loss(probs, gt, 0.5, 0.0).map(|(v, g)| (2.0 * v, g.into_iter().map(|x| 2.0 * x).collect()))
}

/// Softmax negative log-likelihood and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::arg("cross entropy needs at least one class"));
    }
    if label >= logits.len() {
        return Err(Error::arg(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let value = sum.ln() - (logits[label] - m);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((value, grad))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub focal: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            focal: 1.0,
            dice: 1.0,
        }
    }
}

pub fn combined_loss(ce: f64, focal: f64, dice: f64, weights: LossWeights) -> f64 {
    weights.ce * ce + weights.focal * focal + weights.dice * dice
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub focal: f64,
    pub dice: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn new(ce: f64, focal: f64, dice: f64, weights: LossWeights) -> Self {
        Self {
            ce,
            focal,
            dice,
            total: combined_loss(ce, focal, dice, weights),
            weights,
        }
    }
}

/// Largest per-coordinate relative error `|a-f| / max(1, |a|, |f|)` between
/// the analytic gradient and central differences with the given step.
pub fn grad_check<F>(loss_fn: F, point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (v0, analytic) = loss_fn(point);
    if !v0.is_finite() {
        return Err(Error::NonFinite { coordinate: 0 });
    }
    if analytic.len() != point.len() {
        return Err(Error::arg(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let up = loss_fn(&x).0;
        x[i] = point[i] - step;
        let down = loss_fn(&x).0;
        x[i] = point[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { coordinate: i });
        }
        let fd = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - fd).abs() / 1.0f64.max(a.abs()).max(fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Worst relative gradient error per loss over a batch of random probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub trials: usize,
    pub dice: f64,
    pub focal: f64,
    pub cross_entropy: f64,
}

impl GradCheckSummary {
    pub fn worst(&self) -> f64 {
        self.dice.max(self.focal).max(self.cross_entropy)
    }
}

/// Runs [`grad_check`] on `trials` random probes per loss: probabilities
/// in [0.05, 0.95] with random targets for dice and focal, logits in
/// [-5, 5] over up to 54 classes for cross-entropy. Step 1e-5.
pub fn gradcheck_suite(seed: u64, trials: usize) -> Result<GradCheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = GradCheckSummary {
        trials,
        dice: 0.0,
        focal: 0.0,
        cross_entropy: 0.0,
    };
    for _ in 0..trials {
        let n = rng.random_range(1..=64);
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let gt: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        let k = rng.random_range(2..=54);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let label = rng.random_range(0..k);
        let dice = grad_check(|p: &[f64]| dice_loss(p, &gt).expect("matching lengths"), &probs, 1e-5)?;
        let focal = grad_check(
            |p: &[f64]| focal_loss(p, &gt, FOCAL_ALPHA, FOCAL_GAMMA).expect("matching lengths"),
            &probs,
            1e-5,
        )?;
        let ce = grad_check(|z: &[f64]| cross_entropy(z, label).expect("label in range"), &logits, 1e-5)?;
        s.dice = s.dice.max(dice);
        s.focal = s.focal.max(focal);
        s.cross_entropy = s.cross_entropy.max(ce);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn suite_is_reproducible_and_tight() {
        let a = gradcheck_suite(3, 20).unwrap();
        assert_eq!(a, gradcheck_suite(3, 20).unwrap());
        assert!(a.worst() < 1e-6, "{a:?}");
    }

    #[test]
    fn dice_cases() {
        let gt = [true, true, false, false];
        assert!(dice_loss(&[1.0, 1.0, 0.0, 0.0], &gt).unwrap().0 <= 1e-6);
        assert!((dice_loss(&[0.0, 0.0, 1.0, 1.0], &gt).unwrap().0 - 1.0).abs() < 1e-6);
        assert!((dice_loss(&[1.0, 0.0, 1.0, 0.0], &gt).unwrap().0 - 0.5).abs() < 1e-6);
        assert!(dice_loss(&[1.0], &gt).is_err());
    }

    #[test]
    fn focal_cases() {
        let (v, _) = focal_loss(&[0.5], &[true], 0.25, 2.0).unwrap();
        assert!((v - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((v - 0.043322).abs() < 1e-6);
        let (v, _) = focal_loss(&[1.0, 0.0], &[true, false], 0.25, 2.0).unwrap();
        assert!(v < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        let (v, _) = cross_entropy(&[0.0; 54], 3).unwrap();
        assert!((v - 54f64.ln()).abs() < 1e-12);
        assert!((v - 3.98898).abs() < 1e-5);
        let (v, _) = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
        let (v, _) = cross_entropy(&[0.0, 40.0, 0.0], 1).unwrap();
        assert!(v < 1e-6);
        assert!(cross_entropy(&[0.0, 1.0], 2).is_err());
        assert!(cross_entropy(&[], 0).is_err());
    }

    #[test]
    fn combined() {
        let w = LossWeights::default();
        assert!((combined_loss(0.1, 0.2, 0.3, w) - 0.6).abs() < 1e-12);
        let dice_only = LossWeights { ce: 0.0, focal: 0.0, dice: 1.0 };
        assert_eq!(combined_loss(5.0, 7.0, 0.3, dice_only), 0.3);
        assert_eq!(combined_loss(0.0, 0.0, 0.0, w), 0.0);
        let r = LossReport::new(0.1, 0.2, 0.3, w);
        assert!((r.total - 0.6).abs() < 1e-9);
    }

    #[test]
    fn grad_check_flags_a_sign_flip() {
        let good = |z: &[f64]| cross_entropy(z, 0).unwrap();
        let bad = |z: &[f64]| {
            let (v, g) = cross_entropy(z, 0).unwrap();
            (v, g.into_iter().map(|x| -x).collect())
        };
        assert!(grad_check(good, &[0.0, 0.0], 1e-5).unwrap() < 1e-6);
        assert!(grad_check(bad, &[0.0, 0.0], 1e-5).unwrap() >= 0.5);
    }

    #[test]
    fn grad_check_names_the_non_finite_coordinate() {
        let f = |x: &[f64]| {
            let v = if x[1] > 1.0 { f64::NAN } else { x[0] + x[1] };
            (v, vec![1.0, 1.0])
        };
        match grad_check(f, &[0.0, 1.0], 1e-5) {
            Err(Error::NonFinite { coordinate }) => assert_eq!(coordinate, 1),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn focal_reduces_to_half_bce(
            probs in prop::collection::vec(0.0f64..=1.0, 1..40),
            bits in prop::collection::vec(any::<bool>(), 40),
        ) {
            let gt = &bits[..probs.len()];
            let (f, _) = focal_loss(&probs, gt, 0.5, 0.0).unwrap();
            let ce_mean = probs.iter().zip(gt).map(|(&p, &g)| {
                let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                cross_entropy(&[(1.0 - p).ln(), p.ln()], g as usize).unwrap().0
            }).sum::<f64>() / probs.len() as f64;
            prop_assert!((f - 0.5 * ce_mean).abs() < 1e-9);
        }

        #[test]
        fn ce_shift_invariant(
            logits in prop::collection::vec(-20.0f64..20.0, 1..10),
            shift in -100.0f64..100.0,
            label in 0usize..10,
        ) {
            let label = label % logits.len();
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let a = cross_entropy(&logits, label).unwrap().0;
            let b = cross_entropy(&shifted, label).unwrap().0;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn dice_bounded(
            probs in prop::collection::vec(0.0f64..=1.0, 1..40),
            bits in prop::collection::vec(any::<bool>(), 40),
        ) {
            let v = dice_loss(&probs, &bits[..probs.len()]).unwrap().0;
            prop_assert!((0.0..=1.0 + 2.0 * DICE_EPS).contains(&v));
        }
    }
}
