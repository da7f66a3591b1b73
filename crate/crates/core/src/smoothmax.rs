//! Hard maximum and two smooth approximations, each with its gradient.
//!
//! Both smooth variants shift by the hard maximum before exponentiating, so
//! `alpha * x` in the hundreds stays finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothMaxKind {
    Hard,
    AlphaSoftmax,
    AlphaQuasimax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothMaxConfig {
    pub kind: SmoothMaxKind,
    pub alpha: f64,
}

impl Default for SmoothMaxConfig {
    fn default() -> Self {
        SmoothMaxConfig {
            kind: SmoothMaxKind::AlphaSoftmax,
            alpha: 8.0,
        }
    }
}

impl SmoothMaxConfig {
    pub fn hard() -> Self {
        SmoothMaxConfig {
            kind: SmoothMaxKind::Hard,
            alpha: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != SmoothMaxKind::Hard && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Value and gradient of the configured maximum.
    pub fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; x.len()];
        let v = self.eval_into(x, &mut grad)?;
        Ok((v, grad))
    }

    /// As [`eval`](Self::eval), writing the gradient into `grad` (same length as `x`).
    pub fn eval_into(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        check(x)?;
        debug_assert_eq!(x.len(), grad.len());
        Ok(match self.kind {
            SmoothMaxKind::Hard => hard_max_into(x, grad),
            SmoothMaxKind::AlphaSoftmax => softmax_into(x, self.alpha, grad),
            SmoothMaxKind::AlphaQuasimax => quasimax_into(x, self.alpha, grad),
        })
    }
}

fn check(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { index });
    }
    Ok(())
}

/// Index of the first maximal element.
fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn hard_max_into(x: &[f64], grad: &mut [f64]) -> f64 {
    let k = argmax(x);
    grad.iter_mut().for_each(|g| *g = 0.0);
    grad[k] = 1.0;
    x[k]
}

/// Writes normalized weights `e^{a(x_i - m)} / Σ` into `grad`; returns `(m, Σ)`.
fn softmax_weights(x: &[f64], alpha: f64, grad: &mut [f64]) -> (f64, f64) {
    let m = x[argmax(x)];
    let mut z = 0.0;
    for (g, &v) in grad.iter_mut().zip(x) {
        *g = (alpha * (v - m)).exp();
        z += *g;
    }
    grad.iter_mut().for_each(|g| *g /= z);
    (m, z)
}

fn softmax_into(x: &[f64], alpha: f64, grad: &mut [f64]) -> f64 {
    softmax_weights(x, alpha, grad);
    let s: f64 = grad.iter().zip(x).map(|(w, v)| w * v).sum();
    for (g, &v) in grad.iter_mut().zip(x) {
        *g *= 1.0 + alpha * (v - s);
    }
    s
}

fn quasimax_into(x: &[f64], alpha: f64, grad: &mut [f64]) -> f64 {
    let (m, z) = softmax_weights(x, alpha, grad);
    m + (z.ln() - (x.len() as f64).ln()) / alpha
}

/// Largest element and a one-hot gradient at its first occurrence.
pub fn hard_max(x: &[f64]) -> Result<(f64, Vec<f64>)> {
    SmoothMaxConfig::hard().eval(x)
}

/// `S_a(x) = Σ x_i e^{a x_i} / Σ e^{a x_i}`.
pub fn alpha_softmax(x: &[f64], alpha: f64) -> Result<(f64, Vec<f64>)> {
    let cfg = SmoothMaxConfig {
        kind: SmoothMaxKind::AlphaSoftmax,
        alpha,
    };
    cfg.validate()?;
    cfg.eval(x)
}

/// `Q_a(x) = log(Σ e^{a x_i}) / a - log(n) / a`.
pub fn alpha_quasimax(x: &[f64], alpha: f64) -> Result<(f64, Vec<f64>)> {
    let cfg = SmoothMaxConfig {
        kind: SmoothMaxKind::AlphaQuasimax,
        alpha,
    };
    cfg.validate()?;
    cfg.eval(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_max_examples() {
        let (v, g) = hard_max(&[0.2, 0.9, 0.5]).unwrap();
        assert_eq!(v, 0.9);
        assert_eq!(g, vec![0.0, 1.0, 0.0]);
        assert_eq!(hard_max(&[3.5]).unwrap(), (3.5, vec![1.0]));
        assert_eq!(hard_max(&[0.5, 0.5]).unwrap().1, vec![1.0, 0.0]);
        assert!(matches!(hard_max(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn constant_vectors() {
        let x = [0.3; 3];
        assert!((alpha_softmax(&x, 8.0).unwrap().0 - 0.3).abs() < 1e-15);
        assert!((alpha_quasimax(&x, 8.0).unwrap().0 - 0.3).abs() < 1e-15);
    }

    #[test]
    fn two_point_values() {
        // e^8 / (1 + e^8) and (ln(1 + e^8) - ln 2) / 8, evaluated independently
        let e8 = 8f64.exp();
        let s = alpha_softmax(&[0.0, 1.0], 8.0).unwrap().0;
        assert!((s - e8 / (1.0 + e8)).abs() < 1e-14);
        assert!((s - 0.999_664_649_869_533_5).abs() < 1e-12);
        let q = alpha_quasimax(&[0.0, 1.0], 8.0).unwrap().0;
        assert!((q - ((1.0 + e8).ln() - 2f64.ln()) / 8.0).abs() < 1e-14);
        assert!((q - 0.913_398_528_226_618_8).abs() < 1e-12);
    }

    #[test]
    fn large_alpha_is_stable() {
        let (v, g) = alpha_softmax(&[100.0, 99.0, -50.0], 16.0).unwrap();
        assert!(v.is_finite() && g.iter().all(|g| g.is_finite()));
        let (v, _) = alpha_quasimax(&[100.0, 99.0, -50.0], 16.0).unwrap();
        assert!(v <= 100.0 && v.is_finite());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            alpha_softmax(&[0.0, f64::NAN], 8.0),
            Err(Error::NonFiniteInput { index: 1 })
        ));
        assert!(alpha_quasimax(&[1.0], 0.0).is_err());
        assert!(alpha_quasimax(&[], 1.0).is_err());
    }
}
