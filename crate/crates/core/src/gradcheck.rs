//! Central finite-difference checks of every analytic gradient.
//!
//! A component passes when `|a - n| / max(|a|, |n|, floor) <= tol`, where `a`
//! is analytic and `n` numeric. The floor is the larger of a fixed value and
//! the resolution of the central difference itself: a function evaluated to
//! relative precision `ε` has difference-quotient noise of about `ε |f| / h`,
//! so components below that scale cannot be resolved at any tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, ClassId, Dims, LabeledBox, LogitMap, Planes, TightBoxLabel};
use crate::regression::{smooth_l1, NormalizerConfig, RegressionField, RegressionProblem, SelectionConfig};
use crate::segloss::{pairwise_loss, unary_loss, NeighborSystem, SegLossConfig, SegProblem};
use crate::smoothmax::{SmoothMaxConfig, SmoothMaxKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum relative error.
    pub tol: f64,
    /// Fixed denominator floor of the relative error.
    pub floor: f64,
    /// Multiple of the rounding noise `ε |f| / step` used as a second floor.
    pub rounding_margin: f64,
    /// Random instances per suite.
    pub instances: usize,
    /// Largest map side for the loss suites.
    pub max_side: usize,
    /// Longest vector for the smooth-max suites.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            rounding_margin: 1e4,
            instances: 100,
            max_side: 16,
            max_len: 256,
            seed: 11,
        }
    }
}

impl GradCheckConfig {
    /// Relative-error floor for a function whose value at the probe is `value`.
    pub fn floor_for(&self, value: f64) -> f64 {
        self.floor
            .max(self.rounding_margin * f64::EPSILON * value.abs() / self.step)
    }
}

/// Numeric gradient of `f` at `x` by central differences.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest componentwise relative error.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub worst_instance: usize,
    pub tol: f64,
    pub passed: bool,
}

impl SuiteReport {
    fn from_errors(name: &str, errors: &[f64], tol: f64) -> Self {
        let (worst_instance, max_rel_error) = errors
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
        SuiteReport {
            name: name.to_string(),
            instances: errors.len(),
            max_rel_error,
            worst_instance,
            tol,
            passed: errors.iter().all(|e| *e <= tol),
        }
    }
}

pub const SUITES: [&str; 7] = [
    "alpha-softmax",
    "alpha-quasimax",
    "unary-loss",
    "pairwise-loss",
    "seg-loss",
    "smooth-l1",
    "regression-loss",
];

/// Run one suite by name.
pub fn run_suite(name: &str, cfg: &GradCheckConfig) -> Option<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SUITES.iter().position(|s| *s == name)? as u64);
    let errors: Vec<f64> = (0..cfg.instances)
        .map(|i| match name {
            "alpha-softmax" => smoothmax_instance(&mut rng, cfg, SmoothMaxKind::AlphaSoftmax),
            "alpha-quasimax" => smoothmax_instance(&mut rng, cfg, SmoothMaxKind::AlphaQuasimax),
            "unary-loss" => unary_instance(&mut rng, cfg, smooth_kind(i)),
            "pairwise-loss" => pairwise_instance(&mut rng, cfg),
            "seg-loss" => seg_instance(&mut rng, cfg, smooth_kind(i)),
            "smooth-l1" => smooth_l1_instance(&mut rng, cfg),
            "regression-loss" => regression_instance(&mut rng, cfg),
            _ => unreachable!(),
        })
        .collect();
    Some(SuiteReport::from_errors(name, &errors, cfg.tol))
}

pub fn run_all(cfg: &GradCheckConfig) -> Vec<SuiteReport> {
    SUITES
        .iter()
        .map(|s| run_suite(s, cfg).expect("known suite"))
        .collect()
}

fn smooth_kind(i: usize) -> SmoothMaxKind {
    if i.is_multiple_of(2) {
        SmoothMaxKind::AlphaSoftmax
    } else {
        SmoothMaxKind::AlphaQuasimax
    }
}

fn smoothmax_instance(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, kind: SmoothMaxKind) -> f64 {
    let n = rng.random_range(1..=cfg.max_len);
    let alpha = [1.0, 4.0, 8.0, 16.0][rng.random_range(0..4)];
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let sm = SmoothMaxConfig { kind, alpha };
    let (value, grad) = sm.eval(&x).expect("finite input");
    let numeric = central_difference(|v| sm.eval(v).expect("finite input").0, &x, cfg.step);
    max_relative_error(&grad, &numeric, cfg.floor_for(value))
}

/// Random label with 0-2 boxes per class inside a `dims` image.
pub fn random_label(rng: &mut impl Rng, classes: usize, dims: Dims) -> TightBoxLabel {
    let mut entries = Vec::new();
    for c in 1..=classes as u32 {
        for _ in 0..rng.random_range(0..=2) {
            entries.push(LabeledBox {
                class: ClassId(c),
                bbox: random_box(rng, dims),
            });
        }
    }
    if entries.is_empty() {
        entries.push(LabeledBox {
            class: ClassId(1),
            bbox: random_box(rng, dims),
        });
    }
    TightBoxLabel::new(classes, entries).expect("boxes are valid")
}

fn random_box(rng: &mut impl Rng, dims: Dims) -> BBox {
    let (w, h) = (dims.width as f64, dims.height as f64);
    let bw = rng.random_range(2.0..=w.max(2.0));
    let bh = rng.random_range(2.0..=h.max(2.0));
    let xl = rng.random_range(0.0..=(w - bw).max(0.0));
    let yt = rng.random_range(0.0..=(h - bh).max(0.0));
    // integer corners half of the time
    if rng.random_bool(0.5) {
        let (xl, yt) = (xl.floor(), yt.floor());
        BBox::new(xl, yt, (xl + bw.round()).min(w), (yt + bh.round()).min(h)).expect("valid box")
    } else {
        BBox::new(xl, yt, xl + bw, yt + bh).expect("valid box")
    }
}

fn random_logits(rng: &mut impl Rng, classes: usize, dims: Dims) -> LogitMap {
    let data = (0..classes * dims.area())
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    LogitMap(Planes::from_vec(classes, dims, data).expect("sized"))
}

fn random_dims(rng: &mut impl Rng, cfg: &GradCheckConfig) -> Dims {
    let lo = 4.min(cfg.max_side);
    Dims::new(rng.random_range(lo..=cfg.max_side), rng.random_range(lo..=cfg.max_side))
}

fn logit_check(z: &LogitMap, mut loss: impl FnMut(&LogitMap) -> (f64, Planes), cfg: &GradCheckConfig) -> f64 {
    let (value, grad) = loss(z);
    let (classes, dims) = (z.0.classes(), z.0.dims());
    let numeric = central_difference(
        |v| {
            let zz = LogitMap(Planes::from_vec(classes, dims, v.to_vec()).expect("sized"));
            loss(&zz).0
        },
        z.0.as_slice(),
        cfg.step,
    );
    max_relative_error(grad.as_slice(), &numeric, cfg.floor_for(value))
}

fn seg_cfg(kind: SmoothMaxKind) -> SegLossConfig {
    SegLossConfig {
        smoothmax: SmoothMaxConfig { kind, alpha: 8.0 },
        ..Default::default()
    }
}

fn unary_instance(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, kind: SmoothMaxKind) -> f64 {
    let dims = random_dims(rng, cfg);
    let label = random_label(rng, 2, dims);
    let z = random_logits(rng, 2, dims);
    let sc = seg_cfg(kind);
    let problem = SegProblem::new(&label, dims, &sc).expect("valid config");
    let class = ClassId(rng.random_range(1..=2));
    logit_check(
        &z,
        |z| {
            let out = unary_loss(
                &z.probabilities(),
                problem.positive_bags(class),
                problem.negative_mask(class),
                &sc,
            )
            .expect("consistent shapes");
            (out.value, out.grad)
        },
        cfg,
    )
}

fn pairwise_instance(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> f64 {
    let dims = random_dims(rng, cfg);
    let z = random_logits(rng, 2, dims);
    let class = ClassId(rng.random_range(1..=2));
    let system = if rng.random_bool(0.5) {
        NeighborSystem::Four
    } else {
        NeighborSystem::Eight
    };
    logit_check(
        &z,
        |z| {
            let out = pairwise_loss(&z.probabilities(), class, system).expect("valid class");
            (out.value, out.grad)
        },
        cfg,
    )
}

fn seg_instance(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig, kind: SmoothMaxKind) -> f64 {
    let dims = random_dims(rng, cfg);
    let label = random_label(rng, 2, dims);
    let z = random_logits(rng, 2, dims);
    let problem = SegProblem::new(&label, dims, &seg_cfg(kind)).expect("valid config");
    logit_check(
        &z,
        |z| {
            let out = problem.evaluate(&z.probabilities()).expect("consistent shapes");
            (out.value, out.grad)
        },
        cfg,
    )
}

/// Keeps `|x|` at least `margin` away from the smooth-L1 knee `1/sigma^2`,
/// where the second derivative jumps and central differences lose accuracy.
fn away_from_knee(rng: &mut impl Rng, sigma: f64, margin: f64, range: f64) -> f64 {
    let knee = 1.0 / (sigma * sigma);
    loop {
        let x = rng.random_range(-range..range);
        if (x.abs() - knee).abs() > margin {
            return x;
        }
    }
}

fn smooth_l1_instance(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> f64 {
    let sigma = [3.0, 6.0, 8.0][rng.random_range(0..3)];
    let x = if rng.random_bool(0.5) {
        away_from_knee(rng, sigma, 100.0 * cfg.step, 2.0 / (sigma * sigma))
    } else {
        away_from_knee(rng, sigma, 100.0 * cfg.step, 3.0)
    };
    let (value, d) = smooth_l1(x, sigma);
    let numeric = central_difference(|v| smooth_l1(v[0], sigma).0, &[x], cfg.step);
    max_relative_error(&[d], &numeric, cfg.floor_for(value))
}

fn regression_instance(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> f64 {
    let side = cfg.max_side.min(12);
    let dims = Dims::new(rng.random_range(4.min(side)..=side), rng.random_range(4.min(side)..=side));
    let label = random_label(rng, 2, dims);
    let sigma = [3.0, 6.0, 8.0][rng.random_range(0..3)];
    let threshold = [0.0, 0.3, 0.5, 0.6][rng.random_range(0..4)];
    let norms = NormalizerConfig {
        sizes: vec![rng.random_range(2.0..10.0), rng.random_range(2.0..10.0)],
    };
    let problem = RegressionProblem::new(&label, dims, &norms, &SelectionConfig { threshold }, sigma)
        .expect("valid config");
    let mut v = RegressionField::zeros(2, dims);
    problem.write_targets(&mut v);
    // residuals on both sides of the knee, never near it
    let knee_scale = 2.0 / (sigma * sigma);
    for x in v.as_mut_slice() {
        let range = if rng.random_bool(0.5) { knee_scale } else { 1.5 };
        *x -= away_from_knee(rng, sigma, 100.0 * cfg.step, range);
    }
    let (value, grad) = problem.evaluate(&v).expect("consistent shapes");
    let numeric = central_difference(
        |vals| {
            let f = RegressionField::from_vec(2, dims, vals.to_vec()).expect("sized");
            problem.evaluate(&f).expect("consistent shapes").0
        },
        v.as_slice(),
        cfg.step,
    );
    max_relative_error(grad.as_slice(), &numeric, cfg.floor_for(value))
}

#[cfg(test)]
mod tests {
    #[test]
    fn floor_tracks_rounding_noise() {
        let cfg = GradCheckConfig::default();
        assert_eq!(cfg.floor_for(1.0), 1e-6);
        let big = cfg.floor_for(100.0);
        assert!((big - 1e4 * f64::EPSILON * 100.0 / 1e-5).abs() < 1e-18);
        assert!(big > 1e-6);
    }

    use super::*;

    #[test]
    fn harness_on_known_function() {
        let f = |x: &[f64]| x[0] * x[0] * x[1] + x[1].sin();
        let x = [1.3f64, 0.4];
        let analytic = [2.0 * x[0] * x[1], x[0] * x[0] + x[1].cos()];
        let numeric = central_difference(f, &x, 1e-5);
        assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-8);
        // a wrong gradient is caught
        assert!(max_relative_error(&[analytic[0] * 1.01, analytic[1]], &numeric, 1e-6) > 1e-3);
    }

    #[test]
    fn smooth_max_gradients_on_a_thousand_vectors() {
        let cfg = GradCheckConfig { instances: 1000, ..Default::default() };
        for name in ["alpha-softmax", "alpha-quasimax"] {
            let r = run_suite(name, &cfg).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn quick_suites_pass() {
        let cfg = GradCheckConfig {
            instances: 6,
            max_side: 8,
            max_len: 32,
            ..Default::default()
        };
        for r in run_all(&cfg) {
            assert!(r.passed, "{r:?}");
        }
    }
}
