//! Weakly supervised segmentation loss from tight boxes.
//!
//! Per class `c` the loss is a focal loss on bag predictions (positive
//! crossing-line bags and singleton negative pixels) plus `lambda` times a
//! squared-difference smoothness term over neighboring pixels. The total sums
//! over classes. All gradients are taken with respect to the logits, using
//! `dp/dz = p (1 - p)`.

use serde::{Deserialize, Serialize};

use crate::bags::{negative_mask, positive_bags, Bag, BagConfig, NegativeMask};
use crate::error::{Error, Result};
use crate::geometry::{ClassId, Dims, Planes, ProbabilityMap, TightBoxLabel};
use crate::smoothmax::SmoothMaxConfig;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            beta: 0.25,
            gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborSystem {
    /// Horizontal and vertical neighbors.
    #[default]
    Four,
    /// Adds the two diagonals.
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegLossConfig {
    pub lambda: f64,
    pub smoothmax: SmoothMaxConfig,
    pub focal: FocalConfig,
    pub neighbors: NeighborSystem,
    pub bags: BagConfig,
}

impl Default for SegLossConfig {
    fn default() -> Self {
        SegLossConfig {
            lambda: 10.0,
            smoothmax: SmoothMaxConfig::default(),
            focal: FocalConfig::default(),
            neighbors: NeighborSystem::Four,
            bags: BagConfig::default(),
        }
    }
}

impl SegLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.focal.beta) {
            return Err(Error::Config(format!("beta must be in [0, 1], got {}", self.focal.beta)));
        }
        if !(self.focal.gamma >= 0.0 && self.focal.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.focal.gamma)));
        }
        self.smoothmax.validate()?;
        self.bags.validate()
    }
}

/// A loss value with its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Planes,
}

/// Clamp into the log-safe range; the flag is false when clamping was active.
#[inline]
fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, false)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, false)
    } else {
        (p, true)
    }
}

/// `u^g` with `0^0 = 1`.
#[inline]
fn pow(u: f64, g: f64) -> f64 {
    if g == 0.0 {
        1.0
    } else if g == 2.0 {
        u * u
    } else {
        u.powf(g)
    }
}

impl FocalConfig {
    /// `beta (1-P)^g log P` and its derivative in `P`.
    #[inline]
    fn positive_term(&self, p: f64) -> (f64, f64) {
        let (b, g) = (self.beta, self.gamma);
        let q = 1.0 - p;
        let lp = p.ln();
        let v = b * pow(q, g) * lp;
        let d = if g == 0.0 {
            b / p
        } else {
            b * (-g * pow(q, g - 1.0) * lp + pow(q, g) / p)
        };
        (v, d)
    }

    /// `(1-beta) p^g log(1-p)` and its derivative in `p`.
    #[inline]
    fn negative_term(&self, p: f64) -> (f64, f64) {
        let (b, g) = (1.0 - self.beta, self.gamma);
        let q = 1.0 - p;
        let lq = q.ln();
        let v = b * pow(p, g) * lq;
        let d = if g == 0.0 {
            -b / q
        } else {
            b * (g * pow(p, g - 1.0) * lq - pow(p, g) / q)
        };
        (v, d)
    }
}

fn check_bag(p: &ProbabilityMap, bag: &Bag) -> Result<()> {
    let dims = p.dims();
    if bag.class.0 == 0 || bag.class.channel() >= p.classes() {
        return Err(Error::ShapeMismatch(format!(
            "bag class {} outside a {}-class map",
            bag.class.0,
            p.classes()
        )));
    }
    if let Some(&(x, y)) = bag.pixels.iter().find(|&&(x, y)| x >= dims.width || y >= dims.height) {
        return Err(Error::ShapeMismatch(format!(
            "bag pixel ({x}, {y}) outside {}x{} map",
            dims.height, dims.width
        )));
    }
    Ok(())
}

/// Smooth (or hard) maximum of the bag's pixel probabilities for its class.
///
/// The raw value is returned; quasimax may dip slightly below 0 on near-zero
/// bags and is clamped only inside the loss.
pub fn bag_prediction(p: &ProbabilityMap, bag: &Bag, sm: &SmoothMaxConfig) -> Result<f64> {
    if bag.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_bag(p, bag)?;
    let ch = p.channel(bag.class);
    let dims = p.dims();
    let xs: Vec<f64> = bag.pixels.iter().map(|&(x, y)| ch[dims.index(x, y)]).collect();
    sm.eval(&xs).map(|(v, _)| v)
}

/// Reusable buffers for bag evaluation.
#[derive(Default)]
struct BagScratch {
    values: Vec<f64>,
    weights: Vec<f64>,
}

/// Unary focal term for one class channel; adds `dL/dp` into `grad_p`.
#[allow(clippy::too_many_arguments)]
fn unary_accumulate(
    probs: &[f64],
    dims: Dims,
    pos: &[Bag],
    neg: &NegativeMask,
    sm: &SmoothMaxConfig,
    focal: &FocalConfig,
    grad_p: &mut [f64],
    scratch: &mut BagScratch,
) -> Result<f64> {
    let scale = 1.0 / (pos.len().max(1) as f64);
    let mut total = 0.0;

    for bag in pos {
        scratch.values.clear();
        scratch
            .values
            .extend(bag.pixels.iter().map(|&(x, y)| probs[dims.index(x, y)]));
        scratch.weights.resize(bag.len(), 0.0);
        let raw = sm.eval_into(&scratch.values, &mut scratch.weights)?;
        let (pc, live) = clamp_prob(raw);
        let (v, d) = focal.positive_term(pc);
        total += v;
        if live {
            let coef = -scale * d;
            for (&(x, y), &w) in bag.pixels.iter().zip(&scratch.weights) {
                grad_p[dims.index(x, y)] += coef * w;
            }
        }
    }

    for (i, &on) in neg.mask.as_slice().iter().enumerate() {
        if on == 0 {
            continue;
        }
        let (pc, live) = clamp_prob(probs[i]);
        let (v, d) = focal.negative_term(pc);
        total += v;
        if live {
            grad_p[i] -= scale * d;
        }
    }
    Ok(-scale * total)
}

/// Neighbor offsets `(dx, dy)` counted once per unordered pair.
fn neighbor_offsets(system: NeighborSystem) -> &'static [(isize, isize)] {
    match system {
        NeighborSystem::Four => &[(1, 0), (0, 1)],
        NeighborSystem::Eight => &[(1, 0), (0, 1), (1, 1), (-1, 1)],
    }
}

/// Smoothness term for one class channel; adds `dL/dp` into `grad_p`.
fn pairwise_accumulate(
    probs: &[f64],
    dims: Dims,
    system: NeighborSystem,
    weight: f64,
    grad_p: &mut [f64],
) -> f64 {
    let (h, w) = (dims.height as isize, dims.width as isize);
    let offsets = neighbor_offsets(system);
    let mut pairs = 0usize;
    for &(dx, dy) in offsets {
        let nx = (w - dx.abs()).max(0) as usize;
        let ny = (h - dy.abs()).max(0) as usize;
        pairs += nx * ny;
    }
    if pairs == 0 {
        return 0.0;
    }
    let inv = 1.0 / pairs as f64;
    let mut sum = 0.0;
    for &(dx, dy) in offsets {
        for y in 0..h - dy {
            for x in 0..w {
                let (x2, y2) = (x + dx, y + dy);
                if x2 < 0 || x2 >= w {
                    continue;
                }
                let k = (y * w + x) as usize;
                let k2 = (y2 * w + x2) as usize;
                let d = probs[k] - probs[k2];
                sum += d * d;
                let g = weight * 2.0 * d * inv;
                grad_p[k] += g;
                grad_p[k2] -= g;
            }
        }
    }
    sum * inv
}

/// Multiply `dL/dp` by `p (1 - p)` in place.
fn chain_sigmoid(grad: &mut [f64], probs: &[f64]) {
    for (g, &p) in grad.iter_mut().zip(probs) {
        *g *= p * (1.0 - p);
    }
}

fn check_class(p: &ProbabilityMap, class: ClassId) -> Result<()> {
    if class.0 == 0 || class.channel() >= p.classes() {
        return Err(Error::ShapeMismatch(format!(
            "class {} outside a {}-class map",
            class.0,
            p.classes()
        )));
    }
    Ok(())
}

/// Unary focal bag loss of the negative mask's class.
pub fn unary_loss(
    p: &ProbabilityMap,
    pos: &[Bag],
    neg: &NegativeMask,
    cfg: &SegLossConfig,
) -> Result<LossGrad> {
    let class = neg.class;
    check_class(p, class)?;
    if neg.mask.dims() != p.dims() {
        return Err(Error::ShapeMismatch("negative mask and map dims differ".into()));
    }
    for bag in pos {
        if bag.class != class {
            return Err(Error::ShapeMismatch(format!(
                "bag of class {} mixed with class {}",
                bag.class.0, class.0
            )));
        }
        check_bag(p, bag)?;
    }
    let dims = p.dims();
    let mut grad = Planes::filled(p.classes(), dims, 0.0);
    let probs = p.channel(class);
    let g = grad.channel_mut(class);
    let value = unary_accumulate(
        probs,
        dims,
        pos,
        neg,
        &cfg.smoothmax,
        &cfg.focal,
        g,
        &mut BagScratch::default(),
    )?;
    chain_sigmoid(g, probs);
    Ok(LossGrad { value, grad })
}

/// Mean squared difference over neighboring pixel pairs of one class.
pub fn pairwise_loss(p: &ProbabilityMap, class: ClassId, neighbors: NeighborSystem) -> Result<LossGrad> {
    check_class(p, class)?;
    let dims = p.dims();
    let mut grad = Planes::filled(p.classes(), dims, 0.0);
    let probs = p.channel(class);
    let g = grad.channel_mut(class);
    let value = pairwise_accumulate(probs, dims, neighbors, 1.0, g);
    chain_sigmoid(g, probs);
    Ok(LossGrad { value, grad })
}

/// Bags and negative masks of one label, built once and reused across
/// evaluations.
#[derive(Debug, Clone)]
pub struct SegProblem {
    cfg: SegLossConfig,
    dims: Dims,
    classes: Vec<ClassTerms>,
}

#[derive(Debug, Clone)]
struct ClassTerms {
    class: ClassId,
    pos: Vec<Bag>,
    neg: NegativeMask,
}

/// Per-class parts of a segmentation loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassLoss {
    pub class: ClassId,
    pub unary: f64,
    pub pairwise: f64,
}

impl SegProblem {
    pub fn new(label: &TightBoxLabel, dims: Dims, cfg: &SegLossConfig) -> Result<Self> {
        cfg.validate()?;
        let classes = label
            .classes()
            .map(|class| ClassTerms {
                class,
                pos: positive_bags(label, class, &cfg.bags, dims),
                neg: negative_mask(label, class, dims),
            })
            .collect();
        Ok(SegProblem {
            cfg: *cfg,
            dims,
            classes,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn positive_bags(&self, class: ClassId) -> &[Bag] {
        &self.classes[class.channel()].pos
    }

    pub fn negative_mask(&self, class: ClassId) -> &NegativeMask {
        &self.classes[class.channel()].neg
    }

    /// Total loss with per-class breakdown; the gradient is written into `grad`.
    pub fn evaluate_into(&self, p: &ProbabilityMap, grad: &mut Planes) -> Result<(f64, Vec<ClassLoss>)> {
        if p.dims() != self.dims || p.classes() != self.classes.len() {
            return Err(Error::ShapeMismatch(format!(
                "map {}x{}x{} vs problem {}x{}x{}",
                p.classes(),
                p.dims().height,
                p.dims().width,
                self.classes.len(),
                self.dims.height,
                self.dims.width
            )));
        }
        if !p.same_shape(grad) {
            return Err(Error::ShapeMismatch("gradient buffer shape differs".into()));
        }
        grad.as_mut_slice().iter_mut().for_each(|g| *g = 0.0);
        let mut scratch = BagScratch::default();
        let mut total = 0.0;
        let mut parts = Vec::with_capacity(self.classes.len());
        for terms in &self.classes {
            let probs = p.channel(terms.class);
            let g = grad.channel_mut(terms.class);
            let unary = unary_accumulate(
                probs,
                self.dims,
                &terms.pos,
                &terms.neg,
                &self.cfg.smoothmax,
                &self.cfg.focal,
                g,
                &mut scratch,
            )?;
            let pairwise = if self.cfg.lambda > 0.0 {
                pairwise_accumulate(probs, self.dims, self.cfg.neighbors, self.cfg.lambda, g)
            } else {
                0.0
            };
            chain_sigmoid(g, probs);
            total += unary + self.cfg.lambda * pairwise;
            parts.push(ClassLoss {
                class: terms.class,
                unary,
                pairwise,
            });
        }
        Ok((total, parts))
    }

    pub fn evaluate(&self, p: &ProbabilityMap) -> Result<LossGrad> {
        let mut grad = Planes::filled(p.classes(), p.dims(), 0.0);
        let (value, _) = self.evaluate_into(p, &mut grad)?;
        Ok(LossGrad { value, grad })
    }
}

/// `Σ_c unary_c + lambda · pairwise_c`.
pub fn seg_loss(p: &ProbabilityMap, label: &TightBoxLabel, cfg: &SegLossConfig) -> Result<LossGrad> {
    if label.num_classes() != p.classes() {
        return Err(Error::ShapeMismatch(format!(
            "label has {} classes, map has {}",
            label.num_classes(),
            p.classes()
        )));
    }
    SegProblem::new(label, p.dims(), cfg)?.evaluate(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bags::LineFamily;
    use crate::geometry::{BBox, BinaryMask, LabeledBox};

    fn map(classes: usize, h: usize, w: usize, vals: Vec<f64>) -> ProbabilityMap {
        ProbabilityMap::new(Planes::from_vec(classes, Dims::new(h, w), vals).unwrap()).unwrap()
    }

    fn bag(pixels: Vec<(usize, usize)>) -> Bag {
        Bag {
            class: ClassId(1),
            angle: 0.0,
            family: LineFamily::TopBottom,
            pixels,
        }
    }

    fn hard_cfg() -> SegLossConfig {
        SegLossConfig {
            smoothmax: SmoothMaxConfig::hard(),
            ..Default::default()
        }
    }

    fn no_negatives(dims: Dims) -> NegativeMask {
        NegativeMask {
            class: ClassId(1),
            mask: BinaryMask::new(dims),
        }
    }

    #[test]
    fn bag_prediction_examples() {
        let p = map(1, 1, 2, vec![0.2, 0.9]);
        let b = bag(vec![(0, 0), (1, 0)]);
        assert_eq!(bag_prediction(&p, &b, &SmoothMaxConfig::hard()).unwrap(), 0.9);
        let single = bag(vec![(1, 0)]);
        for sm in [
            SmoothMaxConfig::hard(),
            SmoothMaxConfig::default(),
            SmoothMaxConfig { kind: crate::smoothmax::SmoothMaxKind::AlphaQuasimax, alpha: 8.0 },
        ] {
            assert!((bag_prediction(&p, &single, &sm).unwrap() - 0.9).abs() < 1e-15);
        }
        let zeros = map(1, 1, 2, vec![0.0, 0.0]);
        assert_eq!(bag_prediction(&zeros, &b, &SmoothMaxConfig::hard()).unwrap(), 0.0);
        assert!(bag_prediction(&p, &bag(vec![]), &SmoothMaxConfig::hard()).is_err());
        assert!(bag_prediction(&p, &bag(vec![(5, 0)]), &SmoothMaxConfig::hard()).is_err());
    }

    #[test]
    fn unary_single_positive_bag() {
        let p = map(1, 1, 2, vec![0.5, 0.1]);
        let dims = p.dims();
        let out = unary_loss(&p, &[bag(vec![(0, 0), (1, 0)])], &no_negatives(dims), &hard_cfg()).unwrap();
        // -0.25 * 0.25 * ln 0.5
        assert!((out.value - 0.043_321_698_784_996_58).abs() < 1e-12, "{}", out.value);
    }

    #[test]
    fn unary_single_negative_pixel() {
        let p = map(1, 1, 1, vec![0.5]);
        let neg = NegativeMask { class: ClassId(1), mask: BinaryMask::filled(p.dims()) };
        let out = unary_loss(&p, &[], &neg, &hard_cfg()).unwrap();
        // -0.75 * 0.25 * ln 0.5, N+ = 1
        assert!((out.value - 0.129_965_096_354_989_75).abs() < 1e-12, "{}", out.value);
    }

    #[test]
    fn unary_perfect_prediction_is_zero() {
        let p = map(1, 1, 3, vec![1.0, 0.0, 0.0]);
        let mut neg = BinaryMask::new(p.dims());
        neg.set(2, 0, true);
        let neg = NegativeMask { class: ClassId(1), mask: neg };
        let out = unary_loss(&p, &[bag(vec![(0, 0), (1, 0)])], &neg, &hard_cfg()).unwrap();
        assert!(out.value.abs() <= 1e-12);
    }

    #[test]
    fn pairwise_examples() {
        let u = map(1, 3, 3, vec![0.3; 9]);
        assert_eq!(pairwise_loss(&u, ClassId(1), NeighborSystem::Four).unwrap().value, 0.0);
        let p = map(1, 1, 2, vec![0.0, 1.0]);
        assert_eq!(pairwise_loss(&p, ClassId(1), NeighborSystem::Four).unwrap().value, 1.0);
        let p = map(1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(pairwise_loss(&p, ClassId(1), NeighborSystem::Four).unwrap().value, 0.5);
        // diagonals: 2 more pairs with |diff| = 1 -> (2 + 2) / 6
        let v = pairwise_loss(&p, ClassId(1), NeighborSystem::Eight).unwrap().value;
        assert!((v - 4.0 / 6.0).abs() < 1e-15);
        let one = map(1, 1, 1, vec![0.7]);
        assert_eq!(pairwise_loss(&one, ClassId(1), NeighborSystem::Four).unwrap().value, 0.0);
    }

    #[test]
    fn seg_loss_lambda_zero_is_unary_sum() {
        let dims = Dims::new(12, 12);
        let vals: Vec<f64> = (0..2 * 144).map(|i| 0.05 + 0.9 * ((i * 37 % 101) as f64 / 101.0)).collect();
        let p = map(2, 12, 12, vals);
        let label = TightBoxLabel::cdr(
            BBox::new(4.0, 4.0, 8.0, 9.0).unwrap(),
            BBox::new(2.0, 2.0, 10.0, 11.0).unwrap(),
        )
        .unwrap();
        let cfg = SegLossConfig { lambda: 0.0, ..Default::default() };
        let total = seg_loss(&p, &label, &cfg).unwrap().value;
        let mut sum = 0.0;
        for c in label.classes() {
            let pos = positive_bags(&label, c, &cfg.bags, dims);
            let neg = negative_mask(&label, c, dims);
            sum += unary_loss(&p, &pos, &neg, &cfg).unwrap().value;
        }
        assert!((total - sum).abs() < 1e-12);

        let cfg = SegLossConfig::default();
        let total = seg_loss(&p, &label, &cfg).unwrap().value;
        let mut sum = 0.0;
        for c in label.classes() {
            let pos = positive_bags(&label, c, &cfg.bags, dims);
            let neg = negative_mask(&label, c, dims);
            sum += unary_loss(&p, &pos, &neg, &cfg).unwrap().value
                + cfg.lambda * pairwise_loss(&p, c, cfg.neighbors).unwrap().value;
        }
        assert!((total - sum).abs() < 1e-12);
    }

    #[test]
    fn perfect_indicator_leaves_only_boundary_term() {
        let dims = Dims::new(10, 10);
        let b = BBox::new(3.0, 3.0, 7.0, 7.0).unwrap();
        let label = TightBoxLabel::new(1, vec![LabeledBox { class: ClassId(1), bbox: b }]).unwrap();
        let inside = b.rasterize(dims);
        let vals: Vec<f64> = inside.as_slice().iter().map(|&v| v as f64).collect();
        let p = map(1, 10, 10, vals);
        let cfg = SegLossConfig { smoothmax: SmoothMaxConfig::hard(), ..Default::default() };
        let out = seg_loss(&p, &label, &cfg).unwrap();
        // a 4x4 square has 16 unit-difference neighbor pairs of 180
        let expected = cfg.lambda * 16.0 / 180.0;
        assert!((out.value - expected).abs() < 1e-12, "{} vs {expected}", out.value);
    }

    #[test]
    fn shape_errors() {
        let p = map(1, 2, 2, vec![0.5; 4]);
        let neg = NegativeMask { class: ClassId(1), mask: BinaryMask::new(Dims::new(3, 3)) };
        assert!(unary_loss(&p, &[], &neg, &hard_cfg()).is_err());
        assert!(pairwise_loss(&p, ClassId(2), NeighborSystem::Four).is_err());
    }

    #[test]
    fn focal_derivatives_match_difference_quotients() {
        for focal in [FocalConfig::default(), FocalConfig { beta: 0.6, gamma: 0.0 }, FocalConfig { beta: 0.1, gamma: 1.5 }] {
            for &p in &[0.05, 0.3, 0.5, 0.8, 0.97] {
                let h = 1e-6;
                let (_, d) = focal.positive_term(p);
                let fd = (focal.positive_term(p + h).0 - focal.positive_term(p - h).0) / (2.0 * h);
                assert!((d - fd).abs() < 1e-6 * (1.0 + d.abs()));
                let (_, d) = focal.negative_term(p);
                let fd = (focal.negative_term(p + h).0 - focal.negative_term(p - h).0) / (2.0 * h);
                assert!((d - fd).abs() < 1e-6 * (1.0 + d.abs()));
            }
        }
    }
}
