//! Class-specific box regression.
//!
//! Every location inside a box of class `c` regresses the four normalized
//! distances from itself to the sides of its matched box. Only locations whose
//! expected IoU exceeds a threshold contribute to the loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pixel_center, BBox, BinaryMask, ClassId, Dims, TightBoxLabel};
use crate::smoothmax::SmoothMaxKind;

/// Per-class object-size normalizers `S_c` in pixels, indexed by channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerConfig {
    pub sizes: Vec<f64>,
}

impl Default for NormalizerConfig {
    /// Optic cup 40, optic disc 70.
    fn default() -> Self {
        NormalizerConfig {
            sizes: vec![40.0, 70.0],
        }
    }
}

impl NormalizerConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.sizes.len() < classes {
            return Err(Error::Config(format!(
                "{} normalizers for {classes} classes",
                self.sizes.len()
            )));
        }
        if let Some(s) = self.sizes.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("normalizer must be > 0, got {s}")));
        }
        Ok(())
    }

    pub fn get(&self, class: ClassId) -> f64 {
        self.sizes[class.channel()]
    }

    /// Average of the mean vertical and mean horizontal diameters per class.
    pub fn estimate<'a>(
        labels: impl IntoIterator<Item = &'a TightBoxLabel>,
        classes: usize,
    ) -> Result<Self> {
        let mut sums = vec![(0.0, 0.0, 0usize); classes];
        for label in labels {
            for e in label.entries() {
                let s = sums
                    .get_mut(e.class.channel())
                    .ok_or_else(|| Error::Config(format!("class {} out of range", e.class.0)))?;
                s.0 += e.bbox.height();
                s.1 += e.bbox.width();
                s.2 += 1;
            }
        }
        let sizes = sums
            .into_iter()
            .enumerate()
            .map(|(c, (h, w, n))| {
                if n == 0 {
                    Err(Error::Config(format!("no boxes of class {}", c + 1)))
                } else {
                    Ok((h / n as f64 + w / n as f64) / 2.0)
                }
            })
            .collect::<Result<_>>()?;
        Ok(NormalizerConfig { sizes })
    }
}

/// Normalized distances `(tl, tt, tr, tb)` from a location to the box sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget(pub [f64; 4]);

impl RegressionTarget {
    pub fn l1(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }
}

/// Predicted offsets, C×4×H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionField {
    classes: usize,
    dims: Dims,
    data: Vec<f64>,
}

impl RegressionField {
    pub fn zeros(classes: usize, dims: Dims) -> Self {
        RegressionField {
            classes,
            dims,
            data: vec![0.0; classes * 4 * dims.area()],
        }
    }

    pub fn from_vec(classes: usize, dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * 4 * dims.area() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {classes}x4x{}x{} field",
                data.len(),
                dims.height,
                dims.width
            )));
        }
        Ok(RegressionField {
            classes,
            dims,
            data,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    fn offset(&self, class: ClassId, component: usize, x: usize, y: usize) -> usize {
        ((class.channel() * 4 + component) * self.dims.height + y) * self.dims.width + x
    }

    pub fn offsets(&self, class: ClassId, x: usize, y: usize) -> [f64; 4] {
        std::array::from_fn(|k| self.data[self.offset(class, k, x, y)])
    }

    pub fn set_offsets(&mut self, class: ClassId, x: usize, y: usize, v: [f64; 4]) {
        for (k, val) in v.into_iter().enumerate() {
            let i = self.offset(class, k, x, y);
            self.data[i] = val;
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Field holding the encoded target of every in-box location, zero elsewhere.
    pub fn from_targets(label: &TightBoxLabel, dims: Dims, normalizers: &NormalizerConfig) -> Self {
        let mut field = Self::zeros(label.num_classes(), dims);
        for class in label.classes() {
            let boxes = label.boxes_of(class);
            let s = normalizers.get(class);
            for y in 0..dims.height {
                for x in 0..dims.width {
                    let loc = pixel_center(x, y);
                    if let Some(b) = match_label(loc, &boxes, s) {
                        field.set_offsets(class, x, y, encode_target(loc, &b, s).0);
                    }
                }
            }
        }
        field
    }
}

/// Threshold on expected IoU for positive-sample selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub threshold: f64,
}

impl SelectionConfig {
    /// 0.6 with alpha-softmax, 0.5 with alpha-quasimax (and hard max).
    pub fn for_smoothmax(kind: SmoothMaxKind) -> Self {
        let threshold = match kind {
            SmoothMaxKind::AlphaSoftmax => 0.6,
            SmoothMaxKind::AlphaQuasimax | SmoothMaxKind::Hard => 0.5,
        };
        SelectionConfig { threshold }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "selection threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// `((x - xl), (y - yt), (xr - x), (yb - y)) / S`.
pub fn encode_target(location: (f64, f64), b: &BBox, s: f64) -> RegressionTarget {
    let (x, y) = location;
    RegressionTarget([(x - b.xl) / s, (y - b.yt) / s, (b.xr - x) / s, (b.yb - y) / s])
}

/// Inverse of [`encode_target`].
pub fn decode_box(location: (f64, f64), offsets: [f64; 4], s: f64) -> Result<BBox> {
    let (x, y) = location;
    let [tl, tt, tr, tb] = offsets;
    let (xl, yt, xr, yb) = (x - s * tl, y - s * tt, x + s * tr, y + s * tb);
    BBox::new(xl, yt, xr, yb).map_err(|_| Error::DegenerateBox { xl, yt, xr, yb })
}

/// Matched box of a location among one class's boxes: the containing box with
/// the smallest target L1 norm, first in list order on ties.
pub fn match_label(location: (f64, f64), boxes: &[BBox], s: f64) -> Option<BBox> {
    let mut best: Option<(f64, BBox)> = None;
    for b in boxes {
        if !b.contains_point(location.0, location.1) {
            continue;
        }
        let n = encode_target(location, b, s).l1();
        if best.is_none_or(|(m, _)| n < m) {
            best = Some((n, *b));
        }
    }
    best.map(|(_, b)| b)
}

/// Expected IoU at relative position `(r1, r2)` inside a box: the best IoU any
/// box centered there can reach with it.
pub fn eiou(r1: f64, r2: f64) -> Result<f64> {
    if !(r1 > 0.0 && r1 < 1.0 && r2 > 0.0 && r2 < 1.0) {
        return Err(Error::OutOfUnitSquare { r1, r2 });
    }
    let a = r1.min(1.0 - r1);
    let b = r2.min(1.0 - r2);
    let candidates = [
        4.0 * a * b,
        2.0 * a / (2.0 * a * (1.0 - 2.0 * b) + 1.0),
        2.0 * b / (2.0 * b * (1.0 - 2.0 * a) + 1.0),
        1.0 / (4.0 * (1.0 - a) * (1.0 - b)),
    ];
    Ok(candidates.into_iter().fold(0.0, f64::max))
}

/// A selected location with its target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveSample {
    pub x: usize,
    pub y: usize,
    pub target: RegressionTarget,
}

/// In-box locations of one class with `eiou > threshold`, in row-major order.
pub fn positive_samples(
    label: &TightBoxLabel,
    class: ClassId,
    threshold: f64,
    dims: Dims,
    s: f64,
) -> Vec<PositiveSample> {
    let boxes = label.boxes_of(class);
    let mut out = Vec::new();
    for y in 0..dims.height {
        for x in 0..dims.width {
            let loc = pixel_center(x, y);
            let Some(b) = match_label(loc, &boxes, s) else {
                continue;
            };
            let r1 = (loc.0 - b.xl) / b.width();
            let r2 = (loc.1 - b.yt) / b.height();
            // centers of pixels inside a box never sit on its edge
            let e = eiou(r1, r2).unwrap_or(0.0);
            if e > threshold || threshold == 0.0 {
                out.push(PositiveSample {
                    x,
                    y,
                    target: encode_target(loc, &b, s),
                });
            }
        }
    }
    out
}

/// Mask of the selected regression locations of one class.
pub fn select_positives(label: &TightBoxLabel, class: ClassId, threshold: f64, dims: Dims) -> BinaryMask {
    let mut mask = BinaryMask::new(dims);
    // the normalizer does not affect which locations are selected
    for s in positive_samples(label, class, threshold, dims, 1.0) {
        mask.set(s.x, s.y, true);
    }
    mask
}

/// Smooth L1 and its derivative.
#[inline]
pub fn smooth_l1(x: f64, sigma: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    if x.abs() < 1.0 / s2 {
        (0.5 * s2 * x * x, s2 * x)
    } else {
        (x.abs() - 0.5 / s2, x.signum())
    }
}

/// Selected samples of every class, built once per label.
#[derive(Debug, Clone)]
pub struct RegressionProblem {
    classes: usize,
    dims: Dims,
    sigma: f64,
    samples: Vec<Vec<PositiveSample>>,
}

impl RegressionProblem {
    pub fn new(
        label: &TightBoxLabel,
        dims: Dims,
        normalizers: &NormalizerConfig,
        selection: &SelectionConfig,
        sigma: f64,
    ) -> Result<Self> {
        normalizers.validate(label.num_classes())?;
        selection.validate()?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be > 0, got {sigma}")));
        }
        let samples = label
            .classes()
            .map(|c| positive_samples(label, c, selection.threshold, dims, normalizers.get(c)))
            .collect();
        Ok(RegressionProblem {
            classes: label.num_classes(),
            dims,
            sigma,
            samples,
        })
    }

    pub fn samples(&self, class: ClassId) -> &[PositiveSample] {
        &self.samples[class.channel()]
    }

    pub fn selected_count(&self) -> usize {
        self.samples.iter().map(Vec::len).sum()
    }

    /// Value, writing `dL/dv` into `grad` (zeroed first).
    pub fn evaluate_into(&self, v: &RegressionField, grad: &mut RegressionField) -> Result<f64> {
        if v.classes != self.classes || v.dims != self.dims {
            return Err(Error::ShapeMismatch(format!(
                "field {}x4x{}x{} vs problem {}x4x{}x{}",
                v.classes, v.dims.height, v.dims.width, self.classes, self.dims.height, self.dims.width
            )));
        }
        if grad.classes != v.classes || grad.dims != v.dims {
            return Err(Error::ShapeMismatch("gradient buffer shape differs".into()));
        }
        grad.data.iter_mut().for_each(|g| *g = 0.0);
        let inv_c = 1.0 / self.classes as f64;
        let mut total = 0.0;
        for (ch, samples) in self.samples.iter().enumerate() {
            if samples.is_empty() {
                continue;
            }
            let class = ClassId::from_channel(ch);
            let scale = inv_c / samples.len() as f64;
            let mut sum = 0.0;
            for s in samples {
                for k in 0..4 {
                    let i = v.offset(class, k, s.x, s.y);
                    let (l, d) = smooth_l1(s.target.0[k] - v.data[i], self.sigma);
                    sum += l;
                    grad.data[i] = -scale * d;
                }
            }
            total += scale * sum;
        }
        Ok(total)
    }

    pub fn evaluate(&self, v: &RegressionField) -> Result<(f64, RegressionField)> {
        let mut grad = RegressionField::zeros(v.classes, v.dims);
        let value = self.evaluate_into(v, &mut grad)?;
        Ok((value, grad))
    }

    /// Copy every selected target into `v`.
    pub fn write_targets(&self, v: &mut RegressionField) {
        for (ch, samples) in self.samples.iter().enumerate() {
            let class = ClassId::from_channel(ch);
            for s in samples {
                v.set_offsets(class, s.x, s.y, s.target.0);
            }
        }
    }
}

/// `(1/C) Σ_c (1/M_c) Σ_selected Σ_k smoothL1(t - v)`; classes without
/// selected locations contribute 0.
pub fn regression_loss(
    v: &RegressionField,
    label: &TightBoxLabel,
    normalizers: &NormalizerConfig,
    selection: &SelectionConfig,
    sigma: f64,
) -> Result<(f64, RegressionField)> {
    RegressionProblem::new(label, v.dims(), normalizers, selection, sigma)?.evaluate(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LabeledBox;

    fn bx(xl: f64, yt: f64, xr: f64, yb: f64) -> BBox {
        BBox::new(xl, yt, xr, yb).unwrap()
    }

    #[test]
    fn encode_examples() {
        let t = encode_target((100.0, 120.0), &bx(80.0, 90.0, 140.0, 160.0), 40.0);
        assert_eq!(t.0, [0.5, 0.75, 1.0, 1.0]);
        let b = bx(10.0, 20.0, 50.0, 44.0);
        assert_eq!(encode_target((10.0, 20.0), &b, 8.0).0, [0.0, 0.0, 5.0, 3.0]);
        let sq = bx(0.0, 0.0, 40.0, 40.0);
        assert_eq!(encode_target((20.0, 20.0), &sq, 40.0).0, [0.5; 4]);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(
            decode_box((100.0, 100.0), [1.0; 4], 40.0).unwrap(),
            bx(60.0, 60.0, 140.0, 140.0)
        );
        assert!(matches!(
            decode_box((5.0, 5.0), [0.0; 4], 40.0),
            Err(Error::DegenerateBox { .. })
        ));
        let b = bx(80.0, 90.0, 140.0, 160.0);
        let loc = (100.0, 120.0);
        assert_eq!(decode_box(loc, encode_target(loc, &b, 40.0).0, 40.0).unwrap(), b);
    }

    #[test]
    fn matching() {
        let big = bx(0.0, 0.0, 100.0, 100.0);
        let small = bx(40.0, 40.0, 60.0, 60.0);
        assert_eq!(match_label((200.0, 5.0), &[big], 40.0), None);
        assert_eq!(match_label((5.0, 5.0), &[big, small], 40.0), Some(big));
        // at the small box center: L1 = 80/S for small, 200/S for big
        assert_eq!(match_label((50.0, 50.0), &[big, small], 40.0), Some(small));
        assert_eq!(match_label((50.0, 50.0), &[small, big], 40.0), Some(small));
        // equal norms: list order wins
        let twin = bx(0.0, 0.0, 100.0, 100.0);
        assert_eq!(match_label((50.0, 50.0), &[big, twin], 1.0), Some(big));
    }

    #[test]
    fn eiou_examples() {
        assert!((eiou(0.5, 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert!((eiou(0.25, 0.25).unwrap() - 1.0 / 2.25).abs() < 1e-15);
        assert_eq!(eiou(0.75, 0.25).unwrap(), eiou(0.25, 0.25).unwrap());
        assert!(eiou(0.0, 0.5).is_err());
        assert!(eiou(0.5, 1.0).is_err());
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0, 6.0), (0.0, 0.0));
        let knee = 1.0 / 36.0;
        let below = 0.5 * 36.0 * knee * knee;
        assert!((smooth_l1(knee, 6.0).0 - below).abs() < 1e-15);
        assert!((smooth_l1(knee, 6.0).0 - 1.0 / 72.0).abs() < 1e-15);
        assert!((smooth_l1(1.0, 6.0).0 - (1.0 - 1.0 / 72.0)).abs() < 1e-15);
        assert_eq!(smooth_l1(-2.0, 6.0).1, -1.0);
    }

    fn single_box_label() -> TightBoxLabel {
        TightBoxLabel::new(1, vec![LabeledBox { class: ClassId(1), bbox: bx(10.0, 10.0, 30.0, 40.0) }]).unwrap()
    }

    #[test]
    fn selection_extremes() {
        let dims = Dims::new(50, 50);
        let label = single_box_label();
        let all = select_positives(&label, ClassId(1), 0.0, dims);
        assert_eq!(all, label.entries()[0].bbox.rasterize(dims));
        assert_eq!(select_positives(&label, ClassId(1), 1.0, dims).count(), 0);
        let some = select_positives(&label, ClassId(1), 0.6, dims).count();
        assert!(some > 0 && some < all.count());
    }

    #[test]
    fn loss_zero_at_targets_and_off_by_one() {
        let dims = Dims::new(50, 50);
        let label = single_box_label();
        let norms = NormalizerConfig { sizes: vec![20.0] };
        let sel = SelectionConfig { threshold: 0.6 };
        let mut v = RegressionField::zeros(1, dims);
        let prob = RegressionProblem::new(&label, dims, &norms, &sel, 6.0).unwrap();
        prob.write_targets(&mut v);
        assert_eq!(prob.evaluate(&v).unwrap().0, 0.0);

        // a label with exactly one selected location: a 1x1 box
        let tiny = TightBoxLabel::new(2, vec![LabeledBox { class: ClassId(1), bbox: bx(5.0, 5.0, 6.0, 6.0) }]).unwrap();
        let norms = NormalizerConfig { sizes: vec![1.0, 1.0] };
        let prob = RegressionProblem::new(&tiny, dims, &norms, &sel, 6.0).unwrap();
        assert_eq!(prob.selected_count(), 1);
        let mut v = RegressionField::zeros(2, dims);
        prob.write_targets(&mut v);
        let mut o = v.offsets(ClassId(1), 5, 5);
        o[0] -= 1.0;
        v.set_offsets(ClassId(1), 5, 5, o);
        let (l, _) = prob.evaluate(&v).unwrap();
        assert!((l - 0.5 * (1.0 - 1.0 / 72.0)).abs() < 1e-15);
    }

    #[test]
    fn normalizer_estimate() {
        let a = TightBoxLabel::cdr(bx(0.0, 0.0, 40.0, 30.0), bx(0.0, 0.0, 80.0, 60.0)).unwrap();
        let b = TightBoxLabel::cdr(bx(0.0, 0.0, 20.0, 50.0), bx(0.0, 0.0, 60.0, 80.0)).unwrap();
        let n = NormalizerConfig::estimate([&a, &b], 2).unwrap();
        assert_eq!(n.sizes, vec![(40.0 + 30.0) / 2.0, (70.0 + 70.0) / 2.0]);
        assert!(NormalizerConfig { sizes: vec![1.0, 0.0] }.validate(2).is_err());
    }
}
