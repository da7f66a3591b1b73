//! Boxes, masks and per-class prediction maps.
//!
//! Pixel `(x, y)` occupies the unit cell `[x, x+1) × [y, y+1)`; its center is
//! `(x + 0.5, y + 0.5)`. A pixel belongs to a box when its center lies in the
//! half-open box `[xl, xr) × [yt, yb)`.

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Image dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(height: usize, width: usize) -> Self {
        Dims { height, width }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// Center of pixel `(x, y)` in continuous coordinates.
#[inline]
pub fn pixel_center(x: usize, y: usize) -> (f64, f64) {
    (x as f64 + 0.5, y as f64 + 0.5)
}

/// Axis-aligned box `(xl, yt, xr, yb)` in continuous image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xl: f64,
    pub yt: f64,
    pub xr: f64,
    pub yb: f64,
}

impl BBox {
    pub fn new(xl: f64, yt: f64, xr: f64, yb: f64) -> Result<Self> {
        let b = BBox { xl, yt, xr, yb };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { xl, yt, xr, yb })
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.xl, self.yt, self.xr, self.yb]
            .iter()
            .all(|v| v.is_finite())
            && self.xl < self.xr
            && self.yt < self.yb
    }

    pub fn width(&self) -> f64 {
        self.xr - self.xl
    }

    /// Vertical diameter.
    pub fn height(&self) -> f64 {
        self.yb - self.yt
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Half-open containment of a continuous point.
    #[inline]
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.xl <= x && x < self.xr && self.yt <= y && y < self.yb
    }

    /// Whether the center of pixel `(x, y)` lies inside the box.
    #[inline]
    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        let (cx, cy) = pixel_center(x, y);
        self.contains_point(cx, cy)
    }

    /// Range of pixel columns whose centers fall in `[xl, xr)`, clipped to `width`.
    pub fn pixel_cols(&self, width: usize) -> std::ops::Range<usize> {
        center_range(self.xl, self.xr, width)
    }

    /// Range of pixel rows whose centers fall in `[yt, yb)`, clipped to `height`.
    pub fn pixel_rows(&self, height: usize) -> std::ops::Range<usize> {
        center_range(self.yt, self.yb, height)
    }

    /// Box as a mask of the pixels whose centers it contains.
    pub fn rasterize(&self, dims: Dims) -> BinaryMask {
        let mut mask = BinaryMask::new(dims);
        for y in self.pixel_rows(dims.height) {
            for x in self.pixel_cols(dims.width) {
                mask.set(x, y, true);
            }
        }
        mask
    }

    fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.xr.min(other.xr) - self.xl.max(other.xl);
        let h = self.yb.min(other.yb) - self.yt.max(other.yt);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Indices `i` in `0..limit` with `lo <= i + 0.5 < hi`.
fn center_range(lo: f64, hi: f64, limit: usize) -> std::ops::Range<usize> {
    let start = (lo - 0.5).ceil().max(0.0);
    let end = (hi - 0.5).ceil().max(0.0);
    let start = (start as usize).min(limit);
    let end = (end as usize).min(limit);
    start..end.max(start)
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Class identifier in `1..=C`. In CDR mode class 1 is the optic cup and
/// class 2 the optic disc.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(pub u32);

impl ClassId {
    pub const OC: ClassId = ClassId(1);
    pub const OD: ClassId = ClassId(2);

    /// Zero-based channel index into C×H×W maps.
    #[inline]
    pub fn channel(self) -> usize {
        (self.0 - 1) as usize
    }

    pub fn from_channel(channel: usize) -> Self {
        ClassId(channel as u32 + 1)
    }

    pub fn tag(self) -> Option<&'static str> {
        match self {
            ClassId::OC => Some("oc"),
            ClassId::OD => Some("od"),
            _ => None,
        }
    }
}

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.tag() {
            Some(t) => f.write_str(t),
            None => write!(f, "{}", self.0),
        }
    }
}

// "oc"/"od" for the two CDR classes, a bare integer otherwise.
impl Serialize for ClassId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.tag() {
            Some(t) => s.serialize_str(t),
            None => s.serialize_u32(self.0),
        }
    }
}

impl<'de> Deserialize<'de> for ClassId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct ClassVisitor;
        impl Visitor<'_> for ClassVisitor {
            type Value = ClassId;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("\"oc\", \"od\" or a positive integer class id")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<ClassId, E> {
                match v {
                    "oc" => Ok(ClassId::OC),
                    "od" => Ok(ClassId::OD),
                    other => Err(E::custom(format!("unknown class tag {other:?}"))),
                }
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<ClassId, E> {
                if v == 0 || v > u32::MAX as u64 {
                    Err(E::custom(format!("class id {v} out of range")))
                } else {
                    Ok(ClassId(v as u32))
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<ClassId, E> {
                if v <= 0 {
                    Err(E::custom(format!("class id {v} out of range")))
                } else {
                    self.visit_u64(v as u64)
                }
            }
        }
        d.deserialize_any(ClassVisitor)
    }
}

/// A box with its class, serialized as `{class, xl, yt, xr, yb}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub class: ClassId,
    #[serde(flatten)]
    pub bbox: BBox,
}

/// Tight bounding-box supervision for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TightBoxLabel {
    num_classes: usize,
    entries: Vec<LabeledBox>,
}

impl TightBoxLabel {
    pub fn new(num_classes: usize, entries: Vec<LabeledBox>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("label needs at least one class".into()));
        }
        for e in &entries {
            if e.class.0 == 0 || e.class.0 as usize > num_classes {
                return Err(Error::Config(format!(
                    "class id {} outside 1..={num_classes}",
                    e.class.0
                )));
            }
            if !e.bbox.is_valid() {
                let b = e.bbox;
                return Err(Error::InvalidBox {
                    xl: b.xl,
                    yt: b.yt,
                    xr: b.xr,
                    yb: b.yb,
                });
            }
        }
        Ok(TightBoxLabel {
            num_classes,
            entries,
        })
    }

    /// Two-class label with one optic-cup and one optic-disc box.
    pub fn cdr(oc: BBox, od: BBox) -> Result<Self> {
        Self::new(
            2,
            vec![
                LabeledBox {
                    class: ClassId::OC,
                    bbox: oc,
                },
                LabeledBox {
                    class: ClassId::OD,
                    bbox: od,
                },
            ],
        )
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn entries(&self) -> &[LabeledBox] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> {
        (1..=self.num_classes as u32).map(ClassId)
    }

    /// Boxes of one class in label order.
    pub fn boxes_of(&self, class: ClassId) -> Vec<BBox> {
        self.entries
            .iter()
            .filter(|e| e.class == class)
            .map(|e| e.bbox)
            .collect()
    }

    /// First box of a class, if any.
    pub fn first_of(&self, class: ClassId) -> Option<BBox> {
        self.entries.iter().find(|e| e.class == class).map(|e| e.bbox)
    }

    /// In CDR mode (C = 2) there is at most one box per class.
    pub fn check_cdr_mode(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "CDR mode needs 2 classes, label has {}",
                self.num_classes
            )));
        }
        for c in self.classes() {
            let n = self.entries.iter().filter(|e| e.class == c).count();
            if n > 1 {
                return Err(Error::Config(format!("class {c} has {n} boxes in CDR mode")));
            }
        }
        Ok(())
    }
}

/// H×W grid of {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(dims: Dims) -> Self {
        BinaryMask {
            dims,
            data: vec![0; dims.area()],
        }
    }

    pub fn filled(dims: Dims) -> Self {
        BinaryMask {
            dims,
            data: vec![1; dims.area()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.area());
        for y in 0..dims.height {
            for x in 0..dims.width {
                data.push(f(x, y) as u8);
            }
        }
        BinaryMask { dims, data }
    }

    /// Build from raw row-major bytes; any nonzero value is foreground.
    pub fn from_bytes(dims: Dims, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != dims.area() {
            return Err(Error::ShapeMismatch(format!(
                "{} bytes for a {}x{} mask",
                bytes.len(),
                dims.height,
                dims.width
            )));
        }
        Ok(BinaryMask {
            dims,
            data: bytes.iter().map(|&b| (b != 0) as u8).collect(),
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[self.dims.index(x, y)] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        let i = self.dims.index(x, y);
        self.data[i] = on as u8;
    }

    /// Row-major 0/1 values.
    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a == 0 || b != 0)
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.dims.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| (i % w, i / w))
    }
}

/// Minimal box covering every foreground pixel cell.
pub fn mask_to_tight_box(mask: &BinaryMask) -> Result<BBox> {
    let mut extent: Option<(usize, usize, usize, usize)> = None;
    for (x, y) in mask.foreground() {
        extent = Some(match extent {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    let (x0, y0, x1, y1) = extent.ok_or(Error::EmptyObject)?;
    BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)
}

/// C×H×W grid of reals, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    classes: usize,
    dims: Dims,
    data: Vec<f64>,
}

impl Planes {
    pub fn filled(classes: usize, dims: Dims, value: f64) -> Self {
        Planes {
            classes,
            dims,
            data: vec![value; classes * dims.area()],
        }
    }

    pub fn from_vec(classes: usize, dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * dims.area() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {classes}x{}x{}",
                data.len(),
                dims.height,
                dims.width
            )));
        }
        Ok(Planes {
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
    pub fn offset(&self, class: ClassId, x: usize, y: usize) -> usize {
        class.channel() * self.dims.area() + self.dims.index(x, y)
    }

    #[inline]
    pub fn get(&self, class: ClassId, x: usize, y: usize) -> f64 {
        self.data[self.offset(class, x, y)]
    }

    #[inline]
    pub fn set(&mut self, class: ClassId, x: usize, y: usize, v: f64) {
        let i = self.offset(class, x, y);
        self.data[i] = v;
    }

    pub fn channel(&self, class: ClassId) -> &[f64] {
        let a = self.dims.area();
        &self.data[class.channel() * a..(class.channel() + 1) * a]
    }

    pub fn channel_mut(&mut self, class: ClassId) -> &mut [f64] {
        let a = self.dims.area();
        &mut self.data[class.channel() * a..(class.channel() + 1) * a]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn same_shape(&self, other: &Planes) -> bool {
        self.classes == other.classes && self.dims == other.dims
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap(pub Planes);

/// Per-pixel class probabilities `p_kc ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Planes);

impl LogitMap {
    pub fn filled(classes: usize, dims: Dims, value: f64) -> Self {
        LogitMap(Planes::filled(classes, dims, value))
    }

    pub fn probabilities(&self) -> ProbabilityMap {
        let mut planes = self.0.clone();
        planes.data.iter_mut().for_each(|z| *z = sigmoid(*z));
        ProbabilityMap(planes)
    }
}

impl ProbabilityMap {
    pub fn new(planes: Planes) -> Result<Self> {
        if let Some(i) = planes.data.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::ShapeMismatch(format!(
                "probability {} at offset {i} outside [0, 1]",
                planes.data[i]
            )));
        }
        Ok(ProbabilityMap(planes))
    }

    pub fn planes(&self) -> &Planes {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.classes
    }

    pub fn dims(&self) -> Dims {
        self.0.dims
    }

    #[inline]
    pub fn get(&self, class: ClassId, x: usize, y: usize) -> f64 {
        self.0.get(class, x, y)
    }

    pub fn channel(&self, class: ClassId) -> &[f64] {
        self.0.channel(class)
    }

    /// Pixels with `p > threshold` for one class.
    pub fn threshold(&self, class: ClassId, threshold: f64) -> BinaryMask {
        let ch = self.channel(class);
        let dims = self.dims();
        BinaryMask::from_fn(dims, |x, y| ch[dims.index(x, y)] > threshold)
    }

    pub fn same_shape(&self, other: &Planes) -> bool {
        self.0.same_shape(other)
    }
}
