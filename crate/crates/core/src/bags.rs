//! Multiple-instance bags derived from tight boxes.
//!
//! Every crossing line of a tight box (a segment with its endpoints on two
//! opposite sides) passes through at least one object pixel, so its pixels form
//! a positive bag. Each pixel outside all boxes of a class is a singleton
//! negative bag for that class; those are kept as a mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask, ClassId, Dims, TightBoxLabel};

/// Angle grid `start, start + step, …, end` in degrees (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BagConfig {
    pub theta_start: f64,
    pub theta_end: f64,
    pub theta_step: f64,
}

impl Default for BagConfig {
    fn default() -> Self {
        BagConfig {
            theta_start: -40.0,
            theta_end: 40.0,
            theta_step: 10.0,
        }
    }
}

impl BagConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.theta_start > -90.0
            && self.theta_start <= self.theta_end
            && self.theta_end < 90.0
            && self.theta_step > 0.0
            && self.theta_step.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "angle grid ({}, {}, {}) must satisfy -90 < start <= end < 90 and step > 0",
                self.theta_start, self.theta_end, self.theta_step
            )))
        }
    }

    pub fn angles(&self) -> Vec<f64> {
        let n = ((self.theta_end - self.theta_start) / self.theta_step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| self.theta_start + i as f64 * self.theta_step)
            .collect()
    }
}

/// Which pair of opposite box sides a crossing line connects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineFamily {
    TopBottom,
    LeftRight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub class: ClassId,
    pub angle: f64,
    pub family: LineFamily,
    /// Pixel coordinates `(x, y)`.
    pub pixels: Vec<(usize, usize)>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Per-class singleton negative bags; `true` marks a negative pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeMask {
    pub class: ClassId,
    pub mask: BinaryMask,
}

impl NegativeMask {
    pub fn count(&self) -> usize {
        self.mask.count()
    }
}

/// Crossing lines of `bbox` at angle `theta` (degrees), both families.
///
/// The top-bottom family are lines tilted by `theta` from the vertical, one per
/// integer offset of their top crossing point from the first pixel center; a
/// line is kept when both its top and bottom crossing points lie on the box
/// edges. It is rasterized with one pixel per row, at the nearest pixel center
/// to where the line crosses that row's center. The left-right family is the
/// transpose. Pixels outside the box or image are dropped, as are bags that end
/// up empty.
pub fn crossing_lines(bbox: &BBox, theta: f64, class: ClassId, dims: Dims) -> Vec<Bag> {
    let mut bags = Vec::new();
    let rows = bbox.pixel_rows(dims.height);
    let cols = bbox.pixel_cols(dims.width);
    if rows.is_empty() || cols.is_empty() {
        return bags;
    }
    let slope = theta.to_radians().tan();

    // top-bottom: x(y) = s + (y - yt) * slope
    let drift = bbox.height() * slope;
    for s in line_starts(bbox.xl, bbox.xr, drift) {
        let pixels: Vec<_> = rows
            .clone()
            .filter_map(|y| {
                let cy = y as f64 + 0.5;
                let x = nearest_center(s + (cy - bbox.yt) * slope)?;
                (x < dims.width && bbox.contains_pixel(x, y)).then_some((x, y))
            })
            .collect();
        if !pixels.is_empty() {
            bags.push(Bag {
                class,
                angle: theta,
                family: LineFamily::TopBottom,
                pixels,
            });
        }
    }

    // left-right: y(x) = s + (x - xl) * slope
    let drift = bbox.width() * slope;
    for s in line_starts(bbox.yt, bbox.yb, drift) {
        let pixels: Vec<_> = cols
            .clone()
            .filter_map(|x| {
                let cx = x as f64 + 0.5;
                let y = nearest_center(s + (cx - bbox.xl) * slope)?;
                (y < dims.height && bbox.contains_pixel(x, y)).then_some((x, y))
            })
            .collect();
        if !pixels.is_empty() {
            bags.push(Bag {
                class,
                angle: theta,
                family: LineFamily::LeftRight,
                pixels,
            });
        }
    }
    bags
}

/// Start points `lo + 0.5 + k` such that both `s` and `s + drift` lie in `[lo, hi]`.
fn line_starts(lo: f64, hi: f64, drift: f64) -> impl Iterator<Item = f64> {
    let first = lo + 0.5;
    (0..)
        .map(move |k| first + k as f64)
        .take_while(move |&s| s <= hi)
        .filter(move |&s| {
            let e = s + drift;
            lo <= e && e <= hi
        })
}

/// Index of the pixel whose center is nearest to coordinate `v`.
#[inline]
fn nearest_center(v: f64) -> Option<usize> {
    let i = (v - 0.5).round();
    (i >= 0.0).then_some(i as usize)
}

/// All crossing-line bags of a class over every box and every grid angle.
pub fn positive_bags(
    label: &TightBoxLabel,
    class: ClassId,
    cfg: &BagConfig,
    dims: Dims,
) -> Vec<Bag> {
    let angles = cfg.angles();
    label
        .boxes_of(class)
        .iter()
        .flat_map(|b| {
            angles
                .iter()
                .flat_map(move |&theta| crossing_lines(b, theta, class, dims))
        })
        .collect()
}

/// Pixels whose centers lie outside every box of the class.
pub fn negative_mask(label: &TightBoxLabel, class: ClassId, dims: Dims) -> NegativeMask {
    let boxes = label.boxes_of(class);
    let mut mask = BinaryMask::filled(dims);
    for b in &boxes {
        for y in b.pixel_rows(dims.height) {
            for x in b.pixel_cols(dims.width) {
                mask.set(x, y, false);
            }
        }
    }
    NegativeMask { class, mask }
}
