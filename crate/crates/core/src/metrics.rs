//! CDR post-processing and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pixel_center, BBox, BinaryMask, ClassId, ProbabilityMap};
use crate::regression::{decode_box, NormalizerConfig, RegressionField};

/// Suspect-glaucoma cutoff on the CDR.
pub const GLAUCOMA_THRESHOLD: f64 = 0.6;

/// Where to look for the most confident location of a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchScope {
    /// Whole map.
    #[default]
    Global,
    /// Only the locations selected for regression.
    Selected,
}

/// Location of the highest probability of `class` among `allowed` pixels
/// (all when `None`); smallest row-major index on ties.
pub fn argmax_location(
    p: &ProbabilityMap,
    class: ClassId,
    allowed: Option<&BinaryMask>,
) -> Option<(usize, usize)> {
    let dims = p.dims();
    let ch = p.channel(class);
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in ch.iter().enumerate() {
        if let Some(m) = allowed {
            if m.as_slice()[i] == 0 {
                continue;
            }
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| (i % dims.width, i / dims.width))
}

/// Box decoded at the location of highest probability for the class.
pub fn select_prediction(
    p: &ProbabilityMap,
    v: &RegressionField,
    class: ClassId,
    s: f64,
) -> Result<(BBox, (usize, usize))> {
    select_prediction_in(p, v, class, s, None)
}

/// As [`select_prediction`], restricted to the pixels of `allowed`.
pub fn select_prediction_in(
    p: &ProbabilityMap,
    v: &RegressionField,
    class: ClassId,
    s: f64,
    allowed: Option<&BinaryMask>,
) -> Result<(BBox, (usize, usize))> {
    if p.dims() != v.dims() || p.classes() != v.classes() {
        return Err(Error::ShapeMismatch("probability map and regression field differ".into()));
    }
    if class.0 == 0 || class.channel() >= p.classes() {
        return Err(Error::ShapeMismatch(format!("class {} out of range", class.0)));
    }
    let (x, y) = argmax_location(p, class, allowed)
        .ok_or(Error::EmptySelection)?;
    let b = decode_box(pixel_center(x, y), v.offsets(class, x, y), s)?;
    Ok((b, (x, y)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdrResult {
    pub box_oc: BBox,
    pub box_od: BBox,
    pub cdr: f64,
    pub oc_location: (usize, usize),
    pub od_location: (usize, usize),
}

/// Vertical cup diameter over vertical disc diameter.
pub fn cdr_from_boxes(oc: &BBox, od: &BBox) -> f64 {
    oc.height() / od.height()
}

/// Full post-processing: pick and decode one box per class, then take the ratio.
pub fn measure_cdr(
    p: &ProbabilityMap,
    v: &RegressionField,
    normalizers: &NormalizerConfig,
    allowed: Option<[&BinaryMask; 2]>,
) -> Result<CdrResult> {
    let (box_oc, oc_location) = select_prediction_in(
        p,
        v,
        ClassId::OC,
        normalizers.get(ClassId::OC),
        allowed.map(|a| a[0]),
    )?;
    let (box_od, od_location) = select_prediction_in(
        p,
        v,
        ClassId::OD,
        normalizers.get(ClassId::OD),
        allowed.map(|a| a[1]),
    )?;
    Ok(CdrResult {
        box_oc,
        box_od,
        cdr: cdr_from_boxes(&box_oc, &box_od),
        oc_location,
        od_location,
    })
}

pub fn cdr_error(pred: f64, truth: f64) -> f64 {
    (pred - truth).abs()
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        Err(Error::LengthMismatch { left: a, right: b })
    } else if a == 0 {
        Err(Error::EmptyInput)
    } else {
        Ok(())
    }
}

/// F1 of the `CDR >= threshold` decision; 0 when there are no positives at all.
pub fn f1_glaucoma(preds: &[f64], truths: &[f64], threshold: f64) -> Result<f64> {
    same_len(preds.len(), truths.len())?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in preds.iter().zip(truths) {
        match (p >= threshold, t >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

/// `2|A ∩ B| / (|A| + |B|)`, 1 when both are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch("dice of masks with different dims".into()));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    })
}

/// Mean absolute difference of vertical diameters, paired by index.
pub fn vertical_diameter_mad(preds: &[BBox], truths: &[BBox]) -> Result<f64> {
    same_len(preds.len(), truths.len())?;
    let sum: f64 = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (p.height() - t.height()).abs())
        .sum();
    Ok(sum / preds.len() as f64)
}

/// Grader-versus-grader table: `matrix[i][j]` scores grader `i` against grader
/// `j` as ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTable {
    pub matrix: Vec<Vec<f64>>,
    /// Mean of each row's off-diagonal entries.
    pub averages: Vec<f64>,
}

pub fn pairwise_table<T>(
    readings: &[Vec<T>],
    metric: impl Fn(&[T], &[T]) -> Result<f64>,
) -> Result<PairwiseTable> {
    let n = readings.len();
    if n < 2 {
        return Err(Error::Config(format!("pairwise table needs >= 2 graders, got {n}")));
    }
    let len = readings[0].len();
    if let Some(r) = readings.iter().find(|r| r.len() != len) {
        return Err(Error::LengthMismatch { left: len, right: r.len() });
    }
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            matrix[i][j] = metric(&readings[i], &readings[j])?;
        }
    }
    let averages = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| matrix[i][j]).sum::<f64>() / (n - 1) as f64)
        .collect();
    Ok(PairwiseTable { matrix, averages })
}

/// Per-sample evaluation row. The CDR fields are `None` when no box could be
/// decoded, e.g. with an empty selection or a zero field at the chosen location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub cdr_pred: Option<f64>,
    pub cdr_true: f64,
    pub cdr_error: Option<f64>,
    pub dice_oc: f64,
    pub dice_od: f64,
    pub box_oc: Option<BBox>,
    pub box_od: Option<BBox>,
    pub true_oc: BBox,
    pub true_od: BBox,
}

pub fn rows_to_csv(rows: &[SampleMetrics]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("sample_id,cdr_pred,cdr_true,cdr_error,dice_oc,dice_od\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id,
            opt(r.cdr_pred),
            r.cdr_true,
            opt(r.cdr_error),
            r.dice_oc,
            r.dice_od
        ));
    }
    out
}

/// Aggregate over a batch. CDR statistics cover the samples with a defined
/// prediction; `undefined_cdr` counts the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub undefined_cdr: usize,
    /// Mean absolute CDR error.
    pub cdr_error: Option<f64>,
    pub f1: Option<f64>,
    pub dice_oc: f64,
    pub dice_od: f64,
    /// Vertical-diameter MAD in pixels.
    pub mad_oc: Option<f64>,
    pub mad_od: Option<f64>,
}

impl MetricReport {
    pub fn from_rows(rows: &[SampleMetrics]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = rows.len() as f64;
        let defined: Vec<&SampleMetrics> = rows.iter().filter(|r| r.cdr_pred.is_some()).collect();
        let (mut cdr_error, mut f1, mut mad_oc, mut mad_od) = (None, None, None, None);
        if !defined.is_empty() {
            let preds: Vec<f64> = defined.iter().filter_map(|r| r.cdr_pred).collect();
            let truths: Vec<f64> = defined.iter().map(|r| r.cdr_true).collect();
            let boxes = |f: fn(&SampleMetrics) -> Option<BBox>| defined.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
            let truth = |f: fn(&SampleMetrics) -> BBox| defined.iter().map(|r| f(r)).collect::<Vec<_>>();
            cdr_error = Some(defined.iter().filter_map(|r| r.cdr_error).sum::<f64>() / defined.len() as f64);
            f1 = Some(f1_glaucoma(&preds, &truths, GLAUCOMA_THRESHOLD)?);
            mad_oc = Some(vertical_diameter_mad(&boxes(|r| r.box_oc), &truth(|r| r.true_oc))?);
            mad_od = Some(vertical_diameter_mad(&boxes(|r| r.box_od), &truth(|r| r.true_od))?);
        }
        Ok(MetricReport {
            samples: rows.len(),
            undefined_cdr: rows.len() - defined.len(),
            cdr_error,
            f1,
            dice_oc: rows.iter().map(|r| r.dice_oc).sum::<f64>() / n,
            dice_od: rows.iter().map(|r| r.dice_od).sum::<f64>() / n,
            mad_oc,
            mad_od,
        })
    }

    pub fn is_finite(&self) -> bool {
        let ok = |v: Option<f64>| v.is_none_or(f64::is_finite);
        self.dice_oc.is_finite()
            && self.dice_od.is_finite()
            && ok(self.cdr_error)
            && ok(self.f1)
            && ok(self.mad_oc)
            && ok(self.mad_od)
    }
}
