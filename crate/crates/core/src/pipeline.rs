//! Per-sample experiment: optimize, post-process and score.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{ClassId, ProbabilityMap};
use crate::metrics::{cdr_error, dice, measure_cdr, CdrResult, SampleMetrics, SearchScope};
use crate::optimizer::{optimize_image, OptimizationResult};
use crate::regression::{select_positives, RegressionField};
use crate::synth::Sample;

#[derive(Debug, Clone)]
pub struct SampleRun {
    pub metrics: SampleMetrics,
    pub cdr: Option<CdrResult>,
    pub result: OptimizationResult,
}

/// CDR measurement for an optimized sample, `None` when no box can be decoded.
pub fn measure(
    sample: &Sample,
    p: &ProbabilityMap,
    field: &RegressionField,
    cfg: &RunConfig,
) -> Result<Option<CdrResult>> {
    let reg = cfg.regression_config();
    let dims = sample.dims();
    let measured = match cfg.eval.search {
        SearchScope::Global => measure_cdr(p, field, &reg.normalizers, None),
        SearchScope::Selected => {
            let t = reg.selection.threshold;
            let oc = select_positives(&sample.label, ClassId::OC, t, dims);
            let od = select_positives(&sample.label, ClassId::OD, t, dims);
            measure_cdr(p, field, &reg.normalizers, Some([&oc, &od]))
        }
    };
    match measured {
        Ok(c) => Ok(Some(c)),
        Err(Error::EmptySelection | Error::DegenerateBox { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Score one sample's probability map and regression field.
pub fn evaluate(
    sample: &Sample,
    p: &ProbabilityMap,
    field: &RegressionField,
    cfg: &RunConfig,
) -> Result<(SampleMetrics, Option<CdrResult>)> {
    let cdr = measure(sample, p, field, cfg)?;
    let t = cfg.eval.dice_threshold;
    let true_box = |c| sample.label.first_of(c).ok_or_else(|| Error::Config(format!("sample {} lacks class {c}", sample.id)));
    let metrics = SampleMetrics {
        id: sample.id.clone(),
        cdr_pred: cdr.map(|c| c.cdr),
        cdr_true: sample.true_cdr,
        cdr_error: cdr.map(|c| cdr_error(c.cdr, sample.true_cdr)),
        dice_oc: dice(&p.threshold(ClassId::OC, t), sample.mask(ClassId::OC))?,
        dice_od: dice(&p.threshold(ClassId::OD, t), sample.mask(ClassId::OD))?,
        box_oc: cdr.map(|c| c.box_oc),
        box_od: cdr.map(|c| c.box_od),
        true_oc: true_box(ClassId::OC)?,
        true_od: true_box(ClassId::OD)?,
    };
    Ok((metrics, cdr))
}

pub fn run_sample(sample: &Sample, cfg: &RunConfig) -> Result<SampleRun> {
    let result = optimize_image(
        &sample.label,
        sample.dims(),
        &cfg.seg,
        &cfg.regression_config(),
        &cfg.optimizer,
    )?;
    let (metrics, cdr) = evaluate(sample, &result.probabilities, &result.field, cfg)?;
    Ok(SampleRun { metrics, cdr, result })
}

/// Run every sample, in parallel across `cfg.workers` threads; output order
/// follows the input.
pub fn run_batch(samples: &[Sample], cfg: &RunConfig) -> Result<Vec<SampleRun>> {
    cfg.validate()?;
    let work = || samples.par_iter().map(|s| run_sample(s, cfg)).collect::<Result<Vec<_>>>();
    match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}
