//! Direct optimization of one image's predictions.
//!
//! Rather than training a network, gradient descent with momentum runs on the
//! per-pixel logit map and the regression field themselves, minimizing
//! `L = L_seg + reg_weight · L_reg` for a single tight-box label.
//!
//! The regression loss averages over selected locations, so a raw gradient
//! step shrinks as more locations are selected. Regression updates are
//! therefore scaled by `C · M_c`, which makes `reg_learning_rate` a step size
//! per selected location.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ClassId, Dims, LogitMap, Planes, ProbabilityMap, TightBoxLabel};
use crate::regression::{NormalizerConfig, RegressionField, RegressionProblem, SelectionConfig};
use crate::segloss::{SegLossConfig, SegProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_steps: usize,
    /// Step size for the logits.
    pub learning_rate: f64,
    /// Step size per selected regression location.
    pub reg_learning_rate: f64,
    pub momentum: f64,
    /// Stop when the relative loss change stays below this...
    pub stop_tolerance: f64,
    /// ...for this many consecutive steps.
    pub stop_patience: usize,
    /// Initial logit; 0 gives `p = 0.5`.
    pub logit_init: f64,
    /// Standard deviation of Gaussian noise added to the initial logits.
    pub init_noise: f64,
    /// Weight of the regression loss in the total.
    pub reg_weight: f64,
    /// Backtracking line search; makes the loss monotone non-increasing.
    pub line_search: bool,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_steps: 2000,
            learning_rate: 500.0,
            reg_learning_rate: 0.02,
            momentum: 0.9,
            stop_tolerance: 1e-9,
            stop_patience: 50,
            logit_init: 0.0,
            init_noise: 0.0,
            reg_weight: 1.0,
            line_search: false,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.reg_learning_rate > 0.0 && self.reg_learning_rate.is_finite()) {
            return bad(format!("reg_learning_rate must be > 0, got {}", self.reg_learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.stop_tolerance.is_nan() || self.stop_tolerance < 0.0 {
            return bad(format!("stop_tolerance must be >= 0, got {}", self.stop_tolerance));
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return bad(format!("init_noise must be >= 0, got {}", self.init_noise));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return bad(format!("reg_weight must be >= 0, got {}", self.reg_weight));
        }
        if !self.logit_init.is_finite() {
            return bad("logit_init must be finite".into());
        }
        Ok(())
    }
}

/// Regression settings shared by the optimizer and the evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub normalizers: NormalizerConfig,
    pub selection: SelectionConfig,
    pub sigma: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            normalizers: NormalizerConfig::default(),
            selection: SelectionConfig { threshold: 0.6 },
            sigma: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub seg: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxSteps,
    Converged,
    LineSearchStalled,
    NonFinite,
}

/// Loss history; row `k` holds the loss after `k` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub rows: Vec<TraceRow>,
    pub steps: usize,
    pub stop_reason: StopReason,
}

impl OptimizationTrace {
    pub fn initial(&self) -> &TraceRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("trace has the initial row")
    }

    /// `step,L,L_seg,L_reg` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,L,L_seg,L_reg\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.total, r.seg, r.reg));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    pub logits: LogitMap,
    pub probabilities: ProbabilityMap,
    pub field: RegressionField,
    pub trace: OptimizationTrace,
}

struct Objective {
    seg: SegProblem,
    reg: RegressionProblem,
    reg_weight: f64,
    /// Per-class regression step scale `C · M_c`.
    reg_scale: Vec<f64>,
    dims: Dims,
    classes: usize,
}

struct Eval {
    seg: f64,
    reg: f64,
}

impl Eval {
    fn total(&self, reg_weight: f64) -> f64 {
        self.seg + reg_weight * self.reg
    }
}

impl Objective {
    fn eval(
        &self,
        z: &LogitMap,
        v: &RegressionField,
        gz: &mut Planes,
        gv: &mut RegressionField,
    ) -> Result<Eval> {
        let p = z.probabilities();
        let (seg, _) = self.seg.evaluate_into(&p, gz)?;
        let reg = self.reg.evaluate_into(v, gv)?;
        Ok(Eval { seg, reg })
    }

    fn value(&self, z: &LogitMap, v: &RegressionField) -> Result<Eval> {
        let mut gz = Planes::filled(self.classes, self.dims, 0.0);
        let mut gv = RegressionField::zeros(self.classes, self.dims);
        self.eval(z, v, &mut gz, &mut gv)
    }

    /// Regression gradient in per-location units.
    fn scale_reg_grad(&self, gv: &mut RegressionField) {
        let block = 4 * self.dims.area();
        for (c, chunk) in gv.as_mut_slice().chunks_mut(block).enumerate() {
            let s = self.reg_scale[c] * self.reg_weight;
            chunk.iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Minimize the joint loss over the logit map and the selected entries of the
/// regression field.
pub fn optimize_image(
    label: &TightBoxLabel,
    dims: Dims,
    seg_cfg: &SegLossConfig,
    reg_cfg: &RegressionConfig,
    opt: &OptimizerConfig,
) -> Result<OptimizationResult> {
    opt.validate()?;
    let classes = label.num_classes();
    let mut z = LogitMap::filled(classes, dims, opt.logit_init);
    if opt.init_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
        let normal = Normal::new(0.0, opt.init_noise).expect("validated std");
        z.0.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v += normal.sample(&mut rng));
    }
    let v = RegressionField::zeros(classes, dims);
    optimize_from(label, seg_cfg, reg_cfg, opt, z, v)
}

/// As [`optimize_image`], starting from the given logits and regression field.
pub fn optimize_from(
    label: &TightBoxLabel,
    seg_cfg: &SegLossConfig,
    reg_cfg: &RegressionConfig,
    opt: &OptimizerConfig,
    mut z: LogitMap,
    mut v: RegressionField,
) -> Result<OptimizationResult> {
    opt.validate()?;
    if label.is_empty() {
        return Err(Error::Config("label has no boxes".into()));
    }
    let classes = label.num_classes();
    let dims = z.0.dims();
    if z.0.classes() != classes || v.classes() != classes || v.dims() != dims {
        return Err(Error::ShapeMismatch("initial maps do not match the label".into()));
    }
    let seg = SegProblem::new(label, dims, seg_cfg)?;
    let reg = RegressionProblem::new(label, dims, &reg_cfg.normalizers, &reg_cfg.selection, reg_cfg.sigma)?;
    let reg_scale = (0..classes)
        .map(|c| (classes * reg.samples(ClassId::from_channel(c)).len()) as f64)
        .collect();
    let obj = Objective {
        seg,
        reg,
        reg_weight: opt.reg_weight,
        reg_scale,
        dims,
        classes,
    };

    let mut gz = Planes::filled(classes, dims, 0.0);
    let mut gv = RegressionField::zeros(classes, dims);
    let mut vel_z = vec![0.0; gz.as_slice().len()];
    let mut vel_v = vec![0.0; gv.as_slice().len()];

    let mut rows = Vec::with_capacity(opt.max_steps + 1);
    let mut current = obj.eval(&z, &v, &mut gz, &mut gv)?;
    let mut total = current.total(opt.reg_weight);
    rows.push(TraceRow { step: 0, total, seg: current.seg, reg: current.reg });
    let non_finite = |rows: Vec<TraceRow>, step: usize| Error::NonFiniteLoss {
        step,
        trace: Box::new(OptimizationTrace {
            steps: step,
            rows,
            stop_reason: StopReason::NonFinite,
        }),
    };
    if !total.is_finite() {
        return Err(non_finite(rows, 0));
    }

    let mut quiet = 0usize;
    let mut stop_reason = StopReason::MaxSteps;
    let mut steps = 0usize;

    for step in 1..=opt.max_steps {
        obj.scale_reg_grad(&mut gv);

        let accepted = if opt.line_search {
            match backtrack(&obj, opt, &z, &v, &gz, &gv, &mut vel_z, &mut vel_v, total)? {
                Some((nz, nv)) => {
                    z = nz;
                    v = nv;
                    true
                }
                None => false,
            }
        } else {
            momentum_update(&mut vel_z, gz.as_slice(), opt.momentum, opt.learning_rate);
            momentum_update(&mut vel_v, gv.as_slice(), opt.momentum, opt.reg_learning_rate);
            add_assign(z.0.as_mut_slice(), &vel_z);
            add_assign(v.as_mut_slice(), &vel_v);
            true
        };
        if !accepted {
            stop_reason = StopReason::LineSearchStalled;
            break;
        }

        let prev = total;
        current = match obj.eval(&z, &v, &mut gz, &mut gv) {
            Ok(e) => e,
            Err(Error::NonFiniteInput { .. }) => {
                let nan = f64::NAN;
                rows.push(TraceRow { step, total: nan, seg: nan, reg: nan });
                return Err(non_finite(rows, step));
            }
            Err(e) => return Err(e),
        };
        total = current.total(opt.reg_weight);
        rows.push(TraceRow { step, total, seg: current.seg, reg: current.reg });
        steps = step;
        if !total.is_finite() {
            return Err(non_finite(rows, step));
        }

        let rel = (prev - total).abs() / prev.abs().max(1e-300);
        if rel < opt.stop_tolerance {
            quiet += 1;
            if quiet >= opt.stop_patience {
                stop_reason = StopReason::Converged;
                break;
            }
        } else {
            quiet = 0;
        }
    }

    Ok(OptimizationResult {
        probabilities: z.probabilities(),
        logits: z,
        field: v,
        trace: OptimizationTrace {
            rows,
            steps,
            stop_reason,
        },
    })
}

fn momentum_update(vel: &mut [f64], grad: &[f64], momentum: f64, lr: f64) {
    for (u, g) in vel.iter_mut().zip(grad) {
        *u = momentum * *u - lr * g;
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const MAX_HALVINGS: usize = 40;

/// Try the momentum step, then plain gradient steps of halving size, accepting
/// the first that does not increase the loss.
#[allow(clippy::too_many_arguments)]
fn backtrack(
    obj: &Objective,
    opt: &OptimizerConfig,
    z: &LogitMap,
    v: &RegressionField,
    gz: &Planes,
    gv: &RegressionField,
    vel_z: &mut [f64],
    vel_v: &mut [f64],
    current: f64,
) -> Result<Option<(LogitMap, RegressionField)>> {
    let trial = |dz: &[f64], dv: &[f64]| -> Result<(f64, LogitMap, RegressionField)> {
        let mut tz = z.clone();
        let mut tv = v.clone();
        add_assign(tz.0.as_mut_slice(), dz);
        add_assign(tv.as_mut_slice(), dv);
        let e = obj.value(&tz, &tv)?;
        Ok((e.total(opt.reg_weight), tz, tv))
    };

    let mut mz = vel_z.to_vec();
    let mut mv = vel_v.to_vec();
    momentum_update(&mut mz, gz.as_slice(), opt.momentum, opt.learning_rate);
    momentum_update(&mut mv, gv.as_slice(), opt.momentum, opt.reg_learning_rate);
    let (l, tz, tv) = trial(&mz, &mv)?;
    if l <= current {
        vel_z.copy_from_slice(&mz);
        vel_v.copy_from_slice(&mv);
        return Ok(Some((tz, tv)));
    }

    let mut scale = 1.0;
    for _ in 0..MAX_HALVINGS {
        let dz: Vec<f64> = gz.as_slice().iter().map(|g| -scale * opt.learning_rate * g).collect();
        let dv: Vec<f64> = gv.as_slice().iter().map(|g| -scale * opt.reg_learning_rate * g).collect();
        let (l, tz, tv) = trial(&dz, &dv)?;
        if l <= current {
            vel_z.copy_from_slice(&dz);
            vel_v.copy_from_slice(&dv);
            return Ok(Some((tz, tv)));
        }
        scale *= 0.5;
    }
    vel_z.iter_mut().for_each(|u| *u = 0.0);
    vel_v.iter_mut().for_each(|u| *u = 0.0);
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, LabeledBox};
    use crate::smoothmax::SmoothMaxConfig;

    fn single_box() -> (TightBoxLabel, Dims) {
        let b = BBox::new(9.0, 8.0, 21.0, 22.0).unwrap();
        let label = TightBoxLabel::new(1, vec![LabeledBox { class: ClassId(1), bbox: b }]).unwrap();
        (label, Dims::new(32, 32))
    }

    fn cdr_label() -> (TightBoxLabel, Dims) {
        let oc = BBox::new(14.0, 13.0, 22.0, 23.0).unwrap();
        let od = BBox::new(9.0, 8.0, 27.0, 28.0).unwrap();
        (TightBoxLabel::cdr(oc, od).unwrap(), Dims::new(36, 36))
    }

    fn quick(max_steps: usize) -> OptimizerConfig {
        OptimizerConfig { max_steps, ..Default::default() }
    }

    #[test]
    fn loss_decreases() {
        let (label, dims) = cdr_label();
        let r = optimize_image(&label, dims, &SegLossConfig::default(), &RegressionConfig::default(), &quick(300))
            .unwrap();
        assert!(r.trace.last().total < 0.1 * r.trace.initial().total);
        assert_eq!(r.trace.rows.len(), r.trace.steps + 1);
        assert!(r.trace.last().reg <= 1e-6, "L_reg = {}", r.trace.last().reg);
    }

    #[test]
    fn field_at_targets_keeps_regression_loss_zero() {
        let (label, dims) = cdr_label();
        let reg = RegressionConfig::default();
        let v = RegressionField::from_targets(&label, dims, &reg.normalizers);
        let z = LogitMap::filled(2, dims, 0.0);
        let r = optimize_from(&label, &SegLossConfig::default(), &reg, &quick(50), z, v.clone()).unwrap();
        assert!(r.trace.rows.iter().all(|row| row.reg == 0.0));
        assert_eq!(r.field, v);
    }

    #[test]
    fn hard_max_unary_saturates() {
        let (label, dims) = single_box();
        let seg = SegLossConfig {
            lambda: 0.0,
            smoothmax: SmoothMaxConfig::hard(),
            ..Default::default()
        };
        let r = optimize_image(&label, dims, &seg, &RegressionConfig::default(), &OptimizerConfig::default()).unwrap();
        let p = &r.probabilities;
        let problem = SegProblem::new(&label, dims, &seg).unwrap();
        let class = ClassId(1);
        for bag in problem.positive_bags(class) {
            let best = bag.pixels.iter().map(|&(x, y)| p.get(class, x, y)).fold(0.0, f64::max);
            assert!(best >= 0.99, "bag at {} deg peaks at {best}", bag.angle);
        }
        let neg = problem.negative_mask(class);
        for (x, y) in neg.mask.foreground() {
            assert!(p.get(class, x, y) <= 0.01, "negative ({x}, {y}) at {}", p.get(class, x, y));
        }
    }

    #[test]
    fn deterministic_traces() {
        let (label, dims) = cdr_label();
        let opt = OptimizerConfig { init_noise: 0.3, seed: 5, ..quick(60) };
        let run = || optimize_image(&label, dims, &SegLossConfig::default(), &RegressionConfig::default(), &opt).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.logits, b.logits);
        let c = optimize_image(
            &label,
            dims,
            &SegLossConfig::default(),
            &RegressionConfig::default(),
            &OptimizerConfig { seed: 6, ..opt },
        )
        .unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn line_search_is_monotone() {
        let (label, dims) = cdr_label();
        for seed in 0..10 {
            let opt = OptimizerConfig {
                line_search: true,
                learning_rate: 1e5,
                init_noise: 1.0,
                seed,
                ..quick(40)
            };
            let r = optimize_image(&label, dims, &SegLossConfig::default(), &RegressionConfig::default(), &opt)
                .unwrap();
            for w in r.trace.rows.windows(2) {
                assert!(w[1].total <= w[0].total, "seed {seed}: {} -> {}", w[0].total, w[1].total);
            }
            assert!(r.trace.last().total < r.trace.initial().total);
        }
    }

    #[test]
    fn early_stop_and_non_finite() {
        let (label, dims) = cdr_label();
        let opt = OptimizerConfig { stop_tolerance: 1.0, stop_patience: 3, ..quick(500) };
        let r = optimize_image(&label, dims, &SegLossConfig::default(), &RegressionConfig::default(), &opt).unwrap();
        assert_eq!(r.trace.stop_reason, StopReason::Converged);
        assert_eq!(r.trace.steps, 3);

        let seg = SegLossConfig { lambda: 1e308, ..Default::default() };
        let init = LogitMap(Planes::from_vec(2, dims, (0..2 * dims.area()).map(|i| (i % 7) as f64).collect()).unwrap());
        let e = optimize_from(&label, &seg, &RegressionConfig::default(), &quick(5), init, RegressionField::zeros(2, dims))
            .unwrap_err();
        match e {
            Error::NonFiniteLoss { trace, .. } => assert_eq!(trace.stop_reason, StopReason::NonFinite),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig { max_steps: 0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        let csv = OptimizationTrace {
            rows: vec![TraceRow { step: 0, total: 1.5, seg: 1.0, reg: 0.5 }],
            steps: 0,
            stop_reason: StopReason::MaxSteps,
        }
        .to_csv();
        assert_eq!(csv, "step,L,L_seg,L_reg\n0,1.5,1,0.5\n");
    }
}
