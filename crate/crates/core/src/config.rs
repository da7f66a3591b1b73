//! Run configuration shared by the CLI and the experiment pipeline.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SearchScope;
use crate::optimizer::{OptimizerConfig, RegressionConfig};
use crate::regression::{NormalizerConfig, SelectionConfig};
use crate::segloss::SegLossConfig;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionSettings {
    pub normalizers: NormalizerConfig,
    /// Expected-IoU selection threshold; `None` picks it from the smooth-max kind.
    pub threshold: Option<f64>,
    pub sigma: f64,
}

impl Default for RegressionSettings {
    fn default() -> Self {
        RegressionSettings {
            normalizers: NormalizerConfig::default(),
            threshold: None,
            sigma: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Where to look for the most confident location of each class.
    pub search: SearchScope,
    /// Probability threshold for the dice masks (strictly greater).
    pub dice_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            search: SearchScope::Selected,
            dice_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub seg: SegLossConfig,
    pub regression: RegressionSettings,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
    /// Worker threads for per-sample parallelism; `None` uses all cores.
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            Error::parse(path, format!("line {}, column {}", e.line(), e.column()), e.to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn selection(&self) -> SelectionConfig {
        match self.regression.threshold {
            Some(threshold) => SelectionConfig { threshold },
            None => SelectionConfig::for_smoothmax(self.seg.smoothmax.kind),
        }
    }

    pub fn regression_config(&self) -> RegressionConfig {
        RegressionConfig {
            normalizers: self.regression.normalizers.clone(),
            selection: self.selection(),
            sigma: self.regression.sigma,
        }
    }

    /// Copy with every `None` resolved, as echoed by the CLI.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.regression.threshold = Some(self.selection().threshold);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.seg.validate()?;
        self.optimizer.validate()?;
        self.regression.normalizers.validate(2)?;
        self.selection().validate()?;
        if !(self.regression.sigma > 0.0 && self.regression.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.regression.sigma)));
        }
        if !(0.0..1.0).contains(&self.eval.dice_threshold) {
            return Err(Error::Config(format!(
                "dice threshold must be in [0, 1), got {}",
                self.eval.dice_threshold
            )));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothmax::SmoothMaxKind;

    #[test]
    fn defaults_and_threshold_resolution() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.seg.lambda, 10.0);
        assert_eq!(cfg.seg.focal.beta, 0.25);
        assert_eq!(cfg.seg.focal.gamma, 2.0);
        assert_eq!(cfg.seg.smoothmax.alpha, 8.0);
        assert_eq!(cfg.regression.sigma, 6.0);
        assert_eq!(cfg.selection().threshold, 0.6);
        let mut q = cfg.clone();
        q.seg.smoothmax.kind = SmoothMaxKind::AlphaQuasimax;
        assert_eq!(q.selection().threshold, 0.5);
        q.regression.threshold = Some(0.7);
        assert_eq!(q.selection().threshold, 0.7);
        assert_eq!(cfg.resolved().regression.threshold, Some(0.6));
    }

    #[test]
    fn partial_json_and_errors() {
        let p = Path::new("run.json");
        let cfg = RunConfig::from_json(r#"{"seg": {"lambda": 2.5}, "regression": {"sigma": 3}}"#, p).unwrap();
        assert_eq!(cfg.seg.lambda, 2.5);
        assert_eq!(cfg.seg.smoothmax.alpha, 8.0);
        assert_eq!(cfg.regression.sigma, 3.0);
        let back = RunConfig::from_json(&cfg.to_json(), p).unwrap();
        assert_eq!(back, cfg);

        let e = RunConfig::from_json("{\n  \"bogus\": 1\n}", p).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let bad = RunConfig::from_json(r#"{"regression": {"threshold": 1.5}}"#, p).unwrap();
        assert!(bad.validate().is_err());
    }
}
