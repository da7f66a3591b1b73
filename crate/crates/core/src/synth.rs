//! Synthetic fundus-like samples with exact ground truth.
//!
//! Each sample is a dark background with a bright axis-aligned optic-disc
//! ellipse and a brighter optic-cup ellipse inside it. The cup is a scaled copy
//! of the disc (scale = target CDR) shifted by at most `1 - scale` in the disc's
//! ellipse norm, which keeps it inside the disc. Masks come from pixel centers,
//! boxes from the masks, and noise is added to the image afterwards.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! dataset.json          {"format": "tightbox-synth", "version": 1, "count", "height", "width"}
//! annotations.jsonl     {"id", "boxes": [{"class": "oc"|"od", "xl", "yt", "xr", "yb"}], "cdr"}
//! images/<id>.pgm
//! masks/<id>_oc.pgm
//! masks/<id>_od.pgm
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mask_to_tight_box, BinaryMask, ClassId, Dims, LabeledBox, TightBoxLabel};
use crate::metrics::cdr_from_boxes;
use crate::pgm::{self, GrayImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Range of the disc's vertical diameter in pixels.
    pub od_height: (f64, f64),
    /// Range of the disc's width-to-height ratio.
    pub od_aspect: (f64, f64),
    pub cdr: (f64, f64),
    /// Maximum shift of the disc center from the image center, per axis.
    pub center_jitter: f64,
    /// Maximum cup-center offset as a fraction of the disc radius.
    pub oc_offset: f64,
    pub background: u8,
    pub od_level: u8,
    pub oc_level: u8,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 128,
            width: 128,
            od_height: (56.0, 84.0),
            od_aspect: (0.9, 1.1),
            cdr: (0.3, 0.9),
            center_jitter: 8.0,
            oc_offset: 0.15,
            background: 60,
            od_level: 150,
            oc_level: 220,
            noise_std: 8.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn dims(&self) -> Dims {
        Dims::new(self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if self.height == 0 || self.width == 0 {
            return bad("image dims must be positive".into());
        }
        if !range_ok(self.od_height) || self.od_height.0 <= 0.0 {
            return bad(format!("invalid disc height range {:?}", self.od_height));
        }
        if !range_ok(self.od_aspect) || self.od_aspect.0 <= 0.0 {
            return bad(format!("invalid disc aspect range {:?}", self.od_aspect));
        }
        if !range_ok(self.cdr) || self.cdr.0 <= 0.0 || self.cdr.1 >= 1.0 {
            return bad(format!("CDR range {:?} must lie in (0, 1)", self.cdr));
        }
        if self.center_jitter.is_nan() || self.center_jitter < 0.0 || !(0.0..1.0).contains(&self.oc_offset) {
            return bad("jitter must be >= 0 and cup offset in [0, 1)".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std must be >= 0, got {}", self.noise_std));
        }
        let max_h = self.od_height.1 + 2.0 * self.center_jitter;
        let max_w = self.od_height.1 * self.od_aspect.1 + 2.0 * self.center_jitter;
        if max_h > self.height as f64 || max_w > self.width as f64 {
            return bad(format!(
                "disc up to {max_w:.1}x{max_h:.1} px (with jitter) does not fit {}x{}",
                self.width, self.height
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    /// Cup and disc masks.
    pub masks: [BinaryMask; 2],
    pub label: TightBoxLabel,
    pub true_cdr: f64,
}

impl Sample {
    pub fn mask(&self, class: ClassId) -> &BinaryMask {
        &self.masks[class.channel()]
    }

    pub fn dims(&self) -> Dims {
        self.image.dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let u = (x - self.cx) / self.rx;
        let v = (y - self.cy) / self.ry;
        u * u + v * v <= 1.0
    }

    fn mask(&self, dims: Dims) -> BinaryMask {
        BinaryMask::from_fn(dims, |x, y| self.contains(x as f64 + 0.5, y as f64 + 0.5))
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Sample `index` of the dataset described by `cfg`; independent of every other index.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let dims = cfg.dims();

    let ry = uniform(&mut rng, cfg.od_height) / 2.0;
    let rx = ry * uniform(&mut rng, cfg.od_aspect);
    let j = (-cfg.center_jitter, cfg.center_jitter);
    let od = Ellipse {
        cx: cfg.width as f64 / 2.0 + uniform(&mut rng, j),
        cy: cfg.height as f64 / 2.0 + uniform(&mut rng, j),
        rx,
        ry,
    };
    let scale = uniform(&mut rng, cfg.cdr);
    let shift = uniform(&mut rng, (0.0, cfg.oc_offset.min(1.0 - scale)));
    let phi = uniform(&mut rng, (0.0, std::f64::consts::TAU));
    let oc = Ellipse {
        cx: od.cx + shift * od.rx * phi.cos(),
        cy: od.cy + shift * od.ry * phi.sin(),
        rx: od.rx * scale,
        ry: od.ry * scale,
    };

    let od_mask = od.mask(dims);
    let oc_mask = oc.mask(dims);
    let od_box = mask_to_tight_box(&od_mask)?;
    let oc_box = mask_to_tight_box(&oc_mask)?;
    let label = TightBoxLabel::cdr(oc_box, od_box)?;

    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("validated std");
    let pixels = (0..dims.area())
        .map(|i| {
            let base = if oc_mask.as_slice()[i] != 0 {
                cfg.oc_level
            } else if od_mask.as_slice()[i] != 0 {
                cfg.od_level
            } else {
                cfg.background
            } as f64;
            let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (base + n).round().clamp(0.0, 255.0) as u8
        })
        .collect();

    Ok(Sample {
        id: format!("{index:05}"),
        image: GrayImage::new(dims, pixels)?,
        masks: [oc_mask, od_mask],
        true_cdr: cdr_from_boxes(&oc_box, &od_box),
        label,
    })
}

pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..n)
        .into_par_iter()
        .map(|i| generate_sample(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        dims: cfg.dims(),
        samples,
    })
}

const FORMAT: &str = "tightbox-synth";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
    height: usize,
    width: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Annotation {
    id: String,
    boxes: Vec<LabeledBox>,
    cdr: f64,
}

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.pgm"))
}

fn mask_path(dir: &Path, id: &str, class: ClassId) -> PathBuf {
    dir.join("masks").join(format!("{id}_{class}.pgm"))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    mkdir(&dir.join("images"))?;
    mkdir(&dir.join("masks"))?;
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        count: dataset.samples.len(),
        height: dataset.dims.height,
        width: dataset.dims.width,
    };
    let hp = dir.join("dataset.json");
    fs::write(&hp, serde_json::to_string_pretty(&header)? + "\n").map_err(|e| Error::io(&hp, e))?;

    let mut lines = String::new();
    for s in &dataset.samples {
        let ann = Annotation {
            id: s.id.clone(),
            boxes: s.label.entries().to_vec(),
            cdr: s.true_cdr,
        };
        lines.push_str(&serde_json::to_string(&ann)?);
        lines.push('\n');
        pgm::write(&image_path(dir, &s.id), &s.image)?;
        for class in [ClassId::OC, ClassId::OD] {
            pgm::write(&mask_path(dir, &s.id, class), &GrayImage::from_mask(s.mask(class)))?;
        }
    }
    let ap = dir.join("annotations.jsonl");
    fs::write(&ap, lines).map_err(|e| Error::io(&ap, e))
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let hp = dir.join("dataset.json");
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| {
        Error::parse(&hp, format!("line {}, column {}", e.line(), e.column()), e.to_string())
    })?;
    if header.format != FORMAT {
        return Err(Error::parse(&hp, "line 1", format!("unknown format {:?}", header.format)));
    }
    let dims = Dims::new(header.height, header.width);

    let ap = dir.join("annotations.jsonl");
    let text = fs::read_to_string(&ap).map_err(|e| Error::io(&ap, e))?;
    let mut annotations = Vec::with_capacity(header.count);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ann: Annotation = serde_json::from_str(line).map_err(|e| {
            Error::parse(&ap, format!("line {}, column {}", i + 1, e.column()), e.to_string())
        })?;
        annotations.push((i + 1, ann));
    }
    if annotations.len() != header.count {
        return Err(Error::parse(
            &ap,
            format!("line {}", text.lines().count() + 1),
            format!(
                "expected {} annotation lines, found {}",
                header.count,
                annotations.len()
            ),
        ));
    }

    let samples = annotations
        .into_iter()
        .map(|(line, ann)| {
            let label = TightBoxLabel::new(2, ann.boxes)
                .map_err(|e| Error::parse(&ap, format!("line {line}"), e.to_string()))?;
            let image = pgm::read(&image_path(dir, &ann.id))?;
            let oc = pgm::read(&mask_path(dir, &ann.id, ClassId::OC))?.to_mask();
            let od = pgm::read(&mask_path(dir, &ann.id, ClassId::OD))?.to_mask();
            for (what, d) in [("image", image.dims), ("oc mask", oc.dims()), ("od mask", od.dims())] {
                if d != dims {
                    return Err(Error::ShapeMismatch(format!(
                        "{what} of sample {} is {}x{}, dataset is {}x{}",
                        ann.id, d.height, d.width, dims.height, dims.width
                    )));
                }
            }
            Ok(Sample {
                id: ann.id,
                image,
                masks: [oc, od],
                label,
                true_cdr: ann.cdr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { dims, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg, 20).unwrap();
        let b = generate(&cfg, 20).unwrap();
        assert_eq!(a, b);
        let other = generate(&SynthConfig { seed: 8, ..cfg }, 20).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn sample_invariants() {
        let cfg = SynthConfig::default();
        for s in generate(&cfg, 30).unwrap().samples {
            let (oc, od) = (s.mask(ClassId::OC), s.mask(ClassId::OD));
            assert!(oc.is_subset_of(od), "sample {}", s.id);
            assert_eq!(mask_to_tight_box(oc).unwrap(), s.label.first_of(ClassId::OC).unwrap());
            assert_eq!(mask_to_tight_box(od).unwrap(), s.label.first_of(ClassId::OD).unwrap());
            let h = s.label.first_of(ClassId::OD).unwrap().height();
            let tol = 2.0 / h;
            assert!(s.true_cdr >= cfg.cdr.0 - tol && s.true_cdr <= cfg.cdr.1 + tol);
        }
    }

    #[test]
    fn fixed_cdr() {
        let cfg = SynthConfig { cdr: (0.4, 0.4), ..Default::default() };
        for s in generate(&cfg, 20).unwrap().samples {
            let h = s.label.first_of(ClassId::OD).unwrap().height();
            assert!((s.true_cdr - 0.4).abs() <= 2.0 / h, "{} vs 0.4 (h = {h})", s.true_cdr);
        }
    }

    #[test]
    fn infeasible_geometry() {
        let cfg = SynthConfig { od_height: (100.0, 140.0), ..Default::default() };
        assert!(matches!(generate(&cfg, 1), Err(Error::Config(_))));
        assert!(generate(&SynthConfig { cdr: (0.2, 1.0), ..Default::default() }, 1).is_err());
    }

    #[test]
    fn save_load_roundtrip_and_format_errors() {
        let data = generate(&SynthConfig::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&data, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), data);

        let ann = dir.path().join("annotations.jsonl");
        let text = fs::read_to_string(&ann).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with(r#"{"id":"00000","boxes":[{"class":"oc","xl":"#), "{first}");

        // unknown fields are ignored
        let extended = text.replacen(r#"{"id":"00000","#, r#"{"grader":"a","id":"00000","#, 1);
        fs::write(&ann, &extended).unwrap();
        assert_eq!(load(dir.path()).unwrap(), data);

        let two: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        fs::write(&ann, two).unwrap();
        let e = load(dir.path()).unwrap_err().to_string();
        assert!(e.contains("expected 3 annotation lines, found 2"), "{e}");

        let broken = text.replacen(r#""cdr":"#, r#""cdr":oops"#, 2);
        fs::write(&ann, broken).unwrap();
        let e = load(dir.path()).unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
    }
}
