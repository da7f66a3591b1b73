use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tightbox::config::RunConfig;
use tightbox::geometry::{ClassId, Dims, LogitMap, Planes, ProbabilityMap};
use tightbox::gradcheck::{self, GradCheckConfig};
use tightbox::metrics::{rows_to_csv, MetricReport, SampleMetrics};
use tightbox::optimizer::OptimizationResult;
use tightbox::pgm::{self, GrayImage};
use tightbox::pipeline::{evaluate, run_batch};
use tightbox::regression::{eiou, RegressionField};
use tightbox::synth::{self, Dataset};
use tightbox::{oracle, Error, Result};

#[derive(Parser)]
#[command(name = "tightbox", version, about = "Tight-box supervised CDR experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the dataset seed (and the optimizer init seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "tightbox-out")]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into OUT.
    Gen {
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
    },
    /// Optimize every sample of a dataset; writes maps, fields and traces into OUT.
    Optimize {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score optimized results against a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Output directory of a previous `optimize` run.
        #[arg(long)]
        results: PathBuf,
    },
    /// Compare the closed-form expected IoU with the grid oracle.
    Eiou {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = oracle::DEFAULT_GRID)]
        grid: usize,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Generate, optimize and evaluate in one go.
    Demo {
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            // a bad configuration is a usage error like a bad flag
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.synth.seed = seed;
        cfg.optimizer.seed = seed;
    }
    if c.workers.is_some() {
        cfg.workers = c.workers;
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, contents).map_err(|e| Error::io(p, e))
}

fn write_json(p: &Path, v: &impl Serialize) -> Result<()> {
    write(p, serde_json::to_string_pretty(v)? + "\n")
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    mkdir(out)?;
    write(&out.join("config.json"), cfg.to_json() + "\n")?;
    eprintln!("config: {}", serde_json::to_string(&cfg)?);

    match cli.command {
        Command::Gen { n } => {
            let data = synth::generate(&cfg.synth, n as usize)?;
            synth::save(&data, out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Optimize { data } => {
            let data = synth::load(&data)?;
            optimize(&data, &cfg, out)?;
        }
        Command::Eval { data, results } => {
            let data = synth::load(&data)?;
            let rows = data
                .samples
                .iter()
                .map(|s| {
                    let (p, field) = read_state(&results, &s.id, data.dims)?;
                    Ok(evaluate(s, &p, &field, &cfg)?.0)
                })
                .collect::<Result<Vec<_>>>()?;
            report(&rows, out)?;
        }
        Command::Eiou { n, grid } => {
            let mut csv = String::from("r1,r2,eiou,oracle,abs_diff\n");
            let mut worst = 0.0f64;
            for (r1, r2) in oracle::sample_positions(cfg.synth.seed, n) {
                let e = eiou(r1, r2)?;
                let o = oracle::eiou_grid(r1, r2, grid);
                worst = worst.max((e - o).abs());
                csv.push_str(&format!("{r1},{r2},{e},{o},{}\n", (e - o).abs()));
            }
            write(&out.join("eiou.csv"), csv)?;
            println!("{n} cases, max |eiou - oracle| = {worst:.3e}");
        }
        Command::Gradcheck { tol, instances } => {
            let mut gc = GradCheckConfig::default();
            if let Some(t) = tol {
                gc.tol = t;
            }
            if let Some(n) = instances {
                gc.instances = n;
            }
            let reports = gradcheck::run_all(&gc);
            for r in &reports {
                println!(
                    "{:<16} {} instances  max rel err {:.3e}  {}",
                    r.name,
                    r.instances,
                    r.max_rel_error,
                    if r.passed { "ok" } else { "FAILED" }
                );
            }
            write_json(&out.join("gradcheck.json"), &reports)?;
            if reports.iter().any(|r| !r.passed) {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Demo { n } => {
            let data = synth::generate(&cfg.synth, n as usize)?;
            let data_dir = out.join("data");
            synth::save(&data, &data_dir)?;
            let rows = optimize(&data, &cfg, out)?;
            report(&rows, out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn optimize(data: &Dataset, cfg: &RunConfig, out: &Path) -> Result<Vec<SampleMetrics>> {
    for sub in ["maps", "traces", "state"] {
        mkdir(&out.join(sub))?;
    }
    let runs = run_batch(&data.samples, cfg)?;
    for r in &runs {
        let id = &r.metrics.id;
        for class in [ClassId::OC, ClassId::OD] {
            let img = GrayImage::from_probabilities(&r.result.probabilities, class);
            pgm::write(&out.join("maps").join(format!("{id}_{class}.pgm")), &img)?;
        }
        write(&out.join("traces").join(format!("{id}.csv")), r.result.trace.to_csv())?;
        write_state(out, id, &r.result)?;
        let t = &r.result.trace;
        println!(
            "{id}: {} steps ({:?}), L {:.5} -> {:.5}",
            t.steps,
            t.stop_reason,
            t.initial().total,
            t.last().total
        );
    }
    Ok(runs.into_iter().map(|r| r.metrics).collect())
}

fn report(rows: &[SampleMetrics], out: &Path) -> Result<()> {
    write(&out.join("metrics.csv"), rows_to_csv(rows))?;
    let summary = MetricReport::from_rows(rows)?;
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// Logits followed by the regression field, little-endian f64.
fn state_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("state").join(format!("{id}.f64"))
}

fn write_state(dir: &Path, id: &str, r: &OptimizationResult) -> Result<()> {
    let values = r.logits.0.as_slice().iter().chain(r.field.as_slice());
    let bytes: Vec<u8> = values.flat_map(|v| v.to_le_bytes()).collect();
    write(&state_path(dir, id), bytes)
}

fn read_state(dir: &Path, id: &str, dims: Dims) -> Result<(ProbabilityMap, RegressionField)> {
    let p = state_path(dir, id);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let classes = 2;
    let nz = classes * dims.area();
    let nv = 4 * nz;
    if bytes.len() != 8 * (nz + nv) {
        return Err(Error::parse(
            &p,
            format!("byte {}", bytes.len()),
            format!("expected {} bytes", 8 * (nz + nv)),
        ));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let logits = LogitMap(Planes::from_vec(classes, dims, values.by_ref().take(nz).collect())?);
    let field = RegressionField::from_vec(classes, dims, values.collect())?;
    Ok((logits.probabilities(), field))
}
