//! Runs the default 20-sample pipeline for each seed given on the command line
//! and prints the aggregate metrics under both search scopes.

use std::time::Instant;

use tightbox::config::RunConfig;
use tightbox::metrics::{MetricReport, SearchScope};
use tightbox::pipeline::{evaluate, run_batch};
use tightbox::synth::generate;

fn main() {
    let n = 20;
    for seed in std::env::args().skip(1).map(|s| s.parse::<u64>().expect("seed")) {
        let mut cfg = RunConfig::default();
        cfg.synth.seed = seed;
        let t = Instant::now();
        let data = generate(&cfg.synth, n).unwrap();
        let runs = run_batch(&data.samples, &cfg).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let decreased = runs.iter().all(|r| r.result.trace.last().total < r.result.trace.initial().total);
        let rows: Vec<_> = runs.iter().map(|r| r.metrics.clone()).collect();
        let sel = MetricReport::from_rows(&rows).unwrap();
        let mut global = cfg.clone();
        global.eval.search = SearchScope::Global;
        let grows: Vec<_> = data
            .samples
            .iter()
            .zip(&runs)
            .map(|(s, r)| evaluate(s, &r.result.probabilities, &r.result.field, &global).unwrap().0)
            .collect();
        let glob = MetricReport::from_rows(&grows).unwrap();
        let dice = (sel.dice_oc + sel.dice_od) / 2.0;
        println!(
            "seed={seed} time={secs:.1}s decreased={decreased} mean_dice={dice:.6} (oc {:.6}, od {:.6}) cdr_error[selected]={:?} undefined={} cdr_error[global]={:?} undefined={}",
            sel.dice_oc, sel.dice_od, sel.cdr_error, sel.undefined_cdr, glob.cdr_error, glob.undefined_cdr
        );
    }
}
