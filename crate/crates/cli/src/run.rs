//! Training runs and parameter sweeps.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use lau_core::config::ExperimentConfig;
use lau_core::train::{metrics_csv, train_with, write_checkpoint, EpochMetrics};

use crate::ppm;

/// Validation samples rendered after training.
const PREVIEW_SAMPLES: usize = 4;

/// Trains `cfg` and writes `config.json`, `metrics.csv` (rewritten after
/// every epoch), `checkpoint.bin` and prediction images into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path, verbose: bool) -> Result<EpochMetrics> {
    cfg.validate()?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    let (train_set, val_set) = cfg.datasets()?;
    let metrics_path = dir.join("metrics.csv");
    let mut write_err = None;
    let outcome = train_with(&cfg.train_config(), &train_set, &val_set, |rows| {
        if let Err(e) = fs::write(&metrics_path, metrics_csv(rows)) {
            write_err.get_or_insert(e);
        }
        if verbose {
            if let [.., t, v] = rows {
                eprintln!(
                    "epoch {:>3}  train loss {:.4}  val loss {:.4}  val pixacc {:.4}  val miou {:.4}",
                    v.epoch, t.loss, v.loss, v.pixacc, v.miou
                );
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics.csv");
    }
    fs::write(&metrics_path, metrics_csv(&outcome.metrics))?;

    let mut ckpt = BufWriter::new(fs::File::create(dir.join("checkpoint.bin"))?);
    write_checkpoint(&outcome.net, &mut ckpt)?;

    let preview = dir.join("predictions");
    fs::create_dir_all(&preview)?;
    for (i, s) in val_set.iter().take(PREVIEW_SAMPLES).enumerate() {
        let pred = outcome.net.predict(&s.features)?.argmax_channels();
        ppm::write(&preview.join(format!("val{i}_pred.ppm")), &pred)?;
        ppm::write(&preview.join(format!("val{i}_gt.ppm")), &s.labels)?;
    }
    outcome
        .final_val()
        .cloned()
        .context("training produced no validation metrics")
}

pub const SWEEP_HEADER: &str = "param,value,seed,final_miou,final_pixacc";
pub const SWEEP_ERRORS_HEADER: &str = "param,value,seed,error";

#[derive(Clone, Debug)]
struct Point {
    value: String,
    numeric: f64,
    seed: u64,
}

#[derive(Debug, Default)]
pub struct SweepSummary {
    pub rows: usize,
    pub errors: usize,
}

/// Worker threads for the sweep: `LAU_THREADS`, with 0 or unset meaning
/// sequential.
pub fn thread_budget() -> usize {
    std::env::var("LAU_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0)
        .max(1)
}

fn run_dir(out: &Path, param: &str, p: &Point) -> PathBuf {
    out.join(format!("{param}_{}_seed{}", p.value, p.seed))
}

/// Runs one training per (value, seed). Failed points are recorded in
/// `sweep_errors.csv` and do not stop the others.
pub fn sweep(
    base: &ExperimentConfig,
    param: &str,
    values: &[String],
    seeds: &[u64],
    out: &Path,
) -> Result<SweepSummary> {
    fs::create_dir_all(out)?;
    let mut points = Vec::new();
    for v in values {
        let value = v.trim().to_string();
        let numeric = value.parse::<f64>().unwrap_or(f64::NAN);
        for &seed in seeds {
            points.push(Point { value: value.clone(), numeric, seed });
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(Point, Result<EpochMetrics, String>)>> = Mutex::new(Vec::new());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(p) = points.get(i) else { break };
        let mut cfg = base.clone();
        cfg.seed = p.seed;
        let result = cfg
            .set_param(param, &p.value)
            .map_err(anyhow::Error::from)
            .and_then(|_| run_experiment(&cfg, &run_dir(out, param, p), false))
            .map_err(|e| format!("{e:#}"));
        match &result {
            Ok(m) => eprintln!("{param}={} seed={}: miou {:.4} pixacc {:.4}", p.value, p.seed, m.miou, m.pixacc),
            Err(e) => eprintln!("{param}={} seed={}: failed: {e}", p.value, p.seed),
        }
        results.lock().unwrap().push((p.clone(), result));
    };
    let threads = thread_budget().min(points.len().max(1));
    std::thread::scope(|s| {
        for _ in 1..threads {
            s.spawn(worker);
        }
        worker();
    });

    let mut results = results.into_inner().unwrap();
    results.sort_by(|(a, _), (b, _)| {
        a.numeric
            .total_cmp(&b.numeric)
            .then_with(|| a.value.cmp(&b.value))
            .then(a.seed.cmp(&b.seed))
    });
    let mut table = format!("{SWEEP_HEADER}\n");
    let mut errors = format!("{SWEEP_ERRORS_HEADER}\n");
    let mut summary = SweepSummary::default();
    for (p, r) in &results {
        match r {
            Ok(m) => {
                summary.rows += 1;
                table.push_str(&format!("{param},{},{},{:.10},{:.10}\n", p.value, p.seed, m.miou, m.pixacc));
            }
            Err(e) => {
                summary.errors += 1;
                let e = e.replace(['\n', ','], ";");
                errors.push_str(&format!("{param},{},{},{e}\n", p.value, p.seed));
            }
        }
    }
    fs::write(out.join("sweep.csv"), table)?;
    fs::write(out.join("sweep_errors.csv"), errors)?;
    Ok(summary)
}

