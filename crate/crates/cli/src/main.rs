use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lau_core::config::ExperimentConfig;
use lau_core::gradcheck::{report_csv, run_suite, GradcheckOptions};
use lau_core::samplers::{
    bilinear_upsample, corner_upsample, lau_forward, pixel_shuffle, Corner, OffsetField,
};
use lau_core::synth::gen_sample;
use lau_core::Tensor4;

mod ppm;
mod run;

#[derive(Parser)]
#[command(name = "lau", version, about = "Location-aware upsampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Step of the operator-level central differences.
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        /// Random configurations for the sampler check.
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Upsample a tensor and render argmax maps before and after.
    Demo {
        /// bilinear, lau, pixelshuffle or corner-{ff,cf,fc,cc}.
        #[arg(long, default_value = "bilinear")]
        upsampler: String,
        #[arg(long, default_value_t = 4)]
        ratio: usize,
        /// Tensor dump; a generated synthetic sample when absent.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Interleaved (dx, dy) offsets as a tensor dump; zero when absent.
        #[arg(long)]
        offsets: Option<PathBuf>,
        /// Seed of the generated sample.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for before.ppm and after.ppm.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Train one configuration per value of a parameter.
    Sweep {
        /// lambda or ratio.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seeds to repeat every value with; the config seed when absent.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_path(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn read_tensor(path: &Path) -> Result<Tensor4> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Tensor4::read_from(&mut BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn gradcheck(seed: u64, h: f64, cases: usize, out: &Path) -> Result<bool> {
    let opts = GradcheckOptions {
        seed,
        h,
        cases,
        ..Default::default()
    };
    let reports = run_suite(opts)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("gradcheck.csv"), report_csv(&reports))?;
    for r in &reports {
        println!(
            "{:<18} cases {:>4}  checked {:>7}  max rel err {:.3e}  failures {}",
            r.subject, r.cases, r.checked, r.max_rel_err, r.failures
        );
    }
    Ok(reports.iter().all(|r| r.passed()))
}

fn demo(
    upsampler: &str,
    ratio: usize,
    input: Option<&Path>,
    offsets: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let u = match input {
        Some(p) => read_tensor(p)?,
        None => gen_sample(seed, 0, ExperimentConfig::default().synth_spec())?.features,
    };
    if offsets.is_some() && upsampler != "lau" {
        bail!("--offsets only applies to --upsampler lau");
    }
    let v = match upsampler {
        "bilinear" => bilinear_upsample(&u, ratio)?,
        "lau" => {
            let [n, _, h, w] = u.shape();
            let off = match offsets {
                Some(p) => OffsetField::from_interleaved(&read_tensor(p)?)?,
                None => OffsetField::zeros(n, 1, ratio * h, ratio * w),
            };
            lau_forward(&u, &off, ratio)?
        }
        "pixelshuffle" => pixel_shuffle(&u, ratio)?,
        other => match other.strip_prefix("corner-").and_then(Corner::from_tag) {
            Some(corner) => corner_upsample(&u, ratio, corner)?,
            None => bail!("unknown upsampler `{other}`"),
        },
    };
    fs::create_dir_all(out)?;
    ppm::write(&out.join("before.ppm"), &u.argmax_channels())?;
    ppm::write(&out.join("after.ppm"), &v.argmax_channels())?;
    let [n, c, h, w] = v.shape();
    println!("{upsampler} ×{ratio}: {:?} -> [{n}, {c}, {h}, {w}]", u.shape());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gradcheck { seed, h, cases, out } => gradcheck(seed, h, cases, &out).inspect(|&ok| {
            if !ok {
                eprintln!("gradient check failed");
            }
        }),
        Command::Demo {
            upsampler,
            ratio,
            input,
            offsets,
            seed,
            out,
        } => demo(&upsampler, ratio, input.as_deref(), offsets.as_deref(), seed, &out).map(|_| true),
        Command::Train { config, out } => load_config(config.as_deref())
            .and_then(|cfg| run::run_experiment(&cfg, &out, true))
            .map(|m| {
                println!("final val miou {:.4} pixacc {:.4}", m.miou, m.pixacc);
                true
            }),
        Command::Sweep {
            param,
            values,
            config,
            seeds,
            out,
        } => load_config(config.as_deref()).and_then(|cfg| {
            if param != "lambda" && param != "ratio" {
                bail!("--param must be `lambda` or `ratio`, got `{param}`");
            }
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let summary = run::sweep(&cfg, &param, &values, &seeds, &out)?;
            println!("{} runs completed, {} failed", summary.rows, summary.errors);
            Ok(summary.errors == 0)
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
