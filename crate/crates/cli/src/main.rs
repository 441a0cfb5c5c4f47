//! Command-line driver: single runs, parameter sweeps, and the built-in
//! verification suite.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use msd_core::config::{apply_override, RunConfig};
use msd_core::io::{atomic_write, png_bytes, raw_bytes, traces_jsonl};
use msd_core::metrics::{
    config_digest, cross_scale_consistency, layout_coherence, seam_energy, MetricReport,
};
use msd_core::sampling::SampleOutput;
use msd_core::{ConditionId, Error, Sampler};

#[derive(Parser)]
#[command(
    name = "msd",
    version,
    about = "Multi-scale diffusion panorama sampler"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one generation: writes the rendered image, a lossless raw dump,
    /// and per-step traces.
    Generate {
        /// JSON configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path overrides, e.g. --override guidance.omega=0.
        /// Flags win over file values.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the generator across a parameter sweep and write a long-format
    /// CSV of per-run metrics.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Swept parameter.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated parameter values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Seeds per value (seeds are config.seed, config.seed+1, …).
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Worker-pool size; defaults to the core count.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the built-in verification checks and print a pass/fail table.
    Verify {
        /// Test hook: perturb merge weights so the merge-argmin check fails.
        #[arg(long, hide = true)]
        corrupt_merge: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    Omega,
    TauFraction,
}

impl SweepParam {
    fn key(self) -> &'static str {
        match self {
            SweepParam::Omega => "omega",
            SweepParam::TauFraction => "tau_fraction",
        }
    }

    fn config_path(self) -> &'static str {
        match self {
            SweepParam::Omega => "guidance.omega",
            SweepParam::TauFraction => "guidance.tau_fraction",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Generate { config, overrides } => cmd_generate(&config, &overrides),
        Command::Sweep {
            config,
            param,
            values,
            seeds,
            out,
            jobs,
            overrides,
        } => cmd_sweep(&config, param, &values, seeds, &out, jobs, &overrides),
        Command::Verify { corrupt_merge } => cmd_verify(corrupt_merge),
    };
    match code {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let config = RunConfig::from_value(value)?;
    config.validate()?;
    Ok(config)
}

struct PreparedRun {
    config: RunConfig,
    output: SampleOutput,
    window_counts: Vec<usize>,
}

struct PreparedRunInputs {
    templates: Vec<msd_core::LatentImage>,
}

fn execute(config: RunConfig) -> Result<(PreparedRun, PreparedRunInputs), Error> {
    let pyramid = config.pyramid_config()?;
    let schedule = config.noise_schedule()?;
    let (denoiser, templates) = config.build_denoiser(&schedule)?;
    let sampler = Sampler::new(
        &pyramid,
        &schedule,
        &config.guidance,
        config.weight_matrix()?,
        &denoiser,
        ConditionId(config.condition),
        config.pyramid.channels,
        config.window.height,
        config.window.width,
        config.window.stride,
        config.window.allow_boundary_windows,
        config.renormalize_downsampled,
    )?;
    let window_counts: Vec<usize> = sampler.grids().iter().map(|g| g.len()).collect();
    let output = sampler.sample(config.seed)?;
    Ok((
        PreparedRun {
            config,
            output,
            window_counts,
        },
        PreparedRunInputs { templates },
    ))
}

/// Per-run metric values in a fixed order.
fn run_metrics(run: &PreparedRun) -> Result<Vec<(String, f64, usize)>, Error> {
    let config = &run.config;
    let pyramid = config.pyramid_config()?;
    let final_canvas = run.output.final_canvas();
    let (level_h, level_w) = pyramid.level_size(pyramid.levels());
    let grid = msd_core::tiling::build_grid(
        level_h,
        level_w,
        config.window.height,
        config.window.width,
        config.window.stride,
        pyramid.levels(),
    )?;
    let mut rows = Vec::new();
    rows.push((
        "seam_energy".to_string(),
        seam_energy(final_canvas, &grid),
        1,
    ));
    if pyramid.levels() > 1 {
        let factors = vec![pyramid.factor(); pyramid.levels() - 1];
        let value = cross_scale_consistency(final_canvas, &run.output.canvases[0], &factors);
        rows.push(("cross_scale_consistency".to_string(), value, 1));
    }
    if let Some((sky, ground)) = config.horizon_scene() {
        let outcome = layout_coherence(final_canvas, sky, ground);
        rows.push((
            "layout_coherence".to_string(),
            outcome.variance,
            outcome.columns_used,
        ));
    }
    let invocations: usize = run
        .output
        .traces
        .iter()
        .map(|t| t.guidance_invocations)
        .sum();
    rows.push(("guidance_invocations".to_string(), invocations as f64, 1));
    Ok(rows)
}

fn cmd_generate(config_path: &Path, overrides: &[String]) -> Result<(), Error> {
    let config = load_config(config_path, overrides)?;
    let (run, inputs) = execute(config)?;
    let config = &run.config;

    let dir = PathBuf::from(&config.output.dir);
    let final_canvas = run.output.final_canvas();
    atomic_write(&dir.join(&config.output.raw), &raw_bytes(final_canvas))?;
    atomic_write(&dir.join(&config.output.image), &png_bytes(final_canvas)?)?;
    atomic_write(
        &dir.join(&config.output.traces),
        traces_jsonl(&run.output.traces).as_bytes(),
    )?;

    if let Some(basename) = &config.output.templates {
        for (class, template) in inputs.templates.iter().enumerate() {
            atomic_write(
                &dir.join(format!("{basename}_{class}.png")),
                &png_bytes(template)?,
            )?;
        }
    }

    if let Some(basename) = &config.output.metrics {
        let mut report = MetricReport {
            config_digest: config_digest(&config.to_json()),
            seeds: vec![config.seed],
            metrics: Vec::new(),
        };
        for (name, value, samples) in run_metrics(&run)? {
            report.push(name, value, samples);
        }
        atomic_write(
            &dir.join(format!("{basename}.json")),
            report.to_json().as_bytes(),
        )?;
        atomic_write(
            &dir.join(format!("{basename}.csv")),
            report.to_csv().as_bytes(),
        )?;
    }

    let total: usize = run.window_counts.iter().sum();
    let per_level: Vec<String> = run
        .window_counts
        .iter()
        .enumerate()
        .map(|(i, n)| format!("level {}: {}", i + 1, n))
        .collect();
    let guided_steps = run
        .output
        .traces
        .iter()
        .filter(|t| t.guidance_invocations > 0)
        .count();
    println!("windows: {} (total {})", per_level.join(", "), total);
    println!(
        "steps: {} ({} guided), guidance invocations: {}",
        run.output.traces.len(),
        guided_steps,
        run.output
            .traces
            .iter()
            .map(|t| t.guidance_invocations)
            .sum::<usize>()
    );
    println!("wrote {}", dir.join(&config.output.raw).display());
    println!("wrote {}", dir.join(&config.output.image).display());
    println!("wrote {}", dir.join(&config.output.traces).display());
    Ok(())
}

#[derive(Clone)]
struct SweepRow {
    value: f64,
    seed: u64,
    metric: String,
    score: Option<f64>,
    samples: usize,
}

fn cmd_sweep(
    config_path: &Path,
    param: SweepParam,
    values: &[f64],
    seeds: u64,
    out: &Path,
    jobs: Option<usize>,
    overrides: &[String],
) -> Result<(), Error> {
    if values.is_empty() {
        return Err(Error::config("sweep needs a non-empty value list"));
    }
    if seeds < 1 {
        return Err(Error::config("sweep needs seeds >= 1"));
    }
    let base = load_config(config_path, overrides)?;
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    }

    let combos: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|v| (0..seeds).map(move |s| (*v, base.seed + s)))
        .collect();

    let results: Vec<Result<Vec<SweepRow>, (f64, u64, Error)>> = combos
        .par_iter()
        .map(|(value, seed)| {
            let mut cfg_value = serde_json::to_value(&base).expect("config serializes");
            apply_override(
                &mut cfg_value,
                &format!("{}={}", param.config_path(), value),
            )
            .map_err(|e| (*value, *seed, e))?;
            apply_override(&mut cfg_value, &format!("seed={seed}"))
                .map_err(|e| (*value, *seed, e))?;
            let config = RunConfig::from_value(cfg_value).map_err(|e| (*value, *seed, e))?;
            let (run, _) = execute(config).map_err(|e| (*value, *seed, e))?;
            let rows = run_metrics(&run)
                .map_err(|e| (*value, *seed, e))?
                .into_iter()
                .map(|(metric, score, samples)| SweepRow {
                    value: *value,
                    seed: *seed,
                    metric,
                    score: Some(score),
                    samples,
                })
                .collect();
            Ok(rows)
        })
        .collect();

    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["param", "value", "seed", "metric", "score", "samples"])
        .map_err(|e| Error::Format(format!("csv: {e}")))?;
    let mut aborted: Vec<(String, Error)> = Vec::new();
    for result in results {
        match result {
            Ok(rows) => {
                for row in rows {
                    writer
                        .write_record([
                            param.key().to_string(),
                            format_float(row.value),
                            row.seed.to_string(),
                            row.metric,
                            row.score.map(format_float).unwrap_or_default(),
                            row.samples.to_string(),
                        ])
                        .map_err(|e| Error::Format(format!("csv: {e}")))?;
                }
            }
            Err((value, seed, err)) => {
                writer
                    .write_record([
                        param.key().to_string(),
                        format_float(value),
                        seed.to_string(),
                        "aborted".to_string(),
                        String::new(),
                        "0".to_string(),
                    ])
                    .map_err(|e| Error::Format(format!("csv: {e}")))?;
                aborted.push((
                    format!("{}={} seed {}: {err}", param.key(), value, seed),
                    err,
                ));
            }
        }
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Format(format!("csv: {e}")))?;
    atomic_write(out, &bytes)?;
    println!("wrote {} ({} runs)", out.display(), combos.len());
    // Rows for aborted runs are already in the CSV; propagate the first
    // failure so the exit code reflects its class.
    let mut first_error = None;
    for (line, err) in aborted {
        eprintln!("aborted: {line}");
        if first_error.is_none() {
            first_error = Some(err);
        }
    }
    match first_error {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

fn format_float(v: f64) -> String {
    // Shortest round-trip form so identical runs give identical CSVs.
    let mut s = format!("{v}");
    if s.ends_with(".0") {
        s.truncate(s.len() - 2);
    }
    s
}

fn cmd_verify(corrupt_merge: bool) -> Result<(), Error> {
    let reports = msd_core::verify::run_all(corrupt_merge);
    let mut all_passed = true;
    println!("{:<26} {:>6}  {:>9}  detail", "check", "status", "time");
    for report in &reports {
        all_passed &= report.passed;
        println!(
            "{:<26} {:>6}  {:>7.1}ms  {}",
            report.name,
            if report.passed { "PASS" } else { "FAIL" },
            report.duration_ms,
            report.detail
        );
    }
    match msd_core::verify::smoke_run() {
        Ok(()) => println!("{:<26} {:>6}", "end-to-end-smoke", "PASS"),
        Err(e) => {
            all_passed = false;
            println!("{:<26} {:>6}  {}", "end-to-end-smoke", "FAIL", e);
        }
    }
    if all_passed {
        Ok(())
    } else {
        eprintln!("verification failed");
        std::process::exit(1);
    }
}
