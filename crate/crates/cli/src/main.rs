//! Batch command-line surface for the tracking engine.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};

use amot_core::association::{run_sequence, AssociationVariant, VariantKind};
use amot_core::io::{
    trajectories_from_results, write_results_file, BundleReader, BundleWriter,
};
use amot_core::metrics::{evaluate, MetricsReport};
use amot_core::simgen::{subsample_trajectories, ScenarioSpec, ScenarioStream};
use amot_core::TrackerConfig;

#[derive(Parser)]
#[command(
    name = "amot",
    version,
    about = "Appearance-guided multi-object tracking: simulate, track, eval, sweep"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario bundle from a key=value spec file.
    Simulate {
        /// Scenario spec file; `seed` is required.
        spec: PathBuf,
        /// Output bundle directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the tracker over a bundle directory, writing MOT result lines.
    Track {
        /// Bundle directory (det.txt, emb.bin, fm/, manifest.txt).
        bundle: PathBuf,
        /// Output results file.
        #[arg(long)]
        out: PathBuf,
        /// Tracker configuration file (key=value).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Disable the appearance-motion consistency term.
        #[arg(long)]
        no_amc: bool,
        /// Disable track continuation.
        #[arg(long)]
        no_mtc: bool,
        /// Disable the appearance cost.
        #[arg(long)]
        no_app: bool,
    },
    /// Evaluate a results file against ground truth.
    Eval {
        gt: PathBuf,
        results: PathBuf,
        /// Also write machine-readable key=value metrics here.
        #[arg(long)]
        kv: Option<PathBuf>,
    },
    /// Run the frame-interval x variant experiment grid over a bundle.
    Sweep {
        bundle: PathBuf,
        /// Output directory for sweep.txt and sweep.csv.
        #[arg(long)]
        out: PathBuf,
        /// Frame intervals to evaluate.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        intervals: Vec<usize>,
        /// Association variants.
        #[arg(long, value_delimiter = ',', default_value = "iou-only,app-only,amc,amc+mtc")]
        variants: Vec<String>,
        /// Tracker configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Parallel grid cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Record measured wall-clock FPS in the CSV. Off by default so
        /// output files stay byte-reproducible.
        #[arg(long)]
        timings: bool,
    },
}

enum CliError {
    Usage(String),
    Data(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Data(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    std::process::exit(0);
                }
                _ => {
                    eprint!("{e}");
                    std::process::exit(1);
                }
            }
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Data(err)) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> CliResult<TrackerConfig> {
    match path {
        Some(p) => Ok(TrackerConfig::from_file(p)
            .with_context(|| format!("loading config {}", p.display()))?),
        None => Ok(TrackerConfig::default()),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { spec, out, seed } => cmd_simulate(&spec, &out, seed),
        Command::Track {
            bundle,
            out,
            config,
            no_amc,
            no_mtc,
            no_app,
        } => cmd_track(&bundle, &out, &config, no_amc, no_mtc, no_app),
        Command::Eval { gt, results, kv } => cmd_eval(&gt, &results, &kv),
        Command::Sweep {
            bundle,
            out,
            intervals,
            variants,
            config,
            jobs,
            timings,
        } => cmd_sweep(&bundle, &out, &intervals, &variants, &config, jobs, timings),
    }
}

fn cmd_simulate(spec_path: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let text = std::fs::read_to_string(spec_path)
        .with_context(|| format!("reading spec {}", spec_path.display()))?;
    let mut spec = ScenarioSpec::from_str_kv(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let stream = ScenarioStream::new(spec.clone())?;
    let mut writer = BundleWriter::create(out, &spec)?;
    let mut frames = 0usize;
    for frame in stream {
        writer.append(&frame)?;
        frames += 1;
    }
    writer.finish()?;
    println!("wrote {frames}-frame bundle to {}", out.display());
    Ok(())
}

fn cmd_track(
    bundle: &Path,
    out: &Path,
    config: &Option<PathBuf>,
    no_amc: bool,
    no_mtc: bool,
    no_app: bool,
) -> CliResult<()> {
    let cfg = load_config(config)?;
    let variant = AssociationVariant {
        use_amc: !no_amc,
        use_iou: true,
        use_app: !no_app,
        use_mtc: !no_mtc,
    };
    let reader = BundleReader::open(bundle)?;
    let results = run_sequence(reader.frames()?, &cfg, variant)?;
    write_results_file(out, &results)?;
    let emitted: usize = results.iter().map(|r| r.outputs.len()).sum();
    println!(
        "tracked {} frames, {} output boxes -> {}",
        results.len(),
        emitted,
        out.display()
    );
    Ok(())
}

fn cmd_eval(gt: &Path, results: &Path, kv: &Option<PathBuf>) -> CliResult<()> {
    let gt_trajs = amot_core::io::read_trajectories(gt)?;
    let pred_trajs = amot_core::io::read_trajectories(results)?;
    let report = evaluate(&gt_trajs, &pred_trajs)?;
    print!("{}", report.to_aligned_text());
    if let Some(path) = kv {
        std::fs::write(path, report.to_kv()).context("writing kv report")?;
    }
    Ok(())
}

struct SweepCell {
    variant: VariantKind,
    k: usize,
    outcome: Result<(MetricsReport, f64), String>,
}

fn cmd_sweep(
    bundle: &Path,
    out: &Path,
    intervals: &[usize],
    variant_names: &[String],
    config: &Option<PathBuf>,
    jobs: usize,
    timings: bool,
) -> CliResult<()> {
    if intervals.is_empty() || intervals.iter().any(|&k| k == 0) {
        return Err(CliError::Usage(
            "--intervals needs a nonempty list of values >= 1".into(),
        ));
    }
    let mut variants = Vec::new();
    for name in variant_names {
        let kind: VariantKind = name
            .parse()
            .map_err(|e: amot_core::Error| CliError::Usage(e.to_string()))?;
        variants.push(kind);
    }
    if variants.is_empty() {
        return Err(CliError::Usage("--variants needs a nonempty list".into()));
    }

    let cfg = load_config(config)?;
    let reader = BundleReader::open(bundle)?;
    let gt = reader.ground_truth()?;
    let cells: Vec<(VariantKind, usize)> = variants
        .iter()
        .flat_map(|&v| intervals.iter().map(move |&k| (v, k)))
        .collect();

    let run_cell = |&(variant, k): &(VariantKind, usize)| -> SweepCell {
        let outcome = (|| -> anyhow::Result<(MetricsReport, f64)> {
            let frames = reader.frames_subsampled(k)?;
            let start = Instant::now();
            let results = run_sequence(frames, &cfg, variant.config())?;
            let elapsed = start.elapsed().as_secs_f64();
            let preds = trajectories_from_results(&results)?;
            let gt_k = subsample_trajectories(&gt, k);
            let report = evaluate(&gt_k, &preds)?;
            let fps = if elapsed > 0.0 {
                results.len() as f64 / elapsed
            } else {
                0.0
            };
            Ok((report, fps))
        })();
        SweepCell {
            variant,
            k,
            outcome: outcome.map_err(|e| format!("{e:#}")),
        }
    };

    let rows: Vec<SweepCell> = if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .context("building thread pool")?;
        pool.install(|| cells.par_iter().map(run_cell).collect())
    } else {
        cells.iter().map(run_cell).collect()
    };

    std::fs::create_dir_all(out)?;
    let mut table = String::new();
    let mut csv = String::from("variant,k,idf1,mota,ids,fp,fn,mt,ml,fps\n");
    writeln!(
        table,
        "{:<10} {:>3} {:>8} {:>8} {:>6} {:>6} {:>6} {:>4} {:>4}",
        "variant", "k", "IDF1", "MOTA", "IDs", "FP", "FN", "MT", "ML"
    )
    .unwrap();
    for cell in &rows {
        match &cell.outcome {
            Ok((r, fps)) => {
                writeln!(
                    table,
                    "{:<10} {:>3} {:>8.4} {:>8.4} {:>6} {:>6} {:>6} {:>4} {:>4}",
                    cell.variant.name(),
                    cell.k,
                    r.idf1,
                    r.mota,
                    r.id_switches,
                    r.false_positives,
                    r.false_negatives,
                    r.mostly_tracked,
                    r.mostly_lost
                )
                .unwrap();
                let fps_field = if timings { *fps } else { 0.0 };
                writeln!(
                    csv,
                    "{},{},{:.4},{:.4},{},{},{},{},{},{:.2}",
                    cell.variant.name(),
                    cell.k,
                    r.idf1,
                    r.mota,
                    r.id_switches,
                    r.false_positives,
                    r.false_negatives,
                    r.mostly_tracked,
                    r.mostly_lost,
                    fps_field
                )
                .unwrap();
            }
            Err(msg) => {
                writeln!(
                    table,
                    "{:<10} {:>3} FAILED: {msg}",
                    cell.variant.name(),
                    cell.k
                )
                .unwrap();
                writeln!(
                    csv,
                    "{},{},nan,nan,nan,nan,nan,nan,nan,nan",
                    cell.variant.name(),
                    cell.k
                )
                .unwrap();
            }
        }
    }
    std::fs::write(out.join("sweep.txt"), &table)?;
    std::fs::write(out.join("sweep.csv"), &csv)?;
    print!("{table}");
    Ok(())
}
