use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use geovit::data::{ambiguity_sites, generate_dataset, read_dataset, write_dataset, Split};
use geovit::geometry::parse_polygons;
use geovit::gradsuite::suite_max_errors;
use geovit::harness::{ablate, ablation_csv, evaluate, load_model, train, RunConfig};
use geovit::par::Execution;

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "geovit", version, about = "Location-aware ViT segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-site dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tile edge in pixels (multiple of 16).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Train, val and test tiles per site.
        #[arg(long, value_delimiter = ',', default_values_t = [16, 4, 8])]
        tiles: Vec<usize>,
        /// Give each site's foreground class its own colour.
        #[arg(long)]
        distinct: bool,
    },
    /// Train a model; writes best.gvck and metrics.csv to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory or manifest, overriding the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        serial: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        serial: bool,
    },
    /// Train every fusion configuration plus the baseline.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for ablation.csv; the table goes to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        serial: bool,
    },
    /// Finite-difference check of every kernel and composite block.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Area, compactness and rectangle statistics for a polygon file.
    Stats {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execution(serial: bool) -> Execution {
    if serial {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>, data: Option<PathBuf>) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config = RunConfig::parse(&text)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if out.is_some() {
        config.out = out;
    }
    if data.is_some() {
        config.manifest = data;
    }
    Ok(config)
}

fn manifest(config: &RunConfig) -> anyhow::Result<&Path> {
    match &config.manifest {
        Some(m) => Ok(m),
        None => Err(geovit::Error::Config("no dataset: set manifest in the config or pass --data".into()).into()),
    }
}

fn emit(text: &str, out: Option<&Path>, file: &str) -> anyhow::Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(file);
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData {
            out,
            seed,
            size,
            tiles,
            distinct,
        } => {
            let [train, val, test] = tiles[..] else {
                return Err(geovit::Error::Config("--tiles takes three counts: train,val,test".into()).into());
            };
            let mut specs = ambiguity_sites([train, val, test], size);
            if distinct {
                for s in &mut specs {
                    s.spectra[2].mean = [0.55, 0.25, 0.65];
                }
            }
            let tiles = generate_dataset(&specs, seed, !distinct, Execution::default())?;
            let manifest = write_dataset(&tiles, &out)?;
            println!("wrote {} tiles, manifest {}", tiles.len(), manifest.display());
        }
        Command::Train {
            config,
            seed,
            out,
            data,
            serial,
        } => {
            let config = load_config(&config, seed, out, data)?;
            let dataset = read_dataset(manifest(&config)?)?;
            let outcome = train(&config, &dataset, execution(serial))?;
            let m = outcome.best_val.metrics;
            println!(
                "best epoch {}: val pixel_accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} miou {:.4}",
                outcome.best_epoch, m.pixel_accuracy, m.precision, m.recall, m.f1, m.miou
            );
            if let Some(dir) = &outcome.config.out {
                println!("wrote {}", dir.display());
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            serial,
        } => {
            let (model, store, _) = load_model(&checkpoint)?;
            let dataset = read_dataset(&data)?;
            let tiles = dataset.split(split);
            let e = evaluate(&model, &store, &tiles, execution(serial))?;
            let m = e.metrics;
            println!("split,pixel_accuracy,precision,recall,f1,miou,loss");
            println!(
                "{split},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                m.pixel_accuracy, m.precision, m.recall, m.f1, m.miou, e.loss
            );
        }
        Command::Ablate {
            config,
            trials,
            seed,
            out,
            data,
            serial,
        } => {
            let config = load_config(&config, seed, None, data)?;
            let dataset = read_dataset(manifest(&config)?)?;
            let rows = ablate(&config, &dataset, trials, execution(serial))?;
            for r in rows.iter().filter(|r| r.error.is_some()) {
                log::warn!("{}: {}", r.csv_row(), r.error.as_deref().unwrap_or(""));
            }
            emit(&ablation_csv(&rows), out.as_deref(), "ablation.csv")?;
        }
        Command::GradCheck { seed, seeds } => {
            if seeds == 0 {
                return Err(geovit::Error::Config("--seeds must be at least 1".into()).into());
            }
            let seeds: Vec<u64> = (seed..seed + seeds).collect();
            let results = suite_max_errors(&seeds)?;
            let mut failed = 0;
            for (name, err) in &results {
                let ok = *err < GRAD_TOLERANCE;
                failed += usize::from(!ok);
                println!("{name:<28} {err:.3e} {}", if ok { "ok" } else { "FAIL" });
            }
            if failed > 0 {
                bail!("{failed} of {} checks exceed {GRAD_TOLERANCE:e}", results.len());
            }
        }
        Command::Stats { input, out } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let polygons = parse_polygons(&text)?;
            let mut csv = String::from("index,area,perimeter,compactness,length_major_axis,width_minor_axis,length_width_ratio\n");
            for (i, p) in polygons.iter().enumerate() {
                let s = p.stats();
                csv.push_str(&format!(
                    "{i},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    s.area,
                    p.perimeter(),
                    p.compactness(),
                    s.length_major_axis,
                    s.width_minor_axis,
                    s.length_width_ratio
                ));
            }
            emit(&csv, out.as_deref(), "stats.csv")?;
        }
    }
    Ok(())
}

/// The error chain on one line, skipping causes the outer message already
/// spells out.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

/// 1 for invalid input or configuration, 2 for failures at run time.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<geovit::Error>() {
        Some(geovit::Error::Config(_) | geovit::Error::ClassMismatch { .. }) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
