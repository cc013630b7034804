use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qeps_core::expharness::{
    capture_reception, export, run_link, sweep, write_constellation_csv, write_raw_csv, ExportFormat, ScenarioConfig, Stage,
    SweepAxis,
};
use qeps_core::infotheory::{estimate_mi_polar, sample_pairs, ChannelMode, EstimatorStatus, DEFAULT_AMP_BINS, DEFAULT_PHASE_BINS};
use qeps_core::iqcore::RandomStream;
use qeps_core::modem::{build_constellation, Format};
use qeps_core::rxdsp::ReceiverId;
use qeps_core::QepsError;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_UNDERSAMPLED: u8 = 3;

#[derive(Parser)]
#[command(name = "qeps", version, about = "Phase-encrypted coherent optical link simulator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Raw key bytes read from a file.
    #[arg(long, global = true, conflicts_with = "key_hex")]
    key_file: Option<PathBuf>,
    /// Key bytes as a hex string.
    #[arg(long, global = true)]
    key_hex: Option<String>,
    /// Overrides the noise seed (the sample seed for `mi`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one link scenario and report BER for every receiver.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        bits: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one axis of a scenario.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        grid: Vec<f64>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        bits: Option<usize>,
        /// `.json` writes JSON, anything else CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-repetition rows.
        #[arg(long)]
        emit_raw: Option<PathBuf>,
    },
    /// Estimate polar mutual information terms.
    Mi {
        #[arg(long)]
        format: Format,
        #[arg(long, allow_hyphen_values = true)]
        snr_db: f64,
        #[arg(long, value_enum)]
        mode: MiMode,
        #[arg(long, default_value_t = 90.0)]
        deviation_deg: f64,
        #[arg(long, default_value_t = 64)]
        levels: usize,
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump received constellation points at one DSP stage.
    Constellation {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        stage: Stage,
        #[arg(long, value_enum)]
        receiver: Who,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MiMode {
    Coherent,
    QepsUniform,
    QepsQuantized,
}

#[derive(Clone, Copy, ValueEnum)]
enum Who {
    Bob,
    Eve,
}

enum Failure {
    Core(QepsError),
    Undersampled,
}

impl From<QepsError> for Failure {
    fn from(e: QepsError) -> Self {
        Failure::Core(e)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> QepsError {
    QepsError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn load_scenario(path: &Path, g: &Global, bits: Option<usize>, reps: Option<usize>) -> Result<ScenarioConfig, QepsError> {
    let mut s = ScenarioConfig::load(path)?;
    if let Some(path) = &g.key_file {
        let key = std::fs::read(path).map_err(|e| io_err(path, e))?;
        s.key_override = Some(key);
    }
    if let Some(h) = &g.key_hex {
        s.set("keystream.key_hex", h)?;
    }
    if let Some(seed) = g.seed {
        s.noise_seed = seed;
    }
    if let Some(b) = bits {
        s.sequence_length_bits = b;
    }
    if let Some(r) = reps {
        s.repetitions = r;
    }
    s.finalize()?;
    Ok(s)
}

fn write_text(path: &Path, text: &str) -> Result<(), QepsError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match cli.command {
        Command::Simulate { scenario, bits, out } => {
            let s = load_scenario(&scenario, g, bits, None)?;
            let outcome = run_link(&s)?;
            let json = outcome.to_json()?;
            match out {
                Some(path) => write_text(&path, &json)?,
                None => println!("{json}"),
            }
            if !g.quiet {
                for r in outcome.reports() {
                    eprintln!("{:<12} ber {:.3e}  ser {:.3e}  evm {:.2}%  bits {}", r.receiver_id, r.ber, r.ser, r.evm_percent, r.n_bits);
                }
            }
        }
        Command::Sweep {
            scenario,
            axis,
            grid,
            reps,
            bits,
            out,
            emit_raw,
        } => {
            let s = load_scenario(&scenario, g, bits, reps)?;
            let result = sweep(&s, axis, &grid)?;
            match out {
                Some(path) => {
                    let fmt = match path.extension().and_then(|e| e.to_str()) {
                        Some("json") => ExportFormat::Json,
                        _ => ExportFormat::Csv,
                    };
                    export(&result, &path, fmt)?;
                }
                None => qeps_core::expharness::write_sweep_csv(&result, std::io::stdout().lock())?,
            }
            if let Some(path) = emit_raw {
                let f = File::create(&path).map_err(|e| io_err(&path, e))?;
                write_raw_csv(&result, BufWriter::new(f))?;
            }
            if !g.quiet {
                eprintln!("{} grid points x {} repetitions on {}", grid.len(), s.repetitions, axis.as_str());
            }
        }
        Command::Mi {
            format,
            snr_db,
            mode,
            deviation_deg,
            levels,
            samples,
            out,
        } => {
            let mode = match mode {
                MiMode::Coherent => ChannelMode::Coherent,
                MiMode::QepsUniform => ChannelMode::QepsUniform,
                MiMode::QepsQuantized => ChannelMode::QepsQuantized {
                    deviation: deviation_deg.to_radians(),
                    levels,
                },
            };
            let c = build_constellation(format);
            let stream = RandomStream::from_u64(g.seed.unwrap_or(1), "mi");
            let pairs = sample_pairs(&c, snr_db, mode, samples, &stream)?;
            let report = estimate_mi_polar(&pairs, &c, DEFAULT_AMP_BINS, DEFAULT_PHASE_BINS)?;
            let json = report.to_json()?;
            match out {
                Some(path) => write_text(&path, &json)?,
                None => println!("{json}"),
            }
            if !g.quiet {
                eprintln!(
                    "total {:.4} bits: amplitude {:.4}, phase {:.4}, mixed {:.4} + {:.4}",
                    report.total, report.amplitude_term, report.phase_term, report.mixed_1, report.mixed_2
                );
            }
            if report.status == EstimatorStatus::Undersampled {
                if !g.quiet {
                    eprintln!("warning: {:.2} samples per occupied cell, estimate is biased", report.mean_cell_count);
                }
                return Err(Failure::Undersampled);
            }
        }
        Command::Constellation {
            scenario,
            stage,
            receiver,
            out,
        } => {
            let s = load_scenario(&scenario, g, None, None)?;
            let id = match receiver {
                Who::Bob => ReceiverId::BobNoTap,
                Who::Eve => ReceiverId::Eve,
            };
            let rx = capture_reception(&s, id, 0)?;
            let f = File::create(&out).map_err(|e| io_err(&out, e))?;
            let mut w = BufWriter::new(f);
            write_constellation_csv(rx.stage(stage), &mut w)?;
            w.flush().map_err(|e| io_err(&out, e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Undersampled) => ExitCode::from(EXIT_UNDERSAMPLED),
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            match e {
                QepsError::Config { .. } | QepsError::InvalidArgument(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_FAILURE),
            }
        }
    }
}
