use clap::{Args, Parser, Subcommand};
use octolatent::codec::{decode, encode, inspect, EncodeConfig};
use octolatent::gaussian::parse_attribute_list;
use octolatent::metrics::{eval, sweep, write_sweep_csv};
use octolatent::ply::{load_ply, save_ply};
use octolatent::trainer::{write_training_log, TrainConfig};
use octolatent::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "octolatent", version, about = "3DGS attribute codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress a 3DGS PLY file.
    Encode {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        opts: EncodeOpts,
        /// Per-iteration training log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Metrics JSON path. Defaults to `<output>.json`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Decompress a stream to a 3DGS PLY file.
    Decode { input: PathBuf, output: PathBuf },
    /// Compare a decoded PLY with its reference.
    Eval {
        reference: PathBuf,
        decoded: PathBuf,
        #[arg(long, default_value_t = 10)]
        depth: u32,
        /// Stream to take byte counts from.
        #[arg(long)]
        stream: Option<PathBuf>,
    },
    /// Print the header and section sizes of a stream.
    Inspect { input: PathBuf },
    /// Encode at several lambdas and write one CSV row per point.
    Sweep {
        input: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: EncodeOpts,
    },
}

#[derive(Args)]
struct EncodeOpts {
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    #[arg(long, default_value_t = 10)]
    depth: u32,
    /// Number of latent levels k.
    #[arg(long, default_value_t = 5)]
    levels: usize,
    /// ARM context size w.
    #[arg(long, default_value_t = 16)]
    context: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    /// Comma list: `all`, `sh`, `opacity`, `sh0`..`sh15` or ids 1..17.
    #[arg(long, default_value = "all")]
    attrs: String,
    #[arg(long, default_value_t = 4096)]
    vq_size: usize,
}

impl EncodeOpts {
    fn config(&self) -> Result<EncodeConfig> {
        Ok(EncodeConfig {
            depth: self.depth,
            train: TrainConfig {
                lambda: self.lambda,
                iterations: self.iterations,
                levels: self.levels,
                context: self.context,
                seed: self.seed,
                ..TrainConfig::default()
            },
            attrs: parse_attribute_list(&self.attrs)?,
            vq_size: self.vq_size,
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Writes through a sibling temp file so a failure leaves nothing behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Encode {
            input,
            output,
            opts,
            log,
            metrics,
        } => {
            let cfg = opts.config()?;
            let model = load_ply(&read(&input)?)?;
            let enc = encode(&model, &cfg)?;
            write_atomic(&output, &enc.bytes)?;
            if let Some(log) = log {
                write_training_log(&log, &enc.trained)?;
            }
            let m = eval(&model, &enc.reconstruction, cfg.depth)?.with_stream(&enc.bytes)?;
            let json_path = metrics.unwrap_or_else(|| {
                let mut p = output.clone().into_os_string();
                p.push(".json");
                p.into()
            });
            write_atomic(&json_path, m.to_json()?.as_bytes())?;
            println!(
                "{} voxels, {} bytes, {:.4} bpp",
                m.num_voxels,
                enc.bytes.len(),
                m.bpp.unwrap_or(0.0)
            );
        }
        Cmd::Decode { input, output } => {
            let model = decode(&read(&input)?)?;
            write_atomic(&output, &save_ply(&model)?)?;
            println!("{} Gaussians", model.len());
        }
        Cmd::Eval {
            reference,
            decoded,
            depth,
            stream,
        } => {
            let r = load_ply(&read(&reference)?)?;
            let d = load_ply(&read(&decoded)?)?;
            let mut m = eval(&r, &d, depth)?;
            if let Some(s) = stream {
                m = m.with_stream(&read(&s)?)?;
            }
            println!("{}", m.to_json()?);
        }
        Cmd::Inspect { input } => {
            let info = inspect(&read(&input)?)?;
            let h = &info.header;
            println!(
                "depth {} levels {} context {} voxels {} lambda {} attributes {}",
                h.depth,
                h.levels,
                h.context,
                h.num_voxels,
                h.lambda,
                h.attributes.len()
            );
            for p in &info.parts {
                match p.attr_id {
                    Some(a) => println!("{:>10} {:>3} {:>10}", p.name, a, p.bytes),
                    None => println!("{:>10} {:>3} {:>10}", p.name, "-", p.bytes),
                }
            }
        }
        Cmd::Sweep {
            input,
            lambdas,
            out,
            opts,
        } => {
            let cfg = opts.config()?;
            let model = load_ply(&read(&input)?)?;
            let rows = sweep(&model, &cfg, &lambdas);
            write_sweep_csv(&out, &rows)?;
            for r in &rows {
                match &r.error {
                    None => println!("lambda {}: {} bytes, {:.4} bpp", r.lambda, r.bytes, r.bpp),
                    Some(e) => println!("lambda {}: failed: {e}", r.lambda),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
