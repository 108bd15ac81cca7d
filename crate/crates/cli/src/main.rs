mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;
use crate::config::{LogLevel, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "tubelink", version, about = "Link 3D detections into tubes, correlate keypoint features and evaluate tracks")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Never changes outputs.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Link causally with a sliding window of OMEGA frames.
    #[arg(long, global = true, value_name = "OMEGA")]
    online: Option<usize>,
    /// Gate correlations between keypoints farther apart than this.
    #[arg(long, global = true, value_name = "METERS")]
    radius: Option<f64>,
    #[arg(long, global = true, value_name = "F")]
    delta_iou: Option<f64>,
    #[arg(long, global = true, value_name = "F")]
    suppress_iou: Option<f64>,
    #[arg(long, global = true, value_name = "N")]
    min_tube_len: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Only print data, no summaries.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (labels, detections, tracklets, features).
    Synth,
    /// Correlate two keypoint feature blobs and report the argmax matches.
    Correlate { features_a: PathBuf, features_b: PathBuf },
    /// Link detections of every sequence under INPUT into tubes.
    Link {
        #[arg(long)]
        input: PathBuf,
    },
    /// Evaluate predictions against ground-truth labels.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
    /// Encode JSON lines `{"from": box, "to": box}` into tracking deltas.
    Encode {
        /// Input file; `-` or absent reads stdin.
        input: Option<PathBuf>,
    },
    /// Decode JSON lines `{"box": box, "delta": delta}` into boxes.
    Decode { input: Option<PathBuf> },
}

fn resolve(g: &GlobalArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    if let Some(v) = g.seed {
        cfg.seed = v;
    }
    if let Some(v) = g.threads {
        cfg.threads = v;
    }
    if let Some(v) = g.online {
        cfg.linker.online_window = Some(v);
    }
    if let Some(v) = g.radius {
        cfg.radius = Some(v);
    }
    if let Some(v) = g.delta_iou {
        cfg.linker.delta_iou = v;
    }
    if let Some(v) = g.suppress_iou {
        cfg.linker.suppress_iou = v;
    }
    if let Some(v) = g.min_tube_len {
        cfg.linker.min_tube_len = v;
    }
    if g.quiet {
        cfg.log_level = LogLevel::Quiet;
    }
    cfg.finalize().map_err(Failure::Usage)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve(&cli.global)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    let out = cli.global.out;
    pool.install(|| match cli.command {
        Command::Synth => commands::synth(&cfg, out.as_deref()),
        Command::Correlate { features_a, features_b } => {
            commands::correlate(&cfg, &features_a, &features_b, out.as_deref())
        }
        Command::Link { input } => commands::link(&cfg, &input, out.as_deref()),
        Command::Eval { gt, pred } => commands::eval(&cfg, &gt, &pred, out.as_deref()),
        Command::Encode { input } => commands::encode(&cfg, input.as_deref(), out.as_deref()),
        Command::Decode { input } => commands::decode(&cfg, input.as_deref(), out.as_deref()),
    })
}

/// Joins an error chain, skipping causes whose text the message already ends
/// with (several error types embed their source in their own message).
fn chain_message(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let part = cause.to_string();
        if msg.ends_with(&part) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&part);
    }
    msg
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {}", chain_message(&e));
            ExitCode::from(2)
        }
    }
}
