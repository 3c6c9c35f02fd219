mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use commands::CliError;
use config::{parse_override, RunConfig};

#[derive(Parser)]
#[command(name = "amqc", version, about = "Defect monitoring pipeline: data, training, int8 inference, telemetry, closed loop")]
struct Cli {
    /// INI config file with [data], [train], [quant], [broker] and [loop] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the command's own random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (the dataset directory for gen-data).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra override, repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic PGM + XML dataset.
    GenData {
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Train the classifier on the dataset's training split.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Score trained weights on the test split.
    Eval {
        #[arg(long)]
        quantized: bool,
    },
    /// Calibrate and convert trained weights to int8.
    Quantize,
    /// Float vs int8 latency with seeded weights.
    Bench {
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 100)]
        frames: usize,
    },
    /// Serve the MQTT-subset broker over TCP.
    Broker {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Stop after this many seconds instead of running until killed.
        #[arg(long)]
        duration_s: Option<u64>,
    },
    /// Run the process twin with the feedback controller.
    RunLoop {
        #[arg(long)]
        layers: Option<u32>,
        #[arg(long, value_name = "on|off")]
        controller: Option<String>,
        #[arg(long, value_name = "model_only|full_pipeline")]
        mode: Option<String>,
        /// Use an external broker at HOST:PORT in full-pipeline mode.
        #[arg(long)]
        connect: Option<String>,
        /// Classify with the int8 weights in full-pipeline mode.
        #[arg(long)]
        quantized: bool,
    },
    /// Summarise the artifacts found in the output directory.
    Report,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = Vec::new();
    let mut push = |s: &str, k: &str, v: String| overrides.push((s.to_owned(), k.to_owned(), v));
    let seed_section = match &cli.command {
        Command::GenData { .. } | Command::Eval { .. } | Command::Quantize | Command::Report => "data",
        Command::Train { .. } | Command::Bench { .. } => "train",
        Command::Broker { .. } => "data",
        Command::RunLoop { .. } => "loop",
    };
    if let Some(seed) = cli.seed {
        push(seed_section, "seed", seed.to_string());
    }
    match &cli.command {
        Command::GenData { n_samples } => {
            if let Some(n) = n_samples {
                push("data", "n_samples", n.to_string());
            }
            if let Some(out) = &cli.out {
                push("data", "out_dir", out.display().to_string());
            }
        }
        Command::Train { epochs, preset } => {
            if let Some(e) = epochs {
                push("train", "epochs", e.to_string());
            }
            if let Some(p) = preset {
                push("train", "preset", p.clone());
            }
        }
        Command::Bench { preset: Some(p), .. } => push("train", "preset", p.clone()),
        Command::Broker { port: Some(p), .. } => push("broker", "port", p.to_string()),
        Command::RunLoop {
            layers,
            controller,
            mode,
            ..
        } => {
            if let Some(l) = layers {
                push("loop", "layers", l.to_string());
            }
            if let Some(c) = controller {
                push("loop", "controller", c.clone());
            }
            if let Some(m) = mode {
                push("loop", "mode", m.clone());
            }
        }
        _ => {}
    }
    for s in &cli.set {
        overrides.push(parse_override(s)?);
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match cli.command {
        Command::GenData { .. } => commands::gen_data(&cfg),
        Command::Train { .. } => commands::train(&cfg, &out),
        Command::Eval { quantized } => commands::eval(&cfg, &out, quantized),
        Command::Quantize => commands::quantize(&cfg, &out),
        Command::Bench { batch, frames, .. } => commands::bench(&cfg, &out, batch, frames),
        Command::Broker { bind, duration_s, .. } => {
            commands::broker(&cfg, &bind, duration_s.map(Duration::from_secs))
        }
        Command::RunLoop {
            connect, quantized, ..
        } => commands::run_loop(&cfg, &out, connect.as_deref(), quantized),
        Command::Report => commands::report(&out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::to_string(&e.to_string()).expect("string serializes");
            eprintln!("error kind={} code={} message={msg}", e.kind(), e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
