//! `tracklab`: data generation, track extraction, masked pretraining,
//! probing, and diagnostics over one shared configuration format.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or format
//! error, 4 numeric failure. Errors print as a single
//! machine-parsable line: `error: <class>: <detail>`.

mod commands;
mod config;
mod render;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "tracklab", version, about = "Masked video pretraining laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic clip shard with a class manifest
    GenData(commands::GenDataArgs),
    /// Extract per-clip track files from a shard with the analytic tracker
    Track(commands::TrackArgs),
    /// Pretrain the masked video model
    Pretrain(commands::PretrainArgs),
    /// Linear-probe a pretrained checkpoint on a frozen encoder
    Probe(commands::ProbeArgs),
    /// Finetune a pretrained checkpoint end to end
    Finetune(commands::FinetuneArgs),
    /// Monte-Carlo visible-frequency heatmap for the configured masking strategy
    MaskStats(commands::MaskStatsArgs),
    /// Render loss and learning-rate curves from a metrics CSV
    Plot(commands::PlotArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenData(a) => commands::gen_data(a),
        Cmd::Track(a) => commands::track(a),
        Cmd::Pretrain(a) => commands::run_pretrain(a),
        Cmd::Probe(a) => commands::run_probe(a),
        Cmd::Finetune(a) => commands::run_finetune(a),
        Cmd::MaskStats(a) => commands::mask_stats(a),
        Cmd::Plot(a) => commands::plot(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
