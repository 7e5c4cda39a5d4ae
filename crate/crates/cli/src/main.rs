#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flexagg::coordination::Method;
use flexagg::distflow::Denominator;
use flexagg::FlexError;

use config::{FileConfig, Overrides, RunConfig};

/// Feeder flexibility aggregation with loss compensation, and TSO-DSO coordination.
#[derive(Debug, Parser)]
#[command(name = "flexagg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Lossless and loss-compensated flexibility regions of one feeder, with
    /// the exact region for comparison.
    Aggregate {
        #[command(flatten)]
        common: Common,
        /// Also write the classified exact cloud as cloud.csv.
        #[arg(long)]
        export_cloud: bool,
    },
    /// Single-feeder dispatch against one TSO generator over a DER price sweep.
    Dispatch {
        #[command(flatten)]
        common: Common,
        /// DER prices in $/MWh, comma separated.
        #[arg(long, value_delimiter = ',')]
        prices: Option<Vec<f64>>,
    },
    /// Attach feeders to a transmission case and coordinate them.
    Coordinate {
        #[command(flatten)]
        common: Common,
        /// Load thresholds in MW separating the three feeder templates, as LOW,HIGH.
        #[arg(long, value_parser = parse_thresholds)]
        thresholds: Option<(f64, f64)>,
        /// Directory holding case10ba.m, case33mg.m and case118zh.m
        /// (defaults to the directory of --case).
        #[arg(long)]
        feeder_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// MATPOWER case file.
    #[arg(long)]
    case: Option<PathBuf>,
    /// TOML scenario file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// DER bounds as a fraction of total demand.
    #[arg(long)]
    der_fraction: Option<f64>,
    /// DER grid points per axis for the exact cloud.
    #[arg(long)]
    resolution: Option<usize>,
    /// Methods to run, comma separated (reference, lds, slc).
    #[arg(long, value_delimiter = ',')]
    method: Option<Vec<Method>>,
    /// Squared voltage in the current update: sending or difference.
    #[arg(long)]
    denominator: Option<Denominator>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_thresholds(s: &str) -> Result<(f64, f64), String> {
    let v: Vec<&str> = s.split(',').collect();
    if v.len() != 2 {
        return Err(format!("expected LOW,HIGH, got `{s}`"));
    }
    let lo = v[0].trim().parse::<f64>().map_err(|e| e.to_string())?;
    let hi = v[1].trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((lo, hi))
}

fn resolve(common: Common, extra: Overrides) -> Result<RunConfig, FlexError> {
    let file = match &common.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let cli = Overrides {
        case: common.case,
        out: common.out,
        der_fraction: common.der_fraction,
        resolution: common.resolution,
        methods: common.method,
        denominator: common.denominator,
        ..extra
    };
    RunConfig::resolve(file, cli)
}

fn run(cli: Cli) -> Result<String, FlexError> {
    match cli.command {
        Command::Aggregate { common, export_cloud } => {
            let cfg = resolve(
                common,
                Overrides {
                    export_cloud,
                    ..Default::default()
                },
            )?;
            commands::cmd_aggregate(&cfg)
        }
        Command::Dispatch { common, prices } => {
            let cfg = resolve(
                common,
                Overrides {
                    prices,
                    ..Default::default()
                },
            )?;
            commands::cmd_dispatch(&cfg)
        }
        Command::Coordinate {
            common,
            thresholds,
            feeder_dir,
        } => {
            let cfg = resolve(
                common,
                Overrides {
                    thresholds,
                    feeder_dir,
                    ..Default::default()
                },
            )?;
            commands::cmd_coordinate(&cfg)
        }
    }
}

/// 2 for bad input, 1 for numerical failure.
fn exit_code(e: &FlexError) -> u8 {
    match e {
        FlexError::Config(_)
        | FlexError::Io { .. }
        | FlexError::MalformedMatrix { .. }
        | FlexError::MissingSection(_)
        | FlexError::InvalidCase(_)
        | FlexError::NotRadial { .. }
        | FlexError::NoLeaf => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
