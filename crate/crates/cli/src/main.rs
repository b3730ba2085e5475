//! Command-line driver: builds constructions, checks them, and writes JSON or
//! CSV artifacts together with a short human summary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use groupoid_tiler::gamma::KappaChoice;
use groupoid_tiler::groupoid::Criterion;

#[derive(Debug, Parser)]
#[command(name = "groupoid-tiler", version, about = "Castles, Følner sets and quasi-tilings on Cantor groupoids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// System spec file, or one of odometer2, odometer3, fibonacci, partial-odometer2.
    #[arg(long)]
    pub system: String,
    /// Partition-tree depth cap; overrides GROUPOID_TILER_DEPTH_CAP.
    #[arg(long)]
    pub depth_cap: Option<usize>,
    /// Artifact path; the artifact goes to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Method {
    Group,
    FirstReturn,
    Pathological,
    Partial,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CriterionArg {
    Boundary,
    Difference,
    Growth,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Boundary => Criterion::Boundary,
            CriterionArg::Difference => Criterion::Difference,
            CriterionArg::Growth => Criterion::Growth,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SequenceArg {
    KakutaniRokhlin,
    Intervals,
    FirstReturn,
    Partial,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KappaArg {
    One,
    Staircase,
}

impl From<KappaArg> for KappaChoice {
    fn from(k: KappaArg) -> Self {
        match k {
            KappaArg::One => KappaChoice::One,
            KappaArg::Staircase => KappaChoice::Staircase,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a castle, a normal Følner set or a tiling certificate.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long, group = "target")]
        castle: Option<PathBuf>,
        #[arg(long, group = "target")]
        folner: Option<PathBuf>,
        #[arg(long, group = "target")]
        certificate: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        k_radius: u64,
        #[arg(long, default_value_t = 0.25)]
        epsilon: f64,
        #[arg(long, value_enum, default_value = "difference")]
        criterion: CriterionArg,
    },
    /// Build and certify a normal Følner set.
    Folner {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        k_radius: u64,
        #[arg(long, default_value_t = 0.25)]
        epsilon: f64,
        #[arg(long, value_enum, default_value = "first-return")]
        method: Method,
        /// Stage index for the pathological and partial constructions.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum, default_value = "difference")]
        criterion: CriterionArg,
    },
    /// Lower and upper densities of a clopen set along a Følner sequence, as CSV.
    Density {
        #[command(flatten)]
        common: Common,
        /// Cells such as "[0],[10]"; letter windows like "[a]" on subshifts.
        #[arg(long)]
        set: String,
        /// Last stage index; stages run from 1.
        #[arg(long, default_value_t = 8)]
        stages: usize,
        #[arg(long, value_enum)]
        sequence: Option<SequenceArg>,
        /// Trailing stages used for the limit estimates.
        #[arg(long, default_value_t = 3)]
        window: usize,
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
    },
    /// Quasi-tile by a castle and write a reverifiable certificate.
    Tile {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        k_radius: u64,
        #[arg(long, default_value_t = 0.25)]
        epsilon: f64,
        #[arg(long, default_value_t = 10)]
        max_stage: usize,
        #[arg(long, value_enum)]
        sequence: Option<SequenceArg>,
    },
    /// Nested castles and the orthogonal diagonal functions.
    Gamma {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long = "big-n", default_value_t = 8)]
        big_n: usize,
        #[arg(long, default_value_t = 0.25)]
        epsilon: f64,
        #[arg(long, default_value_t = 1)]
        partition_depth: usize,
        #[arg(long, value_enum, default_value = "staircase")]
        kappa: KappaArg,
    },
    /// Permutation models of full-group elements on orbit windows, as CSV.
    Sofic {
        #[command(flatten)]
        common: Common,
        /// Partition tables; two tower transpositions of height 8 when absent.
        #[arg(long)]
        elements: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "32,128,512")]
        stages: Vec<usize>,
        /// Also write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(outcome) => {
            if outcome.holds {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
