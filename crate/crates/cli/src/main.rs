use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod config;
mod geojson;
mod output;
mod stages;

use config::RunConfig;
use stages::Run;

#[derive(Parser, Debug)]
#[command(name = "geovuln", version, about = "Multi-aspect vulnerability analyses over areal units")]
struct Cli {
    /// Run configuration (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the permutation and distance loops.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(flatten)]
    inputs: Inputs,
    /// Extra configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Inputs {
    #[arg(long, global = true)]
    indicators: Option<PathBuf>,
    /// Adjacency pair file (id_a,id_b).
    #[arg(long, global = true)]
    adjacency: Option<PathBuf>,
    /// GeoJSON polygons used for contiguity and export.
    #[arg(long, global = true)]
    geometry: Option<PathBuf>,
    /// Long-format population series (unit_id, year, population).
    #[arg(long, global = true)]
    population: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Range and completeness checks of the inputs.
    Validate {
        /// Exit with an error when any issue is found.
        #[arg(long)]
        strict: bool,
    },
    /// Contiguity weights and island report.
    Weights {
        #[arg(long)]
        rook: bool,
    },
    /// Global Moran's I and LISA for one field.
    Lisa(LisaArgs),
    /// Compositional analyses of the building stock.
    Coda {
        #[command(subcommand)]
        command: CodaCommand,
    },
    /// PERMANOVA of building-stock compositions across hazard classes.
    Permanova(PermanovaArgs),
    /// Functional PCA of log population growth curves.
    Fpca {
        /// Population series; same as --population.
        #[arg(long)]
        series: Option<PathBuf>,
    },
    /// Quartile thresholds of the three selection indicators.
    Thresholds(QuantileArgs),
    /// Units above all three thresholds, with hazard-class shares.
    Select(QuantileArgs),
    /// Per-indicator ranks and Copeland scores.
    Rank {
        #[arg(long, value_parser = ["9", "3"])]
        classes: Option<String>,
    },
    /// Wasserstein clustering of province IVSM distributions.
    Provinces {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        bandwidth: Option<f64>,
        #[arg(long)]
        grid_size: Option<usize>,
        /// Use quantiles of the kernel-smoothed distributions.
        #[arg(long)]
        on_smoothed: bool,
    },
    /// Every stage in sequence.
    Pipeline,
    /// Join result tables onto the geometry as GeoJSON.
    ExportGeojson {
        /// Result CSV with a unit_id column, repeatable; defaults to the standard outputs.
        #[arg(long)]
        results: Vec<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct LisaArgs {
    #[arg(long, default_value = "ivsm", value_parser = config::LISA_FIELDS)]
    field: String,
    #[arg(long)]
    permutations: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args, Debug)]
struct PermanovaArgs {
    #[arg(long, value_parser = ["9", "3"])]
    classes: Option<String>,
    #[arg(long)]
    permutations: Option<usize>,
}

#[derive(Args, Debug)]
struct QuantileArgs {
    /// Hyndman-Fan quantile definition 1-9.
    #[arg(long)]
    quantile_type: Option<u8>,
    #[arg(long, value_parser = ["9", "3"])]
    classes: Option<String>,
}

#[derive(Subcommand, Debug)]
enum CodaCommand {
    Pca {
        #[arg(long, value_parser = ["9", "3"])]
        classes: Option<String>,
        #[arg(long, value_parser = ["covariance", "correlation"])]
        scaling: Option<String>,
    },
    Permanova(PermanovaArgs),
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut put = |k: &str, v: Option<String>| -> Result<()> {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
        Ok(())
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    put("seed", cli.seed.map(|s| s.to_string()))?;
    put("threads", cli.threads.map(|s| s.to_string()))?;
    put("out", path(&cli.out))?;
    put("indicators", path(&cli.inputs.indicators))?;
    put("adjacency", path(&cli.inputs.adjacency))?;
    put("geometry", path(&cli.inputs.geometry))?;
    put("population", path(&cli.inputs.population))?;
    match &cli.command {
        Command::Weights { rook } if *rook => put("rook", Some("true".into()))?,
        Command::Lisa(a) => {
            put("lisa_permutations", a.permutations.map(|v| v.to_string()))?;
            put("alpha", a.alpha.map(|v| v.to_string()))?;
        }
        Command::Coda {
            command: CodaCommand::Pca { classes, scaling },
        } => {
            put("classes", classes.clone())?;
            put("pca_scaling", scaling.clone())?;
        }
        Command::Coda {
            command: CodaCommand::Permanova(a),
        }
        | Command::Permanova(a) => {
            put("classes", a.classes.clone())?;
            put("permanova_permutations", a.permutations.map(|v| v.to_string()))?;
        }
        Command::Fpca { series } => put("population", path(series))?,
        Command::Thresholds(a) | Command::Select(a) => {
            put("quantile_type", a.quantile_type.map(|v| v.to_string()))?;
            put("classes", a.classes.clone())?;
        }
        Command::Rank { classes } => put("classes", classes.clone())?,
        Command::Provinces {
            k,
            bandwidth,
            grid_size,
            on_smoothed,
        } => {
            put("k", k.map(|v| v.to_string()))?;
            put("bandwidth", bandwidth.map(|v| v.to_string()))?;
            put("grid_size", grid_size.map(|v| v.to_string()))?;
            if *on_smoothed {
                put("on_smoothed", Some("true".into()))?;
            }
        }
        _ => {}
    }
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Validate { .. } => "validate",
        Command::Weights { .. } => "weights",
        Command::Lisa(_) => "lisa",
        Command::Coda {
            command: CodaCommand::Pca { .. },
        } => "coda-pca",
        Command::Coda {
            command: CodaCommand::Permanova(_),
        }
        | Command::Permanova(_) => "permanova",
        Command::Fpca { .. } => "fpca",
        Command::Thresholds(_) => "thresholds",
        Command::Select(_) => "select",
        Command::Rank { .. } => "rank",
        Command::Provinces { .. } => "provinces",
        Command::Pipeline => "pipeline",
        Command::ExportGeojson { .. } => "export-geojson",
    }
}

fn dispatch(run: &mut Run, cmd: &Command) -> Result<()> {
    match cmd {
        Command::Validate { strict } => {
            let n = run.validate_stage(*strict)?;
            println!("{n} validation issue(s)");
        }
        Command::Weights { .. } => run.weights_stage()?,
        Command::Lisa(a) => run.lisa_stage(&a.field)?,
        Command::Coda {
            command: CodaCommand::Pca { .. },
        } => {
            let c = run.settings.classes;
            run.pca_stage(c)?
        }
        Command::Coda {
            command: CodaCommand::Permanova(_),
        }
        | Command::Permanova(_) => {
            let c = run.settings.classes;
            run.permanova_stage(c)?
        }
        Command::Fpca { .. } => {
            if run.settings.population.is_none() {
                anyhow::bail!("fpca needs population series (--series or `population`)");
            }
            run.fpca_stage()?
        }
        Command::Thresholds(_) => run.thresholds_stage()?,
        Command::Select(_) => run.select_stage()?,
        Command::Rank { .. } => run.rank_stage()?,
        Command::Provinces { .. } => run.provinces_stage()?,
        Command::Pipeline => run.pipeline()?,
        Command::ExportGeojson { results } => run.export_geojson_stage(results)?,
    }
    Ok(())
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = build_config(&cli)?;
    let name = command_name(&cli.command);
    let mut run = Run::new(name, &cfg)?;
    if let Some(n) = run.settings.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    let result = dispatch(&mut run, &cli.command);
    let err = result.as_ref().err().map(|e| format!("{e:#}"));
    run.finish(err)?;
    for f in run.out.written() {
        log::info!("wrote {}", run.out.root().join(f).display());
    }
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
