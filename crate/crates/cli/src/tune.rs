use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use structprop::{
    load_dataset, read_tune_table, tune, write_tune_table, FusionSpec, GridSpec, HingeKind, Hyperparams,
    IngestConfig, SolverSettings,
};

use crate::output::Outputs;
use crate::run::ParamsFile;
use crate::DEFAULT_SEED;

#[derive(Args, Debug)]
pub struct TuneArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated semantic sources; defaults to every source.
    #[arg(long)]
    sources: Option<String>,
    /// Output directory for `tune.csv` and `params.json`.
    #[arg(long, default_value = "tune")]
    out: PathBuf,
    /// Step between grid exponents.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Explicit base-2 exponents for lambda, e.g. `-20,-16`.
    #[arg(long, allow_hyphen_values = true)]
    lambda_exps: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    gamma_exps: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    sigma_exps: Option<String>,
    #[arg(long, default_value_t = 2)]
    folds: usize,
    /// Fraction of seen classes held out per fold; defaults to U/(S+U).
    #[arg(long)]
    ratio: Option<f64>,
    /// Search all bandwidths jointly instead of one space at a time.
    #[arg(long)]
    full_sigma_product: bool,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, env = "STRUCTPROP_WORKERS")]
    workers: Option<usize>,
    /// Propagation rounds per evaluated cell.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    hinge: Option<HingeKind>,
    #[arg(long)]
    no_image_structure: bool,
    /// Ignore an existing `tune.csv` instead of resuming from it.
    #[arg(long)]
    fresh: bool,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Serialize)]
struct TuneConfig<'a> {
    data: &'a PathBuf,
    grid: &'a GridSpec,
    include_image: bool,
    base: &'a Hyperparams,
    solver: &'a SolverSettings,
    resumed_rows: usize,
}

#[derive(Serialize)]
struct ChosenFile<'a> {
    #[serde(flatten)]
    params: ParamsFile,
    validation_accuracy: f64,
    seed: u64,
    config: TuneConfig<'a>,
}

fn exponents(list: &str) -> Result<Vec<i32>> {
    list.split(',')
        .map(|s| s.trim().parse().with_context(|| format!("bad exponent {s:?}")))
        .collect()
}

pub fn run(args: TuneArgs) -> Result<()> {
    if !args.data.is_dir() {
        bail!("dataset directory {} does not exist", args.data.display());
    }
    let ingest = IngestConfig {
        sources: args.sources.as_deref().map(|s| FusionSpec::parse(s, true)).transpose()?.map(|s| s.sources),
        prefer_binary: false,
    };
    let dataset = load_dataset(&args.data, &ingest)
        .with_context(|| format!("cannot load dataset {}", args.data.display()))?;
    let spec = FusionSpec::new(dataset.source_names().map(String::from).collect(), !args.no_image_structure)?;

    let mut grid = GridSpec::with_stride(args.stride);
    if let Some(l) = &args.lambda_exps {
        grid.lambda_exponents = exponents(l)?;
    }
    if let Some(g) = &args.gamma_exps {
        grid.gamma_exponents = exponents(g)?;
    }
    if let Some(s) = &args.sigma_exps {
        grid.sigma_exponents = exponents(s)?;
    }
    grid.fold_count = args.folds;
    grid.ratio = args.ratio;
    grid.full_sigma_product = args.full_sigma_product;
    grid.seed = args.seed;
    grid.workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

    let mut base = Hyperparams::default();
    if let Some(p) = args.iters {
        base.iterations = p;
    }
    if let Some(h) = args.hinge {
        base.hinge = h;
    }
    let settings = SolverSettings::default();

    let table_path = args.out.join("tune.csv");
    let previous = if table_path.exists() && !args.fresh {
        read_tune_table(&table_path, &spec.sources)
            .with_context(|| format!("cannot resume from {}", table_path.display()))?
    } else {
        Vec::new()
    };

    let result = tune(&dataset, &grid, &spec, &base, &settings, &previous)?;

    let mut out = Outputs::create(&args.out)?;
    out.record(table_path.clone());
    write_tune_table(&table_path, &spec.sources, &result.table)?;
    let chosen = ChosenFile {
        params: ParamsFile {
            sources: Some(spec.sources.clone()),
            include_image: Some(spec.include_image),
            hyperparams: result.chosen.clone(),
        },
        validation_accuracy: result.chosen_accuracy,
        seed: args.seed,
        config: TuneConfig {
            data: &args.data,
            grid: &grid,
            include_image: spec.include_image,
            base: &base,
            solver: &settings,
            resumed_rows: previous.len(),
        },
    };
    out.write("params.json", &(serde_json::to_string_pretty(&chosen)? + "\n"))?;
    out.commit();
    println!(
        "lambda {} gamma {} sigma_image {} validation accuracy {:.4} ({} cells)",
        result.chosen.lambda,
        result.chosen.gamma,
        result.chosen.sigma_image,
        result.chosen_accuracy,
        result.table.len()
    );
    Ok(())
}
