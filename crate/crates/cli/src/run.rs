use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use structprop::graph::write_graph_csv;
use structprop::{
    evaluate, load_dataset, load_test_truth, propagate, ClassId, FusionSpec, HingeKind, Hyperparams, IngestConfig,
    SolverSettings,
};

use crate::output::Outputs;
use crate::{parse_assignment, DEFAULT_SEED};

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated semantic sources; defaults to the params file's list,
    /// then to every source in the dataset.
    #[arg(long)]
    sources: Option<String>,
    /// Hyperparameter file written by `tune`; flags below override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sigma_image: Option<f64>,
    /// Bandwidth of one source, as NAME=VALUE; repeatable.
    #[arg(long = "sigma", value_name = "NAME=VALUE", value_parser = parse_assignment)]
    sigma: Vec<(String, f64)>,
    /// Number of propagation rounds.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    hinge: Option<HingeKind>,
    /// Leave out the image graph (the semantic-only baseline).
    #[arg(long)]
    no_image_structure: bool,
    #[arg(long)]
    no_warm_start: bool,
    /// Run all rounds even when predictions stop changing.
    #[arg(long)]
    no_early_exit: bool,
    /// Read features.bin instead of features.csv when both exist.
    #[arg(long)]
    binary: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Print per-round accuracy and per-iteration objective values.
    #[arg(long)]
    trace: bool,
    /// Write the final similarity graphs under `<out>/graphs/`.
    #[arg(long)]
    dump_graphs: bool,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

/// Contents of a params file.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamsFile {
    #[serde(default)]
    pub sources: Option<Vec<String>>,
    #[serde(default)]
    pub include_image: Option<bool>,
    pub hyperparams: Hyperparams,
}

#[derive(Debug, Serialize)]
struct RunConfig {
    data: PathBuf,
    sources: Vec<String>,
    include_image: bool,
    params: Option<PathBuf>,
    hyperparams: Hyperparams,
    solver: SolverSettings,
    prefer_binary: bool,
    out: PathBuf,
    seed: u64,
}

#[derive(Serialize)]
struct ClassRow {
    class: ClassId,
    accuracy: f64,
    count: usize,
}

#[derive(Serialize)]
struct Report<'a> {
    config: &'a RunConfig,
    seed: u64,
    rounds: usize,
    /// Mean per-class accuracy of the final round; null without labels_true.csv.
    accuracy: Option<f64>,
    per_class: Option<Vec<ClassRow>>,
    accuracy_trace: Option<Vec<f64>>,
    beta_slots: Vec<String>,
    beta: Vec<f64>,
    beta_trace: Vec<Vec<f64>>,
    objective_trace: Vec<Vec<f64>>,
}

/// Source names present under `<data>/semantic/`.
fn available_sources(data: &Path) -> Vec<String> {
    let Ok(entries) = std::fs::read_dir(data.join("semantic")) else {
        return Vec::new();
    };
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let path = e.path();
            matches!(path.extension()?.to_str()?, "csv" | "bin")
                .then(|| path.file_stem()?.to_str().map(String::from))
                .flatten()
        })
        .collect()
}

fn read_params(path: &Path) -> Result<ParamsFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read params file {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed params file {}", path.display()))
}

pub fn run(args: RunArgs) -> Result<()> {
    if !args.data.is_dir() {
        bail!("dataset directory {} does not exist", args.data.display());
    }
    let file = args.params.as_deref().map(read_params).transpose()?;
    let mut hyper = file.as_ref().map(|f| f.hyperparams.clone()).unwrap_or_default();
    if let Some(v) = args.lambda {
        hyper.lambda = v;
    }
    if let Some(v) = args.gamma {
        hyper.gamma = v;
    }
    if let Some(v) = args.sigma_image {
        hyper.sigma_image = v;
    }
    hyper.sigma_sources.extend(args.sigma.iter().cloned());
    if let Some(v) = args.iters {
        hyper.iterations = v;
    }
    if let Some(v) = args.hinge {
        hyper.hinge = v;
    }
    hyper.warm_start &= !args.no_warm_start;
    hyper.early_exit &= !args.no_early_exit;
    hyper.validate()?;

    let requested = match (&args.sources, file.as_ref().and_then(|f| f.sources.clone())) {
        (Some(list), _) => Some(FusionSpec::parse(list, true)?.sources),
        (None, from_file) => from_file,
    };
    let ingest = IngestConfig {
        sources: requested,
        prefer_binary: args.binary,
    };
    let dataset = load_dataset(&args.data, &ingest)
        .with_context(|| format!("cannot load dataset {}", args.data.display()))?;
    let include_image = !args.no_image_structure && file.as_ref().and_then(|f| f.include_image).unwrap_or(true);
    let spec = FusionSpec::new(dataset.source_names().map(String::from).collect(), include_image)?;
    let available = available_sources(&args.data);
    let unknown: Vec<&String> = hyper.sigma_sources.keys().filter(|k| !available.contains(*k)).collect();
    if !unknown.is_empty() {
        bail!("bandwidth given for unknown source(s) {unknown:?}");
    }
    // bandwidths of sources left out of this run are not part of its config
    hyper.sigma_sources.retain(|k, _| spec.sources.contains(k));
    let settings = SolverSettings::default();
    let config = RunConfig {
        data: args.data.clone(),
        sources: spec.sources.clone(),
        include_image,
        params: args.params.clone(),
        hyperparams: hyper.clone(),
        solver: settings.clone(),
        prefer_binary: args.binary,
        out: args.out.clone(),
        seed: args.seed,
    };

    let test = dataset.test_features();
    let state = propagate(&dataset, test.view(), &spec, &hyper, &settings)?;
    let truth = load_test_truth(&args.data, &dataset)?;

    let evals = truth
        .as_ref()
        .map(|t| state.accuracy_trace(t, dataset.unseen()))
        .transpose()?;
    if args.trace {
        if let Some(evals) = &evals {
            eprintln!("t,accuracy");
            for (r, e) in state.rounds.iter().zip(evals) {
                eprintln!("{},{}", r.t, e.mean_accuracy);
            }
        }
        eprintln!("t,iter,objective");
        for r in &state.rounds {
            for (i, v) in r.objective_trace.iter().enumerate() {
                eprintln!("{},{i},{v}", r.t);
            }
        }
    }

    let final_eval = truth
        .as_ref()
        .map(|t| evaluate(&state.predicted, t, dataset.unseen()))
        .transpose()?;
    let mut beta_slots = Vec::new();
    if include_image {
        beta_slots.push("image".to_string());
    }
    beta_slots.extend(spec.sources.iter().cloned());
    let report = Report {
        config: &config,
        seed: args.seed,
        rounds: state.iteration,
        accuracy: final_eval.as_ref().map(|e| e.mean_accuracy),
        per_class: final_eval.map(|e| {
            e.per_class
                .into_iter()
                .map(|(class, accuracy, count)| ClassRow { class, accuracy, count })
                .collect()
        }),
        accuracy_trace: evals.map(|es| es.iter().map(|e| e.mean_accuracy).collect()),
        beta_slots,
        beta: state.model.beta.to_vec(),
        beta_trace: state.rounds.iter().map(|r| r.beta.to_vec()).collect(),
        objective_trace: state.rounds.iter().map(|r| r.objective_trace.clone()).collect(),
    };

    let mut out = Outputs::create(&args.out)?;
    let mut csv = String::from("sample_index");
    for r in &state.rounds {
        write!(csv, ",t{}", r.t)?;
    }
    csv.push('\n');
    for (row, &sample) in dataset.test_indices().iter().enumerate() {
        write!(csv, "{sample}")?;
        for r in &state.rounds {
            write!(csv, ",{}", r.predictions[row])?;
        }
        csv.push('\n');
    }
    out.write("predictions.csv", &csv)?;
    out.write("report.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;

    if args.dump_graphs {
        let names: BTreeMap<usize, String> = report.beta_slots.iter().cloned().enumerate().collect();
        for (i, graph) in state.graphs.iter().enumerate() {
            let path = out.path(&format!("graphs/{}.csv", names[&i]));
            if i == 0 {
                if let Some(parent) = path.parent().filter(|p| !p.exists()) {
                    std::fs::create_dir_all(parent)?;
                    out.record(parent.to_path_buf());
                }
            }
            out.record(path.clone());
            write_graph_csv(&path, graph, dataset.unseen())?;
        }
    }
    out.commit();

    match report.accuracy {
        Some(acc) => println!("accuracy {acc:.4} after {} round(s)", state.iteration),
        None => println!("labelled {} test rows after {} round(s)", state.predicted.len(), state.iteration),
    }
    Ok(())
}
