use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use structprop::synth::{presets, write_synthetic, SourceNoise};

use crate::parse_assignment;

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory to write the dataset into.
    #[arg(long)]
    out: PathBuf,
    /// Starting parameter set: `separable` or `noisy`.
    #[arg(long, default_value = "separable")]
    preset: String,
    #[arg(long)]
    seen: Option<usize>,
    #[arg(long)]
    unseen: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    centroid_scale: Option<f64>,
    /// Spread of class centroids around their family centre.
    #[arg(long, conflicts_with = "independent")]
    family_spread: Option<f64>,
    /// Draw every class centroid independently.
    #[arg(long)]
    independent: bool,
    #[arg(long)]
    feature_noise: Option<f64>,
    #[arg(long)]
    semantic_dim: Option<usize>,
    /// A semantic source and its noise level, as NAME=NOISE; repeatable.
    /// Replaces the preset's sources.
    #[arg(long = "source", value_name = "NAME=NOISE", value_parser = parse_assignment)]
    sources: Vec<(String, f64)>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run(args: SynthArgs) -> Result<()> {
    let Some(mut p) = presets::by_name(&args.preset) else {
        bail!("unknown preset {:?} (expected separable or noisy)", args.preset);
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { p.$field = v; })* };
    }
    set!(seen, unseen, dim, train_per_class, test_per_class, centroid_scale, feature_noise, semantic_dim, seed);
    if args.independent {
        p.family_spread = None;
    } else if let Some(v) = args.family_spread {
        p.family_spread = Some(v);
    }
    if !args.sources.is_empty() {
        p.sources = args
            .sources
            .into_iter()
            .map(|(name, noise)| SourceNoise { name, noise })
            .collect();
    }
    p.validate()?;
    let (data, _) = write_synthetic(&args.out, &p).with_context(|| format!("cannot write {}", args.out.display()))?;
    println!(
        "wrote {} rows ({} seen, {} unseen classes) to {}",
        data.dataset.n_samples(),
        p.seen,
        p.unseen,
        args.out.display()
    );
    Ok(())
}
