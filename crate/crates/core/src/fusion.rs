//! Several semantic sources sharing one weight vector.
//!
//! The weight vector is laid out `[image, source_1, ..., source_m]`; its tail
//! is the fusion weight over semantic graphs and the whole vector lives on a
//! single simplex. Each source keeps its own bandwidth.

use std::collections::HashSet;

use ndarray::{s, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::{ClassPrototypes, Dataset};
use crate::error::{Error, Result};
use crate::graph::{graph_from_prototypes, SimilarityGraph};
use crate::model::blended_weights;
use crate::optimizer::Objective;
use crate::propagation::{Hyperparams, TrainingSet};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub sources: Vec<String>,
    pub include_image: bool,
}

impl FusionSpec {
    pub fn new(sources: Vec<String>, include_image: bool) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::InvalidParameter("at least one semantic source is required".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = sources.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(Error::InvalidParameter(format!("source {dup:?} listed twice")));
        }
        Ok(Self {
            sources,
            include_image,
        })
    }

    /// Parses a comma-separated list such as `att,w2v,glo,hie`.
    pub fn parse(list: &str, include_image: bool) -> Result<Self> {
        let names = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        Self::new(names, include_image)
    }

    /// Length of the weight vector.
    pub fn k(&self) -> usize {
        usize::from(self.include_image) + self.sources.len()
    }
}

/// `sum_j beta_tail[j] * W_j` over the semantic graphs.
pub fn fused_semantic_weight(beta_tail: ArrayView1<'_, f64>, graphs: &[SimilarityGraph]) -> Result<Array2<f64>> {
    blended_weights(beta_tail, graphs)
}

/// One graph per source in `spec`, in spec order.
pub fn semantic_graphs(dataset: &Dataset, spec: &FusionSpec, hyper: &Hyperparams) -> Result<Vec<SimilarityGraph>> {
    let n_seen = dataset.seen().len();
    spec.sources
        .iter()
        .map(|name| {
            let table = dataset.semantic(name)?;
            let seen = ClassPrototypes::semantic(name, dataset.seen().to_vec(), table.slice(s![..n_seen, ..]));
            let unseen = ClassPrototypes::semantic(name, dataset.unseen().to_vec(), table.slice(s![n_seen.., ..]));
            graph_from_prototypes(&seen, &unseen, hyper.sigma_for(name))
        })
        .collect()
}

/// Assembles the objective over `[image?, semantic...]`. `image` must be
/// given exactly when the spec includes the image slot.
pub fn build_fused_objective<'a>(
    train: &'a TrainingSet,
    spec: &FusionSpec,
    semantic: &[SimilarityGraph],
    image: Option<&SimilarityGraph>,
    hyper: &Hyperparams,
) -> Result<Objective<'a>> {
    if semantic.len() != spec.sources.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} semantic graphs for {} sources",
            semantic.len(),
            spec.sources.len()
        )));
    }
    let mut graphs = Vec::with_capacity(spec.k());
    match (spec.include_image, image) {
        (true, Some(g)) => graphs.push(g.clone()),
        (false, None) => {}
        _ => {
            return Err(Error::InvalidParameter(
                "image graph must be supplied exactly when the image slot is enabled".into(),
            ))
        }
    }
    graphs.extend(semantic.iter().cloned());
    Objective::new(
        train.features.view(),
        &train.labels,
        graphs,
        spec.include_image,
        hyper.lambda,
        hyper.gamma,
        hyper.hinge,
    )
}
