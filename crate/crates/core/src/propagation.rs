//! The structure-propagation loop and evaluation.
//!
//! 1. Build one semantic graph per source.
//! 2. Start the image graph at zero.
//! 3. For `t = 1..=P`: alternate-optimize phantoms and weights, synthesize
//!    classifiers, label every test sample with its best unseen class, then
//!    rebuild the image graph from seen-class means (training labels) and
//!    unseen-class means (predicted labels).
//!
//! The loop stops early once a round reproduces the previous round's labels.
//! True test labels never enter this module except through [`evaluate`].

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{class_prototypes, ClassId, ClassPrototypes, Dataset};
use crate::error::{Error, Result};
use crate::fusion::{build_fused_objective, semantic_graphs, FusionSpec};
use crate::graph::{graph_from_prototypes, zero_graph, SimilarityGraph};
use crate::model::{model_state, predict_batch, ModelState};
use crate::optimizer::{alternate, alternate_from, HingeKind, SolverSettings};

/// Model hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub lambda: f64,
    pub gamma: f64,
    pub sigma_image: f64,
    /// Per-source bandwidths; sources not listed use 1.
    pub sigma_sources: BTreeMap<String, f64>,
    /// Number of propagation rounds.
    pub iterations: usize,
    pub hinge: HingeKind,
    /// Seed each round with the previous round's phantoms and weights.
    pub warm_start: bool,
    /// Stop as soon as a round repeats the previous labels.
    pub early_exit: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda: 2f64.powi(-16),
            gamma: 2f64.powi(-16),
            sigma_image: 1.0,
            sigma_sources: BTreeMap::new(),
            iterations: 10,
            hinge: HingeKind::Squared,
            warm_start: true,
            early_exit: true,
        }
    }
}

impl Hyperparams {
    pub fn sigma_for(&self, source: &str) -> f64 {
        self.sigma_sources.get(source).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Error::InvalidParameter(format!("{what} must be positive, got {v}"));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(bad("lambda", self.lambda));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(self.sigma_image > 0.0 && self.sigma_image.is_finite()) {
            return Err(bad("sigma_image", self.sigma_image));
        }
        if let Some((name, &s)) = self.sigma_sources.iter().find(|(_, &s)| !(s > 0.0 && s.is_finite())) {
            return Err(bad(&format!("sigma for {name}"), s));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Training rows and their dense seen-class indices.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl TrainingSet {
    pub fn from_dataset(dataset: &Dataset) -> Self {
        Self {
            features: dataset.train_features(),
            labels: dataset.train_seen_indices(),
        }
    }
}

/// What one propagation round produced.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRecord {
    pub t: usize,
    pub predictions: Vec<ClassId>,
    pub beta: Array1<f64>,
    /// Objective values from the alternating solver in this round.
    pub objective_trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PropagationState {
    /// Rounds actually executed.
    pub iteration: usize,
    /// Graphs after the last refresh, ordered `[image?, sources...]`.
    pub graphs: Vec<SimilarityGraph>,
    pub model: ModelState,
    /// Final labels of the test samples (unseen class ids).
    pub predicted: Vec<ClassId>,
    pub rounds: Vec<RoundRecord>,
    /// Image-space means of the seen classes, fixed for the whole run.
    pub seen_image_prototypes: Option<ClassPrototypes>,
}

impl PropagationState {
    /// Per-round evaluation against known test labels.
    pub fn accuracy_trace(&self, truth: &[ClassId], unseen: &[ClassId]) -> Result<Vec<EvalReport>> {
        self.rounds
            .iter()
            .map(|r| evaluate(&r.predictions, truth, unseen))
            .collect()
    }
}

/// Image graph from seen means and the means of samples predicted into each
/// unseen class. Unseen classes that received no sample are masked out.
pub fn refresh_image_graph(
    seen_prototypes: &ClassPrototypes,
    test_features: ArrayView2<'_, f64>,
    predicted: &[ClassId],
    unseen: &[ClassId],
    sigma: f64,
) -> Result<SimilarityGraph> {
    let assignment: Vec<Option<ClassId>> = predicted.iter().copied().map(Some).collect();
    let unseen_prototypes = class_prototypes(test_features, &assignment, unseen);
    if !unseen_prototypes.present.iter().any(|&p| p) {
        return Err(Error::DegenerateAssignment);
    }
    graph_from_prototypes(seen_prototypes, &unseen_prototypes, sigma)
}

/// Runs structure propagation on `dataset`'s training rows and labels the
/// rows of `test_features`.
pub fn propagate(
    dataset: &Dataset,
    test_features: ArrayView2<'_, f64>,
    spec: &FusionSpec,
    hyper: &Hyperparams,
    settings: &SolverSettings,
) -> Result<PropagationState> {
    hyper.validate()?;
    settings.validate()?;
    if test_features.ncols() != dataset.dim() {
        return Err(Error::DimensionMismatch(format!(
            "test features have dimension {}, training {}",
            test_features.ncols(),
            dataset.dim()
        )));
    }
    let train = TrainingSet::from_dataset(dataset);
    let (n_seen, n_unseen) = (dataset.seen().len(), dataset.unseen().len());
    let semantic = semantic_graphs(dataset, spec, hyper)?;

    let seen_image = if spec.include_image {
        let assignment: Vec<Option<ClassId>> = dataset.labels().iter().copied().filter(Option::is_some).collect();
        Some(class_prototypes(train.features.view(), &assignment, dataset.seen()))
    } else {
        None
    };
    let mut image = spec.include_image.then(|| zero_graph(n_seen, n_unseen));

    let ids: Vec<ClassId> = dataset.seen().iter().chain(dataset.unseen()).copied().collect();
    let candidates: Vec<usize> = (n_seen..n_seen + n_unseen).collect();

    let mut rounds: Vec<RoundRecord> = Vec::new();
    let mut last: Option<(ModelState, Vec<SimilarityGraph>)> = None;

    for t in 1..=hyper.iterations {
        let objective = build_fused_objective(&train, spec, &semantic, image.as_ref(), hyper)?;
        let solved = match &last {
            Some((prev, _)) if hyper.warm_start => {
                alternate_from(&objective, settings, prev.phantoms.clone(), prev.beta.clone())?
            }
            _ => alternate(&objective, settings)?,
        };
        let model = model_state(solved.phantoms, solved.beta, objective.graphs())?;
        let predictions = predict_batch(model.classifiers.view(), &candidates, &ids, test_features)?;
        let repeated = rounds.last().is_some_and(|r| r.predictions == predictions);
        rounds.push(RoundRecord {
            t,
            predictions: predictions.clone(),
            beta: model.beta.clone(),
            objective_trace: solved.trace,
        });

        if let (Some(seen_proto), Some(_)) = (&seen_image, &image) {
            image = Some(refresh_image_graph(
                seen_proto,
                test_features,
                &predictions,
                dataset.unseen(),
                hyper.sigma_image,
            )?);
        }
        let mut graphs: Vec<SimilarityGraph> = image.iter().cloned().collect();
        graphs.extend(semantic.iter().cloned());
        last = Some((model, graphs));

        // Without an image slot nothing changes between rounds.
        if !spec.include_image || (hyper.early_exit && repeated) {
            break;
        }
    }

    let (model, graphs) = last.expect("at least one round");
    let predicted = rounds.last().expect("at least one round").predictions.clone();
    Ok(PropagationState {
        iteration: rounds.len(),
        graphs,
        model,
        predicted,
        rounds,
        seen_image_prototypes: seen_image,
    })
}

/// Per-class and average per-class top-1 accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(class, accuracy, test count)` for each class with at least one test sample.
    pub per_class: Vec<(ClassId, f64, usize)>,
    /// Unweighted mean of the per-class accuracies.
    pub mean_accuracy: f64,
}

pub fn evaluate(predicted: &[ClassId], truth: &[ClassId], classes: &[ClassId]) -> Result<EvalReport> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let index: HashMap<ClassId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut correct = vec![0usize; classes.len()];
    let mut count = vec![0usize; classes.len()];
    for (&p, &t) in predicted.iter().zip(truth) {
        let &i = index.get(&t).ok_or(Error::UnknownClass(t))?;
        count[i] += 1;
        if p == t {
            correct[i] += 1;
        }
    }
    let per_class: Vec<(ClassId, f64, usize)> = classes
        .iter()
        .enumerate()
        .filter(|&(i, _)| count[i] > 0)
        .map(|(i, &c)| (c, correct[i] as f64 / count[i] as f64, count[i]))
        .collect();
    let mean_accuracy = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|p| p.1).sum::<f64>() / per_class.len() as f64
    };
    Ok(EvalReport {
        per_class,
        mean_accuracy,
    })
}
