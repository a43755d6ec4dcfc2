//! Classifier synthesis from phantom classes, and linear prediction.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::Serialize;

use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;

/// Tolerance on simplex membership accepted from callers.
pub const SIMPLEX_SLACK: f64 = 1e-6;

/// Phantom classes, structure weights and the classifiers they induce.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelState {
    /// U x D, one phantom vector per unseen class.
    pub phantoms: Array2<f64>,
    /// Weights on `[image, source_1, ...]`, on the probability simplex.
    pub beta: Array1<f64>,
    /// (S + U) x D classifiers: seen rows first, then unseen rows.
    pub classifiers: Array2<f64>,
}

pub(crate) fn check_simplex(beta: ArrayView1<'_, f64>, slack: f64) -> Result<()> {
    let sum = beta.sum();
    let min = beta.iter().copied().fold(f64::INFINITY, f64::min);
    if (sum - 1.0).abs() > slack || min < -slack || beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::OffSimplex { sum, min });
    }
    Ok(())
}

/// `sum_g beta[g] * W_g`, accumulated in graph order from zero.
pub fn blended_weights(beta: ArrayView1<'_, f64>, graphs: &[SimilarityGraph]) -> Result<Array2<f64>> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::InvalidParameter("no graphs".into()))?;
    if beta.len() != graphs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} graphs",
            beta.len(),
            graphs.len()
        )));
    }
    let shape = first.weights.dim();
    let mut out = Array2::zeros(shape);
    for (b, g) in beta.iter().zip(graphs) {
        if g.weights.dim() != shape {
            return Err(Error::DimensionMismatch(format!(
                "graph {} is {:?}, expected {:?}",
                g.space,
                g.weights.dim(),
                shape
            )));
        }
        out.scaled_add(*b, &g.weights);
    }
    Ok(out)
}

/// Seen classifiers as blended-graph combinations of the phantoms; unseen
/// classifiers are the phantoms themselves.
pub fn synthesize(
    phantoms: ArrayView2<'_, f64>,
    beta: ArrayView1<'_, f64>,
    graphs: &[SimilarityGraph],
) -> Result<Array2<f64>> {
    check_simplex(beta, SIMPLEX_SLACK)?;
    let blended = blended_weights(beta, graphs)?;
    if blended.ncols() != phantoms.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "graphs have {} unseen columns, phantom matrix has {} rows",
            blended.ncols(),
            phantoms.nrows()
        )));
    }
    let n_seen = blended.nrows();
    let mut out = Array2::zeros((n_seen + phantoms.nrows(), phantoms.ncols()));
    out.slice_mut(s![..n_seen, ..]).assign(&blended.dot(&phantoms));
    out.slice_mut(s![n_seen.., ..]).assign(&phantoms);
    Ok(out)
}

/// Builds a full [`ModelState`] from phantoms and weights.
pub fn model_state(phantoms: Array2<f64>, beta: Array1<f64>, graphs: &[SimilarityGraph]) -> Result<ModelState> {
    let classifiers = synthesize(phantoms.view(), beta.view(), graphs)?;
    Ok(ModelState {
        phantoms,
        beta,
        classifiers,
    })
}

/// `argmax_c a_c . x` over `candidates` (row indices into `classifiers`).
/// `ids[r]` is the class id of row `r`; ties go to the smallest id.
pub fn predict(
    classifiers: ArrayView2<'_, f64>,
    candidates: &[usize],
    ids: &[ClassId],
    x: ArrayView1<'_, f64>,
) -> Result<ClassId> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if x.len() != classifiers.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "sample has dimension {}, classifiers {}",
            x.len(),
            classifiers.ncols()
        )));
    }
    let mut best: Option<(f64, ClassId)> = None;
    for &r in candidates {
        let score = classifiers.row(r).dot(&x);
        let id = ids[r];
        best = match best {
            Some((bs, bid)) if bs > score || (bs == score && bid < id) => Some((bs, bid)),
            _ => Some((score, id)),
        };
    }
    Ok(best.expect("nonempty").1)
}

/// Predicts every row of `samples`.
pub fn predict_batch(
    classifiers: ArrayView2<'_, f64>,
    candidates: &[usize],
    ids: &[ClassId],
    samples: ArrayView2<'_, f64>,
) -> Result<Vec<ClassId>> {
    samples
        .rows()
        .into_iter()
        .map(|x| predict(classifiers, candidates, ids, x))
        .collect()
}
