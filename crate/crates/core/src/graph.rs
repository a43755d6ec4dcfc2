//! Bipartite seen-to-unseen similarity graphs.
//!
//! Each seen class `s` connects to every unseen class `u` with weight
//! `exp(-d(s,u)) / sum_u' exp(-d(s,u'))`, where `d(p,q) = |p - q|^2 / sigma`.
//! Rows are therefore probability vectors over the unseen classes.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::data::{ClassId, ClassPrototypes, Space};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGraph {
    pub space: Space,
    /// S x U, rows sum to one unless `zero_init` is set.
    pub weights: Array2<f64>,
    pub sigma: f64,
    /// The all-zero placeholder used before any image structure is known.
    /// Exempt from row-stochasticity.
    pub zero_init: bool,
}

impl SimilarityGraph {
    pub fn n_seen(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_unseen(&self) -> usize {
        self.weights.ncols()
    }
}

/// `(p - q)^T (p - q) / sigma`, the Mahalanobis form with `Sigma = sigma I`.
pub fn scaled_distance(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>, sigma: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "vectors of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_sigma(sigma)?;
    let sq: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / sigma)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")))
    }
}

/// Softmax of `-distances` over the defined entries; undefined entries get 0.
///
/// The largest logit is subtracted before exponentiating, so rows whose
/// distances are all huge still normalize.
pub fn weights_from_distances(distances: &[f64], defined: &[bool]) -> Result<Vec<f64>> {
    debug_assert_eq!(distances.len(), defined.len());
    let max_logit = distances
        .iter()
        .zip(defined)
        .filter(|(_, &ok)| ok)
        .map(|(&d, _)| -d)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_logit == f64::NEG_INFINITY {
        return Err(Error::NoDefinedPrototype);
    }
    let mut out: Vec<f64> = distances
        .iter()
        .zip(defined)
        .map(|(&d, &ok)| if ok { (-d - max_logit).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for w in &mut out {
        *w /= total;
    }
    Ok(out)
}

/// Builds the S x U graph from seen and unseen prototype rows.
///
/// Columns whose `defined` flag is false (unseen classes with no prototype
/// yet) get weight 0 and the row is renormalized over the rest.
pub fn similarity_graph(
    space: Space,
    seen: ArrayView2<'_, f64>,
    unseen: ArrayView2<'_, f64>,
    sigma: f64,
    defined: &[bool],
) -> Result<SimilarityGraph> {
    check_sigma(sigma)?;
    if seen.ncols() != unseen.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "seen prototypes have dimension {}, unseen {}",
            seen.ncols(),
            unseen.ncols()
        )));
    }
    if defined.len() != unseen.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} mask flags for {} unseen prototypes",
            defined.len(),
            unseen.nrows()
        )));
    }
    if !defined.iter().any(|&d| d) {
        return Err(Error::NoDefinedPrototype);
    }
    let (s_count, u_count) = (seen.nrows(), unseen.nrows());
    let mut weights = Array2::zeros((s_count, u_count));
    let mut dist = vec![0.0; u_count];
    for (s, p) in seen.rows().into_iter().enumerate() {
        for (u, q) in unseen.rows().into_iter().enumerate() {
            dist[u] = if defined[u] {
                scaled_distance(p, q, sigma)?
            } else {
                0.0
            };
        }
        let row = weights_from_distances(&dist, defined)?;
        for (u, w) in row.into_iter().enumerate() {
            weights[[s, u]] = w;
        }
    }
    Ok(SimilarityGraph {
        space,
        weights,
        sigma,
        zero_init: false,
    })
}

/// Graph between two prototype sets in the same space. Every seen prototype
/// must be present.
pub fn graph_from_prototypes(
    seen: &ClassPrototypes,
    unseen: &ClassPrototypes,
    sigma: f64,
) -> Result<SimilarityGraph> {
    if let Some(i) = seen.present.iter().position(|&p| !p) {
        return Err(Error::InvalidParameter(format!(
            "seen class {} has no prototype",
            seen.classes[i]
        )));
    }
    similarity_graph(
        unseen.space.clone(),
        seen.vectors.view(),
        unseen.vectors.view(),
        sigma,
        &unseen.present,
    )
}

/// The all-zero image graph used before the first round of predictions.
pub fn zero_graph(n_seen: usize, n_unseen: usize) -> SimilarityGraph {
    SimilarityGraph {
        space: Space::Image,
        weights: Array2::zeros((n_seen, n_unseen)),
        sigma: 1.0,
        zero_init: true,
    }
}

/// Dumps a graph as CSV with a header row of unseen class ids.
pub fn write_graph_csv(path: &Path, graph: &SimilarityGraph, unseen: &[ClassId]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let header: Vec<String> = unseen.iter().map(ClassId::to_string).collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for row in graph.weights.rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(w, "{}", cells.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn distance_examples() {
        let p = array![1.5, -2.0, 0.25];
        assert_eq!(scaled_distance(p.view(), p.view(), 3.0).unwrap(), 0.0);
        let d = scaled_distance(array![0.0, 0.0].view(), array![3.0, 0.0].view(), 1.0).unwrap();
        assert_eq!(d, 9.0);
        let d = scaled_distance(array![1.0, 2.0].view(), array![4.0, 6.0].view(), 5.0).unwrap();
        assert_eq!(d, 5.0);
    }

    #[test]
    fn distance_errors() {
        let a = array![1.0, 2.0];
        let b = array![1.0];
        assert!(matches!(
            scaled_distance(a.view(), b.view(), 1.0),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(matches!(
            scaled_distance(a.view(), a.view(), 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(scaled_distance(a.view(), a.view(), -1.0).is_err());
    }

    #[test]
    fn two_unseen_one_far() {
        let g = similarity_graph(
            Space::Image,
            array![[0.0, 0.0]].view(),
            array![[0.0, 0.0], [3.0, 0.0]].view(),
            1.0,
            &[true, true],
        )
        .unwrap();
        // (1, e^-9) / (1 + e^-9)
        let e9 = (-9.0f64).exp();
        assert!((g.weights[[0, 0]] - 1.0 / (1.0 + e9)).abs() < 1e-15);
        assert!((g.weights[[0, 1]] - e9 / (1.0 + e9)).abs() < 1e-15);
        assert!((g.weights[[0, 0]] - 0.9998766).abs() < 1e-7);
        assert!((g.weights[[0, 1]] - 0.0001234).abs() < 1e-7);
    }

    #[test]
    fn equidistant_and_single_column() {
        let g = similarity_graph(
            Space::Image,
            array![[0.0, 0.0]].view(),
            array![[1.0, 0.0], [0.0, -1.0]].view(),
            0.7,
            &[true, true],
        )
        .unwrap();
        assert_eq!(g.weights, array![[0.5, 0.5]]);
        let g = similarity_graph(
            Space::Image,
            array![[0.0], [100.0]].view(),
            array![[-50.0]].view(),
            0.01,
            &[true],
        )
        .unwrap();
        assert_eq!(g.weights, array![[1.0], [1.0]]);
    }

    #[test]
    fn masked_columns_get_zero() {
        let g = similarity_graph(
            Space::Image,
            array![[0.0], [1.0]].view(),
            array![[0.0], [5.0], [1.0]].view(),
            1.0,
            &[true, false, true],
        )
        .unwrap();
        for row in g.weights.rows() {
            assert_eq!(row[1], 0.0);
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let err = similarity_graph(
            Space::Image,
            array![[0.0]].view(),
            array![[0.0]].view(),
            1.0,
            &[false],
        );
        assert!(matches!(err, Err(Error::NoDefinedPrototype)));
    }

    #[test]
    fn zero_graph_is_flagged() {
        let g = zero_graph(2, 3);
        assert_eq!(g.weights.dim(), (2, 3));
        assert!(g.weights.iter().all(|&w| w == 0.0));
        assert!(g.weights.rows().into_iter().all(|r| r.sum() == 0.0));
        assert!(g.zero_init);
    }

    #[test]
    fn underflow_rows_still_normalize() {
        let sigma = 0.5;
        let seen = array![[0.0, 0.0]];
        let unseen = array![[30.0, 0.0], [0.0, 31.0], [-32.0, 1.0]];
        for u in unseen.rows() {
            assert!(scaled_distance(seen.row(0), u, sigma).unwrap() > 700.0 / sigma);
        }
        let g = similarity_graph(Space::Image, seen.view(), unseen.view(), sigma, &[true; 3]).unwrap();
        assert!((g.weights.row(0).sum() - 1.0).abs() < 1e-12);
        assert!(g.weights.iter().all(|w| w.is_finite()));
    }

    proptest! {
        #[test]
        fn monotone_in_distance(
            d in prop::collection::vec(0.0f64..50.0, 2..6),
            k in 0usize..6,
            shrink in 0.01f64..5.0,
        ) {
            let k = k % d.len();
            let shrink = shrink.min(d[k]);
            prop_assume!(shrink > 1e-6);
            let mask = vec![true; d.len()];
            let before = weights_from_distances(&d, &mask).unwrap();
            let mut closer = d.clone();
            closer[k] -= shrink;
            let after = weights_from_distances(&closer, &mask).unwrap();
            prop_assume!(before[k] < 1.0 - 1e-12);
            prop_assert!(after[k] > before[k]);
        }
    }
}
