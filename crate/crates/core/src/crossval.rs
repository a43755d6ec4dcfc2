//! Hyperparameter selection on the seen classes.
//!
//! The seen classes are split into a training part and a validation part in
//! the same proportion as seen to unseen; validation classes play the role of
//! unseen classes and their training samples become the test set. Two folds
//! alternate which part validates.
//!
//! Selection runs in two stages: with every bandwidth at 1, grid-search
//! `(lambda, gamma)`; then, holding those, search the bandwidths one space at
//! a time (or over their full product). Ties go to the lexicographically
//! smallest `(lambda, gamma)` and then to the smallest bandwidth.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Dataset};
use crate::error::{Error, Result};
use crate::fusion::FusionSpec;
use crate::optimizer::SolverSettings;
use crate::propagation::{evaluate, propagate, Hyperparams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Base-2 exponents for lambda.
    pub lambda_exponents: Vec<i32>,
    pub gamma_exponents: Vec<i32>,
    pub sigma_exponents: Vec<i32>,
    pub fold_count: usize,
    /// Validation share of the seen classes; defaults to U / (S + U).
    pub ratio: Option<f64>,
    /// Search every bandwidth combination instead of one space at a time.
    pub full_sigma_product: bool,
    pub seed: u64,
    /// Worker threads; 0 picks the number of CPUs.
    pub workers: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::with_stride(1)
    }
}

impl GridSpec {
    /// The default ranges (`2^-24..=2^-9` for lambda and gamma, `2^-5..=2^5`
    /// for bandwidths) walked with the given exponent stride.
    pub fn with_stride(stride: usize) -> Self {
        let stride = stride.max(1);
        Self {
            lambda_exponents: (-24..=-9).step_by(stride).collect(),
            gamma_exponents: (-24..=-9).step_by(stride).collect(),
            sigma_exponents: (-5..=5).step_by(stride).collect(),
            fold_count: 2,
            ratio: None,
            full_sigma_product: false,
            seed: 0,
            workers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_exponents.is_empty() || self.gamma_exponents.is_empty() || self.sigma_exponents.is_empty() {
            return Err(Error::InvalidParameter("grids must be nonempty".into()));
        }
        if self.fold_count == 0 {
            return Err(Error::InvalidParameter("fold_count must be at least 1".into()));
        }
        Ok(())
    }
}

fn pow2(exponents: &[i32]) -> Vec<f64> {
    let mut v: Vec<f64> = exponents.iter().map(|&e| 2f64.powi(e)).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Splits the seen classes into `(train, validation)`.
///
/// The classes are shuffled once with `seed`; fold `f` validates the window
/// of `round(ratio * S)` classes starting at `f * round(ratio * S)` (wrapping).
pub fn split_seen_classes(
    seen: &[ClassId],
    ratio: f64,
    fold_index: usize,
    seed: u64,
) -> Result<(Vec<ClassId>, Vec<ClassId>)> {
    let n = seen.len();
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParameter(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let n_val = (ratio * n as f64).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::InvalidParameter(format!(
            "ratio {ratio} leaves an empty side with {n} seen classes"
        )));
    }
    let mut order = seen.to_vec();
    order.sort_unstable();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let offset = (fold_index * n_val) % n;
    let mut val: Vec<ClassId> = (0..n_val).map(|i| order[(offset + i) % n]).collect();
    let mut train: Vec<ClassId> = order.into_iter().filter(|c| !val.contains(c)).collect();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// A fold's dataset: training samples of `train` classes stay labeled,
/// training samples of `val` classes become the test set. True unseen
/// classes and test rows are dropped.
pub fn fold_dataset(dataset: &Dataset, train: &[ClassId], val: &[ClassId]) -> Result<(Dataset, Vec<ClassId>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut truth = Vec::new();
    for (i, label) in dataset.labels().iter().enumerate() {
        let Some(c) = *label else { continue };
        if train.contains(&c) {
            rows.push(i);
            labels.push(Some(c));
        } else if val.contains(&c) {
            rows.push(i);
            labels.push(None);
            truth.push(c);
        }
    }
    let fold = dataset.subset(&rows, labels, train.to_vec(), val.to_vec())?;
    Ok((fold, truth))
}

/// One evaluated grid cell on one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub lambda: f64,
    pub gamma: f64,
    pub sigma_image: f64,
    /// Bandwidths in fusion-spec source order.
    pub sigma_sources: Vec<f64>,
    pub fold: usize,
    pub accuracy: f64,
}

impl TuneRow {
    fn key(&self) -> CellKey {
        CellKey::new(self.lambda, self.gamma, self.sigma_image, &self.sigma_sources, self.fold)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct CellKey(Vec<u64>);

impl CellKey {
    fn new(lambda: f64, gamma: f64, sigma_image: f64, sigma_sources: &[f64], fold: usize) -> Self {
        let mut bits = vec![lambda.to_bits(), gamma.to_bits(), sigma_image.to_bits()];
        bits.extend(sigma_sources.iter().map(|s| s.to_bits()));
        bits.push(fold as u64);
        Self(bits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub chosen: Hyperparams,
    /// Mean validation accuracy at the chosen setting.
    pub chosen_accuracy: f64,
    /// Every evaluated `(cell, fold)`, stage 1 first.
    pub table: Vec<TuneRow>,
}

#[derive(Clone, Debug)]
struct Cell {
    lambda: f64,
    gamma: f64,
    sigma_image: f64,
    sigma_sources: Vec<f64>,
}

impl Cell {
    fn hyper(&self, base: &Hyperparams, spec: &FusionSpec) -> Hyperparams {
        let mut h = base.clone();
        h.lambda = self.lambda;
        h.gamma = self.gamma;
        h.sigma_image = self.sigma_image;
        h.sigma_sources = spec.sources.iter().cloned().zip(self.sigma_sources.iter().copied()).collect();
        h
    }
}

struct Folds {
    data: Vec<(Dataset, Vec<ClassId>)>,
}

struct Runner<'a> {
    folds: Folds,
    spec: &'a FusionSpec,
    base: &'a Hyperparams,
    settings: &'a SolverSettings,
    cache: HashMap<CellKey, f64>,
    table: Vec<TuneRow>,
    pool: rayon::ThreadPool,
}

impl Runner<'_> {
    /// Mean accuracy over folds for each cell, in input order.
    fn score(&mut self, cells: &[Cell]) -> Result<Vec<f64>> {
        let n_folds = self.folds.data.len();
        let jobs: Vec<(usize, usize)> = (0..cells.len())
            .flat_map(|c| (0..n_folds).map(move |f| (c, f)))
            .collect();
        let (spec, base, settings, folds, cache) = (self.spec, self.base, self.settings, &self.folds, &self.cache);
        let rows: Vec<Result<TuneRow>> = self.pool.install(|| {
            jobs.par_iter()
                .map(|&(c, f)| {
                    let cell = &cells[c];
                    let key = CellKey::new(cell.lambda, cell.gamma, cell.sigma_image, &cell.sigma_sources, f);
                    let accuracy = match cache.get(&key) {
                        Some(&acc) => acc,
                        None => {
                            let (data, truth) = &folds.data[f];
                            let state =
                                propagate(data, data.test_features().view(), spec, &cell.hyper(base, spec), settings)?;
                            evaluate(&state.predicted, truth, data.unseen())?.mean_accuracy
                        }
                    };
                    Ok(TuneRow {
                        lambda: cell.lambda,
                        gamma: cell.gamma,
                        sigma_image: cell.sigma_image,
                        sigma_sources: cell.sigma_sources.clone(),
                        fold: f,
                        accuracy,
                    })
                })
                .collect()
        });
        let mut means = vec![0.0; cells.len()];
        for (row, &(c, _)) in rows.into_iter().zip(&jobs) {
            let row = row?;
            means[c] += row.accuracy / n_folds as f64;
            self.cache.insert(row.key(), row.accuracy);
            self.table.push(row);
        }
        Ok(means)
    }
}

/// First index attaining the maximum; callers order candidates so that the
/// first is the preferred tie winner.
fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Two-stage grid search. `previous` rows (e.g. from an interrupted run) are
/// reused instead of being recomputed.
pub fn tune(
    dataset: &Dataset,
    grid: &GridSpec,
    spec: &FusionSpec,
    base: &Hyperparams,
    settings: &SolverSettings,
    previous: &[TuneRow],
) -> Result<CvResult> {
    grid.validate()?;
    let (s, u) = (dataset.seen().len(), dataset.unseen().len());
    let ratio = grid.ratio.unwrap_or(u as f64 / (s + u) as f64);
    let mut folds = Vec::with_capacity(grid.fold_count);
    for f in 0..grid.fold_count {
        let (train, val) = split_seen_classes(dataset.seen(), ratio, f, grid.seed)?;
        folds.push(fold_dataset(dataset, &train, &val)?);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(grid.workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    let mut runner = Runner {
        folds: Folds { data: folds },
        spec,
        base,
        settings,
        cache: previous.iter().map(|r| (r.key(), r.accuracy)).collect(),
        table: Vec::new(),
        pool,
    };

    let n_src = spec.sources.len();
    let lambdas = pow2(&grid.lambda_exponents);
    let gammas = pow2(&grid.gamma_exponents);
    let sigmas = pow2(&grid.sigma_exponents);

    // Stage 1: all bandwidths at 1.
    let stage1: Vec<Cell> = lambdas
        .iter()
        .flat_map(|&lambda| {
            gammas.iter().map(move |&gamma| Cell {
                lambda,
                gamma,
                sigma_image: 1.0,
                sigma_sources: vec![1.0; n_src],
            })
        })
        .collect();
    let means = runner.score(&stage1)?;
    let best = argmax_first(&means);
    let mut current = stage1[best].clone();
    let mut current_acc = means[best];

    // Stage 2: bandwidths. Slot 0 is the image space, slots 1.. the sources.
    let slots: Vec<usize> = (usize::from(!spec.include_image)..=n_src).collect();
    let with_sigma = |base: &Cell, slot: usize, sigma: f64| {
        let mut c = base.clone();
        if slot == 0 {
            c.sigma_image = sigma;
        } else {
            c.sigma_sources[slot - 1] = sigma;
        }
        c
    };
    if grid.full_sigma_product {
        let mut cells = vec![current.clone()];
        for &slot in &slots {
            cells = cells
                .iter()
                .flat_map(|c| sigmas.iter().map(|&s| with_sigma(c, slot, s)).collect::<Vec<_>>())
                .collect();
        }
        // Cells are in lexicographic bandwidth order, smallest first.
        let means = runner.score(&cells)?;
        let best = argmax_first(&means);
        current = cells[best].clone();
        current_acc = means[best];
    } else {
        for &slot in &slots {
            let cells: Vec<Cell> = sigmas.iter().map(|&s| with_sigma(&current, slot, s)).collect();
            let means = runner.score(&cells)?;
            let best = argmax_first(&means);
            current = cells[best].clone();
            current_acc = means[best];
        }
    }

    Ok(CvResult {
        chosen: current.hyper(base, spec),
        chosen_accuracy: current_acc,
        table: runner.table,
    })
}

/// Writes `rows` as CSV with header
/// `lambda,gamma,sigma_image,sigma_<source>...,fold,accuracy`.
pub fn write_tune_table(path: &Path, sources: &[String], rows: &[TuneRow]) -> Result<()> {
    let io = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["lambda".to_string(), "gamma".into(), "sigma_image".into()];
    header.extend(sources.iter().map(|s| format!("sigma_{s}")));
    header.extend(["fold".to_string(), "accuracy".into()]);
    w.write_record(&header).map_err(io)?;
    for r in rows {
        if r.sigma_sources.len() != sources.len() {
            return Err(Error::DimensionMismatch(format!(
                "row has {} source bandwidths, table has {} sources",
                r.sigma_sources.len(),
                sources.len()
            )));
        }
        let mut rec: Vec<String> = [r.lambda, r.gamma, r.sigma_image]
            .iter()
            .chain(&r.sigma_sources)
            .map(f64::to_string)
            .collect();
        rec.push(r.fold.to_string());
        rec.push(r.accuracy.to_string());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a table written by [`write_tune_table`]. The header must name
/// exactly `sources`, in order.
pub fn read_tune_table(path: &Path, sources: &[String]) -> Result<Vec<TuneRow>> {
    let err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => err(e.to_string()),
    })?;
    let header: Vec<String> = r.headers().map_err(|e| err(e.to_string()))?.iter().map(String::from).collect();
    let mut expected = vec!["lambda".to_string(), "gamma".into(), "sigma_image".into()];
    expected.extend(sources.iter().map(|s| format!("sigma_{s}")));
    expected.extend(["fold".to_string(), "accuracy".into()]);
    if header != expected {
        return Err(err(format!("header {header:?} does not match {expected:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("not a number: {s:?}")));
    let n = sources.len();
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| err(e.to_string()))?;
            Ok(TuneRow {
                lambda: num(&rec[0])?,
                gamma: num(&rec[1])?,
                sigma_image: num(&rec[2])?,
                sigma_sources: (0..n).map(|i| num(&rec[3 + i])).collect::<Result<_>>()?,
                fold: rec[3 + n].parse().map_err(|_| err(format!("bad fold {:?}", &rec[3 + n])))?,
                accuracy: num(&rec[4 + n])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn awa_proportion() {
        let seen: Vec<ClassId> = (0..40).collect();
        let (train, val) = split_seen_classes(&seen, 10.0 / 50.0, 0, 3).unwrap();
        assert_eq!(val.len(), 8);
        assert_eq!(train.len(), 32);
    }

    #[test]
    fn smallest_split() {
        let (train, val) = split_seen_classes(&[4, 9], 0.5, 0, 1).unwrap();
        assert_eq!((train.len(), val.len()), (1, 1));
        let (train2, val2) = split_seen_classes(&[4, 9], 0.5, 1, 1).unwrap();
        assert_eq!(train, val2);
        assert_eq!(val, train2);
    }

    #[test]
    fn split_is_seeded_and_folds_differ() {
        let seen: Vec<ClassId> = (10..17).collect();
        let a = split_seen_classes(&seen, 0.3, 0, 11).unwrap();
        assert_eq!(a, split_seen_classes(&seen, 0.3, 0, 11).unwrap());
        let b = split_seen_classes(&seen, 0.3, 1, 11).unwrap();
        assert_ne!(a.1, b.1);
    }

    #[test]
    fn split_rejects_empty_side() {
        assert!(split_seen_classes(&[1, 2, 3], 0.1, 0, 0).is_err());
        assert!(split_seen_classes(&[1, 2], 0.9, 0, 0).is_err());
        assert!(split_seen_classes(&[1, 2], 1.0, 0, 0).is_err());
    }

    #[test]
    fn default_grid_sizes() {
        let g = GridSpec::default();
        assert_eq!(g.lambda_exponents.len(), 16);
        assert_eq!(g.gamma_exponents.len(), 16);
        assert_eq!(g.sigma_exponents.len(), 11);
        assert_eq!(pow2(&g.lambda_exponents)[0], 2f64.powi(-24));
        assert_eq!(*pow2(&g.sigma_exponents).last().unwrap(), 32.0);
    }

    #[test]
    fn tune_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let sources = vec!["att".to_string(), "w2v".to_string()];
        let rows = vec![TuneRow {
            lambda: 2f64.powi(-17),
            gamma: 0.1,
            sigma_image: 1.0,
            sigma_sources: vec![0.5, 32.0],
            fold: 1,
            accuracy: 2.0 / 3.0,
        }];
        write_tune_table(&path, &sources, &rows).unwrap();
        assert_eq!(read_tune_table(&path, &sources).unwrap(), rows);
        assert!(read_tune_table(&path, &sources[..1]).is_err());
        assert!(matches!(
            read_tune_table(&dir.path().join("nope.csv"), &sources),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax_first(&[0.5, 0.7, 0.7, 0.1]), 1);
    }
}
