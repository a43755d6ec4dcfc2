//! Dataset ingestion and class prototypes.
//!
//! A dataset directory looks like this:
//!
//! ```text
//! features.csv          N rows of D comma-separated reals
//! labels.csv            N rows, one class id each; -1 marks a test sample
//! labels_true.csv       optional, same shape, true labels for evaluation
//! splits.csv            "seen: id,id,..." and "unseen: id,id,..."
//! semantic/<name>.csv   S+U rows of "id,e1,e2,..."
//! ```
//!
//! `features.bin` (little-endian `f32`) plus `shape.txt` (`"N D"`) may stand
//! in for `features.csv`. Values are always held as `f64` in memory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Opaque class identifier as it appears on disk.
pub type ClassId = i64;

/// Marker used in `labels.csv` for test samples whose label is hidden.
pub const HIDDEN_LABEL: ClassId = -1;

/// Which representation space a set of prototypes or a graph lives in.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Space {
    Image,
    Semantic(String),
}

impl std::fmt::Display for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Space::Image => f.write_str("image"),
            Space::Semantic(name) => f.write_str(name),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct IngestConfig {
    /// Semantic sources to load. `None` loads every table under `semantic/`.
    pub sources: Option<Vec<String>>,
    /// Read `features.bin` even when `features.csv` exists.
    pub prefer_binary: bool,
}

/// A validated zero-shot dataset.
///
/// Seen and unseen classes are kept sorted by id; semantic tables are stored
/// with seen-class rows first and unseen-class rows after, both in that
/// sorted order. Test samples carry no label at all.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<Option<ClassId>>,
    seen: Vec<ClassId>,
    unseen: Vec<ClassId>,
    semantic: BTreeMap<String, Array2<f64>>,
}

impl Dataset {
    /// Validates and assembles a dataset. Class lists are sorted here, and
    /// each semantic table is given as `(class id, embedding)` rows in any
    /// order.
    pub fn new(
        features: Array2<f64>,
        labels: Vec<Option<ClassId>>,
        mut seen: Vec<ClassId>,
        mut unseen: Vec<ClassId>,
        semantic_rows: BTreeMap<String, Vec<(ClassId, Vec<f64>)>>,
    ) -> Result<Self> {
        seen.sort_unstable();
        unseen.sort_unstable();
        check_unique(&seen)?;
        check_unique(&unseen)?;
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::DimensionMismatch("feature matrix is empty".into()));
        }
        if seen.is_empty() || unseen.is_empty() {
            return Err(Error::InvalidParameter(
                "need at least one seen and one unseen class".into(),
            ));
        }
        let seen_set: HashSet<_> = seen.iter().copied().collect();
        let unseen_set: HashSet<_> = unseen.iter().copied().collect();
        if let Some(&c) = unseen.iter().find(|c| seen_set.contains(c)) {
            return Err(Error::OverlappingSplits(c));
        }
        if labels.len() != features.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.nrows()
            )));
        }
        for &c in labels.iter().flatten() {
            if unseen_set.contains(&c) {
                return Err(Error::UnseenTrainingLabel(c));
            }
            if !seen_set.contains(&c) {
                return Err(Error::UnknownClass(c));
            }
        }

        let order: Vec<ClassId> = seen.iter().chain(unseen.iter()).copied().collect();
        let index: HashMap<ClassId, usize> =
            order.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut semantic = BTreeMap::new();
        for (name, rows) in semantic_rows {
            if rows.len() != order.len() {
                return Err(Error::EmbeddingRowCount {
                    source_name: name,
                    expected: order.len(),
                    found: rows.len(),
                });
            }
            let dim = rows[0].1.len();
            if dim == 0 {
                return Err(Error::DimensionMismatch(format!(
                    "semantic table {name} has no embedding columns"
                )));
            }
            let mut table = Array2::zeros((order.len(), dim));
            let mut filled = vec![false; order.len()];
            for (class, emb) in rows {
                let &i = index.get(&class).ok_or(Error::UnknownClass(class))?;
                if filled[i] {
                    return Err(Error::DuplicateClassRow {
                        source_name: name,
                        class,
                    });
                }
                if emb.len() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "semantic table {name}: row for class {class} has {} columns, expected {dim}",
                        emb.len()
                    )));
                }
                filled[i] = true;
                table.row_mut(i).assign(&ArrayView1::from(&emb));
            }
            semantic.insert(name, table);
        }
        if semantic.is_empty() {
            return Err(Error::InvalidParameter("no semantic source".into()));
        }

        Ok(Self {
            features,
            labels,
            seen,
            unseen,
            semantic,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[Option<ClassId>] {
        &self.labels
    }

    pub fn seen(&self) -> &[ClassId] {
        &self.seen
    }

    pub fn unseen(&self) -> &[ClassId] {
        &self.unseen
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn source_names(&self) -> impl Iterator<Item = &str> {
        self.semantic.keys().map(String::as_str)
    }

    /// Semantic table for `name`, rows ordered seen then unseen.
    pub fn semantic(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        self.semantic
            .get(name)
            .map(|t| t.view())
            .ok_or_else(|| Error::UnknownSource(name.to_string()))
    }

    /// Indices of labeled (training) rows, ascending.
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i].is_some())
            .collect()
    }

    /// Indices of unlabeled (test) rows, ascending.
    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i].is_none())
            .collect()
    }

    pub fn train_features(&self) -> Array2<f64> {
        self.features.select(Axis(0), &self.train_indices())
    }

    pub fn test_features(&self) -> Array2<f64> {
        self.features.select(Axis(0), &self.test_indices())
    }

    /// Training labels as dense seen-class indices, in training-row order.
    pub fn train_seen_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .flatten()
            .map(|c| self.seen.binary_search(c).expect("validated label"))
            .collect()
    }

    /// Dense index of an unseen class.
    pub fn unseen_index(&self, class: ClassId) -> Option<usize> {
        self.unseen.binary_search(&class).ok()
    }

    /// The same data restricted to the named semantic sources.
    pub fn with_sources(&self, names: &[String]) -> Result<Self> {
        let mut semantic = BTreeMap::new();
        for name in names {
            let table = self
                .semantic
                .get(name)
                .ok_or_else(|| Error::UnknownSource(name.clone()))?;
            semantic.insert(name.clone(), table.clone());
        }
        if semantic.is_empty() {
            return Err(Error::InvalidParameter("no semantic source".into()));
        }
        Ok(Self {
            semantic,
            ..self.clone()
        })
    }

    fn semantic_rows(&self) -> BTreeMap<String, Vec<(ClassId, Vec<f64>)>> {
        let order: Vec<ClassId> = self.seen.iter().chain(&self.unseen).copied().collect();
        self.semantic
            .iter()
            .map(|(name, table)| {
                let rows = order
                    .iter()
                    .zip(table.rows())
                    .map(|(&c, r)| (c, r.to_vec()))
                    .collect();
                (name.clone(), rows)
            })
            .collect()
    }

    /// A new dataset over feature rows `rows` with labels `labels` and a new
    /// class split; semantic rows are carried over for `seen ∪ unseen`.
    pub(crate) fn subset(
        &self,
        rows: &[usize],
        labels: Vec<Option<ClassId>>,
        seen: Vec<ClassId>,
        unseen: Vec<ClassId>,
    ) -> Result<Self> {
        let keep: HashSet<ClassId> = seen.iter().chain(&unseen).copied().collect();
        let semantic = self
            .semantic_rows()
            .into_iter()
            .map(|(name, rows)| {
                let rows = rows.into_iter().filter(|(c, _)| keep.contains(c)).collect();
                (name, rows)
            })
            .collect();
        Self::new(self.features.select(Axis(0), rows), labels, seen, unseen, semantic)
    }
}

fn check_unique(ids: &[ClassId]) -> Result<()> {
    match ids.windows(2).find(|w| w[0] == w[1]) {
        Some(w) => Err(Error::InvalidParameter(format!(
            "class {} listed twice in a split",
            w[0]
        ))),
        None => Ok(()),
    }
}

/// Per-class representative vectors in one space.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypes {
    pub space: Space,
    pub classes: Vec<ClassId>,
    /// One row per class; rows of absent classes are zero.
    pub vectors: Array2<f64>,
    pub present: Vec<bool>,
}

impl ClassPrototypes {
    /// Semantic prototypes are the embedding rows themselves.
    pub fn semantic(name: &str, classes: Vec<ClassId>, table: ArrayView2<'_, f64>) -> Self {
        assert_eq!(classes.len(), table.nrows());
        Self {
            space: Space::Semantic(name.to_string()),
            present: vec![true; classes.len()],
            classes,
            vectors: table.to_owned(),
        }
    }

    pub fn get(&self, class: ClassId) -> Option<ArrayView1<'_, f64>> {
        let i = self.classes.iter().position(|&c| c == class)?;
        self.present[i].then(|| self.vectors.row(i))
    }
}

/// Image-space class means.
///
/// `assignment[i]` gives the class of feature row `i`; rows assigned to
/// `None` or to a class outside `classes` are skipped. Sums run over rows in
/// ascending order, so recomputation is bitwise reproducible. Classes with no
/// rows are flagged absent rather than treated as an error.
pub fn class_prototypes(
    features: ArrayView2<'_, f64>,
    assignment: &[Option<ClassId>],
    classes: &[ClassId],
) -> ClassPrototypes {
    assert_eq!(features.nrows(), assignment.len());
    let index: HashMap<ClassId, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut sums = Array2::<f64>::zeros((classes.len(), features.ncols()));
    let mut counts = vec![0usize; classes.len()];
    for (row, class) in features.rows().into_iter().zip(assignment) {
        if let Some(&k) = class.as_ref().and_then(|c| index.get(c)) {
            let mut acc = sums.row_mut(k);
            acc += &row;
            counts[k] += 1;
        }
    }
    for (mut acc, &n) in sums.rows_mut().into_iter().zip(&counts) {
        if n > 0 {
            acc /= n as f64;
        }
    }
    ClassPrototypes {
        space: Space::Image,
        classes: classes.to_vec(),
        vectors: sums,
        present: counts.iter().map(|&n| n > 0).collect(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn csv_records(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(path, e.to_string()))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        out.push(rec.iter().map(str::to_string).collect());
    }
    Ok(out)
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| parse_err(path, format!("not a number: {s:?}")))
}

fn parse_id(path: &Path, s: &str) -> Result<ClassId> {
    s.parse()
        .map_err(|_| parse_err(path, format!("not a class id: {s:?}")))
}

/// Reads a headerless CSV of reals into a dense matrix.
pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let records = csv_records(path)?;
    let rows = records.len();
    let cols = records.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows * cols);
    for (i, rec) in records.iter().enumerate() {
        if rec.len() != cols {
            return Err(Error::DimensionMismatch(format!(
                "{}: row {} has {} columns, expected {cols}",
                path.display(),
                i + 1,
                rec.len()
            )));
        }
        for v in rec {
            data.push(parse_f64(path, v)?);
        }
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))
}

fn read_features_bin(dir: &Path) -> Result<Array2<f64>> {
    let shape_path = dir.join("shape.txt");
    let shape = read_text(&shape_path)?;
    let dims: Vec<usize> = shape
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| parse_err(&shape_path, "expected \"N D\"")))
        .collect::<Result<_>>()?;
    let [n, d] = dims[..] else {
        return Err(parse_err(&shape_path, "expected \"N D\""));
    };
    let bin_path = dir.join("features.bin");
    if !bin_path.exists() {
        return Err(Error::MissingFile(bin_path));
    }
    let bytes = fs::read(&bin_path).map_err(|source| Error::Io {
        path: bin_path.clone(),
        source,
    })?;
    if bytes.len() != n * d * 4 {
        return Err(Error::DimensionMismatch(format!(
            "features.bin holds {} bytes, shape {n}x{d} needs {}",
            bytes.len(),
            n * d * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Array2::from_shape_vec((n, d), data).map_err(|e| Error::DimensionMismatch(e.to_string()))
}

fn read_labels(path: &Path) -> Result<Vec<ClassId>> {
    csv_records(path)?
        .iter()
        .map(|rec| match rec.as_slice() {
            [v] => parse_id(path, v),
            _ => Err(parse_err(path, "expected one class id per row")),
        })
        .collect()
}

fn read_splits(path: &Path) -> Result<(Vec<ClassId>, Vec<ClassId>)> {
    let text = read_text(path)?;
    let mut seen = None;
    let mut unseen = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, ids) = line
            .split_once(':')
            .ok_or_else(|| parse_err(path, format!("malformed line {line:?}")))?;
        let ids = ids
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| parse_id(path, s))
            .collect::<Result<Vec<_>>>()?;
        match key.trim() {
            "seen" => seen = Some(ids),
            "unseen" => unseen = Some(ids),
            other => return Err(parse_err(path, format!("unknown split {other:?}"))),
        }
    }
    match (seen, unseen) {
        (Some(s), Some(u)) => Ok((s, u)),
        _ => Err(parse_err(path, "need both \"seen:\" and \"unseen:\" lines")),
    }
}

fn read_semantic(path: &Path) -> Result<Vec<(ClassId, Vec<f64>)>> {
    csv_records(path)?
        .iter()
        .map(|rec| {
            let (id, rest) = rec
                .split_first()
                .ok_or_else(|| parse_err(path, "empty row"))?;
            let emb = rest
                .iter()
                .map(|v| parse_f64(path, v))
                .collect::<Result<_>>()?;
            Ok((parse_id(path, id)?, emb))
        })
        .collect()
}

fn list_sources(dir: &Path) -> Result<Vec<String>> {
    let sem_dir = dir.join("semantic");
    if !sem_dir.is_dir() {
        return Err(Error::MissingFile(sem_dir));
    }
    let entries = fs::read_dir(&sem_dir).map_err(|source| Error::Io {
        path: sem_dir.clone(),
        source,
    })?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|source| Error::Io {
                path: sem_dir.clone(),
                source,
            })?
            .path();
        if path.extension().is_some_and(|e| e == "csv") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path, config: &IngestConfig) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let csv_path = dir.join("features.csv");
    let features = if config.prefer_binary || !csv_path.exists() {
        if dir.join("features.bin").exists() {
            read_features_bin(dir)?
        } else {
            read_matrix_csv(&csv_path)?
        }
    } else {
        read_matrix_csv(&csv_path)?
    };
    let labels = read_labels(&dir.join("labels.csv"))?
        .into_iter()
        .map(|c| (c != HIDDEN_LABEL).then_some(c))
        .collect();
    let (seen, unseen) = read_splits(&dir.join("splits.csv"))?;
    let names = match &config.sources {
        Some(names) => names.clone(),
        None => list_sources(dir)?,
    };
    let mut semantic = BTreeMap::new();
    for name in names {
        let rows = read_semantic(&dir.join("semantic").join(format!("{name}.csv")))?;
        semantic.insert(name, rows);
    }
    Dataset::new(features, labels, seen, unseen, semantic)
}

/// True labels of the test rows, in test-row order, if `labels_true.csv`
/// exists. Only evaluation code should call this.
pub fn load_test_truth(dir: &Path, dataset: &Dataset) -> Result<Option<Vec<ClassId>>> {
    let path = dir.join("labels_true.csv");
    if !path.exists() {
        return Ok(None);
    }
    let all = read_labels(&path)?;
    if all.len() != dataset.n_samples() {
        return Err(Error::DimensionMismatch(format!(
            "labels_true.csv has {} rows, expected {}",
            all.len(),
            dataset.n_samples()
        )));
    }
    let truth: Vec<ClassId> = dataset.test_indices().iter().map(|&i| all[i]).collect();
    if let Some(&c) = truth.iter().find(|&&c| dataset.unseen_index(c).is_none()) {
        return Err(Error::UnknownClass(c));
    }
    Ok(Some(truth))
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn join_row(values: impl IntoIterator<Item = f64>) -> String {
    values
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Writes a headerless CSV matrix; values use shortest round-trip formatting.
pub fn write_matrix_csv(path: &Path, m: ArrayView2<'_, f64>) -> Result<()> {
    let mut w = create_file(path)?;
    for row in m.rows() {
        writeln!(w, "{}", join_row(row.iter().copied())).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `dataset` in the directory layout read by [`load_dataset`].
/// `truth`, when given, holds the true test labels in test-row order.
pub fn save_dataset(dir: &Path, dataset: &Dataset, truth: Option<&[ClassId]>) -> Result<Vec<PathBuf>> {
    let sem_dir = dir.join("semantic");
    fs::create_dir_all(&sem_dir).map_err(io_err(&sem_dir))?;
    let mut written = Vec::new();

    let path = dir.join("features.csv");
    write_matrix_csv(&path, dataset.features())?;
    written.push(path);

    let path = dir.join("labels.csv");
    let mut w = create_file(&path)?;
    for l in dataset.labels() {
        writeln!(w, "{}", l.unwrap_or(HIDDEN_LABEL)).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    written.push(path);

    if let Some(truth) = truth {
        let test = dataset.test_indices();
        if truth.len() != test.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} truth labels for {} test rows",
                truth.len(),
                test.len()
            )));
        }
        let mut full: Vec<ClassId> = dataset.labels().iter().map(|l| l.unwrap_or(HIDDEN_LABEL)).collect();
        for (&i, &c) in test.iter().zip(truth) {
            full[i] = c;
        }
        let path = dir.join("labels_true.csv");
        let mut w = create_file(&path)?;
        for c in full {
            writeln!(w, "{c}").map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);
    }

    let path = dir.join("splits.csv");
    let ids = |v: &[ClassId]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
    fs::write(
        &path,
        format!("seen: {}\nunseen: {}\n", ids(dataset.seen()), ids(dataset.unseen())),
    )
    .map_err(io_err(&path))?;
    written.push(path);

    for (name, rows) in dataset.semantic_rows() {
        let path = sem_dir.join(format!("{name}.csv"));
        let mut w = create_file(&path)?;
        for (c, emb) in rows {
            writeln!(w, "{c},{}", join_row(emb)).map_err(io_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

/// Writes features in the packed binary form (`features.bin` + `shape.txt`).
pub fn write_features_bin(dir: &Path, features: ArrayView2<'_, f64>) -> Result<()> {
    let path = dir.join("features.bin");
    let mut w = create_file(&path)?;
    for &v in features.iter() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    let shape = dir.join("shape.txt");
    fs::write(&shape, format!("{} {}\n", features.nrows(), features.ncols())).map_err(io_err(&shape))
}
