//! Dataset ingestion and feature engineering.
//!
//! Continuous features are min-max scaled into [0, 1] with ranges fitted on
//! the training split only; categorical features are one-hot encoded and
//! always treated as immutable (no perturbation ever lands on them). Splits
//! are stratified by label and every random choice comes from a seeded,
//! purpose-named stream (see [`crate::rng`]), so a pipeline rerun with the
//! same seed reproduces the same splits and bootstrap subsets exactly.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

// ── Schema ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
    #[serde(default)]
    pub immutable: bool,
}

/// Column declarations plus which column holds the label and which raw value
/// counts as the positive class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
    pub label: String,
    pub positive_label: String,
}

impl Schema {
    /// Validate and normalize: categorical columns need at least two levels
    /// and are forced immutable.
    pub fn normalize(mut self) -> Result<Self> {
        for col in &mut self.columns {
            match col.kind {
                ColumnKind::Categorical => {
                    let n_levels = col.levels.as_ref().map_or(0, Vec::len);
                    if n_levels < 2 {
                        return Err(Error::InvalidConfig(format!(
                            "categorical column {:?} must declare at least 2 levels",
                            col.name
                        )));
                    }
                    col.immutable = true;
                }
                ColumnKind::Continuous => {
                    if col.levels.is_some() {
                        return Err(Error::InvalidConfig(format!(
                            "continuous column {:?} must not declare levels",
                            col.name
                        )));
                    }
                }
            }
        }
        Ok(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Schema = serde_json::from_str(text)?;
        schema.normalize()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }
}

// ── Raw table ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum RawColumn {
    Continuous(Vec<f64>),
    /// Values stored as level indices into the schema's declared levels.
    Categorical(Vec<usize>),
}

/// Typed columns parsed from a CSV file, ordered as in the schema.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub columns: Vec<RawColumn>,
    pub labels: Vec<u8>,
}

impl RawTable {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }
}

/// Parse a CSV file with a header row against a schema. Rows with values
/// that fail to parse are rejected with their 1-based data row number.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<RawTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    parse_rows(schema, &headers, reader.records())
}

/// Same as [`load_csv`] but from an in-memory string (built-in datasets).
pub fn load_csv_str(text: &str, schema: &Schema) -> Result<RawTable> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    parse_rows(schema, &headers, reader.records())
}

fn parse_rows(
    schema: &Schema,
    headers: &csv::StringRecord,
    records: impl Iterator<Item = std::result::Result<csv::StringRecord, csv::Error>>,
) -> Result<RawTable> {
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn { name: name.to_string() })
    };
    let col_idx: Vec<usize> =
        schema.columns.iter().map(|c| find(&c.name)).collect::<Result<_>>()?;
    let label_idx = find(&schema.label)?;

    let mut columns: Vec<RawColumn> = schema
        .columns
        .iter()
        .map(|c| match c.kind {
            ColumnKind::Continuous => RawColumn::Continuous(Vec::new()),
            ColumnKind::Categorical => RawColumn::Categorical(Vec::new()),
        })
        .collect();
    let mut labels = Vec::new();

    for (row_0based, record) in records.enumerate() {
        let row = row_0based + 1;
        let record = record?;
        for (spec, (&idx, col)) in
            schema.columns.iter().zip(col_idx.iter().zip(columns.iter_mut()))
        {
            let raw = record.get(idx).unwrap_or("");
            match (spec.kind, col) {
                (ColumnKind::Continuous, RawColumn::Continuous(values)) => {
                    let v: f64 = raw.trim().parse().map_err(|_| Error::NonNumericValue {
                        row,
                        column: spec.name.clone(),
                        value: raw.to_string(),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::NonNumericValue {
                            row,
                            column: spec.name.clone(),
                            value: raw.to_string(),
                        });
                    }
                    values.push(v);
                }
                (ColumnKind::Categorical, RawColumn::Categorical(values)) => {
                    let levels = spec.levels.as_ref().expect("normalized schema");
                    let pos = levels.iter().position(|l| l == raw.trim()).ok_or_else(|| {
                        Error::UnknownCategory {
                            row,
                            column: spec.name.clone(),
                            value: raw.to_string(),
                        }
                    })?;
                    values.push(pos);
                }
                _ => unreachable!("column kind/storage mismatch"),
            }
        }
        let raw_label = record.get(label_idx).unwrap_or("").trim();
        labels.push(u8::from(raw_label == schema.positive_label));
    }
    Ok(RawTable { columns, labels })
}

// ── Transformed dataset ───────────────────────────────────────────────

/// Where a post-transform column came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnSource {
    Continuous { source: usize },
    OneHot { source: usize, level: usize },
}

/// Feature matrix in the transformed [0, 1] space plus everything needed to
/// interpret it: labels, schema, fitted scaling ranges, and the map from
/// post-transform columns back to schema columns.
#[derive(Debug, Clone)]
pub struct TabularDataset {
    pub x: Matrix,
    pub y: Vec<u8>,
    pub schema: Schema,
    /// (min, max) fitted on the training split, one per continuous column
    /// in schema order.
    pub ranges: Vec<(f64, f64)>,
    pub column_map: Vec<ColumnSource>,
    pub warnings: Vec<String>,
}

impl TabularDataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Labels as an `n x 1` float matrix for loss computations.
    pub fn y_matrix(&self) -> Matrix {
        Matrix::from_vec(self.y.len(), 1, self.y.iter().map(|&v| f64::from(v)).collect())
    }

    /// True exactly on one-hot columns and schema-flagged immutable
    /// continuous columns.
    pub fn immutable_mask(&self) -> Vec<bool> {
        self.column_map
            .iter()
            .map(|src| match *src {
                ColumnSource::OneHot { .. } => true,
                ColumnSource::Continuous { source } => self.schema.columns[source].immutable,
            })
            .collect()
    }

    /// Stratified row split into (rest, test). Row order inside each side
    /// follows the original order, so downstream seeding is stable.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (TabularDataset, TabularDataset) {
        let (train_idx, test_idx) = stratified_split(&self.y, test_fraction, seed);
        (self.subset(&train_idx), self.subset(&test_idx))
    }

    pub fn subset(&self, indices: &[usize]) -> TabularDataset {
        TabularDataset {
            x: self.x.gather_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            schema: self.schema.clone(),
            ranges: self.ranges.clone(),
            column_map: self.column_map.clone(),
            warnings: Vec::new(),
        }
    }

    /// Map transformed continuous columns of `x` back to raw units. Returns
    /// one vector per row, with entries `(schema_column, raw_value)`.
    pub fn inverse_continuous(&self, x: &Matrix) -> Vec<Vec<(usize, f64)>> {
        let mut cont_rank = vec![0usize; self.schema.columns.len()];
        let mut rank = 0;
        for (i, c) in self.schema.columns.iter().enumerate() {
            if c.kind == ColumnKind::Continuous {
                cont_rank[i] = rank;
                rank += 1;
            }
        }
        (0..x.rows())
            .map(|r| {
                self.column_map
                    .iter()
                    .enumerate()
                    .filter_map(|(j, src)| match *src {
                        ColumnSource::Continuous { source } => {
                            let (lo, hi) = self.ranges[cont_rank[source]];
                            Some((source, x.get(r, j) * (hi - lo) + lo))
                        }
                        ColumnSource::OneHot { .. } => None,
                    })
                    .collect()
            })
            .collect()
    }
}

/// Largest-remainder stratified allocation of `round(n * fraction)` test
/// rows across classes, then a seeded shuffle inside each class.
fn stratified_split(y: &[u8], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = y.len();
    let total_test = (n as f64 * test_fraction).round() as usize;
    let classes = [0u8, 1u8];
    let members: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| (0..n).filter(|&i| y[i] == c).collect())
        .collect();

    // ideal share per class, floor first, then distribute the remainder to
    // the largest fractional parts (ties: bigger class first)
    let ideal: Vec<f64> =
        members.iter().map(|m| m.len() as f64 * total_test as f64 / n as f64).collect();
    let mut take: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut rem: Vec<(usize, f64)> =
        ideal.iter().enumerate().map(|(i, v)| (i, v - v.floor())).collect();
    rem.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap().then(members[b.0].len().cmp(&members[a.0].len()))
    });
    let mut short = total_test.saturating_sub(take.iter().sum::<usize>());
    for (i, _) in rem {
        if short == 0 {
            break;
        }
        if take[i] < members[i].len() {
            take[i] += 1;
            short -= 1;
        }
    }

    let mut test_idx = Vec::with_capacity(total_test);
    let mut train_idx = Vec::with_capacity(n - total_test);
    for (c, m) in members.iter().enumerate() {
        let mut shuffled = m.clone();
        let mut stream = rng::stream(seed, &format!("split/class{c}"));
        shuffled.shuffle(&mut stream);
        let (test_part, train_part) = shuffled.split_at(take[c].min(shuffled.len()));
        test_idx.extend_from_slice(test_part);
        train_idx.extend_from_slice(train_part);
    }
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    (train_idx, test_idx)
}

/// Fit the feature transform on a stratified training split and apply it to
/// both sides. Out-of-range test values clip into [0, 1].
pub fn fit_transform(
    raw: &RawTable,
    schema: &Schema,
    split_seed: u64,
    test_fraction: f64,
) -> Result<(TabularDataset, TabularDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test fraction must be in (0,1), got {test_fraction}"
        )));
    }
    if raw.n_rows() == 0 {
        return Err(Error::EmptyDataset { op: "fit_transform" });
    }
    let (train_idx, test_idx) = stratified_split(&raw.labels, test_fraction, split_seed);

    let mut warnings = Vec::new();
    let mut ranges = Vec::new();
    for (spec, col) in schema.columns.iter().zip(&raw.columns) {
        if let RawColumn::Continuous(values) = col {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &i in &train_idx {
                lo = lo.min(values[i]);
                hi = hi.max(values[i]);
            }
            if hi <= lo {
                warnings.push(format!(
                    "column {:?} has zero variance on the training split; using range ({lo}, {})",
                    spec.name,
                    lo + 1.0
                ));
                hi = lo + 1.0;
            }
            ranges.push((lo, hi));
        }
    }

    let mut column_map = Vec::new();
    for (i, spec) in schema.columns.iter().enumerate() {
        match spec.kind {
            ColumnKind::Continuous => column_map.push(ColumnSource::Continuous { source: i }),
            ColumnKind::Categorical => {
                let n_levels = spec.levels.as_ref().expect("normalized schema").len();
                for level in 0..n_levels {
                    column_map.push(ColumnSource::OneHot { source: i, level });
                }
            }
        }
    }

    let build = |indices: &[usize], warnings: Vec<String>| -> TabularDataset {
        let mut x = Matrix::zeros(indices.len(), column_map.len());
        for (r, &i) in indices.iter().enumerate() {
            let mut j = 0;
            let mut cont_rank = 0;
            for col in &raw.columns {
                match col {
                    RawColumn::Continuous(values) => {
                        let (lo, hi) = ranges[cont_rank];
                        let v = ((values[i] - lo) / (hi - lo)).clamp(0.0, 1.0);
                        x.set(r, j, v);
                        j += 1;
                        cont_rank += 1;
                    }
                    RawColumn::Categorical(values) => {
                        let n_levels = match column_map[j] {
                            ColumnSource::OneHot { source, .. } => {
                                schema.columns[source].levels.as_ref().unwrap().len()
                            }
                            ColumnSource::Continuous { .. } => unreachable!(),
                        };
                        x.set(r, j + values[i], 1.0);
                        j += n_levels;
                    }
                }
            }
        }
        TabularDataset {
            x,
            y: indices.iter().map(|&i| raw.labels[i]).collect(),
            schema: schema.clone(),
            ranges: ranges.clone(),
            column_map: column_map.clone(),
            warnings,
        }
    };

    let train = build(&train_idx, warnings);
    let test = build(&test_idx, Vec::new());
    Ok((train, test))
}

// ── Bootstrap attack pools ────────────────────────────────────────────

/// A set of with-replacement row-index subsets of a test split, one per
/// simulated attack session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackPool {
    pub subsets: Vec<Vec<usize>>,
    pub subset_size: usize,
    pub seed: u64,
}

/// Draw `count` bootstrap subsets of `size` rows each from the test split.
pub fn bootstrap(test: &TabularDataset, count: usize, size: usize, seed: u64) -> Result<AttackPool> {
    if test.n() == 0 {
        return Err(Error::EmptyDataset { op: "bootstrap" });
    }
    if count == 0 {
        return Err(Error::InvalidConfig("bootstrap count must be at least 1".into()));
    }
    let n = test.n();
    let subsets = (0..count)
        .map(|b| {
            let mut stream = rng::stream(seed, &format!("bootstrap/{b}"));
            (0..size).map(|_| stream.gen_range(0..n)).collect()
        })
        .collect();
    Ok(AttackPool { subsets, subset_size: size, seed })
}

// ── Built-in datasets ─────────────────────────────────────────────────

const CANCER_CSV: &str = include_str!("../data/cancer.csv");

/// The 569-row breast-tumor diagnostic table (30 cell-nuclei measurements,
/// malignant = positive class), bundled for out-of-the-box runs.
pub fn builtin_cancer() -> (RawTable, Schema) {
    let names = [
        "mean radius", "mean texture", "mean perimeter", "mean area", "mean smoothness",
        "mean compactness", "mean concavity", "mean concave points", "mean symmetry",
        "mean fractal dimension", "radius error", "texture error", "perimeter error",
        "area error", "smoothness error", "compactness error", "concavity error",
        "concave points error", "symmetry error", "fractal dimension error", "worst radius",
        "worst texture", "worst perimeter", "worst area", "worst smoothness",
        "worst compactness", "worst concavity", "worst concave points", "worst symmetry",
        "worst fractal dimension",
    ];
    let schema = Schema {
        columns: names
            .iter()
            .map(|&n| ColumnSpec {
                name: n.to_string(),
                kind: ColumnKind::Continuous,
                levels: None,
                immutable: false,
            })
            .collect(),
        label: "diagnosis".to_string(),
        positive_label: "M".to_string(),
    };
    let raw = load_csv_str(CANCER_CSV, &schema).expect("bundled dataset parses");
    (raw, schema)
}

/// Two Gaussian blobs in the unit square: class 0 around (0.3, 0.3), class 1
/// around (0.7, 0.7). Already in transformed space (identity ranges).
pub fn synthetic_blobs(n: usize, std_dev: f64, seed: u64) -> TabularDataset {
    let mut stream = rng::stream(seed, "blobs");
    let gauss = |s: &mut rng::Stream| -> f64 {
        let u1: f64 = s.gen_range(f64::EPSILON..1.0);
        let u2: f64 = s.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let mut x = Matrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u8;
        let center = if label == 0 { 0.3 } else { 0.7 };
        x.set(i, 0, (center + std_dev * gauss(&mut stream)).clamp(0.0, 1.0));
        x.set(i, 1, (center + std_dev * gauss(&mut stream)).clamp(0.0, 1.0));
        y.push(label);
    }
    let schema = Schema {
        columns: (0..2)
            .map(|i| ColumnSpec {
                name: format!("x{i}"),
                kind: ColumnKind::Continuous,
                levels: None,
                immutable: false,
            })
            .collect(),
        label: "y".to_string(),
        positive_label: "1".to_string(),
    };
    TabularDataset {
        x,
        y,
        schema,
        ranges: vec![(0.0, 1.0), (0.0, 1.0)],
        column_map: vec![
            ColumnSource::Continuous { source: 0 },
            ColumnSource::Continuous { source: 1 },
        ],
        warnings: Vec::new(),
    }
}
