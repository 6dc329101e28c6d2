//! Observation storage, CSV ingestion and training/estimation splits.
//!
//! A [`Dataset`] holds the outcome `y`, treatments `x`, controls `z1` and
//! instruments `z2`. Intercepts are never inserted automatically: include a
//! column of ones in `z1` when the model needs one. Clustered (longitudinal)
//! data are stored flat with one cluster id per row; moment evaluation stacks
//! the rows of each cluster into a single block.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column-name mapping used when reading a CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub y: String,
    pub x: Vec<String>,
    pub z1: Vec<String>,
    pub z2: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<String>,
}

impl Schema {
    pub fn new(y: &str, x: &[&str], z1: &[&str], z2: &[&str]) -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Schema {
            y: y.to_string(),
            x: own(x),
            z1: own(z1),
            z2: own(z2),
            cluster: None,
        }
    }

    pub fn with_cluster(mut self, column: &str) -> Self {
        self.cluster = Some(column.to_string());
        self
    }
}

/// Immutable observation set `(y, x, z1, z2)` with optional cluster ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z1: DMatrix<f64>,
    z2: DMatrix<f64>,
    cluster_ids: Option<Vec<i64>>,
    schema: Schema,
    blocks: Vec<Vec<usize>>,
}

impl Dataset {
    /// Builds a dataset, validating dimensions, finiteness and the order
    /// condition `d_z2 >= d_x`. Column names are taken from `schema`.
    pub fn new(
        y: DVector<f64>,
        x: DMatrix<f64>,
        z1: DMatrix<f64>,
        z2: DMatrix<f64>,
        cluster_ids: Option<Vec<i64>>,
        schema: Schema,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Argument("dataset has no rows".into()));
        }
        for (name, m) in [("x", &x), ("z1", &z1), ("z2", &z2)] {
            if m.nrows() != n {
                return Err(Error::Argument(format!(
                    "{name} has {} rows, expected {n}",
                    m.nrows()
                )));
            }
        }
        if x.ncols() == 0 {
            return Err(Error::Argument("at least one treatment column is required".into()));
        }
        if z1.ncols() == 0 {
            return Err(Error::Argument("at least one control column is required".into()));
        }
        if z2.ncols() < x.ncols() {
            return Err(Error::Identification(format!(
                "{} instrument column(s) for {} treatment(s); need d_z2 >= d_x",
                z2.ncols(),
                x.ncols()
            )));
        }
        if schema.x.len() != x.ncols() || schema.z1.len() != z1.ncols() || schema.z2.len() != z2.ncols() {
            return Err(Error::Schema("schema column counts do not match the data".into()));
        }
        let finite = y.iter().chain(x.iter()).chain(z1.iter()).chain(z2.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Argument("dataset contains NaN or infinite entries".into()));
        }
        if let Some(ids) = &cluster_ids {
            if ids.len() != n {
                return Err(Error::Argument(format!(
                    "{} cluster ids for {n} rows",
                    ids.len()
                )));
            }
        }
        let blocks = match &cluster_ids {
            None => (0..n).map(|i| vec![i]).collect(),
            Some(ids) => {
                let mut by_id: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
                for (i, id) in ids.iter().enumerate() {
                    by_id.entry(*id).or_default().push(i);
                }
                by_id.into_values().collect()
            }
        };
        Ok(Dataset {
            y,
            x,
            z1,
            z2,
            cluster_ids,
            schema,
            blocks,
        })
    }

    /// Convenience constructor with generated column names (`x1`, `z1_1`, ...).
    pub fn from_columns(y: DVector<f64>, x: DMatrix<f64>, z1: DMatrix<f64>, z2: DMatrix<f64>) -> Result<Self> {
        let names = |prefix: &str, k: usize| (1..=k).map(|j| format!("{prefix}{j}")).collect::<Vec<_>>();
        let schema = Schema {
            y: "y".into(),
            x: names("x", x.ncols()),
            z1: names("z1_", z1.ncols()),
            z2: names("z2_", z2.ncols()),
            cluster: None,
        };
        Dataset::new(y, x, z1, z2, None, schema)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dx(&self) -> usize {
        self.x.ncols()
    }

    pub fn dz1(&self) -> usize {
        self.z1.ncols()
    }

    pub fn dz2(&self) -> usize {
        self.z2.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z1(&self) -> &DMatrix<f64> {
        &self.z1
    }

    pub fn z2(&self) -> &DMatrix<f64> {
        &self.z2
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn cluster_ids(&self) -> Option<&[i64]> {
        self.cluster_ids.as_deref()
    }

    pub fn is_clustered(&self) -> bool {
        self.cluster_ids.is_some()
    }

    /// Row groups over which moments are stacked: singletons for flat data,
    /// clusters in ascending id order otherwise.
    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    /// Number of moment blocks (rows for flat data, clusters otherwise).
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        let pick = |m: &DMatrix<f64>| m.select_rows(rows.iter());
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        let ids = self.cluster_ids.as_ref().map(|ids| rows.iter().map(|&i| ids[i]).collect());
        Dataset::new(y, pick(&self.x), pick(&self.z1), pick(&self.z2), ids, self.schema.clone())
    }

    /// Returns a copy with one column rescaled. `block` is one of
    /// `"x"`, `"z1"`, `"z2"`.
    pub fn with_scaled_column(&self, block: &str, col: usize, factor: f64) -> Result<Dataset> {
        let mut out = self.clone();
        let m = match block {
            "x" => &mut out.x,
            "z1" => &mut out.z1,
            "z2" => &mut out.z2,
            other => return Err(Error::Argument(format!("unknown column block '{other}'"))),
        };
        if col >= m.ncols() {
            return Err(Error::Argument(format!("column {col} out of range")));
        }
        m.column_mut(col).scale_mut(factor);
        Ok(out)
    }
}

/// Reads a comma-delimited CSV with a header row.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Config(format!("cannot open {}: {e}", path.display())),
            _ => Error::Csv(e),
        })?;
    let headers = reader.headers()?.clone();
    let position = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in {}", path.display())))
    };
    let y_col = position(&schema.y)?;
    let x_cols = schema.x.iter().map(|c| position(c)).collect::<Result<Vec<_>>>()?;
    let z1_cols = schema.z1.iter().map(|c| position(c)).collect::<Result<Vec<_>>>()?;
    let z2_cols = schema.z2.iter().map(|c| position(c)).collect::<Result<Vec<_>>>()?;
    let cl_col = schema.cluster.as_deref().map(position).transpose()?;
    if z2_cols.len() < x_cols.len() {
        return Err(Error::Identification(format!(
            "schema maps {} instrument(s) for {} treatment(s); need d_z2 >= d_x",
            z2_cols.len(),
            x_cols.len()
        )));
    }

    let mut y = Vec::new();
    let (mut x, mut z1, mut z2) = (Vec::new(), Vec::new(), Vec::new());
    let mut ids = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                column: headers.get(c).unwrap_or("?").to_string(),
                message: format!("'{raw}' is not a number"),
            })
        };
        y.push(cell(y_col)?);
        for &c in &x_cols {
            x.push(cell(c)?);
        }
        for &c in &z1_cols {
            z1.push(cell(c)?);
        }
        for &c in &z2_cols {
            z2.push(cell(c)?);
        }
        if let Some(c) = cl_col {
            let raw = record.get(c).unwrap_or("").trim();
            let id = raw.parse::<i64>().map_err(|_| Error::Parse {
                row,
                column: headers.get(c).unwrap_or("?").to_string(),
                message: format!("'{raw}' is not an integer cluster id"),
            })?;
            ids.push(id);
        }
    }
    let n = y.len();
    let mat = |data: Vec<f64>, k: usize| DMatrix::from_row_slice(n, k, &data);
    Dataset::new(
        DVector::from_vec(y),
        mat(x, x_cols.len()),
        mat(z1, z1_cols.len()),
        mat(z2, z2_cols.len()),
        cl_col.map(|_| ids),
        schema.clone(),
    )
}

/// Writes the dataset as CSV using the schema's column names. Floats use the
/// shortest representation that round-trips exactly.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let s = &ds.schema;
    let mut header: Vec<&str> = vec![&s.y];
    header.extend(s.x.iter().map(String::as_str));
    header.extend(s.z1.iter().map(String::as_str));
    header.extend(s.z2.iter().map(String::as_str));
    if let (Some(c), true) = (&s.cluster, ds.is_clustered()) {
        header.push(c);
    }
    writer.write_record(&header)?;
    let mut rec: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        rec.clear();
        rec.push(ds.y[i].to_string());
        for m in [&ds.x, &ds.z1, &ds.z2] {
            rec.extend(m.row(i).iter().map(|v| v.to_string()));
        }
        if let (Some(_), Some(ids)) = (&s.cluster, &ds.cluster_ids) {
            rec.push(ids[i].to_string());
        }
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

/// Training-sample split parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

/// Randomly partitions the data into a training and an estimation sample.
/// Clustered data are split by whole clusters. Rows keep their original
/// relative order inside each part.
pub fn split_train(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train_fraction must lie in (0,1), got {}",
            spec.train_fraction
        )));
    }
    let n_blocks = ds.n_blocks();
    let n_train = (n_blocks as f64 * spec.train_fraction).round() as usize;
    let p = ds.dx() + ds.dz1();
    let needed = 10.max(p + 1);
    if n_train < needed {
        return Err(Error::Size(format!(
            "training sample would have {n_train} {}, need at least {needed}",
            if ds.is_clustered() { "clusters" } else { "rows" }
        )));
    }
    if n_train >= n_blocks {
        return Err(Error::Size("training sample leaves no estimation data".into()));
    }
    let mut order: Vec<usize> = (0..n_blocks).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let mut train_blocks = order[..n_train].to_vec();
    let mut est_blocks = order[n_train..].to_vec();
    train_blocks.sort_unstable();
    est_blocks.sort_unstable();
    let rows_of = |blocks: &[usize]| {
        let mut rows: Vec<usize> = blocks.iter().flat_map(|&b| ds.blocks()[b].iter().copied()).collect();
        rows.sort_unstable();
        rows
    };
    Ok((ds.select_rows(&rows_of(&train_blocks))?, ds.select_rows(&rows_of(&est_blocks))?))
}
