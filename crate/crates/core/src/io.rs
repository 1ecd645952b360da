//! Model files and CSV ingestion.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::blocks::CoefficientBlocks;
use crate::error::{Error, Result};
use crate::layout::{Effect, ResponseLayout};
use crate::likelihood::{Dataset, Family};
use crate::penalty::{GroupStructure, PenaltyMode};
use crate::solver::{FitResult, SupportEntry};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// One coefficient block `β_{k,j}`, values row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredBlock {
    /// 1-based response labels, `[]` for the overall effect.
    pub effect: Vec<usize>,
    /// 1-based predictor block.
    pub block: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingInfo {
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    /// Seconds since the Unix epoch; absent for deterministic runs.
    pub created_unix: Option<u64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub lambda_max: Option<f64>,
    pub validation_cross_entropy: Option<f64>,
}

/// A fitted model as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub categories: Vec<usize>,
    pub max_order: usize,
    pub family: Family,
    pub penalty: PenaltyMode,
    /// Predictor block sizes.
    pub partition: Vec<usize>,
    /// `num_effects × num_blocks`, effects in layout order.
    pub weights: Vec<Vec<f64>>,
    pub lambda: f64,
    pub blocks: Vec<StoredBlock>,
    pub support: Vec<SupportEntry>,
    pub training: TrainingInfo,
}

impl ModelFile {
    pub fn from_fit(fit: &FitResult, gs: &GroupStructure, training: TrainingInfo) -> Self {
        let beta = &fit.beta;
        let layout = beta.layout();
        let mut blocks = Vec::new();
        for (k, effect) in layout.effects().iter().enumerate() {
            for j in 0..beta.num_blocks() {
                let b = beta.block(k, j);
                blocks.push(StoredBlock {
                    effect: effect.labels(),
                    block: j + 1,
                    rows: b.nrows(),
                    cols: b.ncols(),
                    values: b.iter().copied().collect(),
                });
            }
        }
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            categories: layout.categories().to_vec(),
            max_order: layout.max_order(),
            family: fit.family,
            penalty: fit.penalty,
            partition: beta.partition().to_vec(),
            weights: gs.weights().rows().into_iter().map(|r| r.to_vec()).collect(),
            lambda: fit.lambda,
            blocks,
            support: fit.record().support,
            training,
        }
    }

    pub fn layout(&self) -> Result<ResponseLayout> {
        ResponseLayout::new(&self.categories, self.max_order)
    }

    pub fn basis(&self) -> Result<BasisSet> {
        Ok(BasisSet::new(&self.layout()?))
    }

    /// Coefficients, checking every stored block against the layout.
    pub fn beta(&self) -> Result<CoefficientBlocks> {
        let layout = self.layout()?;
        let mut beta = CoefficientBlocks::zeros(&layout, &self.partition).map_err(model_err)?;
        let expected = layout.num_effects() * self.partition.len();
        if self.blocks.len() != expected {
            return Err(Error::Model(format!(
                "{} coefficient blocks stored, layout needs {expected}",
                self.blocks.len()
            )));
        }
        let mut seen = vec![false; expected];
        for b in &self.blocks {
            let effect = Effect::from_labels(&b.effect).map_err(model_err)?;
            let k = layout
                .effect_index(&effect)
                .ok_or_else(|| Error::Model(format!("effect {effect} is not in the layout")))?;
            if b.block == 0 || b.block > self.partition.len() {
                return Err(Error::Model(format!("block index {} out of range", b.block)));
            }
            let j = b.block - 1;
            let mut view = beta.block_mut(k, j);
            if (b.rows, b.cols) != view.dim() || b.values.len() != b.rows * b.cols {
                return Err(Error::Model(format!(
                    "block ({effect}, {}) has shape {}x{} with {} values, expected {:?}",
                    b.block,
                    b.rows,
                    b.cols,
                    b.values.len(),
                    view.dim()
                )));
            }
            if b.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Model(format!(
                    "block ({effect}, {}) has non-finite values",
                    b.block
                )));
            }
            seen[k * self.partition.len() + j] = true;
            for (dst, src) in view.iter_mut().zip(&b.values) {
                *dst = *src;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Model(
                "some coefficient blocks are stored twice or missing".into(),
            ));
        }
        Ok(beta)
    }

    pub fn group_structure(&self) -> Result<GroupStructure> {
        let layout = self.layout()?;
        let rows = self.weights.len();
        let cols = self.partition.len();
        if self.weights.iter().any(|r| r.len() != cols) {
            return Err(Error::Model("weight rows do not match the block count".into()));
        }
        let w = Array2::from_shape_vec((rows, cols), self.weights.iter().flatten().copied().collect())
            .map_err(|e| Error::Model(e.to_string()))?;
        GroupStructure::with_weights(&layout, &self.partition, self.penalty, w).map_err(model_err)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let v: Version = serde_json::from_str(text).map_err(|e| Error::Model(e.to_string()))?;
        if v.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Model(format!(
                "format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
                v.format_version
            )));
        }
        let model: ModelFile = serde_json::from_str(text).map_err(|e| Error::Model(e.to_string()))?;
        model.beta()?;
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn model_err(e: Error) -> Error {
    Error::Model(e.to_string())
}

/// A numeric CSV table with its header and the file line of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub values: Array2<f64>,
    pub lines: Vec<u64>,
}

/// Reads a comma-separated file with a header row; every other field must
/// parse as a number.
pub fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path)?;
    parse_table(&text, &path.display().to_string())
}

pub fn parse_table(text: &str, name: &str) -> Result<Table> {
    let err = |message: String| Error::Csv {
        path: name.to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(err("missing header row".into()));
    }
    let mut flat = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| match e.position() {
            Some(pos) => err(format!("line {}: {e}", pos.line())),
            None => err(e.to_string()),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                err(format!(
                    "line {line}, column {} ({}): cannot parse '{field}' as a number",
                    c + 1,
                    header[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(err(format!(
                    "line {line}, column {}: value '{field}' is not finite",
                    c + 1
                )));
            }
            flat.push(v);
        }
        lines.push(line);
    }
    if lines.is_empty() {
        return Err(err("no data rows".into()));
    }
    let values = Array2::from_shape_vec((lines.len(), header.len()), flat).map_err(|e| err(e.to_string()))?;
    Ok(Table { header, values, lines })
}

/// Responses as `n × |J|` counts, or as `n × q` 1-based category codes that
/// are expanded to one-hot rows in `vec_J` order.
pub fn responses_from_table(table: &Table, layout: &ResponseLayout, name: &str) -> Result<Array2<f64>> {
    let cols = table.values.ncols();
    let err = |message: String| Error::Csv {
        path: name.to_string(),
        message,
    };
    if cols == layout.card() {
        for ((i, c), &v) in table.values.indexed_iter() {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(err(format!(
                    "line {}, column {}: count {v} is not a nonnegative integer",
                    table.lines[i],
                    c + 1
                )));
            }
        }
        Ok(table.values.clone())
    } else if cols == layout.num_responses() {
        codes_to_counts(&table.values, layout).map_err(|e| match e {
            CodeError { row, col, value } => err(format!(
                "line {}, column {}: code {value} is not in 1..={}",
                table.lines[row],
                col + 1,
                layout.categories()[col]
            )),
        })
    } else {
        Err(err(format!(
            "Y has {cols} columns; expected |J| = {} counts or q = {} category codes",
            layout.card(),
            layout.num_responses()
        )))
    }
}

/// Position of an invalid category code (0-based row and column).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodeError {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// One-hot counts from 1-based category codes.
pub fn codes_to_counts(codes: &Array2<f64>, layout: &ResponseLayout) -> std::result::Result<Array2<f64>, CodeError> {
    let mut y = Array2::zeros((codes.nrows(), layout.card()));
    let mut cell = vec![0; layout.num_responses()];
    for (i, row) in codes.rows().into_iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let jl = layout.categories()[c];
            if v.fract() != 0.0 || v < 1.0 || v > jl as f64 {
                return Err(CodeError {
                    row: i,
                    col: c,
                    value: v,
                });
            }
            cell[c] = v as usize - 1;
        }
        let idx = layout.flat_index(&cell).expect("codes are in range");
        y[[i, idx]] = 1.0;
    }
    Ok(y)
}

/// Reads `X` and `Y` files into a dataset checked against the layout and
/// family.
pub fn read_dataset(x_path: &Path, y_path: &Path, layout: &ResponseLayout, family: Family) -> Result<Dataset> {
    let x = read_table(x_path)?;
    let y_table = read_table(y_path)?;
    let y = responses_from_table(&y_table, layout, &y_path.display().to_string())?;
    if x.values.nrows() != y.nrows() {
        return Err(Error::Data(format!(
            "{} has {} rows but {} has {}",
            x_path.display(),
            x.values.nrows(),
            y_path.display(),
            y.nrows()
        )));
    }
    let data = Dataset::new(x.values, y)?;
    data.validate(layout.card(), family).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", y_path.display())),
        other => other,
    })?;
    Ok(data)
}

/// Joint category as a 1-based tuple, e.g. `(1,2,1,3)`.
pub fn cell_label(layout: &ResponseLayout, idx: usize) -> String {
    let parts: Vec<String> = layout.cell(idx).iter().map(|c| (c + 1).to_string()).collect();
    format!("({})", parts.join(","))
}

/// Probabilities CSV: one column per joint category in `vec_J` order plus
/// the most probable category.
pub fn probabilities_csv(layout: &ResponseLayout, probs: &Array2<f64>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..layout.card())
        .map(|i| format!("p{}", cell_label(layout, i).replace(['(', ')'], "").replace(',', "_")))
        .collect();
    header.push("argmax".into());
    let csv_err = |e: csv::Error| Error::Csv {
        path: "<output>".into(),
        message: e.to_string(),
    };
    w.write_record(&header).map_err(csv_err)?;
    for row in probs.rows() {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(cell_label(layout, best));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv {
        path: "<output>".into(),
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Writes a numeric matrix with the given header.
pub fn matrix_csv(header: &[String], m: &Array2<f64>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv {
        path: "<output>".into(),
        message: e.to_string(),
    };
    w.write_record(header).map_err(csv_err)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv {
        path: "<output>".into(),
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
