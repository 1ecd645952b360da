use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{Effect, ResponseLayout};

/// Coefficients `β` stored as a stacked `total_dim × p` matrix, with block
/// views `β_{k,j}` over effects `k` and predictor blocks `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBlocks {
    layout: ResponseLayout,
    partition: Vec<usize>,
    col_offsets: Vec<usize>,
    stacked: Array2<f64>,
}

fn validate_partition(partition: &[usize]) -> Result<Vec<usize>> {
    if partition.is_empty() || partition.iter().any(|&p| p == 0) {
        return Err(Error::Dimension(format!(
            "predictor partition {partition:?} must be non-empty with positive sizes"
        )));
    }
    let mut offsets = Vec::with_capacity(partition.len());
    let mut acc = 0;
    for &p in partition {
        offsets.push(acc);
        acc += p;
    }
    Ok(offsets)
}

impl CoefficientBlocks {
    pub fn zeros(layout: &ResponseLayout, partition: &[usize]) -> Result<Self> {
        let p = partition.iter().sum();
        Self::from_stacked(layout, partition, Array2::zeros((layout.total_dim(), p)))
    }

    pub fn from_stacked(layout: &ResponseLayout, partition: &[usize], stacked: Array2<f64>) -> Result<Self> {
        let col_offsets = validate_partition(partition)?;
        let p: usize = partition.iter().sum();
        if stacked.dim() != (layout.total_dim(), p) {
            return Err(Error::Dimension(format!(
                "stacked coefficients have shape {:?}, expected ({}, {})",
                stacked.dim(),
                layout.total_dim(),
                p
            )));
        }
        Ok(CoefficientBlocks {
            layout: layout.clone(),
            partition: partition.to_vec(),
            col_offsets,
            stacked,
        })
    }

    /// Same layout and partition, new values.
    pub fn with_values(&self, stacked: Array2<f64>) -> Result<Self> {
        Self::from_stacked(&self.layout, &self.partition, stacked)
    }

    pub fn layout(&self) -> &ResponseLayout {
        &self.layout
    }

    pub fn partition(&self) -> &[usize] {
        &self.partition
    }

    pub fn num_blocks(&self) -> usize {
        self.partition.len()
    }

    pub fn num_predictors(&self) -> usize {
        self.stacked.ncols()
    }

    pub fn cols(&self, block: usize) -> std::ops::Range<usize> {
        self.col_offsets[block]..self.col_offsets[block] + self.partition[block]
    }

    pub fn stacked(&self) -> &Array2<f64> {
        &self.stacked
    }

    pub fn stacked_mut(&mut self) -> &mut Array2<f64> {
        &mut self.stacked
    }

    pub fn into_stacked(self) -> Array2<f64> {
        self.stacked
    }

    pub fn block(&self, effect: usize, block: usize) -> ArrayView2<'_, f64> {
        self.stacked.slice(s![self.layout.rows(effect), self.cols(block)])
    }

    pub fn block_mut(&mut self, effect: usize, block: usize) -> ArrayViewMut2<'_, f64> {
        let rows = self.layout.rows(effect);
        let cols = self.cols(block);
        self.stacked.slice_mut(s![rows, cols])
    }

    pub fn block_norm_sq(&self, effect: usize, block: usize) -> f64 {
        self.block(effect, block).iter().map(|v| v * v).sum()
    }

    pub fn block_norm(&self, effect: usize, block: usize) -> f64 {
        self.block_norm_sq(effect, block).sqrt()
    }

    pub fn is_zero_block(&self, effect: usize, block: usize) -> bool {
        self.block(effect, block).iter().all(|&v| v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.stacked.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Plain serializable form of [`CoefficientBlocks`] including its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlocksRecord {
    pub categories: Vec<usize>,
    pub max_order: usize,
    /// Effects as 1-based response labels, `[]` for the overall effect.
    pub effects: Vec<Vec<usize>>,
    pub partition: Vec<usize>,
    /// Rows of the stacked `total_dim × p` matrix.
    pub stacked: Vec<Vec<f64>>,
}

impl From<&CoefficientBlocks> for BlocksRecord {
    fn from(beta: &CoefficientBlocks) -> Self {
        BlocksRecord {
            categories: beta.layout.categories().to_vec(),
            max_order: beta.layout.max_order(),
            effects: beta.layout.effects().iter().map(Effect::labels).collect(),
            partition: beta.partition.clone(),
            stacked: beta.stacked.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

impl BlocksRecord {
    pub fn to_blocks(&self) -> Result<CoefficientBlocks> {
        let effects = self
            .effects
            .iter()
            .map(|l| Effect::from_labels(l))
            .collect::<Result<Vec<_>>>()?;
        let layout = ResponseLayout::with_effects(&self.categories, self.max_order, &effects)?;
        let cols: usize = self.partition.iter().sum();
        if self.stacked.len() != layout.total_dim() || self.stacked.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension(format!(
                "stored coefficients do not form a {} x {} matrix",
                layout.total_dim(),
                cols
            )));
        }
        let flat: Vec<f64> = self.stacked.iter().flatten().copied().collect();
        let stacked =
            Array2::from_shape_vec((layout.total_dim(), cols), flat).map_err(|e| Error::Dimension(e.to_string()))?;
        CoefficientBlocks::from_stacked(&layout, &self.partition, stacked)
    }
}
