//! Response layout: category counts, the association index space and the
//! `vec_J` ordering of joint categories.
//!
//! Responses are indexed from 0 internally. Effects are stored as sorted
//! lists of response indices, with the overall effect `{0}` represented by
//! the empty list. Rendering and file formats use 1-based response labels.

use std::fmt;

use itertools::Itertools;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An index set `k` of responses; empty means the overall effect.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Effect(Vec<usize>);

impl Effect {
    pub fn overall() -> Self {
        Effect(Vec::new())
    }

    /// Builds an effect from 0-based response indices (sorted and deduplicated).
    pub fn new(mut members: Vec<usize>) -> Self {
        members.sort_unstable();
        members.dedup();
        Effect(members)
    }

    /// Builds an effect from 1-based response labels as used in files.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        if labels.iter().any(|&l| l == 0) {
            return Err(Error::Layout("response labels are 1-based".into()));
        }
        Ok(Effect::new(labels.iter().map(|l| l - 1).collect()))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.0.iter().map(|i| i + 1).collect()
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn is_overall(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, response: usize) -> bool {
        self.0.binary_search(&response).is_ok()
    }

    /// `self ⊆ other`, with the overall effect contained in everything.
    pub fn is_subset_of(&self, other: &Effect) -> bool {
        self.0.iter().all(|r| other.contains(*r))
    }
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "{{0}}");
        }
        write!(f, "{{{}}}", self.labels().iter().join(","))
    }
}

/// Shape of the multivariate categorical response and the effects kept in
/// the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseLayout {
    categories: Vec<usize>,
    max_order: usize,
    effects: Vec<Effect>,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    total_dim: usize,
    card: usize,
}

impl ResponseLayout {
    /// Enumerates `K = K_0 ∪ … ∪ K_d`: the overall effect first, then by
    /// ascending order, lexicographically within an order.
    pub fn new(categories: &[usize], max_order: usize) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Layout("at least one response is required".into()));
        }
        if let Some((i, &c)) = categories.iter().enumerate().find(|(_, &c)| c < 2) {
            return Err(Error::Layout(format!(
                "response {} has {} categories; every response needs at least 2",
                i + 1,
                c
            )));
        }
        let q = categories.len();
        if max_order > q {
            return Err(Error::Layout(format!(
                "max order {max_order} exceeds the number of responses {q}"
            )));
        }
        let mut effects = vec![Effect::overall()];
        for order in 1..=max_order {
            effects.extend((0..q).combinations(order).map(Effect));
        }
        let dims: Vec<usize> = effects
            .iter()
            .map(|k| k.members().iter().map(|&i| categories[i] - 1).product())
            .collect();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut acc = 0;
        for &d in &dims {
            offsets.push(acc);
            acc += d;
        }
        Ok(ResponseLayout {
            categories: categories.to_vec(),
            max_order,
            effects,
            dims,
            offsets,
            total_dim: acc,
            card: categories.iter().product(),
        })
    }

    /// Rebuilds a layout and checks that a stored effect list matches the
    /// canonical enumeration.
    pub fn with_effects(categories: &[usize], max_order: usize, effects: &[Effect]) -> Result<Self> {
        let layout = Self::new(categories, max_order)?;
        if layout.effects != effects {
            return Err(Error::Layout(
                "effect list does not match the canonical enumeration".into(),
            ));
        }
        Ok(layout)
    }

    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    pub fn num_responses(&self) -> usize {
        self.categories.len()
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn effects(&self) -> &[Effect] {
        &self.effects
    }

    pub fn num_effects(&self) -> usize {
        self.effects.len()
    }

    /// `|k|_J` for the effect at position `idx`.
    pub fn dim(&self, idx: usize) -> usize {
        self.dims[idx]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// First row of effect `idx` in the stacked coefficient matrix.
    pub fn offset(&self, idx: usize) -> usize {
        self.offsets[idx]
    }

    pub fn rows(&self, idx: usize) -> std::ops::Range<usize> {
        self.offsets[idx]..self.offsets[idx] + self.dims[idx]
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// `|J|`, the number of joint categories.
    pub fn card(&self) -> usize {
        self.card
    }

    pub fn effect_index(&self, effect: &Effect) -> Option<usize> {
        self.effects.iter().position(|k| k == effect)
    }

    /// `L_s`: total dimension of the order-`s` effects.
    pub fn order_dims(&self) -> Vec<usize> {
        let mut out = vec![0; self.max_order + 1];
        for (k, &d) in self.effects.iter().zip(&self.dims) {
            out[k.order()] += d;
        }
        out
    }

    /// Flat `vec_J` position of a 0-based joint category (first response fastest).
    pub fn flat_index(&self, cell: &[usize]) -> Result<usize> {
        if cell.len() != self.categories.len() {
            return Err(Error::Dimension(format!(
                "category tuple has {} entries, expected {}",
                cell.len(),
                self.categories.len()
            )));
        }
        let mut idx = 0;
        let mut stride = 1;
        for (l, (&c, &j)) in self.categories.iter().zip(cell).enumerate() {
            if j >= c {
                return Err(Error::Dimension(format!(
                    "category {} out of range for response {} with {} categories",
                    j + 1,
                    l + 1,
                    c
                )));
            }
            idx += j * stride;
            stride *= c;
        }
        Ok(idx)
    }

    /// 0-based joint category at `vec_J` position `idx`.
    pub fn cell(&self, mut idx: usize) -> Vec<usize> {
        self.categories
            .iter()
            .map(|&c| {
                let j = idx % c;
                idx /= c;
                j
            })
            .collect()
    }

    /// `vec_J`: flattens a q-way array shaped `J` with the first index fastest.
    pub fn vec_j(&self, array: &ArrayD<f64>) -> Result<Vec<f64>> {
        if array.shape() != self.categories.as_slice() {
            return Err(Error::Dimension(format!(
                "array shape {:?} does not match categories {:?}",
                array.shape(),
                self.categories
            )));
        }
        // Reversing the axes turns Fortran order into a standard iteration.
        Ok(array.view().reversed_axes().iter().copied().collect())
    }

    /// Inverse of [`ResponseLayout::vec_j`].
    pub fn inv_vec_j(&self, v: &[f64]) -> Result<ArrayD<f64>> {
        if v.len() != self.card {
            return Err(Error::Dimension(format!(
                "vector has length {}, expected |J| = {}",
                v.len(),
                self.card
            )));
        }
        let mut rev: Vec<usize> = self.categories.clone();
        rev.reverse();
        let arr = ArrayD::from_shape_vec(IxDyn(&rev), v.to_vec()).map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(arr.reversed_axes().as_standard_layout().into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subsets_by_hand(j: &[usize], d: usize) -> Vec<(Vec<usize>, usize)> {
        let q = j.len();
        let mut out = Vec::new();
        for mask in 0u32..(1 << q) {
            let members: Vec<usize> = (0..q).filter(|i| mask & (1 << i) != 0).collect();
            if members.len() <= d {
                let dim = members.iter().map(|&i| j[i] - 1).product();
                out.push((members, dim));
            }
        }
        out
    }

    #[test]
    fn two_by_three_effects() {
        let layout = ResponseLayout::new(&[2, 3], 2).unwrap();
        let effects: Vec<Vec<usize>> = layout.effects().iter().map(|k| k.labels()).collect();
        assert_eq!(effects, vec![vec![], vec![1], vec![2], vec![1, 2]]);
        assert_eq!(layout.dims(), &[1, 1, 2, 2]);
        assert_eq!(layout.total_dim(), 6);
        assert_eq!(layout.card(), 6);
    }

    #[test]
    fn order_dims_match_subset_enumeration() {
        let j = [2, 2, 2, 3];
        let layout = ResponseLayout::new(&j, 4).unwrap();
        let mut by_order = vec![0; 5];
        for (m, dim) in subsets_by_hand(&j, 4) {
            by_order[m.len()] += dim;
        }
        assert_eq!(by_order, vec![1, 5, 9, 7, 2]);
        assert_eq!(layout.order_dims(), by_order);
        assert_eq!(layout.total_dim(), 24);
        assert_eq!(layout.total_dim(), layout.card());
    }

    #[test]
    fn single_response() {
        let layout = ResponseLayout::new(&[5], 1).unwrap();
        assert_eq!(layout.num_effects(), 2);
        assert_eq!(layout.dims(), &[1, 4]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ResponseLayout::new(&[2, 1], 1).is_err());
        assert!(ResponseLayout::new(&[2, 2], 3).is_err());
        assert!(ResponseLayout::new(&[], 0).is_err());
    }

    #[test]
    fn offsets_are_contiguous() {
        let layout = ResponseLayout::new(&[3, 2, 4], 2).unwrap();
        let mut next = 0;
        for i in 0..layout.num_effects() {
            assert_eq!(layout.offset(i), next);
            next += layout.dim(i);
        }
        assert_eq!(next, layout.total_dim());
        assert!(layout.effects().iter().all(|k| k.order() <= 2));
    }

    #[test]
    fn vec_j_first_index_fastest() {
        let layout = ResponseLayout::new(&[2, 3], 2).unwrap();
        // y[j1][j2] = 10 * (j1 + 1) + (j2 + 1)
        let arr = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |ix| (10 * (ix[0] + 1) + ix[1] + 1) as f64);
        let v = layout.vec_j(&arr).unwrap();
        assert_eq!(v, vec![11.0, 21.0, 12.0, 22.0, 13.0, 23.0]);
        assert_eq!(layout.inv_vec_j(&v).unwrap(), arr);
        for i in 0..6 {
            let mut e = vec![0.0; 6];
            e[i] = 1.0;
            assert_eq!(layout.vec_j(&layout.inv_vec_j(&e).unwrap()).unwrap(), e);
            assert_eq!(layout.flat_index(&layout.cell(i)).unwrap(), i);
        }
    }

    #[test]
    fn vec_j_single_response_is_identity() {
        let layout = ResponseLayout::new(&[2], 1).unwrap();
        let arr = ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, 4.0]).unwrap();
        assert_eq!(layout.vec_j(&arr).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn vec_j_shape_errors() {
        let layout = ResponseLayout::new(&[2, 3], 2).unwrap();
        let arr = ArrayD::zeros(IxDyn(&[3, 2]));
        assert!(layout.vec_j(&arr).is_err());
        assert!(layout.inv_vec_j(&[0.0; 5]).is_err());
    }

    #[test]
    fn enumeration_is_deterministic() {
        let a = ResponseLayout::new(&[3, 2, 2, 4], 3).unwrap();
        let b = ResponseLayout::new(&[3, 2, 2, 4], 3).unwrap();
        assert_eq!(a, b);
    }
}
