//! Kronecker-structured orthonormal bases `H_k` for the effect subspaces and
//! the change of coordinates between `θ` and `β`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::blocks::CoefficientBlocks;
use crate::error::{Error, Result};
use crate::layout::{Effect, ResponseLayout};

/// Helmert-style orthonormal complement `U_m` of `1_m`.
///
/// Column `c` (0-based) is `(1, …, 1, -(c+1), 0, …, 0) / √((c+1)(c+2))`
/// with `c + 1` leading ones.
pub fn helmert_complement(m: usize) -> Result<Array2<f64>> {
    if m < 2 {
        return Err(Error::Layout(format!("U_m needs m >= 2, got {m}")));
    }
    let mut u = Array2::zeros((m, m - 1));
    for c in 0..m - 1 {
        let scale = (((c + 1) * (c + 2)) as f64).sqrt().recip();
        for r in 0..=c {
            u[[r, c]] = scale;
        }
        u[[c + 1, c]] = -((c + 1) as f64) * scale;
    }
    Ok(u)
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let v = a[[i, j]];
            if v != 0.0 {
                out.slice_mut(s![i * br..(i + 1) * br, j * bc..(j + 1) * bc])
                    .assign(&(b * v));
            }
        }
    }
    out
}

fn unit_constant(m: usize) -> Array2<f64> {
    Array2::from_elem((m, 1), (m as f64).sqrt().recip())
}

/// The family `{H_k}` and its horizontal concatenation `H`.
#[derive(Debug, Clone)]
pub struct BasisSet {
    layout: ResponseLayout,
    blocks: Vec<Array2<f64>>,
    stacked: Array2<f64>,
}

impl BasisSet {
    /// Bases built from the Helmert-style complement.
    pub fn new(layout: &ResponseLayout) -> Self {
        Self::build(
            layout,
            |m| helmert_complement(m).expect("categories >= 2"),
            unit_constant,
        )
    }

    /// Bases built from a caller-supplied orthonormal completion: `complement(m)`
    /// must return an `m × (m-1)` matrix `U` with `[1/√m, U]` orthogonal.
    pub fn with_completion<F>(layout: &ResponseLayout, complement: F) -> Result<Self>
    where
        F: Fn(usize) -> Array2<f64>,
    {
        for &m in layout.categories() {
            let u = complement(m);
            if u.dim() != (m, m - 1) {
                return Err(Error::Dimension(format!(
                    "completion for m = {m} has shape {:?}",
                    u.dim()
                )));
            }
            let mut full = Array2::zeros((m, m));
            full.column_mut(0).fill((m as f64).sqrt().recip());
            full.slice_mut(s![.., 1..]).assign(&u);
            let gram = full.t().dot(&full);
            if max_abs_deviation_from_identity(&gram) > 1e-10 {
                return Err(Error::Layout(format!("completion for m = {m} is not orthonormal")));
            }
        }
        Ok(Self::build(layout, complement, unit_constant))
    }

    /// Generic Kronecker construction `H_k = V_q ⊗ … ⊗ V_1` with
    /// `V_i = complement(J_i)` when `i ∈ k` and `constant(J_i)` otherwise.
    ///
    /// No orthonormality is implied; this also builds corner-constraint
    /// parameterizations for comparison.
    pub fn build<F, G>(layout: &ResponseLayout, complement: F, constant: G) -> Self
    where
        F: Fn(usize) -> Array2<f64>,
        G: Fn(usize) -> Array2<f64>,
    {
        let cats = layout.categories();
        let blocks: Vec<Array2<f64>> = layout
            .effects()
            .iter()
            .map(|k| {
                let mut h = Array2::from_elem((1, 1), 1.0);
                // Iterate from V_q down to V_1 so V_1 varies fastest.
                for i in (0..cats.len()).rev() {
                    let v = if k.contains(i) {
                        complement(cats[i])
                    } else {
                        constant(cats[i])
                    };
                    h = kron(&h.view(), &v.view());
                }
                h
            })
            .collect();
        let mut stacked = Array2::zeros((layout.card(), layout.total_dim()));
        for (idx, h) in blocks.iter().enumerate() {
            stacked.slice_mut(s![.., layout.rows(idx)]).assign(h);
        }
        BasisSet {
            layout: layout.clone(),
            blocks,
            stacked,
        }
    }

    pub fn layout(&self) -> &ResponseLayout {
        &self.layout
    }

    /// `H_k` for the effect at position `idx`.
    pub fn block(&self, idx: usize) -> &Array2<f64> {
        &self.blocks[idx]
    }

    pub fn basis_matrix(&self, effect: &Effect) -> Result<&Array2<f64>> {
        let idx = self
            .layout
            .effect_index(effect)
            .ok_or_else(|| Error::Layout(format!("effect {effect} is not in the layout")))?;
        Ok(&self.blocks[idx])
    }

    /// `H`, shape `|J| × total_dim`.
    pub fn stacked(&self) -> &Array2<f64> {
        &self.stacked
    }

    /// `θ = Hβ`, shape `|J| × p`.
    pub fn theta_from_beta(&self, beta: &CoefficientBlocks) -> Result<Array2<f64>> {
        if beta.stacked().nrows() != self.layout.total_dim() {
            return Err(Error::Dimension(format!(
                "beta has {} rows, layout needs {}",
                beta.stacked().nrows(),
                self.layout.total_dim()
            )));
        }
        Ok(self.stacked.dot(beta.stacked()))
    }

    /// `β = Hᵀθ` with the given predictor partition. Exact inverse of
    /// [`BasisSet::theta_from_beta`] when `d = q`; otherwise the coefficients of
    /// the orthogonal projection onto `span(H)`.
    pub fn beta_from_theta(&self, theta: &Array2<f64>, partition: &[usize]) -> Result<CoefficientBlocks> {
        if theta.nrows() != self.layout.card() {
            return Err(Error::Dimension(format!(
                "theta has {} rows, |J| = {}",
                theta.nrows(),
                self.layout.card()
            )));
        }
        CoefficientBlocks::from_stacked(&self.layout, partition, self.stacked.t().dot(theta))
    }

    /// Per-effect Frobenius norms `‖β_k‖` of a coefficient matrix.
    pub fn effect_norms(&self, beta: &CoefficientBlocks) -> Array1<f64> {
        (0..self.layout.num_effects())
            .map(|idx| {
                beta.stacked()
                    .slice(s![self.layout.rows(idx), ..])
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

/// `max |G - I|` for a square matrix.
pub fn max_abs_deviation_from_identity(g: &Array2<f64>) -> f64 {
    g.indexed_iter()
        .map(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

/// `Σ_k H_k H_kᵀ`, which equals the identity when `d = q`.
pub fn projector_sum(basis: &BasisSet) -> Array2<f64> {
    let n = basis.layout().card();
    let mut acc = Array2::zeros((n, n));
    for idx in 0..basis.layout().num_effects() {
        let h = basis.block(idx);
        acc += &h.dot(&h.t());
    }
    acc
}

/// Column sums `H_kᵀ 1`.
pub fn column_sums(h: &Array2<f64>) -> Array1<f64> {
    h.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn helmert_small_cases() {
        let u2 = helmert_complement(2).unwrap();
        let r2 = 2f64.sqrt().recip();
        assert_abs_diff_eq!(u2, ndarray::array![[r2], [-r2]], epsilon = 1e-15);

        let u3 = helmert_complement(3).unwrap();
        let r6 = 6f64.sqrt().recip();
        let expected = ndarray::array![[r2, r6], [-r2, r6], [0.0, -2.0 * r6]];
        assert_abs_diff_eq!(u3, expected, epsilon = 1e-15);
    }

    #[test]
    fn helmert_is_orthonormal_complement() {
        for m in 2..12 {
            let u = helmert_complement(m).unwrap();
            assert!(column_sums(&u).iter().all(|v| v.abs() <= 1e-14));
            assert!(max_abs_deviation_from_identity(&u.t().dot(&u)) <= 1e-14);
        }
        assert!(helmert_complement(1).is_err());
    }

    #[test]
    fn kron_hand_case() {
        let a = ndarray::array![[1.0, 2.0]];
        let b = ndarray::array![[0.0], [3.0]];
        assert_eq!(kron(&a.view(), &b.view()), ndarray::array![[0.0, 0.0], [3.0, 6.0]]);
    }

    #[test]
    fn basis_examples() {
        let layout = ResponseLayout::new(&[2, 3], 2).unwrap();
        let basis = BasisSet::new(&layout);
        let h1 = basis.basis_matrix(&Effect::new(vec![0])).unwrap();
        let c = 6f64.sqrt().recip();
        let expected = ndarray::array![[c], [-c], [c], [-c], [c], [-c]];
        assert_abs_diff_eq!(*h1, expected, epsilon = 1e-15);

        let layout = ResponseLayout::new(&[2, 2], 2).unwrap();
        let basis = BasisSet::new(&layout);
        let h12 = basis.basis_matrix(&Effect::new(vec![0, 1])).unwrap();
        assert_abs_diff_eq!(*h12, ndarray::array![[0.5], [-0.5], [-0.5], [0.5]], epsilon = 1e-15);

        let h0 = basis.basis_matrix(&Effect::overall()).unwrap();
        assert!(h0.iter().all(|v| (v - 0.5).abs() < 1e-15));
        assert!(basis.basis_matrix(&Effect::new(vec![2])).is_err());
    }

    #[test]
    fn full_basis_resolves_identity() {
        let layout = ResponseLayout::new(&[2, 3, 4], 3).unwrap();
        let basis = BasisSet::new(&layout);
        let h = basis.stacked();
        assert!(max_abs_deviation_from_identity(&h.t().dot(h)) <= 1e-12);
        assert!(max_abs_deviation_from_identity(&projector_sum(&basis)) <= 1e-12);
        for idx in 1..layout.num_effects() {
            assert!(column_sums(basis.block(idx)).iter().all(|v| v.abs() <= 1e-12));
        }
    }

    #[test]
    fn rejects_non_orthonormal_completion() {
        let layout = ResponseLayout::new(&[3], 1).unwrap();
        let bad = |m: usize| Array2::from_elem((m, m - 1), 1.0);
        assert!(BasisSet::with_completion(&layout, bad).is_err());
    }
}
