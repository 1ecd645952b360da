//! Multinomial and Poisson negative log-likelihoods in `β` coordinates.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::blocks::CoefficientBlocks;
use crate::error::{Error, Result};

/// Largest exponent argument evaluated for Poisson means.
pub const EXP_CAP: f64 = 700.0;

const CHUNK_ROWS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[serde(rename = "mult")]
    Multinomial,
    #[serde(rename = "pois")]
    Poisson,
}

impl Family {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mult" | "multinomial" => Ok(Family::Multinomial),
            "pois" | "poisson" => Ok(Family::Poisson),
            other => Err(Error::Config(format!("unknown family '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Multinomial => "mult",
            Family::Poisson => "pois",
        }
    }

    /// `P_V`: centering for the multinomial, identity for Poisson.
    pub fn projector(&self, card: usize) -> Array2<f64> {
        let mut p = Array2::eye(card);
        if *self == Family::Multinomial {
            p -= 1.0 / card as f64;
        }
        p
    }
}

/// Predictors, response counts in `vec_J` order and per-row trial totals.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    y: Array2<f64>,
    trials: Array1<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::Data(format!("X has {} rows but Y has {}", x.nrows(), y.nrows())));
        }
        if x.nrows() == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("X contains non-finite values".into()));
        }
        if let Some(((i, j), v)) = y
            .indexed_iter()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || v.fract() != 0.0)
        {
            return Err(Error::Data(format!(
                "Y[{}, {}] = {} is not a nonnegative integer count",
                i + 1,
                j + 1,
                v
            )));
        }
        let trials = y.sum_axis(Axis(1));
        Ok(Dataset { x, y, trials })
    }

    /// Checks column count against `|J|` and, for the multinomial, that every
    /// row has at least one trial.
    pub fn validate(&self, card: usize, family: Family) -> Result<()> {
        if self.y.ncols() != card {
            return Err(Error::Data(format!(
                "Y has {} columns but |J| = {}",
                self.y.ncols(),
                card
            )));
        }
        if family == Family::Multinomial {
            if let Some(i) = self.trials.iter().position(|&t| t < 1.0) {
                return Err(Error::Data(format!(
                    "row {} has zero trials, which the multinomial model does not allow",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn trials(&self) -> &Array1<f64> {
        &self.trials
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Rows with at least one trial.
    pub fn without_empty_rows(&self) -> Result<Dataset> {
        let keep: Vec<usize> = (0..self.n()).filter(|&i| self.trials[i] >= 1.0).collect();
        Dataset::new(self.x.select(Axis(0), &keep), self.y.select(Axis(0), &keep))
    }
}

/// Category probabilities in `vec_J` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Array1<f64>);

impl ProbabilityVector {
    pub fn new(p: Array1<f64>) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data("probabilities must be finite and nonnegative".into()));
        }
        let total = p.sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Data(format!("probabilities sum to {total}, not 1")));
        }
        Ok(ProbabilityVector(p))
    }

    /// Softmax of a linear predictor.
    pub fn softmax(eta: ArrayView1<f64>) -> Self {
        let mut out = eta.to_owned();
        softmax_in_place(out.view_mut());
        ProbabilityVector(out)
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax_lowest(self.0.view())
    }
}

pub(crate) fn argmax_lowest(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &val) in v.iter().enumerate() {
        if val > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_in_place(mut row: ndarray::ArrayViewMut1<f64>) {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    row.mapv_inplace(|v| (v - max).exp());
    let total = row.sum();
    row.mapv_inplace(|v| v / total);
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Linear predictors `η_i = θ x_i` for every row, shape `n × |J|`.
pub fn linear_predictors(theta: &Array2<f64>, x: ArrayView2<f64>) -> Array2<f64> {
    x.dot(&theta.t())
}

/// Fitted probabilities for every row of `x`, shape `n × |J|`.
pub fn predict_matrix(beta: &CoefficientBlocks, basis: &BasisSet, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != beta.num_predictors() {
        return Err(Error::Dimension(format!(
            "x has {} columns, model has {} predictors",
            x.ncols(),
            beta.num_predictors()
        )));
    }
    let theta = basis.theta_from_beta(beta)?;
    let mut eta = linear_predictors(&theta, x);
    for row in eta.rows_mut() {
        softmax_in_place(row);
    }
    Ok(eta)
}

/// `π(x) = softmax(θx)`; used for both families.
pub fn predict_probs(beta: &CoefficientBlocks, basis: &BasisSet, x: ArrayView1<f64>) -> Result<ProbabilityVector> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("predictor vector"));
    }
    let m = predict_matrix(beta, basis, x.insert_axis(Axis(0)))?;
    Ok(ProbabilityVector(m.row(0).to_owned()))
}

/// Loss value and gradient at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    /// Gradient with respect to the stacked `β`, shape `total_dim × p`.
    pub grad: Array2<f64>,
    /// Set when a Poisson exponent hit [`EXP_CAP`].
    pub capped: bool,
}

/// Smooth part of the objective for one family on one dataset.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    basis: &'a BasisSet,
    data: &'a Dataset,
    family: Family,
    parallel: bool,
}

struct Partial {
    value: f64,
    theta_grad: Array2<f64>,
    capped: bool,
}

impl<'a> Objective<'a> {
    pub fn new(basis: &'a BasisSet, data: &'a Dataset, family: Family) -> Result<Self> {
        data.validate(basis.layout().card(), family)?;
        Ok(Objective {
            basis,
            data,
            family,
            parallel: false,
        })
    }

    /// Splits the sample sum across threads. Chunks are fixed and reduced in
    /// order, so results do not depend on the thread count.
    pub fn parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn basis(&self) -> &BasisSet {
        self.basis
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    fn check(&self, beta: &CoefficientBlocks) -> Result<()> {
        if beta.num_predictors() != self.data.p() {
            return Err(Error::Dimension(format!(
                "beta has {} predictor columns, data has {}",
                beta.num_predictors(),
                self.data.p()
            )));
        }
        if beta.stacked().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coefficients"));
        }
        Ok(())
    }

    fn chunk(&self, theta: &Array2<f64>, rows: std::ops::Range<usize>, with_grad: bool) -> Partial {
        let x = self.data.x.slice(s![rows.clone(), ..]);
        let y = self.data.y.slice(s![rows.clone(), ..]);
        let trials = self.data.trials.slice(s![rows]);
        let mut eta = linear_predictors(theta, x);
        let mut value = 0.0;
        let mut capped = false;
        for ((mut row, y_row), &n_i) in eta.rows_mut().into_iter().zip(y.rows()).zip(trials) {
            let linear: f64 = y_row.dot(&row);
            match self.family {
                Family::Multinomial => {
                    value += -linear + n_i * log_sum_exp(row.view());
                    if with_grad {
                        softmax_in_place(row.view_mut());
                        Zip::from(&mut row).and(&y_row).for_each(|r, &yv| *r = n_i * *r - yv);
                    }
                }
                Family::Poisson => {
                    let mut total = 0.0;
                    row.mapv_inplace(|v| {
                        if v > EXP_CAP {
                            capped = true;
                        }
                        let e = v.min(EXP_CAP).exp();
                        total += e;
                        e
                    });
                    value += -linear + total;
                    if with_grad {
                        Zip::from(&mut row).and(&y_row).for_each(|r, &yv| *r -= yv);
                    }
                }
            }
        }
        let theta_grad = if with_grad {
            eta.t().dot(&x)
        } else {
            Array2::zeros((0, 0))
        };
        Partial {
            value,
            theta_grad,
            capped,
        }
    }

    fn accumulate(&self, beta: &CoefficientBlocks, with_grad: bool) -> Result<Partial> {
        self.check(beta)?;
        let theta = self.basis.theta_from_beta(beta)?;
        let n = self.data.n();
        let ranges: Vec<std::ops::Range<usize>> = (0..n)
            .step_by(CHUNK_ROWS)
            .map(|start| start..(start + CHUNK_ROWS).min(n))
            .collect();
        let partials: Vec<Partial> = if self.parallel && ranges.len() > 1 {
            ranges
                .into_par_iter()
                .map(|r| self.chunk(&theta, r, with_grad))
                .collect()
        } else {
            ranges.into_iter().map(|r| self.chunk(&theta, r, with_grad)).collect()
        };
        let mut iter = partials.into_iter();
        let mut total = iter.next().expect("dataset is non-empty");
        for part in iter {
            total.value += part.value;
            total.capped |= part.capped;
            if with_grad {
                total.theta_grad += &part.theta_grad;
            }
        }
        let scale = 1.0 / n as f64;
        total.value *= scale;
        if with_grad {
            total.theta_grad *= scale;
        }
        if !total.value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok(total)
    }

    pub fn value(&self, beta: &CoefficientBlocks) -> Result<f64> {
        Ok(self.accumulate(beta, false)?.value)
    }

    pub fn evaluate(&self, beta: &CoefficientBlocks) -> Result<Evaluation> {
        let partial = self.accumulate(beta, true)?;
        let grad = self.basis.stacked().t().dot(&partial.theta_grad);
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        Ok(Evaluation {
            value: partial.value,
            grad,
            capped: partial.capped,
        })
    }
}

/// Multinomial negative log-likelihood (cross-entropy) averaged over rows.
pub fn mult_loss(beta: &CoefficientBlocks, basis: &BasisSet, data: &Dataset) -> Result<f64> {
    Objective::new(basis, data, Family::Multinomial)?.value(beta)
}

/// Poisson negative log-likelihood averaged over rows (without the `log y!` term).
pub fn pois_loss(beta: &CoefficientBlocks, basis: &BasisSet, data: &Dataset) -> Result<f64> {
    Objective::new(basis, data, Family::Poisson)?.value(beta)
}

pub fn grad(beta: &CoefficientBlocks, basis: &BasisSet, data: &Dataset, family: Family) -> Result<Array2<f64>> {
    Ok(Objective::new(basis, data, family)?.evaluate(beta)?.grad)
}

/// Cross-entropy of fitted probabilities on a dataset, valid for fits of
/// either family. Rows with no trials contribute nothing.
pub fn cross_entropy(beta: &CoefficientBlocks, basis: &BasisSet, data: &Dataset) -> Result<f64> {
    data.validate(basis.layout().card(), Family::Poisson)?;
    let obj = Objective {
        basis,
        data,
        family: Family::Multinomial,
        parallel: false,
    };
    obj.value(beta)
}

/// `max_i n_i · (2n)⁻¹ λ_max(XᵀX)`, a Lipschitz constant for the multinomial
/// gradient. With single trials this is `(2n)⁻¹ λ_max(XᵀX)`.
pub fn lipschitz_bound(data: &Dataset) -> Result<f64> {
    let n = data.n();
    if n == 0 || data.p() == 0 {
        return Err(Error::Data("empty data".into()));
    }
    let gram = data.x.t().dot(&data.x);
    let p = gram.nrows();
    let m = DMatrix::from_fn(p, p, |i, j| gram[[i, j]]);
    let top = SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let max_trials = data.trials.fold(1.0f64, |a, &b| a.max(b));
    Ok(max_trials * top.max(0.0) / (2.0 * n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::ResponseLayout;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (BasisSet, Dataset) {
        let layout = ResponseLayout::new(&[2, 2], 2).unwrap();
        let basis = BasisSet::new(&layout);
        let x = array![[1.0, 0.5], [1.0, -1.0], [1.0, 2.0]];
        let y = array![[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 2.0, 1.0], [0.0, 1.0, 0.0, 0.0]];
        (basis, Dataset::new(x, y).unwrap())
    }

    fn random_beta(basis: &BasisSet, p: usize, rng: &mut ChaCha8Rng) -> CoefficientBlocks {
        let total = basis.layout().total_dim();
        let stacked = Array2::from_shape_fn((total, p), |_| rng.gen_range(-1.0..1.0));
        CoefficientBlocks::from_stacked(basis.layout(), &[p], stacked).unwrap()
    }

    #[test]
    fn zero_beta_losses() {
        let layout = ResponseLayout::new(&[2, 3], 2).unwrap();
        let basis = BasisSet::new(&layout);
        let x = Array2::from_elem((4, 2), 1.5);
        let mut y = Array2::zeros((4, 6));
        for i in 0..4 {
            y[[i, i]] = 1.0;
        }
        let data = Dataset::new(x.clone(), y).unwrap();
        let beta = CoefficientBlocks::zeros(&layout, &[2]).unwrap();
        assert!((mult_loss(&beta, &basis, &data).unwrap() - 6f64.ln()).abs() < 1e-14);

        let empty = Dataset::new(x, Array2::zeros((4, 6))).unwrap();
        assert!((pois_loss(&beta, &basis, &empty).unwrap() - 6.0).abs() < 1e-14);
    }

    #[test]
    fn losses_match_termwise_oracle() {
        let (basis, data) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let beta = random_beta(&basis, 2, &mut rng);
        let theta = basis.stacked().dot(beta.stacked());
        let (mut mult, mut pois) = (0.0, 0.0);
        for i in 0..3 {
            let mut lin = 0.0;
            let mut sum_exp = 0.0;
            for j in 0..4 {
                let eta: f64 = (0..2).map(|c| theta[[j, c]] * data.x()[[i, c]]).sum();
                lin += data.y()[[i, j]] * eta;
                sum_exp += eta.exp();
            }
            mult += -lin + data.trials()[i] * sum_exp.ln();
            pois += -lin + sum_exp;
        }
        assert!((mult_loss(&beta, &basis, &data).unwrap() - mult / 3.0).abs() < 1e-12);
        assert!((pois_loss(&beta, &basis, &data).unwrap() - pois / 3.0).abs() < 1e-12);
    }

    #[test]
    fn multinomial_ignores_overall_block() {
        let (basis, data) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let beta = random_beta(&basis, 2, &mut rng);
        let mut shifted = beta.clone();
        shifted.block_mut(0, 0).mapv_inplace(|v| v + 3.7);
        let a = mult_loss(&beta, &basis, &data).unwrap();
        let b = mult_loss(&shifted, &basis, &data).unwrap();
        assert!((a - b).abs() < 1e-12);

        let g = grad(&beta, &basis, &data, Family::Multinomial).unwrap();
        assert!(g.row(0).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn gradient_at_zero_matches_uniform_formula() {
        let (basis, data) = setup();
        let beta = CoefficientBlocks::zeros(basis.layout(), &[2]).unwrap();
        let g = grad(&beta, &basis, &data, Family::Multinomial).unwrap();
        let mut theta_grad = Array2::<f64>::zeros((4, 2));
        for i in 0..3 {
            for j in 0..4 {
                let r = data.trials()[i] / 4.0 - data.y()[[i, j]];
                for c in 0..2 {
                    theta_grad[[j, c]] += r * data.x()[[i, c]] / 3.0;
                }
            }
        }
        let expected = basis.stacked().t().dot(&theta_grad);
        assert!((&g - &expected).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn parallel_matches_sequential() {
        let layout = ResponseLayout::new(&[2, 3], 2).unwrap();
        let basis = BasisSet::new(&layout);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 1500;
        let x = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let mut y = Array2::zeros((n, 6));
        for i in 0..n {
            y[[i, rng.gen_range(0..6)]] = 1.0;
        }
        let data = Dataset::new(x, y).unwrap();
        let beta = random_beta(&basis, 3, &mut rng);
        let seq = Objective::new(&basis, &data, Family::Multinomial).unwrap();
        let par = seq.parallel(true);
        let a = seq.evaluate(&beta).unwrap();
        let b = par.evaluate(&beta).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn probabilities_are_valid_and_shift_invariant() {
        let (basis, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let beta = random_beta(&basis, 2, &mut rng);
        let x = array![0.3, -2.0];
        let p = predict_probs(&beta, &basis, x.view()).unwrap();
        assert!((p.values().sum() - 1.0).abs() < 1e-12);
        let mut shifted = beta.clone();
        shifted.block_mut(0, 0).mapv_inplace(|v| v - 10.0);
        let q = predict_probs(&shifted, &basis, x.view()).unwrap();
        assert!((p.values() - q.values()).iter().all(|v| v.abs() < 1e-12));

        let zero = CoefficientBlocks::zeros(basis.layout(), &[2]).unwrap();
        let u = predict_probs(&zero, &basis, x.view()).unwrap();
        assert!(u.values().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn lipschitz_examples() {
        let n = 4;
        let x = Array2::eye(n);
        let data = Dataset::new(x, Array2::from_elem((n, 2), 0.0) + &array![1.0, 0.0]).unwrap();
        assert!((lipschitz_bound(&data).unwrap() - 1.0 / 8.0).abs() < 1e-14);

        let x = array![[1.0, 2.0, 2.0]];
        let data = Dataset::new(x, array![[1.0, 0.0]]).unwrap();
        assert!((lipschitz_bound(&data).unwrap() - 9.0 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn data_validation() {
        let x = array![[1.0], [2.0]];
        assert!(Dataset::new(x.clone(), array![[1.0, -1.0], [0.0, 1.0]]).is_err());
        assert!(Dataset::new(x.clone(), array![[0.5, 0.5], [0.0, 1.0]]).is_err());
        assert!(Dataset::new(x.clone(), array![[1.0, 0.0]]).is_err());
        let d = Dataset::new(x, array![[0.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(d.validate(2, Family::Multinomial).is_err());
        assert!(d.validate(2, Family::Poisson).is_ok());
        assert!(d.validate(3, Family::Poisson).is_err());
        assert_eq!(d.without_empty_rows().unwrap().n(), 1);
    }

    #[test]
    fn projector_properties() {
        for fam in [Family::Multinomial, Family::Poisson] {
            let p = fam.projector(5);
            assert!((&p.dot(&p) - &p).iter().all(|v| v.abs() < 1e-14));
            assert!((&p - &p.t()).iter().all(|v| v.abs() == 0.0));
        }
    }
}
