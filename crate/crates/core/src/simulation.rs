//! Simulation study: AR(1) Gaussian predictors, sparse scheme coefficients,
//! multinomial responses, the candidate estimators and their test metrics.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal, WeightedIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::blocks::CoefficientBlocks;
use crate::error::{Error, Result};
use crate::interpreter::SupportPattern;
use crate::layout::{Effect, ResponseLayout};
use crate::likelihood::{linear_predictors, predict_matrix, Dataset, Family, EXP_CAP};
use crate::penalty::{GroupStructure, PenaltyMode};
use crate::solver::{fit_path, PathSpec, SolverConfig};

/// Largest Poisson mean the sampler accepts.
const MAX_POISSON_MEAN: f64 = 1e12;

/// Dependence pattern of the generating coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scheme {
    /// Main effects only.
    Mutual,
    /// Main effects plus every interaction among responses 2..q.
    Joint,
    /// The joint pattern plus `{1, q}`.
    Conditional,
}

impl TryFrom<u8> for Scheme {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Scheme::Mutual),
            2 => Ok(Scheme::Joint),
            3 => Ok(Scheme::Conditional),
            other => Err(Error::Config(format!("scheme must be 1, 2 or 3, got {other}"))),
        }
    }
}

impl From<Scheme> for u8 {
    fn from(s: Scheme) -> u8 {
        match s {
            Scheme::Mutual => 1,
            Scheme::Joint => 2,
            Scheme::Conditional => 3,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

impl Scheme {
    /// True non-overall effects for `layout`, in layout order. Interactions
    /// above the layout's maximum order are left out.
    pub fn effects(&self, layout: &ResponseLayout) -> Result<Vec<Effect>> {
        let q = layout.num_responses();
        if *self != Scheme::Mutual && q < 3 {
            return Err(Error::Config(format!(
                "scheme {self} needs at least 3 responses, got {q}"
            )));
        }
        let present = |e: &Effect| -> bool {
            match e.order() {
                0 => false,
                1 => true,
                _ => match self {
                    Scheme::Mutual => false,
                    Scheme::Joint => !e.contains(0),
                    Scheme::Conditional => !e.contains(0) || e.members() == [0, q - 1],
                },
            }
        };
        Ok(layout.effects().iter().filter(|e| present(e)).cloned().collect())
    }
}

/// Magnitudes of the nonzero generating coefficients: uniform on
/// `±[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    pub low: f64,
    pub high: f64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        SignalSpec { low: 0.5, high: 1.5 }
    }
}

/// `Σ_{jk} = ρ^{|j-k|}`.
pub fn ar1_covariance(p: usize, rho: f64) -> Array2<f64> {
    Array2::from_shape_fn((p, p), |(j, k)| rho.powi((j as i32 - k as i32).abs()))
}

/// `n` rows drawn i.i.d. from `N_p(0, Σ)` with `Σ_{jk} = 0.5^{|j-k|}`.
pub fn gen_predictors<R: Rng>(n: usize, p: usize, rng: &mut R) -> Array2<f64> {
    let sigma = ar1_covariance(p, 0.5);
    let chol = DMatrix::from_fn(p, p, |i, j| sigma[[i, j]])
        .cholesky()
        .expect("AR(1) covariance is positive definite")
        .l();
    let z = Array2::from_shape_fn((n, p), |_| StandardNormal.sample(rng));
    let l = Array2::from_shape_fn((p, p), |(i, j)| chol[(i, j)]);
    z.dot(&l.t())
}

/// A column of ones followed by `gen_predictors(n, p)`.
pub fn gen_design<R: Rng>(n: usize, p: usize, rng: &mut R) -> Array2<f64> {
    let x = gen_predictors(n, p, rng);
    let mut out = Array2::ones((n, p + 1));
    out.slice_mut(ndarray::s![.., 1..]).assign(&x);
    out
}

/// Generating coefficients over `p + 1` single-column blocks (intercept
/// first). Every effect of the scheme is nonzero on the intercept and on two
/// randomly chosen predictors; everything else is zero.
pub fn gen_scheme_beta<R: Rng>(
    scheme: Scheme,
    layout: &ResponseLayout,
    p: usize,
    signal: &SignalSpec,
    rng: &mut R,
) -> Result<CoefficientBlocks> {
    if p < 2 {
        return Err(Error::Config(format!("schemes need p >= 2 predictors, got {p}")));
    }
    if !(signal.low >= 0.0 && signal.high >= signal.low && signal.high.is_finite()) {
        return Err(Error::Config(format!("signal range {signal:?} is invalid")));
    }
    let effects = scheme.effects(layout)?;
    let mut columns: Vec<usize> = sample(rng, p, 2).into_iter().map(|c| c + 1).collect();
    columns.sort_unstable();
    columns.insert(0, 0);
    let mut beta = CoefficientBlocks::zeros(layout, &vec![1; p + 1])?;
    for effect in &effects {
        let k = layout
            .effect_index(effect)
            .expect("scheme effects come from the layout");
        for &j in &columns {
            for v in beta.block_mut(k, j).iter_mut() {
                let magnitude = if signal.high > signal.low {
                    rng.gen_range(signal.low..signal.high)
                } else {
                    signal.low
                };
                *v = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
            }
        }
    }
    Ok(beta)
}

/// One multinomial draw per row from `π(x_i)`, or independent Poisson counts
/// with means `exp(θ x_i)`.
pub fn sample_responses<R: Rng>(
    x: ArrayView2<f64>,
    beta: &CoefficientBlocks,
    basis: &BasisSet,
    family: Family,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let card = basis.layout().card();
    let mut y = Array2::zeros((x.nrows(), card));
    match family {
        Family::Multinomial => {
            let probs = predict_matrix(beta, basis, x)?;
            for (i, row) in probs.rows().into_iter().enumerate() {
                let dist = WeightedIndex::new(row.iter().copied())
                    .map_err(|e| Error::Data(format!("row {} probabilities: {e}", i + 1)))?;
                y[[i, dist.sample(rng)]] = 1.0;
            }
        }
        Family::Poisson => {
            let theta = basis.theta_from_beta(beta)?;
            let eta = linear_predictors(&theta, x);
            for ((i, c), &e) in eta.indexed_iter() {
                let mean = e.min(EXP_CAP).exp();
                if !(mean <= MAX_POISSON_MEAN) {
                    return Err(Error::Data(format!(
                        "Poisson mean {mean:e} at row {}, cell {} diverges",
                        i + 1,
                        c + 1
                    )));
                }
                if mean > 0.0 {
                    let dist = Poisson::new(mean).map_err(|e| Error::Data(e.to_string()))?;
                    y[[i, c]] = dist.sample(rng);
                }
            }
        }
    }
    Ok(y)
}

/// `(1/√2) ‖√p - √r‖₂`.
pub fn hellinger(p: &[f64], r: &[f64]) -> f64 {
    let s: f64 = p
        .iter()
        .zip(r)
        .map(|(a, b)| (a.max(0.0).sqrt() - b.max(0.0).sqrt()).powi(2))
        .sum();
    (s / 2.0).sqrt().min(1.0)
}

/// Average row-wise Hellinger distance between two probability matrices.
pub fn mean_hellinger(fitted: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    let total: f64 = fitted
        .rows()
        .into_iter()
        .zip(truth.rows())
        .map(|(a, b)| {
            hellinger(
                a.as_slice().expect("standard layout"),
                b.as_slice().expect("standard layout"),
            )
        })
        .sum();
    total / fitted.nrows() as f64
}

fn argmax_lowest(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose most probable joint category (lowest index on
/// ties) differs from the realized one. `y` holds one-hot rows; for rows
/// with several trials the most frequent cell counts as realized.
pub fn misclassification_rate(probs: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let wrong = probs
        .rows()
        .into_iter()
        .zip(y.rows())
        .filter(|(p, y)| argmax_lowest(p.view()) != argmax_lowest(y.view()))
        .count();
    wrong as f64 / probs.nrows() as f64
}

pub fn misclassification(beta: &CoefficientBlocks, basis: &BasisSet, test: &Dataset) -> Result<f64> {
    Ok(misclassification_rate(
        &predict_matrix(beta, basis, test.x().view())?,
        test.y(),
    ))
}

/// `-(1/n) Σ_i Σ_j y_ij log π_j(x_i)`, with `log 0` floored so a single
/// impossible draw does not give an infinite value.
pub fn cross_entropy_of(probs: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(y.iter())
        .filter(|(_, &c)| c > 0.0)
        .map(|(&p, &c)| -c * p.max(f64::MIN_POSITIVE).ln())
        .sum();
    total / probs.nrows() as f64
}

/// True and false positive rates of `estimated` against `truth` among the
/// non-overall effects of `universe`.
pub fn effect_rates(estimated: &[Effect], truth: &[Effect], universe: &[Effect]) -> (f64, f64) {
    let est: BTreeSet<&Effect> = estimated.iter().filter(|e| !e.is_overall()).collect();
    let tru: BTreeSet<&Effect> = truth.iter().filter(|e| !e.is_overall()).collect();
    let negatives = universe.iter().filter(|e| !e.is_overall() && !tru.contains(e)).count();
    let tp = est.intersection(&tru).count();
    let fp = est.difference(&tru).count();
    let tpr = if tru.is_empty() {
        1.0
    } else {
        tp as f64 / tru.len() as f64
    };
    let fpr = if negatives == 0 {
        0.0
    } else {
        fp as f64 / negatives as f64
    };
    (tpr, fpr)
}

/// Present non-overall effects of a fit.
pub fn fitted_effects(beta: &CoefficientBlocks) -> Vec<Effect> {
    SupportPattern::from_blocks(beta, 0.0)
        .effects()
        .iter()
        .filter(|e| !e.is_overall())
        .cloned()
        .collect()
}

/// Per-response marginal counts, `n × J_l`.
pub fn marginal_counts(layout: &ResponseLayout, y: &Array2<f64>, response: usize) -> Array2<f64> {
    let mut out = Array2::zeros((y.nrows(), layout.categories()[response]));
    for idx in 0..layout.card() {
        let c = layout.cell(idx)[response];
        let mut col = out.column_mut(c);
        col += &y.column(idx);
    }
    out
}

/// Separately fitted marginal models whose product is the joint pmf.
#[derive(Debug, Clone)]
pub struct SepMult {
    layout: ResponseLayout,
    marginals: Vec<(BasisSet, CoefficientBlocks)>,
}

impl SepMult {
    /// One group-lasso multinomial logistic regression per response, each
    /// predictor column its own group, tuned on the marginal validation
    /// cross-entropy. The joint cross-entropy of the product is the sum of
    /// the marginal ones, so separate tuning also minimizes it.
    pub fn fit(train: &Dataset, valid: &Dataset, layout: &ResponseLayout, config: &SolverConfig) -> Result<Self> {
        let mut config = config.clone();
        config.family = Family::Multinomial;
        config.penalty = PenaltyMode::GroupLasso;
        config.lambda = None;
        let mut marginals = Vec::with_capacity(layout.num_responses());
        for l in 0..layout.num_responses() {
            let single = ResponseLayout::new(&[layout.categories()[l]], 1)?;
            let basis = BasisSet::new(&single);
            let gs = GroupStructure::new(&single, &vec![1; train.p()], PenaltyMode::GroupLasso)?;
            let tr = Dataset::new(train.x().clone(), marginal_counts(layout, train.y(), l))?;
            let va = Dataset::new(valid.x().clone(), marginal_counts(layout, valid.y(), l))?;
            let path = fit_path(&tr, &basis, &gs, &config, Some(&va))?;
            let best = path
                .best()
                .ok_or_else(|| Error::Config("marginal path selected no fit".into()))?;
            marginals.push((basis, best.beta.clone()));
        }
        Ok(SepMult {
            layout: layout.clone(),
            marginals,
        })
    }

    pub fn marginal_probs(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.marginals
            .iter()
            .map(|(basis, beta)| predict_matrix(beta, basis, x))
            .collect()
    }

    /// Joint pmf in `vec_J` order as the product of the marginals.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let margins = self.marginal_probs(x)?;
        let cells: Vec<Vec<usize>> = (0..self.layout.card()).map(|i| self.layout.cell(i)).collect();
        Ok(Array2::from_shape_fn((x.nrows(), self.layout.card()), |(i, idx)| {
            cells[idx].iter().zip(&margins).map(|(&c, m)| m[[i, c]]).product()
        }))
    }

    /// Main effects with a nonzero marginal coefficient off the intercept
    /// baseline.
    pub fn effects(&self) -> Vec<Effect> {
        self.marginals
            .iter()
            .enumerate()
            .filter(|(_, (_, beta))| (0..beta.num_blocks()).any(|j| !beta.is_zero_block(1, j)))
            .map(|(l, _)| Effect::new(vec![l]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "O-Mult")]
    OMult,
    #[serde(rename = "O-Pois")]
    OPois,
    #[serde(rename = "L-Mult")]
    LMult,
    #[serde(rename = "L-Pois")]
    LPois,
    #[serde(rename = "G-Mult")]
    GMult,
    #[serde(rename = "G-Pois")]
    GPois,
    #[serde(rename = "Sep-Mult")]
    SepMult,
    Oracle,
}

impl Estimator {
    pub const ALL: [Estimator; 8] = [
        Estimator::OMult,
        Estimator::OPois,
        Estimator::LMult,
        Estimator::LPois,
        Estimator::GMult,
        Estimator::GPois,
        Estimator::SepMult,
        Estimator::Oracle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::OMult => "O-Mult",
            Estimator::OPois => "O-Pois",
            Estimator::LMult => "L-Mult",
            Estimator::LPois => "L-Pois",
            Estimator::GMult => "G-Mult",
            Estimator::GPois => "G-Pois",
            Estimator::SepMult => "Sep-Mult",
            Estimator::Oracle => "Oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown estimator '{s}'")))
    }

    /// Family, penalty and whether all predictors share one block, for the
    /// reparameterized fits.
    fn spec(&self) -> Option<(Family, PenaltyMode, bool)> {
        use Estimator::*;
        let mult = Family::Multinomial;
        let pois = Family::Poisson;
        match self {
            OMult => Some((mult, PenaltyMode::OverlappingHierarchical, false)),
            OPois => Some((pois, PenaltyMode::OverlappingHierarchical, false)),
            LMult => Some((mult, PenaltyMode::GroupLasso, false)),
            LPois => Some((pois, PenaltyMode::GroupLasso, false)),
            GMult => Some((mult, PenaltyMode::GroupLasso, true)),
            GPois => Some((pois, PenaltyMode::GroupLasso, true)),
            SepMult | Oracle => None,
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Study configuration, readable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub categories: Vec<usize>,
    pub max_order: usize,
    pub n: Vec<usize>,
    pub p: Vec<usize>,
    pub schemes: Vec<Scheme>,
    pub n_valid: usize,
    pub n_test: usize,
    pub replicates: usize,
    pub seed: u64,
    pub signal: SignalSpec,
    /// Family of the generating model. Test sets are always single
    /// multinomial draws from `π(x)`.
    pub generating_family: Family,
    pub estimators: Vec<Estimator>,
    pub path: PathSpec,
    pub tol: f64,
    pub max_iter: usize,
    pub deterministic: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            categories: vec![2, 2, 2, 3],
            max_order: 4,
            n: vec![100, 500, 2000],
            p: vec![10],
            schemes: vec![Scheme::Mutual, Scheme::Joint, Scheme::Conditional],
            n_valid: 1000,
            n_test: 2000,
            replicates: 20,
            seed: 20240601,
            signal: SignalSpec::default(),
            generating_family: Family::Multinomial,
            estimators: Estimator::ALL.to_vec(),
            path: PathSpec {
                count: 30,
                ratio: 1e-3,
                patience: Some(4),
            },
            tol: 1e-7,
            max_iter: 5000,
            deterministic: true,
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: SimConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Replication counts of the original study: 100 replicates and 10000
    /// test points.
    pub fn full_scale(mut self) -> Self {
        self.replicates = 100;
        self.n_test = 10_000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("n", self.n.is_empty()),
            ("p", self.p.is_empty()),
            ("schemes", self.schemes.is_empty()),
            ("estimators", self.estimators.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("grid '{name}' is empty")));
        }
        if self.n.iter().any(|&n| n == 0) || self.n_valid == 0 || self.n_test == 0 || self.replicates == 0 {
            return Err(Error::Config("sample sizes and replicates must be positive".into()));
        }
        if self.p.iter().any(|&p| p < 2) {
            return Err(Error::Config("every p must be at least 2".into()));
        }
        let layout = self.layout()?;
        for s in &self.schemes {
            s.effects(&layout)?;
        }
        SolverConfig {
            path: self.path,
            tol: self.tol,
            max_iter: self.max_iter,
            ..SolverConfig::default()
        }
        .validate()
    }

    pub fn layout(&self) -> Result<ResponseLayout> {
        ResponseLayout::new(&self.categories, self.max_order)
    }

    fn solver(&self, family: Family, penalty: PenaltyMode) -> SolverConfig {
        SolverConfig {
            family,
            penalty,
            lambda: None,
            path: self.path,
            tol: self.tol,
            max_iter: self.max_iter,
            deterministic: self.deterministic,
            seed: self.seed,
            ..SolverConfig::default()
        }
    }
}

/// Metrics of one estimator on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub scheme: Scheme,
    pub n: usize,
    pub p: usize,
    pub replicate: usize,
    pub estimator: Estimator,
    pub hellinger: f64,
    pub misclassification: f64,
    pub cross_entropy: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// Selected effect set equals the true one.
    pub exact_support: bool,
    /// Some fit along the path has exactly the true effect set.
    pub support_on_path: bool,
    pub lambda: Option<f64>,
    pub error: Option<String>,
}

/// Aggregate over replicates for one estimator in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: Estimator,
    pub n: usize,
    pub p: usize,
    pub scheme: Scheme,
    pub replicates: usize,
    pub failures: usize,
    pub hellinger_mean: f64,
    pub hellinger_sd: f64,
    pub hellinger_median: f64,
    pub misclassification_mean: f64,
    pub misclassification_sd: f64,
    pub misclassification_median: f64,
    pub cross_entropy_mean: f64,
    pub cross_entropy_sd: f64,
    pub tpr_mean: f64,
    pub fpr_mean: f64,
    pub exact_support_rate: f64,
    pub support_on_path_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: SimConfig,
    pub rows: Vec<MetricsRow>,
    pub replicates: Vec<ReplicateRecord>,
}

/// Independent stream id for a tuple of labels.
fn stream(parts: &[u64]) -> u64 {
    // splitmix64 folded over the parts
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &v in parts {
        h ^= v;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream(parts));
    rng
}

const STREAM_TRUTH: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_TRAIN: u64 = 3;

/// Data of one replicate. The truth, validation and test sets depend on
/// `(scheme, p, replicate)` only, so cells that differ in `n` share them.
#[derive(Debug, Clone)]
pub struct ReplicateData {
    pub beta_star: CoefficientBlocks,
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

pub fn replicate_data(
    config: &SimConfig,
    basis: &BasisSet,
    scheme: Scheme,
    n: usize,
    p: usize,
    replicate: usize,
) -> Result<ReplicateData> {
    let layout = basis.layout();
    let key = [u8::from(scheme) as u64, p as u64, replicate as u64];
    let mut rng = rng_for(config.seed, &[STREAM_TRUTH, key[0], key[1], key[2]]);
    let beta_star = gen_scheme_beta(scheme, layout, p, &config.signal, &mut rng)?;

    let family = config.generating_family;
    let draw = |rows: usize, rng: &mut ChaCha8Rng, family: Family| -> Result<Dataset> {
        let x = gen_design(rows, p, rng);
        let y = sample_responses(x.view(), &beta_star, basis, family, rng)?;
        let data = Dataset::new(x, y)?;
        if family == Family::Poisson {
            data.without_empty_rows()
        } else {
            Ok(data)
        }
    };
    let mut rng = rng_for(config.seed, &[STREAM_EVAL, key[0], key[1], key[2]]);
    let valid = draw(config.n_valid, &mut rng, family)?;
    let test = draw(config.n_test, &mut rng, Family::Multinomial)?;
    let mut rng = rng_for(config.seed, &[STREAM_TRAIN, key[0], key[1], key[2], n as u64]);
    let train = draw(n, &mut rng, family)?;
    Ok(ReplicateData {
        beta_star,
        train,
        valid,
        test,
    })
}

/// Fits every configured estimator on one replicate.
pub fn run_replicate(
    config: &SimConfig,
    basis: &BasisSet,
    scheme: Scheme,
    n: usize,
    p: usize,
    replicate: usize,
) -> Vec<ReplicateRecord> {
    let layout = basis.layout();
    let blank = |estimator: Estimator, error: String| ReplicateRecord {
        scheme,
        n,
        p,
        replicate,
        estimator,
        hellinger: f64::NAN,
        misclassification: f64::NAN,
        cross_entropy: f64::NAN,
        tpr: f64::NAN,
        fpr: f64::NAN,
        exact_support: false,
        support_on_path: false,
        lambda: None,
        error: Some(error),
    };
    let data = match replicate_data(config, basis, scheme, n, p, replicate) {
        Ok(d) => d,
        Err(e) => return config.estimators.iter().map(|&est| blank(est, e.to_string())).collect(),
    };
    let truth: Vec<Effect> = scheme.effects(layout).unwrap_or_default();
    let test_x = data.test.x().view();
    let true_probs = match predict_matrix(&data.beta_star, basis, test_x) {
        Ok(m) => m,
        Err(e) => return config.estimators.iter().map(|&est| blank(est, e.to_string())).collect(),
    };

    let evaluate = |est: Estimator| -> Result<ReplicateRecord> {
        let same = |effects: &[Effect]| -> bool {
            let mut a: Vec<&Effect> = effects.iter().collect();
            a.sort();
            let mut b: Vec<&Effect> = truth.iter().collect();
            b.sort();
            a == b
        };
        let mut on_path = None;
        let (probs, effects, lambda) = match est {
            Estimator::Oracle => (true_probs.clone(), truth.clone(), None),
            Estimator::SepMult => {
                let solver = config.solver(Family::Multinomial, PenaltyMode::GroupLasso);
                let fit = SepMult::fit(&data.train, &data.valid, layout, &solver)?;
                (fit.predict(test_x)?, fit.effects(), None)
            }
            _ => {
                let (family, penalty, global) = est.spec().expect("reparameterized estimator");
                let partition = if global { vec![1, p] } else { vec![1; p + 1] };
                let gs = GroupStructure::new(layout, &partition, penalty)?;
                let solver = config.solver(family, penalty);
                let path = fit_path(&data.train, basis, &gs, &solver, Some(&data.valid))?;
                let best = path
                    .best()
                    .ok_or_else(|| Error::Config("path selected no fit".into()))?;
                on_path = Some(path.fits.iter().any(|f| same(&fitted_effects(&f.beta))));
                let beta = best.beta.clone();
                (
                    predict_matrix(&beta, basis, test_x)?,
                    fitted_effects(&beta),
                    Some(best.lambda),
                )
            }
        };
        let (tpr, fpr) = effect_rates(&effects, &truth, layout.effects());
        let exact_support = same(&effects);
        Ok(ReplicateRecord {
            scheme,
            n,
            p,
            replicate,
            estimator: est,
            hellinger: mean_hellinger(&probs, &true_probs),
            misclassification: misclassification_rate(&probs, data.test.y()),
            cross_entropy: cross_entropy_of(&probs, data.test.y()),
            tpr,
            fpr,
            exact_support,
            support_on_path: on_path.unwrap_or(exact_support),
            lambda,
            error: None,
        })
    };
    config
        .estimators
        .iter()
        .map(|&est| evaluate(est).unwrap_or_else(|e| blank(est, e.to_string())))
        .collect()
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Median of the values; `NaN` when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Aggregates replicate records into one row per (scheme, n, p, estimator),
/// ordered by that key. Values are sorted before summation so the result
/// does not depend on record order.
pub fn aggregate(records: &[ReplicateRecord]) -> Vec<MetricsRow> {
    let mut keys: Vec<(Scheme, usize, usize, Estimator)> =
        records.iter().map(|r| (r.scheme, r.n, r.p, r.estimator)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(scheme, n, p, estimator)| {
            let cell: Vec<&ReplicateRecord> = records
                .iter()
                .filter(|r| r.scheme == scheme && r.n == n && r.p == p && r.estimator == estimator)
                .collect();
            let ok: Vec<&ReplicateRecord> = cell.iter().copied().filter(|r| r.error.is_none()).collect();
            let column = |f: fn(&ReplicateRecord) -> f64| -> Vec<f64> {
                let mut v: Vec<f64> = ok.iter().map(|r| f(r)).collect();
                v.sort_by(f64::total_cmp);
                v
            };
            let h = column(|r| r.hellinger);
            let m = column(|r| r.misclassification);
            let ce = column(|r| r.cross_entropy);
            let (hellinger_mean, hellinger_sd) = mean_sd(&h);
            let (misclassification_mean, misclassification_sd) = mean_sd(&m);
            let (cross_entropy_mean, cross_entropy_sd) = mean_sd(&ce);
            let exact = ok.iter().filter(|r| r.exact_support).count();
            let on_path = ok.iter().filter(|r| r.support_on_path).count();
            let rate = |c: usize| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    c as f64 / ok.len() as f64
                }
            };
            MetricsRow {
                estimator,
                n,
                p,
                scheme,
                replicates: cell.len(),
                failures: cell.len() - ok.len(),
                hellinger_mean,
                hellinger_sd,
                hellinger_median: median(&h),
                misclassification_mean,
                misclassification_sd,
                misclassification_median: median(&m),
                cross_entropy_mean,
                cross_entropy_sd,
                tpr_mean: mean_sd(&column(|r| r.tpr)).0,
                fpr_mean: mean_sd(&column(|r| r.fpr)).0,
                exact_support_rate: rate(exact),
                support_on_path_rate: rate(on_path),
            }
        })
        .collect()
}

/// Runs every (scheme, n, p, replicate) task in parallel and aggregates.
pub fn run_study(config: &SimConfig) -> Result<StudyResult> {
    config.validate()?;
    let layout = config.layout()?;
    let basis = BasisSet::new(&layout);
    let mut tasks = Vec::new();
    for &scheme in &config.schemes {
        for &p in &config.p {
            for &n in &config.n {
                for r in 0..config.replicates {
                    tasks.push((scheme, n, p, r));
                }
            }
        }
    }
    let replicates: Vec<ReplicateRecord> = tasks
        .par_iter()
        .map(|&(scheme, n, p, r)| run_replicate(config, &basis, scheme, n, p, r))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(StudyResult {
        config: config.clone(),
        rows: aggregate(&replicates),
        replicates,
    })
}

impl StudyResult {
    pub fn rows_csv(&self) -> Result<String> {
        write_csv(&self.rows)
    }

    pub fn replicates_csv(&self) -> Result<String> {
        write_csv(&self.replicates)
    }

    /// `scheme, estimator, n, hellinger, misclassification` means for
    /// plotting against `n`.
    pub fn plot_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Point {
            scheme: Scheme,
            p: usize,
            estimator: Estimator,
            n: usize,
            hellinger: f64,
            misclassification: f64,
        }
        let mut points: Vec<Point> = self
            .rows
            .iter()
            .map(|r| Point {
                scheme: r.scheme,
                p: r.p,
                estimator: r.estimator,
                n: r.n,
                hellinger: r.hellinger_mean,
                misclassification: r.misclassification_mean,
            })
            .collect();
        points.sort_by_key(|pt| (pt.scheme, pt.p, pt.estimator, pt.n));
        write_csv(&points)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn row(&self, scheme: Scheme, n: usize, p: usize, estimator: Estimator) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.scheme == scheme && r.n == n && r.p == p && r.estimator == estimator)
    }
}

fn write_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Csv {
            path: "<output>".into(),
            message: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv {
        path: "<output>".into(),
        message: e.to_string(),
    })?;
    String::from_utf8(bytes).map_err(|e| Error::Csv {
        path: "<output>".into(),
        message: e.to_string(),
    })
}

/// Per-response marginal pmfs of a joint pmf matrix, used to check that
/// products of marginals are valid joints.
pub fn marginals_of(layout: &ResponseLayout, joint: &Array2<f64>) -> Vec<Array2<f64>> {
    (0..layout.num_responses())
        .map(|l| marginal_counts(layout, joint, l))
        .collect()
}

/// Row sums, for checking probability matrices.
pub fn row_sums(m: &Array2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpreter::{joint_independence_partition, IndependenceReport};

    fn layout() -> ResponseLayout {
        ResponseLayout::new(&[2, 2, 2, 3], 4).unwrap()
    }

    #[test]
    fn hellinger_closed_forms() {
        assert_eq!(hellinger(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((hellinger(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
        let expected = (1.0 - 1.0 / 2f64.sqrt()).sqrt();
        assert!((hellinger(&[0.5, 0.5], &[1.0, 0.0]) - expected).abs() < 1e-15);
        assert!((expected - 0.5412).abs() < 1e-4);
    }

    #[test]
    fn predictor_covariance_matches_ar1() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let x = gen_predictors(n, 5, &mut rng);
        let cov = x.t().dot(&x) / n as f64;
        let sigma = ar1_covariance(5, 0.5);
        let worst = (&cov - &sigma).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 0.02, "{worst}");
        let again = gen_predictors(10, 5, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(again, x.slice(ndarray::s![..10, ..]));
    }

    #[test]
    fn scheme_supports() {
        let layout = layout();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (scheme, parts) in [
            (Scheme::Mutual, vec![vec![0], vec![1], vec![2], vec![3]]),
            (Scheme::Joint, vec![vec![0], vec![1, 2, 3]]),
        ] {
            let beta = gen_scheme_beta(scheme, &layout, 10, &SignalSpec::default(), &mut rng).unwrap();
            let nonzero_cols: BTreeSet<usize> = crate::solver::support_of(&beta).into_iter().map(|(_, j)| j).collect();
            assert_eq!(nonzero_cols.len(), 3);
            assert!(nonzero_cols.contains(&0));
            let support = SupportPattern::from_blocks(&beta, 0.0);
            assert_eq!(joint_independence_partition(&support), parts);
            assert!(crate::interpreter::check_hierarchy(&support).0);
        }
        let beta = gen_scheme_beta(Scheme::Conditional, &layout, 10, &SignalSpec::default(), &mut rng).unwrap();
        let report = IndependenceReport::from_support(&SupportPattern::from_blocks(&beta, 0.0)).unwrap();
        assert!(report.text.contains("Z1 ⊥ {Z2,Z3} | Z4, X"));
        assert_eq!(
            Scheme::try_from(4).unwrap_err().to_string(),
            "invalid configuration: scheme must be 1, 2 or 3, got 4"
        );
    }

    #[test]
    fn multinomial_frequencies_match_probabilities() {
        let layout = ResponseLayout::new(&[2, 3], 2).unwrap();
        let basis = BasisSet::new(&layout);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let beta = gen_scheme_beta(Scheme::Mutual, &layout, 2, &SignalSpec::default(), &mut rng).unwrap();
        let n = 100_000;
        let x = Array2::from_shape_fn((n, 3), |(_, j)| if j == 0 { 1.0 } else { 0.3 * j as f64 });
        let y = sample_responses(x.view(), &beta, &basis, Family::Multinomial, &mut rng).unwrap();
        assert!(row_sums(&y).iter().all(|&s| s == 1.0));
        let freq = y.sum_axis(Axis(0)) / n as f64;
        let pi = predict_matrix(&beta, &basis, x.slice(ndarray::s![..1, ..])).unwrap();
        for (f, p) in freq.iter().zip(pi.row(0)) {
            assert!((f - p).abs() < 0.01, "{f} vs {p}");
        }

        let zero = CoefficientBlocks::zeros(&layout, &[1, 1, 1]).unwrap();
        let y = sample_responses(x.view(), &zero, &basis, Family::Multinomial, &mut rng).unwrap();
        let freq = y.sum_axis(Axis(0)) / n as f64;
        assert!(freq.iter().all(|f| (f - 1.0 / 6.0).abs() < 0.01));
    }

    #[test]
    fn misclassification_of_uniform_guess() {
        let card = 24;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 50_000;
        let mut y = Array2::zeros((n, card));
        for i in 0..n {
            y[[i, rng.gen_range(0..card)]] = 1.0;
        }
        let probs = Array2::from_elem((n, card), 1.0 / card as f64);
        let rate = misclassification_rate(&probs, &y);
        assert!((rate - (1.0 - 1.0 / card as f64)).abs() < 0.01, "{rate}");
    }

    #[test]
    fn effect_rate_counts() {
        let layout = ResponseLayout::new(&[2, 2, 2], 3).unwrap();
        let truth = Scheme::Joint.effects(&layout).unwrap();
        assert_eq!(truth.len(), 4);
        assert_eq!(effect_rates(&truth, &truth, layout.effects()), (1.0, 0.0));
        let mains: Vec<Effect> = truth.iter().filter(|e| e.order() == 1).cloned().collect();
        let (tpr, fpr) = effect_rates(&mains, &truth, layout.effects());
        assert_eq!((tpr, fpr), (0.75, 0.0));
        let all: Vec<Effect> = layout.effects().to_vec();
        assert_eq!(effect_rates(&all, &truth, layout.effects()), (1.0, 1.0));
    }

    #[test]
    fn sep_mult_joint_is_a_product_of_marginals() {
        let layout = ResponseLayout::new(&[2, 3], 2).unwrap();
        let basis = BasisSet::new(&layout);
        let config = SimConfig {
            categories: vec![2, 3],
            max_order: 2,
            ..SimConfig::default()
        };
        let data = {
            let mut c = config.clone();
            c.n_valid = 300;
            c.n_test = 50;
            replicate_data(&c, &basis, Scheme::Mutual, 300, 3, 0).unwrap()
        };
        let solver = config.solver(Family::Multinomial, PenaltyMode::GroupLasso);
        let fit = SepMult::fit(&data.train, &data.valid, &layout, &solver).unwrap();
        let joint = fit.predict(data.test.x().view()).unwrap();
        assert!(row_sums(&joint).iter().all(|s| (s - 1.0).abs() < 1e-12));
        let margins = fit.marginal_probs(data.test.x().view()).unwrap();
        assert_eq!(marginals_of(&layout, &joint).len(), 2);
        for (m, direct) in marginals_of(&layout, &joint).iter().zip(&margins) {
            assert!((m - direct).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn config_toml_and_validation() {
        let c = SimConfig::from_toml_str("n = [50]\nschemes = [2]\nreplicates = 2\n").unwrap();
        assert_eq!(c.schemes, vec![Scheme::Joint]);
        assert!(SimConfig::from_toml_str("schemes = [4]\n").is_err());
        assert!(SimConfig::from_toml_str("n = []\n").is_err());
        assert!(SimConfig::from_toml_str("bogus = 1\n").is_err());
        let full = SimConfig::default().full_scale();
        assert_eq!((full.replicates, full.n_test), (100, 10_000));
    }

    #[test]
    fn tiny_study_is_reproducible() {
        let config = SimConfig {
            categories: vec![2, 2, 3],
            max_order: 3,
            n: vec![80],
            p: vec![3],
            schemes: vec![Scheme::Joint],
            n_valid: 100,
            n_test: 100,
            replicates: 2,
            path: PathSpec {
                count: 6,
                ratio: 1e-2,
                patience: Some(2),
            },
            ..SimConfig::default()
        };
        let a = run_study(&config).unwrap();
        let b = run_study(&config).unwrap();
        assert_eq!(a.rows_csv().unwrap(), b.rows_csv().unwrap());
        assert_eq!(a.rows.len(), 8);
        let oracle = a.row(Scheme::Joint, 80, 3, Estimator::Oracle).unwrap();
        assert_eq!(oracle.hellinger_mean, 0.0);
        assert!(a.rows.iter().all(|r| r.failures == 0), "{:?}", a.replicates);
        for r in &a.rows {
            assert!((0.0..=1.0).contains(&r.hellinger_mean));
            assert!((0.0..=1.0).contains(&r.misclassification_mean));
        }
    }
}
