//! Accelerated proximal gradient fits, `λ_max`, and warm-started `λ` paths
//! tuned on validation cross-entropy.

use std::time::Instant;

use ndarray::{s, Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::blocks::{BlocksRecord, CoefficientBlocks};
use crate::error::{Error, Result};
use crate::likelihood::{cross_entropy, lipschitz_bound, Dataset, Family, Objective};
use crate::penalty::{GroupStructure, PenaltyMode};

/// Consecutive small objective changes required to stop.
const STALL_ITERATIONS: usize = 3;
/// Step curvature at which a Poisson fit is declared divergent.
const MAX_CURVATURE: f64 = 1e30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    pub count: usize,
    /// `λ_min / λ_max`.
    pub ratio: f64,
    /// With validation data and warm starts, stop once this many
    /// consecutive fits fail to improve the validation cross-entropy.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl Default for PathSpec {
    fn default() -> Self {
        PathSpec {
            count: 50,
            ratio: 1e-4,
            patience: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub family: Family,
    pub penalty: PenaltyMode,
    /// Single penalty level; when absent a path is fitted.
    pub lambda: Option<f64>,
    pub path: PathSpec,
    /// Relative objective change that counts as stalled.
    pub tol: f64,
    pub max_iter: usize,
    /// Backtracking growth factor `η`.
    pub backtrack: f64,
    pub accelerate: bool,
    pub restart: bool,
    /// Warm-start along the path; when off, path fits run in parallel.
    pub warm_start: bool,
    /// Use a threaded gradient. Results are identical either way.
    pub parallel: bool,
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            family: Family::Multinomial,
            penalty: PenaltyMode::OverlappingHierarchical,
            lambda: None,
            path: PathSpec::default(),
            tol: 1e-8,
            max_iter: 5000,
            backtrack: 2.0,
            accelerate: true,
            restart: true,
            warm_start: true,
            parallel: false,
            deterministic: false,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: SolverConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::Config(format!("lambda must be finite and >= 0, got {l}")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be > 0, got {}", self.tol)));
        }
        if !(self.backtrack > 1.0) {
            return Err(Error::Config(format!(
                "backtracking factor must be > 1, got {}",
                self.backtrack
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        if self.path.count == 0 || !(self.path.ratio > 0.0 && self.path.ratio <= 1.0) {
            return Err(Error::Config(format!(
                "path needs count >= 1 and ratio in (0, 1], got {:?}",
                self.path
            )));
        }
        Ok(())
    }
}

/// Outcome of one penalized fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: CoefficientBlocks,
    pub lambda: f64,
    /// Penalized objective after each accepted step, starting from the
    /// initial point.
    pub objective_trace: Vec<f64>,
    /// Accepted proximal gradient steps.
    pub iterations: usize,
    /// Extrapolations discarded because the objective went up.
    pub restarts: usize,
    pub converged: bool,
    /// Poisson overflow stopped the fit; `beta` is the last finite iterate.
    pub diverged: bool,
    /// Every overlapping prox along the way carried an optimality certificate.
    pub prox_certified: bool,
    /// Curvature `L` of the last accepted step.
    pub step_curvature: f64,
    /// `(effect, block)` pairs with a nonzero coefficient block.
    pub support: Vec<(usize, usize)>,
    pub seconds: f64,
    pub family: Family,
    pub penalty: PenaltyMode,
    pub validation_cross_entropy: Option<f64>,
}

/// Serializable form of [`FitResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub family: Family,
    pub penalty: PenaltyMode,
    pub lambda: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub converged: bool,
    pub diverged: bool,
    pub prox_certified: bool,
    pub step_curvature: f64,
    pub objective_trace: Vec<f64>,
    /// Nonzero blocks as 1-based effect labels and 1-based block index.
    pub support: Vec<SupportEntry>,
    pub seconds: f64,
    pub validation_cross_entropy: Option<f64>,
    pub beta: BlocksRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub effect: Vec<usize>,
    pub block: usize,
}

impl FitResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the initial point")
    }

    pub fn record(&self) -> FitRecord {
        let effects = self.beta.layout().effects();
        FitRecord {
            family: self.family,
            penalty: self.penalty,
            lambda: self.lambda,
            iterations: self.iterations,
            restarts: self.restarts,
            converged: self.converged,
            diverged: self.diverged,
            prox_certified: self.prox_certified,
            step_curvature: self.step_curvature,
            objective_trace: self.objective_trace.clone(),
            support: self
                .support
                .iter()
                .map(|&(k, j)| SupportEntry {
                    effect: effects[k].labels(),
                    block: j + 1,
                })
                .collect(),
            seconds: self.seconds,
            validation_cross_entropy: self.validation_cross_entropy,
            beta: BlocksRecord::from(&self.beta),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.record())?)
    }
}

/// Nonzero `(effect, block)` pairs of `beta`.
pub fn support_of(beta: &CoefficientBlocks) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for k in 0..beta.layout().num_effects() {
        for j in 0..beta.num_blocks() {
            if !beta.is_zero_block(k, j) {
                out.push((k, j));
            }
        }
    }
    out
}

enum ProxKind {
    /// Prox of `λ Ω`.
    Penalty(f64),
    /// Projection onto `{penalized blocks = 0}`.
    Unpenalized,
}

struct Problem<'a> {
    objective: Objective<'a>,
    gs: &'a GroupStructure,
    kind: ProxKind,
    /// `(effect, block)` positions that stay fixed at their start value.
    frozen: Vec<(usize, usize)>,
}

impl Problem<'_> {
    fn penalty(&self, beta: &CoefficientBlocks) -> Result<f64> {
        match self.kind {
            ProxKind::Penalty(lambda) if lambda > 0.0 => Ok(lambda * self.gs.omega(beta)?),
            _ => Ok(0.0),
        }
    }

    fn loss_and_grad(&self, beta: &CoefficientBlocks) -> Result<(f64, Array2<f64>)> {
        let eval = self.objective.evaluate(beta)?;
        let mut grad = eval.grad;
        for &(k, j) in &self.frozen {
            let rows = beta.layout().rows(k);
            let cols = beta.cols(j);
            grad.slice_mut(s![rows, cols]).fill(0.0);
        }
        Ok((eval.value, grad))
    }

    /// Prox step from `z` with curvature `l`; reports whether the prox was
    /// certified.
    fn prox(&self, z: CoefficientBlocks, l: f64) -> Result<(CoefficientBlocks, bool)> {
        match self.kind {
            ProxKind::Penalty(lambda) => {
                if lambda == 0.0 {
                    return Ok((z, true));
                }
                let out = self.gs.prox(&z, lambda / l)?;
                Ok((out.beta, out.converged))
            }
            ProxKind::Unpenalized => {
                let mut z = z;
                for k in 0..self.gs.num_effects() {
                    for j in 0..self.gs.num_blocks() {
                        if self.gs.is_penalized(k, j) {
                            z.block_mut(k, j).fill(0.0);
                        }
                    }
                }
                Ok((z, true))
            }
        }
    }
}

fn frozen_blocks(beta: &CoefficientBlocks, family: Family) -> Vec<(usize, usize)> {
    // Softmax ignores the constant direction, so the multinomial {0} block
    // has no gradient and stays where it starts.
    match family {
        Family::Multinomial => (0..beta.num_blocks()).map(|j| (0, j)).collect(),
        Family::Poisson => Vec::new(),
    }
}

fn initial_curvature(data: &Dataset, family: Family) -> Result<f64> {
    match family {
        Family::Multinomial => lipschitz_bound(data),
        Family::Poisson => Ok(1.0),
    }
}

fn check_inputs(data: &Dataset, basis: &BasisSet, gs: &GroupStructure, start: &CoefficientBlocks) -> Result<()> {
    if start.layout() != basis.layout() {
        return Err(Error::Dimension("start coefficients use a different layout".into()));
    }
    if start.num_predictors() != data.p() {
        return Err(Error::Dimension(format!(
            "start has {} predictor columns, data has {}",
            start.num_predictors(),
            data.p()
        )));
    }
    if gs.num_blocks() != start.num_blocks() || gs.num_effects() != basis.layout().num_effects() {
        return Err(Error::Dimension(
            "group structure does not match the coefficients".into(),
        ));
    }
    Ok(())
}

fn minimize(problem: &Problem<'_>, start: CoefficientBlocks, config: &SolverConfig, l0: f64) -> Result<FitResult> {
    let clock = Instant::now();
    let eta = config.backtrack;
    let mut x = start;
    let (fx_loss, _) = problem.loss_and_grad(&x)?;
    let mut fx = fx_loss + problem.penalty(&x)?;
    let mut trace = vec![fx];
    let mut y = x.clone();
    let mut t: f64 = 1.0;
    let mut l = l0;
    let mut stalled = 0;
    let mut iterations = 0;
    let mut converged = false;
    let mut diverged = false;
    let mut certified = true;
    let mut extrapolated = false;

    let mut restarts = 0;
    while iterations < config.max_iter {
        let (fy, grad) = match problem.loss_and_grad(&y) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) if extrapolated => {
                y = x.clone();
                t = 1.0;
                extrapolated = false;
                restarts += 1;
                continue;
            }
            Err(Error::NonFinite(_)) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };

        // Backtracking on the quadratic upper bound at y.
        let (candidate, f_candidate) = loop {
            if l > MAX_CURVATURE {
                break (None, f64::INFINITY);
            }
            let mut z = y.stacked().clone();
            z.scaled_add(-1.0 / l, &grad);
            let (cand, ok) = problem.prox(y.with_values(z)?, l)?;
            certified &= ok;
            let diff = cand.stacked() - y.stacked();
            let linear: f64 = Zip::from(&diff).and(&grad).fold(0.0, |acc, d, g| acc + d * g);
            let quad: f64 = diff.iter().map(|v| v * v).sum::<f64>();
            match problem.objective.value(&cand) {
                Ok(fc) if fc <= fy + linear + 0.5 * l * quad + 16.0 * f64::EPSILON * fy.abs().max(1.0) => {
                    break (Some(cand), fc);
                }
                Ok(_) | Err(Error::NonFinite(_)) => l *= eta,
                Err(e) => return Err(e),
            }
        };
        let Some(candidate) = candidate else {
            diverged = true;
            break;
        };
        let f_new = f_candidate + problem.penalty(&candidate)?;

        if f_new > fx {
            if extrapolated && config.restart {
                // Redo from x as a plain step.
                y = x.clone();
                t = 1.0;
                extrapolated = false;
                restarts += 1;
                continue;
            }
            if !extrapolated {
                // A plain majorize-minimize step cannot go up beyond rounding.
                converged = true;
                break;
            }
        }

        iterations += 1;
        let change = (fx - f_new).abs() / fx.abs().max(1.0);
        let previous = std::mem::replace(&mut x, candidate);
        fx = f_new;
        trace.push(fx);
        if config.accelerate {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let momentum = (t - 1.0) / t_next;
            let mut next = x.stacked().clone();
            if momentum > 0.0 {
                let delta = x.stacked() - previous.stacked();
                next.scaled_add(momentum, &delta);
            }
            y = x.with_values(next)?;
            extrapolated = momentum > 0.0;
            t = t_next;
        } else {
            y = x.clone();
        }

        if change <= config.tol {
            stalled += 1;
            if stalled >= STALL_ITERATIONS {
                converged = true;
                break;
            }
        } else {
            stalled = 0;
        }
    }

    let lambda = match problem.kind {
        ProxKind::Penalty(l) => l,
        ProxKind::Unpenalized => f64::INFINITY,
    };
    Ok(FitResult {
        support: support_of(&x),
        beta: x,
        lambda,
        objective_trace: trace,
        iterations,
        restarts,
        converged: converged && !diverged,
        diverged,
        prox_certified: certified,
        step_curvature: l,
        seconds: clock.elapsed().as_secs_f64(),
        family: problem.objective.family(),
        penalty: problem.gs.mode(),
        validation_cross_entropy: None,
    })
}

/// Penalized fit at `λ = config.lambda` from zero coefficients.
pub fn fit(data: &Dataset, basis: &BasisSet, gs: &GroupStructure, config: &SolverConfig) -> Result<FitResult> {
    let lambda = config
        .lambda
        .ok_or_else(|| Error::Config("a single fit needs lambda".into()))?;
    let start = CoefficientBlocks::zeros(basis.layout(), &block_sizes(data, gs)?)?;
    fit_from(data, basis, gs, config, lambda, start)
}

/// Penalized fit at `lambda` starting from `start`.
pub fn fit_from(
    data: &Dataset,
    basis: &BasisSet,
    gs: &GroupStructure,
    config: &SolverConfig,
    lambda: f64,
    start: CoefficientBlocks,
) -> Result<FitResult> {
    config.validate()?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    check_inputs(data, basis, gs, &start)?;
    let objective = Objective::new(basis, data, config.family)?.parallel(config.parallel);
    let problem = Problem {
        objective,
        gs,
        kind: ProxKind::Penalty(lambda),
        frozen: frozen_blocks(&start, config.family),
    };
    minimize(&problem, start, config, initial_curvature(data, config.family)?)
}

/// Block sizes implied by the group structure for this data set: the
/// partition must have been built for `data.p()` columns.
fn block_sizes(data: &Dataset, gs: &GroupStructure) -> Result<Vec<usize>> {
    let partition = gs.partition();
    if partition.iter().sum::<usize>() != data.p() {
        return Err(Error::Dimension(format!(
            "group structure partition {partition:?} does not cover the {} predictor columns",
            data.p()
        )));
    }
    Ok(partition.to_vec())
}

/// `λ_max` and the fit of the unpenalized blocks it is computed at.
#[derive(Debug, Clone)]
pub struct LambdaMax {
    pub value: f64,
    pub base: CoefficientBlocks,
}

/// Smallest `λ` known to zero every penalized block.
///
/// Unpenalized blocks are fitted first with every penalized block at zero.
/// Each penalized block's gradient is then assigned to the heaviest group
/// containing it, and `λ_max = max_g ‖∇_{assigned to g}‖ / w_g`. In group
/// lasso mode this is exact; in overlapping mode it is a conservative bound.
pub fn lambda_max(data: &Dataset, basis: &BasisSet, gs: &GroupStructure, config: &SolverConfig) -> Result<LambdaMax> {
    config.validate()?;
    let assignment = gs.dual_assignment();
    if assignment.is_empty() {
        return Err(Error::Penalty("every group weight is zero".into()));
    }
    let start = CoefficientBlocks::zeros(basis.layout(), &block_sizes(data, gs)?)?;
    check_inputs(data, basis, gs, &start)?;
    let objective = Objective::new(basis, data, config.family)?.parallel(config.parallel);
    let problem = Problem {
        objective,
        gs,
        kind: ProxKind::Unpenalized,
        frozen: frozen_blocks(&start, config.family),
    };
    let mut inner = config.clone();
    inner.tol = inner.tol.min(1e-12);
    let base = minimize(&problem, start, &inner, initial_curvature(data, config.family)?)?.beta;
    let (_, grad) = problem.loss_and_grad(&base)?;
    let grad = base.with_values(grad)?;
    let value = assignment
        .iter()
        .map(|(gi, effects)| {
            let g = &gs.groups()[*gi];
            let norm = effects
                .iter()
                .map(|&k| grad.block_norm_sq(k, g.block))
                .sum::<f64>()
                .sqrt();
            norm / g.weight
        })
        .fold(0.0, f64::max);
    Ok(LambdaMax { value, base })
}

/// Largest violation of `-∇L(β) ∈ λ ∂Ω(β)`.
///
/// Group lasso mode checks each block: `‖∇ + λ w β/‖β‖‖` on nonzero blocks,
/// `(‖∇‖ - λ w)₊` on zero ones, `‖∇‖` on unpenalized ones. Overlapping mode
/// reports the prox-gradient mapping `max |β - prox_{λΩ}(β - ∇)|`, which
/// vanishes exactly at the solution.
pub fn kkt_residual(
    data: &Dataset,
    basis: &BasisSet,
    gs: &GroupStructure,
    family: Family,
    beta: &CoefficientBlocks,
    lambda: f64,
) -> Result<f64> {
    let objective = Objective::new(basis, data, family)?;
    let problem = Problem {
        objective,
        gs,
        kind: ProxKind::Penalty(lambda),
        frozen: frozen_blocks(beta, family),
    };
    let (_, grad) = problem.loss_and_grad(beta)?;
    let grad = beta.with_values(grad)?;
    match gs.mode() {
        PenaltyMode::GroupLasso => {
            let weights = gs.weights();
            let mut worst: f64 = 0.0;
            for k in 0..gs.num_effects() {
                for j in 0..gs.num_blocks() {
                    let w = lambda * weights[[k, j]];
                    let g = grad.block(k, j);
                    let norm = beta.block_norm(k, j);
                    let r = if w == 0.0 {
                        grad.block_norm(k, j)
                    } else if norm > 0.0 {
                        (&g + &(&beta.block(k, j) * (w / norm)))
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt()
                    } else {
                        (grad.block_norm(k, j) - w).max(0.0)
                    };
                    worst = worst.max(r);
                }
            }
            Ok(worst)
        }
        PenaltyMode::OverlappingHierarchical => {
            let z = beta.with_values(beta.stacked() - grad.stacked())?;
            let (p, _) = problem.prox(z, 1.0)?;
            Ok((p.stacked() - beta.stacked()).iter().fold(0.0, |m, v| m.max(v.abs())))
        }
    }
}

/// Fits along a path together with the validation choice.
#[derive(Debug, Clone)]
pub struct PathResult {
    pub lambdas: Vec<f64>,
    pub fits: Vec<FitResult>,
    /// Index of the fit with the lowest validation cross-entropy.
    pub selected: Option<usize>,
    pub lambda_max: f64,
}

impl PathResult {
    pub fn total_iterations(&self) -> usize {
        self.fits.iter().map(|f| f.iterations).sum()
    }

    pub fn best(&self) -> Option<&FitResult> {
        self.selected.map(|i| &self.fits[i])
    }
}

/// `count` values log-spaced from `top` down to `ratio · top`.
pub fn lambda_grid(top: f64, spec: &PathSpec) -> Vec<f64> {
    if spec.count == 1 {
        return vec![top];
    }
    let step = spec.ratio.ln() / (spec.count - 1) as f64;
    (0..spec.count).map(|i| top * (step * i as f64).exp()).collect()
}

/// Fits from the largest to the smallest `λ`, warm-starting each fit at the
/// previous solution, and picks the fit with the lowest validation
/// cross-entropy when `validation` is given.
pub fn fit_path(
    data: &Dataset,
    basis: &BasisSet,
    gs: &GroupStructure,
    config: &SolverConfig,
    validation: Option<&Dataset>,
) -> Result<PathResult> {
    let top = lambda_max(data, basis, gs, config)?;
    let lambdas = lambda_grid(top.value, &config.path);
    fit_grid(data, basis, gs, config, validation, &lambdas, top)
}

/// As [`fit_path`] on a caller-supplied decreasing grid.
pub fn fit_grid(
    data: &Dataset,
    basis: &BasisSet,
    gs: &GroupStructure,
    config: &SolverConfig,
    validation: Option<&Dataset>,
    lambdas: &[f64],
    top: LambdaMax,
) -> Result<PathResult> {
    let validate = |fit: &mut FitResult| -> Result<f64> {
        let ce = match validation {
            Some(valid) => cross_entropy(&fit.beta, basis, valid)?,
            None => f64::NAN,
        };
        fit.validation_cross_entropy = validation.map(|_| ce);
        Ok(ce)
    };
    let fits: Vec<FitResult> = if config.warm_start {
        let mut fits = Vec::with_capacity(lambdas.len());
        let mut start = top.base.clone();
        let mut best = f64::INFINITY;
        let mut worse = 0;
        for &lambda in lambdas {
            let mut fit = fit_from(data, basis, gs, config, lambda, start)?;
            let ce = validate(&mut fit)?;
            start = fit.beta.clone();
            fits.push(fit);
            if ce < best {
                best = ce;
                worse = 0;
            } else {
                worse += 1;
            }
            if validation.is_some() && config.path.patience.is_some_and(|k| worse >= k) {
                break;
            }
        }
        fits
    } else {
        lambdas
            .par_iter()
            .map(|&lambda| {
                let mut fit = fit_from(data, basis, gs, config, lambda, top.base.clone())?;
                validate(&mut fit)?;
                Ok(fit)
            })
            .collect::<Result<Vec<_>>>()?
    };
    let mut selected = None;
    let mut best = f64::INFINITY;
    for (i, fit) in fits.iter().enumerate() {
        if let Some(ce) = fit.validation_cross_entropy {
            if ce < best {
                best = ce;
                selected = Some(i);
            }
        }
    }
    Ok(PathResult {
        lambdas: lambdas[..fits.len()].to_vec(),
        fits,
        selected,
        lambda_max: top.value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::ResponseLayout;
    use crate::likelihood::predict_matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, WeightedIndex};

    /// Intercept plus standard normal columns; one multinomial draw per row
    /// from a random sparse coefficient matrix.
    fn toy(layout: &ResponseLayout, n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn(
            (n, p),
            |(_, j)| {
                if j == 0 {
                    1.0
                } else {
                    StandardNormal.sample(&mut rng)
                }
            },
        );
        let basis = BasisSet::new(layout);
        let mut beta = CoefficientBlocks::zeros(layout, &vec![1; p]).unwrap();
        for k in 1..layout.num_effects().min(4) {
            for j in 0..p.min(2) {
                beta.block_mut(k, j).mapv_inplace(|_| rng.gen_range(-1.0..1.0));
            }
        }
        let probs = predict_matrix(&beta, &basis, x.view()).unwrap();
        let mut y = Array2::zeros((n, layout.card()));
        for i in 0..n {
            let dist = WeightedIndex::new(probs.row(i).to_vec()).unwrap();
            y[[i, dist.sample(&mut rng)]] = 1.0;
        }
        Dataset::new(x, y).unwrap()
    }

    fn config(family: Family, penalty: PenaltyMode) -> SolverConfig {
        SolverConfig {
            family,
            penalty,
            tol: 1e-13,
            max_iter: 20_000,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn unpenalized_fit_matches_plain_gradient() {
        let layout = ResponseLayout::new(&[2, 2], 2).unwrap();
        let data = toy(&layout, 400, 3, 1);
        let basis = BasisSet::new(&layout);
        let gs = GroupStructure::new(&layout, &[1, 1, 1], PenaltyMode::GroupLasso).unwrap();
        let mut cfg = config(Family::Multinomial, PenaltyMode::GroupLasso);
        cfg.lambda = Some(0.0);
        let fit = fit(&data, &basis, &gs, &cfg).unwrap();
        assert!(fit.converged);

        // Reference: fixed-step gradient descent run for a long time.
        let obj = Objective::new(&basis, &data, Family::Multinomial).unwrap();
        let step = 1.0 / lipschitz_bound(&data).unwrap();
        let mut beta = CoefficientBlocks::zeros(&layout, &[1, 1, 1]).unwrap();
        for _ in 0..100_000 {
            let g = obj.evaluate(&beta).unwrap().grad;
            beta.stacked_mut().scaled_add(-step, &g);
        }
        let reference = obj.value(&beta).unwrap();
        assert!(
            (fit.objective() - reference).abs() <= 1e-8,
            "{} vs {}",
            fit.objective(),
            reference
        );
    }

    #[test]
    fn lambda_max_zeroes_penalized_blocks() {
        let layout = ResponseLayout::new(&[2, 3], 2).unwrap();
        let data = toy(&layout, 300, 4, 2);
        let basis = BasisSet::new(&layout);
        for family in [Family::Multinomial, Family::Poisson] {
            for mode in [PenaltyMode::GroupLasso, PenaltyMode::OverlappingHierarchical] {
                let gs = GroupStructure::new(&layout, &[1, 3], mode).unwrap();
                let cfg = config(family, mode);
                let top = lambda_max(&data, &basis, &gs, &cfg).unwrap();
                assert!(top.value > 0.0);
                let fit = fit_from(&data, &basis, &gs, &cfg, top.value * 1.001, top.base.clone()).unwrap();
                for &(k, j) in &fit.support {
                    assert!(!gs.is_penalized(k, j), "{family:?} {mode:?} kept ({k}, {j})");
                }
                // Just below, something enters in group lasso mode.
                if mode == PenaltyMode::GroupLasso {
                    let fit = fit_from(&data, &basis, &gs, &cfg, top.value * 0.9, top.base).unwrap();
                    assert!(fit.support.iter().any(|&(k, j)| gs.is_penalized(k, j)));
                }
            }
        }
    }

    #[test]
    fn doubling_weights_halves_lambda_max() {
        let layout = ResponseLayout::new(&[2, 2], 2).unwrap();
        let data = toy(&layout, 200, 3, 3);
        let basis = BasisSet::new(&layout);
        let gs = GroupStructure::new(&layout, &[1, 2], PenaltyMode::GroupLasso).unwrap();
        let heavy =
            GroupStructure::with_weights(&layout, &[1, 2], PenaltyMode::GroupLasso, gs.weights() * 2.0).unwrap();
        let cfg = config(Family::Multinomial, PenaltyMode::GroupLasso);
        let a = lambda_max(&data, &basis, &gs, &cfg).unwrap().value;
        let b = lambda_max(&data, &basis, &heavy, &cfg).unwrap().value;
        assert!((a - 2.0 * b).abs() <= 1e-12 * a);
    }

    #[test]
    fn kkt_and_monotone_trace() {
        let layout = ResponseLayout::new(&[2, 2, 2], 3).unwrap();
        let data = toy(&layout, 300, 3, 4);
        let basis = BasisSet::new(&layout);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for family in [Family::Multinomial, Family::Poisson] {
            for mode in [PenaltyMode::GroupLasso, PenaltyMode::OverlappingHierarchical] {
                let gs = GroupStructure::new(&layout, &[1, 1, 1], mode).unwrap();
                let mut cfg = config(family, mode);
                let top = lambda_max(&data, &basis, &gs, &cfg).unwrap().value;
                cfg.lambda = Some(top * rng.gen_range(0.01..0.5));
                let fit = fit(&data, &basis, &gs, &cfg).unwrap();
                assert!(fit.converged && fit.prox_certified);
                for w in fit.objective_trace.windows(2) {
                    assert!(w[1] <= w[0] + 1e-12, "{family:?} {mode:?} trace went up");
                }
                let r = kkt_residual(&data, &basis, &gs, family, &fit.beta, fit.lambda).unwrap();
                assert!(r <= 1e-6, "{family:?} {mode:?} kkt {r}");

                // Restarting at the solution re-converges at once.
                let again = fit_from(&data, &basis, &gs, &cfg, fit.lambda, fit.beta.clone()).unwrap();
                assert!(again.iterations <= 3, "{} iterations", again.iterations);
            }
        }
    }

    #[test]
    fn warm_path_is_cheaper_and_selects_minimum() {
        let layout = ResponseLayout::new(&[2, 2], 2).unwrap();
        let data = toy(&layout, 300, 4, 5);
        let valid = toy(&layout, 300, 4, 6);
        let basis = BasisSet::new(&layout);
        let gs = GroupStructure::new(&layout, &[1, 1, 1, 1], PenaltyMode::OverlappingHierarchical).unwrap();
        let mut cfg = config(Family::Multinomial, PenaltyMode::OverlappingHierarchical);
        cfg.tol = 1e-9;
        cfg.path = PathSpec {
            count: 12,
            ratio: 1e-3,
            patience: None,
        };
        let warm = fit_path(&data, &basis, &gs, &cfg, Some(&valid)).unwrap();
        cfg.warm_start = false;
        let cold = fit_path(&data, &basis, &gs, &cfg, Some(&valid)).unwrap();
        assert!(warm.total_iterations() < cold.total_iterations());

        let sel = warm.selected.unwrap();
        let ce: Vec<f64> = warm.fits.iter().map(|f| f.validation_cross_entropy.unwrap()).collect();
        assert!(ce.iter().all(|&c| c >= ce[sel]));
        assert_eq!(warm.lambdas.len(), 12);
        assert!((warm.lambdas[11] / warm.lambdas[0] - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn config_from_toml() {
        let cfg = SolverConfig::from_toml_str(
            "family = \"pois\"\npenalty = \"group\"\ntol = 1e-6\n[path]\ncount = 5\nratio = 0.01\n",
        )
        .unwrap();
        assert_eq!(cfg.family, Family::Poisson);
        assert_eq!(cfg.penalty, PenaltyMode::GroupLasso);
        assert_eq!(cfg.path.count, 5);
        assert_eq!(cfg.max_iter, 5000);
        assert!(SolverConfig::from_toml_str("tol = -1.0").is_err());
        assert!(SolverConfig::from_toml_str("backtrack = 1.0").is_err());
        assert!(SolverConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn fit_record_serializes() {
        let layout = ResponseLayout::new(&[2, 2], 2).unwrap();
        let data = toy(&layout, 100, 2, 7);
        let basis = BasisSet::new(&layout);
        let gs = GroupStructure::new(&layout, &[1, 1], PenaltyMode::GroupLasso).unwrap();
        let mut cfg = config(Family::Multinomial, PenaltyMode::GroupLasso);
        cfg.lambda = Some(0.01);
        let fit = fit(&data, &basis, &gs, &cfg).unwrap();
        let json = fit.to_json().unwrap();
        let back: FitRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, fit.record());
        assert_eq!(back.beta.to_blocks().unwrap(), fit.beta);
    }
}
