//! Group lasso and hierarchical overlapping group lasso penalties with their
//! proximal operators.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::blocks::CoefficientBlocks;
use crate::error::{Error, Result};
use crate::layout::{Effect, ResponseLayout};

/// Stopping rule of the overlapping prox: largest dual block change.
pub const OVERLAP_TOL: f64 = 1e-10;
pub const OVERLAP_MAX_PASSES: usize = 10_000;
/// Dual sweeps spent locating the support before the exact polish.
const OVERLAP_SCREEN_PASSES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyMode {
    #[serde(rename = "group")]
    GroupLasso,
    #[serde(rename = "overlap")]
    OverlappingHierarchical,
}

impl PenaltyMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "group" => Ok(PenaltyMode::GroupLasso),
            "overlap" => Ok(PenaltyMode::OverlappingHierarchical),
            other => Err(Error::Config(format!("unknown penalty '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PenaltyMode::GroupLasso => "group",
            PenaltyMode::OverlappingHierarchical => "overlap",
        }
    }
}

/// One weight override as read from JSON; `effect` uses 1-based response
/// labels (`[]` is the overall effect) and `block` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightOverride {
    pub effect: Vec<usize>,
    pub block: usize,
    pub weight: f64,
}

/// A penalty group rooted at `(effect, block)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub effect: usize,
    pub block: usize,
    pub weight: f64,
    /// Effects whose `block`-column coefficients the group covers.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStructure {
    mode: PenaltyMode,
    num_effects: usize,
    num_blocks: usize,
    partition: Vec<usize>,
    groups: Vec<Group>,
}

/// `w_{k,j} = √(|k|_J · p_j)`, zero for the overall effect.
pub fn default_weights(layout: &ResponseLayout, partition: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((layout.num_effects(), partition.len()), |(k, j)| {
        if layout.effects()[k].is_overall() {
            0.0
        } else {
            ((layout.dim(k) * partition[j]) as f64).sqrt()
        }
    })
}

impl GroupStructure {
    /// Groups over `K × [t]` with default weights.
    pub fn new(layout: &ResponseLayout, partition: &[usize], mode: PenaltyMode) -> Result<Self> {
        Self::with_weights(layout, partition, mode, default_weights(layout, partition))
    }

    /// `weights` is `num_effects × num_blocks`.
    pub fn with_weights(
        layout: &ResponseLayout,
        partition: &[usize],
        mode: PenaltyMode,
        weights: Array2<f64>,
    ) -> Result<Self> {
        let shape = (layout.num_effects(), partition.len());
        if weights.dim() != shape {
            return Err(Error::Penalty(format!(
                "weight matrix has shape {:?}, expected {:?}",
                weights.dim(),
                shape
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Penalty("weights must be finite and nonnegative".into()));
        }
        let effects = layout.effects();
        let mut groups = Vec::new();
        for j in 0..partition.len() {
            for (k, effect) in effects.iter().enumerate() {
                let members = match mode {
                    PenaltyMode::GroupLasso => vec![k],
                    PenaltyMode::OverlappingHierarchical => {
                        // The group rooted at {0} would cover every effect.
                        if effect.is_overall() {
                            continue;
                        }
                        (0..effects.len())
                            .filter(|&m| effect.is_subset_of(&effects[m]))
                            .collect()
                    }
                };
                groups.push(Group {
                    effect: k,
                    block: j,
                    weight: weights[[k, j]],
                    members,
                });
            }
        }
        Ok(GroupStructure {
            mode,
            num_effects: effects.len(),
            num_blocks: partition.len(),
            partition: partition.to_vec(),
            groups,
        })
    }

    /// Applies JSON-style overrides on top of the default weights.
    pub fn with_overrides(
        layout: &ResponseLayout,
        partition: &[usize],
        mode: PenaltyMode,
        overrides: &[WeightOverride],
    ) -> Result<Self> {
        let mut weights = default_weights(layout, partition);
        for o in overrides {
            let effect = Effect::from_labels(&o.effect).map_err(|e| Error::Penalty(e.to_string()))?;
            let k = layout
                .effect_index(&effect)
                .ok_or_else(|| Error::Penalty(format!("effect {effect} is not in the layout")))?;
            if o.block == 0 || o.block > partition.len() {
                return Err(Error::Penalty(format!(
                    "block {} out of range 1..={}",
                    o.block,
                    partition.len()
                )));
            }
            if !o.weight.is_finite() || o.weight < 0.0 {
                return Err(Error::Penalty(format!(
                    "weight {} for {effect} must be finite and nonnegative",
                    o.weight
                )));
            }
            weights[[k, o.block - 1]] = o.weight;
        }
        Self::with_weights(layout, partition, mode, weights)
    }

    pub fn mode(&self) -> PenaltyMode {
        self.mode
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    /// Predictor block sizes the groups were built for.
    pub fn partition(&self) -> &[usize] {
        &self.partition
    }

    pub fn num_effects(&self) -> usize {
        self.num_effects
    }

    /// Weight matrix `num_effects × num_blocks`; entries without a group are 0.
    pub fn weights(&self) -> Array2<f64> {
        let mut w = Array2::zeros((self.num_effects, self.num_blocks));
        for g in &self.groups {
            w[[g.effect, g.block]] = g.weight;
        }
        w
    }

    /// Whether block `(effect, block)` lies in some positively weighted group.
    pub fn is_penalized(&self, effect: usize, block: usize) -> bool {
        self.groups
            .iter()
            .any(|g| g.block == block && g.weight > 0.0 && g.members.contains(&effect))
    }

    fn check(&self, beta: &CoefficientBlocks) -> Result<()> {
        if beta.layout().num_effects() != self.num_effects || beta.num_blocks() != self.num_blocks {
            return Err(Error::Dimension(
                "coefficient blocks do not match the group structure".into(),
            ));
        }
        Ok(())
    }

    fn group_norm(&self, g: &Group, beta: &CoefficientBlocks) -> f64 {
        g.members
            .iter()
            .map(|&m| beta.block_norm_sq(m, g.block))
            .sum::<f64>()
            .sqrt()
    }

    /// `Ω(β) = Σ_g w_g ‖β_{M(g)}‖`.
    pub fn omega(&self, beta: &CoefficientBlocks) -> Result<f64> {
        self.check(beta)?;
        Ok(self
            .groups
            .iter()
            .filter(|g| g.weight > 0.0)
            .map(|g| g.weight * self.group_norm(g, beta))
            .sum())
    }

    /// Per-group thresholds `scale · w_g`.
    pub fn thresholds(&self, scale: f64) -> Vec<f64> {
        self.groups.iter().map(|g| scale * g.weight).collect()
    }

    /// Prox of `scale · Ω`, dispatching on the mode.
    pub fn prox(&self, z: &CoefficientBlocks, scale: f64) -> Result<ProxOutcome> {
        let t = self.thresholds(scale);
        match self.mode {
            PenaltyMode::GroupLasso => Ok(ProxOutcome {
                beta: prox_group(z, &t, self)?,
                passes: 1,
                converged: true,
                duals: None,
            }),
            PenaltyMode::OverlappingHierarchical => prox_overlap(z, &t, self),
        }
    }

    /// For each penalized block, the group whose dual ball absorbs that block's
    /// gradient when bounding `λ_max` (the heaviest group containing it).
    pub(crate) fn dual_assignment(&self) -> Vec<(usize, Vec<usize>)> {
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); self.groups.len()];
        for j in 0..self.num_blocks {
            for k in 0..self.num_effects {
                let best = self
                    .groups
                    .iter()
                    .enumerate()
                    .filter(|(_, g)| g.block == j && g.weight > 0.0 && g.members.contains(&k))
                    .max_by(|a, b| {
                        a.1.weight
                            .partial_cmp(&b.1.weight)
                            .unwrap()
                            .then_with(|| (a.1.effect == k).cmp(&(b.1.effect == k)))
                            .then_with(|| b.0.cmp(&a.0))
                    });
                if let Some((gi, _)) = best {
                    assigned[gi].push(k);
                }
            }
        }
        assigned
            .into_iter()
            .enumerate()
            .filter(|(_, members)| !members.is_empty())
            .collect()
    }
}

/// Result of a proximal step.
#[derive(Debug, Clone)]
pub struct ProxOutcome {
    pub beta: CoefficientBlocks,
    pub passes: usize,
    pub converged: bool,
    /// Dual blocks of the overlapping prox, one per group, aligned with
    /// `Group::members`; they certify `z - β = Σ_g ξ_g`.
    pub duals: Option<Vec<Vec<Array2<f64>>>>,
}

fn check_thresholds(thresholds: &[f64], gs: &GroupStructure) -> Result<()> {
    if thresholds.len() != gs.groups.len() {
        return Err(Error::Penalty(format!(
            "{} thresholds for {} groups",
            thresholds.len(),
            gs.groups.len()
        )));
    }
    if thresholds.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::Penalty("thresholds must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Shrink factors at or below this are cancellation noise from `‖z_g‖ ≈ t_g`
/// and are rounded to an exact zero.
const ROUNDOFF_SHRINK: f64 = 8.0 * f64::EPSILON;

/// Blockwise soft thresholding: `max(1 - t_g/‖z_g‖, 0) z_g`.
pub fn prox_group(z: &CoefficientBlocks, thresholds: &[f64], gs: &GroupStructure) -> Result<CoefficientBlocks> {
    if gs.mode != PenaltyMode::GroupLasso {
        return Err(Error::Penalty("prox_group needs the group lasso mode".into()));
    }
    gs.check(z)?;
    check_thresholds(thresholds, gs)?;
    let mut out = z.clone();
    for (g, &t) in gs.groups.iter().zip(thresholds) {
        if t == 0.0 {
            continue;
        }
        let norm = z.block_norm(g.effect, g.block);
        let factor = if norm > t { 1.0 - t / norm } else { 0.0 };
        let factor = if factor <= ROUNDOFF_SHRINK { 0.0 } else { factor };
        out.block_mut(g.effect, g.block).mapv_inplace(|v| v * factor);
    }
    Ok(out)
}

/// The overlapping prox of one predictor block, written in the block norms
/// `a_b = ‖z_b‖`. At the optimum every block is `c_b z_b` with `c_b ∈ [0, 1]`
/// and every dual block is parallel to `z_b`, so it suffices to solve for
/// `y_b = c_b a_b`.
struct ScalarProx {
    a: Vec<f64>,
    /// `(t_g, member positions)` for groups with positive threshold, sorted
    /// by descending member count.
    groups: Vec<(f64, Vec<usize>)>,
}

enum NewtonStep {
    Solved(Vec<f64>),
    Drop(usize),
    Failed,
}

impl ScalarProx {
    fn scale(&self) -> f64 {
        1.0 + self.a.iter().fold(0.0f64, |m, v| m.max(*v))
    }

    /// Cyclic dual block-coordinate ascent over the enabled groups, starting
    /// from `xi`. Returns `y = a - Σ ξ`, the pass count and convergence.
    /// Also stops once every `|y_b|` is at most `vanish`, which certifies a
    /// zero solution.
    fn dual_bcd(
        &self,
        xi: &mut [Vec<f64>],
        enabled: &[bool],
        max_passes: usize,
        vanish: f64,
    ) -> (Vec<f64>, usize, bool) {
        let residual = |xi: &[Vec<f64>]| {
            let mut y = self.a.clone();
            for (gi, (_, members)) in self.groups.iter().enumerate() {
                if enabled[gi] {
                    for (&b, v) in members.iter().zip(&xi[gi]) {
                        y[b] -= v;
                    }
                }
            }
            y
        };
        let mut y = residual(xi);
        let mut passes = 0;
        let mut converged = !enabled.iter().any(|&e| e);
        let mut u = Vec::new();
        while !converged && passes < max_passes {
            passes += 1;
            let mut max_change: f64 = 0.0;
            for (gi, (t, members)) in self.groups.iter().enumerate() {
                if !enabled[gi] {
                    continue;
                }
                u.clear();
                u.extend(members.iter().zip(&xi[gi]).map(|(&b, v)| y[b] + v));
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > *t {
                    let s = t / norm;
                    u.iter_mut().for_each(|v| *v *= s);
                }
                for ((&b, new), old) in members.iter().zip(&u).zip(xi[gi].iter_mut()) {
                    let delta = new - *old;
                    max_change = max_change.max(delta.abs());
                    y[b] -= delta;
                    *old = *new;
                }
            }
            converged = max_change <= OVERLAP_TOL || y.iter().all(|v| v.abs() <= vanish);
        }
        (residual(xi), passes, converged)
    }

    /// Damped Newton on the problem with the blocks outside `support` fixed
    /// at zero and every group norm replaced by `√(‖y_M‖² + ε²)`. With `ε = 0`
    /// this is the exact objective, smooth as long as no group vanishes.
    fn newton(&self, support: &[bool], start: &[f64], eps: f64) -> NewtonStep {
        let vars: Vec<usize> = (0..self.a.len()).filter(|&b| support[b]).collect();
        let mut full = vec![0.0; self.a.len()];
        if vars.is_empty() {
            return NewtonStep::Solved(full);
        }
        let mut pos = vec![None; self.a.len()];
        for (i, &b) in vars.iter().enumerate() {
            pos[b] = Some(i);
        }
        let active: Vec<(f64, Vec<usize>)> = self
            .groups
            .iter()
            .map(|(t, members)| (*t, members.iter().filter_map(|&b| pos[b]).collect::<Vec<_>>()))
            .filter(|(_, m)| !m.is_empty())
            .collect();
        let a: Vec<f64> = vars.iter().map(|&b| self.a[b]).collect();
        let eps2 = eps * eps;
        let objective = |y: &[f64]| {
            let fit: f64 = y.iter().zip(&a).map(|(y, a)| 0.5 * (y - a) * (y - a)).sum();
            fit + active
                .iter()
                .map(|(t, m)| t * (m.iter().map(|&i| y[i] * y[i]).sum::<f64>() + eps2).sqrt())
                .sum::<f64>()
        };
        let n = vars.len();
        let scale = self.scale();
        let mut y: Vec<f64> = vars
            .iter()
            .map(|&b| {
                if start[b] > 0.0 {
                    start[b].min(self.a[b])
                } else {
                    1e-6 * self.a[b]
                }
            })
            .collect();
        let mut solved = false;
        for _ in 0..200 {
            let mut grad = nalgebra::DVector::from_iterator(n, y.iter().zip(&a).map(|(y, a)| y - a));
            let mut hess = nalgebra::DMatrix::<f64>::identity(n, n);
            for (t, m) in &active {
                let norm = (m.iter().map(|&i| y[i] * y[i]).sum::<f64>() + eps2).sqrt();
                // (t/r)(I - uuᵀ) with u = y/r
                let c = t / norm;
                for &i in m {
                    let ui = y[i] / norm;
                    grad[i] += t * ui;
                    for &k in m {
                        let uk = y[k] / norm;
                        hess[(i, k)] += if i == k {
                            c * (1.0 - ui * ui).max(0.0)
                        } else {
                            -c * ui * uk
                        };
                    }
                }
            }
            if grad.amax() <= 1e-12 * scale {
                solved = true;
                break;
            }
            let Some(chol) = nalgebra::Cholesky::new(hess) else {
                break;
            };
            let dir = -chol.solve(&grad);
            if eps == 0.0 {
                // A full step through zero on an already small block means the
                // iterate is sliding into a kink.
                let crossing = (0..n)
                    .filter(|&i| y[i] + dir[i] <= 0.0 && y[i] < 1e-4 * a[i])
                    .min_by(|&i, &k| (y[i] / a[i]).total_cmp(&(y[k] / a[k])));
                if let Some(i) = crossing {
                    return NewtonStep::Drop(vars[i]);
                }
            }
            let f0 = objective(&y);
            let slope = grad.dot(&dir);
            let mut step: f64 = 1.0;
            let mut accepted = false;
            while step > 1e-20 {
                let trial: Vec<f64> = (0..n).map(|i| y[i] + step * dir[i]).collect();
                if objective(&trial) <= f0 + 1e-4 * step * slope + 8.0 * f64::EPSILON * f0.abs() {
                    y = trial;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        for (&b, v) in vars.iter().zip(&y) {
            full[b] = *v;
        }
        if solved || eps > 0.0 {
            return NewtonStep::Solved(full);
        }
        // Stalled: the smooth solution wants a block at zero.
        let (smallest, ratio) = (0..n)
            .map(|i| (i, y[i].abs() / a[i]))
            .fold((0, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc });
        if ratio < 1e-6 {
            NewtonStep::Drop(vars[smallest])
        } else {
            NewtonStep::Failed
        }
    }

    /// Largest violation of the scalar optimality conditions by `(y, ξ)`.
    fn residual(&self, y: &[f64], duals: &[Vec<f64>]) -> f64 {
        let mut sum = vec![0.0; self.a.len()];
        let mut worst: f64 = 0.0;
        for ((t, m), xi) in self.groups.iter().zip(duals) {
            let norm = m.iter().map(|&b| y[b] * y[b]).sum::<f64>().sqrt();
            let xi_norm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (&b, v) in m.iter().zip(xi) {
                sum[b] += v;
                if norm > 0.0 {
                    worst = worst.max((v - t * y[b] / norm).abs());
                }
            }
            worst = worst.max(xi_norm - t);
        }
        for b in 0..self.a.len() {
            worst = worst.max((self.a[b] - y[b] - sum[b]).abs());
        }
        worst
    }

    /// Minimizer of the smoothed objective, tracked while `ε` shrinks, and
    /// the final `ε`.
    fn smoothed_path(&self) -> (Vec<f64>, f64) {
        let scale = self.scale();
        let support: Vec<bool> = self.a.iter().map(|&v| v > 0.0).collect();
        let mut y: Vec<f64> = self.a.iter().map(|v| 0.5 * v).collect();
        let mut eps = scale;
        let mut solved_at = eps;
        loop {
            if let NewtonStep::Solved(next) = self.newton(&support, &y, eps) {
                y = next;
                solved_at = eps;
            }
            if eps <= 1e-13 * scale {
                return (y, solved_at);
            }
            eps *= 0.1;
        }
    }

    /// Turns a smoothed solution into a prox estimate: groups whose norm is
    /// at the smoothing scale are zeroed, and the smoothed group gradients
    /// serve as duals.
    fn from_smoothed(&self, y: &[f64], eps: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
        let tiny = 1e-9 * self.scale();
        let mut out = y.to_vec();
        let mut duals = Vec::with_capacity(self.groups.len());
        for (t, m) in &self.groups {
            let sq: f64 = m.iter().map(|&b| y[b] * y[b]).sum();
            let r = (sq + eps * eps).sqrt();
            duals.push(m.iter().map(|&b| t * y[b] / r).collect());
            if sq.sqrt() <= tiny {
                for &b in m {
                    out[b] = 0.0;
                }
            }
        }
        (out, duals)
    }

    /// Given a candidate support, solves on it and certifies the zero blocks:
    /// the groups not touching the support must absorb `a` on the zeros
    /// within their balls. Adjusts the support until that holds.
    fn polish(&self, mut support: Vec<bool>, start: &[f64], warm: &[Vec<f64>]) -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
        let nb = self.a.len();
        let scale = self.scale();
        let mut seen: Vec<Vec<bool>> = Vec::new();
        for _ in 0..4 * nb + 4 {
            if seen.contains(&support) {
                return None;
            }
            seen.push(support.clone());
            let y = match self.newton(&support, start, 0.0) {
                NewtonStep::Solved(y) => y,
                NewtonStep::Drop(b) => {
                    support[b] = false;
                    continue;
                }
                NewtonStep::Failed => return None,
            };
            let inactive: Vec<bool> = self
                .groups
                .iter()
                .map(|(_, m)| m.iter().all(|&b| y[b] == 0.0))
                .collect();
            let mut cert: Vec<Vec<f64>> = warm
                .iter()
                .zip(&inactive)
                .map(|(x, &on)| if on { x.clone() } else { vec![0.0; x.len()] })
                .collect();
            let rest = ScalarProx {
                a: (0..nb).map(|b| if support[b] { 0.0 } else { self.a[b] }).collect(),
                groups: self.groups.clone(),
            };
            let (left, _, _) = rest.dual_bcd(&mut cert, &inactive, OVERLAP_MAX_PASSES, 1e-10 * scale);
            let missing: Vec<usize> = (0..nb)
                .filter(|&b| !support[b] && left[b].abs() > 1e-9 * scale)
                .collect();
            if missing.is_empty() {
                for (gi, (t, m)) in self.groups.iter().enumerate() {
                    if !inactive[gi] {
                        let norm = m.iter().map(|&b| y[b] * y[b]).sum::<f64>().sqrt();
                        cert[gi] = m.iter().map(|&b| t * y[b] / norm).collect();
                    }
                }
                return Some((y, cert));
            }
            for b in missing {
                support[b] = true;
            }
        }
        None
    }

    /// A short dual BCD run proposes the support, which is polished and
    /// certified. If that fails, a smoothed Newton continuation supplies the
    /// support instead, and its own solution is the last resort.
    fn solve(&self) -> (Vec<f64>, Vec<Vec<f64>>, usize, bool) {
        let nb = self.a.len();
        let all = vec![true; self.groups.len()];
        let mut xi: Vec<Vec<f64>> = self.groups.iter().map(|(_, m)| vec![0.0; m.len()]).collect();
        let (y_bcd, passes, _) = self.dual_bcd(&mut xi, &all, OVERLAP_SCREEN_PASSES, -1.0);
        let scale = self.scale();
        let support_of = |y: &[f64]| -> Vec<bool> { (0..nb).map(|b| self.a[b] > 0.0 && y[b] > 1e-9 * scale).collect() };

        if let Some((y, cert)) = self.polish(support_of(&y_bcd), &y_bcd, &xi) {
            return (y, cert, passes, true);
        }
        let (y_smooth, eps) = self.smoothed_path();
        let (y, duals) = self.from_smoothed(&y_smooth, eps);
        if let Some((y, cert)) = self.polish(support_of(&y), &y_smooth, &duals) {
            return (y, cert, passes, true);
        }
        let ok = self.residual(&y, &duals) <= 1e-9 * scale;
        (y, duals, passes, ok)
    }
}

/// Exact prox of `Σ_g t_g ‖β_{M(g)}‖` for overlapping member sets.
///
/// Dual blocks `ξ_g` live on `M(g)` inside the ball of radius `t_g` and the
/// primal solution is `β = z - Σ_g ξ_g`. Each predictor block is solved on
/// its vector of block norms: cyclic dual block-coordinate ascent (groups by
/// descending member-set size) finds the support, then a Newton solve on the
/// support and a dual certificate on the zeros make the result exact.
pub fn prox_overlap(z: &CoefficientBlocks, thresholds: &[f64], gs: &GroupStructure) -> Result<ProxOutcome> {
    if gs.mode != PenaltyMode::OverlappingHierarchical {
        return Err(Error::Penalty("prox_overlap needs the overlapping mode".into()));
    }
    gs.check(z)?;
    check_thresholds(thresholds, gs)?;

    let mut beta = z.clone();
    let mut duals: Vec<Vec<Array2<f64>>> = gs
        .groups
        .iter()
        .map(|g| {
            g.members
                .iter()
                .map(|&m| Array2::zeros(z.block(m, g.block).dim()))
                .collect()
        })
        .collect();
    let mut passes = 0;
    let mut converged = true;

    for j in 0..gs.num_blocks {
        let mut ids: Vec<usize> = (0..gs.groups.len())
            .filter(|&i| gs.groups[i].block == j && thresholds[i] > 0.0)
            .collect();
        if ids.is_empty() {
            continue;
        }
        ids.sort_by(|&a, &b| {
            gs.groups[b]
                .members
                .len()
                .cmp(&gs.groups[a].members.len())
                .then(a.cmp(&b))
        });
        let a: Vec<f64> = (0..gs.num_effects).map(|k| z.block_norm(k, j)).collect();
        let problem = ScalarProx {
            a,
            groups: ids
                .iter()
                .map(|&i| (thresholds[i], gs.groups[i].members.clone()))
                .collect(),
        };
        let (y, xi, block_passes, ok) = problem.solve();
        passes = passes.max(block_passes);
        converged &= ok;

        let direction = |k: usize| -> Array2<f64> {
            let norm = problem.a[k];
            if norm > 0.0 {
                z.block(k, j).mapv(|v| v / norm)
            } else {
                Array2::zeros(z.block(k, j).dim())
            }
        };
        let touched: Vec<bool> = (0..gs.num_effects)
            .map(|k| ids.iter().any(|&i| gs.groups[i].members.contains(&k)))
            .collect();
        for k in 0..gs.num_effects {
            if touched[k] {
                let y = if y[k] <= ROUNDOFF_SHRINK * problem.a[k] {
                    0.0
                } else {
                    y[k]
                };
                beta.block_mut(k, j).assign(&(direction(k) * y));
            }
        }
        for (&gi, scalars) in ids.iter().zip(&xi) {
            duals[gi] = gs.groups[gi]
                .members
                .iter()
                .zip(scalars)
                .map(|(&m, &s)| direction(m) * s)
                .collect();
        }
    }
    Ok(ProxOutcome {
        beta,
        passes,
        converged,
        duals: Some(duals),
    })
}

/// Largest violation of the prox optimality condition
/// `z - β ∈ ∂(Σ_g t_g ‖β_{M(g)}‖)`.
///
/// Group lasso mode checks every block directly. Overlapping mode needs the
/// dual certificate returned by [`prox_overlap`].
pub fn prox_optimality_residual(
    z: &CoefficientBlocks,
    outcome: &ProxOutcome,
    thresholds: &[f64],
    gs: &GroupStructure,
) -> Result<f64> {
    gs.check(z)?;
    check_thresholds(thresholds, gs)?;
    let beta = &outcome.beta;
    let diff = z.stacked() - beta.stacked();
    let diff = z.with_values(diff)?;
    match gs.mode {
        PenaltyMode::GroupLasso => {
            let mut worst: f64 = 0.0;
            for (g, &t) in gs.groups.iter().zip(thresholds) {
                let norm = beta.block_norm(g.effect, g.block);
                let r = if t == 0.0 {
                    diff.block_norm(g.effect, g.block)
                } else if norm > 0.0 {
                    let expected = &beta.block(g.effect, g.block) * (t / norm);
                    (&diff.block(g.effect, g.block) - &expected)
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt()
                } else {
                    (diff.block_norm(g.effect, g.block) - t).max(0.0)
                };
                worst = worst.max(r);
            }
            Ok(worst)
        }
        PenaltyMode::OverlappingHierarchical => {
            let duals = outcome
                .duals
                .as_ref()
                .ok_or_else(|| Error::Penalty("overlapping prox certificate missing".into()))?;
            let mut sum = Array2::<f64>::zeros(z.stacked().dim());
            let mut sum_blocks = z.with_values(Array2::zeros(z.stacked().dim()))?;
            let mut worst: f64 = 0.0;
            for ((g, xi), &t) in gs.groups.iter().zip(duals).zip(thresholds) {
                let xi_norm = xi.iter().flat_map(|b| b.iter()).map(|v| v * v).sum::<f64>().sqrt();
                let beta_norm = gs.group_norm(g, beta);
                if beta_norm > 0.0 && t > 0.0 {
                    let mut dev = 0.0;
                    for (&m, block) in g.members.iter().zip(xi) {
                        let expected = &beta.block(m, g.block) * (t / beta_norm);
                        dev += (block - &expected).iter().map(|v| v * v).sum::<f64>();
                    }
                    worst = worst.max(dev.sqrt());
                } else {
                    worst = worst.max((xi_norm - t).max(0.0));
                }
                for (&m, block) in g.members.iter().zip(xi) {
                    let mut target = sum_blocks.block_mut(m, g.block);
                    target += block;
                }
            }
            sum.assign(sum_blocks.stacked());
            let mismatch = (&sum - diff.stacked()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            Ok(worst.max(mismatch))
        }
    }
}
