//! Reading independence structure off a fitted support.
//!
//! A response pair is linked when some present effect of order two or more
//! contains both. Responses in different connected components of that graph
//! are jointly independent given `X`; deleting a conditioning set and
//! splitting what remains gives conditional independence statements. All
//! statements are implied by the fitted support, not tested against data.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::blocks::CoefficientBlocks;
use crate::error::{Error, Result};
use crate::layout::{Effect, ResponseLayout};
use crate::likelihood::predict_probs;

/// Largest `q` for which conditioning sets are enumerated.
pub const MAX_ENUMERATED_RESPONSES: usize = 8;

/// Effects with a nonzero coefficient block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportPattern {
    num_responses: usize,
    /// Present effects over all predictor blocks, in layout order.
    effects: Vec<Effect>,
    /// Present effects per predictor block.
    per_block: Vec<Vec<Effect>>,
}

impl SupportPattern {
    /// Blocks with Frobenius norm above `tol` count as present; `tol = 0`
    /// means exact nonzeros.
    pub fn from_blocks(beta: &CoefficientBlocks, tol: f64) -> Self {
        let layout = beta.layout();
        let mut per_block = vec![Vec::new(); beta.num_blocks()];
        let mut effects = Vec::new();
        for (k, effect) in layout.effects().iter().enumerate() {
            let mut any = false;
            for (j, present) in per_block.iter_mut().enumerate() {
                if beta.block_norm(k, j) > tol {
                    present.push(effect.clone());
                    any = true;
                }
            }
            if any {
                effects.push(effect.clone());
            }
        }
        SupportPattern {
            num_responses: layout.num_responses(),
            effects,
            per_block,
        }
    }

    pub fn from_effects(num_responses: usize, effects: &[Effect]) -> Result<Self> {
        if let Some(bad) = effects.iter().find(|e| e.members().iter().any(|&m| m >= num_responses)) {
            return Err(Error::Layout(format!(
                "effect {bad} refers to a response beyond q = {num_responses}"
            )));
        }
        let mut effects = effects.to_vec();
        effects.sort_by(|a, b| a.order().cmp(&b.order()).then_with(|| a.members().cmp(b.members())));
        effects.dedup();
        Ok(SupportPattern {
            num_responses,
            per_block: vec![effects.clone()],
            effects,
        })
    }

    pub fn num_responses(&self) -> usize {
        self.num_responses
    }

    pub fn effects(&self) -> &[Effect] {
        &self.effects
    }

    pub fn per_block(&self) -> &[Vec<Effect>] {
        &self.per_block
    }

    pub fn contains(&self, effect: &Effect) -> bool {
        self.effects.contains(effect)
    }

    /// Highest order among present effects.
    pub fn max_order(&self) -> usize {
        self.effects.iter().map(Effect::order).max().unwrap_or(0)
    }
}

/// A present effect and one of its subsets that is missing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyViolation {
    pub effect: Vec<usize>,
    pub missing: Vec<usize>,
}

/// Checks that every nonempty subset of a present effect is present. The
/// overall effect is always treated as present since the multinomial leaves
/// it unidentified.
pub fn check_hierarchy(support: &SupportPattern) -> (bool, Vec<HierarchyViolation>) {
    let mut violations = Vec::new();
    for effect in &support.effects {
        let members = effect.members();
        let m = members.len();
        // Proper nonempty subsets, by bitmask.
        for mask in 1..(1usize << m).saturating_sub(1) {
            let subset = Effect::new((0..m).filter(|b| mask >> b & 1 == 1).map(|b| members[b]).collect());
            if !support.contains(&subset) {
                violations.push(HierarchyViolation {
                    effect: effect.labels(),
                    missing: subset.labels(),
                });
            }
        }
    }
    violations.sort_by(|a, b| {
        (a.effect.len(), &a.effect, a.missing.len(), &a.missing).cmp(&(
            b.effect.len(),
            &b.effect,
            b.missing.len(),
            &b.missing,
        ))
    });
    (violations.is_empty(), violations)
}

/// Connected components over `vertices` of the interaction graph, each
/// sorted, ordered by smallest member.
fn components(support: &SupportPattern, vertices: &[usize]) -> Vec<Vec<usize>> {
    let q = support.num_responses;
    let mut parent: Vec<usize> = (0..q).collect();
    fn find(parent: &mut [usize], mut a: usize) -> usize {
        while parent[a] != a {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        a
    }
    let keep: Vec<bool> = (0..q).map(|v| vertices.contains(&v)).collect();
    for effect in support.effects.iter().filter(|e| e.order() >= 2) {
        let inside: Vec<usize> = effect.members().iter().copied().filter(|&v| keep[v]).collect();
        for w in inside.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &v in vertices {
        let root = find(&mut parent, v);
        groups.entry(root).or_default().push(v);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.iter_mut().for_each(|c| c.sort_unstable());
    out.sort();
    out
}

/// Finest partition of the responses with every present interaction inside
/// one block (0-based response indices).
pub fn joint_independence_partition(support: &SupportPattern) -> Vec<Vec<usize>> {
    let all: Vec<usize> = (0..support.num_responses).collect();
    components(support, &all)
}

/// Responses split into independent groups given a conditioning set and `X`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionalStatement {
    /// 0-based response indices.
    pub conditioning: Vec<usize>,
    pub components: Vec<Vec<usize>>,
    /// No proper nonempty subset of `conditioning` separates the rest.
    pub minimal: bool,
}

impl ConditionalStatement {
    pub fn render(&self) -> String {
        let mut s = self
            .components
            .iter()
            .map(|c| render_set(c))
            .collect::<Vec<_>>()
            .join(" ⊥ ");
        s.push_str(" | ");
        for &v in &self.conditioning {
            let _ = write!(s, "Z{}, ", v + 1);
        }
        s.push('X');
        s
    }
}

fn render_set(members: &[usize]) -> String {
    if members.len() == 1 {
        format!("Z{}", members[0] + 1)
    } else {
        let inner = members
            .iter()
            .map(|v| format!("Z{}", v + 1))
            .collect::<Vec<_>>()
            .join(",");
        format!("{{{inner}}}")
    }
}

/// Every nonempty conditioning set whose deletion leaves at least two
/// components. Minimal sets come first, then by size, then lexicographically.
pub fn conditional_independence_statements(support: &SupportPattern) -> Result<Vec<ConditionalStatement>> {
    let q = support.num_responses;
    if q > MAX_ENUMERATED_RESPONSES {
        return Err(Error::Config(format!(
            "conditional statements are enumerated for q <= {MAX_ENUMERATED_RESPONSES}, got q = {q}"
        )));
    }
    let mut separating = vec![false; 1 << q];
    let mut found = Vec::new();
    for mask in 1..(1usize << q) {
        let conditioning: Vec<usize> = (0..q).filter(|v| mask >> v & 1 == 1).collect();
        let rest: Vec<usize> = (0..q).filter(|v| mask >> v & 1 == 0).collect();
        if rest.len() < 2 {
            continue;
        }
        let comps = components(support, &rest);
        if comps.len() >= 2 {
            separating[mask] = true;
            found.push((mask, conditioning, comps));
        }
    }
    let mut out: Vec<ConditionalStatement> = found
        .into_iter()
        .map(|(mask, conditioning, components)| {
            // Proper nonempty submasks.
            let mut sub = (mask - 1) & mask;
            let mut minimal = true;
            while sub > 0 {
                if separating[sub] {
                    minimal = false;
                    break;
                }
                sub = (sub - 1) & mask;
            }
            ConditionalStatement {
                conditioning,
                components,
                minimal,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.minimal
            .cmp(&a.minimal)
            .then(a.conditioning.len().cmp(&b.conditioning.len()))
            .then_with(|| a.conditioning.cmp(&b.conditioning))
    });
    Ok(out)
}

/// Structure implied by a fitted support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependenceReport {
    pub num_responses: usize,
    /// Present effects as 1-based labels.
    pub effects: Vec<Vec<usize>>,
    /// Joint-independence blocks, 1-based.
    pub partition: Vec<Vec<usize>>,
    pub conditional: Vec<ReportStatement>,
    pub hierarchy_ok: bool,
    pub violations: Vec<HierarchyViolation>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportStatement {
    /// 1-based labels.
    pub conditioning: Vec<usize>,
    pub components: Vec<Vec<usize>>,
    pub minimal: bool,
    pub text: String,
}

fn one_based(sets: &[Vec<usize>]) -> Vec<Vec<usize>> {
    sets.iter().map(|s| s.iter().map(|v| v + 1).collect()).collect()
}

impl IndependenceReport {
    pub fn from_support(support: &SupportPattern) -> Result<Self> {
        let partition = joint_independence_partition(support);
        let statements = conditional_independence_statements(support)?;
        let (hierarchy_ok, violations) = check_hierarchy(support);

        let mut text = String::from("Independence structure implied by the fitted support\n");
        let effects: Vec<String> = support.effects.iter().map(|e| e.to_string()).collect();
        let _ = writeln!(text, "present effects: {}", effects.join(" "));
        if partition.len() >= 2 {
            let blocks = partition.iter().map(|b| render_set(b)).collect::<Vec<_>>().join(" ⊥ ");
            let mutual = if partition.len() == support.num_responses {
                " (mutual independence)"
            } else {
                ""
            };
            let _ = writeln!(text, "joint: {blocks} | X{mutual}");
        } else if statements.is_empty() {
            let _ = writeln!(text, "no independence implied");
        } else {
            let _ = writeln!(text, "joint: no split of the responses");
        }
        let conditional: Vec<ReportStatement> = statements
            .iter()
            .map(|s| {
                let rendered = s.render();
                let _ = writeln!(
                    text,
                    "conditional: {rendered}{}",
                    if s.minimal { "" } else { " (not minimal)" }
                );
                ReportStatement {
                    conditioning: s.conditioning.iter().map(|v| v + 1).collect(),
                    components: one_based(&s.components),
                    minimal: s.minimal,
                    text: rendered,
                }
            })
            .collect();
        if hierarchy_ok {
            let _ = writeln!(text, "hierarchy: ok");
        } else {
            for v in &violations {
                let _ = writeln!(
                    text,
                    "hierarchy: {} present without {}",
                    Effect::from_labels(&v.effect)?,
                    Effect::from_labels(&v.missing)?
                );
            }
        }
        Ok(IndependenceReport {
            num_responses: support.num_responses,
            effects: support.effects.iter().map(Effect::labels).collect(),
            partition: one_based(&partition),
            conditional,
            hierarchy_ok,
            violations,
            text,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Marginal pmf of `pi` over the responses in `members` (sorted), indexed by
/// those responses' categories with the first varying fastest.
fn marginal(layout: &ResponseLayout, pi: &Array1<f64>, members: &[usize]) -> Array1<f64> {
    let cats = layout.categories();
    let size: usize = members.iter().map(|&m| cats[m]).product();
    let mut out = Array1::zeros(size);
    for (idx, &p) in pi.iter().enumerate() {
        out[sub_index(layout, &layout.cell(idx), members)] += p;
    }
    out
}

fn sub_index(layout: &ResponseLayout, cell: &[usize], members: &[usize]) -> usize {
    let cats = layout.categories();
    let mut idx = 0;
    let mut stride = 1;
    for &m in members {
        idx += cell[m] * stride;
        stride *= cats[m];
    }
    idx
}

fn check_partition(layout: &ResponseLayout, sets: &[&[usize]]) -> Result<()> {
    let q = layout.num_responses();
    let mut seen = vec![false; q];
    for set in sets {
        for &v in set.iter() {
            if v >= q || seen[v] {
                return Err(Error::Layout(format!("response sets {sets:?} do not partition 0..{q}")));
            }
            seen[v] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Layout(format!("response sets {sets:?} do not cover 0..{q}")));
    }
    Ok(())
}

/// `max_j |π_j(x) - Π_l π_{j_{I_l},+}(x)|` for a partition of the responses
/// (0-based blocks). Zero up to rounding when the support factorizes.
pub fn verify_factorization(
    beta: &CoefficientBlocks,
    basis: &BasisSet,
    x: ArrayView1<f64>,
    partition: &[Vec<usize>],
) -> Result<f64> {
    let layout = basis.layout();
    let sets: Vec<&[usize]> = partition.iter().map(Vec::as_slice).collect();
    check_partition(layout, &sets)?;
    let pi = predict_probs(beta, basis, x)?.into_inner();
    if partition.len() == 1 {
        return Ok(0.0);
    }
    let sorted: Vec<Vec<usize>> = partition
        .iter()
        .map(|b| {
            let mut b = b.clone();
            b.sort_unstable();
            b
        })
        .collect();
    let margins: Vec<Array1<f64>> = sorted.iter().map(|b| marginal(layout, &pi, b)).collect();
    let mut worst: f64 = 0.0;
    for (idx, &p) in pi.iter().enumerate() {
        let cell = layout.cell(idx);
        let product: f64 = sorted
            .iter()
            .zip(&margins)
            .map(|(b, m)| m[sub_index(layout, &cell, b)])
            .product();
        worst = worst.max((p - product).abs());
    }
    Ok(worst)
}

/// Conditional version: with `components` and `conditioning` partitioning
/// the responses, the deviation of
/// `π(z) · π(z_C)^{r-1} = Π_i π(z_{A_i}, z_C)` over all cells, written as
/// `|π(z) - Π_i π(z_{A_i}, z_C) / π(z_C)^{r-1}|` where `π(z_C) > 0`.
pub fn verify_conditional_factorization(
    beta: &CoefficientBlocks,
    basis: &BasisSet,
    x: ArrayView1<f64>,
    components: &[Vec<usize>],
    conditioning: &[usize],
) -> Result<f64> {
    let layout = basis.layout();
    let mut sets: Vec<&[usize]> = components.iter().map(Vec::as_slice).collect();
    sets.push(conditioning);
    check_partition(layout, &sets)?;
    let pi = predict_probs(beta, basis, x)?.into_inner();
    let mut cond = conditioning.to_vec();
    cond.sort_unstable();
    let joined: Vec<Vec<usize>> = components
        .iter()
        .map(|c| {
            let mut s: Vec<usize> = c.iter().chain(&cond).copied().collect();
            s.sort_unstable();
            s
        })
        .collect();
    let cond_margin = marginal(layout, &pi, &cond);
    let margins: Vec<Array1<f64>> = joined.iter().map(|s| marginal(layout, &pi, s)).collect();
    let r = components.len() as i32;
    let mut worst: f64 = 0.0;
    for (idx, &p) in pi.iter().enumerate() {
        let cell = layout.cell(idx);
        let base = cond_margin[sub_index(layout, &cell, &cond)];
        let product: f64 = joined
            .iter()
            .zip(&margins)
            .map(|(s, m)| m[sub_index(layout, &cell, s)])
            .product();
        let expected = if base > 0.0 { product / base.powi(r - 1) } else { 0.0 };
        worst = worst.max((p - expected).abs());
    }
    Ok(worst)
}
