//! Factual, counterfactual and temporal rule explanations read off leaf boxes.
//!
//! Counterfactuals pick, among the leaves that satisfy the foil, the one
//! reachable by changing the fewest features, breaking ties by the
//! range-normalised Euclidean size of the change and then by leaf id.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{ActionPrediction, Hyperrect, Leaf, TripleTree};

#[derive(Debug, Error, PartialEq)]
pub enum ExplainError {
    #[error("state has {found} features, tree expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("action explanations need discrete actions")]
    ContinuousActions,
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("the state already gets action {0:?}")]
    FoilIsCurrent(String),
    #[error("both states get action {0:?}; nothing changed")]
    NoActionChange(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationKind {
    Factual,
    CounterfactualAction,
    CounterfactualValue,
    Temporal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<")]
    Less,
    #[serde(rename = ">=")]
    GreaterEq,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub feature: usize,
    pub relation: Relation,
    pub threshold: f64,
}

impl Bound {
    pub fn holds(&self, state: &[f64]) -> bool {
        match self.relation {
            Relation::Less => state[self.feature] < self.threshold,
            Relation::GreaterEq => state[self.feature] >= self.threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueCondition {
    AtMost(f64),
    AtLeast(f64),
}

impl ValueCondition {
    pub fn holds(&self, v: f64) -> bool {
        match *self {
            ValueCondition::AtMost(t) => v <= t,
            ValueCondition::AtLeast(t) => v >= t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Foil {
    Action(String),
    Value(ValueCondition),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub kind: ExplanationKind,
    pub bounds: Vec<Bound>,
    pub foil: Option<Foil>,
    pub target_leaf: Option<usize>,
    pub foil_point: Option<Vec<f64>>,
    pub changed_features: Vec<usize>,
    /// Leaf, action and value predicted at the query state.
    pub leaf: usize,
    pub action: String,
    pub value: f64,
    /// No leaf satisfies the foil.
    pub unreachable: bool,
    /// Temporal search found no point meeting the bounding-box constraint and
    /// fell back to a plain counterfactual.
    pub non_minimal: bool,
}

/// Clamps `state` into the closed box.
pub fn project_onto_box(state: &[f64], bounds: &Hyperrect) -> Vec<f64> {
    state.iter().zip(bounds.lower.iter().zip(&bounds.upper)).map(|(x, (lo, hi))| x.max(*lo).min(*hi)).collect()
}

/// The cheapest way of moving a state into one particular leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafMove {
    pub leaf: usize,
    /// A point inside the leaf; sides open at the top are approached from
    /// just below the threshold.
    pub point: Vec<f64>,
    pub changed: Vec<usize>,
    pub bounds: Vec<Bound>,
    pub l0: usize,
    /// Squared Euclidean length of the change to the closed box, with each
    /// feature divided by its range width.
    pub l2: f64,
}

impl LeafMove {
    fn key(&self) -> (usize, f64, usize) {
        (self.l0, self.l2, self.leaf)
    }

    fn better_than(&self, other: &LeafMove) -> bool {
        let (a, b) = (self.key(), other.key());
        a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)).is_lt()
    }
}

fn range_width(tree: &TripleTree, f: usize) -> f64 {
    let (lo, hi) = tree.meta.feature_range[f];
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

/// Minimal move of `state` into `leaf`.
pub fn move_into_leaf(tree: &TripleTree, state: &[f64], leaf: &Leaf) -> LeafMove {
    let closest = project_onto_box(state, &leaf.bounds);
    let mut point = state.to_vec();
    let mut changed = Vec::new();
    let mut bounds = Vec::new();
    let mut l2 = 0.0;
    for f in 0..state.len() {
        let (lo, hi) = (leaf.bounds.lower[f], leaf.bounds.upper[f]);
        let width = range_width(tree, f);
        if state[f] < lo {
            point[f] = lo;
            bounds.push(Bound { feature: f, relation: Relation::GreaterEq, threshold: lo });
        } else if state[f] >= hi {
            let inside = hi - 1e-9 * width;
            point[f] = if inside >= lo && inside < hi { inside } else { lo + 0.5 * (hi - lo) };
            bounds.push(Bound { feature: f, relation: Relation::Less, threshold: hi });
        } else {
            continue;
        }
        changed.push(f);
        l2 += ((closest[f] - state[f]) / width).powi(2);
    }
    LeafMove { leaf: leaf.id, point, l0: changed.len(), changed, bounds, l2 }
}

/// Lexicographically minimal (L0, L2, id) move into any leaf accepted by `eligible`.
pub fn minimal_move(tree: &TripleTree, state: &[f64], eligible: impl Fn(&Leaf) -> bool) -> Option<LeafMove> {
    let mut best: Option<LeafMove> = None;
    for leaf in tree.leaves.iter().filter(|l| eligible(l)) {
        let m = move_into_leaf(tree, state, leaf);
        if best.as_ref().is_none_or(|b| m.better_than(b)) {
            best = Some(m);
        }
    }
    best
}

fn check_dim(tree: &TripleTree, state: &[f64]) -> Result<(), ExplainError> {
    if state.len() != tree.num_features() {
        return Err(ExplainError::Dimension { expected: tree.num_features(), found: state.len() });
    }
    Ok(())
}

fn base(tree: &TripleTree, state: &[f64], kind: ExplanationKind) -> Explanation {
    let leaf = &tree.leaves[tree.leaf_of(state)];
    Explanation {
        kind,
        bounds: Vec::new(),
        foil: None,
        target_leaf: None,
        foil_point: None,
        changed_features: Vec::new(),
        leaf: leaf.id,
        action: tree.action_label(&leaf.action),
        value: leaf.value,
        unreachable: false,
        non_minimal: false,
    }
}

fn apply_move(mut e: Explanation, m: Option<LeafMove>) -> Explanation {
    match m {
        Some(m) => {
            e.target_leaf = Some(m.leaf);
            e.foil_point = Some(m.point);
            e.changed_features = m.changed;
            e.bounds = m.bounds;
        }
        None => e.unreachable = true,
    }
    e
}

/// The finite sides of the leaf containing `state`.
pub fn factual(tree: &TripleTree, state: &[f64]) -> Result<Explanation, ExplainError> {
    check_dim(tree, state)?;
    let mut e = base(tree, state, ExplanationKind::Factual);
    let leaf = &tree.leaves[e.leaf];
    for f in 0..state.len() {
        if leaf.bounds.lower[f].is_finite() {
            e.bounds.push(Bound { feature: f, relation: Relation::GreaterEq, threshold: leaf.bounds.lower[f] });
        }
        if leaf.bounds.upper[f].is_finite() {
            e.bounds.push(Bound { feature: f, relation: Relation::Less, threshold: leaf.bounds.upper[f] });
        }
    }
    e.target_leaf = Some(leaf.id);
    Ok(e)
}

fn discrete_action(tree: &TripleTree, state: &[f64]) -> Result<usize, ExplainError> {
    match tree.leaves[tree.leaf_of(state)].action {
        ActionPrediction::Discrete(c) => Ok(c),
        ActionPrediction::Continuous(_) => Err(ExplainError::ContinuousActions),
    }
}

/// Why `state` does not get action `foil`.
pub fn counterfactual_action(tree: &TripleTree, state: &[f64], foil: &str) -> Result<Explanation, ExplainError> {
    check_dim(tree, state)?;
    let current = discrete_action(tree, state)?;
    let code = tree.action_code(foil).ok_or_else(|| ExplainError::UnknownAction(foil.to_string()))?;
    if code == current {
        return Err(ExplainError::FoilIsCurrent(tree.meta.action_labels[code].clone()));
    }
    let mut e = base(tree, state, ExplanationKind::CounterfactualAction);
    e.foil = Some(Foil::Action(tree.meta.action_labels[code].clone()));
    let m = minimal_move(tree, state, |l| l.action == ActionPrediction::Discrete(code));
    Ok(apply_move(e, m))
}

/// What minimal change would make the predicted value satisfy `condition`.
pub fn counterfactual_value(
    tree: &TripleTree,
    state: &[f64],
    condition: ValueCondition,
) -> Result<Explanation, ExplainError> {
    check_dim(tree, state)?;
    let mut e = base(tree, state, ExplanationKind::CounterfactualValue);
    e.foil = Some(Foil::Value(condition));
    let m = minimal_move(tree, state, |l| condition.holds(l.value));
    Ok(apply_move(e, m))
}

/// Whether every leaf touched by the closed bounding box of `a` and `b`
/// predicts `action`.
pub fn bounding_box_is_pure(tree: &TripleTree, a: &[f64], b: &[f64], action: &ActionPrediction) -> bool {
    tree.leaves.iter().all(|leaf| {
        let touches = (0..a.len()).all(|f| {
            let (lo, hi) = (a[f].min(b[f]), a[f].max(b[f]));
            lo < leaf.bounds.upper[f] && hi >= leaf.bounds.lower[f]
        });
        !touches || leaf.action == *action
    })
}

/// Explains the action change between consecutive states `s_t` and `s_next`.
///
/// The foil point is the minimal move of `s_t` into a leaf with the new
/// action such that the box spanned by the foil point and `s_next` only
/// touches leaves with the new action.
pub fn temporal(tree: &TripleTree, s_t: &[f64], s_next: &[f64]) -> Result<Explanation, ExplainError> {
    check_dim(tree, s_t)?;
    check_dim(tree, s_next)?;
    let before = discrete_action(tree, s_t)?;
    let after = discrete_action(tree, s_next)?;
    if before == after {
        return Err(ExplainError::NoActionChange(tree.meta.action_labels[before].clone()));
    }
    let target = ActionPrediction::Discrete(after);
    let mut best: Option<LeafMove> = None;
    for leaf in tree.leaves.iter().filter(|l| l.action == target) {
        let m = move_into_leaf(tree, s_t, leaf);
        if !bounding_box_is_pure(tree, &m.point, s_next, &target) {
            continue;
        }
        if best.as_ref().is_none_or(|b| m.better_than(b)) {
            best = Some(m);
        }
    }
    let mut e = base(tree, s_t, ExplanationKind::Temporal);
    e.foil = Some(Foil::Action(tree.meta.action_labels[after].clone()));
    if best.is_none() {
        e.non_minimal = true;
        best = minimal_move(tree, s_t, |l| l.action == target);
    }
    Ok(apply_move(e, best))
}

/// Compact number formatting for rule text (four significant digits).
pub fn format_threshold(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = (3 - x.abs().log10().floor() as i32).max(0) as usize;
    let s = format!("{x:.digits$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn render_bounds(tree: &TripleTree, bounds: &[Bound], merge: bool) -> String {
    let names = &tree.meta.feature_names;
    let mut parts = Vec::new();
    let mut i = 0;
    while i < bounds.len() {
        let b = bounds[i];
        let name = &names[b.feature];
        let pair = bounds.get(i + 1).filter(|n| {
            merge && n.feature == b.feature && b.relation == Relation::GreaterEq && n.relation == Relation::Less
        });
        if let Some(upper) = pair {
            parts.push(format!(
                "{name} ∈ [{}, {})",
                format_threshold(b.threshold),
                format_threshold(upper.threshold)
            ));
            i += 2;
            continue;
        }
        let op = match b.relation {
            Relation::Less => "<",
            Relation::GreaterEq => "≥",
        };
        parts.push(format!("{name} {op} {}", format_threshold(b.threshold)));
        i += 1;
    }
    parts.join(" and ")
}

impl Explanation {
    /// One-sentence rendering of the explanation.
    pub fn render(&self, tree: &TripleTree) -> String {
        let conds = render_bounds(tree, &self.bounds, self.kind == ExplanationKind::Factual);
        match (&self.kind, &self.foil) {
            (ExplanationKind::Factual, _) => {
                if conds.is_empty() {
                    format!("Action = {} always", self.action)
                } else {
                    format!("Action = {} because {conds}", self.action)
                }
            }
            (ExplanationKind::CounterfactualAction, Some(Foil::Action(foil))) => {
                if self.unreachable {
                    format!("Action would never = {foil}: no region predicts it")
                } else {
                    format!("Action would = {foil} if {conds}")
                }
            }
            (ExplanationKind::CounterfactualValue, Some(Foil::Value(cond))) => {
                let cond_text = match cond {
                    ValueCondition::AtMost(t) => format!("≤ {}", format_threshold(*t)),
                    ValueCondition::AtLeast(t) => format!("≥ {}", format_threshold(*t)),
                };
                if self.unreachable {
                    format!("Value would never {cond_text}: no region predicts it")
                } else if conds.is_empty() {
                    format!("Value {cond_text} already")
                } else {
                    format!("Value would {cond_text} if {conds}")
                }
            }
            (ExplanationKind::Temporal, Some(Foil::Action(next))) => {
                let mut s = format!("Action changed {} → {next} because {conds}", self.action);
                if self.non_minimal {
                    s.push_str(" (non-minimal)");
                }
                s
            }
            _ => String::new(),
        }
    }

    /// Factual sentence about the value prediction over the same region.
    pub fn render_value(&self, tree: &TripleTree) -> String {
        let conds = render_bounds(tree, &self.bounds, true);
        let v = format_threshold(self.value);
        if conds.is_empty() {
            format!("Value = {v} always")
        } else {
            format!("Value = {v} because {conds}")
        }
    }
}
