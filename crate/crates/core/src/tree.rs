//! Best-first growth of the three-channel tree, leaf predictions, leaf-to-leaf
//! transition statistics and prediction losses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ActionKind, Actions, AugmentedDataset};
use crate::impurity::{best_split, weighted_normalised, ImpurityTriple, NodeStats, SampleView, SplitCandidate, Theta};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("unsupported tree format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt tree: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Axis-aligned box `lower <= s < upper`; unconstrained sides are infinite.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperrect {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Hyperrect {
    pub fn unbounded(d: usize) -> Self {
        Hyperrect { lower: vec![f64::NEG_INFINITY; d], upper: vec![f64::INFINITY; d] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Membership under the split convention: values equal to a threshold go right.
    pub fn contains(&self, state: &[f64]) -> bool {
        state.iter().zip(self.lower.iter().zip(&self.upper)).all(|(x, (lo, hi))| *lo <= *x && *x < *hi)
    }

    /// Intersection with the closed box of `range`.
    pub fn clipped(&self, range: &[(f64, f64)]) -> Hyperrect {
        let (lower, upper) = self
            .lower
            .iter()
            .zip(&self.upper)
            .zip(range)
            .map(|((lo, hi), (rlo, rhi))| (lo.max(*rlo).min(*rhi), hi.min(*rhi).max(*rlo)))
            .unzip();
        Hyperrect { lower, upper }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    fn split(&self, feature: usize, threshold: f64) -> (Hyperrect, Hyperrect) {
        let mut left = self.clone();
        let mut right = self.clone();
        left.upper[feature] = threshold;
        right.lower[feature] = threshold;
        (left, right)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActionPrediction {
    /// Index into the tree's ordered action labels.
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Destination {
    Leaf(usize),
    /// The episode terminated before another leaf was reached.
    Terminal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub probability: f64,
    pub mean_duration: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Leaf {
    pub id: usize,
    pub bounds: Hyperrect,
    pub members: Vec<usize>,
    pub action: ActionPrediction,
    pub value: f64,
    pub derivative: Vec<f64>,
    /// No member has a successor; `derivative` was borrowed from the nearest
    /// ancestor that has one.
    pub derivative_low_confidence: bool,
    pub impurity: ImpurityTriple,
    pub deriv_count: usize,
    /// Number of observed sequences starting in this leaf whose end was seen.
    pub sequence_starts: usize,
    pub transitions: BTreeMap<Destination, Transition>,
    pub density: f64,
}

impl Leaf {
    pub fn population(&self) -> usize {
        self.members.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeMeta {
    pub feature_names: Vec<String>,
    pub action_kind: ActionKind,
    pub action_labels: Vec<String>,
    pub theta: Theta,
    pub gamma: f64,
    pub sigma: Vec<f64>,
    pub action_sigma: Vec<f64>,
    pub feature_range: Vec<(f64, f64)>,
    pub feature_median: Vec<f64>,
    pub root_impurity: ImpurityTriple,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripleTree {
    pub meta: TreeMeta,
    /// `nodes[0]` is the root.
    pub nodes: Vec<Node>,
    pub leaves: Vec<Leaf>,
}

/// What a leaf predicts for a query state.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<'a> {
    pub leaf: usize,
    pub action: &'a ActionPrediction,
    pub value: f64,
    pub derivative: &'a [f64],
    pub low_confidence: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub action: f64,
    pub value: f64,
    pub derivative: f64,
}

impl Losses {
    pub fn as_array(&self) -> [f64; 3] {
        [self.action, self.value, self.derivative]
    }
}

/// Growth priority: theta-weighted, root-normalised impurity
/// scaled by the population each channel was measured over.
pub fn leaf_priority(stats: &NodeStats, root: &ImpurityTriple, theta: &Theta) -> f64 {
    let i = stats.impurity;
    weighted_normalised(
        [stats.count as f64 * i.action, stats.count as f64 * i.value, stats.deriv_count as f64 * i.derivative],
        root,
        theta,
    )
}

/// Index of the splittable leaf with the highest priority; ties go to the
/// earliest entry. `None` when nothing is splittable.
pub fn select_best_leaf(leaves: &[(NodeStats, bool)], root: &ImpurityTriple, theta: &Theta) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, (stats, splittable)) in leaves.iter().enumerate() {
        if !splittable {
            continue;
        }
        let p = leaf_priority(stats, root, theta);
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((k, p));
        }
    }
    best.map(|(k, _)| k)
}

#[derive(Clone, Debug)]
struct GrowNode {
    bounds: Hyperrect,
    members: Vec<usize>,
    stats: NodeStats,
    split: Option<SplitCandidate>,
    children: Option<(usize, usize)>,
    parent: Option<usize>,
}

/// Incremental best-first growth. Nodes are numbered in creation order.
pub struct Grower<'a> {
    data: &'a AugmentedDataset,
    view: SampleView<'a>,
    theta: Theta,
    min_leaf: usize,
    root: ImpurityTriple,
    nodes: Vec<GrowNode>,
    /// Leaf node indices in creation order.
    leaves: Vec<usize>,
}

impl<'a> Grower<'a> {
    pub fn new(data: &'a AugmentedDataset, theta: Theta, min_leaf: usize) -> Result<Self, TreeError> {
        if data.is_empty() {
            return Err(TreeError::Parameter("cannot grow a tree on an empty dataset".into()));
        }
        let view = SampleView::from_dataset(data);
        let members: Vec<usize> = (0..data.len()).collect();
        let stats = view.node_stats(&members);
        let root = stats.impurity;
        let min_leaf = min_leaf.max(1);
        let split = best_split(&view, &members, &root, &theta, min_leaf);
        let node = GrowNode {
            bounds: Hyperrect::unbounded(data.num_features()),
            members,
            stats,
            split,
            children: None,
            parent: None,
        };
        Ok(Grower { data, view, theta, min_leaf, root, nodes: vec![node], leaves: vec![0] })
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn root_impurity(&self) -> ImpurityTriple {
        self.root
    }

    /// Splits the highest-priority splittable leaf. Returns the split taken,
    /// or `None` once no leaf admits a split of positive quality.
    pub fn step(&mut self) -> Option<(usize, SplitCandidate)> {
        let candidates: Vec<(NodeStats, bool)> =
            self.leaves.iter().map(|&n| (self.nodes[n].stats, self.nodes[n].split.is_some())).collect();
        let pick = select_best_leaf(&candidates, &self.root, &self.theta)?;
        let id = self.leaves[pick];
        let split = self.nodes[id].split.expect("splittable leaf has a split");
        let (left_members, right_members): (Vec<usize>, Vec<usize>) = self.nodes[id]
            .members
            .iter()
            .partition(|&&i| self.data.state(i)[split.feature] < split.threshold);
        let (left_box, right_box) = self.nodes[id].bounds.split(split.feature, split.threshold);
        let left = self.make_node(left_box, left_members, id);
        let right = self.make_node(right_box, right_members, id);
        self.nodes[id].children = Some((left, right));
        self.leaves.remove(pick);
        self.leaves.push(left);
        self.leaves.push(right);
        Some((id, split))
    }

    fn make_node(&mut self, bounds: Hyperrect, members: Vec<usize>, parent: usize) -> usize {
        let stats = self.view.node_stats(&members);
        let split = best_split(&self.view, &members, &self.root, &self.theta, self.min_leaf);
        self.nodes.push(GrowNode { bounds, members, stats, split, children: None, parent: Some(parent) });
        self.nodes.len() - 1
    }

    /// Grows until `max_leaves` leaves exist or nothing more can be split.
    pub fn grow_to(&mut self, max_leaves: usize) -> &mut Self {
        while self.num_leaves() < max_leaves && self.step().is_some() {}
        self
    }

    /// Freezes the current leaves into a tree, with transitions estimated
    /// from the growth dataset.
    pub fn snapshot(&self) -> TripleTree {
        let data = self.data;
        let mut nodes = Vec::new();
        let mut leaves = Vec::new();
        self.emit(0, &mut nodes, &mut leaves);
        let labels = match &data.base.actions {
            Actions::Discrete { labels, .. } => labels.clone(),
            Actions::Continuous { .. } => Vec::new(),
        };
        let meta = TreeMeta {
            feature_names: data.base.feature_names.clone(),
            action_kind: data.base.action_kind(),
            action_labels: labels,
            theta: self.theta,
            gamma: data.gamma,
            sigma: data.sigma.clone(),
            action_sigma: data.action_sigma.clone(),
            feature_range: data.feature_range.clone(),
            feature_median: data.feature_median.clone(),
            root_impurity: self.root,
        };
        let mut tree = TripleTree { meta, nodes, leaves };
        tree.compute_transitions(data);
        tree
    }

    fn emit(&self, id: usize, nodes: &mut Vec<Node>, leaves: &mut Vec<Leaf>) -> usize {
        let slot = nodes.len();
        nodes.push(Node::Leaf(usize::MAX));
        let node = &self.nodes[id];
        match node.children {
            Some((l, r)) => {
                let split = node.split.expect("split node");
                let left = self.emit(l, nodes, leaves);
                let right = self.emit(r, nodes, leaves);
                nodes[slot] = Node::Split { feature: split.feature, threshold: split.threshold, left, right };
            }
            None => {
                let leaf = self.make_leaf(id, leaves.len());
                nodes[slot] = Node::Leaf(leaf.id);
                leaves.push(leaf);
            }
        }
        slot
    }

    fn mean_derivative(&self, members: &[usize]) -> Option<Vec<f64>> {
        let d = self.data.num_features();
        let mut sum = vec![0.0; d];
        let mut n = 0usize;
        for dv in members.iter().filter_map(|&i| self.data.derivs[i].as_ref()) {
            n += 1;
            sum.iter_mut().zip(dv).for_each(|(s, x)| *s += x);
        }
        (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
    }

    fn make_leaf(&self, node_id: usize, leaf_id: usize) -> Leaf {
        let data = self.data;
        let node = &self.nodes[node_id];
        let members = node.members.clone();
        let n = members.len().max(1) as f64;
        let action = match &data.base.actions {
            Actions::Discrete { labels, codes } => {
                let mut counts = vec![0usize; labels.len()];
                members.iter().for_each(|&i| counts[codes[i]] += 1);
                let mut best = 0;
                for (c, &k) in counts.iter().enumerate() {
                    if k > counts[best] {
                        best = c;
                    }
                }
                ActionPrediction::Discrete(best)
            }
            Actions::Continuous { values, .. } => {
                let m = data.base.actions.dim();
                let mut mean = vec![0.0; m];
                for &i in &members {
                    mean.iter_mut().zip(&values[i]).for_each(|(s, x)| *s += x);
                }
                ActionPrediction::Continuous(mean.into_iter().map(|s| s / n).collect())
            }
        };
        let value = members.iter().map(|&i| data.values[i]).sum::<f64>() / n;
        let (derivative, low_confidence) = match self.mean_derivative(&members) {
            Some(d) => (d, false),
            None => {
                let mut up = node.parent;
                let mut found = None;
                while let Some(p) = up {
                    if let Some(d) = self.mean_derivative(&self.nodes[p].members) {
                        found = Some(d);
                        break;
                    }
                    up = self.nodes[p].parent;
                }
                (found.unwrap_or_else(|| vec![0.0; data.num_features()]), true)
            }
        };
        let density = members.len() as f64 / normalised_volume(&node.bounds, &data.feature_range);
        Leaf {
            id: leaf_id,
            bounds: node.bounds.clone(),
            members,
            action,
            value,
            derivative,
            derivative_low_confidence: low_confidence,
            impurity: node.stats.impurity,
            deriv_count: node.stats.deriv_count,
            sequence_starts: 0,
            transitions: BTreeMap::new(),
            density,
        }
    }
}

/// Product of box side lengths, each clipped to the feature range and divided
/// by the range width. Zero-width features contribute a factor of 1.
pub fn normalised_volume(bounds: &Hyperrect, range: &[(f64, f64)]) -> f64 {
    let clipped = bounds.clipped(range);
    clipped
        .lower
        .iter()
        .zip(&clipped.upper)
        .zip(range)
        .map(|((lo, hi), (rlo, rhi))| if rhi > rlo { (hi - lo) / (rhi - rlo) } else { 1.0 })
        .product()
}

/// Grows a tree best-first until `max_leaves` leaves or no positive-quality split remains.
pub fn grow(data: &AugmentedDataset, theta: Theta, max_leaves: usize, min_leaf: usize) -> Result<TripleTree, TreeError> {
    if max_leaves == 0 {
        return Err(TreeError::Parameter("max_leaves must be at least 1".into()));
    }
    let mut grower = Grower::new(data, theta, min_leaf)?;
    grower.grow_to(max_leaves);
    Ok(grower.snapshot())
}

/// Losses on `eval` after every growth step on `train`, from one leaf up to
/// `max_leaves`. Growth is prefix-consistent, so one run serves every budget.
pub fn loss_curve(
    train: &AugmentedDataset,
    eval: &AugmentedDataset,
    theta: Theta,
    max_leaves: usize,
    min_leaf: usize,
) -> Result<Vec<(usize, Losses)>, TreeError> {
    let mut grower = Grower::new(train, theta, min_leaf)?;
    let mut out = vec![(1, grower.snapshot().evaluate_losses(eval))];
    while grower.num_leaves() < max_leaves && grower.step().is_some() {
        out.push((grower.num_leaves(), grower.snapshot().evaluate_losses(eval)));
    }
    Ok(out)
}

impl TripleTree {
    pub fn num_features(&self) -> usize {
        self.meta.feature_names.len()
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_of(&self, state: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Split { feature, threshold, left, right } => {
                    at = if state[feature] < threshold { left } else { right };
                }
                Node::Leaf(id) => return id,
            }
        }
    }

    pub fn predict(&self, state: &[f64]) -> Prediction<'_> {
        let leaf = &self.leaves[self.leaf_of(state)];
        Prediction {
            leaf: leaf.id,
            action: &leaf.action,
            value: leaf.value,
            derivative: &leaf.derivative,
            low_confidence: leaf.derivative_low_confidence,
        }
    }

    /// Human-readable form of an action prediction.
    pub fn action_label(&self, action: &ActionPrediction) -> String {
        match action {
            ActionPrediction::Discrete(c) => self.meta.action_labels[*c].clone(),
            ActionPrediction::Continuous(v) if v.len() == 1 => format_number(v[0]),
            ActionPrediction::Continuous(v) => {
                format!("[{}]", v.iter().map(|x| format_number(*x)).collect::<Vec<_>>().join(", "))
            }
        }
    }

    /// Looks up a discrete action by label, falling back to numeric equality.
    pub fn action_code(&self, label: &str) -> Option<usize> {
        let labels = &self.meta.action_labels;
        labels.iter().position(|l| l == label).or_else(|| {
            let x: f64 = label.trim().parse().ok()?;
            labels.iter().position(|l| l.trim().parse::<f64>().ok() == Some(x))
        })
    }

    /// Range-clipped box of a leaf.
    pub fn clipped_box(&self, leaf: usize) -> Hyperrect {
        self.leaves[leaf].bounds.clipped(&self.meta.feature_range)
    }

    /// Recomputes every leaf's sequence-level transition probabilities and
    /// mean durations from the episodes of `data`. Sequences never cross
    /// episode boundaries; the final sequence of a truncated episode is
    /// dropped because its successor is unknown.
    pub fn compute_transitions(&mut self, data: &AugmentedDataset) {
        let mut tallies: Vec<BTreeMap<Destination, (usize, usize)>> = vec![BTreeMap::new(); self.leaves.len()];
        for ep in &data.base.episodes {
            let seq: Vec<usize> = ep.range().map(|i| self.leaf_of(data.state(i))).collect();
            let mut i = 0;
            while i < seq.len() {
                let here = seq[i];
                let mut j = i;
                while j + 1 < seq.len() && seq[j + 1] == here {
                    j += 1;
                }
                let dest = if j + 1 < seq.len() {
                    Some(Destination::Leaf(seq[j + 1]))
                } else if ep.terminal {
                    Some(Destination::Terminal)
                } else {
                    None
                };
                if let Some(dest) = dest {
                    let e = tallies[here].entry(dest).or_insert((0, 0));
                    e.0 += 1;
                    e.1 += j - i + 1;
                }
                i = j + 1;
            }
        }
        for (leaf, tally) in self.leaves.iter_mut().zip(tallies) {
            let starts: usize = tally.values().map(|(c, _)| c).sum();
            leaf.sequence_starts = starts;
            leaf.transitions = tally
                .into_iter()
                .map(|(dest, (count, total_len))| {
                    let t = Transition {
                        probability: count as f64 / starts as f64,
                        mean_duration: total_len as f64 / count as f64,
                        count,
                    };
                    (dest, t)
                })
                .collect();
        }
    }

    /// Misclassification rate (or RMS error) for actions, RMS error for
    /// values, and the sigma-weighted sum of per-feature RMS derivative errors.
    pub fn evaluate_losses(&self, data: &AugmentedDataset) -> Losses {
        let n = data.len();
        if n == 0 {
            return Losses::default();
        }
        let leaf_ids: Vec<usize> = (0..n).map(|i| self.leaf_of(data.state(i))).collect();

        let action = match (&data.base.actions, self.meta.action_kind) {
            (Actions::Discrete { labels, codes }, ActionKind::Discrete) => {
                let map: Vec<Option<usize>> = labels.iter().map(|l| self.action_code(l)).collect();
                let wrong = (0..n)
                    .filter(|&i| match &self.leaves[leaf_ids[i]].action {
                        ActionPrediction::Discrete(c) => map[codes[i]] != Some(*c),
                        ActionPrediction::Continuous(_) => true,
                    })
                    .count();
                wrong as f64 / n as f64
            }
            (Actions::Continuous { values, vector }, _) => {
                let m = data.base.actions.dim();
                let mut sq = vec![0.0; m];
                for i in 0..n {
                    if let ActionPrediction::Continuous(pred) = &self.leaves[leaf_ids[i]].action {
                        for k in 0..m {
                            sq[k] += (values[i][k] - pred.get(k).copied().unwrap_or(0.0)).powi(2);
                        }
                    }
                }
                let rms: Vec<f64> = sq.iter().map(|s| (s / n as f64).sqrt()).collect();
                if *vector {
                    rms.iter()
                        .zip(&self.meta.action_sigma)
                        .filter(|(_, s)| **s > 0.0)
                        .map(|(r, s)| r / s)
                        .sum()
                } else {
                    rms[0]
                }
            }
            _ => 1.0,
        };

        let value =
            ((0..n).map(|i| (data.values[i] - self.leaves[leaf_ids[i]].value).powi(2)).sum::<f64>() / n as f64).sqrt();

        let d = self.num_features();
        let mut sq = vec![0.0; d];
        let mut nd = 0usize;
        for i in 0..n {
            if let Some(dv) = &data.derivs[i] {
                nd += 1;
                let pred = &self.leaves[leaf_ids[i]].derivative;
                for f in 0..d {
                    sq[f] += (dv[f] - pred[f]).powi(2);
                }
            }
        }
        let derivative = if nd == 0 {
            0.0
        } else {
            sq.iter()
                .zip(&self.meta.sigma)
                .filter(|(_, s)| **s > 0.0)
                .map(|(e, s)| (e / nd as f64).sqrt() / s)
                .sum()
        };
        Losses { action, value, derivative }
    }

    pub fn to_json(&self) -> Result<String, TreeError> {
        Ok(serde_json::to_string(&crate::schema::TreeFile::from_tree(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        let file: crate::schema::TreeFile = serde_json::from_str(text)?;
        file.into_tree()
    }
}

/// Shortest decimal that round-trips, as used in rule text and labels.
pub fn format_number(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else {
        x.to_string()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::{augment, Episode, TraceDataset};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(states: Vec<Vec<f64>>, labels: Vec<&str>, rewards: Vec<f64>, episodes: Vec<Episode>) -> AugmentedDataset {
        let d = states[0].len();
        let data = TraceDataset::new(
            (0..d).map(|f| format!("f{f}")).collect(),
            states,
            Actions::discrete_from_labels(&labels),
            rewards,
            episodes,
        )
        .unwrap();
        augment(data, 0.9).unwrap()
    }

    pub(crate) fn random_dataset(seed: u64, n: usize, d: usize) -> AugmentedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut states = Vec::new();
        let mut labels = Vec::new();
        let mut rewards = Vec::new();
        let mut episodes = Vec::new();
        while states.len() < n {
            let len = rng.gen_range(1..=20).min(n - states.len());
            episodes.push(Episode { start: states.len(), len, terminal: rng.gen_bool(0.5) });
            let mut s: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
            for _ in 0..len {
                labels.push(if s[0] + 0.3 * rng.gen_range(-1.0..1.0) > 0.5 { "b" } else { "a" });
                rewards.push(s[d - 1] + rng.gen_range(-0.1..0.1));
                states.push(s.clone());
                for x in s.iter_mut() {
                    *x = (*x + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
                }
            }
        }
        tiny(states, labels, rewards, episodes)
    }

    #[test]
    fn single_leaf_predicts_global_statistics() {
        let data = tiny(
            vec![vec![0.0], vec![1.0], vec![2.0]],
            vec!["a", "b", "b"],
            vec![0.0, 0.0, 1.0],
            vec![Episode { start: 0, len: 3, terminal: true }],
        );
        let tree = grow(&data, Theta::equal(), 1, 1).unwrap();
        assert_eq!(tree.num_leaves(), 1);
        let leaf = &tree.leaves[0];
        assert_eq!(tree.action_label(&leaf.action), "b");
        assert!((leaf.value - (0.81 + 0.9 + 1.0) / 3.0).abs() < 1e-12);
        assert_eq!(leaf.derivative, vec![1.0]);
        assert!(!leaf.derivative_low_confidence);
    }

    #[test]
    fn empty_dataset_and_zero_budget_rejected() {
        let data = random_dataset(1, 10, 2);
        assert!(matches!(grow(&data, Theta::equal(), 0, 1), Err(TreeError::Parameter(_))));
    }

    #[test]
    fn select_best_leaf_examples() {
        let root = ImpurityTriple { action: 0.5, value: 1.0, derivative: 1.0 };
        let pure = NodeStats { impurity: ImpurityTriple::default(), count: 10, deriv_count: 10 };
        let dirty = NodeStats { impurity: ImpurityTriple { action: 0.3, value: 0.1, derivative: 0.0 }, count: 4, deriv_count: 4 };
        let leaves = [(pure, true), (dirty, true), (pure, true)];
        assert_eq!(select_best_leaf(&leaves, &root, &Theta::equal()), Some(1));
        assert_eq!(select_best_leaf(&[(dirty, true), (dirty, true)], &root, &Theta::equal()), Some(0));
        assert_eq!(select_best_leaf(&[(dirty, false), (dirty, true)], &root, &Theta::equal()), Some(1));
        assert_eq!(select_best_leaf(&[(dirty, false)], &root, &Theta::equal()), None);
    }

    #[test]
    fn select_best_leaf_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let root = ImpurityTriple { action: rng.gen_range(0.1..1.0), value: rng.gen_range(0.1..5.0), derivative: 0.0 };
            let theta = Theta::new([rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.1..1.0)]).unwrap();
            let leaves: Vec<(NodeStats, bool)> = (0..rng.gen_range(1..12))
                .map(|_| {
                    let count = rng.gen_range(1..100);
                    let stats = NodeStats {
                        impurity: ImpurityTriple {
                            action: rng.gen_range(0.0..0.5),
                            value: rng.gen_range(0.0..3.0),
                            derivative: rng.gen_range(0.0..2.0),
                        },
                        count,
                        deriv_count: rng.gen_range(0..=count),
                    };
                    (stats, rng.gen_bool(0.8))
                })
                .collect();
            let w = theta.weights();
            let mut expected = None;
            let mut best = f64::NEG_INFINITY;
            for (k, (s, ok)) in leaves.iter().enumerate() {
                // root derivative impurity is zero, so that channel drops out
                let p = s.count as f64 * (w[0] * s.impurity.action / root.action + w[1] * s.impurity.value / root.value);
                if *ok && p > best {
                    best = p;
                    expected = Some(k);
                }
            }
            assert_eq!(select_best_leaf(&leaves, &root, &theta), expected);
        }
    }

    #[test]
    fn threshold_goes_right() {
        let data = tiny(
            vec![vec![0.0], vec![1.0]],
            vec!["a", "b"],
            vec![0.0, 0.0],
            vec![Episode { start: 0, len: 2, terminal: false }],
        );
        let tree = grow(&data, Theta::action_only(), 2, 1).unwrap();
        let Node::Split { threshold, right, .. } = tree.nodes[0] else { panic!("expected split") };
        assert_eq!(threshold, 0.5);
        let Node::Leaf(right_leaf) = tree.nodes[right] else { panic!() };
        assert_eq!(tree.leaf_of(&[0.5]), right_leaf);
    }

    #[test]
    fn members_and_boxes_tile_the_space() {
        let data = random_dataset(3, 300, 3);
        let tree = grow(&data, Theta::equal(), 30, 1).unwrap();
        let mut seen = vec![false; data.len()];
        for leaf in &tree.leaves {
            for &i in &leaf.members {
                assert!(!seen[i]);
                seen[i] = true;
                assert_eq!(tree.leaf_of(data.state(i)), leaf.id);
            }
        }
        assert!(seen.iter().all(|&s| s));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let s: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..1.5)).collect();
            let containing: Vec<usize> = tree.leaves.iter().filter(|l| l.bounds.contains(&s)).map(|l| l.id).collect();
            assert_eq!(containing, vec![tree.leaf_of(&s)]);
        }
    }

    #[test]
    fn growth_is_prefix_consistent() {
        let data = random_dataset(8, 250, 2);
        let direct = grow(&data, Theta::equal(), 25, 1).unwrap();
        let mut grower = Grower::new(&data, Theta::equal(), 1).unwrap();
        grower.grow_to(10);
        grower.grow_to(25);
        assert_eq!(grower.snapshot(), direct);
    }

    #[test]
    fn total_weighted_impurity_never_increases() {
        let data = random_dataset(21, 300, 2);
        let theta = Theta::new([0.2, 0.6, 0.2]).unwrap();
        let mut grower = Grower::new(&data, theta, 1).unwrap();
        let root = grower.root_impurity();
        let total = |g: &Grower| -> f64 { g.leaves.iter().map(|&n| leaf_priority(&g.nodes[n].stats, &root, &theta)).sum() };
        let mut last = total(&grower);
        while grower.num_leaves() < 60 && grower.step().is_some() {
            let now = total(&grower);
            assert!(now <= last + 1e-9, "{now} > {last}");
            last = now;
        }
    }

    #[test]
    fn transitions_hand_trace() {
        // leaf sequence [L1, L1, L2] followed by termination
        let data = tiny(
            vec![vec![0.0], vec![0.1], vec![1.0]],
            vec!["a", "a", "b"],
            vec![0.0; 3],
            vec![Episode { start: 0, len: 3, terminal: true }],
        );
        let tree = grow(&data, Theta::action_only(), 2, 1).unwrap();
        let l1 = tree.leaf_of(&[0.0]);
        let l2 = tree.leaf_of(&[1.0]);
        let t1 = &tree.leaves[l1].transitions;
        assert_eq!(t1.len(), 1);
        assert_eq!(t1[&Destination::Leaf(l2)], Transition { probability: 1.0, mean_duration: 2.0, count: 1 });
        let t2 = &tree.leaves[l2].transitions;
        assert_eq!(t2[&Destination::Terminal], Transition { probability: 1.0, mean_duration: 1.0, count: 1 });
    }

    #[test]
    fn truncated_episode_ends_are_censored() {
        let data = tiny(
            vec![vec![0.0], vec![0.1]],
            vec!["a", "a"],
            vec![0.0; 2],
            vec![Episode { start: 0, len: 2, terminal: false }],
        );
        let tree = grow(&data, Theta::equal(), 1, 1).unwrap();
        assert!(tree.leaves[0].transitions.is_empty());
        assert_eq!(tree.leaves[0].sequence_starts, 0);

        let terminal = tiny(
            vec![vec![0.0], vec![0.1]],
            vec!["a", "a"],
            vec![0.0; 2],
            vec![Episode { start: 0, len: 2, terminal: true }],
        );
        let tree = grow(&terminal, Theta::equal(), 1, 1).unwrap();
        assert_eq!(tree.leaves[0].transitions[&Destination::Terminal].probability, 1.0);
    }

    #[test]
    fn transitions_match_brute_force_scanner() {
        let data = random_dataset(17, 400, 2);
        let tree = grow(&data, Theta::equal(), 20, 1).unwrap();
        // independent scanner: walk sample by sample and record run boundaries
        let mut counts: BTreeMap<(usize, Destination), (usize, usize)> = BTreeMap::new();
        for ep in &data.base.episodes {
            let mut run_start = ep.start;
            for i in ep.range() {
                let here = tree.leaf_of(data.state(i));
                let is_last = i + 1 == ep.start + ep.len;
                let next = if is_last { None } else { Some(tree.leaf_of(data.state(i + 1))) };
                if next == Some(here) {
                    continue;
                }
                let dest = match next {
                    Some(l) => Some(Destination::Leaf(l)),
                    None if ep.terminal => Some(Destination::Terminal),
                    None => None,
                };
                if let Some(dest) = dest {
                    let e = counts.entry((here, dest)).or_default();
                    e.0 += 1;
                    e.1 += i + 1 - run_start;
                }
                run_start = i + 1;
            }
        }
        for leaf in &tree.leaves {
            let total: f64 = leaf.transitions.values().map(|t| t.probability).sum();
            if leaf.sequence_starts > 0 {
                assert!((total - 1.0).abs() < 1e-9);
            }
            for (dest, t) in &leaf.transitions {
                let (c, len) = counts[&(leaf.id, *dest)];
                assert_eq!(t.count, c);
                assert!((t.mean_duration - len as f64 / c as f64).abs() < 1e-12);
                assert!(t.mean_duration >= 1.0);
            }
        }
        let expected_pairs = counts.len();
        let got_pairs: usize = tree.leaves.iter().map(|l| l.transitions.len()).sum();
        assert_eq!(expected_pairs, got_pairs);
    }

    #[test]
    fn memorising_tree_has_zero_loss() {
        let data = tiny(
            vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
            vec!["a", "b", "a", "b"],
            vec![1.0, -1.0, 2.0, 0.5],
            vec![Episode { start: 0, len: 2, terminal: true }, Episode { start: 2, len: 2, terminal: false }],
        );
        let tree = grow(&data, Theta::equal(), 4, 1).unwrap();
        assert_eq!(tree.num_leaves(), 4);
        assert_eq!(tree.evaluate_losses(&data), Losses { action: 0.0, value: 0.0, derivative: 0.0 });
    }

    #[test]
    fn single_leaf_value_loss() {
        let data = TraceDataset::new(
            vec!["x".into()],
            vec![vec![0.0], vec![1.0]],
            Actions::discrete_from_labels(&["a", "a"]),
            vec![0.0, 2.0],
            vec![Episode { start: 0, len: 1, terminal: true }, Episode { start: 1, len: 1, terminal: true }],
        )
        .unwrap();
        let data = augment(data, 0.5).unwrap();
        let tree = grow(&data, Theta::equal(), 1, 1).unwrap();
        assert!((tree.evaluate_losses(&data).value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_terminal_leaf_borrows_parent_derivative() {
        let data = tiny(
            vec![vec![0.0], vec![0.2], vec![5.0]],
            vec!["a", "a", "b"],
            vec![0.0; 3],
            vec![Episode { start: 0, len: 2, terminal: false }, Episode { start: 2, len: 1, terminal: true }],
        );
        let tree = grow(&data, Theta::action_only(), 2, 1).unwrap();
        let lone = &tree.leaves[tree.leaf_of(&[5.0])];
        assert!(lone.derivative_low_confidence);
        assert!((lone.derivative[0] - 0.2).abs() < 1e-12);
        assert!(!tree.leaves[tree.leaf_of(&[0.0])].derivative_low_confidence);
    }

    #[test]
    fn density_uses_range_normalised_volume() {
        let data = tiny(
            vec![vec![0.0, 0.0], vec![1.0, 2.0], vec![3.0, 4.0], vec![4.0, 4.0]],
            vec!["a", "a", "b", "b"],
            vec![0.0; 4],
            vec![Episode { start: 0, len: 4, terminal: true }],
        );
        let tree = grow(&data, Theta::action_only(), 2, 1).unwrap();
        // split at x = 2: each half covers half the x range and all of y
        for leaf in &tree.leaves {
            assert!((leaf.density - 2.0 / 0.5).abs() < 1e-12);
        }
    }
}
