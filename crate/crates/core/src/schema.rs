//! On-disk JSON representation of a fitted tree.
//!
//! Infinite box sides are written as `null`. Discrete action predictions are
//! written as their label, continuous ones as arrays.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::ActionKind;
use crate::impurity::{ImpurityTriple, Theta};
use crate::tree::{ActionPrediction, Destination, Hyperrect, Leaf, Node, Transition, TreeError, TreeMeta, TripleTree};

pub const TREE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct TreeFile {
    pub version: u32,
    pub meta: MetaFile,
    pub nodes: Vec<NodeFile>,
}

#[derive(Serialize, Deserialize)]
pub struct MetaFile {
    pub d: usize,
    pub feature_names: Vec<String>,
    pub action_kind: ActionKind,
    pub action_labels: Vec<String>,
    pub theta: Theta,
    pub gamma: f64,
    pub sigma: Vec<f64>,
    pub action_sigma: Vec<f64>,
    pub ranges: Vec<(f64, f64)>,
    pub medians: Vec<f64>,
    pub root_impurity: ImpurityTriple,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeFile {
    Split { f: usize, tau: f64, left: usize, right: usize },
    Leaf { leaf: LeafFile },
}

#[derive(Serialize, Deserialize)]
pub struct BoxFile {
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActionFile {
    Label(String),
    Vector(Vec<f64>),
}

#[derive(Serialize, Deserialize)]
pub struct PredsFile {
    pub action: ActionFile,
    pub value: f64,
    pub derivative: Vec<f64>,
    pub derivative_low_confidence: bool,
}

#[derive(Serialize, Deserialize)]
pub struct TransitionFile {
    /// Destination leaf, or `null` for episode termination.
    pub to: Option<usize>,
    pub probability: f64,
    pub mean_duration: f64,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
pub struct LeafFile {
    pub id: usize,
    #[serde(rename = "box")]
    pub bounds: BoxFile,
    pub preds: PredsFile,
    pub impurity: ImpurityTriple,
    pub population: usize,
    pub deriv_count: usize,
    pub members: Vec<usize>,
    pub sequence_starts: usize,
    pub transitions: Vec<TransitionFile>,
    pub density: f64,
}

fn finite_or_none(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl TreeFile {
    pub fn from_tree(tree: &TripleTree) -> Self {
        let m = &tree.meta;
        let meta = MetaFile {
            d: m.feature_names.len(),
            feature_names: m.feature_names.clone(),
            action_kind: m.action_kind,
            action_labels: m.action_labels.clone(),
            theta: m.theta,
            gamma: m.gamma,
            sigma: m.sigma.clone(),
            action_sigma: m.action_sigma.clone(),
            ranges: m.feature_range.clone(),
            medians: m.feature_median.clone(),
            root_impurity: m.root_impurity,
        };
        let nodes = tree
            .nodes
            .iter()
            .map(|node| match *node {
                Node::Split { feature, threshold, left, right } => NodeFile::Split { f: feature, tau: threshold, left, right },
                Node::Leaf(id) => NodeFile::Leaf { leaf: leaf_file(tree, &tree.leaves[id]) },
            })
            .collect();
        TreeFile { version: TREE_FORMAT_VERSION, meta, nodes }
    }

    pub fn into_tree(self) -> Result<TripleTree, TreeError> {
        if self.version != TREE_FORMAT_VERSION {
            return Err(TreeError::Version { found: self.version, expected: TREE_FORMAT_VERSION });
        }
        let m = self.meta;
        let d = m.d;
        if m.feature_names.len() != d || m.sigma.len() != d || m.ranges.len() != d || m.medians.len() != d {
            return Err(TreeError::Corrupt("metadata lengths disagree with d".into()));
        }
        let corrupt = |msg: String| TreeError::Corrupt(msg);
        let n_nodes = self.nodes.len();
        let n_leaves = self.nodes.iter().filter(|n| matches!(n, NodeFile::Leaf { .. })).count();
        let mut nodes = Vec::with_capacity(n_nodes);
        let mut leaves: Vec<Option<Leaf>> = vec![None; n_leaves];
        let mut referenced = vec![false; n_nodes];
        for (k, node) in self.nodes.into_iter().enumerate() {
            match node {
                NodeFile::Split { f, tau, left, right } => {
                    if f >= d || left >= n_nodes || right >= n_nodes || left <= k || right <= k || !tau.is_finite() {
                        return Err(corrupt(format!("node {k} has an invalid split")));
                    }
                    for c in [left, right] {
                        if std::mem::replace(&mut referenced[c], true) {
                            return Err(corrupt(format!("node {c} has two parents")));
                        }
                    }
                    nodes.push(Node::Split { feature: f, threshold: tau, left, right });
                }
                NodeFile::Leaf { leaf } => {
                    let id = leaf.id;
                    if id >= n_leaves || leaves[id].is_some() {
                        return Err(corrupt(format!("leaf id {id} is out of range or repeated")));
                    }
                    leaves[id] = Some(parse_leaf(leaf, d, &m.action_labels, n_leaves)?);
                    nodes.push(Node::Leaf(id));
                }
            }
        }
        if n_nodes == 0 || referenced[0] || referenced[1..].iter().any(|r| !r) {
            return Err(corrupt("nodes do not form a single tree rooted at 0".into()));
        }
        let leaves = leaves.into_iter().map(|l| l.expect("all ids filled")).collect();
        let meta = TreeMeta {
            feature_names: m.feature_names,
            action_kind: m.action_kind,
            action_labels: m.action_labels,
            theta: m.theta,
            gamma: m.gamma,
            sigma: m.sigma,
            action_sigma: m.action_sigma,
            feature_range: m.ranges,
            feature_median: m.medians,
            root_impurity: m.root_impurity,
        };
        Ok(TripleTree { meta, nodes, leaves })
    }
}

fn leaf_file(tree: &TripleTree, leaf: &Leaf) -> LeafFile {
    let action = match &leaf.action {
        ActionPrediction::Discrete(c) => ActionFile::Label(tree.meta.action_labels[*c].clone()),
        ActionPrediction::Continuous(v) => ActionFile::Vector(v.clone()),
    };
    LeafFile {
        id: leaf.id,
        bounds: BoxFile {
            lower: leaf.bounds.lower.iter().copied().map(finite_or_none).collect(),
            upper: leaf.bounds.upper.iter().copied().map(finite_or_none).collect(),
        },
        preds: PredsFile {
            action,
            value: leaf.value,
            derivative: leaf.derivative.clone(),
            derivative_low_confidence: leaf.derivative_low_confidence,
        },
        impurity: leaf.impurity,
        population: leaf.members.len(),
        deriv_count: leaf.deriv_count,
        members: leaf.members.clone(),
        sequence_starts: leaf.sequence_starts,
        transitions: leaf
            .transitions
            .iter()
            .map(|(dest, t)| TransitionFile {
                to: match dest {
                    Destination::Leaf(l) => Some(*l),
                    Destination::Terminal => None,
                },
                probability: t.probability,
                mean_duration: t.mean_duration,
                count: t.count,
            })
            .collect(),
        density: leaf.density,
    }
}

fn parse_leaf(file: LeafFile, d: usize, labels: &[String], n_leaves: usize) -> Result<Leaf, TreeError> {
    let id = file.id;
    let corrupt = |msg: &str| TreeError::Corrupt(format!("leaf {id}: {msg}"));
    if file.bounds.lower.len() != d || file.bounds.upper.len() != d || file.preds.derivative.len() != d {
        return Err(corrupt("dimension mismatch"));
    }
    if file.population != file.members.len() {
        return Err(corrupt("population disagrees with members"));
    }
    let action = match file.preds.action {
        ActionFile::Label(l) => {
            ActionPrediction::Discrete(labels.iter().position(|x| *x == l).ok_or_else(|| corrupt("unknown action label"))?)
        }
        ActionFile::Vector(v) => ActionPrediction::Continuous(v),
    };
    let mut transitions = BTreeMap::new();
    for t in file.transitions {
        let dest = match t.to {
            Some(l) if l < n_leaves => Destination::Leaf(l),
            Some(_) => return Err(corrupt("transition to unknown leaf")),
            None => Destination::Terminal,
        };
        transitions.insert(dest, Transition { probability: t.probability, mean_duration: t.mean_duration, count: t.count });
    }
    Ok(Leaf {
        id,
        bounds: Hyperrect {
            lower: file.bounds.lower.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect(),
            upper: file.bounds.upper.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect(),
        },
        members: file.members,
        action,
        value: file.preds.value,
        derivative: file.preds.derivative,
        derivative_low_confidence: file.preds.derivative_low_confidence,
        impurity: file.impurity,
        deriv_count: file.deriv_count,
        sequence_starts: file.sequence_starts,
        transitions,
        density: file.density,
    })
}
