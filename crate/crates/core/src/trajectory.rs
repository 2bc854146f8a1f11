//! Leaf transition graph, most-probable leaf sequences and piecewise-linear
//! paths aligned with the leaves' derivative predictions.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::impurity::reciprocal_or_zero;
use crate::tree::{Destination, Hyperrect, TripleTree};

#[derive(Debug, Error, PartialEq)]
pub enum PathError {
    #[error("empty leaf sequence")]
    Empty,
    #[error("leaf {0} does not exist")]
    UnknownLeaf(usize),
    #[error("endpoint has {found} features, tree expects {expected}")]
    Dimension { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub to: Destination,
    pub probability: f64,
    pub duration: f64,
    /// `-ln(probability)`.
    pub cost: f64,
}

/// Leaves as nodes, observed transitions as edges; termination is a sink
/// with no outgoing edges.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafGraph {
    pub edges: Vec<Vec<Edge>>,
}

impl LeafGraph {
    pub fn build(tree: &TripleTree) -> Self {
        let edges = tree
            .leaves
            .iter()
            .map(|leaf| {
                leaf.transitions
                    .iter()
                    .filter(|(_, t)| t.probability > 0.0)
                    .map(|(to, t)| Edge { to: *to, probability: t.probability, duration: t.mean_duration, cost: -t.probability.ln() })
                    .collect()
            })
            .collect();
        LeafGraph { edges }
    }

    /// Graph from `(from, to, probability, duration)` tuples; `to = None` is the sink.
    pub fn from_edges(num_leaves: usize, list: &[(usize, Option<usize>, f64, f64)]) -> Self {
        let mut edges = vec![Vec::new(); num_leaves];
        for &(from, to, p, t) in list {
            let to = to.map_or(Destination::Terminal, Destination::Leaf);
            edges[from].push(Edge { to, probability: p, duration: t, cost: -p.ln() });
        }
        LeafGraph { edges }
    }

    pub fn num_leaves(&self) -> usize {
        self.edges.len()
    }

    /// Single-source shortest paths under `-ln p` costs; returns distances and
    /// predecessor edges (`(from, edge index)`).
    fn shortest_from(&self, start: usize) -> (Vec<f64>, Vec<Option<(usize, usize)>>) {
        let n = self.num_leaves();
        let mut dist = vec![f64::INFINITY; n];
        let mut pred = vec![None; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[start] = 0.0;
        heap.push(Frontier { cost: 0.0, node: start });
        while let Some(Frontier { cost, node }) = heap.pop() {
            if done[node] {
                continue;
            }
            done[node] = true;
            for (k, e) in self.edges[node].iter().enumerate() {
                let Destination::Leaf(next) = e.to else { continue };
                let c = cost + e.cost;
                if c < dist[next] {
                    dist[next] = c;
                    pred[next] = Some((node, k));
                    heap.push(Frontier { cost: c, node: next });
                }
            }
        }
        (dist, pred)
    }

    fn reconstruct(&self, start: usize, end: usize, pred: &[Option<(usize, usize)>]) -> Option<TrajectoryPath> {
        let mut leaves = vec![end];
        let mut probability = 1.0;
        let mut duration = 0.0;
        let mut at = end;
        while at != start {
            let (from, k) = pred[at]?;
            let e = &self.edges[from][k];
            probability *= e.probability;
            duration += e.duration;
            leaves.push(from);
            at = from;
        }
        leaves.reverse();
        Some(TrajectoryPath { leaves, probability, expected_duration: duration, ..TrajectoryPath::default() })
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier {
    cost: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on cost, then node id
        other.cost.total_cmp(&self.cost).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A leaf sequence, optionally with an aligned polyline through it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPath {
    pub leaves: Vec<usize>,
    pub probability: f64,
    pub expected_duration: f64,
    pub nodes: Vec<Vec<f64>>,
    pub objective: f64,
    /// Objective after every accepted alignment step, starting from the initial path.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

pub fn build_leaf_graph(tree: &TripleTree) -> LeafGraph {
    LeafGraph::build(tree)
}

/// Highest-probability leaf sequence from `start` to `end`, or `None` if
/// `end` is unreachable.
pub fn most_probable_path(graph: &LeafGraph, start: usize, end: usize) -> Result<Option<TrajectoryPath>, PathError> {
    for l in [start, end] {
        if l >= graph.num_leaves() {
            return Err(PathError::UnknownLeaf(l));
        }
    }
    let (_, pred) = graph.shortest_from(start);
    Ok(graph.reconstruct(start, end, &pred))
}

fn touches(leaf: &Hyperrect, zone: &Hyperrect) -> bool {
    (0..leaf.dim()).all(|f| zone.lower[f] < leaf.upper[f] && zone.upper[f] >= leaf.lower[f])
}

/// Most probable paths between every leaf touching `start_zone` and every
/// leaf touching `end_zone`, keeping those with probability at least
/// `min_probability`.
pub fn zone_paths(
    tree: &TripleTree,
    graph: &LeafGraph,
    start_zone: &Hyperrect,
    end_zone: &Hyperrect,
    min_probability: f64,
) -> Vec<TrajectoryPath> {
    let starts: Vec<usize> = tree.leaves.iter().filter(|l| touches(&l.bounds, start_zone)).map(|l| l.id).collect();
    let ends: Vec<usize> = tree.leaves.iter().filter(|l| touches(&l.bounds, end_zone)).map(|l| l.id).collect();
    let mut out = Vec::new();
    for &s in &starts {
        let (_, pred) = graph.shortest_from(s);
        for &e in &ends {
            if let Some(p) = graph.reconstruct(s, e, &pred) {
                if p.probability >= min_probability {
                    out.push(p);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignOptions {
    pub max_iters: usize,
    /// Largest node displacement per step, in sigma-normalised units.
    pub step_size: f64,
    pub tol: f64,
    /// Overrides for the first and last node (default: clipped box centres).
    pub start: Option<Vec<f64>>,
    pub end: Option<Vec<f64>>,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions { max_iters: 1000, step_size: 0.05, tol: 1e-8, start: None, end: None }
    }
}

/// Where an interior node may live: a (possibly degenerate) box, plus the
/// collapsed dimensions and the direction of travel through each.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeConstraint {
    pub region: Hyperrect,
    pub normals: Vec<(usize, f64)>,
}

impl NodeConstraint {
    pub fn project(&self, p: &mut [f64]) {
        for (f, x) in p.iter_mut().enumerate() {
            *x = x.max(self.region.lower[f]).min(self.region.upper[f]);
        }
    }

    pub fn violation(&self, p: &[f64]) -> f64 {
        p.iter()
            .enumerate()
            .map(|(f, &x)| (self.region.lower[f] - x).max(x - self.region.upper[f]).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Constraint for the node joining consecutive boxes `a` then `b`, and its
/// initial position.
pub fn node_constraint(a: &Hyperrect, b: &Hyperrect) -> (NodeConstraint, Vec<f64>) {
    let d = a.dim();
    let lower: Vec<f64> = (0..d).map(|f| a.lower[f].max(b.lower[f])).collect();
    let upper: Vec<f64> = (0..d).map(|f| a.upper[f].min(b.upper[f])).collect();
    if (0..d).all(|f| lower[f] <= upper[f]) {
        let normals = (0..d)
            .filter(|&f| lower[f] == upper[f])
            .map(|f| (f, if b.lower[f] >= a.upper[f] { 1.0 } else { -1.0 }))
            .collect();
        let region = Hyperrect { lower, upper };
        let init = region.center();
        return (NodeConstraint { region, normals }, init);
    }
    // Not touching: leave `a` through the face crossed by the segment
    // joining the two centres.
    let (ca, cb) = (a.center(), b.center());
    let mut exit = (f64::INFINITY, 0usize, 1.0);
    for f in 0..d {
        let v = cb[f] - ca[f];
        let t = if v > 0.0 {
            (a.upper[f] - ca[f]) / v
        } else if v < 0.0 {
            (a.lower[f] - ca[f]) / v
        } else {
            f64::INFINITY
        };
        if t < exit.0 {
            exit = (t, f, v.signum());
        }
    }
    let (t, f_exit, dir) = exit;
    let t = if t.is_finite() { t } else { 0.0 };
    let mut region = a.clone();
    let face = if dir > 0.0 { a.upper[f_exit] } else { a.lower[f_exit] };
    region.lower[f_exit] = face;
    region.upper[f_exit] = face;
    let constraint = NodeConstraint { region, normals: vec![(f_exit, dir)] };
    let mut init: Vec<f64> = (0..d).map(|f| ca[f] + t * (cb[f] - ca[f])).collect();
    constraint.project(&mut init);
    (constraint, init)
}

/// Angle between two vectors, or `None` if either is zero.
fn angle(x: &[f64], d: &[f64]) -> Option<f64> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nd = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx < 1e-15 || nd < 1e-15 {
        return None;
    }
    let c = (x.iter().zip(d).map(|(a, b)| a * b).sum::<f64>() / (nx * nd)).clamp(-1.0, 1.0);
    Some(c.acos())
}

/// Gradient of `angle(x, d)^2` with respect to `x`.
fn angle_sq_gradient(x: &[f64], d: &[f64]) -> Option<Vec<f64>> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nd = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx < 1e-15 || nd < 1e-15 {
        return None;
    }
    let xh: Vec<f64> = x.iter().map(|v| v / nx).collect();
    let dh: Vec<f64> = d.iter().map(|v| v / nd).collect();
    let c = xh.iter().zip(&dh).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
    let phi = c.acos();
    // direction in which x rotates towards d
    let perp: Vec<f64> = dh.iter().zip(&xh).map(|(a, b)| a - c * b).collect();
    let np = perp.iter().map(|v| v * v).sum::<f64>().sqrt();
    if phi < 1e-12 || np < 1e-15 {
        return Some(vec![0.0; x.len()]);
    }
    Some(perp.iter().map(|p| -2.0 * phi * p / (np * nx)).collect())
}

/// Alignment problem for one leaf sequence, in sigma-normalised coordinates.
struct Problem {
    scale: Vec<f64>,
    derivs: Vec<Vec<f64>>,
    constraints: Vec<NodeConstraint>,
}

impl Problem {
    fn segment(&self, nodes: &[Vec<f64>], k: usize) -> Vec<f64> {
        (0..self.scale.len()).map(|f| (nodes[k][f] - nodes[k - 1][f]) * self.scale[f]).collect()
    }

    fn objective(&self, nodes: &[Vec<f64>]) -> f64 {
        (1..nodes.len()).filter_map(|k| angle(&self.segment(nodes, k), &self.derivs[k - 1])).map(|a| a * a).sum()
    }

    /// Gradient with respect to each interior node's normalised position.
    fn gradient(&self, nodes: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = self.scale.len();
        let mut grad = vec![vec![0.0; d]; nodes.len()];
        for k in 1..nodes.len() {
            if let Some(g) = angle_sq_gradient(&self.segment(nodes, k), &self.derivs[k - 1]) {
                for f in 0..d {
                    grad[k][f] += g[f];
                    grad[k - 1][f] -= g[f];
                }
            }
        }
        grad
    }

    fn visible(&self, nodes: &[Vec<f64>], enforced: &[Vec<bool>]) -> bool {
        self.constraints.iter().enumerate().all(|(j, c)| {
            let k = j + 1;
            c.normals
                .iter()
                .zip(&enforced[j])
                .all(|(&(f, dir), &on)| !on || (nodes[k][f] - nodes[k - 1][f]) * dir >= 0.0)
        })
    }
}

/// Fits a polyline through `leaves`: fixed endpoints at the first and last
/// clipped box centres (unless overridden), one node on each boundary
/// between consecutive leaves, moved by projected gradient descent to
/// minimise the summed squared angles between segments and leaf derivatives.
pub fn align_path(tree: &TripleTree, leaves: &[usize], options: &AlignOptions) -> Result<TrajectoryPath, PathError> {
    if leaves.is_empty() {
        return Err(PathError::Empty);
    }
    if let Some(&bad) = leaves.iter().find(|&&l| l >= tree.num_leaves()) {
        return Err(PathError::UnknownLeaf(bad));
    }
    let d = tree.num_features();
    for p in [&options.start, &options.end].into_iter().flatten() {
        if p.len() != d {
            return Err(PathError::Dimension { expected: d, found: p.len() });
        }
    }
    let boxes: Vec<Hyperrect> = leaves.iter().map(|&l| tree.clipped_box(l)).collect();
    let mut nodes = vec![options.start.clone().unwrap_or_else(|| boxes[0].center())];
    let mut constraints = Vec::new();
    for w in boxes.windows(2) {
        let (c, init) = node_constraint(&w[0], &w[1]);
        constraints.push(c);
        nodes.push(init);
    }
    nodes.push(options.end.clone().unwrap_or_else(|| boxes[boxes.len() - 1].center()));

    let scale = reciprocal_or_zero(&tree.meta.sigma);
    let derivs = leaves
        .iter()
        .map(|&l| tree.leaves[l].derivative.iter().zip(&scale).map(|(a, s)| a * s).collect())
        .collect();
    let problem = Problem { scale, derivs, constraints };
    let enforced: Vec<Vec<bool>> = problem
        .constraints
        .iter()
        .enumerate()
        .map(|(j, c)| c.normals.iter().map(|&(f, dir)| (nodes[j + 1][f] - nodes[j][f]) * dir >= 0.0).collect())
        .collect();

    let mut objective = problem.objective(&nodes);
    let mut trace = vec![objective];
    let mut step = options.step_size;
    let interior = 1..nodes.len() - 1;
    for _ in 0..options.max_iters {
        if interior.is_empty() || step < 1e-14 {
            break;
        }
        let grad = problem.gradient(&nodes);
        let largest = interior
            .clone()
            .flat_map(|k| grad[k].iter().map(|g| g.abs()))
            .fold(0.0, f64::max);
        if largest == 0.0 {
            break;
        }
        let mut trial = nodes.clone();
        for k in interior.clone() {
            for f in 0..d {
                if problem.scale[f] > 0.0 {
                    // step in normalised space, mapped back to state units
                    trial[k][f] -= step * grad[k][f] / largest / problem.scale[f];
                }
            }
            problem.constraints[k - 1].project(&mut trial[k]);
        }
        let candidate = problem.objective(&trial);
        if candidate <= objective && problem.visible(&trial, &enforced) {
            let gain = objective - candidate;
            nodes = trial;
            objective = candidate;
            trace.push(objective);
            step = (step * 2.0).min(options.step_size);
            if gain < options.tol {
                break;
            }
        } else {
            step *= 0.5;
        }
    }

    Ok(TrajectoryPath {
        leaves: leaves.to_vec(),
        probability: path_probability(tree, leaves),
        expected_duration: path_duration(tree, leaves),
        nodes,
        objective,
        objective_trace: trace,
    })
}

fn path_probability(tree: &TripleTree, leaves: &[usize]) -> f64 {
    leaves
        .windows(2)
        .map(|w| tree.leaves[w[0]].transitions.get(&Destination::Leaf(w[1])).map_or(0.0, |t| t.probability))
        .product()
}

fn path_duration(tree: &TripleTree, leaves: &[usize]) -> f64 {
    leaves
        .windows(2)
        .map(|w| tree.leaves[w[0]].transitions.get(&Destination::Leaf(w[1])).map_or(0.0, |t| t.mean_duration))
        .sum()
}

/// Face constraints of the interior nodes of an aligned path.
pub fn path_constraints(tree: &TripleTree, leaves: &[usize]) -> Vec<NodeConstraint> {
    let boxes: Vec<Hyperrect> = leaves.iter().map(|&l| tree.clipped_box(l)).collect();
    boxes.windows(2).map(|w| node_constraint(&w[0], &w[1]).0).collect()
}

/// Angle of each polyline segment to its leaf's derivative, in
/// sigma-normalised space (`None` for degenerate segments).
pub fn segment_angles(tree: &TripleTree, path: &TrajectoryPath) -> Vec<Option<f64>> {
    let scale = reciprocal_or_zero(&tree.meta.sigma);
    (1..path.nodes.len())
        .map(|k| {
            let x: Vec<f64> = (0..scale.len()).map(|f| (path.nodes[k][f] - path.nodes[k - 1][f]) * scale[f]).collect();
            let leaf = path.leaves[(k - 1).min(path.leaves.len() - 1)];
            let dv: Vec<f64> = tree.leaves[leaf].derivative.iter().zip(&scale).map(|(a, s)| a * s).collect();
            angle(&x, &dv)
        })
        .collect()
}
