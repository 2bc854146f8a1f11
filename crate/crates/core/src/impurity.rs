//! Action, value and derivative impurities, partition qualities and the
//! axis-aligned split search.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Actions, AugmentedDataset};

/// Hybrid qualities closer than this are treated as equal, and a split must
/// beat zero by more than this to be taken.
pub const GAIN_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ThetaError {
    #[error("theta needs three components, got {0}")]
    Arity(usize),
    #[error("theta component {0:?} is not a number")]
    Parse(String),
    #[error("theta components must be finite and non-negative: {0:?}")]
    Negative([f64; 3]),
    #[error("theta must have a positive sum: {0:?}")]
    ZeroSum([f64; 3]),
}

/// Channel weights `[action, value, derivative]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Theta([f64; 3]);

impl Theta {
    pub fn new(weights: [f64; 3]) -> Result<Self, ThetaError> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ThetaError::Negative(weights));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(ThetaError::ZeroSum(weights));
        }
        Ok(Theta(weights))
    }

    pub fn action_only() -> Self {
        Theta([1.0, 0.0, 0.0])
    }

    pub fn value_only() -> Self {
        Theta([0.0, 1.0, 0.0])
    }

    pub fn derivative_only() -> Self {
        Theta([0.0, 0.0, 1.0])
    }

    pub fn equal() -> Self {
        Theta([1.0 / 3.0; 3])
    }

    pub fn weights(&self) -> [f64; 3] {
        self.0
    }
}

impl TryFrom<[f64; 3]> for Theta {
    type Error = ThetaError;
    fn try_from(w: [f64; 3]) -> Result<Self, ThetaError> {
        Theta::new(w)
    }
}

impl From<Theta> for [f64; 3] {
    fn from(t: Theta) -> Self {
        t.0
    }
}

impl FromStr for Theta {
    type Err = ThetaError;
    fn from_str(s: &str) -> Result<Self, ThetaError> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(ThetaError::Arity(parts.len()));
        }
        let mut w = [0.0; 3];
        for (slot, p) in w.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| ThetaError::Parse(p.to_string()))?;
        }
        Theta::new(w)
    }
}

impl fmt::Display for Theta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImpurityTriple {
    pub action: f64,
    pub value: f64,
    pub derivative: f64,
}

impl ImpurityTriple {
    pub fn as_array(&self) -> [f64; 3] {
        [self.action, self.value, self.derivative]
    }
}

/// Per-channel partition qualities of one candidate split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityTriple {
    pub action: f64,
    pub value: f64,
    pub derivative: f64,
}

impl QualityTriple {
    pub fn as_array(&self) -> [f64; 3] {
        [self.action, self.value, self.derivative]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub quality: QualityTriple,
    pub hybrid_quality: f64,
}

/// Gini impurity `1 - sum p^2` of a label histogram; 0 for an empty set.
pub fn gini(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let sq: f64 = counts.iter().map(|&c| (c as f64) * (c as f64)).sum();
    (1.0 - sq / (n * n)).max(0.0)
}

/// Population variance, computed from shifted running moments.
pub fn variance(values: &[f64]) -> f64 {
    let mut m = Moments::new(values.first().copied().unwrap_or(0.0));
    for &x in values {
        m.add(x);
    }
    m.variance()
}

/// Sum over features of the per-feature variance divided by `sigma[f]`.
/// Features with zero sigma are skipped.
pub fn derivative_impurity(derivs: &[&[f64]], sigma: &[f64]) -> f64 {
    let Some(first) = derivs.first() else { return 0.0 };
    sigma
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > 0.0)
        .map(|(f, s)| {
            let mut m = Moments::new(first[f]);
            for d in derivs {
                m.add(d[f]);
            }
            m.variance() / s
        })
        .sum()
}

/// Population-weighted impurity reduction `I_N - (I_0 n_0 + I_1 n_1) / n_N`.
pub fn partition_quality(parent_impurity: f64, left: (f64, usize), right: (f64, usize)) -> f64 {
    let n = left.1 + right.1;
    if n == 0 {
        return 0.0;
    }
    parent_impurity - (left.0 * left.1 as f64 + right.0 * right.1 as f64) / n as f64
}

/// Theta-weighted sum of qualities, each normalised by the root impurity of
/// its channel. Channels that are pure at the root contribute nothing.
pub fn hybrid_quality(quality: &QualityTriple, root: &ImpurityTriple, theta: &Theta) -> f64 {
    weighted_normalised(quality.as_array(), root, theta)
}

pub(crate) fn weighted_normalised(channels: [f64; 3], root: &ImpurityTriple, theta: &Theta) -> f64 {
    channels
        .iter()
        .zip(root.as_array())
        .zip(theta.weights())
        .map(|((q, r), w)| if r > 0.0 && w > 0.0 { w * q / r } else { 0.0 })
        .sum()
}

/// Running first and second moments about a fixed shift.
#[derive(Clone, Copy, Debug)]
struct Moments {
    shift: f64,
    n: f64,
    s1: f64,
    s2: f64,
}

impl Moments {
    fn new(shift: f64) -> Self {
        Moments { shift, n: 0.0, s1: 0.0, s2: 0.0 }
    }

    fn add(&mut self, x: f64) {
        let y = x - self.shift;
        self.n += 1.0;
        self.s1 += y;
        self.s2 += y * y;
    }

    fn minus(&self, other: &Moments) -> Moments {
        Moments { shift: self.shift, n: self.n - other.n, s1: self.s1 - other.s1, s2: self.s2 - other.s2 }
    }

    fn variance(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        let mean = self.s1 / self.n;
        (self.s2 / self.n - mean * mean).max(0.0)
    }
}

/// Action labels as seen by the impurity code.
#[derive(Clone, Debug)]
pub enum ActionView<'a> {
    Discrete { codes: &'a [usize], n_labels: usize },
    /// Continuous actions; the impurity is the sum of per-component variances
    /// times `weights[k]` (1 for scalar actions, `1/sigma` for vectors).
    Continuous { values: &'a [Vec<f64>], weights: Vec<f64> },
}

/// Borrowed per-sample labels for all three channels.
#[derive(Clone, Debug)]
pub struct SampleView<'a> {
    pub states: &'a [Vec<f64>],
    pub actions: ActionView<'a>,
    pub values: &'a [f64],
    pub derivs: &'a [Option<Vec<f64>>],
    /// `1/sigma[f]`, or 0 for features dropped because of zero spread.
    pub deriv_weights: Vec<f64>,
}

pub(crate) fn reciprocal_or_zero(sigma: &[f64]) -> Vec<f64> {
    sigma.iter().map(|&s| if s > 0.0 { 1.0 / s } else { 0.0 }).collect()
}

impl<'a> SampleView<'a> {
    pub fn from_dataset(data: &'a AugmentedDataset) -> Self {
        let actions = match &data.base.actions {
            Actions::Discrete { labels, codes } => ActionView::Discrete { codes, n_labels: labels.len() },
            Actions::Continuous { vector: false, values } => ActionView::Continuous { values, weights: vec![1.0] },
            Actions::Continuous { vector: true, values } => {
                ActionView::Continuous { values, weights: reciprocal_or_zero(&data.action_sigma) }
            }
        };
        SampleView {
            states: &data.base.states,
            actions,
            values: &data.values,
            derivs: &data.derivs,
            deriv_weights: reciprocal_or_zero(&data.sigma),
        }
    }

    pub fn num_features(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Impurities and channel populations of a sample set.
    pub fn node_stats(&self, samples: &[usize]) -> NodeStats {
        let acc = Accumulator::over(self, samples);
        acc.stats(self)
    }
}

/// Impurities of a node and the populations they were computed over. The
/// derivative channel only counts samples that have a successor.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NodeStats {
    pub impurity: ImpurityTriple,
    pub count: usize,
    pub deriv_count: usize,
}

/// Additive sufficient statistics of a sample set for all three channels.
#[derive(Clone, Debug)]
struct Accumulator {
    n: usize,
    counts: Vec<f64>,
    action: Vec<Moments>,
    value: Moments,
    n_deriv: usize,
    deriv: Vec<Moments>,
}

impl Accumulator {
    fn empty_like(view: &SampleView, action_shift: &[f64], value_shift: f64, deriv_shift: &[f64]) -> Self {
        let counts = match &view.actions {
            ActionView::Discrete { n_labels, .. } => vec![0.0; *n_labels],
            ActionView::Continuous { .. } => Vec::new(),
        };
        Accumulator {
            n: 0,
            counts,
            action: action_shift.iter().map(|&s| Moments::new(s)).collect(),
            value: Moments::new(value_shift),
            n_deriv: 0,
            deriv: deriv_shift.iter().map(|&s| Moments::new(s)).collect(),
        }
    }

    /// Accumulates `samples`, shifting every channel by its mean for precision.
    fn over(view: &SampleView, samples: &[usize]) -> Self {
        let n = samples.len().max(1) as f64;
        let action_shift: Vec<f64> = match &view.actions {
            ActionView::Discrete { .. } => Vec::new(),
            ActionView::Continuous { values, weights } => (0..weights.len())
                .map(|k| samples.iter().map(|&i| values[i][k]).sum::<f64>() / n)
                .collect(),
        };
        let value_shift = samples.iter().map(|&i| view.values[i]).sum::<f64>() / n;
        let d = view.deriv_weights.len();
        let mut deriv_shift = vec![0.0; d];
        let mut nd = 0usize;
        for &i in samples {
            if let Some(dv) = &view.derivs[i] {
                nd += 1;
                for (s, x) in deriv_shift.iter_mut().zip(dv) {
                    *s += x;
                }
            }
        }
        if nd > 0 {
            deriv_shift.iter_mut().for_each(|s| *s /= nd as f64);
        }
        let mut acc = Accumulator::empty_like(view, &action_shift, value_shift, &deriv_shift);
        for &i in samples {
            acc.add(view, i);
        }
        acc
    }

    fn fresh(&self) -> Self {
        Accumulator {
            n: 0,
            counts: vec![0.0; self.counts.len()],
            action: self.action.iter().map(|m| Moments::new(m.shift)).collect(),
            value: Moments::new(self.value.shift),
            n_deriv: 0,
            deriv: self.deriv.iter().map(|m| Moments::new(m.shift)).collect(),
        }
    }

    fn add(&mut self, view: &SampleView, i: usize) {
        self.n += 1;
        match &view.actions {
            ActionView::Discrete { codes, .. } => self.counts[codes[i]] += 1.0,
            ActionView::Continuous { values, .. } => {
                for (m, &x) in self.action.iter_mut().zip(&values[i]) {
                    m.add(x);
                }
            }
        }
        self.value.add(view.values[i]);
        if let Some(dv) = &view.derivs[i] {
            self.n_deriv += 1;
            for (m, &x) in self.deriv.iter_mut().zip(dv) {
                m.add(x);
            }
        }
    }

    fn minus(&self, other: &Accumulator) -> Accumulator {
        Accumulator {
            n: self.n - other.n,
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a - b).collect(),
            action: self.action.iter().zip(&other.action).map(|(a, b)| a.minus(b)).collect(),
            value: self.value.minus(&other.value),
            n_deriv: self.n_deriv - other.n_deriv,
            deriv: self.deriv.iter().zip(&other.deriv).map(|(a, b)| a.minus(b)).collect(),
        }
    }

    fn stats(&self, view: &SampleView) -> NodeStats {
        let action = match &view.actions {
            ActionView::Discrete { .. } => {
                if self.n == 0 {
                    0.0
                } else {
                    let n = self.n as f64;
                    let sq: f64 = self.counts.iter().map(|c| c * c).sum();
                    (1.0 - sq / (n * n)).max(0.0)
                }
            }
            ActionView::Continuous { weights, .. } => {
                self.action.iter().zip(weights).map(|(m, w)| if *w > 0.0 { m.variance() * w } else { 0.0 }).sum()
            }
        };
        let derivative = self
            .deriv
            .iter()
            .zip(&view.deriv_weights)
            .map(|(m, w)| if *w > 0.0 { m.variance() * w } else { 0.0 })
            .sum();
        NodeStats {
            impurity: ImpurityTriple { action, value: self.value.variance(), derivative },
            count: self.n,
            deriv_count: self.n_deriv,
        }
    }
}

/// Per-channel qualities of splitting `parent` into `left` and `right`.
pub fn split_quality(parent: &NodeStats, left: &NodeStats, right: &NodeStats) -> QualityTriple {
    QualityTriple {
        action: partition_quality(
            parent.impurity.action,
            (left.impurity.action, left.count),
            (right.impurity.action, right.count),
        ),
        value: partition_quality(
            parent.impurity.value,
            (left.impurity.value, left.count),
            (right.impurity.value, right.count),
        ),
        derivative: partition_quality(
            parent.impurity.derivative,
            (left.impurity.derivative, left.deriv_count),
            (right.impurity.derivative, right.deriv_count),
        ),
    }
}

/// Candidate threshold strictly above `lo` and at most `hi`.
pub(crate) fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + 0.5 * (hi - lo);
    if mid > lo && mid <= hi {
        mid
    } else {
        hi
    }
}

/// Finds the axis-aligned split of `samples` with the largest hybrid quality.
///
/// Thresholds sit at midpoints between consecutive distinct feature values.
/// Ties (within [`GAIN_EPS`]) go to the lowest feature, then the lowest
/// threshold. Returns `None` when no split leaves `min_leaf` samples on both
/// sides with a hybrid quality above [`GAIN_EPS`].
pub fn best_split(
    view: &SampleView,
    samples: &[usize],
    root: &ImpurityTriple,
    theta: &Theta,
    min_leaf: usize,
) -> Option<SplitCandidate> {
    let min_leaf = min_leaf.max(1);
    let n = samples.len();
    if n < 2 * min_leaf {
        return None;
    }
    let total = Accumulator::over(view, samples);
    let parent = total.stats(view);
    let mut best: Option<SplitCandidate> = None;
    let mut best_q = GAIN_EPS;
    let mut order = samples.to_vec();

    for f in 0..view.num_features() {
        let x = |i: usize| view.states[i][f];
        order.sort_unstable_by(|&a, &b| x(a).total_cmp(&x(b)).then(a.cmp(&b)));
        let mut left = total.fresh();
        for pos in 0..n - 1 {
            left.add(view, order[pos]);
            let (lo, hi) = (x(order[pos]), x(order[pos + 1]));
            let n_left = pos + 1;
            if lo == hi || n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            let right = total.minus(&left);
            let quality = split_quality(&parent, &left.stats(view), &right.stats(view));
            let q = hybrid_quality(&quality, root, theta);
            if q > best_q {
                best_q = q + GAIN_EPS;
                best = Some(SplitCandidate { feature: f, threshold: midpoint(lo, hi), quality, hybrid_quality: q });
            }
        }
    }
    best
}
