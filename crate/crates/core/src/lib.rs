//! Decision trees over agent traces that jointly fit actions, discounted
//! returns and state changes, plus explanation, path simulation,
//! visualisation and a small road environment for experiments.

pub mod dataset;
pub mod explain;
pub mod impurity;
pub mod road;
pub mod schema;
pub mod trajectory;
pub mod tree;
pub mod viz;

pub use dataset::{
    augment, load_trace, ActionHint, ActionKind, Actions, AugmentedDataset, DataError, Episode, TraceDataset, TraceFormat,
};
pub use explain::{Explanation, ExplainError, Foil, ValueCondition};
pub use impurity::{ImpurityTriple, QualityTriple, SplitCandidate, Theta, ThetaError};
pub use road::{GridPolicy, RoadConfig, RoadError};
pub use trajectory::{AlignOptions, LeafGraph, PathError, TrajectoryPath};
pub use tree::{grow, loss_curve, Destination, Hyperrect, Leaf, Losses, Prediction, Transition, TreeError, TripleTree};
pub use viz::{ColourAttribute, PlaneSpec, VizError};
