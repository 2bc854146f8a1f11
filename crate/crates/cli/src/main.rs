use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Prints a line to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

mod commands;
mod io;

use io::UsageError;

/// Fit, explain and visualise decision trees over agent traces.
///
/// Relative output paths are resolved against `TRIPLETREE_OUT_DIR` when it is set.
#[derive(Parser, Debug)]
#[command(name = "tripletree", version)]
pub struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate road traces from a solved policy.
    GenRoad(GenRoadArgs),
    /// Solve the road environment by value iteration.
    DpSolve(DpSolveArgs),
    /// Grow a tree on a trace file.
    Fit(FitArgs),
    /// Loss table for a fitted tree, or losses after every growth step.
    Eval(EvalArgs),
    /// Leaf predictions for states.
    Predict(PredictArgs),
    /// Explain the prediction for a state.
    Explain(ExplainArgs),
    /// Most probable leaf paths, aligned with the predicted motion.
    Simulate(SimulateArgs),
    /// Export leaf colourings as JSON and SVG.
    Viz(VizArgs),
    /// Sweep impurity weightings on the road environment or a trace file.
    SweepTheta(SweepArgs),
    /// Print a summary of a tree file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RoadArgs {
    /// Named reward variant (oscillate, exit_right, speed_right, slow).
    #[arg(long, conflicts_with = "config", default_value = "oscillate")]
    pub preset: String,
    /// JSON road configuration; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Value iteration stops when no value changes by this much in a sweep.
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Trace file.
    #[arg(long)]
    pub data: PathBuf,
    /// Trace format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Treat numeric action columns as discrete labels.
    #[arg(long)]
    pub discrete_actions: bool,
}

#[derive(Args, Debug)]
pub struct GenRoadArgs {
    #[command(flatten)]
    pub road: RoadArgs,
    /// Policy file from dp-solve; solved on the fly when omitted.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 100)]
    pub episode_len: usize,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[arg(long, default_value = "road.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DpSolveArgs {
    #[command(flatten)]
    pub road: RoadArgs,
    #[arg(long, default_value = "policy.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Discount for value estimates.
    #[arg(long)]
    pub gamma: f64,
    /// Channel weights as action,value,derivative (default: equal thirds).
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub max_leaves: usize,
    #[arg(long, default_value_t = 1)]
    pub min_leaf: usize,
    #[arg(long, default_value = "tree.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Tree to score (single-row output).
    #[arg(long, conflicts_with = "tree_series")]
    pub tree: Option<PathBuf>,
    /// Grow on --data and report losses after every step instead.
    #[arg(long)]
    pub tree_series: bool,
    /// Traces to score the series on (defaults to --data).
    #[arg(long, requires = "tree_series")]
    pub eval_data: Option<PathBuf>,
    /// Discount; defaults to the tree's own for a single tree.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Weightings for the series; repeat for several.
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Vec<String>,
    #[arg(long, default_value_t = 200)]
    pub max_leaves: usize,
    #[arg(long, default_value_t = 1)]
    pub min_leaf: usize,
    #[arg(long, default_value = "losses.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub tree: PathBuf,
    /// Comma-separated state; repeat for several.
    #[arg(long, allow_hyphen_values = true, required = true)]
    pub state: Vec<String>,
    /// Also write the predictions as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub state: String,
    /// Explain why this action was not taken.
    #[arg(long, allow_hyphen_values = true, group = "question")]
    pub foil: Option<String>,
    /// Smallest change bringing the value to at most this.
    #[arg(long, allow_hyphen_values = true, group = "question")]
    pub value_le: Option<f64>,
    /// Smallest change bringing the value to at least this.
    #[arg(long, allow_hyphen_values = true, group = "question")]
    pub value_ge: Option<f64>,
    /// Next state, to explain a change of action between the two.
    #[arg(long, allow_hyphen_values = true, group = "question")]
    pub next: Option<String>,
    /// Write the explanation JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a slice plot with the state and foil point here.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub tree: PathBuf,
    /// Start and end states; their leaves are the path ends.
    #[arg(long, allow_hyphen_values = true, requires = "to")]
    pub from: Option<String>,
    #[arg(long, allow_hyphen_values = true, requires = "from")]
    pub to: Option<String>,
    /// Start zone as lo:hi per feature, comma-separated.
    #[arg(long, allow_hyphen_values = true, requires = "end_zone", conflicts_with = "from")]
    pub start_zone: Option<String>,
    #[arg(long, allow_hyphen_values = true, requires = "start_zone")]
    pub end_zone: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub min_probability: f64,
    /// Recompute transitions from these traces before searching.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Keep leaf sequences only.
    #[arg(long)]
    pub no_align: bool,
    #[arg(long, default_value_t = 1000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0.05)]
    pub step_size: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value = "paths.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VizKind {
    Direct,
    Pdp,
    Ice,
    Quiver,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long, value_enum, default_value = "direct")]
    pub kind: VizKind,
    /// action_pred, value_pred, deriv_pred, action_impurity, value_impurity, deriv_impurity or density.
    #[arg(long, default_value = "action_pred")]
    pub attribute: String,
    /// Plotted feature indices as fx,fy.
    #[arg(long, default_value = "0,1")]
    pub plane: String,
    /// Values for every feature (plotted ones ignored); defaults to medians.
    #[arg(long, allow_hyphen_values = true)]
    pub fixed: Option<String>,
    /// Grid size as NXxNY.
    #[arg(long, default_value = "200x200")]
    pub resolution: String,
    /// Quiver arrows through a slice instead of all leaves.
    #[arg(long)]
    pub slice: bool,
    #[arg(long, default_value = "viz.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub road: RoadArgs,
    /// Sweep on these traces instead of generated road data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub discrete_actions: bool,
    /// Discount for trace files (road data uses the configuration's).
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 100)]
    pub episode_len: usize,
    /// Grid resolution on the weight simplex.
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[arg(long, default_value_t = 200)]
    pub max_leaves: usize,
    #[arg(long, default_value_t = 1)]
    pub min_leaf: usize,
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub tree: PathBuf,
    /// List every leaf.
    #[arg(long)]
    pub leaves: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
