use std::fmt;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tripletree::{load_trace, ActionHint, TraceDataset, TraceFormat, TripleTree};

use crate::{DataArgs, Format};

/// Bad flag values or combinations; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const OUT_DIR_VAR: &str = "TRIPLETREE_OUT_DIR";

pub fn out_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_VAR) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

/// Writes `text` to the resolved output path and returns that path.
pub fn write_out(path: &Path, text: &str) -> Result<PathBuf> {
    let path = out_path(path);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn trace_format(path: &Path, explicit: Option<Format>) -> TraceFormat {
    match explicit {
        Some(Format::Json) => TraceFormat::Json,
        Some(Format::Csv) => TraceFormat::Csv,
        None if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) => TraceFormat::Json,
        None => TraceFormat::Csv,
    }
}

pub fn read_traces(path: &Path, format: Option<Format>, discrete: bool) -> Result<TraceDataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let hint = if discrete { ActionHint::Discrete } else { ActionHint::Auto };
    load_trace(BufReader::new(file), trace_format(path, format), hint).with_context(|| format!("loading {}", path.display()))
}

pub fn read_data(args: &DataArgs) -> Result<TraceDataset> {
    read_traces(&args.data, args.format, args.discrete_actions)
}

pub fn read_tree(path: &Path) -> Result<TripleTree> {
    TripleTree::from_json(&read_text(path)?).with_context(|| format!("loading tree {}", path.display()))
}

pub fn parse_floats(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| usage(format!("{what}: cannot parse {s:?} as a number"))))
        .collect()
}

pub fn parse_state(tree: &TripleTree, text: &str) -> Result<Vec<f64>> {
    let s = parse_floats(text, "state")?;
    if s.len() != tree.num_features() {
        return Err(usage(format!("state has {} values, tree expects {}", s.len(), tree.num_features())));
    }
    Ok(s)
}

pub fn check_gamma(gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(usage(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    Ok(gamma)
}
