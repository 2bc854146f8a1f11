//! Ordered agent traces and their value / state-derivative augmentation.
//!
//! A trace is a list of episodes of `(state, action, reward)` samples. Samples
//! are stored flat, in temporal order, with [`Episode`] ranges marking the
//! boundaries. [`augment`] attaches the discounted return of every sample and
//! the one-step state change `S[t+1] - S[t]`.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("record {record}: {message}")]
    Format { record: usize, message: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_err(record: usize, message: impl Into<String>) -> DataError {
    DataError::Format { record, message: message.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Discrete,
    ContinuousScalar,
    ContinuousVector,
}

/// How to interpret a single numeric action column.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ActionHint {
    /// Numeric columns are continuous, textual ones discrete.
    #[default]
    Auto,
    Discrete,
    Continuous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    Json,
}

/// Per-sample actions, either as codes into an ordered label set or as real vectors.
#[derive(Clone, Debug, PartialEq)]
pub enum Actions {
    Discrete { labels: Vec<String>, codes: Vec<usize> },
    Continuous { vector: bool, values: Vec<Vec<f64>> },
}

impl Actions {
    pub fn kind(&self) -> ActionKind {
        match self {
            Actions::Discrete { .. } => ActionKind::Discrete,
            Actions::Continuous { vector: false, .. } => ActionKind::ContinuousScalar,
            Actions::Continuous { vector: true, .. } => ActionKind::ContinuousVector,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Actions::Discrete { codes, .. } => codes.len(),
            Actions::Continuous { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width of a continuous action vector (1 for discrete actions).
    pub fn dim(&self) -> usize {
        match self {
            Actions::Discrete { .. } => 1,
            Actions::Continuous { values, .. } => values.first().map_or(1, Vec::len),
        }
    }

    /// Builds a discrete action set from raw labels, ordering labels numerically
    /// when every label parses as a number and lexicographically otherwise.
    pub fn discrete_from_labels<S: AsRef<str>>(raw: &[S]) -> Self {
        let mut labels: Vec<String> = raw.iter().map(|s| s.as_ref().to_string()).collect();
        labels.sort();
        labels.dedup();
        sort_labels(&mut labels);
        let codes = raw
            .iter()
            .map(|s| labels.iter().position(|l| l == s.as_ref()).expect("label present"))
            .collect();
        Actions::Discrete { labels, codes }
    }
}

/// Numeric labels sort by value, anything else lexicographically.
pub fn sort_labels(labels: &mut [String]) {
    let numeric: Option<Vec<f64>> = labels.iter().map(|l| l.trim().parse::<f64>().ok()).collect();
    if numeric.is_some() {
        labels.sort_by(|a, b| {
            let x: f64 = a.trim().parse().unwrap();
            let y: f64 = b.trim().parse().unwrap();
            x.total_cmp(&y).then_with(|| a.cmp(b))
        });
    } else {
        labels.sort();
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub start: usize,
    pub len: usize,
    /// The final sample ended the MDP (as opposed to being cut at a step limit).
    pub terminal: bool,
}

impl Episode {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceDataset {
    pub feature_names: Vec<String>,
    pub states: Vec<Vec<f64>>,
    pub actions: Actions,
    pub rewards: Vec<f64>,
    pub episodes: Vec<Episode>,
}

impl TraceDataset {
    /// Assembles a dataset and checks its structural invariants.
    pub fn new(
        feature_names: Vec<String>,
        states: Vec<Vec<f64>>,
        actions: Actions,
        rewards: Vec<f64>,
        episodes: Vec<Episode>,
    ) -> Result<Self, DataError> {
        let data = TraceDataset { feature_names, states, actions, rewards, episodes };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.states.len();
        let d = self.feature_names.len();
        if d == 0 {
            return Err(DataError::Parameter("dataset has no features".into()));
        }
        if self.actions.len() != n || self.rewards.len() != n {
            return Err(DataError::Parameter(format!(
                "length mismatch: {} states, {} actions, {} rewards",
                n,
                self.actions.len(),
                self.rewards.len()
            )));
        }
        for (i, s) in self.states.iter().enumerate() {
            if s.len() != d {
                return Err(format_err(i, format!("expected {d} features, found {}", s.len())));
            }
            if s.iter().any(|x| !x.is_finite()) {
                return Err(format_err(i, "non-finite state feature"));
            }
            if !self.rewards[i].is_finite() {
                return Err(format_err(i, "non-finite reward"));
            }
        }
        match &self.actions {
            Actions::Discrete { labels, codes } => {
                if let Some(i) = codes.iter().position(|&c| c >= labels.len()) {
                    return Err(format_err(i, "action code outside label set"));
                }
            }
            Actions::Continuous { vector, values } => {
                let m = self.actions.dim();
                if !vector && m != 1 {
                    return Err(DataError::Parameter("scalar actions must have width 1".into()));
                }
                for (i, a) in values.iter().enumerate() {
                    if a.len() != m {
                        return Err(format_err(i, format!("expected {m} action components, found {}", a.len())));
                    }
                    if a.iter().any(|x| !x.is_finite()) {
                        return Err(format_err(i, "non-finite action"));
                    }
                }
            }
        }
        let mut next = 0;
        for (k, ep) in self.episodes.iter().enumerate() {
            if ep.len == 0 {
                return Err(DataError::Parameter(format!("episode {k} is empty")));
            }
            if ep.start != next {
                return Err(DataError::Parameter(format!("episode {k} does not start at sample {next}")));
            }
            next += ep.len;
        }
        if next != n {
            return Err(DataError::Parameter(format!("episodes cover {next} of {n} samples")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn action_kind(&self) -> ActionKind {
        self.actions.kind()
    }

    /// Writes the dataset in the trace CSV format.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = vec!["episode".into(), "t".into(), "terminal".into()];
        header.extend(self.feature_names.iter().cloned());
        match &self.actions {
            Actions::Continuous { vector: true, .. } => {
                header.extend((1..=self.actions.dim()).map(|k| format!("a{k}")))
            }
            _ => header.push("a".into()),
        }
        header.push("r".into());
        w.write_record(&header)?;
        for (e, ep) in self.episodes.iter().enumerate() {
            for (t, i) in ep.range().enumerate() {
                let last = t + 1 == ep.len;
                let mut row = vec![e.to_string(), t.to_string(), u8::from(last && ep.terminal).to_string()];
                row.extend(self.states[i].iter().map(|x| x.to_string()));
                match &self.actions {
                    Actions::Discrete { labels, codes } => row.push(labels[codes[i]].clone()),
                    Actions::Continuous { values, .. } => row.extend(values[i].iter().map(|x| x.to_string())),
                }
                row.push(self.rewards[i].to_string());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the dataset in the trace JSON format.
    pub fn write_json<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let episodes: Vec<JsonEpisode> = self
            .episodes
            .iter()
            .map(|ep| JsonEpisode {
                terminal: ep.terminal,
                steps: ep
                    .range()
                    .map(|i| JsonStep {
                        s: self.states[i].clone(),
                        a: match &self.actions {
                            Actions::Discrete { labels, codes } => JsonAction::Label(labels[codes[i]].clone()),
                            Actions::Continuous { vector: false, values } => JsonAction::Scalar(values[i][0]),
                            Actions::Continuous { vector: true, values } => JsonAction::Vector(values[i].clone()),
                        },
                        r: self.rewards[i],
                    })
                    .collect(),
            })
            .collect();
        let doc = JsonTrace::Named { feature_names: self.feature_names.clone(), episodes };
        serde_json::to_writer(writer, &doc)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum JsonTrace {
    Named { feature_names: Vec<String>, episodes: Vec<JsonEpisode> },
    Bare(Vec<JsonEpisode>),
}

#[derive(Serialize, Deserialize)]
struct JsonEpisode {
    terminal: bool,
    steps: Vec<JsonStep>,
}

#[derive(Serialize, Deserialize)]
struct JsonStep {
    s: Vec<f64>,
    a: JsonAction,
    r: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum JsonAction {
    Scalar(f64),
    Label(String),
    Vector(Vec<f64>),
}

/// One parsed sample before the action column is resolved.
struct RawRow {
    state: Vec<f64>,
    action: RawAction,
    reward: f64,
}

enum RawAction {
    Text(String),
    /// A JSON string: a label even when it reads as a number.
    Label(String),
    Vector(Vec<f64>),
}

/// Reads a trace in either external format.
pub fn load_trace<R: Read>(source: R, format: TraceFormat, hint: ActionHint) -> Result<TraceDataset, DataError> {
    match format {
        TraceFormat::Csv => load_csv(source, hint),
        TraceFormat::Json => load_json(source, hint),
    }
}

fn load_csv<R: Read>(source: R, hint: ActionHint) -> Result<TraceDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.len() < 6 || header[0] != "episode" || header[1] != "t" || header[2] != "terminal" {
        return Err(format_err(0, "header must start with episode,t,terminal"));
    }
    if header.last().map(String::as_str) != Some("r") {
        return Err(format_err(0, "last column must be r"));
    }
    let body = &header[3..header.len() - 1];
    let action_cols = if body.last().map(String::as_str) == Some("a") {
        1
    } else {
        let n = body
            .iter()
            .rev()
            .take_while(|h| h.len() > 1 && h.starts_with('a') && h[1..].chars().all(|c| c.is_ascii_digit()))
            .count();
        if n == 0 {
            return Err(format_err(0, "no action column (a or a1..am) before r"));
        }
        n
    };
    let vector = action_cols > 1 || body.last().map(String::as_str) != Some("a");
    let feature_names: Vec<String> = body[..body.len() - action_cols].to_vec();
    if feature_names.is_empty() {
        return Err(format_err(0, "no feature columns"));
    }
    let d = feature_names.len();

    let mut rows = Vec::new();
    let mut episodes: Vec<Episode> = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    let mut current_id: Option<String> = None;
    let mut last_t: Option<f64> = None;
    let mut pending_terminal = false;

    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format_err(idx, e.to_string()))?;
        if record.len() != header.len() {
            return Err(format_err(idx, format!("expected {} fields, found {}", header.len(), record.len())));
        }
        let id = record[0].to_string();
        let t: f64 = record[1].parse().map_err(|_| format_err(idx, format!("bad t value {:?}", &record[1])))?;
        let terminal = match &record[2] {
            "0" => false,
            "1" => true,
            other => return Err(format_err(idx, format!("terminal must be 0 or 1, found {other:?}"))),
        };
        if current_id.as_deref() != Some(id.as_str()) {
            if !seen_ids.insert(id.clone()) {
                return Err(format_err(idx, format!("episode {id} is not contiguous")));
            }
            if let Some(ep) = episodes.last_mut() {
                ep.terminal = pending_terminal;
            }
            episodes.push(Episode { start: rows.len(), len: 0, terminal: false });
            current_id = Some(id);
            last_t = None;
        } else if pending_terminal {
            return Err(format_err(idx - 1, "terminal flag set before the last row of its episode"));
        }
        if let Some(prev) = last_t {
            if t <= prev {
                return Err(format_err(idx, "rows are not sorted by t within the episode"));
            }
        }
        last_t = Some(t);
        pending_terminal = terminal;

        let state = (3..3 + d)
            .map(|c| parse_finite(&record[c], idx, &header[c]))
            .collect::<Result<Vec<f64>, _>>()?;
        let action = if vector {
            RawAction::Vector(
                (3 + d..3 + d + action_cols)
                    .map(|c| parse_finite(&record[c], idx, &header[c]))
                    .collect::<Result<_, _>>()?,
            )
        } else {
            RawAction::Text(record[3 + d].to_string())
        };
        let reward = parse_finite(&record[header.len() - 1], idx, "r")?;
        rows.push(RawRow { state, action, reward });
        episodes.last_mut().expect("episode opened").len += 1;
    }
    if let Some(ep) = episodes.last_mut() {
        ep.terminal = pending_terminal;
    }
    assemble(feature_names, rows, episodes, hint)
}

fn parse_finite(field: &str, record: usize, column: &str) -> Result<f64, DataError> {
    match field.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(format_err(record, format!("column {column}: expected a finite number, found {field:?}"))),
    }
}

fn load_json<R: Read>(source: R, hint: ActionHint) -> Result<TraceDataset, DataError> {
    let doc: JsonTrace = serde_json::from_reader(source)?;
    let (names, json_episodes) = match doc {
        JsonTrace::Named { feature_names, episodes } => (Some(feature_names), episodes),
        JsonTrace::Bare(episodes) => (None, episodes),
    };
    let mut rows = Vec::new();
    let mut episodes = Vec::new();
    let mut d = None;
    for ep in json_episodes {
        let start = rows.len();
        for step in ep.steps {
            let idx = rows.len();
            let width = *d.get_or_insert(step.s.len());
            if step.s.len() != width {
                return Err(format_err(idx, format!("expected {width} features, found {}", step.s.len())));
            }
            let action = match step.a {
                JsonAction::Scalar(x) => RawAction::Text(x.to_string()),
                JsonAction::Label(s) => RawAction::Label(s),
                JsonAction::Vector(v) => RawAction::Vector(v),
            };
            rows.push(RawRow { state: step.s, action, reward: step.r });
        }
        episodes.push(Episode { start, len: rows.len() - start, terminal: ep.terminal });
    }
    let d = d.unwrap_or(0);
    let feature_names = names.unwrap_or_else(|| (0..d).map(|f| format!("f{f}")).collect());
    if feature_names.len() != d {
        return Err(DataError::Parameter(format!("{} feature names for {d} features", feature_names.len())));
    }
    assemble(feature_names, rows, episodes, hint)
}

fn assemble(
    feature_names: Vec<String>,
    rows: Vec<RawRow>,
    episodes: Vec<Episode>,
    hint: ActionHint,
) -> Result<TraceDataset, DataError> {
    if rows.is_empty() {
        return Err(DataError::Parameter("trace contains no samples".into()));
    }
    let mut states = Vec::with_capacity(rows.len());
    let mut rewards = Vec::with_capacity(rows.len());
    let mut texts = Vec::new();
    let mut vectors = Vec::new();
    let mut labelled = false;
    for (i, row) in rows.into_iter().enumerate() {
        states.push(row.state);
        rewards.push(row.reward);
        match row.action {
            RawAction::Text(s) => texts.push((i, s)),
            RawAction::Label(s) => {
                labelled = true;
                texts.push((i, s))
            }
            RawAction::Vector(v) => vectors.push((i, v)),
        }
    }
    if !texts.is_empty() && !vectors.is_empty() {
        let first = texts[0].0.max(vectors[0].0);
        return Err(format_err(first, "vector actions mixed with scalar actions"));
    }
    let actions = if !vectors.is_empty() {
        if hint == ActionHint::Discrete {
            return Err(DataError::Parameter("vector actions cannot be discrete".into()));
        }
        Actions::Continuous { vector: true, values: vectors.into_iter().map(|(_, v)| v).collect() }
    } else {
        let parsed: Vec<Option<f64>> =
            texts.iter().map(|(_, s)| s.parse::<f64>().ok().filter(|x| x.is_finite())).collect();
        let numeric = parsed.iter().filter(|p| p.is_some()).count();
        let continuous = match hint {
            ActionHint::Discrete => false,
            ActionHint::Continuous => true,
            ActionHint::Auto if labelled => false,
            ActionHint::Auto => {
                if numeric > 0 && numeric < parsed.len() {
                    let first_numeric = parsed[0].is_some();
                    let bad = parsed.iter().position(|p| p.is_some() != first_numeric).unwrap();
                    return Err(format_err(
                        texts[bad].0,
                        format!("action {:?} mixes textual labels with numeric actions", texts[bad].1),
                    ));
                }
                numeric == parsed.len()
            }
        };
        if continuous {
            if let Some(bad) = parsed.iter().position(Option::is_none) {
                return Err(format_err(texts[bad].0, format!("non-numeric action {:?}", texts[bad].1)));
            }
            Actions::Continuous { vector: false, values: parsed.into_iter().map(|x| vec![x.unwrap()]).collect() }
        } else {
            let labels: Vec<&str> = texts.iter().map(|(_, s)| s.as_str()).collect();
            Actions::discrete_from_labels(&labels)
        }
    };
    TraceDataset::new(feature_names, states, actions, rewards, episodes)
}

/// A trace with per-sample value estimates and state derivatives.
#[derive(Clone, Debug)]
pub struct AugmentedDataset {
    pub base: TraceDataset,
    pub gamma: f64,
    pub values: Vec<f64>,
    /// `S[t+1] - S[t]`, absent for the last sample of every episode.
    pub derivs: Vec<Option<Vec<f64>>>,
    /// Population standard deviation of each derivative component.
    pub sigma: Vec<f64>,
    /// Population standard deviation of each continuous action component.
    pub action_sigma: Vec<f64>,
    pub feature_range: Vec<(f64, f64)>,
    pub feature_median: Vec<f64>,
}

impl AugmentedDataset {
    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.base.num_features()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.base.states[i]
    }

    /// Features whose derivative has zero spread; these are dropped from every
    /// sigma-normalised quantity.
    pub fn zero_sigma_features(&self) -> Vec<usize> {
        self.sigma.iter().enumerate().filter(|(_, s)| **s == 0.0).map(|(f, _)| f).collect()
    }
}

/// Computes discounted returns, one-step derivatives and normalisation statistics.
pub fn augment(data: TraceDataset, gamma: f64) -> Result<AugmentedDataset, DataError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(DataError::Parameter(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    data.validate()?;
    let n = data.len();
    let d = data.num_features();

    let mut values = vec![0.0; n];
    let mut derivs = vec![None; n];
    for ep in &data.episodes {
        let mut acc = 0.0;
        for i in ep.range().rev() {
            acc = data.rewards[i] + gamma * acc;
            values[i] = acc;
        }
        for i in ep.start..ep.start + ep.len - 1 {
            let delta = data.states[i + 1].iter().zip(&data.states[i]).map(|(b, a)| b - a).collect();
            derivs[i] = Some(delta);
        }
    }

    let sigma = population_std(derivs.iter().flatten().map(Vec::as_slice), d);
    let action_sigma = match &data.actions {
        Actions::Discrete { .. } => Vec::new(),
        Actions::Continuous { values, .. } => population_std(values.iter().map(Vec::as_slice), data.actions.dim()),
    };

    let mut feature_range = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
    for s in &data.states {
        for (r, &x) in feature_range.iter_mut().zip(s) {
            r.0 = r.0.min(x);
            r.1 = r.1.max(x);
        }
    }
    let feature_median = (0..d)
        .map(|f| {
            let mut col: Vec<f64> = data.states.iter().map(|s| s[f]).collect();
            col.sort_by(f64::total_cmp);
            let m = col.len();
            if m % 2 == 1 {
                col[m / 2]
            } else {
                0.5 * (col[m / 2 - 1] + col[m / 2])
            }
        })
        .collect();

    Ok(AugmentedDataset { base: data, gamma, values, derivs, sigma, action_sigma, feature_range, feature_median })
}

fn population_std<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Vec<f64> {
    let rows: Vec<&[f64]> = rows.collect();
    if rows.is_empty() {
        return vec![0.0; width];
    }
    let n = rows.len() as f64;
    (0..width)
        .map(|f| {
            let mean = rows.iter().map(|r| r[f]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[f] - mean).powi(2)).sum::<f64>() / n;
            var.sqrt()
        })
        .collect()
}
