use std::fmt::Write as _;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use tripletree::explain::{self, ExplanationKind};
use tripletree::road::{self, GridPolicy, RoadConfig};
use tripletree::trajectory::{self, AlignOptions, LeafGraph, TrajectoryPath};
use tripletree::tree::{format_number, ActionPrediction, Node};
use tripletree::viz::{self, Marker, Overlay, PlaneSpec, QuiverMode, Scene, Style};
use tripletree::{augment, grow, loss_curve, ColourAttribute, Hyperrect, Theta, ValueCondition};

use crate::io::{check_gamma, parse_floats, parse_state, read_data, read_text, read_traces, read_tree, usage, write_out};
use crate::*;

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenRoad(a) => gen_road(a, cli.seed),
        Command::DpSolve(a) => dp_solve(a),
        Command::Fit(a) => fit(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Explain(a) => explain(a),
        Command::Simulate(a) => simulate(a),
        Command::Viz(a) => viz_cmd(a),
        Command::SweepTheta(a) => sweep(a, cli.seed),
        Command::Inspect(a) => inspect(a),
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

fn parse_theta(text: &str) -> Result<Theta> {
    text.parse::<Theta>().map_err(|e| usage(format!("--theta {text}: {e}")))
}

fn road_config(args: &RoadArgs) -> Result<RoadConfig> {
    let config = match &args.config {
        Some(path) => serde_json::from_str(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))?,
        None => RoadConfig::preset(&args.preset).map_err(|e| usage(e.to_string()))?,
    };
    config.validate()?;
    Ok(config)
}

fn gen_road(args: &GenRoadArgs, seed: u64) -> Result<()> {
    let policy: GridPolicy = match &args.policy {
        Some(path) => serde_json::from_str(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))?,
        None => road::dp_solve(&road_config(&args.road)?, args.road.tolerance)?,
    };
    let data = road::generate_dataset(&policy, args.samples, args.episode_len, seed)?;
    let mut bytes = Vec::new();
    match args.format {
        Format::Csv => data.write_csv(&mut bytes)?,
        Format::Json => data.write_json(&mut bytes)?,
    }
    let path = write_out(&args.out, std::str::from_utf8(&bytes)?)?;
    say!("wrote {} samples in {} episodes to {}", data.len(), data.episodes.len(), path.display());
    if args.format == Format::Csv {
        say!("actions are numeric labels; fit with --discrete-actions to keep them discrete");
    }
    Ok(())
}

fn dp_solve(args: &DpSolveArgs) -> Result<()> {
    let policy = road::dp_solve(&road_config(&args.road)?, args.road.tolerance)?;
    let path = write_out(&args.out, &to_json(&policy)?)?;
    say!("converged after {} sweeps (residual {:e}); wrote {}", policy.iterations, policy.residual, path.display());
    Ok(())
}

fn fit(args: &FitArgs) -> Result<()> {
    let theta = args.theta.as_deref().map(parse_theta).transpose()?.unwrap_or_else(Theta::equal);
    if args.max_leaves == 0 || args.min_leaf == 0 {
        return Err(usage("--max-leaves and --min-leaf must be at least 1"));
    }
    let data = augment(read_data(&args.data)?, check_gamma(args.gamma)?)?;
    let tree = grow(&data, theta, args.max_leaves, args.min_leaf)?;
    let path = write_out(&args.out, &format!("{}\n", tree.to_json()?))?;
    say!("grew {} leaves on {} samples; wrote {}", tree.num_leaves(), data.len(), path.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let mut csv = String::new();
    if let Some(tree_path) = &args.tree {
        let tree = read_tree(tree_path)?;
        let gamma = check_gamma(args.gamma.unwrap_or(tree.meta.gamma))?;
        let data = augment(read_data(&args.data)?, gamma)?;
        let l = tree.evaluate_losses(&data);
        csv.push_str("leaves,action_loss,value_loss,deriv_loss\n");
        let _ = writeln!(csv, "{},{},{},{}", tree.num_leaves(), l.action, l.value, l.derivative);
    } else if args.tree_series {
        let gamma = check_gamma(args.gamma.ok_or_else(|| usage("--tree-series needs --gamma"))?)?;
        let train = augment(read_data(&args.data)?, gamma)?;
        let held_out = match &args.eval_data {
            Some(p) => Some(augment(read_traces(p, args.data.format, args.data.discrete_actions)?, gamma)?),
            None => None,
        };
        let thetas: Vec<Theta> = if args.theta.is_empty() {
            vec![Theta::equal()]
        } else {
            args.theta.iter().map(|t| parse_theta(t)).collect::<Result<_>>()?
        };
        csv.push_str("theta,leaves,action_loss,value_loss,deriv_loss\n");
        for theta in thetas {
            let curve = loss_curve(&train, held_out.as_ref().unwrap_or(&train), theta, args.max_leaves, args.min_leaf)?;
            for (k, l) in curve {
                let _ = writeln!(csv, "\"{theta}\",{k},{},{},{}", l.action, l.value, l.derivative);
            }
        }
    } else {
        return Err(usage("eval needs --tree or --tree-series"));
    }
    let path = write_out(&args.out, &csv)?;
    say!("wrote {}", path.display());
    Ok(())
}

fn predict(args: &PredictArgs) -> Result<()> {
    let tree = read_tree(&args.tree)?;
    let mut rows = Vec::new();
    for text in &args.state {
        let s = parse_state(&tree, text)?;
        let p = tree.predict(&s);
        let action = tree.action_label(p.action);
        say!(
            "leaf {}: action {action}, value {}, derivative [{}]{}",
            p.leaf,
            format_number(p.value),
            p.derivative.iter().map(|x| format_number(*x)).collect::<Vec<_>>().join(", "),
            if p.low_confidence { " (low confidence)" } else { "" }
        );
        let action_json = match p.action {
            ActionPrediction::Discrete(_) => json!(action),
            ActionPrediction::Continuous(v) => json!(v),
        };
        rows.push(json!({
            "state": s,
            "leaf": p.leaf,
            "action": action_json,
            "value": p.value,
            "derivative": p.derivative,
            "derivative_low_confidence": p.low_confidence,
        }));
    }
    if let Some(out) = &args.out {
        write_out(out, &to_json(&rows)?)?;
    }
    Ok(())
}

fn explain(args: &ExplainArgs) -> Result<()> {
    let tree = read_tree(&args.tree)?;
    let state = parse_state(&tree, &args.state)?;
    let e = if let Some(foil) = &args.foil {
        explain::counterfactual_action(&tree, &state, foil)
    } else if let Some(v) = args.value_le {
        explain::counterfactual_value(&tree, &state, ValueCondition::AtMost(v))
    } else if let Some(v) = args.value_ge {
        explain::counterfactual_value(&tree, &state, ValueCondition::AtLeast(v))
    } else if let Some(next) = &args.next {
        explain::temporal(&tree, &state, &parse_state(&tree, next)?)
    } else {
        explain::factual(&tree, &state)
    }
    .map_err(|e| usage(e.to_string()))?;
    say!("{}", e.render(&tree));
    if e.kind == ExplanationKind::Factual {
        say!("{}", e.render_value(&tree));
    }
    let text = to_json(&e)?;
    print!("{text}");
    if let Some(out) = &args.out {
        write_out(out, &text)?;
    }
    if let Some(svg) = &args.svg {
        write_out(svg, &explanation_svg(&tree, &state, &e)?)?;
    }
    Ok(())
}

/// Slice through the query state on the changed features (padded with the
/// first unchanged ones), marking the state and the foil point.
fn explanation_svg(tree: &tripletree::TripleTree, state: &[f64], e: &tripletree::Explanation) -> Result<String> {
    let d = tree.num_features();
    let mut scene;
    let point = |p: &[f64], f: &[usize]| (p[f[0]], f.get(1).map_or(0.5, |&g| p[g]));
    let features: Vec<usize>;
    if d == 1 {
        features = vec![0];
        scene = Scene::for_plane(tree, 0, None);
        scene.rects = viz::direct_map(tree, ColourAttribute::ActionPred)?.rects;
    } else {
        let mut f: Vec<usize> = e.changed_features.iter().copied().take(2).collect();
        for g in 0..d {
            if f.len() < 2 && !f.contains(&g) {
                f.push(g);
            }
        }
        f.sort_unstable();
        let mut plane = PlaneSpec::new(tree, f[0], f[1]);
        plane.fixed = state.iter().zip(&tree.meta.feature_range).map(|(x, (lo, hi))| x.clamp(*lo, *hi)).collect();
        scene = Scene::for_plane(tree, f[0], Some(f[1]));
        scene.rects = viz::ice_slice(tree, &plane, ColourAttribute::ActionPred)?.rects;
        features = f;
    }
    let (x, y) = point(state, &features);
    scene.markers.push(Marker { x, y, label: "state".into() });
    if let Some(foil) = &e.foil_point {
        let (fx, fy) = point(foil, &features);
        scene.markers.push(Marker { x: fx, y: fy, label: "foil".into() });
        scene.overlays.push(Overlay { points: vec![[x, y], [fx, fy]], opacity: 1.0 });
    }
    scene.title = e.render(tree);
    Ok(viz::render_svg(&scene, &Style::default()))
}

fn parse_zone(tree: &tripletree::TripleTree, text: &str) -> Result<Hyperrect> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != tree.num_features() {
        return Err(usage(format!("zone has {} intervals, tree expects {}", parts.len(), tree.num_features())));
    }
    let mut zone = Hyperrect::unbounded(parts.len());
    for (f, p) in parts.iter().enumerate() {
        let (lo, hi) = p.split_once(':').ok_or_else(|| usage(format!("zone interval {p:?} is not lo:hi")))?;
        let lo = parse_floats(lo, "zone")?[0];
        let hi = parse_floats(hi, "zone")?[0];
        if lo > hi {
            return Err(usage(format!("zone interval {p:?} is empty")));
        }
        (zone.lower[f], zone.upper[f]) = (lo, hi);
    }
    Ok(zone)
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut tree = read_tree(&args.tree)?;
    if let Some(p) = &args.data {
        let data = augment(read_traces(p, None, false)?, tree.meta.gamma)?;
        tree.compute_transitions(&data);
    }
    let graph = LeafGraph::build(&tree);
    let mut paths: Vec<TrajectoryPath> = Vec::new();
    let mut ends: Option<(Vec<f64>, Vec<f64>)> = None;
    if let (Some(from), Some(to)) = (&args.from, &args.to) {
        let (a, b) = (parse_state(&tree, from)?, parse_state(&tree, to)?);
        if let Some(p) = trajectory::most_probable_path(&graph, tree.leaf_of(&a), tree.leaf_of(&b))? {
            paths.push(p);
        }
        ends = Some((a, b));
    } else if let (Some(s), Some(e)) = (&args.start_zone, &args.end_zone) {
        let (s, e) = (parse_zone(&tree, s)?, parse_zone(&tree, e)?);
        paths = trajectory::zone_paths(&tree, &graph, &s, &e, args.min_probability);
    } else {
        return Err(usage("simulate needs --from/--to or --start-zone/--end-zone"));
    }
    if !args.no_align {
        for p in &mut paths {
            let opts = AlignOptions {
                max_iters: args.max_iters,
                step_size: args.step_size,
                tol: args.tol,
                start: ends.as_ref().map(|e| e.0.clone()),
                end: ends.as_ref().map(|e| e.1.clone()),
            };
            let aligned = trajectory::align_path(&tree, &p.leaves, &opts)?;
            p.nodes = aligned.nodes;
            p.objective = aligned.objective;
        }
    }
    let path = write_out(&args.out, &to_json(&paths)?)?;
    match paths.len() {
        0 => say!("no path found; wrote {}", path.display()),
        n => say!("{n} path(s), best probability {}; wrote {}", format_number(paths.iter().map(|p| p.probability).fold(0.0, f64::max)), path.display()),
    }
    if let Some(svg) = &args.svg {
        write_out(svg, &paths_svg(&tree, &paths)?)?;
    }
    Ok(())
}

fn paths_svg(tree: &tripletree::TripleTree, paths: &[TrajectoryPath]) -> Result<String> {
    let d = tree.num_features();
    let (fy, mut scene) = if d == 1 {
        (None, Scene::for_plane(tree, 0, None))
    } else {
        (Some(1), Scene::for_plane(tree, 0, Some(1)))
    };
    scene.rects = if d <= 2 {
        viz::direct_map(tree, ColourAttribute::ActionPred)?.rects
    } else {
        viz::ice_slice(tree, &PlaneSpec::new(tree, 0, 1), ColourAttribute::ActionPred)?.rects
    };
    let top = paths.iter().map(|p| p.probability).fold(0.0, f64::max);
    for p in paths {
        let points = p.nodes.iter().map(|n| [n[0], fy.map_or(0.5, |f| n[f])]).collect();
        let opacity = if top > 0.0 { p.probability / top } else { 1.0 };
        scene.overlays.push(Overlay { points, opacity });
    }
    Ok(viz::render_svg(&scene, &Style::default()))
}

fn viz_cmd(args: &VizArgs) -> Result<()> {
    let tree = read_tree(&args.tree)?;
    let attribute: ColourAttribute = args.attribute.parse().map_err(|e: tripletree::VizError| usage(e.to_string()))?;
    let plane_idx = parse_floats(&args.plane, "plane")?;
    if plane_idx.len() != 2 || plane_idx.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
        return Err(usage("--plane takes two feature indices, e.g. 0,1"));
    }
    let (nx, ny) = args
        .resolution
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
        .ok_or_else(|| usage("--resolution takes NXxNY, e.g. 200x200"))?;
    let d = tree.num_features();
    let (fx, fy) = (plane_idx[0] as usize, plane_idx[1] as usize);
    let mut plane = PlaneSpec { fx, fy, nx, ny, fixed: tree.meta.feature_median.clone() };
    if let Some(fixed) = &args.fixed {
        plane.fixed = parse_floats(fixed, "fixed")?;
    }
    let plane_check = |p: &PlaneSpec| p.validate(&tree).map_err(|e| usage(e.to_string()));
    let scene_plane = if d == 1 { None } else { Some(fy) };
    let mut scene = Scene::for_plane(&tree, if d == 1 { 0 } else { fx }, scene_plane);
    scene.title = attribute.name().to_string();
    let text = match (args.kind, attribute) {
        (VizKind::Quiver, _) | (_, ColourAttribute::DerivPred) => {
            let mode = if args.slice { QuiverMode::Slice } else { QuiverMode::Direct };
            if mode == QuiverMode::Slice || d == 2 {
                plane_check(&plane)?;
            }
            let arrows = viz::quiver(&tree, &plane, mode).map_err(|e| usage(e.to_string()))?;
            scene.title = "deriv_pred".into();
            let text = to_json(&json!({ "plane": [fx, fy], "arrows": arrows }))?;
            scene.arrows = arrows;
            text
        }
        (VizKind::Direct, _) => {
            if d == 2 {
                plane_check(&plane)?;
            }
            let rects = viz::direct_map(&tree, attribute).map_err(|e| usage(e.to_string()))?;
            let text = to_json(&rects)?;
            scene.rects = rects.rects;
            text
        }
        (VizKind::Ice, _) => {
            plane_check(&plane)?;
            let rects = viz::ice_slice(&tree, &plane, attribute)?;
            let text = to_json(&rects)?;
            scene.rects = rects.rects;
            text
        }
        (VizKind::Pdp, _) => {
            plane_check(&plane)?;
            let grid = viz::pdp_projection(&tree, &plane, attribute)?;
            let text = to_json(&grid)?;
            scene.grid = Some(grid);
            text
        }
    };
    let path = write_out(&args.out, &text)?;
    say!("wrote {}", path.display());
    if let Some(svg) = &args.svg {
        write_out(svg, &viz::render_svg(&scene, &Style::default()))?;
    }
    Ok(())
}

fn sweep(args: &SweepArgs, seed: u64) -> Result<()> {
    if args.max_leaves == 0 || args.min_leaf == 0 {
        return Err(usage("--max-leaves and --min-leaf must be at least 1"));
    }
    let data = match &args.data {
        Some(p) => {
            let gamma = check_gamma(args.gamma.ok_or_else(|| usage("--data needs --gamma"))?)?;
            augment(read_traces(p, args.format, args.discrete_actions)?, gamma)?
        }
        None => {
            let config = road_config(&args.road)?;
            let policy = road::dp_solve(&config, args.road.tolerance)?;
            road::augment_road(&config, road::generate_dataset(&policy, args.samples, args.episode_len, seed)?)?
        }
    };
    let thetas = road::simplex_grid(args.steps);
    let result = road::theta_sweep(&data, &thetas, args.max_leaves, args.min_leaf)?;
    let mut csv = String::from("theta,action_loss,value_loss,deriv_loss,worst_normalised_loss\n");
    for r in &result.rows {
        let _ = writeln!(csv, "\"{}\",{},{},{},{}", r.theta, r.action_loss, r.value_loss, r.deriv_loss, r.worst_normalised_loss);
    }
    let path = write_out(&args.out, &csv)?;
    let best = &result.rows[result.best];
    say!("best theta {} (worst normalised loss {}); wrote {}", best.theta, format_number(best.worst_normalised_loss), path.display());
    Ok(())
}

fn depth(tree: &tripletree::TripleTree, at: usize) -> usize {
    match tree.nodes[at] {
        Node::Split { left, right, .. } => 1 + depth(tree, left).max(depth(tree, right)),
        Node::Leaf(_) => 0,
    }
}

fn inspect(args: &InspectArgs) -> Result<()> {
    let tree = read_tree(&args.tree)?;
    let m = &tree.meta;
    say!("features: {}", m.feature_names.join(", "));
    say!("actions: {:?} [{}]", m.action_kind, m.action_labels.join(", "));
    say!("theta: {}  gamma: {}", m.theta, m.gamma);
    say!("leaves: {}  depth: {}", tree.num_leaves(), depth(&tree, 0));
    let r = m.root_impurity;
    say!("root impurity: action {} value {} derivative {}", format_number(r.action), format_number(r.value), format_number(r.derivative));
    let transitions: usize = tree.leaves.iter().map(|l| l.transitions.len()).sum();
    say!("transition edges: {transitions}");
    if args.leaves {
        for l in &tree.leaves {
            let b = tree.clipped_box(l.id);
            let bounds: Vec<String> = (0..tree.num_features())
                .map(|f| format!("{}∈[{}, {}]", m.feature_names[f], format_number(b.lower[f]), format_number(b.upper[f])))
                .collect();
            say!(
                "leaf {}: n={} action {} value {} {}",
                l.id,
                l.population(),
                tree.action_label(&l.action),
                format_number(l.value),
                bounds.join(" ")
            );
        }
    }
    Ok(())
}
