//! Visualisation data for fitted trees: leaf rectangles on a plane, averaged
//! projection grids, slices, arrow fields and a small SVG renderer.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{ActionPrediction, Hyperrect, Leaf, TripleTree};

#[derive(Debug, Error, PartialEq)]
pub enum VizError {
    #[error("direct maps need at most 2 features, tree has {0}; use a projection or slice")]
    TooManyFeatures(usize),
    #[error("deriv_pred is a vector attribute; use a quiver plot")]
    VectorAttribute,
    #[error("plane features must differ and be below {d}, got ({fx}, {fy})")]
    Plane { fx: usize, fy: usize, d: usize },
    #[error("fixed value {value} for feature {feature} lies outside its range")]
    FixedOutOfRange { feature: usize, value: f64 },
    #[error("expected {expected} fixed values, got {found}")]
    FixedLength { expected: usize, found: usize },
    #[error("grid resolution must be at least 1x1")]
    Resolution,
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColourAttribute {
    ActionPred,
    ValuePred,
    DerivPred,
    ActionImpurity,
    ValueImpurity,
    DerivImpurity,
    Density,
}

impl ColourAttribute {
    pub const ALL: [ColourAttribute; 7] = [
        ColourAttribute::ActionPred,
        ColourAttribute::ValuePred,
        ColourAttribute::DerivPred,
        ColourAttribute::ActionImpurity,
        ColourAttribute::ValueImpurity,
        ColourAttribute::DerivImpurity,
        ColourAttribute::Density,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ColourAttribute::ActionPred => "action_pred",
            ColourAttribute::ValuePred => "value_pred",
            ColourAttribute::DerivPred => "deriv_pred",
            ColourAttribute::ActionImpurity => "action_impurity",
            ColourAttribute::ValueImpurity => "value_impurity",
            ColourAttribute::DerivImpurity => "deriv_impurity",
            ColourAttribute::Density => "density",
        }
    }

    /// Scalar colour of a leaf. Discrete actions map to their code and
    /// continuous vector actions to their Euclidean norm.
    pub fn leaf_value(self, leaf: &Leaf) -> Result<f64, VizError> {
        Ok(match self {
            ColourAttribute::ActionPred => match &leaf.action {
                ActionPrediction::Discrete(c) => *c as f64,
                ActionPrediction::Continuous(v) if v.len() == 1 => v[0],
                ActionPrediction::Continuous(v) => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            },
            ColourAttribute::ValuePred => leaf.value,
            ColourAttribute::DerivPred => return Err(VizError::VectorAttribute),
            ColourAttribute::ActionImpurity => leaf.impurity.action,
            ColourAttribute::ValueImpurity => leaf.impurity.value,
            ColourAttribute::DerivImpurity => leaf.impurity.derivative,
            ColourAttribute::Density => leaf.density,
        })
    }
}

impl FromStr for ColourAttribute {
    type Err = VizError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ColourAttribute::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| VizError::UnknownAttribute(s.into()))
    }
}

/// Two plotted features, a raster resolution and values for every other feature.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneSpec {
    pub fx: usize,
    pub fy: usize,
    pub nx: usize,
    pub ny: usize,
    /// One entry per feature; the plotted features' entries are ignored.
    pub fixed: Vec<f64>,
}

impl PlaneSpec {
    /// 200x200 plane with off-plane features fixed at their medians.
    pub fn new(tree: &TripleTree, fx: usize, fy: usize) -> Self {
        PlaneSpec { fx, fy, nx: 200, ny: 200, fixed: tree.meta.feature_median.clone() }
    }

    pub fn validate(&self, tree: &TripleTree) -> Result<(), VizError> {
        let d = tree.num_features();
        if self.fx == self.fy || self.fx >= d || self.fy >= d {
            return Err(VizError::Plane { fx: self.fx, fy: self.fy, d });
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(VizError::Resolution);
        }
        if self.fixed.len() != d {
            return Err(VizError::FixedLength { expected: d, found: self.fixed.len() });
        }
        for (f, &value) in self.fixed.iter().enumerate() {
            let (lo, hi) = tree.meta.feature_range[f];
            if f != self.fx && f != self.fy && !(lo <= value && value <= hi) {
                return Err(VizError::FixedOutOfRange { feature: f, value });
            }
        }
        Ok(())
    }

    fn off_plane(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.fixed.len()).filter(|&f| f != self.fx && f != self.fy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub value: f64,
    pub leaf: usize,
}

impl Rect {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.x0 <= x && x < self.x1 && self.y0 <= y && y < self.y1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectSet {
    pub plane: Vec<usize>,
    pub rects: Vec<Rect>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub plane: [usize; 2],
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    /// `values[j][i]` is the cell between `y_edges[j..=j+1]` and `x_edges[i..=i+1]`.
    pub values: Vec<Vec<f64>>,
}

impl Grid {
    fn centres(edges: &[f64]) -> Vec<f64> {
        edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arrow {
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
    pub leaf: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuiverMode {
    Direct,
    Slice,
}

fn edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| if i == n { hi } else { lo + (hi - lo) * i as f64 / n as f64 }).collect()
}

/// Clipped extent of `bounds` along the plane, with a unit y axis for one-feature trees.
fn plane_rect(tree: &TripleTree, bounds: &Hyperrect, fx: usize, fy: Option<usize>, value: f64, leaf: usize) -> Rect {
    let clipped = bounds.clipped(&tree.meta.feature_range);
    let (y0, y1) = fy.map_or((0.0, 1.0), |f| (clipped.lower[f], clipped.upper[f]));
    Rect { x0: clipped.lower[fx], x1: clipped.upper[fx], y0, y1, value, leaf }
}

/// One range-clipped rectangle per leaf, for trees with one or two features.
pub fn direct_map(tree: &TripleTree, attribute: ColourAttribute) -> Result<RectSet, VizError> {
    let d = tree.num_features();
    if d > 2 {
        return Err(VizError::TooManyFeatures(d));
    }
    let fy = (d == 2).then_some(1);
    let rects = tree
        .leaves
        .iter()
        .map(|leaf| Ok(plane_rect(tree, &leaf.bounds, 0, fy, attribute.leaf_value(leaf)?, leaf.id)))
        .collect::<Result<_, VizError>>()?;
    Ok(RectSet { plane: (0..d).collect(), rects })
}

/// Samples rectangles at the cell centres of a grid; cells outside every
/// rectangle are NaN.
pub fn rasterise(rects: &RectSet, x_edges: &[f64], y_edges: &[f64]) -> Vec<Vec<f64>> {
    let (xs, ys) = (Grid::centres(x_edges), Grid::centres(y_edges));
    ys.iter()
        .map(|&y| {
            xs.iter().map(|&x| rects.rects.iter().find(|r| r.contains(x, y)).map_or(f64::NAN, |r| r.value)).collect()
        })
        .collect()
}

/// Population-weighted mean of the attribute over all leaves whose box,
/// projected onto the plane, covers each cell centre.
pub fn pdp_projection(tree: &TripleTree, plane: &PlaneSpec, attribute: ColourAttribute) -> Result<Grid, VizError> {
    plane.validate(tree)?;
    let (fx, fy) = (plane.fx, plane.fy);
    let values: Vec<f64> = tree.leaves.iter().map(|l| attribute.leaf_value(l)).collect::<Result<_, _>>()?;
    let (xlo, xhi) = tree.meta.feature_range[fx];
    let (ylo, yhi) = tree.meta.feature_range[fy];
    let (x_edges, y_edges) = (edges(xlo, xhi, plane.nx), edges(ylo, yhi, plane.ny));
    let (xs, ys) = (Grid::centres(&x_edges), Grid::centres(&y_edges));
    let covers = |b: &Hyperrect, f: usize, v: f64| b.lower[f] <= v && v < b.upper[f];
    let grid = ys
        .iter()
        .map(|&y| {
            xs.iter()
                .map(|&x| {
                    let (mut num, mut den, mut sum, mut n) = (0.0, 0.0, 0.0, 0usize);
                    for (leaf, v) in tree.leaves.iter().zip(&values) {
                        if covers(&leaf.bounds, fx, x) && covers(&leaf.bounds, fy, y) {
                            let w = leaf.population() as f64;
                            num += w * v;
                            den += w;
                            sum += v;
                            n += 1;
                        }
                    }
                    if n == 1 {
                        sum
                    } else if den > 0.0 {
                        num / den
                    } else if n > 0 {
                        sum / n as f64
                    } else {
                        f64::NAN
                    }
                })
                .collect()
        })
        .collect();
    Ok(Grid { plane: [fx, fy], x_edges, y_edges, values: grid })
}

fn slice_leaves<'a>(tree: &'a TripleTree, plane: &'a PlaneSpec) -> impl Iterator<Item = &'a Leaf> + 'a {
    tree.leaves.iter().filter(move |leaf| {
        plane.off_plane().all(|f| {
            let v = plane.fixed[f];
            leaf.bounds.lower[f] <= v && v < leaf.bounds.upper[f]
        })
    })
}

/// Rectangles of the leaves cut by the plane through the fixed values.
pub fn ice_slice(tree: &TripleTree, plane: &PlaneSpec, attribute: ColourAttribute) -> Result<RectSet, VizError> {
    plane.validate(tree)?;
    let rects = slice_leaves(tree, plane)
        .map(|leaf| Ok(plane_rect(tree, &leaf.bounds, plane.fx, Some(plane.fy), attribute.leaf_value(leaf)?, leaf.id)))
        .collect::<Result<_, VizError>>()?;
    Ok(RectSet { plane: vec![plane.fx, plane.fy], rects })
}

/// One arrow per leaf at its clipped box centre; leaves whose derivative is
/// borrowed from an ancestor are left out. `Direct` ignores `plane` apart
/// from the feature pair and needs a tree with at most 2 features.
pub fn quiver(tree: &TripleTree, plane: &PlaneSpec, mode: QuiverMode) -> Result<Vec<Arrow>, VizError> {
    let d = tree.num_features();
    let leaves: Vec<&Leaf> = match mode {
        QuiverMode::Direct => {
            if d > 2 {
                return Err(VizError::TooManyFeatures(d));
            }
            tree.leaves.iter().collect()
        }
        QuiverMode::Slice => {
            plane.validate(tree)?;
            slice_leaves(tree, plane).collect()
        }
    };
    let (fx, fy) = if d == 1 { (0, None) } else { (plane.fx, Some(plane.fy)) };
    Ok(leaves
        .into_iter()
        .filter(|l| !l.derivative_low_confidence)
        .map(|l| {
            let c = tree.clipped_box(l.id).center();
            Arrow {
                x: c[fx],
                y: fy.map_or(0.5, |f| c[f]),
                dx: l.derivative[fx],
                dy: fy.map_or(0.0, |f| l.derivative[f]),
                leaf: l.id,
            }
        })
        .collect())
}

/// A polyline overlay drawn with the given opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    pub points: Vec<[f64; 2]>,
    pub opacity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Marker {
    pub x: f64,
    pub y: f64,
    pub label: String,
}

/// Everything drawn in one SVG plot, in data coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub rects: Vec<Rect>,
    pub grid: Option<Grid>,
    pub arrows: Vec<Arrow>,
    pub overlays: Vec<Overlay>,
    pub markers: Vec<Marker>,
}

impl Scene {
    /// Empty scene over the range of two features of `tree` (a unit y axis
    /// when `fy` is `None`).
    pub fn for_plane(tree: &TripleTree, fx: usize, fy: Option<usize>) -> Self {
        let names = &tree.meta.feature_names;
        Scene {
            x_label: names[fx].clone(),
            y_label: fy.map_or(String::new(), |f| names[f].clone()),
            x_range: tree.meta.feature_range[fx],
            y_range: fy.map_or((0.0, 1.0), |f| tree.meta.feature_range[f]),
            ..Scene::default()
        }
    }

    fn value_range(&self) -> Option<(f64, f64)> {
        let grid = self.grid.iter().flat_map(|g| g.values.iter().flatten().copied());
        let values = self.rects.iter().map(|r| r.value).chain(grid).filter(|v| v.is_finite());
        values.fold(None, |acc, v| Some(acc.map_or((v, v), |(lo, hi): (f64, f64)| (lo.min(v), hi.max(v)))))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Style {
    pub width: f64,
    pub height: f64,
    pub margin: f64,
    /// Length in pixels of the longest arrow.
    pub arrow_length: f64,
}

impl Default for Style {
    fn default() -> Self {
        Style { width: 640.0, height: 480.0, margin: 60.0, arrow_length: 24.0 }
    }
}

const PALETTE: [(f64, f64, f64); 5] =
    [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];

/// Colour for `t` in [0, 1] on a perceptually ordered ramp.
pub fn colour(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (PALETTE.len() - 1) as f64;
    let i = (pos.floor() as usize).min(PALETTE.len() - 2);
    let u = pos - i as f64;
    let (a, b) = (PALETTE[i], PALETTE[i + 1]);
    let mix = |p: f64, q: f64| (p + (q - p) * u).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders a scene as an SVG 1.1 document. Output depends only on the inputs.
pub fn render_svg(scene: &Scene, style: &Style) -> String {
    let bar = 70.0;
    let (w, h, m) = (style.width, style.height, style.margin);
    let (pw, ph) = (w - 2.0 * m - bar, h - 2.0 * m);
    let (x0, x1) = scene.x_range;
    let (y0, y1) = scene.y_range;
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let px = |x: f64| m + (x - x0) / span(x0, x1) * pw;
    let py = |y: f64| m + ph - (y - y0) / span(y0, y1) * ph;
    let range = scene.value_range();
    let shade = |v: f64| match range {
        Some((lo, hi)) if hi > lo => colour((v - lo) / (hi - lo)),
        _ => colour(0.5),
    };

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w:.0}" height="{h:.0}" fill="white"/>"#);
    if !scene.title.is_empty() {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, m / 2.0, escape(&scene.title));
    }
    if let Some(grid) = &scene.grid {
        for (j, row) in grid.values.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    continue;
                }
                let (ax, bx) = (px(grid.x_edges[i]), px(grid.x_edges[i + 1]));
                let (ay, by) = (py(grid.y_edges[j + 1]), py(grid.y_edges[j]));
                let _ = writeln!(
                    s,
                    r#"<rect x="{ax:.2}" y="{ay:.2}" width="{:.2}" height="{:.2}" fill="{}" stroke="none"/>"#,
                    bx - ax,
                    by - ay,
                    shade(v)
                );
            }
        }
    }
    for r in &scene.rects {
        let (ax, bx, ay, by) = (px(r.x0), px(r.x1), py(r.y1), py(r.y0));
        let _ = writeln!(
            s,
            r#"<rect x="{ax:.2}" y="{ay:.2}" width="{:.2}" height="{:.2}" fill="{}" stroke="black" stroke-width="0.5"/>"#,
            bx - ax,
            by - ay,
            shade(r.value)
        );
    }
    if !scene.arrows.is_empty() {
        let longest = scene
            .arrows
            .iter()
            .map(|a| (a.dx / span(x0, x1) * pw).hypot(a.dy / span(y0, y1) * ph))
            .fold(0.0, f64::max);
        let k = if longest > 0.0 { style.arrow_length / longest } else { 0.0 };
        for a in &scene.arrows {
            let (sx, sy) = (px(a.x), py(a.y));
            let (ex, ey) = (sx + k * a.dx / span(x0, x1) * pw, sy - k * a.dy / span(y0, y1) * ph);
            let _ = writeln!(s, r#"<line x1="{sx:.2}" y1="{sy:.2}" x2="{ex:.2}" y2="{ey:.2}" stroke="black" stroke-width="1"/>"#);
            let _ = writeln!(s, r#"<circle cx="{ex:.2}" cy="{ey:.2}" r="1.5" fill="black"/>"#);
        }
    }
    for o in &scene.overlays {
        let points: Vec<String> = o.points.iter().map(|p| format!("{:.2},{:.2}", px(p[0]), py(p[1]))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="crimson" stroke-width="2" stroke-opacity="{:.4}"/>"#,
            points.join(" "),
            o.opacity.clamp(0.0, 1.0)
        );
    }
    for mk in &scene.markers {
        let (x, y) = (px(mk.x), py(mk.y));
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="white" stroke="black"/>"#);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#, x + 6.0, y - 6.0, escape(&mk.label));
    }

    // axes
    let _ = writeln!(s, r#"<rect x="{m:.2}" y="{m:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#);
    for (t, v) in [(0.0, x0), (1.0, x1)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">{}</text>"#,
            m + t * pw,
            m + ph + 15.0,
            crate::tree::format_number(v)
        );
    }
    for (t, v) in [(0.0, y0), (1.0, y1)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="11">{}</text>"#,
            m - 5.0,
            m + ph - t * ph + 4.0,
            crate::tree::format_number(v)
        );
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#, m + pw / 2.0, h - m / 3.0, escape(&scene.x_label));
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        m / 3.0,
        m + ph / 2.0,
        m / 3.0,
        m + ph / 2.0,
        escape(&scene.y_label)
    );

    // colour bar
    if let Some((lo, hi)) = range {
        let (bx, bw, steps) = (m + pw + 20.0, 15.0, 50);
        for i in 0..steps {
            let t = (i as f64 + 0.5) / steps as f64;
            let y = m + ph * (1.0 - (i + 1) as f64 / steps as f64);
            let _ = writeln!(
                s,
                r#"<rect x="{bx:.2}" y="{y:.2}" width="{bw:.2}" height="{:.2}" fill="{}" stroke="none"/>"#,
                ph / steps as f64,
                colour(t)
            );
        }
        let _ = writeln!(s, r#"<rect x="{bx:.2}" y="{m:.2}" width="{bw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#);
        for (y, v) in [(m + 4.0, hi), (m + ph, lo)] {
            let _ = writeln!(s, r#"<text x="{:.2}" y="{y:.2}" font-size="10">{}</text>"#, bx + bw + 3.0, crate::tree::format_number(v));
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impurity::Theta;
    use crate::tree::tests::random_dataset;
    use crate::tree::{grow, Node};
    use proptest::prelude::*;

    fn fitted(seed: u64, d: usize, leaves: usize) -> TripleTree {
        grow(&random_dataset(seed, 300, d), Theta::equal(), leaves, 1).unwrap()
    }

    fn range_area(tree: &TripleTree, fx: usize, fy: usize) -> f64 {
        let (a, b) = tree.meta.feature_range[fx];
        let (c, d) = tree.meta.feature_range[fy];
        (b - a) * (d - c)
    }

    fn overlap_area(rects: &[Rect]) -> f64 {
        let mut total = 0.0;
        for (i, a) in rects.iter().enumerate() {
            for b in &rects[i + 1..] {
                let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
                let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
                total += w * h;
            }
        }
        total
    }

    #[test]
    fn single_leaf_covers_the_range() {
        let tree = fitted(1, 2, 1);
        let map = direct_map(&tree, ColourAttribute::ValuePred).unwrap();
        assert_eq!(map.rects.len(), 1);
        let r = &map.rects[0];
        assert_eq!((r.x0, r.x1), tree.meta.feature_range[0]);
        assert_eq!((r.y0, r.y1), tree.meta.feature_range[1]);
        let grid = pdp_projection(&tree, &PlaneSpec::new(&tree, 0, 1), ColourAttribute::ValuePred).unwrap();
        assert!(grid.values.iter().flatten().all(|&v| v == tree.leaves[0].value));
    }

    #[test]
    fn direct_map_tiles_the_range() {
        let tree = fitted(2, 2, 30);
        let map = direct_map(&tree, ColourAttribute::Density).unwrap();
        let area: f64 = map.rects.iter().map(Rect::area).sum();
        assert!((area - range_area(&tree, 0, 1)).abs() < 1e-9);
        assert!(overlap_area(&map.rects) < 1e-12);
    }

    #[test]
    fn too_many_features_for_direct_map() {
        let tree = fitted(3, 3, 5);
        assert_eq!(direct_map(&tree, ColourAttribute::ValuePred), Err(VizError::TooManyFeatures(3)));
        assert_eq!(direct_map(&fitted(3, 2, 5), ColourAttribute::DerivPred), Err(VizError::VectorAttribute));
    }

    #[test]
    fn one_feature_uses_unit_height() {
        let tree = fitted(4, 1, 6);
        let map = direct_map(&tree, ColourAttribute::ActionPred).unwrap();
        assert!(map.rects.iter().all(|r| r.y0 == 0.0 && r.y1 == 1.0));
        let arrows = quiver(&tree, &PlaneSpec { fx: 0, fy: 0, nx: 1, ny: 1, fixed: vec![0.0] }, QuiverMode::Direct).unwrap();
        assert!(arrows.iter().all(|a| a.y == 0.5 && a.dy == 0.0));
    }

    #[test]
    fn projection_of_two_features_is_the_map() {
        for seed in 0..5 {
            let tree = fitted(seed, 2, 40);
            let mut plane = PlaneSpec::new(&tree, 0, 1);
            (plane.nx, plane.ny) = (37, 23);
            for attr in [ColourAttribute::ActionPred, ColourAttribute::ValuePred, ColourAttribute::Density] {
                let grid = pdp_projection(&tree, &plane, attr).unwrap();
                let raster = rasterise(&direct_map(&tree, attr).unwrap(), &grid.x_edges, &grid.y_edges);
                for (j, (a, b)) in grid.values.iter().zip(&raster).enumerate() {
                    for (i, (x, y)) in a.iter().zip(b).enumerate() {
                        assert_eq!(x, y, "cell ({i}, {j}) of {attr:?}, seed {seed}");
                    }
                }
            }
        }
    }

    #[test]
    fn weighted_mean_over_a_hidden_split() {
        // leaves split on feature 2 only, populations 3:1, values 0 and 1
        let mut tree = fitted(5, 3, 2);
        tree.nodes = vec![Node::Split { feature: 2, threshold: 0.5, left: 1, right: 2 }, Node::Leaf(0), Node::Leaf(1)];
        tree.leaves[0].bounds = Hyperrect { lower: vec![f64::NEG_INFINITY; 3], upper: vec![f64::INFINITY, f64::INFINITY, 0.5] };
        tree.leaves[1].bounds = Hyperrect { lower: vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.5], upper: vec![f64::INFINITY; 3] };
        tree.leaves[0].members = vec![0, 1, 2];
        tree.leaves[1].members = vec![3];
        tree.leaves[0].value = 0.0;
        tree.leaves[1].value = 1.0;
        let mut plane = PlaneSpec::new(&tree, 0, 1);
        (plane.nx, plane.ny) = (10, 10);
        let grid = pdp_projection(&tree, &plane, ColourAttribute::ValuePred).unwrap();
        assert!(grid.values.iter().flatten().all(|&v| v == 0.25));
        // a slice below the threshold shows only the left leaf
        plane.fixed[2] = 0.2;
        let slice = ice_slice(&tree, &plane, ColourAttribute::ValuePred).unwrap();
        assert_eq!(slice.rects.iter().map(|r| r.leaf).collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn slice_with_no_fixed_features_is_the_map() {
        let tree = fitted(6, 2, 25);
        let slice = ice_slice(&tree, &PlaneSpec::new(&tree, 0, 1), ColourAttribute::ValuePred).unwrap();
        assert_eq!(slice, direct_map(&tree, ColourAttribute::ValuePred).unwrap());
    }

    #[test]
    fn plane_validation() {
        let tree = fitted(7, 3, 4);
        let mut plane = PlaneSpec::new(&tree, 0, 0);
        assert!(matches!(plane.validate(&tree), Err(VizError::Plane { .. })));
        plane.fy = 1;
        plane.fixed[2] = 5.0;
        assert_eq!(plane.validate(&tree), Err(VizError::FixedOutOfRange { feature: 2, value: 5.0 }));
        plane.fixed.pop();
        assert!(matches!(plane.validate(&tree), Err(VizError::FixedLength { .. })));
    }

    #[test]
    fn arrows_copy_leaf_derivatives() {
        let tree = fitted(8, 2, 20);
        let arrows = quiver(&tree, &PlaneSpec::new(&tree, 0, 1), QuiverMode::Direct).unwrap();
        let expected = tree.leaves.iter().filter(|l| !l.derivative_low_confidence).count();
        assert_eq!(arrows.len(), expected);
        for a in &arrows {
            let l = &tree.leaves[a.leaf];
            assert_eq!((a.dx, a.dy), (l.derivative[0], l.derivative[1]));
        }
    }

    #[test]
    fn attribute_names_round_trip() {
        for a in ColourAttribute::ALL {
            assert_eq!(a.name().parse::<ColourAttribute>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{}\"", a.name()));
        }
        assert!("colour".parse::<ColourAttribute>().is_err());
    }

    #[test]
    fn colour_ramp_ends() {
        assert_eq!(colour(0.0), "#440154");
        assert_eq!(colour(1.0), "#fde725");
        assert_eq!(colour(f64::NAN), "#440154");
    }

    #[test]
    fn svg_is_deterministic_and_escaped() {
        let tree = fitted(9, 2, 10);
        let mut scene = Scene::for_plane(&tree, 0, Some(1));
        scene.title = "a < b & c".into();
        scene.rects = direct_map(&tree, ColourAttribute::ValuePred).unwrap().rects;
        let a = render_svg(&scene, &Style::default());
        assert_eq!(a, render_svg(&scene, &Style::default()));
        assert!(a.contains("a &lt; b &amp; c"));
        assert_eq!(a.matches("stroke-width=\"0.5\"").count(), 10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn slices_tile_and_projections_stay_in_bounds(seed in 0u64..1000, leaves in 1usize..40, t in 0.0f64..1.0) {
            let tree = fitted(seed, 3, leaves);
            let mut plane = PlaneSpec::new(&tree, 0, 2);
            let (lo, hi) = tree.meta.feature_range[1];
            plane.fixed[1] = lo + t * (hi - lo);
            (plane.nx, plane.ny) = (16, 16);
            let slice = ice_slice(&tree, &plane, ColourAttribute::ValuePred).unwrap();
            let area: f64 = slice.rects.iter().map(Rect::area).sum();
            prop_assert!((area - range_area(&tree, 0, 2)).abs() < 1e-9);
            prop_assert!(overlap_area(&slice.rects) < 1e-9);

            let grid = pdp_projection(&tree, &plane, ColourAttribute::ValuePred).unwrap();
            let (vmin, vmax) = tree.leaves.iter().map(|l| l.value).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            for &v in grid.values.iter().flatten() {
                prop_assert!(v >= vmin - 1e-12 && v <= vmax + 1e-12);
            }
        }
    }
}
