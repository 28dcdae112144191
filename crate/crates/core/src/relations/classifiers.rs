//! Rule-based classifiers for the 24 geometric relations.
//!
//! Each relation is a [`GeometricRelation`] trait object, and the
//! [`RelationRegistry`] maps relation names to classifiers so callers can
//! pick the set they need at runtime.

use super::{Arity, ClassifierConfig, Plane, RelationKind};
use crate::geometry::Box3;

const X: usize = 0;
const Y: usize = 1;
const Z: usize = 2;

/// A predicate over the boxes of its operands.
pub trait GeometricRelation: Send + Sync {
    fn kind(&self) -> RelationKind;

    /// Evaluates the rule. Callers guarantee `boxes.len()` matches the arity.
    fn holds(&self, boxes: &[Box3], cfg: &ClassifierConfig) -> bool;

    fn name(&self) -> &'static str {
        self.kind().name()
    }

    fn arity(&self) -> Arity {
        self.kind().arity()
    }

    fn plane(&self) -> Plane {
        self.kind().plane()
    }
}

fn same_z_level(a: &Box3, b: &Box3, cfg: &ClassifierConfig) -> bool {
    (a.min[Z] - b.min[Z]).abs() < cfg.eps
}

fn overlap_exceeds(a: &Box3, b: &Box3, axis: usize, frac: f64) -> bool {
    a.overlap_along(b, axis) > frac * a.extent(axis).min(b.extent(axis))
}

fn stacked(a: &Box3, b: &Box3, cfg: &ClassifierConfig) -> bool {
    (a.min[Z] - b.max[Z]).abs() < cfg.eps
}

fn footprint_contains(outer: &Box3, inner: &Box3, tol: f64) -> bool {
    [X, Y].iter().all(|&k| inner.min[k] >= outer.min[k] - tol && inner.max[k] <= outer.max[k] + tol)
}

fn footprint_overlaps(a: &Box3, b: &Box3) -> bool {
    a.overlap_along(b, X) * a.overlap_along(b, Y) > 1e-9
}

/// The supporting face is fully used: the upper footprint lies inside the
/// lower one, or the lower top face lies entirely under the upper block.
fn fully_supported(upper: &Box3, lower: &Box3, cfg: &ClassifierConfig) -> bool {
    footprint_contains(lower, upper, cfg.eps) || footprint_contains(upper, lower, cfg.eps)
}

macro_rules! relation {
    ($ty:ident, $kind:ident, |$b:ident, $cfg:ident| $body:expr) => {
        pub struct $ty;
        impl GeometricRelation for $ty {
            fn kind(&self) -> RelationKind {
                RelationKind::$kind
            }
            fn holds(&self, $b: &[Box3], $cfg: &ClassifierConfig) -> bool {
                $body
            }
        }
    };
}

relation!(LeftOf, LeftOf, |b, cfg| {
    let (a, o) = (&b[0], &b[1]);
    a.max[X] <= o.min[X] + cfg.eps
        && (o.min[X] - a.max[X]).abs() < cfg.gap
        && overlap_exceeds(a, o, Y, cfg.alpha)
        && same_z_level(a, o, cfg)
});

relation!(LeftIn, LeftIn, |b, _cfg| b[0].max[X] < b[1].center()[X]);

relation!(RightIn, RightIn, |b, _cfg| b[0].min[X] > b[1].center()[X]);

relation!(CenterIn, CenterIn, |b, cfg| {
    let (o, t) = (b[0].center(), b[1].center());
    (o[X] - t[X]).abs() < cfg.eps && (o[Y] - t[Y]).abs() < cfg.eps
});

relation!(SupportedByPartially, SupportedByPartially, |b, cfg| {
    stacked(&b[0], &b[1], cfg) && footprint_overlaps(&b[0], &b[1]) && !fully_supported(&b[0], &b[1], cfg)
});

relation!(SupportedByFully, SupportedByFully, |b, cfg| {
    stacked(&b[0], &b[1], cfg) && footprint_overlaps(&b[0], &b[1]) && fully_supported(&b[0], &b[1], cfg)
});

relation!(HorizontalAligned, HorizontalAligned, |b, cfg| {
    let (a, o) = (&b[0], &b[1]);
    (a.center()[Y] - o.center()[Y]).abs() < cfg.eps
        || (a.min[Y] - o.min[Y]).abs() < cfg.eps
        || (a.max[Y] - o.max[Y]).abs() < cfg.eps
});

relation!(VerticalAlignedCentroid, VerticalAlignedCentroid, |b, cfg| {
    let (a, o) = (b[0].center(), b[1].center());
    stacked(&b[0], &b[1], cfg) && (a[X] - o[X]).hypot(a[Y] - o[Y]) < cfg.eps
});

relation!(VerticalAlignedLeft, VerticalAlignedLeft, |b, cfg| {
    stacked(&b[0], &b[1], cfg)
        && (b[0].min[X] - b[1].min[X]).abs() < cfg.eps
        && overlap_exceeds(&b[0], &b[1], Y, cfg.alpha)
});

relation!(VerticalAlignedRight, VerticalAlignedRight, |b, cfg| {
    stacked(&b[0], &b[1], cfg)
        && (b[0].max[X] - b[1].max[X]).abs() < cfg.eps
        && overlap_exceeds(&b[0], &b[1], Y, cfg.alpha)
});

relation!(HorizontalAlignedInALine, HorizontalAlignedInALine, |b, cfg| in_a_line(b, X, Y, cfg));

relation!(TouchingAlongX, TouchingAlongX, |b, cfg| {
    (b[0].max[X] - b[1].min[X]).abs() < cfg.eps
        && overlap_exceeds(&b[0], &b[1], Y, cfg.alpha)
        && b[0].overlap_along(&b[1], Z) > 0.0
});

relation!(NearAlongX, NearAlongX, |b, cfg| {
    let gap = b[1].min[X] - b[0].max[X];
    cfg.eps <= gap && gap < cfg.d_near && overlap_exceeds(&b[0], &b[1], Y, cfg.alpha) && same_z_level(&b[0], &b[1], cfg)
});

relation!(FrontOf, FrontOf, |b, cfg| {
    let (a, o) = (&b[0], &b[1]);
    a.max[Y] <= o.min[Y] + cfg.eps
        && (o.min[Y] - a.max[Y]).abs() < cfg.gap
        && overlap_exceeds(a, o, X, cfg.beta)
        && same_z_level(a, o, cfg)
});

relation!(FrontIn, FrontIn, |b, _cfg| b[0].max[Y] < b[1].center()[Y]);

relation!(BackIn, BackIn, |b, _cfg| b[0].min[Y] > b[1].center()[Y]);

relation!(TouchingAlongY, TouchingAlongY, |b, cfg| {
    (b[0].max[Y] - b[1].min[Y]).abs() < cfg.eps
        && overlap_exceeds(&b[0], &b[1], X, cfg.alpha)
        && b[0].overlap_along(&b[1], Z) > 0.0
});

relation!(NearAlongY, NearAlongY, |b, cfg| {
    let gap = b[1].min[Y] - b[0].max[Y];
    cfg.eps <= gap && gap < cfg.d_near && overlap_exceeds(&b[0], &b[1], X, cfg.alpha)
});

relation!(DepthAligned, DepthAligned, |b, cfg| {
    let (a, o) = (&b[0], &b[1]);
    (a.center()[X] - o.center()[X]).abs() < cfg.eps
        || (a.min[X] - o.min[X]).abs() < cfg.eps
        || (a.max[X] - o.max[X]).abs() < cfg.eps
});

relation!(DepthAlignedInALine, DepthAlignedInALine, |b, cfg| in_a_line(b, Y, X, cfg));

relation!(RegularGridSparse, RegularGridSparse, |b, cfg| {
    regular_grid(b, cfg).is_some_and(|g| g.min_gap > cfg.touch_eps)
});

relation!(RegularGridCompact, RegularGridCompact, |b, cfg| {
    regular_grid(b, cfg).is_some_and(|g| g.max_abs_gap <= cfg.touch_eps) && fill_ratio(b) >= cfg.compact_fill
});

relation!(RandomSplitGridSparse, RandomSplitGridSparse, |b, cfg| {
    random_split(b, cfg) && !touch_connected(b, cfg)
});

relation!(RandomSplitGridCompact, RandomSplitGridCompact, |b, cfg| {
    random_split(b, cfg) && touch_connected(b, cfg)
});

/// Blocks on one level, aligned on `cross` and ordered along `along` with
/// regular center spacing.
fn in_a_line(b: &[Box3], along: usize, cross: usize, cfg: &ClassifierConfig) -> bool {
    if b.len() < 3 {
        return false;
    }
    let c: Vec<[f64; 3]> = b.iter().map(|x| x.center()).collect();
    for i in 0..b.len() {
        for j in i + 1..b.len() {
            if (c[i][cross] - c[j][cross]).abs() >= cfg.eps || !same_z_level(&b[i], &b[j], cfg) {
                return false;
            }
        }
    }
    let steps: Vec<f64> = c.windows(2).map(|w| w[1][along] - w[0][along]).collect();
    if steps.iter().any(|s| *s <= 0.0) {
        return false;
    }
    spacing_regular(&steps, cfg.grid_reg_tol)
}

fn spacing_regular(steps: &[f64], tol: f64) -> bool {
    if steps.len() < 2 {
        return true;
    }
    let mean = steps.iter().sum::<f64>() / steps.len() as f64;
    mean > 0.0 && steps.iter().all(|s| (s - mean).abs() / mean < tol)
}

pub(crate) struct GridShape {
    pub min_gap: f64,
    pub max_abs_gap: f64,
}

/// Clusters sorted values whose neighbours are closer than `tol`.
fn cluster_1d(values: &[f64], tol: f64) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mut groups: Vec<Vec<f64>> = Vec::new();
    for x in v {
        match groups.last_mut() {
            Some(g) if x - g[g.len() - 1] < tol => g.push(x),
            _ => groups.push(vec![x]),
        }
    }
    groups.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect()
}

fn similar_size(b: &[Box3], tol: f64) -> bool {
    [X, Y].iter().all(|&k| {
        let lo = b.iter().map(|x| x.extent(k)).fold(f64::INFINITY, f64::min);
        let hi = b.iter().map(|x| x.extent(k)).fold(f64::NEG_INFINITY, f64::max);
        hi <= lo * (1.0 + tol)
    })
}

/// Row/column structure of a regular footprint grid, if there is one.
pub(crate) fn regular_grid(b: &[Box3], cfg: &ClassifierConfig) -> Option<GridShape> {
    if b.len() < 2 || !similar_size(b, cfg.grid_reg_tol) {
        return None;
    }
    if b.iter().any(|x| !same_z_level(x, &b[0], cfg)) {
        return None;
    }
    let centers: Vec<[f64; 3]> = b.iter().map(|x| x.center()).collect();
    let cols = cluster_1d(&centers.iter().map(|c| c[X]).collect::<Vec<_>>(), cfg.eps);
    let rows = cluster_1d(&centers.iter().map(|c| c[Y]).collect::<Vec<_>>(), cfg.eps);
    if cols.len() * rows.len() != b.len() {
        return None;
    }
    let nearest = |v: &[f64], x: f64| {
        v.iter()
            .enumerate()
            .min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    let mut cell: Vec<Option<usize>> = vec![None; b.len()];
    for (i, c) in centers.iter().enumerate() {
        let slot = nearest(&rows, c[Y]) * cols.len() + nearest(&cols, c[X]);
        if cell[slot].is_some() {
            return None;
        }
        cell[slot] = Some(i);
    }
    let col_steps: Vec<f64> = cols.windows(2).map(|w| w[1] - w[0]).collect();
    let row_steps: Vec<f64> = rows.windows(2).map(|w| w[1] - w[0]).collect();
    if !spacing_regular(&col_steps, cfg.grid_reg_tol) || !spacing_regular(&row_steps, cfg.grid_reg_tol) {
        return None;
    }
    let at = |r: usize, c: usize| &b[cell[r * cols.len() + c].expect("grid is complete")];
    let mut min_gap = f64::INFINITY;
    let mut max_abs_gap: f64 = 0.0;
    for r in 0..rows.len() {
        for c in 0..cols.len() {
            if c + 1 < cols.len() {
                let g = at(r, c + 1).min[X] - at(r, c).max[X];
                min_gap = min_gap.min(g);
                max_abs_gap = max_abs_gap.max(g.abs());
            }
            if r + 1 < rows.len() {
                let g = at(r + 1, c).min[Y] - at(r, c).max[Y];
                min_gap = min_gap.min(g);
                max_abs_gap = max_abs_gap.max(g.abs());
            }
        }
    }
    Some(GridShape { min_gap, max_abs_gap })
}

/// Summed footprint area over the area of the joint bounding rectangle.
fn fill_ratio(b: &[Box3]) -> f64 {
    let lo = |k: usize| b.iter().map(|x| x.min[k]).fold(f64::INFINITY, f64::min);
    let hi = |k: usize| b.iter().map(|x| x.max[k]).fold(f64::NEG_INFINITY, f64::max);
    let bbox = (hi(X) - lo(X)) * (hi(Y) - lo(Y));
    let area: f64 = b.iter().map(|x| x.extent(X) * x.extent(Y)).sum();
    if bbox > 0.0 {
        area / bbox
    } else {
        0.0
    }
}

fn random_split(b: &[Box3], cfg: &ClassifierConfig) -> bool {
    if b.len() < 2 || b.iter().any(|x| !same_z_level(x, &b[0], cfg)) {
        return false;
    }
    for i in 0..b.len() {
        for j in i + 1..b.len() {
            if b[i].overlap_along(&b[j], X) * b[i].overlap_along(&b[j], Y) > cfg.eps * cfg.eps {
                return false;
            }
        }
    }
    fill_ratio(b) >= cfg.random_fill && regular_grid(b, cfg).is_none()
}

/// Whether the footprints form one component under side contact.
fn touch_connected(b: &[Box3], cfg: &ClassifierConfig) -> bool {
    let touches = |p: &Box3, q: &Box3| {
        let along = |k: usize, o: usize| {
            ((p.max[k] - q.min[k]).abs() < cfg.touch_eps || (q.max[k] - p.min[k]).abs() < cfg.touch_eps)
                && p.overlap_along(q, o) > 0.0
        };
        along(X, Y) || along(Y, X)
    };
    let mut seen = vec![false; b.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..b.len() {
            if !seen[j] && touches(&b[i], &b[j]) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.iter().all(|s| *s)
}

/// Name-indexed collection of classifiers.
pub struct RelationRegistry {
    entries: Vec<Box<dyn GeometricRelation>>,
}

impl RelationRegistry {
    pub fn empty() -> Self {
        RelationRegistry { entries: Vec::new() }
    }

    /// All 24 relations in declaration order.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(LeftOf));
        r.register(Box::new(LeftIn));
        r.register(Box::new(RightIn));
        r.register(Box::new(CenterIn));
        r.register(Box::new(SupportedByPartially));
        r.register(Box::new(SupportedByFully));
        r.register(Box::new(HorizontalAligned));
        r.register(Box::new(VerticalAlignedCentroid));
        r.register(Box::new(VerticalAlignedLeft));
        r.register(Box::new(VerticalAlignedRight));
        r.register(Box::new(HorizontalAlignedInALine));
        r.register(Box::new(TouchingAlongX));
        r.register(Box::new(NearAlongX));
        r.register(Box::new(FrontOf));
        r.register(Box::new(FrontIn));
        r.register(Box::new(BackIn));
        r.register(Box::new(TouchingAlongY));
        r.register(Box::new(NearAlongY));
        r.register(Box::new(DepthAligned));
        r.register(Box::new(DepthAlignedInALine));
        r.register(Box::new(RegularGridSparse));
        r.register(Box::new(RegularGridCompact));
        r.register(Box::new(RandomSplitGridSparse));
        r.register(Box::new(RandomSplitGridCompact));
        r
    }

    /// Adds a classifier, replacing any previous one of the same kind.
    pub fn register(&mut self, rel: Box<dyn GeometricRelation>) {
        self.entries.retain(|e| e.kind() != rel.kind());
        self.entries.push(rel);
    }

    pub fn get(&self, kind: RelationKind) -> Option<&dyn GeometricRelation> {
        self.entries.iter().find(|e| e.kind() == kind).map(|e| e.as_ref())
    }

    pub fn by_name(&self, name: &str) -> Option<&dyn GeometricRelation> {
        self.entries.iter().find(|e| e.name() == name).map(|e| e.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn GeometricRelation> {
        self.entries.iter().map(|e| e.as_ref())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Default for RelationRegistry {
    fn default() -> Self {
        Self::standard()
    }
}
