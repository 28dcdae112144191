//! Geometric relations, relation graphs and graph extraction.

pub mod classifiers;

use crate::geometry::{BlockId, BlockLibrary, Box3, Scene};
use crate::patterns::PatternInstance;
use crate::sketchio::Sketch;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::OnceLock;

pub use classifiers::{GeometricRelation, RelationRegistry};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RelationError {
    #[error("{rel} expects {expected} operands, got {got}")]
    Arity { rel: RelationKind, expected: String, got: usize },
    #[error("relation operand {0} has no block in the scene")]
    Mapping(BlockId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    /// Front view.
    XZ,
    /// Top-down view.
    XY,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arity {
    Fixed(usize),
    Variadic { min: usize },
}

impl Arity {
    pub fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Fixed(k) => n == k,
            Arity::Variadic { min } => n >= min,
        }
    }
}

/// How operand tuples of a relation are formed during extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperandForm {
    /// `(block, table)`.
    TableRelative,
    /// `(upper, lower)` where lower may be the table.
    Support,
    /// Unordered pair, stored with the smaller id first.
    SymmetricPair,
    OrderedPair,
    Group,
}

macro_rules! relation_kinds {
    ($($variant:ident => $name:literal, $plane:ident, $arity:expr, $form:ident;)*) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum RelationKind {
            $($variant,)*
        }

        impl RelationKind {
            pub const ALL: [RelationKind; 24] = [$(RelationKind::$variant,)*];

            pub fn name(self) -> &'static str {
                match self { $(RelationKind::$variant => $name,)* }
            }

            pub fn plane(self) -> Plane {
                match self { $(RelationKind::$variant => Plane::$plane,)* }
            }

            pub fn arity(self) -> Arity {
                match self { $(RelationKind::$variant => $arity,)* }
            }

            pub fn operand_form(self) -> OperandForm {
                match self { $(RelationKind::$variant => OperandForm::$form,)* }
            }

            pub fn from_name(name: &str) -> Option<RelationKind> {
                match name { $($name => Some(RelationKind::$variant),)* _ => None }
            }
        }
    };
}

const PAIR: Arity = Arity::Fixed(2);
const LINE: Arity = Arity::Variadic { min: 3 };
const GRID: Arity = Arity::Variadic { min: 2 };

relation_kinds! {
    LeftOf => "left-of", XZ, PAIR, OrderedPair;
    LeftIn => "left-in", XZ, PAIR, TableRelative;
    RightIn => "right-in", XZ, PAIR, TableRelative;
    CenterIn => "center-in", XZ, PAIR, TableRelative;
    SupportedByPartially => "supported-by-partially", XZ, PAIR, Support;
    SupportedByFully => "supported-by-fully", XZ, PAIR, Support;
    HorizontalAligned => "horizontal-aligned", XZ, PAIR, SymmetricPair;
    VerticalAlignedCentroid => "vertical-aligned-centroid", XZ, PAIR, OrderedPair;
    VerticalAlignedLeft => "vertical-aligned-left", XZ, PAIR, OrderedPair;
    VerticalAlignedRight => "vertical-aligned-right", XZ, PAIR, OrderedPair;
    HorizontalAlignedInALine => "horizontal-aligned-in-a-line", XZ, LINE, Group;
    TouchingAlongX => "touching-along-x", XZ, PAIR, OrderedPair;
    NearAlongX => "near-along-x", XZ, PAIR, OrderedPair;
    FrontOf => "front-of", XY, PAIR, OrderedPair;
    FrontIn => "front-in", XY, PAIR, TableRelative;
    BackIn => "back-in", XY, PAIR, TableRelative;
    TouchingAlongY => "touching-along-y", XY, PAIR, OrderedPair;
    NearAlongY => "near-along-y", XY, PAIR, OrderedPair;
    DepthAligned => "depth-aligned", XY, PAIR, SymmetricPair;
    DepthAlignedInALine => "depth-aligned-in-a-line", XY, LINE, Group;
    RegularGridSparse => "regular-grid-sparse", XY, GRID, Group;
    RegularGridCompact => "regular-grid-compact", XY, GRID, Group;
    RandomSplitGridSparse => "random-split-grid-sparse", XY, GRID, Group;
    RandomSplitGridCompact => "random-split-grid-compact", XY, GRID, Group;
}

impl RelationKind {
    pub fn front_view() -> impl Iterator<Item = RelationKind> {
        Self::ALL.into_iter().filter(|k| k.plane() == Plane::XZ)
    }

    pub fn is_variadic(self) -> bool {
        matches!(self.arity(), Arity::Variadic { .. })
    }

    pub fn is_support(self) -> bool {
        matches!(self, RelationKind::SupportedByFully | RelationKind::SupportedByPartially)
    }
}

impl std::fmt::Display for RelationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Thresholds shared by all classifiers, in scene units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub eps: f64,
    pub gap: f64,
    pub alpha: f64,
    pub beta: f64,
    pub d_near: f64,
    pub touch_eps: f64,
    /// Relative spacing (and size) deviation still counted as regular.
    pub grid_reg_tol: f64,
    pub compact_fill: f64,
    pub random_fill: f64,
    /// Depth range given to front-view boxes, which carry no depth.
    pub front_depth: [f64; 2],
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            eps: 0.02,
            gap: 0.30,
            alpha: 0.5,
            beta: 0.5,
            d_near: 0.25,
            touch_eps: 0.02,
            grid_reg_tol: 0.10,
            compact_fill: 0.95,
            random_fill: 0.90,
            front_depth: [-1.0, 1.0],
        }
    }
}

impl ClassifierConfig {
    /// 3D box of a front-view rectangle, spanning the full workspace depth.
    pub fn front_box(&self, cx: f64, cz: f64, w: f64, h: f64) -> Box3 {
        Box3 {
            min: [cx - w / 2.0, self.front_depth[0], cz - h / 2.0],
            max: [cx + w / 2.0, self.front_depth[1], cz + h / 2.0],
        }
    }

    /// Front-view projection of a 3D box.
    pub fn project_front(&self, b: &Box3) -> Box3 {
        Box3 { min: [b.min[0], self.front_depth[0], b.min[2]], max: [b.max[0], self.front_depth[1], b.max[2]] }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationEdge {
    pub rel: RelationKind,
    pub operands: Vec<BlockId>,
}

impl RelationEdge {
    pub fn new(rel: RelationKind, operands: Vec<BlockId>) -> Self {
        RelationEdge { rel, operands }
    }

    pub fn pair(rel: RelationKind, a: BlockId, b: BlockId) -> Self {
        RelationEdge { rel, operands: vec![a, b] }
    }

    pub fn involves(&self, id: BlockId) -> bool {
        self.operands.contains(&id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: BlockId,
    pub type_id: u32,
    #[serde(default)]
    pub hidden: bool,
}

/// Blocks with their types plus geometric edges and stability-pattern
/// instances. The table is implicit and appears only as an operand.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationGraph {
    pub nodes: Vec<GraphNode>,
    pub geom_edges: Vec<RelationEdge>,
    #[serde(default)]
    pub stab_edges: Vec<PatternInstance>,
}

impl RelationGraph {
    pub fn node(&self, id: BlockId) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn has_edge(&self, e: &RelationEdge) -> bool {
        self.geom_edges.binary_search(e).is_ok()
    }

    pub fn add_edge(&mut self, e: RelationEdge) -> bool {
        match self.geom_edges.binary_search(&e) {
            Ok(_) => false,
            Err(pos) => {
                self.geom_edges.insert(pos, e);
                true
            }
        }
    }

    pub fn remove_edge(&mut self, e: &RelationEdge) -> bool {
        match self.geom_edges.binary_search(e) {
            Ok(pos) => {
                self.geom_edges.remove(pos);
                true
            }
            Err(_) => false,
        }
    }

    pub fn add_node(&mut self, n: GraphNode) {
        if self.node(n.id).is_none() {
            self.nodes.push(n);
            self.nodes.sort_by_key(|n| n.id);
        }
    }

    pub fn edges_of(&self, kind: RelationKind) -> impl Iterator<Item = &RelationEdge> {
        self.geom_edges.iter().filter(move |e| e.rel == kind)
    }

    /// Checks the structural invariants: sorted unique edges, valid arities,
    /// distinct operands and operands that are nodes or the table.
    pub fn check(&self) -> Result<(), String> {
        if self.geom_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err("edges not sorted or duplicated".into());
        }
        for e in &self.geom_edges {
            if !e.rel.arity().accepts(e.operands.len()) {
                return Err(format!("bad arity for {e:?}"));
            }
            for (i, o) in e.operands.iter().enumerate() {
                if e.operands[..i].contains(o) {
                    return Err(format!("repeated operand in {e:?}"));
                }
                if !o.is_table() && self.node(*o).is_none() {
                    return Err(format!("operand {o} of {e:?} is not a node"));
                }
            }
        }
        Ok(())
    }
}

fn registry() -> &'static RelationRegistry {
    static REG: OnceLock<RelationRegistry> = OnceLock::new();
    REG.get_or_init(RelationRegistry::standard)
}

/// Evaluates one relation on operand boxes.
pub fn eval_geom(rel: RelationKind, operands: &[Box3], cfg: &ClassifierConfig) -> Result<bool, RelationError> {
    if !rel.arity().accepts(operands.len()) {
        let expected = match rel.arity() {
            Arity::Fixed(k) => k.to_string(),
            Arity::Variadic { min } => format!("at least {min}"),
        };
        return Err(RelationError::Arity { rel, expected, got: operands.len() });
    }
    let classifier = registry().get(rel).expect("standard registry covers every kind");
    Ok(classifier.holds(operands, cfg))
}

/// Largest block count per level for exhaustive group enumeration.
const MAX_GROUP_POOL: usize = 14;

fn order_group(kind: RelationKind, members: &mut [(BlockId, Box3)]) {
    let key = |b: &Box3| -> (f64, f64) {
        let c = b.center();
        match kind {
            RelationKind::HorizontalAlignedInALine => (c[0], c[1]),
            RelationKind::DepthAlignedInALine => (c[1], c[0]),
            _ => (c[1], c[0]),
        }
    };
    members.sort_by(|a, b| {
        let (ka, kb) = (key(&a.1), key(&b.1));
        ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(a.0.cmp(&b.0))
    });
}

/// Maximal groups of blocks on one level for which `kind` holds.
fn group_edges(kind: RelationKind, nodes: &[(BlockId, Box3)], cfg: &ClassifierConfig) -> Vec<RelationEdge> {
    let min = match kind.arity() {
        Arity::Variadic { min } => min,
        Arity::Fixed(_) => return Vec::new(),
    };
    // Level pools: chains of base heights closer than eps.
    let mut by_z: Vec<&(BlockId, Box3)> = nodes.iter().collect();
    by_z.sort_by(|a, b| a.1.min[2].total_cmp(&b.1.min[2]).then(a.0.cmp(&b.0)));
    let mut pools: Vec<Vec<(BlockId, Box3)>> = Vec::new();
    for n in by_z {
        match pools.last_mut() {
            Some(p) if n.1.min[2] - p[p.len() - 1].1.min[2] < cfg.eps => p.push(*n),
            _ => pools.push(vec![*n]),
        }
    }
    let classifier = registry().get(kind).expect("registered");
    let mut out = Vec::new();
    for pool in pools.into_iter().filter(|p| p.len() >= min) {
        let m = pool.len();
        let mut accepted: Vec<u32> = Vec::new();
        if m > MAX_GROUP_POOL {
            let mut members = pool.clone();
            order_group(kind, &mut members);
            let boxes: Vec<Box3> = members.iter().map(|m| m.1).collect();
            if classifier.holds(&boxes, cfg) {
                out.push(RelationEdge::new(kind, members.iter().map(|m| m.0).collect()));
            }
            continue;
        }
        let mut masks: Vec<u32> = (1u32..(1 << m)).filter(|s| s.count_ones() as usize >= min).collect();
        masks.sort_by(|a, b| b.count_ones().cmp(&a.count_ones()).then(a.cmp(b)));
        for mask in masks {
            if accepted.iter().any(|acc| acc & mask == mask) {
                continue;
            }
            let mut members: Vec<(BlockId, Box3)> =
                (0..m).filter(|i| mask & (1 << i) != 0).map(|i| pool[i]).collect();
            order_group(kind, &mut members);
            let boxes: Vec<Box3> = members.iter().map(|m| m.1).collect();
            if classifier.holds(&boxes, cfg) {
                accepted.push(mask);
                out.push(RelationEdge::new(kind, members.iter().map(|m| m.0).collect()));
            }
        }
    }
    out
}

/// Evaluates `kinds` over every operand tuple of `nodes` (plus the table
/// where a relation refers to it). Output is sorted and duplicate-free.
pub fn extract_edges(
    nodes: &[(BlockId, Box3)],
    table: &Box3,
    kinds: &[RelationKind],
    cfg: &ClassifierConfig,
) -> Vec<RelationEdge> {
    let mut edges = Vec::new();
    for &kind in kinds {
        let classifier = registry().get(kind).expect("registered");
        match kind.operand_form() {
            OperandForm::TableRelative => {
                for (id, b) in nodes {
                    if classifier.holds(&[*b, *table], cfg) {
                        edges.push(RelationEdge::pair(kind, *id, BlockId::TABLE));
                    }
                }
            }
            OperandForm::Support => {
                for (id, b) in nodes {
                    if classifier.holds(&[*b, *table], cfg) {
                        edges.push(RelationEdge::pair(kind, *id, BlockId::TABLE));
                    }
                    for (jd, c) in nodes {
                        if id != jd && classifier.holds(&[*b, *c], cfg) {
                            edges.push(RelationEdge::pair(kind, *id, *jd));
                        }
                    }
                }
            }
            OperandForm::SymmetricPair => {
                for (i, (id, b)) in nodes.iter().enumerate() {
                    for (jd, c) in &nodes[i + 1..] {
                        if classifier.holds(&[*b, *c], cfg) {
                            let (lo, hi) = if id < jd { (*id, *jd) } else { (*jd, *id) };
                            edges.push(RelationEdge::pair(kind, lo, hi));
                        }
                    }
                }
            }
            OperandForm::OrderedPair => {
                for (id, b) in nodes {
                    for (jd, c) in nodes {
                        if id != jd && classifier.holds(&[*b, *c], cfg) {
                            edges.push(RelationEdge::pair(kind, *id, *jd));
                        }
                    }
                }
            }
            OperandForm::Group => edges.extend(group_edges(kind, nodes, cfg)),
        }
    }
    edges.sort();
    edges.dedup();
    edges
}

/// Front-view relation graph of a sketch. Boxes span the full depth.
pub fn extract_frontview_graph(sketch: &Sketch, cfg: &ClassifierConfig) -> RelationGraph {
    let mut nodes: Vec<GraphNode> =
        sketch.boxes.iter().map(|b| GraphNode { id: b.id, type_id: b.type_id, hidden: false }).collect();
    nodes.sort_by_key(|n| n.id);
    if sketch.boxes.is_empty() {
        return RelationGraph { nodes, ..Default::default() };
    }
    let boxes: Vec<(BlockId, Box3)> =
        sketch.boxes.iter().map(|b| (b.id, cfg.front_box(b.cx, b.cz, b.w_hat, b.h_hat))).collect();
    let table = cfg.project_front(&sketch.library.table_box());
    let kinds: Vec<RelationKind> = RelationKind::front_view().collect();
    RelationGraph { nodes, geom_edges: extract_edges(&boxes, &table, &kinds, cfg), stab_edges: Vec::new() }
}

/// All 24 relations over the 3D boxes of a scene.
pub fn extract_scene_graph(scene: &Scene, cfg: &ClassifierConfig) -> RelationGraph {
    extract_scene_graph_with(scene, &RelationKind::ALL, cfg)
}

pub fn extract_scene_graph_with(scene: &Scene, kinds: &[RelationKind], cfg: &ClassifierConfig) -> RelationGraph {
    let mut nodes: Vec<GraphNode> =
        scene.blocks.iter().map(|b| GraphNode { id: b.id, type_id: b.type_id, hidden: b.hidden }).collect();
    nodes.sort_by_key(|n| n.id);
    let mut boxes = scene.boxes();
    boxes.sort_by_key(|b| b.0);
    let table = scene.library.table_box();
    RelationGraph { nodes, geom_edges: extract_edges(&boxes, &table, kinds, cfg), stab_edges: Vec::new() }
}

/// Front-view graph of a scene: blocks projected onto the x-z plane.
pub fn extract_scene_frontview_graph(scene: &Scene, cfg: &ClassifierConfig) -> RelationGraph {
    let mut nodes: Vec<GraphNode> =
        scene.blocks.iter().map(|b| GraphNode { id: b.id, type_id: b.type_id, hidden: b.hidden }).collect();
    nodes.sort_by_key(|n| n.id);
    let mut boxes: Vec<(BlockId, Box3)> = scene.boxes().into_iter().map(|(id, b)| (id, cfg.project_front(&b))).collect();
    boxes.sort_by_key(|b| b.0);
    let table = cfg.project_front(&scene.library.table_box());
    let kinds: Vec<RelationKind> = RelationKind::front_view().collect();
    RelationGraph { nodes, geom_edges: extract_edges(&boxes, &table, &kinds, cfg), stab_edges: Vec::new() }
}

/// Fraction of the front-view edges of `sketch_graph` that still hold on
/// the front-view projection of `scene`. Returns 1 when there are none.
pub fn resemblance(sketch_graph: &RelationGraph, scene: &Scene, cfg: &ClassifierConfig) -> Result<f64, RelationError> {
    let mut front: BTreeMap<BlockId, Box3> =
        scene.boxes().into_iter().map(|(id, b)| (id, cfg.project_front(&b))).collect();
    front.insert(BlockId::TABLE, cfg.project_front(&scene.library.table_box()));
    let mut total = 0usize;
    let mut satisfied = 0usize;
    for e in sketch_graph.geom_edges.iter().filter(|e| e.rel.plane() == Plane::XZ) {
        let boxes = e
            .operands
            .iter()
            .map(|o| front.get(o).copied().ok_or(RelationError::Mapping(*o)))
            .collect::<Result<Vec<_>, _>>()?;
        total += 1;
        if eval_geom(e.rel, &boxes, cfg)? {
            satisfied += 1;
        }
    }
    Ok(if total == 0 { 1.0 } else { satisfied as f64 / total as f64 })
}

/// Node list for a graph over a scene's blocks.
pub fn nodes_of(scene: &Scene) -> Vec<GraphNode> {
    let mut nodes: Vec<GraphNode> =
        scene.blocks.iter().map(|b| GraphNode { id: b.id, type_id: b.type_id, hidden: b.hidden }).collect();
    nodes.sort_by_key(|n| n.id);
    nodes
}

pub fn type_dims(lib: &BlockLibrary, type_id: u32) -> [f64; 3] {
    lib.get(type_id).map(|t| t.dims).unwrap_or([0.0; 3])
}
