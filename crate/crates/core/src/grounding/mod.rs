//! Iterative grounding of a relation graph.
//!
//! Each round samples poses for the current graph, splits the result into
//! stability-pattern instances and checks them. Unstable instances are
//! repaired by rewriting the graph, usually by inserting a hidden support,
//! and the grown graph is sampled again.

use crate::geometry::{BlockId, BlockInstance, BlockLibrary, Box3, Scene};
use crate::patterns::{decompose, eval_pattern, support_closure, PatternInstance, PatternKind};
use crate::relations::{extract_scene_graph, resemblance, type_dims, GraphNode, RelationEdge, RelationGraph, RelationKind};
use crate::sampler::{sample_composed, sample_composed_chains, ModelSet, SamplerConfig, SamplerError};
use crate::stability::{is_feasible, surviving_fraction_with, StabilityConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, thiserror::Error)]
pub enum GroundingError {
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("no repair rule applies to {0:?}")]
    RepairExhausted(PatternInstance),
    #[error("graph: {0}")]
    Graph(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingConfig {
    /// Sampling rounds; 0 behaves like 1 with no repair.
    pub max_iters: usize,
    /// Candidate deltas tried per unstable instance per round.
    pub repair_budget: usize,
    /// Chains sampled when checking a candidate delta locally.
    pub local_chains: usize,
    pub sampler: SamplerConfig,
    pub stability: StabilityConfig,
    /// Drops every sampled block onto the highest surface below it.
    pub settle: bool,
    /// Smallest footprint overlap, per axis, that counts as resting on.
    pub settle_overlap: f64,
    /// How far a block may be lifted out of a surface it sank into.
    pub settle_lift: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig {
            max_iters: 5,
            repair_budget: 3,
            local_chains: 4,
            sampler: SamplerConfig::default(),
            stability: StabilityConfig::default(),
            settle: true,
            settle_overlap: 0.03,
            settle_lift: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepairAction {
    RelaxRelation,
    PromotePattern,
    ExtendPattern,
}

/// Where a hidden block goes relative to its anchor base block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Directly behind the anchor, touching it along y.
    Behind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairRule {
    pub name: String,
    pub source: PatternKind,
    pub action: RepairAction,
    pub target: PatternKind,
    /// Hidden blocks added, each of its anchor base block's type.
    pub hidden: usize,
    pub placement: Placement,
    /// Support relation from the top tier onto the hidden block.
    pub support: RelationKind,
}

/// The repair rules in application order: relax before promote before
/// extend.
pub fn standard_rules() -> Vec<RepairRule> {
    let rule = |name: &str, source, action, target, hidden, support| RepairRule {
        name: name.to_string(),
        source,
        action,
        target,
        hidden,
        placement: Placement::Behind,
        support,
    };
    use PatternKind::*;
    use RepairAction::*;
    vec![
        rule("relax-stack", SingleBlockStack, RelaxRelation, CantileverWithCounterbalance, 0, RelationKind::SupportedByPartially),
        rule("stack-to-bridge", SingleBlockStack, PromotePattern, TwoPillarSingleTopBridge, 1, RelationKind::SupportedByFully),
        rule("cantilever-to-arc", CantileverWithCounterbalance, PromotePattern, BasicArc, 1, RelationKind::SupportedByPartially),
        rule("extend-two-pillar", TwoPillarSingleTopBridge, ExtendPattern, NPillarSingleTopBridge, 1, RelationKind::SupportedByFully),
        rule("extend-n-pillar", NPillarSingleTopBridge, ExtendPattern, NPillarSingleTopBridge, 1, RelationKind::SupportedByFully),
    ]
}

/// Graph rewrite proposed for one unstable instance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphDelta {
    pub rule: String,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<RelationEdge>,
    /// `(old, new)` pairs of relaxed edges.
    pub relaxed: Vec<(RelationEdge, RelationEdge)>,
}

impl GraphDelta {
    pub fn apply(&self, graph: &mut RelationGraph) {
        for (old, new) in &self.relaxed {
            graph.remove_edge(old);
            graph.add_edge(new.clone());
        }
        for n in &self.nodes {
            graph.add_node(n.clone());
        }
        for e in &self.edges {
            graph.add_edge(e.clone());
        }
    }
}

fn support_edge(graph: &RelationGraph, upper: BlockId, lower: BlockId) -> Option<&RelationEdge> {
    graph.geom_edges.iter().find(|e| e.rel.is_support() && e.operands[0] == upper && e.operands[1] == lower)
}

/// Candidate deltas for an unstable instance in rule order, then by
/// anchor block id. `next_id` is the first free block id.
pub fn repair_candidates(inst: &PatternInstance, graph: &RelationGraph, rules: &[RepairRule], next_id: BlockId) -> Vec<GraphDelta> {
    let mut out = Vec::new();
    for rule in rules.iter().filter(|r| r.source == inst.pattern) {
        match rule.action {
            RepairAction::RelaxRelation => {
                let mut d = GraphDelta { rule: rule.name.clone(), ..Default::default() };
                for &t in &inst.top_ids {
                    for &b in &inst.base_ids {
                        if let Some(e) = support_edge(graph, t, b) {
                            if e.rel != rule.support {
                                d.relaxed.push((e.clone(), RelationEdge::pair(rule.support, t, b)));
                            }
                        }
                    }
                }
                if !d.relaxed.is_empty() {
                    out.push(d);
                }
            }
            RepairAction::PromotePattern | RepairAction::ExtendPattern => {
                for &anchor in &inst.base_ids {
                    let Some(node) = graph.node(anchor) else { continue };
                    let mut d = GraphDelta { rule: rule.name.clone(), ..Default::default() };
                    for k in 0..rule.hidden {
                        let id = BlockId(next_id.0 + k as i64);
                        d.nodes.push(GraphNode { id, type_id: node.type_id, hidden: true });
                        d.edges.push(RelationEdge::pair(RelationKind::FrontOf, anchor, id));
                        d.edges.push(RelationEdge::pair(RelationKind::DepthAligned, anchor, id));
                        for &t in &inst.top_ids {
                            d.edges.push(RelationEdge::pair(rule.support, t, id));
                        }
                        // The hidden block stands on whatever holds its anchor.
                        for e in graph.geom_edges.iter().filter(|e| e.rel.is_support() && e.operands[0] == anchor) {
                            d.edges.push(RelationEdge::pair(e.rel, id, e.operands[1]));
                        }
                    }
                    out.push(d);
                }
            }
        }
    }
    out
}

/// Whether a delta leaves the repaired instance valid under its target
/// pattern.
pub fn delta_valid(inst: &PatternInstance, delta: &GraphDelta, graph: &RelationGraph, rules: &[RepairRule]) -> bool {
    let Some(rule) = rules.iter().find(|r| r.name == delta.rule) else { return false };
    let mut g = graph.clone();
    delta.apply(&mut g);
    let mut base = inst.base_ids.clone();
    base.extend(delta.nodes.iter().map(|n| n.id));
    eval_pattern(rule.target, &base, &inst.top_ids, &g).unwrap_or(false)
}

/// Stable placement: blocks in order of increasing base height drop onto
/// the highest surface below them, or are lifted out of one they sank
/// into by at most `lift`.
pub fn settle(scene: &Scene, overlap: f64, lift: f64) -> Scene {
    let mut out = scene.clone();
    let mut order: Vec<usize> = (0..out.blocks.len()).collect();
    let boxes: Vec<Box3> = out.blocks.iter().map(|b| scene.box_of(b.id).expect("scene block")).collect();
    order.sort_by(|&a, &b| boxes[a].min[2].total_cmp(&boxes[b].min[2]).then(out.blocks[a].id.cmp(&out.blocks[b].id)));
    let mut placed: Vec<Box3> = Vec::new();
    for i in order {
        let b = boxes[i];
        let mut floor: f64 = 0.0;
        for p in &placed {
            let ox = b.overlap_along(p, 0);
            let oy = b.overlap_along(p, 1);
            if ox > overlap && oy > overlap && p.max[2] <= b.min[2] + lift {
                floor = floor.max(p.max[2]);
            }
        }
        let dz = floor - b.min[2];
        out.blocks[i].centroid[2] += dz;
        placed.push(b.translated([0.0, 0.0, dz]));
    }
    out
}

fn scene_from(ids: &[BlockId], centroids: &[[f64; 3]], graph: &RelationGraph, lib: &BlockLibrary, cfg: &GroundingConfig) -> Scene {
    let blocks = ids
        .iter()
        .zip(centroids)
        .map(|(id, c)| {
            let n = graph.node(*id).expect("sampled block is a node");
            BlockInstance { id: *id, type_id: n.type_id, centroid: *c, hidden: n.hidden }
        })
        .collect();
    let mut s = Scene::with_blocks(lib.clone(), blocks);
    s.bounds = cfg.sampler.bounds;
    if cfg.settle {
        s = settle(&s, cfg.settle_overlap, cfg.settle_lift);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub instance: PatternInstance,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairRecord {
    pub instance: PatternInstance,
    /// Rule of the accepted delta, if any.
    pub rule: Option<String>,
    pub candidates_tried: usize,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub seed: u64,
    pub nodes: usize,
    pub edges: usize,
    pub verdicts: Vec<Verdict>,
    pub feasible: bool,
    pub surviving_fraction: f64,
    pub resemblance: f64,
    pub repairs: Vec<RepairRecord>,
    /// Graph changes applied after this round.
    pub added_nodes: Vec<GraphNode>,
    pub added_edges: Vec<RelationEdge>,
    pub relaxed: Vec<(RelationEdge, RelationEdge)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingOutcome {
    pub graph: RelationGraph,
    pub scene: Scene,
    pub success: bool,
    /// Set when every unstable instance of some round had no repair.
    pub exhausted: bool,
    pub best_iteration: usize,
    pub trace: Vec<IterationTrace>,
}

impl GroundingOutcome {
    pub fn hidden_blocks(&self) -> usize {
        self.scene.blocks.iter().filter(|b| b.hidden).count()
    }
}

struct Round {
    scene: Scene,
    verdicts: Vec<Verdict>,
    feasible: bool,
    surviving: f64,
    resemblance: f64,
}

fn evaluate(scene: Scene, sketch: &RelationGraph, cfg: &GroundingConfig) -> Round {
    let geom = extract_scene_graph(&scene, &cfg.sampler.classifier);
    let verdicts: Vec<Verdict> = decompose(&geom, &scene)
        .into_iter()
        .filter(|d| d.instance.pattern != PatternKind::Unmatched)
        .map(|d| Verdict { feasible: is_feasible(&d.scene, &cfg.stability), instance: d.instance })
        .collect();
    let global = is_feasible(&scene, &cfg.stability);
    let feasible = global && verdicts.iter().all(|v| v.feasible);
    let surviving = if global { 1.0 } else { surviving_fraction_with(&scene, &cfg.stability) };
    let resemblance = resemblance(sketch, &scene.visible(), &cfg.sampler.classifier).unwrap_or(0.0);
    Round { scene, verdicts, feasible, surviving, resemblance }
}

/// Pose of a hidden block directly behind `anchor`, touching it along y.
pub fn place_behind(anchor: &BlockInstance, hidden_type: u32, lib: &BlockLibrary, bounds: &crate::geometry::Bounds) -> [f64; 3] {
    let da = type_dims(lib, anchor.type_id);
    let dh = type_dims(lib, hidden_type);
    let mut c = [anchor.centroid[0], anchor.centroid[1] + (da[1] + dh[1]) / 2.0, anchor.centroid[2] - da[2] / 2.0 + dh[2] / 2.0];
    bounds.clamp_centroid(&mut c, dh);
    c
}

/// Checks a delta on the instance's supports-closed sub-scene. The hidden
/// blocks first go directly behind their anchors; failing that, the
/// instance subgraph plus the delta is re-sampled and moved so its base
/// tier sits where it does in `scene`. Returns the hidden blocks of the
/// first feasible placement.
#[allow(clippy::too_many_arguments)]
fn local_check(
    inst: &PatternInstance,
    delta: &GraphDelta,
    graph: &RelationGraph,
    scene: &Scene,
    lib: &BlockLibrary,
    models: &ModelSet,
    cfg: &GroundingConfig,
    seed: u64,
) -> Result<Option<Vec<BlockInstance>>, GroundingError> {
    let inst_ids: Vec<BlockId> = inst.blocks().collect();
    let closure = support_closure(&extract_scene_graph(scene, &cfg.sampler.classifier), &inst_ids);
    let hidden_ids: Vec<BlockId> = delta.nodes.iter().map(|n| n.id).collect();
    let feasible = |extra: Vec<BlockInstance>, moved: &[(BlockId, [f64; 3])]| -> Option<Vec<BlockInstance>> {
        let mut trial = scene.restricted(&closure);
        for (id, c) in moved {
            if let Some(b) = trial.blocks.iter_mut().find(|b| b.id == *id) {
                b.centroid = *c;
            }
        }
        trial.blocks.extend(extra);
        if cfg.settle {
            trial = settle(&trial, cfg.settle_overlap, cfg.settle_lift);
        }
        is_feasible(&trial, &cfg.stability).then(|| trial.blocks.into_iter().filter(|b| hidden_ids.contains(&b.id)).collect())
    };

    // Anchor of each hidden block: the visible block its front-of edge names.
    let behind: Option<Vec<BlockInstance>> = delta
        .nodes
        .iter()
        .map(|n| {
            let e = delta.edges.iter().find(|e| e.rel == RelationKind::FrontOf && e.operands[1] == n.id)?;
            let anchor = scene.block(e.operands[0])?;
            Some(BlockInstance { id: n.id, type_id: n.type_id, centroid: place_behind(anchor, n.type_id, lib, &scene.bounds), hidden: true })
        })
        .collect();
    if let Some(extra) = behind {
        if let Some(found) = feasible(extra, &[]) {
            return Ok(Some(found));
        }
    }
    if delta.nodes.is_empty() {
        return Ok(None);
    }

    let mut g = graph.clone();
    delta.apply(&mut g);
    let mut keep: BTreeSet<BlockId> = inst_ids.iter().copied().collect();
    keep.extend(hidden_ids.iter().copied());
    let sub = RelationGraph {
        nodes: g.nodes.iter().filter(|n| keep.contains(&n.id)).cloned().collect(),
        geom_edges: g.geom_edges.iter().filter(|e| e.operands.iter().all(|o| keep.contains(o) || o.is_table())).cloned().collect(),
        stab_edges: Vec::new(),
    };
    let scfg = SamplerConfig { seed, ..cfg.sampler.clone() };
    let samples = sample_composed_chains(&sub, lib, models, &scfg, cfg.local_chains.max(1))?;
    let anchor: Vec<[f64; 3]> = inst.base_ids.iter().filter_map(|id| scene.block(*id).map(|b| b.centroid)).collect();
    for s in samples {
        let mut shift = [0.0; 3];
        for (id, c) in s.ids.iter().zip(&s.centroids) {
            if let Some(k) = inst.base_ids.iter().position(|b| b == id) {
                for d in 0..3 {
                    shift[d] += (anchor[k][d] - c[d]) / anchor.len() as f64;
                }
            }
        }
        let mut moved = Vec::new();
        let mut extra = Vec::new();
        for (id, c) in s.ids.iter().zip(&s.centroids) {
            let mut p = [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]];
            match delta.nodes.iter().find(|n| n.id == *id) {
                Some(n) => {
                    scene.bounds.clamp_centroid(&mut p, type_dims(lib, n.type_id));
                    extra.push(BlockInstance { id: *id, type_id: n.type_id, centroid: p, hidden: true });
                }
                None => moved.push((*id, p)),
            }
        }
        if let Some(found) = feasible(extra, &moved) {
            return Ok(Some(found));
        }
    }
    Ok(None)
}

fn better(a: &Round, b: &Round) -> bool {
    (a.feasible, a.surviving, a.resemblance) > (b.feasible, b.surviving, b.resemblance)
}

fn run(sketch: &RelationGraph, lib: &BlockLibrary, models: &ModelSet, cfg: &GroundingConfig, repair: bool) -> Result<GroundingOutcome, GroundingError> {
    sketch.check().map_err(GroundingError::Graph)?;
    let rules = standard_rules();
    let rounds = cfg.max_iters.max(1);
    let mut graph = sketch.clone();
    let mut trace = Vec::new();
    let mut best: Option<(Round, RelationGraph, usize)> = None;
    let mut exhausted = false;
    for it in 0..rounds {
        let seed = cfg.sampler.seed.wrapping_add(it as u64);
        let scene = if graph.nodes.is_empty() {
            let mut s = Scene::new(lib.clone());
            s.bounds = cfg.sampler.bounds;
            s
        } else {
            let s = sample_composed(&graph, lib, models, &SamplerConfig { seed, ..cfg.sampler.clone() })?;
            scene_from(&s.ids, &s.centroids, &graph, lib, cfg)
        };
        let round = evaluate(scene, sketch, cfg);
        let mut rec = IterationTrace {
            iteration: it,
            seed,
            nodes: graph.nodes.len(),
            edges: graph.geom_edges.len(),
            verdicts: round.verdicts.clone(),
            feasible: round.feasible,
            surviving_fraction: round.surviving,
            resemblance: round.resemblance,
            repairs: Vec::new(),
            added_nodes: Vec::new(),
            added_edges: Vec::new(),
            relaxed: Vec::new(),
        };
        let done = round.feasible || it + 1 == rounds;
        if !done && repair {
            let unstable: Vec<&Verdict> = round.verdicts.iter().filter(|v| !v.feasible).collect();
            let mut next_id = BlockId(graph.nodes.iter().map(|n| n.id.0).max().map_or(0, |m| m + 1));
            let mut accepted: Vec<(f64, GraphDelta, Vec<BlockInstance>)> = Vec::new();
            for (k, v) in unstable.iter().enumerate() {
                let cands = repair_candidates(&v.instance, &graph, &rules, next_id);
                let mut record = RepairRecord { instance: v.instance.clone(), rule: None, candidates_tried: 0, note: None };
                for delta in cands.into_iter().filter(|d| delta_valid(&v.instance, d, &graph, &rules)).take(cfg.repair_budget) {
                    record.candidates_tried += 1;
                    let lseed = seed.wrapping_mul(1000).wrapping_add(k as u64 * 10 + record.candidates_tried as u64);
                    if let Some(hidden) = local_check(&v.instance, &delta, &graph, &round.scene, lib, models, cfg, lseed)? {
                        let z = v.instance.base_ids.iter().filter_map(|id| round.scene.box_of(*id)).map(|b| b.min[2]).fold(f64::INFINITY, f64::min);
                        record.rule = Some(delta.rule.clone());
                        next_id = BlockId(next_id.0 + delta.nodes.len() as i64);
                        accepted.push((z, delta, hidden));
                        break;
                    }
                }
                if record.rule.is_none() {
                    record.note = Some(if record.candidates_tried == 0 { "no applicable rule".into() } else { "no candidate passed the local check".into() });
                }
                rec.repairs.push(record);
            }
            if !unstable.is_empty() && accepted.is_empty() {
                exhausted = true;
            }
            // Overlapping hidden blocks: the lower instance wins, the other waits a round.
            accepted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut kept: Vec<Box3> = Vec::new();
            for (_, delta, hidden) in accepted {
                let boxes: Vec<Box3> = hidden.iter().map(|b| Box3::from_center(b.centroid, type_dims(lib, b.type_id))).collect();
                if boxes.iter().any(|b| kept.iter().any(|k| crate::geometry::overlap_volume(b, k) > 1e-6)) {
                    continue;
                }
                kept.extend(boxes);
                delta.apply(&mut graph);
                rec.added_nodes.extend(delta.nodes.clone());
                rec.added_edges.extend(delta.edges.clone());
                rec.relaxed.extend(delta.relaxed.clone());
            }
        }
        trace.push(rec);
        let improved = best.as_ref().is_none_or(|(b, _, _)| better(&round, b));
        let feasible = round.feasible;
        // The graph that produced this round, before this round's repairs.
        let round_graph = if trace.last().is_some_and(|r| !r.added_nodes.is_empty() || !r.added_edges.is_empty() || !r.relaxed.is_empty()) {
            prior_graph(&graph, trace.last().expect("pushed"))
        } else {
            graph.clone()
        };
        if improved {
            best = Some((round, round_graph, it));
        }
        if feasible || (exhausted && repair) {
            break;
        }
    }
    let (round, graph, best_iteration) = best.expect("at least one round");
    Ok(GroundingOutcome { graph, success: round.feasible, scene: round.scene, exhausted, best_iteration, trace })
}

/// Undoes one round's repairs.
fn prior_graph(graph: &RelationGraph, rec: &IterationTrace) -> RelationGraph {
    let mut g = graph.clone();
    for e in &rec.added_edges {
        g.remove_edge(e);
    }
    g.nodes.retain(|n| !rec.added_nodes.iter().any(|a| a.id == n.id));
    for (old, new) in &rec.relaxed {
        g.remove_edge(new);
        g.add_edge(old.clone());
    }
    g
}

/// Samples, checks and repairs until the structure stands or the round
/// budget runs out. Returns the best round by feasibility, surviving
/// fraction and resemblance.
pub fn ground_iterate(sketch: &RelationGraph, lib: &BlockLibrary, models: &ModelSet, cfg: &GroundingConfig) -> Result<GroundingOutcome, GroundingError> {
    run(sketch, lib, models, cfg, true)
}

/// The same loop without repairs: every round only re-samples poses.
pub fn ablation_iterate(sketch: &RelationGraph, lib: &BlockLibrary, models: &ModelSet, cfg: &GroundingConfig) -> Result<GroundingOutcome, GroundingError> {
    run(sketch, lib, models, cfg, false)
}

/// Applies the first valid candidate delta for `inst`, without a local
/// check. Fails when no rule applies.
pub fn repair_subgraph(inst: &PatternInstance, graph: &RelationGraph, rules: &[RepairRule]) -> Result<GraphDelta, GroundingError> {
    let next_id = BlockId(graph.nodes.iter().map(|n| n.id.0).max().map_or(0, |m| m + 1));
    repair_candidates(inst, graph, rules, next_id)
        .into_iter()
        .find(|d| delta_valid(inst, d, graph, rules))
        .ok_or_else(|| GroundingError::RepairExhausted(inst.clone()))
}

#[cfg(test)]
mod tests;
