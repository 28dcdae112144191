//! Two-tier stability patterns: descriptor classifiers, matching against
//! relation graphs and decomposition of a scene into local subassemblies.
//!
//! Matching works on the role graph: every block has a top role and a base
//! role, and each `supported-by-*` edge between two blocks joins the top
//! role of the upper block to the base role of the lower one. Each
//! connected component of that graph is one candidate instance, so a block
//! can be a top in one instance and a base in the instance above it.

use crate::geometry::{BlockId, Scene};
use crate::relations::{ClassifierConfig, RelationEdge, RelationGraph, RelationKind};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::OnceLock;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PatternError {
    #[error("block {0} is not a node of the graph")]
    Mapping(BlockId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    SingleBlockStack,
    CantileverWithCounterbalance,
    TwoPillarSingleTopBridge,
    NPillarSingleTopBridge,
    SingleBaseNPillarBridge,
    TwoBaseSingleOverheadPyramid,
    NBaseSingleOverheadPyramid,
    SingleBaseNOverheadPyramid,
    NBaseMOverheadPyramid,
    BasicArc,
    /// A support component that fits no pattern, or a block resting on
    /// nothing.
    Unmatched,
}

impl PatternKind {
    pub const ALL: [PatternKind; 10] = [
        PatternKind::SingleBlockStack,
        PatternKind::CantileverWithCounterbalance,
        PatternKind::TwoPillarSingleTopBridge,
        PatternKind::NPillarSingleTopBridge,
        PatternKind::SingleBaseNPillarBridge,
        PatternKind::TwoBaseSingleOverheadPyramid,
        PatternKind::NBaseSingleOverheadPyramid,
        PatternKind::SingleBaseNOverheadPyramid,
        PatternKind::NBaseMOverheadPyramid,
        PatternKind::BasicArc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PatternKind::SingleBlockStack => "single-block-stack",
            PatternKind::CantileverWithCounterbalance => "cantilever-with-counterbalance",
            PatternKind::TwoPillarSingleTopBridge => "two-pillar-single-top-bridge",
            PatternKind::NPillarSingleTopBridge => "n-pillar-single-top-bridge",
            PatternKind::SingleBaseNPillarBridge => "single-base-n-pillar-bridge",
            PatternKind::TwoBaseSingleOverheadPyramid => "two-base-single-overhead-pyramid",
            PatternKind::NBaseSingleOverheadPyramid => "n-base-single-overhead-pyramid",
            PatternKind::SingleBaseNOverheadPyramid => "single-base-n-overhead-pyramid",
            PatternKind::NBaseMOverheadPyramid => "n-base-m-overhead-pyramid",
            PatternKind::BasicArc => "basic-arc",
            PatternKind::Unmatched => "unmatched",
        }
    }

    pub fn from_name(name: &str) -> Option<PatternKind> {
        Self::ALL.into_iter().chain([PatternKind::Unmatched]).find(|k| k.name() == name)
    }
}

impl std::fmt::Display for PatternKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatternInstance {
    pub pattern: PatternKind,
    pub base_ids: Vec<BlockId>,
    pub top_ids: Vec<BlockId>,
}

impl PatternInstance {
    pub fn new(pattern: PatternKind, mut base_ids: Vec<BlockId>, mut top_ids: Vec<BlockId>) -> Self {
        base_ids.sort();
        top_ids.sort();
        PatternInstance { pattern, base_ids, top_ids }
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.base_ids.iter().chain(&self.top_ids).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Support {
    Fully,
    Partially,
}

/// Edge lookups over a geometric graph.
pub struct GraphIndex<'a> {
    graph: &'a RelationGraph,
    pairs: HashSet<(RelationKind, BlockId, BlockId)>,
}

impl<'a> GraphIndex<'a> {
    pub fn new(graph: &'a RelationGraph) -> Self {
        let pairs = graph
            .geom_edges
            .iter()
            .filter(|e| e.operands.len() == 2)
            .map(|e| (e.rel, e.operands[0], e.operands[1]))
            .collect();
        GraphIndex { graph, pairs }
    }

    pub fn has(&self, rel: RelationKind, a: BlockId, b: BlockId) -> bool {
        self.pairs.contains(&(rel, a, b))
    }

    pub fn support(&self, upper: BlockId, lower: BlockId) -> Option<Support> {
        if self.has(RelationKind::SupportedByFully, upper, lower) {
            Some(Support::Fully)
        } else if self.has(RelationKind::SupportedByPartially, upper, lower) {
            Some(Support::Partially)
        } else {
            None
        }
    }

    pub fn touching(&self, a: BlockId, b: BlockId) -> bool {
        [RelationKind::TouchingAlongX, RelationKind::TouchingAlongY]
            .iter()
            .any(|&r| self.has(r, a, b) || self.has(r, b, a))
    }

    /// Some edge of `rel` has every block of `tier` among its operands.
    pub fn group_covers(&self, rel: RelationKind, tier: &[BlockId]) -> bool {
        self.graph.edges_of(rel).any(|e| tier.iter().all(|id| e.operands.contains(id)))
    }

    fn all_pairs(tier: &[BlockId], f: impl Fn(BlockId, BlockId) -> bool) -> bool {
        tier.iter().enumerate().all(|(i, &a)| tier[i + 1..].iter().all(|&b| f(a, b)))
    }

    pub fn pairwise_not_touching(&self, tier: &[BlockId]) -> bool {
        Self::all_pairs(tier, |a, b| !self.touching(a, b))
    }

    pub fn pairwise_touching(&self, tier: &[BlockId]) -> bool {
        Self::all_pairs(tier, |a, b| self.touching(a, b))
    }

    /// Tier forms a compact grid or all its blocks touch pairwise.
    pub fn compact(&self, tier: &[BlockId]) -> bool {
        tier.len() < 2 || self.group_covers(RelationKind::RegularGridCompact, tier) || self.pairwise_touching(tier)
    }
}

/// The four descriptors of a stability pattern.
pub trait StabilityPattern: Send + Sync {
    fn kind(&self) -> PatternKind;
    fn counts(&self, n_base: usize, n_top: usize) -> bool;
    fn support_ok(&self, idx: &GraphIndex, base: &[BlockId], top: &[BlockId]) -> bool;
    fn base_ok(&self, _idx: &GraphIndex, _base: &[BlockId]) -> bool {
        true
    }
    fn top_ok(&self, _idx: &GraphIndex, _top: &[BlockId]) -> bool {
        true
    }

    fn holds(&self, idx: &GraphIndex, base: &[BlockId], top: &[BlockId]) -> bool {
        self.counts(base.len(), top.len())
            && self.support_ok(idx, base, top)
            && self.base_ok(idx, base)
            && self.top_ok(idx, top)
    }
}

fn every_pair(idx: &GraphIndex, base: &[BlockId], top: &[BlockId], want: Support) -> bool {
    top.iter().all(|&t| base.iter().all(|&b| idx.support(t, b) == Some(want)))
}

pub struct SingleBlockStack;
impl StabilityPattern for SingleBlockStack {
    fn kind(&self) -> PatternKind {
        PatternKind::SingleBlockStack
    }
    fn counts(&self, n_base: usize, n_top: usize) -> bool {
        n_base == 1 && n_top == 1
    }
    fn support_ok(&self, idx: &GraphIndex, base: &[BlockId], top: &[BlockId]) -> bool {
        every_pair(idx, base, top, Support::Fully)
    }
}

pub struct Cantilever;
impl StabilityPattern for Cantilever {
    fn kind(&self) -> PatternKind {
        PatternKind::CantileverWithCounterbalance
    }
    fn counts(&self, n_base: usize, n_top: usize) -> bool {
        n_base == 1 && n_top == 1
    }
    fn support_ok(&self, idx: &GraphIndex, base: &[BlockId], top: &[BlockId]) -> bool {
        every_pair(idx, base, top, Support::Partially)
    }
}

pub struct TwoPillarBridge;
impl StabilityPattern for TwoPillarBridge {
    fn kind(&self) -> PatternKind {
        PatternKind::TwoPillarSingleTopBridge
    }
    fn counts(&self, n_base: usize, n_top: usize) -> bool {
        n_base == 2 && n_top == 1
    }
    fn support_ok(&self, idx: &GraphIndex, base: &[BlockId], top: &[BlockId]) -> bool {
        every_pair(idx, base, top, Support::Fully)
    }
    fn base_ok(&self, idx: &GraphIndex, base: &[BlockId]) -> bool {
        idx.pairwise_not_touching(base)
    }
}

pub struct NPillarBridge;
impl StabilityPattern for NPillarBridge {
    fn kind(&self) -> PatternKind {
        PatternKind::NPillarSingleTopBridge
    }
    fn counts(&self, n_base: usize, n_top: usize) -> bool {
        n_base >= 3 && n_top == 1
    }
    fn support_ok(&self, idx: &GraphIndex, base: &[BlockId], top: &[BlockId]) -> bool {
        every_pair(idx, base, top, Support::Fully)
    }
    fn base_ok(&self, idx: &GraphIndex, base: &[BlockId]) -> bool {
        idx.pairwise_not_touching(base)
    }
}

pub struct SingleBaseNPillarBridge;
impl StabilityPattern for SingleBaseNPillarBridge {
    fn kind(&self) -> PatternKind {
        PatternKind::SingleBaseNPillarBridge
    }
    fn counts(&self, n_base: usize, n_top: usize) -> bool {
        n_base == 1 && n_top >= 2
    }
    fn support_ok(&self, idx: &GraphIndex, base: &[BlockId], top: &[BlockId]) -> bool {
        every_pair(idx, base, top, Support::Fully)
    }
    fn top_ok(&self, idx: &GraphIndex, top: &[BlockId]) -> bool {
        idx.pairwise_not_touching(top)
    }
}

pub struct TwoBasePyramid;
impl StabilityPattern for TwoBasePyramid {
    fn kind(&self) -> PatternKind {
        PatternKind::TwoBaseSingleOverheadPyramid
    }
    fn counts(&self, n_base: usize, n_top: usize) -> bool {
        n_base == 2 && n_top == 1
    }
    fn support_ok(&self, idx: &GraphIndex, base: &[BlockId], top: &[BlockId]) -> bool {
        every_pair(idx, base, top, Support::Fully)
    }
    fn base_ok(&self, idx: &GraphIndex, base: &[BlockId]) -> bool {
        idx.touching(base[0], base[1])
    }
}

pub struct NBasePyramid;
impl StabilityPattern for NBasePyramid {
    fn kind(&self) -> PatternKind {
        PatternKind::NBaseSingleOverheadPyramid
    }
    fn counts(&self, n_base: usize, n_top: usize) -> bool {
        n_base >= 3 && n_top == 1
    }
    fn support_ok(&self, idx: &GraphIndex, base: &[BlockId], top: &[BlockId]) -> bool {
        every_pair(idx, base, top, Support::Fully)
    }
    fn base_ok(&self, idx: &GraphIndex, base: &[BlockId]) -> bool {
        idx.compact(base)
    }
}

pub struct SingleBaseNPyramid;
impl StabilityPattern for SingleBaseNPyramid {
    fn kind(&self) -> PatternKind {
        PatternKind::SingleBaseNOverheadPyramid
    }
    fn counts(&self, n_base: usize, n_top: usize) -> bool {
        n_base == 1 && n_top >= 2
    }
    fn support_ok(&self, idx: &GraphIndex, base: &[BlockId], top: &[BlockId]) -> bool {
        every_pair(idx, base, top, Support::Fully)
    }
    fn top_ok(&self, idx: &GraphIndex, top: &[BlockId]) -> bool {
        idx.compact(top)
    }
}

pub struct NBaseMPyramid;
impl StabilityPattern for NBaseMPyramid {
    fn kind(&self) -> PatternKind {
        PatternKind::NBaseMOverheadPyramid
    }
    fn counts(&self, n_base: usize, n_top: usize) -> bool {
        n_base >= 2 && n_top >= 2
    }
    fn support_ok(&self, idx: &GraphIndex, base: &[BlockId], top: &[BlockId]) -> bool {
        top.iter().all(|&t| base.iter().any(|&b| idx.support(t, b).is_some()))
            && base.iter().all(|&b| top.iter().any(|&t| idx.support(t, b).is_some()))
    }
    fn base_ok(&self, idx: &GraphIndex, base: &[BlockId]) -> bool {
        idx.compact(base)
    }
    fn top_ok(&self, idx: &GraphIndex, top: &[BlockId]) -> bool {
        idx.compact(top)
    }
}

pub struct BasicArc;
impl StabilityPattern for BasicArc {
    fn kind(&self) -> PatternKind {
        PatternKind::BasicArc
    }
    fn counts(&self, n_base: usize, n_top: usize) -> bool {
        n_base == 2 && n_top == 1
    }
    fn support_ok(&self, idx: &GraphIndex, base: &[BlockId], top: &[BlockId]) -> bool {
        every_pair(idx, base, top, Support::Partially)
    }
    fn base_ok(&self, idx: &GraphIndex, base: &[BlockId]) -> bool {
        idx.pairwise_not_touching(base)
    }
}

/// Patterns in matching order, most specific first.
pub struct PatternRegistry {
    entries: Vec<Box<dyn StabilityPattern>>,
}

impl PatternRegistry {
    pub fn empty() -> Self {
        PatternRegistry { entries: Vec::new() }
    }

    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(NBaseMPyramid));
        r.register(Box::new(NBasePyramid));
        r.register(Box::new(SingleBaseNPyramid));
        r.register(Box::new(SingleBaseNPillarBridge));
        r.register(Box::new(TwoBasePyramid));
        r.register(Box::new(NPillarBridge));
        r.register(Box::new(TwoPillarBridge));
        r.register(Box::new(BasicArc));
        r.register(Box::new(Cantilever));
        r.register(Box::new(SingleBlockStack));
        r
    }

    /// Appends a pattern at the lowest specificity. A pattern registered
    /// under an existing kind replaces it in place.
    pub fn register(&mut self, p: Box<dyn StabilityPattern>) {
        match self.entries.iter().position(|e| e.kind() == p.kind()) {
            Some(i) => self.entries[i] = p,
            None => self.entries.push(p),
        }
    }

    pub fn get(&self, kind: PatternKind) -> Option<&dyn StabilityPattern> {
        self.entries.iter().find(|e| e.kind() == kind).map(|b| b.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn StabilityPattern> {
        self.entries.iter().map(|b| b.as_ref())
    }

    /// First pattern in specificity order whose descriptors all hold.
    pub fn classify(&self, idx: &GraphIndex, base: &[BlockId], top: &[BlockId]) -> PatternKind {
        self.iter().find(|p| p.holds(idx, base, top)).map_or(PatternKind::Unmatched, |p| p.kind())
    }
}

impl Default for PatternRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

pub fn registry() -> &'static PatternRegistry {
    static REG: OnceLock<PatternRegistry> = OnceLock::new();
    REG.get_or_init(PatternRegistry::standard)
}

/// Whether `pattern`'s descriptors hold for the given tiers of `graph`.
pub fn eval_pattern(
    pattern: PatternKind,
    base_ids: &[BlockId],
    top_ids: &[BlockId],
    graph: &RelationGraph,
) -> Result<bool, PatternError> {
    for &id in base_ids.iter().chain(top_ids) {
        if graph.node(id).is_none() {
            return Err(PatternError::Mapping(id));
        }
    }
    if base_ids.iter().any(|b| top_ids.contains(b)) {
        return Ok(false);
    }
    let Some(p) = registry().get(pattern) else { return Ok(false) };
    let idx = GraphIndex::new(graph);
    Ok(p.holds(&idx, base_ids, top_ids))
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Support components of the role graph as `(bases, tops)`.
pub fn support_components(graph: &RelationGraph) -> Vec<(Vec<BlockId>, Vec<BlockId>)> {
    let support: Vec<&RelationEdge> = graph
        .geom_edges
        .iter()
        .filter(|e| e.rel.is_support() && !e.operands[1].is_table() && !e.operands[0].is_table())
        .collect();
    let mut slots: BTreeMap<(bool, BlockId), usize> = BTreeMap::new();
    for e in &support {
        let n = slots.len();
        slots.entry((true, e.operands[0])).or_insert(n);
        let n = slots.len();
        slots.entry((false, e.operands[1])).or_insert(n);
    }
    let mut parent: Vec<usize> = (0..slots.len()).collect();
    for e in &support {
        let a = find(&mut parent, slots[&(true, e.operands[0])]);
        let b = find(&mut parent, slots[&(false, e.operands[1])]);
        parent[a.max(b)] = a.min(b);
    }
    let mut comps: BTreeMap<usize, (Vec<BlockId>, Vec<BlockId>)> = BTreeMap::new();
    let keys: Vec<((bool, BlockId), usize)> = slots.iter().map(|(k, v)| (*k, *v)).collect();
    for ((is_top, id), slot) in keys {
        let root = find(&mut parent, slot);
        let entry = comps.entry(root).or_default();
        if is_top {
            entry.1.push(id);
        } else {
            entry.0.push(id);
        }
    }
    let mut out: Vec<(Vec<BlockId>, Vec<BlockId>)> = comps
        .into_values()
        .map(|(mut b, mut t)| {
            b.sort();
            t.sort();
            (b, t)
        })
        .collect();
    out.sort();
    out
}

/// One instance per support component, labeled with the most specific
/// matching pattern. Blocks with no support at all (floating) become
/// single-block unmatched instances.
pub fn match_patterns(graph: &RelationGraph) -> Vec<PatternInstance> {
    match_patterns_with(graph, registry())
}

pub fn match_patterns_with(graph: &RelationGraph, reg: &PatternRegistry) -> Vec<PatternInstance> {
    let idx = GraphIndex::new(graph);
    let mut out: Vec<PatternInstance> = support_components(graph)
        .into_iter()
        .map(|(base, top)| PatternInstance::new(reg.classify(&idx, &base, &top), base, top))
        .collect();
    let supported: BTreeSet<BlockId> =
        graph.geom_edges.iter().filter(|e| e.rel.is_support()).map(|e| e.operands[0]).collect();
    for n in &graph.nodes {
        if !supported.contains(&n.id) {
            out.push(PatternInstance::new(PatternKind::Unmatched, Vec::new(), vec![n.id]));
        }
    }
    out.sort();
    out
}

/// The instances that matched a pattern.
pub fn matched_only(instances: &[PatternInstance]) -> Vec<PatternInstance> {
    instances.iter().filter(|i| i.pattern != PatternKind::Unmatched).cloned().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decomposed {
    pub instance: PatternInstance,
    /// The instance's blocks and everything transitively beneath its base
    /// tier.
    pub scene: Scene,
}

/// Blocks beneath `ids` through support edges, including `ids`.
pub fn support_closure(graph: &RelationGraph, ids: &[BlockId]) -> Vec<BlockId> {
    let mut below: BTreeMap<BlockId, Vec<BlockId>> = BTreeMap::new();
    for e in graph.geom_edges.iter().filter(|e| e.rel.is_support() && !e.operands[1].is_table()) {
        below.entry(e.operands[0]).or_default().push(e.operands[1]);
    }
    let mut seen: BTreeSet<BlockId> = ids.iter().copied().collect();
    let mut stack: Vec<BlockId> = ids.to_vec();
    while let Some(id) = stack.pop() {
        for &b in below.get(&id).into_iter().flatten() {
            if seen.insert(b) {
                stack.push(b);
            }
        }
    }
    seen.into_iter().collect()
}

/// Pairs every matched instance of `graph` (extracted from `scene`) with
/// its supports-closed sub-scene.
pub fn decompose(graph: &RelationGraph, scene: &Scene) -> Vec<Decomposed> {
    match_patterns(graph)
        .into_iter()
        .map(|instance| {
            let ids: Vec<BlockId> = instance.blocks().collect();
            let closure = support_closure(graph, &ids);
            Decomposed { scene: scene.restricted(&closure), instance }
        })
        .collect()
}

/// Extracts the geometric graph of `scene` and decomposes it.
pub fn decompose_scene(scene: &Scene, cfg: &ClassifierConfig) -> Vec<Decomposed> {
    let graph = crate::relations::extract_scene_graph(scene, cfg);
    decompose(&graph, scene)
}
