//! Synthetic structures built from stability patterns, per-relation
//! training sets, dataset files and sketch-like front-view renderings.

use crate::geometry::{validate_scene, BlockId, BlockInstance, BlockLibrary, BlockType, Box3, Scene};
use crate::patterns::{eval_pattern, support_components, PatternInstance, PatternKind};
use crate::relations::{extract_scene_graph_with, Arity, ClassifierConfig, RelationKind};
use crate::sketchio::{extract_regions, RasterConfig, Sketch, SketchBox, SketchSource};
use crate::stability::{extract_contacts, is_feasible, StabilityConfig};
use image::{GrayImage, Luma};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("no valid {pattern} instance after {attempts} attempts")]
    GenerationExhausted { pattern: String, attempts: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub max_attempts: usize,
    /// Smallest gap between blocks that are meant to be apart.
    pub min_gap: f64,
    /// How far a centre of mass must stay inside its support.
    pub com_safety: f64,
    /// Fraction range of the lintel width spanned by the outer pillar edges.
    pub bridge_span: [f64; 2],
    /// Overlap of an arc keystone on each pillar, as a fraction of the
    /// pillar width.
    pub arc_overlap: [f64; 2],
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { max_attempts: 200, min_gap: 0.06, com_safety: 0.03, bridge_span: [0.3, 1.0], arc_overlap: [0.3, 0.7] }
    }
}

/// Where a pattern's base tier stands.
#[derive(Clone, Debug)]
pub enum BaseSurface {
    /// On the table; the base tier is sampled too.
    Table,
    /// An already placed tier that becomes the base tier.
    Tier(Vec<BlockId>),
}

/// A generated scene with the pattern instances it was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedStructure {
    pub scene: Scene,
    pub instances: Vec<PatternInstance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TierShape {
    Single,
    Separated(usize),
    Compact(usize),
}

fn compatible(shape: Option<TierShape>) -> Vec<PatternKind> {
    use PatternKind as P;
    match shape {
        None => P::ALL.to_vec(),
        Some(TierShape::Single) => {
            vec![P::SingleBlockStack, P::CantileverWithCounterbalance, P::SingleBaseNPillarBridge, P::SingleBaseNOverheadPyramid]
        }
        Some(TierShape::Separated(2)) => vec![P::TwoPillarSingleTopBridge, P::BasicArc],
        Some(TierShape::Separated(_)) => vec![P::NPillarSingleTopBridge],
        Some(TierShape::Compact(2)) => vec![P::TwoBaseSingleOverheadPyramid, P::NBaseMOverheadPyramid],
        Some(TierShape::Compact(_)) => vec![P::NBaseSingleOverheadPyramid, P::NBaseMOverheadPyramid],
    }
}

fn top_shape(kind: PatternKind, n_top: usize) -> TierShape {
    match kind {
        _ if n_top == 1 => TierShape::Single,
        PatternKind::SingleBaseNPillarBridge => TierShape::Separated(n_top),
        _ => TierShape::Compact(n_top),
    }
}

type Placement = (u32, [f64; 3]);

fn types(lib: &BlockLibrary) -> Vec<&BlockType> {
    lib.block_types().collect()
}

/// Blocks of one type in a row along x starting at `x0` with the given gaps.
fn row(t: &BlockType, x0: f64, y: f64, z_base: f64, gaps: &[f64]) -> Vec<Placement> {
    let mut out = Vec::new();
    let mut x = x0;
    for i in 0..=gaps.len() {
        out.push((t.id, [x + t.dims[0] / 2.0, y, z_base + t.dims[2] / 2.0]));
        if i < gaps.len() {
            x += t.dims[0] + gaps[i];
        }
    }
    out
}

/// Blocks of one type on a `cols x rows` grid with the given pitch.
fn grid(t: &BlockType, origin: [f64; 2], z_base: f64, cols: usize, rows: usize, pitch: [f64; 2]) -> Vec<Placement> {
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            out.push((
                t.id,
                [
                    origin[0] + t.dims[0] / 2.0 + c as f64 * pitch[0],
                    origin[1] + t.dims[1] / 2.0 + r as f64 * pitch[1],
                    z_base + t.dims[2] / 2.0,
                ],
            ));
        }
    }
    out
}

fn union(boxes: &[Box3]) -> Box3 {
    let mut u = boxes[0];
    for b in &boxes[1..] {
        for k in 0..3 {
            u.min[k] = u.min[k].min(b.min[k]);
            u.max[k] = u.max[k].max(b.max[k]);
        }
    }
    u
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> Option<f64> {
    if hi < lo {
        None
    } else if hi == lo {
        Some(lo)
    } else {
        Some(rng.random_range(lo..hi))
    }
}

/// Centre coordinate for a block of width `w` that covers `[lo, hi]` and
/// keeps its centre at least `s` inside it.
fn covering_center(rng: &mut impl Rng, lo: f64, hi: f64, w: f64, s: f64) -> Option<f64> {
    let a = (hi - w / 2.0).max(lo + s);
    let b = (lo + w / 2.0).min(hi - s);
    uniform(rng, a, b)
}

/// Centre coordinate for a block of width `w` inside `[lo, hi]`.
fn inside_center(rng: &mut impl Rng, lo: f64, hi: f64, w: f64) -> Option<f64> {
    uniform(rng, lo + w / 2.0, hi - w / 2.0)
}

fn random_gaps(rng: &mut impl Rng, n: usize, total: f64, min_gap: f64) -> Option<Vec<f64>> {
    if n == 0 {
        return Some(Vec::new());
    }
    let slack = total - n as f64 * min_gap;
    if slack < 0.0 {
        return None;
    }
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let sum: f64 = w.iter().sum();
    Some(w.iter().map(|wi| min_gap + slack * wi / sum).collect())
}

/// Base tier on the table for `kind`.
fn table_tier(kind: PatternKind, rng: &mut impl Rng, lib: &BlockLibrary, cfg: &GenConfig) -> Option<Vec<Placement>> {
    use PatternKind as P;
    let all = types(lib);
    let y = rng.random_range(-0.3..0.3);
    match kind {
        P::SingleBlockStack | P::CantileverWithCounterbalance | P::SingleBaseNPillarBridge | P::SingleBaseNOverheadPyramid => {
            let t = *all.choose(rng)?;
            let x = rng.random_range(-0.8..0.8);
            Some(vec![(t.id, [x, y, t.dims[2] / 2.0])])
        }
        P::TwoPillarSingleTopBridge | P::NPillarSingleTopBridge => {
            let lintel = *all.iter().filter(|t| t.dims[0] >= 0.6).collect::<Vec<_>>().choose(rng)?;
            let pillars: Vec<&&BlockType> = all.iter().filter(|t| t.dims[0] <= 0.4 && t.dims[1] <= lintel.dims[1]).collect();
            let p = **pillars.choose(rng)?;
            let two_by_two = kind == P::NPillarSingleTopBridge
                && lintel.dims[1] >= 2.0 * p.dims[1] + cfg.min_gap
                && rng.random_bool(0.5);
            let span_x = lintel.dims[0] * rng.random_range(cfg.bridge_span[0]..cfg.bridge_span[1]);
            if two_by_two {
                let gx = span_x - 2.0 * p.dims[0];
                let span_y = rng.random_range(2.0 * p.dims[1] + cfg.min_gap..=lintel.dims[1]);
                let gy = span_y - 2.0 * p.dims[1];
                if gx < cfg.min_gap {
                    return None;
                }
                let x0 = rng.random_range(-0.8..0.8) - span_x / 2.0;
                return Some(grid(p, [x0, y - span_y / 2.0], 0.0, 2, 2, [p.dims[0] + gx, p.dims[1] + gy]));
            }
            let n = if kind == P::TwoPillarSingleTopBridge { 2 } else { 3 };
            let gaps = random_gaps(rng, n - 1, span_x - n as f64 * p.dims[0], cfg.min_gap)?;
            let x0 = rng.random_range(-0.8..0.8) - span_x / 2.0;
            Some(row(p, x0, y, 0.0, &gaps))
        }
        P::BasicArc => {
            let key = *all.choose(rng)?;
            let p = **all.iter().filter(|t| t.dims[0] >= 0.15 && t.dims[0] <= 0.6).collect::<Vec<_>>().choose(rng)?;
            let o1 = p.dims[0] * rng.random_range(cfg.arc_overlap[0]..cfg.arc_overlap[1]);
            let o2 = p.dims[0] * rng.random_range(cfg.arc_overlap[0]..cfg.arc_overlap[1]);
            let gap = key.dims[0] - o1 - o2;
            if gap < cfg.min_gap {
                return None;
            }
            let x0 = rng.random_range(-0.6..0.6) - gap / 2.0 - p.dims[0];
            Some(row(p, x0, y, 0.0, &[gap]))
        }
        P::TwoBaseSingleOverheadPyramid | P::NBaseSingleOverheadPyramid | P::NBaseMOverheadPyramid => {
            let c = *all.iter().filter(|t| t.dims[0] <= 0.6).collect::<Vec<_>>().choose(rng)?;
            let n = match kind {
                P::TwoBaseSingleOverheadPyramid => 2,
                P::NBaseSingleOverheadPyramid => rng.random_range(3..=4),
                _ => rng.random_range(2..=4),
            };
            let x = rng.random_range(-0.7..0.7);
            if n == 4 && rng.random_bool(0.5) {
                let w = 2.0 * c.dims[0];
                let l = 2.0 * c.dims[1];
                return Some(grid(c, [x - w / 2.0, y - l / 2.0], 0.0, 2, 2, [c.dims[0], c.dims[1]]));
            }
            let w = n as f64 * c.dims[0];
            Some(row(c, x - w / 2.0, y, 0.0, &vec![0.0; n - 1]))
        }
        P::Unmatched => None,
    }
}

/// Top tier of `kind` over the given base boxes.
fn top_tier(kind: PatternKind, base: &[Box3], rng: &mut impl Rng, lib: &BlockLibrary, cfg: &GenConfig) -> Option<Vec<Placement>> {
    use PatternKind as P;
    let all = types(lib);
    let u = union(base);
    let z = u.max[2];
    let s = cfg.com_safety;
    match kind {
        P::SingleBlockStack => {
            let b = base[0];
            let (bw, bl) = (b.extent(0), b.extent(1));
            let inside: Vec<&&BlockType> = all.iter().filter(|t| t.dims[0] <= bw && t.dims[1] <= bl).collect();
            let covering: Vec<&&BlockType> = all.iter().filter(|t| t.dims[0] >= bw && t.dims[1] >= bl).collect();
            let use_inside = !inside.is_empty() && (covering.is_empty() || rng.random_bool(0.75));
            let t = if use_inside { **inside.choose(rng)? } else { **covering.choose(rng)? };
            let (x, y) = if use_inside {
                (inside_center(rng, b.min[0], b.max[0], t.dims[0])?, inside_center(rng, b.min[1], b.max[1], t.dims[1])?)
            } else {
                (covering_center(rng, b.min[0], b.max[0], t.dims[0], s)?, covering_center(rng, b.min[1], b.max[1], t.dims[1], s)?)
            };
            Some(vec![(t.id, [x, y, z + t.dims[2] / 2.0])])
        }
        P::CantileverWithCounterbalance => {
            let b = base[0];
            let t = *all.choose(rng)?;
            let hw = t.dims[0] / 2.0;
            // Overhang on one side by at least 2 eps, centre kept inside.
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let edge = if side > 0.0 { b.max[0] } else { b.min[0] };
            let over = rng.random_range(0.05..(t.dims[0] * 0.6).max(0.06));
            let x = edge + side * (over - hw);
            if (x - b.center()[0]).abs() > b.extent(0) / 2.0 - s {
                return None;
            }
            let y = if t.dims[1] <= b.extent(1) {
                inside_center(rng, b.min[1], b.max[1], t.dims[1])?
            } else {
                covering_center(rng, b.min[1], b.max[1], t.dims[1], s)?
            };
            Some(vec![(t.id, [x, y, z + t.dims[2] / 2.0])])
        }
        P::SingleBaseNPillarBridge => {
            let b = base[0];
            let p = *all.iter().filter(|t| t.dims[0] <= 0.4).collect::<Vec<_>>().choose(rng)?;
            if p.dims[1] > b.extent(1) {
                return None;
            }
            let n = rng.random_range(2..=3);
            let free = b.extent(0) - n as f64 * p.dims[0];
            let used = free * rng.random_range(0.5..1.0);
            let gaps = random_gaps(rng, n - 1, used, cfg.min_gap)?;
            let width = n as f64 * p.dims[0] + gaps.iter().sum::<f64>();
            let x0 = inside_center(rng, b.min[0], b.max[0], width)? - width / 2.0;
            let y = inside_center(rng, b.min[1], b.max[1], p.dims[1])?;
            Some(row(p, x0, y, z, &gaps))
        }
        P::SingleBaseNOverheadPyramid => {
            let b = base[0];
            let t = *all.choose(rng)?;
            let fit_x = (b.extent(0) / t.dims[0]).floor() as usize;
            let fit_y = (b.extent(1) / t.dims[1]).floor() as usize;
            if fit_x >= 2 && fit_y >= 2 && rng.random_bool(0.3) {
                let (w, l) = (2.0 * t.dims[0], 2.0 * t.dims[1]);
                let x = inside_center(rng, b.min[0], b.max[0], w)?;
                let y = inside_center(rng, b.min[1], b.max[1], l)?;
                return Some(grid(t, [x - w / 2.0, y - l / 2.0], z, 2, 2, [t.dims[0], t.dims[1]]));
            }
            if fit_x < 2 || fit_y < 1 {
                return None;
            }
            let n = rng.random_range(2..=fit_x.min(4));
            let w = n as f64 * t.dims[0];
            let x = inside_center(rng, b.min[0], b.max[0], w)?;
            let y = inside_center(rng, b.min[1], b.max[1], t.dims[1])?;
            Some(row(t, x - w / 2.0, y, z, &vec![0.0; n - 1]))
        }
        P::TwoPillarSingleTopBridge
        | P::NPillarSingleTopBridge
        | P::TwoBaseSingleOverheadPyramid
        | P::NBaseSingleOverheadPyramid => {
            let cands: Vec<&&BlockType> =
                all.iter().filter(|t| t.dims[0] >= u.extent(0) && t.dims[1] >= u.extent(1)).collect();
            let t = **cands.choose(rng)?;
            let x = covering_center(rng, u.min[0], u.max[0], t.dims[0], s)?;
            let y = covering_center(rng, u.min[1], u.max[1], t.dims[1], s)?;
            Some(vec![(t.id, [x, y, z + t.dims[2] / 2.0])])
        }
        P::BasicArc => {
            let (l, r) = if base[0].min[0] <= base[1].min[0] { (base[0], base[1]) } else { (base[1], base[0]) };
            let gap = r.min[0] - l.max[0];
            let (lw, rw) = (l.extent(0), r.extent(0));
            let t = *all.choose(rng)?;
            let o1 = lw * rng.random_range(cfg.arc_overlap[0]..cfg.arc_overlap[1]);
            let o2 = t.dims[0] - gap - o1;
            if o2 < cfg.arc_overlap[0] * rw || o2 > cfg.arc_overlap[1] * rw {
                return None;
            }
            let x = l.max[0] - o1 + t.dims[0] / 2.0;
            let ylo = l.min[1].max(r.min[1]);
            let yhi = l.max[1].min(r.max[1]);
            let y = if t.dims[1] <= yhi - ylo {
                inside_center(rng, ylo, yhi, t.dims[1])?
            } else {
                covering_center(rng, ylo, yhi, t.dims[1], s)?
            };
            Some(vec![(t.id, [x, y, z + t.dims[2] / 2.0])])
        }
        P::NBaseMOverheadPyramid => {
            let t = *all.iter().filter(|t| t.dims[0] < u.extent(0)).collect::<Vec<_>>().choose(rng)?;
            let fit_x = (u.extent(0) / t.dims[0]).floor() as usize;
            let fit_y = (u.extent(1) / t.dims[1]).floor() as usize;
            if fit_x >= 2 && fit_y >= 2 && rng.random_bool(0.4) {
                let (w, l) = (2.0 * t.dims[0], 2.0 * t.dims[1]);
                let x = inside_center(rng, u.min[0], u.max[0], w)?;
                let y = inside_center(rng, u.min[1], u.max[1], l)?;
                return Some(grid(t, [x - w / 2.0, y - l / 2.0], z, 2, 2, [t.dims[0], t.dims[1]]));
            }
            if fit_x < 2 || fit_y < 1 {
                return None;
            }
            let m = rng.random_range(2..=fit_x.min(4));
            let w = m as f64 * t.dims[0];
            let x = inside_center(rng, u.min[0], u.max[0], w)?;
            let y = inside_center(rng, u.min[1], u.max[1], t.dims[1])?;
            Some(row(t, x - w / 2.0, y, z, &vec![0.0; m - 1]))
        }
        P::Unmatched => None,
    }
}

fn instances_of(scene: &Scene, ids: &[BlockId]) -> Vec<Box3> {
    ids.iter().map(|id| scene.box_of(*id).expect("tier ids are scene blocks")).collect()
}

/// Checks a candidate: valid scene, descriptors hold on the instance's own
/// blocks, new blocks touch only the base tier, and the whole scene is in
/// equilibrium.
fn accept(scene: &Scene, base: &[BlockId], top: &[BlockId], kind: PatternKind, pen_free: bool) -> bool {
    if !validate_scene(scene).is_empty() || !pen_free {
        return false;
    }
    let mut ids: Vec<BlockId> = base.to_vec();
    ids.extend_from_slice(top);
    let sub = scene.restricted(&ids);
    let g = extract_scene_graph_with(&sub, &[RelationKind::SupportedByFully, RelationKind::SupportedByPartially, RelationKind::TouchingAlongX, RelationKind::TouchingAlongY, RelationKind::RegularGridCompact], &ClassifierConfig::default());
    if !eval_pattern(kind, base, top, &g).unwrap_or(false) {
        return false;
    }
    let (mut b, mut t) = (base.to_vec(), top.to_vec());
    b.sort();
    t.sort();
    if support_components(&g) != vec![(b, t)] {
        return false;
    }
    let contacts = extract_contacts(scene, StabilityConfig::default().contact_tol);
    let allowed: BTreeSet<BlockId> = base.iter().copied().chain([BlockId::TABLE]).collect();
    for c in &contacts {
        if top.contains(&c.upper) && !allowed.contains(&c.lower) {
            return false;
        }
        if top.contains(&c.lower) {
            return false;
        }
    }
    is_feasible(scene, &StabilityConfig::default())
}

fn push_blocks(scene: &mut Scene, placements: &[Placement]) -> Vec<BlockId> {
    let mut ids = Vec::new();
    for (t, c) in placements {
        let id = scene.next_id();
        scene.blocks.push(BlockInstance { id, type_id: *t, centroid: *c, hidden: false });
        ids.push(id);
    }
    ids
}

/// Samples one instance of `kind` on `base` within `scene` (the blocks
/// placed so far). Returns the extended scene and the instance.
pub fn sample_pattern_instance_in(
    kind: PatternKind,
    rng: &mut impl Rng,
    scene: &Scene,
    base: &BaseSurface,
    cfg: &GenConfig,
) -> Result<GeneratedStructure, GenError> {
    let lib = &scene.library;
    for _ in 0..cfg.max_attempts {
        let mut cand = scene.clone();
        let base_ids = match base {
            BaseSurface::Table => match table_tier(kind, rng, lib, cfg) {
                Some(p) => push_blocks(&mut cand, &p),
                None => continue,
            },
            BaseSurface::Tier(ids) => ids.clone(),
        };
        let base_boxes = instances_of(&cand, &base_ids);
        let Some(tops) = top_tier(kind, &base_boxes, rng, lib, cfg) else { continue };
        let top_ids = push_blocks(&mut cand, &tops);
        if accept(&cand, &base_ids, &top_ids, kind, true) {
            let instance = PatternInstance::new(kind, base_ids, top_ids);
            return Ok(GeneratedStructure { scene: cand, instances: vec![instance] });
        }
    }
    Err(GenError::GenerationExhausted { pattern: kind.name().to_string(), attempts: cfg.max_attempts })
}

/// One instance of `kind` standing on the table, as its own scene.
pub fn sample_pattern_instance(
    kind: PatternKind,
    rng: &mut impl Rng,
    lib: &BlockLibrary,
    cfg: &GenConfig,
) -> Result<GeneratedStructure, GenError> {
    sample_pattern_instance_in(kind, rng, &Scene::new(lib.clone()), &BaseSurface::Table, cfg)
}

/// Stacks `levels` pattern instances; each level's top tier is the base
/// tier of the next.
pub fn compose_structure(rng: &mut impl Rng, levels: usize, lib: &BlockLibrary, cfg: &GenConfig) -> Result<GeneratedStructure, GenError> {
    compose_structure_with(rng, levels, lib, cfg, None)
}

/// Like [`compose_structure`], with the first level fixed to `first`.
pub fn compose_structure_with(
    rng: &mut impl Rng,
    levels: usize,
    lib: &BlockLibrary,
    cfg: &GenConfig,
    first: Option<PatternKind>,
) -> Result<GeneratedStructure, GenError> {
    let levels = levels.max(1);
    'restart: for _ in 0..cfg.max_attempts {
        let mut state = GeneratedStructure { scene: Scene::new(lib.clone()), instances: Vec::new() };
        let mut shape: Option<TierShape> = None;
        for level in 0..levels {
            let base = match state.instances.last() {
                None => BaseSurface::Table,
                Some(i) => BaseSurface::Tier(i.top_ids.clone()),
            };
            let mut options = compatible(shape);
            if level == 0 {
                if let Some(f) = first {
                    options = vec![f];
                }
            }
            let mut placed = false;
            while !options.is_empty() {
                let k = options.remove(rng.random_range(0..options.len()));
                let few = GenConfig { max_attempts: 25, ..cfg.clone() };
                if let Ok(next) = sample_pattern_instance_in(k, rng, &state.scene, &base, &few) {
                    let inst = next.instances[0].clone();
                    shape = Some(top_shape(k, inst.top_ids.len()));
                    state.scene = next.scene;
                    state.instances.push(inst);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return Ok(state);
    }
    Err(GenError::GenerationExhausted { pattern: "structure".into(), attempts: cfg.max_attempts })
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Workspace half-extents used to normalize geometry and poses.
pub const NORM: [f64; 3] = [1.5, 1.0, 2.5];

pub fn normalize_vec(v: [f64; 3]) -> [f64; 3] {
    [v[0] / NORM[0], v[1] / NORM[1], v[2] / NORM[2]]
}

pub fn denormalize_vec(v: [f64; 3]) -> [f64; 3] {
    [v[0] * NORM[0], v[1] * NORM[1], v[2] * NORM[2]]
}

/// One positive example of a relation: normalized dims and centroids of
/// its operands in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub g: Vec<[f64; 3]>,
    pub p: Vec<[f64; 3]>,
}

impl TrainingSample {
    pub fn arity(&self) -> usize {
        self.g.len()
    }

    /// Operand boxes in scene units.
    pub fn boxes(&self) -> Vec<Box3> {
        self.g.iter().zip(&self.p).map(|(g, p)| Box3::from_center(denormalize_vec(*p), denormalize_vec(*g))).collect()
    }
}

/// Every operand tuple of `rel` in every scene, deduplicated by scene and
/// operand ids.
pub fn extract_training_set(scenes: &[Scene], rel: RelationKind, cfg: &ClassifierConfig) -> Vec<TrainingSample> {
    let mut seen: BTreeSet<(usize, Vec<BlockId>)> = BTreeSet::new();
    let mut out = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let g = extract_scene_graph_with(scene, &[rel], cfg);
        for e in &g.geom_edges {
            if !seen.insert((si, e.operands.clone())) {
                continue;
            }
            let mut gs = Vec::new();
            let mut ps = Vec::new();
            for o in &e.operands {
                let b = scene.box_of(*o).expect("edge operands are in the scene");
                gs.push(normalize_vec(b.dims()));
                ps.push(normalize_vec(b.center()));
            }
            let sample = TrainingSample { g: gs, p: ps };
            // Rounding through the normalization can push a tuple sitting
            // exactly on a threshold to the other side.
            if crate::relations::eval_geom(rel, &sample.boxes(), cfg).unwrap_or(false) {
                out.push(sample);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub samples_per_relation: usize,
    pub max_scenes: usize,
    pub levels: [usize; 2],
    /// Operand slots stored per variadic sample.
    pub max_slots: usize,
    #[serde(default)]
    pub gen: GenConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            samples_per_relation: 5000,
            max_scenes: 20_000,
            levels: [1, 4],
            max_slots: 8,
            gen: GenConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

pub fn cfg_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Structures with per-scene seeds `seed + index`.
pub fn generate_scenes(cfg: &DatasetConfig, count: usize, lib: &BlockLibrary) -> Vec<GeneratedStructure> {
    (0..count)
        .filter_map(|i| {
            let mut rng = rng_for(cfg.seed.wrapping_add(i as u64));
            let levels = rng.random_range(cfg.levels[0]..=cfg.levels[1]);
            compose_structure(&mut rng, levels, lib, &cfg.gen).ok()
        })
        .collect()
}

/// Generates structures until every relation in `rels` has the requested
/// number of samples or the scene budget runs out.
pub fn build_datasets(
    cfg: &DatasetConfig,
    rels: &[RelationKind],
    lib: &BlockLibrary,
) -> (BTreeMap<RelationKind, Vec<TrainingSample>>, usize) {
    let mut sets: BTreeMap<RelationKind, Vec<TrainingSample>> = rels.iter().map(|r| (*r, Vec::new())).collect();
    let mut scenes_used = 0;
    for i in 0..cfg.max_scenes {
        if sets.values().all(|v| v.len() >= cfg.samples_per_relation) {
            break;
        }
        let mut rng = rng_for(cfg.seed.wrapping_add(i as u64));
        let levels = rng.random_range(cfg.levels[0]..=cfg.levels[1]);
        let Ok(s) = compose_structure(&mut rng, levels, lib, &cfg.gen) else { continue };
        scenes_used += 1;
        for (rel, set) in sets.iter_mut() {
            if set.len() >= cfg.samples_per_relation {
                continue;
            }
            let mut new = extract_training_set(std::slice::from_ref(&s.scene), *rel, &cfg.classifier);
            new.retain(|x| x.arity() <= cfg.max_slots);
            new.truncate(cfg.samples_per_relation - set.len());
            set.extend(new);
        }
    }
    (sets, scenes_used)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub relation: RelationKind,
    pub arity: String,
    pub slots: usize,
    pub dims_per_operand: usize,
    pub count: usize,
    pub seed: u64,
    pub cfg_hash: String,
}

/// Writes `samples` as a binary dataset: little-endian u64 header length,
/// JSON header, then per row `g`, `p` (3 floats per slot) and a 0/1 mask
/// per slot, all little-endian f32.
pub fn write_dataset(path: &Path, rel: RelationKind, samples: &[TrainingSample], slots: usize, seed: u64, hash: &str) -> Result<(), GenError> {
    let arity = match rel.arity() {
        Arity::Fixed(k) => format!("fixed-{k}"),
        Arity::Variadic { .. } => "variadic".to_string(),
    };
    let slots = match rel.arity() {
        Arity::Fixed(k) => k,
        Arity::Variadic { .. } => slots,
    };
    let header = DatasetHeader {
        relation: rel,
        arity,
        slots,
        dims_per_operand: 3,
        count: samples.len(),
        seed,
        cfg_hash: hash.to_string(),
    };
    let h = serde_json::to_vec(&header).map_err(|e| GenError::Format(e.to_string()))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&(h.len() as u64).to_le_bytes())?;
    out.write_all(&h)?;
    for s in samples {
        let mut row: Vec<f32> = Vec::with_capacity(slots * 7);
        for part in [&s.g, &s.p] {
            for k in 0..slots {
                let v = part.get(k).copied().unwrap_or([0.0; 3]);
                row.extend(v.iter().map(|x| *x as f32));
            }
        }
        row.extend((0..slots).map(|k| if k < s.arity() { 1.0f32 } else { 0.0 }));
        for v in row {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<TrainingSample>), GenError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(GenError::Format("truncated header".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header: DatasetHeader = serde_json::from_slice(bytes.get(8..8 + hlen).ok_or_else(|| GenError::Format("truncated header".into()))?)
        .map_err(|e| GenError::Format(e.to_string()))?;
    let slots = header.slots;
    let row_len = slots * 7 * 4;
    let body = &bytes[8 + hlen..];
    if body.len() != row_len * header.count {
        return Err(GenError::Format(format!("expected {} rows", header.count)));
    }
    let mut samples = Vec::with_capacity(header.count);
    for r in body.chunks_exact(row_len) {
        let f: Vec<f64> = r.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let n = (0..slots).filter(|k| f[6 * slots + k] > 0.5).count();
        let g = (0..n).map(|k| [f[3 * k], f[3 * k + 1], f[3 * k + 2]]).collect();
        let p = (0..n).map(|k| [f[3 * (slots + k)], f[3 * (slots + k) + 1], f[3 * (slots + k) + 2]]).collect();
        samples.push(TrainingSample { g, p });
    }
    Ok((header, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub scenes: usize,
    pub counts: BTreeMap<String, usize>,
    pub cfg_hash: String,
    pub config: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub px_per_unit: f64,
    pub margin_px: u32,
    /// Stroke dilation radius in pixels before blurring.
    pub line_radius: usize,
    pub blur: f32,
    #[serde(default)]
    pub raster: RasterConfig,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { px_per_unit: 100.0, margin_px: 16, line_radius: 1, blur: 1.0, raster: RasterConfig::default() }
    }
}

/// A rendered front view and the matching structured sketch of the
/// visible blocks.
#[derive(Clone, Debug)]
pub struct RenderedSketch {
    pub image: GrayImage,
    /// One label per enclosed region, `None` for empty regions.
    pub labels: Vec<Option<String>>,
    pub sketch: Sketch,
    /// Scene block id of each sketch box, in sketch id order.
    pub block_ids: Vec<BlockId>,
}

/// Projects the scene onto the x-z plane, draws nearer blocks over farther
/// ones, drops blocks that end up with no visible region, then dilates and
/// blurs the strokes.
pub fn render_frontview_sketch(scene: &Scene, cfg: &RenderConfig) -> RenderedSketch {
    let ppu = cfg.px_per_unit;
    let m = cfg.margin_px as i64;
    let boxes = scene.boxes();
    let xlo = scene.bounds.min[0];
    let ztop = boxes.iter().map(|(_, b)| b.max[2]).fold(scene.bounds.min[2] + 1.0, f64::max);
    let width = ((scene.bounds.max[0] - xlo) * ppu).round() as i64 + 2 * m + 1;
    let height = (ztop * ppu).round() as i64 + 2 * m + 1;
    let (w, h) = (width as usize, height as usize);
    // Integer edges: columns left to right, rows measured upward from the
    // bottom margin.
    let rects: Vec<(BlockId, [i64; 4], f64)> = boxes
        .iter()
        .map(|(id, b)| {
            let l = m + ((b.min[0] - xlo) * ppu).round() as i64;
            let r = m + ((b.max[0] - xlo) * ppu).round() as i64;
            let bo = m + (b.min[2] * ppu).round() as i64;
            let t = m + (b.max[2] * ppu).round() as i64;
            (*id, [l, r, bo, t], b.min[1])
        })
        .collect();
    let mut order: Vec<usize> = (0..rects.len()).collect();
    // Far to near: larger front face y is farther from the observer.
    order.sort_by(|&a, &b| rects[b].2.total_cmp(&rects[a].2).then(rects[b].0.cmp(&rects[a].0)));
    let row_of = |zu: i64| -> usize { (height - 1 - zu) as usize };

    let mut ink = vec![false; w * h];
    let mut owner: Vec<Option<usize>> = vec![None; w * h];
    for &i in &order {
        let [l, r, bo, t] = rects[i].1;
        for zu in bo..=t {
            for x in l..=r {
                let p = row_of(zu) * w + x as usize;
                ink[p] = zu == bo || zu == t || x == l || x == r;
                if x < r && zu < t {
                    owner[row_of(zu) * w + x as usize] = Some(i);
                }
            }
        }
    }
    // Cell (x, zu) covers [x, x+1) x [zu, zu+1); interior pixel (x, zu) of
    // a region maps to that cell, shifted one row because rows grow down.
    let mut thick = ink.clone();
    for _ in 0..cfg.line_radius {
        let prev = thick.clone();
        for y in 0..h {
            for x in 0..w {
                if prev[y * w + x] {
                    continue;
                }
                let near = (y > 0 && prev[(y - 1) * w + x])
                    || (y + 1 < h && prev[(y + 1) * w + x])
                    || (x > 0 && prev[y * w + x - 1])
                    || (x + 1 < w && prev[y * w + x + 1])
                    || (x > 0 && y > 0 && prev[(y - 1) * w + x - 1])
                    || (x + 1 < w && y > 0 && prev[(y - 1) * w + x + 1])
                    || (x > 0 && y + 1 < h && prev[(y + 1) * w + x - 1])
                    || (x + 1 < w && y + 1 < h && prev[(y + 1) * w + x + 1]);
                thick[y * w + x] = near;
            }
        }
    }
    let mut img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if thick[y as usize * w + x as usize] { 0 } else { 255 }]));
    if cfg.blur > 0.0 {
        img = image::imageops::blur(&img, cfg.blur);
    }

    let regions = extract_regions(&img, &cfg.raster);
    // Owner of each region: the block owning most of its pixels' cells.
    let mut best: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut region_owner: Vec<Option<usize>> = Vec::with_capacity(regions.len());
    for (ri, reg) in regions.iter().enumerate() {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let mut empty = 0usize;
        for &p in &reg.pixels {
            let (x, y) = (p % w, p / w);
            // Pixel row y is the line zu = height-1-y; the cell below it
            // spans [zu-1, zu), so it is owned by the block painted at
            // row_of(zu-1) = y+1.
            let cell = if y + 1 < h { owner[(y + 1) * w + x] } else { None };
            match cell {
                Some(o) => *counts.entry(o).or_default() += 1,
                None => empty += 1,
            }
        }
        let top = counts.iter().max_by_key(|(o, c)| (**c, std::cmp::Reverse(**o))).map(|(o, c)| (*o, *c));
        match top {
            Some((o, c)) if c > empty => {
                region_owner.push(Some(o));
                let e = best.entry(o).or_insert((ri, 0));
                if reg.area > regions[e.0].area || e.1 == 0 {
                    *e = (ri, 1);
                }
            }
            _ => region_owner.push(None),
        }
    }
    let mut labels = Vec::with_capacity(regions.len());
    let mut sketch_boxes = Vec::new();
    let mut block_ids = Vec::new();
    for (ri, o) in region_owner.iter().enumerate() {
        let chosen = o.filter(|o| best.get(o).map(|b| b.0) == Some(ri));
        match chosen {
            None => labels.push(None),
            Some(o) => {
                let (id, _, _) = rects[o];
                let bi = scene.block(id).expect("rect ids are scene blocks");
                let name = scene.library.get(bi.type_id).map(|t| t.name.clone()).unwrap_or_default();
                labels.push(Some(name));
                // Visible extent of the block: bounding box of its cells.
                let (mut l, mut r, mut bo, mut t) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
                for y in 0..h {
                    for x in 0..w {
                        if owner[y * w + x] == Some(o) {
                            let zu = height - 1 - y as i64;
                            l = l.min(x as i64);
                            r = r.max(x as i64 + 1);
                            bo = bo.min(zu);
                            t = t.max(zu + 1);
                        }
                    }
                }
                let (l, r, bo, t) = (l as f64, r as f64, bo as f64, t as f64);
                sketch_boxes.push(SketchBox {
                    id: BlockId(sketch_boxes.len() as i64),
                    type_id: bi.type_id,
                    cx: (l + r) / 2.0,
                    cz: (bo + t) / 2.0,
                    w_hat: r - l,
                    h_hat: t - bo,
                });
                block_ids.push(id);
            }
        }
    }
    let sketch = Sketch { boxes: sketch_boxes, library: scene.library.clone(), source: SketchSource::Structured };
    let sketch = crate::sketchio::normalize(&sketch, cfg.raster.target_width);
    RenderedSketch { image: img, labels, sketch, block_ids }
}
