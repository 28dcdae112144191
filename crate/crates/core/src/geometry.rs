//! Blocks, the block library, scenes and scene validation.
//!
//! Every block is an axis-aligned box described by its dimensions
//! `(w, l, h)` along `(x, y, z)` and the position of its centroid. The
//! table is block type 0 and is never stored in [`Scene::blocks`]; it is
//! placed implicitly with its top face at `z = 0`.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Interpenetration volume tolerated between two blocks of a valid scene.
pub const PEN_TOL: f64 = 1e-4;

/// Table centroid. The table top is the `z = 0` plane.
pub const TABLE_CENTROID: [f64; 3] = [0.0, 0.0, -0.05];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LibraryError {
    #[error("block type {id} has non-positive dimensions {dims:?}")]
    Degenerate { id: u32, dims: [f64; 3] },
    #[error("duplicate block type id {0}")]
    DuplicateId(u32),
    #[error("unknown block type id {0}")]
    UnknownType(u32),
    #[error("unknown block type label {0:?}")]
    UnknownLabel(String),
    #[error("library must contain the table (type 0) and at least one block type")]
    Empty,
}

/// Identifier of a block within a scene or relation graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub i64);

impl BlockId {
    /// The table node. It takes part in relations such as `left-in` and
    /// `supported-by-fully` but never moves.
    pub const TABLE: BlockId = BlockId(-1);

    pub fn is_table(self) -> bool {
        self == Self::TABLE
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_table() {
            write!(f, "table")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Axis-aligned box given by its min and max corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    pub fn from_center(center: [f64; 3], dims: [f64; 3]) -> Self {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for k in 0..3 {
            min[k] = center[k] - dims[k] / 2.0;
            max[k] = center[k] + dims[k] / 2.0;
        }
        Box3 { min, max }
    }

    pub fn center(&self) -> [f64; 3] {
        [
            (self.min[0] + self.max[0]) / 2.0,
            (self.min[1] + self.max[1]) / 2.0,
            (self.min[2] + self.max[2]) / 2.0,
        ]
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn dims(&self) -> [f64; 3] {
        [self.extent(0), self.extent(1), self.extent(2)]
    }

    pub fn volume(&self) -> f64 {
        self.extent(0) * self.extent(1) * self.extent(2)
    }

    /// Length of the overlap of the two projections onto `axis` (0 if disjoint).
    pub fn overlap_along(&self, other: &Box3, axis: usize) -> f64 {
        (self.max[axis].min(other.max[axis]) - self.min[axis].max(other.min[axis])).max(0.0)
    }

    pub fn contains(&self, other: &Box3, tol: f64) -> bool {
        (0..3).all(|k| other.min[k] >= self.min[k] - tol && other.max[k] <= self.max[k] + tol)
    }

    pub fn translated(&self, d: [f64; 3]) -> Box3 {
        let mut b = *self;
        for k in 0..3 {
            b.min[k] += d[k];
            b.max[k] += d[k];
        }
        b
    }
}

/// Product of the per-axis positive overlaps of `a` and `b`.
pub fn overlap_volume(a: &Box3, b: &Box3) -> f64 {
    (0..3).map(|k| a.overlap_along(b, k)).product()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockType {
    pub id: u32,
    pub name: String,
    /// `(w, l, h)`: width along x, length along y, height along z.
    pub dims: [f64; 3],
}

impl BlockType {
    pub fn new(id: u32, dims: [f64; 3]) -> Self {
        BlockType { id, name: format!("type_{id}_block"), dims }
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }
}

/// Ordered list of block types. Type 0 is the table.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct BlockLibrary {
    types: Vec<BlockType>,
}

impl BlockLibrary {
    pub fn new(types: Vec<BlockType>) -> Result<Self, LibraryError> {
        if types.len() < 2 || !types.iter().any(|t| t.id == 0) {
            return Err(LibraryError::Empty);
        }
        for (i, t) in types.iter().enumerate() {
            if t.dims.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
                return Err(LibraryError::Degenerate { id: t.id, dims: t.dims });
            }
            if types[..i].iter().any(|u| u.id == t.id) {
                return Err(LibraryError::DuplicateId(t.id));
            }
        }
        Ok(BlockLibrary { types })
    }

    /// The library used throughout the tests and the CLI defaults: a
    /// 3 x 2 table and eight block types of pillars, beams, slabs and bricks.
    pub fn standard() -> Self {
        let dims: [[f64; 3]; 9] = [
            [3.0, 2.0, 0.1],   // 0 table
            [0.3, 0.3, 0.3],   // 1 cube
            [0.2, 0.2, 0.6],   // 2 pillar
            [1.0, 0.3, 0.15],  // 3 beam
            [0.8, 0.8, 0.15],  // 4 slab
            [0.4, 0.2, 0.2],   // 5 brick
            [0.3, 0.3, 0.8],   // 6 column
            [1.4, 0.6, 0.15],  // 7 plank
            [0.6, 0.4, 0.25],  // 8 block
        ];
        let types = dims.iter().enumerate().map(|(i, d)| BlockType::new(i as u32, *d)).collect();
        BlockLibrary::new(types).expect("standard library is valid")
    }

    pub fn types(&self) -> &[BlockType] {
        &self.types
    }

    /// All types except the table.
    pub fn block_types(&self) -> impl Iterator<Item = &BlockType> {
        self.types.iter().filter(|t| t.id != 0)
    }

    pub fn get(&self, id: u32) -> Result<&BlockType, LibraryError> {
        self.types.iter().find(|t| t.id == id).ok_or(LibraryError::UnknownType(id))
    }

    pub fn table(&self) -> &BlockType {
        self.get(0).expect("library always holds the table")
    }

    pub fn table_box(&self) -> Box3 {
        Box3::from_center(TABLE_CENTROID, self.table().dims)
    }

    /// Resolves a label such as `type_3_block`, `type_3` or a type name.
    pub fn resolve_label(&self, label: &str) -> Result<&BlockType, LibraryError> {
        if let Some(t) = self.types.iter().find(|t| t.name == label) {
            return Ok(t);
        }
        let id = label
            .strip_prefix("type_")
            .map(|rest| rest.strip_suffix("_block").unwrap_or(rest))
            .and_then(|n| n.parse::<u32>().ok());
        match id {
            Some(id) => self.get(id).map_err(|_| LibraryError::UnknownLabel(label.to_string())),
            None => Err(LibraryError::UnknownLabel(label.to_string())),
        }
    }
}

impl<'de> Deserialize<'de> for BlockLibrary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let types = Vec::<BlockType>::deserialize(d)?;
        BlockLibrary::new(types).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInstance {
    pub id: BlockId,
    pub type_id: u32,
    pub centroid: [f64; 3],
    #[serde(default)]
    pub hidden: bool,
}

/// Box of `block` given its type's dimensions.
pub fn aabb(block: &BlockInstance, lib: &BlockLibrary) -> Result<Box3, LibraryError> {
    let t = lib.get(block.type_id)?;
    Ok(Box3::from_center(block.centroid, t.dims))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { min: [-1.5, -1.0, 0.0], max: [1.5, 1.0, 5.0] }
    }
}

impl Bounds {
    pub fn as_box(&self) -> Box3 {
        Box3 { min: self.min, max: self.max }
    }

    pub fn half_extents(&self) -> [f64; 3] {
        [
            (self.max[0] - self.min[0]) / 2.0,
            (self.max[1] - self.min[1]) / 2.0,
            (self.max[2] - self.min[2]) / 2.0,
        ]
    }

    /// Moves the centroid of a box with `dims` so the box lies inside the
    /// bounds. Returns whether anything moved.
    pub fn clamp_centroid(&self, centroid: &mut [f64; 3], dims: [f64; 3]) -> bool {
        let mut moved = false;
        for k in 0..3 {
            let lo = self.min[k] + dims[k] / 2.0;
            let hi = self.max[k] - dims[k] / 2.0;
            let c = if lo > hi { (self.min[k] + self.max[k]) / 2.0 } else { centroid[k].clamp(lo, hi) };
            if (c - centroid[k]).abs() > 0.0 {
                centroid[k] = c;
                moved = true;
            }
        }
        moved
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub library: BlockLibrary,
    pub blocks: Vec<BlockInstance>,
    #[serde(default)]
    pub bounds: Bounds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    OutOfBounds { block: BlockId },
    Interpenetration { a: BlockId, b: BlockId, volume: f64 },
    BelowTable { block: BlockId },
    UnknownType { block: BlockId, type_id: u32 },
}

impl Scene {
    pub fn new(library: BlockLibrary) -> Self {
        Scene { library, blocks: Vec::new(), bounds: Bounds::default() }
    }

    pub fn with_blocks(library: BlockLibrary, blocks: Vec<BlockInstance>) -> Self {
        Scene { library, blocks, bounds: Bounds::default() }
    }

    pub fn block(&self, id: BlockId) -> Option<&BlockInstance> {
        self.blocks.iter().find(|b| b.id == id)
    }

    /// Box of a block, or the table box for [`BlockId::TABLE`].
    pub fn box_of(&self, id: BlockId) -> Option<Box3> {
        if id.is_table() {
            return Some(self.library.table_box());
        }
        self.block(id).and_then(|b| aabb(b, &self.library).ok())
    }

    pub fn boxes(&self) -> Vec<(BlockId, Box3)> {
        self.blocks
            .iter()
            .filter_map(|b| aabb(b, &self.library).ok().map(|bx| (b.id, bx)))
            .collect()
    }

    pub fn mass_of(&self, id: BlockId) -> f64 {
        self.block(id)
            .and_then(|b| self.library.get(b.type_id).ok())
            .map(|t| t.volume())
            .unwrap_or(0.0)
    }

    pub fn next_id(&self) -> BlockId {
        BlockId(self.blocks.iter().map(|b| b.id.0).max().map_or(0, |m| m + 1))
    }

    /// Scene restricted to the listed blocks.
    pub fn restricted(&self, ids: &[BlockId]) -> Scene {
        Scene {
            library: self.library.clone(),
            blocks: self.blocks.iter().filter(|b| ids.contains(&b.id)).cloned().collect(),
            bounds: self.bounds,
        }
    }

    pub fn visible(&self) -> Scene {
        Scene {
            library: self.library.clone(),
            blocks: self.blocks.iter().filter(|b| !b.hidden).cloned().collect(),
            bounds: self.bounds,
        }
    }
}

/// Reports out-of-bounds blocks, blocks below the table and block pairs
/// whose interpenetration exceeds [`PEN_TOL`]. Never fails.
pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    validate_scene_with(scene, PEN_TOL, 1e-6)
}

pub fn validate_scene_with(scene: &Scene, pen_tol: f64, tol: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    let bounds = scene.bounds.as_box();
    let mut boxes = Vec::with_capacity(scene.blocks.len());
    for b in &scene.blocks {
        match aabb(b, &scene.library) {
            Ok(bx) => {
                if bx.min[2] < -tol {
                    out.push(Violation::BelowTable { block: b.id });
                }
                if !bounds.contains(&bx, tol) {
                    out.push(Violation::OutOfBounds { block: b.id });
                }
                boxes.push((b.id, bx));
            }
            Err(_) => out.push(Violation::UnknownType { block: b.id, type_id: b.type_id }),
        }
    }
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            let v = overlap_volume(&boxes[i].1, &boxes[j].1);
            if v > pen_tol {
                out.push(Violation::Interpenetration { a: boxes[i].0, b: boxes[j].0, volume: v });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lib_with(dims: [f64; 3]) -> BlockLibrary {
        BlockLibrary::new(vec![BlockType::new(0, [3.0, 2.0, 0.1]), BlockType::new(1, dims)]).unwrap()
    }

    fn inst(id: i64, type_id: u32, c: [f64; 3]) -> BlockInstance {
        BlockInstance { id: BlockId(id), type_id, centroid: c, hidden: false }
    }

    #[test]
    fn unit_cube_box() {
        let lib = lib_with([1.0, 1.0, 1.0]);
        let b = aabb(&inst(0, 1, [0.0, 0.0, 0.5]), &lib).unwrap();
        assert_eq!(b.min, [-0.5, -0.5, 0.0]);
        assert_eq!(b.max, [0.5, 0.5, 1.0]);
    }

    #[test]
    fn offset_box() {
        let lib = lib_with([0.2, 0.4, 0.6]);
        let b = aabb(&inst(0, 1, [1.0, 0.0, 0.3]), &lib).unwrap();
        for (got, want) in b.min.iter().zip([0.9, -0.2, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in b.max.iter().zip([1.1, 0.2, 0.6]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_type_rejected() {
        let err = BlockLibrary::new(vec![BlockType::new(0, [3.0, 2.0, 0.1]), BlockType::new(1, [0.0, 1.0, 1.0])]);
        assert!(matches!(err, Err(LibraryError::Degenerate { id: 1, .. })));
    }

    #[test]
    fn unknown_type_is_error() {
        let lib = lib_with([1.0, 1.0, 1.0]);
        assert_eq!(aabb(&inst(0, 7, [0.0; 3]), &lib), Err(LibraryError::UnknownType(7)));
    }

    #[test]
    fn overlap_examples() {
        let a = Box3::from_center([0.0; 3], [1.0; 3]);
        assert!((overlap_volume(&a, &a) - 1.0).abs() < 1e-12);
        let touching = a.translated([1.0, 0.0, 0.0]);
        assert_eq!(overlap_volume(&a, &touching), 0.0);
        let half = a.translated([0.5, 0.0, 0.0]);
        assert!((overlap_volume(&a, &half) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn validate_examples() {
        let lib = lib_with([0.4, 0.4, 0.4]);
        let single = Scene::with_blocks(lib.clone(), vec![inst(0, 1, [0.0, 0.0, 0.2])]);
        assert!(validate_scene(&single).is_empty());

        let coincident =
            Scene::with_blocks(lib.clone(), vec![inst(0, 1, [0.0, 0.0, 0.2]), inst(1, 1, [0.0, 0.0, 0.2])]);
        let v = validate_scene(&coincident);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::Interpenetration { .. }));

        let outside = Scene::with_blocks(lib, vec![inst(0, 1, [2.0, 0.0, 0.2])]);
        assert_eq!(validate_scene(&outside), vec![Violation::OutOfBounds { block: BlockId(0) }]);
    }

    #[test]
    fn labels_resolve() {
        let lib = BlockLibrary::standard();
        assert_eq!(lib.resolve_label("type_3_block").unwrap().id, 3);
        assert_eq!(lib.resolve_label("type_3").unwrap().id, 3);
        assert!(lib.resolve_label("type_99").is_err());
        assert!(lib.resolve_label("pillar").is_err());
    }

    #[test]
    fn scene_json_roundtrip() {
        let lib = BlockLibrary::standard();
        let scene = Scene::with_blocks(lib, vec![inst(0, 2, [0.1, -0.2, 0.3])]);
        let s = serde_json::to_string(&scene).unwrap();
        assert!(s.starts_with("{\"library\":[{\"id\":0,\"name\":\"type_0_block\",\"dims\":[3.0,2.0,0.1]}"));
        let back: Scene = serde_json::from_str(&s).unwrap();
        assert_eq!(back, scene);
    }

    fn arb_box() -> impl Strategy<Value = Box3> {
        (prop::array::uniform3(-2.0f64..2.0), prop::array::uniform3(0.01f64..2.0))
            .prop_map(|(c, d)| Box3::from_center(c, d))
    }

    proptest! {
        #[test]
        fn overlap_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = overlap_volume(&a, &b);
            let ba = overlap_volume(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab <= a.volume().min(b.volume()) + 1e-12);
        }

        #[test]
        fn aabb_matches_type(type_idx in 1usize..9, c in prop::array::uniform3(-1.0f64..1.0)) {
            let lib = BlockLibrary::standard();
            let t = &lib.types()[type_idx];
            let b = aabb(&BlockInstance { id: BlockId(0), type_id: t.id, centroid: c, hidden: false }, &lib).unwrap();
            for k in 0..3 {
                prop_assert!((b.center()[k] - c[k]).abs() < 1e-12);
                prop_assert!((b.extent(k) - t.dims[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn validation_deterministic(xs in prop::collection::vec(-1.5f64..1.5, 1..6)) {
            let lib = BlockLibrary::standard();
            let blocks = xs.iter().enumerate().map(|(i, x)| inst(i as i64, 1, [*x, 0.0, 0.15])).collect();
            let scene = Scene::with_blocks(lib, blocks);
            prop_assert_eq!(validate_scene(&scene), validate_scene(&scene.clone()));
        }
    }
}
