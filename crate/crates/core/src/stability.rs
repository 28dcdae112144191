//! Quasi-static equilibrium of stacked axis-aligned blocks.
//!
//! Every contact patch carries a nonnegative vertical force at each of its
//! four corners. A scene is stable when there are corner forces that make
//! each block's net vertical force and its torques about the horizontal
//! axes through its centroid vanish. Patches are shrunk by a small margin
//! first so knife-edge balances count as unstable.

use crate::geometry::{BlockId, Scene};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub contact_tol: f64,
    pub margin: f64,
    pub g: f64,
    /// Largest phase-one objective still accepted as feasible, relative to
    /// a unit total weight.
    pub feas_tol: f64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig { contact_tol: 0.02, margin: 0.005, g: 9.81, feas_tol: 1e-9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect2 {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect2 {
    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]).max(0.0) * (self.max[1] - self.min[1]).max(0.0)
    }

    pub fn shrunk(&self, m: f64) -> Option<Rect2> {
        let r = Rect2 { min: [self.min[0] + m, self.min[1] + m], max: [self.max[0] - m, self.max[1] - m] };
        (r.max[0] >= r.min[0] && r.max[1] >= r.min[1]).then_some(r)
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        [
            [self.min[0], self.min[1]],
            [self.max[0], self.min[1]],
            [self.max[0], self.max[1]],
            [self.min[0], self.max[1]],
        ]
    }

    /// Signed distance from `p` to the nearest edge, positive inside.
    pub fn inset(&self, p: [f64; 2]) -> f64 {
        (p[0] - self.min[0]).min(self.max[0] - p[0]).min(p[1] - self.min[1]).min(self.max[1] - p[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub upper: BlockId,
    pub lower: BlockId,
    pub z: f64,
    pub patch: Rect2,
    /// Corners of the patch after shrinking by the stability margin. Empty
    /// when the patch is too thin to carry load.
    pub corners: Vec<[f64; 2]>,
}

/// One contact per face-coincident pair with positive footprint overlap,
/// plus table contacts for blocks resting on `z = 0`.
pub fn extract_contacts(scene: &Scene, contact_tol: f64) -> Vec<Contact> {
    extract_contacts_with(scene, contact_tol, StabilityConfig::default().margin)
}

pub fn extract_contacts_with(scene: &Scene, contact_tol: f64, margin: f64) -> Vec<Contact> {
    let mut boxes = scene.boxes();
    boxes.sort_by_key(|b| b.0);
    let table = scene.library.table_box();
    let mut out = Vec::new();
    for (uid, u) in &boxes {
        let lowers = std::iter::once((BlockId::TABLE, table)).chain(boxes.iter().filter(|(l, _)| l != uid).copied());
        for (lid, l) in lowers {
            if (u.min[2] - l.max[2]).abs() > contact_tol {
                continue;
            }
            let patch = Rect2 {
                min: [u.min[0].max(l.min[0]), u.min[1].max(l.min[1])],
                max: [u.max[0].min(l.max[0]), u.max[1].min(l.max[1])],
            };
            if patch.area() <= 1e-12 {
                continue;
            }
            let corners = patch.shrunk(margin).map(|r| r.corners().to_vec()).unwrap_or_default();
            out.push(Contact { upper: *uid, lower: lid, z: l.max[2], patch, corners });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub feasible: bool,
    pub survivors: Vec<BlockId>,
    /// Blocks with no chain of contacts down to the table.
    pub unsupported: Vec<BlockId>,
    pub contacts: Vec<Contact>,
    /// Corner forces per contact (in units of total weight) when feasible.
    pub forces: Option<Vec<Vec<f64>>>,
    pub residual: f64,
    pub surviving_fraction: f64,
}

/// Phase-one simplex for `A x = b, x >= 0` with Bland's rule. Returns a
/// feasible point or `None`.
pub fn lp_feasible(a: &[Vec<f64>], b: &[f64], tol: f64) -> Option<Vec<f64>> {
    let m = a.len();
    if m == 0 {
        return Some(Vec::new());
    }
    let n = a[0].len();
    let width = n + m + 1;
    let mut t = vec![vec![0.0; width]; m + 1];
    for i in 0..m {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[i][j] = sign * a[i][j];
        }
        t[i][n + i] = 1.0;
        t[i][width - 1] = sign * b[i];
    }
    for i in 0..m {
        for j in 0..n {
            t[m][j] -= t[i][j];
        }
        t[m][width - 1] -= t[i][width - 1];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    let pivot_eps = 1e-12;
    for _ in 0..100_000 {
        let Some(enter) = (0..n + m).find(|&j| t[m][j] < -1e-12) else { break };
        let mut leave: Option<usize> = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if t[i][enter] > pivot_eps {
                let ratio = t[i][width - 1] / t[i][enter];
                let better = match leave {
                    None => true,
                    Some(l) => ratio < best - 1e-15 || (ratio <= best + 1e-15 && basis[i] < basis[l]),
                };
                if better {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        let Some(r) = leave else { break };
        let p = t[r][enter];
        for v in t[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = t[r].clone();
        for (i, row) in t.iter_mut().enumerate() {
            if i != r && row[enter].abs() > 0.0 {
                let f = row[enter];
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
        basis[r] = enter;
    }
    if -t[m][width - 1] > tol {
        return None;
    }
    let mut x = vec![0.0; n];
    for (i, &bv) in basis.iter().enumerate() {
        if bv < n {
            x[bv] = t[i][width - 1].max(0.0);
        }
    }
    Some(x)
}

struct Solve {
    feasible: bool,
    forces: Option<Vec<Vec<f64>>>,
    residual: f64,
}

fn solve(scene: &Scene, contacts: &[Contact], cfg: &StabilityConfig) -> Solve {
    let blocks: Vec<(BlockId, [f64; 3], f64)> = scene
        .blocks
        .iter()
        .filter_map(|b| {
            let t = scene.library.get(b.type_id).ok()?;
            Some((b.id, b.centroid, t.volume()))
        })
        .collect();
    if blocks.is_empty() {
        return Solve { feasible: true, forces: Some(Vec::new()), residual: 0.0 };
    }
    let total: f64 = blocks.iter().map(|b| b.2 * cfg.g).sum();
    let row_of: BTreeMap<BlockId, usize> = blocks.iter().enumerate().map(|(i, b)| (b.0, i)).collect();
    let mut cols: Vec<(usize, [f64; 2])> = Vec::new();
    for (c, con) in contacts.iter().enumerate() {
        for p in &con.corners {
            cols.push((c, *p));
        }
    }
    let m = 3 * blocks.len();
    let mut a = vec![vec![0.0; cols.len()]; m];
    let mut rhs = vec![0.0; m];
    for (i, b) in blocks.iter().enumerate() {
        rhs[3 * i] = b.2 * cfg.g / total;
    }
    for (j, (c, p)) in cols.iter().enumerate() {
        let con = &contacts[*c];
        for (id, sign) in [(con.upper, 1.0), (con.lower, -1.0)] {
            if let Some(&i) = row_of.get(&id) {
                let ctr = blocks[i].1;
                a[3 * i][j] += sign;
                a[3 * i + 1][j] += sign * (p[1] - ctr[1]);
                a[3 * i + 2][j] += sign * (p[0] - ctr[0]);
            }
        }
    }
    match lp_feasible(&a, &rhs, cfg.feas_tol) {
        None => Solve { feasible: false, forces: None, residual: f64::NAN },
        Some(x) => {
            let residual = a
                .iter()
                .zip(&rhs)
                .map(|(row, r)| (row.iter().zip(&x).map(|(u, v)| u * v).sum::<f64>() - r).abs())
                .fold(0.0, f64::max);
            let mut forces = vec![Vec::new(); contacts.len()];
            for ((c, _), f) in cols.iter().zip(&x) {
                forces[*c].push(*f);
            }
            Solve { feasible: residual <= 1e-7, forces: Some(forces), residual }
        }
    }
}

/// Whether corner forces exist that hold every block of `scene` in place.
pub fn is_feasible(scene: &Scene, cfg: &StabilityConfig) -> bool {
    let contacts = extract_contacts_with(scene, cfg.contact_tol, cfg.margin);
    solve(scene, &contacts, cfg).feasible
}

fn unsupported(scene: &Scene, contacts: &[Contact]) -> Vec<BlockId> {
    let mut grounded: BTreeSet<BlockId> = BTreeSet::new();
    let mut changed = true;
    while changed {
        changed = false;
        for c in contacts.iter().filter(|c| !c.corners.is_empty()) {
            if (c.lower.is_table() || grounded.contains(&c.lower)) && grounded.insert(c.upper) {
                changed = true;
            }
        }
    }
    let mut out: Vec<BlockId> = scene.blocks.iter().map(|b| b.id).filter(|id| !grounded.contains(id)).collect();
    out.sort();
    out
}

/// Blocks kept by the greedy pass: in order of increasing base height,
/// each block is kept if the kept set plus it remains feasible.
pub fn greedy_survivors(scene: &Scene, cfg: &StabilityConfig) -> Vec<BlockId> {
    let mut order: Vec<(f64, BlockId)> =
        scene.boxes().into_iter().map(|(id, b)| (b.min[2], id)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<BlockId> = Vec::new();
    for (_, id) in order {
        kept.push(id);
        if !is_feasible(&scene.restricted(&kept), cfg) {
            kept.pop();
        }
    }
    kept.sort();
    kept
}

pub fn check_equilibrium(scene: &Scene) -> StabilityReport {
    check_equilibrium_with(scene, &StabilityConfig::default())
}

pub fn check_equilibrium_with(scene: &Scene, cfg: &StabilityConfig) -> StabilityReport {
    let contacts = extract_contacts_with(scene, cfg.contact_tol, cfg.margin);
    let s = solve(scene, &contacts, cfg);
    let n = scene.blocks.len();
    let survivors = if s.feasible {
        let mut all: Vec<BlockId> = scene.blocks.iter().map(|b| b.id).collect();
        all.sort();
        all
    } else {
        greedy_survivors(scene, cfg)
    };
    let surviving_fraction = if n == 0 { 1.0 } else { survivors.len() as f64 / n as f64 };
    StabilityReport {
        feasible: s.feasible,
        unsupported: unsupported(scene, &contacts),
        survivors,
        contacts,
        forces: if s.feasible { s.forces } else { None },
        residual: s.residual,
        surviving_fraction,
    }
}

/// Share of blocks that stay in place: 1 for a feasible scene, otherwise
/// the greedy survivor share.
pub fn surviving_fraction(scene: &Scene) -> f64 {
    surviving_fraction_with(scene, &StabilityConfig::default())
}

pub fn surviving_fraction_with(scene: &Scene, cfg: &StabilityConfig) -> f64 {
    if scene.blocks.is_empty() {
        return 1.0;
    }
    if is_feasible(scene, cfg) {
        return 1.0;
    }
    greedy_survivors(scene, cfg).len() as f64 / scene.blocks.len() as f64
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error("block {0} rests on more than one support")]
    NotApplicable(BlockId),
}

/// Per-block result of the tree oracle: how far the combined centre of
/// mass of the block and its load sits inside its support patch.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeVerdict {
    pub stable: bool,
    /// Smallest inset over all supported blocks; negative when some
    /// combined centre of mass lies outside its patch.
    pub min_inset: f64,
}

/// Exact check for forests of single supports: each block together with
/// everything it carries must have its centre of mass strictly inside the
/// contact patch beneath it.
pub fn tree_support_oracle(scene: &Scene) -> Result<bool, OracleError> {
    tree_support_verdict(scene, StabilityConfig::default().contact_tol).map(|v| v.stable)
}

pub fn tree_support_verdict(scene: &Scene, contact_tol: f64) -> Result<TreeVerdict, OracleError> {
    let contacts = extract_contacts_with(scene, contact_tol, 0.0);
    let mut support: BTreeMap<BlockId, &Contact> = BTreeMap::new();
    for c in &contacts {
        if support.insert(c.upper, c).is_some() {
            return Err(OracleError::NotApplicable(c.upper));
        }
    }
    let mut carried: BTreeMap<BlockId, Vec<BlockId>> = BTreeMap::new();
    for c in &contacts {
        carried.entry(c.lower).or_default().push(c.upper);
    }
    fn load(id: BlockId, scene: &Scene, carried: &BTreeMap<BlockId, Vec<BlockId>>) -> (f64, [f64; 2]) {
        let b = scene.block(id).expect("contact ids come from the scene");
        let m = scene.mass_of(id);
        let (mut mass, mut mx, mut my) = (m, m * b.centroid[0], m * b.centroid[1]);
        for &u in carried.get(&id).into_iter().flatten() {
            let (um, uc) = load(u, scene, carried);
            mass += um;
            mx += um * uc[0];
            my += um * uc[1];
        }
        (mass, [mx / mass, my / mass])
    }
    let mut stable = true;
    let mut min_inset = f64::INFINITY;
    for b in &scene.blocks {
        match support.get(&b.id) {
            None => {
                stable = false;
                min_inset = f64::NEG_INFINITY;
            }
            Some(c) => {
                let (_, com) = load(b.id, scene, &carried);
                let inset = c.patch.inset(com);
                min_inset = min_inset.min(inset);
                if inset <= 0.0 {
                    stable = false;
                }
            }
        }
    }
    Ok(TreeVerdict { stable, min_inset })
}
