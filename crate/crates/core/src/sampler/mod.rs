//! Compositional sampling over a relation graph.
//!
//! Every geometric edge contributes its relation model's noise estimate
//! to the slots of its operands. The summed estimate drives annealed
//! Langevin steps from pure noise down to level 1.

use crate::datagen::{denormalize_vec, normalize_vec};
use crate::diffusion::{cosine_schedule, Batch, DenoiserModel, DiffusionError, NoiseSchedule};
use crate::geometry::{BlockId, BlockLibrary, Bounds, Box3, TABLE_CENTROID};
use crate::relations::{eval_geom, type_dims, ClassifierConfig, RelationEdge, RelationGraph, RelationKind};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type ModelSet = BTreeMap<RelationKind, DenoiserModel>;

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("no model for relation {0}")]
    ModelMissing(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Noise std `sqrt(beta_t)`, as in a reverse diffusion step.
    #[default]
    Diffusion,
    /// Noise std `sqrt(2 beta_t)`, the Langevin step for step size `beta_t`.
    Ula,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub sched: NoiseSchedule,
    /// Langevin iterations per noise level.
    pub inner_steps: usize,
    /// Per-relation edge weights; missing relations weigh 1.
    #[serde(default)]
    pub weights: BTreeMap<RelationKind, f64>,
    pub noise_mode: NoiseMode,
    pub seed: u64,
    /// Divides each block's step by the total weight of its edges.
    pub precondition: bool,
    pub classifier: ClassifierConfig,
    pub bounds: Bounds,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            sched: cosine_schedule(200, 0.008).expect("valid schedule"),
            inner_steps: 5,
            weights: BTreeMap::new(),
            noise_mode: NoiseMode::Diffusion,
            seed: 0,
            precondition: true,
            classifier: ClassifierConfig::default(),
            bounds: Bounds::default(),
        }
    }
}

impl SamplerConfig {
    pub fn weight(&self, rel: RelationKind) -> f64 {
        self.weights.get(&rel).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.inner_steps == 0 {
            return Err(SamplerError::Config("inner_steps must be at least 1".into()));
        }
        if let Some((r, w)) = self.weights.iter().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(SamplerError::Config(format!("weight {w} for {}", r.name())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Block(usize),
    Table,
}

/// The diffusing blocks of a graph and its edges as slot lists.
#[derive(Clone, Debug)]
pub struct Problem {
    pub ids: Vec<BlockId>,
    pub dims: Vec<[f64; 3]>,
    pub edges: Vec<RelationEdge>,
    slots: Vec<Vec<Slot>>,
    table_dims: [f64; 3],
}

impl Problem {
    pub fn new(graph: &RelationGraph, lib: &BlockLibrary) -> Result<Self, SamplerError> {
        let ids: Vec<BlockId> = graph.nodes.iter().map(|n| n.id).collect();
        let dims = graph.nodes.iter().map(|n| type_dims(lib, n.type_id)).collect();
        let mut slots = Vec::with_capacity(graph.geom_edges.len());
        for e in &graph.geom_edges {
            let mut s = Vec::with_capacity(e.operands.len());
            for o in &e.operands {
                if o.is_table() {
                    s.push(Slot::Table);
                } else {
                    let i = ids.iter().position(|id| id == o).ok_or_else(|| SamplerError::Config(format!("operand {o} is not a node")))?;
                    s.push(Slot::Block(i));
                }
            }
            slots.push(s);
        }
        Ok(Problem { ids, dims, edges: graph.geom_edges.clone(), slots, table_dims: lib.table().dims })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Total edge weight per block.
    fn degree(&self, cfg: &SamplerConfig) -> Vec<f64> {
        let mut d = vec![0.0; self.len()];
        for (e, s) in self.edges.iter().zip(&self.slots) {
            for slot in s {
                if let Slot::Block(i) = slot {
                    d[*i] += cfg.weight(e.rel);
                }
            }
        }
        d
    }
}

/// Summed noise estimates for a batch of pose vectors at level `t`.
///
/// `poses` is `chains x 3n` and `table` is `chains x 3`, both normalized;
/// the table row is the table pose at the same noise level. Returns the
/// composite score and, per chain and edge, the norm of that edge's
/// weighted estimate.
pub fn composite_score(
    models: &ModelSet,
    problem: &Problem,
    poses: &Array2<f64>,
    table: &Array2<f64>,
    t: usize,
    cfg: &SamplerConfig,
) -> Result<(Array2<f64>, Array2<f64>), SamplerError> {
    let chains = poses.nrows();
    let mut score = Array2::zeros(poses.raw_dim());
    let mut norms = Array2::zeros((chains, problem.edges.len()));
    let mut by_rel: BTreeMap<RelationKind, Vec<usize>> = BTreeMap::new();
    for (k, e) in problem.edges.iter().enumerate() {
        by_rel.entry(e.rel).or_default().push(k);
    }
    for (rel, edges) in by_rel {
        let model = models.get(&rel).ok_or_else(|| SamplerError::ModelMissing(rel.name().to_string()))?;
        let s = model.slots();
        let rows = chains * edges.len();
        let mut p = Array2::zeros((rows, s * 3));
        let mut g = Array2::zeros((rows, s * 3));
        let mut mask = Vec::with_capacity(rows);
        for c in 0..chains {
            for &k in &edges {
                let r = mask.len();
                let ops = &problem.slots[k];
                if ops.len() > s {
                    return Err(DiffusionError::Arity { got: ops.len(), max: s }.into());
                }
                for (j, slot) in ops.iter().enumerate() {
                    let (pose, dims) = match slot {
                        Slot::Block(i) => ([poses[[c, 3 * i]], poses[[c, 3 * i + 1]], poses[[c, 3 * i + 2]]], problem.dims[*i]),
                        Slot::Table => ([table[[c, 0]], table[[c, 1]], table[[c, 2]]], problem.table_dims),
                    };
                    let gn = normalize_vec(dims);
                    for d in 0..3 {
                        p[[r, 3 * j + d]] = pose[d];
                        g[[r, 3 * j + d]] = gn[d];
                    }
                }
                mask.push((0..s).map(|j| j < ops.len()).collect());
            }
        }
        let eps = model.predict(&Batch { p, g, t: vec![t; rows], mask })?;
        let w = cfg.weight(rel);
        for c in 0..chains {
            for (n, &k) in edges.iter().enumerate() {
                let r = c * edges.len() + n;
                let mut sq = 0.0;
                for (j, slot) in problem.slots[k].iter().enumerate() {
                    for d in 0..3 {
                        let v = w * eps[[r, 3 * j + d]];
                        sq += v * v;
                        if let Slot::Block(i) = slot {
                            score[[c, 3 * i + d]] += v;
                        }
                    }
                }
                norms[[c, k]] = sq.sqrt();
            }
        }
    }
    Ok((score, norms))
}

/// `B_t` times the mode factor times `xi`. Both modes scale the same
/// product, so the ULA increment is the diffusion increment times `sqrt 2`.
pub fn noise_increment(xi: &[f64], t: usize, sched: &NoiseSchedule, mode: NoiseMode) -> Vec<f64> {
    let b = sched.beta[t].sqrt();
    xi.iter()
        .map(|x| {
            let inc = b * x;
            match mode {
                NoiseMode::Diffusion => inc,
                NoiseMode::Ula => inc * std::f64::consts::SQRT_2,
            }
        })
        .collect()
}

/// `p - A_t score + B_t xi` with `A_t = beta_t / sqrt(1 - alpha_bar_t)`.
pub fn ula_step(p: &[f64], score: &[f64], xi: &[f64], t: usize, sched: &NoiseSchedule, mode: NoiseMode) -> Vec<f64> {
    let a = sched.beta[t] / (1.0 - sched.alpha_bar[t]).sqrt();
    let noise = noise_increment(xi, t, sched, mode);
    p.iter().zip(score).zip(&noise).map(|((p, s), n)| p - a * s + n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeCheck {
    pub edge: RelationEdge,
    pub pass: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub edges: Vec<EdgeCheck>,
    /// Sum of per-edge estimate norms at each level, index `t - 1`.
    pub energy: Vec<f64>,
    /// Blocks whose final pose was moved back inside the bounds.
    pub clamped: Vec<BlockId>,
}

impl Diagnostics {
    pub fn all_pass(&self) -> bool {
        self.edges.iter().all(|e| e.pass)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposedSample {
    pub ids: Vec<BlockId>,
    pub centroids: Vec<[f64; 3]>,
    pub diagnostics: Diagnostics,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// One chain seeded by `cfg.seed`.
pub fn sample_composed(graph: &RelationGraph, lib: &BlockLibrary, models: &ModelSet, cfg: &SamplerConfig) -> Result<ComposedSample, SamplerError> {
    Ok(sample_composed_chains(graph, lib, models, cfg, 1)?.remove(0))
}

/// Independent chains evaluated in one batch. Chain `c` draws from stream
/// `c` of the generator seeded with `cfg.seed`, so its result does not
/// depend on how many chains run alongside it.
pub fn sample_composed_chains(
    graph: &RelationGraph,
    lib: &BlockLibrary,
    models: &ModelSet,
    cfg: &SamplerConfig,
    chains: usize,
) -> Result<Vec<ComposedSample>, SamplerError> {
    cfg.validate()?;
    let problem = Problem::new(graph, lib)?;
    for e in &problem.edges {
        if !models.contains_key(&e.rel) {
            return Err(SamplerError::ModelMissing(e.rel.name().to_string()));
        }
    }
    let n = problem.len();
    let mut rngs: Vec<ChaCha8Rng> = (0..chains)
        .map(|c| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(c as u64);
            r
        })
        .collect();
    let mut p = Array2::zeros((chains, 3 * n));
    for (c, rng) in rngs.iter_mut().enumerate() {
        for k in 0..3 * n {
            p[[c, k]] = gauss(rng);
        }
    }
    let scale: Vec<f64> = if cfg.precondition {
        problem.degree(cfg).into_iter().map(|d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect()
    } else {
        vec![1.0; n]
    };
    let table0 = normalize_vec(TABLE_CENTROID);
    let sched = &cfg.sched;
    let mut energy = vec![vec![0.0; sched.steps]; chains];
    let mut table = Array2::zeros((chains, 3));
    for t in (1..=sched.steps).rev() {
        let ab = sched.alpha_bar[t];
        for _ in 0..cfg.inner_steps {
            for (c, rng) in rngs.iter_mut().enumerate() {
                for d in 0..3 {
                    table[[c, d]] = ab.sqrt() * table0[d] + (1.0 - ab).sqrt() * gauss(rng);
                }
            }
            let (score, norms) = composite_score(models, &problem, &p, &table, t, cfg)?;
            for (c, rng) in rngs.iter_mut().enumerate() {
                energy[c][t - 1] = norms.row(c).sum();
                // The last level is a pure denoising step, as in the ancestral chain.
                let xi: Vec<f64> = (0..3 * n).map(|_| if t > 1 { gauss(rng) } else { 0.0 }).collect();
                let row: Vec<f64> = p.row(c).to_vec();
                let s: Vec<f64> = (0..3 * n).map(|k| score[[c, k]] * scale[k / 3]).collect();
                let xi: Vec<f64> = xi.iter().enumerate().map(|(k, x)| x * scale[k / 3].sqrt()).collect();
                let next = ula_step(&row, &s, &xi, t, sched, cfg.noise_mode);
                for (k, v) in next.into_iter().enumerate() {
                    p[[c, k]] = v;
                }
            }
        }
    }
    let table_box = lib.table_box();
    let mut out = Vec::with_capacity(chains);
    for (c, energy) in energy.into_iter().enumerate() {
        let mut centroids = Vec::with_capacity(n);
        let mut clamped = Vec::new();
        for i in 0..n {
            let mut x = denormalize_vec([p[[c, 3 * i]], p[[c, 3 * i + 1]], p[[c, 3 * i + 2]]]);
            if cfg.bounds.clamp_centroid(&mut x, problem.dims[i]) {
                clamped.push(problem.ids[i]);
            }
            centroids.push(x);
        }
        let boxes: Vec<Box3> = centroids.iter().zip(&problem.dims).map(|(c, d)| Box3::from_center(*c, *d)).collect();
        let mut edges = Vec::with_capacity(problem.edges.len());
        for (e, s) in problem.edges.iter().zip(&problem.slots) {
            let ops: Vec<Box3> = s.iter().map(|slot| if let Slot::Block(i) = slot { boxes[*i] } else { table_box }).collect();
            let pass = eval_geom(e.rel, &ops, &cfg.classifier).unwrap_or(false);
            edges.push(EdgeCheck { edge: e.clone(), pass });
        }
        out.push(ComposedSample { ids: problem.ids.clone(), centroids, diagnostics: Diagnostics { edges, energy, clamped } });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
