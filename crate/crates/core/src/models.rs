//! Training and on-disk caching of per-relation denoisers.

use crate::datagen::{build_datasets, cfg_hash, DatasetConfig};
use crate::diffusion::{cosine_schedule, train_denoiser, ArchConfig, ArityMode, DenoiserData, DenoiserModel, DiffusionError, OptConfig};
use crate::geometry::BlockLibrary;
use crate::relations::{Arity, RelationKind};
use crate::sampler::ModelSet;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("{rel}: {got} training samples, need {need}")]
    TooFewSamples { rel: RelationKind, got: usize, need: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data: DatasetConfig,
    pub arch: ArchConfig,
    pub opt: OptConfig,
    /// Diffusion steps of the cosine schedule; must match the sampler's.
    pub schedule_steps: usize,
    pub schedule_offset: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: DatasetConfig::default(),
            arch: ArchConfig::desk(),
            opt: OptConfig::default(),
            schedule_steps: 200,
            schedule_offset: 0.008,
            seed: 1,
        }
    }
}

/// Relations a sketch graph can contain plus the placement relations
/// repairs add.
pub fn pipeline_relations() -> Vec<RelationKind> {
    let mut rels: Vec<RelationKind> = RelationKind::front_view().collect();
    rels.extend([RelationKind::FrontOf, RelationKind::DepthAligned]);
    rels
}

pub fn arity_mode(rel: RelationKind, max_slots: usize) -> ArityMode {
    match rel.arity() {
        Arity::Fixed(k) => ArityMode::Fixed(k),
        Arity::Variadic { .. } => ArityMode::Variadic { max_slots },
    }
}

/// Hash recorded in a relation's checkpoint; changes with any setting
/// that affects training.
pub fn model_hash(rel: RelationKind, cfg: &TrainConfig) -> String {
    cfg_hash(&(rel, cfg))
}

pub fn checkpoint_path(dir: &Path, rel: RelationKind, cfg: &TrainConfig) -> PathBuf {
    dir.join(format!("{}-{}.ckpt", rel.name(), &model_hash(rel, cfg)[..12]))
}

/// Trains one denoiser per relation on a shared synthetic dataset.
pub fn train_models(rels: &[RelationKind], lib: &BlockLibrary, cfg: &TrainConfig) -> Result<ModelSet, ModelError> {
    let sched = cosine_schedule(cfg.schedule_steps, cfg.schedule_offset)?;
    let (sets, _) = build_datasets(&cfg.data, rels, lib);
    let mut out = ModelSet::new();
    for &rel in rels {
        let samples = &sets[&rel];
        if samples.len() < cfg.opt.batch {
            return Err(ModelError::TooFewSamples { rel, got: samples.len(), need: cfg.opt.batch });
        }
        let arity = arity_mode(rel, cfg.data.max_slots);
        let data = DenoiserData::from_samples(samples, arity.slots())?;
        let trained = train_denoiser(&data, rel.name(), arity, &cfg.arch, &cfg.opt, &sched, cfg.seed)?;
        out.insert(rel, trained.model);
    }
    Ok(out)
}

/// Loads every relation whose checkpoint in `dir` carries the expected
/// hash and trains the rest, saving them.
pub fn load_or_train(dir: &Path, rels: &[RelationKind], lib: &BlockLibrary, cfg: &TrainConfig) -> Result<ModelSet, ModelError> {
    std::fs::create_dir_all(dir)?;
    let mut out = ModelSet::new();
    let mut missing = Vec::new();
    for &rel in rels {
        let path = checkpoint_path(dir, rel, cfg);
        match DenoiserModel::load(&path) {
            Ok((m, hash)) if hash == model_hash(rel, cfg) => {
                out.insert(rel, m);
            }
            _ => missing.push(rel),
        }
    }
    if !missing.is_empty() {
        for (rel, m) in train_models(&missing, lib, cfg)? {
            m.save(&checkpoint_path(dir, rel, cfg), &model_hash(rel, cfg))?;
            out.insert(rel, m);
        }
    }
    Ok(out)
}

/// Reads every checkpoint in `dir`, keyed by the relation it was trained
/// for. Later files for the same relation replace earlier ones in name
/// order.
pub fn load_dir(dir: &Path) -> Result<ModelSet, ModelError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    let mut out = ModelSet::new();
    for p in paths {
        let (m, _) = DenoiserModel::load(&p)?;
        if let Some(rel) = RelationKind::from_name(&m.relation) {
            out.insert(rel, m);
        }
    }
    Ok(out)
}
