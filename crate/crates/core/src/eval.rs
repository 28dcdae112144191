//! Synthetic evaluation corpus: generate a scene, render its front view,
//! parse the drawing back, ground it and score the result.

use crate::datagen::{compose_structure, render_frontview_sketch, rng_for, GenConfig, RenderConfig};
use crate::geometry::{BlockLibrary, Scene};
use crate::grounding::{ablation_iterate, ground_iterate, GroundingConfig, GroundingError, GroundingOutcome};
use crate::relations::{extract_frontview_graph, resemblance, ClassifierConfig, RelationGraph};
use crate::sampler::ModelSet;
use crate::sketchio::{parse_raster, RasterConfig};
use crate::stability::surviving_fraction_with;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Grounding(#[from] GroundingError),
}

/// The corpus is regenerated from these settings; no scene files ship.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub scenes: usize,
    pub seed: u64,
    pub levels: [usize; 2],
    #[serde(default)]
    pub gen: GenConfig,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { scenes: 15, seed: 1000, levels: [1, 3], gen: GenConfig::default(), render: RenderConfig::default(), classifier: ClassifierConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusCase {
    pub seed: u64,
    pub scene: Scene,
    /// Front-view graph parsed from the rendered drawing.
    pub sketch_graph: RelationGraph,
    /// Some generated block has no visible region in the drawing.
    pub hidden_required: bool,
}

/// Scenes whose drawing fails to parse back are skipped; the corpus keeps
/// drawing seeds until it has `cfg.scenes` cases.
pub fn build_corpus(cfg: &CorpusConfig, lib: &BlockLibrary) -> Vec<CorpusCase> {
    let mut out = Vec::new();
    let mut k = 0u64;
    while out.len() < cfg.scenes && k < 100 * cfg.scenes as u64 + 100 {
        let seed = cfg.seed.wrapping_add(k);
        k += 1;
        let mut rng = rng_for(seed);
        let levels = rng.random_range(cfg.levels[0]..=cfg.levels[1]);
        let Ok(s) = compose_structure(&mut rng, levels, lib, &cfg.gen) else { continue };
        let r = render_frontview_sketch(&s.scene, &cfg.render);
        // Drawn at a known scale: the parsed sketch keeps the visible width.
        let span = r.block_ids.iter().filter_map(|id| s.scene.box_of(*id)).fold([f64::INFINITY, f64::NEG_INFINITY], |a, b| [a[0].min(b.min[0]), a[1].max(b.max[0])]);
        let raster = RasterConfig { target_width: span[1] - span[0], ..cfg.render.raster.clone() };
        let Ok(sketch) = parse_raster(&r.image, &r.labels, lib, &raster) else { continue };
        let sketch_graph = extract_frontview_graph(&sketch, &cfg.classifier);
        out.push(CorpusCase { seed, hidden_required: r.block_ids.len() < s.scene.blocks.len(), scene: s.scene, sketch_graph });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub resemblance: f64,
    pub surviving_fraction: f64,
    pub success: bool,
    pub hidden_blocks: usize,
    pub iterations: usize,
}

impl RunMetrics {
    pub fn of(out: &GroundingOutcome, sketch: &RelationGraph, cfg: &GroundingConfig) -> Self {
        RunMetrics {
            resemblance: resemblance(sketch, &out.scene.visible(), &cfg.sampler.classifier).unwrap_or(0.0),
            surviving_fraction: surviving_fraction_with(&out.scene, &cfg.stability),
            success: out.success,
            hidden_blocks: out.hidden_blocks(),
            iterations: out.trace.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub seed: u64,
    pub blocks: usize,
    pub hidden_required: bool,
    pub full: RunMetrics,
    pub ablation: RunMetrics,
    /// Both runs produced the same scene.
    pub identical: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Population standard deviation; an empty slice gives zeros.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return MeanStd::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt(), n: xs.len() }
    }
}

/// Resemblance and stability for one split of the corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCells {
    pub resemblance: MeanStd,
    pub surviving_fraction: MeanStd,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodCells {
    pub without_hidden: SplitCells,
    pub with_hidden: SplitCells,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub cases: Vec<CaseResult>,
    pub full: MethodCells,
    pub ablation: MethodCells,
    /// Means over every case, full method.
    pub overall: SplitCells,
}

fn split(cases: &[&CaseResult], pick: impl Fn(&CaseResult) -> &RunMetrics) -> SplitCells {
    SplitCells {
        resemblance: MeanStd::of(&cases.iter().map(|c| pick(c).resemblance).collect::<Vec<_>>()),
        surviving_fraction: MeanStd::of(&cases.iter().map(|c| pick(c).surviving_fraction).collect::<Vec<_>>()),
    }
}

impl EvalSummary {
    pub fn from_cases(cases: Vec<CaseResult>) -> Self {
        let all: Vec<&CaseResult> = cases.iter().collect();
        let (hid, vis): (Vec<&CaseResult>, Vec<&CaseResult>) = all.iter().partition(|c| c.hidden_required);
        let cells = |f: fn(&CaseResult) -> &RunMetrics| MethodCells { without_hidden: split(&vis, f), with_hidden: split(&hid, f) };
        EvalSummary { full: cells(|c| &c.full), ablation: cells(|c| &c.ablation), overall: split(&all, |c| &c.full), cases }
    }
}

/// Grounds one case with and without repairs under the same seeds.
pub fn evaluate_case(case: &CorpusCase, lib: &BlockLibrary, models: &ModelSet, cfg: &GroundingConfig) -> Result<CaseResult, EvalError> {
    let full = ground_iterate(&case.sketch_graph, lib, models, cfg)?;
    let abl = ablation_iterate(&case.sketch_graph, lib, models, cfg)?;
    Ok(CaseResult {
        seed: case.seed,
        blocks: case.scene.blocks.len(),
        hidden_required: case.hidden_required,
        identical: full.scene == abl.scene,
        full: RunMetrics::of(&full, &case.sketch_graph, cfg),
        ablation: RunMetrics::of(&abl, &case.sketch_graph, cfg),
    })
}

pub fn evaluate_corpus(corpus: &[CorpusCase], lib: &BlockLibrary, models: &ModelSet, cfg: &GroundingConfig) -> Result<EvalSummary, EvalError> {
    let cases = corpus.iter().map(|c| evaluate_case(c, lib, models, cfg)).collect::<Result<Vec<_>, _>>()?;
    Ok(EvalSummary::from_cases(cases))
}
