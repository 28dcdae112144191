use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sketchstack::datagen::{build_datasets, cfg_hash, write_dataset, Manifest};
use sketchstack::eval::{build_corpus, evaluate_corpus, CorpusConfig};
use sketchstack::geometry::{validate_scene, BlockLibrary, Scene};
use sketchstack::grounding::{ablation_iterate, ground_iterate, GroundingConfig, GroundingError};
use sketchstack::models::{arity_mode, checkpoint_path, load_dir, load_or_train, pipeline_relations, ModelError, TrainConfig};
use sketchstack::relations::{extract_frontview_graph, RelationKind};
use sketchstack::sampler::SamplerError;
use sketchstack::sketchio::{parse_raster_files, parse_structured, RasterConfig};
use sketchstack::stability::check_equilibrium_with;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

mod export;

#[derive(Parser)]
#[command(name = "sketchstack", version, about = "Ground front-view block sketches into stable 3D block arrangements")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate per-relation training datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Comma-separated relation names; defaults to every relation the
        /// pipeline uses.
        #[arg(long, value_delimiter = ',')]
        relations: Vec<String>,
    },
    /// Train (or load cached) denoisers into a checkpoint directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        relations: Vec<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Ground a sketch (structured JSON, or PNG with a label sidecar).
    Ground {
        sketch: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: PathBuf,
        /// Label sidecar of a PNG sketch; defaults to `<sketch>.labels.json`.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Re-sample only; never add hidden supports.
        #[arg(long)]
        ablation: bool,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Static-equilibrium report of a scene.
    Check {
        scene: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Ground the synthetic corpus with and without repairs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Goal poses of a scene as newline-delimited JSON, lowest first.
    Export {
        scene: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    train: TrainConfig,
    grounding: GroundingConfig,
    corpus: CorpusConfig,
    raster: RasterConfig,
    library: Option<BlockLibrary>,
}

impl RunConfig {
    fn library(&self) -> BlockLibrary {
        self.library.clone().unwrap_or_else(BlockLibrary::standard)
    }
}

#[derive(Debug)]
enum CliError {
    /// Bad input: exit code 2.
    Invalid(String),
    /// Anything else: exit code 1.
    Internal(String),
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::TooFewSamples { .. } => CliError::Invalid(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<GroundingError> for CliError {
    fn from(e: GroundingError) -> Self {
        match e {
            GroundingError::Sampler(SamplerError::ModelMissing(_) | SamplerError::Config(_)) | GroundingError::Graph(_) => {
                CliError::Invalid(e.to_string())
            }
            _ => CliError::Internal(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &common.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.train.data.seed = seed;
        cfg.grounding.sampler.seed = seed;
        cfg.corpus.seed = seed;
    }
    cfg.grounding.sampler.validate().map_err(invalid)?;
    Ok(cfg)
}

fn relations(names: &[String]) -> Result<Vec<RelationKind>> {
    if names.is_empty() {
        return Ok(pipeline_relations());
    }
    names.iter().map(|n| RelationKind::from_name(n.trim()).ok_or_else(|| invalid(format!("unknown relation {n:?}")))).collect()
}

/// Writes `text` to `out`, or stdout when there is none.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(internal)?;
            }
            std::fs::write(p, text).map_err(|e| internal(format!("{}: {e}", p.display())))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn gen_data(common: &Common, names: &[String]) -> Result<()> {
    let cfg = load_config(common)?;
    let rels = relations(names)?;
    let lib = cfg.library();
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    std::fs::create_dir_all(&dir).map_err(internal)?;
    let data = &cfg.train.data;
    let hash = cfg_hash(data);
    let (sets, scenes) = build_datasets(data, &rels, &lib);
    for (rel, samples) in &sets {
        let slots = arity_mode(*rel, data.max_slots).slots();
        write_dataset(&dir.join(format!("{}.bin", rel.name())), *rel, samples, slots, data.seed, &hash).map_err(internal)?;
    }
    let manifest = Manifest {
        seed: data.seed,
        scenes,
        counts: sets.iter().map(|(r, s)| (r.name().to_string(), s.len())).collect(),
        cfg_hash: hash,
        config: data.clone(),
    };
    emit(Some(&dir.join("manifest.json")), &pretty(&manifest))
}

fn train(common: &Common, names: &[String], steps: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = steps {
        cfg.train.opt.steps = s;
    }
    let rels = relations(names)?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("models"));
    load_or_train(&dir, &rels, &cfg.library(), &cfg.train)?;
    let files: Vec<String> = rels.iter().map(|r| checkpoint_path(&dir, *r, &cfg.train).display().to_string()).collect();
    let report = serde_json::json!({ "checkpoints": files, "cfg_hash": cfg_hash(&cfg.train), "config": cfg.train });
    emit(Some(&dir.join("train.json")), &pretty(&report))
}

#[derive(Serialize)]
struct GroundTrace<'a> {
    seed: u64,
    cfg_hash: String,
    config: &'a GroundingConfig,
    ablation: bool,
    success: bool,
    exhausted: bool,
    best_iteration: usize,
    iterations: &'a [sketchstack::grounding::IterationTrace],
}

fn ground(
    sketch: &Path,
    common: &Common,
    models: &Path,
    labels: Option<&Path>,
    max_iters: Option<usize>,
    ablation: bool,
    trace: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(m) = max_iters {
        cfg.grounding.max_iters = m;
    }
    let lib = cfg.library();
    let parsed = if sketch.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        let sidecar = labels.map(Path::to_path_buf).unwrap_or_else(|| sketch.with_extension("labels.json"));
        parse_raster_files(sketch, &sidecar, &lib, &cfg.raster)
    } else {
        parse_structured(sketch, &lib, cfg.raster.target_width)
    }
    .map_err(invalid)?;
    let graph = extract_frontview_graph(&parsed, &cfg.grounding.sampler.classifier);
    let models = load_dir(models).map_err(|e| invalid(format!("{}: {e}", models.display())))?;
    let out = if ablation { ablation_iterate(&graph, &lib, &models, &cfg.grounding)? } else { ground_iterate(&graph, &lib, &models, &cfg.grounding)? };
    if let Some(t) = trace {
        let record = GroundTrace {
            seed: cfg.grounding.sampler.seed,
            cfg_hash: cfg_hash(&cfg.grounding),
            config: &cfg.grounding,
            ablation,
            success: out.success,
            exhausted: out.exhausted,
            best_iteration: out.best_iteration,
            iterations: &out.trace,
        };
        emit(Some(t), &pretty(&record))?;
    }
    emit(common.out.as_deref(), &pretty(&out.scene))
}

fn read_scene(path: &Path) -> Result<Scene> {
    let scene: Scene = read_json(path)?;
    let bad: Vec<_> = validate_scene(&scene)
        .into_iter()
        .filter(|v| matches!(v, sketchstack::geometry::Violation::UnknownType { .. }))
        .collect();
    if !bad.is_empty() {
        return Err(invalid(format!("{}: {bad:?}", path.display())));
    }
    Ok(scene)
}

fn check(scene: &Path, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let scene = read_scene(scene)?;
    let report = check_equilibrium_with(&scene, &cfg.grounding.stability);
    emit(common.out.as_deref(), &pretty(&report))
}

fn eval(common: &Common, models: &Path, max_iters: Option<usize>, scenes: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(m) = max_iters {
        cfg.grounding.max_iters = m;
    }
    if let Some(n) = scenes {
        cfg.corpus.scenes = n;
    }
    let lib = cfg.library();
    let models = load_dir(models).map_err(|e| invalid(format!("{}: {e}", models.display())))?;
    let corpus = build_corpus(&cfg.corpus, &lib);
    let summary = evaluate_corpus(&corpus, &lib, &models, &cfg.grounding).map_err(|e| match e {
        sketchstack::eval::EvalError::Grounding(g) => CliError::from(g),
    })?;
    let report = serde_json::json!({
        "summary": summary,
        "cfg_hash": cfg_hash(&(&cfg.corpus, &cfg.grounding)),
        "corpus": cfg.corpus,
        "grounding": cfg.grounding,
    });
    emit(common.out.as_deref(), &pretty(&report))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::GenData { common, relations } => gen_data(&common, &relations),
        Command::Train { common, relations, steps } => train(&common, &relations, steps),
        Command::Ground { sketch, common, models, labels, max_iters, ablation, trace } => {
            ground(&sketch, &common, &models, labels.as_deref(), max_iters, ablation, trace.as_deref())
        }
        Command::Check { scene, common } => check(&scene, &common),
        Command::Eval { common, models, max_iters, scenes } => eval(&common, &models, max_iters, scenes),
        Command::Export { scene, common } => {
            let scene = read_scene(&scene)?;
            let out = common.out.ok_or_else(|| invalid("export needs --out"))?;
            export::export_goal_poses(&scene, &out).map_err(internal)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(1)
        }
    }
}
