use sketchstack::diffusion::{ArchConfig, OptConfig};
use sketchstack::geometry::{BlockId, BlockInstance, BlockLibrary, Scene};
use sketchstack::grounding::GroundingConfig;
use sketchstack::models::TrainConfig;
use sketchstack::datagen::DatasetConfig;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sketchstack"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny models on a short schedule, shared by training and grounding.
fn quick_config(dir: &Path) -> PathBuf {
    let train = TrainConfig {
        data: DatasetConfig { samples_per_relation: 40, max_scenes: 5000, ..Default::default() },
        arch: ArchConfig { hidden: 8, time_hidden: 12, heads: 2, ..ArchConfig::desk() },
        opt: OptConfig { steps: 2, batch: 8, ..Default::default() },
        schedule_steps: 6,
        ..Default::default()
    };
    let mut grounding = GroundingConfig { max_iters: 2, local_chains: 1, ..Default::default() };
    grounding.sampler.sched = sketchstack::diffusion::cosine_schedule(6, 0.008).unwrap();
    grounding.sampler.inner_steps = 1;
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::json!({ "train": train, "grounding": grounding }).to_string()).unwrap();
    path
}

#[test]
fn check_reports_floating_block_as_infeasible() {
    let o = run(&["check", s(&data("floating.json"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["feasible"], false);
    assert_eq!(report["surviving_fraction"], 0.0);
}

#[test]
fn bad_inputs_exit_two() {
    assert_eq!(code(&run(&["check", "/no/such/scene.json"])), 2);
    assert_eq!(code(&run(&["check", s(&data("bridge.json"))])), 2);
    assert_eq!(code(&run(&["train", "--relations", "left-of,no-such-relation"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    // No checkpoints in the directory.
    assert_eq!(code(&run(&["ground", s(&data("bridge.json")), "--models", s(dir.path())])), 2);
}

#[test]
fn export_orders_by_base_height() {
    let dir = tempfile::tempdir().unwrap();
    let b = |i, t, c| BlockInstance { id: BlockId(i), type_id: t, centroid: c, hidden: false };
    let tower = Scene::with_blocks(
        BlockLibrary::standard(),
        vec![b(0, 1, [0.0, 0.0, 0.75]), b(1, 1, [0.0, 0.0, 0.15]), b(2, 1, [0.0, 0.0, 0.45]), b(3, 1, [-0.5, 0.0, 0.15])],
    );
    let scene = dir.path().join("tower.json");
    std::fs::write(&scene, serde_json::to_string(&tower).unwrap()).unwrap();
    let out = dir.path().join("poses.ndjson");
    let o = run(&["export", s(&scene), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let zs: Vec<f64> = lines.iter().map(|l| l["centroid"][2].as_f64().unwrap()).collect();
    assert_eq!(zs, vec![0.15, 0.15, 0.45, 0.75]);
    // Tie on base height broken by x.
    assert_eq!(lines[0]["centroid"][0], -0.5);
    assert_eq!(lines[0]["index"], 0);
    assert_eq!(lines[3]["type"], "type_1_block");

    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, serde_json::to_string(&Scene::new(BlockLibrary::standard())).unwrap()).unwrap();
    let out = dir.path().join("empty.ndjson");
    assert_eq!(code(&run(&["export", s(&empty), "--out", s(&out)])), 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn train_then_ground_bridge_sketch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let models = dir.path().join("models");
    let o = run(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&models)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(models.join("train.json").exists());

    let scene = dir.path().join("scene.json");
    let trace = dir.path().join("trace.json");
    let bridge = data("bridge.json");
    let args = ["ground", s(&bridge), "--config", s(&cfg), "--seed", "3", "--models", s(&models), "--trace", s(&trace), "--out", s(&scene)];
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let grounded: Scene = serde_json::from_str(&std::fs::read_to_string(&scene).unwrap()).unwrap();
    assert!(grounded.blocks.len() >= 3);
    let t: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert_eq!(t["seed"], 3);
    assert!(!t["iterations"].as_array().unwrap().is_empty());
    assert!(t["cfg_hash"].as_str().unwrap().len() == 64);

    // Same seed, same output.
    let again = dir.path().join("again.json");
    let mut args2 = args;
    args2[args2.len() - 1] = s(&again);
    assert_eq!(code(&run(&args2)), 0);
    assert_eq!(std::fs::read(&scene).unwrap(), std::fs::read(&again).unwrap());

    let abl = dir.path().join("abl.json");
    let o = run(&["ground", s(&data("bridge.json")), "--config", s(&cfg), "--models", s(&models), "--ablation", "--max-iters", "1", "--out", s(&abl)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let g: Scene = serde_json::from_str(&std::fs::read_to_string(&abl).unwrap()).unwrap();
    assert!(g.blocks.iter().all(|b| !b.hidden));

    let summary = dir.path().join("eval.json");
    let o = run(&["eval", "--config", s(&cfg), "--models", s(&models), "--scenes", "2", "--max-iters", "1", "--out", s(&summary)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let e: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    let cases = e["summary"]["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 2);
    for method in ["full", "ablation"] {
        for split in ["without_hidden", "with_hidden"] {
            for metric in ["resemblance", "surviving_fraction"] {
                assert!(e["summary"][method][split][metric]["mean"].is_number());
            }
        }
    }
    let mean: f64 = cases.iter().map(|c| c["full"]["resemblance"].as_f64().unwrap()).sum::<f64>() / 2.0;
    assert!((e["summary"]["overall"]["resemblance"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
}

#[test]
fn gen_data_writes_datasets_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let out = dir.path().join("data");
    let o = run(&["gen-data", "--config", s(&cfg), "--relations", "left-of,supported-by-fully", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["counts"]["left-of"], 40);
    let (h, samples) = sketchstack::datagen::read_dataset(&out.join("left-of.bin")).unwrap();
    assert_eq!(samples.len(), 40);
    assert_eq!(h.cfg_hash, m["cfg_hash"].as_str().unwrap());
}
