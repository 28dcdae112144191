use super::*;
use crate::diffusion::{ArchConfig, ArityMode, DenoiserModel};
use crate::relations::{eval_geom, ClassifierConfig};
use crate::sampler::SamplerError;
use proptest::prelude::*;

fn id(i: i64) -> BlockId {
    BlockId(i)
}

fn block(i: i64, type_id: u32, c: [f64; 3]) -> BlockInstance {
    BlockInstance { id: id(i), type_id, centroid: c, hidden: false }
}

/// A deep slab on one thin pillar, its centre of mass behind the pillar.
fn overhang_scene() -> Scene {
    Scene::with_blocks(BlockLibrary::standard(), vec![block(0, 2, [0.0, 0.0, 0.3]), block(1, 4, [0.0, 0.2, 0.675])])
}

fn graph(types: &[u32], edges: &[(RelationKind, i64, i64)]) -> RelationGraph {
    let mut g = RelationGraph {
        nodes: types.iter().enumerate().map(|(i, &t)| GraphNode { id: id(i as i64), type_id: t, hidden: false }).collect(),
        ..Default::default()
    };
    for &(r, a, b) in edges {
        g.add_edge(RelationEdge::pair(r, id(a), if b < 0 { BlockId::TABLE } else { id(b) }));
    }
    g
}

fn stack_graph() -> RelationGraph {
    graph(&[2, 4], &[(RelationKind::SupportedByFully, 0, -1), (RelationKind::SupportedByFully, 1, 0)])
}

fn stack() -> PatternInstance {
    PatternInstance::new(PatternKind::SingleBlockStack, vec![id(0)], vec![id(1)])
}

fn tiny_models(kinds: &[RelationKind]) -> ModelSet {
    let arch = ArchConfig { hidden: 8, time_hidden: 12, heads: 2, ..ArchConfig::desk() };
    kinds.iter().enumerate().map(|(i, &k)| (k, DenoiserModel::new(k.name(), ArityMode::Fixed(2), arch.clone(), i as u64))).collect()
}

fn quick_cfg() -> GroundingConfig {
    let mut cfg = GroundingConfig::default();
    cfg.sampler.sched = crate::diffusion::cosine_schedule(8, 0.008).unwrap();
    cfg.sampler.inner_steps = 1;
    cfg.local_chains = 1;
    cfg
}

#[test]
fn rules_run_relax_then_promote_then_extend() {
    let rules = standard_rules();
    let first = |a| rules.iter().position(|r| r.action == a).unwrap();
    assert!(first(RepairAction::RelaxRelation) < first(RepairAction::PromotePattern));
    assert!(first(RepairAction::PromotePattern) < first(RepairAction::ExtendPattern));
}

#[test]
fn stack_candidates_relax_then_add_rear_pillar() {
    let g = stack_graph();
    let rules = standard_rules();
    let c = repair_candidates(&stack(), &g, &rules, id(2));
    assert_eq!(c.len(), 2);
    assert_eq!(c[0].rule, "relax-stack");
    assert_eq!(c[0].relaxed, vec![(RelationEdge::pair(RelationKind::SupportedByFully, id(1), id(0)), RelationEdge::pair(RelationKind::SupportedByPartially, id(1), id(0)))]);
    assert!(c[0].nodes.is_empty());

    let p = &c[1];
    assert_eq!(p.rule, "stack-to-bridge");
    assert_eq!(p.nodes, vec![GraphNode { id: id(2), type_id: 2, hidden: true }]);
    for e in [
        RelationEdge::pair(RelationKind::FrontOf, id(0), id(2)),
        RelationEdge::pair(RelationKind::DepthAligned, id(0), id(2)),
        RelationEdge::pair(RelationKind::SupportedByFully, id(1), id(2)),
        RelationEdge::pair(RelationKind::SupportedByFully, id(2), BlockId::TABLE),
    ] {
        assert!(p.edges.contains(&e), "{e:?}");
    }
    for d in &c {
        assert!(delta_valid(&stack(), d, &g, &rules), "{}", d.rule);
    }
    assert_eq!(repair_subgraph(&stack(), &g, &rules).unwrap().rule, "relax-stack");
}

#[test]
fn bridges_extend_by_one_pillar() {
    use RelationKind::SupportedByFully as Sbf;
    let g = graph(&[2, 2, 3], &[(Sbf, 0, -1), (Sbf, 1, -1), (Sbf, 2, 0), (Sbf, 2, 1)]);
    let inst = PatternInstance::new(PatternKind::TwoPillarSingleTopBridge, vec![id(0), id(1)], vec![id(2)]);
    let rules = standard_rules();
    let d = repair_subgraph(&inst, &g, &rules).unwrap();
    assert_eq!(d.rule, "extend-two-pillar");
    let mut grown = g.clone();
    d.apply(&mut grown);
    assert!(eval_pattern(PatternKind::NPillarSingleTopBridge, &[id(0), id(1), id(3)], &[id(2)], &grown).unwrap());
}

#[test]
fn pyramids_have_no_rule() {
    use RelationKind::{SupportedByFully as Sbf, TouchingAlongX as Tx};
    let g = graph(&[1, 1, 3], &[(Sbf, 0, -1), (Sbf, 1, -1), (Sbf, 2, 0), (Sbf, 2, 1), (Tx, 0, 1)]);
    let inst = PatternInstance::new(PatternKind::TwoBaseSingleOverheadPyramid, vec![id(0), id(1)], vec![id(2)]);
    assert!(matches!(repair_subgraph(&inst, &g, &standard_rules()), Err(GroundingError::RepairExhausted(_))));
}

#[test]
fn behind_placement_touches_and_is_behind() {
    let lib = BlockLibrary::standard();
    let cfg = ClassifierConfig::default();
    let anchor = block(0, 2, [0.3, -0.2, 0.3]);
    let c = place_behind(&anchor, 2, &lib, &Default::default());
    assert_eq!(c, [0.3, 0.0, 0.3]);
    let a = Box3::from_center(anchor.centroid, type_dims(&lib, 2));
    let h = Box3::from_center(c, type_dims(&lib, 2));
    for rel in [RelationKind::FrontOf, RelationKind::DepthAligned, RelationKind::TouchingAlongY] {
        assert!(eval_geom(rel, &[a, h], &cfg).unwrap(), "{rel:?}");
    }
    // Against the back wall the block is pushed inside the bounds.
    let wall = block(0, 2, [0.0, 0.85, 0.3]);
    assert!((place_behind(&wall, 2, &lib, &Default::default())[1] - 0.9).abs() < 1e-12);
}

#[test]
fn settle_drops_and_lifts() {
    let lib = BlockLibrary::standard();
    let s = Scene::with_blocks(
        lib,
        vec![block(0, 1, [0.0, 0.0, 0.2]), block(1, 1, [0.1, 0.0, 0.4]), block(2, 1, [0.9, 0.0, 0.1])],
    );
    let out = settle(&s, 0.03, 0.1);
    assert!((out.blocks[0].centroid[2] - 0.15).abs() < 1e-12);
    // Sank 0.05 into its support before the drop, rests on it after.
    assert!((out.blocks[1].centroid[2] - 0.45).abs() < 1e-12);
    assert!((out.blocks[2].centroid[2] - 0.15).abs() < 1e-12);
    assert_eq!(out.blocks[1].centroid[0], 0.1);
}

#[test]
fn rear_pillar_stabilizes_overhang() {
    let scene = overhang_scene();
    let cfg = GroundingConfig::default();
    assert!(!is_feasible(&scene, &cfg.stability));
    let geom = extract_scene_graph(&scene, &cfg.sampler.classifier);
    let inst = decompose(&geom, &scene).into_iter().map(|d| d.instance).find(|i| i.pattern != PatternKind::Unmatched).unwrap();
    assert_eq!(inst, stack());
    let rules = standard_rules();
    let cands = repair_candidates(&inst, &stack_graph(), &rules, id(2));
    let lib = BlockLibrary::standard();
    let none = ModelSet::new();
    // Relaxing moves nothing, so the scene stays unstable.
    assert_eq!(local_check(&inst, &cands[0], &stack_graph(), &scene, &lib, &none, &cfg, 0).unwrap(), None);
    let hidden = local_check(&inst, &cands[1], &stack_graph(), &scene, &lib, &none, &cfg, 0).unwrap().unwrap();
    assert_eq!(hidden.len(), 1);
    assert!(hidden[0].hidden);
    let mut fixed = scene.clone();
    fixed.blocks.extend(hidden);
    assert!(is_feasible(&fixed, &cfg.stability));
    assert!((surviving_fraction_with(&fixed, &cfg.stability) - 1.0).abs() < 1e-12);
}

#[test]
fn missing_models_are_reported() {
    let err = ground_iterate(&stack_graph(), &BlockLibrary::standard(), &ModelSet::new(), &quick_cfg()).unwrap_err();
    assert!(matches!(err, GroundingError::Sampler(SamplerError::ModelMissing(_))));
}

#[test]
fn empty_graph_is_a_no_op() {
    let out = ablation_iterate(&RelationGraph::default(), &BlockLibrary::standard(), &ModelSet::new(), &quick_cfg()).unwrap();
    assert!(out.success);
    assert!(out.scene.blocks.is_empty());
    assert_eq!(out.trace.len(), 1);
}

#[test]
fn zero_iterations_is_one_unrepaired_attempt() {
    let models = tiny_models(&[RelationKind::SupportedByFully, RelationKind::SupportedByPartially, RelationKind::FrontOf, RelationKind::DepthAligned]);
    let cfg = GroundingConfig { max_iters: 0, ..quick_cfg() };
    let out = ground_iterate(&stack_graph(), &BlockLibrary::standard(), &models, &cfg).unwrap();
    assert_eq!(out.trace.len(), 1);
    assert_eq!(out.graph, stack_graph());
    assert!(out.trace[0].added_nodes.is_empty() && out.trace[0].relaxed.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn loop_is_deterministic_monotone_and_bounded(seed in 0u64..1000, iters in 1usize..4) {
        let models = tiny_models(&[RelationKind::SupportedByFully, RelationKind::SupportedByPartially, RelationKind::FrontOf, RelationKind::DepthAligned]);
        let mut cfg = GroundingConfig { max_iters: iters, ..quick_cfg() };
        cfg.sampler.seed = seed;
        let lib = BlockLibrary::standard();
        let a = ground_iterate(&stack_graph(), &lib, &models, &cfg).unwrap();
        let b = ground_iterate(&stack_graph(), &lib, &models, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.trace.len() <= iters);
        let mut g = stack_graph();
        for rec in &a.trace {
            prop_assert_eq!(rec.nodes, g.nodes.len());
            for n in &rec.added_nodes {
                prop_assert!(n.hidden);
            }
            let before = g.clone();
            for (old, new) in &rec.relaxed {
                g.remove_edge(old);
                g.add_edge(new.clone());
            }
            for n in &rec.added_nodes {
                g.add_node(n.clone());
            }
            for e in &rec.added_edges {
                g.add_edge(e.clone());
            }
            for n in &before.nodes {
                prop_assert!(g.node(n.id).is_some());
            }
            for e in &before.geom_edges {
                prop_assert!(g.has_edge(e) || rec.relaxed.iter().any(|(old, _)| old == e));
            }
        }
        let abl = ablation_iterate(&stack_graph(), &lib, &models, &cfg).unwrap();
        prop_assert_eq!(abl.hidden_blocks(), 0);
        prop_assert!(abl.trace.iter().all(|r| r.added_nodes.is_empty() && r.relaxed.is_empty()));
        // The first round samples the same graph with the same seed.
        prop_assert_eq!(&abl.trace[0].verdicts, &a.trace[0].verdicts);
    }
}
