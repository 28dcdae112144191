use super::*;
use crate::diffusion::{ArchConfig, ArityMode};
use crate::relations::GraphNode;
use proptest::prelude::*;

fn tiny(rel: RelationKind, seed: u64) -> DenoiserModel {
    let arch = ArchConfig { hidden: 8, time_hidden: 12, heads: 2, ..ArchConfig::desk() };
    DenoiserModel::new(rel.name(), ArityMode::Fixed(2), arch, seed)
}

fn models() -> ModelSet {
    let mut m = ModelSet::new();
    m.insert(RelationKind::LeftOf, tiny(RelationKind::LeftOf, 1));
    m.insert(RelationKind::SupportedByFully, tiny(RelationKind::SupportedByFully, 2));
    m
}

fn graph(n: i64, edges: &[(RelationKind, i64, i64)]) -> RelationGraph {
    let mut g = RelationGraph { nodes: (0..n).map(|i| GraphNode { id: BlockId(i), type_id: 1, hidden: false }).collect(), ..Default::default() };
    for &(r, a, b) in edges {
        g.add_edge(RelationEdge::pair(r, BlockId(a), BlockId(b)));
    }
    g
}

fn state(chains: usize, n: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = Array2::from_shape_fn((chains, 3 * n), |_| gauss(&mut rng));
    let t = Array2::from_shape_fn((chains, 3), |_| gauss(&mut rng));
    (p, t)
}

fn direct(model: &DenoiserModel, p: [f64; 6], t: usize) -> Vec<f64> {
    let g = normalize_vec([0.3; 3]);
    let gg = [g, g].concat();
    crate::diffusion::denoise_step(model, &p, &gg, t, 2).unwrap()
}

#[test]
fn single_edge_equals_model_output() {
    let lib = BlockLibrary::standard();
    let ms = models();
    let pr = Problem::new(&graph(3, &[(RelationKind::LeftOf, 2, 0)]), &lib).unwrap();
    let (p, tb) = state(1, 3, 1);
    let (s, norms) = composite_score(&ms, &pr, &p, &tb, 40, &SamplerConfig::default()).unwrap();
    let want = direct(&ms[&RelationKind::LeftOf], [p[[0, 6]], p[[0, 7]], p[[0, 8]], p[[0, 0]], p[[0, 1]], p[[0, 2]]], 40);
    for d in 0..3 {
        assert_eq!(s[[0, 6 + d]], want[d]);
        assert_eq!(s[[0, d]], want[3 + d]);
        assert_eq!(s[[0, 3 + d]], 0.0);
    }
    assert!((norms[[0, 0]] - want.iter().map(|x| x * x).sum::<f64>().sqrt()).abs() < 1e-12);
}

#[test]
fn shared_block_sums_contributions() {
    let lib = BlockLibrary::standard();
    let ms = models();
    let g = graph(3, &[(RelationKind::LeftOf, 0, 1), (RelationKind::SupportedByFully, 1, 2)]);
    let pr = Problem::new(&g, &lib).unwrap();
    let (p, tb) = state(1, 3, 2);
    let (s, _) = composite_score(&ms, &pr, &p, &tb, 7, &SamplerConfig::default()).unwrap();
    let row = |i: usize| [p[[0, 3 * i]], p[[0, 3 * i + 1]], p[[0, 3 * i + 2]]];
    let a = direct(&ms[&RelationKind::LeftOf], [row(0), row(1)].concat().try_into().unwrap(), 7);
    let b = direct(&ms[&RelationKind::SupportedByFully], [row(1), row(2)].concat().try_into().unwrap(), 7);
    for d in 0..3 {
        assert!((s[[0, d]] - a[d]).abs() < 1e-12);
        assert!((s[[0, 3 + d]] - (a[3 + d] + b[d])).abs() < 1e-12);
        assert!((s[[0, 6 + d]] - b[3 + d]).abs() < 1e-12);
    }
}

#[test]
fn disjoint_union_is_sum_of_parts() {
    let lib = BlockLibrary::standard();
    let ms = models();
    let e1 = [(RelationKind::LeftOf, 0, 1)];
    let e2 = [(RelationKind::SupportedByFully, 2, 3), (RelationKind::LeftOf, 1, 3)];
    let both: Vec<_> = e1.iter().chain(&e2).copied().collect();
    let (p, tb) = state(3, 4, 3);
    let cfg = SamplerConfig::default();
    let score = |e: &[(RelationKind, i64, i64)]| composite_score(&ms, &Problem::new(&graph(4, e), &lib).unwrap(), &p, &tb, 90, &cfg).unwrap().0;
    let sum = score(&e1) + score(&e2);
    let all = score(&both);
    assert!(all.iter().zip(sum.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn table_operand_uses_given_pose() {
    let lib = BlockLibrary::standard();
    let ms = models();
    let mut g = graph(1, &[]);
    g.add_edge(RelationEdge::pair(RelationKind::SupportedByFully, BlockId(0), BlockId::TABLE));
    let pr = Problem::new(&g, &lib).unwrap();
    let (p, tb) = state(1, 1, 4);
    let (s, _) = composite_score(&ms, &pr, &p, &tb, 12, &SamplerConfig::default()).unwrap();
    let gb = normalize_vec([0.3; 3]);
    let gt = normalize_vec(lib.table().dims);
    let pt = [p[[0, 0]], p[[0, 1]], p[[0, 2]], tb[[0, 0]], tb[[0, 1]], tb[[0, 2]]];
    let want = crate::diffusion::denoise_step(&ms[&RelationKind::SupportedByFully], &pt, &[gb, gt].concat(), 12, 2).unwrap();
    for d in 0..3 {
        assert_eq!(s[[0, d]], want[d]);
    }
}

#[test]
fn missing_model_and_bad_config() {
    let lib = BlockLibrary::standard();
    let g = graph(2, &[(RelationKind::NearAlongX, 0, 1)]);
    let r = sample_composed(&g, &lib, &models(), &SamplerConfig::default());
    assert!(matches!(r, Err(SamplerError::ModelMissing(n)) if n == "near-along-x"));
    let cfg = SamplerConfig { inner_steps: 0, ..Default::default() };
    assert!(matches!(sample_composed(&graph(1, &[]), &lib, &models(), &cfg), Err(SamplerError::Config(_))));
    let mut cfg = SamplerConfig::default();
    cfg.weights.insert(RelationKind::LeftOf, -1.0);
    assert!(cfg.validate().is_err());
}

#[test]
fn noise_modes_differ_by_sqrt_two_exactly() {
    let s = cosine_schedule(200, 0.008).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in [1, 50, 200] {
        let xi: Vec<f64> = (0..9).map(|_| gauss(&mut rng)).collect();
        let d = noise_increment(&xi, t, &s, NoiseMode::Diffusion);
        let u = noise_increment(&xi, t, &s, NoiseMode::Ula);
        for (a, b) in d.iter().zip(&u) {
            assert_eq!((a * std::f64::consts::SQRT_2).to_bits(), b.to_bits());
        }
    }
}

#[test]
fn sampling_is_deterministic_and_terminates_on_conflicts() {
    let lib = BlockLibrary::standard();
    let g = graph(2, &[(RelationKind::LeftOf, 0, 1), (RelationKind::LeftOf, 1, 0)]);
    let cfg = SamplerConfig { sched: cosine_schedule(20, 0.008).unwrap(), inner_steps: 2, seed: 9, ..Default::default() };
    let a = sample_composed(&g, &lib, &models(), &cfg).unwrap();
    let b = sample_composed(&g, &lib, &models(), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.diagnostics.energy.len(), 20);
    assert_eq!(a.diagnostics.edges.len(), 2);
    assert!(!a.diagnostics.all_pass());
    let many = sample_composed_chains(&g, &lib, &models(), &cfg, 3).unwrap();
    for (x, y) in many[0].centroids.iter().flatten().zip(a.centroids.iter().flatten()) {
        assert!((x - y).abs() < 1e-9);
    }
    for s in &many {
        for (c, id) in s.centroids.iter().zip(&s.ids) {
            let dims = type_dims(&lib, 1);
            let b = Box3::from_center(*c, dims);
            assert!(cfg.bounds.as_box().contains(&b, 1e-9) || s.diagnostics.clamped.contains(id));
        }
    }
}

proptest! {
    #[test]
    fn zero_score_zero_noise_is_identity(p in prop::collection::vec(-3.0f64..3.0, 6), t in 1usize..=200) {
        let s = cosine_schedule(200, 0.008).unwrap();
        let next = ula_step(&p, &[0.0; 6], &[0.0; 6], t, &s, NoiseMode::Ula);
        prop_assert_eq!(next, p);
    }

    #[test]
    fn step_norm_is_bounded(
        p in prop::collection::vec(-3.0f64..3.0, 6),
        sc in prop::collection::vec(-5.0f64..5.0, 6),
        xi in prop::collection::vec(-3.0f64..3.0, 6),
        t in 1usize..=200,
        ula in any::<bool>(),
    ) {
        let s = cosine_schedule(200, 0.008).unwrap();
        let mode = if ula { NoiseMode::Ula } else { NoiseMode::Diffusion };
        let next = ula_step(&p, &sc, &xi, t, &s, mode);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let step: Vec<f64> = next.iter().zip(&p).map(|(a, b)| a - b).collect();
        let a = s.beta[t] / (1.0 - s.alpha_bar[t]).sqrt();
        let f = if ula { std::f64::consts::SQRT_2 } else { 1.0 };
        prop_assert!(norm(&step) <= a * norm(&sc) + f * s.beta[t].sqrt() * norm(&xi) + 1e-9);
    }
}
