use super::*;

fn sched() -> NoiseSchedule {
    cosine_schedule(200, 0.008).unwrap()
}

fn small(arity: ArityMode, seed: u64) -> DenoiserModel {
    let arch = ArchConfig { hidden: 8, time_hidden: 12, heads: 2, ..ArchConfig::desk() };
    DenoiserModel::new("test", arity, arch, seed)
}

#[test]
fn schedule_shape() {
    let s = cosine_schedule(1500, 0.008).unwrap();
    assert!((s.alpha_bar[0] - 1.0).abs() < 1e-6);
    assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    assert!(s.alpha_bar[1500] < 1e-6);
    assert_eq!(s.beta[1500], 0.999);
    assert!(s.beta[1..].iter().all(|b| (1e-6..=0.999).contains(b)));
    assert!(matches!(cosine_schedule(0, 0.008), Err(DiffusionError::Config(_))));
}

#[test]
fn forward_noise_edges_and_variance() {
    let s = sched();
    assert_eq!(forward_noise(&[0.3, -0.2], 0, &[1.0, 2.0], &s).unwrap(), vec![0.3, -0.2]);
    let last = forward_noise(&[0.3], 200, &[0.7], &s).unwrap()[0];
    assert!((last - 0.7).abs() < 1e-3);
    assert!(matches!(forward_noise(&[0.0], 3, &[0.0, 1.0], &s), Err(DiffusionError::Shape(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = 100;
    let a = s.alpha_bar[t];
    let n = 100_000;
    let mut xs = Vec::with_capacity(n);
    for _ in 0..n {
        let p0 = 0.5 + 0.3 * gauss(&mut rng);
        let e = gauss(&mut rng);
        xs.push(forward_noise(&[p0], t, &[e], &s).unwrap()[0]);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let want = a * 0.09 + (1.0 - a);
    assert!((var - want).abs() / want < 0.02, "{var} vs {want}");
    assert!((mean - a.sqrt() * 0.5).abs() < 0.01);
}

#[test]
fn gradients_match_finite_differences() {
    let s = sched();
    for seed in 0..4u64 {
        for arity in [ArityMode::Fixed(2), ArityMode::Variadic { max_slots: 4 }] {
            let m = small(arity, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
            let (b, e) = random_batch(&m, 3, &s, &mut rng);
            let err = grad_check(&m, &b, &e, GradFault::None, seed);
            assert!(err <= 1e-4, "{arity:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn corrupted_backward_is_caught() {
    let s = sched();
    let m = small(ArityMode::Fixed(2), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, e) = random_batch(&m, 3, &s, &mut rng);
    assert!(grad_check(&m, &b, &e, GradFault::Silu, 3) >= 1e-2);
    assert!(grad_check(&m, &b, &e, GradFault::MatMulRhs, 3) >= 1e-2);
}

#[test]
fn zero_loss_point_has_zero_gradient() {
    let s = sched();
    let mut m = small(ArityMode::Fixed(2), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, _) = random_batch(&m, 2, &s, &mut rng);
    let target = m.predict(&b).unwrap();
    let (loss, g) = m.loss_and_grad(&b, &target, Some(GradFault::None));
    assert!(loss < 1e-20);
    assert!(g.unwrap().iter().all(|t| t.iter().all(|x| x.abs() < 1e-8)));
    for t in &mut m.params.tensors {
        t.fill(0.0);
    }
    assert!(m.predict(&b).unwrap().iter().all(|x| *x == 0.0));
}

#[test]
fn batch_rows_are_independent() {
    let s = sched();
    for arity in [ArityMode::Fixed(2), ArityMode::Variadic { max_slots: 3 }] {
        let m = small(arity, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (b, _) = random_batch(&m, 2, &s, &mut rng);
        let both = m.predict(&b).unwrap();
        for r in 0..2 {
            let one = Batch {
                p: b.p.slice(ndarray::s![r..r + 1, ..]).to_owned(),
                g: b.g.slice(ndarray::s![r..r + 1, ..]).to_owned(),
                t: vec![b.t[r]],
                mask: vec![b.mask[r].clone()],
            };
            let single = m.predict(&one).unwrap();
            for c in 0..both.ncols() {
                assert!((both[[r, c]] - single[[0, c]]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn masked_slots_are_zero_and_ignored() {
    let s = sched();
    let m = small(ArityMode::Variadic { max_slots: 4 }, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut b, _) = random_batch(&m, 1, &s, &mut rng);
    b.mask = vec![vec![true, true, false, false]];
    let first = m.predict(&b).unwrap();
    assert!(first.row(0).iter().skip(6).all(|x| *x == 0.0));
    b.p[[0, 7]] = 5.0;
    b.g[[0, 10]] = 0.9;
    let second = m.predict(&b).unwrap();
    assert_eq!(first, second);
}

#[test]
fn variadic_output_permutes_with_operands() {
    let s = sched();
    let arch = ArchConfig { hidden: 8, time_hidden: 12, heads: 2, slot_encoding: false, ..ArchConfig::desk() };
    let m = DenoiserModel::new("grid", ArityMode::Variadic { max_slots: 3 }, arch, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (b, _) = random_batch(&m, 1, &s, &mut rng);
    let b = Batch { mask: vec![vec![true; 3]], ..b };
    let out = m.predict(&b).unwrap();
    let perm = [2usize, 0, 1];
    let mut pb = b.clone();
    for (dst, &src) in perm.iter().enumerate() {
        for d in 0..3 {
            pb.p[[0, dst * 3 + d]] = b.p[[0, src * 3 + d]];
            pb.g[[0, dst * 3 + d]] = b.g[[0, src * 3 + d]];
        }
    }
    let pout = m.predict(&pb).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        for d in 0..3 {
            assert!((pout[[0, dst * 3 + d]] - out[[0, src * 3 + d]]).abs() < 1e-12);
        }
    }
}

#[test]
fn arity_and_precondition_errors() {
    let m = small(ArityMode::Fixed(2), 0);
    assert!(matches!(denoise_step(&m, &[0.0; 9], &[0.0; 9], 5, 3), Err(DiffusionError::Arity { got: 3, max: 2 })));
    let empty = DenoiserData { g: vec![], p: vec![], count: vec![] };
    let r = train_denoiser(&empty, "x", ArityMode::Fixed(2), &ArchConfig::tiny(), &OptConfig::default(), &sched(), 0);
    assert!(matches!(r, Err(DiffusionError::Precondition { .. })));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = small(ArityMode::Variadic { max_slots: 3 }, 11);
    m.save(&path, "h").unwrap();
    let (back, hash) = DenoiserModel::load(&path).unwrap();
    assert_eq!(hash, "h");
    assert_eq!(back.arity, m.arity);
    for (a, b) in m.params.tensors.iter().zip(&back.params.tensors) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    std::fs::write(&path, b"12").unwrap();
    assert!(DenoiserModel::load(&path).is_err());
}

#[test]
fn training_is_reproducible_and_learns_a_point() {
    let s = cosine_schedule(50, 0.008).unwrap();
    let target = [0.2, -0.1, 0.3, -0.4, 0.1, 0.05];
    let data = DenoiserData { g: vec![vec![0.1; 6]; 128], p: vec![target.to_vec(); 128], count: vec![2; 128] };
    let opt = OptConfig { steps: 2000, batch: 64, ..OptConfig::default() };
    let arch = ArchConfig { hidden: 64, time_hidden: 64, ..ArchConfig::desk() };
    let a = train_denoiser(&data, "pt", ArityMode::Fixed(2), &arch, &opt, &s, 3).unwrap();
    let b = train_denoiser(&data, "pt", ArityMode::Fixed(2), &arch, &opt, &s, 3).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert!(a.losses.last().unwrap() < &a.losses[0]);
    let mut m = a.model;
    m.norm = vec![1.0; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = sample_chains(&m, &[[0.1; 3], [0.1; 3]], &s, 100, &mut rng).unwrap();
    let close = draws.iter().filter(|d| d.iter().zip(&target).all(|(x, y)| (x - y).abs() < 0.05)).count();
    assert!(close >= 95, "{close}");
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    assert_eq!(sample_single(&m, &[[0.1; 3], [0.1; 3]], &s, &mut r1).unwrap(), sample_single(&m, &[[0.1; 3], [0.1; 3]], &s, &mut r2).unwrap());
}

#[test]
fn gaussian_toy_matches_analytic_optimum() {
    let s = sched();
    let (mu, sigma) = (0.5, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 4096;
    let data = DenoiserData {
        g: vec![vec![]; n],
        p: (0..n).map(|_| vec![mu + sigma * gauss(&mut rng)]).collect(),
        count: vec![1; n],
    };
    let arch = ArchConfig { hidden: 32, time_hidden: 64, pose_dim: 1, geom_dim: 0, ..ArchConfig::desk() };
    let opt = OptConfig { steps: 3000, batch: 128, ..OptConfig::default() };
    let m = train_denoiser(&data, "toy", ArityMode::Fixed(1), &arch, &opt, &s, 5).unwrap().model;
    let optimum = |x: f64, t: usize| {
        let a = s.alpha_bar[t];
        (x - a.sqrt() * mu) * (1.0 - a).sqrt() / (a * sigma * sigma + 1.0 - a)
    };
    let eval = |xs: &[f64], t: &[usize]| {
        let b = Batch { p: Array2::from_shape_vec((xs.len(), 1), xs.to_vec()).unwrap(), g: Array2::zeros((xs.len(), 0)), t: t.to_vec(), mask: vec![vec![true]; xs.len()] };
        m.predict(&b).unwrap().column(0).to_vec()
    };

    // Over uniform t, E[(eps_hat - eps)^2] - E[(eps_opt - eps)^2] = E[(eps_hat - eps_opt)^2].
    let rows = 4000;
    let t: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=s.steps)).collect();
    let (mut xs, mut base) = (Vec::new(), 0.0);
    for &ti in &t {
        let e = gauss(&mut rng);
        let x = forward_noise(&[mu + sigma * gauss(&mut rng)], ti, &[e], &s).unwrap()[0];
        base += (optimum(x, ti) - e).powi(2);
        xs.push(x);
    }
    let hat = eval(&xs, &t);
    let gap: f64 = hat.iter().zip(&xs).zip(&t).map(|((h, x), ti)| (h - optimum(*x, *ti)).powi(2)).sum();
    assert!(gap <= 0.05 * base, "gap {} vs baseline {}", gap / rows as f64, base / rows as f64);

    let th = s.steps / 2;
    let a = s.alpha_bar[th];
    let xs: Vec<f64> = (0..rows).map(|_| a.sqrt() * mu + (a * sigma * sigma + 1.0 - a).sqrt() * gauss(&mut rng)).collect();
    let hat = eval(&xs, &vec![th; rows]);
    let (mut num, mut den) = (0.0, 0.0);
    for (h, x) in hat.iter().zip(&xs) {
        let score_hat = -h / (1.0 - a).sqrt();
        let score = -(x - a.sqrt() * mu) / (a * sigma * sigma + 1.0 - a);
        num += (score_hat - score).powi(2);
        den += score * score;
    }
    assert!((num / den).sqrt() <= 0.05, "relative score rms {}", (num / den).sqrt());
}
