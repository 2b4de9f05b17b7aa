use mecdiff::data::{load_csv, split_indices, synth_coupled, write_points_csv, Checkpoint, Normalizer, SyntheticSpec, TabularDataset};
use mecdiff::denoiser::time_embedding;
use mecdiff::diffusion::{cfg_noise, ddim_step, ddim_timesteps, forward_sample, sample};
use mecdiff::mec::{clip_ratios, ReplayBuffer};
use mecdiff::metrics::{discrete_mec_oracle, entropy, foscttm, nn_project};
use mecdiff::numkit::{adam_step, clip_global_norm};
use mecdiff::rng;
use mecdiff::{AdamState, CondInput, Denoiser, DenoiserConfig, DiffusionModel, NoiseSchedule, ParamStore, SampleConfig, Tape, Tensor};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    rng::normal_tensor(&mut rng::seeded(seed), rows, cols)
}

fn small_model(data_dim: usize, seed: u64) -> DiffusionModel {
    let mut r = rng::seeded(seed);
    let cfg = DenoiserConfig { data_dim, cond_dim: None, hidden_dims: vec![8, 8], time_embed_dim: 4, cond_drop_prob: 0.1 };
    let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
    DiffusionModel::new(Denoiser::new_unconditional(cfg, &mut r).unwrap(), s)
}

fn random_marginal(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let last = p.len() - 1;
    p[last] = 1.0 - p[..last].iter().sum::<f64>();
    p
}

/// `Σ (silu(A·W + b) ⊙ C)²  +  mean(A·W)` with gradients w.r.t. A, W and b.
fn composite(a: &Tensor, w: &Tensor, b: &Tensor, c: &Tensor) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let (av, wv, bv) = (tape.param(a), tape.param(w), tape.param(b));
    let cv = tape.constant(c.clone());
    let z = tape.matmul(av, wv).unwrap();
    let h = tape.add_bias(z, bv).unwrap();
    let s = tape.silu(h);
    let m = tape.mul(s, cv).unwrap();
    let q = tape.sum_squares(m);
    let r = tape.mean(z);
    let out = tape.add(q, r).unwrap();
    let g = tape.backward(out).unwrap();
    let val = tape.value(out).item();
    (val, [av, wv, bv].iter().map(|v| g.get(*v).unwrap().to_vec()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tape_ops_preserve_shapes(r in 1usize..6, k in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        let mut tape = Tape::new();
        let a = tape.param(&tensor(r, k, seed));
        let w = tape.param(&tensor(k, c, seed ^ 1));
        let b = tape.param(&tensor(1, c, seed ^ 2));
        let z = tape.matmul(a, w).unwrap();
        prop_assert_eq!(tape.value(z).shape(), &[r, c]);
        let h = tape.add_bias(z, b).unwrap();
        let s = tape.silu(h);
        prop_assert_eq!(tape.value(s).shape(), &[r, c]);
        let cat = tape.concat_cols(s, a).unwrap();
        prop_assert_eq!(tape.value(cat).shape(), &[r, c + k]);
        let rs = tape.row_sum_squares(cat);
        prop_assert_eq!(tape.value(rs).rows(), r);
        let total = tape.sum(rs);
        let g = tape.backward(total).unwrap();
        prop_assert_eq!(g.get(a).unwrap().len(), r * k);
        prop_assert_eq!(g.get(w).unwrap().len(), k * c);
        prop_assert_eq!(g.get(b).unwrap().len(), c);
        prop_assert!(tape.matmul(a, a).is_err() || k == r);
    }

    #[test]
    fn tape_gradients_match_central_differences(r in 1usize..4, k in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let a = tensor(r, k, seed);
        let w = tensor(k, c, seed ^ 11);
        let b = tensor(1, c, seed ^ 12);
        let cm = tensor(r, c, seed ^ 13);
        let (_, grads) = composite(&a, &w, &b, &cm);
        let h = 1e-5;
        for (which, g) in grads.iter().enumerate() {
            for i in 0..g.len() {
                let eval = |delta: f64| {
                    let mut ts = [a.clone(), w.clone(), b.clone()];
                    ts[which].data_mut()[i] += delta;
                    composite(&ts[0], &ts[1], &ts[2], &cm).0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
                prop_assert!(rel < 1e-6, "param {} entry {}: {} vs {}", which, i, g[i], fd);
            }
        }
    }

    #[test]
    fn tape_is_deterministic(r in 1usize..5, k in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let args = (tensor(r, k, seed), tensor(k, c, seed ^ 3), tensor(1, c, seed ^ 4), tensor(r, c, seed ^ 5));
        let (v1, g1) = composite(&args.0, &args.1, &args.2, &args.3);
        let (v2, g2) = composite(&args.0, &args.1, &args.2, &args.3);
        prop_assert_eq!(v1.to_bits(), v2.to_bits());
        for (x, y) in g1.iter().flatten().zip(g2.iter().flatten()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn adam_first_step_moves_each_entry_by_lr(vals in prop::collection::vec(-5.0f64..5.0, 1..8),
                                               grads in prop::collection::vec(0.01f64..3.0, 8),
                                               signs in prop::collection::vec(any::<bool>(), 8),
                                               lr in 1e-4f64..1e-1) {
        let n = vals.len();
        let mut store = ParamStore::default();
        store.push("w", Tensor::matrix(1, n, vals.clone()).unwrap());
        let g: Vec<f64> = (0..n).map(|i| if signs[i] { grads[i] } else { -grads[i] }).collect();
        *store.at_mut(0).grad_mut() = g.clone();
        let mut state = AdamState::new(&store, lr, 0.9, 0.999, 1e-12).unwrap();
        adam_step(&mut store, &mut state).unwrap();
        for i in 0..n {
            let moved = vals[i] - store.at(0).data()[i];
            let expected = lr * g[i].signum();
            prop_assert!((moved - expected).abs() <= 1e-6 * lr, "entry {}: moved {} expected {}", i, moved, expected);
        }
    }

    #[test]
    fn clipped_gradient_norm_is_bounded(a in prop::collection::vec(-10.0f64..10.0, 1..10),
                                        b in prop::collection::vec(-10.0f64..10.0, 1..10),
                                        max_norm in 0.01f64..20.0) {
        let (mut a2, mut b2) = (a.clone(), b.clone());
        let before = clip_global_norm([a2.as_mut_slice(), b2.as_mut_slice()], max_norm);
        let direct = a.iter().chain(&b).map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((before - direct).abs() <= 1e-12 * direct.max(1.0));
        let after = a2.iter().chain(&b2).map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(after <= max_norm * (1.0 + 1e-12));
        if direct <= max_norm {
            prop_assert_eq!(&a2, &a);
            prop_assert_eq!(&b2, &b);
        }
    }

    #[test]
    fn time_embedding_pairs_lie_on_unit_circle(t in 0usize..=1000, half in 1usize..16) {
        let e = time_embedding(t, 2 * half, 1000).unwrap();
        for k in 0..half {
            prop_assert!((e[k] * e[k] + e[half + k] * e[half + k] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_is_monotone_with_exact_recurrence(t_max in 2usize..400, lo in 1e-5f64..1e-2, span in 1e-4f64..0.05) {
        let s = NoiseSchedule::linear(t_max, lo, lo + span).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=t_max {
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            if t > 1 {
                prop_assert!(s.beta(t) >= s.beta(t - 1));
            }
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert_eq!(s.alpha_bar(t).to_bits(), (s.alpha_bar(t - 1) * (1.0 - s.beta(t))).to_bits());
        }
    }

    #[test]
    fn forward_sample_without_noise_scales_input(x0 in prop::collection::vec(-10.0f64..10.0, 1..6), t in 0usize..=1000) {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let xt = forward_sample(&x0, t, &vec![0.0; x0.len()], &s).unwrap();
        let a = s.alpha_bar(t).sqrt();
        for (x, y) in x0.iter().zip(&xt) {
            prop_assert_eq!(y.to_bits(), (a * x).to_bits());
        }
    }

    #[test]
    fn guidance_endpoints_are_exact(c in prop::collection::vec(-1e3f64..1e3, 1..8), seed in any::<u64>()) {
        let u = rng::normal_vec(&mut rng::seeded(seed), c.len());
        prop_assert_eq!(cfg_noise(&c, &u, 0.0), u.clone());
        prop_assert_eq!(cfg_noise(&c, &u, 1.0), c.clone());
    }

    #[test]
    fn deterministic_ddim_step_ignores_noise(x in prop::collection::vec(-5.0f64..5.0, 1..6), seed in any::<u64>(), n in 2usize..50) {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let ts = ddim_timesteps(1000, n).unwrap();
        let mut r = rng::seeded(seed);
        let eps = rng::normal_vec(&mut r, x.len());
        let t = ts[rng::int_in(&mut r, 0, ts.len() - 1)];
        let t_prev = ts.iter().copied().find(|v| *v < t).unwrap_or(0);
        let a = ddim_step(&x, t, t_prev, &eps, 0.0, &rng::normal_vec(&mut r, x.len()), &s).unwrap();
        let b = ddim_step(&x, t, t_prev, &eps, 0.0, &rng::normal_vec(&mut r, x.len()), &s).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn ratio_clipping_stays_in_band(ratios in prop::collection::vec(0.0f64..5.0, 0..20), clip in 0.01f64..0.9) {
        let out = clip_ratios(&ratios, clip);
        prop_assert_eq!(out.len(), ratios.len());
        for (r, c) in ratios.iter().zip(&out) {
            prop_assert!(*c >= 1.0 - clip && *c <= 1.0 + clip);
            if (1.0 - clip..=1.0 + clip).contains(r) {
                prop_assert_eq!(r, c);
            }
        }
    }

    #[test]
    fn replay_buffer_keeps_newest_in_order(cap in 0usize..10, pushes in 0usize..30) {
        let mut b = ReplayBuffer::new(cap);
        for i in 0..pushes {
            b.push(vec![i as f64], vec![-(i as f64)]);
            prop_assert!(b.len() <= cap);
        }
        prop_assert_eq!(b.len(), pushes.min(cap));
        let kept: Vec<f64> = b.iter().map(|(g, _)| g[0]).collect();
        let expected: Vec<f64> = (pushes - pushes.min(cap)..pushes).map(|i| i as f64).collect();
        prop_assert_eq!(kept, expected);
        prop_assert!(b.iter().all(|(g, o)| g[0] == -o[0]));
    }

    #[test]
    fn foscttm_is_symmetric_under_swapping_sides(n in 2usize..30, d in 1usize..4, seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let a = rng::normal_tensor(&mut r, n, d);
        let b = rng::normal_tensor(&mut r, n, d);
        let mut corr: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            corr.swap(i, rng::int_in(&mut r, 0, i));
        }
        let mut inv = vec![0; n];
        for (i, &j) in corr.iter().enumerate() {
            inv[j] = i;
        }
        let f = foscttm(&a, &b, &corr).unwrap();
        let g = foscttm(&b, &a, &inv).unwrap();
        prop_assert!((f - g).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn nearest_row_projection_is_idempotent(n in 1usize..20, m in 1usize..20, d in 1usize..4, seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let data = rng::normal_tensor(&mut r, n, d);
        let gen = rng::normal_tensor(&mut r, m, d);
        let (p, idx) = nn_project(&gen, &data).unwrap();
        for (i, &j) in idx.iter().enumerate() {
            prop_assert_eq!(p.row(i), data.row(j));
        }
        let (p2, _) = nn_project(&p, &data).unwrap();
        prop_assert!(p2.bitwise_eq(&p));
    }

    #[test]
    fn oracle_entropy_respects_marginal_bounds(rx in prop::collection::vec(0.01f64..1.0, 1..5),
                                               ry in prop::collection::vec(0.01f64..1.0, 1..5),
                                               seed in any::<u64>()) {
        let (px, py) = (random_marginal(&rx), random_marginal(&ry));
        let sol = discrete_mec_oracle(&px, &py, 1e-9, &mut rng::seeded(seed)).unwrap();
        let (hx, hy) = (entropy(&px), entropy(&py));
        prop_assert!(sol.entropy >= hx.max(hy) - 1e-9);
        prop_assert!(sol.entropy <= hx + hy + 1e-9);
        for (i, p) in px.iter().enumerate() {
            let row: f64 = sol.coupling[i * py.len()..(i + 1) * py.len()].iter().sum();
            prop_assert!((row - p).abs() < 1e-6);
        }
    }

    #[test]
    fn normalizer_round_trips(n in 2usize..30, d in 1usize..5, scale in 0.1f64..100.0, seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let x = Tensor::matrix(n, d, rng::normal_vec(&mut r, n * d).iter().map(|v| v * scale + 3.0).collect()).unwrap();
        prop_assume!(Normalizer::fit(&x, 1e6).is_ok());
        let norm = Normalizer::fit(&x, 1e6).unwrap();
        let back = norm.invert(&norm.apply(&x).unwrap()).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn synthetic_generators_are_deterministic(n in 1usize..200, seed in any::<u64>(), angle in -180.0f64..180.0) {
        let spec = SyntheticSpec::gmm_rotate(n, 3, angle, seed);
        prop_assert_eq!(synth_coupled(&spec).unwrap(), synth_coupled(&spec).unwrap());
        let lm = SyntheticSpec::linear_map(n, 3, 2, seed);
        prop_assert_eq!(synth_coupled(&lm).unwrap(), synth_coupled(&lm).unwrap());
    }

    #[test]
    fn splits_are_deterministic_partitions(n in 0usize..200, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let (a, b) = split_indices(n, frac, seed);
        prop_assert_eq!(split_indices(n, frac, seed), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn csv_round_trip_is_bitwise(n in 1usize..20, d in 1usize..5, seed in any::<u64>(), labelled in any::<bool>()) {
        let mut r = rng::seeded(seed);
        let mut ds = TabularDataset::from_points("pts", rng::normal_tensor(&mut r, n, d));
        if labelled {
            ds.labels = Some((0..n as i64).map(|i| i % 3 - 1).collect());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.csv");
        ds.write_csv(&path).unwrap();
        let back = load_csv(&path).unwrap();
        prop_assert!(back.points.bitwise_eq(&ds.points));
        prop_assert_eq!(back.labels, ds.labels);
        write_points_csv(&path, &ds.points).unwrap();
        prop_assert!(load_csv(&path).unwrap().points.bitwise_eq(&ds.points));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fresh_conditional_branch_is_neutral(seed in any::<u64>(), cond_dim in 1usize..5, rows in 1usize..6, t in 1usize..=50) {
        let base = small_model(3, seed);
        let cond = base.to_conditional(cond_dim, &mut rng::seeded(seed ^ 9)).unwrap();
        let x = tensor(rows, 3, seed ^ 1);
        let c = tensor(rows, cond_dim, seed ^ 2);
        let ts = vec![t; rows];
        let u = base.predict(&x, &ts, CondInput::Null).unwrap();
        prop_assert!(cond.predict(&x, &ts, CondInput::Values(&c)).unwrap().bitwise_eq(&u));
        prop_assert!(cond.predict(&x, &ts, CondInput::Null).unwrap().bitwise_eq(&u));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(seed in any::<u64>(), conditional in any::<bool>(), tag in "[a-z]{0,8}") {
        let mut m = small_model(2, seed);
        if conditional {
            m = m.to_conditional(3, &mut rng::seeded(seed ^ 5)).unwrap();
        }
        let m = m.with_ema(0.99);
        let opt = AdamState::with_lr(m.denoiser.params(), 1e-3).unwrap();
        let ck = Checkpoint::from_model(&m, Some(&opt)).with_tag("note", &tag);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.tag("note"), Some(tag.as_str()));
        let m2 = back.to_model().unwrap();
        prop_assert!(m2.denoiser.params().bitwise_eq(m.denoiser.params()));
        prop_assert_eq!(back.optimizer.as_ref(), Some(&opt));
    }

    #[test]
    fn sampling_is_reproducible_from_seed(seed in any::<u64>(), n in 1usize..8, eta in 0.0f64..=1.0) {
        let m = small_model(2, seed);
        let cfg = SampleConfig { n_steps: 10, guidance: 1.0, eta, record_trajectory: false, seed: 0 };
        let (a, _) = sample(&m, None, n, &cfg, &mut rng::seeded(seed ^ 7)).unwrap();
        let (b, _) = sample(&m, None, n, &cfg, &mut rng::seeded(seed ^ 7)).unwrap();
        prop_assert!(a.bitwise_eq(&b));
    }
}
