use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rehearsal_core::data::{
    build_windows, haar_forward, haar_inverse, linear_fit_separate, translate_from_ego_origin,
    translate_to_ego_origin, RawRecord,
};
use rehearsal_core::evaluation::{min_ade, min_fde, ActivationRates};
use rehearsal_core::numerics::nn::register_attention;
use rehearsal_core::numerics::{
    finite_difference_check, multi_head_attention, Graph, IndexTensor, ParameterStore, Tensor,
};

fn points(n: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(prop::array::uniform2(-50.0..50.0f64), n)
}

fn even_points() -> impl Strategy<Value = Vec<[f64; 2]>> {
    (1usize..=8).prop_flat_map(|h| points(2 * h))
}

proptest! {
    #[test]
    fn haar_round_trip_and_energy(seq in even_points()) {
        let c = haar_forward(&seq).unwrap();
        let back = haar_inverse(&c).unwrap();
        let energy = |v: &[[f64; 2]]| v.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>();
        for (a, b) in seq.iter().zip(&back) {
            prop_assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
        prop_assert!((energy(&seq) - energy(&c)).abs() <= 1e-9 * energy(&seq).max(1.0));
    }

    #[test]
    fn linear_residual_is_orthogonal(traj in (2usize..12).prop_flat_map(points)) {
        let (fit, r) = linear_fit_separate(&traj).unwrap();
        for c in 0..2 {
            let sum: f64 = r.iter().map(|p| p[c]).sum();
            let moment: f64 = r.iter().enumerate().map(|(k, p)| (k + 1) as f64 * p[c]).sum();
            prop_assert!(sum.abs() < 1e-9, "sum {sum}");
            prop_assert!(moment.abs() < 1e-8, "moment {moment}");
        }
        for (k, (p, q)) in traj.iter().zip(&r).enumerate() {
            let l = fit.eval((k + 1) as f64);
            prop_assert!((l[0] + q[0] - p[0]).abs() < 1e-9);
            prop_assert!((l[1] + q[1] - p[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_trajectories_leave_no_residual(
        a in prop::array::uniform2(-10.0..10.0f64),
        v in prop::array::uniform2(-2.0..2.0f64),
        n in 2usize..12,
    ) {
        let traj: Vec<[f64; 2]> = (0..n).map(|t| [a[0] + v[0] * t as f64, a[1] + v[1] * t as f64]).collect();
        let (fit, r) = linear_fit_separate(&traj).unwrap();
        prop_assert!(r.iter().all(|p| p[0].abs() < 1e-9 && p[1].abs() < 1e-9));
        prop_assert!((fit.slope[0] - v[0]).abs() < 1e-9 && (fit.slope[1] - v[1]).abs() < 1e-9);
    }

    #[test]
    fn translation_round_trip(traj in points(6), o in prop::array::uniform2(-1e3..1e3f64)) {
        let back = translate_from_ego_origin(&translate_to_ego_origin(&traj, o), o);
        for (p, q) in traj.iter().zip(&back) {
            for c in 0..2 {
                let tol = 2.0 * f64::EPSILON * p[c].abs().max(o[c].abs());
                prop_assert!((p[c] - q[c]).abs() <= tol);
            }
        }
    }

    #[test]
    fn window_count_matches_track_length(n in 20usize..60, stride in 1usize..5) {
        let recs: Vec<RawRecord> = (0..n as i64)
            .map(|t| RawRecord { frame: 10 * t, agent_id: 7, x: t as f64, y: 0.0 })
            .collect();
        let w = build_windows(&recs, 8, 12, stride, 0.4).unwrap();
        prop_assert_eq!(w.len(), (n - 20) / stride + 1);
        prop_assert!(w.iter().all(|w| w.ego_indices() == vec![0]));
    }

    #[test]
    fn metrics_match_brute_force(
        (k, t, pred, truth) in (1usize..6, 1usize..8).prop_flat_map(|(k, t)| {
            (Just(k), Just(t), points(k * t), points(t))
        })
    ) {
        let p = Tensor::<f64>::new(&[k, t, 2], pred.iter().flatten().copied().collect()).unwrap();
        let g = Tensor::<f64>::from_points(&truth).unwrap();
        let d = |m: usize, s: usize| {
            let a = pred[m * t + s];
            ((a[0] - truth[s][0]).powi(2) + (a[1] - truth[s][1]).powi(2)).sqrt()
        };
        let mut ade = f64::INFINITY;
        let mut fde = f64::INFINITY;
        for m in 0..k {
            ade = ade.min((0..t).map(|s| d(m, s)).sum::<f64>() / t as f64);
            fde = fde.min(d(m, t - 1));
        }
        prop_assert!((min_ade(&p, &g).unwrap() - ade).abs() < 1e-12);
        prop_assert!((min_fde(&p, &g).unwrap() - fde).abs() < 1e-12);
    }

    #[test]
    fn rates_partition(idx in prop::collection::vec(0usize..4, 1..64)) {
        let n = idx.len();
        let r = ActivationRates::from_indices(&IndexTensor { shape: vec![n], data: idx }, 4).unwrap();
        prop_assert_eq!(r.total(), num_rational::Ratio::from_integer(1));
    }

    #[test]
    fn max_pool_gathers_first_maximum(
        (k, u, raw) in (1usize..5, 1usize..10).prop_flat_map(|(k, u)| {
            (Just(k), Just(u), prop::collection::vec(-3i32..3, k * u))
        })
    ) {
        let t = Tensor::<f64>::new(&[k, u], raw.iter().map(|&v| v as f64).collect()).unwrap();
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let (p, idx) = g.max_axis0(v).unwrap();
        for c in 0..u {
            let best = (0..k).map(|m| t.get(&[m, c])).fold(f64::NEG_INFINITY, f64::max);
            let first = (0..k).find(|&m| t.get(&[m, c]) == best).unwrap();
            prop_assert_eq!(idx.data[c], first);
            prop_assert_eq!(g.value(p).get(&[c]), best);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(
        x in prop::collection::vec(-2.0..2.0f64, 5 * 4),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        seed in 0u64..100,
    ) {
        let mut store = ParameterStore::new();
        register_attention(&mut store, "a", 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let run = |rows: &[usize]| {
            let data: Vec<f64> = rows.iter().flat_map(|&r| x[r * 4..r * 4 + 4].to_vec()).collect();
            let mut g = Graph::with_params(&store);
            let v = g.constant(Tensor::new(&[5, 4], data).unwrap());
            let o = multi_head_attention(&mut g, "a", v, 2, None).unwrap().out;
            g.value(o).clone()
        };
        let base = run(&[0, 1, 2, 3, 4]);
        let permuted = run(&perm);
        for (i, &r) in perm.iter().enumerate() {
            for c in 0..4 {
                prop_assert!((permuted.get(&[i, c]) - base.get(&[r, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_op_chains_pass_gradient_check(
        ops in prop::collection::vec(0u8..6, 1..5),
        x in prop::collection::vec(-1.5..1.5f64, 12),
        w in prop::collection::vec(-1.0..1.0f64, 16),
    ) {
        let x = Tensor::new(&[3, 4], x).unwrap();
        let w = Tensor::new(&[4, 4], w).unwrap();
        let err = finite_difference_check(
            |g, v| {
                let mut h = v;
                for &op in &ops {
                    h = match op {
                        0 => g.softmax_last(h),
                        1 => {
                            let gamma = g.constant(Tensor::from_f64(&[4], &[1.0, 0.5, -0.7, 2.0])?);
                            let beta = g.constant(Tensor::from_f64(&[4], &[0.1, 0.0, -0.2, 0.3])?);
                            g.layer_norm(h, gamma, beta, 1e-5)?
                        }
                        2 => {
                            let wv = g.constant(w.clone());
                            g.matmul(h, wv)?
                        }
                        3 => {
                            let s = g.square(h);
                            g.scale(s, 0.3)
                        }
                        4 => {
                            let s = g.square(h);
                            let one = g.constant(Tensor::full(&[3, 4], 1.0));
                            let s = g.add(s, one)?;
                            g.sqrt(s)
                        }
                        _ => {
                            let t = g.transpose(h)?;
                            let gram = g.matmul(h, t)?;
                            let y = g.matmul(gram, h)?;
                            g.scale(y, 0.1)
                        }
                    };
                }
                let s = g.square(h);
                Ok(g.mean_all(s))
            },
            &x,
            1e-6,
        )
        .unwrap();
        prop_assert!(err < 1e-5, "ops {ops:?}: {err}");
    }
}
