use more_core::baselines::{nullspace_update, proximal_isotropic_update, target_matching_update, NullspaceState};
use more_core::diagnostics::{cosine_coupling, modality_stats, topk_overlap};
use more_core::editor::{init_state, ModuleEditState, ModuleGroup, ModuleHyperparams};
use more_core::numerics::{
    dot, inverse_spd, random_orthonormal_rows, sherman_morrison_rank1, thin_svd, Matrix, RngSeed, SeededRng,
};
use more_core::toymodel::{sample_generator, ModuleId, NoEdits, ToyModel, ToyModelConfig};
use proptest::prelude::*;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    SeededRng::new(RngSeed(seed)).normal_matrix(rows, cols, 1.0)
}

fn spd(n: usize, seed: u64) -> Matrix {
    let m = gaussian(n, n, seed);
    m.matmul(&m.transpose()).unwrap().add(&Matrix::identity(n)).unwrap()
}

fn hp(rank: usize, lambda: f64) -> ModuleHyperparams {
    ModuleHyperparams {
        rank,
        eta: 0.1,
        lambda,
        alpha_over_r: 2.0,
        group: ModuleGroup::TextLayer,
    }
}

/// State with `steps` random absorbs of scale `scale`.
fn state_with_history(rank: usize, d: usize, steps: usize, scale: f64, seed: u64) -> ModuleEditState {
    let mut st = init_state(ModuleId::Block(0), d, 3, hp(rank, 10.0), RngSeed(seed)).unwrap();
    let mut rng = SeededRng::new(RngSeed(seed).derive(1));
    for _ in 0..steps {
        st.absorb_context(&rng.normal_vec(rank, scale)).unwrap();
    }
    st
}

fn quad(p: &Matrix, u: &[f64]) -> f64 {
    dot(u, &p.matvec(u).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sm_matches_direct_inverse(r_pow in 0u32..5, seed in any::<u64>(), scale in 0.01f64..10.0) {
        let r = 1usize << r_pow;
        let s = spd(r, seed);
        let p = inverse_spd(&s).unwrap();
        let z = SeededRng::new(RngSeed(seed).derive(9)).normal_vec(r, scale);
        let updated = sherman_morrison_rank1(&p, &z).unwrap();
        let direct = inverse_spd(&s.add(&Matrix::outer(&z, &z)).unwrap()).unwrap();
        prop_assert!(updated.rel_frobenius_diff(&direct).unwrap() < 1e-10);
    }

    #[test]
    fn sm_is_pure(seed in any::<u64>()) {
        let p = inverse_spd(&spd(6, seed)).unwrap();
        let z = SeededRng::new(RngSeed(seed)).normal_vec(6, 1.0);
        let a = sherman_morrison_rank1(&p, &z).unwrap();
        let b = sherman_morrison_rank1(&p, &z).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn orthonormal_rows(d in 1usize..96, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let r = ((d as f64 * frac).round() as usize).clamp(1, d);
        let a = random_orthonormal_rows(r, d, RngSeed(seed)).unwrap();
        let gram = a.matmul(&a.transpose()).unwrap();
        prop_assert!(gram.max_abs_diff(&Matrix::identity(r)).unwrap() < 1e-10);
    }

    #[test]
    fn svd_left_vectors_orthonormal(d in 2usize..40, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let t = ((d as f64 * frac).round() as usize).clamp(1, d);
        let m = gaussian(d, t, seed);
        let svd = thin_svd(&m).unwrap();
        let k = svd.u.cols();
        let utu = svd.u.transpose().matmul(&svd.u).unwrap();
        prop_assert!(utu.max_abs_diff(&Matrix::identity(k)).unwrap() < 1e-8);
    }

    #[test]
    fn absorb_never_raises_quadratic_form(steps in 1usize..40, scale in 0.0f64..20.0, seed in any::<u64>()) {
        let mut st = state_with_history(8, 20, 0, 1.0, seed);
        let basis = st.basis().clone();
        let mut rng = SeededRng::new(RngSeed(seed).derive(3));
        for _ in 0..steps {
            let u = rng.normal_vec(8, 1.0);
            let before = quad(st.preconditioner(), &u);
            st.absorb_context(&rng.normal_vec(8, scale)).unwrap();
            prop_assert!(quad(st.preconditioner(), &u) <= before * (1.0 + 1e-12));
            let g = rng.normal_matrix(3, 8, 1.0);
            st.apply_write(&st.compute_write(&g).unwrap()).unwrap();
        }
        prop_assert_eq!(st.basis().data(), basis.data());
    }

    #[test]
    fn writes_are_descent_directions(steps in 0usize..30, seed in any::<u64>(), gscale in 1e-6f64..1e3) {
        let st = state_with_history(6, 16, steps, 3.0, seed);
        let g = SeededRng::new(RngSeed(seed).derive(5)).normal_matrix(3, 6, gscale);
        let dw = st.compute_write(&g).unwrap();
        prop_assert!(g.frobenius_inner(&dw).unwrap() < 0.0);
    }

    #[test]
    fn baseline_updates_descend(seed in any::<u64>(), n in 1usize..12) {
        let (d_out, d) = (5, 8);
        let w = gaussian(d_out, d, seed);
        let k = gaussian(d, n, seed.wrapping_add(1));
        let v = gaussian(d_out, n, seed.wrapping_add(2));
        let resid = w.matmul(&k).unwrap().sub(&v).unwrap();
        let g = resid.matmul(&k.transpose()).unwrap().scale(2.0);
        let tm = target_matching_update(&w, &k, &v).unwrap();
        prop_assert!(g.frobenius_inner(&tm).unwrap() < 0.0);
        let prox = proximal_isotropic_update(&g, 0.1).unwrap();
        prop_assert!(g.frobenius_inner(&prox).unwrap() < 0.0);
    }

    #[test]
    fn nullspace_update_annihilates_stored_keys(t in 1usize..=50, seed in any::<u64>()) {
        let d = 64;
        let mut ns = NullspaceState::new(d, 0.1);
        let mut rng = SeededRng::new(RngSeed(seed));
        for _ in 0..t {
            ns.push_key(&rng.normal_vec(d, 1.0)).unwrap();
        }
        let g = rng.normal_matrix(6, d, 1.0);
        let dw = nullspace_update(&ns, &g).unwrap();
        let k = ns.key_matrix().unwrap();
        let rel = dw.matmul(&k).unwrap().frobenius_norm() / (dw.frobenius_norm() * k.frobenius_norm());
        prop_assert!(rel < 1e-8, "relative leak {rel}");
    }

    #[test]
    fn overlap_and_cosine_are_symmetric(seed in any::<u64>(), k in 1usize..=36) {
        let a = gaussian(6, 6, seed);
        let b = gaussian(6, 6, seed ^ 0xff);
        prop_assert_eq!(topk_overlap(&a, &b, k).unwrap(), topk_overlap(&b, &a, k).unwrap());
        prop_assert_eq!(cosine_coupling(&a, &b).unwrap(), cosine_coupling(&b, &a).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn modality_stats_ignore_sample_order(seed in any::<u64>()) {
        let config = ToyModelConfig {
            d: 12,
            d_v: 6,
            d_ff: 16,
            vocab: 5,
            blocks: 2,
            seed: RngSeed(seed),
            ..Default::default()
        };
        let model = ToyModel::new(config.clone()).unwrap();
        let mut samples: Vec<_> = sample_generator(&config, RngSeed(seed).derive(1)).take(40).collect();
        let a = modality_stats(&model, &NoEdits, &samples).unwrap();
        samples.reverse();
        samples.rotate_left(seed as usize % 40);
        let b = modality_stats(&model, &NoEdits, &samples).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.module, y.module);
            prop_assert!((x.mean_output_magnitude - y.mean_output_magnitude).abs() < 1e-12);
            for (u, v) in x.key_log_variance.iter().zip(&y.key_log_variance) {
                match (u, v) {
                    (Some(u), Some(v)) => prop_assert!((u - v).abs() < 1e-9),
                    (None, None) => {}
                    _ => prop_assert!(false, "zero-variance pattern changed"),
                }
            }
        }
    }
}
