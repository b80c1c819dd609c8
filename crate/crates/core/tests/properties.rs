use proptest::prelude::*;

use quantile_sheet::constraint::{build_penalty, eval_sheet, map_beta, SheetSpec};
use quantile_sheet::loss_exact::{check_loss, loss_r, Dataset};
use quantile_sheet::loss_smoothed::{smoothed_check, KernelKind, KernelSpec};
use quantile_sheet::model::{AffineMap, Diagnostics, Lambdas, SheetModel};
use quantile_sheet::simulation::{derive_seed, Noise, Scale, Scenario, Signal};
use quantile_sheet::splines::{integrate_basis_prefix, KnotVector};

fn spec_strategy() -> impl Strategy<Value = SheetSpec> {
    (1usize..=4, 1usize..=4, 0usize..5, 0usize..5)
        .prop_map(|(mt, mx, et, ex)| SheetSpec::uniform(mt.max(2) + et, mt, mx + ex, mx).unwrap())
}

fn sheet_and_beta() -> impl Strategy<Value = (SheetSpec, Vec<f64>)> {
    spec_strategy().prop_flat_map(|spec| {
        let dim = spec.dim();
        (Just(spec), prop::collection::vec(-8.0f64..8.0, dim))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_coefficients_give_a_sheet_nondecreasing_in_tau((spec, beta) in sheet_and_beta()) {
        let state = map_beta(&beta, spec.k_x()).unwrap();
        let taus: Vec<f64> = (0..=40).map(|i| i as f64 / 40.0).collect();
        let xs: Vec<f64> = (0..=12).map(|i| i as f64 / 12.0).collect();
        let q = eval_sheet(&spec, &state, &taus, &xs).unwrap();
        for i in 1..taus.len() {
            for j in 0..xs.len() {
                prop_assert!(q[[i, j]] >= q[[i - 1, j]] - 1e-12 * q[[i, j]].abs().max(1.0));
            }
        }
    }

    #[test]
    fn basis_sums_to_one_and_prefix_integrals_grow(
        order in 1usize..=5,
        interior in 0usize..10,
        lo in -5.0f64..5.0,
        width in 0.1f64..10.0,
        u in 0.0f64..1.0,
    ) {
        let kv = KnotVector::new(interior, order, (lo, lo + width)).unwrap();
        let x = lo + u * width;
        let row = kv.eval_row(x).unwrap();
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(row.iter().all(|v| *v >= -1e-15));
        let a = integrate_basis_prefix(&kv, x).unwrap();
        let b = integrate_basis_prefix(&kv, (x + 0.1 * width).min(lo + width)).unwrap();
        // the prefix integrals together measure the interval length
        prop_assert!((a.iter().sum::<f64>() - (x - lo)).abs() < 1e-10 * width.max(1.0));
        prop_assert!(a.iter().zip(&b).all(|(p, q)| q >= &(p - 1e-14)));
    }

    #[test]
    fn pinball_losses_are_nonnegative(u in -50.0f64..50.0, tau in 0.0f64..=1.0, h in 1e-3f64..2.0) {
        prop_assert!(check_loss(u, tau) >= 0.0);
        for kind in [KernelKind::Gaussian, KernelKind::Uniform, KernelKind::Epanechnikov] {
            let k = KernelSpec::new(kind, h).unwrap();
            // smoothing by a symmetric kernel never lowers a convex loss
            prop_assert!(smoothed_check(u, tau, &k) >= check_loss(u, tau) - 1e-12);
        }
    }

    #[test]
    fn exact_loss_is_translation_equivariant(
        seed in any::<u64>(),
        shift in -3.0f64..3.0,
        n in 3usize..30,
    ) {
        let spec = SheetSpec::uniform(5, 3, 4, 3).unwrap();
        let mut s = seed;
        let mut next = || {
            s = derive_seed(s, 1);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let beta: Vec<f64> = (0..spec.dim()).map(|_| 4.0 * next() - 2.0).collect();
        let xs: Vec<f64> = (0..n).map(|_| next()).collect();
        let ys: Vec<f64> = (0..n).map(|_| 6.0 * next() - 3.0).collect();
        let pen = build_penalty(&spec, 0.0, 0.0, 0.0).unwrap();
        let state = map_beta(&beta, spec.k_x()).unwrap();
        let base = loss_r(&spec, &state, &Dataset::new(xs.clone(), ys.clone()).unwrap(), &pen).unwrap();
        // the B-spline bases sum to one, so adding `shift` to every anchor
        // coefficient raises the whole sheet by `shift`
        let mut moved = beta.clone();
        for b in moved.iter_mut().take(spec.k_x()) {
            *b += shift;
        }
        let shifted_state = map_beta(&moved, spec.k_x()).unwrap();
        let shifted_ys: Vec<f64> = ys.iter().map(|y| y + shift).collect();
        let other = loss_r(&spec, &shifted_state, &Dataset::new(xs, shifted_ys).unwrap(), &pen).unwrap();
        prop_assert!((base - other).abs() < 1e-9);
    }

    #[test]
    fn model_files_round_trip_bitwise((spec, beta) in sheet_and_beta(), lo in -10.0f64..10.0, width in 0.5f64..5.0) {
        let model = SheetModel {
            state: map_beta(&beta, spec.k_x()).unwrap(),
            spec,
            monotone: true,
            lambdas: Lambdas::uniform(1e-3),
            x_map: AffineMap { lo, hi: lo + width },
            diagnostics: Diagnostics {
                method: "prop".into(),
                iterations: 0,
                converged: true,
                stop_reason: None,
                final_loss: None,
                final_grad_norm: None,
                init_fallback: false,
            },
        };
        let back = SheetModel::from_json(&model.to_json()).unwrap();
        prop_assert_eq!(&back.state, &model.state);
        let x = lo + 0.37 * width;
        prop_assert_eq!(back.quantile(0.3, x).unwrap().to_bits(), model.quantile(0.3, x).unwrap().to_bits());
    }

    #[test]
    fn simulated_data_is_reproducible_and_in_range(seed in any::<u64>(), rep in 0u64..1000, n in 1usize..200) {
        let sc = Scenario {
            signal: Signal::G3,
            noise: Noise::Laplace,
            scale: Scale::Quadratic,
            n,
            replications: 1,
            seed,
            center_median: false,
        };
        let a = sc.gen_data(rep);
        let b = sc.gen_data(rep);
        prop_assert_eq!(&a.xs, &b.xs);
        prop_assert_eq!(&a.ys, &b.ys);
        prop_assert_eq!(a.len(), n);
        prop_assert!(a.xs.iter().all(|x| *x > 0.0 && *x < 1.0));
    }
}
