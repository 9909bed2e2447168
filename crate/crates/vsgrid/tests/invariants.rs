//! Property-based invariants across the library: Laplacian structure,
//! transfer-function identities, consensus conservation, filter DC gain,
//! and design-formula monotonicity.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;

use vsgrid::ctrl::{dvi_update, Hpf, HpfParams};
use vsgrid::equiv::{design_params, DesignInputs};
use vsgrid::metrics::signal_metrics;
use vsgrid::model::{
    algebraic_connectivity, laplacian, CommGraph, GridLink, Mode, NetworkModel, UnitParams,
};
use vsgrid::tf::sa_load_step_tfs;

fn symmetric_adjacency(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(proptest::bool::ANY, n * (n - 1) / 2).prop_map(move |bits| {
        let mut a = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = if bits[k] { 1.0 } else { 0.0 };
                a[(i, j)] = v;
                a[(j, i)] = v;
                k += 1;
            }
        }
        a
    })
}

fn model_from(params: Vec<(f64, f64, f64)>) -> NetworkModel {
    let units = params
        .iter()
        .enumerate()
        .map(|(i, &(j, d, l_mh))| UnitParams {
            id: format!("u{}", i + 1),
            j0: j,
            d0: d,
            pm: 1000.0,
            nq: 0.001,
            lf_feeder: l_mh * 1e-3,
            v0: 190.0,
            pr: 0.0,
            zv0: 0.0,
        })
        .collect();
    NetworkModel {
        units,
        grid: GridLink {
            mode: Mode::SA,
            lg: 0.0,
            vg: 190.0,
            omega_g: 314.0,
        },
        omega0: 314.0,
        load_p: 0.0,
        load_q: 0.0,
        nq_v: 0.001,
    }
}

proptest! {
    #[test]
    fn laplacian_rows_sum_to_zero_and_psd(
        (n, seed) in (2usize..6).prop_flat_map(|n| (Just(n), proptest::collection::vec(-10.0..10.0f64, n))),
        a_bits in proptest::collection::vec(proptest::bool::ANY, 15),
    ) {
        let mut a = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = if a_bits[k % a_bits.len()] { 1.0 } else { 0.0 };
                a[(i, j)] = v;
                a[(j, i)] = v;
                k += 1;
            }
        }
        let l = laplacian(&a).unwrap();
        for i in 0..n {
            prop_assert!(l.row(i).sum().abs() < 1e-12);
        }
        // Quadratic form is non-negative for arbitrary vectors.
        let x = DVector::from_vec(seed);
        let q = (x.transpose() * &l * &x)[(0, 0)];
        prop_assert!(q >= -1e-9, "x^T L x = {q}");
        // Connectivity is never negative.
        prop_assert!(algebraic_connectivity(&l) >= -1e-9);
    }

    #[test]
    fn sa_power_shares_sum_to_unity(
        params in proptest::collection::vec(
            (50.0..2000.0f64, 50.0..2000.0f64, 1.0..20.0f64),
            1..4,
        ),
        omega in 0.01..200.0f64,
    ) {
        let model = model_from(params);
        let tfs = sa_load_step_tfs(&model).unwrap();
        let s = Complex64::new(0.0, omega);
        let total: Complex64 = tfs.power.iter().map(|tf| tf.eval(s)).sum();
        prop_assert!((total - Complex64::new(1.0, 0.0)).norm() < 1e-6, "sum = {total}");
    }

    #[test]
    fn sa_dc_shares_follow_damping(
        params in proptest::collection::vec(
            (50.0..2000.0f64, 50.0..2000.0f64, 1.0..20.0f64),
            2..4,
        ),
    ) {
        let model = model_from(params.clone());
        let tfs = sa_load_step_tfs(&model).unwrap();
        let sum_d: f64 = params.iter().map(|p| p.1).sum();
        for (i, tf) in tfs.power.iter().enumerate() {
            prop_assert!((tf.dc_gain() - params[i].1 / sum_d).abs() < 1e-9);
        }
    }

    #[test]
    fn dvi_rates_conserve_total_reactance(
        (n, x) in (2usize..6).prop_flat_map(|n| (Just(n), proptest::collection::vec(-500.0..500.0f64, n))),
        a in (2usize..6).prop_flat_map(symmetric_adjacency),
        k_v in 0.001..10.0f64,
    ) {
        let n_eff = n.min(a.nrows());
        let a = a.view((0, 0), (n_eff, n_eff)).into_owned();
        let graph = CommGraph {
            adjacency: a,
            sample_period: 0.01,
            delay: 0.0,
            fault_windows: vec![],
        };
        let rates = dvi_update(&graph, Some(&x[..n_eff]), k_v, 1.0, true);
        let total: f64 = rates.iter().sum();
        prop_assert!(total.abs() < 1e-9 * (1.0 + rates.iter().map(|r| r.abs()).sum::<f64>()));
    }

    #[test]
    fn hpf_constant_input_decays_to_zero(
        u0 in -1e4..1e4f64,
        tau in 0.01..1.0f64,
    ) {
        let params = HpfParams::new(tau, tau).unwrap();
        let mut hpf = Hpf::at_rest(params, u0);
        let dt = 1e-3;
        let mut y = 0.0;
        for _ in 0..((10.0 * tau / dt) as usize) {
            y = hpf.step(u0, dt);
        }
        // Tolerance scales with the input: the at-rest state is the rounded
        // fixed point, so the residual is relative, not absolute.
        prop_assert!(y.abs() < 1e-9 * (1.0 + u0.abs()), "residual {y}");
    }

    #[test]
    fn design_monotone_in_power_and_rocof(
        dp in 10.0..5000.0f64,
        rocof in 0.1..10.0f64,
        factor in 1.01..5.0f64,
    ) {
        let base = DesignInputs {
            dp_max: dp,
            rocof_max: rocof,
            domega_max: 1.0,
            k_hp: 10.0,
            rho: 0.05,
            nq: 0.001,
            lambda2: 1.0,
            h0_mag: 100.0,
        };
        let out = design_params(&base).unwrap();
        let bigger = design_params(&DesignInputs { dp_max: dp * factor, ..base }).unwrap();
        prop_assert!(bigger.j0 > out.j0);
        let faster = design_params(&DesignInputs { rocof_max: rocof * factor, ..base }).unwrap();
        prop_assert!(faster.j0 < out.j0);
    }

    #[test]
    fn metrics_overshoot_nonnegative_and_settling_bounded(
        values in proptest::collection::vec(-100.0..100.0f64, 2..50),
    ) {
        let t: Vec<f64> = (0..values.len()).map(|i| i as f64 * 0.1).collect();
        let m = signal_metrics(&t, &values).unwrap();
        prop_assert!(m.overshoot_pct >= 0.0);
        if let Some(ts) = m.settling_time_s {
            prop_assert!(ts <= *t.last().unwrap() + 1e-12);
        }
        prop_assert!(m.peak_to_peak >= 0.0);
    }
}
