//! The RLC equivalent-circuit view of a VSG unit: the variable mapping,
//! branch impedance, the proportionality rule across paralleled units, and
//! the parameter-design calculator.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{NetworkModel, UnitParams};

/// One unit's swing dynamics mapped onto an RLC branch:
/// inertia -> capacitance, 1/damping -> resistance, 1/coupling -> inductance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchRLC {
    /// Capacitance-equivalent, C = J (W s^2/rad).
    pub c: f64,
    /// Resistance-equivalent, R = 1/D (rad/(W s)).
    pub r: f64,
    /// Inductance-equivalent, L = 1/K (rad/W per s).
    pub l: f64,
}

impl BranchRLC {
    /// Inverse mapping back to (J, D, K).
    pub fn to_vsg(&self) -> (f64, f64, f64) {
        (self.c, 1.0 / self.r, 1.0 / self.l)
    }
}

/// Map a unit onto its RLC branch. The coupling uses the total branch
/// reactance including the current virtual impedance.
pub fn to_equivalent_circuit(u: &UnitParams, omega0: f64, v0: f64) -> BranchRLC {
    let x = u.base_reactance(omega0);
    let k = v0 * v0 / x;
    BranchRLC {
        c: u.j0,
        r: 1.0 / u.d0,
        l: 1.0 / k,
    }
}

/// Branch impedance Z_e(j omega) = 1/(C j omega + 1/R) + j omega L.
pub fn branch_impedance(b: &BranchRLC, omega: f64) -> Complex64 {
    let y_rc = Complex64::new(1.0 / b.r, b.c * omega);
    1.0 / y_rc + Complex64::new(0.0, omega * b.l)
}

/// Largest normalized pairwise deviation between the J, D, and K ratio
/// vectors across units; zero exactly when the proportionality rule holds.
pub fn proportionality_residual(model: &NetworkModel) -> f64 {
    let units = &model.units;
    if units.len() < 2 {
        return 0.0;
    }
    let k = |u: &UnitParams| u.v0 * u.v0 / u.base_reactance(model.omega0);
    let (j1, d1, k1) = (units[0].j0, units[0].d0, k(&units[0]));
    let mut worst = 0.0f64;
    for u in &units[1..] {
        let ui = u.j0 / j1;
        let vi = u.d0 / d1;
        let wi = k(u) / k1;
        let dev = (ui - vi).abs().max((ui - wi).abs()).max((vi - wi).abs()) / ui;
        worst = worst.max(dev);
    }
    worst
}

/// Inputs to the parameter-design calculator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignInputs {
    /// Maximum active-power variation (W).
    pub dp_max: f64,
    /// RoCoF limit (rad/s^2).
    pub rocof_max: f64,
    /// Frequency-deviation limit (rad/s).
    pub domega_max: f64,
    /// High-pass corner multiple, in [10, 30].
    pub k_hp: f64,
    /// Consensus bandwidth fraction, in [0.01, 0.5].
    pub rho: f64,
    /// Reactive-power consensus weight (1/var).
    pub nq: f64,
    /// Algebraic connectivity of the communication graph.
    pub lambda2: f64,
    /// Impedance-to-reactive-power gain magnitude |H(0)| (var/ohm).
    pub h0_mag: f64,
}

/// Derived controller parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignOutputs {
    pub j0: f64,
    pub d0: f64,
    /// VSG loop bandwidth, D0/J0 (rad/s).
    pub omega_c: f64,
    pub tau: f64,
    pub mu: f64,
    pub k_v: f64,
}

/// Evaluate the design formulas:
/// J0 = dP_max/RoCoF_max, D0 = dP_max/domega_max, tau = mu = 1/(k_HP omega_c),
/// k_v = rho omega_c / (nq lambda2 |H(0)|).
pub fn design_params(d: &DesignInputs) -> Result<DesignOutputs> {
    for (v, name) in [
        (d.dp_max, "dp_max"),
        (d.rocof_max, "rocof_max"),
        (d.domega_max, "domega_max"),
        (d.k_hp, "k_hp"),
        (d.rho, "rho"),
        (d.nq, "nq"),
        (d.lambda2, "lambda2"),
        (d.h0_mag, "h0_mag"),
    ] {
        if !(v > 0.0) {
            return Err(Error::Validation(format!("{name} must be positive")));
        }
    }
    if !(0.01..=0.5).contains(&d.rho) {
        return Err(Error::Validation("rho must lie in [0.01, 0.5]".into()));
    }
    if !(10.0..=30.0).contains(&d.k_hp) {
        return Err(Error::Validation("k_hp must lie in [10, 30]".into()));
    }
    let j0 = d.dp_max / d.rocof_max;
    let d0 = d.dp_max / d.domega_max;
    let omega_c = d0 / j0;
    let tau = 1.0 / (d.k_hp * omega_c);
    let k_v = d.rho * omega_c / (d.nq * d.lambda2 * d.h0_mag);
    Ok(DesignOutputs {
        j0,
        d0,
        omega_c,
        tau,
        mu: tau,
        k_v,
    })
}

/// |H(0)| = |Vi (Vi - Vp) / (Zv0 + Zl)^2|, the small-signal gain from
/// branch impedance to reactive power.
pub fn h0_magnitude(vi: f64, vp: f64, zv0: f64, zl_ohm: f64) -> Result<f64> {
    let z = zv0 + zl_ohm;
    if !(z > 0.0) {
        return Err(Error::Validation(
            "total impedance Zv0 + Zl must be positive".into(),
        ));
    }
    Ok((vi * (vi - vp) / (z * z)).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GridLink, Mode};
    use approx::assert_relative_eq;

    fn unit(j: f64, d: f64, lf_mh: f64) -> UnitParams {
        UnitParams {
            id: format!("u{j}"),
            j0: j,
            d0: d,
            pm: d,
            nq: 1.0 / d,
            lf_feeder: lf_mh * 1e-3,
            v0: 190.0,
            pr: 0.0,
            zv0: 0.0,
        }
    }

    fn model(units: Vec<UnitParams>) -> NetworkModel {
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

    #[test]
    fn table_mapping_and_round_trip() {
        let u = unit(300.0, 300.0, 4.4);
        let b = to_equivalent_circuit(&u, 314.0, 190.0);
        assert_eq!(b.c, 300.0);
        assert_eq!(b.r, 1.0 / 300.0);
        assert_relative_eq!(b.l, 3.827e-5, epsilon = 1e-8);
        let (j, d, k) = b.to_vsg();
        assert_eq!(j, 300.0);
        assert_eq!(d, 300.0);
        assert_relative_eq!(k, 26128.5, epsilon = 1.0);
    }

    #[test]
    fn branch_impedance_limits() {
        let b = BranchRLC {
            c: 300.0,
            r: 1.0 / 300.0,
            l: 3.827e-5,
        };
        let z0 = branch_impedance(&b, 0.0);
        assert_relative_eq!(z0.re, b.r, epsilon = 1e-15);
        assert_relative_eq!(z0.im, 0.0, epsilon = 1e-15);

        // High-frequency asymptote |Z| -> omega L.
        let w = 1000.0 * (1.0 / (b.l * b.c)).sqrt();
        let z = branch_impedance(&b, w);
        assert!((z.norm() - w * b.l).abs() / (w * b.l) < 0.01);

        // Independent complex-arithmetic oracle at the resonance region.
        let w = 9.33;
        let z = branch_impedance(&b, w);
        let oracle = Complex64::new(1.0, 0.0)
            / Complex64::new(1.0 / b.r, b.c * w)
            + Complex64::new(0.0, w * b.l);
        assert!((z - oracle).norm() < 1e-12);
    }

    #[test]
    fn residual_zero_for_proportional_sets() {
        let m = model(vec![unit(300.0, 300.0, 4.4), unit(600.0, 600.0, 2.2)]);
        assert!(proportionality_residual(&m) < 1e-12);
    }

    #[test]
    fn residual_for_simulation_and_experiment_sets() {
        // K ratios 1 : 1.429 : 1.667 against J/D ratios 1 : 2 : 3.
        let m = model(vec![
            unit(300.0, 300.0, 11.0),
            unit(600.0, 600.0, 7.7),
            unit(900.0, 900.0, 6.6),
        ]);
        let r = proportionality_residual(&m);
        assert_relative_eq!(r, (3.0 - 11.0 / 6.6) / 3.0, epsilon = 1e-12);
        assert_relative_eq!(r, 0.4444, epsilon = 1e-4);

        // Single-pair experiment set: K ratio 2.2/15.4 against 2.
        let m = model(vec![unit(100.0, 100.0, 2.2), unit(200.0, 200.0, 15.4)]);
        let r = proportionality_residual(&m);
        assert_relative_eq!(r, (2.0 - 2.2 / 15.4) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn design_formulas() {
        let out = design_params(&DesignInputs {
            dp_max: 300.0,
            rocof_max: 1.0,
            domega_max: 1.0,
            k_hp: 10.0,
            rho: 0.05,
            nq: 1.0,
            lambda2: 1.0,
            h0_mag: 5.0,
        })
        .unwrap();
        assert_eq!(out.j0, 300.0);
        assert_eq!(out.d0, 300.0);
        assert_eq!(out.omega_c, 1.0);
        assert_relative_eq!(out.tau, 0.1, epsilon = 1e-15);
        assert_relative_eq!(out.mu, 0.1, epsilon = 1e-15);
        // rho * omega_c = 0.05 over nq lambda2 |H(0)| = 5 gives k_v = 0.01.
        assert_relative_eq!(out.k_v, 0.01, epsilon = 1e-15);

        let out = design_params(&DesignInputs {
            dp_max: 600.0,
            rocof_max: 1.0,
            domega_max: 1.0,
            k_hp: 10.0,
            rho: 0.05,
            nq: 1.0,
            lambda2: 1.0,
            h0_mag: 5.0,
        })
        .unwrap();
        assert_eq!(out.j0, 600.0);
        assert_eq!(out.d0, 600.0);
    }

    #[test]
    fn design_rejects_zero_divisors() {
        let d = DesignInputs {
            dp_max: 300.0,
            rocof_max: 0.0,
            domega_max: 1.0,
            k_hp: 10.0,
            rho: 0.05,
            nq: 1.0,
            lambda2: 1.0,
            h0_mag: 5.0,
        };
        assert!(design_params(&d).is_err());
    }

    #[test]
    fn h0_magnitude_cases() {
        assert_eq!(h0_magnitude(190.0, 190.0, 0.0, 1.0).unwrap(), 0.0);
        let h = h0_magnitude(190.0, 185.0, 0.0, 1.3816).unwrap();
        assert_relative_eq!(h, 190.0 * 5.0 / (1.3816f64 * 1.3816), epsilon = 1e-9);
        assert_relative_eq!(h, 497.7, epsilon = 0.1);
        // Doubling the impedance quarters the gain.
        let h2 = h0_magnitude(190.0, 185.0, 0.0, 2.0 * 1.3816).unwrap();
        assert_relative_eq!(h2, h / 4.0, epsilon = 1e-12);
    }
}
