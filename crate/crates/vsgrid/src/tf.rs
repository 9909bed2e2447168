//! Rational transfer-function algebra and the small-signal analyses:
//! per-unit dynamics, stand-alone load-step responses, grid-connected
//! reference-step responses, Bode curves, poles, resonance peaks, and a
//! step-response oracle.
//!
//! Coefficient vectors are real, in ascending powers of s. Transfer
//! functions are kept unreduced: no symbolic pole-zero cancellation is
//! attempted.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::NetworkModel;

/// Polynomial-ratio transfer function in the Laplace variable.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalTF {
    /// Numerator coefficients, ascending powers of s.
    pub num: Vec<f64>,
    /// Denominator coefficients, ascending powers of s; leading coefficient 1.
    pub den: Vec<f64>,
}

fn trim(mut p: Vec<f64>) -> Vec<f64> {
    while p.len() > 1 && *p.last().unwrap() == 0.0 {
        p.pop();
    }
    p
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, &c) in a.iter().enumerate() {
        out[i] += c;
    }
    for (i, &c) in b.iter().enumerate() {
        out[i] += c;
    }
    out
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &ca) in a.iter().enumerate() {
        for (j, &cb) in b.iter().enumerate() {
            out[i + j] += ca * cb;
        }
    }
    out
}

fn poly_eval(p: &[f64], s: Complex64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for &c in p.iter().rev() {
        acc = acc * s + c;
    }
    acc
}

impl RationalTF {
    /// Build a TF from raw coefficient vectors; trims trailing zero
    /// coefficients and normalizes the denominator to leading coefficient 1.
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        let num = trim(num);
        let den = trim(den);
        let lead = *den.last().unwrap();
        if lead == 0.0 {
            return Err(Error::ZeroDenominator);
        }
        let num = num.iter().map(|c| c / lead).collect();
        let den = den.iter().map(|c| c / lead).collect();
        Ok(Self { num, den })
    }

    pub fn constant(k: f64) -> Self {
        Self {
            num: vec![k],
            den: vec![1.0],
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn num_degree(&self) -> usize {
        self.num.len() - 1
    }

    pub fn den_degree(&self) -> usize {
        self.den.len() - 1
    }

    /// Evaluate at a point of the complex plane.
    pub fn eval(&self, s: Complex64) -> Complex64 {
        poly_eval(&self.num, s) / poly_eval(&self.den, s)
    }

    /// DC gain, H(0).
    pub fn dc_gain(&self) -> f64 {
        self.num[0] / self.den[0]
    }
}

pub fn tf_add(a: &RationalTF, b: &RationalTF) -> Result<RationalTF> {
    RationalTF::new(
        poly_add(&poly_mul(&a.num, &b.den), &poly_mul(&b.num, &a.den)),
        poly_mul(&a.den, &b.den),
    )
}

pub fn tf_mul(a: &RationalTF, b: &RationalTF) -> Result<RationalTF> {
    RationalTF::new(poly_mul(&a.num, &b.num), poly_mul(&a.den, &b.den))
}

/// Negative feedback of `a` through `b`: a / (1 + a b).
pub fn tf_feedback(a: &RationalTF, b: &RationalTF) -> Result<RationalTF> {
    RationalTF::new(
        poly_mul(&a.num, &b.den),
        poly_add(
            &poly_mul(&a.den, &b.den),
            &poly_mul(&a.num, &b.num),
        ),
    )
}

/// Map droop coefficients onto the equivalent (J, D) pair: D = 1/m_p, J = D/omega_c.
pub fn droop_equivalent(mp: f64, omega_c: f64) -> Result<(f64, f64)> {
    if !(mp > 0.0) || !(omega_c > 0.0) {
        return Err(Error::Validation(
            "droop parameters must be positive".into(),
        ));
    }
    let d = 1.0 / mp;
    let j = d / omega_c;
    Ok((j, d))
}

/// The two per-unit responses to a PCC frequency disturbance.
#[derive(Debug, Clone)]
pub struct UnitTf {
    /// Frequency response: K/(Js^2 + Ds + K).
    pub to_omega: RationalTF,
    /// Power response: -K(Js + D)/(Js^2 + Ds + K).
    pub to_power: RationalTF,
}

pub fn unit_tf(j: f64, d: f64, k: f64) -> Result<UnitTf> {
    if !(j > 0.0) || !(d > 0.0) || !(k > 0.0) {
        return Err(Error::Validation("J, D, K must be positive".into()));
    }
    let den = vec![k, d, j];
    Ok(UnitTf {
        to_omega: RationalTF::new(vec![k], den.clone())?,
        to_power: RationalTF::new(vec![-k * d, -k * j], den)?,
    })
}

fn branch_coupling(model: &NetworkModel, i: usize) -> f64 {
    let u = &model.units[i];
    let x = u.base_reactance(model.omega0);
    u.v0 * u.v0 / x
}

/// Stand-alone load-step transfer functions.
#[derive(Debug, Clone)]
pub struct SaLoadStepTfs {
    /// Per-unit active-power share of a load step.
    pub power: Vec<RationalTF>,
    /// Per-unit frequency response to a load step.
    pub omega: Vec<RationalTF>,
    /// PCC frequency response to a load step (improper by one order).
    pub pcc_omega: RationalTF,
}

/// Assemble the per-unit load-step responses of a stand-alone microgrid.
///
/// All coupling coefficients are taken at the nominal operating point
/// (V_i = V_p = V0), including any fixed virtual reactance.
pub fn sa_load_step_tfs(model: &NetworkModel) -> Result<SaLoadStepTfs> {
    if model.units.is_empty() {
        return Err(Error::Validation("at least one unit is required".into()));
    }
    let n = model.units.len();
    let dens: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let u = &model.units[i];
            vec![branch_coupling(model, i), u.d0, u.j0]
        })
        .collect();
    // r_k = K_k (J_k s + D_k)
    let rs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let u = &model.units[i];
            let k = branch_coupling(model, i);
            vec![k * u.d0, k * u.j0]
        })
        .collect();
    // Product of all denominators except index `skip`.
    let prod_except = |skip: Option<usize>| -> Vec<f64> {
        let mut acc = vec![1.0];
        for (j, d) in dens.iter().enumerate() {
            if Some(j) != skip {
                acc = poly_mul(&acc, d);
            }
        }
        acc
    };
    let mut common = vec![0.0];
    for k in 0..n {
        common = poly_add(&common, &poly_mul(&rs[k], &prod_except(Some(k))));
    }

    let mut power = Vec::with_capacity(n);
    let mut omega = Vec::with_capacity(n);
    for i in 0..n {
        let others = prod_except(Some(i));
        power.push(RationalTF::new(poly_mul(&rs[i], &others), common.clone())?);
        let k = branch_coupling(model, i);
        let mut neg = poly_mul(&[k], &others);
        neg.iter_mut().for_each(|c| *c = -*c);
        omega.push(RationalTF::new(neg, common.clone())?);
    }
    let mut all = prod_except(None);
    all.iter_mut().for_each(|c| *c = -*c);
    let pcc_omega = RationalTF::new(all, common)?;
    Ok(SaLoadStepTfs {
        power,
        omega,
        pcc_omega,
    })
}

/// Grid-connected reference-step transfer functions.
#[derive(Debug, Clone)]
pub struct GcRefStepTfs {
    /// PCC frequency response to the source unit's reference step.
    pub pcc_omega: RationalTF,
    /// Per-unit active-power response to the source unit's reference step.
    pub power: Vec<RationalTF>,
}

/// Assemble the reference-step responses of a grid-connected microgrid.
///
/// With a stiff grid (Lg = 0) the PCC frequency is clamped and the source
/// unit's response reduces to K/(Js^2 + Ds + K).
pub fn gc_ref_step_tfs(model: &NetworkModel, source_unit: &str) -> Result<GcRefStepTfs> {
    let src = model.unit_index(source_unit)?;
    let n = model.units.len();
    if model.grid.is_strong() {
        let u = &model.units[src];
        let g = unit_tf(u.j0, u.d0, branch_coupling(model, src))?;
        let power = (0..n)
            .map(|i| {
                if i == src {
                    g.to_omega.clone()
                } else {
                    RationalTF::zero()
                }
            })
            .collect();
        return Ok(GcRefStepTfs {
            pcc_omega: RationalTF::zero(),
            power,
        });
    }

    let kg = model.grid.vg * model.units[src].v0 / (model.omega0 * model.grid.lg);
    let dens: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let u = &model.units[i];
            vec![branch_coupling(model, i), u.d0, u.j0]
        })
        .collect();
    let rs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let u = &model.units[i];
            let k = branch_coupling(model, i);
            vec![k * u.d0, k * u.j0]
        })
        .collect();
    let prod_except = |skip: Option<usize>| -> Vec<f64> {
        let mut acc = vec![1.0];
        for (j, d) in dens.iter().enumerate() {
            if Some(j) != skip {
                acc = poly_mul(&acc, d);
            }
        }
        acc
    };
    // den = K_g prod_j d_j + s * sum_k r_k prod_{j != k} d_j
    let mut den = poly_mul(&[kg], &prod_except(None));
    for k in 0..n {
        let term = poly_mul(&rs[k], &prod_except(Some(k)));
        den = poly_add(&den, &poly_mul(&[0.0, 1.0], &term));
    }
    // num = s * K_src prod_{j != src} d_j
    let ksrc = branch_coupling(model, src);
    let num = poly_mul(&[0.0, ksrc], &prod_except(Some(src)));
    let pcc_omega = RationalTF::new(num, den)?;

    let mut power = Vec::with_capacity(n);
    for i in 0..n {
        let u = &model.units[i];
        let g = unit_tf(u.j0, u.d0, branch_coupling(model, i))?;
        // dP_i = G_i dPr (source only) + (power companion) * domega_p
        let via_pcc = tf_mul(&g.to_power, &pcc_omega)?;
        let tf = if i == src {
            tf_add(&g.to_omega, &via_pcc)?
        } else {
            via_pcc
        };
        power.push(tf);
    }
    Ok(GcRefStepTfs { pcc_omega, power })
}

/// Log-spaced frequency response.
#[derive(Debug, Clone)]
pub struct FrequencyResponse {
    pub omegas: Vec<f64>,
    pub magnitude_db: Vec<f64>,
    pub phase_deg: Vec<f64>,
}

/// Evaluate a TF at s = j omega over a log grid.
pub fn bode(
    tf: &RationalTF,
    omega_min: f64,
    omega_max: f64,
    points: usize,
) -> Result<FrequencyResponse> {
    if !(omega_min > 0.0) || !(omega_max > omega_min) || points < 2 {
        return Err(Error::Validation(
            "bode grid requires 0 < omega_min < omega_max and points >= 2".into(),
        ));
    }
    let log_min = omega_min.log10();
    let log_max = omega_max.log10();
    let mut omegas = Vec::with_capacity(points);
    let mut magnitude_db = Vec::with_capacity(points);
    let mut phase_deg = Vec::with_capacity(points);
    let mut prev_phase: Option<f64> = None;
    for i in 0..points {
        let w = 10f64.powf(log_min + (log_max - log_min) * i as f64 / (points - 1) as f64);
        let s = Complex64::new(0.0, w);
        let den = poly_eval(&tf.den, s);
        if den.norm() == 0.0 {
            return Err(Error::PoleOnAxis { omega: w });
        }
        let h = poly_eval(&tf.num, s) / den;
        let mut phase = h.arg().to_degrees();
        if let Some(p) = prev_phase {
            while phase - p > 180.0 {
                phase -= 360.0;
            }
            while phase - p < -180.0 {
                phase += 360.0;
            }
        }
        prev_phase = Some(phase);
        omegas.push(w);
        magnitude_db.push(20.0 * h.norm().log10());
        phase_deg.push(phase);
    }
    Ok(FrequencyResponse {
        omegas,
        magnitude_db,
        phase_deg,
    })
}

/// A denominator root annotated with damping ratio and natural frequency.
#[derive(Debug, Clone, Copy)]
pub struct Pole {
    pub value: Complex64,
    /// zeta = -Re(s)/|s|.
    pub zeta: f64,
    /// omega_n = |s|.
    pub omega_n: f64,
}

/// All denominator roots via companion-matrix eigenvalues.
pub fn poles(tf: &RationalTF) -> Result<Vec<Pole>> {
    let den = &tf.den;
    let n = den.len() - 1;
    if n < 1 {
        return Err(Error::Validation(
            "denominator degree must be at least 1".into(),
        ));
    }
    let max_c = den.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let cond = max_c / den.last().unwrap().abs();
    if !cond.is_finite() || cond > 1e14 {
        return Err(Error::Validation(format!(
            "ill-conditioned denominator polynomial (condition estimate {cond:.3e})"
        )));
    }
    // Companion matrix of the monic denominator (den is already monic).
    let comp = DMatrix::from_fn(n, n, |r, c| {
        if c == n - 1 {
            -den[r]
        } else if r == c + 1 {
            1.0
        } else {
            0.0
        }
    });
    let eigs = comp.complex_eigenvalues();
    let mut out: Vec<Pole> = eigs
        .iter()
        .map(|&s| {
            let wn = s.norm();
            Pole {
                value: s,
                zeta: if wn > 0.0 { -s.re / wn } else { 0.0 },
                omega_n: wn,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.value.re, a.value.im)
            .partial_cmp(&(b.value.re, b.value.im))
            .unwrap()
    });
    Ok(out)
}

/// A resonance peak of a frequency response.
#[derive(Debug, Clone, Copy)]
pub struct ResonancePeak {
    pub omega_peak: f64,
    /// Peak height relative to the lowest-frequency sample (dB).
    pub peak_db_above_dc: f64,
}

/// Interior magnitude maximum, refined by local quadratic interpolation
/// in log frequency. Returns `None` for monotone or flat responses.
pub fn resonance_peak(fr: &FrequencyResponse) -> Option<ResonancePeak> {
    let mag = &fr.magnitude_db;
    let n = mag.len();
    if n < 3 {
        return None;
    }
    let (mut idx, mut best) = (0usize, f64::NEG_INFINITY);
    for (i, &m) in mag.iter().enumerate() {
        if m > best {
            best = m;
            idx = i;
        }
    }
    if idx == 0 || idx == n - 1 {
        return None;
    }
    // Require a genuine interior bump above both endpoints.
    let eps = 1e-6;
    if best <= mag[0] + eps || best <= mag[n - 1] + eps {
        return None;
    }
    let x0 = fr.omegas[idx - 1].log10();
    let x1 = fr.omegas[idx].log10();
    let x2 = fr.omegas[idx + 1].log10();
    let (y0, y1, y2) = (mag[idx - 1], mag[idx], mag[idx + 1]);
    // Quadratic vertex through the three bracketing samples.
    let denom = (x0 - x1) * (x0 - x2) * (x1 - x2);
    let a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom;
    let b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom;
    let (x_peak, y_peak) = if a < 0.0 {
        let xv = -b / (2.0 * a);
        if xv > x0 && xv < x2 {
            let c = y1 - a * x1 * x1 - b * x1;
            (xv, a * xv * xv + b * xv + c)
        } else {
            (x1, y1)
        }
    } else {
        (x1, y1)
    };
    Some(ResonancePeak {
        omega_peak: 10f64.powf(x_peak),
        peak_db_above_dc: y_peak - mag[0],
    })
}

/// A simulated step response.
#[derive(Debug, Clone)]
pub struct StepResponse {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    /// True when the TF has a pole with positive real part.
    pub unstable: bool,
}

/// Unit-step response of a proper TF via its controllable canonical
/// realization and a classical fixed-step 4th-order integrator.
pub fn step_response(tf: &RationalTF, t_end: f64, dt: f64) -> Result<StepResponse> {
    let n = tf.den.len() - 1;
    if tf.num.len() > tf.den.len() {
        return Err(Error::Validation(
            "step_response requires a proper transfer function".into(),
        ));
    }
    if !(dt > 0.0) || !(t_end > 0.0) {
        return Err(Error::Validation("t_end and dt must be positive".into()));
    }
    if n == 0 {
        // Static gain.
        let steps = (t_end / dt).round() as usize;
        let t: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
        let y = vec![tf.num[0] / tf.den[0]; t.len()];
        return Ok(StepResponse {
            t,
            y,
            unstable: false,
        });
    }
    let ps = poles(tf)?;
    let s_max = ps.iter().fold(0.0f64, |m, p| m.max(p.omega_n));
    if dt * s_max >= 0.1 {
        return Err(Error::Validation(format!(
            "dt = {dt} does not resolve the fastest pole (|s_max| = {s_max:.3})"
        )));
    }
    let unstable = ps.iter().any(|p| p.value.re > 0.0);

    // den is monic; direct feedthrough when deg(num) == deg(den).
    let d_term = if tf.num.len() == tf.den.len() {
        tf.num[n]
    } else {
        0.0
    };
    let mut b = vec![0.0; n];
    for i in 0..n {
        let c = if i < tf.num.len() { tf.num[i] } else { 0.0 };
        b[i] = c - d_term * tf.den[i];
    }
    let a_last: Vec<f64> = tf.den[..n].to_vec();

    let deriv = |x: &[f64], out: &mut [f64]| {
        for i in 0..n - 1 {
            out[i] = x[i + 1];
        }
        let mut acc = 1.0; // unit step input
        for i in 0..n {
            acc -= a_last[i] * x[i];
        }
        out[n - 1] = acc;
    };

    let steps = (t_end / dt).round() as usize;
    let mut x = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut t = Vec::with_capacity(steps + 1);
    let mut y = Vec::with_capacity(steps + 1);
    let output = |x: &[f64]| -> f64 {
        let mut acc = d_term;
        for i in 0..n {
            acc += b[i] * x[i];
        }
        acc
    };
    t.push(0.0);
    y.push(output(&x));
    for step in 1..=steps {
        deriv(&x, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        deriv(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        deriv(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + dt * k3[i];
        }
        deriv(&tmp, &mut k4);
        for i in 0..n {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t.push(step as f64 * dt);
        y.push(output(&x));
    }
    Ok(StepResponse { t, y, unstable })
}
