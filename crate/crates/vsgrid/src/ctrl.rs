//! Controller strategies evaluated by the engine: traditional VSG,
//! distributed virtual-impedance consensus (DVI), adaptive inertia,
//! adaptive damping, a mutual-damping DSC baseline, and the Lyapunov
//! diagnostic.
//!
//! Message exchange is simulated in-process: units publish snapshots at
//! the communication sample instants, and everyone (including the sender)
//! reads the same delayed snapshot, so pairwise consensus terms stay
//! antisymmetric.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{CommGraph, ControllerSpec};

/// High-pass filter mu s/(tau s + 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HpfParams {
    pub mu: f64,
    pub tau: f64,
}

impl HpfParams {
    pub fn new(mu: f64, tau: f64) -> Result<Self> {
        if !(mu > 0.0) || !(tau > 0.0) {
            return Err(Error::Validation("mu and tau must be positive".into()));
        }
        Ok(Self { mu, tau })
    }
}

/// Discrete high-pass filter state, advanced by the bilinear (trapezoidal)
/// map so that a constant input yields exactly zero output.
#[derive(Debug, Clone, Copy)]
pub struct Hpf {
    pub params: HpfParams,
    /// Low-pass internal state tracking the input.
    x: f64,
    /// Previous input sample.
    u_prev: f64,
}

impl Hpf {
    /// Start at equilibrium for input level `u0` (zero output).
    pub fn at_rest(params: HpfParams, u0: f64) -> Self {
        Self {
            params,
            x: u0,
            u_prev: u0,
        }
    }

    /// Advance one step of length `dt` with input `u`; returns the output.
    pub fn step(&mut self, u: f64, dt: f64) -> f64 {
        let h = dt / self.params.tau;
        self.x = (self.x * (1.0 - 0.5 * h) + 0.5 * h * (self.u_prev + u)) / (1.0 + 0.5 * h);
        self.u_prev = u;
        self.output(u)
    }

    /// Current output for input `u` without advancing the state.
    pub fn output(&self, u: f64) -> f64 {
        (self.params.mu / self.params.tau) * (u - self.x)
    }
}

/// Identity controller: constants from the unit's nameplate.
pub fn traditional_vsg(j0: f64, d0: f64) -> (f64, f64, f64) {
    (j0, d0, 0.0)
}

/// Per-unit virtual-reactance rates from the freshest received weighted-Q
/// snapshot: dZv_i/dt = sign * k_v * sum_j a_ij (x_i - x_j).
///
/// The default sign (+1) raises the reactance of a unit whose weighted
/// reactive power exceeds its neighbors'. Returns all zeros when the
/// communication network is down.
pub fn dvi_update(
    graph: &CommGraph,
    received: Option<&[f64]>,
    k_v: f64,
    sign: f64,
    comm_alive: bool,
) -> Vec<f64> {
    let n = graph.n();
    let (Some(x), true) = (received, comm_alive) else {
        return vec![0.0; n];
    };
    let mut rates = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += graph.adjacency[(i, j)] * (x[i] - x[j]);
        }
        rates[i] = sign * k_v * acc;
    }
    rates
}

/// Lyapunov diagnostic nu(x) = 1/2 x^T L x; zero iff x is uniform on each
/// connected component.
pub fn lyapunov_v(weighted_q: &[f64], l: &DMatrix<f64>) -> Result<f64> {
    let n = weighted_q.len();
    if l.nrows() != n || l.ncols() != n {
        return Err(Error::Dimension(format!(
            "Laplacian is {}x{} but the state has {} entries",
            l.nrows(),
            l.ncols(),
            n
        )));
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += weighted_q[i] * l[(i, j)] * weighted_q[j];
        }
    }
    Ok(0.5 * acc)
}

/// Adaptive inertia: J_eff = max(J0 - |HPF(Pr)|, j_min_frac * J0).
pub fn adaptive_inertia(hpf_output: f64, j0: f64, j_min_frac: f64) -> f64 {
    (j0 - hpf_output.abs()).max(j_min_frac * j0)
}

/// Adaptive damping: D_eff = D0 + |HPF(Pr)|.
pub fn adaptive_damping(hpf_output: f64, d0: f64) -> f64 {
    d0 + hpf_output.abs()
}

/// Mutual-damping baseline: per-unit added swing term
/// k_dsc * sum_j a_ij (omega_j - omega_i) from received frequency samples.
pub fn dsc_baseline(
    graph: &CommGraph,
    received_omegas: Option<&[f64]>,
    k_dsc: f64,
    comm_alive: bool,
) -> Vec<f64> {
    let n = graph.n();
    let (Some(w), true) = (received_omegas, comm_alive) else {
        return vec![0.0; n];
    };
    let mut terms = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += graph.adjacency[(i, j)] * (w[j] - w[i]);
        }
        terms[i] = k_dsc * acc;
    }
    terms
}

/// Delayed sampled broadcast channel. All units read the same snapshot,
/// `delay_samples` exchanges old.
#[derive(Debug, Clone)]
pub struct SampledChannel {
    history: VecDeque<Vec<f64>>,
    delay_samples: usize,
}

impl SampledChannel {
    pub fn new(delay_samples: usize) -> Self {
        Self {
            history: VecDeque::new(),
            delay_samples,
        }
    }

    pub fn publish(&mut self, snapshot: Vec<f64>) {
        self.history.push_back(snapshot);
        while self.history.len() > self.delay_samples + 1 {
            self.history.pop_front();
        }
    }

    /// The snapshot visible now, or `None` before enough exchanges happened.
    pub fn received(&self) -> Option<&[f64]> {
        if self.history.len() > self.delay_samples {
            self.history.front().map(|v| v.as_slice())
        } else {
            None
        }
    }
}

/// Runtime controller bank owned by one simulation run.
#[derive(Debug, Clone)]
pub struct ControllerSet {
    pub dvi: Option<DviController>,
    pub adaptive_j: Option<AdaptiveInertiaController>,
    pub adaptive_d: Option<AdaptiveDampingController>,
    pub dsc: Option<DscController>,
}

#[derive(Debug, Clone)]
pub struct DviController {
    pub k_v: f64,
    pub sign: f64,
    pub enabled: bool,
}

#[derive(Debug, Clone)]
pub struct AdaptiveInertiaController {
    pub hpf: Vec<Hpf>,
    pub j_min_frac: f64,
    pub enabled: bool,
}

#[derive(Debug, Clone)]
pub struct AdaptiveDampingController {
    pub hpf: Vec<Hpf>,
    pub enabled: bool,
}

#[derive(Debug, Clone)]
pub struct DscController {
    pub k_dsc: f64,
    pub enabled: bool,
}

impl ControllerSet {
    /// Instantiate from config entries; HPF banks start at rest for the
    /// given per-unit reference levels.
    pub fn from_specs(specs: &[ControllerSpec], pr: &[f64]) -> Result<Self> {
        let mut set = ControllerSet {
            dvi: None,
            adaptive_j: None,
            adaptive_d: None,
            dsc: None,
        };
        for spec in specs {
            match *spec {
                ControllerSpec::Dvi { k_v, sign, enabled } => {
                    set.dvi = Some(DviController { k_v, sign, enabled });
                }
                ControllerSpec::AdaptiveInertia {
                    mu,
                    tau,
                    j_min_frac,
                    enabled,
                } => {
                    let params = HpfParams::new(mu, tau)?;
                    if !(j_min_frac > 0.0 && j_min_frac < 1.0) {
                        return Err(Error::Validation(
                            "j_min_frac must lie in (0, 1)".into(),
                        ));
                    }
                    set.adaptive_j = Some(AdaptiveInertiaController {
                        hpf: pr.iter().map(|&p| Hpf::at_rest(params, p)).collect(),
                        j_min_frac,
                        enabled,
                    });
                }
                ControllerSpec::AdaptiveDamping { mu, tau, enabled } => {
                    let params = HpfParams::new(mu, tau)?;
                    set.adaptive_d = Some(AdaptiveDampingController {
                        hpf: pr.iter().map(|&p| Hpf::at_rest(params, p)).collect(),
                        enabled,
                    });
                }
                ControllerSpec::Dsc { k_dsc, enabled } => {
                    set.dsc = Some(DscController { k_dsc, enabled });
                }
            }
        }
        Ok(set)
    }

    pub fn set_enabled(&mut self, name: &str, enabled: bool) -> Result<()> {
        match name {
            "dvi" => {
                if let Some(c) = self.dvi.as_mut() {
                    c.enabled = enabled;
                    return Ok(());
                }
            }
            "adaptive_inertia" => {
                if let Some(c) = self.adaptive_j.as_mut() {
                    c.enabled = enabled;
                    return Ok(());
                }
            }
            "adaptive_damping" => {
                if let Some(c) = self.adaptive_d.as_mut() {
                    c.enabled = enabled;
                    return Ok(());
                }
            }
            "dsc" => {
                if let Some(c) = self.dsc.as_mut() {
                    c.enabled = enabled;
                    return Ok(());
                }
            }
            _ => {}
        }
        Err(Error::UnknownController(name.to_string()))
    }
}
