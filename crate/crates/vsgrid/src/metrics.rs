//! Trajectory metrics: step-response figures of merit extracted from a
//! recorded [`TimeSeries`], emitted as JSON next to the CSV.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::TimeSeries;
use crate::error::{Error, Result};

/// Figures of merit for one recorded signal, measured against its final value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalMetrics {
    /// Peak excursion beyond the terminal value, percent of the net step.
    pub overshoot_pct: f64,
    /// First time after which the signal stays inside the 2 % band around
    /// its terminal value; `null` when it never settles.
    pub settling_time_s: Option<f64>,
    pub peak_to_peak: f64,
    pub steady_state_value: f64,
    /// Log-decrement damping-ratio estimate; `null` with fewer than two
    /// same-side extrema.
    pub damping_estimate: Option<f64>,
}

/// Run-level metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub signals: BTreeMap<String, SignalMetrics>,
    /// Max |domega/dt| over a 20 ms window, across all units (rad/s^2).
    pub rocof_max_rad_s2: f64,
    /// Worst deviation of terminal active powers from capacity proportions,
    /// percent of total.
    pub sharing_error_pct: f64,
    /// Last Lyapunov sample of the run, when the DVI monitor was active.
    pub lyapunov_final: Option<f64>,
}

/// Metrics of a single trajectory `y(t)` interpreted as a step response
/// from `y[0]` to its terminal value. Constant signals report zeros.
pub fn signal_metrics(t: &[f64], y: &[f64]) -> Result<SignalMetrics> {
    if t.is_empty() || t.len() != y.len() {
        return Err(Error::Dimension(
            "signal and time vectors must be nonempty and equal length".into(),
        ));
    }
    let terminal = *y.last().unwrap();
    let y0 = y[0];
    let step = terminal - y0;
    let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let peak_to_peak = max - min;
    let scale = max.abs().max(min.abs()).max(1e-12);

    let overshoot_pct = if step.abs() < 1e-9 * scale {
        0.0
    } else {
        let beyond = if step > 0.0 { max - terminal } else { terminal - min };
        100.0 * beyond.max(0.0) / step.abs()
    };

    let band = 0.02 * step.abs().max(1e-9 * scale);
    let mut settling_time_s = Some(t[0]);
    for i in (0..y.len()).rev() {
        if (y[i] - terminal).abs() > band {
            settling_time_s = if i + 1 < t.len() {
                Some(t[i + 1])
            } else {
                None
            };
            break;
        }
    }

    Ok(SignalMetrics {
        overshoot_pct,
        settling_time_s,
        peak_to_peak,
        steady_state_value: terminal,
        damping_estimate: log_decrement(y, terminal),
    })
}

/// Damping ratio from the log decrement of successive same-side extrema of
/// the deviation from `terminal`. Needs at least two such extrema.
fn log_decrement(y: &[f64], terminal: f64) -> Option<f64> {
    let e: Vec<f64> = y.iter().map(|&v| v - terminal).collect();
    let mut maxima = Vec::new();
    for i in 1..e.len().saturating_sub(1) {
        if e[i] > e[i - 1] && e[i] >= e[i + 1] && e[i] > 0.0 {
            maxima.push(e[i]);
        }
    }
    let mut deltas = Vec::new();
    for w in maxima.windows(2) {
        if w[1] > 0.0 && w[0] > w[1] {
            deltas.push((w[0] / w[1]).ln());
        }
    }
    if deltas.is_empty() {
        return None;
    }
    let delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let denom = (4.0 * std::f64::consts::PI.powi(2) + delta * delta).sqrt();
    Some(delta / denom)
}

/// Max |slope| of `y` over windows of about `window` seconds.
pub fn windowed_max_slope(t: &[f64], y: &[f64], window: f64) -> f64 {
    let mut worst = 0.0f64;
    let mut j = 0;
    for i in 0..t.len() {
        if j < i + 1 {
            j = i + 1;
        }
        while j < t.len() && t[j] - t[i] < window {
            j += 1;
        }
        if j >= t.len() {
            break;
        }
        let slope = (y[j] - y[i]) / (t[j] - t[i]);
        worst = worst.max(slope.abs());
    }
    worst
}

/// Extract the full report: per-unit active powers, PCC frequency, RoCoF
/// across unit frequencies, and capacity-proportional sharing error.
pub fn extract_metrics(
    series: &TimeSeries,
    pm: &[f64],
    lyapunov_final: Option<f64>,
) -> Result<MetricsReport> {
    if series.is_empty() {
        return Err(Error::Validation("time series is empty".into()));
    }
    if pm.len() != series.n_units() {
        return Err(Error::Dimension(
            "capacity vector length must match the unit count".into(),
        ));
    }
    let mut signals = BTreeMap::new();
    for i in 0..series.n_units() {
        signals.insert(
            format!("unit{}_P_W", i + 1),
            signal_metrics(&series.t, &series.p[i])?,
        );
    }
    signals.insert(
        "omega_p_rad_s".to_string(),
        signal_metrics(&series.t, &series.omega_p)?,
    );

    let rocof_max_rad_s2 = (0..series.n_units())
        .map(|i| windowed_max_slope(&series.t, &series.omega[i], 0.02))
        .fold(0.0, f64::max);

    let last = series.len() - 1;
    let total_p: f64 = (0..series.n_units()).map(|i| series.p[i][last]).sum();
    let total_pm: f64 = pm.iter().sum();
    let sharing_error_pct = if total_p.abs() < 1e-9 {
        0.0
    } else {
        (0..series.n_units())
            .map(|i| {
                let ideal = total_p * pm[i] / total_pm;
                100.0 * (series.p[i][last] - ideal).abs() / total_p.abs()
            })
            .fold(0.0, f64::max)
    };

    Ok(MetricsReport {
        signals,
        rocof_max_rad_s2,
        sharing_error_pct,
        lyapunov_final,
    })
}
