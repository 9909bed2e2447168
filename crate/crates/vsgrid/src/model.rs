//! Domain types, configuration loading/validation, and the communication
//! graph with its Laplacian.
//!
//! The wire format is a single JSON document with explicit units in field
//! names (`feeder_mH`, `sample_ms`, ...). Loaded objects carry SI units
//! (henry, seconds) and are immutable after validation.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One inverter's control and electrical parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitParams {
    pub id: String,
    /// Inertia coefficient (W s^2/rad).
    pub j0: f64,
    /// Damping coefficient (W s/rad).
    pub d0: f64,
    /// Rated active-power capacity (W).
    pub pm: f64,
    /// Reactive-power consensus weight (1/var).
    pub nq: f64,
    /// Feeder inductance (H).
    pub lf_feeder: f64,
    /// Internal voltage set point, amplitude (V).
    pub v0: f64,
    /// Active-power reference (W).
    pub pr: f64,
    /// Initial fixed virtual reactance (ohm).
    pub zv0: f64,
}

impl UnitParams {
    /// Feeder-plus-fixed-virtual branch reactance at nominal frequency (ohm).
    pub fn base_reactance(&self, omega0: f64) -> f64 {
        omega0 * self.lf_feeder + self.zv0
    }
}

/// Stand-alone (islanded) or grid-connected operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    SA,
    GC,
}

/// Utility grid link. `lg = 0` denotes a stiff/strong grid (K_g -> infinity).
#[derive(Debug, Clone, PartialEq)]
pub struct GridLink {
    pub mode: Mode,
    /// Grid-side inductance (H). Used only in GC mode.
    pub lg: f64,
    /// Grid voltage amplitude (V).
    pub vg: f64,
    /// Grid angular frequency (rad/s).
    pub omega_g: f64,
}

impl GridLink {
    pub fn is_strong(&self) -> bool {
        self.lg == 0.0
    }
}

/// The microgrid: unit list, grid link, nominal quantities, and load.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub units: Vec<UnitParams>,
    pub grid: GridLink,
    /// Nominal angular frequency (rad/s).
    pub omega0: f64,
    /// Active load at the PCC (W).
    pub load_p: f64,
    /// Reactive load at the PCC (var).
    pub load_q: f64,
    /// Q-V droop coefficient for the internal voltage law (V/var).
    pub nq_v: f64,
}

impl NetworkModel {
    pub fn unit_index(&self, id: &str) -> Result<usize> {
        self.units
            .iter()
            .position(|u| u.id == id)
            .ok_or_else(|| Error::UnknownUnit(id.to_string()))
    }
}

/// Undirected communication graph with sampling/delay/fault schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    /// Symmetric 0/1 adjacency over units, zero diagonal.
    pub adjacency: DMatrix<f64>,
    /// Message exchange period (s).
    pub sample_period: f64,
    /// Delay (s), an integer multiple of `sample_period`.
    pub delay: f64,
    /// Windows (t_start, t_end) during which all messages are dropped.
    pub fault_windows: Vec<(f64, f64)>,
}

impl CommGraph {
    pub fn n(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn laplacian(&self) -> DMatrix<f64> {
        laplacian(&self.adjacency).expect("validated adjacency")
    }

    pub fn in_fault_window(&self, t: f64) -> bool {
        self.fault_windows.iter().any(|&(a, b)| t >= a && t < b)
    }

    /// Delay expressed in whole sample periods.
    pub fn delay_samples(&self) -> usize {
        (self.delay / self.sample_period).round() as usize
    }
}

/// Timed scenario event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    SetLoad {
        #[serde(rename = "p_W")]
        p_w: f64,
        #[serde(rename = "q_var")]
        q_var: f64,
    },
    SetPref {
        unit: String,
        #[serde(rename = "p_W")]
        p_w: f64,
    },
    EnableController {
        name: String,
    },
    DisableController {
        name: String,
    },
    CommLoss {
        on: bool,
    },
    GridConnect {
        on: bool,
    },
}

// No deny_unknown_fields here: serde cannot combine it with `flatten`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    #[serde(rename = "t_s")]
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Simulation horizon, step size, and the ordered event list.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub t_end: f64,
    pub dt: f64,
    pub events: Vec<Event>,
    pub output_stride: usize,
}

/// Controller activation entry from the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSpec {
    Dvi {
        k_v: f64,
        #[serde(default = "default_sign")]
        sign: f64,
        #[serde(default)]
        enabled: bool,
    },
    AdaptiveInertia {
        mu: f64,
        tau: f64,
        #[serde(default = "default_j_min_frac")]
        j_min_frac: f64,
        #[serde(default)]
        enabled: bool,
    },
    AdaptiveDamping {
        mu: f64,
        tau: f64,
        #[serde(default)]
        enabled: bool,
    },
    Dsc {
        k_dsc: f64,
        #[serde(default)]
        enabled: bool,
    },
}

fn default_sign() -> f64 {
    1.0
}

fn default_j_min_frac() -> f64 {
    0.05
}

impl ControllerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerSpec::Dvi { .. } => "dvi",
            ControllerSpec::AdaptiveInertia { .. } => "adaptive_inertia",
            ControllerSpec::AdaptiveDamping { .. } => "adaptive_damping",
            ControllerSpec::Dsc { .. } => "dsc",
        }
    }
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(rename = "omega0_rad_s")]
    pub omega0_rad_s: f64,
    #[serde(rename = "v0_V")]
    pub v0_v: f64,
    pub mode: Mode,
    pub grid: GridConfig,
    pub units: Vec<UnitConfig>,
    pub comm: CommConfig,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub controllers: Vec<ControllerSpec>,
    /// Q-V droop coefficient (V/var) for the internal voltage law.
    #[serde(rename = "nq_v_V_per_var", default = "default_nq_v")]
    pub nq_v: f64,
    /// Free-form annotation, ignored by the loader.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn default_nq_v() -> f64 {
    0.001
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "lg_mH")]
    pub lg_mh: f64,
    #[serde(rename = "vg_V")]
    pub vg_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitConfig {
    pub id: String,
    pub j0: f64,
    pub d0: f64,
    #[serde(rename = "pm_W")]
    pub pm_w: f64,
    pub nq: f64,
    #[serde(rename = "feeder_mH")]
    pub feeder_mh: f64,
    #[serde(default)]
    pub zv0_ohm: f64,
    #[serde(rename = "pr_W", default)]
    pub pr_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommConfig {
    pub adjacency: Vec<Vec<u8>>,
    pub sample_ms: f64,
    #[serde(default)]
    pub delay_ms: f64,
    #[serde(rename = "fault_windows_s", default)]
    pub fault_windows_s: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub t_end_s: f64,
    pub dt_s: f64,
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default = "default_stride")]
    pub output_stride: usize,
}

fn default_stride() -> usize {
    10
}

/// Fully validated model bundle produced by [`load_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    pub network: NetworkModel,
    pub graph: CommGraph,
    pub scenario: Scenario,
    pub controllers: Vec<ControllerSpec>,
    /// The wire form, kept for lossless re-serialization.
    pub config: Config,
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Parse and validate a JSON config document.
pub fn load_model(text: &str) -> Result<LoadedModel> {
    let config: Config =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    build_model(config)
}

fn positive(value: f64, what: &str) -> Result<()> {
    if !(value > 0.0) {
        return Err(Error::Validation(format!("{what} must be positive")));
    }
    Ok(())
}

fn build_model(config: Config) -> Result<LoadedModel> {
    positive(config.omega0_rad_s, "omega0")?;
    positive(config.v0_v, "v0")?;
    if config.units.is_empty() {
        return Err(Error::Validation("at least one unit is required".into()));
    }
    if config.grid.lg_mh < 0.0 {
        return Err(Error::Validation("Lg must be non-negative".into()));
    }
    positive(config.nq_v, "nq_v")?;

    let mut units = Vec::with_capacity(config.units.len());
    for u in &config.units {
        positive(u.j0, "J0")?;
        positive(u.d0, "D0")?;
        positive(u.pm_w, "Pm")?;
        positive(u.nq, "nq")?;
        positive(u.feeder_mh, "Lf_feeder")?;
        if u.zv0_ohm < 0.0 {
            return Err(Error::Validation("Zv0 must be non-negative".into()));
        }
        units.push(UnitParams {
            id: u.id.clone(),
            j0: u.j0,
            d0: u.d0,
            pm: u.pm_w,
            nq: u.nq,
            lf_feeder: u.feeder_mh * 1e-3,
            v0: config.v0_v,
            pr: u.pr_w,
            zv0: u.zv0_ohm,
        });
    }
    let mut ids: Vec<&str> = units.iter().map(|u| u.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != units.len() {
        return Err(Error::Validation("unit ids must be unique".into()));
    }

    let n = units.len();
    if config.comm.adjacency.len() != n
        || config.comm.adjacency.iter().any(|row| row.len() != n)
    {
        return Err(Error::Validation(format!(
            "adjacency must be {n}x{n} to match the unit list"
        )));
    }
    let adjacency = DMatrix::from_fn(n, n, |i, j| {
        f64::from(config.comm.adjacency[i][j])
    });
    for i in 0..n {
        if adjacency[(i, i)] != 0.0 {
            return Err(Error::Validation("adjacency must have zero diagonal".into()));
        }
        for j in 0..n {
            if adjacency[(i, j)] != adjacency[(j, i)] {
                return Err(Error::Validation("adjacency must be symmetric".into()));
            }
            if adjacency[(i, j)] != 0.0 && adjacency[(i, j)] != 1.0 {
                return Err(Error::Validation("adjacency entries must be 0 or 1".into()));
            }
        }
    }
    positive(config.comm.sample_ms, "sample_ms")?;
    if config.comm.delay_ms < 0.0 {
        return Err(Error::Validation("delay_ms must be non-negative".into()));
    }
    let ratio = config.comm.delay_ms / config.comm.sample_ms;
    if (ratio - ratio.round()).abs() > 1e-9 {
        return Err(Error::Validation(
            "delay must be an integer multiple of sample_period".into(),
        ));
    }
    for &(a, b) in &config.comm.fault_windows_s {
        if !(b > a) || a < 0.0 {
            return Err(Error::Validation(
                "fault windows must satisfy 0 <= t_start < t_end".into(),
            ));
        }
    }

    let sc = &config.scenario;
    positive(sc.dt_s, "dt")?;
    if !(sc.dt_s < sc.t_end_s) {
        return Err(Error::Validation("dt must be smaller than t_end".into()));
    }
    if sc.output_stride == 0 {
        return Err(Error::Validation("output_stride must be positive".into()));
    }
    let mut last_t = 0.0;
    for ev in &sc.events {
        if ev.t < 0.0 || ev.t > sc.t_end_s {
            return Err(Error::Validation(format!(
                "event time {} outside [0, t_end]",
                ev.t
            )));
        }
        if ev.t < last_t {
            return Err(Error::Validation("events must be sorted by time".into()));
        }
        last_t = ev.t;
        match &ev.kind {
            EventKind::SetPref { unit, .. } => {
                if !units.iter().any(|u| &u.id == unit) {
                    return Err(Error::UnknownUnit(unit.clone()));
                }
            }
            EventKind::EnableController { name }
            | EventKind::DisableController { name } => {
                if !config.controllers.iter().any(|c| c.name() == name) {
                    return Err(Error::UnknownController(name.clone()));
                }
            }
            _ => {}
        }
    }

    let network = NetworkModel {
        units,
        grid: GridLink {
            mode: config.mode,
            lg: config.grid.lg_mh * 1e-3,
            vg: config.grid.vg_v,
            omega_g: config.omega0_rad_s,
        },
        omega0: config.omega0_rad_s,
        load_p: 0.0,
        load_q: 0.0,
        nq_v: config.nq_v,
    };
    let graph = CommGraph {
        adjacency,
        sample_period: config.comm.sample_ms * 1e-3,
        delay: config.comm.delay_ms * 1e-3,
        fault_windows: config.comm.fault_windows_s.clone(),
    };
    let scenario = Scenario {
        t_end: sc.t_end_s,
        dt: sc.dt_s,
        events: sc.events.clone(),
        output_stride: sc.output_stride,
    };
    let controllers = config.controllers.clone();

    Ok(LoadedModel {
        network,
        graph,
        scenario,
        controllers,
        config,
    })
}

/// L = diag(row degrees) - A for a symmetric 0/1 adjacency with zero diagonal.
pub fn laplacian(adjacency: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = adjacency.nrows();
    if adjacency.ncols() != n {
        return Err(Error::Dimension("adjacency must be square".into()));
    }
    for i in 0..n {
        for j in 0..n {
            if adjacency[(i, j)] != adjacency[(j, i)] {
                return Err(Error::Validation("adjacency must be symmetric".into()));
            }
        }
        if adjacency[(i, i)] != 0.0 {
            return Err(Error::Validation("adjacency must have zero diagonal".into()));
        }
    }
    let mut l = -adjacency.clone();
    for i in 0..n {
        l[(i, i)] = adjacency.row(i).sum();
    }
    Ok(l)
}

/// Second-smallest eigenvalue of a Laplacian; positive iff the graph is connected.
pub fn algebraic_connectivity(l: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(l.clone());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if vals.len() < 2 {
        0.0
    } else {
        vals[1]
    }
}

/// K = Vi*Vp / (omega0 * L_line), the feeder coupling coefficient (W/rad).
pub fn coupling_coefficient(vi: f64, vp: f64, l_line: f64, omega0: f64) -> Result<f64> {
    if !(l_line > 0.0) {
        return Err(Error::Validation("L_line must be positive".into()));
    }
    if !(omega0 > 0.0) {
        return Err(Error::Validation("omega0 must be positive".into()));
    }
    Ok(vi * vp / (omega0 * l_line))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn three_unit_config() -> String {
        r#"{
            "omega0_rad_s": 314, "v0_V": 190, "mode": "SA",
            "grid": {"lg_mH": 0, "vg_V": 190},
            "units": [
                {"id": "u1", "j0": 300, "d0": 300, "pm_W": 1000, "nq": 0.001, "feeder_mH": 11},
                {"id": "u2", "j0": 600, "d0": 600, "pm_W": 2000, "nq": 0.0005, "feeder_mH": 7.7},
                {"id": "u3", "j0": 900, "d0": 900, "pm_W": 3000, "nq": 0.000333333333333, "feeder_mH": 6.6}
            ],
            "comm": {"adjacency": [[0,1,0],[1,0,1],[0,1,0]], "sample_ms": 10, "delay_ms": 0},
            "scenario": {"t_end_s": 20, "dt_s": 0.001, "events": [
                {"t_s": 5, "kind": "set_load", "p_W": 700, "q_var": 0}
            ]}
        }"#
        .to_string()
    }

    #[test]
    fn loads_the_three_unit_model() {
        let m = load_model(&three_unit_config()).unwrap();
        assert_eq!(m.network.units.len(), 3);
        assert_relative_eq!(m.network.units[0].lf_feeder, 0.011);
        assert_relative_eq!(m.network.units[2].j0, 900.0);
        assert_eq!(m.graph.delay_samples(), 0);
        assert_eq!(m.scenario.events.len(), 1);
    }

    #[test]
    fn rejects_non_positive_inertia() {
        let text = three_unit_config().replace(r#""j0": 300"#, r#""j0": 0"#);
        let err = load_model(&text).unwrap_err();
        assert!(err.to_string().contains("J0 must be positive"), "{err}");
    }

    #[test]
    fn rejects_asymmetric_adjacency() {
        let text = three_unit_config().replace("[[0,1,0],[1,0,1],[0,1,0]]", "[[0,1,0],[0,0,1],[0,1,0]]");
        let err = load_model(&text).unwrap_err();
        assert!(err.to_string().contains("adjacency must be symmetric"), "{err}");
    }

    #[test]
    fn parse_error_reports_location() {
        let err = load_model("{ not json").unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        assert!(err.to_string().contains("line"));
    }

    #[test]
    fn config_round_trip_is_lossless() {
        let m = load_model(&three_unit_config()).unwrap();
        let text = serde_json::to_string_pretty(&m.config).unwrap();
        let m2 = load_model(&text).unwrap();
        assert_eq!(m.network, m2.network);
        assert_eq!(m.graph, m2.graph);
        assert_eq!(m.scenario, m2.scenario);
    }

    #[test]
    fn laplacian_of_edge_and_path_and_k3() {
        let a2 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let l2 = laplacian(&a2).unwrap();
        assert_eq!(l2, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));

        let path = DMatrix::from_row_slice(3, 3, &[0., 1., 0., 1., 0., 1., 0., 1., 0.]);
        let lp = laplacian(&path).unwrap();
        assert_eq!(
            lp,
            DMatrix::from_row_slice(3, 3, &[1., -1., 0., -1., 2., -1., 0., -1., 1.])
        );

        let k3 = DMatrix::from_row_slice(3, 3, &[0., 1., 1., 1., 0., 1., 1., 1., 0.]);
        let lk = laplacian(&k3).unwrap();
        assert_eq!(
            lk,
            DMatrix::from_row_slice(3, 3, &[2., -1., -1., -1., 2., -1., -1., -1., 2.])
        );
    }

    #[test]
    fn connectivity_matches_eigen_oracle() {
        let k3 = DMatrix::from_row_slice(3, 3, &[0., 1., 1., 1., 0., 1., 1., 1., 0.]);
        assert_relative_eq!(
            algebraic_connectivity(&laplacian(&k3).unwrap()),
            3.0,
            epsilon = 1e-9
        );
        let path = DMatrix::from_row_slice(3, 3, &[0., 1., 0., 1., 0., 1., 0., 1., 0.]);
        assert_relative_eq!(
            algebraic_connectivity(&laplacian(&path).unwrap()),
            1.0,
            epsilon = 1e-9
        );
        let disconnected = DMatrix::zeros(2, 2);
        assert_relative_eq!(
            algebraic_connectivity(&laplacian(&disconnected).unwrap()),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn coupling_coefficient_values() {
        let k = coupling_coefficient(190.0, 190.0, 4.4e-3, 314.0).unwrap();
        assert_relative_eq!(k, 36100.0 / 1.3816, epsilon = 1e-6);
        assert_relative_eq!(k, 26128.5, epsilon = 1.0);
        let k2 = coupling_coefficient(190.0, 190.0, 11e-3, 314.0).unwrap();
        assert_relative_eq!(k2, 10451.4, epsilon = 0.5);
        assert_eq!(coupling_coefficient(0.0, 190.0, 4.4e-3, 314.0).unwrap(), 0.0);
        assert!(coupling_coefficient(190.0, 190.0, 0.0, 314.0).is_err());
    }
}
