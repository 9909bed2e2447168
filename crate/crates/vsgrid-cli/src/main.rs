//! Command-line surface: scenario execution, frequency-domain analysis,
//! the parameter-design calculator, proportionality checking, and batch
//! sweeps. All outputs are CSV or JSON.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vsgrid::engine::{simulate, SimRun};
use vsgrid::equiv::{design_params, to_equivalent_circuit, DesignInputs};
use vsgrid::metrics::extract_metrics;
use vsgrid::model::{load_model, LoadedModel};
use vsgrid::tf::{bode, gc_ref_step_tfs, resonance_peak, sa_load_step_tfs, RationalTF};

#[derive(Parser)]
#[command(
    name = "vsgrid",
    about = "Multi-inverter VSG microgrid simulator and analysis toolkit",
    version
)]
struct Cli {
    /// Output directory for generated CSV/JSON files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Reserved for future stochastic features; the engine is deterministic.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel workers for commands operating on several scenario files.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario config; write trajectory CSV and metrics JSON.
    Simulate {
        config: PathBuf,
    },
    /// Emit per-unit frequency responses and report resonance peaks.
    Bode {
        config: PathBuf,
        /// Which transfer family: load-step (sa) or reference-step (gc).
        #[arg(long, value_enum, default_value_t = Which::Sa)]
        which: Which,
    },
    /// Derive controller parameters from operating limits.
    Design(DesignArgs),
    /// Report how far a configuration is from the proportionality rule.
    Check {
        config: PathBuf,
    },
    /// Run several scenario configs, optionally in parallel (--jobs).
    Sweep {
        configs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Sa,
    Gc,
}

#[derive(Args)]
struct DesignArgs {
    /// Maximum active-power variation (W).
    #[arg(long)]
    dp_max: f64,
    /// Rate-of-change-of-frequency limit (rad/s^2).
    #[arg(long)]
    rocof_max: f64,
    /// Frequency-deviation limit (rad/s).
    #[arg(long)]
    dw_max: f64,
    /// High-pass corner multiple (10..=30).
    #[arg(long, default_value_t = 10.0)]
    k_hp: f64,
    /// Consensus bandwidth fraction (0.01..=0.5).
    #[arg(long, default_value_t = 0.05)]
    rho: f64,
    /// Grouped divisor nq * lambda2 * |H(0)| for the consensus gain.
    #[arg(long, default_value_t = 1.0)]
    nq_l2_h0: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), String> {
    match &cli.command {
        Command::Simulate { config } => cmd_simulate(config, &cli.out).map(|_| ()),
        Command::Bode { config, which } => cmd_bode(config, *which, &cli.out),
        Command::Design(args) => cmd_design(args),
        Command::Check { config } => cmd_check(config),
        Command::Sweep { configs } => cmd_sweep(configs, &cli.out, cli.jobs.max(1)),
    }
}

fn read_config(path: &Path) -> Result<LoadedModel, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    load_model(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into())
}

fn cmd_simulate(config: &Path, out: &Path) -> Result<SimRun, String> {
    let m = read_config(config)?;
    let run = simulate(&m.network, &m.graph, &m.scenario, &m.controllers)
        .map_err(|e| e.to_string())?;
    let pm: Vec<f64> = m.network.units.iter().map(|u| u.pm).collect();
    let lyap_final = run.lyapunov.last().map(|&(_, v)| v);
    let report =
        extract_metrics(&run.series, &pm, lyap_final).map_err(|e| e.to_string())?;

    fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let base = stem(config);
    let csv_path = out.join(format!("{base}.csv"));
    let json_path = out.join(format!("{base}_metrics.json"));
    fs::write(&csv_path, run.series.to_csv()).map_err(|e| e.to_string())?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?;
    fs::write(&json_path, json).map_err(|e| e.to_string())?;
    println!(
        "{}: {} samples, {} units -> {}, {}",
        base,
        run.series.len(),
        run.series.n_units(),
        csv_path.display(),
        json_path.display()
    );
    Ok(run)
}

fn write_bode_csv(
    out: &Path,
    base: &str,
    unit_id: &str,
    tf: &RationalTF,
) -> Result<(), String> {
    let fr = bode(tf, 0.01, 1000.0, 600).map_err(|e| e.to_string())?;
    let mut text = String::from("omega_rad_s,magnitude_db,phase_deg\n");
    for i in 0..fr.omegas.len() {
        text.push_str(&format!(
            "{},{},{}\n",
            fr.omegas[i], fr.magnitude_db[i], fr.phase_deg[i]
        ));
    }
    let path = out.join(format!("{base}_bode_{unit_id}.csv"));
    fs::write(&path, text).map_err(|e| e.to_string())?;
    match resonance_peak(&fr) {
        Some(p) => println!(
            "{unit_id}: resonance peak at {:.3} rad/s, {:.2} dB above the low-frequency level",
            p.omega_peak, p.peak_db_above_dc
        ),
        None => println!("{unit_id}: no interior peak"),
    }
    Ok(())
}

fn cmd_bode(config: &Path, which: Which, out: &Path) -> Result<(), String> {
    let m = read_config(config)?;
    fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let base = stem(config);
    match which {
        Which::Sa => {
            let tfs = sa_load_step_tfs(&m.network).map_err(|e| e.to_string())?;
            for (i, u) in m.network.units.iter().enumerate() {
                write_bode_csv(out, &base, &u.id, &tfs.power[i])?;
            }
        }
        Which::Gc => {
            let src = &m.network.units[0].id;
            let tfs = gc_ref_step_tfs(&m.network, src).map_err(|e| e.to_string())?;
            for (i, u) in m.network.units.iter().enumerate() {
                write_bode_csv(out, &base, &u.id, &tfs.power[i])?;
            }
        }
    }
    Ok(())
}

fn cmd_design(a: &DesignArgs) -> Result<(), String> {
    if !(a.rocof_max > 0.0) {
        return Err("rocof-max must be positive".into());
    }
    if !(a.dw_max > 0.0) {
        return Err("dw-max must be positive".into());
    }
    let out = design_params(&DesignInputs {
        dp_max: a.dp_max,
        rocof_max: a.rocof_max,
        domega_max: a.dw_max,
        k_hp: a.k_hp,
        rho: a.rho,
        nq: a.nq_l2_h0,
        lambda2: 1.0,
        h0_mag: 1.0,
    })
    .map_err(|e| e.to_string())?;
    println!("parameter  value        formula");
    println!("J0         {:<12} dP_max / RoCoF_max", out.j0);
    println!("D0         {:<12} dP_max / dw_max", out.d0);
    println!("omega_c    {:<12} D0 / J0", out.omega_c);
    println!("tau        {:<12} 1 / (k_HP * omega_c)", out.tau);
    println!("mu         {:<12} tau", out.mu);
    println!("k_v        {:<12} rho * omega_c / (nq * lambda2 * |H(0)|)", out.k_v);
    let json = serde_json::json!({
        "j0": out.j0,
        "d0": out.d0,
        "omega_c_rad_s": out.omega_c,
        "tau_s": out.tau,
        "mu_s": out.mu,
        "k_v": out.k_v,
    });
    println!("{json}");
    Ok(())
}

fn cmd_check(config: &Path) -> Result<(), String> {
    let m = read_config(config)?;
    let net = &m.network;
    let residual = vsgrid::equiv::proportionality_residual(net);
    println!("proportionality residual: {residual:.6}");

    println!("unit  J-ratio  D-ratio  K-ratio");
    let k0 = {
        let b = to_equivalent_circuit(&net.units[0], net.omega0, net.units[0].v0);
        1.0 / b.l
    };
    for u in &net.units {
        let b = to_equivalent_circuit(u, net.omega0, u.v0);
        println!(
            "{:<5} {:<8.4} {:<8.4} {:<8.4}",
            u.id,
            u.j0 / net.units[0].j0,
            u.d0 / net.units[0].d0,
            (1.0 / b.l) / k0
        );
    }

    if net.units.len() < 2 || residual < 1e-9 {
        println!("suggested virtual-reactance increments: none needed");
        return Ok(());
    }
    // Smallest uniform scale: X_target_i = c / r_i with r_i = J_i / J_1,
    // c chosen so every increment stays non-negative.
    let r: Vec<f64> = net.units.iter().map(|u| u.j0 / net.units[0].j0).collect();
    let x: Vec<f64> = net
        .units
        .iter()
        .map(|u| u.base_reactance(net.omega0))
        .collect();
    let c = x
        .iter()
        .zip(&r)
        .map(|(&xi, &ri)| xi * ri)
        .fold(f64::NEG_INFINITY, f64::max);
    println!("suggested virtual-reactance increments (ohm):");
    for i in 0..net.units.len() {
        let add = c / r[i] - x[i];
        // Full precision so the increments can be pasted back into a config.
        println!(
            "{:<5} X = {:.4} -> target {:.4}, add Zv {}",
            net.units[i].id,
            x[i],
            c / r[i],
            add
        );
    }
    Ok(())
}

fn cmd_sweep(configs: &[PathBuf], out: &Path, jobs: usize) -> Result<(), String> {
    if configs.is_empty() {
        return Err("sweep requires at least one config file".into());
    }
    let errors = std::sync::Mutex::new(Vec::<String>::new());
    std::thread::scope(|scope| {
        for chunk_start in 0..jobs.min(configs.len()) {
            let errors = &errors;
            let paths: Vec<&PathBuf> =
                configs.iter().skip(chunk_start).step_by(jobs).collect();
            scope.spawn(move || {
                for path in paths {
                    if let Err(e) = cmd_simulate(path, out) {
                        errors.lock().unwrap().push(e);
                    }
                }
            });
        }
    });
    let errors = errors.into_inner().unwrap();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors.join("; "))
    }
}
