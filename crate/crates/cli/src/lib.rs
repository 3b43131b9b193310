//! Command-line surface: risk maps, closed-loop simulation, batch trials
//! and dataset replay, all driven by one JSON configuration file.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use riskway::config::{load_config, resolved_echo, ConfigError, RunConfig};
use riskway::risk::{pair_params, NoisyAgentState, RiskParams};
use riskway::riskmap::{compute_risk_map, export_grid_csv, export_grid_pgm, extract_zero_contour};
use riskway::sim::{run_batch, run_episode, Behavior, SceneVehicle, VehicleState};
use riskway::trace::{write_batch_summary, write_trace};
use riskway::trajectory::load_trajectories;

#[derive(Debug, Parser)]
#[command(
    name = "riskway",
    about = "Highway risk maps, courteous MPC simulation and dataset replay",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for parallel sections (overridden by RISKWAY_THREADS;
    /// defaults to the hardware count).
    #[arg(long)]
    threads: Option<usize>,
    /// Suppress the timestamp comment for byte-reproducible output.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rasterize the counterfactual risk map of the configured scene.
    Riskmap {
        #[command(flatten)]
        common: Common,
        /// Output grid CSV (x,y,risk).
        #[arg(long)]
        out: PathBuf,
        /// Optional 16-bit PGM rendering.
        #[arg(long)]
        pgm: Option<PathBuf>,
        /// Optional zero-contour CSV (polyline,x,y).
        #[arg(long)]
        contour: Option<PathBuf>,
    },
    /// Run one closed-loop episode and log the trace.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the configured RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Trace CSV path.
        #[arg(long)]
        log: PathBuf,
    },
    /// Run seeded trials with randomized initial placements.
    Batch {
        #[command(flatten)]
        common: Common,
        /// Number of trials; must match the seed count.
        #[arg(long)]
        trials: usize,
        /// Seeds: either comma-separated (3,5,8) or an inclusive range
        /// (0..9).
        #[arg(long)]
        seeds: String,
        /// Summary CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace one dataset vehicle with the MPC ego and replay the rest.
    Replay {
        #[command(flatten)]
        common: Common,
        /// Trajectory CSV (vehicle_id,frame,x,y,vx,vy,length,width).
        #[arg(long)]
        dataset: PathBuf,
        /// Dataset vehicle to replace with the ego.
        #[arg(long)]
        ego_id: u32,
        /// Trace CSV path.
        #[arg(long)]
        log: PathBuf,
    },
}

/// Exit with 0 on success, 1 on validation/usage errors, 2 on runtime
/// failures.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.exit_code
        }
    }
}

struct CliError {
    message: String,
    exit_code: i32,
}

fn validation(message: impl Into<String>) -> CliError {
    CliError {
        message: message.into(),
        exit_code: 1,
    }
}

fn runtime(message: impl Into<String>) -> CliError {
    CliError {
        message: message.into(),
        exit_code: 2,
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => runtime(e.to_string()),
            _ => validation(e.to_string()),
        }
    }
}

fn init_threads(requested: Option<usize>) -> Result<(), CliError> {
    let effective = match std::env::var("RISKWAY_THREADS") {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| {
            validation(format!("RISKWAY_THREADS must be a positive integer, got \"{v}\""))
        })?),
        Err(_) => requested,
    };
    if let Some(n) = effective {
        if n == 0 {
            return Err(validation("thread count must be positive"));
        }
        // A pool may already exist when embedded in tests; that is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn timestamp(disabled: bool) -> Option<String> {
    if disabled {
        return None;
    }
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Some(format!("unix {secs}"))
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    init_threads(common.threads)?;
    Ok(load_config(&common.config)?)
}

fn write_echo(cfg: &RunConfig, primary_out: &Path) -> Result<(), CliError> {
    let mut name = primary_out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    name.push_str(".resolved.json");
    let path = primary_out.with_file_name(name);
    std::fs::write(&path, resolved_echo(cfg))
        .map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Riskmap {
            common,
            out,
            pgm,
            contour,
        } => {
            let cfg = load(&common)?;
            run_riskmap(&cfg, &out, pgm.as_deref(), contour.as_deref())?;
            write_echo(&cfg, &out)
        }
        Command::Simulate {
            common,
            steps,
            seed,
            log,
        } => {
            let mut cfg = load(&common)?;
            if let Some(steps) = steps {
                cfg.sim.steps = steps;
            }
            if let Some(seed) = seed {
                cfg.seed = Some(seed);
                cfg.sim.rng_seed = seed;
            }
            cfg.validate()?;
            let trace = run_episode(&cfg.scene, &cfg.sim, &cfg.mpc, &cfg.risk)
                .map_err(|e| runtime(e.to_string()))?;
            write_trace(&trace, &log, timestamp(common.no_timestamp).as_deref())
                .map_err(|e| runtime(e.to_string()))?;
            write_echo(&cfg, &log)
        }
        Command::Batch {
            common,
            trials,
            seeds,
            out,
        } => {
            let cfg = load(&common)?;
            let seed_list = parse_seeds(&seeds)?;
            if seed_list.len() != trials {
                return Err(validation(format!(
                    "--trials {trials} does not match {} seeds",
                    seed_list.len()
                )));
            }
            let (traces, summary) =
                run_batch(&cfg.scene, &cfg.sim, &cfg.mpc, &cfg.risk, trials, &seed_list)
                    .map_err(|e| runtime(e.to_string()))?;
            write_batch_summary(
                &traces,
                &seed_list,
                &summary,
                &out,
                timestamp(common.no_timestamp).as_deref(),
            )
            .map_err(|e| runtime(e.to_string()))?;
            write_echo(&cfg, &out)
        }
        Command::Replay {
            common,
            dataset,
            ego_id,
            log,
        } => {
            let mut cfg = load(&common)?;
            let streams = load_trajectories(&dataset).map_err(|e| validation(e.to_string()))?;
            let ego_stream = streams
                .iter()
                .find(|s| s.vehicle_id == ego_id)
                .ok_or_else(|| {
                    validation(format!("dataset has no vehicle with id {ego_id}"))
                })?;
            let first = ego_stream.records[0];
            let mut vehicles = vec![SceneVehicle {
                id: ego_id,
                geometry: ego_stream.geometry,
                behavior: Behavior::MpcEgo,
                state: VehicleState {
                    x: first.x,
                    y: first.y,
                    vx: first.vx,
                    vy: first.vy,
                    heading: first.vy.atan2(first.vx),
                },
            }];
            let mut last_frame = 0usize;
            for stream in &streams {
                if stream.vehicle_id == ego_id {
                    continue;
                }
                let frames = stream.replay_frames();
                let start = frames[0];
                last_frame = last_frame.max(frames.last().unwrap().frame);
                vehicles.push(SceneVehicle {
                    id: stream.vehicle_id,
                    geometry: stream.geometry,
                    behavior: Behavior::Replay(frames),
                    state: VehicleState {
                        x: start.x,
                        y: start.y,
                        vx: start.vx,
                        vy: start.vy,
                        heading: 0.0,
                    },
                });
            }
            cfg.scene.vehicles = vehicles;
            cfg.scene.frame = 0;
            // The episode ends with the data.
            cfg.sim.steps = cfg.sim.steps.min(last_frame.max(1));
            cfg.mpc.geometry = ego_stream.geometry;
            cfg.validate()?;
            let trace = run_episode(&cfg.scene, &cfg.sim, &cfg.mpc, &cfg.risk)
                .map_err(|e| runtime(e.to_string()))?;
            write_trace(&trace, &log, timestamp(common.no_timestamp).as_deref())
                .map_err(|e| runtime(e.to_string()))?;
            write_echo(&cfg, &log)
        }
    }
}

fn run_riskmap(
    cfg: &RunConfig,
    out: &Path,
    pgm: Option<&Path>,
    contour: Option<&Path>,
) -> Result<(), CliError> {
    let ego_index = cfg
        .scene
        .ego_index()
        .ok_or_else(|| validation("scene has no ego vehicle"))?;
    let ego = &cfg.scene.vehicles[ego_index];
    let mut others = Vec::new();
    let mut per_pair: Vec<RiskParams> = Vec::new();
    for (idx, v) in cfg.scene.vehicles.iter().enumerate() {
        if idx == ego_index {
            continue;
        }
        let (pos_var, vel_var) = (
            cfg.sim.noise.neighbor_pos_var,
            cfg.sim.noise.neighbor_vel_var,
        );
        others.push(NoisyAgentState::new(
            (v.state.x, v.state.y),
            (v.state.vx, v.state.vy),
            [pos_var; 2],
            [vel_var; 2],
        ));
        per_pair.push(if cfg.sim.heterogeneous_sizing {
            pair_params(&cfg.risk, &ego.geometry, &v.geometry, &cfg.sim.pair_buffers)
        } else {
            cfg.risk
        });
    }
    let grid = compute_risk_map(
        &cfg.grid.spec,
        cfg.grid.ego_vel,
        &cfg.grid.ego_noise,
        &others,
        &per_pair,
    )
    .map_err(|e| validation(e.to_string()))?;
    export_grid_csv(&grid, out).map_err(|e| runtime(e.to_string()))?;
    if let Some(pgm_path) = pgm {
        export_grid_pgm(&grid, pgm_path).map_err(|e| runtime(e.to_string()))?;
    }
    if let Some(contour_path) = contour {
        let polylines = extract_zero_contour(&grid);
        let mut text = String::from("polyline,x,y\n");
        for (idx, line) in polylines.iter().enumerate() {
            for (x, y) in line {
                text.push_str(&format!("{idx},{x},{y}\n"));
            }
        }
        std::fs::write(contour_path, text)
            .map_err(|e| runtime(format!("writing {}: {e}", contour_path.display())))?;
    }
    Ok(())
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = |detail: &str| validation(format!("cannot parse --seeds \"{text}\": {detail}"));
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad("range start"))?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad("range end"))?;
        if hi < lo {
            return Err(bad("range end below start"));
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| bad(s)))
        .collect()
}
