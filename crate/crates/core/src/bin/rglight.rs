//! Command-line workbench: network generation, training, evaluation, the
//! generalization matrix, and a quick demo.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use rglight::agents::AgentKind;
use rglight::gcnmodel::Checkpoint;
use rglight::harness::{
    delay_evolution_svg, derive_seed, evaluate, generalization_matrix, matrix_heatmap_svg,
    switch_rate_report, train, write_delay_evolution_csv, write_matrix_csv, write_per_seed_csv,
    write_step_stream_csv, write_summary_csv, write_switch_rate_csv, Checkpoints, Method,
    NetworkSource, RunConfig, RunOptions, ScenarioSpec,
};
use rglight::roadnet::{generate_grid_network, generate_random_network, generate_random_network_unchecked};

#[derive(Parser)]
#[command(name = "rglight", about = "Graph-RL traffic signal control workbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration file (.toml or .json); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker thread count override (0 = one per CPU).
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let mut c = RunConfig::default();
                c.apply_env();
                c
            }
        };
        if let Some(seed) = self.seed {
            config.root_seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        if let Some(workers) = self.workers {
            config.workers = workers;
        }
        config.validate()?;
        for warning in config.warnings() {
            eprintln!("warning: {warning}");
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a road network file.
    Netgen {
        /// Network kind: "random" or "grid".
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Intersection count for random networks (2-10 unless --allow-large).
        #[arg(long, default_value_t = 4)]
        n: u32,
        #[arg(long, default_value_t = 4)]
        rows: u32,
        #[arg(long, default_value_t = 4)]
        cols: u32,
        #[arg(long, default_value_t = 1)]
        lanes: u32,
        /// Permit random networks above 10 intersections.
        #[arg(long)]
        allow_large: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train agents and write checkpoints plus the episode log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Agent to train: "igrl", "dgrl", or "both".
        #[arg(long, default_value = "both")]
        agent: String,
        /// Resume from an existing IGRL checkpoint.
        #[arg(long)]
        resume_igrl: Option<PathBuf>,
        /// Resume from an existing DGRL checkpoint.
        #[arg(long)]
        resume_dgrl: Option<PathBuf>,
        /// Episode-count override.
        #[arg(long)]
        episodes: Option<u32>,
    },
    /// Evaluate methods on a scenario grid with paired trip seeds.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Network source: "grid:RxC", "random:SEED:N", or "file:PATH".
        #[arg(long, default_value = "grid:2x2")]
        network: String,
        /// Comma-separated demand periods.
        #[arg(long, default_value = "4")]
        periods: String,
        /// Comma-separated missing probabilities.
        #[arg(long, default_value = "0")]
        missing: String,
        /// Comma-separated methods.
        #[arg(long, default_value = "fixed,greedy")]
        methods: String,
        #[arg(long)]
        igrl: Option<PathBuf>,
        #[arg(long)]
        dgrl: Option<PathBuf>,
        /// Seed-count override.
        #[arg(long)]
        seeds: Option<u32>,
        /// Horizon override in steps.
        #[arg(long)]
        horizon: Option<u64>,
        /// Divide reported sums by 100.
        #[arg(long)]
        paper_scale: bool,
        /// Dump the observation graph as JSON every N steps (first seed,
        /// first RL method only).
        #[arg(long)]
        dump_graph_every: Option<u64>,
    },
    /// Produce the scale × demand generalization matrix and switch rates.
    Matrix {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "2,4,6,8")]
        scales: String,
        #[arg(long, default_value = "0.5,1,2,4")]
        demands: String,
        #[arg(long, default_value = "fixed,greedy,igrl,dgrl,rglight")]
        methods: String,
        #[arg(long)]
        igrl: Option<PathBuf>,
        #[arg(long)]
        dgrl: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<u32>,
        #[arg(long)]
        horizon: Option<u64>,
    },
    /// Quick end-to-end smoke run with the transportation baselines.
    Demo {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn parse_list<T: FromStr>(text: &str, what: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad {what} entry {s:?}: {e}"))
        })
        .collect()
}

fn parse_network(text: &str) -> anyhow::Result<NetworkSource> {
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        ["grid", dims] => {
            let (rows, cols) = dims
                .split_once('x')
                .ok_or_else(|| anyhow::anyhow!("grid spec must look like grid:4x4"))?;
            Ok(NetworkSource::Grid { rows: rows.parse()?, cols: cols.parse()?, lanes: 1 })
        }
        ["random", seed, n] => {
            Ok(NetworkSource::Random { seed: seed.parse()?, n: n.parse()?, lanes: 1 })
        }
        ["file", path] => Ok(NetworkSource::File { path: PathBuf::from(path) }),
        _ => anyhow::bail!("network spec {text:?} not understood"),
    }
}

fn load_checkpoints(
    config: &RunConfig,
    igrl: &Option<PathBuf>,
    dgrl: &Option<PathBuf>,
) -> anyhow::Result<Checkpoints> {
    let mut out = Checkpoints::default();
    if let Some(path) = igrl {
        let ck = Checkpoint::from_json(&std::fs::read_to_string(path)?)?;
        out.igrl = Some(ck.restore(&config.model)?);
    }
    if let Some(path) = dgrl {
        let ck = Checkpoint::from_json(&std::fs::read_to_string(path)?)?;
        out.dgrl = Some(ck.restore(&config.model)?);
    }
    Ok(out)
}

fn eval_seeds(count: u32) -> Vec<u64> {
    (0..u64::from(count)).collect()
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Netgen { kind, seed, n, rows, cols, lanes, allow_large, out } => {
            let net = match kind.as_str() {
                "random" if allow_large => generate_random_network_unchecked(seed, n, lanes)?,
                "random" => generate_random_network(seed, n, lanes)?,
                "grid" => generate_grid_network(rows, cols, lanes)?,
                other => anyhow::bail!("unknown network kind {other:?}"),
            };
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(&out, net.to_json())?;
            println!(
                "wrote {} ({} intersections, {} lanes, {} connections)",
                out.display(),
                net.signalized().len(),
                net.lanes.len(),
                net.connections.len()
            );
        }

        Command::Train { config, agent, resume_igrl, resume_dgrl, episodes } => {
            let mut run = config.load()?;
            if let Some(e) = episodes {
                run.train.episodes = e;
            }
            let kinds: Vec<AgentKind> = match agent.as_str() {
                "igrl" => vec![AgentKind::Igrl],
                "dgrl" => vec![AgentKind::Dgrl],
                "both" => vec![AgentKind::Igrl, AgentKind::Dgrl],
                other => anyhow::bail!("unknown agent {other:?}"),
            };
            let mut resume = Vec::new();
            for kind in &kinds {
                let path = match kind {
                    AgentKind::Igrl => &resume_igrl,
                    AgentKind::Dgrl => &resume_dgrl,
                };
                resume.push(match path {
                    Some(p) => Some(Checkpoint::from_json(&std::fs::read_to_string(p)?)?),
                    None => None,
                });
            }
            let started = std::time::Instant::now();
            let artifacts = train(&run, &kinds, &resume)?;
            std::fs::create_dir_all(&run.out_dir)?;
            for ck in &artifacts.checkpoints {
                let path = run.out_dir.join(format!("{}.ckpt.json", ck.agent));
                std::fs::write(&path, ck.to_json())?;
                println!("wrote {}", path.display());
            }
            let mut log = String::from("agent,episode,epsilon,mean_loss,mean_reward,updates\n");
            for row in &artifacts.log {
                use std::fmt::Write as _;
                writeln!(
                    log,
                    "{},{},{},{},{},{}",
                    row.agent, row.episode, row.epsilon, row.mean_loss, row.mean_reward, row.updates
                )?;
            }
            let log_path = run.out_dir.join("training_log.csv");
            std::fs::write(&log_path, log)?;
            println!(
                "wrote {} ({} episodes in {:.1}s)",
                log_path.display(),
                artifacts.log.len(),
                started.elapsed().as_secs_f64()
            );
        }

        Command::Eval {
            config,
            network,
            periods,
            missing,
            methods,
            igrl,
            dgrl,
            seeds,
            horizon,
            paper_scale,
            dump_graph_every,
        } => {
            let mut run = config.load()?;
            if paper_scale {
                run.eval.paper_scale = true;
            }
            let source = parse_network(&network)?;
            let periods: Vec<f64> = parse_list(&periods, "period")?;
            let missing: Vec<f64> = parse_list(&missing, "missing probability")?;
            let methods: Vec<Method> = parse_list(&methods, "method")?;
            let checkpoints = load_checkpoints(&run, &igrl, &dgrl)?;
            let horizon = horizon.unwrap_or(run.eval.horizon);
            let seed_list = eval_seeds(seeds.unwrap_or(run.eval.seeds));

            let mut scenarios = Vec::new();
            for &period in &periods {
                for &p in &missing {
                    scenarios.push(ScenarioSpec::new(
                        source.clone(),
                        period,
                        p,
                        horizon,
                        seed_list.clone(),
                    )?);
                }
            }
            let records = evaluate(&run, &scenarios, &methods, &checkpoints)?;
            std::fs::create_dir_all(&run.out_dir)?;
            write_summary_csv(&records, &run.out_dir.join("summary.csv"), run.eval.paper_scale)?;
            write_per_seed_csv(&records, &run.out_dir.join("per_seed.csv"))?;
            write_delay_evolution_csv(&records, &run.out_dir.join("delay_evolution.csv"))?;
            std::fs::write(
                run.out_dir.join("delay_evolution.svg"),
                delay_evolution_svg(&records, "Average delay evolution"),
            )?;
            println!("wrote summary.csv, per_seed.csv, delay_evolution.{{csv,svg}} to {}", run.out_dir.display());

            // Optional graph dump and step stream on the first scenario.
            if let Some(every) = dump_graph_every {
                if let Some(method) = methods.iter().find(|m| m.observes_graph()) {
                    let spec = &scenarios[0];
                    let net = spec.network.build()?;
                    let model = rglight::gcnmodel::GcnModel::new(run.model.clone())?;
                    let policy =
                        rglight::harness::build_policy(*method, &model, &checkpoints, &run)?;
                    let pairing = spec.pairing_key();
                    let trips_seed = derive_seed(
                        run.root_seed,
                        &["trips", &pairing, &spec.seeds[0].to_string()],
                    );
                    let schedule =
                        rglight::simcore::generate_trips(&net, spec.period, spec.horizon, trips_seed)?;
                    let failure = rglight::obsgraph::FailureModel::new(
                        spec.missing_probability,
                        derive_seed(run.root_seed, &["fail", &pairing, &spec.seeds[0].to_string()]),
                    )?;
                    let options = RunOptions {
                        dump_graph_every: Some((every, run.out_dir.join("graphs"))),
                        collect_frames: true,
                    };
                    let (_, _, frames) = rglight::harness::run_scenario_seed(
                        &net,
                        &schedule,
                        &policy,
                        spec.horizon,
                        Some(&failure),
                        run.model.layers,
                        derive_seed(run.root_seed, &["act", &pairing, "dump"]),
                        &options,
                    )?;
                    write_step_stream_csv(&frames, &run.out_dir.join("steps.csv"))?;
                    println!("wrote graphs/ and steps.csv for {}", method.name());
                }
            }
        }

        Command::Matrix { config, scales, demands, methods, igrl, dgrl, seeds, horizon } => {
            let run = config.load()?;
            let scales: Vec<u32> = parse_list(&scales, "scale")?;
            let demands: Vec<f64> = parse_list(&demands, "demand")?;
            let methods: Vec<Method> = parse_list(&methods, "method")?;
            let checkpoints = load_checkpoints(&run, &igrl, &dgrl)?;
            let horizon = horizon.unwrap_or(run.eval.horizon);
            let seed_list = eval_seeds(seeds.unwrap_or(run.eval.seeds));
            let (cells, records) = generalization_matrix(
                &run,
                &scales,
                &demands,
                &methods,
                &checkpoints,
                horizon,
                &seed_list,
            )?;
            std::fs::create_dir_all(&run.out_dir)?;
            write_matrix_csv(&cells, &run.out_dir.join("matrix.csv"))?;
            std::fs::write(
                run.out_dir.join("matrix_heatmap.svg"),
                matrix_heatmap_svg(&cells, |c| c.normalized, 10_000.0, "Normalized average delay"),
            )?;
            let rates = switch_rate_report(&records);
            write_switch_rate_csv(&rates, &run.out_dir.join("switch_rate.csv"))?;
            write_summary_csv(
                &records,
                &run.out_dir.join("matrix_summary.csv"),
                run.eval.paper_scale,
            )?;
            println!(
                "wrote matrix.csv, matrix_heatmap.svg, switch_rate.csv, matrix_summary.csv to {}",
                run.out_dir.display()
            );
        }

        Command::Demo { config } => {
            let mut run = config.load()?;
            run.workers = 1;
            let scenario = ScenarioSpec::new(
                NetworkSource::Grid { rows: 2, cols: 2, lanes: 1 },
                2.0,
                0.0,
                300,
                vec![0, 1],
            )?;
            let methods = [Method::Fixed, Method::Greedy];
            let records = evaluate(&run, &[scenario], &methods, &Checkpoints::default())?;
            println!("{:<8} {:>12} {:>12} {:>14}", "method", "delay", "queue", "travel time");
            for r in &records {
                println!(
                    "{:<8} {:>12.1} {:>12.1} {:>14.1}",
                    r.method.name(),
                    r.mean_delay_sum(),
                    r.mean_queue_sum(),
                    r.mean_travel_time_sum()
                );
            }
            std::fs::create_dir_all(&run.out_dir)?;
            write_summary_csv(&records, &run.out_dir.join("demo_summary.csv"), false)?;
            println!("wrote {}", run.out_dir.join("demo_summary.csv").display());
        }
    }
    Ok(())
}
