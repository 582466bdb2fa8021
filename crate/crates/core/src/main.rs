use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use toposignal::artifacts::{line_chart_svg, write_metrics_csv, Manifest, MANIFEST_FILE};
use toposignal::autodiff::{checkpoint, Tape};
use toposignal::config::{load_config, load_config_over, RunConfig};
use toposignal::error::{Error, Result};
use toposignal::graph::{augment_with_mf, build_subgraph, global_mf_of};
use toposignal::network::RoadNetwork;
use toposignal::sim::{fixed_time_actions, run_baseline, Baseline, EpisodeMetrics, Simulator};
use toposignal::topo::{persistence, Creator};
use toposignal::train::{evaluate, split_seed, Model, Trainer, STREAM_EVAL};
use toposignal::{bench, diagnostics};

#[derive(Parser)]
#[command(name = "toposignal", version, about = "Topology-aware graph learning for traffic signal control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override, repeatable (e.g. `ppo.lr=1e-3`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the shared controller with MAPPO.
    Train {
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, visible_alias = "iterations", default_value_t = 200)]
        iters: usize,
        /// Parallel environments (overrides `ppo.envs`).
        #[arg(long)]
        envs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write SVG curves of the metrics.
        #[arg(long)]
        plots: bool,
    },
    /// Evaluate a controller on fresh arrivals.
    Eval {
        #[arg(long)]
        scenario: PathBuf,
        /// Parameters of the learned controller; the config is read from the
        /// manifest next to it unless `--config` is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        episodes: u64,
        #[arg(long, value_enum, default_value_t = Controller::Learned)]
        controller: Controller,
        /// Control interval in seconds (overrides `sim.control_interval`).
        #[arg(long)]
        interval: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Separation experiment on the PD-equal, WL-distinguishable pair.
    BenchExpressiveness {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Constant vertex feature value.
        #[arg(long, default_value_t = 0.5)]
        value: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable block.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Persistence diagrams of one agent's sub-graph at time `t`, as CSV.
    Pd {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        agent: usize,
        /// Seconds of fixed-time traffic to simulate first.
        #[arg(long, default_value_t = 0)]
        t: u32,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for a manifest; the CSV always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-agent observation embeddings of one greedy episode, as CSV.
    DumpEmbeddings {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Controller {
    Learned,
    Fixed,
    Random,
}

impl Controller {
    fn name(self) -> &'static str {
        match self {
            Controller::Learned => "learned",
            Controller::Fixed => "fixed",
            Controller::Random => "random",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Config for commands that may sit next to a training run: explicit file,
/// else the manifest beside the checkpoint, else defaults.
fn config_near(cfg: &ConfigArgs, checkpoint: Option<&Path>) -> Result<RunConfig> {
    if cfg.config.is_none() {
        if let Some(path) = checkpoint.and_then(|c| c.parent()).map(|d| d.join(MANIFEST_FILE)) {
            if path.exists() {
                return load_config_over(Manifest::read(&path)?.config, None, &cfg.overrides);
            }
        }
    }
    load_config(cfg.config.as_deref(), &cfg.overrides)
}

fn load_model(cfg: &RunConfig, seed: u64, checkpoint: Option<&Path>) -> Result<(toposignal::autodiff::ParameterStore, Model)> {
    let (mut store, model) = Model::build(cfg, seed)?;
    if let Some(c) = checkpoint {
        checkpoint::load_into(&mut store, c)?;
    }
    Ok((store, model))
}

fn load_net(path: &Path) -> Result<Arc<RoadNetwork>> {
    Ok(Arc::new(RoadNetwork::load(path)?))
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train {
            scenario,
            cfg,
            seed,
            iters,
            envs,
            out,
            plots,
        } => {
            let mut overrides = cfg.overrides.clone();
            if let Some(e) = envs {
                overrides.push(format!("ppo.envs={e}"));
            }
            let config = load_config(cfg.config.as_deref(), &overrides)?;
            let net = load_net(&scenario)?;
            std::fs::create_dir_all(&out)?;
            let mut manifest = Manifest::new("train", seed, Some(&scenario), &config);
            manifest.outputs = vec!["metrics.csv".into(), "checkpoint.bin".into()];
            manifest.arg("iters", iters);
            if plots {
                manifest.outputs.extend(PLOTS.iter().map(|(f, _)| f.to_string()));
            }
            manifest.write(&out)?;
            let mut trainer = Trainer::new(config, net, seed)?;
            let mut rows = Vec::with_capacity(iters);
            for _ in 0..iters {
                let m = trainer.step()?;
                eprintln!(
                    "iter {:>4}  reward {:>9.4}  delay {:>7.2} s  tgn_mse {:.4}",
                    m.iteration, m.mean_reward, m.mean_delay_s, m.tgn_mse
                );
                rows.push(m);
                // Rewritten every iteration so an interrupted run keeps its history.
                write_metrics_csv(&out.join("metrics.csv"), &rows)?;
            }
            checkpoint::save(&trainer.store, &out.join("checkpoint.bin"))?;
            if plots {
                for (file, field) in PLOTS {
                    let ys: Vec<f64> = rows.iter().map(|r| metric(r, field)).collect();
                    std::fs::write(out.join(file), line_chart_svg(field, "iteration", &ys))?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            scenario,
            checkpoint,
            cfg,
            seed,
            episodes,
            controller,
            interval,
            out,
        } => {
            let mut config = config_near(&cfg, checkpoint.as_deref())?;
            if let Some(i) = interval {
                config.sim.control_interval = i;
            }
            config.validate()?;
            if controller == Controller::Learned && checkpoint.is_none() {
                return Err(Error::config("the learned controller needs --checkpoint"));
            }
            let net = load_net(&scenario)?;
            let model = match controller {
                Controller::Learned => Some(load_model(&config, seed, checkpoint.as_deref())?),
                _ => None,
            };
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["controller", "interval_s", "arrival_seed", "mean_travel_time_s", "mean_delay_s", "vehicles_completed", "teleports"])?;
            for k in 0..episodes {
                let arrival = split_seed(seed, STREAM_EVAL, k);
                let m: EpisodeMetrics = match (&model, controller) {
                    (Some((store, model)), _) => evaluate(model, store, net.clone(), &config.sim, arrival, |_, _, _| {})?,
                    (None, Controller::Fixed) => run_baseline(net.clone(), &config.sim, Baseline::FixedTime, arrival)?,
                    (None, _) => run_baseline(net.clone(), &config.sim, Baseline::Random, arrival)?,
                };
                w.write_record([
                    controller.name().to_string(),
                    config.sim.control_interval.to_string(),
                    arrival.to_string(),
                    format!("{:.6}", m.mean_travel_time()),
                    format!("{:.6}", m.mean_delay()),
                    m.completed.to_string(),
                    m.teleported.to_string(),
                ])?;
            }
            let text = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            std::io::stdout().write_all(&text)?;
            if let Some(dir) = out {
                let mut manifest = Manifest::new("eval", seed, Some(&scenario), &config);
                manifest.outputs = vec!["eval.csv".into()];
                manifest.arg("controller", controller.name());
                manifest.arg("episodes", episodes);
                if let Some(c) = &checkpoint {
                    manifest.arg("checkpoint", c.display());
                }
                manifest.write(&dir)?;
                std::fs::write(dir.join("eval.csv"), &text)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::BenchExpressiveness { seeds, cfg, value, out } => {
            let config = load_config(cfg.config.as_deref(), &cfg.overrides)?;
            let rows = bench::run_bench(&config.model_config(), seeds, value)?;
            let mut manifest = Manifest::new("bench-expressiveness", 0, None, &config);
            manifest.outputs = vec!["bench.csv".into()];
            manifest.arg("seeds", seeds);
            manifest.arg("value", value);
            manifest.write(&out)?;
            let mut w = csv::Writer::from_path(out.join("bench.csv"))?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            let separated = rows.iter().filter(|r| r.margin_full > 0.0).count();
            let ablated = rows.iter().filter(|r| r.margin_ablated > 0.0).count();
            println!("full model separates {separated}/{} initializations; pooled control {ablated}/{}", rows.len(), rows.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seeds, cfg, tolerance, out } => {
            let config = load_config(cfg.config.as_deref(), &cfg.overrides)?;
            let rows = diagnostics::gradient_suite(&config, seeds)?;
            let worst = diagnostics::worst_per_block(&rows);
            let mut ok = true;
            println!("{:<24} {:>14}  status", "block", "max_rel_err");
            for (block, err) in &worst {
                let pass = *err <= tolerance;
                ok &= pass;
                println!("{block:<24} {err:>14.3e}  {}", if pass { "ok" } else { "FAIL" });
            }
            if let Some(dir) = out {
                let mut manifest = Manifest::new("gradcheck", 0, None, &config);
                manifest.outputs = vec!["gradcheck.csv".into()];
                manifest.arg("seeds", seeds);
                manifest.write(&dir)?;
                let mut w = csv::Writer::from_path(dir.join("gradcheck.csv"))?;
                for r in &rows {
                    w.serialize(r)?;
                }
                w.flush()?;
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Pd {
            scenario,
            agent,
            t,
            checkpoint,
            cfg,
            seed,
            out,
        } => {
            let config = config_near(&cfg, checkpoint.as_deref())?;
            let net = load_net(&scenario)?;
            net.check_agent(agent)?;
            let (store, model) = load_model(&config, seed, checkpoint.as_deref())?;
            let mut sim = Simulator::new(net.clone(), config.sim.clone(), seed)?;
            while sim.time() < t && !sim.done() {
                let a = fixed_time_actions(&sim);
                sim.step(&a)?;
            }
            let g = build_subgraph(&net, agent, &sim)?;
            let aug = augment_with_mf(g, &global_mf_of(&sim)?)?;
            let (pairs, _) = aug.undirected();
            let mut tape = Tape::new(&store);
            let x = tape.constant(aug.features());
            let f = model.tgn.topo.filtration(&mut tape, x)?;
            let fv = tape.value(f).clone();
            let mut w = csv::Writer::from_writer(std::io::stdout());
            w.write_record(["filtration", "dimension", "birth", "death", "essential", "creator"])?;
            for u in 0..fv.cols() {
                let col: Vec<f64> = (0..fv.rows()).map(|j| fv.get(j, u)).collect();
                let p = persistence(&col, &pairs)?;
                for (dim, diagram) in [(0, p.diagram0(&col)), (1, p.diagram1(&col))] {
                    for pair in diagram {
                        let creator = match pair.creator {
                            Creator::Vertex(v) | Creator::Edge(v) => v,
                        };
                        w.write_record([
                            u.to_string(),
                            dim.to_string(),
                            format!("{:.12}", pair.birth),
                            format!("{:.12}", pair.death),
                            pair.essential.to_string(),
                            creator.to_string(),
                        ])?;
                    }
                }
            }
            w.flush()?;
            if let Some(dir) = out {
                let mut manifest = Manifest::new("pd", seed, Some(&scenario), &config);
                manifest.arg("agent", agent);
                manifest.arg("t", t);
                if let Some(c) = &checkpoint {
                    manifest.arg("checkpoint", c.display());
                }
                manifest.write(&dir)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::DumpEmbeddings {
            scenario,
            checkpoint,
            cfg,
            seed,
            out,
        } => {
            let config = config_near(&cfg, checkpoint.as_deref())?;
            let net = load_net(&scenario)?;
            let (store, model) = load_model(&config, seed, checkpoint.as_deref())?;
            let mut manifest = Manifest::new("dump-embeddings", seed, Some(&scenario), &config);
            manifest.outputs = vec!["embeddings.csv".into()];
            if let Some(c) = &checkpoint {
                manifest.arg("checkpoint", c.display());
            }
            manifest.write(&out)?;
            let mut w = csv::Writer::from_path(out.join("embeddings.csv"))?;
            let mut header = vec!["t".to_string(), "agent".into(), "action".into()];
            header.extend((0..config.model.d_o).map(|k| format!("o{k}")));
            w.write_record(&header)?;
            let mut failure = None;
            evaluate(&model, &store, net, &config.sim, split_seed(seed, STREAM_EVAL, 0), |t, i, d| {
                let mut rec = vec![t.to_string(), i.to_string(), d.action.to_string()];
                rec.extend(d.observation.iter().map(|v| format!("{v:.9}")));
                if let Err(e) = w.write_record(&rec) {
                    failure.get_or_insert(e);
                }
            })?;
            if let Some(e) = failure {
                return Err(e.into());
            }
            w.flush()?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

const PLOTS: [(&str, &str); 4] = [
    ("reward.svg", "mean_reward"),
    ("delay.svg", "mean_delay_s"),
    ("travel_time.svg", "mean_travel_time_s"),
    ("tgn_loss.svg", "tgn_mse"),
];

fn metric(r: &toposignal::train::IterationMetrics, field: &str) -> f64 {
    match field {
        "mean_reward" => r.mean_reward,
        "mean_delay_s" => r.mean_delay_s,
        "mean_travel_time_s" => r.mean_travel_time_s,
        _ => r.tgn_mse,
    }
}
