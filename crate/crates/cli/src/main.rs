//! Batch experiment front end: parameter reporting, tree and majority
//! simulations, contraction traces, SBM generation, coupling diagnostics,
//! and end-to-end reconstruction, with CSV/JSON outputs that embed the
//! resolved configuration.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use blockbp::config::{DeltaSpec, ExperimentConfig};
use blockbp::error::Error;
use blockbp::majority::{simulate_majority, summarize_majority, MajoritySimConfig, Regime};
use blockbp::model::ModelParams;
use blockbp::report::{
    assignment_text, atomic_write, contraction_csv, json_summary, majority_csv, RunMeta,
};
use blockbp::tree::DEFAULT_NODE_BUDGET;
use blockbp::{bp, reconstruct as rec, sbm, tree};

#[derive(Parser)]
#[command(
    name = "blockbp",
    version,
    about = "Broadcast trees, belief propagation, and reconstruction on sparse block models"
)]
struct Cli {
    /// Cap worker parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Load `key = value` configuration; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the derived model parameters as JSON.
    Params {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Sample labeled trees and report per-level root-agreement statistics.
    TreeSim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        /// `regular` or `gw`.
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        node_budget: Option<usize>,
        #[arg(long)]
        csv_out: Option<PathBuf>,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Simple and iterated majority Monte Carlo with moment oracles.
    MajoritySim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        regime: Option<String>,
        /// `identity`, `uniform-diag:<c>`, or `file:<path>`.
        #[arg(long)]
        delta: Option<String>,
        #[arg(long)]
        csv_out: Option<PathBuf>,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Coupled exact/noisy posterior traces over tree depth.
    Contraction {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        delta: Option<String>,
        #[arg(long)]
        csv_out: Option<PathBuf>,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Sample a block-model graph to an edge list plus labels sidecar.
    SbmGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        balanced: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        labels_out: PathBuf,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Tree-likeness and Poisson diagnostics of neighborhood balls.
    CouplingCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        r: Option<usize>,
        #[arg(long)]
        centers: Option<usize>,
        #[arg(long)]
        balanced: bool,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Full reconstruction: spectral black box plus BP amplification.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_name = "R")]
        r: Option<usize>,
        #[arg(long)]
        subsample: Option<usize>,
        #[arg(long)]
        amortize: bool,
        #[arg(long)]
        balanced: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
}

/// Merge the optional config file with command-line overrides.
fn resolve_common(sub: &str, common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            ExperimentConfig::from_config_text(&text)?
        }
        None => ExperimentConfig::new(sub, 0, 0.0, 0.0, 0),
    };
    cfg.subcommand = sub.to_string();
    if let Some(q) = common.q {
        cfg.q = q;
    }
    if let Some(a) = common.a {
        cfg.a = a;
    }
    if let Some(b) = common.b {
        cfg.b = b;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_regime(s: Option<&str>) -> Result<Regime, Error> {
    match s.unwrap_or("gw") {
        "regular" => Ok(Regime::Regular),
        "gw" | "galton-watson" => Ok(Regime::GaltonWatson),
        other => Err(Error::Config {
            key: "regime".into(),
            msg: format!("expected `regular` or `gw`, got `{other}`"),
        }),
    }
}

fn emit(path: &Option<PathBuf>, content: &str, what: &str) -> Result<(), Error> {
    if let Some(p) = path {
        atomic_write(p, content.as_bytes())?;
        eprintln!("wrote {what} to {}", p.display());
    }
    Ok(())
}

fn require_n(cfg: &ExperimentConfig) -> Result<usize, Error> {
    cfg.n.ok_or(Error::Config {
        key: "n".into(),
        msg: "missing".into(),
    })
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config {
                key: "threads".into(),
                msg: e.to_string(),
            })?;
    }

    match &cli.command {
        Command::Params { common, json_out } => {
            let cfg = resolve_common("params", common)?;
            let params = ModelParams::new(cfg.q, cfg.a, cfg.b)?;
            let meta = RunMeta::new(&cfg);
            println!("{}", serde_json::to_string_pretty(&params).unwrap());
            emit(json_out, &json_summary(&meta, &params), "params")?;
        }

        Command::TreeSim {
            common,
            depth,
            trials,
            regime,
            node_budget,
            csv_out,
            json_out,
        } => {
            let mut cfg = resolve_common("tree-sim", common)?;
            cfg.depth = depth.or(cfg.depth);
            cfg.trials = trials.or(cfg.trials);
            cfg.regime = regime.clone().or(cfg.regime);
            cfg.node_budget = node_budget.or(cfg.node_budget);
            let params = ModelParams::new(cfg.q, cfg.a, cfg.b)?;
            let depth = cfg.depth.unwrap_or(4);
            let trials = cfg.trials.unwrap_or(1000);
            let regime = parse_regime(cfg.regime.as_deref())?;
            let budget = cfg.node_budget.unwrap_or(DEFAULT_NODE_BUDGET);

            let mut csv = String::from("trial_seed,level,size,match_root\n");
            let mut match_counts = vec![0u64; depth + 1];
            let mut sizes = vec![0u64; depth + 1];
            let mut extinct = 0usize;
            for t in 0..trials as u64 {
                let seed = blockbp::rng::derive_seed(cfg.seed, t);
                let skel = match regime {
                    Regime::Regular => {
                        tree::sample_regular_tree(params.d.round() as usize, depth, budget)?
                    }
                    Regime::GaltonWatson => tree::sample_gw_tree(params.d, depth, seed, budget)?,
                };
                let labeled = tree::broadcast_labels(skel, &params, 1, seed ^ 0x9e37)?;
                if labeled.depth() < depth {
                    extinct += 1;
                }
                for k in 0..=labeled.depth() {
                    let range = labeled.level(k)?;
                    let size = range.len() as u64;
                    let hits = range.filter(|&u| labeled.sigma(u) == 1).count() as u64;
                    sizes[k] += size;
                    match_counts[k] += hits;
                    csv.push_str(&format!("{seed},{k},{size},{hits}\n"));
                }
            }
            let per_level: Vec<_> = (0..=depth)
                .map(|k| {
                    let oracle = (1.0
                        + (params.q as f64 - 1.0) * params.lambda.powi(k as i32))
                        / params.q as f64;
                    json!({
                        "level": k,
                        "mean_size": sizes[k] as f64 / trials as f64,
                        "match_root_fraction": if sizes[k] > 0 { match_counts[k] as f64 / sizes[k] as f64 } else { 0.0 },
                        "broadcast_marginal_oracle": oracle,
                    })
                })
                .collect();
            let meta = RunMeta::new(&cfg);
            let summary = json!({
                "trials": trials,
                "extinct_before_depth": extinct,
                "levels": per_level,
            });
            println!(
                "tree-sim: {trials} trees, depth {depth}, regime {}",
                regime.as_str()
            );
            emit(csv_out, &csv, "tree-sim rows")?;
            emit(json_out, &json_summary(&meta, &summary), "tree-sim summary")?;
        }

        Command::MajoritySim {
            common,
            k,
            trials,
            regime,
            delta,
            csv_out,
            json_out,
        } => {
            let mut cfg = resolve_common("majority-sim", common)?;
            cfg.k = k.or(cfg.k);
            cfg.trials = trials.or(cfg.trials);
            cfg.regime = regime.clone().or(cfg.regime);
            cfg.delta = delta.clone().or(cfg.delta);
            let params = ModelParams::new(cfg.q, cfg.a, cfg.b)?;
            let regime = parse_regime(cfg.regime.as_deref())?;
            let k = cfg.k.unwrap_or(3);
            let trials = cfg.trials.unwrap_or(10_000);
            let noise = match &cfg.delta {
                Some(spec) => Some(DeltaSpec::parse(spec)?.resolve(params.q)?),
                None => None,
            };
            let sim_cfg = MajoritySimConfig::new(params, regime, k, noise, trials, cfg.seed);
            let rows = simulate_majority(&sim_cfg)?;
            let summary = summarize_majority(&sim_cfg, &rows);
            let csv = majority_csv(&rows, k, regime.as_str(), params.q);
            let meta = RunMeta::new(&cfg);
            println!(
                "majority-sim: success {:.4} (iterated {:.4}) over {trials} trials",
                summary.majority_rate, summary.iterated_rate
            );
            emit(csv_out, &csv, "majority rows")?;
            emit(json_out, &json_summary(&meta, &summary), "majority summary")?;
        }

        Command::Contraction {
            common,
            depth,
            trials,
            regime,
            delta,
            csv_out,
            json_out,
        } => {
            let mut cfg = resolve_common("contraction", common)?;
            cfg.depth = depth.or(cfg.depth);
            cfg.trials = trials.or(cfg.trials);
            cfg.regime = regime.clone().or(cfg.regime);
            cfg.delta = delta.clone().or(cfg.delta);
            let params = ModelParams::new(cfg.q, cfg.a, cfg.b)?;
            let regime = parse_regime(cfg.regime.as_deref())?;
            let m_max = cfg.depth.unwrap_or(6);
            let trials = cfg.trials.unwrap_or(2000);
            let spec = cfg.delta.clone().unwrap_or_else(|| "identity".into());
            let noise = DeltaSpec::parse(&spec)?.resolve(params.q)?;
            let trace = bp::estimate_limits(&params, &noise, m_max, trials, regime, cfg.seed)?;
            let meta = RunMeta::new(&cfg);
            if let Some(last) = trace.levels.last() {
                println!(
                    "contraction: depth {m_max}, E_m {:.5}, E~_m {:.5}, mean L1 {:.3e}",
                    last.e_m, last.etilde_m, last.mean_l1
                );
            }
            emit(csv_out, &contraction_csv(&trace), "contraction rows")?;
            emit(json_out, &json_summary(&meta, &trace), "contraction summary")?;
        }

        Command::SbmGen {
            common,
            n,
            balanced,
            out,
            labels_out,
            json_out,
        } => {
            let mut cfg = resolve_common("sbm-gen", common)?;
            cfg.n = n.or(cfg.n);
            cfg.balanced = *balanced || cfg.balanced;
            let params = ModelParams::new(cfg.q, cfg.a, cfg.b)?;
            let n = require_n(&cfg)?;
            let g = sbm::sample_sbm(n, &params, cfg.balanced, cfg.seed)?;
            let mut edges = Vec::new();
            sbm::write_graph(&g, &mut edges)?;
            let mut labels = Vec::new();
            sbm::write_labels(&g, &mut labels)?;
            atomic_write(out, &edges)?;
            atomic_write(labels_out, &labels)?;
            let meta = RunMeta::new(&cfg);
            let summary = json!({
                "n": n,
                "edges": g.edge_count(),
                "mean_degree": 2.0 * g.edge_count() as f64 / n as f64,
                "expected_degree": params.d,
            });
            println!("sbm-gen: {} vertices, {} edges", n, g.edge_count());
            emit(json_out, &json_summary(&meta, &summary), "graph summary")?;
        }

        Command::CouplingCheck {
            common,
            n,
            r,
            centers,
            balanced,
            json_out,
        } => {
            let mut cfg = resolve_common("coupling-check", common)?;
            cfg.n = n.or(cfg.n);
            cfg.r = r.or(cfg.r);
            cfg.centers = centers.or(cfg.centers);
            cfg.balanced = *balanced || cfg.balanced;
            let params = ModelParams::new(cfg.q, cfg.a, cfg.b)?;
            let n = require_n(&cfg)?;
            let radius = match cfg.r {
                Some(r) => r,
                None => sbm::coupling_radius(n, params.a, params.b)?.max(1),
            };
            let m = cfg.centers.unwrap_or(200);
            let g = sbm::sample_sbm(n, &params, cfg.balanced, cfg.seed)?;
            let centers: Vec<u32> = (0..m.min(n) as u32).collect();
            let report = sbm::coupling_diagnostic(&g, &centers, radius)?;
            let meta = RunMeta::new(&cfg);
            println!(
                "coupling-check: tree fraction {:.3}, TV(child, Pois({})) = {:.4}",
                report.tree_fraction, params.d, report.tv_child_total
            );
            emit(json_out, &json_summary(&meta, &report), "coupling report")?;
        }

        Command::Reconstruct {
            common,
            n,
            r,
            subsample,
            amortize,
            balanced,
            out,
            json_out,
        } => {
            let mut cfg = resolve_common("reconstruct", common)?;
            cfg.n = n.or(cfg.n);
            cfg.r = r.or(cfg.r);
            cfg.subsample = subsample.or(cfg.subsample);
            cfg.amortize = *amortize || cfg.amortize;
            cfg.balanced = *balanced || cfg.balanced;
            let params = ModelParams::new(cfg.q, cfg.a, cfg.b)?;
            let n = require_n(&cfg)?;
            let g = sbm::sample_sbm(n, &params, cfg.balanced, cfg.seed)?;
            let opts = rec::ReconstructOptions {
                r_override: cfg.r,
                subsample: cfg.subsample,
                amortize: cfg.amortize,
                seed: cfg.seed,
                ..Default::default()
            };
            let res = rec::reconstruct(&g, &params, &opts)?;
            let acc = rec::accuracy(&res.assign, g.sigma_slice(), params.q);
            let sub_acc = res
                .meta
                .subsample
                .as_ref()
                .map(|s| rec::accuracy_on(&res.assign, g.sigma_slice(), params.q, s));
            let meta = RunMeta::new(&cfg);
            let summary = json!({
                "accuracy": acc,
                "subsample_accuracy": sub_acc,
                "gamma_observed": res.meta.gamma_observed,
                "R": res.meta.r,
                "R_from_formula": res.meta.r_from_formula,
                "seeds": { "master": cfg.seed },
                "fallback_count": res.meta.fallback_count,
                "evaluated": res.meta.evaluated,
                "delta_hat": res.meta.delta_hat,
                "warnings": res.meta.warnings,
            });
            println!(
                "reconstruct: accuracy {:.4} (gamma {:.3}, {} fallbacks)",
                acc, res.meta.gamma_observed, res.meta.fallback_count
            );
            if let Some(p) = out {
                atomic_write(p, assignment_text(&res.assign).as_bytes())?;
                eprintln!("wrote assignment to {}", p.display());
            }
            emit(json_out, &json_summary(&meta, &summary), "reconstruction summary")?;
        }
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        // Validation: the request itself is unusable.
        Error::CommunityCount(_)
        | Error::EdgeRates { .. }
        | Error::NoiseShape { .. }
        | Error::NoiseNegativeEntry { .. }
        | Error::NoiseRowSum { .. }
        | Error::NoiseColumnSum { .. }
        | Error::NoiseDiagonal { .. }
        | Error::NoiseDiagParam { .. }
        | Error::NodeBudget { .. }
        | Error::Parse { .. }
        | Error::Config { .. }
        | Error::DeltaSpec(_)
        | Error::GraphTooSmall { .. }
        | Error::EdgeProbability { .. }
        | Error::CouplingRadiusUndefined { .. } => 1,
        // Everything else is a runtime failure.
        _ => 2,
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
