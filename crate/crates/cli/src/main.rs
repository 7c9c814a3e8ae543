//! `vpo-lab` command-line runner. Each subcommand runs one experiment kind;
//! flags override the optional TOML config file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vpo_lab::harness::{run_experiment, ComparisonReport, ExperimentConfig, ExperimentKind, TrainerKind};
use vpo_lab::rewards::Dimension;

#[derive(Parser)]
#[command(name = "vpo-lab", version, about = "Online preference optimization experiments on toy trajectory diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain base denoisers and evaluate them.
    Pretrain(Overrides),
    /// Online VPO with curriculum reference updates.
    #[command(name = "online-vpo", alias = "online_vpo")]
    OnlineVpo(Overrides),
    /// Offline DPO on pairs collected once from the base policy.
    #[command(name = "offline-dpo", alias = "offline_dpo")]
    OfflineDpo(Overrides),
    /// Reward feedback learning.
    Refl(Overrides),
    /// Rank constructed candidate sets with every reward model.
    #[command(name = "rm-eval", alias = "rm_eval")]
    RmEval(Overrides),
    /// Grid over trainers, candidate counts, curriculum intervals and dimensions.
    Sweep(Overrides),
    /// Print the default configuration as TOML.
    #[command(name = "print-config")]
    PrintConfig,
}

/// Flags shared by every experiment. List-valued flags take comma-separated
/// values; outside `sweep` the grid flags accept a single value.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML experiment config; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds to run, e.g. `--seed 1,2,3`.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optimization steps for every trainer.
    #[arg(long)]
    steps: Option<usize>,
    /// Candidates per prompt (N).
    #[arg(long, value_delimiter = ',')]
    n_candidates: Vec<usize>,
    /// Reference refresh interval (K).
    #[arg(long, value_delimiter = ',')]
    k_interval: Vec<usize>,
    /// DPO temperature.
    #[arg(long)]
    beta: Option<f64>,
    /// Reward dimension used for feedback.
    #[arg(long, value_delimiter = ',')]
    dimension: Vec<Dimension>,
    /// Trainers: the sweep axis for `sweep`, extra comparison methods otherwise.
    #[arg(long, value_delimiter = ',')]
    trainer: Vec<TrainerKind>,
    /// Learning rate of the alignment trainers.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_interval: Option<usize>,
    /// Held-out samples per prompt at each evaluation.
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Pretraining epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

fn single<T: Copy>(name: &str, values: &[T]) -> Result<Option<T>, String> {
    match values {
        [] => Ok(None),
        [v] => Ok(Some(*v)),
        _ => Err(format!("--{name} takes one value outside `sweep`")),
    }
}

fn build_config(kind: ExperimentKind, o: &Overrides) -> Result<ExperimentConfig, String> {
    let mut cfg = match &o.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| format!("{}: {e}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    cfg.kind = kind;
    if !o.seed.is_empty() {
        cfg.seeds = o.seed.clone();
    }
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    if let Some(steps) = o.steps {
        cfg.vpo.steps = steps;
        cfg.refl.steps = steps;
    }
    if let Some(beta) = o.beta {
        cfg.vpo.beta = beta;
    }
    if let Some(lr) = o.lr {
        cfg.vpo.lr = lr;
        cfg.refl.lr = lr;
    }
    if let Some(v) = o.eval_interval {
        cfg.eval_interval = v;
    }
    if let Some(v) = o.eval_samples {
        cfg.eval_samples = v;
    }
    if let Some(v) = o.epochs {
        cfg.pretrain.epochs = v;
    }
    if kind == ExperimentKind::Sweep {
        if !o.n_candidates.is_empty() {
            cfg.sweep.candidates = o.n_candidates.clone();
        }
        if !o.k_interval.is_empty() {
            cfg.sweep.k_interval = o.k_interval.clone();
        }
        if !o.dimension.is_empty() {
            cfg.sweep.dimension = o.dimension.clone();
        }
        if !o.trainer.is_empty() {
            cfg.sweep.trainers = o.trainer.clone();
        }
    } else {
        if let Some(n) = single("n-candidates", &o.n_candidates)? {
            cfg.vpo.candidates = n;
        }
        if let Some(k) = single("k-interval", &o.k_interval)? {
            cfg.vpo.k_interval = k;
        }
        if let Some(d) = single("dimension", &o.dimension)? {
            cfg.vpo.dimension = d;
            cfg.refl.dimension = d;
        }
        if !o.trainer.is_empty() {
            cfg.compare_with = o.trainer.clone();
        }
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn print_report(report: &ComparisonReport) {
    let target = report.target;
    for m in &report.methods {
        let done: Vec<f64> = m.runs.iter().filter_map(|r| r.final_value(target)).collect();
        let mean = done.iter().sum::<f64>() / done.len().max(1) as f64;
        println!(
            "{:<48} {}/{} runs ok   final {target} mean {:.6}",
            m.label,
            m.runs.iter().filter(|r| r.ok()).count(),
            m.runs.len(),
            mean
        );
        for r in m.runs.iter().filter(|r| !r.ok()) {
            println!("    seed {} failed: {}", r.seed, r.error.as_deref().unwrap_or_default());
        }
    }
    for c in &report.comparisons {
        println!(
            "{} vs {}: {} wins, {} losses, {} ties on {}",
            c.a, c.b, c.wins, c.losses, c.ties, c.dimension
        );
    }
    for row in &report.rm_eval {
        println!(
            "seed {} {:<9} {:<22} mrr {:.4} r@1 {:.4} r@2 {:.4} r@4 {:.4}",
            row.seed,
            row.family,
            row.model,
            row.metrics.mrr,
            row.metrics.recall_at_1,
            row.metrics.recall_at_2,
            row.metrics.recall_at_4
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, overrides) = match cli.command {
        Command::PrintConfig => {
            return match ExperimentConfig::default().to_toml_string() {
                Ok(text) => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            };
        }
        Command::Pretrain(o) => (ExperimentKind::Pretrain, o),
        Command::OnlineVpo(o) => (ExperimentKind::OnlineVpo, o),
        Command::OfflineDpo(o) => (ExperimentKind::OfflineDpo, o),
        Command::Refl(o) => (ExperimentKind::Refl, o),
        Command::RmEval(o) => (ExperimentKind::RmEval, o),
        Command::Sweep(o) => (ExperimentKind::Sweep, o),
    };
    let cfg = match build_config(kind, &overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run_experiment(&cfg) {
        Ok(report) => {
            print_report(&report);
            println!("summary: {}", cfg.out_dir.join("summary.json").display());
            if report.all_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_defaults() {
        let o = Overrides {
            seed: vec![3, 4],
            steps: Some(7),
            n_candidates: vec![6],
            dimension: vec![Dimension::Global],
            trainer: vec![TrainerKind::OfflineDpo],
            ..Overrides::default()
        };
        let cfg = build_config(ExperimentKind::OnlineVpo, &o).unwrap();
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!((cfg.vpo.steps, cfg.refl.steps), (7, 7));
        assert_eq!(cfg.vpo.candidates, 6);
        assert_eq!(cfg.refl.dimension, Dimension::Global);
        assert_eq!(cfg.compare_with, vec![TrainerKind::OfflineDpo]);
    }

    #[test]
    fn grid_flags_need_sweep() {
        let o = Overrides {
            n_candidates: vec![2, 4, 6, 8],
            ..Overrides::default()
        };
        assert!(build_config(ExperimentKind::OnlineVpo, &o).is_err());
        let cfg = build_config(ExperimentKind::Sweep, &o).unwrap();
        assert_eq!(cfg.sweep.candidates, vec![2, 4, 6, 8]);
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["vpo-lab", "sweep", "--n-candidates", "2,4", "--dimension", "global"]).unwrap();
        assert!(matches!(cli.command, Command::Sweep(_)));
    }
}
