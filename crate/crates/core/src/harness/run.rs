use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate_policy, noisy_sets, shuffled_sets, PolicySampler};
use super::report::{compare_methods, ComparisonReport, MethodResult, RmEvalRow, RunSummary};
use super::{ExperimentConfig, ExperimentKind, TrainerKind};
use crate::data::{make_dataset, prompt_set};
use crate::diffusion::{write_jsonl, Denoiser, NoiseSchedule};
use crate::error::Result;
use crate::rewards::{
    evaluate_reward_model, write_metrics_csv, Dimension, FrameWiseScorer, RandomScorer, RewardModel,
    RewardStats, Scorer,
};
use crate::rng::{derive_seed, derived_rng, tag};
use crate::trainers::{
    build_offline_dataset, pretrain, train_offline_dpo, train_online_vpo, train_refl, EvalHook, EvalRecord,
    PretrainConfig, ReflConfig, TrainRunMetrics, VpoConfig,
};

/// One method of an experiment: a trainer with its fully resolved settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub label: String,
    pub trainer: TrainerKind,
    pub vpo: VpoConfig,
    pub refl: ReflConfig,
}

fn or_base<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

impl ExperimentConfig {
    /// Dimension the report compares methods on.
    pub fn target(&self) -> Dimension {
        match self.kind {
            ExperimentKind::Refl => self.refl.dimension,
            _ => self.vpo.dimension,
        }
    }

    /// Methods to run on every seed, in report order.
    pub fn plan(&self) -> Vec<RunSpec> {
        let single = |trainer: TrainerKind| RunSpec {
            label: trainer.to_string(),
            trainer,
            vpo: self.vpo.clone(),
            refl: self.refl.clone(),
        };
        let mut specs: Vec<RunSpec> = Vec::new();
        let mut push = |spec: RunSpec| {
            if !specs.iter().any(|s| s.label == spec.label) {
                specs.push(spec);
            }
        };
        let first = match self.kind {
            ExperimentKind::OnlineVpo => TrainerKind::OnlineVpo,
            ExperimentKind::OfflineDpo => TrainerKind::OfflineDpo,
            ExperimentKind::Refl => TrainerKind::Refl,
            ExperimentKind::Sweep => {
                for &trainer in &self.sweep.trainers {
                    for n in or_base(&self.sweep.candidates, self.vpo.candidates) {
                        for k in or_base(&self.sweep.k_interval, self.vpo.k_interval) {
                            for dim in or_base(&self.sweep.dimension, self.vpo.dimension) {
                                let label = match trainer {
                                    TrainerKind::OnlineVpo => format!("{trainer}-n{n}-k{k}-{dim}"),
                                    TrainerKind::OfflineDpo => format!("{trainer}-n{n}-{dim}"),
                                    TrainerKind::Refl => format!("{trainer}-{dim}"),
                                };
                                push(RunSpec {
                                    label,
                                    trainer,
                                    vpo: VpoConfig {
                                        candidates: n,
                                        k_interval: k,
                                        dimension: dim,
                                        ..self.vpo.clone()
                                    },
                                    refl: ReflConfig {
                                        dimension: dim,
                                        ..self.refl.clone()
                                    },
                                });
                            }
                        }
                    }
                }
                return specs;
            }
            ExperimentKind::Pretrain | ExperimentKind::RmEval => return specs,
        };
        push(single(first));
        for &t in &self.compare_with {
            push(single(t));
        }
        specs
    }
}

/// Shared, read-only state of one experiment.
struct Context<'a> {
    cfg: &'a ExperimentConfig,
    sched: NoiseSchedule,
    rm: RewardModel,
    prompts: Vec<usize>,
    eval_prompts: Vec<usize>,
}

impl Context<'_> {
    fn evaluate(&self, policy: &Denoiser, seed: u64) -> Result<RewardStats> {
        let sampler = PolicySampler {
            policy,
            sched: &self.sched,
            steps: self.cfg.vpo.sampler_steps,
        };
        evaluate_policy(
            &sampler,
            &self.rm,
            &self.eval_prompts,
            self.cfg.eval_samples,
            derive_seed(seed, tag::EVAL, 0),
        )
    }

    fn run_dir(&self, label: &str, seed: u64) -> Result<(std::path::PathBuf, String)> {
        let rel = format!("{label}/{seed}");
        let dir = self.cfg.out_dir.join(&rel);
        fs::create_dir_all(&dir)?;
        Ok((dir, rel))
    }
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(BufWriter<File>) -> Result<()>,
{
    f(BufWriter::new(File::create(path)?))
}

/// Initializes and pretrains the base policy of `seed`; returns it with the
/// per-epoch losses.
fn pretrain_base(ctx: &Context<'_>, seed: u64) -> Result<(Denoiser, Denoiser, Vec<f64>)> {
    let d = &ctx.cfg.domain;
    let specs = d.specs()?;
    let dataset = make_dataset(&specs, d.n_per_class, d.frames, d.dims, d.sigma_data, seed)?;
    let init = Denoiser::init(d.layout(), &mut derived_rng(seed, tag::INIT, 0))?;
    let mut base = init.clone();
    let pcfg = PretrainConfig {
        seed,
        ..ctx.cfg.pretrain.clone()
    };
    let losses = pretrain(&mut base, &dataset, &ctx.sched, &pcfg)?;
    Ok((init, base, losses))
}

fn run_pretrain(ctx: &Context<'_>, seed: u64) -> Result<RunSummary> {
    let label = ExperimentKind::Pretrain.as_str();
    let (init, base, losses) = pretrain_base(ctx, seed)?;
    let (dir, rel) = ctx.run_dir(label, seed)?;
    write_with(&dir.join("curve.csv"), |out| {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss"])?;
        for (epoch, loss) in losses.iter().enumerate() {
            w.write_record([(epoch + 1).to_string(), loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let metrics = TrainRunMetrics {
        evals: vec![
            EvalRecord {
                step: 0,
                stats: ctx.evaluate(&init, seed)?,
            },
            EvalRecord {
                step: losses.len(),
                stats: ctx.evaluate(&base, seed)?,
            },
        ],
        ..TrainRunMetrics::default()
    };
    write_with(&dir.join("eval.csv"), |out| metrics.write_eval_csv(out))?;
    base.net().save(dir.join("checkpoint.json"))?;
    let files = ["curve.csv", "eval.csv", "checkpoint.json"]
        .iter()
        .map(|f| format!("{rel}/{f}"))
        .collect();
    Ok(RunSummary::from_metrics(label, None, seed, &metrics, ctx.cfg.target(), files))
}

fn run_trainer(ctx: &Context<'_>, spec: &RunSpec, seed: u64, base: &Denoiser) -> Result<RunSummary> {
    let evaluate = |p: &Denoiser| ctx.evaluate(p, seed);
    let hook = EvalHook {
        interval: ctx.cfg.eval_interval,
        evaluate: &evaluate,
    };
    let vpo = VpoConfig {
        seed,
        ..spec.vpo.clone()
    };
    let mut policy = base.clone();
    let (dir, rel) = ctx.run_dir(&spec.label, seed)?;
    let mut files = vec!["curve.csv", "eval.csv", "checkpoint.json"];
    let metrics = match spec.trainer {
        TrainerKind::OnlineVpo => train_online_vpo(&mut policy, &ctx.rm, &ctx.prompts, &ctx.sched, &vpo, Some(&hook))?,
        TrainerKind::OfflineDpo => {
            let pairs = build_offline_dataset(base, &ctx.rm, &ctx.prompts, ctx.cfg.offline.pairs, &ctx.sched, &vpo)?;
            write_with(&dir.join("pairs.jsonl"), |out| write_jsonl(&pairs, out))?;
            files.push("pairs.jsonl");
            train_offline_dpo(&mut policy, &pairs, &ctx.sched, &vpo, Some(&hook))?
        }
        TrainerKind::Refl => {
            let refl = ReflConfig {
                seed,
                ..spec.refl.clone()
            };
            train_refl(&mut policy, &ctx.rm, &ctx.prompts, &ctx.sched, &refl, Some(&hook))?
        }
    };
    write_with(&dir.join("curve.csv"), |out| metrics.write_curve_csv(out))?;
    write_with(&dir.join("eval.csv"), |out| metrics.write_eval_csv(out))?;
    policy.net().save(dir.join("checkpoint.json"))?;
    let files = files.iter().map(|f| format!("{rel}/{f}")).collect();
    Ok(RunSummary::from_metrics(
        &spec.label,
        Some(spec.trainer),
        seed,
        &metrics,
        ctx.cfg.target(),
        files,
    ))
}

fn run_rm_eval(ctx: &Context<'_>, seed: u64) -> Result<(RunSummary, Vec<RmEvalRow>)> {
    let label = ExperimentKind::RmEval.as_str();
    let cfg = &ctx.cfg.rm_eval;
    let templates = ctx.rm.templates();
    let families = [
        (
            "noisy",
            noisy_sets(templates, cfg.sets, cfg.set_size, cfg.noise_min, cfg.noise_max, seed)?,
        ),
        (
            "shuffled",
            shuffled_sets(templates, cfg.sets, cfg.set_size, ctx.cfg.domain.sigma_data, seed)?,
        ),
    ];
    let mut scorers: Vec<Box<dyn Scorer>> = Dimension::ALL
        .iter()
        .map(|&d| Box::new(ctx.rm.with_dimension(d)) as Box<dyn Scorer>)
        .collect();
    scorers.push(Box::new(FrameWiseScorer::new(templates.to_vec())));
    scorers.push(Box::new(RandomScorer { seed }));

    let mut rows = Vec::new();
    for (family, (sets, truth)) in &families {
        for scorer in &scorers {
            rows.push(RmEvalRow {
                seed,
                family: family.to_string(),
                model: scorer.name(),
                metrics: evaluate_reward_model(scorer.as_ref(), sets, truth)?,
            });
        }
    }
    let (dir, rel) = ctx.run_dir(label, seed)?;
    let named: Vec<_> = rows
        .iter()
        .map(|r| (format!("{}:{}", r.family, r.model), r.metrics))
        .collect();
    write_with(&dir.join("metrics.csv"), |out| write_metrics_csv(&named, out))?;
    let mut summary = RunSummary::from_metrics(
        label,
        None,
        seed,
        &TrainRunMetrics::default(),
        ctx.cfg.target(),
        vec![format!("{rel}/metrics.csv")],
    );
    summary.final_stats = None;
    Ok((summary, rows))
}

/// Runs every method of `cfg` on every seed (in parallel), writes
/// `<out_dir>/<label>/<seed>/{curve,eval}.csv` plus a checkpoint per run,
/// `<out_dir>/config.json` and `<out_dir>/summary.json`, and returns the
/// report. A failing run is recorded in the report and does not stop the
/// others; only invalid configuration or unwritable output aborts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    let d = &cfg.domain;
    let specs = d.specs()?;
    let ctx = Context {
        cfg,
        sched: d.schedule()?,
        rm: RewardModel::from_specs(cfg.target(), &specs, d.frames, d.dims)?,
        prompts: prompt_set(d.classes, &d.holdout),
        eval_prompts: (0..d.classes).collect(),
    };

    let mut methods = Vec::new();
    let mut rm_eval = Vec::new();
    match cfg.kind {
        ExperimentKind::Pretrain => {
            let runs = cfg
                .seeds
                .par_iter()
                .map(|&seed| {
                    run_pretrain(&ctx, seed).unwrap_or_else(|e| {
                        RunSummary::failed(ExperimentKind::Pretrain.as_str(), None, seed, e.to_string())
                    })
                })
                .collect();
            methods.push(MethodResult {
                label: ExperimentKind::Pretrain.to_string(),
                runs,
            });
        }
        ExperimentKind::RmEval => {
            let label = ExperimentKind::RmEval.as_str();
            let results: Vec<_> = cfg
                .seeds
                .par_iter()
                .map(|&seed| {
                    run_rm_eval(&ctx, seed)
                        .unwrap_or_else(|e| (RunSummary::failed(label, None, seed, e.to_string()), Vec::new()))
                })
                .collect();
            let mut runs = Vec::new();
            for (run, rows) in results {
                runs.push(run);
                rm_eval.extend(rows);
            }
            methods.push(MethodResult {
                label: label.to_string(),
                runs,
            });
        }
        _ => {
            let plan = cfg.plan();
            let bases: Vec<std::result::Result<Denoiser, String>> = cfg
                .seeds
                .par_iter()
                .map(|&seed| {
                    pretrain_base(&ctx, seed)
                        .map(|(_, base, _)| base)
                        .map_err(|e| format!("pretraining failed: {e}"))
                })
                .collect();
            let jobs: Vec<(usize, usize)> = (0..plan.len())
                .flat_map(|m| (0..cfg.seeds.len()).map(move |s| (m, s)))
                .collect();
            let summaries: Vec<RunSummary> = jobs
                .par_iter()
                .map(|&(m, s)| {
                    let spec = &plan[m];
                    let seed = cfg.seeds[s];
                    let fail = |e: String| RunSummary::failed(&spec.label, Some(spec.trainer), seed, e);
                    match &bases[s] {
                        Ok(base) => run_trainer(&ctx, spec, seed, base).unwrap_or_else(|e| fail(e.to_string())),
                        Err(e) => fail(e.clone()),
                    }
                })
                .collect();
            let mut summaries = summaries.into_iter();
            for spec in &plan {
                methods.push(MethodResult {
                    label: spec.label.clone(),
                    runs: summaries.by_ref().take(cfg.seeds.len()).collect(),
                });
            }
        }
    }

    let comparisons = if methods.len() >= 2 {
        compare_methods(&methods, cfg.target())?
    } else {
        Vec::new()
    };
    let report = ComparisonReport {
        kind: cfg.kind,
        target: cfg.target(),
        seeds: cfg.seeds.clone(),
        methods,
        comparisons,
        rm_eval,
    };
    fs::write(cfg.out_dir.join("summary.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}
