//! End-to-end experiment harness: data, pretraining, evaluator training,
//! prompt-stack training, scenario evaluation, ablation, and rate sweeps.
//!
//! Every stage derives its RNG from (config seed, stage tag) and logs it, so
//! any stage can be rerun from checkpoints and reproduce the original run
//! byte for byte.

use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use crate::backbone::{clamp_prediction, predict_batch, pretrain, BackboneParams};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::{generate_synthetic, load_features, save_features, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{metrics, emit, emit_json, EvalReport, MetricValues};
use crate::missing::{
    apply, substitute, MissingPlan, ModalityMeans, Policy, Scenario,
};
use crate::mme::{train_evaluator, EvaluatorParams};
use crate::nn::checksum;
use crate::promma::{train_promma, AdaptTrainSettings, BatchStats, ModuleFlags, PrommaModel};
use crate::rng::seeded;

pub const BACKBONE_CKPT: &str = "backbone.ckpt";
pub const BACKBONE_MD_CKPT: &str = "backbone_md.ckpt";
pub const EVALUATOR_CKPT: &str = "evaluator.ckpt";
pub const PROMMA_CKPT: &str = "promma.ckpt";

/// Modality-dropout probability used when training the MD baseline backbone.
pub const MD_DROPOUT: f64 = 0.3;

fn stage_seed(cfg: &ExperimentConfig, tag: &str) -> u64 {
    let mut rng = seeded(cfg.seed, tag);
    rand::Rng::gen(&mut rng)
}

fn log_stage(stage: &str, seed: u64) {
    info!("stage {stage}: derived rng seed {seed:#018x}");
}

/// Loads (or generates) the configured dataset.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match (&cfg.data.features_dir, &cfg.data.synthetic) {
        (Some(dir), None) => load_features(dir)?,
        (None, Some(spec)) => {
            let seed = stage_seed(cfg, "data");
            log_stage("data", seed);
            generate_synthetic(spec, seed)
        }
        _ => return Err(Error::Config("exactly one data source must be set".into())),
    };
    Ok(ds)
}

/// Generates the synthetic dataset and writes the feature container.
pub fn run_gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    let ds = load_dataset(cfg).map_err(|e| e.in_stage("gen-data"))?;
    let dir = out_dir.join("dataset");
    save_features(&ds, &dir).map_err(|e| e.in_stage("gen-data"))?;
    info!("stage gen-data: wrote {} samples to {}", ds.len(), dir.display());
    Ok(dir)
}

/// Pretrains the clean backbone plus the modality-dropout baseline backbone
/// and checkpoints both.
pub fn run_pretrain(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let stage = "pretrain";
    let ds = load_dataset(cfg).map_err(|e| e.in_stage(stage))?;
    let (train, _) = ds.split(cfg.data.test_fraction);
    let bcfg = cfg.backbone.to_config(train.dims);
    let opts = cfg.pretrain.to_settings();
    let seed = stage_seed(cfg, "pretrain");
    log_stage(stage, seed);

    let meta = serde_json::to_string(&bcfg).expect("config serializes");
    let (clean, losses) =
        pretrain(&bcfg, &train, &opts, seed, None).map_err(|e| e.in_stage(stage))?;
    info!("stage pretrain: clean backbone losses {losses:?}");
    checkpoint::save(&out_dir.join(BACKBONE_CKPT), "backbone", &meta, &clean)
        .map_err(|e| e.in_stage(stage))?;

    let seed_md = stage_seed(cfg, "pretrain.md");
    let (md, md_losses) =
        pretrain(&bcfg, &train, &opts, seed_md, Some(MD_DROPOUT)).map_err(|e| e.in_stage(stage))?;
    info!("stage pretrain: dropout backbone losses {md_losses:?}");
    checkpoint::save(&out_dir.join(BACKBONE_MD_CKPT), "backbone-md", &meta, &md)
        .map_err(|e| e.in_stage(stage))?;
    Ok(())
}

fn load_backbone(cfg: &ExperimentConfig, out_dir: &Path, name: &str, kind: &str) -> Result<BackboneParams> {
    let ds_dims = load_dataset(cfg)?.dims;
    let bcfg = cfg.backbone.to_config(ds_dims);
    let ckpt = checkpoint::load(&out_dir.join(name))?;
    if ckpt.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{name}: expected kind '{kind}', found '{}'",
            ckpt.kind
        )));
    }
    let mut params = BackboneParams::init(&bcfg, 0, "restore")?;
    checkpoint::restore(&mut params, &ckpt)?;
    params.freeze();
    Ok(params)
}

/// Trains the evaluator MLP against the frozen clean backbone.
pub fn run_train_mme(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let stage = "train-mme";
    let ds = load_dataset(cfg).map_err(|e| e.in_stage(stage))?;
    let (train, _) = ds.split(cfg.data.test_fraction);
    let backbone =
        load_backbone(cfg, out_dir, BACKBONE_CKPT, "backbone").map_err(|e| e.in_stage(stage))?;
    let seed = stage_seed(cfg, "mme");
    log_stage(stage, seed);
    let (params, losses) = train_evaluator(
        &backbone,
        &train,
        &Scenario::all_six(),
        &cfg.mme.evaluator_config(),
        &cfg.mme.train_settings(),
        seed,
    )
    .map_err(|e| e.in_stage(stage))?;
    info!("stage train-mme: losses first {:.4} last {:.4}", losses[0], losses[losses.len() - 1]);
    let meta = serde_json::to_string(&cfg.mme).expect("config serializes");
    checkpoint::save(&out_dir.join(EVALUATOR_CKPT), "evaluator", &meta, &params)
        .map_err(|e| e.in_stage(stage))?;
    Ok(())
}

fn load_evaluator(cfg: &ExperimentConfig, out_dir: &Path) -> Result<EvaluatorParams> {
    let ckpt = checkpoint::load(&out_dir.join(EVALUATOR_CKPT))?;
    if ckpt.kind != "evaluator" {
        return Err(Error::Checkpoint(format!("expected evaluator checkpoint, found '{}'", ckpt.kind)));
    }
    let dims = load_dataset(cfg)?.dims;
    let input_dim = dims.dim.iter().sum::<usize>() + 3;
    let mut params = EvaluatorParams::init(&cfg.mme.evaluator_config(), input_dim, 0)?;
    checkpoint::restore(&mut params, &ckpt)?;
    params.freeze();
    Ok(params)
}

/// Builds a model shell (frozen backbone + evaluator + freshly initialized
/// prompt stack) with the given flags.
pub fn build_model(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    flags: ModuleFlags,
) -> Result<PrommaModel> {
    let backbone = load_backbone(cfg, out_dir, BACKBONE_CKPT, "backbone")?;
    let evaluator = load_evaluator(cfg, out_dir)?;
    let prompt_cfg = cfg.prompts.to_config(cfg.backbone.d_model);
    PrommaModel::init(
        backbone,
        evaluator,
        cfg.mme.evaluator_config(),
        prompt_cfg,
        cfg.dpw.tau,
        flags,
        stage_seed(cfg, "promma.init"),
    )
}

/// Trains the prompt stack and checkpoints it. Asserts the backbone and
/// evaluator stayed frozen (checksum before/after).
pub fn run_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let stage = "train";
    let model = train_model(cfg, out_dir, ModuleFlags::full()).map_err(|e| e.in_stage(stage))?;
    let meta = serde_json::to_string(&cfg.prompts).expect("config serializes");
    checkpoint::save(&out_dir.join(PROMMA_CKPT), "promma", &meta, &model)
        .map_err(|e| e.in_stage(stage))?;
    Ok(())
}

/// Trains a model with arbitrary module flags (used by `train` and by the
/// ablation harness).
pub fn train_model(cfg: &ExperimentConfig, out_dir: &Path, flags: ModuleFlags) -> Result<PrommaModel> {
    let ds = load_dataset(cfg)?;
    let (train, _) = ds.split(cfg.data.test_fraction);
    let mut model = build_model(cfg, out_dir, flags)?;
    if !flags.mme_mipd {
        return Ok(model);
    }
    let backbone_sum = checksum(&model.backbone);
    let evaluator_sum = checksum(&model.evaluator);
    let opts = AdaptTrainSettings {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        momentum: cfg.train.momentum,
        scenarios: cfg.train_scenarios(),
        rate: cfg.train.rate,
    };
    let seed = stage_seed(cfg, "promma.train");
    log_stage("train", seed);
    let losses = train_promma(&mut model, &train, &opts, seed)?;
    if !losses.is_empty() {
        info!("stage train: losses first {:.4} last {:.4}", losses[0], losses[losses.len() - 1]);
    }
    assert_eq!(checksum(&model.backbone), backbone_sum, "backbone mutated during adaptation");
    assert_eq!(checksum(&model.evaluator), evaluator_sum, "evaluator mutated during adaptation");
    Ok(model)
}

fn load_model(cfg: &ExperimentConfig, out_dir: &Path, flags: ModuleFlags) -> Result<PrommaModel> {
    let mut model = build_model(cfg, out_dir, flags)?;
    let ckpt = checkpoint::load(&out_dir.join(PROMMA_CKPT))?;
    if ckpt.kind != "promma" {
        return Err(Error::Checkpoint(format!("expected promma checkpoint, found '{}'", ckpt.kind)));
    }
    checkpoint::restore(&mut model, &ckpt)?;
    Ok(model)
}

/// One evaluation task: a method evaluated under one scenario at one rate.
struct EvalTask {
    method: String,
    scenario: Scenario,
    rate: f64,
}

/// Evaluates a method on the (already masked) test bundles.
fn eval_method(
    method: &str,
    masked: &[crate::missing::ModalBundle],
    labels: &[f64],
    model: Option<&PrommaModel>,
    clean_backbone: &BackboneParams,
    md_backbone: &BackboneParams,
    means: &ModalityMeans,
    label_range: f64,
    batch_size: usize,
) -> Result<(MetricValues, BatchStats)> {
    let (raw, stats) = match method {
        "promma" => {
            let model = model.ok_or_else(|| {
                Error::Contract("promma evaluation requested without a trained model".into())
            })?;
            model.predict(masked, batch_size)?
        }
        other => {
            let policy: Policy = other.parse()?;
            let backbone =
                if policy == Policy::ModalityDropout { md_backbone } else { clean_backbone };
            let substituted: Result<Vec<_>> =
                masked.iter().map(|b| substitute(b, policy, Some(means))).collect();
            (predict_batch(backbone, &substituted?), BatchStats::default())
        }
    };
    let clamped: Vec<f64> = raw.into_iter().map(|p| clamp_prediction(p, label_range)).collect();
    Ok((metrics(&clamped, labels)?, stats))
}

fn display_method(method: &str) -> &'static str {
    match method {
        "promma" => "ProMMA",
        "lb" | "lower-bound" => "LB",
        "ms" | "mean-substitution" => "MS",
        "md" | "modality-dropout" => "MD",
        "zero" | "zero-fill" => "ZeroFill",
        _ => "Unknown",
    }
}

fn protocol_meta(cfg: &ExperimentConfig, rate: f64) -> Vec<(String, String)> {
    vec![
        ("dataset".into(), cfg.dataset_name.clone()),
        ("seed".into(), cfg.seed.to_string()),
        ("epsilon".into(), format!("{}", cfg.mme.epsilon)),
        ("tau".into(), format!("{}", cfg.dpw.tau)),
        ("gate_threshold".into(), format!("{}", cfg.mme.gate_threshold)),
        (
            "prompt_len".into(),
            format!("{}/{}/{}", cfg.prompts.prompt_len[0], cfg.prompts.prompt_len[1], cfg.prompts.prompt_len[2]),
        ),
        ("rate".into(), format!("{rate}")),
    ]
}

/// Core evaluation loop shared by `eval`, `ablate`, and `sweep`. Masks are
/// derived from (seed, scenario) only, so they are identical across methods
/// and nested across rates.
fn evaluate_tasks(
    cfg: &ExperimentConfig,
    tasks: &[EvalTask],
    test: &Dataset,
    means: &ModalityMeans,
    model: Option<&PrommaModel>,
    clean_backbone: &BackboneParams,
    md_backbone: &BackboneParams,
) -> Result<Vec<(String, String, f64, MetricValues, BatchStats)>> {
    let labels: Vec<f64> = test.bundles.iter().map(|b| b.label).collect();
    tasks
        .par_iter()
        .map(|task| {
            let plan_seed = stage_seed(cfg, &format!("eval.mask.{}", task.scenario));
            let plan = MissingPlan::new(task.scenario.clone(), task.rate, plan_seed)?;
            let masked = apply(&test.bundles, &plan)?;
            let (values, stats) = eval_method(
                &task.method,
                &masked,
                &labels,
                model,
                clean_backbone,
                md_backbone,
                means,
                cfg.mme.label_range,
                cfg.eval.batch_size,
            )?;
            Ok((
                display_method(&task.method).to_string(),
                task.scenario.to_string(),
                task.rate,
                values,
                stats,
            ))
        })
        .collect()
}

/// Full scenario-grid evaluation at each configured rate; emits one report
/// (CSV + JSON mirror) per rate and returns the report of the first rate.
pub fn run_eval(cfg: &ExperimentConfig, out_dir: &Path) -> Result<EvalReport> {
    let stage = "eval";
    let inner = || -> Result<EvalReport> {
        let ds = load_dataset(cfg)?;
        let (train, test) = ds.split(cfg.data.test_fraction);
        if test.is_empty() {
            return Err(Error::Contract("evaluation split is empty".into()));
        }
        let means = ModalityMeans::compute(&train.bundles)?;
        let clean = load_backbone(cfg, out_dir, BACKBONE_CKPT, "backbone")?;
        let md = load_backbone(cfg, out_dir, BACKBONE_MD_CKPT, "backbone-md")?;
        let model = if cfg.eval.methods.iter().any(|m| m == "promma") {
            Some(load_model(cfg, out_dir, ModuleFlags::full())?)
        } else {
            None
        };

        let mut first_report = None;
        for &rate in &cfg.eval.rates {
            let tasks: Vec<EvalTask> = cfg
                .eval
                .methods
                .iter()
                .flat_map(|m| {
                    cfg.eval_scenarios().into_iter().map(move |s| EvalTask {
                        method: m.clone(),
                        scenario: s,
                        rate,
                    })
                })
                .collect();
            let rows =
                evaluate_tasks(cfg, &tasks, &test, &means, model.as_ref(), &clean, &md)?;
            let mut report = EvalReport { meta: protocol_meta(cfg, rate), rows: Vec::new() };
            let mut gen_total = 0usize;
            let mut skip_total = 0usize;
            for (method, scenario, _, values, stats) in &rows {
                report.push(&cfg.dataset_name, method, scenario, *values);
                gen_total += stats.generated;
                skip_total += stats.skipped;
            }
            report.append_method_averages();
            report
                .meta
                .push(("gate_generated".into(), gen_total.to_string()));
            report.meta.push(("gate_skipped".into(), skip_total.to_string()));
            let name = if cfg.eval.rates.len() == 1 {
                "report.csv".to_string()
            } else {
                format!("report_rate{rate}.csv")
            };
            emit(&report, &out_dir.join(&name))?;
            emit_json(&report, &out_dir.join(name.replace(".csv", ".json")))?;
            info!("stage eval: wrote {name} ({} rows)", report.rows.len());
            if first_report.is_none() {
                first_report = Some(report);
            }
        }
        Ok(first_report.expect("at least one rate"))
    };
    inner().map_err(|e| e.in_stage(stage))
}

/// All stages in sequence.
pub fn run_pipeline(cfg: &ExperimentConfig, out_dir: &Path) -> Result<EvalReport> {
    std::fs::create_dir_all(out_dir)?;
    run_pretrain(cfg, out_dir)?;
    run_train_mme(cfg, out_dir)?;
    run_train(cfg, out_dir)?;
    run_eval(cfg, out_dir)
}

/// Ablation rows in integration order: bare backbone, +MME&MiPD, +DPW,
/// +MPDC (full).
pub fn ablation_rows() -> Vec<(&'static str, ModuleFlags)> {
    vec![
        ("none", ModuleFlags::none()),
        ("mme_mipd", ModuleFlags { mme_mipd: true, dpw: false, mpdc: false, residual: false }),
        ("mme_mipd_dpw", ModuleFlags { mme_mipd: true, dpw: true, mpdc: false, residual: false }),
        ("full", ModuleFlags::full()),
    ]
}

/// Trains and evaluates the four ablation configurations at the first
/// configured rate; one row per (config, scenario) plus averages.
pub fn run_ablate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<EvalReport> {
    let stage = "ablate";
    let inner = || -> Result<EvalReport> {
        let ds = load_dataset(cfg)?;
        let (train, test) = ds.split(cfg.data.test_fraction);
        let means = ModalityMeans::compute(&train.bundles)?;
        let clean = load_backbone(cfg, out_dir, BACKBONE_CKPT, "backbone")?;
        let md = load_backbone(cfg, out_dir, BACKBONE_MD_CKPT, "backbone-md")?;
        let rate = cfg.eval.rates.first().copied().unwrap_or(0.3);

        let mut report = EvalReport { meta: protocol_meta(cfg, rate), rows: Vec::new() };
        for (label, flags) in ablation_rows() {
            let model = train_model(cfg, out_dir, flags)?;
            let tasks: Vec<EvalTask> = cfg
                .eval_scenarios()
                .into_iter()
                .map(|s| EvalTask { method: "promma".into(), scenario: s, rate })
                .collect();
            let rows = evaluate_tasks(cfg, &tasks, &test, &means, Some(&model), &clean, &md)?;
            for (_, scenario, _, values, _) in rows {
                report.push(&cfg.dataset_name, label, &scenario, values);
            }
        }
        report.append_method_averages();
        emit(&report, &out_dir.join("ablation.csv"))?;
        emit_json(&report, &out_dir.join("ablation.json"))?;
        Ok(report)
    };
    inner().map_err(|e| e.in_stage(stage))
}

/// Default sweep grid 0.1..=0.9.
pub fn sweep_rates() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Evaluates the trained model and baselines across the rate grid; emits
/// `sweep.csv` with a rate column.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<(String, f64, MetricValues)>> {
    let stage = "sweep";
    let inner = || -> Result<Vec<(String, f64, MetricValues)>> {
        let ds = load_dataset(cfg)?;
        let (train, test) = ds.split(cfg.data.test_fraction);
        let means = ModalityMeans::compute(&train.bundles)?;
        let clean = load_backbone(cfg, out_dir, BACKBONE_CKPT, "backbone")?;
        let md = load_backbone(cfg, out_dir, BACKBONE_MD_CKPT, "backbone-md")?;
        let model = load_model(cfg, out_dir, ModuleFlags::full())?;

        let tasks: Vec<EvalTask> = sweep_rates()
            .into_iter()
            .flat_map(|rate| {
                cfg.eval.methods.iter().flat_map(move |m| {
                    cfg.eval_scenarios()
                        .into_iter()
                        .map(move |s| EvalTask { method: m.clone(), scenario: s, rate })
                })
            })
            .collect();
        let rows = evaluate_tasks(cfg, &tasks, &test, &means, Some(&model), &clean, &md)?;

        // Per (method, rate): scenario rows plus the scenario average.
        let mut csv = String::from("dataset,method,rate,scenario,acc,f1,mae,corr\n");
        let mut averages = Vec::new();
        for &rate in &sweep_rates() {
            for method in &cfg.eval.methods {
                let name = display_method(method);
                let group: Vec<&(String, String, f64, MetricValues, BatchStats)> = rows
                    .iter()
                    .filter(|(m, _, r, _, _)| m == name && *r == rate)
                    .collect();
                for (m, scenario, r, v, _) in &group {
                    csv.push_str(&format!(
                        "{},{m},{r},\"{scenario}\",{:.4},{:.4},{:.4},{}\n",
                        cfg.dataset_name,
                        v.acc,
                        v.f1,
                        v.mae,
                        v.corr.map_or("NA".into(), |c| format!("{c:.4}")),
                    ));
                }
                let n = group.len() as f64;
                let avg = MetricValues {
                    acc: group.iter().map(|(_, _, _, v, _)| v.acc).sum::<f64>() / n,
                    f1: group.iter().map(|(_, _, _, v, _)| v.f1).sum::<f64>() / n,
                    mae: group.iter().map(|(_, _, _, v, _)| v.mae).sum::<f64>() / n,
                    corr: if group.iter().all(|(_, _, _, v, _)| v.corr.is_some()) {
                        Some(group.iter().map(|(_, _, _, v, _)| v.corr.unwrap()).sum::<f64>() / n)
                    } else {
                        None
                    },
                };
                csv.push_str(&format!(
                    "{},{name},{rate},avg,{:.4},{:.4},{:.4},{}\n",
                    cfg.dataset_name,
                    avg.acc,
                    avg.f1,
                    avg.mae,
                    avg.corr.map_or("NA".into(), |c| format!("{c:.4}")),
                ));
                averages.push((name.to_string(), rate, avg));
            }
        }
        std::fs::write(out_dir.join("sweep.csv"), csv)?;
        Ok(averages)
    };
    inner().map_err(|e| e.in_stage(stage))
}
