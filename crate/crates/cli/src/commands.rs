use std::path::Path;

use anyhow::{Context, Result};
use flat_core::calibration::{importance_scores, run_calibration, ImportanceScores};
use flat_core::checkpoint::{
    load_batches, load_checkpoint, load_model, save_batches, save_checkpoint, save_compressed,
    Checkpoint, Dtype,
};
use flat_core::compress::{compress_model, param_summary, run_pipeline, ParamSummary, PipelineOptions};
use flat_core::exec::Exec;
use flat_core::iprs::{check_sparsity, make_plan, RankMode, RankPlan};
use flat_core::model::{scale_branches, synthetic_batches, Model, ModelConfig};
use flat_core::verify::{
    allocation_trials, end_to_end_report, identity_trials, AllocationSuite, IdentitySuite,
    ReconReport,
};
use flat_core::FlatError;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::source::{calibration_batches, check_distinct, read_json, usage, write_json};
use crate::{CompressArgs, ImportanceArgs, PlanArgs, RandomModelArgs, RunArgs, Suite, VerifyArgs};

const SCHEMA_VERSION: u32 = 1;
const EVAL_TOKENS: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
struct ScoresFile {
    schema_version: u32,
    n_layers: usize,
    d_head: usize,
    d_int: usize,
    cosine: Vec<f64>,
    t: Vec<f64>,
}

impl ScoresFile {
    fn new(config: &ModelConfig, scores: &ImportanceScores) -> Self {
        ScoresFile {
            schema_version: SCHEMA_VERSION,
            n_layers: config.n_layers,
            d_head: config.d_head,
            d_int: config.d_int,
            cosine: scores.cosine.clone(),
            t: scores.t.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
struct CompressReport {
    schema_version: u32,
    qk: bool,
    importance_on_compressed: bool,
    params: ParamSummary,
    recon: ReconReport,
}

fn exec_mode(run: &RunArgs) -> Result<Exec> {
    if run.deterministic {
        return Ok(Exec::Sequential);
    }
    #[cfg(feature = "parallel")]
    if run.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(run.threads)
            .build_global()
            .map_err(|e| usage(format!("--threads: {e}")))?;
    }
    Ok(Exec::Parallel)
}

fn dtype(f32: bool) -> Dtype {
    if f32 {
        Dtype::F32
    } else {
        Dtype::F64
    }
}

fn load_dense(path: &Path) -> Result<Model> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn eval_batch(eval: Option<&Path>, d_hid: usize, seed: u64) -> Result<DMatrix<f64>> {
    match eval {
        Some(dir) => load_batches(dir)
            .with_context(|| format!("loading evaluation data {}", dir.display()))?
            .into_iter()
            .next()
            .ok_or_else(|| FlatError::Calibration("evaluation container is empty".into()).into()),
        None => Ok(synthetic_batches(d_hid, seed.wrapping_add(1), 1, EVAL_TOKENS).remove(0)),
    }
}

pub fn compress(a: CompressArgs) -> Result<u8> {
    if a.plan.is_none() {
        check_sparsity(a.sparsity)?;
    }
    check_distinct(&a.model, &a.out)?;
    let exec = exec_mode(&a.run)?;
    let model = load_dense(&a.model)?;
    let config = model.config;
    let batches = calibration_batches(&a.calib, config.d_hid, a.run.seed)?;

    let (scores, plan, compressed, params) = match &a.plan {
        Some(path) => {
            let plan: RankPlan = read_json(path)?;
            plan.validate(&config)
                .with_context(|| format!("plan {} does not fit the model", path.display()))?;
            let capture = run_calibration(&model, &batches, exec)?;
            let scores = importance_scores(&capture)?;
            let compressed = compress_model(&model, &capture, &plan, a.qk, exec)?;
            let params = param_summary(&config, &compressed);
            (scores, plan, compressed, params)
        }
        None => {
            let opts = PipelineOptions {
                sparsity: a.sparsity,
                mode: a.mode.into(),
                qk: a.qk,
                importance_on_compressed: a.importance_on_compressed,
                exec,
            };
            let out = run_pipeline(&model, &batches, &opts)?;
            (out.scores, out.plan, out.compressed, out.params)
        }
    };

    let eval = eval_batch(a.eval.as_deref(), config.d_hid, a.run.seed)?;
    let recon = end_to_end_report(&model, &compressed, &eval, Some(&plan))?;
    save_compressed(&compressed, &a.out, dtype(a.f32))?;
    write_json(&a.out.join("scores.json"), &ScoresFile::new(&config, &scores))?;
    write_json(&a.out.join("plan.json"), &plan)?;
    let report = CompressReport {
        schema_version: SCHEMA_VERSION,
        qk: a.qk,
        importance_on_compressed: a.importance_on_compressed,
        params,
        recon,
    };
    write_json(&a.out.join("report.json"), &report)?;
    eprintln!(
        "compressed {} layers: ranks {:?}, mlp {:?}, parameter reduction {:.4}, output error {:.3e}",
        config.n_layers,
        plan.ranks_attn,
        plan.ranks_mlp,
        params.reduction,
        report.recon.output_error
    );
    Ok(0)
}

pub fn importance(a: ImportanceArgs) -> Result<u8> {
    let exec = exec_mode(&a.run)?;
    let model = load_dense(&a.model)?;
    let batches = calibration_batches(&a.calib, model.config.d_hid, a.run.seed)?;
    let capture = run_calibration(&model, &batches, exec)?;
    let scores = importance_scores(&capture)?;
    write_json(&a.out, &ScoresFile::new(&model.config, &scores))?;
    eprintln!("importance t = {:?}", scores.t);
    Ok(0)
}

pub fn plan(a: PlanArgs) -> Result<u8> {
    check_sparsity(a.sparsity)?;
    let scores: ScoresFile = read_json(&a.scores)?;
    if scores.t.len() != scores.n_layers {
        return Err(FlatError::format(
            a.scores.display().to_string(),
            format!("{} scores for {} layers", scores.t.len(), scores.n_layers),
        )
        .into());
    }
    let mode: RankMode = a.mode.into();
    let plan = make_plan(&scores.t, a.sparsity, mode, scores.d_head, scores.d_int)?;
    write_json(&a.out, &plan)?;
    eprintln!("w = {:?}", plan.w);
    Ok(0)
}

#[derive(Serialize)]
struct TheoremsOutput {
    schema_version: u32,
    suite: &'static str,
    passed: bool,
    single_head: IdentitySuite,
    multi_head: IdentitySuite,
}

#[derive(Serialize)]
struct AllocOutput {
    schema_version: u32,
    suite: &'static str,
    passed: bool,
    result: AllocationSuite,
}

#[derive(Serialize)]
struct E2eOutput {
    schema_version: u32,
    suite: &'static str,
    passed: bool,
    /// Largest error after compressing the toy model at zero sparsity.
    #[serde(skip_serializing_if = "Option::is_none")]
    lossless_max_error: Option<f64>,
    report: ReconReport,
}

const LOSSLESS_TOL: f64 = 1e-10;

fn emit<T: Serialize>(json: Option<&Path>, value: &T) -> Result<()> {
    match json {
        Some(path) => write_json(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn toy_e2e(seed: u64, tokens: usize, exec: Exec) -> Result<E2eOutput> {
    let config = ModelConfig::new(8, 4, 2, 32, 4);
    let model = Model::random(config, seed)?;
    let calib = synthetic_batches(config.d_hid, seed.wrapping_add(1), 8, 32);
    let eval = synthetic_batches(config.d_hid, seed.wrapping_add(2), 1, tokens).remove(0);
    let run = |sparsity| {
        let opts = PipelineOptions {
            sparsity,
            exec,
            ..Default::default()
        };
        let out = run_pipeline(&model, &calib, &opts)?;
        end_to_end_report(&model, &out.compressed, &eval, Some(&out.plan))
    };
    let lossless = run(0.0)?.max_error();
    let report = run(0.2)?;
    Ok(E2eOutput {
        schema_version: SCHEMA_VERSION,
        suite: "e2e",
        passed: lossless <= LOSSLESS_TOL && report.all_finite(),
        lossless_max_error: Some(lossless),
        report,
    })
}

pub fn verify(a: VerifyArgs) -> Result<u8> {
    let exec = exec_mode(&a.run)?;
    let seed = a.run.seed;
    let json = a.json.as_deref();
    let passed = match a.suite {
        Suite::Theorems => {
            let single_head = identity_trials(seed, a.trials, 1, exec)?;
            let multi_head = identity_trials(seed.wrapping_add(1), a.trials, 8, exec)?;
            let passed = single_head.passed && multi_head.passed;
            eprintln!(
                "theorems: max residual {:.3e} (single head), {:.3e} (multi head)",
                single_head.max_residual, multi_head.max_residual
            );
            emit(
                json,
                &TheoremsOutput {
                    schema_version: SCHEMA_VERSION,
                    suite: "theorems",
                    passed,
                    single_head,
                    multi_head,
                },
            )?;
            passed
        }
        Suite::Alloc => {
            let result = allocation_trials(seed, a.trials, 4, 0.01, exec)?;
            eprintln!(
                "alloc: greedy feasible {}, gap max {:.3e} mean {:.3e}",
                result.greedy_feasible, result.max_gap, result.mean_gap
            );
            let passed = result.greedy_feasible;
            emit(
                json,
                &AllocOutput {
                    schema_version: SCHEMA_VERSION,
                    suite: "alloc",
                    passed,
                    result,
                },
            )?;
            passed
        }
        Suite::E2e => {
            let out = match (&a.model, &a.compressed) {
                (Some(m), Some(c)) => {
                    let model = load_dense(m)?;
                    let compressed = match load_checkpoint(c)
                        .with_context(|| format!("loading {}", c.display()))?
                    {
                        Checkpoint::Compressed(cm) => cm,
                        Checkpoint::Dense(_) => {
                            return Err(usage(format!("{} is not a compressed checkpoint", c.display())))
                        }
                    };
                    let eval = synthetic_batches(model.config.d_hid, seed, 1, a.tokens).remove(0);
                    let report = end_to_end_report(&model, &compressed, &eval, None)?;
                    E2eOutput {
                        schema_version: SCHEMA_VERSION,
                        suite: "e2e",
                        passed: report.all_finite(),
                        lossless_max_error: None,
                        report,
                    }
                }
                _ => toy_e2e(seed, a.tokens, exec)?,
            };
            eprintln!("e2e: output error {:.3e}", out.report.output_error);
            let passed = out.passed;
            emit(json, &out)?;
            passed
        }
    };
    Ok(if passed { 0 } else { crate::EXIT_NUMERICAL })
}

pub fn random_model(a: RandomModelArgs) -> Result<u8> {
    let config = ModelConfig::new(a.d_head, a.heads, a.kv_heads, a.d_int, a.layers);
    config.validate().map_err(|e| usage(e.to_string()))?;
    let mut model = Model::random(config, a.seed)?;
    if let Some(scales) = &a.branch_scales {
        scale_branches(&mut model, scales).map_err(|e| usage(e.to_string()))?;
    }
    save_checkpoint(&model, &a.out, dtype(a.f32))?;
    if let Some(dir) = &a.calib_out {
        check_distinct(&a.out, dir)?;
        let batches = synthetic_batches(config.d_hid, a.seed.wrapping_add(1), a.calib_batches, a.calib_tokens);
        save_batches(&batches, dir, Dtype::F64)?;
    }
    eprintln!("wrote {} (d_hid {}, {} layers)", a.out.display(), config.d_hid, config.n_layers);
    Ok(0)
}
