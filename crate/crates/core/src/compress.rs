//! Model-level compression and the calibrate → score → plan → compress chain.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::{compress_attention_layer, HeadCompressionPlan};
use crate::calibration::{importance_scores, run_calibration, CalibrationCapture, ImportanceScores};
use crate::error::{FlatError, Result};
use crate::exec::Exec;
use crate::iprs::{check_sparsity, make_plan, RankMode, RankPlan};
use crate::mlp::compress_mlp;
use crate::model::{CompressedDecoderWeights, CompressedModel, Model, ModelConfig};

pub fn compress_layer(
    model: &Model,
    capture: &CalibrationCapture,
    layer: usize,
    rank: usize,
    keep: usize,
    qk: bool,
) -> Result<CompressedDecoderWeights> {
    let config = &model.config;
    let weights = &model.layers[layer];
    let lc = &capture.layers[layer];
    let plan = HeadCompressionPlan {
        layer,
        rank,
        qk_enabled: qk,
    };
    let attn = compress_attention_layer(weights, lc, &plan, config)?;
    let mlp = compress_mlp(weights, &lc.c_sigma, keep)?;
    let (w_q, w_k, qk_bases) = match attn.query_key {
        Some(q) => (q.w_q, q.w_k, Some(q.bases)),
        None => (weights.w_q.clone(), weights.w_k.clone(), None),
    };
    Ok(CompressedDecoderWeights {
        w_q,
        w_k,
        qk_bases,
        w_v: attn.value_output.w_v,
        w_o: attn.value_output.w_o,
        w_up: mlp.w_up,
        w_down: mlp.w_down,
        rms_attn: weights.rms_attn.clone(),
        rms_mlp: weights.rms_mlp.clone(),
        retained_rank: rank,
        retained_mlp: keep,
        mlp_indices: mlp.selection.indices,
    })
}

/// Compresses every decoder with the plan's ranks. Layers are independent
/// and may run in parallel.
pub fn compress_model(
    model: &Model,
    capture: &CalibrationCapture,
    plan: &RankPlan,
    qk: bool,
    exec: Exec,
) -> Result<CompressedModel> {
    plan.validate(&model.config)?;
    if capture.layers.len() != model.config.n_layers {
        return Err(FlatError::Calibration(format!(
            "capture has {} layers, model has {}",
            capture.layers.len(),
            model.config.n_layers
        )));
    }
    let layers = exec.try_map_indices(model.config.n_layers, |l| {
        compress_layer(
            model,
            capture,
            l,
            plan.ranks_attn[l],
            plan.ranks_mlp[l],
            qk,
        )
        .map_err(|e| e.in_layer(l))
    })?;
    Ok(CompressedModel {
        config: model.config,
        layers,
    })
}

/// Parameter accounting over the compressible matrices: value/output,
/// up/down, and query/key when those are compressed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub dense: usize,
    pub compressed: usize,
    /// `1 − compressed / dense`.
    pub reduction: f64,
    /// Stored query/key bases, not part of `compressed`.
    pub qk_basis_params: usize,
}

pub fn param_summary(config: &ModelConfig, compressed: &CompressedModel) -> ParamSummary {
    let c = config;
    let vo = (c.n_kv_heads + c.n_q_heads) * c.d_head * c.d_hid;
    let mlp = 2 * c.d_int * c.d_hid;
    let mut dense = 0;
    let mut kept = 0;
    let mut basis = 0;
    for l in &compressed.layers {
        dense += vo + mlp;
        kept += l.w_v.len() + l.w_o.len() + l.w_up.len() + l.w_down.len();
        if let Some(b) = &l.qk_bases {
            dense += (c.n_q_heads + c.n_kv_heads) * c.d_head * c.d_hid;
            kept += l.w_q.len() + l.w_k.len();
            basis += b.q.len() + b.k.len();
        }
    }
    ParamSummary {
        dense,
        compressed: kept,
        reduction: 1.0 - kept as f64 / dense as f64,
        qk_basis_params: basis,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub sparsity: f64,
    pub mode: RankMode,
    pub qk: bool,
    /// Re-score on the first-pass compressed model, re-plan, and compress the
    /// original weights again with the new plan.
    pub importance_on_compressed: bool,
    pub exec: Exec,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            sparsity: 0.2,
            mode: RankMode::Iprs,
            qk: false,
            importance_on_compressed: false,
            exec: Exec::Sequential,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub scores: ImportanceScores,
    pub plan: RankPlan,
    pub compressed: CompressedModel,
    pub params: ParamSummary,
}

pub fn run_pipeline(
    model: &Model,
    batches: &[DMatrix<f64>],
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    check_sparsity(opts.sparsity)?;
    let c = &model.config;
    let capture = run_calibration(model, batches, opts.exec)?;
    let mut scores = importance_scores(&capture)?;
    let mut plan = make_plan(&scores.t, opts.sparsity, opts.mode, c.d_head, c.d_int)?;
    let mut compressed = compress_model(model, &capture, &plan, opts.qk, opts.exec)?;
    if opts.importance_on_compressed {
        let second = run_calibration(&compressed, batches, opts.exec)?;
        scores = importance_scores(&second)?;
        plan = make_plan(&scores.t, opts.sparsity, opts.mode, c.d_head, c.d_int)?;
        compressed = compress_model(model, &capture, &plan, opts.qk, opts.exec)?;
    }
    let params = param_summary(c, &compressed);
    Ok(PipelineOutput {
        scores,
        plan,
        compressed,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::synthetic_batches;

    #[test]
    fn param_reduction_tracks_sparsity() {
        let cfg = ModelConfig::new(8, 4, 2, 64, 4);
        let m = Model::random(cfg, 1).unwrap();
        let b = synthetic_batches(cfg.d_hid, 2, 2, 48);
        for s in [0.0, 0.2, 0.5] {
            let opts = PipelineOptions {
                sparsity: s,
                ..Default::default()
            };
            let out = run_pipeline(&m, &b, &opts).unwrap();
            assert!((out.params.reduction - s).abs() <= 0.02, "s={s}: {:?}", out.params);
            assert_eq!(out.params.qk_basis_params, 0);
        }
    }

    #[test]
    fn qk_counts_bases_separately() {
        let cfg = ModelConfig::new(8, 4, 2, 32, 2);
        let m = Model::random(cfg, 1).unwrap();
        let b = synthetic_batches(cfg.d_hid, 2, 2, 32);
        let opts = PipelineOptions {
            sparsity: 0.5,
            mode: RankMode::Uniform,
            qk: true,
            ..Default::default()
        };
        let out = run_pipeline(&m, &b, &opts).unwrap();
        assert_eq!(out.plan.ranks_attn, vec![4, 4]);
        assert_eq!(out.params.qk_basis_params, 2 * (4 + 2) * 8 * 4);
        assert!((out.params.reduction - 0.5).abs() < 1e-12);
    }

    #[test]
    fn importance_on_compressed_runs() {
        let cfg = ModelConfig::new(4, 2, 1, 16, 3);
        let m = Model::random(cfg, 4).unwrap();
        let b = synthetic_batches(cfg.d_hid, 5, 2, 16);
        let opts = PipelineOptions {
            sparsity: 0.3,
            importance_on_compressed: true,
            ..Default::default()
        };
        let out = run_pipeline(&m, &b, &opts).unwrap();
        out.compressed.validate().unwrap();
    }
}
