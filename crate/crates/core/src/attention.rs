//! Head-wise PCA compression of attention.
//!
//! Value/output: each kv-head's value activations are projected onto the
//! top-`r` eigenvectors `Q̃ᵍ` of their Gram matrix and the basis is absorbed
//! into both neighbours, `W̃_vᵍ = Q̃ᵍᵀ W_vᵍ` and `W̃_oʰ = W_oʰ Q̃^{g(h)}`, so
//! every query head in a group reuses its kv-head's basis.
//!
//! Query/key: independent per-head bases `Q̃_qʰ`, `Q̃_kᵍ`. Only one side can be
//! absorbed (`W̃ = Q̃ᵀ W`), so the bases are kept and the forward pass lifts
//! the reduced activations back through them, which reproduces
//! `(Y_q Q̃_q Q̃_qᵀ)(Y_k Q̃_k Q̃_kᵀ)ᵀ` exactly.

use nalgebra::DMatrix;

use crate::calibration::LayerCapture;
use crate::error::{FlatError, Result};
use crate::model::{DecoderWeights, ModelConfig, QkBases};
use crate::pca::{sym_eig_named, truncate, TruncatedBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadCompressionPlan {
    pub layer: usize,
    pub rank: usize,
    pub qk_enabled: bool,
}

impl HeadCompressionPlan {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        check_rank(self.rank, config.d_head, "attention rank")
    }
}

fn check_rank(r: usize, max: usize, what: &str) -> Result<()> {
    if r == 0 || r > max {
        return Err(FlatError::RankOutOfRange {
            what: what.into(),
            rank: r,
            max,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueOutputCompression {
    /// `(G·r) × d_hid`
    pub w_v: DMatrix<f64>,
    /// `d_hid × (H·r)`
    pub w_o: DMatrix<f64>,
    /// One basis per kv-head.
    pub bases: Vec<TruncatedBasis>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryKeyCompression {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub bases: QkBases,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCompression {
    pub value_output: ValueOutputCompression,
    pub query_key: Option<QueryKeyCompression>,
    pub rank: usize,
}

fn head_bases(covs: &[DMatrix<f64>], r: usize, what: &str) -> Result<Vec<TruncatedBasis>> {
    covs.iter()
        .enumerate()
        .map(|(i, c)| truncate(&sym_eig_named(&format!("{what}[{i}]"), c)?, r))
        .collect()
}

fn expect_heads(covs: &[DMatrix<f64>], n: usize, d: usize, what: &str) -> Result<()> {
    if covs.len() != n {
        return Err(FlatError::ShapeMismatch {
            tensor: what.into(),
            expected: vec![n, d, d],
            found: vec![covs.len()],
        });
    }
    if let Some(c) = covs.iter().find(|c| c.shape() != (d, d)) {
        return Err(FlatError::ShapeMismatch {
            tensor: what.into(),
            expected: vec![d, d],
            found: vec![c.nrows(), c.ncols()],
        });
    }
    Ok(())
}

/// `W̃ = [Q̃_0ᵀ W_0; Q̃_1ᵀ W_1; ...]` over row blocks of height `d_head`.
fn absorb_rows(w: &DMatrix<f64>, bases: &[TruncatedBasis], d_head: usize) -> DMatrix<f64> {
    let r = bases[0].rank();
    let mut out = DMatrix::zeros(bases.len() * r, w.ncols());
    for (i, b) in bases.iter().enumerate() {
        let block = b.basis.transpose() * w.rows(i * d_head, d_head);
        out.rows_mut(i * r, r).copy_from(&block);
    }
    out
}

pub fn compress_value_output(
    weights: &DecoderWeights,
    c_v: &[DMatrix<f64>],
    r: usize,
    config: &ModelConfig,
) -> Result<ValueOutputCompression> {
    let c = config;
    check_rank(r, c.d_head, "value/output rank")?;
    expect_heads(c_v, c.n_kv_heads, c.d_head, "c_v")?;
    let bases = head_bases(c_v, r, "c_v")?;
    let w_v = absorb_rows(&weights.w_v, &bases, c.d_head);
    let mut w_o = DMatrix::zeros(c.d_hid, c.n_q_heads * r);
    for h in 0..c.n_q_heads {
        let b = &bases[c.kv_head(h)];
        let block = weights.w_o.columns(h * c.d_head, c.d_head) * &b.basis;
        w_o.columns_mut(h * r, r).copy_from(&block);
    }
    Ok(ValueOutputCompression { w_v, w_o, bases })
}

pub fn compress_query_key(
    weights: &DecoderWeights,
    c_q: &[DMatrix<f64>],
    c_k: &[DMatrix<f64>],
    r: usize,
    config: &ModelConfig,
) -> Result<QueryKeyCompression> {
    let c = config;
    check_rank(r, c.d_head, "query/key rank")?;
    expect_heads(c_q, c.n_q_heads, c.d_head, "c_q")?;
    expect_heads(c_k, c.n_kv_heads, c.d_head, "c_k")?;
    let qb = head_bases(c_q, r, "c_q")?;
    let kb = head_bases(c_k, r, "c_k")?;
    let stack = |bs: &[TruncatedBasis]| {
        let mut m = DMatrix::zeros(bs.len() * c.d_head, r);
        for (i, b) in bs.iter().enumerate() {
            m.rows_mut(i * c.d_head, c.d_head).copy_from(&b.basis);
        }
        m
    };
    Ok(QueryKeyCompression {
        w_q: absorb_rows(&weights.w_q, &qb, c.d_head),
        w_k: absorb_rows(&weights.w_k, &kb, c.d_head),
        bases: QkBases {
            q: stack(&qb),
            k: stack(&kb),
        },
    })
}

pub fn compress_attention_layer(
    weights: &DecoderWeights,
    capture: &LayerCapture,
    plan: &HeadCompressionPlan,
    config: &ModelConfig,
) -> Result<AttentionCompression> {
    plan.validate(config)?;
    let value_output = compress_value_output(weights, &capture.c_v, plan.rank, config)?;
    let query_key = if plan.qk_enabled {
        Some(compress_query_key(
            weights,
            &capture.c_q,
            &capture.c_k,
            plan.rank,
            config,
        )?)
    } else {
        None
    };
    Ok(AttentionCompression {
        value_output,
        query_key,
        rank: plan.rank,
    })
}
