//! Calibration: runs the dense model over calibration batches and accumulates
//! the statistics the compression stages consume.
//!
//! Each batch produces a partial capture; partials are merged with
//! [`tree_reduce`](crate::exec::tree_reduce), so the result does not depend on
//! the execution mode.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FlatError, Result};
use crate::exec::{tree_reduce, Exec};
use crate::forward::forward_decoder;
use crate::model::Decoder;

/// Upper bound on hidden-state rows kept per layer for cosine scoring.
pub const MAX_RETAINED_ROWS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCapture {
    /// Per query head `Σ Y_qʰᵀ Y_qʰ`.
    pub c_q: Vec<DMatrix<f64>>,
    /// Per kv-head `Σ Y_kᵍᵀ Y_kᵍ`.
    pub c_k: Vec<DMatrix<f64>>,
    /// Per kv-head `Σ Y_vᵍᵀ Y_vᵍ`.
    pub c_v: Vec<DMatrix<f64>>,
    /// `Σ σ(Z)ᵀ σ(Z)` over post-SiLU intermediate states.
    pub c_sigma: DMatrix<f64>,
    /// Stride-subsampled decoder inputs / outputs, row-aligned.
    pub x_in: DMatrix<f64>,
    pub x_out: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCapture {
    pub layers: Vec<LayerCapture>,
    pub batches: usize,
    pub tokens: usize,
    /// Every `stride`-th global row was retained.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    /// Mean input/output cosine per decoder.
    pub cosine: Vec<f64>,
    /// `arccos(cosine) / π`, in `[0, 1]`.
    pub t: Vec<f64>,
}

fn gram(y: &DMatrix<f64>) -> DMatrix<f64> {
    y.tr_mul(y)
}

fn vstack(a: DMatrix<f64>, b: DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return b;
    }
    if b.nrows() == 0 {
        return a;
    }
    let rows = a.nrows() + b.nrows();
    let mut out = DMatrix::zeros(rows, a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(&a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(&b);
    out
}

fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

impl LayerCapture {
    fn merge(mut self, other: LayerCapture) -> LayerCapture {
        let add = |a: &mut Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>| {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        };
        add(&mut self.c_q, other.c_q);
        add(&mut self.c_k, other.c_k);
        add(&mut self.c_v, other.c_v);
        self.c_sigma += other.c_sigma;
        self.x_in = vstack(self.x_in, other.x_in);
        self.x_out = vstack(self.x_out, other.x_out);
        self
    }
}

impl CalibrationCapture {
    /// Sums accumulators and appends retained rows of `other` after `self`'s.
    pub fn merge(self, other: CalibrationCapture) -> CalibrationCapture {
        CalibrationCapture {
            layers: self
                .layers
                .into_iter()
                .zip(other.layers)
                .map(|(a, b)| a.merge(b))
                .collect(),
            batches: self.batches + other.batches,
            tokens: self.tokens + other.tokens,
            stride: self.stride,
        }
    }
}

fn capture_batch<D: Decoder + ?Sized>(
    model: &D,
    x: &DMatrix<f64>,
    offset: usize,
    stride: usize,
) -> Result<CalibrationCapture> {
    let config = model.config();
    let keep: Vec<usize> = (0..x.nrows()).filter(|i| (offset + i).is_multiple_of(stride)).collect();
    let mut layers = Vec::with_capacity(model.layer_count());
    let mut h = x.clone();
    for l in 0..model.layer_count() {
        let t = forward_decoder(&model.layer(l), &h, config, false).map_err(|e| e.in_layer(l))?;
        layers.push(LayerCapture {
            c_q: t.q.iter().map(gram).collect(),
            c_k: t.k.iter().map(gram).collect(),
            c_v: t.v.iter().map(gram).collect(),
            c_sigma: gram(&t.act),
            x_in: select_rows(&h, &keep),
            x_out: select_rows(&t.output, &keep),
        });
        h = t.output;
    }
    Ok(CalibrationCapture {
        layers,
        batches: 1,
        tokens: x.nrows(),
        stride,
    })
}

pub fn run_calibration<D: Decoder + ?Sized>(
    model: &D,
    batches: &[DMatrix<f64>],
    exec: Exec,
) -> Result<CalibrationCapture> {
    if batches.is_empty() {
        return Err(FlatError::Calibration("no calibration batches".into()));
    }
    let d_hid = model.config().d_hid;
    if let Some((i, b)) = batches
        .iter()
        .enumerate()
        .find(|(_, b)| b.ncols() != d_hid || b.nrows() == 0)
    {
        return Err(FlatError::ShapeMismatch {
            tensor: format!("batch.{i}"),
            expected: vec![b.nrows().max(1), d_hid],
            found: vec![b.nrows(), b.ncols()],
        });
    }
    let total: usize = batches.iter().map(|b| b.nrows()).sum();
    let stride = total.div_ceil(MAX_RETAINED_ROWS).max(1);
    let offsets: Vec<usize> = batches
        .iter()
        .scan(0usize, |acc, b| {
            let o = *acc;
            *acc += b.nrows();
            Some(o)
        })
        .collect();
    let partials = exec.try_map_indices(batches.len(), |i| {
        capture_batch(model, &batches[i], offsets[i], stride)
    })?;
    Ok(tree_reduce(partials, CalibrationCapture::merge).expect("non-empty"))
}

fn cosine_mean(x_in: &DMatrix<f64>, x_out: &DMatrix<f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in x_in.row_iter().zip(x_out.row_iter()) {
        let na = a.norm();
        let nb = b.norm();
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        sum += a.dot(&b) / (na * nb);
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

pub fn importance_scores(capture: &CalibrationCapture) -> Result<ImportanceScores> {
    let mut cosine = Vec::with_capacity(capture.layers.len());
    for (l, lc) in capture.layers.iter().enumerate() {
        if lc.x_in.shape() != lc.x_out.shape() || lc.x_in.nrows() == 0 {
            return Err(FlatError::Calibration(format!(
                "layer {l}: retained input/output rows missing or misaligned"
            )));
        }
        let c = cosine_mean(&lc.x_in, &lc.x_out).ok_or_else(|| {
            FlatError::Calibration(format!("layer {l}: every retained row has zero norm"))
        })?;
        cosine.push(c);
    }
    Ok(ImportanceScores::from_cosines(cosine))
}

impl ImportanceScores {
    pub fn from_cosines(cosine: Vec<f64>) -> Self {
        let t = cosine
            .iter()
            .map(|c| c.clamp(-1.0, 1.0).acos() / std::f64::consts::PI)
            .collect();
        ImportanceScores { cosine, t }
    }
}
