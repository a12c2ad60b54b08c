//! Pre-norm decoder forward pass with taps.
//!
//! ```text
//! Xn  = RMSNorm(X) ⊙ g_attn
//! P_h = softmax(causal(Xn W_qʰᵀ (Xn W_k^{g(h)}ᵀ)ᵀ / √d_head))
//! X'  = X + concat_h(P_h Xn W_v^{g(h)}ᵀ) W_oᵀ
//! Y   = X' + SiLU(RMSNorm(X') ⊙ g_mlp W_upᵀ) W_downᵀ
//! ```
//!
//! No rotary embedding. Compressed layers run through the same code with
//! narrower per-head widths; when query/key bases are present the reduced
//! query/key activations are lifted back through them before the dot product.

use nalgebra::{DMatrix, DVector};

use crate::error::{FlatError, Result};
use crate::model::{Decoder, LayerView, ModelConfig};

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub output: DMatrix<f64>,
    /// Normalised attention input.
    pub normed: DMatrix<f64>,
    /// Per query head `Y_qʰ = Xn W_qʰᵀ` (reduced width when compressed).
    pub q: Vec<DMatrix<f64>>,
    /// Per kv-head `Y_kᵍ`.
    pub k: Vec<DMatrix<f64>>,
    /// Per kv-head value-projection output `Y_vᵍ = Xn W_vᵍᵀ`.
    pub v: Vec<DMatrix<f64>>,
    /// Per query head attention probabilities, when requested.
    pub probs: Option<Vec<DMatrix<f64>>>,
    pub attn_out: DMatrix<f64>,
    /// Residual stream after attention.
    pub mid: DMatrix<f64>,
    /// Post-SiLU intermediate states.
    pub act: DMatrix<f64>,
    pub mlp_out: DMatrix<f64>,
}

pub fn rms_norm(x: &DMatrix<f64>, gain: &DVector<f64>, eps: f64) -> DMatrix<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (ms + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v *= inv * gain[j];
        }
    }
    out
}

pub fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// Row-wise softmax with a causal mask (row `i` sees columns `0..=i`).
/// Entries above the diagonal are exactly zero.
pub fn causal_softmax(logits: &mut DMatrix<f64>) {
    let n = logits.nrows();
    for i in 0..n {
        let m = (0..=i).fold(f64::NEG_INFINITY, |a, j| a.max(logits[(i, j)]));
        let mut sum = 0.0;
        for j in 0..=i {
            let e = (logits[(i, j)] - m).exp();
            logits[(i, j)] = e;
            sum += e;
        }
        for j in 0..=i {
            logits[(i, j)] /= sum;
        }
        for j in i + 1..logits.ncols() {
            logits[(i, j)] = 0.0;
        }
    }
}

fn head_rows(w: &DMatrix<f64>, head: usize, width: usize) -> DMatrix<f64> {
    w.rows(head * width, width).into_owned()
}

fn check_input(x: &DMatrix<f64>, config: &ModelConfig) -> Result<()> {
    if x.ncols() != config.d_hid || x.nrows() == 0 {
        return Err(FlatError::ShapeMismatch {
            tensor: "hidden states".into(),
            expected: vec![x.nrows().max(1), config.d_hid],
            found: vec![x.nrows(), x.ncols()],
        });
    }
    crate::model::check_finite("hidden states", x.as_slice())
}

/// Attention-block activations for one normalised input.
pub struct AttentionTrace {
    pub q: Vec<DMatrix<f64>>,
    pub k: Vec<DMatrix<f64>>,
    pub v: Vec<DMatrix<f64>>,
    pub probs: Vec<DMatrix<f64>>,
    pub out: DMatrix<f64>,
}

pub fn attention(layer: &LayerView<'_>, normed: &DMatrix<f64>, config: &ModelConfig) -> AttentionTrace {
    let c = config;
    let n_tok = normed.nrows();
    let qw = layer.qk_width;
    let vw = layer.v_width;
    let scale = 1.0 / (c.d_head as f64).sqrt();

    let lift = |y: DMatrix<f64>, basis: &DMatrix<f64>, head: usize| -> DMatrix<f64> {
        // (N × r)(r × d_head)
        y * basis.rows(head * c.d_head, c.d_head).transpose()
    };

    let q: Vec<_> = (0..c.n_q_heads)
        .map(|h| normed * head_rows(layer.w_q, h, qw).transpose())
        .collect();
    let k: Vec<_> = (0..c.n_kv_heads)
        .map(|g| normed * head_rows(layer.w_k, g, qw).transpose())
        .collect();
    let v: Vec<_> = (0..c.n_kv_heads)
        .map(|g| normed * head_rows(layer.w_v, g, vw).transpose())
        .collect();

    let (q_full, k_full): (Vec<_>, Vec<_>) = match layer.qk_bases {
        Some(b) => (
            q.iter().enumerate().map(|(h, y)| lift(y.clone(), &b.q, h)).collect(),
            k.iter().enumerate().map(|(g, y)| lift(y.clone(), &b.k, g)).collect(),
        ),
        None => (q.clone(), k.clone()),
    };

    let mut heads = DMatrix::zeros(n_tok, c.n_q_heads * vw);
    let mut probs = Vec::with_capacity(c.n_q_heads);
    for (h, qh) in q_full.iter().enumerate() {
        let g = c.kv_head(h);
        let mut p = (qh * k_full[g].transpose()) * scale;
        causal_softmax(&mut p);
        let yo = &p * &v[g];
        heads.columns_mut(h * vw, vw).copy_from(&yo);
        probs.push(p);
    }
    let out = heads * layer.w_o.transpose();
    AttentionTrace { q, k, v, probs, out }
}

/// MLP branch on the residual stream `mid`; returns `(post-SiLU, output)`.
pub fn mlp(layer: &LayerView<'_>, mid: &DMatrix<f64>, config: &ModelConfig) -> (DMatrix<f64>, DMatrix<f64>) {
    let xm = rms_norm(mid, layer.rms_mlp, config.norm_eps);
    let act = (xm * layer.w_up.transpose()).map(silu);
    let out = &act * layer.w_down.transpose();
    (act, out)
}

pub fn forward_decoder(
    layer: &LayerView<'_>,
    x: &DMatrix<f64>,
    config: &ModelConfig,
    keep_probs: bool,
) -> Result<LayerTrace> {
    check_input(x, config)?;
    let normed = rms_norm(x, layer.rms_attn, config.norm_eps);
    let att = attention(layer, &normed, config);
    let mid = x + &att.out;
    let (act, mlp_out) = mlp(layer, &mid, config);
    let output = &mid + &mlp_out;
    Ok(LayerTrace {
        output,
        normed,
        q: att.q,
        k: att.k,
        v: att.v,
        probs: keep_probs.then_some(att.probs),
        attn_out: att.out,
        mid,
        act,
        mlp_out,
    })
}

/// Runs every decoder; returns the hidden states `[X_0, X_1, ..., X_L]`.
pub fn forward_states<D: Decoder + ?Sized>(model: &D, x: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
    let mut states = Vec::with_capacity(model.layer_count() + 1);
    states.push(x.clone());
    for l in 0..model.layer_count() {
        let t = forward_decoder(&model.layer(l), &states[l], model.config(), false)
            .map_err(|e| e.in_layer(l))?;
        states.push(t.output);
    }
    Ok(states)
}

pub fn forward<D: Decoder + ?Sized>(model: &D, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(forward_states(model, x)?.pop().expect("at least the input"))
}
