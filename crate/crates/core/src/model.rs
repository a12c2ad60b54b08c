//! Toy decoder-only transformer: configuration, dense and compressed decoder
//! weights, structural validation and a seeded random fixture generator.
//!
//! Weight layouts follow the `y = x Wᵀ` convention. Query heads occupy
//! consecutive `d_head`-row blocks of `w_q`, key/value heads consecutive
//! blocks of `w_k`/`w_v`, and output heads consecutive `d_head`-column blocks
//! of `w_o`. Heads are 0-based; query head `h` reads key/value head `h / n`
//! with `n = n_q_heads / n_kv_heads`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FlatError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_hid: usize,
    pub d_head: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_int: usize,
    pub n_layers: usize,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Config with `d_hid = n_q_heads * d_head`.
    pub fn new(
        d_head: usize,
        n_q_heads: usize,
        n_kv_heads: usize,
        d_int: usize,
        n_layers: usize,
    ) -> Self {
        ModelConfig {
            d_hid: n_q_heads * d_head,
            d_head,
            n_q_heads,
            n_kv_heads,
            d_int,
            n_layers,
            norm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_hid", self.d_hid),
            ("d_head", self.d_head),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_int", self.d_int),
            ("n_layers", self.n_layers),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(FlatError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.d_hid != self.n_q_heads * self.d_head {
            return Err(FlatError::InvalidConfig(format!(
                "d_hid ({}) != n_q_heads ({}) * d_head ({})",
                self.d_hid, self.n_q_heads, self.d_head
            )));
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return Err(FlatError::InvalidConfig(format!(
                "n_q_heads ({}) is not a multiple of n_kv_heads ({})",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return Err(FlatError::InvalidConfig(format!(
                "norm_eps must be finite and non-negative, got {}",
                self.norm_eps
            )));
        }
        Ok(())
    }

    /// Query heads per key/value head.
    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    /// Key/value head read by query head `h`.
    pub fn kv_head(&self, h: usize) -> usize {
        h / self.group_size()
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub w_o: DMatrix<f64>,
    pub w_up: DMatrix<f64>,
    pub w_down: DMatrix<f64>,
    pub rms_attn: DVector<f64>,
    pub rms_mlp: DVector<f64>,
}

/// Per-head reduced query/key bases kept next to compressed `w_q`/`w_k`.
///
/// `q` stacks the `n_q_heads` blocks of `d_head × r`, `k` the `n_kv_heads`
/// blocks, row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct QkBases {
    pub q: DMatrix<f64>,
    pub k: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedDecoderWeights {
    /// `(n_q_heads * r) × d_hid` when `qk_bases` is set, else dense.
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub qk_bases: Option<QkBases>,
    /// `(n_kv_heads * r) × d_hid`.
    pub w_v: DMatrix<f64>,
    /// `d_hid × (n_q_heads * r)`.
    pub w_o: DMatrix<f64>,
    /// `k × d_hid`, rows of the dense up-projection at `mlp_indices`.
    pub w_up: DMatrix<f64>,
    /// `d_hid × k`, Nyström-reconstructed down-projection.
    pub w_down: DMatrix<f64>,
    pub rms_attn: DVector<f64>,
    pub rms_mlp: DVector<f64>,
    pub retained_rank: usize,
    pub retained_mlp: usize,
    pub mlp_indices: Vec<usize>,
}

/// Borrowed view of one decoder, dense or compressed, as consumed by the
/// forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub w_q: &'a DMatrix<f64>,
    pub w_k: &'a DMatrix<f64>,
    pub qk_bases: Option<&'a QkBases>,
    /// Rows per head in `w_q`/`w_k`.
    pub qk_width: usize,
    pub w_v: &'a DMatrix<f64>,
    pub w_o: &'a DMatrix<f64>,
    /// Rows per kv-head in `w_v`, columns per head in `w_o`.
    pub v_width: usize,
    pub w_up: &'a DMatrix<f64>,
    pub w_down: &'a DMatrix<f64>,
    pub rms_attn: &'a DVector<f64>,
    pub rms_mlp: &'a DVector<f64>,
}

pub trait Layer {
    fn view(&self, config: &ModelConfig) -> LayerView<'_>;
}

impl Layer for DecoderWeights {
    fn view(&self, config: &ModelConfig) -> LayerView<'_> {
        LayerView {
            w_q: &self.w_q,
            w_k: &self.w_k,
            qk_bases: None,
            qk_width: config.d_head,
            w_v: &self.w_v,
            w_o: &self.w_o,
            v_width: config.d_head,
            w_up: &self.w_up,
            w_down: &self.w_down,
            rms_attn: &self.rms_attn,
            rms_mlp: &self.rms_mlp,
        }
    }
}

impl Layer for CompressedDecoderWeights {
    fn view(&self, config: &ModelConfig) -> LayerView<'_> {
        LayerView {
            w_q: &self.w_q,
            w_k: &self.w_k,
            qk_bases: self.qk_bases.as_ref(),
            qk_width: if self.qk_bases.is_some() {
                self.retained_rank
            } else {
                config.d_head
            },
            w_v: &self.w_v,
            w_o: &self.w_o,
            v_width: self.retained_rank,
            w_up: &self.w_up,
            w_down: &self.w_down,
            rms_attn: &self.rms_attn,
            rms_mlp: &self.rms_mlp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<DecoderWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub config: ModelConfig,
    pub layers: Vec<CompressedDecoderWeights>,
}

/// Anything the forward pass can run layer by layer.
pub trait Decoder: Sync {
    fn config(&self) -> &ModelConfig;
    fn layer_count(&self) -> usize;
    fn layer(&self, l: usize) -> LayerView<'_>;
}

impl Decoder for Model {
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn layer_count(&self) -> usize {
        self.layers.len()
    }
    fn layer(&self, l: usize) -> LayerView<'_> {
        self.layers[l].view(&self.config)
    }
}

impl Decoder for CompressedModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn layer_count(&self) -> usize {
        self.layers.len()
    }
    fn layer(&self, l: usize) -> LayerView<'_> {
        self.layers[l].view(&self.config)
    }
}

pub(crate) fn check_matrix(
    name: &str,
    m: &DMatrix<f64>,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(FlatError::ShapeMismatch {
            tensor: name.to_string(),
            expected: vec![rows, cols],
            found: vec![m.nrows(), m.ncols()],
        });
    }
    check_finite(name, m.as_slice())
}

pub(crate) fn check_vector(name: &str, v: &DVector<f64>, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(FlatError::ShapeMismatch {
            tensor: name.to_string(),
            expected: vec![len],
            found: vec![v.len()],
        });
    }
    check_finite(name, v.as_slice())
}

pub(crate) fn check_finite(name: &str, data: &[f64]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(FlatError::NonFinite {
            tensor: name.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

impl DecoderWeights {
    pub fn validate(&self, config: &ModelConfig, layer: usize) -> Result<()> {
        let c = config;
        let n = |t: &str| format!("layers.{layer}.{t}");
        check_matrix(&n("w_q"), &self.w_q, c.n_q_heads * c.d_head, c.d_hid)?;
        check_matrix(&n("w_k"), &self.w_k, c.kv_dim(), c.d_hid)?;
        check_matrix(&n("w_v"), &self.w_v, c.kv_dim(), c.d_hid)?;
        check_matrix(&n("w_o"), &self.w_o, c.d_hid, c.n_q_heads * c.d_head)?;
        check_matrix(&n("w_up"), &self.w_up, c.d_int, c.d_hid)?;
        check_matrix(&n("w_down"), &self.w_down, c.d_hid, c.d_int)?;
        check_vector(&n("rms_attn"), &self.rms_attn, c.d_hid)?;
        check_vector(&n("rms_mlp"), &self.rms_mlp, c.d_hid)
    }

    /// Zero-initialised weights with unit norm gains.
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config;
        DecoderWeights {
            w_q: DMatrix::zeros(c.n_q_heads * c.d_head, c.d_hid),
            w_k: DMatrix::zeros(c.kv_dim(), c.d_hid),
            w_v: DMatrix::zeros(c.kv_dim(), c.d_hid),
            w_o: DMatrix::zeros(c.d_hid, c.n_q_heads * c.d_head),
            w_up: DMatrix::zeros(c.d_int, c.d_hid),
            w_down: DMatrix::zeros(c.d_hid, c.d_int),
            rms_attn: DVector::from_element(c.d_hid, 1.0),
            rms_mlp: DVector::from_element(c.d_hid, 1.0),
        }
    }
}

impl CompressedDecoderWeights {
    pub fn validate(&self, config: &ModelConfig, layer: usize) -> Result<()> {
        let c = config;
        let r = self.retained_rank;
        let k = self.retained_mlp;
        if r == 0 || r > c.d_head {
            return Err(FlatError::RankOutOfRange {
                what: format!("layers.{layer}.retained_rank"),
                rank: r,
                max: c.d_head,
            });
        }
        if k == 0 || k > c.d_int {
            return Err(FlatError::RankOutOfRange {
                what: format!("layers.{layer}.retained_mlp"),
                rank: k,
                max: c.d_int,
            });
        }
        if self.mlp_indices.len() != k
            || self.mlp_indices.windows(2).any(|w| w[0] >= w[1])
            || self.mlp_indices.last().is_some_and(|&i| i >= c.d_int)
        {
            return Err(FlatError::format(
                format!("layers.{layer}.mlp_indices"),
                "must be k strictly increasing indices below d_int",
            ));
        }
        let n = |t: &str| format!("layers.{layer}.{t}");
        let qk = if self.qk_bases.is_some() { r } else { c.d_head };
        check_matrix(&n("w_q"), &self.w_q, c.n_q_heads * qk, c.d_hid)?;
        check_matrix(&n("w_k"), &self.w_k, c.n_kv_heads * qk, c.d_hid)?;
        if let Some(b) = &self.qk_bases {
            check_matrix(&n("q_basis"), &b.q, c.n_q_heads * c.d_head, r)?;
            check_matrix(&n("k_basis"), &b.k, c.kv_dim(), r)?;
        }
        check_matrix(&n("w_v"), &self.w_v, c.n_kv_heads * r, c.d_hid)?;
        check_matrix(&n("w_o"), &self.w_o, c.d_hid, c.n_q_heads * r)?;
        check_matrix(&n("w_up"), &self.w_up, k, c.d_hid)?;
        check_matrix(&n("w_down"), &self.w_down, c.d_hid, k)?;
        check_vector(&n("rms_attn"), &self.rms_attn, c.d_hid)?;
        check_vector(&n("rms_mlp"), &self.rms_mlp, c.d_hid)
    }
}

impl Model {
    pub fn new(config: ModelConfig, layers: Vec<DecoderWeights>) -> Result<Self> {
        let m = Model { config, layers };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.n_layers {
            return Err(FlatError::InvalidConfig(format!(
                "n_layers = {} but {} decoders supplied",
                self.config.n_layers,
                self.layers.len()
            )));
        }
        for (l, w) in self.layers.iter().enumerate() {
            w.validate(&self.config, l)?;
        }
        Ok(())
    }

    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let layers = random_model(&config, seed)?;
        Ok(Model { config, layers })
    }
}

impl CompressedModel {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.n_layers {
            return Err(FlatError::InvalidConfig(format!(
                "n_layers = {} but {} decoders supplied",
                self.config.n_layers,
                self.layers.len()
            )));
        }
        for (l, w) in self.layers.iter().enumerate() {
            w.validate(&self.config, l)?;
        }
        Ok(())
    }

    pub fn retained_ranks(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.retained_rank).collect()
    }

    pub fn retained_mlp(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.retained_mlp).collect()
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    // Row-major fill so the draw order matches the on-disk layout.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = StandardNormal.sample(rng);
            m[(i, j)] = z * scale;
        }
    }
    m
}

/// Seeded random decoders with i.i.d. `N(0, 1/d_hid)` matrix entries and unit
/// RMSNorm gains.
pub fn random_model(config: &ModelConfig, seed: u64) -> Result<Vec<DecoderWeights>> {
    config.validate()?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (c.d_hid as f64).sqrt();
    let layers = (0..c.n_layers)
        .map(|_| DecoderWeights {
            w_q: gaussian_matrix(&mut rng, c.n_q_heads * c.d_head, c.d_hid, scale),
            w_k: gaussian_matrix(&mut rng, c.kv_dim(), c.d_hid, scale),
            w_v: gaussian_matrix(&mut rng, c.kv_dim(), c.d_hid, scale),
            w_o: gaussian_matrix(&mut rng, c.d_hid, c.n_q_heads * c.d_head, scale),
            w_up: gaussian_matrix(&mut rng, c.d_int, c.d_hid, scale),
            w_down: gaussian_matrix(&mut rng, c.d_hid, c.d_int, scale),
            rms_attn: DVector::from_element(c.d_hid, 1.0),
            rms_mlp: DVector::from_element(c.d_hid, 1.0),
        })
        .collect();
    Ok(layers)
}

/// Scales each decoder's residual-branch outputs (`w_o`, `w_down`) by the
/// matching factor. A factor near zero makes the decoder close to identity.
pub fn scale_branches(model: &mut Model, scales: &[f64]) -> Result<()> {
    if scales.len() != model.layers.len() {
        return Err(FlatError::InvalidConfig(format!(
            "{} branch scales for {} layers",
            scales.len(),
            model.layers.len()
        )));
    }
    for (w, &s) in model.layers.iter_mut().zip(scales) {
        w.w_o *= s;
        w.w_down *= s;
    }
    Ok(())
}

/// Seeded `N(0, 1)` calibration batches of `tokens × d_hid`.
pub fn synthetic_batches(
    d_hid: usize,
    seed: u64,
    batches: usize,
    tokens: usize,
) -> Vec<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batches)
        .map(|_| gaussian_matrix(&mut rng, tokens, d_hid, 1.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        let c = ModelConfig::new(8, 4, 2, 64, 2);
        c.validate().unwrap();
        assert_eq!(c.d_hid, 32);
        assert_eq!(c.group_size(), 2);
        assert_eq!((0..4).map(|h| c.kv_head(h)).collect::<Vec<_>>(), [0, 0, 1, 1]);

        let mut bad = c;
        bad.d_hid = 30;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.n_kv_heads = 3;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.n_layers = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn random_model_determinism() {
        let c = ModelConfig::new(4, 2, 1, 16, 2);
        let a = random_model(&c, 3).unwrap();
        let b = random_model(&c, 3).unwrap();
        let d = random_model(&c, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn random_model_seed_zero_small() {
        let c = ModelConfig::new(4, 2, 2, 8, 1);
        assert_eq!(c.d_hid, 8);
        let m = Model::random(c, 0).unwrap();
        m.validate().unwrap();
        let all: Vec<f64> = m.layers[0].w_q.iter().copied().collect();
        assert!(all.iter().all(|x| x.is_finite()));
        // scaled by 1/sqrt(d_hid): sample variance near 1/8
        let w = &m.layers[0];
        let mut sum_sq = 0.0;
        let mut n = 0usize;
        for mtx in [&w.w_q, &w.w_k, &w.w_v, &w.w_o, &w.w_up, &w.w_down] {
            sum_sq += mtx.iter().map(|x| x * x).sum::<f64>();
            n += mtx.len();
        }
        let var = sum_sq / n as f64;
        assert!((var - 0.125).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn validation_catches_nan_and_shape() {
        let c = ModelConfig::new(4, 2, 1, 8, 1);
        let mut w = DecoderWeights::zeros(&c);
        w.validate(&c, 0).unwrap();
        w.w_v[(1, 2)] = f64::NAN;
        match w.validate(&c, 0) {
            Err(FlatError::NonFinite { tensor, .. }) => assert_eq!(tensor, "layers.0.w_v"),
            other => panic!("unexpected {other:?}"),
        }
        let mut w = DecoderWeights::zeros(&c);
        w.w_up = DMatrix::zeros(7, 8);
        assert!(matches!(
            w.validate(&c, 0),
            Err(FlatError::ShapeMismatch { .. })
        ));
    }
}
