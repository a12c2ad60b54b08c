//! Numerical checks of the truncation-error identities, a grid oracle for the
//! rank allocator, and layer-wise reconstruction reports.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FlatError, Result};
use crate::exec::Exec;
use crate::forward::{attention, forward_decoder, mlp, rms_norm};
use crate::iprs::{budget, iprs_allocate, naive_allocation, RankPlan};
use crate::model::{CompressedModel, Decoder, Model};
use crate::pca::{reconstruction_error, sym_eig, truncate};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Residual bound for the truncation-error identities.
pub const IDENTITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub seed: u64,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub rank: usize,
    /// `Σ_h ‖Y_h − Y_h Q̃_h Q̃_hᵀ‖_F²`
    pub error: f64,
    /// `Σ_h Σ_{i>r} λ_i^h`
    pub tail: f64,
    /// `|error − tail| / max(1, Σ_h ‖Y_h‖_F²)`
    pub residual: f64,
}

impl IdentityCheck {
    pub fn passed(&self) -> bool {
        self.residual <= IDENTITY_TOL
    }
}

/// Random activations with a decaying column scale so spectra are spread.
pub fn random_activations(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, j| {
        let z: f64 = StandardNormal.sample(rng);
        z * (-0.3 * j as f64).exp()
    })
}

fn identity_on(ys: &[DMatrix<f64>], r: usize) -> Result<(f64, f64, f64)> {
    let mut error = 0.0;
    let mut tail = 0.0;
    let mut norm = 0.0;
    for y in ys {
        let eig = sym_eig(&y.tr_mul(y))?;
        let basis = truncate(&eig, r)?;
        error += reconstruction_error(y, &basis)?;
        tail += eig.tail_sum(r);
        norm += y.norm_squared();
    }
    Ok((error, tail, (error - tail).abs() / norm.max(1.0)))
}

/// Single-head check of `‖Y − Y Q̃ Q̃ᵀ‖_F² = Σ_{i>r} λ_i` on seeded data.
pub fn check_truncation_identity(seed: u64, n: usize, d: usize, r: usize) -> Result<IdentityCheck> {
    check_multihead_identity(seed, 1, n, d, r)
}

/// Multi-head version: errors and eigenvalue tails summed over heads.
pub fn check_multihead_identity(
    seed: u64,
    heads: usize,
    n: usize,
    d_head: usize,
    r: usize,
) -> Result<IdentityCheck> {
    if heads == 0 || n == 0 {
        return Err(FlatError::InvalidConfig("heads and tokens must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ys: Vec<_> = (0..heads)
        .map(|_| random_activations(&mut rng, n, d_head))
        .collect();
    let (error, tail, residual) = identity_on(&ys, r)?;
    Ok(IdentityCheck {
        seed,
        tokens: n,
        dim: d_head,
        heads,
        rank: r,
        error,
        tail,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySuite {
    pub trials: Vec<IdentityCheck>,
    pub max_residual: f64,
    pub passed: bool,
}

fn trial_seeds(master: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..count).map(|_| rng.random()).collect()
}

/// Randomised trials with `tokens ≤ 64`, `d ≤ 16`, `heads ≤ max_heads`.
pub fn identity_trials(master_seed: u64, trials: usize, max_heads: usize, exec: Exec) -> Result<IdentitySuite> {
    let seeds = trial_seeds(master_seed, trials);
    let trials = exec.try_map_indices(trials, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=16);
        let r = rng.random_range(1..=d);
        let heads = rng.random_range(1..=max_heads.max(1));
        check_multihead_identity(seeds[i], heads, n, d, r)
    })?;
    let max_residual = trials.iter().fold(0.0f64, |a, t| a.max(t.residual));
    Ok(IdentitySuite {
        passed: trials.iter().all(IdentityCheck::passed),
        trials,
        max_residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationComparison {
    pub t: Vec<f64>,
    pub s: f64,
    pub grid_step: f64,
    pub naive: Vec<f64>,
    pub greedy: Vec<f64>,
    pub oracle: Vec<f64>,
    /// `‖w_greedy − ŵ‖₂`
    pub greedy_objective: f64,
    /// `‖w* − ŵ‖₂` over the feasible grid
    pub oracle_objective: f64,
    pub gap: f64,
    /// `|Σ w* − B|`, at most half a grid step.
    pub oracle_budget_error: f64,
}

pub const GRID_MAX_LAYERS: usize = 6;
pub const GRID_MIN_STEP: f64 = 0.01;

/// Exact minimiser of `‖w − ŵ‖₂` over grid points `w ∈ {0, h, ..., 1}^L`
/// whose sum is the grid point nearest `B`. The objective is separable, so a
/// dynamic program over partial sums visits the same optimum as exhaustive
/// enumeration. Lower grid values win ties, earlier layers first.
pub fn grid_oracle(target: &[f64], b: f64, step: f64) -> Result<Vec<f64>> {
    let l = target.len();
    if l == 0 || l > GRID_MAX_LAYERS {
        return Err(FlatError::InvalidConfig(format!(
            "grid oracle needs 1..={GRID_MAX_LAYERS} layers, got {l}"
        )));
    }
    let units = (1.0 / step).round();
    if step.is_nan() || step < GRID_MIN_STEP - 1e-15 || (units * step - 1.0).abs() > 1e-9 {
        return Err(FlatError::InvalidConfig(format!(
            "grid step {step} must be >= {GRID_MIN_STEP} and divide 1"
        )));
    }
    let units = units as usize;
    let goal = (b / step).round() as usize;
    let max_sum = units * l;
    if goal > max_sum {
        return Err(FlatError::InvalidConfig(format!("budget {b} exceeds {l}")));
    }
    // best[j][s]: min cost of layers 0..j summing to s units
    let inf = f64::INFINITY;
    let mut best = vec![vec![inf; goal + 1]; l + 1];
    let mut choice = vec![vec![0usize; goal + 1]; l + 1];
    best[0][0] = 0.0;
    for j in 0..l {
        for s in 0..=goal {
            if best[j][s] == inf {
                continue;
            }
            for u in 0..=units.min(goal - s) {
                let cost = best[j][s] + (u as f64 * step - target[j]).powi(2);
                if cost < best[j + 1][s + u] {
                    best[j + 1][s + u] = cost;
                    choice[j + 1][s + u] = u;
                }
            }
        }
    }
    if best[l][goal] == inf {
        return Err(FlatError::InvalidConfig("no feasible grid point".into()));
    }
    let mut w = vec![0.0; l];
    let mut s = goal;
    for j in (0..l).rev() {
        let u = choice[j + 1][s];
        w[j] = u as f64 * step;
        s -= u;
    }
    Ok(w)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn compare_allocations(t: &[f64], s: f64, grid_step: f64) -> Result<AllocationComparison> {
    let naive = naive_allocation(t, s)?;
    let greedy = iprs_allocate(t, s)?;
    let b = budget(t.len(), s);
    let oracle = grid_oracle(&naive, b, grid_step)?;
    let greedy_objective = dist(&greedy, &naive);
    let oracle_objective = dist(&oracle, &naive);
    Ok(AllocationComparison {
        t: t.to_vec(),
        s,
        grid_step,
        oracle_budget_error: (oracle.iter().sum::<f64>() - b).abs(),
        naive,
        greedy,
        oracle,
        greedy_objective,
        oracle_objective,
        gap: greedy_objective - oracle_objective,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSuite {
    pub comparisons: Vec<AllocationComparison>,
    pub max_gap: f64,
    pub mean_gap: f64,
    /// Greedy output feasible (`Σ w = B` within 1e-9, `w ∈ [0,1]`) everywhere.
    pub greedy_feasible: bool,
}

pub fn allocation_trials(
    master_seed: u64,
    trials: usize,
    max_layers: usize,
    grid_step: f64,
    exec: Exec,
) -> Result<AllocationSuite> {
    let seeds = trial_seeds(master_seed, trials);
    let comparisons = exec.try_map_indices(trials, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        let l = rng.random_range(1..=max_layers.max(1));
        let t: Vec<f64> = (0..l).map(|_| rng.random_range(0.01..1.0)).collect();
        let s = (rng.random_range(0..100) as f64) / 100.0;
        compare_allocations(&t, s, grid_step)
    })?;
    let greedy_feasible = comparisons.iter().all(|c| {
        let b = budget(c.t.len(), c.s);
        (c.greedy.iter().sum::<f64>() - b).abs() <= 1e-9
            && c.greedy.iter().all(|w| (0.0..=1.0).contains(w))
    });
    let max_gap = comparisons.iter().fold(f64::NEG_INFINITY, |a, c| a.max(c.gap));
    let mean_gap = comparisons.iter().map(|c| c.gap).sum::<f64>() / comparisons.len().max(1) as f64;
    Ok(AllocationSuite {
        comparisons,
        max_gap,
        mean_gap,
        greedy_feasible,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockErrors {
    pub attention: f64,
    pub mlp: f64,
    pub decoder: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecon {
    pub layer: usize,
    pub retained_rank: usize,
    pub retained_mlp: usize,
    /// Each compressed layer fed the original model's inputs.
    pub teacher_forced: BlockErrors,
    /// Compressed model run on its own outputs.
    pub free_running: BlockErrors,
    /// Value-activation truncation identity residual at this layer's rank on
    /// the evaluation batch.
    pub truncation_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub schema_version: u32,
    pub tokens: usize,
    pub layers: Vec<LayerRecon>,
    /// Relative error of the final hidden states.
    pub output_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<RankPlan>,
}

/// `‖a − b‖_F / ‖b‖_F`, or the absolute norm when `b` is zero.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let base = b.norm();
    if base > 0.0 {
        diff / base
    } else {
        diff
    }
}

pub fn end_to_end_report(
    original: &Model,
    compressed: &CompressedModel,
    eval: &DMatrix<f64>,
    plan: Option<&RankPlan>,
) -> Result<ReconReport> {
    let c = &original.config;
    if compressed.config != *c {
        return Err(FlatError::InvalidConfig(
            "original and compressed configs differ".into(),
        ));
    }
    let mut layers = Vec::with_capacity(c.n_layers);
    let mut x_orig = eval.clone();
    let mut x_comp = eval.clone();
    for l in 0..c.n_layers {
        let ov = original.layer(l);
        let cv = compressed.layer(l);
        let lc = &compressed.layers[l];
        let o = forward_decoder(&ov, &x_orig, c, false).map_err(|e| e.in_layer(l))?;

        // teacher-forced: same input; MLP judged on the original mid state
        let tf_attn = attention(&cv, &rms_norm(&x_orig, cv.rms_attn, c.norm_eps), c).out;
        let (_, tf_mlp) = mlp(&cv, &o.mid, c);
        let tf_dec = forward_decoder(&cv, &x_orig, c, false).map_err(|e| e.in_layer(l))?;
        let teacher_forced = BlockErrors {
            attention: relative_error(&tf_attn, &o.attn_out),
            mlp: relative_error(&tf_mlp, &o.mlp_out),
            decoder: relative_error(&tf_dec.output, &o.output),
        };

        let fr = forward_decoder(&cv, &x_comp, c, false).map_err(|e| e.in_layer(l))?;
        let free_running = BlockErrors {
            attention: relative_error(&fr.attn_out, &o.attn_out),
            mlp: relative_error(&fr.mlp_out, &o.mlp_out),
            decoder: relative_error(&fr.output, &o.output),
        };

        let (_, _, truncation_residual) = identity_on(&o.v, lc.retained_rank)?;
        layers.push(LayerRecon {
            layer: l,
            retained_rank: lc.retained_rank,
            retained_mlp: lc.retained_mlp,
            teacher_forced,
            free_running,
            truncation_residual,
        });
        x_orig = o.output;
        x_comp = fr.output;
    }
    Ok(ReconReport {
        schema_version: REPORT_SCHEMA_VERSION,
        tokens: eval.nrows(),
        output_error: relative_error(&x_comp, &x_orig),
        layers,
        plan: plan.cloned(),
    })
}

impl ReconReport {
    pub fn all_finite(&self) -> bool {
        self.output_error.is_finite()
            && self.layers.iter().all(|l| {
                [l.teacher_forced, l.free_running]
                    .iter()
                    .all(|b| b.attention.is_finite() && b.mlp.is_finite() && b.decoder.is_finite())
                    && l.truncation_residual.is_finite()
            })
    }

    /// Largest error of any kind across layers and modes.
    pub fn max_error(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| {
                let t = l.teacher_forced;
                let f = l.free_running;
                [t.attention, t.mlp, t.decoder, f.attention, f.mlp, f.decoder]
            })
            .fold(self.output_error, f64::max)
    }
}
