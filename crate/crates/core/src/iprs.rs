//! Importance-preserving rank selection.
//!
//! Turns per-decoder importance scores `t` and a global sparsity `s` into
//! remaining-rank ratios `w ∈ [0,1]^L` with `Σ w = B = L(1 − s)`, then into
//! integer attention ranks and MLP keep-counts.

use serde::{Deserialize, Serialize};

use crate::error::{FlatError, Result};
use crate::model::ModelConfig;

pub const PLAN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RankMode {
    #[default]
    Iprs,
    Uniform,
}

impl std::str::FromStr for RankMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "iprs" => Ok(RankMode::Iprs),
            "uniform" => Ok(RankMode::Uniform),
            other => Err(format!("unknown rank mode {other:?} (expected iprs|uniform)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub schema_version: u32,
    pub mode: RankMode,
    pub s: f64,
    #[serde(rename = "B")]
    pub budget: f64,
    pub w: Vec<f64>,
    pub ranks_attn: Vec<usize>,
    pub ranks_mlp: Vec<usize>,
}

pub fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(FlatError::InvalidSparsity(s));
    }
    Ok(())
}

pub fn budget(layers: usize, s: f64) -> f64 {
    layers as f64 * (1.0 - s)
}

fn check_scores(t: &[f64]) -> Result<f64> {
    if t.is_empty() {
        return Err(FlatError::InvalidScores("no layers".into()));
    }
    if let Some(x) = t.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(FlatError::InvalidScores(format!(
            "scores must be finite and non-negative, found {x}"
        )));
    }
    let total: f64 = t.iter().sum();
    if total <= 0.0 {
        return Err(FlatError::InvalidScores("all scores are zero".into()));
    }
    Ok(total)
}

/// `ŵ_l = t_l / Σ t · B`; may leave `[0, 1]`.
pub fn naive_allocation(t: &[f64], s: f64) -> Result<Vec<f64>> {
    check_sparsity(s)?;
    let total = check_scores(t)?;
    let scale = budget(t.len(), s) / total;
    Ok(t.iter().map(|x| x * scale).collect())
}

/// Greedy redistribution: scale the active entries to the remaining budget,
/// pin every entry above one to exactly one, deduct it from the budget, and
/// repeat on the rest until nothing exceeds one.
///
/// If only zero-score entries remain while budget is left, the remainder is
/// shared equally among them.
pub fn iprs_allocate(t: &[f64], s: f64) -> Result<Vec<f64>> {
    check_sparsity(s)?;
    check_scores(t)?;
    let mut b = budget(t.len(), s);
    let mut w = vec![0.0; t.len()];
    let mut active: Vec<usize> = (0..t.len()).collect();
    while !active.is_empty() {
        let total: f64 = active.iter().map(|&l| t[l]).sum();
        // one common factor keeps the active ratios w_l / t_l identical
        let scaled: Vec<f64> = if total > 0.0 {
            let scale = b / total;
            active.iter().map(|&l| t[l] * scale).collect()
        } else {
            vec![b / active.len() as f64; active.len()]
        };
        let clipped: Vec<bool> = scaled.iter().map(|&x| x > 1.0).collect();
        if !clipped.contains(&true) {
            for (&l, x) in active.iter().zip(scaled) {
                w[l] = x;
            }
            break;
        }
        let mut rest = Vec::with_capacity(active.len());
        for (&l, hit) in active.iter().zip(clipped) {
            if hit {
                w[l] = 1.0;
                b -= 1.0;
            } else {
                rest.push(l);
            }
        }
        active = rest;
    }
    Ok(w)
}

pub fn uniform_allocation(layers: usize, s: f64) -> Result<Vec<f64>> {
    check_sparsity(s)?;
    if layers == 0 {
        return Err(FlatError::InvalidScores("no layers".into()));
    }
    Ok(vec![1.0 - s; layers])
}

/// Rounds `w_l · dim` to integers in `[1, dim]`, then nudges single layers by
/// ±1 (largest rounding residual first, lowest index on ties) until the total
/// matches `round(Σ w · dim)` or no layer can move.
///
/// A layer only moves toward its unrounded value, so every rank stays within
/// one unit of `w_l · dim`. When the floor of one forces a surplus the total
/// ends above the target.
pub fn round_with_budget(w: &[f64], dim: usize) -> Vec<usize> {
    let raw: Vec<f64> = w.iter().map(|x| x * dim as f64).collect();
    let mut r: Vec<usize> = raw
        .iter()
        .map(|x| (x.round().max(1.0) as usize).min(dim))
        .collect();
    let target = raw.iter().sum::<f64>().round() as i64;
    loop {
        let sum: i64 = r.iter().map(|&x| x as i64).sum();
        let pick = |up: bool| {
            (0..r.len())
                .filter(|&l| {
                    let rl = r[l] as f64;
                    if up {
                        r[l] < dim && rl <= raw[l]
                    } else {
                        r[l] > 1 && rl >= raw[l]
                    }
                })
                .map(|l| (l, raw[l] - r[l] as f64))
                .fold(None, |best: Option<(usize, f64)>, (l, res)| match best {
                    Some((_, b)) if (up && res <= b) || (!up && res >= b) => best,
                    _ => Some((l, res)),
                })
                .map(|(l, _)| l)
        };
        if sum < target {
            match pick(true) {
                Some(l) => r[l] += 1,
                None => break,
            }
        } else if sum > target {
            match pick(false) {
                Some(l) => r[l] -= 1,
                None => break,
            }
        } else {
            break;
        }
    }
    r
}

pub fn ratios_to_ranks(w: &[f64], config: &ModelConfig) -> (Vec<usize>, Vec<usize>) {
    (
        round_with_budget(w, config.d_head),
        round_with_budget(w, config.d_int),
    )
}

pub fn make_plan(
    t: &[f64],
    s: f64,
    mode: RankMode,
    d_head: usize,
    d_int: usize,
) -> Result<RankPlan> {
    let w = match mode {
        RankMode::Iprs => iprs_allocate(t, s)?,
        RankMode::Uniform => uniform_allocation(t.len(), s)?,
    };
    Ok(RankPlan {
        schema_version: PLAN_SCHEMA_VERSION,
        mode,
        s,
        budget: budget(t.len(), s),
        ranks_attn: round_with_budget(&w, d_head),
        ranks_mlp: round_with_budget(&w, d_int),
        w,
    })
}

impl RankPlan {
    pub fn layers(&self) -> usize {
        self.w.len()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let l = config.n_layers;
        if self.w.len() != l || self.ranks_attn.len() != l || self.ranks_mlp.len() != l {
            return Err(FlatError::format(
                "plan",
                format!("plan covers {} layers, model has {l}", self.w.len()),
            ));
        }
        for (i, (&r, &k)) in self.ranks_attn.iter().zip(&self.ranks_mlp).enumerate() {
            if r == 0 || r > config.d_head {
                return Err(FlatError::RankOutOfRange {
                    what: format!("plan.ranks_attn[{i}]"),
                    rank: r,
                    max: config.d_head,
                });
            }
            if k == 0 || k > config.d_int {
                return Err(FlatError::RankOutOfRange {
                    what: format!("plan.ranks_mlp[{i}]"),
                    rank: k,
                    max: config.d_int,
                });
            }
        }
        Ok(())
    }

    /// Plan keeping every rank: `r = d_head`, `k = d_int`.
    pub fn lossless(config: &ModelConfig) -> Self {
        let l = config.n_layers;
        RankPlan {
            schema_version: PLAN_SCHEMA_VERSION,
            mode: RankMode::Uniform,
            s: 0.0,
            budget: l as f64,
            w: vec![1.0; l],
            ranks_attn: vec![config.d_head; l],
            ranks_mlp: vec![config.d_int; l],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_examples() {
        assert_eq!(naive_allocation(&[1.0; 4], 0.25).unwrap(), vec![0.75; 4]);
        let w = naive_allocation(&[0.6, 0.3, 0.1], 1.0 / 3.0).unwrap();
        for (a, b) in w.iter().zip([1.2, 0.6, 0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = naive_allocation(&[0.2, 0.5, 0.3], 0.0).unwrap();
        assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn iprs_worked_instance() {
        let w = iprs_allocate(&[0.6, 0.3, 0.1], 1.0 / 3.0).unwrap();
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 0.75).abs() < 1e-12);
        assert!((w[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn iprs_simple_cases() {
        assert_eq!(iprs_allocate(&[1.0; 4], 0.25).unwrap(), vec![0.75; 4]);
        assert_eq!(iprs_allocate(&[0.5, 0.1, 0.2, 0.9], 0.0).unwrap(), vec![1.0; 4]);
        let t = [0.3, 0.1, 0.2];
        assert_eq!(
            iprs_allocate(&t, 0.9).unwrap(),
            naive_allocation(&t, 0.9).unwrap()
        );
    }

    #[test]
    fn zero_score_remainder_is_shared() {
        let w = iprs_allocate(&[1.0, 0.0, 0.0], 0.0).unwrap();
        assert_eq!(w, vec![1.0, 1.0, 1.0]);
        let w = iprs_allocate(&[1.0, 0.0, 0.0], 0.5).unwrap();
        assert_eq!(w, vec![1.0, 0.25, 0.25]);
    }

    #[test]
    fn errors() {
        assert!(iprs_allocate(&[0.0, 0.0], 0.2).is_err());
        assert!(iprs_allocate(&[], 0.2).is_err());
        assert!(iprs_allocate(&[1.0, -0.1], 0.2).is_err());
        assert!(iprs_allocate(&[1.0], 1.0).is_err());
        assert!(iprs_allocate(&[1.0], -0.1).is_err());
        assert!(naive_allocation(&[0.0], 0.2).is_err());
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(round_with_budget(&[0.5], 8), vec![4]);
        assert_eq!(round_with_budget(&[0.33, 0.67], 8), vec![3, 5]);
        assert_eq!(round_with_budget(&[0.01], 8), vec![1]);
        // three layers at 0.5 of 3: raw 1.5 each rounds to 2, target 4.5 -> 5
        assert_eq!(round_with_budget(&[0.5, 0.5, 0.5], 3), vec![1, 2, 2]);
        assert_eq!(round_with_budget(&[1.0, 1.0], 8), vec![8, 8]);
    }

    #[test]
    fn rank_mode_parse() {
        assert_eq!("iprs".parse::<RankMode>().unwrap(), RankMode::Iprs);
        assert_eq!("uniform".parse::<RankMode>().unwrap(), RankMode::Uniform);
        assert!("x".parse::<RankMode>().is_err());
    }
}
