use flat_core::iprs::{
    budget, iprs_allocate, make_plan, naive_allocation, round_with_budget, uniform_allocation,
    RankMode, RankPlan,
};
use flat_core::model::ModelConfig;
use proptest::prelude::*;

/// Water-filling by bisection: `w_l = min(1, λ t_l)` with `Σ w = B`.
fn water_fill(t: &[f64], b: f64) -> Vec<f64> {
    let fill = |lam: f64| t.iter().map(|x| (lam * x).min(1.0)).collect::<Vec<_>>();
    let total = |lam: f64| fill(lam).iter().sum::<f64>();
    let (mut lo, mut hi) = (0.0, 1.0);
    while total(hi) < b {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < b {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    fill(0.5 * (lo + hi))
}

fn instance() -> impl Strategy<Value = (Vec<f64>, f64)> {
    (
        prop::collection::vec(1e-3f64..1.0, 1..12),
        0.0f64..0.95,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn allocation_is_feasible_and_matches_water_filling((t, s) in instance()) {
        let w = iprs_allocate(&t, s).unwrap();
        let b = budget(t.len(), s);
        prop_assert!((w.iter().sum::<f64>() - b).abs() <= 1e-9);
        prop_assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
        let oracle = water_fill(&t, b);
        for (a, o) in w.iter().zip(&oracle) {
            prop_assert!((a - o).abs() <= 1e-9, "{:?} vs {:?}", w, oracle);
        }
    }

    #[test]
    fn order_is_preserved((t, s) in instance()) {
        let w = iprs_allocate(&t, s).unwrap();
        for i in 0..t.len() {
            for j in 0..t.len() {
                if t[i] >= t[j] {
                    prop_assert!(w[i] >= w[j] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn unclipped_entries_stay_proportional((t, s) in instance()) {
        let w = iprs_allocate(&t, s).unwrap();
        let free: Vec<usize> = (0..t.len()).filter(|&l| w[l] < 1.0).collect();
        if let Some(&first) = free.first() {
            let ratio = w[first] / t[first];
            for &l in &free {
                prop_assert!((w[l] / t[l] - ratio).abs() <= 1e-9 * ratio.max(1.0));
            }
            // every clipped entry would have exceeded one at the final ratio
            for l in (0..t.len()).filter(|&l| w[l] == 1.0) {
                prop_assert!(t[l] * ratio >= 1.0 - 1e-9);
            }
        }
    }

    #[test]
    fn positive_scaling_is_ignored((t, s) in instance(), c in 1e-3f64..1e3) {
        let a = iprs_allocate(&t, s).unwrap();
        let scaled: Vec<f64> = t.iter().map(|x| x * c).collect();
        let b = iprs_allocate(&scaled, s).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matches_naive_when_nothing_clips((t, s) in instance()) {
        let naive = naive_allocation(&t, s).unwrap();
        if naive.iter().all(|&x| x <= 1.0) {
            prop_assert_eq!(iprs_allocate(&t, s).unwrap(), naive);
        }
    }

    #[test]
    fn rounding_hits_budget_within_one_unit(
        w in prop::collection::vec(0.0f64..=1.0, 1..10),
        dim in 1usize..64,
    ) {
        let r = round_with_budget(&w, dim);
        let target = (w.iter().sum::<f64>() * dim as f64).round() as usize;
        let total: usize = r.iter().sum();
        if target >= w.len() && w.iter().all(|x| x * dim as f64 >= 0.5) {
            prop_assert_eq!(total, target);
        } else {
            prop_assert!(total >= target);
        }
        for (x, &rl) in w.iter().zip(&r) {
            prop_assert!((1..=dim).contains(&rl));
            prop_assert!((x * dim as f64 - rl as f64).abs() <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn worked_instance() {
    let w = iprs_allocate(&[0.6, 0.3, 0.1], 1.0 / 3.0).unwrap();
    let expect = [1.0, 0.75, 0.25];
    for (a, e) in w.iter().zip(expect) {
        assert!((a - e).abs() <= 1e-12, "{w:?}");
    }
    assert!((w.iter().sum::<f64>() - 2.0).abs() <= 1e-12);
}

#[test]
fn rounding_repair_examples() {
    assert_eq!(round_with_budget(&[0.5, 0.5, 0.5], 3), vec![1, 2, 2]);
    assert_eq!(round_with_budget(&[0.7348688744553551, 0.0, 0.0], 4), vec![2, 1, 1]);
    assert_eq!(round_with_budget(&[1.0, 0.75, 0.25], 8), vec![8, 6, 2]);
}

#[test]
fn zero_sparsity_keeps_everything() {
    let w = iprs_allocate(&[0.5, 0.01, 3.0, 0.2], 0.0).unwrap();
    assert_eq!(w, vec![1.0; 4]);
}

#[test]
fn zero_scores_share_leftover_budget() {
    let w = iprs_allocate(&[1.0, 0.0, 0.0], 1.0 / 3.0).unwrap();
    assert_eq!(w[0], 1.0);
    assert!((w[1] - 0.5).abs() < 1e-12 && (w[2] - 0.5).abs() < 1e-12);
    assert!(iprs_allocate(&[0.0, 0.0], 0.5).is_err());
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(iprs_allocate(&[0.5, 0.5], 1.0).is_err());
    assert!(iprs_allocate(&[0.5, 0.5], -0.1).is_err());
    assert!(iprs_allocate(&[0.5, f64::NAN], 0.2).is_err());
    assert!(iprs_allocate(&[], 0.2).is_err());
    assert!(uniform_allocation(0, 0.2).is_err());
}

#[test]
fn plans_validate_against_config() {
    let cfg = ModelConfig::new(8, 4, 2, 32, 4);
    let t = [0.4, 0.1, 0.05, 0.3];
    for mode in [RankMode::Iprs, RankMode::Uniform] {
        let plan = make_plan(&t, 0.3, mode, cfg.d_head, cfg.d_int).unwrap();
        plan.validate(&cfg).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        assert!(json.contains("\"B\""));
        let back: RankPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }
    let uni = make_plan(&t, 0.5, RankMode::Uniform, 8, 32).unwrap();
    assert_eq!(uni.ranks_attn, vec![4; 4]);
    assert_eq!(uni.ranks_mlp, vec![16; 4]);
    let wrong = make_plan(&t[..3], 0.3, RankMode::Iprs, 8, 32).unwrap();
    assert!(wrong.validate(&cfg).is_err());
}
