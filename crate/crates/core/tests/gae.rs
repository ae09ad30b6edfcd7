use priocomm_core::ppo::compute_gae;
use proptest::prelude::*;

/// `A_t = sum_k (gamma lambda)^k delta_{t+k}`, summed term by term until the
/// episode ends or the buffer runs out.
fn direct_sum(r: &[f64], v: &[f64], done: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let delta = |t: usize| {
        let next = if done[t] {
            0.0
        } else if t + 1 < n {
            v[t + 1]
        } else {
            bootstrap
        };
        r[t] + gamma * next - v[t]
    };
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            for k in 0..n - t {
                total += (gamma * lambda).powi(k as i32) * delta(t + k);
                if done[t + k] {
                    break;
                }
            }
            total
        })
        .collect()
}

#[test]
fn five_step_example() {
    let r = [0.3, -1.2, 0.8, 0.05, -0.4];
    let v = [0.1, 0.6, -0.3, 0.9, 0.2];
    let d = [false; 5];
    let (a, t) = compute_gae(&r, &v, &d, 0.45, 0.9, 0.8);
    let oracle = direct_sum(&r, &v, &d, 0.45, 0.9, 0.8);
    for k in 0..5 {
        assert!((a[k] - oracle[k]).abs() < 1e-12);
        assert_eq!(t[k], a[k] + v[k]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn recurrence_matches_double_sum(
        rows in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, prop::bool::weighted(0.1)), 1..=64),
        bootstrap in -2.0f64..2.0,
        gamma in 0.5f64..0.999,
        lambda in 0.0f64..=1.0,
    ) {
        let r: Vec<f64> = rows.iter().map(|x| x.0).collect();
        let v: Vec<f64> = rows.iter().map(|x| x.1).collect();
        let d: Vec<bool> = rows.iter().map(|x| x.2).collect();
        let (a, _) = compute_gae(&r, &v, &d, bootstrap, gamma, lambda);
        let oracle = direct_sum(&r, &v, &d, bootstrap, gamma, lambda);
        for k in 0..r.len() {
            prop_assert!((a[k] - oracle[k]).abs() < 1e-10, "t={} {} vs {}", k, a[k], oracle[k]);
        }
    }
}
