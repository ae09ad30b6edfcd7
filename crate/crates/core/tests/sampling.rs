use priocomm_core::nn::{sigmoid, GaussianPolicyHead};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn sample_moments_match_head_parameters() {
    let head = GaussianPolicyHead::from_log_std(2, true, vec![-0.7, 0.0, -0.2]).unwrap();
    let mean = [0.3, -0.1, 0.8];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 1_000_000;
    let mut sums = [0.0; 3];
    let mut squares = [0.0; 3];
    let mut prio_sum = 0.0;
    for _ in 0..n {
        let (a, _) = head.sample_action(&mean, &mut rng).unwrap();
        let p = a.priority.unwrap();
        assert!(p.value() > 0.0 && p.value() < 1.0);
        let x = [a.control[0], a.control[1], p.logit()];
        for d in 0..3 {
            sums[d] += x[d];
            squares[d] += x[d] * x[d];
        }
        prio_sum += p.value();
    }
    for d in 0..3 {
        let m = sums[d] / n as f64;
        let sd = (squares[d] / n as f64 - m * m).sqrt();
        let want_sd = head.log_std()[d].exp();
        // five standard errors
        assert!(
            (m - mean[d]).abs() < 5.0 * want_sd / (n as f64).sqrt(),
            "dim {d}: mean {m}"
        );
        assert!(
            (sd - want_sd).abs() < 0.005 * want_sd + 5.0 * want_sd / (2.0 * n as f64).sqrt(),
            "dim {d}: sd {sd}"
        );
    }
    // the squashed mean priority lies below sigmoid(mean) for a positive logit mean
    assert!(prio_sum / (n as f64) < sigmoid(0.8));
}

#[test]
fn log_probs_are_consistent_with_sampling() {
    let head = GaussianPolicyHead::new(2, true, 0.5f64.ln()).unwrap();
    let mean = [0.0, 0.2, -0.4];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let (a, lp) = head.sample_action(&mean, &mut rng).unwrap();
        let (again, _) = head.log_prob_and_entropy(&mean, &a).unwrap();
        assert!((lp - again).abs() < 1e-12);
    }
}
