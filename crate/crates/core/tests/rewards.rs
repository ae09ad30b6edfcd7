use std::f64::consts::TAU;

use priocomm_core::env::{coverage_reward, formation_reward, EnvConfig, Environment, Vec2, WorldState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn state(positions: Vec<Vec2>, landmarks: Vec<Vec2>) -> WorldState {
    WorldState {
        velocities: vec![[0.0; 2]; positions.len()],
        positions,
        landmarks,
        step: 0,
    }
}

fn random_state(rng: &mut ChaCha8Rng, n: usize, m: usize) -> WorldState {
    let pt = |rng: &mut ChaCha8Rng| [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
    let positions = (0..n).map(|_| pt(rng)).collect();
    let landmarks = (0..m).map(|_| pt(rng)).collect();
    state(positions, landmarks)
}

fn brute_coverage(s: &WorldState) -> f64 {
    let mut total = 0.0;
    for l in &s.landmarks {
        let mut best = f64::INFINITY;
        for p in &s.positions {
            let d = ((l[0] - p[0]).powi(2) + (l[1] - p[1]).powi(2)).sqrt();
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    -total / s.landmarks.len() as f64
}

/// For each agent, the counter-clockwise angle to its nearest neighbour in
/// angle (the full turn when it is alone), computed without sorting.
fn brute_formation(s: &WorldState, radius: f64, w: f64) -> f64 {
    let c = s.landmarks[0];
    let n = s.positions.len();
    let angle = |p: Vec2| {
        if p == c {
            0.0
        } else {
            (p[1] - c[1]).atan2(p[0] - c[0]).rem_euclid(TAU)
        }
    };
    let angles: Vec<f64> = s.positions.iter().map(|&p| angle(p)).collect();
    let mut radial = 0.0;
    let mut angular = 0.0;
    for i in 0..n {
        let p = s.positions[i];
        radial += (((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() - radius).abs();
        // ties are broken by index so coincident angles produce one zero gap each
        let mut gap = TAU;
        for j in 0..n {
            if j == i {
                continue;
            }
            let mut d = angles[j] - angles[i];
            if d < 0.0 || (d == 0.0 && j < i) {
                d += TAU;
            }
            gap = gap.min(d);
        }
        angular += (gap - TAU / n as f64).abs();
    }
    -radial / n as f64 - w * angular / n as f64
}

#[test]
fn coverage_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let m = rng.gen_range(1..=8);
        let s = random_state(&mut rng, n, m);
        assert!((coverage_reward(&s) - brute_coverage(&s)).abs() < 1e-12);
    }
}

#[test]
fn formation_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let s = random_state(&mut rng, n, 1);
        let w = rng.gen_range(0.0..2.0);
        let got = formation_reward(&s, 0.5, w);
        let want = brute_formation(&s, 0.5, w);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn coverage_examples() {
    let s = state(vec![[0.0, 0.0], [1.0, 1.0]], vec![[0.0, 0.0], [1.0, 1.0]]);
    assert_eq!(coverage_reward(&s), 0.0);
    let s = state(vec![[0.0, 0.0]], vec![[3.0, 4.0]]);
    assert_eq!(coverage_reward(&s), -5.0);
}

#[test]
fn regular_polygon_is_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 2..=8 {
        for _ in 0..50 {
            let rot = rng.gen_range(0.0..TAU);
            let c = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let positions = (0..n)
                .map(|k| {
                    let a = rot + TAU * k as f64 / n as f64;
                    [c[0] + 0.5 * a.cos(), c[1] + 0.5 * a.sin()]
                })
                .collect();
            let s = state(positions, vec![c]);
            assert!(formation_reward(&s, 0.5, 1.0).abs() < 1e-12, "n={n}");
        }
    }
}

#[test]
fn episode_ends_exactly_at_length() {
    for len in [1, 7, 50] {
        let mut env = Environment::new(EnvConfig {
            episode_length: len,
            ..EnvConfig::coverage(2, 2)
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        env.reset(&mut rng);
        for t in 1..=len {
            let out = env.step(&[[0.3, -0.2], [1.0, 1.0]], &mut rng).unwrap();
            assert_eq!(out.done, t == len);
        }
        assert!(env.step(&[[0.0; 2]; 2], &mut rng).is_err());
    }
}

proptest! {
    #[test]
    fn rewards_are_non_positive_and_translation_invariant(
        pts in prop::collection::vec((-1.5f64..1.5, -1.5f64..1.5), 2..12),
        shift in (-0.5f64..0.5, -0.5f64..0.5),
        split in 1usize..6,
    ) {
        let k = split.min(pts.len() - 1);
        let landmarks: Vec<Vec2> = pts[..k].iter().map(|p| [p.0, p.1]).collect();
        let positions: Vec<Vec2> = pts[k..].iter().map(|p| [p.0, p.1]).collect();
        let moved = |v: &[Vec2]| v.iter().map(|p| [p[0] + shift.0, p[1] + shift.1]).collect::<Vec<_>>();
        let a = state(positions.clone(), landmarks.clone());
        let b = state(moved(&positions), moved(&landmarks));
        prop_assert!(coverage_reward(&a) <= 0.0);
        prop_assert!((coverage_reward(&a) - coverage_reward(&b)).abs() < 1e-12);
        let fa = state(positions.clone(), landmarks[..1].to_vec());
        let fb = state(moved(&positions), moved(&landmarks[..1]));
        prop_assert!(formation_reward(&fa, 0.5, 1.0) <= 0.0);
        prop_assert!((formation_reward(&fa, 0.5, 1.0) - formation_reward(&fb, 0.5, 1.0)).abs() < 1e-9);
    }
}
