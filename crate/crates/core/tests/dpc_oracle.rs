//! Pruning scores and selections against a direct brute-force computation.

use ftpose::dpc::{self, DpcConfig};
use ftpose::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Reference {
    rho: Vec<f64>,
    delta: Vec<f64>,
    score: Vec<f64>,
    kept: Vec<usize>,
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

fn reference(x: &Tensor, k: usize, tau: f64, eps: usize) -> Reference {
    let n = x.rows();
    let mut rho = vec![1.0; n];
    for i in 0..n {
        let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq(x.row(i), x.row(j))).collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k_eff = k.min(n - 1);
        if k_eff > 0 {
            let mut s = 0.0;
            for v in &d[..k_eff] {
                s += v;
            }
            rho[i] = (-(s / k_eff as f64) / tau).exp();
        }
    }
    let mut delta = vec![0.0; n];
    for i in 0..n {
        let mut best: Option<f64> = None;
        let mut far = 0.0f64;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = sq(x.row(i), x.row(j)).sqrt();
            far = far.max(d);
            let higher = rho[j] > rho[i] || (rho[j] == rho[i] && j < i);
            if higher && best.is_none_or(|b| d < b) {
                best = Some(d);
            }
        }
        delta[i] = best.unwrap_or(far);
    }
    let score: Vec<f64> = (0..n).map(|i| rho[i] * delta[i]).collect();
    // selection by repeated arg-max
    let keep = std::cmp::max(1, n / eps);
    let mut taken = vec![false; n];
    for _ in 0..keep {
        let mut best = None;
        for i in 0..n {
            if !taken[i] && best.is_none_or(|b: usize| score[i] > score[b]) {
                best = Some(i);
            }
        }
        taken[best.unwrap()] = true;
    }
    let kept = (0..n).filter(|&i| taken[i]).collect();
    Reference { rho, delta, score, kept }
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()))
}

fn random_set(rng: &mut ChaCha8Rng) -> (Tensor, DpcConfig) {
    let n = rng.random_range(1..=64);
    let c = rng.random_range(1..=8);
    // a quarter of the sets use a coarse lattice so that ties are common
    let coarse = rng.random_bool(0.25);
    let data = (0..n * c)
        .map(|_| {
            if coarse {
                rng.random_range(0..3) as f64
            } else {
                rng.random_range(-2.0..2.0)
            }
        })
        .collect();
    let cfg = DpcConfig {
        k: rng.random_range(1..=8),
        tau: if rng.random_bool(0.5) { Some(1.0) } else { None },
        epsilon: rng.random_range(1..=10),
    };
    (Tensor::new(vec![n, c], data).unwrap(), cfg)
}

#[test]
fn matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..400 {
        let (x, cfg) = random_set(&mut rng);
        let r = reference(&x, cfg.k, cfg.resolved_tau(x.cols()), cfg.epsilon);
        let (s, sel) = dpc::prune(&x, &cfg).unwrap();
        assert!(close(&s.rho, &r.rho), "case {case}: rho");
        assert!(close(&s.delta, &r.delta), "case {case}: delta");
        assert!(close(&s.score, &r.score), "case {case}: score");
        assert_eq!(sel.kept, r.kept, "case {case}: selection");
    }
}

#[test]
fn separate_entry_points_agree_with_prune() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (x, cfg) = random_set(&mut rng);
        let (s, _) = dpc::prune(&x, &cfg).unwrap();
        let rho = dpc::local_density(&x, &cfg).unwrap();
        assert_eq!(rho, s.rho);
        assert_eq!(dpc::delta_distance(&x, &rho).unwrap(), s.delta);
    }
}

#[test]
fn empty_set_cannot_be_built() {
    assert!(Tensor::new(vec![0, 4], vec![]).is_err());
}
