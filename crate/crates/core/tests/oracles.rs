mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vaeloop::encoder::PosteriorParams;
use vaeloop::numerics::Tensor;
use vaeloop::objective::kl_gaussian_prior;
use vaeloop::synthesis::sample_prior;

fn posterior(mu: Vec<f64>, log_var: Vec<f64>) -> PosteriorParams {
    let d = mu.len();
    PosteriorParams {
        mu: Tensor::new(&[d], mu).unwrap(),
        log_var: Tensor::new(&[d], log_var).unwrap(),
    }
}

#[test]
fn kl_matches_monte_carlo() {
    let mu = vec![0.3, -1.2, 0.05, 0.8];
    let log_var = vec![-0.5, 0.4, -1.5, 0.0];
    let closed = kl_gaussian_prior(&posterior(mu.clone(), log_var.clone()));
    let mc = kl_monte_carlo(&mu, &log_var, 1_000_000, 11);
    assert!((closed - mc).abs() / closed < 0.01, "closed {closed} mc {mc}");
}

#[test]
fn kl_of_standard_normal_is_exactly_zero() {
    assert_eq!(kl_gaussian_prior(&posterior(vec![0.0; 4], vec![0.0; 4])), 0.0);
}

#[test]
fn unit_prior_has_unit_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 6;
    let n = 100_000;
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for _ in 0..n {
        let z = sample_prior(d, 1.0, &mut rng).unwrap();
        for (i, v) in z.z.data().iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    for i in 0..d {
        let mean = sum[i] / n as f64;
        let var = (sq[i] - n as f64 * mean * mean) / (n as f64 - 1.0);
        assert!((var - 1.0).abs() < 0.05, "coordinate {i} variance {var}");
    }
}

#[test]
fn pitch_level_is_linearly_recoverable() {
    let fit = small_corpus(400, 21);
    let fresh = small_corpus(400, 22);
    let r2 = probe_r_squared(&fit, &fresh);
    assert!(r2 > 0.9, "R² {r2}");
}

proptest! {
    #[test]
    fn buffer_shift_drops_oldest_column(c in shift_case()) {
        prop_assert_eq!(check_shift(&c), Ok(()));
    }
}
