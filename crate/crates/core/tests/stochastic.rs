//! Seeded Monte Carlo checks of the Gaussian posterior.

mod common;

use bima_core::encoders::EncodedText;
use bima_core::nn::ParamStore;
use bima_core::textual_debias::{kl_loss, reparameterize, standard_normal_like, GaussianPosterior, Noise, TextualDebias};
use candle_core::{DType, Tensor};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const N: usize = 100_000;

fn posterior(n: usize) -> GaussianPosterior {
    let mu = [0.8, -0.5, 1.5];
    let lv = [0.3, -0.7, 0.0];
    GaussianPosterior {
        mu: t2(&vec![mu.to_vec(); n]),
        log_var: t2(&vec![lv.to_vec(); n]),
    }
}

fn draws(seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let post = posterior(N);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = standard_normal_like(&post.mu, &mut rng).unwrap();
    let x = reparameterize(&post, &eps).unwrap();
    (x.to_vec2::<f64>().unwrap(), eps.to_vec2::<f64>().unwrap())
}

#[test]
fn monte_carlo_kl_agrees_with_closed_form() {
    let closed = scalar(&kl_loss(&posterior(1)).unwrap());
    let lv = [0.3, -0.7, 0.0];
    let (x, eps) = draws(1);
    // log q(x) − log p(x) per sample
    let est = x
        .iter()
        .zip(&eps)
        .map(|(xr, er)| {
            (0..3)
                .map(|j| -0.5 * lv[j] - 0.5 * er[j] * er[j] + 0.5 * xr[j] * xr[j])
                .sum::<f64>()
        })
        .sum::<f64>()
        / N as f64;
    assert!((est - closed).abs() < 0.01 * closed, "MC {est} vs closed form {closed}");
}

#[test]
fn sample_moments_match_the_posterior() {
    let mu = [0.8, -0.5, 1.5];
    let lv: [f64; 3] = [0.3, -0.7, 0.0];
    let (x, _) = draws(2);
    for j in 0..3 {
        let var = lv[j].exp();
        let mean = x.iter().map(|r| r[j]).sum::<f64>() / N as f64;
        let s2 = x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (N - 1) as f64;
        let se_mean = (var / N as f64).sqrt();
        let se_var = var * (2.0 / (N - 1) as f64).sqrt();
        assert!((mean - mu[j]).abs() < 3.0 * se_mean, "dim {j}: mean {mean}");
        assert!((s2 - var).abs() < 3.0 * se_var, "dim {j}: var {s2} vs {var}");
    }
}

#[test]
fn k_samples_are_seeded_and_distinct() {
    let mut store = ParamStore::new(DType::F64, 3);
    let td = TextualDebias::new(&mut store, "bias", 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens = Tensor::randn(0f64, 1.0, (2, 3, 4), &candle_core::Device::Cpu).unwrap();
    let et = EncodedText {
        tokens,
        cls: standard_normal_like(&t2(&[vec![0.0; 4], vec![0.0; 4]]), &mut rng).unwrap(),
        mask: t2(&[vec![1.0; 3], vec![1.0; 3]]),
    };
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        td.decompose(&et, 3, Noise::Rng(&mut rng))
            .unwrap()
            .samples
            .iter()
            .map(|s| s.to_vec2::<f64>().unwrap())
            .collect::<Vec<_>>()
    };
    let a = run(9);
    assert_eq!(a.len(), 3);
    assert_eq!(a, run(9));
    assert_ne!(a, run(10));
    assert_ne!(a[0], a[1]);
    assert_ne!(a[1], a[2]);
}

#[allow(dead_code)]
pub fn suite() -> Vec<(&'static str, fn())> {
    vec![
        ("monte_carlo_kl_agrees_with_closed_form", monte_carlo_kl_agrees_with_closed_form),
        ("sample_moments_match_the_posterior", sample_moments_match_the_posterior),
        ("k_samples_are_seeded_and_distinct", k_samples_are_seeded_and_distinct),
    ]
}
