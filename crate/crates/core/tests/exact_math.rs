mod common;

use bima_core::eval::recall_at_k;
use bima_core::matching::{infonce_loss, wti_with_weights};
use bima_core::nn::{Activation, ParamStore};
use bima_core::scene_elements::{aggregate, balance_coefficient};
use bima_core::textual_debias::{kl_loss, latent, reparameterize, GaussianPosterior};
use bima_core::visual_debias::{Reduction, TokenDecoder};
use candle_core::{DType, Device, Tensor};
use common::*;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn balance_coefficient_hand_cases() {
    let a = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    assert_eq!(balance_coefficient(a.view(), a.view()).unwrap(), 0.0);
    let e_orth = array![[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]];
    assert_eq!(balance_coefficient(a.view(), e_orth.view()).unwrap(), 1.0);
    // max cosines 0.5 and 0.6
    let e = array![[0.5, 0.0, 0.75f64.sqrt()], [0.0, 0.6, 0.8]];
    let g = balance_coefficient(a.view(), e.view()).unwrap();
    assert!((g - 0.45).abs() < 1e-12, "g = {g}");
    let c = aggregate(array![[1.0, 0.0]].view(), array![[0.0, 1.0]].view(), 0.45).unwrap();
    assert_eq!(c.c, array![[1.0, 0.45]]);
}

#[test]
fn infonce_hand_cases() {
    let one = t1(&[1.0]);
    assert_eq!(scalar(&infonce_loss(&t2(&[vec![0.7]]), &one).unwrap()), 0.0);
    for b in [2usize, 5, 9] {
        let s = t2(&vec![vec![0.3; b]; b]);
        let l = scalar(&infonce_loss(&s, &t1(&[7.0])).unwrap());
        assert!((l - (b as f64).ln()).abs() < 1e-12);
    }
    let l = scalar(&infonce_loss(&t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]), &one).unwrap());
    let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
    assert!((l - 0.3133).abs() < 1e-4 && (l - expected).abs() < 1e-12, "loss = {l}");
}

#[test]
fn kl_hand_cases() {
    let post = |mu: &[f64], lv: &[f64]| GaussianPosterior {
        mu: t2(&[mu.to_vec()]),
        log_var: t2(&[lv.to_vec()]),
    };
    assert_eq!(scalar(&kl_loss(&post(&[0.0, 0.0], &[0.0, 0.0])).unwrap()), 0.0);
    assert!((scalar(&kl_loss(&post(&[1.0], &[0.0])).unwrap()) - 0.5).abs() < 1e-9);
}

#[test]
fn reparameterization_is_exact() {
    let post = GaussianPosterior {
        mu: t2(&[vec![1.0, 2.0]]),
        log_var: t2(&[vec![0.0, 4f64.ln()]]),
    };
    let s = reparameterize(&post, &t2(&[vec![1.0, -1.0]])).unwrap();
    assert_eq!(s.to_vec2::<f64>().unwrap(), vec![vec![2.0, 0.0]]);
    let zero = reparameterize(&post, &t2(&[vec![0.0, 0.0]])).unwrap();
    assert_eq!(zero.to_vec2::<f64>().unwrap(), vec![vec![1.0, 2.0]]);
    let unit = GaussianPosterior {
        mu: t2(&[vec![0.0, 0.0]]),
        log_var: t2(&[vec![0.0, 0.0]]),
    };
    let e1 = reparameterize(&unit, &t2(&[vec![1.0, 0.0]])).unwrap();
    assert_eq!(e1.to_vec2::<f64>().unwrap(), vec![vec![1.0, 0.0]]);
    let content = t3(&[vec![vec![0.5, -1.0], vec![0.0, 0.25]]]);
    let z = latent(&content, &zero).unwrap();
    assert_eq!(
        z.to_vec3::<f64>().unwrap(),
        vec![vec![vec![1.5, 1.0], vec![1.0, 2.25]]]
    );
}

fn decoder(store: &mut ParamStore, vocab: usize, len: usize, d: usize) -> TokenDecoder {
    TokenDecoder::new(store, "dec", vocab, len, d, 1, 1, d, Activation::Gelu, 0.5).unwrap()
}

#[test]
fn uniform_logits_give_log_vocab() {
    let v = 50;
    let mut store = ParamStore::new(DType::F64, 4);
    let dec = decoder(&mut store, v, 6, 8);
    store.set_values("dec.lm_head.weight", &[v, 8], &vec![0.0; v * 8]).unwrap();
    store.set_values("dec.lm_head.bias", &[v], &vec![0.0; v]).unwrap();
    let ids = Tensor::new(&[[1u32, 7, 9, 2, 0, 0], [1, 4, 2, 0, 0, 0]], &Device::Cpu).unwrap();
    let mask = t2(&[vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]]);
    let memory = Tensor::randn(0f64, 1.0, (2, 3, 8), &Device::Cpu).unwrap();
    for r in [Reduction::Mean, Reduction::Sum] {
        let l = scalar(&dec.loss(&ids, &mask, &memory, None, r).unwrap().loss);
        let expected = match r {
            Reduction::Mean => (v as f64).ln(),
            // 3 and 2 targets
            Reduction::Sum => 2.5 * (v as f64).ln(),
        };
        assert!((l - expected).abs() < 1e-6, "{r:?}: {l}");
    }
}

#[test]
fn confident_logits_give_near_zero_loss() {
    let mut store = ParamStore::new(DType::F64, 4);
    let dec = decoder(&mut store, 3, 3, 2);
    // bias strongly favours token 2 everywhere
    store.set_values("dec.lm_head.weight", &[3, 2], &[0.0; 6]).unwrap();
    store.set_values("dec.lm_head.bias", &[3], &[0.0, 0.0, 60.0]).unwrap();
    let ids = Tensor::new(&[[1u32, 2, 2]], &Device::Cpu).unwrap();
    let mask = t2(&[vec![1.0, 1.0, 1.0]]);
    let memory = t3(&[vec![vec![0.3, -0.2]]]);
    let l = scalar(&dec.loss(&ids, &mask, &memory, None, Reduction::Mean).unwrap().loss);
    assert!(l < 1e-20);
}

#[test]
fn tiny_decoder_matches_manual_rollout() {
    let mut store = ParamStore::new(DType::F64, 11);
    let dec = decoder(&mut store, 3, 4, 2);
    let memory = vec![vec![0.4, -1.1], vec![0.9, 0.2]];
    for ids in [[1u32, 2, 0, 2], [0, 0, 1, 1]] {
        let t_ids = Tensor::new(&[ids], &Device::Cpu).unwrap();
        let mask = t2(&[vec![1.0; 4]]);
        let got = scalar(
            &dec.loss(&t_ids, &mask, &t3(&[memory.clone()]), None, Reduction::Mean)
                .unwrap()
                .loss,
        );
        let want = decoder_rollout_loss(&store, "dec", &ids, &memory);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn wti_two_by_two_hand_case() {
    let text = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
    let video = vec![vec![0.0, 2.0], vec![3.0, 1.0]];
    let s = wti_with_weights(
        &t3(&[text.clone()]),
        &t2(&[vec![1.0, 1.0]]),
        &t3(&[video.clone()]),
        &t2(&[vec![0.5, 0.5]]),
        &t2(&[vec![0.5, 0.5]]),
    )
    .unwrap();
    let got = s.to_vec2::<f64>().unwrap()[0][0];
    let want = wti_oracle(&text, &video, &[0.5, 0.5], &[0.5, 0.5]);
    assert!((got - want).abs() < 1e-12);
    // by hand: token maxima 3/√10 and 4/√20, frame maxima 1/√2 and 3/√10
    let by_hand = 0.5 * (0.5 * (3.0 / 10f64.sqrt() + 4.0 / 20f64.sqrt()) + 0.5 * (0.5f64.sqrt() + 3.0 / 10f64.sqrt()));
    assert!((got - by_hand).abs() < 1e-12);
}

#[test]
fn recall_matches_brute_force_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for case in 0..200 {
        let s: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                (0..20)
                    .map(|_| {
                        if case % 2 == 0 {
                            rng.random::<f64>()
                        } else {
                            // coarse values to exercise ties
                            rng.random_range(0..4) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let arr = Array2::from_shape_vec((20, 20), s.iter().flatten().copied().collect()).unwrap();
        let (t2v, v2t) = recall_at_k(&arr).unwrap();
        let st = transpose(&s);
        for (k, got_t, got_v) in [(1, t2v.r1, v2t.r1), (5, t2v.r5, v2t.r5), (10, t2v.r10, v2t.r10)] {
            assert_eq!(got_t, brute_force_recall(&s, k));
            assert_eq!(got_v, brute_force_recall(&st, k));
        }
    }
}

#[allow(dead_code)]
pub fn suite() -> Vec<(&'static str, fn())> {
    vec![
        ("balance_coefficient_hand_cases", balance_coefficient_hand_cases),
        ("infonce_hand_cases", infonce_hand_cases),
        ("kl_hand_cases", kl_hand_cases),
        ("reparameterization_is_exact", reparameterization_is_exact),
        ("uniform_logits_give_log_vocab", uniform_logits_give_log_vocab),
        ("confident_logits_give_near_zero_loss", confident_logits_give_near_zero_loss),
        ("tiny_decoder_matches_manual_rollout", tiny_decoder_matches_manual_rollout),
        ("wti_two_by_two_hand_case", wti_two_by_two_hand_case),
        ("recall_matches_brute_force_on_random_matrices", recall_matches_brute_force_on_random_matrices),
    ]
}
