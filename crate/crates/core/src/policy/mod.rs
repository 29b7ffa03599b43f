//! The autoregressive policy: model, sampling, scoring, exact gradients,
//! and checkpoint persistence.

mod checkpoint;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{
    sample_from_logits, Init, ModelConfig, PolicyModel, Recorded, Rollout, SampleOptions,
};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            context_len: 24,
        }
    }

    fn tiny_model(seed: u64) -> PolicyModel {
        PolicyModel::new(tiny_cfg(12), Init::Gaussian { std: 0.05 }, seed).unwrap()
    }

    #[test]
    fn next_token_distribution_normalizes() {
        let m = tiny_model(1);
        for prefix in [&[0u32, 1, 2][..], &[3, 3, 3, 4, 5][..]] {
            let lp = m.next_token_logprobs(prefix).unwrap();
            let total: f64 = lp.iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6, "sum {total}");
            assert!(lp.iter().all(|&x| x.is_finite() && x < 0.0 || x == 0.0));
        }
    }

    #[test]
    fn zero_params_give_uniform() {
        let m = PolicyModel::new(tiny_cfg(12), Init::Zeros, 0).unwrap();
        let lp = m.score(&[1, 2], &[3, 4, 5]).unwrap();
        let expect = -(12f64).ln();
        for l in lp {
            assert!((l - expect).abs() < 1e-12, "{l} vs {expect}");
        }
    }

    #[test]
    fn single_token_continuations_normalize() {
        let m = tiny_model(2);
        let mut total = 0.0;
        for t in 0..12u32 {
            let lp = m.score(&[0, 1, 2], &[t]).unwrap();
            total += lp[0].exp();
        }
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sampling_is_deterministic_and_rescorable() {
        let m = tiny_model(3);
        let opts = SampleOptions {
            temperature: 0.9,
            max_new_tokens: 10,
            seed: 77,
            greedy: false,
            eos: 0,
        };
        let a = m.sample(&[1, 2, 3], &opts).unwrap();
        let b = m.sample(&[1, 2, 3], &opts).unwrap();
        assert_eq!(a, b);
        let rescored = m.score(&a.prompt_ids, &a.generated_ids).unwrap();
        for (r, s) in rescored.iter().zip(&a.per_token_logprob) {
            assert!((r - s).abs() < 1e-9);
        }
    }

    #[test]
    fn greedy_is_deterministic_without_seed() {
        let m = tiny_model(4);
        let mk = |seed| {
            m.sample(
                &[2, 5],
                &SampleOptions {
                    temperature: 1.0,
                    max_new_tokens: 8,
                    seed,
                    greedy: true,
                    eos: 0,
                },
            )
            .unwrap()
        };
        assert_eq!(mk(1).generated_ids, mk(999).generated_ids);
    }

    #[test]
    fn sample_from_logits_matches_analytic_softmax() {
        // fixed 3-token distribution 0.2 / 0.3 / 0.5 at temperature 1
        let logits = [0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_from_logits(&logits, 1.0, &mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip([0.2, 0.3, 0.5]) {
            let freq = *c as f64 / n as f64;
            assert!((freq - p).abs() < 0.01, "freq {freq} vs {p}");
        }
    }

    #[test]
    fn clone_is_frozen() {
        let mut m = tiny_model(6);
        let frozen = m.clone_frozen();
        let before = frozen.score(&[1, 2], &[3, 4]).unwrap();
        let grad = vec![0.01; m.n_params()];
        m.apply_gradient(&grad, 1.0).unwrap();
        let after_frozen = frozen.score(&[1, 2], &[3, 4]).unwrap();
        let after_src = m.score(&[1, 2], &[3, 4]).unwrap();
        assert_eq!(before, after_frozen);
        assert_ne!(before, after_src);
        // clone of clone equals clone
        assert_eq!(frozen.clone_frozen().params, frozen.params);
    }

    #[test]
    fn prompt_exceeding_context_is_input_error() {
        let m = tiny_model(7);
        let long = vec![1u32; 30];
        assert!(m.score(&long, &[1]).is_err());
        assert!(m
            .sample(
                &long,
                &SampleOptions {
                    temperature: 1.0,
                    max_new_tokens: 1,
                    seed: 0,
                    greedy: true,
                    eos: 0
                }
            )
            .is_err());
        assert!(m.score(&[1], &[99]).is_err());
    }

    /// Central finite-difference oracle for d loss / d params, where
    /// loss = -sum(per_token_logprob) of a fixed sequence.
    fn fd_nll_grad_at(m: &PolicyModel, prompt: &[u32], gen: &[u32], idx: usize, h: f64) -> f64 {
        let mut plus = m.clone();
        plus.params[idx] += h;
        let mut minus = m.clone();
        minus.params[idx] -= h;
        let lp = |mm: &PolicyModel| -mm.score(prompt, gen).unwrap().iter().sum::<f64>();
        (lp(&plus) - lp(&minus)) / (2.0 * h)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = tiny_model(8);
        assert!(m.n_params() <= 5000, "instance too big: {}", m.n_params());
        let prompt = [1u32, 4, 7, 2];
        let gen = [3u32, 9, 0, 5, 5];
        let rec = m.score_recorded(&prompt, &gen).unwrap();
        let d_logp = vec![-1.0; gen.len()]; // loss = -sum logp
        let grad = rec.backward(&d_logp).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 50 {
            let idx = rng.gen_range(0..m.n_params());
            let fd = fd_nll_grad_at(&m, &prompt, &gen, idx, 1e-4);
            let an = grad[idx];
            let denom = fd.abs().max(an.abs());
            if denom < 1e-8 {
                continue; // parameter not touched by this sequence
            }
            let rel = (fd - an).abs() / denom;
            assert!(rel <= 1e-4, "param {idx}: fd={fd} analytic={an} rel={rel}");
            checked += 1;
        }
    }

    #[test]
    fn zero_weight_backward_is_zero() {
        let m = tiny_model(9);
        let rec = m.score_recorded(&[1, 2], &[3, 4]).unwrap();
        let grad = rec.backward(&[0.0, 0.0]).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn recorded_matches_plain_score() {
        let m = tiny_model(10);
        let plain = m.score(&[1, 2, 3], &[4, 5, 6, 7]).unwrap();
        let rec = m.score_recorded(&[1, 2, 3], &[4, 5, 6, 7]).unwrap();
        assert_eq!(plain, rec.per_token_logprob().to_vec());
    }

    #[test]
    fn named_segments_cover_all_params() {
        let m = tiny_model(12);
        let segs = m.named_segments();
        let covered: usize = segs.iter().map(|(_, r)| r.len()).sum();
        assert_eq!(covered, m.n_params());
        assert_eq!(segs.last().unwrap().1.end, m.n_params());
    }
}
