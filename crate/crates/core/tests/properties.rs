use std::sync::Arc;

use fedone_core::estimator::{mbsvrp_estimate, SampleBundle};
use fedone_core::federation::aggregate;
use fedone_core::gumbel::{forward, log_prob_grad, sample_prompt, GumbelNoise, PromptDistribution, PromptSequence};
use fedone_core::oracle::{Batch, Example, HiddenPromptOracle, LossOracle, MeteredOracle, QueryLedger};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(n: usize, vocab: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, n * vocab).prop_map(move |v| Array2::from_shape_vec((n, vocab), v).unwrap())
}

fn instance() -> impl Strategy<Value = (Array2<f64>, Array2<f64>, f64)> {
    (1usize..5, 2usize..9).prop_flat_map(|(n, vocab)| {
        (matrix(n, vocab, 1e-3, 10.0), matrix(n, vocab, -3.0, 8.0), 0.05f64..5.0)
    })
}

proptest! {
    #[test]
    fn rows_sum_to_one((alpha, g, tau) in instance()) {
        let dist = PromptDistribution::new(alpha, tau, 1e-3).unwrap();
        let p = forward(&dist, &GumbelNoise::from_matrix(g).unwrap()).unwrap();
        for row in p.values().rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn scaling_a_row_keeps_argmax((alpha, _g, tau) in instance(), c in 0.01f64..100.0) {
        let (n, vocab) = alpha.dim();
        let dist = PromptDistribution::new(alpha.clone(), tau, 1e-6).unwrap();
        let scaled = PromptDistribution::new(alpha * c, tau, 1e-6).unwrap();
        let zero = GumbelNoise::zeros(n, vocab);
        let a = forward(&dist, &zero).unwrap();
        let b = forward(&scaled, &zero).unwrap();
        for i in 0..n {
            let am = |m: &Array2<f64>| (0..vocab).fold(0, |best, j| if m[[i, j]] > m[[i, best]] { j } else { best });
            prop_assert_eq!(am(a.values()), am(b.values()));
            for j in 0..vocab {
                prop_assert!((a.values()[[i, j]] - b.values()[[i, j]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn row_sum_of_gradient_is_consistent((alpha, g, tau) in instance(), seed in any::<u64>()) {
        let dist = PromptDistribution::new(alpha, tau, 1e-3).unwrap();
        let p = forward(&dist, &GumbelNoise::from_matrix(g).unwrap()).unwrap();
        let prompt = sample_prompt(&p, &mut ChaCha8Rng::seed_from_u64(seed));
        let grad = log_prob_grad(&p, &dist, &prompt);
        for (i, &ji) in prompt.indices().iter().enumerate() {
            let a = dist.alpha();
            let pv = p.values();
            let expected = (1.0 - pv[[i, ji]]) / (tau * a[[i, ji]])
                - (0..a.ncols()).filter(|&j| j != ji).map(|j| pv[[i, j]] / (tau * a[[i, j]])).sum::<f64>();
            prop_assert!((grad.row(i).sum() - expected).abs() <= 1e-9 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn floor_holds_after_any_update((alpha, _g, tau) in instance(), nu in 1e-4f64..0.5) {
        let dist = PromptDistribution::new(alpha.clone() - 3.0, tau, nu).unwrap();
        prop_assert!(dist.alpha().iter().all(|v| *v >= nu));
        let other = PromptDistribution::new(alpha, tau, nu).unwrap();
        let mean = aggregate(&[dist, other]).unwrap();
        prop_assert!(mean.alpha().iter().all(|v| *v >= nu));
    }

    #[test]
    fn baseline_shift_leaves_estimate_unchanged(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = PromptDistribution::uniform(3, 4, 0.8, 1e-3).unwrap();
        let p = forward(&dist, &fedone_core::gumbel::sample_gumbel(3, 4, &mut rng)).unwrap();
        let prompts: Vec<PromptSequence> = (0..4).map(|_| sample_prompt(&p, &mut rng)).collect();
        // dyadic losses keep the shifted mean exact in floating point
        let losses: Vec<f64> = (0..4).map(|k| k as f64 * 0.25).collect();
        let shift = (shift * 8.0).round() / 8.0;
        let shifted: Vec<f64> = losses.iter().map(|l| l + shift).collect();
        let a = mbsvrp_estimate(&SampleBundle::new(prompts.clone(), losses).unwrap(), &p, &dist).unwrap();
        let b = mbsvrp_estimate(&SampleBundle::new(prompts, shifted).unwrap(), &p, &dist).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_seed_deterministic((alpha, g, tau) in instance(), seed in any::<u64>()) {
        let dist = PromptDistribution::new(alpha, tau, 1e-3).unwrap();
        let p = forward(&dist, &GumbelNoise::from_matrix(g).unwrap()).unwrap();
        let a = sample_prompt(&p, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = sample_prompt(&p, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&a, &b);
        prop_assert!(a.indices().iter().all(|&j| j < dist.vocab_size()));
    }

    #[test]
    fn clipped_losses_never_exceed_bound(noise in 0.0f64..5.0, clip in 0.1f64..2.0, seed in any::<u64>()) {
        let target = PromptSequence::new(vec![0, 1], 3).unwrap();
        let inner: Arc<dyn LossOracle> = Arc::new(HiddenPromptOracle::new(target, 3, 0.1).unwrap());
        let ledger = Arc::new(QueryLedger::new());
        let oracle = MeteredOracle::new(inner, clip, noise, ledger.clone()).unwrap();
        let batch = Batch::new(vec![Example { input_id: 1, label: 0 }]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 0..20 {
            let prompt = PromptSequence::new(vec![k % 3, (k / 3) % 3], 3).unwrap();
            let v = oracle.evaluate(k % 4, &prompt, &batch, &mut rng).unwrap().value();
            prop_assert!(v.abs() <= clip);
        }
        prop_assert_eq!(ledger.total(), 20);
        prop_assert!(ledger.snapshot().reconciles());
    }
}
