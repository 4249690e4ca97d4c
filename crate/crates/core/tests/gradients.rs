//! Score-function gradients and the variance-reduced estimator checked
//! against reference computations written independently of the library.

use fedone_core::estimator::{exact_policy_gradient, mbsvrp_estimate, SampleBundle};
use fedone_core::gumbel::{forward, log_prob_grad, sample_gumbel, GumbelNoise, PromptDistribution, PromptSequence};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `ln p_i[j]` straight from the definition, with log-sum-exp.
fn ref_log_prob_row(alpha: &[f64], g: &[f64], tau: f64, j: usize) -> f64 {
    let z: Vec<f64> = alpha.iter().zip(g).map(|(a, g)| (a.ln() + g) / tau).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z[j] - lse
}

fn ref_log_prob(alpha: &Array2<f64>, g: &Array2<f64>, tau: f64, prompt: &[usize]) -> f64 {
    prompt
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            ref_log_prob_row(
                alpha.row(i).as_slice().unwrap(),
                g.row(i).as_slice().unwrap(),
                tau,
                j,
            )
        })
        .sum()
}

fn random_instance(rng: &mut ChaCha8Rng, max_n: usize, max_vocab: usize) -> (PromptDistribution, GumbelNoise, PromptSequence) {
    let n = rng.random_range(1..=max_n);
    let vocab = rng.random_range(2..=max_vocab);
    let tau = rng.random_range(0.3..2.0);
    let nu = 1e-3;
    let alpha = Array2::from_shape_fn((n, vocab), |_| rng.random_range(0.05..1.0));
    let dist = PromptDistribution::new(alpha, tau, nu).unwrap();
    let noise = sample_gumbel(n, vocab, rng);
    let prompt = PromptSequence::new((0..n).map(|_| rng.random_range(0..vocab)).collect(), vocab).unwrap();
    (dist, noise, prompt)
}

#[test]
fn log_prob_grad_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (dist, noise, prompt) = random_instance(&mut rng, 4, 8);
        let p = forward(&dist, &noise).unwrap();
        let grad = log_prob_grad(&p, &dist, &prompt);
        let alpha = dist.alpha().clone();
        for ((i, j), &analytic) in grad.indexed_iter() {
            let h = 1e-6;
            let mut up = alpha.clone();
            up[[i, j]] += h;
            let mut down = alpha.clone();
            down[[i, j]] -= h;
            let fd = (ref_log_prob(&up, noise.values(), dist.tau(), prompt.indices())
                - ref_log_prob(&down, noise.values(), dist.tau(), prompt.indices()))
                / (2.0 * h);
            let rel = (analytic - fd).abs() / fd.abs().max(1e-3);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

fn ordered_tuples(count: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|t| {
                (0..count).map(move |k| {
                    let mut t = t.clone();
                    t.push(k);
                    t
                })
            })
            .collect();
    }
    out
}

#[test]
fn estimator_expectation_equals_exact_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, vocab) = (2, 3);
    let alpha = Array2::from_shape_fn((n, vocab), |_| rng.random_range(0.1..1.0));
    let dist = PromptDistribution::new(alpha, 0.7, 1e-3).unwrap();
    let noise = sample_gumbel(n, vocab, &mut rng);
    let p = forward(&dist, &noise).unwrap();
    let table: Vec<f64> = (0..vocab * vocab).map(|_| rng.random()).collect();
    let loss = |s: &PromptSequence| table[s.indices()[0] * vocab + s.indices()[1]];

    let prompts: Vec<PromptSequence> = ordered_tuples(vocab, n)
        .into_iter()
        .map(|t| PromptSequence::new(t, vocab).unwrap())
        .collect();
    assert_eq!(prompts.len(), 9);

    for samples in [2usize, 3] {
        let mut expectation = Array2::<f64>::zeros((n, vocab));
        let tuples = ordered_tuples(prompts.len(), samples);
        assert_eq!(tuples.len(), 9usize.pow(samples as u32));
        for t in tuples {
            let chosen: Vec<PromptSequence> = t.iter().map(|&k| prompts[k].clone()).collect();
            let weight: f64 = chosen.iter().map(|s| p.sequence_prob(s)).product();
            let losses = chosen.iter().map(loss).collect();
            let est = mbsvrp_estimate(&SampleBundle::new(chosen, losses).unwrap(), &p, &dist).unwrap();
            expectation.scaled_add(weight, est.values());
        }

        // reference: finite differences of Σ_Φ ℓ(Φ) P(Φ) with the noise fixed
        let expected_loss = |a: &Array2<f64>| -> f64 {
            prompts
                .iter()
                .map(|s| loss(s) * ref_log_prob(a, noise.values(), dist.tau(), s.indices()).exp())
                .sum()
        };
        let exact = exact_policy_gradient(&dist, &noise, loss).unwrap();
        for ((i, j), &e) in expectation.indexed_iter() {
            assert!((e - exact.values()[[i, j]]).abs() < 1e-10, "I={samples} entry ({i},{j})");
            let h = 1e-6;
            let mut up = dist.alpha().clone();
            up[[i, j]] += h;
            let mut down = dist.alpha().clone();
            down[[i, j]] -= h;
            let fd = (expected_loss(&up) - expected_loss(&down)) / (2.0 * h);
            assert!((e - fd).abs() < 1e-6, "finite difference mismatch at ({i},{j}): {e} vs {fd}");
        }
    }
}

#[test]
fn estimator_variance_within_lemma_bound() {
    // α pinned at or near the floor to make the bound as tight as possible
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let nu = 0.05;
    let n = 2;
    for (vocab, samples) in [(2usize, 2usize), (4, 4), (8, 3)] {
        let tau = 0.5;
        let alpha = Array2::from_shape_fn((n, vocab), |_| {
            if rng.random::<bool>() {
                nu
            } else {
                rng.random_range(nu..2.0 * nu)
            }
        });
        let dist = PromptDistribution::new(alpha, tau, nu).unwrap();
        let noise = sample_gumbel(n, vocab, &mut rng);
        let p = forward(&dist, &noise).unwrap();
        let table: Vec<f64> = (0..vocab * vocab).map(|_| if rng.random() { 1.0 } else { 0.0 }).collect();
        let loss = |s: &PromptSequence| table[s.indices()[0] * vocab + s.indices()[1]];
        let exact = exact_policy_gradient(&dist, &noise, loss).unwrap();
        let reps = 4000;
        let mut per_row = vec![0.0; n];
        for _ in 0..reps {
            let chosen: Vec<PromptSequence> = (0..samples)
                .map(|_| fedone_core::gumbel::sample_prompt(&p, &mut rng))
                .collect();
            let losses = chosen.iter().map(loss).collect();
            let est = mbsvrp_estimate(&SampleBundle::new(chosen, losses).unwrap(), &p, &dist).unwrap();
            let d = est.values() - exact.values();
            for (i, acc) in per_row.iter_mut().enumerate() {
                *acc += d.row(i).dot(&d.row(i));
            }
        }
        let bound = 8.0 * vocab as f64 / (tau * tau * nu * nu * (samples * samples) as f64);
        for acc in per_row {
            assert!(5.0 * acc / reps as f64 <= bound);
        }
    }
}
