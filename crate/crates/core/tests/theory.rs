use fedone_core::theory::{
    convergence_bound, convergence_bound_with, min_iterations, query_cost, smoothness_l, BoundForm, TheoryParams,
};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = TheoryParams> {
    (
        (0.1f64..5.0, 2.0f64..50.0, 1.0f64..10.0, 0.1f64..3.0, 0.01f64..0.5),
        (1.0f64..5.0, 0.01f64..5.0, 0.01f64..10.0, 0.01f64..1.0, 1.0f64..100.0),
    )
        .prop_map(|((g, vocab, n, tau, nu), (e, s_psi, s_alpha, eps, c))| TheoryParams {
            loss_bound: g,
            vocab_size: vocab,
            prompt_len: n,
            tau,
            nu,
            epochs: e,
            sigma_psi_sq: s_psi,
            lambda: 1.0,
            epsilon: eps,
            queries_per_iteration: c,
            batch_size: 8.0,
            prompt_samples: 4.0,
            learning_rate: 1e-3,
            k_star: 1.0,
            sigma_alpha_sq_override: Some(s_alpha),
        })
}

proptest! {
    #[test]
    fn query_cost_increases_with_activated_clients(p in params()) {
        let mut prev = query_cost(&p, 1.0).queries;
        for k in 2..=1000 {
            let q = query_cost(&p, k as f64).queries;
            prop_assert!(q > prev, "Q({k}) = {q} <= Q({}) = {prev}", k - 1);
            prev = q;
        }
    }

    #[test]
    fn query_cost_equals_queries_times_iterations(p in params(), k in 1usize..200) {
        let p = TheoryParams { k_star: k as f64, ..p };
        let direct = p.queries_per_iteration * min_iterations(&p) * k as f64;
        let q = query_cost(&p, k as f64).queries;
        prop_assert!((q - direct).abs() <= 1e-9 * q);
    }

    #[test]
    fn bound_decreases_in_clients_batch_and_samples(p in params(), k in 1.0f64..50.0, b in 1.0f64..64.0, i in 2.0f64..16.0) {
        let l = smoothness_l(&p);
        let p = TheoryParams { learning_rate: 0.5 / l, k_star: k, batch_size: b, prompt_samples: i, ..p };
        for form in [BoundForm::Simplified, BoundForm::Tight] {
            let base = convergence_bound_with(&p, 1e4, form).unwrap();
            let more_k = convergence_bound_with(&TheoryParams { k_star: k + 1.0, ..p }, 1e4, form).unwrap();
            let more_b = convergence_bound_with(&TheoryParams { batch_size: b + 1.0, ..p }, 1e4, form).unwrap();
            let more_i = convergence_bound_with(&TheoryParams { prompt_samples: i + 1.0, ..p }, 1e4, form).unwrap();
            prop_assert!(more_k < base);
            prop_assert!(more_b < base);
            prop_assert!(more_i < base);
        }
    }
}

#[test]
fn step_size_above_limit_is_rejected() {
    let p = TheoryParams {
        nu: 0.1,
        ..TheoryParams::default()
    };
    let l = smoothness_l(&p);
    let too_big = TheoryParams {
        learning_rate: 1.0 / l,
        ..p
    };
    assert!(convergence_bound(&too_big, 10.0).is_err());
    assert!(convergence_bound_with(&too_big, 10.0, BoundForm::SingleClient).is_ok());
}
