//! Synthetic oracles with known optima.

use ndarray::Array2;
use rand::Rng;

use super::{Batch, LossOracle, OracleError, SeparableCosts};
use crate::gumbel::PromptSequence;

/// Deterministic value in [0, 1) derived from an input id (splitmix64 finalizer).
fn unit_hash(input_id: u64) -> f64 {
    let mut z = input_id.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Fixed per-example offset in `[0, scale)`.
pub fn example_offset(input_id: u64, scale: f64) -> f64 {
    scale * unit_hash(input_id)
}

/// Normalized Hamming distance to `target`, plus a per-example offset, averaged
/// over the batch.
pub fn hidden_prompt_loss(
    prompt: &PromptSequence,
    target: &PromptSequence,
    batch: &Batch,
    offset_scale: f64,
) -> Result<f64, OracleError> {
    let dist = prompt
        .hamming(target)
        .map_err(|e| OracleError::InvalidPrompt(e.to_string()))?;
    let base = dist as f64 / target.len() as f64;
    let offsets: f64 = batch
        .examples()
        .iter()
        .map(|e| example_offset(e.input_id, offset_scale))
        .sum();
    Ok(base + offsets / batch.len() as f64)
}

/// Oracle whose loss is the distance to a hidden prompt.
#[derive(Debug, Clone)]
pub struct HiddenPromptOracle {
    target: PromptSequence,
    vocab: usize,
    offset_scale: f64,
}

impl HiddenPromptOracle {
    pub fn new(target: PromptSequence, vocab: usize, offset_scale: f64) -> Result<Self, OracleError> {
        if target.indices().iter().any(|&j| j >= vocab) {
            return Err(OracleError::Config("hidden target outside vocabulary".into()));
        }
        if !(offset_scale >= 0.0 && offset_scale.is_finite()) {
            return Err(OracleError::Config(format!(
                "offset_scale must be non-negative, got {offset_scale}"
            )));
        }
        Ok(HiddenPromptOracle {
            target,
            vocab,
            offset_scale,
        })
    }

    pub fn target(&self) -> &PromptSequence {
        &self.target
    }
}

impl LossOracle for HiddenPromptOracle {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn prompt_len(&self) -> usize {
        self.target.len()
    }

    fn raw_loss(&self, prompt: &PromptSequence, batch: &Batch) -> Result<f64, OracleError> {
        hidden_prompt_loss(prompt, &self.target, batch, self.offset_scale)
    }

    fn separable_costs(&self, batch: &Batch) -> Option<SeparableCosts> {
        let n = self.target.len();
        let mut costs = Array2::from_elem((n, self.vocab), 1.0 / n as f64);
        for (i, &t) in self.target.indices().iter().enumerate() {
            costs[[i, t]] = 0.0;
        }
        let offset = batch
            .examples()
            .iter()
            .map(|e| example_offset(e.input_id, self.offset_scale))
            .sum::<f64>()
            / batch.len() as f64;
        Some(SeparableCosts { offset, costs })
    }
}

/// Mean over the batch of `Σ_i weights[label][i][j_i] / n`.
pub fn linear_surrogate_loss(
    prompt: &PromptSequence,
    weights: &[Array2<f64>],
    batch: &Batch,
) -> Result<f64, OracleError> {
    let n = prompt.len();
    let mut total = 0.0;
    for ex in batch.examples() {
        let w = weights.get(ex.label).ok_or_else(|| {
            OracleError::InvalidBatch(format!("label {} has no weight table", ex.label))
        })?;
        if w.nrows() != n {
            return Err(OracleError::InvalidPrompt(format!(
                "weights cover {} positions, prompt has {n}",
                w.nrows()
            )));
        }
        let mut s = 0.0;
        for (i, &j) in prompt.indices().iter().enumerate() {
            s += *w.get([i, j]).ok_or_else(|| {
                OracleError::InvalidPrompt(format!("token {j} outside weight table"))
            })?;
        }
        total += s / n as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Class-conditional linear loss; shards with different label mixes get
/// different optima.
#[derive(Debug, Clone)]
pub struct LinearSurrogateOracle {
    weights: Vec<Array2<f64>>,
}

impl LinearSurrogateOracle {
    pub fn new(weights: Vec<Array2<f64>>) -> Result<Self, OracleError> {
        let Some(first) = weights.first() else {
            return Err(OracleError::Config("linear surrogate needs at least one class".into()));
        };
        let dim = first.dim();
        if weights.iter().any(|w| w.dim() != dim) {
            return Err(OracleError::Config("all class weight tables must share a shape".into()));
        }
        if weights.iter().flat_map(|w| w.iter()).any(|v| !v.is_finite()) {
            return Err(OracleError::Config("weights must be finite".into()));
        }
        Ok(LinearSurrogateOracle { weights })
    }

    pub(crate) fn from_nested(
        nested: &[Vec<Vec<f64>>],
        n: usize,
        vocab: usize,
    ) -> Result<Self, OracleError> {
        let mut tables = Vec::with_capacity(nested.len());
        for (c, rows) in nested.iter().enumerate() {
            if rows.len() != n || rows.iter().any(|r| r.len() != vocab) {
                return Err(OracleError::Config(format!(
                    "weights for class {c} must be {n}x{vocab}"
                )));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            tables.push(Array2::from_shape_vec((n, vocab), flat).expect("shape checked"));
        }
        Self::new(tables)
    }

    /// Shared optimum plus class-specific decoys.
    ///
    /// Each position has a global token `t_i` with weight `shared_weight` for
    /// every class; each class additionally has its own preferred token with
    /// weight 0; everything else weighs 1.
    pub fn heterogeneous<R: Rng + ?Sized>(
        n: usize,
        vocab: usize,
        num_classes: usize,
        shared_weight: f64,
        rng: &mut R,
    ) -> Result<Self, OracleError> {
        if vocab < 2 || num_classes == 0 {
            return Err(OracleError::Config("need vocab >= 2 and at least one class".into()));
        }
        let shared: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        let mut weights = vec![Array2::from_elem((n, vocab), 1.0); num_classes];
        for w in weights.iter_mut() {
            for (i, &t) in shared.iter().enumerate() {
                w[[i, t]] = shared_weight;
                let mut pref = rng.random_range(0..vocab - 1);
                if pref >= t {
                    pref += 1;
                }
                w[[i, pref]] = 0.0;
            }
        }
        Self::new(weights)
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }
}

impl LossOracle for LinearSurrogateOracle {
    fn vocab_size(&self) -> usize {
        self.weights[0].ncols()
    }

    fn prompt_len(&self) -> usize {
        self.weights[0].nrows()
    }

    fn raw_loss(&self, prompt: &PromptSequence, batch: &Batch) -> Result<f64, OracleError> {
        linear_surrogate_loss(prompt, &self.weights, batch)
    }

    fn separable_costs(&self, batch: &Batch) -> Option<SeparableCosts> {
        let n = self.prompt_len();
        let mut costs = Array2::zeros(self.weights[0].dim());
        for ex in batch.examples() {
            costs += self.weights.get(ex.label)?;
        }
        costs /= (n * batch.len()) as f64;
        Some(SeparableCosts { offset: 0.0, costs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::Example;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(v: &[usize]) -> PromptSequence {
        PromptSequence::new(v.to_vec(), 16).unwrap()
    }

    fn batch(ids: &[(u64, usize)]) -> Batch {
        Batch::new(
            ids.iter()
                .map(|&(input_id, label)| Example { input_id, label })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn offsets_are_bounded_and_stable() {
        for id in 0..1000 {
            let o = example_offset(id, 0.1);
            assert!((0.0..0.1).contains(&o));
            assert_eq!(o, example_offset(id, 0.1));
        }
    }

    #[test]
    fn hidden_prompt_values() {
        let b = batch(&[(1, 0), (2, 0), (3, 1)]);
        let t = seq(&[1, 2, 3, 4]);
        let at_target = hidden_prompt_loss(&t, &t, &b, 0.1).unwrap();
        assert!((0.0..=0.1).contains(&at_target));
        assert_eq!(hidden_prompt_loss(&seq(&[1, 2, 0, 0]), &t, &b, 0.0).unwrap(), 0.5);
        assert_eq!(hidden_prompt_loss(&seq(&[0, 0, 0, 0]), &t, &b, 0.0).unwrap(), 1.0);
        let a = seq(&[1, 5, 3, 7]);
        assert_eq!(
            hidden_prompt_loss(&a, &t, &b, 0.0).unwrap(),
            hidden_prompt_loss(&t, &a, &b, 0.0).unwrap()
        );
        assert!(hidden_prompt_loss(&seq(&[1]), &t, &b, 0.0).is_err());
    }

    #[test]
    fn hidden_prompt_optimum_is_unique() {
        let t = PromptSequence::new(vec![2, 0], 3).unwrap();
        let o = HiddenPromptOracle::new(t.clone(), 3, 0.1).unwrap();
        let b = batch(&[(5, 0), (9, 1)]);
        let best = o.raw_loss(&t, &b).unwrap();
        for a in 0..3 {
            for c in 0..3 {
                let p = PromptSequence::new(vec![a, c], 3).unwrap();
                if p != t {
                    assert!(o.raw_loss(&p, &b).unwrap() > best);
                }
            }
        }
    }

    #[test]
    fn separable_costs_reproduce_losses() {
        let t = PromptSequence::new(vec![2, 0, 1], 4).unwrap();
        let o = HiddenPromptOracle::new(t, 4, 0.1).unwrap();
        let b = batch(&[(5, 0), (9, 1)]);
        let c = o.separable_costs(&b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = LinearSurrogateOracle::heterogeneous(3, 4, 2, 0.5, &mut rng).unwrap();
        let cs = s.separable_costs(&b).unwrap();
        for code in 0..64 {
            let p = PromptSequence::new(vec![code % 4, (code / 4) % 4, code / 16], 4).unwrap();
            assert!((c.loss(&p) - o.raw_loss(&p, &b).unwrap()).abs() < 1e-14);
            assert!((cs.loss(&p) - s.raw_loss(&p, &b).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_surrogate_values() {
        let zeros = vec![Array2::zeros((2, 3))];
        let b = batch(&[(0, 0)]);
        assert_eq!(linear_surrogate_loss(&seq(&[0, 2]), &zeros, &b).unwrap(), 0.0);
        let w = vec![array![[0.1, 0.7, 0.3]]];
        assert!((linear_surrogate_loss(&seq(&[1]), &w, &b).unwrap() - 0.7).abs() < 1e-15);
        assert!(linear_surrogate_loss(&seq(&[1]), &w, &batch(&[(0, 1)])).is_err());
    }

    #[test]
    fn opposing_classes_give_distinct_client_gradients() {
        use crate::gumbel::{forward, GumbelNoise, PromptDistribution};
        // class 0 prefers token 0, class 1 prefers token 1
        let o = LinearSurrogateOracle::new(vec![array![[0.0, 1.0]], array![[1.0, 0.0]]]).unwrap();
        let d = PromptDistribution::uniform(1, 2, 1.0, 1e-3).unwrap();
        let p = forward(&d, &GumbelNoise::zeros(1, 2)).unwrap();
        let g0 = o.separable_costs(&batch(&[(0, 0), (1, 0)])).unwrap().expected_loss_grad(&p, &d);
        let g1 = o.separable_costs(&batch(&[(2, 1), (3, 1)])).unwrap().expected_loss_grad(&p, &d);
        assert!(g0[[0, 0]] < 0.0 && g1[[0, 0]] > 0.0);
        assert!((&g0 + &g1).iter().all(|v| v.abs() < 1e-15));
    }
}
