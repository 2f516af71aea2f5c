//! Router logits and top-k softmax gating decisions.
//!
//! One decision object drives expert selection for a token. Under per-site
//! and per-block routing each router produces its own decision; under
//! pre-gated routing the single decision computed at the first adapted site
//! governs every adapted site of every layer for that token.

use thiserror::Error;

use crate::linalg::{matmul, LinalgError, Matrix};
use crate::model::{Model, Router, Routing};

#[derive(Debug, Error)]
pub enum GatingError {
    #[error("top-k {k} out of range for {n} experts")]
    KOutOfRange { k: usize, n: usize },
    #[error("router logits are not finite")]
    NonFiniteLogits,
    #[error("pre-gate called under {0:?} routing policy")]
    WrongPolicy(Routing),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Per-token expert selection: `k` distinct expert indices sorted by
/// descending weight (ties by ascending index) and their softmax weights,
/// which sum to 1.
#[derive(Debug, Clone)]
pub struct GatingDecision {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub token_step: i64,
}

impl GatingDecision {
    /// True when the selections are identical down to the weight bits.
    /// The token step is deliberately excluded: two consecutive tokens that
    /// select the same experts with the same weights compare equal, which is
    /// what the switch-elision path keys on.
    pub fn selection_bit_eq(&self, other: &GatingDecision) -> bool {
        self.indices == other.indices
            && self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Computes the gating decision for one router input: logits `w_g * x`,
/// top-k selection (ties broken toward the lower expert index), then softmax
/// restricted to the selected logits — non-selected logits are excluded from
/// the normalization entirely.
pub fn gate(
    router: &Router,
    x: &Matrix,
    k: usize,
    token_step: i64,
) -> Result<GatingDecision, GatingError> {
    let n = router.w_g.rows();
    if k == 0 || k > n {
        return Err(GatingError::KOutOfRange { k, n });
    }
    let logits = matmul(&router.w_g, x)?;
    if !logits.is_finite() {
        return Err(GatingError::NonFiniteLogits);
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Descending logit, ascending index on ties. sort_by is stable, so equal
    // logits keep their ascending-index order.
    order.sort_by(|&a, &b| {
        logits
            .get(b, 0)
            .partial_cmp(&logits.get(a, 0))
            .expect("finite logits compare totally")
    });
    let selected = &order[..k];

    let max_logit = selected
        .iter()
        .map(|&i| logits.get(i, 0))
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = selected
        .iter()
        .map(|&i| (logits.get(i, 0) - max_logit).exp())
        .collect();
    let denom: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / denom).collect();

    Ok(GatingDecision {
        indices: selected.to_vec(),
        weights,
        token_step,
    })
}

/// The pre-gated decision for token `token_step`: the model's single router
/// applied to `x1`, the input of the first adapted site in forward order of
/// block 1. The returned decision is reused at every adapted site.
pub fn pre_gate(model: &Model, x1: &Matrix, token_step: i64) -> Result<GatingDecision, GatingError> {
    if model.config.routing != Routing::PreGated {
        return Err(GatingError::WrongPolicy(model.config.routing));
    }
    gate(&model.routers[0], x1, model.config.top_k, token_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate, ModelConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn router_from(data: Vec<f64>, n: usize, d_in: usize) -> Router {
        Router {
            w_g: Matrix::new(n, d_in, data).unwrap(),
        }
    }

    /// Exhaustive oracle: full sort of logits, renormalized exp over the top k.
    fn oracle(logits: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
        let mut idx: Vec<usize> = (0..logits.len()).collect();
        idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
        let top: Vec<usize> = idx[..k].to_vec();
        let m = top.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = top.iter().map(|&i| (logits[i] - m).exp()).collect();
        let s: f64 = ex.iter().sum();
        (top, ex.iter().map(|e| e / s).collect())
    }

    #[test]
    fn uniform_logits_tie_break_low_index() {
        // Identity-ish router with x chosen so all logits are 0.
        let r = router_from(vec![0.0; 4 * 3], 4, 3);
        let x = Matrix::column(&[1.0, 2.0, 3.0]);
        let d = gate(&r, &x, 2, 0).unwrap();
        assert_eq!(d.indices, vec![0, 1]);
        assert_eq!(d.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn k_equals_n_is_full_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..8 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = router_from(data, 8, 4);
        let x = Matrix::column(&[0.3, -0.2, 0.9, 0.1]);
        let d = gate(&r, &x, 8, 0).unwrap();

        let logits = matmul(&r.w_g, &x).unwrap();
        let z: Vec<f64> = (0..8).map(|i| logits.get(i, 0)).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = ex.iter().sum();
        for (pos, &i) in d.indices.iter().enumerate() {
            assert!((d.weights[pos] - ex[i] / s).abs() < 1e-15);
        }
        let total: f64 = d.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_exhaustive_oracle_on_seeded_logits() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..8 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = router_from(data, 8, 6);
            let xv: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Matrix::column(&xv);
            let d = gate(&r, &x, 2, 0).unwrap();

            let logits = matmul(&r.w_g, &x).unwrap();
            let z: Vec<f64> = (0..8).map(|i| logits.get(i, 0)).collect();
            let (oi, ow) = oracle(&z, 2);
            assert_eq!(d.indices, oi, "seed {seed}");
            for (a, b) in d.weights.iter().zip(&ow) {
                assert!((a - b).abs() < 1e-15, "seed {seed}");
            }
        }
    }

    #[test]
    fn k_out_of_range_rejected() {
        let r = router_from(vec![0.0; 4 * 2], 4, 2);
        let x = Matrix::column(&[1.0, 1.0]);
        assert!(gate(&r, &x, 0, 0).is_err());
        assert!(gate(&r, &x, 5, 0).is_err());
    }

    #[test]
    fn selection_invariant_under_logit_shift() {
        // Adding a constant to all logits must not change the selection, and
        // the weights shift only by float noise.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = router_from(data.clone(), 8, 1);
        let x = Matrix::column(&[1.0]);
        let d = gate(&r, &x, 3, 0).unwrap();

        let shifted = router_from(data.iter().map(|v| v + 7.5).collect(), 8, 1);
        let d2 = gate(&shifted, &x, 3, 0).unwrap();
        assert_eq!(d.indices, d2.indices);
        for (a, b) in d.weights.iter().zip(&d2.weights) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data: Vec<f64> = (0..8 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = router_from(data, 8, 4);
        let x = Matrix::column(&[0.1, 0.2, 0.3, 0.4]);
        let a = gate(&r, &x, 2, 3).unwrap();
        let b = gate(&r, &x, 2, 3).unwrap();
        assert!(a.selection_bit_eq(&b));
    }

    #[test]
    fn pre_gate_requires_pre_gated_policy() {
        let cfg = ModelConfig {
            routing: Routing::PerSite,
            ..ModelConfig::default()
        };
        let model = generate(&cfg).unwrap();
        let x = Matrix::zeros(cfg.d_model, 1);
        assert!(matches!(
            pre_gate(&model, &x, 0),
            Err(GatingError::WrongPolicy(Routing::PerSite))
        ));
    }

    #[test]
    fn pre_gate_matches_direct_gate_on_router() {
        let model = generate(&ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for t in 0..10i64 {
            let xv: Vec<f64> = (0..model.config.d_model)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let x = Matrix::column(&xv);
            let via_pre = pre_gate(&model, &x, t).unwrap();
            let direct = gate(&model.routers[0], &x, model.config.top_k, t).unwrap();
            assert!(via_pre.selection_bit_eq(&direct), "t={t}");
        }
    }
}
