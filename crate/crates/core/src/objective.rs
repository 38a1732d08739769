//! Training objective: mean binary cross-entropy over the batch plus
//! `alpha` times the mean squared inner product of the two identity vectors.
//! The squared inner product is the orthogonality regularizer; it is zero
//! exactly when Z1 ⟂ Z2 and its gradient never reaches the classifier
//! weights, which sit after the concatenation.

use crate::error::{Error, Result};
use crate::model::Prediction;
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Per-step loss values (batch means).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub reg: f64,
    pub alpha: f64,
    pub total: f64,
}

/// Loss nodes for one batch, still attached to the graph.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: NodeId,
    pub bce: NodeId,
    pub reg: NodeId,
}

/// Options for [`total_loss`].
#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub alpha: f64,
    /// Replace the raw inner product with the cosine of the two vectors.
    /// Off by default; the raw product is the literal regularizer.
    pub normalize: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            alpha: 100.0,
            normalize: false,
        }
    }
}

/// (Z1ᵀZ2)², the squared inner product of the identity vectors.
pub fn reg_term<F: Scalar>(graph: &mut Graph<F>, z1: NodeId, z2: NodeId) -> Result<NodeId> {
    let ip = graph.inner_product(z1, z2)?;
    graph.square(ip)
}

/// Cosine variant: (Z1ᵀZ2 / (‖Z1‖‖Z2‖))², with a small epsilon under the
/// square root to keep zero vectors finite.
pub fn reg_term_normalized<F: Scalar>(graph: &mut Graph<F>, z1: NodeId, z2: NodeId) -> Result<NodeId> {
    let ip = graph.inner_product(z1, z2)?;
    let n1 = graph.inner_product(z1, z1)?;
    let n2 = graph.inner_product(z2, z2)?;
    let prod = graph.mul_scalar(n1, n2)?;
    let prod = graph.add_const(prod, F::of_f64(1e-12))?;
    let denom = graph.sqrt(prod)?;
    let cos = graph.div_scalar(ip, denom)?;
    graph.square(cos)
}

/// −(y·log p + (1−y)·log(1−p)) with p clamped away from the log
/// singularities; `y` must be 0 or 1.
pub fn bce<F: Scalar>(graph: &mut Graph<F>, prob: NodeId, y: u8) -> Result<NodeId> {
    graph.bce(prob, y)
}

/// Batch loss: `mean(bce) + alpha · mean(reg)`.
///
/// With `alpha == 0` the returned total node *is* the BCE node, so an
/// unregularized run is bitwise identical to a plain-BCE baseline.
pub fn total_loss<F: Scalar>(
    graph: &mut Graph<F>,
    predictions: &[Prediction],
    labels: &[u8],
    options: &LossOptions,
) -> Result<BatchLoss> {
    if predictions.is_empty() {
        return Err(Error::Contract("total_loss over an empty batch".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if options.alpha < 0.0 {
        return Err(Error::Contract(format!(
            "alpha must be non-negative, got {}",
            options.alpha
        )));
    }

    let inv_n = F::of_f64(1.0 / predictions.len() as f64);
    let mut bce_terms = Vec::with_capacity(predictions.len());
    let mut reg_terms = Vec::with_capacity(predictions.len());
    for (pred, &label) in predictions.iter().zip(labels) {
        bce_terms.push(bce(graph, pred.y, label)?);
        let reg = if options.normalize {
            reg_term_normalized(graph, pred.embeddings.z1, pred.embeddings.z2)?
        } else {
            reg_term(graph, pred.embeddings.z1, pred.embeddings.z2)?
        };
        reg_terms.push(reg);
    }
    let bce_sum = graph.sum_scalars(&bce_terms)?;
    let bce_mean = graph.scale(bce_sum, inv_n)?;
    let reg_sum = graph.sum_scalars(&reg_terms)?;
    let reg_mean = graph.scale(reg_sum, inv_n)?;

    let total = if options.alpha == 0.0 {
        bce_mean
    } else {
        let weighted = graph.scale(reg_mean, F::of_f64(options.alpha))?;
        graph.add(bce_mean, weighted)?
    };
    Ok(BatchLoss {
        total,
        bce: bce_mean,
        reg: reg_mean,
    })
}

/// Finite-difference check of the full training loss (default α, small
/// model) against the analytic gradients, in 64-bit mode.
///
/// `seed` drives both the weight initialization and the synthetic input
/// pair; `max_elements` parameter elements are sampled when the model has
/// more. Step and tolerance are passed through to the checker.
pub fn full_loss_check(
    seed: u64,
    step: f64,
    tolerance: f64,
    max_elements: usize,
) -> Result<crate::tensor::gradcheck::CheckReport> {
    use rand::Rng;

    let config = crate::model::ModelConfig {
        input_channels: 1,
        input_size: 16,
        conv_channels: vec![2, 4],
        use_residual: true,
        embed_dim: 8,
        classifier_bias: false,
        // Kept small here: a large multiplier inflates the quartic
        // regularizer's higher derivatives and the finite-difference
        // truncation error along with them.
        feature_scale: 2.0,
    };
    let images: Vec<Tensor<f64>> = (0..2)
        .map(|i| {
            let mut rng = crate::rng::keyed_rng(seed, "gradcheck_input", i);
            let data = (0..16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::new(vec![1, 16, 16], data).expect("shape matches data")
        })
        .collect();
    let labels = [1u8, 0u8];
    let options = LossOptions::default();

    let loss_value = |config: &crate::model::ModelConfig,
                      params: &crate::tensor::ParamSet<f64>,
                      want_grads: bool|
     -> Result<(f64, Option<crate::tensor::GradMap<f64>>)> {
        let mut graph = Graph::new();
        let model = crate::model::ModelParams {
            config: config.clone(),
            params: params.clone(),
        };
        let bound = model.bind(&mut graph)?;
        let mut predictions = Vec::new();
        for image in &images {
            predictions.push(crate::model::forward(&mut graph, config, &bound, image)?);
        }
        let loss = total_loss(&mut graph, &predictions, &labels, &options)?;
        let value = graph.scalar_value(loss.total)?;
        let grads = if want_grads {
            Some(graph.backward(loss.total)?)
        } else {
            None
        };
        Ok((value, grads))
    };

    let mut model = crate::model::init_model::<f64>(&config, seed)?;
    let (_, grads) = loss_value(&config, &model.params, true)?;
    let analytic = grads.expect("gradients requested");
    crate::tensor::gradcheck::finite_diff_check(
        |params| loss_value(&config, params, false).map(|(v, _)| v),
        &mut model.params,
        &analytic,
        step,
        tolerance,
        max_elements,
        seed,
    )
}

impl BatchLoss {
    pub fn breakdown<F: Scalar>(&self, graph: &Graph<F>, alpha: f64) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            bce: graph.scalar_value(self.bce)?.as_f64(),
            reg: graph.scalar_value(self.reg)?.as_f64(),
            alpha,
            total: graph.scalar_value(self.total)?.as_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IdentityEmbeddings, Prediction};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_input(g: &mut Graph<f64>, v: Vec<f64>) -> NodeId {
        g.input(&Tensor::from_vec(v)).unwrap()
    }

    fn reg_value(z1: Vec<f64>, z2: Vec<f64>) -> f64 {
        let mut g = Graph::new();
        let a = vec_input(&mut g, z1);
        let b = vec_input(&mut g, z2);
        let r = reg_term(&mut g, a, b).unwrap();
        g.scalar_value(r).unwrap()
    }

    #[test]
    fn orthogonal_vectors_give_zero() {
        assert_eq!(reg_value(vec![1.0, 0.0], vec![0.0, 1.0]), 0.0);
    }

    #[test]
    fn parallel_ones_give_d_squared() {
        assert_eq!(reg_value(vec![1.0; 32], vec![1.0; 32]), 1024.0);
    }

    #[test]
    fn matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let z1: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z2: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ip: f64 = z1.iter().zip(&z2).map(|(a, b)| a * b).sum();
            let expect = ip * ip;
            let got = reg_value(z1, z2);
            assert!((got - expect).abs() <= 1e-5 * expect.abs().max(1.0));
        }
    }

    fn bce_value(p: f64, y: u8) -> f64 {
        let mut g = Graph::new();
        let prob = g.input(&Tensor::scalar(p)).unwrap();
        let loss = bce(&mut g, prob, y).unwrap();
        g.scalar_value(loss).unwrap()
    }

    #[test]
    fn bce_analytic_values() {
        assert!(bce_value(1.0 - 1e-7, 1) < 2e-7);
        assert!((bce_value(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_value(0.9, 0) - (-(0.1f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_non_binary_label() {
        let mut g = Graph::new();
        let p = g.input(&Tensor::scalar(0.5f64)).unwrap();
        assert!(matches!(bce(&mut g, p, 2), Err(Error::Contract(_))));
    }

    /// Fabricate a Prediction from fixed probability and embeddings.
    fn fake_prediction(g: &mut Graph<f64>, p: f64, z1: Vec<f64>, z2: Vec<f64>) -> Prediction {
        let z1 = vec_input(g, z1);
        let z2 = vec_input(g, z2);
        let z = g.concat(z1, z2).unwrap();
        let y = g.input(&Tensor::scalar(p)).unwrap();
        Prediction {
            y,
            logit: y,
            embeddings: IdentityEmbeddings { z1, z2, z },
        }
    }

    #[test]
    fn alpha_zero_total_is_exactly_bce() {
        let mut g = Graph::new();
        let pred = fake_prediction(&mut g, 0.7, vec![1.0, 2.0], vec![3.0, 4.0]);
        let loss = total_loss(&mut g, &[pred], &[1], &LossOptions { alpha: 0.0, normalize: false }).unwrap();
        assert_eq!(loss.total, loss.bce);
    }

    #[test]
    fn orthogonal_case_total_is_ln2() {
        let mut g = Graph::new();
        let mut e1 = vec![0.0; 32];
        let mut e2 = vec![0.0; 32];
        e1[0] = 1.0;
        e2[1] = 1.0;
        let pred = fake_prediction(&mut g, 0.5, e1, e2);
        let loss = total_loss(&mut g, &[pred], &[1], &LossOptions::default()).unwrap();
        let total = g.scalar_value(loss.total).unwrap();
        assert!((total - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn arithmetic_case_from_definition() {
        // y=1, p=0.5, z1 = z2 = 0.1·ones(32), alpha = 100
        // → ln 2 + 100·(0.32)² = 0.6931… + 10.24
        let mut g = Graph::new();
        let pred = fake_prediction(&mut g, 0.5, vec![0.1; 32], vec![0.1; 32]);
        let loss = total_loss(&mut g, &[pred], &[1], &LossOptions::default()).unwrap();
        let total = g.scalar_value(loss.total).unwrap();
        let expect = std::f64::consts::LN_2 + 100.0 * 0.32f64.powi(2);
        assert!((total - expect).abs() < 1e-9, "{total} vs {expect}");
    }

    #[test]
    fn full_loss_gradients_pass_finite_differences() {
        let report = full_loss_check(42, 1e-5, 1e-4, 50).unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 50);
    }

    #[test]
    fn empty_batch_is_a_contract_error() {
        let mut g = Graph::<f64>::new();
        assert!(matches!(
            total_loss(&mut g, &[], &[], &LossOptions::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn normalized_variant_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let z1: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z2: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cos2 = |a: Vec<f64>, b: Vec<f64>| {
            let mut g = Graph::new();
            let an = vec_input(&mut g, a);
            let bn = vec_input(&mut g, b);
            let r = reg_term_normalized(&mut g, an, bn).unwrap();
            g.scalar_value(r).unwrap()
        };
        let base = cos2(z1.clone(), z2.clone());
        let scaled = cos2(z1.iter().map(|v| v * 7.5).collect(), z2);
        assert!((base - scaled).abs() < 1e-9);
        assert!((0.0..=1.0 + 1e-9).contains(&base));
    }

    proptest! {
        #[test]
        fn reg_is_symmetric_and_nonnegative(
            z1 in proptest::collection::vec(-10.0f64..10.0, 8),
            z2 in proptest::collection::vec(-10.0f64..10.0, 8),
        ) {
            let ab = reg_value(z1.clone(), z2.clone());
            let ba = reg_value(z2, z1);
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn reg_scales_quadratically(
            z1 in proptest::collection::vec(-3.0f64..3.0, 8),
            z2 in proptest::collection::vec(-3.0f64..3.0, 8),
            c in -4.0f64..4.0,
        ) {
            let base = reg_value(z1.clone(), z2.clone());
            let scaled = reg_value(z1.iter().map(|v| v * c).collect(), z2);
            let expect = c * c * base;
            prop_assert!((scaled - expect).abs() <= 1e-5 * expect.abs().max(1.0));
        }
    }
}
