//! Mini-batch training loop with adam/sgd updates, per-step CSV logging,
//! and final/best checkpoints.
//!
//! Training is single-threaded and fully determined by the seeds: batch
//! order comes from one keyed permutation per epoch, flip augmentation from
//! a per-epoch flip seed, and weight initialization from the training seed.
//! Rerunning the same configuration reproduces the weights bitwise.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{forward, init_model, save_model, ModelConfig, ModelParams};
use crate::objective::{total_loss, LossOptions};
use crate::rng::keyed_rng;
use crate::scalar::Scalar;
use crate::synthdata::{load_batch, DatasetManifest, Split};
use crate::tensor::graph::Graph;
use crate::tensor::{GradMap, ParamSet};
use crate::metrics::ScoreSet;

pub const FINAL_CHECKPOINT: &str = "final.omad";
pub const BEST_CHECKPOINT: &str = "best.omad";
pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (expected adam or sgd)"
            ))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub flip_augment: bool,
    pub normalize_reg: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 100.0,
            learning_rate: 1e-5,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            optimizer: Optimizer::Adam,
            flip_augment: true,
            normalize_reg: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One training step's observables.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub step: usize,
    pub bce: f64,
    pub reg: f64,
    pub total: f64,
    /// Batch means.
    pub z1_norm: f64,
    pub z2_norm: f64,
    pub abs_cos: f64,
    pub ms: f64,
}

/// Write the training log as "epoch,step,bce,reg,total,z1_norm,z2_norm,abs_cos,ms".
pub fn write_train_log(records: &[TrainLogRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "epoch,step,bce,reg,total,z1_norm,z2_norm,abs_cos,ms").map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch, r.step, r.bce, r.reg, r.total, r.z1_norm, r.z2_norm, r.abs_cos, r.ms
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Adam moment buffers; empty and step 0 until the first update.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<F: Scalar> {
    step: u64,
    first_moment: HashMap<String, Vec<F>>,
    second_moment: HashMap<String, Vec<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new() -> Self {
        OptimizerState {
            step: 0,
            first_moment: HashMap::new(),
            second_moment: HashMap::new(),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Apply one optimizer update in place. Every parameter must have a
/// gradient entry; adam moments persist in `state` across calls.
pub fn optimizer_step<F: Scalar>(
    params: &mut ParamSet<F>,
    grads: &GradMap<F>,
    state: &mut OptimizerState<F>,
    config: &TrainConfig,
) -> Result<()> {
    config.validate()?;
    let lr = F::of_f64(config.learning_rate);
    match config.optimizer {
        Optimizer::Sgd => {
            for (name, tensor) in params.iter_mut() {
                let grad = grads
                    .get(name)
                    .ok_or_else(|| Error::Contract(format!("no gradient for parameter {name:?}")))?;
                for (p, &g) in tensor.data_mut().iter_mut().zip(grad) {
                    *p = *p - lr * g;
                }
            }
        }
        Optimizer::Adam => {
            state.step += 1;
            let b1 = F::of_f64(ADAM_BETA1);
            let b2 = F::of_f64(ADAM_BETA2);
            let eps = F::of_f64(ADAM_EPS);
            let one = F::one();
            let corr1 = F::of_f64(1.0 - ADAM_BETA1.powi(state.step as i32));
            let corr2 = F::of_f64(1.0 - ADAM_BETA2.powi(state.step as i32));
            for (name, tensor) in params.iter_mut() {
                let grad = grads
                    .get(name)
                    .ok_or_else(|| Error::Contract(format!("no gradient for parameter {name:?}")))?;
                let m = state
                    .first_moment
                    .entry(name.to_string())
                    .or_insert_with(|| vec![F::zero(); grad.len()]);
                let v = state
                    .second_moment
                    .entry(name.to_string())
                    .or_insert_with(|| vec![F::zero(); grad.len()]);
                for (((p, &g), m), v) in tensor.data_mut().iter_mut().zip(grad).zip(m).zip(v) {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / corr1;
                    let v_hat = *v / corr2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Trained weights plus the full per-step log.
#[derive(Debug, Clone)]
pub struct TrainOutcome<F: Scalar> {
    pub params: ModelParams<F>,
    pub log: Vec<TrainLogRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn abs_cosine(a: &[f64], b: &[f64]) -> f64 {
    let ip: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    ip.abs() / (vec_norm(a) * vec_norm(b)).max(1e-12)
}

/// Train on the manifest's train split and write `final.omad`, `best.omad`
/// (lowest epoch-mean total loss), and `train_log.csv` under `out_dir`.
pub fn train<F: Scalar>(
    config: &TrainConfig,
    model_config: &ModelConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    let records = manifest.split_records(Split::Train);
    let n = records.len();
    if n == 0 {
        return Err(Error::Contract("train split is empty".into()));
    }
    let labels: std::collections::BTreeSet<u8> = records.iter().map(|r| r.label).collect();
    if labels.len() < 2 {
        return Err(Error::Contract(
            "train split must contain both bona fide and attack samples".into(),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut params: ModelParams<F> = init_model(model_config, config.seed)?;
    let mut state = OptimizerState::new();
    let options = LossOptions {
        alpha: config.alpha,
        normalize: config.normalize_reg,
    };
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ModelParams<F>)> = None;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut keyed_rng(config.seed, "shuffle", epoch as u64));
        // Distinct flip decisions per epoch while staying on one seed.
        let flip_seed = keyed_rng(config.seed, "flip_epoch", epoch as u64).gen::<u64>();
        let mut epoch_total = 0.0;
        let mut epoch_batches = 0usize;

        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let started = Instant::now();
            let batch = load_batch::<F>(
                manifest,
                Split::Train,
                chunk,
                config.flip_augment,
                flip_seed,
                model_config.input_size,
            )?;

            let mut graph = Graph::new();
            let bound = params.bind(&mut graph)?;
            let mut predictions = Vec::with_capacity(batch.len());
            let mut batch_labels = Vec::with_capacity(batch.len());
            for (image, label) in &batch {
                predictions.push(forward(&mut graph, model_config, &bound, image)?);
                batch_labels.push(*label);
            }
            let loss = total_loss(&mut graph, &predictions, &batch_labels, &options)?;
            let breakdown = loss.breakdown(&graph, config.alpha)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training diverged at epoch {epoch} step {step}: total loss {}",
                    breakdown.total
                )));
            }

            let (mut z1n, mut z2n, mut cosine) = (0.0, 0.0, 0.0);
            for pred in &predictions {
                let z1: Vec<f64> = graph.value(pred.embeddings.z1).iter().map(|v| v.as_f64()).collect();
                let z2: Vec<f64> = graph.value(pred.embeddings.z2).iter().map(|v| v.as_f64()).collect();
                z1n += vec_norm(&z1);
                z2n += vec_norm(&z2);
                cosine += abs_cosine(&z1, &z2);
            }
            let count = predictions.len() as f64;

            let grads = graph.backward(loss.total)?;
            optimizer_step(&mut params.params, &grads, &mut state, config)?;

            epoch_total += breakdown.total;
            epoch_batches += 1;
            log.push(TrainLogRecord {
                epoch,
                step,
                bce: breakdown.bce,
                reg: breakdown.reg,
                total: breakdown.total,
                z1_norm: z1n / count,
                z2_norm: z2n / count,
                abs_cos: cosine / count,
                ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }

        let epoch_mean = epoch_total / epoch_batches as f64;
        let improved = best.as_ref().map_or(true, |(_, loss, _)| epoch_mean < *loss);
        if improved {
            best = Some((epoch, epoch_mean, params.clone()));
        }
    }

    let (best_epoch, best_loss, best_params) = best.expect("at least one epoch ran");
    save_model(&params, &out_dir.join(FINAL_CHECKPOINT))?;
    save_model(&best_params, &out_dir.join(BEST_CHECKPOINT))?;
    write_train_log(&log, &out_dir.join(TRAIN_LOG))?;
    Ok(TrainOutcome {
        params,
        log,
        best_epoch,
        best_loss,
    })
}

/// Score every sample of a split, no augmentation, in sample_id order.
pub fn evaluate<F: Scalar>(
    params: &ModelParams<F>,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<ScoreSet> {
    let records = manifest.split_records(split);
    if records.is_empty() {
        return Err(Error::Contract(format!("split {split} is empty")));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].sample_id.cmp(&records[b].sample_id));

    let mut scores = ScoreSet::new();
    for idx in order {
        let batch = load_batch::<F>(manifest, split, &[idx], false, 0, params.config.input_size)?;
        let (image, label) = &batch[0];
        let y = crate::model::predict(params, image)?;
        scores.push(records[idx].sample_id.clone(), *label, y.as_f64())?;
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, GenParams};
    use crate::tensor::graph::Graph;
    use crate::tensor::Tensor;
    use tempfile::tempdir;

    fn grads_for(params: &ParamSet<f64>) -> GradMap<f64> {
        // Loss = Σ x² over all parameters → gradient 2x everywhere.
        let mut g = Graph::new();
        let ids = g.params(params).unwrap();
        let mut terms = Vec::new();
        for id in ids {
            terms.push(g.inner_product(id, id).unwrap());
        }
        let loss = g.sum_scalars(&terms).unwrap();
        g.backward(loss).unwrap()
    }

    fn single_param(v: Vec<f64>) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(v)).unwrap();
        p
    }

    fn sgd_config(lr: f64) -> TrainConfig {
        TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: lr,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sgd_decrements_by_lr_times_grad() {
        let mut params = single_param(vec![1.0, -2.0, 0.5]);
        let grads = grads_for(&params); // 2x
        let mut state = OptimizerState::new();
        optimizer_step(&mut params, &grads, &mut state, &sgd_config(0.1)).unwrap();
        let expect = [1.0 - 0.1 * 2.0, -2.0 + 0.1 * 4.0, 0.5 - 0.1 * 1.0];
        assert_eq!(params.get("w").unwrap().data(), &expect);
    }

    #[test]
    fn zero_gradients_are_a_fixed_point() {
        for optimizer in [Optimizer::Sgd, Optimizer::Adam] {
            let mut params = single_param(vec![0.0, 0.0]);
            // x = 0 → gradient 2x = 0.
            let grads = grads_for(&params);
            let mut state = OptimizerState::new();
            let config = TrainConfig {
                optimizer,
                learning_rate: 0.5,
                ..TrainConfig::default()
            };
            optimizer_step(&mut params, &grads, &mut state, &config).unwrap();
            assert_eq!(params.get("w").unwrap().data(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn adam_single_step_matches_hand_computed_update() {
        let x0 = 1.5;
        let mut params = single_param(vec![x0]);
        let grads = grads_for(&params); // g = 2·x0 = 3
        let mut state = OptimizerState::new();
        let config = TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        optimizer_step(&mut params, &grads, &mut state, &config).unwrap();

        let g = 2.0 * x0;
        let m = (1.0 - ADAM_BETA1) * g;
        let v = (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m / (1.0 - ADAM_BETA1);
        let v_hat = v / (1.0 - ADAM_BETA2);
        let expect = x0 - 0.1 * m_hat / (v_hat.sqrt() + ADAM_EPS);
        let got = params.get("w").unwrap().data()[0];
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
    }

    #[test]
    fn adam_moments_persist_across_steps() {
        let mut params = single_param(vec![1.0]);
        let mut state = OptimizerState::new();
        let config = TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        let mut x = 1.0f64;
        for t in 1..=3 {
            let grads = grads_for(&params);
            let g = grads.get("w").unwrap()[0];
            optimizer_step(&mut params, &grads, &mut state, &config).unwrap();
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m / (1.0 - ADAM_BETA1.powi(t));
            let v_hat = v / (1.0 - ADAM_BETA2.powi(t));
            x -= 0.01 * m_hat / (v_hat.sqrt() + ADAM_EPS);
            let got = params.get("w").unwrap().data()[0];
            assert!((got - x).abs() < 1e-14, "step {t}: {got} vs {x}");
        }
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::from_vec(vec![1.0])).unwrap();
        params.insert("b", Tensor::from_vec(vec![2.0])).unwrap();
        // Gradients computed over a set that lacks "b".
        let grads = grads_for(&single_param(vec![1.0]));
        let mut state = OptimizerState::new();
        assert!(matches!(
            optimizer_step(&mut params, &grads, &mut state, &sgd_config(0.1)),
            Err(Error::Contract(_))
        ));
    }

    fn tiny_dataset(dir: &Path) -> DatasetManifest {
        let params = GenParams {
            seed: 5,
            n_identities: 6,
            bona_fide_per_identity: 2,
            n_morphs: 8,
            split_fraction: 0.5,
            size: 16,
            noise_std: 0.03,
        };
        generate_dataset(&params, dir).unwrap()
    }

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            input_channels: 1,
            input_size: 16,
            conv_channels: vec![2, 4],
            use_residual: true,
            embed_dim: 4,
            classifier_bias: false,
            feature_scale: 16.0,
        }
    }

    fn tiny_train_config(alpha: f64) -> TrainConfig {
        TrainConfig {
            alpha,
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn train_writes_checkpoints_and_log() {
        let data = tempdir().unwrap();
        let out = tempdir().unwrap();
        let manifest = tiny_dataset(data.path());
        let outcome: TrainOutcome<f32> =
            train(&tiny_train_config(100.0), &tiny_model_config(), &manifest, out.path()).unwrap();
        assert!(out.path().join(FINAL_CHECKPOINT).exists());
        assert!(out.path().join(BEST_CHECKPOINT).exists());
        assert!(out.path().join(TRAIN_LOG).exists());
        assert!(!outcome.log.is_empty());
        for r in &outcome.log {
            assert!(r.total.is_finite());
            assert!(r.reg >= 0.0);
            assert!(r.abs_cos <= 1.0 + 1e-6);
        }
        let text = std::fs::read_to_string(out.path().join(TRAIN_LOG)).unwrap();
        assert!(text.starts_with("epoch,step,bce,reg,total,z1_norm,z2_norm,abs_cos,ms\n"));
        assert_eq!(text.lines().count(), outcome.log.len() + 1);
    }

    #[test]
    fn alpha_zero_total_equals_bce_in_every_record() {
        let data = tempdir().unwrap();
        let out = tempdir().unwrap();
        let manifest = tiny_dataset(data.path());
        let outcome: TrainOutcome<f64> =
            train(&tiny_train_config(0.0), &tiny_model_config(), &manifest, out.path()).unwrap();
        for r in &outcome.log {
            assert_eq!(r.total, r.bce, "epoch {} step {}", r.epoch, r.step);
        }
    }

    #[test]
    fn reruns_reproduce_weights_bitwise() {
        let data = tempdir().unwrap();
        let manifest = tiny_dataset(data.path());
        let out1 = tempdir().unwrap();
        let out2 = tempdir().unwrap();
        let config = tiny_train_config(100.0);
        let a: TrainOutcome<f32> = train(&config, &tiny_model_config(), &manifest, out1.path()).unwrap();
        let b: TrainOutcome<f32> = train(&config, &tiny_model_config(), &manifest, out2.path()).unwrap();
        for ((name_a, t_a), (name_b, t_b)) in a.params.params.iter().zip(b.params.params.iter()) {
            assert_eq!(name_a, name_b);
            let bits_a: Vec<u32> = t_a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = t_b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "parameter {name_a}");
        }
        let final1 = std::fs::read(out1.path().join(FINAL_CHECKPOINT)).unwrap();
        let final2 = std::fs::read(out2.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(final1, final2);
    }

    #[test]
    fn evaluate_scores_whole_split_in_order() {
        let data = tempdir().unwrap();
        let manifest = tiny_dataset(data.path());
        let params: ModelParams<f32> = init_model(&tiny_model_config(), 3).unwrap();
        let scores = evaluate(&params, &manifest, Split::Test).unwrap();
        assert_eq!(scores.len(), manifest.split_records(Split::Test).len());
        let ids: Vec<&str> = scores.records().iter().map(|r| r.sample_id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        for r in scores.records() {
            assert!(r.score > 0.0 && r.score < 1.0);
        }
        let again = evaluate(&params, &manifest, Split::Test).unwrap();
        assert_eq!(scores.records(), again.records());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { alpha: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!("momentum".parse::<Optimizer>().is_err());
        assert_eq!("adam".parse::<Optimizer>().unwrap(), Optimizer::Adam);
    }
}
