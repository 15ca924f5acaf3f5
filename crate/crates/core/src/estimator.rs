//! The surrogate PIR estimator: a 100-way bin classifier whose decoded
//! output (expected bin centre under a temperature-scaled softmax) stays
//! differentiable with respect to the input image.

use pirtune_autodiff::{Element, Graph, Mode, Optimizer, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nets::{NetworkSpec, NetworkState, PIR_BINS};
use crate::objectives::PirDataset;
use crate::seeds::stream_seed;

pub const TRAIN_TEMPERATURE: f64 = 1.0;
pub const DECODE_TEMPERATURE: f64 = 0.01;

/// Maps PIRs to the 100 equal-width bins on `[0, 1]` and back.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BinCodec;

impl BinCodec {
    pub const BINS: usize = PIR_BINS;

    /// `floor(100·p)`, with `p = 1` in the last bin.
    pub fn encode(p: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&p) {
            return Err(CoreError::invalid(format!("PIR {p} outside [0, 1]")));
        }
        Ok(((p * Self::BINS as f64).floor() as usize).min(Self::BINS - 1))
    }

    pub fn center(bin: usize) -> f64 {
        (bin as f64 + 0.5) / Self::BINS as f64
    }

    /// Bin centres as a `[100, 1]` column.
    pub fn centers<T: Element>() -> Tensor<T> {
        Tensor::from_fn(&[Self::BINS, 1], |i| T::of(Self::center(i)))
    }
}

/// Expected bin centre under `softmax(logits / temperature)`, per row,
/// as an `[N, 1]` node.
pub fn decode_node<T: Element>(g: &mut Graph<T>, logits: Var, temperature: f64) -> Result<Var> {
    let probs = g.softmax_with_temperature(logits, temperature)?;
    let centers = g.constant(BinCodec::centers());
    Ok(g.matmul(probs, centers)?)
}

/// Decoded PIR for each row of a `[N, 100]` logit tensor.
pub fn decode_logits(logits: &Tensor<f32>, temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 {
        return Err(CoreError::invalid("temperature must be positive"));
    }
    let k = logits.last_dim();
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let weights: Vec<f64> = row.iter().map(|&v| ((v as f64 - max) / temperature).exp()).collect();
            let z: f64 = weights.iter().sum();
            weights.iter().enumerate().map(|(i, w)| w / z * BinCodec::center(i)).sum()
        })
        .collect())
}

/// Estimated PIR of each image.
pub fn predict_pir(
    spec: &NetworkSpec,
    state: &NetworkState,
    images: &Tensor<f32>,
    temperature: f64,
) -> Result<Vec<f64>> {
    let logits = spec.infer(state, images, 128)?;
    decode_logits(&logits, temperature)
}

/// `mean_batch R(x)` recorded on `g` with the estimator's weights as
/// constants, so gradients reach `x` and nothing else.
pub fn estimated_pir_mean<T: Element>(
    g: &mut Graph<T>,
    spec: &NetworkSpec,
    frozen: &NetworkState,
    images: Var,
    temperature: f64,
) -> Result<Var> {
    if !frozen.is_frozen() {
        return Err(CoreError::invalid("estimator must be frozen before it is used as a loss"));
    }
    // inference mode draws nothing from the rng
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = spec.forward(g, frozen, images, Mode::Infer, &mut rng)?;
    let pir = decode_node(g, pass.output, temperature)?;
    Ok(g.mean(pir)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub log_interval: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            learning_rate: 5e-4,
            beta1: 0.9,
            batch_size: 32,
            holdout_fraction: 0.1,
            log_interval: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    /// Mean |decoded − observed| on the held-out rows at decode temperature.
    pub heldout_mae: f64,
    pub train_rows: usize,
    pub heldout_rows: usize,
    /// (step, cross-entropy) every `log_interval` steps.
    pub history: Vec<(usize, f64)>,
}

/// Seeded split of `n` rows into (train, held-out) index lists.
pub fn split_indices(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = if n >= 2 {
        ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let train = idx.split_off(held);
    (train, idx)
}

/// Trains a fresh estimator on `dataset` and returns it frozen.
pub fn train_estimator(
    dataset: &PirDataset,
    spec: &NetworkSpec,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<(NetworkState, EstimatorReport)> {
    let init = spec.init_state(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, "init")));
    continue_training(init, dataset, spec, config, seed)
}

/// Further cross-entropy training of an existing estimator (unfrozen for the
/// duration and frozen again on return).
pub fn continue_training(
    mut state: NetworkState,
    dataset: &PirDataset,
    spec: &NetworkSpec,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<(NetworkState, EstimatorReport)> {
    if dataset.is_empty() {
        return Err(CoreError::invalid("PIR dataset is empty"));
    }
    let bins = dataset
        .records
        .iter()
        .map(|r| BinCodec::encode(r.observed_pir))
        .collect::<Result<Vec<_>>>()?;
    let (train, held) = split_indices(dataset.len(), config.holdout_fraction, stream_seed(seed, "split"));
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "batches"));
    let mut opt = Optimizer::adam(config.learning_rate, config.beta1);
    state.unfreeze();
    let interval = config.log_interval.max(1);
    let mut history = Vec::new();
    for step in 1..=config.steps {
        let rows: Vec<usize> = (0..config.batch_size)
            .map(|_| train[rng.random_range(0..train.len())])
            .collect();
        let labels: Vec<usize> = rows.iter().map(|&r| bins[r]).collect();
        let mut g = Graph::<f32>::new();
        let x = g.constant(dataset.images.select_rows(&rows)?);
        let pass = spec.forward(&mut g, &state, x, Mode::Train, &mut rng)?;
        let scaled = g.scale(pass.output, 1.0 / TRAIN_TEMPERATURE)?;
        let logp = g.log_softmax(scaled)?;
        let picked = g.pick_columns(logp, &labels)?;
        let mean = g.mean(picked)?;
        let loss = g.scale(mean, -1.0)?;
        let value = g.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(CoreError::Diverged {
                stage: "estimator training",
                step,
            });
        }
        if step % interval == 0 {
            history.push((step, value));
        }
        let mut grads = g.backward(loss)?;
        state.apply_gradients(&mut opt, &pass.params, &mut grads)?;
    }
    state.freeze();
    let eval_rows = if held.is_empty() { &train } else { &held };
    let predicted = predict_pir(
        spec,
        &state,
        &dataset.images.select_rows(eval_rows)?,
        DECODE_TEMPERATURE,
    )?;
    let heldout_mae = predicted
        .iter()
        .zip(eval_rows)
        .map(|(p, &r)| (p - dataset.records[r].observed_pir).abs())
        .sum::<f64>()
        / eval_rows.len() as f64;
    Ok((
        state,
        EstimatorReport {
            heldout_mae,
            train_rows: train.len(),
            heldout_rows: held.len(),
            history,
        },
    ))
}
