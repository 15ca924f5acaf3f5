//! Procedural two-class "landscape" corpus and the oracle classifier trained
//! on it.
//!
//! Class 0 ("mountain"): a vertical sky gradient with one to three triangles
//! rising from the bottom edge. Class 1 ("coast"): the same sky above a
//! horizon, sea below it and sometimes a sand strip at the bottom. Every image
//! gets its own hue jitter and a small noise texture.

use pirtune_autodiff::{Graph, Mode, Optimizer, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::nets::{NetworkSpec, NetworkState};
use crate::seeds::derive_seed;

pub const SUPPORTED_SIZES: [usize; 3] = [16, 32, 64];

/// Labelled images in `[-1, 1]`, NHWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub seed: u64,
    pub size: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Batch of images and labels at the given indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn labels_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![self.labels.len()],
            self.labels.iter().map(|&l| l as f32).collect(),
        )
        .expect("corpus is non-empty")
    }
}

type Rgb = [f32; 3];

fn jitter(rng: &mut ChaCha8Rng, base: Rgb, amount: f32) -> Rgb {
    base.map(|c| (c + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
}

fn lerp(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

fn render(rng: &mut ChaCha8Rng, label: usize, size: usize) -> Vec<f32> {
    let s = size as f32;
    let mut px = vec![[0.0f32; 3]; size * size];

    let sky_top = jitter(rng, [0.20, 0.40, 0.85], 0.15);
    let sky_low = jitter(rng, [0.75, 0.82, 0.95], 0.12);
    for y in 0..size {
        let t = y as f32 / (s - 1.0);
        for x in 0..size {
            px[y * size + x] = lerp(sky_top, sky_low, t);
        }
    }

    if label == 0 {
        let peaks = rng.random_range(1..=3);
        for p in 0..peaks {
            let cx = rng.random_range(0.0..s);
            let half = rng.random_range(0.3..0.6) * s;
            let peak_y = rng.random_range(0.2..0.6) * s;
            let slope = (s - peak_y) / half;
            let shade = 1.0 - 0.15 * p as f32;
            let rock = jitter(rng, [0.45 * shade, 0.40 * shade, 0.35 * shade], 0.12);
            let snow = rng.random_bool(0.5);
            for y in 0..size {
                for x in 0..size {
                    let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                    if fy >= peak_y + (fx - cx).abs() * slope {
                        let near_peak = fy < peak_y + 0.15 * s;
                        px[y * size + x] = if snow && near_peak {
                            [0.92, 0.93, 0.95]
                        } else {
                            rock
                        };
                    }
                }
            }
        }
    } else {
        let horizon = (rng.random_range(0.4..0.65) * s) as usize;
        let sea_near = jitter(rng, [0.05, 0.35, 0.55], 0.12);
        let sea_far = jitter(rng, [0.10, 0.45, 0.65], 0.10);
        let sand_rows = if rng.random_bool(0.5) {
            (rng.random_range(0.05..0.2) * s) as usize
        } else {
            0
        };
        let sand = jitter(rng, [0.85, 0.75, 0.50], 0.08);
        for y in horizon..size {
            let t = (y - horizon) as f32 / (s - horizon as f32).max(1.0);
            for x in 0..size {
                px[y * size + x] = if y >= size - sand_rows {
                    sand
                } else {
                    lerp(sea_far, sea_near, t)
                };
            }
        }
    }

    let mut out = Vec::with_capacity(size * size * 3);
    for p in px {
        for c in p {
            let v = (c + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
            out.push(2.0 * v - 1.0);
        }
    }
    out
}

/// Deterministic corpus of `n` images of `size × size` pixels; labels
/// alternate so the classes are balanced.
pub fn generate_corpus(seed: u64, n: usize, size: usize) -> Result<Corpus> {
    if n < 2 {
        return Err(CoreError::invalid(format!("corpus needs at least 2 images, got {n}")));
    }
    if !SUPPORTED_SIZES.contains(&size) {
        return Err(CoreError::invalid(format!(
            "image size {size} not in {SUPPORTED_SIZES:?}"
        )));
    }
    let mut data = Vec::with_capacity(n * size * size * 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        data.extend(render(&mut rng, label, size));
        labels.push(label);
    }
    Ok(Corpus {
        images: Tensor::new(vec![n, size, size, 3], data)?,
        labels,
        seed,
        size,
    })
}

/// Summary of an oracle training run.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

const ORACLE_LR: f64 = 1e-3;
const ORACLE_BATCH: usize = 32;

/// Trains the oracle classifier with cross-entropy and Adam, then freezes it.
pub fn train_oracle(
    corpus: &Corpus,
    spec: &NetworkSpec,
    steps: usize,
    seed: u64,
) -> Result<(NetworkState, OracleReport)> {
    if corpus.labels.iter().any(|&l| l >= spec.classes) {
        return Err(CoreError::invalid("corpus labels exceed oracle class count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = spec.init_state(&mut rng);
    let mut opt = Optimizer::adam(ORACLE_LR, 0.9);
    let window = (steps / 10).clamp(1, 50);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let idx: Vec<usize> = (0..ORACLE_BATCH)
            .map(|_| rng.random_range(0..corpus.len()))
            .collect();
        let (images, labels) = corpus.batch(&idx)?;
        let mut g = Graph::<f32>::new();
        let x = g.constant(images);
        let pass = spec.forward(&mut g, &state, x, Mode::Train, &mut rng)?;
        let logp = g.log_softmax(pass.output)?;
        let picked = g.pick_columns(logp, &labels)?;
        let mean = g.mean(picked)?;
        let loss = g.scale(mean, -1.0)?;
        let value = g.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(CoreError::Diverged {
                stage: "oracle training",
                step,
            });
        }
        losses.push(value);
        let mut grads = g.backward(loss)?;
        state.apply_gradients(&mut opt, &pass.params, &mut grads)?;
    }
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    let initial_loss = avg(&losses[..window.min(losses.len())]);
    let final_loss = avg(&losses[losses.len().saturating_sub(window)..]);
    state.freeze();
    let train_accuracy = classifier_accuracy(spec, &state, corpus)?;
    Ok((
        state,
        OracleReport {
            initial_loss,
            final_loss,
            train_accuracy,
        },
    ))
}

/// Fraction of corpus images whose argmax class matches the label.
pub fn classifier_accuracy(spec: &NetworkSpec, state: &NetworkState, corpus: &Corpus) -> Result<f64> {
    let logits = spec.infer(state, &corpus.images, 128)?;
    let k = logits.last_dim();
    let correct = logits
        .data()
        .chunks(k)
        .zip(&corpus.labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == label
        })
        .count();
    Ok(correct as f64 / corpus.len() as f64)
}
