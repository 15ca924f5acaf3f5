//! GAN / ACGAN objectives and the alternating adversarial trainer.
//!
//! All objectives here are log-probabilities to be *maximised*; the trainer
//! minimises their negation. The discriminator's tanh source score `s` is read
//! as `P(real) = clamp((s + 1) / 2, 1e-6, 1 - 1e-6)`.

use std::io::Write;

use pirtune_autodiff::{Element, Graph, Mode, Optimizer, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{CoreError, Result};
use crate::nets::{build_discriminator, build_generator, NetworkSpec, NetworkState, ScalePreset};
use crate::seeds::stream_seed;

pub const PROB_CLAMP: f64 = 1e-6;
pub const W_FAKE_CLASS: f64 = 1.5;
pub const W_REAL_CLASS: f64 = 1.0;

/// Scalar loss terms for one pair of batches.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanLossTerms {
    pub fake_image: f64,
    pub fake_image_fools: f64,
    pub real_image: f64,
    pub fake_image_class: Option<f64>,
    pub real_image_class: Option<f64>,
}

impl GanLossTerms {
    pub fn discriminator(&self) -> f64 {
        self.fake_image + self.real_image + W_REAL_CLASS * self.real_image_class.unwrap_or(0.0)
    }

    pub fn generator(&self) -> f64 {
        self.fake_image_fools + W_FAKE_CLASS * self.fake_image_class.unwrap_or(0.0)
    }
}

/// Per-example `log P(real)` and `log P(fake)`, each `[N, 1]`.
pub fn source_log_probs<T: Element>(g: &mut Graph<T>, d_out: Var) -> Result<(Var, Var)> {
    let s = g.columns(d_out, 0, 1)?;
    let p = g.offset(s, 1.0)?;
    let p = g.scale(p, 0.5)?;
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let q = g.scale(p, -1.0)?;
    let q = g.offset(q, 1.0)?;
    Ok((g.log(p)?, g.log(q)?))
}

/// Mean log-probability the class head assigns to `labels`.
pub fn class_log_prob<T: Element>(
    g: &mut Graph<T>,
    d_out: Var,
    classes: usize,
    labels: &[usize],
) -> Result<Var> {
    let logits = g.columns(d_out, 1, classes)?;
    let logp = g.log_softmax(logits)?;
    let picked = g.pick_columns(logp, labels)?;
    Ok(g.mean(picked)?)
}

/// Graph nodes of the discriminator objective.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorTerms {
    pub fake_image: Var,
    pub real_image: Var,
    pub real_image_class: Option<Var>,
    pub total: Var,
}

/// Graph nodes of the generator objective.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub fake_image_fools: Var,
    pub fake_image_class: Option<Var>,
    pub total: Var,
}

/// `L_fake_image + L_real_image (+ w_real_class · L_real_image_class)`.
///
/// The fake-class term is deliberately absent.
pub fn discriminator_objective<T: Element>(
    g: &mut Graph<T>,
    d_real: Var,
    d_fake: Var,
    classes: usize,
    real_labels: Option<&[usize]>,
) -> Result<DiscriminatorTerms> {
    let (real_lp, _) = source_log_probs(g, d_real)?;
    let (_, fake_lq) = source_log_probs(g, d_fake)?;
    let real_image = g.mean(real_lp)?;
    let fake_image = g.mean(fake_lq)?;
    let mut total = g.add(real_image, fake_image)?;
    let real_image_class = match (classes, real_labels) {
        (0, _) => None,
        (_, None) => return Err(CoreError::invalid("conditional discriminator needs real labels")),
        (c, Some(labels)) => {
            let term = class_log_prob(g, d_real, c, labels)?;
            let weighted = g.scale(term, W_REAL_CLASS)?;
            total = g.add(total, weighted)?;
            Some(term)
        }
    };
    Ok(DiscriminatorTerms {
        fake_image,
        real_image,
        real_image_class,
        total,
    })
}

/// `L_fake_image_fools (+ w_fake_class · L_fake_image_class)`, the
/// non-saturating generator objective.
pub fn generator_objective<T: Element>(
    g: &mut Graph<T>,
    d_fake: Var,
    classes: usize,
    fake_labels: Option<&[usize]>,
) -> Result<GeneratorTerms> {
    let (fake_lp, _) = source_log_probs(g, d_fake)?;
    let fake_image_fools = g.mean(fake_lp)?;
    let mut total = fake_image_fools;
    let fake_image_class = match (classes, fake_labels) {
        (0, _) => None,
        (_, None) => return Err(CoreError::invalid("conditional generator needs sampled classes")),
        (c, Some(labels)) => {
            let term = class_log_prob(g, d_fake, c, labels)?;
            let weighted = g.scale(term, W_FAKE_CLASS)?;
            total = g.add(total, weighted)?;
            Some(term)
        }
    };
    Ok(GeneratorTerms {
        fake_image_fools,
        fake_image_class,
        total,
    })
}

/// Latent batch: standard-normal codes plus sampled classes when conditional.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub z: Tensor<f32>,
    pub classes: Option<Vec<usize>>,
    pub class_count: usize,
}

impl Latents {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, n: usize, latent: usize, classes: usize) -> Self {
        let z = Tensor::from_fn(&[n, latent], |_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        });
        let classes_drawn =
            (classes > 0).then(|| (0..n).map(|_| rng.random_range(0..classes)).collect());
        Self {
            z,
            classes: classes_drawn,
            class_count: classes,
        }
    }

    pub fn len(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Generator input: `z`, followed by the one-hot class when conditional.
    pub fn input(&self) -> Tensor<f32> {
        let Some(classes) = &self.classes else {
            return self.z.clone();
        };
        let (n, d) = (self.len(), self.z.shape()[1]);
        let width = d + self.class_count;
        let mut data = vec![0.0f32; n * width];
        for (i, row) in data.chunks_mut(width).enumerate() {
            row[..d].copy_from_slice(&self.z.data()[i * d..(i + 1) * d]);
            row[d + classes[i]] = 1.0;
        }
        Tensor::new(vec![n, width], data).expect("latent batch is non-empty")
    }
}

/// Generator/discriminator pair with their specs.
#[derive(Clone, Debug, PartialEq)]
pub struct Gan {
    pub g_spec: NetworkSpec,
    pub d_spec: NetworkSpec,
    pub g: NetworkState,
    pub d: NetworkState,
    pub latent_size: usize,
}

impl Gan {
    /// Fresh networks for `preset`, initialised from `seed`.
    pub fn new(preset: &ScalePreset, conditional: bool, seed: u64) -> Result<Self> {
        let g_spec = build_generator(preset, conditional)?;
        let d_spec = build_discriminator(preset, conditional)?;
        let g = g_spec.init_state(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, "init/g")));
        let d = d_spec.init_state(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, "init/d")));
        Ok(Self {
            g_spec,
            d_spec,
            g,
            d,
            latent_size: preset.latent_size,
        })
    }

    /// Wraps existing states, checking them against the specs.
    pub fn from_states(
        g_spec: NetworkSpec,
        d_spec: NetworkSpec,
        g: NetworkState,
        d: NetworkState,
    ) -> Result<Self> {
        g_spec.check_state(&g)?;
        d_spec.check_state(&d)?;
        let latent_size = g_spec.input.size() - g_spec.classes;
        Ok(Self {
            g_spec,
            d_spec,
            g,
            d,
            latent_size,
        })
    }

    pub fn classes(&self) -> usize {
        self.d_spec.classes
    }

    pub fn sample_latents<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Latents {
        Latents::sample(rng, n, self.latent_size, self.g_spec.classes)
    }

    pub fn generate(&self, latents: &Latents) -> Result<Tensor<f32>> {
        self.g_spec.infer(&self.g, &latents.input(), 128)
    }

    /// `n` images from fresh latents drawn with `seed`.
    pub fn sample_images(&self, n: usize, seed: u64) -> Result<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents = self.sample_latents(&mut rng, n);
        self.generate(&latents)
    }
}

fn evaluate_terms(
    gan: &Gan,
    real: &Tensor<f32>,
    real_labels: Option<&[usize]>,
    latents: &Latents,
) -> Result<GanLossTerms> {
    if real.is_empty() || latents.is_empty() {
        return Err(CoreError::invalid("loss batches must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::<f32>::new();
    let mut d_frozen = gan.d.clone();
    d_frozen.freeze();
    let mut g_frozen = gan.g.clone();
    g_frozen.freeze();
    let z = g.constant(latents.input());
    let fake = gan.g_spec.forward(&mut g, &g_frozen, z, Mode::Infer, &mut rng)?.output;
    let x = g.constant(real.clone());
    let d_real = gan.d_spec.forward(&mut g, &d_frozen, x, Mode::Infer, &mut rng)?.output;
    let d_fake = gan.d_spec.forward(&mut g, &d_frozen, fake, Mode::Infer, &mut rng)?.output;
    let classes = gan.classes();
    let d_terms = discriminator_objective(&mut g, d_real, d_fake, classes, real_labels)?;
    let g_terms = generator_objective(&mut g, d_fake, classes, latents.classes.as_deref())?;
    let val = |v: Var| -> Result<f64> { Ok(g.value(v).item()? as f64) };
    Ok(GanLossTerms {
        fake_image: val(d_terms.fake_image)?,
        fake_image_fools: val(g_terms.fake_image_fools)?,
        real_image: val(d_terms.real_image)?,
        fake_image_class: g_terms.fake_image_class.map(val).transpose()?,
        real_image_class: d_terms.real_image_class.map(val).transpose()?,
    })
}

/// Unconditional loss terms on a fixed pair of batches, with both networks in
/// inference mode.
pub fn gan_losses(gan: &Gan, real: &Tensor<f32>, latents: &Latents) -> Result<GanLossTerms> {
    if gan.classes() > 0 {
        return Err(CoreError::invalid("gan_losses needs unconditional networks; use acgan_losses"));
    }
    evaluate_terms(gan, real, None, latents)
}

/// ACGAN loss terms, including the class cross-entropy terms.
pub fn acgan_losses(
    gan: &Gan,
    real: &Tensor<f32>,
    real_labels: Option<&[usize]>,
    latents: &Latents,
) -> Result<GanLossTerms> {
    if gan.classes() == 0 {
        return Err(CoreError::invalid("acgan_losses needs conditional networks"));
    }
    let labels = real_labels.ok_or_else(|| CoreError::invalid("acgan_losses: missing real labels"))?;
    if labels.len() != real.shape()[0] {
        return Err(CoreError::invalid("acgan_losses: label count differs from batch size"));
    }
    if latents.classes.is_none() {
        return Err(CoreError::invalid("acgan_losses: latent batch has no classes"));
    }
    evaluate_terms(gan, real, Some(labels), latents)
}

/// Optimiser settings shared by pretraining and tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanConfig {
    pub batch_size: usize,
    pub d_learning_rate: f64,
    pub g_learning_rate: f64,
    pub beta1: f64,
    pub log_interval: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            d_learning_rate: 1e-5,
            g_learning_rate: 1e-5,
            beta1: 0.5,
            log_interval: 100,
        }
    }
}

/// Scalar term added (with a weight) to the generator objective during a G
/// step. Receives the fake-image node and returns a scalar to maximise.
pub struct GeneratorBonus<'a> {
    pub weight: f64,
    pub term: &'a dyn Fn(&mut Graph<f32>, Var) -> Result<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorStep {
    pub fake_image: f64,
    pub real_image: f64,
    pub real_image_class: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorStep {
    pub fake_image_fools: f64,
    pub fake_image_class: Option<f64>,
    pub bonus: Option<f64>,
    /// Value of the maximised objective, bonus included.
    pub total: f64,
}

/// Optimisers and sampling stream for alternating D/G updates.
#[derive(Clone, Debug)]
pub struct AdversarialTrainer {
    pub d_opt: Optimizer,
    pub g_opt: Optimizer,
    pub batch_size: usize,
    rng: ChaCha8Rng,
    step: usize,
}

impl AdversarialTrainer {
    pub fn new(config: &GanConfig, seed: u64) -> Result<Self> {
        if config.batch_size < 2 {
            return Err(CoreError::invalid("batch size must be at least 2 for batch norm"));
        }
        Ok(Self {
            d_opt: Optimizer::rmsprop(config.d_learning_rate),
            g_opt: Optimizer::adam(config.g_learning_rate, config.beta1),
            batch_size: config.batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        })
    }

    /// Completed D/G iterations.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One RMSProp step on the discriminator. Fakes come from the current
    /// generator without a gradient path into it.
    pub fn d_step(&mut self, gan: &mut Gan, corpus: &Corpus) -> Result<DiscriminatorStep> {
        let b = self.batch_size;
        let idx: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..corpus.len())).collect();
        let (real, labels) = corpus.batch(&idx)?;
        let latents = gan.sample_latents(&mut self.rng, b);
        let fake = gan.generate(&latents)?;

        let classes = gan.classes();
        let mut g = Graph::<f32>::new();
        let x_real = g.constant(real);
        let x_fake = g.constant(fake);
        let real_pass = gan.d_spec.forward(&mut g, &gan.d, x_real, Mode::Train, &mut self.rng)?;
        gan.d.commit_stats(real_pass.stats_updates);
        let fake_pass = gan.d_spec.forward(&mut g, &gan.d, x_fake, Mode::Train, &mut self.rng)?;
        gan.d.commit_stats(fake_pass.stats_updates);
        let labels = (classes > 0).then_some(labels);
        let terms = discriminator_objective(
            &mut g,
            real_pass.output,
            fake_pass.output,
            classes,
            labels.as_deref(),
        )?;
        let loss = g.scale(terms.total, -1.0)?;
        let val = |v: Var| g.value(v).item().map(|x| x as f64);
        let record = DiscriminatorStep {
            fake_image: val(terms.fake_image)?,
            real_image: val(terms.real_image)?,
            real_image_class: terms.real_image_class.map(val).transpose()?,
            total: val(terms.total)?,
        };
        let outputs_finite =
            g.value(real_pass.output).all_finite() && g.value(fake_pass.output).all_finite();
        if !record.total.is_finite() || !outputs_finite {
            return Err(CoreError::Diverged {
                stage: "discriminator step",
                step: self.step,
            });
        }
        let mut grads = g.backward(loss)?;
        let mut bound = real_pass.params;
        bound.extend(fake_pass.params);
        gan.d.apply_gradients(&mut self.d_opt, &bound, &mut grads)?;
        Ok(record)
    }

    /// One Adam step on the generator against the current discriminator
    /// (train-mode batch statistics, running statistics left untouched).
    pub fn g_step(&mut self, gan: &mut Gan, bonus: Option<&GeneratorBonus>) -> Result<GeneratorStep> {
        let latents = gan.sample_latents(&mut self.rng, self.batch_size);
        let mut d_view = gan.d.clone();
        d_view.freeze();

        let mut g = Graph::<f32>::new();
        let z = g.constant(latents.input());
        let g_pass = gan.g_spec.forward(&mut g, &gan.g, z, Mode::Train, &mut self.rng)?;
        let fake = g_pass.output;
        let d_pass = gan.d_spec.forward(&mut g, &d_view, fake, Mode::Train, &mut self.rng)?;
        let terms = generator_objective(&mut g, d_pass.output, gan.classes(), latents.classes.as_deref())?;
        let mut total = terms.total;
        let mut bonus_node = None;
        if let Some(bonus) = bonus {
            let term = (bonus.term)(&mut g, fake)?;
            let weighted = g.scale(term, bonus.weight)?;
            total = g.add(total, weighted)?;
            bonus_node = Some(term);
        }
        let loss = g.scale(total, -1.0)?;
        let val = |v: Var| g.value(v).item().map(|x| x as f64);
        let record = GeneratorStep {
            fake_image_fools: val(terms.fake_image_fools)?,
            fake_image_class: terms.fake_image_class.map(val).transpose()?,
            bonus: bonus_node.map(val).transpose()?,
            total: val(total)?,
        };
        if !record.total.is_finite() || !g.value(d_pass.output).all_finite() {
            return Err(CoreError::Diverged {
                stage: "generator step",
                step: self.step,
            });
        }
        let mut grads = g.backward(loss)?;
        gan.g.apply_gradients(&mut self.g_opt, &g_pass.params, &mut grads)?;
        Ok(record)
    }

    /// One D step followed by one G step.
    pub fn iteration(
        &mut self,
        gan: &mut Gan,
        corpus: &Corpus,
        bonus: Option<&GeneratorBonus>,
    ) -> Result<(DiscriminatorStep, GeneratorStep)> {
        let d = self.d_step(gan, corpus)?;
        let g = self.g_step(gan, bonus)?;
        self.step += 1;
        Ok((d, g))
    }
}

/// One logged row of pretraining history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub terms: GanLossTerms,
}

impl HistoryRow {
    fn from_steps(step: usize, d: &DiscriminatorStep, g: &GeneratorStep) -> Self {
        Self {
            step,
            terms: GanLossTerms {
                fake_image: d.fake_image,
                fake_image_fools: g.fake_image_fools,
                real_image: d.real_image,
                fake_image_class: g.fake_image_class,
                real_image_class: d.real_image_class,
            },
        }
    }
}

/// Writes history as CSV: step, L_disc, L_gen and the component terms.
pub fn write_history_csv<W: Write>(rows: &[HistoryRow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "step,L_disc,L_gen,L_fake_image,L_fake_image_fools,L_real_image,L_fake_image_class,L_real_image_class"
    )?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let t = &r.terms;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            t.discriminator(),
            t.generator(),
            t.fake_image,
            t.fake_image_fools,
            t.real_image,
            opt(t.fake_image_class),
            opt(t.real_image_class)
        )?;
    }
    Ok(())
}

/// Runs `steps` alternating iterations, logging every `config.log_interval`.
pub fn pretrain(
    gan: &mut Gan,
    corpus: &Corpus,
    steps: usize,
    config: &GanConfig,
    seed: u64,
) -> Result<Vec<HistoryRow>> {
    if corpus.size != gan.d_spec.input.batched(1)[1] {
        return Err(CoreError::invalid(format!(
            "corpus images are {0}×{0}, networks expect {1:?}",
            corpus.size, gan.d_spec.input
        )));
    }
    let mut trainer = AdversarialTrainer::new(config, seed)?;
    let interval = config.log_interval.max(1);
    let mut history = Vec::with_capacity(steps / interval);
    for step in 1..=steps {
        let (d, g) = trainer.iteration(gan, corpus, None)?;
        if step % interval == 0 {
            history.push(HistoryRow::from_steps(step, &d, &g));
        }
    }
    Ok(history)
}

/// Fraction of `n` real and `n` generated images the discriminator labels
/// correctly (inference mode, threshold `P(real) = 0.5`).
pub fn discriminator_accuracy(gan: &Gan, corpus: &Corpus, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..corpus.len())).collect();
    let (real, _) = corpus.batch(&idx)?;
    let latents = gan.sample_latents(&mut rng, n);
    let fake = gan.generate(&latents)?;
    let d_real = gan.d_spec.infer(&gan.d, &real, 128)?;
    let d_fake = gan.d_spec.infer(&gan.d, &fake, 128)?;
    let width = d_real.last_dim();
    let score = |t: &Tensor<f32>, real: bool| {
        t.data()
            .chunks(width)
            .filter(|row| (row[0] > 0.0) == real)
            .count()
    };
    Ok((score(&d_real, true) + score(&d_fake, false)) as f64 / (2 * n) as f64)
}
