//! Tuning a pretrained generator against a frozen PIR estimator, and the
//! bookkeeping around it: introspection and the two-round iteration protocol.

use std::collections::BTreeMap;
use std::io::Write;

use pirtune_autodiff::{Graph, Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{CoreError, Result};
use crate::estimator::{continue_training, estimated_pir_mean, predict_pir, EstimatorConfig, DECODE_TEMPERATURE};
use crate::gan::{generator_objective, AdversarialTrainer, Gan, GanConfig, GeneratorBonus, Latents};
use crate::nets::{NetworkSpec, NetworkState};
use crate::objectives::{
    build_pir_dataset, true_pirs, Oracle, PirDataset, PirObjective, DEFAULT_IMAGES, DEFAULT_IMPRESSIONS,
};
use crate::seeds::stream_seed;
use crate::stats::{evaluate_run, EffectSize};

pub const DEFAULT_W_PIR: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningConfig {
    pub w_pir: f64,
    pub g_learning_rate: f64,
    pub d_learning_rate: f64,
    pub beta1: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub temperature: f64,
    pub log_interval: usize,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            w_pir: DEFAULT_W_PIR,
            g_learning_rate: 1e-6,
            d_learning_rate: 1e-6,
            beta1: 0.5,
            batch_size: 32,
            steps: 5_000,
            temperature: DECODE_TEMPERATURE,
            log_interval: 100,
        }
    }
}

impl TuningConfig {
    /// Optimiser settings for the adversarial part of tuning.
    pub fn gan_config(&self) -> GanConfig {
        GanConfig {
            batch_size: self.batch_size,
            d_learning_rate: self.d_learning_rate,
            g_learning_rate: self.g_learning_rate,
            beta1: self.beta1,
            log_interval: self.log_interval,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.w_pir >= 0.0 && self.w_pir.is_finite()) {
            return Err(CoreError::invalid("w_pir must be finite and non-negative"));
        }
        if self.temperature <= 0.0 {
            return Err(CoreError::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

/// Frozen estimator with its spec.
#[derive(Clone, Copy, Debug)]
pub struct Estimator<'a> {
    pub spec: &'a NetworkSpec,
    pub state: &'a NetworkState,
}

/// Value and generator gradients of `L_fake_image_fools + w_pir · L_PIR`.
#[derive(Clone, Debug)]
pub struct CombinedLoss {
    pub fake_image_fools: f64,
    pub fake_image_class: Option<f64>,
    pub l_pir: f64,
    pub total: f64,
    /// Gradient of `total` for every trainable generator parameter.
    pub generator_grads: BTreeMap<String, Tensor<f32>>,
    /// Gradients that reached any estimator parameter (empty when frozen).
    pub estimator_grads: BTreeMap<String, Tensor<f32>>,
    /// Gradients that reached any discriminator parameter.
    pub discriminator_grads: BTreeMap<String, Tensor<f32>>,
}

/// Evaluates the tuning objective on a fixed latent batch (inference-mode
/// discriminator) without changing any network.
pub fn combined_generator_loss(
    gan: &Gan,
    estimator: Estimator,
    latents: &Latents,
    w_pir: f64,
    temperature: f64,
) -> Result<CombinedLoss> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::<f32>::new();
    let z = g.constant(latents.input());
    let g_pass = gan.g_spec.forward(&mut g, &gan.g, z, Mode::Train, &mut rng)?;
    let mut d_view = gan.d.clone();
    d_view.freeze();
    let d_pass = gan.d_spec.forward(&mut g, &d_view, g_pass.output, Mode::Infer, &mut rng)?;
    let terms = generator_objective(&mut g, d_pass.output, gan.classes(), latents.classes.as_deref())?;
    let est_pass = estimator
        .spec
        .forward(&mut g, estimator.state, g_pass.output, Mode::Infer, &mut rng)?;
    let pir = crate::estimator::decode_node(&mut g, est_pass.output, temperature)?;
    let l_pir = g.mean(pir)?;
    let weighted = g.scale(l_pir, w_pir)?;
    let total = g.add(terms.total, weighted)?;
    let grads = g.backward(total)?;
    let collect = |bound: &[(String, pirtune_autodiff::Var)]| {
        bound
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|t| (n.clone(), t.clone())))
            .collect::<BTreeMap<_, _>>()
    };
    let val = |v| g.value(v).item().map(|x| x as f64);
    Ok(CombinedLoss {
        fake_image_fools: val(terms.fake_image_fools)?,
        fake_image_class: terms.fake_image_class.map(val).transpose()?,
        l_pir: val(l_pir)?,
        total: val(total)?,
        generator_grads: collect(&g_pass.params),
        estimator_grads: collect(&est_pass.params),
        discriminator_grads: collect(&d_pass.params),
    })
}

/// One logged row of tuning history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub step: usize,
    pub l_pir: f64,
    pub l_gen_fools: f64,
    pub l_disc: f64,
}

pub fn write_tune_history_csv<W: Write>(rows: &[TuneRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,L_PIR,L_gen_fools,L_disc")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.step, r.l_pir, r.l_gen_fools, r.l_disc)?;
    }
    Ok(())
}

/// Alternating D / G steps where the generator maximises
/// `L_fake_image_fools + w_pir · L_PIR`; the discriminator keeps its
/// pretraining objective. The estimator must be frozen and is never written.
pub fn tune(
    gan: &mut Gan,
    corpus: &Corpus,
    estimator: Estimator,
    config: &TuningConfig,
    seed: u64,
) -> Result<Vec<TuneRow>> {
    config.validate()?;
    if !estimator.state.is_frozen() {
        return Err(CoreError::invalid("estimator must be frozen before tuning"));
    }
    estimator.spec.check_state(estimator.state)?;
    let term = |g: &mut Graph<f32>, fake| {
        estimated_pir_mean(g, estimator.spec, estimator.state, fake, config.temperature)
    };
    let bonus = GeneratorBonus {
        weight: config.w_pir,
        term: &term,
    };
    let mut trainer = AdversarialTrainer::new(&config.gan_config(), seed)?;
    let interval = config.log_interval.max(1);
    let mut history = Vec::with_capacity(config.steps / interval);
    for step in 1..=config.steps {
        let (d, g) = trainer.iteration(gan, corpus, Some(&bonus))?;
        if step % interval == 0 {
            history.push(TuneRow {
                step,
                l_pir: g.bonus.unwrap_or(f64::NAN),
                l_gen_fools: g.fake_image_fools,
                l_disc: d.total,
            });
        }
    }
    Ok(history)
}

/// Estimated (via the estimator) and true mean PIR before and after tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrospectionRecord {
    pub objective_id: String,
    pub n: usize,
    pub estimated_pre: f64,
    pub estimated_post: f64,
    pub true_pre: f64,
    pub true_post: f64,
    pub estimated_delta: f64,
    pub true_delta: f64,
    /// Standard errors of the two true means.
    pub true_se_pre: f64,
    pub true_se_post: f64,
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Compares the estimator's view of a tuning run with the truth on `n` fresh
/// samples from each generator.
pub fn introspect(
    pre: &Gan,
    post: &Gan,
    estimator: Estimator,
    objective: &PirObjective,
    oracle: Option<Oracle>,
    n: usize,
    seed: u64,
) -> Result<IntrospectionRecord> {
    if n < 2 {
        return Err(CoreError::invalid("introspection needs at least 2 samples"));
    }
    let images_pre = pre.sample_images(n, stream_seed(seed, "pre"))?;
    let images_post = post.sample_images(n, stream_seed(seed, "post"))?;
    let est = |images: &Tensor<f32>| -> Result<f64> {
        let p = predict_pir(estimator.spec, estimator.state, images, DECODE_TEMPERATURE)?;
        Ok(p.iter().sum::<f64>() / p.len() as f64)
    };
    let estimated_pre = est(&images_pre)?;
    let estimated_post = est(&images_post)?;
    let (true_pre, true_se_pre) = mean_and_se(&true_pirs(&images_pre, objective, oracle)?);
    let (true_post, true_se_post) = mean_and_se(&true_pirs(&images_post, objective, oracle)?);
    Ok(IntrospectionRecord {
        objective_id: objective.to_string(),
        n,
        estimated_pre,
        estimated_post,
        true_pre,
        true_post,
        estimated_delta: estimated_post - estimated_pre,
        true_delta: true_post - true_pre,
        true_se_pre,
        true_se_post,
    })
}

/// Inputs carried over from a completed first tuning round.
pub struct FirstRound<'a> {
    pub pretrained: &'a Gan,
    pub tuned: &'a Gan,
    pub dataset: &'a PirDataset,
    pub estimator_spec: &'a NetworkSpec,
    pub estimator_state: &'a NetworkState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationConfig {
    pub n_images: usize,
    pub n_impressions: u64,
    pub eval_samples: usize,
    /// Continued estimator training on the merged dataset.
    pub estimator: EstimatorConfig,
    pub tuning: TuningConfig,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            n_images: DEFAULT_IMAGES,
            n_impressions: DEFAULT_IMPRESSIONS,
            eval_samples: 1000,
            estimator: EstimatorConfig {
                steps: 2_500,
                ..EstimatorConfig::default()
            },
            tuning: TuningConfig::default(),
        }
    }
}

/// Second-round artifacts.
#[derive(Clone, Debug)]
pub struct IterationOutcome {
    pub merged: PirDataset,
    pub estimator: NetworkState,
    pub estimator_mae: f64,
    pub gan: Gan,
    pub history: Vec<TuneRow>,
    /// Effect of round one (pretrained → tuned) and of round two
    /// (tuned → re-tuned).
    pub effects: [EffectSize; 2],
    pub introspection: IntrospectionRecord,
}

/// Labels samples from the tuned generator, merges them with the original
/// dataset, trains the estimator further on the union, and tunes again.
pub fn iterate(
    first: FirstRound,
    corpus: &Corpus,
    objective: &PirObjective,
    oracle: Option<Oracle>,
    config: &IterationConfig,
    seed: u64,
) -> Result<IterationOutcome> {
    let fresh = build_pir_dataset(
        first.tuned,
        objective,
        oracle,
        config.n_images,
        config.n_impressions,
        stream_seed(seed, "dataset"),
        "it2-",
    )?;
    let merged = first.dataset.merged(&fresh)?;
    let (estimator, report) = continue_training(
        first.estimator_state.clone(),
        &merged,
        first.estimator_spec,
        &config.estimator,
        stream_seed(seed, "estimator"),
    )?;
    let mut gan = first.tuned.clone();
    let est = Estimator {
        spec: first.estimator_spec,
        state: &estimator,
    };
    let history = tune(&mut gan, corpus, est, &config.tuning, stream_seed(seed, "tune"))?;
    let eval_seed = stream_seed(seed, "eval");
    let round_one = evaluate_run(first.pretrained, first.tuned, objective, oracle, config.eval_samples, eval_seed)?;
    let round_two = evaluate_run(first.tuned, &gan, objective, oracle, config.eval_samples, eval_seed)?;
    let introspection = introspect(first.tuned, &gan, est, objective, oracle, config.eval_samples, eval_seed)?;
    Ok(IterationOutcome {
        merged,
        estimator,
        estimator_mae: report.heldout_mae,
        gan,
        history,
        effects: [round_one, round_two],
        introspection,
    })
}
