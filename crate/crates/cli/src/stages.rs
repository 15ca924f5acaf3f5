//! The pipeline stages and the artifacts each one reads and writes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pirtune_core::checkpoint::Container;
use pirtune_core::data::{generate_corpus, train_oracle, Corpus};
use pirtune_core::estimator::train_estimator;
use pirtune_core::gan::{discriminator_accuracy, pretrain, write_history_csv, Gan};
use pirtune_core::nets::{
    build_discriminator, build_estimator, build_generator, build_oracle, NetworkSpec, NetworkState,
};
use pirtune_core::objectives::{
    build_pir_dataset, layer_filter_count, sample_filter_set, Oracle, PirDataset, PirObjective, PirRecord,
};
use pirtune_core::seeds::stream_seed;
use pirtune_core::stats::{cross_run_analyses, evaluate_run_on, EffectSize, EvalTarget, RunSummary};
use pirtune_core::tuning::{
    introspect, iterate, tune, write_tune_history_csv, Estimator, FirstRound, IntrospectionRecord,
};
use serde::{Deserialize, Serialize};

use crate::config::{EvalMode, ObjectiveSpec, RunConfig};
use crate::error::{CliError, Result};
use crate::layout::{sha256_hex, DirLock, Manifest, RunDir, StageOutput, MANIFEST_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    MakeData,
    Pretrain,
    SimulatePir,
    TrainEstimator,
    Tune,
    Evaluate,
    Iterate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::MakeData,
        Stage::Pretrain,
        Stage::SimulatePir,
        Stage::TrainEstimator,
        Stage::Tune,
        Stage::Evaluate,
        Stage::Iterate,
    ];

    pub fn command(self) -> &'static str {
        match self {
            Stage::MakeData => "make-data",
            Stage::Pretrain => "pretrain",
            Stage::SimulatePir => "simulate-pir",
            Stage::TrainEstimator => "train-estimator",
            Stage::Tune => "tune",
            Stage::Evaluate => "evaluate",
            Stage::Iterate => "iterate",
        }
    }

    /// Directory name under the run root.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::MakeData => "data",
            Stage::Pretrain => "pretrain",
            Stage::SimulatePir => "pir",
            Stage::TrainEstimator => "estimator",
            Stage::Tune => "tune",
            Stage::Evaluate => "evaluate",
            Stage::Iterate => "iterate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.command())
    }
}

impl FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.command() == s || st.dir() == s)
            .ok_or_else(|| CliError::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoredDataset {
    objective_id: String,
    seed: u64,
    records: Vec<PirRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub discriminator_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub objective: PirObjective,
    pub objective_id: String,
    pub n_images: usize,
    pub n_impressions: u64,
    pub mean_observed_pir: f64,
    pub zero_fraction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationReport {
    pub estimator_mae: f64,
    /// Pretrained → tuned, then tuned → re-tuned.
    pub effects: Vec<EffectSize>,
    pub introspection: IntrospectionRecord,
}

fn encode_state(state: &NetworkState) -> Result<Vec<u8>> {
    Ok(Container::from(state).encode()?)
}

fn decode_state(bytes: &[u8], spec: &NetworkSpec) -> Result<NetworkState> {
    let state = NetworkState::try_from(Container::decode(bytes)?)?;
    spec.check_state(&state)?;
    Ok(state)
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut out = Vec::new();
    write(&mut out).expect("writing to memory");
    out
}

fn parse_json<T: for<'de> Deserialize<'de>>(bytes: &[u8], what: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| CliError::Config(format!("unreadable {what}: {e}")))
}

/// A validated config bound to its locked run directory.
pub struct Pipeline {
    pub config: RunConfig,
    pub run: RunDir,
}

impl Pipeline {
    pub fn open(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let run = RunDir::open(&config)?;
        Ok(Self { config, run })
    }

    pub fn root(&self) -> &Path {
        &self.run.root
    }

    pub fn run(&mut self, stage: Stage) -> Result<()> {
        let output = match stage {
            Stage::MakeData => self.make_data()?,
            Stage::Pretrain => self.pretrain()?,
            Stage::SimulatePir => self.simulate_pir()?,
            Stage::TrainEstimator => self.train_estimator()?,
            Stage::Tune => self.tune()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Iterate => self.iterate()?,
        };
        self.run.commit(stage.dir(), output)
    }

    /// Runs the loop up to and including `last`.
    pub fn run_all(&mut self, last: Stage, mut progress: impl FnMut(Stage)) -> Result<()> {
        for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
            progress(stage);
            self.run(stage)?;
        }
        Ok(())
    }

    fn preset_specs(&self) -> Result<(NetworkSpec, NetworkSpec)> {
        let preset = self.config.preset();
        Ok((
            build_generator(&preset, self.config.conditional)?,
            build_discriminator(&preset, self.config.conditional)?,
        ))
    }

    fn oracle_spec(&self) -> Result<NetworkSpec> {
        Ok(build_oracle(&self.config.preset())?)
    }

    fn estimator_spec(&self) -> Result<NetworkSpec> {
        Ok(build_estimator(&self.config.preset())?)
    }

    pub fn objective(&self) -> Result<PirObjective> {
        match &self.config.objective {
            ObjectiveSpec::Descriptor(d) => Ok(d.parse()?),
            ObjectiveSpec::Sampled { layer, filters } => {
                let count = layer_filter_count(&self.oracle_spec()?, layer)?;
                let set = sample_filter_set(count, *filters, self.config.seeds.objective)?;
                Ok(PirObjective::filter_norm(layer.clone(), set)?)
            }
        }
    }

    /// Ordinal position of the objective's layer among the oracle taps.
    fn layer_index(&self, objective: &PirObjective) -> Result<Option<usize>> {
        match objective {
            PirObjective::FilterNorm { layer, .. } => {
                let spec = self.oracle_spec()?;
                Ok(spec.tap_names().iter().position(|t| t == layer).map(|i| i + 1))
            }
            _ => Ok(None),
        }
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let bytes = self.run.load("data", "corpus.ckpt", "corpus")?;
        let c = Container::decode(&bytes)?;
        let images = c.tensor("images")?.clone();
        let labels = c.tensor("labels")?.data().iter().map(|&l| l as usize).collect();
        Ok(Corpus {
            size: images.shape()[1],
            images,
            labels,
            seed: self.config.seeds.corpus,
        })
    }

    /// Oracle network for filter objectives, `None` for colour objectives.
    pub fn oracle_state(&self) -> Result<Option<(NetworkSpec, NetworkState)>> {
        if !self.config.objective.is_filter() {
            return Ok(None);
        }
        let spec = self.oracle_spec()?;
        let bytes = self.run.load("data", "oracle.ckpt", "oracle")?;
        let state = decode_state(&bytes, &spec)?;
        Ok(Some((spec, state)))
    }

    /// Generator and discriminator stored by `stage` (pretrain, tune or
    /// iterate).
    pub fn load_gan(&self, stage: Stage) -> Result<Gan> {
        let what = match stage {
            Stage::Tune => "tuned",
            Stage::Iterate => "re-tuned",
            _ => "pretrained",
        };
        self.gan(stage.dir(), what)
    }

    fn gan(&self, stage: &str, what: &str) -> Result<Gan> {
        let (gs, ds) = self.preset_specs()?;
        let g = decode_state(&self.run.load(stage, "g.ckpt", &format!("{what} generator"))?, &gs)?;
        let d = decode_state(&self.run.load(stage, "d.ckpt", &format!("{what} discriminator"))?, &ds)?;
        Ok(Gan::from_states(gs, ds, g, d)?)
    }

    fn dataset(&self, stage: &str) -> Result<PirDataset> {
        let stored: StoredDataset = parse_json(&self.run.load(stage, "records.json", "PIR dataset")?, "PIR dataset")?;
        let images = Container::decode(&self.run.load(stage, "images.ckpt", "PIR dataset images")?)?
            .tensor("images")?
            .clone();
        Ok(PirDataset {
            objective_id: stored.objective_id,
            images,
            records: stored.records,
            seed: stored.seed,
        })
    }

    pub fn estimator(&self) -> Result<(NetworkSpec, NetworkState)> {
        let spec = self.estimator_spec()?;
        let state = decode_state(&self.run.load("estimator", "estimator.ckpt", "estimator")?, &spec)?;
        Ok((spec, state))
    }

    fn add_dataset(out: &mut StageOutput, dataset: &PirDataset) -> Result<()> {
        out.add("dataset.csv", csv_bytes(|w| dataset.write_csv(w)));
        out.add_json(
            "records.json",
            &StoredDataset {
                objective_id: dataset.objective_id.clone(),
                seed: dataset.seed,
                records: dataset.records.clone(),
            },
        );
        let images = Container::with_tensors(vec![("images".into(), dataset.images.clone())]);
        out.add("images.ckpt", images.encode()?);
        Ok(())
    }

    fn eval_target(&self) -> EvalTarget {
        match self.config.eval_target {
            EvalMode::True => EvalTarget::True,
            EvalMode::Observed => EvalTarget::Observed(self.config.n_impressions),
        }
    }

    fn make_data(&self) -> Result<StageOutput> {
        let preset = self.config.preset();
        let corpus = generate_corpus(self.config.seeds.corpus, self.config.corpus_size, preset.image_size)?;
        let mut out = StageOutput::default();
        let container = Container::with_tensors(vec![
            ("images".into(), corpus.images.clone()),
            ("labels".into(), corpus.labels_tensor()),
        ]);
        out.add("corpus.ckpt", container.encode()?);
        if self.config.objective.is_filter() {
            let spec = self.oracle_spec()?;
            let seed = stream_seed(self.config.seeds.corpus, "oracle");
            let (state, report) = train_oracle(&corpus, &spec, self.config.oracle_steps(), seed)?;
            out.add("oracle.ckpt", encode_state(&state)?);
            out.add_json(
                "oracle.json",
                &serde_json::json!({
                    "initial_loss": report.initial_loss,
                    "final_loss": report.final_loss,
                    "train_accuracy": report.train_accuracy,
                }),
            );
        }
        Ok(out)
    }

    fn pretrain(&self) -> Result<StageOutput> {
        if let Some(source) = &self.config.pretrained_from {
            return self.reuse_pretrain(source);
        }
        let corpus = self.corpus()?;
        let seed = self.config.seeds.pretrain;
        let mut gan = Gan::new(&self.config.preset(), self.config.conditional, seed)?;
        let steps = self.config.pretrain_steps();
        let history = pretrain(&mut gan, &corpus, steps, &self.config.gan_config(), stream_seed(seed, "train"))?;
        let accuracy = discriminator_accuracy(&gan, &corpus, corpus.len().min(500), stream_seed(seed, "accuracy"))?;
        let mut out = StageOutput::default();
        out.add("g.ckpt", encode_state(&gan.g)?);
        out.add("d.ckpt", encode_state(&gan.d)?);
        out.add("history.csv", csv_bytes(|w| write_history_csv(&history, w)));
        out.add_json(
            "report.json",
            &PretrainReport {
                steps,
                discriminator_accuracy: accuracy,
            },
        );
        Ok(out)
    }

    fn reuse_pretrain(&self, source: &Path) -> Result<StageOutput> {
        let manifest = Manifest::read(source)?
            .ok_or_else(|| CliError::MissingArtifact(format!("pretrained run at {}", source.display())))?;
        let files = manifest
            .stages
            .get("pretrain")
            .ok_or_else(|| CliError::MissingArtifact(format!("pretrained generator in {}", source.display())))?;
        let (gs, ds) = self.preset_specs()?;
        let mut out = StageOutput::default();
        for name in files.keys() {
            let bytes = manifest.load(source, "pretrain", name, &format!("pretrain/{name} in {}", source.display()))?;
            match name.as_str() {
                "g.ckpt" => drop(decode_state(&bytes, &gs)?),
                "d.ckpt" => drop(decode_state(&bytes, &ds)?),
                _ => {}
            }
            out.add(name, bytes);
        }
        Ok(out)
    }

    fn simulate_pir(&self) -> Result<StageOutput> {
        let gan = self.gan("pretrain", "pretrained")?;
        let objective = self.objective()?;
        let oracle = self.oracle_state()?;
        let dataset = build_pir_dataset(
            &gan,
            &objective,
            oracle.as_ref().map(|(spec, state)| Oracle { spec, state }),
            self.config.n_images,
            self.config.n_impressions,
            self.config.seeds.dataset,
            "",
        )?;
        let observed = dataset.observed();
        let mut out = StageOutput::default();
        Self::add_dataset(&mut out, &dataset)?;
        out.add_json(
            "summary.json",
            &DatasetSummary {
                objective_id: objective.to_string(),
                objective,
                n_images: dataset.len(),
                n_impressions: self.config.n_impressions,
                mean_observed_pir: observed.iter().sum::<f64>() / observed.len() as f64,
                zero_fraction: dataset.zero_fraction(),
            },
        );
        Ok(out)
    }

    fn train_estimator(&self) -> Result<StageOutput> {
        let dataset = self.dataset("pir")?;
        let spec = self.estimator_spec()?;
        let (state, report) = train_estimator(&dataset, &spec, &self.config.estimator_config(), self.config.seeds.estimator)?;
        let mut out = StageOutput::default();
        out.add("estimator.ckpt", encode_state(&state)?);
        out.add_json("report.json", &report);
        Ok(out)
    }

    fn tune(&self) -> Result<StageOutput> {
        let mut gan = self.gan("pretrain", "pretrained")?;
        let corpus = self.corpus()?;
        let (spec, state) = self.estimator()?;
        let est = Estimator { spec: &spec, state: &state };
        let history = tune(&mut gan, &corpus, est, &self.config.tuning_config(), self.config.seeds.tuning)?;
        let mut out = StageOutput::default();
        out.add("g.ckpt", encode_state(&gan.g)?);
        out.add("d.ckpt", encode_state(&gan.d)?);
        out.add("history.csv", csv_bytes(|w| write_tune_history_csv(&history, w)));
        Ok(out)
    }

    fn evaluate(&self) -> Result<StageOutput> {
        let post = self.gan("tune", "tuned")?;
        let pre = self.gan("pretrain", "pretrained")?;
        let (spec, state) = self.estimator()?;
        let objective = self.objective()?;
        let oracle = self.oracle_state()?;
        let oracle = oracle.as_ref().map(|(spec, state)| Oracle { spec, state });
        let seed = self.config.seeds.eval;
        let n = self.config.eval_samples;
        let effect = evaluate_run_on(&pre, &post, &objective, oracle, n, seed, self.eval_target())?;
        let est = Estimator { spec: &spec, state: &state };
        let introspection = introspect(&pre, &post, est, &objective, oracle, n, stream_seed(seed, "introspect"))?;
        let summary = RunSummary {
            label: format!("{objective}@{}", self.run.hash),
            effect: effect.clone(),
            introspection: introspection.clone(),
            layer_index: self.layer_index(&objective)?,
        };
        let mut out = StageOutput::default();
        out.add_json("effect.json", &effect);
        out.add_json("introspection.json", &introspection);
        out.add_json("summary.json", &summary);
        Ok(out)
    }

    fn iterate(&self) -> Result<StageOutput> {
        let tuned = self.gan("tune", "tuned")?;
        let pretrained = self.gan("pretrain", "pretrained")?;
        let dataset = self.dataset("pir")?;
        let corpus = self.corpus()?;
        let (spec, state) = self.estimator()?;
        let objective = self.objective()?;
        let oracle = self.oracle_state()?;
        let first = FirstRound {
            pretrained: &pretrained,
            tuned: &tuned,
            dataset: &dataset,
            estimator_spec: &spec,
            estimator_state: &state,
        };
        let outcome = iterate(
            first,
            &corpus,
            &objective,
            oracle.as_ref().map(|(spec, state)| Oracle { spec, state }),
            &self.config.iteration_config(),
            stream_seed(self.config.seeds.tuning, "iterate"),
        )?;
        let mut out = StageOutput::default();
        Self::add_dataset(&mut out, &outcome.merged)?;
        out.add("estimator.ckpt", encode_state(&outcome.estimator)?);
        out.add("g.ckpt", encode_state(&outcome.gan.g)?);
        out.add("d.ckpt", encode_state(&outcome.gan.d)?);
        out.add("history.csv", csv_bytes(|w| write_tune_history_csv(&outcome.history, w)));
        out.add_json(
            "report.json",
            &IterationReport {
                estimator_mae: outcome.estimator_mae,
                effects: outcome.effects.to_vec(),
                introspection: outcome.introspection,
            },
        );
        Ok(out)
    }
}

/// Cross-run regressions over every evaluated run under `out/runs`, written
/// to `out/analysis/`. Returns that directory.
pub fn analyze(out: &Path) -> Result<PathBuf> {
    let runs_root = out.join("runs");
    let mut dirs: Vec<PathBuf> = match fs::read_dir(&runs_root) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect(),
        Err(_) => Vec::new(),
    };
    dirs.sort();
    let mut summaries = Vec::new();
    let mut sources = std::collections::BTreeMap::new();
    for dir in dirs {
        let _lock = DirLock::acquire(&dir)?;
        let Some(manifest) = Manifest::read(&dir)? else { continue };
        let Ok(bytes) = manifest.load(&dir, "evaluate", "summary.json", "evaluation") else { continue };
        summaries.push(parse_json::<RunSummary>(&bytes, "run summary")?);
        sources.insert(manifest.config_hash.clone(), sha256_hex(&bytes));
    }
    if summaries.len() < 3 {
        return Err(CliError::MissingArtifact(format!(
            "evaluation reports from at least 3 runs (found {})",
            summaries.len()
        )));
    }
    let analysis = cross_run_analyses(&summaries)?;
    let dir = out.join("analysis");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let _lock = DirLock::acquire(&dir)?;
    let csv = csv_bytes(|w| analysis.write_csv(w));
    let json = serde_json::to_string_pretty(&analysis).expect("analysis serialises") + "\n";
    let meta = serde_json::to_string_pretty(&serde_json::json!({
        "layer_index_coding": "ordinal position of the oracle layer (conv1 = 1)",
        "runs": sources,
    }))
    .expect("metadata serialises")
        + "\n";
    let mut files = std::collections::BTreeMap::new();
    for (name, bytes) in [
        ("analysis.csv", csv),
        ("analysis.json", json.into_bytes()),
        ("sources.json", meta.into_bytes()),
    ] {
        let path = dir.join(name);
        fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
        files.insert(name.to_string(), sha256_hex(&bytes));
    }
    let manifest = serde_json::to_string_pretty(&files).expect("manifest serialises") + "\n";
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| CliError::io(&path, e))?;
    Ok(dir)
}

/// Reads a JSON report from a stage of an existing run directory.
pub fn read_report<T: for<'de> Deserialize<'de>>(run_dir: &Path, stage: Stage, file: &str) -> Result<T> {
    let manifest = Manifest::read(run_dir)?.ok_or_else(|| CliError::MissingArtifact("manifest".into()))?;
    let bytes = manifest.load(run_dir, stage.dir(), file, file)?;
    parse_json(&bytes, file)
}
