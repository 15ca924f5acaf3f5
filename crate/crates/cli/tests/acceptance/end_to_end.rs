//! Desk-scale runs through the pipeline, and the checks that need trained
//! artifacts.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use pirtune_cli::config::{ObjectiveSpec, RunConfig, Seeds, Steps};
use pirtune_cli::layout::{Manifest, MANIFEST_FILE};
use pirtune_cli::stages::{read_report, DatasetSummary, IterationReport};
use pirtune_cli::{Pipeline, Stage};
use pirtune_core::estimator::EstimatorReport;
use pirtune_core::gan::{AdversarialTrainer, Gan};
use pirtune_core::nets::NetworkState;
use pirtune_core::objectives::{filter_activity, Oracle};
use pirtune_core::stats::{ols_fit, EffectSize};
use pirtune_core::tuning::{tune, Estimator, IntrospectionRecord, TuningConfig};

use crate::{Line, Verdict};

const SIGNIFICANCE: f64 = 1e-3;
const MIN_D: f64 = 0.5;
const BUDGET: Duration = Duration::from_secs(3600);

pub struct Settings {
    pub out: PathBuf,
    pub smoke: bool,
    pub log: fn(&str),
}

impl Settings {
    fn verdict(&self, pass: bool) -> Verdict {
        match (self.smoke, pass) {
            (true, p) => Verdict::Smoke(p),
            (false, true) => Verdict::Pass,
            (false, false) => Verdict::Fail,
        }
    }

    fn config(&self, objective: &str, replicate: u64) -> RunConfig {
        let mut c = RunConfig {
            objective: ObjectiveSpec::Descriptor(objective.into()),
            seeds: seeds(replicate),
            output_dir: self.out.clone(),
            ..RunConfig::default()
        };
        if self.smoke {
            c.steps = Steps {
                pretrain: Some(300),
                oracle: Some(100),
                estimator: Some(200),
                tune: Some(100),
                iterate_estimator: Some(50),
            };
            c.n_images = 200;
            c.eval_samples = 200;
        }
        c
    }
}

/// Replicate 0 uses the default seeds; each later replicate shifts every
/// seed by 100.
fn seeds(replicate: u64) -> Seeds {
    let d = Seeds::default();
    let k = 100 * replicate;
    Seeds {
        corpus: d.corpus + k,
        pretrain: d.pretrain + k,
        objective: d.objective + k,
        dataset: d.dataset + k,
        estimator: d.estimator + k,
        tuning: d.tuning + k,
        eval: d.eval + k,
    }
}

pub struct RunOutcome {
    pub label: String,
    pub root: PathBuf,
    pub effect: EffectSize,
    pub introspection: IntrospectionRecord,
    pub estimator_mae: f64,
    pub zero_fraction: f64,
    /// First and last logged L_PIR of the tuning run.
    pub l_pir: (f64, f64),
    /// Mean value-space pixel per channel, pretrained then tuned.
    pub channel_means: ([f64; 3], [f64; 3]),
    pub elapsed: Duration,
}

impl RunOutcome {
    fn significant(&self) -> bool {
        self.effect.p_value < SIGNIFICANCE
    }

    fn brief(&self) -> String {
        format!(
            "{}: d={:.2} p={:.1e} mae={:.3} L_PIR {:.4}->{:.4}",
            self.label, self.effect.cohens_d, self.effect.p_value, self.estimator_mae, self.l_pir.0, self.l_pir.1
        )
    }
}

fn channel_means(gan: &Gan, n: usize, seed: u64) -> Result<[f64; 3], String> {
    let images = gan.sample_images(n, seed).map_err(|e| e.to_string())?;
    let mut sums = [0.0; 3];
    for (i, v) in images.data().iter().enumerate() {
        sums[i % 3] += (*v as f64 + 1.0) / 2.0;
    }
    let pixels = (images.len() / 3) as f64;
    Ok(sums.map(|s| s / pixels))
}

fn tune_trend(root: &Path) -> Result<(f64, f64), String> {
    let manifest = Manifest::read(root).map_err(|e| e.to_string())?.ok_or("no manifest")?;
    let bytes = manifest.load(root, "tune", "history.csv", "tuning history").map_err(|e| e.to_string())?;
    let text = String::from_utf8(bytes).map_err(|e| e.to_string())?;
    let l_pir: Vec<f64> = text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(1)?.parse().ok())
        .collect();
    match (l_pir.first(), l_pir.last()) {
        (Some(a), Some(b)) => Ok((*a, *b)),
        _ => Ok((f64::NAN, f64::NAN)),
    }
}

fn run_pipeline(settings: &Settings, label: &str, config: &RunConfig) -> Result<RunOutcome, String> {
    let start = Instant::now();
    let mut pipeline = Pipeline::open(config).map_err(|e| format!("{label}: {e}"))?;
    pipeline
        .run_all(Stage::Evaluate, |s| (settings.log)(&format!("{label}: {s}")))
        .map_err(|e| format!("{label}: {e}"))?;
    let root = pipeline.root().to_path_buf();
    let n = config.eval_samples;
    let pre = pipeline.load_gan(Stage::Pretrain).map_err(|e| e.to_string())?;
    let post = pipeline.load_gan(Stage::Tune).map_err(|e| e.to_string())?;
    let channels = (channel_means(&pre, n, 9001)?, channel_means(&post, n, 9002)?);
    drop(pipeline);
    let err = |e: pirtune_cli::CliError| format!("{label}: {e}");
    let effect: EffectSize = read_report(&root, Stage::Evaluate, "effect.json").map_err(err)?;
    let introspection: IntrospectionRecord = read_report(&root, Stage::Evaluate, "introspection.json").map_err(err)?;
    let estimator: EstimatorReport = read_report(&root, Stage::TrainEstimator, "report.json").map_err(err)?;
    let dataset: DatasetSummary = read_report(&root, Stage::SimulatePir, "summary.json").map_err(err)?;
    let outcome = RunOutcome {
        label: label.to_string(),
        l_pir: tune_trend(&root)?,
        root,
        effect,
        introspection,
        estimator_mae: estimator.heldout_mae,
        zero_fraction: dataset.zero_fraction,
        channel_means: channels,
        elapsed: start.elapsed(),
    };
    (settings.log)(&format!("{} ({:.0} s)", outcome.brief(), outcome.elapsed.as_secs_f64()));
    Ok(outcome)
}

type Job<'a, T> = Box<dyn FnOnce() -> Result<T, String> + Send + 'a>;

/// Runs independent jobs on as many threads as there are cores. Results keep
/// the job order; a panicking job becomes an error.
fn parallel<'a, T: Send>(jobs: Vec<Job<'a, T>>) -> Vec<Result<T, String>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).clamp(1, jobs.len().max(1));
    let total = jobs.len();
    let queue = Mutex::new(jobs.into_iter().enumerate().rev().collect::<Vec<_>>());
    let results = Mutex::new(Vec::with_capacity(total));
    std::thread::scope(|s| {
        for _ in 0..workers {
            std::thread::Builder::new()
                .stack_size(64 << 20)
                .spawn_scoped(s, || loop {
                    let Some((i, job)) = queue.lock().unwrap().pop() else { break };
                    let r = catch_unwind(AssertUnwindSafe(job)).unwrap_or_else(|p| {
                        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
                    });
                    results.lock().unwrap().push((i, r));
                })
                .expect("worker thread");
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    results.into_iter().map(|(_, r)| r).collect()
}

fn job<'a, T: Send + 'a>(f: impl FnOnce() -> Result<T, String> + Send + 'a) -> Job<'a, T> {
    Box::new(f)
}

pub struct Results {
    pub lines: Vec<Line>,
}

pub fn run(settings: &Settings) -> Results {
    let mut lines = Vec::new();
    let mut all_runs: Vec<RunOutcome> = Vec::new();

    // 1: three colours for two seed replicates, each replicate with its own
    // pretraining (shared by its three colours).
    let start = Instant::now();
    let firsts = parallel(
        (0..2u64)
            .map(|k| {
                let config = settings.config("R", k);
                job(move || run_pipeline(settings, &format!("R/seed{k}"), &config))
            })
            .collect(),
    );
    let mut later_jobs = Vec::new();
    for (k, first) in firsts.iter().enumerate() {
        if let Ok(first) = first {
            for colour in ["G", "B"] {
                let mut config = settings.config(colour, k as u64);
                config.pretrained_from = Some(first.root.clone());
                later_jobs.push(job(move || run_pipeline(settings, &format!("{colour}/seed{k}"), &config)));
            }
        }
    }
    let later = parallel(later_jobs);
    let c1_time = start.elapsed();
    let mut colour_runs: Vec<Result<RunOutcome, String>> = firsts.into_iter().chain(later).collect();
    let base = colour_runs.first().and_then(|r| r.as_ref().ok()).map(|r| r.root.clone());

    let mut per_seed = [0usize; 2];
    let mut notes = Vec::new();
    for r in &colour_runs {
        match r {
            Ok(o) => {
                if o.significant() && o.effect.cohens_d > MIN_D {
                    per_seed[if o.label.ends_with("seed0") { 0 } else { 1 }] += 1;
                }
                notes.push(o.brief());
            }
            Err(e) => notes.push(format!("error {e}")),
        }
    }
    let within_budget = c1_time <= BUDGET;
    lines.push(Line {
        criterion: 1,
        verdict: settings.verdict(per_seed.iter().all(|&c| c >= 2) && within_budget),
        detail: format!(
            "colours with p<{SIGNIFICANCE:e} and d>{MIN_D}: seed0 {}/3, seed1 {}/3; wall time {:.0} s on {} core(s) (budget {} s){}. {}",
            per_seed[0],
            per_seed[1],
            c1_time.as_secs_f64(),
            std::thread::available_parallelism().map_or(1, |n| n.get()),
            BUDGET.as_secs(),
            if within_budget { "" } else { " EXCEEDED" },
            notes.join("; ")
        ),
    });

    let Some(base) = base else {
        for criterion in [2, 3, 4, 9, 10] {
            lines.push(Line {
                criterion,
                verdict: settings.verdict(false),
                detail: "no pretrained base run (seed0 red run failed)".into(),
            });
        }
        return Results { lines };
    };

    // 3: pick the filters from the base generator's samples before queuing
    // the two-colour and filter runs together.
    let selection = select_filters(settings, &base);
    let pairs = [("RG", 2usize), ("GB", 0), ("RB", 1)];
    let mut jobs = Vec::new();
    for (pair, _) in pairs {
        let mut config = settings.config(pair, 0);
        config.pretrained_from = Some(base.clone());
        jobs.push(job(move || run_pipeline(settings, pair, &config)));
    }
    if let Ok(sel) = &selection {
        for (tag, filter) in [("sparse", sel.sparse), ("dense", sel.dense)] {
            let mut config = settings.config(&format!("{}:{filter}", sel.layer), 0);
            config.pretrained_from = Some(base.clone());
            jobs.push(job(move || run_pipeline(settings, &format!("{tag} {}:{filter}", sel.layer), &config)));
        }
    }
    let mut second = parallel(jobs).into_iter();

    // 2
    let mut significant_pairs = 0;
    let mut excluded_ok = true;
    let mut notes = Vec::new();
    for (pair, excluded) in pairs {
        match second.next().unwrap() {
            Ok(o) => {
                let (pre, post) = (o.channel_means.0[excluded], o.channel_means.1[excluded]);
                let good = o.significant() && o.effect.cohens_d > 0.0;
                if good {
                    significant_pairs += 1;
                    excluded_ok &= post < pre;
                }
                notes.push(format!(
                    "{pair}: d={:.2} p={:.1e}, excluded {} {:.3}->{:.3}",
                    o.effect.cohens_d,
                    o.effect.p_value,
                    &"RGB"[excluded..=excluded],
                    pre,
                    post
                ));
                all_runs.push(o);
            }
            Err(e) => notes.push(format!("{pair}: error {e}")),
        }
    }
    lines.push(Line {
        criterion: 2,
        verdict: settings.verdict(significant_pairs >= 1 && excluded_ok),
        detail: format!(
            "{significant_pairs}/3 pairs with significant positive d; excluded channel falls in every such pair: {excluded_ok}. {}",
            notes.join("; ")
        ),
    });

    // 3
    let c3 = match selection {
        Ok(sel) => {
            let sparse = second.next().unwrap();
            let dense = second.next().unwrap();
            match (sparse, dense) {
                (Ok(s), Ok(d)) => {
                    let nonzero = 1.0 - s.zero_fraction;
                    let pass = nonzero < 0.1 && s.effect.cohens_d.abs() < d.effect.cohens_d;
                    let detail = format!(
                        "layer {} (activity sparse {:.3}, dense {:.3}): sparse {} nonzero {:.1}% |d|={:.2}; dense {} nonzero {:.1}% d={:.2}",
                        sel.layer,
                        sel.sparse_activity,
                        sel.dense_activity,
                        sel.sparse,
                        100.0 * nonzero,
                        s.effect.cohens_d.abs(),
                        sel.dense,
                        100.0 * (1.0 - d.zero_fraction),
                        d.effect.cohens_d
                    );
                    all_runs.push(s);
                    all_runs.push(d);
                    (pass, detail)
                }
                (s, d) => (false, format!("run error: {:?} / {:?}", s.err(), d.err())),
            }
        }
        Err(e) => (false, format!("no usable sparse filter: {e}")),
    };
    lines.push(Line {
        criterion: 3,
        verdict: settings.verdict(c3.0),
        detail: c3.1,
    });

    // 4
    for r in colour_runs.drain(..).flatten() {
        all_runs.push(r);
    }
    lines.push(introspection_line(settings, &all_runs));

    // 9
    let c9 = determinism(settings, &base);
    lines.push(Line {
        criterion: 9,
        verdict: if c9.is_ok() { Verdict::Pass } else { Verdict::Fail },
        detail: c9.unwrap_or_else(|e| e),
    });

    // 10
    let c10 = iteration(settings, &base);
    lines.push(Line {
        criterion: 10,
        verdict: settings.verdict(c10.is_ok()),
        detail: c10.unwrap_or_else(|e| e),
    });
    Results { lines }
}

fn introspection_line(settings: &Settings, runs: &[RunOutcome]) -> Line {
    let significant: Vec<&RunOutcome> = runs.iter().filter(|r| r.significant()).collect();
    let disagree: Vec<String> = significant
        .iter()
        .filter(|r| r.introspection.estimated_delta.signum() != r.introspection.true_delta.signum())
        .map(|r| {
            format!(
                "{} (est {:+.4}, true {:+.4})",
                r.label, r.introspection.estimated_delta, r.introspection.true_delta
            )
        })
        .collect();
    let x: Vec<Vec<f64>> = significant.iter().map(|r| vec![1.0, r.introspection.estimated_delta]).collect();
    let y: Vec<f64> = significant.iter().map(|r| r.introspection.true_delta).collect();
    let slope = ols_fit(&x, &y).map(|f| (f.coefficients[1], f.std_errors[1]));
    let detail = format!(
        "{} significant runs; sign disagreements: {}; slope of true on estimated delta: {}",
        significant.len(),
        if disagree.is_empty() { "none".into() } else { disagree.join(", ") },
        match &slope {
            Ok((b, se)) => format!("{b:.3} (se {se:.3})"),
            Err(e) => format!("not estimable ({e})"),
        }
    );
    let pass = disagree.is_empty() && matches!(slope, Ok((b, _)) if b > 0.0);
    Line {
        criterion: 4,
        verdict: settings.verdict(pass),
        detail,
    }
}

pub struct FilterSelection {
    pub layer: String,
    pub sparse: usize,
    pub dense: usize,
    pub sparse_activity: f64,
    pub dense_activity: f64,
}

/// Looks for a layer with a rarely active filter (active on 1-8% of the
/// pretrained generator's samples, else anything strictly between 0 and 10%)
/// next to an always-active one, scanning the oracle taps in order.
fn select_filters(settings: &Settings, base: &Path) -> Result<FilterSelection, String> {
    let mut config = settings.config("conv1:0", 0);
    config.pretrained_from = Some(base.to_path_buf());
    let mut probe = Pipeline::open(&config).map_err(|e| e.to_string())?;
    probe.run(Stage::MakeData).map_err(|e| e.to_string())?;
    let gan = {
        probe.run(Stage::Pretrain).map_err(|e| e.to_string())?;
        probe.load_gan(Stage::Pretrain).map_err(|e| e.to_string())?
    };
    let (spec, state) = probe.oracle_state().map_err(|e| e.to_string())?.ok_or("no oracle")?;
    let oracle = Oracle { spec: &spec, state: &state };
    let images = gan.sample_images(if settings.smoke { 200 } else { 1000 }, 4242).map_err(|e| e.to_string())?;
    let mut seen = Vec::new();
    for preferred in [true, false] {
        for layer in ["conv1", "conv2", "conv3", "conv4", "fc1"] {
            let activity = filter_activity(oracle, &images, layer).map_err(|e| e.to_string())?;
            if preferred {
                let rare = activity.iter().filter(|&&a| a > 0.0 && a < 0.1).count();
                let dead = activity.iter().filter(|&&a| a == 0.0).count();
                seen.push(format!("{layer}: {rare} rare, {dead} dead of {}", activity.len()));
            }
            let in_band = |a: f64| if preferred { (0.01..=0.08).contains(&a) } else { a > 0.0 && a < 0.1 };
            let sparse = activity
                .iter()
                .enumerate()
                .filter(|(_, &a)| in_band(a))
                .max_by(|a, b| a.1.total_cmp(b.1));
            let dense = activity.iter().enumerate().filter(|(_, &a)| a >= 0.99).max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)));
            if let (Some((s, &sa)), Some((d, &da))) = (sparse, dense) {
                (settings.log)(&format!("filter selection: {}", seen.join("; ")));
                return Ok(FilterSelection {
                    layer: layer.to_string(),
                    sparse: s,
                    dense: d,
                    sparse_activity: sa,
                    dense_activity: da,
                });
            }
        }
    }
    Err(seen.join("; "))
}

fn bits(state: &NetworkState) -> Vec<u32> {
    state
        .params
        .values()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .chain(state.stats.values().flat_map(|s| s.mean.iter().chain(&s.var).map(|v| v.to_bits())))
        .collect()
}

/// Freeze and determinism checks on the base run's real artifacts, plus a
/// manifest comparison between two identical short runs in separate roots.
fn determinism(settings: &Settings, base: &Path) -> Result<String, String> {
    let err = |e: pirtune_cli::CliError| e.to_string();
    let steps = if settings.smoke { 10 } else { 100 };
    let base_config = settings.config("R", 0);
    debug_assert_eq!(base_config.run_dir(), base);
    let p = Pipeline::open(&base_config).map_err(err)?;
    let corpus = p.corpus().map_err(err)?;
    let gan = p.load_gan(Stage::Pretrain).map_err(err)?;
    let (spec, state) = p.estimator().map_err(err)?;
    drop(p);

    let before = bits(&state);
    let tc = TuningConfig {
        steps,
        ..base_config.tuning_config()
    };
    let mut tuned = gan.clone();
    tune(&mut tuned, &corpus, Estimator { spec: &spec, state: &state }, &tc, 77).map_err(|e| e.to_string())?;
    let estimator_frozen = bits(&state) == before && tuned != gan;

    let zero = TuningConfig { w_pir: 0.0, ..tc.clone() };
    let mut via_tune = gan.clone();
    tune(&mut via_tune, &corpus, Estimator { spec: &spec, state: &state }, &zero, 78).map_err(|e| e.to_string())?;
    let mut plain = gan.clone();
    let mut trainer = AdversarialTrainer::new(&zero.gan_config(), 78).map_err(|e| e.to_string())?;
    for _ in 0..steps {
        trainer.iteration(&mut plain, &corpus, None).map_err(|e| e.to_string())?;
    }
    let zero_weight_plain = bits(&via_tune.g) == bits(&plain.g) && bits(&via_tune.d) == bits(&plain.d);

    let mut manifests = Vec::new();
    for copy in ["a", "b"] {
        let mut short = RunConfig {
            objective: ObjectiveSpec::Descriptor("conv1:0,2,4,6,8,10,12,14".into()),
            output_dir: settings.out.join(format!("determinism-{copy}")),
            steps: Steps {
                pretrain: Some(40),
                oracle: Some(20),
                estimator: Some(40),
                tune: Some(20),
                iterate_estimator: Some(10),
            },
            n_images: 100,
            eval_samples: 100,
            ..RunConfig::default()
        };
        short.log_interval = 10;
        let mut p = Pipeline::open(&short).map_err(err)?;
        p.run_all(Stage::Iterate, |_| {}).map_err(err)?;
        manifests.push(std::fs::read(p.root().join(MANIFEST_FILE)).map_err(|e| e.to_string())?);
    }
    let manifests_equal = manifests[0] == manifests[1];

    let detail = format!(
        "estimator bitwise unchanged after {steps} desk tuning steps: {estimator_frozen}; w_pir=0 tuning bitwise equal to plain adversarial training ({steps} steps, lr {:e}): {zero_weight_plain}; identical configs in two roots give identical manifests: {manifests_equal}",
        tc.g_learning_rate
    );
    if estimator_frozen && zero_weight_plain && manifests_equal {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Second round on the base run at its own step counts.
fn iteration(settings: &Settings, base: &Path) -> Result<String, String> {
    let err = |e: pirtune_cli::CliError| e.to_string();
    let config = settings.config("R", 0);
    debug_assert_eq!(config.run_dir(), base);
    let start = Instant::now();
    let mut p = Pipeline::open(&config).map_err(err)?;
    (settings.log)("R/seed0: iterate");
    p.run(Stage::Iterate).map_err(err)?;
    let report: IterationReport = read_report(p.root(), Stage::Iterate, "report.json").map_err(err)?;
    let finite = report.effects.iter().all(|e| e.cohens_d.is_finite() && e.p_value.is_finite());
    let detail = format!(
        "{} effect sizes ({:.0} s): {}; estimator mae after merge {:.3}",
        report.effects.len(),
        start.elapsed().as_secs_f64(),
        report
            .effects
            .iter()
            .enumerate()
            .map(|(i, e)| format!("round {} d={:.2} p={:.1e}", i + 1, e.cohens_d, e.p_value))
            .collect::<Vec<_>>()
            .join(", "),
        report.estimator_mae
    );
    if report.effects.len() == 2 && finite {
        Ok(detail)
    } else {
        Err(detail)
    }
}
