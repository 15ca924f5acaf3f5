//! Central-difference checks over every differentiable op and both composite
//! losses, cycling through the op list with fresh random shapes and values.

use std::collections::BTreeMap;

use pirtune_autodiff::gradcheck::{check_gradients, GradCheck, GradCheckReport};
use pirtune_autodiff::{Graph, Mode, Result, RunningStats, Tensor, Var};
use pirtune_core::data::generate_corpus;
use pirtune_core::estimator::estimated_pir_mean;
use pirtune_core::gan::{discriminator_objective, generator_objective, Gan};
use pirtune_core::nets::{build_estimator, NetworkState, ScalePreset};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: u64 = 50;
pub const TOL: f64 = 1e-3;

const OPS: [&str; 19] = [
    "conv2d stride 1",
    "conv2d stride 2",
    "upsample",
    "leaky_relu",
    "tanh",
    "batch_norm train",
    "batch_norm infer",
    "dropout",
    "dense",
    "softmax_T",
    "log_softmax",
    "add/sub/mul",
    "log/scale/offset/mean",
    "clamp",
    "columns/concat/pick/reshape",
    "max_pool",
    "global_avg_pool",
    "generator loss with PIR term",
    "discriminator loss",
];

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(random(&mut rng, &shape));
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> GradCheckReport {
    check_gradients(GradCheck::default(), inputs, f).expect("graph builds")
}

fn op_case(op: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..4);
    let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
    let c = rng.random_range(1..4);
    match op {
        0 | 1 => {
            let stride = op + 1;
            let out_c = rng.random_range(1..4);
            let inputs = [random(&mut rng, &[b, h, w, c]), random(&mut rng, &[3, 3, c, out_c])];
            check(&inputs, |g, v| {
                let y = g.conv2d(v[0], v[1], stride)?;
                project(g, y, seed)
            })
        }
        2 => check(&[random(&mut rng, &[b, h, w, c])], |g, v| {
            let y = g.upsample_nn2x(v[0])?;
            project(g, y, seed)
        }),
        3 => {
            let alpha = rng.random_range(0.01..0.5);
            check(&[random(&mut rng, &[b, h * w])], |g, v| {
                let y = g.leaky_relu(v[0], alpha)?;
                project(g, y, seed)
            })
        }
        4 => check(&[random(&mut rng, &[b, h * w])], |g, v| {
            let y = g.tanh(v[0])?;
            project(g, y, seed)
        }),
        5 | 6 => {
            let mode = if op == 5 { Mode::Train } else { Mode::Infer };
            let n = b + 2;
            let inputs = [
                random(&mut rng, &[n, h, w, c]),
                Tensor::from_fn(&[c], |_| rng.random_range(0.5..1.5)),
                random(&mut rng, &[c]),
            ];
            let stats = RunningStats {
                mean: (0..c).map(|_| rng.random_range(-0.3..0.3)).collect(),
                var: (0..c).map(|_| rng.random_range(0.5..1.5)).collect(),
            };
            check(&inputs, |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], &stats, mode)?;
                project(g, y, seed)
            })
        }
        7 => {
            let rate = rng.random_range(0.1..0.6);
            check(&[random(&mut rng, &[b, h * w])], |g, v| {
                // the same mask on every evaluation
                let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let y = g.dropout(v[0], rate, Mode::Train, &mut mask_rng)?;
                project(g, y, seed)
            })
        }
        8 => {
            let (i, o) = (h + 1, w + 1);
            let inputs = [random(&mut rng, &[b, i]), random(&mut rng, &[i, o]), random(&mut rng, &[o])];
            check(&inputs, |g, v| {
                let y = g.dense(v[0], v[1], v[2])?;
                project(g, y, seed)
            })
        }
        9 => {
            let t = rng.random_range(0.05..2.0);
            check(&[random(&mut rng, &[b, h + 2])], |g, v| {
                let y = g.softmax_with_temperature(v[0], t)?;
                project(g, y, seed)
            })
        }
        10 => check(&[random(&mut rng, &[b, h + 2])], |g, v| {
            let y = g.log_softmax(v[0])?;
            project(g, y, seed)
        }),
        11 => {
            let inputs = [random(&mut rng, &[b, h]), random(&mut rng, &[b, h])];
            check(&inputs, |g, v| {
                let s = g.add(v[0], v[1])?;
                let d = g.sub(s, v[1])?;
                let m = g.mul(d, v[1])?;
                project(g, m, seed)
            })
        }
        12 => {
            let positive = Tensor::from_fn(&[b, h], |_| rng.random_range(0.2..1.0));
            let (k, o) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            check(&[positive, random(&mut rng, &[b, h])], |g, v| {
                let l = g.log(v[0])?;
                let s = g.scale(l, k)?;
                let o = g.offset(s, o)?;
                let p = g.mul(o, v[1])?;
                g.mean(p)
            })
        }
        13 => check(&[random(&mut rng, &[b, h * w])], |g, v| {
            let y = g.clamp(v[0], -0.5, 0.5)?;
            project(g, y, seed)
        }),
        14 => {
            let cols = w + 2;
            let inputs = [random(&mut rng, &[2 * b, cols]), random(&mut rng, &[2 * b, 2])];
            let mut order: Vec<usize> = (0..cols).collect();
            order.shuffle(&mut rng);
            check(&inputs, |g, v| {
                let part = g.columns(v[0], 1, cols - 2)?;
                let cat = g.concat_columns(part, v[1])?;
                let picked = g.pick_columns(cat, &order)?;
                let r = g.reshape(cat, &[b, 2 * cols])?;
                let a = project(g, r, seed)?;
                let p = project(g, picked, seed + 1)?;
                g.add(a, p)
            })
        }
        15 => check(&[random(&mut rng, &[b, 2 * h, 2 * w, c])], |g, v| {
            let y = g.max_pool2x(v[0])?;
            project(g, y, seed)
        }),
        16 => check(&[random(&mut rng, &[b, h, w, c])], |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y, seed)
        }),
        _ => unreachable!(),
    }
}

// Composite losses: the trainers' graphs in f64 with every weight a leaf, on a
// shrunken preset so that each case stays small.

const COMPOSITE: GradCheck = GradCheck {
    step: 1e-5,
    floor: 1e-5,
    max_per_input: 64,
    min_step: 1e-7,
};

fn tiny_preset() -> ScalePreset {
    ScalePreset {
        image_size: 8,
        latent_size: 3,
        generator_depths: vec![4, 4, 3],
        discriminator_filters: vec![4, 4],
        discriminator_strides: vec![2, 1],
        estimator_depths: vec![4, 4],
        ..ScalePreset::desk()
    }
}

fn leaves(state: &NetworkState) -> (Vec<String>, Vec<Tensor<f64>>) {
    state.params.iter().map(|(n, t)| (n.clone(), t.cast())).unzip()
}

fn bind(names: &[String], vars: &[Var]) -> BTreeMap<String, Var> {
    names.iter().cloned().zip(vars.iter().copied()).collect()
}

fn composite_case(generator: bool, seed: u64) -> GradCheckReport {
    let preset = tiny_preset();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conditional = seed % 2 == 0;
    let mut gan = Gan::new(&preset, conditional, seed).unwrap();
    // distinct fakes keep train-mode batch norm in D away from its
    // near-zero-variance regime at init
    for t in gan.g.params.values_mut() {
        for v in t.data_mut() {
            *v = *v * 4.0 + rng.random_range(-0.05..0.05);
        }
    }
    let latents = gan.sample_latents(&mut rng, 3);
    if generator {
        let spec = build_estimator(&preset).unwrap();
        let mut est = spec.init_state(&mut rng);
        est.freeze();
        let w_pir = rng.random_range(0.0..1000.0);
        let temperature = if seed % 3 == 0 { 1.0 } else { 0.01 };
        let (names, inputs) = leaves(&gan.g);
        let mut d_view = gan.d.clone();
        d_view.freeze();
        check_gradients(COMPOSITE, &inputs, |g: &mut Graph<f64>, vars| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = g.constant(latents.input().cast());
            let fake = gan
                .g_spec
                .forward_with(g, &gan.g, &bind(&names, vars), z, Mode::Train, &mut rng)
                .unwrap()
                .output;
            let d = gan.d_spec.forward(g, &d_view, fake, Mode::Train, &mut rng).unwrap().output;
            let terms = generator_objective(g, d, gan.classes(), latents.classes.as_deref()).unwrap();
            let pir = estimated_pir_mean(g, &spec, &est, fake, temperature).unwrap();
            let weighted = g.scale(pir, w_pir)?;
            g.add(terms.total, weighted)
        })
        .unwrap()
    } else {
        let corpus = generate_corpus(seed, 3, 16).unwrap();
        let real = Tensor::from_fn(&[3, 8, 8, 3], |i| {
            let (n, rest) = (i / 192, i % 192);
            let (y, x, c) = (rest / 24, (rest / 3) % 8, rest % 3);
            corpus.images.data()[n * 768 + (y * 16 + x) * 3 + c] as f64
        });
        let fake: Tensor<f64> = gan.generate(&latents).unwrap().cast();
        let labels = (gan.classes() > 0).then_some(corpus.labels.as_slice());
        let (names, inputs) = leaves(&gan.d);
        check_gradients(COMPOSITE, &inputs, |g: &mut Graph<f64>, vars| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let overrides = bind(&names, vars);
            let real = g.constant(real.clone());
            let fake = g.constant(fake.clone());
            let dr = gan.d_spec.forward_with(g, &gan.d, &overrides, real, Mode::Train, &mut rng).unwrap();
            let df = gan.d_spec.forward_with(g, &gan.d, &overrides, fake, Mode::Train, &mut rng).unwrap();
            Ok(discriminator_objective(g, dr.output, df.output, gan.classes(), labels).unwrap().total)
        })
        .unwrap()
    }
}

pub fn run() -> std::result::Result<String, String> {
    let mut failures = Vec::new();
    let mut worst = (0.0f64, "");
    for case in 0..CASES {
        let op = case as usize % OPS.len();
        let seed = 1000 + case;
        let report = match op {
            17 => composite_case(true, seed),
            18 => composite_case(false, seed),
            _ => op_case(op, seed),
        };
        if report.max_rel_error > worst.0 {
            worst = (report.max_rel_error, OPS[op]);
        }
        if !report.passes(TOL) || report.checked == 0 {
            failures.push(format!("{} case {case}: {:.2e}", OPS[op], report.max_rel_error));
        }
    }
    let summary = format!(
        "{}/{CASES} cases within {TOL:e} over {} ops; worst {:.2e} ({})",
        CASES as usize - failures.len(),
        OPS.len(),
        worst.0,
        worst.1
    );
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; failing: {}", failures.join(", ")))
    }
}
