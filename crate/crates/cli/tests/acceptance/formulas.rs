//! Objective formulas against loop oracles, and the impression noise model.

use pirtune_autodiff::Tensor;
use pirtune_core::data::generate_corpus;
use pirtune_core::nets::{build_oracle, Layer, NetworkSpec, NetworkState, ScalePreset};
use pirtune_core::objectives::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IMAGES: usize = 50;

fn obj(id: &str) -> PirObjective {
    id.parse().unwrap()
}

/// Value-space colour PIR with an explicit column → channel table.
fn colour_oracle(img: &[f32], h: usize, w: usize, id: &str) -> f64 {
    let chans: Vec<usize> = id.chars().map(|c| "RGB".find(c).unwrap()).collect();
    let parts = chans.len();
    let mut owner = Vec::with_capacity(w);
    for (p, &c) in chans.iter().enumerate() {
        let width = w / parts + usize::from(p < w % parts);
        owner.extend(std::iter::repeat_n(c, width));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (img[(y * w + x) * 3 + c] as f64 + 1.0) / 2.0;
                den += v * v;
                if c == owner[x] {
                    num += v * v;
                }
            }
        }
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

/// Oracle forward pass with explicit loops (3×3 same convolutions, ReLU,
/// 2×2 max pooling between convolutions) up to `layer`.
fn loop_activations(spec: &NetworkSpec, state: &NetworkState, img: &[f32], size: usize, layer: &str) -> (Vec<f64>, usize) {
    let pooled = spec.layers.iter().any(|l| matches!(l, Layer::MaxPool2x));
    let mut act: Vec<f64> = img.iter().map(|&v| v as f64).collect();
    let (mut s, mut c) = (size, 3);
    for i in 1.. {
        let name = format!("conv{i}");
        let kernel = &state.params[&format!("{name}/kernel")];
        let bias = &state.params[&format!("{name}/bias")];
        let out_c = kernel.shape()[3];
        let mut next = vec![0.0; s * s * out_c];
        for y in 0..s {
            for x in 0..s {
                for o in 0..out_c {
                    let mut acc = bias.data()[o] as f64;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (y + ky, x + kx);
                            if iy < 1 || ix < 1 || iy > s || ix > s {
                                continue;
                            }
                            for ic in 0..c {
                                let k = kernel.data()[((ky * 3 + kx) * c + ic) * out_c + o] as f64;
                                acc += k * act[((iy - 1) * s + ix - 1) * c + ic];
                            }
                        }
                    }
                    next[(y * s + x) * out_c + o] = acc.max(0.0);
                }
            }
        }
        act = next;
        c = out_c;
        if name == layer {
            break;
        }
        if pooled && s % 2 == 0 {
            let half = s / 2;
            let mut p = vec![f64::NEG_INFINITY; half * half * c];
            for y in 0..s {
                for x in 0..s {
                    for ch in 0..c {
                        let slot = &mut p[((y / 2) * half + x / 2) * c + ch];
                        *slot = slot.max(act[(y * s + x) * c + ch]);
                    }
                }
            }
            act = p;
            s = half;
        }
    }
    (act, c)
}

fn oracle_fixture() -> (NetworkSpec, NetworkState) {
    let spec = build_oracle(&ScalePreset::desk()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut state = spec.init_state(&mut rng);
    // widen the init weights so deeper layers carry signal
    for t in state.params.values_mut() {
        for v in t.data_mut() {
            *v = *v * 10.0 + rng.random_range(-0.02..0.02);
        }
    }
    state.freeze();
    (spec, state)
}

fn image(h: usize, w: usize, colour: impl Fn(usize, usize) -> [f32; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            out.extend(colour(y, x).iter().map(|v| 2.0 * v - 1.0));
        }
    }
    out
}

pub fn objectives() -> Result<String, String> {
    let mut worst_loop = 0.0f64;
    let mut errors = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let ids = ["R", "G", "B", "RG", "GB", "RB", "BR", "GBR", "RGB"];
    for n in 0..IMAGES {
        let (h, w) = [(16, 16), (7, 11), (3, 17), (1, 5), (16, 13)][n % 5];
        let img: Vec<f32> = (0..h * w * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        for id in ids {
            let got = color_pir(&img, h, w, &obj(id)).map_err(|e| e.to_string())?;
            let diff = (got - colour_oracle(&img, h, w, id)).abs();
            worst_loop = worst_loop.max(diff);
            if diff >= 1e-5 {
                errors.push(format!("colour {id} image {n}: {diff:.2e}"));
            }
        }
    }

    let (spec, state) = oracle_fixture();
    let oracle = Oracle { spec: &spec, state: &state };
    let corpus = generate_corpus(41, IMAGES, 16).unwrap();
    let images = Tensor::from_fn(corpus.images.shape(), |i| {
        if (i / 768) % 2 == 0 {
            corpus.images.data()[i]
        } else {
            rng.random_range(-1.0..1.0)
        }
    });
    for (layer, count) in [("conv1", 16), ("conv2", 32), ("conv3", 64), ("conv4", 128)] {
        let k = rng.random_range(1..5);
        let filters = sample_filter_set(count, k, rng.random()).unwrap();
        let objective = PirObjective::filter_norm(layer, filters.clone()).unwrap();
        let got = true_pirs(&images, &objective, Some(oracle)).map_err(|e| e.to_string())?;
        for (n, img) in images.data().chunks(768).enumerate() {
            let (act, c) = loop_activations(&spec, &state, img, 16, layer);
            let mut energy = vec![0.0; c];
            for (i, a) in act.iter().enumerate() {
                energy[i % c] += a * a;
            }
            let total: f64 = energy.iter().sum();
            let expected = if total > 0.0 {
                (filters.iter().map(|&f| energy[f]).sum::<f64>() / total).sqrt()
            } else {
                0.0
            };
            let diff = (got[n] - expected).abs();
            worst_loop = worst_loop.max(diff);
            if diff >= 1e-5 {
                errors.push(format!("{layer} image {n}: {diff:.2e}"));
            }
        }
    }

    let mut analytic = 0usize;
    let mut expect = |what: &str, got: f64, want: f64| {
        analytic += 1;
        if (got - want).abs() >= 1e-6 {
            errors.push(format!("{what}: {got} vs {want}"));
        }
    };
    for (c, colour) in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]].iter().enumerate() {
        let pure = image(16, 16, |_, _| *colour);
        let id = &"RGB"[c..=c];
        expect(&format!("pure {id}"), color_pir(&pure, 16, 16, &obj(id)).unwrap(), 1.0);
    }
    for v in [0.1, 0.5, 1.0] {
        let gray = image(16, 16, |_, _| [v; 3]);
        for id in ["R", "G", "B"] {
            expect(&format!("gray {v} {id}"), color_pir(&gray, 16, 16, &obj(id)).unwrap(), (1.0f64 / 3.0).sqrt());
        }
    }
    let split = image(16, 16, |_, x| if x < 8 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] });
    expect("pure two-colour RB", color_pir(&split, 16, 16, &obj("RB")).unwrap(), 1.0);
    for (layer, count) in [("conv1", 16), ("conv2", 32), ("conv3", 64), ("conv4", 128)] {
        let all = PirObjective::filter_norm(layer, (0..count).collect()).unwrap();
        for (n, p) in true_pirs(&images, &all, Some(oracle)).unwrap().into_iter().enumerate() {
            expect(&format!("full set {layer} image {n}"), p, 1.0);
        }
    }

    let summary = format!(
        "{IMAGES} images: colour (9 ids) and filter norm (conv1-conv4) within 1e-5 of loop oracles, worst {worst_loop:.1e}; {analytic} analytic cases within 1e-6"
    );
    if errors.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; {} failures: {}", errors.len(), errors.into_iter().take(5).collect::<Vec<_>>().join(", ")))
    }
}

pub fn noise_model() -> Result<String, String> {
    let (n, p) = (1000u64, 0.3);
    let draws: Vec<f64> = (0..10_000u64)
        .map(|s| sample_impressions(p, n, s).map(|k| k as f64 / n as f64))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
    let expected = p * (1.0 - p) / n as f64;
    let endpoints = (0..1000u64).all(|s| {
        sample_impressions(0.0, n, s).ok() == Some(0) && sample_impressions(1.0, n, s).ok() == Some(n)
    });
    let summary = format!(
        "10^4 draws at p=0.3 n=1000: mean {mean:.5} (band ±0.005), variance ratio {:.3} (band ±20%); endpoints exact over 1000 seeds: {endpoints}",
        var / expected
    );
    if (mean - p).abs() < 0.005 && (var / expected - 1.0).abs() < 0.2 && endpoints {
        Ok(summary)
    } else {
        Err(summary)
    }
}
