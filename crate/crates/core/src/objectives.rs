//! Closed-form "true" PIR objectives, binomial impression noise, and the PIR
//! datasets the estimator is trained on.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use pirtune_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::gan::Gan;
use crate::nets::{Layer, NetworkSpec, NetworkState};
use crate::seeds::{derive_seed, stream_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::R, Channel::G, Channel::B];

    pub fn index(self) -> usize {
        self as usize
    }

    fn letter(self) -> char {
        ['R', 'G', 'B'][self.index()]
    }

    fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'R' => Some(Channel::R),
            'G' => Some(Channel::G),
            'B' => Some(Channel::B),
            _ => None,
        }
    }
}

/// A closed-form map from an image to its true PIR in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PirObjective {
    SingleColor { channel: Channel },
    /// Left half scored on `left`, right half on `right`.
    TwoColor { left: Channel, right: Channel },
    /// Width thirds scored left to right.
    ThreeColor { channels: [Channel; 3] },
    FilterNorm { layer: String, filters: Vec<usize> },
}

impl fmt::Display for PirObjective {
    /// Colour objectives list their channels left to right (`R`, `RB`,
    /// `GBR`); filter objectives read `layer:f1,f2,…`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PirObjective::SingleColor { channel } => write!(f, "{}", channel.letter()),
            PirObjective::TwoColor { left, right } => write!(f, "{}{}", left.letter(), right.letter()),
            PirObjective::ThreeColor { channels } => {
                channels.iter().try_for_each(|c| write!(f, "{}", c.letter()))
            }
            PirObjective::FilterNorm { layer, filters } => {
                let list: Vec<String> = filters.iter().map(usize::to_string).collect();
                write!(f, "{layer}:{}", list.join(","))
            }
        }
    }
}

impl FromStr for PirObjective {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        if let Some((layer, list)) = s.split_once(':') {
            let filters = list
                .split(',')
                .map(|f| f.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| CoreError::invalid(format!("bad filter list in objective `{s}`")))?;
            return PirObjective::filter_norm(layer, filters);
        }
        let channels: Option<Vec<Channel>> = s.chars().map(Channel::from_letter).collect();
        match channels.as_deref() {
            Some([c]) => Ok(PirObjective::SingleColor { channel: *c }),
            Some([l, r]) => Ok(PirObjective::TwoColor { left: *l, right: *r }),
            Some([a, b, c]) => Ok(PirObjective::ThreeColor {
                channels: [*a, *b, *c],
            }),
            _ => Err(CoreError::invalid(format!("unrecognised objective `{s}`"))),
        }
    }
}

impl PirObjective {
    /// Filter-norm objective; the filter list must be non-empty and free of
    /// duplicates (range is checked against the oracle at evaluation time).
    pub fn filter_norm(layer: impl Into<String>, filters: Vec<usize>) -> Result<Self> {
        let mut sorted = filters.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if filters.is_empty() || sorted.len() != filters.len() {
            return Err(CoreError::invalid("filter set must be non-empty and duplicate-free"));
        }
        Ok(PirObjective::FilterNorm {
            layer: layer.into(),
            filters,
        })
    }

    pub fn is_color(&self) -> bool {
        !matches!(self, PirObjective::FilterNorm { .. })
    }

    /// Channel scored on each column of an image `width` pixels wide.
    fn column_channels(&self, width: usize) -> Vec<usize> {
        let segments: Vec<Channel> = match self {
            PirObjective::SingleColor { channel } => vec![*channel],
            PirObjective::TwoColor { left, right } => vec![*left, *right],
            PirObjective::ThreeColor { channels } => channels.to_vec(),
            PirObjective::FilterNorm { .. } => unreachable!("colour objectives only"),
        };
        column_segments(width, segments.len())
            .into_iter()
            .zip(segments)
            .flat_map(|(len, c)| std::iter::repeat_n(c.index(), len))
            .collect()
    }
}

/// Widths of `parts` side-by-side segments; the leftmost `width % parts`
/// segments take one extra column.
pub fn column_segments(width: usize, parts: usize) -> Vec<usize> {
    let (base, rem) = (width / parts, width % parts);
    (0..parts).map(|i| base + usize::from(i < rem)).collect()
}

/// Colour PIR of one `[H, W, 3]` image in `[-1, 1]`, scored on `(x + 1) / 2`.
pub fn color_pir(image: &[f32], height: usize, width: usize, objective: &PirObjective) -> Result<f64> {
    if !objective.is_color() {
        return Err(CoreError::invalid("color_pir needs a colour objective"));
    }
    if image.len() != height * width * 3 {
        return Err(CoreError::invalid("image length does not match H×W×3"));
    }
    let scored = objective.column_channels(width);
    let (mut target, mut total) = (0.0f64, 0.0f64);
    for (p, px) in image.chunks(3).enumerate() {
        let col = p % width;
        for (c, &v) in px.iter().enumerate() {
            let v = (v as f64 + 1.0) / 2.0;
            total += v * v;
            if c == scored[col] {
                target += v * v;
            }
        }
    }
    Ok(if total > 0.0 { (target / total).sqrt() } else { 0.0 })
}

/// `sqrt(Σ_{f ∈ filters} ‖a_f‖² / Σ_f ‖a_f‖²)` for one example's activation,
/// laid out with filters on the last axis. Zero total activity gives 0.
pub fn filter_energy_ratio(activation: &[f32], filter_count: usize, filters: &[usize]) -> Result<f64> {
    let mut energy = vec![0.0f64; filter_count];
    for (i, &a) in activation.iter().enumerate() {
        energy[i % filter_count] += (a as f64) * (a as f64);
    }
    let mut selected = 0.0;
    for &f in filters {
        selected += energy[f];
    }
    let total: f64 = energy.iter().sum();
    Ok(if total > 0.0 { (selected / total).sqrt().min(1.0) } else { 0.0 })
}

/// Number of filters exposed by the tap called `layer`.
pub fn layer_filter_count(spec: &NetworkSpec, layer: &str) -> Result<usize> {
    let mut width = None;
    for l in &spec.layers {
        match l {
            Layer::Conv { out_channels, .. } => width = Some(*out_channels),
            Layer::Dense { outputs, .. } => width = Some(*outputs),
            Layer::Tap { name } if name == layer => {
                return width.ok_or_else(|| CoreError::UnknownLayer(layer.to_string()));
            }
            _ => {}
        }
    }
    Err(CoreError::UnknownLayer(layer.to_string()))
}

/// Frozen oracle used by filter-norm objectives.
#[derive(Clone, Copy, Debug)]
pub struct Oracle<'a> {
    pub spec: &'a NetworkSpec,
    pub state: &'a NetworkState,
}

impl Oracle<'_> {
    /// Activations at `layer` for a batch, plus the filter count.
    pub fn activations(&self, images: &Tensor<f32>, layer: &str) -> Result<(Tensor<f32>, usize)> {
        let filters = layer_filter_count(self.spec, layer)?;
        let (_, mut taps) = self.spec.infer_with_taps(self.state, images, 128, &[layer])?;
        Ok((taps.remove(0), filters))
    }
}

fn check_filters(layer: &str, filters: &[usize], count: usize) -> Result<()> {
    if let Some(&bad) = filters.iter().find(|&&f| f >= count) {
        return Err(CoreError::FilterOutOfRange {
            layer: layer.to_string(),
            index: bad,
            filters: count,
        });
    }
    Ok(())
}

/// True PIR of every image in an `[N, H, W, 3]` batch.
pub fn true_pirs(images: &Tensor<f32>, objective: &PirObjective, oracle: Option<Oracle>) -> Result<Vec<f64>> {
    let shape = images.shape();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(CoreError::invalid(format!("expected [N,H,W,3] images, got {shape:?}")));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    match objective {
        PirObjective::FilterNorm { layer, filters } => {
            let oracle = oracle.ok_or_else(|| CoreError::invalid("filter objective needs the oracle"))?;
            let (acts, count) = oracle.activations(images, layer)?;
            check_filters(layer, filters, count)?;
            let per = acts.len() / n;
            acts.data()
                .chunks(per)
                .map(|a| filter_energy_ratio(a, count, filters))
                .collect()
        }
        _ => images
            .data()
            .chunks(h * w * 3)
            .map(|img| color_pir(img, h, w, objective))
            .collect(),
    }
}

/// Fraction of images on which each filter of `layer` has any nonzero
/// activation.
pub fn filter_activity(oracle: Oracle, images: &Tensor<f32>, layer: &str) -> Result<Vec<f64>> {
    let (acts, count) = oracle.activations(images, layer)?;
    let n = images.shape()[0];
    let per = acts.len() / n;
    let mut active = vec![0usize; count];
    for a in acts.data().chunks(per) {
        let mut seen = vec![false; count];
        for (i, &v) in a.iter().enumerate() {
            if v != 0.0 {
                seen[i % count] = true;
            }
        }
        for (slot, s) in active.iter_mut().zip(seen) {
            *slot += usize::from(s);
        }
    }
    Ok(active.into_iter().map(|c| c as f64 / n as f64).collect())
}

/// `k` distinct filter indices below `count`, drawn without replacement.
pub fn sample_filter_set(count: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > count {
        return Err(CoreError::invalid(format!("cannot draw {k} of {count} filters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, count, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Positive interactions out of `n` impressions at true rate `p`.
pub fn sample_impressions(p: f64, n: u64, seed: u64) -> Result<u64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CoreError::invalid(format!("PIR {p} outside [0, 1]")));
    }
    if n == 0 {
        return Err(CoreError::invalid("impressions must be at least 1"));
    }
    let dist = Binomial::new(n, p).map_err(|e| CoreError::invalid(e.to_string()))?;
    Ok(dist.sample(&mut ChaCha8Rng::seed_from_u64(seed)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PirRecord {
    pub image_id: String,
    pub impressions: u64,
    pub positive_count: u64,
    pub observed_pir: f64,
    /// Noise-free value; kept in memory for analysis, not written to CSV.
    pub true_pir: f64,
}

/// Generated images with their simulated interaction data.
#[derive(Clone, Debug, PartialEq)]
pub struct PirDataset {
    pub objective_id: String,
    pub images: Tensor<f32>,
    pub records: Vec<PirRecord>,
    pub seed: u64,
}

pub const DEFAULT_IMAGES: usize = 1000;
pub const DEFAULT_IMPRESSIONS: u64 = 1000;

impl PirDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn observed(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.observed_pir).collect()
    }

    /// Fraction of rows whose observed PIR is exactly zero.
    pub fn zero_fraction(&self) -> f64 {
        let zeros = self.records.iter().filter(|r| r.positive_count == 0).count();
        zeros as f64 / self.len() as f64
    }

    /// Concatenates two datasets for the same objective.
    pub fn merged(&self, other: &PirDataset) -> Result<PirDataset> {
        if self.objective_id != other.objective_id {
            return Err(CoreError::invalid("cannot merge datasets for different objectives"));
        }
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        let mut ids: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::invalid("merged datasets share image ids"));
        }
        Ok(PirDataset {
            objective_id: self.objective_id.clone(),
            images: Tensor::concat_rows(&[&self.images, &other.images])?,
            records,
            seed: self.seed,
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "image_id,objective_id,impressions,positive_count,observed_pir")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.image_id, self.objective_id, r.impressions, r.positive_count, r.observed_pir
            )?;
        }
        Ok(())
    }
}

/// Renders `n_images` generator samples, scores them, and simulates
/// `n_impressions` binomial impressions per image. `id_prefix` keeps ids
/// unique across datasets that may later be merged.
pub fn build_pir_dataset(
    gan: &Gan,
    objective: &PirObjective,
    oracle: Option<Oracle>,
    n_images: usize,
    n_impressions: u64,
    seed: u64,
    id_prefix: &str,
) -> Result<PirDataset> {
    if n_images == 0 {
        return Err(CoreError::invalid("dataset needs at least one image"));
    }
    let images = gan.sample_images(n_images, stream_seed(seed, "latents"))?;
    let truths = true_pirs(&images, objective, oracle)?;
    let impression_seed = stream_seed(seed, "impressions");
    let records = truths
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let positive_count = sample_impressions(p, n_impressions, derive_seed(impression_seed, i as u64))?;
            Ok(PirRecord {
                image_id: format!("{id_prefix}{i:06}"),
                impressions: n_impressions,
                positive_count,
                observed_pir: positive_count as f64 / n_impressions as f64,
                true_pir: p,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PirDataset {
        objective_id: objective.to_string(),
        images,
        records,
        seed,
    })
}
