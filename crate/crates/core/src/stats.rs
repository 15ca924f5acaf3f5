//! Effect sizes and significance tests for pre/post tuning comparisons, and
//! the least-squares regressions run across many tuning runs.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::gan::Gan;
use crate::objectives::{sample_impressions, true_pirs, Oracle, PirObjective};
use crate::seeds::{derive_seed, stream_seed};
use crate::tuning::IntrospectionRecord;

pub const ALPHA: f64 = 0.001;

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail probability `P(|T| ≥ |t|)` for Student's t with `dof`
/// degrees of freedom.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = dof / (dof + t * t);
    regularized_incomplete_beta(dof / 2.0, 0.5, x).clamp(0.0, 1.0)
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn check_sizes(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(CoreError::invalid("each sample needs at least 2 values"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub dof: f64,
    pub p: f64,
}

/// Welch's unequal-variance t-test of `mean(b) − mean(a)`, two-sided.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    check_sizes(a, b)?;
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(CoreError::Degenerate("both samples have zero variance".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let t = (mb - ma) / (sa + sb).sqrt();
    let dof = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchTest {
        t,
        dof,
        p: student_t_two_sided(t, dof),
    })
}

/// `(mean(b) − mean(a)) / sqrt((s_a² + s_b²) / 2)`.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    check_sizes(a, b)?;
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let pooled = ((va + vb) / 2.0).sqrt();
    if pooled == 0.0 {
        return Err(CoreError::Degenerate("pooled standard deviation is zero".into()));
    }
    Ok((mb - ma) / pooled)
}

/// Pre/post comparison of one tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub mean_pre: f64,
    pub mean_post: f64,
    pub sd_pre: f64,
    pub sd_post: f64,
    pub n_pre: usize,
    pub n_post: usize,
    pub delta_mean: f64,
    pub cohens_d: f64,
    pub welch_t: f64,
    pub welch_dof: f64,
    pub p_value: f64,
    pub significant: bool,
    pub pct_nonzero_pre: f64,
}

impl EffectSize {
    pub fn from_samples(pre: &[f64], post: &[f64]) -> Result<Self> {
        let welch = welch_t_test(pre, post)?;
        let d = cohens_d(pre, post)?;
        let (mean_pre, var_pre) = mean_var(pre);
        let (mean_post, var_post) = mean_var(post);
        let nonzero = pre.iter().filter(|&&v| v != 0.0).count();
        Ok(Self {
            mean_pre,
            mean_post,
            sd_pre: var_pre.sqrt(),
            sd_post: var_post.sqrt(),
            n_pre: pre.len(),
            n_post: post.len(),
            delta_mean: mean_post - mean_pre,
            cohens_d: d,
            welch_t: welch.t,
            welch_dof: welch.dof,
            p_value: welch.p,
            significant: welch.p < ALPHA,
            pct_nonzero_pre: nonzero as f64 / pre.len() as f64,
        })
    }
}

/// Which PIR values a run is evaluated on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    /// Noise-free objective values.
    #[default]
    True,
    /// Binomial observations with this many impressions per image.
    Observed(u64),
}

/// Scores `n` fresh samples from each generator and compares them.
pub fn evaluate_run(
    pre: &Gan,
    post: &Gan,
    objective: &PirObjective,
    oracle: Option<Oracle>,
    n: usize,
    seed: u64,
) -> Result<EffectSize> {
    evaluate_run_on(pre, post, objective, oracle, n, seed, EvalTarget::True)
}

pub fn evaluate_run_on(
    pre: &Gan,
    post: &Gan,
    objective: &PirObjective,
    oracle: Option<Oracle>,
    n: usize,
    seed: u64,
    target: EvalTarget,
) -> Result<EffectSize> {
    let score = |gan: &Gan, tag: &str| -> Result<Vec<f64>> {
        let images = gan.sample_images(n, stream_seed(seed, tag))?;
        let truth = true_pirs(&images, objective, oracle)?;
        match target {
            EvalTarget::True => Ok(truth),
            EvalTarget::Observed(impressions) => {
                let base = stream_seed(seed, &format!("{tag}/impressions"));
                truth
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let k = sample_impressions(p, impressions, derive_seed(base, i as u64))?;
                        Ok(k as f64 / impressions as f64)
                    })
                    .collect()
            }
        }
    };
    EffectSize::from_samples(&score(pre, "pre")?, &score(post, "post")?)
}

/// Ordinary least squares with standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub residuals: Vec<f64>,
    pub r_squared: f64,
    pub dof: usize,
}

/// Fits `y ≈ X β` through a Householder QR of `X` (rows are observations).
pub fn ols_fit(x: &[Vec<f64>], y: &[f64]) -> Result<OlsFit> {
    let n = x.len();
    let p = x.first().map_or(0, Vec::len);
    if n != y.len() {
        return Err(CoreError::invalid("X and y differ in row count"));
    }
    if p == 0 || n <= p {
        return Err(CoreError::invalid(format!("need more rows than columns, got {n}×{p}")));
    }
    if x.iter().any(|r| r.len() != p) {
        return Err(CoreError::invalid("ragged design matrix"));
    }
    let xm = DMatrix::from_fn(n, p, |i, j| x[i][j]);
    let yv = DVector::from_column_slice(y);
    let qr = xm.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..p).any(|i| r[(i, i)].abs() <= scale * 1e-10 * (n.max(p) as f64)) {
        return Err(CoreError::RankDeficient);
    }
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(CoreError::RankDeficient)?;
    let residuals = &yv - &xm * &beta;
    let dof = n - p;
    let rss = residuals.norm_squared();
    let sigma2 = rss / dof as f64;
    // (XᵀX)⁻¹ = R⁻¹ R⁻ᵀ
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(CoreError::RankDeficient)?;
    let cov = &r_inv * r_inv.transpose();
    let std_errors: Vec<f64> = (0..p).map(|i| (sigma2 * cov[(i, i)]).sqrt()).collect();
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let t_stats: Vec<f64> = coefficients
        .iter()
        .zip(&std_errors)
        .map(|(b, se)| if *se > 0.0 { b / se } else { f64::INFINITY * b.signum() })
        .collect();
    let p_values = t_stats.iter().map(|&t| student_t_two_sided(t, dof as f64)).collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    Ok(OlsFit {
        coefficients,
        std_errors,
        t_stats,
        p_values,
        residuals: residuals.iter().copied().collect(),
        r_squared,
        dof,
    })
}

/// One tuning run as seen by the cross-run analyses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub effect: EffectSize,
    pub introspection: IntrospectionRecord,
    /// Ordinal oracle layer index for filter objectives.
    pub layer_index: Option<usize>,
}

/// Coefficient of interest from one regression, or why it was skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    pub name: String,
    pub n: usize,
    pub controls: Vec<String>,
    pub fit: Option<OlsFit>,
    /// (β, standard error, t, p) of the regressor of interest.
    pub beta: Option<(f64, f64, f64, f64)>,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossRunAnalysis {
    pub regressions: Vec<RegressionRow>,
    pub runs: Vec<RunSummary>,
}

fn has_variation(v: &[f64]) -> bool {
    v.windows(2).any(|w| (w[0] - w[1]).abs() > 1e-12)
}

/// Regresses `y` on an intercept, `focus`, and any `controls` that vary.
fn regression(name: &str, y: &[f64], focus: &[f64], controls: &[(&str, Vec<f64>)]) -> RegressionRow {
    let kept: Vec<&(&str, Vec<f64>)> = controls.iter().filter(|(_, v)| has_variation(v)).collect();
    let dropped: Vec<&str> = controls
        .iter()
        .filter(|(_, v)| !has_variation(v))
        .map(|(n, _)| *n)
        .collect();
    let x: Vec<Vec<f64>> = (0..y.len())
        .map(|i| {
            let mut row = vec![1.0, focus[i]];
            row.extend(kept.iter().map(|(_, v)| v[i]));
            row
        })
        .collect();
    let mut row = RegressionRow {
        name: name.to_string(),
        n: y.len(),
        controls: kept.iter().map(|(n, _)| n.to_string()).collect(),
        fit: None,
        beta: None,
        note: if dropped.is_empty() {
            String::new()
        } else {
            format!("constant controls dropped: {}", dropped.join(" "))
        },
    };
    match ols_fit(&x, y) {
        Ok(fit) => {
            row.beta = Some((fit.coefficients[1], fit.std_errors[1], fit.t_stats[1], fit.p_values[1]));
            row.fit = Some(fit);
        }
        Err(e) => {
            let sep = if row.note.is_empty() { "" } else { "; " };
            row.note = format!("{}{sep}skipped: {e}", row.note);
        }
    }
    row
}

/// The three cross-run regressions:
/// true Δ on estimated Δ; Δ mean on initial sd controlling for initial mean
/// and percent nonzero; Cohen's d on ordinal layer index controlling for
/// initial sd and percent nonzero (filter runs only).
pub fn cross_run_analyses(runs: &[RunSummary]) -> Result<CrossRunAnalysis> {
    if runs.len() < 3 {
        return Err(CoreError::InsufficientRuns {
            needed: 3,
            got: runs.len(),
        });
    }
    let col = |f: &dyn Fn(&RunSummary) -> f64| runs.iter().map(f).collect::<Vec<f64>>();
    let true_delta = col(&|r| r.introspection.true_delta);
    let est_delta = col(&|r| r.introspection.estimated_delta);
    let delta = col(&|r| r.effect.delta_mean);
    let sd = col(&|r| r.effect.sd_pre);
    let mean = col(&|r| r.effect.mean_pre);
    let nonzero = col(&|r| r.effect.pct_nonzero_pre);

    let mut regressions = vec![
        regression("true_delta~estimated_delta", &true_delta, &est_delta, &[]),
        regression(
            "delta_mean~initial_sd",
            &delta,
            &sd,
            &[("initial_mean", mean), ("pct_nonzero", nonzero)],
        ),
    ];
    let layered: Vec<&RunSummary> = runs.iter().filter(|r| r.layer_index.is_some()).collect();
    let layer_row = if layered.len() >= 3 {
        let pick = |f: &dyn Fn(&RunSummary) -> f64| layered.iter().map(|r| f(r)).collect::<Vec<f64>>();
        regression(
            "cohens_d~layer_index",
            &pick(&|r| r.effect.cohens_d),
            &pick(&|r| r.layer_index.unwrap_or(0) as f64),
            &[
                ("initial_sd", pick(&|r| r.effect.sd_pre)),
                ("pct_nonzero", pick(&|r| r.effect.pct_nonzero_pre)),
            ],
        )
    } else {
        RegressionRow {
            name: "cohens_d~layer_index".into(),
            n: layered.len(),
            controls: Vec::new(),
            fit: None,
            beta: None,
            note: format!("skipped: {} filter-objective runs, need 3", layered.len()),
        }
    };
    regressions.push(layer_row);
    Ok(CrossRunAnalysis {
        regressions,
        runs: runs.to_vec(),
    })
}

impl CrossRunAnalysis {
    /// One row per regression, then one row per run (scatter data).
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "kind,name,n,beta,std_error,t,p_value,r_squared,note,true_delta,estimated_delta,delta_mean,initial_mean,initial_sd,pct_nonzero_pre,cohens_d,layer_index"
        )?;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.regressions {
            let (b, se, t, p) = match r.beta {
                Some((b, se, t, p)) => (Some(b), Some(se), Some(t), Some(p)),
                None => (None, None, None, None),
            };
            writeln!(
                out,
                "regression,{},{},{},{},{},{},{},\"{}\",,,,,,,,",
                r.name,
                r.n,
                f(b),
                f(se),
                f(t),
                f(p),
                f(r.fit.as_ref().map(|x| x.r_squared)),
                r.note.replace('"', "'")
            )?;
        }
        for run in &self.runs {
            writeln!(
                out,
                "run,{},,,,,,,,{},{},{},{},{},{},{},{}",
                run.label,
                run.introspection.true_delta,
                run.introspection.estimated_delta,
                run.effect.delta_mean,
                run.effect.mean_pre,
                run.effect.sd_pre,
                run.effect.pct_nonzero_pre,
                run.effect.cohens_d,
                run.layer_index.map(|l| l.to_string()).unwrap_or_default()
            )?;
        }
        Ok(())
    }
}
