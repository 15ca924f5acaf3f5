//! Welch, Cohen and OLS against exact rational arithmetic, with p-values
//! from a quadrature of the t density that shares no code with the library.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use pirtune_core::stats::{cohens_d, ols_fit, welch_t_test};
use pirtune_core::CoreError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

type Q = BigRational;

const CASES: usize = 20;
const TOL: f64 = 1e-6;

fn q(milli: i64) -> Q {
    Q::new(BigInt::from(milli), BigInt::from(1000))
}

fn qn(n: usize) -> Q {
    Q::from_integer(BigInt::from(n))
}

fn f(x: &Q) -> f64 {
    x.to_f64().unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Two-sided Student-t tail: with x = √ν·tan θ the density is proportional
/// to cos^(ν−1) θ on [0, π/2].
fn t_tail(t: f64, dof: f64) -> f64 {
    fn simpson(g: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (g(lm), g(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        simpson(g, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(g, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let g = |theta: f64| theta.cos().max(0.0).powf(dof - 1.0);
    let integrate = |a: f64, b: f64| {
        let panels = 256;
        let width = (b - a) / panels as f64;
        (0..panels)
            .map(|i| {
                let (lo, hi) = (a + i as f64 * width, a + (i + 1) as f64 * width);
                let (fa, fm, fb) = (g(lo), g(0.5 * (lo + hi)), g(hi));
                simpson(&g, lo, hi, fa, fm, fb, (hi - lo) / 6.0 * (fa + 4.0 * fm + fb), 1e-14 * width, 30)
            })
            .sum::<f64>()
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    (integrate((t.abs() / dof.sqrt()).atan(), half_pi) / integrate(0.0, half_pi)).min(1.0)
}

fn moments(v: &[i64]) -> (Q, Q, Q) {
    let n = qn(v.len());
    let mean = v.iter().map(|&x| q(x)).fold(Q::zero(), |a, b| a + b) / &n;
    let ss = v.iter().map(|&x| (q(x) - &mean) * (q(x) - &mean)).fold(Q::zero(), |a, b| a + b);
    let var = ss / (&n - qn(1));
    (mean, var, n)
}

/// Exact t, Welch dof and Cohen's d (the square roots taken in f64 at the end).
fn welch_reference(a: &[i64], b: &[i64]) -> (f64, f64, f64) {
    let (ma, va, na) = moments(a);
    let (mb, vb, nb) = moments(b);
    let (sa, sb) = (&va / &na, &vb / &nb);
    let diff = &mb - &ma;
    let t2 = &diff * &diff / (&sa + &sb);
    let dof = (&sa + &sb) * (&sa + &sb) / (&sa * &sa / (&na - qn(1)) + &sb * &sb / (&nb - qn(1)));
    let d2 = &diff * &diff / ((&va + &vb) / qn(2));
    let sign = if diff < Q::zero() { -1.0 } else { 1.0 };
    (sign * f(&t2).sqrt(), f(&dof), sign * f(&d2).sqrt())
}

/// Exact OLS through the normal equations (Gauss-Jordan on [XᵀX | I | Xᵀy]).
fn ols_reference(x: &[Vec<i64>], y: &[i64]) -> (Vec<f64>, Vec<f64>) {
    let (n, p) = (x.len(), x[0].len());
    let xq: Vec<Vec<Q>> = x.iter().map(|r| r.iter().map(|&v| q(v)).collect()).collect();
    let yq: Vec<Q> = y.iter().map(|&v| q(v)).collect();
    let mut m: Vec<Vec<Q>> = (0..p)
        .map(|i| {
            let mut row: Vec<Q> = (0..p)
                .map(|j| (0..n).map(|k| &xq[k][i] * &xq[k][j]).fold(Q::zero(), |a, b| a + b))
                .collect();
            row.extend((0..p).map(|j| if i == j { qn(1) } else { Q::zero() }));
            row.push((0..n).map(|k| &xq[k][i] * &yq[k]).fold(Q::zero(), |a, b| a + b));
            row
        })
        .collect();
    for col in 0..p {
        let pivot = (col..p).find(|&r| !m[r][col].is_zero()).unwrap();
        m.swap(col, pivot);
        let inv = qn(1) / &m[col][col];
        for v in m[col].iter_mut() {
            *v = &*v * &inv;
        }
        let pivot_row = m[col].clone();
        for (r, row) in m.iter_mut().enumerate() {
            if r != col && !row[col].is_zero() {
                let factor = row[col].clone();
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v = &*v - &factor * pv;
                }
            }
        }
    }
    let beta: Vec<Q> = (0..p).map(|i| m[i][2 * p].clone()).collect();
    let rss = (0..n)
        .map(|k| {
            let fit = (0..p).map(|j| &xq[k][j] * &beta[j]).fold(Q::zero(), |a, b| a + b);
            (&yq[k] - &fit) * (&yq[k] - &fit)
        })
        .fold(Q::zero(), |a, b| a + b);
    let sigma2 = rss / qn(n - p);
    let se = (0..p).map(|i| f(&(&sigma2 * &m[i][p + i])).sqrt()).collect();
    (beta.iter().map(f).collect(), se)
}

fn milli(v: &[i64]) -> Vec<f64> {
    v.iter().map(|&x| x as f64 / 1000.0).collect()
}

pub fn run() -> Result<String, String> {
    let mut errors: Vec<String> = Vec::new();
    let mut worst = 0.0f64;
    let mut note = |errors: &mut Vec<String>, what: String, err: f64| {
        worst = worst.max(err);
        if err >= TOL {
            errors.push(format!("{what}: {err:.2e}"));
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for case in 0..CASES {
        let (na, nb) = (rng.random_range(2..60), rng.random_range(2..60));
        let shift = rng.random_range(-500..500);
        let a: Vec<i64> = (0..na).map(|_| rng.random_range(0..1000)).collect();
        let b: Vec<i64> = (0..nb).map(|_| rng.random_range(0..1000) + shift).collect();
        let (t, dof, d) = welch_reference(&a, &b);
        match (welch_t_test(&milli(&a), &milli(&b)), cohens_d(&milli(&a), &milli(&b))) {
            (Ok(w), Ok(got_d)) => {
                note(&mut errors, format!("welch t case {case}"), rel(w.t, t));
                note(&mut errors, format!("welch dof case {case}"), rel(w.dof, dof));
                note(&mut errors, format!("welch p case {case}"), (w.p - t_tail(t, dof)).abs());
                note(&mut errors, format!("cohen d case {case}"), rel(got_d, d));
            }
            (w, d) => errors.push(format!("case {case}: {w:?} {d:?}")),
        }
    }
    for case in 0..CASES {
        let p = rng.random_range(1..5);
        let n = rng.random_range(p + 3..50);
        let truth: Vec<i64> = (0..p).map(|_| rng.random_range(-3000..3000)).collect();
        let x: Vec<Vec<i64>> = (0..n)
            .map(|_| {
                let mut row = vec![1000];
                row.extend((1..p).map(|_| rng.random_range(-2000..2000)));
                row
            })
            .collect();
        let y: Vec<i64> = x
            .iter()
            .map(|r| r.iter().zip(&truth).map(|(a, b)| a * b / 1000).sum::<i64>() + rng.random_range(-800..800))
            .collect();
        let (beta, se) = ols_reference(&x, &y);
        let xf: Vec<Vec<f64>> = x.iter().map(|r| milli(r)).collect();
        match ols_fit(&xf, &milli(&y)) {
            Ok(fit) => {
                for j in 0..p {
                    note(&mut errors, format!("ols beta{j} case {case}"), rel(fit.coefficients[j], beta[j]));
                    note(&mut errors, format!("ols se{j} case {case}"), rel(fit.std_errors[j], se[j]));
                    let t = beta[j] / se[j];
                    note(&mut errors, format!("ols p{j} case {case}"), (fit.p_values[j] - t_tail(t, (n - p) as f64)).abs());
                }
            }
            Err(e) => errors.push(format!("ols case {case}: {e}")),
        }
    }

    // analytic cases
    let mut analytic = 0;
    let mut check = |what: &str, ok: bool| {
        analytic += 1;
        if !ok {
            errors.push(what.to_string());
        }
    };
    let (a, b) = ([1.0, 2.0, 3.0, 4.0, 5.0], [3.0, 4.0, 5.0, 6.0, 7.0]);
    let w = welch_t_test(&a, &b).unwrap();
    let statrs_p = 2.0 * StudentsT::new(0.0, 1.0, 8.0).unwrap().sf(2.0);
    check("t = 2, dof = 8 example", rel(w.t, 2.0) < 1e-12 && rel(w.dof, 8.0) < 1e-12);
    check("p of the t = 2 example", (w.p - 0.080_516_6).abs() < TOL && (w.p - statrs_p).abs() < 1e-9);
    check("d of the t = 2 example", rel(cohens_d(&a, &b).unwrap(), 2.0 / 2.5f64.sqrt()) < 1e-12);
    let same = [0.3, 0.1, 0.7, 0.2];
    let w = welch_t_test(&same, &same).unwrap();
    check("identical samples", w.t == 0.0 && (w.p - 1.0).abs() < 1e-12 && cohens_d(&same, &same).unwrap() == 0.0);
    let shifted: Vec<f64> = [1.0, 3.0, 5.0, 7.0].iter().map(|v| v + (20.0f64 / 3.0).sqrt()).collect();
    check("one pooled sd shift", rel(cohens_d(&[1.0, 3.0, 5.0, 7.0], &shifted).unwrap(), 1.0) < 1e-12);
    check(
        "zero variance is degenerate",
        matches!(welch_t_test(&[0.0; 4], &[1.0; 4]), Err(CoreError::Degenerate(_)))
            && matches!(cohens_d(&[0.0; 4], &[1.0; 4]), Err(CoreError::Degenerate(_))),
    );
    let x: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64]).collect();
    let y: Vec<f64> = (0..6).map(|i| 2.0 + 3.0 * i as f64).collect();
    let fit = ols_fit(&x, &y).unwrap();
    check("exact line", rel(fit.coefficients[0], 2.0) < 1e-12 && rel(fit.coefficients[1], 3.0) < 1e-12);
    let ys = [1.0, 4.0, 2.0, 7.0, 6.0];
    let fit = ols_fit(&vec![vec![1.0]; 5], &ys).unwrap();
    check(
        "intercept only",
        rel(fit.coefficients[0], 4.0) < 1e-12 && rel(fit.std_errors[0], (6.5f64 / 5.0).sqrt()) < 1e-12,
    );
    let collinear: Vec<Vec<f64>> = (0..5).map(|i| vec![1.0, i as f64, 2.0 * i as f64]).collect();
    check("rank deficient", matches!(ols_fit(&collinear, &ys), Err(CoreError::RankDeficient)));

    let summary = format!(
        "{CASES} random cases each for welch, cohen and ols within {TOL:e} of exact references (worst {worst:.1e}); {analytic} analytic cases"
    );
    if errors.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; failures: {}", errors.join(", ")))
    }
}
