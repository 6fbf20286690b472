#![allow(dead_code)]

use basiscluster::diffcore::{NdArray, SeededRng};

/// Adaptive Simpson on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            return left + right + diff / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// `ln ∫_0^1 x^(a-1) (1-x)^(b-1) dx`. Each half is mapped through
/// `x = u^(1/a)` (resp. `1 - x = u^(1/b)`) so the endpoint singularities
/// disappear before adaptive Simpson runs.
pub fn log_beta_adaptive(a: f64, b: f64) -> f64 {
    let half = |p: f64, q: f64| {
        // ∫_0^{1/2} x^(p-1) (1-x)^(q-1) dx = (1/p) ∫_0^{2^-p} (1 - u^(1/p))^(q-1) du
        let upper = 0.5f64.powf(p);
        let g = move |u: f64| (1.0 - u.powf(1.0 / p)).powf(q - 1.0);
        adaptive_simpson(&g, 0.0, upper, 1e-14 * upper) / p
    };
    (half(a, b) + half(b, a)).ln()
}

pub fn entropy(counts: &[f64]) -> f64 {
    let n: f64 = counts.iter().sum();
    counts.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum()
}

/// V-measure from the contingency table.
pub fn v_measure_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0.0; kp]; kt];
    for (&p, &t) in pred.iter().zip(truth) {
        table[t][p] += 1.0;
    }
    let n = pred.len() as f64;
    let class_counts: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cluster_counts: Vec<f64> = (0..kp).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let (h_c, h_k) = (entropy(&class_counts), entropy(&cluster_counts));
    let h_c_given_k: f64 = (0..kp)
        .map(|c| {
            let col: Vec<f64> = table.iter().map(|r| r[c]).collect();
            cluster_counts[c] / n * entropy(&col)
        })
        .sum();
    let h_k_given_c: f64 = (0..kt).map(|t| class_counts[t] / n * entropy(&table[t])).sum();
    let h = if h_c == 0.0 { 1.0 } else { 1.0 - h_c_given_k / h_c };
    let c = if h_k == 0.0 { 1.0 } else { 1.0 - h_k_given_c / h_k };
    if h + c == 0.0 {
        0.0
    } else {
        2.0 * h * c / (h + c)
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

/// Row-stochastic `[p, k]` matrix from softmaxed normal draws.
pub fn random_phi(rng: &mut SeededRng, p: usize, k: usize, spread: f64) -> NdArray {
    let mut phi = rng.standard_normal(&[p, k]).map(|v| (spread * v).exp());
    for j in 0..p {
        let row = phi.row_mut(j);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    phi
}

pub fn random_labels(rng: &mut SeededRng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes)).collect()
}
