//! Direct-summation reference implementations, written with plain loops over
//! `Vec<Vec<f64>>` and sharing no code with the library.

#![allow(dead_code)]

use mixco_core::numerics::{l2_normalize_rows, SeededRng, Tensor};

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    let mut s = 0.0;
    for &x in xs {
        s += (x - m).exp();
    }
    m + s.ln()
}

/// Mean over queries of `−log softmax(pos ‖ negs)[0]`.
pub fn infonce(queries: &Rows, keys: &Rows, queue: &Rows, tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..queries.len() {
        let mut logits = vec![dot(&queries[i], &keys[i]) / tau];
        for n in queue {
            logits.push(dot(&queries[i], n) / tau);
        }
        total += log_sum_exp(&logits) - logits[0];
    }
    total / queries.len() as f64
}

/// In-batch variant: row `i` of `v` against every row of `vp`, positive on
/// the diagonal.
pub fn in_batch(v: &Rows, vp: &Rows, tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..v.len() {
        let logits: Vec<f64> = vp.iter().map(|k| dot(&v[i], k) / tau).collect();
        total += log_sum_exp(&logits) - logits[i];
    }
    total / v.len() as f64
}

/// Soft cross-entropy of mixed queries against `[keys ‖ queue]`, with weight
/// `λ_i` on key `i` and `1 − λ_i` on key `i + B/2`.
pub fn mixco(v_mix: &Rows, keys: &Rows, queue: &Rows, lambdas: &[f64], tau_mix: f64) -> f64 {
    let b = keys.len();
    let half = b / 2;
    let mut total = 0.0;
    for i in 0..v_mix.len() {
        let mut logits = Vec::new();
        for k in keys.iter().chain(queue.iter()) {
            logits.push(dot(&v_mix[i], k) / tau_mix);
        }
        let lse = log_sum_exp(&logits);
        total -= lambdas[i] * (logits[i] - lse);
        total -= (1.0 - lambdas[i]) * (logits[i + half] - lse);
    }
    total / v_mix.len() as f64
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

fn centroids(x: &Rows, labels: &[usize], k: usize) -> (Rows, Vec<usize>) {
    let d = x[0].len();
    let mut c = vec![vec![0.0; d]; k];
    let mut n = vec![0usize; k];
    for (row, &l) in x.iter().zip(labels) {
        n[l] += 1;
        for j in 0..d {
            c[l][j] += row[j];
        }
    }
    for l in 0..k {
        for j in 0..d {
            c[l][j] /= n[l] as f64;
        }
    }
    (c, n)
}

/// Labels must be `0..k` with every class present.
pub fn davies_bouldin(x: &Rows, labels: &[usize], k: usize) -> f64 {
    let (c, n) = centroids(x, labels, k);
    let mut s = vec![0.0; k];
    for (row, &l) in x.iter().zip(labels) {
        s[l] += dist(row, &c[l]);
    }
    for l in 0..k {
        s[l] /= n[l] as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0;
        for j in 0..k {
            if i != j {
                let r = (s[i] + s[j]) / dist(&c[i], &c[j]);
                if r > worst {
                    worst = r;
                }
            }
        }
        total += worst;
    }
    total / k as f64
}

pub fn calinski_harabasz(x: &Rows, labels: &[usize], k: usize) -> f64 {
    let (c, n) = centroids(x, labels, k);
    let d = x[0].len();
    let mut mean = vec![0.0; d];
    for row in x {
        for j in 0..d {
            mean[j] += row[j] / x.len() as f64;
        }
    }
    let mut between = 0.0;
    for l in 0..k {
        between += n[l] as f64 * dist(&c[l], &mean).powi(2);
    }
    let mut within = 0.0;
    for (row, &l) in x.iter().zip(labels) {
        within += dist(row, &c[l]).powi(2);
    }
    (between / (k - 1) as f64) / (within / (x.len() - k) as f64)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    l2_normalize_rows(&random_matrix(rows, cols, rng), 1e-12).unwrap().output
}
