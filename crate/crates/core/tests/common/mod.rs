//! Exhaustive-loop reference implementations shared by the test targets.

#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1.0)
}

pub fn w_of(x: &DMatrix<f64>, y: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * y[i])
}

pub fn row_dot(w: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    (0..w.ncols()).map(|j| w[(a, j)] * w[(b, j)]).sum()
}

pub fn brute_beta_sq(w: &DMatrix<f64>, j: usize) -> f64 {
    let n = w.nrows();
    let mut s = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a != b {
                s += w[(a, j)] * w[(b, j)];
            }
        }
    }
    s / (n * (n - 1)) as f64
}

pub fn brute_psi(x: &DMatrix<f64>, w: &DMatrix<f64>, j: usize, k: usize) -> f64 {
    let n = w.nrows();
    let e = if j == k { 1.0 } else { 0.0 };
    let mut s = 0.0;
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                if a != b && b != c && a != c {
                    s += w[(a, j)] * w[(b, k)] * (x[(c, j)] * x[(c, k)] - e);
                }
            }
        }
    }
    s / (n * (n - 1) * (n - 2)) as f64
}

pub fn brute_g(x: &DMatrix<f64>, s: &[usize]) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| {
            let mut v = 0.0;
            for (a, &j) in s.iter().enumerate() {
                for &k in &s[a + 1..] {
                    v += x[(i, j)] * x[(i, k)];
                }
            }
            v
        })
        .collect()
}

pub fn brute_cross(w: &DMatrix<f64>, g: &[f64]) -> f64 {
    let n = w.nrows();
    let mut s = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a != b {
                s += row_dot(w, a, b) * g[b];
            }
        }
    }
    2.0 * s / (n * (n - 1)) as f64
}

pub fn brute_components(w: &DMatrix<f64>) -> (f64, f64) {
    let n = w.nrows();
    let (mut bab, mut frob) = (0.0, 0.0);
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let ab = row_dot(w, a, b);
            frob += ab * ab;
            for c in 0..n {
                if c != a && c != b {
                    bab += ab * row_dot(w, b, c);
                }
            }
        }
    }
    let nf = n as f64;
    (bab / (nf * (nf - 1.0) * (nf - 2.0)), frob / (nf * (nf - 1.0)))
}
