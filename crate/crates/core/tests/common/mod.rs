//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use dupless::classify::KernelSpec;

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let up = f(&p);
    p[i] -= 2.0 * h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Relative error with an absolute floor so near-zero gradients compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn kernel(k: &KernelSpec, a: &[f64], b: &[f64]) -> f64 {
    match *k {
        KernelSpec::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        KernelSpec::Rbf { gamma } => {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
            (-gamma * d2).exp()
        }
    }
}

/// Euclidean projection onto `{0 ≤ α ≤ C, yᵀα = 0}` by bisection on the
/// multiplier of the equality constraint.
fn project(v: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let at = |lam: f64| -> Vec<f64> { v.iter().zip(y).map(|(&vi, &yi)| (vi - lam * yi).clamp(0.0, c)).collect() };
    let g = |a: &[f64]| a.iter().zip(y).map(|(a, y)| a * y).sum::<f64>();
    let bound = v.iter().fold(0.0f64, |m, x| m.max(x.abs())) + c + 1.0;
    let (mut lo, mut hi) = (-bound, bound);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(&at(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

/// Maximises the soft-margin dual `Σα − ½ αᵀQα` with accelerated projected
/// gradient ascent. Returns `(α, objective)`.
pub fn dual_oracle(x: &[Vec<f64>], y: &[f64], c: f64, k: &KernelSpec, iterations: usize) -> (Vec<f64>, f64) {
    let n = x.len();
    let q: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| y[i] * y[j] * kernel(k, &x[i], &x[j])).collect())
        .collect();
    let lip = q
        .iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(1e-12, f64::max);
    let step = 1.0 / lip;
    let objective = |a: &[f64]| {
        let quad: f64 = (0..n).map(|i| (0..n).map(|j| a[i] * q[i][j] * a[j]).sum::<f64>()).sum();
        a.iter().sum::<f64>() - 0.5 * quad
    };
    let mut a = vec![0.0; n];
    let mut z = a.clone();
    let mut t = 1.0f64;
    for _ in 0..iterations {
        let grad: Vec<f64> = (0..n).map(|i| 1.0 - (0..n).map(|j| q[i][j] * z[j]).sum::<f64>()).collect();
        let v: Vec<f64> = z.iter().zip(&grad).map(|(z, g)| z + step * g).collect();
        let next = project(&v, y, c);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        z = next
            .iter()
            .zip(&a)
            .map(|(n, o)| n + (t - 1.0) / t_next * (n - o))
            .collect();
        // Restart momentum when it stops helping.
        if objective(&next) < objective(&a) {
            z = next.clone();
            t = 1.0;
        } else {
            t = t_next;
        }
        a = next;
    }
    let obj = objective(&a);
    (a, obj)
}

/// `2^H` of a probability row, with `0 log 0 = 0`.
pub fn perplexity(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    2f64.powf(h)
}

/// `KL(P‖Q)` for a 2-D layout, from scratch.
pub fn kl_oracle(p: &[f64], n: usize, y: &[[f64; 2]]) -> f64 {
    let mut w = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d2 = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                w[i * n + j] = 1.0 / (1.0 + d2);
                z += w[i * n + j];
            }
        }
    }
    let mut kl = 0.0;
    for k in 0..n * n {
        if p[k] > 0.0 {
            kl += p[k] * (p[k] / (w[k] / z)).ln();
        }
    }
    kl
}
