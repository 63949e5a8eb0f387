//! Exact O(N²) t-SNE for 2-D inspection of embeddings.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TsneError {
    #[error("perplexity {perplexity} must lie in (1, {n})")]
    PerplexityTooLarge { perplexity: f64, n: usize },
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("all pairwise distances are zero")]
    DegenerateDistances,
    #[error("rows have inconsistent dimensions")]
    DimMismatch,
    #[error("non-finite gradient at iteration {0}")]
    NonFiniteGradient(usize),
    #[error("invalid t-SNE config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = TsneError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(TsneError::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TsneError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(self.perplexity > 1.0) {
            return Err(TsneError::InvalidConfig("perplexity must be > 1".into()));
        }
        Ok(())
    }
}

/// Symmetric joint probabilities `p_ij`, stored dense row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    n: usize,
    p: Vec<f64>,
}

impl AffinityMatrix {
    /// Wraps a dense matrix; rejects asymmetry, a non-zero diagonal,
    /// negative entries or a total differing from 1 by more than 1e-9.
    pub fn from_dense(n: usize, p: Vec<f64>) -> Option<Self> {
        if p.len() != n * n {
            return None;
        }
        let m = Self { n, p };
        m.is_valid().then_some(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn is_valid(&self) -> bool {
        let n = self.n;
        let mut total = 0.0;
        for i in 0..n {
            if self.get(i, i) != 0.0 {
                return false;
            }
            for j in 0..n {
                let v = self.get(i, j);
                if !(v >= 0.0) || v != self.get(j, i) {
                    return false;
                }
                total += v;
            }
        }
        (total - 1.0).abs() <= 1e-9
    }
}

/// Row-conditional Gaussian affinities `p_{j|i}`.
#[derive(Clone, Debug)]
pub struct ConditionalAffinities {
    pub n: usize,
    /// Row-major, zero diagonal, rows sum to one.
    pub rows: Vec<f64>,
    /// Precision `β_i = 1 / (2σ_i²)` per row.
    pub betas: Vec<f64>,
}

impl ConditionalAffinities {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.n..(i + 1) * self.n]
    }
}

/// `2^H` of a discrete distribution, with `H` in bits.
pub fn perplexity_of(row: &[f64]) -> f64 {
    let h: f64 = row
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum();
    h.exp2()
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    (0..n * n)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / n, k % n);
            x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum()
        })
        .collect()
}

/// Gaussian row for precision `beta`, with distances shifted by their
/// minimum for stability. Returns the row and its entropy in nats.
fn gaussian_row(d: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let d_min = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut row: Vec<f64> = d
        .iter()
        .enumerate()
        .map(|(j, &v)| if j == i { 0.0 } else { (-beta * (v - d_min)).exp() })
        .collect();
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= total);
    let h = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    (row, h)
}

/// Per-row bandwidth search so that each row's perplexity matches the target.
///
/// Bisection on `β` (at most 100 steps) stops once the achieved perplexity is
/// within 1e-5 of `perplexity`.
pub fn conditional_affinities(x: &[Vec<f64>], perplexity: f64) -> Result<ConditionalAffinities> {
    let n = x.len();
    if n < 3 {
        return Err(TsneError::TooFewPoints(n));
    }
    if !(perplexity > 1.0 && perplexity < n as f64) {
        return Err(TsneError::PerplexityTooLarge { perplexity, n });
    }
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim) {
        return Err(TsneError::DimMismatch);
    }
    let d = squared_distances(x);
    if d.iter().all(|&v| v == 0.0) {
        return Err(TsneError::DegenerateDistances);
    }
    let target = perplexity.ln();
    let results: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let di = &d[i * n..(i + 1) * n];
            let mut beta = 1.0;
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            let (mut row, mut h) = gaussian_row(di, i, beta);
            for _ in 0..100 {
                if (h.exp() - perplexity).abs() <= 1e-5 {
                    break;
                }
                if h > target {
                    lo = beta;
                    beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
                (row, h) = gaussian_row(di, i, beta);
            }
            (row, beta)
        })
        .collect();
    let mut rows = Vec::with_capacity(n * n);
    let mut betas = Vec::with_capacity(n);
    for (r, b) in results {
        rows.extend(r);
        betas.push(b);
    }
    Ok(ConditionalAffinities { n, rows, betas })
}

/// `p_ij = (p_{j|i} + p_{i|j}) / 2N`.
pub fn symmetrize(c: &ConditionalAffinities) -> AffinityMatrix {
    let n = c.n;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (c.rows[i * n + j] + c.rows[j * n + i]) / (2 * n) as f64;
        }
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    AffinityMatrix { n, p }
}

pub fn compute_affinities(x: &[Vec<f64>], perplexity: f64) -> Result<AffinityMatrix> {
    Ok(symmetrize(&conditional_affinities(x, perplexity)?))
}

/// Student-t joint probabilities `q_ij` and the unnormalised kernel
/// `(1 + ‖y_i − y_j‖²)^{-1}`.
pub fn student_t_q(layout: &[[f64; 2]]) -> (Vec<f64>, Vec<f64>) {
    let n = layout.len();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let dx = layout[i][0] - layout[j][0];
                let dy = layout[i][1] - layout[j][1];
                w[i * n + j] = 1.0 / (1.0 + dx * dx + dy * dy);
            }
        }
    }
    let z: f64 = w.iter().sum();
    let q = w.iter().map(|v| v / z).collect();
    (q, w)
}

/// `KL(P‖Q) = Σ p_ij ln(p_ij / q_ij)`.
pub fn kl_divergence(p: &AffinityMatrix, layout: &[[f64; 2]]) -> f64 {
    let (q, _) = student_t_q(layout);
    p.p.iter()
        .zip(&q)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &qij)| pij * (pij / qij.max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// `∂KL/∂y_i = 4 Σ_j (αp_ij − q_ij)(1 + ‖y_i − y_j‖²)^{-1}(y_i − y_j)`, where
/// `α` is the exaggeration factor (1 for the true gradient).
pub fn kl_gradient(p: &AffinityMatrix, layout: &[[f64; 2]], exaggeration: f64) -> Vec<[f64; 2]> {
    let n = layout.len();
    let (q, w) = student_t_q(layout);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = [0.0; 2];
            for j in 0..n {
                let k = i * n + j;
                let m = (exaggeration * p.p[k] - q[k]) * w[k];
                g[0] += m * (layout[i][0] - layout[j][0]);
                g[1] += m * (layout[i][1] - layout[j][1]);
            }
            [4.0 * g[0], 4.0 * g[1]]
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TsneResult {
    pub layout: Vec<[f64; 2]>,
    /// `KL(P‖Q)` before the first step, then after every iteration.
    pub kl_log: Vec<f64>,
}

/// Gradient descent with momentum, per-coordinate gains and early
/// exaggeration, from a seeded N(0, 1e-4²) start.
pub fn run_tsne(p: &AffinityMatrix, config: &TsneConfig) -> Result<TsneResult> {
    config.validate()?;
    let n = p.n;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1e-4).unwrap();
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_log = Vec::with_capacity(config.iterations + 1);
    kl_log.push(kl_divergence(p, &y));
    for it in 0..config.iterations {
        let exaggeration = if it < config.exaggeration_iterations {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if it < config.momentum_switch {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        let grad = kl_gradient(p, &y, exaggeration);
        if grad.iter().flatten().any(|g| !g.is_finite()) {
            return Err(TsneError::NonFiniteGradient(it));
        }
        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grad[i][d] > 0.0) == (velocity[i][d] > 0.0);
                gains[i][d] = if same_sign { gains[i][d] * 0.8 } else { gains[i][d] + 0.2 };
                gains[i][d] = gains[i][d].max(0.01);
                velocity[i][d] = momentum * velocity[i][d] - config.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += velocity[i][d];
            }
        }
        let mean = y.iter().fold([0.0; 2], |acc, v| [acc[0] + v[0], acc[1] + v[1]]);
        let mean = [mean[0] / n as f64, mean[1] / n as f64];
        y.iter_mut().for_each(|v| {
            v[0] -= mean[0];
            v[1] -= mean[1];
        });
        kl_log.push(kl_divergence(p, &y));
    }
    Ok(TsneResult { layout: y, kl_log })
}

/// Colours for the four tissue classes: normal red, benign green, in-situ
/// purple, invasive blue.
pub const CLASS_COLORS: [&str; 4] = ["#d62728", "#2ca02c", "#9467bd", "#1f77b4"];

/// Plot data as CSV `id,x,y,label`.
pub fn layout_csv(ids: &[String], layout: &[[f64; 2]], labels: &[String]) -> String {
    let mut out = String::from("id,x,y,label\n");
    for ((id, p), l) in ids.iter().zip(layout).zip(labels) {
        let _ = writeln!(out, "{id},{:.6},{:.6},{l}", p[0], p[1]);
    }
    out
}

/// Self-contained SVG scatter; `classes[i]` indexes [`CLASS_COLORS`] and
/// `class_names` labels the legend.
pub fn layout_svg(layout: &[[f64; 2]], classes: &[usize], class_names: &[&str], title: &str) -> String {
    let (size, margin) = (480.0, 30.0);
    let (mut min, mut max) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in layout {
        for d in 0..2 {
            min[d] = min[d].min(p[d]);
            max[d] = max[d].max(p[d]);
        }
    }
    let span = |d: usize| (max[d] - min[d]).max(1e-12);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = size + 140.0,
        h = size
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{margin}" y="18" font-family="sans-serif" font-size="13">{title}</text>"#
    );
    for (p, &c) in layout.iter().zip(classes) {
        let x = margin + (p[0] - min[0]) / span(0) * (size - 2.0 * margin);
        let y = size - margin - (p[1] - min[1]) / span(1) * (size - 2.0 * margin);
        let color = CLASS_COLORS[c % CLASS_COLORS.len()];
        let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}" fill-opacity="0.75"/>"#);
    }
    for (k, name) in class_names.iter().enumerate() {
        let y = 40.0 + 18.0 * k as f64;
        let color = CLASS_COLORS[k % CLASS_COLORS.len()];
        let _ = writeln!(out, r#"<circle cx="{:.0}" cy="{y}" r="5" fill="{color}"/>"#, size + 10.0);
        let _ = writeln!(
            out,
            r#"<text x="{:.0}" y="{:.0}" font-family="sans-serif" font-size="12">{name}</text>"#,
            size + 22.0,
            y + 4.0
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn write_layout(
    csv_path: &Path,
    svg_path: Option<&Path>,
    ids: &[String],
    layout: &[[f64; 2]],
    classes: &[usize],
    class_names: &[&str],
    title: &str,
) -> Result<()> {
    let labels: Vec<String> = classes
        .iter()
        .map(|&c| class_names.get(c).copied().unwrap_or("?").to_string())
        .collect();
    std::fs::write(csv_path, layout_csv(ids, layout, &labels))?;
    if let Some(svg) = svg_path {
        std::fs::write(svg, layout_svg(layout, classes, class_names, title))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn regular_simplex_gives_uniform_rows() {
        let x: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        let c = conditional_affinities(&x, 2.0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 0.0 } else { 1.0 / 3.0 };
                assert!((c.row(i)[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_perplexity_is_support_size() {
        for k in [1usize, 2, 5, 17] {
            let row = vec![1.0 / k as f64; k];
            assert!((perplexity_of(&row) - k as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn affinity_errors() {
        let x = random_points(5, 2, 1);
        assert!(matches!(compute_affinities(&x, 5.0), Err(TsneError::PerplexityTooLarge { .. })));
        assert!(matches!(compute_affinities(&x[..2], 1.5), Err(TsneError::TooFewPoints(2))));
        let same = vec![vec![1.0, 2.0]; 4];
        assert!(matches!(compute_affinities(&same, 2.0), Err(TsneError::DegenerateDistances)));
    }

    #[test]
    fn gradient_vanishes_when_q_equals_p() {
        let layout = [[0.0, 0.0], [1.0, 0.5], [-0.3, 2.0], [0.7, -1.1]];
        let (q, _) = student_t_q(&layout);
        let p = AffinityMatrix::from_dense(4, q).unwrap();
        for g in kl_gradient(&p, &layout, 1.0) {
            assert!(g[0].abs() < 1e-15 && g[1].abs() < 1e-15, "{g:?}");
        }
        assert!(kl_divergence(&p, &layout).abs() < 1e-15);
    }

    #[test]
    fn kl_is_translation_invariant_and_nonnegative() {
        let p = compute_affinities(&random_points(6, 3, 4), 3.0).unwrap();
        let layout = [[0.0, 1.0], [2.0, 0.5], [-1.0, -1.0], [0.3, 0.3], [1.5, -2.0], [-2.0, 2.0]];
        let shifted: Vec<[f64; 2]> = layout.iter().map(|v| [v[0] + 7.5, v[1] - 3.25]).collect();
        let (a, b) = (kl_divergence(&p, &layout), kl_divergence(&p, &shifted));
        assert!(a > 0.0);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn runs_are_deterministic() {
        let p = compute_affinities(&random_points(12, 4, 9), 4.0).unwrap();
        let cfg = TsneConfig { iterations: 60, seed: 3, ..Default::default() };
        let a = run_tsne(&p, &cfg).unwrap();
        let b = run_tsne(&p, &cfg).unwrap();
        assert_eq!(a.layout, b.layout);
        assert_eq!(a.kl_log.len(), 61);
    }

    #[test]
    fn csv_and_svg_output() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let csv = layout_csv(&ids, &[[0.5, 1.0], [-1.0, 2.0]], &["normal".into(), "invasive".into()]);
        assert_eq!(csv, "id,x,y,label\na,0.500000,1.000000,normal\nb,-1.000000,2.000000,invasive\n");
        let svg = layout_svg(&[[0.0, 0.0], [1.0, 1.0]], &[0, 3], &["normal", "benign", "in-situ", "invasive"], "t");
        assert!(svg.contains(CLASS_COLORS[3]) && svg.ends_with("</svg>\n"));
    }
}
