//! Soft-margin kernel SVM trained in the dual by sequential minimal
//! optimisation, a one-vs-rest wrapper for the four tissue classes, and
//! majority voting over patch predictions.
//!
//! The solver minimises `½ αᵀQα − eᵀα` with `Q_ij = y_i y_j K(x_i, x_j)`
//! subject to `0 ≤ α_i ≤ C` and `Σ α_i y_i = 0`. Each iteration picks the
//! maximal-violating pair with second-order working-set selection and solves
//! the two-variable subproblem in closed form. It stops once the KKT gap
//! `m(α) − M(α)` drops below the tolerance.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("training data needs at least one example of each class")]
    SingleClassInput,
    #[error("feature dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("non-finite training input")]
    NonFinite,
    #[error("labels must be +1 or -1 and match the number of rows")]
    BadLabels,
    #[error("invalid SVM config: {0}")]
    InvalidConfig(String),
    #[error("no convergence within {iterations} iterations (KKT gap {gap:.3e})")]
    NoConvergence { iterations: usize, gap: f64 },
    #[error("empty vote list")]
    EmptyList,
    #[error("bad model file: {0}")]
    BadModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = SvmError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Linear,
    Rbf { gamma: f64 },
}

impl KernelSpec {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            KernelSpec::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Rbf { gamma } if !(gamma > 0.0 && gamma.is_finite()) => {
                Err(SvmError::InvalidConfig(format!("RBF gamma must be > 0, got {gamma}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub c: f64,
    pub kernel: KernelSpec,
    /// Stop once the KKT gap is below this.
    pub tolerance: f64,
    /// Iteration budget, in units of `n` pair updates.
    pub max_passes: usize,
}

impl SvmConfig {
    /// RBF, C = 10, γ = 0.001 (patch-level classifier).
    pub fn patch_level() -> Self {
        Self {
            c: 10.0,
            kernel: KernelSpec::Rbf { gamma: 0.001 },
            tolerance: 1e-3,
            max_passes: 1000,
        }
    }

    /// Linear, C = 10 (slice-level classifier).
    pub fn slice_level() -> Self {
        Self {
            kernel: KernelSpec::Linear,
            ..Self::patch_level()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(SvmError::InvalidConfig(format!("C must be > 0, got {}", self.c)));
        }
        if !(self.tolerance > 0.0) {
            return Err(SvmError::InvalidConfig("tolerance must be > 0".into()));
        }
        if self.max_passes == 0 {
            return Err(SvmError::InvalidConfig("max_passes must be >= 1".into()));
        }
        self.kernel.validate()
    }
}

/// A trained binary classifier. Only support vectors (α > 0) are kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub kernel: KernelSpec,
    pub c: f64,
    pub dim: usize,
    pub support_vectors: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    /// `α_i · y_i`, aligned with `support_vectors`.
    pub coefficients: Vec<f64>,
    pub bias: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Final `m(α) − M(α)`.
    pub kkt_gap: f64,
}

impl SvmModel {
    /// `f(x) = Σ α_i y_i K(x_i, x) + b`.
    pub fn decision_value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(SvmError::DimMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(self
            .support_vectors
            .iter()
            .zip(&self.coefficients)
            .map(|(sv, &c)| c * self.kernel.eval(sv, x))
            .sum::<f64>()
            + self.bias)
    }

    /// Dual objective `Σα − ½ ΣΣ α_i α_j y_i y_j K_ij` (the maximisation form).
    pub fn dual_objective(&self) -> f64 {
        let mut quad = 0.0;
        for (i, a) in self.support_vectors.iter().enumerate() {
            for (j, b) in self.support_vectors.iter().enumerate() {
                quad += self.coefficients[i] * self.coefficients[j] * self.kernel.eval(a, b);
            }
        }
        self.alphas.iter().sum::<f64>() - 0.5 * quad
    }

    /// `Σ α_i y_i`, zero at any feasible point.
    pub fn equality_residual(&self) -> f64 {
        self.coefficients.iter().sum()
    }

    pub fn support_count(&self) -> usize {
        self.alphas.len()
    }
}

const TAU: f64 = 1e-12;

/// Trains a binary soft-margin SVM on rows `x` with labels `y ∈ {+1, -1}`.
///
/// Running out of iterations is not an error: the best iterate comes back
/// with `converged == false`.
pub fn train_binary_svm(x: &[Vec<f64>], y: &[f64], config: &SvmConfig) -> Result<SvmModel> {
    config.validate()?;
    let n = x.len();
    if y.len() != n || y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(SvmError::BadLabels);
    }
    if !y.contains(&1.0) || !y.contains(&-1.0) {
        return Err(SvmError::SingleClassInput);
    }
    let dim = x[0].len();
    for r in x {
        if r.len() != dim {
            return Err(SvmError::DimMismatch {
                expected: dim,
                actual: r.len(),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(SvmError::NonFinite);
        }
    }

    let kernel = config.kernel;
    let gram: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|k| kernel.eval(&x[k / n], &x[k % n]))
        .collect();
    let k = |i: usize, j: usize| gram[i * n + j];
    let c = config.c;

    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let max_iter = config.max_passes.saturating_mul(n.max(1));
    let mut iterations = 0;
    let mut gap;
    let is_upper = |a: f64| a >= c;
    let is_lower = |a: f64| a <= 0.0;

    loop {
        // i: maximal violator in I_up.
        let mut g_max = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for t in 0..n {
            let in_up = if y[t] > 0.0 { !is_upper(alpha[t]) } else { !is_lower(alpha[t]) };
            if in_up && -y[t] * grad[t] >= g_max {
                g_max = -y[t] * grad[t];
                i_sel = t;
            }
        }
        // j: second-order choice in I_low; also tracks M(α).
        let mut g_max2 = f64::NEG_INFINITY;
        let mut j_sel = usize::MAX;
        let mut best_obj = f64::INFINITY;
        for t in 0..n {
            let in_low = if y[t] > 0.0 { !is_lower(alpha[t]) } else { !is_upper(alpha[t]) };
            if !in_low {
                continue;
            }
            let v = y[t] * grad[t];
            g_max2 = g_max2.max(v);
            let diff = g_max + v;
            if i_sel != usize::MAX && diff > 0.0 {
                let mut quad = k(i_sel, i_sel) + k(t, t) - 2.0 * k(i_sel, t);
                if quad <= 0.0 {
                    quad = TAU;
                }
                let obj = -(diff * diff) / quad;
                if obj <= best_obj {
                    best_obj = obj;
                    j_sel = t;
                }
            }
        }
        gap = g_max + g_max2;
        if gap < config.tolerance || i_sel == usize::MAX || j_sel == usize::MAX {
            break;
        }
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let (i, j) = (i_sel, j_sel);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let q_ij = y[i] * y[j] * k(i, j);
        if y[i] != y[j] {
            let quad = (k(i, i) + k(j, j) + 2.0 * q_ij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (k(i, i) + k(j, j) - 2.0 * q_ij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k(i, t) * di + y[j] * k(j, t) * dj);
        }
    }

    // Bias from the free vectors, or the midpoint of the feasible interval.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut free_sum) = (0usize, 0.0);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if is_upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if is_lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    let rho = if free > 0 { free_sum / free as f64 } else { (ub + lb) / 2.0 };

    let mut model = SvmModel {
        kernel,
        c,
        dim,
        support_vectors: Vec::new(),
        alphas: Vec::new(),
        coefficients: Vec::new(),
        bias: -rho,
        converged: gap < config.tolerance,
        iterations,
        kkt_gap: gap.max(0.0),
    };
    for t in 0..n {
        if alpha[t] > 0.0 {
            model.support_vectors.push(x[t].clone());
            model.alphas.push(alpha[t]);
            model.coefficients.push(alpha[t] * y[t]);
        }
    }
    Ok(model)
}

/// One-vs-rest ensemble over integer class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MulticlassModel {
    /// Sorted ascending; `models[k]` separates `classes[k]` from the rest.
    pub classes: Vec<usize>,
    pub models: Vec<SvmModel>,
}

impl MulticlassModel {
    pub fn decision_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.models.iter().map(|m| m.decision_value(x)).collect()
    }

    /// `(class, winning decision value)`; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, f64)> {
        let values = self.decision_values(x)?;
        let mut best = 0;
        for (k, &v) in values.iter().enumerate() {
            if v > values[best] {
                best = k;
            }
        }
        Ok((self.classes[best], values[best]))
    }

    pub fn converged(&self) -> bool {
        self.models.iter().all(|m| m.converged)
    }
}

pub fn train_multiclass(x: &[Vec<f64>], labels: &[usize], config: &SvmConfig) -> Result<MulticlassModel> {
    if labels.len() != x.len() {
        return Err(SvmError::BadLabels);
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(SvmError::SingleClassInput);
    }
    let models = classes
        .par_iter()
        .map(|&cls| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == cls { 1.0 } else { -1.0 }).collect();
            train_binary_svm(x, &y, config)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MulticlassModel { classes, models })
}

/// A single patch's vote for its slice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchVote {
    pub class: usize,
    /// Decision value of the predicted class.
    pub score: f64,
}

/// Modal class; ties go to the highest mean score among the tied classes,
/// then to the lowest class index.
pub fn majority_vote(votes: &[PatchVote]) -> Result<usize> {
    if votes.is_empty() {
        return Err(SvmError::EmptyList);
    }
    let mut tally: Vec<(usize, usize, f64)> = Vec::new();
    for v in votes {
        match tally.iter_mut().find(|t| t.0 == v.class) {
            Some(t) => {
                t.1 += 1;
                t.2 += v.score;
            }
            None => tally.push((v.class, 1, v.score)),
        }
    }
    tally.sort_by_key(|t| t.0);
    let mut best = tally[0];
    for &t in &tally[1..] {
        let (mean_t, mean_b) = (t.2 / t.1 as f64, best.2 / best.1 as f64);
        if t.1 > best.1 || (t.1 == best.1 && mean_t > mean_b) {
            best = t;
        }
    }
    Ok(best.0)
}

// ---------------------------------------------------------------------------
// Model files

const MODEL_MAGIC: &[u8; 4] = b"DSVM";
const MODEL_VERSION: u32 = 1;

pub fn encode_model(model: &MulticlassModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.classes.len() as u32).to_le_bytes());
    for &c in &model.classes {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    for m in &model.models {
        let (kind, gamma) = match m.kernel {
            KernelSpec::Linear => (0u8, 0.0),
            KernelSpec::Rbf { gamma } => (1u8, gamma),
        };
        out.push(kind);
        out.extend_from_slice(&gamma.to_le_bytes());
        out.extend_from_slice(&m.c.to_le_bytes());
        out.extend_from_slice(&m.bias.to_le_bytes());
        out.push(m.converged as u8);
        out.extend_from_slice(&(m.iterations as u64).to_le_bytes());
        out.extend_from_slice(&m.kkt_gap.to_le_bytes());
        out.extend_from_slice(&(m.dim as u32).to_le_bytes());
        out.extend_from_slice(&(m.support_count() as u32).to_le_bytes());
        for (k, sv) in m.support_vectors.iter().enumerate() {
            out.extend_from_slice(&m.alphas[k].to_le_bytes());
            out.extend_from_slice(&m.coefficients[k].to_le_bytes());
            for v in sv {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<MulticlassModel> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| SvmError::BadModelFile("truncated".into()))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != MODEL_MAGIC {
        return Err(SvmError::BadModelFile("bad magic".into()));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let f64_of = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());
    let version = u32_of(take(4)?);
    if version != MODEL_VERSION {
        return Err(SvmError::BadModelFile(format!("unsupported version {version}")));
    }
    let n_classes = u32_of(take(4)?) as usize;
    let classes = (0..n_classes)
        .map(|_| Ok(u32_of(take(4)?) as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut models = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let kind = take(1)?[0];
        let gamma = f64_of(take(8)?);
        let kernel = match kind {
            0 => KernelSpec::Linear,
            1 => KernelSpec::Rbf { gamma },
            k => return Err(SvmError::BadModelFile(format!("unknown kernel tag {k}"))),
        };
        let c = f64_of(take(8)?);
        let bias = f64_of(take(8)?);
        let converged = take(1)?[0] != 0;
        let iterations = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let kkt_gap = f64_of(take(8)?);
        let dim = u32_of(take(4)?) as usize;
        let nsv = u32_of(take(4)?) as usize;
        let mut m = SvmModel {
            kernel,
            c,
            dim,
            support_vectors: Vec::with_capacity(nsv.min(1 << 16)),
            alphas: Vec::new(),
            coefficients: Vec::new(),
            bias,
            converged,
            iterations,
            kkt_gap,
        };
        for _ in 0..nsv {
            m.alphas.push(f64_of(take(8)?));
            m.coefficients.push(f64_of(take(8)?));
            let sv = (0..dim).map(|_| Ok(f64_of(take(8)?))).collect::<Result<Vec<_>>>()?;
            m.support_vectors.push(sv);
        }
        models.push(m);
    }
    if pos != bytes.len() {
        return Err(SvmError::BadModelFile("trailing bytes".into()));
    }
    Ok(MulticlassModel { classes, models })
}

#[derive(Serialize)]
struct ModelSummary<'a> {
    version: u32,
    classes: &'a [usize],
    support_counts: Vec<usize>,
    converged: Vec<bool>,
    iterations: Vec<usize>,
    kkt_gaps: Vec<f64>,
    config: &'a SvmConfig,
}

/// Writes the binary model to `path` and a JSON summary next to it (`path.json`).
pub fn save_model(path: &Path, model: &MulticlassModel, config: &SvmConfig) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_model(model))?;
    let summary = ModelSummary {
        version: MODEL_VERSION,
        classes: &model.classes,
        support_counts: model.models.iter().map(SvmModel::support_count).collect(),
        converged: model.models.iter().map(|m| m.converged).collect(),
        iterations: model.models.iter().map(|m| m.iterations).collect(),
        kkt_gaps: model.models.iter().map(|m| m.kkt_gap).collect(),
        config,
    };
    let mut json_path = path.as_os_str().to_owned();
    json_path.push(".json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
    std::fs::write(json_path, text + "\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MulticlassModel> {
    decode_model(&std::fs::read(path)?)
}
