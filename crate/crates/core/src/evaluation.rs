//! Dataset manifests, stratified slice-level splits, sensitivity metrics, and
//! the patch/slice experiment protocol.
//!
//! All splitting happens per slice: the patches of one slice always travel
//! together, so no test slice contributes a patch to training.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{self, MulticlassModel, PatchVote, SvmConfig, SvmError};
use crate::embeddings::{aggregate, Combination, EmbeddingError, EmbeddingTable, Standardizer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("duplicate slice id {0}")]
    DuplicateSlice(String),
    #[error("slice {slice} has {actual} patches, expected {expected}")]
    RaggedPatches {
        slice: String,
        expected: usize,
        actual: usize,
    },
    #[error("unknown tissue label {0:?}")]
    UnknownLabel(String),
    #[error("class {class} has {count} slices, need at least {needed}")]
    TooFewSlices {
        class: TissueClass,
        count: usize,
        needed: usize,
    },
    #[error("truth and prediction lengths differ ({truth} vs {predicted})")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("no embedding for patch {0}")]
    MissingEmbeddings(String),
    #[error("train/test leakage: slice {0} is in both")]
    Leakage(String),
    #[error("invalid split plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TissueClass {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "benign")]
    Benign,
    #[serde(rename = "in-situ")]
    InSitu,
    #[serde(rename = "invasive")]
    Invasive,
}

impl TissueClass {
    pub const COUNT: usize = 4;
    pub const ALL: [TissueClass; 4] = [
        TissueClass::Normal,
        TissueClass::Benign,
        TissueClass::InSitu,
        TissueClass::Invasive,
    ];
    pub const NAMES: [&'static str; 4] = ["normal", "benign", "in-situ", "invasive"];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }
}

impl fmt::Display for TissueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TissueClass {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        Self::NAMES
            .iter()
            .position(|&n| n == s)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| EvalError::UnknownLabel(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub slice_id: String,
    pub label: TissueClass,
    /// Image path, relative to the manifest's directory.
    pub path: String,
    /// Patch ids in global row-major order.
    pub patch_ids: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    slices: Vec<SliceRecord>,
}

impl DatasetManifest {
    pub fn new(slices: Vec<SliceRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &slices {
            if !seen.insert(s.slice_id.as_str()) {
                return Err(EvalError::DuplicateSlice(s.slice_id.clone()));
            }
        }
        if let Some(first) = slices.first() {
            let expected = first.patch_ids.len();
            if let Some(bad) = slices.iter().find(|s| s.patch_ids.len() != expected) {
                return Err(EvalError::RaggedPatches {
                    slice: bad.slice_id.clone(),
                    expected,
                    actual: bad.patch_ids.len(),
                });
            }
        }
        Ok(Self { slices })
    }

    pub fn slices(&self) -> &[SliceRecord] {
        &self.slices
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn patches_per_slice(&self) -> usize {
        self.slices.first().map_or(0, |s| s.patch_ids.len())
    }

    pub fn get(&self, slice_id: &str) -> Option<&SliceRecord> {
        self.slices.iter().find(|s| s.slice_id == slice_id)
    }

    /// Fills every slice's patch list from a `rows × cols` tile grid.
    pub fn with_grid(mut self, rows: usize, cols: usize) -> Self {
        for s in &mut self.slices {
            s.patch_ids = (0..rows)
                .flat_map(|r| (0..cols).map(move |c| (r, c)))
                .map(|(r, c)| crate::imagecore::patch_id(&s.slice_id, r, c))
                .collect();
        }
        self
    }

    /// Manifest restricted to `ids` (order of the original manifest kept).
    pub fn subset(&self, ids: &[String]) -> Self {
        let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
        Self {
            slices: self
                .slices
                .iter()
                .filter(|s| keep.contains(s.slice_id.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Reads CSV `slice_id,label,path`. Patch lists start empty; see [`Self::with_grid`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut slices = Vec::new();
        for rec in r.deserialize::<(String, String, String)>() {
            let (slice_id, label, path) = rec?;
            slices.push(SliceRecord {
                slice_id,
                label: label.parse()?,
                path,
                patch_ids: Vec::new(),
            });
        }
        Self::new(slices)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["slice_id", "label", "path"])?;
        for s in &self.slices {
            w.write_record([s.slice_id.as_str(), s.label.name(), s.path.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SplitKind {
    HoldOut { train_fraction: f64 },
    KFold { k: usize },
}

/// Stratified slice-level split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub seed: u64,
}

impl SplitPlan {
    pub fn holdout(seed: u64) -> Self {
        Self {
            kind: SplitKind::HoldOut { train_fraction: 0.75 },
            seed,
        }
    }

    pub fn kfold(seed: u64) -> Self {
        Self {
            kind: SplitKind::KFold { k: 4 },
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Fold {
    /// Fails with [`EvalError::Leakage`] if any slice is on both sides.
    pub fn assert_disjoint(&self) -> Result<()> {
        let train: HashSet<&str> = self.train.iter().map(String::as_str).collect();
        match self.test.iter().find(|t| train.contains(t.as_str())) {
            Some(t) => Err(EvalError::Leakage(t.clone())),
            None => Ok(()),
        }
    }
}

/// Slice ids grouped by class, each group sorted then shuffled with the seed.
fn shuffled_by_class(manifest: &DatasetManifest, seed: u64) -> BTreeMap<TissueClass, Vec<String>> {
    let mut groups: BTreeMap<TissueClass, Vec<String>> = BTreeMap::new();
    for s in manifest.slices() {
        groups.entry(s.label).or_default().push(s.slice_id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ids in groups.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
    }
    groups
}

/// HoldOut yields one fold; KFold(k) yields k folds whose test sets partition
/// the slices. Every fold is stratified by tissue class.
pub fn make_split(manifest: &DatasetManifest, plan: &SplitPlan) -> Result<Vec<Fold>> {
    if manifest.is_empty() {
        return Err(EvalError::Empty);
    }
    let groups = shuffled_by_class(manifest, plan.seed);
    let folds = match plan.kind {
        SplitKind::HoldOut { train_fraction } => {
            if !(train_fraction > 0.0 && train_fraction < 1.0) {
                return Err(EvalError::InvalidPlan(format!(
                    "train fraction {train_fraction} outside (0, 1)"
                )));
            }
            let mut fold = Fold {
                train: Vec::new(),
                test: Vec::new(),
            };
            for (&class, ids) in &groups {
                if ids.len() < 2 {
                    return Err(EvalError::TooFewSlices {
                        class,
                        count: ids.len(),
                        needed: 2,
                    });
                }
                let n_test = (((1.0 - train_fraction) * ids.len() as f64).round() as usize)
                    .clamp(1, ids.len() - 1);
                fold.test.extend_from_slice(&ids[..n_test]);
                fold.train.extend_from_slice(&ids[n_test..]);
            }
            vec![fold]
        }
        SplitKind::KFold { k } => {
            if k < 2 {
                return Err(EvalError::InvalidPlan(format!("k = {k} folds")));
            }
            // Deal class-ordered ids round-robin so fold sizes differ by at most one
            // overall and per class.
            let mut buckets = vec![Vec::new(); k];
            let mut pos = 0;
            for (&class, ids) in &groups {
                if ids.len() < k {
                    return Err(EvalError::TooFewSlices {
                        class,
                        count: ids.len(),
                        needed: k,
                    });
                }
                for id in ids {
                    buckets[pos % k].push(id.clone());
                    pos += 1;
                }
            }
            (0..k)
                .map(|f| Fold {
                    test: buckets[f].clone(),
                    train: (0..k)
                        .filter(|&g| g != f)
                        .flat_map(|g| buckets[g].iter().cloned())
                        .collect(),
                })
                .collect()
        }
    };
    let mut folds = folds;
    for f in &mut folds {
        f.train.sort_unstable();
        f.test.sort_unstable();
        f.assert_disjoint()?;
    }
    Ok(folds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Patch,
    Slice,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Patch => "patch",
            Level::Slice => "slice",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub extractor: String,
    pub method: String,
    pub level: Level,
    /// Recall per class; `None` when the class is absent from the truth.
    pub per_class: [Option<f64>; 4],
    /// Macro average over the classes present.
    pub overall: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: [[usize; 4]; 4],
}

impl SensitivityReport {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Plain accuracy from the confusion matrix.
    pub fn accuracy(&self) -> f64 {
        let diag: usize = (0..4).map(|i| self.confusion[i][i]).sum();
        diag as f64 / self.total() as f64
    }
}

pub fn compute_sensitivity(truth: &[TissueClass], predicted: &[TissueClass]) -> Result<SensitivityReport> {
    if truth.len() != predicted.len() {
        return Err(EvalError::LengthMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut confusion = [[0usize; 4]; 4];
    for (t, p) in truth.iter().zip(predicted) {
        confusion[t.index()][p.index()] += 1;
    }
    let mut per_class = [None; 4];
    for (c, row) in confusion.iter().enumerate() {
        let n: usize = row.iter().sum();
        if n > 0 {
            per_class[c] = Some(row[c] as f64 / n as f64);
        }
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(SensitivityReport {
        extractor: String::new(),
        method: String::new(),
        level: Level::Patch,
        per_class,
        overall: present.iter().sum::<f64>() / present.len() as f64,
        confusion,
    })
}

/// Equal-weight mean of fold reports. Confusion matrices are summed.
pub fn average_reports(reports: &[SensitivityReport]) -> Result<SensitivityReport> {
    let first = reports.first().ok_or(EvalError::Empty)?;
    let mut out = first.clone();
    out.confusion = [[0; 4]; 4];
    for r in reports {
        for i in 0..4 {
            for j in 0..4 {
                out.confusion[i][j] += r.confusion[i][j];
            }
        }
    }
    for c in 0..4 {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.per_class[c]).collect();
        out.per_class[c] = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    }
    out.overall = reports.iter().map(|r| r.overall).sum::<f64>() / reports.len() as f64;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Experiment protocol

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub extractor: String,
    pub seed: u64,
    pub holdout_train_fraction: f64,
    pub folds: usize,
    pub patch_svm: SvmConfig,
    pub slice_svm: SvmConfig,
    /// Per-feature z-scoring fitted on each training split.
    pub standardize: bool,
}

impl ExperimentPlan {
    pub fn new(extractor: impl Into<String>, seed: u64) -> Self {
        Self {
            extractor: extractor.into(),
            seed,
            holdout_train_fraction: 0.75,
            folds: 4,
            patch_svm: SvmConfig::patch_level(),
            slice_svm: SvmConfig::slice_level(),
            standardize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub extractor: String,
    /// `patch-svm`/patch, `vote`/slice, `concat`/slice, `sum`/slice.
    pub reports: Vec<SensitivityReport>,
    /// Per-fold slice reports for `concat` and `sum`, keyed by method.
    pub fold_reports: BTreeMap<String, Vec<SensitivityReport>>,
    pub holdout: Fold,
    pub folds: Vec<Fold>,
    /// False if any SVM stopped on its iteration budget.
    pub all_converged: bool,
}

impl ExperimentReport {
    pub fn find(&self, method: &str) -> Option<&SensitivityReport> {
        self.reports.iter().find(|r| r.method == method)
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn patch_rows(
    manifest: &DatasetManifest,
    table: &EmbeddingTable,
    slice_ids: &[String],
) -> Result<(Vec<Vec<f64>>, Vec<usize>, Vec<String>)> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut owner = Vec::new();
    for sid in slice_ids {
        let s = manifest.get(sid).expect("split ids come from the manifest");
        for pid in &s.patch_ids {
            let e = table
                .get(pid)
                .ok_or_else(|| EvalError::MissingEmbeddings(pid.clone()))?;
            x.push(to_f64(&e.values));
            y.push(s.label.index());
            owner.push(sid.clone());
        }
    }
    Ok((x, y, owner))
}

/// Aggregated slice vectors for every slice in the manifest, keyed by slice id.
pub fn slice_features(
    manifest: &DatasetManifest,
    table: &EmbeddingTable,
    method: Combination,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for s in manifest.slices() {
        let patches = s
            .patch_ids
            .iter()
            .map(|pid| {
                table
                    .get(pid)
                    .cloned()
                    .ok_or_else(|| EvalError::MissingEmbeddings(pid.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let agg = aggregate(method, &s.slice_id, &patches)?;
        out.insert(s.slice_id.clone(), to_f64(&agg.values));
    }
    Ok(out)
}

fn fit_and_predict(
    train_x: Vec<Vec<f64>>,
    train_y: &[usize],
    test_x: Vec<Vec<f64>>,
    config: &SvmConfig,
    standardize: bool,
) -> Result<(MulticlassModel, Vec<(usize, f64)>)> {
    let (train_x, test_x) = if standardize {
        let s = Standardizer::fit(&train_x)?;
        (
            train_x.iter().map(|r| s.transform(r)).collect::<Vec<_>>(),
            test_x.iter().map(|r| s.transform(r)).collect::<Vec<_>>(),
        )
    } else {
        (train_x, test_x)
    };
    let model = classify::train_multiclass(&train_x, train_y, config)?;
    let preds = test_x
        .iter()
        .map(|x| model.predict(x))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((model, preds))
}

fn labelled(mut r: SensitivityReport, extractor: &str, method: &str, level: Level) -> SensitivityReport {
    r.extractor = extractor.to_string();
    r.method = method.to_string();
    r.level = level;
    r
}

fn class_of(i: usize) -> TissueClass {
    TissueClass::from_index(i).expect("labels are tissue class indices")
}

/// Patch-level RBF SVM and majority vote on the hold-out split, then
/// concat/sum slice vectors with a linear SVM under k-fold CV.
pub fn run_experiment(
    manifest: &DatasetManifest,
    table: &EmbeddingTable,
    plan: &ExperimentPlan,
) -> Result<ExperimentReport> {
    let holdout = make_split(
        manifest,
        &SplitPlan {
            kind: SplitKind::HoldOut {
                train_fraction: plan.holdout_train_fraction,
            },
            seed: plan.seed,
        },
    )?
    .remove(0);
    let folds = make_split(
        manifest,
        &SplitPlan {
            kind: SplitKind::KFold { k: plan.folds },
            seed: plan.seed,
        },
    )?;
    let mut all_converged = true;

    // Patch level.
    let (train_x, train_y, _) = patch_rows(manifest, table, &holdout.train)?;
    let (test_x, test_y, test_owner) = patch_rows(manifest, table, &holdout.test)?;
    let (model, preds) = fit_and_predict(train_x, &train_y, test_x, &plan.patch_svm, plan.standardize)?;
    all_converged &= model.converged();
    let truth: Vec<TissueClass> = test_y.iter().map(|&c| class_of(c)).collect();
    let predicted: Vec<TissueClass> = preds.iter().map(|p| class_of(p.0)).collect();
    let patch_report = labelled(compute_sensitivity(&truth, &predicted)?, &plan.extractor, "patch-svm", Level::Patch);

    // Majority vote over each test slice's patches.
    let mut slice_truth = Vec::new();
    let mut slice_pred = Vec::new();
    for sid in &holdout.test {
        let votes: Vec<PatchVote> = test_owner
            .iter()
            .zip(&preds)
            .filter(|(o, _)| *o == sid)
            .map(|(_, &(class, score))| PatchVote { class, score })
            .collect();
        slice_truth.push(manifest.get(sid).unwrap().label);
        slice_pred.push(class_of(classify::majority_vote(&votes)?));
    }
    let vote_report = labelled(compute_sensitivity(&slice_truth, &slice_pred)?, &plan.extractor, "vote", Level::Slice);

    let mut reports = vec![patch_report, vote_report];
    let mut fold_reports = BTreeMap::new();
    for method in [Combination::Concat, Combination::Sum] {
        let features = slice_features(manifest, table, method)?;
        let mut per_fold = Vec::with_capacity(folds.len());
        for fold in &folds {
            fold.assert_disjoint()?;
            let rows = |ids: &[String]| -> (Vec<Vec<f64>>, Vec<usize>) {
                ids.iter()
                    .map(|id| (features[id].clone(), manifest.get(id).unwrap().label.index()))
                    .unzip()
            };
            let (tx, ty) = rows(&fold.train);
            let (vx, vy) = rows(&fold.test);
            let (model, preds) = fit_and_predict(tx, &ty, vx, &plan.slice_svm, plan.standardize)?;
            all_converged &= model.converged();
            let truth: Vec<TissueClass> = vy.iter().map(|&c| class_of(c)).collect();
            let predicted: Vec<TissueClass> = preds.iter().map(|p| class_of(p.0)).collect();
            per_fold.push(labelled(
                compute_sensitivity(&truth, &predicted)?,
                &plan.extractor,
                method.name(),
                Level::Slice,
            ));
        }
        reports.push(average_reports(&per_fold)?);
        fold_reports.insert(method.name().to_string(), per_fold);
    }

    Ok(ExperimentReport {
        extractor: plan.extractor.clone(),
        reports,
        fold_reports,
        holdout,
        folds,
        all_converged,
    })
}

// ---------------------------------------------------------------------------
// Report writers

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

/// CSV `extractor,method,level,class,sensitivity`, one row per class plus an
/// `overall` row per report.
pub fn summary_csv(reports: &[SensitivityReport]) -> String {
    let mut out = String::from("extractor,method,level,class,sensitivity\n");
    for r in reports {
        for (c, v) in r.per_class.iter().enumerate() {
            let v = v.map_or_else(String::new, |v| format!("{v:.6}"));
            let _ = writeln!(out, "{},{},{},{},{v}", r.extractor, r.method, r.level.name(), TissueClass::NAMES[c]);
        }
        let _ = writeln!(out, "{},{},{},overall,{:.6}", r.extractor, r.method, r.level.name(), r.overall);
    }
    out
}

/// Patch-level table: one row per extractor, class-wise and overall
/// sensitivity in percent.
pub fn patch_table(reports: &[SensitivityReport]) -> String {
    let mut out = String::from("| Features | Normal | Benign | In-situ | Invasive | Overall |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for r in reports.iter().filter(|r| r.level == Level::Patch) {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.extractor,
            pct(r.per_class[0]),
            pct(r.per_class[1]),
            pct(r.per_class[2]),
            pct(r.per_class[3]),
            pct(Some(r.overall))
        );
    }
    out
}

/// Slice-level bar-chart data: class-wise (`extractor,method,normal,...`) and
/// overall (`extractor,vote,concat,sum`).
pub fn slice_chart_csvs(reports: &[SensitivityReport]) -> (String, String) {
    let mut classwise = String::from("extractor,method,normal,benign,in-situ,invasive\n");
    let mut overall = String::from("extractor,vote,concat,sum\n");
    let mut extractors: Vec<&str> = Vec::new();
    for r in reports.iter().filter(|r| r.level == Level::Slice) {
        let cell = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        let _ = writeln!(
            classwise,
            "{},{},{},{},{},{}",
            r.extractor,
            r.method,
            cell(r.per_class[0]),
            cell(r.per_class[1]),
            cell(r.per_class[2]),
            cell(r.per_class[3])
        );
        if !extractors.contains(&r.extractor.as_str()) {
            extractors.push(&r.extractor);
        }
    }
    for e in extractors {
        let get = |m: &str| {
            reports
                .iter()
                .find(|r| r.extractor == e && r.method == m && r.level == Level::Slice)
                .map_or_else(String::new, |r| format!("{:.6}", r.overall))
        };
        let _ = writeln!(overall, "{e},{},{},{}", get("vote"), get("concat"), get("sum"));
    }
    (classwise, overall)
}

#[cfg(test)]
mod tests {
    use super::*;
    use TissueClass::*;

    fn manifest(per_class: usize, patches: usize) -> DatasetManifest {
        let mut slices = Vec::new();
        for (c, class) in TissueClass::ALL.iter().enumerate() {
            for i in 0..per_class {
                slices.push(SliceRecord {
                    slice_id: format!("{c}-{i:03}"),
                    label: *class,
                    path: String::new(),
                    patch_ids: Vec::new(),
                });
            }
        }
        DatasetManifest::new(slices).unwrap().with_grid(1, patches)
    }

    #[test]
    fn manifest_invariants() {
        let mut m = manifest(2, 3).slices().to_vec();
        m[1].slice_id = m[0].slice_id.clone();
        assert!(matches!(DatasetManifest::new(m.clone()), Err(EvalError::DuplicateSlice(_))));
        m[1].slice_id = "x".into();
        m[1].patch_ids.pop();
        assert!(matches!(DatasetManifest::new(m), Err(EvalError::RaggedPatches { .. })));
        assert!("tumour".parse::<TissueClass>().is_err());
        assert_eq!("in-situ".parse::<TissueClass>().unwrap(), InSitu);
    }

    #[test]
    fn manifest_csv_round_trip() {
        let m = manifest(2, 0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        m.write_csv(&p).unwrap();
        assert_eq!(DatasetManifest::read_csv(&p).unwrap(), m);
    }

    #[test]
    fn holdout_is_75_25_per_class() {
        let m = manifest(100, 12);
        let folds = make_split(&m, &SplitPlan::holdout(3)).unwrap();
        assert_eq!(folds.len(), 1);
        assert_eq!((folds[0].train.len(), folds[0].test.len()), (300, 100));
        for c in 0..4 {
            let prefix = format!("{c}-");
            assert_eq!(folds[0].test.iter().filter(|s| s.starts_with(&prefix)).count(), 25);
        }
        assert_eq!(folds, make_split(&m, &SplitPlan::holdout(3)).unwrap());
        assert_ne!(folds, make_split(&m, &SplitPlan::holdout(4)).unwrap());
    }

    #[test]
    fn kfold_partitions() {
        let m = manifest(100, 12);
        let folds = make_split(&m, &SplitPlan::kfold(1)).unwrap();
        assert_eq!(folds.len(), 4);
        let mut union: Vec<String> = Vec::new();
        for f in &folds {
            assert_eq!(f.test.len(), 100);
            assert_eq!(f.train.len(), 300);
            f.assert_disjoint().unwrap();
            union.extend(f.test.iter().cloned());
        }
        union.sort();
        union.dedup();
        assert_eq!(union.len(), 400);

        let small = manifest(3, 12);
        assert!(matches!(
            make_split(&small, &SplitPlan::kfold(1)),
            Err(EvalError::TooFewSlices { count: 3, needed: 4, .. })
        ));
    }

    #[test]
    fn sensitivity_examples() {
        let r = compute_sensitivity(&[Normal, Normal, Benign, Benign], &[Normal, Benign, Benign, Benign]).unwrap();
        assert_eq!(r.per_class[0], Some(0.5));
        assert_eq!(r.per_class[1], Some(1.0));
        assert_eq!(r.per_class[2], None);
        assert!((r.overall - 0.75).abs() < 1e-12);

        let truth: Vec<_> = TissueClass::ALL.iter().flat_map(|&c| [c; 5]).collect();
        let r = compute_sensitivity(&truth, &vec![Normal; 20]).unwrap();
        assert_eq!(r.per_class, [Some(1.0), Some(0.0), Some(0.0), Some(0.0)]);
        assert!((r.overall - 0.25).abs() < 1e-12);
        assert_eq!(r.total(), 20);

        let r = compute_sensitivity(&truth, &truth).unwrap();
        assert!(r.per_class.iter().all(|v| *v == Some(1.0)));
        assert!(matches!(compute_sensitivity(&truth, &truth[1..]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn averaging_uses_equal_weights() {
        let a = compute_sensitivity(&[Normal, Benign], &[Normal, Normal]).unwrap();
        let b = compute_sensitivity(&[Normal, Benign, Benign, Benign], &[Normal, Benign, Benign, Benign]).unwrap();
        let m = average_reports(&[a.clone(), b.clone()]).unwrap();
        assert!((m.overall - (a.overall + b.overall) / 2.0).abs() < 1e-12);
        assert_eq!(m.total(), 6);
        assert_eq!(m.per_class[1], Some(0.5));
    }

    #[test]
    fn report_writers() {
        let mut r = compute_sensitivity(&[Normal, Invasive], &[Normal, Normal]).unwrap();
        r.extractor = "S-DNet-15".into();
        r.method = "patch-svm".into();
        let csv = summary_csv(&[r.clone()]);
        assert!(csv.contains("S-DNet-15,patch-svm,patch,benign,\n"));
        assert!(csv.contains("S-DNet-15,patch-svm,patch,overall,0.500000\n"));
        assert!(patch_table(&[r]).contains("| S-DNet-15 | 100.0 | - | - | 0.0 | 50.0 |"));
    }
}
