use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use super::config::{stage_seed, PretextPool};
use super::{data_error, PipelineError, RunConfig, StageContext, StageWriter};
use crate::classify;
use crate::embeddings::{self, Combination, EmbeddingTable, EmbeddingVector};
use crate::evaluation::{self, DatasetManifest, Level, SliceRecord, SplitKind, SplitPlan, TissueClass};
use crate::imagecore::{self, PatchImage};
use crate::nnet::{self, EpochLog, NetworkParams};
use crate::pretext::{self, PretextSampling};
use crate::projection;
use crate::synthgen;

type Result<T> = std::result::Result<T, PipelineError>;

/// Generates the synthetic dataset: `images/`, `manifest.csv`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    const STAGE: &str = "synth";
    let synth = cfg.synth_config();
    synth.validate().stage(STAGE)?;
    let w = StageWriter::begin(STAGE, out)?;
    let manifest = synthgen::generate_dataset(&synth, &w.path("")).stage(STAGE)?;
    w.finish(
        cfg.values(),
        json!({ "slices": manifest.len(), "patches_per_slice": manifest.patches_per_slice() }),
    )
}

/// Tiles every slice of `data_dir/manifest.csv` into `patches/<patch_id>.<fmt>`
/// and writes `slices.csv` plus `patches.csv` (`patch_id,slice_id,label,path`).
pub fn cmd_tile(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<PathBuf> {
    const STAGE: &str = "tile";
    let manifest_path = data_dir.join("manifest.csv");
    if !manifest_path.is_file() {
        return Err(data_error(STAGE, format!("{} not found", manifest_path.display())));
    }
    let manifest = DatasetManifest::read_csv(&manifest_path).stage(STAGE)?;
    if manifest.is_empty() {
        return Err(data_error(STAGE, "manifest lists no slices"));
    }
    let mut w = StageWriter::begin(STAGE, out)?;
    w.input_stage(data_dir)?;
    w.input(&manifest_path)?;
    for s in manifest.slices() {
        w.input(&data_dir.join(&s.path))?;
    }
    std::fs::create_dir_all(w.path("patches")).stage(STAGE)?;

    let tiles: Vec<Vec<PatchImage>> = manifest
        .slices()
        .par_iter()
        .map(|s| {
            let img = imagecore::read_image(&data_dir.join(&s.path))?;
            imagecore::tile_slice(&s.slice_id, &img, cfg.patch_side)
        })
        .collect::<std::result::Result<_, _>>()
        .stage(STAGE)?;
    let per_slice = tiles[0].len();
    if let Some((s, t)) = manifest.slices().iter().zip(&tiles).find(|(_, t)| t.len() != per_slice) {
        return Err(data_error(
            STAGE,
            format!("slice {} tiles into {} patches, expected {per_slice}", s.slice_id, t.len()),
        ));
    }
    let ext = &cfg.image_format;
    tiles
        .par_iter()
        .flatten()
        .try_for_each(|p| imagecore::write_image(&w.path(format!("patches/{}.{ext}", p.id())), p.image()))
        .stage(STAGE)?;

    let mut csv = csv::Writer::from_path(w.path("patches.csv")).stage(STAGE)?;
    csv.write_record(["patch_id", "slice_id", "label", "path"]).stage(STAGE)?;
    for (s, t) in manifest.slices().iter().zip(&tiles) {
        for p in t {
            let rel = format!("patches/{}.{ext}", p.id());
            csv.write_record([p.id().as_str(), &s.slice_id, s.label.name(), &rel]).stage(STAGE)?;
        }
    }
    csv.flush().stage(STAGE)?;
    manifest.write_csv(&w.path("slices.csv")).stage(STAGE)?;
    w.finish(
        cfg.values(),
        json!({ "slices": manifest.len(), "patches": manifest.len() * per_slice, "patch_side": cfg.patch_side }),
    )
}

/// Slice manifest of a tile directory, with patch ids in row-major order.
pub fn load_tiles(tiles_dir: &Path) -> Result<DatasetManifest> {
    const STAGE: &str = "load-tiles";
    let slices = DatasetManifest::read_csv(&tiles_dir.join("slices.csv")).stage(STAGE)?;
    let mut patch_ids: HashMap<String, Vec<String>> = HashMap::new();
    let mut r = csv::Reader::from_path(tiles_dir.join("patches.csv")).stage(STAGE)?;
    for rec in r.deserialize::<(String, String, String, String)>() {
        let (patch_id, slice_id, _, _) = rec.stage(STAGE)?;
        patch_ids.entry(slice_id).or_default().push(patch_id);
    }
    let records: Vec<SliceRecord> = slices
        .slices()
        .iter()
        .map(|s| SliceRecord {
            patch_ids: patch_ids.remove(&s.slice_id).unwrap_or_default(),
            ..s.clone()
        })
        .collect();
    DatasetManifest::new(records).stage(STAGE)
}

/// Patch images of the given slices, in manifest order.
pub fn load_patches(tiles_dir: &Path, manifest: &DatasetManifest, slices: Option<&HashSet<String>>) -> Result<Vec<PatchImage>> {
    const STAGE: &str = "load-tiles";
    let mut paths: HashMap<String, String> = HashMap::new();
    let mut r = csv::Reader::from_path(tiles_dir.join("patches.csv")).stage(STAGE)?;
    for rec in r.deserialize::<(String, String, String, String)>() {
        let (patch_id, _, _, path) = rec.stage(STAGE)?;
        paths.insert(patch_id, path);
    }
    let wanted: Vec<&String> = manifest
        .slices()
        .iter()
        .filter(|s| slices.map_or(true, |keep| keep.contains(&s.slice_id)))
        .flat_map(|s| &s.patch_ids)
        .collect();
    wanted
        .par_iter()
        .map(|pid| {
            let rel = paths
                .get(*pid)
                .ok_or_else(|| data_error(STAGE, format!("patch {pid} missing from patches.csv")))?;
            let img = imagecore::read_image(&tiles_dir.join(rel)).stage(STAGE)?;
            PatchImage::new(imagecore::PatchOrigin::parse(pid).stage(STAGE)?, img).stage(STAGE)
        })
        .collect()
}

/// Samples a fraction of slices (labels unseen) and writes their pretext
/// examples plus `sampled_slices.txt`. With `pretext_pool = train` the draw
/// is limited to the training side of the same hold-out split `eval` uses.
pub fn cmd_pretext_gen(cfg: &RunConfig, tiles_dir: &Path, fraction: f64, out: &Path) -> Result<PathBuf> {
    const STAGE: &str = "pretext-gen";
    let manifest = load_tiles(tiles_dir)?;
    let sampling = PretextSampling::new(fraction, stage_seed(cfg.seed, "pretext")).stage(STAGE)?;
    let pool: Vec<String> = match cfg.pretext_pool {
        PretextPool::All => manifest.slices().iter().map(|s| s.slice_id.clone()).collect(),
        PretextPool::Train => {
            let plan = cfg.experiment_plan("");
            let split = SplitPlan {
                kind: SplitKind::HoldOut {
                    train_fraction: plan.holdout_train_fraction,
                },
                seed: plan.seed,
            };
            evaluation::make_split(&manifest, &split).stage(STAGE)?.remove(0).train
        }
    };
    let picked = pretext::sample_pretext_pool(&pool, manifest.len(), &sampling).stage(STAGE)?;
    let keep: HashSet<String> = picked.iter().cloned().collect();
    let patches = load_patches(tiles_dir, &manifest, Some(&keep))?;
    let examples = pretext::build_pretext_dataset(&patches);

    let mut w = StageWriter::begin(STAGE, out)?;
    w.input_stage(tiles_dir)?;
    pretext::write_pretext_dataset(&w.path(""), &examples, &cfg.image_format).stage(STAGE)?;
    std::fs::write(w.path("sampled_slices.txt"), picked.join("\n") + "\n").stage(STAGE)?;
    w.finish(
        cfg.values(),
        json!({
            "fraction": fraction,
            "pool": pool.len(),
            "slices": picked.len(),
            "sources": patches.len(),
            "examples": examples.len(),
        }),
    )
}

/// Trains the pretext network; writes `params.nnp` and `train_log.csv`.
pub fn cmd_train_pretext(
    cfg: &RunConfig,
    pretext_dir: &Path,
    out: &Path,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<PathBuf> {
    const STAGE: &str = "train-pretext";
    let examples = pretext::read_pretext_dataset(pretext_dir).stage(STAGE)?;
    let spec = cfg.network_spec().stage(STAGE)?;
    let train = cfg.train_config(stage_seed(cfg.seed, "train"));
    let mut w = StageWriter::begin(STAGE, out)?;
    w.input_stage(pretext_dir)?;
    w.input(&pretext_dir.join("manifest.csv"))?;
    let outcome = nnet::train_pretext_with(&spec, &train, &examples, on_epoch).stage(STAGE)?;
    nnet::save_params(&w.path("params.nnp"), &outcome.params).stage(STAGE)?;
    nnet::write_train_log(&w.path("train_log.csv"), &outcome.log).stage(STAGE)?;
    let last = outcome.log.last().expect("at least one epoch");
    w.finish(
        cfg.values(),
        json!({
            "examples": examples.len(),
            "parameters": outcome.params.parameter_count(),
            "final_loss": last.loss,
            "final_accuracy": last.accuracy,
        }),
    )
}

/// Pretext accuracy on slices that were not used for pretext training,
/// evaluated one slice at a time to bound memory.
pub fn pretext_heldout_accuracy(
    params: &NetworkParams<f32>,
    tiles_dir: &Path,
    excluded: &HashSet<String>,
) -> Result<f64> {
    const STAGE: &str = "pretext-heldout";
    let manifest = load_tiles(tiles_dir)?;
    let mut correct = 0.0;
    let mut total = 0usize;
    for s in manifest.slices().iter().filter(|s| !excluded.contains(&s.slice_id)) {
        let one: HashSet<String> = [s.slice_id.clone()].into();
        let patches = load_patches(tiles_dir, &manifest, Some(&one))?;
        let examples = pretext::build_pretext_dataset(&patches);
        correct += nnet::pretext_accuracy(params, &examples).stage(STAGE)? * examples.len() as f64;
        total += examples.len();
    }
    if total == 0 {
        return Err(data_error(STAGE, "no held-out slices"));
    }
    Ok(correct / total as f64)
}

/// Embeds every tile with a trained network into `embeddings.emb`.
pub fn cmd_embed(cfg: &RunConfig, params_path: &Path, tiles_dir: &Path, out: &Path) -> Result<PathBuf> {
    const STAGE: &str = "embed";
    let params = nnet::load_params(params_path).stage(STAGE)?;
    let manifest = load_tiles(tiles_dir)?;
    let patches = load_patches(tiles_dir, &manifest, None)?;
    let vectors = nnet::extract_embeddings(&params, &patches).stage(STAGE)?;
    let mut w = StageWriter::begin(STAGE, out)?;
    w.input(params_path)?;
    w.input_stage(tiles_dir)?;
    embeddings::export_embeddings(&w.path("embeddings.emb"), &vectors).stage(STAGE)?;
    w.finish(
        cfg.values(),
        json!({ "rows": vectors.len(), "dim": params.spec.embedding_dim() }),
    )
}

/// Validates externally computed embeddings (EMB1 or CSV) and stores them as
/// `embeddings.emb`. With a tile directory, every tile must be covered.
pub fn cmd_import_embeddings(cfg: &RunConfig, input: &Path, tiles_dir: Option<&Path>, out: &Path) -> Result<PathBuf> {
    const STAGE: &str = "import-embeddings";
    let vectors = embeddings::import_embeddings(input).stage(STAGE)?;
    let table = EmbeddingTable::new(vectors.clone()).stage(STAGE)?;
    let mut w = StageWriter::begin(STAGE, out)?;
    w.input(input)?;
    if input.extension().is_none_or(|e| e != "csv") {
        w.input(&embeddings::sidecar_path(input))?;
    }
    if let Some(tiles) = tiles_dir {
        w.input_stage(tiles)?;
        let manifest = load_tiles(tiles)?;
        if let Some(pid) = manifest.slices().iter().flat_map(|s| &s.patch_ids).find(|p| table.get(p).is_none()) {
            return Err(data_error(STAGE, format!("no embedding for patch {pid}")));
        }
    }
    embeddings::export_embeddings(&w.path("embeddings.emb"), &vectors).stage(STAGE)?;
    w.finish(cfg.values(), json!({ "rows": table.len(), "dim": table.dim() }))
}

fn read_table(stage: &str, path: &Path) -> Result<EmbeddingTable> {
    EmbeddingTable::new(embeddings::import_embeddings(path).stage(stage)?).stage(stage)
}

/// Combines each slice's patch embeddings into `<method>.emb` (rows keyed by slice id).
pub fn cmd_aggregate(
    cfg: &RunConfig,
    emb_path: &Path,
    tiles_dir: &Path,
    method: Combination,
    out: &Path,
) -> Result<PathBuf> {
    const STAGE: &str = "aggregate";
    let table = read_table(STAGE, emb_path)?;
    let manifest = load_tiles(tiles_dir)?;
    let rows = manifest
        .slices()
        .iter()
        .map(|s| {
            let patches: Vec<EmbeddingVector> = s
                .patch_ids
                .iter()
                .map(|p| {
                    table
                        .get(p)
                        .cloned()
                        .ok_or_else(|| data_error(STAGE, format!("no embedding for patch {p}")))
                })
                .collect::<Result<_>>()?;
            let agg = embeddings::aggregate(method, &s.slice_id, &patches).stage(STAGE)?;
            EmbeddingVector::new(agg.slice_id, agg.values).stage(STAGE)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = StageWriter::begin(STAGE, out)?;
    w.input(emb_path)?;
    w.input_stage(tiles_dir)?;
    let name = format!("{}.emb", method.name());
    embeddings::export_embeddings(&w.path(&name), &rows).stage(STAGE)?;
    w.finish(
        cfg.values(),
        json!({ "method": method.name(), "slices": rows.len(), "dim": rows.first().map_or(0, |r| r.dim()) }),
    )
}

/// Which rows a feature file holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvmLevel {
    Patch,
    Slice,
}

impl std::str::FromStr for SvmLevel {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(Self::Patch),
            "slice" => Ok(Self::Slice),
            _ => Err(PipelineError::Usage(format!("level must be patch or slice, got {s:?}"))),
        }
    }
}

/// Tissue label of every row id (patch or slice) in the manifest.
fn labels_by_id(manifest: &DatasetManifest) -> HashMap<String, TissueClass> {
    let mut out = HashMap::new();
    for s in manifest.slices() {
        out.insert(s.slice_id.clone(), s.label);
        for p in &s.patch_ids {
            out.insert(p.clone(), s.label);
        }
    }
    out
}

fn labelled_rows(stage: &str, table: &EmbeddingTable, manifest: &DatasetManifest) -> Result<(Vec<Vec<f64>>, Vec<usize>, Vec<String>)> {
    let labels = labels_by_id(manifest);
    let mut x = Vec::with_capacity(table.len());
    let mut y = Vec::with_capacity(table.len());
    let mut ids = Vec::with_capacity(table.len());
    for row in table.rows() {
        let label = labels
            .get(&row.patch_id)
            .ok_or_else(|| data_error(stage, format!("row {} is not a known patch or slice", row.patch_id)))?;
        x.push(row.values.iter().map(|&v| f64::from(v)).collect());
        y.push(label.index());
        ids.push(row.patch_id.clone());
    }
    Ok((x, y, ids))
}

/// Trains a one-vs-rest SVM on all rows of a feature file: RBF for patch
/// features, linear for slice features. Writes `model.svm` and `model.svm.json`.
pub fn cmd_train_svm(cfg: &RunConfig, features: &Path, tiles_dir: &Path, level: SvmLevel, out: &Path) -> Result<PathBuf> {
    const STAGE: &str = "train-svm";
    let table = read_table(STAGE, features)?;
    let manifest = load_tiles(tiles_dir)?;
    let (x, y, _) = labelled_rows(STAGE, &table, &manifest)?;
    let config = match level {
        SvmLevel::Patch => cfg.patch_svm(),
        SvmLevel::Slice => cfg.slice_svm(),
    };
    let model = classify::train_multiclass(&x, &y, &config).stage(STAGE)?;
    let mut w = StageWriter::begin(STAGE, out)?;
    w.input(features)?;
    w.input_stage(tiles_dir)?;
    classify::save_model(&w.path("model.svm"), &model, &config).stage(STAGE)?;
    w.finish(
        cfg.values(),
        json!({ "rows": x.len(), "converged": model.converged() }),
    )
}

/// Full evaluation protocol for one extractor's patch embeddings. Writes
/// `report.json`, `summary.csv`, `table.md`, `fig6.csv`, `fig7.csv`.
pub fn cmd_eval(cfg: &RunConfig, emb_path: &Path, tiles_dir: &Path, extractor: &str, out: &Path) -> Result<PathBuf> {
    const STAGE: &str = "eval";
    let table = read_table(STAGE, emb_path)?;
    let manifest = load_tiles(tiles_dir)?;
    let report = evaluation::run_experiment(&manifest, &table, &cfg.experiment_plan(extractor)).stage(STAGE)?;
    let mut w = StageWriter::begin(STAGE, out)?;
    w.input(emb_path)?;
    w.input_stage(tiles_dir)?;
    write_reports(&w, &report.reports, &[]).stage(STAGE)?;
    let text = serde_json::to_string_pretty(&report).stage(STAGE)?;
    std::fs::write(w.path("report.json"), text + "\n").stage(STAGE)?;
    w.finish(cfg.values(), json!({ "extractor": extractor, "all_converged": report.all_converged }))
}

/// Writes the metric CSVs and the patch-level table into a stage directory.
/// `absent` lists extractors that were requested but not provided.
pub(crate) fn write_reports(
    w: &StageWriter,
    reports: &[evaluation::SensitivityReport],
    absent: &[String],
) -> std::io::Result<()> {
    std::fs::write(w.path("summary.csv"), evaluation::summary_csv(reports))?;
    let mut table = evaluation::patch_table(reports);
    for name in absent {
        table.push_str(&format!("| {name} | not provided | | | | |\n"));
    }
    std::fs::write(w.path("table.md"), table)?;
    let (fig6, fig7) = evaluation::slice_chart_csvs(reports);
    std::fs::write(w.path("fig6.csv"), fig6)?;
    std::fs::write(w.path("fig7.csv"), fig7)?;
    Ok(())
}

/// 2-D t-SNE of a feature file (patch or slice rows), coloured by tissue
/// class. Writes `layout.csv`, `layout.svg` and `kl.csv`.
///
/// Perplexity is capped at `(n - 1) / 3` for small inputs; the effective value
/// is recorded in `run.json`.
pub fn cmd_tsne(cfg: &RunConfig, features: &Path, tiles_dir: &Path, title: &str, out: &Path) -> Result<PathBuf> {
    const STAGE: &str = "tsne";
    let table = read_table(STAGE, features)?;
    let manifest = load_tiles(tiles_dir)?;
    let (x, y, ids) = labelled_rows(STAGE, &table, &manifest)?;
    let mut tsne = cfg.tsne_config(stage_seed(cfg.seed, "tsne"));
    let cap = (x.len().saturating_sub(1)) as f64 / 3.0;
    if tsne.perplexity > cap {
        tsne.perplexity = cap.max(1.5);
    }
    let p = projection::compute_affinities(&x, tsne.perplexity).stage(STAGE)?;
    let result = projection::run_tsne(&p, &tsne).stage(STAGE)?;
    let mut w = StageWriter::begin(STAGE, out)?;
    w.input(features)?;
    w.input_stage(tiles_dir)?;
    projection::write_layout(
        &w.path("layout.csv"),
        Some(&w.path("layout.svg")),
        &ids,
        &result.layout,
        &y,
        &TissueClass::NAMES,
        title,
    )
    .stage(STAGE)?;
    let mut kl = String::from("iteration,kl\n");
    for (i, v) in result.kl_log.iter().enumerate() {
        kl.push_str(&format!("{i},{v:.8}\n"));
    }
    std::fs::write(w.path("kl.csv"), kl).stage(STAGE)?;
    let first = result.kl_log.first().copied().unwrap_or(f64::NAN);
    let last = result.kl_log.last().copied().unwrap_or(f64::NAN);
    w.finish(
        cfg.values(),
        json!({ "points": x.len(), "effective_perplexity": tsne.perplexity, "initial_kl": first, "final_kl": last }),
    )
}


pub(crate) fn slice_overall(reports: &[evaluation::SensitivityReport], extractor: &str, method: &str) -> Option<f64> {
    reports
        .iter()
        .find(|r| r.extractor == extractor && r.method == method && r.level == Level::Slice)
        .map(|r| r.overall)
}
