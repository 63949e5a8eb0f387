use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::config::extractor_tag;
use super::stages::{self, slice_overall, write_reports};
use super::{PipelineError, RunConfig, StageContext, StageWriter};
use crate::embeddings::Combination;
use crate::evaluation::{ExperimentReport, SensitivityReport};
use crate::nnet;

#[derive(Clone, Debug, Serialize)]
pub struct ExtractorSummary {
    pub tag: String,
    /// `self-supervised` or `external`.
    pub kind: String,
    pub fraction: Option<f64>,
    pub pretext_train_accuracy: Option<f64>,
    pub pretext_heldout_accuracy: Option<f64>,
    /// Slice-level overall sensitivity of concat vs. majority vote.
    pub concat_ge_vote: bool,
    pub all_converged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub extractors: Vec<ExtractorSummary>,
    /// Extractors requested but absent, e.g. external embeddings.
    pub not_provided: Vec<String>,
    pub reports: Vec<SensitivityReport>,
}

impl RunSummary {
    pub fn extractor(&self, tag: &str) -> Option<&ExtractorSummary> {
        self.extractors.iter().find(|e| e.tag == tag)
    }

    pub fn slice_overall(&self, tag: &str, method: &str) -> Option<f64> {
        slice_overall(&self.reports, tag, method)
    }
}

fn read_report(stage: &str, dir: &Path) -> Result<ExperimentReport, PipelineError> {
    let text = std::fs::read_to_string(dir.join("report.json")).stage(stage)?;
    serde_json::from_str(&text).stage(stage)
}

/// Slice-level stages shared by every extractor: evaluation, aggregation and
/// the three t-SNE maps.
fn downstream(
    cfg: &RunConfig,
    tiles: &Path,
    root: &Path,
    tag: &str,
    emb: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<ExperimentReport, PipelineError> {
    log(&format!("[{tag}] evaluating"));
    let eval_dir = stages::cmd_eval(cfg, emb, tiles, tag, &root.join("eval"))?;
    let report = read_report("eval", &eval_dir)?;
    log(&format!("[{tag}] t-SNE"));
    stages::cmd_tsne(cfg, emb, tiles, &format!("{tag} patch embeddings"), &root.join("tsne_patch"))?;
    for method in [Combination::Concat, Combination::Sum] {
        let name = method.name();
        let agg = stages::cmd_aggregate(cfg, emb, tiles, method, &root.join(format!("agg_{name}")))?;
        stages::cmd_tsne(
            cfg,
            &agg.join(format!("{name}.emb")),
            tiles,
            &format!("{tag} slice embeddings ({name})"),
            &root.join(format!("tsne_{name}")),
        )?;
    }
    Ok(report)
}

/// Runs the whole protocol into `cfg.out_dir`:
///
/// ```text
/// data/                synthetic dataset (unless data_dir is set)
/// tiles/               patches.csv, slices.csv, patches/
/// <tag>/pretext        pretext examples       (self-supervised extractors)
/// <tag>/model          params.nnp, train_log.csv
/// <tag>/embed          embeddings.emb
/// <tag>/eval           report.json and per-extractor CSVs
/// <tag>/agg_{concat,sum}, <tag>/tsne_{patch,concat,sum}
/// report/              summary.csv, table.md, fig6.csv, fig7.csv, report.json
/// ```
pub fn run_all(cfg: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).stage("run-all")?;

    let data_dir = match &cfg.data_dir {
        Some(d) => d.clone(),
        None => {
            log("generating synthetic dataset");
            stages::cmd_synth(cfg, &out.join("data"))?
        }
    };
    log("tiling");
    let tiles = stages::cmd_tile(cfg, &data_dir, &out.join("tiles"))?;

    let mut extractors = Vec::new();
    let mut reports = Vec::new();
    for &fraction in &cfg.fractions {
        let tag = extractor_tag(fraction);
        let root = out.join(&tag);
        log(&format!("[{tag}] pretext examples from {:.0}% of slices", fraction * 100.0));
        let pretext_dir = stages::cmd_pretext_gen(cfg, &tiles, fraction, &root.join("pretext"))?;
        let mut progress = |e: &nnet::EpochLog| {
            log(&format!("[{tag}] epoch {} loss {:.4} accuracy {:.3}", e.epoch, e.loss, e.accuracy))
        };
        let model_dir = stages::cmd_train_pretext(cfg, &pretext_dir, &root.join("model"), &mut progress)?;
        let params_path = model_dir.join("params.nnp");
        let params = nnet::load_params(&params_path).stage("train-pretext")?;
        let sampled: HashSet<String> = std::fs::read_to_string(pretext_dir.join("sampled_slices.txt"))
            .stage("pretext-gen")?
            .lines()
            .map(str::to_string)
            .collect();
        let heldout = stages::pretext_heldout_accuracy(&params, &tiles, &sampled)?;
        log(&format!("[{tag}] held-out pretext accuracy {heldout:.3}"));
        let train_acc = std::fs::read_to_string(model_dir.join("train_log.csv"))
            .ok()
            .and_then(|t| t.lines().last()?.rsplit(',').next()?.parse().ok());

        log(&format!("[{tag}] embedding patches"));
        let embed = stages::cmd_embed(cfg, &params_path, &tiles, &root.join("embed"))?;
        let report = downstream(cfg, &tiles, &root, &tag, &embed.join("embeddings.emb"), log)?;
        extractors.push(summary(&tag, "self-supervised", Some(fraction), train_acc, Some(heldout), &report));
        reports.extend(report.reports);
    }

    let mut not_provided = Vec::new();
    match &cfg.external_embeddings {
        Some(path) => {
            let tag = cfg.external_tag.clone();
            let root = out.join(&tag);
            log(&format!("[{tag}] importing external embeddings"));
            let imported = stages::cmd_import_embeddings(cfg, path, Some(&tiles), &root.join("embed"))?;
            let report = downstream(cfg, &tiles, &root, &tag, &imported.join("embeddings.emb"), log)?;
            extractors.push(summary(&tag, "external", None, None, None, &report));
            reports.extend(report.reports);
        }
        None => not_provided.push(cfg.external_tag.clone()),
    }

    let mut w = StageWriter::begin("report", &out.join("report"))?;
    w.input_stage(&tiles)?;
    for e in &extractors {
        w.input_stage(&out.join(&e.tag).join("eval"))?;
    }
    write_reports(&w, &reports, &not_provided).stage("report")?;
    let run = RunSummary {
        out_dir: out.clone(),
        extractors,
        not_provided,
        reports,
    };
    let text = serde_json::to_string_pretty(&json!({
        "extractors": run.extractors,
        "not_provided": run.not_provided,
        "reports": run.reports,
    }))
    .stage("report")?;
    std::fs::write(w.path("report.json"), text + "\n").stage("report")?;
    w.finish(cfg.values(), json!({ "extractors": run.extractors.len() }))?;
    Ok(run)
}

fn summary(
    tag: &str,
    kind: &str,
    fraction: Option<f64>,
    train: Option<f64>,
    heldout: Option<f64>,
    report: &ExperimentReport,
) -> ExtractorSummary {
    let vote = slice_overall(&report.reports, tag, "vote").unwrap_or(f64::NAN);
    let concat = slice_overall(&report.reports, tag, "concat").unwrap_or(f64::NAN);
    ExtractorSummary {
        tag: tag.to_string(),
        kind: kind.to_string(),
        fraction,
        pretext_train_accuracy: train,
        pretext_heldout_accuracy: heldout,
        concat_ge_vote: concat >= vote,
        all_converged: report.all_converged,
    }
}
