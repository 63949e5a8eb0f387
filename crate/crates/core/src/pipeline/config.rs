use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::classify::{KernelSpec, SvmConfig};
use crate::evaluation::ExperimentPlan;
use crate::nnet::{NetworkSpec, OptimizerKind, TrainConfig};
use crate::pretext::{DuplicationClass, PretextSampling};
use crate::projection::TsneConfig;
use crate::synthgen::SynthConfig;

use super::PipelineError;

/// Environment variable consulted for `seed` when neither a flag nor the
/// config file sets it.
pub const SEED_ENV: &str = "DUPLESS_SEED";

/// Every recognised key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("out_dir", "run", "output directory of run-all"),
    ("data_dir", "", "dataset directory with manifest.csv; empty means generate synthetic data"),
    ("slices_per_class", "20", "synthetic slices per tissue class"),
    ("slice_width", "512", "synthetic slice width in pixels"),
    ("slice_height", "384", "synthetic slice height in pixels"),
    ("patch_side", "128", "patch side in pixels (even)"),
    ("image_format", "png", "image format for written patches: png or ppm"),
    ("fractions", "0.10,0.15", "comma-separated pretext slice fractions, one extractor each"),
    ("pretext_pool", "train", "slices eligible for pretext sampling: train (hold-out training split) or all"),
    ("block_channels", "8,16,16,32,32,64,64", "output channels of each conv block"),
    ("batch_size", "16", "pretext minibatch size"),
    ("learning_rate", "0.0001", "pretext learning rate"),
    ("epochs", "60", "pretext training epochs"),
    ("optimizer", "adam", "adam or sgd"),
    ("patch_svm_c", "10", "C of the patch-level RBF SVM"),
    ("patch_svm_gamma", "0.001", "gamma of the patch-level RBF SVM"),
    ("slice_svm_c", "10", "C of the slice-level linear SVM"),
    ("svm_tolerance", "0.001", "SMO stopping tolerance on the KKT gap"),
    ("svm_max_passes", "1000", "SMO iteration budget in multiples of n"),
    ("standardize", "false", "z-score features on each training split"),
    ("holdout_train_fraction", "0.75", "training share of the patch-level hold-out split"),
    ("folds", "4", "cross-validation folds for slice-level SVMs"),
    ("tsne_perplexity", "30", "t-SNE perplexity"),
    ("tsne_iterations", "1000", "t-SNE iterations"),
    ("tsne_learning_rate", "200", "t-SNE learning rate"),
    ("external_embeddings", "", "EMB1 or CSV file of externally computed patch embeddings"),
    ("external_tag", "external", "extractor name used for the external embeddings"),
    ("seed", "0", "master seed"),
];

fn default_of(key: &str) -> &'static str {
    KEYS.iter().find(|k| k.0 == key).map(|k| k.1).expect("known key")
}

/// Slices the pretext sample may come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretextPool {
    /// The training side of the hold-out split, so no pretext slice is ever
    /// a hold-out test slice.
    Train,
    All,
}

impl std::str::FromStr for PretextPool {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "all" => Ok(Self::All),
            other => Err(PipelineError::Usage(format!("pretext_pool: {other:?} is not train or all"))),
        }
    }
}

/// Flat key=value configuration shared by all subcommands.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub slices_per_class: usize,
    pub slice_width: usize,
    pub slice_height: usize,
    pub patch_side: usize,
    pub image_format: String,
    pub fractions: Vec<f64>,
    pub pretext_pool: PretextPool,
    pub block_channels: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub patch_svm_c: f64,
    pub patch_svm_gamma: f64,
    pub slice_svm_c: f64,
    pub svm_tolerance: f64,
    pub svm_max_passes: usize,
    pub standardize: bool,
    pub holdout_train_fraction: f64,
    pub folds: usize,
    pub tsne_perplexity: f64,
    pub tsne_iterations: usize,
    pub tsne_learning_rate: f64,
    pub external_embeddings: Option<PathBuf>,
    pub external_tag: String,
    pub seed: u64,
    /// Effective value of every key, for provenance records.
    values: BTreeMap<String, String>,
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| PipelineError::Usage(format!("config line {}: expected key=value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, PipelineError> {
    v.parse()
        .map_err(|_| PipelineError::Usage(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, PipelineError> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Resolves every key as flag > config file > (`DUPLESS_SEED` for `seed`) >
    /// default, then validates. Unknown keys are rejected.
    pub fn resolve(
        flags: &BTreeMap<String, String>,
        file: Option<&BTreeMap<String, String>>,
        env_seed: Option<&str>,
    ) -> Result<Self, PipelineError> {
        let empty = BTreeMap::new();
        let file = file.unwrap_or(&empty);
        for k in flags.keys().chain(file.keys()) {
            if !KEYS.iter().any(|e| e.0 == k) {
                return Err(PipelineError::Usage(format!("unknown config key {k:?}")));
            }
        }
        let mut values = BTreeMap::new();
        for &(k, default, _) in KEYS {
            let v = flags
                .get(k)
                .or_else(|| file.get(k))
                .map(String::as_str)
                .or(if k == "seed" { env_seed } else { None })
                .unwrap_or(default);
            values.insert(k.to_string(), v.to_string());
        }
        Self::from_values(values)
    }

    /// Defaults only, with the given overrides.
    pub fn with_overrides(pairs: &[(&str, &str)]) -> Result<Self, PipelineError> {
        let flags = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        Self::resolve(&flags, None, None)
    }

    /// Reads a config file (if given) and the seed environment variable.
    pub fn load(flags: &BTreeMap<String, String>, config_file: Option<&Path>) -> Result<Self, PipelineError> {
        let file = match config_file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| PipelineError::Usage(format!("config file {}: {e}", p.display())))?;
                Some(parse_config_text(&text)?)
            }
            None => None,
        };
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(flags, file.as_ref(), env.as_deref())
    }

    fn from_values(values: BTreeMap<String, String>) -> Result<Self, PipelineError> {
        let g = |k: &str| values[k].as_str();
        let cfg = Self {
            out_dir: PathBuf::from(g("out_dir")),
            data_dir: opt_path(g("data_dir")),
            slices_per_class: parse("slices_per_class", g("slices_per_class"))?,
            slice_width: parse("slice_width", g("slice_width"))?,
            slice_height: parse("slice_height", g("slice_height"))?,
            patch_side: parse("patch_side", g("patch_side"))?,
            image_format: g("image_format").to_ascii_lowercase(),
            fractions: parse_list("fractions", g("fractions"))?,
            pretext_pool: g("pretext_pool").parse()?,
            block_channels: parse_list("block_channels", g("block_channels"))?,
            batch_size: parse("batch_size", g("batch_size"))?,
            learning_rate: parse("learning_rate", g("learning_rate"))?,
            epochs: parse("epochs", g("epochs"))?,
            optimizer: g("optimizer")
                .parse()
                .map_err(|_| PipelineError::Usage(format!("optimizer: unknown {:?}", g("optimizer"))))?,
            patch_svm_c: parse("patch_svm_c", g("patch_svm_c"))?,
            patch_svm_gamma: parse("patch_svm_gamma", g("patch_svm_gamma"))?,
            slice_svm_c: parse("slice_svm_c", g("slice_svm_c"))?,
            svm_tolerance: parse("svm_tolerance", g("svm_tolerance"))?,
            svm_max_passes: parse("svm_max_passes", g("svm_max_passes"))?,
            standardize: parse("standardize", g("standardize"))?,
            holdout_train_fraction: parse("holdout_train_fraction", g("holdout_train_fraction"))?,
            folds: parse("folds", g("folds"))?,
            tsne_perplexity: parse("tsne_perplexity", g("tsne_perplexity"))?,
            tsne_iterations: parse("tsne_iterations", g("tsne_iterations"))?,
            tsne_learning_rate: parse("tsne_learning_rate", g("tsne_learning_rate"))?,
            external_embeddings: opt_path(g("external_embeddings")),
            external_tag: g("external_tag").to_string(),
            seed: parse("seed", g("seed"))?,
            values,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every key against its module's invariants.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let usage = |e: &dyn std::fmt::Display| PipelineError::Usage(e.to_string());
        if self.data_dir.is_none() {
            self.synth_config().validate().map_err(|e| usage(&e))?;
        }
        if !matches!(self.image_format.as_str(), "png" | "ppm") {
            return Err(PipelineError::Usage(format!("image_format: {:?} is not png or ppm", self.image_format)));
        }
        if self.fractions.is_empty() {
            return Err(PipelineError::Usage("fractions: need at least one".into()));
        }
        for &f in &self.fractions {
            PretextSampling::new(f, 0).map_err(|e| usage(&e))?;
        }
        let tags: Vec<String> = self.fractions.iter().map(|&f| extractor_tag(f)).collect();
        if tags.iter().enumerate().any(|(i, t)| tags[..i].contains(t)) {
            return Err(PipelineError::Usage("fractions: two fractions map to the same tag".into()));
        }
        self.network_spec().map_err(|e| usage(&e))?;
        self.train_config(0).validate().map_err(|e| usage(&e))?;
        self.patch_svm().validate().map_err(|e| usage(&e))?;
        self.slice_svm().validate().map_err(|e| usage(&e))?;
        if !(self.holdout_train_fraction > 0.0 && self.holdout_train_fraction < 1.0) {
            return Err(PipelineError::Usage("holdout_train_fraction must be in (0, 1)".into()));
        }
        if self.folds < 2 {
            return Err(PipelineError::Usage("folds must be >= 2".into()));
        }
        self.tsne_config(0).validate().map_err(|e| usage(&e))?;
        if self.external_tag.is_empty() || self.external_tag.contains([',', '/']) {
            return Err(PipelineError::Usage("external_tag must be non-empty without ',' or '/'".into()));
        }
        Ok(())
    }

    /// Effective value of every key.
    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn is_default(&self, key: &str) -> bool {
        self.values[key] == default_of(key)
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            slices_per_class: self.slices_per_class,
            slice_width: self.slice_width,
            slice_height: self.slice_height,
            patch_side: self.patch_side,
            seed: self.seed,
            ..SynthConfig::default()
        }
    }

    pub fn network_spec(&self) -> Result<NetworkSpec, crate::nnet::NnetError> {
        NetworkSpec::new(self.patch_side, self.block_channels.clone(), DuplicationClass::COUNT)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            optimizer: self.optimizer,
            seed,
        }
    }

    pub fn patch_svm(&self) -> SvmConfig {
        SvmConfig {
            c: self.patch_svm_c,
            kernel: KernelSpec::Rbf {
                gamma: self.patch_svm_gamma,
            },
            tolerance: self.svm_tolerance,
            max_passes: self.svm_max_passes,
        }
    }

    pub fn slice_svm(&self) -> SvmConfig {
        SvmConfig {
            c: self.slice_svm_c,
            kernel: KernelSpec::Linear,
            tolerance: self.svm_tolerance,
            max_passes: self.svm_max_passes,
        }
    }

    pub fn tsne_config(&self, seed: u64) -> TsneConfig {
        TsneConfig {
            perplexity: self.tsne_perplexity,
            iterations: self.tsne_iterations,
            learning_rate: self.tsne_learning_rate,
            seed,
            ..TsneConfig::default()
        }
    }

    pub fn experiment_plan(&self, extractor: &str) -> ExperimentPlan {
        ExperimentPlan {
            extractor: extractor.to_string(),
            seed: stage_seed(self.seed, "split"),
            holdout_train_fraction: self.holdout_train_fraction,
            folds: self.folds,
            patch_svm: self.patch_svm(),
            slice_svm: self.slice_svm(),
            standardize: self.standardize,
        }
    }
}

/// Per-stage seed derived from the master seed and a stage name.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let h = stage
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    crate::synthgen::splitmix64(master ^ h)
}

/// `S-DNet-<percent>` for a pretext fraction, e.g. 0.15 → `S-DNet-15`.
pub fn extractor_tag(fraction: f64) -> String {
    let pct = fraction * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("S-DNet-{}", pct.round() as u64)
    } else {
        format!("S-DNet-{}", format!("{pct:.2}").trim_end_matches('0'))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::resolve(&BTreeMap::new(), None, None).unwrap();
        assert_eq!(c.fractions, vec![0.10, 0.15]);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.epochs, 60);
        assert_eq!(c.patch_svm(), SvmConfig::patch_level());
        assert_eq!(c.slice_svm(), SvmConfig::slice_level());
        assert_eq!(c.values().len(), KEYS.len());
    }

    #[test]
    fn precedence_flag_file_env_default() {
        let file = map(&[("epochs", "5"), ("seed", "7")]);
        let flags = map(&[("epochs", "3")]);
        let c = RunConfig::resolve(&flags, Some(&file), Some("9")).unwrap();
        assert_eq!((c.epochs, c.seed), (3, 7));
        let c = RunConfig::resolve(&BTreeMap::new(), None, Some("9")).unwrap();
        assert_eq!(c.seed, 9);
        let c = RunConfig::resolve(&map(&[("seed", "1")]), None, Some("9")).unwrap();
        assert_eq!(c.seed, 1);
    }

    #[test]
    fn invalid_keys_fail_fast() {
        for bad in [
            ("bogus", "1"),
            ("epochs", "0"),
            ("patch_side", "127"),
            ("fractions", "0"),
            ("fractions", "0.1,0.1"),
            ("patch_svm_gamma", "-1"),
            ("pretext_pool", "test"),
            ("block_channels", "8,16,16,32,32,64,64,64"),
            ("optimizer", "rmsprop"),
            ("folds", "1"),
            ("learning_rate", "abc"),
        ] {
            let r = RunConfig::with_overrides(&[bad]);
            assert!(matches!(r, Err(PipelineError::Usage(_))), "{bad:?} accepted");
        }
    }

    #[test]
    fn config_text() {
        let m = parse_config_text("# comment\nepochs = 4\n\nseed=2 # trailing\n").unwrap();
        assert_eq!(m, map(&[("epochs", "4"), ("seed", "2")]));
        assert!(parse_config_text("novalue\n").is_err());
    }

    #[test]
    fn tags() {
        assert_eq!(extractor_tag(0.10), "S-DNet-10");
        assert_eq!(extractor_tag(0.15), "S-DNet-15");
        assert_eq!(extractor_tag(0.125), "S-DNet-12.5");
        assert_ne!(stage_seed(1, "split"), stage_seed(1, "tsne"));
    }
}
