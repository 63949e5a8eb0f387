use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{PipelineError, StageContext};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Serialize)]
struct FileRecord {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    stage: &'a str,
    version: &'a str,
    config: &'a BTreeMap<String, String>,
    inputs: &'a [FileRecord],
    outputs: Vec<FileRecord>,
    details: serde_json::Value,
}

/// Collects a stage's outputs in a hidden sibling directory and moves them to
/// the final location in [`StageWriter::finish`]. Dropping an unfinished
/// writer removes the temporary directory.
pub struct StageWriter {
    stage: String,
    target: PathBuf,
    tmp: PathBuf,
    inputs: Vec<FileRecord>,
    done: bool,
}

impl StageWriter {
    pub fn begin(stage: &str, target: &Path) -> Result<Self, PipelineError> {
        let name = target
            .file_name()
            .ok_or_else(|| PipelineError::Usage(format!("{stage}: output path {} has no name", target.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent).stage(stage)?;
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).stage(stage)?;
        }
        std::fs::create_dir_all(&tmp).stage(stage)?;
        Ok(Self {
            stage: stage.to_string(),
            target: target.to_path_buf(),
            tmp,
            inputs: Vec::new(),
            done: false,
        })
    }

    pub fn stage(&self) -> &str {
        &self.stage
    }

    /// Path inside the temporary output directory.
    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.tmp.join(rel)
    }

    /// Records an input file and its digest.
    pub fn input(&mut self, path: &Path) -> Result<(), PipelineError> {
        let sha256 = file_digest(path).stage(&self.stage)?;
        self.inputs.push(FileRecord {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    /// Records an upstream stage directory through its `run.json`, which in
    /// turn lists that stage's own inputs.
    pub fn input_stage(&mut self, dir: &Path) -> Result<(), PipelineError> {
        let run = dir.join("run.json");
        if run.exists() {
            self.input(&run)
        } else {
            Ok(())
        }
    }

    /// Writes `run.json` and promotes the directory. Returns the final path.
    pub fn finish(
        mut self,
        config: &BTreeMap<String, String>,
        details: serde_json::Value,
    ) -> Result<PathBuf, PipelineError> {
        let mut outputs = Vec::new();
        collect_files(&self.tmp, &self.tmp, &mut outputs).stage(&self.stage)?;
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let record = RunRecord {
            stage: &self.stage,
            version: VERSION,
            config,
            inputs: &self.inputs,
            outputs,
            details,
        };
        let text = serde_json::to_string_pretty(&record).stage(&self.stage)?;
        std::fs::write(self.tmp.join("run.json"), text + "\n").stage(&self.stage)?;

        let old = self.tmp.with_extension("old");
        if self.target.exists() {
            std::fs::rename(&self.target, &old).stage(&self.stage)?;
        }
        std::fs::rename(&self.tmp, &self.target).stage(&self.stage)?;
        if old.exists() {
            std::fs::remove_dir_all(&old).stage(&self.stage)?;
        }
        self.done = true;
        Ok(self.target.clone())
    }
}

impl Drop for StageWriter {
    fn drop(&mut self) {
        if !self.done {
            let _ = std::fs::remove_dir_all(&self.tmp);
        }
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<FileRecord>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(FileRecord {
                path: path.strip_prefix(root).unwrap().display().to_string(),
                sha256: file_digest(&path)?,
            });
        }
    }
    Ok(())
}
