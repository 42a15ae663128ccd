//! Self-describing artifacts.
//!
//! Every file a stage writes starts with its metadata: a `{"_meta":...}`
//! line for JSON-lines files, a `# {"_meta":...}` line for CSV and text
//! checkpoints, and a top-level `_meta` key for JSON reports. Files are
//! staged under temporary names and renamed only once the whole stage has
//! succeeded, so a failed stage leaves no partial outputs behind.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub stage: String,
    pub version: u32,
    /// Cumulative digest of this stage's configuration and its upstream.
    pub digest: String,
    pub upstream: BTreeMap<String, String>,
    /// Every configuration value in force when the artifact was written.
    pub config: BTreeMap<String, String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("missing artifact {path}: run the `{stage}` stage first")]
    Missing { path: String, stage: String },
    #[error(
        "{path} was produced by `{stage}` under a different configuration \
         (digest {found}, expected {expected}); rerun `{stage}` or pass --force"
    )]
    DigestMismatch {
        path: String,
        stage: String,
        found: String,
        expected: String,
    },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

fn meta_line(meta: &Meta) -> String {
    serde_json::json!({ "_meta": meta }).to_string()
}

pub fn jsonl_header(meta: &Meta) -> String {
    meta_line(meta) + "\n"
}

pub fn comment_header(meta: &Meta) -> String {
    format!("# {}\n", meta_line(meta))
}

/// Pretty JSON object with `_meta` merged in at the top level.
pub fn json_with_meta<T: Serialize>(meta: &Meta, body: &T) -> String {
    let mut v = serde_json::to_value(body).expect("report serializes");
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("_meta".into(), serde_json::to_value(meta).expect("meta serializes"));
    }
    serde_json::to_string_pretty(&v).expect("report serializes") + "\n"
}

/// Artifact text split into metadata and body.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub meta: Meta,
    pub body: String,
}

/// Reads an artifact written by `producer`, failing with a named error when
/// it is absent.
pub fn load(path: &Path, producer: &str) -> Result<Loaded, ArtifactError> {
    let text = fs::read_to_string(path).map_err(|source| {
        if source.kind() == io::ErrorKind::NotFound {
            ArtifactError::Missing {
                path: path.display().to_string(),
                stage: producer.into(),
            }
        } else {
            ArtifactError::Io {
                path: path.display().to_string(),
                source,
            }
        }
    })?;
    let malformed = |reason: &str| ArtifactError::Malformed {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let line = first.strip_prefix("# ").unwrap_or(first);
    if line.starts_with("{\"_meta\"") {
        #[derive(Deserialize)]
        struct Wrapper {
            #[serde(rename = "_meta")]
            meta: Meta,
        }
        let w: Wrapper = serde_json::from_str(line).map_err(|e| malformed(&format!("bad metadata line: {e}")))?;
        return Ok(Loaded {
            meta: w.meta,
            body: rest.to_string(),
        });
    }
    // A JSON report keeps its metadata under a top-level key.
    let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|_| malformed("no metadata header"))?;
    let meta = v
        .as_object_mut()
        .and_then(|m| m.remove("_meta"))
        .ok_or_else(|| malformed("no metadata header"))?;
    let meta = serde_json::from_value(meta).map_err(|e| malformed(&format!("bad metadata: {e}")))?;
    Ok(Loaded {
        meta,
        body: v.to_string(),
    })
}

/// Checks an upstream artifact against the digest the current
/// configuration would produce. With `force` a mismatch only warns.
pub fn check(path: &Path, loaded: &Loaded, stage: &str, expected: &str, force: bool) -> Result<(), ArtifactError> {
    if loaded.meta.stage != stage {
        return Err(ArtifactError::Malformed {
            path: path.display().to_string(),
            reason: format!("written by `{}`, expected `{stage}`", loaded.meta.stage),
        });
    }
    if loaded.meta.digest != expected {
        let err = ArtifactError::DigestMismatch {
            path: path.display().to_string(),
            stage: stage.into(),
            found: loaded.meta.digest.clone(),
            expected: expected.into(),
        };
        if !force {
            return Err(err);
        }
        eprintln!("warning: {err} (continuing because of --force)");
    }
    Ok(())
}

/// Files staged for an all-or-nothing commit.
#[derive(Debug, Default)]
pub struct Staging {
    files: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

fn temp_name(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

impl Staging {
    pub fn write(&mut self, path: &Path, contents: &str) -> Result<(), ArtifactError> {
        let io_err = |source| ArtifactError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let tmp = temp_name(path);
        fs::write(&tmp, contents).map_err(io_err)?;
        self.files.push((tmp, path.to_path_buf()));
        Ok(())
    }

    /// Renames every staged file into place.
    pub fn commit(mut self) -> Result<Vec<PathBuf>, ArtifactError> {
        let mut done = Vec::with_capacity(self.files.len());
        for (tmp, dest) in &self.files {
            fs::rename(tmp, dest).map_err(|source| ArtifactError::Io {
                path: dest.display().to_string(),
                source,
            })?;
            done.push(dest.clone());
        }
        self.committed = true;
        Ok(done)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            for (tmp, _) in &self.files {
                let _ = fs::remove_file(tmp);
            }
        }
    }
}
