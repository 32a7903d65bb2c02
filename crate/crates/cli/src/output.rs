//! Output directory layout and writers that stamp every file with the run's
//! provenance.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use circuit_reuse::tasks::TaskId;

use crate::CliError;

pub const TOOL: &str = "circuit-reuse";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Identifies the configuration and seed that produced an output file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_sha256: String, seed: u64) -> Self {
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            config_sha256,
            seed,
        }
    }

    /// Leading comment line of every CSV file.
    pub fn csv_comment(&self) -> String {
        format!(
            "# {} {} config_sha256={} seed={}\n",
            self.tool, self.version, self.config_sha256, self.seed
        )
    }

    pub fn map(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("tool".into(), self.tool.clone()),
            ("version".into(), self.version.clone()),
            ("config_sha256".into(), self.config_sha256.clone()),
            ("seed".into(), self.seed.to_string()),
        ])
    }
}

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    write_bytes(path, (text + "\n").as_bytes())
}

/// Writes a CSV table preceded by the provenance comment.
pub fn write_csv(
    path: &Path,
    prov: &Provenance,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(prov.csv_comment().into_bytes());
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(path, e))?;
    write_bytes(path, &bytes)
}

/// Rows of a CSV written by [`write_csv`], keyed by column name.
pub fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let header = r.headers().map_err(|e| io_err(path, e))?.clone();
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| io_err(path, e))?;
            Ok(header
                .iter()
                .map(String::from)
                .zip(rec.iter().map(String::from))
                .collect())
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Directory name for a K value: `k-0.10`, `k-0.05`, `k-0.125`.
pub fn k_label(k: f64) -> String {
    let two = format!("{k:.2}");
    if two.parse::<f64>() == Ok(k) {
        format!("k-{two}")
    } else {
        format!("k-{k}")
    }
}

/// Fixed paths under the output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("data/vocab.txt")
    }

    pub fn split(&self, task: TaskId, split: &str) -> PathBuf {
        self.root
            .join("data")
            .join(task.name())
            .join(format!("{split}.jsonl"))
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step-{step:06}.ckpt"))
    }

    pub fn training_curve(&self) -> PathBuf {
        self.root.join("training_curve.csv")
    }

    pub fn circuits(&self, ckpt: &str) -> PathBuf {
        self.root.join("circuits").join(ckpt)
    }

    pub fn circuit_dir(&self, ckpt: &str, task: TaskId, k: f64) -> PathBuf {
        self.circuits(ckpt).join(task.name()).join(k_label(k))
    }

    pub fn manifest(&self, ckpt: &str) -> PathBuf {
        self.circuits(ckpt).join("manifest.json")
    }

    pub fn reports(&self, ckpt: &str) -> PathBuf {
        self.root.join("reports").join(ckpt)
    }

    pub fn crosstask(&self, ckpt: &str) -> PathBuf {
        self.root.join("crosstask").join(ckpt)
    }

    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
}

/// Every regular file under `dir`, relative to it, in sorted order.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .collect::<Result<_, _>>()
            .map_err(|e| io_err(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                out.push(path.strip_prefix(base).expect("under base").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}
