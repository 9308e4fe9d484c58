//! Manifests and schema-tagged CSV/JSON writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

pub const MANIFEST_SCHEMA: &str = "mita-manifest/v1";
pub const BENCH_SCHEMA: &str = "mita-bench/v1";
pub const HISTORY_SCHEMA: &str = "mita-history/v1";
pub const SWEEP_CSV_SCHEMA: &str = "mita-sweep-grid/v1";
pub const SWEEP_SCHEMA: &str = "mita-sweep/v1";
pub const DIAG_SCHEMA: &str = "mita-diag/v1";
pub const CHECK_SCHEMA: &str = "mita-check/v1";

#[derive(Serialize)]
pub struct RunManifest {
    pub schema: &'static str,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    pub threads: usize,
    pub timestamp_unix: u64,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub results: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, config: impl Serialize, seed: u64) -> Result<Self> {
        Ok(Self {
            schema: MANIFEST_SCHEMA,
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
            timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            outputs: Vec::new(),
            results: None,
        })
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// `<output>.manifest.json` next to a single output file.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// CSV writer whose first line is `# schema: <schema>`, followed by the header.
pub struct SchemaCsv {
    inner: csv::Writer<BufWriter<File>>,
}

impl SchemaCsv {
    pub fn create(path: &Path, schema: &str, header: &[&str]) -> Result<Self> {
        let mut w = create(path)?;
        writeln!(w, "# schema: {schema}")?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        inner.write_record(header)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn row(&mut self, record: impl Serialize) -> Result<()> {
        self.inner.serialize(record)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
