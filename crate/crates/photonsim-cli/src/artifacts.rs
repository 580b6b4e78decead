//! Output plumbing. Every file an experiment writes goes through here so it
//! carries the config digest, toolkit version, and seed; identical configs
//! produce byte-identical artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use photonsim::dynamics::FieldRecord;
use photonsim::error::Result;
use photonsim::io::{self, MatrixJson, Metadata};
use photonsim::measurement::{Histogram2d, ShotSet};
use photonsim::shaping::IqWaveform;
use serde_json::{Map, Value};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct Outputs {
    dir: PathBuf,
    meta: Metadata,
}

impl Outputs {
    pub fn create(dir: &Path, config_sha256: &str, seed: u64) -> Result<Outputs> {
        fs::create_dir_all(dir)?;
        let mut meta = Metadata::new();
        meta.insert("config_sha256".into(), config_sha256.into());
        meta.insert("toolkit_version".into(), TOOLKIT_VERSION.into());
        meta.insert("seed".into(), seed.to_string());
        Ok(Outputs { dir: dir.to_path_buf(), meta })
    }

    pub fn metadata(&self, extra: &[(&str, String)]) -> Metadata {
        let mut m = self.meta.clone();
        for (k, v) in extra {
            m.insert((*k).into(), v.clone());
        }
        m
    }

    fn writer(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    pub fn field_csv(
        &self,
        name: &str,
        record: &FieldRecord,
        extra: &[(&str, String)],
    ) -> Result<()> {
        let mut w = self.writer(name)?;
        io::write_field_csv(&mut w, record, &self.metadata(extra))?;
        Ok(w.flush()?)
    }

    pub fn iq_csv(&self, name: &str, iq: &IqWaveform, extra: &[(&str, String)]) -> Result<()> {
        let mut w = self.writer(name)?;
        io::write_iq_csv(&mut w, iq, &self.metadata(extra))?;
        Ok(w.flush()?)
    }

    pub fn histogram_csv(
        &self,
        name: &str,
        hist: &Histogram2d,
        extra: &[(&str, String)],
    ) -> Result<()> {
        let mut w = self.writer(name)?;
        io::write_histogram_csv(&mut w, hist, &self.metadata(extra))?;
        Ok(w.flush()?)
    }

    pub fn shots_bin(&self, name: &str, shots: &ShotSet) -> Result<()> {
        let mut w = self.writer(name)?;
        io::write_shots(&mut w, shots)?;
        Ok(w.flush()?)
    }

    pub fn matrix_json(&self, name: &str, doc: &MatrixJson) -> Result<()> {
        let mut w = self.writer(name)?;
        io::write_matrix_json(&mut w, doc)?;
        Ok(w.flush()?)
    }

    /// Plain column table; callers preformat the cells so mixed text and
    /// numeric columns stay simple.
    pub fn table_csv(
        &self,
        name: &str,
        columns: &[&str],
        rows: &[Vec<String>],
        extra: &[(&str, String)],
    ) -> Result<()> {
        let mut w = self.writer(name)?;
        for (k, v) in self.metadata(extra) {
            writeln!(w, "# {k} = {v}")?;
        }
        writeln!(w, "{}", columns.join(","))?;
        for row in rows {
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(w.flush()?)
    }

    pub fn summary(&self, kind: &str, results: Map<String, Value>) -> Result<PathBuf> {
        let mut doc = Map::new();
        doc.insert("kind".into(), Value::String(kind.into()));
        doc.insert("metadata".into(), serde_json::to_value(&self.meta)?);
        doc.insert("results".into(), Value::Object(results));
        let mut w = self.writer("summary.json")?;
        serde_json::to_writer_pretty(&mut w, &Value::Object(doc))?;
        writeln!(w)?;
        w.flush()?;
        Ok(self.dir.join("summary.json"))
    }
}

/// Shortest round-trip decimal form, the same float texture the CSV
/// writers in the library use.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}
