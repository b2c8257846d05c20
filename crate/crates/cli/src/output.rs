//! Artifact writers. Every file carries the resolved config and the code
//! version: JSON files in a `provenance` field, NDJSON in a leading header
//! record, CSV in a leading `#` comment line.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub version: &'static str,
    pub schema_version: u32,
    pub config: serde_json::Value,
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Pretty JSON with the provenance merged in under `provenance`.
pub fn write_json<T: Serialize>(path: &Path, prov: &Provenance, body: &T) -> anyhow::Result<()> {
    let mut value = serde_json::to_value(body)?;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("provenance".into(), serde_json::to_value(prov)?);
    }
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn write_ndjson<T: Serialize>(
    path: &Path,
    prov: &Provenance,
    records: &[T],
) -> anyhow::Result<()> {
    let mut w = create(path)?;
    #[derive(Serialize)]
    struct Header<'a> {
        record: &'static str,
        #[serde(flatten)]
        provenance: &'a Provenance,
    }
    serde_json::to_writer(
        &mut w,
        &Header {
            record: "header",
            provenance: prov,
        },
    )?;
    writeln!(w)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, prov: &Provenance, rows: &[T]) -> anyhow::Result<()> {
    let mut w = create(path)?;
    writeln!(w, "# {}", serde_json::to_string(prov)?)?;
    holderpo::analysis::write_csv(rows, &mut w)?;
    w.flush()?;
    Ok(())
}
