use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Context as _;
use rdnpc_core::lifting::Trajectory;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const DATA: &str = "data.csv";
pub const DATA_CLEAN: &str = "data_clean.csv";
pub const VALIDATION: &str = "validation.csv";
pub const PE_CERTIFICATE: &str = "pe_certificate.json";
pub const CONSTANTS: &str = "constants.json";
pub const RECORD_CSV: &str = "record.csv";
pub const RECORD_JSON: &str = "record.json";
pub const SUMMARY: &str = "summary.json";
pub const STABILITY_REPORT: &str = "stability_report.json";
pub const CELLS: &str = "cells.csv";
pub const LEMMA1_CSV: &str = "lemma1.csv";
pub const LEMMA1_SUMMARY: &str = "lemma1_summary.json";

pub fn cell_csv(index: usize) -> String {
    format!("cell_{index}.csv")
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic<F>(path: &Path, fill: F) -> anyhow::Result<()>
where
    F: FnOnce(&mut dyn Write) -> anyhow::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path)
        .map_err(|e| e.error)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> anyhow::Result<()> {
    write_atomic(path, |w| Ok(traj.write_csv(w)?))
}

pub fn read_trajectory(path: &Path) -> anyhow::Result<Trajectory> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Trajectory::read_csv(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

/// One header row and one row per serialized item.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        for row in rows {
            csv.serialize(row)?;
        }
        csv.flush()?;
        Ok(())
    })
}
