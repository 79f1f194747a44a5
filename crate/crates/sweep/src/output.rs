//! Run directories and the files written into them.
//!
//! Every file in a run directory is a pure function of the config and the
//! seed. The only wall-clock dependence is the directory name itself.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use coopspin_core::analysis::FitResult;
use coopspin_core::sensing::SpectrumMetadata;

use crate::config::{ExperimentConfig, Format};
use crate::experiments::Outcome;
use crate::record::{self, SweepRecord};

/// `<base>/<UTC timestamp>-<first 8 hex digits of the config hash>`. A
/// numeric suffix keeps two runs started in the same second apart.
pub fn create_run_dir(base: &Path, config_hash: &str) -> io::Result<PathBuf> {
    fs::create_dir_all(base)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let stem = format!("{stamp}-{}", &config_hash[..8.min(config_hash.len())]);
    for n in 1.. {
        let name = if n == 1 {
            stem.clone()
        } else {
            format!("{stem}-{n}")
        };
        let dir = base.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!()
}

fn create(path: &Path) -> io::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_table(dir: &Path, stem: &str, rows: &[SweepRecord], format: Format) -> io::Result<String> {
    match format {
        Format::Csv => {
            let name = format!("{stem}.csv");
            record::write_csv(rows, create(&dir.join(&name))?).map_err(io::Error::other)?;
            Ok(name)
        }
        Format::Json => {
            let name = format!("{stem}.json");
            fs::write(dir.join(&name), record::to_json(rows) + "\n")?;
            Ok(name)
        }
    }
}

#[derive(Serialize)]
struct Fits<'a> {
    fits: &'a BTreeMap<String, FitResult>,
    summary: &'a BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct SpectrumEntry<'a> {
    file: String,
    #[serde(flatten)]
    metadata: &'a SpectrumMetadata,
}

#[derive(Serialize)]
struct Metadata<'a> {
    tool: &'static str,
    version: &'static str,
    experiment: &'a str,
    config_hash: &'a str,
    seed: Option<u64>,
    format: Format,
    files: &'a [String],
    spectra: Vec<SpectrumEntry<'a>>,
    failures: &'a [String],
    config: &'a ExperimentConfig,
}

/// Writes all artifacts of `outcome` into `dir` and returns the file names.
pub fn write_outcome(
    dir: &Path,
    outcome: &Outcome,
    cfg: &ExperimentConfig,
    format: Format,
) -> io::Result<Vec<String>> {
    let mut files = vec![write_table(dir, "table", &outcome.records, format)?];
    for (name, rows) in &outcome.tables {
        files.push(write_table(dir, name, rows, format)?);
    }

    let fits = serde_json::to_string_pretty(&Fits {
        fits: &outcome.fits,
        summary: &outcome.summary,
    })
    .map_err(io::Error::other)?;
    fs::write(dir.join("fits.json"), fits + "\n")?;
    files.push("fits.json".into());

    let mut spectra = Vec::new();
    for s in &outcome.spectra {
        let file = match format {
            Format::Csv => {
                let name = format!("{}.csv", s.name);
                let mut w = create(&dir.join(&name))?;
                s.spectrum.write_csv(&mut w)?;
                w.flush()?;
                name
            }
            Format::Json => {
                let name = format!("{}.json", s.name);
                fs::write(dir.join(&name), s.spectrum.to_json(&s.metadata) + "\n")?;
                name
            }
        };
        files.push(file.clone());
        spectra.push(SpectrumEntry {
            file,
            metadata: &s.metadata,
        });
    }

    if let Some(ts) = &outcome.timeseries {
        let mut w = create(&dir.join("timeseries.csv"))?;
        ts.write_csv(&mut w)?;
        w.flush()?;
        files.push("timeseries.csv".into());
    }

    files.push("metadata.json".into());
    let meta = Metadata {
        tool: "coopspin",
        version: env!("CARGO_PKG_VERSION"),
        experiment: &outcome.experiment,
        config_hash: &cfg.hash(),
        seed: cfg.seed,
        format,
        files: &files,
        spectra,
        failures: &outcome.failures,
        config: cfg,
    };
    let meta = serde_json::to_string_pretty(&meta).map_err(io::Error::other)?;
    fs::write(dir.join("metadata.json"), meta + "\n")?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::experiments::run_feedback_sweep;

    #[test]
    fn run_dirs_do_not_collide() {
        let base = tempfile::tempdir().unwrap();
        let a = create_run_dir(base.path(), "0123456789abcdef").unwrap();
        let b = create_run_dir(base.path(), "0123456789abcdef").unwrap();
        assert_ne!(a, b);
        let name = a.file_name().unwrap().to_str().unwrap();
        assert!(
            name.ends_with("-01234567") || name.contains("-01234567-"),
            "{name}"
        );
    }

    #[test]
    fn writes_table_fits_and_metadata() {
        let cfg = parse_config("[system]\n[feedback]\nxi_grid = [0.0, 0.01]\n").unwrap();
        let out = run_feedback_sweep(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_outcome(dir.path(), &out, &cfg, Format::Csv).unwrap();
        assert_eq!(files, ["table.csv", "fits.json", "metadata.json"]);
        let table = fs::read_to_string(dir.path().join("table.csv")).unwrap();
        assert_eq!(table.lines().count(), 3);
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("metadata.json")).unwrap())
                .unwrap();
        assert_eq!(meta["config_hash"], cfg.hash());
        assert_eq!(meta["experiment"], "feedback-sweep");
    }
}
