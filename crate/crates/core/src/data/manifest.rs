//! Directory datasets: PPM/PGM images listed in a `relative_path,identity,camera,modality` manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::imaging::{read_pnm, write_pnm};
use crate::modality::Modality;

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Reads `dir/manifest.csv`.
pub fn ingest_directory(dir: &Path, split: Split) -> Result<Dataset> {
    ingest_with_manifest(dir, &dir.join(MANIFEST_FILE), split)
}

/// Image paths in the manifest are relative to `dir`. Blank lines are ignored.
pub fn ingest_with_manifest(dir: &Path, manifest: &Path, split: Split) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest)?;
    let fail = |line: usize, message: String| Error::Manifest {
        path: manifest.to_path_buf(),
        line,
        message,
    };
    let mut samples = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        let [rel, identity, camera, modality] = fields[..] else {
            return Err(fail(line, format!("expected 4 fields, found {}", fields.len())));
        };
        let identity: u32 = identity
            .parse()
            .map_err(|_| fail(line, format!("bad identity {identity:?}")))?;
        let camera: u32 = camera
            .parse()
            .map_err(|_| fail(line, format!("bad camera {camera:?}")))?;
        let modality: Modality = modality.parse().map_err(|e: Error| fail(line, e.to_string()))?;
        let path = dir.join(rel);
        if !path.is_file() {
            return Err(fail(line, format!("missing file {}", path.display())));
        }
        let image = read_pnm(&path).map_err(|e| fail(line, e.to_string()))?;
        samples.push(Sample::new(image, identity, camera, modality).map_err(|e| fail(line, e.to_string()))?);
    }
    Dataset::new(samples, split)
}

fn file_name(i: usize, s: &Sample) -> PathBuf {
    let ext = if s.modality == Modality::Visible { "ppm" } else { "pgm" };
    PathBuf::from(format!(
        "{:05}_{:04}_{}_{}.{ext}",
        i,
        s.identity,
        s.camera,
        s.modality.tag()
    ))
}

/// Writes every image plus `manifest.csv` into `dir`, creating it if needed.
/// The manifest is written last, so a complete manifest implies complete images.
pub fn export_directory(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, s) in ds.samples().iter().enumerate() {
        let name = file_name(i, s);
        write_pnm(&dir.join(&name), &s.image)?;
        writeln!(
            manifest,
            "{},{},{},{}",
            name.display(),
            s.identity,
            s.camera,
            s.modality.tag()
        )
        .expect("writing to a String");
    }
    crate::persist::write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    Ok(())
}
