//! `manifest.csv`: one row per image written by `synth` or `corrupt`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// File name relative to the manifest's directory.
    pub path: String,
    /// `clean` or a corruption name.
    pub kind: String,
    /// 0 for clean images, 1 to 5 otherwise.
    pub severity: u8,
    /// Where the image came from.
    pub source: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    crate::codec::write_atomic(path, &bytes)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        let rows = vec![
            ManifestRow { path: "a.png".into(), kind: "clean".into(), severity: 0, source: "synth:1:0".into() },
            ManifestRow { path: "b, c.png".into(), kind: "gaussian_noise".into(), severity: 3, source: "x/a.png".into() },
        ];
        write_manifest(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("path,kind,severity,source\n"));
        assert_eq!(read_manifest(&p).unwrap(), rows);
    }
}
