//! Alignment heatmaps as labelled CSV plus an optional 8-bit PGM.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::alignment::{sidecar_path, AlignmentMatrix};
use crate::error::Result;
use crate::linalg::Matrix;

/// Gray level of every pixel when the matrix is constant.
pub const PGM_MID_GRAY: u8 = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub pgm: Option<PathBuf>,
}

/// Binary P5 image, one pixel per entry, min-max scaled to 0..=255.
pub fn write_pgm(m: &Matrix, path: &Path) -> Result<()> {
    let (rows, cols) = m.shape();
    let min = m.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let max = m.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    let pixels: Vec<u8> = m
        .as_slice()
        .iter()
        .map(|&v| if max > min { ((v - min) / (max - min) * 255.0).round() as u8 } else { PGM_MID_GRAY })
        .collect();
    w.write_all(&pixels)?;
    w.flush()?;
    Ok(())
}

/// Writes `path` (CSV), its JSON sidecar and, with `pgm`, the same name with
/// a `.pgm` extension. Rows are document tokens.
pub fn export_heatmap(
    a: &AlignmentMatrix,
    doc_labels: &[String],
    query_labels: &[String],
    path: &Path,
    pgm: bool,
) -> Result<HeatmapFiles> {
    a.write_csv(path, doc_labels, query_labels)?;
    let pgm_path = if pgm {
        let p = path.with_extension("pgm");
        write_pgm(&a.matrix, &p)?;
        Some(p)
    } else {
        None
    };
    Ok(HeatmapFiles { csv: path.to_path_buf(), json: sidecar_path(path), pgm: pgm_path })
}
