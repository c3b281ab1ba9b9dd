//! Attention-map export as CSV and binary graymap (P5) images.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::binio::write_atomic;
use crate::data::{attention_focus_score, LabeledImage};
use crate::error::{Error, Result};
use crate::training::Model;

/// One row per grid row, comma separated, CRLF line endings.
pub fn map_csv(values: &[f64], grid: usize) -> Result<String> {
    check_grid(values, grid)?;
    let mut out = String::new();
    for row in values.chunks(grid) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&cells.join(","));
        out.push_str("\r\n");
    }
    Ok(out)
}

/// 8-bit graymap of the map rescaled so its minimum is 0 and its maximum
/// 255. A constant map is all zeros.
pub fn map_pgm(values: &[f64], grid: usize) -> Result<Vec<u8>> {
    check_grid(values, grid)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "map_pgm" });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{grid} {grid}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

fn check_grid(values: &[f64], grid: usize) -> Result<()> {
    if grid == 0 || values.len() != grid * grid {
        return Err(Error::dim(
            "export",
            format!("{} values for a {grid}×{grid} grid", values.len()),
        ));
    }
    Ok(())
}

/// What [`export_attention`] wrote.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub pass1: Vec<f64>,
    pub similarity: Vec<f64>,
    pub pass2: Vec<f64>,
    /// Focus of pass-1, similarity and pass-2 maps, when the image has a mask.
    pub focus: Option<[f64; 3]>,
    pub files: Vec<PathBuf>,
}

impl AttentionExport {
    pub fn summary(&self) -> String {
        match self.focus {
            Some([a, s, b]) => format!("focus pass1={a:.4} similarity={s:.4} pass2={b:.4}"),
            None => "focus unavailable: image has no relevance mask".to_string(),
        }
    }
}

/// Writes `pass1`, `similarity` and `pass2` maps of a top-down model for one
/// image into `dir`, each as `.csv` and `.pgm`, plus `summary.txt`.
pub fn export_attention(
    model: &Model<f32>,
    image: &LabeledImage,
    dir: &Path,
) -> Result<AttentionExport> {
    let grid = model.config().grid();
    let snap = model.inspect(&image.pixels)?;
    let (Some(pass1), Some(similarity), Some(pass2)) = (snap.pass1, snap.similarity, snap.pass2)
    else {
        return Err(Error::Config(format!(
            "attention export needs a top-down model, checkpoint holds `{}`",
            model.method.kind
        )));
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (name, map) in [
        ("pass1", &pass1),
        ("similarity", &similarity),
        ("pass2", &pass2),
    ] {
        let csv = dir.join(format!("{name}.csv"));
        write_atomic(&csv, map_csv(map, grid)?.as_bytes())?;
        let pgm = dir.join(format!("{name}.pgm"));
        write_atomic(&pgm, &map_pgm(map, grid)?)?;
        files.extend([csv, pgm]);
    }
    let focus = match &image.mask {
        Some(mask) => {
            let f = |m: &[f64]| attention_focus_score(m, mask).map(|s| s.value);
            Some([f(&pass1)?, f(&similarity)?, f(&pass2)?])
        }
        None => None,
    };
    let mut export = AttentionExport {
        pass1,
        similarity,
        pass2,
        focus,
        files,
    };
    let summary = dir.join("summary.txt");
    let mut text = export.summary();
    writeln!(text).expect("writing to a String");
    write_atomic(&summary, text.as_bytes())?;
    export.files.push(summary);
    Ok(export)
}
