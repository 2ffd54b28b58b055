//! Cell-level annotation files and synthetic glyph truth. Both are
//! tab-separated:
//!
//! ```text
//! # millie-cells v1
//! types  normal  lymphoblast  myeloblast
//! cell  <patch path>  <type>
//! ```
//!
//! ```text
//! # millie-truth v1
//! glyph  <field path>  <row>  <col>  <radius>  <type>
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::synth::{CellType, SyntheticDataset};
use super::{io_err, manifest, DataError};
use crate::dataio::manifest::{DatasetManifest, ManifestKind, Sample};

pub const CELLS_HEADER: &str = "# millie-cells v1";
pub const TRUTH_HEADER: &str = "# millie-truth v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellAnnotation {
    pub path: PathBuf,
    pub cell_type: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellAnnotationSet {
    pub cell_types: Vec<String>,
    pub cells: Vec<CellAnnotation>,
}

impl CellAnnotationSet {
    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.cell_types.iter().position(|t| t == name)
    }
}

fn rel(p: &Path, base: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

pub fn write_annotations(set: &CellAnnotationSet, path: &Path) -> Result<(), DataError> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = format!("{CELLS_HEADER}\ntypes\t{}\n", set.cell_types.join("\t"));
    for c in &set.cells {
        out.push_str(&format!("cell\t{}\t{}\n", rel(&c.path, base), c.cell_type));
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn load_annotations(path: &Path) -> Result<CellAnnotationSet, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut lines = text.lines();
    let mut problems = Vec::new();
    if lines.next() != Some(CELLS_HEADER) {
        problems.push(format!("first line must be `{CELLS_HEADER}`"));
    }
    let mut types: Option<Vec<String>> = None;
    let mut cells = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        match parts.as_slice() {
            ["types", rest @ ..] => types = Some(rest.iter().map(|s| s.to_string()).collect()),
            ["cell", p, t] => cells.push(CellAnnotation {
                path: base.join(p),
                cell_type: t.to_string(),
            }),
            _ => problems.push(format!("line {}: unrecognised record", no + 2)),
        }
    }
    let cell_types = types.unwrap_or_default();
    if cell_types.is_empty() {
        problems.push("missing `types` line".into());
    }
    for c in &cells {
        if !cell_types.contains(&c.cell_type) {
            problems.push(format!("{}: unknown cell type `{}`", c.path.display(), c.cell_type));
        }
    }
    if problems.is_empty() {
        Ok(CellAnnotationSet { cell_types, cells })
    } else {
        Err(DataError::Manifest {
            path: path.to_path_buf(),
            problems,
        })
    }
}

/// One placed glyph of a synthetic field image.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphRecord {
    pub field: PathBuf,
    /// (row, col)
    pub center: (f64, f64),
    pub radius: f64,
    pub cell_type: CellType,
}

pub fn write_truth(records: &[GlyphRecord], path: &Path) -> Result<(), DataError> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = format!("{TRUTH_HEADER}\n");
    for g in records {
        out.push_str(&format!(
            "glyph\t{}\t{}\t{}\t{}\t{}\n",
            rel(&g.field, base),
            g.center.0,
            g.center.1,
            g.radius,
            g.cell_type.name()
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn load_truth(path: &Path) -> Result<Vec<GlyphRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut lines = text.lines();
    let bad = |m: String| DataError::Manifest {
        path: path.to_path_buf(),
        problems: vec![m],
    };
    if lines.next() != Some(TRUTH_HEADER) {
        return Err(bad(format!("first line must be `{TRUTH_HEADER}`")));
    }
    let mut out = Vec::new();
    for (no, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let parts: Vec<&str> = line.split('\t').collect();
        let parsed = match parts.as_slice() {
            ["glyph", f, r, c, rad, t] => (|| {
                Some(GlyphRecord {
                    field: base.join(f),
                    center: (r.parse().ok()?, c.parse().ok()?),
                    radius: rad.parse().ok()?,
                    cell_type: CellType::parse(t)?,
                })
            })(),
            _ => None,
        };
        out.push(parsed.ok_or_else(|| bad(format!("line {}: malformed glyph record", no + 2)))?);
    }
    Ok(out)
}

/// Writes field PNGs, a fields manifest and the glyph truth file under
/// `dir`: `fields/<sample>/<field>.png`, `manifest.tsv`, `truth.tsv`.
pub fn write_synthetic(data: &SyntheticDataset, dir: &Path, note: &str) -> Result<(DatasetManifest, Vec<GlyphRecord>), DataError> {
    let mut samples = Vec::new();
    let mut truth = Vec::new();
    for s in &data.samples {
        let sdir = dir.join("fields").join(&s.id);
        fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
        let mut paths = Vec::new();
        for f in &s.fields {
            let p = sdir.join(format!("{}.png", f.id));
            f.image.save_png(&p)?;
            truth.extend(f.glyphs.iter().map(|g| GlyphRecord {
                field: p.clone(),
                center: g.center,
                radius: g.radius,
                cell_type: g.cell_type,
            }));
            paths.push(p);
        }
        samples.push(Sample {
            id: s.id.clone(),
            label: Some(s.label.clone()),
            paths,
        });
    }
    let m = DatasetManifest {
        classes: data.classes.clone(),
        kind: ManifestKind::Fields,
        note: note.to_string(),
        samples,
    };
    manifest::write_manifest(&m, &dir.join("manifest.tsv"))?;
    write_truth(&truth, &dir.join("truth.tsv"))?;
    Ok((m, truth))
}
