//! Line-oriented dataset manifests and folder ingestion.
//!
//! ```text
//! # millie-manifest v1
//! labels	normal	ALL
//! kind	fields
//! note	free text
//! sample	<id>	<label or ->	<path>	<path>	...
//! ```
//!
//! Fields are tab separated. Relative paths are resolved against the
//! manifest's directory. Blank lines and other `#` lines are ignored.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;

use super::{io_err, DataError};

pub const MANIFEST_HEADER: &str = "# millie-manifest v1";

/// What the sample paths point at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestKind {
    /// Whole microscope fields, to be segmented.
    Fields,
    /// 200x200 cell patches.
    Patches,
}

impl FromStr for ManifestKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fields" => Ok(Self::Fields),
            "patches" => Ok(Self::Patches),
            other => Err(DataError::Config(format!("unknown manifest kind `{other}`"))),
        }
    }
}

impl fmt::Display for ManifestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fields => "fields",
            Self::Patches => "patches",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    /// `None` for unlabelled samples (prediction only).
    pub label: Option<String>,
    pub paths: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub kind: ManifestKind,
    pub note: String,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn label_index(&self, sample: &Sample) -> Option<usize> {
        let l = sample.label.as_deref()?;
        self.classes.iter().position(|c| c == l)
    }

    /// Samples per class, in class order.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for s in &self.samples {
            if let Some(i) = self.label_index(s) {
                counts[i] += 1;
            }
        }
        counts
    }

    /// Structural problems that do not need the file system.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let mut classes = HashSet::new();
        for c in &self.classes {
            if !classes.insert(c) {
                out.push(format!("duplicate class `{c}`"));
            }
        }
        for s in &self.samples {
            if !seen.insert(&s.id) {
                out.push(format!("duplicate sample id `{}`", s.id));
            }
            if let Some(l) = &s.label {
                if !classes.contains(l) {
                    out.push(format!("sample `{}` has unknown label `{l}`", s.id));
                }
            }
            if s.paths.is_empty() {
                out.push(format!("sample `{}` lists no files", s.id));
            }
        }
        out
    }
}

fn check_field(text: &str, what: &str) -> Result<(), DataError> {
    if text.contains(['\t', '\n', '\r']) {
        return Err(DataError::Config(format!("{what} `{text}` contains a tab or newline")));
    }
    Ok(())
}

/// Serialises with paths relative to `base` where possible.
pub fn manifest_to_string(m: &DatasetManifest, base: &Path) -> Result<String, DataError> {
    let mut out = format!("{MANIFEST_HEADER}\nlabels");
    for c in &m.classes {
        check_field(c, "class")?;
        out.push('\t');
        out.push_str(c);
    }
    check_field(&m.note, "note")?;
    out.push_str(&format!("\nkind\t{}\nnote\t{}\n", m.kind, m.note));
    for s in &m.samples {
        check_field(&s.id, "sample id")?;
        let label = s.label.as_deref().unwrap_or("-");
        check_field(label, "label")?;
        out.push_str(&format!("sample\t{}\t{label}", s.id));
        for p in &s.paths {
            let rel = p.strip_prefix(base).unwrap_or(p);
            let text = rel.to_string_lossy().replace('\\', "/");
            check_field(&text, "path")?;
            out.push('\t');
            out.push_str(&text);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let base = path.parent().unwrap_or(Path::new(""));
    fs::write(path, manifest_to_string(m, base)?).map_err(io_err(path))
}

/// Parses manifest text; relative paths are joined onto `base`.
pub fn parse_manifest(text: &str, base: &Path, origin: &Path) -> Result<DatasetManifest, DataError> {
    let mut lines = text.lines();
    let fail = |problems: Vec<String>| DataError::Manifest {
        path: origin.to_path_buf(),
        problems,
    };
    if lines.next().map(str::trim_end) != Some(MANIFEST_HEADER) {
        return Err(fail(vec![format!("first line must be `{MANIFEST_HEADER}`")]));
    }
    let mut classes = None;
    let mut kind = ManifestKind::Patches;
    let mut note = String::new();
    let mut samples = Vec::new();
    let mut problems = Vec::new();
    for (no, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        match parts.next() {
            Some("labels") => classes = Some(parts.map(String::from).collect::<Vec<_>>()),
            Some("kind") => match parts.next().unwrap_or("").parse() {
                Ok(k) => kind = k,
                Err(e) => problems.push(format!("line {}: {e}", no + 2)),
            },
            Some("note") => note = parts.collect::<Vec<_>>().join("\t"),
            Some("sample") => {
                let (Some(id), Some(label)) = (parts.next(), parts.next()) else {
                    problems.push(format!("line {}: sample needs an id and a label", no + 2));
                    continue;
                };
                samples.push(Sample {
                    id: id.to_string(),
                    label: (label != "-").then(|| label.to_string()),
                    paths: parts.map(|p| base.join(p)).collect(),
                });
            }
            Some(other) => problems.push(format!("line {}: unknown record `{other}`", no + 2)),
            None => {}
        }
    }
    let Some(classes) = classes else {
        problems.push("missing `labels` line".into());
        return Err(fail(problems));
    };
    let m = DatasetManifest {
        classes,
        kind,
        note,
        samples,
    };
    problems.extend(m.problems());
    if problems.is_empty() {
        Ok(m)
    } else {
        Err(fail(problems))
    }
}

/// Loads and validates a manifest, including that every file exists. All
/// violations are reported together.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let m = parse_manifest(&text, base, path)?;
    let missing: Vec<String> = m
        .samples
        .iter()
        .flat_map(|s| &s.paths)
        .filter(|p| !p.is_file())
        .map(|p| format!("missing file {}", p.display()))
        .collect();
    if missing.is_empty() {
        Ok(m)
    } else {
        Err(DataError::Manifest {
            path: path.to_path_buf(),
            problems: missing,
        })
    }
}

/// On-disk dataset layouts understood by [`ingest_folder`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IngestConvention {
    /// `root/<label>/<sample_id>/*.png`
    PerClassDirs,
    /// Flat `ImNNN_Y.ext` files; `Y` is 1 for ALL, 0 for normal. One image
    /// per sample.
    AllIdb,
    /// `root/<label>/<patient>/**/*.ext`; every image below a patient
    /// directory belongs to that patient's bag.
    BoneMarrow,
}

impl FromStr for IngestConvention {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-class-dirs" => Ok(Self::PerClassDirs),
            "all-idb" => Ok(Self::AllIdb),
            "bone-marrow" => Ok(Self::BoneMarrow),
            other => Err(DataError::Config(format!(
                "unknown ingest convention `{other}` (expected per-class-dirs, all-idb or bone-marrow)"
            ))),
        }
    }
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "bmp", "jpg", "jpeg", "tif", "tiff"];

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<_, _>>()?;
    v.sort();
    Ok(v)
}

fn images_below(dir: &Path, recursive: bool) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    for p in sorted_entries(dir)? {
        if p.is_dir() && recursive {
            out.extend(images_below(&p, true)?);
        } else if p.is_file() && is_image(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

fn name_of(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn ingest_class_dirs(root: &Path, recursive: bool) -> Result<(Vec<String>, Vec<Sample>), DataError> {
    let mut classes = Vec::new();
    let mut samples = Vec::new();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = name_of(&class_dir);
        let before = samples.len();
        for sample_dir in sorted_entries(&class_dir)?.into_iter().filter(|p| p.is_dir()) {
            let paths = images_below(&sample_dir, recursive)?;
            if paths.is_empty() {
                warn!("{}: no images, skipped", sample_dir.display());
                continue;
            }
            samples.push(Sample {
                id: format!("{label}/{}", name_of(&sample_dir)),
                label: Some(label.clone()),
                paths,
            });
        }
        if samples.len() == before {
            warn!("class directory {} holds no samples", class_dir.display());
        }
        classes.push(label);
    }
    Ok((classes, samples))
}

/// `ImNNN_Y` stem → (id, is_all).
fn parse_all_idb_name(p: &Path) -> Option<(String, bool)> {
    let stem = p.file_stem()?.to_str()?;
    let (id, flag) = stem.rsplit_once('_')?;
    if !id.starts_with("Im") || id.len() < 3 || !id[2..].bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    match flag {
        "0" => Some((id.to_string(), false)),
        "1" => Some((id.to_string(), true)),
        _ => None,
    }
}

/// Builds a manifest from a dataset folder. Labels come from the layout;
/// classes are listed in sorted directory order (`normal`, `ALL` for
/// ALL-IDB).
pub fn ingest_folder(root: &Path, convention: IngestConvention, kind: ManifestKind) -> Result<DatasetManifest, DataError> {
    if !root.is_dir() {
        return Err(DataError::Config(format!("{} is not a directory", root.display())));
    }
    let (classes, samples, note) = match convention {
        IngestConvention::PerClassDirs => {
            let (c, s) = ingest_class_dirs(root, false)?;
            (c, s, "per-class-dirs")
        }
        IngestConvention::BoneMarrow => {
            let (c, s) = ingest_class_dirs(root, true)?;
            (c, s, "bone-marrow: one bag per patient directory")
        }
        IngestConvention::AllIdb => {
            let mut samples = Vec::new();
            for p in images_below(root, true)? {
                match parse_all_idb_name(&p) {
                    Some((id, all)) => samples.push(Sample {
                        id,
                        label: Some(if all { "ALL" } else { "normal" }.to_string()),
                        paths: vec![p],
                    }),
                    None => warn!("{}: not an ImNNN_Y image name, skipped", p.display()),
                }
            }
            (vec!["normal".to_string(), "ALL".to_string()], samples, "all-idb: one bag per image")
        }
    };
    if samples.is_empty() {
        return Err(DataError::Config(format!("no samples found under {}", root.display())));
    }
    let m = DatasetManifest {
        classes,
        kind,
        note: format!("ingested from {} ({note})", root.display()),
        samples,
    };
    let problems = m.problems();
    if !problems.is_empty() {
        return Err(DataError::Manifest {
            path: root.to_path_buf(),
            problems,
        });
    }
    Ok(m)
}
