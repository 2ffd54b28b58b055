//! Synthetic blood films: pale fields with faint red cells and purple
//! nuclei ("glyphs") of three cell types, placed by dart-throwing Poisson-disk
//! sampling. Every glyph's centre and type is recorded.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::SeededRng;
use crate::imaging::RgbImage;

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellType {
    /// Small round, strongly saturated nucleus.
    Normal,
    /// Large smooth nucleus.
    Lymphoblast,
    /// Large nucleus with dark speckles.
    Myeloblast,
}

impl CellType {
    pub const ALL: [CellType; 3] = [CellType::Normal, CellType::Lymphoblast, CellType::Myeloblast];

    pub fn name(self) -> &'static str {
        match self {
            Self::Normal => "normal",
            Self::Lymphoblast => "lymphoblast",
            Self::Myeloblast => "myeloblast",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// Diagnostic classes of the synthetic corpus with the abnormal cell type
/// each one carries (`None` for the negative class).
pub const SYNTHETIC_CLASSES: [(&str, Option<CellType>); 3] = [
    ("normal", None),
    ("ALL", Some(CellType::Lymphoblast)),
    ("AML", Some(CellType::Myeloblast)),
];

/// Diagnostic class a cell type is evidence for.
pub fn class_of_cell_type(t: CellType) -> &'static str {
    match t {
        CellType::Normal => "normal",
        CellType::Lymphoblast => "ALL",
        CellType::Myeloblast => "AML",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub samples_per_class: usize,
    pub fields_per_sample: usize,
    pub field_side: usize,
    pub glyphs_per_field: usize,
    /// Fraction of glyphs in a positive field that are abnormal.
    pub witness_fraction: f64,
    /// Minimum distance between glyph centres.
    pub min_spacing: f64,
    pub normal_radius: [f64; 2],
    pub blast_radius: [f64; 2],
    pub speckles: [usize; 2],
    pub speckle_radius: [f64; 2],
    pub red_cells_per_field: usize,
    /// Per-channel Gaussian noise sigma, in 8-bit units.
    pub background_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 30,
            fields_per_sample: 1,
            field_side: 1200,
            glyphs_per_field: 40,
            witness_fraction: 0.3,
            min_spacing: 130.0,
            normal_radius: [17.0, 20.0],
            blast_radius: [26.0, 30.0],
            speckles: [8, 12],
            speckle_radius: [5.0, 7.0],
            red_cells_per_field: 40,
            background_noise: 4.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if !(self.witness_fraction > 0.0 && self.witness_fraction <= 1.0) {
            return bad(format!("witness_fraction must lie in (0, 1], got {}", self.witness_fraction));
        }
        if self.samples_per_class == 0 || self.fields_per_sample == 0 || self.glyphs_per_field == 0 {
            return bad("samples_per_class, fields_per_sample and glyphs_per_field must be positive".into());
        }
        let ranges = [self.normal_radius, self.blast_radius, self.speckle_radius];
        if ranges.iter().any(|[lo, hi]| !(*lo > 0.0 && lo <= hi)) || self.speckles[0] > self.speckles[1] {
            return bad("radius and speckle ranges must satisfy 0 < lo <= hi".into());
        }
        if !(self.background_noise >= 0.0) {
            return bad("background_noise must be >= 0".into());
        }
        let margin = self.blast_radius[1] + 4.0;
        if (self.field_side as f64) < 2.0 * margin + 1.0 {
            return bad(format!("field_side {} too small for the glyph radius", self.field_side));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedGlyph {
    /// (row, col)
    pub center: (f64, f64),
    pub radius: f64,
    pub cell_type: CellType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticField {
    pub id: String,
    pub image: RgbImage,
    pub glyphs: Vec<PlacedGlyph>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub label: String,
    pub fields: Vec<SyntheticField>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub classes: Vec<String>,
    pub samples: Vec<SyntheticSample>,
}

/// Number of abnormal glyphs in a positive field of `n` glyphs.
pub fn witness_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n)
}

/// Dart throwing: uniform candidates inside `[margin, side - margin)^2`,
/// rejected when closer than `spacing` to an accepted point.
pub fn poisson_disk<R: Rng>(side: usize, margin: f64, spacing: f64, target: usize, rng: &mut R) -> Vec<(f64, f64)> {
    let (lo, hi) = (margin, side as f64 - margin);
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(target);
    let max_attempts = 2000 * target.max(1);
    let s2 = spacing * spacing;
    for _ in 0..max_attempts {
        if pts.len() == target {
            break;
        }
        let p = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        if pts.iter().all(|q| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2) >= s2) {
            pts.push(p);
        }
    }
    pts
}

const BACKGROUND: [f64; 3] = [236.0, 222.0, 228.0];
const RED_CELL: [f64; 3] = [226.0, 186.0, 196.0];
const NORMAL_NUCLEUS: [f64; 3] = [72.0, 30.0, 122.0];
const BLAST_NUCLEUS: [f64; 3] = [112.0, 62.0, 168.0];
const SPECKLE: [f64; 3] = [52.0, 18.0, 92.0];

struct Canvas {
    side: usize,
    rgb: Vec<f64>,
}

impl Canvas {
    fn paint_ellipse(&mut self, center: (f64, f64), axes: (f64, f64), angle: f64, color: [f64; 3]) {
        let (ca, sa) = (angle.cos(), angle.sin());
        let reach = axes.0.max(axes.1).ceil() as i64 + 1;
        let (cy, cx) = (center.0.round() as i64, center.1.round() as i64);
        for y in (cy - reach).max(0)..(cy + reach + 1).min(self.side as i64) {
            for x in (cx - reach).max(0)..(cx + reach + 1).min(self.side as i64) {
                let (dy, dx) = (y as f64 - center.0, x as f64 - center.1);
                let u = dx * ca + dy * sa;
                let v = -dx * sa + dy * ca;
                if (u / axes.0).powi(2) + (v / axes.1).powi(2) <= 1.0 {
                    let i = (y as usize * self.side + x as usize) * 3;
                    self.rgb[i..i + 3].copy_from_slice(&color);
                }
            }
        }
    }

    fn paint_glyph<R: Rng>(&mut self, g: &PlacedGlyph, config: &SyntheticConfig, rng: &mut R) {
        let squash = rng.gen_range(0.9..1.0);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let axes = (g.radius, g.radius * squash);
        match g.cell_type {
            CellType::Normal => self.paint_ellipse(g.center, axes, angle, NORMAL_NUCLEUS),
            CellType::Lymphoblast => self.paint_ellipse(g.center, axes, angle, BLAST_NUCLEUS),
            CellType::Myeloblast => {
                self.paint_ellipse(g.center, axes, angle, BLAST_NUCLEUS);
                let n = rng.gen_range(config.speckles[0]..=config.speckles[1]);
                for _ in 0..n {
                    let sr = rng.gen_range(config.speckle_radius[0]..=config.speckle_radius[1]);
                    let reach = (axes.1 - sr - 1.0).max(0.0);
                    let (rho, phi) = (reach * rng.gen::<f64>().sqrt(), rng.gen_range(0.0..std::f64::consts::TAU));
                    let c = (g.center.0 + rho * phi.sin(), g.center.1 + rho * phi.cos());
                    self.paint_ellipse(c, (sr, sr), 0.0, SPECKLE);
                }
            }
        }
    }

    fn into_image<R: Rng>(self, sigma: f64, rng: &mut R) -> RgbImage {
        let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
        let pixels = self
            .rgb
            .iter()
            .map(|&v| {
                let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                (v + n).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        RgbImage::new(self.side, self.side, pixels).expect("canvas geometry")
    }
}

/// Renders one field. `abnormal` is the cell type of the witnesses, if any.
pub fn render_field<R: Rng>(
    id: &str,
    abnormal: Option<CellType>,
    config: &SyntheticConfig,
    rng: &mut R,
) -> SyntheticField {
    let side = config.field_side;
    let mut canvas = Canvas {
        side,
        rgb: BACKGROUND.iter().copied().cycle().take(side * side * 3).collect(),
    };
    for _ in 0..config.red_cells_per_field {
        let c = (rng.gen_range(0.0..side as f64), rng.gen_range(0.0..side as f64));
        let r = rng.gen_range(30.0..38.0);
        canvas.paint_ellipse(c, (r, r), 0.0, RED_CELL);
    }
    let margin = config.blast_radius[1] + 4.0;
    let centers = poisson_disk(side, margin, config.min_spacing, config.glyphs_per_field, rng);
    let n = centers.len();
    let mut types = vec![CellType::Normal; n];
    if let (Some(t), true) = (abnormal, n > 0) {
        for i in sample_indices(rng, n, witness_count(n, config.witness_fraction)) {
            types[i] = t;
        }
    }
    let glyphs: Vec<PlacedGlyph> = centers
        .into_iter()
        .zip(types)
        .map(|(center, cell_type)| {
            let [lo, hi] = if cell_type == CellType::Normal {
                config.normal_radius
            } else {
                config.blast_radius
            };
            PlacedGlyph {
                center,
                radius: rng.gen_range(lo..=hi),
                cell_type,
            }
        })
        .collect();
    for g in &glyphs {
        canvas.paint_glyph(g, config, rng);
    }
    SyntheticField {
        id: id.to_string(),
        image: canvas.into_image(config.background_noise, rng),
        glyphs,
    }
}

/// Deterministic in `config.seed`; samples are rendered in parallel from
/// per-sample derived streams and returned class by class.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset, DataError> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> = (0..SYNTHETIC_CLASSES.len())
        .flat_map(|c| (0..config.samples_per_class).map(move |i| (c, i)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(c, i)| {
            let (label, abnormal) = SYNTHETIC_CLASSES[c];
            let id = format!("{label}-{i:03}");
            let mut rng = SeededRng::derive(config.seed, &[c as u64, i as u64]);
            let fields = (0..config.fields_per_sample)
                .map(|f| render_field(&format!("{id}-f{f}"), abnormal, config, &mut rng))
                .collect();
            SyntheticSample {
                id,
                label: label.to_string(),
                fields,
            }
        })
        .collect();
    Ok(SyntheticDataset {
        classes: SYNTHETIC_CLASSES.iter().map(|(c, _)| c.to_string()).collect(),
        samples,
    })
}
