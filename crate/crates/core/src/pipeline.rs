//! End-to-end steps shared by the command line and the experiment suite:
//! segmenting a field corpus into a patch store, matching patches to glyph
//! truth, loading bags and cells, and k-fold cross-validation.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::dataio::annotations::{CellAnnotation, CellAnnotationSet, GlyphRecord};
use crate::dataio::manifest::{DatasetManifest, ManifestKind, Sample};
use crate::dataio::synth::SyntheticConfig;
use crate::dataio::{io_err, DataError};
use crate::imaging::{segment_field, segmentation_score, score_from_counts, PatchImage, RgbImage, SegmentationParams};
use crate::metrics::{aggregate_cv, confusion, kfold, roc_auc, ConfusionMatrix, MetricsError};
use crate::model::{argmax, BackboneConfig, ModelError, ModelInput, ModelParams};
use crate::training::{evaluate_with_tta, predict_sample_tta, train, BagSample, StopReason, TrainConfig, TrainError, TrainedModel};

pub const TOOL_NAME: &str = "millie";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no cells segmented")]
    NoCells,
}

impl From<crate::imaging::ImagingError> for PipelineError {
    fn from(e: crate::imaging::ImagingError) -> Self {
        Self::Data(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsOptions {
    pub k: usize,
    /// Detection-to-truth match radius in pixels.
    pub match_radius: f64,
    /// Cell type -> class whose probability scores it. Types not listed
    /// map to the class of the same name.
    pub cell_classes: BTreeMap<String, String>,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            k: 3,
            match_radius: 10.0,
            cell_classes: [("lymphoblast", "ALL"), ("myeloblast", "AML")]
                .into_iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        }
    }
}

impl MetricsOptions {
    pub fn class_of(&self, cell_type: &str) -> String {
        self.cell_classes.get(cell_type).cloned().unwrap_or_else(|| cell_type.to_string())
    }
}

/// Every tunable of a run. All blocks and fields are optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub segmentation: SegmentationParams,
    pub augment: AugmentConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub metrics: MetricsOptions,
    pub synth: SyntheticConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.synth.validate()?;
        self.train.validate()?;
        self.backbone.validate()?;
        self.augment.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.metrics.k < 2 {
            return Err(PipelineError::Config(format!("k must be at least 2, got {}", self.metrics.k)));
        }
        if !(self.metrics.match_radius > 0.0) {
            return Err(PipelineError::Config("match_radius must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SegmentedField {
    pub path: PathBuf,
    pub patches: Vec<PatchImage>,
}

#[derive(Clone, Debug)]
pub struct SegmentedSample {
    pub id: String,
    pub label: Option<String>,
    pub fields: Vec<SegmentedField>,
}

impl SegmentedSample {
    pub fn patch_count(&self) -> usize {
        self.fields.iter().map(|f| f.patches.len()).sum()
    }
}

/// Segments every field of a fields manifest. Fields are processed in
/// parallel; output order follows the manifest.
pub fn segment_manifest(m: &DatasetManifest, params: &SegmentationParams) -> Result<Vec<SegmentedSample>, PipelineError> {
    if m.kind != ManifestKind::Fields {
        return Err(PipelineError::Config("segmentation needs a manifest of kind `fields`".into()));
    }
    let jobs: Vec<(usize, &PathBuf)> = m
        .samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.paths.iter().map(move |p| (i, p)))
        .collect();
    let done: Vec<(usize, SegmentedField)> = jobs
        .par_iter()
        .map(|&(i, p)| {
            let img = RgbImage::load(p)?;
            let stem = p.file_stem().map_or_else(|| "field".into(), |s| s.to_string_lossy().into_owned());
            let patches = segment_field(&img, &stem, params);
            Ok((
                i,
                SegmentedField {
                    path: p.clone(),
                    patches,
                },
            ))
        })
        .collect::<Result<_, PipelineError>>()?;
    let mut out: Vec<SegmentedSample> = m
        .samples
        .iter()
        .map(|s| SegmentedSample {
            id: s.id.clone(),
            label: s.label.clone(),
            fields: Vec::new(),
        })
        .collect();
    for (i, f) in done {
        out[i].fields.push(f);
    }
    Ok(out)
}

/// One stored patch and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub sample: String,
    pub field: PathBuf,
    pub centroid: (f64, f64),
    pub path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct PatchStore {
    pub manifest: DatasetManifest,
    pub records: Vec<PatchRecord>,
}

/// Writes `patches/<sample>/<field>_<nnn>.png` under `dir` plus a patches
/// manifest at `dir/manifest.tsv`. Samples without patches are left out.
pub fn write_patch_store(
    segmented: &[SegmentedSample],
    classes: &[String],
    note: &str,
    dir: &Path,
) -> Result<PatchStore, PipelineError> {
    let mut records = Vec::new();
    let mut jobs: Vec<(PathBuf, &PatchImage)> = Vec::new();
    let mut samples = Vec::new();
    for s in segmented {
        if s.patch_count() == 0 {
            warn!("sample `{}`: no cells segmented, left out of the patch store", s.id);
            continue;
        }
        let sdir = dir.join("patches").join(&s.id);
        fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
        let mut paths = Vec::new();
        for f in &s.fields {
            let stem = f.path.file_stem().map_or_else(|| "field".into(), |x| x.to_string_lossy().into_owned());
            for (n, p) in f.patches.iter().enumerate() {
                let path = sdir.join(format!("{stem}_{n:03}.png"));
                records.push(PatchRecord {
                    sample: s.id.clone(),
                    field: f.path.clone(),
                    centroid: p.centroid,
                    path: path.clone(),
                });
                jobs.push((path.clone(), p));
                paths.push(path);
            }
        }
        samples.push(Sample {
            id: s.id.clone(),
            label: s.label.clone(),
            paths,
        });
    }
    if records.is_empty() {
        return Err(PipelineError::NoCells);
    }
    jobs.par_iter()
        .map(|(path, p)| p.image().save_png(path))
        .collect::<Result<Vec<()>, _>>()?;
    let manifest = DatasetManifest {
        classes: classes.to_vec(),
        kind: ManifestKind::Patches,
        note: note.to_string(),
        samples,
    };
    crate::dataio::manifest::write_manifest(&manifest, &dir.join("manifest.tsv"))?;
    Ok(PatchStore { manifest, records })
}

/// Segmentation counts pooled over fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DetectionSummary {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Labels every stored patch with the nearest glyph of its field within
/// `radius`. Patches without such a glyph are not annotated.
pub fn annotate_patches(
    records: &[PatchRecord],
    truth: &[GlyphRecord],
    cell_types: &[String],
    radius: f64,
) -> (CellAnnotationSet, DetectionSummary) {
    let mut by_field: BTreeMap<&Path, Vec<&GlyphRecord>> = BTreeMap::new();
    for g in truth {
        by_field.entry(g.field.as_path()).or_default().push(g);
    }
    let mut patches_by_field: BTreeMap<&Path, Vec<&PatchRecord>> = BTreeMap::new();
    for r in records {
        patches_by_field.entry(r.field.as_path()).or_default().push(r);
    }
    let mut cells = Vec::new();
    for r in records {
        let nearest = by_field.get(r.field.as_path()).and_then(|gs| {
            gs.iter()
                .map(|g| ((g.center.0 - r.centroid.0).hypot(g.center.1 - r.centroid.1), g))
                .filter(|(d, _)| *d <= radius)
                .min_by(|a, b| a.0.total_cmp(&b.0))
        });
        if let Some((_, g)) = nearest {
            cells.push(CellAnnotation {
                path: r.path.clone(),
                cell_type: g.cell_type.name().to_string(),
            });
        }
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let fields: std::collections::BTreeSet<&Path> = by_field.keys().chain(patches_by_field.keys()).copied().collect();
    for f in fields {
        let pred: Vec<(f64, f64)> = patches_by_field.get(f).map_or_else(Vec::new, |v| v.iter().map(|r| r.centroid).collect());
        let tr: Vec<(f64, f64)> = by_field.get(f).map_or_else(Vec::new, |v| v.iter().map(|g| g.center).collect());
        let s = segmentation_score(&pred, &tr, radius);
        tp += s.true_positives;
        fp += s.false_positives;
        fn_ += s.false_negatives;
    }
    let s = score_from_counts(tp, fp, fn_);
    (
        CellAnnotationSet {
            cell_types: cell_types.to_vec(),
            cells,
        },
        DetectionSummary {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            precision: s.precision,
            recall: s.recall,
        },
    )
}

/// Reads patch files in parallel and reduces them to model resolution.
pub fn load_inputs(paths: &[PathBuf], side: usize) -> Result<Vec<ModelInput>, PipelineError> {
    paths
        .par_iter()
        .map(|p| Ok(ModelInput::from_patch(&PatchImage::load(p)?, side)))
        .collect()
}

/// Labelled bags from a patches manifest, in manifest order.
pub fn load_bags(m: &DatasetManifest, side: usize) -> Result<Vec<BagSample>, PipelineError> {
    if m.kind != ManifestKind::Patches {
        return Err(PipelineError::Config("training needs a manifest of kind `patches`; run segment first".into()));
    }
    m.samples
        .iter()
        .map(|s| {
            let label = m
                .label_index(s)
                .ok_or_else(|| PipelineError::Config(format!("sample `{}` has no label", s.id)))?;
            Ok(BagSample {
                id: s.id.clone(),
                label,
                inputs: load_inputs(&s.paths, side)?,
            })
        })
        .collect()
}

/// Classes named in the label space but absent from the samples.
pub fn missing_classes(m: &DatasetManifest) -> Vec<String> {
    m.classes
        .iter()
        .zip(m.class_counts())
        .filter(|(_, n)| *n == 0)
        .map(|(c, _)| c.clone())
        .collect()
}

/// Annotated cells tied to the sample whose patch store holds them.
#[derive(Clone, Debug)]
pub struct CellSet {
    pub cell_types: Vec<String>,
    /// Path relative to the annotation file, used as a stable id.
    pub ids: Vec<String>,
    pub sample: Vec<usize>,
    pub type_index: Vec<usize>,
    /// Class whose probability scores each cell type.
    pub type_class: Vec<usize>,
    pub inputs: Vec<ModelInput>,
}

impl CellSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn class_of_cell(&self, i: usize) -> usize {
        self.type_class[self.type_index[i]]
    }
}

pub fn type_classes(cell_types: &[String], classes: &[String], opts: &MetricsOptions) -> Result<Vec<usize>, PipelineError> {
    cell_types
        .iter()
        .map(|t| {
            let c = opts.class_of(t);
            classes.iter().position(|x| *x == c).ok_or_else(|| {
                PipelineError::Config(format!("cell type `{t}` maps to class `{c}`, which is not in the label space"))
            })
        })
        .collect()
}

pub fn load_cell_set(
    ann: &CellAnnotationSet,
    base: &Path,
    m: &DatasetManifest,
    side: usize,
    opts: &MetricsOptions,
) -> Result<CellSet, PipelineError> {
    let owner: HashMap<&Path, usize> = m
        .samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.paths.iter().map(move |p| (p.as_path(), i)))
        .collect();
    let type_class = type_classes(&ann.cell_types, &m.classes, opts)?;
    let mut ids = Vec::new();
    let mut sample = Vec::new();
    let mut type_index = Vec::new();
    for c in &ann.cells {
        let s = *owner.get(c.path.as_path()).ok_or_else(|| {
            PipelineError::Config(format!("annotated cell {} is not in the patch manifest", c.path.display()))
        })?;
        ids.push(c.path.strip_prefix(base).unwrap_or(&c.path).to_string_lossy().replace('\\', "/"));
        sample.push(s);
        type_index.push(ann.type_index(&c.cell_type).expect("validated on load"));
    }
    let paths: Vec<PathBuf> = ann.cells.iter().map(|c| c.path.clone()).collect();
    Ok(CellSet {
        cell_types: ann.cell_types.clone(),
        ids,
        sample,
        type_index,
        type_class,
        inputs: load_inputs(&paths, side)?,
    })
}

/// Test-time-augmented single-cell probabilities.
pub fn score_cells_tta(
    model: &ModelParams,
    inputs: &[&ModelInput],
    augment: &AugmentConfig,
    replicas: usize,
    seed: u64,
) -> Result<Vec<Vec<f32>>, ModelError> {
    inputs
        .par_iter()
        .map(|inp| evaluate_with_tta(model, std::slice::from_ref(*inp), augment, replicas, seed))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedAuc {
    pub name: String,
    /// `None` when the held-out set lacks positives or negatives.
    pub auc: Option<f64>,
}

/// One-vs-rest AUC per column of `probs` against `positive(i)`.
fn named_aucs(names: &[String], score_col: &[usize], probs: &[Vec<f32>], truth: &[usize]) -> Vec<NamedAuc> {
    names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let scores: Vec<f64> = probs.iter().map(|p| p[score_col[k]] as f64).collect();
            let labels: Vec<bool> = truth.iter().map(|&t| t == k).collect();
            NamedAuc {
                name: name.clone(),
                auc: roc_auc(&scores, &labels).ok().map(|r| r.auc),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub id: String,
    pub fold: usize,
    pub label: String,
    pub predicted: String,
    pub probabilities: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub test_samples: usize,
    pub accuracy: f64,
    pub sample_auc: Vec<NamedAuc>,
    pub sample_confusion: ConfusionMatrix,
    pub cells: usize,
    pub cell_auc: Vec<NamedAuc>,
    pub cell_confusion: Option<ConfusionMatrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldEvaluation {
    pub metrics: FoldMetrics,
    pub predictions: Vec<SamplePrediction>,
}

/// Scores the held-out samples of one fold (and their annotated cells)
/// with test-time augmentation.
pub fn evaluate_fold(
    fold: usize,
    model: &ModelParams,
    bags: &[BagSample],
    test: &[usize],
    cells: Option<&CellSet>,
    config: &RunConfig,
) -> Result<FoldEvaluation, PipelineError> {
    let classes = &model.classes;
    let seed = config.train.seed;
    let replicas = config.train.tta_replicas;
    let probs: Vec<Vec<f32>> = test
        .par_iter()
        .map(|&i| predict_sample_tta(model, &bags[i], &config.augment, replicas, seed))
        .collect::<Result<_, _>>()?;
    let truth: Vec<usize> = test.iter().map(|&i| bags[i].label).collect();
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let sample_confusion = confusion(&preds, &truth, classes)?;
    let identity: Vec<usize> = (0..classes.len()).collect();
    let sample_auc = named_aucs(classes, &identity, &probs, &truth);
    let predictions = test
        .iter()
        .zip(&probs)
        .zip(&preds)
        .map(|((&i, p), &k)| SamplePrediction {
            id: bags[i].id.clone(),
            fold,
            label: classes[bags[i].label].clone(),
            predicted: classes[k].clone(),
            probabilities: p.clone(),
        })
        .collect();

    let (mut n_cells, mut cell_auc, mut cell_confusion) = (0, Vec::new(), None);
    if let Some(cs) = cells {
        let held: Vec<usize> = (0..cs.len()).filter(|&c| test.contains(&cs.sample[c])).collect();
        n_cells = held.len();
        if !held.is_empty() {
            let inputs: Vec<&ModelInput> = held.iter().map(|&c| &cs.inputs[c]).collect();
            let cprobs = score_cells_tta(model, &inputs, &config.augment, replicas, seed)?;
            let ctypes: Vec<usize> = held.iter().map(|&c| cs.type_index[c]).collect();
            cell_auc = named_aucs(&cs.cell_types, &cs.type_class, &cprobs, &ctypes);
            let ctruth: Vec<usize> = held.iter().map(|&c| cs.class_of_cell(c)).collect();
            let cpred: Vec<usize> = cprobs.iter().map(|p| argmax(p)).collect();
            cell_confusion = Some(confusion(&cpred, &ctruth, classes)?);
        }
    }
    Ok(FoldEvaluation {
        metrics: FoldMetrics {
            test_samples: test.len(),
            accuracy: sample_confusion.accuracy()?,
            sample_auc,
            sample_confusion,
            cells: n_cells,
            cell_auc,
            cell_confusion,
        },
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldTraining {
    pub train_samples: usize,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub stopping: StopReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub training: FoldTraining,
    pub metrics: FoldMetrics,
}

/// Mean and population std, with the `mean ± std` rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub display: String,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self, MetricsError> {
        let a = aggregate_cv(values)?;
        Ok(Self {
            mean: a.mean,
            std: a.std,
            display: a.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedSummary {
    pub name: String,
    /// Over the folds where the metric is defined; `None` with fewer than two.
    pub summary: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossvalAggregate {
    pub accuracy: Summary,
    pub sample_auc: Vec<NamedSummary>,
    pub cell_auc: Vec<NamedSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub classes: Vec<String>,
    pub k: usize,
    pub folds: Vec<FoldReport>,
    pub aggregate: CrossvalAggregate,
    pub sample_confusion: ConfusionMatrix,
    pub cell_confusion: Option<ConfusionMatrix>,
    pub predictions: Vec<SamplePrediction>,
}

impl CrossvalReport {
    /// Fold-mean cell AUC for `cell_type`.
    pub fn cell_auc_mean(&self, cell_type: &str) -> Option<f64> {
        self.aggregate
            .cell_auc
            .iter()
            .find(|n| n.name == cell_type)
            .and_then(|n| n.summary.as_ref())
            .map(|s| s.mean)
    }
}

#[derive(Clone, Debug)]
pub struct CrossvalOutcome {
    pub report: CrossvalReport,
    /// Fold models in fold order.
    pub models: Vec<TrainedModel>,
}

fn summarise(per_fold: &[&[NamedAuc]]) -> Result<Vec<NamedSummary>, MetricsError> {
    let Some(first) = per_fold.first() else {
        return Ok(Vec::new());
    };
    first
        .iter()
        .enumerate()
        .map(|(k, n)| {
            let vals: Vec<f64> = per_fold.iter().filter_map(|f| f.get(k).and_then(|x| x.auc)).collect();
            Ok(NamedSummary {
                name: n.name.clone(),
                summary: if vals.len() >= 2 { Some(Summary::of(&vals)?) } else { None },
            })
        })
        .collect()
}

/// Stratified k-fold cross-validation. Each fold trains a fresh model on
/// the other folds (early stopping on an internal split of those) and is
/// evaluated once on its held-out samples. Folds run in parallel.
pub fn crossval(
    bags: &[BagSample],
    classes: &[String],
    cells: Option<&CellSet>,
    config: &RunConfig,
) -> Result<CrossvalOutcome, PipelineError> {
    config.validate()?;
    let k = config.metrics.k;
    let ids: Vec<String> = bags.iter().map(|b| b.id.clone()).collect();
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let split = kfold(&ids, &labels, k, config.train.seed)?;
    let folds: Vec<(TrainedModel, FoldEvaluation)> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train_bags: Vec<BagSample> = split.train_indices(fold).into_iter().map(|i| bags[i].clone()).collect();
            let trained = train(&train_bags, classes, &config.backbone, &config.augment, &config.train)?;
            info!(
                "fold {fold}: {} epochs, stopped by {}",
                trained.history.len(),
                trained.stopping
            );
            let eval = evaluate_fold(fold, &trained.model, bags, &split.test_indices(fold), cells, config)?;
            Ok((trained, eval))
        })
        .collect::<Result<_, PipelineError>>()?;

    let mut sample_confusion = ConfusionMatrix::zeros(classes.to_vec());
    let mut cell_confusion: Option<ConfusionMatrix> = None;
    let mut reports = Vec::new();
    let mut predictions = Vec::new();
    for (fold, (trained, eval)) in folds.iter().enumerate() {
        sample_confusion.merge(&eval.metrics.sample_confusion)?;
        if let Some(c) = &eval.metrics.cell_confusion {
            match &mut cell_confusion {
                Some(acc) => acc.merge(c)?,
                None => cell_confusion = Some(c.clone()),
            }
        }
        predictions.extend(eval.predictions.iter().cloned());
        reports.push(FoldReport {
            fold,
            training: FoldTraining {
                train_samples: split.train_indices(fold).len(),
                epochs_run: trained.history.len(),
                best_epoch: trained.best_epoch,
                stopping: trained.stopping,
            },
            metrics: eval.metrics.clone(),
        });
    }
    let order: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    predictions.sort_by_key(|p| order[p.id.as_str()]);

    let accs: Vec<f64> = reports.iter().map(|r| r.metrics.accuracy).collect();
    let sample_aucs: Vec<&[NamedAuc]> = reports.iter().map(|r| r.metrics.sample_auc.as_slice()).collect();
    let cell_aucs: Vec<&[NamedAuc]> = reports.iter().map(|r| r.metrics.cell_auc.as_slice()).collect();
    let aggregate = CrossvalAggregate {
        accuracy: Summary::of(&accs)?,
        sample_auc: summarise(&sample_aucs)?,
        cell_auc: summarise(&cell_aucs)?,
    };
    let report = CrossvalReport {
        tool: TOOL_NAME.into(),
        version: TOOL_VERSION.into(),
        config: config.clone(),
        classes: classes.to_vec(),
        k,
        folds: reports,
        aggregate,
        sample_confusion,
        cell_confusion,
        predictions,
    };
    let models = folds.into_iter().map(|(t, _)| t).collect();
    Ok(CrossvalOutcome { report, models })
}

/// Sample indices held out in `fold`, recomputed from the report's config.
pub fn test_indices(bags: &[BagSample], config: &RunConfig, fold: usize) -> Result<Vec<usize>, PipelineError> {
    let ids: Vec<String> = bags.iter().map(|b| b.id.clone()).collect();
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    Ok(kfold(&ids, &labels, config.metrics.k, config.train.seed)?.test_indices(fold))
}

