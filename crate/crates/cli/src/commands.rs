use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use millie_core::dataio::annotations::{load_annotations, load_truth, write_annotations, write_synthetic, CellAnnotationSet};
use millie_core::dataio::checkpoint::{load_checkpoint, save_checkpoint};
use millie_core::dataio::manifest::{ingest_folder, load_manifest, DatasetManifest, IngestConvention, ManifestKind};
use millie_core::dataio::synth::{generate_synthetic, CellType};
use millie_core::dataio::{write_report, DataError};
use millie_core::imaging::PatchImage;
use millie_core::metrics::{confusion, pca_csv, pca_project, roc_auc, roc_csv, scatter_svg, silhouette_score, ConfusionMatrix};
use millie_core::model::{argmax, extract_embedding, EmbeddingLayer, ModelInput, ModelParams};
use millie_core::pipeline::{
    self, annotate_patches, load_bags, load_cell_set, load_inputs, missing_classes, score_cells_tta, segment_manifest,
    type_classes, write_patch_store, CrossvalReport, DetectionSummary, NamedAuc, RunConfig, TOOL_NAME, TOOL_VERSION,
};
use millie_core::training::{evaluate_with_tta, format_training_log, train as train_model};
use rayon::prelude::*;
use serde::Serialize;

use crate::Failure;

fn rel(p: &Path, base: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn base_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Output file-name fragment for a class or cell type.
fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn fmt_probs(p: &[f32]) -> String {
    p.iter().map(f32::to_string).collect::<Vec<_>>().join("\t")
}

#[derive(Serialize)]
struct SynthReport<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    classes: &'a [String],
    samples_per_class: Vec<usize>,
    glyphs_per_type: Vec<(String, usize)>,
}

pub fn synth(cfg: &RunConfig, out: &Path, patches: bool) -> Result<(), Failure> {
    create_dir(out)?;
    let data = generate_synthetic(&cfg.synth)?;
    let note = format!("synthetic corpus, seed {}", cfg.synth.seed);
    let (manifest, truth) = write_synthetic(&data, out, &note)?;
    let glyphs_per_type: Vec<(String, usize)> = CellType::ALL
        .iter()
        .map(|t| (t.name().to_string(), truth.iter().filter(|g| g.cell_type == *t).count()))
        .collect();
    write_report(
        &SynthReport {
            tool: TOOL_NAME,
            version: TOOL_VERSION,
            config: cfg,
            classes: &manifest.classes,
            samples_per_class: manifest.class_counts(),
            glyphs_per_type: glyphs_per_type.clone(),
        },
        &out.join("synth.json"),
    )?;
    println!(
        "wrote {} samples and {} glyphs to {}",
        manifest.samples.len(),
        truth.len(),
        out.display()
    );
    for (t, n) in &glyphs_per_type {
        println!("{t}\t{n}");
    }
    if patches {
        segment(cfg, out, None, None, &out.join("segmented"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct FieldCount {
    sample: String,
    field: String,
    cells: usize,
}

#[derive(Serialize)]
struct SegmentReport<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    fields: Vec<FieldCount>,
    total_cells: usize,
    annotated_cells: Option<usize>,
    detection: Option<DetectionSummary>,
}

fn input_manifest(input: &Path, convention: Option<&str>) -> Result<(DatasetManifest, PathBuf), Failure> {
    if let Some(c) = convention {
        let conv: IngestConvention = c.parse()?;
        return Ok((ingest_folder(input, conv, ManifestKind::Fields)?, input.to_path_buf()));
    }
    let path = if input.is_dir() { input.join("manifest.tsv") } else { input.to_path_buf() };
    let m = load_manifest(&path)?;
    Ok((m, base_of(&path)))
}

pub fn segment(
    cfg: &RunConfig,
    input: &Path,
    convention: Option<&str>,
    truth: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let (manifest, base) = input_manifest(input, convention)?;
    let segmented = segment_manifest(&manifest, &cfg.segmentation)?;
    let mut fields = Vec::new();
    for s in &segmented {
        for f in &s.fields {
            let fc = FieldCount {
                sample: s.id.clone(),
                field: rel(&f.path, &base),
                cells: f.patches.len(),
            };
            println!("{}\t{}\t{}", fc.sample, fc.field, fc.cells);
            fields.push(fc);
        }
    }
    let total_cells = fields.iter().map(|f| f.cells).sum();
    create_dir(out)?;
    let note = format!("patches segmented from {}", manifest.note);
    let store = write_patch_store(&segmented, &manifest.classes, note.trim(), out)?;

    let truth_path = match truth {
        Some(t) => Some(t.to_path_buf()),
        None => Some(base.join("truth.tsv")).filter(|p| convention.is_none() && p.is_file()),
    };
    let (mut annotated_cells, mut detection) = (None, None);
    if let Some(tp) = truth_path {
        let glyphs = load_truth(&tp)?;
        let types: Vec<String> = CellType::ALL.iter().map(|t| t.name().to_string()).collect();
        let (ann, det) = annotate_patches(&store.records, &glyphs, &types, cfg.metrics.match_radius);
        write_annotations(&ann, &out.join("cells.tsv"))?;
        println!(
            "detection: recall {:.4}, precision {:.4} ({} of {} glyphs)",
            det.recall,
            det.precision,
            det.true_positives,
            det.true_positives + det.false_negatives
        );
        annotated_cells = Some(ann.cells.len());
        detection = Some(det);
    }
    println!("{total_cells} cells in {} samples", store.manifest.samples.len());
    write_report(
        &SegmentReport {
            tool: TOOL_NAME,
            version: TOOL_VERSION,
            config: cfg,
            fields,
            total_cells,
            annotated_cells,
            detection,
        },
        &out.join("segment.json"),
    )?;
    Ok(())
}

fn labelled_manifest(path: &Path) -> Result<DatasetManifest, Failure> {
    let m = load_manifest(path)?;
    let missing = missing_classes(&m);
    if !missing.is_empty() {
        return Err(Failure::config(format!(
            "classes without samples: {}",
            missing.join(", ")
        )));
    }
    Ok(m)
}

#[derive(Serialize)]
struct TrainReport<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    classes: &'a [String],
    samples: usize,
    epochs_run: usize,
    best_epoch: Option<usize>,
    stopping: String,
    history: &'a [millie_core::training::EpochStats],
}

pub fn train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<(), Failure> {
    let m = labelled_manifest(manifest)?;
    let bags = load_bags(&m, cfg.backbone.input_side)?;
    info!("training on {} samples", bags.len());
    let trained = train_model(&bags, &m.classes, &cfg.backbone, &cfg.augment, &cfg.train)?;
    create_dir(out)?;
    save_checkpoint(&trained, &out.join("model.ckpt"))?;
    write_text(&out.join("training_log.tsv"), &format_training_log(&trained.history))?;
    write_report(
        &TrainReport {
            tool: TOOL_NAME,
            version: TOOL_VERSION,
            config: cfg,
            classes: &m.classes,
            samples: bags.len(),
            epochs_run: trained.history.len(),
            best_epoch: trained.best_epoch,
            stopping: trained.stopping.to_string(),
            history: &trained.history,
        },
        &out.join("train.json"),
    )?;
    println!(
        "{} epochs ({}), best epoch {}",
        trained.history.len(),
        trained.stopping,
        trained.best_epoch.map_or_else(|| "none".into(), |e| e.to_string())
    );
    Ok(())
}

pub fn crossval(cfg: &RunConfig, manifest: &Path, cells: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let m = labelled_manifest(manifest)?;
    let side = cfg.backbone.input_side;
    let bags = load_bags(&m, side)?;
    let cells_path = cells
        .map(Path::to_path_buf)
        .or_else(|| Some(base_of(manifest).join("cells.tsv")).filter(|p| p.is_file()));
    let cell_set = match &cells_path {
        Some(p) => {
            let ann = load_annotations(p)?;
            Some(load_cell_set(&ann, &base_of(p), &m, side, &cfg.metrics)?)
        }
        None => None,
    };
    let outcome = pipeline::crossval(&bags, &m.classes, cell_set.as_ref(), cfg)?;
    create_dir(out)?;
    write_crossval_outputs(&outcome.report, &outcome.models, out)?;
    let r = &outcome.report;
    println!("accuracy\t{}", r.aggregate.accuracy.display);
    for (kind, list) in [("sample_auc", &r.aggregate.sample_auc), ("cell_auc", &r.aggregate.cell_auc)] {
        for n in list.iter() {
            let shown = n.summary.as_ref().map_or_else(|| "undefined".to_string(), |s| s.display.clone());
            println!("{kind}\t{}\t{shown}", n.name);
        }
    }
    Ok(())
}

fn write_crossval_outputs(
    r: &CrossvalReport,
    models: &[millie_core::training::TrainedModel],
    out: &Path,
) -> Result<(), Failure> {
    write_report(r, &out.join("report.json"))?;
    for (i, t) in models.iter().enumerate() {
        save_checkpoint(t, &out.join(format!("fold_{i}.ckpt")))?;
        write_text(&out.join(format!("fold_{i}_training.tsv")), &format_training_log(&t.history))?;
    }
    let mut tsv = format!("sample\tfold\tlabel\t{}\tpredicted\n", r.classes.join("\t"));
    for p in &r.predictions {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            p.id,
            p.fold,
            p.label,
            fmt_probs(&p.probabilities),
            p.predicted
        ));
    }
    write_text(&out.join("predictions.tsv"), &tsv)?;
    for (k, class) in r.classes.iter().enumerate() {
        let scores: Vec<f64> = r.predictions.iter().map(|p| p.probabilities[k] as f64).collect();
        let labels: Vec<bool> = r.predictions.iter().map(|p| p.label == *class).collect();
        if let Ok(curve) = roc_auc(&scores, &labels) {
            write_text(&out.join(format!("roc_sample_{}.csv", slug(class))), &roc_csv(&curve))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionLine {
    sample: String,
    probabilities: Vec<f32>,
    predicted: String,
}

#[derive(Serialize)]
struct PredictReport<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    checkpoint: String,
    classes: &'a [String],
    predictions: Vec<PredictionLine>,
}

fn checkpoint_model(path: &Path) -> Result<ModelParams, Failure> {
    Ok(load_checkpoint(path)?.model)
}

pub fn predict(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, out: &Path) -> Result<(), Failure> {
    let model = checkpoint_model(checkpoint)?;
    let m = load_manifest(manifest)?;
    if m.kind != ManifestKind::Patches {
        return Err(Failure::config("prediction needs a manifest of kind `patches`; run segment first"));
    }
    if !m.classes.is_empty() && m.classes != model.classes {
        return Err(Failure::config(format!(
            "label space mismatch: checkpoint has [{}], manifest has [{}]",
            model.classes.join(", "),
            m.classes.join(", ")
        )));
    }
    let side = model.backbone.input_side;
    let inputs: Vec<Vec<ModelInput>> = m
        .samples
        .iter()
        .map(|s| load_inputs(&s.paths, side))
        .collect::<Result<_, _>>()?;
    let probs: Vec<Vec<f32>> = inputs
        .par_iter()
        .map(|x| evaluate_with_tta(&model, x, &cfg.augment, cfg.train.tta_replicas, cfg.train.seed))
        .collect::<Result<_, _>>()?;
    let mut tsv = format!("sample\t{}\tpredicted\n", model.classes.join("\t"));
    let mut lines = Vec::new();
    for (s, p) in m.samples.iter().zip(probs) {
        let predicted = model.classes[argmax(&p)].clone();
        tsv.push_str(&format!("{}\t{}\t{predicted}\n", s.id, fmt_probs(&p)));
        lines.push(PredictionLine {
            sample: s.id.clone(),
            probabilities: p,
            predicted,
        });
    }
    create_dir(out)?;
    write_text(&out.join("predictions.tsv"), &tsv)?;
    write_report(
        &PredictReport {
            tool: TOOL_NAME,
            version: TOOL_VERSION,
            config: cfg,
            checkpoint: checkpoint.display().to_string(),
            classes: &model.classes,
            predictions: lines,
        },
        &out.join("predict.json"),
    )?;
    print!("{tsv}");
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Failure::io(e.to_string()))?;
        let is_png = entry.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("png"));
        if entry.file_type().is_file() && is_png {
            out.push(entry.into_path());
        }
    }
    if out.is_empty() {
        return Err(Failure::io(format!("{}: no PNG patches found", dir.display())));
    }
    Ok(out)
}

#[derive(Serialize)]
struct CellMetrics {
    auc: Vec<NamedAuc>,
    confusion: ConfusionMatrix,
}

#[derive(Serialize)]
struct ScoreReport<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    classes: &'a [String],
    cells: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<CellMetrics>,
}

pub fn score_cells(
    cfg: &RunConfig,
    checkpoint: &Path,
    cells: Option<&Path>,
    patches: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let model = checkpoint_model(checkpoint)?;
    let (paths, base, ann): (Vec<PathBuf>, PathBuf, Option<CellAnnotationSet>) = match (cells, patches) {
        (Some(c), _) => {
            let ann = load_annotations(c)?;
            (ann.cells.iter().map(|x| x.path.clone()).collect(), base_of(c), Some(ann))
        }
        (None, Some(d)) => (png_files(d)?, d.to_path_buf(), None),
        (None, None) => return Err(Failure::config("give --cells or --patches")),
    };
    let inputs = load_inputs(&paths, model.backbone.input_side)?;
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let probs = score_cells_tta(&model, &refs, &cfg.augment, cfg.train.tta_replicas, cfg.train.seed)?;
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();

    create_dir(out)?;
    let mut tsv = format!("cell\t{}\tpredicted", model.classes.join("\t"));
    tsv.push_str(if ann.is_some() { "\ttype\n" } else { "\n" });
    for (i, (path, p)) in paths.iter().zip(&probs).enumerate() {
        tsv.push_str(&format!("{}\t{}\t{}", rel(path, &base), fmt_probs(p), model.classes[preds[i]]));
        match &ann {
            Some(a) => tsv.push_str(&format!("\t{}\n", a.cells[i].cell_type)),
            None => tsv.push('\n'),
        }
    }
    write_text(&out.join("scores.tsv"), &tsv)?;

    let metrics = match &ann {
        None => None,
        Some(a) => {
            let type_class = type_classes(&a.cell_types, &model.classes, &cfg.metrics)?;
            let types: Vec<usize> = a.cells.iter().map(|c| a.type_index(&c.cell_type).expect("validated")).collect();
            let mut auc = Vec::new();
            for (t, name) in a.cell_types.iter().enumerate() {
                let scores: Vec<f64> = probs.iter().map(|p| p[type_class[t]] as f64).collect();
                let labels: Vec<bool> = types.iter().map(|&x| x == t).collect();
                let curve = roc_auc(&scores, &labels).ok();
                if let Some(c) = &curve {
                    write_text(&out.join(format!("roc_{}.csv", slug(name))), &roc_csv(c))?;
                }
                let value = curve.map(|c| c.auc);
                println!(
                    "auc\t{name}\t{}",
                    value.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
                );
                auc.push(NamedAuc {
                    name: name.clone(),
                    auc: value,
                });
            }
            let truth: Vec<usize> = types.iter().map(|&t| type_class[t]).collect();
            Some(CellMetrics {
                auc,
                confusion: confusion(&preds, &truth, &model.classes)?,
            })
        }
    };
    write_report(
        &ScoreReport {
            tool: TOOL_NAME,
            version: TOOL_VERSION,
            config: cfg,
            classes: &model.classes,
            cells: paths.len(),
            metrics,
        },
        &out.join("scores.json"),
    )?;
    println!("scored {} cells", paths.len());
    Ok(())
}

#[derive(Serialize)]
struct PcaReport<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    layer: String,
    cells: usize,
    explained_variance_ratio: Vec<f64>,
    silhouette: Option<f64>,
}

pub fn pca(cfg: &RunConfig, checkpoint: &Path, cells: &Path, layer: EmbeddingLayer, out: &Path) -> Result<(), Failure> {
    let model = checkpoint_model(checkpoint)?;
    let ann = load_annotations(cells)?;
    if ann.cells.len() < 3 {
        return Err(Failure::config(format!("PCA needs at least 3 annotated patches, got {}", ann.cells.len())));
    }
    let vectors: Vec<Vec<f64>> = ann
        .cells
        .par_iter()
        .map(|c| {
            let patch = PatchImage::load(&c.path).map_err(DataError::from)?;
            let e = extract_embedding(&patch, &model, layer).map_err(Failure::from)?;
            Ok(e.into_iter().map(f64::from).collect())
        })
        .collect::<Result<_, Failure>>()?;
    let proj = pca_project(&vectors, 2)?;
    let base = base_of(cells);
    let ids: Vec<String> = ann.cells.iter().map(|c| rel(&c.path, &base)).collect();
    let labels: Vec<String> = ann.cells.iter().map(|c| c.cell_type.clone()).collect();
    let type_idx: Vec<usize> = ann.cells.iter().map(|c| ann.type_index(&c.cell_type).expect("validated")).collect();
    let silhouette = silhouette_score(&proj.coords, &type_idx).ok();
    create_dir(out)?;
    write_text(&out.join("pca.csv"), &pca_csv(&ids, &proj.coords, &labels))?;
    write_text(
        &out.join("pca.svg"),
        &scatter_svg(&proj.coords, &labels, &format!("PCA of {layer} embeddings")),
    )?;
    write_report(
        &PcaReport {
            tool: TOOL_NAME,
            version: TOOL_VERSION,
            config: cfg,
            layer: layer.to_string(),
            cells: ids.len(),
            explained_variance_ratio: proj.explained_variance_ratio.clone(),
            silhouette,
        },
        &out.join("pca.json"),
    )?;
    println!(
        "explained variance ratio {:.4}, {:.4}; silhouette {}",
        proj.explained_variance_ratio[0],
        proj.explained_variance_ratio[1],
        silhouette.map_or_else(|| "undefined".to_string(), |s| format!("{s:.4}"))
    );
    Ok(())
}
