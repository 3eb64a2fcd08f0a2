use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use funcnet::classifier::{train_classifier, ClassifierConfig, VolumeClassifier};
use funcnet::datagen::{adjacency_frequency, Dataset};
use funcnet::eval::{classification_report, diversity_report, mean_seg_accuracy, pr_curve, scene_points};
use funcnet::export::{export_scene, ExportFormat};
use funcnet::fsim::{train_fsim, Corpus, FsimModel, Query, RetrievalDirection};
use funcnet::graphcut::{alpha_expansion, energy, GraphcutInstance};
use funcnet::igen::{assemble_scene, phase_split, train_igen, GenModel};
use funcnet::iseg::{finish_segmentation, train_iseg, validate_adjacency, SegModel};
use funcnet::refine::{build_library, refine_scene, train_part_classifier, RetrievalIndex};
use funcnet::voxel::{
    normalize_object, read_manifest, read_scene_file, write_scene_file, ObjectGrid, SceneGrid, SceneRecord,
    SegmentedScene, TransformParams, VoxelState,
};

use crate::config::PipelineConfig;
use crate::{Cli, ClassifyArgs, Command, EvalCommand};

const INDEX_FILE: &str = "index.json";
const CLASSIFIER_FILE: &str = "classifier.fxck";

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let config = PipelineConfig::load(cli.config.as_deref(), cli.res)?;
    let seed = cli.seed;
    match cli.command {
        Command::GenData { categories, scenes_per_category, out } => {
            let res = cli.res.map_or(config.fsim.res, usize::from);
            let ds = Dataset::generate(categories, scenes_per_category, res, seed)?;
            std::fs::create_dir_all(&out)?;
            ds.save(&out)?;
            log::info!("wrote {} scenes to {}", ds.len(), out.display());
        }
        Command::TrainFsim { direction, data, epochs, margin, gmm_n, classifier_weight, out } => {
            let ds = load_dataset(&data)?;
            let mut fc = config.fsim.clone();
            fc.categories = ds.num_categories.max(fc.categories);
            if let Some(m) = margin {
                fc.margin = m;
            }
            if let Some(n) = gmm_n {
                fc.components = n;
            }
            let all: Vec<usize> = (0..ds.len()).collect();
            let (model, log) = train_fsim(&ds, &all, fc, direction.into(), &config.train(epochs, seed), classifier_weight)?;
            model.save(&out)?;
            log::info!("final triplet loss {:?}", log.triplet.last());
        }
        Command::TrainIgen { data, epochs, out } => {
            let ds = load_dataset(&data)?;
            let all: Vec<usize> = (0..ds.len()).collect();
            let (model, log) = train_igen(&ds, &all, config.igen.clone(), &config.train(0, seed), phase_split(epochs))?;
            model.save(&out)?;
            log::info!(
                "final placement {:?}, synthesis {:?}",
                log.placement.last(),
                log.synthesis.last()
            );
        }
        Command::TrainIseg { data, epochs, out, adjacency_out } => {
            let ds = load_dataset(&data)?;
            let all: Vec<usize> = (0..ds.len()).collect();
            let (model, losses) = train_iseg(&ds, &all, config.iseg.clone(), &config.train(epochs, seed))?;
            model.save(&out)?;
            let segs: Vec<&SegmentedScene> = ds.samples.iter().map(|s| &s.seg).collect();
            let f = adjacency_frequency(&segs, model.config.labels);
            let path = adjacency_out.unwrap_or_else(|| sibling(&out, "adjacency.csv"));
            write_matrix(&path, &f, model.config.labels)?;
            log::info!("final loss {:?}; adjacency written to {}", losses.last(), path.display());
        }
        Command::Retrieve { model, query, corpus, k, direction, out } => {
            let model = FsimModel::load(&model)?;
            let ds = load_dataset(&corpus)?;
            let names = corpus_names(&corpus)?;
            let direction: RetrievalDirection = direction.into();
            let objects: Vec<ObjectGrid> = ds.samples.iter().map(|s| s.central_normalized.clone()).collect();
            let scenes: Vec<SceneGrid> = ds.samples.iter().map(|s| s.scene().clone()).collect();
            let mut w = csv::Writer::from_writer(output(out.as_deref())?);
            w.write_record(["query_id", "rank", "item_id", "score"])?;
            for q in &query {
                let rec = read_scene_file(q).with_context(|| format!("reading {}", q.display()))?;
                let id = q.file_stem().and_then(|s| s.to_str()).unwrap_or("query").to_string();
                let hits = match direction {
                    RetrievalDirection::ObjectToScene => {
                        let (obj, _) = normalize_object(&rec.seg.scene().central_object())?;
                        model.retrieve(Query::Object(&obj), Corpus::Scenes(&scenes), k, direction)?
                    }
                    RetrievalDirection::SceneToObject => {
                        model.retrieve(Query::Scene(rec.seg.scene()), Corpus::Objects(&objects), k, direction)?
                    }
                    RetrievalDirection::SceneToScene => {
                        model.retrieve(Query::Scene(rec.seg.scene()), Corpus::Scenes(&scenes), k, direction)?
                    }
                };
                for (rank, h) in hits.iter().enumerate() {
                    w.write_record([id.clone(), (rank + 1).to_string(), names[h.index].clone(), h.score.to_string()])?;
                }
            }
            w.flush()?;
        }
        Command::Synth { model, object, label, no_label, no_transformer, out } => {
            let model = GenModel::load(&model)?;
            let rec = read_scene_file(&object)?;
            let (obj, _) = normalize_object(&rec.seg.scene().central_object())?;
            if !no_label && label.is_none() {
                bail!(funcnet::Error::Invalid("synth needs --label or --no-label".into()));
            }
            let label = if no_label { None } else { label };
            let s = model.synthesize(&obj, label)?;
            let transform = if no_transformer { TransformParams::IDENTITY } else { s.transform };
            let scene = assemble_scene(&obj, &transform, &s.context, model.config.threshold)?;
            // Generated context carries no interaction type: one placeholder label.
            let labels = scene.states().iter().map(|&st| (st == VoxelState::Interacting).then_some(0)).collect();
            let rec = SceneRecord {
                seg: SegmentedScene::new(scene, labels, 1)?,
                num_categories: model.config.categories,
                category: label.unwrap_or(0),
                transform,
            };
            write_scene_file(&out, &rec)?;
        }
        Command::Segment { model, scene, label, adjacency, no_smooth, out } => {
            let model = SegModel::load(&model)?;
            let rec = read_scene_file(&scene)?;
            let f = read_matrix(&adjacency, model.config.labels)?;
            let grid = rec.seg.scene();
            let probs = model.segment_probs(&grid.interacting_mask(), label)?;
            let seg = finish_segmentation(grid, &probs, &f, !no_smooth)?;
            write_scene_file(&out, &SceneRecord { seg, category: label, ..rec })?;
        }
        Command::BuildIndex { scenes_per_category, epochs, out } => {
            let res = config.fsim.res;
            let parts = build_library(funcnet::datagen::NUM_CATEGORIES, scenes_per_category, res, seed)?;
            let labels = funcnet::datagen::NUM_LABELS;
            let (classifier, _) = train_part_classifier(&parts, res, labels, &config.train(epochs, seed))?;
            let index = RetrievalIndex::build(parts, &classifier)?;
            std::fs::create_dir_all(&out)?;
            index.save(out.join(INDEX_FILE))?;
            classifier.save(out.join(CLASSIFIER_FILE))?;
            log::info!("indexed {} parts in {}", index.len(), out.display());
        }
        Command::Refine { model, index, scene, out } => {
            let classifier = VolumeClassifier::load(&model)?;
            let index = RetrievalIndex::load(index.join(INDEX_FILE))?;
            let rec = read_scene_file(&scene)?;
            let refined = refine_scene(&rec.seg, &index, &classifier)?;
            refined.save(&out)?;
            let seg = refined.render(&index)?;
            let mesh = out.with_extension("obj");
            export_scene(&mesh, &SceneRecord { seg, ..rec }, ExportFormat::Obj)?;
            log::info!("placed {} parts; mesh written to {}", refined.parts.len(), mesh.display());
        }
        Command::Eval { report } => eval(report, &config, seed)?,
        Command::Export { scene, out, format } => {
            let rec = read_scene_file(&scene)?;
            let format = match format {
                Some(f) => f.parse()?,
                None => ExportFormat::from_path(&out)?,
            };
            export_scene(&out, &rec, format)?;
        }
        Command::GraphcutSolve { instance } => {
            let text = std::fs::read_to_string(&instance)?;
            let inst: GraphcutInstance = serde_json::from_str(&text).map_err(funcnet::Error::from)?;
            let (g, e) = inst.build()?;
            let labels = alpha_expansion(&g, &e, &e.data_argmin())?;
            let result = serde_json::json!({ "labels": labels, "energy": energy(&g, &e, &labels) });
            println!("{result}");
        }
    }
    Ok(())
}

fn eval(report: EvalCommand, config: &PipelineConfig, seed: u64) -> Result<()> {
    match report {
        EvalCommand::Pr { model, data, direction, out } => {
            let model = FsimModel::load(&model)?;
            let ds = load_dataset(&data)?;
            let labels = ds.categories();
            let objects: Vec<ObjectGrid> = ds.samples.iter().map(|s| s.central_normalized.clone()).collect();
            let scenes: Vec<SceneGrid> = ds.samples.iter().map(|s| s.scene().clone()).collect();
            let direction: RetrievalDirection = direction.into();
            let (q, c) = match direction {
                RetrievalDirection::ObjectToScene => (Corpus::Objects(&objects), Corpus::Scenes(&scenes)),
                RetrievalDirection::SceneToObject => (Corpus::Scenes(&scenes), Corpus::Objects(&objects)),
                RetrievalDirection::SceneToScene => (Corpus::Scenes(&scenes), Corpus::Scenes(&scenes)),
            };
            let curve = pr_curve(&model, q, &labels, c, &labels, direction)?;
            let mut w = csv::Writer::from_writer(output(out.as_deref())?);
            w.write_record(["direction", "recall", "precision"])?;
            for p in &curve.points {
                w.write_record([curve.direction.to_string(), p.recall.to_string(), p.precision.to_string()])?;
            }
            w.flush()?;
        }
        EvalCommand::Classify(args) => classify(args, config, seed)?,
        EvalCommand::Diversity { model, data } => {
            let model = GenModel::load(&model)?;
            let ds = load_dataset(&data)?;
            let objs: Vec<&ObjectGrid> = ds.samples.iter().map(|s| &s.central_normalized).collect();
            let labels: Vec<Option<usize>> = ds.samples.iter().map(|s| Some(s.category)).collect();
            let generated: Vec<SceneGrid> = objs
                .iter()
                .zip(model.synthesize_batch(&objs, &labels)?)
                .map(|(x, s)| assemble_scene(x, &s.transform, &s.context, model.config.threshold))
                .collect::<funcnet::Result<_>>()?;
            let training: Vec<&SceneGrid> = ds.samples.iter().map(|s| s.scene()).collect();
            let gen_refs: Vec<&SceneGrid> = generated.iter().collect();
            let stats = diversity_report(&scene_points(&training), &scene_points(&gen_refs))?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        EvalCommand::Segment { model, data, adjacency } => {
            let model = SegModel::load(&model)?;
            let ds = load_dataset(&data)?;
            let f = read_matrix(&adjacency, model.config.labels)?;
            let truth: Vec<&SegmentedScene> = ds.samples.iter().map(|s| &s.seg).collect();
            let mut hard = Vec::new();
            let mut smooth = Vec::new();
            for s in &ds.samples {
                let probs = model.segment_probs(&s.scene().interacting_mask(), s.category)?;
                hard.push(finish_segmentation(s.scene(), &probs, &f, false)?);
                smooth.push(finish_segmentation(s.scene(), &probs, &f, true)?);
            }
            let result = serde_json::json!({
                "scenes": ds.len(),
                "hard_max": mean_seg_accuracy(&hard, &truth)?,
                "smoothed": mean_seg_accuracy(&smooth, &truth)?,
            });
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
    }
    Ok(())
}

fn classify(args: ClassifyArgs, config: &PipelineConfig, seed: u64) -> Result<()> {
    let fsim = FsimModel::load(&args.model)?;
    let reference = load_dataset(&args.data)?;
    let evaluated = match &args.eval_data {
        Some(p) => load_dataset(p)?,
        None => reference.clone(),
    };
    let ref_objects: Vec<&ObjectGrid> = reference.samples.iter().map(|s| &s.central_normalized).collect();
    let ref_labels = reference.categories();
    let cc = ClassifierConfig::new(reference.res, fsim.config.categories);
    let (classifier, _) = train_classifier(&ref_objects, &ref_labels, cc, &config.train(args.epochs, seed))?;
    let scenes: Vec<SceneGrid> = reference.samples.iter().map(|s| s.scene().clone()).collect();
    let objects: Vec<ObjectGrid> = evaluated.samples.iter().map(|s| s.central_normalized.clone()).collect();
    let report = classification_report(&fsim, &classifier, &objects, &evaluated.categories(), &scenes, &ref_labels)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn corpus_names(dir: &Path) -> Result<Vec<String>> {
    Ok(read_manifest(dir.join("manifest.json"))?.scenes.into_iter().map(|e| e.file).collect())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_matrix(path: &Path, m: &[f64], n: usize) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in m.chunks(n) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix(path: &Path, n: usize) -> Result<Vec<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut values = Vec::with_capacity(n * n);
    for row in r.records() {
        for field in row?.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| funcnet::Error::Invalid(format!("adjacency entry {field:?} is not a number")))?;
            values.push(v);
        }
    }
    validate_adjacency(&values, n)?;
    Ok(values)
}
