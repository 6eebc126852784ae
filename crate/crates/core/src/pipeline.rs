//! The five pipeline stages over the on-disk artifact layout:
//!
//! ```text
//! <output_dir>/isolines.jsonl            ingest
//! <output_dir>/rejects.jsonl             ingest
//! <output_dir>/dataset/manifest.jsonl    build-dataset (append-only, resumable)
//! <output_dir>/dataset/failures.jsonl    build-dataset
//! <output_dir>/dataset/<id>/{image,mask,composite}.png
//! <output_dir>/captions.jsonl            caption-embed
//! <output_dir>/embeddings.jsonl          caption-embed
//! <output_dir>/caption_failures.jsonl    caption-embed
//! <output_dir>/features.jsonl            train-eval
//! <output_dir>/cv_report.json            train-eval (no timestamps)
//! <output_dir>/run_manifest.json         every stage (timestamped)
//! <output_dir>/report.{md,json}          report
//! ```
//!
//! Each stage reads only upstream artifacts; a missing one is reported with
//! the command that produces it.

use crate::buildings::{
    aggregate_composition, buildings_in, enrich_buildings, BuildingRecord, CompositionDiagnostics,
    CompositionVector,
};
use crate::config::{CaptionerConfig, EmbedderConfig, ModelKind, RunConfig};
use crate::eval::{
    mae, quintile_strata, r_squared, stratified_kfold, tercile_token_trends, CvReport, EvalError,
    FoldAssignment, FoldMetrics, ModelResult, TokenTrend,
};
use crate::features::{assemble_parts, AblationFlags, FeatureRow, Standardizer, SCHEMA_VERSION};
use crate::geometry::{sampling_window, IsolineRecord};
use crate::imagery::{
    choose_zoom, compose_rgba, mosaic_and_crop, rasterize_mask, tiles_for_window, HttpClient,
    RasterImage, RetryPolicy, TileClient, TileFetcher,
};
use crate::io::{self, read_jsonl, write_json, write_jsonl, DataError, Reject};
use crate::models::{fit_linear, fit_ridge, mlp_train, select_ridge_lambda, RIDGE_INNER_FOLDS};
use crate::semantics::{
    caption_region, canonicalize_caption, embed_text, CaptionProvider, EmbeddingProvider,
    HashingEmbedder, HttpCaptionProvider, HttpEmbeddingProvider, ImageStatsCaptioner,
    PromptTemplate, SemanticCaption, SemanticEmbedding, PROMPT_VERSION,
};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Duration;
use thiserror::Error;

pub const ISOLINES_FILE: &str = "isolines.jsonl";
pub const REJECTS_FILE: &str = "rejects.jsonl";
pub const DATASET_DIR: &str = "dataset";
pub const MANIFEST_FILE: &str = "dataset/manifest.jsonl";
pub const FAILURES_FILE: &str = "dataset/failures.jsonl";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const CAPTION_FAILURES_FILE: &str = "caption_failures.jsonl";
pub const FEATURES_FILE: &str = "features.jsonl";
pub const CV_REPORT_FILE: &str = "cv_report.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const REPORT_MD_FILE: &str = "report.md";
pub const REPORT_JSON_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path} not found; run `heatprompt {command}` first")]
    MissingArtifact { path: PathBuf, command: &'static str },
    #[error("{path} is listed in {listed_in} but missing; restore it or remove its line and rerun `heatprompt {command}`")]
    DeletedArtifact {
        path: PathBuf,
        listed_in: PathBuf,
        command: &'static str,
    },
    #[error("no valid isolines ({rejects} rejected); see {REJECTS_FILE}")]
    NoValidRecords { rejects: usize },
    #[error("{0}")]
    Stage(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// Process exit code for a fatal error.
    pub fn exit_code(&self) -> i32 {
        1
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Outcome counts of one stage run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageSummary {
    pub stage: &'static str,
    pub total: usize,
    pub processed: usize,
    /// Already present from an earlier run.
    pub skipped: usize,
    pub failed: usize,
}

impl StageSummary {
    /// Failure share among the samples attempted in this run.
    pub fn failure_rate(&self) -> f64 {
        let attempted = self.processed + self.failed;
        if attempted == 0 {
            0.0
        } else {
            self.failed as f64 / attempted as f64
        }
    }

    pub fn exceeds(&self, threshold: f64) -> bool {
        self.failure_rate() > threshold
    }
}

impl std::fmt::Display for StageSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} total, {} processed, {} skipped, {} failed",
            self.stage, self.total, self.processed, self.skipped, self.failed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub id: String,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowInfo {
    pub cx: f64,
    pub cy: f64,
    pub side_m: f64,
    pub zoom: u8,
    pub zoom_clamped: bool,
}

/// One line of the dataset manifest: the aligned image, mask and composite
/// of an isoline with its target and building composition. Paths are
/// relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub composite_path: String,
    pub y: f64,
    pub area_m2: f64,
    pub perimeter_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_prediction_mwh_a: Option<f64>,
    pub window: WindowInfo,
    pub composition: CompositionVector,
    pub composition_diagnostics: CompositionDiagnostics,
}

impl SampleEntry {
    pub fn paths(&self) -> [&str; 3] {
        [&self.image_path, &self.mask_path, &self.composite_path]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub canonical: String,
    pub caption: SemanticCaption,
}

/// Embedding line; readers that only need `{id, values}` ignore the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    #[serde(flatten)]
    pub embedding: SemanticEmbedding,
}

fn out_path(cfg: &RunConfig, rel: &str) -> PathBuf {
    cfg.paths.output_dir.join(rel)
}

fn read_required<T: serde::de::DeserializeOwned>(path: &Path, command: &'static str) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact {
            path: path.to_owned(),
            command,
        });
    }
    Ok(read_jsonl(path)?)
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Records what ran, with which seeds, config hash and versions. This is
/// the only artifact carrying a timestamp.
fn write_run_manifest(cfg: &RunConfig, command: &str, summary: Value) -> Result<()> {
    let path = out_path(cfg, RUN_MANIFEST_FILE);
    let mut runs: BTreeMap<String, Value> = if path.exists() {
        io::read_json(&path).unwrap_or_default()
    } else {
        BTreeMap::new()
    };
    runs.insert(
        command.to_owned(),
        json!({
            "finished_unix_s": unix_now(),
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "feature_schema": SCHEMA_VERSION,
            "prompt_version": PROMPT_VERSION,
            "crate_version": env!("CARGO_PKG_VERSION"),
            "summary": summary,
        }),
    );
    write_json(&path, &runs)?;
    Ok(())
}

fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| PipelineError::Stage(e.to_string()))
}

/// Validates isolines, writing records and per-feature rejects.
pub fn ingest(cfg: &RunConfig) -> Result<(usize, Vec<Reject>)> {
    cfg.validate()?;
    let fc = io::read_feature_collection(&cfg.paths.isolines)?;
    let (records, rejects) = io::parse_isolines(&fc);
    for r in &rejects {
        warn!("rejected feature {} ({:?}): {}", r.index, r.id, r.reason);
    }
    write_jsonl(&out_path(cfg, ISOLINES_FILE), &records)?;
    write_jsonl(&out_path(cfg, REJECTS_FILE), &rejects)?;
    write_run_manifest(
        cfg,
        "ingest",
        json!({ "records": records.len(), "rejects": rejects.len() }),
    )?;
    if records.is_empty() {
        return Err(PipelineError::NoValidRecords { rejects: rejects.len() });
    }
    info!("ingest: {} records, {} rejects", records.len(), rejects.len());
    Ok((records.len(), rejects))
}

/// Tile client for the configured template scheme.
pub fn tile_client(cfg: &RunConfig) -> Result<Box<dyn TileClient>> {
    let t = &cfg.imagery.tile_template;
    if t.starts_with(crate::synthetic::SCHEME) {
        Ok(Box::new(crate::synthetic::ProceduralTileClient::default()))
    } else if t.starts_with("http://") || t.starts_with("https://") {
        Ok(Box::new(HttpClient::new(
            Duration::from_secs(cfg.imagery.timeout_s),
            &cfg.imagery.user_agent,
        )))
    } else {
        Err(PipelineError::Stage(format!("unsupported tile template scheme: {t}")))
    }
}

pub fn load_buildings(cfg: &RunConfig) -> Result<Vec<BuildingRecord>> {
    let Some(path) = &cfg.paths.buildings else {
        warn!("no buildings configured; composition vectors will be zero");
        return Ok(Vec::new());
    };
    let fc = io::read_feature_collection(path)?;
    let (features, rejects) = io::parse_buildings(&fc);
    if !rejects.is_empty() {
        warn!("{} building footprints rejected", rejects.len());
    }
    let lod2 = cfg.paths.lod2.as_deref().map(io::read_lod2).transpose()?.unwrap_or_default();
    let census = cfg.paths.census.as_deref().map(io::read_census).transpose()?.unwrap_or_default();
    Ok(enrich_buildings(&features, &lod2, &census, &cfg.buildings))
}

/// File-system-safe directory name for a sample id.
fn sample_dir_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    if safe == id && !id.starts_with('.') {
        safe
    } else {
        format!("{safe}-{}", &crate::hashing::sha256_hex(id.as_bytes())[..8])
    }
}

fn build_sample(
    rec: &IsolineRecord,
    fetcher: &TileFetcher<'_>,
    buildings: &[BuildingRecord],
    output_dir: &Path,
) -> std::result::Result<SampleEntry, String> {
    let window = sampling_window(&rec.geometry).map_err(|e| e.to_string())?;
    let zoom = choose_zoom(&window);
    if zoom.clamped {
        warn!("isoline {}: zoom clamped to {}", rec.id, zoom.zoom);
    }
    let coords = tiles_for_window(&window, zoom.zoom).map_err(|e| e.to_string())?;
    let tiles = fetcher.fetch_all(&coords, 1).map_err(|e| e.to_string())?;
    let image = mosaic_and_crop(&tiles, &window, zoom.zoom).map_err(|e| e.to_string())?;
    let mask = rasterize_mask(&rec.geometry, &window).map_err(|e| e.to_string())?;
    let composite = compose_rgba(&image, &mask).map_err(|e| e.to_string())?;

    let rel = format!("{DATASET_DIR}/{}", sample_dir_name(&rec.id));
    let paths = [
        format!("{rel}/image.png"),
        format!("{rel}/mask.png"),
        format!("{rel}/composite.png"),
    ];
    for (img, p) in [&image, &mask, &composite].into_iter().zip(&paths) {
        img.save_png(&output_dir.join(p)).map_err(|e| e.to_string())?;
    }
    let members = buildings_in(&rec.geometry, buildings);
    let (composition, composition_diagnostics) = aggregate_composition(&members);
    let [image_path, mask_path, composite_path] = paths;
    Ok(SampleEntry {
        id: rec.id.clone(),
        image_path,
        mask_path,
        composite_path,
        y: rec.heat_demand_mwh_a,
        area_m2: rec.area_m2,
        perimeter_m: rec.perimeter_m,
        baseline_prediction_mwh_a: rec.baseline_prediction_mwh_a,
        window: WindowInfo {
            cx: window.center.x,
            cy: window.center.y,
            side_m: window.side_m,
            zoom: zoom.zoom,
            zoom_clamped: zoom.clamped,
        },
        composition,
        composition_diagnostics,
    })
}

/// Reads the manifest and checks that every listed file still exists.
pub fn read_manifest(cfg: &RunConfig) -> Result<Vec<SampleEntry>> {
    let path = out_path(cfg, MANIFEST_FILE);
    let entries: Vec<SampleEntry> = read_required(&path, "build-dataset")?;
    for e in &entries {
        for p in e.paths() {
            let full = cfg.paths.output_dir.join(p);
            if !full.is_file() {
                return Err(PipelineError::DeletedArtifact {
                    path: full,
                    listed_in: path,
                    command: "build-dataset",
                });
            }
        }
    }
    Ok(entries)
}

/// Window → tiles → image, mask, composite → composition for every isoline
/// not yet in the manifest. Per-sample failures are recorded and skipped.
pub fn build_dataset(cfg: &RunConfig, client: &dyn TileClient) -> Result<StageSummary> {
    cfg.validate()?;
    let records: Vec<IsolineRecord> = read_required(&out_path(cfg, ISOLINES_FILE), "ingest")?;
    let manifest_path = out_path(cfg, MANIFEST_FILE);
    let done: HashSet<String> = if manifest_path.exists() {
        read_manifest(cfg)?.into_iter().map(|e| e.id).collect()
    } else {
        HashSet::new()
    };
    let todo: Vec<&IsolineRecord> = records.iter().filter(|r| !done.contains(&r.id)).collect();
    let buildings = if todo.is_empty() { Vec::new() } else { load_buildings(cfg)? };
    let fetcher = TileFetcher::new(cfg.imagery.tile_template.clone(), client)
        .with_cache(&cfg.paths.cache_dir)
        .with_retry(cfg.imagery.retry());
    let pool = thread_pool(cfg.parallelism)?;
    let dataset_dir = out_path(cfg, DATASET_DIR);
    std::fs::create_dir_all(&dataset_dir).map_err(|source| DataError::Io {
        path: dataset_dir,
        source,
    })?;

    let mut failures = Vec::new();
    let mut processed = 0;
    // Chunks keep the manifest append order equal to input order while
    // letting a crash lose at most one chunk of work.
    for chunk in todo.chunks(cfg.parallelism.max(1) * 4) {
        let results: Vec<_> = pool.install(|| {
            chunk
                .par_iter()
                .map(|rec| build_sample(rec, &fetcher, &buildings, &cfg.paths.output_dir))
                .collect()
        });
        for (rec, res) in chunk.iter().zip(results) {
            match res {
                Ok(entry) => {
                    io::append_jsonl(&manifest_path, &entry)?;
                    processed += 1;
                }
                Err(reason) => {
                    warn!("isoline {}: {reason}", rec.id);
                    failures.push(FailureRecord {
                        id: rec.id.clone(),
                        stage: "build-dataset".into(),
                        reason,
                    });
                }
            }
        }
    }
    write_jsonl(&out_path(cfg, FAILURES_FILE), &failures)?;
    let summary = StageSummary {
        stage: "build-dataset",
        total: records.len(),
        processed,
        skipped: records.len() - todo.len(),
        failed: failures.len(),
    };
    write_run_manifest(cfg, "build-dataset", serde_json::to_value(summary).unwrap_or_default())?;
    info!("{summary}");
    Ok(summary)
}

pub fn caption_provider(cfg: &RunConfig) -> Box<dyn CaptionProvider> {
    match &cfg.semantics.captioner {
        CaptionerConfig::ImageStats => Box::new(ImageStatsCaptioner),
        CaptionerConfig::Http(c) => Box::new(HttpCaptionProvider::new(c.clone())),
    }
}

pub fn embedding_provider(cfg: &RunConfig) -> Box<dyn EmbeddingProvider> {
    match &cfg.semantics.embedder {
        EmbedderConfig::Hashing => Box::new(HashingEmbedder),
        EmbedderConfig::Http(c) => Box::new(HttpEmbeddingProvider::new(c.clone())),
    }
}

fn caption_sample(
    cfg: &RunConfig,
    entry: &SampleEntry,
    prompt: &PromptTemplate,
    captioner: &dyn CaptionProvider,
    embedder: &dyn EmbeddingProvider,
    retry: &RetryPolicy,
) -> std::result::Result<(CaptionRecord, EmbeddingRecord), String> {
    let composite = RasterImage::load_png(&cfg.paths.output_dir.join(&entry.composite_path), 4)
        .map_err(|e| e.to_string())?;
    let cache = Some(cfg.paths.cache_dir.as_path());
    let caption = caption_region(&composite, prompt, captioner, cache, retry).map_err(|e| e.to_string())?;
    let canonical = canonicalize_caption(&caption);
    let embedding = embed_text(&canonical, embedder, cache, retry).map_err(|e| e.to_string())?;
    Ok((
        CaptionRecord {
            id: entry.id.clone(),
            canonical,
            caption,
        },
        EmbeddingRecord {
            id: entry.id.clone(),
            embedding,
        },
    ))
}

/// Captions every composite and embeds the canonical caption. Results come
/// from the content-addressed cache when possible, so reruns are cheap.
pub fn caption_embed(
    cfg: &RunConfig,
    captioner: &dyn CaptionProvider,
    embedder: &dyn EmbeddingProvider,
) -> Result<StageSummary> {
    cfg.validate()?;
    let entries = read_manifest(cfg)?;
    let prompt = PromptTemplate::with_role(cfg.semantics.role.clone());
    let retry = cfg.imagery.retry();
    let pool = thread_pool(cfg.parallelism)?;
    let results: Vec<_> = pool.install(|| {
        entries
            .par_iter()
            .map(|e| caption_sample(cfg, e, &prompt, captioner, embedder, &retry))
            .collect()
    });
    let (mut captions, mut embeddings, mut failures) = (Vec::new(), Vec::new(), Vec::new());
    for (entry, res) in entries.iter().zip(results) {
        match res {
            Ok((c, e)) => {
                captions.push(c);
                embeddings.push(e);
            }
            Err(reason) => {
                warn!("sample {}: {reason}", entry.id);
                failures.push(FailureRecord {
                    id: entry.id.clone(),
                    stage: "caption-embed".into(),
                    reason,
                });
            }
        }
    }
    write_jsonl(&out_path(cfg, CAPTIONS_FILE), &captions)?;
    write_jsonl(&out_path(cfg, EMBEDDINGS_FILE), &embeddings)?;
    write_jsonl(&out_path(cfg, CAPTION_FAILURES_FILE), &failures)?;
    let summary = StageSummary {
        stage: "caption-embed",
        total: entries.len(),
        processed: captions.len(),
        skipped: 0,
        failed: failures.len(),
    };
    write_run_manifest(
        cfg,
        "caption-embed",
        json!({
            "summary": summary,
            "captioner": captioner.id(),
            "embedder": embedder.id(),
            "prompt_hash": prompt.hash(),
        }),
    )?;
    info!("{summary}");
    Ok(summary)
}

/// Variant label: the schema tag without the schema version prefix.
pub fn variant_name(flags: &AblationFlags) -> String {
    flags
        .schema_tag()
        .trim_start_matches(SCHEMA_VERSION)
        .trim_start_matches('+')
        .to_owned()
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    seed ^ (salt + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

struct FoldJob {
    variant: usize,
    model: ModelKind,
    fold: usize,
}

struct FoldOutcome {
    test: Vec<usize>,
    predictions: Vec<f64>,
    note: Option<(String, Value)>,
}

fn run_fold(
    cfg: &RunConfig,
    x: &[Vec<f64>],
    y: &[f64],
    folds: &FoldAssignment,
    job: &FoldJob,
) -> Result<FoldOutcome> {
    let (train, test) = folds.split(job.fold);
    let train_x: Vec<&[f64]> = train.iter().map(|&i| x[i].as_slice()).collect();
    let scaler = Standardizer::fit(&train_x).map_err(|e| PipelineError::Stage(e.to_string()))?;
    let tx = scaler.transform_all(&train_x);
    let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
    let vx: Vec<Vec<f64>> = test.iter().map(|&i| scaler.transform(&x[i])).collect();
    let stage = |e: crate::models::ModelError| PipelineError::Stage(e.to_string());
    let (predictions, note) = match job.model {
        ModelKind::Linear => (fit_linear(&tx, &ty).and_then(|m| m.predict(&vx)).map_err(stage)?, None),
        ModelKind::Ridge => {
            let lambda = select_ridge_lambda(
                &tx,
                &ty,
                &cfg.training.ridge_grid,
                RIDGE_INNER_FOLDS,
                mix_seed(cfg.seed, 100 + job.fold as u64),
            )
            .map_err(stage)?;
            let pred = fit_ridge(&tx, &ty, lambda).and_then(|m| m.predict(&vx)).map_err(stage)?;
            (pred, Some(("ridge_lambda".to_owned(), json!(lambda))))
        }
        ModelKind::Mlp => {
            let m = mlp_train(&tx, &ty, cfg.training.mlp, mix_seed(cfg.seed, job.fold as u64)).map_err(stage)?;
            let pred = m.predict(&vx).map_err(stage)?;
            (pred, Some(("mlp_best_epoch".to_owned(), json!(m.history.best_epoch))))
        }
    };
    Ok(FoldOutcome {
        test,
        predictions,
        note,
    })
}

/// Stratified k-fold evaluation of every configured model on every feature
/// variant. Writes the feature matrix and `cv_report.json`.
pub fn train_eval(cfg: &RunConfig) -> Result<CvReport> {
    cfg.validate()?;
    let t = &cfg.training;
    let entries = read_manifest(cfg)?;
    let needs_semantic = t.ablations.iter().any(|a| a.semantic);
    let embeddings: HashMap<String, SemanticEmbedding> = if needs_semantic {
        read_required::<EmbeddingRecord>(&out_path(cfg, EMBEDDINGS_FILE), "caption-embed")?
            .into_iter()
            .map(|r| (r.id, r.embedding))
            .collect()
    } else {
        HashMap::new()
    };
    let samples: Vec<&SampleEntry> = entries
        .iter()
        .filter(|e| !needs_semantic || embeddings.contains_key(&e.id))
        .collect();
    let dropped = entries.len() - samples.len();
    if dropped > 0 {
        warn!("{dropped} samples without embeddings are excluded from every variant");
    }
    if samples.len() < t.folds.max(5) {
        return Err(PipelineError::Stage(format!(
            "{} usable samples is too few for {}-fold evaluation",
            samples.len(),
            t.folds
        )));
    }
    let ids: Vec<String> = samples.iter().map(|e| e.id.clone()).collect();
    let y: Vec<f64> = samples.iter().map(|e| e.y).collect();
    let strata = quintile_strata(&y)?;
    let folds = stratified_kfold(&strata, t.folds, cfg.seed)?;

    let mut matrices = Vec::with_capacity(t.ablations.len());
    let mut feature_rows = Vec::new();
    for flags in &t.ablations {
        let mut x = Vec::with_capacity(samples.len());
        for e in &samples {
            let fv = assemble_parts(
                &e.id,
                e.area_m2,
                e.perimeter_m,
                embeddings.get(&e.id),
                Some(&e.composition),
                *flags,
            )
            .map_err(|err| PipelineError::Stage(err.to_string()))?;
            feature_rows.push(FeatureRow {
                id: e.id.clone(),
                y: e.y,
                values: fv.values.clone(),
                schema_version: fv.schema_version,
            });
            x.push(fv.values);
        }
        matrices.push(x);
    }
    write_jsonl(&out_path(cfg, FEATURES_FILE), &feature_rows)?;

    let jobs: Vec<FoldJob> = (0..t.ablations.len())
        .flat_map(|variant| {
            t.models.iter().flat_map(move |&model| {
                (0..t.folds).map(move |fold| FoldJob { variant, model, fold })
            })
        })
        .collect();
    let pool = thread_pool(cfg.parallelism)?;
    let outcomes: Vec<Result<FoldOutcome>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| run_fold(cfg, &matrices[job.variant], &y, &folds, job))
            .collect()
    });

    let mut results = Vec::new();
    let mut notes: BTreeMap<String, Value> = BTreeMap::new();
    let mut outcomes = outcomes.into_iter();
    for flags in &t.ablations {
        let variant = variant_name(flags);
        for &model in &t.models {
            let mut predictions = vec![f64::NAN; y.len()];
            let mut fold_metrics = Vec::with_capacity(t.folds);
            let mut fold_notes = Vec::new();
            for fold in 0..t.folds {
                let o = outcomes.next().expect("one outcome per job")?;
                let ty: Vec<f64> = o.test.iter().map(|&i| y[i]).collect();
                fold_metrics.push(FoldMetrics {
                    fold,
                    n_test: ty.len(),
                    r2: r_squared(&ty, &o.predictions)?,
                    mae: mae(&ty, &o.predictions)?,
                });
                for (&i, &p) in o.test.iter().zip(&o.predictions) {
                    predictions[i] = p;
                }
                if let Some((key, v)) = o.note {
                    fold_notes.push((key, v));
                }
            }
            if let Some((key, _)) = fold_notes.first() {
                let key = format!("{key}/{variant}");
                notes.insert(key, Value::Array(fold_notes.into_iter().map(|(_, v)| v).collect()));
            }
            results.push(ModelResult::new(
                model.name(),
                &variant,
                &flags.schema_tag(),
                fold_metrics,
                predictions,
            ));
        }
    }

    let mut settings = notes;
    settings.insert("seed".into(), json!(cfg.seed));
    settings.insert("folds".into(), json!(t.folds));
    settings.insert("ridge_grid".into(), json!(t.ridge_grid));
    settings.insert("mlp".into(), serde_json::to_value(t.mlp).unwrap_or_default());
    settings.insert("feature_schema".into(), json!(SCHEMA_VERSION));
    settings.insert("prompt_version".into(), json!(PROMPT_VERSION));
    settings.insert("samples_without_embedding".into(), json!(dropped));

    let mut report = CvReport {
        k: t.folds,
        seed: cfg.seed,
        n_samples: y.len(),
        ids,
        y: y.clone(),
        folds: folds.folds.clone(),
        reference: String::new(),
        results,
        comparisons: Vec::new(),
        settings,
    };
    let baseline: Option<Vec<f64>> = samples.iter().map(|e| e.baseline_prediction_mwh_a).collect();
    match baseline {
        Some(pred) => {
            let mut r2s = Vec::with_capacity(t.folds);
            for f in 0..t.folds {
                let (_, test) = folds.split(f);
                let ty: Vec<f64> = test.iter().map(|&i| y[i]).collect();
                let tp: Vec<f64> = test.iter().map(|&i| pred[i]).collect();
                r2s.push(r_squared(&ty, &tp)?);
            }
            let r2 = crate::eval::MeanStd::of(&r2s).mean;
            report.attach_reference("baseline prediction", r2, &pred)?;
        }
        None => {
            let reference = report
                .results
                .iter()
                .find(|r| r.model == "linear")
                .unwrap_or(&report.results[0])
                .clone();
            report.attach_reference(&reference.label(), reference.r2.mean, &reference.predictions)?;
        }
    }
    report.compare_variants()?;
    write_json(&out_path(cfg, CV_REPORT_FILE), &report)?;
    let headline: Vec<Value> = report
        .results
        .iter()
        .map(|r| json!({ "model": r.label(), "r2": r.r2.mean, "mae": r.mae.mean }))
        .collect();
    write_run_manifest(cfg, "train-eval", json!({ "results": headline }))?;
    Ok(report)
}

/// Renders `cv_report.json` (and caption token trends when captions exist)
/// to Markdown and a compact JSON summary.
pub fn report(cfg: &RunConfig) -> Result<(String, Value)> {
    let cv_path = out_path(cfg, CV_REPORT_FILE);
    if !cv_path.exists() {
        return Err(PipelineError::MissingArtifact {
            path: cv_path,
            command: "train-eval",
        });
    }
    let cv: CvReport = io::read_json(&cv_path)?;
    let captions_path = out_path(cfg, CAPTIONS_FILE);
    let trends: Vec<TokenTrend> = if captions_path.exists() {
        let captions: HashMap<String, SemanticCaption> = read_jsonl::<CaptionRecord>(&captions_path)?
            .into_iter()
            .map(|c| (c.id, c.caption))
            .collect();
        let (caps, ys): (Vec<SemanticCaption>, Vec<f64>) = cv
            .ids
            .iter()
            .zip(&cv.y)
            .filter_map(|(id, &y)| captions.get(id).map(|c| (c.clone(), y)))
            .unzip();
        if caps.len() >= 3 {
            tercile_token_trends(&caps, &ys)?
        } else {
            Vec::new()
        }
    } else {
        Vec::new()
    };
    let (md, summary) = render_report(&cv, &trends);
    let md_path = out_path(cfg, REPORT_MD_FILE);
    io::write_atomic(&md_path, md.as_bytes()).map_err(|source| DataError::Io { path: md_path, source })?;
    write_json(&out_path(cfg, REPORT_JSON_FILE), &summary)?;
    Ok((md, summary))
}

/// Number of token-trend rows shown in the Markdown report.
const TREND_ROWS: usize = 15;

pub fn render_report(cv: &CvReport, trends: &[TokenTrend]) -> (String, Value) {
    let mut md = String::from("# Heat-demand regression report\n\n");
    md.push_str(&cv.to_markdown());
    if !trends.is_empty() {
        md.push_str("\n## Caption tokens by heat-demand tercile\n\n");
        md.push_str("| Token | Low | Mid | High |\n|---|---|---|---|\n");
        for t in trends.iter().take(TREND_ROWS) {
            md.push_str(&format!(
                "| {} | {:.3} | {:.3} | {:.3} |\n",
                t.token, t.frequencies[0], t.frequencies[1], t.frequencies[2]
            ));
        }
    }
    let results: Vec<Value> = cv
        .results
        .iter()
        .map(|r| {
            json!({
                "model": r.model,
                "variant": r.variant,
                "feature_schema": r.feature_schema,
                "r2": r.r2,
                "mae": r.mae,
                "uplift_percent": r.uplift_percent,
                "vs_reference": r.vs_reference,
            })
        })
        .collect();
    let summary = json!({
        "k": cv.k,
        "seed": cv.seed,
        "n_samples": cv.n_samples,
        "reference": cv.reference,
        "results": results,
        "comparisons": cv.comparisons,
        "token_trends": trends,
    });
    (md, summary)
}
