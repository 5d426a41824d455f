//! The end-to-end run and its manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{BackgroundSource, PipelineConfig};
use super::dataset::{content_hash, Background, Dataset, Split};
use super::io::{quantize, read_image, read_mask, sha256_file, write_image, write_mask};
use super::report::report;
use crate::curation::{erode_mask, filter_pairs, PatchMeanExtractor, QualityReport, Verdict};
use crate::diffusion::{build_denoiser, Checkpoint};
use crate::error::{Error, Result};
use crate::finetune::{finetune, TriggerToken};
use crate::image::{BinaryMask, ImageMaskPair, PairSource};
use crate::mask_gen::{sample_masks, train_mask_model};
use crate::rng::{derive_seed, item_seed};
use crate::sampler::{generate_batch, repair_to_healthy, GuidanceRequest};
use crate::seg::{evaluate, train_segmenter, SegMetrics};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Stage names in execution order.
pub const STAGES: [&str; 9] = [
    "finetune_lesion",
    "finetune_background",
    "mask_model",
    "backgrounds",
    "generate",
    "curate",
    "segment",
    "evaluate",
    "report",
];

const GEN_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Skipped,
    Failed,
}

/// A file written by a stage, relative to the run directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub seconds: f64,
    pub artifacts: Vec<Artifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub n_pairs: usize,
    pub n_backgrounds: usize,
    /// Pair count per split.
    pub split_sizes: BTreeMap<String, usize>,
    /// Content hash per split.
    pub split_hashes: BTreeMap<String, String>,
}

impl DatasetInfo {
    pub fn of(dataset: &Dataset) -> Self {
        let split_sizes = Split::ALL.iter().map(|&s| (s.name().to_string(), dataset.splits.get(s).len())).collect();
        let split_hashes = Split::ALL.iter().map(|&s| (s.name().to_string(), dataset.split_hash(s))).collect();
        Self {
            name: dataset.name.clone(),
            n_pairs: dataset.pairs.len(),
            n_backgrounds: dataset.backgrounds.len(),
            split_sizes,
            split_hashes,
        }
    }
}

/// Kept/rejected tallies copied from the quality report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub generated: usize,
    pub kept: usize,
    pub too_similar: usize,
    pub too_dissimilar: usize,
}

impl CurationSummary {
    pub fn of(report: &QualityReport) -> Self {
        Self {
            generated: report.entries.len(),
            kept: report.kept(),
            too_similar: report.count(Verdict::TooSimilar),
            too_dissimilar: report.count(Verdict::TooDissimilar),
        }
    }

    pub fn rejected(&self) -> usize {
        self.too_similar + self.too_dissimilar
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub train_size: usize,
    /// Epoch whose weights were kept (best validation Dice).
    pub best_epoch: usize,
    pub val: SegMetrics,
    pub test: SegMetrics,
    pub test_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub dataset: DatasetInfo,
    pub stages: Vec<StageRecord>,
    #[serde(default)]
    pub quality_report: Option<String>,
    #[serde(default)]
    pub curation: Option<CurationSummary>,
    #[serde(default)]
    pub baseline: Option<EvalRecord>,
    #[serde(default)]
    pub augmented: Option<EvalRecord>,
    #[serde(default)]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// True when every stage ran (or was legitimately skipped) and both
    /// evaluations are present.
    pub fn is_complete(&self) -> bool {
        self.error.is_none()
            && self.baseline.is_some()
            && self.augmented.is_some()
            && self.curation.is_some()
            && STAGES.iter().all(|n| self.stage(n).is_some_and(|s| s.status != StageStatus::Failed))
    }

    /// Artifact checksums keyed by path, optionally skipping stages.
    pub fn checksums(&self, skip: &[&str]) -> BTreeMap<String, String> {
        self.stages
            .iter()
            .filter(|s| !skip.contains(&s.name.as_str()))
            .flat_map(|s| s.artifacts.iter().map(|a| (a.path.clone(), a.sha256.clone())))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::unreadable(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Unsupported(format!("manifest version {}", m.version)));
        }
        Ok(m)
    }

    /// Recomputes every artifact checksum under `dir` and lists mismatches.
    pub fn verify_artifacts(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for s in &self.stages {
            for a in &s.artifacts {
                match sha256_file(&dir.join(&a.path)) {
                    Ok(h) if h == a.sha256 => {}
                    _ => bad.push(a.path.clone()),
                }
            }
        }
        Ok(bad)
    }
}

/// Accumulates artifacts and a note for one stage.
struct StageCtx<'a> {
    out: &'a Path,
    artifacts: Vec<Artifact>,
    note: Option<String>,
    skipped: bool,
}

impl StageCtx<'_> {
    fn record(&mut self, rel: &str) -> Result<()> {
        let sha256 = sha256_file(&self.out.join(rel))?;
        self.artifacts.push(Artifact { path: rel.to_string(), sha256 });
        Ok(())
    }

    fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, text)?;
        self.record(rel)
    }

    fn save_checkpoint(&mut self, rel: &str, ck: &Checkpoint) -> Result<()> {
        ck.save(&self.out.join(rel))?;
        self.record(rel)
    }

    fn write_pairs(&mut self, dir: &str, pairs: &[ImageMaskPair]) -> Result<()> {
        for p in pairs {
            let img = format!("{dir}/images/{}.png", p.id);
            let msk = format!("{dir}/masks/{}.png", p.id);
            write_image(&self.out.join(&img), &p.image)?;
            write_mask(&self.out.join(&msk), &p.mask)?;
            self.record(&img)?;
            self.record(&msk)?;
        }
        Ok(())
    }
}

struct Runner<'a> {
    out: &'a Path,
    manifest: RunManifest,
}

impl Runner<'_> {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut StageCtx<'_>) -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        let start = Instant::now();
        let mut ctx = StageCtx { out: self.out, artifacts: Vec::new(), note: None, skipped: false };
        let result = f(&mut ctx);
        let seconds = start.elapsed().as_secs_f64();
        let status = match (&result, ctx.skipped) {
            (Err(_), _) => StageStatus::Failed,
            (Ok(_), true) => StageStatus::Skipped,
            (Ok(_), false) => StageStatus::Completed,
        };
        let note = match &result {
            Err(e) => Some(e.to_string()),
            Ok(_) => ctx.note,
        };
        self.manifest.stages.push(StageRecord { name: name.into(), status, seconds, artifacts: ctx.artifacts, note });
        result.map_err(|e| {
            if let Error::ZeroKept(report) = &e {
                self.manifest.curation = Some(CurationSummary::of(report));
            }
            self.manifest.error = Some(format!("{name}: {e}"));
            // Best effort: the original error matters more than a failed write.
            let _ = self.manifest.save(self.out);
            Error::Stage { stage: name.into(), source: Box::new(e) }
        })
    }
}

fn background_source(config: &PipelineConfig, dataset: &Dataset) -> Result<BackgroundSource> {
    match (config.background.source, dataset.backgrounds.is_empty()) {
        (BackgroundSource::Auto, false) | (BackgroundSource::Dataset, false) => Ok(BackgroundSource::Dataset),
        (BackgroundSource::Auto, true) | (BackgroundSource::Repair, _) => Ok(BackgroundSource::Repair),
        (BackgroundSource::Dataset, true) => {
            Err(Error::InvalidConfig("background source `dataset` but the dataset has no backgrounds".into()))
        }
    }
}

/// Which guiding mask, background and seed produce generated pair `i`.
/// Consecutive rounds over the masks shift the background by one, so the
/// same mask meets a different canvas each time.
pub fn generation_plan(i: usize, n_masks: usize, n_backgrounds: usize, seed: u64) -> (usize, usize, u64) {
    (i % n_masks, (i + i / n_masks) % n_backgrounds, item_seed(seed, i))
}

#[derive(Serialize, Deserialize)]
struct GenerationEntry {
    id: String,
    model: String,
    mask: usize,
    background: String,
    seed: u64,
}

/// Stage 5 as a pure function of its inputs.
fn generate_pairs(
    config: &PipelineConfig,
    model: &Checkpoint,
    masks: &[BinaryMask],
    backgrounds: &[Background],
) -> Result<(Vec<ImageMaskPair>, Vec<GenerationEntry>)> {
    let token = model
        .token
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("lesion checkpoint carries no trigger token".into()))?;
    let schedule = config.finetune.schedule.build()?;
    let g = &config.guidance;
    let plan: Vec<_> =
        (0..g.n_generated).map(|i| generation_plan(i, masks.len(), backgrounds.len(), g.seed)).collect();
    let mut pairs = Vec::with_capacity(g.n_generated);
    for (chunk_idx, chunk) in plan.chunks(GEN_BATCH).enumerate() {
        let requests: Vec<GuidanceRequest<'_>> = chunk
            .iter()
            .map(|&(m, b, seed)| GuidanceRequest {
                background: backgrounds[b].image.clone(),
                mask: masks[m].clone(),
                model,
                token,
                seed,
                stochastic: g.stochastic,
            })
            .collect();
        for (j, pair) in generate_batch(&requests, &schedule)?.into_iter().enumerate() {
            let id = format!("syn{:05}", chunk_idx * GEN_BATCH + j);
            pairs.push(ImageMaskPair::new(id, quantize(&pair.image), pair.mask, PairSource::Synthetic)?);
        }
        log::debug!("generated {}/{}", pairs.len(), g.n_generated);
    }
    let model_id = model.weights_digest();
    let entries = pairs
        .iter()
        .zip(&plan)
        .map(|(p, &(m, b, seed))| GenerationEntry {
            id: p.id.clone(),
            model: model_id.clone(),
            mask: m,
            background: backgrounds[b].id.clone(),
            seed,
        })
        .collect();
    Ok((pairs, entries))
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

/// Runs all nine stages and writes the manifest and report under `out_dir`.
pub fn run_pipeline(config: &PipelineConfig, dataset: &Dataset, out_dir: &Path) -> Result<RunManifest> {
    config.validate()?;
    dataset.validate()?;
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    let test = dataset.split(Split::Test);
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    let (channels, h, w) = dataset.shape().ok_or(Error::EmptyDataset)?;
    if h != config.image_size || w != config.image_size {
        return Err(Error::SizeMismatch(format!(
            "dataset images are {h}x{w}, config expects {0}x{0}",
            config.image_size
        )));
    }
    if channels != config.denoiser.input_channels {
        return Err(Error::SizeMismatch(format!(
            "dataset has {channels} channels, denoiser expects {}",
            config.denoiser.input_channels
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut run = Runner {
        out: out_dir,
        manifest: RunManifest {
            version: MANIFEST_VERSION,
            config: config.clone(),
            seeds: config.seeds(),
            dataset: DatasetInfo::of(dataset),
            stages: Vec::new(),
            quality_report: None,
            curation: None,
            baseline: None,
            augmented: None,
            error: None,
        },
    };
    std::fs::write(out_dir.join("config.toml"), config.to_toml()?)?;

    let ft_pairs: Vec<ImageMaskPair> = train.iter().take(config.finetune_pairs).cloned().collect();
    let base = build_denoiser(&config.denoiser, config.base_seed)?;
    let token = TriggerToken::new(&config.token, config.denoiser.timestep_embedding_dim)?;

    let lesion = run.stage("finetune_lesion", |ctx| {
        let trained = finetune(&ft_pairs, &base, &token, &config.finetune)?;
        ctx.save_checkpoint("models/lesion.ckpt", &trained.checkpoint)?;
        ctx.write_text("models/lesion_loss.csv", &trained.trace.to_csv())?;
        ctx.note = Some(format!(
            "{} pairs, loss tail/head {:.3}",
            ft_pairs.len(),
            trained.trace.tail_to_head_ratio(100)
        ));
        Ok(trained.checkpoint)
    })?;

    let source = background_source(config, dataset);
    let background_model = run.stage("finetune_background", |ctx| {
        if source? == BackgroundSource::Dataset {
            ctx.skipped = true;
            ctx.note = Some(format!("dataset provides {} backgrounds", dataset.backgrounds.len()));
            return Ok(None);
        }
        let trained = finetune(&ft_pairs, &base, &token, &config.background.finetune)?;
        ctx.save_checkpoint("models/background.ckpt", &trained.checkpoint)?;
        ctx.write_text("models/background_loss.csv", &trained.trace.to_csv())?;
        Ok(Some(trained.checkpoint))
    })?;

    let guiding_masks = run.stage("mask_model", |ctx| {
        let mc = &config.masks.model;
        let small: Vec<BinaryMask> = train.iter().map(|p| p.mask.resize_nearest(mc.image_size, mc.image_size)).collect();
        let trained = train_mask_model(&small, mc)?;
        ctx.save_checkpoint("models/mask.ckpt", &trained.checkpoint)?;
        ctx.write_text("models/mask_loss.csv", &trained.trace.to_csv())?;
        let schedule = mc.schedule.build()?;
        let samples =
            sample_masks(&trained.checkpoint, config.masks.n_masks, &config.masks.gates, config.masks.seed, &schedule, mc.image_size)?;
        let size = config.image_size;
        let mut out = Vec::with_capacity(samples.len());
        let mut meta = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let m = s.binary.resize_nearest(size, size);
            let rel = format!("masks/mask{i:03}.png");
            write_mask(&out_dir.join(&rel), &m)?;
            ctx.record(&rel)?;
            meta.push(serde_json::json!({
                "index": i,
                "seed": s.seed,
                "threshold": config.masks.gates.threshold,
                "area_fraction": m.area_fraction(),
            }));
            out.push(m);
        }
        ctx.write_text("masks/masks.jsonl", &to_jsonl(&meta)?)?;
        ctx.note = Some(format!("loss tail/head {:.3}", trained.trace.tail_to_head_ratio(100)));
        Ok(out)
    })?;

    let backgrounds = run.stage("backgrounds", |ctx| {
        let n = config.guidance.n_backgrounds;
        let chosen: Vec<Background> = match &background_model {
            None => {
                if dataset.backgrounds.len() < n {
                    ctx.note = Some(format!("only {} of {n} backgrounds available", dataset.backgrounds.len()));
                }
                dataset.backgrounds.iter().take(n).cloned().collect()
            }
            Some(model) => {
                let tok = model.token.as_ref().ok_or_else(|| Error::InvalidConfig("background model has no token".into()))?;
                let schedule = config.background.finetune.schedule.build()?;
                let seed = derive_seed(config.background.finetune.seed, "repair");
                let mut v = Vec::with_capacity(n);
                for i in 0..n {
                    let src = &train[i % train.len()];
                    let image = repair_to_healthy(&src.image, &src.mask, model, tok, item_seed(seed, i), &schedule)?;
                    v.push(Background { id: format!("rep{i:03}-{}", src.id), image: quantize(&image) });
                }
                ctx.note = Some(format!("repaired {n} train images"));
                v
            }
        };
        for b in &chosen {
            let rel = format!("backgrounds/{}.png", b.id);
            write_image(&out_dir.join(&rel), &b.image)?;
            ctx.record(&rel)?;
        }
        Ok(chosen)
    })?;

    let generated = run.stage("generate", |ctx| {
        let (pairs, entries) = generate_pairs(config, &lesion, &guiding_masks, &backgrounds)?;
        ctx.write_pairs("generated", &pairs)?;
        ctx.write_text("generated/generated.jsonl", &to_jsonl(&entries)?)?;
        Ok(pairs)
    })?;

    let kept = run.stage("curate", |ctx| {
        let refs: Vec<_> = train.iter().map(|p| p.image.clone()).collect();
        let extractor = PatchMeanExtractor::new(channels);
        let cc = &config.curation;
        let mut outcome = filter_pairs(generated, &refs, cc.lo, cc.hi, &extractor)?;
        outcome.report.erosion = Some(cc.erosion);
        if outcome.kept.is_empty() {
            return Err(Error::ZeroKept(Box::new(outcome.report)));
        }
        let kept: Vec<ImageMaskPair> = outcome
            .kept
            .into_iter()
            .map(|mut p| {
                p.mask = erode_mask(&p.mask, cc.erosion.radius, cc.erosion.iterations);
                p
            })
            .collect();
        ctx.write_pairs("curated", &kept)?;
        for p in &outcome.rejected {
            let rel = format!("curated/rejected/{}.png", p.id);
            write_image(&out_dir.join(&rel), &p.image)?;
            ctx.record(&rel)?;
        }
        ctx.write_text("curated/quality_report.json", &outcome.report.to_json()?)?;
        let summary = CurationSummary::of(&outcome.report);
        ctx.note = Some(format!("kept {} of {}", summary.kept, summary.generated));
        Ok((kept, summary))
    })?;
    let (kept, summary) = kept;
    run.manifest.quality_report = Some("curated/quality_report.json".into());
    run.manifest.curation = Some(summary);

    let augmented_train: Vec<ImageMaskPair> = train.iter().cloned().chain(kept.iter().cloned()).collect();
    let (baseline, augmented) = run.stage("segment", |ctx| {
        let b = train_segmenter(&train, &val, &config.seg)?;
        let a = train_segmenter(&augmented_train, &val, &config.seg)?;
        ctx.save_checkpoint("models/seg_baseline.ckpt", &b.checkpoint)?;
        ctx.save_checkpoint("models/seg_augmented.ckpt", &a.checkpoint)?;
        ctx.write_text("models/seg_baseline_epochs.json", &serde_json::to_string_pretty(&b.trace)?)?;
        ctx.write_text("models/seg_augmented_epochs.json", &serde_json::to_string_pretty(&a.trace)?)?;
        Ok((b, a))
    })?;

    let (b_rec, a_rec) = run.stage("evaluate", |ctx| {
        let test_hash = content_hash(&test);
        let rec = |outcome: &crate::seg::SegOutcome, train_size| -> Result<EvalRecord> {
            Ok(EvalRecord {
                train_size,
                best_epoch: outcome.best_epoch,
                val: outcome.best,
                test: evaluate(&outcome.checkpoint, &test, config.seg.threshold)?,
                test_hash: test_hash.clone(),
            })
        };
        let b = rec(&baseline, train.len())?;
        let a = rec(&augmented, augmented_train.len())?;
        ctx.write_text("eval.json", &serde_json::to_string_pretty(&serde_json::json!({ "baseline": b, "augmented": a }))?)?;
        Ok((b, a))
    })?;
    run.manifest.baseline = Some(b_rec);
    run.manifest.augmented = Some(a_rec);

    // The report summarizes every stage before it, so it is rendered from the
    // manifest as it stands here; `report()` skips its own stage record.
    let snapshot = run.manifest.clone();
    run.stage("report", |ctx| {
        let r = report(&snapshot)?;
        ctx.write_text("report.txt", &r.text)?;
        ctx.write_text("report.json", &r.json)?;
        Ok(())
    })?;
    run.manifest.save(out_dir)?;
    Ok(run.manifest)
}

/// Regenerates the synthetic pairs of a finished run from its saved lesion
/// model, guiding masks, backgrounds and the stage-5 seed, writing them back
/// to their original paths. Returns artifact paths whose checksum no longer
/// matches the manifest (empty on a faithful replay).
pub fn replay_generation(manifest: &RunManifest, dir: &Path) -> Result<Vec<String>> {
    let stage = |name: &str| {
        manifest
            .stage(name)
            .filter(|s| s.status == StageStatus::Completed)
            .ok_or_else(|| Error::IncompleteManifest(format!("stage `{name}` did not complete")))
    };
    let lesion = Checkpoint::load(&dir.join("models/lesion.ckpt"))?;
    let paths_with = |name: &str, prefix: &str| -> Result<Vec<PathBuf>> {
        Ok(stage(name)?
            .artifacts
            .iter()
            .filter(|a| a.path.starts_with(prefix) && a.path.ends_with(".png"))
            .map(|a| dir.join(&a.path))
            .collect())
    };
    let masks = paths_with("mask_model", "masks/")?.iter().map(|p| read_mask(p)).collect::<Result<Vec<_>>>()?;
    let backgrounds = paths_with("backgrounds", "backgrounds/")?
        .iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Ok(Background { id, image: read_image(p)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let gen = stage("generate")?;
    let (pairs, entries) = generate_pairs(&manifest.config, &lesion, &masks, &backgrounds)?;
    let mut ctx = StageCtx { out: dir, artifacts: Vec::new(), note: None, skipped: false };
    ctx.write_pairs("generated", &pairs)?;
    ctx.write_text("generated/generated.jsonl", &to_jsonl(&entries)?)?;
    let expected: BTreeMap<_, _> = gen.artifacts.iter().map(|a| (&a.path, &a.sha256)).collect();
    let got: BTreeMap<_, _> = ctx.artifacts.iter().map(|a| (&a.path, &a.sha256)).collect();
    let mut bad: Vec<String> = expected
        .iter()
        .filter(|(p, h)| got.get(*p) != Some(*h))
        .map(|(p, _)| p.to_string())
        .collect();
    bad.extend(got.keys().filter(|p| !expected.contains_key(*p)).map(|p| p.to_string()));
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_rotates_backgrounds_between_rounds() {
        let plan: Vec<_> = (0..6).map(|i| generation_plan(i, 3, 3, 9)).collect();
        let mb: Vec<_> = plan.iter().map(|p| (p.0, p.1)).collect();
        assert_eq!(mb, [(0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (2, 0)]);
        let seeds: std::collections::HashSet<_> = plan.iter().map(|p| p.2).collect();
        assert_eq!(seeds.len(), 6);
    }
}
