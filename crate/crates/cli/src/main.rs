//! `maskdiff`: fine-tune, synthesize masks and pairs, curate, segment and
//! report, one verb per stage or all at once with `run`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use maskdiff::curation::{erode_mask, filter_pairs, PatchMeanExtractor};
use maskdiff::diffusion::{build_denoiser, Checkpoint};
use maskdiff::finetune::{finetune, TriggerToken};
use maskdiff::mask_gen::{sample_masks, train_mask_model};
use maskdiff::pipeline::dataset::synth_toy_dataset_with_backgrounds;
use maskdiff::pipeline::io::{quantize, read_image, read_mask, write_image, write_mask};
use maskdiff::pipeline::run::generation_plan;
use maskdiff::pipeline::{
    ingest_dataset, read_pairs, report, run_pipeline, Dataset, Layout, PipelineConfig, RunManifest, Split,
};
use maskdiff::sampler::{generate_batch, GuidanceRequest};
use maskdiff::seg::{evaluate, train_segmenter};
use maskdiff::{ImageMaskPair, ImageTensor, PairSource};

#[derive(Parser)]
#[command(name = "maskdiff", version, about = "Mask-guided diffusion augmentation for lesion segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a preset configuration as TOML.
    InitConfig {
        #[arg(long, value_enum, default_value = "toy")]
        profile: ProfileArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write to this file instead of stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic toy dataset in the paired-directory layout.
    SynthToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 80)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 50)]
        backgrounds: usize,
    },
    /// Fine-tune the lesion model (or the background model with --inverted).
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
        /// Train on inverted masks to learn healthy tissue.
        #[arg(long)]
        inverted: bool,
    },
    /// Train the mask generator on train-split masks and sample guiding masks.
    GenMasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sample from an existing mask model instead of training one.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Generate pairs from a lesion checkpoint, guiding masks and backgrounds.
    GenPairs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Directory of mask images.
        #[arg(long)]
        masks: PathBuf,
        /// Directory of background images.
        #[arg(long)]
        backgrounds: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep generated pairs whose similarity to the references lies in [lo, hi], then erode.
    Filter {
        #[command(flatten)]
        common: Common,
        /// Pair directory with images/ and masks/.
        #[arg(long)]
        generated: PathBuf,
        /// Dataset whose train split serves as reference.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a segmenter on the train split (plus synthetic pairs) and score it on test.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Extra training pairs, e.g. a `filter` output directory.
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage and write the manifest and report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Dataset root; omit to synthesize the toy dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Toy dataset size when --data is absent.
        #[arg(long, default_value_t = 80)]
        toy_n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the report of a finished run.
    Report {
        /// Run directory or manifest file.
        manifest: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Toy,
    Full,
}

/// Configuration source plus overrides of the most used fields.
#[derive(Args)]
struct Common {
    /// TOML configuration; defaults to the preset of --profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    profile: ProfileArg,
    /// Root seed for the preset; ignored with --config.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    token: Option<String>,
    #[arg(long)]
    finetune_iterations: Option<usize>,
    #[arg(long)]
    mask_iterations: Option<usize>,
    #[arg(long)]
    n_masks: Option<usize>,
    #[arg(long)]
    n_backgrounds: Option<usize>,
    #[arg(long)]
    n_generated: Option<usize>,
    #[arg(long)]
    lo: Option<f64>,
    #[arg(long)]
    hi: Option<f64>,
    #[arg(long)]
    erode_radius: Option<usize>,
    #[arg(long)]
    seg_epochs: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => match self.profile {
                ProfileArg::Toy => PipelineConfig::toy(self.seed),
                ProfileArg::Full => PipelineConfig::full(self.seed),
            },
        };
        if let Some(t) = &self.token {
            c.token = t.clone();
        }
        if let Some(n) = self.finetune_iterations {
            c.finetune.iterations = n;
            c.background.finetune.iterations = n;
        }
        if let Some(n) = self.mask_iterations {
            c.masks.model.iterations = n;
        }
        if let Some(n) = self.n_masks {
            c.masks.n_masks = n;
        }
        if let Some(n) = self.n_backgrounds {
            c.guidance.n_backgrounds = n;
        }
        if let Some(n) = self.n_generated {
            c.guidance.n_generated = n;
        }
        if let Some(v) = self.lo {
            c.curation.lo = v;
        }
        if let Some(v) = self.hi {
            c.curation.hi = v;
        }
        if let Some(r) = self.erode_radius {
            c.curation.erosion.radius = r;
        }
        if let Some(n) = self.seg_epochs {
            c.seg.epochs = n;
        }
        c.validate()?;
        Ok(c)
    }
}

fn load_dataset(root: &Path, config: &PipelineConfig) -> Result<Dataset> {
    ingest_dataset(root, Layout::PairedDirs, config.seed).with_context(|| format!("loading {}", root.display()))
}

fn read_image_dir(dir: &Path) -> Result<Vec<(String, ImageTensor)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Ok((stem, read_image(p)?))
        })
        .collect()
}

fn write_pairs(dir: &Path, pairs: &[ImageMaskPair]) -> Result<()> {
    for p in pairs {
        write_image(&dir.join("images").join(format!("{}.png", p.id)), &p.image)?;
        write_mask(&dir.join("masks").join(format!("{}.png", p.id)), &p.mask)?;
    }
    Ok(())
}

fn cmd_finetune(config: &PipelineConfig, data: &Path, out: &Path, inverted: bool) -> Result<()> {
    let ds = load_dataset(data, config)?;
    let pairs: Vec<_> = ds.split(Split::Train).into_iter().take(config.finetune_pairs).collect();
    let ft = if inverted { &config.background.finetune } else { &config.finetune };
    let base = build_denoiser(&config.denoiser, config.base_seed)?;
    let token = TriggerToken::new(&config.token, config.denoiser.timestep_embedding_dim)?;
    let trained = finetune(&pairs, &base, &token, ft)?;
    trained.checkpoint.save(out)?;
    trained.trace.write_csv(&out.with_extension("loss.csv"))?;
    println!(
        "fine-tuned on {} pairs, loss tail/head {:.3}, wrote {}",
        pairs.len(),
        trained.trace.tail_to_head_ratio(100),
        out.display()
    );
    Ok(())
}

fn cmd_gen_masks(config: &PipelineConfig, data: &Path, out: &Path, model: Option<&Path>) -> Result<()> {
    let mc = &config.masks.model;
    let ck = match model {
        Some(path) => Checkpoint::load(path)?,
        None => {
            let ds = load_dataset(data, config)?;
            let masks: Vec<_> =
                ds.split(Split::Train).iter().map(|p| p.mask.resize_nearest(mc.image_size, mc.image_size)).collect();
            let trained = train_mask_model(&masks, mc)?;
            trained.checkpoint.save(&out.join("mask.ckpt"))?;
            trained.trace.write_csv(&out.join("mask_loss.csv"))?;
            trained.checkpoint
        }
    };
    let schedule = mc.schedule.build()?;
    let samples = sample_masks(&ck, config.masks.n_masks, &config.masks.gates, config.masks.seed, &schedule, mc.image_size)?;
    for (i, s) in samples.iter().enumerate() {
        write_mask(&out.join(format!("mask{i:03}.png")), &s.binary.resize_nearest(config.image_size, config.image_size))?;
    }
    println!("wrote {} masks to {}", samples.len(), out.display());
    Ok(())
}

fn cmd_gen_pairs(config: &PipelineConfig, model: &Path, masks: &Path, backgrounds: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(model)?;
    let token = ck.token.clone().context("checkpoint has no trigger token; was it fine-tuned?")?;
    let schedule = ck.schedule.unwrap_or(config.finetune.schedule).build()?;
    let masks: Vec<_> = {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(masks)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.retain(|p| p.extension().is_some_and(|e| e == "png"));
        paths.sort();
        paths.iter().map(|p| read_mask(p)).collect::<maskdiff::Result<_>>()?
    };
    let bgs = read_image_dir(backgrounds)?;
    if masks.is_empty() || bgs.is_empty() {
        bail!("need at least one mask and one background");
    }
    let g = &config.guidance;
    let requests: Vec<GuidanceRequest<'_>> = (0..g.n_generated)
        .map(|i| {
            let (m, b, seed) = generation_plan(i, masks.len(), bgs.len(), g.seed);
            GuidanceRequest {
                background: bgs[b].1.clone(),
                mask: masks[m].clone(),
                model: &ck,
                token: &token,
                seed,
                stochastic: g.stochastic,
            }
        })
        .collect();
    let mut pairs = Vec::with_capacity(g.n_generated);
    for chunk in requests.chunks(32) {
        for pair in generate_batch(chunk, &schedule)? {
            let id = format!("syn{:05}", pairs.len());
            pairs.push(ImageMaskPair::new(id, quantize(&pair.image), pair.mask, PairSource::Synthetic)?);
        }
    }
    write_pairs(out, &pairs)?;
    println!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

fn cmd_filter(config: &PipelineConfig, generated: &Path, data: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(data, config)?;
    let refs: Vec<_> = ds.split(Split::Train).into_iter().map(|p| p.image).collect();
    let pairs = read_pairs(generated, PairSource::Synthetic)?;
    let channels = pairs[0].image.channels();
    let cc = &config.curation;
    let mut outcome = filter_pairs(pairs, &refs, cc.lo, cc.hi, &PatchMeanExtractor::new(channels))?;
    outcome.report.erosion = Some(cc.erosion);
    let kept: Vec<_> = outcome
        .kept
        .into_iter()
        .map(|mut p| {
            p.mask = erode_mask(&p.mask, cc.erosion.radius, cc.erosion.iterations);
            p
        })
        .collect();
    write_pairs(out, &kept)?;
    std::fs::write(out.join("quality_report.json"), outcome.report.to_json()?)?;
    println!("kept {} of {}, report in {}", kept.len(), outcome.report.entries.len(), out.display());
    Ok(())
}

fn cmd_segment(config: &PipelineConfig, data: &Path, synthetic: Option<&Path>, out: &Path) -> Result<()> {
    let ds = load_dataset(data, config)?;
    let mut train = ds.split(Split::Train);
    if let Some(dir) = synthetic {
        train.extend(read_pairs(dir, PairSource::Synthetic)?);
    }
    let outcome = train_segmenter(&train, &ds.split(Split::Val), &config.seg)?;
    let test = evaluate(&outcome.checkpoint, &ds.split(Split::Test), config.seg.threshold)?;
    outcome.checkpoint.save(&out.join("segmenter.ckpt"))?;
    let summary = serde_json::json!({
        "train_size": train.len(),
        "best_epoch": outcome.best_epoch,
        "val": outcome.best,
        "test": test,
        "epochs": outcome.trace,
    });
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("train {}  test dice {:.4}  iou {:.4}", train.len(), test.dice, test.iou);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::InitConfig { profile, seed, out } => {
            let c = match profile {
                ProfileArg::Toy => PipelineConfig::toy(seed),
                ProfileArg::Full => PipelineConfig::full(seed),
            };
            let text = c.to_toml()?;
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Command::SynthToy { out, seed, n, size, backgrounds } => {
            let ds = synth_toy_dataset_with_backgrounds(seed, n, size, backgrounds)?;
            ds.write(&out)?;
            println!("wrote {} pairs and {} backgrounds to {}", ds.pairs.len(), ds.backgrounds.len(), out.display());
        }
        Command::Finetune { common, data, out, inverted } => cmd_finetune(&common.config()?, &data, &out, inverted)?,
        Command::GenMasks { common, data, out, model } => cmd_gen_masks(&common.config()?, &data, &out, model.as_deref())?,
        Command::GenPairs { common, model, masks, backgrounds, out } => {
            cmd_gen_pairs(&common.config()?, &model, &masks, &backgrounds, &out)?
        }
        Command::Filter { common, generated, data, out } => cmd_filter(&common.config()?, &generated, &data, &out)?,
        Command::Segment { common, data, synthetic, out } => {
            cmd_segment(&common.config()?, &data, synthetic.as_deref(), &out)?
        }
        Command::Run { common, data, toy_n, out } => {
            let config = common.config()?;
            let ds = match data {
                Some(root) => load_dataset(&root, &config)?,
                None => synth_toy_dataset_with_backgrounds(config.seed, toy_n, config.image_size, config.guidance.n_backgrounds)?,
            };
            let manifest = run_pipeline(&config, &ds, &out)?;
            print!("{}", report(&manifest)?.text);
        }
        Command::Report { manifest, json } => {
            let m = RunManifest::load(&manifest)?;
            let r = report(&m)?;
            print!("{}", if json { r.json } else { r.text });
        }
    }
    Ok(())
}
