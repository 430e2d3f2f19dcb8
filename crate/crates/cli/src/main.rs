use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use av_align::candle_core::DType;
use av_align::config::RunConfig;
use av_align::evaluation::{EvalReport, Method};
use av_align::inference::{evaluate_method, localize_scenes};
use av_align::localization::{class_map_file_name, fused_map_file_name, render_heatmap};
use av_align::model::AvModel;
use av_align::scene_synth::{compose_dataset, dataset_hash, DatasetHandle, Split};
use av_align::separation::{
    build_sample, guidance_for_scenes, pair_scenes, prepare_items, separate_samples, train_separator, write_wav,
    SeparationSample, Separator,
};
use av_align::train::{stage_tag, train, Stage, TrainOptions};

#[derive(Parser)]
#[command(name = "av-align", version, about = "Class-aware audiovisual localization and guided separation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset directory.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train one stage; writes per-epoch checkpoints and a JSON-lines log.
    Train {
        #[command(flatten)]
        common: Common,
        /// 1, 2, joint or avc.
        #[arg(long)]
        stage: String,
        #[arg(long)]
        dataset: PathBuf,
        /// Starting checkpoint (required for stage 2).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// avc, multitask or ours.
        #[arg(long)]
        method: String,
        /// Report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render per-class and fused heatmaps for test scenes.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated video ids; all test scenes when omitted.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u64>,
        #[arg(long, default_value = "ours")]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the guided separator on mixed solo sources and separate test mixtures.
    Separate {
        #[command(flatten)]
        common: Common,
        /// Localizer checkpoint (stage two).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Reuse a trained separator instead of training one.
        #[arg(long)]
        separator: Option<PathBuf>,
        /// Existing evaluation report to attach the separation metrics to.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate { common, out, force } => generate(&common.load()?, &out, force),
        Command::Train {
            common,
            stage,
            dataset,
            init,
            out,
        } => train_cmd(&common.load()?, stage.parse()?, &dataset, init.as_deref(), &out),
        Command::Eval {
            common,
            checkpoint,
            dataset,
            method,
            out,
        } => eval_cmd(&common.load()?, &checkpoint, &dataset, method.parse()?, &out),
        Command::Localize {
            common,
            checkpoint,
            dataset,
            ids,
            method,
            out,
        } => localize_cmd(&common.load()?, &checkpoint, &dataset, &ids, method.parse()?, &out),
        Command::Separate {
            common,
            checkpoint,
            dataset,
            separator,
            report,
            out,
        } => separate_cmd(&common.load()?, &checkpoint, &dataset, separator.as_deref(), report.as_deref(), &out),
    }
}

fn build_model(cfg: &RunConfig, handle: &DatasetHandle) -> Result<AvModel> {
    let scene = &handle.header.config;
    Ok(AvModel::new(scene.into(), &cfg.encoder, &cfg.alignment, cfg.seed, DType::F32)?)
}

fn load_model(cfg: &RunConfig, handle: &DatasetHandle, checkpoint: &Path) -> Result<AvModel> {
    let model = build_model(cfg, handle)?;
    model
        .load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok(model)
}

fn generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let h = compose_dataset(&cfg.scene, cfg.data.n_train, cfg.data.n_test, out, force)?;
    println!(
        "wrote {} train and {} test scenes to {} (sha256 {})",
        h.count(Split::Train),
        h.count(Split::Test),
        out.display(),
        dataset_hash(out)?
    );
    Ok(())
}

fn train_cmd(cfg: &RunConfig, stage: Stage, dataset: &Path, init: Option<&Path>, out: &Path) -> Result<()> {
    if stage == Stage::Two && init.is_none() {
        bail!("stage 2 needs a stage-1 checkpoint (--init); use --stage joint to train from scratch");
    }
    let handle = DatasetHandle::open(dataset)?;
    let model = match init {
        Some(p) => load_model(cfg, &handle, p)?,
        None => build_model(cfg, &handle)?,
    };
    let scenes = handle.load(Split::Train)?.scenes;
    fs::create_dir_all(out)?;
    let log_path = out.join(format!("train_{}.jsonl", stage_tag(stage)));
    let mut log = BufWriter::new(File::create(&log_path)?);
    let summary = train(
        &model,
        &scenes,
        &TrainOptions {
            stage,
            train: &cfg.train,
            multitask: &cfg.multitask,
            alignment: &cfg.alignment,
            seed: cfg.seed,
            checkpoint_dir: Some(out),
        },
        &mut log,
    )?;
    let final_path = out.join("model.ckpt");
    model.save(&final_path)?;
    println!(
        "{} steps; log {}; checkpoint {}",
        summary.steps,
        log_path.display(),
        final_path.display()
    );
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, method: Method, out: &Path) -> Result<()> {
    let handle = DatasetHandle::open(dataset)?;
    let model = load_model(cfg, &handle, checkpoint)?;
    let test = handle.load(Split::Test)?;
    let report = evaluate_method(
        &model,
        &test.scenes,
        method,
        cfg.alignment.valid_threshold,
        cfg.eval.batch_size,
    )?;
    report.write(out)?;
    print!("{}", report.summary());
    Ok(())
}

fn localize_cmd(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, ids: &[u64], method: Method, out: &Path) -> Result<()> {
    let handle = DatasetHandle::open(dataset)?;
    let model = load_model(cfg, &handle, checkpoint)?;
    let test = handle.load(Split::Test)?;
    let scenes: Vec<_> = if ids.is_empty() {
        test.scenes
    } else {
        let picked: Vec<_> = test.scenes.into_iter().filter(|s| ids.contains(&s.video_id)).collect();
        if picked.len() != ids.len() {
            bail!("some requested ids are not in the test split");
        }
        picked
    };
    fs::create_dir_all(out)?;
    let locs = localize_scenes(&model, &scenes, method, cfg.alignment.valid_threshold, cfg.eval.batch_size)?;
    let mut files = 0;
    for (scene, loc) in scenes.iter().zip(&locs) {
        for m in &loc.class_maps {
            render_heatmap(&m.resized, &scene.image, cfg.eval.heatmap_alpha, &out.join(class_map_file_name(scene.video_id, m.class_id)))?;
            files += 1;
        }
        render_heatmap(&loc.fused, &scene.image, cfg.eval.heatmap_alpha, &out.join(fused_map_file_name(scene.video_id)))?;
        files += 1;
    }
    println!("wrote {files} heatmaps to {}", out.display());
    Ok(())
}

fn samples_for(
    scenes: &[av_align::scene_synth::ScenePair],
    n: usize,
    seed: u64,
    cfg: &RunConfig,
    model: &AvModel,
) -> Result<(Vec<SeparationSample>, Vec<[Vec<f32>; 2]>)> {
    let pairs = pair_scenes(scenes, n, seed);
    let mut samples = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(2 * pairs.len());
    for &(a, b) in &pairs {
        samples.push(build_sample(&scenes[a], &scenes[b], &cfg.scene, &cfg.separation)?);
        refs.push(&scenes[a]);
        refs.push(&scenes[b]);
    }
    let g = guidance_for_scenes(model, &refs)?;
    let guidance = g.chunks_exact(2).map(|c| [c[0].clone(), c[1].clone()]).collect();
    Ok((samples, guidance))
}

fn separate_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    separator: Option<&Path>,
    report: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let handle = DatasetHandle::open(dataset)?;
    let model = load_model(cfg, &handle, checkpoint)?;
    let mut cfg = cfg.clone();
    cfg.scene = handle.header.config.clone();
    let sep = Separator::new(&cfg.separation, cfg.encoder.embed_dim, DType::F32)?;
    fs::create_dir_all(out)?;
    match separator {
        Some(p) => sep.store.load(p)?,
        None => {
            let train_scenes = handle.load(Split::Train)?.scenes;
            let (samples, guidance) = samples_for(&train_scenes, cfg.separation.train_pairs, cfg.separation.seed, &cfg, &model)?;
            let items = prepare_items(&samples, &guidance, &cfg.separation)?;
            let mut log = BufWriter::new(File::create(out.join("train_separation.jsonl"))?);
            train_separator(&sep, &items, &mut log)?;
            sep.store.save(&out.join("separator.ckpt"))?;
        }
    }
    let test = handle.load(Split::Test)?.scenes;
    let (samples, guidance) = samples_for(&test, cfg.separation.test_pairs, cfg.separation.seed ^ 1, &cfg, &model)?;
    let (results, waves) = separate_samples(&sep, &samples, &guidance)?;
    for (s, pair) in samples.iter().zip(&waves) {
        for (k, w) in pair.iter().enumerate() {
            let name = format!("{}_{}_src{k}.wav", s.video_ids[0], s.video_ids[1]);
            write_wav(&out.join(name), w, cfg.scene.sample_rate)?;
        }
    }
    let mean = |f: &dyn Fn(&av_align::separation::SourceResult) -> f64| {
        results.iter().map(f).sum::<f64>() / results.len().max(1) as f64
    };
    let summary = serde_json::json!({
        "mixtures": samples.len(),
        "mean": {
            "separated": {"sdr": mean(&|r| r.separated.sdr), "sir": mean(&|r| r.separated.sir), "sar": mean(&|r| r.separated.sar)},
            "mixture_baseline": {"sdr": mean(&|r| r.mixture_baseline.sdr), "sir": mean(&|r| r.mixture_baseline.sir), "sar": mean(&|r| r.mixture_baseline.sar)},
            "ideal_mask": {"sdr": mean(&|r| r.ideal_mask.sdr), "sir": mean(&|r| r.ideal_mask.sir), "sar": mean(&|r| r.ideal_mask.sar)},
        },
        "sources": results,
    });
    fs::write(out.join("separation.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    if let Some(path) = report {
        let mut r = EvalReport::read(path)?;
        r.separation = Some(summary);
        r.write(path)?;
    }
    println!(
        "separated {} mixtures: mean SDR {:.2} dB (mixture {:.2} dB)",
        samples.len(),
        mean(&|r| r.separated.sdr),
        mean(&|r| r.mixture_baseline.sdr)
    );
    Ok(())
}
