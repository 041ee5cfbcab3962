use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use densecl::config::ExperimentConfig;
use densecl::encoder::EmbeddingMap;
use densecl::error::{Error, Result};
use densecl::eval::{self, FrameFeatures, MetricReport};
use densecl::image_io::RgbImage;
use densecl::synth::{self, Scene};
use densecl::tensor::ParamSet;
use densecl::views::PixelCoord;
use densecl::{gradcheck, trainer, viz};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "densecl", version, about = "Dense contrastive representation learning lab")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment configuration (JSON, merged over the preset).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed; also seeds data generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes and motion sequences.
    GenData {
        /// Number of scenes (default: data.n_scenes).
        #[arg(long)]
        n: Option<usize>,
        /// Number of sequences (default: data.n_sequences).
        #[arg(long)]
        sequences: Option<usize>,
    },
    /// Train an encoder.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fit a linear probe on frozen features and report test metrics.
    Probe {
        #[command(flatten)]
        enc: EncoderArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "seg")]
        task: Task,
    },
    /// Propagate frame-0 instance masks through the sequences and report J.
    Propagate {
        #[command(flatten)]
        enc: EncoderArg,
        /// Sequence directory (default: <data>/sequences).
        #[arg(long)]
        seq: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, value_enum, default_value = "encoder")]
        features: FeatureKind,
    },
    /// Train and score every positive-pair mode plus a random baseline.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Nearest gallery pixels to a query pixel.
    Retrieve {
        #[command(flatten)]
        enc: EncoderArg,
        #[arg(long)]
        data: PathBuf,
        /// `image:row:col` on the embedding grid.
        #[arg(long)]
        query: String,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Feature visualisations.
    Viz {
        #[command(subcommand)]
        kind: VizKind,
    },
    /// Finite-difference check of every differentiable op.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        coords: usize,
    },
}

#[derive(Subcommand, Debug)]
enum VizKind {
    /// PCA of pooled features rendered as RGB.
    Pca {
        #[command(flatten)]
        enc: EncoderArg,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated scene indices (default: the first 8).
        #[arg(long, value_delimiter = ',')]
        images: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
    /// Cosine-similarity heatmap of one query pixel over a target image.
    Simmap {
        #[command(flatten)]
        enc: EncoderArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        target: usize,
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
}

#[derive(Args, Debug)]
struct EncoderArg {
    /// Checkpoint to load; omitted means a randomly initialised encoder.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Seg,
    Depth,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FeatureKind {
    Encoder,
    Color,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DENSECL_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn resolve_config(g: &Global, ckpt: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match (&g.config, ckpt) {
        (Some(path), _) => ExperimentConfig::load(path, &g.preset)?,
        (None, Some(c)) if trainer::sidecar_path(c).exists() => {
            let side: trainer::Sidecar = synth::read_json(&trainer::sidecar_path(c))?;
            side.config
        }
        _ => ExperimentConfig::preset(&g.preset)?,
    };
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    info!("config {} (preset {}): {}", cfg.hash(), cfg.preset, cfg.canonical_json());
    Ok(cfg)
}

fn encoder_params(cfg: &ExperimentConfig, ckpt: Option<&Path>) -> Result<ParamSet> {
    match ckpt {
        Some(p) => {
            let params = trainer::load_encoder(p)?;
            let fresh = trainer::init_state(cfg, None)?.f;
            fresh.check_compatible(&params).map_err(|e| Error::Checkpoint(e.to_string()))?;
            Ok(params)
        }
        None => {
            info!("no checkpoint given; using a randomly initialised encoder (seed {})", cfg.train.seed);
            Ok(trainer::init_state(cfg, None)?.f)
        }
    }
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(p) = out {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(p, text + "\n").map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn table(report: &MetricReport) {
    eprintln!("{:<24} {:>10}", report.name, format!("{:.4}", report.value));
    for (i, v) in report.per_class.iter().enumerate() {
        let cell = v.map_or("-".to_string(), |x| format!("{x:.4}"));
        eprintln!("  {:<22} {:>10}", format!("[{i}]"), cell);
    }
    eprintln!("  {:<22} {:>10}", "n_samples", report.n_samples);
}

fn parse_query(s: &str) -> Result<(usize, PixelCoord)> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::Usage(format!("query {s:?} is not image:row:col"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let n: Vec<usize> = parts.iter().map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
    Ok((n[0], PixelCoord::new(n[1], n[2])))
}

fn scene_at(scenes: &[Scene], i: usize) -> Result<&Scene> {
    scenes
        .get(i)
        .ok_or_else(|| Error::Usage(format!("image {i} outside the {}-scene dataset", scenes.len())))
}

fn require_out(g: &Global) -> Result<&Path> {
    g.out
        .as_deref()
        .ok_or_else(|| Error::Usage("--out is required for this subcommand".into()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    if let Some(t) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Usage(e.to_string()))?;
    }
    match &cli.command {
        Command::GenData { n, sequences } => {
            let cfg = resolve_config(g, None)?;
            let out = require_out(g)?;
            let seed = cfg.train.seed;
            let n = n.unwrap_or(cfg.data.n_scenes);
            let n_seq = sequences.unwrap_or(cfg.data.n_sequences);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scenes = synth::generate_dataset(&mut rng, n, &cfg.data.synth)?;
            let mut manifest = synth::write_dataset(out, seed, &cfg.data.synth, &scenes)?;
            manifest.config_hash = Some(cfg.hash());
            synth::write_json(&out.join("manifest.json"), &manifest)?;
            let mut seq_rng = ChaCha8Rng::seed_from_u64(seed);
            seq_rng.set_stream(1);
            let seqs = (0..n_seq)
                .map(|_| {
                    synth::generate_sequence(&mut seq_rng, &cfg.data.synth, cfg.data.sequence_length, cfg.data.max_speed)
                })
                .collect::<Result<Vec<_>>>()?;
            let dir = synth::sequences_dir(out);
            let mut sm = synth::write_sequences(&dir, seed, &cfg.data.synth, &seqs)?;
            sm.config_hash = Some(cfg.hash());
            synth::write_json(&dir.join("sequences.json"), &sm)?;
            info!("wrote {n} scenes and {n_seq} sequences to {}", out.display());
        }
        Command::Train { data, resume } => {
            let cfg = resolve_config(g, None)?;
            let out = require_out(g)?;
            let (manifest, scenes) = synth::load_dataset(data)?;
            if manifest.params != cfg.data.synth {
                log::warn!("dataset was generated with different synthesis parameters than the config");
            }
            let (train, _) = eval::split_scenes(&scenes, cfg.eval.n_test)?;
            let images: Vec<_> = train.iter().map(|s| s.image.clone()).collect();
            let state = trainer::train(&cfg, &images, out, resume.as_deref())?;
            let n = state.losses.len();
            let tail = &state.losses[n.saturating_sub(100)..];
            info!(
                "finished {} iterations; mean loss over the last {} steps {:.4}",
                state.iteration,
                tail.len(),
                tail.iter().sum::<f32>() / tail.len() as f32
            );
        }
        Command::Probe { enc, data, task } => {
            let cfg = resolve_config(g, enc.ckpt.as_deref())?;
            let params = encoder_params(&cfg, enc.ckpt.as_deref())?;
            let (_, scenes) = synth::load_dataset(data)?;
            let (train, test) = eval::split_scenes(&scenes, cfg.eval.n_test)?;
            let report = match task {
                Task::Seg => eval::segmentation_probe(&params, &cfg, train, test, cfg.train.seed)?,
                Task::Depth => eval::depth_probe(&params, &cfg, train, test, cfg.train.seed)?,
            };
            table(&report);
            emit(g.out.as_deref(), &report)?;
        }
        Command::Propagate {
            enc,
            seq,
            data,
            k,
            window,
            features,
        } => {
            let cfg = resolve_config(g, enc.ckpt.as_deref())?;
            let dir = match (seq, data) {
                (Some(s), _) => s.clone(),
                (None, Some(d)) => synth::sequences_dir(d),
                (None, None) => return Err(Error::Usage("give --seq or --data".into())),
            };
            let seqs = synth::load_sequences(&dir)?;
            let k = k.unwrap_or(cfg.eval.knn_k);
            let window = window.unwrap_or(cfg.eval.window);
            let report = match features {
                FeatureKind::Color => eval::propagation_j(FrameFeatures::Color, &cfg, &seqs, k, window)?,
                FeatureKind::Encoder => {
                    let params = encoder_params(&cfg, enc.ckpt.as_deref())?;
                    eval::propagation_j(FrameFeatures::Encoder(&params), &cfg, &seqs, k, window)?
                }
            };
            table(&report);
            emit(g.out.as_deref(), &report)?;
        }
        Command::Ablate { data, seeds } => {
            let cfg = resolve_config(g, None)?;
            let out = require_out(g)?;
            let (_, scenes) = synth::load_dataset(data)?;
            let seqs = synth::load_sequences(&synth::sequences_dir(data))?;
            let report = eval::ablation_views(&cfg, &scenes, &seqs, seeds, out)?;
            eprintln!("{:<12} {:>8} {:>8} {:>8}", "mode", "mIoU", "RMSE", "J");
            for (mode, s) in &report.means {
                eprintln!("{mode:<12} {:>8.4} {:>8.4} {:>8.4}", s.miou, s.rmse, s.j);
            }
            emit(None, &report)?;
        }
        Command::Retrieve {
            enc,
            data,
            query,
            top_k,
        } => {
            let cfg = resolve_config(g, enc.ckpt.as_deref())?;
            let params = encoder_params(&cfg, enc.ckpt.as_deref())?;
            let (_, scenes) = synth::load_dataset(data)?;
            let (qi, coord) = parse_query(query)?;
            scene_at(&scenes, qi)?;
            let images: Vec<_> = scenes.iter().map(|s| s.image.clone()).collect();
            let gallery = trainer::embed_all(&params, &cfg, &images)?;
            let hits = eval::pixel_retrieval((&gallery[qi], coord), &gallery, top_k.unwrap_or(cfg.eval.retrieval_top_k))?;
            #[derive(Serialize)]
            struct Retrieval<'a> {
                config_hash: String,
                query: &'a str,
                hits: Vec<eval::RetrievalHit>,
            }
            emit(
                g.out.as_deref(),
                &Retrieval {
                    config_hash: cfg.hash(),
                    query,
                    hits,
                },
            )?;
        }
        Command::Viz { kind } => run_viz(g, kind)?,
        Command::GradCheck { coords } => {
            let seed = g.seed.unwrap_or(0);
            let report = gradcheck::run(seed, *coords)?;
            for op in &report.ops {
                eprintln!("{:<22} {:>4} coords {:>3} skipped  max rel err {:.3e}", op.name, op.coordinates, op.skipped, op.max_rel_error);
            }
            eprintln!("max relative error {:.3e}", report.max_rel_error);
            emit(g.out.as_deref(), &report)?;
            if !report.passed {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run_viz(g: &Global, kind: &VizKind) -> Result<()> {
    match kind {
        VizKind::Pca {
            enc,
            data,
            images,
            scale,
        } => {
            let cfg = resolve_config(g, enc.ckpt.as_deref())?;
            let out = require_out(g)?;
            let params = encoder_params(&cfg, enc.ckpt.as_deref())?;
            let (_, scenes) = synth::load_dataset(data)?;
            let picks: Vec<usize> = if images.is_empty() {
                (0..scenes.len().min(8)).collect()
            } else {
                images.clone()
            };
            let imgs = picks
                .iter()
                .map(|&i| Ok(scene_at(&scenes, i)?.image.clone()))
                .collect::<Result<Vec<_>>>()?;
            let maps: Vec<EmbeddingMap> = trainer::embed_all(&params, &cfg, &imgs)?;
            let pca = viz::pca_rgb(&maps)?;
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            for (&i, img) in picks.iter().zip(&pca.images) {
                img.upscale(*scale).write_ppm(&out.join(format!("pca_{i:05}.ppm")))?;
            }
            #[derive(Serialize)]
            struct Projection<'a> {
                config_hash: String,
                images: &'a [usize],
                rank: usize,
                projection: &'a [Vec<f64>; 3],
            }
            synth::write_json(
                &out.join("pca.json"),
                &Projection {
                    config_hash: cfg.hash(),
                    images: &picks,
                    rank: pca.rank,
                    projection: &pca.projection,
                },
            )?;
        }
        VizKind::Simmap {
            enc,
            data,
            query,
            target,
            scale,
        } => {
            let cfg = resolve_config(g, enc.ckpt.as_deref())?;
            let out = require_out(g)?;
            let params = encoder_params(&cfg, enc.ckpt.as_deref())?;
            let (_, scenes) = synth::load_dataset(data)?;
            let (qi, coord) = parse_query(query)?;
            let imgs = vec![scene_at(&scenes, qi)?.image.clone(), scene_at(&scenes, *target)?.image.clone()];
            let maps = trainer::embed_all(&params, &cfg, &imgs)?;
            let heat: RgbImage = viz::similarity_heatmap((&maps[0], coord), &maps[1])?;
            heat.upscale(*scale).write_ppm(out)?;
        }
    }
    Ok(())
}
