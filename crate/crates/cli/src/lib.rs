//! The `sonorl` command line: argument parsing and one function per
//! subcommand. Wall-clock measurements go to `timing.json` files so every
//! other artifact is reproducible byte for byte under a fixed seed.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sonorl::config::RunConfig;
use sonorl::datakit::{self, GenConfig, Sample};
use sonorl::env::{Env, ImageSource, QualityMode};
use sonorl::explain::{integrated_gradients, masked_energy, ActorImage};
use sonorl::generative::{sample_latents, write_loss_csv, CGan, ConditionalGenerator, GeneratorSource, VaeGan};
use sonorl::metrics;
use sonorl::phantom::{Label, Phantom, PhantomConfig, PoseCondition};
use sonorl::ppo::{self, PpoAgent, StateVariant};
use sonorl::quality::{Encoder, OracleQuality, QualityNet, QualitySource, TrainedQuality};
use sonorl::{Frame, Result, SonoError};
use sonorl_tensor::checkpoint;

pub const QUALITY_CKPT: &str = "quality.srl";

#[derive(Debug, Parser)]
#[command(name = "sonorl", version, about = "Probe navigation on a simulated cardiac phantom")]
pub struct Cli {
    /// JSON run configuration; missing sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Reseeds every module.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    Vaegan,
    Cgan,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic labelled corpus with its JSONL manifest.
    GenDataset {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Per-parameter min, max, mean and std of a manifest or CSV.
    Stats {
        /// Manifest, CSV or a directory holding one. Defaults to
        /// $SONORL_DATA_DIR, then --out.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the conditional VAE-GAN.
    TrainVaegan {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the conditional GAN baseline.
    TrainCgan {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the view classifier then the grade head on the frozen encoder.
    TrainQuality {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Monitored PPO training.
    TrainPpo {
        #[arg(long)]
        timesteps: Option<usize>,
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        sources: SourceArgs,
    },
    /// Train every state representation under one budget.
    BenchmarkStates {
        #[arg(long)]
        timesteps: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// SSIM, PSNR and FFD of generated frames against renders.
    EvalGen {
        /// Checkpoint directory written by train-vaegan or train-cgan.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "vaegan")]
        kind: GenKind,
        #[arg(long, default_value_t = 256)]
        count: usize,
        /// Quality-net checkpoint directory whose encoder embeds frames
        /// for FFD; a seeded untrained encoder otherwise.
        #[arg(long)]
        quality_model: Option<PathBuf>,
    },
    /// Argmax trajectories written as JSONL.
    Rollout {
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Directory with actor and critic checkpoints.
        #[arg(long)]
        agent: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        /// Add wall-clock time to the footers.
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        sources: SourceArgs,
    },
    /// Integrated-gradients maps of the actor on start frames.
    Attribute {
        #[arg(long)]
        agent: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        /// Action to explain; the argmax action when absent.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        sources: SourceArgs,
    },
}

#[derive(Debug, clap::Args)]
pub struct DataArgs {
    /// Manifest, CSV or dataset directory; a synthetic corpus otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Size of the synthetic corpus.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct SourceArgs {
    /// Quality-net checkpoint directory, required when env.quality is
    /// `trained`.
    #[arg(long)]
    pub quality_model: Option<PathBuf>,
    /// Generator checkpoint directory to replace the renderer.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "vaegan")]
    pub generator_kind: GenKind,
}

/// Parses `args` and runs the subcommand. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let out = cli.out.clone();
    match cli.command {
        Command::GenDataset { count, image_size } => {
            if let Some(n) = count {
                cfg.dataset.count = n;
            }
            if let Some(s) = image_size {
                cfg.phantom.image_size = s;
            }
            gen_dataset(&cfg, &out)
        }
        Command::Stats { data } => stats(data, &out),
        Command::TrainVaegan { data, epochs } => {
            if let Some(e) = epochs {
                cfg.vaegan.epochs = e;
            }
            train_generator(&cfg, &data, GenKind::Vaegan, &out)
        }
        Command::TrainCgan { data, epochs } => {
            if let Some(e) = epochs {
                cfg.vaegan.epochs = e;
            }
            train_generator(&cfg, &data, GenKind::Cgan, &out)
        }
        Command::TrainQuality { data } => train_quality(&cfg, &data, &out),
        Command::TrainPpo { timesteps, variant, sources } => {
            override_ppo(&mut cfg, timesteps, variant.as_deref())?;
            train_ppo(&cfg, &sources, &out)
        }
        Command::BenchmarkStates { timesteps, seeds } => {
            override_ppo(&mut cfg, timesteps, None)?;
            benchmark(&cfg, &seeds, &out)
        }
        Command::EvalGen { model, kind, count, quality_model } => {
            eval_gen(&cfg, &model, kind, count, quality_model.as_deref(), &out)
        }
        Command::Rollout { episodes, agent, variant, timing, sources } => {
            override_ppo(&mut cfg, None, variant.as_deref())?;
            rollout(&cfg, episodes, agent.as_deref(), timing, &sources, &out)
        }
        Command::Attribute { agent, frames, target, steps, variant, sources } => {
            override_ppo(&mut cfg, None, variant.as_deref())?;
            if let Some(m) = steps {
                cfg.attribution.steps = m;
            }
            attribute(&cfg, agent.as_deref(), frames, target, &sources, &out)
        }
    }
}

fn override_ppo(cfg: &mut RunConfig, timesteps: Option<usize>, variant: Option<&str>) -> Result<()> {
    if let Some(t) = timesteps {
        cfg.ppo.total_timesteps = t;
    }
    if let Some(v) = variant {
        cfg.ppo.variant = v.parse()?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_timing(dir: &Path, start: Instant) -> Result<()> {
    write_json(&dir.join("timing.json"), &serde_json::json!({ "elapsed_s": start.elapsed().as_secs_f64() }))
}

fn phantom_at(cfg: &RunConfig, size: usize) -> Result<Phantom> {
    Phantom::new(PhantomConfig {
        image_size: size,
        ..cfg.phantom.clone()
    })
}

pub fn gen_dataset(cfg: &RunConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let ph = Phantom::new(cfg.phantom.clone())?;
    let m = datakit::gen_dataset(&ph, &cfg.dataset, out)?;
    let hist = datakit::class_histogram(&m.records);
    println!("{} records in {}; class counts {hist:?}", m.records.len(), out.display());
    write_timing(out, start)
}

pub fn stats(data: Option<PathBuf>, out: &Path) -> Result<()> {
    let path = data
        .or_else(|| std::env::var_os(datakit::DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| out.to_path_buf());
    if !path.exists() {
        return Err(SonoError::Data(format!("no dataset at {}", path.display())));
    }
    let m = datakit::open_dataset(&path, false)?;
    let st = datakit::compute_stats(&m.records)?;
    print!("{}", datakit::format_stats_table(&st));
    Ok(())
}

/// Frames at `size` with their conditions and labels, from a dataset on
/// disk or rendered on the fly.
pub fn load_samples(cfg: &RunConfig, data: &DataArgs, size: usize) -> Result<Vec<Sample>> {
    match &data.data {
        Some(path) => {
            let m = datakit::open_dataset(path, true)?;
            let take = data.count.unwrap_or(m.records.len()).min(m.records.len());
            m.records[..take]
                .iter()
                .map(|r| {
                    Ok(Sample {
                        condition: r.condition()?,
                        frame: m.load_frame(r, size)?,
                        label: Label {
                            class: r.class,
                            grade: r.grade,
                            score: f64::NAN,
                        },
                    })
                })
                .collect()
        }
        None => {
            let gc = GenConfig {
                count: data.count.unwrap_or(cfg.dataset.count),
                ..cfg.dataset.clone()
            };
            datakit::synth_corpus(&phantom_at(cfg, size)?, &gc)
        }
    }
}

pub fn train_generator(cfg: &RunConfig, data: &DataArgs, kind: GenKind, out: &Path) -> Result<()> {
    let start = Instant::now();
    let samples = load_samples(cfg, data, cfg.vaegan.image_size)?;
    let pairs: Vec<_> = samples.iter().map(|s| (&s.frame, &s.condition)).collect();
    let log_epoch = |r: &sonorl::generative::LossReport| {
        log::info!(
            "epoch {:>3}  rec {:.4}  kl {:.4}  d {:.4}  g {:.4}",
            r.epoch,
            r.reconstruction,
            r.kl,
            r.adversarial_d,
            r.adversarial_g
        )
    };
    let (dir, reports) = match kind {
        GenKind::Vaegan => {
            let dir = out.join("vaegan");
            let mut m = VaeGan::new(cfg.vaegan.clone())?;
            let r = m.train(&pairs, log_epoch)?;
            m.save(&dir)?;
            (dir, r)
        }
        GenKind::Cgan => {
            let dir = out.join("cgan");
            let mut m = CGan::new(cfg.vaegan.clone())?;
            let r = m.train(&pairs, log_epoch)?;
            m.save(&dir)?;
            (dir, r)
        }
    };
    write_loss_csv(&reports, &mut BufWriter::new(File::create(dir.join("losses.csv"))?))?;
    write_json(&dir.join("config.json"), &cfg.vaegan)?;
    if let Some(last) = reports.last() {
        println!(
            "{} epochs; final rec {:.4} kl {:.4} d {:.4} g {:.4}; checkpoints in {}",
            reports.len(),
            last.reconstruction,
            last.kl,
            last.adversarial_d,
            last.adversarial_g,
            dir.display()
        );
    }
    write_timing(&dir, start)
}

pub fn load_generator(cfg: &RunConfig, dir: &Path, kind: GenKind) -> Result<Arc<dyn ConditionalGenerator>> {
    Ok(match kind {
        GenKind::Vaegan => {
            let mut m = VaeGan::new(cfg.vaegan.clone())?;
            m.load(dir)?;
            Arc::new(m)
        }
        GenKind::Cgan => {
            let mut m = CGan::new(cfg.vaegan.clone())?;
            m.load(dir)?;
            Arc::new(m)
        }
    })
}

pub fn load_quality(cfg: &RunConfig, dir: &Path) -> Result<QualityNet> {
    let mut net = QualityNet::new(&cfg.quality, &mut ChaCha8Rng::seed_from_u64(cfg.quality.seed))?;
    checkpoint::load(&mut net, &dir.join(QUALITY_CKPT))?;
    Ok(net)
}

#[derive(Serialize)]
struct QualitySummary {
    classifier: sonorl::quality::ClassReport,
    grade: sonorl::quality::GradeReport,
}

pub fn train_quality(cfg: &RunConfig, data: &DataArgs, out: &Path) -> Result<()> {
    let start = Instant::now();
    let q = &cfg.quality;
    let samples = load_samples(cfg, data, cfg.phantom.image_size)?;
    let frames: Vec<Frame> = samples.iter().map(|s| s.frame.clone()).collect();
    let classes: Vec<_> = samples.iter().map(|s| s.label.class).collect();
    let grades: Vec<f64> = samples.iter().map(|s| s.label.grade).collect();
    let mut net = QualityNet::new(q, &mut ChaCha8Rng::seed_from_u64(q.seed))?;
    let classifier = net.train_classifier(&frames, &classes, q)?;
    log::info!("classifier holdout accuracy {:.4}", classifier.holdout_accuracy);
    let grade = net.transfer_grade_head(&frames, &grades, &classes, q)?;
    let dir = out.join("quality");
    std::fs::create_dir_all(&dir)?;
    checkpoint::save(&net, &dir.join(QUALITY_CKPT))?;
    println!(
        "holdout accuracy {:.4}, grade MAE {:.4}; checkpoint in {}",
        classifier.holdout_accuracy,
        grade.holdout_mae,
        dir.display()
    );
    write_json(&dir.join("report.json"), &QualitySummary { classifier, grade })?;
    write_timing(&dir, start)
}

/// Image and quality sources selected by the config and flags.
pub fn sources(cfg: &RunConfig, args: &SourceArgs, phantom: &Phantom) -> Result<(Arc<dyn ImageSource>, Arc<dyn QualitySource + Send + Sync>)> {
    let image: Arc<dyn ImageSource> = match &args.generator {
        Some(dir) => Arc::new(GeneratorSource {
            model: load_generator(cfg, dir, args.generator_kind)?,
            output_size: phantom.image_size(),
            seed: cfg.vaegan.seed,
        }),
        None => Arc::new(phantom.clone()),
    };
    let quality: Arc<dyn QualitySource + Send + Sync> = match (cfg.env.quality, &args.quality_model) {
        (QualityMode::Oracle, _) => Arc::new(OracleQuality::new(phantom.clone())),
        (QualityMode::Trained, Some(dir)) => Arc::new(TrainedQuality { net: load_quality(cfg, dir)? }),
        (QualityMode::Trained, None) => {
            return Err(SonoError::Config("env.quality is `trained` but no --quality-model was given".into()))
        }
    };
    Ok((image, quality))
}

pub fn env_pair(cfg: &RunConfig, args: &SourceArgs, seed: u64) -> Result<(Env, Env)> {
    let ph = Phantom::new(cfg.phantom.clone())?;
    let (image, quality) = sources(cfg, args, &ph)?;
    let mk = |s| Env::new(ph.clone(), image.clone(), quality.clone(), cfg.env.clone(), s);
    Ok((mk(seed), mk(seed ^ 0x5A17)))
}

#[derive(Serialize)]
struct PpoSummary {
    variant: StateVariant,
    timesteps: usize,
    episodes: usize,
    updates: usize,
    final_validation: Option<ppo::ValidationRow>,
}

pub fn train_ppo(cfg: &RunConfig, args: &SourceArgs, out: &Path) -> Result<()> {
    let start = Instant::now();
    let dir = out.join("ppo");
    let (mut env, mut val) = env_pair(cfg, args, cfg.ppo.seed)?;
    let mut agent = PpoAgent::new(cfg.ppo.clone(), cfg.phantom.image_size)?;
    let mut progress = |r: &ppo::ValidationRow| {
        log::info!(
            "t {:>8}  reward {:8.2}  length {:6.1}  success {:.2}",
            r.timestep,
            r.mean_reward,
            r.mean_length,
            r.success_rate
        )
    };
    let log = ppo::train(&mut agent, &mut env, &mut val, Some(dir.clone()), Some(&mut progress))?;
    log.write_csv(&dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    let summary = PpoSummary {
        variant: cfg.ppo.variant,
        timesteps: cfg.ppo.total_timesteps,
        episodes: log.episodes.len(),
        updates: log.updates.len(),
        final_validation: log.validations.last().copied(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    match summary.final_validation {
        Some(v) => println!(
            "final validation: reward {:.2}, length {:.1}, success {:.2}; checkpoints in {}",
            v.mean_reward,
            v.mean_length,
            v.success_rate,
            dir.display()
        ),
        None => println!("no validation ran; checkpoints in {}", dir.display()),
    }
    write_timing(&dir, start)
}

pub fn benchmark(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<()> {
    let start = Instant::now();
    let seeds = if seeds.is_empty() { vec![cfg.ppo.seed] } else { seeds.to_vec() };
    let args = SourceArgs {
        quality_model: None,
        generator: None,
        generator_kind: GenKind::Vaegan,
    };
    let report =
        ppo::benchmark_state_representations(&cfg.ppo, &seeds, cfg.phantom.image_size, |s| env_pair(cfg, &args, s))?;
    let dir = out.join("benchmark");
    write_json(&dir.join("benchmark.json"), &report)?;
    println!("{:<12}{:>8}{:>12}{:>10}{:>10}", "variant", "seed", "reward", "length", "success");
    for r in &report.results {
        println!(
            "{:<12}{:>8}{:>12.2}{:>10.1}{:>10.2}",
            r.variant.name(),
            r.seed,
            r.final_reward,
            r.final_length,
            r.final_success
        );
    }
    println!("image-only reward >= parameter-only: {}", report.image_at_least_params);
    write_timing(&dir, start)
}

pub fn eval_gen(
    cfg: &RunConfig,
    model_dir: &Path,
    kind: GenKind,
    count: usize,
    quality_model: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let start = Instant::now();
    let model = load_generator(cfg, model_dir, kind)?;
    let ph = phantom_at(cfg, model.image_size())?;
    let conds = datakit::sample_poses(&ph, &GenConfig { count, ..cfg.dataset.clone() })?;
    let reference = datakit::render_all(&ph, &conds);
    let refs: Vec<&PoseCondition> = conds.iter().collect();
    let mut generated = Vec::with_capacity(count);
    let z = sample_latents(count, model.latent_dim(), cfg.vaegan.seed ^ 0xE7A1);
    for (zc, cc) in z.chunks(64).zip(refs.chunks(64)) {
        generated.extend(model.generate(zc, cc)?);
    }
    let encoder = match quality_model {
        Some(dir) => load_quality(cfg, dir)?.encoder,
        None => {
            let q = &cfg.quality;
            Encoder::new(q.input_size, &q.channels, q.feature_dim, &mut ChaCha8Rng::seed_from_u64(q.seed))?
        }
    };
    let g: Vec<&Frame> = generated.iter().collect();
    let r: Vec<&Frame> = reference.iter().collect();
    let report = metrics::evaluate(&g, &r, &encoder)?;
    let dir = out.join("eval");
    write_json(&dir.join("metrics.json"), &report)?;
    println!(
        "ssim {:.4}  psnr {:.2} dB  ffd {:.4}  over {} frames",
        report.ssim, report.psnr, report.ffd, report.sample_count
    );
    write_timing(&dir, start)
}

fn load_agent(cfg: &RunConfig, dir: Option<&Path>) -> Result<PpoAgent> {
    let mut agent = PpoAgent::new(cfg.ppo.clone(), cfg.phantom.image_size)?;
    if let Some(d) = dir {
        agent.load(d)?;
    }
    Ok(agent)
}

pub fn rollout(
    cfg: &RunConfig,
    episodes: usize,
    agent_dir: Option<&Path>,
    timing: bool,
    args: &SourceArgs,
    out: &Path,
) -> Result<()> {
    let agent = load_agent(cfg, agent_dir)?;
    let (mut env, _) = env_pair(cfg, args, cfg.ppo.validation_seed)?;
    let dir = out.join("rollouts");
    std::fs::create_dir_all(&dir)?;
    for i in 0..episodes {
        let seed = cfg.ppo.validation_seed.wrapping_add(i as u64);
        let t = ppo::rollout(&agent, &mut env, seed)?;
        let path = dir.join(format!("episode_{i:03}.jsonl"));
        let mut w = BufWriter::new(File::create(&path)?);
        t.write_jsonl(&mut w, timing)?;
        w.flush()?;
        println!(
            "episode {i}: {} steps, reward {:.2}, success {}",
            t.records.len(),
            t.total_reward(),
            t.success
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct AttributionRow {
    frame: usize,
    target: usize,
    output_delta: f64,
    attribution_total: f64,
    completeness_error: f64,
    /// Absolute attribution inside and outside the rendered structures.
    energy_inside: f64,
    energy_outside: f64,
}

pub fn attribute(
    cfg: &RunConfig,
    agent_dir: Option<&Path>,
    frames: usize,
    target: Option<usize>,
    args: &SourceArgs,
    out: &Path,
) -> Result<()> {
    let agent = load_agent(cfg, agent_dir)?;
    let (mut env, _) = env_pair(cfg, args, cfg.ppo.validation_seed)?;
    let dir = out.join("attribution");
    std::fs::create_dir_all(&dir)?;
    let mut rows = Vec::with_capacity(frames);
    for i in 0..frames {
        env.reseed(cfg.ppo.validation_seed.wrapping_add(i as u64));
        let s = env.reset()?.clone();
        let actor = ActorImage {
            net: &agent.actor,
            pose: s.pose,
        };
        let t = match target {
            Some(t) => t,
            None => {
                let probs = agent.probs(&[&ppo::Obs::from_state(&s)])?[0];
                (0..probs.len()).fold(0, |b, k| if probs[k] > probs[b] { k } else { b })
            }
        };
        let map = integrated_gradients(&actor, &s.frame, t, &cfg.attribution)?;
        s.frame.write_pgm(&dir.join(format!("frame_{i:03}.pgm")))?;
        map.write_pgm(&dir.join(format!("ig_{i:03}.pgm")))?;
        map.write_csv(&mut BufWriter::new(File::create(dir.join(format!("ig_{i:03}.csv")))?))?;
        let mask = env.phantom().structure_mask(&s.pose);
        let (inside, outside) = masked_energy(&map, &mask);
        rows.push(AttributionRow {
            frame: i,
            target: t,
            output_delta: map.delta,
            attribution_total: map.total(),
            completeness_error: map.completeness_error(),
            energy_inside: inside,
            energy_outside: outside,
        });
    }
    let worst = rows.iter().map(|r| r.completeness_error).fold(0.0, f64::max);
    write_json(&dir.join("summary.json"), &rows)?;
    println!("{frames} maps in {}; worst completeness error {worst:.4}", dir.display());
    Ok(())
}
