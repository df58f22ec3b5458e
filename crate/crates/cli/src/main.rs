//! `onestream` command line: pretraining, training, tracking, evaluation,
//! attention export and synthetic data generation. Every command writes
//! only below its `--out` directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use onestream::backbone::{export_attention, AttentionMap};
use onestream::data_io::{
    config_hash, generate_scene, load_config, write_kitti_scene, Calib, DatasetIndex, SceneSpec,
};
use onestream::metrics::{
    evaluate, sparsity_bins, write_frame_csv, EvalSummary, DEFAULT_SPARSITY_EDGES,
};
use onestream::pipeline::{
    build_search, build_template, read_results_csv, track_all, train, write_loss_csv,
    write_results_csv, TemplateScheme, TrackerConfig, Tracker, Tracklet, TrainOptions, TrainState,
};
use onestream::pretrain::{pretrain, primitive_shapes, transfer_weights, PretrainModel};
use onestream::localization::write_map_csv;
use onestream_tensor::{Checkpoint, Graph, ParamStore, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod error;
use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "onestream", version, about = "One-stream point cloud single object tracker")]
struct Cli {
    /// Seed for every random choice (overrides the config seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating point width of the model.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked point-patch pretraining on synthetic primitives.
    Pretrain {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        /// Pretraining steps (overrides `pretrain.epochs`).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the tracker on a KITTI-layout dataset.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Resume from (or initialize with) a tracker checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pretraining checkpoint whose encoder blocks seed the backbone.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Track every tracklet and write one result CSV per tracklet.
    Track {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tracklets tracked in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score result CSVs against ground truth.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Directory written by `track`.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config whose hash is recorded in the report.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Point-count edges of the sparsity bins.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SPARSITY_EDGES)]
        bins: Vec<usize>,
    },
    /// Write joint-attention and heatmap CSVs for one frame.
    ExportAttn {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tracklet position in the loaded list.
        #[arg(long, default_value_t = 0)]
        tracklet: usize,
        /// Frame position inside the tracklet (at least 1).
        #[arg(long, default_value_t = 1)]
        frame: usize,
    },
    /// Write synthetic tracklets in the KITTI tracking layout.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        tracklets: usize,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        distractors: usize,
        /// Meters per frame.
        #[arg(long, default_value_t = 0.2)]
        speed: f64,
    },
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// TOML config; absent keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<TemplateScheme>,
    /// Disable center points interaction.
    #[arg(long)]
    no_cpi: bool,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// KITTI tracking root (`velodyne/`, `label_02/`, `calib/`).
    #[arg(long)]
    data: PathBuf,
    /// Scene ids; all label files when omitted.
    #[arg(long, value_delimiter = ',')]
    scenes: Vec<usize>,
    #[arg(long, default_value = "Car")]
    category: String,
}

fn parse_scheme(s: &str) -> Result<TemplateScheme, String> {
    s.parse().map_err(|e: onestream::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ONESTREAM_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.precision {
        Precision::F32 => run::<f32>(&cli),
        Precision::F64 => run::<f64>(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::FAILURE
        }
    }
}

fn resolve_config(model: &ModelArgs, seed: Option<u64>) -> CliResult<TrackerConfig> {
    let mut cfg = match &model.config {
        Some(p) => load_config(p)?,
        None => TrackerConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = model.scheme {
        cfg.template_scheme = s;
    }
    if model.no_cpi {
        cfg.cpi_enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(args: &DataArgs) -> CliResult<Vec<Tracklet>> {
    let scenes = if args.scenes.is_empty() {
        list_scenes(&args.data)?
    } else {
        args.scenes.clone()
    };
    let index = DatasetIndex::scan(&args.data, &scenes, &args.category)?;
    let tracklets = index.load(&args.data)?;
    info!("loaded {} tracklets from {} scenes", tracklets.len(), scenes.len());
    Ok(tracklets)
}

fn list_scenes(root: &Path) -> CliResult<Vec<usize>> {
    let dir = root.join("label_02");
    let mut scenes = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))? {
        let entry = entry.map_err(|e| CliError::io(&dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name.strip_suffix(".txt").and_then(|s| s.parse().ok()) {
            scenes.push(id);
        }
    }
    scenes.sort_unstable();
    Ok(scenes)
}

fn out_dir(p: &Path) -> CliResult<&Path> {
    std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e))?;
    Ok(p)
}

fn save_config(cfg: &TrackerConfig, out: &Path) -> CliResult<()> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Other(e.to_string()))?;
    let p = out.join("config.toml");
    std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))
}

fn run<T: Real>(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Pretrain { model, out, epochs } => {
            let mut cfg = resolve_config(model, cli.seed)?;
            if let Some(e) = epochs {
                cfg.pretrain.epochs = *e;
            }
            let out = out_dir(out)?;
            let mut store = ParamStore::<T>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let net = PretrainModel::new(&mut store, &cfg.pretrain, &mut rng)?;
            let shapes = primitive_shapes(cfg.pretrain.shapes, cfg.pretrain.points, cfg.seed)?;
            let losses = pretrain(&mut store, &net, &shapes, cfg.seed, |step, l| {
                info!("pretrain step {step}: chamfer {l:.6}");
            })?;
            Checkpoint::from_store(&store).save(out.join("pretrain.osck"))?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            let p = out.join("pretrain_loss.csv");
            std::fs::write(&p, csv).map_err(|e| CliError::io(&p, e))?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!("chamfer {first:.6} -> {last:.6} over {} steps", losses.len());
            }
        }
        Command::Train {
            model,
            data,
            out,
            epochs,
            checkpoint,
            pretrained,
        } => {
            let mut cfg = resolve_config(model, cli.seed)?;
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            let out = out_dir(out)?;
            let tracklets = load_data(data)?;
            let (mut store, tracker) = Tracker::init::<T>(&cfg)?;
            if let Some(p) = pretrained {
                let n = transfer_weights(&Checkpoint::load(p)?, &mut store, cfg.backbone.blocks)?;
                info!("transferred {n} pretrained tensors");
            }
            let mut state = TrainState::new(&store, &cfg);
            if let Some(p) = checkpoint {
                if let Some(s) = TrainState::restore(&Checkpoint::load(p)?, &mut store, &cfg)? {
                    info!("resuming at epoch {} step {}", s.epoch, s.step);
                    state = s;
                }
            }
            let start = Instant::now();
            let losses = train(&tracker, &mut store, &tracklets, &mut state, &TrainOptions::default(), |l| {
                info!("epoch {} step {}: loss {:.5}", l.epoch, l.step, l.total);
            })?;
            write_loss_csv(&losses, &out.join("loss.csv"))?;
            state.to_checkpoint(&store).save(out.join("checkpoint.osck"))?;
            save_config(&cfg, out)?;
            println!(
                "trained {} steps in {:.1}s; final loss {}",
                losses.len(),
                start.elapsed().as_secs_f64(),
                losses.last().map_or("n/a".to_string(), |l| format!("{:.5}", l.total))
            );
        }
        Command::Track {
            model,
            data,
            checkpoint,
            out,
            jobs,
        } => {
            let cfg = resolve_config(model, cli.seed)?;
            let out = out_dir(out)?;
            let tracklets = load_data(data)?;
            let (mut store, tracker) = Tracker::init::<T>(&cfg)?;
            TrainState::restore(&Checkpoint::load(checkpoint)?, &mut store, &cfg)?;
            let start = Instant::now();
            let results = track_all(&tracker, &store, &tracklets, cfg.seed, *jobs)?;
            let frames: usize = results.iter().map(|r| r.frames.len()).sum();
            for r in &results {
                write_results_csv(&r.frames, &out.join(format!("{}.csv", r.tracklet)))?;
            }
            let secs = start.elapsed().as_secs_f64();
            println!(
                "tracked {} tracklets, {frames} frames in {secs:.2}s ({:.1} frames/s)",
                results.len(),
                frames as f64 / secs.max(1e-9)
            );
        }
        Command::Eval {
            data,
            results,
            out,
            config,
            bins,
        } => {
            let out = out_dir(out)?;
            let tracklets = load_data(data)?;
            let (mut preds, mut gts, mut counts, mut frames) = (vec![], vec![], vec![], vec![]);
            for tr in &tracklets {
                let p = results.join(format!("{}.csv", tr.id));
                let rows = read_results_csv(&p)?;
                if rows.len() != tr.frames.len() {
                    return Err(CliError::Other(format!(
                        "{}: {} rows for {} frames",
                        p.display(),
                        rows.len(),
                        tr.frames.len()
                    )));
                }
                for (row, f) in rows.iter().zip(&tr.frames) {
                    let Some(gt) = f.gt else { continue };
                    preds.push(row.bbox()?);
                    gts.push(gt);
                    counts.push(row.n_points);
                    frames.push(row.frame);
                }
            }
            let report = evaluate(&preds, &gts)?;
            let binned = sparsity_bins(&report.ious, &report.distances, &counts, bins)?;
            let hash = match config {
                Some(p) => Some(config_hash(&load_config(p)?)),
                None => None,
            };
            EvalSummary::new(&report, &binned, hash).write_json(&out.join("report.json"))?;
            write_frame_csv(&frames, &report, &counts, &out.join("frames.csv"))?;
            println!("Success: {}", report.success);
            println!("Precision: {}", report.precision);
        }
        Command::ExportAttn {
            model,
            data,
            checkpoint,
            out,
            tracklet,
            frame,
        } => {
            let cfg = resolve_config(model, cli.seed)?;
            let out = out_dir(out)?;
            let tracklets = load_data(data)?;
            let tr = tracklets.get(*tracklet).ok_or_else(|| {
                CliError::Other(format!("tracklet {tracklet} of {}", tracklets.len()))
            })?;
            let t = *frame;
            if t == 0 || t >= tr.frames.len() {
                return Err(CliError::Other(format!(
                    "frame {t} outside 1..{}",
                    tr.frames.len()
                )));
            }
            let gt = |i: usize| {
                tr.frames[i]
                    .gt
                    .ok_or_else(|| CliError::Other(format!("frame {i} has no gt")))
            };
            let boxes = (0..t).map(gt).collect::<CliResult<Vec<_>>>()?;
            let clouds: Vec<_> = tr.frames[..t].iter().map(|f| &f.cloud).collect();
            let (mut store, tracker) = Tracker::init::<T>(&cfg)?;
            TrainState::restore(&Checkpoint::load(checkpoint)?, &mut store, &cfg)?;
            let template = build_template(&clouds, &boxes, &cfg, cfg.seed)?;
            let search = build_search(&tr.frames[t].cloud, &boxes[t - 1], &cfg, false, cfg.seed)?;
            let mut g = Graph::new(&store);
            let fwd = tracker.forward(&mut g, &template, &search.cloud, cfg.seed)?;
            let world = search.cloud.map(|p| search.frame.to_world(p));
            for (b, heads) in fwd.attention.iter().enumerate() {
                let map = AttentionMap::from_graph(&g, b, cfg.backbone.n1, heads);
                export_attention(&map, &world, &out.join(format!("attention_block{b}.csv")))?;
            }
            let maps = fwd.heads.maps(&g);
            write_map_csv(&maps.heatmap, 0, &out.join("heatmap.csv"))?;
            println!("wrote {} attention maps and heatmap.csv", fwd.attention.len());
        }
        Command::Generate {
            out,
            tracklets,
            frames,
            distractors,
            speed,
        } => {
            let out = out_dir(out)?;
            let seed = cli.seed.unwrap_or(0);
            for i in 0..*tracklets {
                let spec = SceneSpec::car(*frames, *speed, *distractors, seed + i as u64);
                write_kitti_scene(out, i, &generate_scene(&spec)?, &Calib::identity())?;
            }
            println!("wrote {tracklets} scenes to {}", out.display());
        }
    }
    Ok(())
}
