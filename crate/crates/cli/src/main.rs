use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lego_slam::codec::CodecParams;
use lego_slam::config::RunConfig;
use lego_slam::dataset::{
    load_tum_rgbd, read_dataset, read_trajectory, write_dataset, write_gray_png, Dataset,
};
use lego_slam::loop_closure::Codebook;
use lego_slam::metrics::{ate_rmse, image_metrics, Confusion};
use lego_slam::pipeline::{pretrain_models, run_pipeline, write_artifacts};
use lego_slam::query::{localize_3d, relevancy_map, segment, VOID};
use lego_slam::synthetic::{
    default_orbit, default_square_loop, generate_sequence, room_scene, RoomOptions,
};
use lego_slam::{render, Error, GaussianMap};

#[derive(Parser)]
#[command(
    name = "lego-slam",
    version,
    about = "Language-embedded Gaussian-splat RGB-D SLAM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "feature-dim")]
    feature_dim: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Synthetic,
    Tum,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrajectoryKind {
    Orbit,
    Square,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic room dataset.
    Generate {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "orbit")]
        trajectory: TrajectoryKind,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long = "high-dim", default_value_t = 32)]
        high_dim: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train the codec and the place-recognition codebook.
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run SLAM on a dataset and write all artifacts.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Directory holding codec.bin and codebook.bin; trained on the fly when absent.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "synthetic")]
        mode: Mode,
        #[arg(long = "no-loop")]
        no_loop: bool,
        #[arg(long = "no-prune")]
        no_prune: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Relevancy map and 3D localization of a class query on a saved run.
    Query {
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory of a previous `run`.
        #[arg(long)]
        output: PathBuf,
        /// Scene class whose prototype is the query vector.
        #[arg(long)]
        class: usize,
        /// Frame whose estimated pose is rendered.
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Recompute metrics from saved artifacts.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Evaluate every n-th frame.
        #[arg(long, default_value_t = 10)]
        stride: usize,
    },
}

fn load_config(c: &Common) -> lego_slam::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = c.feature_dim {
        cfg.feature_dim = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::TrackingLost(_)) => 2,
        Some(Error::Config(_)) => 3,
        Some(
            Error::Dataset(_)
            | Error::MissingFile(_)
            | Error::Parse { .. }
            | Error::BadMagic { .. }
            | Error::Truncated(_)
            | Error::Image(_),
        ) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<u8> {
    match cmd {
        Command::Generate {
            output,
            trajectory,
            classes,
            frames,
            size,
            high_dim,
            common,
        } => {
            let cfg = load_config(&common)?;
            let opts = RoomOptions {
                classes,
                feature_dim: high_dim,
                width: size,
                height: size,
                frames,
                seed: cfg.seed,
            };
            let traj = match trajectory {
                TrajectoryKind::Orbit => default_orbit(),
                TrajectoryKind::Square => default_square_loop(),
            };
            let spec = room_scene(&opts, traj);
            let seq = generate_sequence(&spec, cfg.seed)?;
            write_dataset(&output, &spec, &seq)?;
            println!("wrote {} frames to {}", seq.len(), output.display());
            Ok(0)
        }
        Command::Pretrain {
            dataset,
            output,
            common,
        } => {
            let cfg = load_config(&common)?;
            let ds = read_dataset(&dataset)?;
            let scene = ds
                .scene
                .as_ref()
                .context("dataset has no scene description")?;
            let models = pretrain_models(&cfg, scene)?;
            std::fs::create_dir_all(&output)?;
            models.codec.save(&output.join("codec.bin"))?;
            models.codebook.save(&output.join("codebook.bin"))?;
            println!("reconstruction L1 {:.5}", models.final_l1);
            Ok(0)
        }
        Command::Run {
            dataset,
            output,
            models,
            mode,
            no_loop,
            no_prune,
            common,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.loop_closure &= !no_loop;
            cfg.prune &= !no_prune;
            let ds = match mode {
                Mode::Synthetic => read_dataset(&dataset)?,
                Mode::Tum => {
                    let max = (cfg.max_frames > 0).then_some(cfg.max_frames);
                    load_tum_rgbd(&dataset, cfg.tum_downsample, max)?
                }
            };
            let (codec, codebook) = load_models(&cfg, &ds, models.as_deref())?;
            let result = run_pipeline(&cfg, &ds, codec, codebook)?;
            write_artifacts(&result, &ds.intrinsics, &output, cfg.save_renders)?;
            std::fs::write(output.join("config.txt"), cfg.to_text())?;
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!(
                "frames {} keyframes {} gaussians {} ate {} psnr {:.2} l_feat {:.4} miou {} acc {} loops {} fps {:.2}",
                result.trajectory.len(),
                result.keyframes.len(),
                result.map.len(),
                show(result.ate_rmse),
                result.mean_psnr(),
                result.mean_l_feat(),
                show(result.miou),
                show(result.accuracy),
                result.loop_closures,
                result.fps
            );
            if let Some(f) = result.tracking_lost {
                eprintln!("tracking lost at frame {f}; partial artifacts written");
                return Ok(2);
            }
            Ok(0)
        }
        Command::Query {
            dataset,
            output,
            class,
            frame,
            threshold,
        } => {
            let ds = read_dataset(&dataset)?;
            let (map, codec) = load_run(&output)?;
            let scene = ds
                .scene
                .as_ref()
                .context("dataset has no scene description")?;
            let Some(proto) = scene.prototypes.get(class) else {
                bail!(Error::Config(format!(
                    "class {class} out of range (0..{})",
                    scene.prototypes.len()
                )));
            };
            let traj = read_trajectory(&output.join("trajectory.txt"))?;
            let Some((_, pose)) = traj.get(frame) else {
                bail!(Error::Config(format!("frame {frame} not in trajectory")));
            };
            let q = codec.encode_query(proto)?;
            let out = render(&map, pose, &ds.intrinsics);
            let rel = relevancy_map(&out.feat, &q)?;
            let mut rel01 = rel.clone();
            rel01.data.iter_mut().for_each(|v| *v = 0.5 * (*v + 1.0));
            let path = output.join(format!("relevancy_f{frame:04}_c{class}.png"));
            write_gray_png(&path, &rel01)?;
            let loc = localize_3d(&map, &q, threshold)?;
            println!("relevancy map {}", path.display());
            match loc.centroid {
                Some(c) => println!(
                    "{} gaussians above {threshold}; centroid {:.3} {:.3} {:.3}",
                    loc.selected.len(),
                    c.x,
                    c.y,
                    c.z
                ),
                None => println!("no gaussians above {threshold}"),
            }
            Ok(0)
        }
        Command::Eval {
            dataset,
            output,
            stride,
        } => {
            let ds = read_dataset(&dataset)?;
            let (map, codec) = load_run(&output)?;
            let traj = read_trajectory(&output.join("trajectory.txt"))?;
            let gt: Vec<_> = ds
                .frames
                .iter()
                .filter_map(|f| f.gt_pose.map(|p| (f.timestamp, p)))
                .collect();
            match ate_rmse(&traj, &gt) {
                Ok(a) => println!("ate_rmse {a:.5}"),
                Err(e) => println!("ate_rmse n/a ({e})"),
            }
            let scene = ds.scene.as_ref();
            let queries: Option<Vec<Vec<f64>>> = scene
                .map(|s| s.prototypes.iter().map(|p| codec.encode_query(p)).collect())
                .transpose()?;
            let (mut psnr, mut ssim, mut n) = (0.0, 0.0, 0usize);
            let mut conf = Confusion::default();
            for (i, (_, pose)) in traj.iter().enumerate().step_by(stride.max(1)) {
                let Some(f) = ds.frames.get(i) else { break };
                let out = render(&map, pose, &ds.intrinsics);
                let (p, s) = image_metrics(&out.rgb, &f.rgb)?;
                psnr += p;
                ssim += s;
                n += 1;
                if let (Some(q), Some(s), Some(feat)) = (&queries, scene, &f.feat) {
                    let pred = segment(&out.feat, q)?;
                    let gt: Vec<usize> = s
                        .labels_from_features(feat)
                        .into_iter()
                        .map(|l| l.unwrap_or(VOID))
                        .collect();
                    conf.add(&pred, &gt);
                }
            }
            if n > 0 {
                println!(
                    "frames {n} psnr {:.3} ssim {:.4}",
                    psnr / n as f64,
                    ssim / n as f64
                );
            }
            if let Ok((miou, acc)) = conf.scores() {
                println!("miou {miou:.4} accuracy {acc:.4}");
            }
            Ok(0)
        }
    }
}

fn load_run(dir: &Path) -> anyhow::Result<(GaussianMap, CodecParams)> {
    let map = GaussianMap::load(&dir.join("map.lgm"), None)?;
    let codec = CodecParams::load(&dir.join("codec.bin"))?;
    Ok((map, codec))
}

fn load_models(
    cfg: &RunConfig,
    ds: &Dataset,
    models: Option<&Path>,
) -> anyhow::Result<(Option<CodecParams>, Option<Codebook>)> {
    if let Some(dir) = models {
        return Ok((
            Some(CodecParams::load(&dir.join("codec.bin"))?),
            Some(Codebook::load(&dir.join("codebook.bin"))?),
        ));
    }
    match &ds.scene {
        Some(scene) if ds.feature_dim().is_some() => {
            let m = pretrain_models(cfg, scene)?;
            Ok((Some(m.codec), Some(m.codebook)))
        }
        _ => Ok((None, None)),
    }
}
