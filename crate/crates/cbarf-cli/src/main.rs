//! Command-line surface for the cascaded bundle-adjustment pipeline.
//!
//! Exit codes: 0 success, 1 configuration error (bad flags, malformed or
//! inconsistent config, missing input paths), 2 runtime failure.

use cbarf::ba::ScheduleConfig;
use cbarf::cascade::{init_missing_poses, run_cascade, StageKind};
use cbarf::config::RunConfig;
use cbarf::criterion::{classify, combined_score, compare_views, CriterionParams};
use cbarf::eval::{image_quality, pose_errors, procrustes_align};
use cbarf::img::{ImageRgb, Mask};
use cbarf::io;
use cbarf::render::{render, synthesize_views};
use cbarf::scene::{
    drop_poses, generate_scene, sample_hemisphere_cameras, CameraIntrinsics, ViewSet,
};
use cbarf::se3::{exp_map, perturb_pose, NoiseConfig, NoiseSampler, PoseSE3};
use cbarf::sub_seed;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cbarf", about = "Cascaded photometric bundle adjustment")]
struct Cli {
    /// Worker threads for internal parallelism (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural scene and its ground-truth view set.
    SynthesizeScene {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Override the config's global seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Apply calibrated twist noise to a pose file.
    PerturbPoses {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        coefficient: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Remove poses from a fraction of a view set's views.
    DropPoses {
        /// View-set directory to read.
        #[arg(long)]
        input: PathBuf,
        /// View-set directory to write.
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Execute the full cascade and write all artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score rendered-vs-reference view quality and classify views.
    ScoreViews {
        #[arg(long)]
        grid: PathBuf,
        /// View-set directory providing references and intrinsics.
        #[arg(long)]
        views: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        output: PathBuf,
    },
    /// Render a grid at the given poses to PNG files.
    Render {
        #[arg(long)]
        grid: PathBuf,
        /// View-set directory providing intrinsics.
        #[arg(long)]
        views: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        /// Output directory for PNGs.
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare estimated poses against ground truth, optionally with image
    /// metrics.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// View-set directory with reference images (enables PSNR/SSIM when
        /// --grid is also given).
        #[arg(long)]
        views: Option<PathBuf>,
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        output: PathBuf,
    },
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

/// Setup-phase failures (loading inputs, validating configs) are config
/// errors; anything after is a runtime failure.
fn config_err<T>(r: cbarf::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Config(e.to_string()))
}

fn runtime_err<T>(r: cbarf::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with successful exit
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::SynthesizeScene {
            config,
            output,
            seed,
        } => synthesize_scene(&config, output, seed),
        Command::PerturbPoses {
            input,
            output,
            coefficient,
            seed,
        } => perturb_poses(&input, &output, coefficient, seed),
        Command::DropPoses {
            input,
            output,
            fraction,
            seed,
        } => drop_poses_cmd(&input, &output, fraction, seed),
        Command::Run {
            config,
            output,
            seed,
        } => run(&config, output, seed),
        Command::ScoreViews {
            grid,
            views,
            poses,
            output,
        } => score_views(&grid, &views, &poses, &output),
        Command::Render {
            grid,
            views,
            poses,
            output,
        } => render_cmd(&grid, &views, &poses, &output),
        Command::Evaluate {
            est,
            gt,
            views,
            grid,
            output,
        } => evaluate(&est, &gt, views.as_deref(), grid.as_deref(), &output),
    }
}

fn load_config(path: &Path, output: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = config_err(RunConfig::load(path))?;
    if let Some(o) = output {
        cfg.output = o;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    config_err(cfg.validate())?;
    Ok(cfg)
}

fn rig_intrinsics(cfg: &RunConfig) -> CameraIntrinsics {
    CameraIntrinsics {
        focal: cfg.rig.focal,
        cx: cfg.rig.width as f64 / 2.0,
        cy: cfg.rig.height as f64 / 2.0,
        width: cfg.rig.width,
        height: cfg.rig.height,
    }
}

/// Synthesize the ground-truth world of a scene-mode config: voxel scene,
/// hemisphere rig and rendered reference views (poses still ground truth).
fn synthesize_world(cfg: &RunConfig) -> Result<(cbarf::scene::VoxelGrid, ViewSet), CliError> {
    let spec = cfg
        .scene_spec()
        .ok_or_else(|| CliError::Config("this command needs a `scene` config".into()))?;
    let scene = runtime_err(generate_scene(&spec))?;
    let poses = sample_hemisphere_cameras(cfg.rig.n_views, cfg.rig.radius, cfg.rig_seed());
    let views = synthesize_views(&scene, &poses, &rig_intrinsics(cfg), &cfg.cascade.ba.render);
    Ok((scene, views))
}

fn synthesize_scene(
    config: &Path,
    output: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg = load_config(config, output, seed)?;
    let (scene, views) = synthesize_world(&cfg)?;
    let out = &cfg.output;
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime_err(io::save_grid(&out.join("scene.bin"), &scene))?;
    runtime_err(io::save_view_set(&out.join("views"), &views))?;
    let gt: Vec<(u32, PoseSE3)> = views
        .views
        .iter()
        .map(|v| (v.id, v.pose.unwrap()))
        .collect();
    runtime_err(io::save_poses(&out.join("gt_poses.json"), &gt))?;
    runtime_err(cfg.save(&out.join("manifest.json")))?;
    Ok(())
}

fn perturb_poses(input: &Path, output: &Path, coefficient: f64, seed: u64) -> Result<(), CliError> {
    if coefficient < 0.0 {
        return Err(CliError::Config("coefficient must be >= 0".into()));
    }
    let poses = config_err(io::load_poses(input))?;
    let mut sampler = NoiseSampler::new(NoiseConfig {
        coefficient,
        seed: sub_seed(seed, "noise"),
    });
    let perturbed: Vec<(u32, PoseSE3)> = poses
        .into_iter()
        .map(|(id, p)| (id, perturb_pose(&p, &exp_map(&sampler.sample()))))
        .collect();
    runtime_err(io::save_poses(output, &perturbed))
}

fn drop_poses_cmd(input: &Path, output: &Path, fraction: f64, seed: u64) -> Result<(), CliError> {
    let vs = config_err(io::load_view_set(input))?;
    let dropped = config_err(drop_poses(&vs, fraction, sub_seed(seed, "drop")))?;
    runtime_err(io::save_view_set(output, &dropped))
}

fn stage_schedule<'c>(cfg: &'c RunConfig, kind: StageKind) -> &'c ScheduleConfig {
    match kind {
        StageKind::Coarse => &cfg.cascade.coarse,
        StageKind::Recursive => &cfg.cascade.recursive,
        StageKind::Fine => &cfg.cascade.fine,
        StageKind::Reconstruction => &cfg.cascade.reconstruction,
    }
}

fn run(config: &Path, output: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(config, output, seed)?;
    // Assemble the input views: synthesized (with noisy and/or dropped
    // poses) or loaded from disk.
    let views = if cfg.scene.is_some() {
        let (_, mut views) = synthesize_world(&cfg)?;
        if cfg.noise_coefficient > 0.0 {
            let mut sampler = NoiseSampler::new(NoiseConfig {
                coefficient: cfg.noise_coefficient,
                seed: cfg.noise_seed(),
            });
            for v in &mut views.views {
                let p = v.pose.unwrap();
                v.pose = Some(perturb_pose(&p, &exp_map(&sampler.sample())));
            }
        }
        if cfg.drop_fraction > 0.0 {
            views = runtime_err(drop_poses(&views, cfg.drop_fraction, cfg.drop_seed()))?;
        }
        views
    } else {
        config_err(io::load_view_set(cfg.dataset.as_ref().unwrap()))?
    };
    let views = if views.missing_ids().is_empty() {
        views
    } else {
        runtime_err(init_missing_poses(&views, &cfg.cascade.criterion))?
    };
    let init: Vec<PoseSE3> = views.views.iter().map(|v| v.pose.unwrap()).collect();

    let out = cfg.output.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime_err(cfg.save(&out.join("manifest.json")))?;

    let result = runtime_err(run_cascade(&views, &init, &cfg.cascade, cfg.rays_seed()))?;

    runtime_err(io::save_stage_reports_csv(
        &out.join("stage_reports.csv"),
        &result.reports,
    ))?;
    let per_stage: Vec<(usize, &[cbarf::replace::ReplacementAssignment])> = result
        .reports
        .iter()
        .map(|r| (r.index, r.replacements.as_slice()))
        .collect();
    runtime_err(io::save_replacements_csv(
        &out.join("replacements.csv"),
        &per_stage,
    ))?;
    for r in &result.reports {
        let sched = stage_schedule(&cfg, r.kind);
        let lrs: Vec<(f64, f64)> = (0..r.loss_trace.len())
            .map(|t| (sched.lr_pose(t), sched.lr_grid(t)))
            .collect();
        runtime_err(io::save_loss_csv(
            &out.join(format!("loss_stage_{}.csv", r.index)),
            &r.loss_trace,
            &lrs,
        ))?;
        if !r.scores.is_empty() {
            runtime_err(io::save_scores_csv(
                &out.join(format!("scores_stage_{}.csv", r.index)),
                &r.scores,
            ))?;
        }
        if r.kind != StageKind::Reconstruction {
            let stage_poses: Vec<(u32, PoseSE3)> = views
                .views
                .iter()
                .zip(&r.poses_after)
                .map(|(v, p)| (v.id, *p))
                .collect();
            runtime_err(io::save_poses(
                &out.join(format!("poses_stage_{}.json", r.index)),
                &stage_poses,
            ))?;
        }
    }
    runtime_err(io::save_poses(&out.join("poses.json"), &result.poses))?;
    let excluded_json = serde_json::to_string_pretty(&result.excluded)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(out.join("excluded.json"), excluded_json)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime_err(io::save_grid(&out.join("grid.bin"), &result.grid))?;

    let renders = out.join("renders");
    std::fs::create_dir_all(&renders).map_err(|e| CliError::Runtime(e.to_string()))?;
    for (id, pose) in &result.poses {
        let rv = render(&result.grid, pose, &views.intrinsics, &cfg.cascade.ba.render);
        runtime_err(rv.rgb.save_png(&renders.join(format!("view_{id:03}.png"))))?;
    }
    Ok(())
}

/// Pair each pose-file entry with its view; every pose id must exist.
fn match_poses(
    vs: &ViewSet,
    poses: &[(u32, PoseSE3)],
) -> Result<Vec<(usize, PoseSE3)>, CliError> {
    poses
        .iter()
        .map(|(id, p)| {
            vs.views
                .iter()
                .position(|v| v.id == *id)
                .map(|i| (i, *p))
                .ok_or_else(|| CliError::Config(format!("pose file names unknown view {id}")))
        })
        .collect()
}

fn score_views(grid: &Path, views: &Path, poses: &Path, output: &Path) -> Result<(), CliError> {
    let grid = config_err(io::load_grid(grid))?;
    let vs = config_err(io::load_view_set(views))?;
    let poses = config_err(io::load_poses(poses))?;
    let matched = match_poses(&vs, &poses)?;
    let params = CriterionParams::default();
    let cfg = cbarf::ba::BaOptions::default().render;
    let rendered: Vec<ImageRgb> = matched
        .iter()
        .map(|(_, p)| render(&grid, p, &vs.intrinsics, &cfg).rgb)
        .collect();
    let full_masks: Vec<Mask> = matched
        .iter()
        .map(|(i, _)| match &vs.views[*i].mask {
            Some(m) => m.clone(),
            None => {
                let mut m = Mask::new(vs.intrinsics.width, vs.intrinsics.height);
                m.data.fill(true);
                m
            }
        })
        .collect();
    let items: Vec<(u32, &ImageRgb, &ImageRgb, &Mask)> = matched
        .iter()
        .enumerate()
        .map(|(k, (i, _))| {
            (
                vs.views[*i].id,
                &rendered[k],
                &vs.views[*i].image,
                &full_masks[k],
            )
        })
        .collect();
    let comparisons = runtime_err(compare_views(&items, &params))?;
    let mut scores = combined_score(&comparisons, &params);
    runtime_err(classify(&mut scores, &params))?;
    runtime_err(io::save_scores_csv(output, &scores))
}

fn render_cmd(grid: &Path, views: &Path, poses: &Path, output: &Path) -> Result<(), CliError> {
    let grid = config_err(io::load_grid(grid))?;
    let vs = config_err(io::load_view_set(views))?;
    let poses = config_err(io::load_poses(poses))?;
    std::fs::create_dir_all(output).map_err(|e| CliError::Runtime(e.to_string()))?;
    let cfg = cbarf::ba::BaOptions::default().render;
    for (id, pose) in &poses {
        let rv = render(&grid, pose, &vs.intrinsics, &cfg);
        runtime_err(rv.rgb.save_png(&output.join(format!("view_{id:03}.png"))))?;
    }
    Ok(())
}

fn evaluate(
    est: &Path,
    gt: &Path,
    views: Option<&Path>,
    grid: Option<&Path>,
    output: &Path,
) -> Result<(), CliError> {
    let est = config_err(io::load_poses(est))?;
    let gt = config_err(io::load_poses(gt))?;
    // Evaluate over the ids present in both files, in the estimate's order.
    let pairs: Vec<(u32, PoseSE3, PoseSE3)> = est
        .iter()
        .filter_map(|(id, e)| {
            gt.iter()
                .find(|(gid, _)| gid == id)
                .map(|(_, g)| (*id, *e, *g))
        })
        .collect();
    if pairs.len() < 3 {
        return Err(CliError::Config(
            "need at least 3 views common to both pose files".into(),
        ));
    }
    let est_poses: Vec<PoseSE3> = pairs.iter().map(|(_, e, _)| *e).collect();
    let gt_poses: Vec<PoseSE3> = pairs.iter().map(|(_, _, g)| *g).collect();
    let align = runtime_err(procrustes_align(&est_poses, &gt_poses))?;
    let report = pose_errors(&est_poses, &gt_poses, &align);

    let image_metrics: Option<Vec<(f64, f64)>> = match (views, grid) {
        (Some(views), Some(grid)) => {
            let vs = config_err(io::load_view_set(views))?;
            let grid = config_err(io::load_grid(grid))?;
            let cfg = cbarf::ba::BaOptions::default().render;
            let mut metrics = Vec::with_capacity(pairs.len());
            for (id, e, _) in &pairs {
                let view = vs
                    .views
                    .iter()
                    .find(|v| v.id == *id)
                    .ok_or_else(|| CliError::Config(format!("view {id} missing from view set")))?;
                let rv = render(&grid, e, &vs.intrinsics, &cfg);
                let q = runtime_err(image_quality(
                    std::slice::from_ref(&rv.rgb),
                    std::slice::from_ref(&view.image),
                ))?;
                metrics.push((q.psnr[0], q.ssim[0]));
            }
            Some(metrics)
        }
        _ => None,
    };

    let rows: Vec<io::MetricsRow> = pairs
        .iter()
        .enumerate()
        .map(|(i, (id, _, _))| io::MetricsRow {
            view_id: *id,
            rotation_deg: report.rotation_deg[i],
            translation_x100: report.translation_x100[i],
            psnr: image_metrics.as_ref().map_or(f64::NAN, |m| m[i].0),
            ssim: image_metrics.as_ref().map_or(f64::NAN, |m| m[i].1),
        })
        .collect();
    runtime_err(io::save_metrics_csv(output, &rows))?;
    println!(
        "mean rotation error: {:.6} deg, mean translation error (x100): {:.6}",
        report.mean_rotation_deg, report.mean_translation_x100
    );
    if let Some(m) = &image_metrics {
        let psnr = m.iter().map(|(p, _)| p).sum::<f64>() / m.len() as f64;
        let ssim = m.iter().map(|(_, s)| s).sum::<f64>() / m.len() as f64;
        println!("mean psnr: {psnr:.4} dB, mean ssim: {ssim:.6}");
    }
    Ok(())
}
