//! Pipeline orchestration: a coarse bundle-adjustment stage, recursive
//! stages with loop detection, a fine stage, a final pose filter and a
//! grid-only reconstruction. Each stage restarts from a fresh voxel grid and
//! adopts the previous stage's refined poses (after any replacements) as its
//! initialization. Pose-optimization stages may run on downscaled images
//! (see [`CascadeConfig::downscale`]); the final reconstruction always uses
//! the full resolution.

use crate::ba::{fresh_grid, run_compact_ba, BaOptions, ScheduleConfig};
use crate::criterion::{
    classify, combined_score, compare_view, compare_views, CriterionParams, Label, ViewScore,
};
use crate::error::{CbarfError, Result};
use crate::img::{ImageRgb, Mask};
use crate::render::render;
use crate::replace::{
    apply_replacement, find_neighbor, nms_filter, pair_similarity, roll_z, ReplacementAssignment,
    ReplacementMemory,
};
use crate::scene::{View, ViewSet, VoxelGrid};
use crate::se3::PoseSE3;
use crate::sub_seed;
use nalgebra::Vector3;
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Coarse,
    Recursive,
    Fine,
    Reconstruction,
}

/// Full pipeline configuration. The three pose stages share the BA options
/// (batch size, render settings, pose damping) and differ in their learning
/// rate schedules; the reconstruction schedule must keep poses frozen.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CascadeConfig {
    pub coarse: ScheduleConfig,
    pub recursive: ScheduleConfig,
    pub fine: ScheduleConfig,
    /// Grid-only final optimization; lr_pose_start must be 0.
    pub reconstruction: ScheduleConfig,
    pub max_recursive_stages: usize,
    /// Minimum mean raw-quality improvement per recursive stage; smaller
    /// gains stop the loop.
    pub loop_epsilon: f64,
    /// Angular radius (degrees, subtended at the origin) for inferior-set
    /// non-maxima suppression.
    pub nms_radius_deg: f64,
    /// A view is replaced only if its compensated MSE also exceeds this
    /// multiple of the median across views. Rank-based classification always
    /// flags a bottom quantile, so without an absolute guard a fully healthy
    /// rig would still churn poses.
    pub mse_guard_factor: f64,
    pub criterion: CriterionParams,
    /// Image downscale factor for the pose-optimization stages.
    pub downscale: usize,
    pub ba: BaOptions,
    /// Ray-batch override for the coarse stage; `None` uses `ba.batch_size`.
    /// Large initial pose errors need low-noise gradients, while the later
    /// stages refine sub-degree errors where a smaller batch is enough.
    #[serde(default)]
    pub coarse_batch_size: Option<usize>,
    pub grid_resolution: [usize; 3],
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
    /// Disable to ablate neighbor replacement (scoring still runs).
    pub replacement: bool,
}

impl CascadeConfig {
    /// Desk-scale defaults: 2k/2k/10k pose iterations with modulation
    /// 10/3/1, full-resolution pose stages, 2k reconstruction.
    pub fn desk_default() -> Self {
        let lr = |iterations, lr_pose_start, modulation| ScheduleConfig {
            iterations,
            lr_pose_start,
            lr_pose_end: 1e-5,
            lr_grid_start: 3e-1,
            lr_grid_end: 1e-2,
            modulation,
        };
        // Pose learning rates step down across stages: the coarse stage must
        // pull poses over tens of degrees, while the later stages refine
        // sub-degree errors where a hot rate only adds stochastic drift.
        Self {
            coarse: lr(2000, 2e-2, 10.0),
            recursive: lr(2000, 5e-3, 3.0),
            fine: lr(10000, 1e-3, 1.0),
            reconstruction: ScheduleConfig {
                iterations: 2000,
                lr_pose_start: 0.0,
                lr_pose_end: 0.0,
                lr_grid_start: 3e-1,
                lr_grid_end: 1e-2,
                modulation: 1.0,
            },
            max_recursive_stages: 3,
            loop_epsilon: 0.01,
            nms_radius_deg: 30.0,
            mse_guard_factor: 4.0,
            criterion: CriterionParams::default(),
            // Halving 64x64 inputs starves the photometric signal at desk
            // scale; pose stages run at full resolution by default.
            downscale: 1,
            ba: BaOptions::default(),
            coarse_batch_size: Some(4096),
            grid_resolution: [48, 48, 48],
            bbox_min: Vector3::new(-0.5, -0.5, -0.5),
            bbox_max: Vector3::new(0.5, 0.5, 0.5),
            replacement: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.coarse.validate()?;
        self.recursive.validate()?;
        self.fine.validate()?;
        self.reconstruction.validate()?;
        if self.reconstruction.lr_pose_start != 0.0 {
            return Err(CbarfError::InvalidArgument(
                "reconstruction stage must freeze poses (lr_pose_start = 0)".into(),
            ));
        }
        if self.loop_epsilon <= 0.0 {
            return Err(CbarfError::InvalidArgument(
                "loop_epsilon must be positive".into(),
            ));
        }
        if self.downscale == 0 {
            return Err(CbarfError::InvalidArgument("downscale must be >= 1".into()));
        }
        if self.nms_radius_deg <= 0.0 {
            return Err(CbarfError::InvalidArgument(
                "nms_radius_deg must be positive".into(),
            ));
        }
        if self.coarse_batch_size == Some(0) {
            return Err(CbarfError::InvalidArgument(
                "coarse_batch_size must be positive".into(),
            ));
        }
        if self.mse_guard_factor < 1.0 {
            return Err(CbarfError::InvalidArgument(
                "mse_guard_factor must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Diagnostics for one executed stage. Score fields are empty for the
/// reconstruction stage, which neither scores nor replaces.
#[derive(Clone, Debug)]
pub struct StageReport {
    pub index: usize,
    pub kind: StageKind,
    pub mean_combined: f64,
    pub min_combined: f64,
    /// Mean raw quality `w * match_frac + (1 - w) / (1 + mse_c)`; unlike the
    /// rank-based combined score this is comparable across stages, so loop
    /// detection plateaus on it.
    pub mean_quality: f64,
    pub inferior_before_nms: usize,
    pub inferior_after_nms: usize,
    /// Inferior views that also failed the absolute MSE guard and were
    /// actually eligible for replacement (or, after the fine stage, for
    /// exclusion).
    pub replace_eligible: usize,
    pub replacements: Vec<ReplacementAssignment>,
    /// Replacement targets skipped because every (source, rotation) pair was
    /// already in memory.
    pub skipped: Vec<u32>,
    pub final_loss: f64,
    pub loss_trace: Vec<f64>,
    pub scores: Vec<ViewScore>,
    /// Poses handed to the next stage (refined, then replaced).
    pub poses_after: Vec<PoseSE3>,
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    /// Final pose per retained view.
    pub poses: Vec<(u32, PoseSE3)>,
    /// Views removed by the final check; their last refined poses are still
    /// visible in the fine StageReport.
    pub excluded: Vec<u32>,
    pub grid: VoxelGrid,
    pub reports: Vec<StageReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoopDecision {
    Continue,
    Stop,
}

/// Recursive-loop stopping rule: stop when the last recursive stage left no
/// replace-eligible views, when mean raw quality improved by less than
/// `loop_epsilon` over the previous scored stage, or when the stage cap is
/// reached.
pub fn loop_detect(reports: &[StageReport], cfg: &CascadeConfig) -> LoopDecision {
    let scored: Vec<&StageReport> = reports
        .iter()
        .filter(|r| matches!(r.kind, StageKind::Coarse | StageKind::Recursive))
        .collect();
    let last = *scored.last().expect("loop_detect needs a scored stage");
    assert_eq!(last.kind, StageKind::Recursive, "loop_detect runs after a recursive stage");
    if last.replace_eligible == 0 {
        return LoopDecision::Stop;
    }
    if scored.len() >= 2 {
        let prev = scored[scored.len() - 2];
        if last.mean_quality - prev.mean_quality < cfg.loop_epsilon {
            return LoopDecision::Stop;
        }
    }
    let recursive_count = scored.iter().filter(|r| r.kind == StageKind::Recursive).count();
    if recursive_count >= cfg.max_recursive_stages {
        return LoopDecision::Stop;
    }
    LoopDecision::Continue
}

/// Views downsampled for the pose stages, with a materialized foreground
/// mask per view (all-true when the source view has none).
struct SmallViews {
    set: ViewSet,
    masks: Vec<Mask>,
    ids: Vec<u32>,
}

fn downscale_views(views: &ViewSet, factor: usize) -> SmallViews {
    let intrinsics = views.intrinsics.downscale(factor);
    let small: Vec<View> = views
        .views
        .iter()
        .map(|v| View {
            id: v.id,
            image: v.image.downscale(factor),
            mask: v.mask.as_ref().map(|m| m.downscale(factor)),
            pose: v.pose,
        })
        .collect();
    let masks = small
        .iter()
        .map(|v| match &v.mask {
            Some(m) => m.clone(),
            None => {
                let mut m = Mask::new(v.image.width, v.image.height);
                m.data.fill(true);
                m
            }
        })
        .collect();
    let ids = small.iter().map(|v| v.id).collect();
    SmallViews {
        set: ViewSet {
            intrinsics,
            views: small,
        },
        masks,
        ids,
    }
}

struct StageScores {
    scores: Vec<ViewScore>,
    mean_quality: f64,
}

/// Deterministic (non-jittered) renders of every view at its current pose,
/// compared against the references.
fn score_stage(
    grid: &VoxelGrid,
    poses: &[PoseSE3],
    small: &SmallViews,
    cfg: &CascadeConfig,
) -> Result<StageScores> {
    let rendered: Vec<ImageRgb> = poses
        .par_iter()
        .map(|p| render(grid, p, &small.set.intrinsics, &cfg.ba.render).rgb)
        .collect();
    let items: Vec<(u32, &ImageRgb, &ImageRgb, &Mask)> = small
        .set
        .views
        .iter()
        .enumerate()
        .map(|(i, v)| (v.id, &rendered[i], &v.image, &small.masks[i]))
        .collect();
    let comparisons = compare_views(&items, &cfg.criterion)?;
    let w = cfg.criterion.w;
    let mean_quality = comparisons
        .iter()
        .map(|c| raw_quality(c.matches, c.ref_keypoints, c.mse_c, w))
        .sum::<f64>()
        / comparisons.len().max(1) as f64;
    let mut scores = combined_score(&comparisons, &cfg.criterion);
    classify(&mut scores, &cfg.criterion)?;
    Ok(StageScores {
        scores,
        mean_quality,
    })
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Relabel as superior any post-NMS inferior view whose compensated MSE is
/// not an outlier in absolute terms. Returns the number still inferior.
fn apply_mse_guard(scores: &mut [ViewScore], factor: f64) -> usize {
    let mut all: Vec<f64> = scores.iter().map(|s| s.mse_c).collect();
    let med = median(&mut all);
    let mut eligible = 0;
    for s in scores.iter_mut() {
        if s.label == Label::Inferior {
            if s.mse_c <= factor * med {
                s.label = Label::Superior;
            } else {
                eligible += 1;
            }
        }
    }
    eligible
}

/// Raw (non-ranked) quality composite used for cross-stage comparisons and
/// replacement verification: higher is better.
fn raw_quality(matches: usize, ref_keypoints: usize, mse_c: f64, w: f64) -> f64 {
    let frac = matches as f64 / ref_keypoints.max(1) as f64;
    w * frac + (1.0 - w) / (1.0 + mse_c)
}

/// Quality of rendering the target view at `pose` against its reference.
fn pose_quality(
    grid: &VoxelGrid,
    pose: &PoseSE3,
    idx: usize,
    small: &SmallViews,
    cfg: &CascadeConfig,
) -> Result<f64> {
    let rendered = render(grid, pose, &small.set.intrinsics, &cfg.ba.render).rgb;
    let c = compare_view(
        small.ids[idx],
        &rendered,
        &small.set.views[idx].image,
        &small.masks[idx],
        &cfg.criterion,
    )?;
    Ok(raw_quality(c.matches, c.ref_keypoints, c.mse_c, cfg.criterion.w))
}

#[allow(clippy::too_many_arguments)]
fn replace_inferior(
    scores: &[ViewScore],
    small: &SmallViews,
    grid: &VoxelGrid,
    poses: &mut [PoseSE3],
    memory: &mut ReplacementMemory,
    cfg: &CascadeConfig,
) -> Result<(Vec<ReplacementAssignment>, Vec<u32>)> {
    let candidates: Vec<(u32, &ImageRgb)> = scores
        .iter()
        .filter(|s| s.label == Label::Superior)
        .map(|s| {
            let idx = small.ids.iter().position(|&id| id == s.view_id).unwrap();
            (s.view_id, &small.set.views[idx].image)
        })
        .collect();
    let mut applied = Vec::new();
    let mut skipped = Vec::new();
    if candidates.is_empty() {
        skipped.extend(
            scores
                .iter()
                .filter(|s| s.label == Label::Inferior)
                .map(|s| s.view_id),
        );
        return Ok((applied, skipped));
    }
    for s in scores.iter().filter(|s| s.label == Label::Inferior) {
        let idx = small.ids.iter().position(|&id| id == s.view_id).unwrap();
        // Dry-run verification: a proposal is committed only if rendering
        // the view at the proposed pose scores better than its current pose.
        // Rank-based classification occasionally flags views whose poses are
        // fine, and overwriting those with a neighbor's pose (tens of
        // degrees away) corrupts the next stage's grid beyond repair.
        let current_quality = pose_quality(grid, &poses[idx], idx, small, cfg)?;
        loop {
            match find_neighbor(
                s.view_id,
                &small.set.views[idx].image,
                &candidates,
                memory,
                &cfg.criterion,
            ) {
                Ok(assignment) => {
                    let src_idx = small
                        .ids
                        .iter()
                        .position(|&id| id == assignment.source)
                        .unwrap();
                    let src = poses[src_idx];
                    let proposed = if assignment.quarter_turns % 4 == 0 {
                        src
                    } else {
                        PoseSE3::new(
                            src.rotation * roll_z(assignment.quarter_turns),
                            src.translation,
                        )
                    };
                    if pose_quality(grid, &proposed, idx, small, cfg)? > current_quality {
                        apply_replacement(poses, &small.ids, &assignment, memory)
                            .expect("ids are consistent by construction");
                        applied.push(assignment);
                        break;
                    }
                    // rejected proposals are remembered so they are never
                    // offered again within this run
                    memory.record(assignment.target, assignment.source, assignment.quarter_turns);
                }
                Err(CbarfError::CandidatesExhausted(_)) => {
                    skipped.push(s.view_id);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok((applied, skipped))
}

/// Run one pose stage (BA from a fresh grid, then score, NMS, guard and
/// optionally replace) and append its report.
#[allow(clippy::too_many_arguments)]
fn pose_stage(
    kind: StageKind,
    sched: &ScheduleConfig,
    small: &SmallViews,
    poses: &mut Vec<PoseSE3>,
    memory: &mut ReplacementMemory,
    cfg: &CascadeConfig,
    seed: u64,
    reports: &mut Vec<StageReport>,
) -> Result<VoxelGrid> {
    let grid = fresh_grid(cfg.grid_resolution, cfg.bbox_min, cfg.bbox_max);
    let mut ba = cfg.ba.clone();
    if kind == StageKind::Coarse {
        if let Some(batch) = cfg.coarse_batch_size {
            ba.batch_size = batch;
        }
    }
    let state = run_compact_ba(&small.set, poses, grid, sched, &ba, seed)?;
    *poses = state.refined_poses(poses);
    let StageScores {
        mut scores,
        mean_quality,
    } = score_stage(&state.grid, poses, small, cfg)?;
    let inferior_before_nms = scores.iter().filter(|s| s.label == Label::Inferior).count();
    nms_filter(&mut scores, poses, cfg.nms_radius_deg);
    let inferior_after_nms = scores.iter().filter(|s| s.label == Label::Inferior).count();
    let replace_eligible = apply_mse_guard(&mut scores, cfg.mse_guard_factor);
    // The fine stage's scoring is the final check: still-inferior views are
    // excluded by the caller rather than replaced.
    let (replacements, skipped) = if cfg.replacement && kind != StageKind::Fine {
        replace_inferior(&scores, small, &state.grid, poses, memory, cfg)?
    } else {
        (Vec::new(), Vec::new())
    };
    let mean_combined = scores.iter().map(|s| s.combined).sum::<f64>() / scores.len() as f64;
    let min_combined = scores.iter().map(|s| s.combined).fold(f64::INFINITY, f64::min);
    reports.push(StageReport {
        index: reports.len(),
        kind,
        mean_combined,
        min_combined,
        mean_quality,
        inferior_before_nms,
        inferior_after_nms,
        replace_eligible,
        replacements,
        skipped,
        final_loss: *state.loss_trace.last().unwrap_or(&f64::NAN),
        loss_trace: state.loss_trace,
        scores,
        poses_after: poses.clone(),
    });
    Ok(state.grid)
}

/// Execute the full cascade. `init_poses[i]` initializes `views.views[i]`;
/// use [`init_missing_poses`] first if any slots are empty.
pub fn run_cascade(
    views: &ViewSet,
    init_poses: &[PoseSE3],
    cfg: &CascadeConfig,
    seed: u64,
) -> Result<PipelineResult> {
    cfg.validate()?;
    views.validate()?;
    if init_poses.len() != views.views.len() {
        return Err(CbarfError::InvalidArgument(format!(
            "{} init poses for {} views",
            init_poses.len(),
            views.views.len()
        )));
    }
    let small = downscale_views(views, cfg.downscale);
    let mut poses = init_poses.to_vec();
    let mut memory = ReplacementMemory::new();
    let mut reports: Vec<StageReport> = Vec::new();

    pose_stage(
        StageKind::Coarse,
        &cfg.coarse,
        &small,
        &mut poses,
        &mut memory,
        cfg,
        sub_seed(seed, "cascade.coarse"),
        &mut reports,
    )?;

    for k in 0..cfg.max_recursive_stages {
        pose_stage(
            StageKind::Recursive,
            &cfg.recursive,
            &small,
            &mut poses,
            &mut memory,
            cfg,
            sub_seed(seed, &format!("cascade.recursive{k}")),
            &mut reports,
        )?;
        if loop_detect(&reports, cfg) == LoopDecision::Stop {
            break;
        }
    }

    pose_stage(
        StageKind::Fine,
        &cfg.fine,
        &small,
        &mut poses,
        &mut memory,
        cfg,
        sub_seed(seed, "cascade.fine"),
        &mut reports,
    )?;

    // Final check: the fine stage's post-guard inferior set is excluded from
    // the reconstruction.
    let fine_report = reports.last().unwrap();
    let excluded: Vec<u32> = fine_report
        .scores
        .iter()
        .filter(|s| s.label == Label::Inferior)
        .map(|s| s.view_id)
        .collect();

    let keep: Vec<usize> = (0..views.views.len())
        .filter(|&i| !excluded.contains(&views.views[i].id))
        .collect();
    let full_set = ViewSet {
        intrinsics: views.intrinsics,
        views: keep.iter().map(|&i| views.views[i].clone()).collect(),
    };
    let keep_poses: Vec<PoseSE3> = keep.iter().map(|&i| poses[i]).collect();
    let grid = fresh_grid(cfg.grid_resolution, cfg.bbox_min, cfg.bbox_max);
    let state = run_compact_ba(
        &full_set,
        &keep_poses,
        grid,
        &cfg.reconstruction,
        &cfg.ba,
        sub_seed(seed, "cascade.reconstruction"),
    )?;
    reports.push(StageReport {
        index: reports.len(),
        kind: StageKind::Reconstruction,
        mean_combined: 0.0,
        min_combined: 0.0,
        mean_quality: 0.0,
        inferior_before_nms: 0,
        inferior_after_nms: 0,
        replace_eligible: 0,
        replacements: Vec::new(),
        skipped: Vec::new(),
        final_loss: *state.loss_trace.last().unwrap_or(&f64::NAN),
        loss_trace: state.loss_trace,
        scores: Vec::new(),
        poses_after: keep_poses.clone(),
    });

    Ok(PipelineResult {
        poses: full_set
            .views
            .iter()
            .zip(&keep_poses)
            .map(|(v, p)| (v.id, *p))
            .collect(),
        excluded,
        grid: state.grid,
        reports,
    })
}

/// Give every unposed view the pose of its most image-similar posed view,
/// rolled by the best-matching right-angle rotation. Returns a fully posed
/// copy of the set.
pub fn init_missing_poses(views: &ViewSet, params: &CriterionParams) -> Result<ViewSet> {
    let posed: Vec<&View> = views.views.iter().filter(|v| v.pose.is_some()).collect();
    if posed.is_empty() {
        return Err(CbarfError::InvalidArgument(
            "cannot initialize poses without at least one posed view".into(),
        ));
    }
    let mut out = views.clone();
    let missing: Vec<usize> = (0..out.views.len())
        .filter(|&i| out.views[i].pose.is_none())
        .collect();
    let assignments: Vec<(usize, u32, u8)> = missing
        .par_iter()
        .map(|&i| {
            let target = &out.views[i];
            let square = target.image.width == target.image.height;
            let turns: &[u8] = if square { &[0, 1, 2, 3] } else { &[0, 2] };
            let mut best: Option<(f64, u32, u8)> = None;
            for src in &posed {
                for &q in turns {
                    let sim = pair_similarity(&target.image, &src.image.rot90(q), params);
                    let better = match best {
                        None => true,
                        Some((bs, bid, bq)) => {
                            sim > bs || (sim == bs && (src.id, q) < (bid, bq))
                        }
                    };
                    if better {
                        best = Some((sim, src.id, q));
                    }
                }
            }
            let (_, src_id, q) = best.unwrap();
            (i, src_id, q)
        })
        .collect();
    for (i, src_id, q) in assignments {
        let src = views
            .views
            .iter()
            .find(|v| v.id == src_id)
            .and_then(|v| v.pose)
            .unwrap();
        out.views[i].pose = Some(if q % 4 == 0 {
            src
        } else {
            PoseSE3::new(src.rotation * roll_z(q), src.translation)
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::synthesize_views;
    use crate::scene::{generate_scene, sample_hemisphere_cameras, CameraIntrinsics, SceneSpec};

    fn report(kind: StageKind, mean_quality: f64, replace_eligible: usize) -> StageReport {
        StageReport {
            index: 0,
            kind,
            mean_combined: 0.5,
            min_combined: 0.0,
            mean_quality,
            inferior_before_nms: replace_eligible,
            inferior_after_nms: replace_eligible,
            replace_eligible,
            replacements: Vec::new(),
            skipped: Vec::new(),
            final_loss: 0.0,
            loss_trace: Vec::new(),
            scores: Vec::new(),
            poses_after: Vec::new(),
        }
    }

    fn cfg_with(max_recursive: usize, eps: f64) -> CascadeConfig {
        CascadeConfig {
            max_recursive_stages: max_recursive,
            loop_epsilon: eps,
            ..CascadeConfig::desk_default()
        }
    }

    #[test]
    fn loop_stops_when_no_replace_eligible_views() {
        let reports = vec![
            report(StageKind::Coarse, 0.5, 2),
            report(StageKind::Recursive, 0.6, 0),
        ];
        assert_eq!(loop_detect(&reports, &cfg_with(5, 0.01)), LoopDecision::Stop);
    }

    #[test]
    fn loop_stops_on_quality_plateau() {
        let reports = vec![
            report(StageKind::Coarse, 0.80, 3),
            report(StageKind::Recursive, 0.801, 2),
        ];
        assert_eq!(loop_detect(&reports, &cfg_with(5, 0.01)), LoopDecision::Stop);
    }

    #[test]
    fn loop_continues_under_steady_improvement() {
        let mut reports = vec![
            report(StageKind::Coarse, 0.6, 3),
            report(StageKind::Recursive, 0.7, 2),
        ];
        let cfg = cfg_with(5, 0.01);
        assert_eq!(loop_detect(&reports, &cfg), LoopDecision::Continue);
        reports.push(report(StageKind::Recursive, 0.8, 1));
        assert_eq!(loop_detect(&reports, &cfg), LoopDecision::Continue);
    }

    #[test]
    fn loop_stops_at_stage_cap() {
        let reports = vec![
            report(StageKind::Coarse, 0.1, 3),
            report(StageKind::Recursive, 0.3, 3),
            report(StageKind::Recursive, 0.5, 3),
        ];
        assert_eq!(loop_detect(&reports, &cfg_with(2, 0.01)), LoopDecision::Stop);
        assert_eq!(loop_detect(&reports, &cfg_with(3, 0.01)), LoopDecision::Continue);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = CascadeConfig::desk_default();
        assert!(cfg.validate().is_ok());
        cfg.reconstruction.lr_pose_start = 1e-3;
        cfg.reconstruction.lr_pose_end = 1e-3;
        assert!(cfg.validate().is_err());
        cfg = CascadeConfig::desk_default();
        cfg.loop_epsilon = 0.0;
        assert!(cfg.validate().is_err());
        cfg = CascadeConfig::desk_default();
        cfg.downscale = 0;
        assert!(cfg.validate().is_err());
        cfg = CascadeConfig::desk_default();
        cfg.mse_guard_factor = 0.5;
        assert!(cfg.validate().is_err());
    }

    /// Small but real end-to-end run checking stage structure and the
    /// posed-or-excluded invariant.
    fn tiny_world() -> (ViewSet, Vec<PoseSE3>, CascadeConfig) {
        let scene = generate_scene(&SceneSpec {
            seed: 3,
            n_blobs: 4,
            resolution: [16, 16, 16],
        })
        .unwrap();
        let poses = sample_hemisphere_cameras(6, 1.3, 5);
        let intr = CameraIntrinsics::centered(20, 20, 18.0);
        let mut cfg = CascadeConfig::desk_default();
        cfg.ba.batch_size = 256;
        cfg.ba.render.samples_per_ray = 32;
        cfg.grid_resolution = [16, 16, 16];
        cfg.coarse.iterations = 25;
        cfg.recursive.iterations = 25;
        cfg.fine.iterations = 40;
        cfg.reconstruction.iterations = 25;
        cfg.coarse.lr_pose_start = 1e-3;
        cfg.recursive.lr_pose_start = 1e-3;
        cfg.fine.lr_pose_start = 1e-3;
        let views = synthesize_views(&scene, &poses, &intr, &cfg.ba.render);
        (views, poses, cfg)
    }

    #[test]
    fn stage_structure_and_view_accounting() {
        let (views, poses, mut cfg) = tiny_world();
        cfg.max_recursive_stages = 0;
        let result = run_cascade(&views, &poses, &cfg, 17).unwrap();
        let kinds: Vec<StageKind> = result.reports.iter().map(|r| r.kind).collect();
        assert_eq!(
            kinds,
            vec![StageKind::Coarse, StageKind::Fine, StageKind::Reconstruction],
            "max_recursive_stages = 0 runs exactly coarse + fine + reconstruction"
        );
        for (i, r) in result.reports.iter().enumerate() {
            assert_eq!(r.index, i);
        }
        // every input view is posed or excluded, never both or neither
        let mut seen: Vec<u32> = result.poses.iter().map(|(id, _)| *id).collect();
        seen.extend(&result.excluded);
        seen.sort_unstable();
        let mut all: Vec<u32> = views.views.iter().map(|v| v.id).collect();
        all.sort_unstable();
        assert_eq!(seen, all);
        for (_, p) in &result.poses {
            assert!(p.is_valid());
        }
    }

    #[test]
    fn stages_chain_their_poses() {
        let (views, poses, mut cfg) = tiny_world();
        cfg.max_recursive_stages = 1;
        // keep every view so pose chaining is directly visible
        cfg.mse_guard_factor = 1e9;
        let result = run_cascade(&views, &poses, &cfg, 23).unwrap();
        assert!(result.reports.len() >= 4);
        assert!(result.excluded.is_empty());
        let fine = result
            .reports
            .iter()
            .find(|r| r.kind == StageKind::Fine)
            .unwrap();
        for ((_, p), q) in result.poses.iter().zip(&fine.poses_after) {
            assert_eq!(p.to_row_major(), q.to_row_major());
        }
    }

    #[test]
    fn pose_count_mismatch_is_rejected() {
        let (views, poses, cfg) = tiny_world();
        let err = run_cascade(&views, &poses[..3], &cfg, 1);
        assert!(err.is_err());
    }

    #[test]
    fn init_missing_poses_copies_most_similar_view() {
        let (mut views, _, cfg) = tiny_world();
        // duplicate view 2's image into an unposed slot
        let dup = View {
            id: 99,
            image: views.views[2].image.clone(),
            mask: None,
            pose: None,
        };
        views.views.push(dup);
        let posed = init_missing_poses(&views, &cfg.criterion).unwrap();
        assert!(posed.missing_ids().is_empty());
        let got = posed.views.last().unwrap().pose.unwrap();
        let want = views.views[2].pose.unwrap();
        assert_eq!(got.to_row_major(), want.to_row_major());
    }

    #[test]
    fn init_missing_poses_is_identity_when_none_missing() {
        let (views, _, cfg) = tiny_world();
        let out = init_missing_poses(&views, &cfg.criterion).unwrap();
        for (a, b) in views.views.iter().zip(&out.views) {
            assert_eq!(
                a.pose.unwrap().to_row_major(),
                b.pose.unwrap().to_row_major()
            );
        }
    }

    #[test]
    fn init_missing_poses_needs_one_posed_view() {
        let (mut views, _, cfg) = tiny_world();
        for v in &mut views.views {
            v.pose = None;
        }
        assert!(init_missing_poses(&views, &cfg.criterion).is_err());
    }
}
