//! Compact bundle adjustment: bounded-iteration joint gradient optimization
//! of the voxel grid and all per-camera refinement twists, with an
//! exponentially interpolated learning-rate schedule biased by a modulation
//! factor.

use crate::error::{CbarfError, Result};
use crate::img::ImageRgb;
use crate::render::{backward_rays, compose_views, GradScratch, RayRef, RenderConfig};
use crate::scene::{ViewSet, VoxelGrid};
use crate::se3::{exp_so3, refine_pose, PoseSE3, TwistVector};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

/// Learning-rate schedule for one optimization stage. Pose and grid
/// parameters interpolate independently; `modulation` >= 1 keeps both
/// near their start values longer.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct ScheduleConfig {
    pub iterations: usize,
    pub lr_pose_start: f64,
    pub lr_pose_end: f64,
    pub lr_grid_start: f64,
    pub lr_grid_end: f64,
    pub modulation: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(CbarfError::InvalidArgument(
                "schedule needs at least one iteration".into(),
            ));
        }
        if self.modulation < 1.0 {
            return Err(CbarfError::InvalidArgument(
                "modulation factor must be >= 1".into(),
            ));
        }
        // lr_pose_start = 0 switches to pure reconstruction mode.
        let pairs = [
            (self.lr_pose_start, self.lr_pose_end, "pose"),
            (self.lr_grid_start, self.lr_grid_end, "grid"),
        ];
        for (start, end, name) in pairs {
            if start < 0.0 || end < 0.0 || end > start {
                return Err(CbarfError::InvalidArgument(format!(
                    "{name} learning rates must satisfy 0 <= end <= start"
                )));
            }
            if start > 0.0 && end == 0.0 {
                return Err(CbarfError::InvalidArgument(format!(
                    "{name} end rate must stay positive when the start rate is"
                )));
            }
        }
        Ok(())
    }

    pub fn lr_pose(&self, t: usize) -> f64 {
        learning_rate(t, self.iterations, self.lr_pose_start, self.lr_pose_end, self.modulation)
    }

    pub fn lr_grid(&self, t: usize) -> f64 {
        learning_rate(t, self.iterations, self.lr_grid_start, self.lr_grid_end, self.modulation)
    }
}

/// `lr(t) = lr0 * (lr1/lr0)^((t/T)^m)`; `m = 1` is plain exponential
/// interpolation, larger `m` biases toward `lr0`. `lr0 = 0` always yields 0.
pub fn learning_rate(t: usize, total: usize, lr0: f64, lr1: f64, m: f64) -> f64 {
    if lr0 <= 0.0 {
        return 0.0;
    }
    let frac = (t as f64 / total.max(1) as f64).clamp(0.0, 1.0);
    lr0 * (lr1 / lr0).powf(frac.powf(m))
}

/// Runtime options for one compact-BA invocation. The grid itself comes in
/// from the cascade, freshly initialized per stage.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct BaOptions {
    pub render: RenderConfig,
    /// Rays sampled per optimization step, spread round-robin over views.
    pub batch_size: usize,
    /// Stratified jittered sampling along rays when true; deterministic
    /// midpoints otherwise.
    pub jitter: bool,
    /// Fixed number of gradient chunks; results are bit-identical for any
    /// thread count because chunks merge in index order.
    pub chunks: usize,
    /// Adam epsilon for the pose twists. Larger than the usual 1e-8 so that
    /// near-zero stochastic gradients produce near-zero steps instead of a
    /// full-learning-rate random walk.
    pub pose_eps: f64,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self {
            render: RenderConfig {
                samples_per_ray: 96,
                near: 0.4,
                far: 2.2,
                background: [1.0, 1.0, 1.0],
            },
            batch_size: 4096,
            jitter: true,
            chunks: 8,
            pose_eps: 3e-3,
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    eps: f64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;

impl Adam {
    fn new(n: usize, eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            eps,
        }
    }

    /// One element update with bias correction at global step `t` (1-based).
    #[inline]
    fn step(&mut self, idx: usize, grad: f64, lr: f64, t: usize) -> f64 {
        self.m[idx] = BETA1 * self.m[idx] + (1.0 - BETA1) * grad;
        self.v[idx] = BETA2 * self.v[idx] + (1.0 - BETA2) * grad * grad;
        let m_hat = self.m[idx] / (1.0 - BETA1.powi(t as i32));
        let v_hat = self.v[idx] / (1.0 - BETA2.powi(t as i32));
        -lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}

/// Optimization outcome: final grid, per-view refinement twists and the loss
/// trace (one entry per completed iteration).
pub struct BAState {
    pub grid: VoxelGrid,
    pub twists: Vec<TwistVector>,
    pub loss_trace: Vec<f64>,
    /// (lr_pose, lr_grid) actually applied each iteration.
    pub lr_trace: Vec<(f64, f64)>,
}

impl BAState {
    /// Compose each base pose with its learned twist: rotation becomes
    /// `R_base * Exp(omega)`, translation `t_base + rho`.
    pub fn refined_poses(&self, bases: &[PoseSE3]) -> Vec<PoseSE3> {
        assert_eq!(bases.len(), self.twists.len());
        bases
            .iter()
            .zip(&self.twists)
            .map(|(base, tw)| {
                refine_pose(base, &PoseSE3::new(exp_so3(&tw.omega), tw.rho))
            })
            .collect()
    }
}

/// Jointly optimize `grid` and one refinement twist per view with Adam under
/// the given schedule. `bases[i]` is the pose estimate for `views.views[i]`;
/// every view must carry an image of the set's intrinsics dimensions.
///
/// With `lr_pose_start = 0` the twists stay exactly zero and the refined
/// poses are bit-identical to the bases (pure reconstruction mode).
pub fn run_compact_ba(
    views: &ViewSet,
    bases: &[PoseSE3],
    mut grid: VoxelGrid,
    sched: &ScheduleConfig,
    opts: &BaOptions,
    seed: u64,
) -> Result<BAState> {
    sched.validate()?;
    opts.render.validate()?;
    if views.views.len() != bases.len() || bases.is_empty() {
        return Err(CbarfError::InvalidArgument(format!(
            "pose count {} does not match view count {} (or is zero)",
            bases.len(),
            views.views.len()
        )));
    }
    if opts.batch_size == 0 || opts.chunks == 0 {
        return Err(CbarfError::InvalidArgument(
            "batch_size and chunks must be positive".into(),
        ));
    }
    let intr = &views.intrinsics;
    for v in &views.views {
        if v.image.width != intr.width || v.image.height != intr.height {
            return Err(CbarfError::InvalidArgument(format!(
                "view {} image does not match intrinsics dimensions",
                v.id
            )));
        }
    }

    let references: Vec<&ImageRgb> = views.views.iter().map(|v| &v.image).collect();
    let n_views = bases.len();
    let mut twists = vec![TwistVector::zero(); n_views];
    let pose_trainable = sched.lr_pose_start > 0.0;

    let mut adam_density = Adam::new(grid.node_count(), 1e-8);
    let mut adam_color = Adam::new(grid.node_count() * 3, 1e-8);
    let mut adam_twist = Adam::new(n_views * 6, opts.pose_eps);

    let mut ray_rng = ChaCha12Rng::seed_from_u64(crate::sub_seed(seed, "ba.rays"));
    let jitter_base = crate::sub_seed(seed, "ba.jitter");

    let n_chunks = opts.chunks.min(opts.batch_size);
    let mut scratches: Vec<GradScratch> =
        (0..n_chunks).map(|_| GradScratch::new(&grid, n_views)).collect();
    let mut master = GradScratch::new(&grid, n_views);
    let mut rays = Vec::with_capacity(opts.batch_size);
    let mut loss_trace = Vec::with_capacity(sched.iterations);
    let mut lr_trace = Vec::with_capacity(sched.iterations);
    let loss_scale = 1.0 / (opts.batch_size as f64 * 3.0);

    for t in 0..sched.iterations {
        // Round-robin view assignment so every pose receives gradient each
        // step; pixel positions are uniform.
        rays.clear();
        for i in 0..opts.batch_size {
            rays.push(RayRef {
                view: i % n_views,
                x: ray_rng.gen_range(0..intr.width),
                y: ray_rng.gen_range(0..intr.height),
            });
        }

        let composed = compose_views(bases, &twists);
        let jitter_seed = opts.jitter.then(|| jitter_base.wrapping_add(t as u64));
        let chunk_len = opts.batch_size.div_ceil(n_chunks);
        {
            let grid_ref = &grid;
            let composed_ref = &composed;
            let references_ref = &references;
            let rays_ref = &rays;
            scratches.par_iter_mut().enumerate().for_each(|(ci, scratch)| {
                scratch.reset();
                let start = ci * chunk_len;
                let end = (start + chunk_len).min(rays_ref.len());
                if start < end {
                    backward_rays(
                        grid_ref,
                        composed_ref,
                        references_ref,
                        intr,
                        &opts.render,
                        &rays_ref[start..end],
                        jitter_seed,
                        loss_scale,
                        scratch,
                    );
                }
            });
        }
        master.reset();
        for s in &scratches {
            master.merge(s);
        }

        let loss = master.loss_sum;
        if !loss.is_finite() {
            return Err(CbarfError::Diverged { iteration: t, loss });
        }

        let lr_pose = sched.lr_pose(t);
        let lr_grid = sched.lr_grid(t);
        let step = t + 1;

        // Sparse Adam over touched grid nodes; untouched nodes received zero
        // gradient this step and keep their parameters and moments.
        for &idx32 in &master.touched {
            let idx = idx32 as usize;
            grid.density[idx] += adam_density.step(idx, master.d_density[idx], lr_grid, step);
            for ch in 0..3 {
                let ci = idx * 3 + ch;
                grid.color[ci] += adam_color.step(ci, master.d_color[ci], lr_grid, step);
            }
        }

        if pose_trainable {
            for (v, g) in master.d_twist.iter().enumerate() {
                let mut tw = twists[v];
                for k in 0..6 {
                    let delta = adam_twist.step(v * 6 + k, g[k], lr_pose, step);
                    if k < 3 {
                        tw.rho[k] += delta;
                    } else {
                        tw.omega[k - 3] += delta;
                    }
                }
                twists[v] = tw;
            }
        }

        loss_trace.push(loss);
        lr_trace.push((lr_pose, lr_grid));
    }

    Ok(BAState {
        grid,
        twists,
        loss_trace,
        lr_trace,
    })
}

/// Default grid initialization for a stage: uniform low density, mid gray.
pub fn fresh_grid(resolution: [usize; 3], bbox_min: Vector3<f64>, bbox_max: Vector3<f64>) -> VoxelGrid {
    VoxelGrid::uniform(resolution, bbox_min, bbox_max, -4.0, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{pose_errors, procrustes_align};
    use crate::render::synthesize_views;
    use crate::scene::{generate_scene, sample_hemisphere_cameras, CameraIntrinsics, SceneSpec};
    use crate::se3::{perturb_pose, NoiseConfig, NoiseSampler};

    #[test]
    fn learning_rate_endpoints() {
        assert_eq!(learning_rate(0, 100, 1e-2, 1e-4, 1.0), 1e-2);
        let end = learning_rate(100, 100, 1e-2, 1e-4, 1.0);
        assert!((end - 1e-4).abs() < 1e-18);
        let end_m = learning_rate(100, 100, 1e-2, 1e-4, 10.0);
        assert!((end_m - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn learning_rate_geometric_midpoint() {
        let mid = learning_rate(50, 100, 1e-2, 1e-4, 1.0);
        assert!((mid - 1e-3).abs() < 1e-15, "m = 1 midpoint is sqrt(lr0 lr1)");
    }

    #[test]
    fn large_modulation_stays_near_start() {
        let mid = learning_rate(50, 100, 1e-2, 1e-4, 10.0);
        let expected = 1e-2 * 0.01f64.powf(0.5f64.powi(10));
        assert!((mid - expected).abs() < 1e-15);
        assert!(mid > 0.99e-2, "within 1% of lr0 when lr1/lr0 = 0.01");
    }

    #[test]
    fn learning_rate_monotone_nonincreasing() {
        for m in [1.0, 3.0, 10.0] {
            let mut prev = f64::INFINITY;
            for t in 0..=200 {
                let lr = learning_rate(t, 200, 5e-2, 1e-3, m);
                assert!(lr <= prev + 1e-18);
                prev = lr;
            }
        }
    }

    #[test]
    fn zero_start_rate_is_always_zero() {
        for t in 0..=10 {
            assert_eq!(learning_rate(t, 10, 0.0, 0.0, 3.0), 0.0);
        }
    }

    #[test]
    fn schedule_validation() {
        let mut s = ScheduleConfig {
            iterations: 100,
            lr_pose_start: 1e-2,
            lr_pose_end: 1e-4,
            lr_grid_start: 1e-1,
            lr_grid_end: 1e-2,
            modulation: 3.0,
        };
        assert!(s.validate().is_ok());
        s.modulation = 0.5;
        assert!(s.validate().is_err());
        s.modulation = 1.0;
        s.lr_pose_end = 1e-1;
        assert!(s.validate().is_err());
        s.lr_pose_start = 0.0;
        s.lr_pose_end = 0.0;
        assert!(s.validate().is_ok());
        s.iterations = 0;
        assert!(s.validate().is_err());
    }

    fn tiny_setup(n_views: usize, res: usize) -> (ViewSet, Vec<PoseSE3>, VoxelGrid) {
        let scene = generate_scene(&SceneSpec {
            seed: 5,
            n_blobs: 6,
            resolution: [32, 32, 32],
        })
        .unwrap();
        let poses = sample_hemisphere_cameras(n_views, 1.3, 7);
        let intr = CameraIntrinsics::centered(res, res, res as f64 * 0.9);
        let cfg = BaOptions::default().render;
        let views = synthesize_views(&scene, &poses, &intr, &cfg);
        let grid = fresh_grid(
            [24, 24, 24],
            Vector3::new(-0.5, -0.5, -0.5),
            Vector3::new(0.5, 0.5, 0.5),
        );
        (views, poses, grid)
    }

    fn quick_sched(iterations: usize) -> ScheduleConfig {
        ScheduleConfig {
            iterations,
            lr_pose_start: 1e-2,
            lr_pose_end: 1e-4,
            lr_grid_start: 1e-1,
            lr_grid_end: 1e-2,
            modulation: 3.0,
        }
    }

    #[test]
    fn deterministic_loss_trace() {
        let (views, poses, grid) = tiny_setup(4, 24);
        let opts = BaOptions {
            batch_size: 128,
            ..BaOptions::default()
        };
        let sched = quick_sched(40);
        let a = run_compact_ba(&views, &poses, grid.clone(), &sched, &opts, 99).unwrap();
        let b = run_compact_ba(&views, &poses, grid, &sched, &opts, 99).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        for (x, y) in a.twists.iter().zip(&b.twists) {
            assert_eq!(x.rho, y.rho);
            assert_eq!(x.omega, y.omega);
        }
    }

    #[test]
    fn chunk_count_does_not_change_result() {
        let (views, poses, grid) = tiny_setup(4, 24);
        let sched = quick_sched(30);
        let mk = |chunks| BaOptions {
            batch_size: 128,
            chunks,
            ..BaOptions::default()
        };
        let a = run_compact_ba(&views, &poses, grid.clone(), &sched, &mk(1), 3).unwrap();
        let b = run_compact_ba(&views, &poses, grid, &sched, &mk(8), 3).unwrap();
        // merge order is fixed by chunk index but chunk boundaries differ, so
        // allow float-level differences only
        for (x, y) in a.loss_trace.iter().zip(&b.loss_trace) {
            assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn zero_pose_lr_keeps_poses_bit_identical() {
        let (views, poses, grid) = tiny_setup(4, 24);
        let sched = ScheduleConfig {
            lr_pose_start: 0.0,
            lr_pose_end: 0.0,
            ..quick_sched(50)
        };
        let opts = BaOptions {
            batch_size: 128,
            ..BaOptions::default()
        };
        let state = run_compact_ba(&views, &poses, grid, &sched, &opts, 11).unwrap();
        let refined = state.refined_poses(&poses);
        for (r, p) in refined.iter().zip(&poses) {
            assert_eq!(r.to_row_major(), p.to_row_major());
        }
    }

    #[test]
    fn loss_decreases_on_reconstruction() {
        let (views, poses, grid) = tiny_setup(4, 24);
        let sched = ScheduleConfig {
            lr_pose_start: 0.0,
            lr_pose_end: 0.0,
            ..quick_sched(300)
        };
        let opts = BaOptions {
            batch_size: 256,
            ..BaOptions::default()
        };
        let state = run_compact_ba(&views, &poses, grid, &sched, &opts, 4).unwrap();
        let head: f64 = state.loss_trace[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = state.loss_trace[state.loss_trace.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(
            tail < head * 0.2,
            "reconstruction loss should fall sharply: head {head:.5} tail {tail:.5}"
        );
    }

    #[test]
    fn refined_poses_stay_valid() {
        let (views, poses, grid) = tiny_setup(4, 24);
        let opts = BaOptions {
            batch_size: 256,
            ..BaOptions::default()
        };
        let state = run_compact_ba(&views, &poses, grid, &quick_sched(150), &opts, 8).unwrap();
        for p in state.refined_poses(&poses) {
            assert!(p.is_valid());
        }
        assert_eq!(state.loss_trace.len(), 150);
        assert!(state.loss_trace.iter().all(|l| l.is_finite()));
    }

    /// End-to-end module example: moderate pose noise on 20 views at 64x64
    /// recovers to under a degree of rotation error in 2k iterations.
    #[test]
    fn moderate_noise_recovers_below_one_degree() {
        let scene = generate_scene(&SceneSpec {
            seed: 12,
            n_blobs: 8,
            resolution: [48, 48, 48],
        })
        .unwrap();
        let gt_poses = sample_hemisphere_cameras(20, 1.3, 21);
        let intr = CameraIntrinsics::centered(64, 64, 60.0);
        let opts = BaOptions::default();
        let views = synthesize_views(&scene, &gt_poses, &intr, &opts.render);
        let mut sampler = NoiseSampler::new(NoiseConfig {
            coefficient: 0.05,
            seed: 77,
        });
        let noisy: Vec<PoseSE3> = gt_poses
            .iter()
            .map(|p| perturb_pose(p, &crate::se3::exp_map(&sampler.sample())))
            .collect();
        let grid = fresh_grid(
            [48, 48, 48],
            Vector3::new(-0.5, -0.5, -0.5),
            Vector3::new(0.5, 0.5, 0.5),
        );
        let sched = ScheduleConfig {
            iterations: 2000,
            lr_pose_start: 7e-3,
            lr_pose_end: 1e-5,
            lr_grid_start: 3e-1,
            lr_grid_end: 1e-2,
            modulation: 5.0,
        };
        let state = run_compact_ba(&views, &noisy, grid, &sched, &opts, 31).unwrap();
        let refined = state.refined_poses(&noisy);
        let align = procrustes_align(&refined, &gt_poses).unwrap();
        let report = pose_errors(&refined, &gt_poses, &align);
        let align0 = procrustes_align(&noisy, &gt_poses).unwrap();
        let before = pose_errors(&noisy, &gt_poses, &align0);
        assert!(
            report.mean_rotation_deg < 1.0,
            "mean rotation error {:.3} deg (started at {:.3})",
            report.mean_rotation_deg,
            before.mean_rotation_deg
        );
        assert!(report.mean_rotation_deg < before.mean_rotation_deg * 0.5);

        // Trace sanity: finite everywhere and broadly non-increasing over the
        // final half (200-step moving average).
        let trace = &state.loss_trace;
        assert!(trace.iter().all(|l| l.is_finite()));
        let ma: Vec<f64> = (0..trace.len() - 200)
            .map(|i| trace[i..i + 200].iter().sum::<f64>() / 200.0)
            .collect();
        let half = ma.len() / 2;
        for w in ma[half..].windows(2) {
            assert!(w[1] <= w[0] * 1.02, "moving average rose sharply late in training");
        }
    }

    /// With exact starting poses a gentle schedule must not push them away:
    /// the equilibrium with the co-adapting grid stays well under 0.1 degree.
    #[test]
    fn exact_poses_stay_put_under_gentle_schedule() {
        let scene = generate_scene(&SceneSpec {
            seed: 12,
            n_blobs: 8,
            resolution: [48, 48, 48],
        })
        .unwrap();
        let gt_poses = sample_hemisphere_cameras(20, 1.3, 21);
        let intr = CameraIntrinsics::centered(64, 64, 60.0);
        let opts = BaOptions {
            batch_size: 1024,
            pose_eps: 1e-2,
            ..BaOptions::default()
        };
        let views = synthesize_views(&scene, &gt_poses, &intr, &opts.render);
        let grid = fresh_grid(
            [48, 48, 48],
            Vector3::new(-0.5, -0.5, -0.5),
            Vector3::new(0.5, 0.5, 0.5),
        );
        let sched = ScheduleConfig {
            iterations: 1000,
            lr_pose_start: 3e-4,
            lr_pose_end: 1e-6,
            lr_grid_start: 3e-1,
            lr_grid_end: 1e-2,
            modulation: 1.0,
        };
        let state = run_compact_ba(&views, &gt_poses, grid, &sched, &opts, 31).unwrap();
        let refined = state.refined_poses(&gt_poses);
        let align = procrustes_align(&refined, &gt_poses).unwrap();
        let report = pose_errors(&refined, &gt_poses, &align);
        assert!(
            report.mean_rotation_deg < 0.1,
            "mean rotation drift {:.4} deg",
            report.mean_rotation_deg
        );
    }
}
