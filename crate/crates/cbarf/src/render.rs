//! Differentiable emission-absorption volume renderer over a [`VoxelGrid`].
//!
//! Densities are stored pre-activation (softplus at sample time) and colors
//! pre-sigmoid, so gradient steps cannot leave the valid ranges. Pose
//! gradients are taken with respect to a local twist applied as
//! `R <- R_base * Exp(omega)`, `t <- t_base + rho`, matching the
//! multiplicative-rotation / additive-translation refinement composition.

use crate::error::{CbarfError, Result};
use crate::img::{ImageRgb, Mask};
use crate::scene::{sigmoid, softplus, softplus_derivative, CameraIntrinsics, View, ViewSet, VoxelGrid};
use crate::se3::{exp_so3, right_jacobian, PoseSE3, TwistVector};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.near < 0.0 || self.far <= self.near || self.samples_per_ray < 2 {
            return Err(CbarfError::InvalidArgument(format!(
                "bad render config: near {}, far {}, samples {}",
                self.near, self.far, self.samples_per_ray
            )));
        }
        Ok(())
    }
}

/// Rendered RGB plus expected termination depth and accumulated opacity.
#[derive(Clone, Debug)]
pub struct RenderedView {
    pub rgb: ImageRgb,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl RenderedView {
    /// Foreground mask from accumulated opacity.
    pub fn opacity_mask(&self, threshold: f64) -> Mask {
        Mask {
            width: self.rgb.width,
            height: self.rgb.height,
            data: self.opacity.iter().map(|&o| o > threshold).collect(),
        }
    }
}

/// Dense gradients of the photometric loss for one ray batch.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    /// d loss / d raw density, one per grid node.
    pub d_density: Vec<f64>,
    /// d loss / d raw color, three per grid node.
    pub d_color: Vec<f64>,
    /// d loss / d twist (rho, omega) per view.
    pub d_twist: Vec<[f64; 6]>,
}

/// One ray of a training batch: which view, which pixel.
#[derive(Clone, Copy, Debug)]
pub struct RayRef {
    pub view: usize,
    pub x: usize,
    pub y: usize,
}

/// Pose actually used for rendering view `v` during optimization:
/// `R_base * Exp(omega)` with center `t_base + rho`.
pub fn compose_pose(base: &PoseSE3, twist: &TwistVector) -> PoseSE3 {
    PoseSE3::new(
        base.rotation * exp_so3(&twist.omega),
        base.translation + twist.rho,
    )
}

/// Unit ray direction in camera coordinates for pixel (x, y).
#[inline]
fn camera_ray(intr: &CameraIntrinsics, x: usize, y: usize) -> Vector3<f64> {
    Vector3::new(
        (x as f64 + 0.5 - intr.cx) / intr.focal,
        (y as f64 + 0.5 - intr.cy) / intr.focal,
        1.0,
    )
    .normalize()
}

/// Slab test: does the ray hit the bbox anywhere inside [near, far]?
fn intersects_bbox(grid: &VoxelGrid, o: &Vector3<f64>, d: &Vector3<f64>, cfg: &RenderConfig) -> bool {
    let mut t0 = cfg.near;
    let mut t1 = cfg.far;
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < grid.bbox_min[a] || o[a] > grid.bbox_max[a] {
                return false;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = (
            (grid.bbox_min[a] - o[a]) * inv,
            (grid.bbox_max[a] - o[a]) * inv,
        );
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return false;
        }
    }
    true
}

/// splitmix64-style hash for order-independent per-sample jitter.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[inline]
fn jitter_at(seed: u64, ray: u64, sample: u64) -> f64 {
    let h = mix(seed ^ mix(ray.wrapping_mul(0x517cc1b727220a95) ^ sample));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

struct Interp {
    /// Grid-node index of the cell's min corner.
    base: [usize; 3],
    /// Fractional position inside the cell.
    frac: [f64; 3],
    /// d(grid coordinate)/d(world coordinate) per axis.
    scale: [f64; 3],
}

#[inline]
fn locate(grid: &VoxelGrid, p: &Vector3<f64>) -> Option<Interp> {
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    let mut scale = [0.0f64; 3];
    for a in 0..3 {
        if p[a] < grid.bbox_min[a] || p[a] > grid.bbox_max[a] {
            return None;
        }
        let steps = (grid.resolution[a] - 1) as f64;
        let s = steps / (grid.bbox_max[a] - grid.bbox_min[a]);
        // clamp-to-edge absorbs boundary rounding
        let g = ((p[a] - grid.bbox_min[a]) * s).clamp(0.0, steps);
        let i = (g.floor() as usize).min(grid.resolution[a] - 2);
        base[a] = i;
        frac[a] = g - i as f64;
        scale[a] = s;
    }
    Some(Interp { base, frac, scale })
}

/// Corner node indices and trilinear weights for a located sample.
#[inline]
fn corners(grid: &VoxelGrid, it: &Interp) -> [(usize, f64); 8] {
    let [fx, fy, fz] = it.frac;
    let mut out = [(0usize, 0.0f64); 8];
    let mut n = 0;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - fz } else { fz };
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - fy } else { fy };
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - fx } else { fx };
                let idx =
                    grid.node_index(it.base[0] + dx, it.base[1] + dy, it.base[2] + dz);
                out[n] = (idx, wx * wy * wz);
                n += 1;
            }
        }
    }
    out
}

/// d(weight)/d(frac) for the 8 corners, one derivative per axis.
#[inline]
fn corner_weight_grads(it: &Interp) -> [[f64; 3]; 8] {
    let [fx, fy, fz] = it.frac;
    let mut out = [[0.0f64; 3]; 8];
    let mut n = 0;
    for dz in 0..2 {
        let (wz, gz) = if dz == 0 { (1.0 - fz, -1.0) } else { (fz, 1.0) };
        for dy in 0..2 {
            let (wy, gy) = if dy == 0 { (1.0 - fy, -1.0) } else { (fy, 1.0) };
            for dx in 0..2 {
                let (wx, gx) = if dx == 0 { (1.0 - fx, -1.0) } else { (fx, 1.0) };
                out[n] = [gx * wy * wz, wx * gy * wz, wx * wy * gz];
                n += 1;
            }
        }
    }
    out
}

struct SampleRecord {
    interp: Interp,
    weights: [(usize, f64); 8],
    raw_density: f64,
    alpha: f64,
    trans: f64,
    color: [f64; 3],
    depth: f64,
}

/// Trace one ray; optionally record per-sample state for the backward pass.
fn trace_ray(
    grid: &VoxelGrid,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    cfg: &RenderConfig,
    jitter: impl Fn(u64) -> f64,
    mut record: Option<&mut Vec<SampleRecord>>,
) -> ([f64; 3], f64, f64) {
    let step = (cfg.far - cfg.near) / cfg.samples_per_ray as f64;
    let mut transmittance = 1.0;
    let mut rgb = [0.0f64; 3];
    let mut depth_acc = 0.0;
    if intersects_bbox(grid, origin, dir, cfg) {
        for i in 0..cfg.samples_per_ray {
            let s = cfg.near + (i as f64 + jitter(i as u64)) * step;
            let p = origin + dir * s;
            let Some(interp) = locate(grid, &p) else {
                continue;
            };
            let w = corners(grid, &interp);
            let mut raw_d = 0.0;
            let mut raw_c = [0.0f64; 3];
            for &(idx, wt) in &w {
                raw_d += wt * grid.density[idx];
                raw_c[0] += wt * grid.color[idx * 3];
                raw_c[1] += wt * grid.color[idx * 3 + 1];
                raw_c[2] += wt * grid.color[idx * 3 + 2];
            }
            let sigma = softplus(raw_d);
            let alpha = 1.0 - (-sigma * step).exp();
            let c = [sigmoid(raw_c[0]), sigmoid(raw_c[1]), sigmoid(raw_c[2])];
            let wgt = transmittance * alpha;
            rgb[0] += wgt * c[0];
            rgb[1] += wgt * c[1];
            rgb[2] += wgt * c[2];
            depth_acc += wgt * s;
            let t_here = transmittance;
            transmittance *= 1.0 - alpha;
            if let Some(rec) = record.as_deref_mut() {
                rec.push(SampleRecord {
                    interp,
                    weights: w,
                    raw_density: raw_d,
                    alpha,
                    trans: t_here,
                    color: c,
                    depth: s,
                });
            }
            if transmittance < 1e-7 {
                break;
            }
        }
    }
    for ch in 0..3 {
        rgb[ch] += transmittance * cfg.background[ch];
    }
    let opacity = 1.0 - transmittance;
    let depth = depth_acc / opacity.max(1e-8);
    (rgb, depth, opacity)
}

/// Deterministic full-frame render (midpoint samples).
pub fn render(
    grid: &VoxelGrid,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> RenderedView {
    cfg.validate().expect("invalid render config");
    let (w, h) = (intr.width, intr.height);
    let mut out = RenderedView {
        rgb: ImageRgb::new(w, h),
        depth: vec![0.0; w * h],
        opacity: vec![0.0; w * h],
    };
    let origin = pose.translation;
    for y in 0..h {
        for x in 0..w {
            let dir = pose.rotation * camera_ray(intr, x, y);
            let (rgb, depth, opacity) = trace_ray(grid, &origin, &dir, cfg, |_| 0.5, None);
            out.rgb.set_pixel(x, y, rgb);
            out.depth[y * w + x] = depth;
            out.opacity[y * w + x] = opacity;
        }
    }
    out
}

/// Per-sample transmittance profile for one pixel (diagnostic).
pub fn transmittance_profile(
    grid: &VoxelGrid,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
    x: usize,
    y: usize,
) -> Vec<f64> {
    let dir = pose.rotation * camera_ray(intr, x, y);
    let mut rec = Vec::new();
    trace_ray(grid, &pose.translation, &dir, cfg, |_| 0.5, Some(&mut rec));
    rec.iter().map(|r| r.trans).collect()
}

/// Mean squared RGB error between a rendered view and its reference image.
pub fn photometric_loss(rendered: &RenderedView, reference: &ImageRgb) -> Result<f64> {
    crate::img::mse(&rendered.rgb, reference)
}

/// Reusable accumulation buffers for the backward pass. Grid gradients are
/// tracked sparsely through a touched-node list so workers can reuse their
/// scratch across iterations without full re-zeroing.
pub struct GradScratch {
    pub d_density: Vec<f64>,
    pub d_color: Vec<f64>,
    pub d_twist: Vec<[f64; 6]>,
    pub touched: Vec<u32>,
    stamp: Vec<u32>,
    epoch: u32,
    pub loss_sum: f64,
}

impl GradScratch {
    pub fn new(grid: &VoxelGrid, n_views: usize) -> Self {
        let n = grid.node_count();
        Self {
            d_density: vec![0.0; n],
            d_color: vec![0.0; n * 3],
            d_twist: vec![[0.0; 6]; n_views],
            touched: Vec::new(),
            stamp: vec![u32::MAX; n],
            epoch: 0,
            loss_sum: 0.0,
        }
    }

    pub fn reset(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == u32::MAX {
            self.stamp.fill(u32::MAX - 1);
            self.epoch = 0;
        }
        self.touched.clear();
        for t in &mut self.d_twist {
            *t = [0.0; 6];
        }
        self.loss_sum = 0.0;
    }

    #[inline]
    fn touch(&mut self, idx: usize) {
        if self.stamp[idx] != self.epoch {
            self.stamp[idx] = self.epoch;
            self.touched.push(idx as u32);
            self.d_density[idx] = 0.0;
            self.d_color[idx * 3] = 0.0;
            self.d_color[idx * 3 + 1] = 0.0;
            self.d_color[idx * 3 + 2] = 0.0;
        }
    }

    /// Fold another scratch (same grid/views) into this one.
    pub fn merge(&mut self, other: &GradScratch) {
        for &idx32 in &other.touched {
            let idx = idx32 as usize;
            self.touch(idx);
            self.d_density[idx] += other.d_density[idx];
            for ch in 0..3 {
                self.d_color[idx * 3 + ch] += other.d_color[idx * 3 + ch];
            }
        }
        for (a, b) in self.d_twist.iter_mut().zip(&other.d_twist) {
            for k in 0..6 {
                a[k] += b[k];
            }
        }
        self.loss_sum += other.loss_sum;
    }

    pub fn into_bundle(self) -> GradientBundle {
        GradientBundle {
            d_density: self.d_density,
            d_color: self.d_color,
            d_twist: self.d_twist,
        }
    }
}

/// Per-view quantities precomputed for the backward pass.
pub struct ComposedView {
    pub rotation: Matrix3<f64>,
    pub origin: Vector3<f64>,
    jr_t: Matrix3<f64>,
}

pub fn compose_views(bases: &[PoseSE3], twists: &[TwistVector]) -> Vec<ComposedView> {
    bases
        .iter()
        .zip(twists)
        .map(|(base, tw)| ComposedView {
            rotation: base.rotation * exp_so3(&tw.omega),
            origin: base.translation + tw.rho,
            jr_t: right_jacobian(&tw.omega).transpose(),
        })
        .collect()
}

/// Photometric loss and analytic gradients over one ray batch, accumulated
/// into `scratch`. `loss_scale` is `1 / (batch_size * 3)` so chunked batches
/// sum to the batch mean; `jitter_seed = None` renders deterministic
/// midpoints.
#[allow(clippy::too_many_arguments)]
pub fn backward_rays(
    grid: &VoxelGrid,
    composed: &[ComposedView],
    references: &[&ImageRgb],
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
    rays: &[RayRef],
    jitter_seed: Option<u64>,
    loss_scale: f64,
    scratch: &mut GradScratch,
) {
    let step = (cfg.far - cfg.near) / cfg.samples_per_ray as f64;
    let mut rec: Vec<SampleRecord> = Vec::with_capacity(cfg.samples_per_ray);
    for ray in rays {
        let view = &composed[ray.view];
        let reference = references[ray.view];
        let d_cam = camera_ray(intr, ray.x, ray.y);
        let dir = view.rotation * d_cam;
        rec.clear();
        let ray_key = ((ray.view as u64) << 40) | ((ray.y as u64) << 20) | ray.x as u64;
        let (pixel, _, _) = match jitter_seed {
            Some(seed) => trace_ray(
                grid,
                &view.origin,
                &dir,
                cfg,
                |i| jitter_at(seed, ray_key, i),
                Some(&mut rec),
            ),
            None => trace_ray(grid, &view.origin, &dir, cfg, |_| 0.5, Some(&mut rec)),
        };

        let target = reference.pixel(ray.x, ray.y);
        let mut g = [0.0f64; 3];
        for ch in 0..3 {
            let e = pixel[ch] - target[ch];
            scratch.loss_sum += e * e * loss_scale;
            g[ch] = 2.0 * e * loss_scale;
        }
        if rec.is_empty() {
            continue;
        }

        // Suffix sums: S_i = sum_{j>i} T_j a_j (g . c_j) + T_end (g . bg).
        let last = rec.last().unwrap();
        let t_end = last.trans * (1.0 - last.alpha);
        let g_bg = g[0] * cfg.background[0] + g[1] * cfg.background[1] + g[2] * cfg.background[2];
        let mut suffix = t_end * g_bg;

        // d loss / d world direction, accumulated over samples.
        let mut d_dir = Vector3::zeros();
        let mut d_origin = Vector3::zeros();

        for r in rec.iter().rev() {
            let g_c = g[0] * r.color[0] + g[1] * r.color[1] + g[2] * r.color[2];
            let one_minus_alpha = 1.0 - r.alpha;
            let d_alpha = r.trans * g_c - suffix / one_minus_alpha.max(1e-300);
            suffix += r.trans * r.alpha * g_c;

            let sigma = softplus(r.raw_density);
            // d alpha / d sigma = step * exp(-sigma * step)
            let d_raw_density =
                d_alpha * step * (-sigma * step).exp() * softplus_derivative(r.raw_density);

            let wgt = r.trans * r.alpha;
            let mut d_raw_color = [0.0f64; 3];
            for ch in 0..3 {
                let s = r.color[ch];
                d_raw_color[ch] = g[ch] * wgt * s * (1.0 - s);
            }

            // Scatter to grid nodes.
            for &(idx, w) in &r.weights {
                scratch.touch(idx);
                scratch.d_density[idx] += w * d_raw_density;
                for ch in 0..3 {
                    scratch.d_color[idx * 3 + ch] += w * d_raw_color[ch];
                }
            }

            // Position gradient through the trilinear weights.
            let wgrads = corner_weight_grads(&r.interp);
            let mut d_frac = [0.0f64; 3];
            for (c, &(idx, _)) in r.weights.iter().enumerate() {
                let dv = d_raw_density * grid.density[idx]
                    + d_raw_color[0] * grid.color[idx * 3]
                    + d_raw_color[1] * grid.color[idx * 3 + 1]
                    + d_raw_color[2] * grid.color[idx * 3 + 2];
                for a in 0..3 {
                    d_frac[a] += dv * wgrads[c][a];
                }
            }
            let d_point = Vector3::new(
                d_frac[0] * r.interp.scale[0],
                d_frac[1] * r.interp.scale[1],
                d_frac[2] * r.interp.scale[2],
            );
            d_origin += d_point;
            d_dir += d_point * r.depth;
        }

        // Chain to the twist: origin = t_base + rho, dir = R_base Exp(w) d_cam.
        let u = view.rotation.transpose() * d_dir;
        let d_omega = view.jr_t * d_cam.cross(&u);
        let t = &mut scratch.d_twist[ray.view];
        t[0] += d_origin.x;
        t[1] += d_origin.y;
        t[2] += d_origin.z;
        t[3] += d_omega.x;
        t[4] += d_omega.y;
        t[5] += d_omega.z;
    }
}

/// Convenience wrapper building a fresh [`GradientBundle`]; returns the mean
/// squared error over the batch as well.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    grid: &VoxelGrid,
    bases: &[PoseSE3],
    twists: &[TwistVector],
    references: &[&ImageRgb],
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
    rays: &[RayRef],
    jitter_seed: Option<u64>,
) -> (f64, GradientBundle) {
    let composed = compose_views(bases, twists);
    let mut scratch = GradScratch::new(grid, bases.len());
    scratch.reset();
    let scale = 1.0 / (rays.len() as f64 * 3.0);
    backward_rays(
        grid,
        &composed,
        references,
        intr,
        cfg,
        rays,
        jitter_seed,
        scale,
        &mut scratch,
    );
    let loss = scratch.loss_sum;
    (loss, scratch.into_bundle())
}

/// Render ground-truth views of a grid at the given poses; foreground masks
/// come from accumulated opacity > 0.5.
pub fn synthesize_views(
    grid: &VoxelGrid,
    poses: &[PoseSE3],
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> ViewSet {
    use rayon::prelude::*;
    let views: Vec<View> = poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let rv = render(grid, pose, intr, cfg);
            View {
                id: i as u32,
                mask: Some(rv.opacity_mask(0.5)),
                image: rv.rgb,
                pose: Some(*pose),
            }
        })
        .collect();
    ViewSet {
        intrinsics: *intr,
        views,
    }
}
