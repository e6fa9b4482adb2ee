//! Erroneous-pose detection: score each view by matching ORB-style
//! keypoints between its rendered and reference images, supplement with
//! foreground-compensated MSE, and classify views superior/inferior.

use crate::error::{CbarfError, Result};
use crate::img::{ImageRgb, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

/// Corner with orientation and Harris response.
#[derive(Clone, Copy, Debug)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub orientation: f64,
    pub response: f64,
}

/// 256-bit steered BRIEF descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinaryDescriptor(pub [u64; 4]);

impl BinaryDescriptor {
    pub fn hamming(&self, other: &BinaryDescriptor) -> u32 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

/// One surviving keypoint correspondence.
#[derive(Clone, Copy, Debug)]
pub struct MatchPair {
    pub ref_idx: usize,
    pub ren_idx: usize,
    pub hamming: u32,
    /// Euclidean pixel distance between the matched coordinates.
    pub offset: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Label {
    Superior,
    Inferior,
}

/// Per-view score assembled by [`combined_score`] and labeled by
/// [`classify`].
#[derive(Clone, Debug)]
pub struct ViewScore {
    pub view_id: u32,
    pub kp_score: f64,
    pub mse_c: f64,
    pub combined: f64,
    pub label: Label,
    /// Keypoints detected in the reference image; below `k_min` the combined
    /// score falls back to the MSE rank alone.
    pub ref_keypoints: usize,
    /// Set when the foreground mask was empty and plain MSE was used.
    pub degenerate_mask: bool,
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct CriterionParams {
    pub max_keypoints: usize,
    /// FAST brightness threshold on unit-range intensities.
    pub fast_threshold: f64,
    /// Lowe ratio test bound on nearest/second-nearest Hamming distance.
    pub ratio: f64,
    /// Coordinate constraint as a fraction of the image diagonal.
    pub tau_frac: f64,
    /// Minimum reference keypoints for the keypoint criterion to count.
    pub k_min: usize,
    /// Weight of the keypoint rank in the combined score.
    pub w: f64,
    /// Inferior cut: combined < mean - sigma_factor * std.
    pub sigma_factor: f64,
    /// Cap on the inferior fraction (ceil of this fraction of views).
    pub max_inferior_frac: f64,
}

impl Default for CriterionParams {
    fn default() -> Self {
        Self {
            max_keypoints: 500,
            fast_threshold: 0.08,
            ratio: 0.75,
            tau_frac: 0.05,
            k_min: 50,
            w: 0.7,
            sigma_factor: 1.0,
            max_inferior_frac: 0.25,
        }
    }
}

const PATCH_RADIUS: i64 = 15;
/// BRIEF sampling pattern stays inside this radius so any rotation fits the
/// 31x31 patch.
const PATTERN_RADIUS: f64 = 13.0;
const PATTERN_SEED: u64 = 0x0b5e_55ed_c0ff_ee00;

/// FAST-9 circle offsets, clockwise from 12 o'clock.
const CIRCLE: [(i64, i64); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

struct Gray {
    w: i64,
    h: i64,
    data: Vec<f64>,
}

impl Gray {
    #[inline]
    fn at(&self, x: i64, y: i64) -> f64 {
        let x = x.clamp(0, self.w - 1);
        let y = y.clamp(0, self.h - 1);
        self.data[(y * self.w + x) as usize]
    }

    /// 5x5 box blur, used for descriptor comparisons.
    fn blurred(&self) -> Gray {
        let mut out = vec![0.0; self.data.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                let mut s = 0.0;
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        s += self.at(x + dx, y + dy);
                    }
                }
                out[(y * self.w + x) as usize] = s / 25.0;
            }
        }
        Gray {
            w: self.w,
            h: self.h,
            data: out,
        }
    }
}

fn gray_of(img: &ImageRgb) -> Gray {
    Gray {
        w: img.width as i64,
        h: img.height as i64,
        data: img.to_gray(),
    }
}

/// FAST-9 segment test: some arc of >= 9 contiguous circle pixels all
/// brighter than center + t or all darker than center - t.
fn fast_corner(g: &Gray, x: i64, y: i64, t: f64) -> bool {
    let c = g.at(x, y);
    let mut brighter = [false; 16];
    let mut darker = [false; 16];
    for (i, (dx, dy)) in CIRCLE.iter().enumerate() {
        let v = g.at(x + dx, y + dy);
        brighter[i] = v > c + t;
        darker[i] = v < c - t;
    }
    let has_arc = |flags: &[bool; 16]| {
        let mut run = 0usize;
        // doubled loop handles wrap-around arcs
        for i in 0..32 {
            if flags[i % 16] {
                run += 1;
                if run >= 9 {
                    return true;
                }
            } else {
                run = 0;
            }
        }
        false
    };
    has_arc(&brighter) || has_arc(&darker)
}

/// Harris corner response over a 7x7 window of Sobel gradients.
fn harris_response(g: &Gray, x: i64, y: i64) -> f64 {
    let mut a = 0.0;
    let mut b = 0.0;
    let mut c = 0.0;
    for dy in -3..=3i64 {
        for dx in -3..=3i64 {
            let px = x + dx;
            let py = y + dy;
            let ix = g.at(px + 1, py) - g.at(px - 1, py);
            let iy = g.at(px, py + 1) - g.at(px, py - 1);
            a += ix * ix;
            b += iy * iy;
            c += ix * iy;
        }
    }
    let det = a * b - c * c;
    let tr = a + b;
    det - 0.04 * tr * tr
}

/// Intensity-centroid orientation over a radius-15 disc.
fn orientation(g: &Gray, x: i64, y: i64) -> f64 {
    let mut m10 = 0.0;
    let mut m01 = 0.0;
    let r = PATCH_RADIUS;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                let v = g.at(x + dx, y + dy);
                m10 += dx as f64 * v;
                m01 += dy as f64 * v;
            }
        }
    }
    m01.atan2(m10)
}

fn brief_pattern() -> Vec<[f64; 4]> {
    let mut rng = ChaCha12Rng::seed_from_u64(PATTERN_SEED);
    let mut pairs = Vec::with_capacity(256);
    let draw = |rng: &mut ChaCha12Rng| loop {
        let x = rng.gen_range(-PATTERN_RADIUS..PATTERN_RADIUS);
        let y = rng.gen_range(-PATTERN_RADIUS..PATTERN_RADIUS);
        if x * x + y * y <= PATTERN_RADIUS * PATTERN_RADIUS {
            return (x, y);
        }
    };
    for _ in 0..256 {
        let (ax, ay) = draw(&mut rng);
        let (bx, by) = draw(&mut rng);
        pairs.push([ax, ay, bx, by]);
    }
    pairs
}

fn describe(blur: &Gray, kp: &Keypoint, pattern: &[[f64; 4]]) -> BinaryDescriptor {
    let (s, c) = kp.orientation.sin_cos();
    let mut words = [0u64; 4];
    for (i, p) in pattern.iter().enumerate() {
        let rot = |px: f64, py: f64| {
            (
                (kp.x + c * px - s * py).round() as i64,
                (kp.y + s * px + c * py).round() as i64,
            )
        };
        let (ax, ay) = rot(p[0], p[1]);
        let (bx, by) = rot(p[2], p[3]);
        if blur.at(ax, ay) < blur.at(bx, by) {
            words[i / 64] |= 1u64 << (i % 64);
        }
    }
    BinaryDescriptor(words)
}

/// FAST corners ranked by Harris response, with intensity-centroid
/// orientation and steered 256-bit binary descriptors. Images smaller than
/// the 31x31 descriptor patch yield an empty set.
pub fn detect_keypoints(
    img: &ImageRgb,
    max_kp: usize,
    params: &CriterionParams,
) -> (Vec<Keypoint>, Vec<BinaryDescriptor>) {
    let g = gray_of(img);
    if g.w < 32 || g.h < 32 || max_kp == 0 {
        return (Vec::new(), Vec::new());
    }
    let border = PATCH_RADIUS + 1;
    let mut raw: Vec<(i64, i64, f64)> = Vec::new();
    for y in border..g.h - border {
        for x in border..g.w - border {
            if fast_corner(&g, x, y, params.fast_threshold) {
                raw.push((x, y, harris_response(&g, x, y)));
            }
        }
    }
    // 3x3 non-max suppression on the response to avoid corner clusters.
    let mut raw_map = std::collections::HashMap::new();
    for &(x, y, r) in &raw {
        raw_map.insert((x, y), r);
    }
    let mut kept: Vec<(i64, i64, f64)> = raw
        .into_iter()
        .filter(|&(x, y, r)| {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if (dx, dy) == (0, 0) {
                        continue;
                    }
                    if let Some(&other) = raw_map.get(&(x + dx, y + dy)) {
                        if other > r || (other == r && (dy, dx) < (0, 0)) {
                            return false;
                        }
                    }
                }
            }
            true
        })
        .collect();
    kept.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| (a.1, a.0).cmp(&(b.1, b.0))));
    kept.truncate(max_kp);

    let blur = g.blurred();
    let pattern = brief_pattern();
    let mut kps = Vec::with_capacity(kept.len());
    let mut descs = Vec::with_capacity(kept.len());
    for (x, y, r) in kept {
        let kp = Keypoint {
            x: x as f64,
            y: y as f64,
            orientation: orientation(&g, x, y),
            response: r,
        };
        descs.push(describe(&blur, &kp, &pattern));
        kps.push(kp);
    }
    (kps, descs)
}

/// Nearest and second-nearest Hamming neighbor of `d` in `pool`.
fn two_nearest(d: &BinaryDescriptor, pool: &[BinaryDescriptor]) -> Option<(usize, u32, u32)> {
    let mut best = (usize::MAX, u32::MAX);
    let mut second = u32::MAX;
    for (j, p) in pool.iter().enumerate() {
        let h = d.hamming(p);
        if h < best.1 {
            second = best.1;
            best = (j, h);
        } else if h < second {
            second = h;
        }
    }
    (best.0 != usize::MAX).then_some((best.0, best.1, second))
}

/// Ratio-tested nearest-neighbor assignment from `a` into `b`;
/// `out[i] = Some(j)` means descriptor `a[i]` matched `b[j]`.
pub(crate) fn ratio_matches(
    a: &[BinaryDescriptor],
    b: &[BinaryDescriptor],
    ratio: f64,
) -> Vec<Option<(usize, u32)>> {
    a.iter()
        .map(|d| {
            let (j, d1, d2) = two_nearest(d, b)?;
            // a single candidate has no distractor to compare against
            if d2 == u32::MAX || (d1 as f64) < ratio * d2 as f64 {
                Some((j, d1))
            } else {
                None
            }
        })
        .collect()
}

/// Keypoint matching between a rendered view and its reference: KNN ratio
/// test in both directions, mutual-best check, then a coordinate constraint
/// dropping pairs further apart than `tau_frac` of the image diagonal.
pub fn match_views(
    rendered: &ImageRgb,
    reference: &ImageRgb,
    params: &CriterionParams,
) -> Result<Vec<MatchPair>> {
    if !rendered.same_dims(reference) {
        return Err(CbarfError::DimensionMismatch(
            rendered.width,
            rendered.height,
            reference.width,
            reference.height,
        ));
    }
    let (ref_kps, ref_descs) = detect_keypoints(reference, params.max_keypoints, params);
    let (ren_kps, ren_descs) = detect_keypoints(rendered, params.max_keypoints, params);
    Ok(match_descriptor_sets(
        &ref_kps, &ref_descs, &ren_kps, &ren_descs, rendered.width, rendered.height, params,
    ))
}

pub(crate) fn match_descriptor_sets(
    ref_kps: &[Keypoint],
    ref_descs: &[BinaryDescriptor],
    ren_kps: &[Keypoint],
    ren_descs: &[BinaryDescriptor],
    width: usize,
    height: usize,
    params: &CriterionParams,
) -> Vec<MatchPair> {
    if ref_descs.is_empty() || ren_descs.is_empty() {
        return Vec::new();
    }
    let fwd = ratio_matches(ref_descs, ren_descs, params.ratio);
    let bwd = ratio_matches(ren_descs, ref_descs, params.ratio);
    let diag = ((width * width + height * height) as f64).sqrt();
    let tau = params.tau_frac * diag;
    let mut out = Vec::new();
    for (i, m) in fwd.iter().enumerate() {
        let Some((j, h)) = m else { continue };
        let mutual = matches!(bwd[*j], Some((bi, _)) if bi == i);
        if !mutual {
            continue;
        }
        let dx = ref_kps[i].x - ren_kps[*j].x;
        let dy = ref_kps[i].y - ren_kps[*j].y;
        let offset = (dx * dx + dy * dy).sqrt();
        if offset <= tau {
            out.push(MatchPair {
                ref_idx: i,
                ren_idx: *j,
                hamming: *h,
                offset,
            });
        }
    }
    out
}

/// Foreground-compensated MSE: `sqrt(N / N_f) * plain_mse`, where `N` is the
/// pixel count and `N_f` the foreground count. An empty mask degrades to the
/// plain MSE; the returned flag reports that case.
pub fn compensated_mse(
    rendered: &ImageRgb,
    reference: &ImageRgb,
    fg_mask: &Mask,
) -> Result<(f64, bool)> {
    if fg_mask.width != rendered.width || fg_mask.height != rendered.height {
        return Err(CbarfError::DimensionMismatch(
            fg_mask.width,
            fg_mask.height,
            rendered.width,
            rendered.height,
        ));
    }
    let plain = crate::img::mse(rendered, reference)?;
    let n = (rendered.width * rendered.height) as f64;
    let n_f = fg_mask.count() as f64;
    if n_f == 0.0 {
        return Ok((plain, true));
    }
    Ok(((n / n_f).sqrt() * plain, false))
}

/// Everything [`combined_score`] needs about one view.
#[derive(Clone, Debug)]
pub struct ViewComparison {
    pub view_id: u32,
    pub matches: usize,
    pub ref_keypoints: usize,
    pub mse_c: f64,
    pub degenerate_mask: bool,
}

/// Detect, match and measure one rendered/reference pair.
pub fn compare_view(
    view_id: u32,
    rendered: &ImageRgb,
    reference: &ImageRgb,
    fg_mask: &Mask,
    params: &CriterionParams,
) -> Result<ViewComparison> {
    let (ref_kps, ref_descs) = detect_keypoints(reference, params.max_keypoints, params);
    let (ren_kps, ren_descs) = detect_keypoints(rendered, params.max_keypoints, params);
    let matches = match_descriptor_sets(
        &ref_kps,
        &ref_descs,
        &ren_kps,
        &ren_descs,
        rendered.width,
        rendered.height,
        params,
    );
    let (mse_c, degenerate_mask) = compensated_mse(rendered, reference, fg_mask)?;
    Ok(ViewComparison {
        view_id,
        matches: matches.len(),
        ref_keypoints: ref_kps.len(),
        mse_c,
        degenerate_mask,
    })
}

/// Parallel [`compare_view`] over a whole rendered/reference set.
pub fn compare_views(
    items: &[(u32, &ImageRgb, &ImageRgb, &Mask)],
    params: &CriterionParams,
) -> Result<Vec<ViewComparison>> {
    items
        .par_iter()
        .map(|(id, rendered, reference, mask)| compare_view(*id, rendered, reference, mask, params))
        .collect()
}

/// Average ranks in [0, 1] where 1 is best; `higher_better` flips the sort.
/// Ties share the mean of their rank positions.
fn rank_normalize(values: &[f64], higher_better: bool) -> Vec<f64> {
    let n = values.len();
    if n == 1 {
        return vec![1.0];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let c = values[a].total_cmp(&values[b]);
        if higher_better {
            c
        } else {
            c.reverse()
        }
    });
    // order is worst-first; rank r / (n-1) maps to [0, 1]
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0;
        for &idx in &order[i..=j] {
            out[idx] = mean_rank / (n - 1) as f64;
        }
        i = j + 1;
    }
    out
}

/// Combine the keypoint and MSE criteria into one score per view. The
/// keypoint sub-score is surviving matches over reference keypoints; both
/// sub-scores are rank-normalized across views and mixed with weight `w`.
/// Views whose reference has fewer than `k_min` keypoints fall back to the
/// MSE rank alone.
pub fn combined_score(comparisons: &[ViewComparison], params: &CriterionParams) -> Vec<ViewScore> {
    let kp_scores: Vec<f64> = comparisons
        .iter()
        .map(|c| c.matches as f64 / c.ref_keypoints.max(1) as f64)
        .collect();
    let mses: Vec<f64> = comparisons.iter().map(|c| c.mse_c).collect();
    let kp_rank = rank_normalize(&kp_scores, true);
    let mse_rank = rank_normalize(&mses, false);
    comparisons
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let combined = if c.ref_keypoints < params.k_min {
                mse_rank[i]
            } else {
                params.w * kp_rank[i] + (1.0 - params.w) * mse_rank[i]
            };
            ViewScore {
                view_id: c.view_id,
                kp_score: kp_scores[i],
                mse_c: c.mse_c,
                combined,
                label: Label::Superior,
                ref_keypoints: c.ref_keypoints,
                degenerate_mask: c.degenerate_mask,
            }
        })
        .collect()
}

/// Label views inferior when their combined score falls below
/// `mean - sigma_factor * std`, capped at `ceil(max_inferior_frac * n)`
/// lowest-scoring views.
pub fn classify(scores: &mut [ViewScore], params: &CriterionParams) -> Result<()> {
    let n = scores.len();
    if n < 2 {
        return Err(CbarfError::InvalidArgument(
            "classification needs at least 2 views".into(),
        ));
    }
    for s in scores.iter_mut() {
        s.label = Label::Superior;
    }
    let mean = scores.iter().map(|s| s.combined).sum::<f64>() / n as f64;
    let var = scores.iter().map(|s| (s.combined - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(());
    }
    let cut = mean - params.sigma_factor * std;
    let cap = (params.max_inferior_frac * n as f64).ceil() as usize;
    let mut below: Vec<usize> = (0..n).filter(|&i| scores[i].combined < cut).collect();
    below.sort_by(|&a, &b| {
        scores[a]
            .combined
            .total_cmp(&scores[b].combined)
            .then_with(|| scores[a].view_id.cmp(&scores[b].view_id))
    });
    for &i in below.iter().take(cap) {
        scores[i].label = Label::Inferior;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(width: usize, height: usize, cell: usize) -> ImageRgb {
        let mut img = ImageRgb::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let v = if ((x / cell) + (y / cell)) % 2 == 0 {
                    0.9
                } else {
                    0.1
                };
                img.set_pixel(x, y, [v, v, v]);
            }
        }
        img
    }

    /// Deterministic busy texture with corners at many scales.
    fn textured(width: usize, height: usize, seed: u64) -> ImageRgb {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut img = ImageRgb::filled(width, height, [0.5, 0.5, 0.5]);
        for _ in 0..60 {
            let w = rng.gen_range(3..12usize);
            let h = rng.gen_range(3..12usize);
            let x0 = rng.gen_range(0..width - w);
            let y0 = rng.gen_range(0..height - h);
            let col = [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ];
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    img.set_pixel(x, y, col);
                }
            }
        }
        img
    }

    #[test]
    fn uniform_image_has_no_keypoints() {
        let img = ImageRgb::filled(64, 64, [0.4, 0.4, 0.4]);
        let (kps, descs) = detect_keypoints(&img, 500, &CriterionParams::default());
        assert!(kps.is_empty());
        assert!(descs.is_empty());
    }

    #[test]
    fn tiny_image_yields_empty_set() {
        let img = checkerboard(24, 24, 6);
        let (kps, _) = detect_keypoints(&img, 500, &CriterionParams::default());
        assert!(kps.is_empty());
    }

    #[test]
    fn square_corners_found_at_known_locations() {
        // FAST-9 cannot fire on a perfect X-crossing (the circle splits into
        // four alternating 90 degree arcs, never 9 contiguous), so the
        // synthetic corner image uses isolated squares whose corners are
        // known exactly.
        let mut img = ImageRgb::filled(100, 100, [0.1, 0.1, 0.1]);
        let mut corners = Vec::new();
        for by in 0..3 {
            for bx in 0..3 {
                let x0 = 22 + bx * 20;
                let y0 = 22 + by * 20;
                for y in y0..y0 + 10 {
                    for x in x0..x0 + 10 {
                        img.set_pixel(x, y, [0.9, 0.9, 0.9]);
                    }
                }
                for (cx, cy) in [
                    (x0, y0),
                    (x0 + 9, y0),
                    (x0, y0 + 9),
                    (x0 + 9, y0 + 9),
                ] {
                    corners.push((cx as f64, cy as f64));
                }
            }
        }
        let (kps, _) = detect_keypoints(&img, 500, &CriterionParams::default());
        assert!(!kps.is_empty());
        for kp in &kps {
            let near = corners
                .iter()
                .any(|&(cx, cy)| (kp.x - cx).abs() <= 2.0 && (kp.y - cy).abs() <= 2.0);
            assert!(
                near,
                "keypoint ({}, {}) not at a square corner",
                kp.x,
                kp.y
            );
        }
        // and every corner is found
        for &(cx, cy) in &corners {
            assert!(
                kps.iter()
                    .any(|kp| (kp.x - cx).abs() <= 2.0 && (kp.y - cy).abs() <= 2.0),
                "corner ({cx}, {cy}) missed"
            );
        }
    }

    #[test]
    fn rotation_repeatability() {
        let img = textured(96, 96, 3);
        let rot = img.rot90(1);
        let params = CriterionParams::default();
        let (kps, _) = detect_keypoints(&img, 500, &params);
        let (kps_r, _) = detect_keypoints(&rot, 500, &params);
        assert!(kps.len() >= 30, "texture should yield keypoints");
        // rot90(1) maps (x, y) -> (y, w-1-x) per the img module contract
        let w = img.width as f64;
        let hits = kps
            .iter()
            .filter(|kp| {
                let (ex, ey) = (kp.y, w - 1.0 - kp.x);
                kps_r
                    .iter()
                    .any(|o| (o.x - ex).abs() <= 2.0 && (o.y - ey).abs() <= 2.0)
            })
            .count();
        let frac = hits as f64 / kps.len() as f64;
        assert!(frac >= 0.8, "repeatability {frac:.2} below 0.8");
    }

    #[test]
    fn identical_images_mutually_match() {
        let img = textured(96, 96, 9);
        let params = CriterionParams::default();
        let (kps, _) = detect_keypoints(&img, 500, &params);
        let matches = match_views(&img, &img, &params).unwrap();
        assert!(matches.len() as f64 >= 0.95 * kps.len() as f64);
        for m in &matches {
            assert!(m.offset < 1e-9);
            assert_eq!(m.hamming, 0);
        }
    }

    #[test]
    fn translated_copy_killed_by_coordinate_constraint() {
        let img = textured(100, 100, 4);
        // shift by 30% of the width with wrap-around so texture is preserved
        let mut shifted = ImageRgb::new(100, 100);
        for y in 0..100 {
            for x in 0..100 {
                shifted.set_pixel(x, y, img.pixel((x + 30) % 100, y));
            }
        }
        let params = CriterionParams::default();
        let with_constraint = match_views(&shifted, &img, &params).unwrap();
        let loose = CriterionParams {
            tau_frac: 10.0,
            ..params
        };
        let without_constraint = match_views(&shifted, &img, &loose).unwrap();
        assert!(
            without_constraint.len() >= 10,
            "mutual matches should survive up to the coordinate filter, got {}",
            without_constraint.len()
        );
        // every translated pair sits ~30 px from its partner, far past tau
        assert!(with_constraint.len() <= without_constraint.len() / 5);
    }

    #[test]
    fn ratio_test_rejects_ambiguous_match() {
        // hand-built: query at distance 9 and 10 from the two pool entries,
        // 9/10 = 0.9 > 0.75
        let query = BinaryDescriptor([0b1_1111_1111, 0, 0, 0]);
        let near = BinaryDescriptor([0, 0, 0, 0]); // distance 9
        let far = BinaryDescriptor([0b111_1111_1111_1111_1111, 0, 0, 0]); // distance 10
        assert_eq!(query.hamming(&near), 9);
        assert_eq!(query.hamming(&far), 10);
        let res = ratio_matches(&[query], &[near, far], 0.75);
        assert!(res[0].is_none());
        // an unambiguous one passes
        let res = ratio_matches(&[query], &[near, BinaryDescriptor([!0u64, !0, 0, 0])], 0.75);
        assert_eq!(res[0], Some((0, 9)));
    }

    #[test]
    fn filter_monotonicity() {
        let a = textured(96, 96, 5);
        let b = textured(96, 96, 6);
        let params = CriterionParams::default();
        let (ka, da) = detect_keypoints(&a, 500, &params);
        let (kb, db) = detect_keypoints(&b, 500, &params);
        let stage1: usize = ratio_matches(&da, &db, params.ratio)
            .iter()
            .flatten()
            .count();
        let loose = CriterionParams {
            tau_frac: 10.0,
            ..params
        };
        let stage2 = match_descriptor_sets(&ka, &da, &kb, &db, 96, 96, &loose).len();
        let stage3 = match_descriptor_sets(&ka, &da, &kb, &db, 96, 96, &params).len();
        assert!(stage2 <= stage1);
        assert!(stage3 <= stage2);
    }

    #[test]
    fn matching_is_symmetric() {
        let a = textured(96, 96, 7);
        let b = {
            // a slightly noised copy so matches are nontrivial
            let mut img = a.clone();
            let mut rng = ChaCha12Rng::seed_from_u64(1);
            for v in img.data.iter_mut() {
                *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
            }
            img
        };
        let params = CriterionParams::default();
        let ab = match_views(&a, &b, &params).unwrap();
        let ba = match_views(&b, &a, &params).unwrap();
        let mut set_ab: Vec<(usize, usize)> = ab.iter().map(|m| (m.ref_idx, m.ren_idx)).collect();
        let mut set_ba: Vec<(usize, usize)> = ba.iter().map(|m| (m.ren_idx, m.ref_idx)).collect();
        set_ab.sort_unstable();
        set_ba.sort_unstable();
        assert_eq!(set_ab, set_ba);
    }

    #[test]
    fn compensated_mse_examples() {
        // 2x2, all channels carry diff^2 summing to 1 per Eq. 1 arithmetic
        let a = ImageRgb::filled(2, 2, [0.0, 0.0, 0.0]);
        let mut b = a.clone();
        // one pixel differs by 1 in one channel: sum of squared diffs = 1,
        // averaged over N * C = 12 entries -> plain mse = 1/12
        b.set_pixel(0, 0, [1.0, 0.0, 0.0]);
        let full = Mask {
            width: 2,
            height: 2,
            data: vec![true; 4],
        };
        let (m, flag) = compensated_mse(&b, &a, &full).unwrap();
        assert!(!flag);
        assert!((m - 1.0 / 12.0).abs() < 1e-12, "full foreground is plain mse");

        let quarter = Mask {
            width: 2,
            height: 2,
            data: vec![true, false, false, false],
        };
        let (m_q, _) = compensated_mse(&b, &a, &quarter).unwrap();
        assert!((m_q - 2.0 / 12.0).abs() < 1e-12, "N/N_f = 4 doubles the score");

        let empty = Mask {
            width: 2,
            height: 2,
            data: vec![false; 4],
        };
        let (m_e, flag_e) = compensated_mse(&b, &a, &empty).unwrap();
        assert!(flag_e);
        assert!((m_e - 1.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn compensated_never_below_plain() {
        let a = textured(64, 64, 11);
        let b = textured(64, 64, 12);
        let plain = crate::img::mse(&a, &b).unwrap();
        for count in [1usize, 100, 2048, 4096] {
            let mut data = vec![false; 4096];
            for d in data.iter_mut().take(count) {
                *d = true;
            }
            let mask = Mask {
                width: 64,
                height: 64,
                data,
            };
            let (m, _) = compensated_mse(&a, &b, &mask).unwrap();
            assert!(m >= plain - 1e-15);
        }
        assert!((compensated_mse(&a, &b, &Mask {
            width: 64,
            height: 64,
            data: vec![true; 4096],
        })
        .unwrap()
        .0 - plain)
            .abs()
            < 1e-15);
    }

    fn cmp(view_id: u32, matches: usize, ref_kp: usize, mse: f64) -> ViewComparison {
        ViewComparison {
            view_id,
            matches,
            ref_keypoints: ref_kp,
            mse_c: mse,
            degenerate_mask: false,
        }
    }

    #[test]
    fn equal_views_get_equal_scores() {
        let comparisons: Vec<ViewComparison> = (0..5).map(|i| cmp(i, 80, 100, 0.01)).collect();
        let scores = combined_score(&comparisons, &CriterionParams::default());
        for s in &scores {
            assert_eq!(s.combined, scores[0].combined);
        }
    }

    #[test]
    fn few_reference_keypoints_fall_back_to_mse_rank() {
        // view 2 has only 10 reference keypoints: its combined score must be
        // its mse rank exactly, despite a terrible kp score
        let comparisons = vec![
            cmp(0, 90, 100, 0.03),
            cmp(1, 70, 100, 0.01),
            cmp(2, 0, 10, 0.02),
        ];
        let scores = combined_score(&comparisons, &CriterionParams::default());
        // mse ascending: view 1 (best, rank 1), view 2 (rank 0.5), view 0 (rank 0)
        assert_eq!(scores[2].combined, 0.5);
    }

    #[test]
    fn corrupted_view_scores_lowest() {
        let mut comparisons: Vec<ViewComparison> =
            (0..19).map(|i| cmp(i, 85 + (i as usize % 5), 100, 0.01)).collect();
        comparisons.push(cmp(19, 5, 100, 0.3));
        let scores = combined_score(&comparisons, &CriterionParams::default());
        let min = scores
            .iter()
            .min_by(|a, b| a.combined.total_cmp(&b.combined))
            .unwrap();
        assert_eq!(min.view_id, 19);
    }

    #[test]
    fn classify_all_equal_yields_no_inferior() {
        let comparisons: Vec<ViewComparison> = (0..6).map(|i| cmp(i, 50, 100, 0.01)).collect();
        let mut scores = combined_score(&comparisons, &CriterionParams::default());
        classify(&mut scores, &CriterionParams::default()).unwrap();
        assert!(scores.iter().all(|s| s.label == Label::Superior));
    }

    #[test]
    fn classify_isolates_single_outlier() {
        // scores {0.9 x 19, 0.1 x 1}: only the 0.1 view is inferior
        let mut scores: Vec<ViewScore> = (0..20)
            .map(|i| ViewScore {
                view_id: i,
                kp_score: 0.0,
                mse_c: 0.0,
                combined: if i == 7 { 0.1 } else { 0.9 },
                label: Label::Superior,
                ref_keypoints: 100,
                degenerate_mask: false,
            })
            .collect();
        classify(&mut scores, &CriterionParams::default()).unwrap();
        for s in &scores {
            if s.view_id == 7 {
                assert_eq!(s.label, Label::Inferior);
            } else {
                assert_eq!(s.label, Label::Superior);
            }
        }
    }

    #[test]
    fn classify_caps_at_quarter() {
        // 10 of 20 views extremely low: only ceil(0.25 * 20) = 5 labeled
        let mut scores: Vec<ViewScore> = (0..20)
            .map(|i| ViewScore {
                view_id: i,
                kp_score: 0.0,
                mse_c: 0.0,
                combined: if i < 10 { 0.01 * i as f64 } else { 0.9 },
                label: Label::Superior,
                ref_keypoints: 100,
                degenerate_mask: false,
            })
            .collect();
        classify(&mut scores, &CriterionParams::default()).unwrap();
        let inf: Vec<u32> = scores
            .iter()
            .filter(|s| s.label == Label::Inferior)
            .map(|s| s.view_id)
            .collect();
        assert_eq!(inf, vec![0, 1, 2, 3, 4], "five lowest views capped");
    }

    #[test]
    fn classify_rejects_single_view() {
        let mut scores = vec![ViewScore {
            view_id: 0,
            kp_score: 0.0,
            mse_c: 0.0,
            combined: 0.5,
            label: Label::Superior,
            ref_keypoints: 100,
            degenerate_mask: false,
        }];
        assert!(classify(&mut scores, &CriterionParams::default()).is_err());
    }

    #[test]
    fn rank_normalize_handles_ties() {
        let r = rank_normalize(&[1.0, 3.0, 3.0, 2.0], true);
        assert_eq!(r[0], 0.0);
        assert!((r[1] - r[2]).abs() < 1e-15);
        assert!((r[1] - 2.5 / 3.0).abs() < 1e-12);
        assert!((r[3] - 1.0 / 3.0).abs() < 1e-12);
    }
}
