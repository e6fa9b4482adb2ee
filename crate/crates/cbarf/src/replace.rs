//! Neighbor-replacement for erroneous poses: non-maxima suppression over the
//! inferior set, nearest-superior-neighbor search by image similarity with
//! right-angle rotation augmentation, and pose overwrite with a memory that
//! blocks repeated identical replacements.

use crate::criterion::{detect_keypoints, match_descriptor_sets, CriterionParams, Label, ViewScore};
use crate::error::{CbarfError, Result};
use crate::img::ImageRgb;
use crate::se3::PoseSE3;
use nalgebra::Matrix3;
use rayon::prelude::*;
use std::collections::{HashMap, HashSet};

/// Coordinate constraint used for cross-view similarity. Neighboring
/// viewpoints displace matched keypoints substantially, so this is much
/// looser than the same-view matching bound.
const PAIR_TAU_FRAC: f64 = 0.35;

/// (source, quarter turns) pairs already tried per target view.
#[derive(Clone, Debug, Default)]
pub struct ReplacementMemory {
    used: HashMap<u32, HashSet<(u32, u8)>>,
}

impl ReplacementMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, target: u32, source: u32, quarter_turns: u8) -> bool {
        self.used
            .get(&target)
            .is_some_and(|s| s.contains(&(source, quarter_turns)))
    }

    pub fn record(&mut self, target: u32, source: u32, quarter_turns: u8) {
        self.used
            .entry(target)
            .or_default()
            .insert((source, quarter_turns));
    }

    pub fn len(&self) -> usize {
        self.used.values().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct ReplacementAssignment {
    pub target: u32,
    pub source: u32,
    /// In-plane rotation in counterclockwise quarter turns (0..=3).
    pub quarter_turns: u8,
    pub similarity: f64,
}

/// Exact in-plane (camera roll) rotation about the optical axis by
/// `quarter_turns` 90 degree steps. Entries are exact integers so zero turns
/// composes bit-identically.
pub fn roll_z(quarter_turns: u8) -> Matrix3<f64> {
    match quarter_turns % 4 {
        0 => Matrix3::identity(),
        1 => Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
        2 => Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0),
        _ => Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
    }
}

/// Angle subtended at the scene origin between two camera centers, degrees.
pub fn center_angle_deg(a: &PoseSE3, b: &PoseSE3) -> f64 {
    let ca = a.center();
    let cb = b.center();
    let na = ca.norm();
    let nb = cb.norm();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (ca.dot(&cb) / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Non-maxima suppression over the inferior set: an inferior view keeps its
/// label only if its combined score is the strict minimum among inferior
/// views whose current camera centers lie within `radius_deg` of it (ties
/// broken by lower view id). Everything else is relabeled superior.
///
/// `poses[i]` is the current estimate for `scores[i]`.
pub fn nms_filter(scores: &mut [ViewScore], poses: &[PoseSE3], radius_deg: f64) {
    assert_eq!(scores.len(), poses.len());
    let inferior: Vec<usize> = (0..scores.len())
        .filter(|&i| scores[i].label == Label::Inferior)
        .collect();
    let mut demoted = Vec::new();
    for &i in &inferior {
        let beaten = inferior.iter().any(|&j| {
            j != i
                && center_angle_deg(&poses[i], &poses[j]) <= radius_deg
                && (scores[j].combined < scores[i].combined
                    || (scores[j].combined == scores[i].combined
                        && scores[j].view_id < scores[i].view_id))
        });
        if beaten {
            demoted.push(i);
        }
    }
    for i in demoted {
        scores[i].label = Label::Superior;
    }
}

/// Pairwise image similarity in [0, 1]: keypoint match fraction blended with
/// an MSE term when both images have enough keypoints, MSE alone otherwise.
pub fn pair_similarity(a: &ImageRgb, b: &ImageRgb, params: &CriterionParams) -> f64 {
    let mse_term = match crate::img::mse(a, b) {
        Ok(m) => 1.0 / (1.0 + m),
        Err(_) => return 0.0,
    };
    let (kp_a, d_a) = detect_keypoints(a, params.max_keypoints, params);
    let (kp_b, d_b) = detect_keypoints(b, params.max_keypoints, params);
    let floor = kp_a.len().min(kp_b.len());
    if floor < params.k_min {
        return mse_term;
    }
    let loose = CriterionParams {
        tau_frac: PAIR_TAU_FRAC,
        ..*params
    };
    let matches = match_descriptor_sets(&kp_a, &d_a, &kp_b, &d_b, a.width, a.height, &loose);
    let frac = matches.len() as f64 / floor as f64;
    params.w * frac + (1.0 - params.w) * mse_term
}

/// Best (candidate, rotation) for `target` by image similarity over the four
/// right-angle rotations of each candidate image, skipping pairs already in
/// `memory`. Candidates must be superior views; the target itself is
/// ignored if present.
pub fn find_neighbor(
    target: u32,
    target_image: &ImageRgb,
    candidates: &[(u32, &ImageRgb)],
    memory: &ReplacementMemory,
    params: &CriterionParams,
) -> Result<ReplacementAssignment> {
    let square = target_image.width == target_image.height;
    let mut best: Option<ReplacementAssignment> = None;
    let scored: Vec<Vec<(u8, f64)>> = candidates
        .par_iter()
        .map(|(src, img)| {
            if *src == target {
                return Vec::new();
            }
            let turns: &[u8] = if square { &[0, 1, 2, 3] } else { &[0, 2] };
            turns
                .iter()
                .filter(|&&q| !memory.contains(target, *src, q))
                .map(|&q| (q, pair_similarity(target_image, &img.rot90(q), params)))
                .collect()
        })
        .collect();
    for ((src, _), rots) in candidates.iter().zip(scored) {
        for (q, sim) in rots {
            let better = match &best {
                None => true,
                Some(b) => {
                    sim > b.similarity
                        || (sim == b.similarity && (*src, q) < (b.source, b.quarter_turns))
                }
            };
            if better {
                best = Some(ReplacementAssignment {
                    target,
                    source: *src,
                    quarter_turns: q,
                    similarity: sim,
                });
            }
        }
    }
    best.ok_or(CbarfError::CandidatesExhausted(target))
}

/// Overwrite the target's pose with the source's, rolled about the optical
/// axis by the assignment's rotation, and record the assignment in memory.
/// `view_ids[i]` labels `poses[i]`.
pub fn apply_replacement(
    poses: &mut [PoseSE3],
    view_ids: &[u32],
    assignment: &ReplacementAssignment,
    memory: &mut ReplacementMemory,
) -> Result<()> {
    assert_eq!(poses.len(), view_ids.len());
    let pos_of = |id: u32| view_ids.iter().position(|&v| v == id);
    let src_idx = pos_of(assignment.source).ok_or_else(|| {
        CbarfError::InvalidArgument(format!("unknown source view {}", assignment.source))
    })?;
    let tgt_idx = pos_of(assignment.target).ok_or_else(|| {
        CbarfError::InvalidArgument(format!("unknown target view {}", assignment.target))
    })?;
    let src = poses[src_idx];
    poses[tgt_idx] = if assignment.quarter_turns % 4 == 0 {
        src
    } else {
        PoseSE3::new(src.rotation * roll_z(assignment.quarter_turns), src.translation)
    };
    memory.record(assignment.target, assignment.source, assignment.quarter_turns);
    Ok(())
}
