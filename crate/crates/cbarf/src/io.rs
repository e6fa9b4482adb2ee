//! On-disk artifact formats: JSON pose files, view-set directories
//! (PNG + manifest), a binary voxel-grid blob and the CSV reports the CLI
//! emits. Floating-point values round-trip exactly through JSON; images are
//! 8-bit PNGs.

use crate::cascade::{StageKind, StageReport};
use crate::criterion::{Label, ViewScore};
use crate::img::{ImageRgb, Mask};
use crate::replace::ReplacementAssignment;
use crate::scene::{CameraIntrinsics, View, ViewSet, VoxelGrid};
use crate::se3::PoseSE3;
use crate::error::{CbarfError, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

fn malformed(path: &Path, reason: impl Into<String>) -> CbarfError {
    CbarfError::Malformed {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

// ---------------------------------------------------------------- pose files

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    view_id: u32,
    /// Row-major [R | t], 12 values.
    pose: Vec<f64>,
}

/// Write a JSON pose file; entries keep the given order.
pub fn save_poses(path: &Path, poses: &[(u32, PoseSE3)]) -> Result<()> {
    let records: Vec<PoseRecord> = poses
        .iter()
        .map(|(id, p)| PoseRecord {
            view_id: *id,
            pose: p.to_row_major().to_vec(),
        })
        .collect();
    let file = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(file, &records)?;
    Ok(())
}

pub fn load_poses(path: &Path) -> Result<Vec<(u32, PoseSE3)>> {
    let file = BufReader::new(fs::File::open(path)?);
    let records: Vec<PoseRecord> = serde_json::from_reader(file)?;
    records
        .into_iter()
        .map(|r| {
            let arr: [f64; 12] = r
                .pose
                .try_into()
                .map_err(|_| malformed(path, format!("view {} pose is not 12 values", r.view_id)))?;
            Ok((r.view_id, PoseSE3::from_row_major(&arr)))
        })
        .collect()
}

// ----------------------------------------------------------- view-set dirs

#[derive(Serialize, Deserialize)]
struct ViewEntry {
    id: u32,
    image: String,
    mask: Option<String>,
    /// Row-major [R | t]; None for views awaiting initialization.
    pose: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ViewSetManifest {
    intrinsics: CameraIntrinsics,
    views: Vec<ViewEntry>,
}

/// Write a view set as a directory: `views.json` plus one PNG per image and
/// per optional mask.
pub fn save_view_set(dir: &Path, vs: &ViewSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(vs.views.len());
    for v in &vs.views {
        let image = format!("view_{:03}.png", v.id);
        v.image.save_png(&dir.join(&image))?;
        let mask = match &v.mask {
            Some(m) => {
                let name = format!("mask_{:03}.png", v.id);
                m.save_png(&dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        entries.push(ViewEntry {
            id: v.id,
            image,
            mask,
            pose: v.pose.map(|p| p.to_row_major().to_vec()),
        });
    }
    let manifest = ViewSetManifest {
        intrinsics: vs.intrinsics,
        views: entries,
    };
    let file = BufWriter::new(fs::File::create(dir.join("views.json"))?);
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(())
}

pub fn load_view_set(dir: &Path) -> Result<ViewSet> {
    let manifest_path = dir.join("views.json");
    let file = BufReader::new(fs::File::open(&manifest_path)?);
    let manifest: ViewSetManifest = serde_json::from_reader(file)?;
    let mut views = Vec::with_capacity(manifest.views.len());
    for e in manifest.views {
        let image = ImageRgb::load_png(&dir.join(&e.image))?;
        let mask = match e.mask {
            Some(name) => Some(Mask::load_png(&dir.join(name))?),
            None => None,
        };
        let pose = match e.pose {
            Some(v) => {
                let arr: [f64; 12] = v.try_into().map_err(|_| {
                    malformed(&manifest_path, format!("view {} pose is not 12 values", e.id))
                })?;
                Some(PoseSE3::from_row_major(&arr))
            }
            None => None,
        };
        views.push(View {
            id: e.id,
            image,
            mask,
            pose,
        });
    }
    let vs = ViewSet {
        intrinsics: manifest.intrinsics,
        views,
    };
    vs.validate()?;
    Ok(vs)
}

// -------------------------------------------------------------- grid blobs

const GRID_MAGIC: &[u8; 8] = b"CBGRID01";

/// Binary voxel-grid blob: 8-byte magic, three u64 dimensions, six f64 bbox
/// bounds, then raw densities (n nodes) and raw colors (3n), all
/// little-endian f64.
pub fn save_grid(path: &Path, grid: &VoxelGrid) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(GRID_MAGIC)?;
    for d in grid.resolution {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in [
        grid.bbox_min.x,
        grid.bbox_min.y,
        grid.bbox_min.z,
        grid.bbox_max.x,
        grid.bbox_max.y,
        grid.bbox_max.z,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in grid.density.iter().chain(grid.color.iter()) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<VoxelGrid> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != GRID_MAGIC {
        return Err(malformed(path, "bad magic, not a grid blob"));
    }
    let mut u = [0u8; 8];
    let mut read_u64 = |r: &mut BufReader<fs::File>| -> Result<u64> {
        r.read_exact(&mut u)?;
        Ok(u64::from_le_bytes(u))
    };
    let resolution = [
        read_u64(&mut r)? as usize,
        read_u64(&mut r)? as usize,
        read_u64(&mut r)? as usize,
    ];
    let mut f = [0u8; 8];
    let mut read_f64 = |r: &mut BufReader<fs::File>| -> Result<f64> {
        r.read_exact(&mut f)?;
        Ok(f64::from_le_bytes(f))
    };
    let mut b = [0.0; 6];
    for v in &mut b {
        *v = read_f64(&mut r)?;
    }
    let n: usize = resolution.iter().product();
    if n == 0 || n > 1 << 30 {
        return Err(malformed(path, format!("implausible grid size {resolution:?}")));
    }
    let mut grid = VoxelGrid::uniform(
        resolution,
        nalgebra::Vector3::new(b[0], b[1], b[2]),
        nalgebra::Vector3::new(b[3], b[4], b[5]),
        0.0,
        0.0,
    );
    for v in grid.density.iter_mut().chain(grid.color.iter_mut()) {
        *v = read_f64(&mut r)?;
    }
    Ok(grid)
}

// -------------------------------------------------------------------- CSVs

/// `iteration,loss,lr_pose,lr_grid` per line.
pub fn save_loss_csv(path: &Path, loss: &[f64], lrs: &[(f64, f64)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "iteration,loss,lr_pose,lr_grid")?;
    for (i, (l, (lp, lg))) in loss.iter().zip(lrs).enumerate() {
        writeln!(w, "{i},{l},{lp},{lg}")?;
    }
    Ok(())
}

/// `view_id,kp_score,mse_c,combined,label` per line.
pub fn save_scores_csv(path: &Path, scores: &[ViewScore]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "view_id,kp_score,mse_c,combined,label")?;
    for s in scores {
        let label = match s.label {
            Label::Superior => "superior",
            Label::Inferior => "inferior",
        };
        writeln!(
            w,
            "{},{},{},{},{label}",
            s.view_id, s.kp_score, s.mse_c, s.combined
        )?;
    }
    Ok(())
}

/// `stage,target,source,rotation,similarity` per line, over all stages.
pub fn save_replacements_csv(path: &Path, per_stage: &[(usize, &[ReplacementAssignment])]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "stage,target,source,rotation,similarity")?;
    for (stage, assignments) in per_stage {
        for a in *assignments {
            writeln!(
                w,
                "{stage},{},{},{},{}",
                a.target,
                a.source,
                a.quarter_turns as u32 * 90,
                a.similarity
            )?;
        }
    }
    Ok(())
}

pub fn stage_kind_name(kind: StageKind) -> &'static str {
    match kind {
        StageKind::Coarse => "coarse",
        StageKind::Recursive => "recursive",
        StageKind::Fine => "fine",
        StageKind::Reconstruction => "reconstruction",
    }
}

/// One summary line per executed stage.
pub fn save_stage_reports_csv(path: &Path, reports: &[StageReport]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(
        w,
        "stage,kind,mean_combined,min_combined,mean_quality,inferior_before_nms,inferior_after_nms,replace_eligible,replacements,skipped,final_loss"
    )?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.index,
            stage_kind_name(r.kind),
            r.mean_combined,
            r.min_combined,
            r.mean_quality,
            r.inferior_before_nms,
            r.inferior_after_nms,
            r.replace_eligible,
            r.replacements.len(),
            r.skipped.len(),
            r.final_loss
        )?;
    }
    Ok(())
}

/// `view_id,rotation_deg,translation_x100,psnr,ssim` per line; NaN for
/// metrics that were not computed.
pub struct MetricsRow {
    pub view_id: u32,
    pub rotation_deg: f64,
    pub translation_x100: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn save_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "view_id,rotation_deg,translation_x100,psnr,ssim")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.view_id, r.rotation_deg, r.translation_x100, r.psnr, r.ssim
        )?;
    }
    Ok(())
}
