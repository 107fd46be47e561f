//! Text and mask objectives, and region ground truth for the location mask.

use r3d_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::config::{ObjectCenter, RunConfig, TauMode};
use crate::error::{Error, Result};
use crate::langmodel::Task;
use crate::pointcloud::dist2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub tau_mode: TauMode,
    pub object_center: ObjectCenter,
    pub dice_smooth: f64,
    pub include_loc: bool,
}

impl LossConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            tau: cfg.tau,
            tau_mode: cfg.tau_mode,
            object_center: cfg.object_center,
            dice_smooth: cfg.dice_smooth,
            include_loc: cfg.include_loc,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::from_run(&RunConfig::default())
    }
}

/// Per-component values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub llm: f64,
    pub mask_loc: f64,
    pub mask_seg: f64,
    pub total: f64,
}

impl LossReport {
    /// Unweighted sum; an absent location term counts as zero.
    pub fn from_parts(llm: f64, mask_loc: Option<f64>, mask_seg: f64) -> Self {
        let mask_loc = mask_loc.unwrap_or(0.0);
        Self {
            llm,
            mask_loc,
            mask_seg,
            total: llm + mask_loc + mask_seg,
        }
    }

    pub fn add(&mut self, other: &LossReport) {
        self.llm += other.llm;
        self.mask_loc += other.mask_loc;
        self.mask_seg += other.mask_seg;
        self.total += other.total;
    }

    pub fn scale(&mut self, f: f64) {
        self.llm *= f;
        self.mask_loc *= f;
        self.mask_seg *= f;
        self.total *= f;
    }
}

/// Mean token cross-entropy over answer positions.
pub fn ce_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    Ok(tape.cross_entropy(logits, targets)?)
}

fn as_targets(gt: &[bool]) -> Vec<f64> {
    gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect()
}

pub fn bce_mask_loss(tape: &mut Tape, logits: Var, gt: &[bool]) -> Result<Var> {
    Ok(tape.bce_with_logits(logits, &as_targets(gt))?)
}

pub fn dice_loss(tape: &mut Tape, logits: Var, gt: &[bool], smooth: f64) -> Result<Var> {
    if !(smooth > 0.0) {
        return Err(Error::Invalid(format!("dice smoothing must be positive, got {smooth}")));
    }
    Ok(tape.dice(logits, &as_targets(gt), smooth)?)
}

/// BCE + DICE for one mask level.
pub fn mask_loss(tape: &mut Tape, logits: Var, gt: &[bool], smooth: f64) -> Result<Var> {
    let bce = bce_mask_loss(tape, logits, gt)?;
    let dice = dice_loss(tape, logits, gt, smooth)?;
    Ok(tape.add(bce, dice)?)
}

/// Pure reference values used by tests and reports.
pub mod reference {
    pub fn sigmoid(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    pub fn bce(logits: &[f64], gt: &[bool]) -> f64 {
        let n = logits.len() as f64;
        logits
            .iter()
            .zip(gt)
            .map(|(&z, &g)| {
                let y = if g { 1.0 } else { 0.0 };
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum::<f64>()
            / n
    }

    pub fn dice(logits: &[f64], gt: &[bool], smooth: f64) -> f64 {
        let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let inter: f64 = p.iter().zip(gt).filter(|(_, &g)| g).map(|(p, _)| p).sum();
        let psum: f64 = p.iter().sum();
        let gsum = gt.iter().filter(|&&g| g).count() as f64;
        1.0 - (2.0 * inter + smooth) / (psum + gsum + smooth)
    }
}

/// Center of a set of object points.
pub fn object_center(positions: &[[f64; 3]], object: &[usize], mode: ObjectCenter) -> Result<[f64; 3]> {
    if object.is_empty() {
        return Err(Error::Invalid("object has no points".into()));
    }
    let pts = object.iter().map(|&i| {
        positions
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("object point {i} outside 0..{}", positions.len())))
    });
    match mode {
        ObjectCenter::Centroid => {
            let mut c = [0.0; 3];
            for p in pts {
                let p = p?;
                for k in 0..3 {
                    c[k] += p[k];
                }
            }
            Ok(c.map(|v| v / object.len() as f64))
        }
        ObjectCenter::Box => {
            let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
            for p in pts {
                let p = p?;
                for k in 0..3 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
            Ok([0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k])))
        }
    }
}

/// Ground truth for the location mask.
///
/// Search tasks use the target room's points. Every other task uses the
/// points strictly closer than the radius to the object center; in relative
/// mode the radius is `tau` times the object's circumradius about that center.
pub fn make_region_gt(
    positions: &[[f64; 3]],
    object: &[usize],
    room: Option<&[usize]>,
    task: Task,
    cfg: &LossConfig,
) -> Result<Vec<bool>> {
    if task == Task::Search {
        let room = room.ok_or_else(|| Error::Invalid("search sample lacks room ground truth".into()))?;
        return crate::pointcloud::mask_from_indices(positions.len(), room);
    }
    let center = object_center(positions, object, cfg.object_center)?;
    let radius = match cfg.tau_mode {
        TauMode::Absolute => cfg.tau,
        TauMode::Relative => {
            let r2 = object
                .iter()
                .map(|&i| dist2(&positions[i], &center))
                .fold(0.0, f64::max);
            cfg.tau * r2.sqrt()
        }
    };
    let r2 = radius * radius;
    Ok(positions.iter().map(|p| dist2(p, &center) < r2).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_sums_parts() {
        let r = LossReport::from_parts(0.5, None, 0.25);
        assert_eq!((r.mask_loc, r.total), (0.0, 0.75));
        assert_eq!(LossReport::from_parts(0.0, Some(0.0), 0.0).total, 0.0);
    }

    #[test]
    fn region_boundary_is_exclusive() {
        let positions = vec![[0.0, 0.0, 0.0], [1.5, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let cfg = LossConfig::default();
        let gt = make_region_gt(&positions, &[0], None, Task::Reasoning, &cfg).unwrap();
        assert_eq!(gt, vec![true, false, true]);
        assert!(make_region_gt(&positions, &[0], None, Task::Search, &cfg).is_err());
    }
}
