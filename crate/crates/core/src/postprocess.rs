//! Mask binarization, density clustering and box extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::dist2;

pub const DEFAULT_EPS: f64 = 0.1;
pub const DEFAULT_MIN_PTS: usize = 5;
pub const NOISE: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    /// Tightest box around `points`; `None` for an empty set.
    pub fn around<'a>(points: impl IntoIterator<Item = &'a [f64; 3]>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut b = Box3 { min: first, max: first };
        for p in it {
            for k in 0..3 {
                b.min[k] = b.min[k].min(p[k]);
                b.max[k] = b.max[k].max(p[k]);
            }
        }
        Some(b)
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|k| self.min[k] <= p[k] && p[k] <= self.max[k])
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|k| (self.max[k] - self.min[k]).max(0.0)).product()
    }
}

/// `value >= threshold` per entry.
pub fn binarize(mask: &[f64], threshold: f64) -> Vec<bool> {
    mask.iter().map(|&v| v >= threshold).collect()
}

/// Density clustering of `points`.
///
/// A point is core when at least `min_pts` points (itself included) lie within
/// `eps`. Clusters are the connected components of core points under the
/// `eps` relation, numbered by their lowest-index core point. A non-core point
/// within `eps` of some core point joins the cluster of its nearest such core
/// point (ties to the lower index); all others are [`NOISE`].
pub fn dbscan(points: &[[f64; 3]], eps: f64, min_pts: usize) -> Result<Vec<i64>> {
    if points.is_empty() {
        return Err(Error::Invalid("dbscan of an empty point set".into()));
    }
    if !(eps > 0.0) || min_pts == 0 {
        return Err(Error::Invalid(format!("dbscan needs eps > 0 and min_pts >= 1, got {eps}, {min_pts}")));
    }
    let n = points.len();
    let eps2 = eps * eps;
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist2(&points[i], &points[j]) <= eps2).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![NOISE; n];
    let mut next = 0;
    for seed in 0..n {
        if !core[seed] || labels[seed] != NOISE {
            continue;
        }
        labels[seed] = next;
        let mut stack = vec![seed];
        while let Some(p) = stack.pop() {
            for &q in &neighbours[p] {
                if core[q] && labels[q] == NOISE {
                    labels[q] = next;
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let nearest = neighbours[i]
            .iter()
            .filter(|&&j| core[j])
            .min_by(|&&a, &&b| dist2(&points[i], &points[a]).total_cmp(&dist2(&points[i], &points[b])).then(a.cmp(&b)));
        if let Some(&c) = nearest {
            labels[i] = labels[c];
        }
    }
    Ok(labels)
}

/// Why a box came from the fallback path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    LargestCluster,
    /// Every foreground point was noise; the box covers all of them.
    AllNoise,
}

/// Box around the largest density cluster of the masked points.
pub fn extract_box(positions: &[[f64; 3]], mask: &[bool], eps: f64, min_pts: usize) -> Result<(Box3, BoxSource)> {
    if positions.len() != mask.len() {
        return Err(Error::Invalid(format!(
            "mask of length {} for {} points",
            mask.len(),
            positions.len()
        )));
    }
    let fg: Vec<[f64; 3]> = positions.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    if fg.is_empty() {
        return Err(Error::EmptyMask);
    }
    let labels = dbscan(&fg, eps, min_pts)?;
    let clusters = labels.iter().copied().max().unwrap_or(NOISE) + 1;
    if clusters == 0 {
        let b = Box3::around(&fg).expect("foreground is non-empty");
        return Ok((b, BoxSource::AllNoise));
    }
    let mut sizes = vec![0usize; clusters as usize];
    for &l in labels.iter().filter(|&&l| l != NOISE) {
        sizes[l as usize] += 1;
    }
    let best = (0..sizes.len()).fold(0, |b, c| if sizes[c] > sizes[b] { c } else { b }) as i64;
    let kept = fg.iter().zip(&labels).filter(|(_, &l)| l == best).map(|(p, _)| p);
    Ok((Box3::around(kept).expect("a cluster has members"), BoxSource::LargestCluster))
}
