//! Brute-force reference implementations and randomized comparison suites.
//! Each suite returns the number of instances checked, or the first mismatch.

use std::collections::{BTreeMap, BTreeSet};

use r3d_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reason3d::config::{ObjectCenter, TauMode};
use reason3d::langmodel::Task;
use reason3d::losses::{make_region_gt, LossConfig};
use reason3d::metrics::iou;
use reason3d::pointcloud::{
    compute_superpoints, pool_superpoints, voxelize, PointCloud, Pooling, SuperpointMethod, SuperpointPartition,
};
use reason3d::postprocess::dbscan;

pub type SuiteResult = Result<usize, String>;

const REAL_TOL: f64 = 1e-9;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_cloud(rng: &mut impl Rng, n: usize, extent: f64) -> PointCloud {
    let positions = (0..n).map(|_| [(); 3].map(|_| rng.random_range(-extent..extent))).collect();
    let colors = (0..n).map(|_| [(); 3].map(|_| rng.random_range(0.0..1.0))).collect();
    PointCloud::new(positions, colors).expect("valid cloud")
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REAL_TOL
}

/// Average and max pooling against a group-by over superpoint ids, for both
/// the pure function and the recorded tape ops.
pub fn pooling(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = rng(seed);
    for case in 0..instances {
        let m = rng.random_range(1..8);
        let n = rng.random_range(m..m + 40);
        let c = rng.random_range(1..6);
        let mut assignment: Vec<usize> = (0..m).chain((m..n).map(|_| rng.random_range(0..m))).collect();
        for i in (1..n).rev() {
            assignment.swap(i, rng.random_range(0..=i));
        }
        let data: Vec<f64> = (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let feats = Tensor::new(vec![n, c], data.clone()).map_err(|e| e.to_string())?;
        let part = SuperpointPartition::new(assignment.clone(), m).map_err(|e| e.to_string())?;

        let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
        for (i, &s) in assignment.iter().enumerate() {
            groups.entry(s).or_default().push(&data[i * c..(i + 1) * c]);
        }
        for mode in [Pooling::Avg, Pooling::Max] {
            let pure = pool_superpoints(&feats, &part, mode).map_err(|e| e.to_string())?;
            let mut tape = Tape::new();
            let x = tape.constant(feats.clone());
            let v = match mode {
                Pooling::Avg => tape.segment_mean(x, &assignment, m),
                Pooling::Max => tape.segment_max(x, &assignment, m),
            }
            .map_err(|e| e.to_string())?;
            let recorded = tape.value(v).clone();
            for (&s, rows) in &groups {
                for k in 0..c {
                    let want = match mode {
                        Pooling::Avg => rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64,
                        Pooling::Max => rows.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max),
                    };
                    for (name, got) in [("pure", pure.at(s, k)), ("tape", recorded.at(s, k))] {
                        if !close(got, want) {
                            return Err(format!("case {case} {mode:?} {name}: [{s},{k}] {got} vs {want}"));
                        }
                    }
                }
            }
        }
    }
    Ok(instances)
}

/// IoU against set arithmetic on index sets.
pub fn iou_sets(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = rng(seed);
    for case in 0..instances {
        let n = rng.random_range(1..60);
        let density = rng.random_range(0.0..1.0);
        let a: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();
        let sa: BTreeSet<usize> = (0..n).filter(|&i| a[i]).collect();
        let sb: BTreeSet<usize> = (0..n).filter(|&i| b[i]).collect();
        let union = sa.union(&sb).count();
        let want = if union == 0 { 1.0 } else { sa.intersection(&sb).count() as f64 / union as f64 };
        let got = iou(&a, &b).map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("case {case}: {got} vs {want}"));
        }
    }
    Ok(instances)
}

/// Region ground truth against a per-point distance loop.
pub fn region_gt(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = rng(seed);
    for case in 0..instances {
        let n = rng.random_range(2..50);
        let cloud = random_cloud(&mut rng, n, 2.0);
        let pos = cloud.positions();
        let object: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.3)).collect();
        let object = if object.is_empty() { vec![rng.random_range(0..n)] } else { object };
        let room: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
        let tau_mode = if rng.random_bool(0.5) { TauMode::Absolute } else { TauMode::Relative };
        let center_mode = if rng.random_bool(0.5) { ObjectCenter::Centroid } else { ObjectCenter::Box };
        let cfg = LossConfig {
            tau: rng.random_range(0.1..3.0),
            tau_mode,
            object_center: center_mode,
            ..LossConfig::default()
        };
        let task = [Task::Reasoning, Task::Refer, Task::Search][case % 3];

        let want: Vec<bool> = if task == Task::Search {
            (0..n).map(|i| room.contains(&i)).collect()
        } else {
            let mut center = [0.0; 3];
            for k in 0..3 {
                let coords: Vec<f64> = object.iter().map(|&i| pos[i][k]).collect();
                center[k] = match center_mode {
                    ObjectCenter::Centroid => coords.iter().sum::<f64>() / coords.len() as f64,
                    ObjectCenter::Box => {
                        let lo = coords.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = coords.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        (lo + hi) / 2.0
                    }
                };
            }
            let dist = |p: &[f64; 3]| ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + (p[2] - center[2]).powi(2)).sqrt();
            let radius = match tau_mode {
                TauMode::Absolute => cfg.tau,
                TauMode::Relative => cfg.tau * object.iter().map(|&i| dist(&pos[i])).fold(0.0, f64::max),
            };
            pos.iter().map(|p| dist(p) < radius).collect()
        };
        let got = make_region_gt(pos, &object, Some(&room), task, &cfg).map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("case {case} ({task}, {tau_mode:?}, {center_mode:?}): masks differ"));
        }
    }
    Ok(instances)
}

/// Union-find reference for the canonical clustering rule: cores within
/// `eps` share a cluster, clusters are numbered by their lowest core index,
/// and border points follow their nearest core (lower index on ties).
pub fn dbscan_reference(points: &[[f64; 3]], eps: f64, min_pts: usize) -> Vec<i64> {
    let n = points.len();
    let d = |a: usize, b: usize| {
        let p = points[a];
        let q = points[b];
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    };
    let within = |a: usize, b: usize| d(a, b) <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| within(i, j)).count() >= min_pts).collect();

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if core[i] && core[j] && within(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut label_of_root: BTreeMap<usize, i64> = BTreeMap::new();
    let mut labels = vec![-1i64; n];
    for i in 0..n {
        if core[i] {
            let root = find(&mut parent, i);
            let next = label_of_root.len() as i64;
            labels[i] = *label_of_root.entry(root).or_insert(next);
        }
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if core[j] && within(i, j) && best.is_none_or(|(bd, _)| d(i, j) < bd) {
                best = Some((d(i, j), j));
            }
        }
        if let Some((_, j)) = best {
            labels[i] = labels[j];
        }
    }
    labels
}

/// DBSCAN against the reference above on 2-D and 3-D point sets.
pub fn dbscan_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = rng(seed);
    for case in 0..instances {
        let n = rng.random_range(1..45);
        let flat = case % 2 == 0;
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let z = if flat { 0.0 } else { rng.random_range(0.0..1.0) };
                [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), z]
            })
            .collect();
        let eps = rng.random_range(0.05..0.4);
        let min_pts = rng.random_range(1..6);
        let got = dbscan(&points, eps, min_pts).map_err(|e| e.to_string())?;
        let want = dbscan_reference(&points, eps, min_pts);
        if got != want {
            return Err(format!("case {case} (n={n}, eps={eps}, min_pts={min_pts}): {got:?} vs {want:?}"));
        }
    }
    Ok(instances)
}

/// Voxel means and grid superpoints against a group-by on floored cells.
pub fn voxel_grouping(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = rng(seed);
    for case in 0..instances {
        let n = rng.random_range(1..100);
        let cloud = random_cloud(&mut rng, n, 1.0);
        let size = rng.random_range(0.05..0.6);
        let cell = |p: &[f64; 3], s: f64| -> [i64; 3] { [0, 1, 2].map(|k| (p[k] / s).floor() as i64) };

        let mut groups: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
        for (i, p) in cloud.positions().iter().enumerate() {
            groups.entry(cell(p, size)).or_default().push(i);
        }
        let vox = voxelize(&cloud, size).map_err(|e| e.to_string())?;
        if vox.voxels.len() != groups.len() {
            return Err(format!("case {case}: {} voxels vs {}", vox.voxels.len(), groups.len()));
        }
        for (key, members) in &groups {
            let id = vox.voxel_of_point[members[0]];
            if vox.voxels[id] != *key || vox.counts[id] != members.len() {
                return Err(format!("case {case}: voxel {key:?} membership differs"));
            }
            for k in 0..3 {
                let color = members.iter().map(|&i| cloud.colors()[i][k]).sum::<f64>() / members.len() as f64;
                let offset = members
                    .iter()
                    .map(|&i| cloud.positions()[i][k] / size - (cloud.positions()[i][k] / size).floor())
                    .sum::<f64>()
                    / members.len() as f64;
                if !close(vox.features[id][k], color) || !close(vox.features[id][3 + k], offset) {
                    return Err(format!("case {case}: voxel {key:?} means differ"));
                }
            }
        }

        let grid = rng.random_range(0.1..0.5);
        let part = compute_superpoints(&cloud, SuperpointMethod::Grid { cell: grid }).map_err(|e| e.to_string())?;
        let mut first_seen: Vec<[i64; 3]> = Vec::new();
        for (i, p) in cloud.positions().iter().enumerate() {
            let key = cell(p, grid);
            let id = first_seen.iter().position(|k| *k == key).unwrap_or_else(|| {
                first_seen.push(key);
                first_seen.len() - 1
            });
            if part.assignment()[i] != id {
                return Err(format!("case {case}: point {i} in superpoint {} vs {id}", part.assignment()[i]));
            }
        }
        if part.count() != first_seen.len() {
            return Err(format!("case {case}: {} superpoints vs {}", part.count(), first_seen.len()));
        }
    }
    Ok(instances)
}
