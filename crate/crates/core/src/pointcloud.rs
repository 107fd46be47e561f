//! Scenes as colored point sets, their voxel and superpoint reductions, and
//! mask transfer between the point and superpoint domains.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use r3d_tensor::Tensor;

use crate::error::{Error, Result};

pub const POINT_FILE_MAGIC: &[u8; 4] = b"R3DP";
pub const POINT_FILE_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
}

impl PointCloud {
    /// Colors are clamped to `[0, 1]`; positions must be finite.
    pub fn new(positions: Vec<[f64; 3]>, colors: Vec<[f64; 3]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Invalid("a point cloud needs at least one point".into()));
        }
        if positions.len() != colors.len() {
            return Err(Error::Invalid(format!(
                "{} positions but {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite point position".into()));
        }
        if colors.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::Invalid("NaN point color".into()));
        }
        let colors = colors.into_iter().map(|c| c.map(|v| v.clamp(0.0, 1.0))).collect();
        Ok(Self { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    /// Serializes as `R3DP`, a version byte, little-endian `u32` N, then N
    /// records of six little-endian `f32` (x, y, z, r, g, b).
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let n = u32::try_from(self.len()).map_err(|_| Error::Invalid("too many points for u32".into()))?;
        w.write_all(POINT_FILE_MAGIC)?;
        w.write_all(&[POINT_FILE_VERSION])?;
        w.write_all(&n.to_le_bytes())?;
        for (p, c) in self.positions.iter().zip(&self.colors) {
            for v in p.iter().chain(c) {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(r).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..4] != POINT_FILE_MAGIC {
            return Err(Error::Schema("not an R3DP point file".into()));
        }
        if bytes[4] != POINT_FILE_VERSION {
            return Err(Error::Schema(format!("unsupported point file version {}", bytes[4])));
        }
        let n = u32::from_le_bytes(bytes[5..9].try_into().expect("four bytes")) as usize;
        let body = &bytes[9..];
        if body.len() != n * 24 {
            return Err(Error::Schema(format!(
                "point file declares {n} points but carries {} payload bytes",
                body.len()
            )));
        }
        let mut positions = Vec::with_capacity(n);
        let mut colors = Vec::with_capacity(n);
        for rec in body.chunks_exact(24) {
            let f = |i: usize| f64::from(f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().expect("four bytes")));
            positions.push([f(0), f(1), f(2)]);
            colors.push([f(3), f(4), f(5)]);
        }
        if colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Schema("point color outside [0, 1]".into()));
        }
        Self::new(positions, colors).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }
}

/// Integer grid cell of `p` for a cubic cell of edge `size`.
pub fn grid_cell(p: &[f64; 3], size: f64) -> [i64; 3] {
    p.map(|v| (v / size).floor() as i64)
}

/// Result of bucketing points into cubic voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct Voxelization {
    /// Grid index of every point.
    pub point_index: Vec<[i64; 3]>,
    /// Voxel id of every point; ids follow first appearance in point order.
    pub voxel_of_point: Vec<usize>,
    /// Grid index of every voxel.
    pub voxels: Vec<[i64; 3]>,
    /// Per voxel: mean member color (3) then mean within-voxel offset (3).
    pub features: Vec<[f64; 6]>,
    pub counts: Vec<usize>,
}

/// Within-voxel offset of `p`, each component in `[0, 1)`.
pub fn voxel_offset(p: &[f64; 3], size: f64) -> [f64; 3] {
    p.map(|v| {
        let s = v / size;
        s - s.floor()
    })
}

pub fn voxelize(pc: &PointCloud, voxel_size: f64) -> Result<Voxelization> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::Invalid(format!("voxel size must be positive, got {voxel_size}")));
    }
    let mut lookup: HashMap<[i64; 3], usize> = HashMap::new();
    let mut out = Voxelization {
        point_index: Vec::with_capacity(pc.len()),
        voxel_of_point: Vec::with_capacity(pc.len()),
        voxels: Vec::new(),
        features: Vec::new(),
        counts: Vec::new(),
    };
    for (p, c) in pc.positions().iter().zip(pc.colors()) {
        let cell = grid_cell(p, voxel_size);
        let id = *lookup.entry(cell).or_insert_with(|| {
            out.voxels.push(cell);
            out.features.push([0.0; 6]);
            out.counts.push(0);
            out.voxels.len() - 1
        });
        let off = voxel_offset(p, voxel_size);
        for k in 0..3 {
            out.features[id][k] += c[k];
            out.features[id][3 + k] += off[k];
        }
        out.counts[id] += 1;
        out.point_index.push(cell);
        out.voxel_of_point.push(id);
    }
    for (f, &n) in out.features.iter_mut().zip(&out.counts) {
        for v in f.iter_mut() {
            *v /= n as f64;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpointPartition {
    assignment: Vec<usize>,
    count: usize,
}

impl SuperpointPartition {
    /// Validates that every id in `0..count` is used and nothing lies outside.
    pub fn new(assignment: Vec<usize>, count: usize) -> Result<Self> {
        let mut seen = vec![false; count];
        for &s in &assignment {
            if s >= count {
                return Err(Error::Invalid(format!("superpoint id {s} outside 0..{count}")));
            }
            seen[s] = true;
        }
        if let Some(empty) = seen.iter().position(|&v| !v) {
            return Err(Error::Invalid(format!("superpoint {empty} has no points")));
        }
        Ok(Self { assignment, count })
    }

    /// Relabels arbitrary group keys to dense ids in first-appearance order.
    pub fn from_labels<K: std::hash::Hash + Eq + Copy>(labels: &[K]) -> Self {
        let mut lookup = HashMap::new();
        let assignment = labels
            .iter()
            .map(|k| {
                let next = lookup.len();
                *lookup.entry(*k).or_insert(next)
            })
            .collect();
        Self {
            assignment,
            count: lookup.len(),
        }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Number of superpoints, M.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn num_points(&self) -> usize {
        self.assignment.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &s in &self.assignment {
            sizes[s] += 1;
        }
        sizes
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.count];
        for (i, &s) in self.assignment.iter().enumerate() {
            members[s].push(i);
        }
        members
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SuperpointMethod {
    /// Uniform cubic cells of the given edge length.
    Grid { cell: f64 },
    /// Greedy graph merging on a k-nearest-neighbour graph; `scale` sets how
    /// readily large segments keep growing.
    Graph { k: usize, scale: f64 },
}

pub fn compute_superpoints(pc: &PointCloud, method: SuperpointMethod) -> Result<SuperpointPartition> {
    match method {
        SuperpointMethod::Grid { cell } => {
            if !(cell > 0.0 && cell.is_finite()) {
                return Err(Error::Invalid(format!("superpoint cell must be positive, got {cell}")));
            }
            let cells: Vec<[i64; 3]> = pc.positions().iter().map(|p| grid_cell(p, cell)).collect();
            Ok(SuperpointPartition::from_labels(&cells))
        }
        SuperpointMethod::Graph { k, scale } => {
            if k == 0 || !(scale > 0.0) {
                return Err(Error::Invalid("graph superpoints need k >= 1 and scale > 0".into()));
            }
            Ok(graph_superpoints(pc, k, scale))
        }
    }
}

/// Indices of the `k` nearest other points to each point, nearest first;
/// distance ties go to the lower index.
pub fn knn_graph(positions: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut others: Vec<(f64, usize)> = positions
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| (dist2(p, q), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Felzenszwalb-style merging: edges are visited by increasing weight and two
/// segments join when the edge is no heavier than either segment's internal
/// spread plus `scale / size`. Segments only ever join across graph edges.
fn graph_superpoints(pc: &PointCloud, k: usize, scale: f64) -> SuperpointPartition {
    let n = pc.len();
    let neighbours = knn_graph(pc.positions(), k);
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n * k);
    for (i, list) in neighbours.iter().enumerate() {
        for &j in list {
            let (a, b) = (i.min(j), i.max(j));
            let color: f64 = (0..3).map(|c| (pc.colors()[a][c] - pc.colors()[b][c]).powi(2)).sum();
            let w = (dist2(&pc.positions()[a], &pc.positions()[b]) + color).sqrt();
            edges.push((w, a, b));
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    edges.dedup_by(|x, y| x.1 == y.1 && x.2 == y.2);

    let mut parent: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut internal = vec![0.0f64; n];
    for (w, a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra == rb {
            continue;
        }
        let ta = internal[ra] + scale / size[ra] as f64;
        let tb = internal[rb] + scale / size[rb] as f64;
        if w <= ta.min(tb) {
            let (keep, drop) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent[drop] = keep;
            size[keep] += size[drop];
            internal[keep] = w.max(internal[keep]).max(internal[drop]);
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    SuperpointPartition::from_labels(&roots)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    #[default]
    Avg,
    Max,
}

/// Pure pooling of `N×C` point features into `M×C` superpoint features.
pub fn pool_superpoints(features: &Tensor, part: &SuperpointPartition, mode: Pooling) -> Result<Tensor> {
    let (n, c) = (features.rows(), features.last_dim());
    if features.rank() != 2 || n != part.num_points() {
        return Err(Error::Invalid(format!(
            "features {:?} do not align with {} assigned points",
            features.shape(),
            part.num_points()
        )));
    }
    let m = part.count();
    let init = match mode {
        Pooling::Avg => 0.0,
        Pooling::Max => f64::NEG_INFINITY,
    };
    let mut out = vec![init; m * c];
    for (i, &s) in part.assignment().iter().enumerate() {
        let dst = &mut out[s * c..(s + 1) * c];
        for (o, &v) in dst.iter_mut().zip(features.row(i)) {
            match mode {
                Pooling::Avg => *o += v,
                Pooling::Max => *o = o.max(v),
            }
        }
    }
    if mode == Pooling::Avg {
        for (s, n) in part.sizes().into_iter().enumerate() {
            for o in &mut out[s * c..(s + 1) * c] {
                *o /= n as f64;
            }
        }
    }
    Ok(Tensor::new(vec![m, c], out)?)
}

/// Every point takes its superpoint's value.
pub fn project_mask_to_points<T: Copy>(superpoint_mask: &[T], part: &SuperpointPartition) -> Result<Vec<T>> {
    if superpoint_mask.len() != part.count() {
        return Err(Error::Invalid(format!(
            "mask of length {} for {} superpoints",
            superpoint_mask.len(),
            part.count()
        )));
    }
    Ok(part.assignment().iter().map(|&s| superpoint_mask[s]).collect())
}

/// A superpoint is foreground iff strictly more than half its points are.
pub fn lift_point_mask_to_superpoints(point_mask: &[bool], part: &SuperpointPartition) -> Result<Vec<bool>> {
    if point_mask.len() != part.num_points() {
        return Err(Error::Invalid(format!(
            "mask of length {} for {} points",
            point_mask.len(),
            part.num_points()
        )));
    }
    let mut fg = vec![0usize; part.count()];
    for (&m, &s) in point_mask.iter().zip(part.assignment()) {
        if m {
            fg[s] += 1;
        }
    }
    Ok(fg.iter().zip(part.sizes()).map(|(&f, n)| 2 * f > n).collect())
}

/// Point mask from a sorted or unsorted index set.
pub fn mask_from_indices(n: usize, indices: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &i in indices {
        *mask
            .get_mut(i)
            .ok_or_else(|| Error::Invalid(format!("point index {i} outside 0..{n}")))? = true;
    }
    Ok(mask)
}

pub fn indices_from_mask(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}
