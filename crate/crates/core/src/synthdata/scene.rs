//! Procedural multi-room scenes.
//!
//! Rooms are squares laid on a grid with gaps between them. Each room holds up
//! to four objects in a 2×2 slot layout, a patchy floor slab just below
//! `z = 0`, and two low walls just outside its lower x and y edges. Room
//! origins and slot edges sit on multiples of 0.25 m and objects keep a margin
//! inside their slot, so no 0.25 m grid cell mixes two objects, two rooms, or
//! an object with the floor.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::lexicon::{Shape, CATEGORIES, COLORS, FLOOR_COLOR, ROOM_TYPES, SIZES};
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

pub const ROOM_GAP: f64 = 0.5;
pub const SLOT_MARGIN: f64 = 0.125;
pub const SLOTS_PER_ROOM: usize = 4;
const FLOOR_DEPTH: f64 = 0.05;
const WALL_THICKNESS: f64 = 0.1;
const WALL_HEIGHT: f64 = 0.4;
const FLOOR_PATCH: usize = 5;
const COLOR_NOISE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct RoomSpec {
    pub room_type: usize,
    /// Lower x/y corner.
    pub origin: [f64; 2],
    pub side: f64,
}

impl RoomSpec {
    pub fn contains_xy(&self, p: &[f64; 3]) -> bool {
        (0..2).all(|k| self.origin[k] <= p[k] && p[k] <= self.origin[k] + self.side)
    }

    pub fn name(&self) -> &'static str {
        ROOM_TYPES[self.room_type].0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub category: usize,
    pub color: usize,
    pub size: usize,
    pub room: usize,
    /// Center of the footprint at floor level.
    pub base_center: [f64; 3],
    /// Extent along x, y, z.
    pub extent: [f64; 3],
}

impl ObjectSpec {
    pub fn shape(&self) -> Shape {
        CATEGORIES[self.category].shape
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub rooms: Vec<RoomSpec>,
    pub objects: Vec<ObjectSpec>,
}

/// A generated scene with its point-level ownership.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub spec: SceneSpec,
    pub cloud: PointCloud,
    /// Sorted point indices of each object.
    pub object_points: Vec<Vec<usize>>,
    /// Sorted point indices of each room (floor, walls and its objects).
    pub room_points: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub n_rooms: usize,
    pub objects_per_room: usize,
    pub points_per_object: usize,
    /// Fraction of all points that are floor or wall.
    pub filler_fraction: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            n_rooms: 1,
            objects_per_room: 3,
            points_per_object: 80,
            filler_fraction: 0.4,
        }
    }
}

/// Mixture weights for object point colors: attribute, category, room.
const OBJECT_MIX: [f64; 3] = [0.42, 0.33, 0.25];
/// Share of filler points painted in the room accent.
const FILLER_ACCENT: f64 = 0.6;

struct Builder {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    noise: Normal<f64>,
}

impl Builder {
    fn push(&mut self, rng: &mut impl Rng, p: [f64; 3], base: [f64; 3]) -> usize {
        // Values pass through f32 so a written point file reads back exactly.
        let round = |v: f64| f64::from(v as f32);
        let c = base.map(|v| round((v + self.noise.sample(rng)).clamp(0.0, 1.0)));
        self.positions.push(p.map(round));
        self.colors.push(c);
        self.positions.len() - 1
    }
}

fn pick_color(rng: &mut impl Rng, palette: &[([f64; 3], f64)]) -> [f64; 3] {
    let mut u: f64 = rng.random();
    for &(c, w) in palette {
        if u < w {
            return c;
        }
        u -= w;
    }
    palette.last().expect("palette is non-empty").0
}

fn surface_point(rng: &mut impl Rng, obj: &ObjectSpec) -> [f64; 3] {
    let [cx, cy, _] = obj.base_center;
    let [ex, ey, ez] = obj.extent;
    match obj.shape() {
        Shape::Box => {
            // Top and four sides, chosen by area.
            let areas = [ex * ey, ex * ez, ex * ez, ey * ez, ey * ez];
            let total: f64 = areas.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut face = 0;
            while face < 4 && u >= areas[face] {
                u -= areas[face];
                face += 1;
            }
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            let x0 = cx - ex / 2.0;
            let y0 = cy - ey / 2.0;
            match face {
                0 => [x0 + a * ex, y0 + b * ey, ez],
                1 => [x0 + a * ex, y0, b * ez],
                2 => [x0 + a * ex, y0 + ey, b * ez],
                3 => [x0, y0 + a * ey, b * ez],
                _ => [x0 + ex, y0 + a * ey, b * ez],
            }
        }
        Shape::Cylinder => {
            let r = ex.min(ey) / 2.0;
            let side = 2.0 * std::f64::consts::PI * r * ez;
            let top = std::f64::consts::PI * r * r;
            let theta = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
            if rng.random::<f64>() * (side + top) < side {
                [cx + r * theta.cos(), cy + r * theta.sin(), rng.random::<f64>() * ez]
            } else {
                let rr = r * rng.random::<f64>().sqrt();
                [cx + rr * theta.cos(), cy + rr * theta.sin(), ez]
            }
        }
        Shape::Sphere => {
            let r = ex.min(ey).min(ez) / 2.0;
            let z: f64 = rng.random_range(-1.0..=1.0);
            let theta = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
            let s = (1.0 - z * z).sqrt();
            [cx + r * s * theta.cos(), cy + r * s * theta.sin(), r + r * z]
        }
    }
}

/// Room side lengths; multiples of 0.5 m keep slot edges on the 0.25 m grid.
const ROOM_SIDES: [f64; 2] = [2.5, 3.0];

/// Draws the layout: room types, object categories, colors, sizes, placements.
///
/// `category_pool` limits which categories appear, so multi-room scenes repeat
/// categories across rooms.
pub fn generate_spec(rng: &mut impl Rng, params: &SceneParams) -> Result<SceneSpec> {
    if params.n_rooms == 0 {
        return Err(Error::InfeasiblePacking("a scene needs at least one room".into()));
    }
    if params.n_rooms > ROOM_TYPES.len() {
        return Err(Error::InfeasiblePacking(format!(
            "{} rooms but only {} distinct room types",
            params.n_rooms,
            ROOM_TYPES.len()
        )));
    }
    if params.objects_per_room == 0 || params.objects_per_room > SLOTS_PER_ROOM {
        return Err(Error::InfeasiblePacking(format!(
            "objects per room must be 1..={SLOTS_PER_ROOM}, got {}",
            params.objects_per_room
        )));
    }
    let mut types: Vec<usize> = (0..ROOM_TYPES.len()).collect();
    types.shuffle(rng);
    let mut pool: Vec<usize> = (0..CATEGORIES.len()).collect();
    pool.shuffle(rng);
    if params.n_rooms > 1 {
        pool.truncate((params.objects_per_room + 1).max(4));
    }

    let columns = (params.n_rooms as f64).sqrt().ceil() as usize;
    let pitch = ROOM_SIDES[ROOM_SIDES.len() - 1] + ROOM_GAP;
    let mut rooms = Vec::with_capacity(params.n_rooms);
    let mut objects = Vec::new();
    for r in 0..params.n_rooms {
        let side = ROOM_SIDES[rng.random_range(0..ROOM_SIDES.len())];
        let origin = [(r % columns) as f64 * pitch, (r / columns) as f64 * pitch];
        rooms.push(RoomSpec {
            room_type: types[r],
            origin,
            side,
        });

        let mut cats = pool.clone();
        cats.shuffle(rng);
        let mut slots: Vec<usize> = (0..SLOTS_PER_ROOM).collect();
        slots.shuffle(rng);
        let slot_side = side / 2.0;
        for (&category, &slot) in cats.iter().zip(&slots).take(params.objects_per_room) {
            let size = rng.random_range(0..SIZES.len());
            let scale = SIZES[size].1;
            let dims = CATEGORIES[category].dims.map(|d| d * scale);
            let (ex, ey) = if rng.random_bool(0.5) { (dims[0], dims[1]) } else { (dims[1], dims[0]) };
            let extent = [ex, ey, dims[2]];
            let sx = origin[0] + (slot % 2) as f64 * slot_side;
            let sy = origin[1] + (slot / 2) as f64 * slot_side;
            let mut center = [0.0; 3];
            for (k, (s, e)) in [(sx, ex), (sy, ey)].into_iter().enumerate() {
                let lo = s + SLOT_MARGIN + e / 2.0;
                let hi = s + slot_side - SLOT_MARGIN - e / 2.0;
                if lo > hi {
                    return Err(Error::InfeasiblePacking(format!(
                        "{} of extent {e:.2} m does not fit a {slot_side:.2} m slot",
                        CATEGORIES[category].name
                    )));
                }
                center[k] = rng.random_range(lo..=hi);
            }
            objects.push(ObjectSpec {
                category,
                color: rng.random_range(0..COLORS.len()),
                size,
                room: r,
                base_center: center,
                extent,
            });
        }
    }
    Ok(SceneSpec { rooms, objects })
}

/// Samples points for a layout.
pub fn realize(rng: &mut impl Rng, id: &str, spec: SceneSpec, params: &SceneParams) -> Result<Scene> {
    if params.points_per_object == 0 {
        return Err(Error::InfeasiblePacking("objects need at least one point".into()));
    }
    let mut b = Builder {
        positions: Vec::new(),
        colors: Vec::new(),
        noise: Normal::new(0.0, COLOR_NOISE).expect("positive deviation"),
    };
    let mut object_points = vec![Vec::new(); spec.objects.len()];
    let mut room_points = vec![Vec::new(); spec.rooms.len()];

    for (o, obj) in spec.objects.iter().enumerate() {
        let accent = ROOM_TYPES[spec.rooms[obj.room].room_type].1;
        let palette = [
            (COLORS[obj.color].1, OBJECT_MIX[0]),
            (CATEGORIES[obj.category].signature, OBJECT_MIX[1]),
            (accent, OBJECT_MIX[2]),
        ];
        for _ in 0..params.points_per_object {
            let p = surface_point(rng, obj);
            let c = pick_color(rng, &palette);
            let i = b.push(rng, p, c);
            object_points[o].push(i);
            room_points[obj.room].push(i);
        }
    }

    let f = params.filler_fraction.clamp(0.0, 0.95);
    for (r, room) in spec.rooms.iter().enumerate() {
        let objects_here = spec.objects.iter().filter(|o| o.room == r).count();
        let object_total = (objects_here * params.points_per_object) as f64;
        let filler = ((object_total * f / (1.0 - f)).round() as usize).max(FLOOR_PATCH);
        let wall_count = filler / 5;
        let floor_count = filler - wall_count;
        let palette = [(FLOOR_COLOR, 1.0 - FILLER_ACCENT), (ROOM_TYPES[room.room_type].1, FILLER_ACCENT)];

        // Floor: patches of a few points in distinct 0.25 m cells.
        let cells_per_side = (room.side / 0.25).round() as usize;
        let mut cells: Vec<usize> = (0..cells_per_side * cells_per_side).collect();
        cells.shuffle(rng);
        let patches = floor_count.div_ceil(FLOOR_PATCH).min(cells.len());
        for k in 0..floor_count {
            let cell = cells[k % patches];
            let (cx, cy) = ((cell % cells_per_side) as f64, (cell / cells_per_side) as f64);
            let p = [
                room.origin[0] + (cx + rng.random_range(0.05..0.95)) * 0.25,
                room.origin[1] + (cy + rng.random_range(0.05..0.95)) * 0.25,
                -rng.random_range(0.005..FLOOR_DEPTH),
            ];
            let c = pick_color(rng, &palette);
            room_points[r].push(b.push(rng, p, c));
        }
        // Walls just outside the lower x and y edges.
        for k in 0..wall_count {
            let along = room.origin[k % 2] + rng.random_range(0.0..room.side);
            let across = room.origin[(k + 1) % 2] - rng.random_range(0.01..WALL_THICKNESS);
            let mut p = [0.0, 0.0, rng.random_range(0.0..WALL_HEIGHT)];
            p[k % 2] = along;
            p[(k + 1) % 2] = across;
            let c = pick_color(rng, &palette);
            room_points[r].push(b.push(rng, p, c));
        }
    }
    for list in room_points.iter_mut() {
        list.sort_unstable();
    }
    let cloud = PointCloud::new(b.positions, b.colors)?;
    Ok(Scene {
        id: id.to_string(),
        spec,
        cloud,
        object_points,
        room_points,
    })
}

pub fn generate_scene(rng: &mut impl Rng, id: &str, params: &SceneParams) -> Result<Scene> {
    let spec = generate_spec(rng, params)?;
    realize(rng, id, spec, params)
}

impl Scene {
    /// Room index owning each point.
    pub fn room_of_point(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.cloud.len()];
        for (r, pts) in self.room_points.iter().enumerate() {
            for &i in pts {
                out[i] = r;
            }
        }
        out
    }
}
